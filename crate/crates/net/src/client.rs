//! Operator-side client: receives frames for the attached device, decodes
//! them, renders the viewport for the current view pose and records stage
//! stamps. View changes re-render locally and never touch the network.

use std::collections::VecDeque;
use std::io::{self, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use avatar_core::codec::decode_frame;
use avatar_core::frame::{StageId, StageStamp};
use avatar_core::view::ViewTable;
use avatar_core::{Exec, RgbImage, ViewPose};
use thiserror::Error;

use crate::clock::Clock;
use crate::stage::push_stamp;
use crate::wire::{
    encode_message, msg_type, read_message, ControlApplied, ControlPayload, DeviceInfo, Hello, Message, Ping, Pong, Role,
    WireError, WireMessage, CONTROL_ESTOP,
};

const EVENT_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach relay: {0}")]
    Connect(io::Error),
    #[error("connection lost: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("relay error {code}: {message}")]
    Rejected { code: u8, message: String },
    #[error("connection closed")]
    Closed,
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub relay: SocketAddr,
    pub name: String,
    pub viewport_width: u32,
    pub viewport_height: u32,
    pub fov_rad: f64,
    pub clock: Clock,
    pub exec: Exec,
    /// Keep every frame's encoded payload in the log (tests, replay checks).
    pub keep_payloads: bool,
}

impl ClientConfig {
    pub fn new(relay: SocketAddr) -> Self {
        Self {
            relay,
            name: "client".into(),
            viewport_width: 640,
            viewport_height: 360,
            fov_rad: 90f64.to_radians(),
            clock: Clock::system(),
            exec: Exec::default(),
            keep_payloads: false,
        }
    }
}

/// The most recently presented frame.
#[derive(Debug, Clone)]
pub struct Presented {
    pub device_id: u32,
    pub seq: u64,
    pub t_capture_ns: u64,
    pub flags: u16,
    /// Device, relay and client stamps, ending with `displayed`.
    pub stages: Vec<StageStamp>,
    pub panorama: Arc<RgbImage>,
    /// `None` when the view could not be rendered.
    pub viewport: Option<RgbImage>,
}

impl Presented {
    pub fn t_display_ns(&self) -> u64 {
        self.stages.last().map(|s| s.t_ns).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLog {
    pub device_id: u32,
    pub seq: u64,
    pub t_capture_ns: u64,
    pub flags: u16,
    pub stages: Vec<StageStamp>,
    pub payload: Option<Vec<u8>>,
    pub decoded: bool,
}

struct Shared {
    cfg: ClientConfig,
    pose: Mutex<ViewPose>,
    /// Ray table for the current pitch, roll and viewport.
    view_table: Mutex<Option<ViewTable>>,
    presented: Mutex<Option<Arc<Presented>>>,
    frame_cv: Condvar,
    /// Non-frame messages with their local receive time.
    events: Mutex<VecDeque<(u64, Message)>>,
    event_cv: Condvar,
    log: Mutex<Vec<FrameLog>>,
    frames: AtomicU64,
    decode_failures: AtomicU64,
    closed: AtomicBool,
}

pub struct Client {
    id: u32,
    writer: Mutex<TcpStream>,
    shared: Arc<Shared>,
    reader: Option<JoinHandle<()>>,
    sent: AtomicU64,
    control_seq: AtomicU64,
    nonce: AtomicU64,
    attached: Mutex<Option<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PingSample {
    pub t_send_ns: u64,
    pub t_remote_ns: u64,
    pub t_recv_ns: u64,
}

impl PingSample {
    pub fn rtt_ns(&self) -> u64 {
        self.t_recv_ns - self.t_send_ns
    }

    /// Remote clock minus local clock, assuming a symmetric path.
    pub fn offset_ns(&self) -> i64 {
        self.t_remote_ns as i64 - ((self.t_send_ns as i128 + self.t_recv_ns as i128) / 2) as i64
    }
}

impl Client {
    pub fn connect(cfg: ClientConfig) -> Result<Self, ClientError> {
        let mut stream = TcpStream::connect(cfg.relay).map_err(ClientError::Connect)?;
        let _ = stream.set_nodelay(true);
        let hello: WireMessage = Message::Hello(Hello {
            role: Role::Client,
            id: 0,
            name: cfg.name.clone(),
        })
        .into();
        stream.write_all(&encode_message(&hello))?;
        stream.set_read_timeout(Some(Duration::from_secs(5)))?;
        let id = match read_message(&mut stream)? {
            Some(WireMessage {
                body: Message::Ack { id, .. },
                ..
            }) => id,
            Some(WireMessage {
                body: Message::Error { code, message },
                ..
            }) => return Err(ClientError::Rejected { code, message }),
            _ => return Err(ClientError::Closed),
        };
        stream.set_read_timeout(None)?;
        let shared = Arc::new(Shared {
            pose: Mutex::new(ViewPose::default()),
            view_table: Mutex::new(None),
            presented: Mutex::new(None),
            frame_cv: Condvar::new(),
            events: Mutex::new(VecDeque::new()),
            event_cv: Condvar::new(),
            log: Mutex::new(Vec::new()),
            frames: AtomicU64::new(0),
            decode_failures: AtomicU64::new(0),
            closed: AtomicBool::new(false),
            cfg,
        });
        let reader = {
            let shared = shared.clone();
            let stream = stream.try_clone()?;
            thread::Builder::new().name(format!("client-{id}")).spawn(move || read_loop(shared, stream))?
        };
        Ok(Self {
            id,
            writer: Mutex::new(stream),
            shared,
            reader: Some(reader),
            sent: AtomicU64::new(1),
            control_seq: AtomicU64::new(0),
            nonce: AtomicU64::new(0),
            attached: Mutex::new(None),
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn clock(&self) -> Clock {
        self.shared.cfg.clock
    }

    /// Messages written to the relay so far, including the HELLO.
    pub fn sent_messages(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }

    fn send(&self, msg: Message) -> Result<(), ClientError> {
        let bytes = encode_message(&msg.into());
        self.writer.lock().unwrap().write_all(&bytes)?;
        self.sent.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    fn wait_event<T>(&self, what: &'static str, timeout: Duration, mut pick: impl FnMut(u64, &Message) -> Option<Result<T, ClientError>>) -> Result<T, ClientError> {
        let deadline = Instant::now() + timeout;
        let mut q = self.shared.events.lock().unwrap();
        loop {
            if let Some(i) = q.iter().position(|(t, m)| pick(*t, m).is_some()) {
                let (t, m) = q.remove(i).unwrap();
                return pick(t, &m).unwrap();
            }
            if self.shared.closed.load(Ordering::SeqCst) {
                return Err(ClientError::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ClientError::Timeout(what));
            }
            q = self.shared.event_cv.wait_timeout(q, deadline - now).unwrap().0;
        }
    }

    fn rejection(m: &Message) -> Option<Result<(), ClientError>> {
        match m {
            Message::Error { code, message } => Some(Err(ClientError::Rejected {
                code: *code,
                message: message.clone(),
            })),
            _ => None,
        }
    }

    pub fn list_devices(&self) -> Result<Vec<DeviceInfo>, ClientError> {
        self.send(Message::ListDevices)?;
        self.wait_event("device list", Duration::from_secs(5), |_, m| match m {
            Message::DeviceList(l) => Some(Ok(l.clone())),
            _ => None,
        })
    }

    /// Attaches to a device; on return no frame from a previously attached
    /// device will be presented.
    pub fn attach(&self, device_id: u32) -> Result<(), ClientError> {
        self.send(Message::Attach { device_id })?;
        self.wait_event("attach ack", Duration::from_secs(5), |_, m| match m {
            Message::Ack { acked_type, id } if *acked_type == msg_type::ATTACH && *id == device_id => Some(Ok(())),
            other => Self::rejection(other),
        })?;
        *self.attached.lock().unwrap() = Some(device_id);
        Ok(())
    }

    pub fn attached(&self) -> Option<u32> {
        *self.attached.lock().unwrap()
    }

    /// Sends a CONTROL to the attached device. Returns `(seq, t_send_ns)`.
    pub fn send_control(&self, linear_mps: f32, angular_radps: f32, estop: bool, opaque: Vec<u8>) -> Result<(u64, u64), ClientError> {
        let device_id = self.attached().ok_or(ClientError::Rejected {
            code: crate::wire::error_code::NOT_ATTACHED,
            message: "not attached".into(),
        })?;
        let seq = self.control_seq.fetch_add(1, Ordering::SeqCst) + 1;
        let t_send_ns = self.clock().now_ns();
        self.send(Message::Control(ControlPayload {
            device_id,
            seq,
            t_send_ns,
            linear_mps,
            angular_radps,
            flags: if estop { CONTROL_ESTOP } else { 0 },
            opaque,
        }))?;
        Ok((seq, t_send_ns))
    }

    pub fn wait_control_applied(&self, seq: u64, timeout: Duration) -> Result<ControlApplied, ClientError> {
        self.wait_event("control applied", timeout, |_, m| match m {
            Message::ControlApplied(a) if a.seq == seq => Some(Ok(*a)),
            _ => None,
        })
    }

    /// Next ERROR from the relay, if one arrives within `timeout`.
    pub fn wait_error(&self, timeout: Duration) -> Option<(u8, String)> {
        self.wait_event("error", timeout, |_, m| match m {
            Message::Error { code, message } => Some(Ok((*code, message.clone()))),
            _ => None,
        })
        .ok()
    }

    /// One PING/PONG exchange with the relay or the attached device.
    pub fn ping(&self, target: u8, timeout: Duration) -> Result<PingSample, ClientError> {
        let nonce = self.nonce.fetch_add(1, Ordering::SeqCst);
        let t_send_ns = self.clock().now_ns();
        self.send(Message::Ping(Ping {
            nonce,
            target,
            origin: self.id,
            t_send_ns,
        }))?;
        let (pong, t_recv_ns): (Pong, u64) = self.wait_event("pong", timeout, |t, m| match m {
            Message::Pong(p) if p.nonce == nonce => Some(Ok((*p, t))),
            Message::Error { code, message } => Some(Err(ClientError::Rejected {
                code: *code,
                message: message.clone(),
            })),
            _ => None,
        })?;
        Ok(PingSample {
            t_send_ns,
            t_remote_ns: pong.t_remote_ns,
            t_recv_ns,
        })
    }

    pub fn set_view_pose(&self, pose: ViewPose) -> Option<RgbImage> {
        *self.shared.pose.lock().unwrap() = pose;
        let p = self.shared.presented.lock().unwrap().clone()?;
        render_viewport(&self.shared, &p.panorama, &pose)
    }

    pub fn view_pose(&self) -> ViewPose {
        *self.shared.pose.lock().unwrap()
    }

    pub fn latest(&self) -> Option<Arc<Presented>> {
        self.shared.presented.lock().unwrap().clone()
    }

    /// Waits for a frame presented after `after_seq` (or any frame when
    /// `None`), from any device.
    pub fn wait_frame(&self, after_seq: Option<u64>, timeout: Duration) -> Result<Arc<Presented>, ClientError> {
        let deadline = Instant::now() + timeout;
        let mut p = self.shared.presented.lock().unwrap();
        loop {
            if let Some(f) = p.as_ref() {
                if after_seq.is_none_or(|s| f.seq > s) {
                    return Ok(f.clone());
                }
            }
            if self.shared.closed.load(Ordering::SeqCst) {
                return Err(ClientError::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ClientError::Timeout("frame"));
            }
            p = self.shared.frame_cv.wait_timeout(p, deadline - now).unwrap().0;
        }
    }

    /// Waits until a different frame than `current` is presented.
    pub fn wait_next_frame(&self, current: &Presented, timeout: Duration) -> Result<Arc<Presented>, ClientError> {
        let deadline = Instant::now() + timeout;
        let mut p = self.shared.presented.lock().unwrap();
        loop {
            if let Some(f) = p.as_ref() {
                if f.seq != current.seq || f.device_id != current.device_id {
                    return Ok(f.clone());
                }
            }
            if self.shared.closed.load(Ordering::SeqCst) {
                return Err(ClientError::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(ClientError::Timeout("next frame"));
            }
            p = self.shared.frame_cv.wait_timeout(p, deadline - now).unwrap().0;
        }
    }

    pub fn frames_received(&self) -> u64 {
        self.shared.frames.load(Ordering::SeqCst)
    }

    pub fn decode_failures(&self) -> u64 {
        self.shared.decode_failures.load(Ordering::SeqCst)
    }

    pub fn frame_log(&self) -> Vec<FrameLog> {
        self.shared.log.lock().unwrap().clone()
    }

    pub fn clear_frame_log(&self) {
        self.shared.log.lock().unwrap().clear();
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }

    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let _ = self.writer.lock().unwrap().shutdown(std::net::Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn render_viewport(shared: &Shared, pano: &RgbImage, pose: &ViewPose) -> Option<RgbImage> {
    let cfg = &shared.cfg;
    let (w, h) = (cfg.viewport_width, cfg.viewport_height);
    let mut table = shared.view_table.lock().unwrap();
    if !table.as_ref().is_some_and(|t| t.fits(pose, cfg.fov_rad, w, h)) {
        *table = Some(ViewTable::new(cfg.exec, pose, cfg.fov_rad, w, h).ok()?);
    }
    table.as_ref()?.render(cfg.exec, pano, pose.yaw_rad).ok()
}

fn read_loop(shared: Arc<Shared>, stream: TcpStream) {
    let clock = shared.cfg.clock;
    let mut r = BufReader::with_capacity(1 << 16, stream);
    loop {
        let msg = match read_message(&mut r) {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(e) => {
                log::debug!("client: read ended: {e}");
                break;
            }
        };
        let t_recv = clock.now_ns();
        match msg.body {
            Message::Frame(f) => {
                shared.frames.fetch_add(1, Ordering::SeqCst);
                let mut stages = f.stages;
                push_stamp(&mut stages, StageId::ClientReceived, t_recv);
                let decoded = decode_frame(&f.data, f.codec, f.width as u32, f.height as u32);
                let mut entry = FrameLog {
                    device_id: f.device_id,
                    seq: f.seq,
                    t_capture_ns: f.t_capture_ns,
                    flags: msg.flags,
                    stages: Vec::new(),
                    payload: shared.cfg.keep_payloads.then(|| f.data.clone()),
                    decoded: decoded.is_ok(),
                };
                match decoded {
                    Ok(pano) => {
                        push_stamp(&mut stages, StageId::Decoded, clock.now_ns());
                        let pose = *shared.pose.lock().unwrap();
                        let viewport = render_viewport(&shared, &pano, &pose);
                        push_stamp(&mut stages, StageId::Displayed, clock.now_ns());
                        entry.stages = stages.clone();
                        let p = Arc::new(Presented {
                            device_id: f.device_id,
                            seq: f.seq,
                            t_capture_ns: f.t_capture_ns,
                            flags: msg.flags,
                            stages,
                            panorama: Arc::new(pano),
                            viewport,
                        });
                        *shared.presented.lock().unwrap() = Some(p);
                        shared.frame_cv.notify_all();
                    }
                    Err(e) => {
                        // Keep showing the last good frame.
                        log::warn!("client: frame {} undecodable: {e}", f.seq);
                        shared.decode_failures.fetch_add(1, Ordering::SeqCst);
                        entry.stages = stages;
                    }
                }
                shared.log.lock().unwrap().push(entry);
            }
            other => {
                let mut q = shared.events.lock().unwrap();
                q.push_back((t_recv, other));
                trim(&mut q);
                shared.event_cv.notify_all();
            }
        }
    }
    shared.closed.store(true, Ordering::SeqCst);
    shared.frame_cv.notify_all();
    shared.event_cv.notify_all();
}

fn trim(q: &mut VecDeque<(u64, Message)>) {
    while q.len() > EVENT_CAP {
        q.pop_front();
    }
}
