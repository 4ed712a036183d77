//! The relay: registers devices and clients, forwards frames from a device
//! to every client attached to it and control from the controlling client
//! to the device, optionally processes and records frames.
//!
//! Threads: one accept loop per listener, a reader and a writer per TCP
//! connection (a single loop for WebSocket connections), and one forwarder
//! per device that owns the delay line and the processing stage, so a slow
//! stage never blocks the device's reader.

use std::collections::HashMap;
use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;
use tungstenite::Message as WsMessage;

use crate::clock::{sleep_until_ns, Clock};
use crate::outbox::{Outbox, DEFAULT_FRAME_CAP};
use crate::record::{RecordError, Recorder};
use crate::registry::{Registry, DEFAULT_STALE_NS};
use crate::stage::{apply_stage, StageSpec};
use crate::wire::{
    decode_message, encode_message, error_code, msg_type, read_raw, FramePayload, Header, Message, Pong, Role,
    WireMessage, FLAG_STAGE_ERROR, PING_DEVICE, PING_RELAY,
};

#[derive(Debug, Error)]
pub enum RelayError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Record(#[from] RecordError),
}

#[derive(Debug, Clone)]
pub struct RelayConfig {
    pub listen: SocketAddr,
    /// Second listener carrying the same protocol over WebSocket, one wire
    /// message per binary WebSocket message.
    pub ws_listen: Option<SocketAddr>,
    pub stage: StageSpec,
    pub record_dir: Option<PathBuf>,
    pub stale_after: Duration,
    pub frame_cap: usize,
    pub clock: Clock,
}

impl RelayConfig {
    pub fn new(listen: SocketAddr) -> Self {
        Self {
            listen,
            ws_listen: None,
            stage: StageSpec::Noop,
            record_dir: None,
            stale_after: Duration::from_nanos(DEFAULT_STALE_NS),
            frame_cap: DEFAULT_FRAME_CAP,
            clock: Clock::system(),
        }
    }

    /// Ephemeral loopback port.
    pub fn loopback() -> Self {
        Self::new(SocketAddr::from(([127, 0, 0, 1], 0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Peer {
    Unknown,
    Device(u32),
    Client(u32),
}

struct Conn {
    outbox: Arc<Outbox>,
    peer: Peer,
    stream: Option<TcpStream>,
}

struct Pending {
    recv_t_ns: u64,
    flags: u16,
    frame: FramePayload,
}

struct State {
    registry: Registry,
    conns: HashMap<u64, Conn>,
    client_conns: HashMap<u32, u64>,
    forwarders: HashMap<u32, Sender<Pending>>,
    next_conn: u64,
    next_client: u32,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RelayStats {
    pub frames_received: u64,
    pub frames_forwarded: u64,
    pub stage_errors: u64,
}

struct Shared {
    cfg: RelayConfig,
    state: Mutex<State>,
    recorder: Option<Mutex<Recorder>>,
    stop: AtomicBool,
    frames_received: AtomicU64,
    frames_forwarded: AtomicU64,
    stage_errors: AtomicU64,
}

pub struct Relay {
    addr: SocketAddr,
    ws_addr: Option<SocketAddr>,
    recording: Option<PathBuf>,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Relay {
    pub fn start(cfg: RelayConfig) -> Result<Self, RelayError> {
        let listener = TcpListener::bind(cfg.listen)?;
        let addr = listener.local_addr()?;
        let ws = cfg.ws_listen.map(TcpListener::bind).transpose()?;
        let ws_addr = ws.as_ref().map(|l| l.local_addr()).transpose()?;
        let recorder = cfg.record_dir.as_ref().map(Recorder::create_in).transpose()?;
        let recording = recorder.as_ref().map(|r| r.path().to_path_buf());
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                registry: Registry::new(cfg.stale_after.as_nanos() as u64),
                conns: HashMap::new(),
                client_conns: HashMap::new(),
                forwarders: HashMap::new(),
                next_conn: 1,
                next_client: 1,
            }),
            recorder: recorder.map(Mutex::new),
            stop: AtomicBool::new(false),
            frames_received: AtomicU64::new(0),
            frames_forwarded: AtomicU64::new(0),
            stage_errors: AtomicU64::new(0),
            cfg,
        });
        let mut threads = Vec::new();
        let s = shared.clone();
        threads.push(thread::Builder::new().name("relay-accept".into()).spawn(move || accept_loop(s, listener, false))?);
        if let Some(l) = ws {
            let s = shared.clone();
            threads.push(thread::Builder::new().name("relay-ws-accept".into()).spawn(move || accept_loop(s, l, true))?);
        }
        log::info!("relay listening on {addr} (stage {})", shared.cfg.stage);
        Ok(Self {
            addr,
            ws_addr,
            recording,
            shared,
            threads,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    pub fn recording_path(&self) -> Option<&PathBuf> {
        self.recording.as_ref()
    }

    pub fn stats(&self) -> RelayStats {
        RelayStats {
            frames_received: self.shared.frames_received.load(Ordering::Relaxed),
            frames_forwarded: self.shared.frames_forwarded.load(Ordering::Relaxed),
            stage_errors: self.shared.stage_errors.load(Ordering::Relaxed),
        }
    }

    /// Blocks until the listener threads exit (they run until shutdown).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(a) = self.ws_addr {
            let _ = TcpStream::connect(a);
        }
        {
            let mut st = self.shared.state.lock().unwrap();
            for c in st.conns.values() {
                c.outbox.close();
                if let Some(s) = &c.stream {
                    let _ = s.shutdown(Shutdown::Both);
                }
            }
            st.forwarders.clear();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Relay {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener, websocket: bool) {
    for conn in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = conn else { continue };
        let _ = stream.set_nodelay(true);
        let s = shared.clone();
        let spawned = if websocket {
            thread::Builder::new().name("relay-ws".into()).spawn(move || serve_ws(s, stream))
        } else {
            thread::Builder::new().name("relay-conn".into()).spawn(move || serve_tcp(s, stream))
        };
        if let Err(e) = spawned {
            log::error!("relay: cannot spawn connection thread: {e}");
        }
    }
}

fn register_conn(shared: &Shared, stream: Option<TcpStream>) -> (u64, Arc<Outbox>) {
    let outbox = Arc::new(Outbox::new(shared.cfg.frame_cap));
    let mut st = shared.state.lock().unwrap();
    let id = st.next_conn;
    st.next_conn += 1;
    st.conns.insert(
        id,
        Conn {
            outbox: outbox.clone(),
            peer: Peer::Unknown,
            stream,
        },
    );
    (id, outbox)
}

fn serve_tcp(shared: Arc<Shared>, stream: TcpStream) {
    let Ok(write_half) = stream.try_clone() else { return };
    let (conn, outbox) = register_conn(&shared, stream.try_clone().ok());
    let writer = {
        let outbox = outbox.clone();
        thread::spawn(move || write_loop(write_half, &outbox))
    };
    let mut reader = BufReader::with_capacity(1 << 16, stream);
    loop {
        match read_raw(&mut reader) {
            Ok(Some((h, bytes))) => {
                if !on_message(&shared, conn, h, bytes) {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                log::debug!("relay: connection {conn} read error: {e}");
                send_error(&outbox, error_code::BAD_MESSAGE, &e.to_string());
                break;
            }
        }
    }
    cleanup(&shared, conn);
    let _ = writer.join();
}

fn write_loop(mut stream: TcpStream, outbox: &Outbox) {
    loop {
        match outbox.pop(Duration::from_millis(200)) {
            Ok(Some(bytes)) => {
                if stream.write_all(&bytes).is_err() {
                    outbox.close();
                    break;
                }
            }
            Ok(None) => {}
            Err(()) => break,
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn serve_ws(shared: Arc<Shared>, stream: TcpStream) {
    let raw = stream.try_clone().ok();
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("relay: websocket handshake failed: {e}");
            return;
        }
    };
    if ws.get_ref().set_read_timeout(Some(Duration::from_millis(5))).is_err() {
        return;
    }
    let (conn, outbox) = register_conn(&shared, raw);
    'outer: loop {
        loop {
            match outbox.pop(Duration::ZERO) {
                Ok(Some(bytes)) => {
                    if ws.send(WsMessage::binary(bytes.to_vec())).is_err() {
                        break 'outer;
                    }
                }
                Ok(None) => break,
                Err(()) => break 'outer,
            }
        }
        match ws.read() {
            Ok(WsMessage::Binary(data)) => {
                let keep = match Header::parse(&data) {
                    Ok(h) => on_message(&shared, conn, h, data.to_vec()),
                    Err(e) => {
                        send_error(&outbox, error_code::BAD_MESSAGE, &e.to_string());
                        true
                    }
                };
                if !keep {
                    break;
                }
            }
            Ok(WsMessage::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    cleanup(&shared, conn);
    // Best effort: deliver what is still queued (e.g. a rejection).
    while let Ok(Some(bytes)) = outbox.pop(Duration::ZERO) {
        let _ = ws.send(WsMessage::binary(bytes.to_vec()));
    }
    let _ = ws.close(None);
    let _ = ws.flush();
}

fn send(outbox: &Outbox, msg: Message) {
    outbox.push(Arc::new(encode_message(&msg.into())));
}

fn send_error(outbox: &Outbox, code: u8, message: &str) {
    send(
        outbox,
        Message::Error {
            code,
            message: message.to_string(),
        },
    );
}

fn cleanup(shared: &Shared, conn: u64) {
    let mut st = shared.state.lock().unwrap();
    if let Some(c) = st.conns.remove(&conn) {
        c.outbox.close();
        match c.peer {
            Peer::Device(id) => st.registry.disconnect_device(id, conn),
            Peer::Client(id) => {
                st.registry.remove_client(id);
                st.client_conns.remove(&id);
            }
            Peer::Unknown => {}
        }
    }
}

/// Handles one inbound message; `false` closes the connection.
fn on_message(shared: &Arc<Shared>, conn: u64, header: Header, bytes: Vec<u8>) -> bool {
    let now = shared.cfg.clock.now_ns();
    let msg = match decode_message(&bytes) {
        Ok(m) => m,
        Err(e) => {
            if let Some(c) = shared.state.lock().unwrap().conns.get(&conn) {
                send_error(&c.outbox, error_code::BAD_MESSAGE, &e.to_string());
            }
            return true;
        }
    };
    let mut st = shared.state.lock().unwrap();
    let Some(c) = st.conns.get(&conn) else { return false };
    let (peer, outbox) = (c.peer, c.outbox.clone());
    match (peer, msg.body) {
        (Peer::Unknown, Message::Hello(h)) => match h.role {
            Role::Device => match st.registry.register_device(h.id, &h.name, conn, now) {
                Ok(()) => {
                    st.conns.get_mut(&conn).unwrap().peer = Peer::Device(h.id);
                    if !st.forwarders.contains_key(&h.id) {
                        let tx = spawn_forwarder(shared, h.id);
                        st.forwarders.insert(h.id, tx);
                    }
                    send(&outbox, Message::Ack { acked_type: msg_type::HELLO, id: h.id });
                    log::info!("relay: device {} ({}) registered", h.id, h.name);
                }
                Err(e) => {
                    send_error(&outbox, e.wire_code(), &e.to_string());
                    outbox.close();
                    return false;
                }
            },
            Role::Client => {
                let id = st.next_client;
                st.next_client += 1;
                st.registry.register_client(id, conn);
                st.client_conns.insert(id, conn);
                st.conns.get_mut(&conn).unwrap().peer = Peer::Client(id);
                send(&outbox, Message::Ack { acked_type: msg_type::HELLO, id });
            }
        },
        (Peer::Unknown, _) => send_error(&outbox, error_code::HELLO_REQUIRED, "send HELLO first"),
        (Peer::Device(dev), body) => {
            st.registry.touch(dev, now);
            match body {
                Message::Frame(mut frame) => {
                    shared.frames_received.fetch_add(1, Ordering::Relaxed);
                    if let Some(rec) = &shared.recorder {
                        if let Err(e) = rec.lock().unwrap().append(now, &bytes) {
                            log::error!("relay: recording failed: {e}");
                        }
                    }
                    frame.device_id = dev;
                    if let Some(tx) = st.forwarders.get(&dev) {
                        let _ = tx.send(Pending {
                            recv_t_ns: now,
                            flags: header.flags,
                            frame,
                        });
                    }
                }
                Message::Pong(p) => {
                    if let Some(c) = st.client_conns.get(&p.origin).and_then(|id| st.conns.get(id)) {
                        c.outbox.push(Arc::new(bytes));
                    }
                }
                Message::ControlApplied(_) => {
                    if let Some(c) = st.registry.controller(dev).and_then(|id| st.client_conns.get(&id)).and_then(|id| st.conns.get(id)) {
                        c.outbox.push(Arc::new(bytes));
                    }
                }
                Message::Ping(p) if p.target == PING_RELAY => send(
                    &outbox,
                    Message::Pong(Pong {
                        nonce: p.nonce,
                        origin: p.origin,
                        t_ping_send_ns: p.t_send_ns,
                        t_remote_ns: shared.cfg.clock.now_ns(),
                    }),
                ),
                Message::ListDevices => send(&outbox, Message::DeviceList(st.registry.list(now))),
                other => log::debug!("relay: ignoring {:?} from device {dev}", other.msg_type()),
            }
        }
        (Peer::Client(client), body) => match body {
            Message::ListDevices => send(&outbox, Message::DeviceList(st.registry.list(now))),
            Message::Attach { device_id } => match st.registry.attach(client, device_id) {
                Ok(_) => {
                    // Nothing from the previous device may follow the ack.
                    outbox.purge_frames();
                    send(&outbox, Message::Ack { acked_type: msg_type::ATTACH, id: device_id });
                }
                Err(e) => send_error(&outbox, e.wire_code(), &e.to_string()),
            },
            Message::Control(ctl) => match st.registry.check_control(client, ctl.device_id) {
                Ok(()) => match device_outbox(&st, ctl.device_id) {
                    Some(o) => o.push(Arc::new(bytes)),
                    None => send_error(&outbox, error_code::UNKNOWN_DEVICE, "device offline"),
                },
                Err(e) => send_error(&outbox, e.wire_code(), &e.to_string()),
            },
            Message::Ping(mut p) => {
                p.origin = client;
                if p.target == PING_DEVICE {
                    let dev = st.registry.client(client).and_then(|c| c.attached);
                    match dev.and_then(|d| device_outbox(&st, d)) {
                        Some(o) => send(&o, Message::Ping(p)),
                        None => send_error(&outbox, error_code::NOT_ATTACHED, "ping target not attached"),
                    }
                } else {
                    send(
                        &outbox,
                        Message::Pong(Pong {
                            nonce: p.nonce,
                            origin: client,
                            t_ping_send_ns: p.t_send_ns,
                            t_remote_ns: shared.cfg.clock.now_ns(),
                        }),
                    );
                }
            }
            other => log::debug!("relay: ignoring {:?} from client {client}", other.msg_type()),
        },
    }
    true
}

fn device_outbox(st: &State, device_id: u32) -> Option<Arc<Outbox>> {
    let conn = st.registry.device(device_id)?.conn?;
    st.conns.get(&conn).map(|c| c.outbox.clone())
}

fn spawn_forwarder(shared: &Arc<Shared>, device_id: u32) -> Sender<Pending> {
    let (tx, rx) = mpsc::channel::<Pending>();
    let stage = shared.cfg.stage;
    let clock = shared.cfg.clock;
    // Exits once the relay drops the sender (disconnect of the last
    // reference or shutdown).
    let shared = shared.clone();
    thread::Builder::new()
        .name(format!("relay-fwd-{device_id}"))
        .spawn(move || {
            for p in rx {
                let due = p.recv_t_ns + stage.delay().as_nanos() as u64;
                sleep_until_ns(&clock, due);
                if shared.stop.load(Ordering::SeqCst) {
                    break;
                }
                let mut frame = p.frame;
                let mut flags = p.flags;
                if let Some(e) = apply_stage(&mut frame, stage, clock.now_ns()) {
                    log::warn!("relay: stage {stage} failed on device {device_id} frame {}: {e}", frame.seq);
                    flags |= FLAG_STAGE_ERROR;
                    shared.stage_errors.fetch_add(1, Ordering::Relaxed);
                }
                let bytes = Arc::new(encode_message(&WireMessage {
                    flags,
                    body: Message::Frame(frame),
                }));
                let st = shared.state.lock().unwrap();
                for client in st.registry.subscribers(device_id) {
                    if let Some(c) = st.client_conns.get(client).and_then(|id| st.conns.get(id)) {
                        c.outbox.push_frame(bytes.clone());
                        shared.frames_forwarded.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
        })
        .expect("spawn forwarder");
    tx
}
