//! The simulated device terminal.
//!
//! A frame loop renders the six fisheye views at the configured rate,
//! stitches, watermarks, encodes and sends each panorama. A separate
//! kinematics loop ticks at [`KINEMATICS_HZ`], draining queued CONTROL
//! messages at the start of each tick. A reader thread per connection
//! queues controls and answers PINGs.
//!
//! In simulated-clock mode everything runs on one thread against a scripted
//! command list and a virtual clock, so identical inputs give identical
//! frames and trajectories.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use avatar_core::codec::{encode_frame, Codec, CodecError};
use avatar_core::frame::{StageId, StageTrail};
use avatar_core::stitch::{build_stitch_map, estimate_gains, stitch_with, CameraGains, StitchError, StitchMap};
use avatar_core::watermark::{embed_watermark, WatermarkError};
use avatar_core::{ControlCommand, DevicePose, DeviceState, Exec, KinematicLimits, RigCalibration, RigRenderer, SceneEnvironment};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{sleep_until_ns, Clock};
use crate::wire::{
    encode_message, read_message, ControlApplied, ControlPayload, FramePayload, Hello, Message, Pong, Role, WireError,
    WireMessage,
};

pub const KINEMATICS_HZ: u64 = 200;
const TICK_NS: u64 = 1_000_000_000 / KINEMATICS_HZ;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("cannot reach relay: {0}")]
    Connect(io::Error),
    #[error("relay rejected device: {0}")]
    Rejected(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("trajectory file: {0}")]
    Trajectory(io::Error),
    #[error(transparent)]
    Stitch(#[from] StitchError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// A command scheduled at a simulated time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCommand {
    pub t_s: f64,
    #[serde(default)]
    pub linear_mps: f64,
    #[serde(default)]
    pub angular_radps: f64,
    #[serde(default)]
    pub estop: bool,
}

impl ScriptedCommand {
    fn command(&self) -> ControlCommand {
        ControlCommand {
            linear_mps: self.linear_mps,
            angular_radps: self.angular_radps,
            estop: self.estop,
            opaque: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClockMode {
    /// Wall clock; controls come from the relay.
    Realtime,
    /// Virtual clock starting at 0, `frames` frames, commands from a script.
    Simulated { frames: u64, script: Vec<ScriptedCommand> },
}

#[derive(Clone)]
pub struct DeviceConfig {
    pub relay: SocketAddr,
    pub device_id: u32,
    pub name: String,
    pub calib: RigCalibration,
    pub scene: Arc<SceneEnvironment>,
    pub pano_width: u32,
    pub pano_height: u32,
    pub fps: f64,
    pub codec: Codec,
    pub limits: KinematicLimits,
    /// Gains are re-estimated every this many frames.
    pub gain_refresh: u64,
    pub trajectory: Option<PathBuf>,
    pub clock: Clock,
    pub mode: ClockMode,
    pub exec: Exec,
    /// Stop after this many frames in real-time mode.
    pub max_frames: Option<u64>,
}

impl DeviceConfig {
    pub fn new(relay: SocketAddr, device_id: u32, scene: Arc<SceneEnvironment>) -> Self {
        Self {
            relay,
            device_id,
            name: format!("device-{device_id}"),
            calib: RigCalibration::for_panorama_width(1024),
            scene,
            pano_width: 1024,
            pano_height: 512,
            fps: 10.0,
            codec: Codec::Raw,
            limits: KinematicLimits::default(),
            gain_refresh: 30,
            trajectory: None,
            clock: Clock::system(),
            mode: ClockMode::Realtime,
            exec: Exec::default(),
            max_frames: None,
        }
    }

    fn validate(&self) -> Result<(), DeviceError> {
        if !(self.fps.is_finite() && self.fps > 0.0 && self.fps <= 240.0) {
            return Err(DeviceError::Config(format!("fps must be in (0, 240], got {}", self.fps)));
        }
        if self.pano_width != 2 * self.pano_height || self.pano_width > u16::MAX as u32 {
            return Err(DeviceError::Config("panorama must be 2:1 and fit u16".into()));
        }
        if let Codec::Block { quality } = self.codec {
            if !(1..=8).contains(&quality) {
                return Err(DeviceError::Config(format!("quality must be 1..=8, got {quality}")));
            }
        }
        self.calib.validate().map_err(|e| DeviceError::Config(e.to_string()))
    }

    fn interval_ns(&self) -> u64 {
        (1e9 / self.fps).round() as u64
    }
}

/// Render → stitch → watermark → encode for one frame.
pub struct FramePipeline {
    renderer: RigRenderer,
    map: StitchMap,
    gains: Option<CameraGains>,
    codec: Codec,
    exec: Exec,
    gain_refresh: u64,
    frames: u64,
}

impl FramePipeline {
    pub fn new(calib: &RigCalibration, pano_width: u32, pano_height: u32, codec: Codec, exec: Exec) -> Result<Self, DeviceError> {
        Ok(Self {
            renderer: RigRenderer::with_exec(calib, exec),
            map: build_stitch_map(calib, pano_width, pano_height)?,
            gains: None,
            codec,
            exec,
            gain_refresh: 30,
            frames: 0,
        })
    }

    /// Produces a FRAME payload. `now` supplies stage timestamps; the
    /// capture time doubles as the watermark.
    pub fn produce(
        &mut self,
        scene: &SceneEnvironment,
        pose: &DevicePose,
        device_id: u32,
        seq: u64,
        mut now: impl FnMut() -> u64,
    ) -> Result<FramePayload, DeviceError> {
        let mut trail = StageTrail::new();
        let t_capture = trail.push(StageId::Capture, now());
        let fisheyes = self.renderer.render_all(scene, pose, t_capture, seq);
        if self.gains.is_none() || self.frames % self.gain_refresh.max(1) == 0 {
            self.gains = Some(estimate_gains(&fisheyes, &self.map)?);
        }
        self.frames += 1;
        let mut pano = stitch_with(self.exec, &fisheyes, &self.map, self.gains.as_ref())?;
        trail.push(StageId::StitchDone, now());
        embed_watermark(&mut pano.image, t_capture, seq as u16)?;
        let data = encode_frame(&pano.image, self.codec)?;
        trail.push(StageId::EncodeDone, now());
        Ok(FramePayload {
            device_id,
            seq,
            t_capture_ns: t_capture,
            stages: trail.stamps().to_vec(),
            codec: self.codec.id(),
            width: pano.image.width() as u16,
            height: pano.image.height() as u16,
            data,
        })
    }
}

fn pose_of(s: &DeviceState) -> DevicePose {
    DevicePose {
        x_m: s.x_m,
        y_m: s.y_m,
        heading_rad: s.heading_rad,
    }
}

struct Trajectory(Option<BufWriter<File>>);

impl Trajectory {
    fn open(path: &Option<PathBuf>) -> Result<Self, DeviceError> {
        match path {
            None => Ok(Self(None)),
            Some(p) => {
                let mut w = BufWriter::new(File::create(p).map_err(DeviceError::Trajectory)?);
                writeln!(w, "t_ns,x_m,y_m,heading_rad").map_err(DeviceError::Trajectory)?;
                Ok(Self(Some(w)))
            }
        }
    }

    fn row(&mut self, t_ns: u64, s: &DeviceState) {
        if let Some(w) = &mut self.0 {
            let _ = writeln!(w, "{t_ns},{:.9},{:.9},{:.9}", s.x_m, s.y_m, s.heading_rad);
        }
    }

    fn flush(&mut self) {
        if let Some(w) = &mut self.0 {
            let _ = w.flush();
        }
    }
}

#[derive(Default)]
struct Shared {
    state: Mutex<DeviceState>,
    controls: Mutex<VecDeque<ControlPayload>>,
    link: Mutex<Option<TcpStream>>,
    link_up: AtomicBool,
    stop: AtomicBool,
    frames_sent: AtomicU64,
    controls_applied: AtomicU64,
    reconnects: AtomicU64,
}

impl Shared {
    fn send(&self, msg: &WireMessage) -> bool {
        let bytes = encode_message(msg);
        let mut link = self.link.lock().unwrap();
        let ok = match link.as_mut() {
            Some(s) => s.write_all(&bytes).is_ok(),
            None => false,
        };
        if !ok {
            self.link_up.store(false, Ordering::SeqCst);
        }
        ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceReport {
    pub frames_sent: u64,
    pub controls_applied: u64,
    pub reconnects: u64,
    pub final_state: DeviceState,
}

pub struct DeviceHandle {
    shared: Arc<Shared>,
    thread: Option<JoinHandle<Result<DeviceReport, DeviceError>>>,
}

impl DeviceHandle {
    pub fn state(&self) -> DeviceState {
        *self.shared.state.lock().unwrap()
    }

    pub fn frames_sent(&self) -> u64 {
        self.shared.frames_sent.load(Ordering::SeqCst)
    }

    pub fn is_connected(&self) -> bool {
        self.shared.link_up.load(Ordering::SeqCst)
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().map(|t| t.is_finished()).unwrap_or(true)
    }

    /// Waits for the device to finish on its own (frame limit reached).
    pub fn join(mut self) -> Result<DeviceReport, DeviceError> {
        self.thread.take().unwrap().join().expect("device thread panicked")
    }

    pub fn stop(mut self) -> Result<DeviceReport, DeviceError> {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(s) = self.shared.link.lock().unwrap().as_ref() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        self.thread.take().unwrap().join().expect("device thread panicked")
    }
}

impl Drop for DeviceHandle {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            self.shared.stop.store(true, Ordering::SeqCst);
            let _ = t.join();
        }
    }
}

/// Starts a device in the background.
pub fn spawn_device(cfg: DeviceConfig) -> Result<DeviceHandle, DeviceError> {
    cfg.validate()?;
    let shared = Arc::new(Shared::default());
    let s = shared.clone();
    let thread = thread::Builder::new()
        .name(format!("device-{}", cfg.device_id))
        .spawn(move || match cfg.mode.clone() {
            ClockMode::Realtime => run_realtime(cfg, s),
            ClockMode::Simulated { frames, script } => run_simulated(cfg, s, frames, &script),
        })
        .map_err(DeviceError::Connect)?;
    Ok(DeviceHandle {
        shared,
        thread: Some(thread),
    })
}

/// Runs a device on the calling thread until it stops.
pub fn run_device(cfg: DeviceConfig) -> Result<DeviceReport, DeviceError> {
    spawn_device(cfg)?.join()
}

fn connect(cfg: &DeviceConfig, shared: &Arc<Shared>) -> Result<TcpStream, DeviceError> {
    let mut stream = TcpStream::connect(cfg.relay).map_err(DeviceError::Connect)?;
    let _ = stream.set_nodelay(true);
    let hello: WireMessage = Message::Hello(Hello {
        role: Role::Device,
        id: cfg.device_id,
        name: cfg.name.clone(),
    })
    .into();
    stream.write_all(&encode_message(&hello)).map_err(DeviceError::Connect)?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).map_err(DeviceError::Connect)?;
    match read_message(&mut stream)? {
        Some(WireMessage { body: Message::Ack { .. }, .. }) => {}
        Some(WireMessage {
            body: Message::Error { message, .. },
            ..
        }) => return Err(DeviceError::Rejected(message)),
        other => return Err(DeviceError::Rejected(format!("unexpected reply {other:?}"))),
    }
    stream.set_read_timeout(None).map_err(DeviceError::Connect)?;
    *shared.link.lock().unwrap() = Some(stream.try_clone().map_err(DeviceError::Connect)?);
    shared.link_up.store(true, Ordering::SeqCst);
    Ok(stream)
}

fn connect_with_backoff(cfg: &DeviceConfig, shared: &Arc<Shared>) -> Result<Option<TcpStream>, DeviceError> {
    let mut backoff = Duration::from_millis(50);
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            return Ok(None);
        }
        match connect(cfg, shared) {
            Ok(s) => return Ok(Some(s)),
            Err(e @ DeviceError::Rejected(_)) => return Err(e),
            Err(e) => {
                log::warn!("device {}: {e}; retrying in {backoff:?}", cfg.device_id);
                thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_secs(2));
            }
        }
    }
}

fn spawn_reader(cfg: &DeviceConfig, shared: Arc<Shared>, stream: TcpStream, accept_controls: bool) -> JoinHandle<()> {
    let device_id = cfg.device_id;
    let clock = cfg.clock;
    thread::spawn(move || {
        let mut r = BufReader::new(stream);
        loop {
            match read_message(&mut r) {
                Ok(Some(m)) => match m.body {
                    Message::Control(c) if c.device_id == device_id => {
                        if accept_controls {
                            shared.controls.lock().unwrap().push_back(c);
                        }
                    }
                    Message::Ping(p) => {
                        shared.send(
                            &Message::Pong(Pong {
                                nonce: p.nonce,
                                origin: p.origin,
                                t_ping_send_ns: p.t_send_ns,
                                t_remote_ns: clock.now_ns(),
                            })
                            .into(),
                        );
                    }
                    Message::Error { code, message } => log::warn!("device {device_id}: relay error {code}: {message}"),
                    _ => {}
                },
                Ok(None) | Err(_) => break,
            }
        }
        shared.link_up.store(false, Ordering::SeqCst);
    })
}

fn spawn_kinematics(cfg: &DeviceConfig, shared: Arc<Shared>) -> Result<JoinHandle<Result<(), DeviceError>>, DeviceError> {
    let mut traj = Trajectory::open(&cfg.trajectory)?;
    let clock = cfg.clock;
    let limits = cfg.limits;
    let device_id = cfg.device_id;
    Ok(thread::spawn(move || {
        let mut last = clock.now_ns();
        let mut next = last + TICK_NS;
        traj.row(last, &shared.state.lock().unwrap());
        while !shared.stop.load(Ordering::SeqCst) {
            sleep_until_ns(&clock, next);
            let now = clock.now_ns();
            let pending: Vec<ControlPayload> = shared.controls.lock().unwrap().drain(..).collect();
            let state = {
                let mut st = shared.state.lock().unwrap();
                for c in &pending {
                    let t_applied = clock.now_ns();
                    match st.apply_command(&c.to_command(), &limits) {
                        Ok(()) => {
                            shared.controls_applied.fetch_add(1, Ordering::SeqCst);
                            if !c.opaque.is_empty() {
                                log::info!("device {device_id}: opaque payload of {} bytes", c.opaque.len());
                            }
                            let applied = Message::ControlApplied(ControlApplied {
                                device_id,
                                seq: c.seq,
                                t_send_ns: c.t_send_ns,
                                t_applied_ns: t_applied,
                            });
                            shared.send(&applied.into());
                        }
                        Err(e) => log::warn!("device {device_id}: rejected command {}: {e}", c.seq),
                    }
                }
                let dt = (now - last) as f64 * 1e-9;
                if dt > 0.0 {
                    let _ = st.advance(dt);
                }
                *st
            };
            traj.row(now, &state);
            last = now;
            next += TICK_NS;
            if next < now {
                next = now + TICK_NS;
            }
        }
        traj.flush();
        Ok(())
    }))
}

fn run_realtime(cfg: DeviceConfig, shared: Arc<Shared>) -> Result<DeviceReport, DeviceError> {
    let mut pipeline = FramePipeline::new(&cfg.calib, cfg.pano_width, cfg.pano_height, cfg.codec, cfg.exec)?;
    pipeline.gain_refresh = cfg.gain_refresh;
    let kin = spawn_kinematics(&cfg, shared.clone())?;
    let clock = cfg.clock;
    let interval = cfg.interval_ns();
    let mut seq = 0u64;
    let mut reader: Option<JoinHandle<()>> = None;
    let mut result = Ok(());
    let start = clock.now_ns();
    let mut slot = 0u64;
    while !shared.stop.load(Ordering::SeqCst) && cfg.max_frames.is_none_or(|m| seq < m) {
        if !shared.link_up.load(Ordering::SeqCst) {
            if let Some(r) = reader.take() {
                if let Some(s) = shared.link.lock().unwrap().take() {
                    let _ = s.shutdown(std::net::Shutdown::Both);
                }
                let _ = r.join();
                shared.reconnects.fetch_add(1, Ordering::SeqCst);
            }
            match connect_with_backoff(&cfg, &shared) {
                Ok(Some(stream)) => reader = Some(spawn_reader(&cfg, shared.clone(), stream, true)),
                Ok(None) => break,
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
            // Re-anchor the schedule after an outage.
            slot = (clock.now_ns() - start) / interval + 1;
        }
        sleep_until_ns(&clock, start + slot * interval);
        let pose = pose_of(&shared.state.lock().unwrap());
        let mut frame = match pipeline.produce(&cfg.scene, &pose, cfg.device_id, seq, || clock.now_ns()) {
            Ok(f) => f,
            Err(e) => {
                result = Err(e);
                break;
            }
        };
        crate::stage::push_stamp(&mut frame.stages, StageId::Sent, clock.now_ns());
        if shared.send(&Message::Frame(frame).into()) {
            seq += 1;
            shared.frames_sent.store(seq, Ordering::SeqCst);
        }
        // Skip any slots this frame overran.
        slot = (slot + 1).max((clock.now_ns() - start).div_ceil(interval));
    }
    shared.stop.store(true, Ordering::SeqCst);
    if let Some(s) = shared.link.lock().unwrap().take() {
        let _ = s.shutdown(std::net::Shutdown::Both);
    }
    if let Some(r) = reader {
        let _ = r.join();
    }
    kin.join().expect("kinematics thread panicked")?;
    result?;
    Ok(DeviceReport {
        frames_sent: seq,
        controls_applied: shared.controls_applied.load(Ordering::SeqCst),
        reconnects: shared.reconnects.load(Ordering::SeqCst),
        final_state: *shared.state.lock().unwrap(),
    })
}

/// Deterministic session: virtual time, scripted commands. Frames are still
/// paced at `fps` on the wall clock so a relay sees a live stream, but all
/// content and stamps come from the virtual clock.
fn run_simulated(cfg: DeviceConfig, shared: Arc<Shared>, frames: u64, script: &[ScriptedCommand]) -> Result<DeviceReport, DeviceError> {
    let mut pipeline = FramePipeline::new(&cfg.calib, cfg.pano_width, cfg.pano_height, cfg.codec, cfg.exec)?;
    pipeline.gain_refresh = cfg.gain_refresh;
    let mut traj = Trajectory::open(&cfg.trajectory)?;
    let stream = connect_with_backoff(&cfg, &shared)?;
    let reader = stream.map(|s| spawn_reader(&cfg, shared.clone(), s, false));
    let mut sim = SimSession::new(cfg.limits, script, cfg.interval_ns());
    traj.row(0, &sim.state);
    let wall = Clock::system();
    let start = wall.now_ns();
    let mut sent = 0;
    for seq in 0..frames {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        sleep_until_ns(&wall, start + seq * sim.interval_ns);
        let t_frame = sim.advance_to_frame(seq, |t, s| traj.row(t, s));
        *shared.state.lock().unwrap() = sim.state;
        let pose = pose_of(&sim.state);
        let mut frame = pipeline.produce(&cfg.scene, &pose, cfg.device_id, seq, || t_frame)?;
        crate::stage::push_stamp(&mut frame.stages, StageId::Sent, t_frame);
        if !shared.send(&Message::Frame(frame).into()) {
            break;
        }
        sent += 1;
        shared.frames_sent.store(sent, Ordering::SeqCst);
    }
    traj.flush();
    if let Some(s) = shared.link.lock().unwrap().take() {
        let _ = s.shutdown(std::net::Shutdown::Both);
    }
    if let Some(r) = reader {
        let _ = r.join();
    }
    Ok(DeviceReport {
        frames_sent: sent,
        controls_applied: sim.applied,
        reconnects: 0,
        final_state: sim.state,
    })
}

/// Virtual-time kinematics driven by a script.
pub struct SimSession {
    pub state: DeviceState,
    pub interval_ns: u64,
    limits: KinematicLimits,
    script: Vec<ScriptedCommand>,
    next_cmd: usize,
    t_ns: u64,
    applied: u64,
}

impl SimSession {
    pub fn new(limits: KinematicLimits, script: &[ScriptedCommand], interval_ns: u64) -> Self {
        let mut script = script.to_vec();
        script.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
        Self {
            state: DeviceState::default(),
            interval_ns,
            limits,
            script,
            next_cmd: 0,
            t_ns: 0,
            applied: 0,
        }
    }

    /// Ticks the kinematics up to frame `seq`'s capture time, reporting every
    /// tick to `on_tick`. Returns the capture time.
    pub fn advance_to_frame(&mut self, seq: u64, mut on_tick: impl FnMut(u64, &DeviceState)) -> u64 {
        let target = seq * self.interval_ns;
        while self.t_ns + TICK_NS <= target {
            while let Some(c) = self.script.get(self.next_cmd) {
                if (c.t_s * 1e9).round() as u64 > self.t_ns {
                    break;
                }
                if self.state.apply_command(&c.command(), &self.limits).is_ok() {
                    self.applied += 1;
                }
                self.next_cmd += 1;
            }
            let _ = self.state.advance(TICK_NS as f64 * 1e-9);
            self.t_ns += TICK_NS;
            on_tick(self.t_ns, &self.state);
        }
        target
    }
}

/// Loads a JSON array of scripted commands.
pub fn load_script(mut r: impl Read) -> Result<Vec<ScriptedCommand>, DeviceError> {
    let mut text = String::new();
    r.read_to_string(&mut text).map_err(|e| DeviceError::Config(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| DeviceError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_session_drives_straight() {
        let script = [ScriptedCommand {
            t_s: 0.0,
            linear_mps: 1.0,
            angular_radps: 0.0,
            estop: false,
        }];
        let mut s = SimSession::new(KinematicLimits::default(), &script, 100_000_000);
        let mut rows = Vec::new();
        s.advance_to_frame(20, |t, st| rows.push((t, st.x_m)));
        assert_eq!(rows.len(), 400);
        assert!((s.state.x_m - 2.0).abs() < 1e-9);
        assert!(rows.windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn sim_session_estop_within_one_tick() {
        let script = [
            ScriptedCommand {
                t_s: 0.0,
                linear_mps: 1.0,
                angular_radps: 0.5,
                estop: false,
            },
            ScriptedCommand {
                t_s: 0.5,
                estop: true,
                linear_mps: 1.0,
                angular_radps: 1.0,
            },
        ];
        let mut s = SimSession::new(KinematicLimits::default(), &script, 100_000_000);
        s.advance_to_frame(5, |_, _| {});
        let at = s.state;
        s.advance_to_frame(6, |_, _| {});
        assert_eq!((s.state.linear_mps, s.state.angular_radps), (0.0, 0.0));
        assert!((s.state.x_m - at.x_m).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let scene = Arc::new(SceneEnvironment::env_only(1, 64));
        let mut cfg = DeviceConfig::new("127.0.0.1:9".parse().unwrap(), 1, scene);
        cfg.fps = 0.0;
        assert!(matches!(spawn_device(cfg.clone()), Err(DeviceError::Config(_))));
        cfg.fps = 10.0;
        cfg.codec = Codec::Block { quality: 9 };
        assert!(matches!(spawn_device(cfg), Err(DeviceError::Config(_))));
    }
}
