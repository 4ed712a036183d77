use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use avatar_core::scene::synthetic_environment_map;
use avatar_core::seams::{refine_rig, SeamViewParams};
use avatar_core::stitch::{build_stitch_map_with, estimate_gains, stitch_with};
use avatar_core::{Codec, DevicePose, Exec, FisheyeFrame, RgbImage, RigCalibration, RigRenderer, SceneEnvironment, StageTrail};
use avatar_net::client::{Client, ClientConfig};
use avatar_net::device::{load_script, run_device, ClockMode, DeviceConfig};
use avatar_net::harness::{estimate_offset, measure_event_to_eye, LatencyReport, SamplingPlan};
use avatar_net::netem::NetemProxy;
use avatar_net::record::replay_to_relay;
use avatar_net::relay::{Relay, RelayConfig};
use avatar_net::stage::StageSpec;
use avatar_net::wire::{DeviceStatus, PING_DEVICE};
use avatar_net::NetworkProfile;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "avatar", version, about = "Panoramic teleoperation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulated robot: renders six fisheye views, stitches, streams.
    Device(DeviceArgs),
    /// Registry and forwarder between devices and clients.
    Relay(RelayArgs),
    /// Event-to-eye measurement against a running relay and device.
    Measure(MeasureArgs),
    /// Offline stitch of six fisheye PNGs into an equirectangular panorama.
    Stitch(StitchArgs),
    /// Streams a recording into a relay as a device.
    Replay(ReplayArgs),
    /// Writes a synthetic six-frame set and its calibration.
    Synth(SynthArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CodecName {
    Raw,
    Block,
}

#[derive(Args, Debug)]
struct DeviceArgs {
    #[arg(long)]
    relay: String,
    #[arg(long, default_value_t = 1)]
    device_id: u32,
    #[arg(long)]
    name: Option<String>,
    /// Rig calibration JSON; defaults to the nominal ring.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Equirectangular environment PNG; defaults to a synthetic map.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    fps: f64,
    #[arg(long, value_enum, default_value = "raw")]
    codec: CodecName,
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u8).range(1..=8))]
    quality: u8,
    /// Panorama width; height is half of it.
    #[arg(long, default_value_t = 1024)]
    width: u32,
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Stop after this many frames.
    #[arg(long)]
    frames: Option<u64>,
    /// Run on a virtual clock for this many frames.
    #[arg(long)]
    sim_frames: Option<u64>,
    /// JSON command script for simulated runs.
    #[arg(long, requires = "sim_frames")]
    script: Option<PathBuf>,
    /// Seed of the synthetic environment.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct RelayArgs {
    #[arg(long, default_value = "127.0.0.1:7000")]
    listen: String,
    /// WebSocket listener for browser clients.
    #[arg(long)]
    ws_listen: Option<String>,
    /// noop, fixed_delay:<ms> or annotate.
    #[arg(long, default_value = "noop")]
    stage: StageSpec,
    /// Directory for the session recording.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Seconds without traffic before a device is listed offline.
    #[arg(long, default_value_t = 10.0)]
    stale_after: f64,
}

#[derive(Args, Debug)]
struct MeasureArgs {
    #[arg(long)]
    relay: String,
    #[arg(long)]
    device_id: u32,
    /// Preset name or JSON profile applied to the relay-to-client link.
    #[arg(long, default_value = "none")]
    profile: String,
    #[arg(long, default_value_t = 12)]
    samples: usize,
    /// Seconds between samples (the first comes after one interval).
    #[arg(long, default_value_t = 5.0)]
    interval: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Location label for the report; defaults to the profile name.
    #[arg(long)]
    location: Option<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct StitchArgs {
    #[arg(long)]
    calib: PathBuf,
    /// Directory holding cam0.png … cam5.png.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    width: u32,
    /// Refine seams from feature matches before stitching.
    #[arg(long)]
    refine: bool,
    /// Write the refined calibration here.
    #[arg(long, requires = "refine")]
    refined_calib: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    file: PathBuf,
    #[arg(long)]
    relay: String,
    #[arg(long, default_value_t = 1)]
    device_id: u32,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    width: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    heading: f64,
    /// Also write the direct equirectangular render as truth.png.
    #[arg(long)]
    truth: bool,
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .with_context(|| format!("cannot resolve {addr}"))?
        .next()
        .ok_or_else(|| anyhow!("no address for {addr}"))
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn check_width(width: u32) -> Result<()> {
    if width < 64 || width % 2 != 0 {
        bail!("panorama width must be even and at least 64, got {width}");
    }
    Ok(())
}

fn device(a: DeviceArgs) -> Result<()> {
    check_width(a.width)?;
    let relay = resolve(&a.relay)?;
    let scene = match &a.scene {
        Some(p) => {
            let env = RgbImage::load_png(p).with_context(|| format!("reading {}", p.display()))?;
            SceneEnvironment::new(env)?
        }
        None => SceneEnvironment::env_only(a.seed, 2 * a.width),
    };
    let mut cfg = DeviceConfig::new(relay, a.device_id, Arc::new(scene));
    if let Some(n) = a.name {
        cfg.name = n;
    }
    cfg.calib = match &a.calib {
        Some(p) => RigCalibration::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RigCalibration::for_panorama_width(a.width),
    };
    cfg.pano_width = a.width;
    cfg.pano_height = a.width / 2;
    cfg.fps = a.fps;
    cfg.codec = match a.codec {
        CodecName::Raw => Codec::Raw,
        CodecName::Block => Codec::Block { quality: a.quality },
    };
    cfg.trajectory = a.trajectory;
    cfg.max_frames = a.frames;
    cfg.exec = exec(a.sequential);
    if let Some(frames) = a.sim_frames {
        let script = match &a.script {
            Some(p) => load_script(std::fs::File::open(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => Vec::new(),
        };
        cfg.mode = ClockMode::Simulated { frames, script };
    }
    let report = run_device(cfg)?;
    log::info!(
        "device stopped: {} frames, {} controls, {} reconnects",
        report.frames_sent,
        report.controls_applied,
        report.reconnects
    );
    println!("{}", report.frames_sent);
    Ok(())
}

fn relay(a: RelayArgs) -> Result<()> {
    if !(a.stale_after.is_finite() && a.stale_after > 0.0) {
        bail!("--stale-after must be positive");
    }
    let mut cfg = RelayConfig::new(resolve(&a.listen)?);
    cfg.ws_listen = a.ws_listen.as_deref().map(resolve).transpose()?;
    cfg.stage = a.stage;
    cfg.record_dir = a.record;
    cfg.stale_after = Duration::from_secs_f64(a.stale_after);
    let relay = Relay::start(cfg)?;
    // Scripts read the bound addresses from stdout.
    println!("listening {}", relay.addr());
    if let Some(ws) = relay.ws_addr() {
        println!("websocket {ws}");
    }
    relay.wait();
    Ok(())
}

fn wait_online(client: &Client, id: u32) -> Result<()> {
    for _ in 0..100 {
        if client.list_devices()?.iter().any(|d| d.device_id == id && d.status == DeviceStatus::Online) {
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    bail!("device {id} is not online")
}

fn measure(a: MeasureArgs) -> Result<()> {
    if a.samples < 3 {
        bail!("--samples must be at least 3");
    }
    if !(a.interval.is_finite() && a.interval > 0.0) {
        bail!("--interval must be positive");
    }
    let profile = NetworkProfile::load(&a.profile)?;
    let relay = resolve(&a.relay)?;

    // Clock offset over the direct, unimpaired path.
    let direct = Client::connect(ClientConfig::new(relay)).context("connecting to relay")?;
    wait_online(&direct, a.device_id)?;
    direct.attach(a.device_id)?;
    let offset = estimate_offset(&direct, PING_DEVICE, 32)?;
    direct.close();
    log::info!("device clock offset {} ns (±{} ns)", offset.offset_ns, offset.uncertainty_ns);

    let proxy = NetemProxy::start("127.0.0.1:0".parse()?, relay, NetworkProfile::none(), profile.clone(), a.seed)?;
    let client = Client::connect(ClientConfig::new(proxy.addr()))?;
    client.attach(a.device_id)?;
    let interval = Duration::from_secs_f64(a.interval);
    let plan = SamplingPlan {
        n_samples: a.samples,
        interval,
        first_at: interval,
        ..SamplingPlan::default()
    };
    let test = measure_event_to_eye(&client, &plan, offset.offset_ns)?;
    let report = LatencyReport::new(a.location.as_deref().unwrap_or(&profile.name), vec![test]);
    let json = report.to_json();
    match &a.out {
        Some(p) => std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn load_frames(dir: &Path, calib: &RigCalibration) -> Result<Vec<FisheyeFrame>> {
    calib
        .cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let p = dir.join(format!("cam{i}.png"));
            let image = RgbImage::load_png(&p).with_context(|| format!("reading {}", p.display()))?;
            let (w, h) = (cam.intrinsics.width_px, cam.intrinsics.height_px);
            if (image.width(), image.height()) != (w, h) {
                bail!("{} is {}x{}, calibration expects {w}x{h}", p.display(), image.width(), image.height());
            }
            Ok(FisheyeFrame {
                image,
                t_capture_ns: 0,
                seq: 0,
                stages: StageTrail::new(),
            })
        })
        .collect()
}

fn stitch(a: StitchArgs) -> Result<()> {
    check_width(a.width)?;
    let mut calib = RigCalibration::load(&a.calib).with_context(|| format!("reading {}", a.calib.display()))?;
    let frames = load_frames(&a.input, &calib)?;
    let ex = exec(a.sequential);
    if a.refine {
        let out = refine_rig(&frames, &calib, a.width, a.width / 2, &SeamViewParams::default())?;
        log::info!("seam refinement: {:?}", out.refinement.status);
        calib = out.calibration;
        if let Some(p) = &a.refined_calib {
            calib.save(p)?;
        }
    }
    let map = build_stitch_map_with(ex, &calib, a.width, a.width / 2)?;
    let gains = estimate_gains(&frames, &map)?;
    let pano = stitch_with(ex, &frames, &map, Some(&gains))?;
    pano.image.save_png(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let report = replay_to_relay(&a.file, resolve(&a.relay)?, a.device_id)?;
    println!("{}", report.delivered);
    match report.error {
        Some(e) => Err(anyhow!("replay stopped after {} messages: {e}", report.delivered)),
        None => Ok(()),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    check_width(a.width)?;
    std::fs::create_dir_all(&a.out)?;
    let calib = RigCalibration::for_panorama_width(a.width);
    let scene = SceneEnvironment::new(synthetic_environment_map(a.seed, 2 * a.width))?;
    let pose = DevicePose {
        heading_rad: a.heading,
        ..DevicePose::default()
    };
    for (i, f) in RigRenderer::new(&calib).render_all(&scene, &pose, 0, 0).iter().enumerate() {
        f.image.save_png(a.out.join(format!("cam{i}.png")))?;
    }
    calib.save(a.out.join("calib.json"))?;
    if a.truth {
        avatar_core::scene::render_equirect(&scene, &pose, a.width, a.width / 2).save_png(a.out.join("truth.png"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Device(a) => device(a),
        Command::Relay(a) => relay(a),
        Command::Measure(a) => measure(a),
        Command::Stitch(a) => stitch(a),
        Command::Replay(a) => replay(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
