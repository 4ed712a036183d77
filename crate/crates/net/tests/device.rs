mod common;

use std::fs;
use std::thread;
use std::time::{Duration, Instant};

use avatar_net::client::{Client, ClientConfig};
use avatar_net::device::{run_device, spawn_device, ClockMode, DeviceConfig, DeviceError, ScriptedCommand};
use avatar_net::harness::{estimate_offset, measure_control_latency};
use avatar_net::netem::NetemProxy;
use avatar_net::record::RecordingReader;
use avatar_net::relay::{Relay, RelayConfig};
use avatar_net::wire::{Message, PING_DEVICE};
use avatar_net::{Clock, NetworkProfile};
use common::{loopback, scene, wait_for_device, Bench};

fn small(cfg: &mut DeviceConfig) {
    cfg.pano_width = 512;
    cfg.pano_height = 256;
    cfg.calib = avatar_core::RigCalibration::for_panorama_width(512);
}

#[test]
fn duplicate_device_id_is_fatal() {
    let relay = Relay::start(RelayConfig::loopback()).unwrap();
    let mut a = DeviceConfig::new(relay.addr(), 3, scene());
    small(&mut a);
    let first = spawn_device(a.clone()).unwrap();
    let client = Client::connect(ClientConfig::new(relay.addr())).unwrap();
    wait_for_device(&client, 3);
    match run_device(a) {
        Err(DeviceError::Rejected(_)) => {}
        other => panic!("expected rejection, got {:?}", other.map(|r| r.frames_sent)),
    }
    assert!(first.is_connected());
    first.stop().unwrap();
}

#[test]
fn device_reconnects_after_relay_restart() {
    let mut relay = Relay::start(RelayConfig::loopback()).unwrap();
    let addr = relay.addr();
    let mut cfg = DeviceConfig::new(addr, 4, scene());
    small(&mut cfg);
    let dev = spawn_device(cfg).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while dev.frames_sent() < 3 {
        assert!(Instant::now() < deadline);
        thread::sleep(Duration::from_millis(20));
    }
    relay.shutdown();
    thread::sleep(Duration::from_millis(300));
    let relay2 = Relay::start(RelayConfig::new(addr)).unwrap();
    let client = Client::connect(ClientConfig::new(relay2.addr())).unwrap();
    wait_for_device(&client, 4);
    client.attach(4).unwrap();
    let f = client.wait_frame(None, Duration::from_secs(10)).unwrap();
    assert_eq!(f.device_id, 4);
    let report = dev.stop().unwrap();
    assert!(report.reconnects >= 1);
}

#[test]
fn skewed_device_clock_is_recovered_by_ping() {
    let bench = Bench::start(None, |c| {
        small(c);
        c.clock = Clock::with_offset(500_000_000);
    });
    let est = estimate_offset(&bench.client, PING_DEVICE, 32).unwrap();
    let err_ms = (est.offset_ns as f64 - 500e6).abs() * 1e-6;
    assert!(err_ms <= 5.0, "offset {} ns", est.offset_ns);
    // Same-process relay clock agrees with ours.
    let relay = estimate_offset(&bench.client, avatar_net::wire::PING_RELAY, 32).unwrap();
    assert!(relay.offset_ns.abs() <= 1_000_000, "relay offset {} ns", relay.offset_ns);
}

#[test]
fn controls_move_the_robot_and_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("traj.csv");
    let t = traj.clone();
    let bench = Bench::start(None, move |c| {
        small(c);
        c.trajectory = Some(t);
    });
    let c = &bench.client;
    let (seq, t_send) = c.send_control(0.5, 0.0, false, vec![7, 7]).unwrap();
    let applied = c.wait_control_applied(seq, Duration::from_secs(2)).unwrap();
    assert!(applied.t_applied_ns >= t_send);
    assert!(applied.t_applied_ns - t_send < 30_000_000);
    thread::sleep(Duration::from_millis(1000));
    let (seq, _) = c.send_control(3.0, 1.0, true, vec![]).unwrap();
    c.wait_control_applied(seq, Duration::from_secs(2)).unwrap();
    let before = bench.device.as_ref().unwrap().state();
    thread::sleep(Duration::from_millis(200));
    let after = bench.device.as_ref().unwrap().state();
    assert_eq!((after.linear_mps, after.angular_radps), (0.0, 0.0));
    assert_eq!(before.x_m, after.x_m);
    assert!((after.x_m - 0.5).abs() < 0.05, "x = {}", after.x_m);
    drop(bench);

    let text = fs::read_to_string(&traj).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t_ns,x_m,y_m,heading_rad"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert!(rows.len() > 200);
    assert!(rows.windows(2).all(|w| w[1][0] > w[0][0]));
    let last = rows.last().unwrap();
    assert!((last[1] - after.x_m).abs() < 1e-6);
}

#[test]
fn control_latency_tracks_injected_delay() {
    let relay = Relay::start(RelayConfig::loopback()).unwrap();
    let mut cfg = DeviceConfig::new(relay.addr(), 5, scene());
    small(&mut cfg);
    let _dev = spawn_device(cfg).unwrap();
    let measure = |addr| {
        let c = Client::connect(ClientConfig::new(addr)).unwrap();
        wait_for_device(&c, 5);
        c.attach(5).unwrap();
        measure_control_latency(&c, 20, Duration::from_millis(20), 0).unwrap()
    };
    let base = measure(relay.addr());
    let proxy = NetemProxy::start(loopback(), relay.addr(), NetworkProfile::fixed(50.0), NetworkProfile::none(), 3).unwrap();
    let delayed = measure(proxy.addr());
    let want = 50.0 + base.mean_s * 1e3;
    let got = delayed.mean_s * 1e3;
    assert!((got - want).abs() <= 10.0, "baseline {:.2} ms, delayed {got:.2} ms", base.mean_s * 1e3);
}

fn sim_session(dir: &std::path::Path) -> (Vec<Vec<u8>>, String) {
    let mut rcfg = RelayConfig::loopback();
    rcfg.record_dir = Some(dir.to_path_buf());
    let mut relay = Relay::start(rcfg).unwrap();
    let traj = dir.join("traj.csv");
    let mut cfg = DeviceConfig::new(relay.addr(), 2, scene());
    small(&mut cfg);
    cfg.fps = 20.0;
    cfg.trajectory = Some(traj.clone());
    cfg.codec = avatar_core::Codec::Block { quality: 6 };
    cfg.mode = ClockMode::Simulated {
        frames: 15,
        script: vec![
            ScriptedCommand {
                t_s: 0.1,
                linear_mps: 1.0,
                angular_radps: 0.3,
                estop: false,
            },
            ScriptedCommand {
                t_s: 0.5,
                linear_mps: 0.0,
                angular_radps: 0.0,
                estop: true,
            },
        ],
    };
    let report = run_device(cfg).unwrap();
    assert_eq!(report.frames_sent, 15);
    thread::sleep(Duration::from_millis(100));
    let path = relay.recording_path().unwrap().clone();
    relay.shutdown();
    let frames = RecordingReader::open(&path).unwrap().map(|e| e.unwrap().bytes).collect();
    (frames, fs::read_to_string(traj).unwrap())
}

#[test]
fn simulated_sessions_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (fa, ta) = sim_session(a.path());
    let (fb, tb) = sim_session(b.path());
    assert_eq!(fa.len(), 15);
    assert_eq!(fa, fb);
    assert_eq!(ta, tb);
    let Message::Frame(last) = avatar_net::decode_message(fa.last().unwrap()).unwrap().body else { panic!() };
    assert_eq!(last.t_capture_ns, 14 * 50_000_000);
}
