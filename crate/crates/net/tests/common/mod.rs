#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use avatar_core::SceneEnvironment;
use avatar_net::client::{Client, ClientConfig};
use avatar_net::device::{spawn_device, DeviceConfig, DeviceHandle};
use avatar_net::netem::NetemProxy;
use avatar_net::relay::{Relay, RelayConfig};
use avatar_net::wire::DeviceStatus;
use avatar_net::NetworkProfile;

pub fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

/// Environment-map scene, shared so it is generated once per process.
pub fn scene() -> Arc<SceneEnvironment> {
    static SCENE: OnceLock<Arc<SceneEnvironment>> = OnceLock::new();
    SCENE.get_or_init(|| Arc::new(SceneEnvironment::env_only(7, 2048))).clone()
}

/// Relay, an optional impairing proxy on the device link, a device and an
/// attached client.
pub struct Bench {
    pub relay: Relay,
    pub netem: Option<NetemProxy>,
    pub device: Option<DeviceHandle>,
    pub client: Client,
}

impl Bench {
    pub fn start(device_link: Option<NetworkProfile>, tweak: impl FnOnce(&mut DeviceConfig)) -> Self {
        Self::start_seeded(device_link, 11, tweak)
    }

    pub fn start_seeded(device_link: Option<NetworkProfile>, seed: u64, tweak: impl FnOnce(&mut DeviceConfig)) -> Self {
        let relay = Relay::start(RelayConfig::loopback()).expect("relay");
        let netem = device_link.map(|p| NetemProxy::start(loopback(), relay.addr(), p, NetworkProfile::none(), seed).expect("netem"));
        let target = netem.as_ref().map(|n| n.addr()).unwrap_or(relay.addr());
        let mut cfg = DeviceConfig::new(target, 1, scene());
        tweak(&mut cfg);
        let id = cfg.device_id;
        let device = spawn_device(cfg).expect("device");
        let client = Client::connect(ClientConfig::new(relay.addr())).expect("client");
        wait_for_device(&client, id);
        client.attach(id).expect("attach");
        client.wait_frame(None, Duration::from_secs(20)).expect("first frame");
        Self {
            relay,
            netem,
            device: Some(device),
            client,
        }
    }
}

impl Drop for Bench {
    fn drop(&mut self) {
        if let Some(d) = self.device.take() {
            let _ = d.stop();
        }
        if let Some(n) = self.netem.as_mut() {
            n.shutdown();
        }
        self.relay.shutdown();
    }
}

pub fn wait_for_device(client: &Client, id: u32) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while Instant::now() < deadline {
        if client.list_devices().unwrap().iter().any(|d| d.device_id == id && d.status == DeviceStatus::Online) {
            return;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    panic!("device {id} never registered");
}

pub mod messages {
    use avatar_core::{StageId, StageStamp};
    use avatar_net::wire::*;
    use rand::Rng;

    fn string(rng: &mut impl Rng) -> String {
        let n = rng.random_range(0..24);
        (0..n).map(|_| rng.random_range('a'..='z')).collect()
    }

    fn bytes(rng: &mut impl Rng, max: usize) -> Vec<u8> {
        let n = rng.random_range(0..=max);
        (0..n).map(|_| rng.random()).collect()
    }

    fn finite_f32(rng: &mut impl Rng) -> f32 {
        rng.random_range(-1e6f32..1e6)
    }

    pub fn frame(rng: &mut impl Rng) -> FramePayload {
        let mut t: u64 = rng.random_range(0..u64::MAX / 2);
        let t_capture_ns = t;
        let mut stages = Vec::new();
        for stage in StageId::ALL {
            if rng.random_bool(0.6) {
                t += rng.random_range(0..1_000_000_000);
                stages.push(StageStamp { stage, t_ns: t });
            }
        }
        FramePayload {
            device_id: rng.random(),
            seq: rng.random(),
            t_capture_ns,
            stages,
            codec: rng.random_range(0..2),
            width: rng.random(),
            height: rng.random(),
            data: bytes(rng, 4096),
        }
    }

    pub fn control(rng: &mut impl Rng) -> ControlPayload {
        ControlPayload {
            device_id: rng.random(),
            seq: rng.random(),
            t_send_ns: rng.random(),
            linear_mps: finite_f32(rng),
            angular_radps: finite_f32(rng),
            flags: rng.random(),
            opaque: bytes(rng, 64),
        }
    }

    pub fn any(rng: &mut impl Rng) -> WireMessage {
        let body = match rng.random_range(0..11) {
            0 => Message::Hello(Hello {
                role: if rng.random() { Role::Device } else { Role::Client },
                id: rng.random(),
                name: string(rng),
            }),
            1 => Message::Ack {
                acked_type: rng.random(),
                id: rng.random(),
            },
            2 => Message::Attach { device_id: rng.random() },
            3 => Message::ListDevices,
            4 => Message::Frame(frame(rng)),
            5 => Message::Control(control(rng)),
            6 => Message::DeviceList(
                (0..rng.random_range(0..5))
                    .map(|_| DeviceInfo {
                        device_id: rng.random(),
                        status: if rng.random() { DeviceStatus::Online } else { DeviceStatus::Offline },
                        last_seen_ns: rng.random(),
                        name: string(rng),
                    })
                    .collect(),
            ),
            7 => Message::Error {
                code: rng.random(),
                message: string(rng),
            },
            8 => Message::Ping(Ping {
                nonce: rng.random(),
                target: rng.random_range(0..2),
                origin: rng.random(),
                t_send_ns: rng.random(),
            }),
            9 => Message::Pong(Pong {
                nonce: rng.random(),
                origin: rng.random(),
                t_ping_send_ns: rng.random(),
                t_remote_ns: rng.random(),
            }),
            _ => Message::ControlApplied(ControlApplied {
                device_id: rng.random(),
                seq: rng.random(),
                t_send_ns: rng.random(),
                t_applied_ns: rng.random(),
            }),
        };
        WireMessage {
            flags: rng.random(),
            body,
        }
    }

    /// Byte layout assembled field by field, independent of the library
    /// encoder.
    pub fn reference_frame_bytes(flags: u16, f: &FramePayload) -> Vec<u8> {
        let mut p = Vec::new();
        p.extend(f.device_id.to_le_bytes());
        p.extend(f.seq.to_le_bytes());
        p.extend(f.t_capture_ns.to_le_bytes());
        p.push(f.stages.len() as u8);
        for s in &f.stages {
            p.push(s.stage as u8);
            p.extend(s.t_ns.to_le_bytes());
        }
        p.push(f.codec);
        p.extend(f.width.to_le_bytes());
        p.extend(f.height.to_le_bytes());
        p.extend((f.data.len() as u32).to_le_bytes());
        p.extend(&f.data);
        with_header(0x05, flags, p)
    }

    pub fn reference_control_bytes(flags: u16, c: &ControlPayload) -> Vec<u8> {
        let mut p = Vec::new();
        p.extend(c.device_id.to_le_bytes());
        p.extend(c.seq.to_le_bytes());
        p.extend(c.t_send_ns.to_le_bytes());
        p.extend(c.linear_mps.to_le_bytes());
        p.extend(c.angular_radps.to_le_bytes());
        p.extend(c.flags.to_le_bytes());
        p.extend((c.opaque.len() as u16).to_le_bytes());
        p.extend(&c.opaque);
        with_header(0x06, flags, p)
    }

    fn with_header(ty: u8, flags: u16, payload: Vec<u8>) -> Vec<u8> {
        let mut out = vec![0x52, 0x54, 0x56, 0x41, 0x01, ty];
        out.extend(flags.to_le_bytes());
        out.extend((payload.len() as u32).to_le_bytes());
        out.extend(payload);
        out
    }

    /// Minimal CONTROL: device 1, seq 1, everything else zero.
    pub fn golden_control() -> Vec<u8> {
        let mut g = vec![0x52, 0x54, 0x56, 0x41, 0x01, 0x06, 0x00, 0x00, 0x20, 0x00, 0x00, 0x00];
        g.extend([0x01, 0x00, 0x00, 0x00]);
        g.extend([0x01, 0, 0, 0, 0, 0, 0, 0]);
        g.extend([0u8; 20]);
        g
    }
}
