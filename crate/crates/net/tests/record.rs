
use std::fs;
use std::io::{BufReader, Write};
use std::net::TcpStream;
use std::thread;
use std::time::{Duration, Instant};

use avatar_core::{StageId, StageStamp};
use avatar_net::record::{replay, replay_to_relay, RecordError, Recorder, RecordingReader, RECORDING_FILE, RECORDING_MAGIC};
use avatar_net::relay::{Relay, RelayConfig};
use avatar_net::wire::{encode_message, read_raw, FramePayload, Hello, Message, Role, WireMessage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frame_bytes(seq: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seq);
    encode_message(
        &Message::Frame(FramePayload {
            device_id: 8,
            seq,
            t_capture_ns: 1000 + seq,
            stages: vec![StageStamp {
                stage: StageId::Capture,
                t_ns: 1000 + seq,
            }],
            codec: 0,
            width: 16,
            height: 8,
            data: (0..16 * 8 * 3).map(|_| rng.random()).collect(),
        })
        .into(),
    )
}

fn hello(stream: &mut TcpStream, role: Role, id: u32) {
    let m: WireMessage = Message::Hello(Hello {
        role,
        id,
        name: String::new(),
    })
    .into();
    stream.write_all(&encode_message(&m)).unwrap();
    let (_, ack) = read_raw(stream).unwrap().unwrap();
    assert!(matches!(avatar_net::decode_message(&ack).unwrap().body, Message::Ack { .. }));
}

/// Sends 50 frames through a recording relay with irregular gaps; returns
/// the recording path, the sent bytes and the send times.
fn record_session(dir: &std::path::Path) -> (std::path::PathBuf, Vec<Vec<u8>>, Vec<Instant>) {
    let mut cfg = RelayConfig::loopback();
    cfg.record_dir = Some(dir.to_path_buf());
    let mut relay = Relay::start(cfg).unwrap();
    let mut dev = TcpStream::connect(relay.addr()).unwrap();
    dev.set_nodelay(true).unwrap();
    hello(&mut dev, Role::Device, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sent = Vec::new();
    let mut times = Vec::new();
    for seq in 0..50 {
        let b = frame_bytes(seq);
        times.push(Instant::now());
        dev.write_all(&b).unwrap();
        sent.push(b);
        thread::sleep(Duration::from_millis(rng.random_range(5..60)));
    }
    thread::sleep(Duration::from_millis(50));
    let path = relay.recording_path().unwrap().clone();
    relay.shutdown();
    (path, sent, times)
}

#[test]
fn recorded_session_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (path, sent, times) = record_session(dir.path());
    assert_eq!(path, dir.path().join(RECORDING_FILE));
    assert!(fs::read(&path).unwrap().starts_with(RECORDING_MAGIC));

    let entries: Vec<_> = RecordingReader::open(&path).unwrap().map(Result::unwrap).collect();
    assert_eq!(entries.len(), 50);
    assert!(entries.windows(2).all(|w| w[0].recv_t_ns <= w[1].recv_t_ns));

    let start = Instant::now();
    let mut got = Vec::new();
    let report = replay(RecordingReader::open(&path).unwrap(), |e| {
        got.push((start.elapsed(), e.bytes.clone()));
        true
    });
    assert!(report.error.is_none());
    assert_eq!(report.delivered, 50);
    let payloads: Vec<Vec<u8>> = got.iter().map(|(_, b)| b.clone()).collect();
    assert_eq!(payloads, sent);
    for i in 1..50 {
        let original = (times[i] - times[i - 1]).as_secs_f64() * 1e3;
        let replayed = (got[i].0 - got[i - 1].0).as_secs_f64() * 1e3;
        assert!((original - replayed).abs() <= 10.0, "gap {i}: original {original:.2} ms, replayed {replayed:.2} ms");
    }
}

#[test]
fn truncated_recording_replays_prefix_then_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.avtrrec");
    let mut rec = Recorder::create(&path).unwrap();
    for seq in 0..10 {
        rec.append(seq * 1_000_000, &frame_bytes(seq)).unwrap();
    }
    drop(rec);
    let full = fs::read(&path).unwrap();
    fs::write(&path, &full[..full.len() - 7]).unwrap();
    let mut n = 0;
    let report = replay(RecordingReader::open(&path).unwrap(), |_| {
        n += 1;
        true
    });
    assert_eq!(report.delivered, 9);
    assert_eq!(n, 9);
    assert!(matches!(report.error, Some(RecordError::Truncated { index: 9 })));
}

#[test]
fn corrupt_entry_stops_replay() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.avtrrec");
    let mut rec = Recorder::create(&path).unwrap();
    for seq in 0..4 {
        rec.append(seq, &frame_bytes(seq)).unwrap();
    }
    drop(rec);
    let mut bytes = fs::read(&path).unwrap();
    // Break the magic of the third message.
    let entry = 12 + frame_bytes(0).len();
    bytes[8 + 2 * entry + 12] ^= 0xff;
    fs::write(&path, &bytes).unwrap();
    let report = replay(RecordingReader::open(&path).unwrap(), |_| true);
    assert_eq!(report.delivered, 2);
    assert!(matches!(report.error, Some(RecordError::BadMessage { index: 2, .. })));

    fs::write(&path, b"NOTAREC!").unwrap();
    assert!(matches!(RecordingReader::open(&path), Err(RecordError::BadMagic)));
}

#[test]
fn replay_into_relay_reaches_clients() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.avtrrec");
    let mut rec = Recorder::create(&path).unwrap();
    for seq in 0..20 {
        rec.append(seq * 50_000_000, &frame_bytes(seq)).unwrap();
    }
    drop(rec);
    let relay = Relay::start(RelayConfig::loopback()).unwrap();
    let addr = relay.addr();
    let mut client = TcpStream::connect(addr).unwrap();
    hello(&mut client, Role::Client, 0);
    client.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let replayer = thread::spawn(move || replay_to_relay(&path, addr, 8).unwrap());
    // Attach as soon as the replaying device registers; early frames may
    // be missed.
    let mut r = BufReader::new(client.try_clone().unwrap());
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        client.write_all(&encode_message(&Message::Attach { device_id: 8 }.into())).unwrap();
        let (_, b) = read_raw(&mut r).unwrap().unwrap();
        if matches!(avatar_net::decode_message(&b).unwrap().body, Message::Ack { .. }) {
            break;
        }
        assert!(Instant::now() < deadline);
        thread::sleep(Duration::from_millis(20));
    }
    let mut seqs = Vec::new();
    while seqs.last() != Some(&19) {
        let (_, b) = read_raw(&mut r).unwrap().unwrap();
        if let Message::Frame(f) = avatar_net::decode_message(&b).unwrap().body {
            assert_eq!(f.device_id, 8);
            seqs.push(f.seq);
        }
    }
    assert!(seqs.len() >= 15, "{seqs:?}");
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
    assert_eq!(replayer.join().unwrap().delivered, 20);
}
