mod common;

use std::io::Cursor;

use avatar_net::wire::*;
use common::messages;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn message(seed: u64) -> WireMessage {
    messages::any(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn golden_minimal_control() {
    let msg: WireMessage = Message::Control(ControlPayload {
        device_id: 1,
        seq: 1,
        t_send_ns: 0,
        linear_mps: 0.0,
        angular_radps: 0.0,
        flags: 0,
        opaque: vec![],
    })
    .into();
    let golden = messages::golden_control();
    assert_eq!(golden.len(), 12 + 32);
    assert_eq!(encode_message(&msg), golden);
    assert_eq!(decode_message(&golden).unwrap(), msg);
}

#[test]
fn every_error_has_a_distinct_code() {
    let good = encode_message(&Message::Attach { device_id: 3 }.into());
    let mut magic = good.clone();
    magic[0] ^= 1;
    let mut version = good.clone();
    version[4] = 2;
    let mut ty = good.clone();
    ty[5] = 0x7f;
    let cases = [
        decode_message(&magic).unwrap_err(),
        decode_message(&version).unwrap_err(),
        decode_message(&good[..good.len() - 1]).unwrap_err(),
        decode_message(&ty).unwrap_err(),
    ];
    let mut codes: Vec<u8> = cases.iter().map(|e| e.code()).collect();
    codes.dedup();
    assert_eq!(codes.len(), cases.len(), "{cases:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn round_trip_is_bit_exact(seed in any::<u64>()) {
        let m = message(seed);
        let bytes = encode_message(&m);
        let back = decode_message(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(encode_message(&back), bytes);
    }

    #[test]
    fn library_matches_reference_layout(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = messages::frame(&mut rng);
        let c = messages::control(&mut rng);
        prop_assert_eq!(encode_message(&WireMessage { flags: 3, body: Message::Frame(f.clone()) }), messages::reference_frame_bytes(3, &f));
        prop_assert_eq!(encode_message(&WireMessage { flags: 0, body: Message::Control(c.clone()) }), messages::reference_control_bytes(0, &c));
    }

    #[test]
    fn concatenated_stream_splits_back(seeds in prop::collection::vec(any::<u64>(), 1..20)) {
        let msgs: Vec<WireMessage> = seeds.iter().map(|s| message(*s)).collect();
        let mut buf = Vec::new();
        for m in &msgs {
            encode_into(m, &mut buf);
        }
        prop_assert_eq!(&decode_stream(&buf).unwrap(), &msgs);
        let mut r = Cursor::new(&buf);
        let mut read = Vec::new();
        while let Some(m) = read_message(&mut r).unwrap() {
            read.push(m);
        }
        prop_assert_eq!(read, msgs);
    }

    #[test]
    fn any_strict_prefix_is_rejected(seed in any::<u64>(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_message(&message(seed));
        let n = cut.index(bytes.len());
        prop_assert!(decode_message(&bytes[..n]).is_err());
        let mut r = Cursor::new(&bytes[..n]);
        match read_message(&mut r) {
            Ok(None) => prop_assert_eq!(n, 0),
            Ok(Some(_)) => prop_assert!(false, "torn message accepted"),
            Err(_) => prop_assert!(n > 0),
        }
    }

    #[test]
    fn random_bytes_never_panic(data in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_message(&data);
        let _ = decode_stream(&data);
    }
}
