mod common;

use std::time::Duration;

use avatar_net::client::{Client, ClientConfig};
use avatar_net::harness::{estimate_offset, measure_event_to_eye, SamplingPlan};
use avatar_net::netem::NetemProxy;
use avatar_net::wire::{PING_DEVICE, PING_RELAY};
use avatar_net::NetworkProfile;
use common::{loopback, Bench};

fn plan(n: usize) -> SamplingPlan {
    SamplingPlan {
        n_samples: n,
        interval: Duration::from_millis(400),
        first_at: Duration::from_millis(500),
        ..SamplingPlan::default()
    }
}

#[test]
fn zero_jitter_loopback_stddev_within_ten_ms() {
    let bench = Bench::start(None, |_| {});
    let off = estimate_offset(&bench.client, PING_DEVICE, 16).unwrap();
    let run = measure_event_to_eye(&bench.client, &plan(12), off.offset_ns).unwrap();
    eprintln!("loopback samples {:?}, stddev {:.2} ms", run.samples_s, run.stddev_s * 1e3);
    assert!(run.stddev_s <= 0.010, "stddev {:.2} ms", run.stddev_s * 1e3);
}

#[test]
fn every_sample_exceeds_injected_delay() {
    let bench = Bench::start(Some(NetworkProfile::fixed(100.0)), |_| {});
    let off = estimate_offset(&bench.client, PING_RELAY, 16).unwrap();
    let run = measure_event_to_eye(&bench.client, &plan(8), off.offset_ns).unwrap();
    for s in &run.samples_s {
        assert!(*s >= 0.100, "sample {s} below injected 100 ms");
    }
}

#[test]
fn asymmetric_link_bias_bounded_by_half_asymmetry() {
    let bench = Bench::start(None, |_| {});
    let asym_ms = 40.0;
    let proxy = NetemProxy::start(loopback(), bench.relay.addr(), NetworkProfile::fixed(asym_ms), NetworkProfile::none(), 3).unwrap();
    let far = Client::connect(ClientConfig::new(proxy.addr())).unwrap();
    // Same host clock on both ends: the true offset is zero.
    let off = estimate_offset(&far, PING_RELAY, 16).unwrap();
    let bias_ms = off.offset_ns.abs() as f64 * 1e-6;
    assert!(bias_ms <= asym_ms / 2.0 + 1.0, "bias {bias_ms:.2} ms");
    assert!(bias_ms >= asym_ms / 2.0 - 5.0, "asymmetry not visible: {bias_ms:.2} ms");
    far.close();
}
