//! Network impairment: fixed delay, jitter and a bandwidth cap.
//!
//! A message of `L` bits offered at `t_send` first waits in a token bucket
//! (rate = bandwidth, capacity = [`BURST_BYTES`], initially empty), then
//! travels for `base + jitter`. Jitter is the magnitude of a zero-mean
//! Gaussian, so nothing arrives before `t_send + base`. Delivery times are
//! made monotone with `max(previous, candidate)`, which keeps order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bucket depth: two 64 KiB MTU-equivalents.
pub const BURST_BYTES: u64 = 2 * 64 * 1024;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile field {0} must be finite and nonnegative")]
    Invalid(&'static str),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub name: String,
    pub base_delay_ms: f64,
    pub jitter_stddev_ms: f64,
    /// 0 means unlimited.
    pub bandwidth_kbps: f64,
}

impl NetworkProfile {
    pub fn new(name: &str, base_delay_ms: f64, jitter_stddev_ms: f64, bandwidth_kbps: f64) -> Result<Self, ProfileError> {
        let p = Self {
            name: name.to_string(),
            base_delay_ms,
            jitter_stddev_ms,
            bandwidth_kbps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn none() -> Self {
        Self::fixed(0.0)
    }

    /// Constant delay, no jitter, unlimited bandwidth.
    pub fn fixed(base_delay_ms: f64) -> Self {
        Self {
            name: format!("fixed_{base_delay_ms}ms"),
            base_delay_ms,
            jitter_stddev_ms: 0.0,
            bandwidth_kbps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.base_delay_ms) {
            return Err(ProfileError::Invalid("base_delay_ms"));
        }
        if !ok(self.jitter_stddev_ms) {
            return Err(ProfileError::Invalid("jitter_stddev_ms"));
        }
        if !ok(self.bandwidth_kbps) {
            return Err(ProfileError::Invalid("bandwidth_kbps"));
        }
        Ok(())
    }

    /// Named presets. Delays are one-way.
    pub fn preset(name: &str) -> Result<Self, ProfileError> {
        let (base, jitter) = match name {
            "none" | "loopback" => (0.0, 0.0),
            "office" => (160.0, 5.0),
            "laboratory" => (205.0, 10.0),
            "outdoor" => (370.0, 25.0),
            _ => return Err(ProfileError::UnknownPreset(name.to_string())),
        };
        Ok(Self {
            name: name.to_string(),
            base_delay_ms: base,
            jitter_stddev_ms: jitter,
            bandwidth_kbps: 0.0,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    /// A preset name, or a path to a JSON profile.
    pub fn load(source: &str) -> Result<Self, ProfileError> {
        if Path::new(source).is_file() {
            Self::from_json(&std::fs::read_to_string(source)?)
        } else {
            Self::preset(source)
        }
    }

    pub fn is_unlimited(&self) -> bool {
        self.bandwidth_kbps == 0.0
    }
}

/// One direction of an impaired link. Owns its timeline.
#[derive(Debug, Clone)]
pub struct Impairer {
    base_ns: f64,
    jitter: Option<Normal<f64>>,
    bits_per_ns: f64,
    rng: ChaCha8Rng,
    tokens_bits: f64,
    bucket_t_ns: Option<u64>,
    last_deliver_ns: u64,
}

impl Impairer {
    pub fn new(profile: &NetworkProfile, seed: u64) -> Self {
        let sigma = profile.jitter_stddev_ms * 1e6;
        Self {
            base_ns: profile.base_delay_ms * 1e6,
            jitter: (sigma > 0.0).then(|| Normal::new(0.0, sigma).unwrap()),
            bits_per_ns: profile.bandwidth_kbps * 1e3 / 1e9,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tokens_bits: 0.0,
            bucket_t_ns: None,
            last_deliver_ns: 0,
        }
    }

    /// Time the last bit of a `len`-byte message offered at `t_send_ns`
    /// leaves the bucket.
    fn depart(&mut self, t_send_ns: u64, len: usize) -> u64 {
        if self.bits_per_ns == 0.0 {
            return t_send_ns;
        }
        let cap = BURST_BYTES as f64 * 8.0;
        // The bucket starts filling at the first message.
        let mut t = self.bucket_t_ns.unwrap_or(t_send_ns);
        if t_send_ns > t {
            let refill = (t_send_ns - t) as f64 * self.bits_per_ns;
            self.tokens_bits = (self.tokens_bits + refill).min(cap);
            t = t_send_ns;
        }
        self.tokens_bits -= len as f64 * 8.0;
        if self.tokens_bits < 0.0 {
            // Wait until the debt is repaid; the bucket is empty then.
            t += (-self.tokens_bits / self.bits_per_ns).round() as u64;
            self.tokens_bits = 0.0;
        }
        self.bucket_t_ns = Some(t);
        t
    }

    /// Delivery time for a message; calls must come in send order.
    pub fn schedule(&mut self, t_send_ns: u64, len: usize) -> u64 {
        let depart = self.depart(t_send_ns, len);
        let jitter = self.jitter.map(|n| n.sample(&mut self.rng).abs()).unwrap_or(0.0);
        let candidate = depart + (self.base_ns + jitter).round() as u64;
        self.last_deliver_ns = self.last_deliver_ns.max(candidate);
        self.last_deliver_ns
    }
}

/// Applies a profile to a whole stream of `(t_send_ns, bytes)`.
pub fn impair<I>(stream: I, profile: &NetworkProfile, seed: u64) -> Vec<(u64, Vec<u8>)>
where
    I: IntoIterator<Item = (u64, Vec<u8>)>,
{
    let mut imp = Impairer::new(profile, seed);
    stream.into_iter().map(|(t, b)| (imp.schedule(t, b.len()), b)).collect()
}
