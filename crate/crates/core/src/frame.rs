//! Frames and the stage-timestamp trail they carry through the pipeline.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::image::RgbImage;

/// Pipeline stages in the order a frame crosses them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum StageId {
    Capture = 0,
    StitchDone = 1,
    EncodeDone = 2,
    Sent = 3,
    RelayForwarded = 4,
    ClientReceived = 5,
    Decoded = 6,
    Displayed = 7,
}

impl StageId {
    pub const ALL: [StageId; 8] = [
        StageId::Capture,
        StageId::StitchDone,
        StageId::EncodeDone,
        StageId::Sent,
        StageId::RelayForwarded,
        StageId::ClientReceived,
        StageId::Decoded,
        StageId::Displayed,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StageId::Capture => "capture",
            StageId::StitchDone => "stitch_done",
            StageId::EncodeDone => "encode_done",
            StageId::Sent => "sent",
            StageId::RelayForwarded => "relay_forwarded",
            StageId::ClientReceived => "client_received",
            StageId::Decoded => "decoded",
            StageId::Displayed => "displayed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: StageId,
    pub t_ns: u64,
}

/// Ordered stage stamps. Pushing keeps times strictly increasing: a stamp
/// that would tie or precede the previous one is bumped to `last + 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageTrail(Vec<StageStamp>);

impl StageTrail {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn from_stamps(stamps: Vec<StageStamp>) -> Self {
        Self(stamps)
    }

    /// Appends a stamp and returns the time actually recorded.
    pub fn push(&mut self, stage: StageId, t_ns: u64) -> u64 {
        let t = match self.0.last() {
            Some(last) if t_ns <= last.t_ns => last.t_ns + 1,
            _ => t_ns,
        };
        self.0.push(StageStamp { stage, t_ns: t });
        t
    }

    pub fn stamps(&self) -> &[StageStamp] {
        &self.0
    }

    pub fn get(&self, stage: StageId) -> Option<u64> {
        self.0.iter().find(|s| s.stage == stage).map(|s| s.t_ns)
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.0.windows(2).all(|w| w[0].t_ns < w[1].t_ns)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One camera's image.
#[derive(Debug, Clone, PartialEq)]
pub struct FisheyeFrame {
    pub image: RgbImage,
    pub t_capture_ns: u64,
    pub seq: u64,
    pub stages: StageTrail,
}

/// A stitched equirectangular panorama. `coverage`, when present, flags which
/// pixels came from at least one camera (row-major, one entry per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaFrame {
    pub image: RgbImage,
    pub t_capture_ns: u64,
    pub seq: u64,
    pub stages: StageTrail,
    pub coverage: Option<Arc<Vec<bool>>>,
}

impl PanoramaFrame {
    pub fn new(image: RgbImage, t_capture_ns: u64, seq: u64) -> Self {
        Self {
            image,
            t_capture_ns,
            seq,
            stages: StageTrail::new(),
            coverage: None,
        }
    }
}
