//! Optional per-frame processing in the relay.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use avatar_core::codec::{decode_frame, encode_frame, Codec, CodecError};
use avatar_core::frame::{StageId, StageStamp, StageTrail};
use thiserror::Error;

use crate::wire::FramePayload;

/// Rectangle drawn by the `annotate` stage: x, y, width, height, stroke.
pub const ANNOTATE_RECT: (u32, u32, u32, u32, u32) = (256, 128, 128, 96, 4);
pub const ANNOTATE_COLOR: [u8; 3] = [255, 0, 0];

#[derive(Debug, Error)]
pub enum StageError {
    #[error("unknown stage {0:?} (expected noop, fixed_delay:<ms> or annotate)")]
    Unknown(String),
    #[error("frame not decodable: {0}")]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StageSpec {
    #[default]
    Noop,
    FixedDelay(Duration),
    Annotate,
}

impl StageSpec {
    pub fn delay(&self) -> Duration {
        match self {
            StageSpec::FixedDelay(d) => *d,
            _ => Duration::ZERO,
        }
    }

    /// Whether the stage touches pixels (and so needs a decode).
    pub fn transforms(&self) -> bool {
        matches!(self, StageSpec::Annotate)
    }
}

impl FromStr for StageSpec {
    type Err = StageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noop" => Ok(StageSpec::Noop),
            "annotate" => Ok(StageSpec::Annotate),
            _ => s
                .strip_prefix("fixed_delay:")
                .and_then(|ms| ms.parse::<u64>().ok())
                .map(|ms| StageSpec::FixedDelay(Duration::from_millis(ms)))
                .ok_or_else(|| StageError::Unknown(s.to_string())),
        }
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageSpec::Noop => write!(f, "noop"),
            StageSpec::FixedDelay(d) => write!(f, "fixed_delay:{}", d.as_millis()),
            StageSpec::Annotate => write!(f, "annotate"),
        }
    }
}

fn codec_of(frame: &FramePayload) -> Result<Codec, CodecError> {
    match frame.codec {
        0 => Ok(Codec::Raw),
        1 => Ok(Codec::Block {
            quality: *frame.data.first().ok_or(CodecError::Truncated { need: 1, have: 0 })?,
        }),
        c => Err(CodecError::UnknownCodec(c)),
    }
}

fn transform(frame: &mut FramePayload) -> Result<(), CodecError> {
    let codec = codec_of(frame)?;
    let mut img = decode_frame(&frame.data, frame.codec, frame.width as u32, frame.height as u32)?;
    let (x, y, w, h, t) = ANNOTATE_RECT;
    img.draw_rect(x, y, w, h, t, ANNOTATE_COLOR);
    frame.data = encode_frame(&img, codec)?;
    Ok(())
}

/// Runs the stage's pixel transform and appends the `relay_forwarded` stamp
/// at `t_ns`. An undecodable frame passes through unmodified and the error
/// is returned alongside so the caller can flag it.
pub fn apply_stage(frame: &mut FramePayload, stage: StageSpec, t_ns: u64) -> Option<StageError> {
    let err = if stage.transforms() {
        transform(frame).err().map(StageError::from)
    } else {
        None
    };
    let mut trail = StageTrail::from_stamps(std::mem::take(&mut frame.stages));
    trail.push(StageId::RelayForwarded, t_ns);
    frame.stages = trail.stamps().to_vec();
    err
}

/// Appends a stamp keeping the list strictly increasing.
pub fn push_stamp(stages: &mut Vec<StageStamp>, stage: StageId, t_ns: u64) -> u64 {
    let mut trail = StageTrail::from_stamps(std::mem::take(stages));
    let t = trail.push(stage, t_ns);
    *stages = trail.stamps().to_vec();
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use avatar_core::RgbImage;

    fn frame(codec: Codec) -> FramePayload {
        let img = RgbImage::filled(512, 256, [40, 50, 60]);
        FramePayload {
            device_id: 1,
            seq: 0,
            t_capture_ns: 10,
            stages: vec![StageStamp {
                stage: StageId::Capture,
                t_ns: 10,
            }],
            codec: codec.id(),
            width: 512,
            height: 256,
            data: encode_frame(&img, codec).unwrap(),
        }
    }

    #[test]
    fn parse_and_display() {
        for s in ["noop", "annotate", "fixed_delay:120"] {
            assert_eq!(s.parse::<StageSpec>().unwrap().to_string(), s);
        }
        assert!("fixed_delay:x".parse::<StageSpec>().is_err());
        assert!("blur".parse::<StageSpec>().is_err());
    }

    #[test]
    fn noop_keeps_payload_and_adds_one_stamp() {
        let mut f = frame(Codec::Raw);
        let before = f.data.clone();
        assert!(apply_stage(&mut f, StageSpec::Noop, 20).is_none());
        assert_eq!(f.data, before);
        assert_eq!(f.stages.len(), 2);
        assert_eq!(f.stages[1].stage, StageId::RelayForwarded);
    }

    #[test]
    fn annotate_draws_rectangle() {
        for codec in [Codec::Raw, Codec::Block { quality: 8 }] {
            let mut f = frame(codec);
            assert!(apply_stage(&mut f, StageSpec::Annotate, 20).is_none());
            let img = decode_frame(&f.data, f.codec, 512, 256).unwrap();
            let (x, y, w, h, _) = ANNOTATE_RECT;
            for (px, py) in [(x, y), (x + w - 1, y + h - 1), (x + w / 2, y + 1)] {
                let p = img.pixel(px, py);
                assert!(p[0] >= 254 && p[1] <= 1, "{codec:?} {p:?}");
            }
            let inside = img.pixel(x + w / 2, y + h / 2);
            assert!((inside[0] as i32 - 40).abs() <= 1);
        }
    }

    #[test]
    fn undecodable_frame_passes_through() {
        let mut f = frame(Codec::Raw);
        f.data.truncate(100);
        let before = f.data.clone();
        assert!(apply_stage(&mut f, StageSpec::Annotate, 20).is_some());
        assert_eq!(f.data, before);
        assert_eq!(f.stages.len(), 2);
    }
}
