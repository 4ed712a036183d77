//! Frame codecs standing in for the hardware video codec.
//!
//! * `RAW` (id 0): row-major RGB bytes, lossless.
//! * `BLOCK` (id 1): per 8×8 block, the rounded per-channel mean plus every
//!   pixel's residual quantized with step `2^(8-q)`. Residual codes are
//!   `(q+1)`-bit two's complement, bit-packed MSB-first. Reconstruction error
//!   is at most `2^(8-q)` per channel, and zero for `q = 8`.
//!
//! BLOCK payload layout: `q: u8`, then block means (`bw·bh·3` bytes, block
//! row-major), then the residual bitstream in block order, pixels row-major
//! within a block, channels interleaved.

use thiserror::Error;

use crate::image::RgbImage;

pub const BLOCK: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unknown codec id {0}")]
    UnknownCodec(u8),
    #[error("BLOCK quality must be in 1..=8, got {0}")]
    InvalidQuality(u8),
    #[error("payload truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("payload has {0} trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Raw,
    Block { quality: u8 },
}

impl Codec {
    pub fn id(self) -> u8 {
        match self {
            Codec::Raw => 0,
            Codec::Block { .. } => 1,
        }
    }

    /// Parses `raw` / `block` as used on the command line.
    pub fn from_name(name: &str, quality: u8) -> Option<Self> {
        match name {
            "raw" => Some(Codec::Raw),
            "block" => Some(Codec::Block { quality }),
            _ => None,
        }
    }
}

pub fn encode_frame(img: &RgbImage, codec: Codec) -> Result<Vec<u8>, CodecError> {
    match codec {
        Codec::Raw => Ok(img.data().to_vec()),
        Codec::Block { quality } => encode_block(img, quality),
    }
}

pub fn decode_frame(payload: &[u8], codec_id: u8, width: u32, height: u32) -> Result<RgbImage, CodecError> {
    match codec_id {
        0 => {
            let need = width as usize * height as usize * 3;
            match payload.len().cmp(&need) {
                std::cmp::Ordering::Less => Err(CodecError::Truncated {
                    need,
                    have: payload.len(),
                }),
                std::cmp::Ordering::Greater => Err(CodecError::TrailingBytes(payload.len() - need)),
                std::cmp::Ordering::Equal => {
                    Ok(RgbImage::from_raw(width, height, payload.to_vec()).expect("length checked"))
                }
            }
        }
        1 => decode_block(payload, width, height),
        other => Err(CodecError::UnknownCodec(other)),
    }
}

fn blocks(width: u32, height: u32) -> (usize, usize) {
    (
        (width as usize).div_ceil(BLOCK),
        (height as usize).div_ceil(BLOCK),
    )
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    n: u32,
}

impl BitWriter {
    fn put(&mut self, value: u32, bits: u32) {
        self.acc = (self.acc << bits) | (value as u64 & ((1 << bits) - 1));
        self.n += bits;
        while self.n >= 8 {
            self.n -= 8;
            self.out.push((self.acc >> self.n) as u8);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            self.out.push((self.acc << (8 - self.n)) as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u64,
    n: u32,
}

impl BitReader<'_> {
    fn get(&mut self, bits: u32) -> Option<u32> {
        while self.n < bits {
            let b = *self.data.get(self.pos)?;
            self.pos += 1;
            self.acc = (self.acc << 8) | b as u64;
            self.n += 8;
        }
        self.n -= bits;
        Some(((self.acc >> self.n) & ((1 << bits) - 1)) as u32)
    }
}

fn block_coords(width: u32, height: u32, bx: usize, by: usize) -> impl Iterator<Item = usize> {
    let (w, h) = (width as usize, height as usize);
    let x0 = bx * BLOCK;
    let y0 = by * BLOCK;
    (y0..(y0 + BLOCK).min(h)).flat_map(move |y| (x0..(x0 + BLOCK).min(w)).map(move |x| (y * w + x) * 3))
}

fn encode_block(img: &RgbImage, quality: u8) -> Result<Vec<u8>, CodecError> {
    if !(1..=8).contains(&quality) {
        return Err(CodecError::InvalidQuality(quality));
    }
    let (bw, bh) = blocks(img.width(), img.height());
    let step = 1i32 << (8 - quality);
    let bits = quality as u32 + 1;
    let max_code = (1i32 << quality) - 1;
    let min_code = -(1i32 << quality);
    let data = img.data();

    let mut means = Vec::with_capacity(bw * bh * 3);
    for by in 0..bh {
        for bx in 0..bw {
            let mut sum = [0u32; 3];
            let mut n = 0u32;
            for i in block_coords(img.width(), img.height(), bx, by) {
                for c in 0..3 {
                    sum[c] += data[i + c] as u32;
                }
                n += 1;
            }
            for s in sum {
                means.push(((s + n / 2) / n) as u8);
            }
        }
    }

    let mut out = Vec::with_capacity(1 + means.len() + data.len() * bits as usize / 8 + 1);
    out.push(quality);
    out.extend_from_slice(&means);
    let mut w = BitWriter {
        out,
        acc: 0,
        n: 0,
    };
    for by in 0..bh {
        for bx in 0..bw {
            let m = &means[(by * bw + bx) * 3..][..3];
            for i in block_coords(img.width(), img.height(), bx, by) {
                for c in 0..3 {
                    let r = data[i + c] as i32 - m[c] as i32;
                    // Round half away from zero, then clamp into the code range.
                    let code = if r >= 0 {
                        (r + step / 2) / step
                    } else {
                        -((-r + step / 2) / step)
                    }
                    .clamp(min_code, max_code);
                    w.put(code as u32, bits);
                }
            }
        }
    }
    Ok(w.finish())
}

fn decode_block(payload: &[u8], width: u32, height: u32) -> Result<RgbImage, CodecError> {
    let (&quality, rest) = payload.split_first().ok_or(CodecError::Truncated { need: 1, have: 0 })?;
    if !(1..=8).contains(&quality) {
        return Err(CodecError::InvalidQuality(quality));
    }
    let (bw, bh) = blocks(width, height);
    let n_means = bw * bh * 3;
    let n_codes = width as usize * height as usize * 3;
    let bits = quality as usize + 1;
    let need = 1 + n_means + (n_codes * bits).div_ceil(8);
    if payload.len() < need {
        return Err(CodecError::Truncated {
            need,
            have: payload.len(),
        });
    }
    if payload.len() > need {
        return Err(CodecError::TrailingBytes(payload.len() - need));
    }
    let (means, stream) = rest.split_at(n_means);
    let step = 1i32 << (8 - quality);
    let sign_bit = 1u32 << quality;
    let mut rd = BitReader {
        data: stream,
        pos: 0,
        acc: 0,
        n: 0,
    };
    let mut data = vec![0u8; n_codes];
    for by in 0..bh {
        for bx in 0..bw {
            let m = &means[(by * bw + bx) * 3..][..3];
            for i in block_coords(width, height, bx, by) {
                for c in 0..3 {
                    let raw = rd.get(bits as u32).ok_or(CodecError::Truncated {
                        need,
                        have: payload.len(),
                    })?;
                    let code = if raw & sign_bit != 0 {
                        raw as i32 - (1 << (quality + 1))
                    } else {
                        raw as i32
                    };
                    data[i + c] = (m[c] as i32 + code * step).clamp(0, 255) as u8;
                }
            }
        }
    }
    Ok(RgbImage::from_raw(width, height, data).expect("sized above"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
        let data = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
        RgbImage::from_raw(w, h, data).unwrap()
    }

    fn max_err(a: &RgbImage, b: &RgbImage) -> i32 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as i32 - y as i32).abs())
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn raw_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 33, 17);
        let bytes = encode_frame(&img, Codec::Raw).unwrap();
        assert_eq!(bytes, img.data());
        assert_eq!(decode_frame(&bytes, 0, 33, 17).unwrap(), img);
    }

    #[test]
    fn block_constant_image_is_lossless() {
        for q in 1..=8 {
            let img = RgbImage::filled(40, 24, [13, 200, 77]);
            let bytes = encode_frame(&img, Codec::Block { quality: q }).unwrap();
            assert_eq!(decode_frame(&bytes, 1, 40, 24).unwrap(), img);
        }
    }

    #[test]
    fn block_q8_error_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let img = random_image(&mut rng, 37, 29);
            let bytes = encode_frame(&img, Codec::Block { quality: 8 }).unwrap();
            let back = decode_frame(&bytes, 1, 37, 29).unwrap();
            assert!(max_err(&img, &back) <= 1);
        }
    }

    #[test]
    fn block_extreme_residuals_stay_in_bound() {
        // Half-black / half-white blocks push residuals to the code range limits.
        let mut img = RgbImage::new(16, 8);
        for y in 0..8 {
            for x in 0..16 {
                if (x + y) % 2 == 0 || x == 0 {
                    img.put_pixel(x, y, [255, 255, 255]);
                }
            }
        }
        img.put_pixel(9, 3, [255, 0, 255]);
        for q in 1..=8u8 {
            let bytes = encode_frame(&img, Codec::Block { quality: q }).unwrap();
            let back = decode_frame(&bytes, 1, 16, 8).unwrap();
            assert!(max_err(&img, &back) <= 1 << (8 - q), "q={q}");
        }
    }

    #[test]
    fn errors() {
        assert_eq!(decode_frame(&[0; 5], 9, 1, 1).unwrap_err(), CodecError::UnknownCodec(9));
        assert!(matches!(decode_frame(&[0; 5], 0, 2, 1), Err(CodecError::Truncated { .. })));
        let img = RgbImage::filled(8, 8, [1, 2, 3]);
        let mut bytes = encode_frame(&img, Codec::Block { quality: 4 }).unwrap();
        bytes.pop();
        assert!(matches!(decode_frame(&bytes, 1, 8, 8), Err(CodecError::Truncated { .. })));
        assert!(encode_frame(&img, Codec::Block { quality: 0 }).is_err());
        assert!(decode_frame(&[], 1, 8, 8).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn block_error_bound(seed in any::<u64>(), q in 1u8..=8, w in 1u32..40, h in 1u32..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, w, h);
            let bytes = encode_frame(&img, Codec::Block { quality: q }).unwrap();
            let back = decode_frame(&bytes, 1, w, h).unwrap();
            prop_assert!(max_err(&img, &back) <= 1 << (8 - q));
        }
    }
}
