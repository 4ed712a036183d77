//! 8-bit RGB pixel buffers, bilinear sampling and PNG I/O.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("buffer of {got} bytes does not match {width}x{height} RGB")]
    SizeMismatch { width: u32, height: u32, got: usize },
    #[error("png i/o: {0}")]
    Png(#[from] image::ImageError),
}

/// Row-major interleaved RGB, 8 bits per channel.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn row_len(&self) -> usize {
        self.width as usize * 3
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Draws an axis-aligned rectangle outline, clipped to the image.
    pub fn draw_rect(&mut self, x0: u32, y0: u32, w: u32, h: u32, thickness: u32, rgb: [u8; 3]) {
        let x1 = (x0 + w).min(self.width);
        let y1 = (y0 + h).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let edge = x < x0 + thickness
                    || x + thickness >= x1
                    || y < y0 + thickness
                    || y + thickness >= y1;
                if edge {
                    self.put_pixel(x, y, rgb);
                }
            }
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = img.dimensions();
        Self::from_raw(w, h, img.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        image::save_buffer(
            path,
            &self.data,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    /// Luma (BT.601) as `f32` in `[0, 1]`.
    pub fn to_gray_f32(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
            .collect()
    }
}

/// Out-of-range handling for [`sample_bilinear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    /// Clamp both axes (ordinary images).
    Clamp,
    /// Wrap horizontally, clamp vertically (equirectangular panoramas).
    WrapX,
}

/// Rounds half-up into a channel value.
#[inline]
pub fn round_channel(v: f32) -> u8 {
    let r = v + 0.5;
    if r >= 255.0 {
        255
    } else if r > 0.0 {
        // Truncation of a positive value is its floor.
        r as u8
    } else {
        0
    }
}

/// `x.floor() as i64` through a truncating cast, which avoids a libm call on
/// targets without a rounding instruction.
#[inline]
pub fn floor_i64(x: f64) -> i64 {
    if x.abs() < 4.5e15 {
        let t = x as i64;
        if (t as f64) > x {
            t - 1
        } else {
            t
        }
    } else {
        x.floor() as i64
    }
}

/// Bilinear sample at pixel coordinates `(x, y)` (pixel centers on integers),
/// unrounded.
#[inline]
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64, edge: Edge) -> [f32; 3] {
    let w = img.width as i64;
    let h = img.height as i64;
    let yc = y.clamp(0.0, (h - 1) as f64);
    // Non-negative after the clamp, so truncation is the floor.
    let y0 = yc as i64;
    let fy = (yc - y0 as f64) as f32;
    let y1 = (y0 + 1).min(h - 1);
    let (x0, x1, fx) = match edge {
        Edge::Clamp => {
            let xc = x.clamp(0.0, (w - 1) as f64);
            let x0 = xc as i64;
            (x0, (x0 + 1).min(w - 1), (xc - x0 as f64) as f32)
        }
        Edge::WrapX => {
            let mut x0 = floor_i64(x);
            let fx = (x - x0 as f64) as f32;
            if !(0..w).contains(&x0) {
                x0 = x0.rem_euclid(w);
            }
            let x1 = if x0 + 1 == w { 0 } else { x0 + 1 };
            (x0, x1, fx)
        }
    };
    let d = &img.data;
    let stride = w as usize * 3;
    let (r0, r1) = (y0 as usize * stride, y1 as usize * stride);
    let (c0, c1) = (x0 as usize * 3, x1 as usize * 3);
    let (p00, p10) = (&d[r0 + c0..r0 + c0 + 3], &d[r0 + c1..r0 + c1 + 3]);
    let (p01, p11) = (&d[r1 + c0..r1 + c0 + 3], &d[r1 + c1..r1 + c1 + 3]);
    let mut out = [0f32; 3];
    for c in 0..3 {
        let top = p00[c] as f32 * (1.0 - fx) + p10[c] as f32 * fx;
        let bot = p01[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    out
}

#[inline]
pub fn sample_bilinear_u8(img: &RgbImage, x: f64, y: f64, edge: Edge) -> [u8; 3] {
    let s = sample_bilinear(img, x, y, edge);
    [round_channel(s[0]), round_channel(s[1]), round_channel(s[2])]
}

/// Peak signal-to-noise ratio in dB over pixels where `mask` is true (all
/// pixels when `None`). Identical images give `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage, mask: Option<&[bool]>) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let mut se = 0f64;
    let mut n = 0usize;
    for (i, (pa, pb)) in a.data.chunks_exact(3).zip(b.data.chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for c in 0..3 {
            let d = pa[c] as f64 - pb[c] as f64;
            se += d * d;
        }
        n += 3;
    }
    if n == 0 || se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (255.0 * 255.0 / (se / n as f64)).log10()
}
