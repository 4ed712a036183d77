//! Six fisheye frames → one equirectangular panorama through a precomputed
//! lookup map with feathered blending.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::frame::{FisheyeFrame, PanoramaFrame, StageTrail};
use crate::geometry::{equirect_to_direction, off_axis_angle, project_unchecked, EquirectCoords};
use crate::image::{round_channel, sample_bilinear, Edge, RgbImage};
use crate::par::{for_each_row, map_indices, Exec};
use crate::rig::{CalibrationError, RigCalibration, RIG_CAMERAS};

/// Fill for panorama pixels no camera sees (the poles of a level ring).
pub const FILL_GRAY: [u8; 3] = [128, 128, 128];

#[derive(Debug, Error)]
pub enum StitchError {
    #[error("panorama must be 2:1 and non-empty, got {0}x{1}")]
    PanoramaShape(u32, u32),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("expected {RIG_CAMERAS} frames, got {0}")]
    MissingFrames(usize),
    #[error("frame {index} is {got:?}, calibration says {want:?}")]
    DimensionMismatch {
        index: usize,
        got: (u32, u32),
        want: (u32, u32),
    },
}

/// One camera's contribution to a panorama pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapEntry {
    pub camera: u8,
    pub x: f32,
    pub y: f32,
    pub weight: f32,
}

/// Bilinear taps of a [`MapEntry`], resolved against its camera's image size
/// with clamped edges.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    i00: u32,
    dx: u32,
    dy: u32,
    fx: f32,
    fy: f32,
}

impl Tap {
    fn new(e: &MapEntry, (w, h): (u32, u32)) -> Self {
        let (w, h) = (w as i64, h as i64);
        let xc = (e.x as f64).clamp(0.0, (w - 1) as f64);
        let x0 = xc as i64;
        let yc = (e.y as f64).clamp(0.0, (h - 1) as f64);
        let y0 = yc as i64;
        Self {
            i00: ((y0 * w + x0) * 3) as u32,
            dx: (((x0 + 1).min(w - 1) - x0) * 3) as u32,
            dy: (((y0 + 1).min(h - 1) - y0) * w * 3) as u32,
            fx: (xc - x0 as f64) as f32,
            fy: (yc - y0 as f64) as f32,
        }
    }

    /// Same value as `sample_bilinear(.., Edge::Clamp)` at the entry.
    #[inline]
    fn sample(&self, d: &[u8]) -> [f32; 3] {
        let i00 = self.i00 as usize;
        let i10 = i00 + self.dx as usize;
        let i01 = i00 + self.dy as usize;
        let i11 = i01 + self.dx as usize;
        let (p00, p10, p01, p11) = (&d[i00..i00 + 3], &d[i10..i10 + 3], &d[i01..i01 + 3], &d[i11..i11 + 3]);
        let (fx, fy) = (self.fx, self.fy);
        let mut out = [0f32; 3];
        for c in 0..3 {
            let top = p00[c] as f32 * (1.0 - fx) + p10[c] as f32 * fx;
            let bot = p01[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }
}

/// Per-panorama-pixel list of weighted camera samples. Weights of a covered
/// pixel sum to 1; uncovered pixels have no entries.
#[derive(Debug, Clone)]
pub struct StitchMap {
    width: u32,
    height: u32,
    offsets: Vec<u32>,
    entries: Vec<MapEntry>,
    taps: Vec<Tap>,
    coverage: Arc<Vec<bool>>,
    camera_sizes: Vec<(u32, u32)>,
}

impl StitchMap {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn contributors(&self, x: u32, y: u32) -> &[MapEntry] {
        let i = y as usize * self.width as usize + x as usize;
        &self.entries[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    pub fn is_covered(&self, x: u32, y: u32) -> bool {
        self.coverage[y as usize * self.width as usize + x as usize]
    }

    /// Row-major covered flags, shared with every stitched frame.
    pub fn coverage(&self) -> &Arc<Vec<bool>> {
        &self.coverage
    }

    pub fn covered_fraction(&self) -> f64 {
        self.coverage.iter().filter(|c| **c).count() as f64 / self.coverage.len() as f64
    }
}

/// Contributions to one panorama direction, weights normalized.
fn pixel_entries(calib: &RigCalibration, uv: EquirectCoords, out: &mut Vec<MapEntry>) {
    let d = equirect_to_direction(uv);
    let start = out.len();
    let mut total = 0f64;
    let mut raw = [0f64; RIG_CAMERAS];
    for (k, cam) in calib.cameras.iter().enumerate() {
        let a = cam.rotation().inverse() * d;
        let half = cam.intrinsics.fov_rad / 2.0;
        let theta = off_axis_angle(&a);
        if theta > half {
            continue;
        }
        let Some([x, y]) = project_unchecked(&a, &cam.intrinsics) else {
            continue;
        };
        // Feather: linear in angular distance to the FOV edge.
        let w = half - theta;
        raw[out.len() - start] = w;
        total += w;
        out.push(MapEntry {
            camera: k as u8,
            x: x as f32,
            y: y as f32,
            weight: 0.0,
        });
    }
    let n = out.len() - start;
    let mut keep = start;
    for i in 0..n {
        let w = if total > 0.0 { raw[i] / total } else { 1.0 / n as f64 };
        if w > 0.0 {
            let mut e = out[start + i];
            e.weight = w as f32;
            out[keep] = e;
            keep += 1;
        }
    }
    out.truncate(keep);
}

pub fn build_stitch_map(calib: &RigCalibration, pano_w: u32, pano_h: u32) -> Result<StitchMap, StitchError> {
    build_stitch_map_with(Exec::default(), calib, pano_w, pano_h)
}

pub fn build_stitch_map_with(exec: Exec, calib: &RigCalibration, pano_w: u32, pano_h: u32) -> Result<StitchMap, StitchError> {
    if pano_h == 0 || pano_w != 2 * pano_h {
        return Err(StitchError::PanoramaShape(pano_w, pano_h));
    }
    calib.validate()?;
    let rows: Vec<(Vec<u32>, Vec<MapEntry>)> = map_indices(exec, pano_h as usize, |y| {
        let mut counts = Vec::with_capacity(pano_w as usize);
        let mut entries = Vec::new();
        for x in 0..pano_w {
            let before = entries.len();
            let uv = EquirectCoords::from_pixel(x as f64, y as f64, pano_w, pano_h);
            pixel_entries(calib, uv, &mut entries);
            counts.push((entries.len() - before) as u32);
        }
        (counts, entries)
    });
    let n = pano_w as usize * pano_h as usize;
    let mut offsets = Vec::with_capacity(n + 1);
    let mut entries = Vec::new();
    let mut coverage = Vec::with_capacity(n);
    offsets.push(0u32);
    for (counts, row_entries) in rows {
        for c in counts {
            let last = *offsets.last().unwrap();
            offsets.push(last + c);
            coverage.push(c > 0);
        }
        entries.extend(row_entries);
    }
    let camera_sizes: Vec<(u32, u32)> = calib
        .cameras
        .iter()
        .map(|c| (c.intrinsics.width_px, c.intrinsics.height_px))
        .collect();
    let taps = entries.iter().map(|e| Tap::new(e, camera_sizes[e.camera as usize])).collect();
    Ok(StitchMap {
        width: pano_w,
        height: pano_h,
        offsets,
        entries,
        taps,
        coverage: Arc::new(coverage),
        camera_sizes,
    })
}

/// Per-camera, per-channel multiplicative gains applied before blending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraGains(pub [[f32; 3]; RIG_CAMERAS]);

impl Default for CameraGains {
    fn default() -> Self {
        Self([[1.0; 3]; RIG_CAMERAS])
    }
}

fn check_frames(frames: &[FisheyeFrame], map: &StitchMap) -> Result<(), StitchError> {
    if frames.len() != RIG_CAMERAS {
        return Err(StitchError::MissingFrames(frames.len()));
    }
    for (index, (f, want)) in frames.iter().zip(&map.camera_sizes).enumerate() {
        let got = (f.image.width(), f.image.height());
        if got != *want {
            return Err(StitchError::DimensionMismatch {
                index,
                got,
                want: *want,
            });
        }
    }
    Ok(())
}

/// White balance across cameras: one gain per channel per camera, fitted so
/// that overlapping cameras agree on the mean color of their shared region,
/// with a prior pulling every gain toward 1.
pub fn estimate_gains(frames: &[FisheyeFrame], map: &StitchMap) -> Result<CameraGains, StitchError> {
    check_frames(frames, map)?;
    const STRIDE: usize = 3;
    const ALPHA: f64 = 0.01; // 1 / sigma_intensity^2
    const BETA: f64 = 100.0; // 1 / sigma_gain^2
    let n = RIG_CAMERAS;
    let mut sums = vec![[0f64; 3]; n * n];
    let mut counts = vec![0f64; n * n];
    let total = map.width as usize * map.height as usize;
    for p in (0..total).step_by(STRIDE) {
        let es = &map.entries[map.offsets[p] as usize..map.offsets[p + 1] as usize];
        if es.len() < 2 {
            continue;
        }
        let samples: Vec<[f32; 3]> = es
            .iter()
            .map(|e| sample_bilinear(&frames[e.camera as usize].image, e.x as f64, e.y as f64, Edge::Clamp))
            .collect();
        for (a, ea) in es.iter().enumerate() {
            for (b, eb) in es.iter().enumerate() {
                if a == b {
                    continue;
                }
                let idx = ea.camera as usize * n + eb.camera as usize;
                counts[idx] += 1.0;
                for c in 0..3 {
                    sums[idx][c] += samples[a][c] as f64;
                }
            }
        }
    }
    let mut gains = CameraGains::default();
    for c in 0..3 {
        let mut a = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for i in 0..n {
            // Self term keeps the system well posed for cameras with no overlap.
            a[(i, i)] += BETA;
            b[i] += BETA;
            for j in 0..n {
                let nij = counts[i * n + j];
                if i == j || nij == 0.0 {
                    continue;
                }
                let iij = sums[i * n + j][c] / nij;
                let iji = sums[j * n + i][c] / counts[j * n + i];
                b[i] += BETA * nij;
                a[(i, i)] += BETA * nij + 2.0 * ALPHA * iij * iij * nij;
                a[(i, j)] -= 2.0 * ALPHA * iij * iji * nij;
            }
        }
        if let Some(g) = a.lu().solve(&b) {
            for i in 0..n {
                gains.0[i][c] = g[i] as f32;
            }
        }
    }
    Ok(gains)
}

pub fn stitch(frames: &[FisheyeFrame], map: &StitchMap) -> Result<PanoramaFrame, StitchError> {
    stitch_with(Exec::default(), frames, map, None)
}

/// Blends the six frames through `map`. Output capture time and sequence are
/// the maxima over the inputs; uncovered pixels are [`FILL_GRAY`] and flagged
/// in the frame's coverage mask.
pub fn stitch_with(
    exec: Exec,
    frames: &[FisheyeFrame],
    map: &StitchMap,
    gains: Option<&CameraGains>,
) -> Result<PanoramaFrame, StitchError> {
    check_frames(frames, map)?;
    let unity = CameraGains::default();
    let gains = gains.unwrap_or(&unity);
    let mut img = RgbImage::new(map.width, map.height);
    let row_len = img.row_len();
    let w = map.width as usize;
    for_each_row(exec, img.data_mut(), row_len, |y, row| {
        for x in 0..w {
            let p = y * w + x;
            let range = map.offsets[p] as usize..map.offsets[p + 1] as usize;
            let out = &mut row[x * 3..x * 3 + 3];
            if range.is_empty() {
                out.copy_from_slice(&FILL_GRAY);
                continue;
            }
            let mut acc = [0f32; 3];
            for (e, t) in map.entries[range.clone()].iter().zip(&map.taps[range]) {
                let s = t.sample(frames[e.camera as usize].image.data());
                let g = gains.0[e.camera as usize];
                for c in 0..3 {
                    acc[c] += e.weight * g[c] * s[c];
                }
            }
            for c in 0..3 {
                out[c] = round_channel(acc[c]);
            }
        }
    });
    Ok(PanoramaFrame {
        image: img,
        t_capture_ns: frames.iter().map(|f| f.t_capture_ns).max().unwrap_or(0),
        seq: frames.iter().map(|f| f.seq).max().unwrap_or(0),
        stages: StageTrail::new(),
        coverage: Some(map.coverage.clone()),
    })
}
