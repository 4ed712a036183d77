//! Scale-space keypoints with orientation-normalized gradient-histogram
//! descriptors, matched by nearest neighbor under a distance-ratio test.
//!
//! Pipeline: Gaussian pyramid (3 intervals per octave, base sigma 1.6) →
//! difference-of-Gaussian extrema → quadratic sub-pixel refinement with
//! contrast and edge-response rejection → dominant gradient orientations →
//! 4×4×8 descriptors.

use crate::image::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureParams {
    pub intervals: usize,
    pub sigma0: f32,
    /// Blur assumed already present in the input.
    pub input_sigma: f32,
    pub contrast_threshold: f32,
    pub edge_ratio: f32,
    /// Stop adding octaves once the image side drops below this.
    pub min_octave_size: u32,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            intervals: 3,
            sigma0: 1.6,
            input_sigma: 0.5,
            contrast_threshold: 0.04,
            edge_ratio: 10.0,
            min_octave_size: 16,
        }
    }
}

/// Lowe's ratio-test threshold.
pub const DEFAULT_RATIO: f32 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub sigma: f32,
    pub orientation: f32,
    pub response: f32,
}

#[derive(Debug, Clone)]
pub struct Feature {
    pub keypoint: Keypoint,
    pub descriptor: [f32; 128],
}

/// A correspondence between two images. `distance` is the descriptor L2
/// distance, `ratio` its ratio to the second-best candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMatch {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub distance: f32,
    pub ratio: f32,
}

#[derive(Clone)]
struct Gray {
    w: usize,
    h: usize,
    d: Vec<f32>,
}

impl Gray {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f32 {
        self.d[y * self.w + x]
    }

    fn blur(&self, sigma: f32) -> Gray {
        if sigma <= 0.0 {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f32 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
        let (w, h) = (self.w as isize, self.h as isize);
        let mut tmp = vec![0f32; self.d.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - r).clamp(0, w - 1);
                    acc += kv * self.d[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0f32; self.d.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - r).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        Gray {
            w: self.w,
            h: self.h,
            d: out,
        }
    }

    fn half(&self) -> Gray {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut d = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                d.push(self.at(2 * x, 2 * y));
            }
        }
        Gray { w, h, d }
    }

    fn sub(&self, other: &Gray) -> Gray {
        Gray {
            w: self.w,
            h: self.h,
            d: self.d.iter().zip(&other.d).map(|(a, b)| a - b).collect(),
        }
    }
}

struct Octave {
    gauss: Vec<Gray>,
    dog: Vec<Gray>,
}

fn build_pyramid(base: Gray, p: &FeatureParams) -> Vec<Octave> {
    let s = p.intervals;
    let k = 2f32.powf(1.0 / s as f32);
    let mut octaves = Vec::new();
    let mut cur = base.blur((p.sigma0 * p.sigma0 - p.input_sigma * p.input_sigma).max(0.01).sqrt());
    loop {
        let mut gauss = vec![cur.clone()];
        for i in 1..s + 3 {
            let prev = p.sigma0 * k.powi(i as i32 - 1);
            let total = prev * k;
            let inc = (total * total - prev * prev).sqrt();
            let next = gauss[i - 1].blur(inc);
            gauss.push(next);
        }
        let dog = gauss.windows(2).map(|g| g[1].sub(&g[0])).collect();
        let next_base = gauss[s].half();
        octaves.push(Octave { gauss, dog });
        if (next_base.w.min(next_base.h) as u32) < p.min_octave_size {
            break;
        }
        cur = next_base;
    }
    octaves
}

const BORDER: usize = 5;

fn is_extremum(dog: &[Gray], l: usize, x: usize, y: usize) -> bool {
    let v = dog[l].at(x, y);
    let mut is_max = true;
    let mut is_min = true;
    for img in &dog[l - 1..=l + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let n = img.at(xx, yy);
                if std::ptr::eq(img, &dog[l]) && xx == x && yy == y {
                    continue;
                }
                is_max &= v > n;
                is_min &= v < n;
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

/// Sub-pixel/sub-scale refinement. Returns `(x, y, layer, offsets, contrast)`.
fn refine(dog: &[Gray], mut l: usize, mut x: usize, mut y: usize, p: &FeatureParams) -> Option<(usize, usize, usize, [f32; 3], f32)> {
    let s = p.intervals;
    let (w, h) = (dog[0].w, dog[0].h);
    for _ in 0..5 {
        let (d0, d1, d2) = (&dog[l - 1], &dog[l], &dog[l + 1]);
        let v = d1.at(x, y);
        let dx = (d1.at(x + 1, y) - d1.at(x - 1, y)) * 0.5;
        let dy = (d1.at(x, y + 1) - d1.at(x, y - 1)) * 0.5;
        let ds = (d2.at(x, y) - d0.at(x, y)) * 0.5;
        let dxx = d1.at(x + 1, y) + d1.at(x - 1, y) - 2.0 * v;
        let dyy = d1.at(x, y + 1) + d1.at(x, y - 1) - 2.0 * v;
        let dss = d2.at(x, y) + d0.at(x, y) - 2.0 * v;
        let dxy = (d1.at(x + 1, y + 1) - d1.at(x - 1, y + 1) - d1.at(x + 1, y - 1) + d1.at(x - 1, y - 1)) * 0.25;
        let dxs = (d2.at(x + 1, y) - d2.at(x - 1, y) - d0.at(x + 1, y) + d0.at(x - 1, y)) * 0.25;
        let dys = (d2.at(x, y + 1) - d2.at(x, y - 1) - d0.at(x, y + 1) + d0.at(x, y - 1)) * 0.25;
        let hm = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let g = nalgebra::Vector3::new(dx, dy, ds);
        let off = -(hm.try_inverse()? * g);
        if off.iter().all(|o| o.abs() < 0.5) {
            let contrast = v + 0.5 * g.dot(&off);
            if contrast.abs() * (s as f32) < p.contrast_threshold {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let r = p.edge_ratio;
            if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
                return None;
            }
            return Some((x, y, l, [off[0], off[1], off[2]], contrast));
        }
        if off.iter().any(|o| !o.is_finite() || o.abs() > 1e6) {
            return None;
        }
        let nx = x as f32 + off[0].round();
        let ny = y as f32 + off[1].round();
        let nl = l as f32 + off[2].round();
        if nl < 1.0 || nl > s as f32 || nx < BORDER as f32 || ny < BORDER as f32 || nx >= (w - BORDER) as f32 || ny >= (h - BORDER) as f32 {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        l = nl as usize;
    }
    None
}

fn gradient(img: &Gray, x: usize, y: usize) -> (f32, f32) {
    let dx = img.at(x + 1, y) - img.at(x - 1, y);
    let dy = img.at(x, y + 1) - img.at(x, y - 1);
    ((dx * dx + dy * dy).sqrt(), dy.atan2(dx))
}

const ORI_BINS: usize = 36;

fn orientations(img: &Gray, x: usize, y: usize, sigma: f32) -> Vec<f32> {
    let sig = 1.5 * sigma;
    let radius = (3.0 * sig).round() as isize;
    let mut hist = [0f32; ORI_BINS];
    for j in -radius..=radius {
        for i in -radius..=radius {
            let (xx, yy) = (x as isize + i, y as isize + j);
            if xx <= 0 || yy <= 0 || xx >= img.w as isize - 1 || yy >= img.h as isize - 1 {
                continue;
            }
            let (m, a) = gradient(img, xx as usize, yy as usize);
            let wgt = (-((i * i + j * j) as f32) / (2.0 * sig * sig)).exp();
            let bin = ((a / std::f32::consts::TAU * ORI_BINS as f32).round() as isize).rem_euclid(ORI_BINS as isize);
            hist[bin as usize] += wgt * m;
        }
    }
    let mut smooth = [0f32; ORI_BINS];
    for b in 0..ORI_BINS {
        let at = |o: isize| hist[(b as isize + o).rem_euclid(ORI_BINS as isize) as usize];
        smooth[b] = (at(-2) + at(2)) / 16.0 + (at(-1) + at(1)) * 4.0 / 16.0 + at(0) * 6.0 / 16.0;
    }
    let max = smooth.iter().cloned().fold(0.0, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for b in 0..ORI_BINS {
        let l = smooth[(b + ORI_BINS - 1) % ORI_BINS];
        let r = smooth[(b + 1) % ORI_BINS];
        let c = smooth[b];
        if c > l && c > r && c >= 0.8 * max {
            let off = 0.5 * (l - r) / (l - 2.0 * c + r);
            let bin = b as f32 + off;
            let mut a = bin / ORI_BINS as f32 * std::f32::consts::TAU;
            if a > std::f32::consts::PI {
                a -= std::f32::consts::TAU;
            }
            out.push(a);
        }
    }
    out
}

const D: usize = 4;
const N: usize = 8;

fn descriptor(img: &Gray, x: f32, y: f32, sigma: f32, angle: f32) -> [f32; 128] {
    let hist_w = 3.0 * sigma;
    let radius = (hist_w * std::f32::consts::SQRT_2 * (D as f32 + 1.0) * 0.5).round() as isize;
    let (sa, ca) = angle.sin_cos();
    let (xi, yi) = (x.round() as isize, y.round() as isize);
    let mut hist = [0f32; (D + 2) * (D + 2) * (N + 2)];
    let idx = |r: usize, c: usize, o: usize| (r * (D + 2) + c) * (N + 2) + o;
    for j in -radius..=radius {
        for i in -radius..=radius {
            let (xx, yy) = (xi + i, yi + j);
            if xx <= 0 || yy <= 0 || xx >= img.w as isize - 1 || yy >= img.h as isize - 1 {
                continue;
            }
            let fx = xx as f32 - x;
            let fy = yy as f32 - y;
            let c_rot = (ca * fx + sa * fy) / hist_w;
            let r_rot = (-sa * fx + ca * fy) / hist_w;
            let rbin = r_rot + D as f32 / 2.0 - 0.5;
            let cbin = c_rot + D as f32 / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= D as f32 || cbin <= -1.0 || cbin >= D as f32 {
                continue;
            }
            let (m, a) = gradient(img, xx as usize, yy as usize);
            let wgt = (-(c_rot * c_rot + r_rot * r_rot) / (2.0 * (0.5 * D as f32).powi(2))).exp();
            let mut obin = (a - angle) / std::f32::consts::TAU * N as f32;
            obin = obin.rem_euclid(N as f32);
            let mag = m * wgt;
            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (dr, dc, dob) = (rbin - r0, cbin - c0, obin - o0);
            for (rr, wr) in [(r0, 1.0 - dr), (r0 + 1.0, dr)] {
                for (cc, wc) in [(c0, 1.0 - dc), (c0 + 1.0, dc)] {
                    for (oo, wo) in [(o0, 1.0 - dob), (o0 + 1.0, dob)] {
                        let ri = (rr + 1.0) as usize;
                        let ci = (cc + 1.0) as usize;
                        let oi = (oo as usize) % N;
                        hist[idx(ri, ci, oi)] += mag * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut desc = [0f32; 128];
    for r in 0..D {
        for c in 0..D {
            for o in 0..N {
                desc[(r * D + c) * N + o] = hist[idx(r + 1, c + 1, o)];
            }
        }
    }
    let norm = desc.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
    for v in desc.iter_mut() {
        *v = (*v / norm).min(0.2);
    }
    let norm = desc.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
    for v in desc.iter_mut() {
        *v /= norm;
    }
    desc
}

pub fn detect_features(img: &RgbImage, p: &FeatureParams) -> Vec<Feature> {
    let base = Gray {
        w: img.width() as usize,
        h: img.height() as usize,
        d: img.to_gray_f32(),
    };
    if base.w < 2 * BORDER + 3 || base.h < 2 * BORDER + 3 {
        return Vec::new();
    }
    let s = p.intervals;
    let prelim = 0.5 * p.contrast_threshold / s as f32;
    let mut out = Vec::new();
    for (o, oct) in build_pyramid(base, p).iter().enumerate() {
        let (w, h) = (oct.dog[0].w, oct.dog[0].h);
        if w <= 2 * BORDER || h <= 2 * BORDER {
            break;
        }
        let scale = (1u32 << o) as f32;
        for l in 1..=s {
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    if oct.dog[l].at(x, y).abs() <= prelim || !is_extremum(&oct.dog, l, x, y) {
                        continue;
                    }
                    let Some((rx, ry, rl, off, contrast)) = refine(&oct.dog, l, x, y, p) else {
                        continue;
                    };
                    let layer = rl as f32 + off[2];
                    let sigma_oct = p.sigma0 * 2f32.powf(layer / s as f32);
                    let kx = rx as f32 + off[0];
                    let ky = ry as f32 + off[1];
                    let g = &oct.gauss[rl];
                    for angle in orientations(g, rx, ry, sigma_oct) {
                        out.push(Feature {
                            keypoint: Keypoint {
                                x: kx * scale,
                                y: ky * scale,
                                sigma: sigma_oct * scale,
                                orientation: angle,
                                response: contrast.abs(),
                            },
                            descriptor: descriptor(g, kx, ky, sigma_oct, angle),
                        });
                    }
                }
            }
        }
    }
    out
}

fn dist2(a: &[f32; 128], b: &[f32; 128]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-neighbor matches of `a` into `b` passing `best < ratio · second`.
pub fn match_features(a: &[Feature], b: &[Feature], ratio: f32) -> Vec<FeatureMatch> {
    let mut out = Vec::new();
    for fa in a {
        let mut best = (f32::INFINITY, usize::MAX);
        let mut second = f32::INFINITY;
        for (j, fb) in b.iter().enumerate() {
            let d = dist2(&fa.descriptor, &fb.descriptor);
            if d < best.0 {
                second = best.0;
                best = (d, j);
            } else if d < second {
                second = d;
            }
        }
        if best.1 == usize::MAX || !second.is_finite() {
            continue;
        }
        let (d1, d2) = (best.0.sqrt(), second.sqrt());
        let r = if d2 > 0.0 { d1 / d2 } else { 1.0 };
        if r < ratio {
            let kb = b[best.1].keypoint;
            out.push(FeatureMatch {
                a: [fa.keypoint.x as f64, fa.keypoint.y as f64],
                b: [kb.x as f64, kb.y as f64],
                distance: d1,
                ratio: r,
            });
        }
    }
    out
}

/// Keypoints in both images, matched under the default ratio test.
pub fn detect_and_match(a: &RgbImage, b: &RgbImage) -> Vec<FeatureMatch> {
    let p = FeatureParams::default();
    let fa = detect_features(a, &p);
    let fb = detect_features(b, &p);
    match_features(&fa, &fb, DEFAULT_RATIO)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synthetic_environment_map;

    fn textured(w: u32) -> RgbImage {
        // Crop of the synthetic world: soft blobs of many sizes.
        let env = synthetic_environment_map(21, 1024);
        let mut img = RgbImage::new(w, w);
        for y in 0..w {
            for x in 0..w {
                img.put_pixel(x, y, env.pixel(300 + x, 150 + y));
            }
        }
        img
    }

    #[test]
    fn identical_images_self_match() {
        let img = textured(160);
        let m = detect_and_match(&img, &img);
        assert!(m.len() >= 10, "only {} matches", m.len());
        for mm in &m {
            assert!((mm.a[0] - mm.b[0]).abs() < 1e-9 && (mm.a[1] - mm.b[1]).abs() < 1e-9);
            assert!(mm.ratio < DEFAULT_RATIO);
        }
    }

    #[test]
    fn translation_is_recovered() {
        let big = textured(200);
        let crop = |dx: u32| {
            let mut img = RgbImage::new(180, 180);
            for y in 0..180 {
                for x in 0..180 {
                    img.put_pixel(x, y, big.pixel(x + 10 - dx, y + 10));
                }
            }
            img
        };
        // b(x) = a(x - 5): content moves 5 px to the right.
        let (a, b) = (crop(0), crop(5));
        let m = detect_and_match(&a, &b);
        assert!(m.len() >= 10);
        let mut dx: Vec<f64> = m.iter().map(|mm| mm.b[0] - mm.a[0]).collect();
        let mut dy: Vec<f64> = m.iter().map(|mm| mm.b[1] - mm.a[1]).collect();
        dx.sort_by(f64::total_cmp);
        dy.sort_by(f64::total_cmp);
        let (mx, my) = (dx[dx.len() / 2], dy[dy.len() / 2]);
        assert!((mx - 5.0).abs() <= 0.5 && my.abs() <= 0.5, "median ({mx}, {my})");
    }

    #[test]
    fn featureless_images_have_no_matches() {
        let img = RgbImage::filled(100, 100, [120, 120, 120]);
        assert!(detect_and_match(&img, &img).is_empty());
        assert!(detect_and_match(&RgbImage::new(4, 4), &img).is_empty());
    }

    #[test]
    fn rotation_invariance() {
        let a = textured(161);
        let mut b = RgbImage::new(161, 161);
        for y in 0..161 {
            for x in 0..161 {
                b.put_pixel(x, y, a.pixel(y, 160 - x));
            }
        }
        // b(x, y) = a(y, 160 - x): a point (ax, ay) in a appears at (160 - ay, ax) in b.
        let m = detect_and_match(&a, &b);
        let good = m
            .iter()
            .filter(|mm| ((160.0 - mm.a[1]) - mm.b[0]).hypot(mm.a[0] - mm.b[1]) < 1.5)
            .count();
        assert!(good >= 10 && good * 10 >= m.len() * 8, "{good}/{}", m.len());
    }
}
