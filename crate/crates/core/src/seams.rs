//! Feature-based correction of the rig calibration.
//!
//! For each pair of adjacent cameras, both fisheye frames are reprojected
//! into the same pinhole view centered on their shared seam, so the overlap
//! looks (nearly) identical in both and ordinary scale-space features match
//! well. Each match gives two rays that should coincide in the rig frame;
//! per-camera rotation corrections are then fitted by Gauss-Newton on the
//! small-angle residuals, with camera 0 held fixed to remove the global
//! rotation gauge.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::features::{detect_features, match_features, FeatureMatch, FeatureParams, DEFAULT_RATIO};
use crate::frame::FisheyeFrame;
use crate::geometry::{normalize_angle, project_unchecked, rotation_from_ypr, ypr_from_rotation, Rot3, Vec3};
use crate::image::{round_channel, sample_bilinear, Edge, RgbImage};
use crate::rig::{RigCalibration, RigCamera, SeamAdjustment, RIG_CAMERAS};
use crate::stitch::{build_stitch_map, StitchError, StitchMap};

/// Minimum matches for a seam to take part in the fit.
pub const MIN_SEAM_MATCHES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeamViewParams {
    pub fov_rad: f64,
    pub size: u32,
}

impl Default for SeamViewParams {
    fn default() -> Self {
        // 48° keeps the whole view inside both adjacent 120° image circles.
        Self {
            fov_rad: 48f64.to_radians(),
            size: 256,
        }
    }
}

/// Pinhole view onto one seam, shared by both cameras of the seam.
#[derive(Debug, Clone, Copy)]
pub struct SeamView {
    rotation: Rot3,
    focal: f64,
    size: u32,
}

impl SeamView {
    pub fn new(center_yaw: f64, params: &SeamViewParams) -> Self {
        Self {
            rotation: rotation_from_ypr(center_yaw, 0.0, 0.0),
            focal: params.size as f64 / 2.0 / (params.fov_rad / 2.0).tan(),
            size: params.size,
        }
    }

    /// Rig-frame ray through view pixel `(x, y)` (sub-pixel allowed).
    pub fn rig_ray(&self, x: f64, y: f64) -> Vec3 {
        let half = self.size as f64 / 2.0;
        self.rotation * Vec3::new(1.0, (x + 0.5 - half) / self.focal, (y + 0.5 - half) / self.focal).normalize()
    }

    /// Reprojects one camera's frame into this view; pixels the camera does
    /// not see are black.
    pub fn render(&self, frame: &FisheyeFrame, cam: &RigCamera) -> RgbImage {
        let mut out = RgbImage::new(self.size, self.size);
        let to_cam = cam.rotation().inverse();
        for y in 0..self.size {
            for x in 0..self.size {
                let a = to_cam * self.rig_ray(x as f64, y as f64);
                if let Some([sx, sy]) = project_unchecked(&a, &cam.intrinsics) {
                    let s = sample_bilinear(&frame.image, sx, sy, Edge::Clamp);
                    out.put_pixel(x, y, [round_channel(s[0]), round_channel(s[1]), round_channel(s[2])]);
                }
            }
        }
        out
    }
}

/// A matched pair of rays, each in its own camera's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPair {
    pub ray_a: Vec3,
    pub ray_b: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeamMatches {
    pub cam_a: usize,
    pub cam_b: usize,
    pub pairs: Vec<RayPair>,
}

fn seam_center_yaw(a: &RigCamera, b: &RigCamera) -> f64 {
    let ya = a.pose.yaw_rad;
    let yb = ya + normalize_angle(b.pose.yaw_rad - ya);
    normalize_angle((ya + yb) / 2.0)
}

/// Converts view-pixel matches on the seam `(cam_a, cam_b)` into ray pairs
/// using the current calibration.
pub fn matches_to_rays(view: &SeamView, calib: &RigCalibration, cam_a: usize, cam_b: usize, matches: &[FeatureMatch]) -> SeamMatches {
    let ra = calib.cameras[cam_a].rotation().inverse();
    let rb = calib.cameras[cam_b].rotation().inverse();
    SeamMatches {
        cam_a,
        cam_b,
        pairs: matches
            .iter()
            .map(|m| RayPair {
                ray_a: ra * view.rig_ray(m.a[0], m.a[1]),
                ray_b: rb * view.rig_ray(m.b[0], m.b[1]),
            })
            .collect(),
    }
}

/// Detects and matches features on every adjacent-camera seam.
pub fn collect_seam_matches(frames: &[FisheyeFrame], calib: &RigCalibration, params: &SeamViewParams) -> Vec<SeamMatches> {
    let fp = FeatureParams::default();
    let n = calib.cameras.len();
    (0..n)
        .map(|a| {
            let b = (a + 1) % n;
            let view = SeamView::new(seam_center_yaw(&calib.cameras[a], &calib.cameras[b]), params);
            let ia = view.render(&frames[a], &calib.cameras[a]);
            let ib = view.render(&frames[b], &calib.cameras[b]);
            let fa = detect_features(&ia, &fp);
            let fb = detect_features(&ib, &fp);
            let m = match_features(&fa, &fb, DEFAULT_RATIO);
            matches_to_rays(&view, calib, a, b, &m)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefineStatus {
    Refined,
    /// Some camera is not linked to camera 0 through seams with enough matches.
    InsufficientMatches { weakest_seam: (usize, usize), matches: usize },
    /// The fit did not lower the residual.
    NotImproved,
    /// A correction exceeded the sanity bound.
    OutOfBounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeamRefinement {
    pub adjustment: SeamAdjustment,
    pub status: RefineStatus,
    /// Mean angular disagreement (rad) of inlier pairs before and after.
    pub residual_before: f64,
    pub residual_after: f64,
    pub inliers: usize,
}

impl SeamRefinement {
    fn identity(status: RefineStatus) -> Self {
        Self {
            adjustment: SeamAdjustment::identity(),
            status,
            residual_before: 0.0,
            residual_after: 0.0,
            inliers: 0,
        }
    }

    pub fn is_refined(&self) -> bool {
        self.status == RefineStatus::Refined
    }
}

struct Obs {
    a: usize,
    b: usize,
    ray_a: Vec3,
    ray_b: Vec3,
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn residual(rot: &[Rot3], o: &Obs) -> Vec3 {
    rot[o.a] * o.ray_a - rot[o.b] * o.ray_b
}

fn angle(v: &Vec3, w: &Vec3) -> f64 {
    v.cross(w).norm().atan2(v.dot(w))
}

fn mean_angle(rot: &[Rot3], obs: &[Obs]) -> f64 {
    if obs.is_empty() {
        return 0.0;
    }
    obs.iter().map(|o| angle(&(rot[o.a] * o.ray_a), &(rot[o.b] * o.ray_b))).sum::<f64>() / obs.len() as f64
}

/// Gauss-Newton with Huber weights. `base` holds calibrated camera→rig
/// rotations, `corr` the running right-multiplied corrections.
fn solve(base: &[Rot3], corr: &mut [Rot3], obs: &[Obs]) {
    let n = base.len();
    let dim = 3 * (n - 1);
    for _ in 0..15 {
        let rot: Vec<Rot3> = base.iter().zip(corr.iter()).map(|(b, c)| b * c).collect();
        let res: Vec<f64> = obs.iter().map(|o| residual(&rot, o).norm()).collect();
        let mut sorted = res.clone();
        sorted.sort_by(f64::total_cmp);
        let huber = (1.5 * sorted[sorted.len() / 2]).max(1e-6);
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for (o, r) in obs.iter().zip(&res) {
            let w = if *r <= huber { 1.0 } else { huber / r };
            let e = residual(&rot, o);
            // d/dψ of R·Exp(ψ)·v at ψ = 0 is -R·[v]×.
            let ja = -(rot[o.a].matrix() * skew(&o.ray_a));
            let jb = rot[o.b].matrix() * skew(&o.ray_b);
            let blocks = [(o.a, ja), (o.b, jb)];
            for (ci, ji) in &blocks {
                if *ci == 0 {
                    continue;
                }
                let gi = ji.transpose() * e * w;
                for k in 0..3 {
                    g[3 * (ci - 1) + k] += gi[k];
                }
                for (cj, jj) in &blocks {
                    if *cj == 0 {
                        continue;
                    }
                    let hij = ji.transpose() * jj * w;
                    for r in 0..3 {
                        for c in 0..3 {
                            h[(3 * (ci - 1) + r, 3 * (cj - 1) + c)] += hij[(r, c)];
                        }
                    }
                }
            }
        }
        for i in 0..dim {
            h[(i, i)] += 1e-9;
        }
        let Some(step) = h.cholesky().map(|c| c.solve(&(-g))) else {
            return;
        };
        for i in 1..n {
            let d = Vec3::new(step[3 * (i - 1)], step[3 * (i - 1) + 1], step[3 * (i - 1) + 2]);
            corr[i] *= Rot3::new(d);
        }
        if step.amax() < 1e-12 {
            break;
        }
    }
}

/// Fits per-camera rotation corrections that bring matched rays together.
pub fn refine_seams(calib: &RigCalibration, seams: &[SeamMatches]) -> SeamRefinement {
    let n = calib.cameras.len();
    // Seams with too few matches are ignored; every camera must stay linked
    // to camera 0 through the remaining ones.
    let usable: Vec<&SeamMatches> = seams.iter().filter(|s| s.pairs.len() >= MIN_SEAM_MATCHES).collect();
    let mut linked = vec![false; n];
    linked[0] = true;
    for _ in 0..n {
        for s in &usable {
            if linked[s.cam_a] || linked[s.cam_b] {
                linked[s.cam_a] = true;
                linked[s.cam_b] = true;
            }
        }
    }
    if n != RIG_CAMERAS || linked.iter().any(|l| !l) {
        let weakest = seams.iter().min_by_key(|s| s.pairs.len());
        log::warn!("seam refinement skipped: not enough matches");
        return SeamRefinement::identity(RefineStatus::InsufficientMatches {
            weakest_seam: weakest.map(|s| (s.cam_a, s.cam_b)).unwrap_or((0, 0)),
            matches: weakest.map(|s| s.pairs.len()).unwrap_or(0),
        });
    }

    let base: Vec<Rot3> = calib.cameras.iter().map(|c| c.rotation()).collect();
    let mut obs: Vec<Obs> = usable
        .iter()
        .flat_map(|s| {
            s.pairs.iter().map(|p| Obs {
                a: s.cam_a,
                b: s.cam_b,
                ray_a: p.ray_a,
                ray_b: p.ray_b,
            })
        })
        .collect();
    let mut corr = vec![Rot3::identity(); n];
    solve(&base, &mut corr, &obs);

    // Drop gross mismatches and refit from scratch on the inliers.
    let rot: Vec<Rot3> = base.iter().zip(&corr).map(|(b, c)| b * c).collect();
    let mut res: Vec<f64> = obs.iter().map(|o| residual(&rot, o).norm()).collect();
    res.sort_by(f64::total_cmp);
    let cut = (3.0 * res[res.len() / 2]).max(2e-3);
    obs.retain(|o| residual(&rot, o).norm() <= cut);
    let mut counts = vec![0usize; n];
    for o in &obs {
        counts[o.a] += 1;
    }
    corr = vec![Rot3::identity(); n];
    solve(&base, &mut corr, &obs);

    let before = mean_angle(&base, &obs);
    let rot: Vec<Rot3> = base.iter().zip(&corr).map(|(b, c)| b * c).collect();
    let after = mean_angle(&rot, &obs);

    let mut adjustment = SeamAdjustment::identity();
    for (i, c) in corr.iter().enumerate() {
        let (y, p, r) = ypr_from_rotation(&c.inverse());
        adjustment.corrections[i] = [y, p, r];
    }
    let status = if !adjustment.within_bounds() {
        RefineStatus::OutOfBounds
    } else if after > before + 1e-12 {
        RefineStatus::NotImproved
    } else {
        RefineStatus::Refined
    };
    if status != RefineStatus::Refined {
        log::warn!("seam refinement rejected: {status:?}");
        adjustment = SeamAdjustment::identity();
    }
    SeamRefinement {
        adjustment,
        status,
        residual_before: before,
        residual_after: if adjustment == SeamAdjustment::identity() { before } else { after },
        inliers: obs.len(),
    }
}

/// Refinement result together with the corrected calibration and its map.
#[derive(Debug, Clone)]
pub struct RigRefinement {
    pub refinement: SeamRefinement,
    pub calibration: RigCalibration,
    pub map: StitchMap,
}

/// Matches every seam, fits corrections and rebuilds the stitch map.
pub fn refine_rig(
    frames: &[FisheyeFrame],
    calib: &RigCalibration,
    pano_w: u32,
    pano_h: u32,
    params: &SeamViewParams,
) -> Result<RigRefinement, StitchError> {
    calib.validate()?;
    if frames.len() != calib.cameras.len() {
        return Err(StitchError::MissingFrames(frames.len()));
    }
    let seams = collect_seam_matches(frames, calib, params);
    let refinement = refine_seams(calib, &seams);
    let calibration = calib.with_adjustment(&refinement.adjustment);
    let map = build_stitch_map(&calibration, pano_w, pano_h)?;
    Ok(RigRefinement {
        refinement,
        calibration,
        map,
    })
}
