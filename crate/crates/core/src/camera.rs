//! Orbit camera geometry: pixel rays for a camera circling the body at a
//! fixed radius, depth sampling along those rays, and the sinusoidal
//! positional encoding fed to the field network.

use crate::mat::Mat;
use crate::math::norm3;
use crate::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Scene-scale constants for the orbit camera. The orbit circles the origin
/// in the horizontal plane; near/far are the tangent depths of the bounding
/// sphere, and the square frustum half-extent (at unit focal depth) is
/// bound_radius / orbit_radius so the sphere fills the view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub orbit_radius: f64,
    pub near: f64,
    pub far: f64,
    pub bound_radius: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig { orbit_radius: 2.5, near: 1.3, far: 3.7, bound_radius: 1.2 }
    }
}

impl CameraConfig {
    pub fn frustum_half_extent(&self) -> f64 {
        self.bound_radius / self.orbit_radius
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.orbit_radius > 0.0 && self.bound_radius > 0.0) {
            return Err("camera radii must be positive".into());
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(format!("camera depth range invalid: near {} far {}", self.near, self.far));
        }
        if self.bound_radius >= self.orbit_radius {
            return Err("orbit must lie outside the bounding sphere".into());
        }
        Ok(())
    }
}

/// One ray per pixel of an h by w view at azimuth phi. Row p of each matrix
/// is pixel (i, j) with p = i*w + j, scanned row-major from the top-left.
#[derive(Clone, Debug)]
pub struct RayBundle<S> {
    pub phi: S,
    pub h: usize,
    pub w: usize,
    /// (P,3) camera positions (identical rows for this pinhole orbit).
    pub origins: Mat<S>,
    /// (P,3) unit directions.
    pub dirs: Mat<S>,
}

impl<S: Scalar> RayBundle<S> {
    pub fn n_rays(&self) -> usize {
        self.h * self.w
    }
}

/// Build pixel rays at azimuth `phi`. The camera sits at
/// orbit_radius * (sin phi, 0, cos phi), looks at the origin with +y up, and
/// at phi = 0 the image x axis is world +x, image y is world +y.
pub fn make_rays<S: Scalar>(cam: &CameraConfig, phi: S, h: usize, w: usize) -> RayBundle<S> {
    assert!(h > 0 && w > 0, "empty image");
    let r = S::from_f64(cam.orbit_radius);
    let half = S::from_f64(cam.frustum_half_extent());
    let pos = [r * phi.sin(), S::zero(), r * phi.cos()];
    let fwd = [-phi.sin(), S::zero(), -phi.cos()];
    // right = forward x world_up, then camera up = right x forward.
    let wup = [S::zero(), S::one(), S::zero()];
    let right = cross(fwd, wup);
    let up = cross(right, fwd);

    let p = h * w;
    let mut origins = Mat::zeros(p, 3);
    let mut dirs = Mat::zeros(p, 3);
    let two = S::from_f64(2.0);
    for i in 0..h {
        for j in 0..w {
            let x = (two * (S::from_usize_(j) + S::from_f64(0.5)) / S::from_usize_(w) - S::one()) * half;
            let y = (S::one() - two * (S::from_usize_(i) + S::from_f64(0.5)) / S::from_usize_(h)) * half;
            let mut d = [S::zero(); 3];
            for ax in 0..3 {
                d[ax] = right[ax] * x + up[ax] * y + fwd[ax];
            }
            let n = norm3(d);
            let row = i * w + j;
            for ax in 0..3 {
                origins.data[row * 3 + ax] = pos[ax];
                dirs.data[row * 3 + ax] = d[ax] / n;
            }
        }
    }
    RayBundle { phi, h, w, origins, dirs }
}

fn cross<S: Scalar>(a: [S; 3], b: [S; 3]) -> [S; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Endpoint-inclusive linspace over [near, far]; no randomness.
    Deterministic,
    /// One uniform draw per equal-width depth bin (training-time jitter).
    Stratified,
}

/// Depth samples for every ray of a bundle, sample-major within each ray:
/// global sample index p * n_samples + n.
#[derive(Clone, Debug)]
pub struct SamplePoints<S> {
    /// (P * N, 3) world positions.
    pub points: Mat<S>,
    /// (P * N, 3) unit view directions (the ray direction, repeated per sample).
    pub dirs: Mat<S>,
    /// Depth along each ray, same indexing as `points`.
    pub ts: Vec<S>,
    /// Inter-sample spacing; the last sample of each ray gets the mean bin
    /// width (far - near) / N.
    pub deltas: Vec<S>,
    pub n_samples: usize,
}

pub fn sample_along<S: Scalar, R: Rng>(
    cam: &CameraConfig,
    rays: &RayBundle<S>,
    n_samples: usize,
    mode: SampleMode,
    rng: &mut R,
) -> SamplePoints<S> {
    assert!(n_samples >= 1, "need at least one sample per ray");
    let near = S::from_f64(cam.near);
    let far = S::from_f64(cam.far);
    let span = far - near;
    let p = rays.n_rays();
    let bin = span / S::from_usize_(n_samples);

    let mut points = Mat::zeros(p * n_samples, 3);
    let mut dirs = Mat::zeros(p * n_samples, 3);
    let mut ts = vec![S::zero(); p * n_samples];
    let mut deltas = vec![S::zero(); p * n_samples];
    for pi in 0..p {
        for n in 0..n_samples {
            let t = match mode {
                SampleMode::Deterministic => {
                    if n_samples == 1 {
                        near + span * S::from_f64(0.5)
                    } else {
                        near + span * S::from_usize_(n) / S::from_usize_(n_samples - 1)
                    }
                }
                SampleMode::Stratified => {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    near + bin * (S::from_usize_(n) + S::from_f64(u))
                }
            };
            ts[pi * n_samples + n] = t;
        }
        for n in 0..n_samples {
            let g = pi * n_samples + n;
            let t = ts[g];
            for ax in 0..3 {
                let o = rays.origins.at(pi, ax);
                let d = rays.dirs.at(pi, ax);
                points.data[g * 3 + ax] = o + t * d;
                dirs.data[g * 3 + ax] = d;
            }
            deltas[g] = if n + 1 < n_samples { ts[g + 1] - t } else { bin };
        }
    }
    SamplePoints { points, dirs, ts, deltas, n_samples }
}

/// Sinusoidal positional encoding of an (N,3) point set, laid out with one
/// COLUMN per point: for each component, rows (sin(2^k pi v), cos(2^k pi v))
/// for k = 0..=levels, giving 6*(levels+1) rows.
pub fn encode_points_cols<S: Scalar>(points: &Mat<S>, levels: usize) -> Mat<S> {
    assert_eq!(points.cols, 3);
    let n = points.rows;
    let rows = 6 * (levels + 1);
    let mut out = Mat::zeros(rows, n);
    let pi = S::PI();
    for p in 0..n {
        for c in 0..3 {
            let v = points.at(p, c);
            let mut freq = pi;
            for k in 0..=levels {
                let r0 = c * 2 * (levels + 1) + 2 * k;
                out.data[r0 * n + p] = (freq * v).sin();
                out.data[(r0 + 1) * n + p] = (freq * v).cos();
                freq = freq + freq;
            }
        }
    }
    out
}

pub fn encoded_rows(levels: usize) -> usize {
    6 * (levels + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{matvec3, rot_y};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_sampling_matches_pinned_example() {
        // near 1, far 3, three samples: depths (1,2,3), spacings (1,1,2/3).
        let cam = CameraConfig { orbit_radius: 2.5, near: 1.0, far: 3.0, bound_radius: 1.2 };
        let rays = make_rays::<f64>(&cam, 0.0, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_along(&cam, &rays, 3, SampleMode::Deterministic, &mut rng);
        assert_eq!(s.ts, vec![1.0, 2.0, 3.0]);
        assert!((s.deltas[0] - 1.0).abs() < 1e-15);
        assert!((s.deltas[1] - 1.0).abs() < 1e-15);
        assert!((s.deltas[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rays_are_unit_and_anchored_on_orbit() {
        let cam = CameraConfig::default();
        for &phi in &[0.0f64, 0.7, 2.9, 5.5] {
            let r = make_rays(&cam, phi, 4, 4);
            for p in 0..r.n_rays() {
                let d = [r.dirs.at(p, 0), r.dirs.at(p, 1), r.dirs.at(p, 2)];
                assert!((norm3(d) - 1.0).abs() < 1e-12);
                assert!((r.origins.at(p, 0) - 2.5 * phi.sin()).abs() < 1e-12);
                assert!((r.origins.at(p, 1)).abs() < 1e-12);
                assert!((r.origins.at(p, 2) - 2.5 * phi.cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ray_bundle_transforms_as_the_rotation_group() {
        // Rays at azimuth phi are exactly the phi = 0 rays rotated by R_y(phi).
        let cam = CameraConfig::default();
        let base = make_rays::<f64>(&cam, 0.0, 5, 5);
        for &phi in &[0.3f64, 1.2, std::f64::consts::PI, 4.4] {
            let r = make_rays(&cam, phi, 5, 5);
            let rot = rot_y(phi);
            for p in 0..r.n_rays() {
                let d0 = [base.dirs.at(p, 0), base.dirs.at(p, 1), base.dirs.at(p, 2)];
                let o0 = [base.origins.at(p, 0), base.origins.at(p, 1), base.origins.at(p, 2)];
                let dw = matvec3(&rot, d0);
                let ow = matvec3(&rot, o0);
                for ax in 0..3 {
                    assert!((r.dirs.at(p, ax) - dw[ax]).abs() < 1e-12);
                    assert!((r.origins.at(p, ax) - ow[ax]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn center_pixel_ray_passes_through_origin() {
        let cam = CameraConfig::default();
        for &phi in &[0.0f64, 1.1] {
            let r = make_rays(&cam, phi, 3, 3);
            let p = 1 * 3 + 1;
            let t = 2.5;
            for ax in 0..3 {
                let hit = r.origins.at(p, ax) + t * r.dirs.at(p, ax);
                assert!(hit.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_axes_follow_world_axes_at_zero_azimuth() {
        let cam = CameraConfig::default();
        let r = make_rays::<f64>(&cam, 0.0, 2, 2);
        // Pixel (0,1) is upper right: direction tilts toward +x and +y.
        let p = 1;
        assert!(r.dirs.at(p, 0) > 0.0 && r.dirs.at(p, 1) > 0.0 && r.dirs.at(p, 2) < 0.0);
        // Pixel (1,0) is lower left.
        let p = 2;
        assert!(r.dirs.at(p, 0) < 0.0 && r.dirs.at(p, 1) < 0.0);
    }

    #[test]
    fn stratified_sampling_stays_in_bins_and_replays() {
        let cam = CameraConfig::default();
        let rays = make_rays::<f64>(&cam, 0.4, 3, 3);
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample_along(&cam, &rays, n, SampleMode::Stratified, &mut rng);
        let bin = (cam.far - cam.near) / n as f64;
        for p in 0..rays.n_rays() {
            for k in 0..n {
                let t = s.ts[p * n + k];
                assert!(t >= cam.near + k as f64 * bin && t < cam.near + (k + 1) as f64 * bin);
                if k + 1 < n {
                    assert!(s.ts[p * n + k + 1] > t);
                    assert!((s.deltas[p * n + k] - (s.ts[p * n + k + 1] - t)).abs() < 1e-15);
                } else {
                    assert!((s.deltas[p * n + k] - bin).abs() < 1e-15);
                }
            }
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let s2 = sample_along(&cam, &rays, n, SampleMode::Stratified, &mut rng2);
        assert_eq!(s.ts, s2.ts);
        let mut rng3 = ChaCha8Rng::seed_from_u64(10);
        let s3 = sample_along(&cam, &rays, n, SampleMode::Stratified, &mut rng3);
        assert_ne!(s.ts, s3.ts);
    }

    #[test]
    fn sample_points_lie_on_their_rays() {
        let cam = CameraConfig::default();
        let rays = make_rays::<f64>(&cam, 2.2, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_along(&cam, &rays, 4, SampleMode::Stratified, &mut rng);
        for p in 0..rays.n_rays() {
            for k in 0..4 {
                let g = p * 4 + k;
                for ax in 0..3 {
                    let want = rays.origins.at(p, ax) + s.ts[g] * rays.dirs.at(p, ax);
                    assert!((s.points.at(g, ax) - want).abs() < 1e-12);
                    assert_eq!(s.dirs.at(g, ax), rays.dirs.at(p, ax));
                }
            }
        }
    }

    #[test]
    fn positional_encoding_layout_and_values() {
        let pts: Mat<f64> = Mat::from_vec(2, 3, vec![0.5, 0.0, -0.25, 1.0, 0.25, 0.75]);
        let levels = 3;
        let e = encode_points_cols(&pts, levels);
        assert_eq!(e.rows, 6 * (levels + 1));
        assert_eq!(e.cols, 2);
        // Point 0, component x = 0.5: k=0 gives (sin(pi/2), cos(pi/2)) = (1, 0).
        assert!((e.at(0, 0) - 1.0).abs() < 1e-12);
        assert!(e.at(1, 0).abs() < 1e-12);
        // k=1 doubles the frequency: sin(pi) = 0, cos(pi) = -1.
        assert!(e.at(2, 0).abs() < 1e-12);
        assert!((e.at(3, 0) + 1.0).abs() < 1e-12);
        // Component y of point 0 is 0: every sin row 0, cos row 1.
        for k in 0..=levels {
            let r0 = 2 * (levels + 1) + 2 * k;
            assert_eq!(e.at(r0, 0), 0.0);
            assert_eq!(e.at(r0 + 1, 0), 1.0);
        }
        // Frequencies double with k for every component.
        let v = -0.25f64;
        for k in 0..=levels {
            let freq = std::f64::consts::PI * (1u32 << k) as f64;
            let r0 = 2 * 2 * (levels + 1) + 2 * k;
            assert!((e.at(r0, 0) - (freq * v).sin()).abs() < 1e-12);
            assert!((e.at(r0 + 1, 0) - (freq * v).cos()).abs() < 1e-12);
        }
        assert!(e.data.iter().all(|x| (-1.0..=1.0).contains(x)));
        // Default levels match the network's expected input widths.
        assert_eq!(encoded_rows(10), 66);
        assert_eq!(encoded_rows(4), 30);
    }

    #[test]
    fn camera_config_validation() {
        assert!(CameraConfig::default().validate().is_ok());
        let bad = CameraConfig { near: 3.0, far: 1.0, ..CameraConfig::default() };
        assert!(bad.validate().is_err());
        let bad = CameraConfig { bound_radius: 3.0, ..CameraConfig::default() };
        assert!(bad.validate().is_err());
    }
}
