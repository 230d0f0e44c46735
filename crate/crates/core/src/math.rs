//! Rotation utilities on plain matrices (nothing here is differentiated; the
//! learned pose path uses the 6d representation built directly on the tape).

use crate::mat::Mat;
use crate::Scalar;

/// Rotation matrix about +y by `angle` (right-handed, radians).
pub fn rot_y<S: Scalar>(angle: S) -> Mat<S> {
    let (s, c) = (angle.sin(), angle.cos());
    Mat::from_vec(3, 3, vec![c, S::zero(), s, S::zero(), S::one(), S::zero(), -s, S::zero(), c])
}

/// Axis-angle (rotation vector) to rotation matrix.
///
/// R = I + sin(t) K + (1 - cos(t)) K^2 with K the unit-axis cross matrix.
/// The sin(t)/t and (1-cos(t))/t^2 factors switch to series below sqrt(eps)
/// so the map is well behaved through zero.
pub fn rodrigues<S: Scalar>(v: [S; 3]) -> Mat<S> {
    let t2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let t = t2.sqrt();
    let (a, b);
    if t.to_f64() < 1e-6 {
        // sin t / t ~ 1 - t^2/6, (1 - cos t)/t^2 ~ 1/2 - t^2/24
        a = S::one() - t2 / S::from_f64(6.0);
        b = S::from_f64(0.5) - t2 / S::from_f64(24.0);
    } else {
        a = t.sin() / t;
        b = (S::one() - t.cos()) / t2;
    }
    let (x, y, z) = (v[0], v[1], v[2]);
    // I + a*K + b*K^2 expanded; K built from the unnormalized vector, with the
    // normalization folded into a and b.
    let one = S::one();
    Mat::from_vec(
        3,
        3,
        vec![
            one - b * (y * y + z * z),
            -a * z + b * x * y,
            a * y + b * x * z,
            a * z + b * x * y,
            one - b * (x * x + z * z),
            -a * x + b * y * z,
            -a * y + b * x * z,
            a * x + b * y * z,
            one - b * (x * x + y * y),
        ],
    )
}

/// Rotation matrix to axis-angle, inverse of [`rodrigues`].
///
/// Returns the rotation vector with angle in [0, pi]. Near pi the axis is
/// recovered from the symmetric part since the skew part vanishes.
pub fn log_map<S: Scalar>(r: &Mat<S>) -> [S; 3] {
    assert_eq!((r.rows, r.cols), (3, 3));
    let half = S::from_f64(0.5);
    let tr = r.at(0, 0) + r.at(1, 1) + r.at(2, 2);
    let cos_t = ((tr - S::one()) * half).max(-S::one()).min(S::one());
    let t = cos_t.acos();
    let skew = [
        (r.at(2, 1) - r.at(1, 2)) * half,
        (r.at(0, 2) - r.at(2, 0)) * half,
        (r.at(1, 0) - r.at(0, 1)) * half,
    ];
    if t.to_f64() < 1e-7 {
        // R ~ I + K: the skew part already is the rotation vector.
        return skew;
    }
    if core::f64::consts::PI - t.to_f64() > 1e-5 {
        let k = t / t.sin();
        return [skew[0] * k, skew[1] * k, skew[2] * k];
    }
    // Angle at or near pi: use R = I + 2 K^2 (sin term negligible), so
    // (R + I)/2 = I + K^2 = axis outer product. Take the largest diagonal.
    let one = S::one();
    let d = [
        ((r.at(0, 0) + one) * half).max(S::zero()).sqrt(),
        ((r.at(1, 1) + one) * half).max(S::zero()).sqrt(),
        ((r.at(2, 2) + one) * half).max(S::zero()).sqrt(),
    ];
    let i = if d[0] >= d[1] && d[0] >= d[2] {
        0
    } else if d[1] >= d[2] {
        1
    } else {
        2
    };
    let mut axis = [S::zero(); 3];
    axis[i] = d[i];
    let quarter = S::from_f64(0.25);
    match i {
        0 => {
            axis[1] = (r.at(0, 1) + r.at(1, 0)) * quarter / d[0];
            axis[2] = (r.at(0, 2) + r.at(2, 0)) * quarter / d[0];
        }
        1 => {
            axis[0] = (r.at(0, 1) + r.at(1, 0)) * quarter / d[1];
            axis[2] = (r.at(1, 2) + r.at(2, 1)) * quarter / d[1];
        }
        _ => {
            axis[0] = (r.at(0, 2) + r.at(2, 0)) * quarter / d[2];
            axis[1] = (r.at(1, 2) + r.at(2, 1)) * quarter / d[2];
        }
    }
    // Fix the sign so that exp(log(R)) = R rather than R^T.
    let n2 = axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2];
    let n = n2.sqrt();
    let mut v = [axis[0] / n * t, axis[1] / n * t, axis[2] / n * t];
    let back = rodrigues(v);
    let err: S = back.sub(r).frobenius_sq();
    let back_neg = rodrigues([-v[0], -v[1], -v[2]]);
    let err_neg: S = back_neg.sub(r).frobenius_sq();
    if err_neg < err {
        v = [-v[0], -v[1], -v[2]];
    }
    v
}

/// Unit quaternion (w, x, y, z) from axis-angle. Test oracle path.
pub fn quat_from_axis_angle<S: Scalar>(v: [S; 3]) -> [S; 4] {
    let t2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let t = t2.sqrt();
    let half = S::from_f64(0.5);
    if t.to_f64() < 1e-8 {
        let s = half - t2 / S::from_f64(48.0);
        return [S::one() - t2 * S::from_f64(0.125), v[0] * s, v[1] * s, v[2] * s];
    }
    let (sh, ch) = ((t * half).sin(), (t * half).cos());
    [ch, v[0] / t * sh, v[1] / t * sh, v[2] / t * sh]
}

pub fn quat_to_mat<S: Scalar>(q: [S; 4]) -> Mat<S> {
    let [w, x, y, z] = q;
    let two = S::from_f64(2.0);
    let one = S::one();
    Mat::from_vec(
        3,
        3,
        vec![
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    )
}

pub fn quat_mul<S: Scalar>(a: [S; 4], b: [S; 4]) -> [S; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// 3-vector helpers used across the geometry code.
pub fn matvec3<S: Scalar>(r: &Mat<S>, v: [S; 3]) -> [S; 3] {
    [
        r.at(0, 0) * v[0] + r.at(0, 1) * v[1] + r.at(0, 2) * v[2],
        r.at(1, 0) * v[0] + r.at(1, 1) * v[1] + r.at(1, 2) * v[2],
        r.at(2, 0) * v[0] + r.at(2, 1) * v[1] + r.at(2, 2) * v[2],
    ]
}

pub fn norm3<S: Scalar>(v: [S; 3]) -> S {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Mat<f64>, b: &Mat<f64>, tol: f64) -> bool {
        a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn rodrigues_matches_quaternion_path() {
        // Independent construction of the same rotation through quaternions.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let v = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let r = rodrigues(v);
            let q = quat_to_mat(quat_from_axis_angle(v));
            assert!(close(&r, &q, 1e-12), "mismatch for {v:?}");
        }
    }

    #[test]
    fn rodrigues_is_orthonormal_det_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let v = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let r = rodrigues(v);
            let rtr = r.transpose().matmul(&r);
            let eye = Mat::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
            assert!(close(&rtr, &eye, 1e-12));
            let det = r.at(0, 0) * (r.at(1, 1) * r.at(2, 2) - r.at(1, 2) * r.at(2, 1))
                - r.at(0, 1) * (r.at(1, 0) * r.at(2, 2) - r.at(1, 2) * r.at(2, 0))
                + r.at(0, 2) * (r.at(1, 0) * r.at(2, 1) - r.at(1, 1) * r.at(2, 0));
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_map_roundtrip_including_near_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut angles: Vec<f64> = (0..60).map(|_| rng.gen_range(1e-9..3.13)).collect();
        angles.extend([1e-12, 1e-8, 3.141, 3.14159, std::f64::consts::PI]);
        for t in angles {
            let ax = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
            let n = norm3(ax);
            let v = [ax[0] / n * t, ax[1] / n * t, ax[2] / n * t];
            let r = rodrigues(v);
            let back = rodrigues(log_map(&r));
            assert!(close(&r, &back, 1e-6), "roundtrip failed at angle {t}");
        }
    }

    #[test]
    fn rot_y_convention() {
        // +90 degrees about y takes +z to +x.
        let r = rot_y(std::f64::consts::FRAC_PI_2);
        let v = matvec3(&r, [0.0, 0.0, 1.0]);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12 && v[2].abs() < 1e-12);
    }

    #[test]
    fn rot_y_composes_additively() {
        let a = rot_y(0.7f64);
        let b = rot_y(0.5f64);
        assert!(close(&a.matmul(&b), &rot_y(1.2), 1e-12));
    }
}
