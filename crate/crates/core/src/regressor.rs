//! Iterative body-parameter regressor. Starting from the mean state, a small
//! MLP repeatedly refines a flat state vector [per-joint 6d rotation | shape
//! | raw camera] given the aggregated image feature; the final state is
//! decoded into per-joint rotation matrices, shape coefficients, and a
//! positive-scale weak-perspective camera.

use crate::fields::{apply_linear, register_linear, LinearPair, LinearVars};
use crate::mat::Mat;
use crate::tape::{Tape, Var};
use crate::Scalar;
use rand::Rng;

/// Continuous 6d rotation parameterization: the first two columns of the
/// matrix, orthonormalized by Gram-Schmidt. The identity is (1,0,0,0,1,0).
pub fn rot6d_to_matrix_plain<S: Scalar>(six: &[S; 6]) -> Mat<S> {
    let a1 = [six[0], six[1], six[2]];
    let a2 = [six[3], six[4], six[5]];
    let n1 = crate::math::norm3(a1);
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let dot = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
    let u2 = [a2[0] - dot * b1[0], a2[1] - dot * b1[1], a2[2] - dot * b1[2]];
    let n2 = crate::math::norm3(u2);
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    let b3 = [
        b1[1] * b2[2] - b1[2] * b2[1],
        b1[2] * b2[0] - b1[0] * b2[2],
        b1[0] * b2[1] - b1[1] * b2[0],
    ];
    Mat::from_vec(3, 3, vec![b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2]])
}

/// First two columns of a rotation matrix as a 6d vector.
pub fn rot6d_from_matrix<S: Scalar>(m: &Mat<S>) -> [S; 6] {
    [m.at(0, 0), m.at(1, 0), m.at(2, 0), m.at(0, 1), m.at(1, 1), m.at(2, 1)]
}

/// Tape-side 6d-to-rotation: `six` is a (6,1) node; returns a (3,3) node.
pub fn rot6d_to_matrix_on_tape<S: Scalar>(t: &mut Tape<S>, six: Var) -> Var {
    assert_eq!(t.shape(six), (6, 1));
    let a1 = t.slice_rows(six, 0, 3);
    let a2 = t.slice_rows(six, 3, 3);
    let n1sq = t.sq_sum(a1);
    let inv1 = t.rsqrt(n1sq);
    let b1 = t.mul_scalar_var(a1, inv1);
    let b1_row = t.reshape(b1, 1, 3);
    let dot = t.matmul(b1_row, a2);
    let proj = t.mul_scalar_var(b1, dot);
    let u2 = t.sub(a2, proj);
    let n2sq = t.sq_sum(u2);
    let inv2 = t.rsqrt(n2sq);
    let b2 = t.mul_scalar_var(u2, inv2);
    let b3 = t.cross3(b1, b2);
    t.concat_cols(&[b1, b2, b3])
}

/// Inverse softplus, used to seed the raw camera scale so the decoded scale
/// starts at exactly the requested value.
pub fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

#[derive(Clone, Debug)]
pub struct RegressorWeights<S> {
    pub layers: Vec<LinearPair<S>>,
    /// Mean state the iterations start from; not trained, but stored in
    /// checkpoints so inference is self-contained.
    pub init_state: Mat<S>,
    pub n_joints: usize,
    pub n_shape: usize,
    pub n_features: usize,
    pub iterations: usize,
}

impl<S: Scalar> RegressorWeights<S> {
    pub fn state_dim(n_joints: usize, n_shape: usize) -> usize {
        6 * n_joints + n_shape + 3
    }

    /// Mean state: identity rotations, zero shape, unit decoded scale,
    /// centered translation.
    pub fn mean_state(n_joints: usize, n_shape: usize) -> Mat<S> {
        let d = Self::state_dim(n_joints, n_shape);
        let mut m = Mat::zeros(d, 1);
        for k in 0..n_joints {
            m.data[6 * k] = S::one();
            m.data[6 * k + 4] = S::one();
        }
        m.data[6 * n_joints + n_shape] = S::from_f64(softplus_inverse(1.0));
        m
    }

    pub fn init<R: Rng>(rng: &mut R, n_features: usize, n_joints: usize, n_shape: usize, hidden: usize, iterations: usize) -> Self {
        assert!(iterations >= 1);
        let d = Self::state_dim(n_joints, n_shape);
        let inp = n_features + d;
        // The output layer starts at zero so the first forward pass emits the
        // mean state; refinement is learned, not noise.
        let layers = vec![
            LinearPair::init(rng, hidden, inp),
            LinearPair::init(rng, hidden, hidden),
            LinearPair { w: Mat::zeros(d, hidden), b: Mat::zeros(d, 1) },
        ];
        RegressorWeights { layers, init_state: Self::mean_state(n_joints, n_shape), n_joints, n_shape, n_features, iterations }
    }

    pub fn named_params(&self) -> Vec<(String, &Mat<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("regressor.layer{i}.w"), &l.w));
            out.push((format!("regressor.layer{i}.b"), &l.b));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("regressor.layer{i}.w"), &mut l.w));
            out.push((format!("regressor.layer{i}.b"), &mut l.b));
        }
        out
    }
}

pub struct RegressorVars {
    pub layers: Vec<LinearVars>,
}

pub fn register_regressor<S: Scalar>(t: &mut Tape<S>, r: &RegressorWeights<S>) -> RegressorVars {
    RegressorVars { layers: r.layers.iter().map(|l| register_linear(t, l)).collect() }
}

/// Decoded prediction nodes: per-joint rotations, shape, and a camera whose
/// scale passed through softplus (always positive).
pub struct RegressedBody {
    pub rotations: Vec<Var>,
    pub beta: Var,
    pub camera: Var,
    pub state: Var,
}

pub fn apply_regressor<S: Scalar>(
    t: &mut Tape<S>,
    r: &RegressorWeights<S>,
    vars: &RegressorVars,
    feature: Var,
) -> RegressedBody {
    assert_eq!(t.shape(feature), (r.n_features, 1));
    let mut state = t.constant(r.init_state.clone());
    for _ in 0..r.iterations {
        let inp = t.concat_rows(&[feature, state]);
        let mut h = inp;
        for (i, l) in vars.layers.iter().enumerate() {
            h = apply_linear(t, *l, h);
            if i + 1 < vars.layers.len() {
                h = t.softplus(h);
            }
        }
        state = t.add(state, h);
    }
    let rotations = (0..r.n_joints)
        .map(|k| {
            let six = t.slice_rows(state, 6 * k, 6);
            rot6d_to_matrix_on_tape(t, six)
        })
        .collect();
    let beta = t.slice_rows(state, 6 * r.n_joints, r.n_shape);
    let raw_s = t.slice_rows(state, 6 * r.n_joints + r.n_shape, 1);
    let s = t.softplus(raw_s);
    let txy = t.slice_rows(state, 6 * r.n_joints + r.n_shape + 1, 2);
    let camera = t.concat_rows(&[s, txy]);
    RegressedBody { rotations, beta, camera, state }
}

/// Decode a finished state vector into plain body parameters (axis-angle
/// pose, shape, positive-scale camera).
pub fn state_to_params<S: Scalar>(state: &Mat<S>, n_joints: usize, n_shape: usize) -> crate::body_model::BodyParams<S> {
    assert_eq!(state.rows, RegressorWeights::<S>::state_dim(n_joints, n_shape));
    assert_eq!(state.cols, 1);
    let mut pose_theta = Vec::with_capacity(3 * n_joints);
    for k in 0..n_joints {
        let six = [
            state.data[6 * k],
            state.data[6 * k + 1],
            state.data[6 * k + 2],
            state.data[6 * k + 3],
            state.data[6 * k + 4],
            state.data[6 * k + 5],
        ];
        let r = rot6d_to_matrix_plain(&six);
        let aa = crate::math::log_map(&r);
        pose_theta.extend_from_slice(&aa);
    }
    let shape_beta: Vec<S> = (0..n_shape).map(|i| state.data[6 * n_joints + i]).collect();
    let raw_s = state.data[6 * n_joints + n_shape];
    let camera_pi = [
        crate::tape::softplus(raw_s),
        state.data[6 * n_joints + n_shape + 1],
        state.data[6 * n_joints + n_shape + 2],
    ];
    crate::body_model::BodyParams { pose_theta, shape_beta, camera_pi }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{central_diff, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_six_d_gives_identity_matrix() {
        let m = rot6d_to_matrix_plain(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let eye = Mat::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.data, eye.data);
    }

    #[test]
    fn six_d_output_is_a_rotation_and_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let six: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let m = rot6d_to_matrix_plain(&six);
            let mt = m.transpose();
            let prod = mt.matmul(&m);
            for r in 0..3 {
                for c in 0..3 {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert!((prod.at(r, c) - want).abs() < 1e-9);
                }
            }
            let det = m.at(0, 0) * (m.at(1, 1) * m.at(2, 2) - m.at(1, 2) * m.at(2, 1))
                - m.at(0, 1) * (m.at(1, 0) * m.at(2, 2) - m.at(1, 2) * m.at(2, 0))
                + m.at(0, 2) * (m.at(1, 0) * m.at(2, 1) - m.at(1, 1) * m.at(2, 0));
            assert!((det - 1.0).abs() < 1e-9);
            // Extracting the first two columns of a rotation reproduces it.
            let again = rot6d_to_matrix_plain(&rot6d_from_matrix(&m));
            for i in 0..9 {
                assert!((again.data[i] - m.data[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tape_six_d_matches_plain_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let six: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let six_mat = Mat::col_vec(&six);
            let mut t = Tape::new();
            let v = t.param(&six_mat);
            let m = rot6d_to_matrix_on_tape(&mut t, v);
            let plain = rot6d_to_matrix_plain(&six);
            for i in 0..9 {
                assert!((t.value(m).data[i] - plain.data[i]).abs() < 1e-12);
            }
            let loss = t.sq_sum(m);
            let grads = t.backward(loss);
            let g = grads.get(v).unwrap();
            let mats = vec![six_mat.clone()];
            for idx in 0..6 {
                let fd = central_diff(
                    |ps| {
                        let mut t2 = Tape::new();
                        let v2 = t2.param(&ps[0]);
                        let m2 = rot6d_to_matrix_on_tape(&mut t2, v2);
                        let l2 = t2.sq_sum(m2);
                        t2.scalar(l2)
                    },
                    &mats,
                    0,
                    idx,
                );
                assert!(rel_err(g.data[idx], fd) < 1e-6);
            }
        }
    }

    #[test]
    fn fresh_regressor_emits_the_mean_state() {
        // Output layer starts at zero, so all iterations add nothing.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = RegressorWeights::<f64>::init(&mut rng, 5, 8, 10, 16, 3);
        let mut t = Tape::new();
        let feat = t.constant(Mat::from_fn(5, 1, |_, _| rng.gen_range(-1.0..1.0)));
        let vars = register_regressor(&mut t, &r);
        let out = apply_regressor(&mut t, &r, &vars, feat);
        assert_eq!(t.value(out.state).data, r.init_state.data);
        for k in 0..8 {
            let m = t.value(out.rotations[k]);
            for rr in 0..3 {
                for cc in 0..3 {
                    let want = if rr == cc { 1.0 } else { 0.0 };
                    assert!((m.at(rr, cc) - want).abs() < 1e-12);
                }
            }
        }
        assert!(t.value(out.beta).data.iter().all(|&b| b == 0.0));
        let cam = t.value(out.camera);
        assert!((cam.at(0, 0) - 1.0).abs() < 1e-9, "decoded scale starts at 1");
        assert_eq!(cam.at(1, 0), 0.0);
        assert_eq!(cam.at(2, 0), 0.0);
    }

    #[test]
    fn refinement_runs_the_configured_iteration_count() {
        // Craft weights so every iteration adds a constant: final state =
        // init + iterations * c.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for iters in [1usize, 3, 5] {
            let mut r = RegressorWeights::<f64>::init(&mut rng, 2, 2, 1, 4, iters);
            let d = RegressorWeights::<f64>::state_dim(2, 1);
            r.layers[0].w = Mat::zeros(4, 2 + d);
            r.layers[0].b = Mat::zeros(4, 1);
            r.layers[1].w = Mat::zeros(4, 4);
            r.layers[1].b = Mat::zeros(4, 1);
            r.layers[2].w = Mat::zeros(d, 4);
            r.layers[2].b = Mat::from_fn(d, 1, |i, _| 0.01 * (i as f64 + 1.0));
            let mut t = Tape::new();
            let feat = t.constant(Mat::zeros(2, 1));
            let vars = register_regressor(&mut t, &r);
            let out = apply_regressor(&mut t, &r, &vars, feat);
            let got = t.value(out.state);
            for i in 0..d {
                let want = r.init_state.data[i] + iters as f64 * 0.01 * (i as f64 + 1.0);
                assert!((got.data[i] - want).abs() < 1e-12, "iters {iters} coord {i}");
            }
        }
    }

    #[test]
    fn state_decoding_matches_tape_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = RegressorWeights::<f64>::init(&mut rng, 3, 4, 2, 8, 2);
        // Give the output layer real values so the state moves.
        let d = RegressorWeights::<f64>::state_dim(4, 2);
        r.layers[2].w = Mat::from_fn(d, 8, |_, _| rng.gen_range(-0.05..0.05));
        let mut t = Tape::new();
        let feat = t.constant(Mat::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0)));
        let vars = register_regressor(&mut t, &r);
        let out = apply_regressor(&mut t, &r, &vars, feat);
        let params = state_to_params(&t.value(out.state).clone(), 4, 2);
        assert!(params.camera_pi[0] > 0.0);
        let cam_tape = t.value(out.camera).clone();
        assert!((params.camera_pi[0] - cam_tape.at(0, 0)).abs() < 1e-12);
        for k in 0..4 {
            let m_tape = t.value(out.rotations[k]).clone();
            let m_plain = crate::math::rodrigues([
                params.pose_theta[3 * k],
                params.pose_theta[3 * k + 1],
                params.pose_theta[3 * k + 2],
            ]);
            for i in 0..9 {
                assert!((m_tape.data[i] - m_plain.data[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn regressor_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut r = RegressorWeights::<f64>::init(&mut rng, 3, 2, 2, 6, 2);
        let d = RegressorWeights::<f64>::state_dim(2, 2);
        r.layers[2].w = Mat::from_fn(d, 6, |_, _| rng.gen_range(-0.1..0.1));
        r.layers[2].b = Mat::from_fn(d, 1, |_, _| rng.gen_range(-0.1..0.1));
        let feat_mat = Mat::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0));
        let mats: Vec<Mat<f64>> = r.named_params().into_iter().map(|(_, m)| m.clone()).collect();
        let build = |params: &[Mat<f64>]| -> (Tape<f64>, Vec<Var>, Var) {
            let mut r2 = r.clone();
            for ((_, m), p) in r2.named_params_mut().into_iter().zip(params) {
                *m = p.clone();
            }
            let mut t = Tape::new();
            let feat = t.constant(feat_mat.clone());
            let vars = register_regressor(&mut t, &r2);
            let vlist: Vec<Var> = vars.layers.iter().flat_map(|l| [l.w, l.b]).collect();
            let out = apply_regressor(&mut t, &r2, &vars, feat);
            // Loss touches every head: rotations, shape, camera.
            let mut loss = t.sq_sum(out.beta);
            let lc = t.sq_sum(out.camera);
            loss = t.add(loss, lc);
            for k in 0..2 {
                let lr = t.sq_sum(out.rotations[k]);
                loss = t.add(loss, lr);
            }
            (t, vlist, loss)
        };
        let (t, vlist, loss) = build(&mats);
        let grads = t.backward(loss);
        let mut pick = ChaCha8Rng::seed_from_u64(7);
        for (pi, v) in vlist.iter().enumerate() {
            let g = grads.get(*v).expect("all layers used");
            let n = mats[pi].len();
            for _ in 0..4.min(n) {
                let idx = pick.gen_range(0..n);
                let fd = central_diff(
                    |ps| {
                        let (t2, _, l2) = build(ps);
                        t2.scalar(l2)
                    },
                    &mats,
                    pi,
                    idx,
                );
                assert!(rel_err(g.data[idx], fd) < 1e-5, "layer {pi} coord {idx}");
            }
        }
    }
}
