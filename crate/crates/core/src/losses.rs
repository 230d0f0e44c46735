//! Training objective. Every example is supervised at the canonical view
//! (keypoint reprojection, plus 3d joints / pose / shape when labels exist).
//! 3d-labeled examples additionally render the field from one random azimuth
//! and are supervised against the rotated labels there, optionally with a
//! silhouette decoded from the rendered map. 2d-only examples render two
//! random azimuths and the two predictions must agree once the view offset is
//! compensated on the global orientation.

use crate::body_model::{
    forward, rotate_about_vertical, rotate_global_orient, BodyModelAsset, BodyParams, TapeMesh,
};
use crate::camera::SampleMode;
use crate::config::LossConfig;
use crate::mat::Mat;
use crate::math::{rodrigues, rot_y};
use crate::model::{Model, ModelVars};
use crate::regressor::RegressedBody;
use crate::silhouette::{decode_silhouette, silhouette_at_azimuth, DecoderVars, DecoderWeights, SILHOUETTE_RES};
use crate::synth::{Gt3d, LabeledExample};
use crate::tape::{Tape, Var};
use crate::Scalar;
use rand::Rng;
use serde::Serialize;

/// Weighted contribution of each objective term, recorded per step for logs.
/// Terms that do not apply to an example stay at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub canonical_2d: f64,
    pub canonical_3d: f64,
    pub canonical_pose: f64,
    pub canonical_shape: f64,
    pub imagined_3d: f64,
    pub imagined_pose: f64,
    pub imagined_shape: f64,
    pub imagined_silhouette: f64,
    pub agreement_pose: f64,
    pub agreement_shape: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, o: &LossBreakdown) {
        self.canonical_2d += o.canonical_2d;
        self.canonical_3d += o.canonical_3d;
        self.canonical_pose += o.canonical_pose;
        self.canonical_shape += o.canonical_shape;
        self.imagined_3d += o.imagined_3d;
        self.imagined_pose += o.imagined_pose;
        self.imagined_shape += o.imagined_shape;
        self.imagined_silhouette += o.imagined_silhouette;
        self.agreement_pose += o.agreement_pose;
        self.agreement_shape += o.agreement_shape;
        self.total += o.total;
    }

    pub fn scale_by(&mut self, f: f64) {
        self.canonical_2d *= f;
        self.canonical_3d *= f;
        self.canonical_pose *= f;
        self.canonical_shape *= f;
        self.imagined_3d *= f;
        self.imagined_pose *= f;
        self.imagined_shape *= f;
        self.imagined_silhouette *= f;
        self.agreement_pose *= f;
        self.agreement_shape *= f;
        self.total *= f;
    }
}

/// weight * sum((pred - target)^2), target held constant.
pub fn weighted_sq_err_to_const<S: Scalar>(t: &mut Tape<S>, pred: Var, target: &Mat<S>, weight: f64) -> Var {
    let c = t.constant(target.clone());
    let d = t.sub(pred, c);
    let s = t.sq_sum(d);
    t.scale(s, S::from_f64(weight))
}

/// weight * sum((a - b)^2) between two tape nodes.
pub fn weighted_sq_diff<S: Scalar>(t: &mut Tape<S>, a: Var, b: Var, weight: f64) -> Var {
    let d = t.sub(a, b);
    let s = t.sq_sum(d);
    t.scale(s, S::from_f64(weight))
}

/// weight * sum_k ||R_hat_k - R(theta_k)||_F^2 with the target rotations
/// built from the axis-angle pose and held constant.
pub fn weighted_rotation_err_to_pose<S: Scalar>(
    t: &mut Tape<S>,
    rots: &[Var],
    pose_theta: &[S],
    weight: f64,
) -> Var {
    assert_eq!(pose_theta.len(), 3 * rots.len(), "pose vector must hold 3 values per joint");
    let mut acc: Option<Var> = None;
    for (k, &r) in rots.iter().enumerate() {
        let target = rodrigues([pose_theta[3 * k], pose_theta[3 * k + 1], pose_theta[3 * k + 2]]);
        let c = t.constant(target);
        let d = t.sub(r, c);
        let s = t.sq_sum(d);
        acc = Some(match acc {
            Some(a) => t.add(a, s),
            None => s,
        });
    }
    let total = acc.expect("at least one joint");
    t.scale(total, S::from_f64(weight))
}

/// Agreement between the poses regressed from two views of the same image.
/// The view rendered at azimuth `phi` sees the body pre-rotated by
/// R_y(-phi), so the second view's global orientation must equal
/// R_y(-delta_phi) times the first's (delta_phi = phi_b - phi_a); every other
/// joint rotation is view-independent and must match directly. Gradients
/// flow into both predictions.
pub fn weighted_rotation_agreement<S: Scalar>(
    t: &mut Tape<S>,
    rots_a: &[Var],
    rots_b: &[Var],
    delta_phi: S,
    weight: f64,
) -> Var {
    assert_eq!(rots_a.len(), rots_b.len());
    let adj = t.constant(rot_y(-delta_phi));
    let mut acc: Option<Var> = None;
    for k in 0..rots_a.len() {
        let expected_b = if k == 0 { t.matmul(adj, rots_a[0]) } else { rots_a[k] };
        let d = t.sub(rots_b[k], expected_b);
        let s = t.sq_sum(d);
        acc = Some(match acc {
            Some(a) => t.add(a, s),
            None => s,
        });
    }
    let total = acc.expect("at least one joint");
    t.scale(total, S::from_f64(weight))
}

/// weight * mean-over-pixels squared error between a decoded soft silhouette
/// (1, res*res) and a binary target mask (res, res).
pub fn weighted_silhouette_err<S: Scalar>(t: &mut Tape<S>, decoded: Var, mask: &Mat<S>, weight: f64) -> Var {
    let (rows, cols) = t.shape(decoded);
    assert_eq!(rows, 1, "decoded silhouette is a single channel");
    assert_eq!(cols, mask.rows * mask.cols, "mask must cover the decoded resolution");
    let flat = Mat::from_vec(1, cols, mask.data.clone());
    let c = t.constant(flat);
    let d = t.sub(decoded, c);
    let s = t.sq_sum(d);
    t.scale(s, S::from_f64(weight / cols as f64))
}

fn sum_terms<S: Scalar>(t: &mut Tape<S>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &v in &terms[1..] {
        acc = t.add(acc, v);
    }
    acc
}

/// Supervision at the canonical view: reprojected keypoints always, plus 3d
/// joints, per-joint rotations, and shape when the example carries 3d labels.
pub fn canonical_view_terms(
    t: &mut Tape<f64>,
    body: &RegressedBody,
    mesh: &TapeMesh,
    ex: &LabeledExample,
    w: &LossConfig,
) -> (Vec<Var>, LossBreakdown) {
    let mut terms = Vec::new();
    let mut bd = LossBreakdown::default();
    let kp = weighted_sq_err_to_const(t, mesh.keypoints2d, &ex.keypoints2d, w.lambda_2d);
    bd.canonical_2d = t.scalar(kp);
    terms.push(kp);
    if let Some(gt3) = &ex.gt3d {
        let j = weighted_sq_err_to_const(t, mesh.joints3d, &gt3.joints3d, w.lambda_3d);
        bd.canonical_3d = t.scalar(j);
        terms.push(j);
        let p = weighted_rotation_err_to_pose(t, &body.rotations, &gt3.pose_theta, w.lambda_pose);
        bd.canonical_pose = t.scalar(p);
        terms.push(p);
        let beta_gt = Mat::from_vec(gt3.shape_beta.len(), 1, gt3.shape_beta.clone());
        let s = weighted_sq_err_to_const(t, body.beta, &beta_gt, w.lambda_shape);
        bd.canonical_shape = t.scalar(s);
        terms.push(s);
    }
    (terms, bd)
}

/// Supervision for a rendering of the same latent at azimuth `phi`: the
/// labels are carried into that view (joints rotated about the vertical
/// axis, global orientation composed with the view rotation, shape
/// unchanged). There is no reprojection term away from the canonical view.
/// When a decoder is supplied, the rendered map must also decode to the
/// ground-truth silhouette as seen from `phi`.
#[allow(clippy::too_many_arguments)]
pub fn imagined_view_terms(
    t: &mut Tape<f64>,
    decoder: Option<(&DecoderWeights<f64>, &DecoderVars)>,
    asset: &BodyModelAsset<f64>,
    body: &RegressedBody,
    map: Var,
    mesh: &TapeMesh,
    gt3: &Gt3d,
    phi: f64,
    w: &LossConfig,
) -> (Vec<Var>, LossBreakdown) {
    let mut terms = Vec::new();
    let mut bd = LossBreakdown::default();

    let target_joints = rotate_about_vertical(&gt3.joints3d, -phi);
    let j = weighted_sq_err_to_const(t, mesh.joints3d, &target_joints, w.lambda_3d);
    bd.imagined_3d = t.scalar(j);
    terms.push(j);

    let rotated_pose = rotate_global_orient(&gt3.pose_theta, phi);
    let p = weighted_rotation_err_to_pose(t, &body.rotations, &rotated_pose, w.lambda_pose);
    bd.imagined_pose = t.scalar(p);
    terms.push(p);

    let beta_gt = Mat::from_vec(gt3.shape_beta.len(), 1, gt3.shape_beta.clone());
    let s = weighted_sq_err_to_const(t, body.beta, &beta_gt, w.lambda_shape);
    bd.imagined_shape = t.scalar(s);
    terms.push(s);

    if let Some((dw, dv)) = decoder {
        let params = BodyParams {
            pose_theta: gt3.pose_theta.clone(),
            shape_beta: gt3.shape_beta.clone(),
            camera_pi: [1.0, 0.0, 0.0],
        };
        let gt_mesh = forward(asset, &params).expect("stored labels are valid body parameters");
        let mask = silhouette_at_azimuth(&gt_mesh.vertices, &asset.faces, phi, SILHOUETTE_RES);
        let dec = decode_silhouette(t, dw, dv, map).expect("decoder is built for the rendered map");
        let sil = weighted_silhouette_err(t, dec, &mask, w.lambda_silhouette);
        bd.imagined_silhouette = t.scalar(sil);
        terms.push(sil);
    }
    (terms, bd)
}

/// Agreement between predictions from two renderings of the same latent.
/// `delta_phi` is the second azimuth minus the first.
pub fn view_agreement_terms(
    t: &mut Tape<f64>,
    body_a: &RegressedBody,
    body_b: &RegressedBody,
    delta_phi: f64,
    w: &LossConfig,
) -> (Vec<Var>, LossBreakdown) {
    let mut bd = LossBreakdown::default();
    let p = weighted_rotation_agreement(t, &body_a.rotations, &body_b.rotations, delta_phi, w.lambda_pose);
    bd.agreement_pose = t.scalar(p);
    let s = weighted_sq_diff(t, body_a.beta, body_b.beta, w.lambda_shape);
    bd.agreement_shape = t.scalar(s);
    (vec![p, s], bd)
}

/// Full objective for one example. Draws the extra azimuths from `rng`
/// (3d-labeled: one imagined view; 2d-only: two views whose predictions must
/// agree) and returns the total loss node plus the per-term record.
pub fn example_loss<R: Rng>(
    t: &mut Tape<f64>,
    model: &Model<f64>,
    vars: &ModelVars,
    asset: &BodyModelAsset<f64>,
    ex: &LabeledExample,
    w: &LossConfig,
    mode: SampleMode,
    rng: &mut R,
) -> (Var, LossBreakdown) {
    let latent = model.latent(t, vars, &ex.image);
    let s0 = model.sample_view(0.0, mode, rng);
    let (body0, _map0, mesh0) = model.predict_view(t, vars, asset, latent, &s0);
    let (mut terms, mut bd) = canonical_view_terms(t, &body0, &mesh0, ex, w);

    match &ex.gt3d {
        Some(gt3) if w.imagination => {
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let sp = model.sample_view(phi, mode, rng);
            let (bodyp, mapp, meshp) = model.predict_view(t, vars, asset, latent, &sp);
            let decoder = if w.silhouette {
                model.decoder.as_ref().zip(vars.decoder.as_ref())
            } else {
                None
            };
            let (more, bd2) = imagined_view_terms(t, decoder, asset, &bodyp, mapp, &meshp, gt3, phi, w);
            terms.extend(more);
            bd.accumulate(&bd2);
        }
        None if w.consistency => {
            let phi1 = rng.gen_range(0.0..std::f64::consts::TAU);
            let phi2 = rng.gen_range(0.0..std::f64::consts::TAU);
            let s1 = model.sample_view(phi1, mode, rng);
            let (body1, _m1, _mesh1) = model.predict_view(t, vars, asset, latent, &s1);
            let s2 = model.sample_view(phi2, mode, rng);
            let (body2, _m2, _mesh2) = model.predict_view(t, vars, asset, latent, &s2);
            let (more, bd2) = view_agreement_terms(t, &body1, &body2, phi2 - phi1, w);
            terms.extend(more);
            bd.accumulate(&bd2);
        }
        _ => {}
    }

    let total = sum_terms(t, &terms);
    bd.total = t.scalar(total);
    (total, bd)
}
