//! Parametric articulated body: shape and pose coefficients to mesh vertices,
//! 3d joints, and projected 2d keypoints, via linear blend skinning over a
//! kinematic tree. Both a plain evaluation path (used for ground truth and
//! metrics) and a tape-building path (used by the training graph) are provided;
//! they compute the same blend-then-apply formulation.

use crate::mat::Mat;
use crate::math::{log_map, rodrigues, rot_y};
use crate::tape::{Tape, Var};
use crate::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("asset invariant violated: {0}")]
    InvalidAsset(String),
    #[error("parameter dimensions do not match asset: {0}")]
    DimensionMismatch(String),
    #[error("camera scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("asset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("asset parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported asset format version {0}")]
    Version(u32),
}

/// Articulated body asset. `template_vertices` is (V,3), `shape_basis` is
/// (B, 3V) with each row a flattened per-vertex displacement field,
/// `skinning_weights` is (V,K), `joint_regressor` is (N_j, V).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BodyModelAsset<S> {
    pub format_version: u32,
    pub template_vertices: Mat<S>,
    pub shape_basis: Mat<S>,
    pub skinning_weights: Mat<S>,
    /// Parent index per joint; -1 marks the root.
    pub parent_of: Vec<i64>,
    pub rest_joints: Mat<S>,
    pub joint_regressor: Mat<S>,
    /// Triangles indexing template vertices. Not part of the skinning math;
    /// carried for silhouette rasterization and mesh export.
    pub faces: Vec<[u32; 3]>,
}

pub const ASSET_FORMAT_VERSION: u32 = 1;

impl<S: Scalar> BodyModelAsset<S> {
    pub fn n_vertices(&self) -> usize {
        self.template_vertices.rows
    }

    pub fn n_joints(&self) -> usize {
        self.parent_of.len()
    }

    pub fn n_shape(&self) -> usize {
        self.shape_basis.rows
    }

    pub fn n_regressed(&self) -> usize {
        self.joint_regressor.rows
    }

    pub fn validate(&self) -> Result<(), BodyError> {
        let bad = |m: String| Err(BodyError::InvalidAsset(m));
        if self.format_version != ASSET_FORMAT_VERSION {
            return Err(BodyError::Version(self.format_version));
        }
        let (v, k, b, nj) = (self.n_vertices(), self.n_joints(), self.n_shape(), self.n_regressed());
        if b < 1 || k < 2 || nj < 1 {
            return bad(format!("sizes out of range: B={b} K={k} N_j={nj}"));
        }
        if self.template_vertices.cols != 3 {
            return bad("template_vertices must be (V,3)".into());
        }
        if (self.shape_basis.rows, self.shape_basis.cols) != (b, 3 * v) {
            return bad("shape_basis must be (B, 3V)".into());
        }
        if (self.skinning_weights.rows, self.skinning_weights.cols) != (v, k) {
            return bad("skinning_weights must be (V,K)".into());
        }
        if (self.rest_joints.rows, self.rest_joints.cols) != (k, 3) {
            return bad("rest_joints must be (K,3)".into());
        }
        if self.joint_regressor.cols != v {
            return bad("joint_regressor must be (N_j, V)".into());
        }
        let tol = S::from_f64(1e-6);
        for vi in 0..v {
            let mut sum = S::zero();
            for ki in 0..k {
                let w = self.skinning_weights.at(vi, ki);
                if w < S::zero() {
                    return bad(format!("negative skinning weight at vertex {vi}"));
                }
                sum += w;
            }
            if (sum - S::one()).abs() > tol {
                return bad(format!("skinning weights of vertex {vi} sum to {sum}, not 1"));
            }
        }
        for r in 0..nj {
            let sum = self.joint_regressor.row(r).iter().fold(S::zero(), |a, &x| a + x);
            if (sum - S::one()).abs() > tol {
                return bad(format!("joint_regressor row {r} sums to {sum}, not 1"));
            }
        }
        // Exactly one root, everything reachable from it, no cycles.
        let roots: Vec<usize> = (0..k).filter(|&i| self.parent_of[i] < 0).collect();
        if roots.len() != 1 {
            return bad(format!("expected exactly one root joint, found {}", roots.len()));
        }
        for (i, &p) in self.parent_of.iter().enumerate() {
            if p >= 0 && p as usize >= k {
                return bad(format!("joint {i} has out-of-range parent {p}"));
            }
        }
        // Walk up from every joint; a cycle would loop past k steps.
        for i in 0..k {
            let mut cur = i;
            let mut steps = 0;
            while self.parent_of[cur] >= 0 {
                cur = self.parent_of[cur] as usize;
                steps += 1;
                if steps > k {
                    return bad(format!("cycle in kinematic tree at joint {i}"));
                }
            }
            if cur != roots[0] {
                return bad(format!("joint {i} does not reach the root"));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&ix| ix as usize >= v) {
                return bad(format!("face {fi} indexes past vertex count"));
            }
        }
        if !self.template_vertices.data.iter().all(|x| x.is_finite())
            || !self.shape_basis.data.iter().all(|x| x.is_finite())
        {
            return bad("non-finite values in asset".into());
        }
        Ok(())
    }

    /// Joint evaluation order with parents before children.
    pub fn topo_order(&self) -> Vec<usize> {
        let k = self.n_joints();
        let mut order = Vec::with_capacity(k);
        let mut placed = vec![false; k];
        while order.len() < k {
            for i in 0..k {
                if placed[i] {
                    continue;
                }
                let p = self.parent_of[i];
                if p < 0 || placed[p as usize] {
                    order.push(i);
                    placed[i] = true;
                }
            }
        }
        order
    }

    pub fn convert<T: Scalar>(&self) -> BodyModelAsset<T> {
        let conv = |m: &Mat<S>| Mat::<T>::from_f64_mat(&m.to_f64());
        BodyModelAsset {
            format_version: self.format_version,
            template_vertices: conv(&self.template_vertices),
            shape_basis: conv(&self.shape_basis),
            skinning_weights: conv(&self.skinning_weights),
            parent_of: self.parent_of.clone(),
            rest_joints: conv(&self.rest_joints),
            joint_regressor: conv(&self.joint_regressor),
            faces: self.faces.clone(),
        }
    }
}

impl BodyModelAsset<f64> {
    pub fn save(&self, path: &std::path::Path) -> Result<(), BodyError> {
        let bytes = self.canonical_bytes();
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BodyError> {
        let bytes = std::fs::read(path)?;
        let asset: BodyModelAsset<f64> = serde_json::from_slice(&bytes)?;
        asset.validate()?;
        Ok(asset)
    }

    /// The exact bytes `save` writes; also the input to [`asset_hash`].
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("asset serializes")
    }
}

/// Hex sha-256 of the asset's canonical serialization; datasets record it so
/// training and evaluation can detect asset mismatches.
pub fn asset_hash(asset: &BodyModelAsset<f64>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(asset.canonical_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Pose, shape, and weak-perspective camera for one body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyParams<S> {
    /// Axis-angle per joint, root first: length 3K.
    pub pose_theta: Vec<S>,
    /// Shape coefficients: length B.
    pub shape_beta: Vec<S>,
    /// Weak perspective (s, t_x, t_y).
    pub camera_pi: [S; 3],
}

impl<S: Scalar> BodyParams<S> {
    /// Mean parameters: zero pose, zero shape, unit scale, centered.
    pub fn mean(n_joints: usize, n_shape: usize) -> Self {
        BodyParams {
            pose_theta: vec![S::zero(); 3 * n_joints],
            shape_beta: vec![S::zero(); n_shape],
            camera_pi: [S::one(), S::zero(), S::zero()],
        }
    }

    pub fn validate_against<T: Scalar>(&self, asset: &BodyModelAsset<T>) -> Result<(), BodyError> {
        if self.pose_theta.len() != 3 * asset.n_joints() {
            return Err(BodyError::DimensionMismatch(format!(
                "pose_theta has {} entries, asset wants {}",
                self.pose_theta.len(),
                3 * asset.n_joints()
            )));
        }
        if self.shape_beta.len() != asset.n_shape() {
            return Err(BodyError::DimensionMismatch(format!(
                "shape_beta has {} entries, asset wants {}",
                self.shape_beta.len(),
                asset.n_shape()
            )));
        }
        let finite = self.pose_theta.iter().chain(self.shape_beta.iter()).all(|x| x.is_finite())
            && self.camera_pi.iter().all(|x| x.is_finite());
        if !finite {
            return Err(BodyError::DimensionMismatch("non-finite parameter".into()));
        }
        if self.camera_pi[0] <= S::zero() {
            return Err(BodyError::NonPositiveScale(self.camera_pi[0].to_f64()));
        }
        Ok(())
    }

    pub fn convert<T: Scalar>(&self) -> BodyParams<T> {
        BodyParams {
            pose_theta: self.pose_theta.iter().map(|&x| T::from_f64(Scalar::to_f64(x))).collect(),
            shape_beta: self.shape_beta.iter().map(|&x| T::from_f64(Scalar::to_f64(x))).collect(),
            camera_pi: [
                T::from_f64(Scalar::to_f64(self.camera_pi[0])),
                T::from_f64(Scalar::to_f64(self.camera_pi[1])),
                T::from_f64(Scalar::to_f64(self.camera_pi[2])),
            ],
        }
    }
}

#[derive(Clone, Debug)]
pub struct MeshAndJoints<S> {
    pub vertices: Mat<S>,
    pub joints3d: Mat<S>,
    pub keypoints2d: Mat<S>,
}

/// Per-joint world transforms (rotation, translation) for the given pose,
/// plus the vertex skinning transforms G_k = A_k composed with the rest-joint
/// offset. Shared by the plain forward pass and the brute-force test oracle.
pub fn joint_transforms<S: Scalar>(
    asset: &BodyModelAsset<S>,
    pose_theta: &[S],
) -> (Vec<Mat<S>>, Vec<[S; 3]>) {
    let k = asset.n_joints();
    let mut a_rot: Vec<Mat<S>> = vec![Mat::zeros(3, 3); k];
    let mut a_t: Vec<[S; 3]> = vec![[S::zero(); 3]; k];
    for &ji in &asset.topo_order() {
        let r = rodrigues([pose_theta[3 * ji], pose_theta[3 * ji + 1], pose_theta[3 * ji + 2]]);
        let j = [asset.rest_joints.at(ji, 0), asset.rest_joints.at(ji, 1), asset.rest_joints.at(ji, 2)];
        let p = asset.parent_of[ji];
        if p < 0 {
            a_rot[ji] = r;
            a_t[ji] = j;
        } else {
            let p = p as usize;
            let jp = [asset.rest_joints.at(p, 0), asset.rest_joints.at(p, 1), asset.rest_joints.at(p, 2)];
            let rel = [j[0] - jp[0], j[1] - jp[1], j[2] - jp[2]];
            a_rot[ji] = a_rot[p].matmul(&r);
            let moved = crate::math::matvec3(&a_rot[p], rel);
            a_t[ji] = [moved[0] + a_t[p][0], moved[1] + a_t[p][1], moved[2] + a_t[p][2]];
        }
    }
    // Skinning transforms: G_k x = A_rot_k x + (A_t_k - A_rot_k j_k).
    let mut g_t = vec![[S::zero(); 3]; k];
    for ji in 0..k {
        let j = [asset.rest_joints.at(ji, 0), asset.rest_joints.at(ji, 1), asset.rest_joints.at(ji, 2)];
        let rj = crate::math::matvec3(&a_rot[ji], j);
        g_t[ji] = [a_t[ji][0] - rj[0], a_t[ji][1] - rj[1], a_t[ji][2] - rj[2]];
    }
    (a_rot, g_t)
}

/// Template plus shape offsets, (V,3).
pub fn shaped_vertices<S: Scalar>(asset: &BodyModelAsset<S>, beta: &[S]) -> Mat<S> {
    let v = asset.n_vertices();
    let mut out = asset.template_vertices.clone();
    for (b, &coef) in beta.iter().enumerate() {
        let row = asset.shape_basis.row(b);
        for i in 0..3 * v {
            out.data[i] += coef * row[i];
        }
    }
    out
}

/// Full model evaluation: shaped template, blend skinning, joint regression,
/// weak-perspective keypoints.
pub fn forward<S: Scalar>(asset: &BodyModelAsset<S>, params: &BodyParams<S>) -> Result<MeshAndJoints<S>, BodyError> {
    params.validate_against(asset)?;
    let (a_rot, g_t) = joint_transforms(asset, &params.pose_theta);
    let shaped = shaped_vertices(asset, &params.shape_beta);
    let (v, k) = (asset.n_vertices(), asset.n_joints());
    // Blend the 12 affine coefficients per vertex, then apply once; matches
    // the tape path's summation order.
    let mut vertices = Mat::zeros(v, 3);
    for vi in 0..v {
        let mut coeff = [S::zero(); 12];
        for ki in 0..k {
            let w = asset.skinning_weights.at(vi, ki);
            if w == S::zero() {
                continue;
            }
            for r in 0..3 {
                for c in 0..3 {
                    coeff[4 * r + c] += w * a_rot[ki].at(r, c);
                }
                coeff[4 * r + 3] += w * g_t[ki][r];
            }
        }
        let p = shaped.row(vi);
        for r in 0..3 {
            vertices.data[vi * 3 + r] =
                coeff[4 * r] * p[0] + coeff[4 * r + 1] * p[1] + coeff[4 * r + 2] * p[2] + coeff[4 * r + 3];
        }
    }
    let joints3d = asset.joint_regressor.matmul(&vertices);
    let keypoints2d = project(&joints3d, params.camera_pi)?;
    Ok(MeshAndJoints { vertices, joints3d, keypoints2d })
}

/// Weak-perspective projection of (N,3) points: s*(x,y) + (t_x, t_y).
pub fn project<S: Scalar>(points: &Mat<S>, camera_pi: [S; 3]) -> Result<Mat<S>, BodyError> {
    if camera_pi[0] <= S::zero() {
        return Err(BodyError::NonPositiveScale(camera_pi[0].to_f64()));
    }
    assert_eq!(points.cols, 3, "project expects (N,3)");
    let (s, tx, ty) = (camera_pi[0], camera_pi[1], camera_pi[2]);
    let mut out = Mat::zeros(points.rows, 2);
    for i in 0..points.rows {
        out.data[i * 2] = s * points.at(i, 0) + tx;
        out.data[i * 2 + 1] = s * points.at(i, 1) + ty;
    }
    Ok(out)
}

/// Rotate (N,3) points about the vertical (+y) axis.
pub fn rotate_about_vertical<S: Scalar>(points: &Mat<S>, angle: S) -> Mat<S> {
    assert_eq!(points.cols, 3);
    let r = rot_y(angle);
    let mut out = Mat::zeros(points.rows, 3);
    for i in 0..points.rows {
        let p = [points.at(i, 0), points.at(i, 1), points.at(i, 2)];
        let q = crate::math::matvec3(&r, p);
        out.data[i * 3] = q[0];
        out.data[i * 3 + 1] = q[1];
        out.data[i * 3 + 2] = q[2];
    }
    out
}

/// Replace the global-orientation block with R_y(-delta) * R_glob.
///
/// The sign is pinned by the chain property: rotating ground truth by -phi1
/// and then adjusting by (phi2 - phi1) must equal rotating by -phi2.
pub fn rotate_global_orient<S: Scalar>(pose_theta: &[S], delta: S) -> Vec<S> {
    let mut out = pose_theta.to_vec();
    let glob = rodrigues([pose_theta[0], pose_theta[1], pose_theta[2]]);
    let rotated = rot_y(-delta).matmul(&glob);
    let aa = log_map(&rotated);
    out[0] = aa[0];
    out[1] = aa[1];
    out[2] = aa[2];
    out
}

/// Outputs of the tape-side body model.
pub struct TapeMesh {
    pub vertices: Var,
    pub joints3d: Var,
    pub keypoints2d: Var,
}

/// Build the body model forward pass on the tape. `rots` holds one (3,3)
/// rotation node per joint (root first), `beta` is (B,1), `cam` is (3,1).
pub fn forward_on_tape<S: Scalar>(
    t: &mut Tape<S>,
    asset: &BodyModelAsset<S>,
    rots: &[Var],
    beta: Var,
    cam: Var,
) -> TapeMesh {
    let k = asset.n_joints();
    let v = asset.n_vertices();
    assert_eq!(rots.len(), k);
    assert_eq!(t.shape(beta), (asset.n_shape(), 1));
    assert_eq!(t.shape(cam), (3, 1));

    // Shaped template: template + beta^T * basis reshaped to (V,3).
    let basis = t.constant(asset.shape_basis.clone());
    let template = t.constant(asset.template_vertices.clone());
    let beta_row = t.reshape(beta, 1, asset.n_shape());
    let offsets_flat = t.matmul(beta_row, basis);
    let offsets = t.reshape(offsets_flat, v, 3);
    let shaped = t.add(template, offsets);

    // Kinematic chain on the tape.
    let mut a_rot: Vec<Option<Var>> = vec![None; k];
    let mut a_t: Vec<Option<Var>> = vec![None; k];
    for &ji in &asset.topo_order() {
        let j = [asset.rest_joints.at(ji, 0), asset.rest_joints.at(ji, 1), asset.rest_joints.at(ji, 2)];
        let p = asset.parent_of[ji];
        if p < 0 {
            let jc = t.constant(Mat::col_vec(&j));
            a_rot[ji] = Some(rots[ji]);
            a_t[ji] = Some(jc);
        } else {
            let p = p as usize;
            let jp = [asset.rest_joints.at(p, 0), asset.rest_joints.at(p, 1), asset.rest_joints.at(p, 2)];
            let rel = t.constant(Mat::col_vec(&[j[0] - jp[0], j[1] - jp[1], j[2] - jp[2]]));
            let pr = a_rot[p].expect("topo order places parents first");
            let pt = a_t[p].expect("topo order places parents first");
            a_rot[ji] = Some(t.matmul(pr, rots[ji]));
            let moved = t.matmul(pr, rel);
            a_t[ji] = Some(t.add(moved, pt));
        }
    }

    // Assemble (K,12) skinning transforms, blend with the weights, apply.
    let mut rows = Vec::with_capacity(k);
    for ji in 0..k {
        let rot = a_rot[ji].unwrap();
        let at = a_t[ji].unwrap();
        let j = [asset.rest_joints.at(ji, 0), asset.rest_joints.at(ji, 1), asset.rest_joints.at(ji, 2)];
        let jc = t.constant(Mat::col_vec(&j));
        let rj = t.matmul(rot, jc);
        let gt = t.sub(at, rj);
        let r0 = t.slice_rows(rot, 0, 1);
        let r1 = t.slice_rows(rot, 1, 1);
        let r2 = t.slice_rows(rot, 2, 1);
        let t0 = t.slice_rows(gt, 0, 1);
        let t1 = t.slice_rows(gt, 1, 1);
        let t2 = t.slice_rows(gt, 2, 1);
        rows.push(t.concat_cols(&[r0, t0, r1, t1, r2, t2]));
    }
    let g_all = t.concat_rows(&rows);
    let w_skin = t.constant(asset.skinning_weights.clone());
    let blended = t.matmul(w_skin, g_all);
    let vertices = t.affine_apply(blended, shaped);
    let w_reg = t.constant(asset.joint_regressor.clone());
    let joints3d = t.matmul(w_reg, vertices);
    let keypoints2d = t.weak_project(joints3d, cam);
    TapeMesh { vertices, joints3d, keypoints2d }
}

/// Deterministic procedural humanoid used everywhere at desk scale: capsule
/// limbs around an 8-joint tree, a smooth orthonormal shape basis, and a joint
/// regressor built from normalized skinning columns.
pub fn generate_toy_asset(seed: u64) -> BodyModelAsset<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    const ROOT: usize = 0;
    const SPINE: usize = 1;
    const CHEST: usize = 2;
    const HEAD: usize = 3;
    const L_ARM: usize = 4;
    const R_ARM: usize = 5;
    const L_LEG: usize = 6;
    const R_LEG: usize = 7;
    let parent_of: Vec<i64> = vec![-1, 0, 1, 2, 2, 2, 0, 0];
    let rest_joints = Mat::from_vec(
        8,
        3,
        vec![
            0.0, 0.0, 0.0, // root sits exactly at the origin (global pivot)
            0.0, 0.22, 0.0, // spine
            0.0, 0.45, 0.0, // chest
            0.0, 0.66, 0.0, // head (neck pivot)
            -0.20, 0.55, 0.0, // left shoulder
            0.20, 0.55, 0.0, // right shoulder
            -0.10, -0.02, 0.0, // left hip
            0.10, -0.02, 0.0, // right hip
        ],
    );

    // One capsule per body part: (p0, p1, radius, rings, segments, primary
    // joint, blend joint, blend at distal end instead of proximal).
    struct Capsule {
        p0: [f64; 3],
        p1: [f64; 3],
        r: f64,
        rings: usize,
        segs: usize,
        joint: usize,
        blend_joint: usize,
        blend_distal: bool,
    }
    let capsules = [
        Capsule { p0: [0.0, -0.06, 0.0], p1: [0.0, 0.20, 0.0], r: 0.14, rings: 4, segs: 8, joint: ROOT, blend_joint: SPINE, blend_distal: true },
        Capsule { p0: [0.0, 0.22, 0.0], p1: [0.0, 0.44, 0.0], r: 0.13, rings: 3, segs: 8, joint: SPINE, blend_joint: ROOT, blend_distal: false },
        Capsule { p0: [0.0, 0.46, 0.0], p1: [0.0, 0.64, 0.0], r: 0.12, rings: 3, segs: 8, joint: CHEST, blend_joint: SPINE, blend_distal: false },
        Capsule { p0: [0.0, 0.68, 0.0], p1: [0.0, 0.78, 0.0], r: 0.07, rings: 2, segs: 8, joint: HEAD, blend_joint: CHEST, blend_distal: false },
        Capsule { p0: [-0.22, 0.55, 0.0], p1: [-0.58, 0.55, 0.0], r: 0.045, rings: 3, segs: 6, joint: L_ARM, blend_joint: CHEST, blend_distal: false },
        Capsule { p0: [0.22, 0.55, 0.0], p1: [0.58, 0.55, 0.0], r: 0.045, rings: 3, segs: 6, joint: R_ARM, blend_joint: CHEST, blend_distal: false },
        Capsule { p0: [-0.10, -0.06, 0.0], p1: [-0.10, -0.79, 0.0], r: 0.06, rings: 4, segs: 8, joint: L_LEG, blend_joint: ROOT, blend_distal: false },
        Capsule { p0: [0.10, -0.06, 0.0], p1: [0.10, -0.79, 0.0], r: 0.06, rings: 4, segs: 8, joint: R_LEG, blend_joint: ROOT, blend_distal: false },
    ];

    let mut verts: Vec<[f64; 3]> = Vec::new();
    let mut weights: Vec<(usize, usize, f64)> = Vec::new(); // (primary, blend, blend weight)
    let mut faces: Vec<[u32; 3]> = Vec::new();

    for cap in &capsules {
        let axis = [cap.p1[0] - cap.p0[0], cap.p1[1] - cap.p0[1], cap.p1[2] - cap.p0[2]];
        let len = crate::math::norm3(axis);
        let a = [axis[0] / len, axis[1] / len, axis[2] / len];
        // Any two unit vectors perpendicular to the axis.
        let pick = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let mut u = [
            a[1] * pick[2] - a[2] * pick[1],
            a[2] * pick[0] - a[0] * pick[2],
            a[0] * pick[1] - a[1] * pick[0],
        ];
        let un = crate::math::norm3(u);
        u = [u[0] / un, u[1] / un, u[2] / un];
        let w = [a[1] * u[2] - a[2] * u[1], a[2] * u[0] - a[0] * u[2], a[0] * u[1] - a[1] * u[0]];

        // Blend weight toward the secondary joint, quantized to 1/64 so each
        // vertex's weights sum to exactly 1 in floating point (the rest-pose
        // identity then reproduces the template bit-for-bit).
        let blend_at = |s: f64| -> f64 {
            let raw = if cap.blend_distal { (s - 0.65) / 0.35 } else { (0.35 - s) / 0.35 };
            let clamped = raw.clamp(0.0, 1.0) * 0.5; // secondary influence peaks at half
            (clamped * 64.0).round() / 64.0
        };

        let base = verts.len() as u32;
        for ring in 0..cap.rings {
            let s = ring as f64 / (cap.rings - 1) as f64;
            let c = [
                cap.p0[0] + axis[0] * s,
                cap.p0[1] + axis[1] * s,
                cap.p0[2] + axis[2] * s,
            ];
            for seg in 0..cap.segs {
                let ang = 2.0 * std::f64::consts::PI * seg as f64 / cap.segs as f64;
                let (cs, sn) = (ang.cos(), ang.sin());
                verts.push([
                    c[0] + cap.r * (cs * u[0] + sn * w[0]),
                    c[1] + cap.r * (cs * u[1] + sn * w[1]),
                    c[2] + cap.r * (cs * u[2] + sn * w[2]),
                ]);
                weights.push((cap.joint, cap.blend_joint, blend_at(s)));
            }
        }
        for ring in 0..cap.rings - 1 {
            for seg in 0..cap.segs {
                let s0 = base + (ring * cap.segs + seg) as u32;
                let s1 = base + (ring * cap.segs + (seg + 1) % cap.segs) as u32;
                let s2 = s0 + cap.segs as u32;
                let s3 = s1 + cap.segs as u32;
                faces.push([s0, s1, s3]);
                faces.push([s0, s3, s2]);
            }
        }
        // End caps: apex vertices just beyond each end.
        let apex0 = [cap.p0[0] - a[0] * cap.r, cap.p0[1] - a[1] * cap.r, cap.p0[2] - a[2] * cap.r];
        let apex1 = [cap.p1[0] + a[0] * cap.r, cap.p1[1] + a[1] * cap.r, cap.p1[2] + a[2] * cap.r];
        let i0 = verts.len() as u32;
        verts.push(apex0);
        weights.push((cap.joint, cap.blend_joint, blend_at(0.0)));
        let i1 = verts.len() as u32;
        verts.push(apex1);
        weights.push((cap.joint, cap.blend_joint, blend_at(1.0)));
        for seg in 0..cap.segs {
            let s0 = base + seg as u32;
            let s1 = base + ((seg + 1) % cap.segs) as u32;
            faces.push([i0, s0, s1]);
            let last = base + ((cap.rings - 1) * cap.segs) as u32;
            let e0 = last + seg as u32;
            let e1 = last + ((seg + 1) % cap.segs) as u32;
            faces.push([i1, e0, e1]);
        }
    }

    let v = verts.len();
    let k = parent_of.len();
    let template_vertices = Mat::from_vec(v, 3, verts.iter().flat_map(|p| p.iter().copied()).collect());
    let mut skinning_weights = Mat::zeros(v, k);
    for (vi, &(j, bj, bw)) in weights.iter().enumerate() {
        *skinning_weights.at_mut(vi, j) += 1.0 - bw;
        *skinning_weights.at_mut(vi, bj) += bw;
    }

    // Joint regressor: normalized skinning columns (a stable linear landmark
    // per joint; rows are non-negative and sum to one by construction).
    let mut joint_regressor = Mat::zeros(k, v);
    for j in 0..k {
        let total: f64 = (0..v).map(|vi| skinning_weights.at(vi, j)).sum();
        for vi in 0..v {
            *joint_regressor.at_mut(j, vi) = skinning_weights.at(vi, j) / total;
        }
    }

    // Shape basis: mode 0 inflates horizontally; the rest are smooth random
    // height-frequency fields. Orthonormalized, then scaled to a common
    // amplitude so unit coefficients displace the surface visibly.
    let n_shape = 10;
    let amplitude = 0.35;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_shape);
    let mut mode0 = vec![0.0; 3 * v];
    for (vi, p) in verts.iter().enumerate() {
        mode0[3 * vi] = p[0];
        mode0[3 * vi + 2] = p[2];
    }
    basis.push(mode0);
    for _ in 1..n_shape {
        let mut mode = vec![0.0; 3 * v];
        let freq: [f64; 3] = [rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0)];
        let phase: [f64; 3] = [
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        let amp: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        for (vi, p) in verts.iter().enumerate() {
            for ax in 0..3 {
                mode[3 * vi + ax] = amp[ax] * (freq[ax] * p[1] + phase[ax]).sin();
            }
        }
        basis.push(mode);
    }
    // Gram-Schmidt over the flattened displacement fields.
    for i in 0..n_shape {
        for jprev in 0..i {
            let dot: f64 = basis[i].iter().zip(&basis[jprev]).map(|(a, b)| a * b).sum();
            let (head, tail) = basis.split_at_mut(i);
            let prev = &head[jprev];
            for (x, &p) in tail[0].iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm: f64 = basis[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-8, "degenerate shape mode {i}");
        for x in basis[i].iter_mut() {
            *x = *x / norm * amplitude;
        }
    }
    let shape_basis = Mat::from_vec(n_shape, 3 * v, basis.into_iter().flatten().collect());

    let asset = BodyModelAsset {
        format_version: ASSET_FORMAT_VERSION,
        template_vertices,
        shape_basis,
        skinning_weights,
        parent_of,
        rest_joints,
        joint_regressor,
        faces,
    };
    asset.validate().expect("generated asset must satisfy its own invariants");
    asset
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> BodyModelAsset<f64> {
        generate_toy_asset(7)
    }

    fn random_params(asset: &BodyModelAsset<f64>, rng: &mut ChaCha8Rng) -> BodyParams<f64> {
        BodyParams {
            pose_theta: (0..3 * asset.n_joints()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            shape_beta: (0..asset.n_shape()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            camera_pi: [rng.gen_range(0.5..1.5), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)],
        }
    }

    #[test]
    fn toy_asset_is_valid_and_sized() {
        let a = toy();
        assert_eq!(a.n_joints(), 8);
        assert_eq!(a.n_shape(), 10);
        assert_eq!(a.n_regressed(), 8);
        assert!((150..=260).contains(&a.n_vertices()), "V = {}", a.n_vertices());
        assert!(!a.faces.is_empty());
        // Root pivot at the origin: global rotation must act about the origin.
        assert_eq!(a.rest_joints.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn toy_asset_is_deterministic() {
        let a = generate_toy_asset(7);
        let b = generate_toy_asset(7);
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
        assert_eq!(asset_hash(&a), asset_hash(&b));
        let c = generate_toy_asset(8);
        assert_ne!(asset_hash(&a), asset_hash(&c));
    }

    #[test]
    fn rest_pose_returns_template_exactly() {
        let a = toy();
        let p = BodyParams::mean(a.n_joints(), a.n_shape());
        let out = forward(&a, &p).unwrap();
        assert_eq!(out.vertices.data, a.template_vertices.data, "rest pose must be bit-exact");
    }

    #[test]
    fn global_rotation_is_rigid() {
        let a = toy();
        let mut p = BodyParams::mean(a.n_joints(), a.n_shape());
        p.pose_theta[0] = 0.4;
        p.pose_theta[1] = -0.8;
        p.pose_theta[2] = 0.2;
        let out = forward(&a, &p).unwrap();
        let r = rodrigues([0.4, -0.8, 0.2]);
        for vi in 0..a.n_vertices() {
            let x = [a.template_vertices.at(vi, 0), a.template_vertices.at(vi, 1), a.template_vertices.at(vi, 2)];
            let want = crate::math::matvec3(&r, x);
            for ax in 0..3 {
                assert!((out.vertices.at(vi, ax) - want[ax]).abs() < 1e-9);
            }
        }
        // Pairwise distances preserved (isometry).
        let t = &a.template_vertices;
        for (i, j) in [(0usize, 50usize), (10, 100), (30, 150)] {
            let d0 = ((t.at(i, 0) - t.at(j, 0)).powi(2)
                + (t.at(i, 1) - t.at(j, 1)).powi(2)
                + (t.at(i, 2) - t.at(j, 2)).powi(2))
            .sqrt();
            let d1 = ((out.vertices.at(i, 0) - out.vertices.at(j, 0)).powi(2)
                + (out.vertices.at(i, 1) - out.vertices.at(j, 1)).powi(2)
                + (out.vertices.at(i, 2) - out.vertices.at(j, 2)).powi(2))
            .sqrt();
            assert!((d0 - d1).abs() < 1e-6);
        }
    }

    #[test]
    fn lbs_matches_brute_force_oracle() {
        // Oracle: per vertex, sum_k w_vk * (G_k x) applied transform-by-
        // transform, a different summation order than the implementation.
        let a = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let p = random_params(&a, &mut rng);
            let out = forward(&a, &p).unwrap();
            let (a_rot, g_t) = joint_transforms(&a, &p.pose_theta);
            let shaped = shaped_vertices(&a, &p.shape_beta);
            for vi in 0..a.n_vertices() {
                let x = [shaped.at(vi, 0), shaped.at(vi, 1), shaped.at(vi, 2)];
                let mut want = [0.0f64; 3];
                for ki in 0..a.n_joints() {
                    let w = a.skinning_weights.at(vi, ki);
                    if w == 0.0 {
                        continue;
                    }
                    let moved = crate::math::matvec3(&a_rot[ki], x);
                    for ax in 0..3 {
                        want[ax] += w * (moved[ax] + g_t[ki][ax]);
                    }
                }
                for ax in 0..3 {
                    assert!(
                        (out.vertices.at(vi, ax) - want[ax]).abs() < 1e-6,
                        "vertex {vi} axis {ax}"
                    );
                }
            }
        }
    }

    #[test]
    fn joints_equal_regressed_vertices() {
        let a = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let p = random_params(&a, &mut rng);
            let out = forward(&a, &p).unwrap();
            let want = a.joint_regressor.matmul(&out.vertices);
            for i in 0..want.len() {
                assert!((out.joints3d.data[i] - want.data[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shape_offsets_linear_in_beta() {
        let a = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let b1: Vec<f64> = (0..a.n_shape()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = (0..a.n_shape()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| x + y).collect();
        let mk = |beta: &Vec<f64>| BodyParams {
            pose_theta: vec![0.0; 3 * a.n_joints()],
            shape_beta: beta.clone(),
            camera_pi: [1.0, 0.0, 0.0],
        };
        let v1 = forward(&a, &mk(&b1)).unwrap().vertices;
        let v2 = forward(&a, &mk(&b2)).unwrap().vertices;
        let vs = forward(&a, &mk(&sum)).unwrap().vertices;
        let t = &a.template_vertices;
        for i in 0..vs.len() {
            let lhs = vs.data[i] - t.data[i];
            let rhs = (v1.data[i] - t.data[i]) + (v2.data[i] - t.data[i]);
            assert!((lhs - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn project_examples_and_errors() {
        let pts: Mat<f64> = Mat::from_vec(2, 3, vec![0.2, -0.3, 5.0, 0.5, 0.5, 1.0]);
        let out = project(&pts, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(&out.data[0..2], &[0.2, -0.3]);
        let out2 = project(&pts, [2.0, 0.1, 0.1]).unwrap();
        assert!((out2.data[2] - 1.1).abs() < 1e-12 && (out2.data[3] - 1.1).abs() < 1e-12);
        assert!(project(&pts, [0.0, 0.0, 0.0]).is_err());
        assert!(project(&pts, [-1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn rotate_about_vertical_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let pts = Mat::from_fn(20, 3, |_, _| rng.gen_range(-1.0..1.0));
        let same = rotate_about_vertical(&pts, 0.0);
        assert_eq!(same.data, pts.data);
        let half = rotate_about_vertical(&Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]), std::f64::consts::PI);
        assert!((half.data[0] + 1.0).abs() < 1e-12 && (half.data[1] - 2.0).abs() < 1e-12 && (half.data[2] + 3.0).abs() < 1e-12);
        for _ in 0..50 {
            let p1: f64 = rng.gen_range(-6.0..6.0);
            let p2: f64 = rng.gen_range(-6.0..6.0);
            let a = rotate_about_vertical(&rotate_about_vertical(&pts, p1), p2);
            let b = rotate_about_vertical(&pts, p1 + p2);
            for i in 0..a.len() {
                assert!((a.data[i] - b.data[i]).abs() < 1e-8);
            }
            // y preserved, norms preserved.
            let r = rotate_about_vertical(&pts, p1);
            for i in 0..pts.rows {
                assert!((r.at(i, 1) - pts.at(i, 1)).abs() < 1e-12);
                let n0 = (pts.at(i, 0).powi(2) + pts.at(i, 1).powi(2) + pts.at(i, 2).powi(2)).sqrt();
                let n1 = (r.at(i, 0).powi(2) + r.at(i, 1).powi(2) + r.at(i, 2).powi(2)).sqrt();
                assert!((n0 - n1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotate_global_orient_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let theta: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let unchanged = rotate_global_orient(&theta, 0.0);
        for i in 0..theta.len() {
            assert!((unchanged[i] - theta[i]).abs() < 1e-9);
        }
        // Identity base: the global block becomes axis-angle of R_y(-pi/2).
        let mut zero = theta.clone();
        zero[0] = 0.0;
        zero[1] = 0.0;
        zero[2] = 0.0;
        let out = rotate_global_orient(&zero, std::f64::consts::FRAC_PI_2);
        let want = log_map(&rot_y(-std::f64::consts::FRAC_PI_2));
        for i in 0..3 {
            assert!((out[i] - want[i]).abs() < 1e-9, "{:?} vs {:?}", &out[..3], want);
        }
        // Chain property: rotate by -p1 then adjust by (p2 - p1) == rotate by -p2.
        for _ in 0..100 {
            let th: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let p2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let via = rotate_global_orient(&rotate_global_orient(&th, p1), p2 - p1);
            let direct = rotate_global_orient(&th, p2);
            let r_via = rodrigues([via[0], via[1], via[2]]);
            let r_direct = rodrigues([direct[0], direct[1], direct[2]]);
            for i in 0..9 {
                assert!((r_via.data[i] - r_direct.data[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let a = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..10 {
            let p = random_params(&a, &mut rng);
            let plain = forward(&a, &p).unwrap();
            let mut t = Tape::new();
            let rots: Vec<Var> = (0..a.n_joints())
                .map(|k| {
                    let r = rodrigues([p.pose_theta[3 * k], p.pose_theta[3 * k + 1], p.pose_theta[3 * k + 2]]);
                    t.constant(r)
                })
                .collect();
            let beta = t.constant(Mat::col_vec(&p.shape_beta));
            let cam = t.constant(Mat::col_vec(&p.camera_pi));
            let mesh = forward_on_tape(&mut t, &a, &rots, beta, cam);
            let tv = t.value(mesh.vertices);
            for i in 0..tv.len() {
                assert!((tv.data[i] - plain.vertices.data[i]).abs() < 1e-9);
            }
            let tk = t.value(mesh.keypoints2d);
            for i in 0..tk.len() {
                assert!((tk.data[i] - plain.keypoints2d.data[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn asset_roundtrip_and_validation_failures() {
        let a = toy();
        let dir = std::env::temp_dir().join("fieldpose_asset_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("asset.json");
        a.save(&path).unwrap();
        let b = BodyModelAsset::<f64>::load(&path).unwrap();
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());

        let mut bad = a.clone();
        *bad.skinning_weights.at_mut(0, 0) += 0.5;
        assert!(bad.validate().is_err());

        let mut bad = a.clone();
        bad.parent_of[0] = 1; // two joints in a cycle, no root reachable
        bad.parent_of[1] = 0;
        assert!(bad.validate().is_err());

        let mut bad = a.clone();
        *bad.joint_regressor.at_mut(0, 0) += 0.1;
        assert!(bad.validate().is_err());

        let mut bad = a.clone();
        bad.format_version = 99;
        assert!(matches!(bad.validate(), Err(BodyError::Version(99))));
    }

    #[test]
    fn forward_rejects_mismatched_params() {
        let a = toy();
        let mut p = BodyParams::mean(a.n_joints(), a.n_shape());
        p.pose_theta.pop();
        assert!(forward(&a, &p).is_err());
        let mut p2 = BodyParams::mean(a.n_joints(), a.n_shape());
        p2.camera_pi[0] = -1.0;
        assert!(forward(&a, &p2).is_err());
    }
}
