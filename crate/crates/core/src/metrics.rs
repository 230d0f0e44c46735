//! Evaluation metrics: root-aligned mean per-joint position error, its
//! similarity-aligned variant (optimal scale/rotation/translation via SVD),
//! mean per-vertex error, and the shape-stability statistic measured by
//! sweeping the imagined azimuth.

use crate::mat::Mat;
use nalgebra::{Matrix3, Vector3};

/// Root-aligned mean Euclidean joint error: both clouds are translated so
/// the root joint sits at the origin first.
pub fn mpjpe(pred: &Mat<f64>, gt: &Mat<f64>, root_index: usize) -> f64 {
    assert_eq!(pred.rows, gt.rows);
    assert_eq!(pred.cols, 3);
    assert_eq!(gt.cols, 3);
    assert!(root_index < pred.rows);
    let pr = [pred.at(root_index, 0), pred.at(root_index, 1), pred.at(root_index, 2)];
    let gr = [gt.at(root_index, 0), gt.at(root_index, 1), gt.at(root_index, 2)];
    let mut total = 0.0;
    for i in 0..pred.rows {
        let mut d2 = 0.0;
        for ax in 0..3 {
            let d = (pred.at(i, ax) - pr[ax]) - (gt.at(i, ax) - gr[ax]);
            d2 += d * d;
        }
        total += d2.sqrt();
    }
    total / pred.rows as f64
}

/// Mean per-vertex Euclidean error with no alignment.
pub fn pve(pred: &Mat<f64>, gt: &Mat<f64>) -> f64 {
    assert_eq!(pred.rows, gt.rows);
    assert_eq!(pred.cols, 3);
    assert_eq!(gt.cols, 3);
    let mut total = 0.0;
    for i in 0..pred.rows {
        let mut d2 = 0.0;
        for ax in 0..3 {
            let d = pred.at(i, ax) - gt.at(i, ax);
            d2 += d * d;
        }
        total += d2.sqrt();
    }
    total / pred.rows as f64
}

#[derive(Clone, Debug)]
pub struct ProcrustesResult {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// True when the point cloud cannot pin the transform down (coincident
    /// or collinear points); the returned transform is then best-effort.
    pub degenerate: bool,
}

/// Least-squares similarity transform aligning `pred` onto `gt`:
/// minimizes sum_i || s R p_i + t - g_i ||^2.
pub fn procrustes_align(pred: &Mat<f64>, gt: &Mat<f64>) -> ProcrustesResult {
    assert_eq!(pred.rows, gt.rows);
    assert!(pred.rows >= 3, "need at least 3 points to align");
    let n = pred.rows as f64;
    let mut pc = Vector3::zeros();
    let mut gc = Vector3::zeros();
    for i in 0..pred.rows {
        pc += Vector3::new(pred.at(i, 0), pred.at(i, 1), pred.at(i, 2));
        gc += Vector3::new(gt.at(i, 0), gt.at(i, 1), gt.at(i, 2));
    }
    pc /= n;
    gc /= n;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for i in 0..pred.rows {
        let p = Vector3::new(pred.at(i, 0), pred.at(i, 1), pred.at(i, 2)) - pc;
        let g = Vector3::new(gt.at(i, 0), gt.at(i, 1), gt.at(i, 2)) - gc;
        cov += g * p.transpose();
        var_p += p.norm_squared();
    }
    cov /= n;
    var_p /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    // Rank < 2 (collinear) leaves in-plane rotation free; zero spread leaves
    // everything free.
    let degenerate = var_p < 1e-12 || svd.singular_values[1] < 1e-12;
    let trace = svd.singular_values.dot(&s_diag);
    let scale = if var_p > 1e-12 { trace / var_p } else { 1.0 };
    let translation = gc - rotation * pc * scale;
    ProcrustesResult { scale, rotation, translation, degenerate }
}

/// MPJPE after the optimal similarity alignment, plus a degeneracy flag.
pub fn pa_mpjpe(pred: &Mat<f64>, gt: &Mat<f64>) -> (f64, bool) {
    let align = procrustes_align(pred, gt);
    let mut total = 0.0;
    for i in 0..pred.rows {
        let p = Vector3::new(pred.at(i, 0), pred.at(i, 1), pred.at(i, 2));
        let g = Vector3::new(gt.at(i, 0), gt.at(i, 1), gt.at(i, 2));
        let aligned = align.rotation * p * align.scale + align.translation;
        total += (aligned - g).norm();
    }
    (total / pred.rows as f64, align.degenerate)
}

/// Shape-view entanglement from an azimuth sweep: the per-coefficient
/// population standard deviations across the sweep, and their mean.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EsvReport {
    /// One sigma per shape coefficient, in the coefficient's own units.
    pub per_coefficient_sigma: Vec<f64>,
    /// Mean of the per-coefficient sigmas.
    pub esv: f64,
}

/// Spread of the inferred shape coefficients across rendering viewpoints.
/// Each row of `betas_per_view` is the shape vector regressed at one
/// azimuth; the score is the population standard deviation of each
/// coefficient, averaged over coefficients. A view-consistent model
/// scores 0.
pub fn esv_report_from_sweep(betas_per_view: &[Vec<f64>]) -> EsvReport {
    assert!(!betas_per_view.is_empty());
    let dims = betas_per_view[0].len();
    assert!(dims > 0 && betas_per_view.iter().all(|b| b.len() == dims));
    let n = betas_per_view.len() as f64;
    let per_coefficient_sigma: Vec<f64> = (0..dims)
        .map(|d| {
            let mean: f64 = betas_per_view.iter().map(|b| b[d]).sum::<f64>() / n;
            let var: f64 =
                betas_per_view.iter().map(|b| (b[d] - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect();
    let esv = per_coefficient_sigma.iter().sum::<f64>() / dims as f64;
    EsvReport { per_coefficient_sigma, esv }
}

/// Scalar form of [`esv_report_from_sweep`].
pub fn esv_from_sweep(betas_per_view: &[Vec<f64>]) -> f64 {
    esv_report_from_sweep(betas_per_view).esv
}
