//! Test-time procedures. Evaluation always runs the canonical view with
//! deterministic depth sampling and a graph that structurally excludes the
//! silhouette decoder; the azimuth sweep measures how stable the inferred
//! shape coefficients are under a change of rendering viewpoint; the
//! benchmark times inference across rendering resolutions.

use crate::body_model::{forward, BodyModelAsset, BodyParams};
use crate::camera::SampleMode;
use crate::config::RunConfig;
use crate::mat::Mat;
use crate::metrics::{esv_report_from_sweep, mpjpe, pa_mpjpe, pve, EsvReport};
use crate::model::Model;
use crate::regressor::state_to_params;
use crate::silhouette::decode_silhouette;
use crate::synth::LabeledExample;
use crate::tape::Tape;
use rand::rngs::mock::StepRng;
use serde::Serialize;

/// Mean reconstruction errors over the 3d-labeled slice of a dataset, in
/// model units (the toy body is roughly human-scaled, so ~meters).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EvalReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    /// Examples that carried 3d labels and entered the means.
    pub n_examples: usize,
    /// Alignments flagged as degenerate (near-singular joint clouds);
    /// they still enter the mean.
    pub n_degenerate: usize,
}

/// Canonical-view evaluation. Only 3d-labeled examples contribute; ground
/// truth vertices are recomputed from the stored pose and shape.
pub fn evaluate(model: &Model<f64>, asset: &BodyModelAsset<f64>, examples: &[LabeledExample]) -> EvalReport {
    let mut sum_mpjpe = 0.0;
    let mut sum_pa = 0.0;
    let mut sum_pve = 0.0;
    let mut n = 0usize;
    let mut n_degenerate = 0usize;
    for ex in examples {
        let Some(gt3) = &ex.gt3d else { continue };
        let out = model.infer(asset, &ex.image);
        sum_mpjpe += mpjpe(&out.joints3d, &gt3.joints3d, 0);
        let (pa, degenerate) = pa_mpjpe(&out.joints3d, &gt3.joints3d);
        sum_pa += pa;
        if degenerate {
            n_degenerate += 1;
        }
        let gt_params = BodyParams {
            pose_theta: gt3.pose_theta.clone(),
            shape_beta: gt3.shape_beta.clone(),
            camera_pi: [1.0, 0.0, 0.0],
        };
        let gt_mesh = forward(asset, &gt_params).expect("stored labels are valid body parameters");
        sum_pve += pve(&out.vertices, &gt_mesh.vertices);
        n += 1;
    }
    assert!(n > 0, "evaluation needs at least one 3d-labeled example");
    let inv = 1.0 / n as f64;
    EvalReport {
        mpjpe: sum_mpjpe * inv,
        pa_mpjpe: sum_pa * inv,
        pve: sum_pve * inv,
        n_examples: n,
        n_degenerate,
    }
}

/// Regress the shape coefficients from a rendering of `latent` at azimuth
/// `phi`. Shape is view-independent by construction, so any spread across
/// azimuths measures how entangled the inferred shape is with the
/// viewpoint.
fn shape_at(
    model: &Model<f64>,
    asset: &BodyModelAsset<f64>,
    latent_value: &Mat<f64>,
    phi: f64,
) -> Vec<f64> {
    let mut t = Tape::<f64>::new();
    let vars = model.register_for_inference(&mut t);
    let latent = t.constant(latent_value.clone());
    // Deterministic sampling; the generator is never consulted.
    let mut norng = StepRng::new(0, 1);
    let samples = model.sample_view(phi, SampleMode::Deterministic, &mut norng);
    let (body, _map, _mesh) = model.predict_view(&mut t, &vars, asset, latent, &samples);
    state_to_params(t.value(body.state), model.n_joints, model.n_shape).shape_beta
}

/// Shape-view entanglement for one image: render the same latent from every
/// azimuth on a regular grid, regress the shape coefficients, and report the
/// per-coefficient population spread. A perfectly view-consistent model
/// scores 0.
pub fn esv_image(
    model: &Model<f64>,
    asset: &BodyModelAsset<f64>,
    image: &Mat<f64>,
    step_deg: f64,
) -> EsvReport {
    assert!(step_deg > 0.0 && step_deg <= 120.0, "sweep step must be in (0, 120] degrees");
    let n_steps = (360.0 / step_deg).round() as usize;
    // Encode once; the latent does not depend on the azimuth.
    let mut t = Tape::<f64>::new();
    let vars = model.register_for_inference(&mut t);
    let latent = model.latent(&mut t, &vars, image);
    let latent_value = t.value(latent).clone();

    let sweep: Vec<Vec<f64>> = (0..n_steps)
        .map(|i| {
            let phi = (i as f64) * step_deg * std::f64::consts::PI / 180.0;
            shape_at(model, asset, &latent_value, phi)
        })
        .collect();
    esv_report_from_sweep(&sweep)
}

/// Mean shape-view entanglement over a set of images: per-coefficient
/// sigmas are averaged image-wise, so the aggregate score is both the mean
/// of the per-image scores and the mean of the aggregated sigmas.
pub fn esv_dataset(
    model: &Model<f64>,
    asset: &BodyModelAsset<f64>,
    images: &[Mat<f64>],
    step_deg: f64,
) -> EsvReport {
    assert!(!images.is_empty());
    let reports: Vec<EsvReport> =
        images.iter().map(|image| esv_image(model, asset, image, step_deg)).collect();
    let dims = reports[0].per_coefficient_sigma.len();
    let inv = 1.0 / reports.len() as f64;
    let per_coefficient_sigma: Vec<f64> = (0..dims)
        .map(|d| reports.iter().map(|r| r.per_coefficient_sigma[d]).sum::<f64>() * inv)
        .collect();
    let esv = reports.iter().map(|r| r.esv).sum::<f64>() * inv;
    EsvReport { per_coefficient_sigma, esv }
}

/// Scalar form of [`esv_dataset`].
pub fn esv(model: &Model<f64>, asset: &BodyModelAsset<f64>, images: &[Mat<f64>], step_deg: f64) -> f64 {
    esv_dataset(model, asset, images, step_deg).esv
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchRow {
    pub feature_map_res: usize,
    pub n_iters: usize,
    pub seconds: f64,
    pub fps: f64,
}

/// Inference throughput at several rendering resolutions. Each row times a
/// freshly built model whose configuration differs only in the rendered-map
/// side; the image and every other dimension stay fixed.
pub fn bench(
    base: &RunConfig,
    asset: &BodyModelAsset<f64>,
    image: &Mat<f64>,
    res_list: &[usize],
    n_iters: usize,
    warmup: usize,
) -> Vec<BenchRow> {
    assert!(n_iters > 0);
    res_list
        .iter()
        .map(|&res| {
            let mut cfg = base.clone();
            cfg.model.feature_map_res = res;
            // Resolution alone is being timed; guidance never runs at test
            // time, so its map-size constraint does not apply here.
            cfg.losses.silhouette = false;
            cfg.validate().expect("bench configuration");
            let model = Model::<f64>::init(&cfg, asset.n_joints(), asset.n_shape());
            for _ in 0..warmup {
                std::hint::black_box(model.infer(asset, image));
            }
            let start = std::time::Instant::now();
            for _ in 0..n_iters {
                std::hint::black_box(model.infer(asset, image));
            }
            let seconds = start.elapsed().as_secs_f64();
            BenchRow { feature_map_res: res, n_iters, seconds, fps: n_iters as f64 / seconds }
        })
        .collect()
}

/// Decode the silhouette the guidance branch predicts for `image` rendered
/// at azimuth `phi`. Only available on models trained with the guidance
/// branch; returns the decoded (res, res) soft mask.
pub fn decoded_silhouette_at(
    model: &Model<f64>,
    asset: &BodyModelAsset<f64>,
    image: &Mat<f64>,
    phi: f64,
) -> Result<Mat<f64>, String> {
    let decoder = model.decoder.as_ref().ok_or_else(|| {
        "this model has no silhouette decoder (it was not trained with guidance)".to_string()
    })?;
    let mut t = Tape::<f64>::new();
    let vars = model.register(&mut t);
    let dvars = vars.decoder.as_ref().expect("decoder weights registered");
    let latent = model.latent(&mut t, &vars, image);
    let mut norng = StepRng::new(0, 1);
    let samples = model.sample_view(phi, SampleMode::Deterministic, &mut norng);
    let (_body, map, _mesh) = model.predict_view(&mut t, &vars, asset, latent, &samples);
    let decoded = decode_silhouette(&mut t, decoder, dvars, map)?;
    let flat = t.value(decoded);
    let side = (flat.cols as f64).sqrt() as usize;
    Ok(Mat::from_vec(side, side, flat.data.clone()))
}
