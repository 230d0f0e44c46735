//! Command-line driver: dataset generation, training, evaluation, view
//! rendering, azimuth-sweep stability, and resolution benchmarking.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fieldpose::body_model::{asset_hash, forward, generate_toy_asset, BodyModelAsset, BodyParams};
use fieldpose::checkpoint::{file_hash, load_checkpoint};
use fieldpose::config::RunConfig;
use fieldpose::evaluate::{bench, decoded_silhouette_at, esv_dataset, evaluate};
use fieldpose::mat::Mat;
use fieldpose::model::Model;
use fieldpose::silhouette::{silhouette_at_azimuth, SILHOUETTE_RES};
use fieldpose::synth::{generate_dataset, Dataset};
use fieldpose::train::train;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fieldpose", version, about = "Single-image body recovery via a latent-conditioned feature field")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the body asset plus train/eval datasets into a directory.
    GenData {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Size of the held-out evaluation set (fully 3d-labeled).
        #[arg(long, default_value_t = 64)]
        eval_examples: usize,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory produced by gen-data.
        #[arg(long)]
        data_dir: PathBuf,
        /// Where checkpoints and the step log go.
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report reconstruction metrics on the held-out set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Emit the report as a JSON object instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Run inference at chosen viewing directions and export each view's
    /// mesh and silhouettes.
    RenderViews {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Index into the evaluation set.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated azimuths in degrees.
        #[arg(long, default_value = "0,90,180,270")]
        angles: String,
    },
    /// Azimuth-sweep stability of the inferred shape (lower is better).
    Esv {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Sweep step in degrees.
        #[arg(long, default_value_t = 10.0)]
        step_deg: f64,
        /// How many evaluation images to average over.
        #[arg(long, default_value_t = 4)]
        n_images: usize,
        /// Where to write the JSON report (omit to skip the file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inference throughput across rendered-map resolutions.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated rendered-map sides.
        #[arg(long, default_value = "1,2,4")]
        res: String,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { config, out_dir, seed, eval_examples } => gen_data(&config, &out_dir, seed, eval_examples),
        Cmd::Train { config, data_dir, out_dir, seed } => cmd_train(&config, &data_dir, &out_dir, seed),
        Cmd::Eval { checkpoint, data_dir, json } => cmd_eval(&checkpoint, &data_dir, json),
        Cmd::RenderViews { checkpoint, data_dir, index, out_dir, angles } => {
            cmd_render_views(&checkpoint, &data_dir, index, &out_dir, &angles)
        }
        Cmd::Esv { checkpoint, data_dir, step_deg, n_images, out } => {
            cmd_esv(&checkpoint, &data_dir, step_deg, n_images, out.as_deref())
        }
        Cmd::Bench { config, res, iters, warmup, seed } => cmd_bench(&config, &res, iters, warmup, seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(data_dir: &Path, name: &str) -> Result<(BodyModelAsset<f64>, Dataset)> {
    let asset = BodyModelAsset::load(&data_dir.join("asset.json"))
        .with_context(|| format!("loading {}/asset.json", data_dir.display()))?;
    let ds = Dataset::load(&data_dir.join(name)).with_context(|| format!("loading {}/{name}", data_dir.display()))?;
    let have = asset_hash(&asset);
    if ds.manifest.asset_hash != have {
        bail!(
            "dataset {} was generated against a different body asset (manifest {}, directory {have})",
            name,
            ds.manifest.asset_hash
        );
    }
    Ok((asset, ds))
}

fn gen_data(config: &Path, out_dir: &Path, seed: Option<u64>, eval_examples: usize) -> Result<()> {
    let cfg = load_config(config, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let asset = generate_toy_asset(cfg.seed);
    asset.save(&out_dir.join("asset.json"))?;

    let train_ds = generate_dataset(&asset, &cfg.camera, &cfg.dataset, cfg.model.image_size, cfg.seed);
    train_ds.save(&out_dir.join("train.fpds"))?;

    let mut eval_cfg = cfg.dataset.clone();
    eval_cfg.n_examples = eval_examples;
    eval_cfg.fraction_3d = 1.0;
    let eval_ds = generate_dataset(&asset, &cfg.camera, &eval_cfg, cfg.model.image_size, cfg.seed.wrapping_add(1));
    eval_ds.save(&out_dir.join("eval.fpds"))?;

    println!("asset: {} ({} vertices, {} joints)", out_dir.join("asset.json").display(), asset.n_vertices(), asset.n_joints());
    println!(
        "train: {} ({} examples, {} with 3d labels, {}x{} images)",
        out_dir.join("train.fpds").display(),
        train_ds.manifest.n_examples,
        train_ds.manifest.count_3d,
        train_ds.manifest.image_size,
        train_ds.manifest.image_size
    );
    println!("eval:  {} ({} examples, all 3d-labeled)", out_dir.join("eval.fpds").display(), eval_ds.manifest.n_examples);
    Ok(())
}

fn check_compat(cfg: &RunConfig, ds: &Dataset, asset: &BodyModelAsset<f64>) -> Result<()> {
    if ds.manifest.image_size != cfg.model.image_size {
        bail!(
            "dataset images are {0}x{0} but the configuration expects {1}x{1}; regenerate the data or adjust model.image_size",
            ds.manifest.image_size,
            cfg.model.image_size
        );
    }
    if ds.manifest.camera != cfg.camera {
        bail!("dataset was rendered under a different camera; regenerate the data or align [camera]");
    }
    if ds.manifest.n_joints != asset.n_joints() || ds.manifest.n_shape != asset.n_shape() {
        bail!("dataset dimensions do not match the body asset");
    }
    Ok(())
}

fn cmd_train(config: &Path, data_dir: &Path, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let (asset, ds) = load_data(data_dir, "train.fpds")?;
    check_compat(&cfg, &ds, &asset)?;
    let mut model = Model::<f64>::init(&cfg, asset.n_joints(), asset.n_shape());
    println!(
        "training on {} examples ({} with 3d labels), batch {}, {} epochs",
        ds.examples.len(),
        ds.manifest.count_3d,
        cfg.training.batch_size,
        cfg.training.epochs
    );
    let report = train(&mut model, &asset, &ds.examples, &cfg, out_dir)?;
    println!("steps: {}", report.steps);
    println!("final loss: {:.6}", report.final_loss.total);
    println!("log: {}", report.log_path.display());
    println!("checkpoint: {}", report.final_checkpoint.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path, json: bool) -> Result<()> {
    let hash_before = file_hash(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    println!("checkpoint sha256 (before): {hash_before}");
    let (model, meta) = load_checkpoint(checkpoint)?;
    let (asset, ds) = load_data(data_dir, "eval.fpds")?;
    check_compat(&meta.run_config, &ds, &asset)?;
    let report = evaluate(&model, &asset, &ds.examples);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("examples:   {}", report.n_examples);
        println!("mpjpe:      {:.6}", report.mpjpe);
        println!("pa-mpjpe:   {:.6}", report.pa_mpjpe);
        println!("pve:        {:.6}", report.pve);
        println!("degenerate: {}", report.n_degenerate);
    }
    let hash_after = file_hash(checkpoint)?;
    println!("checkpoint sha256 (after):  {hash_after}");
    if hash_before != hash_after {
        bail!("evaluation modified the checkpoint file");
    }
    Ok(())
}

/// (3, S*S) channel matrix to an RGB image file.
fn save_image_png(image: &Mat<f64>, side: usize, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            let i = y * side + x;
            let px = |c: usize| (image.at(c, i).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// (res, res) mask with values in [0, 1] to a grayscale image file.
fn save_mask_png(mask: &Mat<f64>, path: &Path) -> Result<()> {
    let mut img = image::GrayImage::new(mask.cols as u32, mask.rows as u32);
    for y in 0..mask.rows {
        for x in 0..mask.cols {
            let v = (mask.at(y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn save_obj(vertices: &Mat<f64>, faces: &[[u32; 3]], path: &Path) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..vertices.rows {
        writeln!(f, "v {} {} {}", vertices.at(i, 0), vertices.at(i, 1), vertices.at(i, 2))?;
    }
    for face in faces {
        writeln!(f, "f {} {} {}", face[0] + 1, face[1] + 1, face[2] + 1)?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| anyhow::anyhow!("bad {what} entry: {p:?}")))
        .collect()
}

fn cmd_render_views(checkpoint: &Path, data_dir: &Path, index: usize, out_dir: &Path, angles: &str) -> Result<()> {
    let angles: Vec<f64> = parse_list(angles, "angle")?;
    let (model, meta) = load_checkpoint(checkpoint)?;
    let (asset, ds) = load_data(data_dir, "eval.fpds")?;
    check_compat(&meta.run_config, &ds, &asset)?;
    let Some(ex) = ds.examples.get(index) else {
        bail!("index {index} is out of range (evaluation set holds {} examples)", ds.examples.len());
    };
    std::fs::create_dir_all(out_dir)?;

    let side = meta.run_config.model.image_size;
    save_image_png(&ex.image, side, &out_dir.join("input.png"))?;

    let gt_vertices = ex.gt3d.as_ref().map(|gt3| {
        let params = BodyParams {
            pose_theta: gt3.pose_theta.clone(),
            shape_beta: gt3.shape_beta.clone(),
            camera_pi: [1.0, 0.0, 0.0],
        };
        forward(&asset, &params).expect("stored labels are valid").vertices
    });

    // Each angle runs the full pipeline with the render rays orbited to
    // that azimuth, so the exported mesh is the body as inferred from that
    // viewing direction (at 0 this coincides with the evaluation path).
    for &deg in &angles {
        let phi = deg.to_radians();
        let tag = format!("{:03}", deg.round() as i64);
        let view = model.infer_view(&asset, &ex.image, phi);
        save_obj(&view.vertices, &asset.faces, &out_dir.join(format!("pred_mesh_{tag}.obj")))?;
        std::fs::write(
            out_dir.join(format!("prediction_{tag}.json")),
            serde_json::to_string_pretty(&view.params)?,
        )?;
        let pred = silhouette_at_azimuth(&view.vertices, &asset.faces, 0.0, SILHOUETTE_RES);
        save_mask_png(&pred, &out_dir.join(format!("pred_sil_{tag}.png")))?;
        if let Some(gtv) = &gt_vertices {
            let gt = silhouette_at_azimuth(gtv, &asset.faces, phi, SILHOUETTE_RES);
            save_mask_png(&gt, &out_dir.join(format!("gt_sil_{tag}.png")))?;
        }
        match decoded_silhouette_at(&model, &asset, &ex.image, phi) {
            Ok(dec) => save_mask_png(&dec, &out_dir.join(format!("decoded_sil_{tag}.png")))?,
            Err(why) => {
                if deg == angles[0] {
                    println!("note: skipping decoded silhouettes: {why}");
                }
            }
        }
    }
    println!("wrote {} views under {}", angles.len(), out_dir.display());
    Ok(())
}

/// What the esv command records: the aggregated per-coefficient sigmas plus
/// the sweep protocol that produced them.
#[derive(serde::Serialize)]
struct EsvFileReport {
    n_images: usize,
    step_deg: f64,
    per_coefficient_sigma: Vec<f64>,
    esv: f64,
}

fn cmd_esv(checkpoint: &Path, data_dir: &Path, step_deg: f64, n_images: usize, out: Option<&Path>) -> Result<()> {
    if n_images == 0 {
        bail!("need at least one image");
    }
    let (model, meta) = load_checkpoint(checkpoint)?;
    let (asset, ds) = load_data(data_dir, "eval.fpds")?;
    check_compat(&meta.run_config, &ds, &asset)?;
    let images: Vec<Mat<f64>> = ds.examples.iter().take(n_images).map(|e| e.image.clone()).collect();
    let report = esv_dataset(&model, &asset, &images, step_deg);
    println!("esv ({} images, {step_deg} deg steps): {:.6}", images.len(), report.esv);
    let sigmas = report
        .per_coefficient_sigma
        .iter()
        .map(|s| format!("{s:.6}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!("per-coefficient sigma: {sigmas}");
    if let Some(path) = out {
        let file = EsvFileReport {
            n_images: images.len(),
            step_deg,
            per_coefficient_sigma: report.per_coefficient_sigma,
            esv: report.esv,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_bench(config: &Path, res: &str, iters: usize, warmup: usize, seed: Option<u64>) -> Result<()> {
    let res_list: Vec<usize> = parse_list(res, "resolution")?;
    let cfg = load_config(config, seed)?;
    let asset = generate_toy_asset(cfg.seed);
    let mut one = cfg.dataset.clone();
    one.n_examples = 1;
    let ds = generate_dataset(&asset, &cfg.camera, &one, cfg.model.image_size, cfg.seed);
    let rows = bench(&cfg, &asset, &ds.examples[0].image, &res_list, iters, warmup);
    println!("{:>4}  {:>10}  {:>10}", "res", "seconds", "fps");
    for r in &rows {
        println!("{:>4}  {:>10.4}  {:>10.2}", r.feature_map_res, r.seconds, r.fps);
    }
    Ok(())
}
