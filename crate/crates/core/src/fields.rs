//! The image-conditioned neural feature field: a small convolutional encoder
//! producing a 7x7 latent grid, a spatial attention pool that condenses it to
//! a single foreground latent, a latent-conditioned field MLP over positional
//! encodings, volume rendering of the field into a feature map at any
//! horizontal azimuth, and the aggregation head that condenses a rendered map
//! into the regressor's input vector.
//!
//! Every component separates weight storage (plain matrices, checkpointable)
//! from tape registration (`register_*`, yielding `Var` handles) and graph
//! building (`apply_*` / `render_features`). Registration and `named_params`
//! enumerate weights in the same order, which the optimizer relies on.

use crate::camera::{encode_points_cols, encoded_rows, SamplePoints};
use crate::mat::Mat;
use crate::tape::{ConvDims, Tape, Var};
use crate::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};

const NORM_EPS: f64 = 1e-5;

/// Xavier-uniform init over the given fan; biases start at zero.
fn xavier<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Mat<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| S::from_f64(rng.gen_range(-a..a)))
}

/// Dense layer weights: y = w x + b with b broadcast across columns.
#[derive(Clone, Debug)]
pub struct LinearPair<S> {
    pub w: Mat<S>,
    pub b: Mat<S>,
}

impl<S: Scalar> LinearPair<S> {
    pub fn init<R: Rng>(rng: &mut R, out: usize, inp: usize) -> Self {
        LinearPair { w: xavier(rng, out, inp, inp, out), b: Mat::zeros(out, 1) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

pub fn register_linear<S: Scalar>(t: &mut Tape<S>, l: &LinearPair<S>) -> LinearVars {
    LinearVars { w: t.param(&l.w), b: t.param(&l.b) }
}

pub fn apply_linear<S: Scalar>(t: &mut Tape<S>, l: LinearVars, x: Var) -> Var {
    let wx = t.matmul(l.w, x);
    t.add_col_broadcast(wx, l.b)
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    /// Stride-2 convolution (k3, pad 1) halving the spatial side.
    Down,
    /// Final convolution landing exactly on 7x7.
    AdaptConv,
    /// Final transposed convolution growing small inputs to 7x7.
    AdaptUp,
}

#[derive(Clone, Debug)]
pub struct ConvStage<S> {
    pub kind: StageKind,
    pub w: Mat<S>,
    pub b: Mat<S>,
    pub dims: ConvDims,
}

/// Convolutional encoder mapping a 3-channel square image to a (C, 49)
/// latent grid: stride-2 stages down to at most 8 pixels, then one adapter
/// stage landing exactly on 7x7. Instance norm and softplus follow each
/// intermediate convolution; the final stage skips the norm so the grid
/// keeps image-dependent statistics. A learned projection (`proj`) condenses
/// the (optionally attention-gated) grid to the conditioning latent — a
/// plain spatial mean would collapse here, because which cells are active
/// carries the pose information while the total activation barely varies
/// across images.
#[derive(Clone, Debug)]
pub struct EncoderWeights<S> {
    pub stages: Vec<ConvStage<S>>,
    pub proj: LinearPair<S>,
    pub channels: usize,
    pub image_size: usize,
}

impl<S: Scalar> EncoderWeights<S> {
    pub fn init<R: Rng>(rng: &mut R, image_size: usize, channels: usize) -> Self {
        assert!(image_size >= 4, "encoder needs at least a 4x4 image");
        let mut stages = Vec::new();
        let mut m = image_size;
        let mut c_in = 3;
        while m > 8 {
            let dims = ConvDims { c_in, h: m, w: m, c_out: channels, k: 3, stride: 2, pad: 1 };
            let (oh, _) = dims.conv_out_hw();
            let w = xavier(rng, channels, c_in * 9, c_in * 9, channels * 9);
            stages.push(ConvStage { kind: StageKind::Down, w, b: Mat::zeros(channels, 1), dims });
            m = oh;
            c_in = channels;
        }
        if m >= 7 {
            // 7 -> k3 pad 1 keeps 7; 8 -> k2 pad 0 lands on 7.
            let (k, pad) = if m == 7 { (3, 1) } else { (m - 6, 0) };
            let dims = ConvDims { c_in, h: m, w: m, c_out: channels, k, stride: 1, pad };
            let w = xavier(rng, channels, c_in * k * k, c_in * k * k, channels * k * k);
            stages.push(ConvStage { kind: StageKind::AdaptConv, w, b: Mat::zeros(channels, 1), dims });
        } else {
            let k = 8 - m; // (m-1) + k = 7
            let dims = ConvDims { c_in, h: m, w: m, c_out: channels, k, stride: 1, pad: 0 };
            let w = xavier(rng, c_in, k * k * channels, c_in * k * k, channels * k * k);
            stages.push(ConvStage { kind: StageKind::AdaptUp, w, b: Mat::zeros(channels, 1), dims });
        }
        let proj = LinearPair::init(rng, channels, channels * 49);
        let enc = EncoderWeights { stages, proj, channels, image_size };
        debug_assert_eq!(enc.output_side(), 7);
        enc
    }

    fn output_side(&self) -> usize {
        let last = self.stages.last().unwrap();
        let (oh, _) = match last.kind {
            StageKind::AdaptUp => last.dims.tconv_out_hw(),
            _ => last.dims.conv_out_hw(),
        };
        oh
    }

    pub fn named_params(&self) -> Vec<(String, &Mat<S>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("encoder.stage{i}.w"), &s.w));
            out.push((format!("encoder.stage{i}.b"), &s.b));
        }
        out.push(("encoder.proj.w".into(), &self.proj.w));
        out.push(("encoder.proj.b".into(), &self.proj.b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat<S>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("encoder.stage{i}.w"), &mut s.w));
            out.push((format!("encoder.stage{i}.b"), &mut s.b));
        }
        out.push(("encoder.proj.w".into(), &mut self.proj.w));
        out.push(("encoder.proj.b".into(), &mut self.proj.b));
        out
    }
}

pub struct EncoderVars {
    pub stages: Vec<(Var, Var)>,
    pub proj: LinearVars,
}

pub fn register_encoder<S: Scalar>(t: &mut Tape<S>, e: &EncoderWeights<S>) -> EncoderVars {
    EncoderVars {
        stages: e.stages.iter().map(|s| (t.param(&s.w), t.param(&s.b))).collect(),
        proj: register_linear(t, &e.proj),
    }
}

/// Run the encoder over an image constant of shape (3, S*S); returns (C, 49).
pub fn encode_image<S: Scalar>(t: &mut Tape<S>, e: &EncoderWeights<S>, vars: &EncoderVars, image: Var) -> Var {
    assert_eq!(t.shape(image), (3, e.image_size * e.image_size), "image must be (3, S*S)");
    let mut x = image;
    let last = e.stages.len() - 1;
    for (i, (stage, &(w, b))) in e.stages.iter().zip(&vars.stages).enumerate() {
        x = match stage.kind {
            StageKind::AdaptUp => t.conv_transpose2d(x, w, b, stage.dims),
            _ => t.conv2d(x, w, b, stage.dims),
        };
        // The final stage feeds a spatial pool; per-channel standardization
        // there would pin the pooled mean to a constant and erase the image
        // signal, so only the intermediate stages are normalized.
        if i != last {
            x = t.instance_norm_rows(x, S::from_f64(NORM_EPS));
        }
        x = t.softplus(x);
    }
    assert_eq!(t.shape(x), (e.channels, 49));
    x
}

// ---------------------------------------------------------------------------
// Foreground attention
// ---------------------------------------------------------------------------

/// Foreground attention: per-cell statistics (smooth max via log-sum-exp,
/// and mean) are scored by a 1x1 convolution and squashed to a gate in
/// (0,1); the gate reweights the latent grid cell by cell before pooling,
/// suppressing cells the scorer deems background.
#[derive(Clone, Debug)]
pub struct AttentionWeights<S> {
    pub score: LinearPair<S>,
}

impl<S: Scalar> AttentionWeights<S> {
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        AttentionWeights { score: LinearPair::init(rng, 1, 2) }
    }

    pub fn named_params(&self) -> Vec<(String, &Mat<S>)> {
        vec![("attention.score.w".into(), &self.score.w), ("attention.score.b".into(), &self.score.b)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat<S>)> {
        vec![("attention.score.w".into(), &mut self.score.w), ("attention.score.b".into(), &mut self.score.b)]
    }
}

pub struct AttentionVars {
    pub score: LinearVars,
}

pub fn register_attention<S: Scalar>(t: &mut Tape<S>, a: &AttentionWeights<S>) -> AttentionVars {
    AttentionVars { score: register_linear(t, &a.score) }
}

/// Returns (gate, gated grid): gate is (1, 49) in (0,1), the gated grid is
/// the input grid with every cell scaled by its gate value.
pub fn apply_attention<S: Scalar>(t: &mut Tape<S>, a: &AttentionVars, z: Var) -> (Var, Var) {
    let (c, _cells) = t.shape(z);
    let smooth_max = t.lse_over_rows(z);
    let mean = t.mean_over_rows(z);
    let pooled = t.concat_rows(&[smooth_max, mean]);
    let scored = apply_linear(t, a.score, pooled);
    let gate = t.sigmoid(scored);
    let gated = {
        let tiled = t.tile_rows(gate, c);
        t.mul(z, tiled)
    };
    (gate, gated)
}

/// Condense a (C, 49) grid to the (C, 1) conditioning latent through the
/// encoder's learned projection over the flattened cells.
pub fn pool_latent<S: Scalar>(t: &mut Tape<S>, enc: &EncoderVars, grid: Var) -> Var {
    let (c, cells) = t.shape(grid);
    let flat = t.reshape(grid, c * cells, 1);
    apply_linear(t, enc.proj, flat)
}

// ---------------------------------------------------------------------------
// Latent-conditioned field
// ---------------------------------------------------------------------------

/// The field MLP: a trunk over (positional encoding of x, foreground latent)
/// with a non-negative density head, and a feature branch that additionally
/// sees the encoded view direction and the latent again.
#[derive(Clone, Debug)]
pub struct FieldWeights<S> {
    pub trunk: Vec<LinearPair<S>>,
    pub sigma_head: LinearPair<S>,
    pub feat_in: LinearPair<S>,
    pub feat_out: LinearPair<S>,
    pub channels: usize,
    pub width: usize,
    pub levels_x: usize,
    pub levels_r: usize,
}

impl<S: Scalar> FieldWeights<S> {
    pub fn init<R: Rng>(rng: &mut R, channels: usize, width: usize, levels_x: usize, levels_r: usize) -> Self {
        let in_rows = encoded_rows(levels_x) + channels;
        let trunk = vec![
            LinearPair::init(rng, width, in_rows),
            LinearPair::init(rng, width, width),
            LinearPair::init(rng, width, width),
            LinearPair::init(rng, width, width),
        ];
        FieldWeights {
            trunk,
            sigma_head: LinearPair::init(rng, 1, width),
            feat_in: LinearPair::init(rng, width, width + encoded_rows(levels_r) + channels),
            feat_out: LinearPair::init(rng, channels, width),
            channels,
            width,
            levels_x,
            levels_r,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Mat<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("field.trunk{i}.w"), &l.w));
            out.push((format!("field.trunk{i}.b"), &l.b));
        }
        out.push(("field.sigma.w".into(), &self.sigma_head.w));
        out.push(("field.sigma.b".into(), &self.sigma_head.b));
        out.push(("field.feat_in.w".into(), &self.feat_in.w));
        out.push(("field.feat_in.b".into(), &self.feat_in.b));
        out.push(("field.feat_out.w".into(), &self.feat_out.w));
        out.push(("field.feat_out.b".into(), &self.feat_out.b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter_mut().enumerate() {
            out.push((format!("field.trunk{i}.w"), &mut l.w));
            out.push((format!("field.trunk{i}.b"), &mut l.b));
        }
        out.push(("field.sigma.w".into(), &mut self.sigma_head.w));
        out.push(("field.sigma.b".into(), &mut self.sigma_head.b));
        out.push(("field.feat_in.w".into(), &mut self.feat_in.w));
        out.push(("field.feat_in.b".into(), &mut self.feat_in.b));
        out.push(("field.feat_out.w".into(), &mut self.feat_out.w));
        out.push(("field.feat_out.b".into(), &mut self.feat_out.b));
        out
    }
}

pub struct FieldVars {
    pub trunk: Vec<LinearVars>,
    pub sigma_head: LinearVars,
    pub feat_in: LinearVars,
    pub feat_out: LinearVars,
}

pub fn register_field<S: Scalar>(t: &mut Tape<S>, f: &FieldWeights<S>) -> FieldVars {
    FieldVars {
        trunk: f.trunk.iter().map(|l| register_linear(t, l)).collect(),
        sigma_head: register_linear(t, &f.sigma_head),
        feat_in: register_linear(t, &f.feat_in),
        feat_out: register_linear(t, &f.feat_out),
    }
}

/// Query the field at every sample point: returns (sigma (1, P*N),
/// feats (C, P*N)). Point and direction encodings enter as tape constants;
/// gradients flow only through the weights and the conditioning latent.
pub fn query_field<S: Scalar>(
    t: &mut Tape<S>,
    f: &FieldWeights<S>,
    vars: &FieldVars,
    latent: Var,
    samples: &SamplePoints<S>,
) -> (Var, Var) {
    let n_pts = samples.points.rows;
    let gx = t.constant(encode_points_cols(&samples.points, f.levels_x));
    let gr = t.constant(encode_points_cols(&samples.dirs, f.levels_r));
    let tiled = t.tile_cols(latent, n_pts);
    let mut h = t.concat_rows(&[gx, tiled]);
    for l in &vars.trunk {
        h = apply_linear(t, *l, h);
        h = t.softplus(h);
    }
    let sigma_pre = apply_linear(t, vars.sigma_head, h);
    let sigma = t.softplus(sigma_pre);
    // The latent re-enters the feature branch directly: conditioning only
    // through the shared trunk reaches the features too attenuated to steer
    // the downstream regressor.
    let with_dir = t.concat_rows(&[h, gr, tiled]);
    let f1 = apply_linear(t, vars.feat_in, with_dir);
    let f1 = t.softplus(f1);
    let feats = apply_linear(t, vars.feat_out, f1);
    (sigma, feats)
}

/// Volume-render the field along every ray of a sampled bundle: returns the
/// (C, P) feature map, pixels column-major in row-major scan order.
pub fn render_features<S: Scalar>(
    t: &mut Tape<S>,
    f: &FieldWeights<S>,
    vars: &FieldVars,
    latent: Var,
    samples: &SamplePoints<S>,
) -> Var {
    let (sigma, feats) = query_field(t, f, vars, latent, samples);
    t.composite(sigma, feats, &samples.deltas, samples.n_samples)
}

// ---------------------------------------------------------------------------
// Feature aggregation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Gap,
    Depthwise,
    Conv,
}

/// Condenses a rendered (C, P) feature map to the regressor input (C, 1):
/// a parameter-free global average, a per-channel learned spatial kernel, or
/// a full learned linear map over the flattened grid.
#[derive(Clone, Debug)]
pub enum AggregateWeights<S> {
    Gap { cells: usize },
    Depthwise { k: Mat<S>, b: Mat<S> },
    Conv { w: Mat<S>, b: Mat<S>, channels: usize },
}

impl<S: Scalar> AggregateWeights<S> {
    pub fn init<R: Rng>(rng: &mut R, mode: AggregationMode, channels: usize, cells: usize) -> Self {
        match mode {
            AggregationMode::Gap => AggregateWeights::Gap { cells },
            AggregationMode::Depthwise => AggregateWeights::Depthwise {
                k: xavier(rng, channels, cells, cells, 1),
                b: Mat::zeros(channels, 1),
            },
            AggregationMode::Conv => AggregateWeights::Conv {
                w: xavier(rng, channels, channels * cells, channels * cells, channels),
                b: Mat::zeros(channels, 1),
                channels,
            },
        }
    }

    pub fn mode(&self) -> AggregationMode {
        match self {
            AggregateWeights::Gap { .. } => AggregationMode::Gap,
            AggregateWeights::Depthwise { .. } => AggregationMode::Depthwise,
            AggregateWeights::Conv { .. } => AggregationMode::Conv,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Mat<S>)> {
        match self {
            AggregateWeights::Gap { .. } => vec![],
            AggregateWeights::Depthwise { k, b } => {
                vec![("aggregate.k".into(), k), ("aggregate.b".into(), b)]
            }
            AggregateWeights::Conv { w, b, .. } => {
                vec![("aggregate.w".into(), w), ("aggregate.b".into(), b)]
            }
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat<S>)> {
        match self {
            AggregateWeights::Gap { .. } => vec![],
            AggregateWeights::Depthwise { k, b } => {
                vec![("aggregate.k".into(), k), ("aggregate.b".into(), b)]
            }
            AggregateWeights::Conv { w, b, .. } => {
                vec![("aggregate.w".into(), w), ("aggregate.b".into(), b)]
            }
        }
    }
}

pub enum AggregateVars {
    Gap,
    Depthwise { k: Var, b: Var },
    Conv { w: Var, b: Var },
}

pub fn register_aggregate<S: Scalar>(t: &mut Tape<S>, a: &AggregateWeights<S>) -> AggregateVars {
    match a {
        AggregateWeights::Gap { .. } => AggregateVars::Gap,
        AggregateWeights::Depthwise { k, b } => AggregateVars::Depthwise { k: t.param(k), b: t.param(b) },
        AggregateWeights::Conv { w, b, .. } => AggregateVars::Conv { w: t.param(w), b: t.param(b) },
    }
}

pub fn apply_aggregate<S: Scalar>(t: &mut Tape<S>, vars: &AggregateVars, map: Var) -> Var {
    let (c, cells) = t.shape(map);
    match vars {
        AggregateVars::Gap => t.mean_over_cols(map),
        AggregateVars::Depthwise { k, b } => {
            let prod = t.mul(*k, map);
            let mean = t.mean_over_cols(prod);
            let summed = t.scale(mean, S::from_usize_(cells));
            t.add(summed, *b)
        }
        AggregateVars::Conv { w, b } => {
            let flat = t.reshape(map, c * cells, 1);
            let wx = t.matmul(*w, flat);
            t.add(wx, *b)
        }
    }
}
