//! The full recovery model: weights for every stage, deterministic parameter
//! enumeration (the optimizer, checkpoints, and gradient checks all rely on
//! one canonical order), and graph builders that run the pipeline on a tape
//! at any requested azimuth.

use crate::body_model::{forward_on_tape, BodyModelAsset, BodyParams, TapeMesh};
use crate::camera::{make_rays, sample_along, CameraConfig, SampleMode, SamplePoints};
use crate::config::RunConfig;
use crate::fields::{
    apply_aggregate, apply_attention, encode_image, pool_latent, register_aggregate,
    register_attention, register_encoder, register_field, render_features, AggregateVars,
    AggregateWeights, AttentionVars, AttentionWeights, EncoderVars, EncoderWeights, FieldVars,
    FieldWeights,
};
use crate::mat::Mat;
use crate::regressor::{
    apply_regressor, register_regressor, state_to_params, RegressedBody, RegressorVars,
    RegressorWeights,
};
use crate::silhouette::{register_decoder, DecoderVars, DecoderWeights};
use crate::tape::{Tape, Var};
use crate::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub encoder: EncoderWeights<S>,
    pub attention: Option<AttentionWeights<S>>,
    pub field: FieldWeights<S>,
    pub aggregate: AggregateWeights<S>,
    pub regressor: RegressorWeights<S>,
    /// Present only when the training-time silhouette guidance is enabled.
    pub decoder: Option<DecoderWeights<S>>,
    pub camera: CameraConfig,
    pub feature_map_res: usize,
    pub n_depth_samples: usize,
    pub n_joints: usize,
    pub n_shape: usize,
}

impl<S: Scalar> Model<S> {
    /// Initialize all weights from the run seed. Component sub-seeds come
    /// from distinct streams so toggling one component never reshuffles the
    /// others' initialization.
    pub fn init(cfg: &RunConfig, n_joints: usize, n_shape: usize) -> Self {
        let m = &cfg.model;
        let sub = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(stream);
            r
        };
        let encoder = EncoderWeights::init(&mut sub(101), m.image_size, m.channels);
        let attention = m.attention.then(|| AttentionWeights::init(&mut sub(102)));
        let field = FieldWeights::init(&mut sub(103), m.channels, m.field_width, m.levels_x, m.levels_r);
        let cells = m.feature_map_res * m.feature_map_res;
        let aggregate = AggregateWeights::init(&mut sub(104), m.aggregation, m.channels, cells);
        let regressor = RegressorWeights::init(
            &mut sub(105),
            m.channels,
            n_joints,
            n_shape,
            m.regressor_hidden,
            m.regressor_iterations,
        );
        let decoder = (cfg.losses.imagination && cfg.losses.silhouette)
            .then(|| DecoderWeights::init(&mut sub(106), m.channels, m.feature_map_res));
        Model {
            encoder,
            attention,
            field,
            aggregate,
            regressor,
            decoder,
            camera: cfg.camera,
            feature_map_res: m.feature_map_res,
            n_depth_samples: m.n_depth_samples,
            n_joints,
            n_shape,
        }
    }

    /// Trainable parameters in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Mat<S>)> {
        let mut out = self.encoder.named_params();
        if let Some(a) = &self.attention {
            out.extend(a.named_params());
        }
        out.extend(self.field.named_params());
        out.extend(self.aggregate.named_params());
        out.extend(self.regressor.named_params());
        if let Some(d) = &self.decoder {
            out.extend(d.named_params());
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Mat<S>)> {
        let mut out = self.encoder.named_params_mut();
        if let Some(a) = &mut self.attention {
            out.extend(a.named_params_mut());
        }
        out.extend(self.field.named_params_mut());
        out.extend(self.aggregate.named_params_mut());
        out.extend(self.regressor.named_params_mut());
        if let Some(d) = &mut self.decoder {
            out.extend(d.named_params_mut());
        }
        out
    }

    /// Everything a checkpoint stores: trainable parameters plus the frozen
    /// regressor start state.
    pub fn named_entries(&self) -> Vec<(String, &Mat<S>)> {
        let mut out = self.named_params();
        out.push(("regressor.init_state".into(), &self.regressor.init_state));
        out
    }
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub attention: Option<AttentionVars>,
    pub field: FieldVars,
    pub aggregate: AggregateVars,
    pub regressor: RegressorVars,
    pub decoder: Option<DecoderVars>,
}

impl ModelVars {
    /// Var handles aligned one-to-one with `Model::named_params`.
    pub fn var_list(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.stages.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend([self.encoder.proj.w, self.encoder.proj.b]);
        if let Some(a) = &self.attention {
            out.extend([a.score.w, a.score.b]);
        }
        for l in &self.field.trunk {
            out.extend([l.w, l.b]);
        }
        out.extend([
            self.field.sigma_head.w,
            self.field.sigma_head.b,
            self.field.feat_in.w,
            self.field.feat_in.b,
            self.field.feat_out.w,
            self.field.feat_out.b,
        ]);
        match &self.aggregate {
            AggregateVars::Gap => {}
            AggregateVars::Depthwise { k, b } => out.extend([*k, *b]),
            AggregateVars::Conv { w, b } => out.extend([*w, *b]),
        }
        for l in &self.regressor.layers {
            out.extend([l.w, l.b]);
        }
        if let Some(d) = &self.decoder {
            out.extend(d.stages.iter().flat_map(|&(w, b)| [w, b]));
        }
        out
    }
}

impl<S: Scalar> Model<S> {
    /// Register every weight on the tape (training graphs).
    pub fn register(&self, t: &mut Tape<S>) -> ModelVars {
        ModelVars {
            encoder: register_encoder(t, &self.encoder),
            attention: self.attention.as_ref().map(|a| register_attention(t, a)),
            field: register_field(t, &self.field),
            aggregate: register_aggregate(t, &self.aggregate),
            regressor: register_regressor(t, &self.regressor),
            decoder: self.decoder.as_ref().map(|d| register_decoder(t, d)),
        }
    }

    /// Register everything except the silhouette decoder. Inference and
    /// evaluation build their graphs through this, so the guidance branch is
    /// structurally absent from the test-time path.
    pub fn register_for_inference(&self, t: &mut Tape<S>) -> ModelVars {
        ModelVars {
            encoder: register_encoder(t, &self.encoder),
            attention: self.attention.as_ref().map(|a| register_attention(t, a)),
            field: register_field(t, &self.field),
            aggregate: register_aggregate(t, &self.aggregate),
            regressor: register_regressor(t, &self.regressor),
            decoder: None,
        }
    }

    /// Encode an image into the foreground latent, (C, 1): encoder grid,
    /// optional foreground gating, then the learned pooling projection.
    pub fn latent(&self, t: &mut Tape<S>, vars: &ModelVars, image: &Mat<S>) -> Var {
        let img = t.constant(image.clone());
        let z = encode_image(t, &self.encoder, &vars.encoder, img);
        let grid = match &vars.attention {
            Some(a) => apply_attention(t, a, z).1,
            None => z,
        };
        pool_latent(t, &vars.encoder, grid)
    }

    /// Depth-sample the render rays at an azimuth.
    pub fn sample_view<R: Rng>(&self, phi: S, mode: SampleMode, rng: &mut R) -> SamplePoints<S> {
        let res = self.feature_map_res;
        let rays = make_rays(&self.camera, phi, res, res);
        sample_along(&self.camera, &rays, self.n_depth_samples, mode, rng)
    }

    /// Render the feature map for a view and regress body parameters from
    /// it. Returns the prediction heads, the rendered map (for the guidance
    /// branch), and the mesh/keypoint nodes.
    pub fn predict_view(
        &self,
        t: &mut Tape<S>,
        vars: &ModelVars,
        asset: &BodyModelAsset<S>,
        latent: Var,
        samples: &SamplePoints<S>,
    ) -> (RegressedBody, Var, TapeMesh) {
        let map = render_features(t, &self.field, &vars.field, latent, samples);
        let feat = apply_aggregate(t, &vars.aggregate, map);
        let body = apply_regressor(t, &self.regressor, &vars.regressor, feat);
        let mesh = forward_on_tape(t, asset, &body.rotations, body.beta, body.camera);
        (body, map, mesh)
    }

    /// Full deterministic inference at the canonical azimuth; the guidance
    /// branch is never registered or built.
    pub fn infer(&self, asset: &BodyModelAsset<S>, image: &Mat<S>) -> InferenceOutput<S> {
        self.infer_view(asset, image, S::zero())
    }

    /// Full deterministic inference with the render rays orbited to azimuth
    /// `phi`. The regressed parameters live in that view's frame: the global
    /// orientation absorbs the view rotation while every other entry is
    /// view-independent in a perfectly disentangled model.
    pub fn infer_view(&self, asset: &BodyModelAsset<S>, image: &Mat<S>, phi: S) -> InferenceOutput<S> {
        let mut t = Tape::new();
        let vars = self.register_for_inference(&mut t);
        let latent = self.latent(&mut t, &vars, image);
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in deterministic mode
        let samples = self.sample_view(phi, SampleMode::Deterministic, &mut rng);
        let (body, _map, mesh) = self.predict_view(&mut t, &vars, asset, latent, &samples);
        let state = t.value(body.state).clone();
        let params = state_to_params(&state, self.n_joints, self.n_shape);
        InferenceOutput {
            params,
            vertices: t.value(mesh.vertices).clone(),
            joints3d: t.value(mesh.joints3d).clone(),
            keypoints2d: t.value(mesh.keypoints2d).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceOutput<S> {
    pub params: BodyParams<S>,
    pub vertices: Mat<S>,
    pub joints3d: Mat<S>,
    pub keypoints2d: Mat<S>,
}
