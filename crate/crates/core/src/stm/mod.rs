//! Sparse-To-Mesh: densify a landmark-displacement sequence into per-vertex
//! deformation fields on an arbitrary static mesh.
//!
//! Per frame: landmark displacements run through a GCN on the landmark graph
//! (plus a learned positional code), vertices query the landmark features
//! through cross-attention, the global displacement vector is broadcast to
//! all vertices, and an intrinsic decoder regresses the dense field from the
//! fused per-vertex features. Mesh features are computed once per mesh.

pub mod gcn;
pub mod intrinsic;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::LossWeights;
use crate::nn::layers::{Linear, MultiHeadAttention};
use crate::nn::params::{normal_init, ParamId, ParamStore};
use crate::nn::tape::{Mat, Tape, Var};
use gcn::Gcn;
use intrinsic::{IntrinsicNet, MeshBundle};

/// How landmark information reaches the vertices. `Full` is the shipped
/// configuration; the reduced variants exist for the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureCombination {
    /// Broadcast the raw global displacement vector only.
    Concat,
    /// Cross-attention from pointwise landmark features only.
    CrossAttention,
    /// Cross-attention plus the global vector.
    CrossAttentionConcat,
    /// GCN landmark features, cross-attention, and the global vector.
    Full,
}

impl FeatureCombination {
    pub fn use_gcn(self) -> bool {
        matches!(self, FeatureCombination::Full)
    }

    pub fn use_attention(self) -> bool {
        !matches!(self, FeatureCombination::Concat)
    }

    pub fn use_global(self) -> bool {
        !matches!(self, FeatureCombination::CrossAttention)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Intrinsic-network decoder (default).
    Intrinsic,
    /// Per-vertex MLP, kept for the component-substitution comparison.
    PerVertexMlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StmConfig {
    pub n_landmarks: usize,
    /// Mesh feature width d_f (also the intrinsic-net width).
    pub feature_width: usize,
    /// Cross-attention model width d_c.
    pub attention_width: usize,
    pub attention_heads: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    /// Landmark positional-code width d_p.
    pub positional_width: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Size of the truncated spectral basis the mesh operators must carry.
    pub spectral_k: usize,
    pub gradient_features: bool,
    pub feature_combination: FeatureCombination,
    pub decoder: DecoderKind,
    /// Initial per-channel diffusion time (mean edge length squared of the
    /// training meshes is the conventional choice).
    pub diffusion_time_init: f64,
    /// Landmark displacements are multiplied by this before entering the
    /// GCN/attention/global paths (trainers set ~1/std so inputs are O(1)).
    pub input_scale: f64,
    /// Decoder outputs are multiplied by this (trainers set ~the dense
    /// displacement std so the zero-initialized head works in natural units).
    pub output_scale: f64,
}

impl StmConfig {
    pub fn defaults(n_landmarks: usize) -> StmConfig {
        StmConfig {
            n_landmarks,
            feature_width: 128,
            attention_width: 128,
            attention_heads: 4,
            gcn_layers: 3,
            gcn_hidden: 128,
            positional_width: 32,
            encoder_blocks: 4,
            decoder_blocks: 4,
            spectral_k: 128,
            gradient_features: false,
            feature_combination: FeatureCombination::Full,
            decoder: DecoderKind::Intrinsic,
            diffusion_time_init: 0.01,
            input_scale: 1.0,
            output_scale: 1.0,
        }
    }

    pub fn motion_dim(&self) -> usize {
        3 * self.n_landmarks
    }

    pub fn fused_width(&self) -> usize {
        let c = self.feature_combination;
        self.feature_width
            + if c.use_global() { self.motion_dim() } else { 0 }
            + if c.use_attention() { self.attention_width } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention_width % self.attention_heads != 0 {
            return Err(CoreError::Config(format!(
                "attention width {} not divisible by {} heads",
                self.attention_width, self.attention_heads
            )));
        }
        if self.n_landmarks == 0 || self.feature_width == 0 {
            return Err(CoreError::Config("zero-sized STM dimension".into()));
        }
        if self.diffusion_time_init <= 0.0 {
            return Err(CoreError::Config(
                "diffusion_time_init must be positive".into(),
            ));
        }
        if self.input_scale <= 0.0 || self.output_scale <= 0.0 {
            return Err(CoreError::Config(
                "input_scale and output_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

enum DecoderVariant {
    Intrinsic(IntrinsicNet),
    Mlp { l1: Linear, l2: Linear, l3: Linear },
}

pub struct StmModel {
    pub config: StmConfig,
    encoder: IntrinsicNet,
    landmark_gcn: Option<Gcn>,
    positional: ParamId,
    phi: Linear,
    attention: Option<MultiHeadAttention>,
    decoder: DecoderVariant,
}

/// Cross-attention output for one frame: per-vertex context and the
/// head-averaged attention weights (n-by-N, rows sum to 1).
pub struct AttentionOutput {
    pub context: Mat,
    pub weights: Mat,
}

impl StmModel {
    /// Register all parameters under `stm.*`. `adjacency` is the normalized
    /// landmark-graph operator used by the GCN.
    pub fn new(
        store: &mut ParamStore,
        config: StmConfig,
        adjacency: Mat,
        rng: &mut impl Rng,
    ) -> Result<StmModel> {
        config.validate()?;
        if adjacency.nrows() != config.n_landmarks {
            return Err(CoreError::Config(format!(
                "adjacency is {}x{}, expected N = {}",
                adjacency.nrows(),
                adjacency.ncols(),
                config.n_landmarks
            )));
        }
        let encoder = IntrinsicNet::new(
            store,
            rng,
            "stm.encoder",
            6,
            config.feature_width,
            None,
            config.encoder_blocks,
            config.gradient_features,
            config.diffusion_time_init,
        );
        let comb = config.feature_combination;
        let landmark_gcn = comb.use_gcn().then(|| {
            Gcn::new(
                store,
                rng,
                "stm.gcn",
                adjacency,
                3,
                config.gcn_hidden,
                config.gcn_layers,
                true,
            )
        });
        let positional = store.register(
            "stm.positional",
            normal_init(config.n_landmarks, config.positional_width, 0.02, rng),
            true,
        );
        let phi_in = if comb.use_gcn() {
            config.gcn_hidden + config.positional_width
        } else {
            3 + config.positional_width
        };
        let phi = Linear::new(store, rng, "stm.phi", phi_in, config.attention_width, true);
        let attention = comb.use_attention().then(|| {
            MultiHeadAttention::new(
                store,
                rng,
                "stm.cross_attn",
                config.feature_width,
                config.attention_width,
                config.attention_width,
                config.attention_heads,
            )
        });
        let decoder = match config.decoder {
            DecoderKind::Intrinsic => DecoderVariant::Intrinsic(IntrinsicNet::new(
                store,
                rng,
                "stm.decoder",
                config.fused_width(),
                config.feature_width,
                Some(3),
                config.decoder_blocks,
                config.gradient_features,
                config.diffusion_time_init,
            )),
            DecoderKind::PerVertexMlp => DecoderVariant::Mlp {
                l1: Linear::new(
                    store,
                    rng,
                    "stm.decoder.l1",
                    config.fused_width(),
                    config.feature_width,
                    true,
                ),
                l2: Linear::new(
                    store,
                    rng,
                    "stm.decoder.l2",
                    config.feature_width,
                    config.feature_width,
                    true,
                ),
                l3: Linear::new_zeroed(store, "stm.decoder.l3", config.feature_width, 3),
            },
        };
        Ok(StmModel {
            config,
            encoder,
            landmark_gcn,
            positional,
            phi,
            attention,
            decoder,
        })
    }

    /// Static mesh features on an existing tape (gradients reach the encoder).
    pub fn encode_mesh_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bundle: &MeshBundle,
    ) -> Var {
        let x = tape.leaf(bundle.input_features.clone());
        self.encoder.apply(tape, store, bundle, x)
    }

    /// Evaluation-mode static features (cacheable; a pure function of the
    /// mesh and the checkpoint).
    pub fn encode_mesh(&self, store: &ParamStore, bundle: &MeshBundle) -> Mat {
        let mut tape = Tape::new();
        let v = self.encode_mesh_on_tape(&mut tape, store, bundle);
        tape.value(v).clone()
    }

    /// Frame-dependent landmark features `phi([l || p])` (N-by-d_c).
    pub fn encode_landmarks_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        displacements: &Array2<f64>,
    ) -> Result<Var> {
        if displacements.dim() != (self.config.n_landmarks, 3) {
            return Err(CoreError::Validation(format!(
                "landmark frame is {:?}, expected ({}, 3)",
                displacements.dim(),
                self.config.n_landmarks
            )));
        }
        let raw = tape.leaf(displacements.clone());
        let input = tape.scale(raw, self.config.input_scale);
        let l = match &self.landmark_gcn {
            Some(g) => g.apply(tape, store, input),
            None => input,
        };
        let p = tape.param(store, self.positional);
        let cat = tape.concat_cols(&[l, p]);
        Ok(self.phi.apply(tape, store, cat))
    }

    pub fn encode_landmarks(&self, store: &ParamStore, displacements: &Array2<f64>) -> Result<Mat> {
        let mut tape = Tape::new();
        let v = self.encode_landmarks_on_tape(&mut tape, store, displacements)?;
        Ok(tape.value(v).clone())
    }

    /// One frame on an existing tape: returns the dense displacement node and
    /// the head-averaged attention weights (None for the Concat variant).
    pub fn forward_frame_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bundle: &MeshBundle,
        mesh_features: Var,
        displacements: &Array2<f64>,
    ) -> Result<(Var, Option<Mat>)> {
        let comb = self.config.feature_combination;
        let n = bundle.n_vertices();
        let mut parts = vec![mesh_features];
        let mut alpha = None;
        if comb.use_global() {
            let d = self.config.motion_dim();
            let scale = self.config.input_scale;
            let mut g = Mat::zeros((n, d));
            for i in 0..n {
                for (j, &v) in displacements.iter().enumerate() {
                    g[(i, j)] = v * scale;
                }
            }
            parts.push(tape.leaf(g));
        }
        if comb.use_attention() {
            let keys = self.encode_landmarks_on_tape(tape, store, displacements)?;
            let mha = self.attention.as_ref().expect("attention configured");
            let mut rng = crate::rng::stream(0, "stm-attn-unused");
            let res = mha.apply(tape, store, mesh_features, keys, None, 0.0, &mut rng, false);
            let mut mean = Mat::zeros((n, self.config.n_landmarks));
            for &w in &res.weights {
                mean += tape.value(w);
            }
            mean /= res.weights.len() as f64;
            alpha = Some(mean);
            parts.push(res.output);
        }
        // fused row i = [f_i || g || c_i]
        let fused = tape.concat_cols(&parts);
        let raw_out = match &self.decoder {
            DecoderVariant::Intrinsic(net) => net.apply(tape, store, bundle, fused),
            DecoderVariant::Mlp { l1, l2, l3 } => {
                let h = l1.apply(tape, store, fused);
                let h = tape.gelu(h);
                let h = l2.apply(tape, store, h);
                let h = tape.gelu(h);
                l3.apply(tape, store, h)
            }
        };
        let delta_v = tape.scale(raw_out, self.config.output_scale);
        Ok((delta_v, alpha))
    }

    /// Evaluation over a whole sequence: encode the mesh once, then map each
    /// landmark frame to a dense displacement field. Frames are independent.
    pub fn stm_forward(
        &self,
        store: &ParamStore,
        bundle: &MeshBundle,
        frames: &[Array2<f64>],
        dump_attention: bool,
    ) -> Result<(Vec<Array2<f64>>, Option<Vec<Mat>>)> {
        let features = self.encode_mesh(store, bundle);
        let mut fields = Vec::with_capacity(frames.len());
        let mut dumps = dump_attention.then(Vec::new);
        for frame in frames {
            let mut tape = Tape::new();
            let f = tape.leaf(features.clone());
            let (dv, alpha) = self.forward_frame_on_tape(&mut tape, store, bundle, f, frame)?;
            fields.push(tape.value(dv).clone());
            if let Some(d) = dumps.as_mut() {
                d.push(alpha.unwrap_or_else(|| {
                    Mat::zeros((bundle.n_vertices(), self.config.n_landmarks))
                }));
            }
        }
        Ok((fields, dumps))
    }

    /// Cross-attention only, for inspection and tests.
    pub fn landmark_to_mesh_attention(
        &self,
        store: &ParamStore,
        bundle: &MeshBundle,
        displacements: &Array2<f64>,
    ) -> Result<AttentionOutput> {
        if !self.config.feature_combination.use_attention() {
            return Err(CoreError::Config(
                "attention disabled by the feature-combination setting".into(),
            ));
        }
        let mut tape = Tape::new();
        let features = self.encode_mesh(store, bundle);
        let f = tape.leaf(features);
        let keys = self.encode_landmarks_on_tape(&mut tape, store, displacements)?;
        let mha = self.attention.as_ref().unwrap();
        let mut rng = crate::rng::stream(0, "stm-attn-unused");
        let res = mha.apply(&mut tape, store, f, keys, None, 0.0, &mut rng, false);
        let n = bundle.n_vertices();
        let mut mean = Mat::zeros((n, self.config.n_landmarks));
        for &w in &res.weights {
            mean += tape.value(w);
        }
        mean /= res.weights.len() as f64;
        Ok(AttentionOutput {
            context: tape.value(res.output).clone(),
            weights: mean,
        })
    }
}

/// Unified motion loss over per-frame prediction nodes against ground-truth
/// dense displacement frames, as tape ops (for training windows).
pub fn window_loss_on_tape(
    tape: &mut Tape,
    predictions: &[Var],
    truths: &[Mat],
    weights: &LossWeights,
) -> Var {
    assert_eq!(predictions.len(), truths.len());
    let t = predictions.len();
    assert!(t >= 1);
    let k = truths[0].nrows() as f64;
    let truth_vars: Vec<Var> = truths.iter().map(|m| tape.leaf(m.clone())).collect();
    fn sq_sum(tape: &mut Tape, a: Var, b: Var) -> Var {
        let d = tape.sub(a, b);
        let sq = tape.mul(d, d);
        tape.sum_all(sq)
    }
    let mut total = {
        let mut acc = sq_sum(tape, predictions[0], truth_vars[0]);
        for i in 1..t {
            let s = sq_sum(tape, predictions[i], truth_vars[i]);
            acc = tape.add(acc, s);
        }
        tape.scale(acc, 1.0 / (t as f64 * k))
    };
    if t >= 2 && weights.velocity > 0.0 {
        let mut acc = None;
        for i in 0..t - 1 {
            let vp = tape.sub(predictions[i + 1], predictions[i]);
            let vt = tape.sub(truth_vars[i + 1], truth_vars[i]);
            let s = sq_sum(tape, vp, vt);
            acc = Some(match acc {
                Some(a) => tape.add(a, s),
                None => s,
            });
        }
        let term = tape.scale(acc.unwrap(), weights.velocity / ((t - 1) as f64 * k));
        total = tape.add(total, term);
    }
    if t >= 3 && weights.acceleration > 0.0 {
        let mut acc = None;
        for i in 0..t - 2 {
            let mid_p = tape.scale(predictions[i + 1], 2.0);
            let ap0 = tape.sub(predictions[i + 2], mid_p);
            let ap = tape.add(ap0, predictions[i]);
            let mid_t = tape.scale(truth_vars[i + 1], 2.0);
            let at0 = tape.sub(truth_vars[i + 2], mid_t);
            let at = tape.add(at0, truth_vars[i]);
            let s = sq_sum(tape, ap, at);
            acc = Some(match acc {
                Some(a) => tape.add(a, s),
                None => s,
            });
        }
        let term = tape.scale(acc.unwrap(), weights.acceleration / ((t - 2) as f64 * k));
        total = tape.add(total, term);
    }
    total
}

/// Evaluation loss on a full sequence (pure; same number as the metrics
/// module's motion loss with the STM weights).
pub fn stm_loss(
    predicted: &[Array2<f64>],
    truth: &[Array2<f64>],
    weights: &LossWeights,
) -> Result<f64> {
    let pair = crate::metrics::TrajectoryPair::new(truth.to_vec(), predicted.to_vec())?;
    Ok(crate::metrics::motion_loss(&pair, weights))
}

/// One gradient-accumulation pass over a window of frames of one sequence.
/// The mesh is encoded once inside the window's tape, so encoder gradients
/// flow through every frame.
pub fn stm_training_step(
    store: &mut ParamStore,
    model: &StmModel,
    bundle: &MeshBundle,
    landmark_frames: &[Array2<f64>],
    dense_truth: &[Mat],
    weights: &LossWeights,
) -> Result<f64> {
    assert_eq!(landmark_frames.len(), dense_truth.len());
    assert!(!landmark_frames.is_empty());
    let mut tape = Tape::new();
    let features = model.encode_mesh_on_tape(&mut tape, store, bundle);
    let mut preds = Vec::with_capacity(landmark_frames.len());
    for frame in landmark_frames {
        let (dv, _) = model.forward_frame_on_tape(&mut tape, store, bundle, features, frame)?;
        preds.push(dv);
    }
    let loss = window_loss_on_tape(&mut tape, &preds, dense_truth, weights);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(CoreError::Numerical(format!(
            "non-finite STM training loss: {value}"
        )));
    }
    let grads = tape.backward(loss);
    grads.accumulate_into(&tape, store);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::landmarks::LandmarkGraph;
    use crate::mesh::operators::build_operators;
    use crate::mesh::primitives;

    fn toy_config_n(n: usize) -> StmConfig {
        StmConfig {
            n_landmarks: n,
            feature_width: 8,
            attention_width: 8,
            attention_heads: 2,
            gcn_layers: 2,
            gcn_hidden: 8,
            positional_width: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            spectral_k: 20,
            gradient_features: false,
            feature_combination: FeatureCombination::Full,
            decoder: DecoderKind::Intrinsic,
            diffusion_time_init: 0.05,
            input_scale: 1.0,
            output_scale: 1.0,
        }
    }

    fn toy_setup(comb: FeatureCombination) -> (ParamStore, StmModel, MeshBundle) {
        let mesh = primitives::bumpy_sphere(1, 0.25, 3); // 42 vertices
        let ops = build_operators(&mesh, Some(20)).unwrap();
        let bundle = MeshBundle::new(&mesh, &ops, false).unwrap();
        let graph = LandmarkGraph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let mut config = toy_config_n(5);
        config.feature_combination = comb;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(11, "stm-test");
        let model =
            StmModel::new(&mut store, config, graph.normalized_adjacency(), &mut rng).unwrap();
        (store, model, bundle)
    }

    fn random_frame(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::stream(seed, "stm-frame");
        Array2::from_shape_fn((n, 3), |_| rand::Rng::gen_range(&mut rng, -0.1..0.1))
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let (store, model, bundle) = toy_setup(FeatureCombination::Full);
        let frames: Vec<Array2<f64>> = (0..3).map(|i| random_frame(5, i)).collect();
        let (fields, _) = model.stm_forward(&store, &bundle, &frames, false).unwrap();
        assert_eq!(fields.len(), 3);
        for f in &fields {
            assert_eq!(f.dim(), (bundle.n_vertices(), 3));
        }
        let (again, _) = model.stm_forward(&store, &bundle, &frames, false).unwrap();
        assert_eq!(fields, again, "eval forward must be deterministic");
    }

    #[test]
    fn frames_are_processed_independently() {
        let (store, model, bundle) = toy_setup(FeatureCombination::Full);
        let frames: Vec<Array2<f64>> = (0..4).map(|i| random_frame(5, 10 + i)).collect();
        let (fields, _) = model.stm_forward(&store, &bundle, &frames, false).unwrap();
        let permuted: Vec<Array2<f64>> =
            [2usize, 0, 3, 1].iter().map(|&i| frames[i].clone()).collect();
        let (pf, _) = model.stm_forward(&store, &bundle, &permuted, false).unwrap();
        for (slot, &src) in [2usize, 0, 3, 1].iter().enumerate() {
            assert_eq!(pf[slot], fields[src]);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (store, model, bundle) = toy_setup(FeatureCombination::Full);
        let frame = random_frame(5, 42);
        let out = model
            .landmark_to_mesh_attention(&store, &bundle, &frame)
            .unwrap();
        assert_eq!(out.weights.dim(), (bundle.n_vertices(), 5));
        assert_eq!(out.context.dim(), (bundle.n_vertices(), 8));
        for row in out.weights.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn single_landmark_gets_all_the_attention() {
        let mesh = primitives::bumpy_sphere(1, 0.25, 3);
        let ops = build_operators(&mesh, Some(20)).unwrap();
        let bundle = MeshBundle::new(&mesh, &ops, false).unwrap();
        let config = toy_config_n(1);
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(12, "stm-single");
        let model = StmModel::new(&mut store, config, Mat::eye(1), &mut rng).unwrap();
        let out = model
            .landmark_to_mesh_attention(&store, &bundle, &random_frame(1, 1))
            .unwrap();
        for row in out.weights.rows() {
            assert!((row[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_when_all_keys_coincide() {
        // identical keys: zero the positional table, no GCN, identical rows
        let (mut store, model, bundle) = toy_setup(FeatureCombination::CrossAttention);
        store.value_mut(model.positional).fill(0.0);
        let frame = Array2::from_elem((5, 3), 0.07);
        let out = model
            .landmark_to_mesh_attention(&store, &bundle, &frame)
            .unwrap();
        for row in out.weights.rows() {
            for &v in row {
                assert!((v - 0.2).abs() < 1e-6, "expected uniform 1/5, got {v}");
            }
        }
    }

    #[test]
    fn single_head_attention_matches_dense_oracle() {
        let mesh = primitives::bumpy_sphere(1, 0.25, 3);
        let ops = build_operators(&mesh, Some(20)).unwrap();
        let bundle = MeshBundle::new(&mesh, &ops, false).unwrap();
        let mut config = toy_config_n(3);
        config.attention_heads = 1;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(13, "stm-oracle");
        let model = StmModel::new(&mut store, config, Mat::eye(3), &mut rng).unwrap();
        let frame = random_frame(3, 9);
        let out = model
            .landmark_to_mesh_attention(&store, &bundle, &frame)
            .unwrap();

        let f = model.encode_mesh(&store, &bundle);
        let keys_in = model.encode_landmarks(&store, &frame).unwrap();
        let get = |name: &str| store.value(store.id(name).unwrap()).clone();
        let q =
            f.dot(&get("stm.cross_attn.wq.w")) + &broadcast(&get("stm.cross_attn.wq.b"), f.nrows());
        let k = keys_in.dot(&get("stm.cross_attn.wk.w"))
            + &broadcast(&get("stm.cross_attn.wk.b"), 3);
        let scale = 1.0 / (model.config.attention_width as f64).sqrt();
        for i in 0..f.nrows() {
            let logits: Vec<f64> = (0..3)
                .map(|j| {
                    (0..model.config.attention_width)
                        .map(|c| q[(i, c)] * k[(j, c)])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..3 {
                let want = exps[j] / denom;
                assert!(
                    (out.weights[(i, j)] - want).abs() < 1e-6,
                    "alpha[{i},{j}]: {} vs {want}",
                    out.weights[(i, j)]
                );
            }
        }
    }

    fn broadcast(row: &Mat, n: usize) -> Mat {
        Mat::from_shape_fn((n, row.ncols()), |(_, j)| row[(0, j)])
    }

    #[test]
    fn fused_width_accounting() {
        let mut c = toy_config_n(68);
        c.feature_width = 128;
        c.attention_width = 128;
        assert_eq!(c.fused_width(), 128 + 204 + 128);
        c.feature_combination = FeatureCombination::Concat;
        assert_eq!(c.fused_width(), 128 + 204);
        c.feature_combination = FeatureCombination::CrossAttention;
        assert_eq!(c.fused_width(), 128 + 128);
    }

    #[test]
    fn training_step_reduces_loss_on_a_fixed_target() {
        let (mut store, model, bundle) = toy_setup(FeatureCombination::Full);
        let frames: Vec<Array2<f64>> = (0..4).map(|i| random_frame(5, 20 + i)).collect();
        let n = bundle.n_vertices();
        let truth: Vec<Mat> = (0..4)
            .map(|t| {
                Mat::from_shape_fn((n, 3), |(i, c)| {
                    0.05 * ((i as f64 * 0.3 + c as f64 + t as f64).sin())
                })
            })
            .collect();
        let weights = LossWeights::stm();
        let mut opt = crate::nn::optim::AdamW::new(&store, 1e-2, 0.0, Some(1.0));
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            store.zero_grads();
            last =
                stm_training_step(&mut store, &model, &bundle, &frames, &truth, &weights).unwrap();
            first.get_or_insert(last);
            opt.step(&mut store);
        }
        assert!(
            last < 0.5 * first.unwrap(),
            "loss should halve: {first:?} -> {last}"
        );
    }

    #[test]
    fn stm_gradients_match_finite_differences() {
        let (mut store, model, bundle) = toy_setup(FeatureCombination::Full);
        let frames: Vec<Array2<f64>> = (0..3).map(|i| random_frame(5, 30 + i)).collect();
        let n = bundle.n_vertices();
        let truth: Vec<Mat> = (0..3)
            .map(|t| Mat::from_shape_fn((n, 3), |(i, c)| 0.03 * ((i + c + t) as f64).cos()))
            .collect();
        let weights = LossWeights::stm();
        // the decoder head is zero-initialized; randomize it so gradients
        // reach every parameter
        let head_w = store.id("stm.decoder.out.w").unwrap();
        let mut hrng = crate::rng::stream(32, "stm-gc-head");
        *store.value_mut(head_w) = crate::nn::params::normal_init(
            store.value(head_w).nrows(),
            store.value(head_w).ncols(),
            0.1,
            &mut hrng,
        );
        store.zero_grads();
        stm_training_step(&mut store, &model, &bundle, &frames, &truth, &weights).unwrap();
        let mut loss_fn = |store: &ParamStore| {
            let (fields, _) = model.stm_forward(store, &bundle, &frames, false).unwrap();
            stm_loss(&fields, &truth, &weights).unwrap()
        };
        let mut rng = crate::rng::stream(31, "stm-gc");
        let err = crate::nn::gradcheck::max_directional_error(
            &mut store,
            &mut loss_fn,
            15,
            1e-6,
            &mut rng,
        );
        assert!(err < 1e-3, "directional error {err}");
    }

    #[test]
    fn stm_loss_zero_on_exact_prediction_and_reduces_to_mse() {
        let mut rng = crate::rng::stream(40, "stm-loss");
        let truth: Vec<Array2<f64>> = (0..4)
            .map(|_| {
                Array2::from_shape_fn((6, 3), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            })
            .collect();
        assert_eq!(stm_loss(&truth, &truth, &LossWeights::stm()).unwrap(), 0.0);
        let pred: Vec<Array2<f64>> = truth.iter().map(|f| f * 1.1).collect();
        let zero_w = LossWeights {
            velocity: 0.0,
            acceleration: 0.0,
        };
        let got = stm_loss(&pred, &truth, &zero_w).unwrap();
        let direct: f64 = truth
            .iter()
            .zip(&pred)
            .map(|(t, p)| {
                t.iter()
                    .zip(p.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (4.0 * 6.0);
        assert!((got - direct).abs() < 1e-10);
    }

    #[test]
    fn all_feature_combinations_run() {
        for comb in [
            FeatureCombination::Concat,
            FeatureCombination::CrossAttention,
            FeatureCombination::CrossAttentionConcat,
            FeatureCombination::Full,
        ] {
            let (store, model, bundle) = toy_setup(comb);
            let frames = vec![random_frame(5, 50)];
            let (fields, _) = model.stm_forward(&store, &bundle, &frames, false).unwrap();
            assert_eq!(fields[0].dim(), (bundle.n_vertices(), 3));
        }
    }

    #[test]
    fn mlp_decoder_variant_runs_and_trains() {
        let mesh = primitives::bumpy_sphere(1, 0.25, 3);
        let ops = build_operators(&mesh, Some(20)).unwrap();
        let bundle = MeshBundle::new(&mesh, &ops, false).unwrap();
        let mut config = toy_config_n(5);
        config.decoder = DecoderKind::PerVertexMlp;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(60, "stm-mlp");
        let graph = LandmarkGraph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let model =
            StmModel::new(&mut store, config, graph.normalized_adjacency(), &mut rng).unwrap();
        let frames = vec![random_frame(5, 51), random_frame(5, 52)];
        let truth: Vec<Mat> = (0..2)
            .map(|t| Mat::from_shape_fn((bundle.n_vertices(), 3), |(i, c)| {
                0.02 * ((i + c + t) as f64).sin()
            }))
            .collect();
        store.zero_grads();
        let loss = stm_training_step(
            &mut store,
            &model,
            &bundle,
            &frames,
            &truth,
            &LossWeights::stm(),
        )
        .unwrap();
        assert!(loss.is_finite());
        assert!(store.grad_norm() > 0.0);
    }

    #[test]
    fn encode_mesh_is_permutation_equivariant() {
        // permute vertices, rebuild operators, re-encode: features permute
        let mesh = primitives::bumpy_sphere(1, 0.3, 8);
        let n = mesh.n_vertices();
        let mut rng = crate::rng::stream(70, "perm");
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            perm.swap(i, j);
        }
        let mut inv = vec![0usize; n];
        for (newi, &oldi) in perm.iter().enumerate() {
            inv[oldi] = newi;
        }
        let verts = Array2::from_shape_fn((n, 3), |(i, c)| mesh.vertices()[(perm[i], c)]);
        let faces: Vec<[usize; 3]> = mesh
            .faces()
            .iter()
            .map(|f| [inv[f[0]], inv[f[1]], inv[f[2]]])
            .collect();
        let pmesh = crate::mesh::Mesh::new(verts, faces).unwrap();

        let k = 24;
        let ops = build_operators(&mesh, Some(k)).unwrap();
        let pops = build_operators(&pmesh, Some(k)).unwrap();
        let bundle = MeshBundle::new(&mesh, &ops, false).unwrap();
        let pbundle = MeshBundle::new(&pmesh, &pops, false).unwrap();

        let config = toy_config_n(5);
        let graph = LandmarkGraph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let mut store = ParamStore::new();
        let mut rng2 = crate::rng::stream(71, "perm-model");
        let model =
            StmModel::new(&mut store, config, graph.normalized_adjacency(), &mut rng2).unwrap();

        let base = model.encode_mesh(&store, &bundle);
        let permuted = model.encode_mesh(&store, &pbundle);
        let mut worst = 0f64;
        for i in 0..n {
            for c in 0..model.config.feature_width {
                worst = worst.max((permuted[(i, c)] - base[(perm[i], c)]).abs());
            }
        }
        assert!(worst < 1e-5, "max feature deviation {worst}");
    }
}
