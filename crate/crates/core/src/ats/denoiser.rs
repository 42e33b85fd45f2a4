//! Transformer decoder denoiser: self-attention over motion tokens, band-
//! masked cross-attention to the audio memory, timestep and affect
//! conditioning added to every target token, linear head back to motion space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ats::AffectLabel;
use crate::error::{CoreError, Result};
use crate::nn::layers::{
    sinusoidal_embedding, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};
use crate::nn::params::{normal_init, ParamId, ParamStore};
use crate::nn::tape::{Mat, Tape, Var};

pub const BAND_MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Motion width D = 3N.
    pub motion_dim: usize,
    /// Audio feature channels C.
    pub audio_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Longest supported sequence (positional table rows).
    pub t_max: usize,
    pub dropout: f64,
    /// Cross-attention band half-width r.
    pub band_radius: usize,
    pub n_emotions: usize,
    pub max_intensity: u32,
}

impl DenoiserConfig {
    pub fn defaults(motion_dim: usize, audio_dim: usize, n_emotions: usize, max_intensity: u32) -> Self {
        DenoiserConfig {
            motion_dim,
            audio_dim,
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            d_ff: 2048,
            t_max: 600,
            dropout: 0.1,
            band_radius: 2,
            n_emotions,
            max_intensity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.motion_dim == 0 || self.audio_dim == 0 || self.n_emotions == 0 {
            return Err(CoreError::Config("zero-sized denoiser dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!("bad dropout {}", self.dropout)));
        }
        Ok(())
    }
}

struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

pub struct Denoiser {
    pub config: DenoiserConfig,
    proj_x: Linear,
    proj_h: Linear,
    pos_tgt: ParamId,
    pos_mem: ParamId,
    t_mlp1: Linear,
    t_mlp2: Linear,
    emotion_table: Embedding,
    intensity_table: Embedding,
    affect_proj: Linear,
    layers: Vec<DecoderLayer>,
    head: Linear,
}

impl Denoiser {
    /// Register all parameters under `ats.*` in the store.
    pub fn new(store: &mut ParamStore, config: DenoiserConfig, rng: &mut impl Rng) -> Result<Denoiser> {
        config.validate()?;
        let d = config.d_model;
        let proj_x = Linear::new(store, rng, "ats.proj_x", config.motion_dim, d, false);
        let proj_h = Linear::new(store, rng, "ats.proj_h", config.audio_dim, d, false);
        let pos_tgt = store.register("ats.pos_tgt", normal_init(config.t_max, d, 0.02, rng), true);
        let pos_mem = store.register("ats.pos_mem", normal_init(config.t_max, d, 0.02, rng), true);
        let t_mlp1 = Linear::new(store, rng, "ats.timestep.mlp1", d, d, true);
        let t_mlp2 = Linear::new(store, rng, "ats.timestep.mlp2", d, d, true);
        let emotion_table = Embedding::new(store, rng, "ats.affect.emotion", config.n_emotions, d);
        let intensity_table =
            Embedding::new(store, rng, "ats.affect.intensity", config.max_intensity as usize, d);
        let affect_proj = Linear::new(store, rng, "ats.affect.proj", d, d, true);
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("ats.layer{i}");
            layers.push(DecoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                self_attn: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{p}.self_attn"),
                    d,
                    d,
                    d,
                    config.n_heads,
                ),
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                cross_attn: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{p}.cross_attn"),
                    d,
                    d,
                    d,
                    config.n_heads,
                ),
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), d),
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, config.d_ff),
            });
        }
        let head = Linear::new(store, rng, "ats.head", d, config.motion_dim, true);
        Ok(Denoiser {
            config,
            proj_x,
            proj_h,
            pos_tgt,
            pos_mem,
            t_mlp1,
            t_mlp2,
            emotion_table,
            intensity_table,
            affect_proj,
            layers,
            head,
        })
    }

    fn check_inputs(&self, t: usize, audio_rows: usize, affect: AffectLabel) -> Result<()> {
        if t > self.config.t_max {
            return Err(CoreError::Validation(format!(
                "sequence length {t} exceeds positional table t_max {}",
                self.config.t_max
            )));
        }
        if audio_rows != t {
            return Err(CoreError::Validation(format!(
                "audio has {audio_rows} rows, motion has {t}"
            )));
        }
        if affect.emotion_id >= self.config.n_emotions {
            return Err(CoreError::Validation(format!(
                "emotion id {} outside vocabulary of {}",
                affect.emotion_id, self.config.n_emotions
            )));
        }
        if affect.intensity < 1 || affect.intensity > self.config.max_intensity {
            return Err(CoreError::Validation(format!(
                "intensity {} outside 1..={}",
                affect.intensity, self.config.max_intensity
            )));
        }
        Ok(())
    }

    /// Affect embedding `g_c(e, i)`: emotion row + intensity row, projected.
    pub fn embed_affect_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        affect: AffectLabel,
    ) -> Var {
        let e = self.emotion_table.lookup(tape, store, &[affect.emotion_id]);
        let i = self
            .intensity_table
            .lookup(tape, store, &[(affect.intensity - 1) as usize]);
        let summed = tape.add(e, i);
        self.affect_proj.apply(tape, store, summed)
    }

    /// Evaluation-mode affect embedding as a plain 1-by-d row.
    pub fn embed_affect(&self, store: &ParamStore, affect: AffectLabel) -> Result<Mat> {
        self.check_inputs(0, 0, affect).ok();
        if affect.emotion_id >= self.config.n_emotions
            || affect.intensity < 1
            || affect.intensity > self.config.max_intensity
        {
            return Err(CoreError::Validation("affect label out of range".into()));
        }
        let mut tape = Tape::new();
        let v = self.embed_affect_on_tape(&mut tape, store, affect);
        Ok(tape.value(v).clone())
    }

    /// Timestep embedding `g_t(l)`: sinusoidal code through a 2-layer MLP.
    fn embed_timestep(&self, tape: &mut Tape, store: &ParamStore, step: usize) -> Var {
        let sin = tape.leaf(sinusoidal_embedding(step as f64, self.config.d_model));
        let h = self.t_mlp1.apply(tape, store, sin);
        let h = tape.gelu(h);
        self.t_mlp2.apply(tape, store, h)
    }

    /// Full decoder forward on an existing tape. `x_l` is the noisy T-by-D
    /// trajectory; returns the clean estimate as a T-by-D node.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_l: Var,
        step: usize,
        audio: &Mat,
        affect: AffectLabel,
        band_radius: usize,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let (t, d_in) = tape.shape(x_l);
        if d_in != self.config.motion_dim {
            return Err(CoreError::Validation(format!(
                "motion width {d_in} != configured {}",
                self.config.motion_dim
            )));
        }
        self.check_inputs(t, audio.nrows(), affect)?;
        let dropout = if train { self.config.dropout } else { 0.0 };

        // project + positional tables
        let x = self.proj_x.apply(tape, store, x_l);
        let pos_tgt = tape.param(store, self.pos_tgt);
        let pos_tgt = tape.slice_rows(pos_tgt, 0, t);
        let x = tape.add(x, pos_tgt);

        let audio_leaf = tape.leaf(audio.clone());
        let mem = self.proj_h.apply(tape, store, audio_leaf);
        let pos_mem = tape.param(store, self.pos_mem);
        let pos_mem = tape.slice_rows(pos_mem, 0, t);
        let mem = tape.add(mem, pos_mem);

        // conditioning added to every target token
        let g_t = self.embed_timestep(tape, store, step);
        let g_c = self.embed_affect_on_tape(tape, store, affect);
        let cond = tape.add(g_t, g_c);
        let mut z = tape.add_row_broadcast(x, cond);

        let mask = band_mask(t, t, band_radius);
        for layer in &self.layers {
            let a = layer.ln1.apply(tape, store, z);
            let sa = layer
                .self_attn
                .apply(tape, store, a, a, None, dropout, rng, train);
            z = tape.add(z, sa.output);
            let b = layer.ln2.apply(tape, store, z);
            let ca = layer
                .cross_attn
                .apply(tape, store, b, mem, Some(&mask), dropout, rng, train);
            z = tape.add(z, ca.output);
            let c = layer.ln3.apply(tape, store, z);
            let ff = layer.ffn.apply(tape, store, c, dropout, rng, train);
            z = tape.add(z, ff);
        }
        Ok(self.head.apply(tape, store, z))
    }

    /// Deterministic evaluation-mode forward.
    pub fn denoise(
        &self,
        store: &ParamStore,
        x_l: &Mat,
        step: usize,
        audio: &Mat,
        affect: AffectLabel,
        band_radius: usize,
    ) -> Result<Mat> {
        let mut tape = Tape::new();
        let x = tape.leaf(x_l.clone());
        let mut rng = crate::rng::stream(0, "denoise-eval-unused");
        let out = self.denoise_on_tape(
            &mut tape,
            store,
            x,
            step,
            audio,
            affect,
            band_radius,
            false,
            &mut rng,
        )?;
        Ok(tape.value(out).clone())
    }
}

/// Additive cross-attention bias: 0 inside the band `|j - i| <= r`, a large
/// negative number outside.
pub fn band_mask(t_rows: usize, s_cols: usize, radius: usize) -> Mat {
    Mat::from_shape_fn((t_rows, s_cols), |(i, j)| {
        if i.abs_diff(j) <= radius {
            0.0
        } else {
            BAND_MASK_NEG
        }
    })
}
