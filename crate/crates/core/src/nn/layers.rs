//! Reusable layer parameter bundles: linear, layer norm, multi-head
//! attention, feed-forward, embeddings, and the sinusoidal timestep code.

use rand::Rng;

use crate::nn::params::{normal_init, ones, xavier_uniform, zeros, ParamId, ParamStore};
use crate::nn::tape::{Mat, Tape, Var};

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Linear {
        let w = store.register(format!("{name}.w"), xavier_uniform(d_in, d_out, rng), false);
        let b = bias.then(|| store.register(format!("{name}.b"), zeros(1, d_out), true));
        Linear { w, b, d_in, d_out }
    }

    /// Zero-initialized variant for output heads: the layer starts as the
    /// zero map, which keeps early training in the target's scale.
    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Linear {
        let w = store.register(format!("{name}.w"), zeros(d_in, d_out), false);
        let b = Some(store.register(format!("{name}.b"), zeros(1, d_out), true));
        Linear { w, b, d_in, d_out }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = tape.param(store, b);
                tape.add_row_broadcast(y, bv)
            }
            None => y,
        }
    }
}

pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gain: store.register(format!("{name}.gain"), ones(1, dim), true),
            bias: store.register(format!("{name}.bias"), zeros(1, dim), true),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        d_hidden: usize,
    ) -> FeedForward {
        FeedForward {
            lin1: Linear::new(store, rng, &format!("{name}.lin1"), d_model, d_hidden, true),
            lin2: Linear::new(store, rng, &format!("{name}.lin2"), d_hidden, d_model, true),
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dropout: f64,
        rng: &mut impl Rng,
        train: bool,
    ) -> Var {
        let h = self.lin1.apply(tape, store, x);
        let h = tape.gelu(h);
        let h = if train && dropout > 0.0 {
            tape.dropout(h, dropout, rng)
        } else {
            h
        };
        self.lin2.apply(tape, store, h)
    }
}

pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

pub struct AttentionResult {
    pub output: Var,
    /// Post-softmax attention weights, one Var per head (rows = queries).
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    /// `d_q`/`d_kv` are the input widths of the query and key/value streams;
    /// projections map both into `d_model`, and the output is `d_model` wide.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_q: usize,
        d_kv: usize,
        d_model: usize,
        heads: usize,
    ) -> MultiHeadAttention {
        assert!(d_model % heads == 0, "d_model must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d_q, d_model, true),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d_kv, d_model, true),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d_kv, d_model, true),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d_model, d_model, true),
            heads,
            d_model,
        }
    }

    /// Scaled dot-product attention; `mask` is an additive bias on the
    /// pre-softmax logits shared across heads.
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries_in: Var,
        keys_values_in: Var,
        mask: Option<&Mat>,
        dropout: f64,
        rng: &mut impl Rng,
        train: bool,
    ) -> AttentionResult {
        let q = self.wq.apply(tape, store, queries_in);
        let k = self.wk.apply(tape, store, keys_values_in);
        let v = self.wv.apply(tape, store, keys_values_in);
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask_var = mask.map(|m| tape.leaf(m.clone()));

        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let scores = match mask_var {
                Some(m) => tape.add(scores, m),
                None => scores,
            };
            let attn = tape.softmax_rows(scores);
            weights.push(attn);
            let attn = if train && dropout > 0.0 {
                tape.dropout(attn, dropout, rng)
            } else {
                attn
            };
            contexts.push(tape.matmul(attn, vh));
        }
        let ctx = tape.concat_cols(&contexts);
        let output = self.wo.apply(tape, store, ctx);
        AttentionResult { output, weights }
    }
}

pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        entries: usize,
        dim: usize,
    ) -> Embedding {
        Embedding {
            table: store.register(format!("{name}.table"), normal_init(entries, dim, 0.02, rng), true),
            dim,
        }
    }

    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Var {
        let t = tape.param(store, self.table);
        tape.gather_rows(t, ids.to_vec())
    }
}

/// Classic sinusoidal position/timestep code, returned as a 1-by-dim row.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Mat {
    let mut out = Mat::zeros((1, dim));
    let half = dim / 2;
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[(0, 2 * i)] = (position * freq).sin();
        out[(0, 2 * i + 1)] = (position * freq).cos();
    }
    out
}
