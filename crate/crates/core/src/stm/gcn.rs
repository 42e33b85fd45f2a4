//! Lightweight graph convolutional network on the fixed landmark graph.
//!
//! Each layer is `relu(A_hat X W + b)` with the symmetric-normalized
//! adjacency (self-loops included). The adjacency is passed in dense form;
//! landmark graphs are small.

use rand::Rng;

use crate::nn::layers::Linear;
use crate::nn::params::{ParamStore};
use crate::nn::tape::{Mat, Tape, Var};

pub struct Gcn {
    layers: Vec<Linear>,
    adjacency: Mat,
    pub out_width: usize,
}

impl Gcn {
    /// `adjacency` is the (already normalized) dense N-by-N operator.
    /// `bias = false` makes the zero input map exactly to zero.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        adjacency: Mat,
        in_width: usize,
        hidden: usize,
        n_layers: usize,
        bias: bool,
    ) -> Gcn {
        assert!(n_layers >= 1);
        assert_eq!(adjacency.nrows(), adjacency.ncols());
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let d_in = if i == 0 { in_width } else { hidden };
            layers.push(Linear::new(
                store,
                rng,
                &format!("{name}.layer{i}"),
                d_in,
                hidden,
                bias,
            ));
        }
        Gcn {
            layers,
            adjacency,
            out_width: hidden,
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let adj = tape.leaf(self.adjacency.clone());
        let mut h = x;
        for layer in &self.layers {
            let mixed = tape.matmul(adj, h);
            let lin = layer.apply(tape, store, mixed);
            h = tape.relu(lin);
        }
        h
    }
}
