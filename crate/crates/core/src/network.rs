//! Fully connected projection heads mapping raw features into label space.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::init::xavier_uniform;
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// `d_in -> h -> h -> h -> c` with ReLU and dropout after every hidden layer
/// and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionNet {
    pub modality: Modality,
    pub widths: Vec<usize>,
    pub layers: Vec<Layer>,
    pub dropout: f64,
}

impl ProjectionNet {
    pub fn new(
        store: &mut ParamStore,
        modality: Modality,
        d_in: usize,
        hidden: usize,
        classes: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if d_in == 0 || hidden == 0 || classes == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut widths = vec![d_in];
        widths.extend(std::iter::repeat_n(hidden, HIDDEN_LAYERS));
        widths.push(classes);
        let tag = match modality {
            Modality::Audio => 0,
            Modality::Visual => 1,
        };
        let mut rng = seed::rng(seed, &[seed::STREAM_INIT, 100 + tag]);
        let name = modality.as_str();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| Layer {
                weight: store.add(format!("{name}.fc{l}.weight"), xavier_uniform(w[0], w[1], &mut rng)),
                bias: store.add(format!("{name}.fc{l}.bias"), Tensor::zeros(&[w[1]])),
            })
            .collect();
        Ok(Self {
            modality,
            widths,
            layers,
            dropout,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Records the forward pass of a `batch x d_in` input on `tape`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool, seed: u64) -> Result<Var> {
        let input = tape.value(x);
        if input.rank() != 2 || input.cols() != self.input_dim() {
            return Err(Error::Contract(format!(
                "{} network expects {} input columns, got shape {:?}",
                self.modality.as_str(),
                self.input_dim(),
                input.shape()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.param(store, layer.weight)?;
            let b = tape.param(store, layer.bias)?;
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if l < last {
                h = tape.relu(h)?;
                let s = seed::derive(seed, &[seed::STREAM_DROPOUT, l as u64]);
                h = tape.dropout(h, self.dropout, train, s)?;
            }
        }
        Ok(h)
    }

    /// Eval-mode projection of a feature matrix.
    pub fn project(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone())?;
        let out = self.forward(&mut tape, store, v, false, 0)?;
        Ok(tape.value(out).clone())
    }
}
