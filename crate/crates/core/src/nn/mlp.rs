//! Fully-connected networks over the autodiff tape.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::NnError;
use crate::params::ParamStore;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Architecture of one MLP. `depth` counts linear layers; the final layer
/// has no activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, depth: usize, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dim,
            depth,
            output_dim,
            activation: Activation::Relu,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(NnError::BadSpec("all dims must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(NnError::BadSpec("depth must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(NnError::BadSpec(format!(
                "dropout rate {} outside [0,1]",
                self.dropout
            )));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of each linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth);
        for l in 0..self.depth {
            let fan_in = if l == 0 { self.input_dim } else { self.hidden_dim };
            let fan_out = if l + 1 == self.depth {
                self.output_dim
            } else {
                self.hidden_dim
            };
            dims.push((fan_in, fan_out));
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }
}

/// An MLP bound to a spec; parameters live in a caller-owned ParamStore.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        Ok(Mlp { spec })
    }

    /// Fresh parameters, uniform in +-1/sqrt(fan_in) per layer.
    pub fn init_params(&self, rng: &mut Stream) -> ParamStore {
        let mut params = Vec::with_capacity(self.spec.param_count());
        for (fan_in, fan_out) in self.spec.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                params.push(rng.uniform_in(-bound, bound));
            }
        }
        ParamStore::from_vec(params)
    }

    /// Record a batched forward pass on the tape. Input is (batch x input_dim).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: Var,
        train_mode: bool,
        rng: Option<&mut Stream>,
    ) -> Result<Var, NnError> {
        let in_cols = tape.value(input).ncols();
        if in_cols != self.spec.input_dim {
            return Err(NnError::DimMismatch {
                what: "mlp input",
                expected: self.spec.input_dim,
                actual: in_cols,
            });
        }
        if store.len() != self.spec.param_count() {
            return Err(NnError::DimMismatch {
                what: "mlp params",
                expected: self.spec.param_count(),
                actual: store.len(),
            });
        }
        let use_dropout = train_mode && self.spec.dropout > 0.0;
        let mut rng = rng;
        if use_dropout && rng.is_none() {
            return Err(NnError::MissingRng);
        }

        let batch = tape.value(input).nrows();
        let mut h = input;
        let mut offset = 0;
        let dims = self.spec.layer_dims();
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = tape.param_matrix(store, offset, fan_in, fan_out);
            offset += fan_in * fan_out;
            let b = tape.param_matrix(store, offset, 1, fan_out);
            offset += fan_out;
            let z = tape.matmul(h, w);
            h = tape.add_row(z, b);
            if l + 1 < dims.len() {
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
                if use_dropout {
                    // inverted dropout: scale kept units by 1/(1-rate)
                    let rate = self.spec.dropout;
                    let keep = 1.0 / (1.0 - rate);
                    let r = rng.as_deref_mut().unwrap();
                    let mask = Array2::from_shape_fn((batch, fan_out), |_| {
                        if r.uniform() < rate {
                            0.0
                        } else {
                            keep
                        }
                    });
                    let mask = tape.constant(mask);
                    h = tape.mul(h, mask);
                }
            }
        }
        Ok(h)
    }

    /// Tape-free batched forward for inference (dropout disabled).
    pub fn forward_array(
        &self,
        store: &ParamStore,
        input: &Array2<f64>,
    ) -> Result<Array2<f64>, NnError> {
        if input.ncols() != self.spec.input_dim {
            return Err(NnError::DimMismatch {
                what: "mlp input",
                expected: self.spec.input_dim,
                actual: input.ncols(),
            });
        }
        if store.len() != self.spec.param_count() {
            return Err(NnError::DimMismatch {
                what: "mlp params",
                expected: self.spec.param_count(),
                actual: store.len(),
            });
        }
        let mut h = input.clone();
        let mut offset = 0;
        let dims = self.spec.layer_dims();
        let p = store.params();
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w =
                ndarray::ArrayView2::from_shape((fan_in, fan_out), &p[offset..offset + fan_in * fan_out])
                    .unwrap();
            offset += fan_in * fan_out;
            let b = &p[offset..offset + fan_out];
            offset += fan_out;
            let mut z = h.dot(&w);
            for mut row in z.rows_mut() {
                for (x, &bi) in row.iter_mut().zip(b) {
                    *x += bi;
                }
            }
            if l + 1 < dims.len() {
                match self.spec.activation {
                    Activation::Relu => z.mapv_inplace(|x| x.max(0.0)),
                    Activation::Tanh => z.mapv_inplace(f64::tanh),
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Single-vector convenience wrapper around `forward_array`.
    pub fn forward_vec(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let a = Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap();
        Ok(self.forward_array(store, &a)?.into_raw_vec_and_offset().0)
    }
}
