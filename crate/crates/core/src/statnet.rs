//! Scalar-output critic networks for the Jensen-Shannon mutual-information
//! estimator.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Params};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatNetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of hidden layers.
    pub num_layers: usize,
}

impl Default for StatNetConfig {
    fn default() -> Self {
        StatNetConfig {
            input_dim: 2,
            hidden_dim: 64,
            num_layers: 2,
        }
    }
}

/// MLP `input_dim -> hidden x num_layers -> 1` with tanh activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatNet<T> {
    pub config: StatNetConfig,
    pub layers: Vec<Linear<T>>,
}

pub struct StatNetCache<T> {
    inputs: Vec<Array2<T>>,
    acts: Vec<Array2<T>>,
}

impl<T: Scalar> StatNet<T> {
    pub fn new(config: StatNetConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::InvalidConfig("statnet dims must be positive".into()));
        }
        let mut rng = seed::rng(seed, &[0x57A7]);
        let mut dims = vec![config.input_dim];
        dims.extend(std::iter::repeat_n(config.hidden_dim, config.num_layers));
        dims.push(1);
        let layers = dims.windows(2).map(|w| Linear::new(&mut rng, w[0], w[1])).collect();
        Ok(StatNet { config, layers })
    }

    /// A critic that outputs the constant `c` for every input.
    pub fn constant(config: StatNetConfig, c: T) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.fill(T::zero());
        net.layers.last_mut().expect("output layer").b[0] = c;
        Ok(net)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(T::zero());
        z
    }

    fn check(&self, x: ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "statnet expects {} input columns, got {}",
                self.config.input_dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Scores each row of `x`.
    pub fn forward(&self, x: ArrayView2<T>) -> Result<Vec<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> Result<(Vec<T>, StatNetCache<T>)> {
        self.check(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(h.view());
            inputs.push(h);
            h = if i < last { y.mapv(|v| v.tanh()) } else { y };
            acts.push(h.clone());
        }
        Ok((h.column(0).to_vec(), StatNetCache { inputs, acts }))
    }

    /// Given `dL/dscore` per row, accumulates parameter gradients and returns
    /// `dL/dx`.
    pub fn backward(&self, cache: &StatNetCache<T>, d_score: &[T], grad: &mut StatNet<T>) -> Array2<T> {
        let n = d_score.len();
        let mut d = Array2::from_shape_vec((n, 1), d_score.to_vec()).expect("column");
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                d *= &cache.acts[i].mapv(|a| T::one() - a * a);
            }
            d = self.layers[i].backward(cache.inputs[i].view(), d.view(), &mut grad.layers[i]);
        }
        d
    }
}

impl<T: Scalar> Params<T> for StatNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{i}")), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

/// The two critics: one for target-class responses, one for the non-target
/// remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCritics<T> {
    pub target: StatNet<T>,
    pub non_target: StatNet<T>,
}

impl<T: Scalar> ResponseCritics<T> {
    pub fn new(num_classes: usize, hidden_dim: usize, num_layers: usize, seed: u64) -> Result<Self> {
        let cfg = |input_dim| StatNetConfig {
            input_dim,
            hidden_dim,
            num_layers,
        };
        Ok(ResponseCritics {
            target: StatNet::new(cfg(2), seed::mix(seed, &[1]))?,
            non_target: StatNet::new(cfg(2 * (num_classes - 1)), seed::mix(seed, &[2]))?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ResponseCritics {
            target: self.target.zeros_like(),
            non_target: self.non_target.zeros_like(),
        }
    }
}

impl<T: Scalar> Params<T> for ResponseCritics<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.target.visit(&join(prefix, "tcr"), f);
        self.non_target.visit(&join(prefix, "ntcr"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.target.visit_mut(f);
        self.non_target.visit_mut(f);
    }
}
