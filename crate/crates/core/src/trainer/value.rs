use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::policy::{init_mlp, record_mlp};
use crate::{Error, Result};

/// State-value network: the policy's tanh MLP shape with a scalar head.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    dims: Vec<usize>,
    params: Vec<f64>,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![obs_dim];
        dims.extend(hidden);
        dims.push(1);
        if dims.contains(&0) {
            return Err(Error::invalid("zero-sized value network"));
        }
        let params = init_mlp(&dims, rng)?;
        Ok(Self { dims, params })
    }

    pub fn obs_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Records `V(s_i)` as a `[B]` vector.
    pub fn record(&self, tape: &mut Tape, params: Var, states: &[f64]) -> Result<Var> {
        let d = self.obs_dim();
        if states.is_empty() || !states.len().is_multiple_of(d) {
            return Err(Error::Dimension(format!("{} state values for observation size {d}", states.len())));
        }
        let b = states.len() / d;
        let x = tape.constant(Tensor::matrix(b, d, states.to_vec())?);
        let (out, _) = record_mlp(tape, params, 0, &self.dims, x)?;
        Ok(tape.reshape(out, vec![b])?)
    }

    pub fn predict(&self, states: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(self.params.clone()));
        let v = self.record(&mut tape, p, states)?;
        Ok(tape.value(v).data().to_vec())
    }
}
