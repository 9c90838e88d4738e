//! Graph-convolutional stack applied at every time step with shared weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{tensor, uniform_init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcnConfig {
    pub layers: usize,
    pub hidden_dim: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden_dim: 64,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Validation(format!(
                "gcn layers and hidden_dim must be ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Registers `gcn.w0 .. gcn.w{layers-1}` in `store`.
    pub fn register<R: Rng>(&self, store: &mut ParamStore, input_dim: usize, rng: &mut R) -> Result<Vec<ParamId>> {
        self.validate()?;
        let mut ids = Vec::with_capacity(self.layers);
        let mut d_in = input_dim;
        for l in 0..self.layers {
            ids.push(store.add(format!("gcn.w{l}"), uniform_init(rng, &[d_in, self.hidden_dim], d_in))?);
            d_in = self.hidden_dim;
        }
        Ok(ids)
    }
}

/// `ReLU(Â·H·W)` for one time step.
pub fn gcn_layer_forward(h: &Tensor, a_hat: &Tensor, w: &Tensor) -> Result<Tensor> {
    let n = a_hat.shape().first().copied().unwrap_or(0);
    if a_hat.shape() != [n, n] || h.shape().len() != 2 || h.shape()[0] != n {
        return Err(Error::Dimension(format!(
            "gcn layer: Â {:?}, H {:?}",
            a_hat.shape(),
            h.shape()
        )));
    }
    let mixed = tensor::matmul(a_hat, h)?;
    tensor::relu(&tensor::matmul(&mixed, w)?)
}

/// Applies the stack independently at each step of `x: [N, T, F]`.
pub fn gcn_stack_forward(x: &Tensor, a_hat: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
    let &[n, t, f] = x.shape() else {
        return Err(Error::Dimension(format!(
            "gcn stack expects [N, T, F], got {:?}",
            x.shape()
        )));
    };
    let out_dim = weights.last().map_or(f, |w| w.cols());
    let mut out = vec![0.0; n * t * out_dim];
    for step in 0..t {
        let mut data = Vec::with_capacity(n * f);
        for node in 0..n {
            let base = (node * t + step) * f;
            data.extend_from_slice(&x.data()[base..base + f]);
        }
        let mut h = Tensor::new(vec![n, f], data)?;
        for (l, w) in weights.iter().enumerate() {
            h = gcn_layer_forward(&h, a_hat, w).map_err(|e| e.in_layer(&format!("gcn layer {l}")))?;
        }
        for node in 0..n {
            let base = (node * t + step) * out_dim;
            out[base..base + out_dim].copy_from_slice(h.row(node));
        }
    }
    Tensor::new(vec![n, t, out_dim], out)
}

/// Differentiable stack on a tape. `x` is `[N, T, F]`; the result is
/// `[N, T, hidden]`. Mixing all steps at once is `Â · reshape(H, [N, T·d])`.
pub fn gcn_stack_tape(tape: &mut Tape<'_>, x: Var, a_hat: Var, weights: &[Var]) -> Result<Var> {
    let &[n, t, f] = tape.value(x).shape() else {
        return Err(Error::Dimension(format!(
            "gcn stack expects [N, T, F], got {:?}",
            tape.value(x).shape()
        )));
    };
    let mut h = x;
    let mut d_in = f;
    for (l, &w) in weights.iter().enumerate() {
        let step = |tape: &mut Tape<'_>| -> Result<Var> {
            let flat = tape.reshape(h, &[n, t * d_in])?;
            let mixed = tape.matmul(a_hat, flat)?;
            let rows = tape.reshape(mixed, &[n * t, d_in])?;
            let proj = tape.matmul(rows, w)?;
            tape.relu(proj)
        };
        let out = step(tape).map_err(|e| e.in_layer(&format!("gcn layer {l}")))?;
        d_in = tape.value(out).cols();
        h = tape.reshape(out, &[n, t, d_in])?;
    }
    Ok(h)
}
