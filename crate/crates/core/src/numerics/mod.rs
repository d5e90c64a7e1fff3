//! Dense tensors, reverse-mode differentiation, a finite-difference checker and AdamW.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, rel_err, GradReport, DEFAULT_EPS};
pub use graph::{conv_out, Gradients, Graph, Var};
pub use optim::{AdamConfig, AdamW};
pub use params::{init, ParamEntry, ParamId, ParamStore, Partition};
pub use tensor::{Scalar, Tensor};

/// `x·W + b` for `x[n, in]`, `W[in, out]`, `b[out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, weight: ParamId, bias: ParamId) -> crate::Result<Var> {
    let w = g.param(store, weight);
    let b = g.param(store, bias);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Layer norm over the last axis followed by a learned gain and bias.
pub fn layer_norm_affine<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    gain: ParamId,
    bias: ParamId,
) -> crate::Result<Var> {
    let n = g.layer_norm(x, 1e-5)?;
    let gv = g.param(store, gain);
    let bv = g.param(store, bias);
    let y = g.mul_row(n, gv)?;
    g.add_row(y, bv)
}
