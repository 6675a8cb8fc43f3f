//! Minimal neural-network core: tensors, a reverse-mode tape, parameter
//! storage, shared MLPs, Adam and checkpoints.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use mlp::{Activation, SharedMlp};
pub use optim::{dropout, Adam, LrSchedule};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Runs the reverse sweep from `loss` and adds every parameter gradient into
/// `store`. A non-finite loss is rejected before any gradient is touched.
pub fn backward_into(tape: &Tape, loss: Var, store: &mut ParamStore) -> Result<f64> {
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss ({value})")));
    }
    let grads = tape.backward(loss);
    for (pid, node) in tape.param_nodes() {
        if let Some(g) = grads.wrt(node) {
            store.grad_mut(pid).add_assign(g);
        }
    }
    Ok(value)
}
