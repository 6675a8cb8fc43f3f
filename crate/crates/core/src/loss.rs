//! Layer pose loss with learnable translation/rotation balancing, and the
//! three-term loss over a frame triple.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::pose::PoseVar;

/// Fixed per-level weights (finest first) and the two learnable scales.
#[derive(Clone, Debug)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub s_t: ParamId,
    pub s_q: ParamId,
}

impl LossWeights {
    pub fn new(cfg: &Config, store: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            alpha: cfg.loss.alpha.clone(),
            s_t: store.register("loss.s_t", Tensor::scalar(cfg.loss.s_t))?,
            s_q: store.register("loss.s_q", Tensor::scalar(cfg.loss.s_q))?,
        })
    }
}

/// ‖t_gt − t‖₁·e^{−s_t} + s_t + ‖q_gt − q/‖q‖‖₂·e^{−s_q} + s_q, with both
/// quaternions in canonical sign.
pub fn layer_loss(
    tape: &mut Tape,
    pred: PoseVar,
    gt: &RigidTransform,
    s_t: Var,
    s_q: Var,
) -> Result<Var> {
    let q_norm = tape.value(pred.q).data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(q_norm > 1e-12) {
        return Err(Error::DegenerateQuaternion { norm: q_norm });
    }
    let q_gt = tape.constant(Tensor::from_vec(1, 4, gt.q.canonical().to_array().to_vec()));
    let t_gt = tape.constant(Tensor::from_vec(1, 3, gt.t.to_vec()));

    let dt = tape.sub(t_gt, pred.t);
    let adt = tape.abs(dt);
    let l1 = tape.sum_all(adt);

    let unit = tape.normalize_rows(pred.q);
    let q = tape.canonical_sign(unit);
    let dq = tape.sub(q_gt, q);
    let sq = tape.mul(dq, dq);
    let sum = tape.sum_all(sq);
    let l2 = tape.sqrt(sum);

    let neg_t = tape.scale(s_t, -1.0);
    let wt = tape.exp(neg_t);
    let neg_q = tape.scale(s_q, -1.0);
    let wq = tape.exp(neg_q);
    let trans = tape.mul(l1, wt);
    let rot = tape.mul(l2, wq);
    let a = tape.add(trans, s_t);
    let b = tape.add(rot, s_q);
    Ok(tape.add(a, b))
}

/// `Σ_l α_l · ℓ(pred_l, gt)` over the per-level predictions (finest first).
pub fn pair_loss(
    tape: &mut Tape,
    store: &ParamStore,
    weights: &LossWeights,
    preds: &[PoseVar],
    gt: &RigidTransform,
) -> Result<Var> {
    if preds.len() != weights.alpha.len() {
        return Err(Error::Invalid(format!(
            "{} level poses for {} loss weights",
            preds.len(),
            weights.alpha.len()
        )));
    }
    let s_t = tape.param(store, weights.s_t);
    let s_q = tape.param(store, weights.s_q);
    let mut total: Option<Var> = None;
    for (pred, &alpha) in preds.iter().zip(&weights.alpha) {
        let l = layer_loss(tape, *pred, gt, s_t, s_q)?;
        let weighted = tape.scale(l, alpha);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    total.ok_or_else(|| Error::Invalid("no level poses".into()))
}

/// The three-term loss of a frame triple: pairs `(t, t+1)`, `(t+1, t+2)` and
/// the level-wise composition `T^l_{t,t+2} = T^l_{t+1,t+2} ∘ T^l_{t,t+1}`.
/// `gts` are the relative ground truths of the same three transforms.
pub fn window_loss(
    tape: &mut Tape,
    store: &ParamStore,
    weights: &LossWeights,
    first: &[PoseVar],
    second: &[PoseVar],
    gts: [&RigidTransform; 3],
) -> Result<Var> {
    if first.len() != second.len() {
        return Err(Error::Invalid("pair level counts differ".into()));
    }
    let composed: Vec<PoseVar> = first
        .iter()
        .zip(second)
        .map(|(a, b)| PoseVar::compose(tape, *b, *a))
        .collect();
    let l1 = pair_loss(tape, store, weights, first, gts[0])?;
    let l2 = pair_loss(tape, store, weights, second, gts[1])?;
    let l3 = pair_loss(tape, store, weights, &composed, gts[2])?;
    let s = tape.add(l1, l2);
    Ok(tape.add(s, l3))
}
