//! Adam, the step-decay learning-rate schedule and inverted dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{quantize, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update from the gradients currently in `store`.
    pub fn step(&self, store: &mut ParamStore, lr: f64) {
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for e in store.entries_mut() {
            let (value, grad, m, v) = (e.value.data_mut(), e.grad.data(), e.m.data_mut(), e.v.data_mut());
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] = quantize(value[i] - lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
    }
}

/// Step decay: `initial · decay^⌊epoch / every⌋`, floored at `minimum`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub every: u32,
    pub minimum: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            decay: 0.7,
            every: 26,
            minimum: 1e-5,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: u32) -> f64 {
        let k = (epoch / self.every.max(1)) as i32;
        (self.initial * self.decay.powi(k)).max(self.minimum)
    }
}

/// Inverted dropout: identity outside training, otherwise each entry is kept
/// with probability `1 − rate` and scaled by `1 / (1 − rate)`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
    if !tape.is_training() || rate <= 0.0 {
        return x;
    }
    let (r, c) = tape.value(x).shape();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Tensor::from_vec(r, c, mask));
    tape.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_follows_step_decay_and_floor() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 0.001);
        assert_eq!(s.lr(25), 0.001);
        assert!((s.lr(26) - 0.0007).abs() < 1e-15);
        assert!((s.lr(52) - 0.00049).abs() < 1e-15);
        assert_eq!(s.lr(10_000), 0.00001);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let p = store.register_uniform("w", 3, 3, 3, 1).unwrap();
        let before = store.value(p).clone();
        Adam::default().step(&mut store, 1e-3);
        assert_eq!(store.value(p), &before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // t = 1: m̂ = g, v̂ = g², step = lr·g/(|g| + ε).
        let mut store = ParamStore::new();
        let p = store
            .register("x", Tensor::from_vec(1, 2, vec![1.5, -0.5]))
            .unwrap();
        // gradient of the quadratic x² is 2x
        let g = store.value(p).map(|v| 2.0 * v);
        *store.grad_mut(p) = g;
        let lr = 0.01;
        Adam::default().step(&mut store, lr);
        let expect = [1.5 - lr * 3.0 / (3.0 + 1e-8), -0.5 + lr * 1.0 / (1.0 + 1e-8)];
        for (v, e) in store.value(p).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-7, "{v} vs {e}");
        }
    }

    #[test]
    fn second_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        let p = store.register("x", Tensor::scalar(2.0)).unwrap();
        let adam = Adam::default();
        let lr = 0.1;
        let mut x = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * store.value(p).item();
            *store.grad_mut(p) = Tensor::scalar(g);
            adam.step(&mut store, lr);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x = (x - lr * mh / (vh.sqrt() + 1e-8)) as f32 as f64;
        }
        assert_eq!(store.value(p).item(), x);
    }

    #[test]
    fn dropout_is_identity_when_inactive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut eval = Tape::new();
        let x = eval.constant(Tensor::filled(2, 2, 3.0));
        assert_eq!(dropout(&mut eval, x, 0.5, &mut rng), x);

        let mut train = Tape::training();
        let y = train.constant(Tensor::filled(2, 2, 3.0));
        assert_eq!(dropout(&mut train, y, 0.0, &mut rng), y);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::training();
        let x = tape.constant(Tensor::filled(1, 100_000, 1.0));
        let y = dropout(&mut tape, x, 0.5, &mut rng);
        let mean = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }
}
