//! Gated hierarchical pose refinement: GRU embedding update, embedding mask,
//! pose head and the coarse-to-fine layer loop.

use rand_chacha::ChaCha8Rng;

use crate::costvolume::CostVolume;
use crate::error::{Error, Result};
use crate::nn::{dropout, Activation, ParamStore, SharedMlp, Tape, Var};
use crate::pointops::{interpolation_weights, upsample_on_tape};
use crate::pose::PoseVar;
use crate::pyramid::LevelVars;

/// Embedding `E` and mask logits `M` of one level, both `n × D_e`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingState {
    pub e: Var,
    pub m: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub level: usize,
    pub pose: PoseVar,
    pub state: EmbeddingState,
}

#[derive(Clone, Debug)]
pub struct Gru {
    z: SharedMlp,
    r: SharedMlp,
    e: SharedMlp,
    width: usize,
}

/// Gate values of one GRU application.
#[derive(Clone, Copy, Debug)]
pub struct GruTrace {
    pub z: Var,
    pub r: Var,
    pub candidate: Var,
    pub e: Var,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed: usize,
        feature: usize,
        seed: u64,
    ) -> Result<Self> {
        let input = 2 * embed + feature;
        Ok(Self {
            z: SharedMlp::new(store, &format!("{name}.z"), &[input, embed], Activation::Sigmoid, seed)?,
            r: SharedMlp::new(store, &format!("{name}.r"), &[input, embed], Activation::Sigmoid, seed)?,
            e: SharedMlp::new(store, &format!("{name}.e"), &[input, embed], Activation::Tanh, seed)?,
            width: embed,
        })
    }

    pub fn gates(&self) -> [&SharedMlp; 3] {
        [&self.z, &self.r, &self.e]
    }

    /// x = RE ⊕ F; z = σ(MLP_z(CE ⊕ x)); r = σ(MLP_r(CE ⊕ x));
    /// Ẽ = tanh(MLP_E((r ⊙ CE) ⊕ x)); E = (1 − z) ⊙ CE + z ⊙ Ẽ.
    pub fn trace(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        re: Var,
        f: Var,
        ce: Var,
    ) -> Result<GruTrace> {
        let got = tape.value(ce).cols();
        if got != self.width {
            return Err(Error::WidthMismatch {
                name: "gru hidden state".into(),
                expected: self.width,
                got,
            });
        }
        let x = tape.concat(&[re, f]);
        let cx = tape.concat(&[ce, x]);
        let z = self.z.forward(tape, store, cx)?;
        let r = self.r.forward(tape, store, cx)?;
        let rce = tape.mul(r, ce);
        let rx = tape.concat(&[rce, x]);
        let candidate = self.e.forward(tape, store, rx)?;
        let keep = tape.one_minus(z);
        let old = tape.mul(keep, ce);
        let new = tape.mul(z, candidate);
        let e = tape.add(old, new);
        Ok(GruTrace { z, r, candidate, e })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, re: Var, f: Var, ce: Var) -> Result<Var> {
        Ok(self.trace(tape, store, re, f, ce)?.e)
    }
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    mlp: SharedMlp,
    takes_upper: bool,
}

impl MaskHead {
    /// `takes_upper` selects the `E ⊕ F ⊕ CM` input; the coarsest level has
    /// no upper mask and uses `E ⊕ F`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed: usize,
        feature: usize,
        takes_upper: bool,
        seed: u64,
    ) -> Result<Self> {
        let input = embed + feature + if takes_upper { embed } else { 0 };
        Ok(Self {
            mlp: SharedMlp::new(store, name, &[input, embed, embed], Activation::Identity, seed)?,
            takes_upper,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e: Var,
        f: Var,
        cm: Option<Var>,
    ) -> Result<Var> {
        let x = match (cm, self.takes_upper) {
            (Some(cm), true) => tape.concat(&[e, f, cm]),
            (None, false) => tape.concat(&[e, f]),
            _ => return Err(Error::Invalid("mask head: upper mask presence mismatch".into())),
        };
        self.mlp.forward(tape, store, x)
    }
}

#[derive(Clone, Debug)]
pub struct PoseHead {
    fc: SharedMlp,
    dropout: f64,
}

impl PoseHead {
    /// The final layer starts at zero with bias `(1, 0, 0, 0 | 0, 0, 0)`, so
    /// a fresh head predicts the identity residual for any input.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed: usize,
        hidden: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        let fc = SharedMlp::new(store, name, &[embed, hidden, 7], Activation::Identity, seed)?;
        let last = fc.last().clone();
        store.value_mut(last.weight).fill(0.0);
        store.value_mut(last.bias).data_mut()[0] = 1.0;
        Ok(Self { fc, dropout })
    }

    /// Per-channel softmax of `m` over points, then the weighted sum of `e`.
    pub fn pool(tape: &mut Tape, e: Var, m: Var) -> Var {
        let n = tape.value(m).rows();
        let w = tape.group_softmax(m, n);
        let we = tape.mul(w, e);
        tape.group_sum(we, n)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e: Var,
        m: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<PoseVar> {
        let pooled = Self::pool(tape, e, m);
        let dropped = dropout(tape, pooled, self.dropout, rng);
        let raw = self.fc.forward(tape, store, dropped)?;
        let q_raw = tape.slice_cols(raw, 0, 4);
        let norm = tape.value(q_raw).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(Error::DegenerateQuaternion { norm });
        }
        let unit = tape.normalize_rows(q_raw);
        let q = tape.canonical_sign(unit);
        let t = tape.slice_cols(raw, 4, 3);
        Ok(PoseVar { q, t })
    }
}

/// Parameters of one refinement level below the coarsest.
#[derive(Clone, Debug)]
pub struct RefineLevel {
    pub level: usize,
    pub cost_volume: CostVolume,
    pub gru: Gru,
    pub mask: MaskHead,
    pub pose: PoseHead,
}

impl RefineLevel {
    /// Upsamples the upper embedding and mask onto this level, computes the
    /// residual embedding under the upper pose, updates `E` and `M`, and
    /// composes the predicted residual onto the upper pose.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        upper: &LayerOutput,
        upper_a: &LevelVars,
        a: &LevelVars,
        b: &LevelVars,
        rng: &mut ChaCha8Rng,
    ) -> Result<LayerOutput> {
        let interp = interpolation_weights(&upper_a.points, &a.points)?;
        tape.note_branch(&interp.indices);
        let ce = upsample_on_tape(tape, upper.state.e, &interp);
        let cm = upsample_on_tape(tape, upper.state.m, &interp);
        let re = self.cost_volume.residual(tape, store, a, b, upper.pose)?;
        let e = self.gru.forward(tape, store, re, a.features, ce)?;
        let m = self.mask.forward(tape, store, e, a.features, Some(cm))?;
        let delta = self.pose.forward(tape, store, e, m, rng)?;
        let pose = PoseVar::compose(tape, delta, upper.pose);
        Ok(LayerOutput {
            level: self.level,
            pose,
            state: EmbeddingState { e, m },
        })
    }
}

/// Runs every level below `coarsest`, finest last. Returns one output per
/// level, indexed by level (0 = finest).
#[allow(clippy::too_many_arguments)]
pub fn hierarchical_refine(
    levels: &[RefineLevel],
    tape: &mut Tape,
    store: &ParamStore,
    coarsest: LayerOutput,
    a: &[LevelVars],
    b: &[LevelVars],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LayerOutput>> {
    let mut outputs = vec![coarsest];
    let mut upper = coarsest;
    for lvl in levels.iter().rev() {
        let l = lvl.level;
        let out = lvl.forward(tape, store, &upper, &a[l + 1], &a[l], &b[l], rng)?;
        outputs.push(out);
        upper = out;
    }
    outputs.reverse();
    Ok(outputs)
}
