//! Temporal propagation at the coarsest level: the motion relay moves the
//! previous frame's recurrent state onto the current points, and a peephole
//! LSTM fuses it with the new residual embedding.

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn::{Activation, ParamStore, SharedMlp, Tape, Tensor, Var};
use crate::pointops::{group_relative_on_tape, knn, points_tensor};
use crate::pose::PoseVar;

/// Recurrent state anchored to the coarsest points of one frame, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalState {
    pub anchors: Vec<Point>,
    pub c: Tensor,
    pub e: Tensor,
}

/// Recurrent state on a tape.
#[derive(Clone, Debug)]
pub struct StateVars {
    pub anchors: Vec<Point>,
    pub c: Var,
    pub e: Var,
}

impl TemporalState {
    pub fn load(&self, tape: &mut Tape) -> StateVars {
        StateVars {
            anchors: self.anchors.clone(),
            c: tape.constant(self.c.clone()),
            e: tape.constant(self.e.clone()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

impl StateVars {
    pub fn value(&self, tape: &Tape) -> TemporalState {
        TemporalState {
            anchors: self.anchors.clone(),
            c: tape.value(self.c).clone(),
            e: tape.value(self.e).clone(),
        }
    }
}

/// State of the first pair in a sequence: zero cell, `E` from the cost volume.
pub fn cold_start(tape: &mut Tape, anchors: &[Point], e_init: Var) -> StateVars {
    let (n, d) = tape.value(e_init).shape();
    StateVars {
        anchors: anchors.to_vec(),
        c: tape.constant(Tensor::zeros(n, d)),
        e: e_init,
    }
}

#[derive(Clone, Debug)]
pub struct Relay {
    c: SharedMlp,
    e: SharedMlp,
    k: usize,
    geometry: bool,
}

impl Relay {
    /// With `geometry` the MLP input is `Δxyz ⊕ state`, otherwise the state
    /// alone.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed: usize,
        k: usize,
        geometry: bool,
        seed: u64,
    ) -> Result<Self> {
        let input = embed + if geometry { 3 } else { 0 };
        Ok(Self {
            c: SharedMlp::new(store, &format!("{name}.c"), &[input, embed], Activation::Identity, seed)?,
            e: SharedMlp::new(store, &format!("{name}.e"), &[input, embed], Activation::Identity, seed)?,
            k,
            geometry,
        })
    }

    pub fn mlps(&self) -> [&SharedMlp; 2] {
        [&self.c, &self.e]
    }

    /// Warps the previous anchors by `t_init`, gathers the `k` nearest warped
    /// anchors of every current point and max-pools the MLP outputs.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prev: &StateVars,
        current_xyz: Var,
        current: &[Point],
        t_init: PoseVar,
    ) -> Result<(Var, Var)> {
        if prev.anchors.is_empty() {
            return Err(Error::EmptyTemporalState);
        }
        let anchors = tape.constant(points_tensor(&prev.anchors));
        let (warped, warped_points) = t_init.warp(tape, anchors);
        let k = self.k.min(warped_points.len());
        let nbrs = knn(current, &warped_points, k)?;
        tape.note_branch(&nbrs.indices);
        let mut pooled = [prev.c; 2];
        for (slot, (mlp, state)) in [(&self.c, prev.c), (&self.e, prev.e)].into_iter().enumerate() {
            let input = if self.geometry {
                group_relative_on_tape(tape, current_xyz, warped, state, &nbrs)
            } else {
                tape.gather(state, nbrs.indices.clone())
            };
            let h = mlp.forward(tape, store, input)?;
            pooled[slot] = tape.group_max(h, k);
        }
        Ok((pooled[0], pooled[1]))
    }
}

#[derive(Clone, Debug)]
pub struct PeepholeLstm {
    f: SharedMlp,
    i: SharedMlp,
    c: SharedMlp,
    o: SharedMlp,
}

/// Gate values of one LSTM step.
#[derive(Clone, Copy, Debug)]
pub struct LstmTrace {
    pub f: Var,
    pub i: Var,
    pub candidate: Var,
    pub o: Var,
    pub c: Var,
    pub e: Var,
}

impl PeepholeLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed: usize,
        feature: usize,
        seed: u64,
    ) -> Result<Self> {
        let gate = 3 * embed + feature;
        let cand = 2 * embed + feature;
        Ok(Self {
            f: SharedMlp::new(store, &format!("{name}.f"), &[gate, embed], Activation::Sigmoid, seed)?,
            i: SharedMlp::new(store, &format!("{name}.i"), &[gate, embed], Activation::Sigmoid, seed)?,
            c: SharedMlp::new(store, &format!("{name}.c"), &[cand, embed], Activation::Tanh, seed)?,
            o: SharedMlp::new(store, &format!("{name}.o"), &[gate, embed], Activation::Sigmoid, seed)?,
        })
    }

    pub fn gates(&self) -> [&SharedMlp; 4] {
        [&self.f, &self.i, &self.c, &self.o]
    }

    /// x = RE ⊕ F; f = σ(MLP_f(c' ⊕ E' ⊕ x)); i = σ(MLP_i(c' ⊕ E' ⊕ x));
    /// c̃ = tanh(MLP_c(E' ⊕ x)); c = f ⊙ c' + i ⊙ c̃;
    /// o = σ(MLP_o(c ⊕ E' ⊕ x)); E = o ⊙ tanh(c).
    pub fn trace(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        c_prev: Var,
        e_prev: Var,
        re: Var,
        f: Var,
    ) -> Result<LstmTrace> {
        let x = tape.concat(&[re, f]);
        let gate_in = tape.concat(&[c_prev, e_prev, x]);
        let fg = self.f.forward(tape, store, gate_in)?;
        let ig = self.i.forward(tape, store, gate_in)?;
        let cand_in = tape.concat(&[e_prev, x]);
        let candidate = self.c.forward(tape, store, cand_in)?;
        let kept = tape.mul(fg, c_prev);
        let added = tape.mul(ig, candidate);
        let c = tape.add(kept, added);
        let out_in = tape.concat(&[c, e_prev, x]);
        let o = self.o.forward(tape, store, out_in)?;
        let squashed = tape.tanh(c);
        let e = tape.mul(o, squashed);
        Ok(LstmTrace {
            f: fg,
            i: ig,
            candidate,
            o,
            c,
            e,
        })
    }
}
