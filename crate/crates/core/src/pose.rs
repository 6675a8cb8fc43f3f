//! Rigid transforms carried on a tape so poses can be differentiated.

use crate::geometry::{Point, Quaternion, RigidTransform};
use crate::nn::{Tape, Tensor, Var};
use crate::pointops::as_points;

/// `q` is a `1 × 4` unit quaternion `(w, x, y, z)`, `t` a `1 × 3` translation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoseVar {
    pub q: Var,
    pub t: Var,
}

impl PoseVar {
    pub fn constant(tape: &mut Tape, pose: &RigidTransform) -> Self {
        Self {
            q: tape.constant(Tensor::from_vec(1, 4, pose.q.to_array().to_vec())),
            t: tape.constant(Tensor::from_vec(1, 3, pose.t.to_vec())),
        }
    }

    /// Reads the current value back without renormalizing, so a pose that
    /// leaves the tape and re-enters it is bit-identical.
    pub fn value(&self, tape: &Tape) -> RigidTransform {
        let q: [f64; 4] = tape.value(self.q).data().try_into().expect("q is 1x4");
        let t: [f64; 3] = tape.value(self.t).data().try_into().expect("t is 1x3");
        RigidTransform {
            q: Quaternion::from_array(q),
            t,
        }
    }

    /// `residual ∘ base`: q = canon(normalize(Δq ⊗ q_base)),
    /// t = R(Δq)·t_base + Δt.
    pub fn compose(tape: &mut Tape, residual: PoseVar, base: PoseVar) -> PoseVar {
        let prod = tape.quat_mul(residual.q, base.q);
        let unit = tape.normalize_rows(prod);
        let q = tape.canonical_sign(unit);
        let rotated = rotate_rows(tape, residual.q, base.t);
        let t = tape.add(rotated, residual.t);
        PoseVar { q, t }
    }

    /// Applies the pose to an `n × 3` point matrix.
    pub fn apply(&self, tape: &mut Tape, xyz: Var) -> Var {
        let rotated = rotate_rows(tape, self.q, xyz);
        tape.add_bias(rotated, self.t)
    }

    /// Applies the pose and also returns the warped coordinates as values.
    pub fn warp(&self, tape: &mut Tape, xyz: Var) -> (Var, Vec<Point>) {
        let out = self.apply(tape, xyz);
        let points = as_points(tape.value(out)).to_vec();
        (out, points)
    }
}

/// Rows of `x` (each a 3-vector) rotated by the quaternion `q`: `x · Rᵀ`.
fn rotate_rows(tape: &mut Tape, q: Var, x: Var) -> Var {
    let r = tape.quat_to_rot(q);
    let rt = tape.transpose(r);
    tape.matmul(x, rt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (RigidTransform, RigidTransform) {
        (
            RigidTransform::from_axis_angle([0.2, -0.4, 1.0], 0.7, [0.3, -1.2, 0.5]),
            RigidTransform::from_axis_angle([1.0, 0.5, 0.1], -0.4, [2.0, 0.1, -0.3]),
        )
    }

    #[test]
    fn compose_matches_value_geometry() {
        let (a, b) = sample();
        let mut tape = Tape::new();
        let (va, vb) = (PoseVar::constant(&mut tape, &a), PoseVar::constant(&mut tape, &b));
        let c = PoseVar::compose(&mut tape, va, vb).value(&tape);
        assert!(c.approx_eq(&RigidTransform::compose(&a, &b), 1e-12));
    }

    #[test]
    fn identity_residual_is_exact() {
        let (_, b) = sample();
        let mut tape = Tape::new();
        let id = PoseVar::constant(&mut tape, &RigidTransform::IDENTITY);
        let vb = PoseVar::constant(&mut tape, &b);
        let c = PoseVar::compose(&mut tape, id, vb).value(&tape);
        assert_eq!(c, b);
    }

    #[test]
    fn apply_matches_value_geometry() {
        let (a, _) = sample();
        let pts = [[1.0, 2.0, 3.0], [-0.5, 0.0, 4.0]];
        let mut tape = Tape::new();
        let va = PoseVar::constant(&mut tape, &a);
        let x = tape.constant(crate::pointops::points_tensor(&pts));
        let (_, warped) = va.warp(&mut tape, x);
        for (w, p) in warped.iter().zip(a.apply_all(&pts)) {
            for i in 0..3 {
                assert!((w[i] - p[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn value_round_trip_is_bitwise() {
        let (a, _) = sample();
        let mut tape = Tape::new();
        let v = PoseVar::constant(&mut tape, &a);
        assert_eq!(v.value(&tape), a);
    }
}
