//! Two-stage attentive cost volume.
//!
//! Stage one lets every source point attend over its `k` nearest destination
//! points; stage two smooths the resulting messages over the `k` nearest
//! source points. Attention is a channel-wise softmax over the neighborhood.

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn::{Activation, ParamStore, SharedMlp, Tape, Var};
use crate::pointops::{group_relative_on_tape, knn};
use crate::pose::PoseVar;
use crate::pyramid::LevelVars;

#[derive(Clone, Debug)]
pub struct CostVolume {
    attn1: SharedMlp,
    msg: SharedMlp,
    attn2: SharedMlp,
    out: SharedMlp,
    feature_width: usize,
    k: usize,
}

/// Intermediate values of one cost-volume evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CostVolumeTrace {
    /// Stage-one attention, `(n·k₁) × D_e`, softmax within each group.
    pub weights1: Var,
    pub messages: Var,
    /// Stage-two attention, `(n·k₂) × D_e`.
    pub weights2: Var,
    pub embedding: Var,
    pub k1: usize,
    pub k2: usize,
}

impl CostVolume {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feature_width: usize,
        embed_width: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        let (d, e) = (feature_width, embed_width);
        Ok(Self {
            attn1: SharedMlp::new(store, &format!("{name}.attn1"), &[3 + 2 * d, e], Activation::Identity, seed)?,
            msg: SharedMlp::new(store, &format!("{name}.msg"), &[3 + d, e, e], Activation::Relu, seed)?,
            attn2: SharedMlp::new(store, &format!("{name}.attn2"), &[3 + e, e], Activation::Identity, seed)?,
            out: SharedMlp::new(store, &format!("{name}.out"), &[3 + e, e], Activation::Relu, seed)?,
            feature_width,
            k,
        })
    }

    pub fn out_width(&self) -> usize {
        self.out.out_width()
    }

    /// Cost volume between `src` (coordinates `src_xyz` / `src_points`, which
    /// may already be warped) and `dst`. Output rows follow `src` order.
    #[allow(clippy::too_many_arguments)]
    pub fn trace(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        src_xyz: Var,
        src_points: &[Point],
        src_features: Var,
        dst: &LevelVars,
    ) -> Result<CostVolumeTrace> {
        let (ws, wd) = (tape.value(src_features).cols(), tape.value(dst.features).cols());
        for got in [ws, wd] {
            if got != self.feature_width {
                return Err(Error::WidthMismatch {
                    name: "cost volume features".into(),
                    expected: self.feature_width,
                    got,
                });
            }
        }
        if src_points.is_empty() {
            return Err(Error::EmptyReference);
        }

        let k1 = self.k.min(dst.points.len());
        let cross = knn(src_points, &dst.points, k1)?;
        tape.note_branch(&cross.indices);
        let grouped = group_relative_on_tape(tape, src_xyz, dst.xyz, dst.features, &cross);
        let delta = tape.slice_cols(grouped, 0, 3);
        let f_j = tape.slice_cols(grouped, 3, self.feature_width);
        let f_i = tape.gather(src_features, cross.query_rows());
        let attn_in = tape.concat(&[delta, f_i, f_j]);
        let logits1 = self.attn1.forward(tape, store, attn_in)?;
        let weights1 = tape.group_softmax(logits1, k1);
        let msg = self.msg.forward(tape, store, grouped)?;
        let weighted = tape.mul(weights1, msg);
        let messages = tape.group_sum(weighted, k1);

        let k2 = self.k.min(src_points.len());
        let own = knn(src_points, src_points, k2)?;
        tape.note_branch(&own.indices);
        let grouped2 = group_relative_on_tape(tape, src_xyz, src_xyz, messages, &own);
        let logits2 = self.attn2.forward(tape, store, grouped2)?;
        let weights2 = tape.group_softmax(logits2, k2);
        let values = self.out.forward(tape, store, grouped2)?;
        let weighted2 = tape.mul(weights2, values);
        let embedding = tape.group_sum(weighted2, k2);
        Ok(CostVolumeTrace {
            weights1,
            messages,
            weights2,
            embedding,
            k1,
            k2,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        src: &LevelVars,
        dst: &LevelVars,
    ) -> Result<Var> {
        Ok(self
            .trace(tape, store, src.xyz, &src.points, src.features, dst)?
            .embedding)
    }

    /// Cost volume after warping `src` by `pose`; gradients reach the pose
    /// through the warped coordinates.
    pub fn residual(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        src: &LevelVars,
        dst: &LevelVars,
        pose: PoseVar,
    ) -> Result<Var> {
        let (xyz, points) = pose.warp(tape, src.xyz);
        Ok(self
            .trace(tape, store, xyz, &points, src.features, dst)?
            .embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use crate::nn::Tensor;
    use crate::pointops::points_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn level(tape: &mut Tape, points: Vec<Point>, features: Tensor) -> LevelVars {
        LevelVars {
            xyz: tape.constant(points_tensor(&points)),
            features: tape.constant(features),
            points,
        }
    }

    fn random_level(tape: &mut Tape, n: usize, d: usize, seed: u64) -> LevelVars {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5)])
            .collect();
        let f = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        level(tape, pts, f)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let cv = CostVolume::new(&mut store, "cv", 5, 6, 4, 1).unwrap();
        let mut tape = Tape::new();
        let src = random_level(&mut tape, 12, 5, 2);
        let dst = random_level(&mut tape, 10, 5, 3);
        let tr = cv.trace(&mut tape, &store, src.xyz, &src.points, src.features, &dst).unwrap();
        for (w, k) in [(tr.weights1, tr.k1), (tr.weights2, tr.k2)] {
            let wv = tape.value(w);
            assert!(wv.data().iter().all(|&v| v >= 0.0));
            for g in 0..wv.rows() / k {
                for c in 0..wv.cols() {
                    let s: f64 = (g * k..(g + 1) * k).map(|r| wv.get(r, c)).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
        assert_eq!(tape.value(tr.embedding).shape(), (12, 6));
    }

    #[test]
    fn width_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let cv = CostVolume::new(&mut store, "cv", 5, 6, 4, 1).unwrap();
        let mut tape = Tape::new();
        let src = random_level(&mut tape, 6, 4, 2);
        let dst = random_level(&mut tape, 6, 5, 3);
        assert!(matches!(
            cv.forward(&mut tape, &store, &src, &dst),
            Err(Error::WidthMismatch { .. })
        ));
    }

    #[test]
    fn identity_warp_reduces_to_plain_cost_volume() {
        let mut store = ParamStore::new();
        let cv = CostVolume::new(&mut store, "cv", 3, 4, 3, 9).unwrap();
        let mut tape = Tape::new();
        let src = random_level(&mut tape, 9, 3, 4);
        let dst = random_level(&mut tape, 9, 3, 5);
        let plain = cv.forward(&mut tape, &store, &src, &dst).unwrap();
        let id = PoseVar::constant(&mut tape, &RigidTransform::IDENTITY);
        let warped = cv.residual(&mut tape, &store, &src, &dst, id).unwrap();
        assert_eq!(tape.value(plain), tape.value(warped));
    }

    #[test]
    fn congruent_neighborhoods_give_equal_embeddings() {
        // Two well separated copies of one 4-point motif; k = 4 keeps every
        // neighborhood inside its own copy. Features are shared per motif point.
        let motif = [[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [0.0, 0.4, 0.0], [0.0, 0.0, 0.2]];
        let mut pts: Vec<Point> = motif.to_vec();
        pts.extend(motif.iter().map(|p| [p[0] + 50.0, p[1], p[2]]));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut feats = base.clone();
        feats.extend_from_slice(&base);
        let mut store = ParamStore::new();
        let cv = CostVolume::new(&mut store, "cv", 3, 5, 4, 2).unwrap();
        let mut tape = Tape::new();
        let a = level(&mut tape, pts.clone(), Tensor::from_vec(8, 3, feats.clone()));
        let b = level(&mut tape, pts, Tensor::from_vec(8, 3, feats));
        let e = cv.forward(&mut tape, &store, &a, &b).unwrap();
        let ev = tape.value(e);
        for i in 0..4 {
            for c in 0..5 {
                assert!((ev.get(i, c) - ev.get(i + 4, c)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tiny_instance_matches_hand_trace() {
        // 2 source and 2 destination points, k = 2, widths 1 → 1.
        let mut store = ParamStore::new();
        let cv = CostVolume::new(&mut store, "cv", 1, 1, 2, 3).unwrap();
        let src_p: Vec<Point> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let dst_p: Vec<Point> = vec![[0.1, 0.0, 0.0], [1.2, 0.0, 0.0]];
        let (fs, fd) = ([0.5, -0.3], [0.2, 0.9]);
        let mut tape = Tape::new();
        let src = level(&mut tape, src_p.clone(), Tensor::from_vec(2, 1, fs.to_vec()));
        let dst = level(&mut tape, dst_p.clone(), Tensor::from_vec(2, 1, fd.to_vec()));
        let got = cv.forward(&mut tape, &store, &src, &dst).unwrap();

        let w = |name: &str| store.value(store.id(name).unwrap()).data().to_vec();
        let (a1, m0, m1, a2, o) = (
            w("cv.attn1.0.weight"),
            w("cv.msg.0.weight"),
            w("cv.msg.1.weight"),
            w("cv.attn2.0.weight"),
            w("cv.out.0.weight"),
        );
        let dot = |w: &[f64], x: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let softmax2 = |a: f64, b: f64| {
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            [ea / (ea + eb), eb / (ea + eb)]
        };
        // stage 1: every source point sees both destination points
        let mut msgs = [0.0; 2];
        for i in 0..2 {
            let mut logits = [0.0; 2];
            let mut vals = [0.0; 2];
            for j in 0..2 {
                let d = [dst_p[j][0] - src_p[i][0], 0.0, 0.0];
                logits[j] = dot(&a1, &[d[0], d[1], d[2], fs[i], fd[j]]);
                let h = dot(&m0, &[d[0], d[1], d[2], fd[j]]).max(0.0);
                vals[j] = (h * m1[0]).max(0.0);
            }
            let s = softmax2(logits[0], logits[1]);
            msgs[i] = s[0] * vals[0] + s[1] * vals[1];
        }
        // stage 2 over both source points
        for i in 0..2 {
            let mut logits = [0.0; 2];
            let mut vals = [0.0; 2];
            for j in 0..2 {
                let d = src_p[j][0] - src_p[i][0];
                logits[j] = dot(&a2, &[d, 0.0, 0.0, msgs[j]]);
                vals[j] = dot(&o, &[d, 0.0, 0.0, msgs[j]]).max(0.0);
            }
            // knn order: self first, then the other point
            let order = [i, 1 - i];
            let s = softmax2(logits[order[0]], logits[order[1]]);
            let e = s[0] * vals[order[0]] + s[1] * vals[order[1]];
            assert!((tape.value(got).get(i, 0) - e).abs() < 1e-12);
        }
    }
}
