//! Deterministic point-set primitives: farthest point sampling, exact kNN,
//! neighborhood grouping and inverse-distance upsampling.
//!
//! All searches are brute force. Ties are always broken toward the lower
//! index so results never depend on evaluation order.

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn::{Tape, Tensor, Var};

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Views an `n × 3` tensor as points.
pub fn as_points(t: &Tensor) -> &[Point] {
    assert_eq!(t.cols(), 3, "point tensors have 3 columns");
    t.data().as_chunks::<3>().0
}

pub fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::from_vec(points.len(), 3, points.as_flattened().to_vec())
}

/// Greedy farthest point sampling starting from `seed_index`.
pub fn farthest_point_sample(points: &[Point], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(Error::TooManyRequested {
            requested: m,
            available: n,
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if seed_index >= n {
        return Err(Error::Invalid(format!(
            "FPS seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut current = seed_index;
    loop {
        out.push(current);
        chosen[current] = true;
        if out.len() == m {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let d = sq_dist(&points[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(out)
}

/// `k` reference neighbors per query, ascending by squared distance.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    pub k: usize,
    pub indices: Vec<usize>,
    pub sq_dists: Vec<f64>,
}

impl NeighborIndex {
    pub fn queries(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn neighbors(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn distances(&self, q: usize) -> &[f64] {
        &self.sq_dists[q * self.k..(q + 1) * self.k]
    }

    /// Each query index repeated `k` times, aligned with `indices`.
    pub fn query_rows(&self) -> Vec<usize> {
        (0..self.queries())
            .flat_map(|q| std::iter::repeat_n(q, self.k))
            .collect()
    }
}

/// Exact k nearest neighbors; ties go to the lower reference index.
pub fn knn(query: &[Point], reference: &[Point], k: usize) -> Result<NeighborIndex> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if k > reference.len() {
        return Err(Error::TooManyRequested {
            requested: k,
            available: reference.len(),
        });
    }
    if k == 0 {
        return Ok(NeighborIndex {
            k,
            indices: Vec::new(),
            sq_dists: Vec::new(),
        });
    }
    let mut indices = Vec::with_capacity(query.len() * k);
    let mut sq_dists = Vec::with_capacity(query.len() * k);
    // sorted (distance, index) buffer of the best k so far
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for q in query {
        best.clear();
        for (j, r) in reference.iter().enumerate() {
            let d = sq_dist(q, r);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            // insertion after every entry with distance <= d keeps index order on ties
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, j));
            if best.len() > k {
                best.pop();
            }
        }
        for &(d, j) in &best {
            indices.push(j);
            sq_dists.push(d);
        }
    }
    Ok(NeighborIndex {
        k,
        indices,
        sq_dists,
    })
}

/// Grouped rows `(p_ref − p_query) ⊕ feature_ref`, one per (query, neighbor)
/// pair, shape `(n_query·K) × (3 + D)`.
pub fn group_relative_on_tape(
    tape: &mut Tape,
    query: Var,
    reference: Var,
    ref_features: Var,
    nbrs: &NeighborIndex,
) -> Var {
    let r = tape.gather(reference, nbrs.indices.clone());
    let q = tape.gather(query, nbrs.query_rows());
    let delta = tape.sub(r, q);
    let f = tape.gather(ref_features, nbrs.indices.clone());
    tape.concat(&[delta, f])
}

/// Value-level [`group_relative_on_tape`].
pub fn group_relative(
    query: &[Point],
    reference: &[Point],
    ref_features: &Tensor,
    nbrs: &NeighborIndex,
) -> Tensor {
    let mut tape = Tape::new();
    let q = tape.constant(points_tensor(query));
    let r = tape.constant(points_tensor(reference));
    let f = tape.constant(ref_features.clone());
    let out = group_relative_on_tape(&mut tape, q, r, f, nbrs);
    tape.value(out).clone()
}

/// Interpolation stencil from coarse points onto fine points: up to three
/// nearest coarse points weighted by inverse squared distance, normalized to
/// sum to one. A coincident coarse point (distance below 1e-12) takes all the
/// weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    pub k: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn interpolation_weights(coarse: &[Point], fine: &[Point]) -> Result<Interpolation> {
    let k = coarse.len().min(3);
    let nbrs = knn(fine, coarse, k)?;
    let mut weights = Vec::with_capacity(nbrs.indices.len());
    for q in 0..fine.len() {
        let d = nbrs.distances(q);
        if d[0] < 1e-24 {
            weights.push(1.0);
            weights.extend(std::iter::repeat_n(0.0, k - 1));
            continue;
        }
        let inv: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
        let total: f64 = inv.iter().sum();
        weights.extend(inv.iter().map(|w| w / total));
    }
    Ok(Interpolation {
        k,
        indices: nbrs.indices,
        weights,
    })
}

pub fn upsample_on_tape(tape: &mut Tape, coarse_features: Var, interp: &Interpolation) -> Var {
    tape.weighted_gather(
        coarse_features,
        interp.indices.clone(),
        interp.weights.clone(),
        interp.k,
    )
}

/// Features of `fine` points interpolated from `coarse` points.
pub fn upsample_interpolate(
    coarse: &[Point],
    coarse_features: &Tensor,
    fine: &[Point],
) -> Result<Tensor> {
    let interp = interpolation_weights(coarse, fine)?;
    let mut tape = Tape::new();
    let f = tape.constant(coarse_features.clone());
    let out = upsample_on_tape(&mut tape, f, &interp);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive kNN oracle: full sort of every (distance, index) pair.
    fn knn_oracle(query: &[Point], reference: &[Point], k: usize) -> Vec<Vec<usize>> {
        query
            .iter()
            .map(|q| {
                let mut all: Vec<(f64, usize)> = reference
                    .iter()
                    .enumerate()
                    .map(|(j, r)| (sq_dist(q, r), j))
                    .collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                all.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    /// Greedy FPS oracle recomputing every min-distance from scratch.
    fn fps_oracle(points: &[Point], m: usize, seed: usize) -> Vec<usize> {
        if m == 0 {
            return Vec::new();
        }
        let mut sel = vec![seed];
        while sel.len() < m {
            let mut best = None;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..points.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel
                    .iter()
                    .map(|&s| sq_dist(&points[i], &points[s]))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = Some(i);
                }
            }
            sel.push(best.unwrap());
        }
        sel
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn fps_examples() {
        let line: Vec<Point> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(farthest_point_sample(&line, 2, 0).unwrap(), vec![0, 9]);

        let mut all = farthest_point_sample(&line, 10, 3).unwrap();
        assert_eq!(all[0], 3);
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        assert!(matches!(
            farthest_point_sample(&line, 11, 0),
            Err(Error::TooManyRequested { .. })
        ));
    }

    #[test]
    fn fps_handles_duplicates_without_repeating_indices() {
        let pts = vec![[0.0; 3]; 5];
        let mut sel = farthest_point_sample(&pts, 5, 0).unwrap();
        assert_eq!(sel, vec![0, 1, 2, 3, 4]);
        sel.dedup();
        assert_eq!(sel.len(), 5);
    }

    #[test]
    fn fps_matches_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pts = random_points(&mut rng, 64);
            assert_eq!(farthest_point_sample(&pts, 8, 0).unwrap(), fps_oracle(&pts, 8, 0));
        }
    }

    #[test]
    fn knn_examples() {
        let mut grid = Vec::new();
        for y in -1..=1 {
            for x in -1..=1 {
                grid.push([x as f64, y as f64, 0.0]);
            }
        }
        let self_match = knn(&grid, &grid, 1).unwrap();
        for q in 0..9 {
            assert_eq!(self_match.neighbors(q), &[q]);
            assert_eq!(self_match.distances(q), &[0.0]);
        }
        // center (index 4): itself, then the four axis neighbors 1, 3, 5, 7 at distance 1
        let center = knn(&[[0.0, 0.0, 0.0]], &grid, 5).unwrap();
        assert_eq!(center.neighbors(0), &[4, 1, 3, 5, 7]);
        assert_eq!(center.distances(0), &[0.0, 1.0, 1.0, 1.0, 1.0]);
        let off = knn(&[[0.0, 0.0, 0.5]], &grid, 5).unwrap();
        assert_eq!(&off.neighbors(0)[1..], &[1, 3, 5, 7]);

        assert!(matches!(knn(&grid, &[], 1), Err(Error::EmptyReference)));
    }

    #[test]
    fn knn_matches_oracle_on_256_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_points(&mut rng, 256);
        let r = random_points(&mut rng, 256);
        let got = knn(&q, &r, 8).unwrap();
        let oracle = knn_oracle(&q, &r, 8);
        for (i, o) in oracle.iter().enumerate() {
            assert_eq!(got.neighbors(i), o.as_slice());
        }
    }

    #[test]
    fn knn_with_k_equal_n_covers_every_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_points(&mut rng, 17);
        let got = knn(&r[..3], &r, 17).unwrap();
        for q in 0..3 {
            let mut n = got.neighbors(q).to_vec();
            n.sort();
            assert_eq!(n, (0..17).collect::<Vec<_>>());
        }
    }

    #[test]
    fn group_relative_examples() {
        let reference = vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let feats = Tensor::from_rows(&[[10.0, 11.0], [20.0, 21.0], [30.0, 31.0]]);
        let query = vec![[1.0, 0.0, 0.0], [0.0, 0.0, 2.0]];
        let nbrs = knn(&query, &reference, 2).unwrap();
        // query 0: itself (d=0), then ref 1 (d²=5) vs ref 2 (d²=10) → [0, 1]
        // query 1: ref 2 (d²=1), then ref 0 (d²=5), ref 1 (d²=8) → [2, 0]
        assert_eq!(nbrs.indices, vec![0, 1, 2, 0]);
        let g = group_relative(&query, &reference, &feats, &nbrs);
        assert_eq!(g.shape(), (4, 5));
        assert_eq!(g.row(0), &[0.0, 0.0, 0.0, 10.0, 11.0]);
        assert_eq!(g.row(1), &[-1.0, 2.0, 0.0, 20.0, 21.0]);
        assert_eq!(g.row(2), &[0.0, 0.0, 1.0, 30.0, 31.0]);
        assert_eq!(g.row(3), &[1.0, 0.0, -2.0, 10.0, 11.0]);

        let one = knn(&query, &reference, 1).unwrap();
        let g1 = group_relative(&query, &reference, &feats, &one);
        assert_eq!(&g1.row(0)[3..], feats.row(0));
    }

    #[test]
    fn upsample_examples() {
        let coarse = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [100.0, 0.0, 0.0]];
        let feats = Tensor::from_rows(&[[1.0], [3.0], [1000.0]]);
        let same = upsample_interpolate(&coarse, &feats, &coarse).unwrap();
        assert_eq!(same, feats);

        // equidistant (d² = 1) from the first two, d² = 99² from the third
        let mid = upsample_interpolate(&coarse, &feats, &[[1.0, 0.0, 0.0]]).unwrap();
        let w_far = (1.0 / 9801.0) / (2.0 + 1.0 / 9801.0);
        let w_near = (1.0 - w_far) / 2.0;
        let expect = w_near * 1.0 + w_near * 3.0 + w_far * 1000.0;
        assert!((mid.item() - expect).abs() < 1e-12);
        assert!((mid.item() - 2.0).abs() < 0.11);

        let constant = Tensor::filled(3, 2, 4.5);
        let up = upsample_interpolate(&coarse, &constant, &[[0.3, 0.7, -0.2], [50.0, 1.0, 1.0]]).unwrap();
        assert!(up.data().iter().all(|v| (v - 4.5).abs() < 1e-12));

        let two = upsample_interpolate(&coarse[..2], &feats.select_rows(&[0, 1]), &[[1.0, 0.0, 0.0]]).unwrap();
        assert!((two.item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_snaps_to_a_nearly_coincident_coarse_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // dense coarse grid, fine points inside its hull
        let mut coarse = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                coarse.push([i as f64, j as f64, 0.0]);
            }
        }
        let field = |p: &Point| 2.0 * p[0] - 0.5 * p[1] + 1.0;
        let feats = Tensor::from_vec(100, 1, coarse.iter().map(field).collect());
        let fine: Vec<Point> = (0..50)
            .map(|_| {
                // within 0.01 of a grid node
                let i = rng.random_range(1..9) as f64;
                let j = rng.random_range(1..9) as f64;
                [i + rng.random_range(-0.01..0.01), j + rng.random_range(-0.01..0.01), 0.0]
            })
            .collect();
        let up = upsample_interpolate(&coarse, &feats, &fine).unwrap();
        for (p, v) in fine.iter().zip(up.data()) {
            // the nearest node carries all but ~3·(0.014)² of the weight
            let node = [p[0].round(), p[1].round(), 0.0];
            assert!((v - field(&node)).abs() < 5e-3, "{v} vs {}", field(&node));
        }
    }

    proptest! {
        #[test]
        fn interpolation_weights_sum_to_one(
            coarse in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..20),
            fine in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..20),
        ) {
            let w = interpolation_weights(&coarse, &fine).unwrap();
            for q in 0..fine.len() {
                let s: f64 = w.weights[q * w.k..(q + 1) * w.k].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn fps_selects_distinct_indices(
            pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..40),
            frac in 0.0f64..1.0,
        ) {
            let m = ((pts.len() as f64) * frac).ceil() as usize;
            let sel = farthest_point_sample(&pts, m, 0).unwrap();
            let mut s = sel.clone();
            s.sort();
            s.dedup();
            prop_assert_eq!(s.len(), m);
            prop_assert_eq!(sel, fps_oracle(&pts, m, 0));
        }
    }
}
