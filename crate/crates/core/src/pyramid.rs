//! Point feature pyramid built from chained set-abstraction layers, and the
//! per-frame cache that lets each pyramid serve two consecutive pairs.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn::{Activation, ParamStore, SharedMlp, Tape, Tensor, Var};
use crate::pointops::{farthest_point_sample, group_relative_on_tape, knn, points_tensor};

/// One pyramid level on a tape: coordinates are constants, features may carry
/// gradients back to the set-abstraction weights.
#[derive(Clone, Debug)]
pub struct LevelVars {
    pub points: Vec<Point>,
    pub xyz: Var,
    pub features: Var,
}

/// One pyramid level as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudLevel {
    pub points: Vec<Point>,
    pub features: Tensor,
}

/// All levels of one frame, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<PointCloudLevel>,
}

impl Pyramid {
    /// Places the stored levels on `tape` as constants.
    pub fn load(&self, tape: &mut Tape) -> Vec<LevelVars> {
        self.levels
            .iter()
            .map(|l| LevelVars {
                points: l.points.clone(),
                xyz: tape.constant(points_tensor(&l.points)),
                features: tape.constant(l.features.clone()),
            })
            .collect()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug)]
pub struct PyramidNet {
    sa: Vec<SharedMlp>,
    sizes: Vec<usize>,
    k_sa: usize,
    fps_seed: usize,
    sa_calls: AtomicU64,
}

impl PyramidNet {
    pub fn new(cfg: &Config, store: &mut ParamStore) -> Result<Self> {
        let p = &cfg.pyramid;
        let mut sa = Vec::with_capacity(p.levels.len());
        let mut in_width = 3;
        for (l, &w) in p.widths.iter().enumerate() {
            sa.push(SharedMlp::new(
                store,
                &format!("pyramid.sa{l}"),
                &[3 + in_width, w, w],
                Activation::Relu,
                cfg.seed,
            )?);
            in_width = w;
        }
        Ok(Self {
            sa,
            sizes: p.levels.clone(),
            k_sa: p.k_sa,
            fps_seed: p.fps_seed,
            sa_calls: AtomicU64::new(0),
        })
    }

    pub fn num_levels(&self) -> usize {
        self.sa.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.sa.iter().map(|m| m.out_width()).collect()
    }

    /// Number of set-abstraction layers evaluated so far.
    pub fn sa_calls(&self) -> u64 {
        self.sa_calls.load(Ordering::Relaxed)
    }

    /// FPS centers, kNN grouping of `(Δxyz ⊕ feature)`, shared MLP, then a
    /// channel-wise max over each neighborhood.
    pub fn set_abstraction(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        level: usize,
        input: &LevelVars,
        n_out: usize,
    ) -> Result<LevelVars> {
        self.sa_calls.fetch_add(1, Ordering::Relaxed);
        let seed = self.fps_seed.min(input.points.len().saturating_sub(1));
        let centers = farthest_point_sample(&input.points, n_out, seed)?;
        let points: Vec<Point> = centers.iter().map(|&i| input.points[i]).collect();
        let k = self.k_sa.min(input.points.len());
        let nbrs = knn(&points, &input.points, k)?;
        tape.note_branch(&nbrs.indices);
        let xyz = tape.constant(points_tensor(&points));
        let grouped = group_relative_on_tape(tape, xyz, input.xyz, input.features, &nbrs);
        let h = self.sa[level].forward(tape, store, grouped)?;
        let features = tape.group_max(h, k);
        Ok(LevelVars {
            points,
            xyz,
            features,
        })
    }

    /// Builds every level on `tape`. Level-0 input features are the raw
    /// coordinates.
    pub fn build_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        raw: &[Point],
    ) -> Result<Vec<LevelVars>> {
        if raw.is_empty() {
            return Err(Error::EmptyReference);
        }
        let xyz = tape.constant(points_tensor(raw));
        let mut current = LevelVars {
            points: raw.to_vec(),
            xyz,
            features: xyz,
        };
        let mut levels = Vec::with_capacity(self.sizes.len());
        for (l, &n) in self.sizes.iter().enumerate() {
            let next = self.set_abstraction(tape, store, l, &current, n)?;
            levels.push(next.clone());
            current = next;
        }
        Ok(levels)
    }

    /// Builds a pyramid as values on a scratch tape.
    pub fn build(&self, store: &ParamStore, raw: &[Point]) -> Result<Pyramid> {
        let mut tape = Tape::new();
        let levels = self.build_on_tape(&mut tape, store, raw)?;
        Ok(Pyramid {
            levels: levels
                .into_iter()
                .map(|l| PointCloudLevel {
                    points: l.points,
                    features: tape.value(l.features).clone(),
                })
                .collect(),
        })
    }
}

/// Key of a cached pyramid: `(sequence id, frame index)`.
pub type FrameKey = (u64, usize);

/// Least-recently-used pyramid cache.
#[derive(Debug)]
pub struct PyramidCache {
    capacity: usize,
    entries: VecDeque<(FrameKey, Arc<Pyramid>)>,
    builds: u64,
    hits: u64,
}

impl Default for PyramidCache {
    fn default() -> Self {
        Self::new(2)
    }
}

impl PyramidCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
            builds: 0,
            hits: 0,
        }
    }

    pub fn builds(&self) -> u64 {
        self.builds
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: FrameKey) -> bool {
        self.entries.iter().any(|(k, _)| *k == key)
    }

    /// Returns the cached pyramid for `key`, or builds, inserts and returns
    /// it, evicting the least recently used entry when full.
    pub fn get_or_build(
        &mut self,
        key: FrameKey,
        build: impl FnOnce() -> Result<Pyramid>,
    ) -> Result<Arc<Pyramid>> {
        if let Some(pos) = self.entries.iter().position(|(k, _)| *k == key) {
            let entry = self.entries.remove(pos).expect("position is in range");
            let pyr = Arc::clone(&entry.1);
            self.entries.push_back(entry);
            self.hits += 1;
            return Ok(pyr);
        }
        let pyr = Arc::new(build()?);
        self.builds += 1;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((key, Arc::clone(&pyr)));
        Ok(pyr)
    }
}
