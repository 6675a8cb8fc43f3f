//! Wall-clock comparison of the full sequence runner against the reduced
//! one (no pyramid reuse, identity initialization).

use std::time::Instant;

use crate::config::Config;
use crate::data::{synth_sequence, MotionSpec, SynthSpec};
use crate::error::Result;
use crate::model::{Model, RunOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub points: usize,
    pub frames: usize,
    pub repeat: usize,
    /// Seconds per sequence with reuse and sequential initialization.
    pub full: f64,
    /// Seconds per sequence with both turned off.
    pub reduced: f64,
}

impl BenchReport {
    pub fn ratio(&self) -> f64 {
        self.full / self.reduced
    }
}

/// Desk profile with the pyramid scaled to `points` (halving per level).
pub fn bench_config(points: usize) -> Result<Config> {
    let mut cfg = Config::desk();
    cfg.input.points = points;
    cfg.pyramid.levels = (1..=cfg.pyramid.levels.len()).map(|l| (points >> l).max(1)).collect();
    cfg.validate()?;
    Ok(cfg)
}

/// Times `repeat` runs of each variant over a synthetic `frames`-frame
/// sequence, alternating variants, and keeps the fastest run of each.
pub fn run(points: usize, frames: usize, repeat: usize, seed: u64) -> Result<BenchReport> {
    let model = Model::new(bench_config(points)?)?;
    let seq = synth_sequence(&SynthSpec {
        frames,
        points,
        motion: MotionSpec::Random {
            step_max: 0.5,
            rot_max_deg: 5.0,
        },
        noise: 0.01,
        seed,
    })?;
    let full = RunOptions::default();
    let reduced = RunOptions {
        cache: false,
        seq_init: false,
        ..full
    };
    let (mut best_full, mut best_reduced) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..repeat.max(1) {
        for (opts, best) in [(&full, &mut best_full), (&reduced, &mut best_reduced)] {
            let start = Instant::now();
            model.run_sequence(&seq.frames, opts)?;
            *best = best.min(start.elapsed().as_secs_f64());
        }
    }
    Ok(BenchReport {
        points,
        frames,
        repeat: repeat.max(1),
        full: best_full,
        reduced: best_reduced,
    })
}
