//! Supervised training over frame triples with seeded, resumable ordering.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{read_calib, read_kitti_poses, read_scan_dir, sample_to_n, Sequence};
use crate::error::{Error, Result};
use crate::eval::{ate, pair_errors};
use crate::geometry::{relative_gt, Point, RigidTransform};
use crate::model::{Model, RunOptions};
use crate::nn::{backward_into, Adam, LrSchedule, Tape};

/// Frames already reduced to the input size, with their world poses.
#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub frames: Vec<Vec<Point>>,
    pub poses: Vec<RigidTransform>,
}

impl TrainSequence {
    pub fn new(frames: Vec<Vec<Point>>, poses: Vec<RigidTransform>) -> Result<Self> {
        if frames.len() != poses.len() {
            return Err(Error::LengthMismatch {
                gt: poses.len(),
                est: frames.len(),
            });
        }
        Ok(Self { frames, poses })
    }

    pub fn from_sequence(seq: Sequence) -> Result<Self> {
        Self::new(seq.frames, seq.poses)
    }

    /// Reads a KITTI-layout sequence and samples every scan to `n` points.
    pub fn load(scans: &Path, poses: &Path, calib: Option<&Path>, n: usize, seed: u64) -> Result<Self> {
        let tr = calib.map(read_calib).transpose()?;
        let poses = read_kitti_poses(poses, tr.as_ref())?;
        let raw = read_scan_dir(scans)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = raw
            .iter()
            .map(|f| sample_to_n(f, n, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, poses)
    }

    fn windows(&self) -> usize {
        self.frames.len().saturating_sub(2)
    }
}

/// Seed of the dropout stream of window `idx` in optimizer step `step`.
pub fn window_seed(seed: u64, step: u64, idx: u64) -> u64 {
    let mut z = seed
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(idx.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    /// Mean window loss of the batch.
    pub loss: f64,
    /// Worst finest-level error of the first pair in any window of the batch,
    /// translation (m) and rotation (degrees).
    pub max_pair_error: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: u32,
    pub steps: u64,
    pub mean_loss: f64,
    pub max_pair_error: (f64, f64),
}

/// Owns the model and the data; one call to [`Trainer::step`] is one Adam
/// update over a batch of windows.
///
/// The position in the schedule is derived from the optimizer step count
/// stored with the weights, so a trainer rebuilt from a checkpoint continues
/// exactly where the original left off.
pub struct Trainer {
    pub model: Model,
    sequences: Vec<TrainSequence>,
    windows: Vec<(usize, usize)>,
    adam: Adam,
    schedule: LrSchedule,
    batch: usize,
    order: Vec<usize>,
    order_epoch: Option<u32>,
}

impl Trainer {
    pub fn new(model: Model, sequences: Vec<TrainSequence>) -> Result<Self> {
        let n = model.config.input.points;
        let mut windows = Vec::new();
        for (s, seq) in sequences.iter().enumerate() {
            if let Some(f) = seq.frames.iter().find(|f| f.len() != n) {
                return Err(Error::Invalid(format!(
                    "training frame has {} points, model expects {n}",
                    f.len()
                )));
            }
            windows.extend((0..seq.windows()).map(|t| (s, t)));
        }
        if windows.is_empty() {
            return Err(Error::TooFewFrames {
                needed: 3,
                got: sequences.iter().map(|s| s.frames.len()).max().unwrap_or(0),
            });
        }
        let cfg = &model.config;
        let (adam, schedule, batch) = (cfg.adam(), cfg.lr_schedule(), cfg.optimizer.batch_size.max(1));
        Ok(Self {
            model,
            sequences,
            windows,
            adam,
            schedule,
            batch,
            order: Vec::new(),
            order_epoch: None,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.windows.len().div_ceil(self.batch) as u64
    }

    pub fn step_count(&self) -> u64 {
        self.model.params.step_count()
    }

    pub fn epoch(&self) -> u32 {
        (self.step_count() / self.steps_per_epoch()) as u32
    }

    fn order_for(&mut self, epoch: u32) -> &[usize] {
        if self.order_epoch != Some(epoch) {
            let mut order: Vec<usize> = (0..self.windows.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
            order.shuffle(&mut rng);
            self.order = order;
            self.order_epoch = Some(epoch);
        }
        &self.order
    }

    /// One optimizer step. Window gradients are accumulated in batch order
    /// and averaged; any non-finite loss or gradient aborts before the
    /// weights change.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.step_count();
        let spe = self.steps_per_epoch();
        let epoch = (step / spe) as u32;
        let pos = (step % spe) as usize * self.batch;
        let seed = self.model.config.seed;
        let size = self.batch;
        let batch: Vec<usize> = {
            let order = self.order_for(epoch);
            order[pos..(pos + size).min(order.len())].to_vec()
        };

        let mut grads = self.model.params.clone();
        grads.zero_grad();
        let mut total = 0.0;
        let mut worst = (0.0f64, 0.0f64);
        for (i, &w) in batch.iter().enumerate() {
            let (s, t) = self.windows[w];
            let seq = &self.sequences[s];
            let prefix = self.model.config.train.warm_pairs.min(t);
            let warm = if prefix > 0 {
                Some(self.model.warm_start(&seq.frames[t - prefix..=t])?)
            } else {
                None
            };
            let mut rng = ChaCha8Rng::seed_from_u64(window_seed(seed, step, i as u64));
            let mut tape = Tape::training();
            let out = self.model.net.window_loss(
                &mut tape,
                &self.model.params,
                [&seq.frames[t], &seq.frames[t + 1], &seq.frames[t + 2]],
                [&seq.poses[t], &seq.poses[t + 1], &seq.poses[t + 2]],
                warm.as_ref(),
                &mut rng,
            )?;
            total += backward_into(&tape, out.loss, &mut grads)?;
            let est = out.first[0].value(&tape);
            let (et, er) = pair_errors(&out.gts[..1], &[est])[0];
            worst = (worst.0.max(et), worst.1.max(er));
        }
        grads.scale_grads(1.0 / batch.len() as f64);
        if !grads.grads_finite() {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        let params = &mut self.model.params;
        for id in grads.ids().collect::<Vec<_>>() {
            params.grad_mut(id).data_mut().copy_from_slice(grads.grad(id).data());
        }
        let lr = self.schedule.lr(epoch);
        self.adam.step(params, lr);
        Ok(StepReport {
            step: step + 1,
            epoch,
            lr,
            loss: total / batch.len() as f64,
            max_pair_error: worst,
        })
    }

    /// Runs until `max_steps` optimizer steps (if nonzero) or `epochs` full
    /// epochs (if nonzero) have been taken, counting from step zero.
    /// `on_epoch` sees every completed epoch; `on_step` every step. Either
    /// callback may stop training early by returning `false`.
    pub fn run(
        &mut self,
        max_steps: u64,
        epochs: u32,
        mut on_step: impl FnMut(&Trainer, &StepReport) -> bool,
        mut on_epoch: impl FnMut(&Trainer, &EpochReport) -> Result<()>,
    ) -> Result<()> {
        if max_steps == 0 && epochs == 0 {
            return Err(Error::Config("training needs max_steps or epochs".into()));
        }
        let spe = self.steps_per_epoch();
        let limit = match (max_steps, epochs) {
            (0, e) => e as u64 * spe,
            (s, 0) => s,
            (s, e) => s.min(e as u64 * spe),
        };
        let (mut sum, mut count, mut worst) = (0.0, 0u64, (0.0f64, 0.0f64));
        while self.step_count() < limit {
            let r = self.step()?;
            sum += r.loss;
            count += 1;
            worst = (worst.0.max(r.max_pair_error.0), worst.1.max(r.max_pair_error.1));
            let keep_going = on_step(self, &r);
            let epoch_done = r.step % spe == 0;
            if epoch_done || !keep_going || self.step_count() >= limit {
                on_epoch(
                    self,
                    &EpochReport {
                        epoch: r.epoch,
                        steps: count,
                        mean_loss: sum / count as f64,
                        max_pair_error: worst,
                    },
                )?;
                (sum, count, worst) = (0.0, 0, (0.0, 0.0));
            }
            if !keep_going {
                break;
            }
        }
        Ok(())
    }

    pub fn sequences(&self) -> &[TrainSequence] {
        &self.sequences
    }
}

/// Inference-mode fit of a sequence: per-pair errors of the finest estimate
/// and the trajectory ATE.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub pair_errors: Vec<(f64, f64)>,
    pub ate: f64,
}

impl FitReport {
    pub fn max_translation(&self) -> f64 {
        self.pair_errors.iter().map(|e| e.0).fold(0.0, f64::max)
    }

    pub fn max_rotation_deg(&self) -> f64 {
        self.pair_errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

pub fn evaluate_fit(model: &Model, seq: &TrainSequence) -> Result<FitReport> {
    let run = model.run_sequence(&seq.frames, &RunOptions::default())?;
    let gt: Vec<RigidTransform> = seq
        .poses
        .windows(2)
        .map(|w| relative_gt(&w[0], &w[1]))
        .collect();
    let origin = seq.poses[0].inverse();
    let gt_world: Vec<RigidTransform> = seq.poses.iter().map(|p| origin.then_after(p)).collect();
    Ok(FitReport {
        pair_errors: pair_errors(&gt, &run.pairs),
        ate: ate(&gt_world, &run.world)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::{synth_sequence, MotionSpec, SynthSpec};

    fn toy_trainer(batch: usize) -> Trainer {
        let mut cfg = Config::toy();
        cfg.optimizer.batch_size = batch;
        let seq = synth_sequence(&SynthSpec {
            frames: 6,
            points: cfg.input.points,
            motion: MotionSpec::Random {
                step_max: 0.5,
                rot_max_deg: 5.0,
            },
            noise: 0.01,
            seed: 3,
        })
        .unwrap();
        let model = Model::new(cfg).unwrap();
        Trainer::new(model, vec![TrainSequence::from_sequence(seq).unwrap()]).unwrap()
    }

    #[test]
    fn windows_and_epochs() {
        let t = toy_trainer(3);
        assert_eq!(t.num_windows(), 4);
        assert_eq!(t.steps_per_epoch(), 2);
        assert_eq!(t.epoch(), 0);
    }

    #[test]
    fn window_seeds_differ() {
        let a = window_seed(0, 1, 0);
        assert_ne!(a, window_seed(0, 1, 1));
        assert_ne!(a, window_seed(0, 2, 0));
        assert_ne!(a, window_seed(1, 1, 0));
        assert_eq!(a, window_seed(0, 1, 0));
    }

    #[test]
    fn steps_are_reproducible_and_move_weights() {
        let mut a = toy_trainer(2);
        let mut b = toy_trainer(2);
        let before = a.model.params.clone();
        for _ in 0..3 {
            let ra = a.step().unwrap();
            let rb = b.step().unwrap();
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
        assert!(a.model.params.bit_identical(&b.model.params));
        assert!(!a.model.params.bit_identical(&before));
        assert_eq!(a.step_count(), 3);
        assert_eq!(a.epoch(), 1);
    }

    #[test]
    fn resume_from_checkpoint_continues_exactly() {
        let mut full = toy_trainer(1);
        for _ in 0..5 {
            full.step().unwrap();
        }
        let mut first = toy_trainer(1);
        for _ in 0..3 {
            first.step().unwrap();
        }
        let bytes = crate::nn::checkpoint::encode(&first.model.checkpoint(first.epoch()));
        let ckpt = crate::nn::checkpoint::decode(&bytes).unwrap();
        let seqs = first.sequences().to_vec();
        let mut resumed = Trainer::new(Model::from_checkpoint(&ckpt).unwrap(), seqs).unwrap();
        for _ in 0..2 {
            resumed.step().unwrap();
        }
        assert!(resumed.model.params.bit_identical(&full.model.params));
    }

    #[test]
    fn run_reports_every_epoch_and_honors_limits() {
        let mut t = toy_trainer(2);
        let mut epochs = Vec::new();
        t.run(0, 2, |_, _| true, |_, r| {
            epochs.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(t.step_count(), 4);
        assert_eq!(epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1]);
        assert!(epochs.iter().all(|e| e.mean_loss.is_finite() && e.steps == 2));

        let mut t = toy_trainer(2);
        t.run(3, 10, |_, _| true, |_, _| Ok(())).unwrap();
        assert_eq!(t.step_count(), 3);
        assert!(t.run(0, 0, |_, _| true, |_, _| Ok(())).is_err());
    }

    #[test]
    fn rejects_wrong_frame_size_and_short_sequences() {
        let model = Model::new(Config::toy()).unwrap();
        let seq = TrainSequence::new(vec![vec![[0.0; 3]; 5]; 4], vec![RigidTransform::IDENTITY; 4]).unwrap();
        assert!(Trainer::new(model, vec![seq]).is_err());
        let model = Model::new(Config::toy()).unwrap();
        let seq = TrainSequence::new(vec![vec![[0.0; 3]; 32]; 2], vec![RigidTransform::IDENTITY; 2]).unwrap();
        assert!(matches!(Trainer::new(model, vec![seq]), Err(Error::TooFewFrames { .. })));
        assert!(TrainSequence::new(vec![], vec![RigidTransform::IDENTITY]).is_err());
    }

    #[test]
    fn fresh_model_fit_report_measures_the_motion() {
        let t = toy_trainer(1);
        let r = evaluate_fit(&t.model, &t.sequences()[0]).unwrap();
        assert_eq!(r.pair_errors.len(), 5);
        assert!(r.max_translation() > 0.0 && r.ate.is_finite());
    }
}
