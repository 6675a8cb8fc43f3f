//! The full odometry network, pair estimation and sequence inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::costvolume::CostVolume;
use crate::error::{Error, Result};
use crate::geometry::{relative_gt, Point, RigidTransform};
use crate::loss::{window_loss, LossWeights};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::pose::PoseVar;
use crate::pyramid::{LevelVars, Pyramid, PyramidCache, PyramidNet};
use crate::refine::{hierarchical_refine, EmbeddingState, Gru, LayerOutput, MaskHead, PoseHead, RefineLevel};
use crate::temporal::{PeepholeLstm, Relay, StateVars, TemporalState};

/// Layer structure of the network; weights live in a separate [`ParamStore`].
#[derive(Debug)]
pub struct Network {
    pub pyramid: PyramidNet,
    pub(crate) coarse_cv: CostVolume,
    pub(crate) coarse_mask: MaskHead,
    pub(crate) coarse_pose: PoseHead,
    pub(crate) relay: Relay,
    pub(crate) lstm: PeepholeLstm,
    pub(crate) refine: Vec<RefineLevel>,
    pub loss: LossWeights,
    temporal: bool,
}

/// Per-level poses of one pair (index 0 = finest) and the recurrent state it
/// hands to the next pair.
#[derive(Clone, Debug)]
pub struct PairVars {
    pub poses: Vec<PoseVar>,
    pub state: Option<StateVars>,
}

impl Network {
    /// Registers every parameter in a fixed order.
    pub fn new(cfg: &Config, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let levels = cfg.num_levels();
        let top = levels - 1;
        let de = cfg.embedding.width;
        let widths = &cfg.pyramid.widths;
        let pyramid = PyramidNet::new(cfg, store)?;
        let mut refine = Vec::with_capacity(top);
        for l in 0..top {
            let d = widths[l];
            refine.push(RefineLevel {
                level: l,
                cost_volume: CostVolume::new(store, &format!("cv{l}"), d, de, cfg.cost_volume.k, seed)?,
                gru: Gru::new(store, &format!("gru{l}"), de, d, seed)?,
                mask: MaskHead::new(store, &format!("mask{l}"), de, d, true, seed)?,
                pose: PoseHead::new(store, &format!("pose{l}"), de, cfg.pose_head.hidden, cfg.pose_head.dropout, seed)?,
            });
        }
        let d = widths[top];
        let coarse_cv = CostVolume::new(store, &format!("cv{top}"), d, de, cfg.cost_volume.k, seed)?;
        let coarse_mask = MaskHead::new(store, &format!("mask{top}"), de, d, false, seed)?;
        let coarse_pose = PoseHead::new(store, &format!("pose{top}"), de, cfg.pose_head.hidden, cfg.pose_head.dropout, seed)?;
        let t = &cfg.temporal;
        let relay = Relay::new(store, "relay", de, t.k_relay, t.relay_geometry, seed)?;
        let lstm = PeepholeLstm::new(store, "lstm", de, d, seed)?;
        let loss = LossWeights::new(cfg, store)?;
        Ok(Self {
            pyramid,
            coarse_cv,
            coarse_mask,
            coarse_pose,
            relay,
            lstm,
            refine,
            loss,
            temporal: t.enabled,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.refine.len() + 1
    }

    pub fn temporal_enabled(&self) -> bool {
        self.temporal
    }

    /// One pair on `tape`. The coarsest level warps frame `a` by `t_init`;
    /// with a previous state the relay and LSTM produce `E`, otherwise the
    /// cost volume output is used directly. Finer levels follow through
    /// [`hierarchical_refine`]. A state is returned when `temporal` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn estimate_pair_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a: &[LevelVars],
        b: &[LevelVars],
        t_init: PoseVar,
        prev: Option<&StateVars>,
        temporal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<PairVars> {
        let levels = self.num_levels();
        if a.len() != levels || b.len() != levels {
            return Err(Error::Invalid(format!(
                "pyramids have {} and {} levels, network expects {levels}",
                a.len(),
                b.len()
            )));
        }
        let top = levels - 1;
        let (at, bt) = (&a[top], &b[top]);
        let re = self.coarse_cv.residual(tape, store, at, bt, t_init)?;
        let (e, c) = match prev.filter(|_| temporal) {
            Some(prev) => {
                let (c_relay, e_relay) =
                    self.relay.forward(tape, store, prev, at.xyz, &at.points, t_init)?;
                let tr = self.lstm.trace(tape, store, c_relay, e_relay, re, at.features)?;
                (tr.e, tr.c)
            }
            None => {
                let (n, d) = tape.value(re).shape();
                (re, tape.constant(Tensor::zeros(n, d)))
            }
        };
        let m = self.coarse_mask.forward(tape, store, e, at.features, None)?;
        let delta = self.coarse_pose.forward(tape, store, e, m, rng)?;
        let pose = PoseVar::compose(tape, delta, t_init);
        let coarsest = LayerOutput {
            level: top,
            pose,
            state: EmbeddingState { e, m },
        };
        let outputs = hierarchical_refine(&self.refine, tape, store, coarsest, a, b, rng)?;
        Ok(PairVars {
            poses: outputs.iter().map(|o| o.pose).collect(),
            state: temporal.then(|| StateVars {
                anchors: at.points.clone(),
                c,
                e,
            }),
        })
    }

    /// Loss of the frame triple `frames` with world poses `world`. Every
    /// pyramid is built once on the tape. Without `warm` the first pair
    /// starts cold from the identity; with it, the first pair starts from the
    /// given pose and state, held constant. The second pair starts from the
    /// first pair's finest pose and relays its state.
    pub fn window_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: [&[Point]; 3],
        world: [&RigidTransform; 3],
        warm: Option<&Warm>,
        rng: &mut ChaCha8Rng,
    ) -> Result<WindowVars> {
        let mut pyramids = Vec::with_capacity(3);
        for f in frames {
            pyramids.push(self.pyramid.build_on_tape(tape, store, f)?);
        }
        let init = PoseVar::constant(tape, &warm.map_or(RigidTransform::IDENTITY, |w| w.init));
        let prev = warm.and_then(|w| w.state.as_ref()).map(|s| s.load(tape));
        let first = self.estimate_pair_on_tape(
            tape,
            store,
            &pyramids[0],
            &pyramids[1],
            init,
            prev.as_ref(),
            self.temporal,
            rng,
        )?;
        let second = self.estimate_pair_on_tape(
            tape,
            store,
            &pyramids[1],
            &pyramids[2],
            first.poses[0],
            first.state.as_ref(),
            self.temporal,
            rng,
        )?;
        let gts = [
            relative_gt(world[0], world[1]),
            relative_gt(world[1], world[2]),
            relative_gt(world[0], world[2]),
        ];
        let loss = window_loss(
            tape,
            store,
            &self.loss,
            &first.poses,
            &second.poses,
            [&gts[0], &gts[1], &gts[2]],
        )?;
        Ok(WindowVars {
            loss,
            first: first.poses,
            second: second.poses,
            gts: [gts[0], gts[1]],
        })
    }
}

/// Starting point of a window whose first pair continues a sequence: the
/// previous pair's finest pose and its temporal state.
#[derive(Clone, Debug)]
pub struct Warm {
    pub init: RigidTransform,
    pub state: Option<TemporalState>,
}

/// Result of [`Network::window_loss`].
#[derive(Clone, Debug)]
pub struct WindowVars {
    pub loss: Var,
    pub first: Vec<PoseVar>,
    pub second: Vec<PoseVar>,
    /// Relative ground truth of the two pairs.
    pub gts: [RigidTransform; 2],
}

/// Switches for the sequence runner. Turning any of them off reproduces a
/// reduced pipeline: no temporal state, identity initialization for every
/// pair, or a fresh pyramid for every use of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub temporal: bool,
    pub seq_init: bool,
    pub cache: bool,
    pub seq_id: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            temporal: true,
            seq_init: true,
            cache: true,
            seq_id: 0,
        }
    }
}

/// Output of one pair estimate, as values.
#[derive(Clone, Debug)]
pub struct PairEstimate {
    /// Per-level poses, index 0 = finest.
    pub poses: Vec<RigidTransform>,
    pub state: Option<TemporalState>,
}

impl PairEstimate {
    pub fn finest(&self) -> RigidTransform {
        self.poses[0]
    }
}

#[derive(Clone, Debug)]
pub struct SequenceRun {
    /// World pose of every frame, `world[0]` = identity.
    pub world: Vec<RigidTransform>,
    /// Finest pose of every pair `(k, k+1)`.
    pub pairs: Vec<RigidTransform>,
    /// Initial pose handed to every pair.
    pub inits: Vec<RigidTransform>,
    pub pyramid_builds: u64,
    pub cache_hits: u64,
}

/// A network together with its weights.
#[derive(Debug)]
pub struct Model {
    pub config: Config,
    pub net: Network,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: Config) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::new(&config, &mut params)?;
        Ok(Self {
            config,
            net,
            params,
        })
    }

    /// Rebuilds the network from the embedded config and adopts the stored
    /// weights and optimizer state. Parameter names and shapes must match.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = Config::from_toml(&ckpt.config_toml)?;
        let mut model = Self::new(config)?;
        let fresh = model.params.entries();
        let stored = ckpt.params.entries();
        if fresh.len() != stored.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, network has {}",
                stored.len(),
                fresh.len()
            )));
        }
        for (f, s) in fresh.iter().zip(stored) {
            if f.name != s.name || f.value.shape() != s.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match network `{}` {:?}",
                    s.name,
                    s.value.shape(),
                    f.name,
                    f.value.shape()
                )));
            }
        }
        model.params = ckpt.params.clone();
        Ok(model)
    }

    pub fn checkpoint(&self, epoch: u32) -> Checkpoint {
        Checkpoint {
            config_toml: self.config.to_toml(),
            epoch,
            params: self.params.clone(),
        }
    }

    pub fn build_pyramid(&self, raw: &[Point]) -> Result<Pyramid> {
        self.net.pyramid.build(&self.params, raw)
    }

    /// Inference on one pair of prebuilt pyramids.
    pub fn estimate_pair(
        &self,
        a: &Pyramid,
        b: &Pyramid,
        t_init: &RigidTransform,
        prev: Option<&TemporalState>,
        temporal: bool,
    ) -> Result<PairEstimate> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let (la, lb) = (a.load(&mut tape), b.load(&mut tape));
        let init = PoseVar::constant(&mut tape, t_init);
        let prev = prev.map(|s| s.load(&mut tape));
        let out = self.net.estimate_pair_on_tape(
            &mut tape,
            &self.params,
            &la,
            &lb,
            init,
            prev.as_ref(),
            temporal && self.net.temporal,
            &mut rng,
        )?;
        let poses: Vec<RigidTransform> = out.poses.iter().map(|p| p.value(&tape)).collect();
        if poses.iter().any(|p| !p.q.to_array().iter().chain(&p.t).all(|v| v.is_finite())) {
            return Err(Error::NonFinite("pose estimate".into()));
        }
        Ok(PairEstimate {
            poses,
            state: out.state.map(|s| s.value(&tape)),
        })
    }

    /// Runs the full pipeline over `frames` and returns what the pair after
    /// the last frame would start from.
    pub fn warm_start(&self, frames: &[Vec<Point>]) -> Result<Warm> {
        let run = self.run_sequence_inner(frames, &RunOptions::default())?;
        Ok(Warm {
            init: run.0.pairs[run.0.pairs.len() - 1],
            state: run.1,
        })
    }

    /// Estimates every consecutive pair and accumulates world poses,
    /// `W_{k+1} = W_k ∘ (T_{k,k+1})⁻¹`.
    pub fn run_sequence(&self, frames: &[Vec<Point>], opts: &RunOptions) -> Result<SequenceRun> {
        self.run_sequence_inner(frames, opts).map(|r| r.0)
    }

    fn run_sequence_inner(
        &self,
        frames: &[Vec<Point>],
        opts: &RunOptions,
    ) -> Result<(SequenceRun, Option<TemporalState>)> {
        if frames.len() < 2 {
            return Err(Error::TooFewFrames {
                needed: 2,
                got: frames.len(),
            });
        }
        let mut cache = PyramidCache::new(2);
        let mut builds = 0u64;
        let mut pyramid = |k: usize| -> Result<std::sync::Arc<Pyramid>> {
            if opts.cache {
                cache.get_or_build((opts.seq_id, k), || self.build_pyramid(&frames[k]))
            } else {
                builds += 1;
                Ok(std::sync::Arc::new(self.build_pyramid(&frames[k])?))
            }
        };
        let mut world = vec![RigidTransform::IDENTITY];
        let mut pairs = Vec::with_capacity(frames.len() - 1);
        let mut inits = Vec::with_capacity(frames.len() - 1);
        let mut state: Option<TemporalState> = None;
        let mut previous = RigidTransform::IDENTITY;
        for k in 0..frames.len() - 1 {
            let (a, b) = (pyramid(k)?, pyramid(k + 1)?);
            let init = if opts.seq_init { previous } else { RigidTransform::IDENTITY };
            let est = self.estimate_pair(&a, &b, &init, state.as_ref(), opts.temporal)?;
            let t = est.finest();
            inits.push(init);
            pairs.push(t);
            let last = world[world.len() - 1];
            world.push(RigidTransform::compose(&last, &t.inverse()));
            previous = t;
            state = est.state;
        }
        drop(pyramid);
        let (pyramid_builds, cache_hits) = if opts.cache {
            (cache.builds(), cache.hits())
        } else {
            (builds, 0)
        };
        let run = SequenceRun {
            world,
            pairs,
            inits,
            pyramid_builds,
            cache_hits,
        };
        Ok((run, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn scene(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    fn toy() -> Model {
        Model::new(Config::toy()).unwrap()
    }

    #[test]
    fn identical_frames_give_identity_at_every_level() {
        let m = toy();
        let f = scene(32, 1);
        let p = m.build_pyramid(&f).unwrap();
        let est = m.estimate_pair(&p, &p, &RigidTransform::IDENTITY, None, true).unwrap();
        assert_eq!(est.poses.len(), 4);
        assert!(est.poses.iter().all(|t| *t == RigidTransform::IDENTITY));
    }

    #[test]
    fn fresh_network_returns_the_initial_pose() {
        let m = toy();
        let (fa, fb) = (scene(32, 2), scene(32, 3));
        let (pa, pb) = (m.build_pyramid(&fa).unwrap(), m.build_pyramid(&fb).unwrap());
        let init = RigidTransform::from_axis_angle([0.1, 0.2, 1.0], 0.3, [0.5, -0.2, 0.1]);
        let est = m.estimate_pair(&pa, &pb, &init, None, true).unwrap();
        assert!(est.poses.iter().all(|t| *t == init));
        let again = m.estimate_pair(&pa, &pb, &init, est.state.as_ref(), true).unwrap();
        assert!(again.poses.iter().all(|t| *t == init));
    }

    #[test]
    fn sequence_threads_init_and_counts_builds() {
        let mut m = toy();
        // nudge one pose head so pairs differ from identity
        let id = m.params.id("pose0.1.weight").unwrap();
        m.params.value_mut(id).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i as f64) * 0.7).sin() * 0.01);
        let frames: Vec<Vec<Point>> = (0..5).map(|s| scene(32, 10 + s)).collect();
        let on = m.run_sequence(&frames, &RunOptions::default()).unwrap();
        assert_eq!(on.pyramid_builds, 5);
        assert_eq!(on.cache_hits, 3);
        for k in 1..4 {
            assert_eq!(on.inits[k], on.pairs[k - 1]);
        }
        let off = m
            .run_sequence(&frames, &RunOptions { cache: false, ..RunOptions::default() })
            .unwrap();
        assert_eq!(off.pyramid_builds, 8);
        assert_eq!(off.world, on.world);
        assert!(m.run_sequence(&frames[..1], &RunOptions::default()).is_err());
    }

    #[test]
    fn window_loss_is_finite_at_init() {
        let m = toy();
        let frames: Vec<Vec<Point>> = (0..3).map(|s| scene(32, 20 + s)).collect();
        let world = [
            RigidTransform::IDENTITY,
            RigidTransform::from_translation([0.3, 0.0, 0.0]),
            RigidTransform::from_translation([0.6, 0.0, 0.0]),
        ];
        let mut tape = Tape::training();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = m
            .net
            .window_loss(&mut tape, &m.params, [&frames[0], &frames[1], &frames[2]], [&world[0], &world[1], &world[2]], None, &mut rng)
            .unwrap();
        assert!(tape.value(w.loss).item().is_finite());
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_the_model() {
        let m = toy();
        let back = Model::from_checkpoint(&m.checkpoint(3)).unwrap();
        assert!(back.params.bit_identical(&m.params));
        assert_eq!(back.config, m.config);
        let mut other = Config::toy();
        other.embedding.width = 5;
        let mut ck = Model::new(other).unwrap().checkpoint(0);
        ck.config_toml = m.config.to_toml();
        assert!(Model::from_checkpoint(&ck).is_err());
    }
}
