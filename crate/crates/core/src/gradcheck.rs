//! Finite-difference verification of every trainable path on a 32-point toy
//! scene.
//!
//! Each module gets a scalar probe `Σ w ⊙ output` with fixed random `w`.
//! Module inputs are registered as extra parameters so gradients with respect
//! to them are checked too. A sample whose `±h` perturbation changes the
//! tape's branch signature (relu side, max winner, neighbor set, sign flip)
//! straddles a kink and is skipped.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{synth_sequence, MotionSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::geometry::{relative_gt, Point, RigidTransform};
use crate::loss::window_loss;
use crate::model::Model;
use crate::nn::{backward_into, ParamId, ParamStore, Tape, Tensor, Var};
use crate::pose::PoseVar;
use crate::pyramid::LevelVars;
use crate::temporal::StateVars;

pub const MODULES: [&str; 10] = [
    "ops",
    "pyramid",
    "costvolume",
    "gru",
    "mask",
    "pose_head",
    "relay",
    "lstm",
    "loss",
    "window",
];

/// Central-difference step and agreement rule.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub relative: f64,
    pub absolute: f64,
    /// Below this magnitude the absolute bound applies.
    pub small: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            relative: 1e-3,
            absolute: 1e-6,
            small: 1e-4,
        }
    }
}

impl Tolerance {
    pub fn agrees(&self, analytic: f64, numeric: f64) -> bool {
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if scale < self.small {
            diff <= self.absolute
        } else {
            diff / scale <= self.relative
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub module: String,
    pub checked: usize,
    pub skipped: usize,
    /// Largest relative error among samples above the small-magnitude bound.
    pub max_relative: f64,
    pub failures: Vec<Mismatch>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Compares the tape gradient of `f` against central differences for up to
/// `per_param` entries of each parameter selected by `select`.
pub fn check(
    module: &str,
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    per_param: usize,
    seed: u64,
    tol: &Tolerance,
    f: impl Fn(&ParamStore) -> Result<(Tape, Var)>,
) -> Result<CheckReport> {
    let (tape, loss) = f(store)?;
    let base_sig = tape.signature();
    let mut grads = store.clone();
    grads.zero_grad();
    backward_into(&tape, loss, &mut grads)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = CheckReport {
        module: module.to_string(),
        checked: 0,
        skipped: 0,
        max_relative: 0.0,
        failures: Vec::new(),
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| select(store.name(id))).collect();
    for id in ids {
        let n = store.value(id).len();
        let picks = sample(&mut rng, n, per_param.min(n));
        for i in picks {
            let x0 = store.value(id).data()[i];
            let mut eval = |x: f64| -> Result<(f64, u64)> {
                work.value_mut(id).data_mut()[i] = x;
                let (t, l) = f(&work)?;
                Ok((t.value(l).item(), t.signature()))
            };
            let (up, s_up) = eval(x0 + tol.step)?;
            let (down, s_down) = eval(x0 - tol.step)?;
            work.value_mut(id).data_mut()[i] = x0;
            if s_up != base_sig || s_down != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * tol.step);
            let analytic = grads.grad(id).data()[i];
            report.checked += 1;
            let scale = analytic.abs().max(numeric.abs());
            if scale >= tol.small {
                report.max_relative = report.max_relative.max((analytic - numeric).abs() / scale);
            }
            if !tol.agrees(analytic, numeric) {
                report.failures.push(Mismatch {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Adds `Σ probe ⊙ x` to `acc`.
fn probe(tape: &mut Tape, acc: Option<Var>, x: Var, w: &Tensor) -> Var {
    let w = tape.constant(w.clone());
    let p = tape.mul(x, w);
    let s = tape.sum_all(p);
    match acc {
        Some(a) => tape.add(a, s),
        None => s,
    }
}

/// Probe weights shaped like each output, generated on first use and reused
/// on every later evaluation so `f` stays a fixed function.
struct Probes {
    seed: u64,
}

impl Probes {
    fn get(&self, slot: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(slot));
        random_tensor(&mut rng, rows, cols, -1.0, 1.0)
    }

    fn add(&self, tape: &mut Tape, acc: Option<Var>, slot: u64, x: Var) -> Var {
        let (r, c) = tape.value(x).shape();
        let w = self.get(slot, r, c);
        probe(tape, acc, x, &w)
    }
}

/// Toy network with every pose head given small random output weights, so
/// that gradients reach the layers behind them, plus a three-frame scene.
pub struct Fixture {
    pub model: Model,
    pub frames: Vec<Vec<Point>>,
    pub poses: Vec<RigidTransform>,
    pub seed: u64,
}

impl Fixture {
    pub fn new(seed: u64) -> Result<Self> {
        let mut cfg = Config::toy();
        cfg.seed = seed;
        let mut model = Model::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            if model.params.name(id).starts_with("pose") {
                for v in model.params.value_mut(id).data_mut() {
                    *v += rng.random_range(-0.1..0.1);
                }
            }
        }
        let seq = synth_sequence(&SynthSpec {
            frames: 3,
            points: model.config.input.points,
            motion: MotionSpec::Random {
                step_max: 0.5,
                rot_max_deg: 5.0,
            },
            noise: 0.01,
            seed,
        })?;
        Ok(Self {
            model,
            frames: seq.frames,
            poses: seq.poses,
            seed,
        })
    }

    fn pyramids(&self, tape: &mut Tape, store: &ParamStore) -> Result<(Vec<LevelVars>, Vec<LevelVars>)> {
        let p = &self.model.net.pyramid;
        Ok((
            p.build_on_tape(tape, store, &self.frames[0])?,
            p.build_on_tape(tape, store, &self.frames[1])?,
        ))
    }

    fn widths(&self) -> (usize, usize, usize) {
        let c = &self.model.config;
        (c.embedding.width, c.pyramid.widths[0], c.pyramid.levels[0])
    }
}

/// Registers `input.{name}` on `store` and returns its id.
fn input(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize, lo: f64, hi: f64) -> Result<ParamId> {
    store.register(format!("input.{name}"), random_tensor(rng, rows, cols, lo, hi))
}

fn input_pose(store: &mut ParamStore, name: &str, pose: &RigidTransform) -> Result<(ParamId, ParamId)> {
    Ok((
        store.register(format!("input.{name}.q"), Tensor::from_vec(1, 4, pose.q.to_array().to_vec()))?,
        store.register(format!("input.{name}.t"), Tensor::from_vec(1, 3, pose.t.to_vec()))?,
    ))
}

fn pose_var(tape: &mut Tape, store: &ParamStore, ids: (ParamId, ParamId)) -> PoseVar {
    PoseVar {
        q: tape.param(store, ids.0),
        t: tape.param(store, ids.1),
    }
}

fn starts(prefixes: &'static [&'static str]) -> impl Fn(&str) -> bool {
    move |name| prefixes.iter().any(|p| name.starts_with(p))
}

/// Runs the check for one module.
pub fn run_module(module: &str, seed: u64, tol: &Tolerance) -> Result<CheckReport> {
    let fx = Fixture::new(seed)?;
    let net = &fx.model.net;
    let probes = Probes { seed };
    let mut store = fx.model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let (d, fw, n0) = fx.widths();
    let per = 4;

    match module {
        "ops" => {
            let mut s = ParamStore::new();
            let x = input(&mut s, &mut rng, "x", 6, 4, -1.0, 1.0)?;
            let y = input(&mut s, &mut rng, "y", 6, 4, -1.0, 1.0)?;
            let w = input(&mut s, &mut rng, "w", 4, 3, -1.0, 1.0)?;
            let b = input(&mut s, &mut rng, "b", 1, 3, -1.0, 1.0)?;
            let sc = input(&mut s, &mut rng, "s", 1, 1, 0.5, 1.5)?;
            let qa = input(&mut s, &mut rng, "qa", 1, 4, -1.0, 1.0)?;
            let qb = input(&mut s, &mut rng, "qb", 1, 4, -1.0, 1.0)?;
            check("ops", &s, |_| true, 24, seed, tol, |s| {
                let mut t = Tape::new();
                let (x, y, w, b, sc) = (t.param(s, x), t.param(s, y), t.param(s, w), t.param(s, b), t.param(s, sc));
                let (qa, qb) = (t.param(s, qa), t.param(s, qb));
                let mut acc = None;
                let mm = t.matmul(x, w);
                let lin = t.add_bias(mm, b);
                let outs = [
                    lin,
                    t.relu(lin),
                    t.sigmoid(x),
                    t.tanh(y),
                    t.exp(x),
                    t.abs(y),
                    {
                        let e = t.exp(y);
                        t.sqrt(e)
                    },
                    t.mul(x, y),
                    t.sub(x, y),
                    t.mul_scalar(x, sc),
                    t.affine(y, -0.7, 0.2),
                    t.concat(&[x, y]),
                    t.slice_cols(y, 1, 2),
                    t.gather(x, vec![5, 0, 0, 3]),
                    t.group_max(x, 3),
                    t.group_softmax(y, 2),
                    t.group_sum(x, 3),
                    t.weighted_gather(y, vec![0, 2, 4, 1, 3, 5], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3], 3),
                    t.transpose(x),
                    t.normalize_rows(y),
                    t.quat_mul(qa, qb),
                    t.quat_to_rot(qa),
                    {
                        let u = t.normalize_rows(qb);
                        t.canonical_sign(u)
                    },
                ];
                for (slot, o) in outs.into_iter().enumerate() {
                    acc = Some(probes.add(&mut t, acc, slot as u64, o));
                }
                Ok((t, acc.expect("at least one op")))
            })
        }
        "pyramid" => check(module, &store, starts(&["pyramid."]), per, seed, tol, |s| {
            let mut t = Tape::new();
            let levels = net.pyramid.build_on_tape(&mut t, s, &fx.frames[0])?;
            let mut acc = None;
            for (l, lv) in levels.iter().enumerate() {
                acc = Some(probes.add(&mut t, acc, l as u64, lv.features));
            }
            Ok((t, acc.expect("at least one level")))
        }),
        "costvolume" => {
            let pose = input_pose(&mut store, "pose", &relative_gt(&fx.poses[0], &fx.poses[1]))?;
            check(module, &store, starts(&["cv", "input."]), per, seed, tol, |s| {
                let mut t = Tape::new();
                let (a, b) = fx.pyramids(&mut t, s)?;
                let p = pose_var(&mut t, s, pose);
                let top = a.len() - 1;
                let coarse = net.coarse_cv.residual(&mut t, s, &a[top], &b[top], p)?;
                let fine = net.refine[0].cost_volume.residual(&mut t, s, &a[0], &b[0], p)?;
                let acc = probes.add(&mut t, None, 0, coarse);
                let l = probes.add(&mut t, Some(acc), 1, fine);
                Ok((t, l))
            })
        }
        "gru" => {
            let re = input(&mut store, &mut rng, "re", n0, d, -1.0, 1.0)?;
            let f = input(&mut store, &mut rng, "f", n0, fw, 0.0, 1.0)?;
            let ce = input(&mut store, &mut rng, "ce", n0, d, -1.0, 1.0)?;
            check(module, &store, starts(&["gru", "input."]), per, seed, tol, |s| {
                let mut t = Tape::new();
                let (re, f, ce) = (t.param(s, re), t.param(s, f), t.param(s, ce));
                let e = net.refine[0].gru.forward(&mut t, s, re, f, ce)?;
                let l = probes.add(&mut t, None, 0, e);
                Ok((t, l))
            })
        }
        "mask" => {
            let e = input(&mut store, &mut rng, "e", n0, d, -1.0, 1.0)?;
            let f = input(&mut store, &mut rng, "f", n0, fw, 0.0, 1.0)?;
            let cm = input(&mut store, &mut rng, "cm", n0, d, -1.0, 1.0)?;
            let ftop = fx.model.config.pyramid.widths[fx.model.config.num_levels() - 1];
            let ftop = input(&mut store, &mut rng, "ftop", n0, ftop, 0.0, 1.0)?;
            check(module, &store, starts(&["mask", "input."]), per, seed, tol, |s| {
                let mut t = Tape::new();
                let (e, f, cm, ftop) = (t.param(s, e), t.param(s, f), t.param(s, cm), t.param(s, ftop));
                let fine = net.refine[0].mask.forward(&mut t, s, e, f, Some(cm))?;
                let coarse = net.coarse_mask.forward(&mut t, s, e, ftop, None)?;
                let acc = probes.add(&mut t, None, 0, fine);
                let l = probes.add(&mut t, Some(acc), 1, coarse);
                Ok((t, l))
            })
        }
        "pose_head" => {
            let e = input(&mut store, &mut rng, "e", n0, d, -1.0, 1.0)?;
            let m = input(&mut store, &mut rng, "m", n0, d, -1.0, 1.0)?;
            check(module, &store, starts(&["pose", "input."]), per, seed, tol, |s| {
                let mut t = Tape::training();
                let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
                let (e, m) = (t.param(s, e), t.param(s, m));
                let mut acc = None;
                for (slot, head) in [&net.refine[0].pose, &net.coarse_pose].into_iter().enumerate() {
                    let p = head.forward(&mut t, s, e, m, &mut drop_rng)?;
                    acc = Some(probes.add(&mut t, acc, 2 * slot as u64, p.q));
                    acc = Some(probes.add(&mut t, acc, 2 * slot as u64 + 1, p.t));
                }
                Ok((t, acc.expect("two heads")))
            })
        }
        "relay" => {
            let cfg = &fx.model.config;
            let top = cfg.num_levels() - 1;
            let n3 = cfg.pyramid.levels[top];
            let prev_c = input(&mut store, &mut rng, "c", n3, d, -1.0, 1.0)?;
            let prev_e = input(&mut store, &mut rng, "e", n3, d, -1.0, 1.0)?;
            let pose = input_pose(&mut store, "pose", &relative_gt(&fx.poses[0], &fx.poses[1]))?;
            let anchors = fx.model.build_pyramid(&fx.frames[0])?.levels[top].points.clone();
            let current = fx.model.build_pyramid(&fx.frames[1])?.levels[top].points.clone();
            check(module, &store, starts(&["relay.", "input."]), per, seed, tol, |s| {
                let mut t = Tape::new();
                let prev = StateVars {
                    anchors: anchors.clone(),
                    c: t.param(s, prev_c),
                    e: t.param(s, prev_e),
                };
                let xyz = t.constant(crate::pointops::points_tensor(&current));
                let p = pose_var(&mut t, s, pose);
                let (c, e) = net.relay.forward(&mut t, s, &prev, xyz, &current, p)?;
                let acc = probes.add(&mut t, None, 0, c);
                let l = probes.add(&mut t, Some(acc), 1, e);
                Ok((t, l))
            })
        }
        "lstm" => {
            let cfg = &fx.model.config;
            let top = cfg.num_levels() - 1;
            let n3 = cfg.pyramid.levels[top];
            let ftw = cfg.pyramid.widths[top];
            let c = input(&mut store, &mut rng, "c", n3, d, -1.0, 1.0)?;
            let e = input(&mut store, &mut rng, "e", n3, d, -1.0, 1.0)?;
            let re = input(&mut store, &mut rng, "re", n3, d, -1.0, 1.0)?;
            let f = input(&mut store, &mut rng, "f", n3, ftw, 0.0, 1.0)?;
            check(module, &store, starts(&["lstm.", "input."]), per, seed, tol, |s| {
                let mut t = Tape::new();
                let (c, e, re, f) = (t.param(s, c), t.param(s, e), t.param(s, re), t.param(s, f));
                let tr = net.lstm.trace(&mut t, s, c, e, re, f)?;
                let acc = probes.add(&mut t, None, 0, tr.c);
                let l = probes.add(&mut t, Some(acc), 1, tr.e);
                Ok((t, l))
            })
        }
        "loss" => {
            let gts = [
                relative_gt(&fx.poses[0], &fx.poses[1]),
                relative_gt(&fx.poses[1], &fx.poses[2]),
                relative_gt(&fx.poses[0], &fx.poses[2]),
            ];
            let levels = fx.model.config.num_levels();
            let mut preds = Vec::new();
            for pair in 0..2 {
                for l in 0..levels {
                    let jitter = RigidTransform::from_axis_angle(
                        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0],
                        rng.random_range(0.01..0.1),
                        [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)],
                    );
                    preds.push(input_pose(&mut store, &format!("p{pair}{l}"), &jitter.then_after(&gts[pair]))?);
                }
            }
            check(module, &store, starts(&["loss.", "input."]), per, seed, tol, |s| {
                let mut t = Tape::new();
                let vars: Vec<PoseVar> = preds.iter().map(|&p| pose_var(&mut t, s, p)).collect();
                let (first, second) = vars.split_at(levels);
                let l = window_loss(&mut t, s, &net.loss, first, second, [&gts[0], &gts[1], &gts[2]])?;
                Ok((t, l))
            })
        }
        "window" => check(module, &store, |_| true, 2, seed, tol, |s| {
            let mut t = Tape::training();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
            let f = &fx.frames;
            let w = net.window_loss(
                &mut t,
                s,
                [&f[0], &f[1], &f[2]],
                [&fx.poses[0], &fx.poses[1], &fx.poses[2]],
                None,
                &mut drop_rng,
            )?;
            Ok((t, w.loss))
        }),
        other => Err(Error::Invalid(format!(
            "unknown gradcheck module `{other}` (expected one of {})",
            MODULES.join(", ")
        ))),
    }
}

/// Runs `modules` (all when empty) and returns one report each.
pub fn run(modules: &[String], seed: u64, tol: &Tolerance) -> Result<Vec<CheckReport>> {
    let names: Vec<String> = if modules.is_empty() {
        MODULES.iter().map(|m| m.to_string()).collect()
    } else {
        modules.to_vec()
    };
    names.iter().map(|m| run_module(m, seed, tol)).collect()
}
