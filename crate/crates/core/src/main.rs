use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lodom::data::{
    locate_scans, read_calib, read_kitti_poses, read_scan_dir, sample_to_n, synth_sequence,
    write_kitti_poses, write_sequence, MotionSpec, SynthSpec,
};
use lodom::eval::{csv_row, Metric};
use lodom::gradcheck::{self, Tolerance};
use lodom::model::{Model, RunOptions};
use lodom::nn::checkpoint;
use lodom::train::{TrainSequence, Trainer};
use lodom::{Config, Error, Result};

#[derive(Parser)]
#[command(name = "lodom", version, about = "Deep LiDAR odometry: synthesize, train, infer, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic KITTI-layout sequence with ground-truth poses.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0.5)]
        step_max: f64,
        /// Maximum yaw per frame, degrees.
        #[arg(long, default_value_t = 5.0)]
        rot_max: f64,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sequence name under `sequences/`.
        #[arg(long, default_value = "00")]
        seq: String,
    },
    /// Train on the sequences listed in the config; checkpoint every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Estimate the trajectory of one sequence.
    Infer {
        /// Scan directory, its parent, or a root holding a single sequence.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_temporal: bool,
        #[arg(long)]
        no_seq_init: bool,
        #[arg(long)]
        no_cache: bool,
    },
    /// Print a CSV header and row of trajectory metrics.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        est: PathBuf,
        /// Calibration carrying ground truth into the sensor frame.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value = "rte,rre,ate,rpe")]
        metrics: String,
    },
    /// Compare analytic and finite-difference gradients on a toy scene.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        module: Option<String>,
    },
    /// Time the sequence runner with and without reuse and initialization.
    Bench {
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synth {
            out,
            frames,
            points,
            step_max,
            rot_max,
            noise,
            seed,
            seq,
        } => {
            let sequence = synth_sequence(&SynthSpec {
                frames,
                points,
                motion: MotionSpec::Random {
                    step_max,
                    rot_max_deg: rot_max,
                },
                noise,
                seed,
            })?;
            write_sequence(&out, &seq, &sequence)?;
            println!("wrote {frames} frames to {}", out.display());
            Ok(0)
        }
        Command::Train { config, out, resume } => train(&config, &out, resume.as_deref()),
        Command::Infer {
            data,
            checkpoint: ckpt,
            out,
            no_temporal,
            no_seq_init,
            no_cache,
        } => {
            let model = Model::from_checkpoint(&checkpoint::load(&ckpt)?)?;
            let (dir, seq) = locate_scans(&data)?;
            let raw = read_scan_dir(&dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
            let n = model.config.input.points;
            let frames = raw
                .iter()
                .map(|f| sample_to_n(f, n, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let run = model.run_sequence(
                &frames,
                &RunOptions {
                    temporal: !no_temporal,
                    seq_init: !no_seq_init,
                    cache: !no_cache,
                    seq_id: 0,
                },
            )?;
            write_kitti_poses(&out, &run.world)?;
            eprintln!(
                "{} frames{}, {} pyramid builds, {} cache hits",
                frames.len(),
                seq.map(|s| format!(" of sequence {s}")).unwrap_or_default(),
                run.pyramid_builds,
                run.cache_hits
            );
            Ok(0)
        }
        Command::Eval {
            gt,
            est,
            calib,
            metrics,
        } => {
            let metrics = Metric::parse_list(&metrics)?;
            let tr = calib.as_deref().map(read_calib).transpose()?;
            let gt = read_kitti_poses(&gt, tr.as_ref())?;
            let est = read_kitti_poses(&est, None)?;
            let (head, row, note) = csv_row(&gt, &est, &metrics)?;
            if let Some(note) = note {
                eprintln!("warning: {note}; RTE/RRE left empty");
            }
            println!("{head}\n{row}");
            Ok(0)
        }
        Command::Gradcheck { seed, module } => {
            let modules: Vec<String> = module.into_iter().collect();
            let reports = gradcheck::run(&modules, seed, &Tolerance::default())?;
            let mut ok = true;
            for r in &reports {
                println!(
                    "{:<11} {} checked {:>4} skipped {:>3} max_rel {:.2e}",
                    r.module,
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.checked,
                    r.skipped,
                    r.max_relative
                );
                for m in &r.failures {
                    println!(
                        "    {}[{}]: analytic {:.6e} numeric {:.6e}",
                        m.param, m.index, m.analytic, m.numeric
                    );
                }
                ok &= r.passed();
            }
            Ok(if ok { 0 } else { 3 })
        }
        Command::Bench {
            points,
            repeat,
            frames,
        } => {
            let r = lodom::bench::run(points, frames, repeat, 0)?;
            println!("points {} frames {} repeat {}", r.points, r.frames, r.repeat);
            println!("full    {:.4} s/sequence", r.full);
            println!("reduced {:.4} s/sequence", r.reduced);
            println!("ratio {:.4}", r.ratio());
            Ok(0)
        }
    }
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> Result<u8> {
    let cfg = Config::load(config)?;
    if cfg.train.sequences.is_empty() {
        return Err(Error::Config("train.sequences is empty".into()));
    }
    let model = match resume {
        Some(path) => {
            let model = Model::from_checkpoint(&checkpoint::load(path)?)?;
            if model.config.to_toml() != cfg.to_toml() {
                return Err(Error::Checkpoint(
                    "checkpoint config differs from --config".into(),
                ));
            }
            model
        }
        None => Model::new(cfg.clone())?,
    };
    let sequences = cfg
        .train
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (dir, _) = locate_scans(&s.scans)?;
            TrainSequence::load(
                &dir,
                &s.poses,
                s.calib.as_deref(),
                cfg.input.points,
                cfg.seed.wrapping_add(i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(model, sequences)?;
    eprintln!(
        "{} windows, {} steps per epoch, starting at step {}",
        trainer.num_windows(),
        trainer.steps_per_epoch(),
        trainer.step_count()
    );
    trainer.run(
        cfg.train.max_steps as u64,
        cfg.train.epochs,
        |_, _| true,
        |t, r| {
            println!(
                "epoch {:>4} steps {:>5} loss {:>10.4} max_pair_err {:.4} m {:.3} deg",
                r.epoch, r.steps, r.mean_loss, r.max_pair_error.0, r.max_pair_error.1
            );
            checkpoint::save(out, &t.model.checkpoint(r.epoch + 1))
        },
    )?;
    Ok(0)
}
