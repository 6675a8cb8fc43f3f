//! KITTI-format scans and poses, point sampling and synthetic sequences.
//!
//! Directory layout (shared by real and synthetic data):
//!
//! ```text
//! ROOT/sequences/<seq>/velodyne/000000.bin
//! ROOT/poses/<seq>.txt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Point, RigidTransform};
use crate::io::write_atomic;

/// Reads `x y z reflectance` float32 quadruples; reflectance is dropped.
pub fn read_kitti_scan(path: &Path) -> Result<Vec<Point>> {
    let bytes = fs::read(path)?;
    parse_kitti_scan(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn parse_kitti_scan(bytes: &[u8]) -> std::result::Result<Vec<Point>, String> {
    if bytes.len() % 16 != 0 {
        return Err(format!(
            "length {} is not a multiple of 16 bytes",
            bytes.len()
        ));
    }
    let (records, _) = bytes.as_chunks::<16>();
    Ok(records
        .iter()
        .map(|r| {
            let f = |i: usize| f32::from_le_bytes(r[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2)]
        })
        .collect())
}

/// Writes points as float32 quadruples with zero reflectance.
pub fn encode_kitti_scan(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_scan(path: &Path, points: &[Point]) -> Result<()> {
    write_atomic(path, &encode_kitti_scan(points))
}

/// Parses one 12-float line into a transform.
fn parse_matrix(line: &str, path: &Path, lineno: usize) -> Result<RigidTransform> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
    let m: [f64; 12] = vals.as_slice().try_into().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        msg: format!("expected 12 values, found {}", vals.len()),
    })?;
    RigidTransform::from_matrix(&m).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        msg: e.to_string(),
    })
}

/// Reads the `Tr:` line of a KITTI calibration file.
pub fn read_calib(path: &Path) -> Result<RigidTransform> {
    let text = fs::read_to_string(path)?;
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim_start().strip_prefix("Tr:") {
            return parse_matrix(rest, path, i + 1);
        }
    }
    Err(Error::Format {
        path: path.to_path_buf(),
        msg: "no `Tr:` line".into(),
    })
}

/// One pose per non-empty line. With a calibration `tr` the poses are
/// conjugated into the LiDAR frame: `Tr⁻¹ ∘ T ∘ Tr`.
pub fn read_kitti_poses(path: &Path, tr: Option<&RigidTransform>) -> Result<Vec<RigidTransform>> {
    let text = fs::read_to_string(path)?;
    parse_kitti_poses(&text, path, tr)
}

pub fn parse_kitti_poses(
    text: &str,
    path: &Path,
    tr: Option<&RigidTransform>,
) -> Result<Vec<RigidTransform>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t = parse_matrix(line, path, i + 1)?;
        poses.push(match tr {
            Some(tr) => tr.inverse().then_after(&t.then_after(tr)),
            None => t,
        });
    }
    Ok(poses)
}

pub fn format_kitti_poses(poses: &[RigidTransform]) -> String {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = p.to_matrix().iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_kitti_poses(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    write_atomic(path, format_kitti_poses(poses).as_bytes())
}

/// Exactly `n` points: a random subset without replacement when enough are
/// available, otherwise every point once plus random repeats.
pub fn sample_to_n(points: &[Point], n: usize, rng: &mut impl Rng) -> Result<Vec<Point>> {
    if points.is_empty() {
        return Err(Error::EmptyReference);
    }
    if points.len() >= n {
        return Ok(sample(rng, points.len(), n)
            .into_iter()
            .map(|i| points[i])
            .collect());
    }
    let mut out = points.to_vec();
    out.extend((points.len()..n).map(|_| points[rng.random_range(0..points.len())]));
    Ok(out)
}

/// Per-frame motion of a synthetic sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MotionSpec {
    /// Random forward steps up to `step_max` meters and yaw up to
    /// `rot_max_deg` degrees, with small roll and pitch.
    Random { step_max: f64, rot_max_deg: f64 },
    /// The same ego motion every frame.
    Constant(RigidTransform),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub frames: usize,
    pub points: usize,
    pub motion: MotionSpec,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Vec<Point>>,
    /// Pose of every frame in the world (first frame) coordinates.
    pub poses: Vec<RigidTransform>,
}

/// A static scene uniform in a 40 × 40 × 5 m box seen from a moving sensor.
/// Frame `k` holds the scene in sensor coordinates, `W_k⁻¹(scene)`, plus
/// Gaussian noise; `W_{k+1} = W_k ∘ M_k` for the per-frame motion `M_k`.
pub fn synth_sequence(spec: &SynthSpec) -> Result<Sequence> {
    if spec.frames < 2 {
        return Err(Error::TooFewFrames {
            needed: 2,
            got: spec.frames,
        });
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Invalid("noise must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene: Vec<Point> = (0..spec.points)
        .map(|_| {
            [
                rng.random_range(-20.0..20.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(-2.5..2.5),
            ]
        })
        .collect();
    let mut poses = vec![RigidTransform::IDENTITY];
    for _ in 1..spec.frames {
        let step = match spec.motion {
            MotionSpec::Constant(m) => m,
            MotionSpec::Random {
                step_max,
                rot_max_deg,
            } => {
                // |t| ≤ step_max and total angle ≤ 0.9 + 2·0.05 of rot_max
                let length = rng.random_range(0.5 * step_max..=step_max);
                let heading: f64 = rng.random_range(-0.1..=0.1);
                let (forward, lateral) = (length * heading.cos(), length * heading.sin());
                let yaw = rng.random_range(-0.9..=0.9) * rot_max_deg.to_radians();
                let tilt = 0.05 * rot_max_deg.to_radians();
                let (roll, pitch) = (rng.random_range(-tilt..=tilt), rng.random_range(-tilt..=tilt));
                let yaw_q = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], yaw, [forward, lateral, 0.0]);
                let tilt_q = RigidTransform::from_axis_angle([1.0, 0.0, 0.0], roll, [0.0; 3])
                    .then_after(&RigidTransform::from_axis_angle([0.0, 1.0, 0.0], pitch, [0.0; 3]));
                yaw_q.then_after(&tilt_q)
            }
        };
        let last = poses[poses.len() - 1];
        poses.push(last.then_after(&step));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Invalid(e.to_string()))?;
    let frames = poses
        .iter()
        .map(|w| {
            w.inverse()
                .apply_all(&scene)
                .into_iter()
                .map(|p| {
                    if spec.noise > 0.0 {
                        [
                            p[0] + noise.sample(&mut rng),
                            p[1] + noise.sample(&mut rng),
                            p[2] + noise.sample(&mut rng),
                        ]
                    } else {
                        p
                    }
                })
                .collect()
        })
        .collect();
    Ok(Sequence { frames, poses })
}

pub fn scan_dir(root: &Path, seq: &str) -> PathBuf {
    root.join("sequences").join(seq).join("velodyne")
}

pub fn pose_path(root: &Path, seq: &str) -> PathBuf {
    root.join("poses").join(format!("{seq}.txt"))
}

/// Writes scans and ground-truth poses in the KITTI layout.
pub fn write_sequence(root: &Path, seq: &str, sequence: &Sequence) -> Result<()> {
    let dir = scan_dir(root, seq);
    fs::create_dir_all(&dir)?;
    for (k, f) in sequence.frames.iter().enumerate() {
        write_kitti_scan(&dir.join(format!("{k:06}.bin")), f)?;
    }
    write_kitti_poses(&pose_path(root, seq), &sequence.poses)
}

/// Every `.bin` scan in `dir`, in file-name order.
pub fn read_scan_dir(dir: &Path) -> Result<Vec<Vec<Point>>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    files.iter().map(|p| read_kitti_scan(p)).collect()
}

/// Resolves a data argument: either a scan directory itself, or a root with
/// a single sequence under `sequences/`.
pub fn locate_scans(path: &Path) -> Result<(PathBuf, Option<String>)> {
    if path.join("sequences").is_dir() {
        let mut seqs: Vec<String> = fs::read_dir(path.join("sequences"))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        seqs.sort();
        return match seqs.as_slice() {
            [one] => Ok((scan_dir(path, one), Some(one.clone()))),
            _ => Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected one sequence, found {}", seqs.len()),
            }),
        };
    }
    if path.join("velodyne").is_dir() {
        return Ok((path.join("velodyne"), None));
    }
    Ok((path.to_path_buf(), None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::relative_gt;

    #[test]
    fn single_record_and_empty_scan() {
        let mut b = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(parse_kitti_scan(&b).unwrap(), vec![[1.0, 2.0, 3.0]]);
        assert!(parse_kitti_scan(&[]).unwrap().is_empty());
        assert!(parse_kitti_scan(&b[..15]).is_err());
    }

    #[test]
    fn scan_round_trip_is_bitwise() {
        let pts: Vec<Point> = (0..10).map(|i| [(i as f32 * 0.3) as f64, -1.5, 2.25]).collect();
        assert_eq!(parse_kitti_scan(&encode_kitti_scan(&pts)).unwrap(), pts);
    }

    #[test]
    fn pose_lines_parse_with_line_numbers() {
        let p = Path::new("p.txt");
        let text = "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 2 0 1 0 3 0 0 1 4\n";
        let poses = parse_kitti_poses(text, p, None).unwrap();
        assert_eq!(poses[0], RigidTransform::IDENTITY);
        assert_eq!(poses[1].t, [2.0, 3.0, 4.0]);
        let err = parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 2 3\n", p, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn pose_text_round_trip() {
        let poses = vec![
            RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 0.4, [1.0, -2.0, 0.5]),
            RigidTransform::from_axis_angle([1.0, 1.0, 0.0], -0.2, [0.1, 0.2, 0.3]),
        ];
        let back = parse_kitti_poses(&format_kitti_poses(&poses), Path::new("x"), None).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!(a.approx_eq(b, 1e-12));
        }
    }

    #[test]
    fn identity_calibration_changes_nothing() {
        let text = "1 0 0 2 0 1 0 3 0 0 1 4\n";
        let a = parse_kitti_poses(text, Path::new("x"), None).unwrap();
        let b = parse_kitti_poses(text, Path::new("x"), Some(&RigidTransform::IDENTITY)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_rules() {
        let pts: Vec<Point> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut perm = sample_to_n(&pts, 10, &mut rng).unwrap();
        perm.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(perm, pts);
        let one = sample_to_n(&pts[..1], 5, &mut rng).unwrap();
        assert_eq!(one, vec![pts[0]; 5]);
        let a = sample_to_n(&pts, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_to_n(&pts, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn still_noise_free_sequence_repeats_the_frame() {
        let seq = synth_sequence(&SynthSpec {
            frames: 3,
            points: 20,
            motion: MotionSpec::Constant(RigidTransform::IDENTITY),
            noise: 0.0,
            seed: 1,
        })
        .unwrap();
        assert!(seq.frames.iter().all(|f| *f == seq.frames[0]));
        assert!(seq.poses.iter().all(|p| *p == RigidTransform::IDENTITY));
    }

    #[test]
    fn synthetic_frames_are_consistent_with_relative_poses() {
        let step = RigidTransform::from_translation([0.4, 0.0, 0.0]);
        let seq = synth_sequence(&SynthSpec {
            frames: 4,
            points: 50,
            motion: MotionSpec::Constant(step),
            noise: 0.0,
            seed: 2,
        })
        .unwrap();
        for k in 0..3 {
            let rel = relative_gt(&seq.poses[k], &seq.poses[k + 1]);
            assert!(rel.approx_eq(&step.inverse(), 1e-12));
            for (p, q) in rel.apply_all(&seq.frames[k]).iter().zip(&seq.frames[k + 1]) {
                for i in 0..3 {
                    assert!((p[i] - q[i]).abs() < 1e-9);
                }
            }
        }

        let spec = SynthSpec {
            frames: 6,
            points: 64,
            motion: MotionSpec::Random { step_max: 0.5, rot_max_deg: 5.0 },
            noise: 0.01,
            seed: 3,
        };
        let seq = synth_sequence(&spec).unwrap();
        assert_eq!(seq, synth_sequence(&spec).unwrap());
        for k in 0..5 {
            let rel = relative_gt(&seq.poses[k], &seq.poses[k + 1]);
            assert!(rel.translation_norm() <= 0.5 + 1e-9);
            assert!(rel.rotation_angle().to_degrees() <= 5.0 + 1e-9);
            for (p, q) in rel.apply_all(&seq.frames[k]).iter().zip(&seq.frames[k + 1]) {
                let d = crate::geometry::norm3([p[0] - q[0], p[1] - q[1], p[2] - q[2]]);
                // two noisy copies: 3σ per axis on each side
                assert!(d < 6.0 * 0.01 * 3f64.sqrt());
            }
        }
        assert!(synth_sequence(&SynthSpec { frames: 1, ..spec }).is_err());
    }

    #[test]
    fn sequence_layout_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = synth_sequence(&SynthSpec {
            frames: 3,
            points: 16,
            motion: MotionSpec::Random { step_max: 0.5, rot_max_deg: 5.0 },
            noise: 0.0,
            seed: 4,
        })
        .unwrap();
        write_sequence(dir.path(), "00", &seq).unwrap();
        let (scans, name) = locate_scans(dir.path()).unwrap();
        assert_eq!(name.as_deref(), Some("00"));
        let frames = read_scan_dir(&scans).unwrap();
        assert_eq!(frames.len(), 3);
        for (a, b) in frames.iter().zip(&seq.frames) {
            for (p, q) in a.iter().zip(b) {
                for i in 0..3 {
                    assert_eq!(p[i], q[i] as f32 as f64);
                }
            }
        }
        let poses = read_kitti_poses(&pose_path(dir.path(), "00"), None).unwrap();
        assert_eq!(poses.len(), 3);
    }
}
