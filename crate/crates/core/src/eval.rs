//! Odometry metrics: KITTI subsequence errors, absolute trajectory error
//! after rigid alignment, and frame-to-frame relative pose error.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{norm3, RigidTransform};

/// Subsequence lengths in meters.
pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

fn check_lengths(gt: &[RigidTransform], est: &[RigidTransform]) -> Result<()> {
    if gt.len() != est.len() {
        return Err(Error::LengthMismatch {
            gt: gt.len(),
            est: est.len(),
        });
    }
    if gt.len() < 2 {
        return Err(Error::TooFewFrames {
            needed: 2,
            got: gt.len(),
        });
    }
    Ok(())
}

/// Cumulative path length along the ground-truth positions.
pub fn path_distances(poses: &[RigidTransform]) -> Vec<f64> {
    let mut d = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (k, p) in poses.iter().enumerate() {
        if k > 0 {
            let q = poses[k - 1].t;
            acc += norm3([p.t[0] - q[0], p.t[1] - q[1], p.t[2] - q[2]]);
        }
        d.push(acc);
    }
    d
}

/// Relative error of the motion `i → j`: `(gt_i⁻¹ gt_j)⁻¹ (est_i⁻¹ est_j)`.
fn motion_error(gt: &[RigidTransform], est: &[RigidTransform], i: usize, j: usize) -> RigidTransform {
    let g = gt[i].inverse().then_after(&gt[j]);
    let e = est[i].inverse().then_after(&est[j]);
    g.inverse().then_after(&e)
}

/// KITTI RTE (%) and RRE (deg / 100 m) as root mean squares over every start
/// frame and segment length. The segment ends at the first frame whose path
/// distance from the start reaches the length. A ground-truth path shorter
/// than the shortest segment is an error rather than a zero.
pub fn kitti_rte_rre(gt: &[RigidTransform], est: &[RigidTransform]) -> Result<(f64, f64)> {
    check_lengths(gt, est)?;
    let dist = path_distances(gt);
    let (mut st, mut sr, mut n) = (0.0, 0.0, 0usize);
    for i in 0..gt.len() {
        for &len in &SEGMENT_LENGTHS {
            let target = dist[i] + len;
            let Some(j) = (i..gt.len()).find(|&j| dist[j] >= target) else {
                continue;
            };
            let err = motion_error(gt, est, i, j);
            let t = err.translation_norm() / len * 100.0;
            let r = err.rotation_angle().to_degrees() / len * 100.0;
            st += t * t;
            sr += r * r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::PathTooShort {
            length: dist[dist.len() - 1],
            required: SEGMENT_LENGTHS[0],
        });
    }
    Ok(((st / n as f64).sqrt(), (sr / n as f64).sqrt()))
}

/// Rotation and translation (no scale) minimizing `Σ ‖gt_k − (R est_k + t)‖²`
/// over positions.
pub fn align_rigid(gt: &[[f64; 3]], est: &[[f64; 3]]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = gt.len() as f64;
    let mean = |ps: &[[f64; 3]]| {
        ps.iter()
            .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
            / n
    };
    let (mg, me) = (mean(gt), mean(est));
    let mut h = Matrix3::zeros();
    for (g, e) in gt.iter().zip(est) {
        h += (Vector3::from(*e) - me) * (Vector3::from(*g) - mg).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    let t = mg - r * me;
    (r, t)
}

/// Position RMSE after rigid alignment of `est` onto `gt`.
pub fn ate(gt: &[RigidTransform], est: &[RigidTransform]) -> Result<f64> {
    check_lengths(gt, est)?;
    let g: Vec<[f64; 3]> = gt.iter().map(|p| p.t).collect();
    let e: Vec<[f64; 3]> = est.iter().map(|p| p.t).collect();
    let (r, t) = align_rigid(&g, &e);
    let sum: f64 = g
        .iter()
        .zip(&e)
        .map(|(g, e)| (Vector3::from(*g) - (r * Vector3::from(*e) + t)).norm_squared())
        .sum();
    Ok((sum / g.len() as f64).sqrt())
}

/// Frame-to-frame relative pose error: RMSE of translation (m) and rotation
/// (degrees).
pub fn rpe(gt: &[RigidTransform], est: &[RigidTransform]) -> Result<(f64, f64)> {
    check_lengths(gt, est)?;
    let (mut st, mut sr) = (0.0, 0.0);
    let n = gt.len() - 1;
    for k in 0..n {
        let err = motion_error(gt, est, k, k + 1);
        st += err.translation_norm().powi(2);
        sr += err.rotation_angle().to_degrees().powi(2);
    }
    Ok(((st / n as f64).sqrt(), (sr / n as f64).sqrt()))
}

/// Errors of each estimated frame-to-frame motion against ground truth:
/// translation (m) and rotation (degrees) per pair.
pub fn pair_errors(gt_pairs: &[RigidTransform], est_pairs: &[RigidTransform]) -> Vec<(f64, f64)> {
    gt_pairs
        .iter()
        .zip(est_pairs)
        .map(|(g, e)| {
            let err = g.inverse().then_after(e);
            (err.translation_norm(), err.rotation_angle().to_degrees())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Rte,
    Rre,
    Ate,
    Rpe,
}

impl Metric {
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',')
            .map(|m| match m.trim().to_ascii_lowercase().as_str() {
                "rte" => Ok(Metric::Rte),
                "rre" => Ok(Metric::Rre),
                "ate" => Ok(Metric::Ate),
                "rpe" => Ok(Metric::Rpe),
                other => Err(Error::Invalid(format!("unknown metric `{other}`"))),
            })
            .collect()
    }
}

/// CSV header and row for the requested metrics. RPE contributes two
/// columns (translation, rotation). RTE/RRE cells are empty when the path is
/// too short for any segment.
pub fn csv_row(
    gt: &[RigidTransform],
    est: &[RigidTransform],
    metrics: &[Metric],
) -> Result<(String, String, Option<Error>)> {
    check_lengths(gt, est)?;
    let (mut head, mut row) = (Vec::new(), Vec::new());
    let mut note = None;
    let kitti = match kitti_rte_rre(gt, est) {
        Ok(v) => Some(v),
        Err(e @ Error::PathTooShort { .. }) => {
            note = Some(e);
            None
        }
        Err(e) => return Err(e),
    };
    for m in metrics {
        match m {
            Metric::Rte => {
                head.push("rte_pct".to_string());
                row.push(kitti.map(|v| format!("{:.6}", v.0)).unwrap_or_default());
            }
            Metric::Rre => {
                head.push("rre_deg_per_100m".to_string());
                row.push(kitti.map(|v| format!("{:.6}", v.1)).unwrap_or_default());
            }
            Metric::Ate => {
                head.push("ate_m".to_string());
                row.push(format!("{:.6}", ate(gt, est)?));
            }
            Metric::Rpe => {
                let (t, r) = rpe(gt, est)?;
                head.push("rpe_t_m".to_string());
                head.push("rpe_r_deg".to_string());
                row.push(format!("{t:.6}"));
                row.push(format!("{r:.6}"));
            }
        }
    }
    Ok((head.join(","), row.join(","), note))
}
