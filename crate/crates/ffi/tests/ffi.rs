use std::ffi::{c_char, CString};
use std::ptr;

use lodom::data::{synth_sequence, MotionSpec, SynthSpec};
use lodom::geometry::{relative_gt, RigidTransform};
use lodom::model::{Model, RunOptions};
use lodom::nn::checkpoint;
use lodom_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { lodom_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn flat(poses: &[RigidTransform]) -> Vec<f64> {
    poses.iter().flat_map(|p| p.to_matrix()).collect()
}

#[test]
fn null_arguments_are_reported() {
    let status = unsafe { lodom_model_new_desk(0, ptr::null_mut()) };
    assert_eq!(status, LodomStatus::NullPointer);
    assert!(last_error().contains("out"));
    let status = unsafe { lodom_model_load(ptr::null(), ptr::null_mut()) };
    assert_eq!(status, LodomStatus::NullPointer);
    unsafe { lodom_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { lodom_model_points(ptr::null()) }, 0);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { lodom_model_load(path.as_ptr(), &mut handle) };
    assert_eq!(status, LodomStatus::Io);
    assert!(handle.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn run_sequence_matches_the_library() {
    let seq = synth_sequence(&SynthSpec {
        frames: 4,
        points: 300,
        motion: MotionSpec::Random {
            step_max: 0.5,
            rot_max_deg: 5.0,
        },
        noise: 0.01,
        seed: 1,
    })
    .unwrap();
    let points: Vec<f32> = seq.frames.iter().flatten().flat_map(|p| p.map(|v| v as f32)).collect();
    let counts: Vec<usize> = seq.frames.iter().map(|f| f.len()).collect();

    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("m.ckpt");
    let mut cfg = lodom::Config::desk();
    cfg.seed = 5;
    checkpoint::save(&ckpt_path, &Model::new(cfg).unwrap().checkpoint(0)).unwrap();
    let c_path = CString::new(ckpt_path.to_str().unwrap()).unwrap();

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { lodom_model_load(c_path.as_ptr(), &mut handle) }, LodomStatus::Ok);
    assert_eq!(unsafe { lodom_model_points(handle) }, 256);

    let mut out = vec![0.0; 12 * 4];
    let status = unsafe {
        lodom_run_sequence(handle, points.as_ptr(), counts.as_ptr(), 4, 0, out.as_mut_ptr())
    };
    assert_eq!(status, LodomStatus::Ok, "{}", last_error());
    let mut uncached = vec![0.0; 12 * 4];
    let status = unsafe {
        lodom_run_sequence(handle, points.as_ptr(), counts.as_ptr(), 4, LODOM_NO_CACHE, uncached.as_mut_ptr())
    };
    assert_eq!(status, LodomStatus::Ok);
    assert_eq!(out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), uncached.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    // An untrained network returns its initialization: every world pose is
    // the identity.
    assert_eq!(&out[..12], &RigidTransform::IDENTITY.to_matrix());

    let status = unsafe { lodom_run_sequence(handle, points.as_ptr(), counts.as_ptr(), 4, 64, out.as_mut_ptr()) };
    assert_eq!(status, LodomStatus::InvalidArgument);
    unsafe { lodom_model_free(handle) };

    // Same frames through the library, resampled with the same seed.
    let model = Model::from_checkpoint(&checkpoint::load(&ckpt_path).unwrap()).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    let frames: Vec<_> = seq
        .frames
        .iter()
        .map(|f| {
            let f32s: Vec<_> = f.iter().map(|p| p.map(|v| v as f32 as f64)).collect();
            lodom::data::sample_to_n(&f32s, 256, &mut rng).unwrap()
        })
        .collect();
    let run = model.run_sequence(&frames, &RunOptions::default()).unwrap();
    assert_eq!(flat(&run.world), out);
}

#[test]
fn eval_and_relative_pose() {
    let gt: Vec<RigidTransform> = (0..10)
        .map(|k| RigidTransform::from_translation([k as f64, 0.0, 0.0]))
        .collect();
    let mut est = gt.clone();
    est[4].t[0] += 1.0;
    let mut m = LodomMetrics::default();
    let status = unsafe { lodom_eval(flat(&gt).as_ptr(), flat(&est).as_ptr(), 10, &mut m) };
    assert_eq!(status, LodomStatus::Ok);
    assert!((m.ate - 3.0 / 10.0).abs() < 1e-9);
    assert_eq!(m.kitti_valid, 0);
    assert!(m.rte.is_nan() && m.rre.is_nan());
    assert!(m.rpe_t > 0.0);

    let a = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 0.2, [1.0, 2.0, 0.0]);
    let b = RigidTransform::from_axis_angle([0.0, 1.0, 0.0], -0.1, [0.5, 0.0, 1.0]);
    let mut out = [0.0; 12];
    let status = unsafe { lodom_relative_pose(a.to_matrix().as_ptr(), b.to_matrix().as_ptr(), out.as_mut_ptr()) };
    assert_eq!(status, LodomStatus::Ok);
    let expect = relative_gt(&a, &b).to_matrix();
    assert!(out.iter().zip(expect).all(|(x, y)| (x - y).abs() < 1e-12));

    let bad = [0.0; 12];
    let status = unsafe { lodom_relative_pose(bad.as_ptr(), b.to_matrix().as_ptr(), out.as_mut_ptr()) };
    assert_eq!(status, LodomStatus::Data);
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lodom.h")).unwrap();
    for name in [
        "lodom_last_error_message",
        "lodom_model_new_desk",
        "lodom_model_load",
        "lodom_model_free",
        "lodom_run_sequence",
        "lodom_eval",
        "lodom_relative_pose",
        "typedef struct LodomModel LodomModel",
        "LODOM_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
