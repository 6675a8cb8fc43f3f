//! Deep LiDAR odometry on point clouds: a hierarchical pose-refinement
//! network with a temporal relay between consecutive frame pairs.

pub mod bench;
pub mod config;
pub mod costvolume;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pointops;
pub mod pose;
pub mod pyramid;
pub mod refine;
pub mod temporal;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use geometry::{Point, Quaternion, RigidTransform};
