//! Continuous-time lidar odometry on a white-noise-on-acceleration Gaussian
//! process over SE(3), fusing point-to-plane ICP and per-point Doppler
//! range-rate factors in a sliding-window Gauss-Newton smoother.

pub mod error;
pub mod gp;
pub mod liealg;
pub mod factors;
pub mod frontend;
pub mod bench;
pub mod solver;
pub mod dataset_io;
pub mod eval;
pub mod sim;
pub mod pipeline;
