//! Robust adaptive tube MPC with persistent-excitation constraints.

// Links the system OpenBLAS used by the SDP backend.
use openblas_src as _;

pub mod conic;
pub mod controller;
pub mod excitation;
pub mod geometry;
pub mod harness;
pub mod identify;
pub mod parallel;
pub mod plant;
