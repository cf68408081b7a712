//! Homothetic tube MPC with persistent-excitation constraints.

pub mod terminal;
pub mod tube;
pub mod mpc;

use thiserror::Error;

use crate::conic::ConicError;
use crate::excitation::ExcitationError;
use crate::geometry::GeometryError;
use crate::identify::IdentifyError;
use crate::plant::PlantError;

pub use mpc::{Algorithm, ControllerState, MpcProblem, MpcSettings, StepRecord, WitnessReport};
pub use terminal::{synth_terminal_cost, synth_terminal_set, TerminalIngredients, TerminalSetOptions};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("terminal set synthesis failed: {0}")]
    TerminalSynthesis(String),
    #[error("closed loop is not stable (spectral radius {0:.6})")]
    Unstable(f64),
    #[error("initial problem infeasible: {0}")]
    InitialInfeasible(String),
    #[error("recursive feasibility violated at t = {t}: {status}")]
    RecursiveFeasibility { t: usize, status: String, program: String },
    #[error("shifted candidate violates the constraints at t = {t} (residual {residual:.3e})")]
    WitnessViolation { t: usize, residual: f64 },
    #[error("solver failure at t = {t}: {status}")]
    Solver { t: usize, status: String },
    #[error(transparent)]
    Identify(#[from] IdentifyError),
    #[error(transparent)]
    Excitation(#[from] ExcitationError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

pub type Result<T> = std::result::Result<T, ControllerError>;
