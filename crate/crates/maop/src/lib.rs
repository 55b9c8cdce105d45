//! Self-supervised object-centric dynamics learning on a built-in 2-D platformer.
//!
//! The crate is organized as a stack of learning levels plus the machinery
//! around them:
//!
//! - [`diffcore`] — minimal reverse-mode autodiff substrate (conv / batch norm /
//!   dense / bilinear warping / Adam) that every trainable module is built on.
//! - [`envsim`] — deterministic desk-scale platformer simulator and dataset
//!   generator (frames, actions, ground-truth object centers, rewards).
//! - [`motiondetect`] — level 1: running-average background subtraction
//!   producing coarse foreground masks.
//! - [`proposal`] — region sampling, motion-consistency discrepancy scoring and
//!   NMS instance selection shared by the two upper levels.
//! - [`instanceseg`] — level 2: instance splitter + merging net trained
//!   self-supervised to emit dynamic-instance mask proposals.
//! - [`dynamics`] — level 3: object detector, instance localization, relation /
//!   inertia effect nets, background memory, frame prediction and rollout.
//! - [`planner`] — UCT Monte Carlo tree search over a pluggable dynamics model
//!   (true simulator or the learned model).
//! - [`harness`] — configuration, dataset/checkpoint persistence, metrics and
//!   the command-line pipeline.
//!
//! See the `examples/` directory for one runnable example per capability; the
//! `objdyn` binary exposes the same functionality as subcommands.

pub mod diffcore;
pub mod dynamics;
pub mod envsim;
pub mod harness;
pub mod instanceseg;
pub mod motiondetect;
pub mod nets;
pub mod planner;
pub mod proposal;

use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration or incompatible shapes at setup time.
    Config(String),
    /// Shape mismatch detected while wiring operations together.
    Shape(String),
    /// Dataset or file contents are malformed.
    Data(String),
    /// A pipeline stage was invoked before its prerequisite ran.
    Dependency(String),
    /// A stateful component was queried before it was warmed up.
    NotReady(String),
    /// Numeric failure: divergence, zero-mass mask, missing gradient.
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Dependency(m) => write!(f, "missing prerequisite: {m}"),
            Error::NotReady(m) => write!(f, "not ready: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
