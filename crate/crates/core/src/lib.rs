//! Matrix completion bandits: an ε-greedy policy over low-rank arm-reward
//! matrices learned online by row-local gradient steps, with inverse-propensity
//! debiasing for confidence intervals on linear forms of the arm matrices.

pub mod cli;
pub mod error;
pub mod impute;
pub mod inference;
pub mod io;
pub mod learner;
mod linalg;
pub mod lowrank;
pub mod replay;
pub mod schedule;
pub mod sim;
pub mod stats;

pub use error::{Error, ErrorKind, Result};
pub use inference::{DebiasState, FormMode, InferenceContext, InferenceReport, LinearForm, LinearTerm};
pub use learner::{LearnerState, StepRecord};
pub use lowrank::{FactorPair, Mat, ThinSvd};
pub use schedule::{BanditConfig, Cell, PropensityVector};
