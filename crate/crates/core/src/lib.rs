//! Simulation and analysis of the noisy grid-cell neural field.
//!
//! The model couples four orientation-tuned populations on a periodic
//! neural sheet through a shifted inhibitory kernel. Each population carries
//! a density `f(t, x, s)` over activity levels `s >= 0` that evolves by a
//! Fokker-Planck equation with no-flux boundaries in `s`.

pub mod activation;
pub mod connectivity;
pub mod error;
pub mod experiments;
pub mod fokker_planck;
pub mod homogeneous;
pub mod microscopic;
pub mod special;
pub mod stability;

pub use activation::Activation;
pub use connectivity::{Kernel, KernelParams, ShiftSet, TorusGrid};
pub use error::{GridError, Result};
pub use homogeneous::HomogeneousState;
