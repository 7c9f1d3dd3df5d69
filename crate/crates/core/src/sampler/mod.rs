//! Gibbs sampler: FFBS for the state trajectory plus conjugate updates.

pub mod conditionals;
pub mod gibbs;
pub mod kalman;

pub use conditionals::{BetaMode, BetaPrior, InverseGamma};
pub use gibbs::{gibbs_run, run_chain, GibbsState, Hyperparameters, McmcConfig, PosteriorDraws, SamplerModel, TimeSlice};
pub use kalman::{backward_sample, kalman_filter, rts_smoother, KalmanMoments, StateTrajectory};
