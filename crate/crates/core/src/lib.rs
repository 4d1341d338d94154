//! Rank-based reward design between an energy retailer and a mean field of
//! consumers.
//!
//! A retailer offers every consumer a terminal reward made of a price part
//! `-p x` and an additional bonus `B(r)` that depends only on the
//! consumer's rank `r` within their cluster (rank 1 = highest
//! consumption). Consumers control their consumption drift at quadratic
//! effort cost; the induced game admits a unique mean-field equilibrium in
//! closed form for this reward class. The crate computes those equilibria,
//! evaluates and optimizes the retailer's objective over bounded
//! piecewise-linear rewards, solves the time-dependent-cost variant on
//! finite-difference grids, and validates everything against an N-player
//! stochastic simulation.
//!
//! Everything is generic over the floating scalar through [`Real`]
//! (`f64` by default, `f32` supported); concrete `f64` aliases are at the
//! crate root.

pub mod cmaes;
pub mod error;
pub mod grids;
pub mod hjb;
pub mod mfg;
pub mod numerics;
pub mod principal;
pub mod rewards;
pub mod sim;

mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub use grids::{DensityGrid, Grid1D, QuantileGrid};
pub use mfg::{ClusterParams, EffortCost, EquilibriumResult, Grids};
pub use principal::{MarketParams, ObjectiveReport, SavingsFunction};
pub use rewards::{GeneralReward, PiecewiseReward, SearchVector};

/// Concrete `f64` aliases for the main value types.
pub type Grid1D64 = grids::Grid1D<f64>;
pub type QuantileGrid64 = grids::QuantileGrid<f64>;
pub type DensityGrid64 = grids::DensityGrid<f64>;
pub type PiecewiseReward64 = rewards::PiecewiseReward<f64>;
pub type GeneralReward64 = rewards::GeneralReward<f64>;
pub type ClusterParams64 = mfg::ClusterParams<f64>;
pub type MarketParams64 = principal::MarketParams<f64>;
pub type EquilibriumResult64 = mfg::EquilibriumResult<f64>;
pub type ObjectiveReport64 = principal::ObjectiveReport<f64>;
