//! Histogram fitting, indistinguishability of post-selected photons and the
//! window-width trade-off sweep.

pub mod fit;
pub mod indist;
pub mod tradeoff;

pub use fit::{fit_exponential, fit_gaussian, FitData, FitModel, FitOptions, FitParam, FitResult};
pub use indist::{
    indistinguishability_exact, indistinguishability_mc, optimal_delay, transmitted_fraction, DelayObjective,
    DelayOptimum, DelayRange, EmissionWeights, McEstimate,
};
pub use tradeoff::{indist_simple, tradeoff_sweep, EfficiencyChain, SweepSettings, TradeoffRow, TradeoffTable};
