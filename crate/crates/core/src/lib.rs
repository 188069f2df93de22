//! Cake cutting with piecewise-constant valuations: Nash-welfare-based
//! mechanisms, fairness audits and best-response search for incentive ratios.

pub mod adversary;
pub mod audit;
pub mod cake;
pub mod error;
pub mod experiments;
pub mod instance;
pub mod mechanisms;
pub mod mnw;

pub use cake::{
    common_refinement, nash_welfare, realize, restrict_profile, scale_cake, to_share_matrix, value_of,
    Allocation, Interval, PiecewiseDensity, Placement, Profile, ShareMatrix,
};
pub use error::{CakeError, Result};
pub use mnw::{check_mnw_condition, check_weak_mnw, deserves, solve_mnw, MnwSolution};
