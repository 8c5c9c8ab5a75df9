//! Dynamic price bounds for contingent claims in an incomplete Brownian market.
//!
//! For a bounded claim the library computes four price processes on a
//! recombining lattice, each as the solution of a backward equation with a
//! different driver:
//!
//! * lower hedging price — driver `-u_t |z|` (ball bound) or the constrained
//!   slice infimum;
//! * buyer's risk indifference price — `min over the slice of (z theta' + f)`;
//! * seller's risk indifference price — `max over the slice of (z theta' - f)`;
//! * upper hedging price — `u_t |z|` or the constrained slice supremum;
//!
//! and verifies, at every node, the chain `low <= buyer <= seller <= up`
//! together with the risk-measure axioms (normalization, translation
//! invariance, monotonicity, convexity, time consistency, locality).
//! Independent oracles (closed-form pricing, probability-tilting dynamic
//! programs, constant-scenario bounds, a brute-force min-max game) cross-check
//! the solver through distinct numerical routes.

pub mod bsde;
pub mod error;
pub mod lattice;
mod linalg;
pub mod market;
pub mod oracle;
pub mod penalty;

pub use bsde::{
    price_quadruple, restart_consistency, solve, solve_terminal_data, solve_with_slices,
    BsdeSolution, HedgingVariant, PriceQuadruple, CHAIN_TOL_SCALE,
};
pub use error::{Error, Result};
pub use lattice::{payoff, terminal_assets, BrownianLattice, Claim, ClaimKind};
pub use market::{
    emm_slice, theta_from_kernel_coord, validate_model, EmmSlice, MarketModel, ValidationReport,
};
pub use oracle::{
    black_scholes_call, constant_scenario_bound, game_value_bruteforce, norm_cdf, tilted_dp,
    GameGrid, GameValue, PriceSide,
};
pub use penalty::{eval_driver, normalized_penalty_at, penalty_slice_min, DriverKind, Penalty};
