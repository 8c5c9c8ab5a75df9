//! Independent verification paths: closed-form pricing, probability-tilting
//! dynamic programs on the lattice, constant-scenario bounds, and the
//! brute-force min-max game.
//!
//! The tilting realizes a change of measure on the lattice by reweighting the
//! `2^d` branches: a scenario `theta` gives branch probability
//! `p_b = prod_i (1 + sign_i theta_i sqrt(dt)) / 2`, which matches the first
//! moment exactly (`E[dW] = theta' dt`) and stays positive while
//! `|theta_i| sqrt(dt) < 1`. This approximates the same continuous object as
//! the backward Euler driver through a different route, so agreement between
//! the two is a genuine cross-check, with a gap of order `dt`.

use crate::error::{Error, Result};
use crate::lattice::{payoff, terminal_assets, BrownianLattice, Claim};
use crate::market::{emm_slice, theta_from_kernel_coord, validate_model, EmmSlice, MarketModel};
use crate::penalty::{normalized_penalty_at, Penalty};

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Zero-rate Black-Scholes call: `s0 N(d1) - K N(d2)`.
pub fn black_scholes_call(s0: f64, strike: f64, vol: f64, t: f64) -> f64 {
    let sq = vol * t.sqrt();
    let d1 = ((s0 / strike).ln() + 0.5 * vol * vol * t) / sq;
    let d2 = d1 - sq;
    s0 * norm_cdf(d1) - strike * norm_cdf(d2)
}

/// Whose side the scenario optimization takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriceSide {
    /// Maximize `E_theta[V] - penalty`.
    Seller,
    /// Minimize `E_theta[V] + penalty`.
    Buyer,
}

/// Steps cap for the tilted dynamic program in dimension >= 2.
const TILTED_MAX_STEPS_MULTI_D: usize = 24;

/// Branch probabilities under a scenario tilt; errors when any factor
/// leaves `(0, 1)`.
fn branch_probs(lattice: &BrownianLattice, theta: &[f64]) -> Result<Vec<f64>> {
    let d = lattice.dimension;
    let h = lattice.sqrt_dt();
    for &ti in theta {
        if ti.abs() * h >= 1.0 {
            return Err(Error::TiltOutOfRange { value: ti.abs() * h });
        }
    }
    let nb = lattice.branch_count();
    let mut probs = Vec::with_capacity(nb);
    for b in 0..nb {
        let mut p = 1.0;
        for (i, &ti) in theta.iter().enumerate().take(d) {
            p *= 0.5 * (1.0 + lattice.branch_sign(b, i) * ti * h);
        }
        probs.push(p);
    }
    Ok(probs)
}

/// Per-step scenario grid over the kernel ball: `s_points` equispaced values
/// on `[-r, r]`, or the single empty coordinate when the kernel is trivial.
fn kernel_grid(slice: &EmmSlice, s_points: usize) -> Result<Vec<Vec<f64>>> {
    match slice.kernel_dim() {
        0 => Ok(vec![vec![]]),
        1 => {
            if s_points < 1 {
                return Err(Error::Invalid("scenario grid needs at least one point".into()));
            }
            Ok(symmetric_grid(s_points, slice.radius).into_iter().map(|s| vec![s]).collect())
        }
        dim => Err(Error::OracleTooLarge(format!(
            "scenario grids support kernel dimension <= 1, got {dim}"
        ))),
    }
}

/// `points` values equispaced on `[-half, half]`, symmetric about an exact
/// zero when `points` is odd.
fn symmetric_grid(points: usize, half: f64) -> Vec<f64> {
    if points == 1 {
        return vec![0.0];
    }
    let denom = (points - 1) as f64;
    (0..points)
        .map(|i| half * ((2 * i) as f64 - denom) / denom)
        .collect()
}

struct TiltedScenario {
    probs: Vec<f64>,
    penalty_dt: f64,
}

fn scenario_table(
    model: &MarketModel,
    lattice: &BrownianLattice,
    penalty: &Penalty,
    step: usize,
    s_points: usize,
) -> Result<Vec<TiltedScenario>> {
    let slice = emm_slice(model, step)?;
    let t = step as f64 * lattice.dt;
    let grid = kernel_grid(&slice, s_points)?;
    let mut out = Vec::with_capacity(grid.len());
    for s in &grid {
        let theta = theta_from_kernel_coord(&slice, s)?;
        let probs = branch_probs(lattice, &theta)?;
        let pen = normalized_penalty_at(penalty, &slice, t, s)?;
        out.push(TiltedScenario { probs, penalty_dt: pen * lattice.dt });
    }
    Ok(out)
}

fn oracle_guards(model: &MarketModel, lattice: &BrownianLattice) -> Result<()> {
    let report = validate_model(model);
    if !report.is_ok() {
        return Err(Error::InvalidModel(report.to_string()));
    }
    if model.d >= 2 && lattice.steps > TILTED_MAX_STEPS_MULTI_D {
        return Err(Error::OracleTooLarge(format!(
            "tilted oracle supports at most {TILTED_MAX_STEPS_MULTI_D} steps for d >= 2, got {}",
            lattice.steps
        )));
    }
    Ok(())
}

/// Value at the root of the tilted dynamic program: per node the scenario
/// grid is optimized (max for seller, min for buyer) over
/// `sum_b p_b(theta(s)) V_child -/+ penalty(s) dt`.
pub fn tilted_dp(
    model: &MarketModel,
    lattice: &BrownianLattice,
    claim: &Claim,
    penalty: &Penalty,
    side: PriceSide,
    s_points: usize,
) -> Result<f64> {
    oracle_guards(model, lattice)?;
    let mut v = terminal_slice_values(model, lattice, claim)?;
    for m in (0..lattice.steps).rev() {
        let scenarios = scenario_table(model, lattice, penalty, m, s_points)?;
        v = tilted_step(lattice, m, &v, &scenarios, side, None);
    }
    Ok(v[0])
}

fn terminal_slice_values(
    model: &MarketModel,
    lattice: &BrownianLattice,
    claim: &Claim,
) -> Result<Vec<f64>> {
    let n_terminal = lattice.slice_len(lattice.steps);
    let mut values = Vec::with_capacity(n_terminal);
    for idx in 0..n_terminal {
        let j = lattice.decode(lattice.steps, idx);
        let k = lattice.node_coords(lattice.steps, &j);
        let s = terminal_assets(model, lattice, &k)?;
        values.push(payoff(claim, &s)?);
    }
    Ok(values)
}

/// One backward tilted step; `fixed` restricts the per-node optimization to a
/// single scenario index (used by the constant-scenario bound).
fn tilted_step(
    lattice: &BrownianLattice,
    m: usize,
    next: &[f64],
    scenarios: &[TiltedScenario],
    side: PriceSide,
    fixed: Option<usize>,
) -> Vec<f64> {
    let len = lattice.slice_len(m);
    let nb = lattice.branch_count();
    let mut out = Vec::with_capacity(len);
    let mut children = vec![0.0f64; nb];
    for idx in 0..len {
        let j = lattice.decode(m, idx);
        for (b, cv) in children.iter_mut().enumerate() {
            *cv = next[lattice.child_index(m, &j, b)];
        }
        let candidates = |sc: &TiltedScenario| -> f64 {
            let ev: f64 = sc.probs.iter().zip(&children).map(|(p, v)| p * v).sum();
            match side {
                PriceSide::Seller => ev - sc.penalty_dt,
                PriceSide::Buyer => ev + sc.penalty_dt,
            }
        };
        let value = match fixed {
            Some(i) => candidates(&scenarios[i]),
            None => {
                let mut best = candidates(&scenarios[0]);
                for sc in &scenarios[1..] {
                    let c = candidates(sc);
                    best = match side {
                        PriceSide::Seller => best.max(c),
                        PriceSide::Buyer => best.min(c),
                    };
                }
                best
            }
        };
        out.push(value);
    }
    out
}

/// Bound from scenarios held constant in time: optimize the tilted
/// expectation over a single grid coordinate reused at every step.
///
/// Constants are a subset of the adapted scenarios, so the seller-mode result
/// never exceeds the tilted dynamic program's value.
pub fn constant_scenario_bound(
    model: &MarketModel,
    lattice: &BrownianLattice,
    claim: &Claim,
    penalty: &Penalty,
    side: PriceSide,
    s_points: usize,
) -> Result<f64> {
    oracle_guards(model, lattice)?;
    let terminal = terminal_slice_values(model, lattice, claim)?;
    let tables: Vec<Vec<TiltedScenario>> = (0..lattice.steps)
        .map(|m| scenario_table(model, lattice, penalty, m, s_points))
        .collect::<Result<_>>()?;
    let n_scenarios = tables[0].len();
    if tables.iter().any(|t| t.len() != n_scenarios) {
        return Err(Error::Invalid(
            "constant-scenario bound needs the same grid size at every step".into(),
        ));
    }
    let mut best: Option<f64> = None;
    for i in 0..n_scenarios {
        let mut v = terminal.clone();
        for m in (0..lattice.steps).rev() {
            v = tilted_step(lattice, m, &v, &tables[m], side, Some(i));
        }
        best = Some(match (best, side) {
            (None, _) => v[0],
            (Some(b), PriceSide::Seller) => b.max(v[0]),
            (Some(b), PriceSide::Buyer) => b.min(v[0]),
        });
    }
    best.ok_or_else(|| Error::Invalid("empty scenario grid".into()))
}

/// Strategy grids for the brute-force min-max game.
#[derive(Debug, Clone)]
pub struct GameGrid {
    /// Portfolio choices per step, each of length `n`, within `[-k, k]^n`.
    pub pi_values: Vec<Vec<f64>>,
    /// Kernel-coordinate choices per step, each of length `d - n`.
    pub s_values: Vec<Vec<f64>>,
    /// Force the pairwise enumeration even when the portfolio influence
    /// bound would justify the fast path.
    pub force_full_enumeration: bool,
}

/// Hard budget on `steps * (grid size)^steps` per strategy grid.
pub const GAME_BUDGET: u64 = 10_000_000;

/// Pair count below which the game always runs the full pairwise enumeration.
const FULL_ENUM_MAX_PAIRS: u64 = 2_000_000;

impl GameGrid {
    /// Uniform grids for one risky asset; `kernel_dim` must be 0 (complete
    /// market, single scenario) or 1.
    pub fn uniform(
        pi_points: usize,
        k_bound: f64,
        s_points: usize,
        radius: f64,
        kernel_dim: usize,
    ) -> Result<Self> {
        if pi_points < 1 || s_points < 1 {
            return Err(Error::Invalid("game grids must be non-empty".into()));
        }
        let s_values = match kernel_dim {
            0 => vec![vec![]],
            1 => symmetric_grid(s_points, radius).into_iter().map(|s| vec![s]).collect(),
            dim => {
                return Err(Error::OracleTooLarge(format!(
                    "game scenario grids support kernel dimension <= 1, got {dim}"
                )))
            }
        };
        Ok(GameGrid {
            pi_values: symmetric_grid(pi_points, k_bound).into_iter().map(|p| vec![p]).collect(),
            s_values,
            force_full_enumeration: false,
        })
    }

    fn check_budget(&self, steps: usize) -> Result<()> {
        for len in [self.pi_values.len(), self.s_values.len()] {
            let strategies = (len as u64).checked_pow(steps as u32);
            let total = strategies.and_then(|s| s.checked_mul(steps as u64));
            match total {
                Some(t) if t <= GAME_BUDGET => {}
                _ => {
                    return Err(Error::BudgetExceeded {
                        required: total.unwrap_or(u64::MAX),
                        budget: GAME_BUDGET,
                    })
                }
            }
        }
        Ok(())
    }
}

/// Result of the brute-force game evaluation.
#[derive(Debug, Clone)]
pub struct GameValue {
    /// `min` over portfolio strategies of `max` over scenario strategies of `J_0`.
    pub value: f64,
    /// Rigorous bound on how much any portfolio strategy can move `J`:
    /// `max|pi| * sum_m max_s |mu + sigma theta(s)'| dt`. Scenarios on the
    /// martingale slice make this vanish up to rounding, which is exactly why
    /// the game collapses to a single control problem over scenarios.
    pub pi_influence_bound: f64,
    /// Number of `(pi, theta)` strategy pairs evaluated.
    pub pairs_evaluated: u64,
    /// Whether the pairwise enumeration ran (as opposed to the provably
    /// equivalent scenario-only scan).
    pub full_enumeration: bool,
}

/// Brute-force value of the zero-sum game
/// `J_0(pi, theta) = E_theta[ xi - X_x(T) - sum_m penalty dt ]`
/// over open-loop strategy grids, with the wealth integrated stepwise
/// (`X` is linear in the increments, so its tilted expectation telescopes:
/// `E_theta[X_T] = x + sum_m pi_m (mu_m + sigma_m theta_m') dt`).
pub fn game_value_bruteforce(
    model: &MarketModel,
    grid: &GameGrid,
    lattice: &BrownianLattice,
    claim: &Claim,
    penalty: &Penalty,
    initial_wealth: f64,
) -> Result<GameValue> {
    oracle_guards(model, lattice)?;
    if lattice.steps > 3 {
        return Err(Error::OracleTooLarge(format!(
            "brute-force game supports at most 3 steps, got {}",
            lattice.steps
        )));
    }
    grid.check_budget(lattice.steps)?;
    let steps = lattice.steps;
    let dt = lattice.dt;

    // per-step geometry + per-scenario tilt data
    let slices: Vec<EmmSlice> = (0..steps).map(|m| emm_slice(model, m)).collect::<Result<_>>()?;
    for s in &grid.s_values {
        for (m, slice) in slices.iter().enumerate() {
            if s.len() != slice.kernel_dim() {
                return Err(Error::Invalid(format!(
                    "scenario grid coordinate length {} does not match kernel dimension {} at step {m}",
                    s.len(),
                    slice.kernel_dim()
                )));
            }
        }
    }
    struct StepScenario {
        probs: Vec<f64>,
        penalty_dt: f64,
        /// martingale-constraint residual `mu + sigma theta'` (length n)
        residual: Vec<f64>,
    }
    let mut tables: Vec<Vec<StepScenario>> = Vec::with_capacity(steps);
    for (m, slice) in slices.iter().enumerate() {
        let t = m as f64 * dt;
        let mut row = Vec::with_capacity(grid.s_values.len());
        for s in &grid.s_values {
            let theta = theta_from_kernel_coord(slice, s)?;
            let probs = branch_probs(lattice, &theta)?;
            let pen = normalized_penalty_at(penalty, slice, t, s)?;
            let sigma = &model.sigma[m];
            let residual: Vec<f64> = (0..model.n)
                .map(|i| {
                    model.mu[m][i]
                        + (0..model.d).map(|jj| sigma[i * model.d + jj] * theta[jj]).sum::<f64>()
                })
                .collect();
            row.push(StepScenario { probs, penalty_dt: pen * dt, residual });
        }
        tables.push(row);
    }

    let xi = terminal_slice_values(model, lattice, claim)?;
    let n_s = grid.s_values.len();
    let s_strategies = (n_s as u64).pow(steps as u32);

    // A(s-strategy) = E_tilt[xi] - sum penalties, by depth-first distribution
    // propagation so strategy prefixes share work; the strategy index is
    // base-n_s with the step-0 digit most significant
    let mut a_values = vec![0.0f64; s_strategies as usize];
    fn dfs(
        lattice: &BrownianLattice,
        tables: &[Vec<StepScenario>],
        xi: &[f64],
        m: usize,
        dist: &[f64],
        pen_acc: f64,
        index: usize,
        out: &mut [f64],
    ) {
        let steps = tables.len();
        if m == steps {
            let ev: f64 = dist.iter().zip(xi).map(|(p, v)| p * v).sum();
            out[index] = ev - pen_acc;
            return;
        }
        let n_s = tables[m].len();
        let next_len = lattice.slice_len(m + 1);
        for (si, sc) in tables[m].iter().enumerate() {
            let mut next = vec![0.0f64; next_len];
            for (idx, &p) in dist.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let j = lattice.decode(m, idx);
                for (b, &pb) in sc.probs.iter().enumerate() {
                    next[lattice.child_index(m, &j, b)] += p * pb;
                }
            }
            dfs(lattice, tables, xi, m + 1, &next, pen_acc + sc.penalty_dt, index * n_s + si, out);
        }
    }
    dfs(lattice, &tables, &xi, 0, &[1.0], 0.0, 0, &mut a_values);

    // rigorous bound on the portfolio influence: |sum_m pi_m residual dt|
    let k_max = grid
        .pi_values
        .iter()
        .flat_map(|p| p.iter().map(|x| x.abs()))
        .fold(0.0f64, f64::max);
    let residual_sum: f64 = tables
        .iter()
        .map(|row| {
            row.iter()
                .map(|sc| sc.residual.iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0f64, f64::max)
        })
        .sum();
    let pi_influence_bound = k_max * residual_sum * dt;

    let max_a = a_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n_pi = grid.pi_values.len();
    let pi_strategies = (n_pi as u64).pow(steps as u32);
    let pairs = pi_strategies.saturating_mul(s_strategies);

    let negligible = pi_influence_bound <= 1e-12 * (1.0 + max_a.abs());
    if pairs <= FULL_ENUM_MAX_PAIRS || grid.force_full_enumeration {
        // full min-max over both strategy grids
        let mut best_pi = f64::INFINITY;
        for p_idx in 0..pi_strategies {
            let mut rem = p_idx;
            let mut pi_choice = Vec::with_capacity(steps);
            for _ in 0..steps {
                pi_choice.push((rem % n_pi as u64) as usize);
                rem /= n_pi as u64;
            }
            let mut worst = f64::NEG_INFINITY;
            for s_idx in 0..s_strategies {
                let mut wealth_drift = 0.0;
                let mut srem = s_idx as usize;
                for m in 0..steps {
                    let pow = n_s.pow((steps - 1 - m) as u32);
                    let digit = srem / pow;
                    srem %= pow;
                    let sc = &tables[m][digit];
                    let pi_m = &grid.pi_values[pi_choice[m]];
                    wealth_drift +=
                        pi_m.iter().zip(&sc.residual).map(|(p, c)| p * c).sum::<f64>() * dt;
                }
                let j = a_values[s_idx as usize] - initial_wealth - wealth_drift;
                worst = worst.max(j);
            }
            best_pi = best_pi.min(worst);
        }
        Ok(GameValue {
            value: best_pi,
            pi_influence_bound,
            pairs_evaluated: pairs,
            full_enumeration: true,
        })
    } else if negligible {
        // every portfolio strategy yields the same inner maximum to within
        // the influence bound, so one scenario scan suffices
        Ok(GameValue {
            value: max_a - initial_wealth,
            pi_influence_bound,
            pairs_evaluated: s_strategies,
            full_enumeration: false,
        })
    } else {
        Err(Error::BudgetExceeded { required: pairs, budget: FULL_ENUM_MAX_PAIRS })
    }
}
