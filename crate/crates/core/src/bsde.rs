//! Backward solver on the lattice: explicit Euler for `(Y, Z)` pairs.
//!
//! The value recursion at slice `m` with children `v` over the `2^d` branches:
//!
//! ```text
//! Z_m(k) = E[ v * dW' ] / dt          (equal-weight branch sum)
//! Y_m(k) = E[ v ] + g(t_m, Z_m(k)) dt
//! ```
//!
//! Drivers depend on `z` only, so the step is non-iterative. Each child value
//! enters `Y_m` with coefficient `2^{-d} (1 + <grad g, dW>)`; the solver
//! enforces `u_max sqrt(d dt) < 1` so these coefficients stay positive and the
//! step map is monotone in the child values. Monotonicity makes the discrete
//! comparison theorem exact: pointwise driver dominance plus terminal
//! dominance imply nodewise value dominance, which is what the price-chain
//! checks rely on.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{payoff, terminal_assets, BrownianLattice, Claim};
use crate::market::{emm_slice, validate_model, EmmSlice, MarketModel};
use crate::penalty::{eval_driver, DriverKind, Penalty};

/// Largest supported Brownian dimension (branch count `2^d`).
pub const MAX_DIMENSION: usize = 6;

/// Relative scale of the nodewise chain tolerance: absorbs floating-point
/// accumulation only; violations beyond it indicate a bug, not discretization.
pub const CHAIN_TOL_SCALE: f64 = 1e-9;

/// Nodes per slice above which a slice is processed by the worker pool.
const PAR_THRESHOLD: usize = 4096;

/// Solution `(Y, Z)` on the lattice for one driver.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// Driver the solution was produced with.
    pub driver: DriverKind,
    pub steps: usize,
    pub dt: f64,
    pub dimension: usize,
    /// `y[m]` holds the value at every node of slice `m` (`(m+1)^d` entries).
    pub y: Vec<Vec<f64>>,
    /// `z[m]` holds the `1 x d` gradient surrogate per node, flattened row-major.
    pub z: Vec<Vec<f64>>,
}

impl BsdeSolution {
    /// Value at the root node (time zero).
    pub fn y0(&self) -> f64 {
        self.y[0][0]
    }

    /// Gradient surrogate at slice `m`, node `idx`.
    pub fn z_at(&self, m: usize, idx: usize) -> &[f64] {
        &self.z[m][idx * self.dimension..(idx + 1) * self.dimension]
    }
}

/// Which pair of bound drivers the price quadruple uses for its outer legs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HedgingVariant {
    /// Constrained bounds over the martingale slice (the default).
    ConstrainedM,
    /// Bounds over the full scenario ball `|theta| <= u`.
    BallCW,
}

/// The four price processes on one lattice.
#[derive(Debug, Clone)]
pub struct PriceQuadruple {
    pub low: BsdeSolution,
    pub buyer: BsdeSolution,
    pub seller: BsdeSolution,
    pub up: BsdeSolution,
    pub variant: HedgingVariant,
}

impl PriceQuadruple {
    /// Time-zero prices in chain order `(low, buyer, seller, up)`.
    pub fn t0(&self) -> [f64; 4] {
        [self.low.y0(), self.buyer.y0(), self.seller.y0(), self.up.y0()]
    }

    /// Count nodes where `low <= buyer <= seller <= up` fails beyond the
    /// floating-point chain tolerance `1e-9 (1 + |Y|)`.
    pub fn chain_violations(&self) -> usize {
        let mut violations = 0;
        for m in 0..=self.low.steps {
            let (l, b, s, u) = (&self.low.y[m], &self.buyer.y[m], &self.seller.y[m], &self.up.y[m]);
            for i in 0..l.len() {
                for (a, c) in [(l[i], b[i]), (b[i], s[i]), (s[i], u[i])] {
                    let tol = CHAIN_TOL_SCALE * (1.0 + a.abs().max(c.abs()));
                    if a > c + tol {
                        violations += 1;
                    }
                }
            }
        }
        violations
    }
}

fn check_inputs(model: &MarketModel, lattice: &BrownianLattice) -> Result<()> {
    let report = validate_model(model);
    if !report.is_ok() {
        return Err(Error::InvalidModel(report.to_string()));
    }
    if lattice.steps != model.steps || lattice.dimension != model.d {
        return Err(Error::Invalid(format!(
            "lattice ({} steps, d={}) does not match model ({} steps, d={})",
            lattice.steps, lattice.dimension, model.steps, model.d
        )));
    }
    if (lattice.dt - model.dt()).abs() > 1e-12 * model.dt() {
        return Err(Error::Invalid("lattice dt does not match model dt".to_string()));
    }
    if model.d > MAX_DIMENSION {
        return Err(Error::Invalid(format!(
            "dimension {} exceeds the supported maximum {MAX_DIMENSION}",
            model.d
        )));
    }
    // monotonicity of the explicit step
    let guard = model.u_max() * (model.d as f64 * lattice.dt).sqrt();
    if guard >= 1.0 {
        return Err(Error::RefineDt { value: guard });
    }
    Ok(())
}

fn terminal_values(model: &MarketModel, lattice: &BrownianLattice, claim: &Claim) -> Result<Vec<f64>> {
    if !claim.is_bounded() {
        log::warn!(
            "claim payoff is unbounded; the pricing theory assumes bounded claims \
             (every payoff is finite on the lattice, but consider setting a cap)"
        );
    }
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

/// One backward step from the child slice at `m + 1` to slice `m`.
fn step_back(
    lattice: &BrownianLattice,
    kind: &DriverKind,
    slice_geo: &EmmSlice,
    t: f64,
    m: usize,
    next: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = lattice.dimension;
    let nb = lattice.branch_count();
    let h = lattice.sqrt_dt();
    let dt = lattice.dt;
    let len = lattice.slice_len(m);
    let inv_nb = 1.0 / nb as f64;
    let z_scale = 1.0 / (nb as f64 * h);

    let node = |idx: usize| -> Result<(f64, [f64; MAX_DIMENSION])> {
        let mut j = [0usize; MAX_DIMENSION];
        let mut rem = idx;
        for jj in j.iter_mut().take(d) {
            *jj = rem % (m + 1);
            rem /= m + 1;
        }
        let mut mean = 0.0;
        let mut zbuf = [0.0f64; MAX_DIMENSION];
        for b in 0..nb {
            let ci = lattice.child_index(m, &j[..d], b);
            let v = next[ci];
            mean += v;
            for (i, zi) in zbuf.iter_mut().enumerate().take(d) {
                *zi += v * lattice.branch_sign(b, i);
            }
        }
        mean *= inv_nb;
        for zi in zbuf.iter_mut().take(d) {
            *zi *= z_scale;
        }
        let g = eval_driver(kind, slice_geo, t, &zbuf[..d])?;
        Ok((mean + g * dt, zbuf))
    };

    let rows: Vec<(f64, [f64; MAX_DIMENSION])> = if len >= PAR_THRESHOLD {
        (0..len).into_par_iter().map(node).collect::<Result<_>>()?
    } else {
        (0..len).map(node).collect::<Result<_>>()?
    };

    let mut y = Vec::with_capacity(len);
    let mut z = Vec::with_capacity(len * d);
    for (yv, zrow) in rows {
        y.push(yv);
        z.extend_from_slice(&zrow[..d]);
    }
    Ok((y, z))
}

fn backward(
    model: &MarketModel,
    lattice: &BrownianLattice,
    kind: &DriverKind,
    terminal: Vec<f64>,
    top_slice: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if terminal.len() != lattice.slice_len(top_slice) {
        return Err(Error::Invalid(format!(
            "terminal data has {} entries, slice {top_slice} needs {}",
            terminal.len(),
            lattice.slice_len(top_slice)
        )));
    }
    let mut y_slices = vec![Vec::new(); top_slice + 1];
    let mut z_slices = vec![Vec::new(); top_slice];
    y_slices[top_slice] = terminal;
    for m in (0..top_slice).rev() {
        let geo = emm_slice(model, m)?;
        let t = m as f64 * lattice.dt;
        let next = std::mem::take(&mut y_slices[m + 1]);
        let (y, z) = step_back(lattice, kind, &geo, t, m, &next)?;
        y_slices[m + 1] = next;
        y_slices[m] = y;
        z_slices[m] = z;
    }
    Ok((y_slices, z_slices))
}

/// Solve the backward equation for a claim under one driver.
pub fn solve(
    model: &MarketModel,
    lattice: &BrownianLattice,
    claim: &Claim,
    kind: &DriverKind,
) -> Result<BsdeSolution> {
    check_inputs(model, lattice)?;
    let terminal = terminal_values(model, lattice, claim)?;
    let (y, z) = backward(model, lattice, kind, terminal, lattice.steps)?;
    Ok(BsdeSolution {
        driver: kind.clone(),
        steps: lattice.steps,
        dt: lattice.dt,
        dimension: lattice.dimension,
        y,
        z,
    })
}

/// Solve with terminal data given directly on a slice (no claim evaluation).
pub fn solve_terminal_data(
    model: &MarketModel,
    lattice: &BrownianLattice,
    terminal: Vec<f64>,
    kind: &DriverKind,
) -> Result<BsdeSolution> {
    check_inputs(model, lattice)?;
    let (y, z) = backward(model, lattice, kind, terminal, lattice.steps)?;
    Ok(BsdeSolution {
        driver: kind.clone(),
        steps: lattice.steps,
        dt: lattice.dt,
        dimension: lattice.dimension,
        y,
        z,
    })
}

/// Solve with caller-supplied scenario geometry per step instead of the
/// model's own slices (custom scenario sets, e.g. the full ball).
pub fn solve_with_slices(
    model: &MarketModel,
    lattice: &BrownianLattice,
    claim: &Claim,
    kind: &DriverKind,
    slices: &[EmmSlice],
) -> Result<BsdeSolution> {
    check_inputs(model, lattice)?;
    if slices.len() != lattice.steps {
        return Err(Error::Invalid(format!(
            "need one scenario slice per step: got {}, expected {}",
            slices.len(),
            lattice.steps
        )));
    }
    let terminal = terminal_values(model, lattice, claim)?;
    let mut y_slices = vec![Vec::new(); lattice.steps + 1];
    let mut z_slices = vec![Vec::new(); lattice.steps];
    y_slices[lattice.steps] = terminal;
    for m in (0..lattice.steps).rev() {
        let t = m as f64 * lattice.dt;
        let next = std::mem::take(&mut y_slices[m + 1]);
        let (y, z) = step_back(lattice, kind, &slices[m], t, m, &next)?;
        y_slices[m + 1] = next;
        y_slices[m] = y;
        z_slices[m] = z;
    }
    Ok(BsdeSolution {
        driver: kind.clone(),
        steps: lattice.steps,
        dt: lattice.dt,
        dimension: lattice.dimension,
        y: y_slices,
        z: z_slices,
    })
}

/// Compute all four price processes on one lattice.
///
/// Seller and buyer use the given penalty; the outer legs use the constrained
/// bounds by default or the ball bounds under [`HedgingVariant::BallCW`].
pub fn price_quadruple(
    model: &MarketModel,
    lattice: &BrownianLattice,
    claim: &Claim,
    penalty: &Penalty,
    variant: HedgingVariant,
) -> Result<PriceQuadruple> {
    let (low_kind, up_kind) = match variant {
        HedgingVariant::ConstrainedM => (DriverKind::LowerM, DriverKind::UpperM),
        HedgingVariant::BallCW => (DriverKind::LowerCW, DriverKind::UpperCW),
    };
    Ok(PriceQuadruple {
        low: solve(model, lattice, claim, &low_kind)?,
        buyer: solve(model, lattice, claim, &DriverKind::Buyer(penalty.clone()))?,
        seller: solve(model, lattice, claim, &DriverKind::Seller(penalty.clone()))?,
        up: solve(model, lattice, claim, &up_kind)?,
        variant,
    })
}

/// Time-consistency check: re-solve on `[0, split]` using the original
/// solution's slice values as terminal data and return the largest nodewise
/// absolute difference (the backward recursion is a dynamic program, so the
/// restart reproduces the original values exactly).
pub fn restart_consistency(
    model: &MarketModel,
    lattice: &BrownianLattice,
    solution: &BsdeSolution,
    split_step: usize,
) -> Result<f64> {
    if split_step == 0 || split_step >= solution.steps {
        return Err(Error::Invalid(format!(
            "split step must satisfy 0 < split < {}, got {split_step}",
            solution.steps
        )));
    }
    let terminal = solution.y[split_step].clone();
    let (y, _z) = backward(model, lattice, &solution.driver, terminal, split_step)?;
    let mut max_err = 0.0f64;
    for m in 0..=split_step {
        for (a, b) in y[m].iter().zip(&solution.y[m]) {
            max_err = max_err.max((a - b).abs());
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::ClaimKind;

    fn complete_model(steps: usize) -> MarketModel {
        MarketModel::constant(1, 1, vec![0.05], vec![0.2], 0.3, vec![100.0], 1.0, steps).unwrap()
    }

    fn incomplete_model(steps: usize) -> MarketModel {
        MarketModel::constant(1, 2, vec![0.05], vec![0.2, 0.1], 0.5, vec![100.0], 1.0, steps).unwrap()
    }

    #[test]
    fn zero_claim_solves_to_exact_zero() {
        let model = incomplete_model(8);
        let lat = BrownianLattice::for_model(&model);
        let claim = Claim::custom(|_| 0.0);
        for kind in [
            DriverKind::BlackScholes,
            DriverKind::UpperCW,
            DriverKind::LowerM,
            DriverKind::Seller(Penalty::quadratic(1.0).unwrap()),
            DriverKind::Buyer(Penalty::quadratic(1.0).unwrap()),
        ] {
            let sol = solve(&model, &lat, &claim, &kind).unwrap();
            assert!(sol.y.iter().all(|ys| ys.iter().all(|&v| v == 0.0)));
            assert!(sol.z.iter().all(|zs| zs.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn constant_claim_under_zero_drift_stays_constant() {
        let model =
            MarketModel::constant(1, 1, vec![0.0], vec![0.2], 0.3, vec![100.0], 1.0, 6).unwrap();
        let lat = BrownianLattice::for_model(&model);
        let claim = Claim::custom(|_| 2.5);
        let sol = solve(&model, &lat, &claim, &DriverKind::BlackScholes).unwrap();
        assert!(sol.y.iter().all(|ys| ys.iter().all(|&v| v == 2.5)));
        assert!(sol.z.iter().all(|zs| zs.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn terminal_slice_equals_payoff_exactly() {
        let model = complete_model(16);
        let lat = BrownianLattice::for_model(&model);
        let claim = Claim::call(100.0);
        let sol = solve(&model, &lat, &claim, &DriverKind::BlackScholes).unwrap();
        for idx in 0..lat.slice_len(16) {
            let j = lat.decode(16, idx);
            let k = lat.node_coords(16, &j);
            let s = terminal_assets(&model, &lat, &k).unwrap();
            assert_eq!(sol.y[16][idx], payoff(&claim, &s).unwrap());
        }
    }

    #[test]
    fn call_price_close_to_closed_form() {
        // closed form 7.9656 at s0=K=100, vol=0.2, T=1, zero rate
        let model = complete_model(200);
        let lat = BrownianLattice::for_model(&model);
        let sol = solve(&model, &lat, &Claim::call(100.0), &DriverKind::BlackScholes).unwrap();
        let reference = 7.965567455405804;
        assert!(
            (sol.y0() - reference).abs() / reference < 0.01,
            "Y0 = {}",
            sol.y0()
        );
    }

    #[test]
    fn monotonicity_guard_rejects_coarse_grids() {
        // u sqrt(d dt) = 0.9 * sqrt(2 * 0.5) = 0.9 >= ... pick u so the guard trips
        let model = MarketModel::constant(
            1,
            2,
            vec![0.0],
            vec![0.2, 0.1],
            1.1,
            vec![100.0],
            1.0,
            2,
        )
        .unwrap();
        let lat = BrownianLattice::for_model(&model);
        let err = solve(&model, &lat, &Claim::call(100.0), &DriverKind::UpperCW);
        assert!(matches!(err, Err(Error::RefineDt { .. })));
    }

    #[test]
    fn seller_zero_on_full_ball_matches_cw_bound() {
        // with the slice replaced by the full ball (zero drift), the
        // constrained sup equals u |z| and the two solves coincide nodewise
        let model =
            MarketModel::constant(1, 2, vec![0.0], vec![0.2, 0.1], 0.4, vec![100.0], 1.0, 6)
                .unwrap();
        let lat = BrownianLattice::for_model(&model);
        let ball = EmmSlice {
            theta_bar: vec![0.0, 0.0],
            kernel: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            radius: 0.4,
            u: 0.4,
        };
        let slices = vec![ball; 6];
        let claim = Claim::call(100.0);
        let cw = solve(&model, &lat, &claim, &DriverKind::UpperCW).unwrap();
        let seller =
            solve_with_slices(&model, &lat, &claim, &DriverKind::Seller(Penalty::Zero), &slices)
                .unwrap();
        for m in 0..=6 {
            for (a, b) in cw.y[m].iter().zip(&seller.y[m]) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn restart_matches_original_exactly() {
        let model = incomplete_model(10);
        let lat = BrownianLattice::for_model(&model);
        let claim = Claim::call(100.0);
        let sol = solve(
            &model,
            &lat,
            &claim,
            &DriverKind::Seller(Penalty::quadratic(1.0).unwrap()),
        )
        .unwrap();
        for split in [1, 5, 9] {
            let err = restart_consistency(&model, &lat, &sol, split).unwrap();
            assert!(err <= 1e-12, "restart error {err} at split {split}");
        }
    }

    #[test]
    fn quadruple_chain_holds_on_small_incomplete_lattice() {
        let model = incomplete_model(12);
        let lat = BrownianLattice::for_model(&model);
        let quad = price_quadruple(
            &model,
            &lat,
            &Claim::call(100.0),
            &Penalty::quadratic(1.0).unwrap(),
            HedgingVariant::ConstrainedM,
        )
        .unwrap();
        assert_eq!(quad.chain_violations(), 0);
        let [l, b, s, u] = quad.t0();
        assert!(l <= b + 1e-12 && b <= s + 1e-12 && s <= u + 1e-12);
    }

    #[test]
    fn digital_claim_prices_inside_unit_interval() {
        let model = incomplete_model(8);
        let lat = BrownianLattice::for_model(&model);
        let sol = solve(&model, &lat, &Claim::digital(100.0), &DriverKind::UpperM).unwrap();
        assert!(sol.y0() > 0.0 && sol.y0() < 1.0);
        assert!(matches!(sol.driver, DriverKind::UpperM));
        assert!(matches!(
            Claim::digital(100.0).kind,
            ClaimKind::Digital { .. }
        ));
    }
}
