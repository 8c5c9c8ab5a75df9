//! Recombining lattice for a d-dimensional Brownian motion, and terminal claims.
//!
//! Each step every component moves by `+sqrt(dt)` or `-sqrt(dt)`, giving
//! `2^d` equally weighted branches whose increments match the first two
//! Brownian moments exactly (mean 0, covariance `dt I`). A node at slice `m`
//! is an integer vector `k` in `{-m, -m+2, ..., m}^d` with `W = k sqrt(dt)`;
//! internally nodes are indexed by `j = (k + m) / 2` in `{0, ..., m}^d`,
//! flattened in radix `m + 1`. Slice `m` holds `(m+1)^d` nodes.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::market::MarketModel;

/// Discretization of the Brownian driver.
#[derive(Debug, Clone)]
pub struct BrownianLattice {
    /// Number of time steps.
    pub steps: usize,
    /// Step size `horizon / steps`.
    pub dt: f64,
    /// Brownian dimension `d`.
    pub dimension: usize,
}

impl BrownianLattice {
    /// Lattice matching a model's grid and Brownian dimension.
    pub fn for_model(model: &MarketModel) -> Self {
        BrownianLattice {
            steps: model.steps,
            dt: model.dt(),
            dimension: model.d,
        }
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.dt.sqrt()
    }

    /// Number of nodes at slice `m`: `(m+1)^d`.
    pub fn slice_len(&self, m: usize) -> usize {
        (m + 1).pow(self.dimension as u32)
    }

    /// Number of branches per step: `2^d`.
    pub fn branch_count(&self) -> usize {
        1 << self.dimension
    }

    /// Sign of component `i` on branch `b` (+1 for an up move).
    #[inline]
    pub fn branch_sign(&self, b: usize, i: usize) -> f64 {
        if (b >> i) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Decode a linear index at slice `m` into `j` coordinates in `{0..m}^d`.
    pub fn decode(&self, m: usize, mut idx: usize) -> Vec<usize> {
        let base = m + 1;
        let mut j = vec![0usize; self.dimension];
        for jj in j.iter_mut() {
            *jj = idx % base;
            idx /= base;
        }
        j
    }

    /// Linear index of `j` coordinates at slice `m`.
    pub fn encode(&self, m: usize, j: &[usize]) -> usize {
        let base = m + 1;
        let mut idx = 0usize;
        for &jj in j.iter().rev() {
            idx = idx * base + jj;
        }
        idx
    }

    /// Child linear index at slice `m+1` for parent `j` at slice `m` and branch `b`.
    #[inline]
    pub fn child_index(&self, m: usize, j: &[usize], b: usize) -> usize {
        let base = m + 2;
        let mut idx = 0usize;
        for i in (0..self.dimension).rev() {
            idx = idx * base + j[i] + ((b >> i) & 1);
        }
        idx
    }

    /// Signed node coordinates `k = 2 j - m` componentwise.
    pub fn node_coords(&self, m: usize, j: &[usize]) -> Vec<i64> {
        j.iter().map(|&jj| 2 * jj as i64 - m as i64).collect()
    }

    /// Brownian level at a node: `W_i = k_i sqrt(dt)`.
    pub fn w_at(&self, m: usize, j: &[usize]) -> Vec<f64> {
        let h = self.sqrt_dt();
        j.iter().map(|&jj| (2.0 * jj as f64 - m as f64) * h).collect()
    }
}

/// Terminal payoff callable on the terminal asset vector.
pub type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Payoff shape; vanilla kinds read the first asset.
#[derive(Clone)]
pub enum ClaimKind {
    Call { strike: f64 },
    Put { strike: f64 },
    /// Pays 1 when `S >= strike` (the tie at `S = strike` counts as exercise).
    Digital { strike: f64 },
    CustomTerminal(Arc<TerminalFn>),
}

impl fmt::Debug for ClaimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClaimKind::Call { strike } => write!(f, "Call {{ strike: {strike} }}"),
            ClaimKind::Put { strike } => write!(f, "Put {{ strike: {strike} }}"),
            ClaimKind::Digital { strike } => write!(f, "Digital {{ strike: {strike} }}"),
            ClaimKind::CustomTerminal(_) => write!(f, "CustomTerminal(..)"),
        }
    }
}

/// Contingent claim on the terminal asset vector, optionally capped.
#[derive(Debug, Clone)]
pub struct Claim {
    pub kind: ClaimKind,
    /// Upper bound on the payoff; `None` permits unbounded payoffs (logged).
    pub cap: Option<f64>,
}

impl Claim {
    pub fn call(strike: f64) -> Self {
        Claim { kind: ClaimKind::Call { strike }, cap: None }
    }
    pub fn put(strike: f64) -> Self {
        Claim { kind: ClaimKind::Put { strike }, cap: None }
    }
    pub fn digital(strike: f64) -> Self {
        Claim { kind: ClaimKind::Digital { strike }, cap: None }
    }
    pub fn custom(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Claim { kind: ClaimKind::CustomTerminal(Arc::new(f)), cap: None }
    }
    pub fn with_cap(mut self, cap: f64) -> Self {
        self.cap = Some(cap);
        self
    }

    /// True for payoffs that are bounded regardless of the asset level.
    pub fn is_bounded(&self) -> bool {
        self.cap.is_some() || matches!(self.kind, ClaimKind::Put { .. } | ClaimKind::Digital { .. })
    }
}

/// Evaluate a claim at a terminal asset vector.
pub fn payoff(claim: &Claim, s_terminal: &[f64]) -> Result<f64> {
    let s = s_terminal[0];
    let raw = match &claim.kind {
        ClaimKind::Call { strike } => (s - strike).max(0.0),
        ClaimKind::Put { strike } => (strike - s).max(0.0),
        ClaimKind::Digital { strike } => {
            if s >= *strike {
                1.0
            } else {
                0.0
            }
        }
        ClaimKind::CustomTerminal(f) => f(s_terminal),
    };
    if !raw.is_finite() {
        return Err(Error::NonFinite { context: "claim payoff" });
    }
    Ok(match claim.cap {
        Some(cap) => raw.min(cap),
        None => raw,
    })
}

/// Terminal asset vector at a terminal node with coordinates `k`.
///
/// Piecewise-constant coefficients give the closed form
/// `S_i = s0_i exp(sum_m (mu_i - |sigma_i|^2 / 2) dt + sigma_i W_T)`, which is
/// a function of the terminal node alone only when `sigma` does not vary over
/// the grid; time-varying `sigma` is rejected here.
pub fn terminal_assets(model: &MarketModel, lattice: &BrownianLattice, k: &[i64]) -> Result<Vec<f64>> {
    if k.len() != model.d {
        return Err(Error::Invalid(format!(
            "terminal node has {} coordinates, expected d={}",
            k.len(),
            model.d
        )));
    }
    if !model.sigma_is_constant() {
        return Err(Error::Invalid(
            "claims on S_T need sigma constant over the grid (terminal value is not node-measurable otherwise)"
                .to_string(),
        ));
    }
    let n_steps = lattice.steps as i64;
    for &ki in k {
        if ki.abs() > n_steps || (ki - n_steps) % 2 != 0 {
            return Err(Error::Invalid(format!(
                "coordinates {k:?} do not lie on the terminal slice of an {n_steps}-step lattice"
            )));
        }
    }
    let h = lattice.sqrt_dt();
    let dt = lattice.dt;
    let (n, d) = (model.n, model.d);
    let sigma = &model.sigma[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &sigma[i * d..(i + 1) * d];
        let row_sq: f64 = row.iter().map(|x| x * x).sum();
        let mut drift = 0.0;
        for m in 0..model.steps {
            drift += (model.mu[m][i] - 0.5 * row_sq) * dt;
        }
        let diffusion: f64 = row.iter().zip(k).map(|(s, &ki)| s * ki as f64 * h).sum();
        out.push(model.s0[i] * (drift + diffusion).exp());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_1d(mu: f64, sigma: f64, steps: usize) -> MarketModel {
        MarketModel::constant(1, 1, vec![mu], vec![sigma], 1.0, vec![100.0], 1.0, steps).unwrap()
    }

    #[test]
    fn branch_moments_are_exact() {
        for d in 1..=3 {
            let lat = BrownianLattice { steps: 4, dt: 0.25, dimension: d };
            let h = lat.sqrt_dt();
            let nb = lat.branch_count();
            for i in 0..d {
                let mean: f64 = (0..nb).map(|b| lat.branch_sign(b, i) * h).sum::<f64>() / nb as f64;
                assert_eq!(mean, 0.0);
                for jdim in 0..d {
                    let cov: f64 = (0..nb)
                        .map(|b| lat.branch_sign(b, i) * h * lat.branch_sign(b, jdim) * h)
                        .sum::<f64>()
                        / nb as f64;
                    let expected = if i == jdim { lat.dt } else { 0.0 };
                    assert!((cov - expected).abs() < 1e-16);
                }
            }
        }
    }

    #[test]
    fn slice_sizes_and_index_round_trip() {
        let lat = BrownianLattice { steps: 5, dt: 0.2, dimension: 2 };
        assert_eq!(lat.slice_len(3), 16);
        for m in 0..=5 {
            for idx in 0..lat.slice_len(m) {
                let j = lat.decode(m, idx);
                assert_eq!(lat.encode(m, &j), idx);
            }
        }
    }

    #[test]
    fn children_recombine() {
        // up-then-down and down-then-up meet at the same node
        let lat = BrownianLattice { steps: 4, dt: 0.25, dimension: 1 };
        let a = lat.child_index(0, &[0], 1); // up from origin
        let fold_a = lat.child_index(1, &lat.decode(1, a), 0); // then down
        let b = lat.child_index(0, &[0], 0); // down from origin
        let fold_b = lat.child_index(1, &lat.decode(1, b), 1); // then up
        assert_eq!(fold_a, fold_b);
    }

    #[test]
    fn slice_moments_match_brownian_moments() {
        // slice-m marginal is binomial per component: mean 0, covariance m dt I
        let lat = BrownianLattice { steps: 6, dt: 0.1, dimension: 2 };
        let m = 4;
        let mut weights = vec![0.0; lat.slice_len(m)];
        // accumulate path weights by forward induction
        let mut prev = vec![1.0];
        for mm in 0..m {
            let mut next = vec![0.0; lat.slice_len(mm + 1)];
            for (idx, &w) in prev.iter().enumerate() {
                let j = lat.decode(mm, idx);
                for b in 0..lat.branch_count() {
                    next[lat.child_index(mm, &j, b)] += w / lat.branch_count() as f64;
                }
            }
            prev = next;
        }
        weights.copy_from_slice(&prev);
        let mut mean = [0.0f64; 2];
        let mut cov = [[0.0f64; 2]; 2];
        for (idx, &w) in weights.iter().enumerate() {
            let wv = lat.w_at(m, &lat.decode(m, idx));
            for i in 0..2 {
                mean[i] += w * wv[i];
                for jdim in 0..2 {
                    cov[i][jdim] += w * wv[i] * wv[jdim];
                }
            }
        }
        for i in 0..2 {
            assert!(mean[i].abs() < 1e-14);
            for jdim in 0..2 {
                let expected = if i == jdim { m as f64 * lat.dt } else { 0.0 };
                assert!((cov[i][jdim] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vanilla_payoffs() {
        assert_eq!(payoff(&Claim::call(100.0), &[110.0]).unwrap(), 10.0);
        assert_eq!(payoff(&Claim::put(100.0), &[110.0]).unwrap(), 0.0);
        assert_eq!(payoff(&Claim::digital(100.0), &[100.0]).unwrap(), 1.0);
        assert_eq!(payoff(&Claim::digital(100.0), &[99.999]).unwrap(), 0.0);
        assert_eq!(payoff(&Claim::call(100.0).with_cap(5.0), &[110.0]).unwrap(), 5.0);
        assert!(payoff(&Claim::custom(|_| f64::INFINITY), &[1.0]).is_err());
    }

    #[test]
    fn terminal_value_at_center_node() {
        let model = model_1d(0.05, 0.2, 4);
        let lat = BrownianLattice::for_model(&model);
        let s = terminal_assets(&model, &lat, &[0]).unwrap();
        let expected = 100.0 * ((0.05 - 0.02) * 1.0f64).exp();
        assert!((s[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn terminal_rejects_off_slice_coordinates() {
        let model = model_1d(0.0, 0.2, 4);
        let lat = BrownianLattice::for_model(&model);
        assert!(terminal_assets(&model, &lat, &[3]).is_err()); // wrong parity
        assert!(terminal_assets(&model, &lat, &[6]).is_err()); // out of range
    }

    #[test]
    fn terminal_mean_is_close_to_spot_under_zero_drift() {
        // The exponential closed form is not an exact lattice martingale:
        // per step E[exp(sigma dW)] = cosh(sigma sqrt(dt)) exceeds the
        // compensator by exp(sigma^4 dt^2 / 12 + ...), so
        // |E[S_T] - s0| ~ s0 sigma^4 T^2 / (12 N).
        let sigma = 0.2f64;
        for steps in [50usize, 200] {
            let model = model_1d(0.0, sigma, steps);
            let lat = BrownianLattice::for_model(&model);
            // binomial weights over the terminal slice
            let mut logw = vec![0.0f64; steps + 1];
            for j in 1..=steps {
                logw[j] = logw[j - 1] + ((steps - j + 1) as f64).ln() - (j as f64).ln();
            }
            let log_half = (0.5f64).ln() * steps as f64;
            let mut mean = 0.0;
            for j in 0..=steps {
                let k = 2 * j as i64 - steps as i64;
                let s = terminal_assets(&model, &lat, &[k]).unwrap()[0];
                mean += (logw[j] + log_half).exp() * s;
            }
            let bound = 100.0 * sigma.powi(4) / (10.0 * steps as f64);
            assert!(
                (mean - 100.0).abs() < bound,
                "deviation {} exceeds {bound} at N={steps}",
                (mean - 100.0).abs()
            );
        }
    }
}
