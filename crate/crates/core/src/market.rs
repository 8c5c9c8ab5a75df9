//! Market model and the per-step geometry of the admissible scenario sets.
//!
//! The market has one bond with unit price and `n` risky assets driven by a
//! `d`-dimensional Brownian motion (`d >= n`), with per-step constant drift
//! `mu`, volatility `sigma` (n x d, full row rank) and a scenario bound `u`.
//! Candidate pricing measures are parameterized by a market price of risk
//! `theta` (1 x d). Two scenario sets matter:
//!
//! * the ball `|theta| <= u_t`, and
//! * its intersection with the martingale constraint
//!   `sigma theta' + mu = 0`, which is the affine slice
//!   `theta' = theta_bar' + K s` with `theta_bar` the min-norm solution,
//!   `K` an orthonormal basis of `ker(sigma)` and `|s| <= r`,
//!   `r = sqrt(u^2 - |theta_bar|^2)`.
//!
//! Since `theta_bar` is orthogonal to `ker(sigma)`, the kernel coordinate `s`
//! is an isometry onto the constrained slice.

use crate::error::{Error, Result};
use crate::linalg;

/// Minimum acceptable smallest singular value of `sigma` at any step.
pub const RANK_TOL: f64 = 1e-10;

/// Market coefficients, piecewise-constant on a uniform time grid.
///
/// `mu[m]`, `sigma[m]` and `u[m]` hold the values on `[m*dt, (m+1)*dt)`;
/// `sigma[m]` is row-major `n x d`.
#[derive(Debug, Clone)]
pub struct MarketModel {
    /// Number of risky assets.
    pub n: usize,
    /// Number of Brownian drivers (`d >= n`).
    pub d: usize,
    /// Drift per step, each of length `n` (units 1/time).
    pub mu: Vec<Vec<f64>>,
    /// Volatility per step, each row-major `n x d`, full row rank.
    pub sigma: Vec<Vec<f64>>,
    /// Scenario bound per step, positive.
    pub u: Vec<f64>,
    /// Initial asset prices, strictly positive, length `n`.
    pub s0: Vec<f64>,
    /// Time horizon `T > 0`.
    pub horizon: f64,
    /// Number of time steps `N >= 1`; `dt = horizon / steps`.
    pub steps: usize,
}

/// Outcome of validating a [`MarketModel`]; empty iff the model is usable.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    /// Human-readable descriptions of every violated invariant.
    pub issues: Vec<String>,
}

impl ValidationReport {
    /// True when no invariant is violated.
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.issues.is_empty() {
            write!(f, "ok")
        } else {
            write!(f, "{}", self.issues.join("; "))
        }
    }
}

/// Per-step parameterization of the constrained scenario set
/// `M_t = { theta : sigma theta' + mu = 0, |theta| <= u_t }`.
#[derive(Debug, Clone)]
pub struct EmmSlice {
    /// Min-norm solution of `sigma theta' = -mu` (length `d`).
    pub theta_bar: Vec<f64>,
    /// Orthonormal basis of `ker(sigma)`, one column (length-`d` vector) per entry.
    pub kernel: Vec<Vec<f64>>,
    /// Radius of the kernel-coordinate ball, `sqrt(u^2 - |theta_bar|^2)`.
    pub radius: f64,
    /// The scenario bound the slice was built with.
    pub u: f64,
}

impl EmmSlice {
    /// Dimension of the kernel coordinate (`d - n` for a full-rank model).
    pub fn kernel_dim(&self) -> usize {
        self.kernel.len()
    }

    /// Projection of a `1 x d` row vector onto the kernel coordinates: `w = z K`.
    pub fn project_kernel(&self, z: &[f64]) -> Vec<f64> {
        self.kernel.iter().map(|col| linalg::dot(z, col)).collect()
    }
}

impl MarketModel {
    /// Build a model with time-constant coefficients, rejecting invalid input.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        n: usize,
        d: usize,
        mu: Vec<f64>,
        sigma: Vec<f64>,
        u: f64,
        s0: Vec<f64>,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        let model = MarketModel {
            n,
            d,
            mu: vec![mu; steps.max(1)],
            sigma: vec![sigma; steps.max(1)],
            u: vec![u; steps.max(1)],
            s0,
            horizon,
            steps,
        };
        model.into_validated()
    }

    /// Build a model with per-step coefficients, rejecting invalid input.
    #[allow(clippy::too_many_arguments)]
    pub fn per_step(
        n: usize,
        d: usize,
        mu: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
        u: Vec<f64>,
        s0: Vec<f64>,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        let model = MarketModel {
            n,
            d,
            mu,
            sigma,
            u,
            s0,
            horizon,
            steps,
        };
        model.into_validated()
    }

    fn into_validated(self) -> Result<Self> {
        let report = validate_model(&self);
        if report.is_ok() {
            Ok(self)
        } else {
            Err(Error::InvalidModel(report.to_string()))
        }
    }

    /// Step size of the time grid.
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Largest scenario bound over the grid.
    pub fn u_max(&self) -> f64 {
        self.u.iter().cloned().fold(0.0, f64::max)
    }

    /// True when `sigma` is the same at every step (claims on `S_T` need this
    /// to stay node-measurable on the lattice).
    pub fn sigma_is_constant(&self) -> bool {
        self.sigma.windows(2).all(|w| w[0] == w[1])
    }
}

/// Check every construction invariant and report all violations.
pub fn validate_model(model: &MarketModel) -> ValidationReport {
    let mut issues = Vec::new();
    let (n, d) = (model.n, model.d);
    if n < 1 {
        issues.push("need at least one risky asset (n >= 1)".to_string());
    }
    if d < n {
        issues.push(format!("need d >= n Brownian drivers, got d={d} < n={n}"));
    }
    if model.steps < 1 {
        issues.push("steps must be >= 1".to_string());
    }
    if !(model.horizon > 0.0 && model.horizon.is_finite()) {
        issues.push(format!("horizon must be positive and finite, got {}", model.horizon));
    }
    if model.s0.len() != n {
        issues.push(format!("s0 has length {}, expected n={n}", model.s0.len()));
    }
    for (i, &s) in model.s0.iter().enumerate() {
        if !(s > 0.0 && s.is_finite()) {
            issues.push(format!("s0[{i}] must be strictly positive, got {s}"));
        }
    }
    for (name, len) in [
        ("mu", model.mu.len()),
        ("sigma", model.sigma.len()),
        ("u", model.u.len()),
    ] {
        if len != model.steps {
            issues.push(format!("{name} has {len} per-step entries, expected {}", model.steps));
        }
    }
    if !issues.is_empty() {
        return ValidationReport { issues };
    }

    for m in 0..model.steps {
        if model.mu[m].len() != n {
            issues.push(format!("mu at step {m} has length {}, expected {n}", model.mu[m].len()));
            continue;
        }
        if model.sigma[m].len() != n * d {
            issues.push(format!(
                "sigma at step {m} has {} entries, expected {}",
                model.sigma[m].len(),
                n * d
            ));
            continue;
        }
        if model.mu[m].iter().any(|x| !x.is_finite())
            || model.sigma[m].iter().any(|x| !x.is_finite())
        {
            issues.push(format!("non-finite coefficient at step {m}"));
            continue;
        }
        if !(model.u[m] > 0.0 && model.u[m].is_finite()) {
            issues.push(format!("u at step {m} must be positive, got {}", model.u[m]));
            continue;
        }
        let g = linalg::gram(&model.sigma[m], n, d);
        let min_ev = linalg::sym_min_eigenvalue(&g, n);
        let min_sv = min_ev.max(0.0).sqrt();
        if min_sv <= RANK_TOL {
            issues.push(format!(
                "sigma not full rank at step {m} (min singular value {min_sv:.3e})"
            ));
            continue;
        }
        // empty-M check: u_t must cover the min-norm market price of risk
        match emm_slice_unchecked(model, m) {
            Ok(slice) => {
                let tb = linalg::norm(&slice.theta_bar);
                if model.u[m] < tb {
                    issues.push(format!("u below |theta_bar|={tb} at step {m} (empty EMM set)"));
                }
            }
            Err(e) => issues.push(format!("step {m}: {e}")),
        }
    }
    ValidationReport { issues }
}

/// Compute the scenario-set geometry `(theta_bar, kernel, radius)` at a step.
///
/// Errors on rank deficiency and on an empty constrained set (`u < |theta_bar|`).
pub fn emm_slice(model: &MarketModel, step: usize) -> Result<EmmSlice> {
    if step >= model.steps {
        return Err(Error::Invalid(format!(
            "step {step} out of range (model has {} steps)",
            model.steps
        )));
    }
    let slice = emm_slice_unchecked(model, step)?;
    let tb_norm = linalg::norm(&slice.theta_bar);
    if model.u[step] < tb_norm {
        return Err(Error::EmptyEmmSet {
            step,
            u: model.u[step],
            theta_bar_norm: tb_norm,
        });
    }
    Ok(slice)
}

fn emm_slice_unchecked(model: &MarketModel, step: usize) -> Result<EmmSlice> {
    let (n, d) = (model.n, model.d);
    let sigma = &model.sigma[step];
    let mu = &model.mu[step];
    let g = linalg::gram(sigma, n, d);
    let min_ev = linalg::sym_min_eigenvalue(&g, n);
    let min_sv = min_ev.max(0.0).sqrt();
    if min_sv <= RANK_TOL {
        return Err(Error::RankDeficient { step, min_sv });
    }
    // theta_bar' = -sigma' (sigma sigma')^{-1} mu  (normal-equations pseudo-inverse)
    let y = linalg::solve_spd(&g, n, mu).ok_or(Error::RankDeficient { step, min_sv })?;
    let mut theta_bar = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            theta_bar[j] -= sigma[i * d + j] * y[i];
        }
    }
    let kernel = linalg::kernel_basis(sigma, n, d);
    if kernel.len() != d - n {
        return Err(Error::RankDeficient { step, min_sv });
    }
    let tb_norm2 = linalg::dot(&theta_bar, &theta_bar);
    let u = model.u[step];
    let radius = (u * u - tb_norm2).max(0.0).sqrt();
    Ok(EmmSlice {
        theta_bar,
        kernel,
        radius,
        u,
    })
}

/// Map a kernel coordinate `s` (length `d - n`, `|s| <= radius`) to the
/// scenario `theta' = theta_bar' + K s`.
pub fn theta_from_kernel_coord(slice: &EmmSlice, s: &[f64]) -> Result<Vec<f64>> {
    if s.len() != slice.kernel_dim() {
        return Err(Error::Invalid(format!(
            "kernel coordinate has length {}, expected {}",
            s.len(),
            slice.kernel_dim()
        )));
    }
    let s_norm = linalg::norm(s);
    if s_norm > slice.radius + 1e-12 * (1.0 + slice.radius) {
        return Err(Error::OutsideScenarioBall {
            s_norm,
            radius: slice.radius,
        });
    }
    let mut theta = slice.theta_bar.clone();
    for (coeff, col) in s.iter().zip(&slice.kernel) {
        for (t, c) in theta.iter_mut().zip(col) {
            *t += coeff * c;
        }
    }
    Ok(theta)
}
