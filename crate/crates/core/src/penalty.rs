//! Penalty functions and the per-step driver optimizations over scenarios.
//!
//! A penalty `f(t, theta) >= 0`, convex in `theta` with `f(t, 0) = 0`,
//! prices scenario tilts. The seller driver at a step maximizes
//! `z theta' - f(t, theta)` over the constrained slice
//! `theta' = theta_bar' + K s, |s| <= r`; the buyer driver minimizes
//! `z theta' + f(t, theta)` over the same set.
//!
//! Driver values are normalized by the slice minimum of the penalty, so that
//! the driver of the zero gradient is exactly zero and the induced dynamic
//! risk measure is normalized (the zero claim prices to zero, and the buyer
//! driver never exceeds the seller driver). For the quadratic penalty
//! `|theta|^2 / (2 gamma)` the normalized optimum is closed-form: the
//! kernel coordinate `s* = gamma (zK)'` clamped to the ball of radius `r`.
//!
//! Bound drivers need no penalty: `u_t |z|` and `-u_t |z|` price the full
//! scenario ball, while `z theta_bar' ± r |zK|` price the constrained slice.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{theta_from_kernel_coord, EmmSlice};

/// Penalty evaluated as `f(t, theta)`, with `theta` a row vector of length `d`.
pub type PenaltyFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Scenario penalty: the density of the risk measure's penalty term.
#[derive(Clone)]
pub enum Penalty {
    /// No penalty; seller/buyer reduce to the constrained sup/inf bounds.
    Zero,
    /// `f(t, theta) = |theta|^2 / (2 gamma)`, `gamma > 0`.
    Quadratic { gamma: f64 },
    /// Arbitrary convex nonnegative penalty with `f(t, 0) = 0`.
    Custom(Arc<PenaltyFn>),
}

impl fmt::Debug for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Penalty::Zero => write!(f, "Zero"),
            Penalty::Quadratic { gamma } => write!(f, "Quadratic {{ gamma: {gamma} }}"),
            Penalty::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Penalty {
    /// Quadratic penalty, rejecting non-positive `gamma`.
    pub fn quadratic(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma.is_finite() {
            Ok(Penalty::Quadratic { gamma })
        } else {
            Err(Error::Invalid(format!("gamma must be positive, got {gamma}")))
        }
    }

    /// Wrap a user-supplied penalty. The callable must be safe to invoke
    /// concurrently; convexity and nonnegativity are checked by [`Penalty::validate`].
    pub fn custom(f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Penalty::Custom(Arc::new(f))
    }

    /// Raw penalty value `f(t, theta)`.
    pub fn eval(&self, t: f64, theta: &[f64]) -> f64 {
        match self {
            Penalty::Zero => 0.0,
            Penalty::Quadratic { gamma } => linalg::dot(theta, theta) / (2.0 * gamma),
            Penalty::Custom(f) => f(t, theta),
        }
    }

    /// Check `f >= 0`, `f(t, 0) = 0` and midpoint convexity on deterministic
    /// samples from the ball `|theta| <= u`.
    pub fn validate(&self, t: f64, d: usize, u: f64) -> Result<()> {
        let zero = vec![0.0; d];
        let f0 = self.eval(t, &zero);
        if f0.abs() > 1e-12 {
            return Err(Error::Invalid(format!("penalty must vanish at theta=0, got {f0}")));
        }
        let mut sampler = SplitMix::new(PENALTY_SAMPLER_SEED);
        for _ in 0..256 {
            let a = sampler.vector_in_ball(d, u);
            let b = sampler.vector_in_ball(d, u);
            let fa = self.eval(t, &a);
            let fb = self.eval(t, &b);
            if !fa.is_finite() || !fb.is_finite() {
                return Err(Error::NonFinite { context: "penalty evaluation" });
            }
            if fa < -1e-12 || fb < -1e-12 {
                return Err(Error::Invalid(format!(
                    "penalty must be nonnegative, got {} at |theta|={}",
                    fa.min(fb),
                    linalg::norm(&a)
                )));
            }
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let fm = self.eval(t, &mid);
            if fm > 0.5 * (fa + fb) + 1e-10 {
                return Err(Error::Invalid(format!(
                    "penalty fails midpoint convexity: f(mid)={fm} > (f(a)+f(b))/2={}",
                    0.5 * (fa + fb)
                )));
            }
        }
        Ok(())
    }
}

/// Fixed seed so validation is deterministic run to run.
const PENALTY_SAMPLER_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Deterministic sampler for validation (no RNG dependency in the library).
struct SplitMix(u64);

impl SplitMix {
    fn new(seed: u64) -> Self {
        SplitMix(seed)
    }
    fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }
    fn vector_in_ball(&mut self, d: usize, radius: f64) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| (2.0 * self.next_f64() - 1.0) * radius).collect();
            if linalg::norm(&v) <= radius {
                return v;
            }
        }
    }
}

/// Which generator the backward solver plugs into the value recursion.
#[derive(Debug, Clone)]
pub enum DriverKind {
    /// `z theta_bar'` — the unique-measure (complete-market) driver.
    BlackScholes,
    /// `u_t |z|` — upper bound over the full scenario ball.
    UpperCW,
    /// `-u_t |z|` — lower bound over the full scenario ball.
    LowerCW,
    /// Constrained upper bound: seller with the zero penalty.
    UpperM,
    /// Constrained lower bound: buyer with the zero penalty.
    LowerM,
    /// `max over the slice of (z theta' - f)`, normalized.
    Seller(Penalty),
    /// `min over the slice of (z theta' + f)`, normalized.
    Buyer(Penalty),
}

impl DriverKind {
    /// Short tag used in outputs.
    pub fn tag(&self) -> &'static str {
        match self {
            DriverKind::BlackScholes => "black_scholes",
            DriverKind::UpperCW => "upper_cw",
            DriverKind::LowerCW => "lower_cw",
            DriverKind::UpperM => "upper_m",
            DriverKind::LowerM => "lower_m",
            DriverKind::Seller(_) => "seller",
            DriverKind::Buyer(_) => "buyer",
        }
    }
}

/// Evaluate a driver at gradient `z` (length `d`), time `t`, on a slice.
pub fn eval_driver(kind: &DriverKind, slice: &EmmSlice, t: f64, z: &[f64]) -> Result<f64> {
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { context: "driver gradient z" });
    }
    match kind {
        DriverKind::BlackScholes => Ok(linalg::dot(z, &slice.theta_bar)),
        DriverKind::UpperCW => Ok(slice.u * linalg::norm(z)),
        DriverKind::LowerCW => Ok(-slice.u * linalg::norm(z)),
        DriverKind::UpperM => seller_value(&Penalty::Zero, slice, t, z),
        DriverKind::LowerM => {
            let neg: Vec<f64> = z.iter().map(|x| -x).collect();
            Ok(-seller_value(&Penalty::Zero, slice, t, &neg)?)
        }
        DriverKind::Seller(p) => seller_value(p, slice, t, z),
        DriverKind::Buyer(p) => {
            let neg: Vec<f64> = z.iter().map(|x| -x).collect();
            Ok(-seller_value(p, slice, t, &neg)?)
        }
    }
}

/// Normalized seller optimum `max over |s| <= r of (z theta(s)' - f) + min f`.
fn seller_value(penalty: &Penalty, slice: &EmmSlice, t: f64, z: &[f64]) -> Result<f64> {
    let z_tb = linalg::dot(z, &slice.theta_bar);
    let w = slice.project_kernel(z);
    let r = slice.radius;
    match penalty {
        Penalty::Zero => Ok(z_tb + r * linalg::norm(&w)),
        Penalty::Quadratic { gamma } => {
            // optimum along w-hat: rho* = clamp(gamma |w|, 0, r)
            let aw = linalg::norm(&w);
            let rho = (gamma * aw).min(r);
            Ok(z_tb + aw * rho - rho * rho / (2.0 * gamma))
        }
        Penalty::Custom(_) => match slice.kernel_dim() {
            0 => Ok(z_tb),
            1 => {
                let objective = |s: f64| -> Result<f64> {
                    let theta = theta_from_kernel_coord(slice, &[s])?;
                    let v = w[0] * s - penalty.eval(t, &theta);
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::OptimizerFailed {
                            details: format!("non-finite objective at s={s} in [-{r}, {r}]"),
                        })
                    }
                };
                let tol = 1e-10 * (1.0 + r);
                let best = golden_max(&objective, -r, r, tol)?;
                // subtract the same maximizer applied at w = 0, which is
                // -min f on the slice; at z = 0 the two calls coincide
                // bitwise, so the normalized driver is exactly zero there
                let baseline = |s: f64| -> Result<f64> {
                    let theta = theta_from_kernel_coord(slice, &[s])?;
                    let v = -penalty.eval(t, &theta);
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::OptimizerFailed {
                            details: format!("non-finite penalty at s={s} in [-{r}, {r}]"),
                        })
                    }
                };
                let base = golden_max(&baseline, -r, r, tol)?;
                Ok(z_tb + best - base)
            }
            dim => Err(Error::UnsupportedKernelDim { dim }),
        },
    }
}

/// Slice minimum of the penalty over `{theta(s) : |s| <= r}`.
///
/// This is the normalization offset shared by the drivers and the tilted
/// oracles; for zero and quadratic penalties it is exact.
pub fn penalty_slice_min(penalty: &Penalty, slice: &EmmSlice, t: f64) -> Result<f64> {
    match penalty {
        Penalty::Zero => Ok(0.0),
        Penalty::Quadratic { gamma } => {
            Ok(linalg::dot(&slice.theta_bar, &slice.theta_bar) / (2.0 * gamma))
        }
        Penalty::Custom(_) => match slice.kernel_dim() {
            0 => Ok(penalty.eval(t, &slice.theta_bar)),
            1 => {
                let r = slice.radius;
                let objective = |s: f64| -> Result<f64> {
                    let theta = theta_from_kernel_coord(slice, &[s])?;
                    Ok(-penalty.eval(t, &theta))
                };
                Ok(-golden_max(&objective, -r, r, 1e-10 * (1.0 + r))?)
            }
            dim => Err(Error::UnsupportedKernelDim { dim }),
        },
    }
}

/// Normalized penalty at a kernel coordinate: `f(t, theta(s)) - min_slice f`.
pub fn normalized_penalty_at(
    penalty: &Penalty,
    slice: &EmmSlice,
    t: f64,
    s: &[f64],
) -> Result<f64> {
    match penalty {
        Penalty::Zero => Ok(0.0),
        // exact cancellation: (|theta_bar|^2 + |s|^2 - |theta_bar|^2) / (2 gamma)
        Penalty::Quadratic { gamma } => Ok(linalg::dot(s, s) / (2.0 * gamma)),
        Penalty::Custom(_) => {
            let theta = theta_from_kernel_coord(slice, s)?;
            let min_f = penalty_slice_min(penalty, slice, t)?;
            Ok((penalty.eval(t, &theta) - min_f).max(0.0))
        }
    }
}

/// Golden-section maximization of a unimodal function on `[a, b]`.
fn golden_max(f: &dyn Fn(f64) -> Result<f64>, a: f64, b: f64, tol: f64) -> Result<f64> {
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    if a >= b {
        return f(a);
    }
    let (mut lo, mut hi) = (a, b);
    let mut x1 = hi - INVPHI * (hi - lo);
    let mut x2 = lo + INVPHI * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    let mut best = f(a)?.max(f(b)?).max(f1).max(f2);
    let mut iters = 0usize;
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INVPHI * (hi - lo);
            f2 = f(x2)?;
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INVPHI * (hi - lo);
            f1 = f(x1)?;
        }
        best = best.max(f1).max(f2);
        iters += 1;
        if iters > 500 {
            return Err(Error::OptimizerFailed {
                details: format!(
                    "golden section stalled: bracket [{lo}, {hi}] width {} after {iters} iterations (f1={f1}, f2={f2})",
                    hi - lo
                ),
            });
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pure_kernel_slice(kernel: Vec<Vec<f64>>, r: f64, u: f64) -> EmmSlice {
        let d = kernel[0].len();
        EmmSlice {
            theta_bar: vec![0.0; d],
            kernel,
            radius: r,
            u,
        }
    }

    #[test]
    fn seller_zero_penalty_hits_segment_endpoint() {
        // theta_bar = 0, K = (1,-1)/sqrt(2), r = 0.3, z = (1, 0)
        let s2 = 2f64.sqrt();
        let slice = pure_kernel_slice(vec![vec![1.0 / s2, -1.0 / s2]], 0.3, 0.3);
        let v = eval_driver(&DriverKind::Seller(Penalty::Zero), &slice, 0.0, &[1.0, 0.0]).unwrap();
        assert!((v - 0.3 / s2).abs() < 1e-15);
        assert!((v - 0.21213203435596423).abs() < 1e-12);
    }

    #[test]
    fn seller_quadratic_interior_and_clamped_optimum() {
        let slice = pure_kernel_slice(vec![vec![1.0, 0.0]], 0.5, 0.5);
        let quad = Penalty::quadratic(1.0).unwrap();
        // zK = 0.2 -> interior optimum s* = 0.2, value 0.04 - 0.02
        let v = eval_driver(&DriverKind::Seller(quad.clone()), &slice, 0.0, &[0.2, 0.0]).unwrap();
        assert!((v - 0.02).abs() < 1e-15);
        // zK = 1.0 -> clamped s* = 0.5, value 0.5 - 0.125
        let v = eval_driver(&DriverKind::Seller(quad), &slice, 0.0, &[1.0, 0.0]).unwrap();
        assert!((v - 0.375).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_prices_to_zero() {
        let slice = pure_kernel_slice(vec![vec![1.0, 0.0]], 0.5, 0.5);
        let quad = Penalty::quadratic(2.0).unwrap();
        let custom = Penalty::custom(|_, th| th.iter().map(|x| x * x).sum::<f64>());
        for kind in [
            DriverKind::BlackScholes,
            DriverKind::UpperCW,
            DriverKind::LowerCW,
            DriverKind::UpperM,
            DriverKind::LowerM,
            DriverKind::Seller(Penalty::Zero),
            DriverKind::Buyer(Penalty::Zero),
            DriverKind::Seller(quad.clone()),
            DriverKind::Buyer(quad),
            DriverKind::Seller(custom.clone()),
            DriverKind::Buyer(custom),
        ] {
            let v = eval_driver(&kind, &slice, 0.0, &[0.0, 0.0]).unwrap();
            assert_eq!(v, 0.0, "driver {} not exactly zero at z=0", kind.tag());
        }
    }

    #[test]
    fn custom_penalty_matches_dense_grid_search() {
        // grid-search oracle: 401 points over [-r, r]
        let slice = pure_kernel_slice(vec![vec![1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()]], 0.45, 0.45);
        let f = Penalty::custom(|_, th: &[f64]| {
            let q = th.iter().map(|x| x * x).sum::<f64>();
            (1.0 + q).sqrt() - 1.0 // convex, f(0)=0, >=0, curvature <= 1
        });
        f.validate(0.0, 2, 0.45).unwrap();
        for z in [[1.0, 0.3], [-0.7, 0.2], [0.0, 2.0], [3.0, 3.0]] {
            let v = eval_driver(&DriverKind::Seller(f.clone()), &slice, 0.25, &z).unwrap();
            let w = slice.project_kernel(&z)[0];
            let min_f = penalty_slice_min(&f, &slice, 0.25).unwrap();
            let mut grid_best = f64::NEG_INFINITY;
            for i in 0..=400 {
                let s = -0.45 + 0.9 * i as f64 / 400.0;
                let theta = theta_from_kernel_coord(&slice, &[s]).unwrap();
                let cand = w * s - f.eval(0.25, &theta) + min_f;
                grid_best = grid_best.max(cand);
            }
            let z_tb = linalg::dot(&z, &slice.theta_bar);
            assert!(
                (v - (z_tb + grid_best)).abs() < 1e-6,
                "golden-section {v} vs grid {grid_best}"
            );
        }
    }

    #[test]
    fn custom_penalty_rejected_on_multidimensional_kernel() {
        let slice = pure_kernel_slice(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 0.2, 0.2);
        let f = Penalty::custom(|_, th: &[f64]| th.iter().map(|x| x * x).sum::<f64>());
        let err = eval_driver(&DriverKind::Seller(f), &slice, 0.0, &[1.0, 1.0, 1.0]);
        assert!(matches!(err, Err(Error::UnsupportedKernelDim { dim: 2 })));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let slice = pure_kernel_slice(vec![vec![1.0, 0.0]], 0.5, 0.5);
        let err = eval_driver(&DriverKind::UpperCW, &slice, 0.0, &[f64::NAN, 0.0]);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn buyer_is_negated_seller_of_negated_gradient() {
        let slice = EmmSlice {
            theta_bar: vec![-0.2, -0.1],
            kernel: vec![vec![0.1 / 0.05f64.sqrt(), -0.2 / 0.05f64.sqrt()]],
            radius: 0.2f64.sqrt(),
            u: 0.5,
        };
        let quad = Penalty::quadratic(1.5).unwrap();
        for z in [[1.0, -2.0], [0.3, 0.04], [-5.0, 1.0]] {
            let buyer = eval_driver(&DriverKind::Buyer(quad.clone()), &slice, 0.1, &z).unwrap();
            let neg = [-z[0], -z[1]];
            let seller = eval_driver(&DriverKind::Seller(quad.clone()), &slice, 0.1, &neg).unwrap();
            assert_eq!(buyer, -seller);
        }
    }

    #[test]
    fn zero_penalty_collapse_is_bitwise() {
        let slice = EmmSlice {
            theta_bar: vec![-0.2, -0.1],
            kernel: vec![vec![0.1 / 0.05f64.sqrt(), -0.2 / 0.05f64.sqrt()]],
            radius: 0.2f64.sqrt(),
            u: 0.5,
        };
        for z in [[1.0, -2.0], [0.3, 0.04], [-5.0, 1.0], [0.0, 0.0]] {
            let upper_m = eval_driver(&DriverKind::UpperM, &slice, 0.0, &z).unwrap();
            let seller0 = eval_driver(&DriverKind::Seller(Penalty::Zero), &slice, 0.0, &z).unwrap();
            assert_eq!(upper_m, seller0);
            let closed = linalg::dot(&z, &slice.theta_bar)
                + slice.radius * linalg::norm(&slice.project_kernel(&z));
            assert_eq!(upper_m, closed);
        }
    }

    #[test]
    fn monotone_in_penalty_within_families() {
        let slice = EmmSlice {
            theta_bar: vec![-0.2, -0.1],
            kernel: vec![vec![0.1 / 0.05f64.sqrt(), -0.2 / 0.05f64.sqrt()]],
            radius: 0.2f64.sqrt(),
            u: 0.5,
        };
        // larger gamma = pointwise smaller penalty = larger seller driver
        let gammas = [1e-3, 0.1, 1.0, 10.0, 1e3];
        for z in [[1.0, -2.0], [0.3, 0.04], [-5.0, 1.0]] {
            let mut prev = f64::NEG_INFINITY;
            for g in gammas {
                let p = Penalty::quadratic(g).unwrap();
                let v = eval_driver(&DriverKind::Seller(p), &slice, 0.0, &z).unwrap();
                assert!(v >= prev - 1e-15, "seller not monotone in gamma");
                prev = v;
            }
            // zero penalty dominates every quadratic
            let v0 = eval_driver(&DriverKind::Seller(Penalty::Zero), &slice, 0.0, &z).unwrap();
            assert!(v0 >= prev - 1e-15);
        }
    }

    #[test]
    fn validate_flags_nonconvex_and_nonvanishing_penalties() {
        let concave = Penalty::custom(|_, th: &[f64]| linalg::norm(th).sqrt());
        assert!(concave.validate(0.0, 2, 0.5).is_err());
        let shifted = Penalty::custom(|_, _| 1.0);
        assert!(shifted.validate(0.0, 2, 0.5).is_err());
        let ok = Penalty::custom(|_, th: &[f64]| linalg::dot(th, th));
        assert!(ok.validate(0.0, 2, 0.5).is_ok());
    }
}
