//! Inversion of scaled RMSNorm.
//!
//! Given a target `g` and a scale `m`, find `x` with `RMS(x) = C` that
//! minimizes `‖m ⊙ x/RMS(x) − g‖²`. Writing `x = C·y`, the stationarity
//! condition of the Lagrangian gives `y_k = g_k m_k / (m_k² − μ)`, and the
//! constraint `mean(y²) = 1` becomes the scalar equation `F(μ) = 0` with
//!
//! ```text
//! F(μ) = (1/n) Σ_k (g_k m_k)² / (m_k² − μ)² − 1
//! ```
//!
//! `F` tends to −1 as μ → −∞, diverges at the smallest pole and is strictly
//! increasing in between, so bisection on that interval finds the unique root.
//!
//! Components with `g_k m_k = 0` contribute no pole and get `y_k = 0`; the
//! search interval is bounded by the smallest `m_k²` among the remaining ones.
//! All arithmetic here is `f64` regardless of model precision.

use crate::error::{check_len, Error, Result};
use crate::numerics::DenseVector;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, Clone)]
pub struct InversionProblem {
    pub g: DenseVector,
    pub m: DenseVector,
    /// Required RMS of the solution.
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub x: DenseVector,
    pub y: DenseVector,
    pub mu: f64,
}

impl InversionProblem {
    pub fn new(g: DenseVector, m: DenseVector, c: f64) -> Self {
        Self {
            g,
            m,
            c,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("inversion scale", self.g.len(), self.m.len())?;
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Validation(format!("target RMS must be positive, got {}", self.c)));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Validation("tolerance and iteration budget must be positive".into()));
        }
        pole(&self.g, &self.m).map(|_| ())
    }

    pub fn solve(&self) -> Result<Inversion> {
        self.validate()?;
        let mu = solve_mu(&self.g, &self.m, self.tol, self.max_iter)?;
        let y = solution_at(mu, &self.g, &self.m);
        let x = y.map(|v| v * self.c);
        Ok(Inversion { x, y, mu })
    }
}

/// Smallest `m_k²` over components with a nonzero numerator `g_k m_k`.
pub fn pole(g: &DenseVector, m: &DenseVector) -> Result<f64> {
    check_len("inversion scale", g.len(), m.len())?;
    g.iter()
        .zip(m.iter())
        .filter(|(&gk, &mk)| gk * mk != 0.0)
        .map(|(_, &mk)| mk * mk)
        .min_by(f64::total_cmp)
        .ok_or(Error::DegenerateProblem)
}

/// `F(μ)`; terms with `g_k m_k = 0` are skipped.
pub fn f_mu(mu: f64, g: &DenseVector, m: &DenseVector) -> Result<f64> {
    check_len("inversion scale", g.len(), m.len())?;
    let mut sum = 0.0;
    for (&gk, &mk) in g.iter().zip(m.iter()) {
        let num = gk * mk;
        if num == 0.0 {
            continue;
        }
        let denom = mk * mk - mu;
        if denom <= 0.0 {
            return Err(Error::PoleEvaluation(mu));
        }
        let t = num / denom;
        sum += t * t;
    }
    Ok(sum / g.len() as f64 - 1.0)
}

/// Root of `F` below the pole.
///
/// The lower end of the bracket starts at `pole − 1` and moves down by
/// doubling steps until `F < 0`; the upper end is the pole itself, where `F`
/// diverges, so it is never evaluated. Bisection stops when `|F| ≤ tol`, when
/// the bracket can no longer be split in `f64`, or after `max_iter` halvings.
pub fn solve_mu(g: &DenseVector, m: &DenseVector, tol: f64, max_iter: usize) -> Result<f64> {
    let mu_max = pole(g, m)?;

    let mut step = 1.0;
    let mut lo = mu_max - step;
    let mut doublings = 0;
    while f_mu(lo, g, m)? >= 0.0 {
        doublings += 1;
        if doublings > max_iter {
            return Err(Error::BracketFailure(max_iter));
        }
        step *= 2.0;
        lo = mu_max - step;
    }

    let mut hi = mu_max;
    for _ in 0..max_iter {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = f_mu(mid, g, m)?;
        if f.abs() <= tol {
            return Ok(mid);
        }
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // F(lo) < 0 always holds; hi may still be the pole.
    Ok(lo)
}

fn solution_at(mu: f64, g: &DenseVector, m: &DenseVector) -> DenseVector {
    DenseVector::new(
        g.iter()
            .zip(m.iter())
            .map(|(&gk, &mk)| {
                let num = gk * mk;
                if num == 0.0 {
                    0.0
                } else {
                    num / (mk * mk - mu)
                }
            })
            .collect(),
    )
}

/// `x = C·y` with `y_k = g_k m_k / (m_k² − μ*)`.
pub fn invert_rmsnorm(g: &DenseVector, m: &DenseVector, c: f64, tol: f64) -> Result<DenseVector> {
    let mut problem = InversionProblem::new(g.clone(), m.clone(), c);
    problem.tol = tol;
    Ok(problem.solve()?.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{rms, rmsnorm, Precision, Rng};

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec())
    }

    #[test]
    fn scalar_closed_form() {
        // n=1, g=2, m=1: F(μ) = 4/(1−μ)² − 1, root μ = −1
        let (g, m) = (v(&[2.0]), v(&[1.0]));
        for mu in [-3.0, -1.0, 0.0, 0.5] {
            let expected = 4.0 / (1.0 - mu) * (1.0 / (1.0 - mu)) - 1.0;
            assert!((f_mu(mu, &g, &m).unwrap() - expected).abs() < 1e-15);
        }
        let mu = solve_mu(&g, &m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((mu + 1.0).abs() < 1e-12, "{mu}");
        assert!(f_mu(mu, &g, &m).unwrap().abs() <= DEFAULT_TOL);
    }

    #[test]
    fn far_left_limit_is_minus_one() {
        let g = v(&[0.3, -1.2, 0.8]);
        let m = v(&[1.0, 0.5, 2.0]);
        let f = f_mu(-1e12, &g, &m).unwrap();
        assert!((f + 1.0).abs() < 1e-6);
    }

    #[test]
    fn pole_is_reported() {
        let g = v(&[1.0, 1.0]);
        let m = v(&[1.0, 2.0]);
        assert!(matches!(f_mu(1.0, &g, &m), Err(Error::PoleEvaluation(_))));
        assert!(matches!(f_mu(3.0, &g, &m), Err(Error::PoleEvaluation(_))));
    }

    #[test]
    fn degenerate_problem() {
        let g = v(&[0.0, 1.0]);
        let m = v(&[1.0, 0.0]);
        assert!(matches!(
            solve_mu(&g, &m, DEFAULT_TOL, DEFAULT_MAX_ITER),
            Err(Error::DegenerateProblem)
        ));
    }

    #[test]
    fn unit_scale_has_closed_form_multiplier() {
        // with m = 1 the optimum is y = g/RMS(g), so μ = 1 − RMS(g)
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let g = DenseVector::new(rng.normal_vec(6, 2.0));
            let m = DenseVector::filled(6, 1.0);
            let r = rms(&g, Precision::Float64);
            let mu = solve_mu(&g, &m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            assert!((mu - (1.0 - r)).abs() < 1e-10 * (1.0 + r), "{mu} vs {}", 1.0 - r);
        }
    }

    #[test]
    fn unit_scale_inversion_is_normalized_target() {
        let g = v(&[3.0, 4.0]).scale(2.5, Precision::Float64);
        let x = invert_rmsnorm(&g, &DenseVector::filled(2, 1.0), 1.0, DEFAULT_TOL).unwrap();
        let expected = rmsnorm(&g, 0.0, Precision::Float64).unwrap();
        assert!(x.linf_dist(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn zero_target_component_stays_zero() {
        let g = v(&[0.5, -1.0, 0.0, 2.0]);
        let m = v(&[1.0, 0.7, 3.0, 1.2]);
        let inv = InversionProblem::new(g, m, 2.0).solve().unwrap();
        assert_eq!(inv.x[2], 0.0);
        assert!((rms(&inv.y, Precision::Float64) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sign_changes_around_root() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let g = DenseVector::new(rng.normal_vec(16, 1.0));
            let m = DenseVector::new((0..16).map(|_| rng.uniform_in(0.2, 2.0)).collect());
            let mu = solve_mu(&g, &m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let delta = 1e-6 * (1.0 + mu.abs());
            assert!(f_mu(mu - delta, &g, &m).unwrap() < 0.0);
            let above = mu + delta;
            if above < pole(&g, &m).unwrap() {
                assert!(f_mu(above, &g, &m).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn stationarity_holds_at_solution() {
        let g = v(&[0.4, -2.0, 1.5]);
        let m = v(&[1.1, 0.6, -0.9]);
        let inv = InversionProblem::new(g.clone(), m.clone(), 1.0).solve().unwrap();
        for k in 0..3 {
            let lhs = inv.y[k] * (m[k] * m[k] - inv.mu);
            assert!((lhs - g[k] * m[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn same_problem_same_multiplier() {
        let g = v(&[0.4, -2.0, 1.5, 0.1]);
        let m = v(&[1.1, 0.6, -0.9, 2.0]);
        let a = solve_mu(&g, &m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let b = solve_mu(&g, &m, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn rejects_nonpositive_target_rms() {
        let p = InversionProblem::new(v(&[1.0]), v(&[1.0]), 0.0);
        assert!(matches!(p.solve(), Err(Error::Validation(_))));
    }
}
