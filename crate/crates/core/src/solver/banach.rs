//! Generic fixed-point iteration and the adaptive step-size controller.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BanachOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Declare divergence when the residual has not reached a new minimum for
    /// this many iterations.
    pub stall_window: usize,
    /// Residuals above this (or non-finite) count as divergence.
    pub blowup: f64,
}

impl Default for BanachOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 200, stall_window: 50, blowup: 1e12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BanachStatus {
    Converged,
    Diverged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct BanachOutcome<X> {
    /// Last iterate.
    pub value: X,
    pub status: BanachStatus,
    /// `‖x_{k+1} − x_k‖` per iteration.
    pub residuals: Vec<f64>,
}

impl<X> BanachOutcome<X> {
    pub fn iterations(&self) -> usize {
        self.residuals.len()
    }

    pub fn converged(&self) -> bool {
        self.status == BanachStatus::Converged
    }
}

/// Iterates `x_{k+1} = op(x_k)` until `dist(x_{k+1}, x_k) < tol`.
///
/// Errors from `op` are passed through unchanged. Residual increases after
/// the residual first dropped below `10·tol` are logged as warnings; they mean
/// the map is not contracting on the chosen interval.
pub fn banach_iterate<X, E>(
    mut op: impl FnMut(&X) -> Result<X, E>,
    dist: impl Fn(&X, &X) -> f64,
    initial: X,
    opts: &BanachOptions,
) -> Result<BanachOutcome<X>, E> {
    let mut x = initial;
    let mut residuals = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    let mut near = false;
    for k in 0..opts.max_iter {
        let next = op(&x)?;
        let r = dist(&next, &x);
        x = next;
        if near && residuals.last().is_some_and(|&prev| r > prev) {
            log::warn!("fixed-point residual increased from {:e} to {r:e} near convergence", residuals.last().unwrap());
        }
        residuals.push(r);
        if !r.is_finite() || r > opts.blowup {
            return Ok(BanachOutcome { value: x, status: BanachStatus::Diverged, residuals });
        }
        if r < opts.tol {
            return Ok(BanachOutcome { value: x, status: BanachStatus::Converged, residuals });
        }
        near |= r < 10.0 * opts.tol;
        if r < best {
            best = r;
            best_at = k;
        } else if k - best_at >= opts.stall_window {
            return Ok(BanachOutcome { value: x, status: BanachStatus::Diverged, residuals });
        }
    }
    Ok(BanachOutcome { value: x, status: BanachStatus::MaxIterations, residuals })
}

/// The step size fell below its minimum.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("step size would drop below the minimum {alpha_min}")]
pub struct StepRejected {
    pub alpha_min: f64,
}

/// Adaptive extension length: halve on failure, grow after success.
#[derive(Debug, Clone, PartialEq)]
pub struct StepController {
    alpha: f64,
    alpha0: f64,
    alpha_min: f64,
    growth: f64,
}

impl StepController {
    pub fn new(alpha0: f64, alpha_min: f64, growth: f64) -> Self {
        Self { alpha: alpha0, alpha0, alpha_min, growth }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn accept(&mut self) {
        self.alpha = (self.alpha * self.growth).min(self.alpha0);
    }

    /// Halves the step, trying `alpha_min` itself once before giving up.
    pub fn reject(&mut self) -> Result<f64, StepRejected> {
        if self.alpha <= self.alpha_min {
            return Err(StepRejected { alpha_min: self.alpha_min });
        }
        self.alpha = (0.5 * self.alpha).max(self.alpha_min);
        Ok(self.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[allow(clippy::ptr_arg)] // metric over the iterate type
    fn sup(a: &Vec<f64>, b: &Vec<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_converges_immediately() {
        let x0 = vec![3.0, -1.0];
        let out =
            banach_iterate(|x: &Vec<f64>| Ok::<_, ()>(x.clone()), sup, x0.clone(), &BanachOptions::default()).unwrap();
        assert_eq!(out.value, x0);
        assert_eq!(out.residuals, vec![0.0]);
        assert!(out.converged());
    }

    #[test]
    fn linear_contraction_decays_geometrically() {
        let half = |x: &Vec<f64>| Ok::<_, ()>(x.iter().map(|v| 0.5 * v).collect());
        let out = banach_iterate(half, sup, vec![1.0; 11], &BanachOptions::default()).unwrap();
        assert!(out.converged());
        assert!(out.value.iter().all(|v| v.abs() < 1e-9));
        for w in out.residuals.windows(2) {
            assert_eq!(w[1], 0.5 * w[0]);
        }
    }

    #[test]
    fn pointwise_affine_map_on_short_interval() {
        let ts: Vec<f64> = (0..=100).map(|k| 0.5 * k as f64 / 100.0).collect();
        let psi = |x: &Vec<f64>| Ok::<_, ()>(ts.iter().zip(x).map(|(t, v)| t * v + 1.0).collect());
        let opts = BanachOptions { tol: 1e-12, ..Default::default() };
        let out = banach_iterate(psi, sup, vec![0.0; ts.len()], &opts).unwrap();
        assert!(out.converged());
        let err = ts.iter().zip(&out.value).map(|(t, v)| (v - 1.0 / (1.0 - t)).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn non_contraction_is_flagged() {
        let psi = |x: &Vec<f64>| Ok::<_, ()>(vec![x[0] + 1.0]);
        let out =
            banach_iterate(psi, sup, vec![0.0], &BanachOptions { stall_window: 5, ..Default::default() }).unwrap();
        assert_eq!(out.status, BanachStatus::Diverged);
        assert_eq!(out.iterations(), 6);
        let blow = |x: &Vec<f64>| Ok::<_, ()>(vec![2.0 * x[0] + 1.0]);
        let out = banach_iterate(blow, sup, vec![0.0], &BanachOptions::default()).unwrap();
        assert_eq!(out.status, BanachStatus::Diverged);
    }

    #[test]
    fn controller_halves_grows_and_gives_up() {
        let mut c = StepController::new(1.0, 0.3, 1.5);
        assert_eq!(c.reject(), Ok(0.5));
        c.accept();
        assert_eq!(c.alpha(), 0.75);
        c.accept();
        assert_eq!(c.alpha(), 1.0);
        assert_eq!(c.reject(), Ok(0.5));
        assert_eq!(c.reject(), Ok(0.3));
        assert!(c.reject().is_err());
    }
}
