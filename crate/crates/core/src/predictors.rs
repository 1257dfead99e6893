//! Path-cost predictors `Ĉ_{i,p}(θ, f)`.
//!
//! Predictors only see the physics through [`TravelTimes`], so they work with
//! any edge-loading model.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::edge_loading::{LoadError, TravelTimes};
use crate::network::{EdgeId, Path};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("prediction time {time} lies outside the computed horizon {horizon}")]
    OutOfHorizon { time: f64, horizon: f64 },
    #[error("perfect prediction escapes the computed horizon {horizon} (exit time {time}); extend the physics or use a composite predictor")]
    HorizonEscape { time: f64, horizon: f64 },
    #[error("predictor returned an invalid cost {0}")]
    InvalidCost(f64),
    #[error(transparent)]
    Load(#[from] LoadError),
}

/// Signature of a user-supplied predictor: `(path, θ, travel times) → cost`.
pub type CustomFn = dyn Fn(&[EdgeId], f64, &dyn TravelTimes) -> Result<f64, PredictError> + Send + Sync;

#[derive(Clone, Default)]
pub enum Predictor {
    /// Sum of current travel times.
    #[default]
    Constant,
    /// Composed exit times minus `θ`.
    Perfect,
    /// Perfect up to `cutoff`, constant-at-cutoff afterwards.
    Composite {
        cutoff: f64,
    },
    Custom(Arc<CustomFn>),
}

impl fmt::Debug for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predictor::Constant => write!(f, "Constant"),
            Predictor::Perfect => write!(f, "Perfect"),
            Predictor::Composite { cutoff } => write!(f, "Composite {{ cutoff: {cutoff} }}"),
            Predictor::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predictor::Constant => write!(f, "constant"),
            Predictor::Perfect => write!(f, "perfect"),
            Predictor::Composite { cutoff } => write!(f, "composite:{cutoff}"),
            Predictor::Custom(_) => write!(f, "custom"),
        }
    }
}

impl FromStr for Predictor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "constant" => Ok(Predictor::Constant),
            None if s == "perfect" => Ok(Predictor::Perfect),
            Some(("composite", c)) => match c.trim().parse::<f64>() {
                Ok(cutoff) if cutoff.is_finite() && cutoff >= 0.0 => Ok(Predictor::Composite { cutoff }),
                _ => Err(format!("composite cutoff must be a nonnegative number, got '{c}'")),
            },
            _ => Err(format!("unknown predictor '{s}' (expected constant, perfect or composite:<cutoff>)")),
        }
    }
}

impl Predictor {
    pub fn custom<F>(f: F) -> Self
    where
        F: Fn(&[EdgeId], f64, &dyn TravelTimes) -> Result<f64, PredictError> + Send + Sync + 'static,
    {
        Predictor::Custom(Arc::new(f))
    }

    pub fn predict(&self, path: &[EdgeId], theta: f64, tt: &dyn TravelTimes) -> Result<f64, PredictError> {
        let cost = match self {
            Predictor::Constant => constant_predict(path, theta, tt)?,
            Predictor::Perfect => perfect_predict(path, theta, tt)?,
            Predictor::Composite { cutoff } => composite_predict(path, theta, tt, *cutoff)?,
            Predictor::Custom(f) => f(path, theta, tt)?,
        };
        if !cost.is_finite() || cost < 0.0 {
            return Err(PredictError::InvalidCost(cost));
        }
        Ok(cost)
    }

    /// Predicted costs of all `paths` at `θ`. The constant predictor reuses
    /// per-edge travel times across paths.
    pub fn path_costs(&self, paths: &[Path], theta: f64, tt: &dyn TravelTimes) -> Result<Vec<f64>, PredictError> {
        if let Predictor::Constant = self {
            check_time(theta, tt)?;
            let mut cache: Vec<(EdgeId, f64)> = Vec::new();
            return paths
                .iter()
                .map(|p| {
                    p.edges.iter().try_fold(0.0, |acc, &e| {
                        let c = match cache.iter().find(|(k, _)| *k == e) {
                            Some(&(_, c)) => c,
                            None => {
                                let c = tt.travel_time(e, theta)?;
                                cache.push((e, c));
                                c
                            }
                        };
                        Ok(acc + c)
                    })
                })
                .collect();
        }
        paths.iter().map(|p| self.predict(&p.edges, theta, tt)).collect()
    }

    /// Whether predictions at `θ` only use physics at `θ`.
    pub fn is_instantaneous(&self) -> bool {
        matches!(self, Predictor::Constant)
    }
}

fn check_time(theta: f64, tt: &dyn TravelTimes) -> Result<(), PredictError> {
    if !(0.0..=tt.horizon()).contains(&theta) {
        return Err(PredictError::OutOfHorizon { time: theta, horizon: tt.horizon() });
    }
    Ok(())
}

/// `Σ_{e∈p} c_e(θ)`.
pub fn constant_predict(path: &[EdgeId], theta: f64, tt: &dyn TravelTimes) -> Result<f64, PredictError> {
    check_time(theta, tt)?;
    path.iter().try_fold(0.0, |acc, &e| Ok(acc + tt.travel_time(e, theta)?))
}

/// `(τ_{e_k} ∘ ⋯ ∘ τ_{e_1})(θ) − θ`; refuses to extrapolate past the horizon.
pub fn perfect_predict(path: &[EdgeId], theta: f64, tt: &dyn TravelTimes) -> Result<f64, PredictError> {
    check_time(theta, tt)?;
    let horizon = tt.horizon();
    let mut t = theta;
    for &e in path {
        if t > horizon {
            return Err(PredictError::HorizonEscape { time: t, horizon });
        }
        t = tt.exit_time(e, t)?;
    }
    Ok(t - theta)
}

/// Perfect composition while exit times stay within the cutoff; the first edge
/// that would leave past it, and every later edge, is costed at its travel
/// time frozen at the cutoff. The cutoff is clamped into `[θ, horizon]`, so the
/// prediction never escapes the horizon.
pub fn composite_predict(path: &[EdgeId], theta: f64, tt: &dyn TravelTimes, cutoff: f64) -> Result<f64, PredictError> {
    check_time(theta, tt)?;
    let frozen = cutoff.min(tt.horizon()).max(theta);
    let mut t = theta;
    let mut rest = path;
    while let Some((&e, tail)) = rest.split_first() {
        let exit = tt.exit_time(e, t)?;
        if exit > frozen {
            break;
        }
        t = exit;
        rest = tail;
    }
    let frozen_cost = rest.iter().try_fold(0.0, |acc, &e| Ok::<_, PredictError>(acc + tt.travel_time(e, frozen)?))?;
    Ok(t - theta + frozen_cost)
}
