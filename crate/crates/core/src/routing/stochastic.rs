//! Stochastic prediction routing with noisy edge costs.
//!
//! Every particle perceives path costs `Ĉ_p(θ) + Σ_{e∈p} ε_{e,i}` with
//! independent per-edge noise. `π_{v,M,i}` is the probability that `M` is the
//! set of first edges of perceived-cheapest paths, estimated by Monte Carlo
//! with seeds derived from `(seed, v, i, θ)` so results do not depend on
//! thread count or evaluation order.

use std::fmt;
use std::str::FromStr;

use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::{check_degree, RoutingError};
use crate::edge_loading::TravelTimes;
use crate::network::{CommodityId, EdgeId, Network, NodeId, Path, PathSet};
use crate::par::{self, Exec};
use crate::predictors::Predictor;

pub const DEFAULT_SAMPLES: usize = 20_000;
/// Perceived costs within this distance of the minimum count as ties.
const SAMPLE_TIE_TOL: f64 = 1e-12;
const CHUNK: usize = 2048;

/// Distribution of one noise term `ε_{e,i}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseDist {
    Gaussian { sigma: f64 },
    Uniform { low: f64, high: f64 },
    Degenerate,
}

impl NoiseDist {
    pub fn validate(&self) -> Result<(), RoutingError> {
        match *self {
            NoiseDist::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(RoutingError::InvalidNoise(format!("gaussian sigma must be positive, got {sigma}")))
            }
            NoiseDist::Uniform { low, high } if !(high > low && low.is_finite() && high.is_finite()) => {
                Err(RoutingError::InvalidNoise(format!("uniform bounds need a < b, got ({low}, {high})")))
            }
            _ => Ok(()),
        }
    }

    /// Essential supremum of the density.
    pub fn density_bound(&self) -> f64 {
        match *self {
            NoiseDist::Gaussian { sigma } => 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt()),
            NoiseDist::Uniform { low, high } => 1.0 / (high - low),
            NoiseDist::Degenerate => f64::INFINITY,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, NoiseDist::Degenerate)
    }
}

impl fmt::Display for NoiseDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseDist::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            NoiseDist::Uniform { low, high } => write!(f, "uniform:{low},{high}"),
            NoiseDist::Degenerate => write!(f, "none"),
        }
    }
}

impl FromStr for NoiseDist {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("bad number '{x}' in noise spec: {e}"));
        let dist = match s.split_once(':') {
            Some(("gaussian", sigma)) => NoiseDist::Gaussian { sigma: num(sigma)? },
            Some(("uniform", bounds)) => {
                let (a, b) = bounds.split_once(',').ok_or("uniform noise expects 'uniform:<a>,<b>'")?;
                NoiseDist::Uniform { low: num(a)?, high: num(b)? }
            }
            None if s == "none" => NoiseDist::Degenerate,
            _ => return Err(format!("unknown noise spec '{s}' (expected gaussian:<sigma> or uniform:<a>,<b>)")),
        };
        dist.validate().map_err(|e| e.to_string())?;
        Ok(dist)
    }
}

enum Sampler {
    Normal(Normal<f64>),
    Uniform(Uniform<f64>),
    Zero,
}

impl Sampler {
    fn new(dist: NoiseDist) -> Self {
        match dist {
            NoiseDist::Gaussian { sigma } => Sampler::Normal(Normal::new(0.0, sigma).expect("validated sigma")),
            NoiseDist::Uniform { low, high } => Sampler::Uniform(Uniform::new(low, high).expect("validated bounds")),
            NoiseDist::Degenerate => Sampler::Zero,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Sampler::Normal(d) => rng.sample(d),
            Sampler::Uniform(d) => rng.sample(d),
            Sampler::Zero => 0.0,
        }
    }
}

/// Independent noise per (edge, commodity).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    commodities: usize,
    dists: Vec<NoiseDist>,
}

impl NoiseModel {
    /// The same distribution on every edge and commodity.
    pub fn iid(dist: NoiseDist, net: &Network) -> Result<Self, RoutingError> {
        Self::per_component(vec![dist; net.edge_count() * net.commodity_count()], net.commodity_count())
    }

    /// Explicit distributions, edge-major like flows.
    pub fn per_component(dists: Vec<NoiseDist>, commodities: usize) -> Result<Self, RoutingError> {
        dists.iter().try_for_each(NoiseDist::validate)?;
        Ok(Self { commodities, dists })
    }

    pub fn fits(&self, net: &Network) -> bool {
        self.commodities == net.commodity_count() && self.dists.len() == net.edge_count() * net.commodity_count()
    }

    pub fn dist(&self, e: EdgeId, i: CommodityId) -> NoiseDist {
        self.dists[e * self.commodities + i]
    }

    /// Bound `B` on all noise densities.
    pub fn density_bound(&self) -> f64 {
        self.dists.iter().map(NoiseDist::density_bound).fold(0.0, f64::max)
    }
}

/// Estimated `π_{v,M,i}` for all `M ⊆ δ⁺(v)`, indexed by local bitmask.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSetProbabilities {
    pub node: NodeId,
    pub commodity: CommodityId,
    pub theta: f64,
    pub out_edges: Vec<EdgeId>,
    pub probs: Vec<f64>,
    pub samples: usize,
    /// Binomial standard error of each entry of `probs`.
    pub std_errors: Vec<f64>,
}

impl ActiveSetProbabilities {
    /// Builds a table from explicit `(subset, probability)` pairs.
    pub fn from_subsets(out_edges: Vec<EdgeId>, entries: &[(&[EdgeId], f64)]) -> Result<Self, RoutingError> {
        let d = out_edges.len();
        if d > super::MAX_DEGREE {
            return Err(RoutingError::DegreeTooLarge { node: 0, degree: d });
        }
        let mut probs = vec![0.0; 1 << d];
        for (subset, p) in entries {
            let mask = subset.iter().try_fold(0u32, |m, e| {
                let k = out_edges.iter().position(|x| x == e).ok_or(RoutingError::NotOutgoing { edge: *e, node: 0 })?;
                Ok::<_, RoutingError>(m | 1 << k)
            })?;
            if mask == 0 && *p != 0.0 {
                return Err(RoutingError::InvalidProbabilities("the empty set must have probability 0".into()));
            }
            if !(*p >= 0.0) {
                return Err(RoutingError::InvalidProbabilities(format!("negative probability {p}")));
            }
            probs[mask as usize] += p;
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(RoutingError::InvalidProbabilities(format!("probabilities sum to {total}")));
        }
        let std_errors = vec![0.0; probs.len()];
        Ok(Self { node: 0, commodity: 0, theta: 0.0, out_edges, probs, samples: 0, std_errors })
    }

    pub fn degree(&self) -> usize {
        self.out_edges.len()
    }

    pub fn pi(&self, mask: u32) -> f64 {
        self.probs[mask as usize]
    }

    /// Local mask of `edges`.
    pub fn mask_of(&self, edges: &[EdgeId]) -> Result<u32, RoutingError> {
        edges.iter().try_fold(0u32, |m, &e| {
            let k = self
                .out_edges
                .iter()
                .position(|&x| x == e)
                .ok_or(RoutingError::NotOutgoing { edge: e, node: self.node })?;
            Ok(m | 1 << k)
        })
    }

    /// `ρ(M) = Σ_{M' ⊆ M} π(M')` for a local mask.
    pub fn rho_mask(&self, mask: u32) -> f64 {
        // enumerate nonempty submasks
        let mut sum = 0.0;
        let mut sub = mask;
        while sub != 0 {
            sum += self.probs[sub as usize];
            sub = (sub - 1) & mask;
        }
        sum
    }
}

/// `ρ_{v,M,i}`; errors if `M` is not a subset of `δ⁺(v)`.
pub fn rho(pi: &ActiveSetProbabilities, subset: &[EdgeId]) -> Result<f64, RoutingError> {
    Ok(pi.rho_mask(pi.mask_of(subset)?))
}

/// Prescriptive split: singleton mass plus tie mass shared uniformly.
pub fn stochastic_split(pi: &ActiveSetProbabilities) -> Vec<f64> {
    let d = pi.degree();
    let mut r = vec![0.0; d];
    for (mask, &p) in pi.probs.iter().enumerate().skip(1) {
        if p == 0.0 {
            continue;
        }
        let share = p / (mask as u32).count_ones() as f64;
        for (k, rk) in r.iter_mut().enumerate() {
            if mask >> k & 1 == 1 {
                *rk += share;
            }
        }
    }
    r
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn query_seed(seed: u64, v: NodeId, i: CommodityId, theta: f64, chunk: usize) -> u64 {
    [v as u64, i as u64, theta.to_bits(), chunk as u64].iter().fold(splitmix(seed), |h, &x| splitmix(h ^ x))
}

/// Monte-Carlo estimate of `π_{v,·,i}(θ)` with the given predictor and noise.
#[allow(clippy::too_many_arguments)]
pub fn estimate_pi(
    net: &Network,
    paths: &PathSet,
    predictor: &Predictor,
    state: &dyn TravelTimes,
    noise: &NoiseModel,
    v: NodeId,
    i: CommodityId,
    theta: f64,
    samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<ActiveSetProbabilities, RoutingError> {
    if samples == 0 {
        return Err(RoutingError::ZeroSamples);
    }
    check_degree(net, v)?;
    let ps = paths.paths(v, i);
    if ps.is_empty() {
        return Err(RoutingError::NoPath { node: v, commodity: i });
    }
    let base = predictor.path_costs(ps, theta, state)?;
    estimate_pi_from_costs(net, ps, &base, noise, v, i, theta, samples, seed, exec)
}

/// As [`estimate_pi`], with the base path costs already computed.
#[allow(clippy::too_many_arguments)]
pub fn estimate_pi_from_costs(
    net: &Network,
    paths: &[Path],
    base: &[f64],
    noise: &NoiseModel,
    v: NodeId,
    i: CommodityId,
    theta: f64,
    samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<ActiveSetProbabilities, RoutingError> {
    if samples == 0 {
        return Err(RoutingError::ZeroSamples);
    }
    let d = check_degree(net, v)?;
    let out_edges = net.out_edges(v).to_vec();
    let first: Vec<u32> = paths
        .iter()
        .map(|p| 1 << out_edges.iter().position(|&e| e == p.first_edge()).expect("path leaves v"))
        .collect();

    // noise terms are only needed on edges some path uses
    let mut used: Vec<EdgeId> = paths.iter().flat_map(|p| p.edges.iter().copied()).collect();
    used.sort_unstable();
    used.dedup();
    let samplers: Vec<Sampler> = used.iter().map(|&e| Sampler::new(noise.dist(e, i))).collect();
    let path_terms: Vec<Vec<usize>> =
        paths.iter().map(|p| p.edges.iter().map(|e| used.binary_search(e).unwrap()).collect()).collect();

    let perceived = |costs: &[f64]| -> u32 {
        let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
        costs.iter().zip(&first).filter(|(&c, _)| c <= best + SAMPLE_TIE_TOL).fold(0, |m, (_, &b)| m | b)
    };

    let mut counts = vec![0u64; 1 << d];
    if d == 1 || used.iter().all(|&e| noise.dist(e, i).is_degenerate()) {
        counts[perceived(base) as usize] = samples as u64;
    } else {
        let chunks = samples.div_ceil(CHUNK);
        let partial = par::map_range(exec, chunks, |c| {
            let mut rng = ChaCha8Rng::seed_from_u64(query_seed(seed, v, i, theta, c));
            let n = CHUNK.min(samples - c * CHUNK);
            let mut local = vec![0u64; 1 << d];
            let mut eps = vec![0.0; samplers.len()];
            let mut costs = vec![0.0; paths.len()];
            for _ in 0..n {
                for (x, s) in eps.iter_mut().zip(&samplers) {
                    *x = s.sample(&mut rng);
                }
                for ((c, terms), b) in costs.iter_mut().zip(&path_terms).zip(base) {
                    *c = b + terms.iter().map(|&k| eps[k]).sum::<f64>();
                }
                local[perceived(&costs) as usize] += 1;
            }
            local
        });
        for local in partial {
            for (c, l) in counts.iter_mut().zip(local) {
                *c += l;
            }
        }
    }
    let n = samples as f64;
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let std_errors = probs.iter().map(|&p| (p * (1.0 - p) / n).sqrt()).collect();
    Ok(ActiveSetProbabilities { node: v, commodity: i, theta, out_edges, probs, samples, std_errors })
}
