//! Piecewise-constant rate functions and their piecewise-linear cumulatives.
//!
//! Every flow quantity in the crate (edge inflow and outflow rates, network
//! inflows, routing split fractions) is a [`RateFunction`]: a right-continuous
//! step function that is zero before its first and after its last breakpoint.
//! Arithmetic on these values is exact up to floating point; approximation only
//! enters in the callers that sample continuous quantities onto a grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used when merging adjacent pieces and clamping tiny
/// negative values produced by cancellation.
pub const CANON_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RateError {
    #[error("non-finite value in rate function piece [{start}, {end}): {value}")]
    NonFinite { start: f64, end: f64, value: f64 },
    #[error("negative rate {value} on [{start}, {end})")]
    Negative { start: f64, end: f64, value: f64 },
    #[error("pieces must be sorted and non-overlapping: [{prev_end}] > {start}")]
    Overlap { prev_end: f64, start: f64 },
    #[error("rate functions live on [0, inf); piece starts at {0}")]
    NegativeTime(f64),
    #[error("value {value} outside the range [0, {max}] of the cumulative function")]
    OutOfRange { value: f64, max: f64 },
    #[error("coefficient list has {coeffs} entries for {fns} functions")]
    LengthMismatch { fns: usize, coeffs: usize },
}

/// Norm selector for [`distance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Norm {
    /// `(∫ |f - g|^p)^(1/p)` for a finite `p >= 1`.
    L(f64),
    /// Essential supremum.
    Sup,
}

impl Norm {
    pub const L1: Norm = Norm::L(1.0);
    pub const L2: Norm = Norm::L(2.0);
}

/// Nonnegative right-continuous step function on `[0, inf)`.
///
/// Piece `k` covers `[breakpoints[k], breakpoints[k + 1])` with value
/// `values[k]`; outside `[breakpoints[0], breakpoints[last])` the function is
/// zero. The representation is kept canonical: no empty pieces, no leading or
/// trailing zero pieces and no two adjacent pieces with equal values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<[f64; 3]>", try_from = "Vec<[f64; 3]>")]
pub struct RateFunction {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl RateFunction {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Constant `rate` on `[start, end)`.
    pub fn constant(start: f64, end: f64, rate: f64) -> Result<Self, RateError> {
        Self::from_pieces(&[(start, end, rate)])
    }

    /// Builds a function from sorted, non-overlapping `(start, end, value)`
    /// pieces. Gaps between pieces are zero.
    pub fn from_pieces(pieces: &[(f64, f64, f64)]) -> Result<Self, RateError> {
        let mut breakpoints = Vec::with_capacity(pieces.len() + 1);
        let mut values = Vec::with_capacity(pieces.len());
        let mut prev_end = 0.0_f64;
        for &(start, end, value) in pieces {
            if !start.is_finite() || end.is_nan() || !value.is_finite() {
                return Err(RateError::NonFinite { start, end, value });
            }
            if start < 0.0 {
                return Err(RateError::NegativeTime(start));
            }
            if value < -CANON_TOL {
                return Err(RateError::Negative { start, end, value });
            }
            if end <= start {
                continue;
            }
            if !end.is_finite() {
                return Err(RateError::NonFinite { start, end, value });
            }
            if start < prev_end {
                return Err(RateError::Overlap { prev_end, start });
            }
            match breakpoints.last() {
                Some(&last) if last == start => {}
                Some(_) => {
                    breakpoints.push(start);
                    values.push(0.0);
                }
                None => breakpoints.push(start),
            }
            values.push(value.max(0.0));
            breakpoints.push(end);
            prev_end = end;
        }
        Ok(Self::canonical(breakpoints, values))
    }

    /// Canonicalizes raw breakpoints/values. `values.len() + 1 == breakpoints.len()`
    /// unless both are empty.
    pub(crate) fn canonical(breakpoints: Vec<f64>, values: Vec<f64>) -> Self {
        debug_assert!((breakpoints.is_empty() && values.is_empty()) || breakpoints.len() == values.len() + 1);
        let mut bps: Vec<f64> = Vec::with_capacity(breakpoints.len());
        let mut vals: Vec<f64> = Vec::with_capacity(values.len());
        for (k, &raw) in values.iter().enumerate() {
            let (start, end) = (breakpoints[k], breakpoints[k + 1]);
            if end - start <= CANON_TOL {
                continue;
            }
            let v = if raw.abs() <= CANON_TOL { 0.0 } else { raw.max(0.0) };
            match (bps.last().copied(), vals.last().copied()) {
                (Some(last_end), Some(last_v)) => {
                    if (start - last_end).abs() > CANON_TOL {
                        // hole between pieces, i.e. a zero piece
                        if last_v == 0.0 {
                            *bps.last_mut().unwrap() = start;
                        } else {
                            bps.push(start);
                            vals.push(0.0);
                        }
                    }
                    if (v - *vals.last().unwrap()).abs() <= CANON_TOL {
                        *bps.last_mut().unwrap() = end;
                    } else {
                        vals.push(v);
                        bps.push(end);
                    }
                }
                _ => {
                    bps.push(start);
                    bps.push(end);
                    vals.push(v);
                }
            }
        }
        // trim zero pieces at both ends
        while vals.first() == Some(&0.0) {
            vals.remove(0);
            bps.remove(0);
        }
        while vals.last() == Some(&0.0) {
            vals.pop();
            bps.pop();
        }
        if vals.is_empty() {
            bps.clear();
        }
        Self { breakpoints: bps, values: vals }
    }

    /// Re-canonicalizes; a no-op on values built through the public API.
    pub fn canonicalized(&self) -> Self {
        Self::canonical(self.breakpoints.clone(), self.values.clone())
    }

    pub fn is_zero(&self) -> bool {
        self.values.is_empty()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(start, end, value)` triples, including interior zero pieces.
    pub fn pieces(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.values.iter().enumerate().map(move |(k, &v)| (self.breakpoints[k], self.breakpoints[k + 1], v))
    }

    /// First and last breakpoint, if any.
    pub fn support(&self) -> Option<(f64, f64)> {
        Some((*self.breakpoints.first()?, *self.breakpoints.last()?))
    }

    /// Right-continuous value at `t`.
    pub fn evaluate(&self, t: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        if idx == 0 || idx >= self.breakpoints.len() {
            0.0
        } else {
            self.values[idx - 1]
        }
    }

    /// Left limit at `t`, i.e. the value on the piece that ends at or covers `t`
    /// from the left.
    pub fn value_before(&self, t: f64) -> f64 {
        let idx = self.breakpoints.partition_point(|&b| b < t);
        if idx == 0 || idx >= self.breakpoints.len() {
            0.0
        } else {
            self.values[idx - 1]
        }
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `∫_a^b f`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        self.pieces()
            .map(|(s, e, v)| {
                let lo = s.max(a);
                let hi = e.min(b);
                if hi > lo {
                    v * (hi - lo)
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.pieces().map(|(s, e, v)| v * (e - s)).sum()
    }

    pub fn cumulative(&self) -> CumulativeFunction {
        cumulative(self)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, RateError> {
        combine(std::slice::from_ref(self), &[factor])
    }

    /// Pointwise product (both factors nonnegative, so no check is needed).
    pub fn product(&self, other: &RateFunction) -> Self {
        let grid = merged_breakpoints(&[self, other]);
        let values = grid.windows(2).map(|w| self.evaluate(w[0]) * other.evaluate(w[0])).collect();
        Self::canonical(grid_or_empty(grid), values)
    }

    /// Keeps `self` on `[0, at)` and `tail` on `[at, inf)`.
    pub fn splice(&self, at: f64, tail: &RateFunction) -> Self {
        let head = restrict(self, 0.0, at);
        let tail = restrict(tail, at, f64::INFINITY);
        combine(&[head, tail], &[1.0, 1.0]).expect("sum of nonnegative functions")
    }
}

impl From<RateFunction> for Vec<[f64; 3]> {
    fn from(f: RateFunction) -> Self {
        f.pieces().map(|(s, e, v)| [s, e, v]).collect()
    }
}

impl TryFrom<Vec<[f64; 3]>> for RateFunction {
    type Error = RateError;

    fn try_from(pieces: Vec<[f64; 3]>) -> Result<Self, Self::Error> {
        let triples: Vec<(f64, f64, f64)> = pieces.iter().map(|p| (p[0], p[1], p[2])).collect();
        RateFunction::from_pieces(&triples)
    }
}

fn grid_or_empty(grid: Vec<f64>) -> Vec<f64> {
    if grid.len() < 2 {
        Vec::new()
    } else {
        grid
    }
}

fn merged_breakpoints(fs: &[&RateFunction]) -> Vec<f64> {
    let mut grid: Vec<f64> = fs.iter().flat_map(|f| f.breakpoints.iter().copied()).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Continuous piecewise-linear function with constant extension outside its
/// breakpoints. Used for queue lengths, edge volumes and exit-time maps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseLinear {
    /// `times` must be nondecreasing; duplicate times are collapsed (the later
    /// value wins).
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(times.len(), values.len(), "times and values differ in length");
        let mut t_out: Vec<f64> = Vec::with_capacity(times.len());
        let mut v_out: Vec<f64> = Vec::with_capacity(values.len());
        for (t, v) in times.into_iter().zip(values) {
            if let Some(&last) = t_out.last() {
                debug_assert!(t >= last, "times must be nondecreasing");
                if t - last <= CANON_TOL {
                    *v_out.last_mut().unwrap() = v;
                    continue;
                }
            }
            t_out.push(t);
            v_out.push(v);
        }
        Self { times: t_out, values: v_out }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        let n = self.times.len();
        if n == 0 {
            return 0.0;
        }
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let k = self.times.partition_point(|&x| x <= t);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Right derivative at `t` (zero outside the breakpoint range).
    pub fn slope_after(&self, t: f64) -> f64 {
        let n = self.times.len();
        if n < 2 || t < self.times[0] || t >= self.times[n - 1] {
            return 0.0;
        }
        let k = self.times.partition_point(|&x| x <= t);
        (self.values[k] - self.values[k - 1]) / (self.times[k] - self.times[k - 1])
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `θ ↦ ∫_0^θ f`, nondecreasing and zero on `(-inf, 0]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CumulativeFunction {
    inner: PiecewiseLinear,
}

impl CumulativeFunction {
    pub fn evaluate(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            self.inner.evaluate(t)
        }
    }

    /// Total mass, `F(inf)`.
    pub fn final_value(&self) -> f64 {
        self.inner.values.last().copied().unwrap_or(0.0)
    }

    pub fn as_piecewise_linear(&self) -> &PiecewiseLinear {
        &self.inner
    }

    pub fn inverse_at(&self, y: f64) -> Result<f64, RateError> {
        inverse_at(self, y)
    }
}

pub fn evaluate(f: &RateFunction, t: f64) -> f64 {
    f.evaluate(t)
}

pub fn cumulative(f: &RateFunction) -> CumulativeFunction {
    let mut times = vec![0.0];
    let mut values = vec![0.0];
    let mut acc = 0.0;
    for (s, e, v) in f.pieces() {
        if *times.last().unwrap() < s {
            times.push(s);
            values.push(acc);
        }
        acc += v * (e - s);
        times.push(e);
        values.push(acc);
    }
    CumulativeFunction { inner: PiecewiseLinear::new(times, values) }
}

/// Smallest `t >= 0` with `F(t) = y`.
pub fn inverse_at(cum: &CumulativeFunction, y: f64) -> Result<f64, RateError> {
    let max = cum.final_value();
    if !(y >= -CANON_TOL && y <= max + CANON_TOL * max.max(1.0)) {
        return Err(RateError::OutOfRange { value: y, max });
    }
    let times = &cum.inner.times;
    let values = &cum.inner.values;
    if y <= 0.0 {
        return Ok(0.0);
    }
    let y = y.min(max);
    let k = values.partition_point(|&v| v < y);
    if k == 0 {
        return Ok(times[0].max(0.0));
    }
    let (t0, t1) = (times[k - 1], times[k]);
    let (v0, v1) = (values[k - 1], values[k]);
    Ok(t0 + (y - v0) / (v1 - v0) * (t1 - t0))
}

/// Exact linear combination `Σ coeffs[k]·fs[k]`; fails if the result dips below
/// `-CANON_TOL` anywhere.
pub fn combine(fs: &[RateFunction], coeffs: &[f64]) -> Result<RateFunction, RateError> {
    if fs.len() != coeffs.len() {
        return Err(RateError::LengthMismatch { fns: fs.len(), coeffs: coeffs.len() });
    }
    let refs: Vec<&RateFunction> = fs.iter().collect();
    let grid = merged_breakpoints(&refs);
    let mut values = Vec::with_capacity(grid.len().saturating_sub(1));
    // one cursor per function; grid is a superset of every function's breakpoints
    let mut cursors = vec![0usize; fs.len()];
    for w in grid.windows(2) {
        let t = w[0];
        let mut acc = 0.0;
        for (k, f) in fs.iter().enumerate() {
            let bps = &f.breakpoints;
            while cursors[k] < bps.len() && bps[cursors[k]] <= t {
                cursors[k] += 1;
            }
            let idx = cursors[k];
            if idx > 0 && idx < bps.len() {
                acc += coeffs[k] * f.values[idx - 1];
            }
        }
        if acc < -CANON_TOL {
            return Err(RateError::Negative { start: w[0], end: w[1], value: acc });
        }
        values.push(acc);
    }
    Ok(RateFunction::canonical(grid_or_empty(grid), values))
}

/// Signed difference `f - g` as raw `(start, end, value)` pieces.
fn signed_difference(f: &RateFunction, g: &RateFunction) -> Vec<(f64, f64, f64)> {
    let grid = merged_breakpoints(&[f, g]);
    grid.windows(2).map(|w| (w[0], w[1], f.evaluate(w[0]) - g.evaluate(w[0]))).collect()
}

/// `‖f - g‖` restricted to `[a, b]`.
pub fn distance(f: &RateFunction, g: &RateFunction, a: f64, b: f64, norm: Norm) -> f64 {
    let diff = signed_difference(f, g);
    let clipped = diff.into_iter().filter_map(|(s, e, v)| {
        let lo = s.max(a);
        let hi = e.min(b);
        (hi > lo).then_some((hi - lo, v.abs()))
    });
    match norm {
        Norm::Sup => clipped.map(|(_, v)| v).fold(0.0, f64::max),
        Norm::L(1.0) => clipped.map(|(len, v)| len * v).fold(0.0, |acc, x| acc + x),
        Norm::L(p) => clipped.map(|(len, v)| len * v.powf(p)).fold(0.0, |acc, x| acc + x).powf(1.0 / p),
    }
}

/// `p`-th power of the `L^p` distance; summing these over components gives the
/// product-space norm.
pub fn distance_pow(f: &RateFunction, g: &RateFunction, a: f64, b: f64, p: f64) -> f64 {
    signed_difference(f, g)
        .into_iter()
        .map(|(s, e, v)| {
            let len = (e.min(b) - s.max(a)).max(0.0);
            len * v.abs().powf(p)
        })
        .sum()
}

/// `1_[a,b) · f`.
pub fn restrict(f: &RateFunction, a: f64, b: f64) -> RateFunction {
    if b <= a {
        return RateFunction::zero();
    }
    let mut bps = Vec::new();
    let mut vals = Vec::new();
    for (s, e, v) in f.pieces() {
        let lo = s.max(a);
        let hi = e.min(b);
        if hi > lo {
            if bps.last() != Some(&lo) {
                if !bps.is_empty() {
                    bps.push(lo);
                    vals.push(0.0);
                } else {
                    bps.push(lo);
                }
            }
            vals.push(v);
            bps.push(hi);
        }
    }
    RateFunction::canonical(bps, vals)
}
