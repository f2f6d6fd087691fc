//! Batch-forming schemes and exhaustive enumeration of their outcome spaces.
//!
//! Each scheme turns the per-outcome fields `H(x, l)` into one averaged
//! tangent vector per iteration:
//!
//! * segment with repetition: `b_t` i.i.d. draws from `mu`, equal weights `1/b_t`;
//! * uniform without repetition: a uniformly random `b_t`-subset, weights `1/b_t`
//!   (requires uniform `mu`);
//! * stratified: `b_j` i.i.d. draws from each stratum under the conditional
//!   measure, each with weight `mu(stratum_j) / b_j`.
//!
//! Draws at iteration `t` use a ChaCha8 stream selected by `t`, so a run is
//! reproducible from its seed regardless of evaluation order.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{Point, TangentVector};
use crate::problems::{FiniteSampleSpace, GradientOracle};

/// Default cap on the number of outcomes visited by exhaustive enumeration.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 1_000_000;

/// The RNG used for the draw at iteration `t` of a run seeded with `seed`.
pub fn draw_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// Per-iteration batch sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatchSizes {
    Constant {
        size: usize,
    },
    /// `min(cap, ceil(initial * factor^t))`, with `cap` defaulting to `N`.
    Geometric {
        initial: usize,
        factor: f64,
        cap: Option<usize>,
    },
    /// Explicit sizes; iterations past the end reuse the last entry.
    Explicit {
        sizes: Vec<usize>,
    },
}

impl BatchSizes {
    pub fn constant(size: usize) -> Self {
        BatchSizes::Constant { size }
    }

    /// Batch sizes `S_{t+1} - S_t` from segment cut points `0 = S_0 < S_1 < ...`.
    pub fn from_cut_points(cuts: &[usize]) -> Result<Self> {
        if cuts.len() < 2 || cuts[0] != 0 {
            return Err(Error::InvalidPlan("cut points must start at 0 and have >= 2 entries".into()));
        }
        if cuts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPlan("cut points must be strictly increasing".into()));
        }
        Ok(BatchSizes::Explicit { sizes: cuts.windows(2).map(|w| w[1] - w[0]).collect() })
    }

    pub fn size_at(&self, t: usize, n: usize) -> usize {
        match self {
            BatchSizes::Constant { size } => *size,
            BatchSizes::Geometric { initial, factor, cap } => {
                let cap = cap.unwrap_or(n);
                let grown = (*initial as f64) * factor.powf(t as f64);
                if !grown.is_finite() || grown >= cap as f64 {
                    cap
                } else {
                    (grown.ceil() as usize).clamp(1, cap)
                }
            }
            BatchSizes::Explicit { sizes } => sizes[t.min(sizes.len() - 1)],
        }
    }

    /// Cut points `S_0, .., S_horizon` implied by the sizes.
    pub fn cut_points(&self, horizon: usize, n: usize) -> Vec<usize> {
        let mut cuts = Vec::with_capacity(horizon + 1);
        let mut s = 0;
        cuts.push(s);
        for t in 0..horizon {
            s += self.size_at(t, n);
            cuts.push(s);
        }
        cuts
    }

    fn validate(&self, n: usize, max: Option<usize>) -> Result<()> {
        let check = |b: usize| -> Result<()> {
            if b == 0 {
                return Err(Error::InvalidPlan("batch size must be >= 1".into()));
            }
            if let Some(m) = max {
                if b > m {
                    return Err(Error::InvalidPlan(format!("batch size {b} exceeds N = {m}")));
                }
            }
            Ok(())
        };
        match self {
            BatchSizes::Constant { size } => check(*size),
            BatchSizes::Geometric { initial, factor, cap } => {
                if !(factor.is_finite() && *factor >= 1.0) {
                    return Err(Error::InvalidPlan("geometric growth factor must be >= 1".into()));
                }
                check(*initial)?;
                check(cap.unwrap_or(n))
            }
            BatchSizes::Explicit { sizes } => {
                if sizes.is_empty() {
                    return Err(Error::InvalidPlan("explicit batch sizes must be non-empty".into()));
                }
                sizes.iter().try_for_each(|&b| check(b))
            }
        }
    }
}

/// A partition of the outcomes into strata with per-stratum draw counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub groups: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
}

impl Strata {
    pub fn new(groups: Vec<Vec<usize>>, counts: Vec<usize>) -> Self {
        Self { groups, counts }
    }

    /// Singleton strata with one draw each; degenerates to the full batch.
    pub fn singletons(n: usize) -> Self {
        Self { groups: (0..n).map(|l| vec![l]).collect(), counts: vec![1; n] }
    }

    /// Consecutive blocks of (nearly) equal size with `count` draws per block.
    pub fn contiguous(n: usize, blocks: usize, count: usize) -> Self {
        let groups = (0..blocks).map(|j| (j * n / blocks..(j + 1) * n / blocks).collect()).collect();
        Self { groups, counts: vec![count; blocks] }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.groups.is_empty() || self.groups.len() != self.counts.len() {
            return Err(Error::InvalidPlan("strata and per-stratum counts must have equal, positive length".into()));
        }
        let mut seen = vec![false; n];
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::InvalidPlan("empty stratum".into()));
            }
            for &l in g {
                if l >= n {
                    return Err(Error::InvalidPlan(format!("stratum outcome {l} out of range for N = {n}")));
                }
                if std::mem::replace(&mut seen[l], true) {
                    return Err(Error::InvalidPlan(format!("outcome {l} appears in two strata")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidPlan("strata do not cover every outcome".into()));
        }
        if self.counts.contains(&0) {
            return Err(Error::InvalidPlan("per-stratum counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_count(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    SegmentWithRepetition,
    UniformNoRepetition,
    Stratified,
}

/// A batch-forming rule over all iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum BatchPlan {
    SegmentWithRepetition {
        sizes: BatchSizes,
    },
    UniformNoRepetition {
        sizes: BatchSizes,
    },
    /// Fixed strata with optional per-iteration replacements.
    Stratified {
        strata: Strata,
        overrides: BTreeMap<usize, Strata>,
    },
}

impl BatchPlan {
    pub fn segment(size: usize) -> Self {
        BatchPlan::SegmentWithRepetition { sizes: BatchSizes::constant(size) }
    }

    pub fn no_repetition(size: usize) -> Self {
        BatchPlan::UniformNoRepetition { sizes: BatchSizes::constant(size) }
    }

    pub fn stratified(strata: Strata) -> Self {
        BatchPlan::Stratified { strata, overrides: BTreeMap::new() }
    }

    pub fn kind(&self) -> SchemeKind {
        match self {
            BatchPlan::SegmentWithRepetition { .. } => SchemeKind::SegmentWithRepetition,
            BatchPlan::UniformNoRepetition { .. } => SchemeKind::UniformNoRepetition,
            BatchPlan::Stratified { .. } => SchemeKind::Stratified,
        }
    }

    pub fn validate(&self, space: &FiniteSampleSpace) -> Result<()> {
        let n = space.size();
        match self {
            BatchPlan::SegmentWithRepetition { sizes } => sizes.validate(n, None),
            BatchPlan::UniformNoRepetition { sizes } => {
                if !space.is_uniform() {
                    return Err(Error::InvalidPlan(
                        "sampling without repetition requires uniform outcome weights".into(),
                    ));
                }
                sizes.validate(n, Some(n))
            }
            BatchPlan::Stratified { strata, overrides } => {
                strata.validate(n)?;
                overrides.values().try_for_each(|s| s.validate(n))
            }
        }
    }

    pub fn strata_at(&self, t: usize) -> Option<&Strata> {
        match self {
            BatchPlan::Stratified { strata, overrides } => Some(overrides.get(&t).unwrap_or(strata)),
            _ => None,
        }
    }

    /// Number of outcomes averaged at iteration `t`.
    pub fn batch_size(&self, t: usize, n: usize) -> usize {
        match self {
            BatchPlan::SegmentWithRepetition { sizes } | BatchPlan::UniformNoRepetition { sizes } => {
                sizes.size_at(t, n)
            }
            BatchPlan::Stratified { .. } => self.strata_at(t).map(Strata::total_count).unwrap_or(0),
        }
    }

    /// Draws the batch for iteration `t` of a run seeded with `seed`.
    pub fn draw(&self, space: &FiniteSampleSpace, t: usize, seed: u64) -> Result<BatchDraw> {
        BatchSampler::new(self, space)?.draw(t, &mut draw_rng(seed, t))
    }

    /// Size of the outcome space at iteration `t`, saturating at `u128::MAX`.
    pub fn outcome_count(&self, space: &FiniteSampleSpace, t: usize) -> u128 {
        let n = space.size() as u128;
        match self {
            BatchPlan::SegmentWithRepetition { .. } => {
                checked_pow(n, self.batch_size(t, space.size())).unwrap_or(u128::MAX)
            }
            BatchPlan::UniformNoRepetition { .. } => binomial(n, self.batch_size(t, space.size()) as u128),
            BatchPlan::Stratified { .. } => {
                let s = self.strata_at(t).expect("stratified plan");
                s.groups
                    .iter()
                    .zip(&s.counts)
                    .try_fold(1u128, |acc, (g, &c)| checked_pow(g.len() as u128, c).and_then(|p| acc.checked_mul(p)))
                    .unwrap_or(u128::MAX)
            }
        }
    }

    /// Visits every outcome of the scheme at iteration `t` as
    /// `(outcomes, weights, probability)`.
    pub fn for_each_outcome<F>(&self, space: &FiniteSampleSpace, t: usize, budget: u128, mut visit: F) -> Result<()>
    where
        F: FnMut(&[usize], &[f64], f64),
    {
        self.validate(space)?;
        let count = self.outcome_count(space, t);
        if count > budget {
            return Err(Error::EnumerationBudgetExceeded { count, budget });
        }
        let n = space.size();
        match self {
            BatchPlan::SegmentWithRepetition { .. } => {
                let b = self.batch_size(t, n);
                let slots: Vec<Slot> = (0..b)
                    .map(|_| Slot {
                        candidates: (0..n).collect(),
                        probs: space.weights().to_vec(),
                        weight: 1.0 / b as f64,
                    })
                    .collect();
                enumerate_product(&slots, &mut visit);
            }
            BatchPlan::UniformNoRepetition { .. } => {
                let b = self.batch_size(t, n);
                let prob = 1.0 / binomial(n as u128, b as u128) as f64;
                let weights = vec![1.0 / b as f64; b];
                let mut comb: Vec<usize> = (0..b).collect();
                loop {
                    visit(&comb, &weights, prob);
                    // advance to the next combination in lexicographic order
                    let mut i = b;
                    while i > 0 && comb[i - 1] == n - b + i - 1 {
                        i -= 1;
                    }
                    if i == 0 {
                        break;
                    }
                    comb[i - 1] += 1;
                    for k in i..b {
                        comb[k] = comb[k - 1] + 1;
                    }
                }
            }
            BatchPlan::Stratified { .. } => {
                let s = self.strata_at(t).expect("stratified plan");
                let mut slots = Vec::new();
                for (g, &c) in s.groups.iter().zip(&s.counts) {
                    let mass = space.measure(g);
                    for _ in 0..c {
                        slots.push(Slot {
                            candidates: g.clone(),
                            probs: g.iter().map(|&l| space.weight(l) / mass).collect(),
                            weight: mass / c as f64,
                        });
                    }
                }
                enumerate_product(&slots, &mut visit);
            }
        }
        Ok(())
    }
}

struct Slot {
    candidates: Vec<usize>,
    probs: Vec<f64>,
    weight: f64,
}

fn enumerate_product<F: FnMut(&[usize], &[f64], f64)>(slots: &[Slot], visit: &mut F) {
    let k = slots.len();
    let weights: Vec<f64> = slots.iter().map(|s| s.weight).collect();
    let mut idx = vec![0usize; k];
    let mut outcomes: Vec<usize> = slots.iter().map(|s| s.candidates[0]).collect();
    loop {
        let prob: f64 = slots.iter().zip(&idx).map(|(s, &i)| s.probs[i]).product();
        visit(&outcomes, &weights, prob);
        let mut pos = k;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < slots[pos].candidates.len() {
                outcomes[pos] = slots[pos].candidates[idx[pos]];
                break;
            }
            idx[pos] = 0;
            outcomes[pos] = slots[pos].candidates[0];
        }
    }
}

fn checked_pow(base: u128, exp: usize) -> Option<u128> {
    (0..exp).try_fold(1u128, |acc, _| acc.checked_mul(base))
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = match c.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    c
}

/// One realized batch: outcome indices and their averaging weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchDraw {
    pub t: usize,
    pub outcomes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl BatchDraw {
    pub fn size(&self) -> usize {
        self.outcomes.len()
    }
}

enum OutcomeSampler {
    Uniform(usize),
    Weighted(WeightedIndex<f64>),
}

impl OutcomeSampler {
    fn new(weights: &[f64]) -> Self {
        let first = weights[0];
        if weights.iter().all(|&w| w == first) {
            OutcomeSampler::Uniform(weights.len())
        } else {
            OutcomeSampler::Weighted(WeightedIndex::new(weights).expect("positive weights"))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            OutcomeSampler::Uniform(n) => rng.random_range(0..*n),
            OutcomeSampler::Weighted(w) => w.sample(rng),
        }
    }
}

struct StratumSampler {
    members: Vec<usize>,
    sampler: OutcomeSampler,
    count: usize,
    weight: f64,
}

fn stratum_samplers(strata: &Strata, space: &FiniteSampleSpace) -> Vec<StratumSampler> {
    strata
        .groups
        .iter()
        .zip(&strata.counts)
        .map(|(g, &c)| {
            let local: Vec<f64> = g.iter().map(|&l| space.weight(l)).collect();
            StratumSampler {
                members: g.clone(),
                sampler: OutcomeSampler::new(&local),
                count: c,
                weight: space.measure(g) / c as f64,
            }
        })
        .collect()
}

/// A plan bound to a sample space with precomputed samplers.
pub struct BatchSampler<'a> {
    plan: &'a BatchPlan,
    n: usize,
    outcomes: OutcomeSampler,
    strata: Vec<StratumSampler>,
    overrides: BTreeMap<usize, Vec<StratumSampler>>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(plan: &'a BatchPlan, space: &FiniteSampleSpace) -> Result<Self> {
        plan.validate(space)?;
        let (strata, overrides) = match plan {
            BatchPlan::Stratified { strata, overrides } => (
                stratum_samplers(strata, space),
                overrides.iter().map(|(&t, s)| (t, stratum_samplers(s, space))).collect(),
            ),
            _ => (Vec::new(), BTreeMap::new()),
        };
        Ok(Self { plan, n: space.size(), outcomes: OutcomeSampler::new(space.weights()), strata, overrides })
    }

    pub fn plan(&self) -> &BatchPlan {
        self.plan
    }

    pub fn draw<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Result<BatchDraw> {
        match self.plan {
            BatchPlan::SegmentWithRepetition { sizes } => {
                let b = sizes.size_at(t, self.n);
                let outcomes = (0..b).map(|_| self.outcomes.sample(rng)).collect();
                Ok(BatchDraw { t, outcomes, weights: vec![1.0 / b as f64; b] })
            }
            BatchPlan::UniformNoRepetition { sizes } => {
                let b = sizes.size_at(t, self.n);
                if b == 0 || b > self.n {
                    return Err(Error::InvalidPlan(format!("batch size {b} at t = {t} with N = {}", self.n)));
                }
                // partial Fisher-Yates shuffle
                let mut pool: Vec<usize> = (0..self.n).collect();
                for i in 0..b {
                    let j = rng.random_range(i..self.n);
                    pool.swap(i, j);
                }
                pool.truncate(b);
                pool.sort_unstable();
                Ok(BatchDraw { t, outcomes: pool, weights: vec![1.0 / b as f64; b] })
            }
            BatchPlan::Stratified { .. } => {
                let strata = self.overrides.get(&t).unwrap_or(&self.strata);
                let total: usize = strata.iter().map(|s| s.count).sum();
                let mut outcomes = Vec::with_capacity(total);
                let mut weights = Vec::with_capacity(total);
                for s in strata {
                    for _ in 0..s.count {
                        outcomes.push(s.members[s.sampler.sample(rng)]);
                        weights.push(s.weight);
                    }
                }
                Ok(BatchDraw { t, outcomes, weights })
            }
        }
    }
}

/// `sum_i weights_i * H(x, outcome_i)`.
pub fn batch_gradient<O: GradientOracle + ?Sized>(oracle: &O, x: &Point, draw: &BatchDraw) -> Result<TangentVector> {
    let m = oracle.manifold();
    let mut acc = m.zero(x);
    for (&l, &w) in draw.outcomes.iter().zip(&draw.weights) {
        let h = oracle.sample_gradient(x, l)?;
        m.accumulate(&mut acc, w, &h);
    }
    Ok(m.reproject(acc))
}

fn gradient_table<O: GradientOracle + ?Sized>(oracle: &O, x: &Point) -> Result<Vec<TangentVector>> {
    (0..oracle.space().size()).map(|l| oracle.sample_gradient(x, l)).collect()
}

fn combine(table: &[TangentVector], outcomes: &[usize], weights: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (&l, &w) in outcomes.iter().zip(weights) {
        crate::linalg::axpy(w, table[l].vec(), out);
    }
}

/// Exact expectation of the batch gradient at iteration `t`, by enumeration.
pub fn enumerate_expectation<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &Point,
    plan: &BatchPlan,
    t: usize,
    budget: u128,
) -> Result<TangentVector> {
    let m = oracle.manifold();
    let table = gradient_table(oracle, x)?;
    let mut mean = vec![0.0; m.ambient_dim()];
    let mut value = vec![0.0; m.ambient_dim()];
    plan.for_each_outcome(oracle.space(), t, budget, |outcomes, weights, prob| {
        combine(&table, outcomes, weights, &mut value);
        crate::linalg::axpy(prob, &value, &mut mean);
    })?;
    m.tangent(x, mean)
}

/// `E |batch_gradient - grad F(x)|^2`, by enumeration.
pub fn variance_report<O: GradientOracle + ?Sized>(
    oracle: &O,
    x: &Point,
    plan: &BatchPlan,
    t: usize,
    budget: u128,
) -> Result<f64> {
    let m = oracle.manifold();
    let table = gradient_table(oracle, x)?;
    let grad = oracle.full_gradient(x);
    let mut value = vec![0.0; m.ambient_dim()];
    let mut total = 0.0;
    plan.for_each_outcome(oracle.space(), t, budget, |outcomes, weights, prob| {
        combine(&table, outcomes, weights, &mut value);
        let d: f64 = value.iter().zip(grad.vec()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += prob * d;
    })?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::ConstantFields;

    fn three_fields() -> ConstantFields {
        ConstantFields::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]],
            FiniteSampleSpace::uniform(3).unwrap(),
        )
        .unwrap()
    }

    fn four_fields() -> ConstantFields {
        ConstantFields::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0], vec![1.0, 3.0]],
            FiniteSampleSpace::uniform(4).unwrap(),
        )
        .unwrap()
    }

    fn origin() -> Point {
        Point::new(vec![0.0, 0.0])
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn cut_points_round_trip() {
        let sizes = BatchSizes::from_cut_points(&[0, 1, 3, 6]).unwrap();
        assert_eq!(sizes.cut_points(3, 10), vec![0, 1, 3, 6]);
        assert!(BatchSizes::from_cut_points(&[0, 2, 2]).is_err());
        assert!(BatchSizes::from_cut_points(&[1, 2]).is_err());
    }

    #[test]
    fn geometric_growth_is_capped() {
        let g = BatchSizes::Geometric { initial: 1, factor: 2.0, cap: None };
        let got: Vec<usize> = (0..6).map(|t| g.size_at(t, 10)).collect();
        assert_eq!(got, vec![1, 2, 4, 8, 10, 10]);
    }

    #[test]
    fn segment_size_one_is_single_sample() {
        let plan = BatchPlan::SegmentWithRepetition { sizes: BatchSizes::from_cut_points(&[0, 1, 2, 3]).unwrap() };
        let space = FiniteSampleSpace::uniform(5).unwrap();
        for t in 0..3 {
            let d = plan.draw(&space, t, 9).unwrap();
            assert_eq!(d.size(), 1);
            assert_eq!(d.weights, vec![1.0]);
        }
    }

    #[test]
    fn draws_are_deterministic_per_seed_and_step() {
        let plan = BatchPlan::no_repetition(3);
        let space = FiniteSampleSpace::uniform(8).unwrap();
        assert_eq!(plan.draw(&space, 4, 1).unwrap(), plan.draw(&space, 4, 1).unwrap());
        let differ = (0..20).any(|t| plan.draw(&space, t, 1).unwrap() != plan.draw(&space, t, 2).unwrap());
        assert!(differ);
    }

    #[test]
    fn no_repetition_subset_frequencies() {
        let plan = BatchPlan::no_repetition(2);
        let space = FiniteSampleSpace::uniform(3).unwrap();
        let sampler = BatchSampler::new(&plan, &space).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let draws = 30_000;
        for _ in 0..draws {
            let d = sampler.draw(0, &mut rng).unwrap();
            *counts.entry(d.outcomes).or_default() += 1;
        }
        assert_eq!(counts.len(), 3);
        for c in counts.values() {
            let f = *c as f64 / draws as f64;
            assert!((f - 1.0 / 3.0).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn stratified_draws_respect_partition() {
        let plan = BatchPlan::stratified(Strata::new(vec![vec![0, 1], vec![2, 3]], vec![1, 1]));
        let space = FiniteSampleSpace::uniform(4).unwrap();
        for t in 0..200 {
            let d = plan.draw(&space, t, 77).unwrap();
            assert_eq!(d.size(), 2);
            assert!(d.outcomes[0] <= 1 && d.outcomes[1] >= 2);
            assert_eq!(d.weights, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn plan_validation() {
        let uniform = FiniteSampleSpace::uniform(3).unwrap();
        assert!(BatchPlan::no_repetition(4).validate(&uniform).is_err());
        assert!(BatchPlan::segment(0).validate(&uniform).is_err());
        let skewed = FiniteSampleSpace::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert!(BatchPlan::no_repetition(2).validate(&skewed).is_err());
        assert!(BatchPlan::segment(7).validate(&skewed).is_ok());
        let overlapping = BatchPlan::stratified(Strata::new(vec![vec![0, 1], vec![1, 2]], vec![1, 1]));
        assert!(overlapping.validate(&uniform).is_err());
        let missing = BatchPlan::stratified(Strata::new(vec![vec![0, 1]], vec![1]));
        assert!(missing.validate(&uniform).is_err());
        let empty = BatchPlan::stratified(Strata::new(vec![vec![0, 1, 2], vec![]], vec![1, 1]));
        assert!(empty.validate(&uniform).is_err());
        let zero = BatchPlan::stratified(Strata::new(vec![vec![0, 1, 2]], vec![0]));
        assert!(zero.validate(&uniform).is_err());
    }

    #[test]
    fn batch_gradient_examples() {
        let o = three_fields();
        let x = origin();
        let single = BatchDraw { t: 0, outcomes: vec![2], weights: vec![1.0] };
        assert_eq!(batch_gradient(&o, &x, &single).unwrap().vec(), &[2.0, 2.0]);
        let pair = BatchDraw { t: 0, outcomes: vec![0, 2], weights: vec![0.5, 0.5] };
        assert_eq!(batch_gradient(&o, &x, &pair).unwrap().vec(), &[1.5, 1.0]);

        let o = four_fields();
        let strat = BatchDraw { t: 0, outcomes: vec![0, 2], weights: vec![0.5, 0.5] };
        let got = batch_gradient(&o, &x, &strat).unwrap();
        assert_eq!(got.vec(), &[1.5, 1.0]);
    }

    #[test]
    fn enumeration_examples() {
        let o = three_fields();
        let x = origin();
        let e = enumerate_expectation(&o, &x, &BatchPlan::no_repetition(2), 0, DEFAULT_ENUMERATION_BUDGET).unwrap();
        assert!(close(e.vec(), &[1.0, 1.0], 1e-15));

        // explicit subset averages visited
        let mut seen = Vec::new();
        BatchPlan::no_repetition(2).for_each_outcome(o.space(), 0, 10, |oc, _, p| seen.push((oc.to_vec(), p))).unwrap();
        assert_eq!(seen.iter().map(|s| s.0.clone()).collect::<Vec<_>>(), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);

        let e = enumerate_expectation(&o, &x, &BatchPlan::segment(2), 0, DEFAULT_ENUMERATION_BUDGET).unwrap();
        assert!(close(e.vec(), &[1.0, 1.0], 1e-15));
        let mut pairs = 0;
        BatchPlan::segment(2).for_each_outcome(o.space(), 0, 100, |_, _, _| pairs += 1).unwrap();
        assert_eq!(pairs, 9);

        let o = four_fields();
        let plan = BatchPlan::stratified(Strata::new(vec![vec![0, 1], vec![2, 3]], vec![1, 1]));
        let e = enumerate_expectation(&o, &x, &plan, 0, DEFAULT_ENUMERATION_BUDGET).unwrap();
        assert!(close(e.vec(), &[1.0, 1.5], 1e-15));
    }

    #[test]
    fn enumeration_budget() {
        let space = FiniteSampleSpace::uniform(10).unwrap();
        let err = BatchPlan::segment(7).for_each_outcome(&space, 0, DEFAULT_ENUMERATION_BUDGET, |_, _, _| {});
        assert_eq!(err, Err(Error::EnumerationBudgetExceeded { count: 10_000_000, budget: 1_000_000 }));
        assert_eq!(BatchPlan::no_repetition(5).outcome_count(&space, 0), 252);
    }

    #[test]
    fn variance_examples() {
        let o = three_fields();
        let x = origin();
        let full = variance_report(&o, &x, &BatchPlan::no_repetition(3), 0, 100).unwrap();
        assert!(full.abs() < 1e-28);

        // population variance of {(1,0),(0,1),(2,2)} around (1,1)
        let pop = (1.0 + 1.0 + 2.0) / 3.0;
        let b1 = variance_report(&o, &x, &BatchPlan::segment(1), 0, 100).unwrap();
        assert!((b1 - pop).abs() < 1e-14);

        for b in 1..=3 {
            let v = variance_report(&o, &x, &BatchPlan::segment(b), 0, 1_000_000).unwrap();
            let v2 = variance_report(&o, &x, &BatchPlan::segment(2 * b), 0, 1_000_000).unwrap();
            assert!((v2 - v / 2.0).abs() <= 1e-10, "b = {b}: {v2} vs {}", v / 2.0);
        }
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(3, 2), 3);
        assert_eq!(binomial(8, 4), 70);
        assert_eq!(binomial(4, 5), 0);
        assert_eq!(binomial(200, 100), u128::MAX);
    }
}
