//! Greedy sensor selection, random baselines and design comparisons.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::bayes::Design;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriterionKind {
    ClassicalA,
    CoedFrozen,
    CoedSpectral,
}

impl CriterionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classical-A" | "classical" => Ok(Self::ClassicalA),
            "coed-frozen" | "coed" => Ok(Self::CoedFrozen),
            "coed-spectral" => Ok(Self::CoedSpectral),
            other => Err(crate::error::Error::Config(format!("unknown criterion '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ClassicalA => "classical-A",
            Self::CoedFrozen => "coed-frozen",
            Self::CoedSpectral => "coed-spectral",
        }
    }
}

pub type Evaluator = Arc<dyn Fn(&Design) -> Result<f64> + Send + Sync>;

/// A design criterion in minus form plus the design-independent offset that
/// turns it into the full trace.
#[derive(Clone)]
pub struct CriterionSpec {
    pub kind: CriterionKind,
    pub evaluator: Evaluator,
    pub invariant_offset: Option<f64>,
    calls: Arc<AtomicUsize>,
}

impl fmt::Debug for CriterionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CriterionSpec")
            .field("kind", &self.kind)
            .field("invariant_offset", &self.invariant_offset)
            .finish()
    }
}

impl CriterionSpec {
    pub fn new(kind: CriterionKind, evaluator: Evaluator, invariant_offset: Option<f64>) -> Self {
        Self {
            kind,
            evaluator,
            invariant_offset,
            calls: Arc::default(),
        }
    }

    pub fn evaluate(&self, design: &Design) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.evaluator)(design)
    }

    pub fn full_value(&self, design: &Design) -> Result<Option<f64>> {
        let minus = self.evaluate(design)?;
        Ok(self.invariant_offset.map(|o| o + minus))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyResult {
    pub selected: Vec<usize>,
    pub design: Design,
    pub criterion_trace: Vec<f64>,
    pub evaluations: usize,
}

/// Adds one sensor at a time, each time the one that minimizes the criterion.
/// Candidates are evaluated in parallel and the stage winner is the smallest
/// `(value, index)` pair, so the result does not depend on scheduling.
pub fn greedy_select(criterion: &CriterionSpec, k: usize, n_s: usize, sigma: f64) -> Result<GreedyResult> {
    if k == 0 || k > n_s {
        return Err(invalid(format!("budget k = {k} must lie in [1, {n_s}]")));
    }
    let mut design = Design::empty(n_s, sigma);
    let mut selected = Vec::with_capacity(k);
    let mut trace = Vec::with_capacity(k);
    let mut evaluations = 0;
    for _ in 0..k {
        let candidates: Vec<usize> = (0..n_s).filter(|j| design.weights[*j] == 0.0).collect();
        let scored: Vec<(f64, usize)> = candidates
            .par_iter()
            .map(|&j| criterion.evaluate(&design.with_sensor(j)).map(|v| (v, j)))
            .collect::<Result<_>>()?;
        evaluations += scored.len();
        let (value, best) = scored
            .into_iter()
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .expect("at least one candidate remains");
        design = design.with_sensor(best);
        selected.push(best);
        trace.push(value);
    }
    Ok(GreedyResult {
        selected,
        design,
        criterion_trace: trace,
        evaluations,
    })
}

/// Uniform `k`-subsets of `n_s` candidates.
pub fn random_designs<R: Rng + ?Sized>(
    n_samples: usize,
    k: usize,
    n_s: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<Design>> {
    if k > n_s {
        return Err(invalid(format!("cannot place {k} sensors among {n_s} candidates")));
    }
    (0..n_samples)
        .map(|_| {
            let idx: BTreeSet<usize> = sample(rng, n_s, k).into_iter().collect();
            Design::from_indices(n_s, &idx.into_iter().collect::<Vec<_>>(), sigma)
        })
        .collect()
}

/// Fraction of `sample` values that are strictly smaller than `value`,
/// in percent. Low is good for minimized criteria.
pub fn percentile_rank(value: f64, sample: &[f64]) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    let below = sample.iter().filter(|&&s| s < value).count();
    100.0 * below as f64 / sample.len() as f64
}

/// Linear-interpolation percentile (`q` in `[0, 100]`).
pub fn percentile(sample: &[f64], q: f64) -> f64 {
    assert!(!sample.is_empty());
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub sensors: Vec<usize>,
    /// Full criterion values, one per criterion, in the order given.
    pub values: Vec<f64>,
    /// Percentile rank of each value among the random sample, when supplied.
    pub percentile_ranks: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub criteria: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    /// Criterion values of the random designs, one vector per criterion.
    pub random_values: Vec<Vec<f64>>,
}

/// Full criterion values of labeled designs plus their percentile rank
/// among a random sample.
pub fn compare_designs(
    designs: &[(String, Design)],
    criteria: &[CriterionSpec],
    random: &[Design],
) -> Result<Comparison> {
    let full = |c: &CriterionSpec, d: &Design| -> Result<f64> {
        let minus = c.evaluate(d)?;
        Ok(c.invariant_offset.unwrap_or(0.0) + minus)
    };
    let random_values: Vec<Vec<f64>> = criteria
        .iter()
        .map(|c| random.par_iter().map(|d| full(c, d)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let rows = designs
        .iter()
        .map(|(label, d)| {
            let values = criteria.iter().map(|c| full(c, d)).collect::<Result<Vec<_>>>()?;
            let percentile_ranks = values
                .iter()
                .zip(&random_values)
                .map(|(v, rv)| (!rv.is_empty()).then(|| percentile_rank(*v, rv)))
                .collect();
            Ok(ComparisonRow {
                label: label.clone(),
                sensors: d.active(),
                values,
                percentile_ranks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        criteria: criteria.iter().map(|c| c.kind.name().to_string()).collect(),
        rows,
        random_values,
    })
}
