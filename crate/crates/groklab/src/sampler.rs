//! Batch construction strategies and the entropy-regularized
//! sampling-probability solver: the closed-form maximizer of
//! `sum_i p_i L_i^2 + gamma * H(p)` over the probability simplex, its
//! gamma -> 0 argmax limit, and the per-token gradient-norm bound tracker
//! that feeds it during training.

use crate::error::{Error, Result};
use crate::modspace::Example;
use crate::net::Batch;
use crate::rng::{self, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::VecDeque;

/// How examples are drawn into batches each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchStrategy {
    Random,
    Uniform,
    Skewed,
    FrequencyAware,
}

impl BatchStrategy {
    pub fn name(self) -> &'static str {
        match self {
            BatchStrategy::Random => "random",
            BatchStrategy::Uniform => "uniform",
            BatchStrategy::Skewed => "skewed",
            BatchStrategy::FrequencyAware => "frequency_aware",
        }
    }
}

impl std::str::FromStr for BatchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BatchStrategy::Random),
            "uniform" => Ok(BatchStrategy::Uniform),
            "skewed" => Ok(BatchStrategy::Skewed),
            "frequency_aware" => Ok(BatchStrategy::FrequencyAware),
            other => Err(Error::InvalidConfig(format!(
                "unknown batch strategy '{other}' (expected random|uniform|skewed|frequency_aware)"
            ))),
        }
    }
}

/// Everything needed to realize one epoch of batches.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub strategy: BatchStrategy,
    pub batch_size: usize,
    /// Base seed; Skewed derives its fixed a-rank permutation from this, so
    /// passing the split seed reproduces the split's own power law.
    pub seed: u64,
    /// Entropy-regularization strength for FrequencyAware.
    pub gamma: f64,
    /// Power-law exponent for Skewed.
    pub skew_exponent: f64,
    /// Per-token gradient-norm bounds L for FrequencyAware; `None` (cold
    /// start) means uniform weights.
    pub bounds: Option<Vec<f64>>,
}

impl BatchPlan {
    pub fn new(strategy: BatchStrategy, batch_size: usize, seed: u64) -> Self {
        BatchPlan {
            strategy,
            batch_size,
            seed,
            gamma: 1.0,
            skew_exponent: 1.5,
            bounds: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if self.skew_exponent < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "skew_exponent must be >= 0, got {}",
                self.skew_exponent
            )));
        }
        Ok(())
    }
}

/// The closed-form solution `p_i* ∝ exp(L_i^2 / gamma)`, computed with a
/// max shift so huge bounds cannot overflow.
pub fn solve_entropy_probs(bounds: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("gamma must be > 0, got {gamma}")));
    }
    if bounds.is_empty() {
        return Err(Error::InvalidConfig("bounds must be nonempty".into()));
    }
    if bounds.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            context: "bound estimates for entropy solver".into(),
        });
    }
    let scores: Vec<f64> = bounds.iter().map(|l| l * l / gamma).collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / z).collect())
}

/// The gamma -> 0 limit: all mass on the largest L_i^2, split uniformly
/// over exact ties.
pub fn argmax_limit_probs(bounds: &[f64]) -> Vec<f64> {
    assert!(!bounds.is_empty());
    let best = bounds
        .iter()
        .map(|l| l * l)
        .fold(f64::NEG_INFINITY, f64::max);
    let ties = bounds.iter().filter(|l| *l * *l == best).count();
    bounds
        .iter()
        .map(|l| if l * l == best { 1.0 / ties as f64 } else { 0.0 })
        .collect()
}

/// Running per-token maxima of embedding-gradient row norms over a sliding
/// window of touched steps; tokens never touched report the median of the
/// touched tokens' estimates so they are not locked out of sampling.
#[derive(Debug, Clone)]
pub struct BoundTracker {
    window: usize,
    norms: Vec<VecDeque<f64>>,
}

impl BoundTracker {
    pub fn new(vocab: usize, window: usize) -> Self {
        assert!(window >= 1);
        BoundTracker {
            window,
            norms: vec![VecDeque::new(); vocab],
        }
    }

    /// Records one touched-step observation for a token.
    pub fn observe(&mut self, token: usize, norm: f64) {
        let q = &mut self.norms[token];
        if q.len() == self.window {
            q.pop_front();
        }
        q.push_back(norm);
    }

    /// Records the per-row gradient norms of one step's embedding gradient.
    pub fn observe_grads(&mut self, grads: &crate::net::Grads) {
        let Some(de) = &grads.e else { return };
        for (token, &touched) in grads.touched_tokens.iter().enumerate() {
            if touched {
                let norm = de.row(token).iter().map(|v| v * v).sum::<f64>().sqrt();
                self.observe(token, norm);
            }
        }
    }

    /// Current bound estimates L.
    pub fn estimates(&self) -> Vec<f64> {
        let touched: Vec<f64> = self
            .norms
            .iter()
            .filter(|q| !q.is_empty())
            .map(|q| q.iter().cloned().fold(0.0f64, f64::max))
            .collect();
        let fallback = median(&touched);
        self.norms
            .iter()
            .map(|q| {
                if q.is_empty() {
                    fallback
                } else {
                    q.iter().cloned().fold(0.0f64, f64::max)
                }
            })
            .collect()
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Example weights for FrequencyAware sampling: the mean of the two operand
/// tokens' target probabilities.
pub fn example_weights(train: &[Example], p_star: &[f64]) -> Vec<f64> {
    train
        .iter()
        .map(|ex| 0.5 * (p_star[ex.a() as usize] + p_star[ex.b() as usize]))
        .collect()
}

/// Draws `count` indices with replacement, weighted by `weights`, via an
/// inverse-CDF table.
fn weighted_draws(weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0, "degenerate weights");
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen();
            cdf.partition_point(|&c| c < u).min(weights.len() - 1)
        })
        .collect()
}

/// Builds one epoch's batches. Every strategy emits `ceil(n/B)` batches
/// covering n example slots (the last batch may be short), so epochs are
/// comparable across strategies. Deterministic in (plan, epoch_seed).
pub fn make_batches(
    train: &[Example],
    plan: &BatchPlan,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    plan.validate()?;
    let n = train.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty train set".into()));
    }
    if n < plan.batch_size {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds train set size {n}",
            plan.batch_size
        )));
    }
    let mut rng = rng::chacha(rng::mix(rng::mix(plan.seed, stream::BATCH), epoch_seed));

    let order: Vec<usize> = match plan.strategy {
        BatchStrategy::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx
        }
        BatchStrategy::Uniform => {
            // Round-robin over a-value strata so every batch window of size
            // >= p spans all a-values while strata remain balanced.
            let mut a_values: Vec<u32> = Vec::new();
            for ex in train {
                if !a_values.contains(&ex.a()) {
                    a_values.push(ex.a());
                }
            }
            a_values.sort_unstable();
            let mut strata: Vec<Vec<usize>> = vec![Vec::new(); a_values.len()];
            for (i, ex) in train.iter().enumerate() {
                let s = a_values.binary_search(&ex.a()).unwrap();
                strata[s].push(i);
            }
            for s in &mut strata {
                s.shuffle(&mut rng);
            }
            let mut stratum_order: Vec<usize> = (0..strata.len()).collect();
            stratum_order.shuffle(&mut rng);
            let mut order = Vec::with_capacity(n);
            let mut depth = 0;
            while order.len() < n {
                for &s in &stratum_order {
                    if let Some(&i) = strata[s].get(depth) {
                        order.push(i);
                    }
                }
                depth += 1;
            }
            order
        }
        BatchStrategy::Skewed => {
            // Same construction as the skewed split: a fixed seeded rank
            // permutation of a-values, power-law row weights, uniform pair
            // within the chosen row, drawn with replacement.
            let mut a_values: Vec<u32> = Vec::new();
            for ex in train {
                if !a_values.contains(&ex.a()) {
                    a_values.push(ex.a());
                }
            }
            a_values.sort_unstable();
            let mut rows: Vec<Vec<usize>> = vec![Vec::new(); a_values.len()];
            for (i, ex) in train.iter().enumerate() {
                let r = a_values.binary_search(&ex.a()).unwrap();
                rows[r].push(i);
            }
            let mut perm_rng = rng::chacha(rng::mix(plan.seed, stream::SPLIT ^ 0xA5));
            let mut ranked: Vec<usize> = (0..rows.len()).collect();
            ranked.shuffle(&mut perm_rng);
            let mut row_weight = vec![0.0; rows.len()];
            for (rank, &row) in ranked.iter().enumerate() {
                row_weight[row] = ((rank + 1) as f64).powf(-plan.skew_exponent);
            }
            let rows_drawn = weighted_draws(&row_weight, n, &mut rng);
            rows_drawn
                .into_iter()
                .map(|r| rows[r][rng.gen_range(0..rows[r].len())])
                .collect()
        }
        BatchStrategy::FrequencyAware => {
            let weights = match &plan.bounds {
                Some(bounds) => {
                    let p_star = solve_entropy_probs(bounds, plan.gamma)?;
                    example_weights(train, &p_star)
                }
                None => vec![1.0; n],
            };
            weighted_draws(&weights, n, &mut rng)
        }
    };

    Ok(order
        .chunks(plan.batch_size)
        .map(|chunk| {
            let examples: Vec<Example> = chunk.iter().map(|&i| train[i]).collect();
            Batch::from_examples(&examples)
        })
        .collect())
}
