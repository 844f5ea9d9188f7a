//! Shapley attribution of a prediction change to original-level features.
//!
//! For a matched pair `(x, c)` the swap game assigns to each coalition `S` of
//! original features the model score of the hybrid row that takes the
//! features in `S` from `c` and the rest from `x`. One-hot groups move as a
//! whole, so a categorical feature is a single player.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::matcher::Matching;
use crate::model::{ModelSpec, ScoreScale};
use crate::schema::{EncodedMatrix, GroupMap};

pub const DEFAULT_EXACT_LIMIT: usize = 12;
pub const DEFAULT_SAMPLES: usize = 1000;

/// `x` with the columns of every group in `subset` replaced by those of `c`.
pub fn hybrid(x: &[f64], c: &[f64], subset: &[bool], groups: &GroupMap) -> Vec<f64> {
    let mut out = x.to_vec();
    for (j, range) in groups.iter().enumerate() {
        if subset[j] {
            out[range.clone()].copy_from_slice(&c[range]);
        }
    }
    out
}

fn hybrid_mask(x: &[f64], c: &[f64], mask: u64, groups: &GroupMap, out: &mut [f64]) {
    out.copy_from_slice(x);
    for (j, range) in groups.iter().enumerate() {
        if mask >> j & 1 == 1 {
            out[range.clone()].copy_from_slice(&c[range]);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SwapGame<'a> {
    model: &'a ModelSpec,
    factual: &'a [f64],
    counterfactual: &'a [f64],
    groups: &'a GroupMap,
    target: usize,
    scale: ScoreScale,
}

impl<'a> SwapGame<'a> {
    pub fn new(
        model: &'a ModelSpec,
        factual: &'a [f64],
        counterfactual: &'a [f64],
        groups: &'a GroupMap,
        target: usize,
        scale: ScoreScale,
    ) -> Result<Self> {
        let d = model.input_width();
        if factual.len() != d || counterfactual.len() != d || groups.width() != d {
            return Err(Error::Shape(format!(
                "swap game rows must have the model width {d}"
            )));
        }
        if target >= model.n_classes() {
            return Err(Error::Param(format!("target class {target} out of range")));
        }
        Ok(SwapGame {
            model,
            factual,
            counterfactual,
            groups,
            target,
            scale,
        })
    }

    /// Number of players `p`.
    pub fn players(&self) -> usize {
        self.groups.len()
    }

    pub fn score(&self, row: &[f64]) -> f64 {
        self.model
            .score_row(row, self.target, self.scale)
            .expect("widths checked when the game was built")
    }

    pub fn value(&self, subset: &[bool]) -> f64 {
        self.score(&hybrid(self.factual, self.counterfactual, subset, self.groups))
    }

    pub fn empty_value(&self) -> f64 {
        self.score(self.factual)
    }

    pub fn full_value(&self) -> f64 {
        self.score(self.counterfactual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactShapley {
    pub phi: Vec<f64>,
    /// Model evaluations performed; at most `2^p`.
    pub evaluations: usize,
}

/// Exact Shapley values by enumerating all `2^p` coalitions once.
pub fn shapley_exact(game: &SwapGame<'_>, exact_limit: usize) -> Result<ExactShapley> {
    let p = game.players();
    if p > exact_limit || p >= 63 {
        return Err(Error::ExactLimit {
            features: p,
            limit: exact_limit,
        });
    }
    let size = 1usize << p;
    let mut values = Vec::with_capacity(size);
    let mut row = vec![0.0; game.factual.len()];
    for mask in 0..size as u64 {
        hybrid_mask(game.factual, game.counterfactual, mask, game.groups, &mut row);
        values.push(game.score(&row));
    }

    // |S|! (p-|S|-1)! / p! = 1 / (p * C(p-1, |S|))
    let mut weights = vec![0.0; p.max(1)];
    let mut binom = 1.0;
    for (s, w) in weights.iter_mut().enumerate() {
        *w = 1.0 / (p as f64 * binom);
        binom = binom * (p - 1 - s) as f64 / (s + 1) as f64;
    }

    let mut phi = vec![0.0; p];
    for (j, phi_j) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        *phi_j = (0..size)
            .filter(|mask| mask & bit == 0)
            .map(|mask| weights[mask.count_ones() as usize] * (values[mask | bit] - values[mask]))
            .sum();
    }
    Ok(ExactShapley {
        phi,
        evaluations: size,
    })
}

/// Monte Carlo permutation estimate with closure correction: the returned
/// values sum exactly to `v(full) - v(∅)` whenever some coordinate's ulp
/// allows it (see `close_efficiency`).
pub fn shapley_sample(game: &SwapGame<'_>, samples: usize, seed: u64) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::Param("permutation sample count must be at least 1".into()));
    }
    let p = game.players();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..p).collect();
    let mut phi = vec![0.0; p];
    let empty = game.empty_value();
    let mut row = vec![0.0; game.factual.len()];
    for _ in 0..samples {
        order.shuffle(&mut rng);
        row.copy_from_slice(game.factual);
        let mut prev = empty;
        for &j in &order {
            let range = game.groups.group(j);
            row[range.clone()].copy_from_slice(&game.counterfactual[range]);
            let cur = game.score(&row);
            phi[j] += cur - prev;
            prev = cur;
        }
    }
    phi.iter_mut().for_each(|v| *v /= samples as f64);
    close_efficiency(&mut phi, game.full_value() - empty);
    Ok(phi)
}

/// Spread the efficiency gap over the coordinates with a nonzero estimate,
/// then move one of them by a few ulps so that the exact sum of `phi` equals
/// `total`, preferring a choice whose left-to-right `f64` sum is also `total`.
/// Coordinates estimated as exactly 0 (features no order ever moved) stay 0.
///
/// An exact sum needs a coordinate whose ulp is no coarser than the
/// residual's; when every coordinate is far larger than `total` the closest
/// left-to-right sum is kept instead.
pub(crate) fn close_efficiency(phi: &mut [f64], total: f64) {
    if phi.is_empty() || !total.is_finite() {
        return;
    }
    let mut active: Vec<usize> = (0..phi.len()).filter(|&j| phi[j] != 0.0).collect();
    if active.is_empty() {
        active = (0..phi.len()).collect();
    }
    let gap = (total - phi.iter().sum::<f64>()) / active.len() as f64;
    active.iter().for_each(|&j| phi[j] += gap);
    active.sort_by(|&a, &b| phi[a].abs().total_cmp(&phi[b].abs()).then(b.cmp(&a)));

    // The left-to-right fallback moves coordinates and may make an exact
    // absorber available, so it is retried a bounded number of times.
    for _ in 0..CLOSURE_ROUNDS {
        if close_round(phi, total, &active) {
            return;
        }
    }
}

/// One closure attempt; true once the real sum is exact.
fn close_round(phi: &mut [f64], total: f64, order: &[usize]) -> bool {
    // exact total − Σφ
    let residual = phi.iter().fold(vec![total], |e, &v| grow_expansion(&e, -v));
    if residual.is_empty() && phi.iter().sum::<f64>() == total {
        return true;
    }

    // One coordinate absorbs the exact residual.
    let mut exact = None;
    for &k in order {
        let Some(v) = absorb(&residual, phi[k]) else { continue };
        let old = std::mem::replace(&mut phi[k], v);
        if phi.iter().sum::<f64>() == total {
            return true;
        }
        phi[k] = old;
        exact.get_or_insert((k, v));
    }

    // Nudge `i` a few ulps and let `k` absorb, looking for a value that is
    // exact under both the real and the left-to-right sum.
    for &i in order {
        let base = phi[i];
        for step in 1..=NUDGE_ULPS {
            for v_i in [key_float(float_key(base) + step), key_float(float_key(base) - step)] {
                if !v_i.is_finite() {
                    continue;
                }
                let shifted = grow_expansion(&grow_expansion(&residual, base), -v_i);
                for &k in order.iter().filter(|&&k| k != i) {
                    let Some(v_k) = absorb(&shifted, phi[k]) else { continue };
                    let old_k = phi[k];
                    phi[i] = v_i;
                    phi[k] = v_k;
                    if phi.iter().sum::<f64>() == total {
                        return true;
                    }
                    phi[i] = base;
                    phi[k] = old_k;
                }
            }
        }
    }
    if let Some((k, v)) = exact {
        phi[k] = v;
        return true;
    }

    let mut best: Option<(f64, usize, f64)> = None;
    for &k in order {
        let Some((v, miss)) = solve_coordinate(phi, k, total) else { continue };
        if best.is_none_or(|(m, _, _)| miss < m) {
            best = Some((miss, k, v));
        }
    }
    if let Some((_, k, v)) = best {
        phi[k] = v;
    }
    false
}

const CLOSURE_ROUNDS: usize = 3;
const NUDGE_ULPS: i64 = 32;

/// `phi_k + residual` when it is a single float.
fn absorb(residual: &[f64], phi_k: f64) -> Option<f64> {
    let moved = grow_expansion(residual, phi_k);
    match moved.as_slice() {
        [] => Some(0.0),
        [v] => Some(*v),
        _ => None,
    }
}

/// `a + b` as a rounded sum and its exact rounding error.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Exact `e + b` for a nonoverlapping expansion `e` (smallest component
/// first); zero components are dropped.
fn grow_expansion(e: &[f64], b: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(e.len() + 1);
    let mut q = b;
    for &c in e {
        let (s, h) = two_sum(q, c);
        if h != 0.0 {
            out.push(h);
        }
        q = s;
    }
    if q != 0.0 {
        out.push(q);
    }
    out
}

/// Order-preserving map from finite floats to integers.
fn float_key(x: f64) -> i64 {
    let bits = x.to_bits() as i64;
    bits ^ (((bits >> 63) as u64) >> 1) as i64
}

fn key_float(k: i64) -> f64 {
    f64::from_bits((k ^ (((k >> 63) as u64) >> 1) as i64) as u64)
}

/// The value for `phi[k]` whose left-to-right sum is closest to `total`,
/// with that distance. The sum is monotone in `phi[k]`, so a bisection over
/// the float ordering brackets `total` between adjacent floats.
fn solve_coordinate(phi: &[f64], k: usize, total: f64) -> Option<(f64, f64)> {
    let sum_with = |v: f64| -> f64 {
        phi.iter()
            .enumerate()
            .map(|(i, &x)| if i == k { v } else { x })
            .sum()
    };
    let v0 = phi[k];
    let mut width = (total - sum_with(v0)).abs().max(f64::MIN_POSITIVE) * 4.0;
    let (mut lo, mut hi) = (v0, v0);
    for _ in 0..8 {
        lo = v0 - width;
        hi = v0 + width;
        if sum_with(lo) <= total && sum_with(hi) >= total {
            break;
        }
        width *= 16.0;
    }
    if !(sum_with(lo) <= total && sum_with(hi) >= total) || !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    let (mut a, mut b) = (float_key(lo), float_key(hi));
    // invariant: sum(a) <= total <= sum(b)
    while b - a > 1 {
        let mid = a + (b - a) / 2;
        if sum_with(key_float(mid)) < total {
            a = mid;
        } else {
            b = mid;
        }
    }
    [b, a]
        .into_iter()
        .map(|key| {
            let v = key_float(key);
            (v, (sum_with(v) - total).abs())
        })
        .min_by(|x, y| x.1.total_cmp(&y.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributorPolicy {
    #[serde(rename = "shapley-exact")]
    ShapleyExact,
    #[serde(rename = "shapley-sample")]
    ShapleySample,
}

impl AttributorPolicy {
    pub fn name(self) -> &'static str {
        match self {
            AttributorPolicy::ShapleyExact => "shapley-exact",
            AttributorPolicy::ShapleySample => "shapley-sample",
        }
    }
}

impl fmt::Display for AttributorPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributorPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapley-exact" | "exact" => Ok(AttributorPolicy::ShapleyExact),
            "shapley-sample" | "sampled" => Ok(AttributorPolicy::ShapleySample),
            other => Err(Error::Param(format!("unknown attributor \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributionConfig {
    pub policy: AttributorPolicy,
    pub target: usize,
    pub scale: ScoreScale,
    pub samples: usize,
    pub seed: u64,
    pub exact_limit: usize,
}

impl AttributionConfig {
    pub fn exact(target: usize) -> Self {
        AttributionConfig {
            policy: AttributorPolicy::ShapleyExact,
            target,
            scale: ScoreScale::Probability,
            samples: DEFAULT_SAMPLES,
            seed: 0,
            exact_limit: DEFAULT_EXACT_LIMIT,
        }
    }

    pub fn sampled(target: usize, samples: usize, seed: u64) -> Self {
        AttributionConfig {
            policy: AttributorPolicy::ShapleySample,
            samples,
            seed,
            ..Self::exact(target)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionTable {
    pub factual: usize,
    pub counterfactual: usize,
    pub phi: Vec<f64>,
    pub baseline: f64,
    pub full: f64,
    pub method: AttributorPolicy,
    /// Permutations drawn; 0 for exact enumeration.
    pub samples: usize,
    pub seed: u64,
}

pub fn attribute_all(
    model: &ModelSpec,
    matching: &Matching,
    f: &EncodedMatrix,
    c: &EncodedMatrix,
    config: &AttributionConfig,
) -> Result<Vec<AttributionTable>> {
    if f.groups() != c.groups() {
        return Err(Error::Shape("factual and counterfactual encodings differ".into()));
    }
    if let Some(&(i, j)) = matching
        .pairs
        .iter()
        .find(|&&(i, j)| i >= f.nrows() || j >= c.nrows())
    {
        return Err(Error::Matching(format!("pair ({i}, {j}) out of range")));
    }
    let groups = f.groups();
    matching
        .pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, j))| {
            let game = SwapGame::new(model, f.row(i), c.row(j), groups, config.target, config.scale)?;
            let (phi, samples, seed) = match config.policy {
                AttributorPolicy::ShapleyExact => {
                    (shapley_exact(&game, config.exact_limit)?.phi, 0, config.seed)
                }
                AttributorPolicy::ShapleySample => {
                    let seed = config.seed ^ k as u64;
                    (shapley_sample(&game, config.samples, seed)?, config.samples, seed)
                }
            };
            Ok(AttributionTable {
                factual: i,
                counterfactual: j,
                phi,
                baseline: game.empty_value(),
                full: game.full_value(),
                method: config.policy,
                samples,
                seed,
            })
        })
        .collect()
}

/// JSON document for `--save-attributions`, with φ keyed by feature name.
pub fn attributions_to_json(tables: &[AttributionTable], feature_names: &[String]) -> String {
    let rows: Vec<Value> = tables
        .iter()
        .map(|t| {
            let phi: Map<String, Value> = feature_names
                .iter()
                .zip(&t.phi)
                .map(|(name, v)| (name.clone(), json!(v)))
                .collect();
            json!({
                "factual": t.factual,
                "counterfactual": t.counterfactual,
                "method": t.method,
                "samples": t.samples,
                "seed": t.seed,
                "baseline": t.baseline,
                "full": t.full,
                "phi": phi,
            })
        })
        .collect();
    serde_json::to_string_pretty(&json!({ "features": feature_names, "tables": rows }))
        .expect("attributions serialize")
}
