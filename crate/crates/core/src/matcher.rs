//! Pairing of factual and counterfactual rows.
//!
//! Three policies are provided: `index` (row-aligned or externally indexed),
//! `nearest` (row-wise argmin of the cost) and `ot` (minimum-cost bijection,
//! solved exactly with the Hungarian algorithm). Costs are squared Euclidean
//! distances in encoded space.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::EncodedMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherPolicy {
    Index,
    Nearest,
    Ot,
}

impl MatcherPolicy {
    pub fn name(self) -> &'static str {
        match self {
            MatcherPolicy::Index => "index",
            MatcherPolicy::Nearest => "nearest",
            MatcherPolicy::Ot => "ot",
        }
    }
}

impl fmt::Display for MatcherPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatcherPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "index" => Ok(MatcherPolicy::Index),
            "nearest" => Ok(MatcherPolicy::Nearest),
            "ot" => Ok(MatcherPolicy::Ot),
            other => Err(Error::Param(format!("unknown matcher \"{other}\""))),
        }
    }
}

/// `n × m` squared distances, factuals on rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Vec<f64>,
    n: usize,
    m: usize,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        Ok(CostMatrix {
            values: rows.into_iter().flatten().collect(),
            n,
            m,
        })
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn transpose(&self) -> CostMatrix {
        let mut values = Vec::with_capacity(self.values.len());
        for j in 0..self.m {
            values.extend((0..self.n).map(|i| self.get(i, j)));
        }
        CostMatrix {
            values,
            n: self.m,
            m: self.n,
        }
    }

    fn pair_cost(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| self.get(i, j)).sum()
    }
}

pub fn cost_matrix(f: &EncodedMatrix, c: &EncodedMatrix) -> Result<CostMatrix> {
    if f.width() != c.width() {
        return Err(Error::Shape(format!(
            "factual width {} does not match counterfactual width {}",
            f.width(),
            c.width()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..f.nrows())
        .into_par_iter()
        .map(|i| {
            let a = f.row(i);
            c.rows()
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
                .collect()
        })
        .collect();
    Ok(CostMatrix {
        values: rows.into_iter().flatten().collect(),
        n: f.nrows(),
        m: c.nrows(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub policy: MatcherPolicy,
    /// `(factual, counterfactual)` pairs sorted by factual then counterfactual.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Matching {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("matching serializes")
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Identity pairing, or `(external_index[j], j)` when counterfactuals carry
/// their factual index.
pub fn match_index(cost: &CostMatrix, external_index: Option<&[usize]>) -> Result<Matching> {
    let mut pairs: Vec<(usize, usize)> = match external_index {
        None => {
            if cost.n != cost.m {
                return Err(Error::Matching(format!(
                    "index matching needs equal counts, got {} factuals and {} counterfactuals",
                    cost.n, cost.m
                )));
            }
            (0..cost.n).map(|i| (i, i)).collect()
        }
        Some(index) => {
            if index.len() != cost.m {
                return Err(Error::Matching(format!(
                    "{} factual indices for {} counterfactuals",
                    index.len(),
                    cost.m
                )));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= cost.n) {
                return Err(Error::Matching(format!(
                    "factual index {bad} out of range for {} factuals",
                    cost.n
                )));
            }
            index.iter().enumerate().map(|(j, &i)| (i, j)).collect()
        }
    };
    pairs.sort_unstable();
    Ok(Matching {
        policy: MatcherPolicy::Index,
        total_cost: cost.pair_cost(&pairs),
        pairs,
    })
}

pub fn match_nearest(cost: &CostMatrix) -> Result<Matching> {
    if cost.m == 0 {
        return Err(Error::Matching("no counterfactuals to match".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..cost.n)
        .map(|i| {
            let row = cost.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            (i, best)
        })
        .collect();
    Ok(Matching {
        policy: MatcherPolicy::Nearest,
        total_cost: cost.pair_cost(&pairs),
        pairs,
    })
}

/// Minimum-cost bijection. With fewer factuals than counterfactuals the
/// matrix is padded with dummy factual rows costing `max + 1`, whose pairs
/// are dropped afterwards.
pub fn match_ot(cost: &CostMatrix) -> Result<Matching> {
    if cost.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Matching("cost matrix has non-finite entries".into()));
    }
    if cost.n > cost.m {
        return Err(Error::Matching(format!(
            "ot matching needs at least as many counterfactuals as factuals, got {} < {}",
            cost.m, cost.n
        )));
    }
    let size = cost.m;
    let pad = cost.values.iter().cloned().fold(0.0, f64::max) + 1.0;
    let square: Vec<Vec<f64>> = (0..size)
        .map(|i| {
            if i < cost.n {
                cost.row(i).to_vec()
            } else {
                vec![pad; size]
            }
        })
        .collect();
    let assignment = hungarian(&square);
    let pairs: Vec<(usize, usize)> = assignment
        .into_iter()
        .enumerate()
        .take(cost.n)
        .collect();
    Ok(Matching {
        policy: MatcherPolicy::Ot,
        total_cost: cost.pair_cost(&pairs),
        pairs,
    })
}

pub fn match_with(
    policy: MatcherPolicy,
    cost: &CostMatrix,
    external_index: Option<&[usize]>,
) -> Result<Matching> {
    match policy {
        MatcherPolicy::Index => match_index(cost, external_index),
        MatcherPolicy::Nearest => match_nearest(cost),
        MatcherPolicy::Ot => match_ot(cost),
    }
}

/// Shortest-augmenting-path Hungarian algorithm with potentials, O(n³).
/// Returns the column assigned to each row of a square matrix.
fn hungarian(costs: &[Vec<f64>]) -> Vec<usize> {
    let n = costs.len();
    if n == 0 {
        return Vec::new();
    }
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row (1-based) matched to column j; column 0 is the virtual root
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}
