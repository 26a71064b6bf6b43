//! Clone-and-sample poisoning defense.
//!
//! The aggregation is repeated over subsets of the received updates, each
//! clone is scored on the validation set, and every client is credited with
//! the mean utility of clones that include it minus the mean of clones that
//! exclude it. Clients whose score is below `-τ` are flagged.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CloneMode, SessionConfig};
use crate::crypto;
use crate::fl::{self, Dataset, FlError, ModelUpdate, ParameterVector};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuardError {
    #[error("invalid clone configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fl(#[from] FlError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloneRun<S> {
    pub index: usize,
    /// Sorted client ids aggregated by this clone.
    pub subset: Vec<String>,
    pub params: ParameterVector<S>,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub client_id: String,
    /// `None` unless the client is both in and out of at least one clone.
    pub score: Option<f64>,
    pub in_count: usize,
    pub out_count: usize,
}

/// Seed for clone `index`, derived from the session seed and round seed.
pub fn clone_seed(rng_seed: u64, round_seed: u64, index: usize) -> u64 {
    let d = crypto::sha256(&[
        b"secfl-clone",
        &rng_seed.to_be_bytes(),
        &round_seed.to_be_bytes(),
        &(index as u64).to_be_bytes(),
    ]);
    u64::from_be_bytes(d[..8].try_into().unwrap())
}

/// Client-index subsets, as positions into the client-id-sorted update list.
fn subsets(n: usize, cfg: &SessionConfig, round_seed: u64) -> Result<Vec<Vec<usize>>, GuardError> {
    match cfg.clone_mode {
        CloneMode::LeaveOneOut => {
            if n < 2 {
                return Err(GuardError::InvalidConfig("leave-one-out needs at least 2 updates".into()));
            }
            Ok((0..n).map(|skip| (0..n).filter(|&i| i != skip).collect()).collect())
        }
        CloneMode::Random => {
            let (k, m) = (cfg.clone_count, cfg.clone_subset_size);
            if k < 1 {
                return Err(GuardError::InvalidConfig("clone_count must be at least 1".into()));
            }
            if m < 1 || m >= n {
                return Err(GuardError::InvalidConfig(format!(
                    "clone_subset_size {m} must lie in [1, {n}) for {n} updates"
                )));
            }
            Ok((0..k)
                .map(|c| {
                    let mut rng = ChaCha8Rng::seed_from_u64(clone_seed(cfg.rng_seed, round_seed, c));
                    let mut s = index::sample(&mut rng, n, m).into_vec();
                    s.sort_unstable();
                    s
                })
                .collect())
        }
    }
}

pub fn clone_aggregate<S: Scalar>(
    updates: &[ModelUpdate<S>],
    validation: &Dataset<S>,
    cfg: &SessionConfig,
    round_seed: u64,
) -> Result<Vec<CloneRun<S>>, GuardError> {
    let mut sorted: Vec<&ModelUpdate<S>> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(GuardError::InvalidConfig("duplicate client id among updates".into()));
    }
    subsets(sorted.len(), cfg, round_seed)?
        .into_iter()
        .enumerate()
        .map(|(index, idx)| {
            let members: Vec<ModelUpdate<S>> = idx.iter().map(|&i| sorted[i].clone()).collect();
            let params = fl::aggregate(&members)?;
            let utility = fl::evaluate(&params, validation)?.accuracy;
            Ok(CloneRun {
                index,
                subset: members.into_iter().map(|u| u.client_id).collect(),
                params,
                utility,
            })
        })
        .collect()
}

/// Scores in `roster` order.
///
/// Means are taken over deviations from the first clone's utility, so equal
/// utilities give a score of exactly zero.
pub fn score_clients<S>(runs: &[CloneRun<S>], roster: &[String]) -> Vec<InfluenceScore> {
    let base = runs.first().map_or(0.0, |r| r.utility);
    roster
        .iter()
        .map(|id| {
            let (mut sum_in, mut sum_out) = (0.0, 0.0);
            let (mut in_count, mut out_count) = (0, 0);
            for r in runs {
                if r.subset.binary_search(id).is_ok() {
                    sum_in += r.utility - base;
                    in_count += 1;
                } else {
                    sum_out += r.utility - base;
                    out_count += 1;
                }
            }
            let score = (in_count > 0 && out_count > 0).then(|| sum_in / in_count as f64 - sum_out / out_count as f64);
            InfluenceScore {
                client_id: id.clone(),
                score,
                in_count,
                out_count,
            }
        })
        .collect()
}

/// Clients with a defined score strictly below `-tau`.
pub fn flag_outliers(scores: &[InfluenceScore], tau: f64) -> BTreeSet<String> {
    scores
        .iter()
        .filter(|s| matches!(s.score, Some(v) if v < -tau))
        .map(|s| s.client_id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardReport {
    pub round_seed: u64,
    pub clone_seeds: Vec<u64>,
    pub utilities: Vec<f64>,
    pub scores: Vec<InfluenceScore>,
    pub flagged: BTreeSet<String>,
}

/// Clone, score and flag in one pass, scoring every client that submitted.
pub fn inspect<S: Scalar>(
    updates: &[ModelUpdate<S>],
    validation: &Dataset<S>,
    cfg: &SessionConfig,
    round_seed: u64,
) -> Result<GuardReport, GuardError> {
    let runs = clone_aggregate(updates, validation, cfg, round_seed)?;
    let mut roster: Vec<String> = updates.iter().map(|u| u.client_id.clone()).collect();
    roster.sort();
    let scores = score_clients(&runs, &roster);
    let flagged = flag_outliers(&scores, cfg.outlier_threshold);
    let clone_seeds = match cfg.clone_mode {
        CloneMode::Random => (0..runs.len()).map(|c| clone_seed(cfg.rng_seed, round_seed, c)).collect(),
        CloneMode::LeaveOneOut => Vec::new(),
    };
    Ok(GuardReport {
        round_seed,
        clone_seeds,
        utilities: runs.iter().map(|r| r.utility).collect(),
        scores,
        flagged,
    })
}
