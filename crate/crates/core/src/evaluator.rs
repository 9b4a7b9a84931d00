//! All-ranking top-K evaluation: Recall@K and NDCG@K averaged over users
//! with at least one target-fold positive.
//!
//! Every item is ranked for every user (minus that user's known positives);
//! no sampled candidate sets. Ties break by ascending item index so small
//! fixtures are exactly reproducible.

use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::{DataSplit, FeatureMatrix, Fold};
use crate::recmodel::{ItemReprs, ModelState};
use crate::{Error, Result};

/// Recall/NDCG per requested K.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsTable {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
}

impl MetricsTable {
    pub fn at(&self, k: usize) -> Option<(f64, f64)> {
        self.ks
            .iter()
            .position(|&kk| kk == k)
            .map(|i| (self.recall[i], self.ndcg[i]))
    }

    /// Aligned plain-text rendering.
    pub fn render_text(&self) -> String {
        let mut out = String::from("K     Recall@K      NDCG@K\n");
        for (i, k) in self.ks.iter().enumerate() {
            out.push_str(&format!(
                "{:<5} {:<13.6} {:<13.6}\n",
                k, self.recall[i], self.ndcg[i]
            ));
        }
        out.push_str(&format!("users evaluated: {}\n", self.users_evaluated));
        out
    }
}

/// All items sorted by descending score, skipping excluded ones; ties break
/// by ascending item index.
pub fn rank_items(scores: &[f64], excluded: &[bool]) -> Vec<u32> {
    debug_assert_eq!(scores.len(), excluded.len());
    let mut order: Vec<u32> = (0..scores.len() as u32)
        .filter(|&i| !excluded[i as usize])
        .collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    order
}

/// Fraction of the user's positives that appear in the top K.
pub fn recall_at_k(ranked: &[u32], positives: &[u32], k: usize) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|i| positives.contains(i))
        .count();
    hits as f64 / positives.len() as f64
}

/// Binary-gain NDCG: gain `1/log2(r+1)` at 1-based rank `r`, normalized by
/// the ideal prefix `sum_{r=1..min(K,|positives|)} 1/log2(r+1)`.
pub fn ndcg_at_k(ranked: &[u32], positives: &[u32], k: usize) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (idx, item) in ranked.iter().take(k).enumerate() {
        if positives.contains(item) {
            dcg += 1.0 / ((idx + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for r in 1..=k.min(positives.len()) {
        idcg += 1.0 / ((r + 1) as f64).log2();
    }
    dcg / idcg
}

/// Evaluate one fold under the all-ranking protocol. Train positives are
/// always excluded from rankings; validation positives are additionally
/// excluded when ranking for test (unless `exclude_validation` is false).
pub fn evaluate_fold(
    state: &ModelState,
    features: &[&FeatureMatrix],
    split: &DataSplit,
    ks: &[usize],
    target: Fold,
    exclude_validation: bool,
) -> Result<MetricsTable> {
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(Error::InvalidArgument("K values must be positive".into()));
    }
    if target == Fold::Train {
        return Err(Error::InvalidArgument(
            "evaluation target must be validation or test".into(),
        ));
    }
    let reprs = ItemReprs::compute(state, features)?;
    let folds = split.user_folds();
    let n_items = split.n_items();

    let per_user: Vec<Option<Vec<(f64, f64)>>> = (0..split.n_users() as u32)
        .into_par_iter()
        .map(|u| {
            let f = &folds[u as usize];
            let positives = match target {
                Fold::Validation => &f.validation,
                Fold::Test => &f.test,
                Fold::Train => unreachable!(),
            };
            if positives.is_empty() {
                return Ok(None);
            }
            let mut excluded = vec![false; n_items];
            for &i in &f.train {
                excluded[i as usize] = true;
            }
            if target == Fold::Test && exclude_validation {
                for &i in &f.validation {
                    excluded[i as usize] = true;
                }
            }
            let scores = reprs.scores_for(state, u)?;
            let ranked = rank_items(&scores, &excluded);
            Ok(Some(
                ks.iter()
                    .map(|&k| {
                        (
                            recall_at_k(&ranked, positives, k),
                            ndcg_at_k(&ranked, positives, k),
                        )
                    })
                    .collect(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    let mut users = 0usize;
    for metrics in per_user.into_iter().flatten() {
        users += 1;
        for (i, (r, n)) in metrics.into_iter().enumerate() {
            recall[i] += r;
            ndcg[i] += n;
        }
    }
    if users == 0 {
        return Err(Error::NoEvaluableUsers);
    }
    for i in 0..ks.len() {
        recall[i] /= users as f64;
        ndcg[i] /= users as f64;
    }
    Ok(MetricsTable {
        ks: ks.to_vec(),
        recall,
        ndcg,
        users_evaluated: users,
    })
}

/// Test-fold evaluation (the reporting default).
pub fn evaluate(
    state: &ModelState,
    features: &[&FeatureMatrix],
    split: &DataSplit,
    ks: &[usize],
) -> Result<MetricsTable> {
    evaluate_fold(state, features, split, ks, Fold::Test, true)
}
