//! Ranking evaluation: recall and NDCG over held-out interactions.
//!
//! Evaluation reads embeddings exactly as stored, so user latents reflect
//! their last refresh rather than a fresh propagation; that staleness is a
//! property of the protocol and is deliberately visible here.

use crate::client::UserState;
use crate::dataset::DatasetSplit;
use crate::embedding::{dot, final_representation, AggregationScheme};
use crate::error::{Error, Result};
use crate::server::ItemStore;

/// How the ideal DCG is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdcgMode {
    /// Ideal DCG over `min(|truth|, n)` positions: a perfect ranking of the
    /// available relevant items scores 1. The default.
    Capped,
    /// Ideal DCG over all `n` positions regardless of `|truth|`.
    Uncapped,
}

/// Mean metrics over the evaluable users at one cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub cut: usize,
    /// Users with a non-empty test set; the others are skipped.
    pub users_evaluated: usize,
    pub mean_recall: f64,
    pub mean_ndcg: f64,
}

/// One evaluable user's metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserMetrics {
    pub user_id: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Ranks item ids by descending score, ties broken by ascending id, with
/// `exclude` (ascending; typically the user's training items) removed, then
/// truncates to the top `cut`. Fewer candidates than `cut` yields them all.
pub fn rank_items(scores: &[f64], exclude: &[usize], cut: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len())
        .filter(|t| exclude.binary_search(t).is_err())
        .collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(cut);
    ids
}

fn check_cut_and_truth(truth: &[usize], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Validation("metric cutoff must be positive".into()));
    }
    if truth.is_empty() {
        return Err(Error::Evaluation("empty truth set".into()));
    }
    Ok(())
}

/// Fraction of the truth set found in the top `n` of `ranked`.
pub fn recall_at_n(ranked: &[usize], truth: &[usize], n: usize) -> Result<f64> {
    check_cut_and_truth(truth, n)?;
    let hits = ranked
        .iter()
        .take(n)
        .filter(|t| truth.binary_search(t).is_ok())
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Discounted cumulative gain at `n` normalized by the ideal ranking's gain.
/// A lone relevant item at rank 2 gives `1/log2(3) = 0.63093` under
/// [`IdcgMode::Capped`].
pub fn ndcg_at_n(ranked: &[usize], truth: &[usize], n: usize, mode: IdcgMode) -> Result<f64> {
    check_cut_and_truth(truth, n)?;
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    // Accumulated by hand: an empty `Iterator::sum` yields -0.0, which would
    // leak a "-0" into exported tables.
    let mut dcg = 0.0;
    for (pos, t) in ranked.iter().take(n).enumerate() {
        if truth.binary_search(t).is_ok() {
            dcg += discount(pos);
        }
    }
    let ideal_positions = match mode {
        IdcgMode::Capped => truth.len().min(n),
        IdcgMode::Uncapped => n,
    };
    let idcg: f64 = (0..ideal_positions).map(discount).sum();
    Ok(dcg / idcg)
}

/// Scores every item for every user with a held-out test set, ranks with the
/// user's training items masked out, and averages recall and capped NDCG at
/// `cut`. Errors if no user is evaluable.
pub fn evaluate(
    store: &ItemStore,
    users: &[UserState],
    split: &DatasetSplit,
    scheme: &AggregationScheme,
    cut: usize,
) -> Result<EvalReport> {
    evaluate_detailed(store, users, split, scheme, cut).map(|(report, _)| report)
}

/// [`evaluate`] plus the per-user metric table, one row per evaluable user
/// in ascending id order.
pub fn evaluate_detailed(
    store: &ItemStore,
    users: &[UserState],
    split: &DatasetSplit,
    scheme: &AggregationScheme,
    cut: usize,
) -> Result<(EvalReport, Vec<UserMetrics>)> {
    if cut == 0 {
        return Err(Error::Validation("metric cutoff must be positive".into()));
    }
    if users.len() != split.train.num_users {
        return Err(Error::Dimension(format!(
            "{} client states for {} training users",
            users.len(),
            split.train.num_users
        )));
    }
    let item_reps: Vec<Vec<f64>> = (0..store.num_items())
        .map(|t| final_representation(&store.item_embedding(t), scheme))
        .collect::<Result<_>>()?;

    let mut table = Vec::new();
    for user in users {
        let truth = &split.test_items[user.user_id];
        if truth.is_empty() {
            continue;
        }
        let user_rep = final_representation(&user.embedding, scheme)?;
        let scores: Vec<f64> = item_reps.iter().map(|r| dot(&user_rep, r)).collect();
        let ranked = rank_items(&scores, user.items(), cut);
        table.push(UserMetrics {
            user_id: user.user_id,
            recall: recall_at_n(&ranked, truth, cut)?,
            ndcg: ndcg_at_n(&ranked, truth, cut, IdcgMode::Capped)?,
        });
    }
    if table.is_empty() {
        return Err(Error::Evaluation("no user has a held-out test set".into()));
    }
    let report = EvalReport {
        cut,
        users_evaluated: table.len(),
        mean_recall: table.iter().map(|m| m.recall).sum::<f64>() / table.len() as f64,
        mean_ndcg: table.iter().map(|m| m.ndcg).sum::<f64>() / table.len() as f64,
    };
    Ok((report, table))
}
