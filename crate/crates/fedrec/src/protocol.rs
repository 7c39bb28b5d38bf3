//! Experiment orchestration: warm-up followed by training epochs.
//!
//! Each epoch runs the synchronous four-step round: sample a user cohort,
//! let every sampled client query an item snapshot and refresh its latents,
//! train locally, then securely aggregate the padded deltas and apply them
//! server-side. All randomness flows from one master seed through named
//! per-epoch streams, so a run is a pure function of (dataset, config) and a
//! resumed run continues exactly where the interrupted one stopped.

use crate::client::{LocalTrainParams, OptimizerKind, UserState};
use crate::dataset::{DatasetSplit, InteractionGraph};
use crate::embedding::AggregationScheme;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::rng::{self, labels};
use crate::secagg;
use crate::server::{self, pad_update_rows, ItemStore};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// Layer-aggregation choice as it appears in config files. `Mean` expands to
/// uniform weights once the latent depth is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSpec {
    Mean,
    WeightedMean(Vec<f64>),
    LastPair,
    Concat,
}

impl SchemeSpec {
    /// Concrete scheme for `depth` latent layers.
    pub fn resolve(&self, depth: usize) -> Result<AggregationScheme> {
        let scheme = match self {
            SchemeSpec::Mean => AggregationScheme::uniform(depth),
            SchemeSpec::WeightedMean(w) => AggregationScheme::WeightedMean(w.clone()),
            SchemeSpec::LastPair => AggregationScheme::LastPair,
            SchemeSpec::Concat => AggregationScheme::Concat,
        };
        scheme.check(depth)?;
        Ok(scheme)
    }
}

fn default_init_scale() -> f64 {
    0.1
}
fn default_neg_count() -> usize {
    32
}
fn default_scheme() -> SchemeSpec {
    SchemeSpec::Mean
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adaptive
}
fn default_eval_every() -> usize {
    200
}
fn default_eval_cut() -> usize {
    20
}
fn default_frac_bits() -> u32 {
    secagg::DEFAULT_FRAC_BITS
}

/// Everything a run depends on besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Training epochs after warm-up.
    pub epochs: usize,
    /// Cohort size sampled each epoch.
    pub users_per_epoch: usize,
    /// Local iterations per sampled client per epoch.
    pub local_iters: usize,
    /// Number of lazily refreshed latent layers (0 disables propagation).
    pub latent_depth: usize,
    /// Embedding dimension.
    pub dim: usize,
    /// Local learning rate.
    pub local_rate: f64,
    /// Server rate applied to aggregated deltas; `None` means 1/cohort so
    /// the applied update is the cohort mean.
    #[serde(default)]
    pub server_rate: Option<f64>,
    /// L2 weight on touched layer-0 parameters.
    pub reg_weight: f64,
    /// Std-dev of the Gaussian layer-0 init.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Negatives mixed into each item query.
    #[serde(default = "default_neg_count")]
    pub neg_count: usize,
    #[serde(default = "default_scheme")]
    pub scheme: SchemeSpec,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Evaluation cadence in epochs; the final epoch is always evaluated.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Ranking cutoff for recall and NDCG.
    #[serde(default = "default_eval_cut")]
    pub eval_cut: usize,
    /// Fractional bits of the fixed-point aggregation encoding.
    #[serde(default = "default_frac_bits")]
    pub frac_bits: u32,
    pub master_seed: u64,
}

impl ExperimentConfig {
    /// Validates internal consistency against a dataset of `num_users`.
    pub fn validate(&self, num_users: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.users_per_epoch == 0 || self.users_per_epoch > num_users {
            return fail(format!(
                "cohort of {} users from a dataset of {num_users}",
                self.users_per_epoch
            ));
        }
        if self.local_iters == 0 {
            return fail("local_iters must be at least 1".into());
        }
        if self.dim == 0 {
            return fail("dim must be at least 1".into());
        }
        if !(self.local_rate.is_finite() && self.local_rate >= 0.0) {
            return fail(format!("local_rate {} must be finite and >= 0", self.local_rate));
        }
        if let Some(a) = self.server_rate {
            if !(a.is_finite() && a > 0.0) {
                return fail(format!("server_rate {a} must be finite and positive"));
            }
        }
        if !(self.reg_weight.is_finite() && self.reg_weight >= 0.0) {
            return fail(format!("reg_weight {} must be finite and >= 0", self.reg_weight));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return fail(format!("init_scale {} must be finite and >= 0", self.init_scale));
        }
        if self.neg_count == 0 {
            return fail("neg_count must be at least 1".into());
        }
        if self.eval_every == 0 || self.eval_cut == 0 {
            return fail("eval_every and eval_cut must be at least 1".into());
        }
        self.scheme.resolve(self.latent_depth)?;
        Ok(())
    }

    /// Server rate after resolving the cohort-mean default.
    pub fn resolved_server_rate(&self) -> f64 {
        self.server_rate
            .unwrap_or(1.0 / self.users_per_epoch as f64)
    }

    fn local_params(&self) -> Result<LocalTrainParams> {
        Ok(LocalTrainParams {
            iters: self.local_iters,
            rate: self.local_rate,
            reg_weight: self.reg_weight,
            optimizer: self.optimizer,
            scheme: self.scheme.resolve(self.latent_depth)?,
        })
    }
}

/// Mutable state of a run between epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ItemStore,
    pub clients: Vec<UserState>,
    /// Epochs fully applied to `store`; the next epoch is this plus one.
    pub completed_epochs: usize,
}

impl TrainState {
    pub fn graph(&self) -> &Arc<InteractionGraph> {
        &self.clients[0].graph
    }
}

/// Outcome of one epoch.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean first-iteration (pre-update) local loss over the cohort.
    pub mean_loss: f64,
    pub wall_secs: f64,
    /// Upload traffic entering secure aggregation this epoch: every cohort
    /// member ships (1 + depth) padded item-shaped matrices.
    pub upload_bytes: u64,
    pub eval: Option<EvalReport>,
}

/// One line of the metrics trace. Epoch 0 is the warm-up evaluation; loss is
/// absent there, metrics are absent between evaluation epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub epoch: usize,
    pub loss: Option<f64>,
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
}

/// Runs the warm-up phase and wraps the result for training.
pub fn initialize(graph: &Arc<InteractionGraph>, config: &ExperimentConfig) -> Result<TrainState> {
    config.validate(graph.num_users)?;
    let (store, clients) = server::warmup(
        graph,
        config.dim,
        config.latent_depth,
        config.init_scale,
        config.frac_bits,
        config.master_seed,
    )?;
    Ok(TrainState {
        store,
        clients,
        completed_epochs: 0,
    })
}

/// Runs the next epoch: sample, query + refresh, local training, secure
/// aggregation, server update. Deterministic in (master seed, epoch index).
pub fn run_epoch(state: &mut TrainState, config: &ExperimentConfig) -> Result<EpochReport> {
    let started = Instant::now();
    let epoch = state.completed_epochs + 1;
    let diverged = |e: Error| match e {
        Error::NonFinite(msg) => Error::Divergence { epoch, msg },
        other => other,
    };

    let n = state.store.num_items();
    let dim = state.store.dim();
    let depth = state.store.depth();
    let seed = config.master_seed;
    let params = config.local_params()?;

    let mut sample_rng = rng::stream(seed, &labels::sample(epoch));
    let cohort = server::sample_users(
        state.clients.len(),
        config.users_per_epoch,
        &mut sample_rng,
    )?;

    let mut inputs: Vec<(usize, Vec<f64>)> = Vec::with_capacity(cohort.len());
    let mut loss_sum = 0.0;
    for &u in &cohort {
        let client = &mut state.clients[u];
        let mut query_rng = rng::stream(seed, &labels::query(epoch, u));
        let ids = client.sample_item_set(config.neg_count, &mut query_rng);
        let view = state.store.view(&ids)?;

        // Refresh deltas for layers 1..depth-1 drive item orders 2..depth;
        // the trained layer-0 delta drives order 1.
        let old_latents: Vec<Vec<f64>> =
            (1..depth).map(|k| client.embedding.layers[k].clone()).collect();
        client
            .refresh_latent_user(&view, &state.store.item_degree)
            .map_err(diverged)?;

        let mut batch_rng = rng::stream(seed, &labels::batch(epoch, u));
        let update = client
            .local_train(&view, &params, &mut batch_rng)
            .map_err(diverged)?;
        loss_sum += update.first_loss;

        let mut latent_deltas = Vec::with_capacity(depth);
        if depth > 0 {
            latent_deltas.push(update.user_delta.clone());
            for (k, old) in (1..depth).zip(&old_latents) {
                latent_deltas.push(
                    client.embedding.layers[k]
                        .iter()
                        .zip(old)
                        .map(|(new, old)| new - old)
                        .collect(),
                );
            }
        }
        let matrices = client.build_update_matrix(&latent_deltas, &state.store.item_degree);

        let mut upload = pad_update_rows(n, dim, &update.item_deltas);
        upload.reserve(depth * n * dim);
        for rows in &matrices {
            upload.extend_from_slice(&pad_update_rows(n, dim, rows));
        }
        inputs.push((u, upload));
    }

    let key = rng::derive_seed(seed, &labels::train_round(epoch));
    let summed = secagg::secure_sum(&inputs, &key, config.frac_bits).map_err(diverged)?;
    let rate = config.resolved_server_rate();
    let span = n * dim;
    state
        .store
        .apply_item_updates(&summed[..span], rate)
        .map_err(diverged)?;
    let mats: Vec<Vec<f64>> = (0..depth)
        .map(|k| summed[(k + 1) * span..(k + 2) * span].to_vec())
        .collect();
    state
        .store
        .apply_latent_item_updates(&mats, rate)
        .map_err(diverged)?;

    let mean_loss = loss_sum / cohort.len() as f64;
    if !mean_loss.is_finite() {
        return Err(Error::Divergence {
            epoch,
            msg: format!("mean local loss {mean_loss}"),
        });
    }
    state.completed_epochs = epoch;
    Ok(EpochReport {
        epoch,
        mean_loss,
        wall_secs: started.elapsed().as_secs_f64(),
        upload_bytes: (cohort.len() * (1 + depth) * span * 8) as u64,
        eval: None,
    })
}

fn eval_now(state: &TrainState, split: &DatasetSplit, config: &ExperimentConfig) -> Result<EvalReport> {
    eval::evaluate(
        &state.store,
        &state.clients,
        split,
        &config.scheme.resolve(config.latent_depth)?,
        config.eval_cut,
    )
}

fn drive<F>(
    state: &mut TrainState,
    split: &DatasetSplit,
    config: &ExperimentConfig,
    evaluable: bool,
    on_record: &mut F,
) -> Result<()>
where
    F: FnMut(&TraceRecord) -> Result<()>,
{
    while state.completed_epochs < config.epochs {
        let report = run_epoch(state, config)?;
        let e = report.epoch;
        let eval = if evaluable && (e % config.eval_every == 0 || e == config.epochs) {
            Some(eval_now(state, split, config)?)
        } else {
            None
        };
        on_record(&TraceRecord {
            epoch: e,
            loss: Some(report.mean_loss),
            recall: eval.map(|r| r.mean_recall),
            ndcg: eval.map(|r| r.mean_ndcg),
        })?;
    }
    Ok(())
}

/// Warm-up plus `epochs` training epochs. Emits one trace record per epoch
/// and a leading epoch-0 record with the warm-up evaluation. Datasets with
/// no held-out items skip evaluation but still trace losses.
pub fn run_experiment<F>(
    split: &DatasetSplit,
    config: &ExperimentConfig,
    mut on_record: F,
) -> Result<TrainState>
where
    F: FnMut(&TraceRecord) -> Result<()>,
{
    split.validate()?;
    let graph = Arc::new(split.train.clone());
    let mut state = initialize(&graph, config)?;
    let evaluable = split.test_items.iter().any(|t| !t.is_empty());
    let warm = if evaluable {
        Some(eval_now(&state, split, config)?)
    } else {
        None
    };
    on_record(&TraceRecord {
        epoch: 0,
        loss: None,
        recall: warm.map(|r| r.mean_recall),
        ndcg: warm.map(|r| r.mean_ndcg),
    })?;
    drive(&mut state, split, config, evaluable, &mut on_record)?;
    Ok(state)
}

/// Continues a checkpointed run to `config.epochs`. The trace covers only
/// the new epochs; the warm-up record belongs to the original run.
pub fn resume_experiment<F>(
    mut state: TrainState,
    split: &DatasetSplit,
    config: &ExperimentConfig,
    mut on_record: F,
) -> Result<TrainState>
where
    F: FnMut(&TraceRecord) -> Result<()>,
{
    split.validate()?;
    config.validate(split.train.num_users)?;
    if state.completed_epochs > config.epochs {
        return Err(Error::Validation(format!(
            "checkpoint already at epoch {}, config stops at {}",
            state.completed_epochs, config.epochs
        )));
    }
    if state.clients.len() != split.train.num_users
        || state.store.num_items() != split.train.num_items
        || state.store.dim() != config.dim
        || state.store.depth() != config.latent_depth
    {
        return Err(Error::Validation(
            "checkpoint shape does not match the dataset and config".into(),
        ));
    }
    let evaluable = split.test_items.iter().any(|t| !t.is_empty());
    drive(&mut state, split, config, evaluable, &mut on_record)?;
    Ok(state)
}
