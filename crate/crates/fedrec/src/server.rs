//! Server role: item-side state and the aggregation rounds that build it.
//!
//! The server owns the learnable item layer 0 and one aggregated latent
//! matrix per propagation order. It never sees an individual client's
//! interactions or uploads; everything item-side arrives through
//! [`crate::secagg::secure_sum`], so only the across-client total is
//! revealed. Degree counts are obtained the same way.

use crate::client::{ItemView, UserState};
use crate::dataset::InteractionGraph;
use crate::embedding::LayeredEmbedding;
use crate::error::{Error, Result};
use crate::rng::{self, labels};
use crate::secagg;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

/// Server-side item state.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemStore {
    /// Learnable item embeddings, one row per item.
    pub layer0: Array2<f64>,
    /// Aggregated latent layers; `latents[k]` holds propagation order k+1.
    pub latents: Vec<Array2<f64>>,
    /// Securely counted item degrees, broadcast to clients.
    pub item_degree: Vec<usize>,
}

impl ItemStore {
    pub fn num_items(&self) -> usize {
        self.layer0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.layer0.ncols()
    }

    /// Number of latent propagation orders kept alongside layer 0.
    pub fn depth(&self) -> usize {
        self.latents.len()
    }

    /// Layered embedding of one item as clients receive it.
    pub fn item_embedding(&self, t: usize) -> LayeredEmbedding {
        let mut layers = Vec::with_capacity(1 + self.depth());
        layers.push(self.layer0.row(t).to_vec());
        for latent in &self.latents {
            layers.push(latent.row(t).to_vec());
        }
        LayeredEmbedding { layers }
    }

    /// Snapshot of the requested items, ids strictly ascending.
    pub fn view(&self, ids: &[usize]) -> Result<ItemView> {
        secagg::check_ascending(ids)?;
        if let Some(&last) = ids.last() {
            if last >= self.num_items() {
                return Err(Error::Range(format!(
                    "queried item {last} outside store of {}",
                    self.num_items()
                )));
            }
        }
        Ok(ItemView {
            ids: ids.to_vec(),
            embeddings: ids.iter().map(|&t| self.item_embedding(t)).collect(),
        })
    }

    /// Snapshot of every item.
    pub fn view_all(&self) -> ItemView {
        let ids: Vec<usize> = (0..self.num_items()).collect();
        self.view(&ids).expect("full range is ascending and in range")
    }

    /// Adds `rate` times the aggregated layer-0 delta (dense, row-major).
    pub fn apply_item_updates(&mut self, delta: &[f64], rate: f64) -> Result<()> {
        let want = self.num_items() * self.dim();
        if delta.len() != want {
            return Err(Error::Dimension(format!(
                "layer-0 update of {} entries, store holds {want}",
                delta.len()
            )));
        }
        if delta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("aggregated layer-0 update".into()));
        }
        for (p, &d) in self.layer0.iter_mut().zip(delta) {
            *p += rate * d;
        }
        Ok(())
    }

    /// Adds `rate` times each aggregated latent update matrix. The matrix
    /// built from layer-k user deltas lands on item latent order k+1, so
    /// `mats[k]` updates `latents[k]`.
    pub fn apply_latent_item_updates(&mut self, mats: &[Vec<f64>], rate: f64) -> Result<()> {
        if mats.len() != self.depth() {
            return Err(Error::Dimension(format!(
                "{} latent update matrices for depth {}",
                mats.len(),
                self.depth()
            )));
        }
        let want = self.num_items() * self.dim();
        for (k, mat) in mats.iter().enumerate() {
            if mat.len() != want {
                return Err(Error::Dimension(format!(
                    "latent update {k} has {} entries, store holds {want}",
                    mat.len()
                )));
            }
            if mat.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("aggregated latent update {k}")));
            }
        }
        for (latent, mat) in self.latents.iter_mut().zip(mats) {
            for (p, &d) in latent.iter_mut().zip(mat) {
                *p += rate * d;
            }
        }
        Ok(())
    }
}

/// Scatters sparse per-item rows into the dense row-major buffer that enters
/// secure aggregation; absent items stay zero.
pub fn pad_update_rows(
    num_items: usize,
    dim: usize,
    rows: &[(usize, Vec<f64>)],
) -> Vec<f64> {
    let mut flat = vec![0.0; num_items * dim];
    for (t, row) in rows {
        debug_assert!(*t < num_items && row.len() == dim);
        flat[t * dim..(t + 1) * dim].copy_from_slice(row);
    }
    flat
}

/// Counts item degrees without observing any single interaction row: every
/// client contributes its binary row through one secure-sum round.
///
/// Binary values and their sums are exactly representable in fixed point, so
/// the decoded totals are exact integers.
pub fn compute_item_degrees(
    graph: &InteractionGraph,
    round_key: [u8; 32],
    frac_bits: u32,
) -> Result<Vec<usize>> {
    if graph.num_users == 0 {
        return Err(Error::Validation("degree count over zero clients".into()));
    }
    let inputs: Vec<(usize, Vec<f64>)> = (0..graph.num_users)
        .map(|u| (u, graph.user_row(u)))
        .collect();
    let sums = secagg::secure_sum(&inputs, &round_key, frac_bits)?;
    sums.into_iter()
        .map(|x| {
            if x.fract() != 0.0 || x < 0.0 || x > graph.num_users as f64 {
                return Err(Error::Protocol(format!(
                    "degree aggregate {x} is not a plausible count"
                )));
            }
            Ok(x as usize)
        })
        .collect()
}

/// Builds the initial state: secure degree count, Gaussian layer-0 draws on
/// both sides, then `depth` aggregation rounds that turn layer-(k-1) user
/// latents into the order-k item latent matrix.
///
/// Every client participates in every round; the resulting store matches a
/// dense propagation of the same layer-0 matrices up to fixed-point noise.
pub fn warmup(
    graph: &Arc<InteractionGraph>,
    dim: usize,
    depth: usize,
    init_scale: f64,
    frac_bits: u32,
    master_seed: u64,
) -> Result<(ItemStore, Vec<UserState>)> {
    if dim == 0 {
        return Err(Error::Validation("embedding dimension must be positive".into()));
    }
    if !(init_scale.is_finite() && init_scale >= 0.0) {
        return Err(Error::Validation(format!(
            "init scale {init_scale} must be finite and non-negative"
        )));
    }
    let normal = Normal::new(0.0, init_scale)
        .map_err(|e| Error::Validation(format!("init distribution: {e}")))?;
    let n = graph.num_items;
    let m = graph.num_users;

    let item_degree =
        compute_item_degrees(graph, rng::derive_seed(master_seed, labels::DEGREES), frac_bits)?;

    let mut item_rng = rng_stream(master_seed, labels::INIT_ITEM);
    let layer0 = Array2::from_shape_fn((n, dim), |_| normal.sample(&mut item_rng));
    let mut store = ItemStore {
        layer0,
        latents: vec![Array2::zeros((n, dim)); depth],
        item_degree,
    };

    let mut clients: Vec<UserState> = (0..m)
        .map(|u| {
            let mut r = rng_stream(master_seed, &labels::init_user(u));
            let layer0 = (0..dim).map(|_| normal.sample(&mut r)).collect();
            UserState::new(u, layer0, depth, graph.clone())
        })
        .collect();

    for k in 1..=depth {
        // Snapshot before this round's item update; order k reads k-1.
        let view = store.view_all();
        let mut inputs = Vec::with_capacity(m);
        for client in clients.iter_mut() {
            client.refresh_latent_layer(k, &view, &store.item_degree)?;
            let rows = client
                .build_update_matrix(&[client.embedding.layers[k - 1].clone()], &store.item_degree);
            inputs.push((client.user_id, pad_update_rows(n, dim, &rows[0])));
        }
        let key = rng::derive_seed(master_seed, &labels::warmup_round(k));
        let summed = secagg::secure_sum(&inputs, &key, frac_bits)?;
        if summed.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("warm-up aggregate for order {k}")));
        }
        store.latents[k - 1] =
            Array2::from_shape_vec((n, dim), summed).expect("aggregate length checked");
    }
    Ok((store, clients))
}

/// Draws `count` distinct user ids uniformly, returned ascending.
pub fn sample_users(total: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::Validation(format!(
            "cannot sample {count} users out of {total}"
        )));
    }
    let mut ids = rand::seq::index::sample(rng, total, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

fn rng_stream(master_seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(rng::derive_seed(master_seed, label))
}
