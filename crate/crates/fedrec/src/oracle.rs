//! Dense centralized propagation, the correctness reference for the
//! federated warm-up and lazy-update paths.
//!
//! Clarity over speed: everything is a dense matrix, intended for graphs of
//! at most a few hundred nodes.

use crate::dataset::{coeff_from_degrees, InteractionGraph};
use crate::embedding::{final_representation, AggregationScheme, LayeredEmbedding};
use crate::error::{Error, Result};
use ndarray::Array2;

/// User and item layers 0..=depth in matrix form; layer 0 is the input.
#[derive(Clone, Debug)]
pub struct DensePropagationState {
    pub user_layers: Vec<Array2<f64>>,
    pub item_layers: Vec<Array2<f64>>,
}

/// Runs `depth` rounds of the degree-normalized propagation rule:
/// layer k+1 of a node is the coefficient-weighted sum of its neighbors'
/// layer k. Items nobody interacted with keep zero vectors; their
/// coefficients are never evaluated.
pub fn propagate(
    graph: &InteractionGraph,
    user0: &Array2<f64>,
    item0: &Array2<f64>,
    depth: usize,
) -> Result<DensePropagationState> {
    let (m, n) = (graph.num_users, graph.num_items);
    let d = user0.ncols();
    if user0.nrows() != m || item0.nrows() != n || item0.ncols() != d {
        return Err(Error::Dimension(format!(
            "propagate got user {}x{}, item {}x{} for graph {m}x{n}",
            user0.nrows(),
            user0.ncols(),
            item0.nrows(),
            item0.ncols()
        )));
    }
    if graph.user_degree.iter().any(|&du| du == 0) {
        return Err(Error::DegenerateNode("user with no interactions".into()));
    }

    let item_users = graph.item_users();
    let mut user_layers = vec![user0.clone()];
    let mut item_layers = vec![item0.clone()];
    for k in 0..depth {
        let mut next_user = Array2::zeros((m, d));
        for u in 0..m {
            let du = graph.user_degree[u];
            let mut row = next_user.row_mut(u);
            for &t in &graph.user_items[u] {
                let c = coeff_from_degrees(du, graph.item_degree[t]);
                row.scaled_add(c, &item_layers[k].row(t));
            }
        }
        let mut next_item = Array2::zeros((n, d));
        for t in 0..n {
            let dt = graph.item_degree[t];
            let mut row = next_item.row_mut(t);
            for &u in &item_users[t] {
                let c = coeff_from_degrees(graph.user_degree[u], dt);
                row.scaled_add(c, &user_layers[k].row(u));
            }
        }
        user_layers.push(next_user);
        item_layers.push(next_item);
    }
    Ok(DensePropagationState {
        user_layers,
        item_layers,
    })
}

impl DensePropagationState {
    pub fn user_embedding(&self, u: usize) -> LayeredEmbedding {
        LayeredEmbedding {
            layers: self.user_layers.iter().map(|l| l.row(u).to_vec()).collect(),
        }
    }

    pub fn item_embedding(&self, t: usize) -> LayeredEmbedding {
        LayeredEmbedding {
            layers: self.item_layers.iter().map(|l| l.row(t).to_vec()).collect(),
        }
    }
}

/// Pairwise affinity of all users against all items under a scheme.
pub fn centralized_scores(
    state: &DensePropagationState,
    scheme: &AggregationScheme,
) -> Result<Array2<f64>> {
    let m = state.user_layers[0].nrows();
    let n = state.item_layers[0].nrows();
    let user_reps: Vec<Vec<f64>> = (0..m)
        .map(|u| final_representation(&state.user_embedding(u), scheme))
        .collect::<Result<_>>()?;
    let item_reps: Vec<Vec<f64>> = (0..n)
        .map(|t| final_representation(&state.item_embedding(t), scheme))
        .collect::<Result<_>>()?;
    let mut scores = Array2::zeros((m, n));
    for (u, ur) in user_reps.iter().enumerate() {
        for (t, ir) in item_reps.iter().enumerate() {
            scores[(u, t)] = crate::embedding::dot(ur, ir);
        }
    }
    Ok(scores)
}
