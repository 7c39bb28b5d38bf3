//! Embedding containers, final-representation aggregation, and scoring.
//!
//! A node carries `depth + 1` vectors: layer 0 is learnable, layers >= 1 are
//! propagated ("latent") summaries of multi-hop connectivity. Ranking uses a
//! single final representation per node, built by one of three schemes.

use crate::error::{Error, Result};

/// Layers 0..=depth of one node's embedding, all of equal dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredEmbedding {
    pub layers: Vec<Vec<f64>>,
}

impl LayeredEmbedding {
    pub fn zeros(depth: usize, dim: usize) -> Self {
        Self {
            layers: vec![vec![0.0; dim]; depth + 1],
        }
    }

    pub fn from_layer0(layer0: Vec<f64>, depth: usize) -> Self {
        let dim = layer0.len();
        let mut layers = Vec::with_capacity(depth + 1);
        layers.push(layer0);
        for _ in 0..depth {
            layers.push(vec![0.0; dim]);
        }
        Self { layers }
    }

    /// Number of latent layers (total layers minus the learnable layer 0).
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.layers[0].len()
    }
}

/// How layers 0..=depth collapse into the final representation.
#[derive(Clone, Debug, PartialEq)]
pub enum AggregationScheme {
    /// `sum_k w[k] * layer[k]`; `w` has depth+1 entries.
    WeightedMean(Vec<f64>),
    /// `(layer[0] + layer[depth]) / 2`.
    LastPair,
    /// Layers concatenated; scoring reduces to like-order inner products.
    Concat,
}

impl AggregationScheme {
    /// Uniform weights `1 / (depth + 1)`, the default.
    pub fn uniform(depth: usize) -> Self {
        AggregationScheme::WeightedMean(vec![1.0 / (depth + 1) as f64; depth + 1])
    }

    pub fn check(&self, depth: usize) -> Result<()> {
        if let AggregationScheme::WeightedMean(w) = self {
            if w.len() != depth + 1 {
                return Err(Error::Dimension(format!(
                    "weighted mean has {} weights for depth {depth}",
                    w.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation("non-finite aggregation weight".into()));
            }
        }
        Ok(())
    }

    /// Length of the final representation.
    pub fn rep_dim(&self, depth: usize, dim: usize) -> usize {
        match self {
            AggregationScheme::Concat => (depth + 1) * dim,
            _ => dim,
        }
    }

    /// d(final representation)/d(layer 0), a scalar for the schemes whose
    /// final representation is layer-0-linear with all other layers fixed.
    /// `None` for concatenation, where layer 0 occupies its own block.
    ///
    /// At depth 0 the last-pair average degenerates to (e0 + e0)/2, so the
    /// coefficient is 1, not 1/2.
    pub fn layer0_coeff(&self, depth: usize) -> Option<f64> {
        match self {
            AggregationScheme::WeightedMean(w) => Some(w[0]),
            AggregationScheme::LastPair => Some(if depth == 0 { 1.0 } else { 0.5 }),
            AggregationScheme::Concat => None,
        }
    }
}

/// Collapses the layers into the scheme's final representation.
pub fn final_representation(e: &LayeredEmbedding, scheme: &AggregationScheme) -> Result<Vec<f64>> {
    let depth = e.depth();
    let dim = e.dim();
    scheme.check(depth)?;
    match scheme {
        AggregationScheme::WeightedMean(w) => {
            let mut out = vec![0.0; dim];
            for (k, layer) in e.layers.iter().enumerate() {
                let wk = w[k];
                for (o, &x) in out.iter_mut().zip(layer) {
                    *o += wk * x;
                }
            }
            Ok(out)
        }
        AggregationScheme::LastPair => {
            let first = &e.layers[0];
            let last = &e.layers[depth];
            Ok(first
                .iter()
                .zip(last)
                .map(|(&a, &b)| (a + b) / 2.0)
                .collect())
        }
        AggregationScheme::Concat => {
            let mut out = Vec::with_capacity((depth + 1) * dim);
            for layer in &e.layers {
                out.extend_from_slice(layer);
            }
            Ok(out)
        }
    }
}

/// Inner-product affinity between two final representations.
pub fn score(user_rep: &[f64], item_rep: &[f64]) -> Result<f64> {
    if user_rep.len() != item_rep.len() {
        return Err(Error::Dimension(format!(
            "score over lengths {} and {}",
            user_rep.len(),
            item_rep.len()
        )));
    }
    Ok(dot(user_rep, item_rep))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(layers: Vec<Vec<f64>>) -> LayeredEmbedding {
        LayeredEmbedding { layers }
    }

    #[test]
    fn weighted_mean_averages_layers() {
        let e = emb(vec![vec![2.0], vec![0.0]]);
        let rep = final_representation(&e, &AggregationScheme::WeightedMean(vec![0.5, 0.5]));
        assert_eq!(rep.unwrap(), vec![1.0]);
    }

    #[test]
    fn depth_zero_mean_is_identity() {
        let e = emb(vec![vec![3.0, -1.0]]);
        let rep = final_representation(&e, &AggregationScheme::WeightedMean(vec![1.0]));
        assert_eq!(rep.unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn last_pair_averages_first_and_last() {
        let e = emb(vec![vec![1.0, 0.0], vec![9.0, 9.0], vec![0.0, 1.0]]);
        let rep = final_representation(&e, &AggregationScheme::LastPair);
        assert_eq!(rep.unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn last_pair_at_depth_zero_is_identity_with_unit_coeff() {
        let e = emb(vec![vec![0.3, -2.5]]);
        let rep = final_representation(&e, &AggregationScheme::LastPair).unwrap();
        assert_eq!(rep, vec![0.3, -2.5]);
        assert_eq!(AggregationScheme::LastPair.layer0_coeff(0), Some(1.0));
        assert_eq!(AggregationScheme::LastPair.layer0_coeff(2), Some(0.5));
    }

    #[test]
    fn concat_stacks_layers() {
        let e = emb(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let rep = final_representation(&e, &AggregationScheme::Concat);
        assert_eq!(rep.unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn score_hand_values() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mismatched_weight_count_is_rejected() {
        let e = emb(vec![vec![1.0], vec![2.0]]);
        assert!(final_representation(&e, &AggregationScheme::WeightedMean(vec![1.0])).is_err());
    }

    fn layered(depth: usize, dim: usize) -> impl Strategy<Value = LayeredEmbedding> {
        proptest::collection::vec(
            proptest::collection::vec(-10.0f64..10.0, dim),
            depth + 1,
        )
        .prop_map(|layers| LayeredEmbedding { layers })
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn score_is_symmetric_and_psd(v in proptest::collection::vec(-10.0f64..10.0, 1..8),
                                      w in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            prop_assume!(v.len() == w.len());
            prop_assert_eq!(score(&v, &w).unwrap(), score(&w, &v).unwrap());
            prop_assert!(score(&v, &v).unwrap() >= 0.0);
        }

        #[test]
        fn aggregation_is_layerwise_linear(
            e in layered(2, 4),
            f in layered(2, 4),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let combo = LayeredEmbedding {
                layers: e.layers.iter().zip(&f.layers).map(|(le, lf)| {
                    le.iter().zip(lf).map(|(&x, &y)| a * x + b * y).collect()
                }).collect(),
            };
            for scheme in [AggregationScheme::uniform(2), AggregationScheme::LastPair] {
                let lhs = final_representation(&combo, &scheme).unwrap();
                let re = final_representation(&e, &scheme).unwrap();
                let rf = final_representation(&f, &scheme).unwrap();
                let rhs: Vec<f64> = re.iter().zip(&rf).map(|(&x, &y)| a * x + b * y).collect();
                prop_assert!(close(&lhs, &rhs, 1e-9));
            }
        }

        #[test]
        fn scheme_score_identities(u in layered(2, 4), t in layered(2, 4)) {
            // Unit-weight mean couples every pair of layers; concatenation
            // couples only like orders.
            let unit = AggregationScheme::WeightedMean(vec![1.0; 3]);
            let mean_score = score(
                &final_representation(&u, &unit).unwrap(),
                &final_representation(&t, &unit).unwrap(),
            ).unwrap();
            let mut cross = 0.0;
            let mut like = 0.0;
            for lu in &u.layers {
                for lt in &t.layers {
                    cross += dot(lu, lt);
                }
            }
            for (lu, lt) in u.layers.iter().zip(&t.layers) {
                like += dot(lu, lt);
            }
            let concat_score = score(
                &final_representation(&u, &AggregationScheme::Concat).unwrap(),
                &final_representation(&t, &AggregationScheme::Concat).unwrap(),
            ).unwrap();
            prop_assert!((mean_score - cross).abs() <= 1e-9 * (1.0 + cross.abs()));
            prop_assert!((concat_score - like).abs() <= 1e-9 * (1.0 + like.abs()));
        }
    }
}
