//! CCC losses with analytic parameter gradients.

use std::collections::BTreeMap;

use super::model::{Gradients, HeadRef, ModelParams, Trace};
use crate::error::{Error, Result};
use crate::metrics::ccc_gradient_unchecked;
use crate::seeding::Rng;

/// One sample with its aggregate (mean) labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateItem<'a> {
    pub features: &'a [f64],
    /// [activation, valence]
    pub target: [f64; 2],
}

/// One (sample, annotator) pair; `head` indexes the annotator's head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndividualItem<'a> {
    pub features: &'a [f64],
    pub head: usize,
    pub target: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Gradients,
    /// Number of (group, dimension) CCC terms that were degenerate and
    /// contributed zero gradient.
    pub degenerate_terms: usize,
    /// Number of (group, dimension) CCC terms averaged into the loss.
    pub terms: usize,
}

fn traces(params: &ModelParams, features: &[&[f64]], mut dropout: Option<&mut Rng>) -> Vec<Trace> {
    features
        .iter()
        .map(|f| params.trace(f, dropout.as_deref_mut()))
        .collect()
}

/// `1 - (CCC_act + CCC_val) / 2` over the batch through the aggregate heads.
pub fn batch_loss_aggregate(
    params: &ModelParams,
    batch: &[AggregateItem<'_>],
    dropout: Option<&mut Rng>,
) -> Result<LossOutput> {
    if batch.len() < 2 {
        return Err(Error::InvalidInput("aggregate batch needs at least 2 samples".into()));
    }
    for item in batch {
        if item.features.len() != params.config.feature_dim {
            return Err(Error::DimensionMismatch("aggregate batch features".into()));
        }
    }
    let feats: Vec<&[f64]> = batch.iter().map(|b| b.features).collect();
    let traces = traces(params, &feats, dropout);
    let mut grads = Gradients::zeros_for(params);
    let mut sum_ccc = 0.0;
    let mut degenerate_terms = 0;
    let mut d_out = vec![[0.0; 2]; batch.len()];
    for d in 0..2 {
        let head = &params.aggregate[d];
        let preds: Vec<f64> = traces.iter().map(|t| head.apply(&t.h2[d])).collect();
        let targets: Vec<f64> = batch.iter().map(|b| b.target[d]).collect();
        let g = ccc_gradient_unchecked(&preds, &targets);
        sum_ccc += g.value;
        if g.degenerate {
            degenerate_terms += 1;
        }
        for (slot, gi) in d_out.iter_mut().zip(&g.gradient) {
            slot[d] = -0.5 * gi;
        }
    }
    for (t, g) in traces.iter().zip(&d_out) {
        grads.backprop(params, t, HeadRef::Aggregate, *g);
    }
    Ok(LossOutput {
        loss: 1.0 - 0.5 * sum_ccc,
        grads,
        degenerate_terms,
        terms: 2,
    })
}

/// `1 - mean CCC` over (annotator, dimension) for every annotator with at
/// least two items in the batch; annotators with a single item are skipped.
pub fn batch_loss_individual(
    params: &ModelParams,
    batch: &[IndividualItem<'_>],
    dropout: Option<&mut Rng>,
) -> Result<LossOutput> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in batch.iter().enumerate() {
        if item.head >= params.n_heads() {
            return Err(Error::UnknownAnnotator(format!("head index {}", item.head)));
        }
        if item.features.len() != params.config.feature_dim {
            return Err(Error::DimensionMismatch("individual batch features".into()));
        }
        groups.entry(item.head).or_default().push(i);
    }
    groups.retain(|_, members| members.len() >= 2);
    if groups.is_empty() {
        return Err(Error::InvalidInput(
            "individual batch has no annotator with at least 2 annotations".into(),
        ));
    }
    let order: Vec<usize> = groups.values().flatten().copied().collect();
    let feats: Vec<&[f64]> = order.iter().map(|&i| batch[i].features).collect();
    let traces = traces(params, &feats, dropout);
    let trace_of: BTreeMap<usize, usize> = order.iter().enumerate().map(|(pos, &i)| (i, pos)).collect();

    let terms = 2 * groups.len();
    let scale = 1.0 / terms as f64;
    let mut grads = Gradients::zeros_for(params);
    let mut sum_ccc = 0.0;
    let mut degenerate_terms = 0;
    for (&head, members) in &groups {
        let mut d_out = vec![[0.0; 2]; members.len()];
        for d in 0..2 {
            let h = &params.heads[d][head];
            let preds: Vec<f64> = members.iter().map(|&i| h.apply(&traces[trace_of[&i]].h2[d])).collect();
            let targets: Vec<f64> = members.iter().map(|&i| batch[i].target[d]).collect();
            let g = ccc_gradient_unchecked(&preds, &targets);
            sum_ccc += g.value;
            if g.degenerate {
                degenerate_terms += 1;
            }
            for (slot, gi) in d_out.iter_mut().zip(&g.gradient) {
                slot[d] = -scale * gi;
            }
        }
        for (&i, g) in members.iter().zip(&d_out) {
            grads.backprop(params, &traces[trace_of[&i]], HeadRef::Annotator(head), *g);
        }
    }
    Ok(LossOutput {
        loss: 1.0 - sum_ccc * scale,
        grads,
        degenerate_terms,
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::ModelConfig;

    fn model(n: usize, seed: u64) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                feature_dim: 3,
                hidden_width: 6,
                dropout_rate: 0.0,
                annotator_ids: (0..n).map(|i| format!("a{i}")).collect(),
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn aggregate_loss_zero_when_exact() {
        let m = model(1, 1);
        let feats = [[0.1, 0.2, 0.3], [0.5, -0.2, 0.9], [-0.4, 0.3, 0.0]];
        let items: Vec<AggregateItem> = feats
            .iter()
            .map(|f| {
                let p = m.forward(f, &super::super::HeadSelector::Aggregate, None).unwrap();
                AggregateItem {
                    features: f,
                    target: [p.activation[0], p.valence[0]],
                }
            })
            .collect();
        let out = batch_loss_aggregate(&m, &items, None).unwrap();
        assert!(out.loss.abs() < 1e-12, "loss {}", out.loss);
    }

    #[test]
    fn aggregate_constant_targets_flagged() {
        let m = model(1, 1);
        let feats = [[0.1, 0.2, 0.3], [0.5, -0.2, 0.9]];
        let items: Vec<AggregateItem> = feats
            .iter()
            .map(|f| AggregateItem {
                features: f,
                target: [0.3, 0.3],
            })
            .collect();
        let out = batch_loss_aggregate(&m, &items, None).unwrap();
        assert_eq!(out.degenerate_terms, 2);
        assert_eq!(out.loss, 1.0);
        let dense = out.grads.to_dense(&m);
        assert!(dense.flatten().iter().all(|&g| g == 0.0));
        assert!(batch_loss_aggregate(&m, &items[..1], None).is_err());
    }

    #[test]
    fn singleton_annotator_contributes_nothing() {
        let m = model(2, 3);
        let f = [[0.1, 0.2, 0.3], [0.5, -0.2, 0.9], [-0.4, 0.3, 0.0]];
        let items = vec![
            IndividualItem { features: &f[0], head: 0, target: [0.1, 0.5] },
            IndividualItem { features: &f[1], head: 0, target: [0.7, -0.5] },
            IndividualItem { features: &f[2], head: 1, target: [0.2, 0.2] },
        ];
        let out = batch_loss_individual(&m, &items, None).unwrap();
        assert_eq!(out.terms, 2);
        assert!(out.grads.heads[0].get(&1).is_none());
        assert!(out.grads.heads[1].get(&1).is_none());
        let without = batch_loss_individual(&m, &items[..2], None).unwrap();
        assert_eq!(out.loss, without.loss);
        assert_eq!(out.grads, without.grads);
        assert!(batch_loss_individual(&m, &items[2..], None).is_err());
    }
}
