use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::Dimension;
use crate::error::{Error, Result};
use crate::seeding::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub dropout_rate: f64,
    /// Source annotators, one prediction head each (per dimension).
    pub annotator_ids: Vec<String>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_width == 0 {
            return Err(Error::Config("feature_dim and hidden_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &self.annotator_ids {
            if !seen.insert(id) {
                return Err(Error::Config(format!("duplicate annotator id {id}")));
            }
        }
        Ok(())
    }
}

/// Dense layer, `weight` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    /// `out = relu(W x + b)`.
    fn forward_relu(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weight.chunks_exact(self.in_dim).zip(&self.bias).map(|(row, b)| {
            let z = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            z.max(0.0)
        }));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl Head {
    pub fn zeros(width: usize) -> Self {
        Self {
            weight: vec![0.0; width],
            bias: 0.0,
        }
    }

    fn init(width: usize, rng: &mut Rng) -> Self {
        let l = Linear::init(width, 1, rng);
        Self {
            weight: l.weight,
            bias: l.bias[0],
        }
    }

    pub fn apply(&self, embedding: &[f64]) -> f64 {
        self.bias + self.weight.iter().zip(embedding).map(|(w, h)| w * h).sum::<f64>()
    }
}

/// Two hidden layers specific to one emotion dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub first: Linear,
    pub second: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadRef {
    Aggregate,
    Annotator(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadSelector {
    Aggregate,
    AllHeads,
    Subset(Vec<String>),
}

/// Per-sample output: one value per selected head, per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub activation: Vec<f64>,
    pub valence: Vec<f64>,
}

impl Prediction {
    pub fn get(&self, dim: Dimension) -> &[f64] {
        match dim {
            Dimension::Activation => &self.activation,
            Dimension::Valence => &self.valence,
        }
    }
}

/// Final hidden representation per dimension, shared by every head.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub dims: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub trunk: Linear,
    /// Indexed by [`Dimension::index`].
    pub branches: [Branch; 2],
    pub heads: [Vec<Head>; 2],
    pub aggregate: [Head; 2],
    head_index: HashMap<String, usize>,
}

/// Activations recorded during a forward pass, consumed by backprop.
pub(crate) struct Trace {
    pub input: Vec<f64>,
    pub h0: Vec<f64>,
    pub h1: [Vec<f64>; 2],
    pub h2: [Vec<f64>; 2],
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (f, w) = (config.feature_dim, config.hidden_width);
        let branch = || Branch {
            first: Linear::zeros(w, w),
            second: Linear::zeros(w, w),
        };
        let n = config.annotator_ids.len();
        Ok(Self::assemble(
            Linear::zeros(f, w),
            [branch(), branch()],
            [vec![Head::zeros(w); n], vec![Head::zeros(w); n]],
            [Head::zeros(w), Head::zeros(w)],
            config,
        ))
    }

    pub(crate) fn assemble(
        trunk: Linear,
        branches: [Branch; 2],
        heads: [Vec<Head>; 2],
        aggregate: [Head; 2],
        config: ModelConfig,
    ) -> Self {
        let head_index = config
            .annotator_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self {
            config,
            trunk,
            branches,
            heads,
            aggregate,
            head_index,
        }
    }

    /// Fan-in scaled uniform initialization, deterministic per seed.
    pub fn init(config: ModelConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng(rng_seed, &[seeding::TAG_INIT]);
        let (f, w) = (config.feature_dim, config.hidden_width);
        let trunk = Linear::init(f, w, &mut rng);
        let mut branch = || Branch {
            first: Linear::init(w, w, &mut rng),
            second: Linear::init(w, w, &mut rng),
        };
        let branches = [branch(), branch()];
        let n = config.annotator_ids.len();
        let heads_act = (0..n).map(|_| Head::init(w, &mut rng)).collect();
        let heads_val = (0..n).map(|_| Head::init(w, &mut rng)).collect();
        let aggregate = [Head::init(w, &mut rng), Head::init(w, &mut rng)];
        Ok(Self::assemble(trunk, branches, [heads_act, heads_val], aggregate, config))
    }

    pub fn n_heads(&self) -> usize {
        self.config.annotator_ids.len()
    }

    pub fn head_index(&self, annotator_id: &str) -> Option<usize> {
        self.head_index.get(annotator_id).copied()
    }

    pub fn annotator_id(&self, head: usize) -> &str {
        &self.config.annotator_ids[head]
    }

    pub fn head(&self, dim: Dimension, head: HeadRef) -> &Head {
        match head {
            HeadRef::Aggregate => &self.aggregate[dim.index()],
            HeadRef::Annotator(i) => &self.heads[dim.index()][i],
        }
    }

    pub(crate) fn trace(&self, features: &[f64], dropout: Option<&mut Rng>) -> Trace {
        let mut input = features.to_vec();
        if let Some(rng) = dropout {
            let p = self.config.dropout_rate;
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                for v in &mut input {
                    *v = if rng.random::<f64>() < p { 0.0 } else { *v * keep };
                }
            }
        }
        let mut h0 = Vec::with_capacity(self.config.hidden_width);
        self.trunk.forward_relu(&input, &mut h0);
        let branch = |b: &Branch| {
            let mut h1 = Vec::with_capacity(self.config.hidden_width);
            let mut h2 = Vec::with_capacity(self.config.hidden_width);
            b.first.forward_relu(&h0, &mut h1);
            b.second.forward_relu(&h1, &mut h2);
            (h1, h2)
        };
        let (a1, a2) = branch(&self.branches[0]);
        let (v1, v2) = branch(&self.branches[1]);
        Trace {
            input,
            h1: [a1, v1],
            h2: [a2, v2],
            h0,
        }
    }

    /// Inference-mode representation (no dropout).
    pub fn embed(&self, features: &[f64]) -> Result<Embedding> {
        self.check_features(features)?;
        let t = self.trace(features, None);
        Ok(Embedding { dims: t.h2 })
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.config.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "expected {} features, got {}",
                self.config.feature_dim,
                features.len()
            )));
        }
        Ok(())
    }

    /// Forward pass through the selected heads. Dropout is applied to the
    /// input only when `dropout` is given (training mode).
    pub fn forward(&self, features: &[f64], selector: &HeadSelector, dropout: Option<&mut Rng>) -> Result<Prediction> {
        self.check_features(features)?;
        let heads: Vec<HeadRef> = match selector {
            HeadSelector::Aggregate => vec![HeadRef::Aggregate],
            HeadSelector::AllHeads => (0..self.n_heads()).map(HeadRef::Annotator).collect(),
            HeadSelector::Subset(ids) => ids
                .iter()
                .map(|id| {
                    self.head_index(id)
                        .map(HeadRef::Annotator)
                        .ok_or_else(|| Error::UnknownAnnotator(id.clone()))
                })
                .collect::<Result<_>>()?,
        };
        let t = self.trace(features, dropout);
        let out = |d: Dimension| heads.iter().map(|&h| self.head(d, h).apply(&t.h2[d.index()])).collect();
        Ok(Prediction {
            activation: out(Dimension::Activation),
            valence: out(Dimension::Valence),
        })
    }

    /// Copy each aggregate head into every annotator head of its dimension.
    pub fn init_heads_from_aggregate(&self) -> ModelParams {
        let mut out = self.clone();
        for d in Dimension::BOTH {
            let agg = self.aggregate[d.index()].clone();
            for h in &mut out.heads[d.index()] {
                *h = agg.clone();
            }
        }
        out
    }

    /// Parameter tensors in declaration order with their shapes.
    pub fn tensors(&self) -> Vec<(Vec<usize>, &[f64])> {
        let mut out: Vec<(Vec<usize>, &[f64])> = Vec::new();
        fn push_linear<'a>(l: &'a Linear, out: &mut Vec<(Vec<usize>, &'a [f64])>) {
            out.push((vec![l.out_dim, l.in_dim], &l.weight));
            out.push((vec![l.out_dim], &l.bias));
        }
        fn push_head<'a>(h: &'a Head, out: &mut Vec<(Vec<usize>, &'a [f64])>) {
            out.push((vec![h.weight.len()], &h.weight));
            out.push((vec![1], std::slice::from_ref(&h.bias)));
        }
        push_linear(&self.trunk, &mut out);
        for b in &self.branches {
            push_linear(&b.first, &mut out);
            push_linear(&b.second, &mut out);
        }
        for heads in &self.heads {
            for h in heads {
                push_head(h, &mut out);
            }
        }
        for h in &self.aggregate {
            push_head(h, &mut out);
        }
        out
    }

    /// Mutable view of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(&mut self.trunk.weight);
        out.push(&mut self.trunk.bias);
        for b in &mut self.branches {
            out.push(&mut b.first.weight);
            out.push(&mut b.first.bias);
            out.push(&mut b.second.weight);
            out.push(&mut b.second.bias);
        }
        for heads in &mut self.heads {
            for h in heads {
                out.push(&mut h.weight);
                out.push(std::slice::from_mut(&mut h.bias));
            }
        }
        for h in &mut self.aggregate {
            out.push(&mut h.weight);
            out.push(std::slice::from_mut(&mut h.bias));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Parameter gradients. Annotator heads are stored sparsely since a batch
/// touches only the heads of the annotators it contains.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub trunk: Linear,
    pub branches: [Branch; 2],
    pub heads: [BTreeMap<usize, Head>; 2],
    pub aggregate: [Option<Head>; 2],
}

impl Gradients {
    pub fn zeros_for(params: &ModelParams) -> Self {
        let (f, w) = (params.config.feature_dim, params.config.hidden_width);
        let branch = || Branch {
            first: Linear::zeros(w, w),
            second: Linear::zeros(w, w),
        };
        Self {
            trunk: Linear::zeros(f, w),
            branches: [branch(), branch()],
            heads: [BTreeMap::new(), BTreeMap::new()],
            aggregate: [None, None],
        }
    }

    fn head_mut(&mut self, dim: usize, head: HeadRef, width: usize) -> &mut Head {
        match head {
            HeadRef::Aggregate => self.aggregate[dim].get_or_insert_with(|| Head::zeros(width)),
            HeadRef::Annotator(i) => self.heads[dim].entry(i).or_insert_with(|| Head::zeros(width)),
        }
    }

    /// Dense copy shaped like `params` (untouched heads are zero).
    pub fn to_dense(&self, params: &ModelParams) -> ModelParams {
        let w = params.config.hidden_width;
        let n = params.n_heads();
        let mut heads = [vec![Head::zeros(w); n], vec![Head::zeros(w); n]];
        for d in 0..2 {
            for (&i, h) in &self.heads[d] {
                heads[d][i] = h.clone();
            }
        }
        let aggregate = [0, 1].map(|d| self.aggregate[d].clone().unwrap_or_else(|| Head::zeros(w)));
        ModelParams::assemble(
            self.trunk.clone(),
            self.branches.clone(),
            heads,
            aggregate,
            params.config.clone(),
        )
    }

    /// Accumulate backprop of one traced sample given dL/d(output) per
    /// dimension for the head used in that dimension.
    pub(crate) fn backprop(&mut self, params: &ModelParams, trace: &Trace, head: HeadRef, d_out: [f64; 2]) {
        let w = params.config.hidden_width;
        let mut d_h0 = vec![0.0; w];
        for d in 0..2 {
            let g = d_out[d];
            if g == 0.0 {
                continue;
            }
            let dim = Dimension::BOTH[d];
            let h2 = &trace.h2[d];
            let h1 = &trace.h1[d];
            let head_params = params.head(dim, head);
            {
                let hg = self.head_mut(d, head, w);
                for (acc, &v) in hg.weight.iter_mut().zip(h2) {
                    *acc += g * v;
                }
                hg.bias += g;
            }
            let d_z2: Vec<f64> = head_params
                .weight
                .iter()
                .zip(h2)
                .map(|(&wk, &v)| if v > 0.0 { g * wk } else { 0.0 })
                .collect();
            let branch = &params.branches[d];
            let gb = &mut self.branches[d];
            let d_z1 = linear_backward(&branch.second, &mut gb.second, h1, &d_z2, true, h1);
            let d_in = linear_backward(&branch.first, &mut gb.first, &trace.h0, &d_z1, true, &trace.h0);
            for (acc, v) in d_h0.iter_mut().zip(d_in) {
                *acc += v;
            }
        }
        // d_h0 already masked by h0 > 0 in the branch backward above.
        linear_backward(&params.trunk, &mut self.trunk, &trace.input, &d_h0, false, &[]);
    }
}

/// Accumulates grads of `layer` for upstream `d_z` (pre-activation grad) and
/// input `x`; returns the grad w.r.t. the layer input, optionally masked by
/// the ReLU of the preceding layer (`mask_src > 0`).
fn linear_backward(layer: &Linear, grad: &mut Linear, x: &[f64], d_z: &[f64], mask: bool, mask_src: &[f64]) -> Vec<f64> {
    let mut d_x = vec![0.0; layer.in_dim];
    for (o, &g) in d_z.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad.bias[o] += g;
        let row = o * layer.in_dim;
        let g_row = &mut grad.weight[row..row + layer.in_dim];
        for (acc, &v) in g_row.iter_mut().zip(x) {
            *acc += g * v;
        }
        if mask {
            for (acc, &wv) in d_x.iter_mut().zip(&layer.weight[row..row + layer.in_dim]) {
                *acc += g * wv;
            }
        }
    }
    if mask {
        for (v, &src) in d_x.iter_mut().zip(mask_src) {
            if src <= 0.0 {
                *v = 0.0;
            }
        }
    }
    d_x
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn config(n: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            hidden_width: 8,
            dropout_rate: 0.2,
            annotator_ids: (0..n).map(|i| format!("a{i}")).collect(),
        }
    }

    #[test]
    fn init_deterministic_and_shaped() {
        let a = ModelParams::init(config(3), 5).unwrap();
        let b = ModelParams::init(config(3), 5).unwrap();
        let c = ModelParams::init(config(3), 6).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_ne!(a.flatten(), c.flatten());
        assert_eq!(a.heads[0].len(), 3);
        assert_eq!(a.heads[1].len(), 3);
        let bound = 1.0 / 2.0; // fan-in 4
        assert!(a.trunk.weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn rejects_duplicate_ids_and_bad_dropout() {
        let mut c = config(2);
        c.annotator_ids[1] = "a0".into();
        assert!(ModelParams::init(c, 1).is_err());
        let mut c = config(2);
        c.dropout_rate = 1.0;
        assert!(ModelParams::init(c, 1).is_err());
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = ModelParams::zeros(config(2)).unwrap();
        let p = m.forward(&[1.0, -2.0, 3.0, 0.5], &HeadSelector::AllHeads, None).unwrap();
        assert_eq!(p.activation, vec![0.0, 0.0]);
        assert_eq!(p.valence, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let m = ModelParams::init(config(3), 1).unwrap();
        let x = [0.3, -0.1, 0.8, 0.0];
        let sel = HeadSelector::Subset(vec!["a1".into()]);
        let p = m.forward(&x, &sel, None).unwrap();
        assert_eq!(p.activation.len(), 1);
        assert_eq!(p.valence.len(), 1);
        assert_eq!(p, m.forward(&x, &sel, None).unwrap());
        assert!(matches!(
            m.forward(&x, &HeadSelector::Subset(vec!["nope".into()]), None),
            Err(Error::UnknownAnnotator(_))
        ));
        assert!(m.forward(&[0.0; 3], &HeadSelector::Aggregate, None).is_err());
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let m = ModelParams::init(config(1), 1).unwrap();
        let x = [1.0, 1.0, 1.0, 1.0];
        let mut rng = seeding::rng(0, &[]);
        let outs: Vec<Prediction> = (0..20)
            .map(|_| m.forward(&x, &HeadSelector::Aggregate, Some(&mut rng)).unwrap())
            .collect();
        assert!(outs.iter().any(|p| p != &outs[0]));
    }

    #[test]
    fn head_copy_matches_aggregate() {
        let m = ModelParams::init(config(4), 2).unwrap().init_heads_from_aggregate();
        let x = [0.2, 0.4, -0.6, 1.0];
        let agg = m.forward(&x, &HeadSelector::Aggregate, None).unwrap();
        let all = m.forward(&x, &HeadSelector::AllHeads, None).unwrap();
        assert!(all.activation.iter().all(|&v| v == agg.activation[0]));
        assert!(all.valence.iter().all(|&v| v == agg.valence[0]));
    }

    #[test]
    fn tensors_mut_matches_tensors_order() {
        let mut m = ModelParams::init(config(2), 3).unwrap();
        let flat = m.flatten();
        let flat_mut: Vec<f64> = m.tensors_mut().into_iter().flat_map(|t| t.to_vec()).collect();
        assert_eq!(flat, flat_mut);
    }
}
