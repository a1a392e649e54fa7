//! Prediction heads over the encoder's last four hidden states.
//!
//! Every branch owns one extra transformer layer and one head. In parallel
//! mode each branch sees only its own hidden state; in hierarchical mode the
//! processed states are summed top-down from the deepest layer, as in a
//! feature pyramid. Branch losses are summed without weights.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{crf_nll_on_graph, CrfParams, NUM_BIO_TAGS};
use crate::encoder::{normal_tensor, LayerAblation, Linear, TransformerLayer};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const NUM_BRANCHES: usize = 4;
pub const NUM_POLARITIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Ae,
    Asc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationMode {
    Vanilla,
    PSum,
    HSum,
}

/// How branch scores are combined at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferBranch {
    Mean,
    Deepest,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($variant:path => $kw:literal),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($kw => Ok($variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $kw,)+ })
            }
        }
    };
}

keyword_enum!(Task, "task", Task::Ae => "ae", Task::Asc => "asc");
keyword_enum!(AggregationMode, "mode", AggregationMode::Vanilla => "vanilla", AggregationMode::PSum => "psum", AggregationMode::HSum => "hsum");
keyword_enum!(InferBranch, "infer_branch", InferBranch::Mean => "mean", InferBranch::Deepest => "deepest");

/// Supervision for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Tags(Vec<usize>),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Tags(Vec<usize>),
    Class(usize),
}

/// Emission projection plus transition and boundary scores.
#[derive(Debug, Clone)]
pub struct CrfHead {
    pub proj: Linear,
    pub transition: ParamId,
    pub start: ParamId,
    pub end: ParamId,
}

impl CrfHead {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, init_std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let k = NUM_BIO_TAGS;
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.emission"), hidden, k, init_std, rng)?,
            transition: store.add(format!("{name}.transition"), Tensor::zeros(&[k, k]))?,
            start: store.add(format!("{name}.start"), Tensor::zeros(&[k]))?,
            end: store.add(format!("{name}.end"), Tensor::zeros(&[k]))?,
        })
    }

    pub fn params(&self, store: &ParamStore) -> CrfParams {
        CrfParams {
            transition: store.get(self.transition).clone(),
            start: store.get(self.start).clone(),
            end: store.get(self.end).clone(),
            emission_proj: store.get(self.proj.weight).clone(),
            emission_bias: store.get(self.proj.bias).clone(),
        }
    }

    /// `[n, K]` emissions for the given (word) rows of `hidden`.
    pub fn emissions(&self, g: &mut Graph, store: &ParamStore, hidden: Var, rows: &[usize]) -> Result<Var> {
        let words = g.select_rows(hidden, rows)?;
        self.proj.forward(g, store, words)
    }
}

/// Linear classifier over the `[CLS]` row.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub proj: Linear,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, init_std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.classifier"), hidden, NUM_POLARITIES, init_std, rng)?,
        })
    }

    /// `[1, 3]` logits read from position 0.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let cls = g.select_rows(hidden, &[0])?;
        self.proj.forward(g, store, cls)
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Crf(CrfHead),
    Classifier(ClassifierHead),
}

impl Head {
    pub fn new(
        task: Task,
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        init_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match task {
            Task::Ae => Head::Crf(CrfHead::new(store, name, hidden, init_std, rng)?),
            Task::Asc => Head::Classifier(ClassifierHead::new(store, name, hidden, init_std, rng)?),
        })
    }

    /// Emissions (AE) or logits (ASC) for a branch hidden state.
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, hidden: Var, word_positions: &[usize]) -> Result<Var> {
        match self {
            Head::Crf(h) => h.emissions(g, store, hidden, word_positions),
            Head::Classifier(h) => h.logits(g, store, hidden),
        }
    }

    pub fn loss(&self, g: &mut Graph, store: &ParamStore, scores: Var, target: &Target) -> Result<Var> {
        match (self, target) {
            (Head::Crf(h), Target::Tags(tags)) => branch_loss_ae(g, store, h, scores, tags),
            (Head::Classifier(_), Target::Class(c)) => branch_loss_asc(g, scores, *c),
            _ => Err(Error::Config("target kind does not match the head's task".into())),
        }
    }
}

/// CRF negative log-likelihood of `gold` under a branch's emissions.
pub fn branch_loss_ae(g: &mut Graph, store: &ParamStore, head: &CrfHead, emissions: Var, gold: &[usize]) -> Result<Var> {
    let transition = g.param(store, head.transition);
    let start = g.param(store, head.start);
    let end = g.param(store, head.end);
    crf_nll_on_graph(g, emissions, transition, start, end, gold)
}

/// Cross-entropy over the three polarity classes.
pub fn branch_loss_asc(g: &mut Graph, logits: Var, class: usize) -> Result<Var> {
    g.cross_entropy(logits, class)
}

/// Unweighted left-to-right sum.
pub fn total_loss(g: &mut Graph, branch_losses: &[Var]) -> Result<Var> {
    g.add_scalars(branch_losses)
}

/// Extra layers and heads, index 0 attached to the deepest hidden state.
#[derive(Debug, Clone)]
pub struct BranchSet {
    pub layers: Vec<TransformerLayer>,
    pub heads: Vec<Head>,
    pub ablation: LayerAblation,
}

#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    /// The branch's aggregated hidden state `[T, H]`.
    pub hidden: Var,
    /// Emissions `[n, K]` or logits `[1, 3]`.
    pub scores: Var,
}

impl BranchSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task: Task,
        store: &mut ParamStore,
        hidden: usize,
        ff: usize,
        num_heads: usize,
        eps: f64,
        init_std: f64,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(NUM_BRANCHES);
        let mut heads = Vec::with_capacity(NUM_BRANCHES);
        for b in 0..NUM_BRANCHES {
            let name = format!("branch.{b}");
            layers.push(TransformerLayer::new(
                store,
                &format!("{name}.layer"),
                hidden,
                ff,
                num_heads,
                eps,
                init_std,
                dropout,
                rng,
            )?);
            heads.push(Head::new(task, store, &format!("{name}.head"), hidden, init_std, rng)?);
        }
        Ok(Self {
            layers,
            heads,
            ablation: LayerAblation::None,
        })
    }

    fn check(hiddens: &[Var]) -> Result<()> {
        if hiddens.len() != NUM_BRANCHES {
            return Err(Error::Contract(format!(
                "aggregation expects {NUM_BRANCHES} hidden states, got {}",
                hiddens.len()
            )));
        }
        Ok(())
    }

    /// Extra layer `b` applied to `x`.
    pub fn transform(
        &self,
        b: usize,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask_bias: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.layers[b].forward(g, store, x, mask_bias, self.ablation, rng, None)
    }
}

/// Parallel aggregation: branch `i` predicts from `layer_i(hidden_i)` alone.
/// `hiddens` is ordered deepest first.
pub fn psum_forward(
    g: &mut Graph,
    store: &ParamStore,
    hiddens: &[Var],
    branches: &BranchSet,
    mask_bias: Var,
    word_positions: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<BranchOutput>> {
    BranchSet::check(hiddens)?;
    let mut out = Vec::with_capacity(NUM_BRANCHES);
    for (b, &h) in hiddens.iter().enumerate() {
        let p = branches.transform(b, g, store, h, mask_bias, rng.as_deref_mut())?;
        let scores = branches.heads[b].scores(g, store, p, word_positions)?;
        out.push(BranchOutput { hidden: p, scores });
    }
    Ok(out)
}

/// Hierarchical aggregation: `p₀ = layer₀(h₀)`, `pᵢ = layerᵢ(hᵢ) + pᵢ₋₁`,
/// with `h₀` the deepest hidden state.
pub fn hsum_forward(
    g: &mut Graph,
    store: &ParamStore,
    hiddens: &[Var],
    branches: &BranchSet,
    mask_bias: Var,
    word_positions: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<BranchOutput>> {
    BranchSet::check(hiddens)?;
    let mut out: Vec<BranchOutput> = Vec::with_capacity(NUM_BRANCHES);
    for (b, &h) in hiddens.iter().enumerate() {
        let mut p = branches.transform(b, g, store, h, mask_bias, rng.as_deref_mut())?;
        if let Some(prev) = out.last() {
            p = g.add(p, prev.hidden)?;
        }
        let scores = branches.heads[b].scores(g, store, p, word_positions)?;
        out.push(BranchOutput { hidden: p, scores });
    }
    Ok(out)
}

/// Elementwise mean of branch score tensors (or only the deepest).
pub fn combine_scores(scores: &[Tensor], infer: InferBranch) -> Result<Tensor> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Contract("no branch scores to combine".into()))?;
    if infer == InferBranch::Deepest || scores.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = Tensor::zeros(first.shape());
    for s in scores {
        if s.shape() != first.shape() {
            return Err(Error::dim("combine_scores", first.shape(), s.shape()));
        }
        acc.data_mut().iter_mut().zip(s.data()).for_each(|(a, b)| *a += b);
    }
    let n = scores.len() as f64;
    acc.data_mut().iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Mean of CRF potentials across branches. Together with averaged emissions
/// this decodes the path with the best mean branch score.
pub fn combine_crf(params: &[CrfParams], infer: InferBranch) -> Result<CrfParams> {
    let first = params
        .first()
        .ok_or_else(|| Error::Contract("no CRF heads to combine".into()))?;
    if infer == InferBranch::Deepest || params.len() == 1 {
        return Ok(first.clone());
    }
    let pick = |f: fn(&CrfParams) -> &Tensor| -> Result<Tensor> {
        let ts: Vec<Tensor> = params.iter().map(|p| f(p).clone()).collect();
        combine_scores(&ts, InferBranch::Mean)
    };
    Ok(CrfParams {
        transition: pick(|p| &p.transition)?,
        start: pick(|p| &p.start)?,
        end: pick(|p| &p.end)?,
        emission_proj: pick(|p| &p.emission_proj)?,
        emission_bias: pick(|p| &p.emission_bias)?,
    })
}

/// Initial CRF parameters for a head built outside a model (tests, probes).
pub fn random_crf_params(hidden: usize, std: f64, rng: &mut ChaCha8Rng) -> CrfParams {
    CrfParams {
        transition: normal_tensor(rng, &[NUM_BIO_TAGS, NUM_BIO_TAGS], std),
        start: normal_tensor(rng, &[NUM_BIO_TAGS], std),
        end: normal_tensor(rng, &[NUM_BIO_TAGS], std),
        emission_proj: normal_tensor(rng, &[hidden, NUM_BIO_TAGS], std),
        emission_bias: normal_tensor(rng, &[NUM_BIO_TAGS], std),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keywords_parse_and_print() {
        assert_eq!("psum".parse::<AggregationMode>().unwrap(), AggregationMode::PSum);
        assert_eq!("HSUM".parse::<AggregationMode>().unwrap(), AggregationMode::HSum);
        assert_eq!(AggregationMode::Vanilla.to_string(), "vanilla");
        assert_eq!("asc".parse::<Task>().unwrap(), Task::Asc);
        assert_eq!("deepest".parse::<InferBranch>().unwrap(), InferBranch::Deepest);
        assert!(matches!("fpn".parse::<AggregationMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn total_loss_is_plain_sum() {
        let mut g = Graph::new();
        let ls: Vec<Var> = [1.0, 1.0, 1.0, 1.0].iter().map(|v| g.leaf(Tensor::scalar(*v).with_grad())).collect();
        let t = total_loss(&mut g, &ls).unwrap();
        assert_eq!(g.item(t).unwrap(), 4.0);
        g.backward(t).unwrap();
        for l in ls {
            assert_eq!(g.grad(l).unwrap(), &[1.0]);
        }
    }

    #[test]
    fn combine_identical_scores_is_identity() {
        let s = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 0.5]]).unwrap();
        let m = combine_scores(&[s.clone(), s.clone(), s.clone(), s.clone()], InferBranch::Mean).unwrap();
        assert!(m.max_abs_diff(&s) < 1e-15);
    }

    #[test]
    fn deepest_picks_branch_zero() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        let b = Tensor::vector(vec![0.0, 5.0]);
        assert_eq!(combine_scores(&[a.clone(), b], InferBranch::Deepest).unwrap(), a);
    }

    #[test]
    fn asc_uniform_logits_loss() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[1, 3]));
        let loss = branch_loss_asc(&mut g, l, 2).unwrap();
        assert!((g.item(loss).unwrap() - 3f64.ln()).abs() < 1e-15);
    }
}
