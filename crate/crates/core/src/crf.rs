//! Linear-chain CRF over per-position emission scores.
//!
//! A tag path `y` scores
//! `start[y₀] + Σₜ e[t, yₜ] + Σₜ transition[yₜ₋₁, yₜ] + end[y_T]`, and its
//! probability is `exp(score - log Z)` where `log Z` comes from the forward
//! recursion in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{logsumexp_slice, matmul, CustomOp, Graph, Tensor, Var};

pub const NUM_BIO_TAGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    B = 0,
    I = 1,
    O = 2,
}

impl Tag {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Tag::B),
            1 => Ok(Tag::I),
            2 => Ok(Tag::O),
            _ => Err(Error::Label {
                label: i,
                num_labels: NUM_BIO_TAGS,
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::B => "B",
            Tag::I => "I",
            Tag::O => "O",
        }
    }
}

/// BIO tags aligned to the non-special tokens of a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TagSequence(pub Vec<Tag>);

impl TagSequence {
    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        indices.iter().map(|&i| Tag::from_index(i)).collect::<Result<_>>().map(Self)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|t| t.index()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// No leading `I`, and no `I` directly after `O`.
    pub fn is_bio_valid(&self) -> bool {
        is_bio_valid(&self.indices())
    }
}

pub fn is_bio_valid(tags: &[usize]) -> bool {
    let (b, i, o) = (Tag::B.index(), Tag::I.index(), Tag::O.index());
    let mut prev = None;
    for &t in tags {
        if t == i && (prev.is_none() || prev == Some(o)) {
            return false;
        }
        if t != b && t != i && t != o {
            return false;
        }
        prev = Some(t);
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// `[K, K]`, row = previous tag, column = next tag.
    pub transition: Tensor,
    pub start: Tensor,
    pub end: Tensor,
    /// `[H, K]`
    pub emission_proj: Tensor,
    pub emission_bias: Tensor,
}

impl CrfParams {
    pub fn zeros(hidden: usize, num_tags: usize) -> Self {
        Self {
            transition: Tensor::zeros(&[num_tags, num_tags]),
            start: Tensor::zeros(&[num_tags]),
            end: Tensor::zeros(&[num_tags]),
            emission_proj: Tensor::zeros(&[hidden, num_tags]),
            emission_bias: Tensor::zeros(&[num_tags]),
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_tags();
        if self.transition.shape() != [k, k] {
            return Err(Error::dim("crf transition", self.transition.shape(), &[k, k]));
        }
        if self.end.shape() != [k] || self.emission_bias.shape() != [k] {
            return Err(Error::dim("crf boundary", self.end.shape(), &[k]));
        }
        if self.emission_proj.shape().get(1) != Some(&k) {
            return Err(Error::dim("crf emission_proj", self.emission_proj.shape(), &[k]));
        }
        let finite = [&self.transition, &self.start, &self.end, &self.emission_proj, &self.emission_bias]
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Numeric("non-finite CRF parameter".into()));
        }
        Ok(())
    }

    fn potentials(&self) -> Potentials<'_> {
        Potentials {
            transition: self.transition.data(),
            start: self.start.data(),
            end: self.end.data(),
            k: self.num_tags(),
        }
    }
}

/// Borrowed transition/boundary scores.
#[derive(Clone, Copy)]
struct Potentials<'a> {
    transition: &'a [f64],
    start: &'a [f64],
    end: &'a [f64],
    k: usize,
}

impl Potentials<'_> {
    fn trans(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.k + to]
    }
}

fn check_emissions(emissions: &Tensor, k: usize) -> Result<usize> {
    let (t, ek) = emissions.dims2()?;
    if ek != k {
        return Err(Error::dim("crf emissions", emissions.shape(), &[t, k]));
    }
    if t == 0 {
        return Err(Error::Contract("CRF needs at least one position".into()));
    }
    Ok(t)
}

fn check_tags(tags: &[usize], t: usize, k: usize) -> Result<()> {
    if tags.len() != t {
        return Err(Error::dim("crf tags", &[tags.len()], &[t]));
    }
    if let Some(&bad) = tags.iter().find(|&&y| y >= k) {
        return Err(Error::Label {
            label: bad,
            num_labels: k,
        });
    }
    Ok(())
}

/// Per-position tag scores `hidden · emission_proj + emission_bias`.
pub fn emissions(hidden: &Tensor, params: &CrfParams) -> Result<Tensor> {
    let mut out = matmul(hidden, &params.emission_proj)?;
    let k = params.num_tags();
    for row in out.data_mut().chunks_mut(k) {
        row.iter_mut().zip(params.emission_bias.data()).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

pub fn sequence_score(emissions: &Tensor, tags: &[usize], params: &CrfParams) -> Result<f64> {
    let k = params.num_tags();
    let t = check_emissions(emissions, k)?;
    check_tags(tags, t, k)?;
    Ok(score_path(emissions.data(), tags, params.potentials()))
}

fn score_path(e: &[f64], tags: &[usize], p: Potentials<'_>) -> f64 {
    let k = p.k;
    let mut s = p.start[tags[0]];
    for (t, &y) in tags.iter().enumerate() {
        s += e[t * k + y];
        if t > 0 {
            s += p.trans(tags[t - 1], y);
        }
    }
    s + p.end[tags[tags.len() - 1]]
}

/// Forward log-scores `alpha[t][j]`.
fn forward(e: &[f64], t_len: usize, p: Potentials<'_>) -> Vec<Vec<f64>> {
    let k = p.k;
    let mut alpha = Vec::with_capacity(t_len);
    alpha.push((0..k).map(|j| p.start[j] + e[j]).collect::<Vec<_>>());
    let mut scratch = vec![0.0; k];
    for t in 1..t_len {
        let prev = &alpha[t - 1];
        let next: Vec<f64> = (0..k)
            .map(|j| {
                for i in 0..k {
                    scratch[i] = prev[i] + p.trans(i, j);
                }
                logsumexp_slice(&scratch) + e[t * k + j]
            })
            .collect();
        alpha.push(next);
    }
    alpha
}

/// Backward log-scores `beta[t][i]` (excluding position `t`'s emission).
fn backward(e: &[f64], t_len: usize, p: Potentials<'_>) -> Vec<Vec<f64>> {
    let k = p.k;
    let mut beta = vec![vec![0.0; k]; t_len];
    beta[t_len - 1] = p.end.to_vec();
    let mut scratch = vec![0.0; k];
    for t in (0..t_len - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                scratch[j] = p.trans(i, j) + e[(t + 1) * k + j] + beta[t + 1][j];
            }
            beta[t][i] = logsumexp_slice(&scratch);
        }
    }
    beta
}

fn log_z(alpha: &[Vec<f64>], p: Potentials<'_>) -> f64 {
    let last = alpha.last().expect("non-empty");
    logsumexp_slice(&last.iter().zip(p.end).map(|(a, b)| a + b).collect::<Vec<_>>())
}

pub fn log_partition(emissions: &Tensor, params: &CrfParams) -> Result<f64> {
    let k = params.num_tags();
    let t = check_emissions(emissions, k)?;
    let p = params.potentials();
    Ok(log_z(&forward(emissions.data(), t, p), p))
}

/// `log Z - score(gold)`.
pub fn crf_nll(emissions: &Tensor, gold: &[usize], params: &CrfParams) -> Result<f64> {
    Ok(log_partition(emissions, params)? - sequence_score(emissions, gold, params)?)
}

/// Marginal probability of each tag at each position, `[T, K]`.
pub fn tag_marginals(emissions: &Tensor, params: &CrfParams) -> Result<Tensor> {
    let k = params.num_tags();
    let t = check_emissions(emissions, k)?;
    let p = params.potentials();
    let e = emissions.data();
    let alpha = forward(e, t, p);
    let beta = backward(e, t, p);
    let lz = log_z(&alpha, p);
    let mut out = Vec::with_capacity(t * k);
    for s in 0..t {
        for j in 0..k {
            out.push((alpha[s][j] + beta[s][j] - lz).exp());
        }
    }
    Tensor::new(vec![t, k], out)
}

/// Highest-scoring path by max-product with backpointers. With
/// `constrain_bio`, `start → I` and `O → I` are forbidden. Ties go to the
/// lower tag index.
pub fn viterbi_decode(emissions: &Tensor, params: &CrfParams, constrain_bio: bool) -> Result<Vec<usize>> {
    let k = params.num_tags();
    let t_len = check_emissions(emissions, k)?;
    if constrain_bio && k != NUM_BIO_TAGS {
        return Err(Error::Contract(format!(
            "BIO-constrained decoding needs {NUM_BIO_TAGS} tags, got {k}"
        )));
    }
    let p = params.potentials();
    let e = emissions.data();
    let (i_tag, o_tag) = (Tag::I.index(), Tag::O.index());
    let allowed_start = |j: usize| !(constrain_bio && j == i_tag);
    let allowed = |i: usize, j: usize| !(constrain_bio && i == o_tag && j == i_tag);

    let mut score: Vec<f64> = (0..k)
        .map(|j| if allowed_start(j) { p.start[j] + e[j] } else { f64::NEG_INFINITY })
        .collect();
    let mut backptr = vec![vec![0usize; k]; t_len];
    for t in 1..t_len {
        let mut next = vec![f64::NEG_INFINITY; k];
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..k {
                if !allowed(i, j) {
                    continue;
                }
                let s = score[i] + p.trans(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            next[j] = best + e[t * k + j];
            backptr[t][j] = arg;
        }
        score = next;
    }
    let mut last = 0;
    let mut best = f64::NEG_INFINITY;
    for j in 0..k {
        let s = score[j] + p.end[j];
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = backptr[t][path[t]];
    }
    Ok(path)
}

struct CrfNllOp {
    gold: Vec<usize>,
}

impl CustomOp for CrfNllOp {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    /// Inputs: emissions `[T,K]`, transition `[K,K]`, start `[K]`, end `[K]`.
    /// d(log Z) is the expected feature count under the model; d(score) is
    /// the gold count.
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let (em, tr, st, en) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let k = st.numel();
        let t_len = em.shape()[0];
        let e = em.data();
        let p = Potentials {
            transition: tr.data(),
            start: st.data(),
            end: en.data(),
            k,
        };
        let alpha = forward(e, t_len, p);
        let beta = backward(e, t_len, p);
        let lz = log_z(&alpha, p);
        let g = grad_output[0];

        let mut ge = vec![0.0; t_len * k];
        let mut gt = vec![0.0; k * k];
        let mut gs = vec![0.0; k];
        let mut gn = vec![0.0; k];
        for t in 0..t_len {
            for j in 0..k {
                ge[t * k + j] = (alpha[t][j] + beta[t][j] - lz).exp();
            }
        }
        gs.copy_from_slice(&ge[..k]);
        gn.copy_from_slice(&ge[(t_len - 1) * k..]);
        for t in 0..t_len.saturating_sub(1) {
            for i in 0..k {
                for j in 0..k {
                    gt[i * k + j] +=
                        (alpha[t][i] + p.trans(i, j) + e[(t + 1) * k + j] + beta[t + 1][j] - lz).exp();
                }
            }
        }
        for (t, &y) in self.gold.iter().enumerate() {
            ge[t * k + y] -= 1.0;
            if t > 0 {
                gt[self.gold[t - 1] * k + y] -= 1.0;
            }
        }
        gs[self.gold[0]] -= 1.0;
        gn[self.gold[t_len - 1]] -= 1.0;
        for buf in [&mut ge, &mut gt, &mut gs, &mut gn] {
            buf.iter_mut().for_each(|v| *v *= g);
        }
        vec![ge, gt, gs, gn]
    }
}

/// Differentiable CRF negative log-likelihood on the tape.
pub fn crf_nll_on_graph(
    graph: &mut Graph,
    emissions: Var,
    transition: Var,
    start: Var,
    end: Var,
    gold: &[usize],
) -> Result<Var> {
    let params = CrfParams {
        transition: graph.value(transition).clone(),
        start: graph.value(start).clone(),
        end: graph.value(end).clone(),
        emission_proj: Tensor::zeros(&[0, graph.value(start).numel()]),
        emission_bias: Tensor::zeros(&[graph.value(start).numel()]),
    };
    let loss = crf_nll(graph.value(emissions), gold, &params)?;
    let op = Box::new(CrfNllOp { gold: gold.to_vec() });
    Ok(graph.custom(op, &[emissions, transition, start, end], Tensor::scalar(loss)))
}
