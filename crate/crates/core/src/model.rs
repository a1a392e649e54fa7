//! Encoder plus aggregation heads as one trainable model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::viterbi_decode;
use crate::encoder::{attention_mask_bias, Encoder, EncoderConfig, TokenizedSequence};
use crate::error::{Error, Result};
use crate::heads::{
    combine_crf, combine_scores, hsum_forward, psum_forward, total_loss, AggregationMode, BranchOutput, BranchSet,
    Head, InferBranch, Prediction, Target, Task, NUM_BRANCHES,
};
use crate::tensor::{argmax, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub mode: AggregationMode,
    pub infer_branch: InferBranch,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.mode != AggregationMode::Vanilla && self.encoder.num_layers < NUM_BRANCHES {
            return Err(Error::Config(format!(
                "{} needs at least {NUM_BRANCHES} encoder layers, got {}",
                self.mode, self.encoder.num_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum HeadStack {
    /// One head on the last hidden state, no extra layers.
    Vanilla(Head),
    Branches(BranchSet),
}

#[derive(Debug, Clone)]
pub struct AbsaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub heads: HeadStack,
}

pub struct ForwardOutput {
    /// `L + 1` encoder states.
    pub hiddens: Vec<Var>,
    pub branches: Vec<BranchOutput>,
}

impl AbsaModel {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config.encoder, &mut rng)?;
        let e = &config.encoder;
        let heads = match config.mode {
            AggregationMode::Vanilla => {
                HeadStack::Vanilla(Head::new(config.task, &mut params, "head", e.hidden_size, e.init_std, &mut rng)?)
            }
            AggregationMode::PSum | AggregationMode::HSum => HeadStack::Branches(BranchSet::new(
                config.task,
                &mut params,
                e.hidden_size,
                e.ff_size,
                e.num_heads,
                e.layer_norm_eps,
                e.init_std,
                e.dropout,
                &mut rng,
            )?),
        };
        Ok(Self {
            config,
            params,
            encoder,
            heads,
        })
    }

    /// Rebuilds the module structure for `config` and installs `params`,
    /// checking that names and shapes agree.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, name, t) in model.params.iter() {
            let got = params
                .id_of(name)
                .ok_or_else(|| Error::Integrity(format!("missing parameter {name}")))?;
            if got != id || params.get(got).shape() != t.shape() {
                return Err(Error::Integrity(format!("parameter {name} has the wrong slot or shape")));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn head_list(&self) -> Vec<&Head> {
        match &self.heads {
            HeadStack::Vanilla(h) => vec![h],
            HeadStack::Branches(b) => b.heads.iter().collect(),
        }
    }

    /// Last four encoder states, deepest first.
    pub fn aggregation_inputs(hiddens: &[Var]) -> Result<Vec<Var>> {
        if hiddens.len() < NUM_BRANCHES + 1 {
            return Err(Error::Contract(format!(
                "need at least {} hidden states, got {}",
                NUM_BRANCHES + 1,
                hiddens.len()
            )));
        }
        Ok(hiddens.iter().rev().take(NUM_BRANCHES).copied().collect())
    }

    pub fn forward(&self, g: &mut Graph, seq: &TokenizedSequence, mut rng: Option<&mut ChaCha8Rng>) -> Result<ForwardOutput> {
        let hiddens = self.encoder.forward(g, &self.params, seq, rng.as_deref_mut())?;
        let positions = seq.word_positions();
        let branches = match &self.heads {
            HeadStack::Vanilla(head) => {
                let last = *hiddens.last().expect("at least the embedding state");
                let scores = head.scores(g, &self.params, last, &positions)?;
                vec![BranchOutput { hidden: last, scores }]
            }
            HeadStack::Branches(set) => {
                let inputs = Self::aggregation_inputs(&hiddens)?;
                let mask = g.constant(attention_mask_bias(&seq.mask));
                match self.config.mode {
                    AggregationMode::PSum => psum_forward(g, &self.params, &inputs, set, mask, &positions, rng)?,
                    _ => hsum_forward(g, &self.params, &inputs, set, mask, &positions, rng)?,
                }
            }
        };
        Ok(ForwardOutput { hiddens, branches })
    }

    /// Per-branch losses and their sum.
    pub fn loss(
        &self,
        g: &mut Graph,
        seq: &TokenizedSequence,
        target: &Target,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<Var>, Var)> {
        if let Target::Tags(tags) = target {
            if tags.len() != seq.tokens.len() {
                return Err(Error::dim("tags", &[tags.len()], &[seq.tokens.len()]));
            }
        }
        let out = self.forward(g, seq, rng)?;
        let heads = self.head_list();
        let losses = out
            .branches
            .iter()
            .zip(heads)
            .map(|(b, h)| h.loss(g, &self.params, b.scores, target))
            .collect::<Result<Vec<_>>>()?;
        let total = total_loss(g, &losses)?;
        Ok((losses, total))
    }

    /// Loss value without dropout or gradients.
    pub fn eval_loss(&self, seq: &TokenizedSequence, target: &Target) -> Result<f64> {
        let mut g = Graph::new();
        let (_, total) = self.loss(&mut g, seq, target, None)?;
        g.item(total)
    }

    /// Score tensors of every branch (emissions or `[1, 3]` logits).
    pub fn branch_scores(&self, seq: &TokenizedSequence) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, seq, None)?;
        Ok(out.branches.iter().map(|b| g.value(b.scores).clone()).collect())
    }

    /// Hidden states of every encoder layer as plain tensors.
    pub fn hidden_states(&self, seq: &TokenizedSequence) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let hs = self.encoder.forward(&mut g, &self.params, seq, None)?;
        Ok(hs.into_iter().map(|h| g.value(h).clone()).collect())
    }

    pub fn predict(&self, seq: &TokenizedSequence) -> Result<Prediction> {
        self.predict_with(seq, self.config.infer_branch)
    }

    pub fn predict_with(&self, seq: &TokenizedSequence, infer: InferBranch) -> Result<Prediction> {
        let scores = self.branch_scores(seq)?;
        let combined = combine_scores(&scores, infer)?;
        match self.config.task {
            Task::Asc => Ok(Prediction::Class(argmax(combined.data()))),
            Task::Ae => {
                if seq.tokens.is_empty() {
                    return Ok(Prediction::Tags(Vec::new()));
                }
                let crfs: Vec<_> = self
                    .head_list()
                    .iter()
                    .map(|h| match h {
                        Head::Crf(c) => Ok(c.params(&self.params)),
                        Head::Classifier(_) => Err(Error::Contract("AE model with a classifier head".into())),
                    })
                    .collect::<Result<_>>()?;
                let crf = combine_crf(&crfs, infer)?;
                Ok(Prediction::Tags(viterbi_decode(&combined, &crf, true)?))
            }
        }
    }
}
