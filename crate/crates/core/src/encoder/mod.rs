//! BERT-style encoder: tokenizer, vocabulary, special-token framing and a
//! post-norm transformer stack that exposes every layer's hidden states.

mod layers;
mod tokenize;
mod vocab;

pub use layers::{attention_mask_bias, LayerAblation, LayerNorm, Linear, TransformerLayer};
pub use tokenize::{normalize, tokenize, Token};
pub use vocab::{Vocab, CLS, CLS_ID, PAD, PAD_ID, SEP, SEP_ID, UNK, UNK_ID};

pub(crate) use layers::normal_tensor;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub pad_id: usize,
    pub unk_id: usize,
    pub cls_id: usize,
    pub sep_id: usize,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            hidden_size: 64,
            num_heads: 4,
            ff_size: 256,
            vocab_size: 4,
            max_len: 128,
            pad_id: PAD_ID,
            unk_id: UNK_ID,
            cls_id: CLS_ID,
            sep_id: SEP_ID,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len {} < 3", self.max_len)));
        }
        if self.num_layers == 0 || self.ff_size == 0 {
            return Err(Error::Config("num_layers and ff_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Token ids framed as `[CLS] w₁ … wₙ [SEP]` (optionally followed by a
/// second segment and `[SEP]`), plus optional padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub ids: Vec<usize>,
    /// `true` for real positions, `false` for padding.
    pub mask: Vec<bool>,
    pub segments: Vec<usize>,
    /// Word tokens of the first segment, after truncation.
    pub tokens: Vec<Token>,
    pub truncated: bool,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions of the first segment's word tokens (`1..=n`).
    pub fn word_positions(&self) -> Vec<usize> {
        (1..=self.tokens.len()).collect()
    }

    pub fn num_real(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Pads with `pad_id` up to `len` positions.
    pub fn pad_to(&mut self, len: usize, pad_id: usize) {
        while self.ids.len() < len {
            self.ids.push(pad_id);
            self.mask.push(false);
            self.segments.push(0);
        }
    }
}

/// Frames `tokens` as `[CLS] tokens [SEP]`, dropping trailing tokens that do
/// not fit in `max_len`.
pub fn encode_sequence(tokens: &[Token], vocab: &Vocab, config: &EncoderConfig) -> TokenizedSequence {
    let budget = config.max_len.saturating_sub(2);
    let kept = &tokens[..tokens.len().min(budget)];
    let mut ids = Vec::with_capacity(kept.len() + 2);
    ids.push(config.cls_id);
    ids.extend(kept.iter().map(|t| vocab.id(&t.text)));
    ids.push(config.sep_id);
    let n = ids.len();
    TokenizedSequence {
        ids,
        mask: vec![true; n],
        segments: vec![0; n],
        tokens: kept.to_vec(),
        truncated: kept.len() < tokens.len(),
    }
}

/// `[CLS] first [SEP] second [SEP]` with segment ids 0 then 1. The first
/// segment is truncated before the second.
pub fn encode_pair(first: &[Token], second: &[Token], vocab: &Vocab, config: &EncoderConfig) -> TokenizedSequence {
    let budget = config.max_len.saturating_sub(3);
    let second_len = second.len().min(budget);
    let first_len = first.len().min(budget - second_len);
    let mut seq = encode_sequence(&first[..first_len], vocab, config);
    seq.truncated = first_len < first.len() || second_len < second.len();
    for t in &second[..second_len] {
        seq.ids.push(vocab.id(&t.text));
        seq.segments.push(1);
        seq.mask.push(true);
    }
    seq.ids.push(config.sep_id);
    seq.segments.push(1);
    seq.mask.push(true);
    seq
}

/// Vocabulary strings of the first segment's word positions.
pub fn decode(seq: &TokenizedSequence, vocab: &Vocab) -> Vec<String> {
    seq.word_positions()
        .into_iter()
        .map(|p| vocab.token(seq.ids[p]).unwrap_or(UNK).to_string())
        .collect()
}

/// Token, position and segment embeddings followed by the transformer stack.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub segment_embedding: ParamId,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<TransformerLayer>,
    pub ablation: LayerAblation,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_size;
        let token_embedding = store.add(
            "encoder.embeddings.token",
            normal_tensor(rng, &[config.vocab_size, h], config.init_std),
        )?;
        let position_embedding = store.add(
            "encoder.embeddings.position",
            normal_tensor(rng, &[config.max_len, h], config.init_std),
        )?;
        let segment_embedding = store.add(
            "encoder.embeddings.segment",
            normal_tensor(rng, &[2, h], config.init_std),
        )?;
        let embedding_norm = LayerNorm::new(store, "encoder.embeddings.norm", h, config.layer_norm_eps)?;
        let layers = (0..config.num_layers)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    &format!("encoder.layer.{i}"),
                    h,
                    config.ff_size,
                    config.num_heads,
                    config.layer_norm_eps,
                    config.init_std,
                    config.dropout,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            segment_embedding,
            embedding_norm,
            layers,
            ablation: LayerAblation::None,
        })
    }

    /// Returns `L + 1` hidden states `[T, H]`: the embedding output followed
    /// by each layer's output. `rng` enables dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &TokenizedSequence,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        self.forward_traced(g, store, seq, rng, None)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &TokenizedSequence,
        mut rng: Option<&mut ChaCha8Rng>,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Vec<Var>> {
        let t = seq.len();
        if t > self.config.max_len {
            return Err(Error::Contract(format!(
                "sequence of length {t} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let tok_table = g.param(store, self.token_embedding);
        let pos_table = g.param(store, self.position_embedding);
        let seg_table = g.param(store, self.segment_embedding);
        let tok = g.embedding_lookup(tok_table, &seq.ids)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.select_rows(pos_table, &positions)?;
        let seg = g.select_rows(seg_table, &seq.segments)?;
        let sum = g.add(tok, pos)?;
        let sum = g.add(sum, seg)?;
        let mut h = self.embedding_norm.forward(g, store, sum)?;
        if let Some(r) = rng.as_deref_mut() {
            h = g.dropout(h, self.config.dropout, r);
        }
        let mask_bias = g.constant(attention_mask_bias(&seq.mask));
        let mut hiddens = Vec::with_capacity(self.layers.len() + 1);
        hiddens.push(h);
        for layer in &self.layers {
            h = layer.forward(g, store, h, mask_bias, self.ablation, rng.as_deref_mut(), trace.as_deref_mut())?;
            hiddens.push(h);
        }
        Ok(hiddens)
    }
}
