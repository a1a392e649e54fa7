use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), normal_tensor(rng, &[fan_in, fan_out], init_std))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]))?,
            eps,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Test hooks that short-circuit parts of a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerAblation {
    #[default]
    None,
    /// Attention and feed-forward outputs forced to zero; only the two
    /// layer norms remain.
    ZeroSublayers,
    /// The layer returns its input unchanged.
    Identity,
}

/// Post-norm transformer block: `LN(x + MHA(x))` then `LN(h + FFN(h))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
    pub num_heads: usize,
    pub dropout: f64,
}

/// Additive attention mask `[T, T]`: `-inf` on padded key columns.
pub fn attention_mask_bias(mask: &[bool]) -> Tensor {
    let t = mask.len();
    let row: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::NEG_INFINITY }).collect();
    Tensor::new(vec![t, t], row.repeat(t)).expect("square")
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        ff: usize,
        num_heads: usize,
        eps: f64,
        init_std: f64,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.attn.query"), hidden, hidden, init_std, rng)?,
            key: Linear::new(store, &format!("{name}.attn.key"), hidden, hidden, init_std, rng)?,
            value: Linear::new(store, &format!("{name}.attn.value"), hidden, hidden, init_std, rng)?,
            output: Linear::new(store, &format!("{name}.attn.output"), hidden, hidden, init_std, rng)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), hidden, eps)?,
            ff_in: Linear::new(store, &format!("{name}.ff.input"), hidden, ff, init_std, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff.output"), ff, hidden, init_std, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), hidden, eps)?,
            num_heads,
            dropout,
        })
    }

    /// `mask_bias` comes from [`attention_mask_bias`]. When `trace` is given,
    /// the per-head attention probability nodes are appended to it.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask_bias: Var,
        ablation: LayerAblation,
        rng: Option<&mut ChaCha8Rng>,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if ablation == LayerAblation::Identity {
            return Ok(x);
        }
        let mut rng = rng;
        let h1 = if ablation == LayerAblation::ZeroSublayers {
            self.attn_norm.forward(g, store, x)?
        } else {
            let attn = self.attention(g, store, x, mask_bias, trace)?;
            let attn = match rng.as_deref_mut() {
                Some(r) => g.dropout(attn, self.dropout, r),
                None => attn,
            };
            let res = g.add(x, attn)?;
            self.attn_norm.forward(g, store, res)?
        };
        if ablation == LayerAblation::ZeroSublayers {
            return self.ff_norm.forward(g, store, h1);
        }
        let inner = self.ff_in.forward(g, store, h1)?;
        let inner = g.gelu(inner);
        let ff = self.ff_out.forward(g, store, inner)?;
        let ff = match rng {
            Some(r) => g.dropout(ff, self.dropout, r),
            None => ff,
        };
        let res = g.add(h1, ff)?;
        self.ff_norm.forward(g, store, res)
    }

    fn attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask_bias: Var,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let hidden = g.shape(x)[1];
        let head_dim = hidden / self.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, mask_bias)?;
            let probs = g.softmax(scores, 1)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(probs);
            }
            heads.push(g.matmul(probs, vh)?);
        }
        let merged = g.concat_cols(&heads)?;
        self.output.forward(g, store, merged)
    }
}
