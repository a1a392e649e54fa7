//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` payload length, the
//! payload, then the SHA-256 of everything before it. All integers and
//! floats are little-endian; tensors are stored row-major.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::model::{AbsaModel, ModelConfig};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"ABSACKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

/// Position of a ChaCha generator, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub run_config: RunConfig,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub vocab: Vocab,
    pub model: AbsaModel,
    pub optimizer: AdamState,
    pub rng: RngState,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("payload ends early at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("invalid UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.str(&self.run_config.to_text());
        w.str(&serde_json::to_string(&self.model.config)?);
        w.u64(self.seed);
        w.usize(self.epoch);

        w.usize(self.vocab.len());
        self.vocab.tokens().iter().for_each(|t| w.str(t));

        let params = &self.model.params;
        w.usize(params.len());
        for (_, name, t) in params.iter() {
            w.str(name);
            w.usize(t.shape().len());
            t.shape().iter().for_each(|&d| w.usize(d));
            w.f64s(t.data());
        }

        let opt = &self.optimizer;
        for v in [opt.config.lr, opt.config.beta1, opt.config.beta2, opt.config.epsilon] {
            w.f64(v);
        }
        w.u64(opt.step);
        w.usize(opt.first_moment.len());
        for (m, v) in opt.first_moment.iter().zip(&opt.second_moment) {
            w.f64s(m);
            w.f64s(v);
        }

        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        let payload = w.0;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + DIGEST_LEN {
            return Err(Error::Integrity(format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let payload_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let expected_len = (HEADER_LEN + DIGEST_LEN) as u64 + payload_len;
        if bytes.len() as u64 != expected_len {
            return Err(Error::Integrity(format!(
                "expected {expected_len} bytes, found {}",
                bytes.len()
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible {
                found: version,
                expected: FORMAT_VERSION,
            });
        }

        let mut r = Reader {
            buf: &body[HEADER_LEN..],
            pos: 0,
        };
        let run_config = RunConfig::parse_str(&r.str()?)?;
        let model_config: ModelConfig = serde_json::from_str(&r.str()?)?;
        let seed = r.u64()?;
        let epoch = r.usize()?;

        let n = r.usize()?;
        let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_tokens(tokens)?;

        let n = r.usize()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let ndim = r.usize()?;
            let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Integrity(format!("parameter {name}: {e}")))?;
            params
                .add(name, t)
                .map_err(|e| Error::Integrity(e.to_string()))?;
        }
        let model = AbsaModel::with_params(model_config, params)?;

        let config = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
        };
        let step = r.u64()?;
        let n = r.usize()?;
        let mut first_moment = Vec::with_capacity(n);
        let mut second_moment = Vec::with_capacity(n);
        for _ in 0..n {
            first_moment.push(r.f64s()?);
            second_moment.push(r.f64s()?);
        }
        let optimizer = AdamState {
            config,
            step,
            first_moment,
            second_moment,
        };

        let rng = RngState {
            seed: r.take(32)?.try_into().expect("32 bytes"),
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
        };
        if r.pos != r.buf.len() {
            return Err(Error::Integrity(format!("{} trailing payload bytes", r.buf.len() - r.pos)));
        }
        Ok(Self {
            run_config,
            seed,
            epoch,
            vocab,
            model,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn param_digest(&self) -> [u8; 32] {
        param_digest(&self.model.params)
    }
}

pub fn param_digest(params: &ParamStore) -> [u8; 32] {
    let mut h = Sha256::new();
    for (_, name, t) in params.iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}
