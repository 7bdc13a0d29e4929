//! CLIP text encoder (the one Stable Diffusion conditions on) behind the
//! [`TextEncoder`] trait, for measuring concept geometry.
//!
//! Weights are read from a local directory holding `tokenizer.json` and
//! `model.safetensors` (a `CLIPTextModel` or full `CLIPModel` checkpoint).
//! Nothing is downloaded.

use std::io::Read;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, IndexOp, Tensor as CTensor};
use candle_nn::VarBuilder;
use candle_transformers::models::stable_diffusion::clip::{ClipTextTransformer, Config};
use crce_core::embedding::{EmbeddingError, EmbeddingVector, Pooling, TextEncoder};
use crce_core::tensor::Tensor;
use sha2::{Digest, Sha256};
use tokenizers::Tokenizer;

/// Environment variable naming the weights directory.
pub const CLIP_DIR_ENV: &str = "CRCE_CLIP_DIR";
pub const CONTEXT_LEN: usize = 77;
pub const EOS_TOKEN: &str = "<|endoftext|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipVariant {
    /// ViT-L/14 text tower, used by SD 1.x.
    VitL14,
    /// OpenCLIP ViT-H text tower, used by SD 2.x.
    VitH14,
}

impl ClipVariant {
    fn config(self) -> Config {
        match self {
            ClipVariant::VitL14 => Config::v1_5(),
            ClipVariant::VitH14 => Config::v2_1(),
        }
    }

    /// Text width and projection width.
    fn dims(self) -> (usize, usize) {
        match self {
            ClipVariant::VitL14 => (768, 768),
            ClipVariant::VitH14 => (1024, 1024),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClipVariant::VitL14 => "vit-l-14",
            ClipVariant::VitH14 => "vit-h-14",
        }
    }
}

fn unavailable(msg: impl Into<String>) -> EmbeddingError {
    EmbeddingError::EncoderUnavailable(msg.into())
}

fn candle_err(e: candle_core::Error) -> EmbeddingError {
    EmbeddingError::Encoder(e.to_string())
}

/// Tokenizes to a fixed context, padding with the end-of-text id.
pub struct ClipTokenizer {
    inner: Tokenizer,
    eos_id: u32,
    context: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<u32>,
    /// Position of the first end-of-text token.
    pub eos_index: usize,
}

impl ClipTokenizer {
    pub fn new(inner: Tokenizer, context: usize) -> Result<Self, EmbeddingError> {
        let eos_id = inner
            .token_to_id(EOS_TOKEN)
            .ok_or_else(|| unavailable(format!("tokenizer has no {EOS_TOKEN} token")))?;
        Ok(Self { inner, eos_id, context })
    }

    pub fn from_file(path: &Path) -> Result<Self, EmbeddingError> {
        let inner = Tokenizer::from_file(path).map_err(|e| unavailable(format!("{}: {e}", path.display())))?;
        Self::new(inner, CONTEXT_LEN)
    }

    /// Prompts longer than the context are rejected, never truncated.
    pub fn encode(&self, text: &str) -> Result<TokenizedPrompt, EmbeddingError> {
        let enc = self
            .inner
            .encode(text, true)
            .map_err(|e| EmbeddingError::Encoder(e.to_string()))?;
        let mut ids = enc.get_ids().to_vec();
        if ids.last() != Some(&self.eos_id) {
            ids.push(self.eos_id);
        }
        if ids.len() > self.context {
            return Err(EmbeddingError::TokenLimit {
                tokens: ids.len(),
                limit: self.context,
            });
        }
        let eos_index = ids.len() - 1;
        ids.resize(self.context, self.eos_id);
        Ok(TokenizedPrompt { ids, eos_index })
    }
}

pub struct ClipTextEncoder {
    model: ClipTextTransformer,
    projection: Option<candle_nn::Linear>,
    tokenizer: ClipTokenizer,
    pooling: Pooling,
    id: String,
    device: Device,
}

impl ClipTextEncoder {
    /// Loads `tokenizer.json` and `model.safetensors` from `dir`.
    ///
    /// `project` applies the CLIP text projection to the pooled vector; it
    /// needs a full `CLIPModel` checkpoint.
    pub fn load(dir: &Path, variant: ClipVariant, pooling: Pooling, project: bool) -> Result<Self, EmbeddingError> {
        let weights = dir.join("model.safetensors");
        let tok = dir.join("tokenizer.json");
        for p in [&weights, &tok] {
            if !p.is_file() {
                return Err(unavailable(format!("missing {}", p.display())));
            }
        }
        let device = Device::Cpu;
        // SAFETY: the file is mapped read-only and not modified while the encoder lives.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[&weights], DType::F32, &device) }.map_err(candle_err)?;
        let config = variant.config();
        let model = ClipTextTransformer::new(vb.clone(), &config).map_err(candle_err)?;
        let projection = if project {
            let (width, proj) = variant.dims();
            let w = vb
                .get((proj, width), "text_projection.weight")
                .map_err(|e| unavailable(format!("projection requested but checkpoint has none: {e}")))?;
            Some(candle_nn::Linear::new(w, None))
        } else {
            None
        };
        let id = format!(
            "clip-{}-{}-{}{}",
            variant.name(),
            weights_fingerprint(&weights)?,
            match pooling {
                Pooling::Eos => "eos",
                Pooling::MeanTokens => "mean",
            },
            if project { "-proj" } else { "" }
        );
        Ok(Self {
            model,
            projection,
            tokenizer: ClipTokenizer::from_file(&tok)?,
            pooling,
            id,
            device,
        })
    }

    /// Loads from the directory named by `CRCE_CLIP_DIR`.
    pub fn from_env(variant: ClipVariant, pooling: Pooling, project: bool) -> Result<Self, EmbeddingError> {
        let dir = clip_dir_from_env().ok_or_else(|| unavailable(format!("{CLIP_DIR_ENV} is not set")))?;
        Self::load(&dir, variant, pooling, project)
    }

    /// Builds from already-constructed parts (for random-weight tests).
    pub fn from_parts(model: ClipTextTransformer, tokenizer: ClipTokenizer, pooling: Pooling, id: String) -> Self {
        Self {
            model,
            projection: None,
            tokenizer,
            pooling,
            id,
            device: Device::Cpu,
        }
    }

    /// Final-layer hidden states, `[context, width]`.
    fn hidden(&self, ids: &[u32]) -> Result<CTensor, EmbeddingError> {
        let input = CTensor::new(ids, &self.device)
            .and_then(|t| t.unsqueeze(0))
            .map_err(candle_err)?;
        self.model
            .forward_with_mask(&input, ids.len())
            .and_then(|h| h.squeeze(0))
            .map_err(candle_err)
    }
}

pub fn clip_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CLIP_DIR_ENV).map(PathBuf::from).filter(|p| !p.as_os_str().is_empty())
}

/// First 16 hex chars of SHA-256 over the file length and its first MiB.
fn weights_fingerprint(path: &Path) -> Result<String, EmbeddingError> {
    let io = |e: std::io::Error| EmbeddingError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut f = std::fs::File::open(path).map_err(io)?;
    let len = f.metadata().map_err(io)?.len();
    let mut head = Vec::new();
    f.by_ref().take(1 << 20).read_to_end(&mut head).map_err(io)?;
    let mut h = Sha256::new();
    h.update(len.to_le_bytes());
    h.update(&head);
    Ok(hex::encode(&h.finalize()[..8]))
}

fn to_f64(t: &CTensor) -> Result<Vec<f64>, EmbeddingError> {
    t.to_dtype(DType::F64)
        .and_then(|t| t.flatten_all())
        .and_then(|t| t.to_vec1::<f64>())
        .map_err(candle_err)
}

impl TextEncoder for ClipTextEncoder {
    fn encoder_id(&self) -> String {
        self.id.clone()
    }

    fn encode_pooled(&mut self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let tok = self.tokenizer.encode(text)?;
        let hidden = self.hidden(&tok.ids)?;
        let pooled = match self.pooling {
            Pooling::Eos => hidden.i(tok.eos_index),
            Pooling::MeanTokens => hidden.i(..=tok.eos_index).and_then(|h| h.mean(0)),
        }
        .map_err(candle_err)?;
        let pooled = match &self.projection {
            Some(p) => candle_nn::Module::forward(p, &pooled.unsqueeze(0).map_err(candle_err)?)
                .and_then(|t| t.squeeze(0))
                .map_err(candle_err)?,
            None => pooled,
        };
        EmbeddingVector::unit(to_f64(&pooled)?)
    }

    fn encode_conditioning(&mut self, text: &str) -> Result<Tensor, EmbeddingError> {
        let tok = self.tokenizer.encode(text)?;
        let hidden = self.hidden(&tok.ids)?;
        let shape = hidden.dims().to_vec();
        Tensor::new(shape, to_f64(&hidden)?).map_err(|e| EmbeddingError::Encoder(e.to_string()))
    }
}
