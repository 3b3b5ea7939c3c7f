//! Audio encoder, text encoder and captioning decoder, with their shared
//! parameter store and checkpoint I/O.

pub mod audio;
mod config;
pub mod layers;
pub mod text;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use audio::AudioEncoding;
pub use config::{DecoderConfig, EncoderConfig, ModelConfig, MAX_FRAMES, MAX_TOKENS, MIN_MEL_FRAMES};

use crate::audio::{MelFeatures, N_MELS};
use crate::tensor::{load_tensors, save_tensors, Graph, ParamStore, RowPlan, Scalar, Tensor, TensorError, Var};
use crate::tokenizer::{BOS, EOS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has {frames} mel frames; at least {min} survive subsampling")]
    TooShort { frames: usize, min: usize },
    #[error("sequence of length {len} exceeds the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty {0}")]
    EmptyInput(&'static str),
    #[error("model has no {0}")]
    MissingTower(&'static str),
    #[error("checkpoint tensor `{0}` does not exist in this model")]
    UnexpectedTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-frame encoder output at 25 Hz with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddings {
    pub frames: Tensor,
    pub mask: Vec<bool>,
}

impl FrameEmbeddings {
    pub fn new(frames: Tensor, mask: Vec<bool>) -> Self {
        assert_eq!(frames.rows(), mask.len(), "one mask entry per frame");
        Self { frames, mask }
    }

    /// All frames valid.
    pub fn dense(frames: Tensor) -> Self {
        let n = frames.rows();
        Self::new(frames, vec![true; n])
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Valid frames only.
    pub fn valid_rows(&self) -> Vec<&[f32]> {
        (0..self.n_frames()).filter(|&i| self.mask[i]).map(|i| self.frames.row(i)).collect()
    }
}

/// Which text-side towers a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Towers {
    pub text_encoder: bool,
    pub decoder: bool,
}

impl Towers {
    pub const CONTRASTIVE: Towers = Towers {
        text_encoder: true,
        decoder: false,
    };
    pub const CAPTIONING: Towers = Towers {
        text_encoder: false,
        decoder: true,
    };
    pub const BOTH: Towers = Towers {
        text_encoder: true,
        decoder: true,
    };
}

/// Names excluded from model parameter loading (optimizer state, exports).
pub fn is_auxiliary_tensor(name: &str) -> bool {
    name.starts_with("opt/") || name.starts_with("emb/")
}

/// The audio tower plus whichever text towers are present, as named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioLanguageModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl AudioLanguageModel {
    pub fn new(config: ModelConfig, towers: Towers, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut model = Self {
            config,
            params: ParamStore::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        audio::init(&mut model.params, &model.config.encoder, &mut rng);
        if towers.text_encoder {
            model.add_text_encoder(seed.wrapping_add(1));
        }
        if towers.decoder {
            model.add_decoder(seed.wrapping_add(2));
        }
        Ok(model)
    }

    /// Adds a freshly initialized text encoder and contrastive heads,
    /// replacing any existing ones.
    pub fn add_text_encoder(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.config;
        text::init_encoder(&mut self.params, &c.decoder, c.vocab_size, &mut rng);
        self.params.init_xavier("head/audio_proj/w", c.encoder.dim, c.shared_dim, &mut rng);
        self.params.init_xavier("head/text_proj/w", c.decoder.dim, c.shared_dim, &mut rng);
        self.params.init_const("head/log_tau", &[1], 0.07f32.ln());
    }

    pub fn add_decoder(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.config;
        text::init_decoder(&mut self.params, &c.decoder, c.vocab_size, c.encoder.dim, &mut rng);
    }

    pub fn towers(&self) -> Towers {
        Towers {
            text_encoder: self.params.get("text_enc/tok").is_some(),
            decoder: self.params.get("text_dec/tok").is_some(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    // ---- graph-level forward passes ----

    pub fn audio_graph<T: Scalar>(&self, g: &mut Graph<T>, mel: &Tensor, valid: usize) -> Result<AudioEncoding, ModelError> {
        audio::encode(g, &self.params, &self.config.encoder, mel, valid)
    }

    /// Mean over valid frames, projected into the shared space: `[1 × shared]`.
    pub fn audio_clip_graph<T: Scalar>(&self, g: &mut Graph<T>, enc: &AudioEncoding) -> Result<Var, ModelError> {
        let n = enc.mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(ModelError::EmptyInput("audio frames"));
        }
        let w = 1.0 / n as f64;
        let plan = RowPlan {
            rows: vec![enc.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| (i, w)).collect()],
        };
        let pooled = g.row_combine(enc.frames, plan)?;
        self.require(Towers::CONTRASTIVE)?;
        layers::linear(g, &self.params, "head/audio_proj", pooled)
    }

    /// Text clip embedding `[1 × shared]` from the BOS position.
    pub fn text_clip_graph<T: Scalar>(&self, g: &mut Graph<T>, tokens: &[u32]) -> Result<Var, ModelError> {
        self.require(Towers::CONTRASTIVE)?;
        let h = text::encode(g, &self.params, &self.config.decoder, tokens)?;
        layers::linear(g, &self.params, "head/text_proj", h)
    }

    pub fn decode_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        memory: Var,
        memory_mask: &[bool],
        inputs: &[u32],
        causal: bool,
    ) -> Result<Var, ModelError> {
        self.require(Towers::CAPTIONING)?;
        text::decode(g, &self.params, &self.config.decoder, memory, memory_mask, inputs, causal)
    }

    fn require(&self, t: Towers) -> Result<(), ModelError> {
        let have = self.towers();
        if t.text_encoder && !have.text_encoder {
            return Err(ModelError::MissingTower("text encoder"));
        }
        if t.decoder && !have.decoder {
            return Err(ModelError::MissingTower("text decoder"));
        }
        Ok(())
    }

    // ---- inference conveniences ----

    pub fn encode_audio(&self, mel: &MelFeatures) -> Result<FrameEmbeddings, ModelError> {
        let mut g = Graph::<f32>::inference();
        let enc = self.audio_graph(&mut g, &mel.frames, mel.n_frames())?;
        Ok(FrameEmbeddings::new(g.value(enc.frames).clone(), enc.mask))
    }

    /// Encodes clips as one zero-padded batch; each result keeps the padded
    /// length with padded frames masked.
    pub fn encode_audio_batch(&self, mels: &[&MelFeatures]) -> Result<Vec<FrameEmbeddings>, ModelError> {
        let longest = mels.iter().map(|m| m.n_frames()).max().unwrap_or(0);
        mels.iter()
            .map(|m| {
                let mut data = m.frames.data().to_vec();
                data.resize(longest * N_MELS, 0.0);
                let padded = Tensor::new(vec![longest, N_MELS], data)?;
                let mut g = Graph::<f32>::inference();
                let enc = self.audio_graph(&mut g, &padded, m.n_frames())?;
                Ok(FrameEmbeddings::new(g.value(enc.frames).clone(), enc.mask))
            })
            .collect()
    }

    /// Clip embedding of a mel input in the shared space (not normalized).
    pub fn embed_audio(&self, mel: &MelFeatures) -> Result<Vec<f32>, ModelError> {
        let mut g = Graph::<f32>::inference();
        let enc = self.audio_graph(&mut g, &mel.frames, mel.n_frames())?;
        let z = self.audio_clip_graph(&mut g, &enc)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn encode_text(&self, tokens: &[u32]) -> Result<Vec<f32>, ModelError> {
        let mut g = Graph::<f32>::inference();
        let z = self.text_clip_graph(&mut g, tokens)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn decode_text(&self, memory: &FrameEmbeddings, inputs: &[u32], causal: bool) -> Result<Tensor, ModelError> {
        let mut g = Graph::<f32>::inference();
        let mem = g.constant(memory.frames.clone());
        let logits = self.decode_graph(&mut g, mem, &memory.mask, inputs, causal)?;
        Ok(g.value(logits).clone())
    }

    /// Greedy autoregressive caption, without sentinels.
    pub fn generate(&self, memory: &FrameEmbeddings, max_len: usize) -> Result<Vec<u32>, ModelError> {
        let mut seq = vec![BOS];
        for _ in 0..max_len {
            let logits = self.decode_text(memory, &seq, true)?;
            let last = logits.row(logits.rows() - 1);
            let next = (0..last.len())
                .max_by(|&a, &b| last[a].total_cmp(&last[b]).then(b.cmp(&a)))
                .expect("non-empty vocab") as u32;
            if next == EOS {
                break;
            }
            seq.push(next);
        }
        Ok(seq[1..].to_vec())
    }

    // ---- checkpoints ----

    fn config_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes the parameters (plus any `extra` tensors) and the config JSON
    /// next to it.
    pub fn save_with<'a>(&'a self, path: &Path, extra: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<(), ModelError> {
        save_tensors(path, self.params.iter().chain(extra))?;
        std::fs::write(Self::config_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.save_with(path, std::iter::empty())
    }

    /// Loads parameters whose names pass `filter`. The checkpoint and the
    /// model must agree exactly on the filtered names and their shapes;
    /// on any mismatch nothing is modified.
    pub fn load_params(&mut self, path: &Path, filter: impl Fn(&str) -> bool) -> Result<usize, ModelError> {
        let tensors = load_tensors(path)?;
        self.load_from_tensors(&tensors, filter)
    }

    pub fn load_from_tensors(&mut self, tensors: &[(String, Tensor)], filter: impl Fn(&str) -> bool) -> Result<usize, ModelError> {
        let wanted = |n: &str| !is_auxiliary_tensor(n) && filter(n);
        for (name, _) in tensors.iter().filter(|(n, _)| wanted(n)) {
            if self.params.get(name).is_none() {
                return Err(ModelError::UnexpectedTensor(name.clone()));
            }
        }
        let present: BTreeSet<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(missing) = self.params.names().find(|n| wanted(n) && !present.contains(n)) {
            return Err(TensorError::Missing(missing.to_string()).into());
        }
        Ok(self
            .params
            .load_from(tensors.iter().map(|(n, t)| (n.as_str(), t)), wanted)?)
    }

    /// Rebuilds a model from a checkpoint and its config JSON.
    pub fn from_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(Self::config_path(path))?)?;
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, t) in load_tensors(path)? {
            if !is_auxiliary_tensor(&name) {
                params.insert(name, t);
            }
        }
        Ok(Self { config, params })
    }
}

/// Closed-form parameter count of a freshly built model.
pub fn expected_param_count(config: &ModelConfig, towers: Towers) -> usize {
    let mut n = audio::param_count(&config.encoder);
    if towers.text_encoder {
        n += text::encoder_param_count(&config.decoder, config.vocab_size);
        n += config.encoder.dim * config.shared_dim + config.decoder.dim * config.shared_dim + 1;
    }
    if towers.decoder {
        n += text::decoder_param_count(&config.decoder, config.vocab_size, config.encoder.dim);
    }
    n
}
