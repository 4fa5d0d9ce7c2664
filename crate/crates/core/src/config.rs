//! Model, training and run configuration records.
//!
//! Every record rejects unknown keys when parsed. Defaults describe the desk-scale
//! toy setup; [`ModelConfig::full_scale`] gives a larger preset for parameter
//! accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// One owned masking network per instrument.
    Baseline,
    /// TCN blocks tied across instruments; input/output projections per instrument.
    SharedTcn,
    /// Masking parameters generated from instrument embeddings.
    Meta,
}

impl SharingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SharingMode::Baseline => "baseline",
            SharingMode::SharedTcn => "shared_tcn",
            SharingMode::Meta => "meta",
        }
    }
}

impl std::str::FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(SharingMode::Baseline),
            "shared_tcn" => Ok(SharingMode::SharedTcn),
            "meta" => Ok(SharingMode::Meta),
            other => Err(Error::Config(format!("unknown sharing mode `{other}`"))),
        }
    }
}

/// Encoder geometry at the base (lowest) sample rate; every stage scales
/// stride, kernel width, latent width and STFT window by `rate / base_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderBase {
    pub stride: usize,
    pub kernel: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub stft_window: usize,
}

impl Default for EncoderBase {
    fn default() -> Self {
        EncoderBase {
            stride: 8,
            kernel: 32,
            latent_dim: 16,
            heads: 2,
            stft_window: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnBase {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub kernel: usize,
}

impl Default for TcnBase {
    fn default() -> Self {
        TcnBase {
            blocks: 1,
            layers_per_block: 3,
            hidden: 32,
            bottleneck: 16,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub si_snr: f64,
    pub dissimilarity: f64,
    pub similarity: f64,
    pub reconstruction: f64,
    /// Multiplier per stage, lowest rate first. Empty means 1.0 everywhere.
    pub stage_scale: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            si_snr: 1.0,
            dissimilarity: 0.1,
            similarity: 0.1,
            reconstruction: 0.05,
            stage_scale: Vec::new(),
        }
    }
}

impl LossWeights {
    pub fn stage(&self, index: usize) -> f64 {
        self.stage_scale.get(index).copied().unwrap_or(1.0)
    }
}

/// The architecture toggles ablated one at a time against vanilla.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub stronger_encoder: bool,
    pub aux_losses: bool,
    pub multi_stage: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            stronger_encoder: true,
            aux_losses: true,
            multi_stage: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub instruments: Vec<String>,
    pub base_rate: u32,
    pub stage_rates: Vec<u32>,
    pub encoder: EncoderBase,
    pub tcn: TcnBase,
    pub sharing: SharingMode,
    /// Instrument embedding width (M).
    pub embedding_dim: usize,
    /// Generator bottleneck width (M′), strictly below `embedding_dim`.
    pub generator_dim: usize,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            instruments: ["tone", "noise", "clicks", "chirp"]
                .map(String::from)
                .to_vec(),
            base_rate: 8000,
            stage_rates: vec![8000, 16000, 32000],
            encoder: EncoderBase::default(),
            tcn: TcnBase::default(),
            sharing: SharingMode::Meta,
            embedding_dim: 16,
            generator_dim: 4,
            loss: LossWeights::default(),
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

/// Per-stage encoder/decoder geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_heads: usize,
    pub base_kernel: usize,
    pub stride: usize,
    pub latent_dim: usize,
    pub stft_window: usize,
    pub stage_rate: u32,
    /// Multi-head + STFT encoder when true, single convolution otherwise.
    pub stronger: bool,
}

/// Shape of one masking subnetwork.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcnConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub hidden_channels: usize,
    pub bottleneck_channels: usize,
    pub kernel_size: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl TcnConfig {
    pub fn receptive_field(&self) -> usize {
        let per_block: usize = (0..self.layers_per_block)
            .map(|l| (self.kernel_size - 1) << l)
            .sum();
        1 + self.num_blocks * per_block
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub index: usize,
    pub rate: u32,
    /// `rate / base_rate`.
    pub factor: usize,
    pub encoder: EncoderConfig,
    pub tcn: TcnConfig,
    /// Latent width of the previous stage, if any.
    pub prev_latent_dim: Option<usize>,
}

impl ModelConfig {
    /// Larger preset used for parameter accounting at realistic widths.
    pub fn full_scale() -> Self {
        ModelConfig {
            instruments: ["vocals", "drums", "bass", "other"]
                .map(String::from)
                .to_vec(),
            encoder: EncoderBase {
                stride: 8,
                kernel: 32,
                latent_dim: 256,
                heads: 3,
                stft_window: 256,
            },
            tcn: TcnBase {
                blocks: 3,
                layers_per_block: 8,
                hidden: 512,
                bottleneck: 128,
                kernel: 3,
            },
            embedding_dim: 256,
            generator_dim: 64,
            ..ModelConfig::default()
        }
    }

    pub fn active_rates(&self) -> Vec<u32> {
        if self.ablation.multi_stage {
            self.stage_rates.clone()
        } else {
            self.stage_rates.last().copied().into_iter().collect()
        }
    }

    pub fn top_rate(&self) -> u32 {
        *self.stage_rates.last().expect("validated non-empty")
    }

    pub fn stages(&self) -> Vec<StageConfig> {
        let mut prev = None;
        self.active_rates()
            .into_iter()
            .enumerate()
            .map(|(index, rate)| {
                let factor = (rate / self.base_rate) as usize;
                let d = self.encoder.latent_dim * factor;
                let stage = StageConfig {
                    index,
                    rate,
                    factor,
                    encoder: EncoderConfig {
                        num_heads: self.encoder.heads,
                        base_kernel: self.encoder.kernel * factor,
                        stride: self.encoder.stride * factor,
                        latent_dim: d,
                        stft_window: self.encoder.stft_window * factor,
                        stage_rate: rate,
                        stronger: self.ablation.stronger_encoder,
                    },
                    tcn: TcnConfig {
                        num_blocks: self.tcn.blocks,
                        layers_per_block: self.tcn.layers_per_block,
                        hidden_channels: self.tcn.hidden,
                        bottleneck_channels: self.tcn.bottleneck,
                        kernel_size: self.tcn.kernel,
                        input_dim: if prev.is_some() { 2 * d } else { d },
                        output_dim: d,
                    },
                    prev_latent_dim: prev,
                };
                prev = Some(d);
                stage
            })
            .collect()
    }

    /// Loss weights after applying the aux-loss toggle.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss.clone();
        if !self.ablation.aux_losses {
            w.dissimilarity = 0.0;
            w.similarity = 0.0;
            w.reconstruction = 0.0;
        }
        w
    }

    pub fn instrument_index(&self, id: &str) -> Result<usize> {
        self.instruments
            .iter()
            .position(|i| i == id)
            .ok_or_else(|| Error::UnknownInstrument(id.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.instruments.is_empty() {
            return bad("instrument vocabulary is empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for i in &self.instruments {
            if !seen.insert(i) {
                return bad(format!("instrument `{i}` listed twice"));
            }
        }
        if self.stage_rates.is_empty() {
            return bad("no stage rates".into());
        }
        if self.base_rate == 0 {
            return bad("base_rate must be positive".into());
        }
        for w in self.stage_rates.windows(2) {
            if w[1] <= w[0] {
                return bad("stage rates must increase".into());
            }
        }
        for &r in &self.stage_rates {
            if r % self.base_rate != 0 {
                return bad(format!("stage rate {r} is not a multiple of {}", self.base_rate));
            }
        }
        let e = &self.encoder;
        if e.stride == 0 || e.heads == 0 || e.latent_dim == 0 || e.kernel == 0 {
            return bad("encoder stride, heads, kernel and latent_dim must be positive".into());
        }
        let div = 1usize << e.heads;
        if e.kernel % div != 0 {
            return bad(format!(
                "encoder kernel {} must be divisible by 2^heads = {div}",
                e.kernel
            ));
        }
        if e.latent_dim % div != 0 || e.latent_dim % 4 != 0 {
            return bad(format!(
                "latent_dim {} must be divisible by 4 and by 2^heads = {div}",
                e.latent_dim
            ));
        }
        if !e.stft_window.is_power_of_two() || e.stft_window % e.stride != 0 {
            return bad(format!(
                "stft_window {} must be a power of two divisible by the stride {}",
                e.stft_window, e.stride
            ));
        }
        for s in self.stages() {
            if !s.encoder.stft_window.is_power_of_two() {
                return bad(format!(
                    "stage {} STFT window {} is not a power of two",
                    s.rate, s.encoder.stft_window
                ));
            }
        }
        let t = &self.tcn;
        if t.blocks == 0 || t.layers_per_block == 0 || t.hidden == 0 || t.bottleneck == 0 {
            return bad("TCN blocks, layers, hidden and bottleneck must be positive".into());
        }
        if t.kernel % 2 == 0 {
            return bad(format!("TCN kernel {} must be odd", t.kernel));
        }
        if self.sharing == SharingMode::Meta
            && (self.generator_dim == 0 || self.generator_dim >= self.embedding_dim)
        {
            return bad(format!(
                "meta mode needs 0 < generator_dim ({}) < embedding_dim ({})",
                self.generator_dim, self.embedding_dim
            ));
        }
        let l = &self.loss;
        if !(l.si_snr > 0.0) {
            return bad("the SI-SNR loss weight must be positive".into());
        }
        if [l.dissimilarity, l.similarity, l.reconstruction]
            .iter()
            .chain(&l.stage_scale)
            .any(|w| !(*w >= 0.0))
        {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Slow-weight synchronisation period.
    pub lookahead_steps: usize,
    pub lookahead_alpha: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            lookahead_steps: 6,
            lookahead_alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop_seconds: f64,
    pub max_steps: usize,
    /// Steps per epoch; validation runs at the end of every epoch.
    pub epoch_steps: usize,
    pub checkpoint_every: usize,
    pub optimizer: OptimizerConfig,
    /// Probability that a batch element mixes sources from different tracks.
    pub shuffle_probability: f64,
    pub gain_range: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            crop_seconds: 0.128,
            max_steps: 2000,
            epoch_steps: 100,
            checkpoint_every: 0,
            optimizer: OptimizerConfig::default(),
            shuffle_probability: 0.5,
            gain_range: (0.75, 1.25),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::Config("crop_seconds must be positive".into()));
        }
        if self.epoch_steps == 0 {
            return Err(Error::Config("epoch_steps must be positive".into()));
        }
        let (lo, hi) = self.gain_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad gain range ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.shuffle_probability) {
            return Err(Error::Config("shuffle_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Evaluation and inference segmentation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub segment_seconds: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            segment_seconds: 8.0,
        }
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Folder of `<track>/<instrument>.wav` directories.
    pub train: Option<std::path::PathBuf>,
    /// Separate validation folder. Without one, the last
    /// `validation_tracks` training tracks are held out.
    pub validation: Option<std::path::PathBuf>,
    pub validation_tracks: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub checkpoint: Option<std::path::PathBuf>,
    /// Metric log; defaults to the checkpoint path with a `.jsonl` extension.
    pub log: Option<std::path::PathBuf>,
    /// Ablation table.
    pub table: Option<std::path::PathBuf>,
    /// Per-row checkpoints of the ablation suite.
    pub work_dir: Option<std::path::PathBuf>,
}

/// The full run configuration file. Every block is optional and every key
/// has a default; unknown keys are errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub toy: crate::dataset::ToySpec,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.toy.validate()?;
        if !(self.eval.segment_seconds > 0.0) {
            return Err(Error::Config("segment_seconds must be positive".into()));
        }
        Ok(())
    }
}
