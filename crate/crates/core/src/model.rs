//! The progressive multi-stage separator.
//!
//! Each active stage encodes the mixture at its own rate, estimates one mask
//! per instrument and decodes the masked latent. From the second stage on, the
//! mask network sees the previous stage's masked latent (projected by a 1×1
//! bridge when widths differ) concatenated with the current latent.
//!
//! Parameter names:
//! `s{j}.enc.*`, `s{j}.dec.*`, `s{j}.bridge.*`, then by sharing mode
//! `s{j}.mask.{inst}.*` (baseline), `s{j}.mask.shared.*` for block layers
//! (shared TCN), or `embed.{inst}` and `s{j}.gen.*` (meta).

use crate::audio::{resample, Waveform};
use crate::config::{ModelConfig, SharingMode, StageConfig};
use crate::encoder::{self, LatentTensor};
use crate::error::{Error, Result};
use crate::generator::{GeneratorWeights, InstrumentEmbedding};
use crate::graph::{ConvGeom, Var};
use crate::masking::{apply_mask_net, init_mask_params, separate_latent, ParameterSet};
use crate::params::{init_layer, ParamStore, Scope};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stages: Vec<StageConfig>,
    pub params: ParamStore,
}

/// Graph handles produced by one stage of a forward pass.
#[derive(Debug, Clone)]
pub struct StageVars {
    /// Mixture latent (B, D, T′).
    pub mixture_latent: Var,
    /// Per instrument, in vocabulary order.
    pub masks: Vec<Var>,
    pub latents: Vec<Var>,
    /// (B, 1, T_stage).
    pub estimates: Vec<Var>,
}

/// Per-stage, per-instrument outputs for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSeparation {
    pub rate: u32,
    pub latents: Vec<LatentTensor>,
    pub waveforms: Vec<Waveform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationResult {
    pub instruments: Vec<String>,
    pub stages: Vec<StageSeparation>,
}

impl SeparationResult {
    pub fn last(&self) -> &StageSeparation {
        self.stages.last().expect("at least one stage")
    }
}

impl Model {
    /// Validates the configuration and initialises every parameter from
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let stages = config.stages();
        for s in &stages {
            encoder::validate(&s.encoder)?;
        }
        let mut params = ParamStore::new();
        let seed = config.seed;
        if config.sharing == SharingMode::Meta {
            InstrumentEmbedding::new(&config.instruments, config.embedding_dim)
                .init(&mut params, &mut substream(seed, "embed", 0));
        }
        for s in &stages {
            let j = s.index as u64;
            let p = format!("s{}", s.index);
            encoder::init_encoder(&mut params, &format!("{p}.enc"), &s.encoder, &mut substream(seed, "enc", j));
            encoder::init_decoder(&mut params, &format!("{p}.dec"), &s.encoder, &mut substream(seed, "dec", j));
            if let Some(prev) = s.prev_latent_dim.filter(|&d| d != s.encoder.latent_dim) {
                let d = s.encoder.latent_dim;
                init_layer(&mut params, &format!("{p}.bridge"), &[d, prev, 1], d, prev, &mut substream(seed, "bridge", j));
            }
            match config.sharing {
                SharingMode::Baseline => {
                    for (i, inst) in config.instruments.iter().enumerate() {
                        let mut rng = substream(seed, &format!("mask{}", s.index), i as u64);
                        init_mask_params(&mut params, &format!("{p}.mask.{inst}"), &s.tcn, |_| true, &mut rng);
                    }
                }
                SharingMode::SharedTcn => {
                    let mut rng = substream(seed, &format!("mask{}", s.index), u64::MAX);
                    init_mask_params(&mut params, &format!("{p}.mask.shared"), &s.tcn, |l| l.in_block, &mut rng);
                    for (i, inst) in config.instruments.iter().enumerate() {
                        let mut rng = substream(seed, &format!("mask{}", s.index), i as u64);
                        init_mask_params(&mut params, &format!("{p}.mask.{inst}"), &s.tcn, |l| !l.in_block, &mut rng);
                    }
                }
                SharingMode::Meta => {
                    generator_for(&config, s)?.init(&mut params, &mut substream(seed, "gen", j));
                }
            }
        }
        Ok(Model { config, stages, params })
    }

    pub fn instruments(&self) -> &[String] {
        &self.config.instruments
    }

    pub fn embeddings(&self) -> InstrumentEmbedding {
        InstrumentEmbedding::new(&self.config.instruments, self.config.embedding_dim)
    }

    pub fn generator(&self, stage: usize) -> Result<GeneratorWeights> {
        generator_for(&self.config, &self.stages[stage])
    }

    /// Samples per stage for a top-rate segment of `top_len` samples.
    pub fn stage_lengths(&self, top_len: usize) -> Vec<usize> {
        let top = self.config.top_rate() as usize;
        self.stages
            .iter()
            .map(|s| top_len * s.rate as usize / top)
            .collect()
    }

    /// Binds the mask parameters of `instrument` at `stage`.
    pub fn mask_params(&self, sc: &mut Scope, stage: usize, instrument: &str) -> Result<ParameterSet> {
        let s = &self.stages[stage];
        let p = format!("s{}.mask", s.index);
        match self.config.sharing {
            SharingMode::Baseline => ParameterSet::owned(sc, &format!("{p}.{instrument}"), &s.tcn),
            SharingMode::SharedTcn => {
                ParameterSet::tied(sc, &format!("{p}.{instrument}"), &format!("{p}.shared"), &s.tcn)
            }
            SharingMode::Meta => {
                let e = self.embeddings().bind(sc, instrument)?;
                self.generator(stage)?.generate(sc, e)
            }
        }
    }

    /// One stage for one instrument: mask from `h` (and the previous masked
    /// latent, if any), then the masked latent and its decoded waveform.
    pub fn forward_stage(
        &self,
        sc: &mut Scope,
        stage: usize,
        h: Var,
        prev: Option<Var>,
        instrument: &str,
        out_len: usize,
    ) -> Result<(Var, Var, Var)> {
        let s = &self.stages[stage];
        let input = match (prev, s.prev_latent_dim) {
            (None, None) => h,
            (Some(prev), Some(_)) => {
                let (_, _, t_prev) = sc.g.value(prev).dims3();
                let (_, _, t) = sc.g.value(h).dims3();
                if t_prev != t {
                    return Err(Error::Shape(format!(
                        "stage {stage}: previous latent has T′={t_prev}, current latent has T′={t}"
                    )));
                }
                let projected = if sc.has(&format!("s{}.bridge.w", s.index)) {
                    let w = sc.param(&format!("s{}.bridge.w", s.index))?;
                    let b = sc.param(&format!("s{}.bridge.b", s.index))?;
                    sc.g.conv1d(prev, w, Some(b), ConvGeom::pointwise(t))?
                } else {
                    prev
                };
                sc.g.concat_channels(&[projected, h])?
            }
            (None, Some(_)) => {
                return Err(Error::Invalid(format!("stage {stage} needs the previous stage's latent")))
            }
            (Some(_), None) => return Err(Error::Invalid("first stage takes no previous latent".into())),
        };
        let params = self.mask_params(sc, stage, instrument)?;
        let m = apply_mask_net(sc, input, &s.tcn, &params)?;
        let latent = separate_latent(sc, h, m)?;
        let est = encoder::decode(sc, &format!("s{}.dec", s.index), &s.encoder, latent, out_len)?;
        Ok((m, latent, est))
    }

    /// Full pipeline on a batch; `mixtures[j]` is (B, 1, T_j) at stage `j`'s rate.
    pub fn forward(&self, sc: &mut Scope, mixtures: &[Tensor]) -> Result<Vec<StageVars>> {
        if mixtures.len() != self.stages.len() {
            return Err(Error::Shape(format!(
                "model has {} stages, got {} mixture tensors",
                self.stages.len(),
                mixtures.len()
            )));
        }
        let mut out: Vec<StageVars> = Vec::with_capacity(self.stages.len());
        for (j, (s, mix)) in self.stages.iter().zip(mixtures).enumerate() {
            let (_, _, len) = mix.dims3();
            let h = encoder::encode(sc, &format!("s{}.enc", s.index), &s.encoder, mix)?;
            let mut sv = StageVars {
                mixture_latent: h,
                masks: Vec::new(),
                latents: Vec::new(),
                estimates: Vec::new(),
            };
            for (i, inst) in self.config.instruments.iter().enumerate() {
                let prev = if j == 0 { None } else { Some(out[j - 1].latents[i]) };
                let (m, l, e) = self.forward_stage(sc, j, h, prev, inst, len)?;
                sv.masks.push(m);
                sv.latents.push(l);
                sv.estimates.push(e);
            }
            out.push(sv);
        }
        Ok(out)
    }

    /// Separates one segment given at every stage rate.
    pub fn separate_stages(&self, mixtures: &[Waveform]) -> Result<SeparationResult> {
        for (w, s) in mixtures.iter().zip(&self.stages) {
            if w.sample_rate != s.rate {
                return Err(Error::Invalid(format!(
                    "stage {} runs at {} Hz, mixture is at {} Hz",
                    s.index, s.rate, w.sample_rate
                )));
            }
        }
        let inputs: Vec<Tensor> = mixtures
            .iter()
            .map(|w| Tensor::from_vec(&[1, 1, w.len()], w.samples.clone()))
            .collect::<Result<_>>()?;
        let mut sc = Scope::new(&self.params);
        let vars = self.forward(&mut sc, &inputs)?;
        let stages = vars
            .iter()
            .zip(&self.stages)
            .map(|(v, s)| {
                let latents = v
                    .latents
                    .iter()
                    .map(|&l| {
                        let (_, d, t) = sc.g.value(l).dims3();
                        Ok(LatentTensor {
                            values: sc.g.value(l).clone().reshaped(&[d, t])?,
                            stage_rate: s.rate,
                        })
                    })
                    .collect::<Result<_>>()?;
                let waveforms = v
                    .estimates
                    .iter()
                    .map(|&e| Waveform {
                        samples: sc.g.value(e).data().to_vec(),
                        sample_rate: s.rate,
                    })
                    .collect();
                Ok(StageSeparation {
                    rate: s.rate,
                    latents,
                    waveforms,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SeparationResult {
            instruments: self.config.instruments.clone(),
            stages,
        })
    }

    /// Separates a top-rate mixture. Lower-rate inputs are resampled from
    /// it; the segment is zero-padded to a whole number of base-rate samples
    /// and the outputs trimmed back.
    pub fn separate(&self, mixture: &Waveform) -> Result<SeparationResult> {
        let top = self.config.top_rate();
        if mixture.sample_rate != top {
            return Err(Error::Invalid(format!(
                "mixture must be at {top} Hz, got {} Hz",
                mixture.sample_rate
            )));
        }
        let unit = (top / self.config.base_rate) as usize;
        let padded_len = mixture.len().div_ceil(unit) * unit;
        let mut padded = mixture.samples.clone();
        padded.resize(padded_len, 0.0);
        let padded = Waveform::new(padded, top)?;
        let inputs = self
            .stages
            .iter()
            .map(|s| resample(&padded, s.rate))
            .collect::<Result<Vec<_>>>()?;
        let mut result = self.separate_stages(&inputs)?;
        for st in &mut result.stages {
            let keep = (mixture.len() as u64 * st.rate as u64).div_ceil(top as u64) as usize;
            for w in &mut st.waveforms {
                w.samples.truncate(keep);
            }
        }
        Ok(result)
    }
}

fn generator_for(config: &ModelConfig, s: &StageConfig) -> Result<GeneratorWeights> {
    GeneratorWeights::new(
        &format!("s{}.gen", s.index),
        &s.tcn,
        config.embedding_dim,
        config.generator_dim,
    )
}
