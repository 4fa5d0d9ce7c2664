//! Toy multi-source tracks, stem-folder ingestion, and augmented batch
//! assembly at every stage rate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, resample, save_wav, Waveform};
use crate::error::{Error, Result};
use crate::losses::StageBatch;
use crate::rng::substream;
use crate::tensor::Tensor;

/// One track: per instrument, one waveform per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub track_id: String,
    pub sample_rate: u32,
    pub sources: BTreeMap<String, Vec<Waveform>>,
}

impl SourceSet {
    pub fn len(&self) -> usize {
        self.sources
            .values()
            .flat_map(|c| c.first())
            .map(Waveform::len)
            .min()
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mono mixture: the sum of every source's channel mean.
    pub fn mixture(&self) -> Waveform {
        let n = self.len();
        let mut out = vec![0.0; n];
        for chans in self.sources.values() {
            let k = chans.len() as f64;
            for ch in chans {
                for (o, s) in out.iter_mut().zip(&ch.samples) {
                    *o += s / k;
                }
            }
        }
        Waveform {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.sources.values().flat_map(|c| c.first()).map(Waveform::len).max().unwrap_or(0);
        for (name, chans) in &self.sources {
            if chans.is_empty() {
                return Err(Error::Dataset(format!("{}: `{name}` has no channels", self.track_id)));
            }
            for ch in chans {
                if ch.len() != n || ch.sample_rate != self.sample_rate {
                    return Err(Error::Dataset(format!(
                        "{}: `{name}` has {} samples at {} Hz, expected {n} at {} Hz",
                        self.track_id,
                        ch.len(),
                        ch.sample_rate,
                        self.sample_rate
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Spectral recipe of one toy instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Archetype {
    /// Harmonic tone with `1/k` partial amplitudes; `f0` is random per track
    /// in `[110, 220]` Hz unless fixed.
    Tone {
        #[serde(default)]
        f0: Option<f64>,
        #[serde(default = "default_harmonics")]
        harmonics: usize,
    },
    /// White noise restricted to a frequency band.
    Noise {
        #[serde(default = "default_noise_low")]
        low_hz: f64,
        #[serde(default = "default_noise_high")]
        high_hz: f64,
    },
    /// Exponentially decaying tone bursts at a random period per track.
    Clicks {
        #[serde(default = "default_period_min")]
        period_min: f64,
        #[serde(default = "default_period_max")]
        period_max: f64,
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_click_hz")]
        carrier_hz: f64,
    },
    /// Repeating linear frequency sweep.
    Chirp {
        #[serde(default = "default_chirp_start")]
        start_hz: f64,
        #[serde(default = "default_chirp_end")]
        end_hz: f64,
        #[serde(default = "default_sweep")]
        sweep_seconds: f64,
    },
}

fn default_harmonics() -> usize {
    3
}
fn default_noise_low() -> f64 {
    2500.0
}
fn default_noise_high() -> f64 {
    3500.0
}
fn default_period_min() -> f64 {
    0.03
}
fn default_period_max() -> f64 {
    0.06
}
fn default_decay() -> f64 {
    0.005
}
fn default_click_hz() -> f64 {
    2100.0
}
fn default_chirp_start() -> f64 {
    900.0
}
fn default_chirp_end() -> f64 {
    1800.0
}
fn default_sweep() -> f64 {
    0.5
}

/// Unknown keys are rejected by the archetype variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyInstrument {
    pub name: String,
    #[serde(flatten)]
    pub archetype: Archetype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub duration: f64,
    pub sample_rate: u32,
    /// Per-source RMS is drawn uniformly from this range.
    pub rms_range: (f64, f64),
    pub instruments: Vec<ToyInstrument>,
}

impl Default for ToySpec {
    fn default() -> Self {
        let inst = |name: &str, archetype| ToyInstrument {
            name: name.into(),
            archetype,
        };
        ToySpec {
            duration: 4.0,
            sample_rate: 32000,
            rms_range: (0.05, 0.12),
            instruments: vec![
                inst(
                    "tone",
                    Archetype::Tone {
                        f0: None,
                        harmonics: default_harmonics(),
                    },
                ),
                inst(
                    "noise",
                    Archetype::Noise {
                        low_hz: default_noise_low(),
                        high_hz: default_noise_high(),
                    },
                ),
                inst(
                    "clicks",
                    Archetype::Clicks {
                        period_min: default_period_min(),
                        period_max: default_period_max(),
                        decay: default_decay(),
                        carrier_hz: default_click_hz(),
                    },
                ),
                inst(
                    "chirp",
                    Archetype::Chirp {
                        start_hz: default_chirp_start(),
                        end_hz: default_chirp_end(),
                        sweep_seconds: default_sweep(),
                    },
                ),
            ],
        }
    }
}

impl ToySpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.instruments.iter().map(|i| i.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruments.is_empty() {
            return Err(Error::Config("toy spec lists no instruments".into()));
        }
        if !(self.duration > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("toy duration and sample rate must be positive".into()));
        }
        let (lo, hi) = self.rms_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad rms range ({lo}, {hi})")));
        }
        let mut seen = std::collections::BTreeSet::new();
        for i in &self.instruments {
            if !seen.insert(&i.name) {
                return Err(Error::Config(format!("toy instrument `{}` listed twice", i.name)));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn band_noise(n: usize, rate: f64, low: f64, high: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(gaussian(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate / n as f64;
        if f < low || f > high {
            *v = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn render(arch: &Archetype, n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use std::f64::consts::TAU;
    match *arch {
        Archetype::Tone { f0, harmonics } => {
            let f0 = f0.unwrap_or_else(|| rng.random_range(110.0..220.0));
            let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..TAU)).collect();
            (0..n)
                .map(|t| {
                    let time = t as f64 / rate;
                    (1..=harmonics)
                        .map(|k| (TAU * f0 * k as f64 * time + phases[k - 1]).sin() / k as f64)
                        .sum()
                })
                .collect()
        }
        Archetype::Noise { low_hz, high_hz } => band_noise(n, rate, low_hz, high_hz, rng),
        Archetype::Clicks {
            period_min,
            period_max,
            decay,
            carrier_hz,
        } => {
            let period = rng.random_range(period_min..=period_max);
            let start = rng.random_range(0.0..period);
            let phase = rng.random_range(0.0..TAU);
            let mut out = vec![0.0; n];
            let mut onset = start;
            while onset * rate < n as f64 {
                let first = (onset * rate).ceil() as usize;
                let stop = (first + (8.0 * decay * rate) as usize).min(n);
                for (t, o) in out.iter_mut().enumerate().take(stop).skip(first) {
                    let dt = t as f64 / rate - onset;
                    *o += (TAU * carrier_hz * dt + phase).sin() * (-dt / decay).exp();
                }
                onset += period;
            }
            out
        }
        Archetype::Chirp {
            start_hz,
            end_hz,
            sweep_seconds,
        } => {
            let offset = rng.random_range(0.0..sweep_seconds);
            let k = (end_hz - start_hz) / sweep_seconds;
            let mut phase = rng.random_range(0.0..TAU);
            (0..n)
                .map(|t| {
                    let local = (t as f64 / rate + offset) % sweep_seconds;
                    phase += TAU * (start_hz + k * local) / rate;
                    phase.sin()
                })
                .collect()
        }
    }
}

/// Deterministic toy track for `seed`; every source is scaled to an RMS
/// drawn from `spec.rms_range`.
pub fn synth_toy_track(seed: u64, spec: &ToySpec) -> Result<SourceSet> {
    spec.validate()?;
    let n = (spec.duration * spec.sample_rate as f64).round() as usize;
    let rate = spec.sample_rate as f64;
    let mut sources = BTreeMap::new();
    for (i, inst) in spec.instruments.iter().enumerate() {
        let mut rng = substream(seed, "toy", i as u64);
        let raw = render(&inst.archetype, n, rate, &mut rng);
        let w = Waveform {
            samples: raw,
            sample_rate: spec.sample_rate,
        };
        let target = rng.random_range(spec.rms_range.0..=spec.rms_range.1);
        let rms = w.rms();
        let w = if rms > 0.0 { w.scaled(target / rms) } else { w };
        sources.insert(inst.name.clone(), vec![w]);
    }
    Ok(SourceSet {
        track_id: format!("toy{seed:04}"),
        sample_rate: spec.sample_rate,
        sources,
    })
}

/// Writes `count` toy tracks as `<out>/<track>/<instrument>.wav`.
pub fn write_toy_dataset(out: &Path, count: usize, seed: u64, spec: &ToySpec) -> Result<Vec<PathBuf>> {
    if count == 0 {
        return Err(Error::Config("need at least 1 track".into()));
    }
    let mut dirs = Vec::with_capacity(count);
    for t in 0..count {
        let track = synth_toy_track(seed.wrapping_mul(1_000_003).wrapping_add(t as u64), spec)?;
        let dir = out.join(format!("track{t:03}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, chans) in &track.sources {
            save_wav(&chans[0], dir.join(format!("{name}.wav")))?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Tracks read from disk plus the directories that were passed over.
#[derive(Debug, Clone)]
pub struct IngestReport {
    pub tracks: Vec<SourceSet>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Largest accepted |mixture − Σ stems| for a supplied `mixture.wav`.
pub const MIXTURE_TOLERANCE: f64 = 1e-3;

fn load_track(dir: &Path, instruments: &[String]) -> Result<SourceSet> {
    let mut sources = BTreeMap::new();
    let mut rate = None;
    for inst in instruments {
        let path = dir.join(format!("{inst}.wav"));
        if !path.exists() {
            return Err(Error::Dataset(format!("missing {}", path.display())));
        }
        let wav = load_wav(&path)?;
        if *rate.get_or_insert(wav.sample_rate) != wav.sample_rate {
            return Err(Error::Dataset(format!("{}: sample rate differs from other stems", path.display())));
        }
        let chans = (0..wav.num_channels()).map(|c| wav.channel(c)).collect::<Result<Vec<_>>>()?;
        sources.insert(inst.clone(), chans);
    }
    let track = SourceSet {
        track_id: dir.file_name().map_or_else(|| dir.display().to_string(), |s| s.to_string_lossy().into_owned()),
        sample_rate: rate.unwrap_or(0),
        sources,
    };
    track.validate()?;
    let mix_path = dir.join("mixture.wav");
    if mix_path.exists() {
        let mix = load_wav(&mix_path)?.mono();
        let sum = track.mixture();
        if mix.sample_rate != sum.sample_rate || mix.len() != sum.len() {
            return Err(Error::Dataset(format!("{}: does not match the stems' length or rate", mix_path.display())));
        }
        let err = mix.samples.iter().zip(&sum.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if err > MIXTURE_TOLERANCE {
            return Err(Error::Dataset(format!(
                "{}: differs from the stem sum by {err:.2e}",
                mix_path.display()
            )));
        }
    }
    Ok(track)
}

/// Reads every track directory under `root`. Directories with missing or
/// inconsistent stems are skipped with a warning.
pub fn ingest_folder(root: &Path, instruments: &[String]) -> Result<IngestReport> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut tracks = Vec::new();
    let mut skipped = Vec::new();
    for dir in dirs {
        match load_track(&dir, instruments) {
            Ok(t) => tracks.push(t),
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                skipped.push((dir, e.to_string()));
            }
        }
    }
    if tracks.is_empty() {
        return Err(Error::Dataset(format!("no usable tracks under {}", root.display())));
    }
    Ok(IngestReport { tracks, skipped })
}

/// Tracks resampled once to every stage rate, for aligned multi-rate crops.
#[derive(Debug, Clone)]
pub struct Pool {
    pub instruments: Vec<String>,
    pub rates: Vec<u32>,
    /// `tracks[t][rate][instrument][channel]`.
    tracks: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    /// Usable length of each track in lowest-rate samples.
    base_lengths: Vec<usize>,
}

impl Pool {
    /// `rates` ascending, each an integer multiple of the first.
    pub fn new(tracks: &[SourceSet], instruments: &[String], rates: &[u32]) -> Result<Self> {
        if tracks.is_empty() {
            return Err(Error::Dataset("empty track pool".into()));
        }
        if rates.is_empty() || rates.iter().any(|r| r % rates[0] != 0) {
            return Err(Error::Config(format!("stage rates {rates:?} must be multiples of the first")));
        }
        let mut out = Vec::with_capacity(tracks.len());
        let mut base_lengths = Vec::with_capacity(tracks.len());
        for track in tracks {
            let mut per_rate = Vec::with_capacity(rates.len());
            let mut base_len = usize::MAX;
            for &rate in rates {
                let factor = (rate / rates[0]) as usize;
                let mut per_inst = Vec::with_capacity(instruments.len());
                for inst in instruments {
                    let chans = track
                        .sources
                        .get(inst)
                        .ok_or_else(|| Error::Dataset(format!("{}: no `{inst}` stem", track.track_id)))?;
                    let mut rs = Vec::with_capacity(chans.len());
                    for ch in chans {
                        let r = resample(ch, rate)?;
                        base_len = base_len.min(r.len() / factor);
                        rs.push(r.samples);
                    }
                    per_inst.push(rs);
                }
                per_rate.push(per_inst);
            }
            out.push(per_rate);
            base_lengths.push(base_len);
        }
        Ok(Pool {
            instruments: instruments.to_vec(),
            rates: rates.to_vec(),
            tracks: out,
            base_lengths,
        })
    }

    pub fn num_tracks(&self) -> usize {
        self.tracks.len()
    }

    fn factor(&self, j: usize) -> usize {
        (self.rates[j] / self.rates[0]) as usize
    }

    fn channels(&self, track: usize, inst: usize) -> usize {
        self.tracks[track][0][inst].len()
    }

    /// Crop length in lowest-rate samples.
    pub fn crop_len(&self, crop_seconds: f64) -> usize {
        (crop_seconds * self.rates[0] as f64).round() as usize
    }
}

/// The random draws behind one batch element.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementChoice {
    /// Per instrument: source track, lowest-rate offset, channel and gain.
    pub track: Vec<usize>,
    pub offset: Vec<usize>,
    pub channel: Vec<usize>,
    pub gain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub shuffle_probability: f64,
    pub gain_range: (f64, f64),
}

impl Augmentation {
    /// No shuffling and unit gains; crops and channels stay random.
    pub fn none() -> Self {
        Augmentation {
            shuffle_probability: 0.0,
            gain_range: (1.0, 1.0),
        }
    }
}

pub fn draw_gain(range: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

/// Random crop offset, gains, channels and (with the shuffle probability)
/// an independently chosen track per instrument.
pub fn draw_choice(pool: &Pool, crop: usize, aug: &Augmentation, rng: &mut ChaCha8Rng) -> Result<ElementChoice> {
    let n_inst = pool.instruments.len();
    let shuffle = aug.shuffle_probability > 0.0 && rng.random_bool(aug.shuffle_probability);
    let first = rng.random_range(0..pool.num_tracks());
    let mut choice = ElementChoice {
        track: Vec::with_capacity(n_inst),
        offset: Vec::with_capacity(n_inst),
        channel: Vec::with_capacity(n_inst),
        gain: Vec::with_capacity(n_inst),
    };
    let mut shared_offset = None;
    for i in 0..n_inst {
        let t = if shuffle { rng.random_range(0..pool.num_tracks()) } else { first };
        let avail = pool.base_lengths[t];
        if avail < crop {
            return Err(Error::Dataset(format!(
                "crop of {crop} samples exceeds track length {avail}"
            )));
        }
        let offset = if shuffle {
            rng.random_range(0..=avail - crop)
        } else {
            *shared_offset.get_or_insert_with(|| rng.random_range(0..=avail - crop))
        };
        choice.track.push(t);
        choice.offset.push(offset);
        choice.channel.push(rng.random_range(0..pool.channels(t, i)));
        choice.gain.push(draw_gain(aug.gain_range, rng));
    }
    Ok(choice)
}

/// Sources of one element at every rate: `[rate][instrument]`, plus mixtures.
pub fn crop_element(pool: &Pool, choice: &ElementChoice, crop: usize) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let mut sources = Vec::with_capacity(pool.rates.len());
    let mut mixtures = Vec::with_capacity(pool.rates.len());
    for j in 0..pool.rates.len() {
        let f = pool.factor(j);
        let len = crop * f;
        let mut mix = vec![0.0; len];
        let mut per_inst = Vec::with_capacity(pool.instruments.len());
        for i in 0..pool.instruments.len() {
            let ch = &pool.tracks[choice.track[i]][j][i][choice.channel[i]];
            let start = choice.offset[i] * f;
            let s: Vec<f64> = ch[start..start + len].iter().map(|v| v * choice.gain[i]).collect();
            for (m, v) in mix.iter_mut().zip(&s) {
                *m += v;
            }
            per_inst.push(s);
        }
        sources.push(per_inst);
        mixtures.push(mix);
    }
    (sources, mixtures)
}

/// Stacks elements into per-stage batches.
pub fn assemble(pool: &Pool, choices: &[ElementChoice], crop: usize) -> Result<Vec<StageBatch>> {
    let b = choices.len();
    let elems: Vec<_> = choices.iter().map(|c| crop_element(pool, c, crop)).collect();
    (0..pool.rates.len())
        .map(|j| {
            let len = crop * pool.factor(j);
            let mixture = Tensor::from_vec(&[b, 1, len], elems.iter().flat_map(|(_, m)| m[j].clone()).collect())?;
            let sources = (0..pool.instruments.len())
                .map(|i| Tensor::from_vec(&[b, 1, len], elems.iter().flat_map(|(s, _)| s[j][i].clone()).collect()))
                .collect::<Result<_>>()?;
            Ok(StageBatch { mixture, sources })
        })
        .collect()
}

/// A full augmented training batch from `rng`.
pub fn sample_batch(
    pool: &Pool,
    batch_size: usize,
    crop: usize,
    aug: &Augmentation,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StageBatch>> {
    let choices = (0..batch_size)
        .map(|_| draw_choice(pool, crop, aug, rng))
        .collect::<Result<Vec<_>>>()?;
    assemble(pool, &choices, crop)
}
