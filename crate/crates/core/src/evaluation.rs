//! Scale fitting, overlap-add inference over long signals, SI-SNR reports
//! and file-level separation.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::audio::{load_wav, resample, save_wav, Waveform};
use crate::dataset::SourceSet;
use crate::error::{Error, Result};
use crate::losses::si_snr;
use crate::model::Model;

/// Diagonal load used only when the Gram matrix is singular.
pub const RIDGE: f64 = 1e-8;

/// Least-squares gains `α = argmin ‖s − Σ α_i ŝ_i‖²` from the normal
/// equations `G α = c`.
pub fn fit_scale(mixture: &Waveform, estimates: &[Waveform]) -> Result<Vec<f64>> {
    for e in estimates {
        if e.len() != mixture.len() || e.sample_rate != mixture.sample_rate {
            return Err(Error::Shape(format!(
                "estimate has {} samples at {} Hz, mixture {} at {} Hz",
                e.len(),
                e.sample_rate,
                mixture.len(),
                mixture.sample_rate
            )));
        }
    }
    let n = estimates.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let g = DMatrix::from_fn(n, n, |i, j| dot(&estimates[i].samples, &estimates[j].samples));
    let c = DVector::from_fn(n, |i, _| dot(&estimates[i].samples, &mixture.samples));
    if g.iter().all(|&v| v == 0.0) {
        log::warn!("all estimates are silent; using zero gains");
        return Ok(vec![0.0; n]);
    }
    if let Some(ch) = g.clone().cholesky() {
        let a = ch.solve(&c);
        if a.iter().all(|v| v.is_finite()) {
            return Ok(a.iter().copied().collect());
        }
    }
    log::warn!("estimate Gram matrix is singular; adding a {RIDGE:e} ridge");
    let ridged = g + DMatrix::identity(n, n) * RIDGE;
    ridged
        .cholesky()
        .map(|ch| ch.solve(&c).iter().copied().collect())
        .ok_or_else(|| Error::Invalid("scale fitting failed".into()))
}

pub fn apply_scale(estimates: &[Waveform], alpha: &[f64]) -> Vec<Waveform> {
    estimates.iter().zip(alpha).map(|(e, &a)| e.scaled(a)).collect()
}

/// Segment length in samples at `rate`: even, and a multiple of `unit`.
pub fn segment_samples(seconds: f64, rate: u32, unit: usize) -> usize {
    let step = 2 * unit.max(1);
    (((seconds * rate as f64) / step as f64).round() as usize).max(1) * step
}

/// Runs `separate` over 50%-overlapping segments of `len` samples and
/// cross-fades with triangular windows that sum to one.
pub fn overlap_add(
    mixture: &Waveform,
    len: usize,
    mut separate: impl FnMut(&Waveform) -> Result<Vec<Waveform>>,
) -> Result<Vec<Waveform>> {
    if len < 2 || len % 2 != 0 {
        return Err(Error::Invalid(format!("segment length {len} must be even and at least 2")));
    }
    let hop = len / 2;
    let t = mixture.len();
    let count = t.div_ceil(hop) + 1;
    let padded_len = (count - 1) * hop + len;
    let mut padded = vec![0.0; padded_len];
    padded[hop..hop + t].copy_from_slice(&mixture.samples);
    let window: Vec<f64> = (0..len)
        .map(|n| {
            let x = n as f64 / hop as f64;
            if n < hop {
                x
            } else {
                2.0 - x
            }
        })
        .collect();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for k in 0..count {
        let seg = Waveform {
            samples: padded[k * hop..k * hop + len].to_vec(),
            sample_rate: mixture.sample_rate,
        };
        let parts = separate(&seg)?;
        if out.is_empty() {
            out = vec![vec![0.0; padded_len]; parts.len()];
        }
        for (acc, p) in out.iter_mut().zip(&parts) {
            if p.len() != len {
                return Err(Error::Shape(format!("separator returned {} samples for {len}", p.len())));
            }
            for (n, (&v, &w)) in p.samples.iter().zip(&window).enumerate() {
                acc[k * hop + n] += v * w;
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|v| Waveform {
            samples: v[hop..hop + t].to_vec(),
            sample_rate: mixture.sample_rate,
        })
        .collect())
}

/// Top-stage estimates for a mixture at the model's top rate.
pub fn separate_long(model: &Model, mixture: &Waveform, segment_seconds: f64) -> Result<Vec<Waveform>> {
    let unit = (model.config.top_rate() / model.config.base_rate) as usize;
    let len = segment_samples(segment_seconds, mixture.sample_rate, unit);
    overlap_add(mixture, len, |seg| Ok(model.separate(seg)?.last().waveforms.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstrumentScores {
    pub instrument: String,
    /// Per track; `None` where the reference is silent.
    pub values: Vec<Option<f64>>,
    pub median: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub config_fingerprint: String,
    pub tracks: Vec<String>,
    pub instruments: Vec<InstrumentScores>,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl InstrumentScores {
    pub fn new(instrument: &str, values: Vec<Option<f64>>) -> Self {
        let mut present: Vec<f64> = values.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        InstrumentScores {
            instrument: instrument.to_string(),
            median: median(&mut present),
            mean: if present.is_empty() { f64::NAN } else { mean },
            values,
        }
    }
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = format!("dataset: {}\nconfig: {}\n", self.dataset, self.config_fingerprint);
        s += &format!("{:<12} {:>9} {:>9}\n", "instrument", "median", "mean");
        for i in &self.instruments {
            s += &format!("{:<12} {:>9.3} {:>9.3}\n", i.instrument, i.median, i.mean);
        }
        s
    }

    /// One JSON record per track and instrument.
    pub fn json_lines(&self) -> String {
        let mut out = String::new();
        for inst in &self.instruments {
            for (t, v) in self.tracks.iter().zip(&inst.values) {
                let rec = serde_json::json!({"track": t, "instrument": inst.instrument, "si_snr": v});
                out += &rec.to_string();
                out.push('\n');
            }
        }
        out
    }
}

/// Mono mix of a source's channels.
fn mono(chans: &[Waveform]) -> Waveform {
    let k = chans.len() as f64;
    let mut out = vec![0.0; chans[0].len()];
    for c in chans {
        for (o, v) in out.iter_mut().zip(&c.samples) {
            *o += v / k;
        }
    }
    Waveform {
        samples: out,
        sample_rate: chans[0].sample_rate,
    }
}

/// Scores any separator. `separate(track, mixture)` receives the mixture at
/// `rate` and returns one estimate per instrument at `rate`.
pub fn evaluate_with(
    tracks: &[SourceSet],
    instruments: &[String],
    rate: u32,
    dataset: &str,
    fingerprint: &str,
    mut separate: impl FnMut(usize, &Waveform) -> Result<Vec<Waveform>>,
) -> Result<EvalReport> {
    let mut values = vec![Vec::with_capacity(tracks.len()); instruments.len()];
    for (k, track) in tracks.iter().enumerate() {
        let refs = instruments
            .iter()
            .map(|i| {
                let chans = track.sources.get(i).ok_or_else(|| {
                    Error::Dataset(format!("track {} has no `{i}` stem; vocabularies differ", track.track_id))
                })?;
                resample(&mono(chans), rate)
            })
            .collect::<Result<Vec<_>>>()?;
        let mixture = resample(&track.mixture(), rate)?;
        let est = separate(k, &mixture)?;
        let alpha = fit_scale(&mixture, &est)?;
        for (i, (e, r)) in apply_scale(&est, &alpha).iter().zip(&refs).enumerate() {
            values[i].push(si_snr(e, r).ok());
        }
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        config_fingerprint: fingerprint.to_string(),
        tracks: tracks.iter().map(|t| t.track_id.clone()).collect(),
        instruments: instruments
            .iter()
            .zip(values)
            .map(|(i, v)| InstrumentScores::new(i, v))
            .collect(),
    })
}

/// Short stable identifier of a model configuration.
pub fn fingerprint(model: &Model) -> String {
    let json = serde_json::to_string(&model.config).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{}-{h:016x}", model.config.sharing.as_str())
}

pub fn evaluate(model: &Model, tracks: &[SourceSet], dataset: &str, segment_seconds: f64) -> Result<EvalReport> {
    evaluate_with(
        tracks,
        model.instruments(),
        model.config.top_rate(),
        dataset,
        &fingerprint(model),
        |_, mix| separate_long(model, mix, segment_seconds),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputRate {
    /// The model's top stage rate.
    Native,
    /// The input file's rate.
    Input,
}

/// Separates a WAV file into `<out_dir>/<instrument>.wav`.
pub fn separate_file(
    model: &Model,
    input: &Path,
    out_dir: &Path,
    rate: OutputRate,
    segment_seconds: f64,
) -> Result<Vec<PathBuf>> {
    let wav = load_wav(input)?;
    let mix = wav.mono();
    let top = resample(&mix, model.config.top_rate())?;
    let est = separate_long(model, &top, segment_seconds)?;
    let alpha = fit_scale(&top, &est)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for (name, e) in model.instruments().iter().zip(apply_scale(&est, &alpha)) {
        let out = match rate {
            OutputRate::Native => e,
            OutputRate::Input => resample(&e, wav.sample_rate)?,
        };
        let path = out_dir.join(format!("{name}.wav"));
        save_wav(&out, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderBase, ModelConfig, SharingMode, TcnBase};
    use crate::dataset::{synth_toy_track, ToySpec};
    use crate::rng::substream;
    use rand::Rng;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    fn rand_wave(n: usize, seed: u64) -> Waveform {
        let mut rng = substream(seed, "eval", 0);
        wave((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn half_scale_estimate_gets_gain_two() {
        let s = rand_wave(300, 1);
        let a = fit_scale(&s, &[s.scaled(0.5)]).unwrap();
        assert!((a[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn true_sources_get_unit_gains() {
        let parts: Vec<Waveform> = (0..3).map(|k| rand_wave(200, 10 + k)).collect();
        let mix = wave((0..200).map(|t| parts.iter().map(|p| p.samples[t]).sum()).collect());
        let a = fit_scale(&mix, &parts).unwrap();
        assert!(a.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn orthogonal_pair_matches_hand_solution() {
        let x = wave((0..64).map(|t| (t as f64 * 0.3).sin()).collect());
        let mut y = rand_wave(64, 3);
        let proj = y.samples.iter().zip(&x.samples).map(|(a, b)| a * b).sum::<f64>() / x.samples.iter().map(|v| v * v).sum::<f64>();
        for (yy, xx) in y.samples.iter_mut().zip(&x.samples) {
            *yy -= proj * xx;
        }
        let s = rand_wave(64, 4);
        let a = fit_scale(&s, &[x.clone(), y.clone()]).unwrap();
        let dot = |p: &Waveform, q: &Waveform| p.samples.iter().zip(&q.samples).map(|(a, b)| a * b).sum::<f64>();
        let (g11, g12, g22) = (dot(&x, &x), dot(&x, &y), dot(&y, &y));
        let (c1, c2) = (dot(&x, &s), dot(&y, &s));
        let det = g11 * g22 - g12 * g12;
        assert!((a[0] - (c1 * g22 - g12 * c2) / det).abs() < 1e-10);
        assert!((a[1] - (g11 * c2 - g12 * c1) / det).abs() < 1e-10);
    }

    #[test]
    fn degenerate_inputs() {
        let s = rand_wave(50, 5);
        assert_eq!(fit_scale(&s, &[wave(vec![0.0; 50]), wave(vec![0.0; 50])]).unwrap(), vec![0.0, 0.0]);
        let e = rand_wave(50, 6);
        let a = fit_scale(&s, &[e.clone(), e.clone()]).unwrap();
        let single = fit_scale(&s, std::slice::from_ref(&e)).unwrap()[0];
        assert!((a[0] + a[1] - single).abs() < 1e-6);
        assert!(fit_scale(&s, &[rand_wave(49, 7)]).is_err());
    }

    #[test]
    fn windows_sum_to_one() {
        let x = rand_wave(1001, 8);
        let out = overlap_add(&x, 64, |seg| Ok(vec![seg.clone(), seg.scaled(2.0)])).unwrap();
        for (a, b) in out[0].samples.iter().zip(&x.samples) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out[1].len(), 1001);
        assert!(overlap_add(&x, 63, |s| Ok(vec![s.clone()])).is_err());
    }

    fn vanilla_model() -> Model {
        let mut cfg = ModelConfig {
            instruments: vec!["a".into(), "b".into()],
            encoder: EncoderBase {
                stride: 4,
                kernel: 16,
                latent_dim: 8,
                heads: 2,
                stft_window: 16,
            },
            tcn: TcnBase {
                blocks: 1,
                layers_per_block: 2,
                hidden: 8,
                bottleneck: 4,
                kernel: 3,
            },
            embedding_dim: 6,
            generator_dim: 2,
            sharing: SharingMode::Baseline,
            ..ModelConfig::default()
        };
        cfg.ablation.stronger_encoder = false;
        cfg.ablation.multi_stage = false;
        Model::new(cfg).unwrap()
    }

    #[test]
    fn overlap_add_with_identity_mask_matches_whole_signal_interior() {
        use crate::encoder::{decode_latent, encode_waveform};
        let model = vanilla_model();
        let s = &model.stages[0];
        let codec = |w: &Waveform| {
            let h = encode_waveform(&model.params, "s0.enc", &s.encoder, w).unwrap();
            decode_latent(&model.params, "s0.dec", &s.encoder, &h, w.len()).unwrap()
        };
        let x = Waveform::new(rand_wave(4096, 9).samples, 32000).unwrap();
        let whole = codec(&x);
        let len = 512;
        let out = overlap_add(&x, len, |seg| Ok(vec![codec(seg)])).unwrap();
        // Samples whose two covering segments both see full conv context.
        let reach = 96;
        let mut checked = 0;
        for t in len..x.len() - len {
            let n = t % (len / 2);
            if (reach..len / 2 - reach).contains(&n) {
                assert!((out[0].samples[t] - whole.samples[t]).abs() < 1e-9, "{t}");
                checked += 1;
            }
        }
        assert!(checked > 200);
    }

    fn toy_tracks(n: u64) -> (Vec<SourceSet>, Vec<String>) {
        let spec = ToySpec {
            duration: 0.5,
            ..ToySpec::default()
        };
        ((0..n).map(|s| synth_toy_track(s, &spec).unwrap()).collect(), spec.names())
    }

    #[test]
    fn oracle_and_mixture_separators() {
        let (tracks, names) = toy_tracks(5);
        let oracle = evaluate_with(&tracks, &names, 32000, "toy", "oracle", |k, _| {
            names.iter().map(|n| Ok(tracks[k].sources[n][0].clone())).collect()
        })
        .unwrap();
        assert_eq!(oracle.tracks.len(), 5);
        for i in &oracle.instruments {
            assert_eq!(i.values.len(), 5);
            assert!(i.values.iter().all(|v| v.unwrap() > 70.0), "{:?}", i.values);
        }
        let mixture = evaluate_with(&tracks, &names, 32000, "toy", "mix", |_, m| Ok(vec![m.clone(); 4])).unwrap();
        for i in &mixture.instruments {
            assert!(i.mean < 0.0 && i.median < 0.0, "{}: {}", i.instrument, i.mean);
        }
        let mut v: Vec<f64> = mixture.instruments[0].values.iter().flatten().copied().collect();
        assert_eq!(mixture.instruments[0].median, median(&mut v));
        assert_eq!(mixture.json_lines().lines().count(), 20);
        let wrong = vec!["kazoo".to_string()];
        assert!(evaluate_with(&tracks, &wrong, 32000, "toy", "x", |_, m| Ok(vec![m.clone()])).is_err());
    }

    #[test]
    fn model_evaluation_and_file_separation() {
        let model = vanilla_model();
        let spec = ToySpec {
            duration: 0.3,
            instruments: ToySpec::default().instruments[..2]
                .iter()
                .cloned()
                .enumerate()
                .map(|(k, mut i)| {
                    i.name = ["a", "b"][k].into();
                    i
                })
                .collect(),
            ..ToySpec::default()
        };
        let tracks: Vec<_> = (0..2).map(|s| synth_toy_track(s, &spec).unwrap()).collect();
        let r = evaluate(&model, &tracks, "toy", 0.05).unwrap();
        assert_eq!(r.instruments.len(), 2);
        assert!(r.render().contains("median"));

        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("mix.wav");
        let mix = resample(&tracks[0].mixture(), 44100).unwrap();
        save_wav(&mix, &input).unwrap();
        let out = separate_file(&model, &input, &dir.path().join("out"), OutputRate::Input, 0.05).unwrap();
        assert_eq!(out.len(), 2);
        let back = load_wav(&out[0]).unwrap();
        assert_eq!(back.sample_rate, 44100);
        assert!((back.mono().len() as i64 - mix.len() as i64).abs() <= 2);
        let native = separate_file(&model, &input, &dir.path().join("n"), OutputRate::Native, 0.05).unwrap();
        assert_eq!(load_wav(&native[1]).unwrap().sample_rate, 32000);
    }
}
