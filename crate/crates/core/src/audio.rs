//! Waveforms, PCM WAV I/O, band-limited resampling and STFT features.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sample rates the separation pipeline accepts.
pub const PIPELINE_RATES: [u32; 4] = [8000, 16000, 32000, 44100];

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Waveform {
        Waveform {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Contents of a WAV file with every channel kept separately.
#[derive(Debug, Clone)]
pub struct WavData {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

impl WavData {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, index: usize) -> Result<Waveform> {
        let samples = self.channels.get(index).ok_or_else(|| {
            Error::Invalid(format!(
                "channel {index} requested from a {}-channel file",
                self.channels.len()
            ))
        })?;
        Ok(Waveform {
            samples: samples.clone(),
            sample_rate: self.sample_rate,
        })
    }

    /// Average of all channels.
    pub fn mono(&self) -> Waveform {
        let n = self.channels.first().map_or(0, Vec::len);
        let scale = 1.0 / self.channels.len().max(1) as f64;
        let samples = (0..n)
            .map(|i| self.channels.iter().map(|c| c[i]).sum::<f64>() * scale)
            .collect();
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<WavData> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::io(path, e))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::io(
            path,
            format!("unsupported channel count {}", spec.channels),
        ));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let full = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::io(path, e))?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::io(path, e))?,
    };
    let nch = spec.channels as usize;
    let mut channels = vec![Vec::with_capacity(interleaved.len() / nch); nch];
    for (i, v) in interleaved.into_iter().enumerate() {
        channels[i % nch].push(v);
    }
    Ok(WavData {
        sample_rate: spec.sample_rate,
        channels,
    })
}

/// Writes 16-bit PCM. Samples are clipped to [-1, 1].
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    save_wav_channels(&[&w.samples], w.sample_rate, path)
}

pub fn save_wav_channels(
    channels: &[&[f64]],
    sample_rate: u32,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::io(path, e))?;
    let n = channels.first().map_or(0, |c| c.len());
    for i in 0..n {
        for ch in channels {
            writer
                .write_sample(quantize_i16(ch[i]))
                .map_err(|e| Error::io(path, e))?;
        }
    }
    writer.finalize().map_err(|e| Error::io(path, e))
}

fn quantize_i16(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32768.0)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

const KAISER_BETA: f64 = 8.0;
/// Zero crossings of the interpolation kernel on each side, at the lower rate.
const SINC_ZEROS: f64 = 16.0;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Kaiser-windowed sinc polyphase resampler.
///
/// Output length is `round(len * target / source)`. Equal rates return the
/// input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Invalid("target rate must be positive".into()));
    }
    if target_rate == w.sample_rate {
        return Ok(w.clone());
    }
    let src = w.sample_rate as u64;
    let tgt = target_rate as u64;
    let g = gcd(src, tgt);
    let up = tgt / g;
    let down = src / g;
    let out_len = ((w.len() as u64 * tgt) as f64 / src as f64).round() as usize;

    let cutoff = (tgt as f64 / src as f64).min(1.0);
    let half = SINC_ZEROS / cutoff;
    let reach = half.ceil() as isize;
    let taps = (2 * reach) as usize;
    let i0_beta = bessel_i0(KAISER_BETA);
    // table[phase][m] weights input index q - reach + 1 + m.
    let table: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            (0..taps)
                .map(|m| {
                    let d = frac + (reach - 1 - m as isize) as f64;
                    if d.abs() >= half {
                        return 0.0;
                    }
                    let u = d / half;
                    let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta;
                    let arg = cutoff * d;
                    let sinc = if arg == 0.0 {
                        1.0
                    } else {
                        (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
                    };
                    cutoff * sinc * window
                })
                .collect()
        })
        .collect();

    let x = &w.samples;
    let len = x.len() as isize;
    let samples = (0..out_len as u64)
        .map(|n| {
            let pos = n * down;
            let q = (pos / up) as isize;
            let phase = (pos % up) as usize;
            let row = &table[phase];
            let first = q - reach + 1;
            let mut acc = 0.0;
            for (m, h) in row.iter().enumerate() {
                let k = first + m as isize;
                if k >= 0 && k < len {
                    acc += h * x[k as usize];
                }
            }
            acc
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: target_rate,
    })
}

/// Magnitude STFT, stored bin-major: `magnitudes[bin * frames + frame]`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub magnitudes: Vec<f64>,
    pub freq_bins: usize,
    pub frames: usize,
    pub frame_hop: usize,
    pub window_len: usize,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.magnitudes[bin * self.frames + frame]
    }

    /// `log(1 + |X|)` standardized to zero mean and unit variance over the
    /// whole spectrogram, as a (bins, frames) tensor. A constant spectrogram
    /// maps to zeros.
    pub fn normalized_log(&self) -> Tensor {
        let logs: Vec<f64> = self.magnitudes.iter().map(|m| m.ln_1p()).collect();
        let n = logs.len().max(1) as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let inv = if std > 1e-12 { 1.0 / std } else { 0.0 };
        let data = logs.iter().map(|v| (v - mean) * inv).collect();
        Tensor::from_vec(&[self.freq_bins, self.frames], data).expect("consistent dims")
    }
}

pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Hann-windowed magnitude STFT on the encoder's frame grid.
///
/// There are `ceil(len / hop)` frames. The signal is conceptually padded
/// symmetrically to `frames * hop` samples, and frame `t` is centred on the
/// middle of hop interval `t` of the padded signal.
pub fn stft(w: &Waveform, window_len: usize, frame_hop: usize) -> Result<Spectrogram> {
    if !window_len.is_power_of_two() {
        return Err(Error::Invalid(format!(
            "window length {window_len} is not a power of two"
        )));
    }
    if frame_hop == 0 || window_len % frame_hop != 0 {
        return Err(Error::Invalid(format!(
            "hop {frame_hop} does not divide window {window_len}"
        )));
    }
    if w.len() < window_len {
        return Err(Error::Invalid(format!(
            "waveform of {} samples is shorter than one {window_len}-sample window",
            w.len()
        )));
    }
    let frames = w.len().div_ceil(frame_hop);
    let pad_left = (frames * frame_hop - w.len()) / 2;
    let bins = window_len / 2 + 1;
    let window = hann(window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    let mut magnitudes = vec![0.0; bins * frames];
    for t in 0..frames {
        let start = (t * frame_hop + frame_hop / 2) as isize
            - (window_len / 2) as isize
            - pad_left as isize;
        for (n, slot) in buf.iter_mut().enumerate() {
            let idx = start + n as isize;
            let x = if idx >= 0 && (idx as usize) < w.len() {
                w.samples[idx as usize]
            } else {
                0.0
            };
            *slot = Complex::new(x * window[n], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            magnitudes[b * frames + t] = buf[b].norm();
        }
    }
    Ok(Spectrogram {
        magnitudes,
        freq_bins: bins,
        frames,
        frame_hop,
        window_len,
    })
}

/// Normalized log-magnitude features, (bins, frames).
pub fn stft_features(w: &Waveform, window_len: usize, frame_hop: usize) -> Result<Tensor> {
    Ok(stft(w, window_len, frame_hop)?.normalized_log())
}
