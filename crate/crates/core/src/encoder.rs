//! Per-stage waveform encoder and matching decoder.
//!
//! The stronger encoder runs `K` strided convolution heads of decreasing kernel
//! width next to a linearly projected, normalized STFT magnitude branch; the
//! concatenation passes through Conv-ReLU-Conv into the `D × T′` latent. The
//! decoder mirrors it: Conv-ReLU, a split across `K` transposed convolutions
//! with the encoder's kernel widths, and a sum.
//!
//! All heads and the STFT share one frame grid: the input is padded
//! symmetrically to `T′·s` samples with `T′ = ceil(T / s)` and frame `t` is
//! centred on the middle of the `t`-th stride interval.

use rand_chacha::ChaCha8Rng;

use crate::audio::{stft, Waveform};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Var};
use crate::params::{init_layer, ParamStore, Scope};
use crate::tensor::Tensor;

/// Encoder output for a single segment.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    /// (D, T′)
    pub values: Tensor,
    pub stage_rate: u32,
}

/// Kernel width of head `k = 1..=K`: `W / 2^k`.
pub fn head_kernels(cfg: &EncoderConfig) -> Vec<usize> {
    (1..=cfg.num_heads)
        .map(|k| cfg.base_kernel >> k)
        .collect()
}

/// Output width of head `k = 1..=K`: `2^k · D / 2^K`.
pub fn head_widths(cfg: &EncoderConfig) -> Vec<usize> {
    (1..=cfg.num_heads)
        .map(|k| (cfg.latent_dim << k) >> cfg.num_heads)
        .collect()
}

pub fn stft_width(cfg: &EncoderConfig) -> usize {
    cfg.latent_dim / 4
}

pub fn stft_bins(cfg: &EncoderConfig) -> usize {
    cfg.stft_window / 2 + 1
}

pub fn frames(cfg: &EncoderConfig, len: usize) -> usize {
    len.div_ceil(cfg.stride)
}

fn frame_pad(cfg: &EncoderConfig, len: usize) -> usize {
    (frames(cfg, len) * cfg.stride - len) / 2
}

/// Geometry of a strided head with `kernel` taps on the shared frame grid.
/// For the decoder, `out_len` is replaced by the waveform length.
fn head_geom(cfg: &EncoderConfig, len: usize, kernel: usize) -> ConvGeom {
    ConvGeom {
        stride: cfg.stride,
        dilation: 1,
        pad_left: (frame_pad(cfg, len) + kernel / 2) as isize - (cfg.stride / 2) as isize,
        out_len: frames(cfg, len),
    }
}

pub fn validate(cfg: &EncoderConfig) -> Result<()> {
    let div = 1usize << cfg.num_heads;
    if cfg.stride == 0 || cfg.num_heads == 0 {
        return Err(Error::Config("stride and head count must be positive".into()));
    }
    if cfg.base_kernel % div != 0 || cfg.latent_dim % div != 0 || cfg.latent_dim % 4 != 0 {
        return Err(Error::Config(format!(
            "kernel {} and latent width {} must be divisible by 2^K = {div} (and width by 4)",
            cfg.base_kernel, cfg.latent_dim
        )));
    }
    Ok(())
}

pub fn init_encoder(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.latent_dim;
    if !cfg.stronger {
        init_layer(store, &format!("{prefix}.conv"), &[d, 1, cfg.base_kernel], d, cfg.base_kernel, rng);
        return;
    }
    let widths = head_widths(cfg);
    for (k, (&w, &kern)) in widths.iter().zip(&head_kernels(cfg)).enumerate() {
        init_layer(store, &format!("{prefix}.head{k}"), &[w, 1, kern], w, kern, rng);
    }
    let bins = stft_bins(cfg);
    let sw = stft_width(cfg);
    init_layer(store, &format!("{prefix}.stft"), &[sw, bins, 1], sw, bins, rng);
    let merged = widths.iter().sum::<usize>() + sw;
    init_layer(store, &format!("{prefix}.merge1"), &[d, merged, 1], d, merged, rng);
    init_layer(store, &format!("{prefix}.merge2"), &[d, d, 1], d, d, rng);
}

pub fn init_decoder(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.latent_dim;
    if !cfg.stronger {
        let fan = d * cfg.base_kernel.div_ceil(cfg.stride);
        init_layer(store, &format!("{prefix}.conv"), &[d, 1, cfg.base_kernel], 1, fan, rng);
        return;
    }
    let widths = head_widths(cfg);
    let total: usize = widths.iter().sum();
    init_layer(store, &format!("{prefix}.pre"), &[total, d, 1], total, d, rng);
    for (k, (&w, &kern)) in widths.iter().zip(&head_kernels(cfg)).enumerate() {
        let fan = w * kern.div_ceil(cfg.stride);
        init_layer(store, &format!("{prefix}.head{k}"), &[w, 1, kern], 1, fan, rng);
    }
}

fn batch_input(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [b, 1, t] => Ok((*b, *t)),
        [b, t] => Ok((*b, *t)),
        s => Err(Error::Shape(format!(
            "encoder input must be (B, 1, T) or (B, T), got {s:?}"
        ))),
    }
}

/// Encodes a batch of waveform segments `x` (B, 1, T) into (B, D, T′).
pub fn encode(sc: &mut Scope, prefix: &str, cfg: &EncoderConfig, x: &Tensor) -> Result<Var> {
    let (batch, len) = batch_input(x)?;
    let input = sc.constant(x.clone().reshaped(&[batch, 1, len])?);
    if !cfg.stronger {
        let w = sc.param(&format!("{prefix}.conv.w"))?;
        let b = sc.param(&format!("{prefix}.conv.b"))?;
        check_weight(sc, w, &[cfg.latent_dim, 1, cfg.base_kernel], prefix)?;
        let h = sc.g.conv1d(input, w, Some(b), head_geom(cfg, len, cfg.base_kernel))?;
        return Ok(sc.g.relu(h));
    }

    let mut branches = Vec::with_capacity(cfg.num_heads + 1);
    for (k, (&width, &kern)) in head_widths(cfg).iter().zip(&head_kernels(cfg)).enumerate() {
        let w = sc.param(&format!("{prefix}.head{k}.w"))?;
        let b = sc.param(&format!("{prefix}.head{k}.b"))?;
        check_weight(sc, w, &[width, 1, kern], prefix)?;
        let y = sc.g.conv1d(input, w, Some(b), head_geom(cfg, len, kern))?;
        branches.push(sc.g.relu(y));
    }

    let t_frames = frames(cfg, len);
    let bins = stft_bins(cfg);
    let mut feats = Vec::with_capacity(batch * bins * t_frames);
    for row in x.data().chunks(len) {
        let w = Waveform {
            samples: row.to_vec(),
            sample_rate: cfg.stage_rate,
        };
        let spec = stft(&w, cfg.stft_window, cfg.stride)?;
        debug_assert_eq!(spec.frames, t_frames);
        feats.extend_from_slice(spec.normalized_log().data());
    }
    let feats = sc.constant(Tensor::from_vec(&[batch, bins, t_frames], feats)?);
    let pw = sc.param(&format!("{prefix}.stft.w"))?;
    let pb = sc.param(&format!("{prefix}.stft.b"))?;
    check_weight(sc, pw, &[stft_width(cfg), bins, 1], prefix)?;
    branches.push(sc.g.conv1d(feats, pw, Some(pb), ConvGeom::pointwise(t_frames))?);

    let merged = sc.g.concat_channels(&branches)?;
    let w1 = sc.param(&format!("{prefix}.merge1.w"))?;
    let b1 = sc.param(&format!("{prefix}.merge1.b"))?;
    let y = sc.g.conv1d(merged, w1, Some(b1), ConvGeom::pointwise(t_frames))?;
    let y = sc.g.relu(y);
    let w2 = sc.param(&format!("{prefix}.merge2.w"))?;
    let b2 = sc.param(&format!("{prefix}.merge2.b"))?;
    sc.g.conv1d(y, w2, Some(b2), ConvGeom::pointwise(t_frames))
}

/// Decodes (B, D, T′) latents into (B, 1, `out_len`) waveforms.
pub fn decode(
    sc: &mut Scope,
    prefix: &str,
    cfg: &EncoderConfig,
    h: Var,
    out_len: usize,
) -> Result<Var> {
    let (_, d, t_frames) = sc.g.value(h).dims3();
    if d != cfg.latent_dim || t_frames != frames(cfg, out_len) {
        return Err(Error::Shape(format!(
            "decoder expects ({}, {}) latents for {out_len} samples, got ({d}, {t_frames})",
            cfg.latent_dim,
            frames(cfg, out_len)
        )));
    }
    let transposed = |kern: usize| ConvGeom {
        out_len,
        ..head_geom(cfg, out_len, kern)
    };
    if !cfg.stronger {
        let w = sc.param(&format!("{prefix}.conv.w"))?;
        let b = sc.param(&format!("{prefix}.conv.b"))?;
        check_weight(sc, w, &[d, 1, cfg.base_kernel], prefix)?;
        return sc.g.conv_transpose1d(h, w, Some(b), transposed(cfg.base_kernel));
    }
    let pw = sc.param(&format!("{prefix}.pre.w"))?;
    let pb = sc.param(&format!("{prefix}.pre.b"))?;
    let y = sc.g.conv1d(h, pw, Some(pb), ConvGeom::pointwise(t_frames))?;
    let y = sc.g.relu(y);
    let mut outs = Vec::with_capacity(cfg.num_heads);
    let mut start = 0;
    for (k, (&width, &kern)) in head_widths(cfg).iter().zip(&head_kernels(cfg)).enumerate() {
        let part = sc.g.slice_channels(y, start, width)?;
        start += width;
        let w = sc.param(&format!("{prefix}.head{k}.w"))?;
        let b = sc.param(&format!("{prefix}.head{k}.b"))?;
        check_weight(sc, w, &[width, 1, kern], prefix)?;
        outs.push(sc.g.conv_transpose1d(part, w, Some(b), transposed(kern))?);
    }
    sc.g.add_n(&outs)
}

/// `decode(encode(x))` without masking.
pub fn reconstruct(
    sc: &mut Scope,
    enc_prefix: &str,
    dec_prefix: &str,
    cfg: &EncoderConfig,
    x: &Tensor,
) -> Result<Var> {
    let (_, len) = batch_input(x)?;
    let h = encode(sc, enc_prefix, cfg, x)?;
    decode(sc, dec_prefix, cfg, h, len)
}

fn check_weight(sc: &Scope, w: Var, expected: &[usize], prefix: &str) -> Result<()> {
    if sc.g.shape(w) != expected {
        return Err(Error::Shape(format!(
            "{prefix}: weight {:?} does not match configuration {:?}",
            sc.g.shape(w),
            expected
        )));
    }
    Ok(())
}

/// Single-segment convenience wrapper around [`encode`].
pub fn encode_waveform(
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    w: &Waveform,
) -> Result<LatentTensor> {
    let mut sc = Scope::new(store);
    let x = Tensor::from_vec(&[1, 1, w.len()], w.samples.clone())?;
    let h = encode(&mut sc, prefix, cfg, &x)?;
    let (_, d, t) = sc.g.value(h).dims3();
    Ok(LatentTensor {
        values: sc.g.value(h).clone().reshaped(&[d, t])?,
        stage_rate: cfg.stage_rate,
    })
}

/// Single-segment convenience wrapper around [`decode`].
pub fn decode_latent(
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    h: &LatentTensor,
    out_len: usize,
) -> Result<Waveform> {
    let mut sc = Scope::new(store);
    let (d, t) = match h.values.shape() {
        [d, t] => (*d, *t),
        s => return Err(Error::Shape(format!("latent must be (D, T′), got {s:?}"))),
    };
    let hv = sc.constant(h.values.clone().reshaped(&[1, d, t])?);
    let y = decode(&mut sc, prefix, cfg, hv, out_len)?;
    Ok(Waveform {
        samples: sc.g.value(y).data().to_vec(),
        sample_rate: cfg.stage_rate,
    })
}
