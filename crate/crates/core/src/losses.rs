//! SI-SNR and the auxiliary latent losses, as plain functions and as graph
//! nodes with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::config::LossWeights;
use crate::encoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Model, StageVars};
use crate::params::Scope;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-8;
/// Reference energy (after mean removal) below which a target counts as silent.
pub const SILENCE_ENERGY: f64 = 1e-10;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// SI-SNR in dB and its gradient with respect to `est`, or `None` for a
/// silent reference.
pub fn si_snr_grad(est: &[f64], reference: &[f64]) -> Option<(f64, Vec<f64>)> {
    let e = centered(est);
    let r = centered(reference);
    let rr = dot(&r, &r);
    if rr < SILENCE_ENERGY {
        return None;
    }
    let a = dot(&e, &r);
    let c = a / rr;
    let noise: Vec<f64> = e.iter().zip(&r).map(|(x, y)| x - c * y).collect();
    let n = dot(&noise, &noise);
    let s = (c * c * rr).max(f64::MIN_POSITIVE);
    let value = DB * (s / (n + EPS)).ln();
    // d s / d e = 2 c r, d n / d e = 2 noise
    let g: Vec<f64> = r
        .iter()
        .zip(&noise)
        .map(|(ri, ni)| DB * (2.0 * c * ri / s - 2.0 * ni / (n + EPS)))
        .collect();
    Some((value, centered(&g)))
}

pub fn si_snr_samples(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!(
            "SI-SNR needs equal lengths, got {} and {}",
            est.len(),
            reference.len()
        )));
    }
    si_snr_grad(est, reference)
        .map(|(v, _)| v)
        .ok_or_else(|| Error::Invalid("SI-SNR reference is silent".into()))
}

pub fn si_snr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_snr_samples(&est.samples, &reference.samples)
}

/// `-si_snr(ŝ, s)`.
pub fn reconstruction_loss(mixture: &Waveform, reconstructed: &Waveform) -> Result<f64> {
    Ok(-si_snr(reconstructed, mixture)?)
}

/// Cosine with denominator `max(‖a‖‖b‖, ε)` and its gradients.
fn cosine_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (aa, bb) = (dot(a, a), dot(b, b));
    let ab = dot(a, b);
    let norms = (aa * bb).sqrt();
    if norms <= EPS {
        let ga = b.iter().map(|v| v / EPS).collect();
        let gb = a.iter().map(|v| v / EPS).collect();
        return (ab / EPS, ga, gb);
    }
    let c = ab / norms;
    let ga = a.iter().zip(b).map(|(x, y)| y / norms - c * x / aa).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / norms - c * y / bb).collect();
    (c, ga, gb)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_grad(a, b).0
}

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Mean over unordered instrument pairs of the cosine between absolute
/// latents, then mean over the batch. `latents[b][i]`.
pub fn dissimilarity_loss(latents: &[Vec<Tensor>]) -> Result<f64> {
    let mut total = 0.0;
    for row in latents {
        let p = pairs(row.len());
        if p.is_empty() {
            return Err(Error::Invalid("dissimilarity needs at least two instruments".into()));
        }
        let abs: Vec<Tensor> = row.iter().map(|t| t.map(f64::abs)).collect();
        total += p.iter().map(|&(i, j)| cosine(abs[i].data(), abs[j].data())).sum::<f64>() / p.len() as f64;
    }
    Ok(total / latents.len().max(1) as f64)
}

/// Negative mean over unordered batch pairs of the signed cosine, then mean
/// over instruments. `latents[b][i]`.
pub fn similarity_loss(latents: &[Vec<Tensor>]) -> Result<f64> {
    let p = pairs(latents.len());
    if p.is_empty() {
        return Err(Error::Invalid("similarity needs a batch of at least two".into()));
    }
    let n_inst = latents[0].len();
    if latents.iter().any(|row| row.len() != n_inst) {
        return Err(Error::Shape("every batch element needs the same instruments".into()));
    }
    let mut total = 0.0;
    for i in 0..n_inst {
        total -= p
            .iter()
            .map(|&(b, c)| cosine(latents[b][i].data(), latents[c][i].data()))
            .sum::<f64>()
            / p.len() as f64;
    }
    Ok(total / n_inst.max(1) as f64)
}

/// Per-row SI-SNR of `est` against a constant `reference`, both (B, 1, T).
/// Returns the row values (silent rows give 0) and the activity mask.
pub fn si_snr_rows(g: &mut Graph, est: Var, reference: &Tensor) -> Result<(Var, Vec<bool>)> {
    if g.shape(est) != reference.shape() {
        return Err(Error::Shape(format!(
            "estimate {:?} and reference {:?} differ",
            g.shape(est),
            reference.shape()
        )));
    }
    let rows = reference.shape()[0];
    let width = reference.len() / rows.max(1);
    let active: Vec<bool> = reference
        .data()
        .chunks(width)
        .map(|r| {
            let c = centered(r);
            dot(&c, &c) >= SILENCE_ENERGY
        })
        .collect();
    let refdata = reference.data().to_vec();
    let v = g.rowwise(est, move |row, x| {
        si_snr_grad(x, &refdata[row * width..(row + 1) * width]).unwrap_or((0.0, vec![0.0; x.len()]))
    });
    Ok((v, active))
}

fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    g.rowwise_pair(a, b, cosine_grad)
}

/// Graph form of [`dissimilarity_loss`]; `latents[i]` is (B, D, T′).
pub fn dissimilarity_node(g: &mut Graph, latents: &[Var]) -> Result<Var> {
    let p = pairs(latents.len());
    if p.is_empty() {
        return Err(Error::Invalid("dissimilarity needs at least two instruments".into()));
    }
    let abs: Vec<Var> = latents.iter().map(|&h| g.abs(h)).collect();
    let terms = p
        .iter()
        .map(|&(i, j)| cosine_rows(g, abs[i], abs[j]))
        .collect::<Result<Vec<_>>>()?;
    let sum = g.add_n(&terms)?;
    let per_batch = g.scale(sum, 1.0 / p.len() as f64);
    Ok(g.mean(per_batch))
}

/// Graph form of [`similarity_loss`]; `latents[i]` is (B, D, T′).
pub fn similarity_node(g: &mut Graph, latents: &[Var]) -> Result<Var> {
    let batch = g.shape(latents[0])[0];
    let p = pairs(batch);
    if p.is_empty() {
        return Err(Error::Invalid("similarity needs a batch of at least two".into()));
    }
    let mut terms = Vec::new();
    for &h in latents {
        let rows = (0..batch)
            .map(|b| g.slice_batch(h, b, 1))
            .collect::<Result<Vec<_>>>()?;
        for &(b, c) in &p {
            terms.push(cosine_rows(g, rows[b], rows[c])?);
        }
    }
    let sum = g.add_n(&terms)?;
    let scaled = g.scale(sum, -1.0 / (p.len() * latents.len()) as f64);
    Ok(g.mean(scaled))
}

/// One stage's training targets: (B, 1, T) tensors at that stage's rate.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBatch {
    pub mixture: Tensor,
    /// Per instrument, vocabulary order.
    pub sources: Vec<Tensor>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTerms {
    /// Mean SI-SNR (dB) over non-silent targets.
    pub si_snr: f64,
    /// Per instrument mean SI-SNR; `None` when every target was silent.
    pub per_instrument: Vec<Option<f64>>,
    pub dissimilarity: Option<f64>,
    pub similarity: Option<f64>,
    pub reconstruction: Option<f64>,
    /// Weighted stage contribution to the total.
    pub weighted: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub stages: Vec<StageTerms>,
}

/// Forward pass plus the weighted loss summed over stages. Auxiliary terms
/// with zero weight are skipped.
pub fn total_loss(
    sc: &mut Scope,
    model: &Model,
    batch: &[StageBatch],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown, Vec<StageVars>)> {
    let mixtures: Vec<Tensor> = batch.iter().map(|b| b.mixture.clone()).collect();
    let vars = model.forward(sc, &mixtures)?;
    let mut stage_losses = Vec::new();
    let mut breakdown = LossBreakdown::default();
    for (j, (sv, sb)) in vars.iter().zip(batch).enumerate() {
        let s = &model.stages[j];
        if sb.sources.len() != sv.estimates.len() {
            return Err(Error::Shape(format!(
                "stage {j}: {} targets for {} instruments",
                sb.sources.len(),
                sv.estimates.len()
            )));
        }
        let mut rows = Vec::new();
        let mut active = Vec::new();
        let mut terms = StageTerms::default();
        for (&est, target) in sv.estimates.iter().zip(&sb.sources) {
            let (v, act) = si_snr_rows(&mut sc.g, est, target)?;
            let vals: Vec<f64> = sc.g.value(v).data().iter().zip(&act).filter(|(_, &a)| a).map(|(x, _)| *x).collect();
            terms
                .per_instrument
                .push((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64));
            rows.push(v);
            active.extend(act);
        }
        let n_active = active.iter().filter(|&&a| a).count();
        let columns = rows
            .iter()
            .map(|&r| {
                let n = sc.g.shape(r)[0];
                sc.g.reshape(r, &[n, 1, 1])
            })
            .collect::<Result<Vec<_>>>()?;
        let all = sc.g.concat_channels(&columns)?;
        // all is (B, I, 1) so the mask must follow batch-major order.
        let b = sc.g.shape(all)[0];
        let n_inst = rows.len();
        let w: Vec<f64> = (0..b * n_inst)
            .map(|k| {
                let (bi, ii) = (k / n_inst, k % n_inst);
                if active[ii * b + bi] {
                    -1.0 / n_active.max(1) as f64
                } else {
                    0.0
                }
            })
            .collect();
        let neg_sisnr = sc.g.weighted_sum(all, &w)?;
        terms.si_snr = -sc.g.value(neg_sisnr).item();
        let mut parts = vec![sc.g.scale(neg_sisnr, weights.si_snr)];

        let enc = format!("s{}.enc", s.index);
        if weights.dissimilarity > 0.0 || weights.similarity > 0.0 {
            let latents = sb
                .sources
                .iter()
                .map(|src| encoder::encode(sc, &enc, &s.encoder, src))
                .collect::<Result<Vec<_>>>()?;
            if weights.dissimilarity > 0.0 {
                let d = dissimilarity_node(&mut sc.g, &latents)?;
                terms.dissimilarity = Some(sc.g.value(d).item());
                parts.push(sc.g.scale(d, weights.dissimilarity));
            }
            if weights.similarity > 0.0 {
                let l = similarity_node(&mut sc.g, &latents)?;
                terms.similarity = Some(sc.g.value(l).item());
                parts.push(sc.g.scale(l, weights.similarity));
            }
        }
        if weights.reconstruction > 0.0 {
            let (_, _, len) = sb.mixture.dims3();
            let h = encoder::encode(sc, &enc, &s.encoder, &sb.mixture)?;
            let rec = encoder::decode(sc, &format!("s{}.dec", s.index), &s.encoder, h, len)?;
            let (v, act) = si_snr_rows(&mut sc.g, rec, &sb.mixture)?;
            let k = act.iter().filter(|&&a| a).count().max(1) as f64;
            let w: Vec<f64> = act.iter().map(|&a| if a { -1.0 / k } else { 0.0 }).collect();
            let r = sc.g.weighted_sum(v, &w)?;
            terms.reconstruction = Some(sc.g.value(r).item());
            parts.push(sc.g.scale(r, weights.reconstruction));
        }
        let stage_sum = sc.g.add_n(&parts)?;
        let stage_loss = sc.g.scale(stage_sum, weights.stage(j));
        terms.weighted = sc.g.value(stage_loss).item();
        breakdown.stages.push(terms);
        stage_losses.push(stage_loss);
    }
    let total = sc.g.add_n(&stage_losses)?;
    breakdown.total = sc.g.value(total).item();
    Ok((total, breakdown, vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, "loss", 0);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn hand_computed_value() {
        let v = si_snr_samples(&[1.0, 0.0, 0.0], &[1.0, -1.0, 0.0]).unwrap();
        // centered est = [2/3, -1/3, -1/3]; target part [0.5,-0.5,0]; noise [1/6,1/6,-1/3]
        let want = 10.0 * (0.5f64 / (1.0 / 6.0 + 1e-8)).log10();
        assert!((v - want).abs() < 1e-9);
        assert!((v - 4.771).abs() < 1e-3);
    }

    #[test]
    fn identical_signals_hit_the_cap() {
        let x = rand_vec(64, 1);
        let xc = centered(&x);
        let cap = 10.0 * (dot(&xc, &xc) / 1e-8).log10();
        let v = si_snr_samples(&x, &x).unwrap();
        assert!((v - cap).abs() < 1e-6, "{v} vs {cap}");
        let scaled: Vec<f64> = x.iter().map(|v| 3.5 * v).collect();
        let y = rand_vec(64, 2);
        let noisy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + 0.3 * b).collect();
        let noisy_scaled: Vec<f64> = noisy.iter().map(|v| 3.5 * v).collect();
        // Once the noise term vanishes the cap follows the estimate's energy.
        let scaled_cap = cap + 20.0 * 3.5f64.log10();
        assert!((si_snr_samples(&scaled, &x).unwrap() - scaled_cap).abs() < 1e-6);
        assert!((si_snr_samples(&noisy_scaled, &x).unwrap() - si_snr_samples(&noisy, &x).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn silent_reference_and_length_errors() {
        assert!(si_snr_samples(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(si_snr_samples(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let est = rand_vec(20, 3);
        let r = rand_vec(20, 4);
        let (_, g) = si_snr_grad(&est, &r).unwrap();
        for i in 0..20 {
            let mut p = est.clone();
            p[i] += 1e-6;
            let mut m = est.clone();
            m[i] -= 1e-6;
            let fd = (si_snr_grad(&p, &r).unwrap().0 - si_snr_grad(&m, &r).unwrap().0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    fn t(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::from_vec(&[n], v).unwrap()
    }

    #[test]
    fn dissimilarity_examples() {
        let orth = vec![vec![t(vec![1.0, 0.0]), t(vec![0.0, 1.0])]];
        assert_eq!(dissimilarity_loss(&orth).unwrap(), 0.0);
        let same = vec![vec![t(vec![0.3, -0.7]), t(vec![0.3, -0.7])]];
        assert!((dissimilarity_loss(&same).unwrap() - 1.0).abs() < 1e-12);
        let signs = vec![vec![t(vec![0.3, -0.7]), t(vec![-0.3, 0.7])]];
        assert!((dissimilarity_loss(&signs).unwrap() - 1.0).abs() < 1e-12);

        let lat: Vec<Vec<Tensor>> = (0..2)
            .map(|b| (0..3).map(|i| t(rand_vec(10, 10 + 3 * b + i))).collect())
            .collect();
        let mut want = 0.0;
        for row in &lat {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    if i < j {
                        let a: Vec<f64> = row[i].data().iter().map(|v| v.abs()).collect();
                        let b: Vec<f64> = row[j].data().iter().map(|v| v.abs()).collect();
                        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        s += dot(&a, &b) / (norm(row[i].data()) * norm(row[j].data()));
                    }
                }
            }
            want += s / 3.0;
        }
        assert!((dissimilarity_loss(&lat).unwrap() - want / 2.0).abs() < 1e-6);
    }

    #[test]
    fn similarity_examples() {
        let same: Vec<Vec<Tensor>> = (0..3).map(|_| vec![t(vec![1.0, 2.0, 3.0])]).collect();
        assert!((similarity_loss(&same).unwrap() + 1.0).abs() < 1e-12);
        let orth = vec![vec![t(vec![1.0, 0.0])], vec![t(vec![0.0, 1.0])]];
        assert_eq!(similarity_loss(&orth).unwrap(), 0.0);
        assert!(similarity_loss(&orth[..1]).is_err());

        let lat: Vec<Vec<Tensor>> = (0..4).map(|b| vec![t(rand_vec(12, 40 + b))]).collect();
        let mut s = 0.0;
        let mut n = 0;
        for b in 0..4 {
            for c in 0..4 {
                if b < c {
                    let (x, y) = (lat[b][0].data(), lat[c][0].data());
                    s += dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt());
                    n += 1;
                }
            }
        }
        assert!((similarity_loss(&lat).unwrap() + s / n as f64).abs() < 1e-6);
    }

    #[test]
    fn reconstruction_is_negated_si_snr() {
        let s = Waveform::new(rand_vec(50, 5), 8000).unwrap();
        let twice = s.scaled(2.0);
        let a = reconstruction_loss(&s, &s).unwrap();
        let b = reconstruction_loss(&s, &twice).unwrap();
        assert!(a < -70.0 && b < -70.0);
        let noisy = Waveform::new(s.samples.iter().zip(rand_vec(50, 8)).map(|(x, n)| x + 0.2 * n).collect(), 8000).unwrap();
        let c = reconstruction_loss(&s, &noisy).unwrap();
        let d = reconstruction_loss(&s, &noisy.scaled(2.0)).unwrap();
        assert!((c - d).abs() < 1e-6);
        let other = Waveform::new(rand_vec(50, 6), 8000).unwrap();
        assert_eq!(reconstruction_loss(&s, &other).unwrap(), -si_snr(&other, &s).unwrap());
    }

    #[test]
    fn graph_nodes_match_plain_versions() {
        let (b, i, d, tp) = (3, 3, 2, 4);
        let lat: Vec<Vec<Tensor>> = (0..b)
            .map(|bb| {
                (0..i)
                    .map(|ii| Tensor::from_vec(&[d, tp], rand_vec(d * tp, 100 + (bb * i + ii) as u64)).unwrap())
                    .collect()
            })
            .collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = (0..i)
            .map(|ii| {
                let data: Vec<f64> = (0..b).flat_map(|bb| lat[bb][ii].data().to_vec()).collect();
                g.param(Tensor::from_vec(&[b, d, tp], data).unwrap())
            })
            .collect();
        let dn = dissimilarity_node(&mut g, &vars).unwrap();
        let sn = similarity_node(&mut g, &vars).unwrap();
        assert!((g.value(dn).item() - dissimilarity_loss(&lat).unwrap()).abs() < 1e-12);
        assert!((g.value(sn).item() - similarity_loss(&lat).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn abs_norm_equivalence() {
        let x = rand_vec(30, 7);
        let ax: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        assert_eq!(dot(&x, &x), dot(&ax, &ax));
    }

    #[test]
    fn aux_node_gradients_match_finite_difference() {
        let shape = [2, 2, 3];
        let base: Vec<Tensor> = (0..3).map(|k| Tensor::from_vec(&shape, rand_vec(12, 60 + k)).unwrap()).collect();
        let eval = |ts: &[Tensor], which: usize| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
            let out = if which == 0 {
                dissimilarity_node(&mut g, &vars).unwrap()
            } else {
                similarity_node(&mut g, &vars).unwrap()
            };
            let grads = g.backward(out);
            (g.value(out).item(), vars.iter().map(|&v| grads.get(v).unwrap().clone()).collect())
        };
        for which in 0..2 {
            let (_, grads) = eval(&base, which);
            for k in 0..3 {
                for e in 0..12 {
                    let mut p = base.clone();
                    p[k].data_mut()[e] += 1e-6;
                    let mut m = base.clone();
                    m[k].data_mut()[e] -= 1e-6;
                    let fd = (eval(&p, which).0 - eval(&m, which).0) / 2e-6;
                    let an = grads[k].data()[e];
                    assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{which} {k} {e}: {fd} vs {an}");
                }
            }
        }
    }

    use crate::config::{EncoderBase, ModelConfig, SharingMode, TcnBase};

    fn tiny_model(sharing: SharingMode, rates: Vec<u32>) -> Model {
        Model::new(ModelConfig {
            instruments: vec!["a".into(), "b".into(), "c".into()],
            stage_rates: rates,
            encoder: EncoderBase {
                stride: 4,
                kernel: 8,
                latent_dim: 4,
                heads: 1,
                stft_window: 8,
            },
            tcn: TcnBase {
                blocks: 1,
                layers_per_block: 2,
                hidden: 4,
                bottleneck: 3,
                kernel: 3,
            },
            embedding_dim: 4,
            generator_dim: 2,
            sharing,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn toy_batch(model: &Model, batch: usize, top_len: usize, seed: u64) -> Vec<StageBatch> {
        model
            .stage_lengths(top_len)
            .iter()
            .enumerate()
            .map(|(j, &len)| {
                let sources: Vec<Tensor> = (0..model.instruments().len())
                    .map(|i| Tensor::from_vec(&[batch, 1, len], rand_vec(batch * len, seed + 10 * j as u64 + i as u64)).unwrap())
                    .collect();
                let mut mix = Tensor::zeros(&[batch, 1, len]);
                for s in &sources {
                    mix.add_assign(s);
                }
                StageBatch { mixture: mix, sources }
            })
            .collect()
    }

    fn loss_of(model: &Model, batch: &[StageBatch], w: &LossWeights) -> LossBreakdown {
        let mut sc = Scope::new(&model.params);
        total_loss(&mut sc, model, batch, w).unwrap().1
    }

    #[test]
    fn weights_mask_and_combine_terms() {
        let model = tiny_model(SharingMode::Meta, vec![8000, 16000]);
        let batch = toy_batch(&model, 2, 64, 1);
        let pure = LossWeights {
            si_snr: 1.0,
            dissimilarity: 0.0,
            similarity: 0.0,
            reconstruction: 0.0,
            stage_scale: vec![],
        };
        let b = loss_of(&model, &batch, &pure);
        let neg: f64 = b.stages.iter().map(|s| -s.si_snr).sum();
        assert!((b.total - neg).abs() < 1e-12);
        assert!(b.stages.iter().all(|s| s.dissimilarity.is_none()));

        let full = LossWeights {
            si_snr: 1.0,
            dissimilarity: 0.3,
            similarity: 0.2,
            reconstruction: 0.1,
            stage_scale: vec![],
        };
        let f = loss_of(&model, &batch, &full);
        let aux: f64 = f
            .stages
            .iter()
            .map(|s| 0.3 * s.dissimilarity.unwrap() + 0.2 * s.similarity.unwrap() + 0.1 * s.reconstruction.unwrap())
            .sum();
        assert!((f.total - b.total - aux).abs() < 1e-9);

        // Straight-line recomputation from separated outputs and encoded sources.
        let sep_model = &model;
        let mut want = 0.0;
        for (j, sb) in batch.iter().enumerate() {
            let s = &sep_model.stages[j];
            let len = sb.mixture.shape()[2];
            let mut sis = Vec::new();
            let mut lat: Vec<Vec<Tensor>> = vec![Vec::new(); 2];
            let mut rec = Vec::new();
            for bi in 0..2 {
                let mix_row = Waveform::new(sb.mixture.data()[bi * len..(bi + 1) * len].to_vec(), s.rate).unwrap();
                let enc_prefix = format!("s{j}.enc");
                let h = encoder::encode_waveform(&model.params, &enc_prefix, &s.encoder, &mix_row).unwrap();
                let r = encoder::decode_latent(&model.params, &format!("s{j}.dec"), &s.encoder, &h, len).unwrap();
                rec.push(-si_snr(&r, &mix_row).unwrap());
                for src in &sb.sources {
                    let w = Waveform::new(src.data()[bi * len..(bi + 1) * len].to_vec(), s.rate).unwrap();
                    lat[bi].push(encoder::encode_waveform(&model.params, &enc_prefix, &s.encoder, &w).unwrap().values);
                }
            }
            let mut sc = Scope::new(&model.params);
            let mixtures: Vec<Tensor> = batch.iter().map(|b| b.mixture.clone()).collect();
            let vars = model.forward(&mut sc, &mixtures).unwrap();
            for (i, src) in sb.sources.iter().enumerate() {
                let est = sc.g.value(vars[j].estimates[i]).data().to_vec();
                for bi in 0..2 {
                    sis.push(si_snr_samples(&est[bi * len..(bi + 1) * len], &src.data()[bi * len..(bi + 1) * len]).unwrap());
                }
            }
            let mean_si = sis.iter().sum::<f64>() / sis.len() as f64;
            want += -mean_si
                + 0.3 * dissimilarity_loss(&lat).unwrap()
                + 0.2 * similarity_loss(&lat).unwrap()
                + 0.1 * rec.iter().sum::<f64>() / 2.0;
        }
        assert!((f.total - want).abs() < 1e-6, "{} vs {want}", f.total);
    }

    #[test]
    fn total_is_monotone_in_each_weight() {
        let model = tiny_model(SharingMode::Baseline, vec![8000]);
        let batch = toy_batch(&model, 2, 32, 2);
        let base = LossWeights {
            si_snr: 1.0,
            dissimilarity: 0.1,
            similarity: 0.1,
            reconstruction: 0.1,
            stage_scale: vec![],
        };
        let b0 = loss_of(&model, &batch, &base);
        let t = &b0.stages[0];
        for k in 0..4 {
            let mut w = base.clone();
            let term = match k {
                0 => {
                    w.si_snr += 0.5;
                    -t.si_snr
                }
                1 => {
                    w.dissimilarity += 0.5;
                    t.dissimilarity.unwrap()
                }
                2 => {
                    w.similarity += 0.5;
                    t.similarity.unwrap()
                }
                _ => {
                    w.reconstruction += 0.5;
                    t.reconstruction.unwrap()
                }
            };
            let b1 = loss_of(&model, &batch, &w);
            assert!((b1.total - b0.total - 0.5 * term).abs() < 1e-9);
            assert_eq!(b1.total >= b0.total, term >= 0.0);
        }
    }

    #[test]
    fn silent_targets_are_excluded() {
        let model = tiny_model(SharingMode::Baseline, vec![8000]);
        let mut batch = toy_batch(&model, 2, 32, 3);
        for v in batch[0].sources[1].data_mut() {
            *v = 0.0;
        }
        let w = LossWeights::default();
        let b = loss_of(&model, &batch, &w);
        assert!(b.total.is_finite());
        assert!(b.stages[0].per_instrument[1].is_none());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let w = LossWeights::default();
        for sharing in [SharingMode::Baseline, SharingMode::SharedTcn, SharingMode::Meta] {
            let model = tiny_model(sharing, vec![8000, 16000]);
            let batch = toy_batch(&model, 2, 64, 4);
            let mut sc = Scope::new(&model.params);
            let (out, _, _) = total_loss(&mut sc, &model, &batch, &w).unwrap();
            let grads = sc.gradients(out);
            assert_eq!(grads.len(), model.params.len());
            for (name, g) in &grads {
                assert!(g.data().iter().any(|&v| v != 0.0), "{sharing:?}: no gradient for {name}");
            }
            let mut rng = substream(9, "fd", 0);
            for (name, g) in &grads {
                for _ in 0..2 {
                    let e = rng.random_range(0..g.len());
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        m.params.get_mut(name).unwrap().data_mut()[e] += delta;
                        let mut sc = Scope::new(&m.params);
                        let (o, _, _) = total_loss(&mut sc, &m, &batch, &w).unwrap();
                        sc.g.value(o).item()
                    };
                    // At a ReLU kink the analytic value is one of the one-sided slopes.
                    let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3);
                    let an = g.data()[e];
                    let (up, mid, down) = (eval(1e-6), eval(0.0), eval(-1e-6));
                    let mut fd = (up - down) / 2e-6;
                    if !close(fd, an) {
                        let (up, down) = (eval(1e-7), eval(-1e-7));
                        fd = [(up - mid) / 1e-7, (mid - down) / 1e-7]
                            .into_iter()
                            .min_by(|x, y| (x - an).abs().total_cmp(&(y - an).abs()))
                            .unwrap();
                    }
                    assert!(
                        close(fd, an),
                        "{sharing:?} {name}[{e}]: fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }
}
