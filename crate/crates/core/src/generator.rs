//! Instrument embeddings and the two-factor linear generator that maps an
//! embedding to a complete set of masking-network parameters.
//!
//! For every mask-net layer `k`: `θ_k = W_k (P_k e)` with `P_k ∈ R^{M′×M}`
//! and `W_k ∈ R^{|θ_k|×M′}`. There is no bias, so the map is linear in `e`.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ModelConfig, TcnConfig};
use crate::encoder::{init_decoder, init_encoder};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::masking::{layer_shapes, LayerKind, LayerParams, LayerShape, ParameterSet, Provenance};
use crate::params::{normal, ParamStore, Scope};
use crate::tensor::Tensor;

/// Std of generated norm gains/offsets at initialisation.
const NORM_INIT_STD: f64 = 0.05;

pub fn embedding_name(instrument: &str) -> String {
    format!("embed.{instrument}")
}

/// Learned `e_i ∈ R^M`, one per instrument, stored as `embed.{id}`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentEmbedding {
    pub instruments: Vec<String>,
    pub dim: usize,
}

impl InstrumentEmbedding {
    pub fn new(instruments: &[String], dim: usize) -> Self {
        InstrumentEmbedding {
            instruments: instruments.to_vec(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for id in &self.instruments {
            store.insert(embedding_name(id), normal(&[self.dim], 1.0, rng));
        }
    }

    fn check(&self, id: &str) -> Result<()> {
        if self.instruments.iter().any(|i| i == id) {
            Ok(())
        } else {
            Err(Error::UnknownInstrument(id.to_string()))
        }
    }

    /// The stored vector for `id`.
    pub fn lookup<'s>(&self, store: &'s ParamStore, id: &str) -> Result<&'s Tensor> {
        self.check(id)?;
        store.get(&embedding_name(id))
    }

    /// `e_i` bound into a graph as a trainable leaf.
    pub fn bind(&self, sc: &mut Scope, id: &str) -> Result<Var> {
        self.check(id)?;
        sc.param(&embedding_name(id))
    }
}

/// The `P_k`, `W_k` factors for one stage's masking network, stored as
/// `{prefix}.{layer}.P` and `{prefix}.{layer}.W`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights {
    pub prefix: String,
    pub tcn: TcnConfig,
    pub embedding_dim: usize,
    pub generator_dim: usize,
}

impl GeneratorWeights {
    pub fn new(prefix: &str, tcn: &TcnConfig, embedding_dim: usize, generator_dim: usize) -> Result<Self> {
        if generator_dim == 0 || generator_dim >= embedding_dim {
            return Err(Error::Config(format!(
                "generator width M′={generator_dim} must satisfy 0 < M′ < M={embedding_dim}"
            )));
        }
        Ok(GeneratorWeights {
            prefix: prefix.to_string(),
            tcn: tcn.clone(),
            embedding_dim,
            generator_dim,
        })
    }

    /// Variance-matched initialisation: with `e ~ N(0, I)` and
    /// `P ~ N(0, 1/M)`, `P e` has unit variance per entry, so `W` is drawn
    /// such that `θ_k` has the variance of the owned fan-in initialisation.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (m, mp) = (self.embedding_dim, self.generator_dim);
        for l in layer_shapes(&self.tcn) {
            let name = format!("{}.{}", self.prefix, l.name);
            store.insert(format!("{name}.P"), normal(&[mp, m], (1.0 / m as f64).sqrt(), rng));
            let target_var = match l.kind {
                LayerKind::Norm => NORM_INIT_STD * NORM_INIT_STD,
                _ => 1.0 / (3.0 * fan_in(&l) as f64),
            };
            let std = (target_var / mp as f64).sqrt();
            store.insert(format!("{name}.W"), normal(&[l.param_count(), mp], std, rng));
        }
    }

    /// Emits the full parameter set for embedding `e`.
    pub fn generate(&self, sc: &mut Scope, e: Var) -> Result<ParameterSet> {
        let (m, mp) = (self.embedding_dim, self.generator_dim);
        if sc.g.value(e).len() != m {
            return Err(Error::Shape(format!(
                "embedding has {} entries, generator expects M={m}",
                sc.g.value(e).len()
            )));
        }
        let mut layers = Vec::new();
        for (k, l) in layer_shapes(&self.tcn).iter().enumerate() {
            let name = format!("{}.{}", self.prefix, l.name);
            let p = sc.param(&format!("{name}.P"))?;
            let w = sc.param(&format!("{name}.W"))?;
            if sc.g.shape(p) != [mp, m] || sc.g.shape(w) != [l.param_count(), mp] {
                return Err(Error::Shape(format!(
                    "generator layer {k} ({}): P is {:?}, W is {:?}, expected [{mp}, {m}] and [{}, {mp}]",
                    l.name,
                    sc.g.shape(p),
                    sc.g.shape(w),
                    l.param_count()
                )));
            }
            let z = sc.g.matvec(p, e)?;
            let theta = sc.g.matvec(w, z)?;
            layers.push(LayerParams {
                weight: sc.g.slice_flat(theta, 0, &l.weight)?,
                bias: sc.g.slice_flat(theta, l.weight_len(), &[l.bias])?,
            });
        }
        Ok(ParameterSet {
            layers,
            provenance: Provenance::Generated,
        })
    }

    /// Numeric parameters for a plain embedding vector.
    pub fn generate_tensors(&self, store: &ParamStore, e: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        let mut sc = Scope::new(store);
        let ev = sc.constant(e.clone());
        let ps = self.generate(&mut sc, ev)?;
        Ok(ps.values(&sc))
    }
}

fn fan_in(l: &LayerShape) -> usize {
    match l.kind {
        LayerKind::Norm => 1,
        LayerKind::Pointwise => l.weight[1],
        LayerKind::Depthwise { .. } => l.weight[2],
    }
}

/// Masking-parameter accounting for one set of layer sizes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskingCounts {
    /// `|θ| = Σ_k |θ_k|`.
    pub per_instrument: usize,
    /// `|I| · |θ|`.
    pub baseline_total: usize,
    /// `M·|I| + Σ_k (M′·M + |θ_k|·M′)`.
    pub generator_storage: usize,
    /// `baseline_total / per_instrument`.
    pub ratio: f64,
}

pub fn masking_counts(layer_sizes: &[usize], m: usize, m_prime: usize, instruments: usize) -> MaskingCounts {
    let per_instrument: usize = layer_sizes.iter().sum();
    let baseline_total = instruments * per_instrument;
    let generator_storage =
        m * instruments + layer_sizes.iter().map(|t| m_prime * m + t * m_prime).sum::<usize>();
    MaskingCounts {
        per_instrument,
        baseline_total,
        generator_storage,
        ratio: baseline_total as f64 / per_instrument.max(1) as f64,
    }
}

/// Whole-model parameter accounting, summed over the active stages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCounts {
    pub instruments: usize,
    pub stages: usize,
    pub encoder: usize,
    pub decoder: usize,
    /// Latent projections between stages of different width.
    pub bridge: usize,
    pub masking: MaskingCounts,
}

pub fn param_count_report(cfg: &ModelConfig) -> ParamCounts {
    let stages = cfg.stages();
    let sizes: Vec<usize> = stages
        .iter()
        .flat_map(|s| layer_shapes(&s.tcn).into_iter().map(|l| l.param_count()))
        .collect();
    let mut scratch = ParamStore::new();
    let mut rng = crate::rng::substream(0, "count", 0);
    let mut bridge = 0;
    for s in &stages {
        init_encoder(&mut scratch, &format!("s{}.enc", s.index), &s.encoder, &mut rng);
        init_decoder(&mut scratch, &format!("s{}.dec", s.index), &s.encoder, &mut rng);
        if let Some(prev) = s.prev_latent_dim.filter(|&p| p != s.encoder.latent_dim) {
            bridge += prev * s.encoder.latent_dim + s.encoder.latent_dim;
        }
    }
    let encoder = stages.iter().map(|s| scratch.count_prefix(&format!("s{}.enc.", s.index))).sum();
    let decoder = stages.iter().map(|s| scratch.count_prefix(&format!("s{}.dec.", s.index))).sum();
    ParamCounts {
        instruments: cfg.instruments.len(),
        stages: stages.len(),
        encoder,
        decoder,
        bridge,
        masking: masking_counts(&sizes, cfg.embedding_dim, cfg.generator_dim, cfg.instruments.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use nalgebra::DMatrix;

    fn tiny() -> TcnConfig {
        TcnConfig {
            num_blocks: 1,
            layers_per_block: 2,
            hidden_channels: 6,
            bottleneck_channels: 4,
            kernel_size: 3,
            input_dim: 4,
            output_dim: 4,
        }
    }

    fn setup(m: usize, mp: usize) -> (GeneratorWeights, ParamStore) {
        let gw = GeneratorWeights::new("gen", &tiny(), m, mp).unwrap();
        let mut store = ParamStore::new();
        gw.init(&mut store, &mut substream(1, "gen", 0));
        (gw, store)
    }

    fn flat(ts: &[(Tensor, Tensor)]) -> Vec<f64> {
        ts.iter()
            .flat_map(|(w, b)| w.data().iter().chain(b.data()).copied())
            .collect()
    }

    #[test]
    fn zero_embedding_gives_zero_params() {
        let (gw, store) = setup(8, 3);
        let out = gw.generate_tensors(&store, &Tensor::zeros(&[8])).unwrap();
        assert!(flat(&out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_is_linear() {
        let (gw, store) = setup(8, 3);
        let e = normal(&[8], 1.0, &mut substream(2, "e", 0));
        let a = flat(&gw.generate_tensors(&store, &e).unwrap());
        let b = flat(&gw.generate_tensors(&store, &e.map(|v| 2.0 * v)).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn shapes_follow_the_factorization() {
        let (gw, store) = setup(8, 3);
        for l in layer_shapes(&gw.tcn) {
            let name = format!("gen.{}", l.name);
            assert_eq!(store.get(&format!("{name}.P")).unwrap().shape(), &[3, 8]);
            assert_eq!(store.get(&format!("{name}.W")).unwrap().shape(), &[l.param_count(), 3]);
        }
        let e = normal(&[8], 1.0, &mut substream(2, "e", 0));
        let out = gw.generate_tensors(&store, &e).unwrap();
        for (l, (w, b)) in layer_shapes(&gw.tcn).iter().zip(&out) {
            assert_eq!(w.shape(), l.weight.as_slice());
            assert_eq!(b.len(), l.bias);
        }
    }

    #[test]
    fn generated_params_lie_in_low_rank_subspace() {
        let (gw, store) = setup(8, 3);
        let sets: Vec<Vec<(Tensor, Tensor)>> = (0..4)
            .map(|i| {
                let e = normal(&[8], 1.0, &mut substream(3, "e", i));
                gw.generate_tensors(&store, &e).unwrap()
            })
            .collect();
        for k in 0..sets[0].len() {
            let rows: Vec<Vec<f64>> = sets.iter().map(|s| flat(&s[k..k + 1])).collect();
            let m = DMatrix::from_fn(4, rows[0].len(), |r, c| rows[r][c]);
            let sv = m.singular_values();
            let smallest = sv.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(smallest <= 1e-6 * sv.max(), "layer {k}: {sv}");
        }
    }

    #[test]
    fn bad_dimensions_are_rejected() {
        assert!(GeneratorWeights::new("g", &tiny(), 4, 4).is_err());
        let (gw, mut store) = setup(8, 3);
        assert!(gw.generate_tensors(&store, &Tensor::zeros(&[7])).is_err());
        let name = format!("gen.{}.W", layer_shapes(&gw.tcn)[2].name);
        store.insert(name, Tensor::zeros(&[5, 3]));
        let err = gw.generate_tensors(&store, &Tensor::zeros(&[8])).unwrap_err().to_string();
        assert!(err.contains("layer 2"), "{err}");
    }

    #[test]
    fn lookup_is_stable_and_checks_vocabulary() {
        let vocab: Vec<String> = ["vocals", "drums", "bass", "other"].map(String::from).to_vec();
        let emb = InstrumentEmbedding::new(&vocab, 16);
        let mut store = ParamStore::new();
        emb.init(&mut store, &mut substream(0, "embed", 0));
        assert_eq!(emb.lookup(&store, "bass").unwrap(), emb.lookup(&store, "bass").unwrap());
        assert!(matches!(emb.lookup(&store, "kazoo"), Err(Error::UnknownInstrument(_))));
    }

    #[test]
    fn init_matches_owned_variance() {
        let cfg = TcnConfig {
            hidden_channels: 32,
            bottleneck_channels: 32,
            input_dim: 32,
            output_dim: 32,
            ..tiny()
        };
        let gw = GeneratorWeights::new("gen", &cfg, 16, 4).unwrap();
        let mut store = ParamStore::new();
        gw.init(&mut store, &mut substream(4, "gen", 0));
        let l = layer_shapes(&cfg).into_iter().find(|l| l.name == "in_conv").unwrap();
        let mut acc = 0.0;
        let mut n = 0;
        for i in 0..50 {
            let e = normal(&[16], 1.0, &mut substream(5, "e", i));
            let out = gw.generate_tensors(&store, &e).unwrap();
            let w = &out[1].0;
            acc += w.sum_sq();
            n += w.len();
        }
        let var = acc / n as f64;
        let want = 1.0 / (3.0 * l.weight[1] as f64);
        assert!((var / want - 1.0).abs() < 0.5, "{var} vs {want}");
    }

    #[test]
    fn count_arithmetic() {
        let sizes = [100, 250, 400, 250];
        let c = masking_counts(&sizes, 16, 4, 4);
        assert_eq!(c.per_instrument, 1000);
        assert_eq!(c.baseline_total, 4000);
        assert_eq!(c.ratio, 4.0);
        assert_eq!(c.generator_storage, 16 * 4 + 4 * (4 * 16) + 1000 * 4);
    }
}
