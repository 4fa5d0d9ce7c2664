//! Temporal convolutional masking subnetwork.
//!
//! The network is evaluated against an injected [`ParameterSet`], so owned,
//! tied and generated parameters all run through [`apply_mask_net`].
//!
//! Layout: global norm and 1×1 projection into the bottleneck, then
//! `num_blocks × layers_per_block` residual layers
//! (1×1 → ReLU → norm → dilated depthwise → ReLU → norm → 1×1 residual / 1×1 skip)
//! with dilation `2^l`, and finally ReLU of the skip sum → 1×1 → sigmoid.
//! The very last layer has no residual projection since nothing consumes it.

use rand_chacha::ChaCha8Rng;

use crate::config::TcnConfig;
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Var};
use crate::params::{init_layer, ParamStore, Scope};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Per-channel gain offset (stored as `1 + weight`) and bias.
    Norm,
    Pointwise,
    Depthwise { dilation: usize },
}

/// One learnable layer: a weight tensor and a bias vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Vec<usize>,
    pub bias: usize,
    /// Part of the TCN blocks (tied across instruments in shared mode).
    pub in_block: bool,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.weight.iter().product()
    }

    /// `|θ_k|`: weights plus biases.
    pub fn param_count(&self) -> usize {
        self.weight_len() + self.bias
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Norm => 1,
            LayerKind::Pointwise => self.weight[1],
            LayerKind::Depthwise { .. } => self.weight[2],
        }
    }
}

/// Every learnable tensor of the masking network, in evaluation order.
pub fn layer_shapes(cfg: &TcnConfig) -> Vec<LayerShape> {
    let (bc, h, k) = (cfg.bottleneck_channels, cfg.hidden_channels, cfg.kernel_size);
    let mut out = vec![
        LayerShape {
            name: "in_norm".into(),
            kind: LayerKind::Norm,
            weight: vec![cfg.input_dim],
            bias: cfg.input_dim,
            in_block: false,
        },
        LayerShape {
            name: "in_conv".into(),
            kind: LayerKind::Pointwise,
            weight: vec![bc, cfg.input_dim, 1],
            bias: bc,
            in_block: false,
        },
    ];
    let block = |name: String, kind, weight: Vec<usize>, bias| LayerShape {
        name,
        kind,
        weight,
        bias,
        in_block: true,
    };
    for b in 0..cfg.num_blocks {
        for l in 0..cfg.layers_per_block {
            let p = format!("b{b}l{l}");
            let last = b + 1 == cfg.num_blocks && l + 1 == cfg.layers_per_block;
            out.push(block(format!("{p}.conv1"), LayerKind::Pointwise, vec![h, bc, 1], h));
            out.push(block(format!("{p}.norm1"), LayerKind::Norm, vec![h], h));
            out.push(block(
                format!("{p}.dw"),
                LayerKind::Depthwise { dilation: 1 << l },
                vec![h, 1, k],
                h,
            ));
            out.push(block(format!("{p}.norm2"), LayerKind::Norm, vec![h], h));
            if !last {
                out.push(block(format!("{p}.res"), LayerKind::Pointwise, vec![bc, h, 1], bc));
            }
            out.push(block(format!("{p}.skip"), LayerKind::Pointwise, vec![bc, h, 1], bc));
        }
    }
    out.push(LayerShape {
        name: "out_conv".into(),
        kind: LayerKind::Pointwise,
        weight: vec![cfg.output_dim, bc, 1],
        bias: cfg.output_dim,
        in_block: false,
    });
    out
}

/// `|θ| = Σ_k |θ_k|`.
pub fn total_param_count(cfg: &TcnConfig) -> usize {
    layer_shapes(cfg).iter().map(LayerShape::param_count).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Owned,
    Tied,
    Generated,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub weight: Var,
    pub bias: Var,
}

/// Graph handles for every layer of one masking network.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub layers: Vec<LayerParams>,
    pub provenance: Provenance,
}

impl ParameterSet {
    /// Parameters owned under `{prefix}.{layer}.w/b`.
    pub fn owned(sc: &mut Scope, prefix: &str, cfg: &TcnConfig) -> Result<Self> {
        Self::bind(sc, cfg, |_| prefix.to_string(), Provenance::Owned)
    }

    /// Block layers from `shared_prefix`, the rest from `own_prefix`.
    pub fn tied(sc: &mut Scope, own_prefix: &str, shared_prefix: &str, cfg: &TcnConfig) -> Result<Self> {
        Self::bind(
            sc,
            cfg,
            |l| {
                if l.in_block {
                    shared_prefix.to_string()
                } else {
                    own_prefix.to_string()
                }
            },
            Provenance::Tied,
        )
    }

    fn bind(
        sc: &mut Scope,
        cfg: &TcnConfig,
        prefix_of: impl Fn(&LayerShape) -> String,
        provenance: Provenance,
    ) -> Result<Self> {
        let layers = layer_shapes(cfg)
            .iter()
            .map(|l| {
                let p = prefix_of(l);
                Ok(LayerParams {
                    weight: sc.param(&format!("{p}.{}.w", l.name))?,
                    bias: sc.param(&format!("{p}.{}.b", l.name))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParameterSet { layers, provenance })
    }

    /// Plain tensors bound as constants, for evaluation outside training.
    pub fn from_tensors(sc: &mut Scope, tensors: &[(Tensor, Tensor)], provenance: Provenance) -> Self {
        let layers = tensors
            .iter()
            .map(|(w, b)| LayerParams {
                weight: sc.constant(w.clone()),
                bias: sc.constant(b.clone()),
            })
            .collect();
        ParameterSet { layers, provenance }
    }

    /// Current numeric values, layer by layer.
    pub fn values(&self, sc: &Scope) -> Vec<(Tensor, Tensor)> {
        self.layers
            .iter()
            .map(|l| (sc.g.value(l.weight).clone(), sc.g.value(l.bias).clone()))
            .collect()
    }
}

/// Inserts owned parameters for the layers selected by `keep`.
pub fn init_mask_params(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &TcnConfig,
    keep: impl Fn(&LayerShape) -> bool,
    rng: &mut ChaCha8Rng,
) {
    for l in layer_shapes(cfg).iter().filter(|l| keep(l)) {
        let name = format!("{prefix}.{}", l.name);
        match l.kind {
            LayerKind::Norm => {
                store.insert(format!("{name}.w"), Tensor::zeros(&l.weight));
                store.insert(format!("{name}.b"), Tensor::zeros(&[l.bias]));
            }
            _ => init_layer(store, &name, &l.weight, l.bias, l.fan_in(), rng),
        }
    }
}

/// Mask values in `[0, 1]`, (D, T′).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub values: Tensor,
}

fn check_params(sc: &Scope, cfg: &TcnConfig, params: &ParameterSet) -> Result<Vec<LayerShape>> {
    let shapes = layer_shapes(cfg);
    if params.layers.len() != shapes.len() {
        return Err(Error::Shape(format!(
            "mask network needs {} layers, parameter set has {}",
            shapes.len(),
            params.layers.len()
        )));
    }
    for (k, (shape, p)) in shapes.iter().zip(&params.layers).enumerate() {
        if sc.g.shape(p.weight) != shape.weight.as_slice() || sc.g.value(p.bias).len() != shape.bias {
            return Err(Error::Shape(format!(
                "layer {k} ({}): expected weight {:?} and {} biases, got {:?} and {}",
                shape.name,
                shape.weight,
                shape.bias,
                sc.g.shape(p.weight),
                sc.g.value(p.bias).len()
            )));
        }
    }
    Ok(shapes)
}

/// Evaluates the masking network on `x` (B, input_dim, T′), returning a
/// sigmoid mask (B, output_dim, T′).
pub fn apply_mask_net(sc: &mut Scope, x: Var, cfg: &TcnConfig, params: &ParameterSet) -> Result<Var> {
    let shapes = check_params(sc, cfg, params)?;
    let (_, cin, len) = sc.g.value(x).dims3();
    if cin != cfg.input_dim {
        return Err(Error::Shape(format!(
            "mask network expects {} input channels, got {cin}",
            cfg.input_dim
        )));
    }
    let mut layers = shapes.iter().zip(&params.layers);
    let mut next = |name: &str| {
        let (shape, p) = layers.next().expect("layer list checked");
        debug_assert!(shape.name.ends_with(name));
        (shape.clone(), *p)
    };
    let pw = ConvGeom::pointwise(len);

    let (_, p) = next("in_norm");
    let x0 = sc.g.global_norm(x, p.weight, p.bias)?;
    let (_, p) = next("in_conv");
    let mut y = sc.g.conv1d(x0, p.weight, Some(p.bias), pw)?;
    let mut skips = Vec::new();
    for b in 0..cfg.num_blocks {
        for l in 0..cfg.layers_per_block {
            let last = b + 1 == cfg.num_blocks && l + 1 == cfg.layers_per_block;
            let (_, p) = next("conv1");
            let z = sc.g.conv1d(y, p.weight, Some(p.bias), pw)?;
            let z = sc.g.relu(z);
            let (_, p) = next("norm1");
            let z = sc.g.global_norm(z, p.weight, p.bias)?;
            let (shape, p) = next("dw");
            let LayerKind::Depthwise { dilation } = shape.kind else {
                unreachable!("layer order fixed by layer_shapes")
            };
            let pad = (dilation * (cfg.kernel_size - 1) / 2) as isize;
            let z = sc.g.depthwise(z, p.weight, Some(p.bias), dilation, pad)?;
            let z = sc.g.relu(z);
            let (_, p) = next("norm2");
            let z = sc.g.global_norm(z, p.weight, p.bias)?;
            if !last {
                let (_, p) = next("res");
                let r = sc.g.conv1d(z, p.weight, Some(p.bias), pw)?;
                y = sc.g.add(y, r)?;
            }
            let (_, p) = next("skip");
            skips.push(sc.g.conv1d(z, p.weight, Some(p.bias), pw)?);
        }
    }
    let s = sc.g.add_n(&skips)?;
    let s = sc.g.relu(s);
    let (_, p) = next("out_conv");
    let logits = sc.g.conv1d(s, p.weight, Some(p.bias), pw)?;
    Ok(sc.g.sigmoid(logits))
}

/// `h ⊙ m`.
pub fn separate_latent(sc: &mut Scope, h: Var, m: Var) -> Result<Var> {
    sc.g.mul(h, m)
}
