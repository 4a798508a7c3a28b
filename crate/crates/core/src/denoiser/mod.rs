//! Spatio-temporal denoising network predicting `v`.
//!
//! Layout for a clip batch `[B·F, 9, h, w]` (batch-major, frame-minor):
//!
//! ```text
//! input conv 3×3 (9 → C)
//! repeat n_res_blocks:
//!     spatial residual block   GN → SiLU → conv → + time bias → GN → SiLU → conv
//!     temporal block           GN → SiLU → conv 3 along frames, then
//!                              LN → + frame position → self-attention across frames
//!     cross-attention          LN → queries from features, keys/values from tokens
//! GN → SiLU → output conv 3×3 (C → 4)
//! ```
//!
//! Every temporal and cross-attention branch ends in a zero-initialized
//! projection inside a residual, so those modules start as the identity.
//! Parameters are named `group/layer/role`; the group prefix is one of
//! `spatial`, `temporal`, `input_layer`, `cross_attn`.

mod config;
mod embed;
mod layers;

use std::collections::BTreeMap;
use std::fmt;

use atmv_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

pub use config::DenoiserConfig;
pub use embed::timestep_embedding;

use crate::codec::LATENT_CHANNELS;
use crate::conditioning::{SemanticCondition, INPUT_CHANNELS};
use crate::error::{dim_err, Error, Result};
use crate::latent::{LatentVideo, Prediction};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Spatial,
    Temporal,
    InputLayer,
    CrossAttn,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Spatial, Group::Temporal, Group::InputLayer, Group::CrossAttn];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Spatial => "spatial",
            Group::Temporal => "temporal",
            Group::InputLayer => "input_layer",
            Group::CrossAttn => "cross_attn",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        let prefix = name.split('/').next()?;
        Group::ALL.into_iter().find(|g| g.prefix() == prefix)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `N(0, 2/fan_in)`.
    Kaiming,
    /// Kaiming for the first `keep` input channels, `1e-3`-scaled beyond.
    InputConv { keep: usize },
    /// `N(0, 1/fan_in)` over the leading axis.
    Linear,
    Normal(f64),
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layout(cfg: &DenoiserConfig) -> Vec<ParamSpec> {
    let c = cfg.base_channels;
    let (d, te, th) = (cfg.d_model, cfg.time_embed_dim, cfg.time_hidden_dim);
    let mut specs = Vec::new();
    let mut add = |name: String, shape: &[usize], init: Init| {
        specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        })
    };
    add(
        "input_layer/0/conv.weight".into(),
        &[c, INPUT_CHANNELS, 3, 3],
        Init::InputConv {
            keep: LATENT_CHANNELS,
        },
    );
    add("input_layer/0/conv.bias".into(), &[c], Init::Zeros);
    add("spatial/time/fc1.weight".into(), &[te, th], Init::Linear);
    add("spatial/time/fc1.bias".into(), &[th], Init::Zeros);
    add("spatial/time/fc2.weight".into(), &[th, th], Init::Linear);
    add("spatial/time/fc2.bias".into(), &[th], Init::Zeros);
    for i in 0..cfg.n_res_blocks {
        let s = |role: &str| format!("spatial/{i}/{role}");
        add(s("gn1.gamma"), &[c], Init::Ones);
        add(s("gn1.beta"), &[c], Init::Zeros);
        add(s("conv1.weight"), &[c, c, 3, 3], Init::Kaiming);
        add(s("conv1.bias"), &[c], Init::Zeros);
        add(s("time.weight"), &[th, c], Init::Linear);
        add(s("time.bias"), &[c], Init::Zeros);
        add(s("gn2.gamma"), &[c], Init::Ones);
        add(s("gn2.beta"), &[c], Init::Zeros);
        add(s("conv2.weight"), &[c, c, 3, 3], Init::Kaiming);
        add(s("conv2.bias"), &[c], Init::Zeros);

        let t = |role: &str| format!("temporal/{i}/{role}");
        add(t("gn.gamma"), &[c], Init::Ones);
        add(t("gn.beta"), &[c], Init::Zeros);
        add(t("conv.weight"), &[c, c, 3, 1], Init::Zeros);
        add(t("conv.bias"), &[c], Init::Zeros);
        add(t("ln.gamma"), &[c], Init::Ones);
        add(t("ln.beta"), &[c], Init::Zeros);
        if cfg.frame_position_encoding {
            add(t("pos"), &[cfg.t_clip_max, c], Init::Normal(0.02));
        }
        add(t("q.weight"), &[c, c], Init::Linear);
        add(t("k.weight"), &[c, c], Init::Linear);
        add(t("v.weight"), &[c, c], Init::Linear);
        add(t("out.weight"), &[c, c], Init::Zeros);
        add(t("out.bias"), &[c], Init::Zeros);

        let x = |role: &str| format!("cross_attn/{i}/{role}");
        add(x("ln.gamma"), &[c], Init::Ones);
        add(x("ln.beta"), &[c], Init::Zeros);
        add(x("q.weight"), &[c, d], Init::Linear);
        add(x("k.weight"), &[d, d], Init::Linear);
        add(x("v.weight"), &[d, d], Init::Linear);
        add(x("out.weight"), &[d, c], Init::Zeros);
        add(x("out.bias"), &[c], Init::Zeros);
    }
    add(
        "cross_attn/tokens/proj.weight".into(),
        &[cfg.cond_width, cfg.n_tokens * d],
        Init::Linear,
    );
    add("cross_attn/tokens/proj.bias".into(), &[cfg.n_tokens * d], Init::Normal(0.02));
    add("spatial/out/gn.gamma".into(), &[c], Init::Ones);
    add("spatial/out/gn.beta".into(), &[c], Init::Zeros);
    add("spatial/out/conv.weight".into(), &[LATENT_CHANNELS, c, 3, 3], Init::Normal(1e-5));
    add("spatial/out/conv.bias".into(), &[LATENT_CHANNELS], Init::Zeros);
    specs
}

fn init_values(spec: &ParamSpec, rng: &mut Rng) -> Vec<Real> {
    let n: usize = spec.shape.iter().product();
    let fan_in = |shape: &[usize]| shape[1..].iter().product::<usize>() as f64;
    let normal = |rng: &mut Rng, std: f64| (0..n).map(|_| (rng.normal() * std) as Real).collect();
    match spec.init {
        Init::Kaiming => normal(rng, (2.0 / fan_in(&spec.shape)).sqrt()),
        Init::InputConv { keep } => {
            let std = (2.0 / fan_in(&spec.shape)).sqrt();
            let per_in: usize = spec.shape[2..].iter().product();
            let cin = spec.shape[1];
            (0..n)
                .map(|k| {
                    let ci = (k / per_in) % cin;
                    let scale = if ci < keep { 1.0 } else { 1e-3 };
                    (rng.normal() * std * scale) as Real
                })
                .collect()
        }
        Init::Linear => normal(rng, (1.0 / spec.shape[0] as f64).sqrt()),
        Init::Normal(std) => normal(rng, std),
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
    }
}

/// Network parameters plus the configuration that shapes them.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: DenoiserConfig,
    params: BTreeMap<String, Tensor>,
}

impl Model {
    pub fn init(cfg: &DenoiserConfig, rng: &mut Rng) -> Result<Model> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        for spec in layout(cfg) {
            let values = init_values(&spec, rng);
            params.insert(spec.name, Tensor::param(values, &spec.shape)?);
        }
        Ok(Model {
            cfg: cfg.clone(),
            params,
        })
    }

    /// Builds a model from named arrays; every expected name must be present
    /// with the expected shape and nothing else may be.
    pub fn from_arrays(cfg: &DenoiserConfig, mut arrays: BTreeMap<String, (Vec<usize>, Vec<Real>)>) -> Result<Model> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        for spec in layout(cfg) {
            let Some((shape, data)) = arrays.remove(&spec.name) else {
                return Err(Error::Data(format!("missing parameter {}", spec.name)));
            };
            if shape != spec.shape {
                return Err(Error::Data(format!(
                    "parameter {} has shape {shape:?}, config expects {:?}",
                    spec.name, spec.shape
                )));
            }
            params.insert(spec.name, Tensor::param(data, &shape)?);
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Data(format!("unexpected parameter {extra}")));
        }
        Ok(Model {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Invariant(format!("no parameter named {name}")))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces a parameter's values, keeping its shape and trainability.
    pub fn set_param(&mut self, name: &str, data: Vec<Real>) -> Result<()> {
        let old = self.param(name)?;
        let shape = old.shape().to_vec();
        let t = if old.requires_grad() {
            Tensor::param(data, &shape)?
        } else {
            Tensor::new(data, &shape)?
        };
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    /// Marks exactly the parameters of `groups` as trainable; the rest become
    /// constants that receive no gradient.
    pub fn set_trainable(&mut self, groups: &[Group]) {
        for (name, t) in self.params.iter_mut() {
            let train = Group::of(name).is_some_and(|g| groups.contains(&g));
            let data = t.to_vec();
            *t = if train {
                Tensor::param(data, t.shape()).expect("shape unchanged")
            } else {
                Tensor::new(data, t.shape()).expect("shape unchanged")
            };
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }

    /// Projects conditions to cross-attention tokens `[B, n_tokens, d_model]`.
    pub fn semantic_tokens(&self, conds: &[SemanticCondition]) -> Result<Tensor> {
        let w = self.cfg.cond_width;
        if conds.is_empty() {
            return Err(dim_err!("no conditions"));
        }
        if let Some(c) = conds.iter().find(|c| c.width() != w) {
            return Err(dim_err!("condition width {} vs model {w}", c.width()));
        }
        let flat: Vec<Real> = conds.iter().flat_map(|c| c.vector.iter().copied()).collect();
        let x = Tensor::new(flat, &[conds.len(), w])?;
        let tokens = x.linear(
            self.param("cross_attn/tokens/proj.weight")?,
            Some(self.param("cross_attn/tokens/proj.bias")?),
        )?;
        Ok(tokens.reshape(&[conds.len(), self.cfg.n_tokens, self.cfg.d_model])?)
    }

    /// Batched forward pass.
    ///
    /// `input` is `[B·F, 9, h, w]`, `t` holds one timestep per clip, `tokens`
    /// is `[B, n_tokens, d_model]`. Returns `[B·F, 4, h, w]`.
    pub fn forward(&self, input: &Tensor, frames: usize, t: &[usize], tokens: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        let batch = t.len();
        let expect_in = [batch * frames, INPUT_CHANNELS, cfg.height, cfg.width];
        if batch == 0 || frames == 0 || input.shape() != expect_in {
            return Err(dim_err!("input {:?}, expected {expect_in:?}", input.shape()));
        }
        if frames > cfg.t_clip_max {
            return Err(dim_err!("clip of {frames} frames exceeds t_clip_max {}", cfg.t_clip_max));
        }
        if tokens.shape() != [batch, cfg.n_tokens, cfg.d_model] {
            return Err(dim_err!(
                "tokens {:?}, expected {:?}",
                tokens.shape(),
                [batch, cfg.n_tokens, cfg.d_model]
            ));
        }
        if let Some(&bad) = t.iter().find(|&&v| v == 0 || v > cfg.timesteps) {
            return Err(Error::TimestepRange {
                t: bad,
                max: cfg.timesteps,
            });
        }
        let emb: Vec<Real> = t
            .iter()
            .flat_map(|&v| timestep_embedding(v, cfg.time_embed_dim).expect("even dim validated"))
            .collect();
        let temb = Tensor::new(emb, &[batch, cfg.time_embed_dim])?
            .linear(self.param("spatial/time/fc1.weight")?, Some(self.param("spatial/time/fc1.bias")?))?
            .silu()?
            .linear(self.param("spatial/time/fc2.weight")?, Some(self.param("spatial/time/fc2.bias")?))?
            .silu()?;
        let dims = layers::Dims {
            batch,
            frames,
            channels: cfg.base_channels,
            height: cfg.height,
            width: cfg.width,
        };
        let mut h = input.conv2d(
            self.param("input_layer/0/conv.weight")?,
            Some(self.param("input_layer/0/conv.bias")?),
        )?;
        for i in 0..cfg.n_res_blocks {
            h = layers::res_block(self, i, &h, &temb, &dims)?;
            if cfg.temporal_enabled {
                h = layers::temporal_conv(self, i, &h, &dims)?;
                h = layers::temporal_attention(self, i, &h, &dims)?;
            }
            h = layers::cross_attention(self, i, &h, tokens, &dims)?;
        }
        let out = h
            .group_norm(
                cfg.norm_groups,
                self.param("spatial/out/gn.gamma")?,
                self.param("spatial/out/gn.beta")?,
                layers::NORM_EPS,
            )?
            .silu()?
            .conv2d(
                self.param("spatial/out/conv.weight")?,
                Some(self.param("spatial/out/conv.bias")?),
            )?;
        Ok(out)
    }

    /// Temporal attention sub-block alone on features `[F, C, h, w]` of one
    /// clip (residual included).
    pub fn temporal_attention(&self, block: usize, features: &Tensor) -> Result<Tensor> {
        let dims = self.single_clip_dims(features)?;
        layers::temporal_attention(self, block, features, &dims)
    }

    /// Cross-attention sub-block alone on features `[F, C, h, w]` of one clip
    /// with tokens `[n_tokens, d_model]` (residual included).
    pub fn cross_attention(&self, block: usize, features: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let dims = self.single_clip_dims(features)?;
        if tokens.shape() != [self.cfg.n_tokens, self.cfg.d_model] {
            return Err(dim_err!(
                "tokens {:?}, expected [{}, {}]",
                tokens.shape(),
                self.cfg.n_tokens,
                self.cfg.d_model
            ));
        }
        let tokens = tokens.reshape(&[1, self.cfg.n_tokens, self.cfg.d_model])?;
        layers::cross_attention(self, block, features, &tokens, &dims)
    }

    fn single_clip_dims(&self, features: &Tensor) -> Result<layers::Dims> {
        let &[f, c, h, w] = features.shape() else {
            return Err(dim_err!("features must be [F, C, h, w], got {:?}", features.shape()));
        };
        if c != self.cfg.base_channels || f > self.cfg.t_clip_max {
            return Err(dim_err!(
                "features {:?} incompatible with {} channels, t_clip_max {}",
                features.shape(),
                self.cfg.base_channels,
                self.cfg.t_clip_max
            ));
        }
        Ok(layers::Dims {
            batch: 1,
            frames: f,
            channels: c,
            height: h,
            width: w,
        })
    }
}

/// Single-clip `v` prediction: `input9` is `[F, 9, h, w]`, `tokens` is
/// `[n_tokens, d_model]`.
pub fn denoise(model: &Model, input9: &Tensor, t: usize, tokens: &Tensor) -> Result<Prediction> {
    let cfg = model.config();
    let &[f, ..] = input9.shape() else {
        return Err(dim_err!("input must be [F, 9, h, w], got {:?}", input9.shape()));
    };
    if tokens.shape() != [cfg.n_tokens, cfg.d_model] {
        return Err(dim_err!("tokens {:?}, expected [{}, {}]", tokens.shape(), cfg.n_tokens, cfg.d_model));
    }
    let tokens = tokens.reshape(&[1, cfg.n_tokens, cfg.d_model])?;
    let out = model.forward(input9, f, &[t], &tokens)?;
    Ok(Prediction::v(LatentVideo::from_tensor(&out)?))
}

/// Anything that maps a 9-channel clip input to a `v` prediction.
pub trait VPredictor {
    fn predict_v(&self, input9: &Tensor, t: usize, cond: &SemanticCondition) -> Result<Prediction>;
}

impl VPredictor for Model {
    fn predict_v(&self, input9: &Tensor, t: usize, cond: &SemanticCondition) -> Result<Prediction> {
        atmv_tensor::no_grad(|| {
            let tokens = self.semantic_tokens(std::slice::from_ref(cond))?;
            let n = [self.cfg.n_tokens, self.cfg.d_model];
            denoise(self, input9, t, &tokens.reshape(&n)?)
        })
    }
}
