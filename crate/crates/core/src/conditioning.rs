//! Image conditioning: frame mask `F_m`, condition latent `F_i`, the 9-channel
//! model input, semantic-condition dropout and classifier-free guidance.

use std::collections::{BTreeMap, BTreeSet};

use atmv_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{LatentFrame, LATENT_CHANNELS};
use crate::error::{config_err, dim_err, Result};
use crate::latent::{LatentVideo, Prediction};
use crate::Real;

/// Channels of the assembled model input: `[xₜ(4) | F_m(1) | F_i(4)]`.
pub const INPUT_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMask {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub conditioned: BTreeSet<usize>,
}

impl FrameMask {
    pub fn is_conditioned(&self, frame: usize) -> bool {
        self.conditioned.contains(&frame)
    }

    /// Dense `frames × 1 × h × w` mask.
    pub fn data(&self) -> Vec<Real> {
        let plane = self.height * self.width;
        (0..self.frames)
            .flat_map(|f| {
                let v = if self.is_conditioned(f) { 1.0 } else { 0.0 };
                std::iter::repeat(v).take(plane)
            })
            .collect()
    }
}

pub fn build_frame_mask(
    frames: usize,
    conditioned: &BTreeSet<usize>,
    height: usize,
    width: usize,
) -> Result<FrameMask> {
    if let Some(&i) = conditioned.iter().find(|&&i| i >= frames) {
        return Err(dim_err!("conditioned frame {i} outside clip of {frames}"));
    }
    if conditioned.len() >= frames {
        return Err(config_err!(
            "all {frames} frames conditioned; nothing left to generate"
        ));
    }
    Ok(FrameMask {
        frames,
        height,
        width,
        conditioned: conditioned.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageConditionLatent {
    pub latent: LatentVideo,
    pub conditioned: BTreeSet<usize>,
}

pub fn build_image_condition_latent(
    latents: &BTreeMap<usize, LatentFrame>,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<ImageConditionLatent> {
    let mut latent = LatentVideo::zeros(frames, height, width);
    for (&i, f) in latents {
        if i >= frames {
            return Err(dim_err!("condition frame {i} outside clip of {frames}"));
        }
        if (f.height, f.width) != (height, width) {
            return Err(dim_err!(
                "condition latent {}×{} vs clip {height}×{width}",
                f.height,
                f.width
            ));
        }
        latent.frame_data_mut(i).copy_from_slice(&f.coeffs);
    }
    Ok(ImageConditionLatent {
        latent,
        conditioned: latents.keys().copied().collect(),
    })
}

/// Builds `F_m` and `F_i` from a map of reference latents.
pub fn build_conditions(
    latents: &BTreeMap<usize, LatentFrame>,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<(FrameMask, ImageConditionLatent)> {
    let set = latents.keys().copied().collect();
    let mask = build_frame_mask(frames, &set, height, width)?;
    let fi = build_image_condition_latent(latents, frames, height, width)?;
    Ok((mask, fi))
}

/// Concatenates along channels into `frames × 9 × h × w`. No arithmetic.
pub fn assemble_model_input(
    x_t: &LatentVideo,
    mask: &FrameMask,
    fi: &ImageConditionLatent,
) -> Result<Tensor> {
    let (f, h, w) = (x_t.frames, x_t.height, x_t.width);
    if (mask.frames, mask.height, mask.width) != (f, h, w) || !fi.latent.same_shape(x_t) {
        return Err(dim_err!(
            "assemble: xₜ {:?}, mask {}×1×{}×{}, F_i {:?}",
            x_t.shape(),
            mask.frames,
            mask.height,
            mask.width,
            fi.latent.shape()
        ));
    }
    let plane = h * w;
    let lat = LATENT_CHANNELS * plane;
    let mut out = Vec::with_capacity(f * INPUT_CHANNELS * plane);
    for i in 0..f {
        out.extend_from_slice(x_t.frame_data(i));
        let m = if mask.is_conditioned(i) { 1.0 } else { 0.0 };
        out.extend(std::iter::repeat(m).take(plane));
        out.extend_from_slice(&fi.latent.data[i * lat..(i + 1) * lat]);
    }
    Ok(Tensor::new(out, &[f, INPUT_CHANNELS, h, w])?)
}

/// Splits an assembled input back into `(xₜ, mask plane data, F_i)`.
pub fn disassemble_model_input(input: &Tensor) -> Result<(LatentVideo, Vec<Real>, LatentVideo)> {
    let &[f, c, h, w] = input.shape() else {
        return Err(dim_err!("expected rank 4 input, got {:?}", input.shape()));
    };
    if c != INPUT_CHANNELS {
        return Err(dim_err!("expected {INPUT_CHANNELS} channels, got {c}"));
    }
    let plane = h * w;
    let lat = LATENT_CHANNELS * plane;
    let (mut x, mut m, mut fi) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in input.data().chunks(INPUT_CHANNELS * plane) {
        x.extend_from_slice(&chunk[..lat]);
        m.extend_from_slice(&chunk[lat..lat + plane]);
        fi.extend_from_slice(&chunk[lat + plane..]);
    }
    Ok((
        LatentVideo::new(f, h, w, x)?,
        m,
        LatentVideo::new(f, h, w, fi)?,
    ))
}

/// Scene-level condition vector standing in for image/text embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticCondition {
    pub vector: Vec<Real>,
    pub is_null: bool,
}

impl SemanticCondition {
    pub fn new(vector: Vec<Real>) -> Self {
        Self {
            vector,
            is_null: false,
        }
    }

    pub fn null(width: usize) -> Self {
        Self {
            vector: vec![0.0; width],
            is_null: true,
        }
    }

    pub fn width(&self) -> usize {
        self.vector.len()
    }
}

/// Returns the null condition with probability `p_drop`.
///
/// One uniform draw is consumed per call regardless of `p_drop`, so the rest
/// of the stream does not depend on the drop rate.
pub fn drop_condition(cond: &SemanticCondition, p_drop: f64, rng: &mut Rng) -> SemanticCondition {
    if rng.uniform() < p_drop {
        SemanticCondition::null(cond.width())
    } else {
        cond.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub w: f64,
    #[serde(default)]
    pub rescale_phi: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 1.0,
            rescale_phi: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(config_err!("guidance scale must be ≥ 0, got {}", self.w));
        }
        if let Some(phi) = self.rescale_phi {
            if !(0.0..=1.0).contains(&phi) {
                return Err(config_err!("rescale_phi must be in [0, 1], got {phi}"));
            }
        }
        Ok(())
    }
}

fn std_dev(x: &[Real]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    (x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `out = u + w·(c − u)`, optionally rescaled per frame towards the standard
/// deviation of the conditional prediction.
pub fn cfg_combine(
    uncond: &Prediction,
    cond: &Prediction,
    g: &GuidanceConfig,
) -> Result<Prediction> {
    if uncond.kind != cond.kind || !uncond.value.same_shape(&cond.value) {
        return Err(dim_err!(
            "cfg branches differ: {:?} {:?} vs {:?} {:?}",
            uncond.kind,
            uncond.value.shape(),
            cond.kind,
            cond.value.shape()
        ));
    }
    let w = g.w as Real;
    let mut out: Vec<Real> = uncond
        .value
        .data
        .iter()
        .zip(&cond.value.data)
        .map(|(&u, &c)| u + w * (c - u))
        .collect();
    if let Some(phi) = g.rescale_phi {
        let n = cond.value.frame_len();
        for (o, c) in out.chunks_mut(n).zip(cond.value.data.chunks(n)) {
            let so = std_dev(o);
            if so > 0.0 {
                let factor = (phi * std_dev(c) / so + (1.0 - phi)) as Real;
                o.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    Ok(Prediction {
        kind: cond.kind,
        value: cond.value.with_data(out)?,
    })
}
