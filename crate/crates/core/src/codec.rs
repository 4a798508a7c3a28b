//! Exactly invertible image ↔ latent codec.
//!
//! A single-level orthonormal Haar transform maps a `1×H×W` grayscale frame
//! to a `4×(H/2)×(W/2)` latent with channels `[LL, LH, HL, HH]`. For each 2×2
//! block `(a b; c d)`:
//!
//! ```text
//! LL = (a + b + c + d) / 2     LH = (a − b + c − d) / 2
//! HL = (a + b − c − d) / 2     HH = (a − b − c + d) / 2
//! ```
//!
//! The transform is its own inverse up to the block reshuffle and preserves
//! the L2 norm, so fidelity metrics measured after decoding see only what the
//! diffusion model changed.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::Real;

pub const LATENT_CHANNELS: usize = 4;

/// Grayscale frame, row-major, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Real>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<Real>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(dim_err!(
                "frame {height}×{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> Real {
        self.pixels[y * self.width + x]
    }
}

/// `4×h×w` Haar coefficients, channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFrame {
    pub height: usize,
    pub width: usize,
    pub coeffs: Vec<Real>,
}

impl LatentFrame {
    pub fn new(height: usize, width: usize, coeffs: Vec<Real>) -> Result<Self> {
        if coeffs.len() != LATENT_CHANNELS * height * width {
            return Err(dim_err!(
                "latent 4×{height}×{width} needs {} values, got {}",
                LATENT_CHANNELS * height * width,
                coeffs.len()
            ));
        }
        Ok(Self {
            height,
            width,
            coeffs,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            coeffs: vec![0.0; LATENT_CHANNELS * height * width],
        }
    }

    pub fn channel(&self, c: usize) -> &[Real] {
        let n = self.height * self.width;
        &self.coeffs[c * n..(c + 1) * n]
    }

    /// Multiplies every coefficient by `factor`.
    pub fn scaled(&self, factor: Real) -> LatentFrame {
        LatentFrame {
            height: self.height,
            width: self.width,
            coeffs: self.coeffs.iter().map(|v| v * factor).collect(),
        }
    }
}

pub fn encode(frame: &Frame) -> Result<LatentFrame> {
    let (h, w) = (frame.height, frame.width);
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(dim_err!("encode needs even, nonzero extents, got {h}×{w}"));
    }
    let (lh, lw) = (h / 2, w / 2);
    let n = lh * lw;
    let mut coeffs = vec![0.0; LATENT_CHANNELS * n];
    for i in 0..lh {
        for j in 0..lw {
            let a = frame.at(2 * i, 2 * j);
            let b = frame.at(2 * i, 2 * j + 1);
            let c = frame.at(2 * i + 1, 2 * j);
            let d = frame.at(2 * i + 1, 2 * j + 1);
            let k = i * lw + j;
            coeffs[k] = (a + b + c + d) * 0.5;
            coeffs[n + k] = (a - b + c - d) * 0.5;
            coeffs[2 * n + k] = (a + b - c - d) * 0.5;
            coeffs[3 * n + k] = (a - b - c + d) * 0.5;
        }
    }
    Ok(LatentFrame {
        height: lh,
        width: lw,
        coeffs,
    })
}

/// Inverse of [`encode`]. The result is not clamped.
pub fn decode(latent: &LatentFrame) -> Frame {
    let (lh, lw) = (latent.height, latent.width);
    let n = lh * lw;
    let w = 2 * lw;
    let mut pixels = vec![0.0; 4 * n];
    for i in 0..lh {
        for j in 0..lw {
            let k = i * lw + j;
            let (ll, lhc, hl, hh) = (
                latent.coeffs[k],
                latent.coeffs[n + k],
                latent.coeffs[2 * n + k],
                latent.coeffs[3 * n + k],
            );
            pixels[2 * i * w + 2 * j] = (ll + lhc + hl + hh) * 0.5;
            pixels[2 * i * w + 2 * j + 1] = (ll - lhc + hl - hh) * 0.5;
            pixels[(2 * i + 1) * w + 2 * j] = (ll + lhc - hl - hh) * 0.5;
            pixels[(2 * i + 1) * w + 2 * j + 1] = (ll - lhc - hl + hh) * 0.5;
        }
    }
    Frame {
        height: 2 * lh,
        width: w,
        pixels,
    }
}
