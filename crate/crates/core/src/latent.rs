//! Latent clips and network predictions.

use atmv_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentFrame, LATENT_CHANNELS};
use crate::error::{dim_err, Result};
use crate::Real;

/// `frames × 4 × h × w` latent clip, frame-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<Real>,
}

impl LatentVideo {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<Real>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(dim_err!("empty latent clip {frames}×4×{height}×{width}"));
        }
        if data.len() != frames * LATENT_CHANNELS * height * width {
            return Err(dim_err!(
                "latent clip {frames}×4×{height}×{width} needs {} values, got {}",
                frames * LATENT_CHANNELS * height * width,
                data.len()
            ));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * LATENT_CHANNELS * height * width],
        }
    }

    pub fn from_frames(frames: &[LatentFrame]) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(dim_err!("no frames"));
        };
        let mut data = Vec::with_capacity(frames.len() * first.coeffs.len());
        for f in frames {
            if (f.height, f.width) != (first.height, first.width) {
                return Err(dim_err!(
                    "frame extents {}×{} vs {}×{}",
                    f.height,
                    f.width,
                    first.height,
                    first.width
                ));
            }
            data.extend_from_slice(&f.coeffs);
        }
        Self::new(frames.len(), first.height, first.width, data)
    }

    pub fn frame_len(&self) -> usize {
        LATENT_CHANNELS * self.height * self.width
    }

    pub fn frame_data(&self, i: usize) -> &[Real] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_data_mut(&mut self, i: usize) -> &mut [Real] {
        let n = self.frame_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn frame(&self, i: usize) -> LatentFrame {
        LatentFrame {
            height: self.height,
            width: self.width,
            coeffs: self.frame_data(i).to_vec(),
        }
    }

    pub fn to_frames(&self) -> Vec<LatentFrame> {
        (0..self.frames).map(|i| self.frame(i)).collect()
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, LATENT_CHANNELS, self.height, self.width]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &self.shape()).expect("shape checked at construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [f, c, h, w] if c == LATENT_CHANNELS => Self::new(f, h, w, t.to_vec()),
            _ => Err(dim_err!("expected [F, 4, h, w], got {:?}", t.shape())),
        }
    }

    pub fn same_shape(&self, other: &LatentVideo) -> bool {
        self.shape() == other.shape()
    }

    /// Returns a copy with `data` replaced; lengths must agree.
    pub fn with_data(&self, data: Vec<Real>) -> Result<Self> {
        Self::new(self.frames, self.height, self.width, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    V,
    Epsilon,
    X0,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub kind: PredictionKind,
    pub value: LatentVideo,
}

impl Prediction {
    pub fn v(value: LatentVideo) -> Self {
        Self {
            kind: PredictionKind::V,
            value,
        }
    }
}
