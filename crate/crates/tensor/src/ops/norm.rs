use std::sync::Arc;

use super::split_at_axis;
use crate::error::{dim_err, Result, TensorError};
use crate::{Real, Tensor};

impl Tensor {
    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return dim_err("softmax", format!("axis {axis} for rank {}", self.rank()));
        }
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| x[idx(j)]).fold(Real::NEG_INFINITY, Real::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    y[idx(j)] /= total;
                }
            }
        }
        let saved = Arc::new(y.clone());
        Tensor::from_op(
            "softmax",
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| {
                let y = &saved;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: Real = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            },
        )
    }

    /// Group normalization of `[N, C, ...]` with per-channel affine
    /// `gamma`, `beta` of shape `[C]`. Statistics are taken per sample and
    /// group over the channel slice and all trailing positions.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Tensor,
        beta: &Tensor,
        eps: Real,
    ) -> Result<Tensor> {
        if self.rank() < 2 {
            return dim_err("group_norm", format!("rank {} < 2", self.rank()));
        }
        let c = self.shape()[1];
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Config {
                op: "group_norm",
                detail: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return dim_err("group_norm", "gamma/beta must be [C]");
        }
        let spatial: usize = self.shape()[2..].iter().product();
        let seg = c / groups * spatial;
        let channel_of = move |k: usize| (k / seg) % groups * (c / groups) + (k % seg) / spatial;
        normalize("group_norm", self, gamma, beta, eps, seg, channel_of)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: Real) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return dim_err("layer_norm", "gamma/beta must match the last axis");
        }
        normalize("layer_norm", self, gamma, beta, eps, d, move |k| k % d)
    }
}

/// Shared normalization kernel over contiguous segments of length `seg`;
/// `channel_of(flat_index)` selects the affine parameter for each element.
fn normalize(
    op: &'static str,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: Real,
    seg: usize,
    channel_of: impl Fn(usize) -> usize + Send + Sync + 'static,
) -> Result<Tensor> {
    let xs = x.data();
    let nseg = xs.len() / seg;
    let mut xhat = vec![0.0; xs.len()];
    let mut inv_std = vec![0.0; nseg];
    for s in 0..nseg {
        let chunk = &xs[s * seg..(s + 1) * seg];
        let mean = chunk.iter().sum::<Real>() / seg as Real;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / seg as Real;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[s] = inv;
        for (o, v) in xhat[s * seg..(s + 1) * seg].iter_mut().zip(chunk) {
            *o = (v - mean) * inv;
        }
    }
    let (gm, bt) = (gamma.data(), beta.data());
    let y: Vec<Real> = xhat
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            let ch = channel_of(k);
            h * gm[ch] + bt[ch]
        })
        .collect();
    let nch = gm.len();
    Tensor::from_op(
        op,
        y,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g, p| {
            let gm = p[1].data();
            let mut gx = vec![0.0; xhat.len()];
            let mut ggamma = vec![0.0; nch];
            let mut gbeta = vec![0.0; nch];
            let mut dxhat = vec![0.0; seg];
            for s in 0..nseg {
                let base = s * seg;
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..seg {
                    let k = base + j;
                    let ch = channel_of(k);
                    ggamma[ch] += g[k] * xhat[k];
                    gbeta[ch] += g[k];
                    let d = g[k] * gm[ch];
                    dxhat[j] = d;
                    mean_d += d;
                    mean_dx += d * xhat[k];
                }
                mean_d /= seg as Real;
                mean_dx /= seg as Real;
                for j in 0..seg {
                    let k = base + j;
                    gx[k] = inv_std[s] * (dxhat[j] - mean_d - xhat[k] * mean_dx);
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        },
    )
}
