use atmv_tensor::Tensor;

use super::Model;
use crate::error::Result;
use crate::Real;

pub(super) const NORM_EPS: Real = 1e-5;

pub(super) struct Dims {
    pub batch: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// `[B·F, C, h, w]`, the layout shared by all blocks.
    fn image_shape(&self) -> [usize; 4] {
        [self.batch * self.frames, self.channels, self.height, self.width]
    }

    /// `[B, F, C, h·w]`.
    fn clip_shape(&self) -> [usize; 4] {
        [self.batch, self.frames, self.channels, self.plane()]
    }
}

fn param<'a>(m: &'a Model, group: &str, block: usize, role: &str) -> Result<&'a Tensor> {
    m.param(&format!("{group}/{block}/{role}"))
}

pub(super) fn res_block(m: &Model, i: usize, h: &Tensor, temb: &Tensor, d: &Dims) -> Result<Tensor> {
    let p = |role| param(m, "spatial", i, role);
    let groups = m.config().norm_groups;
    let time_bias = temb
        .linear(p("time.weight")?, Some(p("time.bias")?))?
        .repeat_rows(d.frames)?;
    let r = h
        .group_norm(groups, p("gn1.gamma")?, p("gn1.beta")?, NORM_EPS)?
        .silu()?
        .conv2d(p("conv1.weight")?, Some(p("conv1.bias")?))?
        .add_leading(&time_bias)?
        .group_norm(groups, p("gn2.gamma")?, p("gn2.beta")?, NORM_EPS)?
        .silu()?
        .conv2d(p("conv2.weight")?, Some(p("conv2.bias")?))?;
    Ok(h.add(&r)?)
}

/// Kernel-3 convolution along the frame axis at every spatial position.
pub(super) fn temporal_conv(m: &Model, i: usize, h: &Tensor, d: &Dims) -> Result<Tensor> {
    let p = |role| param(m, "temporal", i, role);
    let r = h
        .group_norm(m.config().norm_groups, p("gn.gamma")?, p("gn.beta")?, NORM_EPS)?
        .silu()?
        .reshape(&d.clip_shape())?
        .permute(&[0, 2, 1, 3])?
        .conv2d(p("conv.weight")?, Some(p("conv.bias")?))?
        .permute(&[0, 2, 1, 3])?
        .reshape(&d.image_shape())?;
    Ok(h.add(&r)?)
}

/// Single-head self-attention across frames at every spatial position.
pub(super) fn temporal_attention(m: &Model, i: usize, h: &Tensor, d: &Dims) -> Result<Tensor> {
    let p = |role| param(m, "temporal", i, role);
    let c = d.channels;
    let seq = h
        .reshape(&d.clip_shape())?
        .permute(&[0, 3, 1, 2])?
        .reshape(&[d.batch * d.plane(), d.frames, c])?;
    let mut x = seq.layer_norm(p("ln.gamma")?, p("ln.beta")?, NORM_EPS)?;
    if m.config().frame_position_encoding {
        x = x.add_trailing(&p("pos")?.narrow(0, 0, d.frames)?)?;
    }
    let q = x.linear(p("q.weight")?, None)?;
    let k = x.linear(p("k.weight")?, None)?;
    let v = x.linear(p("v.weight")?, None)?;
    let r = q
        .matmul_nt(&k)?
        .scale(1.0 / (c as Real).sqrt())?
        .softmax(2)?
        .matmul(&v)?
        .linear(p("out.weight")?, Some(p("out.bias")?))?
        .reshape(&[d.batch, d.plane(), d.frames, c])?
        .permute(&[0, 2, 3, 1])?
        .reshape(&d.image_shape())?;
    Ok(h.add(&r)?)
}

/// Queries from every (frame, position) feature; keys and values from the
/// clip's semantic tokens `[B, n_tokens, d_model]`.
pub(super) fn cross_attention(m: &Model, i: usize, h: &Tensor, tokens: &Tensor, d: &Dims) -> Result<Tensor> {
    let p = |role| param(m, "cross_attn", i, role);
    let c = d.channels;
    let dm = m.config().d_model;
    let x = h
        .reshape(&d.clip_shape())?
        .permute(&[0, 1, 3, 2])?
        .reshape(&[d.batch, d.frames * d.plane(), c])?
        .layer_norm(p("ln.gamma")?, p("ln.beta")?, NORM_EPS)?;
    let q = x.linear(p("q.weight")?, None)?;
    let k = tokens.linear(p("k.weight")?, None)?;
    let v = tokens.linear(p("v.weight")?, None)?;
    let r = q
        .matmul_nt(&k)?
        .scale(1.0 / (dm as Real).sqrt())?
        .softmax(2)?
        .matmul(&v)?
        .linear(p("out.weight")?, Some(p("out.bias")?))?
        .reshape(&[d.batch, d.frames, d.plane(), c])?
        .permute(&[0, 1, 3, 2])?
        .reshape(&d.image_shape())?;
    Ok(h.add(&r)?)
}
