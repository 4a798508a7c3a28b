use super::{split_at_axis, strides};
use crate::error::{dim_err, Result};
use crate::tensor::check_shape;
use crate::{Real, Tensor};

/// Gather indices for a permutation: `out[i] = in[src[i]]`.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut src = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        src.push(
            idx.iter()
                .zip(axes)
                .map(|(&i, &a)| i * in_strides[a])
                .sum(),
        );
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    src
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape("reshape", shape, self.numel())?;
        Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return dim_err("permute", format!("{axes:?} is not a permutation of rank {r}"));
        }
        let src = permute_index(self.shape(), axes);
        let data = src.iter().map(|&i| self.data()[i]).collect();
        let shape = axes.iter().map(|&a| self.shape()[a]).collect();
        Tensor::from_op("permute", data, shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for (gv, &i) in g.iter().zip(&src) {
                gx[i] = *gv;
            }
            vec![Some(gx)]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let r = first.rank();
        if axis >= r {
            return dim_err("concat", format!("axis {axis} for rank {r}"));
        }
        for p in parts {
            let ok = p.rank() == r
                && (0..r).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return dim_err(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
                );
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Tensor::from_op(
            "concat",
            data,
            shape,
            parts.iter().map(|&p| p.clone()).collect(),
            move |g, _| {
                let mut grads: Vec<Vec<Real>> =
                    widths.iter().map(|w| Vec::with_capacity(outer * w)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        gp.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return dim_err(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape()),
            );
        }
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let full = self.numel();
        Tensor::from_op("narrow", data, shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; full];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Repeats each slice along axis 0 `times` times consecutively:
    /// `[B, ...] -> [B·times, ...]`, row `b` becoming rows `b·times..(b+1)·times`.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor> {
        if self.rank() == 0 || times == 0 {
            return dim_err("repeat_rows", "needs rank ≥ 1 and times ≥ 1");
        }
        let row = self.numel() / self.shape()[0];
        let mut data = Vec::with_capacity(self.numel() * times);
        for r in self.data().chunks(row) {
            for _ in 0..times {
                data.extend_from_slice(r);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] *= times;
        Tensor::from_op("repeat_rows", data, shape, vec![self.clone()], move |g, _| {
            let gx = g
                .chunks(row * times)
                .flat_map(|block| {
                    let mut acc = vec![0.0; row];
                    for rep in block.chunks(row) {
                        acc.iter_mut().zip(rep).for_each(|(a, v)| *a += v);
                    }
                    acc
                })
                .collect();
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::Tensor;

    #[test]
    fn permute_transposes() {
        let x = Tensor::new((0..6).map(|v| v as _).collect(), &[2, 3]).unwrap();
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = Tensor::new((0..8).map(|v| v as _).collect(), &[2, 2, 2]).unwrap();
        let b = Tensor::new((8..12).map(|v| v as _).collect(), &[2, 1, 2]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.narrow(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.narrow(1, 2, 1).unwrap().data(), b.data());
    }

    #[test]
    fn repeat_rows_gradient_sums_copies() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = x.repeat_rows(3).unwrap();
        assert_eq!(y.shape(), &[6, 2]);
        assert_eq!(&y.data()[..6], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0; 4]);
    }
}
