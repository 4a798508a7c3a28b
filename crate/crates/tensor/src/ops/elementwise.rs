use crate::error::{dim_err, Result};
use crate::{Real, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        );
    }
    Ok(())
}

fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, _| vec![Some(g.to_vec()), Some(g.to_vec())],
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |g, p| {
                let ga = g.iter().zip(p[1].data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(p[0].data()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            },
        )
    }

    pub fn scale(&self, factor: Real) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            "scale",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            move |g, _| vec![Some(g.iter().map(|v| v * factor).collect())],
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::from_op(
            "silu",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            |g, p| {
                let gx = g
                    .iter()
                    .zip(p[0].data())
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![Some(gx)]
            },
        )
    }

    /// Adds `b` broadcast over the leading axes: `b.shape()` must equal the
    /// trailing `b.rank()` axes of `self` (bias on the last axis).
    pub fn add_trailing(&self, b: &Tensor) -> Result<Tensor> {
        let r = self.rank();
        if b.rank() > r || self.shape()[r - b.rank()..] != *b.shape() {
            return dim_err(
                "add_trailing",
                format!("{:?} is not a trailing suffix of {:?}", b.shape(), self.shape()),
            );
        }
        let inner = b.numel();
        let mut data = self.to_vec();
        for chunk in data.chunks_mut(inner) {
            chunk.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        Tensor::from_op(
            "add_trailing",
            data,
            self.shape().to_vec(),
            vec![self.clone(), b.clone()],
            move |g, _| {
                let mut gb = vec![0.0; inner];
                for chunk in g.chunks(inner) {
                    gb.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        )
    }

    /// Adds `b` broadcast over the trailing axes: `b.shape()` must equal the
    /// leading `b.rank()` axes of `self` (per-channel bias on `[N, C, H, W]`
    /// with `b: [N, C]`).
    pub fn add_leading(&self, b: &Tensor) -> Result<Tensor> {
        if b.rank() > self.rank() || self.shape()[..b.rank()] != *b.shape() {
            return dim_err(
                "add_leading",
                format!("{:?} is not a leading prefix of {:?}", b.shape(), self.shape()),
            );
        }
        let inner = self.numel() / b.numel();
        let mut data = self.to_vec();
        for (chunk, v) in data.chunks_mut(inner).zip(b.data()) {
            chunk.iter_mut().for_each(|x| *x += v);
        }
        Tensor::from_op(
            "add_leading",
            data,
            self.shape().to_vec(),
            vec![self.clone(), b.clone()],
            move |g, _| {
                let gb = g.chunks(inner).map(|c| c.iter().sum()).collect();
                vec![Some(g.to_vec()), Some(gb)]
            },
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: Real = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![s], vec![], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        let s: Real = self.data().iter().sum::<Real>() / n as Real;
        Tensor::from_op("mean", vec![s], vec![], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0] / n as Real; n])]
        })
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(target)?;
        d.mul(&d)?.mean()
    }
}
