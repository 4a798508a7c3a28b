use crate::error::{dim_err, Result};
use crate::gemm::gemm;
use crate::{Real, Tensor};

/// Batched product with an optionally transposed right operand.
/// Shapes: a `[B, m, k]`, b `[B, k, n]` (or `[B, n, k]` when `trans_b`).
fn batched(
    a: &[Real],
    b: &[Real],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) -> Vec<Real> {
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a[i * m * k..(i + 1) * m * k],
            false,
            &b[i * k * n..(i + 1) * k * n],
            trans_b,
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    out
}

impl Tensor {
    /// Matrix product `[m, k] × [k, n]`, or batched `[B, m, k] × [B, k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_impl(other, false)
    }

    /// `self × otherᵀ` over the last two axes: `[.., m, k] × [.., n, k]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (sa, sb) = (self.shape(), other.shape());
        let (batch, m, k, kb, n) = match (sa.len(), sb.len()) {
            (2, 2) if trans_b => (1, sa[0], sa[1], sb[1], sb[0]),
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] && trans_b => (sa[0], sa[1], sa[2], sb[2], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return dim_err(op, format!("unsupported operand shapes {sa:?} × {sb:?}")),
        };
        if k != kb {
            return dim_err(op, format!("inner extents differ: {sa:?} × {sb:?}"));
        }
        let data = batched(self.data(), other.data(), batch, m, k, n, trans_b);
        let shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Tensor::from_op(
            op,
            data,
            shape,
            vec![self.clone(), other.clone()],
            move |g, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &a[i * m * k..(i + 1) * m * k];
                    let bi = &b[i * k * n..(i + 1) * k * n];
                    let gai = &mut ga[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // C = A Bᵀ, B stored [n, k]: dA = dC B, dB = dCᵀ A
                        gemm(m, n, k, gi, false, bi, false, 0.0, gai);
                        gemm(n, m, k, gi, true, ai, false, 0.0, gbi);
                    } else {
                        // dA = dC Bᵀ, dB = Aᵀ dC
                        gemm(m, n, k, gi, false, bi, true, 0.0, gai);
                        gemm(k, m, n, ai, true, gi, false, 0.0, gbi);
                    }
                }
                vec![Some(ga), Some(gb)]
            },
        )
    }

    /// Affine map on the last axis: `x [.., in] · w [in, out] + b [out]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        if w.rank() != 2 || self.rank() == 0 || *self.shape().last().unwrap() != w.shape()[0] {
            return dim_err(
                "linear",
                format!("input {:?} incompatible with weight {:?}", self.shape(), w.shape()),
            );
        }
        let in_dim = w.shape()[0];
        let out_dim = w.shape()[1];
        let rows = self.numel() / in_dim;
        let flat = self.reshape(&[rows, in_dim])?;
        let mut y = flat.matmul(w)?;
        if let Some(b) = b {
            y = y.add_trailing(b)?;
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        y.reshape(&shape)
    }
}
