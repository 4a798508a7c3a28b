use crate::error::{dim_err, Result, TensorError};
use crate::gemm::gemm;
use crate::{Real, Tensor};

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl Geom {
    fn ck(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `[Cin, H, W]` image into `[Cin·kh·kw, H·W]` patch columns with
/// zero padding of `k/2` on each side.
fn im2col(x: &[Real], g: Geom, cols: &mut [Real]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = g.hw();
    for ci in 0..g.cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * hw..][..hw];
                for y in 0..g.h {
                    let dst = &mut row[y * g.w..(y + 1) * g.w];
                    let sy = y as isize + ki as isize - ph as isize;
                    if sy < 0 || sy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let dx = kj as isize - pw as isize;
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= g.w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(cols: &[Real], g: Geom, x: &mut [Real]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = g.hw();
    for ci in 0..g.cin {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * hw..][..hw];
                for y in 0..g.h {
                    let sy = y as isize + ki as isize - ph as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let src = &row[y * g.w..(y + 1) * g.w];
                    let dst = &mut plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    let dx = kj as isize - pw as isize;
                    for (x, v) in src.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < g.w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation with "same" zero padding.
    ///
    /// `self` is `[N, Cin, H, W]` (or a single `[Cin, H, W]` image), `kernel`
    /// is `[Cout, Cin, kh, kw]` with odd `kh`, `kw`, and `bias` is `[Cout]`.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let single = self.rank() == 3;
        let xs = match self.rank() {
            3 => [1, self.shape()[0], self.shape()[1], self.shape()[2]],
            4 => [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]],
            _ => return dim_err("conv2d", format!("input rank {} (want 3 or 4)", self.rank())),
        };
        if kernel.rank() != 4 || kernel.shape()[1] != xs[1] {
            return dim_err(
                "conv2d",
                format!("kernel {:?} incompatible with input {:?}", kernel.shape(), self.shape()),
            );
        }
        let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Config {
                op: "conv2d",
                detail: format!("kernel extent {kh}×{kw} must be odd for same padding"),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return dim_err("conv2d", format!("bias {:?}, want [{cout}]", b.shape()));
            }
        }
        let n = xs[0];
        let g = Geom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            kh,
            kw,
        };
        let (ck, hw) = (g.ck(), g.hw());
        let pointwise = kh == 1 && kw == 1;

        let mut out = vec![0.0; n * cout * hw];
        let mut cols = vec![0.0; if pointwise { 0 } else { ck * hw }];
        for i in 0..n {
            let xi = &self.data()[i * g.cin * hw..(i + 1) * g.cin * hw];
            let src: &[Real] = if pointwise {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            let oi = &mut out[i * cout * hw..(i + 1) * cout * hw];
            gemm(cout, ck, hw, kernel.data(), false, src, false, 0.0, oi);
            if let Some(b) = bias {
                for (plane, bv) in oi.chunks_mut(hw).zip(b.data()) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }

        let shape = if single {
            vec![cout, g.h, g.w]
        } else {
            vec![n, cout, g.h, g.w]
        };
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op("conv2d", out, shape, parents, move |gout, p| {
            let (x, k) = (p[0].data(), p[1].data());
            let need_x = p[0].requires_grad();
            let mut gx = vec![0.0; if need_x { x.len() } else { 0 }];
            let mut gk = vec![0.0; k.len()];
            let mut cols = vec![0.0; if pointwise { 0 } else { ck * hw }];
            let mut gcols = vec![0.0; ck * hw];
            for i in 0..n {
                let xi = &x[i * g.cin * hw..(i + 1) * g.cin * hw];
                let gi = &gout[i * cout * hw..(i + 1) * cout * hw];
                let src: &[Real] = if pointwise {
                    xi
                } else {
                    im2col(xi, g, &mut cols);
                    &cols
                };
                // dK += dOut · colsᵀ
                gemm(cout, hw, ck, gi, false, src, true, 1.0, &mut gk);
                if need_x {
                    // dcols = Kᵀ · dOut
                    let gxi = &mut gx[i * g.cin * hw..(i + 1) * g.cin * hw];
                    if pointwise {
                        gemm(ck, cout, hw, k, true, gi, false, 0.0, gxi);
                    } else {
                        gemm(ck, cout, hw, k, true, gi, false, 0.0, &mut gcols);
                        col2im(&gcols, g, gxi);
                    }
                }
            }
            let mut grads = vec![if need_x { Some(gx) } else { None }, Some(gk)];
            if has_bias {
                let mut gb = vec![0.0; cout];
                for i in 0..n {
                    let gi = &gout[i * cout * hw..(i + 1) * cout * hw];
                    for (acc, plane) in gb.iter_mut().zip(gi.chunks(hw)) {
                        *acc += plane.iter().sum::<Real>();
                    }
                }
                grads.push(Some(gb));
            }
            grads
        })
    }
}
