//! Plain f64 re-implementation of the denoiser forward pass for a single
//! clip, written from the layer definitions with explicit loops.

use std::collections::BTreeMap;

use atmv_core::denoiser::DenoiserConfig;

pub type Params = BTreeMap<String, Vec<f64>>;

const EPS: f64 = 1e-5;

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// `[n, cin, h, w]` ⋆ `[cout, cin, kh, kw]`, zero padding `k/2`.
#[allow(clippy::too_many_arguments)]
fn conv(x: &[f64], n: usize, cin: usize, h: usize, w: usize, k: &[f64], cout: usize, kh: usize, kw: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * cout * h * w];
    for s in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b[o];
                    for i in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = y as isize + ky as isize - (kh / 2) as isize;
                                let sx = xx as isize + kx as isize - (kw / 2) as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += k[((o * cin + i) * kh + ky) * kw + kx]
                                    * x[((s * cin + i) * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[((s * cout + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn group_norm(x: &[f64], n: usize, c: usize, plane: usize, groups: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let cg = c / groups;
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for g in 0..groups {
            let idx = |ci: usize, p: usize| (s * c + g * cg + ci) * plane + p;
            let count = (cg * plane) as f64;
            let mut mean = 0.0;
            for ci in 0..cg {
                for p in 0..plane {
                    mean += x[idx(ci, p)];
                }
            }
            mean /= count;
            let mut var = 0.0;
            for ci in 0..cg {
                for p in 0..plane {
                    var += (x[idx(ci, p)] - mean).powi(2);
                }
            }
            var /= count;
            let inv = 1.0 / (var + EPS).sqrt();
            for ci in 0..cg {
                for p in 0..plane {
                    let ch = g * cg + ci;
                    out[idx(ci, p)] = (x[idx(ci, p)] - mean) * inv * gamma[ch] + beta[ch];
                }
            }
        }
    }
    out
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gamma[i] + beta[i])
        .collect()
}

/// `x[in] · W[in, out] (+ b)`.
fn vecmat(x: &[f64], wt: &[f64], out: usize, b: Option<&[f64]>) -> Vec<f64> {
    (0..out)
        .map(|j| {
            let dot: f64 = x.iter().enumerate().map(|(i, v)| v * wt[i * out + j]).sum();
            dot + b.map_or(0.0, |b| b[j])
        })
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward of one clip: `input` is `[F, 9, h, w]`, output `[F, 4, h, w]`.
pub fn forward(cfg: &DenoiserConfig, p: &Params, input: &[f64], frames: usize, t: usize, cond: &[f64]) -> Vec<f64> {
    let g = |name: &str| p.get(name).unwrap_or_else(|| panic!("missing {name}")).as_slice();
    let (c, hh, ww) = (cfg.base_channels, cfg.height, cfg.width);
    let plane = hh * ww;
    let (d, nt) = (cfg.d_model, cfg.n_tokens);
    let groups = cfg.norm_groups;

    let half = cfg.time_embed_dim / 2;
    let emb: Vec<f64> = (0..half)
        .flat_map(|i| {
            let f = 10000f64.powf(-(i as f64) / half as f64);
            let a = t as f64 * f;
            [a.sin(), a.cos()]
        })
        .collect();
    let th = cfg.time_hidden_dim;
    let mut temb = vecmat(&emb, g("spatial/time/fc1.weight"), th, Some(g("spatial/time/fc1.bias")));
    temb.iter_mut().for_each(|v| *v = silu(*v));
    temb = vecmat(&temb, g("spatial/time/fc2.weight"), th, Some(g("spatial/time/fc2.bias")));
    temb.iter_mut().for_each(|v| *v = silu(*v));

    let flat_tokens = vecmat(cond, g("cross_attn/tokens/proj.weight"), nt * d, Some(g("cross_attn/tokens/proj.bias")));
    let tokens: Vec<&[f64]> = flat_tokens.chunks(d).collect();

    let at = |f: usize, ch: usize, s: usize| (f * c + ch) * plane + s;
    let mut h = conv(input, frames, 9, hh, ww, g("input_layer/0/conv.weight"), c, 3, 3, g("input_layer/0/conv.bias"));
    for i in 0..cfg.n_res_blocks {
        let sp = |r: &str| format!("spatial/{i}/{r}");
        let mut r = group_norm(&h, frames, c, plane, groups, g(&sp("gn1.gamma")), g(&sp("gn1.beta")));
        r.iter_mut().for_each(|v| *v = silu(*v));
        r = conv(&r, frames, c, hh, ww, g(&sp("conv1.weight")), c, 3, 3, g(&sp("conv1.bias")));
        let bias = vecmat(&temb, g(&sp("time.weight")), c, Some(g(&sp("time.bias"))));
        for f in 0..frames {
            for ch in 0..c {
                for s in 0..plane {
                    r[at(f, ch, s)] += bias[ch];
                }
            }
        }
        r = group_norm(&r, frames, c, plane, groups, g(&sp("gn2.gamma")), g(&sp("gn2.beta")));
        r.iter_mut().for_each(|v| *v = silu(*v));
        r = conv(&r, frames, c, hh, ww, g(&sp("conv2.weight")), c, 3, 3, g(&sp("conv2.bias")));
        h.iter_mut().zip(&r).for_each(|(a, b)| *a += b);

        if cfg.temporal_enabled {
            let tp = |r: &str| format!("temporal/{i}/{r}");
            // Temporal convolution: per clip [F, C, S] normalized over (C/G, S).
            let mut n = group_norm(&h, frames, c, plane, groups, g(&tp("gn.gamma")), g(&tp("gn.beta")));
            n.iter_mut().for_each(|v| *v = silu(*v));
            let (kw, kb) = (g(&tp("conv.weight")), g(&tp("conv.bias")));
            let mut r = vec![0.0; h.len()];
            for f in 0..frames {
                for o in 0..c {
                    for s in 0..plane {
                        let mut acc = kb[o];
                        for ci in 0..c {
                            for kf in 0..3 {
                                let sf = f as isize + kf as isize - 1;
                                if sf >= 0 && (sf as usize) < frames {
                                    acc += kw[(o * c + ci) * 3 + kf] * n[at(sf as usize, ci, s)];
                                }
                            }
                        }
                        r[at(f, o, s)] = acc;
                    }
                }
            }
            h.iter_mut().zip(&r).for_each(|(a, b)| *a += b);

            // Attention across frames at each position.
            let mut r = vec![0.0; h.len()];
            for s in 0..plane {
                let xs: Vec<Vec<f64>> = (0..frames)
                    .map(|f| {
                        let row: Vec<f64> = (0..c).map(|ch| h[at(f, ch, s)]).collect();
                        let mut x = layer_norm(&row, g(&tp("ln.gamma")), g(&tp("ln.beta")));
                        if cfg.frame_position_encoding {
                            let pos = g(&tp("pos"));
                            x.iter_mut().enumerate().for_each(|(ch, v)| *v += pos[f * c + ch]);
                        }
                        x
                    })
                    .collect();
                let q: Vec<Vec<f64>> = xs.iter().map(|x| vecmat(x, g(&tp("q.weight")), c, None)).collect();
                let k: Vec<Vec<f64>> = xs.iter().map(|x| vecmat(x, g(&tp("k.weight")), c, None)).collect();
                let v: Vec<Vec<f64>> = xs.iter().map(|x| vecmat(x, g(&tp("v.weight")), c, None)).collect();
                for f in 0..frames {
                    let scores: Vec<f64> = k.iter().map(|kj| dot(&q[f], kj) / (c as f64).sqrt()).collect();
                    let a = softmax(&scores);
                    let o: Vec<f64> = (0..c).map(|ch| (0..frames).map(|j| a[j] * v[j][ch]).sum()).collect();
                    let y = vecmat(&o, g(&tp("out.weight")), c, Some(g(&tp("out.bias"))));
                    for ch in 0..c {
                        r[at(f, ch, s)] = y[ch];
                    }
                }
            }
            h.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        }

        let xp = |r: &str| format!("cross_attn/{i}/{r}");
        let k: Vec<Vec<f64>> = tokens.iter().map(|tk| vecmat(tk, g(&xp("k.weight")), d, None)).collect();
        let v: Vec<Vec<f64>> = tokens.iter().map(|tk| vecmat(tk, g(&xp("v.weight")), d, None)).collect();
        let mut r = vec![0.0; h.len()];
        for f in 0..frames {
            for s in 0..plane {
                let row: Vec<f64> = (0..c).map(|ch| h[at(f, ch, s)]).collect();
                let x = layer_norm(&row, g(&xp("ln.gamma")), g(&xp("ln.beta")));
                let q = vecmat(&x, g(&xp("q.weight")), d, None);
                let scores: Vec<f64> = k.iter().map(|kj| dot(&q, kj) / (d as f64).sqrt()).collect();
                let a = softmax(&scores);
                let o: Vec<f64> = (0..d).map(|j| (0..nt).map(|m| a[m] * v[m][j]).sum()).collect();
                let y = vecmat(&o, g(&xp("out.weight")), c, Some(g(&xp("out.bias"))));
                for ch in 0..c {
                    r[at(f, ch, s)] = y[ch];
                }
            }
        }
        h.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
    }
    let mut o = group_norm(&h, frames, c, plane, groups, g("spatial/out/gn.gamma"), g("spatial/out/gn.beta"));
    o.iter_mut().for_each(|v| *v = silu(*v));
    conv(&o, frames, c, hh, ww, g("spatial/out/conv.weight"), 4, 3, 3, g("spatial/out/conv.bias"))
}
