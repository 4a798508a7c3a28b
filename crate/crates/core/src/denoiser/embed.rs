use crate::error::{config_err, Result};
use crate::Real;

/// Interleaved sinusoidal features: entry `2i` is `sin(t·fᵢ)` and `2i+1` is
/// `cos(t·fᵢ)` with `fᵢ = 10000^(−i/(dim/2))`. The norm is `√(dim/2)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<Real>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(config_err!("timestep embedding dim must be even and positive, got {dim}"));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let (s, c) = (t as f64 * freq).sin_cos();
        out.push(s as Real);
        out.push(c as Real);
    }
    Ok(out)
}
