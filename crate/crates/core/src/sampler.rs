//! Reverse process: DDIM with `v`-prediction and classifier-free guidance,
//! long-video generation by iterated frame prediction, and the noisy-prior
//! initialization used as an A/B baseline.
//!
//! Everything here works in model latent space (codec latents times the
//! pipeline's latent scale). See [`crate::pipeline`] for the image-level API.

use std::collections::BTreeMap;

use atmv_tensor::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentFrame;
use crate::conditioning::{
    assemble_model_input, build_conditions, cfg_combine, GuidanceConfig, SemanticCondition,
};
use crate::denoiser::VPredictor;
use crate::error::{config_err, dim_err, Error, Result};
use crate::latent::{LatentVideo, Prediction, PredictionKind};
use crate::schedule::{timesteps, NoiseSchedule, Spacing};
use crate::Real;

pub const ZSNR_PRIOR_WARNING: &str =
    "noisy prior on a zero-terminal-SNR schedule: the signal coefficient at t=T is zero, so the reference prior has no effect";
pub const NON_ZSNR_WARNING: &str =
    "sampling schedule lacks zero terminal SNR: the first step does not start from pure noise";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub latent_replacement: bool,
    pub spacing: Spacing,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eta: 0.0,
            guidance: GuidanceConfig::default(),
            seed: 0,
            latent_replacement: false,
            spacing: Spacing::Trailing,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err!("sampler steps must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(config_err!("eta must be in [0, 1], got {}", self.eta));
        }
        self.guidance.validate()
    }
}

#[derive(Clone, Debug)]
pub struct GenerationJob {
    /// Reference latents by frame index, in model latent space.
    pub references: BTreeMap<usize, LatentFrame>,
    pub condition: SemanticCondition,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub latents: LatentVideo,
    /// The state the reverse process started from.
    pub initial: LatentVideo,
    pub warnings: Vec<String>,
}

/// I.i.d. standard normal clip; depends only on the generator state and shape.
pub fn initial_noise(frames: usize, height: usize, width: usize, rng: &mut Rng) -> LatentVideo {
    let n = frames * crate::codec::LATENT_CHANNELS * height * width;
    LatentVideo::new(frames, height, width, rng.normal_vec(n)).expect("length matches shape")
}

/// One DDIM update from `t` to `t_prev` (`t_prev = 0` returns `x̂₀`).
pub fn ddim_step(
    x_t: &LatentVideo,
    v_hat: &Prediction,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut Rng,
) -> Result<LatentVideo> {
    if t_prev >= t {
        return Err(config_err!("timesteps must decrease, got {t} → {t_prev}"));
    }
    if v_hat.kind != PredictionKind::V || !v_hat.value.same_shape(x_t) {
        return Err(dim_err!("ddim_step needs a v prediction shaped like xₜ"));
    }
    let x0 = sched.x0_from_v(&x_t.data, &v_hat.value.data, t)?;
    if t_prev == 0 {
        return x_t.with_data(x0);
    }
    let eps = sched.eps_from_v(&x_t.data, &v_hat.value.data, t)?;
    let (a_t, s_t) = (sched.a(t), sched.s(t));
    let (a_p, s_p) = (sched.a(t_prev), sched.s(t_prev));
    let sigma = eta * ((s_p * s_p / (s_t * s_t)) * (1.0 - (a_t * a_t) / (a_p * a_p))).max(0.0).sqrt();
    let dir = (s_p * s_p - sigma * sigma).max(0.0).sqrt();
    let (a_p, dir) = (a_p as Real, dir as Real);
    let mut out: Vec<Real> = x0.iter().zip(&eps).map(|(&x, &e)| a_p * x + dir * e).collect();
    if sigma > 0.0 {
        let sigma = sigma as Real;
        out.iter_mut().for_each(|v| *v += sigma * rng.normal() as Real);
    }
    x_t.with_data(out)
}

fn check_job(job: &GenerationJob) -> Result<()> {
    if let Some(f) = job.references.values().find(|f| (f.height, f.width) != (job.height, job.width)) {
        return Err(dim_err!(
            "reference latent {}×{} vs job {}×{}",
            f.height,
            f.width,
            job.height,
            job.width
        ));
    }
    Ok(())
}

/// Samples a clip starting from pure Gaussian noise drawn from `cfg.seed`.
pub fn sample(
    model: &dyn VPredictor,
    sched: &NoiseSchedule,
    job: &GenerationJob,
    cfg: &SamplerConfig,
) -> Result<SampleOutput> {
    let mut rng = Rng::new(cfg.seed);
    let init = initial_noise(job.frames, job.height, job.width, &mut rng);
    sample_from(model, sched, job, cfg, init)
}

/// Runs the reverse process from an explicit initial state.
pub fn sample_from(
    model: &dyn VPredictor,
    sched: &NoiseSchedule,
    job: &GenerationJob,
    cfg: &SamplerConfig,
    init: LatentVideo,
) -> Result<SampleOutput> {
    cfg.validate()?;
    check_job(job)?;
    if init.shape() != [job.frames, crate::codec::LATENT_CHANNELS, job.height, job.width] {
        return Err(dim_err!("initial state {:?} does not match the job", init.shape()));
    }
    let mut warnings = Vec::new();
    if !sched.zsnr_applied() {
        warnings.push(NON_ZSNR_WARNING.to_string());
    }
    let (mask, fi) = build_conditions(&job.references, job.frames, job.height, job.width)?;
    let null = SemanticCondition::null(job.condition.width());
    let ts = timesteps(sched.timesteps(), cfg.steps, cfg.spacing)?;
    let mut step_rng = Rng::derive(cfg.seed, 1);
    let mut replace_rng = Rng::derive(cfg.seed, 2);
    let mut x = init.clone();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let input9 = assemble_model_input(&x, &mask, &fi)?;
        let cond = model.predict_v(&input9, t, &job.condition)?;
        let v = if cfg.guidance.w == 1.0 && cfg.guidance.rescale_phi.is_none() {
            cond
        } else {
            let uncond = model.predict_v(&input9, t, &null)?;
            cfg_combine(&uncond, &cond, &cfg.guidance)?
        };
        x = ddim_step(&x, &v, t, t_prev, sched, cfg.eta, &mut step_rng)?;
        if cfg.latent_replacement {
            for (&f, reference) in &job.references {
                let noised = if t_prev == 0 {
                    reference.coeffs.clone()
                } else {
                    let eps = replace_rng.normal_vec(reference.coeffs.len());
                    sched.q_sample(&reference.coeffs, &eps, t_prev)?
                };
                x.frame_data_mut(f).copy_from_slice(&noised);
            }
        }
        if !x.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Invariant(format!("non-finite latent after step t={t}")));
        }
    }
    Ok(SampleOutput {
        latents: x,
        initial: init,
        warnings,
    })
}

/// Conditions on `context` as frames `0..L` and returns frames `L..frames`.
pub fn predict_continuation(
    model: &dyn VPredictor,
    sched: &NoiseSchedule,
    context: &[LatentFrame],
    frames: usize,
    condition: &SemanticCondition,
    cfg: &SamplerConfig,
) -> Result<Vec<LatentFrame>> {
    let l = context.len();
    if l == 0 || l >= frames {
        return Err(config_err!("context length {l} must be in [1, {frames})"));
    }
    let job = GenerationJob {
        references: context.iter().cloned().enumerate().collect(),
        condition: condition.clone(),
        frames,
        height: context[0].height,
        width: context[0].width,
    };
    let out = sample(model, sched, &job, cfg)?;
    Ok((l..frames).map(|f| out.latents.frame(f)).collect())
}

/// Number of prediction iterations after the first I2V clip.
pub fn prediction_iterations(total: usize, frames: usize, overlap: usize) -> usize {
    if total <= frames {
        0
    } else {
        (total - frames).div_ceil(frames - overlap)
    }
}

#[derive(Clone, Debug)]
pub struct LongVideo {
    pub frames: Vec<LatentFrame>,
    pub i2v_calls: usize,
    pub prediction_iterations: usize,
}

impl LongVideo {
    /// Total sampling calls: the I2V clip plus every prediction iteration.
    pub fn sampling_calls(&self) -> usize {
        self.i2v_calls + self.prediction_iterations
    }
}

/// I2V clip from `init` (frame 0), then repeated continuation from the last
/// `overlap` generated frames until `total` frames exist. `condition(k)`
/// gives the semantic condition for a window starting at frame `k`. Window
/// `i` samples with seed `derive_seed(cfg.seed, i)`.
pub fn generate_long_video(
    model: &dyn VPredictor,
    sched: &NoiseSchedule,
    init: &LatentFrame,
    total: usize,
    frames: usize,
    overlap: usize,
    condition: &dyn Fn(usize) -> SemanticCondition,
    cfg: &SamplerConfig,
) -> Result<LongVideo> {
    if total == 0 || frames < 2 {
        return Err(config_err!("need total ≥ 1 and clip length ≥ 2"));
    }
    if overlap == 0 || overlap >= frames {
        return Err(config_err!("overlap {overlap} must be in [1, {frames})"));
    }
    let window_cfg = |i: usize| SamplerConfig {
        seed: Rng::derive_seed(cfg.seed, i as u64),
        ..cfg.clone()
    };
    let job = GenerationJob {
        references: BTreeMap::from([(0, init.clone())]),
        condition: condition(0),
        frames,
        height: init.height,
        width: init.width,
    };
    let first = sample(model, sched, &job, &window_cfg(0))?;
    let mut out = first.latents.to_frames();
    let iterations = prediction_iterations(total, frames, overlap);
    for i in 1..=iterations {
        let start = out.len() - overlap;
        let context = &out[start..];
        let new = predict_continuation(model, sched, context, frames, &condition(start), &window_cfg(i))?;
        out.extend(new);
    }
    out.truncate(total);
    Ok(LongVideo {
        frames: out,
        i2v_calls: 1,
        prediction_iterations: iterations,
    })
}

/// Initial state where every frame carries the same reference-dependent
/// component: `√(1−λ²)·ε_f + λ·(a_T·x₀ + s_T·ε)`, with `ε` shared across frames
/// and `(a_T, s_T)` taken from `prior_sched` (normally a schedule without zero
/// terminal SNR). Returns a warning when `prior_sched` has zero terminal SNR
/// and `λ > 0`.
pub fn noisy_prior_baseline(
    x0_ref: &LatentFrame,
    lambda: f64,
    frames: usize,
    prior_sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(LatentVideo, Option<String>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(config_err!("noisy-prior strength must be in [0, 1], got {lambda}"));
    }
    let warning = (prior_sched.zsnr_applied() && lambda > 0.0).then(|| ZSNR_PRIOR_WARNING.to_string());
    let mut video = initial_noise(frames, x0_ref.height, x0_ref.width, rng);
    if lambda == 0.0 {
        return Ok((video, warning));
    }
    let t_max = prior_sched.timesteps();
    let shared = rng.normal_vec(x0_ref.coeffs.len());
    let prior = prior_sched.q_sample(&x0_ref.coeffs, &shared, t_max)?;
    let keep = (1.0 - lambda * lambda).max(0.0).sqrt() as Real;
    let lambda = lambda as Real;
    for f in 0..frames {
        for (v, p) in video.frame_data_mut(f).iter_mut().zip(&prior) {
            *v = keep * *v + lambda * p;
        }
    }
    Ok((video, warning))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::disassemble_model_input;
    use crate::schedule::{build_linear_schedule, ScheduleParams};
    use atmv_tensor::Tensor;

    /// Returns the exact `v` target of a fixed clean clip.
    struct Oracle<'a> {
        x0: LatentVideo,
        sched: &'a NoiseSchedule,
    }

    impl VPredictor for Oracle<'_> {
        fn predict_v(&self, input9: &Tensor, t: usize, _: &SemanticCondition) -> Result<Prediction> {
            let (x_t, _, _) = disassemble_model_input(input9)?;
            let (a, s) = (self.sched.a(t), self.sched.s(t));
            let v = x_t
                .data
                .iter()
                .zip(&self.x0.data)
                .map(|(&x, &x0)| ((a * x as f64 - x0 as f64) / s) as Real)
                .collect();
            Ok(Prediction::v(x_t.with_data(v)?))
        }
    }

    /// Prediction that depends on the condition, for CFG branch checks.
    struct CondEcho;

    impl VPredictor for CondEcho {
        fn predict_v(&self, input9: &Tensor, _: usize, c: &SemanticCondition) -> Result<Prediction> {
            let (x_t, _, _) = disassemble_model_input(input9)?;
            let shift = c.vector.iter().sum::<Real>();
            let v = x_t.data.iter().map(|&x| 0.1 * x + shift).collect();
            Ok(Prediction::v(x_t.with_data(v)?))
        }
    }

    fn job(frames: usize, cond: SemanticCondition) -> GenerationJob {
        GenerationJob {
            references: BTreeMap::from([(0, LatentFrame::new(2, 2, vec![0.5; 16]).unwrap())]),
            condition: cond,
            frames,
            height: 2,
            width: 2,
        }
    }

    #[test]
    fn final_step_returns_x0_hat() {
        let sched = ScheduleParams::default().build().unwrap();
        let mut rng = Rng::new(0);
        let x = initial_noise(2, 2, 2, &mut rng);
        let v = Prediction::v(initial_noise(2, 2, 2, &mut rng));
        let out = ddim_step(&x, &v, 10, 0, &sched, 0.0, &mut rng).unwrap();
        assert_eq!(out.data, sched.x0_from_v(&x.data, &v.value.data, 10).unwrap());
        let a = ddim_step(&x, &v, 10, 5, &sched, 0.0, &mut Rng::new(1)).unwrap();
        let b = ddim_step(&x, &v, 10, 5, &sched, 0.0, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
        assert!(ddim_step(&x, &v, 5, 5, &sched, 0.0, &mut rng).is_err());
    }

    #[test]
    fn oracle_full_pass_reconstructs() {
        let sched = enforce(200);
        let mut rng = Rng::new(3);
        let x0 = LatentVideo::new(2, 2, 2, rng.normal_vec(32)).unwrap();
        let oracle = Oracle {
            x0: x0.clone(),
            sched: &sched,
        };
        let cfg = SamplerConfig {
            steps: 200,
            ..Default::default()
        };
        let out = sample(&oracle, &sched, &job(2, SemanticCondition::null(8)), &cfg).unwrap();
        let err = out.latents.data.iter().zip(&x0.data).fold(0.0f32, |m, (a, b)| m.max((a - b).abs() as f32));
        assert!(err < 1e-4, "{err}");
    }

    fn enforce(t: usize) -> NoiseSchedule {
        let base = build_linear_schedule(t, 1e-4, 0.02).unwrap();
        crate::schedule::enforce_zero_terminal_snr(&base).unwrap()
    }

    #[test]
    fn unit_guidance_skips_unconditional_branch() {
        let sched = enforce(100);
        let c = SemanticCondition::new(vec![0.01; 8]);
        let base = SamplerConfig {
            steps: 10,
            ..Default::default()
        };
        let single = sample(&CondEcho, &sched, &job(3, c.clone()), &base).unwrap();
        let guided = SamplerConfig {
            guidance: GuidanceConfig {
                w: 3.0,
                rescale_phi: None,
            },
            ..base.clone()
        };
        let g = sample(&CondEcho, &sched, &job(3, c), &guided).unwrap();
        assert_ne!(single.latents, g.latents);
        let again = sample(&CondEcho, &sched, &job(3, SemanticCondition::new(vec![0.01; 8])), &base).unwrap();
        assert_eq!(single.latents, again.latents);
    }

    #[test]
    fn initial_noise_ignores_references() {
        let sched = enforce(50);
        let mut other = job(3, SemanticCondition::null(8));
        other.references.insert(0, LatentFrame::new(2, 2, vec![-3.0; 16]).unwrap());
        let cfg = SamplerConfig {
            steps: 5,
            ..Default::default()
        };
        let a = sample(&CondEcho, &sched, &job(3, SemanticCondition::null(8)), &cfg).unwrap();
        let b = sample(&CondEcho, &sched, &other, &cfg).unwrap();
        assert_eq!(a.initial, b.initial);
    }

    #[test]
    fn latent_replacement_restores_references() {
        let sched = enforce(50);
        let cfg = SamplerConfig {
            steps: 5,
            latent_replacement: true,
            ..Default::default()
        };
        let j = job(3, SemanticCondition::null(8));
        let out = sample(&CondEcho, &sched, &j, &cfg).unwrap();
        assert_eq!(out.latents.frame(0), j.references[&0]);
    }

    #[test]
    fn long_video_arithmetic() {
        assert_eq!(prediction_iterations(40, 24, 8), 1);
        assert_eq!(prediction_iterations(24, 24, 8), 0);
        assert_eq!(prediction_iterations(41, 24, 8), 2);
        let sched = enforce(20);
        let init = LatentFrame::new(2, 2, vec![0.1; 16]).unwrap();
        let cfg = SamplerConfig {
            steps: 2,
            ..Default::default()
        };
        let cond = |_| SemanticCondition::null(8);
        let lv = generate_long_video(&CondEcho, &sched, &init, 13, 6, 2, &cond, &cfg).unwrap();
        assert_eq!(lv.frames.len(), 13);
        assert_eq!(lv.prediction_iterations, 2);
        let single = generate_long_video(&CondEcho, &sched, &init, 6, 6, 2, &cond, &cfg).unwrap();
        assert_eq!((single.frames.len(), single.sampling_calls()), (6, 1));
        assert!(generate_long_video(&CondEcho, &sched, &init, 13, 6, 6, &cond, &cfg).is_err());
        let ctx = vec![init.clone(); 2];
        let n = predict_continuation(&CondEcho, &sched, &ctx, 8, &SemanticCondition::null(8), &cfg).unwrap();
        assert_eq!(n.len(), 6);
    }

    #[test]
    fn noisy_prior_shares_component() {
        let lin = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = LatentFrame::new(2, 2, (0..16).map(|v| v as Real).collect()).unwrap();
        let (pure, w) = noisy_prior_baseline(&x0, 0.0, 3, &lin, &mut Rng::new(4)).unwrap();
        assert!(w.is_none());
        assert_eq!(pure, initial_noise(3, 2, 2, &mut Rng::new(4)));
        let (full, _) = noisy_prior_baseline(&x0, 1.0, 3, &lin, &mut Rng::new(4)).unwrap();
        assert_eq!(full.frame_data(0), full.frame_data(2));
        let z = enforce(1000);
        let (_, warn) = noisy_prior_baseline(&x0, 1.0, 3, &z, &mut Rng::new(4)).unwrap();
        assert_eq!(warn.as_deref(), Some(ZSNR_PRIOR_WARNING));
        assert!(noisy_prior_baseline(&x0, 1.5, 3, &lin, &mut Rng::new(4)).is_err());
    }
}
