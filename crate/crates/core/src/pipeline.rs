//! Image-level API over a trained model: frames in, frames out.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::{decode, encode, Frame, LatentFrame};
use crate::conditioning::SemanticCondition;
use crate::denoiser::Model;
use crate::error::{config_err, Error, Result};
use crate::latent::LatentVideo;
use crate::metrics::{evaluate, MetricsReport};
use crate::sampler::{
    generate_long_video, initial_noise, noisy_prior_baseline, predict_continuation, sample_from, GenerationJob,
    LongVideo, SampleOutput, SamplerConfig,
};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::toydata::ClipSample;
use crate::trainer::{load_checkpoint, save_checkpoint, TrainState};
use crate::{Real, Rng};

pub struct Pipeline {
    pub model: Model,
    pub schedule: NoiseSchedule,
    pub schedule_params: ScheduleParams,
    /// Codec latents are multiplied by this before entering the model.
    pub latent_scale: Real,
}

/// Generated frames plus the latent-space sampling record.
#[derive(Clone, Debug)]
pub struct GeneratedVideo {
    pub frames: Vec<Frame>,
    pub sample: SampleOutput,
}

impl Pipeline {
    pub fn from_state(state: &TrainState) -> Result<Pipeline> {
        Ok(Pipeline {
            model: state.model.clone(),
            schedule: state.schedule.build()?,
            schedule_params: state.schedule.clone(),
            latent_scale: state.latent_scale,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Pipeline> {
        Pipeline::from_state(&TrainState::from_checkpoint(&load_checkpoint(path)?)?)
    }

    pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &state.to_checkpoint()?)
    }

    /// Latent extent `(h, w)` the model was built for.
    pub fn latent_size(&self) -> (usize, usize) {
        (self.model.config().height, self.model.config().width)
    }

    /// Encodes a frame into model latent space.
    pub fn encode(&self, frame: &Frame) -> Result<LatentFrame> {
        let latent = encode(frame)?;
        let (h, w) = self.latent_size();
        if (latent.height, latent.width) != (h, w) {
            return Err(Error::Data(format!(
                "frame {}×{} does not match the model's {}×{} pixel size",
                frame.height,
                frame.width,
                2 * h,
                2 * w
            )));
        }
        Ok(latent.scaled(self.latent_scale))
    }

    pub fn decode_frame(&self, latent: &LatentFrame) -> Frame {
        decode(&latent.scaled(1.0 / self.latent_scale))
    }

    pub fn decode(&self, video: &LatentVideo) -> Vec<Frame> {
        video.to_frames().iter().map(|l| self.decode_frame(l)).collect()
    }

    fn job(&self, image: &Frame, condition: &SemanticCondition, frames: usize) -> Result<GenerationJob> {
        let (height, width) = self.latent_size();
        Ok(GenerationJob {
            references: BTreeMap::from([(0, self.encode(image)?)]),
            condition: condition.clone(),
            frames,
            height,
            width,
        })
    }

    /// I2V from pure Gaussian noise drawn with `Rng::new(cfg.seed)`.
    pub fn image_to_video(
        &self,
        image: &Frame,
        condition: &SemanticCondition,
        frames: usize,
        cfg: &SamplerConfig,
    ) -> Result<GeneratedVideo> {
        let (h, w) = self.latent_size();
        let init = initial_noise(frames, h, w, &mut Rng::new(cfg.seed));
        self.image_to_video_from(image, condition, frames, cfg, init)
    }

    pub fn image_to_video_from(
        &self,
        image: &Frame,
        condition: &SemanticCondition,
        frames: usize,
        cfg: &SamplerConfig,
        init: LatentVideo,
    ) -> Result<GeneratedVideo> {
        let job = self.job(image, condition, frames)?;
        let sample = sample_from(&self.model, &self.schedule, &job, cfg, init)?;
        Ok(GeneratedVideo {
            frames: self.decode(&sample.latents),
            sample,
        })
    }

    /// I2V started from the noisy-prior baseline of strength `lambda`, whose
    /// reference component uses `prior_schedule`.
    pub fn noisy_prior_video(
        &self,
        image: &Frame,
        condition: &SemanticCondition,
        frames: usize,
        lambda: f64,
        prior_schedule: &NoiseSchedule,
        cfg: &SamplerConfig,
    ) -> Result<GeneratedVideo> {
        let x0 = self.encode(image)?;
        let (init, warning) = noisy_prior_baseline(&x0, lambda, frames, prior_schedule, &mut Rng::new(cfg.seed))?;
        let mut out = self.image_to_video_from(image, condition, frames, cfg, init)?;
        out.sample.warnings.extend(warning);
        Ok(out)
    }

    /// Long video from one image: an I2V clip of `frames`, then continuation
    /// windows sharing `overlap` frames until `total` frames exist.
    pub fn long_video(
        &self,
        image: &Frame,
        total: usize,
        frames: usize,
        overlap: usize,
        condition: &dyn Fn(usize) -> SemanticCondition,
        cfg: &SamplerConfig,
    ) -> Result<(Vec<Frame>, LongVideo)> {
        let init = self.encode(image)?;
        let long = generate_long_video(&self.model, &self.schedule, &init, total, frames, overlap, condition, cfg)?;
        let out = long.frames.iter().map(|l| self.decode_frame(l)).collect();
        Ok((out, long))
    }

    /// Extends `context` to `total` frames. Every window conditions on the
    /// last `context.len()` frames and contributes `frames − context.len()`
    /// new ones; the given context frames are emitted unchanged. Returns the
    /// frames and the number of sampling calls.
    pub fn predict(
        &self,
        context: &[Frame],
        total: usize,
        frames: usize,
        condition: &dyn Fn(usize) -> SemanticCondition,
        cfg: &SamplerConfig,
    ) -> Result<(Vec<Frame>, usize)> {
        let l = context.len();
        if l == 0 || l >= frames {
            return Err(config_err!("context length {l} must be in [1, {frames})"));
        }
        if total < l {
            return Err(config_err!("total {total} is shorter than the context {l}"));
        }
        let mut latents = context.iter().map(|f| self.encode(f)).collect::<Result<Vec<_>>>()?;
        let mut calls = 0;
        while latents.len() < total {
            let start = latents.len() - l;
            let window_cfg = SamplerConfig {
                seed: Rng::derive_seed(cfg.seed, calls as u64),
                ..cfg.clone()
            };
            let new = predict_continuation(
                &self.model,
                &self.schedule,
                &latents[start..],
                frames,
                &condition(start),
                &window_cfg,
            )?;
            latents.extend(new);
            calls += 1;
        }
        latents.truncate(total);
        let mut out = context.to_vec();
        out.extend(latents[l..].iter().map(|x| self.decode_frame(x)));
        Ok((out, calls))
    }

    /// Generates one clip per held-out sample from its first frame and scene
    /// condition (sample `i` uses seed `derive_seed(cfg.seed, i)`) and scores
    /// them against the first frames.
    pub fn evaluate_clips(&self, clips: &[ClipSample], frames: usize, cfg: &SamplerConfig) -> Result<MetricsReport> {
        let mut generated = Vec::with_capacity(clips.len());
        let mut references = Vec::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            let c = SamplerConfig {
                seed: Rng::derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            let video = self.image_to_video(&clip.frames[0], &clip.condition, frames, &c)?;
            generated.push(video.frames);
            references.push(clip.frames[0].clone());
        }
        evaluate(&generated, &references)
    }
}
