//! Two-stage training with a `v`-prediction MSE loss.
//!
//! Stage [`Stage::SpatialPretrain`] fits the spatial backbone, input layer and
//! cross-attention on single frames with no reference conditioning. Stage
//! [`Stage::Temporal`] loads that model, freezes the spatial group and trains
//! temporal, input and cross-attention layers on full clips conditioned on
//! their first frame (or, for a fraction of samples, a prefix of frames).

mod adam;
mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamState, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint, Array, ArrayData, Checkpoint, MAGIC, VERSION};

use crate::codec::LatentFrame;
use crate::conditioning::{
    assemble_model_input, build_image_condition_latent, drop_condition, FrameMask, SemanticCondition,
};
use crate::denoiser::{DenoiserConfig, Group, Model};
use crate::error::{config_err, dim_err, Error, Result};
use crate::latent::LatentVideo;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::toydata::ClipSample;
use crate::{Real, Rng, Tensor};

/// Stream used to draw the initial parameters of a fresh model.
const INIT_STREAM: u64 = 0x1d17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[serde(alias = "spatial")]
    SpatialPretrain,
    Temporal,
}

impl Stage {
    pub fn trainable_groups(self) -> &'static [Group] {
        match self {
            Stage::SpatialPretrain => &[Group::Spatial, Group::InputLayer, Group::CrossAttn],
            Stage::Temporal => &[Group::Temporal, Group::InputLayer, Group::CrossAttn],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::SpatialPretrain => "spatial_pretrain",
            Stage::Temporal => "temporal",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::SpatialPretrain => 1,
            Stage::Temporal => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    /// Items per step: single frames in the spatial stage, clips in the
    /// temporal stage. `None` picks the stage default.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub p_drop: f64,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub eval_every: u64,
    /// Clip length used in the temporal stage (at most the dataset clip length).
    pub clip_frames: usize,
    /// Temporal stage: share of samples conditioned on a frame prefix
    /// instead of frame 0 alone.
    pub prediction_fraction: f64,
    /// Spatial stage: share of single frames conditioned on themselves, so
    /// the input layer learns to pass the reference latent through.
    pub self_condition_fraction: f64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::SpatialPretrain,
            steps: 3000,
            batch_size: None,
            learning_rate: 1e-3,
            p_drop: 0.1,
            seed: 0,
            schedule: ScheduleParams::default(),
            eval_every: 500,
            clip_frames: 8,
            prediction_fraction: 0.25,
            self_condition_fraction: 0.5,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            ..Default::default()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.stage {
            Stage::SpatialPretrain => 16,
            Stage::Temporal => 4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size() == 0 || self.eval_every == 0 {
            return Err(config_err!("steps, batch_size and eval_every must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(config_err!("p_drop must be in [0, 1], got {}", self.p_drop));
        }
        if !(0.0..=1.0).contains(&self.prediction_fraction) {
            return Err(config_err!("prediction_fraction must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.self_condition_fraction) {
            return Err(config_err!("self_condition_fraction must be in [0, 1]"));
        }
        if self.stage == Stage::Temporal && self.clip_frames < 2 {
            return Err(config_err!("temporal stage needs clip_frames ≥ 2"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(config_err!("grad_clip must be positive"));
            }
        }
        Ok(())
    }

    /// True when `other` continues the same run, allowing only a different
    /// step budget or evaluation interval.
    fn same_run(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            steps: 0,
            eval_every: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// One training example in model latent space.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub x0: LatentVideo,
    pub conditioned: BTreeSet<usize>,
    pub condition: SemanticCondition,
}

/// Network input and regression target for one step.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    /// `[B·F, 9, h, w]`.
    pub input: Tensor,
    /// `v` targets, `[B·F, 4, h, w]`.
    pub target: Tensor,
    pub frames: usize,
    pub t: Vec<usize>,
    pub conditions: Vec<SemanticCondition>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Items whose condition was replaced by the null condition.
    pub dropped: usize,
    pub items: usize,
}

/// Draws `t ∈ [1, T]`, `ε` and the condition dropout for every item, then
/// builds the model input and `v` target.
pub fn prepare_batch(batch: &[BatchItem], sched: &NoiseSchedule, p_drop: f64, rng: &mut Rng) -> Result<PreparedBatch> {
    let Some(first) = batch.first() else {
        return Err(dim_err!("empty batch"));
    };
    let frames = first.x0.frames;
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * first.x0.data.len());
    let mut ts = Vec::with_capacity(batch.len());
    let mut conditions = Vec::with_capacity(batch.len());
    for item in batch {
        if !item.x0.same_shape(&first.x0) {
            return Err(dim_err!("batch items differ in shape: {:?} vs {:?}", item.x0.shape(), first.x0.shape()));
        }
        let t = 1 + rng.below(sched.timesteps());
        let eps = rng.normal_vec(item.x0.data.len());
        let x_t = item.x0.with_data(sched.q_sample(&item.x0.data, &eps, t)?)?;
        targets.extend(sched.v_from(&item.x0.data, &eps, t)?);
        let refs: BTreeMap<usize, LatentFrame> = item
            .conditioned
            .iter()
            .map(|&f| {
                if f < frames {
                    Ok((f, item.x0.frame(f)))
                } else {
                    Err(dim_err!("conditioned frame {f} outside a {frames}-frame clip"))
                }
            })
            .collect::<Result<_>>()?;
        // Unlike sampling, training accepts fully conditioned clips.
        let fi = build_image_condition_latent(&refs, frames, item.x0.height, item.x0.width)?;
        let mask = FrameMask {
            frames,
            height: item.x0.height,
            width: item.x0.width,
            conditioned: fi.conditioned.clone(),
        };
        inputs.push(assemble_model_input(&x_t, &mask, &fi)?);
        conditions.push(drop_condition(&item.condition, p_drop, rng));
        ts.push(t);
    }
    let [_, c, h, w] = first.x0.shape();
    Ok(PreparedBatch {
        input: Tensor::concat(&inputs.iter().collect::<Vec<_>>(), 0)?,
        target: Tensor::new(targets, &[batch.len() * frames, c, h, w])?,
        frames,
        t: ts,
        conditions,
    })
}

/// Mean squared error between the network output and the `v` target.
pub fn batch_loss(model: &Model, prepared: &PreparedBatch) -> Result<Tensor> {
    let tokens = model.semantic_tokens(&prepared.conditions)?;
    let out = model.forward(&prepared.input, prepared.frames, &prepared.t, &tokens)?;
    Ok(out.mse(&prepared.target)?)
}

/// Forward and backward pass; gradients accumulate on the trainable
/// parameters of `model`.
pub fn training_step(
    model: &Model,
    batch: &[BatchItem],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepStats> {
    let prepared = prepare_batch(batch, sched, cfg.p_drop, rng)?;
    let loss = batch_loss(model, &prepared)?;
    loss.backward()?;
    Ok(StepStats {
        loss: loss.item() as f64,
        dropped: prepared.conditions.iter().filter(|c| c.is_null).count(),
        items: batch.len(),
    })
}

/// `1 / RMS` of every latent coefficient in `clips`.
pub fn estimate_latent_scale(clips: &[ClipSample]) -> Result<Real> {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for clip in clips {
        sum += clip.latents.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        n += clip.latents.data.len();
    }
    if n == 0 || sum == 0.0 {
        return Err(Error::Data("cannot estimate the latent scale of an empty or all-zero dataset".into()));
    }
    Ok((n as f64 / sum).sqrt() as Real)
}

fn scaled(video: &LatentVideo, scale: Real) -> Result<LatentVideo> {
    video.with_data(video.data.iter().map(|v| v * scale).collect())
}

/// Draws one batch. Spatial stage: random single frames, conditioned on
/// themselves with probability `self_condition_fraction`.
/// Temporal stage: random windows of `clip_frames`, conditioned on frame 0 or
/// (with probability `prediction_fraction`) on frames `0..L`, `2 ≤ L < F`.
pub fn sample_batch(clips: &[ClipSample], cfg: &TrainConfig, latent_scale: Real, rng: &mut Rng) -> Result<Vec<BatchItem>> {
    if clips.is_empty() {
        return Err(Error::Data("no training clips".into()));
    }
    (0..cfg.batch_size())
        .map(|_| {
            let clip = &clips[rng.below(clips.len())];
            let n = clip.latents.frames;
            match cfg.stage {
                Stage::SpatialPretrain => {
                    let k = rng.below(n);
                    let frame = LatentVideo::from_frames(&[clip.latents.frame(k)])?;
                    let conditioned = if rng.uniform() < cfg.self_condition_fraction {
                        BTreeSet::from([0])
                    } else {
                        BTreeSet::new()
                    };
                    Ok(BatchItem {
                        x0: scaled(&frame, latent_scale)?,
                        conditioned,
                        condition: clip.scene.advanced(k).condition(),
                    })
                }
                Stage::Temporal => {
                    let f = cfg.clip_frames.min(n);
                    if f < 2 {
                        return Err(Error::Data(format!("clips of {n} frames are too short for the temporal stage")));
                    }
                    let start = rng.below(n - f + 1);
                    let window: Vec<LatentFrame> = (start..start + f).map(|k| clip.latents.frame(k)).collect();
                    let prefix = if f > 2 && rng.uniform() < cfg.prediction_fraction {
                        2 + rng.below(f - 2)
                    } else {
                        1
                    };
                    Ok(BatchItem {
                        x0: scaled(&LatentVideo::from_frames(&window)?, latent_scale)?,
                        conditioned: (0..prefix).collect(),
                        condition: clip.scene.advanced(start).condition(),
                    })
                }
            }
        })
        .collect()
}

/// Everything needed to continue or hand over a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub stage: Stage,
    pub step: u64,
    pub latent_scale: Real,
    pub schedule: ScheduleParams,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaConfig {
    denoiser: DenoiserConfig,
    schedule: ScheduleParams,
    train: TrainConfig,
    stage: Stage,
    latent_scale: f64,
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        let f32s = |v: &[Real]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        for (name, t) in self.model.params() {
            ck.insert(format!("params/{name}"), Array::f32(t.shape(), f32s(&t.data())));
        }
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (name, values) in moments {
                let shape = self.model.param(name)?.shape();
                ck.insert(format!("adam/{kind}/{name}"), Array::f32(shape, f32s(values)));
            }
        }
        ck.insert("adam/step", Array::i64(&[1], vec![self.adam.step as i64]));
        ck.insert("train/step", Array::i64(&[1], vec![self.step as i64]));
        let sched = self.schedule.build()?;
        let table = |v: &[f64]| Array::f32(&[v.len()], v.iter().map(|&x| x as f32).collect());
        ck.insert("schedule/a", table(sched.a_table()));
        ck.insert("schedule/s", table(sched.s_table()));
        ck.insert("meta/latent_scale", Array::f32(&[1], vec![self.latent_scale as f32]));
        let meta = MetaConfig {
            denoiser: self.model.config().clone(),
            schedule: self.schedule.clone(),
            train: self.config.clone(),
            stage: self.stage,
            latent_scale: self.latent_scale as f64,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Invariant(format!("config serialization: {e}")))?;
        ck.insert_bytes("meta/config", &json);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<TrainState> {
        let meta: MetaConfig = serde_json::from_slice(&ck.get_bytes("meta/config")?)
            .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
        let f32_of = |name: &str| -> Result<(Vec<usize>, Vec<Real>)> {
            let a = ck.get(name)?;
            let v = a
                .as_f32()
                .ok_or_else(|| Error::Data(format!("{name} is not an f32 array")))?;
            Ok((a.shape.clone(), v.iter().map(|&x| x as Real).collect()))
        };
        let scalar_i64 = |name: &str| -> Result<u64> {
            let a = ck.get(name)?;
            match a.as_i64() {
                Some([v]) if *v >= 0 => Ok(*v as u64),
                _ => Err(Error::Data(format!("{name} is not a non-negative i64 scalar"))),
            }
        };
        let mut params = BTreeMap::new();
        let mut adam = AdamState::default();
        for name in ck.arrays.keys() {
            if let Some(p) = name.strip_prefix("params/") {
                params.insert(p.to_string(), f32_of(name)?);
            } else if let Some(p) = name.strip_prefix("adam/m/") {
                adam.m.insert(p.to_string(), f32_of(name)?.1);
            } else if let Some(p) = name.strip_prefix("adam/v/") {
                adam.v.insert(p.to_string(), f32_of(name)?.1);
            }
        }
        adam.step = scalar_i64("adam/step")?;
        let mut model = Model::from_arrays(&meta.denoiser, params)?;
        for name in adam.m.keys().chain(adam.v.keys()) {
            if !model.params().contains_key(name) {
                return Err(Error::Data(format!("optimizer state for unknown parameter {name}")));
            }
        }
        let sched = meta.schedule.build()?;
        for (name, table) in [("schedule/a", sched.a_table()), ("schedule/s", sched.s_table())] {
            let (_, stored) = f32_of(name)?;
            let same = stored.len() == table.len()
                && stored.iter().zip(table).all(|(&x, &y)| (x as f32).to_bits() == (y as f32).to_bits());
            if !same {
                return Err(Error::Data(format!("{name} does not match the recorded schedule parameters")));
            }
        }
        let latent_scale = match f32_of("meta/latent_scale")?.1.as_slice() {
            [s] if *s > 0.0 => *s,
            _ => return Err(Error::Data("meta/latent_scale must be one positive value".into())),
        };
        model.set_trainable(meta.stage.trainable_groups());
        Ok(TrainState {
            model,
            adam,
            stage: meta.stage,
            step: scalar_i64("train/step")?,
            latent_scale,
            schedule: meta.schedule,
            config: meta.train,
        })
    }

    /// Order-sensitive hash of the parameter bytes of `group`.
    pub fn group_hash(&self, group: Group) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in self.model.params() {
            if Group::of(name) == Some(group) {
                h.update(name.as_bytes());
                for v in t.data().iter() {
                    h.update(&v.to_le_bytes());
                }
            }
        }
        h.finalize()
    }
}

/// Sets up a stage: a fresh model for the spatial stage, a handover from a
/// spatial checkpoint for the temporal stage, or a resume of either.
pub fn begin_stage(
    cfg: &TrainConfig,
    denoiser: &DenoiserConfig,
    prior: Option<TrainState>,
    clips: &[ClipSample],
) -> Result<TrainState> {
    cfg.validate()?;
    let mut state = match (cfg.stage, prior) {
        (Stage::SpatialPretrain, None) => TrainState {
            model: Model::init(denoiser, &mut Rng::derive(cfg.seed, INIT_STREAM))?,
            adam: AdamState::default(),
            stage: Stage::SpatialPretrain,
            step: 0,
            latent_scale: estimate_latent_scale(clips)?,
            schedule: cfg.schedule.clone(),
            config: cfg.clone(),
        },
        (Stage::Temporal, None) => {
            return Err(config_err!(
                "temporal stage requires a spatially pretrained model: only temporal, input and \
                 cross-attention layers are trained, the spatial layers are loaded and frozen"
            ))
        }
        (stage, Some(p)) if p.stage == stage => {
            if !p.config.same_run(cfg) {
                return Err(config_err!("cannot resume: training config differs from the checkpoint's"));
            }
            TrainState {
                config: cfg.clone(),
                ..p
            }
        }
        (Stage::Temporal, Some(p)) => {
            if p.step == 0 {
                return Err(config_err!("temporal stage requires a spatially pretrained model, got an untrained one"));
            }
            if p.schedule != cfg.schedule {
                return Err(config_err!("temporal stage schedule differs from the pretrained model's"));
            }
            TrainState {
                model: p.model,
                adam: AdamState::default(),
                stage: Stage::Temporal,
                step: 0,
                latent_scale: p.latent_scale,
                schedule: p.schedule,
                config: cfg.clone(),
            }
        }
        (Stage::SpatialPretrain, Some(_)) => {
            return Err(config_err!("cannot run the spatial stage from a temporal-stage checkpoint"))
        }
    };
    if state.model.config() != denoiser {
        return Err(config_err!("denoiser config differs from the checkpoint's"));
    }
    state.model.set_trainable(cfg.stage.trainable_groups());
    Ok(state)
}

/// Runs steps until `state.step == cfg.steps`, calling `hook` after each.
/// Step `n` draws everything from `Rng::derive(derive_seed(seed, stage), n)`,
/// so a resumed run matches an uninterrupted one.
pub fn run_stage(
    state: &mut TrainState,
    clips: &[ClipSample],
    hook: &mut dyn FnMut(&TrainState, &StepStats) -> Result<()>,
) -> Result<()> {
    let cfg = state.config.clone();
    let sched = state.schedule.build()?;
    let stream = Rng::derive_seed(cfg.seed, cfg.stage.stream());
    while state.step < cfg.steps {
        let mut rng = Rng::derive(stream, state.step);
        let batch = sample_batch(clips, &cfg, state.latent_scale, &mut rng)?;
        let stats = training_step(&state.model, &batch, &sched, &cfg, &mut rng)?;
        adam_update(&mut state.model, &mut state.adam, cfg.learning_rate, cfg.grad_clip)?;
        state.step += 1;
        hook(state, &stats)?;
    }
    Ok(())
}

/// [`begin_stage`] followed by [`run_stage`].
pub fn train(
    cfg: &TrainConfig,
    denoiser: &DenoiserConfig,
    prior: Option<TrainState>,
    clips: &[ClipSample],
    hook: &mut dyn FnMut(&TrainState, &StepStats) -> Result<()>,
) -> Result<TrainState> {
    let mut state = begin_stage(cfg, denoiser, prior, clips)?;
    run_stage(&mut state, clips, hook)?;
    Ok(state)
}

#[cfg(test)]
mod tests;
