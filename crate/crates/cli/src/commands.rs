use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use atmv_core::codec::{encode, Frame};
use atmv_core::conditioning::{GuidanceConfig, SemanticCondition};
use atmv_core::denoiser::Group;
use atmv_core::latent::LatentVideo;
use atmv_core::metrics::{evaluate_video, MetricsReport};
use atmv_core::pipeline::Pipeline;
use atmv_core::sampler::SamplerConfig;
use atmv_core::schedule::ScheduleParams;
use atmv_core::toydata::{make_clip, ClipSample, DatasetParams, SceneSpec, CONDITION_WIDTH};
use atmv_core::trainer::{begin_stage, load_checkpoint, run_stage, Stage, TrainState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::video::{read_frame, read_manifest, read_video, read_video_set, write_json, write_video, VideoManifest, GENERATOR};

pub type CliResult<T> = Result<T, CliError>;

/// Worker pool capped by `ATMV_THREADS` when set.
fn pool() -> CliResult<rayon::ThreadPool> {
    let threads = match std::env::var("ATMV_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::config(format!("ATMV_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::internal(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub generator: String,
    pub params: DatasetParams,
    pub clips: Vec<ClipEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub dir: String,
    pub split: String,
    pub seed: u64,
}

pub fn parse_size(text: &str) -> CliResult<(usize, usize)> {
    let parsed = text
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)));
    match parsed {
        Some((h, w)) if h > 0 && w > 0 && h % 2 == 0 && w % 2 == 0 => Ok((h, w)),
        Some((h, w)) => Err(CliError::config(format!("size {h}x{w} must be positive and even"))),
        None => Err(CliError::config(format!("size {text:?} is not HxW"))),
    }
}

pub fn gen_data(out: &Path, params: &DatasetParams) -> CliResult<()> {
    if params.clips == 0 || params.frames == 0 {
        return Err(CliError::config("need at least one clip and one frame"));
    }
    let n_train = params.clips * 9 / 10;
    let clips: Vec<ClipSample> = pool()?.install(|| {
        (0..params.clips)
            .into_par_iter()
            .map(|i| make_clip(params, i))
            .collect::<Result<_, _>>()
    })?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let dir = format!("clip_{i:05}");
        write_video(
            &out.join(&dir),
            &clip.frames,
            &VideoManifest {
                frames: params.frames,
                height: params.height,
                width: params.width,
                seed: clip.seed,
                scene: Some(clip.scene.clone()),
                generator: GENERATOR.into(),
                sampling: None,
            },
        )?;
        entries.push(ClipEntry {
            dir,
            split: if i < n_train { "train" } else { "val" }.into(),
            seed: clip.seed,
        });
    }
    write_json(
        &out.join("manifest.json"),
        &DatasetIndex {
            generator: GENERATOR.into(),
            params: params.clone(),
            clips: entries,
        },
    )?;
    eprintln!("wrote {} clips to {}", clips.len(), out.display());
    Ok(())
}

/// `(train, val)` clips from a `gen-data` directory.
pub fn load_dataset(dir: &Path) -> CliResult<(Vec<ClipSample>, Vec<ClipSample>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let clips: Vec<(String, ClipSample)> = pool()?.install(|| {
        index
            .clips
            .par_iter()
            .map(|entry| {
                let video = read_video(&dir.join(&entry.dir))?;
                let scene = video
                    .manifest
                    .and_then(|m| m.scene)
                    .ok_or_else(|| CliError::data(format!("clip {} has no scene in its manifest", entry.dir)))?;
                let latents = video.frames.iter().map(encode).collect::<Result<Vec<_>, _>>()?;
                let clip = ClipSample {
                    condition: scene.condition(),
                    latents: LatentVideo::from_frames(&latents)?,
                    frames: video.frames,
                    scene,
                    seed: entry.seed,
                };
                Ok((entry.split.clone(), clip))
            })
            .collect::<CliResult<_>>()
    })?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (split, clip) in clips {
        match split.as_str() {
            "train" => train.push(clip),
            "val" => val.push(clip),
            other => return Err(CliError::data(format!("unknown split {other:?}"))),
        }
    }
    Ok((train, val))
}

fn dataset_for(cfg: &RunConfig) -> CliResult<(Vec<ClipSample>, Vec<ClipSample>)> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir),
        None => {
            let n_train = cfg.dataset.clips * 9 / 10;
            let mut all: Vec<ClipSample> = pool()?.install(|| {
                (0..cfg.dataset.clips)
                    .into_par_iter()
                    .map(|i| make_clip(&cfg.dataset, i))
                    .collect::<Result<_, _>>()
            })?;
            let val = all.split_off(n_train);
            Ok((all, val))
        }
    }
}

fn load_state(path: &Path) -> CliResult<TrainState> {
    Ok(TrainState::from_checkpoint(&load_checkpoint(path)?)?)
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub stage: Stage,
    pub resume: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
    pub out: PathBuf,
}

/// Runs one stage, writing `<stage>_step<N>.ckpt` and a metrics line every
/// `eval_every` steps, then `<stage>.ckpt`.
pub fn train(args: &TrainArgs) -> CliResult<()> {
    let cfg = &args.config;
    let tcfg = cfg.stage(args.stage);
    let prior = match (&args.resume, &args.init_from) {
        (Some(_), Some(_)) => return Err(CliError::config("--resume and --init-from are exclusive")),
        (Some(p), None) | (None, Some(p)) => Some(load_state(p)?),
        (None, None) => None,
    };
    if args.init_from.is_some() && args.stage != Stage::Temporal {
        return Err(CliError::config("--init-from hands a spatial checkpoint to the temporal stage"));
    }
    let resuming = args.resume.is_some();
    let (train_clips, val_clips) = dataset_for(cfg)?;
    if val_clips.is_empty() {
        return Err(CliError::config("dataset has no held-out clips for evaluation"));
    }
    let mut state = begin_stage(tcfg, &cfg.denoiser, prior, &train_clips)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let echo = args.out.join("config.json");
    fs::write(&echo, cfg.to_json() + "\n").map_err(|e| CliError::io(&echo, e))?;
    let stage = args.stage.name();
    let log_path = args.out.join(format!("{stage}_metrics.tsv"));
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let spatial_before = state.group_hash(Group::Spatial);
    let eval_sampler = SamplerConfig {
        steps: cfg.eval.steps,
        ..cfg.sampler.clone()
    };
    let eval_clips = &val_clips[..cfg.eval.clips.min(val_clips.len())];
    let mut window = Vec::new();
    let mut hook = |s: &TrainState, stats: &atmv_core::trainer::StepStats| -> atmv_core::Result<()> {
        window.push(stats.loss);
        if s.step % tcfg.eval_every == 0 || s.step == tcfg.steps {
            let loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            let report = Pipeline::from_state(s)?.evaluate_clips(eval_clips, cfg.eval.frames, &eval_sampler)?;
            let line = format!(
                "{}\t{loss:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                s.step, report.ssim_first_frame, report.temporal_consistency, report.motion_intensity
            );
            log.write_all(line.as_bytes()).map_err(|e| atmv_core::Error::Data(e.to_string()))?;
            Pipeline::save(s, args.out.join(format!("{stage}_step{:06}.ckpt", s.step)))?;
            eprint!("{stage} {line}");
        }
        Ok(())
    };
    run_stage(&mut state, &train_clips, &mut hook)?;
    let spatial_after = state.group_hash(Group::Spatial);
    let unchanged = spatial_before == spatial_after;
    eprintln!(
        "freeze check: spatial group crc32 {spatial_before:08x} -> {spatial_after:08x} ({})",
        if unchanged { "unchanged" } else { "changed" }
    );
    if args.stage == Stage::Temporal && !unchanged {
        return Err(CliError::internal("spatial parameters changed during the temporal stage"));
    }
    let final_path = args.out.join(format!("{stage}.ckpt"));
    Pipeline::save(&state, &final_path)?;
    eprintln!("wrote {}", final_path.display());
    Ok(())
}

/// Scene condition for a frame read from a video directory: the manifest's
/// scene advanced to the frame index, or the null condition.
fn condition_for(manifest: Option<&VideoManifest>, frame: usize) -> (SemanticCondition, Option<SceneSpec>) {
    match manifest.and_then(|m| m.scene.as_ref()) {
        Some(scene) => {
            let s = scene.advanced(frame);
            (s.condition(), Some(s))
        }
        None => (SemanticCondition::null(CONDITION_WIDTH), None),
    }
}

fn frame_index(path: &Path) -> usize {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("frame_"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

pub struct SampleArgs {
    pub ckpt: PathBuf,
    pub image: PathBuf,
    pub frames: usize,
    pub sampler: SamplerConfig,
    pub noisy_prior: Option<f64>,
    /// Take the noisy prior's reference coefficients from a linear schedule
    /// without zero terminal SNR instead of the model's schedule.
    pub prior_linear: bool,
    pub out: PathBuf,
}

pub fn sample(args: &SampleArgs) -> CliResult<()> {
    let pipeline = Pipeline::load(&args.ckpt)?;
    let image = read_frame(&args.image)?;
    let parent = args.image.parent().unwrap_or(Path::new("."));
    let (condition, scene) = condition_for(read_manifest(parent)?.as_ref(), frame_index(&args.image));
    if scene.is_none() {
        eprintln!("note: no scene manifest next to the image, sampling with the null condition");
    }
    let (video, prior_params) = match args.noisy_prior {
        Some(lambda) => {
            let params = ScheduleParams {
                zero_terminal_snr: pipeline.schedule_params.zero_terminal_snr && !args.prior_linear,
                ..pipeline.schedule_params.clone()
            };
            let prior = params.build()?;
            let v = pipeline.noisy_prior_video(&image, &condition, args.frames, lambda, &prior, &args.sampler)?;
            (v, Some(params))
        }
        None => (pipeline.image_to_video(&image, &condition, args.frames, &args.sampler)?, None),
    };
    for w in &video.sample.warnings {
        eprintln!("warning: {w}");
    }
    let sampling = serde_json::json!({
        "checkpoint": args.ckpt,
        "image": args.image,
        "frames": args.frames,
        "sampler": args.sampler,
        "initial_noise_seed": args.sampler.seed,
        "noisy_prior": args.noisy_prior,
        "prior_schedule": prior_params,
        "latent_scale": pipeline.latent_scale,
        "warnings": video.sample.warnings,
    });
    write_video(
        &args.out,
        &video.frames,
        &VideoManifest {
            frames: args.frames,
            height: image.height,
            width: image.width,
            seed: args.sampler.seed,
            scene,
            generator: GENERATOR.into(),
            sampling: Some(sampling),
        },
    )
}

pub struct PredictArgs {
    pub ckpt: PathBuf,
    pub video: PathBuf,
    pub context: usize,
    pub total: usize,
    pub frames: usize,
    pub sampler: SamplerConfig,
    pub out: PathBuf,
}

pub fn predict(args: &PredictArgs) -> CliResult<()> {
    if args.context == 0 || args.context >= args.frames {
        return Err(CliError::config(format!(
            "context {} must be in [1, {}) for {}-frame clips",
            args.context, args.frames, args.frames
        )));
    }
    if args.total < args.context {
        return Err(CliError::config("total must be at least the context length"));
    }
    let input = read_video(&args.video)?;
    if input.frames.len() < args.context {
        return Err(CliError::config(format!(
            "input video has {} frames, context needs {}",
            input.frames.len(),
            args.context
        )));
    }
    let pipeline = Pipeline::load(&args.ckpt)?;
    let manifest = input.manifest.clone();
    let condition = |k: usize| condition_for(manifest.as_ref(), k).0;
    let context = &input.frames[..args.context];
    let (frames, calls) = pipeline.predict(context, args.total, args.frames, &condition, &args.sampler)?;
    if frames.len() != args.total {
        return Err(CliError::internal(format!("produced {} frames, expected {}", frames.len(), args.total)));
    }
    let sampling = serde_json::json!({
        "checkpoint": args.ckpt,
        "video": args.video,
        "context": args.context,
        "total": args.total,
        "clip_frames": args.frames,
        "sampling_calls": calls,
        "sampler": args.sampler,
    });
    write_video(
        &args.out,
        &frames,
        &VideoManifest {
            frames: frames.len(),
            height: frames[0].height,
            width: frames[0].width,
            seed: args.sampler.seed,
            scene: manifest.and_then(|m| m.scene),
            generator: GENERATOR.into(),
            sampling: Some(sampling),
        },
    )
}

pub fn eval(generated: &Path, references: &Path, out: &Path) -> CliResult<MetricsReport> {
    let gen = read_video_set(generated)?;
    let refs = read_video_set(references)?;
    if gen.len() != refs.len() {
        return Err(CliError::config(format!(
            "{} generated videos vs {} references",
            gen.len(),
            refs.len()
        )));
    }
    let pairs: Vec<(&[Frame], &Frame)> = gen.iter().zip(&refs).map(|(g, r)| (&g.frames[..], &r.frames[0])).collect();
    let videos = pool()?.install(|| {
        pairs
            .par_iter()
            .map(|(g, r)| evaluate_video(g, r))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let report = MetricsReport::from_videos(videos)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let tsv = out.join("report.tsv");
    fs::write(&tsv, report.to_tsv()).map_err(|e| CliError::io(&tsv, e))?;
    let json = out.join("report.json");
    fs::write(&json, report.to_json() + "\n").map_err(|e| CliError::io(&json, e))?;
    Ok(report)
}

pub fn sampler_config(steps: usize, w: f64, rescale_phi: Option<f64>, eta: f64, seed: u64, latent_replacement: bool) -> SamplerConfig {
    SamplerConfig {
        steps,
        eta,
        guidance: GuidanceConfig { w, rescale_phi },
        seed,
        latent_replacement,
        ..Default::default()
    }
}
