use super::*;
use crate::toydata::{make_dataset, DatasetParams};

fn small_model() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        n_res_blocks: 1,
        n_tokens: 2,
        d_model: 8,
        time_embed_dim: 8,
        time_hidden_dim: 8,
        t_clip_max: 4,
        height: 4,
        width: 4,
        norm_groups: 2,
        ..Default::default()
    }
}

fn clips() -> Vec<ClipSample> {
    make_dataset(&DatasetParams {
        clips: 40,
        frames: 4,
        height: 8,
        width: 8,
        seed: 5,
    })
    .unwrap()
    .train
}

fn cfg(stage: Stage, steps: u64) -> TrainConfig {
    TrainConfig {
        stage,
        steps,
        batch_size: Some(3),
        learning_rate: 1e-2,
        clip_frames: 4,
        prediction_fraction: 0.5,
        seed: 9,
        ..Default::default()
    }
}

fn pretrained(clips: &[ClipSample], steps: u64) -> TrainState {
    train(&cfg(Stage::SpatialPretrain, steps), &small_model(), None, clips, &mut |_, _| Ok(())).unwrap()
}

#[test]
fn prepared_target_matches_v_oracle() {
    let clips = clips();
    let c = cfg(Stage::Temporal, 1);
    let sched = c.schedule.build().unwrap();
    let batch = sample_batch(&clips, &c, 0.7, &mut Rng::new(1)).unwrap();
    let prepared = prepare_batch(&batch, &sched, 0.0, &mut Rng::new(2)).unwrap();
    let mut replay = Rng::new(2);
    let target = prepared.target.data();
    let per_item = batch[0].x0.data.len();
    for (i, item) in batch.iter().enumerate() {
        let t = 1 + replay.below(sched.timesteps());
        let eps = replay.normal_vec(per_item);
        replay.uniform();
        assert_eq!(t, prepared.t[i]);
        let (a, s) = (sched.a(t), sched.s(t));
        for j in 0..per_item {
            let want = a * eps[j] as f64 - s * item.x0.data[j] as f64;
            assert!((target[i * per_item + j] as f64 - want).abs() < 1e-5);
        }
    }
    let exact = prepared.target.mse(&prepared.target).unwrap().item();
    assert!(exact.abs() < 1e-10);
}

#[test]
fn init_model_loss_is_target_energy() {
    let clips = clips();
    let c = cfg(Stage::SpatialPretrain, 1);
    let sched = c.schedule.build().unwrap();
    let scale = estimate_latent_scale(&clips).unwrap();
    let model = Model::init(&small_model(), &mut Rng::new(0)).unwrap();
    let (mut loss, mut oracle) = (0.0, 0.0);
    let rounds = 40;
    for r in 0..rounds {
        let batch = sample_batch(&clips, &c, scale, &mut Rng::new(r)).unwrap();
        let prepared = prepare_batch(&batch, &sched, 0.1, &mut Rng::derive(r, 1)).unwrap();
        loss += batch_loss(&model, &prepared).unwrap().item() as f64;
        let tv = prepared.target.data();
        oracle += tv.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / tv.len() as f64;
    }
    let (loss, oracle) = (loss / rounds as f64, oracle / rounds as f64);
    assert!((loss - 1.0).abs() < 0.2, "{loss}");
    assert!((loss - oracle).abs() < 1e-2, "{loss} vs {oracle}");
}

#[test]
fn step_loss_is_deterministic() {
    let clips = clips();
    let c = cfg(Stage::SpatialPretrain, 1);
    let sched = c.schedule.build().unwrap();
    let run = || {
        let model = Model::init(&small_model(), &mut Rng::new(0)).unwrap();
        let batch = sample_batch(&clips, &c, 1.0, &mut Rng::new(4)).unwrap();
        training_step(&model, &batch, &sched, &c, &mut Rng::new(4)).unwrap().loss
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn condition_dropout_rate() {
    let sched = ScheduleParams {
        timesteps: 10,
        ..Default::default()
    }
    .build()
    .unwrap();
    let item = BatchItem {
        x0: LatentVideo::zeros(1, 1, 1),
        conditioned: BTreeSet::new(),
        condition: SemanticCondition::new(vec![1.0; 8]),
    };
    let batch = vec![item; 100];
    let mut rng = Rng::new(17);
    let mut dropped = 0;
    let rounds = 200;
    for _ in 0..rounds {
        let p = prepare_batch(&batch, &sched, 0.1, &mut rng).unwrap();
        dropped += p.conditions.iter().filter(|c| c.is_null).count();
    }
    let rate = dropped as f64 / (rounds * 100) as f64;
    assert!((rate - 0.1).abs() < 0.02, "{rate}");
}

#[test]
fn temporal_batches_condition_on_prefix() {
    let clips = clips();
    let c = cfg(Stage::Temporal, 1);
    let mut saw_prefix = false;
    for seed in 0..20 {
        for item in sample_batch(&clips, &c, 1.0, &mut Rng::new(seed)).unwrap() {
            assert_eq!(item.x0.frames, 4);
            let n = item.conditioned.len();
            assert!(n >= 1 && n < 4 && item.conditioned.iter().copied().eq(0..n));
            saw_prefix |= n > 1;
        }
    }
    assert!(saw_prefix);
    let s = cfg(Stage::SpatialPretrain, 1);
    let (mut on, mut total) = (0, 0);
    for seed in 0..50 {
        for item in sample_batch(&clips, &s, 1.0, &mut Rng::new(seed)).unwrap() {
            assert_eq!(item.x0.frames, 1);
            assert!(item.conditioned.is_empty() || item.conditioned == BTreeSet::from([0]));
            on += item.conditioned.len();
            total += 1;
        }
    }
    let share = on as f64 / total as f64;
    assert!((share - s.self_condition_fraction).abs() < 0.15, "{share}");
    let never = TrainConfig {
        self_condition_fraction: 0.0,
        ..s
    };
    for item in sample_batch(&clips, &never, 1.0, &mut Rng::new(0)).unwrap() {
        assert!(item.conditioned.is_empty());
    }
}

#[test]
fn temporal_stage_needs_pretrained_model() {
    let clips = clips();
    let err = begin_stage(&cfg(Stage::Temporal, 5), &small_model(), None, &clips).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("spatially pretrained"), "{err}");
    let untrained = begin_stage(&cfg(Stage::SpatialPretrain, 5), &small_model(), None, &clips).unwrap();
    assert!(begin_stage(&cfg(Stage::Temporal, 5), &small_model(), Some(untrained), &clips).is_err());
}

#[test]
fn temporal_stage_freezes_spatial_group() {
    let clips = clips();
    let pre = pretrained(&clips, 3);
    let before: Vec<u32> = Group::ALL.iter().map(|&g| pre.group_hash(g)).collect();
    let mut losses = Vec::new();
    let post = train(&cfg(Stage::Temporal, 4), &small_model(), Some(pre), &clips, &mut |_, s| {
        losses.push(s.loss);
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 4);
    for (g, h) in Group::ALL.iter().zip(before) {
        assert_eq!(post.group_hash(*g) == h, *g == Group::Spatial, "{g}");
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let clips = clips();
    let state = pretrained(&clips, 2);
    let ck = state.to_checkpoint().unwrap();
    let bytes = ck.to_bytes().unwrap();
    let back = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
    assert_eq!(back.step, 2);
    assert_eq!(back.adam.step, 2);
    assert_eq!(back.stage, Stage::SpatialPretrain);
    assert!(ck.get("schedule/a").is_ok() && ck.get("meta/config").is_ok());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let clips = clips();
    let full = pretrained(&clips, 4);
    let half = pretrained(&clips, 2);
    let reloaded = TrainState::from_checkpoint(&half.to_checkpoint().unwrap()).unwrap();
    let resumed = train(&cfg(Stage::SpatialPretrain, 4), &small_model(), Some(reloaded), &clips, &mut |_, _| Ok(())).unwrap();
    assert_eq!(
        resumed.to_checkpoint().unwrap().to_bytes().unwrap(),
        full.to_checkpoint().unwrap().to_bytes().unwrap()
    );
    let other = TrainConfig {
        learning_rate: 0.5,
        ..cfg(Stage::SpatialPretrain, 4)
    };
    assert!(begin_stage(&other, &small_model(), Some(half), &clips).is_err());
}

#[test]
fn invalid_configs_rejected() {
    for bad in [
        TrainConfig { steps: 0, ..Default::default() },
        TrainConfig { learning_rate: 0.0, ..Default::default() },
        TrainConfig { p_drop: 1.5, ..Default::default() },
        TrainConfig { batch_size: Some(0), ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
    let json = r#"{"stage": "temporal", "steps": 3, "lr": 1}"#;
    assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    let ok: TrainConfig = serde_json::from_str(r#"{"stage": "spatial", "steps": 3}"#).unwrap();
    assert_eq!(ok.stage, Stage::SpatialPretrain);
}
