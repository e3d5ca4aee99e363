use maestro_core::config::FusionMode;
use maestro_core::encodings::{checksum, modality_encoding, reference_day, spatial_table, temporal_features};
use maestro_core::error::Error;
use maestro_core::optim::{ema_alpha, Schedule};
use maestro_core::presets::preset;
use maestro_core::synth::builtin_recipe;
use maestro_core::temporal::TimeStamp;
use maestro_core::trainer::{evaluate, run_phase, Dataset, Model, PhaseOptions, RunPhase};

fn toy(tiles: usize) -> maestro_core::synth::SyntheticRecipe {
    let mut r = builtin_recipe("toy").unwrap();
    r.num_tiles = tiles;
    r
}

fn quiet() -> impl FnMut(&maestro_core::trainer::EpochLog) -> maestro_core::error::Result<()> {
    |_| Ok(())
}

#[test]
fn ema_coefficient_for_fifty_epochs() {
    assert_eq!(ema_alpha(50), 0.9);
    assert_eq!(ema_alpha(5), 0.0);
    assert_eq!(ema_alpha(3), 0.0);
    assert_eq!(ema_alpha(100), 0.95);
}

#[test]
fn schedule_endpoints() {
    for (final_div, batch) in [(1e4, 256), (2.0, 64), (2.0, 16)] {
        let s = Schedule { base_lr: 1e-4, batch_size: batch, warmup_fraction: 0.2, final_div, total_steps: 1000 };
        let peak = 1e-4 * (batch as f64).sqrt();
        assert!((s.peak() - peak).abs() < 1e-15);
        assert_eq!(s.warmup_steps(), 200);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(200) - peak).abs() < 1e-15);
        assert!((s.lr(999) - peak / final_div).abs() < 1e-15 * peak);
        assert!((s.lr(100) - peak / 2.0).abs() < 1e-15);
        assert!(s.lr(600) < peak && s.lr(600) > peak / final_div);
    }
}

#[test]
fn pretrain_epoch_is_finite_and_probe_keeps_the_backbone() {
    let cfg = preset("synthetic_temporal").unwrap();
    let data = Dataset::synthetic(&toy(6), &cfg.dataset).unwrap();
    let (train, val) = data.split_at(4);
    let mut model = Model::<f32>::new(&cfg, 1).unwrap();
    let mut opts = PhaseOptions::new(RunPhase::Pretrain, 1);
    opts.epochs = Some(1);
    opts.batch_size = Some(2);
    let pre = run_phase(&mut model, &cfg, &train, None, &opts, &mut quiet()).unwrap();
    assert_eq!(pre.epochs.len(), 1);
    assert!(pre.epochs[0].loss.is_finite() && pre.epochs[0].loss > 0.0);
    assert_ne!(pre.backbone_checksum_before, pre.backbone_checksum_after);

    let mut opts = PhaseOptions::new(RunPhase::Probe, 2);
    opts.epochs = Some(2);
    opts.batch_size = Some(2);
    let probe = run_phase(&mut model, &cfg, &train, Some(&val), &opts, &mut quiet()).unwrap();
    assert_eq!(probe.backbone_checksum_before, probe.backbone_checksum_after);
    assert_eq!(probe.backbone_checksum_after, pre.backbone_checksum_after);
    let eval = probe.eval.unwrap();
    assert!(eval.loss.is_finite());
    assert!(eval.weighted_f1.is_some() && eval.top1.is_some() && eval.miou.is_none());
}

#[test]
fn finetune_moves_the_backbone() {
    let cfg = preset("synthetic_temporal").unwrap();
    let data = Dataset::synthetic(&toy(4), &cfg.dataset).unwrap();
    let mut model = Model::<f32>::new(&cfg, 1).unwrap();
    let mut opts = PhaseOptions::new(RunPhase::Finetune, 0);
    opts.epochs = Some(1);
    let r = run_phase(&mut model, &cfg, &data, Some(&data), &opts, &mut quiet()).unwrap();
    assert_ne!(r.backbone_checksum_before, r.backbone_checksum_after);
}

#[test]
fn segmentation_pipeline_runs() {
    let cfg = preset("synthetic_segmentation").unwrap();
    let mut recipe = builtin_recipe("segmentation").unwrap();
    recipe.num_tiles = 3;
    let data = Dataset::synthetic(&recipe, &cfg.dataset).unwrap();
    let mut model = Model::<f32>::new(&cfg, 4).unwrap();
    for phase in [RunPhase::Pretrain, RunPhase::Finetune] {
        let mut opts = PhaseOptions::new(phase, 0);
        opts.epochs = Some(1);
        let r = run_phase(&mut model, &cfg, &data, Some(&data), &opts, &mut quiet()).unwrap();
        assert!(r.epochs[0].loss.is_finite());
    }
    let report = evaluate(&model, &cfg, &data).unwrap();
    let miou = report.miou.unwrap();
    assert!((0.0..=100.0).contains(&miou), "{miou}");
    assert!(report.weighted_f1.is_none());
}

#[test]
fn checkpoints_restore_and_reject_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = preset("synthetic_temporal").unwrap();
    let model = Model::<f32>::new(&cfg, 1).unwrap();
    model.save(&path).unwrap();

    let mut same = Model::<f64>::new(&cfg, 2).unwrap();
    assert_ne!(same.backbone_checksum(), model.backbone_checksum());
    same.load(&path).unwrap();
    assert_eq!(same.backbone_checksum(), model.backbone_checksum());

    let mut wider = cfg.clone();
    wider.dims.encoder_width = 48;
    let mut other = Model::<f32>::new(&wider, 1).unwrap();
    assert!(matches!(other.load(&path), Err(Error::Checkpoint(_))));

    let mut routed = cfg.clone();
    routed.fusion.mode = FusionMode::Shared;
    let mut other = Model::<f32>::new(&routed, 1).unwrap();
    assert!(matches!(other.load(&path), Err(Error::Checkpoint(_))));
}

fn ts(absolute_day: i64, day_of_year: f64, hour: f64) -> TimeStamp {
    TimeStamp { absolute_day, day_of_year, hour }
}

#[test]
fn temporal_features_by_hand() {
    let f = temporal_features(&ts(730, 91.3125, 6.0), 365);
    assert!((f[0] - 1.0).abs() < 1e-12);
    assert!(f[1].abs() < 1e-12);
    assert!((f[2] - 1.0).abs() < 1e-12);
    assert!(f[3].abs() < 1e-12);
    for v in &f[4..] {
        assert!((v - 365.0 / 365.25).abs() < 1e-12);
    }
    let days = [ts(40, 40.0, 0.0), ts(10, 10.0, 0.0), ts(30, 30.0, 0.0), ts(20, 20.0, 0.0)];
    assert_eq!(reference_day(&days), Some(20));
    assert_eq!(reference_day(&days[..3]), Some(30));
}

#[test]
fn spatial_tables_by_hand() {
    let cfg = preset("treesatai_ts").unwrap();
    let table = spatial_table(&cfg.dataset.modalities, 16).unwrap();
    assert_eq!(table.lcm_side, 15);
    let aerial = table.tables[0].as_ref().unwrap();
    assert_eq!(aerial.dim(), (225, 8));
    let row = aerial.row(15 + 2);
    let expect = [1f64.sin(), 0.01f64.sin(), 1f64.cos(), 0.01f64.cos(), 2f64.sin(), 0.02f64.sin(), 2f64.cos(), 0.02f64.cos()];
    for (a, b) in row.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let s1 = table.tables[1].as_ref().unwrap();
    assert_eq!(s1.dim(), (9, 8));
    let mean_sin = (0..5).map(|r| (r as f64).sin()).sum::<f64>() / 5.0;
    assert!((s1[[0, 0]] - mean_sin).abs() < 1e-12);
}

#[test]
fn encoding_vectors_are_stable() {
    let cfg = preset("treesatai_ts").unwrap();
    let table = spatial_table(&cfg.dataset.modalities, cfg.dims.encoder_width).unwrap();
    let times = [ts(18300, 38.0, 10.5), ts(18400, 138.0, 11.0), ts(18500, 238.0, 10.25)];
    let mut values = Vec::new();
    for t in table.tables.iter().flatten() {
        values.extend(modality_encoding(t, &times, reference_day(&times).unwrap(), 2));
    }
    assert_eq!(values.len(), (225 + 9 + 9 + 9) * 3 * 2 * 768);
    assert_eq!(checksum(values), GOLDEN);
}

const GOLDEN: u64 = 1_247_470_226_187_663_549;
