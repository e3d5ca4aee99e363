//! End-to-end acceptance suite. Prints one line per criterion and fails if
//! any criterion fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use maestro_core::autodiff::{ParamStore, Section, Tape};
use maestro_core::config::{ExperimentConfig, FusionConfig, FusionMode, Multispectral, StructuredProbs, TargetNorm};
use maestro_core::cost::{decoder_macs, encoder_macs, pretrain_cost, transfer_cost};
use maestro_core::masking::{adjust_to_ratio, sample_plan, structured_mask, TokenLayout};
use maestro_core::nn::grad_check;
use maestro_core::optim::{ema_alpha, Schedule};
use maestro_core::presets::{names, preset, BENCHMARKS};
use maestro_core::rng::{Purpose, RngKey};
use maestro_core::router::build_routing;
use maestro_core::synth::builtin_recipe;
use maestro_core::targets::{normalize_patch, DEFAULT_EPS};
use maestro_core::temporal::{d4_inverse, d4_transform, Phase};
use maestro_core::tilefile::{decode, encode, Tensor};
use maestro_core::tokenizer::{group_indices, patchify, unpatchify};
use maestro_core::trainer::{prepare, run_phase, Dataset, EpochLog, Model, PhaseOptions, RunPhase};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn quiet(_: &EpochLog) -> maestro_core::error::Result<()> {
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn cost_tables() -> Outcome {
    let start = Instant::now();
    let tables: [(bool, Multispectral, [f64; 4]); 4] = [
        (true, Multispectral::JointToken, [14.3, 56.1, 59.1, 65.4]),
        (true, Multispectral::TokenBased, [33.7, 173.6, 133.9, 146.9]),
        (false, Multispectral::JointToken, [39.1, 163.4, 167.4, 185.1]),
        (false, Multispectral::TokenBased, [95.0, 549.9, 403.9, 440.8]),
    ];
    let mut worst = 0.0f64;
    for (pre, ms, cells) in tables {
        for (name, want) in BENCHMARKS.iter().zip(cells) {
            let mut cfg = preset(name).map_err(|e| e.to_string())?;
            cfg.fusion.multispectral = ms;
            let r = if pre { pretrain_cost(&cfg.dataset, &cfg.fusion, &cfg.dims) } else { transfer_cost(&cfg.dataset, &cfg.fusion, &cfg.dims) }
                .map_err(|e| e.to_string())?;
            ensure(r.flops() == 2 * r.macs(), "FLOPs differ from 2 x MACs")?;
            let got = r.macs() as f64 / 1e9;
            let rel = (got - want).abs() / want;
            worst = worst.max(rel);
            ensure(rel < 5e-3, format!("{name} {ms:?} pretrain={pre}: {got:.2} vs {want}"))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1.0, format!("took {secs:.2} s"))?;
    Ok(format!("16 cells, worst deviation {:.2}%, {secs:.3} s", worst * 100.0))
}

fn masking() -> Outcome {
    let start = Instant::now();
    let cfg = preset("treesatai_ts").map_err(|e| e.to_string())?;
    let layout = TokenLayout::from_dataset(&cfg.dataset, Multispectral::JointToken);
    let n = layout.total();
    ensure(n == 441, format!("{n} tokens"))?;
    let plans = 10_000u64;
    for i in 0..plans {
        let plan = sample_plan(&layout, &StructuredProbs::default(), 0.75, &mut RngKey::new(10, 0, i, Purpose::Mask).rng())
            .map_err(|e| e.to_string())?;
        ensure(plan.mask.iter().filter(|&&m| m).count() == 331, format!("plan {i} masks {}", plan.masked_count))?;
    }
    let mut freq = vec![0u64; n];
    for i in 0..plans {
        let plan = sample_plan(&layout, &StructuredProbs::disabled(), 0.75, &mut RngKey::new(11, 0, i, Purpose::Mask).rng())
            .map_err(|e| e.to_string())?;
        for (f, &m) in freq.iter_mut().zip(&plan.mask) {
            *f += u64::from(m);
        }
    }
    let p = 331.0 / n as f64;
    let e = plans as f64 * p;
    let t: f64 = freq.iter().map(|&o| (o as f64 - e).powi(2) / (e * (1.0 - p))).sum();
    let stat = t * (n - 1) as f64 / n as f64;
    let pval = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(stat);
    ensure(pval > 0.01, format!("chi2 p = {pval:.4}"))?;
    let probs = StructuredProbs { modality: 1.0, spatial: 0.0, temporal: 0.0 };
    let mut rng = RngKey::new(12, 0, 0, Purpose::Mask).rng();
    let raw = structured_mask(&layout, &probs, &mut rng);
    ensure(raw.iter().all(|&m| m), "modality structure left tokens visible")?;
    let plan = adjust_to_ratio(&layout, raw, 0.75, &mut rng).map_err(|e| e.to_string())?;
    ensure(plan.masked_count == 331, "adjustment missed the target")?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, format!("took {secs:.1} s"))?;
    Ok(format!("331/441 in all plans, uniformity p = {pval:.3}, {secs:.1} s"))
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mean, mut worst_std, mut worst_inv) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..500 {
        let p = rng.gen_range(1..4);
        let sizes: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..4)).collect();
        let mut start = 0;
        let bands: Vec<Vec<usize>> = sizes
            .iter()
            .map(|&s| {
                start += s;
                (start - s..start).collect()
            })
            .collect();
        let groups = group_indices(&bands, p);
        let x: Vec<f64> = (0..start * p * p).map(|_| rng.gen_range(-50.0..50.0)).collect();
        if groups.iter().any(|g| g.len() < 2) {
            continue;
        }
        let (y, _) = normalize_patch(&x, &groups, TargetNorm::PatchGroup, DEFAULT_EPS);
        for g in &groups {
            let v: Vec<f64> = g.iter().map(|&i| y[i]).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((s - 1.0).abs());
        }
        let mut z = x.clone();
        for g in &groups {
            let (a, b) = (rng.gen_range(0.01..100.0), rng.gen_range(-1e3..1e3));
            for &i in g {
                z[i] = x[i] * a + b;
            }
        }
        let (w, _) = normalize_patch(&z, &groups, TargetNorm::PatchGroup, DEFAULT_EPS);
        worst_inv = y.iter().zip(&w).fold(worst_inv, |acc, (u, v)| acc.max((u - v).abs()));
        let all = vec![(0..x.len()).collect::<Vec<_>>()];
        let (a, _) = normalize_patch(&x, &all, TargetNorm::PatchGroup, DEFAULT_EPS);
        let (b, _) = normalize_patch(&x, &all, TargetNorm::Patch, DEFAULT_EPS);
        ensure(a == b, "single-group output differs from patch-wise")?;
    }
    ensure(worst_mean < 1e-6, format!("|mean| {worst_mean:e}"))?;
    ensure(worst_std < 1e-5, format!("|std - 1| {worst_std:e}"))?;
    ensure(worst_inv < 1e-6, format!("rescaling changed targets by {worst_inv:e}"))?;
    Ok(format!("|mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, invariance {worst_inv:.1e}"))
}

fn small_temporal(mode: FusionMode, ms: Multispectral, norm: TargetNorm, width: usize) -> ExperimentConfig {
    let mut cfg = preset("synthetic_temporal").unwrap();
    cfg.dims.encoder_width = width;
    cfg.dims.decoder_width = width;
    cfg.dims.encoder_depth = 2;
    cfg.dims.decoder_depth = 2;
    cfg.fusion.mode = mode;
    cfg.fusion.multispectral = ms;
    cfg.fusion.target_norm = norm;
    cfg
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cfg = small_temporal(FusionMode::Group, Multispectral::JointToken, TargetNorm::PatchGroup, 32);
    let mut recipe = builtin_recipe("toy").unwrap();
    recipe.num_tiles = 1;
    let data = Dataset::synthetic(&recipe, &cfg.dataset).map_err(|e| e.to_string())?;
    let sample = prepare(&cfg, &data, 0, 0, Phase::Train, 5, 0).map_err(|e| e.to_string())?;
    let model = Model::<f64>::new(&cfg, 9).map_err(|e| e.to_string())?;
    let plan = sample_plan(&model.mae.layout, &cfg.fusion.structured_probs, 0.75, &mut RngKey::new(5, 0, 0, Purpose::Mask).rng())
        .map_err(|e| e.to_string())?;
    let f = |store: &ParamStore<f64>| {
        let mut tape = Tape::new(store);
        let out = model.mae.pretrain_forward(&mut tape, &sample.input, &plan, true).unwrap();
        (tape.scalar(out.loss), tape.backward(out.loss))
    };
    let report = grad_check(&model.store, f, 1e-4, 4);
    let secs = start.elapsed().as_secs_f64();
    ensure(report.max_rel_error < 1e-4, format!("max rel error {:.2e} at {}", report.max_rel_error, report.worst_param))?;
    ensure(secs < 120.0, format!("took {secs:.0} s"))?;
    Ok(format!("{} entries, max rel error {:.1e}, {secs:.1} s", report.checked, report.max_rel_error))
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (d, c, side, p) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4));
        let n = side * p;
        let img = Array4::from_shape_fn((d, c, n, n), |_| rng.gen::<f32>());
        let grid = patchify(img.view(), p).map_err(|e| e.to_string())?;
        ensure(unpatchify(&grid).map_err(|e| e.to_string())? == img, "patchify round trip")?;
        let shape: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(1..5)).collect();
        let t = Tensor::F32(ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-1e6..1e6)));
        ensure(decode(&encode(&t), "x".as_ref()).map_err(|e| e.to_string())? == t, "tile file round trip")?;
    }
    let a = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as u8);
    let elems: Vec<_> = (0..8).map(|k| d4_transform(&a, k)).collect();
    for i in 0..8 {
        ensure(elems[..i].iter().all(|e| e != &elems[i]), "D4 elements coincide")?;
        ensure(d4_transform(&elems[i], d4_inverse(i)) == a, format!("inverse of {i}"))?;
        for j in 0..8 {
            ensure(elems.contains(&d4_transform(&elems[i], j)), "D4 not closed")?;
        }
    }
    Ok("patchify, tile files and D4 laws hold".into())
}

fn routing() -> Outcome {
    let mut checked = 0;
    for name in names() {
        let cfg = preset(name).map_err(|e| e.to_string())?;
        let ds = &cfg.dataset;
        let slab = |m: usize, ms: Multispectral| {
            let s = &ds.modalities[m];
            let side = s.image_size / s.patch_size;
            side * side * if ms == Multispectral::TokenBased { s.band_groups.len() } else { 1 }
        };
        let active: Vec<usize> = (0..ds.modalities.len()).filter(|&m| ds.modalities[m].temporal_bins > 0).collect();
        for mode in FusionMode::ALL {
            for ms in [Multispectral::JointToken, Multispectral::TokenBased] {
                let (lengths, sets): (Vec<usize>, usize) = match mode {
                    FusionMode::Shared | FusionMode::Monotemp => (
                        active.iter().flat_map(|&m| vec![slab(m, ms); ds.modalities[m].temporal_bins]).collect(),
                        if mode == FusionMode::Shared { 1 } else { active.len() },
                    ),
                    FusionMode::Mod => (active.iter().map(|&m| slab(m, ms) * ds.modalities[m].temporal_bins).collect(), active.len()),
                    _ => {
                        let l: Vec<usize> = ds
                            .modality_groups
                            .iter()
                            .map(|g| {
                                g.iter()
                                    .filter_map(|n| ds.modalities.iter().position(|s| &s.name == n))
                                    .filter(|m| active.contains(m))
                                    .map(|m| slab(m, ms) * ds.modalities[m].temporal_bins)
                                    .sum()
                            })
                            .filter(|&l: &usize| l > 0)
                            .collect();
                        let k = l.len();
                        (l, k)
                    }
                };
                let fusion = FusionConfig { mode, multispectral: ms, ..cfg.fusion.clone() };
                let plan = build_routing(ds, &fusion, &cfg.dims).map_err(|e| e.to_string())?;
                ensure(plan.sequence_lengths() == lengths, format!("{name} {mode:?} {ms:?} lengths"))?;
                ensure(plan.encoder_param_sets() == sets, format!("{name} {mode:?} {ms:?} sets"))?;
                checked += 1;
            }
        }
    }
    let cfg = preset("treesatai_ts").unwrap();
    let plan = |mode| build_routing(&cfg.dataset, &FusionConfig { mode, ..cfg.fusion.clone() }, &cfg.dims).unwrap();
    ensure(plan(FusionMode::Group).sequence_lengths() == [225, 72, 144], "TreeSat group lengths")?;
    ensure(plan(FusionMode::Group).total_param_sets() == 3, "TreeSat group sets")?;
    ensure(plan(FusionMode::Shared).sequences.len() == 25 && plan(FusionMode::Shared).total_param_sets() == 1, "TreeSat shared")?;

    let mut recipe = builtin_recipe("toy").unwrap();
    recipe.num_tiles = 1;
    for mode in FusionMode::ALL {
        let mut cfg = small_temporal(mode, Multispectral::TokenBased, TargetNorm::PatchGroup, 16);
        cfg.dims.encoder_depth = 3;
        let data = Dataset::synthetic(&recipe, &cfg.dataset).map_err(|e| e.to_string())?;
        let sample = prepare(&cfg, &data, 0, 0, Phase::Train, 1, 0).map_err(|e| e.to_string())?;
        let model = Model::<f32>::new(&cfg, 2).map_err(|e| e.to_string())?;
        let plan = sample_plan(&model.mae.layout, &cfg.fusion.structured_probs, 0.75, &mut RngKey::new(1, 0, 0, Purpose::Mask).rng())
            .map_err(|e| e.to_string())?;
        let mut tape = Tape::new(&model.store);
        model.mae.pretrain_forward(&mut tape, &sample.input, &plan, true).map_err(|e| e.to_string())?;
        let layout = &model.mae.layout;
        let routing = &model.mae.routing;
        let visible: Vec<usize> = routing
            .sequences
            .iter()
            .map(|s| {
                s.slabs
                    .iter()
                    .map(|sl| {
                        let k = layout.modalities.iter().position(|m| m.modality == sl.modality).unwrap();
                        let l = &layout.modalities[k];
                        (0..l.positions)
                            .flat_map(|p| (0..l.per_slot).map(move |g| l.index(sl.bin, p, g)))
                            .filter(|&i| !plan.modality_mask(k)[i])
                            .count()
                    })
                    .sum()
            })
            .collect();
        ensure(
            tape.mults(Section::Encoder) == encoder_macs(&visible, &cfg.dims, routing.fusion_boundary),
            format!("{mode:?} encoder multiplies"),
        )?;
        ensure(tape.mults(Section::Decoder) == decoder_macs(&routing.sequence_lengths(), &cfg.dims), format!("{mode:?} decoder multiplies"))?;
    }
    Ok(format!("{checked} preset/mode/token combinations, instrumented counts exact"))
}

fn temporal_data() -> (Dataset, Dataset, ExperimentConfig) {
    let cfg = preset("synthetic_temporal").unwrap();
    let data = Dataset::synthetic(&builtin_recipe("temporal").unwrap(), &cfg.dataset).unwrap();
    let (train, val) = data.split_at(512);
    (train, val, cfg)
}

fn pretraining() -> Outcome {
    let start = Instant::now();
    let (train, _, cfg) = temporal_data();
    ensure(train.len() >= 512 && cfg.dataset.modalities.len() == 2, "dataset too small")?;
    let mut model = Model::<f32>::new(&cfg, 0).map_err(|e| e.to_string())?;
    let mut opts = PhaseOptions::new(RunPhase::Pretrain, 0);
    opts.epochs = Some(20);
    let r = run_phase(&mut model, &cfg, &train, None, &opts, &mut quiet).map_err(|e| e.to_string())?;
    let (first, last) = (r.epochs[0].loss, r.epochs[r.epochs.len() - 1].loss);
    let reduction = 1.0 - last / first;
    let secs = start.elapsed().as_secs_f64();
    ensure(reduction >= 0.5, format!("loss {first:.3} -> {last:.3} ({:.0}% reduction)", reduction * 100.0))?;
    ensure(secs < 1200.0, format!("took {secs:.0} s"))?;
    Ok(format!("loss {first:.3} -> {last:.3} ({:.0}% reduction), {secs:.0} s", reduction * 100.0))
}

fn fusion_direction() -> Outcome {
    let (train, val, base) = temporal_data();
    let scores = |mode: FusionMode| -> Result<Vec<f64>, String> {
        let mut cfg = base.clone();
        cfg.fusion.mode = mode;
        (0..3u64)
            .map(|seed| {
                let mut model = Model::<f32>::new(&cfg, seed).map_err(|e| e.to_string())?;
                let mut opts = PhaseOptions::new(RunPhase::Pretrain, seed);
                opts.epochs = Some(5);
                run_phase(&mut model, &cfg, &train, None, &opts, &mut quiet).map_err(|e| e.to_string())?;
                let mut opts = PhaseOptions::new(RunPhase::Finetune, seed);
                opts.epochs = Some(20);
                let r = run_phase(&mut model, &cfg, &train, Some(&val), &opts, &mut quiet).map_err(|e| e.to_string())?;
                r.eval.and_then(|e| e.top1).ok_or_else(|| "no accuracy".to_string())
            })
            .collect()
    };
    let group = scores(FusionMode::Group)?;
    let shared = scores(FusionMode::Shared)?;
    let (g, s) = (median(group.clone()), median(shared.clone()));
    let msg = format!("group {g:.1} vs shared {s:.1} median top-1 ({group:.1?} / {shared:.1?})");
    ensure(g - s >= 5.0, msg.clone())?;
    Ok(msg)
}

fn normalization_direction() -> Outcome {
    let base = preset("synthetic_spectral").unwrap();
    let data = Dataset::synthetic(&builtin_recipe("spectral").unwrap(), &base.dataset).map_err(|e| e.to_string())?;
    let (train, val) = data.split_at(512);
    let scores = |norm: TargetNorm| -> Result<f64, String> {
        let mut cfg = base.clone();
        cfg.fusion.target_norm = norm;
        let accs = (0..3u64)
            .map(|seed| {
                let mut model = Model::<f32>::new(&cfg, seed).map_err(|e| e.to_string())?;
                let mut opts = PhaseOptions::new(RunPhase::Pretrain, seed);
                opts.epochs = Some(20);
                run_phase(&mut model, &cfg, &train, None, &opts, &mut quiet).map_err(|e| e.to_string())?;
                let mut opts = PhaseOptions::new(RunPhase::Probe, seed);
                opts.epochs = Some(10);
                let r = run_phase(&mut model, &cfg, &train, Some(&val), &opts, &mut quiet).map_err(|e| e.to_string())?;
                r.eval.and_then(|e| e.top1).ok_or_else(|| "no accuracy".to_string())
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(median(accs))
    };
    let pg = scores(TargetNorm::PatchGroup)?;
    let patch = scores(TargetNorm::Patch)?;
    let none = scores(TargetNorm::None)?;
    let msg = format!("median probe top-1: patch-group {pg:.1}, patch {patch:.1}, none {none:.1}");
    ensure(pg >= patch && patch >= none && pg > none, msg.clone())?;
    Ok(msg)
}

fn workflow() -> Outcome {
    ensure(ema_alpha(50) == 0.9, "EMA coefficient")?;
    for (final_div, batch) in [(1e4, 256usize), (2.0, 64)] {
        let s = Schedule { base_lr: 1e-4, batch_size: batch, warmup_fraction: 0.2, final_div, total_steps: 500 };
        let peak = 1e-4 * (batch as f64).sqrt();
        ensure(s.peak() == peak && s.lr(s.warmup_steps()) == peak, "peak learning rate")?;
        ensure((s.lr(499) - peak / final_div).abs() <= 1e-15 * peak, "final learning rate")?;
    }
    let cfg = preset("synthetic_temporal").unwrap();
    let mut recipe = builtin_recipe("toy").unwrap();
    recipe.num_tiles = 4;
    let data = Dataset::synthetic(&recipe, &cfg.dataset).map_err(|e| e.to_string())?;
    let mut model = Model::<f32>::new(&cfg, 0).map_err(|e| e.to_string())?;
    let mut opts = PhaseOptions::new(RunPhase::Probe, 0);
    opts.epochs = Some(2);
    let r = run_phase(&mut model, &cfg, &data, Some(&data), &opts, &mut quiet).map_err(|e| e.to_string())?;
    ensure(r.backbone_checksum_before == r.backbone_checksum_after, "probe changed the backbone")?;
    Ok("probe keeps backbone, EMA 0.9, schedule endpoints exact".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("cost tables", cost_tables),
        ("masking", masking),
        ("normalization", normalization),
        ("gradients", gradients),
        ("round trips", round_trips),
        ("routing accounting", routing),
        ("desk-scale pretraining", pretraining),
        ("fusion direction", fusion_direction),
        ("normalization direction", normalization_direction),
        ("workflow contracts", workflow),
    ];
    let mut out = std::io::stdout();
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => writeln!(out, "[PASS] {} {name}: {detail}", i + 1).unwrap(),
            Err(detail) => {
                writeln!(out, "[FAIL] {} {name}: {detail}", i + 1).unwrap();
                failed.push(i + 1);
            }
        }
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
