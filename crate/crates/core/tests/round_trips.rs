use std::fs;

use maestro_core::error::Error;
use maestro_core::presets::preset;
use maestro_core::synth::{builtin_recipe, generate, read_manifest, read_tile, render, Label, SyntheticRecipe};
use maestro_core::temporal::{d4_inverse, d4_transform};
use maestro_core::tilefile::{decode, encode, read_tensor, write_tensor, Tensor};
use maestro_core::tokenizer::{patchify, unpatchify};
use ndarray::{Array2, Array4, ArrayD, Dimension, IxDyn};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_unpatchify_identity(d in 1usize..4, c in 1usize..4, side in 1usize..5, p in 1usize..4, seed in any::<u64>()) {
        let n = side * p;
        let img = Array4::from_shape_fn((d, c, n, n), |(a, b, i, j)| {
            ((seed.wrapping_mul(31) ^ (a * 1000 + b * 100 + i * 10 + j) as u64) % 997) as f32 * 0.25
        });
        let grid = patchify(img.view(), p).unwrap();
        prop_assert_eq!(grid.positions(), side * side);
        prop_assert_eq!(grid.patch_dim(), c * p * p);
        prop_assert_eq!(unpatchify(&grid).unwrap(), img);
    }

    #[test]
    fn tile_file_identity(shape in prop::collection::vec(1usize..5, 1..5), vals in prop::collection::vec(-1e6f32..1e6, 256)) {
        let n: usize = shape.iter().product();
        let a = ArrayD::from_shape_vec(IxDyn(&shape), vals[..n].to_vec()).unwrap();
        let t = Tensor::F32(a);
        prop_assert_eq!(decode(&encode(&t), "x".as_ref()).unwrap(), t);
        let u = Tensor::U16(ArrayD::from_shape_fn(IxDyn(&shape), |ix: IxDyn| ix.slice().iter().sum::<usize>() as u16));
        prop_assert_eq!(decode(&encode(&u), "x".as_ref()).unwrap(), u);
    }
}

fn probe_image() -> Array2<u32> {
    Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as u32)
}

#[test]
fn d4_group_laws() {
    let a = probe_image();
    let elems: Vec<Array2<u32>> = (0..8).map(|k| d4_transform(&a, k)).collect();
    for i in 0..8 {
        for j in 0..i {
            assert_ne!(elems[i], elems[j], "elements {i} and {j} coincide");
        }
    }
    assert_eq!(elems[0], a);
    for k in 0..8 {
        assert_eq!(d4_transform(&elems[k], d4_inverse(k)), a, "inverse of {k}");
        for j in 0..8 {
            let c = d4_transform(&elems[k], j);
            assert!(elems.contains(&c), "closure fails for {k} then {j}");
        }
    }
    let r = d4_transform(&a, 1);
    assert_eq!(d4_transform(&d4_transform(&d4_transform(&r, 1), 1), 1), a);
}

#[test]
fn d4_acts_on_trailing_axes_only() {
    let a = Array4::from_shape_fn((2, 3, 4, 4), |(t, c, i, j)| (t * 1000 + c * 100 + i * 10 + j) as f32);
    for k in 0..8 {
        let b = d4_transform(&a, k);
        for t in 0..2 {
            for c in 0..3 {
                let slice = a.slice(ndarray::s![t, c, .., ..]).to_owned();
                assert_eq!(b.slice(ndarray::s![t, c, .., ..]), d4_transform(&slice, k));
            }
        }
    }
}

#[test]
fn tile_file_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    let t = Tensor::F32(ArrayD::zeros(IxDyn(&[2, 3])));
    write_tensor(&path, &t).unwrap();
    assert_eq!(read_tensor(&path).unwrap(), t);
    let mut bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::Truncated { .. })));
    bytes[1] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::BadMagic { .. })));
}

fn small(recipe: &str, tiles: usize) -> SyntheticRecipe {
    let mut r = builtin_recipe(recipe).unwrap();
    r.num_tiles = tiles;
    r
}

#[test]
fn generated_dataset_reads_back_identically() {
    let cfg = preset("synthetic_segmentation").unwrap();
    let recipe = small("segmentation", 3);
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&recipe, &cfg.dataset, dir.path()).unwrap();
    let rendered = render(&recipe, &cfg.dataset).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    assert!(cfg.validate().is_ok());
    for (tile, (series, _)) in manifest.tiles.iter().zip(&rendered) {
        for (m, s) in cfg.dataset.modalities.iter().zip(series) {
            let back = read_tile(&manifest, dir.path(), &tile.id, &m.name).unwrap();
            let s = s.as_ref().unwrap();
            assert_eq!(back.times, s.times, "{} {}", tile.id, m.name);
            assert_eq!(back.cloud_mask, s.cloud_mask, "{} {}", tile.id, m.name);
            assert_eq!(back.data, s.data, "{} {}", tile.id, m.name);
        }
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let cfg = preset("synthetic_temporal").unwrap();
    let recipe = small("toy", 2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&recipe, &cfg.dataset, a.path()).unwrap();
    generate(&recipe, &cfg.dataset, b.path()).unwrap();
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap();
        assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn declared_shape_mismatch_is_rejected() {
    let cfg = preset("synthetic_temporal").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = generate(&small("toy", 1), &cfg.dataset, dir.path()).unwrap();
    let id = manifest.tiles[0].id.clone();
    manifest.tiles[0].modalities.get_mut("ts").unwrap().shape[0] += 1;
    assert!(matches!(read_tile(&manifest, dir.path(), &id, "ts"), Err(Error::Shape(_))));
    manifest.tiles[0].modalities.get_mut("ts").unwrap().shape[0] -= 1;
    manifest.tiles[0].modalities.get_mut("ts").unwrap().shape[1] = 3;
    assert!(read_tile(&manifest, dir.path(), &id, "ts").is_err());
}

#[test]
fn noiseless_tile_classes_are_spatially_constant() {
    let cfg = preset("synthetic_spectral").unwrap();
    let mut recipe = small("spectral", 4);
    recipe.noise_sigma = 0.0;
    recipe.gain_jitter = 0.0;
    recipe.offset_jitter = 0.0;
    for (series, label) in render(&recipe, &cfg.dataset).unwrap() {
        assert!(matches!(label, Label::Classes(ref c) if c.len() == 1));
        let data = &series[0].as_ref().unwrap().data;
        for t in 0..data.dim().0 {
            for c in 0..data.dim().1 {
                let v = data[[t, c, 0, 0]];
                assert!(data.slice(ndarray::s![t, c, .., ..]).iter().all(|&x| x == v));
            }
        }
    }
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> (f64, f64) {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let p: f64 = (1..=100).map(|k| 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp()).sum();
    (d, p.clamp(0.0, 1.0))
}

#[test]
fn ks_oracle_sanity() {
    let a: Vec<f64> = (0..500).map(|i| (i as f64 * 0.618).fract()).collect();
    let b: Vec<f64> = (0..500).map(|i| (i as f64 * 0.414 + 0.1).fract()).collect();
    assert!(ks_two_sample(a.clone(), b).1 > 0.5);
    let c: Vec<f64> = a.iter().map(|x| x * 0.5).collect();
    assert!(ks_two_sample(a, c).1 < 1e-6);
}

#[test]
fn temporal_classes_share_monotemporal_marginals() {
    let cfg = preset("synthetic_temporal").unwrap();
    let recipe = small("temporal", 600);
    let tiles = render(&recipe, &cfg.dataset).unwrap();
    let ts = cfg.dataset.modality_index("ts").unwrap();
    let steps = tiles[0].0[ts].as_ref().unwrap().data.dim().0;
    for t in [0, steps / 3, steps - 1] {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (series, label) in &tiles {
            let s = series[ts].as_ref().unwrap();
            if s.cloud_mask.as_ref().is_some_and(|m| m[[t, 3, 3]] > 0.5) {
                continue;
            }
            let v = f64::from(s.data[[t, 0, 3, 3]]);
            match label {
                Label::Classes(c) if c == &[0] => a.push(v),
                Label::Classes(c) if c == &[1] => b.push(v),
                _ => unreachable!(),
            }
        }
        let (d, p) = ks_two_sample(a, b);
        assert!(p > 0.01, "step {t}: D = {d:.3}, p = {p:.4}");
    }
}
