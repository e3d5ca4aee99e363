use maestro_core::config::{Multispectral, TargetNorm};
use maestro_core::cost::{block_macs, encoder_macs, pretrain_cost, transfer_cost};
use maestro_core::presets::{preset, BENCHMARKS};

const PRETRAIN_JOINT: [f64; 4] = [14.3, 56.1, 59.1, 65.4];
const PRETRAIN_TOKEN: [f64; 4] = [33.7, 173.6, 133.9, 146.9];
const TRANSFER_JOINT: [f64; 4] = [39.1, 163.4, 167.4, 185.1];
const TRANSFER_TOKEN: [f64; 4] = [95.0, 549.9, 403.9, 440.8];

fn gmacs(name: &str, ms: Multispectral, pretrain: bool) -> (f64, u64, u64) {
    let mut cfg = preset(name).unwrap();
    cfg.fusion.multispectral = ms;
    let r = if pretrain {
        pretrain_cost(&cfg.dataset, &cfg.fusion, &cfg.dims).unwrap()
    } else {
        transfer_cost(&cfg.dataset, &cfg.fusion, &cfg.dims).unwrap()
    };
    (r.macs() as f64 / 1e9, r.macs(), r.flops())
}

#[test]
fn benchmark_cells_within_half_percent() {
    for (i, name) in BENCHMARKS.iter().enumerate() {
        for (ms, pre, table) in [
            (Multispectral::JointToken, true, PRETRAIN_JOINT),
            (Multispectral::TokenBased, true, PRETRAIN_TOKEN),
            (Multispectral::JointToken, false, TRANSFER_JOINT),
            (Multispectral::TokenBased, false, TRANSFER_TOKEN),
        ] {
            let (g, macs, flops) = gmacs(name, ms, pre);
            let rel = (g - table[i]).abs() / table[i];
            assert!(rel < 5e-3, "{name} {ms:?} pretrain={pre}: {g:.3} vs {}", table[i]);
            assert_eq!(flops, 2 * macs);
        }
    }
}

#[test]
fn treesat_pretrain_by_hand() {
    // Group mode, joint tokens: aerial 225, S1 pair 72, S2 144 tokens.
    let (ce, cd) = (768u64, 512u64);
    let lengths = [225u64, 72, 144];
    let visible: Vec<u64> = lengths.iter().map(|&l| ((l as f64) * 0.25 + 0.5).floor() as u64).collect();
    let enc: u64 = visible.iter().map(|&v| 12 * v * ce * ce + 2 * v * v * ce).sum::<u64>() * 12;
    let dec: u64 = lengths.iter().map(|&l| 12 * l * cd * cd + 2 * l * l * cd).sum::<u64>() * 3;
    let e2d: u64 = visible.iter().sum::<u64>() * ce * cd;
    let pixels: u64 = 300 * 300 * 4 + 2 * 6 * 6 * 4 * 2 + 6 * 6 * 16 * 10;
    let total = enc + dec + e2d + pixels * (ce + cd);
    let cfg = preset("treesatai_ts").unwrap();
    let r = pretrain_cost(&cfg.dataset, &cfg.fusion, &cfg.dims).unwrap();
    assert_eq!(r.macs(), total);
}

#[test]
fn target_norm_does_not_change_cost() {
    let mut cfg = preset("pastis_hd").unwrap();
    let a = pretrain_cost(&cfg.dataset, &cfg.fusion, &cfg.dims).unwrap();
    cfg.fusion.target_norm = TargetNorm::None;
    assert_eq!(a, pretrain_cost(&cfg.dataset, &cfg.fusion, &cfg.dims).unwrap());
}

#[test]
fn fusion_boundary_bounds() {
    let cfg = preset("flair2").unwrap();
    let d = cfg.dims;
    let all = encoder_macs(&[10, 20], &d, Some(d.encoder_depth));
    assert_eq!(all, encoder_macs(&[10, 20], &d, None));
    let none = encoder_macs(&[10, 20], &d, Some(0));
    assert_eq!(none, block_macs(30, d.encoder_width as u64) * d.encoder_depth as u64);
}
