use mame_core::bench::{estimate_flops, measure_throughput, ArchSpec, Placement};
use mame_core::data::{generate, DatasetSpec};
use mame_core::merge::MergeConfig;
use mame_core::model::{MergeSchedule, Model, ModelConfig};
use mame_core::numerics::Tensor;
use proptest::prelude::*;

fn at(layers: &[usize], r: usize) -> MergeSchedule {
    MergeSchedule::uniform(layers, MergeConfig { r, ..Default::default() }).unwrap()
}

#[test]
fn placement_depth_orders_flops() {
    let arch = ArchSpec::vim_tiny();
    let g = |p: Placement| estimate_flops(&arch, &at(&p.layers(24), 50)).unwrap().total;
    assert!(g(Placement::Shallow) < g(Placement::Even));
    assert!(g(Placement::Even) < g(Placement::Standard));
    assert!(g(Placement::Standard) < g(Placement::Deep));
}

#[test]
fn vim_tiny_frozen_totals() {
    // 1 MAC counted as 1 FLOP, scan at 9 per cell
    let rep = estimate_flops(&ArchSpec::vim_tiny(), &at(&[8, 14, 20], 50)).unwrap();
    assert_eq!(format!("{:.4}", rep.baseline as f64 / 1e9), "1.8156");
    assert_eq!(format!("{:.4}", rep.total as f64 / 1e9), "1.3111");
}

proptest! {
    #[test]
    fn flops_strictly_fall_with_r(r in 0usize..40, a in 0usize..8, gap in 1usize..8) {
        let arch = ArchSpec::vim_tiny();
        let layers = [a, a + gap, a + 2 * gap];
        let lo = estimate_flops(&arch, &at(&layers, r)).unwrap();
        let hi = estimate_flops(&arch, &at(&layers, r + 1)).unwrap();
        prop_assert!(hi.total < lo.total);
        prop_assert!(lo.total <= lo.baseline);
        prop_assert!(lo.layers.iter().all(|l| l.block > 0));
    }
}

fn timing_setup(batch: usize) -> (Model<f32>, Vec<Tensor<f32>>) {
    let cfg = ModelConfig::default();
    let model = Model::<f32>::new(cfg, 0).unwrap();
    let spec = DatasetSpec { samples_per_class: batch.div_ceil(10), ..Default::default() };
    let (tr, _) = generate(&spec).unwrap();
    (model, (0..batch).map(|i| tr.grid(i)).collect())
}

#[test]
#[ignore = "wall-clock timing; noisy on shared machines"]
fn doubling_batch_keeps_per_image_rate() {
    let (model, grids) = timing_setup(128);
    let sch = MergeSchedule::empty();
    let small = measure_throughput(&model, &grids[..64], &sch, 2, 5, 1).unwrap();
    let big = measure_throughput(&model, &grids, &sch, 2, 5, 1).unwrap();
    assert!(big.images_per_sec > 0.9 * small.images_per_sec, "{} vs {}", big.images_per_sec, small.images_per_sec);
}

#[test]
#[ignore = "wall-clock timing; noisy on shared machines"]
fn consecutive_runs_agree_within_five_percent() {
    let (model, grids) = timing_setup(64);
    let sch = MergeSchedule::toy_default();
    let a = measure_throughput(&model, &grids, &sch, 2, 5, 1).unwrap().images_per_sec;
    let b = measure_throughput(&model, &grids, &sch, 2, 5, 1).unwrap().images_per_sec;
    assert!((a - b).abs() / a.max(b) < 0.05, "{a} vs {b}");
}
