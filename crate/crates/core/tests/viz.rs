use std::collections::{BTreeMap, BTreeSet};

use mame_core::merge::{mame_layer, LayerTrace, MergeConfig, TokenSequence};
use mame_core::model::{ForwardOptions, MergeSchedule, Model, ModelConfig};
use mame_core::numerics::Tensor;
use mame_core::viz::{patch_groups, render, RenderKind, RenderSpec, TraceFile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn traces(schedule: &MergeSchedule) -> Vec<LayerTrace> {
    let cfg = ModelConfig::default();
    let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = Tensor::random_uniform(&mut rng, &[cfg.n_patches(), cfg.raw_dim], -1.0, 1.0);
    let opts = ForwardOptions { collect_trace: true, seed: 0 };
    model.forward(&grid, schedule, opts).unwrap().traces
}

/// Stroke attribute of every rect, after a well-formedness parse.
fn strokes(svg: &str) -> Vec<String> {
    let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
    doc.descendants()
        .filter(|n| n.has_tag_name("rect"))
        .map(|n| n.attribute("stroke").unwrap_or("").to_string())
        .collect()
}

fn spec(kind: RenderKind) -> RenderSpec {
    RenderSpec { palette_seed: 7, ..RenderSpec::new(8, kind) }
}

#[test]
fn merge_map_has_one_rect_per_cell_and_group_colors() {
    let ts = traces(&MergeSchedule::toy_default());
    let last = ts.last().unwrap();
    let svg = String::from_utf8(render(last, &spec(RenderKind::MergeMap)).unwrap()).unwrap();
    let s = strokes(&svg);
    assert_eq!(s.len(), 64);
    let groups = patch_groups(last, 8).unwrap();
    let mut by_group: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for (g, st) in groups.iter().zip(&s) {
        by_group.entry(*g).or_default().insert(st);
    }
    for (g, colors) in by_group {
        let size = groups.iter().filter(|&&x| x == g).count();
        assert_eq!(colors.len(), 1, "group {g}");
        assert_eq!(colors.contains("none"), size == 1, "group {g}");
    }
}

#[test]
fn zero_reduction_draws_no_borders() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut u = |cols: usize| Tensor::<f64>::random_uniform(&mut rng, &[65, cols], 0.0, 1.0);
    let (prev, star, df, db) = (u(4), u(4), u(6), u(6));
    let seq = TokenSequence::new(prev, Some(32));
    let cfg = MergeConfig { r: 0, ..Default::default() };
    let (_, t) = mame_layer(&seq, &df, &db, &star, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let svg = String::from_utf8(render(&t, &spec(RenderKind::MergeMap)).unwrap()).unwrap();
    assert!(strokes(&svg).iter().all(|s| s == "none"));
}

#[test]
fn single_group_is_one_color() {
    let mut t = traces(&MergeSchedule::toy_default()).remove(0);
    let cls = t.input_members[t.input_cls_pos.unwrap()].clone();
    let patches: Vec<usize> = (0..65).filter(|o| !cls.contains(o)).collect();
    t.output_members = vec![patches, cls];
    let svg = String::from_utf8(render(&t, &spec(RenderKind::MergeMap)).unwrap()).unwrap();
    let s: BTreeSet<String> = strokes(&svg).into_iter().collect();
    assert_eq!(s.len(), 1);
    assert!(!s.contains("none"));
}

#[test]
fn rendering_is_byte_identical_through_trace_files() {
    let dir = tempfile::tempdir().unwrap();
    let ts = traces(&MergeSchedule::toy_default());
    let file = TraceFile { grid_side: 8, sample: 0, label: 0, predicted: 0, traces: ts };
    let path = dir.path().join("trace.json");
    file.save(&path).unwrap();
    for kind in RenderKind::ALL {
        let a = render(&file.traces[1], &spec(kind)).unwrap();
        let b = render(&TraceFile::load(&path).unwrap().traces[1], &spec(kind)).unwrap();
        assert_eq!(a, b, "{}", kind.tag());
    }
    let heat = render(&file.traces[0], &spec(RenderKind::DeltaHeatmap)).unwrap();
    let header = b"P6\n128 128\n255\n";
    assert_eq!(&heat[..header.len()], header);
    assert_eq!(heat.len() - header.len(), 3 * 128 * 128);
}
