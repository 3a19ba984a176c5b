use mame_core::merge::*;
use mame_core::merge::Strategy;
use mame_core::model::{ForwardOptions, MergeSchedule, Model, ModelConfig};
use mame_core::numerics::Tensor;
use mame_core::oracle::exhaustive_match;
use proptest::prelude::*;
use proptest::strategy::Strategy as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::random_uniform(rng, shape, lo, hi)
}

/// One merge layer on an unmerged sequence, spelled out step by step.
fn straight_line(
    t_prev: &[Vec<f64>],
    t_star: &[Vec<f64>],
    delta_f: &[Vec<f64>],
    delta_b: &[Vec<f64>],
    cls: usize,
    r: usize,
    tau: f64,
) -> (Vec<(usize, usize)>, Vec<Vec<f64>>) {
    let n = t_star.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let dhat: Vec<f64> = (0..n).map(|i| 0.5 * (mean(&delta_f[i]) + mean(&delta_b[i]))).collect();
    let src: Vec<usize> = (0..n).filter(|&p| p != cls && p % 2 == 0).collect();
    let dst: Vec<usize> = (0..n).filter(|&p| p != cls && p % 2 == 1).collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut best = Vec::new();
    for &i in &src {
        let mut top = (dst[0], f64::NEG_INFINITY);
        for &j in &dst {
            let w_sim = (cos(&t_star[i], &t_star[j]) + 1.0) / 2.0;
            let w_delta = (-(dhat[i] + dhat[j]) / (2.0 * tau)).exp();
            let s = w_sim * w_delta;
            if s > top.1 {
                top = (j, s);
            }
        }
        best.push((i, top.0, top.1));
    }
    best.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    let mut pairs: Vec<(usize, usize)> = best[..r].iter().map(|&(i, j, _)| (i, j)).collect();
    pairs.sort();
    // groups keyed by destination, emitted at their frontmost member
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for p in 0..n {
        if pairs.iter().any(|&(s, _)| s == p) {
            continue;
        }
        let mut g: Vec<usize> = pairs.iter().filter(|&&(_, d)| d == p).map(|&(s, _)| s).collect();
        g.push(p);
        g.sort();
        groups.push(g);
    }
    groups.sort_by_key(|g| g[0]);
    let d = t_star[0].len();
    let out = groups
        .iter()
        .map(|g| {
            (0..d)
                .map(|c| g.iter().map(|&m| t_star[m][c] + t_prev[m][c]).sum::<f64>() / g.len() as f64)
                .collect()
        })
        .collect();
    (pairs, out)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn layer_matches_straight_line_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (n, d, cls) = (8, 4, 3);
    for tau in [0.05, 0.5, 10.0] {
        let prev = uniform(&mut rng, &[n, d], -1.0, 1.0);
        let star = uniform(&mut rng, &[n, d], -1.0, 1.0);
        let df = uniform(&mut rng, &[n, 5], 0.0, 2.0);
        let db = uniform(&mut rng, &[n, 5], 0.0, 2.0);
        let cfg = MergeConfig { r: 2, tau, ..Default::default() };
        let seq = TokenSequence::new(prev.clone(), Some(cls));
        let (next, trace) = mame_layer(&seq, &df, &db, &star, &cfg, &mut rng).unwrap();
        let (pairs, want) = straight_line(&rows(&prev), &rows(&star), &rows(&df), &rows(&db), cls, 2, tau);
        assert_eq!(trace.decision.pairs, pairs, "tau {tau}");
        let got = rows(&next.values);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() < 1e-12, "tau {tau}: {g} vs {w}");
        }
    }
}

#[test]
fn huge_tau_forward_equals_similarity_only() {
    let cfg = ModelConfig { depth: 4, grid_side: 6, embed_dim: 16, inner_dim: 24, ..Default::default() };
    let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let base = MergeSchedule::uniform(&[1, 2], MergeConfig { r: 6, tau: 1e9, ..Default::default() }).unwrap();
    let sim = base.with_score(ScoreMode::SimilarityOnly);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..5 {
        let grid = uniform(&mut rng, &[cfg.n_patches(), cfg.raw_dim], -1.0, 1.0);
        let opts = ForwardOptions { collect_trace: false, seed: i };
        let a = model.forward(&grid, &base, opts).unwrap();
        let b = model.forward(&grid, &sim, opts).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }
}

#[test]
fn supplementary_merge_example_with_delta() {
    // constituents 3, 5, 7 merge into 8 (positions 2, 4, 6 → 7); token 5 is most informative
    let vals = Tensor::from_vec(&[9, 1], (1..=9).map(f64::from).collect()).unwrap();
    let seq = TokenSequence::new(vals, None);
    let pairs = [(2, 7), (4, 7), (6, 7)];
    let mut dh = vec![0.1; 9];
    dh[4] = 3.0;
    let out = arrange(&seq, &pairs, Strategy::Informativeness, Some(&dh)).unwrap();
    assert_eq!(out.orig_index(), &[0, 1, 3, 4, 5, 8]);
    assert_eq!(out.values.data()[3], 5.75);
}

#[derive(Debug)]
struct Case {
    n: usize,
    d: usize,
    cls: Option<usize>,
    r: usize,
    strategy: Strategy,
    f: Integration,
    tau: f64,
    seed: u64,
}

fn case() -> impl prop::strategy::Strategy<Value = Case> {
    (4usize..40, 1usize..6, any::<bool>(), 0usize..6, 0usize..4, 0.05f64..50.0, any::<u64>(), any::<prop::sample::Index>(), any::<prop::sample::Index>())
        .prop_map(|(n, d, has_cls, si, fi, tau, seed, ci, ri)| {
            let cls = has_cls.then(|| ci.index(n));
            let src = (0..n).filter(|&p| Some(p) != cls && p % 2 == 0).count();
            Case {
                n,
                d,
                cls,
                r: ri.index(src + 1),
                strategy: Strategy::ALL[si],
                f: Integration::ALL[fi],
                tau,
                seed,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn layer_bookkeeping(c in case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let prev = uniform(&mut rng, &[c.n, c.d], -1.0, 1.0);
        let star = uniform(&mut rng, &[c.n, c.d], -1.0, 1.0);
        let df = uniform(&mut rng, &[c.n, 3], 0.0, 1.0);
        let db = uniform(&mut rng, &[c.n, 3], 0.0, 1.0);
        let cfg = MergeConfig { r: c.r, tau: c.tau, f: c.f, strategy: c.strategy, score: ScoreMode::Mame };
        let seq = TokenSequence::new(prev, c.cls);
        let (next, trace) = mame_layer(&seq, &df, &db, &star, &cfg, &mut rng).unwrap();
        prop_assert_eq!(next.len(), c.n - c.r);
        prop_assert!(next.layout.validate(c.n).is_ok());
        if let Some(cls) = c.cls {
            prop_assert!(!trace.src.contains(&cls) && !trace.dst.contains(&cls));
            let k = next.cls_pos().unwrap();
            prop_assert_eq!(&next.layout.members[k], &vec![cls]);
        }
        for (i, row) in trace.score.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                let (w, wd) = (trace.w_sim[i][j], trace.w_delta[i][j]);
                prop_assert!((0.0..=1.0).contains(&w));
                prop_assert!(wd > 0.0 && wd <= 1.0);
                prop_assert_eq!(s, w * wd);
            }
        }
        let survivors: Vec<usize> = next.layout.sizes.iter().zip(next.orig_index())
            .filter(|(&s, _)| s == 1).map(|(_, &o)| o).collect();
        match c.strategy {
            Strategy::OrdFront => prop_assert!(next.orig_index().windows(2).all(|w| w[0] < w[1])),
            Strategy::IsoLast => prop_assert!(survivors.windows(2).all(|w| w[0] < w[1])),
            _ => {}
        }
    }

    #[test]
    fn matching_equals_enumeration(m in 1usize..8, n in 1usize..8, coarse in any::<bool>(), seed in any::<u64>(), ri in any::<prop::sample::Index>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut score = uniform(&mut rng, &[m, n], 0.0, 1.0);
        if coarse {
            score = score.map(|v| (v * 3.0).floor() / 3.0);
        }
        let src: Vec<usize> = (0..m).map(|i| 2 * i).collect();
        let dst: Vec<usize> = (0..n).map(|j| 2 * j + 1).collect();
        let r = ri.index(m + 1);
        prop_assert_eq!(bipartite_match(&score, &src, &dst, r).unwrap(), exhaustive_match(&score, &src, &dst, r));
    }

    #[test]
    fn similarity_and_delta_weight_bounds(a in prop::collection::vec(-5.0f64..5.0, 1..8), b in prop::collection::vec(-5.0f64..5.0, 1..8), di in 0.0f64..100.0, dj in 0.0f64..100.0, tau in 1e-3f64..1e3) {
        let k = a.len().min(b.len());
        let w = similarity_weight(&a[..k], &b[..k]);
        prop_assert!((0.0..=1.0).contains(&w));
        let wd = delta_weight(di, dj, tau);
        prop_assert!((0.0..=1.0).contains(&wd));
        prop_assert!(delta_weight(di + 1.0, dj, tau) <= wd);
    }
}
