//! Independent reference implementations and the self-test suites built on
//! them. Everything here runs in `f64` and favours obviousness over speed.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::merge::{bipartite_match, bipartite_split, plan_layer, MergeConfig, ScoreMode, Strategy, TokenLayout};
use crate::model::{ForwardOptions, MergeSchedule, Model, ModelConfig};
use crate::numerics::Tensor;
use crate::ssm::{discretize, selective_scan, BlockDims, Direction, DirectionParams};

/// Integrates `h' = a·h + b·u` over one hold interval `delta` with explicit
/// Euler steps of at most `step`. Returns `(Ā, B̄)`: the state after starting
/// from `h = 1, u = 0` and from `h = 0, u = 1`.
pub fn euler_zoh(a: f64, b: f64, delta: f64, step: f64) -> (f64, f64) {
    let n = (delta / step).ceil().max(1.0) as usize;
    let dt = delta / n as f64;
    let (mut h_a, mut h_b) = (1.0, 0.0);
    for _ in 0..n {
        h_a += dt * (a * h_a);
        h_b += dt * (a * h_b + b);
    }
    (h_a, h_b)
}

/// The directional selective scan written as plain loops: projections, Δ
/// path, then `h ← exp(ΔA)h + (exp(ΔA) − 1)/A·B·x`, `y = C·h`.
#[allow(clippy::needless_range_loop)]
pub fn naive_selective_scan(x: &Tensor<f64>, p: &DirectionParams<Tensor<f64>>, direction: Direction) -> Tensor<f64> {
    let (n, inner) = (x.rows(), x.cols());
    let state = p.proj_b.cols();
    let rank = p.dt_down.cols();
    let project = |w: &Tensor<f64>, t: usize, k: usize| (0..inner).map(|i| x.get2(t, i) * w.get2(i, k)).sum::<f64>();
    let mut y = Tensor::zeros(&[n, inner]);
    let mut h = vec![vec![0.0; state]; inner];
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    for t in order {
        let b: Vec<f64> = (0..state).map(|k| project(&p.proj_b, t, k)).collect();
        let c: Vec<f64> = (0..state).map(|k| project(&p.proj_c, t, k)).collect();
        let low: Vec<f64> = (0..rank).map(|k| project(&p.dt_down, t, k)).collect();
        for d in 0..inner {
            let pre = p.dt_bias.data()[d] + (0..rank).map(|k| low[k] * p.dt_up.get2(k, d)).sum::<f64>();
            let delta = if pre > 30.0 { pre } else { pre.exp().ln_1p() };
            let mut acc = 0.0;
            for k in 0..state {
                let a = -p.a_log.get2(d, k).exp();
                let abar = (delta * a).exp();
                let bbar = (abar - 1.0) / a * b[k];
                h[d][k] = abar * h[d][k] + bbar * x.get2(t, d);
                acc += c[k] * h[d][k];
            }
            y.row_mut(t)[d] = acc;
        }
    }
    y
}

/// Bipartite matching by enumeration: every `r`-subset of sources, each
/// source taking its best destination (lowest destination on ties). The
/// winner has the lexicographically largest descending score list, then the
/// smallest ascending source list.
pub fn exhaustive_match(score: &Tensor<f64>, src: &[usize], dst: &[usize], r: usize) -> Vec<(usize, usize)> {
    if r == 0 {
        return Vec::new();
    }
    let m = src.len();
    let best: Vec<(usize, f64)> = (0..m)
        .map(|i| {
            let mut j_best = 0;
            for j in 0..dst.len() {
                if score.get2(i, j) > score.get2(i, j_best) {
                    j_best = j;
                }
            }
            (j_best, score.get2(i, j_best))
        })
        .collect();
    let mut winner: Option<(Vec<f64>, Vec<usize>, u32)> = None;
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize != r {
            continue;
        }
        let chosen: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let mut scores: Vec<f64> = chosen.iter().map(|&i| best[i].1).collect();
        scores.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
        let positions: Vec<usize> = chosen.iter().map(|&i| src[i]).collect();
        let better = match &winner {
            None => true,
            Some((ws, wp, _)) => match scores.partial_cmp(ws).expect("finite scores") {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => positions < *wp,
            },
        };
        if better {
            winner = Some((scores, positions, mask));
        }
    }
    let mask = winner.expect("r ≤ |src|").2;
    let mut pairs: Vec<(usize, usize)> = (0..m)
        .filter(|i| mask & (1 << i) != 0)
        .map(|i| (src[i], dst[best[i].0]))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest error seen, in the suite's own metric.
    pub worst: f64,
    pub detail: String,
    pub elapsed: Duration,
}

impl SuiteReport {
    fn finish(name: &'static str, start: Instant, passed: bool, cases: usize, worst: f64, detail: String) -> Self {
        Self {
            name,
            passed,
            cases,
            worst,
            detail,
            elapsed: start.elapsed(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {:<14} cases {:>5}  worst {:.3e}  {:>8.3}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

/// Continuous `A` range sampled by the discretisation suite. Euler with
/// step `h` is itself off by about `|A|·h/2` in B̄, which bounds the range.
pub const A_RANGE: (f64, f64) = (-1.0, -0.01);

/// ZOH against fine Euler integration on random `(A, B, Δ ∈ (0, 0.1])`.
pub fn discretization_suite(cases: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let a = rng.random_range(A_RANGE.0..A_RANGE.1);
        let b = rng.random_range(-2.0..2.0);
        let delta = 0.1 * (1.0 - rng.random_range(0.0..1.0f64));
        let (abar, bbar) = match discretize(&[a], &[b], delta) {
            Ok((ab, bb)) => (ab[0], bb[0]),
            Err(e) => return SuiteReport::finish("discretization", start, false, cases, f64::INFINITY, e.to_string()),
        };
        let (ea, eb) = euler_zoh(a, b, delta, 1e-6);
        worst = worst.max(((abar - ea) / ea).abs()).max(((bbar - eb) / eb).abs());
    }
    let passed = worst < 1e-6;
    SuiteReport::finish("discretization", start, passed, cases, worst, "relative error vs Euler, bound 1e-6".into())
}

fn random_direction(rng: &mut ChaCha8Rng, inner: usize, state: usize, rank: usize) -> DirectionParams<Tensor<f64>> {
    let dims = BlockDims {
        embed: inner,
        inner,
        state,
        dt_rank: rank,
    };
    let mut p = DirectionParams::<Tensor<f64>>::init(rng, dims);
    p.a_log = Tensor::random_uniform(rng, &[inner, state], -1.0, 1.5);
    p
}

/// `selective_scan` against the plain-loop recurrence on `N = 32` sequences.
pub fn scan_suite(cases: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let (inner, state, rank) = (rng.random_range(1..=8), rng.random_range(1..=6), rng.random_range(1..=3));
        let p = random_direction(&mut rng, inner, state, rank);
        let x = Tensor::random_uniform(&mut rng, &[32, inner], -2.0, 2.0);
        let dir = if i % 2 == 0 { Direction::Forward } else { Direction::Backward };
        let fast = match selective_scan(&x, &p, dir) {
            Ok(o) => o.y,
            Err(e) => return SuiteReport::finish("scan", start, false, i, f64::INFINITY, e.to_string()),
        };
        let slow = naive_selective_scan(&x, &p, dir);
        let scale = slow.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(fast.max_abs_diff(&slow) / scale);
    }
    let passed = worst < 1e-10;
    SuiteReport::finish("scan", start, passed, cases, worst, "max error vs naive recurrence, bound 1e-10".into())
}

/// Ā under extreme step sizes: large Δ forgets, tiny Δ keeps the state.
pub fn delta_limit_suite(cases: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (1..=16).map(|k| -(k as f64)).collect();
    let b = vec![1.0; a.len()];
    let (mut worst_big, mut worst_small): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let base = (0.01f64.ln() + rng.random_range(0.0..1.0) * (0.1f64.ln() - 0.01f64.ln())).exp();
        let Ok((big, _)) = discretize(&a, &b, base * 1e3) else {
            return SuiteReport::finish("delta_limits", start, false, cases, f64::INFINITY, "discretize failed".into());
        };
        let Ok((small, _)) = discretize(&a, &b, base * 1e-6) else {
            return SuiteReport::finish("delta_limits", start, false, cases, f64::INFINITY, "discretize failed".into());
        };
        worst_big = big.iter().fold(worst_big, |m, v| m.max(v.abs()));
        worst_small = small.iter().fold(worst_small, |m, v| m.max((v - 1.0).abs()));
    }
    let passed = worst_big < 1e-3 && worst_small < 1e-3;
    let detail = format!("max |Ā| at Δ·1e3 = {worst_big:.2e}, max |Ā−1| at Δ·1e-6 = {worst_small:.2e}");
    SuiteReport::finish("delta_limits", start, passed, cases, worst_big.max(worst_small), detail)
}

/// Greedy matching against enumeration on random instances with `N ≤ 16`,
/// every `r`. Half the instances use coarse scores so ties occur.
pub fn matching_suite(instances: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for inst in 0..instances {
        let n = rng.random_range(2..=16);
        let cls = if rng.random_bool(0.5) { Some(rng.random_range(0..n)) } else { None };
        let layout = TokenLayout::identity(n, cls);
        let (src, dst) = bipartite_split(&layout);
        if src.is_empty() || dst.is_empty() {
            continue;
        }
        let coarse = inst % 2 == 1;
        let data = (0..src.len() * dst.len())
            .map(|_| {
                let v: f64 = rng.random_range(0.0..1.0);
                if coarse {
                    (v * 4.0).floor() / 4.0
                } else {
                    v
                }
            })
            .collect();
        let score = Tensor::from_vec(&[src.len(), dst.len()], data).expect("score shape");
        for r in 0..=src.len() {
            let fast = match bipartite_match(&score, &src, &dst, r) {
                Ok(p) => p,
                Err(e) => return SuiteReport::finish("matching", start, false, checked, 1.0, e.to_string()),
            };
            let slow = exhaustive_match(&score, &src, &dst, r);
            checked += 1;
            if fast != slow {
                let detail = format!("instance {inst}, r = {r}: {fast:?} vs {slow:?}");
                return SuiteReport::finish("matching", start, false, checked, 1.0, detail);
            }
        }
    }
    SuiteReport::finish("matching", start, true, checked, 0.0, format!("{instances} instances, exact pair sets"))
}

/// With `τ = 1e9` the Δ-weighted score picks the same pairs as similarity
/// alone.
pub fn tome_reduction_suite(cases: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..cases {
        let n = rng.random_range(6..=40);
        let d = rng.random_range(2..=8);
        let layout = TokenLayout::identity(n, Some(n / 2));
        let t_star = Tensor::<f64>::random_uniform(&mut rng, &[n, d], -1.0, 1.0);
        let df = Tensor::<f64>::random_uniform(&mut rng, &[n, 4], 0.0, 2.0);
        let db = Tensor::<f64>::random_uniform(&mut rng, &[n, 4], 0.0, 2.0);
        let (src, _) = bipartite_split(&layout);
        let r = rng.random_range(1..=src.len());
        let cfg = MergeConfig { r, tau: 1e9, ..Default::default() };
        let sim = MergeConfig { score: ScoreMode::SimilarityOnly, ..cfg };
        let plans = plan_layer(&layout, &t_star, &df, &db, &cfg, &mut rng)
            .and_then(|a| Ok((a, plan_layer(&layout, &t_star, &df, &db, &sim, &mut rng)?)));
        match plans {
            Ok(((_, a), (_, b))) if a.decision.pairs == b.decision.pairs => {}
            Ok(((_, a), (_, b))) => {
                let detail = format!("case {i}: {:?} vs {:?}", a.decision.pairs, b.decision.pairs);
                return SuiteReport::finish("tome_reduction", start, false, i + 1, 1.0, detail);
            }
            Err(e) => return SuiteReport::finish("tome_reduction", start, false, i + 1, 1.0, e.to_string()),
        }
    }
    SuiteReport::finish("tome_reduction", start, true, cases, 0.0, "identical pair sets at τ = 1e9".into())
}

/// Small `f64` model used by the bookkeeping and gradient suites.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        depth: 3,
        embed_dim: 8,
        inner_dim: 12,
        state_dim: 4,
        dt_rank: 2,
        grid_side: 4,
        raw_dim: 5,
        n_classes: 3,
        ..Default::default()
    }
}

/// Length, size and class-token bookkeeping across full forward passes
/// under every arrangement strategy.
pub fn bookkeeping_suite(cases: usize, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig { depth: 4, grid_side: 6, ..check_model_config() };
    let model = match Model::<f64>::new(cfg.clone(), seed) {
        Ok(m) => m,
        Err(e) => return SuiteReport::finish("bookkeeping", start, false, 0, 1.0, e.to_string()),
    };
    let fail = |i: usize, what: String| SuiteReport::finish("bookkeeping", start, false, i + 1, 1.0, what);
    for i in 0..cases {
        let strategy = Strategy::ALL[i % Strategy::ALL.len()];
        let r = rng.random_range(1..=5);
        let merge = MergeConfig { r, strategy, ..Default::default() };
        let schedule = MergeSchedule::uniform(&[0, 1, 3], merge).expect("static layers");
        let grid = Tensor::random_uniform(&mut rng, &[cfg.n_patches(), cfg.raw_dim], -1.0, 1.0);
        let out = match model.forward(&grid, &schedule, ForwardOptions { collect_trace: true, seed: i as u64 }) {
            Ok(o) => o,
            Err(e) => return fail(i, e.to_string()),
        };
        let n0 = cfg.n_tokens();
        let cls = cfg.cls_pos();
        for t in &out.traces {
            let (before, after) = (t.input_members.len(), t.output_members.len());
            if before - after != r {
                return fail(i, format!("layer {} shrank {before} → {after}, r = {r}", t.layer));
            }
            let total: usize = t.output_members.iter().map(Vec::len).sum();
            if total != n0 {
                return fail(i, format!("layer {} holds {total} of {n0} tokens", t.layer));
            }
            if !t.output_members.iter().any(|m| m == &[cls]) {
                return fail(i, format!("layer {} lost the class singleton", t.layer));
            }
        }
        let sizes: u64 = out.layout.sizes.iter().map(|&s| s as u64).sum();
        if sizes != n0 as u64 || out.layout.validate(n0).is_err() {
            return fail(i, "final layout does not conserve sizes".into());
        }
        if strategy == Strategy::OrdFront && out.layout.orig_index.windows(2).any(|w| w[0] >= w[1]) {
            return fail(i, format!("ord_front order broken: {:?}", out.layout.orig_index));
        }
    }
    SuiteReport::finish("bookkeeping", start, true, cases, 0.0, "length −r per layer, sizes, class token, order".into())
}

fn nudge(model: &mut Model<f64>, flat: usize, by: f64) {
    let mut offset = 0;
    model.params.visit_mut(&mut |t| {
        let len = t.len();
        if (offset..offset + len).contains(&flat) {
            t.data_mut()[flat - offset] += by;
        }
        offset += len;
    });
}

/// Central-difference step of the gradient suite.
pub const FD_EPS: f64 = 1e-5;

/// Full-model gradient, merges included, against central differences at
/// `samples` random parameters whose perturbation leaves every merge
/// decision unchanged.
pub fn gradient_suite(samples: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = check_model_config();
    let mut model = Model::<f64>::new(cfg.clone(), seed)?;
    // move the unit norm gains and small class token off their init values
    model.params.visit_mut(&mut |t| {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    });
    let schedule = MergeSchedule::uniform(&[0, 1], MergeConfig { r: 2, tau: 0.5, ..Default::default() })?;
    let grid = Tensor::random_uniform(&mut rng, &[cfg.n_patches(), cfg.raw_dim], -1.0, 1.0);
    let label = 1;
    let analytic = model.loss_and_grad(&grid, label, &schedule, seed)?;
    let flat_grad: Vec<f64> = analytic.grads.leaves().iter().flat_map(|t| t.data().to_vec()).collect();
    let (_, base_traces) = model.loss(&grid, label, &schedule, seed)?;
    let decisions = |tr: &[crate::merge::LayerTrace]| tr.iter().map(|t| t.decision.partition.clone()).collect::<Vec<_>>();
    let reference = decisions(&base_traces);
    let n = flat_grad.len();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    let mut attempts = 0;
    while checked < samples && attempts < 20 * samples {
        attempts += 1;
        let k = rng.random_range(0..n);
        nudge(&mut model, k, FD_EPS);
        let (up, up_tr) = model.loss(&grid, label, &schedule, seed)?;
        nudge(&mut model, k, -2.0 * FD_EPS);
        let (down, down_tr) = model.loss(&grid, label, &schedule, seed)?;
        nudge(&mut model, k, FD_EPS);
        if decisions(&up_tr) != reference || decisions(&down_tr) != reference {
            skipped += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * FD_EPS);
        let g = flat_grad[k];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
    }
    let passed = checked >= samples && worst < 1e-4;
    let detail = format!("{checked} of {n} parameters, {skipped} skipped at decision boundaries, bound 1e-4");
    Ok(SuiteReport::finish("gradient", start, passed, checked, worst, detail))
}

/// Every oracle suite at its acceptance size.
pub fn selftest(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        discretization_suite(1000, seed),
        scan_suite(100, seed),
        delta_limit_suite(100, seed),
        matching_suite(1000, seed),
        tome_reduction_suite(100, seed),
        bookkeeping_suite(60, seed),
        gradient_suite(120, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_reference_on_closed_form() {
        let (a, b) = euler_zoh(-1.0, 1.0, std::f64::consts::LN_2, 1e-6);
        assert!((a - 0.5).abs() < 1e-6);
        assert!((b - 0.5).abs() < 1e-6);
    }

    #[test]
    fn exhaustive_fixture() {
        let score = Tensor::from_rows(&[vec![0.9, 0.1, 0.1], vec![0.2, 0.8, 0.1], vec![0.3, 0.3, 0.4]]).unwrap();
        assert_eq!(exhaustive_match(&score, &[0, 2, 4], &[1, 3, 5], 2), vec![(0, 1), (2, 3)]);
        let flat = Tensor::full(&[3, 3], 0.5);
        assert_eq!(exhaustive_match(&flat, &[0, 2, 4], &[1, 3, 5], 1), vec![(0, 1)]);
    }

    #[test]
    fn small_suites_pass() {
        for s in [
            discretization_suite(20, 3),
            scan_suite(4, 3),
            delta_limit_suite(4, 3),
            matching_suite(30, 3),
            tome_reduction_suite(10, 3),
            bookkeeping_suite(6, 3),
        ] {
            assert!(s.passed, "{}", s.line());
        }
    }
}
