use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::arrange::{MergePlan, Strategy};
use super::matching::{bipartite_match, bipartite_split};
use super::score::{delta_weight_matrix, integrate_delta, merge_score, similarity_matrix, Integration};
use super::sequence::{TokenLayout, TokenSequence};

/// Which score drives matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `W_sim ⊙ W_Δ`.
    #[default]
    Mame,
    /// `W_sim` alone.
    SimilarityOnly,
    /// Uniform(0, 1) scores.
    Random,
}

impl ScoreMode {
    pub const ALL: [ScoreMode; 3] = [Self::Mame, Self::SimilarityOnly, Self::Random];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Mame => "mame",
            Self::SimilarityOnly => "similarity_only",
            Self::Random => "random",
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mame" => Ok(Self::Mame),
            "similarity_only" | "sim_only" | "sim" => Ok(Self::SimilarityOnly),
            "random" => Ok(Self::Random),
            other => Err(Error::UnknownTag {
                kind: "score mode",
                tag: other.to_string(),
            }),
        }
    }
}

/// Per-layer merge settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub r: usize,
    pub tau: f64,
    pub f: Integration,
    pub strategy: Strategy,
    pub score: ScoreMode,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            r: 0,
            tau: 10.0,
            f: Integration::Avg,
            strategy: Strategy::OrdFront,
            score: ScoreMode::Mame,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// What a merge layer decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeDecision {
    /// `(src, dst)` current positions, sorted by source.
    pub pairs: Vec<(usize, usize)>,
    /// Input positions feeding each output slot.
    pub partition: Vec<Vec<usize>>,
    pub strategy: Strategy,
    pub tau: f64,
    pub integration: Integration,
    pub score_mode: ScoreMode,
}

/// Everything a merge layer computed, for tests and visualisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// Block index (0-based) after which the merge ran.
    pub layer: usize,
    /// Per input token.
    pub delta_hat: Vec<f64>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `src × dst`; empty in random mode.
    pub w_sim: Vec<Vec<f64>>,
    /// `src × dst`; empty in random mode.
    pub w_delta: Vec<Vec<f64>>,
    pub score: Vec<Vec<f64>>,
    pub decision: MergeDecision,
    /// Original positions absorbed by each input token.
    pub input_members: Vec<Vec<usize>>,
    /// Original positions absorbed by each output token.
    pub output_members: Vec<Vec<usize>>,
    pub input_cls_pos: Option<usize>,
}

fn rows<S: Scalar>(t: &Tensor<S>, m: usize, n: usize) -> Vec<Vec<f64>> {
    if m == 0 || n == 0 {
        return Vec::new();
    }
    (0..m)
        .map(|i| t.row(i).iter().map(|v| v.to_f64_lossy()).collect())
        .collect()
}

/// Scores, matches and arranges one layer. `t_star` is the block output
/// before the residual sum; `rng` is only drawn from in random mode.
pub fn plan_layer<S: Scalar>(
    layout: &TokenLayout,
    t_star: &Tensor<S>,
    delta_f: &Tensor<S>,
    delta_b: &Tensor<S>,
    cfg: &MergeConfig,
    rng: &mut impl Rng,
) -> Result<(MergePlan, LayerTrace)> {
    let (plan, trace) = plan_layer_with(layout, t_star, delta_f, delta_b, cfg, rng, true)?;
    Ok((plan, trace.expect("trace requested")))
}

/// [`plan_layer`] that only builds the trace when `collect` is set.
pub(crate) fn plan_layer_with<S: Scalar>(
    layout: &TokenLayout,
    t_star: &Tensor<S>,
    delta_f: &Tensor<S>,
    delta_b: &Tensor<S>,
    cfg: &MergeConfig,
    rng: &mut impl Rng,
    collect: bool,
) -> Result<(MergePlan, Option<LayerTrace>)> {
    cfg.validate()?;
    if t_star.rows() != layout.len() {
        return Err(Error::shape(
            "mame_layer",
            format!("{} token values for {} tokens", t_star.rows(), layout.len()),
        ));
    }
    let delta_hat = integrate_delta(delta_f, delta_b, cfg.f)?;
    if delta_hat.len() != layout.len() {
        return Err(Error::shape(
            "mame_layer",
            format!("Δ for {} tokens, sequence has {}", delta_hat.len(), layout.len()),
        ));
    }
    let (src, dst) = bipartite_split(layout);
    if cfg.r > src.len() {
        return Err(Error::ReductionExceedsSource { r: cfg.r, src: src.len() });
    }
    let (m, n) = (src.len(), dst.len());
    let (weights, score) = match cfg.score {
        ScoreMode::Random => {
            let data = (0..m * n).map(|_| S::of(rng.random_range(0.0..1.0))).collect();
            let score = if m * n == 0 {
                Tensor::zeros(&[1, 1])
            } else {
                Tensor::from_vec(&[m, n], data)?
            };
            (None, score)
        }
        mode => {
            let sim = similarity_matrix(t_star, &src, &dst);
            let wd = if mode == ScoreMode::Mame {
                delta_weight_matrix(&delta_hat, &src, &dst, S::of(cfg.tau))
            } else {
                Tensor::ones(sim.shape())
            };
            let score = merge_score(&sim, &wd)?;
            (Some((sim, wd)), score)
        }
    };
    let pairs = bipartite_match(&score, &src, &dst, cfg.r)?;
    let plan = MergePlan::new(layout, &pairs, cfg.strategy, Some(&delta_hat))?;
    if !collect {
        return Ok((plan, None));
    }
    let (w_sim, w_delta) = match &weights {
        Some((sim, wd)) => (rows(sim, m, n), rows(wd, m, n)),
        None => (Vec::new(), Vec::new()),
    };
    let trace = LayerTrace {
        layer: 0,
        delta_hat: delta_hat.iter().map(|v| v.to_f64_lossy()).collect(),
        score: rows(&score, m, n),
        w_sim,
        w_delta,
        src,
        dst,
        decision: MergeDecision {
            pairs,
            partition: plan.partition(),
            strategy: cfg.strategy,
            tau: cfg.tau,
            integration: cfg.f,
            score_mode: cfg.score,
        },
        input_members: layout.members.clone(),
        output_members: plan.layout.members.clone(),
        input_cls_pos: layout.cls_pos,
    };
    Ok((plan, Some(trace)))
}

/// Groups the residual stream by a plan computed on the block output.
pub fn residual_merge<S: Scalar>(t_prev: &TokenSequence<S>, plan: &MergePlan) -> Result<TokenSequence<S>> {
    plan.apply_sequence(t_prev)
}

/// One merge layer: `T' = merge(T*) + merge(T_prev)` with a shared plan.
pub fn mame_layer<S: Scalar>(
    t_prev: &TokenSequence<S>,
    delta_f: &Tensor<S>,
    delta_b: &Tensor<S>,
    t_star: &Tensor<S>,
    cfg: &MergeConfig,
    rng: &mut impl Rng,
) -> Result<(TokenSequence<S>, LayerTrace)> {
    if t_star.shape() != t_prev.values.shape() {
        return Err(Error::shape(
            "mame_layer",
            format!("T* {:?} vs T_prev {:?}", t_star.shape(), t_prev.values.shape()),
        ));
    }
    let (plan, trace) = plan_layer(&t_prev.layout, t_star, delta_f, delta_b, cfg, rng)?;
    let merged_star = plan.apply(t_star)?;
    let mut next = residual_merge(t_prev, &plan)?;
    next.values = next.values.add(&merged_star)?;
    Ok((next, trace))
}
