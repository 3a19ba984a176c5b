//! Toy bidirectional SSM classifier over patch grids, with merge layers
//! inserted per schedule.

mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::layer::plan_layer_with;
use crate::merge::{LayerTrace, TokenLayout, TokenSequence};
use crate::numerics::{GradTape, Tensor, Var};
use crate::scalar::Scalar;
use crate::ssm::params::uniform;
use crate::ssm::{vim_block_on_tape, Linear, SsmLayerParams, NORM_EPS};

pub use config::{MergeSchedule, ModelConfig, Readout, ScheduleEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    /// `raw_dim → embed_dim`.
    pub patch_embed: Linear<T>,
    /// `1 × embed_dim`.
    pub cls_token: T,
    pub layers: Vec<SsmLayerParams<T>>,
    /// RMS-norm gain applied to every token before the readout.
    pub final_norm: T,
    /// `embed_dim → n_classes`.
    pub head: Linear<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            patch_embed: self.patch_embed.map(f),
            cls_token: f(&self.cls_token),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            final_norm: f(&self.final_norm),
            head: self.head.map(f),
        }
    }

    /// Visits every leaf with a dotted name, in checkpoint order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.patch_embed.visit("patch_embed", f);
        f("cls_token".into(), &self.cls_token);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), f);
        }
        f("final_norm".into(), &self.final_norm);
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.patch_embed.visit_mut(f);
        f(&mut self.cls_token);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        f(&mut self.final_norm);
        self.head.visit_mut(f);
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }
}

impl<S: Scalar> ModelParams<Tensor<S>> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = cfg.block_dims();
        ModelParams {
            patch_embed: Linear::init(&mut rng, cfg.raw_dim, cfg.embed_dim, true),
            cls_token: uniform(&mut rng, &[1, cfg.embed_dim], 0.02),
            layers: (0..cfg.depth)
                .map(|_| SsmLayerParams::init(&mut rng, dims))
                .collect(),
            final_norm: Tensor::ones(&[cfg.embed_dim]),
            head: Linear::init(&mut rng, cfg.embed_dim, cfg.n_classes, true),
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<Tensor<T>> {
        self.map(&mut |t| t.cast())
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.shape()))
    }

    /// `self += other`, leaf by leaf.
    pub fn add_assign(&mut self, other: &Self) {
        let mut src = other.leaves().into_iter();
        self.visit_mut(&mut |t| {
            let o = src.next().expect("same structure");
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
        });
    }

    pub fn scale_assign(&mut self, s: S) {
        self.visit_mut(&mut |t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Per-call forward settings.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Keep per-layer merge traces.
    pub collect_trace: bool,
    /// Seeds the random-score baseline.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    /// Length `n_classes`.
    pub logits: Tensor<S>,
    pub traces: Vec<LayerTrace>,
    /// Layout after the last layer.
    pub layout: TokenLayout,
    /// Sequence length after each layer.
    pub token_counts: Vec<usize>,
}

/// Result of [`Model::loss_and_grad`].
#[derive(Debug, Clone)]
pub struct SampleGrad<S> {
    pub loss: S,
    pub predicted: usize,
    pub grads: ModelParams<Tensor<S>>,
}

/// Tape handles and bookkeeping from [`forward_on_tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub logits: Var,
    pub traces: Vec<LayerTrace>,
    pub layout: TokenLayout,
    pub token_counts: Vec<usize>,
}

/// Accepts `P² × raw` or `P × P × raw` grids.
fn grid_matrix<S: Scalar>(cfg: &ModelConfig, grid: &Tensor<S>) -> Result<Tensor<S>> {
    let want = [cfg.n_patches(), cfg.raw_dim];
    let ok = match grid.shape() {
        [n, d] => [*n, *d] == want,
        [p, q, d] => *p == cfg.grid_side && *q == cfg.grid_side && *d == cfg.raw_dim,
        _ => false,
    };
    if !ok {
        return Err(Error::shape(
            "patch_embed",
            format!("grid {:?}, expected {want:?}", grid.shape()),
        ));
    }
    grid.clone().reshape(&want)
}

/// Records the whole classifier on `tape`. Merge decisions are taken from the
/// current values and treated as constants for differentiation.
pub fn forward_on_tape<S: Scalar>(
    tape: &mut GradTape<S>,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    grid: &Tensor<S>,
    schedule: &MergeSchedule,
    opts: ForwardOptions,
) -> Result<TapeForward> {
    schedule.validate(cfg.depth, cfg.n_tokens())?;
    if params.layers.len() != cfg.depth {
        return Err(Error::Config(format!(
            "{} layer parameter sets for depth {}",
            params.layers.len(),
            cfg.depth
        )));
    }
    let x = tape.leaf(grid_matrix(cfg, grid)?);
    let patches = tape.linear(x, params.patch_embed.weight, params.patch_embed.bias)?;
    let mut t = tape.insert_row(patches, params.cls_token, cfg.cls_pos())?;
    let mut layout = TokenLayout::identity(cfg.n_tokens(), Some(cfg.cls_pos()));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut traces = Vec::new();
    let mut token_counts = Vec::with_capacity(cfg.depth);

    for (l, lp) in params.layers.iter().enumerate() {
        let block = vim_block_on_tape(tape, lp, t)?;
        t = match schedule.get(l).filter(|m| m.r > 0) {
            None => block.t_next,
            Some(merge) => {
                let (plan, trace) = plan_layer_with(
                    &layout,
                    tape.value(block.t_star),
                    tape.value(block.delta_f),
                    tape.value(block.delta_b),
                    merge,
                    &mut rng,
                    opts.collect_trace,
                )?;
                let mix = plan.row_mix::<S>();
                let star = tape.mix_rows(block.t_star, mix.clone())?;
                let prev = tape.mix_rows(t, mix)?;
                layout = plan.layout;
                if let Some(mut trace) = trace {
                    trace.layer = l;
                    traces.push(trace);
                }
                tape.add(star, prev)?
            }
        };
        token_counts.push(layout.len());
    }

    let t = tape.rms_norm(t, params.final_norm, S::of(NORM_EPS))?;
    let pooled = match cfg.readout {
        Readout::Mean => tape.mean_rows(t),
        Readout::Cls => {
            let c = layout.cls_pos.expect("class token is never merged");
            tape.mix_rows(t, vec![vec![(c, S::one())]])?
        }
    };
    let logits = tape.linear(pooled, params.head.weight, params.head.bias)?;
    Ok(TapeForward {
        logits,
        traces,
        layout,
        token_counts,
    })
}

/// A configured classifier with concrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<S>>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Linear projection of each patch, class token inserted at `P²/2`.
    pub fn patch_embed(&self, grid: &Tensor<S>) -> Result<TokenSequence<S>> {
        let x = grid_matrix(&self.config, grid)?;
        let pe = &self.params.patch_embed;
        let mut tokens = x.matmul(&pe.weight)?;
        if let Some(b) = &pe.bias {
            tokens = tokens.add_row(b)?;
        }
        let d = self.config.embed_dim;
        let at = self.config.cls_pos();
        let mut data = Vec::with_capacity((tokens.rows() + 1) * d);
        data.extend_from_slice(&tokens.data()[..at * d]);
        data.extend_from_slice(self.params.cls_token.data());
        data.extend_from_slice(&tokens.data()[at * d..]);
        let values = Tensor::from_vec(&[tokens.rows() + 1, d], data)?;
        Ok(TokenSequence::new(values, Some(at)))
    }

    pub fn forward(
        &self,
        grid: &Tensor<S>,
        schedule: &MergeSchedule,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput<S>> {
        let mut tape = GradTape::inference();
        let vars = self.params.map(&mut |t| tape.leaf(t.clone()));
        let out = forward_on_tape(&mut tape, &self.config, &vars, grid, schedule, opts)?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            traces: out.traces,
            layout: out.layout,
            token_counts: out.token_counts,
        })
    }

    pub fn predict(&self, grid: &Tensor<S>, schedule: &MergeSchedule, seed: u64) -> Result<usize> {
        let out = self.forward(grid, schedule, ForwardOptions { collect_trace: false, seed })?;
        Ok(argmax(out.logits.data()))
    }

    /// Cross-entropy loss of one sample and its gradient for every parameter.
    pub fn loss_and_grad(
        &self,
        grid: &Tensor<S>,
        label: usize,
        schedule: &MergeSchedule,
        seed: u64,
    ) -> Result<SampleGrad<S>> {
        let mut tape = GradTape::new();
        let vars = self.params.map(&mut |t| tape.leaf(t.clone()));
        let out = forward_on_tape(
            &mut tape,
            &self.config,
            &vars,
            grid,
            schedule,
            ForwardOptions { collect_trace: false, seed },
        )?;
        let loss = tape.cross_entropy(out.logits, label)?;
        let grads = tape.backward(loss)?;
        let g = vars.map(&mut |v| grads.get_or_zeros(*v, tape.value(*v)));
        Ok(SampleGrad {
            loss: tape.value(loss).data()[0],
            predicted: argmax(tape.value(out.logits).data()),
            grads: g,
        })
    }

    /// Loss of one sample plus the merge traces that produced it.
    pub fn loss(
        &self,
        grid: &Tensor<S>,
        label: usize,
        schedule: &MergeSchedule,
        seed: u64,
    ) -> Result<(S, Vec<LayerTrace>)> {
        let mut tape = GradTape::inference();
        let vars = self.params.map(&mut |t| tape.leaf(t.clone()));
        let out = forward_on_tape(
            &mut tape,
            &self.config,
            &vars,
            grid,
            schedule,
            ForwardOptions { collect_trace: true, seed },
        )?;
        let loss = tape.cross_entropy(out.logits, label)?;
        Ok((tape.value(loss).data()[0], out.traces))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Grid cell of an original token position, `None` for the class token.
pub fn patch_of(orig: usize, cls_pos: usize) -> Option<usize> {
    match orig.cmp(&cls_pos) {
        std::cmp::Ordering::Less => Some(orig),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(orig - 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::MergeConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            depth: 3,
            embed_dim: 8,
            inner_dim: 12,
            state_dim: 4,
            dt_rank: 2,
            grid_side: 4,
            raw_dim: 5,
            n_classes: 3,
            readout: Readout::Mean,
        }
    }

    fn grid(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::random_uniform(&mut rng, &[cfg.n_patches(), cfg.raw_dim], -1.0, 1.0)
    }

    #[test]
    fn patch_embed_places_class_token() {
        let cfg = ModelConfig { grid_side: 2, ..small() };
        let mut m = Model::<f64>::new(cfg.clone(), 1).unwrap();
        m.params.patch_embed.bias = Some(Tensor::zeros(&[8]));
        let seq = m.patch_embed(&Tensor::zeros(&[4, 5])).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.cls_pos(), Some(2));
        for i in [0, 1, 3, 4] {
            assert!(seq.values.row(i).iter().all(|&v| v == 0.0));
        }
        assert_eq!(seq.values.row(2), m.params.cls_token.data());
    }

    #[test]
    fn patch_embed_commutes_with_permutation() {
        let cfg = small();
        let m = Model::<f64>::new(cfg.clone(), 2).unwrap();
        let g = grid(&cfg, 3);
        let perm: Vec<usize> = (0..16).rev().collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| g.row(i).to_vec()).collect();
        let gp = Tensor::from_rows(&rows).unwrap();
        let a = m.patch_embed(&g).unwrap();
        let b = m.patch_embed(&gp).unwrap();
        let cls = cfg.cls_pos();
        for (k, &i) in perm.iter().enumerate() {
            let (ka, kb) = (i + usize::from(i >= cls), k + usize::from(k >= cls));
            assert_eq!(a.values.row(ka), b.values.row(kb));
        }
    }

    #[test]
    fn token_counts_follow_schedule() {
        let cfg = small();
        let m = Model::<f64>::new(cfg.clone(), 4).unwrap();
        let g = grid(&cfg, 5);
        let out = m.forward(&g, &MergeSchedule::empty(), ForwardOptions::default()).unwrap();
        assert_eq!(out.token_counts, vec![17, 17, 17]);
        let s = MergeSchedule::uniform(&[0, 2], MergeConfig { r: 3, ..Default::default() }).unwrap();
        let out = m
            .forward(&g, &s, ForwardOptions { collect_trace: true, seed: 0 })
            .unwrap();
        assert_eq!(out.token_counts, vec![14, 14, 11]);
        assert_eq!(out.traces.len(), 2);
        assert_eq!(out.traces[1].layer, 2);
        out.layout.validate(17).unwrap();
    }

    #[test]
    fn schedule_past_depth_is_rejected() {
        let cfg = small();
        let m = Model::<f64>::new(cfg.clone(), 4).unwrap();
        let s = MergeSchedule::uniform(&[3], MergeConfig { r: 1, ..Default::default() }).unwrap();
        assert!(m.forward(&grid(&cfg, 1), &s, ForwardOptions::default()).is_err());
    }

    #[test]
    fn class_readout_uses_class_token() {
        let cfg = ModelConfig { readout: Readout::Cls, ..small() };
        let m = Model::<f64>::new(cfg.clone(), 6).unwrap();
        let s = MergeSchedule::uniform(&[1], MergeConfig { r: 4, ..Default::default() }).unwrap();
        let out = m.forward(&grid(&cfg, 2), &s, ForwardOptions::default()).unwrap();
        assert_eq!(out.logits.len(), 3);
        assert!(out.logits.is_finite());
    }

    #[test]
    fn patch_mapping_skips_class_token() {
        assert_eq!(patch_of(3, 32), Some(3));
        assert_eq!(patch_of(32, 32), None);
        assert_eq!(patch_of(33, 32), Some(32));
    }
}
