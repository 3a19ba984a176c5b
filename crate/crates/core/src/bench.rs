//! Analytical FLOPs estimator and a wall-clock throughput harness.
//!
//! One multiply-accumulate counts as one FLOP, the convention of the common
//! operator-counting profilers. The selective scan is charged
//! [`SCAN_FLOPS_PER_CELL`] per (token, channel, state) and direction.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MergeSchedule, Model, ModelConfig};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Cost of one scan cell: discretisation, state update and readout.
pub const SCAN_FLOPS_PER_CELL: u64 = 9;

/// Architecture shape as seen by the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub depth: usize,
    pub embed_dim: usize,
    pub inner_dim: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    /// Patch tokens entering the first block.
    pub n_patches: usize,
    /// Input features per patch.
    pub patch_features: usize,
    pub has_cls: bool,
    pub n_classes: usize,
    /// Input projection also produces a gate branch.
    pub gated: bool,
    /// Depthwise causal convolution width per direction; 0 for none.
    pub conv_kernel: usize,
}

impl ArchSpec {
    /// ViM-T: 24 layers, D = 192, expand 2, state 16, 16×16 patches of a
    /// 224² RGB image plus a class token.
    pub fn vim_tiny() -> Self {
        Self {
            depth: 24,
            embed_dim: 192,
            inner_dim: 384,
            state_dim: 16,
            dt_rank: 12,
            n_patches: 196,
            patch_features: 16 * 16 * 3,
            has_cls: true,
            n_classes: 1000,
            gated: true,
            conv_kernel: 4,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches + usize::from(self.has_cls)
    }

    /// Per-token cost of one block, excluding merge overhead.
    pub fn block_flops_per_token(&self) -> u64 {
        let (d, di, s, r) = (
            self.embed_dim as u64,
            self.inner_dim as u64,
            self.state_dim as u64,
            self.dt_rank as u64,
        );
        let in_proj = d * di * if self.gated { 2 } else { 1 };
        let per_direction = di * self.conv_kernel as u64 // conv
            + di * (r + 2 * s) // B, C, Δ low-rank projections
            + r * di // Δ up-projection
            + scan_flops(1, di, s);
        in_proj + 2 * per_direction + di * d
    }
}

impl From<&ModelConfig> for ArchSpec {
    fn from(c: &ModelConfig) -> Self {
        Self {
            depth: c.depth,
            embed_dim: c.embed_dim,
            inner_dim: c.inner_dim,
            state_dim: c.state_dim,
            dt_rank: c.dt_rank,
            n_patches: c.n_patches(),
            patch_features: c.raw_dim,
            has_cls: true,
            n_classes: c.n_classes,
            gated: false,
            conv_kernel: 0,
        }
    }
}

/// One direction of the selective scan over `tokens` tokens.
pub fn scan_flops(tokens: u64, inner: u64, state: u64) -> u64 {
    SCAN_FLOPS_PER_CELL * tokens * inner * state
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: usize,
    /// Tokens processed by the block.
    pub tokens: usize,
    pub block: u64,
    /// Tokens merged away after the block; the scheduled `r` capped at the
    /// source-set size.
    pub removed: usize,
    /// Similarity matrix of the merge step, 0 for non-merging layers.
    pub merge: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    /// Patch embedding.
    pub embed: u64,
    /// Final pooling and classifier head.
    pub head: u64,
    pub total: u64,
    /// Same architecture, no merging.
    pub baseline: u64,
}

impl FlopsReport {
    pub fn ratio(&self) -> f64 {
        self.total as f64 / self.baseline as f64
    }

    pub fn speedup(&self) -> f64 {
        self.baseline as f64 / self.total as f64
    }

    pub fn gflops(&self) -> f64 {
        self.total as f64 * 1e-9
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>7} {:>14} {:>12}",
            "layer", "tokens", "removed", "block", "merge"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:>5} {:>6} {:>7} {:>14} {:>12}",
                l.layer, l.tokens, l.removed, l.block, l.merge
            );
        }
        let _ = writeln!(s, "embed {}  head {}", self.embed, self.head);
        let _ = writeln!(
            s,
            "total {:.4} G  baseline {:.4} G  ratio {:.4}  speedup x{:.3}",
            self.gflops(),
            self.baseline as f64 * 1e-9,
            self.ratio(),
            self.speedup()
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,tokens,removed,block_flops,merge_flops\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{},{}", l.layer, l.tokens, l.removed, l.block, l.merge);
        }
        s
    }
}

fn count(arch: &ArchSpec, schedule: &MergeSchedule) -> (Vec<LayerFlops>, u64, u64) {
    let per_token = arch.block_flops_per_token();
    let d = arch.embed_dim as u64;
    let mut n = arch.n_tokens();
    let mut layers = Vec::with_capacity(arch.depth);
    for layer in 0..arch.depth {
        let tokens = n;
        let block = per_token * n as u64;
            let (merge, removed) = match schedule.get(layer).filter(|m| m.r > 0) {
            Some(m) => {
                let patches = n - usize::from(arch.has_cls);
                let src = patches.div_ceil(2);
                let dst = patches / 2;
                // bipartite matching cannot remove more than |src|
                let removed = m.r.min(src);
                n -= removed;
                ((src * dst) as u64 * d, removed)
            }
            None => (0, 0),
        };
        layers.push(LayerFlops {
            layer,
            tokens,
            removed,
            block,
            merge,
        });
    }
    let embed = (arch.n_patches * arch.patch_features) as u64 * d;
    let head = n as u64 * d + d * arch.n_classes as u64;
    (layers, embed, head)
}

/// FLOPs of one image through `arch` with merging per `schedule`.
pub fn estimate_flops(arch: &ArchSpec, schedule: &MergeSchedule) -> Result<FlopsReport> {
    if arch.depth == 0 || arch.embed_dim == 0 || arch.inner_dim == 0 || arch.state_dim == 0 {
        return Err(Error::Config("architecture dimensions must be positive".into()));
    }
    schedule.validate(arch.depth, arch.n_tokens())?;
    let (layers, embed, head) = count(arch, schedule);
    let (base_layers, base_embed, base_head) = count(arch, &MergeSchedule::empty());
    let sum = |ls: &[LayerFlops]| ls.iter().map(|l| l.block + l.merge).sum::<u64>();
    Ok(FlopsReport {
        total: sum(&layers) + embed + head,
        baseline: sum(&base_layers) + base_embed + base_head,
        layers,
        embed,
        head,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    /// Median over repetitions.
    pub images_per_sec: f64,
    pub per_rep: Vec<f64>,
    pub batch: usize,
    pub threads: usize,
}

/// Times forward passes over `batch` in a dedicated pool of `threads`
/// workers; `warmup` untimed passes precede `reps` timed ones.
pub fn measure_throughput<S: Scalar>(
    model: &Model<S>,
    batch: &[Tensor<S>],
    schedule: &MergeSchedule,
    warmup: usize,
    reps: usize,
    threads: usize,
) -> Result<ThroughputReport> {
    if reps < 3 {
        return Err(Error::Config(format!("need at least 3 repetitions, got {reps}")));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let run = || -> Result<()> {
        pool.install(|| {
            batch.par_iter().try_for_each(|g| {
                model
                    .forward(g, schedule, ForwardOptions::default())
                    .map(|out| {
                        std::hint::black_box(out);
                    })
            })
        })
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut per_rep = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        run()?;
        per_rep.push(batch.len() as f64 / t.elapsed().as_secs_f64());
    }
    let mut sorted = per_rep.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(ThroughputReport {
        images_per_sec: sorted[reps / 2],
        per_rep,
        batch: batch.len(),
        threads: threads.max(1),
    })
}

/// Named layer placements, at ViM-T indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Shallow,
    Even,
    Standard,
    Deep,
}

impl Placement {
    pub const ALL: [Placement; 4] = [Self::Shallow, Self::Even, Self::Standard, Self::Deep];

    fn reference(self) -> [usize; 3] {
        match self {
            Self::Shallow => [4, 12, 18],
            Self::Even => [6, 12, 18],
            Self::Standard => [8, 14, 20],
            Self::Deep => [12, 16, 22],
        }
    }

    /// Indices rescaled from 24 layers to `depth`, kept strictly increasing.
    pub fn layers(self, depth: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for i in self.reference() {
            let mut l = i * depth / 24;
            if let Some(&last) = out.last() {
                l = l.max(last + 1);
            }
            if l < depth {
                out.push(l);
            }
        }
        out
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Shallow => "shallow",
            Self::Even => "even",
            Self::Standard => "standard",
            Self::Deep => "deep",
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.tag() == s)
            .ok_or_else(|| Error::UnknownTag {
                kind: "placement",
                tag: s.to_string(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::MergeConfig;

    fn at(layers: &[usize], r: usize) -> MergeSchedule {
        MergeSchedule::uniform(layers, MergeConfig { r, ..Default::default() }).unwrap()
    }

    #[test]
    fn toy_block_cost_by_hand() {
        let arch = ArchSpec::from(&ModelConfig::default());
        // in 32·64, per direction 64·(2+16) + 2·64 + 9·64·8, out 64·32
        let want = 2048 + 2 * (1152 + 128 + 4608) + 2048;
        assert_eq!(arch.block_flops_per_token(), want);
    }

    #[test]
    fn zero_r_matches_empty() {
        let arch = ArchSpec::vim_tiny();
        let a = estimate_flops(&arch, &MergeSchedule::empty()).unwrap();
        let b = estimate_flops(&arch, &at(&[8, 14, 20], 0)).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.total, a.baseline);
    }

    #[test]
    fn tokens_shrink_after_merge_layers() {
        let r = estimate_flops(&ArchSpec::vim_tiny(), &at(&[8, 14, 20], 50)).unwrap();
        let tokens: Vec<usize> = r.layers.iter().map(|l| l.tokens).collect();
        assert_eq!(tokens[8], 197);
        assert_eq!(tokens[9], 147);
        assert_eq!(tokens[15], 97);
        assert_eq!(tokens[23], 49);
    }

    #[test]
    fn reduction_capped_at_source_set() {
        let r = estimate_flops(&ArchSpec::vim_tiny(), &at(&[8, 14, 20], 50)).unwrap();
        let removed: Vec<usize> = r.layers.iter().map(|l| l.removed).filter(|&x| x > 0).collect();
        assert_eq!(removed, vec![50, 50, 48]);
    }

    #[test]
    fn placements_rescale() {
        assert_eq!(Placement::Standard.layers(24), vec![8, 14, 20]);
        assert_eq!(Placement::Deep.layers(6), vec![3, 4, 5]);
        assert_eq!(Placement::Shallow.layers(6), vec![1, 3, 4]);
        assert_eq!("even".parse::<Placement>().unwrap(), Placement::Even);
    }
}
