use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{Integration, MergeConfig, ScoreMode, Strategy};
use crate::ssm::BlockDims;

/// How logits are read out of the final token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Mean over all surviving tokens.
    #[default]
    Mean,
    /// The class token alone.
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub inner_dim: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    /// Patches per grid side; `N = P² + 1` with the class token.
    pub grid_side: usize,
    /// Raw feature size of each patch.
    pub raw_dim: usize,
    pub n_classes: usize,
    pub readout: Readout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            embed_dim: 32,
            inner_dim: 64,
            state_dim: 8,
            dt_rank: 2,
            grid_side: 8,
            raw_dim: 16,
            n_classes: 10,
            readout: Readout::Mean,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Tokens entering the first block, class token included.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    /// Class token position in the initial sequence.
    pub fn cls_pos(&self) -> usize {
        self.n_patches() / 2
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            embed: self.embed_dim,
            inner: self.inner_dim,
            state: self.state_dim,
            dt_rank: self.dt_rank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("inner_dim", self.inner_dim),
            ("state_dim", self.state_dim),
            ("dt_rank", self.dt_rank),
            ("grid_side", self.grid_side),
            ("raw_dim", self.raw_dim),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Merge settings for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub layer: usize,
    #[serde(flatten)]
    pub merge: MergeConfig,
}

/// Which layers merge, and how. Entries are kept sorted by layer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MergeSchedule {
    entries: Vec<ScheduleEntry>,
}

impl MergeSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(entries: Vec<ScheduleEntry>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].layer >= w[1].layer) {
            return Err(Error::Config(
                "schedule layers must be strictly increasing".into(),
            ));
        }
        for e in &entries {
            e.merge.validate()?;
        }
        Ok(Self { entries })
    }

    /// The same settings at every listed layer.
    pub fn uniform(layers: &[usize], merge: MergeConfig) -> Result<Self> {
        let set: BTreeSet<usize> = layers.iter().copied().collect();
        if set.len() != layers.len() {
            return Err(Error::Config("duplicate schedule layer".into()));
        }
        Self::new(set.into_iter().map(|layer| ScheduleEntry { layer, merge }).collect())
    }

    /// `r = 11` at layers 2, 3, 4: about half of the 64 patch tokens.
    pub fn toy_default() -> Self {
        Self::uniform(&[2, 3, 4], MergeConfig { r: 11, ..Default::default() })
            .expect("static schedule")
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<&MergeConfig> {
        self.entries
            .iter()
            .find(|e| e.layer == layer)
            .map(|e| &e.merge)
    }

    pub fn layers(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.layer).collect()
    }

    pub fn total_r(&self) -> usize {
        self.entries.iter().map(|e| e.merge.r).sum()
    }

    /// Applies `f` to every entry's settings.
    pub fn map(&self, mut f: impl FnMut(MergeConfig) -> MergeConfig) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ScheduleEntry {
                    layer: e.layer,
                    merge: f(e.merge),
                })
                .collect(),
        }
    }

    pub fn with_score(&self, score: ScoreMode) -> Self {
        self.map(|m| MergeConfig { score, ..m })
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        self.map(|m| MergeConfig { tau, ..m })
    }

    pub fn with_r(&self, r: usize) -> Self {
        self.map(|m| MergeConfig { r, ..m })
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        self.map(|m| MergeConfig { strategy, ..m })
    }

    pub fn with_integration(&self, f: Integration) -> Self {
        self.map(|m| MergeConfig { f, ..m })
    }

    /// Same settings moved to other layers.
    pub fn with_layers(&self, layers: &[usize]) -> Result<Self> {
        let merge = self.entries.first().map(|e| e.merge).unwrap_or_default();
        Self::uniform(layers, merge)
    }

    /// Checks layer indices against `depth` and total reduction against the
    /// `n_tokens` entering the network.
    pub fn validate(&self, depth: usize, n_tokens: usize) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.layer >= depth) {
            return Err(Error::Config(format!(
                "schedule layer {} but the model has {depth} layers",
                e.layer
            )));
        }
        if self.total_r() >= n_tokens {
            return Err(Error::Config(format!(
                "schedule removes {} of {n_tokens} tokens",
                self.total_r()
            )));
        }
        Ok(())
    }
}
