use std::path::{Path, PathBuf};

use mame_core::bench::Placement;
use mame_core::data::DatasetSpec;
use mame_core::merge::{Integration, ScoreMode, Strategy};
use mame_core::model::{MergeSchedule, ModelConfig};
use mame_core::train::TrainConfig;
use mame_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Directory holding `train.bin` and `val.bin`.
    pub data: PathBuf,
    pub model: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            model: PathBuf::from("model.bin"),
        }
    }
}

/// Everything a subcommand needs, as read from `--config` plus flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: MergeSchedule,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    /// Model initialisation and random-score seed.
    pub seed: u64,
    pub threads: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: MergeSchedule::toy_default(),
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            seed: 0,
            threads: 1,
            paths: Paths::default(),
        }
    }
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Tokens merged per merge layer.
    #[arg(long, global = true)]
    pub r: Option<usize>,
    /// Informativeness scale τ.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Token arrangement after merging.
    #[arg(long, global = true)]
    pub strategy: Option<Strategy>,
    /// Merge layers: a placement name or comma-separated indices.
    #[arg(long, global = true)]
    pub layers: Option<String>,
    /// Integration of forward and backward Δ: max, min, avg or sum.
    #[arg(long, global = true)]
    pub f: Option<Integration>,
    /// Merge score: mame, similarity_only or random.
    #[arg(long, global = true)]
    pub score: Option<ScoreMode>,
    /// Seed for data, initialisation, training and random scores.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path; its meaning depends on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

pub fn parse_layers(s: &str, depth: usize) -> Result<Vec<usize>> {
    if let Ok(p) = s.parse::<Placement>() {
        return Ok(p.layers(depth));
    }
    s.split([',', '+'])
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("layer {t:?}: {e}")))
        })
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = o.seed {
            cfg.seed = seed;
            cfg.data.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(t) = o.threads {
            cfg.threads = t;
        }
        if let Some(l) = &o.layers {
            let layers = parse_layers(l, cfg.model.depth)?;
            cfg.schedule = if cfg.schedule.is_empty() {
                MergeSchedule::toy_default().with_layers(&layers)?
            } else {
                cfg.schedule.with_layers(&layers)?
            };
        }
        let s = &mut cfg.schedule;
        if let Some(r) = o.r {
            *s = s.with_r(r);
        }
        if let Some(tau) = o.tau {
            *s = s.with_tau(tau);
        }
        if let Some(st) = o.strategy {
            *s = s.with_strategy(st);
        }
        if let Some(f) = o.f {
            *s = s.with_integration(f);
        }
        if let Some(m) = o.score {
            *s = s.with_score(m);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schedule layers and reductions are checked later against whichever
    /// architecture the subcommand runs.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for e in self.schedule.entries() {
            e.merge.validate()?;
        }
        self.data.validate()?;
        self.train.validate()?;
        let (m, d) = (&self.model, &self.data);
        if m.grid_side != d.grid_side || m.raw_dim != d.raw_dim || m.n_classes != d.n_classes {
            return Err(Error::Config(format!(
                "model expects {}x{} grids of {} features over {} classes, data has {}x{} of {} over {}",
                m.grid_side, m.grid_side, m.raw_dim, m.n_classes, d.grid_side, d.grid_side, d.raw_dim, d.n_classes
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 4, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        assert_eq!(cfg.schedule, MergeSchedule::toy_default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn overrides_apply_to_every_layer() {
        let o = Overrides {
            r: Some(5),
            tau: Some(2.0),
            layers: Some("1,3".into()),
            seed: Some(9),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&o).unwrap();
        assert_eq!(cfg.schedule.layers(), vec![1, 3]);
        assert!(cfg.schedule.entries().iter().all(|e| e.merge.r == 5 && e.merge.tau == 2.0));
        assert_eq!((cfg.data.seed, cfg.train.seed), (9, 9));
    }

    #[test]
    fn layer_syntax() {
        assert_eq!(parse_layers("deep", 6).unwrap(), vec![3, 4, 5]);
        assert_eq!(parse_layers("2+3+4", 6).unwrap(), vec![2, 3, 4]);
        assert!(parse_layers("two", 6).is_err());
    }
}
