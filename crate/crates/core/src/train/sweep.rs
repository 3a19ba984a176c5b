use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::{estimate_flops, measure_throughput, ArchSpec, Placement};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::merge::Strategy;
use crate::model::{MergeSchedule, Model};
use crate::scalar::Scalar;

use super::evaluate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    R,
    Layers,
    Strategy,
    F,
    Score,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        Self::Tau,
        Self::R,
        Self::Layers,
        Self::Strategy,
        Self::F,
        Self::Score,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Tau => "tau",
            Self::R => "r",
            Self::Layers => "layers",
            Self::Strategy => "strategy",
            Self::F => "f",
            Self::Score => "score",
        }
    }

    /// The full value set for categorical axes.
    pub fn default_values(self) -> Vec<String> {
        let v: Vec<&str> = match self {
            Self::Tau => vec!["0.1", "1", "10", "20", "50"],
            Self::R => vec!["0", "4", "8", "11", "16"],
            Self::Layers => Placement::ALL.iter().map(|p| p.tag()).collect(),
            Self::Strategy => Strategy::ALL.iter().map(|s| s.tag()).collect(),
            Self::F => vec!["max", "min", "avg", "sum"],
            Self::Score => vec!["mame", "similarity_only", "random"],
        };
        v.into_iter().map(String::from).collect()
    }

    /// `base` with this axis set to `value`. Layer values are a placement
    /// name or `+`-joined indices such as `2+3+4`.
    pub fn apply(self, base: &MergeSchedule, value: &str, depth: usize) -> Result<MergeSchedule> {
        let bad = |e: String| Error::Config(format!("{} value {value:?}: {e}", self.tag()));
        Ok(match self {
            Self::Tau => base.with_tau(value.parse().map_err(|e| bad(format!("{e}")))?),
            Self::R => base.with_r(value.parse().map_err(|e| bad(format!("{e}")))?),
            Self::Strategy => base.with_strategy(value.parse()?),
            Self::F => base.with_integration(value.parse()?),
            Self::Score => base.with_score(value.parse()?),
            Self::Layers => {
                let layers = match value.parse::<Placement>() {
                    Ok(p) => p.layers(depth),
                    Err(_) => value
                        .split('+')
                        .map(|t| t.trim().parse::<usize>().map_err(|e| bad(format!("{e}"))))
                        .collect::<Result<Vec<_>>>()?,
                };
                base.with_layers(&layers)?
            }
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::UnknownTag {
                kind: "sweep axis",
                tag: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Seeds the random-score baseline.
    pub seed: u64,
    /// Time each variant over this many validation samples; 0 skips timing.
    pub throughput_batch: usize,
    pub throughput_reps: usize,
    pub threads: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            throughput_batch: 0,
            throughput_reps: 5,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub schedule: MergeSchedule,
    pub accuracy: f64,
    pub gflops: f64,
    pub images_per_sec: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,value,acc,gflops,img_per_s\n");
        for r in &self.rows {
            let ips = r.images_per_sec.map(|v| format!("{v:.2}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{}",
                self.axis.tag(),
                r.value,
                r.accuracy,
                r.gflops,
                ips
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>16} {:>8} {:>10} {:>10}", self.axis.tag(), "acc", "MFLOPs", "img/s");
        for r in &self.rows {
            let ips = r.images_per_sec.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:>16} {:>8.4} {:>10.3} {:>10}",
                r.value,
                r.accuracy,
                r.gflops * 1e3,
                ips
            );
        }
        s
    }
}

/// Evaluates `model` on `val` once per axis value, each a variation of
/// `base`.
pub fn sweep<S: Scalar>(
    model: &Model<S>,
    val: &Dataset,
    base: &MergeSchedule,
    axis: SweepAxis,
    values: &[String],
    opts: &SweepOptions,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let arch = ArchSpec::from(&model.config);
    let timing_batch: Vec<_> = (0..opts.throughput_batch.min(val.len()))
        .map(|i| val.grid::<S>(i))
        .collect();
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let schedule = axis.apply(base, value, model.config.depth)?;
        let acc = evaluate(model, val, &schedule, opts.seed)?.accuracy;
        let gflops = estimate_flops(&arch, &schedule)?.gflops();
        let images_per_sec = if timing_batch.is_empty() {
            None
        } else {
            let t = measure_throughput(model, &timing_batch, &schedule, 1, opts.throughput_reps, opts.threads)?;
            Some(t.images_per_sec)
        };
        log::info!("{} = {value}: acc {acc:.4}, {gflops:.6} GFLOPs", axis.tag());
        rows.push(SweepRow {
            value: value.clone(),
            schedule,
            accuracy: acc,
            gflops,
            images_per_sec,
        });
    }
    Ok(SweepReport { axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::{Integration, MergeConfig, ScoreMode};

    #[test]
    fn axis_application() {
        let base = MergeSchedule::toy_default();
        let s = SweepAxis::Tau.apply(&base, "0.5", 6).unwrap();
        assert!(s.entries().iter().all(|e| e.merge.tau == 0.5));
        let s = SweepAxis::Layers.apply(&base, "1+4", 6).unwrap();
        assert_eq!(s.layers(), vec![1, 4]);
        let s = SweepAxis::Layers.apply(&base, "deep", 6).unwrap();
        assert_eq!(s.layers(), vec![3, 4, 5]);
        let s = SweepAxis::Score.apply(&base, "random", 6).unwrap();
        assert_eq!(s.entries()[0].merge.score, ScoreMode::Random);
        let s = SweepAxis::F.apply(&base, "max", 6).unwrap();
        assert_eq!(s.entries()[0].merge.f, Integration::Max);
        assert!(SweepAxis::R.apply(&base, "x", 6).is_err());
        assert!(SweepAxis::Strategy.apply(&base, "middle", 6).is_err());
        assert_eq!(base.entries()[0].merge, MergeConfig { r: 11, ..Default::default() });
    }

    #[test]
    fn strategy_axis_covers_all_tags() {
        let v = SweepAxis::Strategy.default_values();
        assert_eq!(v.len(), 6);
        for s in Strategy::ALL {
            assert!(v.contains(&s.tag().to_string()));
        }
    }
}
