//! Synthetic planted-pattern classification data.
//!
//! Every sample is a `P×P` grid of raw patch vectors. A 4-connected blob of
//! `K` cells carries the class prototype; all other cells are drawn from a
//! few background prototypes shared by every class. Both get i.i.d.
//! `N(0, σ²)` noise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, Kind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_classes: usize,
    /// Training samples per class.
    pub samples_per_class: usize,
    /// Validation samples per class.
    pub val_per_class: usize,
    pub grid_side: usize,
    pub raw_dim: usize,
    /// Foreground blob size in cells.
    pub blob: usize,
    pub n_background: usize,
    pub noise: f64,
    /// Spread of the class prototypes around their common mean.
    pub class_spread: f64,
    /// Spread of the background prototypes around their common mean.
    pub background_spread: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            samples_per_class: 50,
            val_per_class: 100,
            grid_side: 8,
            raw_dim: 16,
            blob: 16,
            n_background: 3,
            noise: 0.5,
            class_spread: 0.25,
            background_spread: 0.3,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn n_cells(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > u16::MAX as usize {
            return Err(Error::Config(format!("{} classes", self.n_classes)));
        }
        if self.grid_side == 0 || self.raw_dim == 0 || self.n_background == 0 {
            return Err(Error::Config(
                "grid_side, raw_dim and n_background must be positive".into(),
            ));
        }
        if self.blob == 0 || self.blob >= self.n_cells() {
            return Err(Error::Config(format!(
                "blob of {} cells on a {} cell grid",
                self.blob,
                self.n_cells()
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise σ = {}", self.noise)));
        }
        for (name, v) in [
            ("class_spread", self.class_spread),
            ("background_spread", self.background_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Class and background prototypes fixed by the dataset seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// `n_classes × raw_dim`.
    pub class: Tensor<f64>,
    /// `n_background × raw_dim`.
    pub background: Tensor<f64>,
}

impl Prototypes {
    pub fn new(spec: &DatasetSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::MAX);
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let d = spec.raw_dim;
        let mut around = |count: usize, spread: f64| -> Vec<f64> {
            let base: Vec<f64> = (0..d).map(|_| std.sample(&mut rng)).collect();
            (0..count)
                .flat_map(|_| base.iter().map(|b| b + spread * std.sample(&mut rng)).collect::<Vec<_>>())
                .collect()
        };
        let class = around(spec.n_classes, spec.class_spread);
        let background = around(spec.n_background, spec.background_spread);
        Self {
            class: Tensor::from_vec(&[spec.n_classes, d], class).expect("shape"),
            background: Tensor::from_vec(&[spec.n_background, d], background).expect("shape"),
        }
    }
}

/// Grids stored as `f32`, cell-major (`sample, cell, feature`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid_side: usize,
    pub raw_dim: usize,
    pub n_classes: usize,
    data: Vec<f32>,
    labels: Vec<u16>,
    /// Foreground cells of each sample, ascending.
    foreground: Vec<Vec<u16>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.grid_side * self.grid_side * self.raw_dim
    }

    /// Sample `i` as a `P² × raw_dim` matrix.
    pub fn grid<S: Scalar>(&self, i: usize) -> Tensor<S> {
        let n = self.sample_len();
        let data = self.data[i * n..(i + 1) * n]
            .iter()
            .map(|&v| S::of(v as f64))
            .collect();
        Tensor::from_vec(&[self.grid_side * self.grid_side, self.raw_dim], data)
            .expect("stored shape")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn foreground(&self, i: usize) -> &[u16] {
        &self.foreground[i]
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.sample_len();
        Self {
            grid_side: self.grid_side,
            raw_dim: self.raw_dim,
            n_classes: self.n_classes,
            data: indices
                .iter()
                .flat_map(|&i| self.data[i * n..(i + 1) * n].iter().copied())
                .collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            foreground: indices.iter().map(|&i| self.foreground[i].clone()).collect(),
        }
    }

    /// Header, `u32` sample count, grid side, raw dim and class count, then
    /// the `f32` grids, the `u16` labels, and per sample a `u16` count
    /// followed by its `u16` foreground cells.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        container::write_header(w, Kind::Dataset)?;
        for v in [self.len(), self.grid_side, self.raw_dim, self.n_classes] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        container::write_f32s(w, self.data.iter().copied())?;
        let mut tail = Vec::with_capacity(2 * self.len() * 4);
        for l in &self.labels {
            tail.extend_from_slice(&l.to_le_bytes());
        }
        for fg in &self.foreground {
            tail.extend_from_slice(&(fg.len() as u16).to_le_bytes());
            for c in fg {
                tail.extend_from_slice(&c.to_le_bytes());
            }
        }
        w.write_all(&tail)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        container::read_header(r, Kind::Dataset)?;
        let n = container::read_u32(r)? as usize;
        let grid_side = container::read_u32(r)? as usize;
        let raw_dim = container::read_u32(r)? as usize;
        let n_classes = container::read_u32(r)? as usize;
        let cells = grid_side * grid_side;
        if cells == 0 || raw_dim == 0 || cells > u16::MAX as usize {
            return Err(Error::Format(format!("grid {grid_side}² × {raw_dim}")));
        }
        let data = container::read_f32s(r, n * cells * raw_dim)?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = container::read_u16(r)?;
            if l as usize >= n_classes {
                return Err(Error::Format(format!("label {l} with {n_classes} classes")));
            }
            labels.push(l);
        }
        let mut foreground = Vec::with_capacity(n);
        for _ in 0..n {
            let k = container::read_u16(r)? as usize;
            let fg = (0..k)
                .map(|_| container::read_u16(r))
                .collect::<Result<Vec<_>>>()?;
            if fg.iter().any(|&c| c as usize >= cells) {
                return Err(Error::Format("foreground cell out of range".into()));
            }
            foreground.push(fg);
        }
        container::expect_eof(r)?;
        Ok(Self {
            grid_side,
            raw_dim,
            n_classes,
            data,
            labels,
            foreground,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// A connected set of `k` cells grown from a random seed cell.
fn grow_blob(side: usize, k: usize, rng: &mut impl Rng) -> Vec<u16> {
    let mut inside = vec![false; side * side];
    let start = rng.random_range(0..side * side);
    inside[start] = true;
    let mut cells = vec![start];
    while cells.len() < k {
        let mut frontier: Vec<usize> = Vec::new();
        for &c in &cells {
            let (i, j) = (c / side, c % side);
            let mut push = |n: usize| {
                if !inside[n] && !frontier.contains(&n) {
                    frontier.push(n);
                }
            };
            if i > 0 {
                push(c - side);
            }
            if i + 1 < side {
                push(c + side);
            }
            if j > 0 {
                push(c - 1);
            }
            if j + 1 < side {
                push(c + 1);
            }
        }
        let next = frontier[rng.random_range(0..frontier.len())];
        inside[next] = true;
        cells.push(next);
    }
    cells.sort_unstable();
    cells.into_iter().map(|c| c as u16).collect()
}

fn sample(spec: &DatasetSpec, protos: &Prototypes, label: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<u16>) {
    let fg = grow_blob(spec.grid_side, spec.blob, rng);
    let noise = Normal::new(0.0, spec.noise).expect("σ ≥ 0");
    let mut is_fg = vec![false; spec.n_cells()];
    for &c in &fg {
        is_fg[c as usize] = true;
    }
    let mut out = Vec::with_capacity(spec.n_cells() * spec.raw_dim);
    for fg_cell in is_fg {
        let proto = if fg_cell {
            protos.class.row(label)
        } else {
            protos.background.row(rng.random_range(0..spec.n_background))
        };
        out.extend(proto.iter().map(|&p| (p + noise.sample(rng)) as f32));
    }
    (out, fg)
}

fn split(spec: &DatasetSpec, protos: &Prototypes, stream: u64, per_class: usize) -> Dataset {
    let n = per_class * spec.n_classes;
    let samples: Vec<(Vec<f32>, Vec<u16>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((stream << 32) | i as u64);
            sample(spec, protos, i % spec.n_classes, &mut rng)
        })
        .collect();
    let mut data = Vec::with_capacity(n * spec.n_cells() * spec.raw_dim);
    let mut foreground = Vec::with_capacity(n);
    for (d, fg) in samples {
        data.extend(d);
        foreground.push(fg);
    }
    Dataset {
        grid_side: spec.grid_side,
        raw_dim: spec.raw_dim,
        n_classes: spec.n_classes,
        data,
        labels: (0..n).map(|i| (i % spec.n_classes) as u16).collect(),
        foreground,
    }
}

/// Class-balanced train and validation splits, deterministic in `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let protos = Prototypes::new(spec);
    Ok((
        split(spec, &protos, 1, spec.samples_per_class),
        split(spec, &protos, 2, spec.val_per_class),
    ))
}

/// A random permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
