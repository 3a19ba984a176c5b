//! Parameter containers generic over their leaf type.
//!
//! The same structs hold concrete tensors (`T = Tensor<S>`) for storage and
//! optimisation, and tape handles (`T = Var`) while a forward pass is being
//! recorded.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `in × out`.
    pub weight: T,
    pub bias: Option<T>,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

impl<S: Scalar> Linear<Tensor<S>> {
    /// Uniform `±1/√in` weights, zero bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self::init_scaled(rng, fan_in, fan_out, bias, 1.0)
    }

    pub fn init_scaled(
        rng: &mut impl Rng,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        Linear {
            weight: uniform(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt()),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }
    }
}

pub(crate) fn uniform<S: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

/// Per-direction selective-scan parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionParams<T> {
    /// `log(−A)`, `d_inner × d_state`.
    pub a_log: T,
    /// Inner features → `B`, `d_inner × d_state`.
    pub proj_b: T,
    /// Inner features → `C`, `d_inner × d_state`.
    pub proj_c: T,
    /// Low-rank Δ path: `d_inner × dt_rank` then `dt_rank × d_inner`.
    pub dt_down: T,
    pub dt_up: T,
    /// Pre-softplus Δ bias, length `d_inner`.
    pub dt_bias: T,
}

impl<T> DirectionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DirectionParams<U> {
        DirectionParams {
            a_log: f(&self.a_log),
            proj_b: f(&self.proj_b),
            proj_c: f(&self.proj_c),
            dt_down: f(&self.dt_down),
            dt_up: f(&self.dt_up),
            dt_bias: f(&self.dt_bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.a_log"), &self.a_log);
        f(format!("{prefix}.proj_b"), &self.proj_b);
        f(format!("{prefix}.proj_c"), &self.proj_c);
        f(format!("{prefix}.dt_down"), &self.dt_down);
        f(format!("{prefix}.dt_up"), &self.dt_up);
        f(format!("{prefix}.dt_bias"), &self.dt_bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.a_log);
        f(&mut self.proj_b);
        f(&mut self.proj_c);
        f(&mut self.dt_down);
        f(&mut self.dt_up);
        f(&mut self.dt_bias);
    }
}

/// Shape parameters of one bidirectional block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub embed: usize,
    pub inner: usize,
    pub state: usize,
    pub dt_rank: usize,
}

impl<S: Scalar> DirectionParams<Tensor<S>> {
    /// `A = −(1..=d_state)` per channel; Δ bias set so that the initial
    /// `softplus(bias)` is log-uniform in `[0.01, 0.1]`.
    pub fn init(rng: &mut impl Rng, dims: BlockDims) -> Self {
        let BlockDims {
            inner,
            state,
            dt_rank,
            ..
        } = dims;
        let a_log = (0..inner * state)
            .map(|i| S::of(((i % state) as f64 + 1.0).ln()))
            .collect();
        let dt_bias = (0..inner)
            .map(|_| {
                let u: f64 = rng.random_range(0.0..1.0);
                let dt = (0.01f64.ln() + u * (0.1f64.ln() - 0.01f64.ln())).exp();
                // inverse softplus
                S::of(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let proj_bound = 1.0 / (inner as f64).sqrt();
        DirectionParams {
            a_log: Tensor::from_vec(&[inner, state], a_log).expect("a_log shape"),
            proj_b: uniform(rng, &[inner, state], proj_bound),
            proj_c: uniform(rng, &[inner, state], proj_bound),
            dt_down: uniform(rng, &[inner, dt_rank], proj_bound),
            dt_up: uniform(rng, &[dt_rank, inner], 1.0 / (dt_rank as f64).sqrt()),
            dt_bias: Tensor::from_vec(&[inner], dt_bias).expect("dt_bias shape"),
        }
    }

    /// Continuous `A = −exp(a_log)`.
    pub fn a(&self) -> Tensor<S> {
        self.a_log.map(|v| -v.exp())
    }
}

/// Parameters of one bidirectional block: a shared input projection, one
/// scan parameter set per direction, and the shared output projection applied
/// to `Y_f + Y_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmLayerParams<T> {
    /// RMS-norm gain applied to the block input, length `embed`.
    pub norm: T,
    pub in_proj: Linear<T>,
    pub fwd: DirectionParams<T>,
    pub bwd: DirectionParams<T>,
    pub out_proj: Linear<T>,
}

impl<T> SsmLayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SsmLayerParams<U> {
        SsmLayerParams {
            norm: f(&self.norm),
            in_proj: self.in_proj.map(f),
            fwd: self.fwd.map(f),
            bwd: self.bwd.map(f),
            out_proj: self.out_proj.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.norm"), &self.norm);
        self.in_proj.visit(&format!("{prefix}.in_proj"), f);
        self.fwd.visit(&format!("{prefix}.fwd"), f);
        self.bwd.visit(&format!("{prefix}.bwd"), f);
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.norm);
        self.in_proj.visit_mut(f);
        self.fwd.visit_mut(f);
        self.bwd.visit_mut(f);
        self.out_proj.visit_mut(f);
    }
}

impl<S: Scalar> SsmLayerParams<Tensor<S>> {
    pub fn init(rng: &mut impl Rng, dims: BlockDims) -> Self {
        SsmLayerParams {
            norm: Tensor::ones(&[dims.embed]),
            in_proj: Linear::init(rng, dims.embed, dims.inner, true),
            fwd: DirectionParams::init(rng, dims),
            bwd: DirectionParams::init(rng, dims),
            out_proj: Linear::init_scaled(rng, dims.inner, dims.embed, true, 0.5),
        }
    }
}
