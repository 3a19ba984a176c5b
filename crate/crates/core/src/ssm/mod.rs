//! Zero-order-hold discretisation, the selective scan, and the bidirectional
//! block that exposes per-direction step sizes Δ to the merge engine.

pub mod kernel;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::TokenSequence;
use crate::numerics::{GradTape, Tensor, Var};
use crate::scalar::Scalar;

pub use params::{BlockDims, DirectionParams, Linear, SsmLayerParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Discretises a diagonal system `(A, B)` with hold interval `Δ`.
///
/// Returns `Ā = exp(ΔA)` and `B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB`, both per
/// diagonal channel.
pub fn discretize<S: Scalar>(a: &[S], b: &[S], delta: S) -> Result<(Vec<S>, Vec<S>)> {
    if !(delta > S::zero()) || !delta.is_finite() {
        return Err(Error::NonpositiveStep(delta.to_f64_lossy()));
    }
    if a.len() != b.len() {
        return Err(Error::shape(
            "discretize",
            format!("A has {} channels, B has {}", a.len(), b.len()),
        ));
    }
    if let Some(bad) = a.iter().find(|v| !(**v < S::zero())) {
        return Err(Error::Config(format!(
            "A must be strictly negative, got {bad}"
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&av, &bv)| {
            let (abar, phi) = kernel::zoh(delta * av);
            (abar, phi * delta * bv)
        })
        .unzip())
}

/// Result of one directional scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput<S> {
    /// `N × d_inner`, in original token order.
    pub y: Tensor<S>,
    /// Post-softplus step sizes, `N × d_inner`, in original token order.
    pub delta: Tensor<S>,
}

/// Tape handles produced by [`scan_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ScanVars {
    pub y: Var,
    pub delta: Var,
}

/// Input-dependent `B`, `C`, Δ from the inner features `x`, followed by the
/// recurrence. The backward direction scans the reversed sequence.
pub fn scan_on_tape<S: Scalar>(
    tape: &mut GradTape<S>,
    x: Var,
    p: &DirectionParams<Var>,
    direction: Direction,
) -> Result<ScanVars> {
    let b = tape.matmul(x, p.proj_b)?;
    let c = tape.matmul(x, p.proj_c)?;
    let low = tape.matmul(x, p.dt_down)?;
    let pre = tape.linear(low, p.dt_up, Some(p.dt_bias))?;
    let delta = tape.softplus(pre);
    let a = tape.neg_exp(p.a_log);
    let y = tape.scan(x, delta, b, c, a, direction == Direction::Backward)?;
    Ok(ScanVars { y, delta })
}

/// Runs one directional selective scan over inner features `x: N × d_inner`.
pub fn selective_scan<S: Scalar>(
    x: &Tensor<S>,
    params: &DirectionParams<Tensor<S>>,
    direction: Direction,
) -> Result<ScanOutput<S>> {
    let mut tape = GradTape::inference();
    let xv = tape.leaf(x.clone());
    let p = params.map(&mut |t| tape.leaf(t.clone()));
    let out = scan_on_tape(&mut tape, xv, &p, direction)?;
    Ok(ScanOutput {
        y: tape.value(out.y).clone(),
        delta: tape.value(out.delta).clone(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    /// `Linear(Y_f + Y_b)`, before the residual sum.
    pub t_star: Var,
    /// `T* + T_prev`.
    pub t_next: Var,
    pub delta_f: Var,
    pub delta_b: Var,
}

/// RMS-norm epsilon of every normalisation layer.
pub const NORM_EPS: f64 = 1e-5;

/// The bidirectional block on a tape: RMS norm, shared input projection,
/// forward and backward scans, shared output projection, residual.
pub fn vim_block_on_tape<S: Scalar>(
    tape: &mut GradTape<S>,
    p: &SsmLayerParams<Var>,
    t_prev: Var,
) -> Result<BlockVars> {
    if !tape.value(t_prev).is_finite() {
        return Err(Error::NonFinite("block input"));
    }
    let normed = tape.rms_norm(t_prev, p.norm, S::of(NORM_EPS))?;
    let x = tape.linear(normed, p.in_proj.weight, p.in_proj.bias)?;
    let f = scan_on_tape(tape, x, &p.fwd, Direction::Forward)?;
    let b = scan_on_tape(tape, x, &p.bwd, Direction::Backward)?;
    let ysum = tape.add(f.y, b.y)?;
    let t_star = tape.linear(ysum, p.out_proj.weight, p.out_proj.bias)?;
    let t_next = tape.add(t_star, t_prev)?;
    Ok(BlockVars {
        t_star,
        t_next,
        delta_f: f.delta,
        delta_b: b.delta,
    })
}

#[derive(Debug, Clone)]
pub struct VimBlockOutput<S> {
    pub t_star: Tensor<S>,
    pub t_next: TokenSequence<S>,
    pub delta_f: Tensor<S>,
    pub delta_b: Tensor<S>,
}

/// Evaluates one block on a token sequence without recording gradients.
pub fn vim_block<S: Scalar>(
    params: &SsmLayerParams<Tensor<S>>,
    t_prev: &TokenSequence<S>,
) -> Result<VimBlockOutput<S>> {
    let mut tape = GradTape::inference();
    let x = tape.leaf(t_prev.values.clone());
    let p = params.map(&mut |t| tape.leaf(t.clone()));
    let out = vim_block_on_tape(&mut tape, &p, x)?;
    let mut t_next = t_prev.clone();
    t_next.values = tape.value(out.t_next).clone();
    Ok(VimBlockOutput {
        t_star: tape.value(out.t_star).clone(),
        t_next,
        delta_f: tape.value(out.delta_f).clone(),
        delta_b: tape.value(out.delta_b).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> BlockDims {
        BlockDims {
            embed: 4,
            inner: 6,
            state: 3,
            dt_rank: 2,
        }
    }

    #[test]
    fn discretize_small_step_limit() {
        let (abar, bbar) = discretize(&[-1.0f64], &[1.0], 1e-12).unwrap();
        assert!((abar[0] - 1.0).abs() < 1e-11);
        assert!(bbar[0].abs() < 1e-11);
    }

    #[test]
    fn discretize_ln2_closed_form() {
        let (abar, bbar) = discretize(&[-1.0f64], &[1.0], std::f64::consts::LN_2).unwrap();
        assert!((abar[0] - 0.5).abs() < 1e-15);
        assert!((bbar[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn discretize_large_step_forgets() {
        let (abar, bbar) = discretize(&[-1.0f64], &[1.0], 1e3).unwrap();
        assert!(abar[0] < 1e-300);
        assert!((bbar[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discretize_rejects_nonpositive_step() {
        for d in [0.0, -0.5, f64::NAN] {
            let err = discretize(&[-1.0f64], &[1.0], d).unwrap_err();
            assert!(err.to_string().contains("nonpositive step"), "{err}");
        }
    }

    #[test]
    fn abar_in_unit_interval_and_decreasing() {
        let a = [-0.3f64, -1.0, -7.0];
        let mut last = [1.0; 3];
        for k in 1..50 {
            let (abar, _) = discretize(&a, &[1.0; 3], 0.02 * k as f64).unwrap();
            for (i, &v) in abar.iter().enumerate() {
                assert!(v > 0.0 && v < 1.0);
                assert!(v < last[i]);
                last[i] = v;
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DirectionParams::<Tensor<f64>>::init(&mut rng, dims());
        let x = Tensor::zeros(&[5, 6]);
        for dir in [Direction::Forward, Direction::Backward] {
            let out = selective_scan(&x, &p, dir).unwrap();
            assert!(out.y.data().iter().all(|&v| v == 0.0));
            assert!(out.delta.data().iter().all(|&v| v > 0.0));
            assert_eq!(out.y.shape(), &[5, 6]);
        }
    }

    #[test]
    fn nan_input_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DirectionParams::<Tensor<f64>>::init(&mut rng, dims());
        let mut x = Tensor::zeros(&[3, 6]);
        x.data_mut()[4] = f64::NAN;
        let err = selective_scan(&x, &p, Direction::Forward).unwrap_err();
        assert!(err.to_string().contains("nonfinite"));
    }

    #[test]
    fn zero_out_proj_is_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = SsmLayerParams::<Tensor<f64>>::init(&mut rng, dims());
        p.out_proj.weight = Tensor::zeros(&[6, 4]);
        p.out_proj.bias = Some(Tensor::zeros(&[4]));
        let seq = TokenSequence::new(
            Tensor::random_uniform(&mut rng, &[7, 4], -1.0, 1.0),
            None,
        );
        let out = vim_block(&p, &seq).unwrap();
        assert_eq!(out.t_next.values, seq.values);
        assert_eq!(out.t_star.shape(), &[7, 4]);
        assert_eq!(out.delta_f.shape(), &[7, 6]);
        assert_eq!(out.delta_b.shape(), &[7, 6]);
    }
}
