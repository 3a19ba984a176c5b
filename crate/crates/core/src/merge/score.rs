//! Merge-score ingredients: per-token Δ̂, similarity and informativeness
//! weights, and their product.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::gemm_nt;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// How the forward and backward per-token step sizes are combined into Δ̂.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integration {
    Max,
    Min,
    #[default]
    Avg,
    Sum,
}

impl Integration {
    pub const ALL: [Integration; 4] = [Self::Max, Self::Min, Self::Avg, Self::Sum];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Max => "max",
            Self::Min => "min",
            Self::Avg => "avg",
            Self::Sum => "sum",
        }
    }

    #[inline]
    pub fn combine<S: Scalar>(self, f: S, b: S) -> S {
        match self {
            Self::Max => f.max(b),
            Self::Min => f.min(b),
            Self::Avg => (f + b) * S::of(0.5),
            Self::Sum => f + b,
        }
    }
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|i| i.tag() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownTag {
                kind: "integration function",
                tag: s.to_string(),
            })
    }
}

/// Mean over channels of each row.
pub fn channel_mean<S: Scalar>(t: &Tensor<S>) -> Vec<S> {
    let inv = S::one() / S::of(t.cols() as f64);
    (0..t.rows())
        .map(|i| t.row(i).iter().copied().sum::<S>() * inv)
        .collect()
}

/// Per-token Δ̂: channel-mean of each direction, then combined with `f`.
pub fn integrate_delta<S: Scalar>(
    delta_f: &Tensor<S>,
    delta_b: &Tensor<S>,
    f: Integration,
) -> Result<Vec<S>> {
    if delta_f.shape() != delta_b.shape() {
        return Err(Error::shape(
            "integrate_delta",
            format!("{:?} vs {:?}", delta_f.shape(), delta_b.shape()),
        ));
    }
    Ok(channel_mean(delta_f)
        .into_iter()
        .zip(channel_mean(delta_b))
        .map(|(a, b)| f.combine(a, b))
        .collect())
}

/// `(cos(a, b) + 1) / 2`. A zero-norm operand counts as orthogonal.
pub fn similarity_weight<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut dot = S::zero();
    let mut na = S::zero();
    let mut nb = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == S::zero() || nb == S::zero() {
        log::debug!("zero-norm token in similarity; using cosine 0");
        return S::of(0.5);
    }
    let cos = (dot / (na.sqrt() * nb.sqrt())).max(-S::one()).min(S::one());
    (cos + S::one()) * S::of(0.5)
}

/// `exp(−(Δ̂_i + Δ̂_j) / (2τ))`.
#[inline]
pub fn delta_weight<S: Scalar>(di: S, dj: S, tau: S) -> S {
    (-(di + dj) / (S::of(2.0) * tau)).exp()
}

/// `W_sim` over `src × dst` rows of `values`.
pub fn similarity_matrix<S: Scalar>(values: &Tensor<S>, src: &[usize], dst: &[usize]) -> Tensor<S> {
    let k = values.cols();
    // unit rows; a zero row stays zero and so scores cosine 0
    let gather = |idx: &[usize]| -> Vec<S> {
        let mut out = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            let row = values.row(i);
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if n > S::zero() {
                out.extend(row.iter().map(|&v| v / n));
            } else {
                log::debug!("zero-norm token in similarity; using cosine 0");
                out.extend(std::iter::repeat_n(S::zero(), k));
            }
        }
        out
    };
    let (a, b) = (gather(src), gather(dst));
    let mut data = vec![S::zero(); src.len() * dst.len()];
    gemm_nt(&a, &b, &mut data, src.len(), k, dst.len());
    for w in &mut data {
        *w = (w.max(-S::one()).min(S::one()) + S::one()) * S::of(0.5);
    }
    matrix(src.len(), dst.len(), data)
}

/// `W_Δ` over `src × dst` pairs, as the product of per-token factors
/// `exp(−Δ̂/(2τ))`.
pub fn delta_weight_matrix<S: Scalar>(
    delta_hat: &[S],
    src: &[usize],
    dst: &[usize],
    tau: S,
) -> Tensor<S> {
    let half = |i: usize| (-delta_hat[i] / (S::of(2.0) * tau)).exp();
    let fd: Vec<S> = dst.iter().map(|&j| half(j)).collect();
    let data = src
        .iter()
        .flat_map(|&i| {
            let fi = half(i);
            fd.iter().map(move |&f| fi * f)
        })
        .collect();
    matrix(src.len(), dst.len(), data)
}

/// `Score = W_sim ⊙ W_Δ`.
pub fn merge_score<S: Scalar>(w_sim: &Tensor<S>, w_delta: &Tensor<S>) -> Result<Tensor<S>> {
    w_sim.mul(w_delta)
}

// Empty src or dst sets still need a representable (if degenerate) matrix.
fn matrix<S: Scalar>(m: usize, n: usize, data: Vec<S>) -> Tensor<S> {
    if m == 0 || n == 0 {
        return Tensor::zeros(&[1, 1]);
    }
    Tensor::from_vec(&[m, n], data).expect("matrix shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn integration_examples() {
        let df = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 1.0]]).unwrap();
        let db = Tensor::from_rows(&[vec![3.0, 3.0], vec![0.0, 0.0]]).unwrap();
        // per-token means: f = (1, 2), b = (3, 0)
        assert_eq!(integrate_delta(&df, &db, Integration::Max).unwrap(), vec![3.0, 2.0]);
        assert_eq!(integrate_delta(&df, &db, Integration::Min).unwrap(), vec![1.0, 0.0]);
        assert_eq!(integrate_delta(&df, &df, Integration::Avg).unwrap(), channel_mean(&df));
    }

    #[test]
    fn integration_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 3]);
        assert!(integrate_delta(&a, &b, Integration::Avg).is_err());
    }

    #[test]
    fn integration_tags_round_trip() {
        for f in Integration::ALL {
            assert_eq!(f.tag().parse::<Integration>().unwrap(), f);
        }
        assert!("median".parse::<Integration>().is_err());
    }

    #[test]
    fn similarity_examples() {
        assert!((similarity_weight(&[1.0, 2.0], &[1.0, 2.0]) - 1.0f64).abs() < 1e-15);
        assert!(similarity_weight(&[1.0f64, 2.0], &[-1.0, -2.0]).abs() < 1e-15);
        assert_eq!(similarity_weight(&[1.0, 0.0], &[0.0, 3.0]), 0.5);
        assert_eq!(similarity_weight(&[0.0, 0.0], &[0.0, 3.0]), 0.5);
    }

    #[test]
    fn delta_weight_examples() {
        assert_eq!(delta_weight(0.0, 0.0, 10.0), 1.0);
        let tau = 3.5f64;
        assert!((delta_weight(tau, tau, tau) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((delta_weight(tau, tau, tau) - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn informative_pair_is_suppressed() {
        // equal similarity 0.9; Δ̂ means 0 and 20 with τ = 10
        let calm = 0.9 * delta_weight(0.0, 0.0, 10.0);
        let busy = 0.9 * delta_weight(20.0, 20.0, 10.0);
        assert!((calm - 0.9f64).abs() < 1e-15);
        assert!((busy - 0.9 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((busy - 0.1218).abs() < 1e-4);
        assert!(calm > busy);
    }

    #[test]
    fn unit_delta_weight_leaves_similarity() {
        let sim = Tensor::from_rows(&[vec![0.2, 0.7], vec![1.0, 0.0]]).unwrap();
        let ones = Tensor::ones(&[2, 2]);
        assert_eq!(merge_score(&sim, &ones).unwrap(), sim);
    }

    proptest! {
        #[test]
        fn sum_is_twice_avg(vals in prop::collection::vec(0.0f64..5.0, 12)) {
            let f = Tensor::from_vec(&[3, 2], vals[..6].to_vec()).unwrap();
            let b = Tensor::from_vec(&[3, 2], vals[6..].to_vec()).unwrap();
            let s = integrate_delta(&f, &b, Integration::Sum).unwrap();
            let a = integrate_delta(&f, &b, Integration::Avg).unwrap();
            for (x, y) in s.iter().zip(&a) {
                prop_assert_eq!(*x, 2.0 * *y);
            }
        }

        #[test]
        fn weights_are_bounded(a in prop::collection::vec(-3.0f64..3.0, 5),
                               b in prop::collection::vec(-3.0f64..3.0, 5),
                               di in 0.0f64..50.0, dj in 0.0f64..50.0, tau in 0.01f64..100.0) {
            let s = similarity_weight(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
            let w = delta_weight(di, dj, tau);
            prop_assert!(w > 0.0 && w <= 1.0);
            prop_assert!(delta_weight(di + 0.5, dj, tau) < w || w < 1e-300);
        }
    }
}
