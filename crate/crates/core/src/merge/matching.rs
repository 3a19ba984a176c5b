//! Bipartite soft matching between alternating token sets.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::sequence::TokenLayout;

/// Splits the non-class tokens by current position: even positions are
/// sources, odd positions destinations.
pub fn bipartite_split(layout: &TokenLayout) -> (Vec<usize>, Vec<usize>) {
    (0..layout.len())
        .filter(|&p| !layout.is_protected(p))
        .partition(|&p| p % 2 == 0)
}

/// Picks the `r` sources whose best destination scores highest.
///
/// `score` is `|src| × |dst|`. Each source keeps its argmax destination
/// (lowest index on ties); sources are ranked by that best score, lower
/// position first on ties. Returned `(src, dst)` pairs are current positions
/// sorted by source.
pub fn bipartite_match<S: Scalar>(
    score: &Tensor<S>,
    src: &[usize],
    dst: &[usize],
    r: usize,
) -> Result<Vec<(usize, usize)>> {
    if r > src.len() {
        return Err(Error::ReductionExceedsSource { r, src: src.len() });
    }
    if r == 0 {
        return Ok(Vec::new());
    }
    if dst.is_empty() {
        return Err(Error::Config("no destination tokens to merge into".into()));
    }
    if score.shape() != [src.len(), dst.len()] {
        return Err(Error::shape(
            "bipartite_match",
            format!("score {:?} for {}×{}", score.shape(), src.len(), dst.len()),
        ));
    }
    let mut best: Vec<(usize, usize, S)> = src
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let row = score.row(i);
            let mut j_best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[j_best] {
                    j_best = j;
                }
            }
            (s, dst[j_best], row[j_best])
        })
        .collect();
    // stable sort keeps ascending source position among equal scores
    best.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
    let mut pairs: Vec<(usize, usize)> = best[..r].iter().map(|&(s, d, _)| (s, d)).collect();
    pairs.sort_unstable();
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_skips_class_token() {
        let layout = TokenLayout::identity(7, Some(3));
        let (src, dst) = bipartite_split(&layout);
        assert_eq!(src, vec![0, 2, 4, 6]);
        assert_eq!(dst, vec![1, 5]);
    }

    #[test]
    fn picks_top_r_by_best_score() {
        let score = Tensor::from_rows(&[
            vec![0.1, 0.9],
            vec![0.5, 0.2],
            vec![0.95, 0.3],
        ])
        .unwrap();
        let pairs = bipartite_match(&score, &[0, 2, 4], &[1, 3], 2).unwrap();
        assert_eq!(pairs, vec![(0, 3), (4, 1)]);
    }

    #[test]
    fn ties_break_to_lower_positions() {
        let score = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let pairs = bipartite_match(&score, &[0, 2], &[1, 3], 1).unwrap();
        assert_eq!(pairs, vec![(0, 1)]);
    }

    #[test]
    fn too_many_merges_is_an_error() {
        let score = Tensor::<f64>::zeros(&[2, 2]);
        let err = bipartite_match(&score, &[0, 2], &[1, 3], 3).unwrap_err();
        assert!(err.to_string().contains("reduction exceeds source set"));
    }
}
