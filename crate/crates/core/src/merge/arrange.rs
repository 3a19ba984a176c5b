//! Grouping matched pairs into merged tokens and placing them in the
//! shortened sequence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RowMix, Tensor};
use crate::scalar::Scalar;

use super::sequence::{TokenLayout, TokenSequence};

/// Where a merged token lands in the output sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// All merged tokens first, then survivors.
    IsoFront,
    /// Survivors first, then all merged tokens.
    IsoLast,
    /// At the destination token's slot.
    DstPos,
    /// At the slot of the constituent with the largest Δ̂.
    Informativeness,
    /// At the frontmost constituent's slot.
    #[default]
    OrdFront,
    /// At the middle constituent's slot (lower middle for even counts).
    OrdMid,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Self::IsoFront,
        Self::IsoLast,
        Self::DstPos,
        Self::Informativeness,
        Self::OrdFront,
        Self::OrdMid,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::IsoFront => "iso_front",
            Self::IsoLast => "iso_last",
            Self::DstPos => "dst_pos",
            Self::Informativeness => "informativeness",
            Self::OrdFront => "ord_front",
            Self::OrdMid => "ord_mid",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|t| t.tag() == s)
            .ok_or(Error::UnknownTag {
                kind: "arrangement strategy",
                tag: s,
            })
    }
}

/// One output token: an anchor plus everything merged into it, as current
/// (input) positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    /// Destination for merged groups, the token itself otherwise.
    pub anchor: usize,
    /// Ascending current positions, anchor included.
    pub members: Vec<usize>,
}

impl Group {
    pub fn is_merged(&self) -> bool {
        self.members.len() > 1
    }
}

/// Validates `pairs` against `layout` and groups them by destination.
/// The result is in anchor order.
pub fn group_pairs(layout: &TokenLayout, pairs: &[(usize, usize)]) -> Result<Vec<Group>> {
    let n = layout.len();
    let mut into: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut is_src = vec![false; n];
    for &(s, d) in pairs {
        if s >= n || d >= n {
            return Err(Error::InvalidPairs(format!("({s}, {d}) out of range for {n} tokens")));
        }
        if s == d {
            return Err(Error::InvalidPairs(format!("token {s} paired with itself")));
        }
        if layout.is_protected(s) || layout.is_protected(d) {
            return Err(Error::InvalidPairs("class token in a merge pair".into()));
        }
        if std::mem::replace(&mut is_src[s], true) {
            return Err(Error::InvalidPairs(format!("source {s} used twice")));
        }
        into[d].push(s);
    }
    if let Some(d) = (0..n).find(|&d| is_src[d] && !into[d].is_empty()) {
        return Err(Error::InvalidPairs(format!("token {d} is both source and destination")));
    }
    Ok((0..n)
        .filter(|&p| !is_src[p])
        .map(|p| {
            let mut members = std::mem::take(&mut into[p]);
            members.push(p);
            members.sort_unstable();
            Group { anchor: p, members }
        })
        .collect())
}

fn representative<S: Scalar>(g: &Group, strategy: Strategy, delta_hat: Option<&[S]>) -> Result<usize> {
    Ok(match strategy {
        Strategy::IsoFront | Strategy::IsoLast | Strategy::DstPos => g.anchor,
        Strategy::OrdFront => g.members[0],
        Strategy::OrdMid => g.members[(g.members.len() - 1) / 2],
        Strategy::Informativeness => {
            let dh = delta_hat.ok_or_else(|| {
                Error::Config("informativeness arrangement needs Δ̂".into())
            })?;
            let mut best = g.members[0];
            for &m in &g.members[1..] {
                if dh[m] > dh[best] {
                    best = m;
                }
            }
            best
        }
    })
}

/// How a merge layer maps its input tokens onto output tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    /// Output order; `groups[k]` feeds output token `k`.
    pub groups: Vec<Group>,
    /// Representative input position of each output token.
    pub representatives: Vec<usize>,
    /// Size-weighted averaging coefficients per output token.
    pub mix: Vec<Vec<(usize, f64)>>,
    /// Layout after merging.
    pub layout: TokenLayout,
}

impl MergePlan {
    /// Groups `pairs`, orders the groups by `strategy`, and derives weights and
    /// the output layout.
    pub fn new<S: Scalar>(
        layout: &TokenLayout,
        pairs: &[(usize, usize)],
        strategy: Strategy,
        delta_hat: Option<&[S]>,
    ) -> Result<Self> {
        if let Some(dh) = delta_hat {
            if dh.len() != layout.len() {
                return Err(Error::shape(
                    "arrange",
                    format!("Δ̂ has {} entries for {} tokens", dh.len(), layout.len()),
                ));
            }
        }
        let groups = group_pairs(layout, pairs)?;
        let mut keyed = groups
            .into_iter()
            .map(|g| {
                let rep = representative(&g, strategy, delta_hat)?;
                let class = match strategy {
                    Strategy::IsoFront => usize::from(!g.is_merged()),
                    Strategy::IsoLast => usize::from(g.is_merged()),
                    _ => 0,
                };
                Ok(((class, rep), g))
            })
            .collect::<Result<Vec<_>>>()?;
        keyed.sort_by_key(|(k, _)| *k);

        let mut out = TokenLayout {
            sizes: Vec::with_capacity(keyed.len()),
            orig_index: Vec::with_capacity(keyed.len()),
            members: Vec::with_capacity(keyed.len()),
            cls_pos: None,
        };
        let mut mix = Vec::with_capacity(keyed.len());
        let mut representatives = Vec::with_capacity(keyed.len());
        let mut ordered = Vec::with_capacity(keyed.len());
        for (k, ((_, rep), g)) in keyed.into_iter().enumerate() {
            let total: u32 = g.members.iter().map(|&m| layout.sizes[m]).sum();
            mix.push(
                g.members
                    .iter()
                    .map(|&m| (m, layout.sizes[m] as f64 / total as f64))
                    .collect(),
            );
            let mut members: Vec<usize> = g
                .members
                .iter()
                .flat_map(|&m| layout.members[m].iter().copied())
                .collect();
            members.sort_unstable();
            if layout.cls_pos == Some(g.anchor) {
                out.cls_pos = Some(k);
            }
            out.sizes.push(total);
            out.orig_index.push(layout.orig_index[rep]);
            out.members.push(members);
            representatives.push(rep);
            ordered.push(g);
        }
        Ok(Self {
            groups: ordered,
            representatives,
            mix,
            layout: out,
        })
    }

    /// The no-merge plan.
    pub fn identity(layout: &TokenLayout) -> Self {
        Self::new::<f64>(layout, &[], Strategy::DstPos, None).expect("empty pairs are valid")
    }

    /// Input positions feeding each output token.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        self.groups.iter().map(|g| g.members.clone()).collect()
    }

    pub fn out_len(&self) -> usize {
        self.groups.len()
    }

    pub fn row_mix<S: Scalar>(&self) -> RowMix<S> {
        self.mix
            .iter()
            .map(|row| row.iter().map(|&(i, w)| (i, S::of(w))).collect())
            .collect()
    }

    /// Applies the plan to an `N × D` tensor.
    pub fn apply<S: Scalar>(&self, values: &Tensor<S>) -> Result<Tensor<S>> {
        let n_in = self.mix.iter().map(Vec::len).sum::<usize>();
        if values.rows() != n_in {
            return Err(Error::shape(
                "merge",
                format!("plan expects {n_in} rows, got {}", values.rows()),
            ));
        }
        let d = values.cols();
        let mut out = Vec::with_capacity(self.mix.len() * d);
        for row in &self.mix {
            if let [(i, _)] = row.as_slice() {
                out.extend_from_slice(values.row(*i));
                continue;
            }
            let start = out.len();
            out.resize(start + d, S::zero());
            for &(i, w) in row {
                let w = S::of(w);
                for (o, &v) in out[start..].iter_mut().zip(values.row(i)) {
                    *o += w * v;
                }
            }
        }
        Tensor::from_vec(&[self.mix.len(), d], out)
    }

    /// Applies the plan to a whole sequence, values and bookkeeping.
    pub fn apply_sequence<S: Scalar>(&self, seq: &TokenSequence<S>) -> Result<TokenSequence<S>> {
        Ok(TokenSequence {
            values: self.apply(&seq.values)?,
            layout: self.layout.clone(),
        })
    }
}

/// Merges each destination with its sources, keeping destination order.
pub fn merge_tokens<S: Scalar>(
    seq: &TokenSequence<S>,
    pairs: &[(usize, usize)],
) -> Result<TokenSequence<S>> {
    MergePlan::new::<S>(&seq.layout, pairs, Strategy::DstPos, None)?.apply_sequence(seq)
}

/// Merges and arranges `seq` per `strategy`. `delta_hat` is required for
/// [`Strategy::Informativeness`].
pub fn arrange<S: Scalar>(
    seq: &TokenSequence<S>,
    pairs: &[(usize, usize)],
    strategy: Strategy,
    delta_hat: Option<&[S]>,
) -> Result<TokenSequence<S>> {
    MergePlan::new(&seq.layout, pairs, strategy, delta_hat)?.apply_sequence(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(vals: &[f64]) -> TokenSequence<f64> {
        TokenSequence::new(Tensor::from_vec(&[vals.len(), 1], vals.to_vec()).unwrap(), None)
    }

    // Tokens labelled 1..=9 sit at positions 0..=8; 3, 5, 7 merge into 8.
    fn s1_pairs() -> Vec<(usize, usize)> {
        vec![(2, 7), (4, 7), (6, 7)]
    }

    fn labels(plan: &MergePlan) -> Vec<usize> {
        plan.representatives.iter().map(|p| p + 1).collect()
    }

    #[test]
    fn weighted_merge_examples() {
        let s = merge_tokens(&seq(&[0.0, 2.0]), &[(0, 1)]).unwrap();
        assert_eq!(s.values.data(), &[1.0]);
        assert_eq!(s.sizes(), &[2]);

        let s = merge_tokens(&seq(&[4.0, 4.0]), &[(1, 0)]).unwrap();
        assert_eq!(s.values.data(), &[4.0]);

        let mut base = seq(&[3.0, 0.0]);
        base.layout.sizes = vec![2, 1];
        base.layout.members = vec![vec![0, 5], vec![1]];
        let s = merge_tokens(&base, &[(1, 0)]).unwrap();
        assert_eq!(s.values.data(), &[2.0]);
        assert_eq!(s.sizes(), &[3]);
        assert_eq!(s.layout.members, vec![vec![0, 1, 5]]);
    }

    #[test]
    fn supplementary_example_orders() {
        let layout = TokenLayout::identity(9, None);
        let plan = |s| MergePlan::new::<f64>(&layout, &s1_pairs(), s, None).unwrap();
        // 'a' takes token 3's slot, between 2 and 4
        assert_eq!(labels(&plan(Strategy::OrdFront)), vec![1, 2, 3, 4, 6, 9]);
        assert_eq!(labels(&plan(Strategy::OrdMid)), vec![1, 2, 4, 5, 6, 9]);
        assert_eq!(labels(&plan(Strategy::DstPos)), vec![1, 2, 4, 6, 8, 9]);
        assert_eq!(labels(&plan(Strategy::IsoFront)), vec![8, 1, 2, 4, 6, 9]);
        assert_eq!(labels(&plan(Strategy::IsoLast)), vec![1, 2, 4, 6, 9, 8]);

        let mut dh = vec![0.1; 9];
        dh[4] = 2.0;
        let p = MergePlan::new(&layout, &s1_pairs(), Strategy::Informativeness, Some(&dh)).unwrap();
        assert_eq!(labels(&p), vec![1, 2, 4, 5, 6, 9]);
        assert_eq!(p.layout.orig_index, vec![0, 1, 3, 4, 5, 8]);
        assert_eq!(p.layout.members[3], vec![2, 4, 6, 7]);
    }

    #[test]
    fn informativeness_needs_delta() {
        let layout = TokenLayout::identity(9, None);
        assert!(MergePlan::new::<f64>(&layout, &s1_pairs(), Strategy::Informativeness, None).is_err());
    }

    #[test]
    fn class_position_is_tracked() {
        let layout = TokenLayout::identity(5, Some(2));
        let plan = MergePlan::new::<f64>(&layout, &[(0, 1)], Strategy::IsoLast, None).unwrap();
        assert_eq!(plan.layout.cls_pos, Some(0));
        assert_eq!(plan.layout.orig_index, vec![2, 3, 4, 1]);
        plan.layout.validate(5).unwrap();
    }

    #[test]
    fn invalid_pairs_rejected() {
        let layout = TokenLayout::identity(6, Some(5));
        for pairs in [
            vec![(0, 0)],
            vec![(0, 1), (0, 3)],
            vec![(0, 1), (1, 3)],
            vec![(0, 5)],
            vec![(9, 1)],
        ] {
            assert!(group_pairs(&layout, &pairs).is_err(), "{pairs:?}");
        }
    }

    #[test]
    fn strategy_tags() {
        for s in Strategy::ALL {
            assert_eq!(s.tag().parse::<Strategy>().unwrap(), s);
        }
        let err = "middle".parse::<Strategy>().unwrap_err();
        assert!(err.to_string().contains("middle"));
    }
}
