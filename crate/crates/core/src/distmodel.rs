//! Probability vectors over a finite support, their dyadic level sets,
//! the neighbourhood class of a reference vector, and the `J` index.
//!
//! Category indices are 0-based. Rank positions in the sorted view (the `J`
//! index and the minimizers in [`crate::rates`]) are 1-based, so that
//! position `j` refers to the `j`-th largest entry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A validated probability vector over `d >= 1` categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    /// Normalizes a non-negative weight vector into a distribution.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyVector);
        }
        for (index, &value) in raw.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if value < 0.0 {
                return Err(Error::NegativeEntry { index, value });
            }
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroSum);
        }
        let probs = if total == 1.0 {
            raw
        } else {
            raw.into_iter().map(|x| x / total).collect()
        };
        Ok(Self { probs })
    }

    pub fn d(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// L1 distance to another distribution on the same support.
    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        check_same_d(self, other)?;
        Ok(self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum())
    }

    /// Returns the distribution with coordinates relabeled so that new
    /// coordinate `i` carries old coordinate `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.d() {
            return Err(Error::DimensionMismatch {
                left: perm.len(),
                right: self.d(),
            });
        }
        Ok(Self {
            probs: perm.iter().map(|&j| self.probs[j]).collect(),
        })
    }

    pub fn sorted_view(&self) -> SortedView {
        SortedView::new(&self.probs)
    }

    pub fn level_sets(&self) -> LevelSetMap {
        level_sets(self)
    }
}

impl TryFrom<Vec<f64>> for DiscreteDistribution {
    type Error = Error;

    fn try_from(raw: Vec<f64>) -> Result<Self> {
        Self::new(raw)
    }
}

impl From<DiscreteDistribution> for Vec<f64> {
    fn from(dist: DiscreteDistribution) -> Self {
        dist.probs
    }
}

/// Builds a distribution from raw non-negative weights.
pub fn make_distribution(raw: &[f64]) -> Result<DiscreteDistribution> {
    DiscreteDistribution::new(raw.to_vec())
}

fn check_same_d(a: &DiscreteDistribution, b: &DiscreteDistribution) -> Result<()> {
    if a.d() != b.d() {
        return Err(Error::DimensionMismatch {
            left: a.d(),
            right: b.d(),
        });
    }
    Ok(())
}

/// The dyadic level `i` with `p` in `[2^-i, 2^-i+1)`, or `None` for `p = 0`.
pub fn dyadic_level(p: f64) -> Option<i32> {
    if p <= 0.0 {
        return None;
    }
    let mut level = (-p.log2()).ceil() as i32;
    // log2 can be off by one ulp near exact powers of two.
    loop {
        let lo = 2f64.powi(-level);
        let hi = 2f64.powi(-level + 1);
        if p < lo {
            level += 1;
        } else if p >= hi {
            level -= 1;
        } else {
            return Some(level);
        }
    }
}

/// Level sets `S(i)` of a distribution, plus its zero entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSetMap {
    pub sets: BTreeMap<i32, Vec<usize>>,
    pub zero_support: Vec<usize>,
}

impl LevelSetMap {
    pub fn size(&self, level: i32) -> usize {
        self.sets.get(&level).map_or(0, Vec::len)
    }

    /// Sum of `|S(j)|` for `j` in `[from, to]`.
    pub fn window(&self, from: i32, to: i32) -> usize {
        self.sets.range(from..=to).map(|(_, v)| v.len()).sum()
    }

    fn level_range(&self) -> Option<(i32, i32)> {
        let lo = *self.sets.keys().next()?;
        let hi = *self.sets.keys().next_back()?;
        Some((lo, hi))
    }
}

pub fn level_sets(pi: &DiscreteDistribution) -> LevelSetMap {
    let mut sets: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    let mut zero_support = Vec::new();
    for (j, &p) in pi.probs().iter().enumerate() {
        match dyadic_level(p) {
            Some(level) => sets.entry(level).or_default().push(j),
            None => zero_support.push(j),
        }
    }
    LevelSetMap { sets, zero_support }
}

/// Whether `q` belongs to the level-set neighbourhood class of `pi`.
///
/// For every level `i`, requires
/// `|S_pi(i)|/2 <= sum_{j=i-1}^{i+1} |S_q(j)| <= 3/2 sum_{j=i-2}^{i+2} |S_pi(j)|`.
pub fn in_class_p_pi(q: &DiscreteDistribution, pi: &DiscreteDistribution) -> Result<bool> {
    check_same_d(q, pi)?;
    let ls_pi = level_sets(pi);
    let ls_q = level_sets(q);
    let range = match (ls_pi.level_range(), ls_q.level_range()) {
        (Some((a, b)), Some((c, d))) => (a.min(c) - 2, b.max(d) + 2),
        (Some(r), None) | (None, Some(r)) => (r.0 - 2, r.1 + 2),
        (None, None) => return Ok(true),
    };
    for i in range.0..=range.1 {
        let center = ls_pi.size(i) as f64;
        let q_window = ls_q.window(i - 1, i + 1) as f64;
        let pi_window = ls_pi.window(i - 2, i + 2) as f64;
        if center / 2.0 > q_window || q_window > 1.5 * pi_window {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The non-increasing rearrangement of a vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortedView {
    /// `order[r]` is the category holding the `(r+1)`-th largest value.
    pub order: Vec<usize>,
    pub sorted_probs: Vec<f64>,
}

impl SortedView {
    pub fn new(values: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        // Stable: ties keep category order.
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
        let sorted_probs = order.iter().map(|&i| values[i]).collect();
        Self {
            order,
            sorted_probs,
        }
    }

    /// Scatters a vector given in sorted order back onto categories.
    pub fn unsort(&self, sorted: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; sorted.len()];
        for (r, &i) in self.order.iter().enumerate() {
            out[i] = sorted[r];
        }
        out
    }
}

/// The 1-based rank of the first sorted entry `<= 1/k`, or `d + 1` if none.
pub fn j_index(pi: &DiscreteDistribution, k: u64) -> usize {
    j_index_sorted(&pi.sorted_view().sorted_probs, k)
}

pub(crate) fn j_index_sorted(sorted: &[f64], k: u64) -> usize {
    let inv_k = 1.0 / k as f64;
    sorted
        .iter()
        .position(|&p| p <= inv_k)
        .map_or(sorted.len() + 1, |r| r + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> DiscreteDistribution {
        make_distribution(v).unwrap()
    }

    #[test]
    fn normalization() {
        assert_eq!(dist(&[1.0, 1.0, 1.0, 1.0]).probs(), &[0.25; 4]);
        assert_eq!(dist(&[2.0, 0.0, 0.0]).probs(), &[1.0, 0.0, 0.0]);
        assert_eq!(
            make_distribution(&[0.3, -0.1]),
            Err(Error::NegativeEntry {
                index: 1,
                value: -0.1
            })
        );
        assert_eq!(make_distribution(&[]), Err(Error::EmptyVector));
        assert_eq!(make_distribution(&[0.0, 0.0]), Err(Error::ZeroSum));
        assert!(matches!(
            make_distribution(&[f64::NAN]),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn levels_of_simple_vectors() {
        let ls = level_sets(&dist(&[0.25; 4]));
        assert_eq!(ls.sets, BTreeMap::from([(2, vec![0, 1, 2, 3])]));
        let ls = level_sets(&dist(&[0.5, 0.5]));
        assert_eq!(ls.sets, BTreeMap::from([(1, vec![0, 1])]));
        let ls = level_sets(&dist(&[0.5, 0.25, 0.125, 0.125]));
        assert_eq!(
            ls.sets,
            BTreeMap::from([(1, vec![0]), (2, vec![1]), (3, vec![2, 3])])
        );
        let ls = level_sets(&dist(&[1.0, 0.0]));
        assert_eq!(ls.sets, BTreeMap::from([(0, vec![0])]));
        assert_eq!(ls.zero_support, vec![1]);
    }

    #[test]
    fn dyadic_boundaries_are_exact() {
        for e in 0..60 {
            let p = 2f64.powi(-e);
            assert_eq!(dyadic_level(p), Some(e));
            let below = f64::from_bits(p.to_bits() - 1);
            assert_eq!(dyadic_level(below), Some(e + 1));
        }
        assert_eq!(dyadic_level(0.0), None);
    }

    #[test]
    fn class_membership_examples() {
        let pi = dist(&[0.5, 0.25, 0.125, 0.125]);
        assert!(in_class_p_pi(&pi, &pi).unwrap());
        assert!(in_class_p_pi(&dist(&[0.25; 4]), &pi).unwrap());
        let q = dist(&[0.125, 0.5, 0.125, 0.25]);
        assert!(in_class_p_pi(&q, &pi).unwrap());
        // A point mass leaves pi's level 3 without any nearby q entries.
        assert!(!in_class_p_pi(&dist(&[1.0, 0.0, 0.0, 0.0]), &pi).unwrap());
        assert_eq!(
            in_class_p_pi(&dist(&[1.0]), &pi),
            Err(Error::DimensionMismatch { left: 1, right: 4 })
        );
    }

    #[test]
    fn class_rejects_far_shapes() {
        // 64 equal entries vs. a point mass: level 6 of pi has 64 entries,
        // the point mass has none nearby.
        let pi = dist(&[1.0; 64]);
        let mut raw = vec![0.0; 64];
        raw[0] = 1.0;
        assert!(!in_class_p_pi(&dist(&raw), &pi).unwrap());
    }

    #[test]
    fn j_index_examples() {
        assert_eq!(j_index(&dist(&[0.1; 10]), 5), 1);
        assert_eq!(j_index(&dist(&[0.5, 0.3, 0.2]), 10), 4);
        assert_eq!(j_index(&dist(&[0.9, 0.05, 0.05]), 10), 2);
        assert_eq!(j_index(&dist(&[0.05, 0.9, 0.05]), 10), 2);
    }

    fn weights(max_d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), 1e-6f64..1.0, 0.5f64..50.0], 1..max_d)
            .prop_filter("positive mass", |v| v.iter().sum::<f64>() > 0.0)
    }

    proptest! {
        #[test]
        fn class_contains_reference(raw in weights(40)) {
            let pi = dist(&raw);
            prop_assert!(in_class_p_pi(&pi, &pi).unwrap());
        }

        #[test]
        fn class_is_permutation_invariant(raw in weights(40), other in weights(40), seed in any::<u64>()) {
            let pi = dist(&raw);
            let mut q_raw = other;
            q_raw.resize(pi.d(), 0.25);
            q_raw[0] += 0.25;
            let q = dist(&q_raw);
            let mut perm: Vec<usize> = (0..q.d()).collect();
            let mut s = seed;
            for i in (1..perm.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let qp = q.permuted(&perm).unwrap();
            prop_assert_eq!(in_class_p_pi(&q, &pi).unwrap(), in_class_p_pi(&qp, &pi).unwrap());
            prop_assert!(in_class_p_pi(&pi.permuted(&perm).unwrap(), &pi).unwrap());
        }

        #[test]
        fn level_sets_cover_support(raw in weights(60)) {
            let pi = dist(&raw);
            let ls = level_sets(&pi);
            let total: usize = ls.sets.values().map(Vec::len).sum();
            prop_assert_eq!(total + ls.zero_support.len(), pi.d());
            for (&level, members) in &ls.sets {
                for &j in members {
                    let p = pi.get(j);
                    prop_assert!(p >= 2f64.powi(-level) && p < 2f64.powi(-level + 1));
                }
            }
        }

        #[test]
        fn j_index_is_monotone_in_k(raw in weights(40), k1 in 1u64..500, dk in 0u64..500) {
            let pi = dist(&raw);
            let j1 = j_index(&pi, k1);
            prop_assert!(j1 <= j_index(&pi, k1 + dk));
            prop_assert!((1..=pi.d() + 1).contains(&j1));
        }

        #[test]
        fn sorted_view_round_trips(raw in weights(60)) {
            let pi = dist(&raw);
            let view = pi.sorted_view();
            prop_assert!(view.sorted_probs.windows(2).all(|w| w[0] >= w[1]));
            let sorted: Vec<f64> = view.order.iter().map(|&i| pi.get(i)).collect();
            prop_assert_eq!(&sorted, &view.sorted_probs);
            prop_assert_eq!(view.unsort(&view.sorted_probs), pi.probs().to_vec());
        }
    }
}
