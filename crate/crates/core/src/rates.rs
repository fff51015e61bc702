//! Closed-form separation rates and the regime decomposition.
//!
//! Every formula works on the non-increasing rearrangement `pi_(1) >= ... >=
//! pi_(d)` with 1-based ranks, and minimizations are exhaustive scans backed
//! by prefix/suffix sums.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distmodel::{j_index_sorted, DiscreteDistribution};
use crate::error::{Error, Result};

pub const DEFAULT_U: f64 = 0.5;
pub const DEFAULT_V: f64 = 0.001;

/// A rate value together with the terms that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateBreakdown {
    pub rho: f64,
    /// `I*` or `m*`; `None` for formulas without a minimization.
    pub minimizer: Option<usize>,
    pub terms: BTreeMap<String, f64>,
    pub u: Option<f64>,
    pub v: Option<f64>,
}

impl RateBreakdown {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    /// One `name,value` row per term, plus `rho` and `minimizer`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "value"]).expect("in-memory write");
        w.write_record(["rho", &self.rho.to_string()])
            .expect("in-memory write");
        let m = self.minimizer.map(|m| m.to_string()).unwrap_or_default();
        w.write_record(["minimizer", &m]).expect("in-memory write");
        for (name, value) in &self.terms {
            w.write_record([name.as_str(), &value.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

fn check_k(k: u64) -> Result<()> {
    if k < 2 {
        return Err(Error::KTooSmall { k, min: 2 });
    }
    Ok(())
}

fn sorted_desc(pi: &DiscreteDistribution) -> Vec<f64> {
    pi.sorted_view().sorted_probs
}

/// `suffix[r] = sum_{i >= r} s_(i)` for 0-based `r`, with `suffix[d] = 0`.
fn suffix_sums(sorted: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; sorted.len() + 1];
    for r in (0..sorted.len()).rev() {
        out[r] = out[r + 1] + f(sorted[r]);
    }
    out
}

/// `prefix[r] = sum_{i < r} s_(i)` for 0-based `r`, with `prefix[0] = 0`.
fn prefix_sums(sorted: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; sorted.len() + 1];
    for r in 0..sorted.len() {
        out[r + 1] = out[r] + f(sorted[r]);
    }
    out
}

/// `||pi^2 exp(-u k pi)||_1` over all coordinates.
pub fn exp_mass(pi: &[f64], k: u64, u: f64) -> f64 {
    let kf = k as f64;
    pi.iter().map(|&p| p * p * (-u * kf * p).exp()).sum()
}

/// The head term `||pi_(i)^{2/3} 1{i <= J}||_1^{3/4} / sqrt(k)`.
fn head_term(sorted: &[f64], j: usize, k: u64) -> f64 {
    let upto = j.min(sorted.len());
    let mass: f64 = sorted[..upto].iter().map(|&p| p.powf(2.0 / 3.0)).sum();
    mass.powf(0.75) / (k as f64).sqrt()
}

/// Shared shape of the upper and lower rates; `sqrt_i_scale` multiplies
/// `sqrt(I)` in the first middle term and `floor` is the outer floor.
fn local_rate(sorted: &[f64], k: u64, u: f64, sqrt_i_scale: f64, floor: f64) -> RateBreakdown {
    let d = sorted.len();
    let kf = k as f64;
    let j = j_index_sorted(sorted, k);
    let head = head_term(sorted, j, k);
    let mut terms = BTreeMap::from([
        ("head_23".to_string(), head),
        ("floor_sqrtk".to_string(), floor),
    ]);
    let mut rho = head.max(floor);
    let mut minimizer = j;
    if j <= d {
        let e_quarter = exp_mass(sorted, k, u).powf(0.25);
        let tail = suffix_sums(sorted, |p| p);
        let objective = |i: usize| {
            let a = (i as f64).sqrt() * sqrt_i_scale;
            let b = (i as f64 / kf).sqrt() * e_quarter;
            let c = tail[i - 1];
            (a, b, c, a.max(b).max(c))
        };
        let mut best = f64::INFINITY;
        for i in j..=d {
            let value = objective(i).3;
            if value < best {
                best = value;
                minimizer = i;
            }
        }
        let (a, b, c, value) = objective(minimizer);
        terms.insert("mid_sqrtI".into(), a);
        terms.insert("mid_exp".into(), b);
        terms.insert("tail_l1".into(), c);
        rho = rho.max(value);
    }
    RateBreakdown {
        rho,
        minimizer: Some(minimizer),
        terms,
        u: Some(u),
        v: None,
    }
}

/// Upper rate attained by the combined test, with exponent scale `u`
/// (default 1/2) and the `sqrt(I) log(k) / k` middle term.
pub fn upper_rate(pi: &DiscreteDistribution, k: u64, u: f64) -> Result<RateBreakdown> {
    check_k(k)?;
    let kf = k as f64;
    let sorted = sorted_desc(pi);
    Ok(local_rate(
        &sorted,
        k,
        u,
        kf.ln() / kf,
        (kf.ln() / kf).sqrt(),
    ))
}

/// Lower rate with exponent scale `2 + v` and the `sqrt(I) / k` middle term.
pub fn lower_rate(pi: &DiscreteDistribution, k: u64, v: f64) -> Result<RateBreakdown> {
    check_k(k)?;
    if v.is_nan() || v < 0.0 {
        return Err(Error::BadParameter(format!("v must be >= 0, got {v}")));
    }
    let kf = k as f64;
    let sorted = sorted_desc(pi);
    let mut out = local_rate(&sorted, k, 2.0 + v, 1.0 / kf, (1.0 / kf).sqrt());
    out.v = Some(v);
    Ok(out)
}

/// Local minimax rate of identity testing against `pi`.
pub fn identity_rate(pi: &DiscreteDistribution, k: u64) -> Result<RateBreakdown> {
    check_k(k)?;
    let kf = k as f64;
    let sorted = sorted_desc(pi);
    let d = sorted.len();
    let pow23 = prefix_sums(&sorted, |p| p.powf(2.0 / 3.0));
    let tail = suffix_sums(&sorted, |p| p);
    let floor = 1.0 / kf;
    // Head over ranks 2 <= i < m, i.e. 0-based ranks 1..m-1.
    let objective = |m: usize| {
        let head = if m > 2 {
            (pow23[m - 1] - pow23[1]).max(0.0).powf(0.75) / kf.sqrt()
        } else {
            0.0
        };
        let t = tail[m - 1];
        (head, t, head.max(floor).max(t))
    };
    let mut best = f64::INFINITY;
    let mut m_star = 1;
    for m in 1..=d + 1 {
        let value = objective(m).2;
        if value < best {
            best = value;
            m_star = m;
        }
    }
    let (head, t, rho) = objective(m_star);
    Ok(RateBreakdown {
        rho,
        minimizer: Some(m_star),
        terms: BTreeMap::from([
            ("head_23".to_string(), head),
            ("floor_1k".to_string(), floor),
            ("tail_l1".to_string(), t),
        ]),
        u: None,
        v: None,
    })
}

/// The comparison rate built from the entries below `1/k` and the full
/// `2/3`-norm.
pub fn dk16_rate(pi: &DiscreteDistribution, k: u64) -> Result<RateBreakdown> {
    check_k(k)?;
    let kf = k as f64;
    let inv_k = 1.0 / kf;
    let (count, sq) = pi
        .probs()
        .iter()
        .filter(|&&p| p < inv_k)
        .fold((0usize, 0.0), |(n, s), &p| (n + 1, s + p * p));
    let small = (count as f64).sqrt() * sq.powf(0.25) / kf.sqrt();
    let full: f64 = pi.probs().iter().map(|&p| p.powf(2.0 / 3.0)).sum();
    let head = full.powf(0.75) / kf.sqrt();
    Ok(RateBreakdown {
        rho: small.max(head),
        minimizer: None,
        terms: BTreeMap::from([
            ("small_entries".to_string(), small),
            ("head_23".to_string(), head),
        ]),
        u: None,
        v: None,
    })
}

/// `sqrt(sum_i pi_i^2 exp(-2 (1 + v) k pi_i)) / k`.
pub fn c_pi(pi: &DiscreteDistribution, k: u64, v: f64) -> f64 {
    exp_mass(pi.probs(), k, 2.0 * (1.0 + v)).sqrt() / k as f64
}

/// The index `I_{v,pi}` (1-based rank): the smallest `j >= J` meeting the
/// three small-entry conditions, or `d` when none does.
pub fn i_v_pi(pi: &DiscreteDistribution, k: u64, v: f64) -> usize {
    let sorted = sorted_desc(pi);
    i_v_pi_sorted(&sorted, k, c_pi(pi, k, v))
}

pub(crate) fn i_v_pi_sorted(sorted: &[f64], k: u64, c: f64) -> usize {
    let d = sorted.len();
    let j0 = j_index_sorted(sorted, k);
    if j0 > d {
        return d;
    }
    let kf = k as f64;
    let tail = suffix_sums(sorted, |p| p);
    let exp_tail = suffix_sums(sorted, |p| (-2.0 * kf * p).exp() * p * p);
    (j0..=d)
        .find(|&j| {
            i_conditions(sorted, j0, j, c, &tail, &exp_tail)
                .iter()
                .all(|&ok| ok)
        })
        .unwrap_or(d)
}

/// The three conditions at rank `j`, given `J` and the suffix sums.
pub(crate) fn i_conditions(
    sorted: &[f64],
    j0: usize,
    j: usize,
    c: f64,
    tail: &[f64],
    exp_tail: &[f64],
) -> [bool; 3] {
    let p = sorted[j - 1];
    let between = tail[j0 - 1] - tail[j - 1];
    [
        p <= (c / j as f64).sqrt(),
        exp_tail[j - 1] <= c,
        tail[j - 1] <= between,
    ]
}

/// One index range of the regime table with the three columns' contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub label: String,
    /// First 1-based rank in the range.
    pub start: usize,
    /// One past the last rank.
    pub end: usize,
    pub ours: f64,
    pub identity: f64,
    pub dk16: f64,
}

impl RegimeRow {
    pub fn size(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeTable {
    pub j: usize,
    pub i_star: usize,
    pub m_star: usize,
    /// Whether `I*` or `m*` had to be moved to keep `J <= I* <= m*`.
    pub clamped: bool,
    pub rows: Vec<RegimeRow>,
}

impl RegimeTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "start", "end", "ours", "identity", "dk16"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.start.to_string(),
                r.end.to_string(),
                r.ours.to_string(),
                r.identity.to_string(),
                r.dk16.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

/// Splits the ranks at `J`, `I*` (from the upper rate) and `m*` (from the
/// identity rate) and evaluates each column of the comparison on each range.
pub fn regime_table(pi: &DiscreteDistribution, k: u64) -> Result<RegimeTable> {
    let upper = upper_rate(pi, k, DEFAULT_U)?;
    let identity = identity_rate(pi, k)?;
    let sorted = sorted_desc(pi);
    let d = sorted.len();
    let kf = k as f64;
    let j = j_index_sorted(&sorted, k);
    let raw_i = upper.minimizer.unwrap_or(j);
    let raw_m = identity.minimizer.unwrap_or(d + 1);
    let i_star = raw_i.clamp(j, d + 1);
    let m_star = raw_m.clamp(i_star, d + 1);
    let clamped = i_star != raw_i || m_star != raw_m;

    let e_quarter = exp_mass(&sorted, k, DEFAULT_U).powf(0.25);
    let slice = |a: usize, b: usize| &sorted[a - 1..b - 1];
    let head = |s: &[f64]| s.iter().map(|&p| p.powf(2.0 / 3.0)).sum::<f64>().powf(0.75) / kf.sqrt();
    let l1 = |s: &[f64]| s.iter().sum::<f64>();
    let dk =
        |s: &[f64]| (s.len() as f64 / kf).sqrt() * s.iter().map(|&p| p * p).sum::<f64>().powf(0.25);
    let middle = |s: &[f64]| (s.len() as f64 / kf).sqrt() * e_quarter.max(1.0 / kf.sqrt());

    let bounds = [(1, j), (j, i_star), (i_star, m_star), (m_star, d + 1)];
    let labels = ["head", "middle", "identity_gap", "tail"];
    let rows = bounds
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(r, (&(a, b), label))| {
            let s = slice(a, b);
            let (ours, identity, dk16) = match r {
                0 => (head(s), head(s), head(s)),
                1 => (middle(s), head(s), dk(s)),
                2 => (l1(s), head(s), dk(s)),
                _ => (l1(s), l1(s), dk(s)),
            };
            RegimeRow {
                label: label.to_string(),
                start: a,
                end: b,
                ours,
                identity,
                dk16,
            }
        })
        .collect();
    Ok(RegimeTable {
        j,
        i_star,
        m_star,
        clamped,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distmodel::make_distribution;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> DiscreteDistribution {
        make_distribution(v).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn point_mass_rates() {
        let pm = dist(&[1.0, 0.0]);
        let up = upper_rate(&pm, 100, DEFAULT_U).unwrap();
        assert!(close(up.term("head_23").unwrap(), 0.1, 1e-12));
        assert!(close(up.rho, (100f64.ln() / 100.0).sqrt(), 1e-12));
        assert!((up.rho - 0.2146).abs() < 1e-4);
        assert_eq!(up.minimizer, Some(2));
        assert_eq!(up.term("tail_l1"), Some(0.0));

        let lo = lower_rate(&pm, 100, DEFAULT_V).unwrap();
        assert!(close(lo.rho, 0.1, 1e-12));

        for k in [2, 7, 100, 5000] {
            let id = identity_rate(&pm, k).unwrap();
            assert!(close(id.rho, 1.0 / k as f64, 1e-12));
        }
    }

    #[test]
    fn rejects_tiny_k() {
        let u = dist(&[1.0; 4]);
        assert_eq!(
            upper_rate(&u, 1, DEFAULT_U),
            Err(Error::KTooSmall { k: 1, min: 2 })
        );
        assert!(lower_rate(&u, 1, DEFAULT_V).is_err());
        assert!(identity_rate(&u, 0).is_err());
        assert!(dk16_rate(&u, 1).is_err());
    }

    #[test]
    fn no_small_entries_drops_middle() {
        let u = dist(&[1.0; 2]);
        let up = upper_rate(&u, 3, DEFAULT_U).unwrap();
        assert_eq!(up.minimizer, Some(3));
        assert!(up.term("mid_exp").is_none());
        assert_eq!(i_v_pi(&u, 3, DEFAULT_V), 2);
    }

    #[test]
    fn dk16_examples() {
        for d in [4usize, 16, 64] {
            let u = dist(&vec![1.0; d]);
            let r = dk16_rate(&u, 64).unwrap();
            assert!(close(r.rho, (d as f64).powf(0.25) / 8.0, 1e-12));
            assert_eq!(r.term("small_entries"), Some(0.0));
        }
    }

    #[test]
    fn c_pi_closed_forms() {
        let v = 0.001;
        let pm = dist(&[1.0, 0.0, 0.0]);
        let k = 20u64;
        let expected = (-(1.0 + v) * k as f64).exp() / k as f64;
        assert!(close(c_pi(&pm, k, v), expected, 1e-12));
        for d in [5usize, 50] {
            let u = dist(&vec![1.0; d]);
            let kf = k as f64;
            let expected = (-(1.0 + v) * kf / d as f64).exp() / (kf * (d as f64).sqrt());
            assert!(close(c_pi(&u, k, v), expected, 1e-12));
        }
    }

    #[test]
    fn i_v_pi_brute_force_uniform() {
        let u = dist(&[1.0; 100]);
        let k = 10;
        let c = c_pi(&u, k, DEFAULT_V);
        let p = 0.01f64;
        let expected = (1..=100)
            .find(|&j| {
                let rest = (100 - j + 1) as f64;
                p <= (c / j as f64).sqrt()
                    && rest * (-2.0 * k as f64 * p).exp() * p * p <= c
                    && rest * p <= (j - 1) as f64 * p
            })
            .unwrap_or(100);
        assert_eq!(i_v_pi(&u, k, DEFAULT_V), expected);
    }

    #[test]
    fn regime_table_shape() {
        let pi = dist(&[0.5, 0.2, 0.1, 0.05, 0.05, 0.04, 0.03, 0.02, 0.01]);
        let t = regime_table(&pi, 30).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.rows[0].start, 1);
        assert_eq!(t.rows[3].end, pi.d() + 1);
        for w in t.rows.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        let r0 = &t.rows[0];
        assert_eq!(r0.ours, r0.identity);
        assert_eq!(r0.ours, r0.dk16);
        assert!(t.j <= t.i_star && t.i_star <= t.m_star);
        assert!(t.to_csv().lines().count() == 5);
    }

    #[test]
    fn csv_has_every_term() {
        let r = upper_rate(&dist(&[0.5, 0.3, 0.1, 0.05, 0.05]), 40, DEFAULT_U).unwrap();
        let csv = r.to_csv();
        for name in r.terms.keys() {
            assert!(csv.contains(name.as_str()));
        }
    }

    fn weights() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop_oneof![Just(0.0), 1e-5f64..1e-2, 1e-2f64..1.0], 1..60)
            .prop_filter("positive mass", |v| v.iter().sum::<f64>() > 0.0)
    }

    proptest! {
        #[test]
        fn floors_hold(raw in weights(), k in 2u64..5000) {
            let pi = dist(&raw);
            let kf = k as f64;
            prop_assert!(upper_rate(&pi, k, DEFAULT_U).unwrap().rho >= (kf.ln() / kf).sqrt());
            prop_assert!(lower_rate(&pi, k, DEFAULT_V).unwrap().rho >= (1.0 / kf).sqrt());
            prop_assert!(identity_rate(&pi, k).unwrap().rho >= 1.0 / kf);
            prop_assert!(c_pi(&pi, k, DEFAULT_V) <= 1.0 / kf);
        }

        #[test]
        fn minimizer_attains_minimum(raw in weights(), k in 2u64..5000) {
            let pi = dist(&raw);
            let mut sorted = raw.clone();
            let total: f64 = sorted.iter().sum();
            sorted.iter_mut().for_each(|p| *p /= total);
            sorted.sort_by(|a, b| b.total_cmp(a));
            let kf = k as f64;
            let d = sorted.len();
            let j = sorted.iter().position(|&p| p <= 1.0 / kf).map_or(d + 1, |r| r + 1);
            let e: f64 = sorted.iter().map(|&p| p * p * (-0.5 * kf * p).exp()).sum();
            let r = upper_rate(&pi, k, DEFAULT_U).unwrap();
            let m = r.minimizer.unwrap();
            prop_assert!(m >= j);
            if j <= d {
                let obj = |i: usize| {
                    let tail: f64 = sorted[i - 1..].iter().sum();
                    ((i as f64).sqrt() * kf.ln() / kf)
                        .max((i as f64 / kf).sqrt() * e.powf(0.25))
                        .max(tail)
                };
                let best = (j..=d).map(obj).fold(f64::INFINITY, f64::min);
                prop_assert!((obj(m) - best).abs() <= 1e-9 * (1.0 + best));
                prop_assert!((j..m).all(|i| obj(i) > obj(m) - 1e-12));
            }
            let id = identity_rate(&pi, k).unwrap();
            let obj_m = |m: usize| {
                let head: f64 = sorted.iter().take(m.saturating_sub(1)).skip(1).map(|&p| p.powf(2.0 / 3.0)).sum();
                let tail: f64 = sorted[m - 1..].iter().sum();
                (head.powf(0.75) / kf.sqrt()).max(1.0 / kf).max(tail)
            };
            let best = (1..=d + 1).map(obj_m).fold(f64::INFINITY, f64::min);
            prop_assert!((id.rho - best).abs() <= 1e-9 * (1.0 + best));
        }

        #[test]
        fn rates_are_permutation_invariant(raw in weights(), k in 2u64..2000, seed in any::<u64>()) {
            let pi = dist(&raw);
            let mut perm: Vec<usize> = (0..pi.d()).collect();
            let mut s = seed;
            for i in (1..perm.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let q = pi.permuted(&perm).unwrap();
            let a = upper_rate(&pi, k, DEFAULT_U).unwrap();
            let b = upper_rate(&q, k, DEFAULT_U).unwrap();
            prop_assert!((a.rho - b.rho).abs() <= 1e-12 * (1.0 + a.rho));
            let a = lower_rate(&pi, k, DEFAULT_V).unwrap();
            let b = lower_rate(&q, k, DEFAULT_V).unwrap();
            prop_assert!((a.rho - b.rho).abs() <= 1e-12 * (1.0 + a.rho));
        }

        #[test]
        fn i_v_pi_in_range(raw in weights(), k in 2u64..2000) {
            let pi = dist(&raw);
            let i = i_v_pi(&pi, k, DEFAULT_V);
            let j = crate::distmodel::j_index(&pi, k);
            prop_assert!(i <= pi.d());
            prop_assert!(j > pi.d() || i >= j);
        }

        #[test]
        fn regime_ranges_partition(raw in weights(), k in 2u64..2000) {
            let pi = dist(&raw);
            let t = regime_table(&pi, k).unwrap();
            prop_assert_eq!(t.rows.iter().map(RegimeRow::size).sum::<usize>(), pi.d());
            prop_assert!(t.j <= t.i_star && t.i_star <= t.m_star && t.m_star <= pi.d() + 1);
        }
    }
}
