//! Multinomial sampling, the three-way sample split, and Poissonization.
//!
//! Each sample of size `k` is cut into three blocks of `k_bar = floor(k/3)`
//! observations. Every block gets an independent Poisson(`2 k_bar / 3`)
//! budget and only the first `min(budget, k_bar)` observations of the block
//! are counted. On the event that no budget exceeds `k_bar`, the resulting
//! per-category counts are independent Poisson(`2 k_bar p_i / 3`) variables.
//!
//! [`sample_poissonized_direct`] draws that Poisson model directly and is
//! the path used for calibration.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Binomial;
use serde::{Deserialize, Serialize};

use crate::distmodel::DiscreteDistribution;
use crate::error::{Error, Result};

/// A reproducible random stream: a seed plus a substream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// A child stream, independent of the parent and of its siblings.
    pub fn substream(&self, index: u64) -> Self {
        Self {
            seed: splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x5851_f42d))),
            stream_id: index,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `ln(n!)`.
pub fn ln_factorial(n: u64) -> f64 {
    const TABLE: [f64; 10] = [
        0.0,
        0.0,
        std::f64::consts::LN_2,
        1.791_759_469_228_055,
        3.178_053_830_347_945_7,
        4.787_491_742_782_046,
        6.579_251_212_010_101,
        8.525_161_361_065_415,
        10.604_602_902_745_25,
        12.801_827_480_081_469,
    ];
    if n < 10 {
        return TABLE[n as usize];
    }
    let x = n as f64;
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    (x + 0.5) * x.ln() - x
        + 0.5 * (2.0 * std::f64::consts::PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 / 1260.0))
}

/// Draws an exact Poisson(`lambda`) variate.
///
/// Sequential inversion below mean 10, Hörmann's transformed rejection
/// with squeeze (PTRS) above.
pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    debug_assert!(lambda >= 0.0 && lambda.is_finite());
    if lambda <= 0.0 {
        0
    } else if lambda < 10.0 {
        poisson_inversion(lambda, rng)
    } else {
        poisson_ptrs(lambda, rng)
    }
}

fn poisson_inversion<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    let u: f64 = rng.random();
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut n = 0u64;
    while u > cdf {
        n += 1;
        p *= lambda / n as f64;
        cdf += p;
        if p < 1e-300 && n as f64 > lambda {
            break;
        }
    }
    n
}

fn poisson_ptrs<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.024_83 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let kf = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return kf as u64;
        }
        if kf < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let k = kf as u64;
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        if lhs <= -lambda + kf * loglam - ln_factorial(k) {
            return k;
        }
    }
}

/// Multinomial(`n`, `dist`) counts via conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(
    dist: &DiscreteDistribution,
    n: u64,
    rng: &mut R,
) -> Vec<u64> {
    let mut counts = vec![0u64; dist.d()];
    let mut remaining = n;
    let mut mass_left = 1.0f64;
    for (i, &p) in dist.probs().iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == dist.d() || p >= mass_left {
            counts[i] = remaining;
            break;
        }
        let ratio = (p / mass_left).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, ratio)
            .expect("ratio lies in [0, 1]")
            .sample(rng);
        counts[i] = draw;
        remaining -= draw;
        mass_left -= p;
    }
    counts
}

/// `n` i.i.d. category labels drawn from `dist`.
pub fn sample_observations<R: Rng + ?Sized>(
    dist: &DiscreteDistribution,
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let index = WeightedIndex::new(dist.probs()).expect("validated distribution");
    (0..n).map(|_| index.sample(rng)).collect()
}

/// Poisson budgets for the three blocks of each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub x: [u64; 3],
    pub y: [u64; 3],
}

/// The six count vectors consumed by the tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub x: [Vec<u64>; 3],
    pub y: [Vec<u64>; 3],
    pub k_bar: u64,
    pub budgets: Budgets,
    /// Whether any budget exceeded `k_bar` (the Poisson model is then only
    /// approximately right).
    pub truncated: bool,
}

impl SplitCounts {
    pub fn d(&self) -> usize {
        self.x[0].len()
    }

    /// Builds counts directly, checking shapes. Budgets are set to the
    /// observed block totals.
    pub fn from_vectors(x: [Vec<u64>; 3], y: [Vec<u64>; 3], k_bar: u64) -> Result<Self> {
        let d = x[0].len();
        for v in x.iter().chain(y.iter()) {
            if v.len() != d {
                return Err(Error::DimensionMismatch {
                    left: v.len(),
                    right: d,
                });
            }
        }
        let total = |v: &Vec<u64>| v.iter().sum::<u64>();
        let budgets = Budgets {
            x: [total(&x[0]), total(&x[1]), total(&x[2])],
            y: [total(&y[0]), total(&y[1]), total(&y[2])],
        };
        Ok(Self {
            x,
            y,
            k_bar,
            budgets,
            truncated: false,
        })
    }

    /// Relabels categories: new category `i` carries old category `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let apply = |v: &Vec<u64>| perm.iter().map(|&j| v[j]).collect::<Vec<_>>();
        Self {
            x: [apply(&self.x[0]), apply(&self.x[1]), apply(&self.x[2])],
            y: [apply(&self.y[0]), apply(&self.y[1]), apply(&self.y[2])],
            k_bar: self.k_bar,
            budgets: self.budgets,
            truncated: self.truncated,
        }
    }
}

fn k_bar_of(k: u64) -> Result<u64> {
    if k < 3 {
        return Err(Error::KTooSmall { k, min: 3 });
    }
    Ok(k / 3)
}

/// Splits two raw samples into three blocks each and Poissonizes them.
///
/// Each sample is shuffled, its first `3 * k_bar` observations are cut into
/// three consecutive blocks, and each block contributes the prefix allowed by
/// its Poisson budget.
pub fn split_and_poissonize(
    x_sample: &[usize],
    y_sample: &[usize],
    d: usize,
    k: u64,
    stream: RngStream,
) -> Result<SplitCounts> {
    let k_bar = k_bar_of(k)?;
    let block = k_bar as usize;
    for sample in [x_sample, y_sample] {
        if sample.len() < 3 * block {
            return Err(Error::SampleTooShort {
                needed: 3 * block,
                got: sample.len(),
            });
        }
        if let Some(&value) = sample.iter().find(|&&v| v >= d) {
            return Err(Error::CategoryOutOfRange { value, d });
        }
    }
    let mut rng = stream.rng();
    let rate = 2.0 * k_bar as f64 / 3.0;
    let mut budgets = Budgets {
        x: [0; 3],
        y: [0; 3],
    };
    for j in 0..3 {
        budgets.x[j] = sample_poisson(rate, &mut rng);
    }
    for j in 0..3 {
        budgets.y[j] = sample_poisson(rate, &mut rng);
    }
    let truncated = budgets.x.iter().chain(&budgets.y).any(|&b| b > k_bar);

    let mut count_blocks = |sample: &[usize], budget: &[u64; 3]| -> [Vec<u64>; 3] {
        let mut shuffled = sample.to_vec();
        shuffled.shuffle(&mut rng);
        std::array::from_fn(|j| {
            let start = j * block;
            let take = budget[j].min(k_bar) as usize;
            let mut counts = vec![0u64; d];
            for &obs in &shuffled[start..start + take] {
                counts[obs] += 1;
            }
            counts
        })
    };
    let x = count_blocks(x_sample, &budgets.x);
    let y = count_blocks(y_sample, &budgets.y);
    Ok(SplitCounts {
        x,
        y,
        k_bar,
        budgets,
        truncated,
    })
}

/// Draws `k` observations from each of `p` and `q`, then splits and
/// Poissonizes them.
pub fn sample_split_counts(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    k: u64,
    stream: RngStream,
) -> Result<SplitCounts> {
    check_dims(p, q)?;
    k_bar_of(k)?;
    let mut rng = stream.substream(0).rng();
    let xs = sample_observations(p, k as usize, &mut rng);
    let ys = sample_observations(q, k as usize, &mut rng);
    split_and_poissonize(&xs, &ys, p.d(), k, stream.substream(1))
}

/// Draws all six count vectors as independent Poisson counts with means
/// `2 k_bar p_i / 3` and `2 k_bar q_i / 3`.
pub fn sample_poissonized_direct(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    k: u64,
    stream: RngStream,
) -> Result<SplitCounts> {
    check_dims(p, q)?;
    let k_bar = k_bar_of(k)?;
    let mut rng = stream.rng();
    let rate = 2.0 * k_bar as f64 / 3.0;
    let mut draw = |dist: &DiscreteDistribution| -> Vec<u64> {
        dist.probs()
            .iter()
            .map(|&pi| sample_poisson(rate * pi, &mut rng))
            .collect()
    };
    let x = [draw(p), draw(p), draw(p)];
    let y = [draw(q), draw(q), draw(q)];
    let total = |v: &Vec<u64>| v.iter().sum::<u64>();
    let budgets = Budgets {
        x: [total(&x[0]), total(&x[1]), total(&x[2])],
        y: [total(&y[0]), total(&y[1]), total(&y[2])],
    };
    Ok(SplitCounts {
        x,
        y,
        k_bar,
        budgets,
        truncated: false,
    })
}

fn check_dims(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<()> {
    if p.d() != q.d() {
        return Err(Error::DimensionMismatch {
            left: p.d(),
            right: q.d(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distmodel::make_distribution;

    fn dist(v: &[f64]) -> DiscreteDistribution {
        make_distribution(v).unwrap()
    }

    #[test]
    fn ln_factorial_matches_direct_sum() {
        let mut acc = 0.0f64;
        for n in 1..200u64 {
            acc += (n as f64).ln();
            let err = (ln_factorial(n) - acc).abs();
            assert!(err < 1e-10 * acc.max(1.0), "n={n} err={err}");
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| RngStream::new(7).rng().random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let s = RngStream::new(7);
        let x: u64 = s.substream(1).rng().random();
        let y: u64 = s.substream(2).rng().random();
        let z: u64 = s.rng().random();
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn multinomial_edge_cases() {
        let mut rng = RngStream::new(1).rng();
        assert_eq!(
            sample_multinomial(&dist(&[0.3, 0.7]), 0, &mut rng),
            vec![0, 0]
        );
        assert_eq!(
            sample_multinomial(&dist(&[1.0, 0.0]), 7, &mut rng),
            vec![7, 0]
        );
        assert_eq!(
            sample_multinomial(&dist(&[0.0, 1.0]), 7, &mut rng),
            vec![0, 7]
        );
        for n in [1, 10, 1000] {
            let c = sample_multinomial(&dist(&[0.2, 0.5, 0.3]), n, &mut rng);
            assert_eq!(c.iter().sum::<u64>(), n);
        }
    }

    #[test]
    fn multinomial_bin_within_five_sigma() {
        let n = 100_000u64;
        let tol = 5.0 * (n as f64 * 0.25).sqrt();
        let uniform = dist(&[0.5, 0.5]);
        for s in 0..200 {
            let mut rng = RngStream::with_stream(11, s).rng();
            let c = sample_multinomial(&uniform, n, &mut rng);
            assert!((c[0] as f64 - 50_000.0).abs() <= tol);
        }
    }

    #[test]
    fn split_rejects_small_k() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(
            sample_split_counts(&p, &p, 2, RngStream::new(0)),
            Err(Error::KTooSmall { k: 2, min: 3 })
        );
        assert_eq!(
            sample_poissonized_direct(&p, &p, 2, RngStream::new(0)),
            Err(Error::KTooSmall { k: 2, min: 3 })
        );
        assert_eq!(
            split_and_poissonize(&[0, 1], &[0, 1, 1], 2, 3, RngStream::new(0)),
            Err(Error::SampleTooShort { needed: 3, got: 2 })
        );
        assert_eq!(
            split_and_poissonize(&[0, 1, 5], &[0, 1, 1], 2, 3, RngStream::new(0)),
            Err(Error::CategoryOutOfRange { value: 5, d: 2 })
        );
    }

    #[test]
    fn split_totals_follow_budgets() {
        let p = dist(&[0.2, 0.3, 0.5]);
        for s in 0..200 {
            let c = sample_split_counts(&p, &p, 9, RngStream::with_stream(3, s)).unwrap();
            assert_eq!(c.k_bar, 3);
            for j in 0..3 {
                assert_eq!(c.x[j].iter().sum::<u64>(), c.budgets.x[j].min(3));
                assert_eq!(c.y[j].iter().sum::<u64>(), c.budgets.y[j].min(3));
            }
            let used: u64 = c.x.iter().flatten().sum();
            assert!(used <= 9);
            let over = c.budgets.x.iter().chain(&c.budgets.y).any(|&b| b > 3);
            assert_eq!(c.truncated, over);
        }
    }

    #[test]
    fn direct_point_mass() {
        let p = dist(&[0.0, 1.0, 0.0]);
        let c = sample_poissonized_direct(&p, &p, 3, RngStream::new(5)).unwrap();
        for v in c.x.iter().chain(c.y.iter()) {
            assert_eq!(v[0], 0);
            assert_eq!(v[2], 0);
        }
        assert!(!c.truncated);
    }

    #[test]
    fn direct_sampling_is_deterministic() {
        let p = dist(&[0.1, 0.2, 0.7]);
        let q = dist(&[0.3, 0.3, 0.4]);
        let a = sample_poissonized_direct(&p, &q, 300, RngStream::with_stream(9, 4)).unwrap();
        let b = sample_poissonized_direct(&p, &q, 300, RngStream::with_stream(9, 4)).unwrap();
        assert_eq!(a, b);
        let a = sample_split_counts(&p, &q, 300, RngStream::with_stream(9, 4)).unwrap();
        let b = sample_split_counts(&p, &q, 300, RngStream::with_stream(9, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn direct_mean_matches_poisson_rate() {
        // k = 30 -> k_bar = 10, mean 2 * 10 * 0.5 / 3.
        let p = dist(&[0.5, 0.5]);
        let n = 100_000u64;
        let total: u64 = (0..n)
            .map(|s| {
                sample_poissonized_direct(&p, &p, 30, RngStream::with_stream(21, s))
                    .unwrap()
                    .x[0][0]
            })
            .sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 10.0 / 3.0).abs() < 0.03, "mean {mean}");
    }

    #[test]
    fn split_counts_json_shape() {
        let c = SplitCounts::from_vectors(
            [vec![1, 0], vec![0, 2], vec![1, 1]],
            [vec![0, 0], vec![1, 1], vec![2, 0]],
            3,
        )
        .unwrap();
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json["k_bar"], 3);
        assert_eq!(json["x"][1], serde_json::json!([0, 2]));
        assert_eq!(json["budgets"]["y"], serde_json::json!([0, 2, 2]));
        assert_eq!(json["truncated"], false);
        let back: SplitCounts = serde_json::from_value(json).unwrap();
        assert_eq!(back, c);
    }
}
