//! The four sub-tests, their empirical thresholds, the combined test and
//! Monte Carlo calibration of the multipliers.
//!
//! All bare logarithms are natural logarithms, and the block size `k_bar`
//! plays the role of the sample size inside every statistic and threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distmodel::DiscreteDistribution;
use crate::error::{Error, Result};
use crate::sampling::{sample_poissonized_direct, RngStream, SplitCounts};

/// Multipliers of the four sub-tests and the level they were calibrated for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestConstants {
    pub c_inf: f64,
    pub c_23: f64,
    pub c_2: f64,
    pub c_1: f64,
    pub gamma: f64,
}

impl TestConstants {
    pub fn new(c_inf: f64, c_23: f64, c_2: f64, c_1: f64, gamma: f64) -> Result<Self> {
        let constants = Self {
            c_inf,
            c_23,
            c_2,
            c_1,
            gamma,
        };
        constants.validate()?;
        Ok(constants)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, c) in [
            ("c_inf", self.c_inf),
            ("c_23", self.c_23),
            ("c_2", self.c_2),
            ("c_1", self.c_1),
        ] {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::BadParameter(format!("{name} must be > 0, got {c}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::BadParameter(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// `(v ∨ 1) / k_bar`, element-wise.
pub fn floored_estimate(counts: &[u64], k_bar: u64) -> Vec<f64> {
    let kb = k_bar as f64;
    counts.iter().map(|&c| c.max(1) as f64 / kb).collect()
}

/// Per-coordinate scale of the coordinate-wise pre-test:
/// `sqrt(q_i log(min(1/q_i, k)) / k) + log(k) / k`.
///
/// The inner log is floored at 0, which only matters when a block count
/// exceeds `k_bar` under the direct Poisson model.
fn pretest_scales(q_hat: &[f64], k_bar: u64) -> impl Iterator<Item = f64> + '_ {
    let kb = k_bar as f64;
    let log_k = kb.ln();
    q_hat.iter().map(move |&q| {
        let inner = (1.0 / q).min(kb).max(1.0).ln();
        (q * inner / kb).sqrt() + log_k / kb
    })
}

/// Coordinate-wise pre-test. Returns the verdict and the first violating
/// coordinate. Meaningful for `k_bar >= 2`.
pub fn pretest_linf(counts: &SplitCounts, c: f64) -> (bool, Option<usize>) {
    let p_hat = floored_estimate(&counts.x[2], counts.k_bar);
    let q_hat = floored_estimate(&counts.y[2], counts.k_bar);
    let witness = pretest_scales(&q_hat, counts.k_bar)
        .enumerate()
        .find(|&(i, scale)| (p_hat[i] - q_hat[i]).abs() >= c * scale)
        .map(|(i, _)| i);
    (witness.is_some(), witness)
}

/// `sum_i q_hat_i^{-2/3} (X1_i - Y1_i)(X2_i - Y2_i)`.
pub fn stat_t23(counts: &SplitCounts) -> f64 {
    let q_hat = floored_estimate(&counts.y[2], counts.k_bar);
    (0..counts.d())
        .map(|i| q_hat[i].powf(-2.0 / 3.0) * cross_term(counts, i))
        .sum()
}

/// `sqrt(k^{-2/3} ||(Y1)^{2/3}||_1) + 1`.
pub fn thresh_t23(counts: &SplitCounts) -> f64 {
    let kb = counts.k_bar as f64;
    let mass: f64 = counts.y[0]
        .iter()
        .map(|&y| (y as f64).powf(2.0 / 3.0))
        .sum();
    (kb.powf(-2.0 / 3.0) * mass).sqrt() + 1.0
}

pub fn test_23(counts: &SplitCounts, c: f64) -> bool {
    stat_t23(counts) >= c * thresh_t23(counts)
}

/// The unweighted cross statistic restricted to coordinates with `Y3_i = 0`.
pub fn stat_t2(counts: &SplitCounts) -> f64 {
    (0..counts.d())
        .filter(|&i| counts.y[2][i] == 0)
        .map(|i| cross_term(counts, i))
        .sum()
}

/// `sqrt(||Y1 Y2 1{Y3 = 0}||_1) + log(k)^2`.
pub fn thresh_t2(counts: &SplitCounts) -> f64 {
    let mass: f64 = (0..counts.d())
        .filter(|&i| counts.y[2][i] == 0)
        .map(|i| counts.y[0][i] as f64 * counts.y[1][i] as f64)
        .sum();
    let log_k = (counts.k_bar as f64).ln();
    mass.sqrt() + log_k * log_k
}

pub fn test_2(counts: &SplitCounts, c: f64) -> bool {
    stat_t2(counts) >= c * thresh_t2(counts)
}

/// Signed count difference over coordinates with `Y3_i = 0`.
pub fn stat_t1(counts: &SplitCounts) -> f64 {
    (0..counts.d())
        .filter(|&i| counts.y[2][i] == 0)
        .map(|i| counts.x[0][i] as f64 - counts.y[0][i] as f64)
        .sum()
}

pub fn thresh_t1(counts: &SplitCounts) -> f64 {
    (counts.k_bar as f64).sqrt()
}

pub fn test_1(counts: &SplitCounts, c: f64) -> bool {
    stat_t1(counts) >= c * thresh_t1(counts)
}

fn cross_term(counts: &SplitCounts, i: usize) -> f64 {
    let a = counts.x[0][i] as f64 - counts.y[0][i] as f64;
    let b = counts.x[1][i] as f64 - counts.y[1][i] as f64;
    a * b
}

/// Per-sub-test verdicts, in the order pre-test, 2/3-test, L2-test, L1-test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdicts {
    pub linf: bool,
    pub t23: bool,
    pub t2: bool,
    pub t1: bool,
}

impl Verdicts {
    pub fn any(&self) -> bool {
        self.linf || self.t23 || self.t2 || self.t1
    }
}

/// Everything the combined test computed on one set of counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub t23: f64,
    pub t2: f64,
    pub t1: f64,
    pub thr23: f64,
    pub thr2: f64,
    pub thr1: f64,
    pub linf_witness: Option<usize>,
    pub verdicts: Verdicts,
    pub combined: bool,
    pub k_bar: u64,
    pub constants: TestConstants,
}

/// Runs all four sub-tests and rejects if any of them rejects.
///
/// The three count-based sub-tests are evaluated even when the pre-test
/// already rejected.
pub fn combined_test(counts: &SplitCounts, constants: &TestConstants) -> TestReport {
    let (linf, linf_witness) = pretest_linf(counts, constants.c_inf);
    let (t23, thr23) = (stat_t23(counts), thresh_t23(counts));
    let (t2, thr2) = (stat_t2(counts), thresh_t2(counts));
    let (t1, thr1) = (stat_t1(counts), thresh_t1(counts));
    let verdicts = Verdicts {
        linf,
        t23: t23 >= constants.c_23 * thr23,
        t2: t2 >= constants.c_2 * thr2,
        t1: t1 >= constants.c_1 * thr1,
    };
    TestReport {
        t23,
        t2,
        t1,
        thr23,
        thr2,
        thr1,
        linf_witness,
        verdicts,
        combined: verdicts.any(),
        k_bar: counts.k_bar,
        constants: *constants,
    }
}

/// For each sub-test, the largest multiplier at which it still rejects on
/// these counts: the sub-test rejects at `c` iff `c <= critical`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalMultipliers {
    pub linf: f64,
    pub t23: f64,
    pub t2: f64,
    pub t1: f64,
}

impl CriticalMultipliers {
    pub fn of(counts: &SplitCounts) -> Self {
        let p_hat = floored_estimate(&counts.x[2], counts.k_bar);
        let q_hat = floored_estimate(&counts.y[2], counts.k_bar);
        let linf = pretest_scales(&q_hat, counts.k_bar)
            .enumerate()
            .map(|(i, scale)| (p_hat[i] - q_hat[i]).abs() / scale)
            .fold(0.0, f64::max);
        Self {
            linf,
            t23: stat_t23(counts) / thresh_t23(counts),
            t2: stat_t2(counts) / thresh_t2(counts),
            t1: stat_t1(counts) / thresh_t1(counts),
        }
    }

    pub fn get(&self, which: SubTest) -> f64 {
        match which {
            SubTest::Linf => self.linf,
            SubTest::T23 => self.t23,
            SubTest::T2 => self.t2,
            SubTest::T1 => self.t1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubTest {
    Linf,
    T23,
    T2,
    T1,
}

impl SubTest {
    pub const ALL: [SubTest; 4] = [SubTest::Linf, SubTest::T23, SubTest::T2, SubTest::T1];
}

/// Fraction of trials whose critical multiplier is at least `c`.
pub fn rejection_frequency(criticals: &[CriticalMultipliers], which: SubTest, c: f64) -> f64 {
    if criticals.is_empty() {
        return 0.0;
    }
    let hits = criticals.iter().filter(|m| m.get(which) >= c).count();
    hits as f64 / criticals.len() as f64
}

pub const MIN_CALIBRATION_TRIALS: usize = 100;
const MULTIPLIER_FLOOR: f64 = 1e-6;
const MULTIPLIER_CAP: f64 = 1e6;
const BISECTION_STEPS: usize = 100;

/// Null-trial critical multipliers, one vector per suite member.
pub fn null_criticals(
    null_suite: &[DiscreteDistribution],
    k: u64,
    n_mc: usize,
    stream: RngStream,
) -> Result<Vec<Vec<CriticalMultipliers>>> {
    null_suite
        .iter()
        .enumerate()
        .map(|(s, pi)| {
            let member = stream.substream(s as u64);
            (0..n_mc)
                .into_par_iter()
                .map(|t| {
                    let counts = sample_poissonized_direct(pi, pi, k, member.substream(t as u64))?;
                    Ok(CriticalMultipliers::of(&counts))
                })
                .collect()
        })
        .collect()
}

/// Smallest multiplier whose worst-case null rejection frequency over the
/// suite is at most `target`, found by geometric bisection.
pub fn calibrate_multiplier(
    per_member: &[Vec<CriticalMultipliers>],
    which: SubTest,
    target: f64,
) -> Result<f64> {
    let worst = |c: f64| {
        per_member
            .iter()
            .map(|trials| rejection_frequency(trials, which, c))
            .fold(0.0, f64::max)
    };
    if worst(MULTIPLIER_CAP) > target {
        return Err(Error::Unreachable {
            target,
            multiplier: MULTIPLIER_CAP,
        });
    }
    if worst(MULTIPLIER_FLOOR) <= target {
        return Ok(MULTIPLIER_FLOOR);
    }
    let (mut lo, mut hi) = (MULTIPLIER_FLOOR, MULTIPLIER_CAP);
    for _ in 0..BISECTION_STEPS {
        let mid = (lo * hi).sqrt();
        if worst(mid) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Calibrates the four multipliers so that each sub-test rejects at most
/// `gamma / 4` of the null trials on every suite member.
pub fn calibrate_constants(
    null_suite: &[DiscreteDistribution],
    k: u64,
    gamma: f64,
    n_mc: usize,
    stream: RngStream,
) -> Result<TestConstants> {
    if n_mc < MIN_CALIBRATION_TRIALS {
        return Err(Error::BudgetTooSmall {
            n: n_mc,
            min: MIN_CALIBRATION_TRIALS,
        });
    }
    if null_suite.is_empty() {
        return Err(Error::BadParameter("null suite is empty".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::BadParameter(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    let per_member = null_criticals(null_suite, k, n_mc, stream)?;
    let target = gamma / 4.0;
    let c = |which| calibrate_multiplier(&per_member, which, target);
    TestConstants::new(
        c(SubTest::Linf)?,
        c(SubTest::T23)?,
        c(SubTest::T2)?,
        c(SubTest::T1)?,
        gamma,
    )
}
