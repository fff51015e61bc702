//! Distribution families, Monte Carlo risk estimation, separation search and
//! side-by-side rate reports.

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{sample_alt_scaled, sample_null, AdversarialPrior};
use crate::distmodel::DiscreteDistribution;
use crate::error::{Error, Result};
use crate::rates::{
    dk16_rate, identity_rate, lower_rate, regime_table, upper_rate, RateBreakdown, RegimeTable,
    DEFAULT_U, DEFAULT_V,
};
use crate::sampling::{sample_split_counts, RngStream};
use crate::testers::{combined_test, TestConstants};

/// Largest support the desk-scale families will allocate.
pub const DESK_CAP: u64 = 10_000_000;
pub const MIN_TRIALS: usize = 100;
pub const BISECTION_STEPS: usize = 12;

pub fn family_uniform(d: usize) -> Result<DiscreteDistribution> {
    DiscreteDistribution::new(vec![1.0; d])
}

/// `pi_i` proportional to `i^{-s}` for `i = 1..d`.
pub fn family_zipf(d: usize, s: f64) -> Result<DiscreteDistribution> {
    if s.is_nan() || s < 0.0 {
        return Err(Error::BadParameter(format!(
            "Zipf exponent must be >= 0, got {s}"
        )));
    }
    DiscreteDistribution::new((1..=d).map(|i| (i as f64).powf(-s)).collect())
}

/// Two heavy coordinates `1/2` and `1/2 - h` followed by `k^4` coordinates
/// of mass `h / k^4`.
pub fn family_two_spike(k: u64, h: f64) -> Result<DiscreteDistribution> {
    if k < 2 {
        return Err(Error::KTooSmall { k, min: 2 });
    }
    if !(h > 0.0 && h < 0.5) {
        return Err(Error::BadParameter(format!(
            "h must lie in (0, 1/2), got {h}"
        )));
    }
    let d = k
        .checked_pow(4)
        .and_then(|k4| k4.checked_add(2))
        .filter(|&d| d <= DESK_CAP)
        .ok_or(Error::KTooLargeForDesk {
            d: k.saturating_pow(4).saturating_add(2),
            cap: DESK_CAP,
        })?;
    let small = h / (k as f64).powi(4);
    let mut v = vec![small; d as usize];
    v[0] = 0.5;
    v[1] = 0.5 - h;
    DiscreteDistribution::new(v)
}

/// First `ceil(d/2)` coordinates weight 1, the rest weight 1/10.
pub fn family_two_level(d: usize) -> Result<DiscreteDistribution> {
    let heavy = d.div_ceil(2);
    DiscreteDistribution::new((0..d).map(|i| if i < heavy { 1.0 } else { 0.1 }).collect())
}

/// A symmetric Dirichlet(`alpha`) draw of dimension `d`.
pub fn family_dirichlet(d: usize, alpha: f64, stream: &RngStream) -> Result<DiscreteDistribution> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::BadParameter(format!("Dirichlet alpha {alpha}: {e}")))?;
    let mut rng = stream.rng();
    DiscreteDistribution::new((0..d).map(|_| gamma.sample(&mut rng)).collect())
}

/// Default null suite for calibration at support size `d`.
pub fn default_suite(d: usize) -> Result<Vec<DiscreteDistribution>> {
    Ok(vec![
        family_uniform(d)?,
        family_zipf(d, 1.0)?,
        family_two_level(d)?,
    ])
}

/// Parses presets such as `uniform:64`, `zipf:64:1.0`, `two-spike:10:0.3`,
/// `two-level:50` and `dirichlet:100:1.0:SEED`.
pub fn preset(spec: &str) -> Result<DiscreteDistribution> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Parse(format!("unrecognized preset '{spec}'"));
    let int = |s: &str| s.parse::<u64>().map_err(|_| bad());
    let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
    match parts.as_slice() {
        ["uniform", d] => family_uniform(int(d)? as usize),
        ["zipf", d] => family_zipf(int(d)? as usize, 1.0),
        ["zipf", d, s] => family_zipf(int(d)? as usize, real(s)?),
        ["two-spike", k, h] => family_two_spike(int(k)?, real(h)?),
        ["two-level", d] => family_two_level(int(d)? as usize),
        ["dirichlet", d, alpha] => {
            family_dirichlet(int(d)? as usize, real(alpha)?, &RngStream::new(0))
        }
        ["dirichlet", d, alpha, seed] => {
            family_dirichlet(int(d)? as usize, real(alpha)?, &RngStream::new(int(seed)?))
        }
        _ => Err(bad()),
    }
}

/// A source of `(p, q)` pairs; a trial draws one pair from its own stream.
pub trait PairGenerator: Sync {
    fn generate(&self, stream: &RngStream) -> Result<(DiscreteDistribution, DiscreteDistribution)>;
}

impl<F> PairGenerator for F
where
    F: Fn(&RngStream) -> Result<(DiscreteDistribution, DiscreteDistribution)> + Sync,
{
    fn generate(&self, stream: &RngStream) -> Result<(DiscreteDistribution, DiscreteDistribution)> {
        self(stream)
    }
}

/// The same pair on every trial.
#[derive(Debug, Clone)]
pub struct FixedPair {
    pub p: DiscreteDistribution,
    pub q: DiscreteDistribution,
}

impl FixedPair {
    pub fn null(pi: DiscreteDistribution) -> Self {
        Self {
            p: pi.clone(),
            q: pi,
        }
    }
}

impl PairGenerator for FixedPair {
    fn generate(&self, _: &RngStream) -> Result<(DiscreteDistribution, DiscreteDistribution)> {
        Ok((self.p.clone(), self.q.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub type1: f64,
    pub type2: f64,
    pub n_trials: usize,
    pub se1: f64,
    pub se2: f64,
    pub truncation_rate: f64,
}

impl RiskEstimate {
    pub fn risk(&self) -> f64 {
        self.type1 + self.type2
    }

    pub fn se(&self) -> f64 {
        (self.se1 * self.se1 + self.se2 * self.se2).sqrt()
    }

    pub fn to_csv(&self) -> String {
        format!(
            "type1,type2,n_trials,se1,se2,truncation_rate\n{},{},{},{},{},{}\n",
            self.type1, self.type2, self.n_trials, self.se1, self.se2, self.truncation_rate
        )
    }
}

fn standard_error(freq: f64, n: usize) -> f64 {
    (freq * (1.0 - freq) / n as f64).sqrt()
}

/// Rejection frequency of the combined test over `n_trials` pairs, and the
/// fraction of trials whose Poisson budget was truncated.
pub fn rejection_rate(
    constants: &TestConstants,
    gen: &dyn PairGenerator,
    k: u64,
    n_trials: usize,
    stream: RngStream,
) -> Result<(f64, f64)> {
    let outcomes: Vec<(bool, bool)> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let trial = stream.substream(t as u64);
            let (p, q) = gen.generate(&trial.substream(0))?;
            let counts = sample_split_counts(&p, &q, k, trial.substream(1))?;
            Ok((combined_test(&counts, constants).combined, counts.truncated))
        })
        .collect::<Result<_>>()?;
    let n = n_trials as f64;
    let rejections = outcomes.iter().filter(|o| o.0).count() as f64;
    let truncations = outcomes.iter().filter(|o| o.1).count() as f64;
    Ok((rejections / n, truncations / n))
}

/// Monte Carlo type-I and type-II error of the combined test.
pub fn estimate_risk(
    constants: &TestConstants,
    null_gen: &dyn PairGenerator,
    alt_gen: &dyn PairGenerator,
    k: u64,
    n_trials: usize,
    stream: RngStream,
) -> Result<RiskEstimate> {
    if n_trials < MIN_TRIALS {
        return Err(Error::BudgetTooSmall {
            n: n_trials,
            min: MIN_TRIALS,
        });
    }
    let (type1, trunc0) = rejection_rate(constants, null_gen, k, n_trials, stream.substream(0))?;
    let (power, trunc1) = rejection_rate(constants, alt_gen, k, n_trials, stream.substream(1))?;
    let type2 = 1.0 - power;
    Ok(RiskEstimate {
        type1,
        type2,
        n_trials,
        se1: standard_error(type1, n_trials),
        se2: standard_error(type2, n_trials),
        truncation_rate: (trunc0 + trunc1) / 2.0,
    })
}

/// A one-parameter family of alternatives indexed by `t` in `[0, 1]`, with
/// L1 distance increasing in `t`.
pub trait Direction: Sync {
    /// A null pair `(q, q)`.
    fn null_pair(&self, stream: &RngStream)
        -> Result<(DiscreteDistribution, DiscreteDistribution)>;
    /// An alternative pair `(p_t, q)`.
    fn alt_pair(
        &self,
        t: f64,
        stream: &RngStream,
    ) -> Result<(DiscreteDistribution, DiscreteDistribution)>;
}

/// Moves mass `L1/2` off the smallest coordinates of `pi` onto its largest
/// coordinate, where `L1 = t * max_l1`.
#[derive(Debug, Clone)]
pub struct TailTransport {
    pub pi: DiscreteDistribution,
    pub max_l1: f64,
}

impl TailTransport {
    /// Largest achievable L1 distance: `2 (1 - pi_max)`.
    pub fn capacity(pi: &DiscreteDistribution) -> f64 {
        let max = pi.probs().iter().copied().fold(0.0, f64::max);
        2.0 * (1.0 - max)
    }

    pub fn new(pi: DiscreteDistribution, max_l1: f64) -> Result<Self> {
        let cap = Self::capacity(&pi);
        if !(max_l1 >= 0.0 && max_l1 <= cap + 1e-12) {
            return Err(Error::BadParameter(format!(
                "L1 distance {max_l1} exceeds the transport capacity {cap}"
            )));
        }
        Ok(Self {
            pi,
            max_l1: max_l1.min(cap),
        })
    }

    /// `pi` with L1 distance exactly `l1` (up to rounding) from `pi`.
    pub fn transported(&self, l1: f64) -> Result<DiscreteDistribution> {
        transport(&self.pi, l1)
    }
}

/// Removes `l1/2` mass from the smallest coordinates (ascending) and adds it
/// to the largest coordinate.
pub fn transport(pi: &DiscreteDistribution, l1: f64) -> Result<DiscreteDistribution> {
    let view = pi.sorted_view();
    let top = view.order[0];
    let mut v = pi.probs().to_vec();
    let mut remaining = l1 / 2.0;
    for &i in view.order.iter().rev() {
        if remaining <= 0.0 || i == top {
            break;
        }
        let take = v[i].min(remaining);
        v[i] -= take;
        remaining -= take;
    }
    if remaining > 1e-12 {
        return Err(Error::BadParameter(format!(
            "L1 distance {l1} exceeds the transport capacity"
        )));
    }
    v[top] += l1 / 2.0 - remaining.max(0.0);
    DiscreteDistribution::new(v)
}

impl Direction for TailTransport {
    fn null_pair(&self, _: &RngStream) -> Result<(DiscreteDistribution, DiscreteDistribution)> {
        Ok((self.pi.clone(), self.pi.clone()))
    }

    fn alt_pair(
        &self,
        t: f64,
        _: &RngStream,
    ) -> Result<(DiscreteDistribution, DiscreteDistribution)> {
        Ok((self.transported(t * self.max_l1)?, self.pi.clone()))
    }
}

/// Alternative prior draws with the perturbation profile scaled by `t`.
#[derive(Debug, Clone)]
pub struct AdversarialScaling {
    pub prior: AdversarialPrior,
}

impl Direction for AdversarialScaling {
    fn null_pair(
        &self,
        stream: &RngStream,
    ) -> Result<(DiscreteDistribution, DiscreteDistribution)> {
        let d = sample_null(&self.prior, stream)?;
        Ok((d.p_tilde, d.q_tilde))
    }

    fn alt_pair(
        &self,
        t: f64,
        stream: &RngStream,
    ) -> Result<(DiscreteDistribution, DiscreteDistribution)> {
        let d = sample_alt_scaled(&self.prior, stream, t)?;
        Ok((d.p_tilde, d.q_tilde))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationEstimate {
    /// Mean L1 distance at the upper end of the final bracket; `None` when
    /// the risk stays above `gamma` at `t = 1`.
    pub rho_hat: Option<f64>,
    pub gamma: f64,
    /// Final bracket in L1 distance.
    pub bracket: (f64, f64),
    /// Final bracket in the direction parameter.
    pub t_bracket: (f64, f64),
    pub risk_low: f64,
    pub risk_high: f64,
    pub n_trials_per_eval: usize,
}

/// Bisects over `t` for the smallest L1 distance at which the estimated risk
/// of the combined test is at most `gamma`. Every evaluation reuses the same
/// trial streams.
pub fn empirical_separation(
    constants: &TestConstants,
    direction: &dyn Direction,
    k: u64,
    gamma: f64,
    n_trials_per_eval: usize,
    stream: RngStream,
) -> Result<SeparationEstimate> {
    if n_trials_per_eval < MIN_TRIALS {
        return Err(Error::BudgetTooSmall {
            n: n_trials_per_eval,
            min: MIN_TRIALS,
        });
    }
    let n = n_trials_per_eval;
    if gamma >= 1.0 {
        return Ok(SeparationEstimate {
            rho_hat: Some(0.0),
            gamma,
            bracket: (0.0, 0.0),
            t_bracket: (0.0, 0.0),
            risk_low: 1.0,
            risk_high: 1.0,
            n_trials_per_eval: n,
        });
    }
    let null_gen = |s: &RngStream| direction.null_pair(s);
    let (type1, _) = rejection_rate(constants, &null_gen, k, n, stream.substream(0))?;
    let evaluate = |t: f64| -> Result<(f64, f64)> {
        let alt_gen = |s: &RngStream| direction.alt_pair(t, s);
        let (power, _) = rejection_rate(constants, &alt_gen, k, n, stream.substream(1))?;
        let l1 = mean_l1(direction, t, n, stream.substream(1))?;
        Ok((type1 + 1.0 - power, l1))
    };
    let (risk_top, l1_top) = evaluate(1.0)?;
    if risk_top > gamma {
        return Ok(SeparationEstimate {
            rho_hat: None,
            gamma,
            bracket: (l1_top, f64::INFINITY),
            t_bracket: (1.0, f64::INFINITY),
            risk_low: risk_top,
            risk_high: f64::NAN,
            n_trials_per_eval: n,
        });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let (mut risk_lo, mut risk_hi) = (type1 + 1.0, risk_top);
    let (mut l1_lo, mut l1_hi) = (0.0, l1_top);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let (risk, l1) = evaluate(mid)?;
        if risk <= gamma {
            (hi, risk_hi, l1_hi) = (mid, risk, l1);
        } else {
            (lo, risk_lo, l1_lo) = (mid, risk, l1);
        }
    }
    Ok(SeparationEstimate {
        rho_hat: Some(l1_hi),
        gamma,
        bracket: (l1_lo, l1_hi),
        t_bracket: (lo, hi),
        risk_low: risk_lo,
        risk_high: risk_hi,
        n_trials_per_eval: n,
    })
}

/// Mean exact L1 distance of the alternative pairs the separation search
/// draws at `t`.
fn mean_l1(direction: &dyn Direction, t: f64, n: usize, stream: RngStream) -> Result<f64> {
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let (p, q) = direction.alt_pair(t, &stream.substream(i as u64).substream(0))?;
            p.l1_distance(&q)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Run a tail-transport separation search with this many trials per
    /// evaluation.
    pub separation_trials: Option<usize>,
    pub seed: u64,
}

/// Rates, regime decomposition and optional empirical separation for one
/// reference distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub k: u64,
    pub d: usize,
    pub gamma: f64,
    pub upper: RateBreakdown,
    pub lower: RateBreakdown,
    pub identity: RateBreakdown,
    pub dk16: RateBreakdown,
    pub regimes: RegimeTable,
    pub constants: Option<TestConstants>,
    /// Finite-suite surrogate of the separation distance along tail
    /// transport; it under-estimates the supremum over the class.
    pub separation: Option<SeparationEstimate>,
}

impl CompareReport {
    /// Flat `section,name,value` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut row = |a: &str, b: &str, c: String| {
            w.write_record([a, b, c.as_str()]).expect("in-memory write");
        };
        row("section", "name", "value".into());
        row("meta", "k", self.k.to_string());
        row("meta", "d", self.d.to_string());
        row("meta", "gamma", self.gamma.to_string());
        for (section, r) in [
            ("upper", &self.upper),
            ("lower", &self.lower),
            ("identity", &self.identity),
            ("dk16", &self.dk16),
        ] {
            row(section, "rho", r.rho.to_string());
            if let Some(m) = r.minimizer {
                row(section, "minimizer", m.to_string());
            }
            for (name, value) in &r.terms {
                row(section, name, value.to_string());
            }
        }
        for r in &self.regimes.rows {
            let section = format!("regime:{}", r.label);
            row(&section, "start", r.start.to_string());
            row(&section, "end", r.end.to_string());
            row(&section, "ours", r.ours.to_string());
            row(&section, "identity", r.identity.to_string());
            row(&section, "dk16", r.dk16.to_string());
        }
        if let Some(s) = &self.separation {
            let rho = s
                .rho_hat
                .map(|r| r.to_string())
                .unwrap_or_else(|| "unreachable".into());
            row("separation", "rho_hat", rho);
            row("separation", "bracket_low", s.bracket.0.to_string());
            row("separation", "bracket_high", s.bracket.1.to_string());
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

pub fn compare_report(
    pi: &DiscreteDistribution,
    k: u64,
    gamma: f64,
    constants: Option<&TestConstants>,
    options: &ReportOptions,
) -> Result<CompareReport> {
    let separation = match (constants, options.separation_trials) {
        (Some(c), Some(n)) => {
            let direction = TailTransport::new(pi.clone(), TailTransport::capacity(pi))?;
            Some(empirical_separation(
                c,
                &direction,
                k,
                gamma,
                n,
                RngStream::new(options.seed),
            )?)
        }
        _ => None,
    };
    Ok(CompareReport {
        k,
        d: pi.d(),
        gamma,
        upper: upper_rate(pi, k, DEFAULT_U)?,
        lower: lower_rate(pi, k, DEFAULT_V)?,
        identity: identity_rate(pi, k)?,
        dk16: dk16_rate(pi, k)?,
        regimes: regime_table(pi, k)?,
        constants: constants.copied(),
        separation,
    })
}
