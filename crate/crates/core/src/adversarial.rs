//! Adversarial priors over `(q, p)` pairs that hide the difference between
//! `p` and `q` in coordinates below the `1/k` detection floor.
//!
//! The perturbation profile `eps_star` is built on the sorted reference and
//! then mapped back to the original coordinates. Index sets are 0-based
//! coordinate indices; ranks (`j`, `i_v_pi`) are 1-based.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distmodel::{in_class_p_pi, j_index_sorted, DiscreteDistribution};
use crate::error::{Error, Result};
use crate::rates::{c_pi, i_conditions, i_v_pi_sorted};
use crate::sampling::RngStream;

pub const DEFAULT_U: f64 = 0.1;
pub const RETRY_CAP: usize = 100;

/// Which branch of the construction produced the middle part of `eps_star`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpsCase {
    /// No coordinate is below `1/k`; `eps_star` vanishes.
    NoSmallEntries,
    /// `I <= J`: only the tail ranks are perturbed.
    TailOnly,
    /// The mass condition fails one rank before `I`.
    MassSaturated,
    /// The exponential-mass condition fails one rank before `I`.
    ExpSaturated,
    /// The pointwise condition fails one rank before `I`.
    PointwiseSaturated,
}

/// Parameters of the construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub k: u64,
    pub u: f64,
    pub v: f64,
    /// Level thinning factor.
    pub m: usize,
    /// Level-size cutoff multiplier.
    pub a: f64,
    pub delta: f64,
    pub gamma_lb: f64,
}

impl PriorParams {
    /// Smallest `M` the level-thinning argument asks for at this `delta`.
    pub fn m_lower_bound(&self) -> f64 {
        4.0 * (32.0 * (1.0 / self.delta).ln()).powi(2).max(1.0)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::BadParameter(msg));
        if self.k < 2 {
            return Err(Error::KTooSmall { k: self.k, min: 2 });
        }
        if !(self.u > 0.0 && self.u < 1.0) {
            return bad(format!("u must lie in (0, 1), got {}", self.u));
        }
        if self.v.is_nan() || self.v < 0.0 {
            return bad(format!("v must be >= 0, got {}", self.v));
        }
        if self.m < 1 {
            return bad("M must be >= 1".into());
        }
        if self.a.is_nan() || self.a <= 2.0 {
            return bad(format!("a must be > 2, got {}", self.a));
        }
        if !(self.delta > 0.0 && self.delta <= 0.125) {
            return bad(format!("delta must lie in (0, 1/8], got {}", self.delta));
        }
        if !(self.gamma_lb > 0.0 && self.gamma_lb < 1.0) {
            return bad(format!(
                "gamma_lb must lie in (0, 1), got {}",
                self.gamma_lb
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialPrior {
    pub pi: DiscreteDistribution,
    pub params: PriorParams,
    /// Coordinates whose values are redrawn, sorted.
    pub a_set: Vec<usize>,
    /// Members of `a_set` at or below `1/k`, sorted.
    pub a_prime: Vec<usize>,
    /// Perturbation size per coordinate, in `[0, 1/2]`.
    pub eps_star: Vec<f64>,
    pub c_pi: f64,
    pub i_v_pi: usize,
    pub j: usize,
    pub case: EpsCase,
    /// True when no rank met the cutoff conditions and `i_v_pi = d` came
    /// from the empty-set convention.
    pub convention: bool,
    /// True when some entry of `eps_star` had to be clipped to respect the
    /// per-coordinate cap (only possible in the convention case).
    pub clipped: bool,
    pub warnings: Vec<String>,
}

/// Builds the index set and the perturbation profile for `pi`.
pub fn build_prior(pi: &DiscreteDistribution, params: PriorParams) -> Result<AdversarialPrior> {
    params.validate()?;
    let mut warnings = Vec::new();
    let bound = params.m_lower_bound();
    if (params.m as f64) < bound {
        warnings.push(format!(
            "M = {} is below the level-thinning bound {:.0}",
            params.m, bound
        ));
    }
    if (params.m as f64) > (params.k as f64).sqrt() {
        warnings.push(format!("M = {} exceeds sqrt(k)", params.m));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let view = pi.sorted_view();
    let sorted = &view.sorted_probs;
    let k = params.k;
    let j = j_index_sorted(sorted, k);
    let c = c_pi(pi, k, params.v);
    let i_v = i_v_pi_sorted(sorted, k, c);
    let profile = eps_profile(sorted, k, params.u, c, j, i_v);
    let eps_star = view.unsort(&profile.eps);

    let a_set = index_set(pi, &params);
    let inv_k = 1.0 / k as f64;
    let a_prime = a_set
        .iter()
        .copied()
        .filter(|&i| pi.get(i) <= inv_k)
        .collect();
    Ok(AdversarialPrior {
        pi: pi.clone(),
        params,
        a_set,
        a_prime,
        eps_star,
        c_pi: c,
        i_v_pi: i_v,
        j,
        case: profile.case,
        convention: profile.convention,
        clipped: profile.clipped,
        warnings,
    })
}

/// Level-thinned index set: from each crowded level around `log2(k)` keep
/// the `floor(|S| / M)` largest coordinates.
pub fn index_set(pi: &DiscreteDistribution, params: &PriorParams) -> Vec<usize> {
    let base = (params.k as f64).log2().floor() as i32;
    let levels = pi.level_sets();
    let mut out = Vec::new();
    for (&level, members) in &levels.sets {
        let offset = (level - base).unsigned_abs() as f64;
        let cutoff = params.a * ((offset + 1.0) / params.gamma_lb).ln().sqrt();
        if members.len() as f64 <= cutoff {
            continue;
        }
        let take = members.len() / params.m;
        let mut by_size = members.clone();
        by_size.sort_by(|&x, &y| pi.get(y).total_cmp(&pi.get(x)).then(x.cmp(&y)));
        out.extend_from_slice(&by_size[..take]);
    }
    out.sort_unstable();
    out
}

pub(crate) struct EpsProfile {
    pub eps: Vec<f64>,
    pub case: EpsCase,
    pub convention: bool,
    pub clipped: bool,
}

/// The perturbation profile on the sorted reference.
pub(crate) fn eps_profile(
    sorted: &[f64],
    k: u64,
    u: f64,
    c: f64,
    j: usize,
    i_v: usize,
) -> EpsProfile {
    let d = sorted.len();
    let mut eps = vec![0.0; d];
    if j > d {
        return EpsProfile {
            eps,
            case: EpsCase::NoSmallEntries,
            convention: true,
            clipped: false,
        };
    }
    let kf = k as f64;
    let tail = suffix(sorted, |p| p);
    let exp_tail = suffix(sorted, |p| (-2.0 * kf * p).exp() * p * p);
    let convention = !i_conditions(sorted, j, i_v, c, &tail, &exp_tail)
        .iter()
        .all(|&ok| ok);
    let step = (u / 2.0).sqrt();
    for e in eps.iter_mut().skip(i_v.max(j) - 1) {
        *e = step;
    }

    let mut case = EpsCase::TailOnly;
    if i_v > j {
        let r = i_v - 1;
        let p = sorted[r - 1];
        let s = (c / i_v as f64).sqrt();
        let between = tail[j - 1] - tail[r - 1];
        if tail[r - 1] > between && p <= s.min(1.0 / kf) {
            case = EpsCase::MassSaturated;
            eps[r - 1] = step;
        } else if exp_tail[r - 1] > c && p <= s {
            case = EpsCase::ExpSaturated;
            eps[r - 1] = step;
        } else {
            case = EpsCase::PointwiseSaturated;
            let scale = (u * c / (2.0 * i_v as f64)).sqrt();
            for rank in j..i_v {
                eps[rank - 1] = scale / sorted[rank - 1];
            }
        }
    }

    // Away from the convention case the recipe meets the cap by construction.
    let mut clipped = false;
    if convention {
        let cap = coordinate_cap(k, u, c, i_v);
        for (e, &p) in eps.iter_mut().zip(sorted) {
            if *e > 0.0 && p * *e > cap.min(p / 2.0) {
                *e = cap.min(p / 2.0) / p;
                clipped = true;
            }
        }
        let total: f64 = eps
            .iter()
            .zip(sorted)
            .map(|(&e, &p)| p * p * e * e * (-2.0 * kf * p).exp())
            .sum();
        if total > u * c {
            let shrink = (u * c / total).sqrt();
            eps.iter_mut().for_each(|e| *e *= shrink);
            clipped = true;
        }
    }
    EpsProfile {
        eps,
        case,
        convention,
        clipped,
    }
}

/// `sqrt(u) min(1/k, sqrt(C / (2 I)))`.
fn coordinate_cap(k: u64, u: f64, c: f64, i_v: usize) -> f64 {
    u.sqrt() * (1.0 / k as f64).min((c / (2.0 * i_v as f64)).sqrt())
}

fn suffix(sorted: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; sorted.len() + 1];
    for r in (0..sorted.len()).rev() {
        out[r] = out[r + 1] + f(sorted[r]);
    }
    out
}

/// Slack and verdict of each constraint on `eps_star`; a constraint holds
/// when its slack is non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsCheck {
    /// Range and zero-above-`1/k` condition.
    pub range: bool,
    /// `u C - sum pi^2 eps^2 exp(-2 k pi)`.
    pub energy_slack: f64,
    /// Smallest per-coordinate slack against
    /// `min(sqrt(u)/k, sqrt(u C / (2 I)), pi/2)`.
    pub cap_slack: f64,
    /// `sum pi eps` minus the required lower bound.
    pub mass_slack: f64,
}

impl EpsCheck {
    pub fn all_hold(&self, tol: f64) -> bool {
        self.range && self.energy_slack >= -tol && self.cap_slack >= -tol && self.mass_slack >= -tol
    }
}

/// Direct evaluation of the four constraints on a prior's `eps_star`.
///
/// The per-coordinate cap uses `pi_i / 2` (i.e. `eps <= 1/2`) as its third
/// member.
pub fn check_eps(prior: &AdversarialPrior) -> EpsCheck {
    let pi = prior.pi.probs();
    let k = prior.params.k;
    let u = prior.params.u;
    let c = prior.c_pi;
    let kf = k as f64;
    let inv_k = 1.0 / kf;
    let range = prior
        .eps_star
        .iter()
        .zip(pi)
        .all(|(&e, &p)| (0.0..=0.5).contains(&e) && (p < inv_k || e == 0.0 || p == inv_k));
    let energy: f64 = prior
        .eps_star
        .iter()
        .zip(pi)
        .map(|(&e, &p)| p * p * e * e * (-2.0 * kf * p).exp())
        .sum();
    let cap = coordinate_cap(k, u, c, prior.i_v_pi);
    let cap_slack = prior
        .eps_star
        .iter()
        .zip(pi)
        .map(|(&e, &p)| cap.min(p / 2.0) - p * e)
        .fold(f64::INFINITY, f64::min);
    let achieved: f64 = prior.eps_star.iter().zip(pi).map(|(&e, &p)| p * e).sum();
    EpsCheck {
        range,
        energy_slack: u * c - energy,
        cap_slack,
        mass_slack: achieved - required_mass(prior),
    }
}

/// `[max(sqrt(u/2) sum_{i>=I} pi_(i), sqrt(u C) (I - J) / sqrt(2 I))]
///  min sqrt(u/8) sum_{i>=J} pi_(i)`.
pub fn required_mass(prior: &AdversarialPrior) -> f64 {
    let sorted = prior.pi.sorted_view().sorted_probs;
    let u = prior.params.u;
    let (j, i_v) = (prior.j, prior.i_v_pi);
    let tail_from = |r: usize| sorted.iter().skip(r.saturating_sub(1)).sum::<f64>();
    let first = (u / 2.0).sqrt() * tail_from(i_v);
    let second = (u * prior.c_pi).sqrt() * (i_v as f64 - j as f64) / (2.0 * i_v as f64).sqrt();
    let cap = (u / 8.0).sqrt() * if j <= sorted.len() { tail_from(j) } else { 0.0 };
    first.max(second).min(cap)
}

/// The lower bound on the on-set perturbation mass `sum_A |xi_i| q_i`
/// holding with probability `1 - delta` under the alternative prior.
pub fn barrho_bound(prior: &AdversarialPrior) -> f64 {
    let p = &prior.params;
    let sorted = prior.pi.sorted_view().sorted_probs;
    let (u, kf, m) = (p.u, p.k as f64, p.m as f64);
    let tail: f64 = sorted.iter().skip(prior.i_v_pi - 1).sum();
    let first = (u / 2.0).sqrt() * tail;
    let second = u.sqrt() * (prior.i_v_pi as f64 - prior.j as f64)
        / (2.0 * prior.i_v_pi as f64).sqrt()
        * prior.c_pi.sqrt();
    let core = first.max(second).min((u / 8.0).sqrt()) / (8.0 * m * m);
    core - 1.0 / (kf * m * p.delta).sqrt() - 8.0 * p.a * (1.0 + (1.0 / p.gamma_lb).ln()) / kf
}

/// One draw `(q_tilde, p_tilde)` from a prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDraw {
    pub q_tilde: DiscreteDistribution,
    pub p_tilde: DiscreteDistribution,
    /// Signed multiplicative perturbation per coordinate (zero off the
    /// perturbed set).
    pub xi: Vec<f64>,
    pub l1_distance: f64,
    /// `sum_{i in A} |p_tilde_i - q_tilde_i|`.
    pub l1_on_set: f64,
    pub q_in_class: bool,
    pub p_in_class: bool,
    /// Both vectors non-negative and in the class of the reference.
    pub valid: bool,
    /// Redraws needed to avoid negative coordinates.
    pub retries: usize,
}

/// Mean of `pi_j 1{pi_j <= 1/k}` over `j` in the index set, times `k`.
pub fn m_bar(prior: &AdversarialPrior) -> f64 {
    if prior.a_set.is_empty() {
        return 0.0;
    }
    let inv_k = 1.0 / prior.params.k as f64;
    let s: f64 = prior
        .a_set
        .iter()
        .map(|&j| prior.pi.get(j))
        .filter(|&p| p <= inv_k)
        .sum();
    prior.params.k as f64 * s / prior.a_set.len() as f64
}

/// Exact expectation of the on-set L1 distance under the small-tail prior.
pub fn smalltail_expected_l1(prior: &AdversarialPrior) -> f64 {
    if prior.a_set.is_empty() {
        return 0.0;
    }
    let target = 2.0 * m_bar(prior) / prior.params.k as f64;
    let per: f64 = prior
        .a_set
        .iter()
        .map(|&j| {
            let p = prior.pi.get(j);
            0.5 * (p + (p - target).abs())
        })
        .sum::<f64>()
        / prior.a_set.len() as f64;
    prior.a_prime.len() as f64 * per
}

#[derive(Clone, Copy)]
enum Alternative {
    Null,
    Signed(f64),
    SmallTail,
}

/// Renormalizes off the index set so the vector sums to one. Returns `None`
/// when an off-set coordinate would go negative.
fn renormalize_off_set(pi: &[f64], on_set: &[bool], values: &mut [f64]) -> Option<()> {
    let off_mass: f64 = pi
        .iter()
        .zip(on_set)
        .filter(|(_, &a)| !a)
        .map(|(p, _)| p)
        .sum();
    let shift: f64 = values
        .iter()
        .zip(pi)
        .zip(on_set)
        .filter(|(_, &a)| a)
        .map(|((x, p), _)| x - p)
        .sum();
    let factor = 1.0 - shift / off_mass;
    if factor < 0.0 {
        return None;
    }
    for ((x, &p), &a) in values.iter_mut().zip(pi).zip(on_set) {
        if !a {
            *x = p * factor;
        }
    }
    Some(())
}

fn draw(prior: &AdversarialPrior, stream: &RngStream, kind: Alternative) -> Result<PriorDraw> {
    let pi = prior.pi.probs();
    let d = pi.len();
    let mut on_set = vec![false; d];
    for &i in &prior.a_set {
        on_set[i] = true;
    }
    let off_mass: f64 = pi
        .iter()
        .zip(&on_set)
        .filter(|(_, &a)| !a)
        .map(|(p, _)| p)
        .sum();
    if !prior.a_set.is_empty() && off_mass <= 0.0 {
        return Err(Error::RenormalizationImpossible);
    }
    let mut in_prime = vec![false; d];
    for &i in &prior.a_prime {
        in_prime[i] = true;
    }
    let target = 2.0 * m_bar(prior) / prior.params.k as f64;
    let mut rng = stream.rng();
    for retries in 0..=RETRY_CAP {
        let mut q = pi.to_vec();
        let mut p = pi.to_vec();
        let mut xi = vec![0.0; d];
        for &i in &prior.a_set {
            let j = prior.a_set[rng.random_range(0..prior.a_set.len())];
            q[i] = pi[j];
            p[i] = match kind {
                Alternative::Null => q[i],
                Alternative::Signed(scale) if in_prime[i] => {
                    let e = scale * prior.eps_star[j];
                    xi[i] = if rng.random::<bool>() { e } else { -e };
                    q[i] * (1.0 + xi[i])
                }
                Alternative::SmallTail if in_prime[i] => {
                    if rng.random::<bool>() {
                        target
                    } else {
                        0.0
                    }
                }
                _ => q[i],
            };
        }
        if !prior.a_set.is_empty()
            && (renormalize_off_set(pi, &on_set, &mut q).is_none()
                || renormalize_off_set(pi, &on_set, &mut p).is_none())
        {
            continue;
        }
        let q_tilde = DiscreteDistribution::new(q)?;
        let p_tilde = match kind {
            Alternative::Null => q_tilde.clone(),
            _ => DiscreteDistribution::new(p)?,
        };
        if let Alternative::SmallTail = kind {
            for &i in &prior.a_set {
                if in_prime[i] && q_tilde.get(i) > 0.0 {
                    xi[i] = p_tilde.get(i) / q_tilde.get(i) - 1.0;
                }
            }
        }
        let l1_distance = p_tilde.l1_distance(&q_tilde)?;
        let l1_on_set = prior
            .a_set
            .iter()
            .map(|&i| (p_tilde.get(i) - q_tilde.get(i)).abs())
            .sum();
        let q_in_class = in_class_p_pi(&q_tilde, &prior.pi)?;
        let p_in_class = in_class_p_pi(&p_tilde, &prior.pi)?;
        return Ok(PriorDraw {
            q_tilde,
            p_tilde,
            xi,
            l1_distance,
            l1_on_set,
            q_in_class,
            p_in_class,
            valid: q_in_class && p_in_class,
            retries,
        });
    }
    Err(Error::RetryCapExceeded { retries: RETRY_CAP })
}

/// Draws `q_tilde` from the null prior; `p_tilde = q_tilde`.
pub fn sample_null(prior: &AdversarialPrior, stream: &RngStream) -> Result<PriorDraw> {
    draw(prior, stream, Alternative::Null)
}

/// Draws `(q_tilde, p_tilde)` with `p_i = q_i (1 + xi_i)` on the perturbed set.
pub fn sample_alt(prior: &AdversarialPrior, stream: &RngStream) -> Result<PriorDraw> {
    draw(prior, stream, Alternative::Signed(1.0))
}

/// As [`sample_alt`] with every perturbation multiplied by `scale` in
/// `[0, 1]`. The same stream yields the same sources and signs for every
/// scale.
pub fn sample_alt_scaled(
    prior: &AdversarialPrior,
    stream: &RngStream,
    scale: f64,
) -> Result<PriorDraw> {
    if !(0.0..=1.0).contains(&scale) {
        return Err(Error::BadParameter(format!(
            "scale must lie in [0, 1], got {scale}"
        )));
    }
    draw(prior, stream, Alternative::Signed(scale))
}

/// Draws `(q_tilde, p_tilde)` with `p_i` in `{0, 2 m_bar / k}` on the
/// perturbed set.
pub fn sample_alt_smalltail(prior: &AdversarialPrior, stream: &RngStream) -> Result<PriorDraw> {
    draw(prior, stream, Alternative::SmallTail)
}

/// Whether the small-tail hypothesis `||pi^2 exp(-2 (1 + v) k pi)||_1 <= h / k^2`
/// holds for the given `h`.
pub fn smalltail_hypothesis(prior: &AdversarialPrior, h: f64) -> bool {
    let kf = prior.params.k as f64;
    crate::rates::exp_mass(
        prior.pi.probs(),
        prior.params.k,
        2.0 * (1.0 + prior.params.v),
    ) <= h / (kf * kf)
}
