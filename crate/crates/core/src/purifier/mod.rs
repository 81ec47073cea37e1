//! Two-component Beta mixture over per-pair scores.
//!
//! The clean component is initialised from scores of known-matched meta
//! pairs and the noisy one from deliberately mismatched pairs, both by
//! moment matching. EM then refines the mixture on the training scores, and
//! a pair is admitted when its posterior of being clean exceeds one half.

pub mod report;

pub use report::{PurifyReport, ReportRow};

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const SCORE_MIN: f64 = 1e-4;
pub const SCORE_MAX: f64 = 1.0 - 1e-4;

/// Floor for shape parameters when moment matching yields a non-positive one.
pub const SHAPE_FLOOR: f64 = 1e-2;
/// Moments with a smaller population variance are degenerate.
pub const MIN_VARIANCE: f64 = 1e-10;
/// A component whose weight drops below this has collapsed.
pub const MIN_WEIGHT: f64 = 1e-6;

pub const DEFAULT_STOP: f64 = 1e-2;
pub const DEFAULT_MAX_ITERS: usize = 10;

pub fn clamp_score(s: f64) -> Result<f64> {
    if s.is_nan() {
        return Err(Error::NonFinite("score".into()));
    }
    Ok(s.clamp(SCORE_MIN, SCORE_MAX))
}

fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log density of `Beta(alpha, beta)` at `s`.
pub fn beta_log_pdf(s: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::ScoreOutOfRange(s));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "Beta shapes must be positive and finite, got ({alpha}, {beta})"
        )));
    }
    Ok(log_pdf_unchecked(s, alpha, beta))
}

fn log_pdf_unchecked(s: f64, alpha: f64, beta: f64) -> f64 {
    (alpha - 1.0) * s.ln() + (beta - 1.0) * (-s).ln_1p() - ln_beta_fn(alpha, beta)
}

/// Running mean and population variance, one pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Beta shapes with the given mean and variance; non-positive results are
/// floored at [`SHAPE_FLOOR`].
pub fn shapes_from_moments(mean: f64, variance: f64) -> (f64, f64) {
    let alpha = (1.0 - mean) * mean * mean / variance - mean;
    let beta = alpha * (1.0 - mean) / mean;
    if alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite() {
        (alpha, beta)
    } else {
        warn!("moment matching gave shapes ({alpha}, {beta}); flooring at {SHAPE_FLOOR}");
        (
            if alpha > 0.0 && alpha.is_finite() { alpha } else { SHAPE_FLOOR },
            if beta > 0.0 && beta.is_finite() { beta } else { SHAPE_FLOOR },
        )
    }
}

/// Moment-matched `(alpha, beta)` for a score sample (clamped first).
pub fn moment_match(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "moment matching needs at least 2 scores, got {}",
            scores.len()
        )));
    }
    let mut m = Moments::default();
    for &s in scores {
        m.push(clamp_score(s)?);
    }
    let variance = m.variance();
    if variance <= MIN_VARIANCE || !(m.mean > 0.0 && m.mean < 1.0) {
        return Err(Error::DegenerateMoments {
            mean: m.mean,
            variance,
        });
    }
    Ok(shapes_from_moments(m.mean, variance))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaComponent {
    pub alpha: f64,
    pub beta: f64,
    pub weight: f64,
}

impl BetaComponent {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    fn weighted_log_pdf(&self, s: f64) -> f64 {
        self.weight.ln() + log_pdf_unchecked(s, self.alpha, self.beta)
    }
}

/// Clean and noisy components. Roles are fixed at initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    pub clean: BetaComponent,
    pub noisy: BetaComponent,
    /// EM iterations actually run.
    pub iterations: usize,
    /// Mean log-likelihood per score, after each iteration (index 0 is the
    /// initial mixture). Empty until [`em_fit`] runs.
    pub log_likelihood: Vec<f64>,
    /// Set when EM hit a collapsed component and fell back to the init.
    pub collapsed: bool,
}

impl BetaMixture {
    pub fn new(clean: (f64, f64), noisy: (f64, f64)) -> Self {
        Self {
            clean: BetaComponent {
                alpha: clean.0,
                beta: clean.1,
                weight: 0.5,
            },
            noisy: BetaComponent {
                alpha: noisy.0,
                beta: noisy.1,
                weight: 0.5,
            },
            iterations: 0,
            log_likelihood: Vec::new(),
            collapsed: false,
        }
    }

    pub fn final_log_likelihood(&self) -> Option<f64> {
        self.log_likelihood.last().copied()
    }

    /// `λ_c φ_c(s) / (λ_c φ_c(s) + λ_n φ_n(s))` for a clamped score.
    pub fn posterior_clean(&self, s: f64) -> Result<f64> {
        beta_log_pdf(s, self.clean.alpha, self.clean.beta)?;
        beta_log_pdf(s, self.noisy.alpha, self.noisy.beta)?;
        Ok(self.posterior_unchecked(s))
    }

    pub fn posterior_noisy(&self, s: f64) -> Result<f64> {
        Ok(1.0 - self.posterior_clean(s)?)
    }

    fn posterior_unchecked(&self, s: f64) -> f64 {
        let lc = self.clean.weighted_log_pdf(s);
        let ln = self.noisy.weighted_log_pdf(s);
        // 1 / (1 + exp(ln - lc)), which is log-sum-exp normalisation.
        let d = ln - lc;
        if d <= 0.0 {
            1.0 / (1.0 + d.exp())
        } else {
            let e = (-d).exp();
            e / (1.0 + e)
        }
    }

    /// Mean log-likelihood of the scores under the mixture.
    pub fn mean_log_likelihood(&self, scores: &[f64]) -> f64 {
        let total: f64 = scores
            .iter()
            .map(|&s| {
                let a = self.clean.weighted_log_pdf(s);
                let b = self.noisy.weighted_log_pdf(s);
                let m = a.max(b);
                m + ((a - m).exp() + (b - m).exp()).ln()
            })
            .sum();
        total / scores.len() as f64
    }
}

/// Clean component from positive meta scores, noisy from negative ones,
/// equal weights.
pub fn moment_match_init(positive: &[f64], negative: &[f64]) -> Result<BetaMixture> {
    Ok(BetaMixture::new(moment_match(positive)?, moment_match(negative)?))
}

/// Posterior-weighted log-likelihood of one component's shapes.
fn weighted_shape_ll(scores: &[f64], resp: &[f64], alpha: f64, beta: f64) -> f64 {
    scores
        .iter()
        .zip(resp)
        .map(|(&s, &r)| r * log_pdf_unchecked(s, alpha, beta))
        .sum()
}

/// Shapes for one component: weighted moment matching, kept only if it does
/// not lower the component's expected log-likelihood (backtracking toward
/// the current shapes otherwise).
fn m_step_shapes(scores: &[f64], resp: &[f64], current: (f64, f64)) -> (f64, f64) {
    let total: f64 = resp.iter().sum();
    let mean = scores.iter().zip(resp).map(|(s, r)| r * s).sum::<f64>() / total;
    let variance = scores
        .iter()
        .zip(resp)
        .map(|(s, r)| r * (s - mean) * (s - mean))
        .sum::<f64>()
        / total;
    if variance <= MIN_VARIANCE || !(mean > 0.0 && mean < 1.0) {
        return current;
    }
    let target = shapes_from_moments(mean, variance);
    let base = weighted_shape_ll(scores, resp, current.0, current.1);
    let mut t = 1.0;
    for _ in 0..20 {
        let cand = (
            current.0 + t * (target.0 - current.0),
            current.1 + t * (target.1 - current.1),
        );
        if weighted_shape_ll(scores, resp, cand.0, cand.1) >= base {
            return cand;
        }
        t *= 0.5;
    }
    current
}

/// Expectation-maximisation over clamped scores, starting from `init`.
///
/// Stops when the mean log-likelihood changes by less than `stop` or after
/// `max_iters` iterations. A collapsed component (weight below
/// [`MIN_WEIGHT`]) returns `init` with `collapsed` set.
pub fn em_fit(scores: &[f64], init: &BetaMixture, stop: f64, max_iters: usize) -> Result<BetaMixture> {
    let scores = scores
        .iter()
        .map(|&s| clamp_score(s))
        .collect::<Result<Vec<_>>>()?;
    let distinct = scores.iter().any(|&s| s != scores[0]);
    if scores.len() < 2 || !distinct {
        return Err(Error::InsufficientData(
            "EM needs at least two distinct scores".into(),
        ));
    }
    let mut mix = init.clone();
    mix.iterations = 0;
    mix.collapsed = false;
    mix.log_likelihood = vec![mix.mean_log_likelihood(&scores)];

    let n = scores.len() as f64;
    for _ in 0..max_iters {
        let resp_clean: Vec<f64> = scores.iter().map(|&s| mix.posterior_unchecked(s)).collect();
        let resp_noisy: Vec<f64> = resp_clean.iter().map(|r| 1.0 - r).collect();
        let w_clean = resp_clean.iter().sum::<f64>() / n;
        let w_noisy = 1.0 - w_clean;
        if w_clean < MIN_WEIGHT || w_noisy < MIN_WEIGHT {
            warn!("beta mixture component collapsed (clean weight {w_clean:e})");
            let mut out = init.clone();
            out.collapsed = true;
            return Ok(out);
        }
        let (ca, cb) = m_step_shapes(&scores, &resp_clean, (mix.clean.alpha, mix.clean.beta));
        let (na, nb) = m_step_shapes(&scores, &resp_noisy, (mix.noisy.alpha, mix.noisy.beta));
        mix.clean = BetaComponent {
            alpha: ca,
            beta: cb,
            weight: w_clean,
        };
        mix.noisy = BetaComponent {
            alpha: na,
            beta: nb,
            weight: w_noisy,
        };
        mix.iterations += 1;
        let ll = mix.mean_log_likelihood(&scores);
        let prev = *mix.log_likelihood.last().expect("initial entry");
        mix.log_likelihood.push(ll);
        if (ll - prev).abs() < stop {
            break;
        }
    }
    Ok(mix)
}

/// Indices whose posterior of being clean is strictly above one half.
pub fn select_clean(posteriors: &[f64]) -> Vec<usize> {
    posteriors
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p > 0.5)
        .map(|(i, _)| i)
        .collect()
}

/// Posterior of being clean for each score (clamped first).
pub fn posteriors(mixture: &BetaMixture, scores: &[f64]) -> Result<Vec<f64>> {
    scores
        .iter()
        .map(|&s| mixture.posterior_clean(clamp_score(s)?))
        .collect()
}

/// The purified index set: every `i` in `0..n` with posterior above one half.
pub fn purify(n: usize, mixture: &BetaMixture, score_fn: impl Fn(usize) -> f64) -> Result<Vec<usize>> {
    let scores: Vec<f64> = (0..n).map(score_fn).collect();
    Ok(select_clean(&posteriors(mixture, &scores)?))
}

/// Precision/recall of a selection against ground-truth clean flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub selected: usize,
    pub true_clean: usize,
    pub hits: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn selection_stats(selected: &[usize], clean: &[bool]) -> SelectionStats {
    let hits = selected.iter().filter(|&&i| clean[i]).count();
    let true_clean = clean.iter().filter(|&&c| c).count();
    let precision = if selected.is_empty() {
        0.0
    } else {
        hits as f64 / selected.len() as f64
    };
    let recall = if true_clean == 0 {
        0.0
    } else {
        hits as f64 / true_clean as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    SelectionStats {
        selected: selected.len(),
        true_clean,
        hits,
        precision,
        recall,
        f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Beta, Distribution};

    fn sample(a: f64, b: f64, n: usize, seed: u64) -> Vec<f64> {
        let d = Beta::new(a, b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn clamp_rails() {
        assert_eq!(clamp_score(0.5).unwrap(), 0.5);
        assert_eq!(clamp_score(0.0).unwrap(), 1e-4);
        assert_eq!(clamp_score(1.0).unwrap(), 1.0 - 1e-4);
        assert_eq!(clamp_score(1.0 - 1e-5).unwrap(), 1.0 - 1e-4);
        assert!(clamp_score(f64::NAN).is_err());
    }

    #[test]
    fn log_pdf_values() {
        for s in [0.01, 0.3, 0.77] {
            assert!(beta_log_pdf(s, 1.0, 1.0).unwrap().abs() < 1e-15);
        }
        assert!((beta_log_pdf(0.5, 2.0, 2.0).unwrap().exp() - 1.5).abs() < 1e-12);
        assert!(beta_log_pdf(0.0, 2.0, 2.0).is_err());
        assert!(beta_log_pdf(0.5, 0.0, 2.0).is_err());
    }

    #[test]
    fn log_pdf_integrates_to_one() {
        // Substituting s = u^(1/a) removes the s^(a-1) behaviour at 0 and
        // leaves a smooth integrand for composite Simpson; the (1-s)^0.2
        // factor near 1 still needs a fine grid.
        let (a, b) = (3.7, 1.2);
        let f = |s: f64| beta_log_pdf(s, a, b).unwrap().exp();
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let s = (k as f64 * h).clamp(1e-15, 1.0 - 1e-15);
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * f(s);
        }
        let integral = acc * h / 3.0;
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn moment_match_substitution() {
        // mean 0.5, variance 0.05
        let d = 0.05f64.sqrt();
        let (a, b) = moment_match(&[0.5 - d, 0.5 + d]).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn moment_match_recovers_beta_2_5() {
        let (a, b) = moment_match(&sample(2.0, 5.0, 10_000, 1)).unwrap();
        assert!((a - 2.0).abs() <= 0.3 && (b - 5.0).abs() <= 0.3, "{a} {b}");
    }

    #[test]
    fn moment_match_rejects_degenerate() {
        assert!(matches!(
            moment_match(&[0.3, 0.3, 0.3]),
            Err(Error::DegenerateMoments { .. })
        ));
        assert!(matches!(moment_match(&[0.3]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn moments_single_pass() {
        let xs = sample(2.0, 3.0, 777, 4);
        let m: Moments = xs.iter().copied().collect();
        assert_eq!(m.count, xs.len());
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!((m.mean - mean).abs() < 1e-12 && (m.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn em_zero_iterations_returns_init() {
        let init = BetaMixture::new((5.0, 2.0), (2.0, 5.0));
        let scores = sample(2.0, 2.0, 50, 3);
        let fit = em_fit(&scores, &init, DEFAULT_STOP, 0).unwrap();
        assert_eq!(fit.clean, init.clean);
        assert_eq!(fit.noisy, init.noisy);
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn em_separates_balanced_mixture() {
        let mut scores = sample(8.0, 2.0, 1000, 10);
        scores.extend(sample(2.0, 8.0, 1000, 11));
        let init = BetaMixture::new((5.0, 3.0), (3.0, 5.0));
        let fit = em_fit(&scores, &init, DEFAULT_STOP, DEFAULT_MAX_ITERS).unwrap();
        assert!((fit.clean.mean() - 0.8).abs() <= 0.05, "{:?}", fit.clean);
        assert!((fit.noisy.mean() - 0.2).abs() <= 0.05, "{:?}", fit.noisy);
        assert!((fit.clean.weight + fit.noisy.weight - 1.0).abs() < 1e-12);
    }

    #[test]
    fn em_self_consistent() {
        let mut scores = sample(6.0, 2.0, 5000, 20);
        scores.extend(sample(2.0, 6.0, 5000, 21));
        let init = BetaMixture::new((6.0, 2.0), (2.0, 6.0));
        let fit = em_fit(&scores, &init, DEFAULT_STOP, DEFAULT_MAX_ITERS).unwrap();
        for (a, b) in [
            (fit.clean.alpha, 6.0),
            (fit.clean.beta, 2.0),
            (fit.noisy.alpha, 2.0),
            (fit.noisy.beta, 6.0),
            (fit.clean.weight, 0.5),
        ] {
            assert!((a - b).abs() < 0.2, "{fit:?}");
        }
    }

    #[test]
    fn em_rejects_constant_scores() {
        let init = BetaMixture::new((5.0, 2.0), (2.0, 5.0));
        assert!(em_fit(&[0.4; 10], &init, DEFAULT_STOP, 10).is_err());
    }

    #[test]
    fn em_collapse_returns_init() {
        // Every score sits deep in the clean component's mass.
        let init = BetaMixture::new((50.0, 1.0), (1.0, 50.0));
        let scores: Vec<f64> = (0..100).map(|k| 0.999 - k as f64 * 1e-6).collect();
        let fit = em_fit(&scores, &init, DEFAULT_STOP, 10).unwrap();
        assert!(fit.collapsed);
        assert_eq!(fit.clean, init.clean);
    }

    #[test]
    fn posterior_symmetries() {
        let same = BetaMixture::new((3.0, 4.0), (3.0, 4.0));
        for s in [0.1, 0.5, 0.9] {
            assert_eq!(same.posterior_clean(s).unwrap(), 0.5);
        }
        let mirror = BetaMixture::new((8.0, 2.0), (2.0, 8.0));
        assert!((mirror.posterior_clean(0.5).unwrap() - 0.5).abs() < 1e-15);
        for k in 1..1000 {
            let s = k as f64 / 1000.0;
            let c = mirror.posterior_clean(s).unwrap();
            assert_eq!(c + mirror.posterior_noisy(s).unwrap(), 1.0);
        }
    }

    #[test]
    fn selection_boundaries() {
        assert_eq!(select_clean(&[1.0; 5]), vec![0, 1, 2, 3, 4]);
        assert!(select_clean(&[0.5; 5]).is_empty());
    }

    #[test]
    fn purify_is_idempotent_subset() {
        let mix = BetaMixture::new((8.0, 2.0), (2.0, 8.0));
        let scores = sample(2.0, 2.0, 300, 9);
        let a = purify(scores.len(), &mix, |i| scores[i]).unwrap();
        let b = purify(scores.len(), &mix, |i| scores[i]).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&i| i < scores.len()));
    }

    #[test]
    fn separated_selection_f1() {
        let mut scores = sample(8.0, 2.0, 1000, 30);
        scores.extend(sample(2.0, 8.0, 1000, 31));
        let clean: Vec<bool> = (0..2000).map(|i| i < 1000).collect();
        let init = BetaMixture::new((5.0, 3.0), (3.0, 5.0));
        let fit = em_fit(&scores, &init, DEFAULT_STOP, DEFAULT_MAX_ITERS).unwrap();
        let sel = purify(scores.len(), &fit, |i| scores[i]).unwrap();
        let stats = selection_stats(&sel, &clean);
        assert!(stats.f1 >= 0.95, "{stats:?}");
    }

    #[test]
    fn posterior_monotone_for_dominating_clean() {
        let mut scores = sample(7.0, 2.0, 800, 40);
        scores.extend(sample(2.0, 5.0, 800, 41));
        let init = moment_match_init(&sample(7.0, 2.0, 30, 42), &sample(2.0, 5.0, 30, 43)).unwrap();
        let fit = em_fit(&scores, &init, DEFAULT_STOP, DEFAULT_MAX_ITERS).unwrap();
        let mut prev = 0.0;
        for k in 1..10_000 {
            let p = fit.posterior_clean(clamp_score(k as f64 / 10_000.0).unwrap()).unwrap();
            assert!(p >= prev - 1e-15);
            prev = p;
        }
    }
}
