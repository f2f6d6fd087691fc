//! Learning-rate schedules: deterministic sequences and the adaptive rule
//! `eta_t = alpha / (beta + sum_{k<t} |h_k|^2)^(1/2 + epsilon)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CompensatedSum;

/// How a deterministic sequence is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ScheduleForm {
    /// `min(1, c / (t + 1)^p)`
    PowerLaw { c: f64, p: f64 },
    /// Explicit values; iterations past the end reuse the last entry.
    Explicit { values: Vec<f64> },
}

/// A deterministic learning-rate sequence `gamma_t`, optionally divided by a
/// constant factor (used by the confined update `gamma_t / phi`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicSchedule {
    pub form: ScheduleForm,
    #[serde(default = "one")]
    pub divisor: f64,
}

fn one() -> f64 {
    1.0
}

/// Outcome of the Robbins-Monro check `sum gamma = inf`, `sum gamma^2 < inf`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobbinsMonro {
    pub valid: bool,
    pub reason: String,
}

impl DeterministicSchedule {
    pub fn power_law(c: f64, p: f64) -> Result<Self> {
        let s = Self { form: ScheduleForm::PowerLaw { c, p }, divisor: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn explicit(values: Vec<f64>) -> Result<Self> {
        let s = Self { form: ScheduleForm::Explicit { values }, divisor: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.divisor.is_finite() && self.divisor > 0.0) {
            return Err(Error::InvalidHyperparameters(format!("schedule divisor {} must be > 0", self.divisor)));
        }
        match &self.form {
            ScheduleForm::PowerLaw { c, p } => {
                if !(c.is_finite() && *c > 0.0) {
                    return Err(Error::InvalidHyperparameters(format!("power-law constant c = {c} must be > 0")));
                }
                if !p.is_finite() {
                    return Err(Error::InvalidHyperparameters("power-law exponent must be finite".into()));
                }
            }
            ScheduleForm::Explicit { values } => {
                if values.is_empty() {
                    return Err(Error::InvalidHyperparameters("explicit schedule is empty".into()));
                }
                if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
                    return Err(Error::InvalidHyperparameters(format!("learning rate {v} is outside (0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// The same sequence divided by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let s = Self { form: self.form.clone(), divisor: self.divisor * factor };
        s.validate()?;
        Ok(s)
    }

    fn raw(&self, t: usize) -> f64 {
        match &self.form {
            ScheduleForm::PowerLaw { c, p } => (c / ((t + 1) as f64).powf(*p)).min(1.0),
            ScheduleForm::Explicit { values } => values[t.min(values.len() - 1)],
        }
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.raw(t) / self.divisor
    }

    pub fn validate_robbins_monro(&self) -> RobbinsMonro {
        match &self.form {
            ScheduleForm::PowerLaw { p, .. } => {
                if *p <= 0.5 {
                    RobbinsMonro { valid: false, reason: format!("sum of squares diverges (2p = {} <= 1)", 2.0 * p) }
                } else if *p > 1.0 {
                    RobbinsMonro { valid: false, reason: format!("sum of rates converges (p = {p} > 1)") }
                } else {
                    RobbinsMonro { valid: true, reason: format!("p-series: 1/2 < p = {p} <= 1") }
                }
            }
            ScheduleForm::Explicit { .. } => {
                RobbinsMonro { valid: false, reason: "finite horizon only: an explicit list cannot diverge".into() }
            }
        }
    }

    /// `max_t gamma_t`.
    pub fn max_gamma(&self) -> f64 {
        let raw = match &self.form {
            ScheduleForm::PowerLaw { c, p } => {
                if *p >= 0.0 {
                    c.min(1.0)
                } else {
                    1.0
                }
            }
            ScheduleForm::Explicit { values } => values.iter().cloned().fold(0.0, f64::max),
        };
        raw / self.divisor
    }

    /// `sum_t gamma_t^2` (infinite when it diverges).
    pub fn sum_of_squares(&self) -> f64 {
        self.square_tail(0)
    }

    /// `sum_{k >= t} gamma_k^2`. Explicit lists sum over their stored entries.
    pub fn square_tail(&self, t: usize) -> f64 {
        let d2 = self.divisor * self.divisor;
        match &self.form {
            ScheduleForm::Explicit { values } => {
                let mut s = CompensatedSum::new();
                values.iter().skip(t).for_each(|v| s.add(v * v));
                s.value() / d2
            }
            ScheduleForm::PowerLaw { c, p } => {
                if *p <= 0.5 {
                    return f64::INFINITY;
                }
                // direct sum over the clamped head and a fixed window, then an
                // Euler-Maclaurin remainder for f(k) = c^2 (k + 1)^(-2p)
                let q = 2.0 * p;
                let clamp_end = if *c > 1.0 { c.powf(1.0 / p).ceil() as usize } else { 0 };
                let cut = t.max(clamp_end) + 4096;
                let mut s = CompensatedSum::new();
                for k in (t..cut).rev() {
                    let g = self.raw(k);
                    s.add(g * g);
                }
                let x = (cut + 1) as f64;
                let c2 = c * c;
                let f = c2 * x.powf(-q);
                let integral = c2 * x.powf(1.0 - q) / (q - 1.0);
                let d1 = -q * c2 * x.powf(-q - 1.0);
                let d3 = -q * (q + 1.0) * (q + 2.0) * c2 * x.powf(-q - 3.0);
                s.add(integral + f / 2.0 - d1 / 12.0 + d3 / 720.0);
                s.value() / d2
            }
        }
    }
}

/// Adaptive rate state for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    alpha: f64,
    beta: f64,
    epsilon: f64,
    accumulated: CompensatedSum,
}

/// Hyperparameters of the adaptive rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 1.0, epsilon: 0.25 }
    }
}

impl AdaptiveParams {
    pub fn validate(&self) -> Result<()> {
        let AdaptiveParams { alpha, beta, epsilon } = *self;
        if !(epsilon > 0.0 && epsilon <= 0.5) {
            return Err(Error::InvalidHyperparameters(format!("epsilon = {epsilon} must lie in (0, 1/2]")));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidHyperparameters(format!("beta = {beta} must be > 0")));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidHyperparameters(format!("alpha = {alpha} must be > 0")));
        }
        let cap = beta.powf(0.5 + epsilon);
        if alpha > cap {
            return Err(Error::InvalidHyperparameters(format!("alpha = {alpha} exceeds beta^(1/2 + epsilon) = {cap}")));
        }
        Ok(())
    }

    /// `eta_0 = alpha / beta^(1/2 + epsilon)`.
    pub fn eta0(&self) -> f64 {
        self.alpha / self.beta.powf(0.5 + self.epsilon)
    }

    /// Upper bound `alpha^2 / (2 epsilon beta^(2 epsilon))` on
    /// `sum_t eta_{t+1}^2 |h_t|^2`.
    pub fn weighted_square_bound(&self) -> f64 {
        self.alpha * self.alpha / (2.0 * self.epsilon * self.beta.powf(2.0 * self.epsilon))
    }
}

impl AdaptiveState {
    pub fn new(params: AdaptiveParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { alpha: params.alpha, beta: params.beta, epsilon: params.epsilon, accumulated: CompensatedSum::new() })
    }

    pub fn params(&self) -> AdaptiveParams {
        AdaptiveParams { alpha: self.alpha, beta: self.beta, epsilon: self.epsilon }
    }

    pub fn accumulated(&self) -> f64 {
        self.accumulated.value()
    }

    /// Current step size from the gradients accumulated so far.
    pub fn eta(&self) -> f64 {
        self.alpha / (self.beta + self.accumulated.value()).powf(0.5 + self.epsilon)
    }

    pub fn update(&mut self, grad_norm_sq: f64) -> Result<()> {
        if grad_norm_sq < 0.0 || grad_norm_sq.is_nan() {
            return Err(Error::NegativeInput(grad_norm_sq));
        }
        self.accumulated.add(grad_norm_sq);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(alpha: f64, beta: f64, epsilon: f64) -> AdaptiveState {
        AdaptiveState::new(AdaptiveParams { alpha, beta, epsilon }).unwrap()
    }

    #[test]
    fn power_law_values() {
        let s = DeterministicSchedule::power_law(0.5, 0.75).unwrap();
        assert_eq!(s.gamma(0), 0.5);
        assert_eq!(s.gamma(15), 0.0625);
        let big = DeterministicSchedule::power_law(4.0, 1.0).unwrap();
        assert_eq!(big.gamma(0), 1.0);
        assert_eq!(big.gamma(7), 0.5);
    }

    #[test]
    fn explicit_values() {
        let s = DeterministicSchedule::explicit(vec![0.1, 0.05]).unwrap();
        assert_eq!(s.gamma(1), 0.05);
        assert!(DeterministicSchedule::explicit(vec![0.1, 1.5]).is_err());
        assert!(DeterministicSchedule::explicit(vec![]).is_err());
        assert!(!s.validate_robbins_monro().valid);
        assert!((s.sum_of_squares() - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn robbins_monro_check() {
        let check = |p| DeterministicSchedule::power_law(0.5, p).unwrap().validate_robbins_monro().valid;
        assert!(check(0.75));
        assert!(check(1.0));
        assert!(!check(0.4));
        assert!(!check(0.5));
        assert!(!check(1.2));
    }

    #[test]
    fn square_tail_against_partial_sum() {
        // independent oracle: 10^6-term partial sum plus the integral of the remainder
        let s = DeterministicSchedule::power_law(0.5, 0.75).unwrap();
        let n = 1_000_000usize;
        let mut partial = 0.0;
        for k in (0..n).rev() {
            partial += 0.25 / ((k + 1) as f64).powf(1.5);
        }
        let oracle = partial + 0.25 * 2.0 / ((n as f64) + 0.5).sqrt();
        assert!((s.sum_of_squares() - oracle).abs() < 1e-9);
        // 0.25 * zeta(3/2)
        assert!((s.sum_of_squares() - 0.25 * 2.612_375_348_685_488).abs() < 1e-10);
        let tail10 = s.square_tail(10);
        let head: f64 = (0..10).map(|k| s.gamma(k).powi(2)).sum();
        assert!((s.sum_of_squares() - head - tail10).abs() < 1e-12);
        assert!(DeterministicSchedule::power_law(0.5, 0.5).unwrap().sum_of_squares().is_infinite());
    }

    #[test]
    fn scaled_schedule() {
        let s = DeterministicSchedule::power_law(0.5, 0.75).unwrap().scaled(4.0).unwrap();
        assert_eq!(s.gamma(15), 0.0625 / 4.0);
        assert_eq!(s.max_gamma(), 0.125);
        let base = DeterministicSchedule::power_law(0.5, 0.75).unwrap();
        assert!((s.sum_of_squares() - base.sum_of_squares() / 16.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_values() {
        assert_eq!(state(1.0, 4.0, 0.5).eta(), 0.25);
        let mut s = state(1.0, 1.0, 0.5);
        s.update(3.0).unwrap();
        assert_eq!(s.eta(), 0.25);
        let mut s = state(1.0, 1.0, 0.25);
        s.update(15.0).unwrap();
        assert_eq!(s.eta(), 0.125);
    }

    #[test]
    fn adaptive_validation() {
        let bad = |a, b, e| AdaptiveState::new(AdaptiveParams { alpha: a, beta: b, epsilon: e }).is_err();
        assert!(bad(1.0, 1.0, 0.0));
        assert!(bad(1.0, 1.0, 0.6));
        assert!(bad(2.0, 1.0, 0.5));
        assert!(bad(0.0, 1.0, 0.5));
        assert!(!bad(0.5, 1.0, 0.25));
        let mut s = state(0.5, 1.0, 0.25);
        assert_eq!(s.update(-1.0), Err(Error::NegativeInput(-1.0)));
    }

    #[test]
    fn adaptive_updates() {
        let mut s = state(0.5, 1.0, 0.25);
        let e0 = s.eta();
        s.update(0.0).unwrap();
        assert_eq!(s.eta(), e0);
        let mut a = state(1.0, 1.0, 0.5);
        a.update(1.0).unwrap();
        a.update(3.0).unwrap();
        let mut b = state(1.0, 1.0, 0.5);
        b.update(4.0).unwrap();
        assert_eq!(a.eta(), b.eta());
        assert_eq!(AdaptiveParams::default().weighted_square_bound(), 0.5);
    }
}
