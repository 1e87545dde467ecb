//! zCDP accounting and the two private mechanisms.
//!
//! All budgets are in zCDP units (ρ). A round with Gaussian noise scale σ
//! on counts and exponential-mechanism scale τ costs 1/(2σ²) + τ²/8, and
//! rounds compose linearly. The (ε,δ) budget is converted to ρ up front via
//! the bound ε = ρ + 2√(ρ·ln(1/δ)).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::MarginalVector;

/// Slack for float drift when summing many small charges.
const BUDGET_SLACK: f64 = 1e-12;

/// Tracks ρ spent against a fixed total, one labeled entry per charge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccountant {
    rho_total: f64,
    rho_spent: f64,
    ledger: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub rho: f64,
}

impl PrivacyAccountant {
    pub fn new(rho_total: f64) -> Result<Self> {
        if !(rho_total.is_finite() && rho_total > 0.0) {
            return Err(Error::config(format!(
                "total privacy budget must be positive, got {rho_total}"
            )));
        }
        Ok(PrivacyAccountant {
            rho_total,
            rho_spent: 0.0,
            ledger: Vec::new(),
        })
    }

    pub fn rho_total(&self) -> f64 {
        self.rho_total
    }

    pub fn rho_spent(&self) -> f64 {
        self.rho_spent
    }

    pub fn remaining(&self) -> f64 {
        (self.rho_total - self.rho_spent).max(0.0)
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    /// Appends a labeled charge; refuses overdrafts, leaving state unchanged.
    pub fn charge(&mut self, label: &str, rho: f64) -> Result<()> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::numeric(format!(
                "charge `{label}` must be a nonnegative real, got {rho}"
            )));
        }
        if self.rho_spent + rho > self.rho_total + BUDGET_SLACK {
            return Err(Error::BudgetExhausted {
                label: label.to_string(),
                requested: rho,
                remaining: self.remaining(),
            });
        }
        self.rho_spent += rho;
        self.ledger.push(LedgerEntry {
            label: label.to_string(),
            rho,
        });
        Ok(())
    }

    /// True when a further charge of `rho` would be within budget.
    pub fn can_afford(&self, rho: f64) -> bool {
        self.rho_spent + rho <= self.rho_total + BUDGET_SLACK
    }
}

/// Per-round noise scales. `sigma` is the Gaussian std on counts, `tau`
/// the exponential-mechanism scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma: f64,
    pub tau: f64,
}

impl NoiseParams {
    /// zCDP cost of one round at these scales: 1/(2σ²) + τ²/8.
    pub fn round_cost(&self) -> f64 {
        gaussian_cost(self.sigma) + exp_mech_cost(self.tau)
    }
}

/// zCDP cost of one Gaussian measurement at scale σ.
pub fn gaussian_cost(sigma: f64) -> f64 {
    1.0 / (2.0 * sigma * sigma)
}

/// zCDP cost of one exponential-mechanism selection at scale τ.
pub fn exp_mech_cost(tau: f64) -> f64 {
    tau * tau / 8.0
}

/// The ε implied by ρ-zCDP at a given δ.
pub fn rho_to_eps(rho: f64, delta: f64) -> f64 {
    rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt()
}

/// Largest ρ whose implied ε does not exceed the target, by bisection to
/// relative tolerance 1e-12. Monotone increasing in both arguments. The
/// lower bracket is returned, so the implied ε never exceeds the target.
pub fn eps_delta_to_rho(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(format!("delta must lie in (0,1), got {delta}")));
    }
    // rho_to_eps(rho) >= rho, so rho = epsilon bounds the root from above.
    // The tolerance tracks hi so tiny roots keep full relative precision.
    let mut lo = 0.0f64;
    let mut hi = epsilon;
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if rho_to_eps(mid, delta) <= epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Splits a round budget: fraction `alpha` to measurement, the rest to
/// selection. Recomposes exactly: 1/(2σ²) = α·ρ and τ²/8 = (1−α)·ρ.
pub fn calibrate_round(rho_round: f64, alpha: f64) -> Result<NoiseParams> {
    if !(rho_round.is_finite() && rho_round > 0.0) {
        return Err(Error::config(format!(
            "round budget must be positive, got {rho_round}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0,1), got {alpha}")));
    }
    Ok(NoiseParams {
        sigma: (1.0 / (2.0 * alpha * rho_round)).sqrt(),
        tau: (8.0 * (1.0 - alpha) * rho_round).sqrt(),
    })
}

/// Adds N(0, σ²) noise to every cell of a counts-space marginal, charging
/// 1/(2σ²). Noisy values are not clipped; negatives pass through.
pub fn gaussian_measure<R: Rng>(
    v: &MarginalVector,
    sigma: f64,
    accountant: &mut PrivacyAccountant,
    label: &str,
    rng: &mut R,
) -> Result<MarginalVector> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    accountant.charge(label, gaussian_cost(sigma))?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::numeric(e.to_string()))?;
    let values = v.values.iter().map(|&x| x + normal.sample(rng)).collect();
    Ok(MarginalVector::new(v.query.clone(), values, v.space))
}

/// Samples index i with probability proportional to exp(τ·s_i/(2Δ)),
/// charging τ²/8. Max-subtraction keeps the exponentials in range.
pub fn exp_mech_select<R: Rng>(
    scores: &[f64],
    tau: f64,
    sensitivity: f64,
    accountant: &mut PrivacyAccountant,
    label: &str,
    rng: &mut R,
) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::config("selection over an empty score list"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    if !(sensitivity.is_finite() && sensitivity > 0.0) {
        return Err(Error::config(format!(
            "sensitivity must be positive, got {sensitivity}"
        )));
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::numeric(format!("non-finite selection score {bad}")));
    }
    accountant.charge(label, exp_mech_cost(tau))?;
    let scale = tau / (2.0 * sensitivity);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|&s| (scale * (s - max)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return Ok(i);
        }
    }
    // Float underrun in the subtraction loop; the last index is the draw.
    Ok(weights.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{MarginalQuery, Space};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn conversion_satisfies_defining_equation() {
        let rho = eps_delta_to_rho(1.0, 1e-6).unwrap();
        assert!((rho_to_eps(rho, 1e-6) - 1.0).abs() < 1e-9);
        // Independent bisection oracle for eps=1, delta=1e-6 froze this value.
        assert!((rho - 0.0174689047691).abs() < 1e-9, "rho = {rho}");
    }

    #[test]
    fn conversion_is_monotone() {
        let r1 = eps_delta_to_rho(0.5, 1e-6).unwrap();
        let r2 = eps_delta_to_rho(1.0, 1e-6).unwrap();
        let r3 = eps_delta_to_rho(1.0, 1e-3).unwrap();
        assert!(r1 < r2);
        assert!(r2 < r3);
    }

    #[test]
    fn tiny_epsilon_gives_tiny_rho() {
        let rho = eps_delta_to_rho(1e-6, 1e-6).unwrap();
        assert!(rho > 0.0 && rho < 1e-9);
    }

    #[test]
    fn calibrate_recomposes_round_budget() {
        // Hand oracle: rho=0.005, alpha=0.9 gives sigma=sqrt(1/0.009),
        // tau=sqrt(0.004).
        let p = calibrate_round(0.005, 0.9).unwrap();
        assert!((p.sigma - (1.0f64 / 0.009).sqrt()).abs() < 1e-12);
        assert!((p.tau - 0.004f64.sqrt()).abs() < 1e-12);
        assert!((p.round_cost() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn even_split_balances_costs() {
        let p = calibrate_round(0.02, 0.5).unwrap();
        assert!((gaussian_cost(p.sigma) - exp_mech_cost(p.tau)).abs() < 1e-15);
    }

    #[test]
    fn doubling_budget_rescales_by_sqrt2() {
        let a = calibrate_round(0.01, 0.9).unwrap();
        let b = calibrate_round(0.02, 0.9).unwrap();
        assert!((b.sigma - a.sigma / 2f64.sqrt()).abs() < 1e-12);
        assert!((b.tau - a.tau * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ledger_tracks_linear_composition() {
        let mut acc = PrivacyAccountant::new(1.0).unwrap();
        acc.charge("a", 0.3).unwrap();
        acc.charge("b", 0.4).unwrap();
        assert!((acc.remaining() - 0.3).abs() < 1e-15);
        let ledger_sum: f64 = acc.ledger().iter().map(|e| e.rho).sum();
        assert_eq!(ledger_sum, acc.rho_spent());
        // Zero charges append but do not spend.
        acc.charge("noop", 0.0).unwrap();
        assert!((acc.rho_spent() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn overdraft_refused_and_state_unchanged() {
        let mut acc = PrivacyAccountant::new(0.5).unwrap();
        acc.charge("a", 0.4).unwrap();
        let err = acc.charge("big", 0.2).unwrap_err();
        match err {
            Error::BudgetExhausted { label, remaining, .. } => {
                assert_eq!(label, "big");
                assert!((remaining - 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected error {other}"),
        }
        assert!((acc.rho_spent() - 0.4).abs() < 1e-15);
        assert_eq!(acc.ledger().len(), 1);
    }

    fn counts(values: Vec<f64>) -> MarginalVector {
        MarginalVector::new(MarginalQuery::new(vec![0]), values, Space::Counts)
    }

    #[test]
    fn gaussian_measure_charges_and_is_deterministic() {
        let mut acc = PrivacyAccountant::new(1.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let out = gaussian_measure(&counts(vec![1.0, 2.0]), 10.0, &mut acc, "m", &mut rng).unwrap();
        assert!((acc.rho_spent() - 0.005).abs() < 1e-15);
        let mut acc2 = PrivacyAccountant::new(1.0).unwrap();
        let mut rng2 = ChaCha20Rng::seed_from_u64(7);
        let out2 =
            gaussian_measure(&counts(vec![1.0, 2.0]), 10.0, &mut acc2, "m", &mut rng2).unwrap();
        assert_eq!(out.values, out2.values);
    }

    #[test]
    fn huge_sigma_costs_almost_nothing_and_stays_in_range() {
        let mut acc = PrivacyAccountant::new(1.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let out =
            gaussian_measure(&counts(vec![1.0, 2.0]), 1e12, &mut acc, "m", &mut rng).unwrap();
        assert!(acc.rho_spent() < 1e-23);
        for v in &out.values {
            assert!(v.abs() <= 5e12);
        }
    }

    #[test]
    fn gaussian_noise_matches_moments() {
        // Statistical oracle: over 1e5 draws on one cell, the sample mean
        // stays within 4 sigma/sqrt(N) of the count and the variance within
        // 5% of sigma^2.
        let sigma = 3.0;
        let n = 100_000usize;
        let mut acc = PrivacyAccountant::new(1e9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let base = counts(vec![10.0]);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let out = gaussian_measure(&base, sigma, &mut acc, "rep", &mut rng).unwrap();
            let noise = out.values[0] - 10.0;
            sum += noise;
            sum_sq += noise * noise;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt(), "mean = {mean}");
        assert!((var - sigma * sigma).abs() < 0.05 * sigma * sigma, "var = {var}");
    }

    #[test]
    fn exp_mech_matches_softmax_frequencies() {
        // Analytic oracle: scores [0,1,2,3], tau=1, sensitivity=1 give
        // probabilities proportional to exp([0, 0.5, 1.0, 1.5]).
        let scores = [0.0, 1.0, 2.0, 3.0];
        let weights: Vec<f64> = [0.0f64, 0.5, 1.0, 1.5].iter().map(|e: &f64| e.exp()).collect();
        let total: f64 = weights.iter().sum();
        let expect: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let n = 100_000usize;
        let mut acc = PrivacyAccountant::new(1e9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut hits = [0usize; 4];
        for _ in 0..n {
            let i = exp_mech_select(&scores, 1.0, 1.0, &mut acc, "s", &mut rng).unwrap();
            hits[i] += 1;
        }
        let tv: f64 = hits
            .iter()
            .zip(&expect)
            .map(|(&h, &p)| (h as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
        assert!((acc.rho_spent() - n as f64 / 8.0).abs() < 1e-6);
    }

    #[test]
    fn exp_mech_is_shift_invariant() {
        let base = [0.0, 1.0, 2.0];
        let shifted: Vec<f64> = base.iter().map(|s| s + 1e6).collect();
        let n = 100_000usize;
        let freq = |scores: &[f64]| {
            let mut acc = PrivacyAccountant::new(1e9).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(11);
            let mut hits = vec![0usize; scores.len()];
            for _ in 0..n {
                hits[exp_mech_select(scores, 2.0, 1.0, &mut acc, "s", &mut rng).unwrap()] += 1;
            }
            hits.iter().map(|&h| h as f64 / n as f64).collect::<Vec<_>>()
        };
        let f1 = freq(&base);
        let f2 = freq(&shifted);
        let tv: f64 = f1.iter().zip(&f2).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn huge_tau_picks_the_argmax() {
        let scores = [0.0, 5.0, 1.0];
        let mut acc = PrivacyAccountant::new(1e12).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..100 {
            let i = exp_mech_select(&scores, 1e4, 1.0, &mut acc, "s", &mut rng).unwrap();
            assert_eq!(i, 1);
        }
    }

    #[test]
    fn equal_scores_are_roughly_uniform() {
        let scores = [2.0; 5];
        let n = 50_000usize;
        let mut acc = PrivacyAccountant::new(1e9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut hits = [0usize; 5];
        for _ in 0..n {
            hits[exp_mech_select(&scores, 1.0, 1.0, &mut acc, "s", &mut rng).unwrap()] += 1;
        }
        for &h in &hits {
            let f = h as f64 / n as f64;
            assert!((f - 0.2).abs() < 0.02, "frequency {f}");
        }
    }
}
