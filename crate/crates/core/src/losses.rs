//! Training objectives as pure numerical functions.
//!
//! Both objectives operate on externally supplied token log-probabilities;
//! there is no model and no optimizer here. Sequence log-probability is the
//! sum of token log-probabilities (autoregressive factorization), and the
//! preference margin is
//!
//! ```text
//! m = beta * (log pi(y_a|x) - log ref(y_a|x))
//!   - beta * (log pi(y_r|x) - log ref(y_r|x))
//! ```
//!
//! with loss `-log sigmoid(m)` averaged over the batch. The log-sigmoid is
//! computed through a softplus of the negated argument so margins of +-100
//! neither overflow nor underflow.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("a token sequence needs at least one log-probability")]
    EmptySequence,
    #[error("a preference batch needs at least one item")]
    EmptyBatch,
    #[error("log-probability {0} is not finite")]
    NonFinite(f64),
    #[error("log-probability {0} exceeds 0 (probabilities cannot exceed 1)")]
    PositiveLogProb(f64),
    #[error("policy and reference sequences must align: {0} vs {1} tokens")]
    LengthMismatch(usize, usize),
}

/// Per-token log-probabilities of one sequence: every entry is finite and
/// at most zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProbs {
    values: Vec<f64>,
}

impl TokenLogProbs {
    pub fn new(values: Vec<f64>) -> Result<Self, LossError> {
        if values.is_empty() {
            return Err(LossError::EmptySequence);
        }
        for &v in &values {
            if !v.is_finite() {
                return Err(LossError::NonFinite(v));
            }
            if v > 0.0 {
                return Err(LossError::PositiveLogProb(v));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sequence log-probability: the sum of token log-probabilities.
    pub fn sequence_log_prob(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// One preference example: policy and frozen-reference log-probabilities
/// for the accepted and the rejected solution of the same question.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceItem {
    policy_accepted: TokenLogProbs,
    policy_rejected: TokenLogProbs,
    ref_accepted: TokenLogProbs,
    ref_rejected: TokenLogProbs,
}

impl PreferenceItem {
    pub fn new(
        policy_accepted: TokenLogProbs,
        policy_rejected: TokenLogProbs,
        ref_accepted: TokenLogProbs,
        ref_rejected: TokenLogProbs,
    ) -> Result<Self, LossError> {
        if policy_accepted.len() != ref_accepted.len() {
            return Err(LossError::LengthMismatch(
                policy_accepted.len(),
                ref_accepted.len(),
            ));
        }
        if policy_rejected.len() != ref_rejected.len() {
            return Err(LossError::LengthMismatch(
                policy_rejected.len(),
                ref_rejected.len(),
            ));
        }
        Ok(Self {
            policy_accepted,
            policy_rejected,
            ref_accepted,
            ref_rejected,
        })
    }

    pub fn policy_accepted(&self) -> &TokenLogProbs {
        &self.policy_accepted
    }

    pub fn policy_rejected(&self) -> &TokenLogProbs {
        &self.policy_rejected
    }

    pub fn ref_accepted(&self) -> &TokenLogProbs {
        &self.ref_accepted
    }

    pub fn ref_rejected(&self) -> &TokenLogProbs {
        &self.ref_rejected
    }

    /// The preference margin for this item at inverse temperature `beta`.
    pub fn margin(&self, beta: f64) -> f64 {
        let accepted_ratio =
            self.policy_accepted.sequence_log_prob() - self.ref_accepted.sequence_log_prob();
        let rejected_ratio =
            self.policy_rejected.sequence_log_prob() - self.ref_rejected.sequence_log_prob();
        beta * accepted_ratio - beta * rejected_ratio
    }
}

/// A batch of preference examples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreferenceBatch {
    pub items: Vec<PreferenceItem>,
}

impl PreferenceBatch {
    pub fn new(items: Vec<PreferenceItem>) -> Self {
        Self { items }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
}

impl DpoConfig {
    pub fn new(beta: f64) -> Result<Self, LossError> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(LossError::NonFinite(beta));
        }
        Ok(Self { beta })
    }
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.1 }
    }
}

/// ln(1 + e^x) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Next-token-prediction loss: the negated sum of token log-probabilities.
/// Zero exactly when every token had probability one.
pub fn ntp_loss(seq: &TokenLogProbs) -> f64 {
    -seq.sequence_log_prob()
}

/// Preference loss: mean over items of `-log sigmoid(margin)`.
pub fn dpo_loss(batch: &PreferenceBatch, cfg: &DpoConfig) -> Result<f64, LossError> {
    if batch.items.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let total: f64 = batch
        .items
        .iter()
        .map(|item| softplus(-item.margin(cfg.beta)))
        .sum();
    Ok(total / batch.items.len() as f64)
}

/// Gradients of [`dpo_loss`] with respect to each input log-probability,
/// one entry per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemGradients {
    pub policy_accepted: Vec<f64>,
    pub policy_rejected: Vec<f64>,
    /// Always zero: the reference model is frozen.
    pub ref_accepted: Vec<f64>,
    /// Always zero: the reference model is frozen.
    pub ref_rejected: Vec<f64>,
}

/// Analytic gradient of the batch loss.
///
/// For an item with margin `m` in a batch of `N`, every accepted policy
/// token receives `-(beta/N) * (1 - sigmoid(m))` and every rejected policy
/// token `+(beta/N) * (1 - sigmoid(m))`; reference gradients are zero.
pub fn dpo_grad(batch: &PreferenceBatch, cfg: &DpoConfig) -> Result<Vec<ItemGradients>, LossError> {
    if batch.items.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = batch.items.len() as f64;
    Ok(batch
        .items
        .iter()
        .map(|item| {
            // 1 - sigmoid(m) computed as sigmoid(-m) keeps precision when m
            // is large and positive.
            let slope = sigmoid(-item.margin(cfg.beta)) * cfg.beta / n;
            ItemGradients {
                policy_accepted: vec![-slope; item.policy_accepted.len()],
                policy_rejected: vec![slope; item.policy_rejected.len()],
                ref_accepted: vec![0.0; item.ref_accepted.len()],
                ref_rejected: vec![0.0; item.ref_rejected.len()],
            }
        })
        .collect())
}

pub mod check;

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(values: &[f64]) -> TokenLogProbs {
        TokenLogProbs::new(values.to_vec()).unwrap()
    }

    fn item(pa: &[f64], pr: &[f64], ra: &[f64], rr: &[f64]) -> PreferenceItem {
        PreferenceItem::new(seq(pa), seq(pr), seq(ra), seq(rr)).unwrap()
    }

    const TOL: f64 = 1e-12;

    #[test]
    fn ntp_of_certain_tokens_is_zero() {
        assert_eq!(ntp_loss(&seq(&[0.0, 0.0, 0.0])), 0.0);
    }

    #[test]
    fn ntp_of_three_half_probability_tokens_is_three_ln_two() {
        let l = 0.5f64.ln();
        let loss = ntp_loss(&seq(&[l, l, l]));
        assert!((loss - 3.0 * 2.0f64.ln()).abs() < TOL);
        assert!((loss - 2.0794415416798357).abs() < 1e-9);
    }

    #[test]
    fn ntp_of_single_token_negates() {
        assert_eq!(ntp_loss(&seq(&[-1.0])), 1.0);
    }

    #[test]
    fn ntp_is_additive_over_concatenation() {
        let a = seq(&[-0.3, -1.7]);
        let b = seq(&[-2.2]);
        let joined = seq(&[-0.3, -1.7, -2.2]);
        assert!((ntp_loss(&joined) - (ntp_loss(&a) + ntp_loss(&b))).abs() < TOL);
    }

    #[test]
    fn token_log_probs_reject_bad_values() {
        assert_eq!(TokenLogProbs::new(vec![]), Err(LossError::EmptySequence));
        assert_eq!(
            TokenLogProbs::new(vec![f64::NAN]),
            Err(LossError::NonFinite(f64::NAN))
        );
        assert_eq!(
            TokenLogProbs::new(vec![0.1]),
            Err(LossError::PositiveLogProb(0.1))
        );
    }

    #[test]
    fn dpo_equal_policies_give_ln_two() {
        let batch = PreferenceBatch::new(vec![item(
            &[-0.5, -1.5],
            &[-2.0],
            &[-0.5, -1.5],
            &[-2.0],
        )]);
        for beta in [0.1, 1.0, 7.5] {
            let loss = dpo_loss(&batch, &DpoConfig::new(beta).unwrap()).unwrap();
            assert!((loss - 2.0f64.ln()).abs() < TOL, "beta={beta}: {loss}");
        }
    }

    #[test]
    fn dpo_ln3_margin_gives_ln_four_thirds() {
        let ln3 = 3.0f64.ln();
        let batch = PreferenceBatch::new(vec![item(
            &[-0.2],
            &[-1.0],
            &[-0.2 - ln3],
            &[-1.0],
        )]);
        let loss = dpo_loss(&batch, &DpoConfig::new(1.0).unwrap()).unwrap();
        assert!((loss - (4.0f64 / 3.0).ln()).abs() < TOL);
        assert!((loss - 0.2876820724517809).abs() < 1e-9);
    }

    #[test]
    fn dpo_half_beta_symmetric_ratios() {
        // accepted log-ratio 2.0, rejected -2.0, beta 0.5 -> margin 2.
        let batch = PreferenceBatch::new(vec![item(&[-0.5], &[-2.5], &[-2.5], &[-0.5])]);
        let loss = dpo_loss(&batch, &DpoConfig::new(0.5).unwrap()).unwrap();
        assert!((loss - (1.0 + (-2.0f64).exp()).ln()).abs() < TOL);
        assert!((loss - 0.1269280110429726).abs() < 1e-9);
    }

    #[test]
    fn dpo_rejects_empty_batches() {
        let batch = PreferenceBatch::default();
        assert_eq!(
            dpo_loss(&batch, &DpoConfig::default()),
            Err(LossError::EmptyBatch)
        );
        assert!(dpo_grad(&batch, &DpoConfig::default()).is_err());
    }

    #[test]
    fn dpo_stays_finite_and_monotone_at_extreme_margins() {
        // margin +-100 via widely separated ratios.
        let hi = PreferenceBatch::new(vec![item(&[-1.0], &[-101.0], &[-101.0], &[-1.0])]);
        let lo = PreferenceBatch::new(vec![item(&[-101.0], &[-1.0], &[-1.0], &[-101.0])]);
        let cfg = DpoConfig::new(0.5).unwrap();
        let loss_hi = dpo_loss(&hi, &cfg).unwrap();
        let loss_lo = dpo_loss(&lo, &cfg).unwrap();
        assert!(loss_hi.is_finite() && loss_hi > 0.0);
        assert!(loss_lo.is_finite() && loss_lo > loss_hi);
        assert!((loss_lo - 100.0).abs() < 1e-9, "softplus(100) ~ 100");
    }

    #[test]
    fn dpo_bounds_at_margin_twenty() {
        let cfg = DpoConfig::new(1.0).unwrap();
        // margin +20: accepted log-ratio 20, rejected 0.
        let plus = PreferenceBatch::new(vec![item(&[-1.0], &[-1.0], &[-21.0], &[-1.0])]);
        let near_zero = dpo_loss(&plus, &cfg).unwrap();
        assert!(near_zero > 0.0 && near_zero < (-20.0f64).exp() * 1.01);
        // margin -20: accepted log-ratio -20, rejected 0.
        let minus = PreferenceBatch::new(vec![item(&[-21.0], &[-1.0], &[-1.0], &[-1.0])]);
        let large = dpo_loss(&minus, &cfg).unwrap();
        assert!(large > 20.0);
    }

    #[test]
    fn dpo_mean_reduces_over_the_batch() {
        let ln3 = 3.0f64.ln();
        let item_zero = item(&[-1.0], &[-1.0], &[-1.0], &[-1.0]);
        let item_ln3 = item(&[-0.2], &[-1.0], &[-0.2 - ln3], &[-1.0]);
        let batch = PreferenceBatch::new(vec![item_zero, item_ln3]);
        let loss = dpo_loss(&batch, &DpoConfig::new(1.0).unwrap()).unwrap();
        let expected = (2.0f64.ln() + (4.0f64 / 3.0).ln()) / 2.0;
        assert!((loss - expected).abs() < TOL);
    }

    #[test]
    fn beta_scales_the_margin() {
        let base = item(&[-0.4, -0.7], &[-2.0], &[-1.1], &[-0.3]);
        let m1 = base.margin(1.0);
        for c in [0.1, 0.5, 2.0, 10.0] {
            let batch = PreferenceBatch::new(vec![base.clone()]);
            let loss = dpo_loss(&batch, &DpoConfig::new(c).unwrap()).unwrap();
            assert!((loss - softplus(-c * m1)).abs() < TOL, "c={c}");
        }
    }

    #[test]
    fn grad_at_zero_margin_is_half_beta() {
        let batch = PreferenceBatch::new(vec![item(
            &[-0.5, -1.5],
            &[-2.0],
            &[-0.5, -1.5],
            &[-2.0],
        )]);
        let grads = dpo_grad(&batch, &DpoConfig::new(1.0).unwrap()).unwrap();
        assert_eq!(grads.len(), 1);
        for g in &grads[0].policy_accepted {
            assert!((g + 0.5).abs() < TOL);
        }
        for g in &grads[0].policy_rejected {
            assert!((g - 0.5).abs() < TOL);
        }
    }

    #[test]
    fn reference_gradients_are_exactly_zero() {
        let batch = PreferenceBatch::new(vec![item(&[-0.4], &[-2.0], &[-1.1], &[-0.3])]);
        let grads = dpo_grad(&batch, &DpoConfig::default()).unwrap();
        assert!(grads[0].ref_accepted.iter().all(|&g| g == 0.0));
        assert!(grads[0].ref_rejected.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn item_rejects_mismatched_lengths() {
        let err = PreferenceItem::new(
            seq(&[-1.0, -2.0]),
            seq(&[-1.0]),
            seq(&[-1.0]),
            seq(&[-1.0]),
        );
        assert_eq!(err, Err(LossError::LengthMismatch(2, 1)));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_seq(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-5.0f64..=-0.01, 1..=max_len)
        }

        proptest! {
            #[test]
            fn ntp_is_nonnegative_and_zero_only_at_certainty(values in arb_seq(8)) {
                let loss = ntp_loss(&TokenLogProbs::new(values.clone()).unwrap());
                prop_assert!(loss >= 0.0);
                prop_assert_eq!(loss == 0.0, values.iter().all(|&v| v == 0.0));
            }

            #[test]
            fn dpo_is_strictly_positive(pa in arb_seq(6), pr in arb_seq(6), ra_shift in 0.0f64..3.0, rr_shift in 0.0f64..3.0) {
                let ra: Vec<f64> = pa.iter().map(|v| v - ra_shift).collect();
                let rr: Vec<f64> = pr.iter().map(|v| v - rr_shift).collect();
                let batch = PreferenceBatch::new(vec![PreferenceItem::new(
                    TokenLogProbs::new(pa).unwrap(),
                    TokenLogProbs::new(pr).unwrap(),
                    TokenLogProbs::new(ra).unwrap(),
                    TokenLogProbs::new(rr).unwrap(),
                ).unwrap()]);
                let loss = dpo_loss(&batch, &DpoConfig::default()).unwrap();
                prop_assert!(loss > 0.0);
            }

            #[test]
            fn dpo_decreases_when_accepted_improves(pa in arb_seq(6), pr in arb_seq(6), bump in 0.001f64..0.009) {
                // Raising an accepted policy log-prob (toward certainty) must
                // strictly lower the loss; lowering a rejected one must too.
                let mk = |pa: &[f64], pr: &[f64]| {
                    PreferenceBatch::new(vec![PreferenceItem::new(
                        TokenLogProbs::new(pa.to_vec()).unwrap(),
                        TokenLogProbs::new(pr.to_vec()).unwrap(),
                        TokenLogProbs::new(vec![-1.0; pa.len()]).unwrap(),
                        TokenLogProbs::new(vec![-1.0; pr.len()]).unwrap(),
                    ).unwrap()])
                };
                let cfg = DpoConfig::default();
                let base = dpo_loss(&mk(&pa, &pr), &cfg).unwrap();

                let mut better_accepted = pa.clone();
                better_accepted[0] += bump;
                prop_assert!(dpo_loss(&mk(&better_accepted, &pr), &cfg).unwrap() < base);

                let mut worse_rejected = pr.clone();
                worse_rejected[0] -= bump;
                prop_assert!(dpo_loss(&mk(&pa, &worse_rejected), &cfg).unwrap() < base);

                let mut better_rejected = pr.clone();
                better_rejected[0] += bump;
                prop_assert!(dpo_loss(&mk(&pa, &better_rejected), &cfg).unwrap() > base);
            }
        }
    }
}
