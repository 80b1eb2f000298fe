//! Runtime self-checks for the loss functions: closed-form cases, a
//! finite-difference sweep of the analytic gradient, and numerical-stability
//! probes. These run behind the `losses-check` CLI subcommand so an operator
//! can confirm the numerics on their own machine.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    dpo_grad, dpo_loss, ntp_loss, softplus, DpoConfig, PreferenceBatch, PreferenceItem,
    TokenLogProbs,
};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn close(name: &str, actual: f64, expected: f64, tol: f64) -> Self {
        let error = (actual - expected).abs();
        Self {
            name: name.to_string(),
            passed: error < tol,
            detail: format!("value {actual:.15}, expected {expected:.15}, |err| {error:.3e}"),
        }
    }
}

const ANALYTIC_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-5;

fn seq(values: Vec<f64>) -> TokenLogProbs {
    TokenLogProbs::new(values).expect("check inputs are valid log-probs")
}

fn item(pa: Vec<f64>, pr: Vec<f64>, ra: Vec<f64>, rr: Vec<f64>) -> PreferenceItem {
    PreferenceItem::new(seq(pa), seq(pr), seq(ra), seq(rr)).expect("aligned lengths")
}

fn random_batch(rng: &mut ChaCha8Rng) -> PreferenceBatch {
    let mut sequence = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let len = rng.gen_range(1..=6);
        (0..len).map(|_| rng.gen_range(-5.0..=-0.01)).collect()
    };
    let items = (0..rng.gen_range(1..=4))
        .map(|_| {
            let pa = sequence(rng);
            let pr = sequence(rng);
            let ra: Vec<f64> = pa.iter().map(|v| v + rng.gen_range(-2.0..0.0)).collect();
            let rr: Vec<f64> = pr.iter().map(|v| v + rng.gen_range(-2.0..0.0)).collect();
            item(pa, pr, ra, rr)
        })
        .collect();
    PreferenceBatch::new(items)
}

/// A batch whose single item has exactly the requested margin at beta = 1:
/// the margin sits entirely in the accepted log-ratio, rejected ratio zero,
/// with every log-probability kept non-positive.
fn margin_batch(margin: f64) -> PreferenceBatch {
    let (pa, ra) = if margin >= 0.0 {
        (vec![-1.0], vec![-1.0 - margin])
    } else {
        (vec![-1.0 - margin.abs()], vec![-1.0])
    };
    PreferenceBatch::new(vec![item(pa, vec![-1.0], ra, vec![-1.0])])
}

/// Relative error between analytic and finite-difference gradients for
/// every policy token in the batch; returns the worst error seen.
fn finite_difference_worst_error(batch: &PreferenceBatch, cfg: &DpoConfig) -> f64 {
    let analytic = dpo_grad(batch, cfg).expect("non-empty batch");
    let mut worst: f64 = 0.0;
    let mut probe = |item_idx: usize, accepted: bool, token: usize, expected: f64| {
        let mut eval_at = |delta: f64| -> f64 {
            let mut items = batch.items.clone();
            let source = &items[item_idx];
            let mut values = if accepted {
                source.policy_accepted().values().to_vec()
            } else {
                source.policy_rejected().values().to_vec()
            };
            values[token] += delta;
            let rebuilt = if accepted {
                PreferenceItem::new(
                    seq(values),
                    source.policy_rejected().clone(),
                    source.ref_accepted().clone(),
                    source.ref_rejected().clone(),
                )
            } else {
                PreferenceItem::new(
                    source.policy_accepted().clone(),
                    seq(values),
                    source.ref_accepted().clone(),
                    source.ref_rejected().clone(),
                )
            };
            items[item_idx] = rebuilt.expect("lengths unchanged");
            dpo_loss(&PreferenceBatch::new(items), cfg).expect("non-empty batch")
        };
        let fd = (eval_at(FD_STEP) - eval_at(-FD_STEP)) / (2.0 * FD_STEP);
        let scale = expected.abs().max(fd.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max((fd - expected).abs() / scale);
    };
    for (i, grads) in analytic.iter().enumerate() {
        for (t, &g) in grads.policy_accepted.iter().enumerate() {
            probe(i, true, t, g);
        }
        for (t, &g) in grads.policy_rejected.iter().enumerate() {
            probe(i, false, t, g);
        }
    }
    worst
}

/// Run the full self-check suite; deterministic for a given seed.
pub fn run_self_check(seed: u64) -> Vec<CheckOutcome> {
    let mut outcomes = Vec::new();

    outcomes.push(CheckOutcome::close(
        "ntp: certain tokens give zero loss",
        ntp_loss(&seq(vec![0.0, 0.0])),
        0.0,
        ANALYTIC_TOL,
    ));
    outcomes.push(CheckOutcome::close(
        "ntp: three half-probability tokens give 3 ln 2",
        ntp_loss(&seq(vec![0.5f64.ln(); 3])),
        3.0 * 2.0f64.ln(),
        ANALYTIC_TOL,
    ));

    let coincide = PreferenceBatch::new(vec![item(
        vec![-0.7, -1.1],
        vec![-2.0],
        vec![-0.7, -1.1],
        vec![-2.0],
    )]);
    outcomes.push(CheckOutcome::close(
        "dpo: coinciding policy and reference give ln 2",
        dpo_loss(&coincide, &DpoConfig::default()).expect("non-empty"),
        2.0f64.ln(),
        ANALYTIC_TOL,
    ));

    let ln3 = 3.0f64.ln();
    let ln3_batch = PreferenceBatch::new(vec![item(
        vec![-0.2],
        vec![-1.0],
        vec![-0.2 - ln3],
        vec![-1.0],
    )]);
    outcomes.push(CheckOutcome::close(
        "dpo: ln 3 margin at beta 1 gives ln(4/3)",
        dpo_loss(&ln3_batch, &DpoConfig::new(1.0).expect("beta > 0")).expect("non-empty"),
        (4.0f64 / 3.0).ln(),
        ANALYTIC_TOL,
    ));

    let zero_margin_grads = dpo_grad(&coincide, &DpoConfig::new(1.0).expect("beta > 0"))
        .expect("non-empty");
    outcomes.push(CheckOutcome::close(
        "grad: zero margin gives -1/2 per accepted token",
        zero_margin_grads[0].policy_accepted[0],
        -0.5,
        ANALYTIC_TOL,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let batch = random_batch(&mut rng);
        let beta = rng.gen_range(0.05..2.0);
        worst = worst.max(finite_difference_worst_error(
            &batch,
            &DpoConfig::new(beta).expect("beta > 0"),
        ));
    }
    for margin in [-50.0, 50.0] {
        worst = worst.max(finite_difference_worst_error(
            &margin_batch(margin),
            &DpoConfig::new(1.0).expect("beta > 0"),
        ));
    }
    outcomes.push(CheckOutcome {
        name: "grad: finite differences over random batches and margins +-50".to_string(),
        passed: worst < FD_REL_TOL,
        detail: format!("worst relative error {worst:.3e} (tolerance {FD_REL_TOL:.0e})"),
    });

    let stable = [100.0, -100.0]
        .into_iter()
        .map(|m| dpo_loss(&margin_batch(m), &DpoConfig::new(1.0).expect("beta > 0")))
        .collect::<Result<Vec<_>, _>>()
        .expect("non-empty");
    outcomes.push(CheckOutcome {
        name: "stability: margins +-100 stay finite and ordered".to_string(),
        passed: stable.iter().all(|l| l.is_finite() && *l > 0.0) && stable[1] > stable[0],
        detail: format!("loss(+100) {:.3e}, loss(-100) {:.6}", stable[0], stable[1]),
    });

    let probe = margin_batch(1.5);
    let base_margin = probe.items[0].margin(1.0);
    let scaled = dpo_loss(&probe, &DpoConfig::new(3.0).expect("beta > 0")).expect("non-empty");
    outcomes.push(CheckOutcome::close(
        "scale: beta multiplies the margin",
        scaled,
        softplus(-3.0 * base_margin),
        ANALYTIC_TOL,
    ));

    outcomes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_check_passes() {
        let outcomes = run_self_check(0xD0);
        for outcome in &outcomes {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
        assert!(outcomes.len() >= 7);
    }

    #[test]
    fn self_check_is_deterministic() {
        let a = run_self_check(7);
        let b = run_self_check(7);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.detail, y.detail);
        }
    }

    #[test]
    fn margin_batch_hits_the_requested_margin() {
        for m in [-50.0, -1.5, 0.0, 2.0, 50.0] {
            assert!((margin_batch(m).items[0].margin(1.0) - m).abs() < 1e-12);
        }
    }
}
