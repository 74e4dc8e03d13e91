//! Self-verification of the loss kernels against closed forms and central
//! finite differences. Shared by the `dpo-check` command and the tests.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckConfig {
    pub seed: u64,
    /// Randomized batches for the gradient check.
    pub batches: usize,
    pub fd_step: f64,
    pub exact_tolerance: f64,
    pub gradient_tolerance: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batches: 1000,
            fd_step: 1e-5,
            exact_tolerance: 1e-12,
            gradient_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// Worst observed error (or the checked quantity, for inequality checks).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let _ = writeln!(
                out,
                "{} {:<28} value={:.3e} tolerance={:.1e}",
                if r.passed { "ok  " } else { "FAIL" },
                r.name,
                r.value,
                r.tolerance
            );
        }
        out
    }
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn within(name: &'static str, value: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name,
        value,
        tolerance,
        passed: value <= tolerance,
    }
}

fn single(item: DpoItem, beta: f64) -> f64 {
    dpo_loss(&DpoBatch::new(vec![item], beta).expect("valid item")).loss
}

fn perturb(item: DpoItem, k: usize, delta: f64) -> DpoItem {
    let mut v = item.values();
    v[k] += delta;
    DpoItem {
        logp_chosen: v[0],
        logp_rejected: v[1],
        ref_chosen: v[2],
        ref_rejected: v[3],
    }
}

/// A batch of 1..=8 items with log-probs in [-20, -0.01] and beta log-uniform in [0.01, 10].
pub fn random_batch(rng: &mut impl Rng) -> DpoBatch {
    let n = rng.random_range(1..=8);
    let beta = 10f64.powf(rng.random_range(-2.0..=1.0));
    let items = (0..n)
        .map(|_| DpoItem {
            logp_chosen: rng.random_range(-20.0..=-0.01),
            logp_rejected: rng.random_range(-20.0..=-0.01),
            ref_chosen: rng.random_range(-20.0..=-0.01),
            ref_rejected: rng.random_range(-20.0..=-0.01),
        })
        .collect();
    DpoBatch::new(items, beta).expect("generated batch is valid")
}

/// Worst relative error between analytic and central-difference gradients.
/// Items contribute independently to the mean, so each partial is
/// differenced on its own item's loss and divided by the batch size.
pub fn dpo_gradient_error(batch: &DpoBatch, h: f64) -> f64 {
    let out = dpo_loss(batch);
    let n = batch.items().len() as f64;
    let mut worst: f64 = 0.0;
    for (item, g) in batch.items().iter().zip(&out.grads) {
        let analytic = [g.logp_chosen, g.logp_rejected, g.ref_chosen, g.ref_rejected];
        for (k, a) in analytic.iter().enumerate() {
            let fd = (single(perturb(*item, k, h), batch.beta()) - single(perturb(*item, k, -h), batch.beta())) / (2.0 * h) / n;
            worst = worst.max(relative_error(*a, fd));
        }
    }
    worst
}

fn central_difference(policy: &ToyPolicy, h: f64, mut f: impl FnMut(&ToyPolicy) -> f64) -> Vec<f64> {
    let mut p = policy.clone();
    (0..policy.logits().len())
        .map(|i| {
            let x = p.logits()[i];
            p.logits_mut()[i] = x + h;
            let up = f(&p);
            p.logits_mut()[i] = x - h;
            let down = f(&p);
            p.logits_mut()[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn worst_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| relative_error(*x, *y)).fold(0.0, f64::max)
}

fn random_policy(rng: &mut impl Rng, v: usize, l: usize) -> ToyPolicy {
    let logits = (0..v * l).map(|_| rng.random_range(-2.0..=2.0)).collect();
    ToyPolicy::from_logits(v, l, logits).expect("shape matches")
}

fn random_sequence(rng: &mut impl Rng, v: usize, l: usize) -> Vec<usize> {
    (0..l).map(|_| rng.random_range(0..v)).collect()
}

/// Worst relative error of the SFT gradient at a random policy with one target.
pub fn sft_gradient_error(rng: &mut impl Rng, h: f64) -> f64 {
    let (v, l) = (rng.random_range(2..=6), rng.random_range(1..=4));
    let policy = random_policy(rng, v, l);
    let targets = vec![random_sequence(rng, v, l)];
    let (_, analytic) = sft_loss(&policy, &targets).expect("targets in range");
    let fd = central_difference(&policy, h, |p| sft_loss(p, &targets).expect("targets in range").0);
    worst_error(&analytic, &fd)
}

/// Worst error of the DPO gradient through the policy logits, relative to
/// the largest gradient entry. Tokens outside both sequences of a pair have
/// an exactly zero gradient, so per-entry relative error is undefined there.
pub fn policy_gradient_error(rng: &mut impl Rng, h: f64) -> f64 {
    let (v, l) = (rng.random_range(2..=5), rng.random_range(1..=3));
    let policy = random_policy(rng, v, l);
    let reference = random_policy(rng, v, l);
    let pairs: Vec<TokenPair> = (0..rng.random_range(1..=3))
        .map(|_| (random_sequence(rng, v, l), random_sequence(rng, v, l)))
        .collect();
    let beta = rng.random_range(0.1..=2.0);
    let (_, analytic) = dpo_policy_loss(&policy, &reference, &pairs, beta).expect("valid pairs");
    let fd = central_difference(&policy, h, |p| dpo_policy_loss(p, &reference, &pairs, beta).expect("valid pairs").0.loss);
    let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return analytic.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    }
    analytic.iter().zip(&fd).map(|(a, n)| (a - n).abs() / scale).fold(0.0, f64::max)
}

pub fn run_checks(cfg: &CheckConfig) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut results = Vec::new();

    let mut worst: f64 = 0.0;
    for beta in [0.01, 0.1, 1.0, 10.0] {
        let (a, b) = (rng.random_range(-20.0..=-0.01), rng.random_range(-20.0..=-0.01));
        let item = DpoItem {
            logp_chosen: a,
            logp_rejected: b,
            ref_chosen: a,
            ref_rejected: b,
        };
        worst = worst.max((single(item, beta) - LN_2).abs());
    }
    results.push(within("loss_at_reference_is_ln2", worst, cfg.exact_tolerance));

    let closed = DpoItem {
        logp_chosen: -1.0 + LN_2,
        logp_rejected: -1.0 - LN_2,
        ref_chosen: -1.0,
        ref_rejected: -1.0,
    };
    results.push(within(
        "closed_form_ln_1_25",
        (single(closed, 1.0) - 1.25f64.ln()).abs(),
        cfg.exact_tolerance,
    ));

    let worst = (0..cfg.batches)
        .map(|_| dpo_gradient_error(&random_batch(&mut rng), cfg.fd_step))
        .fold(0.0, f64::max);
    results.push(within("dpo_gradient_fd", worst, cfg.gradient_tolerance));

    let trials = (cfg.batches / 10).max(1);
    let worst = (0..trials).map(|_| sft_gradient_error(&mut rng, cfg.fd_step)).fold(0.0, f64::max);
    results.push(within("sft_gradient_fd", worst, cfg.gradient_tolerance));

    let worst = (0..trials).map(|_| policy_gradient_error(&mut rng, cfg.fd_step)).fold(0.0, f64::max);
    results.push(within("dpo_policy_gradient_fd", worst, cfg.gradient_tolerance));

    let policy = random_policy(&mut rng, 3, 3);
    let mut total = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                total += policy_logprob(&policy, &[a, b, c]).expect("in range").exp();
            }
        }
    }
    results.push(within("logprob_normalization", (total - 1.0).abs(), 1e-9));

    let reference = ToyPolicy::uniform(2, 1);
    let (_, trace) = train_toy(&reference, &reference, &[(vec![0], vec![1])], 1.0, 0.1, 1).expect("valid toy setup");
    let drop = trace[1].loss - trace[0].loss;
    results.push(CheckResult {
        name: "first_step_descends",
        value: drop,
        tolerance: 0.0,
        passed: drop < 0.0 && trace[1].loss < LN_2,
    });

    CheckReport { results }
}
