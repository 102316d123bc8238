use misinfo_core::grpo::{
    clipped_surrogate, group_advantages, grpo_objective, grpo_objective_and_grad, kl_exact, kl_k3_estimate, Group,
    GrpoConfig, KlMode,
};
use misinfo_core::policy::{init_policy, response_logprob, sample_response, Observation, Policy, ResponseTokens};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_policy(rng: &mut ChaCha8Rng, d: usize, t: usize, b: usize, scale: f64) -> Policy<f64> {
    init_policy(rng.random(), d, t, b, scale).unwrap()
}

fn random_obs(rng: &mut ChaCha8Rng, d: usize) -> Observation<f64> {
    Observation::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_tokens(rng: &mut ChaCha8Rng, t: usize, b: usize) -> ResponseTokens {
    ResponseTokens {
        template_id: rng.random_range(0..t),
        category_id: rng.random_range(0..6),
        box_bins: std::array::from_fn(|_| rng.random_range(0..b)),
    }
}

struct Instance {
    policy: Policy<f64>,
    reference: Policy<f64>,
    groups: Vec<Group<f64>>,
    config: GrpoConfig,
}

/// A random objective instance whose importance ratios all stay at least
/// `margin` away from the clip boundaries.
fn instance(rng: &mut ChaCha8Rng, kl_mode: KlMode, beta: f64, margin: f64) -> Instance {
    loop {
        let d = rng.random_range(1..=4);
        let b = rng.random_range(2..=4);
        let n = rng.random_range(2..=4);
        let t = 2;
        let policy = random_policy(rng, d, t, b, 1.0);
        let reference = random_policy(rng, d, t, b, 1.0);
        let mut old = policy.clone();
        for p in old.params_mut().iter_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        let config = GrpoConfig { group_size: n, kl_beta: beta, kl_mode, ..GrpoConfig::default() };
        let groups: Vec<Group<f64>> = (0..rng.random_range(1..=3))
            .map(|_| {
                let obs = random_obs(rng, d);
                let tokens: Vec<_> = (0..n).map(|_| random_tokens(rng, t, b)).collect();
                let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
                Group::from_parts(obs, &tokens, &rewards, &old, &reference, 1e-8).unwrap()
            })
            .collect();
        let eps = config.clip_epsilon;
        let near_kink = groups.iter().any(|g| {
            g.members.iter().any(|m| {
                let s = (response_logprob(&policy, &g.obs, &m.tokens).unwrap() - m.logp_old).exp();
                (s - (1.0 - eps)).abs() < margin || (s - (1.0 + eps)).abs() < margin
            })
        });
        if !near_kink {
            return Instance { policy, reference, groups, config };
        }
    }
}

fn max_rel_error(inst: &Instance, h: f64) -> f64 {
    let eval = grpo_objective_and_grad(&inst.groups, &inst.config, &inst.policy, &inst.reference).unwrap();
    let analytic: Vec<f64> = eval.grad.iter().copied().collect();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = inst.policy.clone();
        let mut minus = inst.policy.clone();
        *plus.params_mut().iter_mut().nth(i).unwrap() += h;
        *minus.params_mut().iter_mut().nth(i).unwrap() -= h;
        let fp = grpo_objective(&inst.groups, &inst.config, &plus, &inst.reference).unwrap();
        let fm = grpo_objective(&inst.groups, &inst.config, &minus, &inst.reference).unwrap();
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..60 {
        let mode = if i % 2 == 0 { KlMode::ExactPerHead } else { KlMode::K3Estimator };
        let beta = [0.0, 0.04, 1.0][i % 3];
        let inst = instance(&mut rng, mode, beta, 1e-3);
        let err = max_rel_error(&inst, 1e-5);
        assert!(err <= 1e-4, "instance {i}: relative error {err}");
    }
}

#[test]
fn unclipped_objective_is_score_function_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mut inst = instance(&mut rng, KlMode::ExactPerHead, 0.0, 0.0);
        inst.config.clip_epsilon = f64::INFINITY;
        let eval = grpo_objective_and_grad(&inst.groups, &inst.config, &inst.policy, &inst.reference).unwrap();
        let mut expected = misinfo_core::policy::Params::zeros(inst.policy.dims());
        let g = inst.groups.len() as f64;
        for group in &inst.groups {
            let n = group.members.len() as f64;
            for m in &group.members {
                let s = (response_logprob(&inst.policy, &group.obs, &m.tokens).unwrap() - m.logp_old).exp();
                inst.policy
                    .accumulate_logprob_grad(&group.obs, &m.tokens, m.advantage * s / (g * n), &mut expected)
                    .unwrap();
            }
        }
        for (a, e) in eval.grad.iter().zip(expected.iter()) {
            assert!((a - e).abs() <= 1e-8, "{a} vs {e}");
        }
        assert_eq!(eval.clip_fraction, 0.0);
    }
}

#[test]
fn k3_is_unbiased_for_exact_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let d = rng.random_range(1..=4);
        let current = random_policy(&mut rng, d, 2, 3, 0.5);
        let reference = random_policy(&mut rng, d, 2, 3, 0.5);
        let obs = random_obs(&mut rng, d);
        let exact = kl_exact(&current, &reference, &obs).unwrap();
        let draws: Vec<f64> = (0..20_000)
            .map(|_| {
                let (tokens, logp_cur) = sample_response(&current, &obs, &mut rng).unwrap();
                kl_k3_estimate(response_logprob(&reference, &obs, &tokens).unwrap(), logp_cur)
            })
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let se = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "mean {mean} exact {exact} se {se}");
    }
}

#[test]
fn kl_zero_only_for_equal_policies() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let p = random_policy(&mut rng, 3, 2, 4, 1.0);
        let obs = random_obs(&mut rng, 3);
        assert_eq!(kl_exact(&p, &p.clone(), &obs).unwrap(), 0.0);
        let mut q = p.clone();
        *q.params_mut().iter_mut().next().unwrap() += 0.5;
        assert!(kl_exact(&p, &q, &obs).unwrap() > 0.0);
    }
}

proptest! {
    #[test]
    fn advantages_are_standardized(rewards in proptest::collection::vec(0.0f64..3.0, 2..16)) {
        let adv = group_advantages(&rewards, 1e-8).unwrap();
        let n = adv.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std < 1e-8 {
            prop_assert!(adv.iter().all(|&a| a == 0.0));
        } else {
            let am = adv.iter().sum::<f64>() / n;
            let astd = (adv.iter().map(|a| (a - am).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(am.abs() <= 1e-9);
            prop_assert!((astd - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn surrogate_is_pessimistic(dl in -2.0f64..2.0, adv in -3.0f64..3.0, eps in 0.01f64..0.5) {
        let s = dl.exp();
        let v = clipped_surrogate(dl, 0.0, adv, eps);
        prop_assert!(v <= s * adv + 1e-12);
        if (1.0 - eps..=1.0 + eps).contains(&s) {
            prop_assert!((v - s * adv).abs() <= 1e-12);
        }
    }
}
