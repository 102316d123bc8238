//! Group Relative Policy Optimization.
//!
//! For every query a group of `N` responses is sampled from the old policy
//! and scored. Rewards are standardized within the group to form advantages,
//! and the policy ascends
//!
//! ```text
//! J = mean_q [ (1/N) Σ_i min(s_i A_i, clip(s_i, 1-ε, 1+ε) A_i) - β KL(π_θ ‖ π_ref) ]
//! s_i = π_θ(o_i | q) / π_old(o_i | q)
//! ```
//!
//! There is no critic; the group itself is the baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::Sample;
use crate::policy::{
    render_response, response_logprob, sample_response, snapshot_reference, BoxDecoder, Observation, Params, Policy,
    PolicyError, ReferencePolicy, ResponseTokens,
};
use crate::reward::{reward_total, RewardBreakdown};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("rewards must be finite")]
    NonFiniteReward,
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// When the sampling policy π_old is re-synchronized with π_θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OldPolicyRefresh {
    EveryStep,
    EveryEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlMode {
    /// Closed-form KL between the per-head categoricals, per query.
    ExactPerHead,
    /// Per-response `r - ln r - 1` estimator with `r = π_ref / π_θ`.
    K3Estimator,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub std_floor: f64,
    pub old_policy_refresh: OldPolicyRefresh,
    pub kl_mode: KlMode,
    /// Gradient steps taken on each sampled batch.
    pub inner_epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            learning_rate: 1e-2,
            std_floor: 1e-8,
            old_policy_refresh: OldPolicyRefresh::EveryStep,
            kl_mode: KlMode::ExactPerHead,
            inner_epochs: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.clip_epsilon.is_nan() || self.clip_epsilon <= 0.0 {
            return bad("clip_epsilon must be > 0");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and > 0");
        }
        if !(self.std_floor > 0.0 && self.std_floor.is_finite()) {
            return bad("std_floor must be finite and > 0");
        }
        if self.inner_epochs == 0 {
            return bad("inner_epochs must be >= 1");
        }
        Ok(())
    }
}

/// Standardizes rewards with the population mean and standard deviation.
/// A group whose spread is below `std_floor` carries no signal and gets all
/// zero advantages.
pub fn group_advantages<T: Scalar>(rewards: &[T], std_floor: T) -> Result<Vec<T>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward);
    }
    let n = T::of(rewards.len() as f64);
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(vec![T::zero(); rewards.len()]);
    }
    Ok(rewards.iter().map(|&r| (r - mean) / std).collect())
}

/// `min(s A, clip(s, 1-ε, 1+ε) A)` with `s = exp(logp_new - logp_old)`.
pub fn clipped_surrogate<T: Scalar>(logp_new: T, logp_old: T, advantage: T, epsilon: T) -> T {
    let ratio = (logp_new - logp_old).exp();
    let clipped = ratio.max(T::one() - epsilon).min(T::one() + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Exact `KL(π_θ(·|obs) ‖ π_ref(·|obs))`, the sum of the per-head KLs.
pub fn kl_exact<T: Scalar>(policy: &Policy<T>, reference: &Policy<T>, obs: &Observation<T>) -> Result<T, GrpoError> {
    Ok(kl_exact_with_grad(policy, reference, obs)?.0)
}

/// KL value and its gradient with respect to each head's logits.
fn kl_exact_with_grad<T: Scalar>(
    policy: &Policy<T>,
    reference: &Policy<T>,
    obs: &Observation<T>,
) -> Result<(T, [Vec<T>; 6]), GrpoError> {
    if !policy.params().same_shape(reference.params()) {
        return Err(PolicyError::ShapeMismatch.into());
    }
    let cur = policy.head_log_probs(obs)?;
    let refs = reference.head_log_probs(obs)?;
    let mut total = T::zero();
    let grads: [Vec<T>; 6] = std::array::from_fn(|h| {
        let diff: Vec<T> = cur[h].iter().zip(&refs[h]).map(|(&a, &b)| a - b).collect();
        let p: Vec<T> = cur[h].iter().map(|lp| lp.exp()).collect();
        let kl = p.iter().zip(&diff).map(|(&pk, &d)| if pk > T::zero() { pk * d } else { T::zero() }).sum::<T>();
        total += kl;
        p.iter().zip(&diff).map(|(&pk, &d)| pk * (d - kl)).collect()
    });
    // clamp rounding noise; the true value is never negative
    Ok((total.max(T::zero()), grads))
}

/// Per-sample KL estimator `r - ln r - 1`, `r = exp(logp_ref - logp_cur)`.
pub fn kl_k3_estimate<T: Scalar>(logp_ref: T, logp_cur: T) -> T {
    let log_ratio = logp_ref - logp_cur;
    (log_ratio.exp() - log_ratio - T::one()).max(T::zero())
}

/// Ground truth and observation for one training query.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a, T> {
    pub obs: &'a Observation<T>,
    pub gt: &'a Sample<T>,
}

/// One sampled response with everything the objective needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember<T> {
    pub tokens: ResponseTokens,
    pub text: String,
    pub reward: RewardBreakdown<T>,
    pub advantage: T,
    pub logp_old: T,
    pub logp_ref: T,
}

/// `N` responses for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Group<T> {
    pub obs: Observation<T>,
    pub members: Vec<GroupMember<T>>,
}

impl<T: Scalar> Group<T> {
    /// Assembles a group from explicit responses and rewards. The rendered
    /// texts are left empty.
    pub fn from_parts(
        obs: Observation<T>,
        tokens: &[ResponseTokens],
        rewards: &[T],
        old: &Policy<T>,
        reference: &Policy<T>,
        std_floor: T,
    ) -> Result<Self, GrpoError> {
        let advantages = group_advantages(rewards, std_floor)?;
        let members = tokens
            .iter()
            .zip(rewards)
            .zip(advantages)
            .map(|((t, &r), a)| {
                Ok(GroupMember {
                    tokens: *t,
                    text: String::new(),
                    reward: RewardBreakdown { format: T::zero(), cls: T::zero(), loc: T::zero(), total: r },
                    advantage: a,
                    logp_old: response_logprob(old, &obs, t)?,
                    logp_ref: response_logprob(reference, &obs, t)?,
                })
            })
            .collect::<Result<Vec<_>, GrpoError>>()?;
        Ok(Group { obs, members })
    }

    pub fn advantages(&self) -> Vec<T> {
        self.members.iter().map(|m| m.advantage).collect()
    }

    pub fn rewards(&self) -> Vec<T> {
        self.members.iter().map(|m| m.reward.total).collect()
    }
}

/// Samples and scores a group for `query` under `old`.
pub fn build_group<T: Scalar, R: Rng + ?Sized>(
    old: &Policy<T>,
    reference: &Policy<T>,
    query: Query<'_, T>,
    config: &GrpoConfig,
    decoder: &BoxDecoder,
    rng: &mut R,
) -> Result<Group<T>, GrpoError> {
    let mut members = Vec::with_capacity(config.group_size);
    for _ in 0..config.group_size {
        let (tokens, logp_old) = sample_response(old, query.obs, rng)?;
        let text = render_response(&tokens, decoder);
        let reward = reward_total(&text, query.gt);
        let logp_ref = response_logprob(reference, query.obs, &tokens)?;
        members.push(GroupMember { tokens, text, reward, advantage: T::zero(), logp_old, logp_ref });
    }
    let rewards: Vec<T> = members.iter().map(|m| m.reward.total).collect();
    let advantages = group_advantages(&rewards, T::of(config.std_floor))?;
    for (m, a) in members.iter_mut().zip(advantages) {
        m.advantage = a;
    }
    Ok(Group { obs: query.obs.clone(), members })
}

/// Objective value, gradient and diagnostics over a batch of groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval<T> {
    pub value: T,
    pub grad: Params<T>,
    /// Mean KL term (exact per query, or the mean per-response estimate).
    pub kl: T,
    /// Fraction of responses whose clipped branch was strictly smaller.
    pub clip_fraction: T,
}

pub fn grpo_objective_and_grad<T: Scalar>(
    groups: &[Group<T>],
    config: &GrpoConfig,
    policy: &Policy<T>,
    reference: &Policy<T>,
) -> Result<ObjectiveEval<T>, GrpoError> {
    if groups.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let eps = T::of(config.clip_epsilon);
    let beta = T::of(config.kl_beta);
    let (lo, hi) = (T::one() - eps, T::one() + eps);
    let n_groups = T::of(groups.len() as f64);
    let mut grad = Params::zeros(policy.dims());
    let (mut value, mut kl_sum, mut clipped, mut responses) = (T::zero(), T::zero(), 0usize, 0usize);

    for group in groups {
        let n = T::of(group.members.len() as f64);
        let weight = T::one() / (n_groups * n);
        let mut group_value = T::zero();
        for m in &group.members {
            let logp = response_logprob(policy, &group.obs, &m.tokens)?;
            let ratio = (logp - m.logp_old).exp();
            let unclipped = ratio * m.advantage;
            let clip_val = ratio.max(lo).min(hi) * m.advantage;
            responses += 1;
            let mut coeff = T::zero();
            if unclipped <= clip_val {
                group_value += unclipped;
                coeff += m.advantage * ratio;
            } else {
                group_value += clip_val;
                clipped += 1;
            }
            if config.kl_mode == KlMode::K3Estimator {
                let k3 = kl_k3_estimate(m.logp_ref, logp);
                let r = (m.logp_ref - logp).exp();
                group_value -= beta * k3;
                kl_sum += k3 / n;
                coeff -= beta * (T::one() - r);
            }
            if coeff != T::zero() {
                policy.accumulate_logprob_grad(&group.obs, &m.tokens, coeff * weight, &mut grad)?;
            }
        }
        group_value /= n;
        if config.kl_mode == KlMode::ExactPerHead {
            let (kl, dlogits) = kl_exact_with_grad(policy, reference, &group.obs)?;
            group_value -= beta * kl;
            kl_sum += kl;
            if beta != T::zero() {
                policy.accumulate_logit_grad(&group.obs, &dlogits, -beta / n_groups, &mut grad);
            }
        }
        value += group_value / n_groups;
    }
    Ok(ObjectiveEval {
        value,
        grad,
        kl: kl_sum / n_groups,
        clip_fraction: T::of(clipped as f64 / responses.max(1) as f64),
    })
}

/// Mean over groups of the clipped surrogate minus the β-weighted KL term.
pub fn grpo_objective<T: Scalar>(
    groups: &[Group<T>],
    config: &GrpoConfig,
    policy: &Policy<T>,
    reference: &Policy<T>,
) -> Result<T, GrpoError> {
    Ok(grpo_objective_and_grad(groups, config, policy, reference)?.value)
}

/// Diagnostics for one sampling round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_format: f64,
    pub mean_cls: f64,
    pub mean_loc: f64,
    pub mean_abs_advantage: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub objective: f64,
}

impl StepStats {
    /// One record of the plain-text training log.
    pub fn log_line(&self) -> String {
        format!(
            "step={} mean_reward={:.6} mean_format={:.6} mean_cls={:.6} mean_loc={:.6} mean_abs_adv={:.6} kl={:.6} objective={:.6} clip_frac={:.6}",
            self.step,
            self.mean_reward,
            self.mean_format,
            self.mean_cls,
            self.mean_loc,
            self.mean_abs_advantage,
            self.kl,
            self.objective,
            self.clip_fraction
        )
    }
}

/// One GRPO round with π_old synchronized to `policy` at the start.
pub fn grpo_step<T: Scalar, R: Rng + ?Sized>(
    policy: &Policy<T>,
    reference: &ReferencePolicy<T>,
    batch: &[Query<'_, T>],
    config: &GrpoConfig,
    decoder: &BoxDecoder,
    rng: &mut R,
) -> Result<(Policy<T>, StepStats), GrpoError> {
    let old = snapshot_reference(policy);
    grpo_step_with_old(policy, &old, reference, batch, config, decoder, rng)
}

/// One GRPO round sampling from an explicit π_old.
///
/// Each query samples from its own ChaCha stream keyed by one draw from
/// `rng`, so results do not depend on how queries are scheduled.
pub fn grpo_step_with_old<T: Scalar, R: Rng + ?Sized>(
    policy: &Policy<T>,
    old: &ReferencePolicy<T>,
    reference: &ReferencePolicy<T>,
    batch: &[Query<'_, T>],
    config: &GrpoConfig,
    decoder: &BoxDecoder,
    rng: &mut R,
) -> Result<(Policy<T>, StepStats), GrpoError> {
    config.validate()?;
    if batch.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let base_seed: u64 = rng.random();
    let groups = batch
        .iter()
        .enumerate()
        .map(|(q, query)| {
            let mut stream = ChaCha8Rng::seed_from_u64(base_seed);
            stream.set_stream(q as u64);
            build_group(old, reference, *query, config, decoder, &mut stream)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let lr = T::of(config.learning_rate);
    let mut next = policy.clone();
    let mut first: Option<ObjectiveEval<T>> = None;
    let mut clip_total = 0.0;
    for _ in 0..config.inner_epochs {
        let eval = grpo_objective_and_grad(&groups, config, &next, reference)?;
        next.params_mut().axpy(lr, &eval.grad);
        clip_total += eval.clip_fraction.as_f64();
        first.get_or_insert(eval);
    }
    let first = first.expect("inner_epochs >= 1");

    let members = groups.iter().flat_map(|g| &g.members);
    let count = (groups.len() * config.group_size) as f64;
    let mean = |f: &dyn Fn(&GroupMember<T>) -> T| members.clone().map(|m| f(m).as_f64()).sum::<f64>() / count;
    let stats = StepStats {
        step: 0,
        mean_reward: mean(&|m| m.reward.total),
        mean_format: mean(&|m| m.reward.format),
        mean_cls: mean(&|m| m.reward.cls),
        mean_loc: mean(&|m| m.reward.loc),
        mean_abs_advantage: mean(&|m| m.advantage.abs()),
        clip_fraction: clip_total / config.inner_epochs as f64,
        kl: first.kl.as_f64(),
        objective: first.value.as_f64(),
    };
    Ok((next, stats))
}

/// Drives repeated GRPO rounds over a fixed query set.
///
/// Queries are visited in a seeded shuffled order, `batch_size` per step; a
/// pass over all queries is one epoch.
pub struct GrpoTrainer<'a, T> {
    policy: Policy<T>,
    reference: ReferencePolicy<T>,
    old: ReferencePolicy<T>,
    config: GrpoConfig,
    decoder: BoxDecoder,
    queries: Vec<Query<'a, T>>,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl<'a, T: Scalar> GrpoTrainer<'a, T> {
    /// Snapshots `policy` as the frozen reference.
    pub fn new(
        policy: Policy<T>,
        config: GrpoConfig,
        decoder: BoxDecoder,
        queries: Vec<Query<'a, T>>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, GrpoError> {
        config.validate()?;
        if queries.is_empty() || batch_size == 0 {
            return Err(GrpoError::EmptyBatch);
        }
        let reference = snapshot_reference(&policy);
        let old = reference.clone();
        let order = (0..queries.len()).collect();
        let mut trainer = GrpoTrainer {
            policy,
            reference,
            old,
            config,
            decoder,
            queries,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order,
            cursor: 0,
            step: 0,
        };
        trainer.reshuffle();
        Ok(trainer)
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn policy(&self) -> &Policy<T> {
        &self.policy
    }

    pub fn reference(&self) -> &ReferencePolicy<T> {
        &self.reference
    }

    pub fn into_policy(self) -> Policy<T> {
        self.policy
    }

    pub fn step(&mut self) -> Result<StepStats, GrpoError> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
            if self.config.old_policy_refresh == OldPolicyRefresh::EveryEpoch {
                self.old = snapshot_reference(&self.policy);
            }
        }
        if self.config.old_policy_refresh == OldPolicyRefresh::EveryStep {
            self.old = snapshot_reference(&self.policy);
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch: Vec<Query<'a, T>> = self.order[self.cursor..end].iter().map(|&i| self.queries[i]).collect();
        self.cursor = end;
        let (next, mut stats) = grpo_step_with_old(
            &self.policy,
            &self.old,
            &self.reference,
            &batch,
            &self.config,
            &self.decoder,
            &mut self.rng,
        )?;
        self.policy = next;
        stats.step = self.step;
        self.step += 1;
        Ok(stats)
    }
}
