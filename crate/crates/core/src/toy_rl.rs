//! Desk-scale reflection-aware GRPO.
//!
//! A two-state (easy/hard), two-action (keep/reflect) categorical policy is
//! trained against the reward module in a stochastic perception environment.
//! The policy only sees the difficulty class. On `keep` the initial call is
//! final; on `reflect` a fresh call is drawn that is correct with probability
//! `q_reflect`, independently of the first.
//!
//! The surrogate maximized per step is
//!
//! ```text
//! J(θ) = 1/N Σ_i A_i log π_θ(a_i | s_i) − β · 1/N Σ_i KL(π_θ(·|s_i) ‖ π_ref(·|s_i))
//! ```
//!
//! with `A_i` the group-normalized advantage of trajectory `i`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Difficulty;
use crate::record::{Answer, Decision, Label, Verdict};
use crate::reward::{answer_match, reflection_reward, RewardConfig};

pub const ADVANTAGE_EPS: f64 = 1e-8;
pub const DEFAULT_GROUP_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Keep,
    Reflect,
}

impl Action {
    fn index(self) -> usize {
        match self {
            Action::Keep => 0,
            Action::Reflect => 1,
        }
    }
}

fn state_index(d: Difficulty) -> usize {
    match d {
        Difficulty::Easy => 0,
        Difficulty::Hard => 1,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("{name} = {value} is outside [0, 1]")]
    BadProbability { name: &'static str, value: f64 },
    #[error("non-finite gradient {gradient:?} at logits {logits:?}")]
    NonFiniteGradient {
        gradient: [[f64; 2]; 2],
        logits: [[f64; 2]; 2],
    },
    #[error("beta must be finite and nonnegative, got {0}")]
    BadBeta(f64),
    #[error("steps must be at least 1")]
    NoSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyEnv {
    /// P(initial call correct | easy)
    pub p_easy: f64,
    /// P(initial call correct | hard)
    pub p_hard: f64,
    /// P(post-reflection call correct)
    pub q_reflect: f64,
    /// fraction of easy prompts
    pub class_mix: f64,
    pub seed: u64,
}

impl Default for ToyEnv {
    fn default() -> Self {
        ToyEnv {
            p_easy: 0.9,
            p_hard: 0.4,
            q_reflect: 0.8,
            class_mix: 0.5,
            seed: 0,
        }
    }
}

impl ToyEnv {
    pub fn validate(&self) -> Result<(), RlError> {
        for (name, value) in [
            ("p_easy", self.p_easy),
            ("p_hard", self.p_hard),
            ("q_reflect", self.q_reflect),
            ("class_mix", self.class_mix),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(RlError::BadProbability { name, value });
            }
        }
        Ok(())
    }

    pub fn p_initial(&self, d: Difficulty) -> f64 {
        match d {
            Difficulty::Easy => self.p_easy,
            Difficulty::Hard => self.p_hard,
        }
    }
}

/// Logits indexed `[state][action]`, state 0 = easy, action 0 = keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub logits: [[f64; 2]; 2],
    pub reference_logits: [[f64; 2]; 2],
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams::uniform()
    }
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

fn log_softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

fn kl2(z: [f64; 2], r: [f64; 2]) -> f64 {
    let p = softmax2(z);
    let lp = log_softmax2(z);
    let lr = log_softmax2(r);
    p[0] * (lp[0] - lr[0]) + p[1] * (lp[1] - lr[1])
}

impl PolicyParams {
    pub fn uniform() -> Self {
        PolicyParams {
            logits: [[0.0; 2]; 2],
            reference_logits: [[0.0; 2]; 2],
        }
    }

    /// Starts at `logits` with the reference frozen to the same values.
    pub fn from_logits(logits: [[f64; 2]; 2]) -> Self {
        PolicyParams {
            logits,
            reference_logits: logits,
        }
    }

    pub fn probs(&self, d: Difficulty) -> [f64; 2] {
        softmax2(self.logits[state_index(d)])
    }

    pub fn reflect_prob(&self, d: Difficulty) -> f64 {
        self.probs(d)[1]
    }

    pub fn log_prob(&self, d: Difficulty, a: Action) -> f64 {
        log_softmax2(self.logits[state_index(d)])[a.index()]
    }

    pub fn kl(&self, d: Difficulty) -> f64 {
        let s = state_index(d);
        kl2(self.logits[s], self.reference_logits[s])
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, d: Difficulty, rng: &mut R) -> Action {
        if rng.gen::<f64>() < self.reflect_prob(d) {
            Action::Reflect
        } else {
            Action::Keep
        }
    }

    /// Total-variation distance to the reference policy in state `d`.
    pub fn tv_to_reference(&self, d: Difficulty) -> f64 {
        let s = state_index(d);
        let p = softmax2(self.logits[s]);
        let r = softmax2(self.reference_logits[s]);
        0.5 * ((p[0] - r[0]).abs() + (p[1] - r[1]).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub difficulty: Difficulty,
    pub truth: Verdict,
    pub y0: Verdict,
    pub y1: Verdict,
    pub action: Action,
    pub reward: f64,
    pub logprob: f64,
}

impl Trajectory {
    pub fn label(&self) -> Label {
        match self.truth {
            Verdict::Yes => Label::Anomalous,
            Verdict::No => Label::Normal,
        }
    }
}

/// Reward of a trajectory from the reward module: answer term plus the
/// reflection term, which is zero on `keep`.
pub fn trajectory_reward(y0: Verdict, y1: Verdict, truth: Label, action: Action, cfg: &RewardConfig) -> f64 {
    let r_ans = answer_match(Answer::from(y1), truth);
    let r_refl = match action {
        Action::Keep => 0.0,
        Action::Reflect => reflection_reward(Decision::from(y0), Answer::from(y1), truth, cfg.refl_config),
    };
    cfg.lambda_a * r_ans + cfg.lambda_r * r_refl
}

fn draw_call<R: Rng + ?Sized>(truth: Verdict, p_correct: f64, rng: &mut R) -> Verdict {
    if rng.gen::<f64>() < p_correct {
        truth
    } else {
        truth.flip()
    }
}

fn draw_prompt<R: Rng + ?Sized>(env: &ToyEnv, rng: &mut R) -> (Difficulty, Verdict) {
    let d = if rng.gen::<f64>() < env.class_mix {
        Difficulty::Easy
    } else {
        Difficulty::Hard
    };
    let truth = if rng.gen::<bool>() { Verdict::Yes } else { Verdict::No };
    (d, truth)
}

fn rollout<R: Rng + ?Sized>(
    env: &ToyEnv,
    policy: &PolicyParams,
    cfg: &RewardConfig,
    difficulty: Difficulty,
    truth: Verdict,
    rng: &mut R,
) -> Trajectory {
    let y0 = draw_call(truth, env.p_initial(difficulty), rng);
    let action = policy.sample_action(difficulty, rng);
    let y1 = match action {
        Action::Keep => y0,
        Action::Reflect => draw_call(truth, env.q_reflect, rng),
    };
    let label = match truth {
        Verdict::Yes => Label::Anomalous,
        Verdict::No => Label::Normal,
    };
    Trajectory {
        difficulty,
        truth,
        y0,
        y1,
        action,
        reward: trajectory_reward(y0, y1, label, action, cfg),
        logprob: policy.log_prob(difficulty, action),
    }
}

pub fn simulate_episode<R: Rng + ?Sized>(
    env: &ToyEnv,
    policy: &PolicyParams,
    cfg: &RewardConfig,
    rng: &mut R,
) -> Trajectory {
    let (d, truth) = draw_prompt(env, rng);
    rollout(env, policy, cfg, d, truth, rng)
}

/// `group_size` rollouts sharing one prompt (difficulty and true label).
pub fn simulate_group<R: Rng + ?Sized>(
    env: &ToyEnv,
    policy: &PolicyParams,
    cfg: &RewardConfig,
    group_size: usize,
    rng: &mut R,
) -> Vec<Trajectory> {
    let (d, truth) = draw_prompt(env, rng);
    (0..group_size)
        .map(|_| rollout(env, policy, cfg, d, truth, rng))
        .collect()
}

/// `(r - mean) / (std + ε)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, RlError> {
    if rewards.len() < 2 {
        return Err(RlError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect())
}

/// One (state, action, advantage) term of the surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub difficulty: Difficulty,
    pub action: Action,
    pub advantage: f64,
}

/// Flattens trajectory groups into surrogate terms with group-normalized
/// advantages. With `best_of_group`, only the top-reward trajectories of each
/// group are kept (with their advantages), a filter variant of GRPO.
pub fn advantage_samples(groups: &[Vec<Trajectory>], best_of_group: bool) -> Result<Vec<Sample>, RlError> {
    let mut out = Vec::new();
    for g in groups {
        let rewards: Vec<f64> = g.iter().map(|t| t.reward).collect();
        let adv = group_advantages(&rewards)?;
        let best = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (t, a) in g.iter().zip(adv) {
            if best_of_group && t.reward < best {
                continue;
            }
            out.push(Sample {
                difficulty: t.difficulty,
                action: t.action,
                advantage: a,
            });
        }
    }
    Ok(out)
}

/// Value of the surrogate objective; evaluated directly from log-softmax.
pub fn surrogate_objective(policy: &PolicyParams, samples: &[Sample], beta: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let n = samples.len() as f64;
    samples
        .iter()
        .map(|s| s.advantage * policy.log_prob(s.difficulty, s.action) - beta * policy.kl(s.difficulty))
        .sum::<f64>()
        / n
}

/// Closed-form gradient of [`surrogate_objective`] with respect to the logits.
///
/// `∂ log π(a|s) / ∂z_{s,b} = 1[a=b] − π_b` and
/// `∂ KL_s / ∂z_{s,b} = π_b (log π_b − log ρ_b − KL_s)`.
pub fn surrogate_gradient(policy: &PolicyParams, samples: &[Sample], beta: f64) -> [[f64; 2]; 2] {
    let mut grad = [[0.0; 2]; 2];
    if samples.is_empty() {
        return grad;
    }
    let n = samples.len() as f64;
    for s in samples {
        let si = state_index(s.difficulty);
        let p = softmax2(policy.logits[si]);
        let lp = log_softmax2(policy.logits[si]);
        let lr = log_softmax2(policy.reference_logits[si]);
        let kl = p[0] * (lp[0] - lr[0]) + p[1] * (lp[1] - lr[1]);
        for b in 0..2 {
            let indicator = if s.action.index() == b { 1.0 } else { 0.0 };
            let d_logp = indicator - p[b];
            let d_kl = p[b] * (lp[b] - lr[b] - kl);
            grad[si][b] += (s.advantage * d_logp - beta * d_kl) / n;
        }
    }
    grad
}

/// One gradient-ascent step on the surrogate.
pub fn grpo_update(
    policy: &PolicyParams,
    groups: &[Vec<Trajectory>],
    beta: f64,
    lr: f64,
) -> Result<PolicyParams, RlError> {
    update_with(policy, groups, beta, lr, false)
}

fn update_with(
    policy: &PolicyParams,
    groups: &[Vec<Trajectory>],
    beta: f64,
    lr: f64,
    best_of_group: bool,
) -> Result<PolicyParams, RlError> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(RlError::BadBeta(beta));
    }
    let samples = advantage_samples(groups, best_of_group)?;
    let grad = surrogate_gradient(policy, &samples, beta);
    if grad.iter().flatten().any(|g| !g.is_finite()) {
        return Err(RlError::NonFiniteGradient {
            gradient: grad,
            logits: policy.logits,
        });
    }
    let mut next = *policy;
    for (row, grow) in next.logits.iter_mut().zip(grad) {
        for (z, g) in row.iter_mut().zip(grow) {
            *z += lr * g;
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Keep,
    Reflect,
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateOptimum {
    pub difficulty: Difficulty,
    pub expected_keep: f64,
    pub expected_reflect: f64,
    pub choice: Choice,
}

impl StateOptimum {
    pub fn gap(&self) -> f64 {
        (self.expected_reflect - self.expected_keep).abs()
    }
}

/// Exact expected reward of each action per state, by enumerating whether
/// the initial and the post-reflection calls are correct.
pub fn analytic_optimum(env: &ToyEnv, cfg: &RewardConfig) -> [StateOptimum; 2] {
    // the reward is symmetric in the true label; enumerate with truth = yes
    let truth = Verdict::Yes;
    let label = Label::Anomalous;
    let call = |correct: bool| if correct { truth } else { truth.flip() };
    let optimum = |d: Difficulty| {
        let p = env.p_initial(d);
        let q = env.q_reflect;
        let mut keep = 0.0;
        let mut reflect = 0.0;
        for c0 in [true, false] {
            let p0 = if c0 { p } else { 1.0 - p };
            keep += p0 * trajectory_reward(call(c0), call(c0), label, Action::Keep, cfg);
            for c1 in [true, false] {
                let p1 = if c1 { q } else { 1.0 - q };
                reflect += p0 * p1 * trajectory_reward(call(c0), call(c1), label, Action::Reflect, cfg);
            }
        }
        let choice = if (reflect - keep).abs() < 1e-12 {
            Choice::Tie
        } else if reflect > keep {
            Choice::Reflect
        } else {
            Choice::Keep
        };
        StateOptimum {
            difficulty: d,
            expected_keep: keep,
            expected_reflect: reflect,
            choice,
        }
    };
    [optimum(Difficulty::Easy), optimum(Difficulty::Hard)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub group_size: usize,
    /// prompts (groups) per update
    pub groups_per_step: usize,
    pub lr: f64,
    pub best_of_group: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            group_size: DEFAULT_GROUP_SIZE,
            groups_per_step: 16,
            lr: 0.1,
            best_of_group: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_reward: f64,
    pub reflect_rate_easy: f64,
    pub reflect_rate_hard: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub policy: PolicyParams,
    pub curve: Vec<CurvePoint>,
    pub reflect_rate_easy: f64,
    pub reflect_rate_hard: f64,
}

impl TrainOutcome {
    pub fn reflect_rate(&self, d: Difficulty) -> f64 {
        match d {
            Difficulty::Easy => self.reflect_rate_easy,
            Difficulty::Hard => self.reflect_rate_hard,
        }
    }

    pub fn write_curve_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "step,mean_reward,reflect_rate_easy,reflect_rate_hard,kl")?;
        for p in &self.curve {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.8}",
                p.step, p.mean_reward, p.reflect_rate_easy, p.reflect_rate_hard, p.kl
            )?;
        }
        Ok(())
    }

    pub fn summary_json(&self, env: &ToyEnv, cfg: &RewardConfig) -> serde_json::Value {
        let opt = analytic_optimum(env, cfg);
        serde_json::json!({
            "refl_config": cfg.refl_config,
            "kl_beta": cfg.kl_beta,
            "steps": self.curve.last().map_or(0, |p| p.step),
            "reflect_rate_easy": self.reflect_rate_easy,
            "reflect_rate_hard": self.reflect_rate_hard,
            "final_mean_reward": self.curve.last().map_or(0.0, |p| p.mean_reward),
            "analytic_easy": opt[0].choice,
            "analytic_hard": opt[1].choice,
        })
    }
}

/// Runs GRPO from the uniform policy. Fully determined by `env.seed`.
pub fn train(env: &ToyEnv, cfg: &RewardConfig, opts: &TrainOptions) -> Result<TrainOutcome, RlError> {
    train_from(env, cfg, opts, PolicyParams::uniform())
}

pub fn train_from(
    env: &ToyEnv,
    cfg: &RewardConfig,
    opts: &TrainOptions,
    init: PolicyParams,
) -> Result<TrainOutcome, RlError> {
    env.validate()?;
    if opts.steps == 0 {
        return Err(RlError::NoSteps);
    }
    if opts.group_size < 2 {
        return Err(RlError::GroupTooSmall(opts.group_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(env.seed);
    let mut policy = init;
    let mut curve = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let groups: Vec<Vec<Trajectory>> = (0..opts.groups_per_step)
            .map(|_| simulate_group(env, &policy, cfg, opts.group_size, &mut rng))
            .collect();
        let n: usize = groups.iter().map(Vec::len).sum();
        let mean_reward = groups.iter().flatten().map(|t| t.reward).sum::<f64>() / n as f64;
        policy = update_with(&policy, &groups, cfg.kl_beta, opts.lr, opts.best_of_group)?;
        curve.push(CurvePoint {
            step,
            mean_reward,
            reflect_rate_easy: policy.reflect_prob(Difficulty::Easy),
            reflect_rate_hard: policy.reflect_prob(Difficulty::Hard),
            kl: env.class_mix * policy.kl(Difficulty::Easy)
                + (1.0 - env.class_mix) * policy.kl(Difficulty::Hard),
        });
    }
    Ok(TrainOutcome {
        reflect_rate_easy: policy.reflect_prob(Difficulty::Easy),
        reflect_rate_hard: policy.reflect_prob(Difficulty::Hard),
        policy,
        curve,
    })
}
