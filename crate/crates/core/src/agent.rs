//! The BOSA learner: TD3-style actor-critic with a supported-policy
//! constraint handled by a Lagrange multiplier and a supported-value
//! filter on the Bellman error, plus the ablation variants.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Batch, DomainTag, OfflineDataset, Transition};
use crate::density::{
    normalize_rows, BehaviorDensity, DensityError, SupportThreshold, TransitionDensity,
};
use crate::nn::{Mlp, MlpSpec, NnError, Tape, Var};
use crate::params::{EmaTracker, ParamStore};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("state dim mismatch: actor expects {expected}, got {actual}")]
    StateDim { expected: usize, actual: usize },
    #[error("variant {0:?} requires a trained {1} model")]
    MissingModel(Variant, &'static str),
    #[error("classifier has not been trained")]
    UntrainedClassifier,
    #[error("invalid config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoPolicyReg,
    NoFilter,
    NoConservation,
    TargetDataBellman,
    NaiveMixBaseline,
    BehaviorClone,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPolicyReg,
        Variant::NoFilter,
        Variant::NoConservation,
        Variant::TargetDataBellman,
        Variant::NaiveMixBaseline,
        Variant::BehaviorClone,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPolicyReg => "no-policy-reg",
            Variant::NoFilter => "no-filter",
            Variant::NoConservation => "no-conservation",
            Variant::TargetDataBellman => "target-data-bellman",
            Variant::NaiveMixBaseline => "naive-mix-baseline",
            Variant::BehaviorClone => "behavior-clone",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.iter().copied().find(|v| v.name() == s)
    }

    /// Does the critic apply the transition-support indicator?
    pub fn uses_filter(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoPolicyReg | Variant::NoConservation)
    }

    /// Does the actor carry the supported-policy constraint?
    pub fn uses_policy_constraint(&self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoFilter | Variant::NoConservation | Variant::TargetDataBellman
        )
    }

    pub fn uses_conservation(&self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoPolicyReg | Variant::NoFilter | Variant::TargetDataBellman
        )
    }

    /// Critic batches come from the target slice instead of the mix.
    pub fn bellman_on_target(&self) -> bool {
        matches!(self, Variant::TargetDataBellman)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BosaConfig {
    pub variant: Variant,
    /// Initial value of the dual variable for the policy constraint.
    pub lambda_policy: f64,
    /// Exposed for config parity; the hard indicator filter takes no multiplier.
    pub lambda_transition: f64,
    pub eps_th: f64,
    pub eps_prime_th: f64,
    /// Fixed weight on the per-state support hinge
    /// E[relu(support_pin - log pi_beta(pi(s)|s))]. The dual variable
    /// handles the batch-mean constraint at eps_th, but a mean constraint
    /// alone lets a few states drift far off-support while interior
    /// states mask them; the fixed hinge pins every state near or above
    /// the support_pin contour, well inside the eps_th boundary.
    pub support_weight: f64,
    /// Log-likelihood contour (in nats) the hinge holds the policy above;
    /// desk-calibrated so the pinned policy stays comfortably inside the
    /// eps_th support boundary.
    pub support_pin: f64,
    pub conservation_weight: f64,
    pub gamma: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_freq: usize,
    /// EMA rate tau for the target networks.
    pub target_rate: f64,
    pub hidden_dim: usize,
    pub depth: usize,
    pub batch_size: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_dual: f64,
    /// Monte-Carlo samples for density queries inside the training loop.
    pub likelihood_samples: usize,
    pub steps: usize,
}

impl Default for BosaConfig {
    fn default() -> Self {
        BosaConfig {
            variant: Variant::Full,
            lambda_policy: 0.1,
            lambda_transition: 0.1,
            eps_th: (0.08f64).ln(),
            eps_prime_th: (0.08f64).ln(),
            support_weight: 5.0,
            support_pin: 2.0,
            conservation_weight: 0.1,
            gamma: 0.99,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_freq: 2,
            target_rate: 0.005,
            hidden_dim: 64,
            depth: 3,
            batch_size: 256,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_dual: 1e-3,
            likelihood_samples: 4,
            steps: 20_000,
        }
    }
}

impl BosaConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(AgentError::BadConfig("gamma must lie in [0,1]"));
        }
        if self.policy_freq == 0 {
            return Err(AgentError::BadConfig("policy update frequency must be >= 1"));
        }
        if self.noise_clip < 0.0 {
            return Err(AgentError::BadConfig("noise clip must be >= 0"));
        }
        if self.conservation_weight < 0.0 {
            return Err(AgentError::BadConfig("conservation weight must be >= 0"));
        }
        if self.lambda_policy < 0.0 {
            return Err(AgentError::BadConfig("lambda_policy must be >= 0"));
        }
        if self.support_weight < 0.0 {
            return Err(AgentError::BadConfig("support weight must be >= 0"));
        }

        Ok(())
    }

    pub fn support_threshold(&self) -> SupportThreshold {
        SupportThreshold::from_log(self.eps_prime_th)
    }
}

/// Online and target networks plus the dual variable.
#[derive(Debug, Clone)]
pub struct ActorCriticState {
    pub actor: Mlp,
    pub actor_params: ParamStore,
    pub critic1: Mlp,
    pub critic1_params: ParamStore,
    pub critic2: Mlp,
    pub critic2_params: ParamStore,
    pub target_actor: EmaTracker,
    pub target_critic1: EmaTracker,
    pub target_critic2: EmaTracker,
    pub lambda: f64,
    pub step: u64,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl ActorCriticState {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        cfg: &BosaConfig,
        rng: &mut Stream,
    ) -> Result<Self, AgentError> {
        cfg.validate()?;
        let actor = Mlp::new(MlpSpec::new(state_dim, cfg.hidden_dim, cfg.depth, action_dim))?;
        let critic_spec = MlpSpec::new(state_dim + action_dim, cfg.hidden_dim, cfg.depth, 1);
        let critic1 = Mlp::new(critic_spec.clone())?;
        let critic2 = Mlp::new(critic_spec)?;
        let actor_params = actor.init_params(&mut rng.split("actor"));
        let critic1_params = critic1.init_params(&mut rng.split("critic1"));
        let critic2_params = critic2.init_params(&mut rng.split("critic2"));
        let alpha = 1.0 - cfg.target_rate;
        Ok(ActorCriticState {
            target_actor: EmaTracker::new(&actor_params, alpha)?,
            target_critic1: EmaTracker::new(&critic1_params, alpha)?,
            target_critic2: EmaTracker::new(&critic2_params, alpha)?,
            actor,
            actor_params,
            critic1,
            critic1_params,
            critic2,
            critic2_params,
            lambda: cfg.lambda_policy.max(0.0),
            step: 0,
            state_dim,
            action_dim,
        })
    }

    /// Deterministic tanh-squashed policy, batched, tape-free.
    pub fn policy_array(&self, states: &Array2<f64>) -> Result<Array2<f64>, AgentError> {
        let raw = self.actor.forward_array(&self.actor_params, states)?;
        Ok(raw.mapv(f64::tanh))
    }

    fn target_policy_array(&self, states: &Array2<f64>) -> Result<Array2<f64>, AgentError> {
        let store = self.target_actor.as_store();
        let raw = self.actor.forward_array(&store, states)?;
        Ok(raw.mapv(f64::tanh))
    }

    fn q_array(&self, which: Twin, target: bool, sa: &Array2<f64>) -> Result<Array2<f64>, AgentError> {
        let (mlp, store) = match (which, target) {
            (Twin::One, false) => (&self.critic1, self.critic1_params.clone()),
            (Twin::Two, false) => (&self.critic2, self.critic2_params.clone()),
            (Twin::One, true) => (&self.critic1, self.target_critic1.as_store()),
            (Twin::Two, true) => (&self.critic2, self.target_critic2.as_store()),
        };
        Ok(mlp.forward_array(&store, sa)?)
    }
}

#[derive(Clone, Copy)]
enum Twin {
    One,
    Two,
}

/// Deterministic evaluation action for one state, squashed into [-1,1]^d.
pub fn act(ac: &ActorCriticState, state: &[f64]) -> Result<Vec<f64>, AgentError> {
    if state.len() != ac.state_dim {
        return Err(AgentError::StateDim {
            expected: ac.state_dim,
            actual: state.len(),
        });
    }
    let raw = ac.actor.forward_vec(&ac.actor_params, state)?;
    Ok(raw.into_iter().map(f64::tanh).collect())
}

fn concat_sa(s: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(ndarray::Axis(1), &[s.view(), a.view()]).unwrap()
}

fn masked_mean(tape: &mut Tape, values: Var, mask: &[bool]) -> Option<Var> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return None;
    }
    let weights = Array2::from_shape_fn((mask.len(), 1), |(i, _)| if mask[i] { 1.0 } else { 0.0 });
    let w = tape.constant(weights);
    let picked = tape.mul(values, w);
    let total = tape.sum_all(picked);
    Some(tape.scale(total, 1.0 / count as f64))
}

pub struct CriticLossOut {
    pub tape: Tape,
    pub loss: Var,
    /// Fraction of the batch passing the support filter.
    pub pass_rate: f64,
    /// Every transition was filtered out; Bellman term fell back to 0.
    pub starved: bool,
    pub mean_q_source: f64,
    pub mean_q_target: f64,
    pub mask: Vec<bool>,
}

/// Eq. 5 loss graph: filtered Bellman error plus the value-conservation
/// term over source-tagged batch members. The support mask and TD targets
/// are computed once, tape-free, so no gradient flows through them.
pub fn critic_loss(
    batch: &Batch,
    ac: &ActorCriticState,
    cfg: &BosaConfig,
    trans: Option<&TransitionDensity>,
    rng: &mut Stream,
) -> Result<CriticLossOut, AgentError> {
    let b = batch.states.nrows();

    // TD target with TD3 policy smoothing, all detached.
    let mut a_next = ac.target_policy_array(&batch.next_states)?;
    for x in a_next.iter_mut() {
        let n = (rng.normal() * cfg.policy_noise).clamp(-cfg.noise_clip, cfg.noise_clip);
        *x = (*x + n).clamp(-1.0, 1.0);
    }
    let sa_next = concat_sa(&batch.next_states, &a_next);
    let q1n = ac.q_array(Twin::One, true, &sa_next)?;
    let q2n = ac.q_array(Twin::Two, true, &sa_next)?;
    let mut target = Array2::zeros((b, 1));
    for i in 0..b {
        let not_done = if batch.dones[i] { 0.0 } else { 1.0 };
        target[[i, 0]] =
            batch.rewards[i] + cfg.gamma * not_done * q1n[[i, 0]].min(q2n[[i, 0]]);
    }

    let mask: Vec<bool> = if cfg.variant.uses_filter() {
        let t = trans.ok_or(AgentError::MissingModel(cfg.variant, "transition"))?;
        t.in_support(
            &cfg.support_threshold(),
            &batch.states,
            &batch.actions,
            &batch.next_states,
            &mut rng.split("filter"),
            cfg.likelihood_samples,
        )?
    } else {
        vec![true; b]
    };
    let pass_rate = mask.iter().filter(|&&m| m).count() as f64 / b as f64;

    let mut tape = Tape::new();
    let sa = tape.constant(concat_sa(&batch.states, &batch.actions));
    let q1 = ac
        .critic1
        .forward_on_tape(&mut tape, &ac.critic1_params, sa, false, None)?;
    let q2 = ac
        .critic2
        .forward_on_tape(&mut tape, &ac.critic2_params, sa, false, None)?;
    let y = tape.constant(target);

    let d1 = tape.sub(q1, y);
    let d1 = tape.square(d1);
    let d2 = tape.sub(q2, y);
    let d2 = tape.square(d2);
    let delta = tape.add(d1, d2);

    let bellman = masked_mean(&mut tape, delta, &mask);
    let starved = bellman.is_none();
    let mut loss = bellman.unwrap_or_else(|| tape.constant_scalar(0.0));

    let w = if cfg.variant.uses_conservation() {
        cfg.conservation_weight
    } else {
        0.0
    };
    if w > 0.0 {
        let source_mask: Vec<bool> = batch.tags.iter().map(|&t| t == DomainTag::Source).collect();
        let qmin = tape.min(q1, q2);
        if let Some(cons) = masked_mean(&mut tape, qmin, &source_mask) {
            let weighted = tape.scale(cons, w);
            loss = tape.add(loss, weighted);
        }
    }

    // Diagnostics: online Q1 means by domain, read off the tape.
    let q1_vals = tape.value(q1).clone();
    let mean_by = |tag: DomainTag| {
        let (mut s, mut n) = (0.0, 0usize);
        for (i, &t) in batch.tags.iter().enumerate() {
            if t == tag {
                s += q1_vals[[i, 0]];
                n += 1;
            }
        }
        if n == 0 { f64::NAN } else { s / n as f64 }
    };

    Ok(CriticLossOut {
        mean_q_source: mean_by(DomainTag::Source),
        mean_q_target: mean_by(DomainTag::Target),
        tape,
        loss,
        pass_rate,
        starved,
        mask,
    })
}

pub struct ActorLossOut {
    pub tape: Tape,
    pub loss: Var,
    /// E[log pi_beta_mix(pi(s)|s)] - eps_th, detached; NaN when the
    /// constraint is off for this variant.
    pub constraint_gap: f64,
    /// E[relu(support_pin - log pi_beta_mix(pi(s)|s))], the per-state
    /// hinge violation, detached; NaN when the constraint is off.
    pub hinge: f64,
    pub mean_q: f64,
}

/// Eq. 4 via its Lagrangian: -E[Q1(s, pi(s))] / |E[Q1]| - lambda *
/// E[log pi_beta_mix(pi(s)|s)] + support_weight *
/// E[relu(support_pin - log pi_beta_mix(pi(s)|s))].
/// The Q term is scale-normalized by its detached batch mean so lambda
/// and eps_th transfer across tasks. The lambda term is the paper's
/// batch-mean Lagrangian; the fixed-weight hinge additionally pins every
/// state above the eps_th contour, because a mean constraint alone lets
/// a few states drift far off-support while interior states mask them.
pub fn actor_loss(
    batch: &Batch,
    ac: &ActorCriticState,
    cfg: &BosaConfig,
    behavior: Option<&BehaviorDensity>,
    rng: &mut Stream,
) -> Result<ActorLossOut, AgentError> {
    let mut tape = Tape::new();
    let s = tape.constant(batch.states.clone());
    let raw = ac
        .actor
        .forward_on_tape(&mut tape, &ac.actor_params, s, false, None)?;
    let pi = tape.tanh(raw);

    if cfg.variant == Variant::BehaviorClone {
        let a = tape.constant(batch.actions.clone());
        let d = tape.sub(pi, a);
        let d = tape.square(d);
        let loss = tape.mean_all(d);
        return Ok(ActorLossOut {
            tape,
            loss,
            constraint_gap: f64::NAN,
            hinge: f64::NAN,
            mean_q: f64::NAN,
        });
    }

    let sa = tape.concat_cols(s, pi);
    let q = ac
        .critic1
        .forward_on_tape(&mut tape, &ac.critic1_params, sa, false, None)?;
    let q_mean = tape.mean_all(q);
    let mean_q = tape.scalar(q_mean);
    let denom = mean_q.abs().max(1e-6);
    let mut loss = tape.scale(q_mean, -1.0 / denom);

    let mut constraint_gap = f64::NAN;
    let mut hinge = f64::NAN;
    if cfg.variant.uses_policy_constraint() {
        let bd = behavior.ok_or(AgentError::MissingModel(cfg.variant, "behavior"))?;
        let cond = tape.constant(normalize_rows(&batch.states, &bd.stats));
        let ll = bd.model.log_likelihood_graph(
            &mut tape,
            cond,
            pi,
            &mut rng.split("constraint"),
            cfg.likelihood_samples,
        )?;
        let ll_mean = tape.mean_all(ll);
        constraint_gap = tape.scalar(ll_mean) - cfg.eps_th;
        let neg_ll = tape.neg(ll);
        let viol = tape.add_scalar(neg_ll, cfg.support_pin);
        let viol = tape.relu(viol);
        let viol_mean = tape.mean_all(viol);
        hinge = tape.scalar(viol_mean);
        if cfg.support_weight > 0.0 {
            let pin = tape.scale(viol_mean, cfg.support_weight);
            loss = tape.add(loss, pin);
        }
        if ac.lambda > 0.0 {
            let penalty = tape.scale(ll_mean, -ac.lambda);
            loss = tape.add(loss, penalty);
        }
    }

    Ok(ActorLossOut {
        tape,
        loss,
        constraint_gap,
        hinge,
        mean_q,
    })
}

/// Projected dual ascent on lambda: shrink when the constraint holds
/// (gap > 0), grow when it is violated, never below zero.
pub fn dual_step(lambda: f64, constraint_gap: f64, lr_dual: f64) -> f64 {
    (lambda - lr_dual * constraint_gap).max(0.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub step: u64,
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub lambda: f64,
    pub constraint_gap: Option<f64>,
    pub pass_rate: f64,
    pub starved: bool,
    pub mean_q_source: f64,
    pub mean_q_target: f64,
}

/// One learner step: a critic update every call, an actor + dual + target
/// update every `policy_freq` calls.
pub fn train_step(
    ac: &mut ActorCriticState,
    cfg: &BosaConfig,
    d_mix: &OfflineDataset,
    d_target: &OfflineDataset,
    behavior: Option<&BehaviorDensity>,
    trans: Option<&TransitionDensity>,
    rng: &mut Stream,
) -> Result<StepDiagnostics, AgentError> {
    let data = if cfg.variant.bellman_on_target() {
        d_target
    } else {
        d_mix
    };
    let batch = data.sample_batch(cfg.batch_size, rng, false)?;

    let (critic_loss_val, pass_rate, starved, mean_q_source, mean_q_target) =
        if cfg.variant == Variant::BehaviorClone {
            (f64::NAN, 1.0, false, f64::NAN, f64::NAN)
        } else {
            let mut out = critic_loss(&batch, ac, cfg, trans, rng)?;
            out.tape.backward(out.loss)?;
            ac.critic1_params.zero_grad();
            ac.critic2_params.zero_grad();
            out.tape.accumulate_param_grads(&mut ac.critic1_params)?;
            out.tape.accumulate_param_grads(&mut ac.critic2_params)?;
            ac.critic1_params.adam_step_accumulated(cfg.lr_critic)?;
            ac.critic2_params.adam_step_accumulated(cfg.lr_critic)?;
            (
                out.tape.scalar(out.loss),
                out.pass_rate,
                out.starved,
                out.mean_q_source,
                out.mean_q_target,
            )
        };

    let mut actor_loss_val = None;
    let mut gap = None;
    ac.step += 1;
    if ac.step % cfg.policy_freq as u64 == 0 {
        let mut out = actor_loss(&batch, ac, cfg, behavior, rng)?;
        out.tape.backward(out.loss)?;
        ac.actor_params.zero_grad();
        out.tape.accumulate_param_grads(&mut ac.actor_params)?;
        ac.actor_params.adam_step_accumulated(cfg.lr_actor)?;
        actor_loss_val = Some(out.tape.scalar(out.loss));
        if out.constraint_gap.is_finite() {
            ac.lambda = dual_step(ac.lambda, out.constraint_gap, cfg.lr_dual);
            gap = Some(out.constraint_gap);
        }
        ac.target_actor.update(&ac.actor_params)?;
        ac.target_critic1.update(&ac.critic1_params)?;
        ac.target_critic2.update(&ac.critic2_params)?;
    }

    Ok(StepDiagnostics {
        step: ac.step,
        critic_loss: critic_loss_val,
        actor_loss: actor_loss_val,
        lambda: ac.lambda,
        constraint_gap: gap,
        pass_rate,
        starved,
        mean_q_source,
        mean_q_target,
    })
}

/// Binary domain classifier head (logit of p(target | features)).
#[derive(Debug, Clone)]
pub struct DomainClassifier {
    pub mlp: Mlp,
    pub params: ParamStore,
    pub trained: bool,
}

impl DomainClassifier {
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut Stream) -> Result<Self, AgentError> {
        let mlp = Mlp::new(MlpSpec::new(input_dim, hidden_dim, 2, 1))?;
        let params = mlp.init_params(rng);
        Ok(DomainClassifier {
            mlp,
            params,
            trained: false,
        })
    }

    /// p(target | features), clamped to [1e-6, 1 - 1e-6].
    pub fn prob_target(&self, features: &[f64]) -> Result<f64, AgentError> {
        if !self.trained {
            return Err(AgentError::UntrainedClassifier);
        }
        let logit = self.mlp.forward_vec(&self.params, features)?[0];
        let p = 1.0 / (1.0 + (-logit).exp());
        Ok(p.clamp(1e-6, 1.0 - 1e-6))
    }

    /// Minimize mean binary cross-entropy: softplus(logit) - label * logit.
    /// `input_noise` is the std of Gaussian smoothing noise added to the
    /// features during training. With deterministic dynamics the odds
    /// ratio is unbounded; smoothing keeps the learned ratio finite so
    /// the DARA correction stays near zero on in-domain transitions.
    pub fn fit(
        &mut self,
        features: &Array2<f64>,
        labels: &[f64],
        iters: usize,
        batch_size: usize,
        lr: f64,
        input_noise: f64,
        rng: &mut Stream,
    ) -> Result<(), AgentError> {
        let n = features.nrows();
        assert_eq!(labels.len(), n);
        let mut avg = EmaTracker::new(&self.params, 0.999)?;
        for _ in 0..iters {
            let idx: Vec<usize> = (0..batch_size.min(n)).map(|_| rng.index(n)).collect();
            let b = idx.len();
            let x = Array2::from_shape_fn((b, features.ncols()), |(i, j)| {
                features[[idx[i], j]] + input_noise * rng.normal()
            });
            let lab = Array2::from_shape_fn((b, 1), |(i, _)| labels[idx[i]]);

            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logit = self.mlp.forward_on_tape(&mut tape, &self.params, xv, false, None)?;
            let zeros = tape.constant(Array2::zeros((b, 1)));
            let softplus = tape.log_sum_exp_cols(vec![logit, zeros]);
            let labv = tape.constant(lab);
            let yl = tape.mul(labv, logit);
            let per = tape.sub(softplus, yl);
            let loss = tape.mean_all(per);
            tape.backward(loss)?;
            self.params.zero_grad();
            tape.accumulate_param_grads(&mut self.params)?;
            self.params.adam_step_accumulated(lr)?;
            avg.update(&self.params)?;
        }
        // Polyak-averaged weights calibrate better than the last iterate,
        // which matters because the correction is a difference of logits.
        self.params.params_mut().copy_from_slice(avg.shadow());
        self.trained = true;
        Ok(())
    }
}

/// Fit the two DARA classifiers q_sas(target|s,a,s') and q_sa(target|s,a)
/// on the domain labels of a mixed dataset.
pub fn train_domain_classifiers(
    d_mix: &OfflineDataset,
    hidden_dim: usize,
    iters: usize,
    input_noise: f64,
    seed: u64,
) -> Result<(DomainClassifier, DomainClassifier), AgentError> {
    let sd = d_mix.state_dim();
    let ad = d_mix.action_dim();
    let n = d_mix.len();
    let mut f_sas = Array2::zeros((n, 2 * sd + ad));
    let mut f_sa = Array2::zeros((n, sd + ad));
    let mut labels = Vec::with_capacity(n);
    for (i, t) in d_mix.transitions.iter().enumerate() {
        for (j, &v) in t.state.iter().chain(&t.action).chain(&t.next_state).enumerate() {
            f_sas[[i, j]] = v;
        }
        for (j, &v) in t.state.iter().chain(&t.action).enumerate() {
            f_sa[[i, j]] = v;
        }
        labels.push(if t.tag == DomainTag::Target { 1.0 } else { 0.0 });
    }
    let rng = Stream::derive(seed, "dara");
    let mut q_sas = DomainClassifier::new(2 * sd + ad, hidden_dim, &mut rng.split("sas-init"))?;
    let mut q_sa = DomainClassifier::new(sd + ad, hidden_dim, &mut rng.split("sa-init"))?;
    q_sas.fit(&f_sas, &labels, iters, 256, 1e-3, input_noise, &mut rng.split("sas-fit"))?;
    q_sa.fit(&f_sa, &labels, iters, 256, 1e-3, input_noise, &mut rng.split("sa-fit"))?;
    Ok((q_sas, q_sa))
}

/// DARA reward correction: r + log[q_sas(target)/q_sas(source)]
/// - log[q_sa(target)/q_sa(source)].
pub fn dara_modified_reward(
    t: &Transition,
    q_sas: &DomainClassifier,
    q_sa: &DomainClassifier,
) -> Result<f64, AgentError> {
    let mut sas: Vec<f64> = t.state.clone();
    sas.extend_from_slice(&t.action);
    sas.extend_from_slice(&t.next_state);
    let mut sa: Vec<f64> = t.state.clone();
    sa.extend_from_slice(&t.action);
    let p_sas = q_sas.prob_target(&sas)?;
    let p_sa = q_sa.prob_target(&sa)?;
    let delta = (p_sas / (1.0 - p_sas)).ln() - (p_sa / (1.0 - p_sa)).ln();
    Ok(t.reward + delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::CvaeModel;
    use crate::nn::gradcheck::{finite_diff_grad, max_rel_error};
    use crate::dataset::NormStats;

    fn small_cfg(variant: Variant) -> BosaConfig {
        BosaConfig {
            variant,
            hidden_dim: 8,
            depth: 2,
            batch_size: 16,
            likelihood_samples: 2,
            ..Default::default()
        }
    }

    fn make_batch(
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        next_states: Vec<Vec<f64>>,
        tags: Vec<DomainTag>,
    ) -> Batch {
        let b = states.len();
        let sd = states[0].len();
        let ad = actions[0].len();
        Batch {
            states: Array2::from_shape_fn((b, sd), |(i, j)| states[i][j]),
            actions: Array2::from_shape_fn((b, ad), |(i, j)| actions[i][j]),
            rewards,
            next_states: Array2::from_shape_fn((b, sd), |(i, j)| next_states[i][j]),
            dones: vec![false; b],
            tags,
            indices: (0..b).collect(),
        }
    }

    fn random_batch(b: usize, sd: usize, ad: usize, tag: DomainTag, rng: &mut Stream) -> Batch {
        make_batch(
            (0..b).map(|_| rng.normal_vec(sd)).collect(),
            (0..b).map(|_| rng.normal_vec(ad)).collect(),
            (0..b).map(|_| rng.normal()).collect(),
            (0..b).map(|_| rng.normal_vec(sd)).collect(),
            vec![tag; b],
        )
    }

    fn untrained_transition(sd: usize, ad: usize, seed: u64) -> TransitionDensity {
        let mut rng = Stream::derive(seed, "trans");
        let m = CvaeModel::new(sd + ad, sd, 8, 2, 0.5, &mut rng).unwrap();
        TransitionDensity {
            ensemble: crate::density::DensityEnsemble::new(vec![m]).unwrap(),
            stats: NormStats {
                mean: vec![0.0; sd],
                std: vec![1.0; sd],
            },
            dataset_hash: String::new(),
        }
    }

    fn untrained_behavior(sd: usize, ad: usize, seed: u64) -> BehaviorDensity {
        let mut rng = Stream::derive(seed, "beh");
        let m = CvaeModel::new(sd, ad, 8, 2, 0.5, &mut rng).unwrap();
        BehaviorDensity {
            model: m,
            stats: NormStats {
                mean: vec![0.0; sd],
                std: vec![1.0; sd],
            },
            dataset_hash: String::new(),
        }
    }

    #[test]
    fn myopic_regression_reduction() {
        // no filter, w irrelevant (all-target batch), gamma = 0:
        // loss = mean[(Q1 - r)^2 + (Q2 - r)^2]
        let mut cfg = small_cfg(Variant::NoFilter);
        cfg.gamma = 0.0;
        let mut rng = Stream::from_seed(1);
        let ac = ActorCriticState::new(3, 2, &cfg, &mut rng.split("init")).unwrap();
        let batch = random_batch(8, 3, 2, DomainTag::Target, &mut rng);
        let out = critic_loss(&batch, &ac, &cfg, None, &mut rng.split("loss")).unwrap();

        let sa = concat_sa(&batch.states, &batch.actions);
        let q1 = ac.q_array(Twin::One, false, &sa).unwrap();
        let q2 = ac.q_array(Twin::Two, false, &sa).unwrap();
        let expect: f64 = (0..8)
            .map(|i| {
                let d1 = q1[[i, 0]] - batch.rewards[i];
                let d2 = q2[[i, 0]] - batch.rewards[i];
                d1 * d1 + d2 * d2
            })
            .sum::<f64>()
            / 8.0;
        assert!((out.tape.scalar(out.loss) - expect).abs() < 1e-12);
        assert_eq!(out.pass_rate, 1.0);
        assert!(!out.starved);
    }

    #[test]
    fn zero_critic_unit_reward_delta() {
        // Q == 0 everywhere, r = 1, gamma = 0.99: delta = 1 per critic.
        let cfg = small_cfg(Variant::NoFilter);
        let mut rng = Stream::from_seed(2);
        let mut ac = ActorCriticState::new(2, 1, &cfg, &mut rng.split("init")).unwrap();
        ac.critic1_params = ParamStore::zeros(ac.critic1_params.len());
        ac.critic2_params = ParamStore::zeros(ac.critic2_params.len());
        ac.target_critic1 = EmaTracker::new(&ac.critic1_params, 0.995).unwrap();
        ac.target_critic2 = EmaTracker::new(&ac.critic2_params, 0.995).unwrap();
        let batch = make_batch(
            vec![vec![0.3, -0.1]],
            vec![vec![0.5]],
            vec![1.0],
            vec![vec![0.0, 0.0]],
            vec![DomainTag::Target],
        );
        let out = critic_loss(&batch, &ac, &cfg, None, &mut rng).unwrap();
        // twin deltas sum to 2, each equal to 1
        assert!((out.tape.scalar(out.loss) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fully_filtered_source_batch_leaves_conservation() {
        let mut cfg = small_cfg(Variant::Full);
        cfg.eps_prime_th = f64::INFINITY; // nothing passes
        cfg.conservation_weight = 0.1;
        let mut rng = Stream::from_seed(3);
        let ac = ActorCriticState::new(2, 1, &cfg, &mut rng.split("init")).unwrap();
        let trans = untrained_transition(2, 1, 3);
        let batch = random_batch(6, 2, 1, DomainTag::Source, &mut rng);
        let out = critic_loss(&batch, &ac, &cfg, Some(&trans), &mut rng.split("loss")).unwrap();
        assert!(out.starved);
        assert_eq!(out.pass_rate, 0.0);

        let sa = concat_sa(&batch.states, &batch.actions);
        let q1 = ac.q_array(Twin::One, false, &sa).unwrap();
        let q2 = ac.q_array(Twin::Two, false, &sa).unwrap();
        let expect: f64 =
            0.1 * (0..6).map(|i| q1[[i, 0]].min(q2[[i, 0]])).sum::<f64>() / 6.0;
        assert!((out.tape.scalar(out.loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn filter_monotone_in_threshold() {
        let trans = untrained_transition(2, 1, 5);
        let mut rng = Stream::from_seed(7);
        let batch = random_batch(32, 2, 1, DomainTag::Source, &mut rng);
        let lo = SupportThreshold::from_log(-8.0);
        let hi = SupportThreshold::from_log(-3.0);
        let m_lo = trans
            .in_support(&lo, &batch.states, &batch.actions, &batch.next_states,
                        &mut Stream::derive(1, "m"), 3)
            .unwrap();
        let m_hi = trans
            .in_support(&hi, &batch.states, &batch.actions, &batch.next_states,
                        &mut Stream::derive(1, "m"), 3)
            .unwrap();
        for (l, h) in m_lo.iter().zip(&m_hi) {
            assert!(*l || !*h);
        }
    }

    #[test]
    fn actor_loss_lambda_zero_is_pure_dpg() {
        let mut cfg = small_cfg(Variant::Full);
        cfg.lambda_policy = 0.0;
        cfg.support_weight = 0.0;
        let mut rng = Stream::from_seed(11);
        let ac = ActorCriticState::new(2, 1, &cfg, &mut rng.split("init")).unwrap();
        let behavior = untrained_behavior(2, 1, 11);
        let batch = random_batch(8, 2, 1, DomainTag::Target, &mut rng);
        let out = actor_loss(&batch, &ac, &cfg, Some(&behavior), &mut rng.split("a")).unwrap();
        let pi = ac.policy_array(&batch.states).unwrap();
        let sa = concat_sa(&batch.states, &pi);
        let q = ac.q_array(Twin::One, false, &sa).unwrap();
        let mean_q = q.iter().sum::<f64>() / 8.0;
        let expect = -mean_q / mean_q.abs().max(1e-6);
        assert!((out.tape.scalar(out.loss) - expect).abs() < 1e-10);
        assert!(out.constraint_gap.is_finite()); // gap still reported
    }

    #[test]
    fn actor_gradient_with_dead_critic_is_likelihood_gradient() {
        // Q == 0 (zero critic weights) and lambda = 1: the actor gradient
        // equals -d/dtheta E[log pi_beta(pi(s)|s)], checked by finite
        // differences of the likelihood term alone.
        let mut cfg = small_cfg(Variant::Full);
        cfg.lambda_policy = 1.0;
        cfg.support_weight = 0.0;
        cfg.likelihood_samples = 2;
        let mut rng = Stream::from_seed(13);
        let mut ac = ActorCriticState::new(2, 1, &cfg, &mut rng.split("init")).unwrap();
        ac.critic1_params = ParamStore::zeros(ac.critic1_params.len());
        let behavior = untrained_behavior(2, 1, 13);
        let batch = random_batch(4, 2, 1, DomainTag::Target, &mut rng);

        let mut out = actor_loss(&batch, &ac, &cfg, Some(&behavior), &mut Stream::derive(9, "g"))
            .unwrap();
        out.tape.backward(out.loss).unwrap();
        ac.actor_params.zero_grad();
        out.tape.accumulate_param_grads(&mut ac.actor_params).unwrap();

        let actor = ac.actor.clone();
        let states = batch.states.clone();
        let eval = |p: &ParamStore| {
            // -mean log-likelihood of the squashed policy actions
            let mut tape = Tape::new();
            let s = tape.constant(states.clone());
            let raw = actor.forward_on_tape(&mut tape, p, s, false, None).unwrap();
            let pi = tape.tanh(raw);
            let cond = tape.constant(normalize_rows(&states, &behavior.stats));
            let ll = behavior
                .model
                .log_likelihood_graph(&mut tape, cond, pi, &mut Stream::derive(9, "g").split("constraint"), 2)
                .unwrap();
            let m = tape.mean_all(ll);
            -tape.scalar(m)
        };
        let numeric = finite_diff_grad(&mut ac.actor_params.clone(), eval, 1e-5);
        assert!(max_rel_error(ac.actor_params.grad(), &numeric) < 1e-4);
    }

    #[test]
    fn behavior_clone_is_action_regression() {
        let cfg = small_cfg(Variant::BehaviorClone);
        let mut rng = Stream::from_seed(17);
        let ac = ActorCriticState::new(2, 1, &cfg, &mut rng.split("init")).unwrap();
        let batch = random_batch(8, 2, 1, DomainTag::Target, &mut rng);
        let out = actor_loss(&batch, &ac, &cfg, None, &mut rng).unwrap();
        let pi = ac.policy_array(&batch.states).unwrap();
        let expect: f64 = (0..8)
            .map(|i| (pi[[i, 0]] - batch.actions[[i, 0]]).powi(2))
            .sum::<f64>()
            / 8.0;
        assert!((out.tape.scalar(out.loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn dual_step_formula_and_projection() {
        // a violated constraint (negative gap) grows lambda
        assert!((dual_step(0.0, -1.0, 0.1) - 0.1).abs() < 1e-15);
        // a satisfied constraint drives lambda to 0 and keeps it there
        let mut lam = 0.5;
        for _ in 0..1000 {
            lam = dual_step(lam, 0.8, 1e-2);
            assert!(lam >= 0.0);
        }
        assert_eq!(lam, 0.0);
        // never negative over a mixed gap trajectory
        let mut rng = Stream::from_seed(19);
        let mut lam = 0.3;
        for _ in 0..1000 {
            lam = dual_step(lam, rng.normal(), 0.05);
            assert!(lam >= 0.0);
        }
    }

    fn tiny_dataset(seed: u64, tag: DomainTag) -> OfflineDataset {
        let spec = crate::envs::EnvSpec::target(crate::envs::Family::PointMass2d);
        let mut d = crate::dataset::collect(
            &spec,
            &crate::envs::BehaviorSpec::tier(crate::envs::Quality::Medium),
            200,
            tag,
            seed,
        )
        .unwrap();
        d.transitions.iter_mut().for_each(|t| t.tag = tag);
        d
    }

    #[test]
    fn actor_update_schedule() {
        let mut cfg = small_cfg(Variant::NaiveMixBaseline);
        cfg.batch_size = 8;
        let d = tiny_dataset(1, DomainTag::Target);
        let mut rng = Stream::from_seed(23);
        let mut ac = ActorCriticState::new(d.state_dim(), d.action_dim(), &cfg, &mut rng.split("init")).unwrap();
        let before = ac.actor_params.params().to_vec();
        for _ in 0..10 {
            train_step(&mut ac, &cfg, &d, &d, None, None, &mut rng).unwrap();
        }
        assert_eq!(ac.step, 10);
        assert_eq!(ac.actor_params.step_count(), 5);
        assert_eq!(ac.critic1_params.step_count(), 10);
        assert_ne!(ac.actor_params.params(), &before[..]);
    }

    #[test]
    fn no_policy_reg_with_open_filter_matches_naive_baseline() {
        // no-policy-reg with w = 0 and threshold -inf is step-for-step
        // identical to plain TD3 on the same sampler.
        let d = tiny_dataset(2, DomainTag::Target);
        let trans = untrained_transition(d.state_dim(), d.action_dim(), 31);

        let mut cfg_a = small_cfg(Variant::NoPolicyReg);
        cfg_a.conservation_weight = 0.0;
        cfg_a.eps_prime_th = f64::NEG_INFINITY;
        cfg_a.batch_size = 8;
        let mut cfg_b = small_cfg(Variant::NaiveMixBaseline);
        cfg_b.conservation_weight = 0.0;
        cfg_b.batch_size = 8;

        let mut ac_a = ActorCriticState::new(d.state_dim(), d.action_dim(), &cfg_a, &mut Stream::derive(7, "i")).unwrap();
        let mut ac_b = ActorCriticState::new(d.state_dim(), d.action_dim(), &cfg_b, &mut Stream::derive(7, "i")).unwrap();
        let mut r_a = Stream::derive(7, "t");
        let mut r_b = Stream::derive(7, "t");
        for _ in 0..6 {
            train_step(&mut ac_a, &cfg_a, &d, &d, None, Some(&trans), &mut r_a).unwrap();
            train_step(&mut ac_b, &cfg_b, &d, &d, None, None, &mut r_b).unwrap();
        }
        assert_eq!(ac_a.actor_params.params(), ac_b.actor_params.params());
        assert_eq!(ac_a.critic1_params.params(), ac_b.critic1_params.params());
        assert_eq!(ac_a.critic2_params.params(), ac_b.critic2_params.params());
    }

    #[test]
    fn act_contract() {
        let cfg = small_cfg(Variant::Full);
        let mut rng = Stream::from_seed(29);
        let mut ac = ActorCriticState::new(3, 2, &cfg, &mut rng.split("init")).unwrap();

        assert!(matches!(
            act(&ac, &[0.0, 0.0]),
            Err(AgentError::StateDim { expected: 3, actual: 2 })
        ));

        let s = [0.4, -0.2, 1.0];
        assert_eq!(act(&ac, &s).unwrap(), act(&ac, &s).unwrap());

        for _ in 0..10_000 {
            let st = rng.normal_vec(3).iter().map(|x| x * 5.0).collect::<Vec<_>>();
            for a in act(&ac, &st).unwrap() {
                assert!(a.abs() <= 1.0);
            }
        }

        ac.actor_params = ParamStore::zeros(ac.actor_params.len());
        assert_eq!(act(&ac, &s).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dara_reward_formula() {
        let mut rng = Stream::from_seed(31);
        let t = Transition {
            state: vec![0.1, 0.2],
            action: vec![0.3],
            reward: 2.0,
            next_state: vec![0.4, 0.5],
            done: false,
            tag: DomainTag::Source,
        };

        let mut q_sas = DomainClassifier::new(5, 4, &mut rng.split("a")).unwrap();
        let mut q_sa = DomainClassifier::new(3, 4, &mut rng.split("b")).unwrap();
        assert!(matches!(
            dara_modified_reward(&t, &q_sas, &q_sa),
            Err(AgentError::UntrainedClassifier)
        ));

        // zero nets => p = 0.5 everywhere => reward unchanged
        q_sas.params = ParamStore::zeros(q_sas.params.len());
        q_sa.params = ParamStore::zeros(q_sa.params.len());
        q_sas.trained = true;
        q_sa.trained = true;
        assert!((dara_modified_reward(&t, &q_sas, &q_sa).unwrap() - 2.0).abs() < 1e-12);

        // bias-only q_sas with logit ln 9 => p = 0.9, ratio 9; q_sa neutral
        let n = q_sas.params.len();
        q_sas.params.params_mut()[n - 1] = 9.0f64.ln();
        let r = dara_modified_reward(&t, &q_sas, &q_sa).unwrap();
        assert!((r - (2.0 + 9.0f64.ln())).abs() < 1e-10);
    }

    #[test]
    fn classifier_separates_shifted_domains() {
        // source transitions have inverted action sign in the next state:
        // trainable signal for q_sas, none for q_sa
        let target = tiny_dataset(3, DomainTag::Target);
        let mut source = tiny_dataset(4, DomainTag::Source);
        for t in &mut source.transitions {
            for (ns, s) in t.next_state.iter_mut().zip(&t.state) {
                *ns = s - (*ns - s); // reflect the step direction
            }
        }
        let mix = crate::dataset::mix(&target, &source).unwrap();
        let (q_sas, q_sa) = train_domain_classifiers(&mix, 16, 800, 0.0, 5).unwrap();
        let mut deltas = Vec::new();
        for t in &source.transitions {
            let r = dara_modified_reward(t, &q_sas, &q_sa).unwrap();
            deltas.push(r - t.reward);
        }
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        assert!(mean < 0.0, "mean source reward correction {mean} not negative");
    }
}
