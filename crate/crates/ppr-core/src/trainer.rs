//! The training loop: on-policy segment collection, truncated-backprop
//! updates with off-tape V-trace targets, greedy evaluation, checkpoint
//! assembly, and the experiment driver that ties them together.
//!
//! Determinism contract: given one configuration, every run produces
//! bit-identical parameters, metrics, and checkpoints. Each random
//! consumer (action sampling, the auxiliary-loss gate, every
//! environment row, evaluation) owns a separate stream derived from the
//! experiment seed, so adding or removing one consumer never shifts
//! another's draws. Wall-clock time goes to a sidecar log, never into
//! the metrics file.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agents::{
    agent_step, episode_reset, episode_reset_on_tape, greedy_action, initial_state, sample_action,
    PprParams, PprState,
};
use crate::autograd::{ParamStore, Tape, Tensor};
use crate::checkpoint::{self, CheckpointData, Entry};
use crate::config::ExperimentConfig;
use crate::cores::{init_params, ModelConfig};
use crate::envs::{make_env, mix64, Env, EnvConfig};
use crate::error::{Error, Result};
use crate::losses::{
    actor_critic_parts, aux_loss_parts, sample_aux_gate, vtrace_targets, AuxGate,
};
use crate::metrics::{export_csv, read_metrics, MetricsRecord, MetricsWriter};
use crate::optim::Adam;

// ── Seed lanes ───────────────────────────────────────────────────────

const LANE_ACTION: u64 = 1;
const LANE_GATE: u64 = 2;
const LANE_ENV: u64 = 3;
const LANE_EVAL: u64 = 4;

fn lane_rng(seed: u64, lane: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed, lane))
}

fn env_row_seed(seed: u64, row: usize) -> u64 {
    mix64(mix64(seed, LANE_ENV), row as u64)
}

/// Seed for the evaluation lane of an experiment seed.
pub fn eval_seed(seed: u64) -> u64 {
    mix64(seed, LANE_EVAL)
}

fn rows_tensor(rows: &[Vec<f64>], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        debug_assert_eq!(r.len(), width);
        data.extend_from_slice(r);
    }
    Tensor::from_vec(vec![rows.len(), width], data)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ── Collected data ───────────────────────────────────────────────────

/// One collected on-policy segment of `T` transitions across `B`
/// environment rows, everything the update needs to replay the forward
/// pass and build targets.
pub struct TrajectorySegment {
    /// T × [B, F] raw observations, exactly as the agent saw them.
    pub obs: Vec<Tensor>,
    pub prev_actions: Vec<Vec<usize>>,
    pub prev_rewards: Vec<Vec<f64>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    pub dones: Vec<Vec<bool>>,
    /// T × [B, |A|] behavior-policy logits at collection time.
    pub behavior_logits: Vec<Tensor>,
    /// Agent state entering step 0, detached.
    pub initial_state: PprState,
    /// V(x_T): value of the first observation after the segment; rows
    /// that finished an episode at step T−1 are masked by the discount
    /// anyway.
    pub bootstrap_value: Vec<f64>,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Loss breakdown and gradient diagnostics of one update. All loss
/// fields are signed contributions to `loss_total`.
#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    pub loss_total: f64,
    pub loss_pg: f64,
    pub loss_baseline: f64,
    pub loss_entropy: f64,
    pub loss_aux: f64,
    pub loss_aux_rp: f64,
    pub loss_aux_rq: f64,
    pub loss_aux_pq: f64,
    /// Whether the per-update auxiliary gate fired.
    pub gate_applied: bool,
    /// Pre-clip global gradient norm (0 when no update was applied).
    pub grad_norm: f64,
}

// ── Trainer ──────────────────────────────────────────────────────────

/// Owns parameters, optimizer, environment rows, and the carried agent
/// state of one training run.
pub struct Trainer {
    cfg: ExperimentConfig,
    mcfg: ModelConfig,
    pub store: ParamStore,
    opt: Adam,
    envs: Vec<Box<dyn Env>>,
    state: PprState,
    prev_action: Vec<usize>,
    prev_reward: Vec<f64>,
    obs: Vec<Vec<f64>>,
    episode_return: Vec<f64>,
    env_steps: u64,
    action_rng: ChaCha8Rng,
    gate_rng: ChaCha8Rng,
    completed_returns: Vec<f64>,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mcfg = cfg.model_config();
        let store = init_params(cfg.seed, &mcfg)?;
        let opt = Adam::new(cfg.adam_config())?;
        let base_env = cfg.env_config();
        let mut envs = Vec::with_capacity(cfg.batch);
        let mut obs = Vec::with_capacity(cfg.batch);
        for row in 0..cfg.batch {
            let mut env = make_env(&EnvConfig {
                seed: env_row_seed(cfg.seed, row),
                ..base_env.clone()
            })?;
            obs.push(env.reset());
            envs.push(env);
        }
        Ok(Trainer {
            state: initial_state(cfg.batch, &mcfg),
            prev_action: vec![0; cfg.batch],
            prev_reward: vec![0.0; cfg.batch],
            episode_return: vec![0.0; cfg.batch],
            env_steps: 0,
            action_rng: lane_rng(cfg.seed, LANE_ACTION),
            gate_rng: lane_rng(cfg.seed, LANE_GATE),
            completed_returns: Vec::new(),
            cfg: cfg.clone(),
            mcfg,
            store,
            opt,
            envs,
            obs,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.mcfg
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn updates(&self) -> u64 {
        self.opt.step_count()
    }

    /// Returns of episodes finished since the last call, oldest first.
    pub fn take_completed_returns(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.completed_returns)
    }

    /// Step every environment row `segment_len` times under the current
    /// policy, sampling actions. Rows that finish an episode are reset
    /// immediately: their next transition starts the new episode with
    /// zeroed agent state and null previous action/reward.
    pub fn collect_segment(&mut self) -> Result<TrajectorySegment> {
        let t_len = self.cfg.segment_len;
        let batch = self.cfg.batch;
        let mut tape = Tape::inference();
        let params = PprParams::bind(&mut tape, &self.store, &self.mcfg)?;
        let initial = self.state.clone();
        let mut state = self.state.clone();
        let mut seg = TrajectorySegment {
            obs: Vec::with_capacity(t_len),
            prev_actions: Vec::with_capacity(t_len),
            prev_rewards: Vec::with_capacity(t_len),
            actions: Vec::with_capacity(t_len),
            rewards: Vec::with_capacity(t_len),
            dones: Vec::with_capacity(t_len),
            behavior_logits: Vec::with_capacity(t_len),
            initial_state: initial,
            bootstrap_value: Vec::new(),
        };
        for _ in 0..t_len {
            let obs_t = rows_tensor(&self.obs, self.mcfg.obs_width);
            let (next, out) = agent_step(
                &mut tape,
                &obs_t,
                &self.prev_action,
                &self.prev_reward,
                &state,
                &params,
            )?;
            seg.obs.push(obs_t);
            seg.prev_actions.push(self.prev_action.clone());
            seg.prev_rewards.push(self.prev_reward.clone());
            let actions: Vec<usize> = (0..batch)
                .map(|r| sample_action(&mut self.action_rng, out.pi_logits.row(r)))
                .collect();
            seg.behavior_logits.push(out.pi_logits.detached());
            let mut rewards = Vec::with_capacity(batch);
            let mut dones = Vec::with_capacity(batch);
            for r in 0..batch {
                let step = self.envs[r].step(actions[r])?;
                self.episode_return[r] += step.reward;
                rewards.push(step.reward);
                dones.push(step.done);
                if step.done {
                    self.completed_returns.push(self.episode_return[r]);
                    self.episode_return[r] = 0.0;
                    self.obs[r] = self.envs[r].reset();
                    self.prev_action[r] = 0;
                    self.prev_reward[r] = 0.0;
                } else {
                    self.obs[r] = step.obs;
                    self.prev_action[r] = actions[r];
                    self.prev_reward[r] = step.reward;
                }
            }
            state = episode_reset(&next, &dones);
            seg.actions.push(actions);
            seg.rewards.push(rewards);
            seg.dones.push(dones);
        }
        let obs_t = rows_tensor(&self.obs, self.mcfg.obs_width);
        let (_, out) = agent_step(
            &mut tape,
            &obs_t,
            &self.prev_action,
            &self.prev_reward,
            &state,
            &params,
        )?;
        seg.bootstrap_value = out.value.data().to_vec();
        self.state = state.detached();
        self.env_steps += (t_len * batch) as u64;
        Ok(seg)
    }

    /// Replay the segment on a recording tape and build the full loss.
    /// Episode boundaries inside the segment are replayed with on-tape
    /// masked resets, so gradients stop exactly at them while surviving
    /// rows keep their history.
    fn segment_forward(
        &self,
        seg: &TrajectorySegment,
        gate: &AuxGate,
    ) -> Result<(Tape, Tensor, TrainStats)> {
        let steps = seg.len();
        if steps == 0 {
            return Err(Error::Domain {
                op: "train_step",
                msg: "empty segment".into(),
            });
        }
        let mut tape = Tape::new();
        let params = PprParams::bind(&mut tape, &self.store, &self.mcfg)?;
        let mut state = seg.initial_state.clone();
        let mut pi = Vec::with_capacity(steps);
        let mut pi_prime = Vec::new();
        let mut pi_dprime = Vec::new();
        let mut values = Vec::with_capacity(steps);
        for t in 0..steps {
            let (next, out) = agent_step(
                &mut tape,
                &seg.obs[t],
                &seg.prev_actions[t],
                &seg.prev_rewards[t],
                &state,
                &params,
            )?;
            pi.push(out.pi_logits);
            if let Some(x) = out.pi_prime_logits {
                pi_prime.push(x);
            }
            if let Some(x) = out.pi_dprime_logits {
                pi_dprime.push(x);
            }
            values.push(out.value);
            state = episode_reset_on_tape(&mut tape, &next, &seg.dones[t])?;
        }

        let vcfg = self.cfg.vtrace_config();
        let values_data: Vec<Vec<f64>> = values.iter().map(|v| v.data().to_vec()).collect();
        let targets = vtrace_targets(
            &seg.rewards,
            &values_data,
            &seg.bootstrap_value,
            &seg.behavior_logits,
            &pi,
            &seg.actions,
            &seg.dones,
            &vcfg,
        )?;
        let rl = actor_critic_parts(&mut tape, &pi, &values, &seg.actions, &targets, &vcfg)?;
        let aux = aux_loss_parts(
            &mut tape,
            &pi,
            (!pi_prime.is_empty()).then_some(&pi_prime[..]),
            (!pi_dprime.is_empty()).then_some(&pi_dprime[..]),
            &self.cfg.aux_weights(),
            gate,
        )?;
        let total = tape.add(&rl.total, &aux.total)?;
        let stats = TrainStats {
            loss_total: total.item(),
            loss_pg: rl.pg,
            loss_baseline: rl.baseline,
            loss_entropy: rl.entropy,
            loss_aux: aux.total.item(),
            loss_aux_rp: aux.r_p,
            loss_aux_rq: aux.r_q,
            loss_aux_pq: aux.p_q,
            gate_applied: gate.applied,
            grad_norm: 0.0,
        };
        Ok((tape, total, stats))
    }

    /// Forward-only loss of a segment under an explicit gate; consumes
    /// no randomness and applies no update.
    pub fn segment_loss(&self, seg: &TrajectorySegment, gate: &AuxGate) -> Result<TrainStats> {
        self.segment_forward(seg, gate).map(|(_, _, s)| s)
    }

    /// One optimizer update from a collected segment. The auxiliary
    /// gate is always drawn — exactly one draw pair per update — so the
    /// random streams advance identically whatever the outcome or
    /// architecture.
    pub fn train_step(&mut self, seg: &TrajectorySegment) -> Result<TrainStats> {
        let gate = sample_aux_gate(&mut self.gate_rng, self.cfg.gate_rate);
        let (mut tape, total, mut stats) = self.segment_forward(seg, &gate)?;
        // Release-build guard; debug builds assert finiteness at every
        // tape node, which trips before the loss can go non-finite.
        if !stats.loss_total.is_finite() {
            return Err(Error::NonFiniteLoss {
                env_steps: self.env_steps,
                detail: format!("total loss = {}", stats.loss_total),
            });
        }
        let mut grads = tape.backward(&total)?;
        let report = self.opt.apply(&mut self.store, &mut grads)?;
        stats.grad_norm = report.raw_norm;
        Ok(stats)
    }

    // ── Checkpointing ────────────────────────────────────────────────

    /// Everything needed to continue the run bit-identically: params,
    /// optimizer moments, both random streams, the carried agent state,
    /// per-row episode bookkeeping, and each environment's latent
    /// state.
    pub fn to_checkpoint(&self) -> Result<CheckpointData> {
        let mut d = CheckpointData::new();
        d.insert("config_hash", Entry::u64_bits(self.cfg.config_hash()))?;
        d.insert("env_steps", Entry::u64_bits(self.env_steps))?;
        for (name, tensor, _) in self.store.iter() {
            d.insert(&format!("param/{name}"), Entry::tensor(tensor))?;
        }
        d.insert("adam/step", Entry::u64_bits(self.opt.step_count()))?;
        for (name, m, v) in self.opt.state_entries() {
            d.insert(&format!("adam/m/{name}"), Entry::vec(m.to_vec()))?;
            d.insert(&format!("adam/v/{name}"), Entry::vec(v.to_vec()))?;
        }
        d.insert("rng/action", Entry::Bytes(rng_state(&self.action_rng)))?;
        d.insert("rng/gate", Entry::Bytes(rng_state(&self.gate_rng)))?;
        for (field, s) in [
            ("slow", &self.state.slow),
            ("reaction", &self.state.reaction),
            ("perception", &self.state.perception),
            ("prediction", &self.state.prediction),
        ] {
            d.insert(&format!("state/{field}/h"), Entry::tensor(&s.h))?;
            d.insert(&format!("state/{field}/c"), Entry::tensor(&s.c))?;
        }
        d.insert(
            "state/t",
            Entry::vec(self.state.t.iter().map(|x| *x as f64).collect()),
        )?;
        d.insert(
            "prev_action",
            Entry::vec(self.prev_action.iter().map(|a| *a as f64).collect()),
        )?;
        d.insert("prev_reward", Entry::vec(self.prev_reward.clone()))?;
        d.insert(
            "obs",
            Entry::tensor(&rows_tensor(&self.obs, self.mcfg.obs_width)),
        )?;
        d.insert("episode_return", Entry::vec(self.episode_return.clone()))?;
        for (r, env) in self.envs.iter().enumerate() {
            d.insert(&format!("env/{r}"), Entry::Bytes(env.save_state()))?;
        }
        Ok(d)
    }

    /// Rebuild a trainer from a checkpoint. The checkpoint's parameter
    /// set must match the configured architecture exactly; a mismatch
    /// reports every missing and unexpected entry by name.
    pub fn restore(cfg: &ExperimentConfig, data: &CheckpointData) -> Result<Trainer> {
        let mut tr = Trainer::new(cfg)?;
        fill_params(&mut tr.store, cfg.architecture.as_str(), data)?;

        let step = data.require("adam/step")?.as_u64_bits()?;
        let mut slots = Vec::new();
        for (name, entry) in data.iter() {
            let Some(pname) = name.strip_prefix("adam/m/") else {
                continue;
            };
            if !tr.store.contains(pname) {
                return Err(Error::Checkpoint(format!(
                    "optimizer slot for unknown parameter `{pname}`"
                )));
            }
            let m = entry.as_tensor()?.data().to_vec();
            let v = data
                .require(&format!("adam/v/{pname}"))?
                .as_tensor()?
                .data()
                .to_vec();
            slots.push((pname.to_string(), m, v));
        }
        tr.opt.load_state(step, slots)?;

        tr.env_steps = data.require("env_steps")?.as_u64_bits()?;
        tr.action_rng = rng_from_state(data.require("rng/action")?.as_bytes()?)?;
        tr.gate_rng = rng_from_state(data.require("rng/gate")?.as_bytes()?)?;

        let batch = cfg.batch;
        let hidden = cfg.hidden;
        let lstm_state = |h: Tensor, c: Tensor| -> Result<crate::cores::LstmState> {
            for t in [&h, &c] {
                if t.shape() != [batch, hidden] {
                    return Err(Error::Checkpoint(format!(
                        "agent state tensor has shape {:?}, expected [{batch}, {hidden}]",
                        t.shape()
                    )));
                }
            }
            Ok(crate::cores::LstmState { h, c })
        };
        let field = |name: &str| -> Result<crate::cores::LstmState> {
            lstm_state(
                data.require(&format!("state/{name}/h"))?.as_tensor()?,
                data.require(&format!("state/{name}/c"))?.as_tensor()?,
            )
        };
        let t_raw = data.require("state/t")?.as_tensor()?;
        let t_vals = checked_counts(t_raw.data(), batch, "state/t")?;
        tr.state = PprState {
            slow: field("slow")?,
            reaction: field("reaction")?,
            perception: field("perception")?,
            prediction: field("prediction")?,
            t: t_vals,
        };

        let pa = data.require("prev_action")?.as_tensor()?;
        let pa = checked_counts(pa.data(), batch, "prev_action")?;
        for a in &pa {
            if *a as usize >= tr.mcfg.num_actions {
                return Err(Error::Checkpoint(format!(
                    "previous action {a} out of range"
                )));
            }
        }
        tr.prev_action = pa.iter().map(|a| *a as usize).collect();
        tr.prev_reward = row_vec(data, "prev_reward", batch)?;
        tr.episode_return = row_vec(data, "episode_return", batch)?;

        let obs = data.require("obs")?.as_tensor()?;
        if obs.shape() != [batch, tr.mcfg.obs_width] {
            return Err(Error::Checkpoint(format!(
                "observation block has shape {:?}, expected [{batch}, {}]",
                obs.shape(),
                tr.mcfg.obs_width
            )));
        }
        tr.obs = (0..batch).map(|r| obs.row(r).to_vec()).collect();

        for (r, env) in tr.envs.iter_mut().enumerate() {
            env.load_state(data.require(&format!("env/{r}"))?.as_bytes()?)?;
        }
        Ok(tr)
    }
}

/// Overwrite every tensor in `store` from the checkpoint's `param/`
/// entries. The two parameter sets must coincide exactly; otherwise
/// every missing and unexpected entry is reported by name.
fn fill_params(store: &mut ParamStore, arch: &str, data: &CheckpointData) -> Result<()> {
    let wanted: Vec<(String, Vec<usize>)> = store
        .iter()
        .map(|(n, t, _)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let known: HashSet<String> = wanted.iter().map(|(n, _)| format!("param/{n}")).collect();
    let mut missing: Vec<String> = wanted
        .iter()
        .filter(|(n, _)| data.get(&format!("param/{n}")).is_none())
        .map(|(n, _)| format!("param/{n}"))
        .collect();
    let mut unexpected: Vec<String> = data
        .names()
        .filter(|n| n.starts_with("param/") && !known.contains(*n))
        .map(|n| n.to_string())
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        missing.sort();
        unexpected.sort();
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match architecture `{arch}`: missing [{}]; unexpected [{}]",
            missing.join(", "),
            unexpected.join(", ")
        )));
    }
    for (name, shape) in &wanted {
        let t = data.require(&format!("param/{name}"))?.as_tensor()?;
        if t.shape() != &shape[..] {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?} in the checkpoint, expected {:?}",
                t.shape(),
                shape
            )));
        }
        store.set(name, t)?;
    }
    Ok(())
}

/// Build the parameter store for `cfg`'s architecture from a
/// checkpoint's `param/` entries, with no run state attached. Used for
/// standalone evaluation of trained agents.
pub fn load_params(cfg: &ExperimentConfig, data: &CheckpointData) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = init_params(cfg.seed, &cfg.model_config())?;
    fill_params(&mut store, cfg.architecture.as_str(), data)?;
    Ok(store)
}

/// 48-byte serialized stream state: 32-byte seed plus the 128-bit word
/// position.
fn rng_state(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(48);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn rng_from_state(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 48 {
        return Err(Error::Checkpoint(format!(
            "random stream state must be 48 bytes, got {}",
            bytes.len()
        )));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let pos = u128::from_le_bytes(bytes[32..48].try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Decode a vector of small nonnegative integers stored as f64.
fn checked_counts(data: &[f64], expect_len: usize, what: &str) -> Result<Vec<u64>> {
    if data.len() != expect_len {
        return Err(Error::Checkpoint(format!(
            "`{what}` has {} entries, expected {expect_len}",
            data.len()
        )));
    }
    data.iter()
        .map(|v| {
            if *v < 0.0 || v.fract() != 0.0 {
                Err(Error::Checkpoint(format!(
                    "`{what}` entry {v} is not a nonnegative integer"
                )))
            } else {
                Ok(*v as u64)
            }
        })
        .collect()
}

fn row_vec(data: &CheckpointData, name: &str, expect_len: usize) -> Result<Vec<f64>> {
    let v = data.require(name)?.as_tensor()?.data().to_vec();
    if v.len() != expect_len {
        return Err(Error::Checkpoint(format!(
            "`{name}` has {} entries, expected {expect_len}",
            v.len()
        )));
    }
    Ok(v)
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Which policy drives the environment during evaluation. All agent
/// modes act greedily; episodes are seeded from the evaluation lane so
/// every mode sees the same episode layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// The behavior policy π.
    BehaviorPi,
    /// π″ exactly at within-episode steps with t mod τ = k (1 ≤ k < τ),
    /// π everywhere else.
    PredictionFixedK(u64),
    /// π″ for the first k steps of each slow period, t mod τ < k
    /// (1 ≤ k ≤ τ), π for the rest.
    PredictionBranchFollow(u64),
    /// Uniform random actions; the parameters are ignored. Baseline for
    /// judging prediction-driven control.
    UniformRandom,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    /// Standard error of the mean return (0 for a single episode).
    pub stderr: f64,
    /// Fraction of episodes with strictly positive return.
    pub success_rate: f64,
}

pub fn evaluate(
    store: &ParamStore,
    mcfg: &ModelConfig,
    env_cfg: &EnvConfig,
    episodes: usize,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::Domain {
            op: "evaluate",
            msg: "need at least one episode".into(),
        });
    }
    match mode {
        EvalMode::BehaviorPi | EvalMode::UniformRandom => {}
        EvalMode::PredictionFixedK(k) => {
            require_prediction(mcfg, "prediction_fixed_k")?;
            if k < 1 || k >= mcfg.tau {
                return Err(Error::Domain {
                    op: "evaluate",
                    msg: format!(
                        "fixed-k offset {k} outside 1..{} for period {}",
                        mcfg.tau, mcfg.tau
                    ),
                });
            }
        }
        EvalMode::PredictionBranchFollow(k) => {
            require_prediction(mcfg, "prediction_branch_follow")?;
            if k < 1 || k > mcfg.tau {
                return Err(Error::Domain {
                    op: "evaluate",
                    msg: format!(
                        "branch-follow horizon {k} outside 1..={} for period {}",
                        mcfg.tau, mcfg.tau
                    ),
                });
            }
        }
    }

    let mut tape = Tape::inference();
    let params = if mode == EvalMode::UniformRandom {
        None
    } else {
        Some(PprParams::bind(&mut tape, store, mcfg)?)
    };

    let mut returns = Vec::with_capacity(episodes);
    let mut successes = 0usize;
    for ep in 0..episodes {
        let mut env = make_env(&EnvConfig {
            seed: mix64(seed, 2 * ep as u64),
            ..env_cfg.clone()
        })?;
        let mut total = 0.0;
        match &params {
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, 2 * ep as u64 + 1));
                env.reset();
                for _ in 0..env.episode_len() {
                    let action = rand::Rng::gen_range(&mut rng, 0..env.num_actions());
                    let step = env.step(action)?;
                    total += step.reward;
                    if step.done {
                        break;
                    }
                }
            }
            Some(params) => {
                let mut state = initial_state(1, mcfg);
                let mut obs = env.reset();
                let mut prev_action = 0usize;
                let mut prev_reward = 0.0;
                for _ in 0..env.episode_len() {
                    let phase = state.t[0] % mcfg.tau;
                    let obs_t = rows_tensor(std::slice::from_ref(&obs), mcfg.obs_width);
                    let (next, out) = agent_step(
                        &mut tape,
                        &obs_t,
                        &[prev_action],
                        &[prev_reward],
                        &state,
                        params,
                    )?;
                    let use_prediction = match mode {
                        EvalMode::BehaviorPi | EvalMode::UniformRandom => false,
                        EvalMode::PredictionFixedK(k) => phase == k,
                        EvalMode::PredictionBranchFollow(k) => phase < k,
                    };
                    let logits = if use_prediction {
                        out.pi_dprime_logits
                            .as_ref()
                            .expect("prediction modes checked above")
                            .row(0)
                    } else {
                        out.pi_logits.row(0)
                    };
                    let action = greedy_action(logits);
                    let step = env.step(action)?;
                    total += step.reward;
                    if step.done {
                        break;
                    }
                    state = next;
                    obs = step.obs;
                    prev_action = action;
                    prev_reward = step.reward;
                }
            }
        }
        if total > 0.0 {
            successes += 1;
        }
        returns.push(total);
    }

    let mean_return = mean(&returns);
    let stderr = if returns.len() < 2 {
        0.0
    } else {
        let var = returns
            .iter()
            .map(|r| (r - mean_return).powi(2))
            .sum::<f64>()
            / (returns.len() - 1) as f64;
        (var / returns.len() as f64).sqrt()
    };
    Ok(EvalSummary {
        episodes,
        mean_return,
        stderr,
        success_rate: successes as f64 / episodes as f64,
    })
}

fn require_prediction(mcfg: &ModelConfig, mode: &str) -> Result<()> {
    if mcfg.architecture.has_prediction() {
        Ok(())
    } else {
        Err(Error::EvalModeMismatch {
            mode: mode.into(),
            arch: mcfg.architecture.as_str().into(),
        })
    }
}

// ── Experiment driver ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct RunSummary {
    pub env_steps: u64,
    pub updates: u64,
    /// Present unless the run was stopped early.
    pub final_eval: Option<EvalSummary>,
}

/// Run (or resume) one experiment in `out_dir`, writing `metrics.txt`,
/// `metrics.csv`, `manifest.txt`, `checkpoint.bin`, and a wall-clock
/// sidecar `progress.log`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    run_experiment_with_limit(cfg, out_dir, None)
}

/// Like `run_experiment`, but stop without finalizing once `env_steps`
/// reaches `stop_after`, as if the process had been interrupted; a
/// later call on the same directory resumes from the newest checkpoint
/// and reproduces the uninterrupted run bit for bit.
pub fn run_experiment_with_limit(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    stop_after: Option<u64>,
) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.txt");
    let ckpt_path = out_dir.join("checkpoint.bin");
    let started = Instant::now();

    std::fs::write(
        out_dir.join("manifest.txt"),
        format!(
            "version = {}\nconfig_hash = {:016x}\n\n{}",
            env!("CARGO_PKG_VERSION"),
            cfg.config_hash(),
            cfg.to_lines()
        ),
    )?;
    let mut progress = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("progress.log"))?;

    let resuming = ckpt_path.exists();
    let mut last_eval_at: Option<u64> = None;
    let (mut trainer, mut writer) = if resuming {
        let data = checkpoint::load(&ckpt_path)?;
        let saved = data.require("config_hash")?.as_u64_bits()?;
        if saved != cfg.config_hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint in {} was written under a different configuration \
                 (hash {saved:016x}, this run is {:016x})",
                out_dir.display(),
                cfg.config_hash()
            )));
        }
        let trainer = Trainer::restore(cfg, &data)?;
        // Drop metrics recorded after the checkpoint, then continue the
        // file; the rewritten prefix is byte-identical to what the
        // original writer produced.
        let keep: Vec<MetricsRecord> = if metrics_path.exists() {
            read_metrics(&metrics_path)?
                .into_iter()
                .filter(|r| r.env_steps <= trainer.env_steps())
                .collect()
        } else {
            Vec::new()
        };
        last_eval_at = keep
            .iter()
            .rev()
            .find(|r| r.get("eval_return").is_some())
            .map(|r| r.env_steps);
        let mut w = MetricsWriter::create(&metrics_path)?;
        for r in &keep {
            w.write(r)?;
        }
        (trainer, w)
    } else {
        (Trainer::new(cfg)?, MetricsWriter::create(&metrics_path)?)
    };

    let schedule = |interval: u64, steps: u64, fresh_start: bool| -> Option<u64> {
        if interval == 0 {
            None
        } else if fresh_start {
            Some(0)
        } else {
            Some((steps / interval + 1) * interval)
        }
    };
    let mut next_eval = schedule(cfg.eval_interval, trainer.env_steps(), !resuming);
    let mut next_ckpt = schedule(cfg.checkpoint_interval, trainer.env_steps(), !resuming);

    let mut stopped_early = false;
    loop {
        if let Some(ne) = next_eval {
            if trainer.env_steps() >= ne {
                let summary = run_eval(&trainer, cfg)?;
                write_eval_record(&mut writer, trainer.env_steps(), &summary)?;
                last_eval_at = Some(trainer.env_steps());
                next_eval = Some((trainer.env_steps() / cfg.eval_interval + 1) * cfg.eval_interval);
                writeln!(
                    progress,
                    "env_steps={} wall_time_s={:.3} eval_return={}",
                    trainer.env_steps(),
                    started.elapsed().as_secs_f64(),
                    summary.mean_return
                )?;
            }
        }
        if let Some(nc) = next_ckpt {
            if trainer.env_steps() >= nc {
                checkpoint::save(&ckpt_path, &trainer.to_checkpoint()?)?;
                next_ckpt =
                    Some((trainer.env_steps() / cfg.checkpoint_interval + 1) * cfg.checkpoint_interval);
            }
        }
        if trainer.env_steps() >= cfg.total_env_steps {
            break;
        }
        if let Some(stop) = stop_after {
            if trainer.env_steps() >= stop {
                stopped_early = true;
                break;
            }
        }

        let seg = trainer.collect_segment()?;
        let stats = trainer.train_step(&seg)?;
        let mut rec = MetricsRecord::new(trainer.env_steps());
        let finished = trainer.take_completed_returns();
        if !finished.is_empty() {
            rec.push("train_return", mean(&finished));
        }
        rec.push("loss_total", stats.loss_total)
            .push("loss_pg", stats.loss_pg)
            .push("loss_baseline", stats.loss_baseline)
            .push("loss_entropy", stats.loss_entropy)
            .push("loss_aux", stats.loss_aux)
            .push("loss_aux_rp", stats.loss_aux_rp)
            .push("loss_aux_rq", stats.loss_aux_rq)
            .push("loss_aux_pq", stats.loss_aux_pq)
            .push("aux_gate", if stats.gate_applied { 1.0 } else { 0.0 })
            .push("grad_norm", stats.grad_norm);
        writer.write(&rec)?;
    }

    let final_eval = if stopped_early {
        None
    } else {
        let summary = run_eval(&trainer, cfg)?;
        if last_eval_at != Some(trainer.env_steps()) {
            write_eval_record(&mut writer, trainer.env_steps(), &summary)?;
        }
        checkpoint::save(&ckpt_path, &trainer.to_checkpoint()?)?;
        let records = read_metrics(&metrics_path)?;
        export_csv(&records, &out_dir.join("metrics.csv"))?;
        writeln!(
            progress,
            "env_steps={} wall_time_s={:.3} done",
            trainer.env_steps(),
            started.elapsed().as_secs_f64()
        )?;
        Some(summary)
    };

    Ok(RunSummary {
        env_steps: trainer.env_steps(),
        updates: trainer.updates(),
        final_eval,
    })
}

fn run_eval(trainer: &Trainer, cfg: &ExperimentConfig) -> Result<EvalSummary> {
    evaluate(
        &trainer.store,
        trainer.model_config(),
        &cfg.env_config(),
        cfg.eval_episodes,
        EvalMode::BehaviorPi,
        eval_seed(cfg.seed),
    )
}

fn write_eval_record(
    writer: &mut MetricsWriter,
    env_steps: u64,
    summary: &EvalSummary,
) -> Result<()> {
    let mut rec = MetricsRecord::new(env_steps);
    rec.push("eval_return", summary.mean_return)
        .push("eval_stderr", summary.stderr)
        .push("success_rate", summary.success_rate);
    writer.write(&rec)
}
