//! Training objectives: the V-trace actor-critic loss and the gated
//! symmetrized-KL auxiliary loss that couples the three policies.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::tape::softmax_kernel;
use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};

/// Weights of the three pairwise policy-distance terms plus the
/// probability that a given batch applies the auxiliary loss at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxWeights {
    /// Weight for d(π, π′).
    pub lambda_r_p: f64,
    /// Weight for d(π, π″).
    pub lambda_r_q: f64,
    /// Weight for d(π′, π″).
    pub lambda_p_q: f64,
    /// Probability of applying the loss to a batch.
    pub gate_rate: f64,
}

impl AuxWeights {
    pub fn zero() -> AuxWeights {
        AuxWeights {
            lambda_r_p: 0.0,
            lambda_r_q: 0.0,
            lambda_p_q: 0.0,
            gate_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda_r_p)
            || !finite_nonneg(self.lambda_r_q)
            || !finite_nonneg(self.lambda_p_q)
        {
            return Err(Error::Domain {
                op: "aux_weights",
                msg: "pair weights must be finite and nonnegative".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.gate_rate) {
            return Err(Error::Domain {
                op: "aux_weights",
                msg: format!("gate_rate {} outside [0,1]", self.gate_rate),
            });
        }
        Ok(())
    }

    pub fn any_active(&self) -> bool {
        self.lambda_r_p > 0.0 || self.lambda_r_q > 0.0 || self.lambda_p_q > 0.0
    }
}

/// Discount and clipping constants of the off-policy corrected
/// actor-critic objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VtraceConfig {
    pub gamma: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    pub baseline_weight: f64,
    pub entropy_weight: f64,
}

impl Default for VtraceConfig {
    fn default() -> Self {
        VtraceConfig {
            gamma: 0.99,
            rho_bar: 1.0,
            c_bar: 1.0,
            baseline_weight: 0.5,
            entropy_weight: 0.01,
        }
    }
}

impl VtraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Domain {
                op: "vtrace_config",
                msg: format!("gamma {} outside (0,1]", self.gamma),
            });
        }
        if !(self.rho_bar > 0.0 && self.c_bar > 0.0) {
            return Err(Error::Domain {
                op: "vtrace_config",
                msg: "importance-weight clips must be positive".into(),
            });
        }
        if self.rho_bar < self.c_bar {
            return Err(Error::Domain {
                op: "vtrace_config",
                msg: format!("rho_bar {} must be ≥ c_bar {}", self.rho_bar, self.c_bar),
            });
        }
        if self.baseline_weight < 0.0 || self.entropy_weight < 0.0 {
            return Err(Error::Domain {
                op: "vtrace_config",
                msg: "loss term weights must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

// ── Symmetrized KL ───────────────────────────────────────────────────

/// d(p, q) = KL(p‖q) + KL(q‖p) per batch row, from raw logits.
/// Written as Σ (p − q)(log p − log q), which is symmetric and
/// nonnegative term by term.
pub fn sym_kl(tape: &mut Tape, p_logits: &Tensor, q_logits: &Tensor) -> Result<Tensor> {
    let lp = tape.log_softmax(p_logits)?;
    let lq = tape.log_softmax(q_logits)?;
    let p = tape.exp(&lp)?;
    let q = tape.exp(&lq)?;
    let dp = tape.sub(&p, &q)?;
    let dl = tape.sub(&lp, &lq)?;
    let prod = tape.mul(&dp, &dl)?;
    tape.sum_last(&prod)
}

// ── Auxiliary loss gating ────────────────────────────────────────────

/// One batch's gate draw: whether the loss applies, and the uniform
/// scale it is multiplied by when it does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxGate {
    pub applied: bool,
    pub scale: f64,
}

impl AuxGate {
    /// Gate forced fully open; used by tests and deterministic replays.
    pub fn open() -> AuxGate {
        AuxGate {
            applied: true,
            scale: 1.0,
        }
    }
}

/// Draw the per-batch gate. Both random numbers are always consumed so
/// the stream position never depends on the outcome.
pub fn sample_aux_gate(rng: &mut ChaCha8Rng, gate_rate: f64) -> AuxGate {
    let g = rng.gen::<f64>() < gate_rate;
    let u: f64 = rng.gen();
    AuxGate {
        applied: g,
        scale: if g { u } else { 0.0 },
    }
}

/// Auxiliary loss with its per-pair gated contributions (plain values
/// for metrics; the tensor carries the gradient).
#[derive(Debug, Clone)]
pub struct AuxLossParts {
    pub total: Tensor,
    pub r_p: f64,
    pub r_q: f64,
    pub p_q: f64,
}

impl AuxLossParts {
    fn zero() -> AuxLossParts {
        AuxLossParts {
            total: Tensor::scalar(0.0),
            r_p: 0.0,
            r_q: 0.0,
            p_q: 0.0,
        }
    }
}

/// Mean over time and batch of the λ-weighted pairwise policy
/// distances, multiplied by the gate scale. Pairs with zero weight are
/// skipped; an active pair whose branch is missing is an error.
pub fn aux_loss_gated(
    tape: &mut Tape,
    pi_logits: &[Tensor],
    pi_prime_logits: Option<&[Tensor]>,
    pi_dprime_logits: Option<&[Tensor]>,
    weights: &AuxWeights,
    gate: &AuxGate,
) -> Result<Tensor> {
    Ok(aux_loss_parts(tape, pi_logits, pi_prime_logits, pi_dprime_logits, weights, gate)?.total)
}

/// As aux_loss_gated, also reporting each pair's gated value.
pub fn aux_loss_parts(
    tape: &mut Tape,
    pi_logits: &[Tensor],
    pi_prime_logits: Option<&[Tensor]>,
    pi_dprime_logits: Option<&[Tensor]>,
    weights: &AuxWeights,
    gate: &AuxGate,
) -> Result<AuxLossParts> {
    weights.validate()?;
    if !weights.any_active() || gate.scale == 0.0 {
        return Ok(AuxLossParts::zero());
    }
    let steps = pi_logits.len();
    let need = |branch: Option<&[Tensor]>, name: &str| -> Result<()> {
        match branch {
            Some(seq) if seq.len() == steps => Ok(()),
            Some(_) => Err(Error::Domain {
                op: "aux_loss",
                msg: format!("{name} sequence length differs from π's"),
            }),
            None => Err(Error::Domain {
                op: "aux_loss",
                msg: format!("{name} branch required by a nonzero weight but absent"),
            }),
        }
    };
    if weights.lambda_r_p > 0.0 || weights.lambda_p_q > 0.0 {
        need(pi_prime_logits, "perception policy")?;
    }
    if weights.lambda_r_q > 0.0 || weights.lambda_p_q > 0.0 {
        need(pi_dprime_logits, "prediction policy")?;
    }

    // One accumulator per active pair: Σ_t mean_B λ·d.
    let mut pair_accs: [Option<Tensor>; 3] = [None, None, None];
    for t in 0..steps {
        let pairs: [(f64, Option<(&Tensor, &Tensor)>); 3] = [
            (
                weights.lambda_r_p,
                pi_prime_logits.map(|pp| (&pi_logits[t], &pp[t])),
            ),
            (
                weights.lambda_r_q,
                pi_dprime_logits.map(|pq| (&pi_logits[t], &pq[t])),
            ),
            (
                weights.lambda_p_q,
                match (pi_prime_logits, pi_dprime_logits) {
                    (Some(pp), Some(pq)) => Some((&pp[t], &pq[t])),
                    _ => None,
                },
            ),
        ];
        for (slot, (lambda, operands)) in pairs.into_iter().enumerate() {
            if lambda == 0.0 {
                continue;
            }
            let (a, b) = operands.expect("presence checked above");
            let d = sym_kl(tape, a, b)?;
            let weighted = tape.scale(&d, lambda)?;
            let step_mean = tape.mean(&weighted)?;
            pair_accs[slot] = Some(match pair_accs[slot].take() {
                Some(acc) => tape.add(&acc, &step_mean)?,
                None => step_mean,
            });
        }
    }

    let mut pair_values = [0.0; 3];
    let mut total: Option<Tensor> = None;
    for (slot, acc) in pair_accs.into_iter().enumerate() {
        let Some(acc) = acc else { continue };
        let averaged = tape.scale(&acc, 1.0 / steps as f64)?;
        let gated = tape.scale(&averaged, gate.scale)?;
        pair_values[slot] = gated.item();
        total = Some(match total {
            Some(t) => tape.add(&t, &gated)?,
            None => gated,
        });
    }
    Ok(AuxLossParts {
        total: total.expect("at least one active pair"),
        r_p: pair_values[0],
        r_q: pair_values[1],
        p_q: pair_values[2],
    })
}

/// Convenience wrapper that draws the gate from the given stream.
pub fn aux_loss(
    tape: &mut Tape,
    pi_logits: &[Tensor],
    pi_prime_logits: Option<&[Tensor]>,
    pi_dprime_logits: Option<&[Tensor]>,
    weights: &AuxWeights,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let gate = sample_aux_gate(rng, weights.gate_rate);
    aux_loss_gated(tape, pi_logits, pi_prime_logits, pi_dprime_logits, weights, &gate)
}

// ── V-trace targets ──────────────────────────────────────────────────

/// Per-step value targets and policy-gradient advantages, time-major
/// [T][B]. Plain numbers: the backward recursion runs off-tape and the
/// results enter the loss as constants.
#[derive(Debug, Clone)]
pub struct VtraceOut {
    pub vs: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
}

fn log_prob_of(logits: &Tensor, row: usize, action: usize) -> f64 {
    let r = logits.row(row);
    softmax_kernel(r, r.len(), true)[action]
}

/// Truncated-importance-weighted value targets.
///
/// With γ_s = γ·(1 − done_s), ρ_s and c_s the clipped likelihood
/// ratios:
///   δ_s = ρ_s (r_s + γ_s V_{s+1} − V_s)
///   v_s = V_s + δ_s + γ_s c_s (v_{s+1} − V_{s+1})
///   adv_s = ρ_s (r_s + γ_s v_{s+1} − V_s)
/// The recursion runs backward from the bootstrap value, and γ_s = 0 at
/// episode ends keeps targets from crossing boundaries.
#[allow(clippy::too_many_arguments)]
pub fn vtrace_targets(
    rewards: &[Vec<f64>],
    values: &[Vec<f64>],
    bootstrap: &[f64],
    behavior_logits: &[Tensor],
    target_logits: &[Tensor],
    actions: &[Vec<usize>],
    dones: &[Vec<bool>],
    cfg: &VtraceConfig,
) -> Result<VtraceOut> {
    cfg.validate()?;
    let steps = rewards.len();
    if values.len() != steps
        || behavior_logits.len() != steps
        || target_logits.len() != steps
        || actions.len() != steps
        || dones.len() != steps
    {
        return Err(Error::Domain {
            op: "vtrace",
            msg: format!(
                "time dimensions disagree: rewards {}, values {}, behavior {}, target {}, actions {}, dones {}",
                steps,
                values.len(),
                behavior_logits.len(),
                target_logits.len(),
                actions.len(),
                dones.len()
            ),
        });
    }
    if steps == 0 {
        return Err(Error::Domain {
            op: "vtrace",
            msg: "empty segment".into(),
        });
    }
    let batch = bootstrap.len();
    for t in 0..steps {
        if rewards[t].len() != batch
            || values[t].len() != batch
            || actions[t].len() != batch
            || dones[t].len() != batch
            || behavior_logits[t].shape()[0] != batch
            || target_logits[t].shape()[0] != batch
        {
            return Err(Error::Domain {
                op: "vtrace",
                msg: format!("batch dimensions disagree at step {t}"),
            });
        }
    }

    let mut vs = vec![vec![0.0; batch]; steps];
    let mut advantages = vec![vec![0.0; batch]; steps];
    for b in 0..batch {
        // v_{s+1} − V_{s+1} for the step below; zero at the bootstrap.
        let mut next_gap = 0.0;
        let mut next_v = bootstrap[b];
        let mut next_vs = bootstrap[b];
        for s in (0..steps).rev() {
            let ratio = (log_prob_of(&target_logits[s], b, actions[s][b])
                - log_prob_of(&behavior_logits[s], b, actions[s][b]))
            .exp();
            let rho = ratio.min(cfg.rho_bar);
            let c = ratio.min(cfg.c_bar);
            let g = if dones[s][b] { 0.0 } else { cfg.gamma };
            let delta = rho * (rewards[s][b] + g * next_v - values[s][b]);
            let v = values[s][b] + delta + g * c * next_gap;
            advantages[s][b] = rho * (rewards[s][b] + g * next_vs - values[s][b]);
            vs[s][b] = v;
            next_gap = v - values[s][b];
            next_v = values[s][b];
            next_vs = v;
        }
    }
    Ok(VtraceOut { vs, advantages })
}

// ── Actor-critic assembly ────────────────────────────────────────────

fn one_hot_rows(actions: &[usize], num_actions: usize) -> Tensor {
    let mut data = vec![0.0; actions.len() * num_actions];
    for (row, a) in actions.iter().enumerate() {
        data[row * num_actions + a] = 1.0;
    }
    Tensor::from_vec(vec![actions.len(), num_actions], data)
}

/// Policy-gradient + baseline + entropy objective. Advantages and value
/// targets are constants; only the behavior policy π receives the
/// policy-gradient and entropy terms.
pub fn actor_critic_loss(
    tape: &mut Tape,
    pi_logits: &[Tensor],
    values: &[Tensor],
    actions: &[Vec<usize>],
    targets: &VtraceOut,
    cfg: &VtraceConfig,
) -> Result<Tensor> {
    Ok(actor_critic_parts(tape, pi_logits, values, actions, targets, cfg)?.total)
}

/// Loss-term breakdown of the actor-critic objective. The three scalar fields
/// are the signed contributions to `total` (so `pg + baseline + entropy`
/// reproduces `total` up to rounding); `entropy` is the weighted
/// negative-entropy term, not the entropy itself.
pub struct RlLossParts {
    pub total: Tensor,
    pub pg: f64,
    pub baseline: f64,
    pub entropy: f64,
}

pub fn actor_critic_parts(
    tape: &mut Tape,
    pi_logits: &[Tensor],
    values: &[Tensor],
    actions: &[Vec<usize>],
    targets: &VtraceOut,
    cfg: &VtraceConfig,
) -> Result<RlLossParts> {
    cfg.validate()?;
    let steps = pi_logits.len();
    if values.len() != steps || actions.len() != steps || targets.vs.len() != steps {
        return Err(Error::Domain {
            op: "actor_critic_loss",
            msg: "sequence lengths disagree".into(),
        });
    }
    let mut total: Option<Tensor> = None;
    let mut pg_total = 0.0;
    let mut bl_total = 0.0;
    let mut ent_total = 0.0;
    for t in 0..steps {
        let num_actions = pi_logits[t].shape()[1];
        let logp = tape.log_softmax(&pi_logits[t])?;
        let hot = one_hot_rows(&actions[t], num_actions);
        let picked_terms = tape.mul(&logp, &hot)?;
        let picked = tape.sum_last(&picked_terms)?;
        let adv = Tensor::from_vec(vec![actions[t].len()], targets.advantages[t].clone());
        let weighted = tape.mul(&picked, &adv)?;
        let pg = tape.sum(&weighted)?;
        let pg = tape.scale(&pg, -1.0)?;

        let vs = Tensor::from_vec(vec![actions[t].len()], targets.vs[t].clone());
        let err = tape.sub(&values[t], &vs)?;
        let sq = tape.mul(&err, &err)?;
        let bl_sum = tape.sum(&sq)?;
        let bl = tape.scale(&bl_sum, cfg.baseline_weight)?;

        let probs = tape.exp(&logp)?;
        let plogp = tape.mul(&probs, &logp)?;
        let neg_ent = tape.sum(&plogp)?;
        // −w·entropy = +w·Σ p log p
        let ent = tape.scale(&neg_ent, cfg.entropy_weight)?;

        pg_total += pg.item();
        bl_total += bl.item();
        ent_total += ent.item();

        let mut step_loss = tape.add(&pg, &bl)?;
        step_loss = tape.add(&step_loss, &ent)?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &step_loss)?,
            None => step_loss,
        });
    }
    let total = total.ok_or(Error::Domain {
        op: "actor_critic_loss",
        msg: "empty segment".into(),
    })?;
    Ok(RlLossParts {
        total,
        pg: pg_total,
        baseline: bl_total,
        entropy: ent_total,
    })
}

/// RL loss plus the gated auxiliary loss, as one scalar for backward().
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    pi_logits: &[Tensor],
    values: &[Tensor],
    actions: &[Vec<usize>],
    targets: &VtraceOut,
    cfg: &VtraceConfig,
    pi_prime_logits: Option<&[Tensor]>,
    pi_dprime_logits: Option<&[Tensor]>,
    weights: &AuxWeights,
    gate: &AuxGate,
) -> Result<Tensor> {
    let rl = actor_critic_loss(tape, pi_logits, values, actions, targets, cfg)?;
    let aux = aux_loss_gated(tape, pi_logits, pi_prime_logits, pi_dprime_logits, weights, gate)?;
    tape.add(&rl, &aux)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_diff_check, ParamStore};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data)
    }

    fn random_logits(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        t(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect(),
        )
    }

    #[test]
    fn sym_kl_identity_is_exactly_zero() {
        let mut tape = Tape::inference();
        let p = random_logits(1, 3, 5);
        let d = sym_kl(&mut tape, &p, &p).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sym_kl_is_symmetric_bitwise() {
        let mut tape = Tape::inference();
        let p = random_logits(2, 4, 3);
        let q = random_logits(3, 4, 3);
        let a = sym_kl(&mut tape, &p, &q).unwrap();
        let b = sym_kl(&mut tape, &q, &p).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn sym_kl_half_half_vs_ninety_ten_fixture() {
        // Closed form: (0.5−0.9)ln(5/9) + (0.5−0.1)ln 5 = 0.4·ln 9 = 0.8·ln 3.
        let oracle = 0.8 * 3.0_f64.ln();
        assert!((oracle - 0.8788898309344879).abs() < 1e-15);
        let mut tape = Tape::inference();
        let p = t(vec![1, 2], vec![0.5_f64.ln(), 0.5_f64.ln()]);
        let q = t(vec![1, 2], vec![0.9_f64.ln(), 0.1_f64.ln()]);
        let d = sym_kl(&mut tape, &p, &q).unwrap();
        assert!((d.data()[0] - oracle).abs() < 1e-9, "got {}", d.data()[0]);
    }

    #[test]
    fn sym_kl_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        store.insert("p", random_logits(7, 2, 3)).unwrap();
        store.insert("q", random_logits(8, 2, 3)).unwrap();
        let report = finite_diff_check(&store, 1e-6, |tape, s| {
            let p = tape.param("p", s.get("p").unwrap());
            let q = tape.param("q", s.get("q").unwrap());
            let d = sym_kl(tape, &p, &q)?;
            tape.sum(&d)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000) {
            let mut tape = Tape::inference();
            let logits = random_logits(seed, 3, 4);
            let p = tape.softmax(&logits).unwrap();
            for r in 0..3 {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn sym_kl_is_nonnegative(seed in 0u64..1000) {
            let mut tape = Tape::inference();
            let p = random_logits(seed, 2, 5);
            let q = random_logits(seed.wrapping_add(7777), 2, 5);
            let d = sym_kl(&mut tape, &p, &q).unwrap();
            for v in d.iter() {
                prop_assert!(*v >= 0.0);
            }
        }
    }

    fn unit_weights() -> AuxWeights {
        AuxWeights {
            lambda_r_p: 1.0,
            lambda_r_q: 1.0,
            lambda_p_q: 1.0,
            gate_rate: 1.0,
        }
    }

    #[test]
    fn aux_loss_zero_cases() {
        let mut tape = Tape::inference();
        let pi: Vec<Tensor> = (0..2).map(|i| random_logits(i, 2, 2)).collect();
        let pp: Vec<Tensor> = (10..12).map(|i| random_logits(i, 2, 2)).collect();
        let pq: Vec<Tensor> = (20..22).map(|i| random_logits(i, 2, 2)).collect();

        let zero = aux_loss_gated(&mut tape, &pi, Some(&pp), Some(&pq), &AuxWeights::zero(), &AuxGate::open()).unwrap();
        assert_eq!(zero.item(), 0.0);

        let closed = AuxGate { applied: false, scale: 0.0 };
        let gated_off =
            aux_loss_gated(&mut tape, &pi, Some(&pp), Some(&pq), &unit_weights(), &closed).unwrap();
        assert_eq!(gated_off.item(), 0.0);
    }

    #[test]
    fn aux_loss_gate_off_yields_zero_gradients() {
        let mut store = ParamStore::new();
        store.insert("logits", random_logits(5, 2, 3)).unwrap();
        let mut tape = Tape::new();
        let p = tape.param("logits", store.get("logits").unwrap());
        let pi = vec![p.clone()];
        let pp = vec![random_logits(6, 2, 3)];
        let pq = vec![random_logits(7, 2, 3)];
        let closed = AuxGate { applied: false, scale: 0.0 };
        let loss =
            aux_loss_gated(&mut tape, &pi, Some(&pp), Some(&pq), &unit_weights(), &closed).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get("logits").unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn aux_loss_two_step_fixture() {
        // Identical logits everywhere → 0; perturbing π″ → strictly
        // positive. 2 steps, 2 actions, batch 1, u forced to 1.
        let base = random_logits(40, 1, 2);
        let pi = vec![base.clone(), base.clone()];
        let pp = vec![base.clone(), base.clone()];
        let mut tape = Tape::inference();
        let same = aux_loss_gated(
            &mut tape,
            &pi,
            Some(&pp),
            Some(&vec![base.clone(), base.clone()]),
            &unit_weights(),
            &AuxGate::open(),
        )
        .unwrap();
        assert_eq!(same.item(), 0.0);

        let bumped = t(vec![1, 2], vec![base.data()[0] + 0.5, base.data()[1]]);
        let perturbed = aux_loss_gated(
            &mut tape,
            &pi,
            Some(&pp),
            Some(&vec![bumped, base.clone()]),
            &unit_weights(),
            &AuxGate::open(),
        )
        .unwrap();
        assert!(perturbed.item() > 0.0);
    }

    #[test]
    fn aux_loss_missing_branch_with_active_weight_errors() {
        let mut tape = Tape::inference();
        let pi = vec![random_logits(1, 1, 2)];
        let err = aux_loss_gated(&mut tape, &pi, None, None, &unit_weights(), &AuxGate::open());
        assert!(matches!(err, Err(Error::Domain { .. })));
        // π-π″ only, with π′ absent and its weights zero: fine.
        let w = AuxWeights {
            lambda_r_p: 0.0,
            lambda_p_q: 0.0,
            ..unit_weights()
        };
        let pq = vec![random_logits(2, 1, 2)];
        assert!(aux_loss_gated(&mut tape, &pi, None, Some(&pq), &w, &AuxGate::open()).is_ok());
    }

    #[test]
    fn gate_statistics_match_rate_and_conditional_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let rate = 0.3;
        let n = 10_000;
        let mut applied = 0usize;
        let mut scale_sum = 0.0;
        for _ in 0..n {
            let g = sample_aux_gate(&mut rng, rate);
            if g.applied {
                applied += 1;
                scale_sum += g.scale;
            } else {
                assert_eq!(g.scale, 0.0);
            }
        }
        let frac = applied as f64 / n as f64;
        assert!((frac - rate).abs() < 0.02, "gate fraction {frac}");
        let cond_mean = scale_sum / applied as f64;
        assert!((cond_mean - 0.5).abs() < 0.02, "conditional mean {cond_mean}");
    }

    #[test]
    fn gate_stream_position_is_outcome_independent() {
        // Two rates, same seed: after one draw both streams must be at
        // the same position, shown by identical subsequent samples.
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        sample_aux_gate(&mut a, 0.0);
        sample_aux_gate(&mut b, 1.0);
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    // ── V-trace ──────────────────────────────────────────────────────

    fn uniform_logits(steps: usize, batch: usize, acts: usize) -> Vec<Tensor> {
        (0..steps)
            .map(|_| t(vec![batch, acts], vec![0.0; batch * acts]))
            .collect()
    }

    #[test]
    fn on_policy_two_step_fixture() {
        let logits = uniform_logits(2, 1, 2);
        let cfg = VtraceConfig {
            gamma: 0.5,
            ..VtraceConfig::default()
        };
        let out = vtrace_targets(
            &[vec![1.0], vec![0.0]],
            &[vec![0.0], vec![0.0]],
            &[0.0],
            &logits,
            &logits,
            &[vec![0], vec![1]],
            &[vec![false], vec![false]],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.vs, vec![vec![1.0], vec![0.0]]);
        assert_eq!(out.advantages, vec![vec![1.0], vec![0.0]]);
    }

    #[test]
    fn constant_value_zero_reward_is_fixed_point_at_gamma_one() {
        let logits = uniform_logits(4, 2, 3);
        let cfg = VtraceConfig {
            gamma: 1.0,
            ..VtraceConfig::default()
        };
        let v = 1.375;
        let out = vtrace_targets(
            &vec![vec![0.0; 2]; 4],
            &vec![vec![v; 2]; 4],
            &[v; 2],
            &logits,
            &logits,
            &vec![vec![0; 2]; 4],
            &vec![vec![false; 2]; 4],
            &cfg,
        )
        .unwrap();
        for step in &out.vs {
            for x in step {
                assert_eq!(*x, v);
            }
        }
    }

    /// Discounted return with bootstrap, respecting done cuts.
    fn nstep_returns(
        rewards: &[Vec<f64>],
        dones: &[Vec<bool>],
        bootstrap: &[f64],
        gamma: f64,
    ) -> Vec<Vec<f64>> {
        let steps = rewards.len();
        let batch = bootstrap.len();
        let mut out = vec![vec![0.0; batch]; steps];
        for b in 0..batch {
            let mut next = bootstrap[b];
            for s in (0..steps).rev() {
                let g = if dones[s][b] { 0.0 } else { gamma };
                next = rewards[s][b] + g * next;
                out[s][b] = next;
            }
        }
        out
    }

    #[test]
    fn on_policy_reduction_matches_brute_force_returns() {
        let mut rng = ChaCha8Rng::seed_from_u64(515);
        for _ in 0..1000 {
            let steps = rng.gen_range(1..=6);
            let acts = rng.gen_range(2..=4);
            let batch = rng.gen_range(1..=3);
            let logits: Vec<Tensor> = (0..steps)
                .map(|_| {
                    t(
                        vec![batch, acts],
                        (0..batch * acts).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
                    )
                })
                .collect();
            let rewards: Vec<Vec<f64>> = (0..steps)
                .map(|_| (0..batch).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let values: Vec<Vec<f64>> = (0..steps)
                .map(|_| (0..batch).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let bootstrap: Vec<f64> = (0..batch).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let actions: Vec<Vec<usize>> = (0..steps)
                .map(|_| (0..batch).map(|_| rng.gen_range(0..acts)).collect())
                .collect();
            let dones: Vec<Vec<bool>> = (0..steps)
                .map(|_| (0..batch).map(|_| rng.gen::<f64>() < 0.2).collect())
                .collect();
            let cfg = VtraceConfig {
                gamma: 0.9,
                ..VtraceConfig::default()
            };
            let out = vtrace_targets(
                &rewards, &values, &bootstrap, &logits, &logits, &actions, &dones, &cfg,
            )
            .unwrap();
            let oracle = nstep_returns(&rewards, &dones, &bootstrap, cfg.gamma);
            for s in 0..steps {
                for b in 0..batch {
                    assert!(
                        (out.vs[s][b] - oracle[s][b]).abs() < 1e-10,
                        "vs mismatch at ({s},{b}): {} vs {}",
                        out.vs[s][b],
                        oracle[s][b]
                    );
                }
            }
        }
    }

    #[test]
    fn targets_do_not_cross_episode_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..50 {
            let steps = 6;
            let cut = rng.gen_range(1..5);
            let mk_logits = |rng: &mut ChaCha8Rng| -> Vec<Tensor> {
                (0..steps)
                    .map(|_| t(vec![1, 3], (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()))
                    .collect()
            };
            let behavior = mk_logits(&mut rng);
            let target = mk_logits(&mut rng);
            let rewards: Vec<Vec<f64>> = (0..steps).map(|_| vec![rng.gen::<f64>()]).collect();
            let values: Vec<Vec<f64>> = (0..steps).map(|_| vec![rng.gen::<f64>()]).collect();
            let actions: Vec<Vec<usize>> = (0..steps).map(|_| vec![rng.gen_range(0..3)]).collect();
            let mut dones = vec![vec![false]; steps];
            dones[cut] = vec![true];

            let base = vtrace_targets(
                &rewards, &values, &[0.25], &behavior, &target, &actions, &dones,
                &VtraceConfig::default(),
            )
            .unwrap();

            // Scramble everything strictly after the cut.
            let mut rewards2 = rewards.clone();
            let mut values2 = values.clone();
            let mut target2 = target.clone();
            for s in cut + 1..steps {
                rewards2[s] = vec![rng.gen::<f64>() * 10.0];
                values2[s] = vec![rng.gen::<f64>() * 10.0];
                target2[s] = t(vec![1, 3], (0..3).map(|_| rng.gen::<f64>() * 5.0).collect());
            }
            let perturbed = vtrace_targets(
                &rewards2, &values2, &[-3.5], &behavior, &target2, &actions, &dones,
                &VtraceConfig::default(),
            )
            .unwrap();
            for s in 0..=cut {
                assert_eq!(
                    base.vs[s][0].to_bits(),
                    perturbed.vs[s][0].to_bits(),
                    "trial {trial}: leak into vs at step {s}"
                );
                assert_eq!(
                    base.advantages[s][0].to_bits(),
                    perturbed.advantages[s][0].to_bits(),
                    "trial {trial}: leak into advantage at step {s}"
                );
            }
        }
    }

    #[test]
    fn vtrace_validates_lengths_and_config() {
        let logits = uniform_logits(2, 1, 2);
        let bad = vtrace_targets(
            &[vec![0.0]],
            &[vec![0.0], vec![0.0]],
            &[0.0],
            &logits,
            &logits,
            &[vec![0]],
            &[vec![false]],
            &VtraceConfig::default(),
        );
        assert!(matches!(bad, Err(Error::Domain { .. })));

        let bad_cfg = VtraceConfig {
            rho_bar: 0.5,
            c_bar: 1.0,
            ..VtraceConfig::default()
        };
        assert!(bad_cfg.validate().is_err());
        assert!(VtraceConfig::default().validate().is_ok());
    }

    // ── Actor-critic ─────────────────────────────────────────────────

    #[test]
    fn entropy_of_uniform_policy_is_ln_four() {
        // One step, one row, uniform logits, zero advantages, targets
        // equal to values: the loss is exactly −w·ln 4.
        let mut tape = Tape::inference();
        let pi = vec![t(vec![1, 4], vec![0.7; 4])];
        let values = vec![t(vec![1], vec![0.3])];
        let targets = VtraceOut {
            vs: vec![vec![0.3]],
            advantages: vec![vec![0.0]],
        };
        let cfg = VtraceConfig {
            entropy_weight: 1.0,
            ..VtraceConfig::default()
        };
        let loss = actor_critic_loss(&mut tape, &pi, &values, &[vec![2]], &targets, &cfg).unwrap();
        assert!((loss.item() + 4.0_f64.ln()).abs() < 1e-12, "got {}", loss.item());
    }

    #[test]
    fn zero_advantages_kill_the_policy_gradient_term() {
        let mut tape = Tape::inference();
        let pi = vec![random_logits(3, 2, 3)];
        let values = vec![t(vec![2], vec![0.1, -0.2])];
        let targets = VtraceOut {
            vs: vec![vec![0.1, -0.2]],
            advantages: vec![vec![0.0, 0.0]],
        };
        let cfg = VtraceConfig {
            entropy_weight: 0.0,
            ..VtraceConfig::default()
        };
        let loss = actor_critic_loss(&mut tape, &pi, &values, &[vec![0, 2]], &targets, &cfg).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn two_step_hand_assembled_total() {
        // Independent arithmetic check of every term, batch 1, 2 steps,
        // 2 actions.
        let logits: [[f64; 2]; 2] = [[0.4, -0.3], [-1.0, 0.2]];
        let values: [f64; 2] = [0.25, -0.5];
        let vs: [f64; 2] = [0.75, -0.1];
        let adv: [f64; 2] = [1.5, -0.8];
        let acts = [1usize, 0usize];
        let cfg = VtraceConfig {
            gamma: 0.99,
            rho_bar: 1.0,
            c_bar: 1.0,
            baseline_weight: 0.5,
            entropy_weight: 0.01,
        };

        let mut expected = 0.0;
        for s in 0..2 {
            let l = logits[s];
            let z = (l[0].exp() + l[1].exp()).ln();
            let logp = [l[0] - z, l[1] - z];
            let entropy = -(logp[0].exp() * logp[0] + logp[1].exp() * logp[1]);
            expected += -logp[acts[s]] * adv[s];
            expected += cfg.baseline_weight * (values[s] - vs[s]).powi(2);
            expected -= cfg.entropy_weight * entropy;
        }

        let mut tape = Tape::inference();
        let pi = vec![
            t(vec![1, 2], logits[0].to_vec()),
            t(vec![1, 2], logits[1].to_vec()),
        ];
        let v = vec![t(vec![1], vec![values[0]]), t(vec![1], vec![values[1]])];
        let targets = VtraceOut {
            vs: vec![vec![vs[0]], vec![vs[1]]],
            advantages: vec![vec![adv[0]], vec![adv[1]]],
        };
        let actions = vec![vec![acts[0]], vec![acts[1]]];
        let loss = actor_critic_loss(&mut tape, &pi, &v, &actions, &targets, &cfg).unwrap();
        assert!((loss.item() - expected).abs() < 1e-10, "got {} want {expected}", loss.item());
    }

    #[test]
    fn actor_critic_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        store.insert("logits0", random_logits(61, 2, 3)).unwrap();
        store.insert("logits1", random_logits(62, 2, 3)).unwrap();
        store.insert("values0", t(vec![2], vec![0.1, -0.3])).unwrap();
        store.insert("values1", t(vec![2], vec![0.2, 0.05])).unwrap();
        let targets = VtraceOut {
            vs: vec![vec![0.5, -0.25], vec![0.125, 0.75]],
            advantages: vec![vec![1.0, -0.5], vec![0.25, 0.6]],
        };
        let actions = vec![vec![0, 2], vec![1, 1]];
        let cfg = VtraceConfig::default();
        let report = finite_diff_check(&store, 1e-6, |tape, s| {
            let l0 = tape.param("logits0", s.get("logits0").unwrap());
            let l1 = tape.param("logits1", s.get("logits1").unwrap());
            let v0 = tape.param("values0", s.get("values0").unwrap());
            let v1 = tape.param("values1", s.get("values1").unwrap());
            actor_critic_loss(tape, &[l0, l1], &[v0, v1], &actions, &targets, &cfg)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn total_loss_reduces_to_rl_loss_when_weights_zero() {
        let mut tape = Tape::inference();
        let pi = vec![random_logits(81, 2, 3)];
        let pp = vec![random_logits(82, 2, 3)];
        let pq = vec![random_logits(83, 2, 3)];
        let values = vec![t(vec![2], vec![0.0, 0.1])];
        let targets = VtraceOut {
            vs: vec![vec![0.2, -0.2]],
            advantages: vec![vec![0.3, 0.4]],
        };
        let actions = vec![vec![0, 1]];
        let cfg = VtraceConfig::default();
        let rl = actor_critic_loss(&mut tape, &pi, &values, &actions, &targets, &cfg).unwrap();
        let tot = total_loss(
            &mut tape,
            &pi,
            &values,
            &actions,
            &targets,
            &cfg,
            Some(&pp),
            Some(&pq),
            &AuxWeights::zero(),
            &AuxGate::open(),
        )
        .unwrap();
        assert_eq!(rl.item().to_bits(), tot.item().to_bits());

        // Full gate: the two terms add exactly.
        let aux = aux_loss_gated(&mut tape, &pi, Some(&pp), Some(&pq), &unit_weights(), &AuxGate::open()).unwrap();
        let w = AuxWeights {
            gate_rate: 1.0,
            ..unit_weights()
        };
        let tot2 = total_loss(
            &mut tape,
            &pi,
            &values,
            &actions,
            &targets,
            &cfg,
            Some(&pp),
            Some(&pq),
            &w,
            &AuxGate::open(),
        )
        .unwrap();
        assert_eq!(tot2.item().to_bits(), (rl.item() + aux.item()).to_bits());
    }

    #[test]
    fn aux_parts_sum_to_total_and_respect_gate_scale() {
        let mut tape = Tape::inference();
        let pi = vec![random_logits(90, 3, 4), random_logits(91, 3, 4)];
        let pp = vec![random_logits(92, 3, 4), random_logits(93, 3, 4)];
        let pq = vec![random_logits(94, 3, 4), random_logits(95, 3, 4)];
        let w = AuxWeights {
            lambda_r_p: 0.5,
            lambda_r_q: 2.0,
            lambda_p_q: 1.0,
            gate_rate: 1.0,
        };
        let gate = AuxGate {
            applied: true,
            scale: 0.37,
        };
        let parts = aux_loss_parts(&mut tape, &pi, Some(&pp), Some(&pq), &w, &gate).unwrap();
        assert!(parts.r_p > 0.0 && parts.r_q > 0.0 && parts.p_q > 0.0);
        let sum = parts.r_p + parts.r_q + parts.p_q;
        assert!((sum - parts.total.item()).abs() < 1e-12);

        // Halving the gate scale halves every component.
        let half = AuxGate {
            applied: true,
            scale: 0.185,
        };
        let parts2 = aux_loss_parts(&mut tape, &pi, Some(&pp), Some(&pq), &w, &half).unwrap();
        assert!((parts2.r_p - 0.5 * parts.r_p).abs() < 1e-12);
        assert!((parts2.p_q - 0.5 * parts.p_q).abs() < 1e-12);

        // Inactive pairs report exactly zero.
        let w_single = AuxWeights {
            lambda_r_p: 0.0,
            lambda_r_q: 1.5,
            lambda_p_q: 0.0,
            gate_rate: 1.0,
        };
        let p3 = aux_loss_parts(&mut tape, &pi, None, Some(&pq), &w_single, &gate).unwrap();
        assert_eq!(p3.r_p, 0.0);
        assert_eq!(p3.p_q, 0.0);
        assert_eq!(p3.r_q.to_bits(), p3.total.item().to_bits());
    }

    #[test]
    fn rl_parts_sum_to_total() {
        let mut tape = Tape::inference();
        let pi = vec![random_logits(96, 2, 3), random_logits(97, 2, 3)];
        let values = vec![t(vec![2], vec![0.3, -0.1]), t(vec![2], vec![0.0, 0.2])];
        let targets = VtraceOut {
            vs: vec![vec![0.2, -0.2], vec![0.5, 0.1]],
            advantages: vec![vec![0.3, 0.4], vec![-0.2, 0.6]],
        };
        let actions = vec![vec![0, 2], vec![1, 1]];
        let cfg = VtraceConfig::default();
        let parts =
            actor_critic_parts(&mut tape, &pi, &values, &actions, &targets, &cfg).unwrap();
        let sum = parts.pg + parts.baseline + parts.entropy;
        assert!((sum - parts.total.item()).abs() < 1e-12);
        assert!(parts.baseline > 0.0);
        // Weighted negative entropy is negative for a stochastic policy.
        assert!(parts.entropy < 0.0);
        // Delegation: the scalar-only entry point returns the same total.
        let only =
            actor_critic_loss(&mut tape, &pi, &values, &actions, &targets, &cfg).unwrap();
        assert_eq!(only.item().to_bits(), parts.total.item().to_bits());
    }
}
