//! Neural building blocks: LSTM cell, MLP heads, input embedding,
//! initialization, and parameter accounting.
//!
//! Every recurrent core in the crate — the flat core, the three fast
//! branches, and the slow core — uses one shared input width
//! `D = E + H`, where `E` is the embed width (encoded observation,
//! one-hot previous action, clipped previous reward) and `H` the hidden
//! size. Branches that lack a context block pad with zeros. The uniform
//! width is what makes the architecture parameter counts exact small
//! multiples of the flat baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{MatLayout, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};

/// Which agent wiring a parameter store was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Single LSTM, policy and value heads.
    Flat,
    /// Fast + slow cores; policy reads both hidden states.
    MinimalHier,
    /// Perception, reaction, and slow cores; no prediction branch.
    PerceptionReaction,
    /// Full three-branch agent with prediction head and aux loss.
    Ppr,
    /// Flat behavior core plus a prediction branch trained only by the
    /// aux loss.
    FlatPrediction,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Flat => "flat",
            Architecture::MinimalHier => "minimal_hier",
            Architecture::PerceptionReaction => "perception_reaction",
            Architecture::Ppr => "ppr",
            Architecture::FlatPrediction => "flat_prediction",
        }
    }

    pub fn parse(s: &str) -> Option<Architecture> {
        Some(match s {
            "flat" => Architecture::Flat,
            "minimal_hier" => Architecture::MinimalHier,
            "perception_reaction" => Architecture::PerceptionReaction,
            "ppr" => Architecture::Ppr,
            "flat_prediction" => Architecture::FlatPrediction,
            _ => return None,
        })
    }

    /// Does this architecture carry a prediction branch (and π″ head)?
    pub fn has_prediction(&self) -> bool {
        matches!(self, Architecture::Ppr | Architecture::FlatPrediction)
    }

    /// Does this architecture carry a perception branch?
    pub fn has_perception(&self) -> bool {
        matches!(
            self,
            Architecture::PerceptionReaction | Architecture::Ppr
        )
    }

    /// Does this architecture carry a slow core?
    pub fn has_slow(&self) -> bool {
        matches!(
            self,
            Architecture::MinimalHier | Architecture::PerceptionReaction | Architecture::Ppr
        )
    }

    /// Does this architecture emit a perception policy π′?
    pub fn has_pi_prime(&self) -> bool {
        matches!(self, Architecture::Ppr)
    }
}

/// Model-shape portion of an experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Hidden size H of every recurrent core.
    pub hidden: usize,
    /// Raw observation feature width produced by the environment.
    pub obs_width: usize,
    /// Width of the encoder's intermediate layer.
    pub encoder_hidden: usize,
    /// Encoder output width F; the observation block of the embed.
    pub encoder_out: usize,
    pub num_actions: usize,
    /// Share one fast core across reaction/perception/prediction.
    pub share_fast_weights: bool,
    /// Slow-core period τ ≥ 1.
    pub tau: u64,
}

impl ModelConfig {
    /// Embed width E = encoded obs + one-hot action + clipped reward.
    pub fn embed_width(&self) -> usize {
        self.encoder_out + self.num_actions + 1
    }

    /// Uniform core input width D = E + H.
    pub fn core_input_width(&self) -> usize {
        self.embed_width() + self.hidden
    }
}

// ── LSTM ─────────────────────────────────────────────────────────────

/// Parameters of one LSTM cell. Gate blocks are ordered
/// (input i, forget f, cell-candidate g, output o) along the 4H axis.
#[derive(Debug, Clone)]
pub struct LstmParams {
    /// [4H, D]
    pub w_x: Tensor,
    /// [4H, H]
    pub w_h: Tensor,
    /// [4H]
    pub b: Tensor,
}

impl LstmParams {
    pub fn hidden(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn input_width(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn num_elements(&self) -> usize {
        self.w_x.len() + self.w_h.len() + self.b.len()
    }
}

/// Recurrent state (h, c) of one LSTM cell, batch-first.
#[derive(Debug, Clone)]
pub struct LstmState {
    /// [B, H]
    pub h: Tensor,
    /// [B, H]
    pub c: Tensor,
}

impl LstmState {
    /// The all-zeros state ∅.
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(vec![batch, hidden]),
            c: Tensor::zeros(vec![batch, hidden]),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn bit_eq(&self, other: &LstmState) -> bool {
        self.h.bit_eq(&other.h) && self.c.bit_eq(&other.c)
    }
}

/// One LSTM cell update:
/// i = σ(W_x x + W_h h + b)_i, f = σ(·)_f, g = tanh(·)_g, o = σ(·)_o,
/// c′ = f ⊙ c + i ⊙ g, h′ = o ⊙ tanh(c′).
pub fn lstm_step(tape: &mut Tape, x: &Tensor, state: &LstmState, p: &LstmParams) -> Result<LstmState> {
    let hidden = p.hidden();
    let batch = x.shape().first().copied().unwrap_or(0);
    if x.rank() != 2 || x.shape()[1] != p.input_width() {
        return Err(Error::ShapeMismatch {
            op: "lstm-x",
            lhs: x.shape().to_vec(),
            rhs: p.w_x.shape().to_vec(),
        });
    }
    if state.h.shape() != [batch, hidden] {
        return Err(Error::ShapeMismatch {
            op: "lstm-h",
            lhs: state.h.shape().to_vec(),
            rhs: vec![batch, hidden],
        });
    }
    if state.c.shape() != [batch, hidden] {
        return Err(Error::ShapeMismatch {
            op: "lstm-c",
            lhs: state.c.shape().to_vec(),
            rhs: vec![batch, hidden],
        });
    }

    let zx = tape.matmul(x, &p.w_x, MatLayout::NT)?;
    let zh = tape.matmul(&state.h, &p.w_h, MatLayout::NT)?;
    let z = tape.add(&zx, &zh)?;
    let bias = tape.broadcast_rows(&p.b, batch)?;
    let z = tape.add(&z, &bias)?;

    let zi = tape.slice(&z, 1, 0, hidden)?;
    let zf = tape.slice(&z, 1, hidden, hidden)?;
    let zg = tape.slice(&z, 1, 2 * hidden, hidden)?;
    let zo = tape.slice(&z, 1, 3 * hidden, hidden)?;

    let i = tape.sigmoid(&zi)?;
    let f = tape.sigmoid(&zf)?;
    let g = tape.tanh(&zg)?;
    let o = tape.sigmoid(&zo)?;

    let fc = tape.mul(&f, &state.c)?;
    let ig = tape.mul(&i, &g)?;
    let c = tape.add(&fc, &ig)?;
    let tc = tape.tanh(&c)?;
    let h = tape.mul(&o, &tc)?;
    Ok(LstmState { h, c })
}

// ── MLP ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone)]
pub struct MlpLayer {
    /// [out, in]
    pub w: Tensor,
    /// [out]
    pub b: Tensor,
    pub activation: Activation,
}

/// A chain of affine layers with optional relu between. The final layer
/// always has no activation, so outputs are logits/raw values.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<MlpLayer>,
}

impl MlpParams {
    pub fn input_width(&self) -> usize {
        self.layers[0].w.shape()[1]
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().w.shape()[0]
    }

    pub fn num_elements(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

pub fn mlp_forward(tape: &mut Tape, x: &Tensor, p: &MlpParams) -> Result<Tensor> {
    debug_assert_eq!(
        p.layers.last().map(|l| l.activation),
        Some(Activation::None),
        "final MLP layer must be linear"
    );
    let batch = x.shape()[0];
    let mut h = x.clone();
    for layer in &p.layers {
        if h.shape()[1] != layer.w.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "mlp-layer",
                lhs: h.shape().to_vec(),
                rhs: layer.w.shape().to_vec(),
            });
        }
        let z = tape.matmul(&h, &layer.w, MatLayout::NT)?;
        let bias = tape.broadcast_rows(&layer.b, batch)?;
        let z = tape.add(&z, &bias)?;
        h = match layer.activation {
            Activation::Relu => tape.relu(&z)?,
            Activation::None => z,
        };
    }
    Ok(h)
}

// ── Input embedding ──────────────────────────────────────────────────

/// Concatenate [encoded observation (zeroed when masked) ∥ one-hot
/// previous action ∥ clip(previous reward, −1, 1)] into a [B, E] embed.
/// The output width is the same whether or not the observation is
/// masked, so all fast branches can share one input layout.
pub fn embed_inputs(
    tape: &mut Tape,
    obs_features: &Tensor,
    prev_action: &[usize],
    prev_reward: &[f64],
    mask_observation: bool,
    num_actions: usize,
) -> Result<Tensor> {
    let batch = obs_features.shape()[0];
    let feat = obs_features.shape()[1];
    debug_assert_eq!(prev_action.len(), batch);
    debug_assert_eq!(prev_reward.len(), batch);

    let mut ar = Vec::with_capacity(batch * (num_actions + 1));
    for (a, r) in prev_action.iter().zip(prev_reward) {
        if *a >= num_actions {
            return Err(Error::ActionOutOfRange {
                action: *a,
                num_actions,
            });
        }
        for j in 0..num_actions {
            ar.push(if j == *a { 1.0 } else { 0.0 });
        }
        ar.push(r.clamp(-1.0, 1.0));
    }
    let ar = Tensor::from_vec(vec![batch, num_actions + 1], ar);

    if mask_observation {
        // Constant zeros: the masked embed has no graph edge back to the
        // encoder, so prediction-side outputs cannot read observations.
        let zeros = Tensor::zeros(vec![batch, feat]);
        tape.concat(&[&zeros, &ar], 1)
    } else {
        tape.concat(&[obs_features, &ar], 1)
    }
}

/// Concatenate a zero block of width `pad` after `x`, giving [B, W+pad].
/// Used to bring context-free core inputs up to the uniform width D.
pub fn pad_columns(tape: &mut Tape, x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let zeros = Tensor::zeros(vec![x.shape()[0], pad]);
    tape.concat(&[x, &zeros], 1)
}

// ── Initialization ───────────────────────────────────────────────────

/// Stable 64-bit FNV-1a, used to give every parameter tensor its own
/// seed stream. Architectures that share parameter names then share
/// initial values exactly, regardless of which other tensors exist.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15) ^ fnv1a64(name))
}

/// Uniform(−s, s) with s = 1/√fan_in.
fn init_weight(seed: u64, name: &str, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let mut rng = tensor_rng(seed, name);
    let s = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * s).collect();
    Tensor::from_vec(shape, data)
}

fn insert_lstm(store: &mut ParamStore, seed: u64, prefix: &str, hidden: usize, input: usize) -> Result<()> {
    let wx_name = format!("{prefix}/w_x");
    let wh_name = format!("{prefix}/w_h");
    store.insert(&wx_name, init_weight(seed, &wx_name, vec![4 * hidden, input], input))?;
    store.insert(&wh_name, init_weight(seed, &wh_name, vec![4 * hidden, hidden], hidden))?;
    // Bias starts at zero except the forget-gate block, which starts at
    // 1.0 so cells retain memory early in training.
    let mut b = vec![0.0; 4 * hidden];
    b[hidden..2 * hidden].fill(1.0);
    store.insert(&format!("{prefix}/b"), Tensor::from_vec(vec![4 * hidden], b))?;
    Ok(())
}

fn insert_linear(store: &mut ParamStore, seed: u64, prefix: &str, out: usize, input: usize) -> Result<()> {
    let w_name = format!("{prefix}/w");
    store.insert(&w_name, init_weight(seed, &w_name, vec![out, input], input))?;
    store.insert(&format!("{prefix}/b"), Tensor::zeros(vec![out]))?;
    Ok(())
}

/// Names of the LSTM cores an architecture instantiates, in a fixed
/// order. `fast` is the shared fast core (or the only core for flat
/// variants); unshared fast branches get their own names.
pub fn core_prefixes(cfg: &ModelConfig) -> Vec<&'static str> {
    let mut cores = vec!["fast"];
    match cfg.architecture {
        Architecture::Flat => {}
        Architecture::MinimalHier => cores.push("slow"),
        Architecture::PerceptionReaction => {
            if !cfg.share_fast_weights {
                cores.push("perception");
            }
            cores.push("slow");
        }
        Architecture::Ppr => {
            if !cfg.share_fast_weights {
                cores.push("perception");
                cores.push("prediction");
            }
            cores.push("slow");
        }
        Architecture::FlatPrediction => cores.push("prediction"),
    }
    cores
}

/// Build a freshly initialized parameter store for the given shape
/// configuration. Deterministic: the same seed and config give a
/// bit-identical store, and tensors with the same name have identical
/// values across architectures.
pub fn init_params(seed: u64, cfg: &ModelConfig) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let h = cfg.hidden;
    let d = cfg.core_input_width();
    let a = cfg.num_actions;

    insert_linear(&mut store, seed, "encoder/0", cfg.encoder_hidden, cfg.obs_width)?;
    insert_linear(&mut store, seed, "encoder/1", cfg.encoder_out, cfg.encoder_hidden)?;

    for prefix in core_prefixes(cfg) {
        insert_lstm(&mut store, seed, prefix, h, d)?;
    }

    let pi_input = match cfg.architecture {
        // The minimal hierarchy's policy reads both hidden states.
        Architecture::MinimalHier => 2 * h,
        _ => h,
    };
    insert_linear(&mut store, seed, "head_pi", a, pi_input)?;
    if cfg.architecture.has_pi_prime() {
        insert_linear(&mut store, seed, "head_pi_prime", a, h)?;
    }
    if cfg.architecture.has_prediction() {
        insert_linear(&mut store, seed, "head_pi_dprime", a, h)?;
    }
    insert_linear(&mut store, seed, "head_value", 1, h)?;
    Ok(store)
}

/// Sum of element counts of all LSTM parameter tensors in the store,
/// counting shared tensors once. Heads and encoder excluded.
pub fn count_recurrent_params(store: &ParamStore, _architecture: Architecture) -> usize {
    // A prefix names an LSTM core iff `<prefix>/w_x` exists; sum its
    // three tensors. Shared cores appear once in the store, so this is
    // automatically shared-once and independent of iteration order.
    let mut total = 0;
    for name in store.names() {
        if let Some(prefix) = name.strip_suffix("/w_x") {
            total += store.get(name).map(|t| t.len()).unwrap_or(0);
            for part in ["w_h", "b"] {
                if let Ok(t) = store.get(&format!("{prefix}/{part}")) {
                    total += t.len();
                }
            }
        }
    }
    total
}

/// Bind one LSTM core's tensors from the store onto a tape.
pub fn bind_lstm(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<LstmParams> {
    let names = [
        format!("{prefix}/w_x"),
        format!("{prefix}/w_h"),
        format!("{prefix}/b"),
    ];
    Ok(LstmParams {
        w_x: tape.param(&names[0], store.get(&names[0])?),
        w_h: tape.param(&names[1], store.get(&names[1])?),
        b: tape.param(&names[2], store.get(&names[2])?),
    })
}

/// Bind a linear layer (weight + bias, no activation).
fn bind_linear(tape: &mut Tape, store: &ParamStore, prefix: &str, activation: Activation) -> Result<MlpLayer> {
    let w_name = format!("{prefix}/w");
    let b_name = format!("{prefix}/b");
    Ok(MlpLayer {
        w: tape.param(&w_name, store.get(&w_name)?),
        b: tape.param(&b_name, store.get(&b_name)?),
        activation,
    })
}

/// Bind a single-layer head.
pub fn bind_head(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<MlpParams> {
    Ok(MlpParams {
        layers: vec![bind_linear(tape, store, prefix, Activation::None)?],
    })
}

/// Bind the two-layer observation encoder.
pub fn bind_encoder(tape: &mut Tape, store: &ParamStore) -> Result<MlpParams> {
    Ok(MlpParams {
        layers: vec![
            bind_linear(tape, store, "encoder/0", Activation::Relu)?,
            bind_linear(tape, store, "encoder/1", Activation::None)?,
        ],
    })
}
