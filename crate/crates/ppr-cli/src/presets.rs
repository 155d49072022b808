//! Ablation presets: named matrices of experiment configurations
//! expanded from one base config.

use ppr_core::config::ExperimentConfig;
use ppr_core::cores::Architecture;
use ppr_core::error::{Error, Result};

pub const PRESET_NAMES: &[&str] = &[
    "architectures",
    "loss_combos",
    "prediction_rollout",
    "tau_sweep",
];

/// One expanded member: a unique run name and its full configuration.
#[derive(Debug)]
pub struct PresetRun {
    pub name: String,
    pub cfg: ExperimentConfig,
}

#[derive(Debug)]
pub enum Preset {
    /// Independent training runs.
    Training(Vec<PresetRun>),
    /// One flat-prediction training run, then the three
    /// action-selection schemes scored at each rollout horizon.
    PredictionRollout {
        train: PresetRun,
        horizons: Vec<u64>,
    },
}

pub fn expand(name: &str, base: &ExperimentConfig) -> Result<Preset> {
    let preset = match name {
        "loss_combos" => Preset::Training(loss_combos(base)),
        "tau_sweep" => Preset::Training(tau_sweep(base)),
        "architectures" => Preset::Training(architectures(base)),
        "prediction_rollout" => prediction_rollout(base)?,
        _ => {
            return Err(Error::Domain {
                op: "ablate",
                msg: format!(
                    "unknown preset `{name}`; valid presets: {}",
                    PRESET_NAMES.join(", ")
                ),
            })
        }
    };
    match &preset {
        Preset::Training(runs) => {
            for r in runs {
                r.cfg.validate()?;
            }
        }
        Preset::PredictionRollout { train, .. } => train.cfg.validate()?,
    }
    Ok(preset)
}

/// A pair weight switched on keeps its base magnitude, defaulting to 1
/// if the base turned it off.
fn on(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

/// All 2³ on/off combinations of the three pair weights on the full
/// agent; the all-off member carries the two-branch baseline's
/// objective.
fn loss_combos(base: &ExperimentConfig) -> Vec<PresetRun> {
    let flag = |b: bool| if b { "1" } else { "0" };
    (0..8u32)
        .map(|bits| {
            let rp = bits & 1 != 0;
            let rq = bits & 2 != 0;
            let pq = bits & 4 != 0;
            let mut cfg = base.clone();
            cfg.architecture = Architecture::Ppr;
            cfg.lambda_r_p = if rp { on(base.lambda_r_p) } else { 0.0 };
            cfg.lambda_r_q = if rq { on(base.lambda_r_q) } else { 0.0 };
            cfg.lambda_p_q = if pq { on(base.lambda_p_q) } else { 0.0 };
            PresetRun {
                name: format!("loss_rp{}_rq{}_pq{}", flag(rp), flag(rq), flag(pq)),
                cfg,
            }
        })
        .collect()
}

fn tau_sweep(base: &ExperimentConfig) -> Vec<PresetRun> {
    [2u64, 4, 8, 16, 32]
        .into_iter()
        .map(|tau| {
            let mut cfg = base.clone();
            cfg.architecture = Architecture::Ppr;
            cfg.tau = tau;
            PresetRun {
                name: format!("tau_{tau:02}"),
                cfg,
            }
        })
        .collect()
}

fn architectures(base: &ExperimentConfig) -> Vec<PresetRun> {
    [
        Architecture::Flat,
        Architecture::MinimalHier,
        Architecture::PerceptionReaction,
        Architecture::Ppr,
    ]
    .into_iter()
    .map(|arch| {
        let mut cfg = base.clone();
        cfg.architecture = arch;
        if !arch.has_pi_prime() {
            cfg.lambda_r_p = 0.0;
            cfg.lambda_p_q = 0.0;
        }
        if !arch.has_prediction() {
            cfg.lambda_r_q = 0.0;
            cfg.lambda_p_q = 0.0;
        }
        PresetRun {
            name: arch.as_str().to_string(),
            cfg,
        }
    })
    .collect()
}

fn prediction_rollout(base: &ExperimentConfig) -> Result<Preset> {
    const HORIZONS: [u64; 3] = [1, 3, 7];
    let mut cfg = base.clone();
    cfg.architecture = Architecture::FlatPrediction;
    cfg.lambda_r_p = 0.0;
    cfg.lambda_p_q = 0.0;
    cfg.lambda_r_q = on(base.lambda_r_q);
    let max = *HORIZONS.iter().max().expect("nonempty");
    if cfg.tau <= max {
        return Err(Error::Domain {
            op: "ablate",
            msg: format!(
                "prediction_rollout scores fixed-offset selection at k = {max}, \
                 which needs agent.tau > {max} (got {})",
                cfg.tau
            ),
        });
    }
    Ok(Preset::PredictionRollout {
        train: PresetRun {
            name: "flat_prediction".to_string(),
            cfg,
        },
        horizons: HORIZONS.to_vec(),
    })
}
