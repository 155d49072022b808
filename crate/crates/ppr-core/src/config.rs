//! Experiment configuration: defaults, the line-based `key = value`
//! file format, override handling, validation, and a stable hash used
//! to guard checkpoint resumes.

use std::path::Path;

use crate::cores::{fnv1a64, Architecture, ModelConfig};
use crate::envs::{EnvConfig, EnvKind, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::losses::{AuxWeights, VtraceConfig};
use crate::optim::AdamConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // experiment.*
    pub seed: u64,
    pub total_env_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub checkpoint_interval: u64,
    // agent.*
    pub architecture: Architecture,
    pub hidden: usize,
    pub tau: u64,
    pub share_fast_weights: bool,
    pub encoder_hidden: usize,
    pub encoder_out: usize,
    // train.*
    pub segment_len: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub gamma: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    pub baseline_weight: f64,
    pub entropy_weight: f64,
    // aux.*
    pub lambda_r_p: f64,
    pub lambda_r_q: f64,
    pub lambda_p_q: f64,
    pub gate_rate: f64,
    // env.*
    pub env_kind: EnvKind,
    pub corridor: usize,
    pub delay: usize,
    pub grid: usize,
    pub episode_cap: usize,
    pub respawns: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            total_env_steps: 2_000_000,
            eval_interval: 50_000,
            eval_episodes: 100,
            checkpoint_interval: 0,
            architecture: Architecture::Ppr,
            hidden: 64,
            tau: 8,
            share_fast_weights: true,
            encoder_hidden: 64,
            encoder_out: 16,
            segment_len: 32,
            batch: 32,
            lr: 3e-4,
            clip_norm: 40.0,
            gamma: 0.99,
            rho_bar: 1.0,
            c_bar: 1.0,
            baseline_weight: 0.5,
            entropy_weight: 0.01,
            lambda_r_p: 1.0,
            lambda_r_q: 1.0,
            lambda_p_q: 1.0,
            gate_rate: 0.1,
            env_kind: EnvKind::TMaze,
            corridor: 40,
            delay: 10,
            grid: 5,
            episode_cap: 60,
            respawns: 5,
        }
    }
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line: if line == 0 { None } else { Some(line) },
        msg: msg.into(),
    }
}

fn parse_as<T: std::str::FromStr>(value: &str, line: usize, what: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| bad(line, format!("cannot parse {what} from `{value}`")))
}

fn parse_bool(value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(line, format!("expected true/false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    /// Apply one dotted key. `line` is only for error messages (use 0
    /// for programmatic overrides).
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "experiment.seed" => self.seed = parse_as(value, line, "integer")?,
            "experiment.total_env_steps" => {
                self.total_env_steps = parse_as(value, line, "integer")?
            }
            "experiment.eval_interval" => self.eval_interval = parse_as(value, line, "integer")?,
            "experiment.eval_episodes" => self.eval_episodes = parse_as(value, line, "integer")?,
            "experiment.checkpoint_interval" => {
                self.checkpoint_interval = parse_as(value, line, "integer")?
            }
            "agent.architecture" => {
                self.architecture = Architecture::parse(value)
                    .ok_or_else(|| bad(line, format!("unknown architecture `{value}`")))?
            }
            "agent.hidden" => self.hidden = parse_as(value, line, "integer")?,
            "agent.tau" => self.tau = parse_as(value, line, "integer")?,
            "agent.share_fast_weights" => self.share_fast_weights = parse_bool(value, line)?,
            "agent.encoder_hidden" => self.encoder_hidden = parse_as(value, line, "integer")?,
            "agent.encoder_out" => self.encoder_out = parse_as(value, line, "integer")?,
            "train.segment_len" => self.segment_len = parse_as(value, line, "integer")?,
            "train.batch" => self.batch = parse_as(value, line, "integer")?,
            "train.lr" => self.lr = parse_as(value, line, "number")?,
            "train.clip_norm" => self.clip_norm = parse_as(value, line, "number")?,
            "train.gamma" => self.gamma = parse_as(value, line, "number")?,
            "train.rho_bar" => self.rho_bar = parse_as(value, line, "number")?,
            "train.c_bar" => self.c_bar = parse_as(value, line, "number")?,
            "train.baseline_weight" => self.baseline_weight = parse_as(value, line, "number")?,
            "train.entropy_weight" => self.entropy_weight = parse_as(value, line, "number")?,
            "aux.lambda_r_p" => self.lambda_r_p = parse_as(value, line, "number")?,
            "aux.lambda_r_q" => self.lambda_r_q = parse_as(value, line, "number")?,
            "aux.lambda_p_q" => self.lambda_p_q = parse_as(value, line, "number")?,
            "aux.gate_rate" => self.gate_rate = parse_as(value, line, "number")?,
            "env.kind" => {
                self.env_kind = EnvKind::parse(value)
                    .ok_or_else(|| bad(line, format!("unknown env kind `{value}`")))?
            }
            "env.corridor" => self.corridor = parse_as(value, line, "integer")?,
            "env.delay" => self.delay = parse_as(value, line, "integer")?,
            "env.grid" => self.grid = parse_as(value, line, "integer")?,
            "env.episode_cap" => self.episode_cap = parse_as(value, line, "integer")?,
            "env.respawns" => self.respawns = parse_as(value, line, "integer")?,
            _ => return Err(bad(line, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse a config file body. Lines are `key = value`; `#` starts a
    /// comment; blank lines ignored; unknown or repeated keys error.
    pub fn from_str(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(line_no, format!("expected `key = value`, got `{line}`")));
            };
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(bad(line_no, format!("empty value for `{key}`")));
            }
            if seen.iter().any(|k| k == key) {
                return Err(bad(line_no, format!("key `{key}` set twice")));
            }
            seen.push(key.to_string());
            cfg.set(key, value, line_no)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_str(&text)
    }

    /// Apply `key=value` override pairs in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for (i, pair) in overrides.iter().enumerate() {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(bad(i, format!("override `{pair}` is not key=value")));
            };
            self.set(key.trim(), value.trim(), 0)?;
        }
        Ok(())
    }

    /// Canonical listing: every key in a fixed order, one per line.
    /// Feeds the config hash, --dry-run output, and run manifests.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("experiment.seed", self.seed.to_string());
        kv("experiment.total_env_steps", self.total_env_steps.to_string());
        kv("experiment.eval_interval", self.eval_interval.to_string());
        kv("experiment.eval_episodes", self.eval_episodes.to_string());
        kv(
            "experiment.checkpoint_interval",
            self.checkpoint_interval.to_string(),
        );
        kv("agent.architecture", self.architecture.as_str().to_string());
        kv("agent.hidden", self.hidden.to_string());
        kv("agent.tau", self.tau.to_string());
        kv("agent.share_fast_weights", self.share_fast_weights.to_string());
        kv("agent.encoder_hidden", self.encoder_hidden.to_string());
        kv("agent.encoder_out", self.encoder_out.to_string());
        kv("train.segment_len", self.segment_len.to_string());
        kv("train.batch", self.batch.to_string());
        kv("train.lr", self.lr.to_string());
        kv("train.clip_norm", self.clip_norm.to_string());
        kv("train.gamma", self.gamma.to_string());
        kv("train.rho_bar", self.rho_bar.to_string());
        kv("train.c_bar", self.c_bar.to_string());
        kv("train.baseline_weight", self.baseline_weight.to_string());
        kv("train.entropy_weight", self.entropy_weight.to_string());
        kv("aux.lambda_r_p", self.lambda_r_p.to_string());
        kv("aux.lambda_r_q", self.lambda_r_q.to_string());
        kv("aux.lambda_p_q", self.lambda_p_q.to_string());
        kv("aux.gate_rate", self.gate_rate.to_string());
        kv("env.kind", self.env_kind.as_str().to_string());
        kv("env.corridor", self.corridor.to_string());
        kv("env.delay", self.delay.to_string());
        kv("env.grid", self.grid.to_string());
        kv("env.episode_cap", self.episode_cap.to_string());
        kv("env.respawns", self.respawns.to_string());
        s
    }

    /// Stable across runs; changes whenever any field changes.
    pub fn config_hash(&self) -> u64 {
        fnv1a64(&self.to_lines())
    }

    pub fn validate(&self) -> Result<()> {
        let domain = |msg: String| Error::Domain {
            op: "experiment_config",
            msg,
        };
        if self.tau < 1 {
            return Err(domain("agent.tau must be ≥ 1".into()));
        }
        if self.segment_len < 2 {
            return Err(domain("train.segment_len must be ≥ 2".into()));
        }
        if self.batch < 1 || self.hidden < 1 || self.encoder_hidden < 1 || self.encoder_out < 1 {
            return Err(domain("sizes must be ≥ 1".into()));
        }
        if self.eval_interval < 1 {
            return Err(domain("experiment.eval_interval must be ≥ 1".into()));
        }
        if self.eval_episodes < 1 {
            return Err(domain("experiment.eval_episodes must be ≥ 1".into()));
        }
        self.adam_config().validate()?;
        self.vtrace_config().validate()?;
        self.aux_weights().validate()?;
        self.env_config().validate()?;

        // Architecture/loss compatibility: a weight may be nonzero only
        // if both policies of its pair exist.
        let arch = self.architecture;
        let has_p = arch.has_pi_prime();
        let has_q = arch.has_prediction();
        if self.lambda_r_p > 0.0 && !has_p {
            return Err(domain(format!(
                "aux.lambda_r_p needs a perception policy; {} has none",
                arch.as_str()
            )));
        }
        if self.lambda_r_q > 0.0 && !has_q {
            return Err(domain(format!(
                "aux.lambda_r_q needs a prediction policy; {} has none",
                arch.as_str()
            )));
        }
        if self.lambda_p_q > 0.0 && !(has_p && has_q) {
            return Err(domain(format!(
                "aux.lambda_p_q needs both branch policies; {} lacks one",
                arch.as_str()
            )));
        }
        Ok(())
    }

    // ── Views for the submodules ─────────────────────────────────────

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            kind: self.env_kind,
            corridor: self.corridor,
            delay: self.delay,
            grid: self.grid,
            episode_cap: self.episode_cap,
            respawns: self.respawns,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            hidden: self.hidden,
            obs_width: self.env_config().obs_width(),
            encoder_hidden: self.encoder_hidden,
            encoder_out: self.encoder_out,
            num_actions: NUM_ACTIONS,
            share_fast_weights: self.share_fast_weights,
            tau: self.tau,
        }
    }

    pub fn vtrace_config(&self) -> VtraceConfig {
        VtraceConfig {
            gamma: self.gamma,
            rho_bar: self.rho_bar,
            c_bar: self.c_bar,
            baseline_weight: self.baseline_weight,
            entropy_weight: self.entropy_weight,
        }
    }

    pub fn aux_weights(&self) -> AuxWeights {
        AuxWeights {
            lambda_r_p: self.lambda_r_p,
            lambda_r_q: self.lambda_r_q,
            lambda_p_q: self.lambda_p_q,
            gate_rate: self.gate_rate,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    /// Zero all pair weights; used when switching to architectures
    /// without the extra policies.
    pub fn clear_aux(&mut self) {
        self.lambda_r_p = 0.0;
        self.lambda_r_q = 0.0;
        self.lambda_p_q = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_roundtrip_through_canonical_lines() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 77;
        cfg.architecture = Architecture::FlatPrediction;
        cfg.clear_aux();
        cfg.lambda_r_q = 0.5;
        cfg.env_kind = EnvKind::GoalMaze;
        let parsed = ExperimentConfig::from_str(&cfg.to_lines()).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.config_hash(), parsed.config_hash());
    }

    #[test]
    fn file_parsing_handles_comments_and_blank_lines() {
        let text = "\n# full line comment\nexperiment.seed = 9  # trailing comment\n\nagent.tau = 4\n";
        let cfg = ExperimentConfig::from_str(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.tau, 4);
    }

    #[test]
    fn unknown_key_reports_line_number() {
        let text = "experiment.seed = 1\nbogus.key = 3\n";
        match ExperimentConfig::from_str(text) {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, Some(2));
                assert!(msg.contains("bogus.key"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_value_and_missing_equals_error_with_lines() {
        match ExperimentConfig::from_str("agent.tau = soon\n") {
            Err(Error::Config { line: Some(1), .. }) => {}
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::from_str("just some words\n") {
            Err(Error::Config { line: Some(1), .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = "agent.tau = 2\nagent.tau = 4\n";
        match ExperimentConfig::from_str(text) {
            Err(Error::Config { line: Some(2), msg }) => assert!(msg.contains("twice")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_overrides(&[
            "agent.tau=16".to_string(),
            "train.lr = 0.001".to_string(),
            "agent.tau=2".to_string(),
        ])
        .unwrap();
        assert_eq!(cfg.tau, 2);
        assert_eq!(cfg.lr, 0.001);
        assert!(cfg.apply_overrides(&["nope".to_string()]).is_err());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.gate_rate = 0.05;
        assert_ne!(base.config_hash(), other.config_hash());
    }

    #[test]
    fn architecture_loss_compatibility_enforced() {
        let mut cfg = ExperimentConfig::default();
        cfg.architecture = Architecture::Flat;
        assert!(cfg.validate().is_err());
        cfg.clear_aux();
        cfg.validate().unwrap();

        let mut pr = ExperimentConfig::default();
        pr.architecture = Architecture::PerceptionReaction;
        pr.clear_aux();
        pr.validate().unwrap();
        pr.lambda_r_p = 1.0;
        assert!(pr.validate().is_err());

        let mut fp = ExperimentConfig::default();
        fp.architecture = Architecture::FlatPrediction;
        fp.clear_aux();
        fp.lambda_r_q = 1.0;
        fp.validate().unwrap();
        fp.lambda_p_q = 0.5;
        assert!(fp.validate().is_err());
    }

    #[test]
    fn invariant_violations_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.tau = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.segment_len = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.rho_bar = 0.5; // < c_bar
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.gate_rate = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_config_reflects_env_observation_width() {
        let mut cfg = ExperimentConfig::default();
        cfg.env_kind = EnvKind::GoalMaze;
        cfg.grid = 5;
        assert_eq!(cfg.model_config().obs_width, 26);
        cfg.env_kind = EnvKind::NonMatch;
        assert_eq!(cfg.model_config().obs_width, 9);
    }
}
