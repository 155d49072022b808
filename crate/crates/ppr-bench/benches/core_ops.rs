//! Microbenchmarks of the forward/backward primitives: one LSTM cell
//! update, one full agent step, and a short unrolled backward pass.

use criterion::{criterion_group, criterion_main, Criterion};

use ppr_core::agents::{agent_step, initial_state, PprParams};
use ppr_core::autograd::{Tape, Tensor};
use ppr_core::config::ExperimentConfig;
use ppr_core::cores::{init_params, lstm_step, Architecture, LstmState};

const BATCH: usize = 32;

fn cfg(arch: Architecture) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.architecture = arch;
    if arch == Architecture::Flat {
        cfg.lambda_r_p = 0.0;
        cfg.lambda_r_q = 0.0;
        cfg.lambda_p_q = 0.0;
    }
    cfg
}

fn obs(mcfg: &ppr_core::cores::ModelConfig) -> Tensor {
    let w = mcfg.obs_width;
    let data: Vec<f64> = (0..BATCH * w).map(|i| (i % 7) as f64 / 7.0).collect();
    Tensor::from_vec(vec![BATCH, w], data)
}

fn bench_lstm_step(c: &mut Criterion) {
    let cfg = cfg(Architecture::Flat);
    let mcfg = cfg.model_config();
    let store = init_params(1, &mcfg).unwrap();
    let width = mcfg.core_input_width();
    let x_data: Vec<f64> = (0..BATCH * width).map(|i| (i % 5) as f64 / 5.0).collect();
    c.bench_function("lstm_step_h64_b32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let params = PprParams::bind(&mut tape, &store, &mcfg).unwrap();
            let x = Tensor::from_vec(vec![BATCH, width], x_data.clone());
            let state = LstmState::zeros(BATCH, mcfg.hidden);
            lstm_step(&mut tape, &x, &state, &params.fast).unwrap()
        })
    });
}

fn bench_agent_step(c: &mut Criterion) {
    for arch in [Architecture::Flat, Architecture::Ppr] {
        let cfg = cfg(arch);
        let mcfg = cfg.model_config();
        let store = init_params(1, &mcfg).unwrap();
        let x = obs(&mcfg);
        let prev_action = vec![0usize; BATCH];
        let prev_reward = vec![0.0f64; BATCH];
        c.bench_function(&format!("agent_step_{}_h64_b32", arch.as_str()), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let params = PprParams::bind(&mut tape, &store, &mcfg).unwrap();
                let state = initial_state(BATCH, &mcfg);
                agent_step(&mut tape, &x, &prev_action, &prev_reward, &state, &params).unwrap()
            })
        });
    }
}

fn bench_backward(c: &mut Criterion) {
    let cfg = cfg(Architecture::Ppr);
    let mcfg = cfg.model_config();
    let store = init_params(1, &mcfg).unwrap();
    let x = obs(&mcfg);
    let prev_action = vec![0usize; BATCH];
    let prev_reward = vec![0.0f64; BATCH];
    c.bench_function("unroll8_backward_ppr_h64_b32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let params = PprParams::bind(&mut tape, &store, &mcfg).unwrap();
            let mut state = initial_state(BATCH, &mcfg);
            let mut loss = None;
            for _ in 0..8 {
                let (next, out) = agent_step(
                    &mut tape,
                    &x,
                    &prev_action,
                    &prev_reward,
                    &state,
                    &params,
                )
                .unwrap();
                state = next;
                let s = tape.sum(&out.pi_logits).unwrap();
                loss = Some(match loss {
                    None => s,
                    Some(prev) => tape.add(&prev, &s).unwrap(),
                });
            }
            tape.backward(&loss.unwrap()).unwrap()
        })
    });
}

criterion_group!(benches, bench_lstm_step, bench_agent_step, bench_backward);
criterion_main!(benches);
