//! Acceptance suite. Prints one line per criterion and exits non-zero when a
//! required criterion fails. Criterion 13 runs only when `PETS_ETTH1` names
//! an ETTh1 CSV file.

use std::f64::consts::PI;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pets::autodiff::gradcheck::{self, GradCheck};
use pets::autodiff::{Graph, Tensor, Var};
use pets::data::*;
use pets::embedding::PatchConfig;
use pets::fpa::{focus_pattern, FpaDims};
use pets::model::{decompose_rows, ModelConfig, PetsModel};
use pets::run::{self, DataConfig, RunConfig};
use pets::sdaq::{self, ami, Backend, SdaqConfig};
use pets::tasks::{self, Task};
use pets::train::{self, Dataset, SpikeAugment, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass: Some(pass), detail }
    }
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temporary directory")
}

fn c1_fft_lossless() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = SdaqConfig {
        backend: Backend::Fft,
        ..SdaqConfig::default()
    };
    let mut worst: f64 = 0.0;
    for len in [32, 96, 512] {
        let rows = 1000;
        let x: Vec<f64> = (0..rows * len).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let d = sdaq::sdaq_decompose(&x, rows, &cfg).unwrap();
        let sum = d.sum();
        for r in 0..rows {
            let s = r * len..(r + 1) * len;
            worst = worst.max(rel_l2(&sum[s.clone()], &x[s]));
        }
    }
    let el = t.elapsed();
    Outcome::new(
        worst <= 1e-9 && el.as_secs_f64() < 10.0,
        format!("max rel L2 {worst:.2e} (<= 1e-9) over 3000 series, {} (< 10 s)", secs(el)),
    )
}

fn probe(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let parts: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=3))
        .map(|_| (rng.gen_range(0.02..0.45), rng.gen_range(0.2..2.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    (0..len)
        .map(|t| parts.iter().map(|(f, a, p)| a * (2.0 * PI * f * t as f64 + p).sin()).sum())
        .collect()
}

fn c2_cwt_roundtrip() -> Outcome {
    let t = Instant::now();
    let cfg = SdaqConfig {
        icwt_calibration: Some(sdaq::calibrate_icwt(&SdaqConfig::default()).unwrap()),
        ..SdaqConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let x = probe(&mut rng, 96);
        let s = sdaq::cwt(&x, 1, &cfg).unwrap();
        worst = worst.max(rel_l2(&sdaq::icwt(&s, &cfg).unwrap(), &x));
    }
    let el = t.elapsed();
    Outcome::new(
        worst <= 0.05 && el.as_secs_f64() < 30.0,
        format!("max rel L2 {worst:.2e} (<= 0.05) over 500 Haar probes, {} (< 30 s)", secs(el)),
    )
}

/// Smallest b with the freshly summed prefix of length b reaching mu of the
/// total.
fn ami_oracle(e: &[f64], mu: f64) -> usize {
    let total: f64 = e.iter().sum();
    (1..=e.len())
        .find(|&b| e[..b].iter().sum::<f64>() >= mu * total)
        .unwrap_or(e.len())
}

fn c3_ami() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut mismatches = 0;
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=60);
        let e: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..5.0) })
            .collect();
        if e.iter().sum::<f64>() == 0.0 {
            continue;
        }
        let mut mus: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..0.99)).collect();
        mus.sort_by(f64::total_cmp);
        let mut prev = 0;
        for mu in mus {
            let b = ami(&e, mu).unwrap();
            if b != ami_oracle(&e, mu) {
                mismatches += 1;
            }
            let total: f64 = e.iter().sum();
            // minimality: the prefix one shorter falls short
            if b > 1 && e[..b - 1].iter().sum::<f64>() >= mu * total {
                violations += 1;
            }
            if b < prev {
                violations += 1;
            }
            prev = b;
        }
    }
    Outcome::new(
        mismatches == 0 && violations == 0,
        format!("10000 vectors: {mismatches} oracle mismatches, {violations} minimality/monotonicity violations"),
    )
}

/// Plain DFT band-pass keeping frequencies in `[lo, hi]` cycles per sample.
fn bandpass(x: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for k in 0..n {
        let f = k.min(n - k) as f64 / n as f64;
        if f < lo || f > hi {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let a = 2.0 * PI * (k * t) as f64 / n as f64;
            re += v * a.cos();
            im -= v * a.sin();
        }
        for (t, o) in out.iter_mut().enumerate() {
            let a = 2.0 * PI * (k * t) as f64 / n as f64;
            *o += (re * a.cos() - im * a.sin()) / n as f64;
        }
    }
    out
}

fn c4_energy_routing() -> Outcome {
    // amplitudes 3:1 give the 9:1 energy ratio; both tones sit on DFT bins
    let len = 100;
    let low: Vec<f64> = (0..len).map(|t| 3.0 * (2.0 * PI * 0.02 * t as f64).sin()).collect();
    let high: Vec<f64> = (0..len).map(|t| (2.0 * PI * 0.3 * t as f64).sin()).collect();
    let x: Vec<f64> = low.iter().zip(&high).map(|(a, b)| a + b).collect();
    let energy: f64 = low.iter().map(|v| v * v).sum();
    let mut parts = Vec::new();
    let mut pass = true;
    for backend in [Backend::Cwt, Backend::Fft] {
        let cfg = SdaqConfig {
            backend,
            ..SdaqConfig::default()
        };
        let d = sdaq::sdaq_decompose(&x, 1, &cfg).unwrap();
        let p1 = bandpass(d.pattern(1, 0), 0.0, 0.1);
        let miss: f64 = p1.iter().zip(&low).map(|(a, b)| (a - b).powi(2)).sum();
        let captured = 1.0 - miss / energy;
        pass &= captured >= 0.95;
        parts.push(format!("{backend:?} {captured:.4}"));
    }
    Outcome::new(pass, format!("low-band energy captured by pattern 1: {} (>= 0.95)", parts.join(", ")))
}

/// Central differences on a training-mode graph with a fixed dropout seed.
fn check_training(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::training(seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::training(seed);
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let grad = g.grad(vars[i]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
        for k in 0..t.numel() {
            let orig = t.data()[k];
            work[i].data_mut()[k] = orig + 1e-5;
            let up = eval(&work);
            work[i].data_mut()[k] = orig - 1e-5;
            let down = eval(&work);
            work[i].data_mut()[k] = orig;
            let num = (up - down) / 2e-5;
            worst = worst.max((grad[k] - num).abs() / grad[k].abs().max(num.abs()).max(gradcheck::REL_FLOOR));
        }
    }
    worst
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

type Primitive = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph, &[Var]) -> pets::Result<Var>>);

fn primitives() -> Vec<Primitive> {
    let target = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
    let target2 = target.clone();
    let target3 = target.clone();
    let weights: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 + i as f64 / 10.0 }).collect();
    let sq = |g: &mut Graph, v: Var| -> pets::Result<Var> {
        let p = g.mul(v, v)?;
        Ok(g.mean(p))
    };
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(move |g, v| { let o = g.add(v[0], v[1])?; sq(g, o) })),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(move |g, v| { let o = g.sub(v[0], v[1])?; sq(g, o) })),
        ("add_n", vec![vec![2, 3], vec![2, 3], vec![2, 3]], Box::new(move |g, v| { let o = g.add_n(v)?; sq(g, o) })),
        ("add_broadcast", vec![vec![2, 3, 4], vec![4]], Box::new(move |g, v| { let o = g.add_broadcast(v[0], v[1])?; sq(g, o) })),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(move |g, v| { let o = g.mul(v[0], v[1])?; sq(g, o) })),
        ("scale", vec![vec![3, 4]], Box::new(move |g, v| { let o = g.scale(v[0], -1.7); sq(g, o) })),
        ("gelu", vec![vec![3, 4]], Box::new(move |g, v| { let o = g.gelu(v[0]); sq(g, o) })),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(move |g, v| { let o = g.matmul(v[0], v[1])?; sq(g, o) })),
        ("linear", vec![vec![2, 3, 4], vec![4, 5], vec![5]], Box::new(move |g, v| { let o = g.linear(v[0], v[1], Some(v[2]))?; sq(g, o) })),
        ("batched_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], Box::new(move |g, v| { let o = g.batched_matmul(v[0], v[1], false)?; sq(g, o) })),
        ("batched_matmul_t", vec![vec![2, 3, 4], vec![2, 5, 4]], Box::new(move |g, v| { let o = g.batched_matmul(v[0], v[1], true)?; sq(g, o) })),
        ("softmax", vec![vec![3, 5], vec![3, 5]], Box::new(move |g, v| { let s = g.softmax(v[0]); let o = g.mul(s, v[1])?; Ok(g.mean(o)) })),
        ("layer_norm", vec![vec![2, 3, 5], vec![5], vec![5], vec![2, 3, 5]], Box::new(move |g, v| { let n = g.layer_norm(v[0], v[1], v[2])?; let o = g.mul(n, v[3])?; Ok(g.mean(o)) })),
        ("conv1d", vec![vec![2, 5, 3], vec![3, 3, 4], vec![4]], Box::new(move |g, v| { let o = g.conv1d(v[0], v[1], Some(v[2]))?; sq(g, o) })),
        ("group_avg_pool", vec![vec![2, 6, 3]], Box::new(move |g, v| { let o = g.group_avg_pool(v[0], 3)?; sq(g, o) })),
        ("concat_tokens", vec![vec![2, 2, 3], vec![2, 3, 3]], Box::new(move |g, v| { let c = g.concat_tokens(v)?; let o = g.slice_tokens(c, 1, 3)?; sq(g, o) })),
        ("split_tokens", vec![vec![2, 5, 3]], Box::new(move |g, v| { let p = g.split_tokens(v[0], &[2, 3])?; let a = sq(g, p[0])?; let b = g.scale(p[1], 2.0); let b = sq(g, b)?; g.add(a, b) })),
        ("reshape", vec![vec![2, 6]], Box::new(move |g, v| { let r = g.reshape(v[0], &[3, 4])?; let o = g.mse_loss(r, &target3)?; Ok(o) })),
        ("transpose_tokens", vec![vec![2, 3, 4], vec![2, 4, 3]], Box::new(move |g, v| { let t = g.transpose_tokens(v[0])?; let o = g.mul(t, v[1])?; sq(g, o) })),
        ("flatten_rows", vec![vec![2, 3, 4], vec![2, 12]], Box::new(move |g, v| { let f = g.flatten_rows(v[0])?; let o = g.mul(f, v[1])?; sq(g, o) })),
        ("row_group_mean", vec![vec![6, 4]], Box::new(move |g, v| { let o = g.row_group_mean(v[0], 3)?; sq(g, o) })),
        ("mse_loss", vec![vec![3, 4]], Box::new(move |g, v| g.mse_loss(v[0], &target))),
        ("weighted_mse", vec![vec![3, 4]], Box::new(move |g, v| g.weighted_mse(v[0], &target2, Some(&weights)))),
        ("cross_entropy", vec![vec![4, 3]], Box::new(move |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))),
    ]
}

fn tiny_model_config() -> ModelConfig {
    // N=2, K=3, P_L=3, P_d=4
    ModelConfig {
        seq_len: 6,
        channels: 1,
        patch: PatchConfig { patch_len: 2, token_dim: 4, position: true },
        layers: 2,
        ffn_hidden: 5,
        dropout: 0.0,
        previous_hidden: false,
        task: Task::Forecast { horizon: 3 },
        sdaq: SdaqConfig { lambda: 3, backend: Backend::Fft, ..SdaqConfig::default() },
    }
}

fn c5_gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = ("", 0.0_f64);
    for (name, shapes, f) in primitives() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
        let r: GradCheck = gradcheck::check(&inputs, 1e-5, |g, v| f(g, v)).unwrap();
        if r.max_rel_err > worst.1 {
            worst = (name, r.max_rel_err);
        }
    }
    let x = rand_t(&mut rng, &[3, 4]);
    let d = check_training(&[x], 7, |g, v| {
        let o = g.dropout(v[0], 0.3).unwrap();
        let p = g.mul(o, o).unwrap();
        g.mean(p)
    });
    if d > worst.1 {
        worst = ("dropout", d);
    }

    let mut model = PetsModel::new(tiny_model_config(), 3).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let x = rand_t(&mut rng, &[2, 6]);
    let pats: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, &[2, 6])).collect();
    let target = rand_t(&mut rng, &[2, 3]);
    let mut inputs = vec![x];
    inputs.extend(pats);
    let ri = gradcheck::check(&inputs, 1e-5, |g, v| {
        let out = model.forward_vars(g, v[0], &v[1..], false)?;
        g.mse_loss(out.output, &target)
    })
    .unwrap();
    let rp = gradcheck::check_params(&model.store, 1e-5, None, |g, store| {
        let mut m = model.clone();
        m.store = store.clone();
        let out = m.forward(g, &inputs[0], &inputs[1..], false)?;
        g.mse_loss(out.output, &target)
    })
    .unwrap();
    let model_err = ri.max_rel_err.max(rp.max_rel_err);
    let el = t.elapsed();
    Outcome::new(
        worst.1 <= 1e-4 && model_err <= 1e-4 && el.as_secs_f64() < 120.0,
        format!(
            "25 primitives worst {:.2e} ({}), tiny model {model_err:.2e} over {} entries (<= 1e-4), {} (< 2 min)",
            worst.1,
            worst.0,
            ri.checked + rp.checked,
            secs(el)
        ),
    )
}

fn c6_gating() -> Outcome {
    let cfg = ModelConfig {
        task: Task::Forecast { horizon: 16 },
        seq_len: 32,
        ..ModelConfig::default()
    };
    let model = PetsModel::new(cfg.clone(), 6).unwrap();
    let dims: FpaDims = model.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut leak: f64 = 0.0;
    let mut focus_moves = true;
    for layer in &model.layers {
        let n = layer.index;
        let base: Vec<Tensor> = (0..dims.k).map(|_| rand_t(&mut rng, &[2, dims.tokens, dims.dim])).collect();
        let hidden = rand_t(&mut rng, &[2, dims.tokens, dims.dim]);
        let prompt = |pats: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = pats.iter().map(|p| g.constant(p.clone())).collect();
            let h = g.constant(hidden.clone());
            let p = layer.mpr.forward(&mut g, &model.store, &vars, h, &dims).unwrap();
            g.value(p).data().to_vec()
        };
        let p0 = prompt(&base);
        let focus = focus_pattern(n, dims.k);
        let mut moved = base.clone();
        for (k, t) in moved.iter_mut().enumerate() {
            if k + 1 != focus {
                *t = rand_t(&mut rng, t.shape());
            }
        }
        let p1 = prompt(&moved);
        leak = leak.max(p0.iter().zip(&p1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let mut f = base.clone();
        f[focus - 1] = rand_t(&mut rng, f[focus - 1].shape());
        focus_moves &= prompt(&f) != p0;
    }

    // ten optimiser steps on a small forecasting problem
    let frame = synth_generate(&SynthSpec {
        name: "gate".into(),
        length: 800,
        seed: 4,
        channels: vec![ChannelSpec {
            components: vec![Sinusoid { freq: 0.05, amp: 1.0, phase: 0.0 }],
            noise: 0.05,
            ..Default::default()
        }],
        anomalies: None,
    })
    .unwrap();
    let w = make_windows(&frame, &SplitSpec { window: 32, horizon: 16, stride: 1, ..Default::default() }).unwrap();
    let tr = Dataset::from_windows(&w.train, &cfg.task, &cfg.sdaq, 0).unwrap();
    let mut m = PetsModel::new(cfg, 6).unwrap();
    let tc = TrainConfig { epochs: 1, batch_size: 8, samples_per_epoch: Some(80), ..TrainConfig::default() };
    let empty = Dataset { inputs: vec![], patterns: vec![vec![]; 3], ..tr.clone() };
    train::train(&mut m, &tr, &empty, &tc, None, None).unwrap();
    let mut gates = 0;
    let mut nonzero = 0;
    for layer in &m.layers {
        for gate in layer.mpr.gates.iter().flatten() {
            gates += 1;
            if m.store.value(gate.weight).data().iter().any(|v| *v != 0.0) {
                nonzero += 1;
            }
        }
    }
    Outcome::new(
        leak <= 1e-12 && focus_moves && gates > 0 && nonzero == gates,
        format!(
            "gated-pattern leak {leak:.1e} over {} layers (<= 1e-12), {nonzero}/{gates} gate weights nonzero after 10 steps",
            m.layers.len()
        ),
    )
}

fn c7_channel_independence() -> Outcome {
    let cfg = ModelConfig { channels: 3, ..ModelConfig::default() };
    let mut model = PetsModel::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    // two samples of three channels
    let x = rand_t(&mut rng, &[6, 96]);
    let run = |x: &Tensor| {
        let p = decompose_rows(x.data(), 6, 96, &cfg.sdaq).unwrap();
        model.predict(x, &p).unwrap()
    };
    let base = run(&x);
    let mut moved = x.clone();
    for v in &mut moved.data_mut()[4 * 96..5 * 96] {
        *v += rng.gen_range(-2.0..2.0);
    }
    let out = run(&moved);
    let mut other: f64 = 0.0;
    let mut own: f64 = 0.0;
    for r in 0..6 {
        let d = (0..96)
            .map(|t| (base.data()[r * 96 + t] - out.data()[r * 96 + t]).abs())
            .fold(0.0, f64::max);
        if r == 4 {
            own = d;
        } else {
            other = other.max(d);
        }
    }
    Outcome::new(
        other == 0.0 && own > 0.0,
        format!("other channels changed by {other:e} (exact 0), perturbed channel by {own:.2e}"),
    )
}

fn two_tone(length: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        name: "two-tone".into(),
        length,
        seed,
        channels: vec![ChannelSpec {
            components: vec![
                Sinusoid { freq: 0.02, amp: 1.0, phase: 0.0 },
                Sinusoid { freq: 0.15, amp: 0.5, phase: 0.0 },
            ],
            noise: 0.1,
            ..Default::default()
        }],
        anomalies: None,
    }
}

fn c8_forecast(out: &Path) -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig {
        task: Task::Forecast { horizon: 96 },
        data: DataConfig::Synth { spec: two_tone(16_000, 7) },
        split: SplitSpec { window: 96, horizon: 96, stride: 1, ..Default::default() },
        epochs: 20,
        patience: Some(15),
        lr_decay: 0.9,
        samples_per_epoch: Some(1344),
        out: out.to_path_buf(),
        ..RunConfig::default()
    };
    let state = run::cmd_train(&cfg).unwrap();
    let r = run::cmd_eval(&cfg).unwrap();
    let el = t.elapsed();
    let (mse, last, trend) = (
        r.get("mse").unwrap(),
        r.get("baseline_last_mse").unwrap(),
        r.get("baseline_trend_mse").unwrap(),
    );
    Outcome::new(
        mse <= 0.02 && mse < last && mse < trend && state.epoch <= 200 && el.as_secs_f64() < 900.0,
        format!(
            "test MSE {mse:.4} (<= 0.02) vs repeat-last {last:.3}, linear {trend:.3}; {} epochs, {} (< 15 min)",
            state.epoch,
            secs(el)
        ),
    )
}

fn c9_classify(out: &Path) -> Outcome {
    let t = Instant::now();
    let spec = ClassSpec {
        samples_per_class: 150,
        length: 96,
        seed: 11,
        base: vec![
            Sinusoid { freq: 0.02, amp: 1.0, phase: 0.0 },
            Sinusoid { freq: 0.05, amp: 0.5, phase: 0.0 },
        ],
        noise: 0.1,
        classes: vec![vec![], vec![Burst { freq: 0.35, amp: 1.0, width: 24, count: 2 }]],
        cutoff: 0.2,
    };
    let cfg = RunConfig {
        task: Task::Classify { classes: 2 },
        data: DataConfig::SynthClasses { spec, test: 100, val: 0 },
        epochs: 60,
        out: out.to_path_buf(),
        ..RunConfig::default()
    };
    let data = run::prepare(&cfg).unwrap();
    let (n_train, n_test) = (data.train.count(), data.test.count());
    let state = run::cmd_train(&cfg).unwrap();
    let acc = run::cmd_eval(&cfg).unwrap().get("accuracy").unwrap();
    Outcome::new(
        acc >= 0.95 && state.epoch <= 100 && n_train == 200 && n_test == 100,
        format!(
            "accuracy {acc:.3} (>= 0.95) on {n_test} test samples after {} epochs on {n_train}, {}",
            state.epoch,
            secs(t.elapsed())
        ),
    )
}

fn c10_anomaly(out: &Path) -> Outcome {
    let t = Instant::now();
    let (tr, va, te) = (3000, 600, 192);
    let cfg = RunConfig {
        task: Task::Anomaly { quantile: 0.99 },
        data: DataConfig::Synth {
            spec: SynthSpec {
                name: "spiky sinusoid".into(),
                length: tr + va + te,
                seed: 3,
                channels: vec![ChannelSpec {
                    components: vec![Sinusoid { freq: 0.02, amp: 1.0, phase: 0.0 }],
                    noise: 0.1,
                    ..Default::default()
                }],
                anomalies: Some(AnomalySpec { count: 10, magnitude: 10.0, from: tr + va, to: tr + va + te, min_gap: 8 }),
            },
        },
        split: SplitSpec {
            partition: Partition::Length { train: tr, val: va, test: te },
            window: 96,
            horizon: 0,
            stride: 1,
        },
        epochs: 10,
        samples_per_epoch: Some(512),
        spike_augment: Some(SpikeAugment { rate: 0.01, min_magnitude: 2.0, max_magnitude: 20.0 }),
        out: out.to_path_buf(),
        ..RunConfig::default()
    };
    run::cmd_train(&cfg).unwrap();
    let r = run::cmd_eval(&cfg).unwrap();
    let (p, rc, f1) = (r.get("precision").unwrap(), r.get("recall").unwrap(), r.get("f1").unwrap());
    Outcome::new(
        f1 >= 0.9,
        format!("pointwise F1 {f1:.3} (>= 0.9), precision {p:.3}, recall {rc:.3}, 10 spikes of 10 sigma, {}", secs(t.elapsed())),
    )
}

// Brute-force metric definitions, written independently of the library.
mod oracle {
    pub fn mse(y: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..y.len() {
            s += (y[i] - p[i]) * (y[i] - p[i]);
        }
        s / y.len() as f64
    }
    pub fn mae(y: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..y.len() {
            s += (y[i] - p[i]).abs();
        }
        s / y.len() as f64
    }
    pub fn smape(y: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..y.len() {
            s += (y[i] - p[i]).abs() / (y[i].abs() + p[i].abs());
        }
        200.0 / y.len() as f64 * s
    }
    pub fn mape(y: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..y.len() {
            s += ((y[i] - p[i]) / y[i]).abs();
        }
        100.0 / y.len() as f64 * s
    }
    pub fn mase(y: &[f64], p: &[f64], m: usize) -> f64 {
        let f = y.len();
        let mut d = 0.0;
        for j in m..f {
            d += (y[j] - y[j - m]).abs();
        }
        mae(y, p) / (d / (f - m) as f64)
    }
    pub fn owa(y: &[f64], p: &[f64], hist: &[f64], m: usize) -> f64 {
        let naive: Vec<f64> = (0..y.len()).map(|h| hist[hist.len() - m + h % m]).collect();
        0.5 * (smape(y, p) / smape(y, &naive) + mase(y, p, m) / mase(y, &naive, m))
    }
    pub fn prf(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
        let tp = pred.iter().zip(truth).filter(|(a, b)| **a && **b).count() as f64;
        let pp = pred.iter().filter(|a| **a).count() as f64;
        let ap = truth.iter().filter(|a| **a).count() as f64;
        let p = if pp > 0.0 { tp / pp } else { 0.0 };
        let r = if ap > 0.0 { tp / ap } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }
}

fn c11_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut worst: f64 = 0.0;
    let mut note = |a: f64, b: f64| worst = worst.max((a - b).abs() / b.abs().max(1.0));
    for _ in 0..100 {
        let n = rng.gen_range(4..60);
        let sign = |r: &mut ChaCha8Rng| if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let y: Vec<f64> = (0..n).map(|_| sign(&mut rng) * rng.gen_range(0.1..10.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let hist: Vec<f64> = (0..rng.gen_range(8..40)).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let m = rng.gen_range(1..4);
        note(tasks::mse(&y, &p).unwrap(), oracle::mse(&y, &p));
        note(tasks::mae(&y, &p).unwrap(), oracle::mae(&y, &p));
        note(tasks::rmse(&y, &p).unwrap(), oracle::mse(&y, &p).sqrt());
        note(tasks::smape(&y, &p).unwrap(), oracle::smape(&y, &p));
        note(tasks::mape(&y, &p).unwrap(), oracle::mape(&y, &p));
        note(tasks::mase(&y, &p, m).unwrap(), oracle::mase(&y, &p, m));
        note(tasks::owa(&y, &p, &hist, m).unwrap(), oracle::owa(&y, &p, &hist, m));
        let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let (a, b, c) = tasks::precision_recall_f1(&pred, &truth).unwrap();
        let (x, yv, z) = oracle::prf(&pred, &truth);
        note(a, x);
        note(b, yv);
        note(c, z);
        let lp: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let lt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let hits = (0..n).filter(|&i| lp[i] == lt[i]).count() as f64;
        note(tasks::accuracy(&lp, &lt).unwrap(), hits / n as f64);
    }
    let (y, p) = ([1.0, 2.0], [2.0, 4.0]);
    let spot = [
        tasks::mae(&y, &p).unwrap(),
        tasks::mape(&y, &p).unwrap(),
        tasks::smape(&y, &p).unwrap(),
    ];
    let spot_ok = (spot[0] - 1.5).abs() < 1e-12
        && (spot[1] - 100.0).abs() < 1e-12
        && (spot[2] - 200.0 / 3.0).abs() < 1e-12;
    Outcome::new(
        worst <= 1e-10 && spot_ok,
        format!(
            "max deviation {worst:.1e} (<= 1e-10) over 100 cases x 11 metrics; MAE {}, MAPE {}, SMAPE {:.2}",
            spot[0], spot[1], spot[2]
        ),
    )
}

fn c12_determinism(root: &Path) -> Outcome {
    let make = |dir: &str| RunConfig {
        task: Task::Forecast { horizon: 48 },
        data: DataConfig::Synth { spec: two_tone(1500, 5) },
        split: SplitSpec { window: 96, horizon: 48, stride: 2, ..Default::default() },
        epochs: 3,
        samples_per_epoch: Some(128),
        seed: 12,
        write_predictions: true,
        out: root.join(dir),
        ..RunConfig::default()
    };
    let (a, b) = (make("a"), make("b"));
    let sa = run::cmd_train(&a).unwrap();
    let sb = run::cmd_train(&b).unwrap();
    run::cmd_eval(&a).unwrap();
    run::cmd_eval(&b).unwrap();
    let drift = sa
        .history
        .iter()
        .zip(&sb.history)
        .map(|(x, y)| (x.train_loss - y.train_loss).abs().max((x.val_loss - y.val_loss).abs()))
        .fold(0.0, f64::max);
    let same = |f: &str| std::fs::read(a.out.join(f)).unwrap() == std::fs::read(b.out.join(f)).unwrap();
    let files = ["metrics.json", "predictions.csv", "train_log.jsonl", "best.json"];
    let identical = files.iter().filter(|f| same(f)).count();
    Outcome::new(
        drift <= 1e-12 && sa.history.len() == sb.history.len() && identical == files.len(),
        format!("loss trajectory drift {drift:e} (<= 1e-12), {identical}/{} output files byte-identical", files.len()),
    )
}

fn c13_etth1(out: &Path) -> Outcome {
    let Ok(path) = std::env::var("PETS_ETTH1") else {
        return Outcome { pass: None, detail: "skipped: set PETS_ETTH1 to an ETTh1 CSV to run".into() };
    };
    let t = Instant::now();
    // the usual 12/4/4-month split of ETTh1
    let cfg = RunConfig {
        task: Task::Forecast { horizon: 96 },
        data: DataConfig::Csv { path: path.into(), label_column: None },
        split: SplitSpec {
            partition: Partition::Length { train: 8640, val: 2880, test: 2880 },
            window: 96,
            horizon: 96,
            stride: 1,
        },
        epochs: 30,
        patience: Some(5),
        out: out.to_path_buf(),
        ..RunConfig::default()
    };
    let result = run::cmd_train(&cfg).and_then(|_| run::cmd_eval(&cfg));
    let el = t.elapsed();
    match result {
        Ok(r) => {
            let mse = r.get("mse_norm").unwrap();
            Outcome::new(
                mse <= 0.45 && el.as_secs_f64() <= 3600.0,
                format!("normalised test MSE {mse:.4} (<= 0.45), {} (<= 1 h)", secs(el)),
            )
        }
        Err(e) => Outcome::new(false, format!("run failed: {e}")),
    }
}

fn main() -> ExitCode {
    let root = tempdir();
    let criteria: Vec<(u8, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "SDAQ losslessness (FFT)", Box::new(c1_fft_lossless)),
        (2, "SDAQ CWT round trip", Box::new(c2_cwt_roundtrip)),
        (3, "AMI correctness", Box::new(c3_ami)),
        (4, "energy routing", Box::new(c4_energy_routing)),
        (5, "gradient integrity", Box::new(c5_gradients)),
        (6, "zero-convolution gating", Box::new(c6_gating)),
        (7, "channel independence", Box::new(c7_channel_independence)),
        (8, "toy forecasting", Box::new(|| c8_forecast(&root.path().join("c8")))),
        (9, "toy classification", Box::new(|| c9_classify(&root.path().join("c9")))),
        (10, "toy anomaly detection", Box::new(|| c10_anomaly(&root.path().join("c10")))),
        (11, "metric oracle equivalence", Box::new(c11_metrics)),
        (12, "determinism", Box::new(|| c12_determinism(&root.path().join("c12")))),
        (13, "ETTh1 96->96 (optional)", Box::new(|| c13_etth1(&root.path().join("c13")))),
    ];
    let filter: Vec<u8> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let o = run();
        let tag = match o.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        if o.pass == Some(false) && id != 13 {
            failed += 1;
        }
        println!("criterion {id:>2} {tag}  {name}: {}", o.detail);
    }
    if failed > 0 {
        println!("{failed} required criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
