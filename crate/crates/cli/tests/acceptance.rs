//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion reports a PASS or FAIL line, even when the others pass.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;

use dpgrad::accountant::{default_orders, epsilon_for, get_noise_multiplier, rdp_subsampled_gaussian, SigmaSearch};
use dpgrad::data::PoissonSampler;
use dpgrad::grad_sample::{check_against_oracle, compute_grad_samples, GradSampleEntry, GradSampleRecord, GradSamplerRegistry};
use dpgrad::nn::{backward, forward, loss_forward_backward, mean_batch_gradient, LayerDescriptor, LossKind, ModelGraph, Targets};
use dpgrad::optimizer::{clip_and_sum, sgd_step, DpOptimizer, DpOptimizerConfig, EmptyBatchPolicy};
use dpgrad::validator::{suggest_fix, validate};
use dpgrad::zoo::{random_case, single_layer_case, Case, SUPPORTED_KINDS};
use dpgrad::{RngStream, Tensor};
use dpgrad_cli::bench::{bench_layer, BenchConfig, Mode};
use dpgrad_cli::config::RunConfig;
use dpgrad_cli::memory::predict_memory;
use dpgrad_cli::train::run_train;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Debug>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| format!("{e:?}"))
}

/// `max |a - b| / max |b|`, falling back to the absolute error when `b` is zero.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// `‖a - b‖ / max(‖b‖, FD_FLOOR)`. Central differences at step `H` resolve
/// gradients only down to about `1e-16 / H`, so tensors whose true gradient
/// vanishes (a conv bias feeding a one-channel norm group) are compared
/// against the floor instead of against round-off.
fn rel_err_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(FD_FLOOR)
}

const H: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

fn oracle_equivalence() -> Outcome {
    let reg32 = GradSamplerRegistry::<f32>::with_builtin_rules();
    let reg64 = GradSamplerRegistry::<f64>::with_builtin_rules();
    let mut rng = RngStream::seeded(1);
    let mut worst = Vec::new();
    for kind in SUPPORTED_KINDS {
        let (mut w32, mut w64) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            let b = rng.gen_range(1..=16);
            let case = ok(random_case::<f64>(kind, b, &mut rng))?;
            let c64 = ok(check_against_oracle(&case.model, &reg64, &case.input, &case.targets, case.loss, 1e-10))?;
            let case32: Case<f32> = ok(case.cast())?;
            let c32 = ok(check_against_oracle(&case32.model, &reg32, &case32.input, &case32.targets, case32.loss, 1e-5))?;
            w32 = w32.max(c32.max_rel_err);
            w64 = w64.max(c64.max_rel_err);
        }
        ensure(w32 <= 1e-5 && w64 <= 1e-10, || format!("{kind}: f32 {w32:.2e}, f64 {w64:.2e}"))?;
        worst.push(format!("{kind} {w32:.1e}/{w64:.1e}"));
    }
    Ok(format!("max rel err f32/f64: {}", worst.join(", ")))
}

fn batch_loss(model: &ModelGraph<f64>, input: &Tensor<f64>, targets: &Targets<f64>, loss: LossKind) -> Result<f64, String> {
    let (logits, _) = ok(forward(model, input))?;
    let (losses, _) = ok(loss_forward_backward(loss, &logits, targets))?;
    Ok(losses.data().iter().sum::<f64>() / losses.numel() as f64)
}

fn set_entry(model: &mut ModelGraph<f64>, layer: usize, name: &str, k: usize, value: f64) {
    let t = model.layers_mut()[layer].params.get_mut(name).expect("parameter exists");
    let mut data = t.to_f64_vec();
    data[k] = value;
    *t = Tensor::from_f64(t.shape().to_vec(), &data).expect("same shape");
}

/// Conv, instance norm (no running stats), ReLU and a linear head: covers the
/// one runnable layer kind that has no random case family.
fn instance_norm_case(b: usize, rng: &mut RngStream) -> Result<Case<f64>, String> {
    let (c, o, h) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(3..=4));
    let descs = vec![
        LayerDescriptor::Conv2d { in_channels: c, out_channels: o, kernel_size: [2, 2], stride: [1, 1], padding: [0, 0], bias: true },
        LayerDescriptor::InstanceNorm { num_features: o, track_running_stats: false, eps: 1e-5 },
        LayerDescriptor::Relu,
        LayerDescriptor::Flatten,
        LayerDescriptor::Linear { in_features: o * (h - 1) * (h - 1), out_features: 3, bias: true },
    ];
    let model = ok(ModelGraph::<f64>::from_descriptors(&descs, rng))?;
    let n = b * c * h * h;
    let input = ok(Tensor::from_f64(vec![b, c, h, h], &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))?;
    let targets = Targets::Classes((0..b).map(|_| rng.gen_range(0..3)).collect());
    Ok(Case { kind: "instance_norm".into(), model, input, targets, loss: LossKind::SoftmaxCrossEntropy })
}

fn finite_differences() -> Outcome {
    let reg = GradSamplerRegistry::<f64>::with_builtin_rules();
    let mut rng = RngStream::seeded(2);
    let families: Vec<&str> = SUPPORTED_KINDS.iter().copied().chain(["instance_norm"]).collect();
    let (mut worst_param, mut worst_input, mut instances) = (0.0f64, 0.0f64, 0);
    for family in &families {
        for _ in 0..10 {
            let b = rng.gen_range(1..=6);
            let case = if *family == "instance_norm" { instance_norm_case(b, &mut rng)? } else { ok(random_case::<f64>(family, b, &mut rng))? };
            instances += 1;

            let out = ok(compute_grad_samples(&case.model, &reg, &case.input, &case.targets, case.loss))?;
            let means = ok(out.record.batch_mean())?;
            for (entry, mean) in out.record.entries().iter().zip(&means) {
                let base = case.model.layers()[entry.layer_index].params.get(&entry.name).unwrap().to_f64_vec();
                let mut fd = vec![0.0; base.len()];
                let mut model = case.model.clone();
                for (k, g) in fd.iter_mut().enumerate() {
                    set_entry(&mut model, entry.layer_index, &entry.name, k, base[k] + H);
                    let up = batch_loss(&model, &case.input, &case.targets, case.loss)?;
                    set_entry(&mut model, entry.layer_index, &entry.name, k, base[k] - H);
                    let down = batch_loss(&model, &case.input, &case.targets, case.loss)?;
                    set_entry(&mut model, entry.layer_index, &entry.name, k, base[k]);
                    *g = (up - down) / (2.0 * H);
                }
                let err = rel_err_l2(&mean.to_f64_vec(), &fd);
                ensure(err <= 1e-3, || format!("{family} layer {} {}: rel err {err:.2e}", entry.layer_index, entry.name))?;
                worst_param = worst_param.max(err);
            }

            if *family == "embedding" {
                continue;
            }
            let (logits, cache) = ok(forward(&case.model, &case.input))?;
            let (_, g) = ok(loss_forward_backward(case.loss, &logits, &case.targets))?;
            let input_grad = ok(backward(&case.model, &cache, &g.scale(1.0 / b as f64)))?.input_grad.to_f64_vec();
            let x = case.input.to_f64_vec();
            let mut fd = vec![0.0; x.len()];
            for (k, g) in fd.iter_mut().enumerate() {
                let mut shifted = x.clone();
                shifted[k] = x[k] + H;
                let up = batch_loss(&case.model, &ok(Tensor::from_f64(case.input.shape().to_vec(), &shifted))?, &case.targets, case.loss)?;
                shifted[k] = x[k] - H;
                let down = batch_loss(&case.model, &ok(Tensor::from_f64(case.input.shape().to_vec(), &shifted))?, &case.targets, case.loss)?;
                *g = (up - down) / (2.0 * H);
            }
            let err = rel_err_l2(&input_grad, &fd);
            ensure(err <= 1e-3, || format!("{family} input gradient: rel err {err:.2e}"))?;
            worst_input = worst_input.max(err);
        }
    }
    Ok(format!("{instances} instances, max rel err params {worst_param:.1e}, inputs {worst_input:.1e}"))
}

fn clipping_contract() -> Outcome {
    let mut rng = RngStream::seeded(3);
    let mut clipped_total = 0;
    for batch in 0..1000 {
        let b = rng.gen_range(1..=16);
        let c = rng.gen_range(0.1..5.0);
        let shapes: Vec<Vec<usize>> = (0..rng.gen_range(1..=3)).map(|_| vec![b, rng.gen_range(1..=4), rng.gen_range(1..=4)]).collect();
        // Per-sample scales spread over two orders of magnitude around C.
        let scales: Vec<f64> = (0..b).map(|_| c * 10f64.powf(rng.gen_range(-1.5..1.0))).collect();
        let entries = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let per: usize = shape[1..].iter().product();
                let data: Vec<f64> = (0..b * per).map(|j| scales[j / per] * rng.gen_range(-1.0..1.0)).collect();
                GradSampleEntry { layer_index: i, name: "w".into(), tensor: Tensor::<f64>::from_f64(shape.clone(), &data).unwrap() }
            })
            .collect();
        let record = ok(GradSampleRecord::new(b, entries))?;
        let (sum, summary) = ok(clip_and_sum(&record, c))?;

        let mut want_sum: Vec<Vec<f64>> = record.entries().iter().map(|e| vec![0.0; e.tensor.numel() / b]).collect();
        for i in 0..b {
            let slices: Vec<Vec<f64>> = record.entries().iter().map(|e| e.tensor.slice_leading(i).unwrap().to_f64_vec()).collect();
            let norm = slices.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            let s = summary.scale_factors[i];
            let post = slices.iter().flatten().map(|v| (s * v) * (s * v)).sum::<f64>().sqrt();
            ensure(post <= c * (1.0 + 1e-6), || format!("batch {batch} sample {i}: post-clip norm {post} > C = {c}"))?;
            if norm <= c {
                ensure(s == 1.0, || format!("batch {batch} sample {i}: norm {norm} <= C but factor {s}"))?;
            } else {
                clipped_total += 1;
            }
            for (acc, slice) in want_sum.iter_mut().zip(&slices) {
                for (a, v) in acc.iter_mut().zip(slice) {
                    *a += s * v;
                }
            }
        }
        for (got, want) in sum.iter().zip(&want_sum) {
            let err = rel_err(&got.to_f64_vec(), want);
            ensure(err <= 1e-12, || format!("batch {batch}: clipped sum off by {err:.2e}"))?;
        }
    }
    Ok(format!("1000 batches, {clipped_total} samples clipped, bound and unit factors hold"))
}

fn dp_config(sigma: f64, c: f64, lr: f64, ebs: f64, seed: u64) -> DpOptimizerConfig {
    DpOptimizerConfig {
        noise_multiplier: sigma,
        max_grad_norm: c,
        learning_rate: lr,
        expected_batch_size: ebs,
        secure_mode: false,
        noise_seed: Some(seed),
        empty_batch: EmptyBatchPolicy::NoiseOnly,
    }
}

fn degenerate_dp_is_sgd() -> Outcome {
    let reg = GradSamplerRegistry::<f64>::with_builtin_rules();
    let lr = 0.05;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = RngStream::seeded(100 + seed);
        let kind = SUPPORTED_KINDS[seed as usize % SUPPORTED_KINDS.len()];
        let b = rng.gen_range(1..=16);
        let case = ok(random_case::<f64>(kind, b, &mut rng))?;
        let mut dp_model = case.model.clone();
        let mut sgd_model = case.model.clone();
        let mut opt = ok(DpOptimizer::<f64>::new(dp_config(0.0, 1e6, lr, b as f64, seed), 0.1))?;
        for step in 0..20 {
            let out = ok(compute_grad_samples(&dp_model, &reg, &case.input, &case.targets, case.loss))?;
            ok(opt.attach_grad_samples(out.record))?;
            ok(opt.step(&mut dp_model))?;
            let clipped = opt.state().last_clip().map_or(0, |s| s.num_clipped);
            ensure(clipped == 0, || format!("seed {seed}: C below a gradient norm at step {step}"))?;
            opt.zero_grad();

            let (grads, _) = ok(mean_batch_gradient(&sgd_model, &case.input, &case.targets, case.loss))?;
            ok(sgd_step(&mut sgd_model, &grads, lr))?;
            let err = rel_err(&dp_model.flat_params(), &sgd_model.flat_params());
            ensure(err <= 1e-6, || format!("seed {seed} ({kind}, b={b}) step {step}: rel err {err:.2e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("20 seeds x 20 steps, max rel err {worst:.1e}"))
}

fn virtual_steps() -> Outcome {
    let reg = GradSamplerRegistry::<f64>::with_builtin_rules();
    let mut worst = 0.0f64;
    for (i, kind) in SUPPORTED_KINDS.iter().enumerate() {
        let mut rng = RngStream::seeded(500 + i as u64);
        let case = ok(random_case::<f64>(kind, 64, &mut rng))?;
        let before = case.model.flat_params();
        let mut updates = Vec::new();
        for parts in [1usize, 2, 4, 8] {
            let mut model = case.model.clone();
            let mut opt = ok(DpOptimizer::<f64>::new(dp_config(1.0, 0.5, 0.1, 64.0, 77), 64.0 / 1000.0))?;
            let per = 64 / parts;
            for p in 0..parts {
                let idx: Vec<usize> = (p * per..(p + 1) * per).collect();
                let x = ok(case.input.select_leading(&idx))?;
                let t = ok(case.targets.select(&idx))?;
                let out = ok(compute_grad_samples(&model, &reg, &x, &t, case.loss))?;
                ok(opt.attach_grad_samples(out.record))?;
                if p + 1 < parts {
                    ok(opt.virtual_step())?;
                }
            }
            ok(opt.step(&mut model))?;
            updates.push(model.flat_params().iter().zip(&before).map(|(a, b)| a - b).collect::<Vec<_>>());
        }
        for (u, parts) in updates[1..].iter().zip([2, 4, 8]) {
            let err = rel_err(u, &updates[0]);
            ensure(err <= 1e-6, || format!("{kind}: {parts} parts differ from one by {err:.2e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("splits 1x64, 2x32, 4x16, 8x8 on every layer kind, max rel err {worst:.1e}"))
}

/// `ln((1-q)^2 + 2q(1-q) + q^2 e^{1/σ²}) = ln(1 + q² (e^{1/σ²} - 1))`, the
/// order-2 binomial sum written without cancellation.
fn order_two_reference(q: f64, sigma: f64) -> f64 {
    (q * q * (1.0 / (sigma * sigma)).exp_m1()).ln_1p()
}

fn accountant() -> Outcome {
    let orders = default_orders();
    let delta = 1e-5;
    // (a)
    for sigma in [0.3, 0.7, 1.0, 2.5] {
        for alpha in 2..=64u32 {
            let got = ok(rdp_subsampled_gaussian(1.0, sigma, alpha))?;
            let want = alpha as f64 / (2.0 * sigma * sigma);
            ensure(got == want, || format!("(a) q=1 sigma={sigma} alpha={alpha}: {got} != {want}"))?;
        }
    }
    // (b)
    let steps: Vec<u64> = (0..10).map(|i| 10 * 2u64.pow(i)).collect();
    let sigmas: Vec<f64> = (0..10).map(|i| 0.5 + 0.35 * i as f64).collect();
    let qs: Vec<f64> = (0..10).map(|i| 0.001 * 2f64.powi(i)).collect();
    let mut grid = vec![0.0; 1000];
    for (i, &t) in steps.iter().enumerate() {
        for (j, &s) in sigmas.iter().enumerate() {
            for (k, &q) in qs.iter().enumerate() {
                grid[i * 100 + j * 10 + k] = ok(epsilon_for(s, q, t, delta, &orders))?;
            }
        }
    }
    for i in 0..10 {
        for j in 0..10 {
            for k in 0..10 {
                let e = grid[i * 100 + j * 10 + k];
                ensure(i == 9 || grid[(i + 1) * 100 + j * 10 + k] >= e, || format!("(b) not increasing in steps at {i},{j},{k}"))?;
                ensure(j == 9 || grid[i * 100 + (j + 1) * 10 + k] <= e, || format!("(b) not decreasing in sigma at {i},{j},{k}"))?;
                ensure(k == 9 || grid[i * 100 + j * 10 + k + 1] >= e, || format!("(b) not increasing in q at {i},{j},{k}"))?;
            }
        }
    }
    // (c)
    let got = ok(rdp_subsampled_gaussian(0.01, 1.0, 2))?;
    let want = order_two_reference(0.01, 1.0);
    let digits_err = (got - want).abs() / want;
    ensure(digits_err <= 5e-11, || format!("(c) {got:.15e} vs {want:.15e}"))?;
    // (d)
    let mut checked = 0;
    for (target, q, t) in [(1.0, 0.01, 1000u64), (3.0, 0.004, 10_000), (8.0, 0.05, 200), (0.5, 0.02, 500)] {
        let sigma = ok(get_noise_multiplier(target, delta, q, t, &orders, SigmaSearch::default()))?;
        let at = ok(epsilon_for(sigma, q, t, delta, &orders))?;
        let below = ok(epsilon_for(sigma - 1e-3, q, t, delta, &orders))?;
        ensure(at <= target && target < below, || format!("(d) target {target}: sigma {sigma} gives {at}, sigma-1e-3 gives {below}"))?;
        checked += 1;
    }
    Ok(format!("(a) exact, (b) 1000-point grid monotone, (c) rel diff {digits_err:.1e}, (d) {checked} targets bracketed"))
}

fn memory_model() -> Outcome {
    let reg = GradSamplerRegistry::<f32>::with_builtin_rules();
    let mut rng = RngStream::seeded(7);
    let mut counted = 0;
    for kind in SUPPORTED_KINDS {
        for b in [16usize, 32, 64, 128, 256, 512] {
            let case = ok(single_layer_case::<f32>(kind, b, &mut rng))?;
            let out = ok(compute_grad_samples(&case.model, &reg, &case.input, &case.targets, case.loss))?;
            let want = b * case.model.num_params();
            ensure(out.record.numel() == want, || format!("{kind} b={b}: {} elements, expected {want}", out.record.numel()))?;
            counted += 1;
        }
    }
    let est = ok(predict_memory(512, 171, 1))?;
    ensure((est.ratio - 103.3).abs() <= 0.1, || format!("predict_memory(512, L=171, C=1) = {}", est.ratio))?;
    ensure(est.regime.label() == "L/C~b", || format!("L/C=171 at b=512 labeled {}", est.regime.label()))?;
    let data = ok(predict_memory(512, 10, 1000))?;
    let params = ok(predict_memory(8, 1_000_000, 10))?;
    ensure(data.regime.label() == "L/C<<b", || format!("data dominated labeled {}", data.regime.label()))?;
    ensure(params.regime.label() == "L/C>>b", || format!("parameter dominated labeled {}", params.regime.label()))?;
    for e in [&data, &params] {
        let off = (e.approx_ratio - e.ratio).abs() / e.ratio;
        ensure(off < 0.05, || format!("{} approximation {} vs exact {}", e.regime.label(), e.approx_ratio, e.ratio))?;
    }
    Ok(format!("{counted} (kind, b) counts exact, ratio {:.2}, three regimes labeled", est.ratio))
}

fn microbatch_slowdown() -> Outcome {
    let reg = GradSamplerRegistry::<f32>::with_builtin_rules();
    let cfg = BenchConfig { layers: vec!["linear".into()], batch_sizes: vec![], repeats: 200, input_batches: 10, warmup: 5, seed: 8 };
    let mut ratios = Vec::new();
    for b in [32usize, 64, 128] {
        let rows = ok(bench_layer("linear", b, &cfg, &reg))?;
        let time = |m: Mode| rows.iter().find(|r| r.mode == m).map(|r| r.mean_step_seconds).unwrap_or(f64::NAN);
        let (vec_t, micro_t) = (time(Mode::Vectorized), time(Mode::Microbatch));
        ensure(micro_t > vec_t, || format!("b={b}: microbatch {micro_t:.3e}s not above vectorized {vec_t:.3e}s"))?;
        ratios.push(format!("b={b} x{:.1}", micro_t / vec_t));
    }
    Ok(format!("microbatch slower: {}", ratios.join(", ")))
}

fn poisson_sampling() -> Outcome {
    let (n, q, draws) = (1000usize, 0.1, 10_000usize);
    let mut sampler = ok(PoissonSampler::new(q, n, RngStream::seeded(9)))?;
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        for i in sampler.next_batch() {
            counts[i] += 1;
        }
    }
    let mean = draws as f64 * q;
    let sd = (draws as f64 * q * (1.0 - q)).sqrt();
    let worst = counts.iter().map(|&c| (c as f64 - mean).abs() / sd).fold(0.0, f64::max);
    ensure(worst <= 5.0, || format!("an index strays {worst:.2} sd from {mean}"))?;
    let mut full = ok(PoissonSampler::new(1.0, 37, RngStream::seeded(10)))?;
    let all: Vec<usize> = (0..37).collect();
    for _ in 0..1000 {
        ensure(full.next_batch() == all, || "q=1 produced a partial batch".into())?;
    }
    Ok(format!("worst index {worst:.2} sd from the mean, q=1 always full"))
}

fn run_cli(args: &[&str]) -> Result<(i32, String), String> {
    let out = ok(Command::new(env!("CARGO_BIN_EXE_dpgrad")).args(args).output())?;
    Ok((out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned()))
}

fn validator() -> Outcome {
    let reg = GradSamplerRegistry::<f32>::with_builtin_rules();
    let bad = vec![
        LayerDescriptor::Conv2d { in_channels: 3, out_channels: 12, kernel_size: [3, 3], stride: [1, 1], padding: [1, 1], bias: true },
        LayerDescriptor::BatchNorm { num_features: 12, eps: 1e-5 },
        LayerDescriptor::Relu,
        LayerDescriptor::InstanceNorm { num_features: 12, track_running_stats: true, eps: 1e-5 },
        LayerDescriptor::Flatten,
        LayerDescriptor::Linear { in_features: 12 * 16, out_features: 2, bias: true },
    ];
    let violations = validate(&bad, &reg);
    let located: Vec<(usize, String)> = violations.iter().map(|v| (v.layer_index, v.kind.clone())).collect();
    ensure(located == [(1, "batch_norm".to_string()), (3, "instance_norm".to_string())], || format!("violations {located:?}"))?;
    let fixed = suggest_fix(&bad);
    ensure(validate(&fixed, &reg).is_empty(), || "suggested fix still has violations".into())?;

    let dir = ok(tempfile::tempdir())?;
    let bad_path = dir.path().join("bad.json");
    let fixed_path = dir.path().join("fixed.json");
    ok(fs::write(&bad_path, ok(serde_json::to_string(&bad))?))?;
    ok(fs::write(&fixed_path, ok(serde_json::to_string(&fixed))?))?;
    let (code_bad, stdout_bad) = run_cli(&["validate", bad_path.to_str().unwrap()])?;
    ensure(code_bad == 1 && stdout_bad.contains("layer=1") && stdout_bad.contains("layer=3"), || {
        format!("invalid model: exit {code_bad}, output {stdout_bad:?}")
    })?;
    let (code_fixed, _) = run_cli(&["validate", fixed_path.to_str().unwrap()])?;
    ensure(code_fixed == 0, || format!("fixed model: exit {code_fixed}"))?;
    let missing = dir.path().join("missing.json");
    let (code_missing, _) = run_cli(&["validate", missing.to_str().unwrap()])?;
    ensure(code_missing == 2, || format!("missing file: exit {code_missing}"))?;
    Ok(format!("violations at layers 1 and 3, fix validates, exit codes {code_bad}/{code_fixed}/{code_missing}"))
}

fn end_to_end() -> Outcome {
    let cfg = ok(RunConfig::from_json(
        r#"{
            "layers": [
                {"kind": "linear", "in_features": 2, "out_features": 16},
                {"kind": "relu"},
                {"kind": "linear", "in_features": 16, "out_features": 2}
            ],
            "dataset": {"kind": "blobs", "n": 2000},
            "epochs": 10,
            "sample_rate": 0.05,
            "physical_batch": 32,
            "noise_multiplier": 0.5,
            "max_grad_norm": 1.0,
            "learning_rate": 0.5,
            "seed_data": 7,
            "seed_noise": 11
        }"#,
    ))?;
    let report = ok(run_train(&cfg, None))?;
    let (first, last) = (&report.rows[0], report.rows.last().unwrap());
    let drop = 1.0 - last.loss / first.loss;
    ensure(drop >= 0.5, || format!("loss {} -> {} ({:.0}% drop)", first.loss, last.loss, 100.0 * drop))?;
    ensure(report.rows.windows(2).all(|w| w[1].epsilon >= w[0].epsilon), || "epsilon trace decreases".into())?;
    ensure(last.epsilon > 0.0 && last.epsilon.is_finite(), || format!("final epsilon {}", last.epsilon))?;
    Ok(format!(
        "loss {:.4} -> {:.4} ({:.0}% drop), accuracy {:.3}, final epsilon {:.3}",
        first.loss,
        last.loss,
        100.0 * drop,
        last.accuracy,
        last.epsilon
    ))
}

/// Id, name, time budget in seconds, check.
type Criterion = (u32, &'static str, u64, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        (1, "oracle equivalence", 120, oracle_equivalence),
        (2, "finite differences", 120, finite_differences),
        (3, "clipping contract", 30, clipping_contract),
        (4, "degenerate DP equals SGD", 60, degenerate_dp_is_sgd),
        (5, "virtual steps", 30, virtual_steps),
        (6, "accountant", 60, accountant),
        (7, "memory model", 60, memory_model),
        (8, "microbatch slowdown", 120, microbatch_slowdown),
        (9, "Poisson sampling", 60, poisson_sampling),
        (10, "validator and exit codes", 10, validator),
        (11, "end-to-end smoke", 120, end_to_end),
    ];
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(budget) => Err(format!("{detail}; took {elapsed:.1?}, budget {budget}s")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail}) [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({detail}) [{elapsed:.2?}]");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
