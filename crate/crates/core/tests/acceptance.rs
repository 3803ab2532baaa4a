//! End-to-end acceptance checks. Prints one line per criterion and exits
//! with a failure status if any criterion fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ibgc_core::attack::{evaluate_attacks, random_targets, AttackConfig};
use ibgc_core::data::{synth_bars, synth_bars_range, synth_ood, Dataset, OodKind};
use ibgc_core::explain::{class_heatmap, expected_confidence};
use ibgc_core::flow::{DctPool, Direction};
use ibgc_core::loss::{ib_total_var, logits_var, loss_x_per_sample_var, loss_y_var, smooth_labels, Beta};
use ibgc_core::metrics::{calibration_curve, ece, effective_receptive_field, oce};
use ibgc_core::model::{ArchSpec, BlockSpec, FlowModel};
use ibgc_core::params::Bound;
use ibgc_core::ood::{atypicality, fit_test, rejection_rate, roc_auc, ScoreSet, TestKind};
use ibgc_core::rng::{stream, Purpose};
use ibgc_core::tensor::{LinearOp, Reduce};
use ibgc_core::trainer::{evaluate, train, TrainConfig};
use ibgc_core::{Tape, Tensor, Var};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn perturbed(arch: ArchSpec, scale: f64, seed: u64) -> FlowModel {
    let mut m = FlowModel::new(arch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params.iter_mut() {
        for v in p.value.data_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *v += scale * g;
        }
    }
    m
}

fn uniform_images(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = shape.iter().product();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], (0..n * per).map(|_| rng.gen()).collect()).unwrap()
}

fn c1_invertibility() -> Outcome {
    let start = Instant::now();
    let model = perturbed(ArchSpec::desk([1, 16, 16], 4, 32, 8), 0.05, 11);
    let x = uniform_images(1000, [1, 16, 16], 12);
    let (z, _) = model.encode(&x).map_err(e)?;
    let back = model.decode(&z).map_err(e)?;
    let err = back.max_abs_diff(&x);
    let took = start.elapsed();
    ensure(err < 1e-8, format!("max reconstruction error {:.3e}", err))?;
    ensure(took < Duration::from_secs(30), format!("took {:?}", took))?;
    Ok(format!("max |x - g(f(x))| = {:.3e} over 1000 images in {:.1?}", err, took))
}

fn c2_logdet() -> Outcome {
    let mut arch = ArchSpec::desk([3, 2, 2], 2, 4, 4);
    arch.blocks = vec![
        BlockSpec::Downsample { kernel: 1, hidden: 4 },
        BlockSpec::Coupling { kernel: 1, hidden: 4 },
    ];
    arch.prototypes = 2;
    let model = perturbed(arch, 0.2, 21);
    let d = 12;
    let h = 1e-5;
    let x = uniform_images(100, [3, 2, 2], 22);
    let (_, logdet) = model.encode(&x).map_err(e)?;
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let base = &x.data()[i * d..(i + 1) * d];
        let mut probes = Vec::with_capacity(2 * d * d);
        for j in 0..d {
            for sign in [1.0, -1.0] {
                let mut p = base.to_vec();
                p[j] += sign * h;
                probes.extend(p);
            }
        }
        let (z, _) = model.encode(&Tensor::new(vec![2 * d, 3, 2, 2], probes).map_err(e)?).map_err(e)?;
        let jac = DMatrix::from_fn(d, d, |r, c| (z.data()[(2 * c) * d + r] - z.data()[(2 * c + 1) * d + r]) / (2.0 * h));
        let numeric = jac.determinant().abs().ln();
        worst = worst.max((numeric - logdet[i]).abs());
    }
    ensure(worst < 1e-6, format!("worst logdet gap {:.3e}", worst))?;
    Ok(format!("worst |logdet - log|det J|| = {:.3e} over 100 inputs", worst))
}

fn two_blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(2 * n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let (cx, cy) = if y == 0 { (-1.5, -0.5) } else { (1.5, 0.5) };
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        xs.push(cx + 0.6 * a);
        xs.push(cy + 0.6 * b);
        ys.push(y);
    }
    Dataset::new(Tensor::new(vec![n, 2, 1, 1], xs).unwrap(), ys, 2).unwrap()
}

fn c3_density_integral() -> Outcome {
    let data = two_blobs(4000, 31);
    let mut model = FlowModel::new(ArchSpec::toy2d(2, 16)).map_err(e)?;
    let cfg = TrainConfig {
        lr0: 0.01,
        epochs: 1000,
        max_steps: Some(2000),
        dequant_amplitude: 0.0,
        flip: false,
        crop: false,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &cfg, |_| {}).map_err(e)?;
    let steps = 601;
    let step = 12.0 / (steps - 1) as f64;
    let mut grid = Vec::with_capacity(2 * steps * steps);
    for i in 0..steps {
        for j in 0..steps {
            grid.push(-6.0 + i as f64 * step);
            grid.push(-6.0 + j as f64 * step);
        }
    }
    let ll = model
        .marginal_log_likelihood(&Tensor::new(vec![steps * steps, 2, 1, 1], grid).map_err(e)?)
        .map_err(e)?;
    let weight = |k: usize| if k == 0 || k == steps - 1 { 0.5 } else { 1.0 };
    let mut total = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            total += weight(i) * weight(j) * ll[i * steps + j].exp();
        }
    }
    total *= step * step;
    ensure((0.98..=1.02).contains(&total), format!("integral {:.5}", total))?;
    Ok(format!("integral of q(x) over [-6, 6]^2 = {:.5}", total))
}

/// `‖g_fd − g‖ / ‖g_fd‖` for `L = Σ r ⊙ f(x)` with fixed random `r`.
fn grad_check(name: &str, inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Result<f64, String> {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..tape.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
    };
    let value = |ins: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data().iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward_with(out, &weights).map_err(e)?;
    let h = 1e-6;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], t.numel());
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            num += (fd - analytic[j]).powi(2);
            den += fd * fd;
        }
    }
    let rel = num.sqrt() / den.sqrt().max(1e-12);
    ensure(rel < 1e-4, format!("{}: relative error {:.3e}", name, rel))?;
    Ok(rel)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn c4_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let m = rand_tensor(&[3, 4], &mut rng);
    let pos = Tensor::new(vec![3, 4], m.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let v4 = rand_tensor(&[4], &mut rng);
    let mut worst: f64 = 0.0;
    let unary: [(&str, fn(&mut Tape, Var) -> Var); 6] = [
        ("exp", |t, x| t.exp(x).unwrap()),
        ("tanh", |t, x| t.tanh(x).unwrap()),
        ("softplus", |t, x| t.softplus(x).unwrap()),
        ("relu", |t, x| t.relu(x).unwrap()),
        ("square", |t, x| t.square(x).unwrap()),
        ("scale_shift", |t, x| {
            let y = t.scale(x, -1.7).unwrap();
            t.shift(y, 0.3).unwrap()
        }),
    ];
    for (name, op) in unary {
        worst = worst.max(grad_check(name, std::slice::from_ref(&m), &|t, v| op(t, v[0]))?);
    }
    worst = worst.max(grad_check("log", &[pos], &|t, v| t.log(v[0]).unwrap())?);
    let b = rand_tensor(&[3, 4], &mut rng);
    worst = worst.max(grad_check("mul", &[m.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]).unwrap())?);
    worst = worst.max(grad_check("sub", &[m.clone(), b], &|t, v| t.sub(v[0], v[1]).unwrap())?);
    worst = worst.max(grad_check("add_along", &[m.clone(), v4.clone()], &|t, v| t.add_along(v[0], v[1], 1).unwrap())?);
    worst = worst.max(grad_check("mul_along", &[m.clone(), v4], &|t, v| t.mul_along(v[0], v[1], 1).unwrap())?);
    let k = rand_tensor(&[4, 2], &mut rng);
    worst = worst.max(grad_check("matmul", &[m.clone(), k], &|t, v| t.matmul(v[0], v[1]).unwrap())?);
    for (name, kind) in [
        ("sum", Reduce::Sum),
        ("mean", Reduce::Mean),
        ("logsumexp", Reduce::LogSumExp),
        ("log_softmax", Reduce::LogSoftmax),
        ("max", Reduce::Max),
    ] {
        for axis in 0..2 {
            worst = worst.max(grad_check(name, std::slice::from_ref(&m), &|t, v| t.reduce(v[0], kind, axis).unwrap())?);
        }
    }
    let img = rand_tensor(&[2, 3, 5, 5], &mut rng);
    let ker = rand_tensor(&[4, 3, 3, 3], &mut rng);
    for (stride, pad) in [(1, 1), (2, 0)] {
        worst = worst.max(grad_check("conv2d", &[img.clone(), ker.clone()], &|t, v| t.conv2d(v[0], v[1], stride, pad).unwrap())?);
    }
    let z = rand_tensor(&[3, 6], &mut rng);
    let mu = rand_tensor(&[2, 6], &mut rng);
    worst = worst.max(grad_check("sq_dist", &[z.clone(), mu], &|t, v| t.sq_dist(v[0], v[1]).unwrap())?);
    worst = worst.max(grad_check("slice_concat", std::slice::from_ref(&z), &|t, v| {
        let a = t.slice(v[0], 1, 0, 2).unwrap();
        let b = t.slice(v[0], 1, 3, 3).unwrap();
        t.concat(b, a, 1).unwrap()
    })?);
    worst = worst.max(grad_check("gather", &[z], &|t, v| t.gather(v[0], &[5, 0, 17, 5, 9]).unwrap())?);
    let pool: Arc<dyn LinearOp> = Arc::new(DctPool::new(3, 4, Direction::Forward));
    let maps = rand_tensor(&[2, 3, 4, 4], &mut rng);
    worst = worst.max(grad_check("dct_pool", &[maps], &|t, v| t.linear(v[0], pool.clone()).unwrap())?);

    let mut arch = ArchSpec::toy2d(2, 3);
    arch.input = [2, 2, 2];
    arch.blocks = vec![
        BlockSpec::Coupling { kernel: 3, hidden: 3 },
        BlockSpec::Coupling { kernel: 1, hidden: 3 },
    ];
    arch.prototypes = 2;
    arch.mu_init_scale = 1.0;
    let model = perturbed(arch, 0.3, 77);
    ensure(model.latent_dim() == 8, format!("latent dim {}", model.latent_dim()))?;
    let x = uniform_images(3, [2, 2, 2], 42);
    let mut targets = Tensor::zeros(&[3, 2]);
    for (i, y) in [0usize, 1, 1].into_iter().enumerate() {
        targets.data_mut()[i * 2..(i + 1) * 2].copy_from_slice(&smooth_labels(y, 2, 0.05).map_err(e)?);
    }
    let params: Vec<Tensor> = model.params.iter().map(|p| p.value.clone()).collect();
    let loss = |t: &mut Tape, v: &[Var]| -> Var {
        let xv = t.constant(x.clone());
        let p = Bound::from_vars(v.to_vec());
        let (z, ld) = model.encode_var(t, &p, xv).unwrap();
        let mu = model.head.mu_var(t, &p).unwrap();
        let w = t.constant(model.head.log_priors_tensor());
        let logits = logits_var(t, z, mu, w).unwrap();
        let lx = loss_x_per_sample_var(t, logits, ld).unwrap();
        let lx = t.reduce(lx, Reduce::Mean, 0).unwrap();
        let ly = loss_y_var(t, logits, &targets).unwrap();
        ib_total_var(t, Some(lx), Some(ly), Beta::Finite(2.0)).unwrap()
    };
    let ib_rel = grad_check("ib_loss", &params, &loss)?;
    worst = worst.max(ib_rel);
    Ok(format!("worst relative gradient error {:.3e} (IB loss {:.3e})", worst, ib_rel))
}

struct SweepRun {
    csv: String,
    models: Vec<(f64, FlowModel, f64, f64)>,
}

const BETAS: [f64; 3] = [0.02, 2.0, 32.0];

fn bench_train_data() -> Dataset {
    synth_bars(4000, 4, [1, 16, 16], 1).unwrap()
}

fn bench_test_data() -> Dataset {
    synth_bars_range(4000, 1000, 4, [1, 16, 16], 1).unwrap()
}

fn beta_sweep() -> Result<SweepRun, String> {
    let data = bench_train_data();
    let test = bench_test_data();
    let mut csv = String::from("beta,epoch,lr,l_x,l_y,total,acc,bpd\n");
    let mut models = Vec::new();
    for beta in BETAS {
        let mut arch = ArchSpec::desk([1, 16, 16], 4, 32, 8);
        arch.mu_init_scale = 0.3;
        let mut model = FlowModel::new(arch).map_err(e)?;
        let cfg = TrainConfig {
            epochs: 8,
            beta: Beta::Finite(beta),
            lr0: 0.02,
            flip: false,
            plateau_patience: 2,
            seed: 1,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &data, &cfg, |_| {}).map_err(e)?;
        for s in &history {
            csv.push_str(&format!("{},{}\n", beta, s.csv_row()));
        }
        let (acc, bpd) = evaluate(&model, &test).map_err(e)?;
        csv.push_str(&format!("{},test,,,,,{:.10e},{:.10e}\n", beta, acc, bpd));
        models.push((beta, model, acc, bpd));
    }
    Ok(SweepRun { csv, models })
}

fn c5_beta_sweep(run: &SweepRun) -> Outcome {
    let row: Vec<String> = run
        .models
        .iter()
        .map(|(b, _, acc, bpd)| format!("beta={} acc={:.4} bpd={:.4}", b, acc, bpd))
        .collect();
    for w in run.models.windows(2) {
        ensure(w[1].2 >= w[0].2, format!("accuracy drops: {}", row.join("; ")))?;
        ensure(w[1].3 >= w[0].3, format!("bits/dim drops: {}", row.join("; ")))?;
    }
    let last = run.models.last().unwrap();
    ensure(last.2 >= 0.95, format!("largest-beta accuracy {:.4}", last.2))?;
    Ok(row.join("; "))
}

fn beta2(run: &SweepRun) -> &FlowModel {
    &run.models.iter().find(|m| m.0 == 2.0).unwrap().1
}

fn training_refs(model: &FlowModel) -> Result<ScoreSet, String> {
    ScoreSet::new(model.marginal_log_likelihood(&bench_train_data().images).map_err(e)?).map_err(e)
}

fn c6_ood(model: &FlowModel, refs: &ScoreSet) -> Outcome {
    let test = bench_test_data();
    let noise = synth_ood(OodKind::UniformNoise, &test, 61).map_err(e)?;
    let clean = model.marginal_log_likelihood(&test.images).map_err(e)?;
    let odd = model.marginal_log_likelihood(&noise.images).map_err(e)?;
    let stat = |s: &[f64]| -> Vec<f64> { s.iter().map(|&v| atypicality(refs, TestKind::TwoTailed, v)).collect() };
    let auc = roc_auc(&stat(&clean), &stat(&odd)).map_err(e)?;
    ensure(auc >= 95.0, format!("two-tailed AUC {:.2}", auc))?;
    let n = refs.len() as f64;
    let mut rates = Vec::new();
    for kind in TestKind::ALL {
        for p in [0.1, 0.01] {
            let test = fit_test(refs, kind, p).map_err(e)?;
            let rate = rejection_rate(&test, refs.scores());
            ensure((rate - p).abs() <= 2.0 / n, format!("{} p={} rejects {:.5}", kind.name(), p, rate))?;
            rates.push(format!("{}@{}={:.4}", kind.name(), p, rate));
        }
    }
    Ok(format!("AUC {:.2}; reference rejection {}", auc, rates.join(" ")))
}

fn c7_expected_confidence() -> Outcome {
    let mut worst: f64 = 0.0;
    for delta in [0.5, 1.0, 2.0, 4.0] {
        let mut rng = stream(0, Purpose::Eval, (delta * 10.0) as u64);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let d0: f64 = z.iter().map(|v| v * v).sum();
            let d1 = (z[0] - delta).powi(2) + z[1] * z[1] + z[2] * z[2];
            let p0 = 1.0 / (1.0 + (0.5 * (d0 - d1)).exp());
            acc += p0.max(1.0 - p0);
        }
        let mc = acc / n as f64;
        let exact = expected_confidence(delta).map_err(e)?;
        ensure((mc - exact).abs() < 0.005, format!("delta {}: {:.5} vs Monte Carlo {:.5}", delta, exact, mc))?;
        worst = worst.max((mc - exact).abs());
    }
    let grid: Vec<f64> = (0..100)
        .map(|i| expected_confidence(0.1 * i as f64))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    ensure(grid.windows(2).all(|w| w[1] >= w[0]), "not monotone".into())?;
    let tiny = expected_confidence(1e-6).map_err(e)?;
    ensure((tiny - 0.5).abs() < 1e-3, format!("value near zero {:.6}", tiny))?;
    Ok(format!("worst Monte-Carlo gap {:.2e}; monotone on 100 points", worst))
}

fn c8_heatmaps(model: &FlowModel) -> Outcome {
    let x = bench_test_data().images.rows(0, 100).map_err(e)?;
    let (z, _) = model.encode(&x).map_err(e)?;
    let preds = model.predict(&x).map_err(e)?;
    let mu = model.head.mu(&model.params);
    let priors = &model.head.log_priors;
    let d = model.latent_dim();
    let mut worst: f64 = 0.0;
    for (i, pred) in preds.iter().enumerate() {
        let zi = &z.data()[i * d..(i + 1) * d];
        for y in 0..model.head.classes {
            let map = class_heatmap(zi, &mu, priors, model.pooled, y, 0.1).map_err(e)?;
            let log_post = pred.class_log_likelihoods[y] + priors[y] - pred.marginal;
            worst = worst.max((map.sum() - log_post).abs());
        }
    }
    ensure(worst < 1e-8, format!("worst gap {:.3e}", worst))?;
    Ok(format!("worst |sum Q - log p(y|x)| = {:.3e} over 100 inputs", worst))
}

struct AttackRun {
    csv: String,
    mean_l2: Vec<f64>,
    success: Vec<f64>,
    auc_two_tailed: Vec<f64>,
    took: Duration,
}

fn attack_grid() -> Vec<AttackConfig> {
    let base = AttackConfig {
        kappa: 0.01,
        c: 10.0,
        d: 0.0,
        ..AttackConfig::default()
    };
    vec![
        base.clone(),
        AttackConfig {
            kappa: f64::INFINITY,
            ..base.clone()
        },
        AttackConfig { d: 1000.0, ..base },
    ]
}

fn attacks(model: &FlowModel, refs: &ScoreSet) -> Result<AttackRun, String> {
    let start = Instant::now();
    let test = bench_test_data();
    let pairs = test.subset(0, 50).map_err(e)?;
    let targets = random_targets(&pairs.labels, 4, &mut stream(0, Purpose::Attack, 0));
    let clean = model.marginal_log_likelihood(&test.images).map_err(e)?;
    let out = evaluate_attacks(model, &pairs.images, &targets, &attack_grid(), refs, &clean).map_err(e)?;
    let mut csv = String::new();
    for (summary, results) in &out {
        csv.push_str(&summary.csv_row());
        csv.push('\n');
        for r in results {
            csv.push_str(&format!("{},{},{:.10e},{:.10e},{}\n", r.target, r.predicted, r.l2, r.log_q, r.steps));
        }
    }
    Ok(AttackRun {
        csv,
        mean_l2: out.iter().map(|o| o.0.mean_l2).collect(),
        success: out.iter().map(|o| o.0.success_pct).collect(),
        auc_two_tailed: out.iter().map(|o| o.0.auc_two_tailed).collect(),
        took: start.elapsed(),
    })
}

fn c9_attacks(run: &AttackRun) -> Outcome {
    let detail = format!(
        "success {:.0}%; mean L2 {:.4} (kappa 0.01) vs {:.4} (inf); two-tailed AUC {:.2} (d 0) vs {:.2} (d 1000); {:.0?}",
        run.success[0], run.mean_l2[0], run.mean_l2[1], run.auc_two_tailed[0], run.auc_two_tailed[2], run.took
    );
    ensure(run.success[0] == 100.0, detail.clone())?;
    ensure(run.mean_l2[1] > run.mean_l2[0], detail.clone())?;
    ensure(run.auc_two_tailed[2] < run.auc_two_tailed[0], detail.clone())?;
    ensure(run.took < Duration::from_secs(600), detail.clone())?;
    Ok(detail)
}

fn c10_calibration() -> Outcome {
    let n = 1000;
    let ok: Vec<bool> = (0..n).map(|i| i >= 11).collect();
    let v = oce(&vec![0.999; n], &ok, 0.997).map_err(e)?.ok_or("no confident predictions")?;
    ensure((v - 11.0 / 3.0).abs() < 1e-9, format!("OCE {}", v))?;
    let mut rng = stream(0, Purpose::Eval, 100);
    let n = 100_000;
    let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.25..1.0)).collect();
    let correct: Vec<bool> = conf.iter().map(|&c| rng.gen::<f64>() < c).collect();
    let curve = calibration_curve(&conf, &correct, 15).map_err(e)?;
    let err = ece(&curve);
    ensure(err < 0.01, format!("ECE {:.4}", err))?;
    Ok(format!("OCE {:.10}; calibrated ECE {:.4}", v, err))
}

fn c11_receptive_field() -> Outcome {
    let arch = |extra: Option<BlockSpec>| {
        let mut a = ArchSpec::desk([1, 16, 16], 2, 4, 4);
        a.blocks = vec![
            BlockSpec::Downsample { kernel: 1, hidden: 4 },
            BlockSpec::Downsample { kernel: 1, hidden: 4 },
        ];
        a.blocks.extend(extra);
        a
    };
    let x = uniform_images(4, [1, 16, 16], 111);
    let plain = effective_receptive_field(&perturbed(arch(None), 0.1, 7), &x).map_err(e)?;
    let wide = effective_receptive_field(
        &perturbed(arch(Some(BlockSpec::Coupling { kernel: 3, hidden: 4 })), 0.1, 7),
        &x,
    )
    .map_err(e)?;
    ensure(plain.support_width() == 4, format!("support {}", plain.support_width()))?;
    ensure(wide.support_width() > 4, format!("widened support {}", wide.support_width()))?;
    Ok(format!("support {} px, {} px with a 3x3 coupling", plain.support_width(), wide.support_width()))
}

fn report(n: usize, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("criterion {}: PASS {}", n, detail),
        Err(detail) => {
            *failures += 1;
            println!("criterion {}: FAIL {}", n, detail);
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    report(1, c1_invertibility(), &mut failures);
    report(2, c2_logdet(), &mut failures);
    report(3, c3_density_integral(), &mut failures);
    report(4, c4_gradients(), &mut failures);
    let sweep = beta_sweep();
    let refs = sweep.as_ref().map_err(Clone::clone).and_then(|s| training_refs(beta2(s)));
    let first_attacks = match (&sweep, &refs) {
        (Ok(s), Ok(r)) => attacks(beta2(s), r),
        (Err(m), _) | (_, Err(m)) => Err(m.clone()),
    };
    report(5, sweep.as_ref().map_err(Clone::clone).and_then(c5_beta_sweep), &mut failures);
    report(
        6,
        match (&sweep, &refs) {
            (Ok(s), Ok(r)) => c6_ood(beta2(s), r),
            (Err(m), _) | (_, Err(m)) => Err(m.clone()),
        },
        &mut failures,
    );
    report(7, c7_expected_confidence(), &mut failures);
    report(8, sweep.as_ref().map_err(Clone::clone).and_then(|s| c8_heatmaps(beta2(s))), &mut failures);
    report(9, first_attacks.as_ref().map_err(Clone::clone).and_then(c9_attacks), &mut failures);
    report(10, c10_calibration(), &mut failures);
    report(11, c11_receptive_field(), &mut failures);
    let rerun = || -> Outcome {
        let first = sweep.as_ref().map_err(Clone::clone)?;
        let first_attacks = first_attacks.as_ref().map_err(Clone::clone)?;
        let again = beta_sweep()?;
        ensure(again.csv == first.csv, "beta sweep CSV differs between runs".into())?;
        let refs = training_refs(beta2(&again))?;
        let again_attacks = attacks(beta2(&again), &refs)?;
        ensure(again_attacks.csv == first_attacks.csv, "attack CSV differs between runs".into())?;
        Ok(format!(
            "sweep CSV ({} bytes) and attack CSV ({} bytes) identical",
            first.csv.len(),
            first_attacks.csv.len()
        ))
    };
    report(12, rerun(), &mut failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
