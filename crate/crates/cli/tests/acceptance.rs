//! Release gate: runs every acceptance criterion in order and prints one line per criterion.
//!
//! Criteria 6, 7 and 9 drive the `fsdd` binary end to end; the rest call the library directly.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fsdd::checkpoint::{Checkpoint, EMA, PARAMS};
use fsdd::codec::{counts_to_set, set_to_counts, TokenMultiset};
use fsdd::data::{sample_dataset, SyntheticSpec};
use fsdd::eval::{count_vector_space_size, enumerate_count_vectors};
use fsdd::forward::{greedy_adjust, sample_forward, sample_forward_raw};
use fsdd::kernels::{discretized_gaussian_pmf, sample_multinomial_noise};
use fsdd::net::{Denoiser, DenoiserConfig, DenoiserInput};
use fsdd::sampler::{run_chains, SampleConfig};
use fsdd::trainer::{fit, TrainConfig};
use fsdd::{CountVector, GaussianParams, RngStream};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    if elapsed > Duration::from_secs(limit_s) {
        Err(format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
    } else {
        Ok(())
    }
}

fn bijection() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(1, 0);
    let grid: Vec<(usize, usize)> = [2usize, 8, 64, 4096]
        .iter()
        .flat_map(|&c| [0usize, 1, 32, 128].map(|m| (c, m)))
        .collect();
    let mut failures = 0;
    for i in 0..10_000 {
        let (c, m) = grid[i % grid.len()];
        let tokens: Vec<u32> = (0..m).map(|_| rng.random_range(0..c as u32)).collect();
        let set = TokenMultiset::new(c, tokens).unwrap();
        let x = set_to_counts(&set);
        if counts_to_set(&x) != set || set_to_counts(&counts_to_set(&x)) != x || x.total() as usize != m {
            failures += 1;
        }
    }
    within(start.elapsed(), 30)?;
    check(
        failures == 0,
        format!("10000 round trips, {failures} failures, {:.2}s", start.elapsed().as_secs_f64()),
    )
}

fn sum_conservation() -> Outcome {
    let start = Instant::now();
    let (c, m) = (16, 32u32);
    let mut rng = RngStream::new(2, 0);
    let mut bad = 0usize;
    for _ in 0..100_000 {
        let x0 = sample_multinomial_noise(c, m, &mut rng).unwrap();
        let x1 = sample_multinomial_noise(c, m, &mut rng).unwrap();
        let t = rng.random_range(0.0..=1.0);
        let s = sample_forward(&x0, &x1, t, &mut rng).unwrap();
        if s.x_t.counts().iter().sum::<u32>() != m {
            bad += 1;
        }
    }
    let model = Denoiser::<f64>::init(DenoiserConfig::new(c, m), 2).unwrap();
    let sc = SampleConfig {
        num_steps: 25,
        seed: 2,
        ..SampleConfig::default()
    };
    let mut states = 0usize;
    for block in 0..10 {
        for ch in run_chains(&model, &sc, block * 100, 100, true).unwrap() {
            assert_eq!(ch.states.len(), 25);
            for s in &ch.states {
                states += 1;
                if s.iter().sum::<u32>() != m {
                    bad += 1;
                }
            }
        }
    }
    within(start.elapsed(), 300)?;
    check(
        bad == 0,
        format!(
            "100000 forward samples + 1000 trajectories ({states} states), {bad} off the simplex, {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn likelihood(x: &[u32], p: &GaussianParams, m: u32) -> f64 {
    x.iter()
        .enumerate()
        .map(|(j, &v)| discretized_gaussian_pmf(p.mu[j], p.sigma[j], v, m).unwrap())
        .product()
}

/// Exhaustive maximum over every sequence of repair rounds.
fn oracle(x: &[u32], p: &GaussianParams, m: u32) -> f64 {
    let delta = x.iter().map(|&v| v as i64).sum::<i64>() - m as i64;
    if delta == 0 {
        return likelihood(x, p, m);
    }
    let dec = delta > 0;
    let eligible: Vec<usize> = (0..x.len()).filter(|&j| if dec { x[j] > 0 } else { x[j] < m }).collect();
    let k = (delta.unsigned_abs() as usize).min(eligible.len());
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << eligible.len()) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let mut y = x.to_vec();
        for (b, &j) in eligible.iter().enumerate() {
            if mask >> b & 1 == 1 {
                y[j] = if dec { y[j] - 1 } else { y[j] + 1 };
            }
        }
        best = best.max(oracle(&y, p, m));
    }
    best
}

fn greedy_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(3, 0);
    let mut failures = 0;
    for _ in 0..1000 {
        let c = rng.random_range(1..=6usize);
        let m = rng.random_range(1..=10u32);
        let mut x = sample_multinomial_noise(c, m, &mut rng).unwrap().into_counts();
        let delta = rng.random_range(-3i32..=3);
        for _ in 0..delta.unsigned_abs() {
            let j = rng.random_range(0..c);
            if delta > 0 && x[j] < m {
                x[j] += 1;
            } else if delta < 0 && x[j] > 0 {
                x[j] -= 1;
            }
        }
        let mu = (0..c).map(|_| rng.random_range(-0.5..m as f64 + 0.5)).collect();
        let sigma = (0..c)
            .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.2..3.0) })
            .collect();
        let p = GaussianParams::new(mu, sigma).unwrap();
        let got = greedy_adjust(&x, &p, m).unwrap();
        let ours = likelihood(got.counts(), &p, m);
        if got.counts().iter().sum::<u32>() != m || ours < oracle(&x, &p, m) * (1.0 - 1e-9) {
            failures += 1;
        }
    }
    within(start.elapsed(), 60)?;
    check(
        failures == 0,
        format!("1000 instances, {failures} below the exhaustive maximum, {:.2}s", start.elapsed().as_secs_f64()),
    )
}

fn expectation() -> Outcome {
    let (c, m) = (4, 64u32);
    let mut parts = Vec::new();
    let mut ok = true;
    for (k, &t) in [0.1, 0.5, 0.9].iter().enumerate() {
        let mut rng = RngStream::new(4, k as u64);
        let n = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x0 = sample_multinomial_noise(c, m, &mut rng).unwrap();
            let x1 = sample_multinomial_noise(c, m, &mut rng).unwrap();
            let s = sample_forward_raw(&x0, &x1, t, &mut rng).unwrap().1.iter().sum::<u32>() as f64;
            s1 += s;
            s2 += s * s;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let z = (mean - m as f64) / se;
        ok &= z.abs() < 3.0;
        parts.push(format!("t={t}: z={z:+.2}"));
    }
    check(ok, format!("C=4 M=64, 100000 draws per t; {}", parts.join(", ")))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cfg = DenoiserConfig {
        num_classes: 2,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        ..DenoiserConfig::new(4, 3)
    };
    let mut model = Denoiser::<f64>::init(cfg, 5).unwrap();
    let mut rng = RngStream::new(5, 1);
    for t in model.params.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    let cv = |v: &[u32]| CountVector::new(v.to_vec(), 3).unwrap();
    let xs = [cv(&[3, 0, 0, 0]), cv(&[1, 1, 0, 1]), cv(&[0, 2, 1, 0])];
    let x0 = [cv(&[0, 1, 1, 1]), cv(&[2, 0, 1, 0]), cv(&[0, 0, 0, 3])];
    let ts = [0.83, 0.27, 0.5];
    let labels = [Some(1), None, Some(0)];
    let batch: Vec<DenoiserInput<'_>> = (0..3)
        .map(|i| DenoiserInput {
            counts: xs[i].counts(),
            t: ts[i],
            class_label: labels[i],
        })
        .collect();
    let targets: Vec<&CountVector> = x0.iter().collect();
    let (_, grads) = model.loss_and_grad(&batch, &targets).unwrap();
    let h = 1e-4;
    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    for (slot, name) in model.params.names().iter().enumerate() {
        let analytic = &grads.tensors()[slot].data;
        let mut diff = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = model.params.tensors()[slot].data[k];
            probe.params.tensors_mut()[slot].data[k] = orig + h;
            let up = probe.loss(&batch, &targets).unwrap();
            probe.params.tensors_mut()[slot].data[k] = orig - h;
            let down = probe.loss(&batch, &targets).unwrap();
            probe.params.tensors_mut()[slot].data[k] = orig;
            let fd = (up - down) / (2.0 * h);
            diff += (a - fd) * (a - fd);
            na += a * a;
            nn += fd * fd;
        }
        let rel = diff.sqrt() / (na.sqrt() + nn.sqrt()).max(f64::MIN_POSITIVE);
        if rel >= worst.0 {
            worst = (rel, name.clone());
        }
    }
    within(start.elapsed(), 60)?;
    check(
        worst.0 < 1e-4,
        format!(
            "{} tensors, worst relative error {:.2e} ({}), {:.2}s",
            model.params.names().len(),
            worst.0,
            worst.1,
            start.elapsed().as_secs_f64()
        ),
    )
}

struct Cli {
    bin: &'static str,
    dir: PathBuf,
}

impl Cli {
    fn run(&self, args: &[&str]) -> Result<String, String> {
        let out = Command::new(self.bin)
            .args(args)
            .current_dir(&self.dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("`fsdd {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }
}

/// `(tv_distance, sum_violation_rate, support_hit_rate)` from an eval CSV.
fn report(cli: &Cli, name: &str) -> (f64, f64, f64) {
    let text = String::from_utf8(cli.read(name)).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let col = |k: &str| row[header.iter().position(|h| *h == k).unwrap()];
    (col("tv_distance"), col("sum_violation_rate"), col("support_hit_rate"))
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg")
}

/// Trains, samples and scores one arm on the toy task; returns the eval CSV name.
fn toy_arm(cli: &Cli, kind: &str) -> Result<(String, Duration), String> {
    let cfg = toy_config().display().to_string();
    let start = Instant::now();
    let ckpt = format!("{kind}.ckpt");
    let samples = format!("{kind}.txt");
    let csv = format!("{kind}.csv");
    let log = format!("{kind}.log");
    cli.run(&["train", "--config", &cfg, "--kind", kind, "--out", &ckpt, "--log", &log])?;
    cli.run(&["sample", "--config", &cfg, "--ckpt", &ckpt, "--kind", kind, "--n", "1000", "--steps", "25", "--out", &samples])?;
    cli.run(&["eval", "--samples", &samples, "--spec", &cfg, "--out", &csv])?;
    Ok((csv, start.elapsed()))
}

fn end_to_end(cli: &Cli) -> Outcome {
    let (csv, elapsed) = toy_arm(cli, "fsdd")?;
    let (tv, _, hits) = report(cli, &csv);
    within(elapsed, 600)?;
    check(
        tv < 0.10 && hits >= 0.95,
        format!(
            "5000 steps, EMA, 1000 samples: tv {tv:.4} (< 0.10), anchor hits {hits:.3} (>= 0.95), {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation(cli: &Cli) -> Outcome {
    let (fsdd_tv, fsdd_viol, _) = report(cli, "fsdd.csv");
    let (csv, elapsed) = toy_arm(cli, "discrete_no_fixed_sum")?;
    let (base_tv, base_viol, _) = report(cli, &csv);
    check(
        base_viol > 0.0 && base_tv >= fsdd_tv && fsdd_viol == 0.0,
        format!(
            "baseline tv {base_tv:.4} / violations {base_viol:.3}; fsdd tv {fsdd_tv:.4} / violations {fsdd_viol}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn enumeration() -> Outcome {
    let mut wrong = Vec::new();
    for c in 1..=6usize {
        for m in 0..=6u32 {
            let n = enumerate_count_vectors(c, m).unwrap().len() as u128;
            let want = (0..c as u128 - 1).fold(1u128, |acc, i| acc * (m as u128 + c as u128 - 1 - i) / (i + 1));
            if n != want || count_vector_space_size(c, m) != Some(want) {
                wrong.push(format!("C={c} M={m}: {n} vs {want}"));
            }
        }
    }
    check(wrong.is_empty(), format!("36 (C, M) pairs; mismatches: {}", wrong.len()))
}

const DET_CFG: &str = "kind = two_point\nC = 8\nM = 16\nn = 512\nseed = 11\n\
embed_dim = 32\nnum_layers = 2\nnum_heads = 4\nmlp_ratio = 2\n\
steps = 60\nbatch_size = 32\neval_every = 20\nsample_steps = 10\nn_samples = 200\n";

fn determinism(bin: &'static str, root: &Path) -> Outcome {
    let mut artifacts = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        std::fs::write(dir.join("det.cfg"), DET_CFG).map_err(|e| e.to_string())?;
        let cli = Cli { bin, dir };
        cli.run(&["gen-data", "--config", "det.cfg", "--out", "data.txt", "--tokens-out", "data.tok"])?;
        cli.run(&["train", "--config", "det.cfg", "--data", "data.txt", "--out", "m.ckpt", "--log", "log.csv"])?;
        cli.run(&["sample", "--config", "det.cfg", "--ckpt", "m.ckpt", "--out", "s.txt", "--tokens-out", "s.tok"])?;
        let stdout = cli.run(&["eval", "--samples", "s.txt", "--spec", "det.cfg", "--out", "r.csv"])?;
        let mut files: Vec<(String, Vec<u8>)> = ["data.txt", "data.tok", "m.ckpt", "s.txt", "s.tok", "s.txt.meta.jsonl", "r.csv"]
            .iter()
            .map(|f| (f.to_string(), cli.read(f)))
            .collect();
        // wall_ms is the one column that measures the machine rather than the run.
        let log: String = String::from_utf8(cli.read("log.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
            .collect();
        files.push(("log.csv (minus wall_ms)".into(), log.into_bytes()));
        files.push(("eval stdout".into(), stdout.into_bytes()));
        artifacts.push(files);
    }
    let differing: Vec<&str> = artifacts[0]
        .iter()
        .zip(&artifacts[1])
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    check(
        differing.is_empty(),
        format!("{} artifacts compared; differing: {differing:?}", artifacts[0].len()),
    )
}

fn checkpoint_integrity(root: &Path) -> Outcome {
    let cfg = DenoiserConfig {
        embed_dim: 16,
        num_layers: 2,
        num_heads: 4,
        mlp_ratio: 2,
        ..DenoiserConfig::new(6, 9)
    };
    let data = sample_dataset(&SyntheticSpec::two_point(6, 9, 1), 64).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        steps: 10,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let state = fit::<f64>(&data, cfg, &tc).map_err(|e| e.to_string())?;
    let a = root.join("a.ckpt");
    let b = root.join("b.ckpt");
    state.to_checkpoint().save(&a).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&a).map_err(|e| e.to_string())?;
    loaded.save(&b).map_err(|e| e.to_string())?;
    let same_bytes = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let probe = CountVector::new(vec![0, 3, 1, 0, 5, 0], 9).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut same_logits = true;
    for (group, original) in [(PARAMS, state.model.clone()), (EMA, state.ema_model())] {
        let model = Denoiser::<f64>::from_parts(loaded.config.clone(), loaded.group(group).unwrap()).unwrap();
        let x = original.forward(&probe, 0.37, None).unwrap();
        let y = model.forward(&probe, 0.37, None).unwrap();
        same_logits &= bits(&x.grid) == bits(&y.grid);
    }
    check(
        same_bytes && same_logits,
        format!("bytes identical: {same_bytes}; probe logits bit-exact (params and EMA): {same_logits}"),
    )
}

fn main() {
    let bin = env!("CARGO_BIN_EXE_fsdd");
    let scratch = tempfile::tempdir().expect("scratch dir");
    let toy = Cli {
        bin,
        dir: scratch.path().join("toy"),
    };
    std::fs::create_dir_all(&toy.dir).unwrap();
    let det_root = scratch.path().join("det");
    let ck_root = scratch.path().join("ckpt");
    std::fs::create_dir_all(&ck_root).unwrap();

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("bijection", Box::new(bijection)),
        ("sum conservation", Box::new(sum_conservation)),
        ("greedy oracle", Box::new(greedy_oracle)),
        ("expectation", Box::new(expectation)),
        ("gradients", Box::new(gradients)),
        ("end-to-end learning", Box::new(|| end_to_end(&toy))),
        ("ablation direction", Box::new(|| ablation(&toy))),
        ("enumeration", Box::new(enumeration)),
        ("determinism", Box::new(|| determinism(bin, &det_root))),
        ("checkpoint integrity", Box::new(|| checkpoint_integrity(&ck_root))),
    ];

    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
