//! `fsdd`: dataset generation, training, sampling, evaluation and codec utilities.
//!
//! Settings resolve in three layers: built-in defaults, then the `--config` file, then
//! command-line flags (`--set key=value` and the dedicated flags, in that order).
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsdd::baselines::{generate_baseline_batch, BaselineKind};
use fsdd::checkpoint::{Checkpoint, EMA, PARAMS};
use fsdd::codec::{
    counts_to_set, parse_count_rows, read_count_file, read_count_rows_file, read_text, read_token_file,
    render_count_vectors, render_rows, render_token_sets, set_to_counts, write_atomic, CountVector, Header,
    TokenMultiset,
};
use fsdd::config::{Precision, RunConfig};
use fsdd::data::{sample_dataset, Example};
use fsdd::eval::EvalReport;
use fsdd::net::Denoiser;
use fsdd::sampler::{SampleConfig, SampleMeta};
use fsdd::trainer::{fit, fit_from, TrainState};
use fsdd::{Error, Result, Scalar};

#[derive(Parser, Debug)]
#[command(name = "fsdd", version, about = "Fixed-sum discrete diffusion over token multisets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset and write it as count vectors
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long = "C")]
        c: Option<usize>,
        #[arg(long = "M")]
        m: Option<u32>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the dataset as token sets
        #[arg(long)]
        tokens_out: Option<PathBuf>,
    },
    /// Train a denoiser and write its checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Count-vector or token-set file; drawn from the config's synthetic spec when absent
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// fsdd or discrete_no_fixed_sum
        #[arg(long)]
        kind: Option<String>,
        /// Continue from this checkpoint instead of a fresh initialization
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Checkpoint path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the reverse process from a checkpoint
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        class: Option<usize>,
        /// fsdd or discrete_no_fixed_sum
        #[arg(long)]
        kind: Option<String>,
        /// Use the live parameters instead of the EMA shadow
        #[arg(long)]
        live: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tokens_out: Option<PathBuf>,
    },
    /// Score samples against the synthetic ground truth
    Eval {
        #[arg(long)]
        samples: PathBuf,
        /// Config file holding the synthetic spec
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// CSV report path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that every token set survives set -> counts -> set unchanged
    Roundtrip {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print a checkpoint's configuration and tensors
    InspectCheckpoint {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v).map_err(|e| Error::InvalidArgument(format!("--set {o}: {e}")))?;
    }
    Ok(cfg)
}

fn flag<T: ToString>(cfg: &mut RunConfig, key: &str, flag: &str, value: Option<T>) -> Result<()> {
    if let Some(v) = value {
        cfg.set(key, &v.to_string())
            .map_err(|e| Error::InvalidArgument(format!("--{flag}: {e}")))?;
    }
    Ok(())
}

fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

fn render_labels(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

fn read_labels(path: &Path, expected: usize) -> Result<Option<Vec<usize>>> {
    if !path.exists() {
        return Ok(None);
    }
    let name = path.display().to_string();
    let labels = read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::parse(&name, i + 1, format!("invalid label `{}`", l.trim())))
        })
        .collect::<Result<Vec<usize>>>()?;
    if labels.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "{name}: {} labels for {expected} rows",
            labels.len()
        )));
    }
    Ok(Some(labels))
}

fn rows_to_token_sets(header: Header, rows: &[Vec<u32>]) -> Result<String> {
    let sets = rows
        .iter()
        .map(|r| {
            let tokens = r
                .iter()
                .enumerate()
                .flat_map(|(j, &k)| std::iter::repeat_n(j as u32, k as usize))
                .collect();
            TokenMultiset::new(header.codebook_size, tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(render_token_sets(header, &sets))
}

fn gen_data(
    common: Common,
    kind: Option<String>,
    c: Option<usize>,
    m: Option<u32>,
    n: Option<usize>,
    out: &Path,
    tokens_out: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref(), &common.overrides)?;
    flag(&mut cfg, "kind", "kind", kind)?;
    flag(&mut cfg, "C", "C", c)?;
    flag(&mut cfg, "M", "M", m)?;
    flag(&mut cfg, "n", "n", n)?;
    flag(&mut cfg, "data_seed", "seed", common.seed)?;
    let spec = cfg.synthetic_spec()?;
    let data = sample_dataset(&spec, cfg.n)?;
    let xs: Vec<CountVector> = data.iter().map(|e| e.x.clone()).collect();
    write_atomic(out, render_count_vectors(spec.header(), &xs).as_bytes())?;
    if spec.num_classes() > 0 {
        let labels: Vec<usize> = data.iter().map(|e| e.label.unwrap_or(0)).collect();
        write_atomic(&labels_path(out), render_labels(&labels).as_bytes())?;
    }
    if let Some(p) = tokens_out {
        let sets: Vec<TokenMultiset> = xs.iter().map(counts_to_set).collect();
        write_atomic(p, render_token_sets(spec.header(), &sets).as_bytes())?;
    }
    eprintln!("wrote {} examples to {}", data.len(), out.display());
    Ok(())
}

/// Loads a dataset file, accepting count vectors first and token sets second.
fn load_dataset(path: &Path) -> Result<(Header, Vec<Example>)> {
    let (header, xs) = match read_count_file(path) {
        Ok(v) => v,
        Err(count_err) if !count_err.is_io() => match read_token_file(path) {
            Ok((h, sets)) => (h, sets.iter().map(|(_, s)| set_to_counts(s)).collect()),
            Err(_) => return Err(count_err),
        },
        Err(e) => return Err(e),
    };
    let labels = read_labels(&labels_path(path), xs.len())?;
    let examples = xs
        .into_iter()
        .enumerate()
        .map(|(i, x)| Example {
            x,
            label: labels.as_ref().map(|l| l[i]),
        })
        .collect();
    Ok((header, examples))
}

fn train_with<S: Scalar>(cfg: &RunConfig, data: &[Example], resume: Option<&Path>) -> Result<f64> {
    let train = cfg.train_config()?;
    let state: TrainState<S> = match resume {
        Some(p) => fit_from(TrainState::from_checkpoint(&Checkpoint::load(p)?, train.ema_decay)?, data, &train)?,
        None => fit(data, cfg.denoiser_config()?, &train)?,
    };
    let ema = state.ema_model();
    let probe: Vec<_> = data.iter().take(train.batch_size).collect();
    let inputs: Vec<fsdd::net::DenoiserInput<'_>> = probe
        .iter()
        .map(|e| fsdd::net::DenoiserInput {
            counts: e.x.counts(),
            t: 0.5,
            class_label: e.label,
        })
        .collect();
    let targets: Vec<&CountVector> = probe.iter().map(|e| &e.x).collect();
    Ok(ema.loss(&inputs, &targets)?.to_f64_lossy())
}

fn train(
    common: Common,
    data_path: Option<PathBuf>,
    steps: Option<u64>,
    kind: Option<String>,
    resume: Option<PathBuf>,
    log: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref(), &common.overrides)?;
    flag(&mut cfg, "seed", "seed", common.seed)?;
    flag(&mut cfg, "steps", "steps", steps)?;
    flag(&mut cfg, "model_kind", "kind", kind)?;
    flag(&mut cfg, "log_path", "log", log.map(|p| p.display().to_string()))?;
    flag(&mut cfg, "checkpoint_path", "out", out.map(|p| p.display().to_string()))?;
    flag(&mut cfg, "data_path", "data", data_path.map(|p| p.display().to_string()))?;
    if cfg.checkpoint_path.is_none() {
        return Err(Error::InvalidArgument(
            "no checkpoint destination: pass --out or set checkpoint_path".into(),
        ));
    }
    let data = match &cfg.data_path {
        Some(p) => {
            let (header, data) = load_dataset(p)?;
            if header.codebook_size != cfg.codebook_size || header.total != cfg.total {
                return Err(Error::InvalidArgument(format!(
                    "{}: header C={} M={} disagrees with configured C={} M={}",
                    p.display(),
                    header.codebook_size,
                    header.total,
                    cfg.codebook_size,
                    cfg.total
                )));
            }
            data
        }
        None => sample_dataset(&cfg.synthetic_spec()?, cfg.n)?,
    };
    let loss = match cfg.precision {
        Precision::F64 => train_with::<f64>(&cfg, &data, resume.as_deref())?,
        Precision::F32 => train_with::<f32>(&cfg, &data, resume.as_deref())?,
    };
    eprintln!(
        "trained {} steps; EMA loss at t=0.5: {loss:.6}; checkpoint {}",
        cfg.steps,
        cfg.checkpoint_path.as_ref().unwrap().display()
    );
    Ok(())
}

fn sample_with<S: Scalar>(
    ck: &Checkpoint,
    live: bool,
    sc: &SampleConfig,
    kind: BaselineKind,
    n: usize,
) -> Result<(Vec<Vec<u32>>, Vec<Option<usize>>)> {
    let group = if live || !ck.has_group(EMA) { PARAMS } else { EMA };
    let model: Denoiser<S> = Denoiser::from_parts(ck.config.clone(), ck.group(group)?)?;
    let classes = model.config.num_classes;
    if classes > 0 && sc.class_label.is_none() {
        // Unlabeled requests on a conditional model cycle through the classes.
        let mut rows = vec![Vec::new(); n];
        let mut labels = vec![None; n];
        for k in 0..classes {
            let idx: Vec<usize> = (k..n).step_by(classes).collect();
            if idx.is_empty() {
                continue;
            }
            let cfg = SampleConfig {
                class_label: Some(k),
                seed: sc.seed.wrapping_add(k as u64),
                ..sc.clone()
            };
            for (i, r) in idx.iter().zip(generate_baseline_batch(&model, &cfg, kind, idx.len())?) {
                rows[*i] = r;
                labels[*i] = Some(k);
            }
        }
        return Ok((rows, labels));
    }
    Ok((generate_baseline_batch(&model, sc, kind, n)?, vec![sc.class_label; n]))
}

#[allow(clippy::too_many_arguments)]
fn sample(
    common: Common,
    ckpt: &Path,
    n: Option<usize>,
    steps: Option<usize>,
    top_p: Option<f64>,
    guidance: Option<f64>,
    schedule: Option<String>,
    class: Option<usize>,
    kind: Option<String>,
    live: bool,
    out: &Path,
    tokens_out: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref(), &common.overrides)?;
    flag(&mut cfg, "sample_seed", "seed", common.seed)?;
    flag(&mut cfg, "n_samples", "n", n)?;
    flag(&mut cfg, "sample_steps", "steps", steps)?;
    flag(&mut cfg, "top_p", "top-p", top_p)?;
    flag(&mut cfg, "guidance_scale", "guidance", guidance)?;
    flag(&mut cfg, "schedule", "schedule", schedule)?;
    flag(&mut cfg, "class_label", "class", class)?;
    flag(&mut cfg, "model_kind", "kind", kind)?;
    let sc = cfg.sample_config()?;
    let ck = Checkpoint::load(ckpt)?;
    let kind = cfg.model_kind;
    let (rows, labels) = match cfg.precision {
        Precision::F64 => sample_with::<f64>(&ck, live, &sc, kind, cfg.n_samples)?,
        Precision::F32 => sample_with::<f32>(&ck, live, &sc, kind, cfg.n_samples)?,
    };
    let header = Header {
        codebook_size: ck.config.codebook_size,
        total: ck.config.total,
    };
    write_atomic(out, render_rows(header, rows.iter().map(Vec::as_slice)).as_bytes())?;
    let mut meta = String::new();
    for (i, class) in labels.iter().enumerate() {
        let m = SampleMeta {
            index: i,
            seed: sc.seed,
            class: *class,
            steps: sc.num_steps,
            w: sc.guidance_scale,
            p: sc.top_p,
            schedule: sc.schedule,
            kind: kind.name(),
        };
        meta.push_str(&serde_json::to_string(&m).expect("metadata serializes"));
        meta.push('\n');
    }
    write_atomic(&meta_path(out), meta.as_bytes())?;
    if labels.iter().all(Option::is_some) && ck.config.num_classes > 0 {
        let l: Vec<usize> = labels.iter().map(|l| l.unwrap()).collect();
        write_atomic(&labels_path(out), render_labels(&l).as_bytes())?;
    }
    if let Some(p) = tokens_out {
        write_atomic(p, rows_to_token_sets(header, &rows)?.as_bytes())?;
    }
    eprintln!("wrote {} samples to {}", rows.len(), out.display());
    Ok(())
}

fn eval(samples: &Path, spec_path: &Path, overrides: &[String], out: Option<&Path>) -> Result<()> {
    let cfg = load_config(Some(spec_path), overrides)?;
    let spec = cfg.synthetic_spec()?;
    let (header, rows) = read_count_rows_file(samples)?;
    if header.codebook_size != spec.codebook_size || header.total != spec.total {
        return Err(Error::InvalidArgument(format!(
            "{}: header C={} M={} disagrees with spec C={} M={}",
            samples.display(),
            header.codebook_size,
            header.total,
            spec.codebook_size,
            spec.total
        )));
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: no samples", samples.display())));
    }
    let reference = spec.reference_pmf(None)?;
    let labels = if spec.num_classes() > 0 {
        read_labels(&labels_path(samples), rows.len())?
    } else {
        None
    };
    let class_ref = |k: usize| spec.reference_pmf(Some(k));
    let report = EvalReport::compute(
        &rows,
        spec.total,
        &reference,
        labels.as_deref().map(|l| (l, &class_ref as &dyn Fn(usize) -> Result<_>)),
    )?;
    print!("{}", report.to_text());
    if let Some(p) = out {
        let csv = format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row());
        write_atomic(p, csv.as_bytes())?;
    }
    Ok(())
}

fn roundtrip(input: &Path) -> Result<()> {
    let name = input.display().to_string();
    let (header, sets) = read_token_file(input)?;
    for (line, set) in &sets {
        let back = counts_to_set(&set_to_counts(set));
        if &back != set {
            return Err(Error::parse(&name, *line, "token set changed across the round trip"));
        }
    }
    // The parse itself only checks tokens; re-reading the counts confirms the header sum.
    let text: String = sets
        .iter()
        .map(|(_, s)| set_to_counts(s))
        .map(|x| x.counts().iter().map(u32::to_string).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    parse_count_rows(&format!("{}\n{text}", header.render()), &name)?;
    println!("{} sets round-tripped", sets.len());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let c = &ck.config;
    println!("step            {}", ck.step);
    println!("C               {}", c.codebook_size);
    println!("M               {}", c.total);
    println!("num_classes     {}", c.num_classes);
    println!("embed_dim       {}", c.embed_dim);
    println!("num_layers      {}", c.num_layers);
    println!("num_heads       {}", c.num_heads);
    println!("mlp_ratio       {}", c.mlp_ratio);
    println!("label_drop_prob {}", c.label_drop_prob);
    for (name, t) in &ck.tensors {
        let norm = t.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{name:<28} {:>5} x {:<5} |w| = {norm:.6}", t.rows, t.cols);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            kind,
            c,
            m,
            n,
            out,
            tokens_out,
        } => gen_data(common, kind, c, m, n, &out, tokens_out.as_deref()),
        Command::Train {
            common,
            data,
            steps,
            kind,
            resume,
            log,
            out,
        } => train(common, data, steps, kind, resume, log, out),
        Command::Sample {
            common,
            ckpt,
            n,
            steps,
            top_p,
            guidance,
            schedule,
            class,
            kind,
            live,
            out,
            tokens_out,
        } => sample(
            common,
            &ckpt,
            n,
            steps,
            top_p,
            guidance,
            schedule,
            class,
            kind,
            live,
            &out,
            tokens_out.as_deref(),
        ),
        Command::Eval {
            samples,
            spec,
            overrides,
            out,
        } => eval(&samples, &spec, &overrides, out.as_deref()),
        Command::Roundtrip { input } => roundtrip(&input),
        Command::InspectCheckpoint { ckpt } => inspect(&ckpt),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
