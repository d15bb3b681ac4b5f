// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use implicit_attn::attention::{build_stack, equivalence_errors, ImplicitAttnStack};
use implicit_attn::explain::{aggregate_layer, explain, Classifier, Method, Readout};
use implicit_attn::harness::{
    ablate_stack, Direction, Metric, Protocol, Scorer, SeedRun, TaskRule, Variant, FRACTIONS,
};
use implicit_attn::io::{
    export_heatmap, format_float, load_bundle, save_bundle, write_csv, RunConfig, TensorBundle,
};
use implicit_attn::layers::{Model, ModelConfig};
use implicit_attn::numerics::{Matrix, Rng};
use implicit_attn::Error;

const DEFAULT_TOL: f64 = 1e-8;
const DEFAULT_SEEDS: usize = 20;
/// Stream of the model seed reserved for the probe input.
const INPUT_STREAM: u64 = u64::MAX;

#[derive(Parser)]
#[command(
    name = "implicit-attn",
    version,
    about = "Implicit attention of attention-free sequence mixers"
)]
struct Cli {
    /// JSON file with default options; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long)]
    arch: Option<implicit_attn::layers::Arch>,
    /// Sequence length L.
    #[arg(long)]
    len: Option<usize>,
    /// Model width D.
    #[arg(long)]
    dmodel: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    d_inner: Option<usize>,
    #[arg(long)]
    state_size: Option<usize>,
    #[arg(long)]
    conv_width: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
}

impl ModelFlags {
    fn run_config(&self) -> RunConfig {
        RunConfig {
            arch: self.arch,
            depth: self.depth,
            d_model: self.dmodel,
            d_inner: self.d_inner,
            state_size: self.state_size,
            conv_width: self.conv_width,
            heads: self.heads,
            head_dim: self.head_dim,
            seq_len: self.len,
            seed: self.seed,
            ..RunConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compare materialized operators with the recurrent forward pass.
    Equiv {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Write per-layer heatmaps and the raw operators.
    DumpAttn {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relevance map for an input read from a tensor bundle.
    Explain {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        target_class: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perturbation curves on the synthetic task.
    Perturb {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        direction: Option<Direction>,
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        task: Option<TaskRule>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Operators with some factors replaced by identities.
    Ablate {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn flags(&self) -> RunConfig {
        match self {
            Command::Equiv { model, tol } => RunConfig {
                tol: *tol,
                ..model.run_config()
            },
            Command::DumpAttn { model, out } => RunConfig {
                out: out.clone(),
                ..model.run_config()
            },
            Command::Explain {
                model,
                method,
                input,
                target_class,
                out,
            } => RunConfig {
                method: *method,
                input: input.clone(),
                target_class: *target_class,
                out: out.clone(),
                ..model.run_config()
            },
            Command::Perturb {
                model,
                method,
                direction,
                metric,
                task,
                seeds,
                out,
            } => RunConfig {
                method: *method,
                direction: *direction,
                metric: *metric,
                task: *task,
                seeds: *seeds,
                out: out.clone(),
                ..model.run_config()
            },
            Command::Ablate {
                model,
                variant,
                out,
            } => RunConfig {
                variant: *variant,
                out: out.clone(),
                ..model.run_config()
            },
        }
    }
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    CheckFailed,
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T, Error> {
    value.ok_or_else(|| Error::InvalidConfig(format!("missing --{flag}")))
}

/// Deterministic standard-normal input for a model configuration.
fn probe_input(cfg: &ModelConfig) -> Matrix {
    let mut rng = Rng::new(cfg.seed).split(INPUT_STREAM);
    Matrix::from_fn(cfg.seq_len, cfg.d_model, |_, _| rng.normal(1.0))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run_equiv(cfg: &RunConfig) -> Result<Outcome, Error> {
    let mc = cfg.model_config()?;
    let tol = cfg.tol.unwrap_or(DEFAULT_TOL);
    let errors = equivalence_errors(&Model::new(mc.clone())?, &probe_input(&mc))?;
    println!(
        "arch {} len {} dmodel {} seed {}",
        mc.arch, mc.seq_len, mc.d_model, mc.seed
    );
    for (l, e) in errors.iter().enumerate() {
        println!("layer {l} max_rel_err {}", format_float(*e));
    }
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let ok = errors.iter().all(|e| e.is_finite() && *e <= tol);
    println!(
        "max_rel_err {} tol {} {}",
        format_float(worst),
        format_float(tol),
        if ok { "ok" } else { "FAIL" }
    );
    Ok(if ok {
        Outcome::Ok
    } else {
        Outcome::CheckFailed
    })
}

/// Raw operator entries as `channel,row,col,value`.
fn write_layer_csv(path: &Path, h: &[Matrix]) -> Result<(), Error> {
    let mut rows = Vec::new();
    for (d, m) in h.iter().enumerate() {
        for i in 0..m.rows() {
            for j in 0..=i.min(m.cols().saturating_sub(1)) {
                rows.push(vec![d as f64, i as f64, j as f64, m[(i, j)]]);
            }
        }
    }
    write_csv(path, &["channel", "row", "col", "value"], &rows)
}

fn dump_stack(stack: &ImplicitAttnStack, dir: &Path, suffix: &str) -> Result<(), Error> {
    create_dir(dir)?;
    let mut bundle = TensorBundle::new();
    for (l, layer) in stack.layers.iter().enumerate() {
        let agg = aggregate_layer(layer)?;
        export_heatmap(&agg, dir.join(format!("layer{l}{suffix}.pgm")))?;
        write_layer_csv(&dir.join(format!("layer{l}{suffix}.csv")), &layer.h)?;
        bundle.insert_matrix(format!("layer{l}/mean"), &agg)?;
        for (d, h) in layer.h.iter().enumerate() {
            bundle.insert_matrix(format!("layer{l}/ch{d}"), h)?;
        }
    }
    save_bundle(&bundle, dir.join(format!("attn{suffix}.bundle")))
}

fn run_dump(cfg: &RunConfig) -> Result<Outcome, Error> {
    let mc = cfg.model_config()?;
    let out = required(cfg.out.clone(), "out")?;
    let stack = build_stack(&Model::new(mc.clone())?, &probe_input(&mc))?;
    dump_stack(&stack, &out, "")?;
    println!("wrote {} layers to {}", stack.depth(), out.display());
    Ok(Outcome::Ok)
}

/// The input tensor: `x` if present, otherwise the bundle's only tensor.
fn input_matrix(bundle: &TensorBundle) -> Result<Matrix, Error> {
    if bundle.get("x").is_some() {
        return bundle.matrix("x");
    }
    match bundle.tensors() {
        [only] => only.to_matrix(),
        _ => Err(Error::Bundle("expected a tensor named 'x'".into())),
    }
}

fn run_explain(cfg: &RunConfig) -> Result<Outcome, Error> {
    let method = required(cfg.method, "method")?;
    let class = required(cfg.target_class, "target-class")?;
    let out = required(cfg.out.clone(), "out")?;
    let x = input_matrix(&load_bundle(required(cfg.input.clone(), "input")?)?)?;
    let shaped = RunConfig {
        d_model: Some(x.cols()),
        seq_len: Some(x.rows()),
        ..cfg.clone()
    };
    let model = Model::new(shaped.model_config()?)?;
    let clf = Classifier {
        readout: Readout::identity(x.cols(), None),
        model,
    };
    let map = explain(&clf, &x, method, class)?;
    let rows: Vec<Vec<f64>> = map
        .scores
        .iter()
        .zip(&map.normalized)
        .enumerate()
        .map(|(t, (s, n))| vec![t as f64, *s, *n])
        .collect();
    write_csv(&out, &["position", "score", "normalized"], &rows)?;
    println!(
        "{} relevance for class {class} written to {}",
        method,
        out.display()
    );
    Ok(Outcome::Ok)
}

fn run_perturb(cfg: &RunConfig) -> Result<Outcome, Error> {
    let method = required(cfg.method, "method")?;
    let direction = cfg.direction.unwrap_or(Direction::Positive);
    let metric = cfg.metric.unwrap_or(Metric::Accuracy);
    let out = required(cfg.out.clone(), "out")?;
    let defaults = Protocol::default();
    let p = Protocol {
        arch: cfg.arch.unwrap_or(defaults.arch),
        depth: cfg.depth.unwrap_or(defaults.depth),
        d_model: cfg.d_model.unwrap_or(defaults.d_model),
        seq_len: cfg.seq_len.unwrap_or(defaults.seq_len),
        rule: cfg.task.unwrap_or(defaults.rule),
        ..defaults
    };
    let first = cfg.seed.unwrap_or(0);
    let seeds = cfg.seeds.unwrap_or(DEFAULT_SEEDS) as u64;
    let mut header = vec!["seed", "baseline_accuracy", "auc", "random_auc"];
    let names: Vec<String> = FRACTIONS.iter().map(|f| format!("f{f:.1}")).collect();
    header.extend(names.iter().map(String::as_str));
    let mut rows = Vec::new();
    for seed in first..first + seeds {
        let run = SeedRun::prepare(&p, seed)?;
        let curve = run.curve(&p, Scorer::Method(method), direction, metric)?;
        let random = run.curve(&p, Scorer::Random, direction, metric)?;
        println!(
            "seed {seed} baseline {:.4} auc {:.4} random {:.4}",
            run.baseline_accuracy, curve.auc, random.auc
        );
        let mut row = vec![seed as f64, run.baseline_accuracy, curve.auc, random.auc];
        row.extend(&curve.values);
        rows.push(row);
    }
    write_csv(&out, &header, &rows)?;
    Ok(Outcome::Ok)
}

fn run_ablate(cfg: &RunConfig) -> Result<Outcome, Error> {
    let mc = cfg.model_config()?;
    let variant = required(cfg.variant, "variant")?;
    let model = Model::new(mc.clone())?;
    let x = probe_input(&mc);
    let outcome = run_equiv(cfg)?;
    let full = build_stack(&model, &x)?;
    let ablated = ablate_stack(&full, variant)?;
    for (l, (a, f)) in ablated.layers.iter().zip(&full.layers).enumerate() {
        let (mut diff, mut norm) = (0.0, 0.0);
        for (ha, hf) in a.h.iter().zip(&f.h) {
            diff += ha.sub(hf)?.data().iter().map(|v| v * v).sum::<f64>();
            norm += hf.data().iter().map(|v| v * v).sum::<f64>();
        }
        let rel = if norm > 0.0 {
            (diff / norm).sqrt()
        } else {
            diff.sqrt()
        };
        println!(
            "layer {l} variant {variant} rel_change {}",
            format_float(rel)
        );
    }
    if let Some(dir) = &cfg.out {
        dump_stack(&ablated, dir, &format!("_{variant}"))?;
    }
    Ok(outcome)
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = file.merge(cli.command.flags());
    match cli.command {
        Command::Equiv { .. } => run_equiv(&cfg),
        Command::DumpAttn { .. } => run_dump(&cfg),
        Command::Explain { .. } => run_explain(&cfg),
        Command::Perturb { .. } => run_perturb(&cfg),
        Command::Ablate { .. } => run_ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) | Error::Autodiff(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
