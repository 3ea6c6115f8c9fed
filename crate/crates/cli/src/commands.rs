use std::fs;
use std::path::{Path, PathBuf};

use mhelab_core::accounting::{
    extra_over_sha, memory_usage, saving_ratio, scale_sweep, sublayer_params, Convention,
    LayerLayout, SweepPoint, Workload, SWEEP_CSV_HEADER,
};
use mhelab_core::checkpoint::{load_checkpoint, save_checkpoint};
use mhelab_core::gradcheck::{check_model, check_model_sampled, check_primitives, gradcheck_model, GroupResult, Tolerance};
use mhelab_core::metrics::{build_report, parse_scores, published_scores, MetricReport};
use mhelab_core::model::ModelConfig;
use mhelab_core::train::{BatchSource, CopyTask, Objective, StreamSource, TrainConfig, TrainReport};
use mhelab_core::{evaluate_perplexity, tokenizer, AttentionVariant, Model, ModelError, OpKind, Scalar};
use rayon::prelude::*;

use crate::output::{Cell, Format, Table};
use crate::{
    flatten, Cli, CliError, Command, EvalArgs, GradcheckArgs, MemoryArgs, MetricsArgs, ParamsArgs, Precision,
    SweepArgs, TrainArgs,
};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Params(a) => emit(cli, Format::Table, &params(a)?),
        Command::Memory(a) => emit(cli, Format::Table, &memory(a)?),
        Command::Sweep(a) => emit(cli, Format::Csv, &sweep(a)?),
        Command::Train(a) => emit(cli, Format::Table, &train(cli, a)?),
        Command::Eval(a) => emit(cli, Format::Table, &eval(cli, a)?),
        Command::Gradcheck(a) => {
            let (table, failed) = gradcheck(cli, a)?;
            emit(cli, Format::Table, &table)?;
            match failed {
                0 => Ok(()),
                n => Err(CliError::ChecksFailed(format!("{n} gradient group(s) outside tolerance"))),
            }
        }
        Command::Metrics(a) => {
            let (table, failed, total) = metrics(a)?;
            emit(cli, Format::Table, &table)?;
            match failed {
                0 => Ok(()),
                n => Err(CliError::ChecksFailed(format!("{n} of {total} cells outside tolerance"))),
            }
        }
    }
}

fn emit(cli: &Cli, default: Format, table: &Table) -> Result<(), CliError> {
    let text = table.render(cli.global.format.unwrap_or(default));
    match &cli.global.out {
        Some(path) => fs::write(path, text).map_err(|e| io_error(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::Config(m) => CliError::Usage(m),
        other => CliError::Runtime(other.to_string()),
    }
}

fn positive(name: &str, v: u64) -> Result<u64, CliError> {
    if v == 0 {
        Err(CliError::Usage(format!("--{name} must be positive")))
    } else {
        Ok(v)
    }
}

fn params(a: &ParamsArgs) -> Result<Table, CliError> {
    let (n, d) = (positive("heads", a.heads)?, positive("head-dim", a.head_dim)?);
    let layout = match a.decoder_layers {
        Some(dec) => LayerLayout::encoder_decoder(a.layers, dec, !a.no_cross_attention),
        None => LayerLayout::stack(a.layers),
    };
    let sublayers = layout.attention_sublayers();
    let convention = match a.convention {
        Convention::Table4 => "table4",
        Convention::Experiment => "experiment",
    };
    let mut t = Table::new(&[
        "variant",
        "convention",
        "heads",
        "head_dim",
        "per_sublayer",
        "extra_over_sha",
        "sublayers",
        "total",
    ]);
    for v in flatten(&a.variants) {
        let per = sublayer_params(v, n, d, a.convention);
        t.push(vec![
            Cell::text(v.tag()),
            Cell::text(convention),
            Cell::Count(n),
            Cell::Count(d),
            Cell::Count(per),
            Cell::Int(extra_over_sha(v, n, d)),
            Cell::Count(sublayers),
            Cell::Count(per * sublayers),
        ]);
    }
    Ok(t)
}

fn memory(a: &MemoryArgs) -> Result<Table, CliError> {
    let (n, d) = (positive("heads", a.heads)?, positive("head-dim", a.head_dim)?);
    let d_m = a.dm.unwrap_or(n * d);
    let mha = memory_usage(sublayer_params(AttentionVariant::Mha, n, d, Convention::Experiment), a.batch, a.seq, d_m);
    let rows: Vec<(String, u64)> = match a.params {
        Some(p) => vec![("custom".to_string(), p)],
        None => flatten(&a.variants)
            .into_iter()
            .map(|v| (v.tag().to_string(), sublayer_params(v, n, d, Convention::Experiment)))
            .collect(),
    };
    let mut t = Table::new(&[
        "variant",
        "params",
        "weights_bytes",
        "grad_bytes",
        "adam_bytes",
        "act_bytes",
        "total_bytes",
        "saving_pct",
    ]);
    for (name, p) in rows {
        let m = memory_usage(p, a.batch, a.seq, d_m);
        t.push(vec![
            Cell::Text(name),
            Cell::Count(p),
            Cell::Count(m.weights),
            Cell::Count(m.gradients),
            Cell::Count(m.adam_states),
            Cell::Count(m.activations),
            Cell::Count(m.total),
            Cell::Fixed(saving_ratio(m.total, mha.total), 2),
        ]);
    }
    Ok(t)
}

fn parse_list(s: &str, what: &str) -> Result<Vec<u64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| CliError::Usage(format!("{what}: {p:?} is not a positive integer")))
        })
        .collect()
}

fn sweep_points(a: &SweepArgs) -> Result<Vec<SweepPoint>, CliError> {
    if let Some(r) = &a.heads_range {
        let bad = || CliError::Usage(format!("--heads-range expects a:b[:step] with positive integers, got {r:?}"));
        let parts: Vec<u64> = r
            .split(':')
            .map(|p| p.trim().parse::<u64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let (lo, hi, step) = match parts[..] {
            [lo, hi] => (lo, hi, 1),
            [lo, hi, step] => (lo, hi, step),
            _ => return Err(bad()),
        };
        if lo == 0 || step == 0 {
            return Err(bad());
        }
        let layers = positive("layers", a.layers)?;
        return Ok((lo..=hi)
            .step_by(step as usize)
            .map(|heads| SweepPoint { layers, heads })
            .collect());
    }
    let grid = a.grid.as_deref().unwrap_or_default();
    let (ls, hs) = grid
        .split_once(['x', 'X'])
        .ok_or_else(|| CliError::Usage(format!("--grid expects LAYERS x HEADS such as 12,24x32,64, got {grid:?}")))?;
    let layers = parse_list(ls, "--grid layers")?;
    let heads = parse_list(hs, "--grid heads")?;
    Ok(layers
        .iter()
        .flat_map(|&l| heads.iter().map(move |&h| SweepPoint { layers: l, heads: h }))
        .collect())
}

fn sweep(a: &SweepArgs) -> Result<Table, CliError> {
    let d = positive("head-dim", a.head_dim)?;
    let points = sweep_points(a)?;
    let work = Workload { batch: a.batch, seq: a.seq };
    let mut t = Table::new(&SWEEP_CSV_HEADER.split(',').collect::<Vec<_>>());
    for r in scale_sweep(&flatten(&a.variants), &points, d, work) {
        t.push(vec![
            Cell::text(r.variant.tag()),
            Cell::Count(r.n_layers),
            Cell::Count(r.n_heads),
            Cell::Count(r.head_dim),
            Cell::Count(r.model_qkv),
            Cell::Count(r.model_total),
            Cell::Count(r.bytes.weights),
            Cell::Count(r.bytes.gradients),
            Cell::Count(r.bytes.adam_states),
            Cell::Count(r.bytes.activations),
            Cell::Count(r.bytes.total),
            Cell::Fixed(r.saving_ratio_vs_mha, 2),
        ]);
    }
    Ok(t)
}

enum Task {
    Copy { vocab: usize, prefix_len: usize },
    Bytes(PathBuf),
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    match s.split_once(':') {
        None if s == "copy" => Ok(Task::Copy { vocab: 0, prefix_len: 0 }),
        Some(("bytes", path)) if !path.is_empty() => Ok(Task::Bytes(PathBuf::from(path))),
        _ => Err(CliError::Usage(format!("--task expects copy or bytes:<file>, got {s:?}"))),
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<Table, CliError> {
    let objective = a
        .objective
        .unwrap_or(if a.arch.is_causal() { Objective::Clm } else { Objective::Mlm });
    let extra = usize::from(objective == Objective::Clm);
    let task = match parse_task(&a.task)? {
        Task::Copy { .. } => Task::Copy {
            vocab: a.vocab,
            prefix_len: a.prefix_len,
        },
        t => t,
    };
    let (mut source, vocab, max_seq): (Box<dyn BatchSource>, usize, usize) = match &task {
        Task::Copy { vocab, prefix_len } => {
            if *vocab < 3 || *prefix_len == 0 {
                return Err(CliError::Usage("copy task needs --vocab ≥ 3 and --prefix-len ≥ 1".into()));
            }
            (
                Box::new(CopyTask::new(*vocab, *prefix_len, cli.global.seed)),
                *vocab,
                2 * prefix_len - extra,
            )
        }
        Task::Bytes(path) => {
            let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
            let src = StreamSource::new(tokenizer::encode(&bytes), a.seq_len + extra).map_err(model_error)?;
            (Box::new(src), tokenizer::VOCAB_SIZE, a.seq_len)
        }
    };
    let mut cfg = ModelConfig::new(a.arch, a.variant, a.layers, a.heads, a.head_dim, vocab, max_seq, cli.global.seed);
    if let Some(f) = a.ffn_dim {
        cfg.ffn_dim = f;
    }
    cfg.dropout = a.dropout;
    cfg.validate().map_err(model_error)?;
    let tcfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        weight_decay: a.weight_decay,
        adam_beta1: a.beta1,
        adam_beta2: a.beta2,
        adam_eps: a.eps,
        warmup_steps: a.warmup,
        schedule: a.schedule,
        objective,
        mlm_mask_prob: a.mask_prob,
    };
    let checkpoint = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("mhelab-{}.ckpt", a.variant.tag())));
    let (report, params) = match cli.global.precision {
        Precision::Fp32 => train_as::<f32>(cfg, &mut *source, &tcfg, &checkpoint)?,
        Precision::Fp64 => train_as::<f64>(cfg, &mut *source, &tcfg, &checkpoint)?,
    };
    eprintln!("trained {} steps in {:.1}s", a.steps, report.wall_time);
    if let Some(path) = &a.curve {
        let mut curve = Table::new(&["step", "loss"]);
        for &(s, l) in &report.loss_curve {
            curve.push(vec![Cell::Count(s as u64), Cell::Real(l, 6)]);
        }
        fs::write(path, curve.render(Format::Csv)).map_err(|e| io_error(path, e))?;
    }
    let mut t = Table::new(&[
        "variant",
        "steps",
        "params",
        "tokens_seen",
        "initial_loss",
        "final_loss",
        "checkpoint",
    ]);
    t.push(vec![
        Cell::text(a.variant.tag()),
        Cell::Count(a.steps as u64),
        Cell::Count(params as u64),
        Cell::Count(report.tokens_seen),
        Cell::opt_real(report.initial_loss(), 4),
        Cell::opt_real(Some(report.final_loss).filter(|l| l.is_finite()), 4),
        Cell::text(checkpoint.display().to_string()),
    ]);
    Ok(t)
}

fn train_as<T: Scalar>(
    cfg: ModelConfig,
    source: &mut dyn BatchSource,
    tcfg: &TrainConfig,
    checkpoint: &Path,
) -> Result<(TrainReport, usize), CliError> {
    let mut model = Model::<T>::build(cfg).map_err(model_error)?;
    let report = mhelab_core::train(&mut model, source, tcfg).map_err(model_error)?;
    save_checkpoint(&model, checkpoint).map_err(model_error)?;
    Ok((report, model.param_count()))
}

fn read_tokens(path: &Path) -> Result<Vec<usize>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    text.split_whitespace()
        .map(|w| {
            w.parse::<usize>()
                .map_err(|_| CliError::Runtime(format!("{}: {w:?} is not a token id", path.display())))
        })
        .collect()
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<Table, CliError> {
    let model = load_checkpoint(&a.checkpoint).map_err(|e| CliError::Runtime(format!("{}: {e}", a.checkpoint.display())))?;
    let tokens = match (&a.text, &a.tokens) {
        (Some(p), _) => tokenizer::encode(&fs::read(p).map_err(|e| io_error(p, e))?),
        (None, Some(p)) => read_tokens(p)?,
        (None, None) => unreachable!("clap requires one input"),
    };
    let window = a.window.unwrap_or(model.config().max_seq_len);
    let run = |e: ModelError| match e {
        ModelError::Eval(m) => CliError::Usage(m),
        other => model_error(other),
    };
    let ppl = match cli.global.precision {
        Precision::Fp32 => evaluate_perplexity(&model, &tokens, a.stride, window).map_err(run)?,
        Precision::Fp64 => evaluate_perplexity(&model.cast::<f64>(), &tokens, a.stride, window).map_err(run)?,
    };
    let windows = mhelab_core::eval::plan_windows(tokens.len(), window.min(tokens.len() - 1), a.stride).len();
    let mut t = Table::new(&["variant", "tokens", "window", "stride", "windows", "perplexity"]);
    t.push(vec![
        Cell::text(model.config().variant.tag()),
        Cell::Count(tokens.len() as u64),
        Cell::Count(window as u64),
        Cell::Count(a.stride as u64),
        Cell::Count(windows as u64),
        Cell::Real(ppl, 4),
    ]);
    Ok(t)
}

fn parse_fault(name: &str) -> Result<OpKind, CliError> {
    OpKind::ALL
        .into_iter()
        .filter(|k| *k != OpKind::Leaf)
        .find(|k| k.name() == name.replace('-', "_"))
        .ok_or_else(|| CliError::Usage(format!("unknown op {name:?}")))
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<(Table, usize), CliError> {
    let tol = Tolerance {
        h: a.step,
        rtol: a.rtol,
        atol: a.atol,
    };
    let fault = a.inject_fault.as_deref().map(parse_fault).transpose()?;
    let seed = cli.global.seed;
    let mut groups: Vec<(String, GroupResult)> = check_primitives(seed, &tol, fault)
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .into_iter()
        .map(|g| ("primitive".to_string(), g))
        .collect();
    let per_variant: Vec<Vec<(String, GroupResult)>> = flatten(&a.variants)
        .par_iter()
        .map(|&v| {
            let model = gradcheck_model(v, a.arch, seed)?;
            let mut out: Vec<(String, GroupResult)> = check_model(&model, seed, &tol, fault)?
                .into_iter()
                .map(|g| (v.tag().to_string(), g))
                .collect();
            if a.sampled > 0 {
                let mut s = check_model_sampled(&model, a.sampled, seed ^ 1, &tol)?;
                s.group = "sampled".into();
                out.push((v.tag().to_string(), s));
            }
            Ok(out)
        })
        .collect::<Result<_, ModelError>>()
        .map_err(model_error)?;
    groups.extend(per_variant.into_iter().flatten());
    let mut t = Table::new(&["scope", "group", "checked", "failed", "max_abs_err", "passed"]);
    let mut failed = 0;
    for (scope, g) in groups {
        failed += usize::from(!g.passed);
        t.push(vec![
            Cell::Text(scope),
            Cell::Text(g.group),
            Cell::Count(g.checked as u64),
            Cell::Count(g.failed as u64),
            Cell::Sci(g.max_abs_err),
            Cell::Bool(g.passed),
        ]);
    }
    Ok((t, failed))
}

fn metric_row(r: &MetricReport, accept_rounding: bool) -> (Vec<Cell>, bool) {
    let prr_ok = match (r.prr_ok, accept_rounding) {
        (Some(ok), true) => Some(ok || r.prr_rounding_consistent == Some(true)),
        (ok, _) => ok,
    };
    let pass = prr_ok != Some(false) && r.peop_ok != Some(false);
    let flag = |b: Option<bool>| b.map_or(Cell::Empty, Cell::Bool);
    let published = |p: Option<mhelab_core::metrics::Published>| match p {
        Some(p) => Cell::Fixed(p.value, p.decimals as usize),
        None => Cell::Empty,
    };
    let row = vec![
        Cell::text(r.benchmark.as_str()),
        Cell::text(r.model_name.as_str()),
        Cell::Real(r.score, 2),
        Cell::Count(r.params),
        Cell::Real(r.prr, 2),
        published(r.published_prr),
        flag(prr_ok),
        Cell::opt_real(r.peop, 3),
        published(r.published_peop),
        flag(r.peop_ok),
    ];
    (row, pass)
}

fn metrics(a: &MetricsArgs) -> Result<(Table, usize, usize), CliError> {
    let rows = match &a.scores {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| io_error(p, e))?;
            parse_scores(f).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?
        }
        None => published_scores(),
    };
    let reports = build_report(&rows).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut t = Table::new(&[
        "benchmark",
        "model",
        "score",
        "params",
        "prr",
        "published_prr",
        "prr_ok",
        "peop",
        "published_peop",
        "peop_ok",
    ]);
    let mut failed = 0;
    for r in &reports {
        let (row, pass) = metric_row(r, a.accept_rounding);
        failed += usize::from(!pass);
        t.push(row);
    }
    Ok((t, failed, reports.len()))
}
