//! `streamattn` command-line front end.

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use streamattn::analysis::{
    attention_map, gamma_transform, normalize_columns, sink_strip, target_to_source, to_csv,
    to_svg, DEFAULT_GAMMA,
};
use streamattn::bench::{run_bench, tiny_bench_config, write_report_csv, BenchSpec};
use streamattn::corpus::{
    generate, generate_split, load_jsonl, write_jsonl, ParallelPair, TaskKind, FIRST_CONTENT,
};
use streamattn::metrics::{corpus_accuracy, corpus_bleu, corpus_lagging};
use streamattn::model::{
    checkpoint_precision, example_arrangement, load_checkpoint, save_checkpoint, train, Model,
    TrainMeta,
};
use streamattn::paradigm::{
    arrange, mask_report, waitk_schedule, ParadigmId, PositionRemoval, Role, TokenId, WaitkSchedule,
};
use streamattn::rope::PositionId;
use streamattn::scalar::{Precision, Scalar};
use streamattn::stream::{decode, DecodeOptions, DecodeTrace, FinishReason, ReencodeTrigger};

use crate::config::{load_config, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "streamattn",
    version,
    about = "Streaming attention experiments with group position encoding"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Output directory.
    #[arg(long, global = true, env = "STREAMATTN_OUT")]
    out: Option<PathBuf>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic parallel corpus as train.jsonl and eval.jsonl.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint.bin and loss.csv.
    Train(TrainArgs),
    /// Stream-decode the sources of a JSONL corpus.
    Decode(DecodeArgs),
    /// Score decode output against references.
    Eval(EvalArgs),
    /// Print the attention mask, positions and loss mask of a layout.
    Masks(MasksArgs),
    /// Export one attention head as CSV or SVG.
    Attn(AttnArgs),
    /// Time and count operations of the decoding paradigms.
    Bench(BenchArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Decode(_) => "decode",
            Command::Eval(_) => "eval",
            Command::Masks(_) => "masks",
            Command::Attn(_) => "attn",
            Command::Bench(_) => "bench",
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// copy or mapped-translation.
    #[arg(long, value_parser = by_name::<TaskKind>)]
    task: Option<TaskKind>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    eval: Option<usize>,
}

/// Layout flags shared by the commands that build or decode sequences.
#[derive(Args, Debug, Clone)]
struct LayoutArgs {
    #[arg(long)]
    paradigm: Option<ParadigmId>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    removal: Option<PositionRemoval>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Train on this JSONL corpus instead of generated pairs.
    #[arg(long)]
    train_data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL corpus whose sources are decoded.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to decode.jsonl in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    layout: LayoutArgs,
    /// on-read or on-write; applies to batch-all-re only.
    #[arg(long, value_parser = by_name::<ReencodeTrigger>)]
    reencode: Option<ReencodeTrigger>,
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Decode output JSONL.
    #[arg(long)]
    hyp: PathBuf,
    /// Reference corpus JSONL.
    #[arg(long)]
    reference: PathBuf,
    /// Defaults to metrics.json in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MasksArgs {
    #[command(flatten)]
    layout: LayoutArgs,
    #[arg(long)]
    src_len: usize,
    #[arg(long)]
    tgt_len: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum View {
    /// Every query against every key, in storage order.
    Full,
    /// Target queries against source keys.
    TargetSource,
}

#[derive(Args, Debug)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source token ids separated by spaces or commas.
    #[arg(long)]
    input: String,
    /// Target token ids; decoded greedily when omitted.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    head: usize,
    /// Min-max normalise each key column, then apply the gamma transform.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Drop key column 0 before normalising.
    #[arg(long)]
    strip_sink: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long, value_enum, default_value = "full")]
    view: View,
    #[command(flatten)]
    layout: LayoutArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "group,batch-no-re,batch-pos-re,batch-all-re"
    )]
    paradigms: Vec<ParadigmId>,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Time this checkpoint instead of a freshly initialised tiny model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// Parses a flag value through the type's serialized name.
fn by_name<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Everything a command needs besides its own flags.
struct Session {
    cfg: RunConfig,
    precision: Precision,
    out: PathBuf,
}

impl Session {
    fn out_file(&self, name: &str) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }
}

fn apply_layout(cfg: &mut RunConfig, layout: &LayoutArgs) {
    if let Some(p) = layout.paradigm {
        cfg.paradigm = p;
    }
    if let Some(k) = layout.k {
        cfg.k = k;
    }
    if let Some(phi) = layout.phi {
        cfg.phi = phi;
    }
    if let Some(r) = layout.removal {
        cfg.removal = r;
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
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.model.precision = p;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("streamattn-out"));
    let mut ctx = Session {
        precision: cfg.model.precision,
        cfg,
        out,
    };
    match cli.command {
        Command::GenData(a) => gen_data(&mut ctx, cli.seed, &a),
        Command::Train(a) => {
            apply_layout(&mut ctx.cfg, &a.layout);
            match ctx.precision {
                Precision::Fp32 => train_cmd::<f32>(&mut ctx, &a),
                Precision::Fp64 => train_cmd::<f64>(&mut ctx, &a),
            }
        }
        Command::Decode(a) => match cli
            .precision
            .map_or_else(|| checkpoint_precision(&a.checkpoint), Ok)?
        {
            Precision::Fp32 => decode_cmd::<f32>(&ctx, &a),
            Precision::Fp64 => decode_cmd::<f64>(&ctx, &a),
        },
        Command::Eval(a) => eval_cmd(&ctx, &a),
        Command::Masks(a) => {
            apply_layout(&mut ctx.cfg, &a.layout);
            masks_cmd(&ctx, &a)
        }
        Command::Attn(a) => match cli
            .precision
            .map_or_else(|| checkpoint_precision(&a.checkpoint), Ok)?
        {
            Precision::Fp32 => attn_cmd::<f32>(&ctx, &a),
            Precision::Fp64 => attn_cmd::<f64>(&ctx, &a),
        },
        Command::Bench(a) => match cli.precision.unwrap_or(Precision::Fp32) {
            Precision::Fp32 => bench_cmd::<f32>(&ctx, &a),
            Precision::Fp64 => bench_cmd::<f64>(&ctx, &a),
        },
    }
}

fn gen_data(ctx: &mut Session, seed: Option<u64>, a: &GenDataArgs) -> anyhow::Result<()> {
    let c = &mut ctx.cfg.corpus;
    if let Some(t) = a.task {
        c.task = t;
    }
    if let Some(v) = a.vocab {
        c.vocab_size = v;
    }
    if let Some(v) = a.len_min {
        c.len_min = v;
    }
    if let Some(v) = a.len_max {
        c.len_max = v;
    }
    if let Some(v) = a.train {
        c.train_pairs = v;
    }
    if let Some(v) = a.eval {
        c.eval_pairs = v;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    let (train_set, eval_set) = generate_split(&c.spec(), c.train_pairs, c.eval_pairs)?;
    let train_path = ctx.out_file("train.jsonl")?;
    let eval_path = ctx.out_file("eval.jsonl")?;
    write_jsonl(&train_path, &train_set)?;
    write_jsonl(&eval_path, &eval_set)?;
    println!(
        "wrote {} pairs to {} and {} to {}",
        train_set.len(),
        train_path.display(),
        eval_set.len(),
        eval_path.display()
    );
    Ok(())
}

fn train_cmd<T: Scalar>(ctx: &mut Session, a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = &mut ctx.cfg;
    if let Some(v) = a.steps {
        cfg.optim.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.optim.batch = v;
    }
    if let Some(p) = &a.train_data {
        cfg.corpus.train_path = Some(p.clone());
    }
    let corpus = match &cfg.corpus.train_path {
        Some(path) => load_jsonl(path, cfg.model.vocab_size)?,
        None => {
            if cfg.corpus.vocab_size > cfg.model.vocab_size {
                bail!(
                    "corpus vocabulary {} exceeds the model vocabulary {}",
                    cfg.corpus.vocab_size,
                    cfg.model.vocab_size
                );
            }
            generate(&cfg.corpus.spec(), cfg.corpus.train_pairs)?
        }
    };
    let tc = cfg.train_config()?;
    let result = train::<T>(cfg.model, &tc, &corpus)?;
    let meta = TrainMeta {
        paradigm: tc.paradigm,
        k: tc.k,
        phi: tc.phi.value(),
        removal: tc.removal,
        steps: tc.steps,
    };
    let ckpt = ctx.out_file("checkpoint.bin")?;
    save_checkpoint(&ckpt, &result.model, tc.seed, Some(&meta))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in result.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let loss_path = ctx.out_file("loss.csv")?;
    fs::write(&loss_path, csv).with_context(|| format!("writing {}", loss_path.display()))?;
    println!(
        "trained {} k={} for {} steps, final loss {:.4}; wrote {} and {}",
        tc.paradigm,
        tc.k,
        tc.steps,
        result.losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display(),
        loss_path.display()
    );
    Ok(())
}

/// Layout settings: flags, then the checkpoint's training metadata, then the
/// run configuration.
fn decode_options(
    ctx: &Session,
    meta: Option<&TrainMeta>,
    layout: &LayoutArgs,
) -> anyhow::Result<DecodeOptions> {
    let cfg = &ctx.cfg;
    let paradigm = layout
        .paradigm
        .or(meta.map(|m| m.paradigm))
        .unwrap_or(cfg.paradigm);
    let k = layout.k.or(meta.map(|m| m.k)).unwrap_or(cfg.k);
    let phi = layout.phi.or(meta.map(|m| m.phi)).unwrap_or(cfg.phi);
    let removal = layout
        .removal
        .or(meta.map(|m| m.removal))
        .unwrap_or(cfg.removal);
    let phi = PositionId::new(phi).with_context(|| format!("invalid phi {phi}"))?;
    let mut opts = DecodeOptions::new(paradigm, k)
        .with_phi(phi)
        .with_removal(removal);
    opts.reencode = cfg.reencode;
    Ok(opts)
}

#[derive(Serialize, Deserialize)]
struct DecodeRecord {
    source: Vec<TokenId>,
    tokens: Vec<TokenId>,
    g: Vec<usize>,
    step_seconds: Vec<f64>,
    finish: FinishReason,
}

fn decode_cmd<T: Scalar>(ctx: &Session, a: &DecodeArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint::<T>(&a.checkpoint)?;
    let mut opts = decode_options(ctx, ckpt.train.as_ref(), &a.layout)?;
    if let Some(r) = a.reencode {
        opts.reencode = r;
    }
    opts.max_tokens = a.max_tokens;
    let pairs = load_jsonl(&a.input, ckpt.model.config.vocab_size)?;
    let path = match &a.output {
        Some(p) => p.clone(),
        None => ctx.out_file("decode.jsonl")?,
    };
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for pair in &pairs {
        let DecodeTrace {
            tokens,
            g,
            step_seconds,
            finish,
            ..
        } = decode(&ckpt.model, &opts, &pair.source)?;
        let record = DecodeRecord {
            source: pair.source.clone(),
            tokens,
            g,
            step_seconds,
            finish,
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "decoded {} sentences with {} k={}; wrote {}",
        pairs.len(),
        opts.paradigm,
        opts.k,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    bleu: f64,
    accuracy: f64,
    al: Option<f64>,
    laal: Option<f64>,
}

fn eval_cmd(ctx: &Session, a: &EvalArgs) -> anyhow::Result<()> {
    let text =
        fs::read_to_string(&a.hyp).with_context(|| format!("reading {}", a.hyp.display()))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<DecodeRecord>(l)
                .with_context(|| format!("{}:{}", a.hyp.display(), i + 1))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let refs = load_jsonl(&a.reference, ctx.cfg.model.vocab_size)?;
    if records.len() != refs.len() {
        bail!("{} hypotheses but {} references", records.len(), refs.len());
    }
    let hyps: Vec<Vec<TokenId>> = records.iter().map(|r| r.tokens.clone()).collect();
    let references: Vec<Vec<TokenId>> = refs.iter().map(|p| p.reference().to_vec()).collect();
    let lag: Vec<(&[usize], usize, usize)> = records
        .iter()
        .zip(&references)
        .filter(|(r, _)| !r.g.is_empty())
        .map(|(r, reference)| (r.g.as_slice(), r.source.len(), reference.len()))
        .collect();
    let latency = if lag.is_empty() {
        None
    } else {
        Some(corpus_lagging(&lag)?)
    };
    let metrics = Metrics {
        bleu: corpus_bleu(&hyps, &references)?,
        accuracy: corpus_accuracy(&hyps, &references)?,
        al: latency.as_ref().map(|l| l.al),
        laal: latency.as_ref().map(|l| l.laal),
    };
    let json = serde_json::to_string_pretty(&metrics)?;
    let path = match &a.output {
        Some(p) => p.clone(),
        None => ctx.out_file("metrics.json")?,
    };
    fs::write(&path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
    println!("{json}");
    Ok(())
}

fn csv_row<I: IntoIterator<Item = String>>(cells: I) -> String {
    cells.into_iter().collect::<Vec<_>>().join(",")
}

fn masks_cmd(ctx: &Session, a: &MasksArgs) -> anyhow::Result<()> {
    let cfg = &ctx.cfg;
    if a.src_len == 0 || a.tgt_len == 0 {
        bail!("--src-len and --tgt-len must be positive");
    }
    let source: Vec<TokenId> = (0..a.src_len as TokenId)
        .map(|i| FIRST_CONTENT + i)
        .collect();
    let target: Vec<TokenId> = (0..a.tgt_len as TokenId)
        .map(|i| FIRST_CONTENT + a.src_len as TokenId + i)
        .collect();
    let schedule = match cfg.paradigm {
        ParadigmId::BatchOffline => WaitkSchedule::offline(a.src_len, a.tgt_len),
        _ => waitk_schedule(cfg.k, a.src_len, a.tgt_len)?,
    };
    let mut arr = arrange(cfg.paradigm, &schedule, cfg.phi()?, &source, &target)?;
    arr.remove_positions(cfg.removal);
    let names: Vec<String> = (0..arr.len())
        .map(|r| match arr.roles[r] {
            Role::Source => format!(
                "x{}",
                arr.source_rows().iter().position(|&s| s == r).expect("row")
            ),
            Role::Target => format!(
                "y{}",
                arr.target_rows().iter().position(|&s| s == r).expect("row")
            ),
        })
        .collect();
    let mut out = String::new();
    out.push_str(&format!(
        "# {} k={} g={:?}\n",
        cfg.paradigm,
        cfg.k,
        schedule.as_slice()
    ));
    out.push_str("# attn_mask\n");
    out.push_str(&format!("query,{}\n", names.join(",")));
    for (r, name) in names.iter().enumerate() {
        let cells = arr
            .attn_mask
            .row(r)
            .iter()
            .map(|&b| u8::from(b).to_string());
        out.push_str(&format!("{name},{}\n", csv_row(cells)));
    }
    out.push_str("# positions\n");
    out.push_str(&format!("{}\n", names.join(",")));
    out.push_str(&format!(
        "{}\n",
        csv_row(arr.position_values().iter().map(|p| p.to_string()))
    ));
    out.push_str("# loss_mask\n");
    out.push_str(&format!("{}\n", names.join(",")));
    out.push_str(&format!(
        "{}\n",
        csv_row(arr.loss_mask.iter().map(|&b| u8::from(b).to_string()))
    ));
    let report = mask_report(&arr);
    out.push_str(&format!(
        "# source_to_target_edges={} target_future_source_edges={} density={:.4}\n",
        report.source_to_target_edges, report.target_future_source_edges, report.density
    ));
    print!("{out}");
    Ok(())
}

fn parse_ids(text: &str) -> anyhow::Result<Vec<TokenId>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<TokenId>()
                .with_context(|| format!("bad token id '{s}'"))
        })
        .collect()
}

fn attn_cmd<T: Scalar>(ctx: &Session, a: &AttnArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint::<T>(&a.checkpoint)?;
    let model: &Model<T> = &ckpt.model;
    let opts = decode_options(ctx, ckpt.train.as_ref(), &a.layout)?;
    let source = parse_ids(&a.input)?;
    if source.is_empty() {
        bail!("--input holds no token ids");
    }
    let target = match &a.target {
        Some(t) => parse_ids(t)?,
        None => decode(model, &opts, &source)?.tokens,
    };
    let pair = ParallelPair { source, target };
    // The target side is BOS followed by the given or decoded tokens.
    let arr = example_arrangement(&pair, opts.paradigm, opts.k, opts.phi, opts.removal)?;
    let map = attention_map(model, &arr, a.layer, a.head)?;
    let (mut m, rows, mut cols) = match a.view {
        View::Full => (
            map.matrix.clone(),
            map.row_roles.clone(),
            map.col_roles.clone(),
        ),
        View::TargetSource => (
            target_to_source(&map.matrix, &arr),
            vec![Role::Target; arr.target_len()],
            vec![Role::Source; arr.source_len()],
        ),
    };
    if a.strip_sink {
        m = sink_strip(&m)?;
        cols.remove(0);
    }
    if a.normalize {
        m = gamma_transform(&normalize_columns(&m), a.gamma)?;
    }
    let (ext, body) = match a.format {
        Format::Csv => ("csv", to_csv(&m)),
        Format::Svg => ("svg", to_svg(&m, &rows, &cols)),
    };
    let path = ctx.out_file(&format!("attn_l{}_h{}.{ext}", a.layer, a.head))?;
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "wrote {}x{} map to {}",
        m.nrows(),
        m.ncols(),
        path.display()
    );
    Ok(())
}

fn bench_cmd<T: Scalar>(ctx: &Session, a: &BenchArgs) -> anyhow::Result<()> {
    let (model, trained_for) = match &a.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint::<T>(path)?;
            let meta = ckpt.train.map(|m| (m.paradigm, m.k));
            (ckpt.model, meta)
        }
        None => (Model::<T>::init(tiny_bench_config(), ctx.cfg.seed)?, None),
    };
    let spec = BenchSpec {
        paradigms: a.paradigms.clone(),
        k_list: a.k.clone(),
        source_lengths: a.lengths.clone(),
        repetitions: a.reps,
        seed: ctx.cfg.seed,
        trained_for,
    };
    let report = run_bench(&model, &spec)?;
    let path = ctx.out_file("bench.csv")?;
    write_report_csv(&path, &report)?;
    println!(
        "{:<14} {:>3} {:>5} {:>10} {:>10} {:>12} {:>8} {:>8}",
        "paradigm", "k", "len", "seconds", "tok/s", "total_ops", "speedup", "op_gain"
    );
    for r in &report.rows {
        println!(
            "{:<14} {:>3} {:>5} {:>10.4} {:>10.1} {:>12} {:>8.2} {:>8.2}{}",
            r.paradigm.name(),
            r.k,
            r.source_len,
            r.total_seconds,
            r.tokens_per_second,
            r.counters.total(),
            r.speedup_vs_all_re,
            r.op_speedup_vs_all_re,
            if r.mismatch { "  (mismatch)" } else { "" }
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
