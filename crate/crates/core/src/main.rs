use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use trialigner::eval::{
    compute_report, evaluate, read_run, report_csv, write_report, write_run, EvalOptions,
    EvalScope, MetricsReport, RetrievalMode, RetrievalRun, POOLED, REPORT_KS,
};
use trialigner::fsutil::{read_jsonl, write_atomic, write_jsonl};
use trialigner::gateway::{
    apply_rerank, augment_posts, build_rerank_inputs, rerank_many, AugmentItem, AuditedTransport,
    ConcatEchoTransport, GatewayConfig, GatewayError, HttpTransport, IdentityRerankTransport,
    Transport,
};
use trialigner::mining::{mine_hard_negatives, HardNegativeSet, MiningError, MiningSource};
use trialigner::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelError, ModelParams};
use trialigner::store::{
    l2_normalize_rows, split_dataset, validate_bundle, DatasetBundle, SplitRole, SplitSpec,
    StoreError,
};
use trialigner::synth::{generate, SynthConfig};
use trialigner::train::{train, write_log, AdamWConfig, Monitor, TrainConfig, TrainError};

const EXIT_FAILURE: u8 = 1;
const EXIT_MISSING: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_DIM_MISMATCH: u8 = 4;
const EXIT_TOO_MANY_NEGATIVES: u8 = 5;

#[derive(Parser)]
#[command(name = "trialigner", version, about = "Tri-source fusion retrieval for fact-checked claims")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "TRIALIGNER_SEED", default_value_t = 0)]
    seed: u64,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, env = "TRIALIGNER_THREADS")]
    threads: Option<usize>,
    /// Bundle manifest (JSON).
    #[arg(long, global = true, env = "TRIALIGNER_MANIFEST")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a bundle; prints one violation per line.
    Validate,
    /// Write a seeded train/dev split file.
    Split {
        #[arg(long, default_value_t = 0.1)]
        dev_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine hard negatives for training posts.
    Mine {
        #[arg(long, default_value_t = trialigner::mining::DEFAULT_NEGATIVES)]
        m: usize,
        #[arg(long, value_enum, default_value_t = SourceArg::English)]
        source: SourceArg,
        /// Also mine for dev posts.
        #[arg(long)]
        include_dev: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write the best checkpoint to `<checkpoint>.best`.
    Train(TrainArgs),
    /// Retrieve, optionally rerank, and report S@K / R@K.
    Eval(EvalArgs),
    /// Rerank an existing run file.
    Rerank {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Mono)]
        mode: ModeArg,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge post text with OCR text through the gateway.
    Augment {
        /// JSON Lines of {id, text, ocr_text}.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rejected_out: Option<PathBuf>,
    },
    /// Write a planted synthetic bundle.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 500)]
        posts: usize,
        #[arg(long, default_value_t = 2000)]
        facts: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        languages: usize,
        #[arg(long, default_value_t = 0.2)]
        dev_fraction: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Native,
    English,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Mono,
    Cross,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<RetrievalMode> {
        match self {
            ModeArg::Mono => vec![RetrievalMode::Monolingual],
            ModeArg::Cross => vec![RetrievalMode::Crosslingual],
            ModeArg::Both => vec![RetrievalMode::Monolingual, RetrievalMode::Crosslingual],
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RerankArg {
    Off,
    Mock,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Dev,
    Train,
    All,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(2..))]
    batch_size: u64,
    #[arg(long, default_value_t = 6e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    lr_min: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    patience: u64,
    /// Retrieval mode of the dev Recall@10 monitor.
    #[arg(long, value_enum, default_value_t = MonitorArg::Mono)]
    monitor: MonitorArg,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long)]
    concat_from_normalized: bool,
    /// Hard negatives for the margin term.
    #[arg(long)]
    negatives: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 0.0)]
    margin_weight: f64,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MonitorArg {
    Mono,
    Cross,
}

#[derive(Args)]
struct GatewayArgs {
    #[arg(long, value_enum, default_value_t = RerankArg::Mock)]
    transport: RerankArg,
    #[arg(long, default_value = trialigner::gateway::DEFAULT_MODEL)]
    model_name: String,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    /// JSON Lines audit log of every gateway call.
    #[arg(long)]
    audit: Option<PathBuf>,
    /// JSON object mapping post id to text.
    #[arg(long)]
    post_texts: Option<PathBuf>,
    /// JSON object mapping fact id to text.
    #[arg(long)]
    fact_texts: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = RerankArg::Off)]
    rerank: RerankArg,
    #[arg(long, value_enum, default_value_t = ScopeArg::Dev)]
    scope: ScopeArg,
    #[arg(long, default_value_t = 20)]
    k_max: usize,
    #[arg(long, default_value_t = 4096)]
    fact_block: usize,
    #[arg(long, default_value_t = 256)]
    post_block: usize,
    /// Run file; with several modes, the mode name is inserted before the extension.
    #[arg(long)]
    run_out: PathBuf,
    #[arg(long)]
    report_out: PathBuf,
    #[arg(long)]
    csv_out: Option<PathBuf>,
    #[arg(long, default_value = trialigner::gateway::DEFAULT_MODEL)]
    model_name: String,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long)]
    audit: Option<PathBuf>,
    #[arg(long)]
    post_texts: Option<PathBuf>,
    #[arg(long)]
    fact_texts: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::Io { .. } => EXIT_MISSING,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::Io(err) if err.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Divergence { .. } => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<MiningError> for Failure {
    fn from(e: MiningError) -> Self {
        let code = match &e {
            MiningError::TooManyRequested { .. } => EXIT_TOO_MANY_NEGATIVES,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

macro_rules! generic_failure {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::new(EXIT_FAILURE, e.to_string())
            }
        }
    )*};
}
generic_failure!(
    trialigner::eval::EvalError,
    GatewayError,
    std::io::Error,
    serde_json::Error
);

type CmdResult = Result<(), Failure>;

/// Provenance written next to every output.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: &'static str,
    seed: u64,
    manifest: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    negatives: Option<PathBuf>,
    outputs: Vec<PathBuf>,
    config: Value,
    started_unix: f64,
    finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn write_sidecar(run: &RunManifest, output: &Path) -> std::io::Result<()> {
    let body = serde_json::to_vec_pretty(run).expect("manifest serializes");
    write_atomic(&sidecar(output), &body)
}

struct Ctx {
    seed: u64,
    manifest: Option<PathBuf>,
    started: f64,
}

impl Ctx {
    fn manifest(&self) -> Result<&Path, Failure> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Failure::new(EXIT_MISSING, "--manifest is required for this command"))
    }

    fn bundle(&self) -> Result<DatasetBundle, Failure> {
        Ok(DatasetBundle::load(self.manifest()?)?)
    }

    fn provenance(
        &self,
        command: &str,
        checkpoint: Option<&Path>,
        negatives: Option<&Path>,
        outputs: &[&Path],
        config: Value,
    ) -> RunManifest {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            manifest: self.manifest.clone(),
            checkpoint: checkpoint.map(Path::to_path_buf),
            negatives: negatives.map(Path::to_path_buf),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            config,
            started_unix: self.started,
            finished_unix: now(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    let ctx = Ctx {
        seed: cli.seed,
        manifest: cli.manifest,
        started: now(),
    };
    let result = match cli.command {
        Command::Validate => cmd_validate(&ctx),
        Command::Split { dev_fraction, out } => cmd_split(&ctx, dev_fraction, &out),
        Command::Mine {
            m,
            source,
            include_dev,
            out,
        } => cmd_mine(&ctx, m, source, include_dev, &out),
        Command::Train(args) => cmd_train(&ctx, &args),
        Command::Eval(args) => cmd_eval(&ctx, &args),
        Command::Rerank {
            run,
            mode,
            gateway,
            out,
        } => cmd_rerank(&ctx, &run, mode, &gateway, &out),
        Command::Augment {
            input,
            gateway,
            out,
            rejected_out,
        } => cmd_augment(&ctx, &input, &gateway, &out, rejected_out.as_deref()),
        Command::Synth {
            out_dir,
            posts,
            facts,
            dim,
            languages,
            dev_fraction,
        } => cmd_synth(&ctx, &out_dir, posts, facts, dim, languages, dev_fraction),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_validate(ctx: &Ctx) -> CmdResult {
    let bundle = ctx.bundle()?;
    let report = validate_bundle(&bundle);
    for v in &report.violations {
        println!("{v}");
    }
    if report.is_valid() {
        println!("ok: {} posts, {} facts", bundle.post_native.rows(), bundle.fact_native.rows());
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_FAILURE,
            format!("{} violation(s)", report.violations.len()),
        ))
    }
}

fn cmd_split(ctx: &Ctx, dev_fraction: f64, out: &Path) -> CmdResult {
    let bundle = ctx.bundle()?;
    let split = split_dataset(&bundle.pairs, dev_fraction, ctx.seed)?;
    write_atomic(out, &serde_json::to_vec_pretty(&split)?)?;
    let dev = split.values().filter(|r| **r == SplitRole::Dev).count();
    println!("{} train, {dev} dev", split.len() - dev);
    let cfg = json!({ "dev_fraction": dev_fraction });
    write_sidecar(&ctx.provenance("split", None, None, &[out], cfg), out)?;
    Ok(())
}

fn cmd_mine(ctx: &Ctx, m: usize, source: SourceArg, include_dev: bool, out: &Path) -> CmdResult {
    let bundle = ctx.bundle()?;
    let (posts, facts, src) = match source {
        SourceArg::Native => (&bundle.post_native, &bundle.fact_native, MiningSource::Native),
        SourceArg::English => (&bundle.post_english, &bundle.fact_english, MiningSource::English),
    };
    let posts = l2_normalize_rows(posts)?;
    let facts = l2_normalize_rows(facts)?;
    let selected: Vec<&str> = bundle
        .pairs
        .entries
        .iter()
        .filter(|e| include_dev || bundle.split.get(&e.post_id) == Some(&SplitRole::Train))
        .map(|e| e.post_id.as_str())
        .collect();
    let set = mine_hard_negatives(&posts, &facts, &bundle.pairs, m, Some(&selected))?;
    set.save(out)?;
    println!("mined {m} negatives for {} posts", set.len());
    let cfg = json!({ "m": m, "source": src, "include_dev": include_dev });
    write_sidecar(&ctx.provenance("mine", None, None, &[out], cfg), out)?;
    Ok(())
}

fn best_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

fn cmd_train(ctx: &Ctx, args: &TrainArgs) -> CmdResult {
    let bundle = ctx.bundle()?;
    let negatives = match &args.negatives {
        Some(p) => Some(HardNegativeSet::load(p)?),
        None => None,
    };
    let model_cfg = ModelConfig {
        d_native: bundle.native_dim(),
        d_english: bundle.english_dim(),
        hidden: args.hidden,
        dropout_p: args.dropout,
        concat_from_normalized: args.concat_from_normalized,
    };
    let config = TrainConfig {
        batch_size: args.batch_size as usize,
        learning_rate: args.lr,
        lr_min: args.lr_min,
        optimizer: AdamWConfig {
            weight_decay: args.weight_decay,
            ..Default::default()
        },
        max_epochs: args.epochs as usize,
        patience: args.patience as usize,
        monitor: Monitor {
            mode: match args.monitor {
                MonitorArg::Mono => RetrievalMode::Monolingual,
                MonitorArg::Cross => RetrievalMode::Crosslingual,
            },
            k: 10,
        },
        seed: ctx.seed,
        margin: args.margin,
        margin_weight: args.margin_weight,
        ..Default::default()
    };
    let model = ModelParams::init(&model_cfg, ctx.seed);
    let outcome = train(model, &bundle, &config, negatives.as_ref())?;
    let best = best_path(&args.checkpoint);
    save_checkpoint(&outcome.best, &best)?;
    write_log(&args.log, &outcome.log)?;
    for l in &outcome.log {
        println!(
            "epoch {:>3}  loss {:.6}  lr {:.3e}  {} {:.4}",
            l.epoch, l.mean_loss, l.lr, l.monitor_name, l.monitor_value
        );
    }
    println!(
        "best {} = {:.4} at epoch {} -> {}",
        config.monitor.name(),
        outcome.best_monitor,
        outcome.best_epoch,
        best.display()
    );
    let cfg = serde_json::to_value(args)?;
    let prov = ctx.provenance(
        "train",
        Some(&best),
        args.negatives.as_deref(),
        &[&best, &args.log],
        cfg,
    );
    write_sidecar(&prov, &best)?;
    write_sidecar(&prov, &args.log)?;
    Ok(())
}

fn load_texts(path: Option<&Path>) -> Result<HashMap<String, String>, Failure> {
    match path {
        None => Ok(HashMap::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::new(EXIT_MISSING, format!("{}: {e}", p.display())))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn make_transport(
    kind: RerankArg,
    mock: Box<dyn Transport>,
    audit: Option<&Path>,
) -> Result<Box<dyn Transport>, Failure> {
    let inner: Box<dyn Transport> = match kind {
        RerankArg::Off => unreachable!("no transport when reranking is off"),
        RerankArg::Mock => mock,
        RerankArg::Http => Box::new(HttpTransport::from_env()?),
    };
    Ok(match audit {
        Some(p) => Box::new(AuditedTransport::new(inner, p)?),
        None => inner,
    })
}

/// Reranks every post with at least 15 candidates. Missing texts become empty strings.
fn rerank_run(
    run: &RetrievalRun,
    transport: &dyn Transport,
    cfg: &GatewayConfig,
    mut post_texts: HashMap<String, String>,
    mut fact_texts: HashMap<String, String>,
) -> Result<RetrievalRun, Failure> {
    for (post, list) in &run.entries {
        post_texts.entry(post.clone()).or_default();
        for r in list {
            fact_texts.entry(r.fact_id.clone()).or_default();
        }
    }
    let (inputs, skipped) = build_rerank_inputs(run, &post_texts, &fact_texts)?;
    if !skipped.is_empty() {
        eprintln!(
            "note: {} post(s) have fewer than 15 candidates and were not reranked",
            skipped.len()
        );
    }
    let outputs = rerank_many(&inputs, transport, cfg)?;
    Ok(apply_rerank(run, &outputs)?)
}

fn with_mode(path: &Path, mode: RetrievalMode, several: bool) -> PathBuf {
    if !several {
        return path.to_path_buf();
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{mode}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{mode}"),
    };
    path.with_file_name(name)
}

fn print_grid(report: &MetricsReport) {
    let mut modes: Vec<RetrievalMode> = report.cells.iter().map(|c| c.mode).collect();
    modes.dedup();
    for mode in modes {
        println!("{mode}");
        print!("  {:<10}", "language");
        for k in REPORT_KS {
            print!(" {:>7}", format!("S@{k}"));
        }
        for k in REPORT_KS {
            print!(" {:>7}", format!("R@{k}"));
        }
        println!();
        let mut langs: Vec<String> = report.languages().into_iter().map(str::to_owned).collect();
        langs.push(POOLED.into());
        langs.push(trialigner::eval::POOLED_MACRO.into());
        for lang in langs {
            if report.get(mode, &lang, 1).is_none() {
                continue;
            }
            print!("  {lang:<10}");
            for k in REPORT_KS {
                match report.get(mode, &lang, k) {
                    Some(c) => print!(" {:>7.4}", c.success),
                    None => print!(" {:>7}", "-"),
                }
            }
            for k in REPORT_KS {
                match report.get(mode, &lang, k) {
                    Some(c) => print!(" {:>7.4}", c.recall),
                    None => print!(" {:>7}", "-"),
                }
            }
            println!();
        }
    }
}

fn cmd_eval(ctx: &Ctx, args: &EvalArgs) -> CmdResult {
    let bundle = ctx.bundle()?;
    let model = load_checkpoint(&args.checkpoint)?;
    let mc = model.config();
    if mc.d_native != bundle.native_dim() || mc.d_english != bundle.english_dim() {
        return Err(Failure::new(
            EXIT_DIM_MISMATCH,
            format!(
                "checkpoint expects native/english dims {}/{}, bundle has {}/{}",
                mc.d_native,
                mc.d_english,
                bundle.native_dim(),
                bundle.english_dim()
            ),
        ));
    }
    if args.rerank != RerankArg::Off && args.k_max < trialigner::gateway::RERANK_POOL {
        return Err(Failure::new(
            EXIT_MISSING,
            "--k-max must be at least 15 when reranking",
        ));
    }
    let gw = GatewayConfig {
        model_name: args.model_name.clone(),
        max_in_flight: args.max_in_flight,
        ..Default::default()
    };
    let transport = match args.rerank {
        RerankArg::Off => None,
        kind => Some(make_transport(
            kind,
            Box::new(IdentityRerankTransport),
            args.audit.as_deref(),
        )?),
    };
    let post_texts = load_texts(args.post_texts.as_deref())?;
    let fact_texts = load_texts(args.fact_texts.as_deref())?;

    let modes = args.mode.modes();
    let several = modes.len() > 1;
    let mut report = MetricsReport::default();
    let mut outputs: Vec<PathBuf> = Vec::new();
    for mode in modes {
        let opts = EvalOptions {
            mode,
            k_max: args.k_max,
            scope: match args.scope {
                ScopeArg::Dev => EvalScope::Dev,
                ScopeArg::Train => EvalScope::Train,
                ScopeArg::All => EvalScope::All,
            },
            fact_block: args.fact_block,
            post_block: args.post_block,
        };
        let (mut run, mut part) = evaluate(&model, &bundle, &opts)?;
        if let Some(t) = &transport {
            run = rerank_run(&run, t.as_ref(), &gw, post_texts.clone(), fact_texts.clone())?;
            let ks: Vec<usize> = REPORT_KS.iter().copied().filter(|&k| k <= args.k_max).collect();
            part = compute_report(&run, &bundle.pairs, &ks)?;
        }
        let path = with_mode(&args.run_out, mode, several);
        write_run(&path, &run)?;
        outputs.push(path);
        report.merge(part);
    }
    print_grid(&report);

    let cfg = json!({
        "mode": format!("{:?}", args.mode.modes()),
        "rerank": match args.rerank { RerankArg::Off => "off", RerankArg::Mock => "mock", RerankArg::Http => "http" },
        "k_max": args.k_max,
        "fact_block": args.fact_block,
        "post_block": args.post_block,
        "model_name": args.model_name,
    });
    let mut out_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    out_refs.push(&args.report_out);
    let prov = ctx.provenance("eval", Some(&args.checkpoint), None, &out_refs, cfg);
    write_report(&args.report_out, &report, Some(&serde_json::to_value(&prov)?))?;
    if let Some(csv) = &args.csv_out {
        write_atomic(csv, report_csv(&report).as_bytes())?;
    }
    for p in &outputs {
        write_sidecar(&prov, p)?;
    }
    Ok(())
}

fn cmd_rerank(ctx: &Ctx, run_path: &Path, mode: ModeArg, gw: &GatewayArgs, out: &Path) -> CmdResult {
    if gw.transport == RerankArg::Off {
        return Err(Failure::new(EXIT_MISSING, "--transport off does nothing here"));
    }
    let mode = match mode {
        ModeArg::Cross => RetrievalMode::Crosslingual,
        _ => RetrievalMode::Monolingual,
    };
    if !run_path.exists() {
        return Err(Failure::new(EXIT_MISSING, format!("{} not found", run_path.display())));
    }
    let run = read_run(run_path, mode)?;
    let transport = make_transport(gw.transport, Box::new(IdentityRerankTransport), gw.audit.as_deref())?;
    let cfg = GatewayConfig {
        model_name: gw.model_name.clone(),
        max_in_flight: gw.max_in_flight,
        ..Default::default()
    };
    let reranked = rerank_run(
        &run,
        transport.as_ref(),
        &cfg,
        load_texts(gw.post_texts.as_deref())?,
        load_texts(gw.fact_texts.as_deref())?,
    )?;
    write_run(out, &reranked)?;
    println!("reranked {} posts -> {}", reranked.entries.len(), out.display());
    let c = json!({ "model_name": gw.model_name, "max_in_flight": gw.max_in_flight });
    write_sidecar(&ctx.provenance("rerank", None, None, &[out], c), out)?;
    Ok(())
}

fn cmd_augment(
    ctx: &Ctx,
    input: &Path,
    gw: &GatewayArgs,
    out: &Path,
    rejected_out: Option<&Path>,
) -> CmdResult {
    if gw.transport == RerankArg::Off {
        return Err(Failure::new(EXIT_MISSING, "--transport off does nothing here"));
    }
    let items: Vec<AugmentItem> = read_jsonl(input)
        .map_err(|e| Failure::new(EXIT_MISSING, format!("{}: {e}", input.display())))?;
    let transport = make_transport(gw.transport, Box::new(ConcatEchoTransport), gw.audit.as_deref())?;
    let cfg = GatewayConfig {
        model_name: gw.model_name.clone(),
        ..Default::default()
    };
    let result = augment_posts(&items, transport.as_ref(), &cfg)?;
    let lines: Vec<Value> = result
        .texts
        .iter()
        .map(|(id, text)| json!({ "id": id, "text": text }))
        .collect();
    write_jsonl(out, &lines)?;
    if let Some(p) = rejected_out {
        write_jsonl(p, &result.rejected)?;
    }
    println!(
        "augmented {} posts, {} fell back to concatenation",
        lines.len(),
        result.rejected.len()
    );
    let c = json!({ "model_name": gw.model_name });
    write_sidecar(&ctx.provenance("augment", None, None, &[out], c), out)?;
    Ok(())
}

fn sorted(m: &HashMap<String, String>) -> std::collections::BTreeMap<&str, &str> {
    m.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect()
}

fn cmd_synth(
    ctx: &Ctx,
    out_dir: &Path,
    posts: usize,
    facts: usize,
    dim: usize,
    languages: usize,
    dev_fraction: f64,
) -> CmdResult {
    if facts < 2 * posts || languages == 0 || dim < 2 {
        return Err(Failure::new(
            EXIT_MISSING,
            "need facts >= 2 * posts, at least one language and dim >= 2",
        ));
    }
    let cfg = SynthConfig {
        posts,
        facts,
        dim,
        languages,
        dev_fraction,
        seed: ctx.seed,
        ..Default::default()
    };
    let data = generate(&cfg)?;
    let manifest = out_dir.join("manifest.json");
    data.bundle.save(
        &manifest,
        SplitSpec {
            seed: ctx.seed,
            dev_fraction,
        },
    )?;
    write_atomic(&out_dir.join("post_texts.json"), &serde_json::to_vec_pretty(&sorted(&data.post_texts))?)?;
    write_atomic(&out_dir.join("fact_texts.json"), &serde_json::to_vec_pretty(&sorted(&data.fact_texts))?)?;
    println!("wrote {}", manifest.display());
    Ok(())
}
