use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use alpine::campaign::{resume, Budget, CampaignConfig, CampaignState, Evaluator};
use alpine::embedding::{fit, FitConfig, Init};
use alpine::experiment::{mean_gains, new_node_study, run_experiment, timing_report, ExperimentGrid, ResultWriter};
use alpine::metrics::auc;
use alpine::pon::{apply_mask, load_edge_list, read_mask, MaskMode, MaskSpec, PartialNetwork};
use alpine::strategy::{score_pool, PageRankConfig, ScoringContext, Strategy};
use alpine::synth;
use alpine::vopt::VoptConfig;
use alpine::{AlpineError, Result};

#[derive(Parser)]
#[command(name = "alpine", version, about = "Active link prediction in partially observed networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a grid of campaigns and write the results CSV.
    Run(RunArgs),
    /// Rank the partners of a node that only has its link to an anchor observed.
    NewNode(NewNodeArgs),
    /// Score the unknown pairs of a masked graph with one strategy.
    Score(ScoreArgs),
    /// AUC of a CSV with `score` and `label` columns.
    Auc {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Hide a uniform fraction of pairs and write them as a mask file.
    Mask {
        #[arg(long)]
        graph: String,
        #[arg(long, default_value_t = 0.2)]
        hide_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one campaign with a checkpoint file, optionally stopping early.
    Campaign(CampaignArgs),
    /// Continue a checkpointed campaign.
    Resume {
        #[arg(long)]
        graph: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        max_rounds: Option<usize>,
    },
    /// Write one of the bundled synthetic graphs as an edge list.
    Synth {
        /// polbooks-surrogate, celegans-like or two-hub
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-4)]
    ridge: f64,
    #[arg(long, default_value_t = 500)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Drop the queried pair's own terms from the v-opt score.
    #[arg(long)]
    exclude_self_pair: bool,
    /// Refit from a fresh random embedding every iteration.
    #[arg(long)]
    cold_start: bool,
}

impl ModelArgs {
    fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            dim: self.dim,
            max_epochs: self.max_epochs,
            learning_rate: self.learning_rate,
            tolerance: self.tolerance,
            init: Init::RandomGaussian { scale: None },
            seed,
            ..FitConfig::default()
        }
    }

    fn campaign_config(&self, strategy: Strategy, step: usize, budget: Budget, seed: u64) -> CampaignConfig {
        CampaignConfig {
            strategy,
            step,
            budget,
            fit: self.fit_config(seed),
            gamma: self.gamma,
            vopt: VoptConfig { ridge: self.ridge, exclude_self_pair: self.exclude_self_pair },
            pagerank: PageRankConfig::default(),
            seed,
            warm_start: !self.cold_start,
            early_stop_auc: None,
            holdout_fraction: None,
        }
    }
}

#[derive(Args)]
struct BudgetArgs {
    /// Budget as a fraction of the initial unknown pool.
    #[arg(long, default_value_t = 0.1, conflicts_with = "budget")]
    budget_frac: f64,
    /// Budget as a number of queries.
    #[arg(long)]
    budget: Option<usize>,
}

impl BudgetArgs {
    fn budget(&self) -> Budget {
        match self.budget {
            Some(b) => Budget::Queries(b),
            None => Budget::FractionOfPool(self.budget_frac),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Edge list path, or builtin:polbooks / builtin:celegans-like.
    #[arg(long)]
    graph: String,
    #[arg(long, value_delimiter = ',', default_value = "v-opt")]
    strategy: Vec<Strategy>,
    #[arg(long, default_value_t = 0.2)]
    hide_frac: f64,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, value_delimiter = ',', default_value = "10")]
    step: Vec<usize>,
    #[command(flatten)]
    model: ModelArgs,
    /// First embedding / campaign seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds starting at --seed (embedding restarts).
    #[arg(long, default_value_t = 1)]
    restarts: u64,
    /// First mask seed.
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
    /// Number of consecutive mask seeds starting at --mask-seed.
    #[arg(long, default_value_t = 1)]
    masks: u64,
    /// Query streams per seed for the random strategy.
    #[arg(long, default_value_t = 1)]
    random_repeats: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NewNodeArgs {
    #[arg(long)]
    graph: String,
    #[arg(long)]
    node: String,
    #[arg(long)]
    anchor: String,
    #[arg(long, default_value = "v-opt")]
    strategy: Strategy,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rankings as CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    graph: String,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    strategy: Strategy,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CampaignArgs {
    #[arg(long)]
    graph: String,
    #[arg(long, default_value = "v-opt")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0.2)]
    hide_frac: f64,
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, default_value_t = 10)]
    step: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stop after this many rounds; the checkpoint can be resumed later.
    #[arg(long)]
    max_rounds: Option<usize>,
}

fn load_graph(spec: &str) -> Result<(PartialNetwork, String)> {
    let net = match spec {
        "builtin:polbooks" => {
            let (net, name) = synth::polbooks()?;
            return Ok((net, name.to_string()));
        }
        "builtin:celegans-like" => synth::celegans_like(),
        _ => {
            let (net, report) = load_edge_list(spec)?;
            if report.dropped() > 0 {
                warn!(
                    "{spec}: dropped {} self-loops and {} duplicate edges",
                    report.self_loops, report.duplicates
                );
            }
            net
        }
    };
    let name = Path::new(spec)
        .file_stem()
        .map(|s| s.to_string_lossy().trim_start_matches("builtin:").to_string())
        .unwrap_or_else(|| spec.to_string());
    Ok((net, name))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| AlpineError::io(path, e))
}

fn node_id(net: &PartialNetwork, token: &str) -> Result<usize> {
    net.node_by_label(token)
        .ok_or_else(|| AlpineError::Config(format!("unknown node {token:?}")))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let (truth, dataset) = load_graph(&args.graph)?;
    let grid = ExperimentGrid {
        dataset,
        hide_fraction: args.hide_frac,
        strategies: args.strategy.clone(),
        seeds: (args.seed..args.seed + args.restarts).collect(),
        mask_seeds: (args.mask_seed..args.mask_seed + args.masks).collect(),
        steps: args.step.clone(),
        random_repeats: args.random_repeats,
        base: args.model.campaign_config(Strategy::Random, 10, args.budget.budget(), args.seed),
    };
    let mut writer = ResultWriter::new(create(&args.out)?)?;
    let result = run_experiment(&truth, &grid, Some(&mut writer))?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for ((strategy, step), gain) in mean_gains(&result) {
        writeln!(out, "gain {strategy} step {step}: {gain:+.3} points")?;
    }
    for (strategy, secs) in timing_report(&result) {
        writeln!(out, "scoring {strategy}: {secs:.6} s")?;
    }
    for f in &result.failures {
        writeln!(out, "failed {} seed {} mask {} step {}: {}", f.strategy, f.seed, f.mask_seed, f.step, f.error)?;
    }
    Ok(())
}

fn cmd_new_node(args: NewNodeArgs) -> Result<()> {
    let (truth, _) = load_graph(&args.graph)?;
    let node = node_id(&truth, &args.node)?;
    let anchor = node_id(&truth, &args.anchor)?;
    let cfg = args.model.campaign_config(args.strategy, 1, Budget::Queries(args.iters.max(1)), args.seed);
    let rounds = new_node_study(&truth, node, anchor, args.iters, &cfg)?;
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["iteration", "rank", "candidate", "score"])?;
    for r in &rounds {
        if let Some(top) = r.top() {
            info!("iteration {}: top candidate {}", r.iteration, truth.label(top));
        }
        for (rank, (k, s)) in r.ranking.iter().enumerate() {
            w.write_record([r.iteration.to_string(), (rank + 1).to_string(), truth.label(*k), format!("{s:e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let (truth, _) = load_graph(&args.graph)?;
    let mask = read_mask(&args.mask, &truth)?;
    let (net, _) = apply_mask(&truth, &MaskSpec { mode: MaskMode::Explicit(mask), seed: 0 })?;
    let model = fit(&net, &args.model.fit_config(args.seed), args.model.gamma)?.model;
    let ctx = ScoringContext {
        net: &net,
        model: Some(&model),
        iteration: 0,
        random_seed: args.seed,
        pagerank: PageRankConfig::default(),
        vopt: VoptConfig { ridge: args.model.ridge, exclude_self_pair: args.model.exclude_self_pair },
    };
    let scores = score_pool(args.strategy, &ctx)?;
    scores.write_csv(&net, create(&args.out)?)
}

fn parse_label(raw: &str, path: &Path, line: usize) -> Result<bool> {
    match raw.trim() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(AlpineError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("label must be 0 or 1, got {other:?}"),
        }),
    }
}

fn cmd_auc(path: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => AlpineError::io(path, io),
        other => AlpineError::Contract(format!("{other:?}")),
    })?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| AlpineError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing column {name:?}"),
        })
    };
    let (si, li) = (column("score")?, column("label")?);
    let mut scored = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = k + 2;
        let score: f64 = record[si].trim().parse().map_err(|_| AlpineError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("bad score {:?}", &record[si]),
        })?;
        scored.push((score, parse_label(&record[li], path, line)?));
    }
    println!("{}", auc(&scored)?);
    Ok(())
}

fn cmd_mask(graph: &str, hide_frac: f64, seed: u64, out: &Path) -> Result<()> {
    let (truth, _) = load_graph(graph)?;
    let (net, _) = apply_mask(&truth, &MaskSpec::uniform(hide_frac, seed))?;
    let mut w = create(out)?;
    net.write_mask(&mut w)?;
    w.flush()?;
    Ok(())
}

fn report_state(state: &CampaignState) {
    for m in &state.metrics {
        println!(
            "iteration {} queries {} auc {}",
            m.iteration,
            m.queries_used,
            m.auc_initial_pool.map_or("-".to_string(), |a| format!("{a:.6}"))
        );
    }
    match state.stop {
        Some(reason) => println!("stopped: {reason:?}"),
        None => println!("interrupted after {} rounds; resume with the checkpoint", state.iteration),
    }
}

fn cmd_campaign(args: CampaignArgs) -> Result<()> {
    let (truth, _) = load_graph(&args.graph)?;
    let (net0, oracle) = apply_mask(&truth, &MaskSpec::uniform(args.hide_frac, args.mask_seed))?;
    let cfg = args.model.campaign_config(args.strategy, args.step, args.budget.budget(), args.seed);
    let evaluator = Evaluator::new(&net0, &oracle);
    let mut state = CampaignState::start(&net0, &oracle, &cfg)?;
    let outcome = state.advance(&oracle, Some(&evaluator), args.max_rounds);
    state.save(&args.checkpoint)?;
    outcome?;
    report_state(&state);
    Ok(())
}

fn cmd_resume(graph: &str, checkpoint: &Path, max_rounds: Option<usize>) -> Result<()> {
    let (truth, _) = load_graph(graph)?;
    let mut state = CampaignState::load(checkpoint)?;
    if truth.node_count() != state.node_count {
        return Err(AlpineError::Checkpoint("graph node count differs from the checkpoint".into()));
    }
    let mask = state.initial_unknown.iter().copied().collect();
    let (net0, oracle) = apply_mask(&truth, &MaskSpec { mode: MaskMode::Explicit(mask), seed: 0 })?;
    state.attach(&net0)?;
    let evaluator = Evaluator::new(&net0, &oracle);
    let state = match max_rounds {
        None => {
            let cfg = state.config.clone();
            resume(state, &oracle, &cfg, Some(&evaluator))?
        }
        Some(k) => {
            let mut state = state;
            let outcome = state.advance(&oracle, Some(&evaluator), Some(k));
            state.save(checkpoint)?;
            outcome?;
            state
        }
    };
    state.save(checkpoint)?;
    report_state(&state);
    Ok(())
}

fn cmd_synth(kind: &str, seed: u64, out: Option<&Path>) -> Result<()> {
    let net = match kind {
        "polbooks-surrogate" => synth::polbooks_surrogate(),
        "celegans-like" => synth::celegans_like(),
        "two-hub" => synth::two_hub_graph(seed)?.truth,
        other => {
            return Err(AlpineError::Config(format!(
                "unknown graph kind {other:?}; valid: polbooks-surrogate, celegans-like, two-hub"
            )))
        }
    };
    match out {
        Some(p) => {
            let mut w = create(p)?;
            synth::write_edge_list(&net, &mut w)?;
            w.flush()?;
            Ok(())
        }
        None => synth::write_edge_list(&net, io::stdout().lock()),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("ALPINE_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| AlpineError::Config(format!("ALPINE_THREADS must be a positive integer, got {raw:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| AlpineError::Config(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::NewNode(args) => cmd_new_node(args),
        Command::Score(args) => cmd_score(args),
        Command::Auc { scores } => cmd_auc(&scores),
        Command::Mask { graph, hide_frac, seed, out } => cmd_mask(&graph, hide_frac, seed, &out),
        Command::Campaign(args) => cmd_campaign(args),
        Command::Resume { graph, checkpoint, max_rounds } => cmd_resume(&graph, &checkpoint, max_rounds),
        Command::Synth { kind, seed, out } => cmd_synth(&kind, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
