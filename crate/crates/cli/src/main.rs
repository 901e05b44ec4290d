//! `pathwise` command-line entry point.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O or usage error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pathwise_core::eval::{
    compare_reports, comparison_to_csv, evaluate_with_rewards, predictions_from_jsonl, report_to_csv,
    score_predictions, MetricsReport, RecordScore,
};
use pathwise_core::hashing::sha256_hex;
use pathwise_core::sim::{
    expected_metrics, label_weights, pretrain_sft, sweep_lambda, sweep_medians, sweep_to_csv, train_rl,
    ExpectedMetrics, PolicyLayout, SftConfig, SftHistory, SweepRow, TrainConfig,
};
use pathwise_core::synth::{
    dataset_hash, from_jsonl, paper_default_counts, synthesize_dataset, to_jsonl, ClassLabel, Conversation,
    ScenarioMix, Split, SynthOptions, TemplateBank,
};
use pathwise_core::{Lexicon, ReasoningGraph, RewardConfig, VERSION};
use pathwise_service::{AppState, Registry, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "pathwise", version, about = "Symbolic reasoning rewards for diagnostic dialogue")]
struct Cli {
    #[command(flatten)]
    run: RunConfig,
    #[command(subcommand)]
    command: Command,
}

/// Config files shared by every command. Shipped defaults when omitted.
#[derive(Debug, Args)]
struct RunConfig {
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    #[arg(long, global = true)]
    lexicon: Option<PathBuf>,
    #[arg(long, global = true)]
    bank: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check graph, lexicon and template bank invariants.
    Validate,
    /// Generate a conversation dataset.
    Synth(SynthArgs),
    /// Reward breakdown per prediction record.
    Score(ScoreArgs),
    /// Accuracy and hallucination metrics for a prediction file.
    Eval(EvalArgs),
    /// Metric deltas between two eval reports.
    Compare(CompareArgs),
    /// Supervised pretraining then RL fine-tuning of a tabular policy.
    Train(TrainArgs),
    /// RL runs over a grid of consistency weights and seeds.
    Sweep(SweepArgs),
    /// Run the HTTP scoring service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// `paper-default` or `label=n,...` (unlisted labels get 0).
    #[arg(long, default_value = "paper-default")]
    counts: String,
    /// `SI`, `SI,DF` or weighted `SI=3,II=1`.
    #[arg(long, default_value = "SI")]
    scenario_mix: String,
    /// Fraction of each class assigned to the train split.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `dataset.jsonl` and `manifest.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct RewardArgs {
    /// Weight of the path-consistency term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Disable the correctness term.
    #[arg(long)]
    no_rc: bool,
    /// Disable the path-consistency term.
    #[arg(long)]
    no_rs: bool,
    /// Disable the NoMatch penalty.
    #[arg(long)]
    no_rm: bool,
    /// Disable the length penalty.
    #[arg(long)]
    no_rl: bool,
}

impl RewardArgs {
    fn config(&self) -> Result<RewardConfig, Failure> {
        let mut cfg = RewardConfig::default();
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        cfg.enable_correctness = !self.no_rc;
        cfg.enable_consistency = !self.no_rs;
        cfg.enable_nomatch = !self.no_rm;
        cfg.enable_length = !self.no_rl;
        cfg.validate().map_err(invalid)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[command(flatten)]
    reward: RewardArgs,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[command(flatten)]
    reward: RewardArgs,
    /// Output directory for `metrics.json` and `metrics.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Baseline `metrics.json`.
    #[arg(long)]
    baseline: PathBuf,
    /// Candidate `metrics.json`.
    #[arg(long)]
    candidate: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HistoryArg {
    Sampled,
    Target,
}

#[derive(Debug, Clone, Args)]
struct SimArgs {
    /// Dataset JSONL; train split fits the policy, eval split scores it.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Observation noise rate.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 20_000)]
    episodes: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 8.0)]
    learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    sft_epochs: usize,
    #[arg(long, default_value_t = 2.0)]
    sft_learning_rate: f64,
    #[arg(long, value_enum, default_value_t = HistoryArg::Sampled)]
    sft_history: HistoryArg,
    #[command(flatten)]
    reward: RewardArgs,
}

impl SimArgs {
    fn configs(&self, seed: u64) -> Result<(SftConfig, TrainConfig), Failure> {
        let sft = SftConfig {
            epochs: self.sft_epochs,
            learning_rate: self.sft_learning_rate,
            noise_rate: self.noise,
            history: match self.sft_history {
                HistoryArg::Sampled => SftHistory::Sampled,
                HistoryArg::Target => SftHistory::Target,
            },
        };
        let train = TrainConfig {
            beta: self.beta,
            learning_rate: self.learning_rate,
            episodes: self.episodes,
            batch_size: self.batch_size,
            noise_rate: self.noise,
            seed,
            reward: self.reward.config()?,
            ..Default::default()
        };
        train.validate().map_err(invalid)?;
        Ok((sft, train))
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for policies, `trace.csv` and `summary.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1,2,8")]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Output directory for `sweep.csv` and `sweep.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Directory holding `graphs/*.toml` and `lexicons/*.toml`.
    #[arg(long)]
    config_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, default_value_t = pathwise_service::DEFAULT_MAX_BATCH)]
    max_batch: usize,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn invalid(e: impl Display) -> Failure {
    Failure { code: 1, error: anyhow!("{e}") }
}

fn io_error(e: impl Display) -> Failure {
    Failure { code: 2, error: anyhow!("{e}") }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| io_error(format!("reading {}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(format!("creating {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| io_error(format!("writing {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

struct Configs {
    graph: ReasoningGraph,
    lexicon: Lexicon,
    bank: TemplateBank,
    issues: Vec<String>,
}

impl RunConfig {
    fn load(&self) -> Result<Configs, Failure> {
        let graph = match &self.graph {
            Some(p) => ReasoningGraph::load(&read(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
            None => ReasoningGraph::bma_default(),
        };
        let lexicon = match &self.lexicon {
            Some(p) => Lexicon::load(&read(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
            None => Lexicon::bma_default(),
        };
        let bank = match &self.bank {
            Some(p) => TemplateBank::load(&read(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
            None => TemplateBank::bma_default(),
        };
        let issues = bank.validate(&graph, &lexicon).iter().map(ToString::to_string).collect();
        Ok(Configs { graph, lexicon, bank, issues })
    }
}

fn parse_counts(spec: &str) -> Result<BTreeMap<ClassLabel, usize>, Failure> {
    if spec == "paper-default" {
        return Ok(paper_default_counts());
    }
    let mut counts: BTreeMap<ClassLabel, usize> = ClassLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (label, n) = part
            .split_once('=')
            .ok_or_else(|| io_error(format!("--counts entry {part:?} is not label=n")))?;
        let label: ClassLabel = label.trim().parse().map_err(io_error)?;
        let n = n.trim().parse().map_err(|_| io_error(format!("--counts entry {part:?} has a bad count")))?;
        counts.insert(label, n);
    }
    Ok(counts)
}

fn load_dataset(path: &Path) -> Result<Vec<Conversation>, Failure> {
    from_jsonl(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serializable").as_bytes())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = cli.run.load()?;
    if let Command::Validate = cli.command {
        return validate(&cfg);
    }
    if !cfg.issues.is_empty() {
        return Err(invalid(format!("template bank failed validation:\n  {}", cfg.issues.join("\n  "))));
    }
    match cli.command {
        Command::Validate => unreachable!(),
        Command::Synth(a) => synth(&cfg, a),
        Command::Score(a) => score(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Compare(a) => compare(a),
        Command::Train(a) => train(&cfg, a),
        Command::Sweep(a) => sweep(&cfg, a),
        Command::Serve(a) => serve(a),
    }
}

fn validate(cfg: &Configs) -> Result<(), Failure> {
    let paths = cfg.graph.expand_paths();
    println!("pathwise {VERSION}");
    println!("graph {} ({}): {} concrete paths", cfg.graph.version(), cfg.graph.hash(), paths.len());
    for p in paths {
        let names: Vec<String> = p.categories().iter().map(ToString::to_string).collect();
        println!("  {}", names.join(" -> "));
    }
    println!("lexicon ({}): {} keyword rules", cfg.lexicon.hash(), cfg.lexicon.rules().len());
    println!("template bank {} ({})", cfg.bank.version(), cfg.bank.hash());
    if cfg.issues.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        for issue in &cfg.issues {
            println!("  FAIL {issue}");
        }
        Err(invalid(format!("{} template bank issue(s)", cfg.issues.len())))
    }
}

fn synth(cfg: &Configs, a: SynthArgs) -> Result<(), Failure> {
    let opts = SynthOptions {
        counts: parse_counts(&a.counts)?,
        split_fraction: a.split,
        seed: a.seed,
        scenario_mix: a.scenario_mix.parse::<ScenarioMix>().map_err(io_error)?,
    };
    let ds = synthesize_dataset(&cfg.graph, &cfg.bank, &opts).map_err(invalid)?;
    write(&a.out.join("dataset.jsonl"), &to_jsonl(&ds.conversations))?;
    write(&a.out.join("manifest.json"), &to_json(&ds.manifest))?;
    println!("{} conversations, dataset hash {}", ds.manifest.total, ds.manifest.dataset_hash);
    Ok(())
}

#[derive(Serialize)]
struct ScoreFile<'a> {
    toolkit_version: &'a str,
    graph_hash: &'a str,
    lexicon_hash: &'a str,
    dataset_hash: String,
    config_hash: String,
    reward_config: &'a RewardConfig,
    records: Vec<RecordScore>,
}

fn score(cfg: &Configs, a: ScoreArgs) -> Result<(), Failure> {
    let reward = a.reward.config()?;
    let dataset = load_dataset(&a.dataset)?;
    let preds = predictions_from_jsonl(&read(&a.predictions)?).map_err(invalid)?;
    let records = score_predictions(&cfg.graph, &cfg.lexicon, &dataset, &preds, &reward).map_err(invalid)?;
    let mean = records.iter().map(|r| r.breakdown.total).sum::<f64>() / records.len().max(1) as f64;
    let file = ScoreFile {
        toolkit_version: VERSION,
        graph_hash: cfg.graph.hash(),
        lexicon_hash: cfg.lexicon.hash(),
        dataset_hash: dataset_hash(&dataset),
        config_hash: reward.hash(),
        reward_config: &reward,
        records,
    };
    write(&a.out, &to_json(&file))?;
    println!("{} records scored, mean total {mean:.6}", file.records.len());
    Ok(())
}

fn eval(cfg: &Configs, a: EvalArgs) -> Result<(), Failure> {
    let reward = a.reward.config()?;
    let dataset = load_dataset(&a.dataset)?;
    let preds = predictions_from_jsonl(&read(&a.predictions)?).map_err(invalid)?;
    let report = evaluate_with_rewards(&cfg.graph, &cfg.lexicon, &dataset, &preds, &reward).map_err(invalid)?;
    write(&a.out.join("metrics.json"), &to_json(&report))?;
    write(&a.out.join("metrics.csv"), &report_to_csv(&report))?;
    let o = &report.overall;
    println!("a_q {:.4}  a_c {:.4}  a_d {:.4}  h_cc {:.4}  ({} conversations)", o.a_q, o.a_c, o.a_d, o.h_cc, o.n_conversations);
    Ok(())
}

fn compare(a: CompareArgs) -> Result<(), Failure> {
    let load = |p: &Path| -> Result<MetricsReport, Failure> {
        serde_json::from_str(&read(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))
    };
    let cmp = compare_reports(&load(&a.baseline)?, &load(&a.candidate)?).map_err(invalid)?;
    write(&a.out, &comparison_to_csv(&cmp))?;
    for r in cmp.rows.iter().filter(|r| r.slice == "overall") {
        println!("{:<5} {:+.1} points", r.metric, r.delta_points);
    }
    Ok(())
}

struct SimData {
    train: Vec<Conversation>,
    held_out: Vec<Conversation>,
    hash: String,
}

fn sim_data(path: &Path) -> Result<SimData, Failure> {
    let all = load_dataset(path)?;
    let hash = dataset_hash(&all);
    let (train, held_out): (Vec<_>, Vec<_>) = all.into_iter().partition(|c| c.split == Split::Train);
    if train.is_empty() || held_out.is_empty() {
        return Err(invalid("dataset needs conversations in both the train and eval splits"));
    }
    Ok(SimData { train, held_out, hash })
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    toolkit_version: &'a str,
    graph_hash: &'a str,
    dataset_hash: &'a str,
    config_hash: String,
    sft_config: &'a SftConfig,
    train_config: &'a TrainConfig,
    sft: ExpectedMetrics,
    rl: ExpectedMetrics,
}

fn train(cfg: &Configs, a: TrainArgs) -> Result<(), Failure> {
    let (sft_cfg, train_cfg) = a.sim.configs(a.seed)?;
    let data = sim_data(&a.sim.dataset)?;
    let sft = pretrain_sft(&PolicyLayout::full(), &data.train, &sft_cfg).map_err(invalid)?;
    let (policy, trace) = train_rl(&cfg.graph, &sft, &data.train, &data.held_out, &train_cfg).map_err(invalid)?;
    let weights = label_weights(&sft.layout, &data.held_out).map_err(invalid)?;
    let metrics = |p| {
        expected_metrics(&cfg.graph, p, Some(&sft), &weights, train_cfg.noise_rate, &train_cfg.reward).map_err(invalid)
    };
    let summary = TrainSummary {
        toolkit_version: VERSION,
        graph_hash: cfg.graph.hash(),
        dataset_hash: &data.hash,
        config_hash: config_hash(&(&sft_cfg, &train_cfg)),
        sft_config: &sft_cfg,
        train_config: &train_cfg,
        sft: metrics(&sft)?,
        rl: metrics(&policy)?,
    };
    let comment = format!("pathwise {VERSION} dataset {} config {}", data.hash, summary.config_hash);
    write(&a.out.join("sft_policy.json"), &sft.to_json())?;
    write(&a.out.join("policy.json"), &policy.to_json())?;
    write(&a.out.join("trace.csv"), &trace.to_csv(&comment))?;
    write(&a.out.join("summary.json"), &to_json(&summary))?;
    println!(
        "reward sft {:.4} -> rl {:.4}; a_q {:.4} -> {:.4}; h_cc {:.4} -> {:.4}; kl {:.4}",
        summary.sft.reward, summary.rl.reward, summary.sft.a_q, summary.rl.a_q, summary.sft.h_cc, summary.rl.h_cc,
        summary.rl.kl
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepFile<'a> {
    toolkit_version: &'a str,
    graph_hash: &'a str,
    dataset_hash: &'a str,
    config_hash: String,
    sft_config: &'a SftConfig,
    train_config: &'a TrainConfig,
    rows: &'a [SweepRow],
    medians: Vec<(f64, ExpectedMetrics)>,
}

fn sweep(cfg: &Configs, a: SweepArgs) -> Result<(), Failure> {
    let (sft_cfg, train_cfg) = a.sim.configs(0)?;
    let data = sim_data(&a.sim.dataset)?;
    let sft = pretrain_sft(&PolicyLayout::full(), &data.train, &sft_cfg).map_err(invalid)?;
    let rows = sweep_lambda(&cfg.graph, &sft, &data.train, &data.held_out, &a.lambdas, &a.seeds, &train_cfg)
        .map_err(invalid)?;
    let file = SweepFile {
        toolkit_version: VERSION,
        graph_hash: cfg.graph.hash(),
        dataset_hash: &data.hash,
        config_hash: config_hash(&(&sft_cfg, &train_cfg)),
        sft_config: &sft_cfg,
        train_config: &train_cfg,
        rows: &rows,
        medians: sweep_medians(&rows),
    };
    let comment = format!("pathwise {VERSION} dataset {} config {}", data.hash, file.config_hash);
    write(&a.out.join("sweep.csv"), &sweep_to_csv(&rows, &comment))?;
    write(&a.out.join("sweep.json"), &to_json(&file))?;
    for (lambda, m) in &file.medians {
        println!("lambda {lambda:<5} a_q {:.4}  h_cc {:.4}  reward {:.4}", m.a_q, m.h_cc, m.reward);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), Failure> {
    let registry = match &a.config_dir {
        Some(dir) => Registry::load_dir(dir).map_err(invalid)?,
        None => Registry::bma_default(),
    };
    let config = ServiceConfig { max_batch: a.max_batch, ..ServiceConfig::from_env() };
    let runtime = tokio::runtime::Runtime::new().map_err(io_error)?;
    runtime
        .block_on(pathwise_service::serve(a.bind, AppState::new(registry, config)))
        .map_err(|e| io_error(format!("serving on {}: {e}", a.bind)))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
