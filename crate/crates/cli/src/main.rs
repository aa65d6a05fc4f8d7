use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use slfm::analysis::{
    activated_communities, export_latent_structure, geodesic_breakdown, label_propagation, modularity, EntityGraph,
};
use slfm::checkpoint::Checkpoint;
use slfm::evaluator::{evaluate, parse_ranks_tsv};
use slfm::kgstore::{build_filter_index, load_dataset, LoadOptions};
use slfm::latent::{prior_active_stats, Role, TruncationConfig};
use slfm::noise::{NoiseStream, Purpose};
use slfm::trainer::{load_run_dataset, train, RunDir};
use slfm::{HeadKind, KnowledgeGraph, Model, RunConfig, Split};

#[derive(Parser)]
#[command(name = "slfm", version, about = "Sparse latent feature models for knowledge graph completion")]
struct Cli {
    /// Worker threads for ranking and encoding (default: all cores).
    #[arg(long, global = true, env = "SLFM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config, checkpoints, metric log and test report.
    Train(TrainArgs),
    /// Rank a split with a checkpoint.
    Eval(EvalArgs),
    /// Structural analyses of a dataset or checkpoint.
    Analyze {
        #[command(subcommand)]
        which: Analysis,
    },
    /// Monte-Carlo statistics of the stick-breaking prior.
    SamplePrior(PriorArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `objective.beta=1e-2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to `output.dir` from the config.
    #[arg(long, env = "SLFM_OUTPUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Also write per-query ranks as TSV.
    #[arg(long)]
    dump_ranks: bool,
    /// Report directory; defaults to the run's `reports/`.
    #[arg(long, env = "SLFM_OUTPUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Source {
    /// Checkpoint to analyze.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory or a name under `data/`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Report directory; defaults to the run's `reports/` or `./reports`.
    #[arg(long, env = "SLFM_OUTPUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analysis {
    /// Mean number of active answer communities per entity.
    Communities {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Label propagation on the training graph and its modularity.
    Modularity {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Hit@k by head-tail distance in the training graph.
    Geodesic {
        #[command(flatten)]
        source: Source,
        /// Ranks TSV written by `eval --dump-ranks`.
        #[arg(long)]
        ranks: Option<PathBuf>,
    },
    /// Answer strengths sorted by community strength, with top entities.
    Latent {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, default_value_t = 16)]
        communities: usize,
    },
}

#[derive(Args)]
struct PriorArgs {
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    #[arg(long, default_value_t = 128)]
    k: usize,
    #[arg(long, default_value_t = 100_000)]
    rows: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze { which } => cmd_analyze(which),
        Command::SamplePrior(a) => cmd_sample_prior(a),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut overrides = a.overrides;
    if let Some(seed) = a.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let mut cfg = RunConfig::load(&a.config, &overrides)?;
    if let Ok(abs) = cfg.dataset.path.canonicalize() {
        cfg.dataset.path = abs;
    }
    if let Some(out) = a.out {
        cfg.output.dir = out;
    }
    if cfg.output.dir.as_os_str().is_empty() {
        bail!("no run directory: set output.dir or pass --out");
    }
    cfg.validate()?;
    let kg = load_run_dataset(&cfg)?;
    let dir = RunDir::create(&cfg.output.dir)?;
    println!(
        "{} entities, {} relations, {} train triples -> {}",
        kg.num_entities(),
        kg.num_base_relations(),
        kg.split(Split::Train).len(),
        dir.root.display()
    );
    let outcome = train(&kg, &cfg, Some(&dir), |e| {
        let valid = e
            .valid
            .map(|m| format!(" valid mrr {:.4} hit@10 {:.4}", m.mrr, m.hit10))
            .unwrap_or_default();
        println!("epoch {:>3} loss {:>12.4} completion {:>12.4}{valid}", e.epoch, e.train_total, e.train_completion);
    })?;
    if !kg.split(Split::Test).is_empty() {
        let report = evaluate(&outcome.best, &kg, Split::Test, &build_filter_index(&kg))?;
        write(&dir.reports().join("test.json"), &report.to_json()?)?;
        write(&dir.reports().join("test.txt"), &report.to_text())?;
        print!("{}", report.to_text());
    }
    Ok(())
}

/// Run directory of a checkpoint stored under `<run>/checkpoints/`.
fn run_root(checkpoint: &Path) -> Option<PathBuf> {
    let parent = checkpoint.parent()?;
    (parent.file_name()? == "checkpoints").then(|| parent.parent().map(Path::to_path_buf))?
}

fn report_dir(out: Option<&Path>, checkpoint: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).or_else(|| checkpoint.and_then(run_root).map(|r| r.join("reports")))
        .unwrap_or_else(|| PathBuf::from("reports"))
}

fn load_checkpoint(path: &Path, dataset: Option<&Path>) -> Result<(KnowledgeGraph, Model)> {
    let ck = Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let mut cfg = ck.config.clone();
    if let Some(d) = dataset {
        cfg.dataset.path = resolve_dataset(d);
    }
    let kg = load_run_dataset(&cfg)?;
    let model = ck.into_model(&kg)?;
    Ok((kg, model))
}

/// Accepts a directory or a bare dataset name under `data/`.
fn resolve_dataset(arg: &Path) -> PathBuf {
    if arg.is_dir() {
        return arg.to_path_buf();
    }
    let named = Path::new("data").join(arg);
    if named.is_dir() {
        named
    } else {
        arg.to_path_buf()
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (kg, model) = load_checkpoint(&a.checkpoint, a.dataset.as_deref())?;
    let report = evaluate(&model, &kg, a.split, &build_filter_index(&kg))?;
    let dir = report_dir(a.out.as_deref(), Some(&a.checkpoint));
    let name = a.split.name();
    write(&dir.join(format!("{name}.json")), &report.to_json()?)?;
    write(&dir.join(format!("{name}.txt")), &report.to_text())?;
    if a.dump_ranks {
        write(&dir.join(format!("{name}_ranks.tsv")), &report.ranks_tsv(&kg))?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn dataset_only(source: &Source) -> Result<KnowledgeGraph> {
    match (&source.dataset, &source.checkpoint) {
        (Some(d), _) => {
            let dir = resolve_dataset(d);
            if !dir.is_dir() {
                bail!("dataset directory {} does not exist", dir.display());
            }
            Ok(load_dataset(&dir, LoadOptions::default())?)
        }
        (None, Some(ck)) => Ok(load_checkpoint(ck, None)?.0),
        (None, None) => bail!("missing input: pass --dataset or --checkpoint"),
    }
}

fn with_checkpoint(source: &Source) -> Result<(KnowledgeGraph, Model, &Path)> {
    let Some(ck) = source.checkpoint.as_deref() else {
        bail!("missing input: --checkpoint is required");
    };
    let (kg, model) = load_checkpoint(ck, source.dataset.as_deref())?;
    Ok((kg, model, ck))
}

fn cmd_analyze(which: Analysis) -> Result<()> {
    match which {
        Analysis::Communities { source, threshold } => {
            let (kg, model, ck) = with_checkpoint(&source)?;
            if model.head_kind() != HeadKind::Sparse {
                bail!("activated communities need a sparse-head checkpoint");
            }
            let entities: Vec<usize> = (0..kg.num_entities()).collect();
            let (_, z) = model.answer_latents(&kg, &entities)?;
            let mean = activated_communities(&z.expect("sparse head yields memberships"), threshold)?;
            let json = serde_json::json!({ "threshold": threshold, "k": model.k(), "activated": mean });
            write(&report_dir(source.out.as_deref(), Some(ck)).join("communities.json"), &json.to_string())?;
            println!("activated communities per entity: {mean:.4} (K = {}, threshold {threshold})", model.k());
        }
        Analysis::Modularity { source, gamma, seed } => {
            let kg = dataset_only(&source)?;
            let graph = EntityGraph::from_train(&kg);
            let assignment = label_propagation(&graph, seed);
            let q = modularity(&graph, &assignment, gamma)?;
            let dir = report_dir(source.out.as_deref(), source.checkpoint.as_deref());
            let json = serde_json::json!({
                "nodes": graph.num_nodes(),
                "edges": graph.num_edges(),
                "communities": assignment.num_communities(),
                "gamma": gamma,
                "seed": seed,
                "modularity": q,
            });
            write(&dir.join("modularity.json"), &serde_json::to_string_pretty(&json)?)?;
            write(&dir.join("label_propagation.tsv"), &assignment.to_tsv(&kg))?;
            println!(
                "modularity {q:.4} ({} communities, {} nodes, {} edges)",
                assignment.num_communities(),
                graph.num_nodes(),
                graph.num_edges()
            );
        }
        Analysis::Geodesic { source, ranks } => {
            let Some(ranks) = ranks else {
                bail!("missing input: --ranks <TSV from `eval --dump-ranks`>");
            };
            let kg = dataset_only(&source)?;
            let text = fs::read_to_string(&ranks).with_context(|| format!("reading {}", ranks.display()))?;
            let records = parse_ranks_tsv(&kg, &text)?;
            let breakdown = geodesic_breakdown(&kg, &records)?;
            let tsv = breakdown.to_tsv();
            write(&report_dir(source.out.as_deref(), source.checkpoint.as_deref()).join("geodesic.tsv"), &tsv)?;
            print!("{tsv}");
        }
        Analysis::Latent {
            source,
            top,
            communities,
        } => {
            let (kg, model, ck) = with_checkpoint(&source)?;
            let entities: Vec<usize> = (0..kg.num_entities()).collect();
            let (f, _) = model.answer_latents(&kg, &entities)?;
            let s = export_latent_structure(&f, &kg, top, communities)?;
            let dir = report_dir(source.out.as_deref(), Some(ck));
            write(&dir.join("latent_sorted.csv"), &s.to_csv(&kg))?;
            write(&dir.join("communities.tsv"), &s.listings_tsv())?;
            print!("{}", s.to_text());
        }
    }
    Ok(())
}

fn cmd_sample_prior(a: PriorArgs) -> Result<()> {
    let cfg = TruncationConfig {
        k: a.k,
        alpha_ans: a.alpha,
        ..TruncationConfig::default()
    };
    let mut rng = NoiseStream::new(a.seed).rng(Purpose::PriorSample, 0);
    let s = prior_active_stats(&cfg, Role::Answer, a.rows, &mut rng)?;
    println!(
        "alpha {} K {} rows {}: mean active {:.4} (se {:.4}), expected {:.4}",
        a.alpha, a.k, s.rows, s.mean, s.std_error, s.expected
    );
    Ok(())
}
