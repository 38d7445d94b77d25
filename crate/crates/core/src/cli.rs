use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kg_order::analysis::{
    baseline_policy, diagnose, evaluate, sample_traces, BaselineKind, EvalConfig, UniformPolicy,
};
use kg_order::embedding::{init_one_hot, init_random, pretrain_link_embeddings, EmbeddingTable};
use kg_order::graph::{KnowledgeGraph, TripleDialect};
use kg_order::policy::{load_checkpoint, save_checkpoint, Model, PolicyDims, PolicyParameters};
use kg_order::query::{
    fanout_world, generate_conjunctions, read_queries, split_queries, write_queries, FanoutBias,
    FanoutWorldConfig, GenerateConfig, StructuredQuery,
};
use kg_order::trainer::{format_metrics, train, Policy, TrainConfig, METRICS_HEADER};
use kg_order::Error;

#[derive(Parser, Debug)]
#[command(name = "kg-order", version, about = "Learn the order of sub-question expansion on a knowledge graph")]
pub struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate conjunction queries and a train/test split.
    Generate(GenerateArgs),
    /// Train a policy and write a checkpoint plus metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on test queries.
    Eval(EvalArgs),
    /// Per-step error, entropy and risk diagnostics for a policy.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug, Serialize)]
struct GraphArgs {
    /// Tab-separated triple file, one `head relation tail` per line.
    #[arg(long)]
    graph: PathBuf,
    /// Add an `<r>_inv` edge for every triple.
    #[arg(long)]
    add_inverse: bool,
}

impl GraphArgs {
    fn load(&self) -> kg_order::Result<KnowledgeGraph> {
        KnowledgeGraph::load(
            &self.graph,
            TripleDialect {
                add_inverse: self.add_inverse,
            },
        )
    }
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    /// Triple file; omit with --fanout-world.
    #[arg(long, required_unless_present = "fanout_world", conflicts_with = "fanout_world")]
    graph: Option<PathBuf>,
    #[arg(long)]
    add_inverse: bool,
    /// Build the synthetic low/high fanout world and write it as graph.tsv.
    #[arg(long)]
    fanout_world: bool,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 2)]
    max_chain_len: usize,
    #[arg(long, default_value_t = 2)]
    anchors: usize,
    #[arg(long, default_value_t = 0.25)]
    test_frac: f64,
    /// Require one anchor with out-degree at most this value.
    #[arg(long, requires = "fanout_high")]
    fanout_low: Option<usize>,
    /// Require one anchor with out-degree at least this value.
    #[arg(long, requires = "fanout_low")]
    fanout_high: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum EmbeddingInit {
    OneHot,
    Random,
    Pretrain,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Training queries.
    #[arg(long)]
    train: PathBuf,
    /// Embedding table file; overrides --embedding-init.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EmbeddingInit::OneHot)]
    embedding_init: EmbeddingInit,
    #[arg(long, default_value_t = 16)]
    entity_dim: usize,
    /// Relation width for random init (one-hot uses the relation count,
    /// pretraining uses the entity width).
    #[arg(long, default_value_t = 16)]
    relation_dim: usize,
    #[arg(long, default_value_t = 50)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    head_dim: usize,
    #[arg(long, default_value_t = 32)]
    lstm_hidden: usize,
    #[arg(long, default_value_t = 64)]
    policy_hidden: usize,
    /// Defaults to the largest anchor count in the training queries.
    #[arg(long)]
    max_subgraphs: Option<usize>,
    /// Attention temperature.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Query-reduction strength.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 8)]
    rollouts: usize,
    #[arg(long, default_value_t = 0.1)]
    k_var: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_util: f64,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    /// Expansion cap; defaults to the slot count plus one.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    baseline_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test queries.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 10)]
    beam_width: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    lambda_util: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AnalyzeArgs {
    #[command(flatten)]
    graph: GraphArgs,
    /// Supplies the embeddings and reduction strength, and the policy itself for `model`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// `model`, `uniform`, or a baseline: random-order, fixed-order, greedy-local.
    #[arg(long, default_value = "model")]
    policy: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    lambda_util: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    command: &'a str,
    workers: usize,
    args: &'a T,
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> kg_order::Result<()> {
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn prepare_out<T: Serialize>(dir: &Path, command: &str, workers: usize, args: &T) -> kg_order::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let echo = Echo { command, workers, args };
    let text = serde_json::to_string_pretty(&echo).expect("config serialises");
    write_file(&dir.join("config.json"), text + "\n")
}

fn load_queries(path: &Path, g: &KnowledgeGraph) -> kg_order::Result<Vec<StructuredQuery>> {
    let loaded = read_queries(path, g)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(loaded.queries)
}

fn cmd_generate(a: &GenerateArgs, workers: usize) -> kg_order::Result<()> {
    prepare_out(&a.out, "generate", workers, a)?;
    let g = match &a.graph {
        Some(path) => KnowledgeGraph::load(
            path,
            TripleDialect {
                add_inverse: a.add_inverse,
            },
        )?,
        None => {
            let g = fanout_world(&FanoutWorldConfig::default(), a.seed)?;
            g.write_tsv(a.out.join("graph.tsv"))?;
            g
        }
    };
    let cfg = GenerateConfig {
        count: a.count,
        max_chain_len: a.max_chain_len,
        n_anchors: a.anchors,
        seed: a.seed,
        fanout_bias: a
            .fanout_low
            .zip(a.fanout_high)
            .map(|(low_max, high_min)| FanoutBias { low_max, high_min }),
    };
    let out = generate_conjunctions(&g, &cfg)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    if out.queries.is_empty() {
        eprintln!("warning: no queries generated; writing empty files");
    }
    let (train, test) = if out.queries.len() < 2 {
        (out.queries.clone(), Vec::new())
    } else {
        let s = split_queries(&out.queries, a.test_frac, a.seed)?;
        (s.train, s.test)
    };
    write_queries(a.out.join("queries.tsv"), &g, &out.queries)?;
    write_queries(a.out.join("train.tsv"), &g, &train)?;
    write_queries(a.out.join("test.tsv"), &g, &test)?;
    let manifest = serde_json::json!({
        "seed": a.seed,
        "generate": cfg,
        "test_frac": a.test_frac,
        "fanout_world": a.fanout_world.then(FanoutWorldConfig::default),
        "queries": out.queries.len(),
        "train": train.len(),
        "test": test.len(),
        "warnings": out.warnings,
    });
    write_file(
        &a.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n",
    )?;
    println!("{} queries: {} train, {} test", out.queries.len(), train.len(), test.len());
    Ok(())
}

fn embeddings_for(a: &TrainArgs, g: &KnowledgeGraph) -> kg_order::Result<EmbeddingTable> {
    if let Some(path) = &a.embeddings {
        let table = EmbeddingTable::load(path)?;
        table.check_graph(g)?;
        return Ok(table);
    }
    match a.embedding_init {
        EmbeddingInit::OneHot => init_one_hot(g, a.entity_dim, a.seed),
        EmbeddingInit::Random => init_random(g, a.entity_dim, a.relation_dim, a.seed),
        EmbeddingInit::Pretrain => Ok(pretrain_link_embeddings(g, a.entity_dim, a.pretrain_epochs, a.seed)?.table),
    }
}

fn cmd_train(a: &TrainArgs, workers: usize) -> kg_order::Result<()> {
    prepare_out(&a.out, "train", workers, a)?;
    let g = a.graph.load()?;
    let queries = load_queries(&a.train, &g)?;
    if queries.is_empty() {
        return Err(Error::NoQueries);
    }
    let embeddings = embeddings_for(a, &g)?;
    let dims = PolicyDims {
        entity_dim: embeddings.entity_dim(),
        relation_dim: embeddings.relation_dim(),
        heads: a.heads,
        head_dim: a.head_dim,
        lstm_hidden: a.lstm_hidden,
        policy_hidden: a.policy_hidden,
        max_subgraphs: a
            .max_subgraphs
            .unwrap_or_else(|| queries.iter().map(|q| q.anchors.len()).max().unwrap_or(1)),
    };
    let model = Model::new(PolicyParameters::init(dims, a.tau, a.eta, a.seed)?, embeddings)?;
    let cfg = TrainConfig {
        iterations: a.iterations,
        batch_size: a.batch_size,
        rollouts_per_query: a.rollouts,
        k_var: a.k_var,
        lambda_util: a.lambda_util,
        learning_rate: a.learning_rate,
        beta1: a.beta1,
        beta2: a.beta2,
        epsilon: a.epsilon,
        max_steps: a.max_steps,
        baseline_decay: a.baseline_decay,
        seed: a.seed,
    };
    let effective = serde_json::json!({ "dims": dims, "train": cfg });
    write_file(
        &a.out.join("effective.json"),
        serde_json::to_string_pretty(&effective).expect("config serialises") + "\n",
    )?;
    let split = kg_order::query::QuerySplit {
        train: queries,
        test: Vec::new(),
        seed: a.seed,
    };
    let metrics_path = a.out.join("metrics.csv");
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::Io {
        path: metrics_path.clone(),
        source: e,
    })?;
    writeln!(log, "{METRICS_HEADER}").map_err(|e| Error::Io {
        path: metrics_path.clone(),
        source: e,
    })?;
    let mut io_error = None;
    let outcome = train(&g, &split, model, &cfg, |row| {
        let line = format_metrics(std::slice::from_ref(row));
        let body = line.lines().nth(1).unwrap_or_default();
        if io_error.is_none() {
            if let Err(e) = writeln!(log, "{body}") {
                io_error = Some(e);
            }
        }
        if row.iteration % 50 == 0 {
            eprintln!(
                "iteration {} mean_reward {:.4} variance {:.4}",
                row.iteration, row.mean_reward, row.reward_variance
            );
        }
    })?;
    if let Some(e) = io_error {
        return Err(Error::Io {
            path: metrics_path,
            source: e,
        });
    }
    save_checkpoint(&outcome.model, a.out.join("model.ckpt"))?;
    println!("trained {} iterations; checkpoint {}", cfg.iterations, a.out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, workers: usize) -> kg_order::Result<()> {
    prepare_out(&a.out, "eval", workers, a)?;
    let g = a.graph.load()?;
    let model = load_checkpoint(&a.checkpoint)?;
    model.embeddings.check_graph(&g)?;
    let queries = load_queries(&a.test, &g)?;
    let cfg = EvalConfig {
        beam_width: a.beam_width,
        trials: a.trials,
        seed: a.seed,
        max_steps: a.max_steps,
        lambda_util: a.lambda_util,
        baselines: BaselineKind::ALL.to_vec(),
    };
    let report = evaluate(&model, &g, &queries, &cfg)?;
    report.write_to(&a.out)?;
    println!("{}", report.summary());
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs, workers: usize) -> kg_order::Result<()> {
    prepare_out(&a.out, "analyze", workers, a)?;
    let g = a.graph.load()?;
    let model = load_checkpoint(&a.checkpoint)?;
    model.embeddings.check_graph(&g)?;
    let queries = load_queries(&a.queries, &g)?;
    if queries.is_empty() {
        return Err(Error::NoQueries);
    }
    if a.trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let eta = model.params.eta;
    let baseline;
    let policy: &dyn Policy = match a.policy.as_str() {
        "model" => &model,
        "uniform" => &UniformPolicy,
        name => {
            baseline = baseline_policy(name, &model.embeddings, eta)?;
            &baseline
        }
    };
    let traces = sample_traces(policy, &g, &queries, a.trials, a.seed, a.max_steps, a.lambda_util)?;
    let d = diagnose(&g, &model.embeddings, eta, &queries, &traces)?;
    let mut per_step = String::from("step,error_rate,entropy\n");
    for t in 0..d.error_rate.len().max(d.entropy.len()) {
        let cell = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
        per_step.push_str(&format!("{},{},{}\n", t + 1, cell(d.error_rate.get(t)), cell(d.entropy.get(t))));
    }
    let mut risk = String::from("bucket,subgraph,risk\n");
    for ((bucket, sg), r) in &d.risk {
        risk.push_str(&format!("{bucket},{sg},{r}\n"));
    }
    write_file(&a.out.join("per_step.csv"), per_step)?;
    write_file(&a.out.join("risk.csv"), risk)?;
    println!(
        "{}: sampled hits@1={:.4} reward variance={:.4}",
        a.policy, d.hits1, d.reward_variance
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
        eprintln!("error: worker pool: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a, workers),
        Command::Train(a) => cmd_train(a, workers),
        Command::Eval(a) => cmd_eval(a, workers),
        Command::Analyze(a) => cmd_analyze(a, workers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
