use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use stoprec::bundle::{load_model, load_sdae, load_structure, save_model, save_sdae, save_structure};
use stoprec::corpus::{
    build_queries, generate_planted_corpus, load_corpus_dir, load_graph, read_queries, save_graph, split_by_year,
    write_queries, CorpusFiles, HeteroGraph, PlantedConfig, VocabConfig, VocabSource, Vocabulary, QUERIES_FILE,
};
use stoprec::fusion::{train, train_with, write_trace_csv, TrainConfig};
use stoprec::graph_embedding::{generate_walks, train_structure_embeddings, StructureTraining, WalkConfig};
use stoprec::recommender::{advanced_naive_retrieval, evaluate, naive_retrieval, Model, Ranker};
use stoprec::text_autoencoder::{pretrain, SdaeConfig};
use stoprec::{serve, Error};

#[derive(Parser)]
#[command(
    name = "stoprec",
    version,
    about = "Query-based dataset recommendation over citation graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw corpus files, build the vocabulary and write a normalised corpus.
    Ingest(IngestArgs),
    /// Pretrain the text autoencoder.
    PretrainText(PretrainArgs),
    /// Pretrain the citation-structure embedding.
    PretrainGraph(PretrainArgs),
    /// Train the joint model.
    Train(TrainArgs),
    /// Rank datasets for a set of papers.
    Query(QueryArgs),
    /// Evaluate rankings against a query file.
    Eval(EvalArgs),
    /// Print the top words and datasets of each topic.
    Profile(ProfileArgs),
    /// Generate a synthetic corpus with planted topics.
    Synth(SynthArgs),
    /// Serve recommendations over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory with papers.jsonl, citations.tsv and links.tsv.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Minimum document frequency of a vocabulary word.
    #[arg(long, default_value_t = 3)]
    min_count: u32,
    /// Papers after this year become query sources instead of training papers.
    #[arg(long)]
    cutoff: Option<i32>,
}

/// Hyperparameters shared by the training commands; flags override `--config`.
#[derive(Args, Clone, Default)]
struct Hyper {
    /// File of `key = value` lines using the long flag names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_p: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_v: Option<f64>,
    #[arg(long)]
    lambda_w: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Outer iterations for `train`, passes over the data for pretraining.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
    /// Output of `pretrain-text`; pretrained inline when absent.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Output of `pretrain-graph`; pretrained inline when absent.
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Naive,
    Advanced,
}

#[derive(Args)]
struct Source {
    #[arg(long, required_unless_present = "baseline")]
    model: Option<PathBuf>,
    /// Use a link-frequency baseline over `--corpus` instead of a model.
    #[arg(long, value_enum, requires = "corpus", conflicts_with = "model")]
    baseline: Option<Baseline>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Citation hops for the advanced baseline.
    #[arg(long, default_value_t = 2)]
    hops: usize,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    source: Source,
    /// Comma-separated paper ids.
    #[arg(long, value_delimiter = ',', required = true)]
    papers: Vec<String>,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    /// A single topic; every topic when absent.
    #[arg(long)]
    topic: Option<usize>,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    topics: usize,
    #[arg(long, default_value_t = 200)]
    papers: usize,
    #[arg(long, default_value_t = 40)]
    datasets: usize,
    #[arg(long, default_value_t = 500)]
    vocab: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(Error::Json(e))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn read_config_file(path: &Path) -> CliResult<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
        out.insert(key.trim().replace('_', "-"), value.trim().to_string());
    }
    Ok(out)
}

struct Settings {
    hyper: Hyper,
    file: HashMap<String, String>,
}

impl Settings {
    fn new(hyper: &Hyper) -> CliResult<Self> {
        let file = match &hyper.config {
            Some(path) => read_config_file(path)?,
            None => HashMap::new(),
        };
        const KNOWN: &[&str] = &[
            "k", "lambda", "lambda-p", "lambda-d", "lambda-v", "lambda-w", "lr", "batch", "epochs", "mu", "seed",
        ];
        if let Some(key) = file.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(Failure::Usage(format!("unknown config key {key}")));
        }
        Ok(Self {
            hyper: hyper.clone(),
            file,
        })
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Failure::Usage(format!("config key {key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    fn k(&self) -> CliResult<usize> {
        Ok(self.get(self.hyper.k, "k")?.unwrap_or(16))
    }

    fn seed(&self) -> CliResult<u64> {
        Ok(self.get(self.hyper.seed, "seed")?.unwrap_or(0))
    }

    fn train_config(&self) -> CliResult<TrainConfig> {
        let h = &self.hyper;
        let mut cfg = TrainConfig::new(self.k()?).map_err(|e| Failure::Usage(e.to_string()))?;
        let w = &mut cfg.weights;
        w.lambda = self.get(h.lambda, "lambda")?.unwrap_or(w.lambda);
        w.lambda_p = self.get(h.lambda_p, "lambda-p")?.unwrap_or(w.lambda_p);
        w.lambda_d = self.get(h.lambda_d, "lambda-d")?.unwrap_or(w.lambda_d);
        w.lambda_v = self.get(h.lambda_v, "lambda-v")?.unwrap_or(w.lambda_v);
        w.lambda_w = self.get(h.lambda_w, "lambda-w")?.unwrap_or(w.lambda_w);
        cfg.lr = self.get(h.lr, "lr")?.unwrap_or(cfg.lr);
        cfg.batch_size = self.get(h.batch, "batch")?.unwrap_or(cfg.batch_size);
        cfg.outer_iters = self.get(h.epochs, "epochs")?.unwrap_or(cfg.outer_iters);
        cfg.mu = self.get(h.mu, "mu")?.unwrap_or(cfg.mu);
        cfg.seed = self.seed()?;
        cfg.sdae.batch_size = cfg.batch_size;
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn load_corpus(dir: &Path) -> CliResult<(HeteroGraph, Vocabulary)> {
    Ok(load_corpus_dir(dir, VocabConfig::default())?)
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> CliResult {
    let vocab = VocabSource::Build(VocabConfig {
        min_count: args.min_count,
    });
    let (graph, vocab) = load_graph(&CorpusFiles::in_dir(&args.corpus), vocab)?;
    info!(
        "{} papers, {} datasets, {} words, {} citations, {} dataset links",
        graph.num_papers(),
        graph.num_datasets(),
        vocab.len(),
        graph.citations().len(),
        graph.total_links()
    );
    let Some(cutoff) = args.cutoff else {
        save_graph(&graph, &vocab, &args.out)?;
        return Ok(());
    };
    let (train_graph, held_out) = split_by_year(&graph, cutoff)?;
    let built = build_queries(&train_graph, &held_out);
    save_graph(&train_graph, &vocab, &args.out)?;
    write_queries(&built.queries, &args.out.join(QUERIES_FILE))?;
    info!(
        "{} training papers, {} queries",
        train_graph.num_papers(),
        built.queries.len()
    );
    Ok(())
}

fn sdae_config(settings: &Settings) -> CliResult<SdaeConfig> {
    let h = &settings.hyper;
    let mut cfg = SdaeConfig::for_embedding_size(settings.k()?).map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.lr = settings.get(h.lr, "lr")?.unwrap_or(cfg.lr);
    cfg.batch_size = settings.get(h.batch, "batch")?.unwrap_or(cfg.batch_size);
    cfg.epochs = settings.get(h.epochs, "epochs")?.unwrap_or(cfg.epochs);
    cfg.weight_decay = settings.get(h.lambda_w, "lambda-w")?.unwrap_or(cfg.weight_decay);
    cfg.seed = settings.seed()?;
    Ok(cfg)
}

fn cmd_pretrain_text(args: PretrainArgs) -> CliResult {
    let settings = Settings::new(&args.hyper)?;
    let cfg = sdae_config(&settings)?;
    let (graph, _) = load_corpus(&args.corpus)?;
    let trained = pretrain(&graph, &cfg)?;
    if let Some(losses) = trained.layer_losses.last() {
        info!("final layer loss {:?}", losses.last());
    }
    save_sdae(&trained.params, &args.out)?;
    Ok(())
}

fn walk_config(settings: &Settings) -> CliResult<WalkConfig> {
    let mut cfg = WalkConfig::new(settings.k()? / 2);
    cfg.epochs = settings.get(settings.hyper.epochs, "epochs")?.unwrap_or(cfg.epochs);
    Ok(cfg)
}

fn cmd_pretrain_graph(args: PretrainArgs) -> CliResult {
    let settings = Settings::new(&args.hyper)?;
    let k = settings.k()?;
    if k == 0 || k % 2 != 0 {
        return Err(Failure::Usage(format!("--k must be even and positive, got {k}")));
    }
    let cfg = walk_config(&settings)?;
    let seed = settings.seed()?;
    let (graph, _) = load_corpus(&args.corpus)?;
    let trained = train_structure_embeddings(&graph, &cfg, seed)?;
    save_structure(&trained.embedding, seed, &args.out)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let settings = Settings::new(&args.hyper)?;
    let cfg = settings.train_config()?;
    let (graph, vocab) = load_corpus(&args.corpus)?;
    let trained = match (&args.text, &args.graph) {
        (None, None) => train(&graph, &cfg)?,
        _ => {
            let sdae = match &args.text {
                Some(dir) => load_sdae(dir)?,
                None => pretrain(&graph, &cfg.sdae)?.params,
            };
            let structure = match &args.graph {
                Some(dir) => {
                    let (embedding, seed) = load_structure(dir)?;
                    let walks = generate_walks(&graph, &cfg.walk, seed)?;
                    StructureTraining {
                        embedding,
                        walks,
                        objective_trace: Vec::new(),
                    }
                }
                None => train_structure_embeddings(&graph, &cfg.walk, cfg.seed)?,
            };
            train_with(&graph, &cfg, sdae, structure)?
        }
    };
    let trace = trained.trace.clone();
    let model = Model::from_training(&graph, vocab.words().to_vec(), trained, cfg.echo())?;
    save_model(&model, &args.out)?;
    let mut csv = Vec::new();
    write_trace_csv(&trace, &mut csv)?;
    fs::write(args.out.join("trace.csv"), csv)?;
    Ok(())
}

#[allow(clippy::large_enum_variant)]
enum Loaded {
    Model(Model),
    Graph(HeteroGraph, Baseline, usize),
}

impl Loaded {
    fn open(source: &Source) -> CliResult<Self> {
        match (&source.model, source.baseline) {
            (Some(dir), None) => Ok(Loaded::Model(load_model(dir)?)),
            (_, Some(kind)) => {
                let corpus = source
                    .corpus
                    .as_ref()
                    .ok_or_else(|| Failure::Usage("--baseline needs --corpus".into()))?;
                Ok(Loaded::Graph(load_corpus(corpus)?.0, kind, source.hops))
            }
            (None, None) => Err(Failure::Usage("either --model or --baseline is required".into())),
        }
    }

    fn ranker(&self) -> Ranker<'_> {
        match self {
            Loaded::Model(m) => Ranker::Model(m),
            Loaded::Graph(g, Baseline::Naive, _) => Ranker::Naive(g),
            Loaded::Graph(g, Baseline::Advanced, hops) => Ranker::Advanced(g, *hops),
        }
    }
}

fn cmd_query(args: QueryArgs) -> CliResult {
    match Loaded::open(&args.source)? {
        Loaded::Model(model) => print_json(&serve::recommend(&model, &args.papers, args.top)?),
        Loaded::Graph(graph, Baseline::Naive, _) => print_json(&naive_retrieval(&graph, &args.papers, args.top)?),
        Loaded::Graph(graph, Baseline::Advanced, hops) => {
            print_json(&advanced_naive_retrieval(&graph, &args.papers, args.top, hops)?)
        }
    }
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let loaded = Loaded::open(&args.source)?;
    let queries = read_queries(&args.queries)?;
    let report = evaluate(loaded.ranker(), &queries, args.k)?;
    match &args.out {
        Some(path) => report.write_csv(io::BufWriter::new(fs::File::create(path)?))?,
        None => report.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> CliResult {
    let model = load_model(&args.model)?;
    let topics: Vec<usize> = match args.topic {
        Some(t) => vec![t],
        None => (0..model.num_topics()).collect(),
    };
    let profiles = topics
        .into_iter()
        .map(|t| model.topic_profile(t, args.top))
        .collect::<Result<Vec<_>, _>>()?;
    print_json(&profiles)
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let cfg = PlantedConfig::new(args.topics, args.papers, args.datasets, args.vocab, args.seed);
    let corpus = generate_planted_corpus(&cfg)?;
    let train_graph = corpus.train_graph()?;
    save_graph(&train_graph, &corpus.vocab, &args.out)?;
    write_queries(&corpus.queries, &args.out.join(QUERIES_FILE))?;
    info!(
        "{} training papers, {} queries",
        train_graph.num_papers(),
        corpus.queries.len()
    );
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> CliResult {
    let model = load_model(&args.model)?;
    serve::run(model, SocketAddr::new(args.host, args.port))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::PretrainText(a) => cmd_pretrain_text(a),
        Command::PretrainGraph(a) => cmd_pretrain_graph(a),
        Command::Train(a) => cmd_train(a),
        Command::Query(a) => cmd_query(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let msg = one_line(&e.to_string());
            eprintln!("ERROR: {}", msg.strip_prefix("error: ").unwrap_or(&msg));
            return ExitCode::from(2);
        }
        Err(e) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STOPREC_LOG", "warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("ERROR: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("ERROR: {}", one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
