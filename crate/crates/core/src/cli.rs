//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::convert::{convert_kvret, convert_tsv};
use crate::dataset::{examples, load_corpus, tokenize, Domain};
use crate::embeddings::StaticEmbeddings;
use crate::error::{Error, Result};
use crate::eval::{evaluate, load_link_rows, relation_link_accuracy};
use crate::graph::{relation_link, similarity_link};
use crate::kg::KnowledgeGraph;
use crate::model::KgirNet;
use crate::service::{self, AppState, ServiceConfig};
use crate::training::{Preset, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "kgirnet", version, about = "Knowledge-graph grounded dialogue generation")]
pub struct Cli {
    /// Seed for every source of randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Base directory for relative paths.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert raw corpora into the JSON-lines format (and a KG for kvret input).
    ConvertCorpus(ConvertArgs),
    /// Train a model from a JSON job file.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Rank the relations around an entity for a question.
    RelationLink(LinkArgs),
    /// Interactive terminal chat over a checkpoint.
    Chat(ChatArgs),
    /// Serve the chat HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InputFormat {
    /// kvret-style JSON with per-dialogue knowledge tables.
    Kvret,
    /// Flat TSV: dialogue id, speaker, utterance, entity, relations.
    Tsv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DomainArg {
    InCar,
    Soccer,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::InCar => Domain::InCar,
            DomainArg::Soccer => Domain::Soccer,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long, value_enum)]
    pub format: InputFormat,
    /// Input files; one output corpus is written per input.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Required for TSV input.
    #[arg(long, value_enum)]
    pub domain: Option<DomainArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON job file (paths, domain, preset, hyperparameters).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the job's preset.
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides the job's output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus file in JSON-lines format.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "in-car")]
    pub domain: DomainArg,
    /// Write the full report (with per-example records) as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub beam_width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    #[arg(long)]
    pub kg: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, requires = "query", conflicts_with = "tsv")]
    pub entity: Option<String>,
    #[arg(long, requires = "entity")]
    pub query: Option<String>,
    /// Score a `query<TAB>entity<TAB>relation` file instead of one question.
    #[arg(long, required_unless_present = "entity")]
    pub tsv: Option<PathBuf>,
    #[arg(short, default_value_t = 2)]
    pub k: usize,
    /// Rank by raw similarity without propagation.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Print the intermediate response and provenance after each reply.
    #[arg(long)]
    pub provenance: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Sub-graph radius override.
    #[arg(short)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 3600)]
    pub session_ttl_secs: u64,
}

/// A training job: data locations plus hyperparameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub kg: PathBuf,
    pub embeddings: PathBuf,
    pub train: PathBuf,
    #[serde(default)]
    pub valid: Option<PathBuf>,
    pub domain: Domain,
    pub output: PathBuf,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub config: TrainConfig,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let at = |p: &Path| resolve(&cli.workdir, p);
    match &cli.command {
        Command::ConvertCorpus(a) => convert(a, &at),
        Command::Train(a) => train(a, cli.seed, &cli.workdir),
        Command::Eval(a) => {
            let mut model = KgirNet::load(at(&a.checkpoint))?;
            if let Some(w) = a.beam_width {
                model.config.beam_width = w;
            }
            let dialogues = load_corpus(at(&a.data), a.domain.into(), &model.kg)?;
            let report = evaluate(&model, &examples(&dialogues, &model.kg))?;
            if let Some(path) = &a.report {
                let path = at(path);
                fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "bleu": report.bleu,
                    "entity_f1": report.entity_f1,
                    "meteor": report.meteor,
                    "entity_accuracy": report.entity_accuracy,
                    "examples": report.examples,
                    "kg_grounded": report.kg_grounded,
                })
            );
            Ok(())
        }
        Command::RelationLink(a) => link(a, &at),
        Command::Chat(a) => {
            let mut model = KgirNet::load(at(&a.checkpoint))?;
            if let Some(w) = a.beam_width {
                model.config.beam_width = w;
            }
            chat(&model, a.provenance, std::io::stdin().lock(), std::io::stdout().lock())
        }
        Command::Serve(a) => {
            let mut model = KgirNet::load(at(&a.checkpoint))?;
            if let Some(k) = a.k {
                model.config.k = k;
            }
            let config = ServiceConfig {
                session_ttl: Duration::from_secs(a.session_ttl_secs),
                beam_width: a.beam_width.unwrap_or(model.config.beam_width),
            };
            let addr: SocketAddr = format!("{}:{}", a.host, a.port)
                .parse()
                .map_err(|e| Error::Config(format!("bad listen address: {e}")))?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            runtime
                .block_on(service::serve(AppState::new(model, config), addr))
                .map_err(|e| Error::io(addr.to_string(), e))
        }
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
}

fn convert(a: &ConvertArgs, at: &dyn Fn(&Path) -> PathBuf) -> Result<()> {
    let out = at(&a.output_dir);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let inputs: Vec<PathBuf> = a.input.iter().map(|p| at(p)).collect();
    let texts = inputs
        .iter()
        .map(|p| fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .collect::<Result<Vec<_>>>()?;
    let write = |path: PathBuf, text: &str| fs::write(&path, text).map_err(|e| Error::io(&path, e));
    match a.format {
        InputFormat::Kvret => {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let converted = convert_kvret(&refs)?;
            let kg = KnowledgeGraph::from_triples(converted.triples.iter().map(|(s, r, o)| (s.as_str(), r.as_str(), o.as_str())));
            kg.save(out.join("kg.tsv"))?;
            for (input, corpus) in inputs.iter().zip(&converted.corpora) {
                write(out.join(format!("{}.jsonl", file_stem(input))), corpus)?;
            }
            println!("wrote {} triples and {} corpora to {}", kg.num_triples(), inputs.len(), out.display());
        }
        InputFormat::Tsv => {
            let domain = a
                .domain
                .ok_or_else(|| Error::Config("--domain is required for tsv input".into()))?;
            for (input, text) in inputs.iter().zip(&texts) {
                write(out.join(format!("{}.jsonl", file_stem(input))), &convert_tsv(text, domain.into())?)?;
            }
            println!("wrote {} corpora to {}", inputs.len(), out.display());
        }
    }
    Ok(())
}

fn train(a: &TrainArgs, seed: Option<u64>, workdir: &Path) -> Result<()> {
    let path = resolve(workdir, &a.config);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut job: TrainJob = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if a.preset.is_some() {
        job.preset = a.preset.clone();
    }
    if let Some(s) = seed {
        job.config.seed = s;
    }
    if a.max_steps.is_some() {
        job.config.max_steps = a.max_steps;
    }
    if let Some(out) = &a.output {
        job.output = out.clone();
    }
    let summary = run_job(&job, workdir)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// What a finished training job reports.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub output: PathBuf,
    pub epochs: usize,
    pub steps: usize,
    pub final_train_loss: Option<f64>,
    pub best_valid_entity_f1: Option<f64>,
}

/// Runs a training job; relative paths in the job resolve against `workdir`.
pub fn run_job(job: &TrainJob, workdir: &Path) -> Result<TrainSummary> {
    let at = |p: &Path| resolve(workdir, p);
    let mut config = job.config.clone();
    if let Some(name) = &job.preset {
        let preset = Preset::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown preset `{name}` (known: {})", known.join(", ")))
        })?;
        config = preset.apply(config);
    }
    let output = at(&job.output);
    let kg = KnowledgeGraph::load(at(&job.kg))?;
    let embeddings = StaticEmbeddings::load(at(&job.embeddings))?;
    let train_set = examples(&load_corpus(at(&job.train), job.domain, &kg)?, &kg);
    let valid_set = match &job.valid {
        Some(p) => examples(&load_corpus(at(p), job.domain, &kg)?, &kg),
        None => Vec::new(),
    };
    let outcome = Trainer::new(config)
        .with_output(&output)
        .train(kg, embeddings, &train_set, &valid_set)?;
    Ok(TrainSummary {
        output,
        epochs: outcome.history.len(),
        steps: outcome.step_losses.len(),
        final_train_loss: outcome.history.last().map(|m| m.train_loss),
        best_valid_entity_f1: outcome.best_entity_f1,
    })
}

fn link(a: &LinkArgs, at: &dyn Fn(&Path) -> PathBuf) -> Result<()> {
    let kg = KnowledgeGraph::load(at(&a.kg))?;
    let emb = StaticEmbeddings::load(at(&a.embeddings))?;
    let linker = |q: &[String], e| {
        if a.baseline {
            similarity_link(q, &kg, e, a.k, &emb)
        } else {
            relation_link(q, &kg, e, a.k, &emb)
        }
    };
    if let Some(tsv) = &a.tsv {
        let rows = load_link_rows(at(tsv))?;
        let report = relation_link_accuracy(&rows, &kg, linker)?;
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }
    let (Some(entity), Some(query)) = (&a.entity, &a.query) else {
        return Err(Error::Config("pass --entity and --query, or --tsv".into()));
    };
    let e = kg.require_entity(entity)?;
    for r in linker(&tokenize(query), e)?.into_iter().take(a.top) {
        println!("{}\t{:.6}", r.label, r.score);
    }
    Ok(())
}

/// Line-based chat loop. `/reset` clears the context, `/quit` or end of input exits.
pub fn chat(model: &KgirNet, provenance: bool, input: impl BufRead, mut out: impl Write) -> Result<()> {
    let io = |e| Error::io("stdout", e);
    let mut history: Vec<Vec<String>> = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("stdin", e))?;
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                history.clear();
                writeln!(out, "(context cleared)").map_err(io)?;
                continue;
            }
            _ => {}
        }
        let query = tokenize(text);
        let g = model.generate(&history, &query)?;
        writeln!(out, "{}", g.text()).map_err(io)?;
        if provenance {
            writeln!(
                out,
                "  [entity {} ({:.2}{}), relations {:?}, intermediate: {}]",
                g.entity,
                g.confidence,
                if g.low_confidence { ", low confidence" } else { "" },
                g.relations,
                g.intermediate.join(" ")
            )
            .map_err(io)?;
        }
        history.push(query);
        history.push(g.response);
    }
    out.flush().map_err(io)
}
