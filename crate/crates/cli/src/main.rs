//! `engine`: command-line front end for the decoding engine.
//!
//! Exit codes: 0 success, 1 I/O or internal failure, 2 configuration error,
//! 3 oracle error, 4 step limit reached.

use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use pvf_core::bench::{
    desk_vocabulary, gen_branched_corpus, gen_structured_corpus, BranchedCorpusSpec, Corpus, MatrixError,
    StructuredCorpusSpec, SuiteSpec, SweepError, SweepGrid,
};
use pvf_core::decoders::{
    decode_ablation, decode_pvf, decode_static, decode_threshold, trace_to_jsonl, AblationMode, AblationParams,
    DecodeError,
};
use pvf_core::domain::{Canvas, DecodeConfig, DomainError, TokenId, Vocabulary};
use pvf_core::metrics::{to_csv, CsvRow};
use pvf_core::oracle::{
    bridge_connect, load_table_oracle, serve_connection, Conditioning, Oracle, OracleError, RecordingOracle,
    ServeOptions, ServerInfo,
};
use pvf_core::vocabplan::{build_planning_set, default_static_list, load_static_list, PlanningSet};
use pvf_core::{bench, Strategy};

#[derive(Parser)]
#[command(
    name = "engine",
    version,
    about = "Plan-Verify-Fill decoding for masked-diffusion language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode once and write the report (and optionally the trace).
    Run(RunArgs),
    /// Run a strategy x threshold x candidate-count grid over a corpus suite.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        /// Overrides the grid's `out` directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus utilities.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Serve a corpus's enumeration oracle over the bridge protocol.
    Serve {
        #[arg(long)]
        corpus: PathBuf,
        /// TCP address to listen on; stdin/stdout when absent.
        #[arg(long)]
        listen: Option<String>,
        #[command(flatten)]
        vocab: VocabArgs,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Generate corpora from a structured, branched or suite spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Output file (single corpus) or directory (suite). Single corpora
        /// go to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct VocabArgs {
    /// Vocabulary file; the built-in desk vocabulary when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Static planning-token list; the shipped list when absent.
    #[arg(long)]
    planning_list: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// `enum:<corpus.json>`, `table:<table.jsonl>` or `bridge:<addr>`.
    #[arg(long)]
    oracle: String,
    /// JSON or key=value config; desk defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Seed for the ablation's extra-token draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write trace.jsonl.
    #[arg(long)]
    trace: bool,
    /// Comma-separated prompt ids (table and bridge oracles).
    #[arg(long, value_delimiter = ',')]
    prompt: Vec<TokenId>,
    /// Comma-separated expected generation, for exact-match accuracy.
    #[arg(long, value_delimiter = ',')]
    target: Vec<TokenId>,
    #[arg(long, value_enum, default_value_t = ModeArg::Planning)]
    ablation_mode: ModeArg,
    /// Ablation confidence band `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.2, 0.6])]
    band: Vec<f64>,
    /// Record every oracle answer into a replayable table file.
    #[arg(long)]
    record: Option<PathBuf>,
    #[command(flatten)]
    vocab: VocabArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Static,
    Threshold,
    Ablation,
    Pvf,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Static => Strategy::Static,
            StrategyArg::Threshold => Strategy::Threshold,
            StrategyArg::Ablation => Strategy::Ablation,
            StrategyArg::Pvf => Strategy::Pvf,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Random,
    Planning,
}

#[derive(Debug)]
enum Failure {
    Io(String),
    Config(String),
    Oracle(String),
    StepLimit(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Oracle(_) => 3,
            Failure::StepLimit(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Config(m) | Failure::Oracle(m) | Failure::StepLimit(m) => m,
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<DomainError> for Failure {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::Io(e) => Failure::Io(e.to_string()),
            e @ (DomainError::InvalidConfig(_) | DomainError::InvalidVocabulary(_) | DomainError::MaskInPrompt) => {
                Failure::Config(e.to_string())
            }
            e => Failure::Io(format!("internal: {e}")),
        }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        Failure::Oracle(e.to_string())
    }
}

impl From<DecodeError> for Failure {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::StepLimit { .. } => Failure::StepLimit(e.to_string()),
            DecodeError::Oracle(e) => e.into(),
            DecodeError::Domain(e) => e.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(&args),
        Command::Sweep { grid, out } => sweep(&grid, out),
        Command::Corpus {
            command: CorpusCommand::Gen { spec, out },
        } => corpus_gen(&spec, out.as_deref()),
        Command::Serve { corpus, listen, vocab } => serve(&corpus, listen.as_deref(), &vocab),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("engine: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_vocab(args: &VocabArgs) -> Result<(Vocabulary, PlanningSet), Failure> {
    let vocab = match &args.vocab {
        Some(p) => Vocabulary::load(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => desk_vocabulary(),
    };
    let list = match &args.planning_list {
        Some(p) => load_static_list(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?,
        None => default_static_list(),
    };
    let planning = build_planning_set(&vocab, &list);
    Ok((vocab, planning))
}

fn load_config(path: Option<&Path>) -> Result<DecodeConfig<f64>, Failure> {
    match path {
        Some(p) => DecodeConfig::load(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display()))),
        None => Ok(DecodeConfig::desk_default()),
    }
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    Corpus::load(path).map_err(|e| Failure::Oracle(format!("corpus {}: {e}", path.display())))
}

fn check_info(info: ServerInfo, vocab: &Vocabulary) -> Result<(), Failure> {
    let ours = ServerInfo {
        vocab: vocab.len(),
        mask: vocab.mask_id(),
        eos: vocab.eos_id(),
        pad: vocab.pad_id(),
    };
    if info != ours {
        return Err(Failure::Oracle(format!(
            "bridge advertises {info:?}, local vocabulary is {ours:?}"
        )));
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let (vocab, planning) = load_vocab(&args.vocab)?;
    let mut cfg = load_config(args.config.as_deref())?;
    let mut prompt = args.prompt.clone();
    let mut target = (!args.target.is_empty()).then(|| args.target.clone());

    let (kind, location) = args
        .oracle
        .split_once(':')
        .ok_or_else(|| Failure::Config(format!("oracle {:?} lacks a kind prefix", args.oracle)))?;
    let oracle: Box<dyn Oracle<f64>> = match kind {
        "enum" => {
            let corpus = load_corpus(Path::new(location))?;
            if corpus.distribution.vocab_size() > vocab.len() {
                return Err(Failure::Config("corpus uses ids beyond the vocabulary".into()));
            }
            cfg.gen_length = corpus.gen_length();
            prompt = corpus.prompt.clone();
            target = target.or(Some(corpus.target.clone()));
            Box::new(corpus.oracle_with(Conditioning::NearestBackoff))
        }
        "table" => Box::new(load_table_oracle(location)?),
        "bridge" => {
            let client = bridge_connect(location)?;
            check_info(client.info(), &vocab)?;
            Box::new(client)
        }
        other => return Err(Failure::Config(format!("unknown oracle kind {other:?}"))),
    };
    cfg.validate()?;

    let strategy = Strategy::from(args.strategy);
    let spec = match strategy {
        Strategy::Ablation => {
            let mode = match args.ablation_mode {
                ModeArg::Random => AblationMode::Random,
                ModeArg::Planning => AblationMode::Planning,
            };
            let params = AblationParams {
                mode,
                band_lo: args.band[0],
                band_hi: args.band[1],
                seed: args.seed,
            };
            bench::RunSpec::ablation(&cfg, params)
        }
        s => bench::RunSpec::new(s, &cfg),
    };
    let recorder = RecordingOracle::new(&*oracle);
    let canvas = Canvas::new(prompt.clone(), cfg.gen_length, vocab.mask_id())?;
    let report = match (&spec.ablation, spec.strategy) {
        (_, Strategy::Static) => decode_static(canvas, &recorder, &vocab, &spec.cfg),
        (_, Strategy::Threshold) => decode_threshold(canvas, &recorder, &vocab, &spec.cfg),
        (_, Strategy::Pvf) => decode_pvf(canvas, &recorder, &planning, &vocab, &spec.cfg),
        (Some(params), Strategy::Ablation) => decode_ablation(canvas, &recorder, &planning, &vocab, &spec.cfg, params),
        (None, Strategy::Ablation) => unreachable!("ablation specs carry parameters"),
    }
    .map(|(_, r)| r);
    if let Some(path) = &args.record {
        recorder.table().write(path)?;
    }
    let report = report?;

    fs::create_dir_all(&args.out)?;
    let row = CsvRow::from_report("0", spec.label.as_str(), &report, target.as_deref());
    fs::write(args.out.join("runs.csv"), to_csv(&[row]))?;
    if args.trace {
        fs::write(args.out.join("trace.jsonl"), trace_to_jsonl(&report.trace))?;
    }
    let summary = json!({
        "strategy": spec.label,
        "nfe_mode": report.nfe_mode,
        "nfe": report.nfe,
        "raw_forwards": report.raw_forwards,
        "headline_nfe": report.headline_nfe(),
        "steps": report.steps,
        "commits_by_route": report.commits_by_route,
        "planning_rate": report.planning_rate,
        "prompt": prompt,
        "final_gen": report.final_gen,
        "final_text": vocab.render(&report.final_gen),
        "truncated_at": report.truncated_at,
        "exact_match": target.as_ref().map(|t| *t == report.final_gen),
        "ablation": report.ablation.as_ref().map(|a| json!({
            "extra_commits": a.extra_commits,
            "planning_extra_commits": a.planning_extra_commits,
            "guard_commits": a.guard_commits,
            "mean_extra_confidence": a.mean_extra_confidence,
        })),
        "config": spec.cfg.to_file_values(),
    });
    let text = serde_json::to_string_pretty(&summary).expect("report serializes");
    fs::write(args.out.join("report.json"), text + "\n")?;
    println!(
        "{}: nfe {} steps {} -> {}",
        spec.label,
        report.headline_nfe(),
        report.steps,
        vocab.render(&report.final_gen)
    );
    Ok(())
}

fn sweep(grid_path: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let text = fs::read_to_string(grid_path)?;
    let grid = SweepGrid::parse(&text)?;
    let out = out.or_else(|| grid.out.clone());
    let planning = pvf_core::bench::desk_planning_set();
    let (result, failure) = match grid.run(&planning) {
        Ok(r) => (r, None),
        Err(SweepError::Config(m)) => return Err(Failure::Config(m)),
        Err(SweepError::Run(MatrixError {
            run_id,
            partial,
            source,
        })) => {
            let f = match Failure::from(source) {
                Failure::Io(m) => Failure::Io(format!("run {run_id}: {m}")),
                Failure::Config(m) => Failure::Config(format!("run {run_id}: {m}")),
                Failure::Oracle(m) => Failure::Oracle(format!("run {run_id}: {m}")),
                Failure::StepLimit(m) => Failure::StepLimit(format!("run {run_id}: {m}")),
            };
            (*partial, Some(f))
        }
    };
    match &out {
        Some(dir) => result.write(dir)?,
        None => print!("{}", result.csv()),
    }
    let mut stdout = io::stdout().lock();
    for row in &result.rows {
        let acc = row.summary.accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
        let speedup = row.speedup_vs_threshold.map_or("-".to_string(), |s| format!("{s:.3}"));
        writeln!(
            stdout,
            "{}: mean nfe {:.3} accuracy {acc} speedup {speedup}",
            row.label, row.summary.mean_nfe
        )?;
    }
    failure.map_or(Ok(()), Err)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CorpusRequest {
    Structured(StructuredCorpusSpec),
    Branched(BranchedCorpusSpec),
    Suite(SuiteSpec),
}

fn corpus_gen(spec_path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let text = fs::read_to_string(spec_path)?;
    let request: CorpusRequest = serde_json::from_str(&text).map_err(|e| {
        Failure::Config(format!(
            "{}: not a structured, branched or suite spec ({e})",
            spec_path.display()
        ))
    })?;
    let spec_err = |e: bench::SpecError| Failure::Config(e.to_string());
    let corpora = match request {
        CorpusRequest::Structured(s) => vec![gen_structured_corpus(&s).map_err(spec_err)?],
        CorpusRequest::Branched(s) => vec![gen_branched_corpus(&s).map_err(spec_err)?],
        CorpusRequest::Suite(s) => {
            let dir = out.ok_or_else(|| Failure::Config("a suite needs --out <dir>".into()))?;
            let corpora = s.build().map_err(spec_err)?;
            fs::create_dir_all(dir)?;
            for c in &corpora {
                c.save(dir.join(format!("{}.json", c.name)))?;
            }
            eprintln!("wrote {} corpora to {}", corpora.len(), dir.display());
            return Ok(());
        }
    };
    let corpus = &corpora[0];
    match out {
        Some(path) => corpus.save(path)?,
        None => {
            let text = serde_json::to_string_pretty(&corpus.to_file()).expect("corpus serializes");
            println!("{text}");
        }
    }
    Ok(())
}

fn serve(corpus_path: &Path, listen: Option<&str>, vocab_args: &VocabArgs) -> Result<(), Failure> {
    let (vocab, _) = load_vocab(vocab_args)?;
    let corpus = load_corpus(corpus_path)?;
    let opts = ServeOptions {
        info: ServerInfo {
            vocab: vocab.len(),
            mask: vocab.mask_id(),
            eos: vocab.eos_id(),
            pad: vocab.pad_id(),
        },
        gen_length: corpus.gen_length(),
    };
    let oracle = Arc::new(corpus.oracle_with(Conditioning::NearestBackoff));
    let Some(addr) = listen else {
        let stdin = io::stdin().lock();
        return Ok(serve_connection(&*oracle, opts, stdin, io::stdout().lock())?);
    };
    let listener = TcpListener::bind(addr)?;
    eprintln!("listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = stream?;
        let oracle = Arc::clone(&oracle);
        thread::spawn(move || {
            let Ok(reader) = stream.try_clone() else { return };
            let _ = serve_connection(&*oracle, opts, BufReader::new(reader), stream);
        });
    }
    Ok(())
}
