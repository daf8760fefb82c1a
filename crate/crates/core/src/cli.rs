//! The `graphpb` command line.
//!
//! Every subcommand reads stdin when no input path is given and writes
//! machine-readable output to stdout; diagnostics go to stderr.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::fixtures;
use crate::g2s::{self, Example, FusionMode, G2sError, TrainConfig};
use crate::gnn::{self, EncoderConfig, EncoderKind, EncoderParams, GnnError};
use crate::gradcheck;
use crate::graph::{self, EdgeConfig, EdgeKind, GraphFormat, IphPairMode};
use crate::prosody::{parse_annotation, AnnotatedUtterance, CorpusError, CorpusReader, MarkerScheme, ProsodyTree};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Internal(_) => EXIT_INTERNAL,
            CliError::GradCheck(_) => EXIT_GRADCHECK,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn write_err(e: io::Error) -> CliError {
    CliError::Internal(format!("write failed: {e}"))
}

impl From<GnnError> for CliError {
    fn from(e: GnnError) -> Self {
        match e {
            GnnError::InvalidConfig(_) | GnnError::ParamMismatch(_) => input_err(e),
            GnnError::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<G2sError> for CliError {
    fn from(e: G2sError) -> Self {
        match e {
            G2sError::Tensor(_) => CliError::Internal(e.to_string()),
            G2sError::Encoder(inner) => inner.into(),
            _ => input_err(e),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "graphpb",
    version,
    about = "Prosody-boundary graphs, GNN encoders and a toy graph-to-sequence decoder"
)]
pub struct Cli {
    /// Seed for every random draw (default 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "#1")]
    pub pw_marker: String,
    #[arg(long, global = true, default_value = "#2")]
    pub pph_marker: String,
    #[arg(long, global = true, default_value = "#3")]
    pub iph_marker: String,
    #[arg(long, global = true, default_value = "#4")]
    pub utter_marker: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse annotated text into prosody trees (one JSON object per line).
    Parse(TextInput),
    /// Build prosody graphs from annotated text.
    Graph(GraphArgs),
    /// Encode a graph (JSON) into node embeddings H_PB.
    Encode(EncodeArgs),
    /// Train the toy graph-to-sequence model; prints the loss report as CSV.
    TrainToy(TrainArgs),
    /// Finite-difference gradient checks of every layer.
    Gradcheck(GradcheckArgs),
    /// Write the canonical example graphs.
    Fixtures(FixturesArgs),
    /// Corpus statistics as JSON.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct TextInput {
    /// Input file; stdin when omitted.
    pub input: Option<PathBuf>,
    /// Treat the input as a corpus of `<id>\t<annotation>` records with
    /// optional phoneme lines instead of one annotation per line.
    #[arg(long)]
    pub corpus: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Json,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IphPairs {
    Consecutive,
    All,
}

impl From<IphPairs> for IphPairMode {
    fn from(p: IphPairs) -> Self {
        match p {
            IphPairs::Consecutive => IphPairMode::ConsecutivePphs,
            IphPairs::All => IphPairMode::AllPphPairs,
        }
    }
}

#[derive(Debug, Args)]
pub struct EdgeArgs {
    /// Comma-separated edge kinds: pph, iph, seq.
    #[arg(long, default_value = "pph,seq")]
    pub edges: String,
    #[arg(long, value_enum, default_value_t = IphPairs::Consecutive)]
    pub iph_pairs: IphPairs,
}

impl EdgeArgs {
    fn config(&self) -> Result<EdgeConfig> {
        let kinds = self
            .edges
            .split(',')
            .map(|k| EdgeKind::parse(k.trim()).ok_or_else(|| input_err(format!("unknown edge kind {k:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let cfg = EdgeConfig::from_kinds(&kinds, self.iph_pairs.into());
        cfg.validate().map_err(input_err)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[command(flatten)]
    pub text: TextInput,
    #[command(flatten)]
    pub edges: EdgeArgs,
    #[arg(long, value_enum, default_value_t = Emit::Json)]
    pub emit: Emit,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Graph JSON file; stdin when omitted.
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "ggnn")]
    pub encoder: EncoderKind,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub steps: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Separate message weights per edge kind (GGNN).
    #[arg(long)]
    pub per_kind_weights: bool,
    /// Symmetric normalisation with self-loops (GCN).
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` file; see the README for the keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub fusion: Option<FusionMode>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Also write the structure-ablation toy dataset (JSONL) to this path.
    #[arg(long)]
    pub toy_dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub text: TextInput,
}

impl Cli {
    fn scheme(&self) -> Result<MarkerScheme> {
        MarkerScheme::new(&self.pw_marker, &self.pph_marker, &self.iph_marker, &self.utter_marker).map_err(input_err)
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                stdout.write_all(rendered.as_bytes())
            } else {
                stderr.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&cli, stdin, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "graphpb: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, stdin: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let scheme = cli.scheme()?;
    match &cli.command {
        Command::Parse(args) => {
            for_each_utterance(args, &scheme, stdin, |utt, tree| {
                let line = if args.corpus {
                    serde_json::to_string(&IdTree { id: &utt.id, tree: &tree })
                } else {
                    serde_json::to_string(&tree)
                };
                writeln!(out, "{}", line.expect("tree serializes")).map_err(write_err)
            })?;
        }
        Command::Graph(args) => {
            let cfg = args.edges.config()?;
            let format = match args.emit {
                Emit::Json => GraphFormat::Json,
                Emit::Dot => GraphFormat::Dot,
            };
            for_each_utterance(&args.text, &scheme, stdin, |utt, tree| {
                let mut tree = tree;
                if let Some(p) = &utt.phonemes {
                    tree.attach_phonemes(p).map_err(input_err)?;
                }
                let g = graph::build_graph(&tree, &cfg).map_err(|e| input_err(format!("{}: {e}", utt.id)))?;
                out.write_all(&graph::export_graph(&g, format)).map_err(write_err)?;
                if format == GraphFormat::Json {
                    writeln!(out).map_err(write_err)?;
                }
                Ok(())
            })?;
        }
        Command::Encode(args) => {
            let bytes = read_all(args.input.as_deref(), stdin)?;
            let g = graph::import_graph(&bytes, GraphFormat::Json).map_err(input_err)?;
            let cfg = EncoderConfig {
                kind: args.encoder,
                dim: args.dim,
                steps: args.steps,
                layers: args.layers,
                per_kind_weights: args.per_kind_weights,
                normalize: args.normalize,
            };
            let seed = cli.seed.unwrap_or(42);
            let params = EncoderParams::seeded(&cfg, seed)?;
            let h = gnn::encode(&g, &cfg, &params, seed)?;
            writeln!(out, "{}", serde_json::to_string(&h.to_rows()).expect("matrix serializes")).map_err(write_err)?;
        }
        Command::TrainToy(args) => {
            let mut settings = match &args.config {
                Some(p) => TrainSettings::from_file(p)?,
                None => TrainSettings::default(),
            };
            if let Some(f) = args.fusion {
                settings.cfg.model.fusion = f;
            }
            if let Some(s) = cli.seed {
                settings.cfg.seed = s;
            }
            let data = settings.dataset()?;
            let (_, report) = g2s::train_toy(&data, &settings.cfg)?;
            let csv = report.to_csv();
            match &settings.report {
                Some(path) => fs::write(path, &csv).map_err(|e| input_err(format!("{}: {e}", path.display())))?,
                None => out.write_all(csv.as_bytes()).map_err(write_err)?,
            }
            writeln!(
                err,
                "initial loss {:.6e}, final loss {:.6e}, ratio {:.4}",
                report.initial_loss,
                report.final_loss,
                report.final_loss / report.initial_loss
            )
            .map_err(write_err)?;
        }
        Command::Gradcheck(args) => {
            if args.dim == 0 {
                return Err(input_err("--dim must be at least 1"));
            }
            let checks = gradcheck::run_suite(args.dim, cli.seed.unwrap_or(42))?;
            let mut failed = Vec::new();
            for c in &checks {
                let ok = c.passed(gradcheck::TOLERANCE);
                writeln!(out, "{:<18} {:.3e} {}", c.name, c.max_rel_error, if ok { "ok" } else { "FAIL" })
                    .map_err(write_err)?;
                if !ok {
                    failed.push(c.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(CliError::GradCheck(failed.join(", ")));
            }
        }
        Command::Fixtures(args) => {
            fs::create_dir_all(&args.out_dir).map_err(|e| input_err(format!("{}: {e}", args.out_dir.display())))?;
            let named = [
                ("U1.json", fixtures::u1_graph()),
                ("U2.json", fixtures::u2_graph()),
                ("two_iph.json", fixtures::two_iph_graph()),
            ];
            for (name, g) in named {
                let path = args.out_dir.join(name);
                fs::write(&path, graph::to_json(&g) + "\n")
                    .map_err(|e| input_err(format!("{}: {e}", path.display())))?;
                writeln!(out, "{}", path.display()).map_err(write_err)?;
            }
            if let Some(path) = &args.toy_dataset {
                let file = File::create(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
                g2s::write_dataset(io::BufWriter::new(file), &fixtures::structure_dataset(6, 8))?;
                writeln!(out, "{}", path.display()).map_err(write_err)?;
            }
        }
        Command::Stats(args) => {
            let mut stats = CorpusStats::default();
            for_each_utterance(&args.text, &scheme, stdin, |_, tree| {
                stats.add(&tree);
                Ok(())
            })?;
            writeln!(out, "{}", serde_json::to_string_pretty(&stats).expect("stats serialize")).map_err(write_err)?;
        }
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct IdTree<'a> {
    id: &'a str,
    tree: &'a ProsodyTree,
}

fn read_all(path: Option<&Path>, stdin: &mut dyn BufRead) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    match path {
        Some(p) => buf = fs::read(p).map_err(|e| input_err(format!("{}: {e}", p.display())))?,
        None => {
            stdin.read_to_end(&mut buf).map_err(input_err)?;
        }
    }
    Ok(buf)
}

/// Runs `f` on every utterance of the input. Plain input holds one
/// annotation per non-blank line, with ids `line<N>`.
fn for_each_utterance(
    args: &TextInput,
    scheme: &MarkerScheme,
    stdin: &mut dyn BufRead,
    mut f: impl FnMut(AnnotatedUtterance, ProsodyTree) -> Result<()>,
) -> Result<()> {
    let reader: Box<dyn BufRead + '_> = match &args.input {
        Some(p) => Box::new(BufReader::new(File::open(p).map_err(|e| input_err(format!("{}: {e}", p.display())))?)),
        None => Box::new(stdin),
    };
    if args.corpus {
        for rec in CorpusReader::new(reader, scheme.clone()) {
            let utt = rec.map_err(|e| match e {
                CorpusError::Io(_) => input_err(e),
                other => input_err(other),
            })?;
            let tree = parse_annotation(&utt.raw, scheme).map_err(input_err)?;
            f(utt, tree)?;
        }
        return Ok(());
    }
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(input_err)?;
        let raw = line.trim();
        if raw.is_empty() {
            continue;
        }
        let tree = parse_annotation(raw, scheme).map_err(|e| input_err(format!("line {}: {e}", i + 1)))?;
        f(AnnotatedUtterance { id: format!("line{}", i + 1), raw: raw.to_owned(), phonemes: None }, tree)?;
    }
    Ok(())
}

#[derive(Debug, Default, Serialize)]
struct CorpusStats {
    utterances: usize,
    prosodic_words: usize,
    prosodic_phrases: usize,
    intonation_phrases: usize,
    characters: usize,
    /// `words_per_phrase[k]` = number of phrases with `k` words.
    words_per_phrase: Vec<usize>,
    pph_edges: usize,
    iph_edges: usize,
    seq_edges: usize,
}

impl CorpusStats {
    fn add(&mut self, tree: &ProsodyTree) {
        self.utterances += 1;
        self.prosodic_words += tree.word_count();
        self.prosodic_phrases += tree.phrase_count();
        self.intonation_phrases += tree.intonation_phrases.len();
        self.characters += tree.words().map(|w| w.text.chars().count()).sum::<usize>();
        for p in tree.phrases() {
            let k = p.words.len();
            if self.words_per_phrase.len() <= k {
                self.words_per_phrase.resize(k + 1, 0);
            }
            self.words_per_phrase[k] += 1;
        }
        let cfg = EdgeConfig { include_iph: true, ..EdgeConfig::default() };
        if let Ok((_, tally)) = graph::build_graph_with_tally(tree, &cfg) {
            self.pph_edges += tally.pph;
            self.iph_edges += tally.iph_pairs.iter().map(|p| p.edges).sum::<usize>();
            self.seq_edges += tally.seq;
        }
    }
}

/// Training setup read from a flat `key = value` file. `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub cfg: TrainConfig,
    /// JSONL dataset; when absent a built-in toy set is used.
    pub dataset: Option<PathBuf>,
    /// `memorize` (one utterance) or `structure` (phrase-dependent targets).
    pub toy: String,
    pub frames: usize,
    /// CSV destination; stdout when absent.
    pub report: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let mut cfg = TrainConfig::default();
        cfg.model.decoder.mel_dim = g2s::MEL_DIM;
        Self { cfg, dataset: None, toy: "memorize".into(), frames: 6, report: None }
    }
}

impl TrainSettings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
        let mut s = Self::parse(&text)?;
        // Relative dataset/report paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        s.dataset = s.dataset.map(|d| base.join(d));
        s.report = s.report.map(|r| base.join(r));
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| input_err(format!("config line {}: {msg}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
                v.parse().map_err(|_| format!("bad number {v:?}"))
            }
            let m = &mut s.cfg.model;
            let r: std::result::Result<(), String> = match key {
                "dim" => num(value).map(|v| m.encoder.dim = v),
                "steps" => num(value).map(|v| m.encoder.steps = v),
                "layers" => num(value).map(|v| m.encoder.layers = v),
                "encoder" => value.parse().map(|v| m.encoder.kind = v),
                "per_kind_weights" => num(value).map(|v| m.encoder.per_kind_weights = v),
                "normalize" => num(value).map(|v| m.encoder.normalize = v),
                "seq_encoder" => value.parse().map(|v| m.seq_encoder.kind = v),
                "seq_dim" => num(value).map(|v| m.seq_encoder.dim = v),
                "seq_steps" => num(value).map(|v| m.seq_encoder.steps = v),
                "fusion" => value.parse().map(|v| m.fusion = v),
                "hidden" => num(value).map(|v| m.decoder.hidden = v),
                "attention" => num(value).map(|v| m.decoder.attention = v),
                "mel_dim" => num(value).map(|v| m.decoder.mel_dim = v),
                "lr_start" => num(value).map(|v| s.cfg.schedule.start = v),
                "lr_end" => num(value).map(|v| s.cfg.schedule.end = v),
                "anneal_iters" => num(value).map(|v| s.cfg.schedule.anneal_iters = v),
                "iterations" => num(value).map(|v| s.cfg.iterations = v),
                "batch_size" => num(value).map(|v| s.cfg.batch_size = v),
                "seed" => num(value).map(|v| s.cfg.seed = v),
                "frames" => num(value).map(|v| s.frames = v),
                "dataset" => {
                    s.dataset = Some(PathBuf::from(value));
                    Ok(())
                }
                "report" => {
                    s.report = Some(PathBuf::from(value));
                    Ok(())
                }
                "toy" => match value {
                    "memorize" | "structure" => {
                        s.toy = value.to_owned();
                        Ok(())
                    }
                    _ => Err(format!("unknown toy set {value:?}")),
                },
                _ => Err(format!("unknown key {key:?}")),
            };
            r.map_err(bad)?;
        }
        s.cfg.model.validate()?;
        Ok(s)
    }

    pub fn dataset(&self) -> Result<Vec<Example>> {
        let mel = self.cfg.model.decoder.mel_dim;
        match &self.dataset {
            Some(p) => {
                let file = File::open(p).map_err(|e| input_err(format!("{}: {e}", p.display())))?;
                Ok(g2s::read_dataset(BufReader::new(file))?)
            }
            None if self.toy == "structure" => Ok(fixtures::structure_dataset(self.frames, mel)),
            None => Ok(vec![fixtures::memorization_example(self.frames, mel)]),
        }
    }
}
