use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lmzip::bridge::{BridgeAddress, ENV_ADDR};
use lmzip::container::{CodecId, Container, ContainerHeader, PredictorId};
use lmzip::metrics::{Cell, Column, StreamMetrics, Table};
use lmzip::pipeline::{
    bench, compress, decompress, estimate, BenchConfig, CodecSet, CompressOptions, DecompressOptions,
    EstimateOptions, PredictorSpec, TokenizerSpec, DEFAULT_BATCH_TOKENS, DEFAULT_MEMORY, DEFAULT_ORDER,
};
use lmzip::{Error, Vocabulary};

const EXIT_USAGE: u8 = 2;
const EXIT_CORRUPT: u8 = 3;
const EXIT_MISMATCH: u8 = 4;
const EXIT_BRIDGE: u8 = 5;

/// Lossless text compression driven by a next-token predictor.
#[derive(Parser)]
#[command(name = "lmzip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a file into an LMZ1 container and report its metrics.
    Compress(CompressArgs),
    /// Restore the original bytes from a container.
    Decompress(DecompressArgs),
    /// Report the entropy-rate upper bound of a file, and codec rates on request.
    Estimate(EstimateArgs),
    /// Cut a corpus into token batches and tabulate per-batch rates.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecArg {
    Rank,
    Tbyt,
    Ac,
}

impl From<CodecArg> for CodecId {
    fn from(c: CodecArg) -> Self {
        match c {
            CodecArg::Rank => CodecId::Rank,
            CodecArg::Tbyt => CodecId::Tbyt,
            CodecArg::Ac => CodecId::Ac,
        }
    }
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum ReportFormat {
    #[default]
    Table,
    Csv,
}

impl ReportFormat {
    fn render(self, table: &Table) -> String {
        match self {
            ReportFormat::Table => table.to_aligned(),
            ReportFormat::Csv => table.to_csv(),
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// byte, vocab:PATH, or external (the bridge server's tokenizer).
    #[arg(long, default_value = "byte", value_name = "SPEC")]
    tokenizer: String,
    /// uniform, adaptive, or external[:ADDR]; ADDR defaults to $LMZIP_BRIDGE_ADDR.
    #[arg(long, default_value = "adaptive", value_name = "SPEC")]
    predictor: String,
    /// Context memory M in tokens [adaptive: 64; external: server maximum].
    #[arg(long, value_name = "M")]
    memory: Option<usize>,
    /// Context order k of the adaptive predictor.
    #[arg(long, default_value_t = DEFAULT_ORDER, value_name = "K")]
    order: usize,
    /// Lowercase letters and single spaces only, as in text8.
    #[arg(long)]
    preprocess_text8: bool,
    /// Seconds to wait on the bridge server.
    #[arg(long, default_value_t = 60, value_name = "SECS")]
    timeout: u64,
}

impl ModelArgs {
    fn tokenizer(&self) -> anyhow::Result<TokenizerSpec> {
        parse_tokenizer(&self.tokenizer)
    }

    fn predictor(&self) -> anyhow::Result<PredictorSpec> {
        parse_predictor(&self.predictor, self.memory, self.order)
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout)
    }
}

#[derive(Args)]
struct CompressArgs {
    input: PathBuf,
    /// Container path [INPUT.lmz].
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ac")]
    codec: CodecArg,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "table")]
    report: ReportFormat,
    /// Do not print the metrics report.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct DecompressArgs {
    input: PathBuf,
    /// Output path [INPUT without .lmz].
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Needed for vocab:PATH containers; otherwise checked against the header.
    #[arg(long, value_name = "SPEC")]
    tokenizer: Option<String>,
    /// Checked against the header; external:ADDR supplies the server address.
    #[arg(long, value_name = "SPEC")]
    predictor: Option<String>,
    #[arg(long, value_name = "M")]
    memory: Option<usize>,
    #[arg(long, value_name = "K")]
    order: Option<usize>,
    #[arg(long, default_value_t = 60, value_name = "SECS")]
    timeout: u64,
    /// Overwrite an existing output file.
    #[arg(long, short)]
    force: bool,
}

#[derive(Args)]
struct EstimateArgs {
    input: PathBuf,
    /// Also run these codecs: comma-separated rank, tbyt, ac, or all.
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    codecs: Vec<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "table")]
    report: ReportFormat,
    /// Write the report here instead of standard output.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BATCH_TOKENS, value_name = "N")]
    batch_tokens: usize,
    /// Number of batches [as many whole batches as the corpus holds].
    #[arg(long, value_name = "N")]
    batch_count: Option<usize>,
    /// Memory values to sweep, comma-separated [--memory].
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    memories: Vec<usize>,
    /// Codecs to run: comma-separated rank, tbyt, ac, or all.
    #[arg(long, value_delimiter = ',', default_value = "all", value_name = "LIST")]
    codecs: Vec<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "table")]
    report: ReportFormat,
    /// Write the report here instead of standard output.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

/// A command-line problem, as opposed to a failure inside the codec.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_tokenizer(spec: &str) -> anyhow::Result<TokenizerSpec> {
    match spec {
        "byte" => Ok(TokenizerSpec::Byte),
        "external" => Ok(TokenizerSpec::External),
        _ => {
            let path = spec
                .strip_prefix("vocab:")
                .filter(|p| !p.is_empty())
                .ok_or_else(|| usage(format!("unknown tokenizer {spec:?}; use byte, vocab:PATH or external")))?;
            let text = fs::read_to_string(path).with_context(|| format!("reading vocabulary {path}"))?;
            Ok(TokenizerSpec::Vocab(Vocabulary::parse(&text)?))
        }
    }
}

fn bridge_address(explicit: Option<&str>) -> anyhow::Result<BridgeAddress> {
    let addr = match explicit {
        Some(a) => a.to_string(),
        None => std::env::var(ENV_ADDR)
            .map_err(|_| usage(format!("external predictor needs an address: external:ADDR or ${ENV_ADDR}")))?,
    };
    BridgeAddress::parse(&addr).map_err(|e| usage(e.to_string()))
}

fn parse_predictor(spec: &str, memory: Option<usize>, order: usize) -> anyhow::Result<PredictorSpec> {
    match spec {
        "uniform" => Ok(PredictorSpec::Uniform),
        "adaptive" => Ok(PredictorSpec::Adaptive {
            order,
            memory: memory.unwrap_or(DEFAULT_MEMORY),
        }),
        _ => {
            let rest = spec
                .strip_prefix("external")
                .ok_or_else(|| usage(format!("unknown predictor {spec:?}; use uniform, adaptive or external:ADDR")))?;
            let explicit = match rest {
                "" => None,
                r => Some(r.strip_prefix(':').ok_or_else(|| usage(format!("unknown predictor {spec:?}")))?),
            };
            Ok(PredictorSpec::External {
                address: bridge_address(explicit)?,
                memory: memory.unwrap_or(0),
            })
        }
    }
}

fn parse_codecs(list: &[String]) -> anyhow::Result<CodecSet> {
    let mut set = CodecSet::NONE;
    for name in list {
        match name.trim() {
            "rank" => set.rank = true,
            "tbyt" => set.tbyt = true,
            "ac" => set.ac = true,
            "all" => set = CodecSet::ALL,
            "" | "none" => {}
            other => return Err(usage(format!("unknown codec {other:?}; use rank, tbyt, ac or all"))),
        }
    }
    Ok(set)
}

fn read_input(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_output(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn emit_report(text: &str, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(path) => write_output(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Two-column `quantity, value` table.
fn quantities(rows: Vec<(&str, Cell)>) -> Table {
    Table {
        header: vec!["quantity".into(), "value".into()],
        keys: vec!["quantity".into(), "value".into()],
        rows: rows.into_iter().map(|(k, v)| vec![Cell::Text(k.into()), v]).collect(),
        notes: Vec::new(),
    }
}

fn metric_rows(m: &StreamMetrics) -> anyhow::Result<Vec<(&'static str, Cell)>> {
    let mut rows = vec![
        ("N_c (characters)", Cell::Count(m.n_chars)),
        ("N_T (tokens)", Cell::Count(m.n_tokens)),
    ];
    if m.n_tokens > 0 {
        let eb = m.mean_chars_per_token()?;
        rows.push(("E[B] (chars/token)", Cell::Rate(*eb.numer() as f64 / *eb.denom() as f64)));
        rows.push(("H_ub (bits/token)", Cell::Rate(m.h_ub_bits_per_token()?)));
    }
    if m.n_chars > 0 {
        for c in Column::ALL {
            if let Some(rate) = m.rate(c)? {
                rows.push((c.label(), Cell::Rate(rate)));
            }
        }
    }
    Ok(rows)
}

fn run_compress(args: CompressArgs) -> anyhow::Result<()> {
    let input = read_input(&args.input)?;
    let options = CompressOptions {
        codec: args.codec.into(),
        tokenizer: args.model.tokenizer()?,
        predictor: args.model.predictor()?,
        preprocess_text8: args.model.preprocess_text8,
        timeout: args.model.timeout(),
    };
    let packed = compress(&input, &options)?;
    let out = args.out.unwrap_or_else(|| {
        let mut name = args.input.clone().into_os_string();
        name.push(".lmz");
        name.into()
    });
    write_output(&out, &packed.bytes)?;
    if !args.quiet {
        let mut rows = metric_rows(&packed.metrics)?;
        rows.push(("payload (bytes)", Cell::Count(packed.header.payload_len)));
        rows.push(("container with header (bytes)", Cell::Count(packed.bytes.len() as u64)));
        if packed.header.n_chars > 0 {
            let n_c = packed.header.n_chars as f64;
            rows.push(("ρ payload only (bpc)", Cell::Rate(packed.payload_bits() as f64 / n_c)));
            rows.push(("ρ with header (bpc)", Cell::Rate(packed.total_bits() as f64 / n_c)));
        }
        let mut table = quantities(rows);
        table.notes.push(format!(
            "{} -> {} with codec {}",
            args.input.display(),
            out.display(),
            packed.header.codec
        ));
        print!("{}", args.report.render(&table));
    }
    Ok(())
}

fn run_decompress(args: DecompressArgs) -> anyhow::Result<()> {
    let bytes = read_input(&args.input)?;
    let out = match args.out {
        Some(p) => p,
        None => match args.input.extension() {
            Some(ext) if ext == "lmz" => args.input.with_extension(""),
            _ => bail!(usage("input does not end in .lmz; give --out")),
        },
    };
    if out.exists() && !args.force {
        bail!(usage(format!("{} exists; pass --force to overwrite", out.display())));
    }
    let header: ContainerHeader = Container::from_bytes(&bytes)?.header;
    let tokenizer = args.tokenizer.as_deref().map(parse_tokenizer).transpose()?;
    let predictor = match args.predictor.as_deref() {
        Some(spec) => Some(parse_predictor(spec, args.memory, args.order.unwrap_or(usize::from(header.order)))?),
        // Only the address is not in the header.
        None if header.predictor == PredictorId::External => Some(PredictorSpec::External {
            address: bridge_address(None)?,
            memory: args.memory.unwrap_or(0),
        }),
        None => {
            if args.memory.is_some() || args.order.is_some() {
                bail!(usage("--memory and --order need --predictor"));
            }
            None
        }
    };
    let options = DecompressOptions {
        tokenizer,
        predictor,
        timeout: Duration::from_secs(args.timeout),
    };
    let text = decompress(&bytes, &options)?;
    write_output(&out, &text)
}

fn run_estimate(args: EstimateArgs) -> anyhow::Result<()> {
    let input = read_input(&args.input)?;
    let options = EstimateOptions {
        tokenizer: args.model.tokenizer()?,
        predictor: args.model.predictor()?,
        preprocess_text8: args.model.preprocess_text8,
        codecs: parse_codecs(&args.codecs)?,
        timeout: args.model.timeout(),
    };
    let metrics = estimate(&input, &options)?;
    let mut table = quantities(metric_rows(&metrics)?);
    table
        .notes
        .push("codec rates count payload bits only, without the container header".into());
    emit_report(&args.report.render(&table), args.out.as_deref())
}

fn run_bench(args: BenchArgs) -> anyhow::Result<()> {
    let input = read_input(&args.input)?;
    let predictor = args.model.predictor()?;
    if args.batch_tokens == 0 {
        bail!(usage("--batch-tokens must be at least 1"));
    }
    if args.batch_count == Some(0) {
        bail!(usage("--batch-count must be at least 1"));
    }
    let config = BenchConfig {
        tokenizer: args.model.tokenizer()?,
        predictor,
        preprocess_text8: args.model.preprocess_text8,
        batch_tokens: args.batch_tokens,
        batch_count: args.batch_count,
        memories: args.memories.clone(),
        codecs: parse_codecs(&args.codecs)?,
        timeout: args.model.timeout(),
    };
    let report = bench(&input, &config)?;
    let mut sections = Vec::new();
    for (m, batches) in &report.entries {
        sections.push((format!("M = {m}: per-batch rates"), batches.table()));
    }
    if report.entries.len() > 1 {
        sections.push(("memory sweep: pooled totals".into(), report.totals_table()));
        sections.push(("memory sweep: batch mean ± std".into(), report.stats_table()));
    }
    let mut text = String::new();
    for (i, (title, table)) in sections.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        match args.report {
            ReportFormat::Table => text.push_str(&format!("{title}\n")),
            ReportFormat::Csv => text.push_str(&format!("# {title}\n")),
        }
        text.push_str(&args.report.render(table));
    }
    emit_report(&text, args.out.as_deref())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::CorruptStream(_) | Error::InvalidStream(_) => EXIT_CORRUPT,
                Error::PredictorMismatch(_) => EXIT_MISMATCH,
                Error::Bridge(_) => EXIT_BRIDGE,
                Error::Config(_) | Error::InvalidVocabulary(_) | Error::VocabularyTooLarge { .. } => EXIT_USAGE,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compress(a) => run_compress(a),
        Command::Decompress(a) => run_decompress(a),
        Command::Estimate(a) => run_estimate(a),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("lmzip: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn predictor_specs() {
        assert_eq!(
            parse_predictor("adaptive", None, 5).unwrap(),
            PredictorSpec::Adaptive { order: 5, memory: DEFAULT_MEMORY }
        );
        assert_eq!(parse_predictor("uniform", Some(3), 5).unwrap(), PredictorSpec::Uniform);
        assert_eq!(
            parse_predictor("external:127.0.0.1:9000", Some(8), 3).unwrap(),
            PredictorSpec::External {
                address: BridgeAddress::Tcp("127.0.0.1:9000".into()),
                memory: 8
            }
        );
        for bad in ["markov", "externalx", "external:nope"] {
            let err = parse_predictor(bad, None, 3).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_USAGE, "{bad}");
        }
    }

    #[test]
    fn codec_lists() {
        assert_eq!(parse_codecs(&["all".into()]).unwrap(), CodecSet::ALL);
        assert_eq!(parse_codecs(&[]).unwrap(), CodecSet::NONE);
        let set = parse_codecs(&["rank".into(), "ac".into()]).unwrap();
        assert!(set.rank && set.ac && !set.tbyt);
        assert!(parse_codecs(&["zip".into()]).is_err());
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let code = |e: Error| exit_code(&anyhow!(e).context("while testing"));
        assert_eq!(code(Error::CorruptStream("x".into())), EXIT_CORRUPT);
        assert_eq!(code(Error::PredictorMismatch("x".into())), EXIT_MISMATCH);
        assert_eq!(code(Error::Bridge("x".into())), EXIT_BRIDGE);
        assert_eq!(code(Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&anyhow!("plain")), 1);
    }
}
