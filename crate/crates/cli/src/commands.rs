use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use forge_core::agents::{ScriptedBackend, TranscriptScript};
use forge_core::codebank::CodeBank;
use forge_core::pipeline::{new_session_id, Session, SessionDir, SessionInput, STATE_FILE};
use forge_core::render::View;
use forge_core::schema::{ApiSchema, InputKind};
use forge_core::similarity::{metrics_harness, ManifestRow, MetricsOptions};
use forge_core::validator::{extract_region, parse_snippet, validate_snippet, ValidationContext, REGION_START};

use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "forge", version, about = "Parametric avatar generation with verifying LLM agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one session to completion and write its artifacts.
    Generate(GenerateArgs),
    /// Check a snippet against the API schema.
    Validate(ValidateArgs),
    /// Score renders against references.
    Metrics(MetricsArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
    /// Code bank maintenance.
    Bank(BankArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Portrait,
    FullBody,
}

impl From<KindArg> for InputKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Portrait => InputKind::Portrait,
            KindArg::FullBody => InputKind::FullBody,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ViewArg {
    Portrait,
    FullBody,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Portrait => View::Portrait,
            ViewArg::FullBody => View::FullBody,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<String>,
    /// Treat the image as this kind instead of letting the descriptor decide.
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long = "max-iters")]
    pub max_iters: Option<u32>,
    #[arg(long)]
    pub no_cot: bool,
    #[arg(long)]
    pub no_refine: bool,
    /// Mock backend, renderer and embedding providers.
    #[arg(long)]
    pub mock: bool,
    /// JSON transcript of canned completions, replayed before the backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Code bank file used for few-shot retrieval and for accepted snippets.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ContextArg {
    Fresh,
    Refine,
    Edit,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub snippet: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long, value_enum, default_value = "fresh")]
    pub context: ContextArg,
    /// Previous snippet, required for refine and edit contexts.
    #[arg(long)]
    pub prev: Option<PathBuf>,
    /// Allow a preset change in refine or edit context.
    #[arg(long)]
    pub preset_unlocked: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// JSONL rows `{render, ref_image?, ref_text?}`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV table; a JSON table is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "portrait")]
    pub view: ViewArg,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long)]
    pub mock: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long)]
    pub mock: bool,
}

#[derive(Debug, Args)]
pub struct BankArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bank file; defaults to the configured one.
    #[arg(long)]
    pub file: Option<PathBuf>,
    #[command(subcommand)]
    pub action: BankAction,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum BankAction {
    /// One JSON line per entry.
    List,
    /// Drop invalid and duplicate entries and rewrite the file.
    Prune,
}

/// Runs a command and returns the process exit code.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Validate(a) => validate(a),
        Command::Metrics(a) => metrics(a),
        Command::Serve(a) => serve(a),
        Command::Bank(a) => bank(a),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn generate(args: GenerateArgs) -> Result<u8> {
    let mut config = Config::load(args.config.as_deref())?;
    config.mock |= args.mock;
    if let Some(b) = &args.bank {
        config.bank.path = Some(b.clone());
    }
    let mut vc = config.defaults.clone();
    if let Some(t) = args.tau {
        vc.tau = t;
    }
    if let Some(n) = args.max_iters {
        vc.max_iterations = n;
    }
    vc.cot_enabled &= !args.no_cot;
    vc.refine_enabled &= !args.no_refine;
    vc.validate()?;

    let input = SessionInput {
        text: args.text.clone(),
        image: args
            .image
            .as_ref()
            .map(|p| fs::read(p).with_context(|| format!("reading {}", p.display())))
            .transpose()?,
        kind_override: args.kind.map(Into::into),
    };
    if input.is_empty() {
        bail!("give --text, --image or both");
    }

    let schema = config.load_schema()?;
    let use_bank = args.bank.is_some() || args.config.is_some();
    let Some(mut deps) = config.deps(schema, use_bank)? else {
        bail!("no backend configured; pass --mock or set [backend] in the config");
    };
    if let Some(p) = &args.script {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let script = TranscriptScript::from_json(&text).with_context(|| format!("parsing {}", p.display()))?;
        deps.backend = Arc::new(ScriptedBackend::new(script).with_fallback(deps.backend.clone()));
    }

    if args.out.join(STATE_FILE).exists() {
        bail!("{} already holds a session", args.out.display());
    }
    let dir = SessionDir::at(&args.out)?;
    let mut session = Session::create(new_session_id(), input, vc, Some(dir))?;
    let outcome = session.run(&deps)?;
    print_json(&outcome)?;
    Ok(outcome.status.exit_code() as u8)
}

/// Reads a snippet file, unwrapping region markers when present.
fn read_body(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.lines().any(|l| l.trim() == REGION_START) {
        return Ok(extract_region(&text)
            .with_context(|| format!("extracting region from {}", path.display()))?
            .body);
    }
    Ok(text)
}

pub fn validate(args: ValidateArgs) -> Result<u8> {
    let bytes = fs::read(&args.schema).with_context(|| format!("reading {}", args.schema.display()))?;
    let schema = ApiSchema::load(&bytes).with_context(|| format!("loading {}", args.schema.display()))?;
    let body = read_body(&args.snippet)?;
    let prev = match (args.context, &args.prev) {
        (ContextArg::Fresh, _) => None,
        (_, Some(p)) => Some(parse_snippet(&read_body(p)?).ast),
        (_, None) => bail!("--prev is required for refine and edit contexts"),
    };
    let ctx = match (args.context, prev.as_ref()) {
        (ContextArg::Refine, Some(prev)) => ValidationContext::Refinement {
            prev,
            preset_flagged: args.preset_unlocked,
        },
        (ContextArg::Edit, Some(prev)) => ValidationContext::Edit {
            prev,
            preset_targeted: args.preset_unlocked,
        },
        _ => ValidationContext::FreshGeneration,
    };
    let errors = validate_snippet(&body, &schema, ctx);
    print_json(&errors)?;
    Ok(u8::from(!errors.is_empty()))
}

pub fn metrics(args: MetricsArgs) -> Result<u8> {
    let mut config = Config::load(args.config.as_deref())?;
    config.mock |= args.mock;
    let providers = config.providers()?;
    if providers.face.is_none() && providers.image.is_none() && providers.text.is_none() {
        bail!("no embedding providers; pass --mock or set [embeddings] in the config");
    }
    let rows = ManifestRow::read_jsonl(&args.manifest).with_context(|| format!("reading {}", args.manifest.display()))?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let opts = MetricsOptions {
        view: args.view.into(),
        workers: args.workers.max(1),
    };
    let table = metrics_harness(&rows, base, &providers, opts);

    let (csv_path, json_path) = if args.out.extension().is_some_and(|e| e == "json") {
        (args.out.with_extension("csv"), args.out.clone())
    } else {
        (args.out.clone(), args.out.with_extension("json"))
    };
    table.write_csv(fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?)?;
    fs::write(&json_path, serde_json::to_vec_pretty(&table)?)?;
    print_json(&json!({ "rows": table.rows.len(), "failed": table.failed, "means": table.means }))?;
    Ok(0)
}

pub fn serve(args: ServeArgs) -> Result<u8> {
    let mut config = Config::load(args.config.as_deref())?;
    config.mock |= args.mock;
    if let Some(l) = args.listen {
        config.listen = l;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::service::serve(config))?;
    Ok(0)
}

pub fn bank(args: BankArgs) -> Result<u8> {
    let config = Config::load(args.config.as_deref())?;
    let path = args.file.unwrap_or_else(|| config.bank_path());
    if !path.is_file() {
        bail!("no code bank at {}", path.display());
    }
    let bank = CodeBank::open(&path, config.load_schema()?)?;
    match args.action {
        BankAction::List => {
            let mut out = std::io::stdout().lock();
            for e in bank.snapshot().iter() {
                let line = json!({
                    "id": e.id,
                    "session": e.session,
                    "created_at": e.created_at,
                    "attributes": e.attrs.len(),
                    "lines": e.body.lines().count(),
                    "retrievable": e.is_retrievable(),
                });
                writeln!(out, "{line}")?;
            }
        }
        BankAction::Prune => print_json(&bank.prune()?)?,
    }
    Ok(0)
}
