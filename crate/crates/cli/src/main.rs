use std::error::Error;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cotcanvas::backends::config::BackendsConfig;
use cotcanvas::backends::mock::{ColorHistogramEmbedder, FixedJudge, MeanPoolEmbedder, MockMllm};
use cotcanvas::backends::scene::{generate_scene_with, SceneLayout, Shape, PALETTE};
use cotcanvas::backends::{Backends, EmbeddingBackend, JudgeBackend, MllmBackend};
use cotcanvas::codec::{decode_image_png_converting, encode_image_png};
use cotcanvas::datagen::{
    build_entries, ingest_magicbrush, read_dataset, synthesize_records, write_dataset, write_sft, SourceRecord,
};
use cotcanvas::decompose::{decompose_grammar, ClauseLexicon};
use cotcanvas::evalx::{emit_report, evaluate, read_eval_corpus, ReportFormat};
use cotcanvas::pipeline::{run_edit, write_trace_dir, Decomposer, PipelinePolicy, SegmentationMode};

use cotcanvas_app::api::{self, ApiState};
use cotcanvas_app::mockserver::{self, MockBackends};
use cotcanvas_app::service::EditService;
use cotcanvas_app::store::SessionStore;

type Res<T = ()> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "cotcanvas", version, about = "Multi-step instruction-guided image editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one edit and write the trace directory.
    Edit(EditArgs),
    /// Print the sub-prompts of an instruction.
    Decompose {
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Build datasets and SFT files.
    #[command(subcommand)]
    Dataprep(Dataprep),
    /// Score edited images.
    #[command(subcommand)]
    Eval(Eval),
    /// Serve the /v1 review API.
    Serve(ServeArgs),
    /// Serve the mock backends over the remote wire format.
    MockBackends {
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: SocketAddr,
        /// Also write a backend config pointing at this server.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
    /// Synthetic scenes.
    #[command(subcommand)]
    Scene(SceneCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecomposerArg {
    Grammar,
    Llm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegmentationArg {
    PerStep,
    Batched,
}

#[derive(Args, Clone)]
struct PolicyArgs {
    #[arg(long)]
    no_cot: bool,
    #[arg(long)]
    no_reprompt: bool,
    #[arg(long, default_value_t = 2)]
    dilation: u32,
    #[arg(long, default_value_t = 8)]
    max_steps: usize,
    #[arg(long, value_enum, default_value_t = DecomposerArg::Grammar)]
    decomposer: DecomposerArg,
    #[arg(long, value_enum, default_value_t = SegmentationArg::PerStep)]
    segmentation: SegmentationArg,
    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    backend: BackendKind,
    /// Backend endpoint TOML (remote backend).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Clause lexicon TSV replacing the built-in one.
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

impl PolicyArgs {
    fn policy(&self) -> PipelinePolicy {
        PipelinePolicy {
            use_cot: !self.no_cot,
            use_reprompt: !self.no_reprompt,
            mask_dilation_px: self.dilation,
            max_steps: self.max_steps,
            decomposer: match self.decomposer {
                DecomposerArg::Grammar => Decomposer::Grammar,
                DecomposerArg::Llm => Decomposer::Llm,
            },
            segmentation: match self.segmentation {
                SegmentationArg::PerStep => SegmentationMode::PerStep,
                SegmentationArg::Batched => SegmentationMode::Batched,
            },
        }
    }

    fn backends(&self) -> Res<Backends> {
        Ok(match self.backend {
            BackendKind::Mock => Backends::mock(),
            BackendKind::Remote => BackendsConfig::load(self.config.as_deref())?.remote_backends()?,
        })
    }
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    instruction: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Subcommand)]
enum Dataprep {
    /// Generate CoT annotations and write a dataset directory.
    Generate {
        /// MagicBrush-style tree with an index.txt.
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        magicbrush: Option<PathBuf>,
        /// Number of synthetic records instead of a source tree.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write one SFT dialogue per line for a dataset directory.
    FormatSft {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderArg {
    Meanpool,
    Histogram,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeArg {
    Fixed,
    Remote,
}

#[derive(Subcommand)]
enum Eval {
    /// Score one or more corpora and print a report.
    Run {
        /// Dataset directory with edited images; repeat for several models.
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
        /// Model name per corpus; defaults to the directory name.
        #[arg(long)]
        model: Vec<String>,
        #[arg(long, default_value = "md")]
        report: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EmbedderArg::Meanpool)]
        embedder: EmbedderArg,
        #[arg(long, value_enum, default_value_t = JudgeArg::Fixed)]
        judge: JudgeArg,
        #[arg(long, default_value_t = 0)]
        dilation: u32,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Require this bearer token on every session route.
    #[arg(long, env = "COTCANVAS_API_TOKEN")]
    token: Option<String>,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Subcommand)]
enum SceneCmd {
    /// Render a synthetic scene to PNG.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        cols: u32,
        #[arg(long, default_value_t = 4)]
        rows: u32,
        /// Fixed objects as "color shape" items, comma separated (e.g. "red square,blue circle").
        #[arg(long)]
        objects: Option<String>,
    },
}

fn lexicon(path: Option<&Path>) -> Res<ClauseLexicon> {
    Ok(match path {
        Some(p) => ClauseLexicon::from_path(p)?,
        None => ClauseLexicon::builtin().clone(),
    })
}

fn read_image(path: &Path) -> Res<cotcanvas::RasterImage> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let (img, converted) = decode_image_png_converting(&bytes)?;
    if converted {
        log::warn!("{} converted to 8-bit RGB", path.display());
    }
    Ok(img)
}

fn cmd_edit(a: &EditArgs) -> Res {
    let image = read_image(&a.image)?;
    let policy = a.policy.policy();
    let backends = a.policy.backends()?;
    let lex = lexicon(a.policy.lexicon.as_deref())?;
    match run_edit(&image, &a.instruction, &policy, &backends, &lex) {
        Ok(trace) => {
            write_trace_dir(&trace, &policy, None, &a.out)?;
            println!("applied {} steps; trace written to {}", trace.steps.len(), a.out.display());
            for (i, s) in trace.steps.iter().enumerate() {
                println!("  {}. {} {:?} -> {:?}", i + 1, s.sub_prompt.kind.as_str(), s.sub_prompt.raw_clause, s.inpaint_prompt);
            }
            Ok(())
        }
        Err(f) => {
            let step = f.failed_step.map_or(0, |i| i + 1);
            write_trace_dir(&f.trace, &policy, Some((step, f.error.to_string())), &a.out)?;
            Err(format!("edit failed at {f}; partial trace written to {}", a.out.display()).into())
        }
    }
}

fn cmd_decompose(instruction: &str, lex: Option<&Path>, json: bool) -> Res {
    let sps = decompose_grammar(instruction, &lexicon(lex)?)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&sps)?);
    } else {
        for (i, sp) in sps.iter().enumerate() {
            let anchor = sp.anchor_ref.as_deref().map(|a| format!(" (anchor: {a})")).unwrap_or_default();
            println!("{}. {} {}{anchor}", i + 1, sp.kind.as_str(), sp.target_ref);
        }
    }
    Ok(())
}

fn mllm_for(kind: BackendKind, config: Option<&Path>) -> Res<Arc<dyn MllmBackend>> {
    Ok(match kind {
        BackendKind::Mock => Arc::new(MockMllm::default()),
        BackendKind::Remote => BackendsConfig::load(config)?.remote_backends()?.mllm,
    })
}

fn cmd_dataprep(d: &Dataprep) -> Res {
    match d {
        Dataprep::Generate { magicbrush, synthetic, seed, out, backend, config } => {
            let (records, tag): (Vec<SourceRecord>, String) = match (magicbrush, synthetic) {
                (Some(root), _) => (ingest_magicbrush(root)?, "magicbrush".into()),
                (None, Some(n)) => (
                    synthesize_records(*n, *seed, SceneLayout::default(), ClauseLexicon::builtin())?,
                    format!("synthetic-seed{seed}"),
                ),
                (None, None) => return Err("one of --magicbrush or --synthetic is required".into()),
            };
            let mllm = mllm_for(*backend, config.as_deref())?;
            let (entries, dropped) = build_entries(&records, mllm.as_ref());
            for (id, e) in &dropped {
                log::warn!("dropped {id}: {e}");
            }
            let m = write_dataset(&entries, out, &tag, Some(records.len()))?;
            println!(
                "wrote {} samples to {} (attempted {}, retained {})",
                m.count,
                out.display(),
                m.attempted,
                m.retained
            );
            for (kind, n) in &m.per_kind {
                println!("  {kind}: {n}");
            }
            Ok(())
        }
        Dataprep::FormatSft { dataset, out } => {
            let (entries, _) = read_dataset(dataset)?;
            let n = write_sft(&entries, out)?;
            println!("wrote {n} dialogues to {}", out.display());
            Ok(())
        }
    }
}

fn cmd_eval(e: &Eval) -> Res {
    let Eval::Run { corpus, model, report, out, embedder, judge, dilation, workers, config } = e;
    if !model.is_empty() && model.len() != corpus.len() {
        return Err(format!("{} --model names for {} corpora", model.len(), corpus.len()).into());
    }
    let cfg = match (embedder, judge) {
        (EmbedderArg::Remote, _) | (_, JudgeArg::Remote) => Some(BackendsConfig::load(config.as_deref())?),
        _ => None,
    };
    let emb: Box<dyn EmbeddingBackend> = match embedder {
        EmbedderArg::Meanpool => Box::new(MeanPoolEmbedder),
        EmbedderArg::Histogram => Box::new(ColorHistogramEmbedder),
        EmbedderArg::Remote => Box::new(cfg.as_ref().expect("loaded above").remote_embedding()?),
    };
    let jdg: Box<dyn JudgeBackend> = match judge {
        JudgeArg::Fixed => Box::new(FixedJudge::default()),
        JudgeArg::Remote => Box::new(cfg.as_ref().expect("loaded above").remote_judge()?),
    };
    let mut reports = Vec::new();
    for (i, dir) in corpus.iter().enumerate() {
        let name = model.get(i).cloned().unwrap_or_else(|| {
            dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
        });
        let records = read_eval_corpus(dir)?;
        let r = evaluate(&records, &name, emb.as_ref(), jdg.as_ref(), *dilation, *workers);
        for (id, err) in &r.errors {
            log::warn!("{name}: sample {id} failed: {err}");
        }
        for row in &r.rows {
            for w in &row.warnings {
                log::warn!("{name}: sample {}: {w}", row.sample_id);
            }
        }
        reports.push(r);
    }
    let text = emit_report(&reports, *report);
    match out {
        Some(p) => std::fs::write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn announce(addr: SocketAddr) {
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
}

async fn shutdown() {
    let _ = tokio::signal::ctrl_c().await;
}

fn cmd_serve(a: &ServeArgs) -> Res {
    let service = EditService::open(
        SessionStore::open(&a.store)?,
        a.policy.backends()?,
        a.policy.policy(),
        lexicon(a.policy.lexicon.as_deref())?,
    )?;
    let state = ApiState { service: Arc::new(service), token: a.token.clone() };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.bind).await?;
        announce(listener.local_addr()?);
        axum::serve(listener, api::router(state)).with_graceful_shutdown(shutdown()).await?;
        Ok(())
    })
}

fn cmd_mock_backends(bind: SocketAddr, write_config: Option<&Path>) -> Res {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        let addr = listener.local_addr()?;
        if let Some(p) = write_config {
            std::fs::write(p, mockserver::config_toml(&format!("http://{addr}")))?;
        }
        announce(addr);
        let app = mockserver::router(Arc::new(MockBackends::default()));
        axum::serve(listener, app).with_graceful_shutdown(shutdown()).await?;
        Ok(())
    })
}

fn parse_objects(text: &str) -> Res<Vec<(&'static str, Shape)>> {
    text.split(',')
        .map(|item| {
            let mut words = item.split_whitespace();
            let (Some(c), Some(sh), None) = (words.next(), words.next(), words.next()) else {
                return Err(format!("bad object {item:?}, expected \"color shape\"").into());
            };
            let color = PALETTE
                .iter()
                .map(|(n, _)| *n)
                .find(|n| n.eq_ignore_ascii_case(c))
                .ok_or_else(|| format!("unknown color {c:?}"))?;
            let shape = Shape::ALL
                .into_iter()
                .find(|s| s.as_str().eq_ignore_ascii_case(sh))
                .ok_or_else(|| format!("unknown shape {sh:?}"))?;
            Ok((color, shape))
        })
        .collect()
}

fn cmd_scene(s: &SceneCmd) -> Res {
    let SceneCmd::Gen { seed, out, cols, rows, objects } = s;
    let spec = objects.as_deref().map(parse_objects).transpose()?;
    let scene = generate_scene_with(*seed, spec.as_deref(), SceneLayout { cols: *cols, rows: *rows })?;
    std::fs::write(out, encode_image_png(&scene.image)?)?;
    for o in &scene.objects {
        println!("{} at ({}, {})", o.name(), o.bbox.x0, o.bbox.y0);
    }
    Ok(())
}

fn run(cli: Cli) -> Res {
    match &cli.command {
        Command::Edit(a) => cmd_edit(a),
        Command::Decompose { instruction, lexicon, json } => cmd_decompose(instruction, lexicon.as_deref(), *json),
        Command::Dataprep(d) => cmd_dataprep(d),
        Command::Eval(e) => cmd_eval(e),
        Command::Serve(a) => cmd_serve(a),
        Command::MockBackends { bind, write_config } => cmd_mock_backends(*bind, write_config.as_deref()),
        Command::Scene(s) => cmd_scene(s),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
