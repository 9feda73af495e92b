use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, ValueEnum};
use pathcot::agent::{run_ablation, run_case, AgentConfig, AgentError, CaseEnv, FileProposer, OrderPolicy};
use pathcot::clock::SystemClock;
use pathcot::gateway::{EndpointSettings, ModelEndpoint, Pricing, PromptStage, RetryPolicy, ScriptedEndpoint};
use pathcot::images::{crop_path, sha256_hex, thumbnail_path, CropRequest, FileImageProvider, ImageError, ImageProvider, ImageRef};
use pathcot::log::SlideMeta;
use serde::Deserialize;

use crate::http_endpoint::HttpEndpoint;
use crate::io::{read_json, write_json, CmdResult, Failure};

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Backend {
    /// Canned answers per prompt stage; `{region}` in the ROI answer becomes
    /// the region number.
    Scripted {
        #[serde(default = "scripted_model")]
        model: String,
        responses: BTreeMap<PromptStage, String>,
        #[serde(default)]
        fail_regions: Vec<usize>,
    },
    /// Chat-completions over HTTP, configured from the environment.
    Http {
        #[serde(default = "default_timeout")]
        timeout_s: u64,
        #[serde(default)]
        max_tokens: Option<u32>,
    },
}

fn scripted_model() -> String {
    "scripted".into()
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Deserialize)]
struct EndpointConfig {
    #[serde(flatten)]
    backend: Backend,
    #[serde(default)]
    pricing: Pricing,
    #[serde(default)]
    retry: RetryPolicy,
}

/// References computed from the naming scheme without touching disk, for
/// dry runs against a scripted endpoint. The hash covers the path only.
struct UncheckedImages;

fn unchecked(path: String, side: u32) -> ImageRef {
    let content_hash = sha256_hex(path.as_bytes());
    ImageRef { path, width: side, height: side, content_hash }
}

impl ImageProvider for UncheckedImages {
    fn get_crop(&self, req: &CropRequest) -> Result<ImageRef, ImageError> {
        Ok(unchecked(crop_path(&req.slide_id, &req.bbox), req.target_px))
    }

    fn get_thumbnail(&self, slide_id: &str) -> Result<ImageRef, ImageError> {
        Ok(unchecked(thumbnail_path(slide_id), 1024))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    Forward,
    Reverse,
    Random,
}

fn policy(order: OrderArg, seed: Option<u64>) -> CmdResult<OrderPolicy> {
    Ok(match order {
        OrderArg::Forward => OrderPolicy::FORWARD,
        OrderArg::Reverse => OrderPolicy::REVERSE,
        OrderArg::Random => {
            OrderPolicy::random(seed.ok_or_else(|| Failure::schema("--order random needs --seed"))?)
        }
    })
}

#[derive(Debug, Args)]
pub struct CaseArgs {
    /// Slide metadata (JSON).
    #[arg(long)]
    slide: PathBuf,
    /// Detector output: a list of `{box, score}` or a map from slide id to such lists.
    #[arg(long)]
    proposals: PathBuf,
    /// Endpoint configuration (JSON).
    #[arg(long)]
    endpoint: PathBuf,
    /// Image root holding `crops/{slide}/...`. Without it, references are not checked.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, value_enum, default_value = "forward")]
    order: OrderArg,
    /// Most regions to analyze; all when omitted.
    #[arg(long)]
    cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    case: CaseArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "forward,reverse,random")]
    orders: Vec<OrderArg>,
    #[arg(long, value_delimiter = ',', required = true)]
    caps: Vec<usize>,
}

struct Setup {
    slide: SlideMeta,
    proposer: FileProposer,
    endpoint: Box<dyn ModelEndpoint>,
    images: Box<dyn ImageProvider>,
    base: AgentConfig,
}

fn setup(args: &CaseArgs) -> CmdResult<Setup> {
    let slide: SlideMeta = read_json(&args.slide)?;
    let proposer = FileProposer::load(&args.proposals).map_err(Failure::schema)?;
    let cfg: EndpointConfig = read_json(&args.endpoint)?;
    let images: Box<dyn ImageProvider> = match &args.images {
        Some(dir) => Box::new(FileImageProvider::open(dir).map_err(Failure::failed)?),
        None => Box::new(UncheckedImages),
    };
    let endpoint: Box<dyn ModelEndpoint> = match cfg.backend {
        Backend::Scripted { model, responses, fail_regions } => {
            let ep = responses.into_iter().fold(ScriptedEndpoint::new(model), |ep, (s, t)| ep.respond(s, t));
            Box::new(ep.fail_regions(fail_regions))
        }
        Backend::Http { timeout_s, max_tokens } => {
            let settings = EndpointSettings::from_env()
                .map_err(|name| Failure::schema(format!("environment variable {name} is not set")))?;
            let root = args
                .images
                .clone()
                .ok_or_else(|| Failure::schema("the http endpoint needs --images to send crops"))?;
            tracing::info!(base_url = %settings.base_url, model = %settings.model, "using http endpoint");
            Box::new(HttpEndpoint::new(settings, root, Duration::from_secs(timeout_s), max_tokens))
        }
    };
    let base = AgentConfig { concurrency: args.concurrency, retry: cfg.retry, pricing: cfg.pricing, ..AgentConfig::default() };
    Ok(Setup { slide, proposer, endpoint, images, base })
}

fn agent_failure(e: AgentError) -> Failure {
    match e {
        AgentError::InvalidProposal { .. } | AgentError::MissingSeed => Failure::schema(e),
        _ => Failure::failed(e),
    }
}

pub fn diagnose(args: DiagnoseArgs) -> CmdResult {
    let s = setup(&args.case)?;
    let env = CaseEnv { proposer: &s.proposer, endpoint: s.endpoint.as_ref(), images: s.images.as_ref(), clock: &SystemClock };
    let cfg = AgentConfig { order: policy(args.order, args.case.seed)?, cap: args.cap, ..s.base };
    let result = run_case(&s.slide, &env, &cfg).map_err(agent_failure)?;
    tracing::info!(
        case = %result.case_id,
        regions = result.roi_analyses.len(),
        cost_usd = result.cost.cost_usd,
        "case finished"
    );
    write_json(&args.case.out, &result)
}

pub fn ablate(args: AblateArgs) -> CmdResult {
    let s = setup(&args.case)?;
    let env = CaseEnv { proposer: &s.proposer, endpoint: s.endpoint.as_ref(), images: s.images.as_ref(), clock: &SystemClock };
    let mut variants = Vec::new();
    for &order in &args.orders {
        let p = policy(order, args.case.seed)?;
        variants.extend(args.caps.iter().map(|&c| (p, Some(c))));
    }
    let runs = run_ablation(&s.slide, &env, &s.base, &variants);
    let failed = runs.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        tracing::warn!(failed, total = runs.len(), "some ablation runs failed");
    }
    write_json(&args.case.out, &runs)
}

