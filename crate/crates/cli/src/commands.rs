use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use lorafuse_core::bench::{
    ablation_csv, all_cells, content_cells, criterion_ablation, evaluate, make_dataset, render,
    scale_ablation, style_cells, train_adapter, train_base, Bench, PolicySpec, ReportHeader,
};
use lorafuse_core::diffusion::{encode_pgm, sample, square_side};
use lorafuse_core::fusion::{FusedDenoiser, SelectionTrace};
use lorafuse_core::guidance::{generate_references, GuidanceContext};
use lorafuse_core::model::{load_weights, save_weights, DenoiserModel, LoraAdapter};

use crate::config::{sha256_hex, RunConfig};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.csv";
pub const DIGEST_FILE: &str = "SHA256SUMS";
pub const DIR_CONFIG: &str = "config.toml";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// sha256sum-style listing of `files`, named relative to `base`.
fn digest_listing(base: &Path, files: &[PathBuf]) -> Result<String, CliError> {
    let mut out = String::new();
    for f in files {
        let name = f.strip_prefix(base).unwrap_or(f);
        let _ = writeln!(out, "{}  {}", sha256_hex(&read(f)?), name.display());
    }
    Ok(out)
}

/// Writes `<out>.config.toml` and `<out>.sha256` next to a file output.
fn provenance(out: &Path, cfg: &RunConfig, files: &[PathBuf]) -> Result<(), CliError> {
    write(&sidecar(out, ".config.toml"), cfg.to_toml())?;
    let base = out.parent().unwrap_or(Path::new(""));
    write(&sidecar(out, ".sha256"), digest_listing(base, files)?)
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<DenoiserModel, CliError> {
    let mut model = DenoiserModel::from_named(&load_weights(path)?)?;
    if let Some(layers) = &cfg.model.adapted_layers {
        model.set_adapted_layers(layers)?;
    }
    Ok(model)
}

fn load_adapter(path: &Path, model: &DenoiserModel) -> Result<LoraAdapter, CliError> {
    let adapter = LoraAdapter::from_named(&load_weights(path)?)?;
    adapter.validate_against(model)?;
    Ok(adapter)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l:?}");
    }
    out
}

pub fn gen_data(out: &Path, seed: u64, n: usize, mut cfg: RunConfig) -> Result<(), CliError> {
    cfg.data.seed = seed;
    let spec = cfg.synthetic();
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let cells = all_cells();
    let mut manifest = String::from("file,content,style,index\n");
    let mut files = Vec::with_capacity(n + 1);
    for i in 0..n {
        let (content, style) = cells[i % cells.len()];
        let index = i / cells.len();
        let image = render(&spec, content, style, index)?;
        let name = format!("{}_{}_{:04}.pgm", content.name(), style.name(), index);
        let path = out.join(&name);
        write(&path, encode_pgm(&image, spec.side, spec.side)?)?;
        let _ = writeln!(
            manifest,
            "{name},{},{},{index}",
            content.name(),
            style.name()
        );
        files.push(path);
    }
    let manifest_path = out.join(MANIFEST);
    write(&manifest_path, manifest)?;
    files.push(manifest_path);
    files.sort();
    let config_path = out.join(DIR_CONFIG);
    write(&config_path, cfg.to_toml())?;
    files.push(config_path);
    write(&out.join(DIGEST_FILE), digest_listing(out, &files)?)
}

pub fn train_base_cmd(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let data = make_dataset(&cfg.synthetic(), &all_cells(), cfg.train.images_per_cell)?;
    let (model, losses) = train_base(
        &cfg.model_config(),
        &data,
        &cfg.schedule()?,
        &cfg.base_train(),
    )?;
    save_weights(out, &model.to_named())?;
    let loss_path = sidecar(out, ".loss.csv");
    write(&loss_path, loss_csv(&losses))?;
    provenance(out, cfg, &[out.to_path_buf(), loss_path])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Which {
    Content,
    Style,
}

pub fn train_lora_cmd(
    which: Which,
    base: &Path,
    out: &Path,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    if !base.is_file() {
        return Err(CliError::Usage(format!(
            "base weights {} not found",
            base.display()
        )));
    }
    let model = load_model(base, cfg)?;
    let cells = match which {
        Which::Content => content_cells(),
        Which::Style => style_cells(),
    };
    let data = make_dataset(&cfg.synthetic(), &cells, cfg.train.images_per_cell)?;
    let train = cfg.adapter_train(which == Which::Style);
    let (adapter, losses) = train_adapter(&model, &data, &cfg.schedule()?, &train, cfg.model.rank)?;
    save_weights(out, &adapter.to_named()?)?;
    let loss_path = sidecar(out, ".loss.csv");
    write(&loss_path, loss_csv(&losses))?;
    provenance(out, cfg, &[out.to_path_buf(), loss_path])
}

pub struct GenerateArgs {
    pub base: PathBuf,
    pub content: Option<PathBuf>,
    pub style: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out: PathBuf,
    pub trace: PathBuf,
}

#[derive(Serialize)]
struct GenerateMeta<'a> {
    config_hash: String,
    image_sha256: String,
    policy: String,
    guidance: bool,
    m: f64,
    seed: u64,
    steps: usize,
    final_residual: Option<f64>,
    trace: &'a str,
}

pub fn generate(args: &GenerateArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(&args.base, cfg)?;
    let content = args
        .content
        .as_deref()
        .map(|p| load_adapter(p, &model))
        .transpose()?;
    let style = args
        .style
        .as_deref()
        .map(|p| load_adapter(p, &model))
        .transpose()?;
    let policy = cfg.policy()?;
    let fused = FusedDenoiser::with_temperature(
        &model,
        content.as_ref(),
        style.as_ref(),
        policy,
        cfg.fusion.temperature,
    )?;
    let schedule = cfg.schedule()?;
    let sampler = cfg.sampler();
    let guidance = if cfg.guidance.enabled {
        let ctx = match &args.embeddings {
            Some(path) => {
                GuidanceContext::load_embeddings(path, model.input_dim(), cfg.guidance.m)?
            }
            None => {
                let (Some(c), Some(s)) = (&content, &style) else {
                    return Err(CliError::Usage(
                        "guidance needs --content and --style (for references) or --embeddings"
                            .into(),
                    ));
                };
                let refs = generate_references(&model, c, s, &schedule, &sampler)?;
                GuidanceContext::new(refs.content, refs.style, cfg.guidance.m)?
            }
        };
        Some(ctx.with_stride(cfg.guidance.stride)?)
    } else {
        None
    };
    let output = sample(&fused, &schedule, guidance.as_ref(), &sampler)?;
    let side = square_side(model.input_dim())?;
    let pgm = encode_pgm(&output.image, side, side)?;
    write(&args.out, &pgm)?;
    write(&args.trace, output.trace.to_csv())?;
    let meta = GenerateMeta {
        config_hash: cfg.hash(),
        image_sha256: sha256_hex(&pgm),
        policy: policy.label(),
        guidance: guidance.is_some(),
        m: cfg.guidance.m,
        seed: sampler.seed,
        steps: sampler.num_steps,
        final_residual: output.final_residual,
        trace: &args.trace.to_string_lossy(),
    };
    let meta_path = sidecar(&args.out, ".json");
    let mut json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    json.push('\n');
    write(&meta_path, json)?;
    provenance(
        &args.out,
        cfg,
        &[args.out.clone(), args.trace.clone(), meta_path],
    )
}

pub fn evaluate_cmd(
    seeds: usize,
    out: &Path,
    ablations: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if cfg.fusion.temperature != 1.0 {
        return Err(CliError::Usage(
            "evaluate scores selection at temperature 1 only".into(),
        ));
    }
    let schedule = cfg.schedule()?;
    let (model, content, style) = match (&cfg.paths.base, &cfg.paths.content, &cfg.paths.style) {
        (Some(b), Some(c), Some(s)) => {
            let model = load_model(b, cfg)?;
            let content = load_adapter(c, &model)?;
            let style = load_adapter(s, &model)?;
            (model, content, style)
        }
        (None, None, None) => {
            let bench = Bench::train(&cfg.bench()?)?;
            (bench.model, bench.content, bench.style)
        }
        _ => {
            return Err(CliError::Usage(
                "paths.base, paths.content and paths.style must be given together".into(),
            ))
        }
    };
    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| cfg.sampler.seed + s).collect();
    let steps = cfg.sampler.steps;
    let criterion = cfg.fusion.criterion;
    let specs = PolicySpec::comparison(criterion, cfg.guidance.m);
    let report = evaluate(
        &model, &content, &style, &schedule, &specs, &seed_list, steps,
    )?;
    let header = ReportHeader {
        config_hash: cfg.hash(),
        criterion,
    };
    write(out, report.to_csv(&header))?;
    let mut files = vec![out.to_path_buf()];
    if let Some(dir) = ablations {
        let rows = criterion_ablation(&model, &content, &style, &schedule, &seed_list, steps)?;
        let path = dir.join("criterion.csv");
        write(&path, ablation_csv("criterion", &rows))?;
        files.push(path);
        let rows = scale_ablation(
            &model, &content, &style, &schedule, criterion, &seed_list, steps,
        )?;
        let path = dir.join("scale.csv");
        write(&path, ablation_csv("m", &rows))?;
        files.push(path);
    }
    provenance(out, cfg, &files)
}

/// Writes per-layer frequencies to `out` and the step × layer matrix
/// (1 = content, 0 = style) to `<out>.matrix.csv`.
pub fn inspect_trace(input: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(input).map_err(|e| CliError::io(input, e))?;
    let trace = SelectionTrace::from_csv(&text)?;
    let mut summary = String::from("layer,content_freq,style_freq,count\n");
    for f in trace.frequencies() {
        let _ = writeln!(
            summary,
            "{},{:?},{:?},{}",
            f.layer, f.content, f.style, f.count
        );
    }
    write(out, summary)?;
    let (layers, matrix) = trace.choice_matrix();
    let mut grid = String::from("step");
    for l in &layers {
        let _ = write!(grid, ",layer_{l}");
    }
    grid.push('\n');
    for (step, row) in matrix.iter().enumerate() {
        let _ = write!(grid, "{step}");
        for &c in row {
            grid.push_str(match c {
                'C' => ",1",
                'S' => ",0",
                _ => ",",
            });
        }
        grid.push('\n');
    }
    let matrix_path = sidecar(out, ".matrix.csv");
    write(&matrix_path, grid)?;
    let base = out.parent().unwrap_or(Path::new(""));
    write(
        &sidecar(out, ".sha256"),
        digest_listing(base, &[out.to_path_buf(), matrix_path])?,
    )
}
