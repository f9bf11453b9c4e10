//! The `agglo` binary: one subcommand per pipeline stage, flat key-value
//! config files with flag overrides, and fully resolved config emitted next
//! to every output.
//!
//! Determinism contract: given identical inputs, seed, and resolved config,
//! every command writes byte-identical outputs for any `--threads` value.
//! Exit codes: 0 ok, 1 I/O or malformed files, 2 validation, 3 numeric
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{self, AnalysisError, RoutedTokenSet};
use crate::curation::{self, CurationError};
use crate::evalkit::{self, EnsembleConfig, EvalError, KnnConfig};
use crate::io::{self, sig9, IoError};
use crate::loss::{self, LossError, PerImageFeatures, RelationMode, SmoothL1Config};
use crate::packer::{self, BlendPool, BlendTarget, PackError, PackerConfig};
use crate::phis::{self, PhisError};
use crate::types::{CoreError, EmbeddingMatrix, ImageTokenRecord, TeacherConfig};

#[derive(Debug, Parser)]
#[command(name = "agglo", version, about = "Multi-teacher distillation recipe toolkit")]
pub struct Cli {
    /// Worker thread cap; outputs are identical for any value.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Flat key-value config file (TOML syntax, keys = long flag names);
    /// command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pack a manifest of images into token-budgeted sequences.
    Pack(PackArgs),
    /// Plan a multi-resolution blend over image pools.
    Blend(BlendArgs),
    /// Fit, apply, invert, or diagnose a feature standardization transform.
    Phis(PhisArgs),
    /// Cluster embeddings hierarchically and draw a balanced sample.
    Curate(CurateArgs),
    /// Compute distillation losses over a feature manifest.
    Loss(LossArgs),
    /// kNN / retrieval / head-ensemble evaluation.
    Eval(EvalArgs),
    /// Expert-vs-teacher-layer CKA alignment matrix.
    Cka(CkaArgs),
    /// Emit normalized rotary coordinate grids and phases.
    Rope(RopeArgs),
}

/// Flat key-value config file contents.
pub struct FileConfig {
    table: toml::Table,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let table = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| anyhow!(ConfigParseError(format!("{}: {e}", p.display()))))?
            }
        };
        Ok(Self { table })
    }

    fn str_value(&self, key: &str) -> Result<Option<String>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(other) => bail!("config key '{key}' must be a string, got {other}"),
        }
    }

    fn u64_value(&self, key: &str) -> Result<Option<u64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(other) => bail!("config key '{key}' must be a non-negative integer, got {other}"),
        }
    }

    fn f64_value(&self, key: &str) -> Result<Option<f64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(v)) => Ok(Some(*v)),
            Some(toml::Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(other) => bail!("config key '{key}' must be a number, got {other}"),
        }
    }

    fn bool_value(&self, key: &str) -> Result<Option<bool>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Boolean(b)) => Ok(Some(*b)),
            Some(other) => bail!("config key '{key}' must be a boolean, got {other}"),
        }
    }
}

/// Wrapper marking config-file parse problems as I/O-class failures.
#[derive(Debug)]
struct ConfigParseError(String);

impl std::fmt::Display for ConfigParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config parse error: {}", self.0)
    }
}

impl std::error::Error for ConfigParseError {}

fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file).ok_or_else(|| anyhow!("missing required option --{name} (or config key '{name}')"))
}

fn defaulted<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Runs one parsed invocation. The caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Pack(args) => cmd_pack(args, &file),
        Command::Blend(args) => cmd_blend(args, &file),
        Command::Phis(args) => cmd_phis(args, &file),
        Command::Curate(args) => cmd_curate(args, &file),
        Command::Loss(args) => cmd_loss(args, &file),
        Command::Eval(args) => cmd_eval(args, &file),
        Command::Cka(args) => cmd_cka(args, &file),
        Command::Rope(args) => cmd_rope(args, &file),
    }
}

/// Maps an error chain to the documented exit codes.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(io_err) = cause.downcast_ref::<IoError>() {
            return match io_err {
                IoError::Io(_) | IoError::Format { .. } => 1,
                IoError::Invalid { .. } => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<ConfigParseError>().is_some()
        {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<PhisError>() {
            return match e {
                PhisError::NotPsd { .. } | PhisError::DegenerateCovariance => 3,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<LossError>() {
            return match e {
                LossError::ZeroNormVector => 3,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<AnalysisError>() {
            return match e {
                AnalysisError::DegenerateInput => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<PackError>().is_some()
            || cause.downcast_ref::<CurationError>().is_some()
            || cause.downcast_ref::<EvalError>().is_some()
            || cause.downcast_ref::<CoreError>().is_some()
        {
            return 2;
        }
    }
    2
}

fn write_resolved_config<T: Serialize>(path: &Path, config: &T) -> Result<()> {
    let value = serde_json::to_value(config).context("serializing resolved config")?;
    io::write_json_pretty(path, &value)?;
    Ok(())
}

fn config_sidecar(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

// ---------------------------------------------------------------------------
// pack

#[derive(Debug, Args)]
pub struct PackArgs {
    /// JSON Lines manifest: {"id", "width", "height"} per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    patch_size: Option<u32>,
    /// Token budget per sequence.
    #[arg(long)]
    c_max: Option<usize>,
    /// CLS + register tokens prepended per image.
    #[arg(long)]
    extra_tokens: Option<usize>,
    #[arg(long)]
    max_images: Option<usize>,
    #[arg(long)]
    ranks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackRunConfig {
    pub manifest: PathBuf,
    pub patch_size: u32,
    pub c_max: usize,
    pub extra_tokens: usize,
    pub max_images: usize,
    pub ranks: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn cmd_pack(args: PackArgs, file: &FileConfig) -> Result<()> {
    let cfg = PackRunConfig {
        manifest: required(args.manifest, file.str_value("manifest")?.map(PathBuf::from), "manifest")?,
        patch_size: defaulted(args.patch_size, file.u64_value("patch-size")?.map(|v| v as u32), 16),
        c_max: defaulted(args.c_max, file.u64_value("c-max")?.map(|v| v as usize), 2600),
        extra_tokens: defaulted(args.extra_tokens, file.u64_value("extra-tokens")?.map(|v| v as usize), 5),
        max_images: defaulted(args.max_images, file.u64_value("max-images")?.map(|v| v as usize), 16),
        ranks: defaulted(args.ranks, file.u64_value("ranks")?.map(|v| v as usize), 1),
        seed: defaulted(args.seed, file.u64_value("seed")?, 0),
        out_dir: required(args.out_dir, file.str_value("out-dir")?.map(PathBuf::from), "out-dir")?,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    if cfg.ranks == 0 {
        bail!("--ranks must be at least 1");
    }

    let manifest = io::read_image_manifest(&cfg.manifest)?;
    let records: Vec<ImageTokenRecord> = manifest
        .iter()
        .map(|e| ImageTokenRecord::new(e.id.clone(), e.width, e.height, cfg.patch_size))
        .collect::<Result<_, _>>()?;
    let packer_cfg = PackerConfig::new(cfg.c_max, cfg.extra_tokens, cfg.max_images)?;
    let plan = packer::plan_packing(&records, &packer_cfg, cfg.seed)?;
    let stats = packer::padding_stats(&plan, &packer_cfg);
    let view = packer::partition_across_ranks(&plan, cfg.ranks);

    let sequences: Vec<serde_json::Value> = plan
        .sequences
        .iter()
        .map(|seq| {
            let mask = packer::build_segment_mask(seq, cfg.c_max);
            json!({
                "entries": seq.entries,
                "used_tokens": seq.used_tokens,
                "segment_ids": mask.segment_ids(),
            })
        })
        .collect();
    let plan_json = json!({
        "c_max": cfg.c_max,
        "sequences": sequences,
        "unassigned": plan.unassigned,
        "b_global": view.b_global(),
        "rank_loads": view.rank_token_loads(),
        "per_rank_sequences": view.per_rank_sequences(),
    });
    io::write_json_pretty(&cfg.out_dir.join("plan.json"), &plan_json)?;
    let stats_json = json!({
        "padding_fraction": sig9(stats.padding_fraction),
        "tokens_total": stats.tokens_total,
        "tokens_padded": stats.tokens_padded,
        "sequences": plan.sequences.len(),
        "images": plan.total_images(),
    });
    io::write_json_pretty(&cfg.out_dir.join("stats.json"), &stats_json)?;
    write_resolved_config(&cfg.out_dir.join("config.json"), &cfg)?;
    eprintln!(
        "packed {} images into {} sequences (padding {:.4})",
        plan.total_images(),
        plan.sequences.len(),
        stats.padding_fraction
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// blend

#[derive(Debug, Args)]
pub struct BlendArgs {
    /// Blend spec JSON: {"pools": [{"manifest", "min_native"?, "max_native"?}],
    /// "targets": [{"resolution_cap", "weight"}]}.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlendPoolSpec {
    manifest: PathBuf,
    #[serde(default = "default_min_native")]
    min_native: u32,
    #[serde(default = "default_max_native")]
    max_native: u32,
}

fn default_min_native() -> u32 {
    1
}

fn default_max_native() -> u32 {
    u32::MAX
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlendSpec {
    pools: Vec<BlendPoolSpec>,
    targets: Vec<BlendTarget>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlendRunConfig {
    pub spec: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    resolved_spec: BlendSpec,
}

fn cmd_blend(args: BlendArgs, file: &FileConfig) -> Result<()> {
    let spec_path = required(args.spec, file.str_value("spec")?.map(PathBuf::from), "spec")?;
    let out = required(args.out, file.str_value("out")?.map(PathBuf::from), "out")?;
    let seed = defaulted(args.seed, file.u64_value("seed")?, 0);

    let spec: BlendSpec = serde_json::from_str(&std::fs::read_to_string(&spec_path)?)
        .map_err(|e| IoError::Format { path: spec_path.clone(), reason: e.to_string() })?;
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let pools: Vec<BlendPool> = spec
        .pools
        .iter()
        .map(|p| -> Result<BlendPool> {
            Ok(BlendPool {
                images: io::read_image_manifest(&base.join(&p.manifest))?,
                native_resolution_range: (p.min_native, p.max_native),
            })
        })
        .collect::<Result<_>>()?;
    let assignments = packer::plan_multires_blend(&pools, &spec.targets)?;

    let mut writer = std::io::BufWriter::new(std::fs::File::create(&out)?);
    for a in &assignments {
        serde_json::to_writer(&mut writer, a)?;
        std::io::Write::write_all(&mut writer, b"\n")?;
    }
    std::io::Write::flush(&mut writer)?;

    let cfg = BlendRunConfig { spec: spec_path, out: out.clone(), seed, resolved_spec: spec };
    write_resolved_config(&config_sidecar(&out), &cfg)?;
    eprintln!("blended {} images -> {}", assignments.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// phis

#[derive(Debug, Args)]
pub struct PhisArgs {
    #[command(subcommand)]
    action: PhisAction,
}

#[derive(Debug, Subcommand)]
enum PhisAction {
    /// Estimate moments on an embedding file and fit the transform.
    Fit(PhisFitArgs),
    /// Standardize embeddings with a fitted transform.
    Apply(PhisMapArgs),
    /// Map standardized embeddings back to the original space.
    Invert(PhisMapArgs),
    /// Score a stream for multimodality.
    Diagnose(PhisDiagnoseArgs),
}

#[derive(Debug, Args)]
struct PhisFitArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output prefix; writes PREFIX.json, PREFIX.mean.f32, PREFIX.rot.f32.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
    #[arg(long)]
    multimodality_threshold: Option<f64>,
    /// Fit even if the stream is flagged as multimodal.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhisFitRunConfig {
    pub input: PathBuf,
    pub out_prefix: PathBuf,
    pub multimodality_threshold: f64,
    pub force: bool,
    pub seed: u64,
}

#[derive(Debug, Args)]
struct PhisMapArgs {
    #[arg(long)]
    transform: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhisMapRunConfig {
    pub transform: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub direction: String,
    pub seed: u64,
}

#[derive(Debug, Args)]
struct PhisDiagnoseArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhisDiagnoseRunConfig {
    pub input: PathBuf,
    pub threshold: f64,
    pub out: PathBuf,
    pub seed: u64,
}

fn cmd_phis(args: PhisArgs, file: &FileConfig) -> Result<()> {
    match args.action {
        PhisAction::Fit(a) => {
            let cfg = PhisFitRunConfig {
                input: required(a.input, file.str_value("input")?.map(PathBuf::from), "input")?,
                out_prefix: required(
                    a.out_prefix,
                    file.str_value("out-prefix")?.map(PathBuf::from),
                    "out-prefix",
                )?,
                multimodality_threshold: defaulted(
                    a.multimodality_threshold,
                    file.f64_value("multimodality-threshold")?,
                    0.5,
                ),
                force: a.force || file.bool_value("force")?.unwrap_or(false),
                seed: file.u64_value("seed")?.unwrap_or(0),
            };
            let samples = io::read_emb(&cfg.input)?;
            // Streams with separated modes have untrustworthy moments; refuse
            // to standardize them unless forced.
            if samples.rows() >= 10 {
                let report = phis::multimodality_score(&samples, cfg.multimodality_threshold)?;
                if report.flagged && !cfg.force {
                    bail!(
                        "stream {} is flagged as multimodal (score {:.4} > {}); \
                         standardizing it would capture between-mode statistics. \
                         Pass --force to fit anyway.",
                        cfg.input.display(),
                        report.score,
                        cfg.multimodality_threshold
                    );
                }
            }
            let moments = phis::estimate_moments(&samples)?;
            let transform = phis::fit_phis(&moments)?;
            io::save_transform(&cfg.out_prefix, &transform)?;
            write_resolved_config(&config_sidecar(&cfg.out_prefix), &cfg)?;
            eprintln!(
                "fit transform: dim {}, scale {:.6} -> {}.json",
                transform.dim(),
                transform.scale(),
                cfg.out_prefix.display()
            );
            Ok(())
        }
        PhisAction::Apply(a) => run_phis_map(a, file, false),
        PhisAction::Invert(a) => run_phis_map(a, file, true),
        PhisAction::Diagnose(a) => {
            let cfg = PhisDiagnoseRunConfig {
                input: required(a.input, file.str_value("input")?.map(PathBuf::from), "input")?,
                threshold: defaulted(a.threshold, file.f64_value("threshold")?, 0.5),
                out: required(a.out, file.str_value("out")?.map(PathBuf::from), "out")?,
                seed: file.u64_value("seed")?.unwrap_or(0),
            };
            let samples = io::read_emb(&cfg.input)?;
            let report = phis::multimodality_score(&samples, cfg.threshold)?;
            let value = json!({
                "score": sig9(report.score),
                "flagged": report.flagged,
                "threshold": sig9(cfg.threshold),
                "rows": samples.rows(),
                "dim": samples.dim(),
            });
            io::write_json_pretty(&cfg.out, &value)?;
            write_resolved_config(&config_sidecar(&cfg.out), &cfg)?;
            eprintln!("diagnose: score {:.4}, flagged {}", report.score, report.flagged);
            Ok(())
        }
    }
}

fn run_phis_map(a: PhisMapArgs, file: &FileConfig, invert: bool) -> Result<()> {
    let cfg = PhisMapRunConfig {
        transform: required(a.transform, file.str_value("transform")?.map(PathBuf::from), "transform")?,
        input: required(a.input, file.str_value("input")?.map(PathBuf::from), "input")?,
        out: required(a.out, file.str_value("out")?.map(PathBuf::from), "out")?,
        direction: if invert { "invert".to_string() } else { "apply".to_string() },
        seed: file.u64_value("seed")?.unwrap_or(0),
    };
    let transform = io::load_transform(&cfg.transform)?;
    let input = io::read_emb(&cfg.input)?;
    let output = if invert {
        phis::invert_phis(&transform, &input)?
    } else {
        phis::apply_phis(&transform, &input)?
    };
    io::write_emb(&cfg.out, &output)?;
    write_resolved_config(&config_sidecar(&cfg.out), &cfg)?;
    eprintln!("{} {} rows -> {}", cfg.direction, input.rows(), cfg.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// curate

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Embedding shard files, concatenated in order.
    #[arg(long = "shard", num_args = 1..)]
    shards: Vec<PathBuf>,
    /// Comma-separated level sizes, finest first (e.g. 1000,100,20,5).
    #[arg(long)]
    level_ks: Option<String>,
    #[arg(long)]
    target_n: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// L2-normalize rows before clustering.
    #[arg(long)]
    l2_normalize: bool,
    /// Optional id file (one id per embedding row); defaults to row indices.
    #[arg(long)]
    ids: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurateRunConfig {
    pub shards: Vec<PathBuf>,
    pub level_ks: Vec<usize>,
    pub target_n: usize,
    pub max_iters: usize,
    pub l2_normalize: bool,
    pub ids: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn parse_level_ks(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| anyhow!("invalid level size '{part}' in --level-ks"))
        })
        .collect()
}

fn cmd_curate(args: CurateArgs, file: &FileConfig) -> Result<()> {
    let shards = if args.shards.is_empty() {
        file.str_value("shard")?
            .map(|s| s.split(',').map(PathBuf::from).collect::<Vec<_>>())
            .unwrap_or_default()
    } else {
        args.shards
    };
    if shards.is_empty() {
        bail!("at least one --shard is required");
    }
    let cfg = CurateRunConfig {
        shards,
        level_ks: parse_level_ks(&required(
            args.level_ks,
            file.str_value("level-ks")?,
            "level-ks",
        )?)?,
        target_n: required(
            args.target_n,
            file.u64_value("target-n")?.map(|v| v as usize),
            "target-n",
        )?,
        max_iters: defaulted(args.max_iters, file.u64_value("max-iters")?.map(|v| v as usize), 25),
        l2_normalize: args.l2_normalize || file.bool_value("l2-normalize")?.unwrap_or(false),
        ids: args.ids.or(file.str_value("ids")?.map(PathBuf::from)),
        seed: defaulted(args.seed, file.u64_value("seed")?, 0),
        out_dir: required(args.out_dir, file.str_value("out-dir")?.map(PathBuf::from), "out-dir")?,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut points = read_shards(&cfg.shards)?;
    if cfg.l2_normalize {
        points = l2_normalize_rows(&points);
    }
    let ids: Option<Vec<String>> = cfg.ids.as_deref().map(io::read_id_lines).transpose()?;
    if let Some(ids) = &ids {
        if ids.len() != points.rows() {
            bail!("--ids lists {} ids but the shards hold {} rows", ids.len(), points.rows());
        }
    }

    let tree = curation::build_hierarchy(&points, &cfg.level_ks, cfg.max_iters, cfg.seed)?;
    let table = curation::assign(&points, &tree)?;
    let sample = curation::hierarchical_sample(&tree, &table, cfg.target_n, cfg.seed)?;

    let id_of = |row: usize| -> String {
        match &ids {
            Some(list) => list[row].clone(),
            None => row.to_string(),
        }
    };
    io::write_id_lines(
        &cfg.out_dir.join("sampled_ids.txt"),
        &sample.iter().map(|&r| id_of(r)).collect::<Vec<_>>(),
    )?;
    io::write_assignments(
        &cfg.out_dir.join("assignments.bin"),
        table.assignments(),
        tree.num_leaves(),
    )?;

    let mut level_entries = Vec::new();
    for (i, level) in tree.levels().iter().enumerate() {
        let filename = format!("level_{}.emb", i + 1);
        io::write_emb(&cfg.out_dir.join(&filename), &level.centroids)?;
        level_entries.push(json!({
            "centroids_file": filename,
            "size": level.centroids.rows(),
            "parent_of": level.parent_of,
        }));
    }
    io::write_json_pretty(
        &cfg.out_dir.join("tree.json"),
        &json!({ "level_sizes": tree.level_sizes(), "levels": level_entries }),
    )?;
    write_resolved_config(&cfg.out_dir.join("config.json"), &cfg)?;
    eprintln!(
        "curated {} of {} rows across {} leaves",
        sample.len(),
        points.rows(),
        tree.num_leaves()
    );
    Ok(())
}

fn read_shards(paths: &[PathBuf]) -> Result<EmbeddingMatrix> {
    let mut rows = 0usize;
    let mut dim = None;
    let mut data = Vec::new();
    for path in paths {
        let shard = io::read_emb(path)?;
        match dim {
            None => dim = Some(shard.dim()),
            Some(d) if d != shard.dim() => {
                bail!(
                    "shard {} has dim {} but previous shards have {}",
                    path.display(),
                    shard.dim(),
                    d
                );
            }
            _ => {}
        }
        rows += shard.rows();
        data.extend_from_slice(shard.data());
    }
    Ok(EmbeddingMatrix::new(rows, dim.unwrap_or(0), data)?)
}

fn l2_normalize_rows(m: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut data = Vec::with_capacity(m.data().len());
    for row in m.iter_rows() {
        let norm = crate::numeric::l2_norm(row);
        if norm == 0.0 {
            data.extend_from_slice(row);
        } else {
            data.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
        }
    }
    EmbeddingMatrix::new(m.rows(), m.dim(), data).expect("normalization keeps entries finite")
}

// ---------------------------------------------------------------------------
// loss

#[derive(Debug, Args)]
pub struct LossArgs {
    /// Feature manifest JSON; paths are relative to the manifest.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Smooth-L1 transition point.
    #[arg(long)]
    beta: Option<f64>,
    /// Relational term: on (asymmetric), symmetric, or off.
    #[arg(long)]
    arkd: Option<String>,
    /// Degenerate-batch epsilon on the teacher distance scale.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRunConfig {
    pub features: PathBuf,
    pub beta: f64,
    pub arkd: String,
    pub eps: f64,
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
struct FeatureFiles {
    teacher_summary: PathBuf,
    student_summary: PathBuf,
    teacher_patches: PathBuf,
    student_patches: PathBuf,
    #[serde(default)]
    teacher_registers: Option<PathBuf>,
    #[serde(default)]
    student_registers: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct LossImageEntry {
    id: String,
    #[serde(default)]
    rank: usize,
    #[serde(default)]
    sequence: usize,
    features: BTreeMap<String, FeatureFiles>,
}

#[derive(Debug, Deserialize)]
struct LossManifest {
    teachers: Vec<TeacherConfig>,
    images: Vec<LossImageEntry>,
}

fn read_summary_row(path: &Path) -> Result<Vec<f32>> {
    let m = io::read_emb(path)?;
    if m.rows() != 1 {
        bail!("summary file {} must have exactly 1 row, found {}", path.display(), m.rows());
    }
    Ok(m.row(0).to_vec())
}

fn cmd_loss(args: LossArgs, file: &FileConfig) -> Result<()> {
    let cfg = LossRunConfig {
        features: required(args.features, file.str_value("features")?.map(PathBuf::from), "features")?,
        beta: defaulted(args.beta, file.f64_value("beta")?, 1.0),
        arkd: defaulted(args.arkd, file.str_value("arkd")?, "on".to_string()),
        eps: defaulted(args.eps, file.f64_value("eps")?, 1e-8),
        out: required(args.out, file.str_value("out")?.map(PathBuf::from), "out")?,
    seed: file.u64_value("seed")?.unwrap_or(0),
    };
    let arkd_mode = match cfg.arkd.as_str() {
        "on" | "asymmetric" => Some(RelationMode::Asymmetric),
        "symmetric" => Some(RelationMode::Symmetric),
        "off" => None,
        other => bail!("--arkd must be on|symmetric|off, got '{other}'"),
    };
    let smooth = SmoothL1Config::new(cfg.beta)?;

    let manifest: LossManifest =
        serde_json::from_str(&std::fs::read_to_string(&cfg.features)?).map_err(|e| {
            IoError::Format { path: cfg.features.clone(), reason: e.to_string() }
        })?;
    let base = cfg.features.parent().unwrap_or(Path::new(".")).to_path_buf();
    let teachers: Vec<TeacherConfig> = manifest
        .teachers
        .iter()
        .map(|t| {
            TeacherConfig::new(
                t.name.clone(),
                t.summary_dim,
                t.patch_dim,
                t.num_registers,
                t.has_register_loss,
            )
        })
        .collect::<Result<_, _>>()?;
    if teachers.is_empty() {
        return Err(LossError::EmptyTeacherSet.into());
    }
    if manifest.images.is_empty() {
        return Err(LossError::EmptyBatch.into());
    }

    let mut per_image_rows = Vec::new();
    let mut per_teacher_report = BTreeMap::new();
    let mut per_teacher_objectives = BTreeMap::new();
    for teacher in &teachers {
        let mut grouped: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        let mut teacher_rows: Vec<Vec<f32>> = Vec::new();
        let mut student_rows: Vec<Vec<f32>> = Vec::new();
        for image in &manifest.images {
            let files = image.features.get(&teacher.name).ok_or_else(|| {
                anyhow!("image '{}' has no features for teacher '{}'", image.id, teacher.name)
            })?;
            let teacher_summary = read_summary_row(&base.join(&files.teacher_summary))?;
            let student_summary = read_summary_row(&base.join(&files.student_summary))?;
            let teacher_patches = io::read_emb(&base.join(&files.teacher_patches))?;
            let student_patches = io::read_emb(&base.join(&files.student_patches))?;
            let dim = teacher_patches.dim();
            let read_regs = |p: &Option<PathBuf>| -> Result<EmbeddingMatrix> {
                match p {
                    Some(p) => Ok(io::read_emb(&base.join(p))?),
                    None => Ok(EmbeddingMatrix::zeros(0, dim)),
                }
            };
            let features = PerImageFeatures::new(
                teacher_summary.clone(),
                student_summary.clone(),
                teacher_patches,
                student_patches,
                read_regs(&files.teacher_registers)?,
                read_regs(&files.student_registers)?,
            )?;

            let summary = loss::summary_loss(&features)?;
            let patch = loss::patch_loss(&features);
            let register = loss::register_loss(&features, teacher)?;
            let combined = summary + patch + register;
            grouped.entry((image.rank, image.sequence)).or_default().push(combined);
            teacher_rows.push(teacher_summary);
            student_rows.push(student_summary);
            per_image_rows.push(json!({
                "id": image.id,
                "teacher": teacher.name,
                "summary": sig9(summary),
                "patch": sig9(patch),
                "register": sig9(register),
                "combined": sig9(combined),
            }));
        }

        // Regroup into rank -> sequence nesting for the global mean.
        let mut by_rank: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for ((rank, _seq), losses) in grouped {
            by_rank.entry(rank).or_default().push(losses);
        }
        let nested: Vec<Vec<Vec<f64>>> = by_rank.into_values().collect();
        let global = loss::global_aggregate(&nested)?;

        let arkd_json;
        let objective;
        match arkd_mode {
            Some(mode) => {
                let teacher_m = EmbeddingMatrix::from_rows(&teacher_rows)?;
                let student_m = EmbeddingMatrix::from_rows(&student_rows)?;
                let report = loss::relational_loss(&teacher_m, &student_m, &smooth, cfg.eps, mode)?;
                objective = loss::per_teacher_objective(global, report.loss);
                arkd_json = json!({
                    "loss": sig9(report.loss),
                    "teacher_scale": sig9(report.teacher_scale),
                    "median": sig9(report.median),
                    "pair_count": report.pair_count,
                    "degenerate": report.degenerate,
                });
            }
            None => {
                objective = global;
                arkd_json = serde_json::Value::Null;
            }
        }
        per_teacher_report.insert(
            teacher.name.clone(),
            json!({
                "global": sig9(global),
                "arkd": arkd_json,
                "objective": sig9(objective),
            }),
        );
        per_teacher_objectives.insert(teacher.name.clone(), objective);
    }

    let total = loss::total_loss(&per_teacher_objectives)?;
    let report = json!({
        "arkd_mode": cfg.arkd,
        "beta": sig9(cfg.beta),
        "eps": cfg.eps,
        "images": manifest.images.len(),
        "per_image": per_image_rows,
        "per_teacher": per_teacher_report,
        "total": sig9(total),
    });
    io::write_json_pretty(&cfg.out, &report)?;
    write_resolved_config(&config_sidecar(&cfg.out), &cfg)?;
    eprintln!("total loss {total:.6} over {} images -> {}", manifest.images.len(), cfg.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(subcommand)]
    task: EvalTask,
}

#[derive(Debug, Subcommand)]
enum EvalTask {
    /// kNN classification posteriors and top-1 accuracy.
    Knn(EvalKnnArgs),
    /// Query-vs-gallery cosine retrieval and Recall@1.
    Retrieval(EvalRetrievalArgs),
    /// Entropy-weighted fusion of several heads' score files.
    Ensemble(EvalEnsembleArgs),
}

#[derive(Debug, Args)]
struct EvalKnnArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    /// JSON Lines {"label": n} per train row.
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    query: Option<PathBuf>,
    /// JSON Lines {"label": n} per query row; enables top-1 accuracy.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    vote_temp: Option<f64>,
    /// Optional posteriors output (.emb).
    #[arg(long)]
    posteriors_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalKnnRunConfig {
    pub train: PathBuf,
    pub train_labels: PathBuf,
    pub query: PathBuf,
    pub truth: Option<PathBuf>,
    pub k: usize,
    pub vote_temp: f64,
    pub posteriors_out: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Args)]
struct EvalRetrievalArgs {
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// JSON Lines {"index": n} per query row; enables Recall@1.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    scores_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRetrievalRunConfig {
    pub queries: PathBuf,
    pub gallery: PathBuf,
    pub truth: Option<PathBuf>,
    pub scores_out: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Args)]
struct EvalEnsembleArgs {
    /// Head score files (.emb), one per head, same shape.
    #[arg(long = "head", num_args = 1..)]
    heads: Vec<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// JSON Lines {"label": n}: score top-1 accuracy of the fused scores.
    #[arg(long)]
    truth_labels: Option<PathBuf>,
    /// JSON Lines {"index": n}: score Recall@1 of the fused scores.
    #[arg(long)]
    truth_indices: Option<PathBuf>,
    /// Z-normalize each head's score rows before weighting and fusion
    /// (useful when heads score on very different similarity scales).
    #[arg(long)]
    z_norm: bool,
    #[arg(long)]
    fused_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEnsembleRunConfig {
    pub heads: Vec<PathBuf>,
    pub tau: f64,
    pub gamma: f64,
    pub truth_labels: Option<PathBuf>,
    pub truth_indices: Option<PathBuf>,
    pub z_norm: bool,
    pub fused_out: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
}

fn cmd_eval(args: EvalArgs, file: &FileConfig) -> Result<()> {
    match args.task {
        EvalTask::Knn(a) => {
            let cfg = EvalKnnRunConfig {
                train: required(a.train, file.str_value("train")?.map(PathBuf::from), "train")?,
                train_labels: required(
                    a.train_labels,
                    file.str_value("train-labels")?.map(PathBuf::from),
                    "train-labels",
                )?,
                query: required(a.query, file.str_value("query")?.map(PathBuf::from), "query")?,
                truth: a.truth.or(file.str_value("truth")?.map(PathBuf::from)),
                k: defaulted(a.k, file.u64_value("k")?.map(|v| v as usize), 20),
                vote_temp: defaulted(a.vote_temp, file.f64_value("vote-temp")?, 0.07),
                posteriors_out: a.posteriors_out,
                out: required(a.out, file.str_value("out")?.map(PathBuf::from), "out")?,
                seed: file.u64_value("seed")?.unwrap_or(0),
            };
            let train = io::read_emb(&cfg.train)?;
            let labels = io::read_labels(&cfg.train_labels)?;
            let query = io::read_emb(&cfg.query)?;
            let knn_cfg = KnnConfig::new(cfg.k, cfg.vote_temp)?;
            let posteriors = evalkit::knn_posteriors(&train, &labels, &query, &knn_cfg)?;
            if let Some(p) = &cfg.posteriors_out {
                io::write_emb(p, &posteriors)?;
            }
            let mut metrics = serde_json::Map::new();
            if let Some(truth_path) = &cfg.truth {
                let truth = io::read_labels(truth_path)?;
                let top1 = evalkit::top1_accuracy(&posteriors, &truth)?;
                metrics.insert("top1_accuracy".into(), json!(sig9(top1)));
            }
            let value = json!({
                "task": "knn",
                "metrics": metrics,
                "queries": query.rows(),
                "classes": posteriors.dim(),
                "config": {"k": cfg.k, "vote_temp": sig9(cfg.vote_temp)},
            });
            io::write_json_pretty(&cfg.out, &value)?;
            write_resolved_config(&config_sidecar(&cfg.out), &cfg)?;
            Ok(())
        }
        EvalTask::Retrieval(a) => {
            let cfg = EvalRetrievalRunConfig {
                queries: required(a.queries, file.str_value("queries")?.map(PathBuf::from), "queries")?,
                gallery: required(a.gallery, file.str_value("gallery")?.map(PathBuf::from), "gallery")?,
                truth: a.truth.or(file.str_value("truth")?.map(PathBuf::from)),
                scores_out: a.scores_out,
                out: required(a.out, file.str_value("out")?.map(PathBuf::from), "out")?,
                seed: file.u64_value("seed")?.unwrap_or(0),
            };
            let queries = io::read_emb(&cfg.queries)?;
            let gallery = io::read_emb(&cfg.gallery)?;
            let scores = evalkit::retrieval_scores(&queries, &gallery)?;
            if let Some(p) = &cfg.scores_out {
                io::write_emb(p, &scores)?;
            }
            let mut metrics = serde_json::Map::new();
            if let Some(truth_path) = &cfg.truth {
                let truth = io::read_truth_indices(truth_path)?;
                let recall = evalkit::recall_at_1(&scores, &truth)?;
                metrics.insert("recall_at_1".into(), json!(sig9(recall)));
            }
            let value = json!({
                "task": "retrieval",
                "metrics": metrics,
                "queries": queries.rows(),
                "gallery": gallery.rows(),
                "config": {},
            });
            io::write_json_pretty(&cfg.out, &value)?;
            write_resolved_config(&config_sidecar(&cfg.out), &cfg)?;
            Ok(())
        }
        EvalTask::Ensemble(a) => {
            let heads_paths = if a.heads.is_empty() {
                file.str_value("head")?
                    .map(|s| s.split(',').map(PathBuf::from).collect::<Vec<_>>())
                    .unwrap_or_default()
            } else {
                a.heads
            };
            if heads_paths.is_empty() {
                bail!("at least one --head is required");
            }
            let cfg = EvalEnsembleRunConfig {
                heads: heads_paths,
                tau: defaulted(a.tau, file.f64_value("tau")?, 1.0),
                gamma: defaulted(a.gamma, file.f64_value("gamma")?, 1.0),
                truth_labels: a.truth_labels.or(file.str_value("truth-labels")?.map(PathBuf::from)),
                truth_indices: a
                    .truth_indices
                    .or(file.str_value("truth-indices")?.map(PathBuf::from)),
                z_norm: a.z_norm || file.bool_value("z-norm")?.unwrap_or(false),
                fused_out: a.fused_out,
                out: required(a.out, file.str_value("out")?.map(PathBuf::from), "out")?,
                seed: file.u64_value("seed")?.unwrap_or(0),
            };
            let mut heads: Vec<EmbeddingMatrix> =
                cfg.heads.iter().map(|p| io::read_emb(p)).collect::<Result<_, _>>()?;
            if cfg.z_norm {
                heads = heads.iter().map(evalkit::z_normalize_rows).collect();
            }
            let ens_cfg = EnsembleConfig::new(cfg.tau, cfg.gamma)?;
            let weights = evalkit::entropy_weights(&heads, &ens_cfg)?;
            let fused = evalkit::ensemble_scores(&heads, &weights)?;
            if let Some(p) = &cfg.fused_out {
                io::write_emb(p, &fused)?;
            }
            let mut metrics = serde_json::Map::new();
            if let Some(path) = &cfg.truth_labels {
                let truth = io::read_labels(path)?;
                metrics.insert(
                    "top1_accuracy".into(),
                    json!(sig9(evalkit::top1_accuracy(&fused, &truth)?)),
                );
            }
            if let Some(path) = &cfg.truth_indices {
                let truth = io::read_truth_indices(path)?;
                metrics.insert(
                    "recall_at_1".into(),
                    json!(sig9(evalkit::recall_at_1(&fused, &truth)?)),
                );
            }
            let num_heads = heads.len();
            let rows = fused.rows().max(1);
            let mean_weights: Vec<f64> = (0..num_heads)
                .map(|h| {
                    sig9(weights.iter().map(|w| w[h]).sum::<f64>() / rows as f64)
                })
                .collect();
            let value = json!({
                "task": "ensemble",
                "metrics": metrics,
                "queries": fused.rows(),
                "heads": num_heads,
                "mean_weights": mean_weights,
                "config": {"tau": sig9(cfg.tau), "gamma": sig9(cfg.gamma), "z_norm": cfg.z_norm},
            });
            io::write_json_pretty(&cfg.out, &value)?;
            write_resolved_config(&config_sidecar(&cfg.out), &cfg)?;
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// cka

#[derive(Debug, Args)]
pub struct CkaArgs {
    /// Manifest JSON: {"experts": [{"id", "student", "teacher_layers": {"LAYER": path}}]}.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    clip_lo: Option<f64>,
    #[arg(long)]
    clip_hi: Option<f64>,
    /// Disable teacher clipping entirely.
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkaRunConfig {
    pub manifest: PathBuf,
    pub clip: Option<(f64, f64)>,
    pub out: PathBuf,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// rope

#[derive(Debug, Args)]
pub struct RopeArgs {
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    patch_size: Option<u32>,
    /// Rotary frequency pairs.
    #[arg(long)]
    num_pairs: Option<usize>,
    /// Angle of the first rotation direction, radians.
    #[arg(long)]
    seed_angle: Option<f64>,
    /// Output prefix; writes PREFIX.grid.emb and PREFIX.phases.emb.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RopeRunConfig {
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
    pub num_pairs: usize,
    pub seed_angle: f64,
    pub out_prefix: PathBuf,
    pub seed: u64,
}

fn cmd_rope(args: RopeArgs, file: &FileConfig) -> Result<()> {
    let cfg = RopeRunConfig {
        width: required(args.width, file.u64_value("width")?.map(|v| v as u32), "width")?,
        height: required(args.height, file.u64_value("height")?.map(|v| v as u32), "height")?,
        patch_size: defaulted(args.patch_size, file.u64_value("patch-size")?.map(|v| v as u32), 16),
        num_pairs: defaulted(args.num_pairs, file.u64_value("num-pairs")?.map(|v| v as usize), 32),
        seed_angle: defaulted(args.seed_angle, file.f64_value("seed-angle")?, 0.0),
        out_prefix: required(
            args.out_prefix,
            file.str_value("out-prefix")?.map(PathBuf::from),
            "out-prefix",
        )?,
        seed: file.u64_value("seed")?.unwrap_or(0),
    };
    if cfg.width == 0 || cfg.height == 0 || cfg.patch_size == 0 {
        bail!("--width, --height, and --patch-size must be positive");
    }
    if cfg.num_pairs == 0 {
        bail!("--num-pairs must be at least 1");
    }
    let grid = crate::rope::normalized_grid(cfg.width, cfg.height, cfg.patch_size);
    let dirs = crate::rope::golden_directions(cfg.num_pairs, cfg.seed_angle);
    let phases = crate::rope::rotary_phases(&grid, &dirs);

    let grid_data: Vec<f32> =
        grid.positions().iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect();
    let grid_m = EmbeddingMatrix::new(grid.num_patches(), 2, grid_data)?;
    let phase_m = EmbeddingMatrix::new(
        grid.num_patches(),
        cfg.num_pairs,
        phases.into_iter().map(|v| v as f32).collect(),
    )?;
    let stem = cfg
        .out_prefix
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "rope".to_string());
    let dir = cfg.out_prefix.parent().unwrap_or(Path::new("."));
    io::write_emb(&dir.join(format!("{stem}.grid.emb")), &grid_m)?;
    io::write_emb(&dir.join(format!("{stem}.phases.emb")), &phase_m)?;
    write_resolved_config(&config_sidecar(&cfg.out_prefix), &cfg)?;
    eprintln!(
        "wrote {}x{} grid ({} patches, {} pairs) -> {stem}.grid.emb / {stem}.phases.emb",
        grid.grid_w(),
        grid.grid_h(),
        grid.num_patches(),
        cfg.num_pairs
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CkaExpertEntry {
    id: String,
    student: PathBuf,
    teacher_layers: BTreeMap<String, PathBuf>,
    #[serde(default)]
    provenance: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CkaManifest {
    experts: Vec<CkaExpertEntry>,
}

fn cmd_cka(args: CkaArgs, file: &FileConfig) -> Result<()> {
    let no_clip = args.no_clip || file.bool_value("no-clip")?.unwrap_or(false);
    let clip = if no_clip {
        None
    } else {
        Some((
            defaulted(args.clip_lo, file.f64_value("clip-lo")?, -10.0),
            defaulted(args.clip_hi, file.f64_value("clip-hi")?, 10.0),
        ))
    };
    let cfg = CkaRunConfig {
        manifest: required(args.manifest, file.str_value("manifest")?.map(PathBuf::from), "manifest")?,
        clip,
        out: required(args.out, file.str_value("out")?.map(PathBuf::from), "out")?,
        seed: file.u64_value("seed")?.unwrap_or(0),
    };

    let manifest: CkaManifest =
        serde_json::from_str(&std::fs::read_to_string(&cfg.manifest)?).map_err(|e| {
            IoError::Format { path: cfg.manifest.clone(), reason: e.to_string() }
        })?;
    let base = cfg.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut sets = Vec::new();
    for expert in &manifest.experts {
        let student = io::read_emb(&base.join(&expert.student))?;
        let mut layers = BTreeMap::new();
        for (key, path) in &expert.teacher_layers {
            let layer: u32 = key
                .parse()
                .map_err(|_| anyhow!("teacher layer key '{key}' is not an integer"))?;
            layers.insert(layer, io::read_emb(&base.join(path))?);
        }
        sets.push(RoutedTokenSet::new(
            expert.id.clone(),
            student,
            layers,
            expert.provenance.clone(),
        )?);
    }
    let clip_f32 = cfg.clip.map(|(lo, hi)| (lo as f32, hi as f32));
    let matrix = analysis::expert_teacher_alignment(&sets, clip_f32)?;
    io::write_alignment_csv(&cfg.out, &matrix)?;
    write_resolved_config(&config_sidecar(&cfg.out), &cfg)?;
    eprintln!(
        "wrote {}x{} alignment matrix -> {}",
        matrix.experts.len(),
        matrix.layers.len(),
        cfg.out.display()
    );
    Ok(())
}
