use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maestro_core::config::{ExperimentConfig, FusionMode, Multispectral, TargetNorm};
use maestro_core::cost::{pretrain_cost, transfer_cost, CostReport};
use maestro_core::encodings::{checksum, spatial_table, temporal_features};
use maestro_core::error::Error;
use maestro_core::masking::{sample_plan, TokenLayout};
use maestro_core::presets;
use maestro_core::rng::{Purpose, RngKey};
use maestro_core::router::build_routing;
use maestro_core::synth::{builtin_recipe, generate, read_recipe, SyntheticRecipe};
use maestro_core::trainer::{run_phase, Dataset, EpochLog, Model, PhaseOptions, RunPhase};

const DATA_ROOT_ENV: &str = "MAESTRO_DATA_ROOT";

#[derive(Parser)]
#[command(name = "maestro", version, about = "Multimodal masked-autoencoder toolkit for Earth-observation time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-autoencoder pretraining
    Pretrain(TrainArgs),
    /// Train the task head on a frozen backbone
    Probe(TrainArgs),
    /// Train backbone and head end to end
    Finetune(TrainArgs),
    /// Analytic MACs / FLOPs
    Cost(CostArgs),
    /// Render a synthetic dataset
    GenData(GenArgs),
    /// Masking statistics as CSV
    AuditMask(AuditArgs),
    /// Dump the routing plan or encoding tables as JSON
    Inspect(InspectArgs),
    /// Summarize a metrics log as CSV
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Shipped preset name
    #[arg(long)]
    preset: Option<String>,
    /// Experiment config JSON; takes precedence over --preset
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    multispectral: Option<MultispectralArg>,
    #[arg(long, value_enum)]
    target_norm: Option<TargetNormArg>,
    #[arg(long)]
    mask_ratio: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Shared,
    Monotemp,
    Mod,
    Group,
    InterGroup,
}

#[derive(Clone, Copy, ValueEnum)]
enum MultispectralArg {
    JointToken,
    TokenBased,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetNormArg {
    None,
    Patch,
    PatchGroup,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset directory; defaults to $MAESTRO_DATA_ROOT
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation dataset directory
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to start from
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostPhaseArg {
    Pretrain,
    Transfer,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum, default_value = "pretrain")]
    phase: CostPhaseArg,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct GenArgs {
    /// Shipped recipe name or recipe JSON path
    #[arg(long)]
    recipe: String,
    /// Preset name or experiment config JSON providing the dataset spec
    #[arg(long)]
    spec: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tiles: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 10_000)]
    plans: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InspectWhat {
    Routing,
    Encodings,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum, default_value = "routing")]
    what: InspectWhat,
}

#[derive(Args)]
struct ReportArgs {
    /// metrics.jsonl written by a training run
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Validation(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Json { .. } | Error::BadMagic { .. } | Error::Truncated { .. } | Error::UnsupportedVersion { .. } => {
                Failure::Io(e.to_string())
            }
            _ => Failure::Validation(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn load_config_source(name_or_path: &str) -> Result<ExperimentConfig, Failure> {
    if presets::source(name_or_path).is_some() {
        return Ok(presets::preset(name_or_path)?);
    }
    let path = Path::new(name_or_path);
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            ExperimentConfig::from_json(&text)?
        }
        (None, Some(name)) => presets::preset(name)?,
        (None, None) => return Err(Failure::Validation("one of --preset or --config is required".into())),
    };
    if let Some(f) = args.fusion {
        cfg.fusion.mode = match f {
            FusionArg::Shared => FusionMode::Shared,
            FusionArg::Monotemp => FusionMode::Monotemp,
            FusionArg::Mod => FusionMode::Mod,
            FusionArg::Group => FusionMode::Group,
            FusionArg::InterGroup => FusionMode::InterGroup,
        };
    }
    if let Some(m) = args.multispectral {
        cfg.fusion.multispectral = match m {
            MultispectralArg::JointToken => Multispectral::JointToken,
            MultispectralArg::TokenBased => Multispectral::TokenBased,
        };
    }
    if let Some(t) = args.target_norm {
        cfg.fusion.target_norm = match t {
            TargetNormArg::None => TargetNorm::None,
            TargetNormArg::Patch => TargetNorm::Patch,
            TargetNormArg::PatchGroup => TargetNorm::PatchGroup,
        };
    }
    if let Some(r) = args.mask_ratio {
        cfg.fusion.mask_ratio = r;
    }
    let report = cfg.validate();
    if !report.is_ok() {
        return Err(Failure::Validation(report.to_string()));
    }
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(phase: RunPhase, args: &TrainArgs) -> Outcome {
    let cfg = resolve(&args.cfg)?;
    let data_dir = match &args.data {
        Some(d) => d.clone(),
        None => std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Failure::Validation(format!("no --data given and {DATA_ROOT_ENV} is unset")))?,
    };
    if phase != RunPhase::Pretrain && args.init.is_none() {
        eprintln!("note: {} without --init starts from a random backbone", phase.as_str());
    }
    let train_set = Dataset::load(&data_dir)?;
    if train_set.manifest.dataset != cfg.dataset {
        return Err(Failure::Validation(format!(
            "dataset in {} does not match the resolved config",
            data_dir.display()
        )));
    }
    let val_set = args.val.as_deref().map(Dataset::load).transpose()?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut snapshot = cfg.clone();
    let hyper = match phase {
        RunPhase::Pretrain => &mut snapshot.training.pretrain,
        RunPhase::Probe => &mut snapshot.training.probe,
        RunPhase::Finetune => &mut snapshot.training.finetune,
    };
    if let Some(e) = args.epochs {
        hyper.epochs = e;
    }
    if let Some(b) = args.batch_size {
        hyper.batch_size = b;
    }
    write_file(&args.out.join("config.json"), &(snapshot.to_json() + "\n"))?;
    let mut model = Model::<f32>::new(&snapshot, args.seed)?;
    if let Some(init) = &args.init {
        model.load(init)?;
    }
    let log_path = args.out.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut on_epoch = |l: &EpochLog| -> maestro_core::error::Result<()> {
        let line = serde_json::to_string(l).expect("log serializes");
        eprintln!("{line}");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
    };
    let opts = PhaseOptions::new(phase, args.seed);
    let report = run_phase(&mut model, &snapshot, &train_set, val_set.as_ref(), &opts, &mut on_epoch)?;
    model.save(&args.out.join(format!("{}.ckpt", phase.as_str())))?;
    let summary = serde_json::json!({
        "phase": phase,
        "seed": args.seed,
        "eval": report.eval,
        "backbone_checksum_before": format!("{:016x}", report.backbone_checksum_before),
        "backbone_checksum_after": format!("{:016x}", report.backbone_checksum_after),
    });
    write_file(&args.out.join("summary.json"), &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))
}

fn cost(args: &CostArgs) -> Outcome {
    let cfg = resolve(&args.cfg)?;
    let report: CostReport = match args.phase {
        CostPhaseArg::Pretrain => pretrain_cost(&cfg.dataset, &cfg.fusion, &cfg.dims)?,
        CostPhaseArg::Transfer => transfer_cost(&cfg.dataset, &cfg.fusion, &cfg.dims)?,
    };
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report.to_json()).expect("json")),
        Format::Csv => print!("{}", report.to_csv()),
        Format::Text => {
            for (name, m) in report.terms() {
                println!("{name:<12} {:>10.3} GMACs", m as f64 / 1e9);
            }
            println!(
                "{} {} {} {}: {:.2} GMACs, {:.2} GFLOPs",
                cfg.dataset.name,
                cfg.fusion.mode,
                cfg.fusion.multispectral.as_str(),
                match args.phase {
                    CostPhaseArg::Pretrain => "pretrain",
                    CostPhaseArg::Transfer => "transfer",
                },
                report.macs() as f64 / 1e9,
                report.flops() as f64 / 1e9
            );
        }
    }
    Ok(())
}

fn gen_data(args: &GenArgs) -> Outcome {
    let mut recipe: SyntheticRecipe = if Path::new(&args.recipe).is_file() {
        read_recipe(Path::new(&args.recipe))?
    } else {
        builtin_recipe(&args.recipe)?
    };
    if let Some(n) = args.tiles {
        recipe.num_tiles = n;
    }
    if let Some(s) = args.seed {
        recipe.seed = s;
    }
    let cfg = load_config_source(&args.spec)?;
    let report = cfg.validate();
    if !report.is_ok() {
        return Err(Failure::Validation(report.to_string()));
    }
    let manifest = generate(&recipe, &cfg.dataset, &args.out)?;
    println!("wrote {} tiles to {}", manifest.tiles.len(), args.out.display());
    Ok(())
}

fn audit_mask(args: &AuditArgs) -> Outcome {
    let cfg = resolve(&args.cfg)?;
    let layout = TokenLayout::from_dataset(&cfg.dataset, cfg.fusion.multispectral);
    let mut freq = vec![0u64; layout.total()];
    let mut counts = std::collections::BTreeMap::new();
    for i in 0..args.plans {
        let mut rng = RngKey::new(args.seed, 0, i as u64, Purpose::Mask).rng();
        let plan = sample_plan(&layout, &cfg.fusion.structured_probs, cfg.fusion.mask_ratio, &mut rng)?;
        *counts.entry(plan.masked_count).or_insert(0u64) += 1;
        for (f, &m) in freq.iter_mut().zip(&plan.mask) {
            *f += u64::from(m);
        }
    }
    let mut csv = String::from("modality,bin,position,group,masked_fraction\n");
    let offsets = layout.offsets();
    for (k, l) in layout.modalities.iter().enumerate() {
        let name = &cfg.dataset.modalities[l.modality].name;
        for t in 0..l.bins {
            for p in 0..l.positions {
                for g in 0..l.per_slot {
                    let f = freq[offsets[k] + l.index(t, p, g)] as f64 / args.plans.max(1) as f64;
                    csv.push_str(&format!("{name},{t},{p},{g},{f:.6}\n"));
                }
            }
        }
    }
    for (c, n) in &counts {
        eprintln!("masked_count {c}: {n} plans");
    }
    emit(args.out.as_deref(), &csv)
}

fn inspect(args: &InspectArgs) -> Outcome {
    let cfg = resolve(&args.cfg)?;
    let value = match args.what {
        InspectWhat::Routing => serde_json::to_value(build_routing(&cfg.dataset, &cfg.fusion, &cfg.dims)?).expect("json"),
        InspectWhat::Encodings => {
            let table = spatial_table(&cfg.dataset.modalities, cfg.dims.encoder_width)?;
            let mods: Vec<serde_json::Value> = cfg
                .dataset
                .modalities
                .iter()
                .zip(&table.tables)
                .filter_map(|(m, t)| {
                    t.as_ref().map(|t| {
                        serde_json::json!({
                            "modality": m.name,
                            "shape": t.shape(),
                            "checksum": format!("{:016x}", checksum(t.iter().copied())),
                            "first_row": t.row(0).to_vec(),
                        })
                    })
                })
                .collect();
            let example = maestro_core::temporal::TimeStamp { absolute_day: 18_500, day_of_year: 239.0, hour: 10.5 };
            serde_json::json!({
                "lcm_side": table.lcm_side,
                "spatial": mods,
                "temporal_example": temporal_features(&example, 18_400).to_vec(),
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    Ok(())
}

fn report(args: &ReportArgs) -> Outcome {
    let text = fs::read_to_string(&args.log).map_err(|e| io_err(&args.log, e))?;
    let mut csv = String::from("phase,epoch,lr,loss,metric\n");
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Failure::Io(format!("{}:{}: {e}", args.log.display(), i + 1)))?;
        let field = |k: &str| match &v[k] {
            serde_json::Value::Null => String::new(),
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        csv.push_str(&format!("{},{},{},{},{}\n", field("phase"), field("epoch"), field("lr"), field("loss"), field("metric")));
    }
    emit(args.out.as_deref(), &csv)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Pretrain(a) => train(RunPhase::Pretrain, a),
        Command::Probe(a) => train(RunPhase::Probe, a),
        Command::Finetune(a) => train(RunPhase::Finetune, a),
        Command::Cost(a) => cost(a),
        Command::GenData(a) => gen_data(a),
        Command::AuditMask(a) => audit_mask(a),
        Command::Inspect(a) => inspect(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
