//! `roadforest` command-line front end.
//!
//! Exit codes: 0 on success, 1 for bad input or data, 2 when an internal
//! invariant is violated.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use roadforest::featext::{export_feature_stack, import_feature_stack};
use roadforest::featext::{load_kernel_bank, save_kernel_bank, KernelBank};
use roadforest::forest::{estimate_memory, load_model, save_model, ForestModel, Node};
use roadforest::pipeline::{
    evaluate, train_pipeline_from_index, DatasetIndex, PipelineConfig, PriorMask, Split,
};
use roadforest::raster::{
    load_confidence, load_image, load_mask, overlay, save_confidence, DEFAULT_ROAD_THRESHOLD,
};

use config::RunConfig;

const MANIFEST: &str = "manifest.txt";
const BANK_FILE: &str = "bank.kbnk";
const PRIOR_FILE: &str = "prior.fstk";
const FLOAT_BYTES: u64 = 4;

#[derive(Parser)]
#[command(
    name = "roadforest",
    version,
    about = "Road segmentation with superpixel random forests",
    args_override_self = true
)]
struct Cli {
    /// Worker threads; 0 or absent uses all logical cores. Results do not
    /// depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one forest per scale plus the location prior.
    Train(TrainArgs),
    /// Write confidence maps and overlays for a list or directory of images.
    Predict(PredictArgs),
    /// Score confidence maps against ground-truth masks.
    Evaluate(EvaluateArgs),
    /// Report on the forests in a model bundle.
    Inspect(InspectArgs),
    /// Write a procedural road dataset and a matching kernel bank.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    kernel_bank: Option<PathBuf>,
    /// Comma-separated superpixel counts, ascending.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    min_samples_leaf: Option<usize>,
    #[arg(long)]
    svm_c: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// on or off
    #[arg(long)]
    prior: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model_dir: PathBuf,
    /// A directory of PPM/PGM images, or a text file listing image paths.
    #[arg(long)]
    images: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "predictions")]
    out: PathBuf,
    /// Also write each scale's map as <stem>_scale<N>.pgm.
    #[arg(long)]
    debug: bool,
    /// Mask directory; road pixels are tinted red in the overlays.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of <stem>_conf.pgm (or <stem>.pgm) confidence maps.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of <stem>.pgm ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    train: usize,
    #[arg(long, default_value_t = 20)]
    test: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = roadforest::synthetic::DEFAULT_SIZE)]
    size: usize,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn user(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<roadforest::Error> for Failure {
    fn from(e: roadforest::Error) -> Self {
        let code = if matches!(e, roadforest::Error::Invariant(_)) {
            2
        } else {
            1
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
        Err(_) => ExitCode::from(2),
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Train(args) => train(args, cli.threads),
        Command::Predict(args) => with_threads(cli.threads, || predict(args)),
        Command::Evaluate(args) => with_threads(cli.threads, || evaluate_cmd(args)),
        Command::Inspect(args) => inspect(args),
        Command::Synth(args) => with_threads(cli.threads, || synth(args)),
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Outcome<T> + Send) -> Outcome<T> {
    match threads {
        None | Some(0) => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::user(format!("cannot start {n} threads: {e}")))?
            .install(f),
    }
}

fn resolve_config(args: &TrainArgs, threads: Option<usize>) -> Outcome<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Failure::user(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::user(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let overrides = [
        ("dataset_root", path(&args.dataset_root)),
        ("kernel_bank", path(&args.kernel_bank)),
        ("scales", args.scales.clone()),
        ("trees", args.trees.map(|v| v.to_string())),
        ("depth", args.depth.map(|v| v.to_string())),
        ("candidates", args.candidates.map(|v| v.to_string())),
        ("min_samples_leaf", args.min_samples_leaf.map(|v| v.to_string())),
        ("svm_c", args.svm_c.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("output_dir", path(&args.output_dir)),
        ("threads", threads.map(|v| v.to_string())),
        ("prior", args.prior.clone()),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            config.set(key, &v).map_err(Failure::user)?;
        }
    }
    Ok(config)
}

fn train(args: TrainArgs, threads: Option<usize>) -> Outcome {
    let config = resolve_config(&args, threads)?;
    let pipeline = config.pipeline().map_err(Failure::user)?;
    let bank_path = config
        .kernel_bank
        .as_ref()
        .ok_or_else(|| Failure::user("kernel_bank is not set"))?;
    let bank = load_kernel_bank(bank_path).map_err(|e| Failure::user(format!("kernel_bank: {e}")))?;
    let root = config
        .dataset_root
        .as_ref()
        .ok_or_else(|| Failure::user("dataset_root is not set"))?;
    let index =
        DatasetIndex::load(root, Split::Train).map_err(|e| Failure::user(format!("dataset_root: {e}")))?;
    if index.is_empty() {
        return Err(Failure::user(format!(
            "dataset_root: {} lists no training images",
            root.display()
        )));
    }
    // `threads = 0` in a config file means "all cores", like omitting it.
    let trained = with_threads(config.threads, || {
        Ok(train_pipeline_from_index(&index, &bank, &pipeline)?)
    })?;

    let out = &config.output_dir;
    create_dir(out)?;
    for (scale, model) in trained.scales.as_slice().iter().zip(&trained.models) {
        save_model(model, out.join(model_file(*scale)))?;
    }
    if let Some(prior) = &trained.prior {
        export_feature_stack(&prior.to_stack(), out.join(PRIOR_FILE))?;
    }
    save_kernel_bank(&bank, out.join(BANK_FILE))?;
    let manifest = format!(
        "# roadforest model bundle: {} training images, {} kernels\n{}",
        index.len(),
        bank.num_kernels(),
        config.to_text()
    );
    write(&out.join(MANIFEST), manifest.as_bytes())?;
    println!(
        "trained {} forest(s) on {} images; bundle written to {}",
        trained.models.len(),
        index.len(),
        out.display()
    );
    Ok(())
}

fn model_file(scale: usize) -> String {
    format!("scale_{scale}.rfle")
}

struct Bundle {
    pipeline: PipelineConfig,
    bank: KernelBank,
    models: Vec<ForestModel>,
    prior: Option<PriorMask>,
}

fn read_manifest(dir: &Path) -> Outcome<RunConfig> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Failure::user(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| Failure::user(format!("{}: {e}", path.display())))
}

fn load_bundle(dir: &Path) -> Outcome<Bundle> {
    let config = read_manifest(dir)?;
    let pipeline = config.pipeline().map_err(Failure::user)?;
    let bank = load_kernel_bank(dir.join(BANK_FILE))?;
    let models = pipeline
        .scales
        .as_slice()
        .iter()
        .map(|&s| load_model(dir.join(model_file(s))))
        .collect::<roadforest::Result<Vec<_>>>()?;
    let prior = if pipeline.use_prior {
        Some(PriorMask::from_stack(&import_feature_stack(
            dir.join(PRIOR_FILE),
        )?)?)
    } else {
        None
    };
    Ok(Bundle {
        pipeline,
        bank,
        models,
        prior,
    })
}

/// Image paths from a directory (sorted) or a list file (paths relative to it).
fn image_paths(source: &Path) -> Outcome<Vec<PathBuf>> {
    let paths: Vec<PathBuf> = if source.is_dir() {
        let mut found: Vec<PathBuf> = read_dir(source)?
            .into_iter()
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
            .collect();
        found.sort();
        found
    } else {
        let text =
            fs::read_to_string(source).map_err(|e| Failure::user(format!("{}: {e}", source.display())))?;
        let base = source.parent().unwrap_or(Path::new(""));
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect()
    };
    if paths.is_empty() {
        return Err(Failure::user(format!("no images found in {}", source.display())));
    }
    Ok(paths)
}

fn stem(path: &Path) -> Outcome<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Failure::user(format!("cannot name output for {}", path.display())))
}

fn predict(args: PredictArgs) -> Outcome {
    let bundle = load_bundle(&args.model_dir)?;
    let images = image_paths(&args.images)?;
    create_dir(&args.out)?;
    for path in &images {
        let stem = stem(path)?;
        let image = load_image(path)?;
        let p = &bundle.pipeline;
        let prediction = roadforest::pipeline::predict_image(
            &image,
            &bundle.bank,
            &bundle.models,
            &p.scales,
            bundle.prior.as_ref(),
            p.compactness,
            p.slic_iterations,
        )?;
        let gt = match &args.gt {
            Some(dir) => Some(load_mask(dir.join(format!("{stem}.pgm")), p.road_threshold)?),
            None => None,
        };
        save_confidence(&prediction.confidence, args.out.join(format!("{stem}_conf.pgm")))?;
        overlay(&image, &prediction.confidence, gt.as_ref())?
            .save(args.out.join(format!("{stem}_overlay.ppm")))?;
        if args.debug {
            for (scale, map) in p.scales.as_slice().iter().zip(&prediction.per_scale) {
                save_confidence(map, args.out.join(format!("{stem}_scale{scale}.pgm")))?;
            }
        }
    }
    println!(
        "wrote predictions for {} image(s) to {}",
        images.len(),
        args.out.display()
    );
    Ok(())
}

/// Prediction files keyed by stem: `<stem>_conf.pgm` when any exist,
/// otherwise every `<stem>.pgm`.
fn prediction_files(dir: &Path) -> Outcome<BTreeMap<String, PathBuf>> {
    let pgms: Vec<PathBuf> = read_dir(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    let mut conf = BTreeMap::new();
    let mut plain = BTreeMap::new();
    for p in pgms {
        let s = stem(&p)?;
        match s.strip_suffix("_conf") {
            Some(base) => conf.insert(base.to_string(), p),
            None => plain.insert(s, p),
        };
    }
    Ok(if conf.is_empty() { plain } else { conf })
}

fn evaluate_cmd(args: EvaluateArgs) -> Outcome {
    let preds = prediction_files(&args.pred)?;
    if preds.is_empty() {
        return Err(Failure::user(format!(
            "no confidence maps in {}",
            args.pred.display()
        )));
    }
    let missing: Vec<&str> = preds
        .keys()
        .filter(|s| !args.gt.join(format!("{s}.pgm")).is_file())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Failure::user(format!(
            "no ground truth in {} for: {}",
            args.gt.display(),
            missing.join(", ")
        )));
    }
    let mut maps = Vec::with_capacity(preds.len());
    let mut masks = Vec::with_capacity(preds.len());
    for (s, path) in &preds {
        maps.push(load_confidence(path)?);
        masks.push(load_mask(
            args.gt.join(format!("{s}.pgm")),
            DEFAULT_ROAD_THRESHOLD,
        )?);
    }
    let report = evaluate(&maps, &masks)?;
    create_dir(&args.out)?;
    write(&args.out.join("metrics.csv"), report.to_csv().as_bytes())?;
    write(&args.out.join("pr_curve.csv"), report.curve_csv().as_bytes())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn inspect(args: InspectArgs) -> Outcome {
    let config = read_manifest(&args.model_dir)?;
    for &scale in &config.scales {
        let file = model_file(scale);
        let path = args.model_dir.join(&file);
        let bytes = fs::metadata(&path)
            .map_err(|e| Failure::user(format!("{}: {e}", path.display())))?
            .len();
        let model = load_model(&path)?;
        let prefix = file.trim_end_matches(".rfle");
        for (key, value) in model_report(&model, bytes)? {
            println!("{prefix}.{key}: {value}");
        }
    }
    Ok(())
}

fn model_report(model: &ForestModel, serialized: u64) -> Outcome<Vec<(&'static str, String)>> {
    let trees = model.trees();
    let counts: Vec<String> = trees.iter().map(|t| t.node_count().to_string()).collect();
    let mut histogram = BTreeMap::<usize, usize>::new();
    let (mut splits, mut kernels) = (0usize, 0usize);
    for tree in trees {
        for (node, depth) in tree.nodes().iter().zip(tree.node_depths()) {
            match node {
                Node::Leaf(_) => *histogram.entry(depth).or_default() += 1,
                Node::Split(s) => {
                    splits += 1;
                    kernels += s.selection.len();
                }
            }
        }
    }
    let histogram: Vec<String> = histogram.iter().map(|(d, n)| format!("{d}:{n}")).collect();
    let mean_kernels = if splits == 0 {
        0.0
    } else {
        kernels as f64 / splits as f64
    };
    let bound = estimate_memory(
        trees.len() as u64,
        model.max_depth() as u32,
        model.num_kernels() as u64,
        FLOAT_BYTES,
    )?;
    Ok(vec![
        ("trees", trees.len().to_string()),
        ("kernels", model.num_kernels().to_string()),
        ("max_depth", model.max_depth().to_string()),
        ("nodes_per_tree", counts.join(" ")),
        (
            "total_nodes",
            trees.iter().map(|t| t.node_count()).sum::<usize>().to_string(),
        ),
        ("depth_histogram", histogram.join(" ")),
        ("mean_kernels_per_node", format!("{mean_kernels:.3}")),
        ("serialized_bytes", serialized.to_string()),
        ("memory_bound_bytes", bound.to_string()),
    ])
}

fn synth(args: SynthArgs) -> Outcome {
    if args.train == 0 {
        return Err(Failure::user("--train must be at least 1"));
    }
    roadforest::synthetic::write_dataset(&args.out, args.seed, args.train, args.test, args.size, args.size)?;
    save_kernel_bank(&roadforest::synthetic::gabor_bank(), args.out.join(BANK_FILE))?;
    println!(
        "wrote {} training and {} test scenes plus {} to {}",
        args.train,
        args.test,
        BANK_FILE,
        args.out.display()
    );
    Ok(())
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::user(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure::user(format!("{}: {e}", path.display())))
}

fn read_dir(dir: &Path) -> Outcome<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::user(format!("{}: {e}", dir.display())))?;
    entries
        .map(|e| {
            e.map(|e| e.path())
                .map_err(|e| Failure::user(format!("{}: {e}", dir.display())))
        })
        .collect()
}
