use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use clnet::config::TrainConfig;
use clnet::data::{
    self, load_image, load_map, load_sample, load_scribble, make_synthetic_dataset, overlay_boundary,
    read_manifest, save_image, save_map, SampleRecord, ScribbleStyle, Split, SynthOptions,
};
use clnet::metrics::evaluate_dataset;
use clnet::prompting::{make_prompt, scale_margin};
use clnet::segmenter::SegmenterRegistry;
use clnet::trainer::{predict_any_size, Checkpoint, TrainSet, Trainer};
use clnet::{Error, Map, Result};

#[derive(Parser, Debug)]
#[command(name = "clnet", version, about = "Scribble-supervised segmentation with a guided segmenter")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Score predicted maps against ground-truth masks.
    Eval(EvalArgs),
    /// Write probability maps (and optional overlays) for images.
    Predict(PredictArgs),
    /// Write the box prompt for every sample with a scribble.
    MakePrompts(PromptArgs),
    /// Generate a synthetic dataset.
    SynthData(SynthArgs),
}

/// Flags that override single config keys.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// batch_size
    #[arg(long)]
    batch_size: Option<String>,
    /// epochs
    #[arg(long)]
    epochs: Option<String>,
    /// lr_max
    #[arg(long)]
    lr_max: Option<String>,
    /// lr_min
    #[arg(long)]
    lr_min: Option<String>,
    /// image_size
    #[arg(long)]
    image_size: Option<String>,
    /// seed
    #[arg(long)]
    seed: Option<String>,
    /// tau
    #[arg(long)]
    tau: Option<String>,
    /// margin_px
    #[arg(long)]
    margin_px: Option<String>,
    /// prompt_source: intersection, box1 or box2
    #[arg(long)]
    prompt_source: Option<String>,
    /// mask_mode: online or offline
    #[arg(long)]
    mask_mode: Option<String>,
    /// segmenter.mode
    #[arg(long)]
    segmenter: Option<String>,
    /// collab_start_epoch
    #[arg(long)]
    collab_start_epoch: Option<String>,
    /// checkpoint_every
    #[arg(long)]
    checkpoint_every: Option<String>,
    /// Any config key, as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out: Vec<(String, String)> = [
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("lr_max", &self.lr_max),
            ("lr_min", &self.lr_min),
            ("image_size", &self.image_size),
            ("seed", &self.seed),
            ("tau", &self.tau),
            ("margin_px", &self.margin_px),
            ("prompt_source", &self.prompt_source),
            ("mask_mode", &self.mask_mode),
            ("segmenter.mode", &self.segmenter),
            ("collab_start_epoch", &self.collab_start_epoch),
            ("checkpoint_every", &self.checkpoint_every),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), quote_if_needed(k, v))))
        .collect();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        for (k, v) in self.pairs()? {
            cfg.set(&k, &v)?;
        }
        Ok(())
    }
}

/// String-valued keys are passed through as TOML strings.
fn quote_if_needed(key: &str, value: &str) -> String {
    match key {
        "prompt_source" | "mask_mode" | "segmenter.mode" => format!("\"{value}\""),
        _ => value.to_string(),
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory (with manifest.csv) or manifest path.
    #[arg(long)]
    data: PathBuf,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and history.csv.
    #[arg(long, default_value = "clnet-run")]
    out: PathBuf,
    /// Continue from a checkpoint (its config is used; overrides are rejected).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of predicted maps (`<id>.png`).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks (`<id>.png`).
    #[arg(long)]
    gt: PathBuf,
    /// Also write per-image metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file or directory of PNG images.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write `<id>_overlay.png` with the mask boundary drawn in.
    #[arg(long)]
    overlay: bool,
}

#[derive(Args, Debug)]
struct PromptArgs {
    /// Dataset directory (with manifest.csv) or manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Use this network's prediction; without it the prediction is empty
    /// and every prompt falls back to the scribble box.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// intersection, box1 or box2
    #[arg(long, default_value = "intersection")]
    prompt_source: String,
    /// Margin at 320 px, scaled with the image's longer side.
    #[arg(long, default_value_t = 25)]
    margin_px: usize,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// thin or dense
    #[arg(long, default_value = "thin")]
    style: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn config_key_help() -> String {
    let keys = TrainConfig::documented_keys();
    let width = keys.iter().map(|(k, _, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (TOML; defaults shown):\n");
    for (key, default, doc) in keys {
        s.push_str(&format!("  {key:width$}  = {default}\n      {doc}\n"));
    }
    s.push_str("\nExit codes: 0 success, 1 invalid input, 2 runtime failure.");
    s
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.csv")
    } else {
        data.to_path_buf()
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let registry = SegmenterRegistry::default();
    let mut trainer = match &args.resume {
        Some(path) => {
            if !args.overrides.pairs()?.is_empty() || args.config.is_some() {
                return Err(Error::InvalidArgument(
                    "--resume uses the checkpoint's config; drop --config and overrides".into(),
                ));
            }
            Trainer::resume(&Checkpoint::load(path)?, &registry)?
        }
        None => {
            let mut cfg = match &args.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            args.overrides.apply(&mut cfg)?;
            Trainer::new(cfg, &registry)?
        }
    };
    let records = read_manifest(&manifest_path(&args.data))?;
    let samples = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(load_sample)
        .collect::<Result<Vec<_>>>()?;
    let set = TrainSet::new(&samples, trainer.cfg.image_size)?;
    log::info!(
        "training on {} samples for {} epochs ({} steps)",
        set.len(),
        trainer.cfg.epochs,
        trainer.total_steps(set.len())
    );
    trainer.fit(&set, Some(&args.out))?;
    println!("{}", args.out.join("last.ckpt").display());
    Ok(())
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let preds = png_stems(&args.pred)?;
    let gts = png_stems(&args.gt)?;
    let only_pred: Vec<&str> = preds.keys().filter(|k| !gts.contains_key(*k)).map(String::as_str).collect();
    let only_gt: Vec<&str> = gts.keys().filter(|k| !preds.contains_key(*k)).map(String::as_str).collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "prediction and ground-truth ids differ; only in predictions: [{}]; only in ground truth: [{}]",
            only_pred.join(", "),
            only_gt.join(", ")
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG files in {}", args.pred.display())));
    }
    let mut pairs: Vec<(String, Map, Map)> = Vec::new();
    for (id, p) in &preds {
        let pred = load_map(p)?;
        let gt = data::load_mask(&gts[id])?;
        if pred.dims() != gt.dims() {
            return Err(Error::InvalidArgument(format!(
                "`{id}`: prediction is {:?} but ground truth is {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        pairs.push((id.clone(), pred, gt));
    }
    let report = evaluate_dataset(pairs.iter().map(|(id, p, g)| (id.clone(), p, g)))?;
    print!("{}", report.to_markdown());
    if let Some(path) = &args.csv {
        fs::write(path, report.to_csv()?).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (net, store) = ckpt.network()?;
    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        png_stems(&args.input)?.into_values().collect()
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG images in {}", args.input.display())));
    }
    for path in inputs {
        let image = load_image(&path)?;
        let prob = predict_any_size(&net, &store, &image, ckpt.config.image_size)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        save_map(&args.out.join(format!("{stem}.png")), &prob)?;
        if args.overlay {
            let over = overlay_boundary(&image, &prob, ckpt.config.threshold)?;
            save_image(&args.out.join(format!("{stem}_overlay.png")), &over)?;
        }
        log::info!("wrote prediction for {stem}");
    }
    Ok(())
}

fn make_prompts(args: &PromptArgs) -> Result<()> {
    let source = args.prompt_source.parse()?;
    let network = match &args.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let (net, store) = ckpt.network()?;
            Some((net, store, ckpt.config.image_size, ckpt.config.threshold))
        }
        None => None,
    };
    let records: Vec<SampleRecord> = read_manifest(&manifest_path(&args.data))?;
    let mut out = String::from("image_id,x0,y0,x1,y1,source\n");
    for r in records.iter() {
        let Some(scribble_path) = &r.scribble else { continue };
        let scribble = load_scribble(scribble_path)?;
        let (h, w) = scribble.dims();
        let (prob, threshold) = match &network {
            Some((net, store, size, thr)) => (predict_any_size(net, store, &load_image(&r.image)?, *size)?, *thr),
            None => (Map::zeros(h, w), 0.5),
        };
        let margin = scale_margin(args.margin_px, h.max(w));
        let p = make_prompt(&scribble, &prob, margin, source, threshold)?;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id,
            p.bbox.x0,
            p.bbox.y0,
            p.bbox.x1,
            p.bbox.y1,
            p.origin.as_str()
        ));
    }
    match &args.out {
        Some(path) => fs::write(path, out).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        }),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let style: ScribbleStyle = args.style.parse()?;
    let records = make_synthetic_dataset(
        &args.out,
        &SynthOptions {
            n: args.n,
            size: args.size,
            seed: args.seed,
            style,
        },
    )?;
    println!("{}", args.out.join("manifest.csv").display());
    log::info!("wrote {} samples", records.len());
    Ok(())
}

fn run(argv: Vec<OsString>) -> u8 {
    let cmd = Cli::command().after_help(config_key_help());
    let cli = match cmd.try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::MakePrompts(a) => make_prompts(a),
        Command::SynthData(a) => synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os().collect()))
}
