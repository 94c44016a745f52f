use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bridgeseg::data::{self, DatasetSplit, PALETTE};
use bridgeseg::metrics::{self, IndexMask};
use bridgeseg::model::{checkpoint, SegModel};
use bridgeseg::train::{self, RunConfig};
use bridgeseg::{verify, Error};

/// Wheat-head disease segmentation: data, training, evaluation, prediction.
#[derive(Parser)]
#[command(name = "bridgeseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image/mask dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        /// Defaults to $BFS_SEED when omitted.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON file with model and training fields.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Score a checkpoint on one split and print the metrics table.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, val, test, or all.
        #[arg(long)]
        split: String,
        /// Split manifest; defaults to split.json beside the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Positive class index for the metrics (2 = diseased).
        #[arg(long, default_value_t = data::DISEASED)]
        class: u8,
        /// CSV output; defaults to eval_<split>.csv beside the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Segment one image; writes <stem>_mask.png and <stem>_overlay.png.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks for every layer.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Validation(String),
    Io(String),
    GradCheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var("BFS_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Validation(format!("BFS_SEED is not an unsigned integer: {s:?}"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { n, size, seed, out } => {
            let seed = match seed.or(env_seed()?) {
                Some(s) => s,
                None => return Err(Failure::Validation("--seed is required (or set BFS_SEED)".into())),
            };
            if size == 0 || size % 32 != 0 {
                return Err(Failure::Validation(format!(
                    "--size must be a positive multiple of 32, got {size}"
                )));
            }
            data::synth_generate(n, size, seed, &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train {
            data: root,
            config,
            out,
            seed,
            max_epochs,
            batch_size,
            learning_rate,
        } => {
            let cfg = load_run_config(&config, seed, max_epochs, batch_size, learning_rate)?;
            let art = train::train(&cfg, &root, &out)?;
            let o = &art.outcome;
            println!(
                "trained {} epochs{}; best val loss at epoch {}; checkpoint {}",
                o.history.len(),
                if o.stopped_early { " (early stop)" } else { "" },
                o.best_epoch,
                art.checkpoint.display()
            );
        }
        Command::Eval {
            ckpt,
            data: root,
            split,
            manifest,
            class,
            csv,
        } => {
            let model = checkpoint::load_checkpoint::<f32>(&ckpt)?;
            if usize::from(class) >= model.config.num_classes {
                return Err(Failure::Validation(format!(
                    "--class {class} outside the model's {} classes",
                    model.config.num_classes
                )));
            }
            let samples = data::load_dataset(&root)?;
            let ids = split_ids(&ckpt, manifest.as_deref(), &split, &samples)?;
            let m = train::evaluate(&model, &samples, &ids, class)?;
            let rows = train::report_rows(&format!("bridgeseg {split}"), &m);
            print!("{}", metrics::format_report(&rows)?);
            if m.pooled.degenerate {
                println!("note: some metrics used the 0/0 = 1 convention");
            }
            let csv_path = csv.unwrap_or_else(|| sibling(&ckpt, &format!("eval_{split}.csv")));
            std::fs::write(&csv_path, metrics::format_csv(&rows)?)
                .map_err(|e| Failure::Io(format!("{}: {e}", csv_path.display())))?;
            println!("csv: {}", csv_path.display());
        }
        Command::Predict { ckpt, image, out } => {
            let model = checkpoint::load_checkpoint::<f32>(&ckpt)?;
            predict_one(&model, &image, &out)?;
        }
        Command::Gradcheck { seed } => {
            let checks = verify::layer_suite(seed)?;
            let mut failed = Vec::new();
            println!("{:<24} {:>12} {:>8} {:>8}", "layer", "max_rel_err", "coords", "seconds");
            for c in &checks {
                println!(
                    "{:<24} {:>12.3e} {:>8} {:>8.2}  {}",
                    c.name,
                    c.report.max_rel_error,
                    c.report.checked,
                    c.seconds,
                    if c.passed() { "ok" } else { "FAIL" }
                );
                if !c.passed() {
                    failed.push(c.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Failure::GradCheck(format!(
                    "layers above {:e}: {}",
                    verify::TOLERANCE,
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn load_run_config(
    path: &Path,
    seed: Option<u64>,
    max_epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Io(format!("--config {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("--config {}: {e}", path.display())))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Failure::Validation(format!("--config {}: expected a JSON object", path.display())))?;
    if !obj.contains_key("seed") {
        if let Some(s) = env_seed()? {
            obj.insert("seed".into(), s.into());
        }
    }
    let mut cfg = RunConfig::from_value(value)
        .map_err(|m| Failure::Validation(format!("--config {}: {m}", path.display())))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = learning_rate {
        cfg.train.learning_rate = lr;
    }
    cfg.validate()
        .map_err(|e| Failure::Validation(format!("--config {}: {e}", path.display())))?;
    Ok(cfg)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn split_ids(
    ckpt: &Path,
    manifest: Option<&Path>,
    split: &str,
    samples: &[data::Sample],
) -> Result<Vec<String>, Failure> {
    if split == "all" {
        return Ok(samples.iter().map(|s| s.id.clone()).collect());
    }
    let path = manifest.map_or_else(|| data::split_manifest_path(ckpt.parent().unwrap_or(Path::new("."))), Path::to_path_buf);
    let manifest = DatasetSplit::load(&path)?;
    manifest
        .get(split)
        .map(<[String]>::to_vec)
        .ok_or_else(|| Failure::Validation(format!("--split must be train, val, test or all, got {split:?}")))
}

fn predict_one(model: &SegModel<f32>, image: &Path, out: &Path) -> Result<(), Failure> {
    let img = image::open(image)
        .map_err(|e| Failure::Io(format!("--image {}: {e}", image.display())))?
        .to_rgb8();
    let size = model.config.image_size as u32;
    if img.dimensions() != (size, size) {
        return Err(Failure::Validation(format!(
            "--image {} is {:?}, the model expects {size}x{size}",
            image.display(),
            img.dimensions()
        )));
    }
    let x = data::image_to_tensor(&img);
    let batch = x.reshape(&[1, 3, size as usize, size as usize])?;
    let mask: IndexMask = train::argmax_masks(&model.predict_logits(&batch)?)?.remove(0);
    std::fs::create_dir_all(out).map_err(|e| Failure::Io(format!("--out {}: {e}", out.display())))?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mask_path = out.join(format!("{stem}_mask.png"));
    let overlay_path = out.join(format!("{stem}_overlay.png"));
    data::write_png(&data::encode_color_mask(&mask), &mask_path)?;
    data::write_png(&overlay(&img, &mask), &overlay_path)?;
    println!("{}\n{}", mask_path.display(), overlay_path.display());
    Ok(())
}

/// Class colors blended at 50% over the input; background untouched.
fn overlay(img: &image::RgbImage, mask: &IndexMask) -> image::RgbImage {
    let mut out = img.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let class = mask.get(y as usize, x as usize) as usize;
        if class != 0 {
            let c = PALETTE[class % PALETTE.len()];
            for ch in 0..3 {
                p.0[ch] = ((u16::from(p.0[ch]) + u16::from(c[ch]) + 1) / 2) as u8;
            }
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage errors are validation failures (exit 1), not clap's 2.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Io(m)) => {
            eprintln!("I/O error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::GradCheck(m)) => {
            eprintln!("gradient check failed: {m}");
            ExitCode::from(3)
        }
    }
}
