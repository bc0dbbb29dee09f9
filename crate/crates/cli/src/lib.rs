//! The `mganet` command line: one subcommand per pipeline stage.

pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mganet_core::augment::{random_augment, AugmentConfig, Pair};
use mganet_core::io::{atomic_write, write_json};
use mganet_core::metrics::{evaluate_case, reconstruction_metrics_masked, sensitivity_sweep, sweep_table, MetricReport};
use mganet_core::nifti::{read_volume, write_volume};
use mganet_core::preprocess::{average_histogram, prepare_sample, preprocess_image, DEFAULT_BINS};
use mganet_core::{signed_distance, BinaryMask, SdtMap};
use mganet_model::checkpoint;
use mganet_model::train::history_jsonl;
use mganet_model::{infer, shape_infer, train_loop, MgaNet, ModelConfig, TrainSample};
use serde::Serialize;

pub use config::{DataEntry, ModalityArg, RunConfig};
pub use error::{CliError, EXIT_INVALID, EXIT_OK, EXIT_RUNTIME};

#[derive(Debug, Parser)]
#[command(name = "mganet", version, about = "Brain extraction with a dual-decoder attention network")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Disable mask-guided attention.
    #[arg(long, global = true)]
    no_mga: bool,
    /// Disable the positional encoding.
    #[arg(long, global = true)]
    no_spe: bool,
    /// Disable data augmentation.
    #[arg(long, global = true)]
    no_da: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Condition and resize an image (and optionally its mask) to the network cube.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Cube side; defaults to the model input side.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Signed distance transform of a mask.
    Sdt {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        d_max: Option<f64>,
    },
    /// Write one augmented draw of an image and its mask's SDT.
    AugmentPreview {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Sample index; with the seed it fixes the draw.
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Train from image/mask pairs and write checkpoints.
    Train {
        /// Image volume; repeat together with --mask.
        #[arg(long)]
        image: Vec<PathBuf>,
        #[arg(long)]
        mask: Vec<PathBuf>,
        #[arg(long, value_enum)]
        modality: Option<ModalityArg>,
        /// Output directory for checkpoints and the loss history.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Extract the brain from a raw volume with a trained checkpoint.
    Infer {
        /// Checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// SDT threshold, mm.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_enum, default_value_t = ModalityArg::Mri)]
        modality: ModalityArg,
    },
    /// Score a predicted mask (and optionally a reconstruction) against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, requires = "reference")]
        recon: Option<PathBuf>,
        #[arg(long = "ref", requires = "recon")]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "case")]
        case: String,
        /// Score the reconstruction inside the ground-truth mask only.
        #[arg(long, requires = "recon")]
        masked: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dice and recall of a predicted SDT over a threshold grid.
    Sweep {
        #[arg(long)]
        sdt: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated thresholds, mm.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the layer-by-layer shape trace of the network.
    Shapes {
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        width: usize,
    },
}

/// Run one command line and return the process exit status.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let mut stdout = std::io::stdout().lock();
    dispatch_to(argv, &mut stdout)
}

/// [`dispatch`] with the command's report written to `out`.
pub fn dispatch_to<I, S>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn effective_config(g: &Global) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.model.use_mga &= !g.no_mga;
    cfg.model.use_spe &= !g.no_spe;
    cfg.model.use_da &= !g.no_da;
    cfg.train.seed = cfg.seed;
    cfg.train.augment.rng_seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn read_mask(path: &Path) -> Result<BinaryMask, CliError> {
    Ok(BinaryMask::from_positive(&read_volume(path)?))
}

fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    Ok(write_json(path, value)?)
}

fn say(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io("<stdout>".into(), e))
}

#[derive(Serialize)]
struct InferReport {
    tbv_ml: f64,
    tau: f64,
    mask_voxels: usize,
    modality: ModalityArg,
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = effective_config(&cli.global)?;
    match cli.command {
        Command::Preprocess { input, mask, out_dir, target } => {
            let pre = mganet_core::preprocess::PreprocessConfig {
                target_size: target.unwrap_or(cfg.model.input_side),
                ..cfg.preprocess.clone()
            };
            let image = read_volume(&input)?;
            create_dir(&out_dir)?;
            match mask {
                Some(m) => {
                    let s = prepare_sample(&image, &read_mask(&m)?, &pre)?;
                    write_volume(&s.image, out_dir.join("image.nii.gz"))?;
                    write_volume(&s.mask.to_volume(), out_dir.join("mask.nii.gz"))?;
                    write_volume(&s.sdt.to_volume(), out_dir.join("sdt.nii.gz"))?;
                    write_volume(&s.reference, out_dir.join("reference.nii.gz"))?;
                }
                None => {
                    let (v, _) = preprocess_image(&image, &pre)?;
                    write_volume(&v, out_dir.join("image.nii.gz"))?;
                }
            }
            say(out, &format!("wrote {}\n", out_dir.display()))
        }
        Command::Sdt { mask, out: path, d_max } => {
            let s = signed_distance(&read_mask(&mask)?, d_max.unwrap_or(cfg.preprocess.d_max))?;
            write_volume(&s.to_volume(), &path)?;
            say(out, &format!("wrote {}\n", path.display()))
        }
        Command::AugmentPreview { image, mask, out_dir, index } => {
            let image = read_volume(&image)?;
            let sdt = signed_distance(&read_mask(&mask)?, cfg.preprocess.d_max)?;
            let pair = Pair::new(image, sdt)?;
            let aug: AugmentConfig = cfg.train.augment.clone();
            let hist = average_histogram(std::slice::from_ref(&pair.image), DEFAULT_BINS)?;
            let (moved, record) = random_augment(&pair, &aug, Some(&hist), index)?;
            create_dir(&out_dir)?;
            write_volume(&moved.image, out_dir.join("image.nii.gz"))?;
            write_volume(&moved.sdt.to_volume(), out_dir.join("sdt.nii.gz"))?;
            write_report(&out_dir.join("record.json"), &record)?;
            say(out, &format!("{}\n", serde_json::to_string(&record).expect("record serializes")))
        }
        Command::Train { image, mask, modality, out: out_dir, steps, batch_size, lr, checkpoint_every } => {
            if image.len() != mask.len() {
                return Err(CliError::Usage(format!("{} images but {} masks", image.len(), mask.len())));
            }
            let entries: Vec<DataEntry> = if image.is_empty() {
                cfg.data.clone()
            } else {
                image
                    .into_iter()
                    .zip(mask)
                    .map(|(image, mask)| DataEntry { image, mask, modality: modality.unwrap_or_default() })
                    .collect()
            };
            if entries.is_empty() {
                return Err(CliError::Usage("no training data: pass --image/--mask or list cases under `data`".into()));
            }
            let out_dir = out_dir.or(cfg.output.clone()).ok_or_else(|| CliError::Usage("no output directory".into()))?;
            let mut tc = cfg.train.clone();
            tc.steps = steps.unwrap_or(tc.steps);
            tc.batch_size = batch_size.unwrap_or(tc.batch_size);
            tc.optimizer.lr = lr.unwrap_or(tc.optimizer.lr);
            tc.checkpoint_every = checkpoint_every.unwrap_or(tc.checkpoint_every);
            tc.validate()?;
            let pre = mganet_core::preprocess::PreprocessConfig {
                target_size: cfg.model.input_side,
                d_max: cfg.model.d_max,
                ..cfg.preprocess.clone()
            };
            let data = entries
                .iter()
                .map(|e| {
                    let s = prepare_sample(&read_volume(&e.image)?, &read_mask(&e.mask)?, &pre)?;
                    Ok(TrainSample { image: s.image, sdt: s.sdt, reference: s.reference, modality: e.modality.into() })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let mut net = MgaNet::<f32>::build(&cfg.model, cfg.seed)?;
            create_dir(&out_dir)?;
            let history = train_loop(&mut net, &data, &tc, Some(&out_dir))?;
            atomic_write(&out_dir.join("history.jsonl"), history_jsonl(&history).as_bytes())?;
            write_report(&out_dir.join("run_config.json"), &RunConfig { train: tc, data: entries, ..cfg })?;
            let last = history.last().expect("at least one step");
            say(out, &format!("trained {} steps, final loss {:.6}\n", history.len(), last.loss.total))
        }
        Command::Infer { model, input, out_dir, tau, modality } => {
            let mut net = checkpoint::load(&model)?.net;
            let m = net.config().clone();
            net.set_flags(m.use_mga && !cli.global.no_mga, m.use_spe && !cli.global.no_spe, m.use_da && !cli.global.no_da);
            let tau = tau.unwrap_or(cfg.metrics.tau);
            let result = infer(&net, &read_volume(&input)?, &cfg.preprocess, modality.into(), tau)?;
            create_dir(&out_dir)?;
            write_volume(&result.mask.to_volume(), out_dir.join("mask.nii.gz"))?;
            write_volume(&result.recon, out_dir.join("recon.nii.gz"))?;
            write_volume(&result.sdt.to_volume(), out_dir.join("sdt.nii.gz"))?;
            let report = InferReport { tbv_ml: result.tbv_ml, tau, mask_voxels: result.mask.count(), modality };
            write_report(&out_dir.join("infer.json"), &report)?;
            say(out, &format!("tbv_mL {:.3}\n", result.tbv_ml))
        }
        Command::Evaluate { pred, gt, recon, reference, case, masked, out: json } => {
            let (p, g) = (read_mask(&pred)?, read_mask(&gt)?);
            let volumes = match (recon, reference) {
                (Some(r), Some(f)) => Some((read_volume(&r)?, read_volume(&f)?)),
                _ => None,
            };
            let mut c = evaluate_case(&case, &p, &g, volumes.as_ref().map(|(r, f)| (r, f)))?;
            if let (true, Some((r, f))) = (masked, &volumes) {
                let inside = reconstruction_metrics_masked(r, f, &g)?;
                (c.psnr_db, c.ssim) = (Some(inside.psnr_db), Some(inside.ssim));
            }
            let report = MetricReport::new(vec![c]);
            if let Some(path) = json {
                atomic_write(&path, (report.to_json()? + "\n").as_bytes())?;
            }
            say(out, &report.to_table())
        }
        Command::Sweep { sdt, gt, taus, out: json } => {
            let s = SdtMap::from_volume(&read_volume(&sdt)?, cfg.model.d_max)?;
            let rows = sensitivity_sweep(&s, &read_mask(&gt)?, &taus.unwrap_or(cfg.metrics.sweep_taus.clone()))?;
            if let Some(path) = json {
                write_report(&path, &rows)?;
            }
            say(out, &sweep_table(&rows))
        }
        Command::Shapes { n, width } => {
            let table = shape_infer(&ModelConfig { input_side: n, width, ..cfg.model.clone() })?;
            say(out, &table.render())
        }
    }
}
