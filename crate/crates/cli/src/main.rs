//! Command-line surface for the blind-spot denoising pipeline.
//!
//! Exit codes: 0 on success, 1 on user errors (bad flags, malformed
//! inputs, missing files), 2 on internal or numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dbsn_core::checkpoint;
use dbsn_core::dbsn::{verify_blindspot, DbsnConfig};
use dbsn_core::error::Error;
use dbsn_core::image::{self, Image};
use dbsn_core::metrics;
use dbsn_core::noise::{synthesize, NoiseLevelFunction};
use dbsn_core::pipeline::real_denoise_pipeline;
use dbsn_core::selftest;
use dbsn_core::student::{student_forward, StudentConfig};
use dbsn_core::tensor::Tensor;
use dbsn_core::train::{
    denoise_stage1, make_distill_pairs, train_stage1, train_student, DistillPair, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "dbsn",
    about = "Self-supervised blind denoising: train on noisy images alone, fuse, distill",
    long_about = "Self-supervised blind denoising: train on noisy images alone, fuse \
predictions with observations per pixel, and distill into a compact student.\n\n\
The DENOISE_THREADS environment variable caps per-image fan-out \
(0 or 1 selects the single-threaded deterministic mode).",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    /// Plain key = value config file; CLI flags override file entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config preset: "desk" or "paper".
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn build(&self) -> Result<TrainConfig, Error> {
        let mut cfg = TrainConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            cfg.apply_text(&std::fs::read_to_string(path)?)?;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = self.patches_per_epoch {
            cfg.patches_per_epoch = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr_init {
            cfg.lr_init = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a noisy image from a clean one.
    Synth {
        /// Noise spec: "awgn:sigma=25", "hg:alpha=40,delta=10",
        /// "mg:scale=75,seed=7".
        #[arg(long)]
        nlf: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 1: jointly train the blind-spot network and per-image noise
    /// estimators on a directory of noisy images.
    TrainStage1 {
        /// Directory of noisy .pgm/.ppm images.
        #[arg(long)]
        images: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV training log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        base_channels: usize,
        #[arg(long, default_value_t = 7)]
        mdc_per_branch: usize,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Denoise one image with a stage-1 checkpoint (Bayes fusion).
    DenoiseStage1 {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional path for the estimated per-pixel noise covariance
        /// planes (tensor dump).
        #[arg(long)]
        nlf_map: Option<PathBuf>,
    },
    /// Build both distillation pair sets from a stage-1 checkpoint.
    DistillPairs {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of clean images.
        #[arg(long)]
        clean: PathBuf,
        /// Directory of the real noisy images.
        #[arg(long)]
        noisy: PathBuf,
        /// Output directory (p1/ and p2/ tensor dumps).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 2: train the student denoiser on distillation pairs.
    TrainStudent {
        /// Pair directory produced by distill-pairs.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, default_value_t = 48)]
        channels: usize,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Denoise with a trained student, or with the pixel-shuffle pipeline
    /// for photographs with short-range correlated noise (--real).
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Student checkpoint (required unless --real).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Pixel-shuffle + guided-filter pipeline over stage-1 models.
        #[arg(long, default_value_t = false)]
        real: bool,
        /// Stage-1 checkpoint(s) for --real: one shared, or four
        /// comma-separated paths (one per Bayer group).
        #[arg(long)]
        stage1: Option<String>,
    },
    /// Prove the blind-spot property of a configuration by taint
    /// propagation.
    VerifyBlindspot {
        #[arg(long, default_value_t = 1)]
        in_channels: usize,
        #[arg(long, default_value_t = 32)]
        base_channels: usize,
        #[arg(long, default_value_t = 7)]
        mdc_per_branch: usize,
    },
    /// PSNR and SSIM between two images.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Quantize both images to the 8-bit grid before PSNR.
        #[arg(long, default_value_t = false)]
        quantized: bool,
    },
    /// Run the acceptance suite (all criteria, or one by index).
    Selftest {
        #[arg(long)]
        criterion: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1; --help/--version exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth { nlf, input, out, seed } => {
            let nlf = NoiseLevelFunction::parse(&nlf)?;
            let img = image::load(&input)?;
            let noisy = synthesize(&nlf, &img.data, seed)?;
            image::save(&out, &Image { data: noisy, bit_depth: 8, id: img.id })?;
            Ok(())
        }
        Command::TrainStage1 { images, out, log, base_channels, mdc_per_branch, train } => {
            let cfg = train.build()?;
            let set = image::load_dir(&images)?;
            let channels = set[0].channels();
            let dbsn_cfg = DbsnConfig::new(channels, base_channels, mdc_per_branch)?;
            let (model, train_log) = train_stage1(&set, dbsn_cfg, &cfg)?;
            checkpoint::save_stage1(&out, &model)?;
            if let Some(path) = log {
                let mut f = std::fs::File::create(path)?;
                train_log.write_csv(&mut f)?;
            }
            let last = train_log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!("trained {} images, final loss {last:.6}, checkpoint {}", set.len(), out.display());
            Ok(())
        }
        Command::DenoiseStage1 { ckpt, input, out, nlf_map } => {
            let model = checkpoint::load_stage1(&ckpt)?;
            let img = image::load(&input)?;
            let result = denoise_stage1(&model, &img.data, img.id.as_deref())?;
            if result.fallback {
                println!(
                    "note: no estimator trained for this image; borrowed '{}' (nearest mean intensity)",
                    result.estimator_id
                );
            }
            image::save(&out, &Image { data: result.x_hat, bit_depth: 8, id: img.id })?;
            if let Some(path) = nlf_map {
                let mut f = std::fs::File::create(path)?;
                result.nlf_map.planes().write_dump(&mut f)?;
            }
            Ok(())
        }
        Command::DistillPairs { ckpt, clean, noisy, out, seed } => {
            let model = checkpoint::load_stage1(&ckpt)?;
            let clean_set = image::load_dir(&clean)?;
            let noisy_set = image::load_dir(&noisy)?;
            let pairs = make_distill_pairs(&clean_set, &noisy_set, &model, seed)?;
            write_pairs(&out.join("p1"), &pairs.p1)?;
            write_pairs(&out.join("p2"), &pairs.p2)?;
            println!("wrote {} synthetic pairs and {} real pairs under {}", pairs.p1.len(), pairs.p2.len(), out.display());
            Ok(())
        }
        Command::TrainStudent { pairs, out, log, lambda, depth, channels, train } => {
            let mut cfg = train.build()?;
            if let Some(l) = lambda {
                cfg.lambda_distill = l;
            }
            let p1 = read_pairs(&pairs.join("p1"))?;
            let p2 = match read_pairs(&pairs.join("p2")) {
                Ok(p) => p,
                Err(_) => Vec::new(),
            };
            if p1.is_empty() {
                return Err(Error::config("no pairs found under p1/"));
            }
            let in_channels = p1[0].input.shape()[0];
            let student_cfg = StudentConfig { in_channels, depth, channels };
            let (student, train_log) = train_student(&p1, &p2, student_cfg, &cfg)?;
            checkpoint::save_student(&out, &student)?;
            if let Some(path) = log {
                let mut f = std::fs::File::create(path)?;
                train_log.write_csv(&mut f)?;
            }
            println!("trained student on {} + {} pairs, checkpoint {}", p1.len(), p2.len(), out.display());
            Ok(())
        }
        Command::Denoise { input, out, model, real, stage1 } => {
            let img = image::load(&input)?;
            let denoised = if real {
                let spec = stage1.ok_or_else(|| {
                    Error::config("--real needs --stage1 <ckpt> or four comma-separated ckpts")
                })?;
                let paths: Vec<&str> = spec.split(',').collect();
                if paths.len() != 1 && paths.len() != 4 {
                    return Err(Error::config(format!(
                        "--stage1 takes one shared checkpoint or four, got {}",
                        paths.len()
                    )));
                }
                let models: Vec<dbsn_core::train::Stage1Model> = paths
                    .iter()
                    .map(|p| checkpoint::load_stage1(Path::new(p)))
                    .collect::<Result<_, _>>()?;
                let denoiser = move |group: usize, sub: &Tensor| {
                    let model = if models.len() == 1 { &models[0] } else { &models[group] };
                    Ok(denoise_stage1(model, sub, None)?.x_hat)
                };
                real_denoise_pipeline(&denoiser, &img.data)?
            } else {
                let path = model.ok_or_else(|| {
                    Error::config("denoise needs --model <student.ckpt> (or --real)")
                })?;
                let student = checkpoint::load_student(&path)?;
                student_forward(&student, &img.data)?
            };
            image::save(&out, &Image { data: denoised, bit_depth: 8, id: img.id })?;
            Ok(())
        }
        Command::VerifyBlindspot { in_channels, base_channels, mdc_per_branch } => {
            let config = DbsnConfig::new(in_channels, base_channels, mdc_per_branch)?;
            let report = verify_blindspot(&config);
            for (i, branch) in report.branches.iter().enumerate() {
                println!(
                    "branch {i}: {} influencing offsets, radius {}, center excluded: {}",
                    branch.len(),
                    branch.radius(),
                    !branch.contains_center()
                );
            }
            println!(
                "fused: {} offsets, radius {}",
                report.fused.len(),
                report.fused.radius()
            );
            if report.blind_spot {
                println!("blind-spot: PASS");
                Ok(())
            } else {
                println!("blind-spot: FAIL");
                Err(Error::numeric("configuration is not blind"))
            }
        }
        Command::Metrics { reference, test, quantized } => {
            let a = image::load(&reference)?;
            let b = image::load(&test)?;
            let psnr = if quantized {
                metrics::psnr_quantized(&a.data, &b.data)?
            } else {
                metrics::psnr(&a.data, &b.data)?
            };
            let ssim = metrics::ssim(&a.data, &b.data, metrics::SSIM_WINDOW)?;
            println!("psnr={psnr:.3} ssim={ssim:.4}");
            Ok(())
        }
        Command::Selftest { criterion } => {
            let reports = match criterion {
                Some(idx) => vec![selftest::run_one(idx)?],
                None => selftest::run_all(),
            };
            let mut all_passed = true;
            for r in &reports {
                println!("{}", r.line());
                all_passed &= r.passed;
            }
            if all_passed {
                Ok(())
            } else {
                Err(Error::numeric("acceptance criteria failed"))
            }
        }
    }
}

fn write_pairs(dir: &Path, pairs: &[DistillPair]) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    for pair in pairs {
        for (suffix, tensor) in [("input", &pair.input), ("target", &pair.target)] {
            let mut f = std::fs::File::create(dir.join(format!("{}.{suffix}.tnsr", pair.id)))?;
            tensor.write_dump(&mut f)?;
        }
    }
    Ok(())
}

fn read_pairs(dir: &Path) -> Result<Vec<DistillPair>, Error> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".input.tnsr").map(|s| s.to_string())
        })
        .collect();
    ids.sort();
    ids.iter()
        .map(|id| {
            let mut input_file = std::fs::File::open(dir.join(format!("{id}.input.tnsr")))?;
            let mut target_file = std::fs::File::open(dir.join(format!("{id}.target.tnsr")))?;
            Ok(DistillPair {
                id: id.clone(),
                input: Tensor::read_dump(&mut input_file)?,
                target: Tensor::read_dump(&mut target_file)?,
            })
        })
        .collect()
}
