//! Two-stage training.
//!
//! Stage 1 jointly fits the blind-spot network and one noise estimator per
//! noisy image by minimizing the constrained negative log-likelihood over
//! random patches. Stage 2 distills a student denoiser from two paired
//! sets: synthetic noisy/clean pairs drawn with the learned noise models,
//! and real-noisy/stage-1-denoised pairs.
//!
//! All training is deterministic given the seed in single-thread mode; the
//! optimizer step is always exclusive.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::dbsn::{
    bind_dbsn, dbsn_forward, dbsn_forward_bound, receptive_radius, DbsnConfig, DbsnParams,
};
use crate::error::{Error, Result};
use crate::estimator::{
    bind_cnn_est, cnn_est_forward, cnn_est_forward_bound, apply_learned_nlf, CnnEstParams,
    EstimatorRegistry,
};
use crate::image::Image;
use crate::loss::bayes_fuse_field;
use crate::optim::Adam;
use crate::spd::CovField;
use crate::student::{bind_student, student_forward_bound, StudentConfig, StudentParams};
use crate::tensor::Tensor;
use crate::threads::map_limited;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub patches_per_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub lr_min: f64,
    pub lambda_distill: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: the full-scale schedule shrunk 6x.
    pub fn desk() -> Self {
        TrainConfig {
            patch_size: 32,
            patches_per_epoch: 2000,
            epochs: 30,
            batch_size: 4,
            lr_init: 3e-4,
            lr_decay_factor: 0.1,
            lr_decay_every_epochs: 5,
            lr_min: 3e-7,
            lambda_distill: 0.1,
            seed: 0,
        }
    }

    /// Full-scale schedule: 48k patches of 96x96 per epoch for 180 epochs,
    /// decaying tenfold every 30 epochs down to 3e-7.
    pub fn paper() -> Self {
        TrainConfig {
            patch_size: 96,
            patches_per_epoch: 48_000,
            epochs: 180,
            batch_size: 4,
            lr_init: 3e-4,
            lr_decay_factor: 0.1,
            lr_decay_every_epochs: 30,
            lr_min: 3e-7,
            lambda_distill: 0.1,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("patch_size, batch_size and epochs must be positive"));
        }
        if self.patches_per_epoch < self.batch_size {
            return Err(Error::config("patches_per_epoch must cover at least one batch"));
        }
        if !(self.lr_init > 0.0) || !(self.lr_min > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0 < self.lr_decay_factor && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor must be in (0, 1]"));
        }
        if self.lr_decay_every_epochs == 0 {
            return Err(Error::config("lr_decay_every_epochs must be positive"));
        }
        if self.lambda_distill < 0.0 {
            return Err(Error::config("lambda_distill must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate of a 0-based epoch: monotone, floored at `lr_min`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch / self.lr_decay_every_epochs) as i32;
        (self.lr_init * self.lr_decay_factor.powi(k)).max(self.lr_min)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>().map_err(|_| Error::config(format!("bad integer '{v}' for {key}")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>().map_err(|_| Error::config(format!("bad number '{v}' for {key}")))
        };
        match key {
            "patch_size" => self.patch_size = parse_usize(value)?,
            "patches_per_epoch" => self.patches_per_epoch = parse_usize(value)?,
            "epochs" => self.epochs = parse_usize(value)?,
            "batch_size" => self.batch_size = parse_usize(value)?,
            "lr_init" => self.lr_init = parse_f64(value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_f64(value)?,
            "lr_decay_every_epochs" => self.lr_decay_every_epochs = parse_usize(value)?,
            "lr_min" => self.lr_min = parse_f64(value)?,
            "lambda_distill" => self.lambda_distill = parse_f64(value)?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| Error::config(format!("bad seed '{value}'")))?
            }
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; '#' starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: TrainLogRow) {
        self.rows.push(row);
    }

    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> =
            self.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
        if losses.is_empty() {
            None
        } else {
            Some(crate::autodiff::pairwise_sum(&losses) / losses.len() as f64)
        }
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,step,loss,lr,wall_ms")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:.12e},{:.3e},{:.3}", r.epoch, r.step, r.loss, r.lr, r.wall_ms)?;
        }
        Ok(())
    }
}

/// Border margin excluded from the stage-1 loss: the receptive-field
/// radius, capped at a quarter of the patch so the valid core never
/// vanishes on desk-scale patches.
pub fn loss_margin(config: &DbsnConfig, patch: usize) -> usize {
    receptive_radius(config).min(patch / 4)
}

/// Interior mask excluding `margin` pixels on every side.
pub fn interior_mask(h: usize, w: usize, margin: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for i in margin..h.saturating_sub(margin) {
        for j in margin..w.saturating_sub(margin) {
            mask[i * w + j] = true;
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub config: DbsnConfig,
    pub dbsn: DbsnParams,
    pub registry: EstimatorRegistry,
}

fn image_id(image: &Image, index: usize) -> String {
    image.id.clone().unwrap_or_else(|| format!("img{index:04}"))
}

/// Joint self-supervised training of the blind-spot network and one
/// estimator per image.
pub fn train_stage1(
    images: &[Image],
    dbsn_cfg: DbsnConfig,
    cfg: &TrainConfig,
) -> Result<(Stage1Model, TrainLog)> {
    cfg.validate()?;
    dbsn_cfg.validate()?;
    if images.is_empty() {
        return Err(Error::config("stage-1 training needs at least one noisy image"));
    }
    for (idx, img) in images.iter().enumerate() {
        let (c, h, w) = img.data.chw()?;
        if c != dbsn_cfg.in_channels {
            return Err(Error::shape(format!(
                "image {idx} has {c} channels, config expects {}",
                dbsn_cfg.in_channels
            )));
        }
        if h < cfg.patch_size || w < cfg.patch_size {
            return Err(Error::config(format!(
                "image {idx} ({h}x{w}) smaller than patch {}",
                cfg.patch_size
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dbsn = DbsnParams::init(dbsn_cfg, &mut rng)?;
    let mut registry = EstimatorRegistry::new();
    let ids: Vec<String> = images.iter().enumerate().map(|(i, im)| image_id(im, i)).collect();
    for (img, id) in images.iter().zip(&ids) {
        registry.insert(id.clone(), CnnEstParams::init(dbsn_cfg.in_channels, &mut rng), img.mean_intensity());
    }

    let margin = loss_margin(&dbsn_cfg, cfg.patch_size);
    let valid = interior_mask(cfg.patch_size, cfg.patch_size, margin);
    let steps_per_epoch = (cfg.patches_per_epoch / cfg.batch_size).max(1);
    let mut adam = Adam::new();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for step in 0..steps_per_epoch {
            let t0 = Instant::now();
            // Sample the batch.
            let picks: Vec<(usize, usize, usize)> = (0..cfg.batch_size)
                .map(|_| {
                    let idx = rng.gen_range(0..images.len());
                    let (_, h, w) = images[idx].data.chw().unwrap();
                    let i0 = rng.gen_range(0..=h - cfg.patch_size);
                    let j0 = rng.gen_range(0..=w - cfg.patch_size);
                    (idx, i0, j0)
                })
                .collect();

            let mut g = Graph::new();
            let dbsn_binding = bind_dbsn(&mut g, &dbsn, true);
            // One estimator binding per distinct image in the batch.
            let mut est_bindings: Vec<(usize, crate::estimator::EstBinding)> = Vec::new();
            for &(idx, _, _) in &picks {
                if !est_bindings.iter().any(|(i, _)| *i == idx) {
                    let params = registry.get(&ids[idx]).expect("registry entry");
                    let binding =
                        bind_cnn_est(&mut g, params, true, &format!("est.{}", ids[idx]));
                    est_bindings.push((idx, binding));
                }
            }
            let mut patch_losses = Vec::with_capacity(cfg.batch_size);
            for &(idx, i0, j0) in &picks {
                let patch =
                    images[idx].data.crop3(i0, j0, cfg.patch_size, cfg.patch_size)?;
                let y_id = g.constant(patch.clone());
                let (mu, sigma_mu) = dbsn_forward_bound(&mut g, &dbsn_binding, y_id)?;
                let est_binding = &est_bindings
                    .iter()
                    .find(|(i, _)| *i == idx)
                    .expect("binding present")
                    .1;
                let sigma_n = cnn_est_forward_bound(&mut g, est_binding, y_id)?;
                patch_losses.push(g.gaussian_nll(&patch, mu, sigma_n, sigma_mu, &valid)?);
            }
            let mut acc = patch_losses[0];
            for &l in &patch_losses[1..] {
                acc = g.add(acc, l)?;
            }
            let total = g.scale(acc, 1.0 / cfg.batch_size as f64);
            let loss = g.scalar_value(total);
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {epoch} batch {step}"
                )));
            }
            g.backward(total)?;

            // Optimizer step: network, then the estimators seen in batch.
            for ((name, id), (pname, tensor)) in
                dbsn_binding.bound_params().ids.iter().zip(dbsn.named_mut())
            {
                debug_assert_eq!(name, &pname);
                if let Some(grad) = g.grad(*id) {
                    let grad = grad.to_vec();
                    adam.step(name, tensor, &grad, lr);
                }
            }
            for (idx, binding) in &est_bindings {
                let prefix = format!("est.{}", ids[*idx]);
                let params = registry.get_mut(&ids[*idx]).expect("registry entry");
                for ((name, id), (pname, tensor)) in
                    binding.bound_params().ids.iter().zip(params.named_mut(&prefix))
                {
                    debug_assert_eq!(name, &pname);
                    if let Some(grad) = g.grad(*id) {
                        let grad = grad.to_vec();
                        adam.step(name, tensor, &grad, lr);
                    }
                }
            }
            log.push(TrainLogRow {
                epoch: epoch + 1,
                step: epoch * steps_per_epoch + step + 1,
                loss,
                lr,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok((Stage1Model { config: dbsn_cfg, dbsn, registry }, log))
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub x_hat: Tensor,
    /// Estimated per-pixel noise covariance of the input.
    pub nlf_map: CovField,
    /// Which estimator produced the noise map.
    pub estimator_id: String,
    /// True when no estimator was trained for this image and the closest
    /// one by mean intensity was used instead.
    pub fallback: bool,
}

/// Blind-spot prediction, noise estimation and per-pixel Bayes fusion.
///
/// The input is reflect-padded by the receptive radius before the network
/// pass and cropped afterwards: training excludes the zero-padding border
/// from the loss, so the network's statistics are only valid away from
/// it. Padding happens at inference only; the raw forward pass stays
/// unpadded and blind.
pub fn denoise_stage1(model: &Stage1Model, y: &Tensor, id: Option<&str>) -> Result<Stage1Output> {
    if model.registry.is_empty() {
        return Err(Error::config("stage-1 model has no trained estimators"));
    }
    let (est_id, est, fallback) = match id.and_then(|i| model.registry.get(i).map(|p| (i, p))) {
        Some((i, p)) => (i.to_string(), p, false),
        None => {
            let mean = crate::autodiff::pairwise_sum(y.data()) / y.numel() as f64;
            let (i, p) = model.registry.nearest_by_mean(mean).expect("non-empty registry");
            (i.to_string(), p, true)
        }
    };
    let (c, h, w) = y.chw()?;
    let radius = receptive_radius(&model.config);
    let padded = y.reflect_pad3(radius)?;
    let out = dbsn_forward(&model.dbsn, &padded)?;
    let mu = out.mu.crop3(radius, radius, h, w)?;
    let sigma_mu = CovField::new(
        c,
        out.sigma_mu.into_planes().crop3(radius, radius, h, w)?,
    )?;
    // The estimator is pointwise; padding would change nothing.
    let sigma_n = cnn_est_forward(est, y)?;
    let x_hat = bayes_fuse_field(y, &mu, &sigma_n, &sigma_mu)?;
    Ok(Stage1Output { x_hat, nlf_map: sigma_n, estimator_id: est_id, fallback })
}

/// One noisy/clean training pair for distillation.
#[derive(Debug, Clone)]
pub struct DistillPair {
    pub id: String,
    /// Noisy side fed to the student.
    pub input: Tensor,
    /// Regression target.
    pub target: Tensor,
}

#[derive(Debug, Clone)]
pub struct DistillPairs {
    /// (clean x, synthetic noisy) pairs drawn with learned noise models.
    pub p1: Vec<DistillPair>,
    /// (stage-1 denoised, real noisy) pairs.
    pub p2: Vec<DistillPair>,
}

/// Builds both distillation pair sets from a trained stage-1 model.
pub fn make_distill_pairs(
    clean: &[Image],
    noisy: &[Image],
    model: &Stage1Model,
    seed: u64,
) -> Result<DistillPairs> {
    if clean.is_empty() || noisy.is_empty() {
        return Err(Error::config("distillation needs non-empty clean and noisy sets"));
    }
    if model.registry.is_empty() {
        return Err(Error::config("stage-1 model has no trained estimators"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est_ids: Vec<&str> = model.registry.ids().collect();
    // Draw the estimator choice and noise seed for every clean image
    // up front so the selection sequence depends only on the seed.
    let plan: Vec<(usize, u64)> = (0..clean.len())
        .map(|_| (rng.gen_range(0..est_ids.len()), rng.gen::<u64>()))
        .collect();
    let p1 = clean
        .iter()
        .zip(&plan)
        .enumerate()
        .map(|(i, (img, &(est_idx, noise_seed)))| {
            let est = model.registry.get(est_ids[est_idx]).expect("estimator");
            let noisy_version = apply_learned_nlf(est, &img.data, noise_seed)?;
            Ok(DistillPair {
                id: image_id(img, i),
                input: noisy_version,
                target: img.data.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let p2_results = map_limited(noisy.iter().enumerate().collect(), |(i, img)| {
        let out = denoise_stage1(model, &img.data, img.id.as_deref())?;
        Ok::<DistillPair, Error>(DistillPair {
            id: image_id(img, i),
            input: img.data.clone(),
            target: out.x_hat,
        })
    });
    let p2 = p2_results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(DistillPairs { p1, p2 })
}

/// The distillation objective evaluated over full pair sets:
/// `sum_P1 |S(input) - target|^2 + lambda * sum_P2 |S(input) - target|^2`.
pub fn distill_loss_value(
    student: &StudentParams,
    p1: &[DistillPair],
    p2: &[DistillPair],
    lambda: f64,
) -> Result<f64> {
    let ssd = |pair: &DistillPair| -> Result<f64> {
        let out = crate::student::student_forward(student, &pair.input)?;
        let diffs: Vec<f64> = out
            .data()
            .iter()
            .zip(pair.target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .collect();
        Ok(crate::autodiff::pairwise_sum(&diffs))
    };
    let mut total = 0.0;
    for pair in p1 {
        total += ssd(pair)?;
    }
    if lambda != 0.0 {
        for pair in p2 {
            total += lambda * ssd(pair)?;
        }
    }
    Ok(total)
}

/// Stage-2 knowledge distillation. `p2` may be empty (or `lambda` zero),
/// in which case training reduces exactly to a P1-only run.
pub fn train_student(
    p1: &[DistillPair],
    p2: &[DistillPair],
    student_cfg: StudentConfig,
    cfg: &TrainConfig,
) -> Result<(StudentParams, TrainLog)> {
    cfg.validate()?;
    student_cfg.validate()?;
    if p1.is_empty() {
        return Err(Error::config("student training needs a non-empty synthetic pair set"));
    }
    let lambda = cfg.lambda_distill;
    let use_p2 = lambda > 0.0 && !p2.is_empty();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut student = StudentParams::init(student_cfg, &mut rng)?;
    let mut adam = Adam::new();
    let mut log = TrainLog::default();
    let steps_per_epoch = (cfg.patches_per_epoch / cfg.batch_size).max(1);

    let draw_crops = |pairs: &[DistillPair],
                      rng: &mut ChaCha8Rng,
                      count: usize,
                      patch: usize|
     -> Result<Vec<(Tensor, Tensor)>> {
        (0..count)
            .map(|_| {
                let pair = &pairs[rng.gen_range(0..pairs.len())];
                let (_, h, w) = pair.input.chw()?;
                let (ph, pw) = (patch.min(h), patch.min(w));
                let i0 = rng.gen_range(0..=h - ph);
                let j0 = rng.gen_range(0..=w - pw);
                Ok((pair.input.crop3(i0, j0, ph, pw)?, pair.target.crop3(i0, j0, ph, pw)?))
            })
            .collect()
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for step in 0..steps_per_epoch {
            let t0 = Instant::now();
            let crops1 = draw_crops(p1, &mut rng, cfg.batch_size, cfg.patch_size)?;
            let crops2 = if use_p2 {
                draw_crops(p2, &mut rng, cfg.batch_size, cfg.patch_size)?
            } else {
                Vec::new()
            };
            let mut g = Graph::new();
            let binding = bind_student(&mut g, &student, true);
            let term = |g: &mut Graph, input: &Tensor, target: &Tensor| -> Result<usize> {
                let y = g.constant(input.clone());
                let out = student_forward_bound(g, &binding, y)?;
                let t = g.constant(target.clone());
                g.sum_sq_diff(out, t)
            };
            let mut loss1 = None;
            for (input, target) in &crops1 {
                let l = term(&mut g, input, target)?;
                loss1 = Some(match loss1 {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let mut total = loss1.expect("p1 batch non-empty");
            if use_p2 {
                let mut loss2 = None;
                for (input, target) in &crops2 {
                    let l = term(&mut g, input, target)?;
                    loss2 = Some(match loss2 {
                        None => l,
                        Some(acc) => g.add(acc, l)?,
                    });
                }
                let scaled = g.scale(loss2.expect("p2 batch non-empty"), lambda);
                total = g.add(total, scaled)?;
            }
            let loss = g.scalar_value(total);
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {epoch} batch {step}"
                )));
            }
            g.backward(total)?;
            for ((name, id), (pname, tensor)) in
                binding.bound_params().ids.iter().zip(student.named_mut())
            {
                debug_assert_eq!(name, &pname);
                if let Some(grad) = g.grad(*id) {
                    let grad = grad.to_vec();
                    adam.step(name, tensor, &grad, lr);
                }
            }
            log.push(TrainLogRow {
                epoch: epoch + 1,
                step: epoch * steps_per_epoch + step + 1,
                loss,
                lr,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok((student, log))
}
