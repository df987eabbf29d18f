//! Acceptance checks.
//!
//! Each criterion runs standalone, records its measured numbers, and
//! reports pass/fail against tolerances that are pinned here in code.
//! The `acceptance` integration test asserts every report; the CLI
//! `selftest` subcommand prints the same lines.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::dbsn::{
    bind_dbsn, dbsn_forward, dbsn_forward_bound, verify_blindspot, DbsnConfig, DbsnParams,
};
use crate::error::{Error, Result};
use crate::estimator::{bind_cnn_est, cnn_est_forward_bound, CnnEstParams};
use crate::image::Image;
use crate::loss::{bayes_fuse, taylor_logdet};
use crate::metrics::psnr;
use crate::noise::{sample_mg_covariance, synthesize, NoiseLevelFunction};
use crate::pixelshuffle::{ps_down, ps_up, PHASES};
use crate::spd::SymMat;
use crate::student::StudentConfig;
use crate::tensor::Tensor;
use crate::train::{
    interior_mask, loss_margin, make_distill_pairs, train_stage1, train_student, Stage1Model,
    TrainConfig, TrainLog,
};

#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub index: usize,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
    pub seconds: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "criterion {} ({}): {} [{:.1}s] {}",
            self.index,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.details
        )
    }
}

fn report(
    index: usize,
    name: &'static str,
    started: Instant,
    outcome: Result<(bool, String)>,
) -> CriterionReport {
    let seconds = started.elapsed().as_secs_f64();
    match outcome {
        Ok((passed, details)) => CriterionReport { index, name, passed, details, seconds },
        Err(e) => CriterionReport {
            index,
            name,
            passed: false,
            details: format!("error: {e}"),
            seconds,
        },
    }
}

fn random_unit_image(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Criterion 1: blind-spot exactness. 50 random parameterizations of the
/// default network; perturbing any single pixel of an 8x8 input moves mu
/// and sigma at that pixel by <= 1e-12. The taint verifier reproduces the
/// two-layer exclusion lattice exactly. Runtime < 60 s.
pub fn criterion_1_blindspot() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let config = DbsnConfig::default();
        let mut worst = 0.0f64;
        for trial in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let params = DbsnParams::init(config, &mut rng)?;
            let y = random_unit_image(1, 8, 8, &mut rng);
            let base = dbsn_forward(&params, &y)?;
            for i in 0..8 {
                for j in 0..8 {
                    let mut y2 = y.clone();
                    y2.set3(0, i, j, y2.at3(0, i, j) + 1.0);
                    let out = dbsn_forward(&params, &y2)?;
                    let dmu = (out.mu.at3(0, i, j) - base.mu.at3(0, i, j)).abs();
                    let m0 = base.sigma_mu.mat_at(i, j);
                    let m1 = out.sigma_mu.mat_at(i, j);
                    let dsig = (m0.get(0, 0) - m1.get(0, 0)).abs();
                    worst = worst.max(dmu).max(dsig);
                }
            }
        }
        // Exclusion lattice of a 3x3 centrally masked conv followed by one
        // dilation-2 conv, around the center of a 7x7 grid.
        let taint = crate::taint::TaintSet::identity()
            .after_conv(3, 1, true)
            .after_conv(3, 2, false);
        let influenced = taint.positions_at(3, 3, 7, 7);
        let mut excluded: Vec<(usize, usize)> = Vec::new();
        for i in 0..7 {
            for j in 0..7 {
                if !influenced.contains(&(i, j)) {
                    excluded.push((i, j));
                }
            }
        }
        let expected_excluded: Vec<(usize, usize)> =
            vec![(1, 1), (1, 3), (1, 5), (3, 1), (3, 3), (3, 5), (5, 1), (5, 3), (5, 5)];
        let lattice_ok = excluded == expected_excluded;
        let full_report = verify_blindspot(&config);
        let elapsed = t0.elapsed().as_secs_f64();
        let passed = worst <= 1e-12 && lattice_ok && full_report.blind_spot && elapsed < 60.0;
        Ok((
            passed,
            format!(
                "max per-pixel change {worst:.2e} (<=1e-12), exclusion lattice {}, full-config taint blind={}, runtime {:.1}s (<60s)",
                if lattice_ok { "exact" } else { "WRONG" },
                full_report.blind_spot,
                elapsed
            ),
        ))
    };
    report(1, "blind-spot exactness", t0, run())
}

type NamedGrads = Vec<(String, Vec<f64>)>;

fn stage1_objective_grads(
    dbsn: &DbsnParams,
    est: &CnnEstParams,
    y: &Tensor,
    valid: &[bool],
) -> Result<(f64, NamedGrads)> {
    let mut g = Graph::new();
    let yid = g.constant(y.clone());
    let db = bind_dbsn(&mut g, dbsn, true);
    let eb = bind_cnn_est(&mut g, est, true, "est");
    let (mu, sigma_mu) = dbsn_forward_bound(&mut g, &db, yid)?;
    let sigma_n = cnn_est_forward_bound(&mut g, &eb, yid)?;
    let loss = g.gaussian_nll(y, mu, sigma_n, sigma_mu, valid)?;
    let value = g.scalar_value(loss);
    g.backward(loss)?;
    let mut grads = Vec::new();
    for (name, id) in db.bound_params().ids.iter().chain(eb.bound_params().ids.iter()) {
        let grad = g
            .grad(*id)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; g.value(*id).numel()]);
        grads.push((name.clone(), grad));
    }
    Ok((value, grads))
}

fn stage1_objective_value(
    dbsn: &DbsnParams,
    est: &CnnEstParams,
    y: &Tensor,
    valid: &[bool],
) -> Result<f64> {
    let mut g = Graph::new();
    let yid = g.constant(y.clone());
    let db = bind_dbsn(&mut g, dbsn, false);
    let eb = bind_cnn_est(&mut g, est, false, "est");
    let (mu, sigma_mu) = dbsn_forward_bound(&mut g, &db, yid)?;
    let sigma_n = cnn_est_forward_bound(&mut g, &eb, yid)?;
    let loss = g.gaussian_nll(y, mu, sigma_n, sigma_mu, valid)?;
    Ok(g.scalar_value(loss))
}

pub struct FdState {
    pub dbsn: DbsnParams,
    pub est: CnnEstParams,
    pub y: Tensor,
    pub valid: Vec<bool>,
    pub grads: NamedGrads,
    pub seed: u64,
}

pub fn fd_candidate_state(c: usize, seed: u64) -> Result<FdState> {
    use rand_distr::{Distribution, Normal};
    let config = DbsnConfig::new(c, 4, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.6).unwrap();
    let mut dbsn = DbsnParams::init(config, &mut rng)?;
    for (_, t) in dbsn.named_mut() {
        for v in t.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    let mut est = CnnEstParams::init(c, &mut rng);
    for (name, t) in est.named_mut("est") {
        if name.ends_with(".w") {
            for v in t.data_mut() {
                *v = normal.sample(&mut rng);
            }
        } else {
            for v in t.data_mut() {
                *v = 0.3 + 0.1 * normal.sample(&mut rng);
            }
        }
    }
    // Pin the covariances into a well-conditioned band by construction:
    // the noise head sits near a std of 0.5 with only a small learned
    // modulation, and the prediction head keeps mu near the data range
    // with a small prediction covariance. Gradients into the scaled
    // weights themselves stay at full strength (a weight's gradient does
    // not scale with its own value); only deeper paths shrink, from a
    // large enough base to stay resolvable.
    let last = est.layers.len() - 1;
    for v in est.layers[last].0.data_mut() {
        *v *= 1e-3;
    }
    for a in 0..c {
        est.layers[last].1.data_mut()[crate::spd::tri_index(a, a)] =
            (2.0 * (0.5f64).exp() - 1.0).ln();
    }
    {
        let fan = dbsn.head[2].shape()[1];
        let planes = crate::spd::tri_len(c);
        for row in 0..c + planes {
            let scale = if row < c { 0.3 } else { 0.05 };
            for e in 0..fan {
                dbsn.head[2].data_mut()[row * fan + e] *= scale;
            }
        }
    }
    let y = random_unit_image(c, 8, 8, &mut rng);
    let valid = interior_mask(8, 8, loss_margin(&config, 8));
    let (value, grads) = stage1_objective_grads(&dbsn, &est, &y, &valid)?;
    // Health screen: skip states that 64-bit central differences cannot
    // resolve to 1e-4 relative error. A state is usable when the loss
    // magnitude is moderate (bounds the evaluation noise), every nonzero
    // gradient is above the noise floor by a wide margin, and the
    // covariance spectra stay away from the near-singular region where
    // third derivatives blow up. The gradient check itself still covers
    // every parameter of the accepted state.
    if !value.is_finite() || value.abs() > 20.0 {
        return Err(Error::numeric("loss too large for finite differences"));
    }
    let min_grad = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .filter(|v| **v != 0.0)
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min_grad < 5e-7 {
        return Err(Error::numeric("gradient components below the noise floor"));
    }
    // Only the noise covariance is inverted (and S = S_n + S_mu inherits
    // its lower bound), so only its spectrum drives the curvature.
    let mut g = Graph::new();
    let yid = g.constant(y.clone());
    let eb = bind_cnn_est(&mut g, &est, false, "est");
    let sigma_n = cnn_est_forward_bound(&mut g, &eb, yid)?;
    let field = crate::spd::CovField::new(c, g.value(sigma_n).clone())?;
    for i in 0..8 {
        for j in 0..8 {
            let ev = field.mat_at(i, j).eigenvalues();
            if ev[0] < 0.05 || ev[ev.len() - 1] > 5.0 {
                return Err(Error::numeric("noise covariance spectrum out of range"));
            }
        }
    }
    // Smoothness probe: a ReLU kink within finite-difference reach makes
    // the directional derivative drift with the step size; healthy states
    // agree across steps to well below 1e-8. Uses function evaluations
    // only, so it stays independent of the gradients under test.
    {
        let mut dir_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..8 {
            let dir_db: Vec<Vec<f64>> = dbsn
                .named()
                .iter()
                .map(|(_, t)| (0..t.numel()).map(|_| dir_rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let dir_est: Vec<Vec<f64>> = est
                .named("est")
                .iter()
                .map(|(_, t)| (0..t.numel()).map(|_| dir_rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let norm: f64 = dir_db
                .iter()
                .chain(dir_est.iter())
                .flat_map(|v| v.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let shifted = |scale: f64| -> Result<f64> {
                let mut d = dbsn.clone();
                for ((_, t), dir) in d.named_mut().into_iter().zip(&dir_db) {
                    for (v, u) in t.data_mut().iter_mut().zip(dir) {
                        *v += scale * u / norm;
                    }
                }
                let mut e = est.clone();
                for ((_, t), dir) in e.named_mut("est").into_iter().zip(&dir_est) {
                    for (v, u) in t.data_mut().iter_mut().zip(dir) {
                        *v += scale * u / norm;
                    }
                }
                stage1_objective_value(&d, &e, &y, &valid)
            };
            let fd_at = |eps: f64| -> Result<f64> {
                Ok((shifted(eps)? - shifted(-eps)?) / (2.0 * eps))
            };
            let f5 = fd_at(1e-5)?;
            let f4 = fd_at(1e-4)?;
            if (f5 - f4).abs() / f5.abs().max(1.0) > 1e-6 {
                return Err(Error::numeric("objective not smooth at finite-difference scale"));
            }
        }
    }
    Ok(FdState { dbsn, est, y, valid, grads, seed })
}

/// First screened-in state at or after `from`; returns it with the next
/// search offset.
fn find_fd_state(c: usize, from: u64) -> Result<(FdState, u64)> {
    for seed in from..from + 500 {
        if let Ok(state) = fd_candidate_state(c, 7000 + seed) {
            return Ok((state, seed + 1));
        }
    }
    Err(Error::numeric("no finite-difference-checkable state in 500 candidates"))
}

/// Outcome of the elementwise finite-difference sweep over one state.
pub enum FdSweep {
    /// Every component verified; maximum relative error observed.
    MaxRel(f64),
    /// Some component's two finite-difference estimates disagree with
    /// each other on the scale of the claimed error: a ReLU kink sits
    /// within finite-difference reach, so the state cannot arbitrate.
    NotSmooth { component: String },
}

/// Elementwise two-step finite-difference comparison over every network
/// and estimator parameter of a state. Each component is probed at steps
/// 1e-5 and 1e-4 and scored at the better-conditioned one:
/// truncation-limited components need the smaller step, noise-limited
/// components the larger, and an incorrect derivative fails at both. A
/// component that would fail is first checked for self-consistency of
/// the two estimates; a genuine gradient bug yields consistent finite
/// differences that disagree with autodiff, while a kink yields
/// inconsistent finite differences and disqualifies the state.
pub fn fd_state_max_rel(state: &FdState) -> Result<FdSweep> {
    let FdState { dbsn, est, y, valid, grads, .. } = state;
    let mut max_rel: f64 = 0.0;
    let rel_of = |fd: f64, ad: f64| (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
    let names: Vec<String> = dbsn.named().iter().map(|(n, _)| n.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let p = dbsn.named()[k].1.clone();
        let grad = &grads.iter().find(|(n, _)| n == name).unwrap().1;
        for i in 0..p.numel() {
            let mut fds = [0.0f64; 2];
            for (slot, eps) in [1e-5, 1e-4].into_iter().enumerate() {
                let probe = |delta: f64| -> Result<f64> {
                    let mut d2 = dbsn.clone();
                    d2.named_mut()[k].1.data_mut()[i] += delta;
                    stage1_objective_value(&d2, est, y, valid)
                };
                fds[slot] = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            }
            let best = rel_of(fds[0], grad[i]).min(rel_of(fds[1], grad[i]));
            if best >= 1e-4 {
                let err = (fds[0] - grad[i]).abs().min((fds[1] - grad[i]).abs());
                if (fds[0] - fds[1]).abs() > err / 3.0 {
                    return Ok(FdSweep::NotSmooth { component: format!("{name}[{i}]") });
                }
            }
            max_rel = max_rel.max(best);
        }
    }
    let est_names: Vec<String> = est.named("est").iter().map(|(n, _)| n.clone()).collect();
    for (k, name) in est_names.iter().enumerate() {
        let p = est.named("est")[k].1.clone();
        let grad = &grads.iter().find(|(n, _)| n == name).unwrap().1;
        for i in 0..p.numel() {
            let mut fds = [0.0f64; 2];
            for (slot, eps) in [1e-5, 1e-4].into_iter().enumerate() {
                let probe = |delta: f64| -> Result<f64> {
                    let mut e2 = est.clone();
                    e2.named_mut("est")[k].1.data_mut()[i] += delta;
                    stage1_objective_value(dbsn, &e2, y, valid)
                };
                fds[slot] = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            }
            let best = rel_of(fds[0], grad[i]).min(rel_of(fds[1], grad[i]));
            if best >= 1e-4 {
                let err = (fds[0] - grad[i]).abs().min((fds[1] - grad[i]).abs());
                if (fds[0] - fds[1]).abs() > err / 3.0 {
                    return Ok(FdSweep::NotSmooth { component: format!("{name}[{i}]") });
                }
            }
            max_rel = max_rel.max(best);
        }
    }
    Ok(FdSweep::MaxRel(max_rel))
}

/// Criterion 2: autodiff vs central finite differences on the full
/// constrained objective (one image, 8x8 patch, C = 1 and C = 3), every
/// network and estimator parameter. Max relative error < 1e-4.
pub fn criterion_2_gradients() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut overall: f64 = 0.0;
        let mut detail = String::new();
        for c in [1usize, 3] {
            let mut resolved = None;
            let mut tries = 0;
            let mut search_from = 0u64;
            while tries < 6 {
                let (state, next) = find_fd_state(c, search_from)?;
                search_from = next;
                tries += 1;
                match fd_state_max_rel(&state)? {
                    FdSweep::MaxRel(max_rel) => {
                        resolved = Some((max_rel, state.seed));
                        break;
                    }
                    FdSweep::NotSmooth { component } => {
                        detail.push_str(&format!(
                            "C={c}: state {} kinked at {component}, resampled; ",
                            state.seed
                        ));
                    }
                }
            }
            let (max_rel, seed) = resolved.ok_or_else(|| {
                Error::numeric(format!("C={c}: no smooth state among {tries} candidates"))
            })?;
            detail.push_str(&format!("C={c} (state seed {seed}): max rel err {max_rel:.2e}; "));
            overall = overall.max(max_rel);
        }
        let elapsed = t0.elapsed().as_secs_f64();
        let passed = overall < 1e-4 && elapsed < 120.0;
        Ok((passed, format!("{detail}threshold 1e-4, runtime {elapsed:.1}s (<120s)")))
    };
    report(2, "gradient correctness", t0, run())
}

fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> SymMat {
    let mut r = vec![vec![0.0; dim]; dim];
    for row in r.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let mut s = SymMat::zeros(dim);
    for i in 0..dim {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += r[i][k] * r[j][k];
            }
            s.set(i, j, acc + if i == j { 0.3 } else { 0.0 });
        }
    }
    s
}

/// Criterion 3: the first-order log-det expansion error shrinks by a
/// factor in [3.5, 4.5] when the prediction covariance is halved, across
/// 100 random SPD pairs for C = 2 and C = 3.
pub fn criterion_3_taylor_order() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut count = 0;
        for dim in [2usize, 3] {
            for _ in 0..50 {
                let sn = random_spd(dim, &mut rng);
                let smu = random_spd(dim, &mut rng).scale(0.02);
                let exact = |p: &SymMat| sn.add(p).det().ln();
                let err_full = (taylor_logdet(&sn, &smu)? - exact(&smu)).abs();
                let half = smu.scale(0.5);
                let err_half = (taylor_logdet(&sn, &half)? - exact(&half)).abs();
                let ratio = err_full / err_half;
                lo = lo.min(ratio);
                hi = hi.max(ratio);
                count += 1;
            }
        }
        let passed = count == 100 && lo >= 3.5 && hi <= 4.5;
        Ok((passed, format!("{count} pairs, halving ratios in [{lo:.3}, {hi:.3}] (need [3.5, 4.5])")))
    };
    report(3, "log-det expansion order", t0, run())
}

/// Criterion 4: Bayes fusion identity residual < 1e-10 on 1000 random SPD
/// instances; the scalar worked case returns exactly 7.
pub fn criterion_4_bayes() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let dim = rng.gen_range(1..=3);
            let sn = random_spd(dim, &mut rng);
            let smu = random_spd(dim, &mut rng);
            let y: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mu: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = bayes_fuse(&y, &mu, &sn, &smu)?;
            let s = sn.add(&smu);
            let lhs = s.mul_vec(&x);
            let mut rhs = vec![0.0; dim];
            for i in 0..dim {
                for j in 0..dim {
                    rhs[i] += smu.get(i, j) * y[j] + sn.get(i, j) * mu[j];
                }
            }
            let norm: f64 =
                lhs.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            worst = worst.max(norm);
        }
        let scalar = bayes_fuse(
            &[10.0],
            &[6.0],
            &SymMat::scaled_identity(1, 3.0),
            &SymMat::scaled_identity(1, 1.0),
        )?[0];
        let passed = worst < 1e-10 && scalar == 7.0;
        Ok((passed, format!("max identity residual {worst:.2e} (<1e-10), scalar case -> {scalar}")))
    };
    report(4, "Bayes fusion", t0, run())
}

/// Criterion 5: synthesized noise statistics. AWGN sigma within 2%, the
/// heteroscedastic std at full intensity within 2%, the multivariate
/// empirical covariance within 5% Frobenius error.
pub fn criterion_5_noise_stats() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        // AWGN sigma = 25 over 1e5 samples.
        let awgn = NoiseLevelFunction::Awgn { sigma: 25.0 };
        let x = Tensor::full(vec![1, 250, 400], 0.5);
        let y = synthesize(&awgn, &x, 7)?;
        let noise: Vec<f64> = y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let n = noise.len() as f64;
        let mean = noise.iter().sum::<f64>() / n;
        let std_awgn =
            (noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt() * 255.0;
        let awgn_ok = (std_awgn - 25.0).abs() / 25.0 < 0.02;

        // Heteroscedastic at x = 1.
        let hg = NoiseLevelFunction::Hg { alpha: 40.0, delta: 10.0 };
        let x1 = Tensor::full(vec![1, 250, 400], 1.0);
        let yh = synthesize(&hg, &x1, 11)?;
        let noise_h: Vec<f64> = yh.data().iter().zip(x1.data()).map(|(a, b)| a - b).collect();
        let mean_h = noise_h.iter().sum::<f64>() / n;
        let std_hg =
            (noise_h.iter().map(|v| (v - mean_h) * (v - mean_h)).sum::<f64>() / n).sqrt();
        let expect_hg = (1700.0f64).sqrt() / 255.0;
        let hg_ok = (std_hg - expect_hg).abs() / expect_hg < 0.02;

        // Multivariate over 1e6 samples.
        let cov = sample_mg_covariance(75.0, 7);
        let mg = NoiseLevelFunction::Mg { cov };
        let zeros = Tensor::zeros(vec![3, 1000, 1000]);
        let ym = synthesize(&mg, &zeros, 99)?;
        let hw = 1_000_000;
        let mut num = 0.0;
        let mut den = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let pa = ym.plane(a);
                let pb = ym.plane(b);
                let mut acc = 0.0;
                for px in 0..hw {
                    acc += pa[px] * pb[px];
                }
                let emp = acc / hw as f64;
                num += (emp - cov.get(a, b)).powi(2);
                den += cov.get(a, b).powi(2);
            }
        }
        let frob = (num / den).sqrt();
        let mg_ok = frob < 0.05;
        let passed = awgn_ok && hg_ok && mg_ok;
        Ok((
            passed,
            format!(
                "awgn std {std_awgn:.3}/25 (2%), hg std {std_hg:.5} vs {expect_hg:.5} (2%), mg Frobenius {frob:.4} (<0.05)"
            ),
        ))
    };
    report(5, "noise statistics", t0, run())
}

/// Smooth synthetic scene: bilinear interpolation of a random coarse grid.
pub fn smooth_image(seed: u64, n: usize, id: &str) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = 6usize;
    let coarse: Vec<f64> = (0..g * g).map(|_| rng.gen_range(0.1..0.9)).collect();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let fi = i as f64 / n as f64 * (g - 1) as f64;
            let fj = j as f64 / n as f64 * (g - 1) as f64;
            let (i0, j0) = (fi as usize, fj as usize);
            let (di, dj) = (fi - i0 as f64, fj - j0 as f64);
            let (i1, j1) = ((i0 + 1).min(g - 1), (j0 + 1).min(g - 1));
            data[i * n + j] = coarse[i0 * g + j0] * (1.0 - di) * (1.0 - dj)
                + coarse[i1 * g + j0] * di * (1.0 - dj)
                + coarse[i0 * g + j1] * (1.0 - di) * dj
                + coarse[i1 * g + j1] * di * dj;
        }
    }
    Image::new(Tensor::new(vec![1, n, n], data).unwrap(), Some(id.to_string())).unwrap()
}

pub struct DeskStage1 {
    pub model: Stage1Model,
    pub log: TrainLog,
    pub noisy: Vec<Image>,
    pub epochs: usize,
}

static DESK_STAGE1: OnceLock<std::result::Result<Arc<DeskStage1>, String>> = OnceLock::new();

/// Desk-scale stage-1 run shared by criteria 6 and 7: 8 images of 64x64
/// with AWGN sigma = 25, 30 epochs, single-threaded compute.
pub fn desk_stage1() -> Result<Arc<DeskStage1>> {
    DESK_STAGE1
        .get_or_init(|| {
            let run = || -> Result<DeskStage1> {
                let nlf = NoiseLevelFunction::Awgn { sigma: 25.0 };
                let noisy: Vec<Image> = (0..8)
                    .map(|i| {
                        let clean = smooth_image(200 + i, 64, &format!("train{i}"));
                        let data = synthesize(&nlf, &clean.data, 300 + i)?;
                        Ok(Image { data, bit_depth: 8, id: clean.id.clone() })
                    })
                    .collect::<Result<_>>()?;
                let dbsn_cfg = DbsnConfig::new(1, 16, 1)?;
                let mut cfg = TrainConfig::desk();
                cfg.patches_per_epoch = 600;
                cfg.lr_decay_every_epochs = 10;
                cfg.epochs = 30;
                cfg.seed = 42;
                let (model, log) = train_stage1(&noisy, dbsn_cfg, &cfg)?;
                Ok(DeskStage1 { model, log, noisy, epochs: cfg.epochs })
            };
            run().map(Arc::new).map_err(|e| e.to_string())
        })
        .clone()
        .map_err(Error::Numeric)
}

/// Criterion 6: the desk-scale stage-1 run learns. Epoch-30 mean loss is
/// below epoch-1, and Bayes-fused denoising of a held-out image beats the
/// noisy input by at least 3 dB PSNR. Runtime < 30 min.
pub fn criterion_6_stage1_learning() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let desk = desk_stage1()?;
        let first = desk.log.epoch_mean_loss(1).ok_or_else(|| Error::numeric("no epoch 1"))?;
        let last = desk
            .log
            .epoch_mean_loss(desk.epochs)
            .ok_or_else(|| Error::numeric("no final epoch"))?;
        let all_finite = desk.log.rows.iter().all(|r| r.loss.is_finite());
        // Held-out image, never seen in training.
        let clean = smooth_image(911, 64, "heldout");
        let nlf = NoiseLevelFunction::Awgn { sigma: 25.0 };
        let noisy = synthesize(&nlf, &clean.data, 912)?;
        let out = crate::train::denoise_stage1(&desk.model, &noisy, Some("heldout"))?;
        let psnr_noisy = psnr(&clean.data, &noisy)?;
        let psnr_fused = psnr(&clean.data, &out.x_hat)?;
        let gain = psnr_fused - psnr_noisy;
        let elapsed = t0.elapsed().as_secs_f64();
        let passed =
            all_finite && last < first && gain >= 3.0 && out.fallback && elapsed < 1800.0;
        Ok((
            passed,
            format!(
                "epoch-1 loss {first:.4} -> epoch-30 loss {last:.4}, held-out PSNR {psnr_noisy:.2} dB -> {psnr_fused:.2} dB (gain {gain:.2}, floor 3.0), runtime {elapsed:.0}s (<1800s)"
            ),
        ))
    };
    report(6, "stage-1 learning signal", t0, run())
}

/// Criterion 7: distillation wiring. Lambda = 0 reproduces a P1-only run
/// bit for bit; a one-pixel objective matches hand evaluation to 1e-10;
/// the desk-scale student beats the noisy input by >= 4 dB on held-out
/// synthetic data.
pub fn criterion_7_distillation() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let desk = desk_stage1()?;

        // Pair sets from the trained stage-1 model.
        let clean: Vec<Image> =
            (0..6).map(|i| smooth_image(500 + i, 64, &format!("clean{i}"))).collect();
        let pairs = make_distill_pairs(&clean, &desk.noisy, &desk.model, 77)?;

        // (a) Bitwise reproduction with lambda = 0.
        let student_cfg = StudentConfig { in_channels: 1, depth: 5, channels: 16 };
        let mut tiny = TrainConfig::desk();
        tiny.patch_size = 24;
        tiny.patches_per_epoch = 16;
        tiny.epochs = 2;
        tiny.seed = 9;
        tiny.lambda_distill = 0.0;
        let (s_a, _) = train_student(&pairs.p1, &pairs.p2, student_cfg, &tiny)?;
        let (s_b, _) = train_student(&pairs.p1, &[], student_cfg, &tiny)?;
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        crate::checkpoint::write_student(&mut bytes_a, &s_a)?;
        crate::checkpoint::write_student(&mut bytes_b, &s_b)?;
        let bitwise_ok = bytes_a == bytes_b;

        // (b) Hand-evaluated one-pixel objective.
        let zero_student = crate::student::StudentParams::zeros(StudentConfig {
            in_channels: 1,
            depth: 2,
            channels: 3,
        })?;
        let pair = |a: f64, b: f64| crate::train::DistillPair {
            id: "t".into(),
            input: Tensor::new(vec![1, 1, 1], vec![a]).unwrap(),
            target: Tensor::new(vec![1, 1, 1], vec![b]).unwrap(),
        };
        let p1 = vec![pair(0.8, 0.5)];
        let p2 = vec![pair(0.4, 0.9)];
        let lambda = 0.1;
        let hand = (0.8f64 - 0.5).powi(2) + lambda * (0.4f64 - 0.9).powi(2);
        let got = crate::train::distill_loss_value(&zero_student, &p1, &p2, lambda)?;
        let hand_ok = (got - hand).abs() < 1e-10;

        // (c) Desk-scale student quality on held-out data.
        let mut cfg = TrainConfig::desk();
        cfg.patch_size = 24;
        cfg.patches_per_epoch = 240;
        cfg.epochs = 12;
        cfg.seed = 13;
        let (student, log) = train_student(&pairs.p1, &pairs.p2, student_cfg, &cfg)?;
        let all_finite = log.rows.iter().all(|r| r.loss.is_finite());
        let heldout_clean = smooth_image(700, 64, "student-heldout");
        let nlf = NoiseLevelFunction::Awgn { sigma: 25.0 };
        let heldout_noisy = synthesize(&nlf, &heldout_clean.data, 701)?;
        let denoised = crate::student::student_forward(&student, &heldout_noisy)?;
        let psnr_noisy = psnr(&heldout_clean.data, &heldout_noisy)?;
        let psnr_student = psnr(&heldout_clean.data, &denoised)?;
        let gain = psnr_student - psnr_noisy;
        let quality_ok = gain >= 4.0;

        let passed = bitwise_ok && hand_ok && quality_ok && all_finite;
        Ok((
            passed,
            format!(
                "lambda=0 bitwise {}, hand objective diff {:.1e} (<1e-10), student PSNR {psnr_noisy:.2} dB -> {psnr_student:.2} dB (gain {gain:.2}, floor 4.0)",
                if bitwise_ok { "identical" } else { "DIFFERS" },
                (got - hand).abs()
            ),
        ))
    };
    report(7, "distillation wiring", t0, run())
}

/// Direct nested-loop guided filter used as the independent reference.
fn guided_reference(p: &Tensor, guide: &Tensor, r: usize, eps: f64) -> Tensor {
    let (c, h, w) = p.chw().unwrap();
    let window = |i: usize, j: usize| {
        let i0 = i.saturating_sub(r);
        let i1 = (i + r + 1).min(h);
        let j0 = j.saturating_sub(r);
        let j1 = (j + r + 1).min(w);
        (i0, i1, j0, j1)
    };
    let mean_of = |plane: &[f64], i: usize, j: usize| {
        let (i0, i1, j0, j1) = window(i, j);
        let mut acc = 0.0;
        for ii in i0..i1 {
            for jj in j0..j1 {
                acc += plane[ii * w + jj];
            }
        }
        acc / ((i1 - i0) * (j1 - j0)) as f64
    };
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        let pp = p.plane(ch);
        let ii = guide.plane(ch);
        let ip: Vec<f64> = ii.iter().zip(pp).map(|(x, y)| x * y).collect();
        let i2: Vec<f64> = ii.iter().map(|x| x * x).collect();
        let mut a = vec![0.0; h * w];
        let mut b = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mi = mean_of(ii, i, j);
                let mp = mean_of(pp, i, j);
                let var = mean_of(&i2, i, j) - mi * mi;
                let cov = mean_of(&ip, i, j) - mi * mp;
                a[i * w + j] = cov / (var + eps);
                b[i * w + j] = mp - a[i * w + j] * mi;
            }
        }
        for i in 0..h {
            for j in 0..w {
                out.plane_mut(ch)[i * w + j] =
                    mean_of(&a, i, j) * ii[i * w + j] + mean_of(&b, i, j);
            }
        }
    }
    out
}

/// Criterion 8: pixel-shuffle bijection on 100 random images, guided
/// filter fixed points and reference agreement, and decorrelation of
/// 2x2-box noise on sub-images.
pub fn criterion_8_pixelshuffle_guided() -> CriterionReport {
    let t0 = Instant::now();
    let run = || -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        // Bijection.
        let mut bijection_ok = true;
        for _ in 0..100 {
            let c = [1usize, 3][rng.gen_range(0..2)];
            let h = rng.gen_range(1..50);
            let w = rng.gen_range(1..50);
            let y = Tensor::new(
                vec![c, h, w],
                (0..c * h * w).map(|_| rng.gen_range(-1.0..2.0)).collect(),
            )?;
            let back = ps_up(&ps_down(&y)?)?;
            if back.data() != y.data() {
                bijection_ok = false;
                break;
            }
        }
        // Guided filter: constant fixed point.
        let constant = Tensor::full(vec![1, 13, 9], 0.61);
        let filtered = crate::guided::guided_filter(&constant, &constant, 1, 0.01)?;
        let const_dev = filtered
            .data()
            .iter()
            .map(|v| (v - 0.61).abs())
            .fold(0.0f64, f64::max);
        // Guided filter vs the independent reference.
        let p = random_unit_image(1, 15, 11, &mut rng);
        let g = random_unit_image(1, 15, 11, &mut rng);
        let fast = crate::guided::guided_filter(&p, &g, 1, 0.01)?;
        let slow = guided_reference(&p, &g, 1, 0.01);
        let ref_dev = fast
            .data()
            .iter()
            .zip(slow.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // Sub-image decorrelation of 2x2 box noise.
        let (h, w) = (512, 512);
        let white: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0f64)).collect();
        let mut boxed = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        acc += white[(i + di).min(h - 1) * w + (j + dj).min(w - 1)];
                    }
                }
                boxed[i * w + j] = acc / 2.0;
            }
        }
        let set = ps_down(&Tensor::new(vec![1, h, w], boxed)?)?;
        let mut max_rho = 0.0f64;
        for phase in 0..PHASES {
            let sub = set.sub(phase);
            let (_, sh, sw) = sub.chw()?;
            let plane = sub.plane(0);
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            let mut sxy = 0.0;
            let mut sxx = 0.0;
            for i in 0..sh {
                for j in 0..sw - 1 {
                    let a = plane[i * sw + j] - mean;
                    let b = plane[i * sw + j + 1] - mean;
                    sxy += a * b;
                    sxx += a * a;
                }
            }
            max_rho = max_rho.max((sxy / sxx).abs());
        }
        let passed = bijection_ok && const_dev < 1e-12 && ref_dev < 1e-10 && max_rho < 0.02;
        Ok((
            passed,
            format!(
                "bijection on 100 shapes {}, constant dev {const_dev:.1e} (<1e-12), reference dev {ref_dev:.1e} (<1e-10), sub-image lag-1 |rho| max {max_rho:.4} (<0.02)",
                if bijection_ok { "exact" } else { "BROKEN" }
            ),
        ))
    };
    report(8, "pixel-shuffle and guided filter", t0, run())
}

/// Runs every criterion in order.
pub fn run_all() -> Vec<CriterionReport> {
    vec![
        criterion_1_blindspot(),
        criterion_2_gradients(),
        criterion_3_taylor_order(),
        criterion_4_bayes(),
        criterion_5_noise_stats(),
        criterion_6_stage1_learning(),
        criterion_7_distillation(),
        criterion_8_pixelshuffle_guided(),
    ]
}

/// Runs one criterion by index (1-based).
pub fn run_one(index: usize) -> Result<CriterionReport> {
    match index {
        1 => Ok(criterion_1_blindspot()),
        2 => Ok(criterion_2_gradients()),
        3 => Ok(criterion_3_taylor_order()),
        4 => Ok(criterion_4_bayes()),
        5 => Ok(criterion_5_noise_stats()),
        6 => Ok(criterion_6_stage1_learning()),
        7 => Ok(criterion_7_distillation()),
        8 => Ok(criterion_8_pixelshuffle_guided()),
        other => Err(Error::config(format!("no criterion {other}; valid range is 1..=8"))),
    }
}
