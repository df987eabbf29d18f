//! Dilated blind-spot network.
//!
//! Two branches, each a centrally masked convolution followed by a stack of
//! multiple-dilated-convolution (MDC) modules, fused by 1x1 convolutions
//! into a per-pixel mean prediction and an SPD covariance head. The output
//! at a pixel is independent of the input value at that pixel; the
//! `verify_blindspot` taint analysis proves this mechanically for a config,
//! and the forward pass can be checked numerically by perturbation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::spd::{tri_len, CovField};
use crate::taint::TaintSet;
use crate::tensor::Tensor;

/// Branch geometry is fixed: a 3x3 masked window feeding dilation-2 convs
/// and a 5x5 masked window feeding dilation-3 convs. These pairs satisfy
/// the stacking rule that keeps the central pixel untainted.
pub const BRANCH_SPECS: [(usize, usize); 2] = [(3, 2), (5, 3)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DbsnConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub mdc_per_branch: usize,
}

impl Default for DbsnConfig {
    fn default() -> Self {
        DbsnConfig { in_channels: 1, base_channels: 32, mdc_per_branch: 7 }
    }
}

impl DbsnConfig {
    pub fn new(in_channels: usize, base_channels: usize, mdc_per_branch: usize) -> Result<Self> {
        let cfg = DbsnConfig { in_channels, base_channels, mdc_per_branch };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 1 || self.in_channels == 3) {
            return Err(Error::config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.base_channels == 0 || self.mdc_per_branch == 0 {
            return Err(Error::config("base_channels and mdc_per_branch must be positive"));
        }
        // Stacking rule: every masked window half-width must be smaller
        // than the dilation placed on top of it.
        for (k, s) in BRANCH_SPECS {
            if k / 2 >= s {
                return Err(Error::config(format!(
                    "mask {k}x{k} with dilation {s} breaks the blind-spot stacking rule"
                )));
            }
        }
        Ok(())
    }

    /// Covariance planes emitted by the head.
    pub fn cov_planes(&self) -> usize {
        tri_len(self.in_channels)
    }
}

/// Binary k x k mask with a zero center and ones elsewhere.
pub fn center_mask(k: usize) -> Tensor {
    let mut m = Tensor::full(vec![k, k], 1.0);
    m.data_mut()[(k / 2) * k + k / 2] = 0.0;
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdcParams {
    /// 1x1 entry of each of the three sub-branches.
    pub pre: [Tensor; 3],
    /// Zero, one and two dilated 3x3 convolutions stacked on the entries.
    pub dilated: [Vec<Tensor>; 3],
    /// 1x1 applied to the concatenated sub-branch outputs.
    pub post_concat: Tensor,
    /// 1x1 producing the module output after the residual add.
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    /// Centrally masked k x k kernel; `mask` carries the fixed binary mask.
    pub masked_kernel: Tensor,
    pub mask: Tensor,
    pub mdcs: Vec<MdcParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbsnParams {
    pub config: DbsnConfig,
    /// 1x1 entry projection from the image channels.
    pub entry: Tensor,
    pub branches: [BranchParams; 2],
    /// Three 1x1 fusion kernels; the last projects to C + C(C+1)/2 channels.
    pub head: [Tensor; 3],
}

fn kaiming(shape: Vec<usize>, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).unwrap()
}

impl DbsnParams {
    pub fn init(config: DbsnConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let c = config.in_channels;
        let make_mdc = |rng: &mut dyn rand::RngCore| MdcParams {
            pre: [
                kaiming(vec![b, b, 1, 1], rng),
                kaiming(vec![b, b, 1, 1], rng),
                kaiming(vec![b, b, 1, 1], rng),
            ],
            dilated: [
                vec![],
                vec![kaiming(vec![b, b, 3, 3], rng)],
                vec![kaiming(vec![b, b, 3, 3], rng), kaiming(vec![b, b, 3, 3], rng)],
            ],
            post_concat: kaiming(vec![b, 3 * b, 1, 1], rng),
            output: kaiming(vec![b, b, 1, 1], rng),
        };
        let branch = |k: usize, rng: &mut dyn rand::RngCore| BranchParams {
            masked_kernel: kaiming(vec![b, b, k, k], rng),
            mask: center_mask(k),
            mdcs: (0..config.mdc_per_branch).map(|_| make_mdc(rng)).collect(),
        };
        // Mild damping keeps the initial prediction and covariance factor
        // near the data scale without throttling backprop into the body.
        let mut final_head = kaiming(vec![c + config.cov_planes(), b, 1, 1], rng);
        for v in final_head.data_mut() {
            *v *= 0.3;
        }
        Ok(DbsnParams {
            config,
            entry: kaiming(vec![b, c, 1, 1], rng),
            branches: [branch(BRANCH_SPECS[0].0, rng), branch(BRANCH_SPECS[1].0, rng)],
            head: [kaiming(vec![b, 2 * b, 1, 1], rng), kaiming(vec![b, b, 1, 1], rng), final_head],
        })
    }

    pub fn zeros(config: DbsnConfig) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let c = config.in_channels;
        let mdc = || MdcParams {
            pre: [
                Tensor::zeros(vec![b, b, 1, 1]),
                Tensor::zeros(vec![b, b, 1, 1]),
                Tensor::zeros(vec![b, b, 1, 1]),
            ],
            dilated: [
                vec![],
                vec![Tensor::zeros(vec![b, b, 3, 3])],
                vec![Tensor::zeros(vec![b, b, 3, 3]), Tensor::zeros(vec![b, b, 3, 3])],
            ],
            post_concat: Tensor::zeros(vec![b, 3 * b, 1, 1]),
            output: Tensor::zeros(vec![b, b, 1, 1]),
        };
        let branch = |k: usize| BranchParams {
            masked_kernel: Tensor::zeros(vec![b, b, k, k]),
            mask: center_mask(k),
            mdcs: (0..config.mdc_per_branch).map(|_| mdc()).collect(),
        };
        Ok(DbsnParams {
            config,
            entry: Tensor::zeros(vec![b, c, 1, 1]),
            branches: [branch(BRANCH_SPECS[0].0), branch(BRANCH_SPECS[1].0)],
            head: [
                Tensor::zeros(vec![b, 2 * b, 1, 1]),
                Tensor::zeros(vec![b, b, 1, 1]),
                Tensor::zeros(vec![c + config.cov_planes(), b, 1, 1]),
            ],
        })
    }

    /// Tensors with stable names, in a fixed traversal order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("entry".to_string(), &self.entry)];
        for (bi, branch) in self.branches.iter().enumerate() {
            out.push((format!("branch{bi}.masked"), &branch.masked_kernel));
            for (mi, m) in branch.mdcs.iter().enumerate() {
                for (si, p) in m.pre.iter().enumerate() {
                    out.push((format!("branch{bi}.mdc{mi}.pre{si}"), p));
                }
                for (si, convs) in m.dilated.iter().enumerate() {
                    for (ci, conv) in convs.iter().enumerate() {
                        out.push((format!("branch{bi}.mdc{mi}.sub{si}.conv{ci}"), conv));
                    }
                }
                out.push((format!("branch{bi}.mdc{mi}.post"), &m.post_concat));
                out.push((format!("branch{bi}.mdc{mi}.out"), &m.output));
            }
        }
        for (hi, h) in self.head.iter().enumerate() {
            out.push((format!("head{hi}"), h));
        }
        out
    }

    /// Mutable view in the same order as [`DbsnParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("entry".to_string(), &mut self.entry)];
        for (bi, branch) in self.branches.iter_mut().enumerate() {
            out.push((format!("branch{bi}.masked"), &mut branch.masked_kernel));
            for (mi, m) in branch.mdcs.iter_mut().enumerate() {
                for (si, p) in m.pre.iter_mut().enumerate() {
                    out.push((format!("branch{bi}.mdc{mi}.pre{si}"), p));
                }
                for (si, convs) in m.dilated.iter_mut().enumerate() {
                    for (ci, conv) in convs.iter_mut().enumerate() {
                        out.push((format!("branch{bi}.mdc{mi}.sub{si}.conv{ci}"), conv));
                    }
                }
                out.push((format!("branch{bi}.mdc{mi}.post"), &mut m.post_concat));
                out.push((format!("branch{bi}.mdc{mi}.out"), &mut m.output));
            }
        }
        for (hi, h) in self.head.iter_mut().enumerate() {
            out.push((format!("head{hi}"), h));
        }
        out
    }
}

/// Network output: per-pixel mean and SPD covariance of the prediction.
#[derive(Debug, Clone)]
pub struct MuSigmaOutput {
    pub mu: Tensor,
    pub sigma_mu: CovField,
}

/// Leaf bindings of parameters registered on a graph, in `named` order.
pub struct BoundParams {
    pub ids: Vec<(String, NodeId)>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.ids.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }
}

/// Parameter leaves of a full network registered on one graph. A single
/// binding can drive several forward passes (a training batch); gradients
/// then accumulate on the shared leaves.
pub struct DbsnBinding {
    config: DbsnConfig,
    entry: NodeId,
    branches: Vec<(NodeId, Tensor, Vec<MdcIds>)>,
    head: [NodeId; 3],
    bound: Vec<(String, NodeId)>,
}

impl DbsnBinding {
    pub fn bound_params(&self) -> BoundParams {
        BoundParams { ids: self.bound.clone() }
    }
}

/// One MDC module on the graph: three sub-branches of 0/1/2 dilated convs
/// over a 1x1, concatenated, fused by 1x1, residual-added, then projected.
/// ReLU follows every convolution.
fn mdc_graph(
    g: &mut Graph,
    ids: &MdcIds,
    f: NodeId,
    dilation: usize,
) -> Result<NodeId> {
    let mut sub_outputs = Vec::with_capacity(3);
    for (si, &pre) in ids.pre.iter().enumerate() {
        let mut cur = g.conv2d(f, pre, 1, None)?;
        cur = g.relu(cur);
        for &conv in &ids.dilated[si] {
            cur = g.conv2d(cur, conv, dilation, None)?;
            cur = g.relu(cur);
        }
        sub_outputs.push(cur);
    }
    let cat = g.concat_channels(&sub_outputs)?;
    let fused = g.conv2d(cat, ids.post_concat, 1, None)?;
    let fused = g.relu(fused);
    let res = g.add(fused, f)?;
    let out = g.conv2d(res, ids.output, 1, None)?;
    Ok(g.relu(out))
}

struct MdcIds {
    pre: [NodeId; 3],
    dilated: [Vec<NodeId>; 3],
    post_concat: NodeId,
    output: NodeId,
}

/// Registers all parameters of the network as graph leaves.
pub fn bind_dbsn(g: &mut Graph, params: &DbsnParams, trainable: bool) -> DbsnBinding {
    let mut bound = Vec::new();
    let mut reg = |g: &mut Graph, name: String, t: &Tensor| -> NodeId {
        let id = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        bound.push((name, id));
        id
    };
    let entry = reg(g, "entry".into(), &params.entry);
    let mut branches = Vec::with_capacity(2);
    for (bi, branch) in params.branches.iter().enumerate() {
        let masked = reg(g, format!("branch{bi}.masked"), &branch.masked_kernel);
        let mut mdcs = Vec::with_capacity(branch.mdcs.len());
        for (mi, m) in branch.mdcs.iter().enumerate() {
            mdcs.push(MdcIds {
                pre: [
                    reg(g, format!("branch{bi}.mdc{mi}.pre0"), &m.pre[0]),
                    reg(g, format!("branch{bi}.mdc{mi}.pre1"), &m.pre[1]),
                    reg(g, format!("branch{bi}.mdc{mi}.pre2"), &m.pre[2]),
                ],
                dilated: [
                    m.dilated[0]
                        .iter()
                        .enumerate()
                        .map(|(ci, t)| reg(g, format!("branch{bi}.mdc{mi}.sub0.conv{ci}"), t))
                        .collect(),
                    m.dilated[1]
                        .iter()
                        .enumerate()
                        .map(|(ci, t)| reg(g, format!("branch{bi}.mdc{mi}.sub1.conv{ci}"), t))
                        .collect(),
                    m.dilated[2]
                        .iter()
                        .enumerate()
                        .map(|(ci, t)| reg(g, format!("branch{bi}.mdc{mi}.sub2.conv{ci}"), t))
                        .collect(),
                ],
                post_concat: reg(g, format!("branch{bi}.mdc{mi}.post"), &m.post_concat),
                output: reg(g, format!("branch{bi}.mdc{mi}.out"), &m.output),
            });
        }
        branches.push((masked, branch.mask.clone(), mdcs));
    }
    let head = [
        reg(g, "head0".into(), &params.head[0]),
        reg(g, "head1".into(), &params.head[1]),
        reg(g, "head2".into(), &params.head[2]),
    ];
    DbsnBinding { config: params.config, entry, branches, head, bound }
}

/// Forward pass through already-bound parameters. Returns the mu node and
/// the SPD covariance plane node.
pub fn dbsn_forward_bound(
    g: &mut Graph,
    binding: &DbsnBinding,
    y: NodeId,
) -> Result<(NodeId, NodeId)> {
    let cfg = &binding.config;
    let (c, _, _) = g.value(y).chw()?;
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, config expects {}",
            cfg.in_channels
        )));
    }
    let mut x = g.conv2d(y, binding.entry, 1, None)?;
    x = g.relu(x);
    let mut branch_outputs = Vec::with_capacity(2);
    for (bi, (masked, mask, mdcs)) in binding.branches.iter().enumerate() {
        let (_, dilation) = BRANCH_SPECS[bi];
        let mut f = g.conv2d(x, *masked, 1, Some(mask))?;
        f = g.relu(f);
        for ids in mdcs {
            f = mdc_graph(g, ids, f, dilation)?;
        }
        branch_outputs.push(f);
    }
    let cat = g.concat_channels(&branch_outputs)?;
    let mut h = g.conv2d(cat, binding.head[0], 1, None)?;
    h = g.relu(h);
    h = g.conv2d(h, binding.head[1], 1, None)?;
    h = g.relu(h);
    let out = g.conv2d(h, binding.head[2], 1, None)?;
    let mu = g.slice_channels(out, 0, cfg.in_channels)?;
    let raw_sigma = g.slice_channels(out, cfg.in_channels, cfg.cov_planes())?;
    let sigma_planes = g.spd_head(raw_sigma, cfg.in_channels)?;
    Ok((mu, sigma_planes))
}

/// Binds parameters and runs one forward pass. Returns the mu node, the
/// SPD covariance plane node, and the parameter bindings (for reading
/// gradients after backward).
pub fn dbsn_forward_graph(
    g: &mut Graph,
    params: &DbsnParams,
    y: NodeId,
    trainable: bool,
) -> Result<(NodeId, NodeId, BoundParams)> {
    let binding = bind_dbsn(g, params, trainable);
    let (mu, sigma) = dbsn_forward_bound(g, &binding, y)?;
    Ok((mu, sigma, binding.bound_params()))
}

/// Inference-only forward pass.
pub fn dbsn_forward(params: &DbsnParams, y: &Tensor) -> Result<MuSigmaOutput> {
    let mut g = Graph::new();
    let yid = g.constant(y.clone());
    let (mu, sigma, _) = dbsn_forward_graph(&mut g, params, yid, false)?;
    Ok(MuSigmaOutput {
        mu: g.value(mu).clone(),
        sigma_mu: CovField::new(params.config.in_channels, g.value(sigma).clone())?,
    })
}

/// One MDC module applied outside a graph (inference only).
pub fn mdc_forward(m: &MdcParams, f: &Tensor, dilation: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let fid = g.constant(f.clone());
    let ids = MdcIds {
        pre: [g.constant(m.pre[0].clone()), g.constant(m.pre[1].clone()), g.constant(m.pre[2].clone())],
        dilated: [
            m.dilated[0].iter().map(|t| g.constant(t.clone())).collect(),
            m.dilated[1].iter().map(|t| g.constant(t.clone())).collect(),
            m.dilated[2].iter().map(|t| g.constant(t.clone())).collect(),
        ],
        post_concat: g.constant(m.post_concat.clone()),
        output: g.constant(m.output.clone()),
    };
    let out = mdc_graph(&mut g, &ids, fid, dilation)?;
    Ok(g.value(out).clone())
}

// ── Blind-spot verification ─────────────────────────────────────────

/// Taint of one MDC module given the taint of its input.
pub fn mdc_taint(input: &TaintSet, dilation: usize) -> TaintSet {
    let sub0 = input.clone(); // 1x1 only
    let sub1 = input.after_conv(3, dilation, false);
    let sub2 = sub1.after_conv(3, dilation, false);
    // concat + 1x1, residual add with the module input, final 1x1
    sub0.union(&sub1).union(&sub2).union(input)
}

/// Taint of a full branch: masked conv then the MDC stack.
pub fn branch_taint(mask_k: usize, dilation: usize, mdc_count: usize) -> TaintSet {
    let mut t = TaintSet::identity().after_conv(mask_k, 1, true);
    for _ in 0..mdc_count {
        t = mdc_taint(&t, dilation);
    }
    t
}

#[derive(Debug, Clone)]
pub struct TaintReport {
    pub branches: Vec<TaintSet>,
    /// Union across branches after head fusion (1x1 layers add nothing).
    pub fused: TaintSet,
    /// True when the fused receptive field excludes the center pixel.
    pub blind_spot: bool,
}

impl TaintReport {
    /// Chebyshev radius of the fused receptive field.
    pub fn radius(&self) -> usize {
        self.fused.radius()
    }
}

/// Propagates influence sets through the layer stack of `config` and
/// reports whether the center offset is ever included.
pub fn verify_blindspot(config: &DbsnConfig) -> TaintReport {
    let branches: Vec<TaintSet> = BRANCH_SPECS
        .iter()
        .map(|&(k, s)| branch_taint(k, s, config.mdc_per_branch))
        .collect();
    let fused = branches.iter().fold(TaintSet::empty(), |acc, b| acc.union(b));
    let blind_spot = !fused.contains_center() && branches.iter().all(|b| !b.contains_center());
    TaintReport { branches, fused, blind_spot }
}

/// Receptive-field radius of the configured network.
pub fn receptive_radius(config: &DbsnConfig) -> usize {
    verify_blindspot(config).radius()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> DbsnConfig {
        DbsnConfig::new(1, 8, 1).unwrap()
    }

    fn random_image(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    use rand::Rng;

    #[test]
    fn zero_params_give_zero_mu_and_eps_identity_sigma() {
        let params = DbsnParams::zeros(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_image(1, 8, 8, &mut rng);
        let out = dbsn_forward(&params, &y).unwrap();
        assert!(out.mu.data().iter().all(|&v| v == 0.0));
        for i in 0..8 {
            for j in 0..8 {
                let m = out.sigma_mu.mat_at(i, j);
                assert_eq!(m.get(0, 0), crate::spd::EPS_PSD);
            }
        }
    }

    #[test]
    fn perturbation_oracle_all_pixels() {
        // Perturbing any single pixel must leave mu and sigma at that
        // pixel bit-for-bit unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = DbsnParams::init(small_config(), &mut rng).unwrap();
        let y = random_image(1, 8, 8, &mut rng);
        let base = dbsn_forward(&params, &y).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut y2 = y.clone();
                y2.set3(0, i, j, y2.at3(0, i, j) + 1.0);
                let out = dbsn_forward(&params, &y2).unwrap();
                let dmu = (out.mu.at3(0, i, j) - base.mu.at3(0, i, j)).abs();
                assert!(dmu <= 1e-12, "mu changed by {dmu:e} at ({i},{j})");
                let m0 = base.sigma_mu.mat_at(i, j);
                let m1 = out.sigma_mu.mat_at(i, j);
                assert!((m0.get(0, 0) - m1.get(0, 0)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sigma_head_is_spd_for_random_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DbsnConfig::new(3, 6, 1).unwrap();
        let params = DbsnParams::init(cfg, &mut rng).unwrap();
        let y = random_image(3, 6, 6, &mut rng);
        let out = dbsn_forward(&params, &y).unwrap();
        assert!(out.sigma_mu.min_eigenvalue() >= crate::spd::EPS_PSD * 0.999);
    }

    #[test]
    fn translation_equivariance_on_interior() {
        let cfg = small_config();
        let radius = receptive_radius(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = DbsnParams::init(cfg, &mut rng).unwrap();
        let n = 2 * radius + 10;
        let y = random_image(1, n, n, &mut rng);
        // Shift content by (1,1): y2[i,j] = y[i-1,j-1].
        let mut y2 = Tensor::zeros(vec![1, n, n]);
        for i in 1..n {
            for j in 1..n {
                y2.set3(0, i, j, y.at3(0, i - 1, j - 1));
            }
        }
        let a = dbsn_forward(&params, &y).unwrap();
        let b = dbsn_forward(&params, &y2).unwrap();
        // Interior positions whose receptive fields avoid the boundary in
        // both passes must match exactly.
        let lo = radius + 1;
        let hi = n - radius - 1;
        assert!(lo < hi, "test image too small for radius {radius}");
        for i in lo..hi {
            for j in lo..hi {
                let d = (b.mu.at3(0, i, j) - a.mu.at3(0, i - 1, j - 1)).abs();
                assert!(d == 0.0, "equivariance violated at ({i},{j}): {d:e}");
            }
        }
    }

    #[test]
    fn mdc_zero_subbranches_pass_residual_through_scaled_output() {
        let b = 4;
        let mut m = MdcParams {
            pre: [
                Tensor::zeros(vec![b, b, 1, 1]),
                Tensor::zeros(vec![b, b, 1, 1]),
                Tensor::zeros(vec![b, b, 1, 1]),
            ],
            dilated: [
                vec![],
                vec![Tensor::zeros(vec![b, b, 3, 3])],
                vec![Tensor::zeros(vec![b, b, 3, 3]), Tensor::zeros(vec![b, b, 3, 3])],
            ],
            post_concat: Tensor::zeros(vec![b, 3 * b, 1, 1]),
            output: Tensor::zeros(vec![b, b, 1, 1]),
        };
        // Output 1x1 = 2 * identity.
        for ch in 0..b {
            m.output.data_mut()[ch * b + ch] = 2.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Non-negative input, as produced by the preceding ReLU.
        let f = Tensor::new(vec![b, 5, 5], (0..b * 25).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let out = mdc_forward(&m, &f, 2).unwrap();
        assert_eq!(out.shape(), f.shape());
        for (o, i) in out.data().iter().zip(f.data()) {
            assert!((o - 2.0 * i).abs() < 1e-15);
        }
    }

    #[test]
    fn mdc_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = DbsnParams::init(small_config(), &mut rng).unwrap();
        let m = &params.branches[0].mdcs[0];
        let f = random_image(8, 7, 9, &mut rng);
        let out = mdc_forward(m, &f, 3).unwrap();
        assert_eq!(out.shape(), f.shape());
    }

    #[test]
    fn taint_report_default_config_is_blind() {
        let report = verify_blindspot(&DbsnConfig::default());
        assert!(report.blind_spot);
        for b in &report.branches {
            assert!(!b.contains_center());
        }
        assert!(!report.fused.contains_center());
        assert!(report.radius() > 0);
    }

    #[test]
    fn taint_mdc_stack_never_touches_center() {
        for &(k, s) in &BRANCH_SPECS {
            let mut t = TaintSet::identity().after_conv(k, 1, true);
            for step in 0..7 {
                t = mdc_taint(&t, s);
                assert!(!t.contains_center(), "center tainted after {} MDCs (k={k})", step + 1);
            }
        }
    }

    #[test]
    fn plain_conv_injection_breaks_blind_spot() {
        // Negative control: a non-masked, non-dilated 3x3 conv inserted in
        // a branch taints the center.
        let t = branch_taint(3, 2, 2).after_conv(3, 1, false);
        assert!(t.contains_center());
        let fused = t.union(&branch_taint(5, 3, 2));
        assert!(fused.contains_center());
    }

    #[test]
    fn config_validation() {
        assert!(DbsnConfig::new(2, 8, 1).is_err());
        assert!(DbsnConfig::new(1, 0, 1).is_err());
        assert!(DbsnConfig::new(3, 8, 0).is_err());
        assert!(DbsnConfig::new(3, 8, 7).is_ok());
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = DbsnParams::init(small_config(), &mut rng).unwrap();
        let y = random_image(3, 6, 6, &mut rng);
        assert!(dbsn_forward(&params, &y).is_err());
    }

    #[test]
    fn named_tensors_cover_params_and_orders_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = DbsnParams::init(DbsnConfig::new(3, 4, 2).unwrap(), &mut rng).unwrap();
        let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
        let names_mut: Vec<String> = params.named_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names_mut);
        // entry + per branch (masked + mdc * (3 pre + 3 dilated + post + out)) + 3 head
        let expect = 1 + 2 * (1 + 2 * (3 + 3 + 2)) + 3;
        assert_eq!(names.len(), expect);
        // Names are unique.
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }
}
