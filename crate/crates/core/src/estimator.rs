//! Image-specific noise level estimator.
//!
//! A stack of five 1x1 convolution layers (16 channels, ReLU after all but
//! the last) mapping a noisy image to a per-pixel SPD covariance. Because
//! every kernel is 1x1, the estimate at a pixel depends only on the input
//! value at that same pixel. Each noisy image gets its own parameter set,
//! kept in a registry keyed by image id.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::dbsn::BoundParams;
use crate::error::{Error, Result};
use crate::spd::{tri_len, CovField};
use crate::tensor::Tensor;

pub const EST_HIDDEN: usize = 16;
pub const EST_LAYERS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CnnEstParams {
    pub in_channels: usize,
    /// (kernel `[c_out, c_in, 1, 1]`, bias `[c_out]`) per layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

/// Raw head value that reconstructs to a diagonal standard deviation of
/// about 0.2 (a 51-ish noise level on the 0-255 scale), keeping the first
/// likelihood evaluations well away from the singular region.
fn initial_diag_raw() -> f64 {
    // Inverse of the shifted softplus at L = 0.2.
    (2.0 * (0.2f64).exp() - 1.0).ln()
}

impl CnnEstParams {
    pub fn init(in_channels: usize, rng: &mut (impl Rng + ?Sized)) -> Self {
        let planes = tri_len(in_channels);
        let widths: Vec<(usize, usize)> = {
            let mut w = vec![(in_channels, EST_HIDDEN)];
            for _ in 0..EST_LAYERS - 2 {
                w.push((EST_HIDDEN, EST_HIDDEN));
            }
            w.push((EST_HIDDEN, planes));
            w
        };
        let mut layers = Vec::with_capacity(EST_LAYERS);
        for (li, &(ci, co)) in widths.iter().enumerate() {
            let std = (2.0 / ci as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            let mut kernel: Vec<f64> = (0..co * ci).map(|_| dist.sample(rng)).collect();
            let mut bias = vec![0.0; co];
            if li == EST_LAYERS - 1 {
                for v in &mut kernel {
                    *v *= 0.01;
                }
                for a in 0..in_channels {
                    bias[crate::spd::tri_index(a, a)] = initial_diag_raw();
                }
            }
            layers.push((
                Tensor::new(vec![co, ci, 1, 1], kernel).unwrap(),
                Tensor::new(vec![co], bias).unwrap(),
            ));
        }
        CnnEstParams { in_channels, layers }
    }

    pub fn zeros(in_channels: usize) -> Self {
        let planes = tri_len(in_channels);
        let mut widths = vec![(in_channels, EST_HIDDEN)];
        for _ in 0..EST_LAYERS - 2 {
            widths.push((EST_HIDDEN, EST_HIDDEN));
        }
        widths.push((EST_HIDDEN, planes));
        CnnEstParams {
            in_channels,
            layers: widths
                .iter()
                .map(|&(ci, co)| (Tensor::zeros(vec![co, ci, 1, 1]), Tensor::zeros(vec![co])))
                .collect(),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (li, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.l{li}.w"), w));
            out.push((format!("{prefix}.l{li}.b"), b));
        }
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (li, (w, b)) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.l{li}.w"), w));
            out.push((format!("{prefix}.l{li}.b"), b));
        }
        out
    }
}

/// Estimator parameters registered as leaves on one graph.
pub struct EstBinding {
    in_channels: usize,
    layers: Vec<(NodeId, NodeId)>,
    bound: Vec<(String, NodeId)>,
}

impl EstBinding {
    pub fn bound_params(&self) -> BoundParams {
        BoundParams { ids: self.bound.clone() }
    }
}

/// Registers the estimator's parameters as graph leaves.
pub fn bind_cnn_est(
    g: &mut Graph,
    params: &CnnEstParams,
    trainable: bool,
    prefix: &str,
) -> EstBinding {
    let mut bound = Vec::new();
    let mut layers = Vec::with_capacity(params.layers.len());
    for (li, (w, b)) in params.layers.iter().enumerate() {
        let wid = if trainable { g.param(w.clone()) } else { g.constant(w.clone()) };
        let bid = if trainable { g.param(b.clone()) } else { g.constant(b.clone()) };
        bound.push((format!("{prefix}.l{li}.w"), wid));
        bound.push((format!("{prefix}.l{li}.b"), bid));
        layers.push((wid, bid));
    }
    EstBinding { in_channels: params.in_channels, layers, bound }
}

/// Forward pass through bound estimator parameters; returns the SPD
/// covariance plane node.
pub fn cnn_est_forward_bound(g: &mut Graph, binding: &EstBinding, y: NodeId) -> Result<NodeId> {
    let (c, _, _) = g.value(y).chw()?;
    if c != binding.in_channels {
        return Err(Error::shape(format!(
            "estimator expects {} channels, input has {c}",
            binding.in_channels
        )));
    }
    let mut cur = y;
    let last = binding.layers.len() - 1;
    for (li, &(wid, bid)) in binding.layers.iter().enumerate() {
        cur = g.conv2d(cur, wid, 1, None)?;
        cur = g.bias_add(cur, bid)?;
        if li != last {
            cur = g.relu(cur);
        }
    }
    g.spd_head(cur, binding.in_channels)
}

/// Binds and runs the estimator, returning the SPD covariance planes.
pub fn cnn_est_forward_graph(
    g: &mut Graph,
    params: &CnnEstParams,
    y: NodeId,
    trainable: bool,
    prefix: &str,
) -> Result<(NodeId, BoundParams)> {
    let binding = bind_cnn_est(g, params, trainable, prefix);
    let planes = cnn_est_forward_bound(g, &binding, y)?;
    Ok((planes, binding.bound_params()))
}

/// Per-pixel noise covariance of `y` under this estimator.
pub fn cnn_est_forward(params: &CnnEstParams, y: &Tensor) -> Result<CovField> {
    let mut g = Graph::new();
    let yid = g.constant(y.clone());
    let (planes, _) = cnn_est_forward_graph(&mut g, params, yid, false, "est")?;
    CovField::new(params.in_channels, g.value(planes).clone())
}

/// Draws correlated per-pixel Gaussian noise with covariance given by the
/// estimator evaluated on the clean image, and returns `x + noise`.
pub fn apply_learned_nlf(
    params: &CnnEstParams,
    x: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    use rand::SeedableRng;
    let field = cnn_est_forward(params, x)?;
    let (c, h, w) = x.chw()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = x.clone();
    out.grad = None;
    let hw = h * w;
    for i in 0..h {
        for j in 0..w {
            let cov = field.mat_at(i, j);
            let l = cov.cholesky().map_err(|e| {
                Error::numeric(format!("noise covariance factorization failed at ({i},{j}): {e}"))
            })?;
            let z: Vec<f64> = (0..c).map(|_| normal.sample(&mut rng)).collect();
            for ch in 0..c {
                let mut n = 0.0;
                for k in 0..=ch {
                    n += l.raw(ch, k) * z[k];
                }
                out.data_mut()[ch * hw + i * w + j] += n;
            }
        }
    }
    Ok(out)
}

/// Per-image estimator store, keyed by image id. Also remembers each
/// training image's mean intensity so unseen images can borrow the
/// estimator of the closest match.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimatorRegistry {
    entries: BTreeMap<String, (CnnEstParams, f64)>,
}

impl EstimatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, params: CnnEstParams, mean_intensity: f64) {
        self.entries.insert(id.into(), (params, mean_intensity));
    }

    pub fn get(&self, id: &str) -> Option<&CnnEstParams> {
        self.entries.get(id).map(|(p, _)| p)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut CnnEstParams> {
        self.entries.get_mut(id).map(|(p, _)| p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CnnEstParams, f64)> {
        self.entries.iter().map(|(id, (p, m))| (id.as_str(), p, *m))
    }

    /// Estimator of the trained image whose mean intensity is closest.
    pub fn nearest_by_mean(&self, mean: f64) -> Option<(&str, &CnnEstParams)> {
        self.entries
            .iter()
            .min_by(|a, b| {
                let da = (a.1 .1 - mean).abs();
                let db = (b.1 .1 - mean).abs();
                da.partial_cmp(&db).unwrap()
            })
            .map(|(id, (p, _))| (id.as_str(), p))
    }
}
