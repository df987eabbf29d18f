//! Plain feed-forward student denoiser.
//!
//! A stack of 3x3 convolutions with ReLU in between; the network predicts
//! the noise and subtracts it from its input, so output and input shapes
//! always match.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::dbsn::BoundParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudentConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub channels: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig { in_channels: 1, depth: 8, channels: 48 }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config("student depth must be at least 2"));
        }
        if self.channels == 0 {
            return Err(Error::config("student channels must be positive"));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::config("student in_channels must be 1 or 3"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams {
    pub config: StudentConfig,
    /// (3x3 kernel, bias) per layer; first maps C -> F, last F -> C.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl StudentParams {
    pub fn init(config: StudentConfig, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        config.validate()?;
        let widths = layer_widths(&config);
        let mut layers = Vec::with_capacity(widths.len());
        for (li, &(ci, co)) in widths.iter().enumerate() {
            let std = (2.0 / (ci * 9) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            let mut kernel: Vec<f64> = (0..co * ci * 9).map(|_| dist.sample(rng)).collect();
            if li == widths.len() - 1 {
                // Start close to the identity mapping (predicted noise ~ 0).
                for v in &mut kernel {
                    *v *= 0.01;
                }
            }
            layers.push((
                Tensor::new(vec![co, ci, 3, 3], kernel).unwrap(),
                Tensor::zeros(vec![co]),
            ));
        }
        Ok(StudentParams { config, layers })
    }

    pub fn zeros(config: StudentConfig) -> Result<Self> {
        config.validate()?;
        Ok(StudentParams {
            config,
            layers: layer_widths(&config)
                .iter()
                .map(|&(ci, co)| (Tensor::zeros(vec![co, ci, 3, 3]), Tensor::zeros(vec![co])))
                .collect(),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (li, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("student.l{li}.w"), w));
            out.push((format!("student.l{li}.b"), b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (li, (w, b)) in self.layers.iter_mut().enumerate() {
            out.push((format!("student.l{li}.w"), w));
            out.push((format!("student.l{li}.b"), b));
        }
        out
    }
}

fn layer_widths(config: &StudentConfig) -> Vec<(usize, usize)> {
    let mut widths = vec![(config.in_channels, config.channels)];
    for _ in 0..config.depth - 2 {
        widths.push((config.channels, config.channels));
    }
    widths.push((config.channels, config.in_channels));
    widths
}

pub struct StudentBinding {
    layers: Vec<(NodeId, NodeId)>,
    bound: Vec<(String, NodeId)>,
}

impl StudentBinding {
    pub fn bound_params(&self) -> BoundParams {
        BoundParams { ids: self.bound.clone() }
    }
}

pub fn bind_student(g: &mut Graph, params: &StudentParams, trainable: bool) -> StudentBinding {
    let mut bound = Vec::new();
    let mut layers = Vec::new();
    for (li, (w, b)) in params.layers.iter().enumerate() {
        let wid = if trainable { g.param(w.clone()) } else { g.constant(w.clone()) };
        let bid = if trainable { g.param(b.clone()) } else { g.constant(b.clone()) };
        bound.push((format!("student.l{li}.w"), wid));
        bound.push((format!("student.l{li}.b"), bid));
        layers.push((wid, bid));
    }
    StudentBinding { layers, bound }
}

/// Residual forward pass: input minus the predicted noise.
pub fn student_forward_bound(
    g: &mut Graph,
    binding: &StudentBinding,
    y: NodeId,
) -> Result<NodeId> {
    let mut cur = y;
    let last = binding.layers.len() - 1;
    for (li, &(wid, bid)) in binding.layers.iter().enumerate() {
        cur = g.conv2d(cur, wid, 1, None)?;
        cur = g.bias_add(cur, bid)?;
        if li != last {
            cur = g.relu(cur);
        }
    }
    g.sub(y, cur)
}

/// Inference-only denoising pass.
pub fn student_forward(params: &StudentParams, y: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let yid = g.constant(y.clone());
    let binding = bind_student(&mut g, params, false);
    let out = student_forward_bound(&mut g, &binding, yid)?;
    Ok(g.value(out).clone())
}
