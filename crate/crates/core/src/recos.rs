//! One rectified-correlation unit: sphere normalization, the rectifier
//! family and anchor banks.
//!
//! An anchor bank holds `K` anchor vectors `a_k` of dimension `N` plus one
//! coefficient `a_0` per anchor that multiplies the mean of the input:
//!
//! ```text
//! b_k = Σ_n a_kn·x_n + a_0k·μ(x),   μ(x) = (1/N) Σ_n x_n
//! ```
//!
//! This is the augmented-vector form `a'ᵀx'` with `x' = (μ, x_1..x_N)`.
//! When a row satisfies `a_0 = −Σ_n a_n` (zero-sum mode) the unit ignores
//! any constant offset of its input, so a flat patch produces no response.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Tensor};

/// Default cutoff below which a mean-removed vector counts as flat.
pub const DEFAULT_FLAT_THRESHOLD: f32 = 1e-4;

/// A vector projected onto the unit sphere after mean removal.
#[derive(Debug, Clone, PartialEq)]
pub struct SpherePoint {
    /// Unit vector, or all zeros for a flat input.
    pub vector: Vec<f32>,
    pub mean: f32,
    pub magnitude: f32,
}

impl SpherePoint {
    pub fn is_zero(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0)
    }
}

pub fn normalize_to_sphere(x: &[f32], flat_threshold: f32) -> Result<SpherePoint> {
    if x.is_empty() {
        return Err(Error::invalid("cannot normalize an empty vector"));
    }
    if !(flat_threshold > 0.0) {
        return Err(Error::invalid(format!(
            "flat threshold must be positive, got {flat_threshold}"
        )));
    }
    let mean = (x.iter().map(|&v| f64::from(v)).sum::<f64>() / x.len() as f64) as f32;
    let mut vector: Vec<f32> = x.iter().map(|&v| v - mean).collect();
    let magnitude = norm(&vector);
    if magnitude < flat_threshold {
        vector.iter_mut().for_each(|v| *v = 0.0);
    } else {
        vector.iter_mut().for_each(|v| *v /= magnitude);
    }
    Ok(SpherePoint {
        vector,
        mean,
        magnitude,
    })
}

/// Arc length between two unit vectors, in radians.
pub fn geodesic_angle(x: &[f32], y: &[f32]) -> Result<f32> {
    if x.len() != y.len() {
        return Err(Error::shape("geodesic_angle", x.len(), y.len()));
    }
    for v in [x, y] {
        let n = norm(v);
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::NotUnitVector { norm: n });
        }
    }
    let c: f64 = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    Ok(c.clamp(-1.0, 1.0).acos() as f32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rectifier {
    Sigmoid,
    Relu,
    /// Leaky ReLU with a fixed negative-side slope in (0, 1).
    PRelu { slope: f32 },
    /// Zero below `phi`, `(v − phi)/(1 − phi)` above; `phi` in [0, 1).
    TRelu { phi: f32 },
}

impl Rectifier {
    pub fn prelu(slope: f32) -> Result<Self> {
        if slope > 0.0 && slope < 1.0 {
            Ok(Rectifier::PRelu { slope })
        } else {
            Err(Error::invalid(format!("PReLU slope must lie in (0, 1), got {slope}")))
        }
    }

    pub fn trelu(phi: f32) -> Result<Self> {
        if (0.0..1.0).contains(&phi) {
            Ok(Rectifier::TRelu { phi })
        } else {
            Err(Error::invalid(format!("TReLU threshold must lie in [0, 1), got {phi}")))
        }
    }

    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Rectifier::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            Rectifier::Relu => v.max(0.0),
            Rectifier::PRelu { slope } => {
                if v >= 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            Rectifier::TRelu { phi } => {
                if v >= phi {
                    (v - phi) / (1.0 - phi)
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative of [`Rectifier::apply`]; right-hand limit at kinks.
    #[inline]
    pub fn grad(self, v: f32) -> f32 {
        match self {
            Rectifier::Sigmoid => {
                let s = 1.0 / (1.0 + (-v).exp());
                s * (1.0 - s)
            }
            Rectifier::Relu => {
                if v >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Rectifier::PRelu { slope } => {
                if v >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Rectifier::TRelu { phi } => {
                if v >= phi {
                    1.0 / (1.0 - phi)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply_slice(self, v: &[f32]) -> Vec<f32> {
        v.iter().map(|&x| self.apply(x)).collect()
    }

    /// Whether every output is non-negative.
    pub fn is_non_negative(self) -> bool {
        !matches!(self, Rectifier::PRelu { .. })
    }
}

impl fmt::Display for Rectifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rectifier::Sigmoid => write!(f, "sigmoid"),
            Rectifier::Relu => write!(f, "relu"),
            Rectifier::PRelu { slope } => write!(f, "prelu:{slope}"),
            Rectifier::TRelu { phi } => write!(f, "trelu:{phi}"),
        }
    }
}

impl FromStr for Rectifier {
    type Err = Error;

    /// Parses `sigmoid`, `relu`, `prelu:SLOPE` or `trelu:PHI`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let param = |what: &str| -> Result<f32> {
            let a = arg.ok_or_else(|| Error::invalid(format!("{name} needs a {what}, e.g. {name}:0.5")))?;
            a.trim()
                .parse::<f32>()
                .map_err(|_| Error::invalid(format!("bad {what} {a:?} for {name}")))
        };
        match (name.trim().to_ascii_lowercase().as_str(), arg) {
            ("sigmoid", None) => Ok(Rectifier::Sigmoid),
            ("relu", None) => Ok(Rectifier::Relu),
            ("prelu", _) => Rectifier::prelu(param("slope")?),
            ("trelu", _) => Rectifier::trelu(param("threshold")?),
            _ => Err(Error::invalid(format!(
                "unknown rectifier {s:?} (expected sigmoid, relu, prelu:SLOPE or trelu:PHI)"
            ))),
        }
    }
}

/// `K` anchor vectors of dimension `N` and their mean coefficients `a_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBank {
    anchors: usize,
    dim: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl AnchorBank {
    pub fn zeros(anchors: usize, dim: usize) -> Self {
        AnchorBank {
            anchors,
            dim,
            weights: vec![0.0; anchors * dim],
            bias: vec![0.0; anchors],
        }
    }

    /// Builds a bank from a `K×N` weight matrix and `K` mean coefficients.
    pub fn new(weights: Tensor, bias: Vec<f32>) -> Result<Self> {
        let (anchors, dim) = weights
            .matrix_dims()
            .ok_or_else(|| Error::shape("AnchorBank::new", "K×N matrix", weights.shape()))?;
        if bias.len() != anchors {
            return Err(Error::shape("AnchorBank::new", format!("{anchors} biases"), bias.len()));
        }
        let bank = AnchorBank {
            anchors,
            dim,
            weights: weights.into_data(),
            bias,
        };
        if !bank.weights.iter().chain(&bank.bias).all(|v| v.is_finite()) {
            return Err(Error::invalid("anchor bank entries must be finite"));
        }
        Ok(bank)
    }

    /// A bank whose mean coefficients are set by the zero-sum rule.
    pub fn zero_sum(weights: Tensor) -> Result<Self> {
        let rows = weights.matrix_dims().map(|(r, _)| r).unwrap_or(0);
        let mut bank = AnchorBank::new(weights, vec![0.0; rows])?;
        bank.set_zero_sum_bias();
        Ok(bank)
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight_matrix(&self) -> Tensor {
        Tensor::matrix(self.anchors, self.dim, self.weights.clone()).expect("bank dims are consistent")
    }

    /// `a_0 = −Σ_n a_n` for every anchor.
    pub fn set_zero_sum_bias(&mut self) {
        for k in 0..self.anchors {
            let s: f64 = self.row(k).iter().map(|&v| f64::from(v)).sum();
            self.bias[k] = -s as f32;
        }
    }

    pub fn is_zero_sum(&self, tol: f32) -> bool {
        (0..self.anchors).all(|k| {
            let s: f64 = self.row(k).iter().map(|&v| f64::from(v)).sum();
            (s + f64::from(self.bias[k])).abs() <= f64::from(tol)
        })
    }

    /// Pre-rectification responses `b_k = a_kᵀx + a_0k·μ(x)`.
    pub fn correlate(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.dim {
            return Err(Error::shape("AnchorBank::correlate", self.dim, x.len()));
        }
        let mean = x.iter().sum::<f32>() / self.dim as f32;
        Ok((0..self.anchors)
            .map(|k| dot(self.row(k), x) + self.bias[k] * mean)
            .collect())
    }
}

pub fn recos_forward(x: &[f32], bank: &AnchorBank, rectifier: Rectifier) -> Result<Vec<f32>> {
    Ok(rectifier.apply_slice(&bank.correlate(x)?))
}

/// Which anchors an input is associated with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterRoles {
    /// Relevant anchor with the largest raw correlation (lowest index on
    /// ties); `None` when nothing is relevant.
    pub primary: Option<usize>,
    /// Anchors with a strictly positive rectified output.
    pub relevant: Vec<usize>,
    /// `relevant` minus the primary anchor.
    pub auxiliary: Vec<usize>,
}

pub fn cluster_roles(x: &[f32], bank: &AnchorBank, rectifier: Rectifier) -> Result<ClusterRoles> {
    if bank.anchors() == 0 {
        return Err(Error::invalid("cluster roles need at least one anchor"));
    }
    let raw = bank.correlate(x)?;
    let rectified = rectifier.apply_slice(&raw);
    Ok(roles_from_responses(&raw, &rectified))
}

/// Cluster roles from precomputed raw and rectified responses.
pub fn roles_from_responses(raw: &[f32], rectified: &[f32]) -> ClusterRoles {
    let relevant: Vec<usize> = (0..rectified.len()).filter(|&k| rectified[k] > 0.0).collect();
    let mut primary: Option<usize> = None;
    for &k in &relevant {
        if primary.is_none_or(|p| raw[k] > raw[p]) {
            primary = Some(k);
        }
    }
    let auxiliary = relevant.iter().copied().filter(|&k| Some(k) != primary).collect();
    ClusterRoles {
        primary,
        relevant,
        auxiliary,
    }
}
