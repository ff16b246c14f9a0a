//! Local client models and the non-trainable global module.
//!
//! A local model maps a client's feature slice `X_k` (n x d_k) to per-class
//! confidences `h_k` (n x C). Linear models compute `X W + 1 b^T`; MLPs stack
//! affine layers with ReLU in between and emit `C` logits from the last layer.
//! The global module only sums client confidences and applies a softmax.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, dot, softmax_rows, Matrix, RandomSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp => "mlp",
        })
    }
}

/// One affine layer; `weights` is `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
}

/// Parameters of a local model. Gradients and perturbations share the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<Layer>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: l.bias.as_ref().map(|b| vec![0.0; b.len()]),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.values().len() + l.bias.as_ref().map_or(0, Vec::len))
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Layer by layer: weights row-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.layers {
            out.extend_from_slice(l.weights.values());
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    /// Builds a parameter set with this layout from flat values.
    pub fn with_values(&self, flat: &[f64]) -> Result<Params> {
        if flat.len() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "Params::with_values",
                left: (self.len(), 1),
                right: (flat.len(), 1),
            });
        }
        let mut out = self.clone();
        let mut pos = 0;
        for l in &mut out.layers {
            let n = l.weights.values().len();
            l.weights.values_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
            if let Some(b) = &mut l.bias {
                let m = b.len();
                b.copy_from_slice(&flat[pos..pos + m]);
                pos += m;
            }
        }
        Ok(out)
    }

    fn for_each_pair(&mut self, other: &Params, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.values_mut().iter_mut().zip(b.weights.values()) {
                f(x, *y);
            }
            if let (Some(ab), Some(bb)) = (&mut a.bias, &b.bias) {
                for (x, y) in ab.iter_mut().zip(bb) {
                    f(x, *y);
                }
            }
        }
    }

    fn same_layout(&self, other: &Params) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape()
                    && a.bias.as_ref().map(Vec::len) == b.bias.as_ref().map(Vec::len)
            })
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::invalid("parameter layouts differ"));
        }
        self.for_each_pair(other, |x, y| *x += alpha * y);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.scale_in_place(factor);
            if let Some(b) = &mut l.bias {
                b.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        let flat = self.flatten();
        dot(&flat, &flat)
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Per-client model producing `n x C` confidences from an `n x d_k` block.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalModel {
    kind: ModelKind,
    params: Params,
    input_dim: usize,
    class_count: usize,
}

/// Shape and bias policy used to build the per-client models of a federation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Hidden widths for MLPs; ignored for linear models.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![16]
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Linear,
            hidden: default_hidden(),
        }
    }
}

impl ModelSpec {
    pub fn linear() -> Self {
        Self::default()
    }

    pub fn mlp(hidden: Vec<usize>) -> Self {
        Self {
            kind: ModelKind::Mlp,
            hidden,
        }
    }

    /// One model per client. In linear mode only the active party owns a bias.
    pub fn build(
        &self,
        client_widths: &[usize],
        class_count: usize,
        active_party: usize,
        seed: u64,
    ) -> Result<Vec<LocalModel>> {
        client_widths
            .iter()
            .enumerate()
            .map(|(k, &d)| {
                let mut rng = RandomSource::new(seed, crate::numerics::streams::init(k));
                match self.kind {
                    ModelKind::Linear => {
                        LocalModel::linear(d, class_count, k == active_party, &mut rng)
                    }
                    ModelKind::Mlp => LocalModel::mlp(d, &self.hidden, class_count, &mut rng),
                }
            })
            .collect()
    }
}

fn init_layer(fan_in: usize, fan_out: usize, bias: bool, rng: &mut RandomSource) -> Layer {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let weights: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    let bias = bias.then(|| (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect());
    Layer {
        weights: Matrix::from_vec(fan_in, fan_out, weights).expect("finite init"),
        bias,
    }
}

impl LocalModel {
    pub fn linear(
        input_dim: usize,
        class_count: usize,
        with_bias: bool,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        if input_dim == 0 || class_count == 0 {
            return Err(Error::invalid(
                "linear model needs input_dim and class_count > 0",
            ));
        }
        Ok(Self {
            kind: ModelKind::Linear,
            params: Params {
                layers: vec![init_layer(input_dim, class_count, with_bias, rng)],
            },
            input_dim,
            class_count,
        })
    }

    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        class_count: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        if input_dim == 0 || class_count == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid(
                "mlp needs input_dim, class_count and every hidden width > 0",
            ));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(class_count);
        let layers = widths
            .windows(2)
            .map(|w| init_layer(w[0], w[1], true, rng))
            .collect();
        Ok(Self {
            kind: ModelKind::Mlp,
            params: Params { layers },
            input_dim,
            class_count,
        })
    }

    /// Wraps explicit parameters after checking that the layer shapes chain.
    pub fn from_params(kind: ModelKind, params: Params) -> Result<Self> {
        let first = params
            .layers
            .first()
            .ok_or_else(|| Error::invalid("model needs at least one layer"))?;
        if kind == ModelKind::Linear && params.layers.len() != 1 {
            return Err(Error::invalid("linear model has exactly one layer"));
        }
        if kind == ModelKind::Mlp && params.layers.len() < 2 {
            return Err(Error::invalid("mlp needs at least two layers"));
        }
        for w in params.layers.windows(2) {
            if w[0].weights.cols() != w[1].weights.rows() {
                return Err(Error::ShapeMismatch {
                    op: "layer chain",
                    left: w[0].weights.shape(),
                    right: w[1].weights.shape(),
                });
            }
        }
        for l in &params.layers {
            if let Some(b) = &l.bias {
                if b.len() != l.weights.cols() {
                    return Err(Error::invalid("bias width differs from layer output width"));
                }
            }
        }
        let input_dim = first.weights.rows();
        let class_count = params.layers.last().unwrap().weights.cols();
        Ok(Self {
            kind,
            params,
            input_dim,
            class_count,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: x.shape(),
                right: (self.input_dim, self.class_count),
            });
        }
        Ok(())
    }

    /// Pre-activations of every layer.
    fn pre_activations(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.params.layers.len());
        let mut input = x.clone();
        let last = self.params.layers.len() - 1;
        for (p, layer) in self.params.layers.iter().enumerate() {
            let mut z = input.matmul(&layer.weights)?;
            if let Some(b) = &layer.bias {
                z.add_row_vector(b)?;
            }
            if p < last {
                input = relu(&z);
            }
            pre.push(z);
        }
        Ok(pre)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.pre_activations(x)?.pop().expect("at least one layer"))
    }

    /// Gradient of `sum_s <upstream_s, h(x_s)>` with respect to every parameter.
    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<Params> {
        if upstream.shape() != (x.rows(), self.class_count) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: upstream.shape(),
                right: (x.rows(), self.class_count),
            });
        }
        let pre = self.pre_activations(x)?;
        let mut grads = self.params.zeros_like();
        let mut delta = upstream.clone();
        for p in (0..self.params.layers.len()).rev() {
            let input = if p == 0 { x.clone() } else { relu(&pre[p - 1]) };
            grads.layers[p].weights = input.t_matmul(&delta)?;
            if let Some(b) = &mut grads.layers[p].bias {
                b.copy_from_slice(&delta.column_sums());
            }
            if p > 0 {
                let mut back = delta.matmul_t(&self.params.layers[p].weights)?;
                for (g, z) in back.values_mut().iter_mut().zip(pre[p - 1].values()) {
                    if *z < 0.0 {
                        *g = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok(grads)
    }

    /// `theta <- theta - eta * (grad + l2_lambda * theta + perturbation)`.
    ///
    /// `perturbation` is flat in [`Params::flatten`] order; `None` means zero.
    pub fn apply_update(
        &mut self,
        grads: &Params,
        eta: f64,
        l2_lambda: f64,
        perturbation: Option<&[f64]>,
    ) -> Result<()> {
        if !(eta > 0.0) {
            return Err(Error::invalid(format!("eta must be > 0, got {eta}")));
        }
        let mut step = grads.clone();
        if l2_lambda != 0.0 {
            step.add_scaled(l2_lambda, &self.params)?;
        }
        if let Some(b) = perturbation {
            let b = self.params.with_values(b)?;
            step.add_scaled(1.0, &b)?;
        }
        self.params.add_scaled(-eta, &step)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }

    /// Versioned flat text checkpoint; values are printed with round-trip precision.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(out, "kind {}", self.kind);
        let _ = writeln!(out, "layers {}", self.params.layers.len());
        for l in &self.params.layers {
            let _ = writeln!(
                out,
                "layer {} {} {}",
                l.weights.rows(),
                l.weights.cols(),
                u8::from(l.bias.is_some())
            );
            for v in l.weights.values() {
                let _ = writeln!(out, "{v:?}");
            }
            for v in l.bias.iter().flatten() {
                let _ = writeln!(out, "{v:?}");
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing or unsupported header"));
        }
        let kind = match lines.next().and_then(|l| l.strip_prefix("kind ")) {
            Some("linear") => ModelKind::Linear,
            Some("mlp") => ModelKind::Mlp,
            _ => return Err(bad("bad kind line")),
        };
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("layers "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad layers line"))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let header: Vec<usize> = lines
                .next()
                .and_then(|l| l.strip_prefix("layer "))
                .map(|l| {
                    l.split_whitespace()
                        .filter_map(|t| t.parse().ok())
                        .collect()
                })
                .ok_or_else(|| bad("bad layer header"))?;
            let [rows, cols, has_bias] = header[..] else {
                return Err(bad("layer header needs rows, cols and bias flag"));
            };
            let mut read = |n: usize| -> Result<Vec<f64>> {
                (0..n)
                    .map(|_| {
                        lines
                            .next()
                            .and_then(|l| l.parse::<f64>().ok())
                            .ok_or_else(|| bad("truncated or non-numeric value"))
                    })
                    .collect()
            };
            let weights = Matrix::from_vec(rows, cols, read(rows * cols)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let bias = if has_bias == 1 {
                Some(read(cols)?)
            } else {
                None
            };
            layers.push(Layer { weights, bias });
        }
        if lines.next().is_some() {
            return Err(bad("trailing data after last layer"));
        }
        LocalModel::from_params(kind, Params { layers })
    }
}

pub const CHECKPOINT_MAGIC: &str = "VFU-CHECKPOINT v1";

fn relu(m: &Matrix) -> Matrix {
    m.map(|v| if v >= 0.0 { v } else { 0.0 })
}

/// The non-trainable global module of AggVFL.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalModel {
    pub class_count: usize,
}

impl GlobalModel {
    pub fn new(class_count: usize) -> Self {
        Self { class_count }
    }

    pub fn predict(&self, h: &Matrix) -> Matrix {
        global_predict(h)
    }
}

/// Final output `p = softmax(H)`.
pub fn global_predict(h: &Matrix) -> Matrix {
    softmax_rows(h)
}

/// `dL/dH = (softmax(H) - Y) / n`.
pub fn global_loss_grad(h: &Matrix, y: &Matrix, n: usize) -> Result<Matrix> {
    if h.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "global_loss_grad",
            left: h.shape(),
            right: y.shape(),
        });
    }
    let mut g = softmax_rows(h);
    g.sub_assign(y)?;
    g.scale_in_place(1.0 / n as f64);
    Ok(g)
}

/// Weighted variant: row `s` is scaled by `w_s / sum(w)`; zero-weight rows give zero.
pub fn global_loss_grad_weighted(h: &Matrix, y: &Matrix, weights: &[f64]) -> Result<Matrix> {
    if weights.len() != h.rows() {
        return Err(Error::ShapeMismatch {
            op: "global_loss_grad weights",
            left: h.shape(),
            right: (weights.len(), 1),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyInput(
            "global_loss_grad: all rows have zero weight",
        ));
    }
    let mut g = softmax_rows(h);
    g.sub_assign(y)?;
    for (r, &w) in weights.iter().enumerate() {
        let f = w / total;
        g.row_mut(r).iter_mut().for_each(|v| *v *= f);
    }
    Ok(g)
}

/// Mean cross-entropy of the aggregated confidences (no regularizer).
pub fn global_loss(h: &Matrix, y: &Matrix, weights: &[f64]) -> Result<f64> {
    cross_entropy(h, y, Some(weights))
}
