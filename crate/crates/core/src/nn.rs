//! Differentiable layer primitives.
//!
//! Layers operate on batches stored as row-major [`Tensor2D`] (rows =
//! examples). Every layer exposes a caching forward pass and a matching
//! backward pass; composite networks chain these by hand.

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{matmul, matmul_tn, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Affine map y = x W^T + b with W stored (out_dim x in_dim).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor2D,
    pub b: Vec<f64>,
}

impl Linear {
    /// Fan-in scaled uniform init for weights and bias.
    pub fn seeded(in_dim: usize, out_dim: usize, rng: &mut Prng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor2D {
            rows: out_dim,
            cols: in_dim,
            data: (0..out_dim * in_dim)
                .map(|_| rng.uniform_in(-bound, bound))
                .collect(),
        };
        let b = (0..out_dim).map(|_| rng.uniform_in(-bound, bound)).collect();
        Linear { w, b }
    }

    /// All-zero weights and bias (the zero-residual final projection).
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Tensor2D::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    pub fn forward(&self, x: &Tensor2D) -> Tensor2D {
        debug_assert_eq!(x.cols, self.in_dim());
        let mut y = Tensor2D::zeros(x.rows, self.out_dim());
        // y = x * W^T, then add bias per row.
        for i in 0..x.rows {
            let xrow = x.row(i);
            let yrow = y.row_mut(i);
            for (j, yv) in yrow.iter_mut().enumerate() {
                *yv = crate::tensor::dot(xrow, self.w.row(j)) + self.b[j];
            }
        }
        y
    }

    /// Returns dx; accumulates dW, db into `g`.
    pub fn backward(&self, x: &Tensor2D, dy: &Tensor2D, g: &mut LinearGrads) -> Tensor2D {
        // dW += dy^T x ; db += column sums of dy ; dx = dy W
        let dw = matmul_tn(dy, x);
        g.w.add_assign(&dw);
        for i in 0..dy.rows {
            for (j, &v) in dy.row(i).iter().enumerate() {
                g.b[j] += v;
            }
        }
        matmul(dy, &self.w)
    }

    pub fn grads_like(&self) -> LinearGrads {
        LinearGrads {
            w: Tensor2D::zeros(self.w.rows, self.w.cols),
            b: vec![0.0; self.b.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub w: Tensor2D,
    pub b: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn forward(self, x: &Tensor2D) -> Tensor2D {
        let data = x.data.iter().map(|&v| self.apply(v)).collect();
        Tensor2D {
            rows: x.rows,
            cols: x.cols,
            data,
        }
    }

    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Gelu => gelu(v),
            Activation::Silu => v * sigmoid(v),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_derivative(v),
            Activation::Silu => {
                let s = sigmoid(v);
                s + v * s * (1.0 - s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
        }
    }

    /// dx from the cached pre-activation input.
    pub fn backward(self, x: &Tensor2D, dy: &Tensor2D) -> Tensor2D {
        debug_assert_eq!(x.shape(), dy.shape());
        let data = x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &d)| d * self.derivative(v))
            .collect();
        Tensor2D {
            rows: x.rows,
            cols: x.cols,
            data,
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Tanh-form GELU; the derivative below differentiates this exact expression.
#[inline]
pub fn gelu(v: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh())
}

#[inline]
fn gelu_derivative(v: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * v * v)
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

/// Row-wise layer normalization with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor2D) -> (Tensor2D, LayerNormCache) {
        let (xhat, inv_std) = normalize_rows(x, self.eps);
        let mut y = xhat.clone();
        for i in 0..y.rows {
            for (j, v) in y.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.gamma[j] + self.beta[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Tensor2D, g: &mut LayerNormGrads) -> Tensor2D {
        let d = self.dim() as f64;
        let mut dx = Tensor2D::zeros(dy.rows, dy.cols);
        for i in 0..dy.rows {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            // Accumulate parameter grads.
            for j in 0..dyr.len() {
                g.gamma[j] += dyr[j] * xh[j];
                g.beta[j] += dyr[j];
            }
            // dxhat = dy * gamma
            let dxhat: Vec<f64> = dyr
                .iter()
                .zip(&self.gamma)
                .map(|(&dv, &gm)| dv * gm)
                .collect();
            let mean_dxhat = dxhat.iter().sum::<f64>() / d;
            let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
            let istd = cache.inv_std[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = istd * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
        dx
    }

    pub fn grads_like(&self) -> LayerNormGrads {
        LayerNormGrads {
            gamma: vec![0.0; self.gamma.len()],
            beta: vec![0.0; self.beta.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor2D,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Row normalization without affine parameters (used inside AdaLN blocks).
pub fn normalize_rows(x: &Tensor2D, eps: f64) -> (Tensor2D, Vec<f64>) {
    let d = x.cols as f64;
    let mut xhat = Tensor2D::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for (o, &v) in xhat.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * istd;
        }
    }
    (xhat, inv_std)
}

/// Backward of [`normalize_rows`].
pub fn normalize_rows_backward(xhat: &Tensor2D, inv_std: &[f64], dy: &Tensor2D) -> Tensor2D {
    let d = xhat.cols as f64;
    let mut dx = Tensor2D::zeros(dy.rows, dy.cols);
    for i in 0..dy.rows {
        let dyr = dy.row(i);
        let xh = xhat.row(i);
        let mean_dy = dyr.iter().sum::<f64>() / d;
        let mean_dy_xhat = dyr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let istd = inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = istd * (dyr[j] - mean_dy - xh[j] * mean_dy_xhat);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// BatchNorm1d
// ---------------------------------------------------------------------------

/// Per-feature batch normalization with running statistics.
///
/// Population variance is used both for normalization and for the running
/// update, keeping train/infer behavior a pure function of the data seen.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> Self {
        BatchNorm1d {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor2D, mode: Mode) -> (Tensor2D, BatchNormCache) {
        let n = x.rows as f64;
        let dim = self.dim();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; dim];
                let mut var = vec![0.0; dim];
                for i in 0..x.rows {
                    for (j, &v) in x.row(i).iter().enumerate() {
                        mean[j] += v;
                    }
                }
                for m in &mut mean {
                    *m /= n;
                }
                for i in 0..x.rows {
                    for (j, &v) in x.row(i).iter().enumerate() {
                        let d = v - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= n;
                }
                for j in 0..dim {
                    self.running_mean[j] =
                        (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
                    self.running_var[j] =
                        (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j];
                }
                (mean, var)
            }
            Mode::Infer => (self.running_mean.clone(), self.running_var.clone()),
        };
        let mut xhat = Tensor2D::zeros(x.rows, x.cols);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut y = Tensor2D::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            for j in 0..dim {
                let h = (x.at(i, j) - mean[j]) * inv_std[j];
                *xhat.at_mut(i, j) = h;
                *y.at_mut(i, j) = h * self.gamma[j] + self.beta[j];
            }
        }
        (y, BatchNormCache { xhat, inv_std, mode })
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: &Tensor2D, g: &mut BatchNormGrads) -> Tensor2D {
        let n = dy.rows as f64;
        let dim = self.dim();
        let mut dx = Tensor2D::zeros(dy.rows, dy.cols);
        for j in 0..dim {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..dy.rows {
                let d = dy.at(i, j);
                sum_dy += d;
                sum_dy_xhat += d * cache.xhat.at(i, j);
            }
            g.gamma[j] += sum_dy_xhat;
            g.beta[j] += sum_dy;
            let scale = self.gamma[j] * cache.inv_std[j];
            match cache.mode {
                Mode::Train => {
                    for i in 0..dy.rows {
                        let d = dy.at(i, j);
                        *dx.at_mut(i, j) = scale
                            * (d - sum_dy / n - cache.xhat.at(i, j) * sum_dy_xhat / n);
                    }
                }
                Mode::Infer => {
                    // Running stats are constants w.r.t. the input.
                    for i in 0..dy.rows {
                        *dx.at_mut(i, j) = scale * dy.at(i, j);
                    }
                }
            }
        }
        dx
    }

    pub fn grads_like(&self) -> BatchNormGrads {
        BatchNormGrads {
            gamma: vec![0.0; self.gamma.len()],
            beta: vec![0.0; self.beta.len()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Tensor2D,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Layer enum + sequential stack
// ---------------------------------------------------------------------------

/// One layer of a plain feed-forward stack.
#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Act(Activation),
    LayerNorm(LayerNorm),
    BatchNorm(BatchNorm1d),
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Linear { x: Tensor2D },
    Act { x: Tensor2D },
    LayerNorm(LayerNormCache),
    BatchNorm(BatchNormCache),
}

#[derive(Debug, Clone)]
pub enum LayerGrads {
    Linear(LinearGrads),
    None,
    LayerNorm(LayerNormGrads),
    BatchNorm(BatchNormGrads),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Act(Activation::Relu) => "relu",
            Layer::Act(Activation::Gelu) => "gelu",
            Layer::Act(Activation::Silu) => "silu",
            Layer::Act(Activation::Sigmoid) => "sigmoid",
            Layer::LayerNorm(_) => "layernorm",
            Layer::BatchNorm(_) => "batchnorm1d",
        }
    }

    pub fn in_dim(&self) -> Option<usize> {
        match self {
            Layer::Linear(l) => Some(l.in_dim()),
            Layer::Act(_) => None,
            Layer::LayerNorm(l) => Some(l.dim()),
            Layer::BatchNorm(b) => Some(b.dim()),
        }
    }

    pub fn forward(&mut self, x: &Tensor2D, mode: Mode) -> Result<(Tensor2D, LayerCache)> {
        if let Some(d) = self.in_dim() {
            if x.cols != d {
                return Err(Error::dim(
                    format!("{} layer input", self.kind_name()),
                    d.to_string(),
                    x.cols.to_string(),
                ));
            }
        }
        Ok(match self {
            Layer::Linear(l) => (l.forward(x), LayerCache::Linear { x: x.clone() }),
            Layer::Act(a) => (a.forward(x), LayerCache::Act { x: x.clone() }),
            Layer::LayerNorm(l) => {
                let (y, c) = l.forward(x);
                (y, LayerCache::LayerNorm(c))
            }
            Layer::BatchNorm(b) => {
                let (y, c) = b.forward(x, mode);
                (y, LayerCache::BatchNorm(c))
            }
        })
    }

    pub fn backward(&self, cache: &LayerCache, dy: &Tensor2D, g: &mut LayerGrads) -> Tensor2D {
        match (self, cache, g) {
            (Layer::Linear(l), LayerCache::Linear { x }, LayerGrads::Linear(lg)) => {
                l.backward(x, dy, lg)
            }
            (Layer::Act(a), LayerCache::Act { x }, _) => a.backward(x, dy),
            (Layer::LayerNorm(l), LayerCache::LayerNorm(c), LayerGrads::LayerNorm(lg)) => {
                l.backward(c, dy, lg)
            }
            (Layer::BatchNorm(b), LayerCache::BatchNorm(c), LayerGrads::BatchNorm(bg)) => {
                b.backward(c, dy, bg)
            }
            _ => panic!("layer/cache/grads kind mismatch"),
        }
    }

    pub fn grads_like(&self) -> LayerGrads {
        match self {
            Layer::Linear(l) => LayerGrads::Linear(l.grads_like()),
            Layer::Act(_) => LayerGrads::None,
            Layer::LayerNorm(l) => LayerGrads::LayerNorm(l.grads_like()),
            Layer::BatchNorm(b) => LayerGrads::BatchNorm(b.grads_like()),
        }
    }

    /// Trainable parameter slices in a fixed order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        match self {
            Layer::Linear(l) => {
                f(&l.w.data);
                f(&l.b);
            }
            Layer::Act(_) => {}
            Layer::LayerNorm(l) => {
                f(&l.gamma);
                f(&l.beta);
            }
            Layer::BatchNorm(b) => {
                f(&b.gamma);
                f(&b.beta);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        match self {
            Layer::Linear(l) => {
                f(&mut l.w.data);
                f(&mut l.b);
            }
            Layer::Act(_) => {}
            Layer::LayerNorm(l) => {
                f(&mut l.gamma);
                f(&mut l.beta);
            }
            Layer::BatchNorm(b) => {
                f(&mut b.gamma);
                f(&mut b.beta);
            }
        }
    }
}

impl LayerGrads {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        match self {
            LayerGrads::Linear(g) => {
                f(&g.w.data);
                f(&g.b);
            }
            LayerGrads::None => {}
            LayerGrads::LayerNorm(g) => {
                f(&g.gamma);
                f(&g.beta);
            }
            LayerGrads::BatchNorm(g) => {
                f(&g.gamma);
                f(&g.beta);
            }
        }
    }
}

/// Apply a single layer outside of a training loop; validates dimensions and
/// rejects non-finite outputs.
pub fn apply_layer(layer: &mut Layer, input: &Tensor2D, mode: Mode) -> Result<Tensor2D> {
    let (y, _) = layer.forward(input, mode)?;
    if !y.is_finite() {
        return Err(Error::numerical(
            format!("{} layer", layer.kind_name()),
            "non-finite output",
        ));
    }
    Ok(y)
}

/// A plain feed-forward stack.
#[derive(Debug, Clone)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn forward(&mut self, x: &Tensor2D, mode: Mode) -> Result<(Tensor2D, Vec<LayerCache>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (y, c) = layer.forward(&h, mode)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    /// Inference without caches; does not update batchnorm running stats.
    pub fn infer(&self, x: &Tensor2D) -> Result<Tensor2D> {
        let mut h = x.clone();
        for layer in &self.layers {
            // Infer mode never mutates, so a clone-free path would need
            // interior mutability; a cheap clone of the layer header is fine
            // for the norm layers and free for the rest.
            let mut l = layer.clone();
            let (y, _) = l.forward(&h, Mode::Infer)?;
            h = y;
        }
        Ok(h)
    }

    pub fn backward(
        &self,
        caches: &[LayerCache],
        dy: &Tensor2D,
        grads: &mut [LayerGrads],
    ) -> Tensor2D {
        let mut d = dy.clone();
        for ((layer, cache), g) in self
            .layers
            .iter()
            .zip(caches)
            .rev()
            .zip(grads.iter_mut().rev())
        {
            d = layer.backward(cache, &d, g);
        }
        d
    }

    pub fn grads_like(&self) -> Vec<LayerGrads> {
        self.layers.iter().map(|l| l.grads_like()).collect()
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |s| n += s.len());
        n
    }
}
