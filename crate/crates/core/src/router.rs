//! Depth-dynamic mixture-of-experts routing.
//!
//! A small gating network reads a 6-dimensional statistical signature of a
//! layer's delta matrix and produces g in (0, 1): the share of the
//! aggressive expert in a convex blend with the surgical expert. The router
//! trains against two anchors (the surgical output and the safe reference)
//! while both experts stay frozen.

use crate::error::{Error, Result};
use crate::gradcheck::DiffModel;
use crate::io::TensorContainer;
use crate::nn::{sigmoid, Activation, Linear, LinearGrads};
use crate::optim::{schedule_value, Slot};
use crate::rng::Prng;
use crate::tensor::Tensor2D;
use crate::translator::cvae::{linear_slots, load_linear, visit_linear};
use crate::translator::seqnet::gather_rows;
use crate::translator::TrainRecipe;

/// Per-layer weight-space signature consumed by the router.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateFeatures {
    /// Mean of all entries.
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// L2 norm over all entries.
    pub l2: f64,
    /// Maximum absolute entry.
    pub max_abs: f64,
    /// log10(d * k), the dimensionality scaled for stability.
    pub dim_scaled: f64,
    /// Normalized layer position l / L.
    pub position: f64,
}

impl GateFeatures {
    pub fn to_vec(&self) -> [f64; 6] {
        [
            self.mean,
            self.std,
            self.l2,
            self.max_abs,
            self.dim_scaled,
            self.position,
        ]
    }
}

/// Statistics of a delta matrix at layer l of L.
pub fn extract_features(delta: &Tensor2D, l: usize, total_layers: usize) -> Result<GateFeatures> {
    if delta.data.is_empty() {
        return Err(Error::Validation("extract_features: empty matrix".into()));
    }
    if l >= total_layers {
        return Err(Error::Validation(format!(
            "layer index {l} out of range (L = {total_layers})"
        )));
    }
    let n = delta.data.len() as f64;
    let mean = delta.data.iter().sum::<f64>() / n;
    let var = delta.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let l2 = delta.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let max_abs = delta.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(GateFeatures {
        mean,
        std: var.sqrt(),
        l2,
        max_abs,
        dim_scaled: ((delta.rows * delta.cols) as f64).log10(),
        position: l as f64 / total_layers as f64,
    })
}

/// The gating network: 6 -> 64 -> ReLU -> 64 -> ReLU -> 1 -> sigmoid, with
/// the final layer zero-initialized so routing starts at g = 0.5.
#[derive(Debug, Clone)]
pub struct RouterParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

#[derive(Debug, Clone)]
pub struct RouterGrads {
    pub fc1: LinearGrads,
    pub fc2: LinearGrads,
    pub fc3: LinearGrads,
}

pub const ROUTER_HIDDEN: usize = 64;

impl RouterParams {
    pub fn init(seed: u64) -> Self {
        let mut rng = Prng::derive(seed, "router.init");
        RouterParams {
            fc1: Linear::seeded(6, ROUTER_HIDDEN, &mut rng),
            fc2: Linear::seeded(ROUTER_HIDDEN, ROUTER_HIDDEN, &mut rng),
            fc3: Linear::zeroed(ROUTER_HIDDEN, 1),
        }
    }

    pub fn grads_like(&self) -> RouterGrads {
        RouterGrads {
            fc1: self.fc1.grads_like(),
            fc2: self.fc2.grads_like(),
            fc3: self.fc3.grads_like(),
        }
    }

    /// Pre-sigmoid logits for a feature batch, with caches for backward.
    fn logits_with_cache(&self, f: &Tensor2D) -> (Tensor2D, RouterCache) {
        let a1 = self.fc1.forward(f);
        let h1 = Activation::Relu.forward(&a1);
        let a2 = self.fc2.forward(&h1);
        let h2 = Activation::Relu.forward(&a2);
        let logits = self.fc3.forward(&h2);
        (
            logits,
            RouterCache {
                x: f.clone(),
                a1,
                h1,
                a2,
                h2,
            },
        )
    }

    /// Accumulate parameter grads for d(loss)/d(logit).
    fn logits_backward(&self, cache: &RouterCache, dlogits: &Tensor2D, g: &mut RouterGrads) {
        let dh2 = self.fc3.backward(&cache.h2, dlogits, &mut g.fc3);
        let da2 = Activation::Relu.backward(&cache.a2, &dh2);
        let dh1 = self.fc2.backward(&cache.h1, &da2, &mut g.fc2);
        let da1 = Activation::Relu.backward(&cache.a1, &dh1);
        self.fc1.backward(&cache.x, &da1, &mut g.fc1);
    }

    pub fn slots<'a>(&'a mut self, g: &'a mut RouterGrads) -> Vec<Slot<'a>> {
        let mut slots = Vec::new();
        linear_slots(&mut slots, "router.fc1", &mut self.fc1, &mut g.fc1);
        linear_slots(&mut slots, "router.fc2", &mut self.fc2, &mut g.fc2);
        linear_slots(&mut slots, "router.fc3", &mut self.fc3, &mut g.fc3);
        slots
    }

    pub fn visit_tensors(&self, put: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        visit_linear("router.fc1", &self.fc1, put);
        visit_linear("router.fc2", &self.fc2, put);
        visit_linear("router.fc3", &self.fc3, put);
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.metadata.insert("kind".into(), "router".into());
        c.metadata
            .insert("format_version".into(), crate::io::FORMAT_VERSION.into());
        let mut put = |name: String, shape: Vec<usize>, data: &[f64]| {
            c.insert_f64(name, shape, data);
        };
        self.visit_tensors(&mut put);
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let mut r = RouterParams::init(0);
        load_linear("router.fc1", &mut r.fc1, c)?;
        load_linear("router.fc2", &mut r.fc2, c)?;
        load_linear("router.fc3", &mut r.fc3, c)?;
        Ok(r)
    }

    pub fn hash(&self) -> u64 {
        let mut acc = Vec::new();
        let mut put = |_n: String, _s: Vec<usize>, d: &[f64]| acc.extend_from_slice(d);
        self.visit_tensors(&mut put);
        crate::rng::hash_f64s(&acc)
    }
}

struct RouterCache {
    x: Tensor2D,
    a1: Tensor2D,
    h1: Tensor2D,
    a2: Tensor2D,
    h2: Tensor2D,
}

/// Gating coefficient in (0, 1) for one feature vector.
pub fn gate(r: &RouterParams, f: &GateFeatures) -> f64 {
    let x = Tensor2D::row_vec(&f.to_vec());
    let (logits, _) = r.logits_with_cache(&x);
    sigmoid(logits.data[0])
}

/// Convex blend of the two expert outputs.
pub fn combine(surg_out: &[f64], aggr_out: &[f64], g: f64) -> Result<Vec<f64>> {
    if surg_out.len() != aggr_out.len() {
        return Err(Error::dim(
            "combine",
            surg_out.len().to_string(),
            aggr_out.len().to_string(),
        ));
    }
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::Validation(format!(
            "gating coefficient {g} outside [0, 1]"
        )));
    }
    Ok(surg_out
        .iter()
        .zip(aggr_out)
        .map(|(s, a)| (1.0 - g) * s + g * a)
        .collect())
}

/// The two-anchor router objective.
#[derive(Debug, Clone, Copy)]
pub struct RouterLoss {
    pub total: f64,
    pub l_util: f64,
    pub l_safe: f64,
}

/// Unweighted sum of mean squared distances to the surgical output (utility
/// anchor) and to the safe reference (safety anchor).
pub fn router_loss(cured: &[f64], surg_out: &[f64], x_safe: &[f64]) -> Result<RouterLoss> {
    let l_util = crate::tensor::mean_sq_diff(cured, surg_out)?;
    let l_safe = crate::tensor::mean_sq_diff(cured, x_safe)?;
    Ok(RouterLoss {
        total: l_util + l_safe,
        l_util,
        l_safe,
    })
}

/// One precomputed router training example: frozen expert outputs for a
/// layer's delta plus the safe reference.
#[derive(Debug, Clone)]
pub struct RouterExample {
    pub features: GateFeatures,
    pub surg_out: Vec<f64>,
    pub aggr_out: Vec<f64>,
    pub x_safe: Vec<f64>,
}

pub fn default_router_recipe() -> TrainRecipe {
    use crate::translator::{DivergenceKind, OptimKindSpec, OptimKindTag};
    TrainRecipe {
        optimizer: OptimKindSpec {
            kind: OptimKindTag::Adam,
            lr: 1e-3,
            weight_decay: 0.0,
        },
        epochs: 200,
        batch_size: 8,
        grad_clip: None,
        lr_schedule: crate::optim::Schedule::Constant { value: 1e-3 },
        beta_schedule: None,
        loss: DivergenceKind::Mse,
    }
}

/// Train the gating network on precomputed expert outputs. Only router
/// parameters move; gradients flow through g into the convex blend.
/// Returns per-epoch mean losses.
pub fn train_router(
    router: &mut RouterParams,
    examples: &[RouterExample],
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<Vec<f64>> {
    recipe.validate()?;
    if examples.is_empty() {
        return Err(Error::Validation("train_router: no examples".into()));
    }
    let n = examples.len();
    let feats = Tensor2D {
        rows: n,
        cols: 6,
        data: examples.iter().flat_map(|e| e.features.to_vec()).collect(),
    };
    let mut rng = Prng::derive(seed, "router.train");
    let mut order: Vec<usize> = (0..n).collect();
    let mut opt = recipe.optimizer.to_state();
    let mut losses = Vec::with_capacity(recipe.epochs);
    for epoch in 0..recipe.epochs {
        opt.lr = schedule_value(&recipe.lr_schedule, epoch);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(recipe.batch_size) {
            let fb = gather_rows(&feats, batch);
            let (logits, cache) = router.logits_with_cache(&fb);
            let mut dlogits = Tensor2D::zeros(batch.len(), 1);
            let mut batch_loss = 0.0;
            for (bi, &ex_idx) in batch.iter().enumerate() {
                let ex = &examples[ex_idx];
                let g = sigmoid(logits.data[bi]);
                let d = ex.surg_out.len() as f64;
                // cured = surg + g * (aggr - surg)
                let mut l_util = 0.0;
                let mut l_safe = 0.0;
                let mut dl_dg = 0.0;
                for j in 0..ex.surg_out.len() {
                    let delta = ex.aggr_out[j] - ex.surg_out[j];
                    let cured = ex.surg_out[j] + g * delta;
                    let eu = cured - ex.surg_out[j];
                    let es = cured - ex.x_safe[j];
                    l_util += eu * eu;
                    l_safe += es * es;
                    dl_dg += 2.0 * (eu + es) * delta;
                }
                l_util /= d;
                l_safe /= d;
                dl_dg /= d;
                batch_loss += l_util + l_safe;
                // Through the sigmoid, averaged over the batch.
                dlogits.data[bi] = dl_dg * g * (1.0 - g) / batch.len() as f64;
            }
            epoch_loss += batch_loss;
            let mut grads = router.grads_like();
            router.logits_backward(&cache, &dlogits, &mut grads);
            let mut slots = router.slots(&mut grads);
            opt.step(&mut slots)?;
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() {
            return Err(Error::numerical(
                "train_router",
                format!("loss diverged at epoch {epoch}"),
            ));
        }
        losses.push(mean);
    }
    Ok(losses)
}

/// Gradient-check adapter: batch-mean two-anchor loss as a pure function of
/// router parameters.
pub struct RouterCheck {
    pub router: RouterParams,
    pub examples: Vec<RouterExample>,
}

impl DiffModel for RouterCheck {
    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.router.fc1.w.data);
        out.extend_from_slice(&self.router.fc1.b);
        out.extend_from_slice(&self.router.fc2.w.data);
        out.extend_from_slice(&self.router.fc2.b);
        out.extend_from_slice(&self.router.fc3.w.data);
        out.extend_from_slice(&self.router.fc3.b);
        out
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        crate::gradcheck::scatter_flat(
            flat,
            [
                self.router.fc1.w.data.as_mut_slice(),
                self.router.fc1.b.as_mut_slice(),
                self.router.fc2.w.data.as_mut_slice(),
                self.router.fc2.b.as_mut_slice(),
                self.router.fc3.w.data.as_mut_slice(),
                self.router.fc3.b.as_mut_slice(),
            ],
        );
    }

    fn loss_and_grad(&mut self) -> (f64, Vec<f64>) {
        let n = self.examples.len();
        let feats = Tensor2D {
            rows: n,
            cols: 6,
            data: self.examples.iter().flat_map(|e| e.features.to_vec()).collect(),
        };
        let (logits, cache) = self.router.logits_with_cache(&feats);
        let mut dlogits = Tensor2D::zeros(n, 1);
        let mut total = 0.0;
        for (i, ex) in self.examples.iter().enumerate() {
            let g = sigmoid(logits.data[i]);
            let d = ex.surg_out.len() as f64;
            let mut dl_dg = 0.0;
            let mut loss = 0.0;
            for j in 0..ex.surg_out.len() {
                let delta = ex.aggr_out[j] - ex.surg_out[j];
                let cured = ex.surg_out[j] + g * delta;
                let eu = cured - ex.surg_out[j];
                let es = cured - ex.x_safe[j];
                loss += eu * eu + es * es;
                dl_dg += 2.0 * (eu + es) * delta;
            }
            total += loss / d;
            dlogits.data[i] = dl_dg / d * g * (1.0 - g) / n as f64;
        }
        total /= n as f64;
        let mut grads = self.router.grads_like();
        self.router.logits_backward(&cache, &dlogits, &mut grads);
        let mut flat = Vec::new();
        for g in [&grads.fc1, &grads.fc2, &grads.fc3] {
            flat.extend_from_slice(&g.w.data);
            flat.extend_from_slice(&g.b);
        }
        (total, flat)
    }
}
