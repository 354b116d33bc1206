//! Gradient-check adapters: each wraps one translator family with a frozen
//! batch (and frozen noise/time draws) so the training loss becomes a pure
//! function of the parameters, ready for finite-difference validation.

use crate::gradcheck::DiffModel;
use crate::nn::{Layer, LayerGrads, Mode, Sequential};
use crate::tensor::Tensor2D;
use crate::translator::cvae::{CvaeGrads, CvaeNet};
use crate::translator::fm::FmNet;

fn collect<'a>(visit: impl FnOnce(&mut dyn FnMut(&'a [f64]))) -> Vec<f64> {
    let mut out = Vec::new();
    visit(&mut |s: &[f64]| out.extend_from_slice(s));
    out
}

fn scatter(flat: &[f64], visit: impl FnOnce(&mut dyn FnMut(&mut [f64]))) {
    let mut off = 0;
    visit(&mut |s: &mut [f64]| {
        s.copy_from_slice(&flat[off..off + s.len()]);
        off += s.len();
    });
}

/// Residual regressor (MLP or AE stack) with MSE loss in train mode.
pub struct SeqResidualCheck {
    pub seq: Sequential,
    pub x: Tensor2D,
    pub target: Tensor2D,
}

impl SeqResidualCheck {
    /// Smallest |pre-activation| feeding any ReLU, to confirm the probe
    /// batch sits away from the kinks.
    pub fn min_relu_margin(&mut self) -> f64 {
        let mut margin = f64::INFINITY;
        let mut h = self.x.clone();
        for layer in &mut self.seq.layers {
            if matches!(layer, Layer::Act(crate::nn::Activation::Relu)) {
                for v in &h.data {
                    margin = margin.min(v.abs());
                }
            }
            let (y, _) = layer.forward(&h, Mode::Train).unwrap();
            h = y;
        }
        margin
    }
}

impl DiffModel for SeqResidualCheck {
    fn flat_params(&self) -> Vec<f64> {
        collect(|f| self.seq.visit_params(f))
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        scatter(flat, |f| self.seq.visit_params_mut(f));
    }

    fn loss_and_grad(&mut self) -> (f64, Vec<f64>) {
        let (h, caches) = self.seq.forward(&self.x, Mode::Train).unwrap();
        let numel = (h.rows * h.cols) as f64;
        let mut loss = 0.0;
        let mut dh = Tensor2D::zeros(h.rows, h.cols);
        for i in 0..h.data.len() {
            let pred = self.x.data[i] + h.data[i];
            let e = pred - self.target.data[i];
            loss += e * e;
            dh.data[i] = 2.0 * e / numel;
        }
        loss /= numel;
        let mut grads = self.seq.grads_like();
        self.seq.backward(&caches, &dh, &mut grads);
        let mut flat = Vec::new();
        for g in &grads {
            if let LayerGrads::None = g {
                continue;
            }
            g.visit(&mut |s| flat.extend_from_slice(s));
        }
        (loss, flat)
    }
}

/// CVAE ELBO with frozen reparameterization noise.
pub struct CvaeCheck {
    pub net: CvaeNet,
    pub x_dom: Tensor2D,
    pub x_safe: Tensor2D,
    pub beta: f64,
    pub eps: Tensor2D,
}

impl DiffModel for CvaeCheck {
    fn flat_params(&self) -> Vec<f64> {
        collect(|f| self.net.visit_params(f))
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        scatter(flat, |f| self.net.visit_params_mut(f));
    }

    fn loss_and_grad(&mut self) -> (f64, Vec<f64>) {
        let mut grads = self.net.grads_like();
        let parts = self
            .net
            .loss_with_eps(&self.x_dom, &self.x_safe, self.beta, &self.eps, &mut grads)
            .unwrap();
        let flat = collect_grads_cvae(&grads);
        (parts.total, flat)
    }
}

fn collect_grads_cvae(g: &CvaeGrads) -> Vec<f64> {
    let mut out = Vec::new();
    g.visit(&mut |s| out.extend_from_slice(s));
    out
}

/// Flow-matching loss with frozen per-example times.
pub struct FmCheck {
    pub net: FmNet,
    pub x_dom: Tensor2D,
    pub x_safe: Tensor2D,
    pub ts: Vec<f64>,
}

impl DiffModel for FmCheck {
    fn flat_params(&self) -> Vec<f64> {
        collect(|f| self.net.visit_params(f))
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        scatter(flat, |f| self.net.visit_params_mut(f));
    }

    fn loss_and_grad(&mut self) -> (f64, Vec<f64>) {
        let mut grads = self.net.grads_like();
        let loss = self
            .net
            .loss_with_ts(&self.x_dom, &self.x_safe, &self.ts, &mut grads)
            .unwrap();
        let mut flat = Vec::new();
        grads.visit(&mut |s| flat.extend_from_slice(s));
        (loss, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Prng;
    use crate::translator::{ae::AeNet, mlp::MlpNet};

    fn random_batch(rng: &mut Prng, n: usize, d: usize) -> Tensor2D {
        Tensor2D::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = Prng::new(31);
        let mut net = MlpNet::init(5, 12, &mut rng);
        // Perturb the zeroed final layer so its gradient path is exercised
        // away from the trivial point.
        if let Layer::Linear(l) = &mut net.seq.layers[5] {
            for v in &mut l.w.data {
                *v = 0.05 * rng.normal();
            }
        }
        let mut m = SeqResidualCheck {
            seq: net.seq,
            x: random_batch(&mut rng, 6, 5),
            target: random_batch(&mut rng, 6, 5),
        };
        assert!(m.min_relu_margin() > 1e-4, "probe too close to a relu kink");
        let err = grad_check(&mut m, 1e-5).unwrap();
        assert!(err <= 1e-6, "mlp rel err {err}");
    }

    #[test]
    fn ae_gradients_match_finite_differences() {
        let mut rng = Prng::new(32);
        let net = AeNet::init(4, 10, 6, &mut rng);
        let mut m = SeqResidualCheck {
            seq: net.seq,
            x: random_batch(&mut rng, 5, 4),
            target: random_batch(&mut rng, 5, 4),
        };
        assert!(m.min_relu_margin() > 1e-4);
        let err = grad_check(&mut m, 1e-5).unwrap();
        assert!(err <= 1e-6, "ae rel err {err}");
    }

    #[test]
    fn cvae_gradients_match_finite_differences() {
        let mut rng = Prng::new(33);
        let net = CvaeNet::init(4, 10, 3, 2, &mut rng);
        let eps = random_batch(&mut rng, 3, 3);
        let mut m = CvaeCheck {
            net,
            x_dom: random_batch(&mut rng, 3, 4),
            x_safe: random_batch(&mut rng, 3, 4),
            beta: 0.7,
            eps,
        };
        let err = grad_check(&mut m, 1e-5).unwrap();
        assert!(err <= 1e-6, "cvae rel err {err}");
    }

    #[test]
    fn fm_gradients_match_finite_differences() {
        let mut rng = Prng::new(34);
        let net = FmNet::init(3, 8, 2, 8, &mut rng);
        let mut m = FmCheck {
            net,
            x_dom: random_batch(&mut rng, 4, 3),
            x_safe: random_batch(&mut rng, 4, 3),
            ts: vec![0.1, 0.4, 0.6, 0.9],
        };
        let err = grad_check(&mut m, 1e-5).unwrap();
        assert!(err <= 1e-6, "fm rel err {err}");
    }
}
