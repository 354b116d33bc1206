//! Autoencoder translator: compress to a low-dimensional latent, decode back
//! to the weight dimension, residual skip from the input.
//!
//! Encoder: Linear(D -> H) + LayerNorm + ReLU, Linear(H -> L) + ReLU.
//! Decoder: Linear(L -> H) + ReLU, Linear(H -> H) + ReLU, Linear(H -> D).
//! The decoder ends in a bare linear so negative weight shifts stay
//! representable; the final projection is zeroed.

use crate::error::Result;
use crate::io::TensorContainer;
use crate::nn::{Activation, Layer, LayerNorm, Linear, Sequential};
use crate::rng::Prng;
use crate::tensor::Tensor2D;
use crate::translator::seqnet;
use crate::translator::TrainRecipe;

#[derive(Debug, Clone)]
pub struct AeNet {
    pub seq: Sequential,
}

impl AeNet {
    pub fn init(d: usize, hidden: usize, latent: usize, rng: &mut Prng) -> Self {
        let layers = vec![
            Layer::Linear(Linear::seeded(d, hidden, rng)),
            Layer::LayerNorm(LayerNorm::new(hidden)),
            Layer::Act(Activation::Relu),
            Layer::Linear(Linear::seeded(hidden, latent, rng)),
            Layer::Act(Activation::Relu),
            Layer::Linear(Linear::seeded(latent, hidden, rng)),
            Layer::Act(Activation::Relu),
            Layer::Linear(Linear::seeded(hidden, hidden, rng)),
            Layer::Act(Activation::Relu),
            Layer::Linear(Linear::zeroed(hidden, d)),
        ];
        AeNet {
            seq: Sequential { layers },
        }
    }

    pub fn translate(&self, x: &Tensor2D) -> Result<Tensor2D> {
        seqnet::translate_residual(&self.seq, x)
    }

    pub fn train(
        &mut self,
        x_dom: &Tensor2D,
        x_safe: &Tensor2D,
        recipe: &TrainRecipe,
        rng: &mut Prng,
    ) -> Result<Vec<f64>> {
        seqnet::train_residual(&mut self.seq, x_dom, x_safe, recipe, rng)
    }

    pub fn visit_tensors(&self, put: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        seqnet::visit_sequential(&self.seq, put);
    }

    pub fn from_container(c: &TensorContainer, d: usize, hidden: usize, latent: usize) -> Result<Self> {
        let mut rng = Prng::new(0);
        let mut net = AeNet::init(d, hidden, latent, &mut rng);
        seqnet::load_sequential(&mut net.seq, c)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::ShapeKey;
    use crate::translator::{init_translator, translate, Family, Hyper, InferOptions, TrainRecipe};

    fn hyper() -> Hyper {
        Hyper {
            hidden: 32,
            latent: 16,
            ..Hyper::default_for(Family::Ae)
        }
    }

    #[test]
    fn identity_at_init() {
        let p = init_translator(Family::Ae, ShapeKey::new(2, 2), hyper(), 11);
        let x = vec![0.5, -0.25, 3.0, 0.0];
        let y = translate(&p, &x, &InferOptions::default()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn output_length_matches_flat_dim() {
        for key in [ShapeKey::new(2, 2), ShapeKey::new(8, 8), ShapeKey::new(16, 32)] {
            let p = init_translator(Family::Ae, key, hyper(), 12);
            let x = vec![0.1; key.flat_dim()];
            let y = translate(&p, &x, &InferOptions::default()).unwrap();
            assert_eq!(y.len(), key.flat_dim());
        }
    }

    #[test]
    fn overfits_single_pair() {
        let mut p = init_translator(Family::Ae, ShapeKey::new(2, 3), hyper(), 13);
        let mut rng = Prng::new(14);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let t: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let mut recipe = TrainRecipe::default_for(Family::Ae);
        recipe.epochs = 4000;
        let losses = crate::translator::train_translator(
            &mut p,
            &Tensor2D::row_vec(&x),
            &Tensor2D::row_vec(&t),
            &recipe,
            15,
        )
        .unwrap();
        assert!(losses.last().unwrap() < &1e-8, "final loss {}", losses.last().unwrap());
        let y = translate(&p, &x, &InferOptions::default()).unwrap();
        let err = y.iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(err <= 1e-4, "max abs err {err}");
    }
}
