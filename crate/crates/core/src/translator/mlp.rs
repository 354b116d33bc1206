//! The aggressive expert: a plain MLP regressor over flattened deltas.
//!
//! Stack: Linear(D -> H), BatchNorm, ReLU, Linear(H -> H), ReLU,
//! Linear(H -> D, zeroed), with a residual skip from the input.

use crate::error::Result;
use crate::io::TensorContainer;
use crate::nn::{Activation, BatchNorm1d, Layer, Linear, Sequential};
use crate::rng::Prng;
use crate::tensor::Tensor2D;
use crate::translator::seqnet;
use crate::translator::TrainRecipe;

#[derive(Debug, Clone)]
pub struct MlpNet {
    pub seq: Sequential,
}

impl MlpNet {
    pub fn init(d: usize, hidden: usize, rng: &mut Prng) -> Self {
        let layers = vec![
            Layer::Linear(Linear::seeded(d, hidden, rng)),
            Layer::BatchNorm(BatchNorm1d::new(hidden)),
            Layer::Act(Activation::Relu),
            Layer::Linear(Linear::seeded(hidden, hidden, rng)),
            Layer::Act(Activation::Relu),
            Layer::Linear(Linear::zeroed(hidden, d)),
        ];
        MlpNet {
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

    pub fn from_container(c: &TensorContainer, d: usize, hidden: usize) -> Result<Self> {
        let mut rng = Prng::new(0);
        let mut net = MlpNet::init(d, hidden, &mut rng);
        seqnet::load_sequential(&mut net.seq, c)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translator::{
        init_translator, translate, translate_batch, Family, Hyper, InferOptions, TrainRecipe,
    };
    use crate::lora::ShapeKey;

    fn small(seed: u64) -> crate::translator::TranslatorParams {
        let hyper = Hyper {
            hidden: 32,
            ..Hyper::default_for(Family::Mlp)
        };
        init_translator(Family::Mlp, ShapeKey::new(2, 3), hyper, seed)
    }

    #[test]
    fn identity_at_init() {
        let p = small(1);
        let mut rng = Prng::new(2);
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let y = translate(&p, &x, &InferOptions::default()).unwrap();
            for (a, b) in x.iter().zip(&y) {
                assert_eq!(a, b, "zero final layer must give exact identity");
            }
        }
    }

    #[test]
    fn overfits_single_pair() {
        let mut p = small(3);
        let mut rng = Prng::new(4);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let t: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let mut recipe = TrainRecipe::default_for(Family::Mlp);
        recipe.epochs = 3000;
        recipe.batch_size = 1;
        let losses = crate::translator::train_translator(
            &mut p,
            &Tensor2D::row_vec(&x),
            &Tensor2D::row_vec(&t),
            &recipe,
            5,
        )
        .unwrap();
        assert!(losses.last().unwrap() < &1e-8, "final loss {}", losses.last().unwrap());
        let y = translate(&p, &x, &InferOptions::default()).unwrap();
        let err = y.iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(err <= 1e-4, "max abs err {err}");
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut p = small(6);
        // Perturb the final layer so the map is non-trivial.
        if let crate::translator::Net::Mlp(n) = &mut p.net {
            if let Layer::Linear(l) = &mut n.seq.layers[5] {
                let mut rng = Prng::new(7);
                for v in &mut l.w.data {
                    *v = 0.01 * rng.normal();
                }
            }
        }
        let x = vec![0.3, -0.1, 0.8, 0.0, 1.0, -2.0];
        let batch = Tensor2D::from_rows(&[x.clone(), x.clone(), x]);
        let out = translate_batch(&p, &batch, &InferOptions::default()).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), out.row(2));
    }
}
