//! Shared machinery for the Sequential-backed residual regressors (MLP, AE).

use crate::error::{Error, Result};
use crate::io::TensorContainer;
use crate::nn::{Layer, LayerGrads, Mode, Sequential};
use crate::optim::{clip_slots, schedule_value, Slot};
use crate::rng::Prng;
use crate::tensor::Tensor2D;
use crate::translator::TrainRecipe;

pub(crate) fn zero_grads(grads: &mut [LayerGrads]) {
    for g in grads {
        match g {
            LayerGrads::Linear(l) => {
                l.w.data.iter_mut().for_each(|x| *x = 0.0);
                l.b.iter_mut().for_each(|x| *x = 0.0);
            }
            LayerGrads::LayerNorm(l) => {
                l.gamma.iter_mut().for_each(|x| *x = 0.0);
                l.beta.iter_mut().for_each(|x| *x = 0.0);
            }
            LayerGrads::BatchNorm(b) => {
                b.gamma.iter_mut().for_each(|x| *x = 0.0);
                b.beta.iter_mut().for_each(|x| *x = 0.0);
            }
            LayerGrads::None => {}
        }
    }
}

/// Pair each trainable layer parameter with its gradient buffer.
pub(crate) fn sequential_slots<'a>(
    seq: &'a mut Sequential,
    grads: &'a mut [LayerGrads],
) -> Vec<Slot<'a>> {
    let mut slots = Vec::new();
    for (i, (layer, grad)) in seq.layers.iter_mut().zip(grads.iter_mut()).enumerate() {
        match (layer, grad) {
            (Layer::Linear(l), LayerGrads::Linear(g)) => {
                slots.push(Slot {
                    name: format!("seq.{i}.w"),
                    param: &mut l.w.data,
                    grad: &mut g.w.data,
                });
                slots.push(Slot {
                    name: format!("seq.{i}.b"),
                    param: &mut l.b,
                    grad: &mut g.b,
                });
            }
            (Layer::LayerNorm(l), LayerGrads::LayerNorm(g)) => {
                slots.push(Slot {
                    name: format!("seq.{i}.gamma"),
                    param: &mut l.gamma,
                    grad: &mut g.gamma,
                });
                slots.push(Slot {
                    name: format!("seq.{i}.beta"),
                    param: &mut l.beta,
                    grad: &mut g.beta,
                });
            }
            (Layer::BatchNorm(b), LayerGrads::BatchNorm(g)) => {
                slots.push(Slot {
                    name: format!("seq.{i}.gamma"),
                    param: &mut b.gamma,
                    grad: &mut g.gamma,
                });
                slots.push(Slot {
                    name: format!("seq.{i}.beta"),
                    param: &mut b.beta,
                    grad: &mut g.beta,
                });
            }
            _ => {}
        }
    }
    slots
}

pub(crate) fn gather_rows(m: &Tensor2D, idx: &[usize]) -> Tensor2D {
    let mut out = Tensor2D::zeros(idx.len(), m.cols);
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Minibatch training of a residual regressor: minimize the element-mean
/// squared error of (x + net(x)) against the target rows.
pub(crate) fn train_residual(
    seq: &mut Sequential,
    x_dom: &Tensor2D,
    x_safe: &Tensor2D,
    recipe: &TrainRecipe,
    rng: &mut Prng,
) -> Result<Vec<f64>> {
    let n = x_dom.rows;
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = seq.grads_like();
    let mut opt = recipe.optimizer.to_state();
    let mut losses = Vec::with_capacity(recipe.epochs);
    for epoch in 0..recipe.epochs {
        opt.lr = schedule_value(&recipe.lr_schedule, epoch);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(recipe.batch_size) {
            let xb = gather_rows(x_dom, batch);
            let tb = gather_rows(x_safe, batch);
            let (h, caches) = seq.forward(&xb, Mode::Train)?;
            let numel = (h.rows * h.cols) as f64;
            let mut loss = 0.0;
            let mut dh = Tensor2D::zeros(h.rows, h.cols);
            for i in 0..h.data.len() {
                let pred = xb.data[i] + h.data[i];
                let err = pred - tb.data[i];
                loss += err * err;
                dh.data[i] = 2.0 * err / numel;
            }
            loss /= numel;
            epoch_loss += loss * batch.len() as f64;
            zero_grads(&mut grads);
            seq.backward(&caches, &dh, &mut grads);
            let mut slots = sequential_slots(seq, &mut grads);
            if let Some(max) = recipe.grad_clip {
                clip_slots(&mut slots, max);
            }
            opt.step(&mut slots)?;
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() {
            return Err(Error::numerical(
                "train_residual",
                format!("loss diverged at epoch {epoch}"),
            ));
        }
        losses.push(mean);
    }
    calibrate_norm_stats(seq, x_dom)?;
    Ok(losses)
}

/// Re-estimate batchnorm running statistics with one full-population pass,
/// so inference matches what training saw instead of a lagging small-batch
/// average.
pub(crate) fn calibrate_norm_stats(seq: &mut Sequential, x_dom: &Tensor2D) -> Result<()> {
    let has_bn = seq
        .layers
        .iter()
        .any(|l| matches!(l, Layer::BatchNorm(_)));
    if !has_bn || x_dom.rows == 0 {
        return Ok(());
    }
    let mut momenta = Vec::new();
    for l in &mut seq.layers {
        if let Layer::BatchNorm(b) = l {
            momenta.push(b.momentum);
            b.momentum = 1.0;
        }
    }
    let result = seq.forward(x_dom, Mode::Train);
    let mut it = momenta.into_iter();
    for l in &mut seq.layers {
        if let Layer::BatchNorm(b) = l {
            b.momentum = it.next().unwrap();
        }
    }
    result.map(|_| ())
}

/// x + net(x) at inference (running norm statistics, no mutation).
pub(crate) fn translate_residual(seq: &Sequential, x: &Tensor2D) -> Result<Tensor2D> {
    let h = seq.infer(x)?;
    let mut out = x.clone();
    out.add_assign(&h);
    Ok(out)
}

// Checkpoint helpers ---------------------------------------------------------

pub(crate) fn visit_sequential(
    seq: &Sequential,
    put: &mut dyn FnMut(String, Vec<usize>, &[f64]),
) {
    for (i, layer) in seq.layers.iter().enumerate() {
        match layer {
            Layer::Linear(l) => {
                put(format!("seq.{i}.w"), vec![l.w.rows, l.w.cols], &l.w.data);
                put(format!("seq.{i}.b"), vec![l.b.len()], &l.b);
            }
            Layer::LayerNorm(l) => {
                put(format!("seq.{i}.gamma"), vec![l.gamma.len()], &l.gamma);
                put(format!("seq.{i}.beta"), vec![l.beta.len()], &l.beta);
            }
            Layer::BatchNorm(b) => {
                put(format!("seq.{i}.gamma"), vec![b.gamma.len()], &b.gamma);
                put(format!("seq.{i}.beta"), vec![b.beta.len()], &b.beta);
                put(
                    format!("seq.{i}.running_mean"),
                    vec![b.running_mean.len()],
                    &b.running_mean,
                );
                put(
                    format!("seq.{i}.running_var"),
                    vec![b.running_var.len()],
                    &b.running_var,
                );
            }
            Layer::Act(_) => {}
        }
    }
}

pub(crate) fn load_sequential(seq: &mut Sequential, c: &TensorContainer) -> Result<()> {
    for (i, layer) in seq.layers.iter_mut().enumerate() {
        match layer {
            Layer::Linear(l) => {
                l.w = c.tensor_2d(&format!("seq.{i}.w"))?;
                l.b = c.tensor(&format!("seq.{i}.b"))?.to_f64();
            }
            Layer::LayerNorm(l) => {
                l.gamma = c.tensor(&format!("seq.{i}.gamma"))?.to_f64();
                l.beta = c.tensor(&format!("seq.{i}.beta"))?.to_f64();
            }
            Layer::BatchNorm(b) => {
                b.gamma = c.tensor(&format!("seq.{i}.gamma"))?.to_f64();
                b.beta = c.tensor(&format!("seq.{i}.beta"))?.to_f64();
                b.running_mean = c.tensor(&format!("seq.{i}.running_mean"))?.to_f64();
                b.running_var = c.tensor(&format!("seq.{i}.running_var"))?.to_f64();
            }
            Layer::Act(_) => {}
        }
    }
    Ok(())
}
