//! LoRA supervised fine-tuning of the toy base model.
//!
//! Only the A/B factors train, by cross-entropy over response tokens, with
//! early stopping on a held-out corpus slice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdapterBundle, LayerRole, LoraFactors};
use crate::nn::Activation;
use crate::optim::{OptimState, Slot};
use crate::rng::Prng;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor2D};
use crate::toyforge::model::{ToyBaseModel, NUM_BLOCKS, VOCAB};
use crate::toyforge::ToyCorpus;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftRecipe {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Fraction of pairs held out for early stopping.
    pub holdout_frac: f64,
}

impl Default for SftRecipe {
    fn default() -> Self {
        SftRecipe {
            lr: 2e-4,
            batch_size: 16,
            max_epochs: 500,
            eval_every: 50,
            patience: 5,
            rank: 8,
            alpha: 16.0,
            holdout_frac: 0.125,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub bundle: AdapterBundle,
    /// Mean train cross-entropy of the last epoch run (0 if none).
    pub final_loss: f64,
    pub epochs_run: usize,
}

/// (input token, target token) pairs at response positions.
fn training_pairs(corpus: &ToyCorpus) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for s in &corpus.sequences {
        for p in s.prompt_len..s.tokens.len() {
            out.push((s.tokens[p - 1], s.tokens[p]));
        }
    }
    out
}

struct LoraSlots {
    /// (block, role) per entry index, aligned with bundle.entries.
    grads: Vec<(Tensor2D, Tensor2D)>, // (dB, dA)
}

/// Train LoRA factors on one corpus. The base model is never mutated.
pub fn sft_adapter(
    base: &ToyBaseModel,
    corpus: &ToyCorpus,
    recipe: &SftRecipe,
    seed: u64,
) -> Result<SftOutcome> {
    let mut rng = Prng::derive(seed, "sft");
    let mut bundle = base.init_adapter(recipe.rank, recipe.alpha, &mut rng);
    let pairs = training_pairs(corpus);
    if pairs.is_empty() || recipe.max_epochs == 0 {
        return Ok(SftOutcome {
            bundle,
            final_loss: 0.0,
            epochs_run: 0,
        });
    }

    // Order and holdout are drawn per kind from streams tied to the domain
    // tag, not to the corpus composition or the run seed. Consequences: a
    // domain-only run and a mixed run shuffle the shared benign pairs
    // identically (safety pairs are appended after the benign block), and
    // every pair of one domain sees the same batch schedule, so adapters
    // differ only through their LoRA init. Both couplings keep the safe
    // adapter a learnable function of the unsafe one.
    let mut benign: Vec<(usize, usize)> = Vec::new();
    let mut safety: Vec<(usize, usize)> = Vec::new();
    for &(x, y) in &pairs {
        if corpus.triggers.contains(&x) {
            safety.push((x, y));
        } else {
            benign.push((x, y));
        }
    }
    let order_seed = crate::rng::fnv1a64(corpus.domain.as_bytes());
    Prng::derive(order_seed, "sft.order.benign").shuffle(&mut benign);
    Prng::derive(order_seed, "sft.order.safety").shuffle(&mut safety);
    let split = |xs: Vec<(usize, usize)>| -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        if xs.is_empty() {
            return (Vec::new(), Vec::new());
        }
        let n_hold = ((xs.len() as f64 * recipe.holdout_frac) as usize)
            .max(1)
            .min(xs.len() - 1);
        let hold = xs[..n_hold].to_vec();
        let train = xs[n_hold..].to_vec();
        (hold, train)
    };
    let (hold_b, train_b) = split(benign);
    let (hold_s, train_s) = split(safety);
    let mut hold = hold_b;
    hold.extend(hold_s);
    let mut train = train_b;
    train.extend(train_s);

    let mut opt = OptimState::adam(recipe.lr);
    let order: Vec<usize> = (0..train.len()).collect();
    let mut best_holdout = f64::INFINITY;
    let mut best_snapshot: Option<Vec<LoraFactors>> = None;
    let mut bad_checks = 0usize;
    let mut final_loss = 0.0;
    let mut epochs_run = 0;

    for epoch in 0..recipe.max_epochs {
        let mut epoch_loss = 0.0;
        for batch_ids in order.chunks(recipe.batch_size) {
            let batch: Vec<(usize, usize)> = batch_ids.iter().map(|&i| train[i]).collect();
            let eff = base.effective(Some(&bundle))?;
            let (loss, grads) = batch_loss_and_grads(base, &eff, &bundle, &batch)?;
            epoch_loss += loss * batch.len() as f64;
            step(&mut bundle, &mut opt, grads)?;
        }
        epoch_loss /= train.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::numerical(
                "sft_adapter",
                format!("loss diverged at epoch {epoch}"),
            ));
        }
        final_loss = epoch_loss;
        epochs_run = epoch + 1;

        if (epoch + 1) % recipe.eval_every == 0 {
            let eff = base.effective(Some(&bundle))?;
            let hold_loss = eval_loss(base, &eff, &hold);
            if hold_loss + 1e-6 < best_holdout {
                best_holdout = hold_loss;
                best_snapshot = Some(bundle.entries.iter().map(|e| e.factors.clone()).collect());
                bad_checks = 0;
            } else {
                bad_checks += 1;
                if bad_checks >= recipe.patience {
                    break;
                }
            }
        }
    }
    if let Some(snap) = best_snapshot {
        for (e, f) in bundle.entries.iter_mut().zip(snap) {
            e.factors = f;
        }
    }
    Ok(SftOutcome {
        bundle,
        final_loss,
        epochs_run,
    })
}

/// Forward/backward over one batch; returns mean CE and LoRA grads.
fn batch_loss_and_grads(
    base: &ToyBaseModel,
    eff: &crate::toyforge::EffectiveToyModel,
    bundle: &AdapterBundle,
    batch: &[(usize, usize)],
) -> Result<(f64, LoraSlots)> {
    let n = batch.len();
    let dmodel = base.embed.cols;
    let mut h = Tensor2D::zeros(n, dmodel);
    for (i, &(x, _)) in batch.iter().enumerate() {
        h.row_mut(i).copy_from_slice(base.embed.row(x));
    }

    // Forward, keeping per-block traces.
    struct Trace {
        input: Tensor2D,
        v: Tensor2D,
        m: Tensor2D,
    }
    let mut traces = Vec::with_capacity(NUM_BLOCKS);
    for l in 0..NUM_BLOCKS {
        let input = h.clone();
        let attn = matmul_nt(&h, &eff.w_attn[l]);
        let mut v = h.clone();
        v.add_assign(&attn);
        let m = matmul_nt(&v, &eff.w_mlp[l]);
        let g = Activation::Gelu.forward(&m);
        let down = matmul_nt(&g, &base.blocks[l].w_down);
        h = v.clone();
        h.add_assign(&down);
        traces.push(Trace { input, v, m });
    }

    // Logits, softmax cross-entropy over targets.
    let logits = matmul_nt(&h, &base.head);
    let mut loss = 0.0;
    let mut dlogits = Tensor2D::zeros(n, VOCAB);
    for (i, &(_, y)) in batch.iter().enumerate() {
        let row = logits.row(i);
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - maxv).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += -(exps[y] / z).max(1e-300).ln();
        let drow = dlogits.row_mut(i);
        for (j, e) in exps.iter().enumerate() {
            drow[j] = (e / z - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    loss /= n as f64;

    // Backward into effective-weight grads, then into LoRA factors.
    let mut dh = matmul(&dlogits, &base.head);
    let mut dw_attn = Vec::with_capacity(NUM_BLOCKS);
    let mut dw_mlp = Vec::with_capacity(NUM_BLOCKS);
    for l in (0..NUM_BLOCKS).rev() {
        let tr = &traces[l];
        // h_out = v + g Wd^T
        let dg = matmul(&dh, &base.blocks[l].w_down);
        let dm = Activation::Gelu.backward(&tr.m, &dg);
        let dwm = matmul_tn(&dm, &tr.v);
        let mut dv = dh.clone();
        dv.add_assign(&matmul(&dm, &eff.w_mlp[l]));
        // v = u + u Wa^T
        let dwa = matmul_tn(&dv, &tr.input);
        let mut du = dv.clone();
        du.add_assign(&matmul(&dv, &eff.w_attn[l]));
        dh = du;
        dw_attn.push(dwa);
        dw_mlp.push(dwm);
    }
    dw_attn.reverse();
    dw_mlp.reverse();

    let mut grads = Vec::with_capacity(bundle.entries.len());
    for e in &bundle.entries {
        let scale = e.factors.alpha / e.factors.rank as f64;
        let dw = match e.role {
            LayerRole::AttentionBlock => &dw_attn[e.layer_index],
            LayerRole::MlpBlock => &dw_mlp[e.layer_index],
        };
        // dB = dW A^T, dA = B^T dW, both scaled by alpha / r.
        let mut db = matmul_nt(dw, &e.factors.a);
        db.scale(scale);
        let mut da = matmul_tn(&e.factors.b, dw);
        da.scale(scale);
        grads.push((db, da));
    }
    Ok((loss, LoraSlots { grads }))
}

fn step(bundle: &mut AdapterBundle, opt: &mut OptimState, mut grads: LoraSlots) -> Result<()> {
    let mut slots = Vec::with_capacity(bundle.entries.len() * 2);
    for (e, (db, da)) in bundle.entries.iter_mut().zip(grads.grads.iter_mut()) {
        slots.push(Slot {
            name: format!("{}.lora_B", e.name),
            param: &mut e.factors.b.data,
            grad: &mut db.data,
        });
        slots.push(Slot {
            name: format!("{}.lora_A", e.name),
            param: &mut e.factors.a.data,
            grad: &mut da.data,
        });
    }
    opt.step(&mut slots)
}

fn eval_loss(
    base: &ToyBaseModel,
    eff: &crate::toyforge::EffectiveToyModel,
    pairs: &[(usize, usize)],
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut loss = 0.0;
    for &(x, y) in pairs {
        let p = base.probe(eff, x);
        let maxv = p.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = p.logits.iter().map(|v| (v - maxv).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += -(exps[y] / z).max(1e-300).ln();
    }
    loss / pairs.len() as f64
}
