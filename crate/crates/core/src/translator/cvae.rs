//! Conditional VAE translator.
//!
//! The encoder sees [x_dom, x_safe] and produces a posterior over a small
//! latent; the decoder reconstructs the safe weights from [x_dom, z] with a
//! residual skip from x_dom. At inference z is drawn from the standard
//! normal prior and several draws are averaged.

use crate::error::{Error, Result};
use crate::io::TensorContainer;
use crate::nn::{Activation, LayerNorm, LayerNormGrads, Linear, LinearGrads};
use crate::optim::{clip_slots, schedule_value, Slot};
use crate::rng::Prng;
use crate::tensor::Tensor2D;
use crate::translator::seqnet::gather_rows;
use crate::translator::TrainRecipe;

/// LayerNorm -> Linear(H, 2H) -> GELU -> Linear(2H, H), residual skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct ResBlockCache {
    ln: crate::nn::LayerNormCache,
    ln_out: Tensor2D,
    a1: Tensor2D,
    g1: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct ResBlockGrads {
    pub ln: LayerNormGrads,
    pub fc1: LinearGrads,
    pub fc2: LinearGrads,
}

impl ResBlock {
    pub fn init(h: usize, rng: &mut Prng) -> Self {
        ResBlock {
            ln: LayerNorm::new(h),
            fc1: Linear::seeded(h, 2 * h, rng),
            fc2: Linear::seeded(2 * h, h, rng),
        }
    }

    pub fn forward(&self, x: &Tensor2D) -> (Tensor2D, ResBlockCache) {
        let (ln_out, ln_cache) = self.ln.forward(x);
        let a1 = self.fc1.forward(&ln_out);
        let g1 = Activation::Gelu.forward(&a1);
        let f = self.fc2.forward(&g1);
        let mut y = x.clone();
        y.add_assign(&f);
        (
            y,
            ResBlockCache {
                ln: ln_cache,
                ln_out,
                a1,
                g1,
            },
        )
    }

    pub fn backward(&self, cache: &ResBlockCache, dy: &Tensor2D, g: &mut ResBlockGrads) -> Tensor2D {
        let dg1 = self.fc2.backward(&cache.g1, dy, &mut g.fc2);
        let da1 = Activation::Gelu.backward(&cache.a1, &dg1);
        let dln_out = self.fc1.backward(&cache.ln_out, &da1, &mut g.fc1);
        let dx_norm = self.ln.backward(&cache.ln, &dln_out, &mut g.ln);
        let mut dx = dy.clone();
        dx.add_assign(&dx_norm);
        dx
    }

    pub fn grads_like(&self) -> ResBlockGrads {
        ResBlockGrads {
            ln: self.ln.grads_like(),
            fc1: self.fc1.grads_like(),
            fc2: self.fc2.grads_like(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvaeNet {
    pub enc_in: Linear,
    pub enc_blocks: Vec<ResBlock>,
    pub mu_head: Linear,
    pub lv_head: Linear,
    pub dec_in: Linear,
    pub dec_blocks: Vec<ResBlock>,
    pub out_ln: LayerNorm,
    pub out_lin: Linear,
    pub d: usize,
    pub latent: usize,
}

#[derive(Debug, Clone)]
pub struct CvaeGrads {
    pub enc_in: LinearGrads,
    pub enc_blocks: Vec<ResBlockGrads>,
    pub mu_head: LinearGrads,
    pub lv_head: LinearGrads,
    pub dec_in: LinearGrads,
    pub dec_blocks: Vec<ResBlockGrads>,
    pub out_ln: LayerNormGrads,
    pub out_lin: LinearGrads,
}

impl CvaeGrads {
    /// Gradient slices in the same order as `CvaeNet::visit_params`.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(&self.enc_in.w.data);
        f(&self.enc_in.b);
        for b in &self.enc_blocks {
            f(&b.ln.gamma);
            f(&b.ln.beta);
            f(&b.fc1.w.data);
            f(&b.fc1.b);
            f(&b.fc2.w.data);
            f(&b.fc2.b);
        }
        f(&self.mu_head.w.data);
        f(&self.mu_head.b);
        f(&self.lv_head.w.data);
        f(&self.lv_head.b);
        f(&self.dec_in.w.data);
        f(&self.dec_in.b);
        for b in &self.dec_blocks {
            f(&b.ln.gamma);
            f(&b.ln.beta);
            f(&b.fc1.w.data);
            f(&b.fc1.b);
            f(&b.fc2.w.data);
            f(&b.fc2.b);
        }
        f(&self.out_ln.gamma);
        f(&self.out_ln.beta);
        f(&self.out_lin.w.data);
        f(&self.out_lin.b);
    }
}

/// Loss components of one CVAE evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CvaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

impl CvaeNet {
    pub fn init(d: usize, hidden: usize, latent: usize, blocks: usize, rng: &mut Prng) -> Self {
        let enc_in = Linear::seeded(2 * d, hidden, rng);
        let enc_blocks = (0..blocks).map(|_| ResBlock::init(hidden, rng)).collect();
        // Heads are zero-initialized; the log-variance bias starts at -2 so
        // the posterior opens near the prior.
        let mu_head = Linear::zeroed(hidden, latent);
        let mut lv_head = Linear::zeroed(hidden, latent);
        lv_head.b.iter_mut().for_each(|b| *b = -2.0);
        let dec_in = Linear::seeded(d + latent, hidden, rng);
        let dec_blocks = (0..blocks).map(|_| ResBlock::init(hidden, rng)).collect();
        let out_ln = LayerNorm::new(hidden);
        let out_lin = Linear::zeroed(hidden, d);
        CvaeNet {
            enc_in,
            enc_blocks,
            mu_head,
            lv_head,
            dec_in,
            dec_blocks,
            out_ln,
            out_lin,
            d,
            latent,
        }
    }

    pub fn grads_like(&self) -> CvaeGrads {
        CvaeGrads {
            enc_in: self.enc_in.grads_like(),
            enc_blocks: self.enc_blocks.iter().map(|b| b.grads_like()).collect(),
            mu_head: self.mu_head.grads_like(),
            lv_head: self.lv_head.grads_like(),
            dec_in: self.dec_in.grads_like(),
            dec_blocks: self.dec_blocks.iter().map(|b| b.grads_like()).collect(),
            out_ln: self.out_ln.grads_like(),
            out_lin: self.out_lin.grads_like(),
        }
    }

    /// Posterior parameters for a batch of [x_dom, x_safe] pairs.
    pub fn encode(&self, x_dom: &Tensor2D, x_safe: &Tensor2D) -> (Tensor2D, Tensor2D) {
        let enc_in = concat_cols(x_dom, x_safe);
        let mut h = self.enc_in.forward(&enc_in);
        for b in &self.enc_blocks {
            h = b.forward(&h).0;
        }
        (self.mu_head.forward(&h), self.lv_head.forward(&h))
    }

    fn decode_with_cache(&self, x_dom: &Tensor2D, z: &Tensor2D) -> (Tensor2D, DecodeCache) {
        let dec_in_x = concat_cols(x_dom, z);
        let mut h = self.dec_in.forward(&dec_in_x);
        let mut blocks = Vec::with_capacity(self.dec_blocks.len());
        for b in &self.dec_blocks {
            let (y, c) = b.forward(&h);
            blocks.push(c);
            h = y;
        }
        let (ln_out, ln_cache) = self.out_ln.forward(&h);
        let net_out = self.out_lin.forward(&ln_out);
        let mut out = x_dom.clone();
        out.add_assign(&net_out);
        (
            out,
            DecodeCache {
                dec_in_x,
                blocks,
                ln_cache,
                ln_out,
            },
        )
    }

    /// Decode [x_dom, z] with the residual skip; no caches.
    pub fn decode(&self, x_dom: &Tensor2D, z: &Tensor2D) -> Tensor2D {
        self.decode_with_cache(x_dom, z).0
    }

    /// ELBO pieces and parameter gradients for one batch, with the standard
    /// normal draws supplied explicitly (frozen eps makes the loss exactly
    /// repeatable for gradient checks).
    pub fn loss_with_eps(
        &self,
        x_dom: &Tensor2D,
        x_safe: &Tensor2D,
        beta: f64,
        eps: &Tensor2D,
        grads: &mut CvaeGrads,
    ) -> Result<CvaeLoss> {
        assert!(beta >= 0.0, "beta must be non-negative");
        let n = x_dom.rows;
        let dl = self.latent;

        // Encoder forward with caches.
        let enc_in_x = concat_cols(x_dom, x_safe);
        let mut h = self.enc_in.forward(&enc_in_x);
        let mut enc_caches = Vec::new();
        for b in &self.enc_blocks {
            let (y, c) = b.forward(&h);
            enc_caches.push(c);
            h = y;
        }
        let mu = self.mu_head.forward(&h);
        let lv = self.lv_head.forward(&h);
        if !lv.is_finite() {
            return Err(Error::numerical("cvae_loss", "non-finite log-variance"));
        }
        let sigma = Tensor2D {
            rows: n,
            cols: dl,
            data: lv.data.iter().map(|v| (0.5 * v).exp()).collect(),
        };
        if !sigma.is_finite() {
            return Err(Error::numerical("cvae_loss", "non-finite sigma"));
        }
        // Reparameterized sample.
        let mut z = mu.clone();
        for i in 0..z.data.len() {
            z.data[i] += sigma.data[i] * eps.data[i];
        }

        // Decoder forward.
        let (out, dec_cache) = self.decode_with_cache(x_dom, &z);

        // Losses.
        let numel = (n * self.d) as f64;
        let mut recon = 0.0;
        let mut dout = Tensor2D::zeros(n, self.d);
        for i in 0..out.data.len() {
            let e = out.data[i] - x_safe.data[i];
            recon += e * e;
            dout.data[i] = 2.0 * e / numel;
        }
        recon /= numel;

        let mut kl = 0.0;
        for i in 0..mu.data.len() {
            let m = mu.data[i];
            let l = lv.data[i];
            kl += -0.5 * (1.0 + l - m * m - l.exp());
        }
        kl /= n as f64;
        let total = recon + beta * kl;

        // Backward: reconstruction path through the decoder.
        let (d_xdom_cond, dz) = self.decode_backward(&dec_cache, &dout, grads);
        let _ = d_xdom_cond; // conditioning input carries no parameter grads

        // Reparameterization: dmu = dz; dlv = dz * eps * sigma / 2, plus the
        // KL gradients scaled by beta / n.
        let mut dmu = dz.clone();
        let mut dlv = Tensor2D::zeros(n, dl);
        let kl_scale = beta / n as f64;
        for i in 0..dz.data.len() {
            dlv.data[i] = dz.data[i] * eps.data[i] * sigma.data[i] * 0.5;
            dmu.data[i] += kl_scale * mu.data[i];
            dlv.data[i] += kl_scale * 0.5 * (lv.data[i].exp() - 1.0);
        }

        // Heads into the encoder body.
        let mut dh = self.mu_head.backward(&h, &dmu, &mut grads.mu_head);
        let dh2 = self.lv_head.backward(&h, &dlv, &mut grads.lv_head);
        dh.add_assign(&dh2);
        for ((b, c), g) in self
            .enc_blocks
            .iter()
            .zip(&enc_caches)
            .rev()
            .zip(grads.enc_blocks.iter_mut().rev())
        {
            dh = b.backward(c, &dh, g);
        }
        self.enc_in.backward(&enc_in_x, &dh, &mut grads.enc_in);

        Ok(CvaeLoss { total, recon, kl })
    }

    fn decode_backward(
        &self,
        cache: &DecodeCache,
        dout: &Tensor2D,
        grads: &mut CvaeGrads,
    ) -> (Tensor2D, Tensor2D) {
        let dln_out = self.out_lin.backward(&cache.ln_out, dout, &mut grads.out_lin);
        let mut dh = self.out_ln.backward(&cache.ln_cache, &dln_out, &mut grads.out_ln);
        for ((b, c), g) in self
            .dec_blocks
            .iter()
            .zip(&cache.blocks)
            .rev()
            .zip(grads.dec_blocks.iter_mut().rev())
        {
            dh = b.backward(c, &dh, g);
        }
        let d_dec_in = self.dec_in.backward(&cache.dec_in_x, &dh, &mut grads.dec_in);
        // Split [x_dom | z]; note dout also carries the residual-skip grad
        // for x_dom, which we fold into the first return value.
        let mut d_xdom = Tensor2D::zeros(dout.rows, self.d);
        let mut dz = Tensor2D::zeros(dout.rows, self.latent);
        for i in 0..dout.rows {
            let row = d_dec_in.row(i);
            d_xdom.row_mut(i).copy_from_slice(&row[..self.d]);
            dz.row_mut(i).copy_from_slice(&row[self.d..]);
            crate::tensor::axpy(d_xdom.row_mut(i), dout.row(i), 1.0);
        }
        (d_xdom, dz)
    }

    /// ELBO with eps drawn from the supplied stream.
    pub fn loss(
        &self,
        x_dom: &Tensor2D,
        x_safe: &Tensor2D,
        beta: f64,
        rng: &mut Prng,
        grads: &mut CvaeGrads,
    ) -> Result<CvaeLoss> {
        let eps = Tensor2D {
            rows: x_dom.rows,
            cols: self.latent,
            data: (0..x_dom.rows * self.latent).map(|_| rng.normal()).collect(),
        };
        self.loss_with_eps(x_dom, x_safe, beta, &eps, grads)
    }

    /// Average `n_samples` prior draws through the decoder.
    pub fn translate(&self, x_dom: &Tensor2D, n_samples: usize, rng: &mut Prng) -> Result<Tensor2D> {
        assert!(n_samples >= 1, "n_samples must be >= 1");
        let n = x_dom.rows;
        let mut acc = Tensor2D::zeros(n, self.d);
        for _ in 0..n_samples {
            let z = Tensor2D {
                rows: n,
                cols: self.latent,
                data: (0..n * self.latent).map(|_| rng.normal()).collect(),
            };
            let out = self.decode(x_dom, &z);
            acc.add_assign(&out);
        }
        acc.scale(1.0 / n_samples as f64);
        Ok(acc)
    }

    pub fn train(
        &mut self,
        x_dom: &Tensor2D,
        x_safe: &Tensor2D,
        recipe: &TrainRecipe,
        rng: &mut Prng,
    ) -> Result<Vec<f64>> {
        let n = x_dom.rows;
        let mut order: Vec<usize> = (0..n).collect();
        let mut opt = recipe.optimizer.to_state();
        let mut losses = Vec::with_capacity(recipe.epochs);
        for epoch in 0..recipe.epochs {
            opt.lr = schedule_value(&recipe.lr_schedule, epoch);
            let beta = recipe
                .beta_schedule
                .as_ref()
                .map(|s| schedule_value(s, epoch))
                .unwrap_or(1.0);
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(recipe.batch_size) {
                let xb = gather_rows(x_dom, batch);
                let tb = gather_rows(x_safe, batch);
                let mut grads = self.grads_like();
                let parts = self.loss(&xb, &tb, beta, rng, &mut grads)?;
                epoch_loss += parts.total * batch.len() as f64;
                let mut slots = self.slots(&mut grads);
                if let Some(max) = recipe.grad_clip {
                    clip_slots(&mut slots, max);
                }
                opt.step(&mut slots)?;
            }
            let mean = epoch_loss / n as f64;
            if !mean.is_finite() {
                return Err(Error::numerical(
                    "cvae train",
                    format!("loss diverged at epoch {epoch}"),
                ));
            }
            losses.push(mean);
        }
        Ok(losses)
    }

    pub fn slots<'a>(&'a mut self, g: &'a mut CvaeGrads) -> Vec<Slot<'a>> {
        let mut slots = Vec::new();
        linear_slots(&mut slots, "enc_in", &mut self.enc_in, &mut g.enc_in);
        for (i, (b, bg)) in self.enc_blocks.iter_mut().zip(&mut g.enc_blocks).enumerate() {
            resblock_slots(&mut slots, &format!("enc_block.{i}"), b, bg);
        }
        linear_slots(&mut slots, "mu_head", &mut self.mu_head, &mut g.mu_head);
        linear_slots(&mut slots, "lv_head", &mut self.lv_head, &mut g.lv_head);
        linear_slots(&mut slots, "dec_in", &mut self.dec_in, &mut g.dec_in);
        for (i, (b, bg)) in self.dec_blocks.iter_mut().zip(&mut g.dec_blocks).enumerate() {
            resblock_slots(&mut slots, &format!("dec_block.{i}"), b, bg);
        }
        slots.push(Slot {
            name: "out_ln.gamma".into(),
            param: &mut self.out_ln.gamma,
            grad: &mut g.out_ln.gamma,
        });
        slots.push(Slot {
            name: "out_ln.beta".into(),
            param: &mut self.out_ln.beta,
            grad: &mut g.out_ln.beta,
        });
        linear_slots(&mut slots, "out_lin", &mut self.out_lin, &mut g.out_lin);
        slots
    }

    /// Trainable parameters in slot order (no norm statistics here; the
    /// CVAE has none).
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(&self.enc_in.w.data);
        f(&self.enc_in.b);
        for b in &self.enc_blocks {
            f(&b.ln.gamma);
            f(&b.ln.beta);
            f(&b.fc1.w.data);
            f(&b.fc1.b);
            f(&b.fc2.w.data);
            f(&b.fc2.b);
        }
        f(&self.mu_head.w.data);
        f(&self.mu_head.b);
        f(&self.lv_head.w.data);
        f(&self.lv_head.b);
        f(&self.dec_in.w.data);
        f(&self.dec_in.b);
        for b in &self.dec_blocks {
            f(&b.ln.gamma);
            f(&b.ln.beta);
            f(&b.fc1.w.data);
            f(&b.fc1.b);
            f(&b.fc2.w.data);
            f(&b.fc2.b);
        }
        f(&self.out_ln.gamma);
        f(&self.out_ln.beta);
        f(&self.out_lin.w.data);
        f(&self.out_lin.b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(&mut self.enc_in.w.data);
        f(&mut self.enc_in.b);
        for b in &mut self.enc_blocks {
            f(&mut b.ln.gamma);
            f(&mut b.ln.beta);
            f(&mut b.fc1.w.data);
            f(&mut b.fc1.b);
            f(&mut b.fc2.w.data);
            f(&mut b.fc2.b);
        }
        f(&mut self.mu_head.w.data);
        f(&mut self.mu_head.b);
        f(&mut self.lv_head.w.data);
        f(&mut self.lv_head.b);
        f(&mut self.dec_in.w.data);
        f(&mut self.dec_in.b);
        for b in &mut self.dec_blocks {
            f(&mut b.ln.gamma);
            f(&mut b.ln.beta);
            f(&mut b.fc1.w.data);
            f(&mut b.fc1.b);
            f(&mut b.fc2.w.data);
            f(&mut b.fc2.b);
        }
        f(&mut self.out_ln.gamma);
        f(&mut self.out_ln.beta);
        f(&mut self.out_lin.w.data);
        f(&mut self.out_lin.b);
    }

    pub fn visit_tensors(&self, put: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        visit_linear("enc_in", &self.enc_in, put);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            visit_resblock(&format!("enc_block.{i}"), b, put);
        }
        visit_linear("mu_head", &self.mu_head, put);
        visit_linear("lv_head", &self.lv_head, put);
        visit_linear("dec_in", &self.dec_in, put);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            visit_resblock(&format!("dec_block.{i}"), b, put);
        }
        put("out_ln.gamma".into(), vec![self.out_ln.gamma.len()], &self.out_ln.gamma);
        put("out_ln.beta".into(), vec![self.out_ln.beta.len()], &self.out_ln.beta);
        visit_linear("out_lin", &self.out_lin, put);
    }

    pub fn from_container(
        c: &TensorContainer,
        d: usize,
        hidden: usize,
        latent: usize,
        blocks: usize,
    ) -> Result<Self> {
        let mut rng = Prng::new(0);
        let mut net = CvaeNet::init(d, hidden, latent, blocks, &mut rng);
        load_linear("enc_in", &mut net.enc_in, c)?;
        for (i, b) in net.enc_blocks.iter_mut().enumerate() {
            load_resblock(&format!("enc_block.{i}"), b, c)?;
        }
        load_linear("mu_head", &mut net.mu_head, c)?;
        load_linear("lv_head", &mut net.lv_head, c)?;
        load_linear("dec_in", &mut net.dec_in, c)?;
        for (i, b) in net.dec_blocks.iter_mut().enumerate() {
            load_resblock(&format!("dec_block.{i}"), b, c)?;
        }
        net.out_ln.gamma = c.tensor("out_ln.gamma")?.to_f64();
        net.out_ln.beta = c.tensor("out_ln.beta")?.to_f64();
        load_linear("out_lin", &mut net.out_lin, c)?;
        Ok(net)
    }
}

pub struct DecodeCache {
    dec_in_x: Tensor2D,
    blocks: Vec<ResBlockCache>,
    ln_cache: crate::nn::LayerNormCache,
    ln_out: Tensor2D,
}

pub(crate) fn concat_cols(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    assert_eq!(a.rows, b.rows);
    let mut out = Tensor2D::zeros(a.rows, a.cols + b.cols);
    for i in 0..a.rows {
        let row = out.row_mut(i);
        row[..a.cols].copy_from_slice(a.row(i));
        row[a.cols..].copy_from_slice(b.row(i));
    }
    out
}

pub(crate) fn linear_slots<'a>(
    slots: &mut Vec<Slot<'a>>,
    name: &str,
    l: &'a mut Linear,
    g: &'a mut LinearGrads,
) {
    slots.push(Slot {
        name: format!("{name}.w"),
        param: &mut l.w.data,
        grad: &mut g.w.data,
    });
    slots.push(Slot {
        name: format!("{name}.b"),
        param: &mut l.b,
        grad: &mut g.b,
    });
}

fn resblock_slots<'a>(
    slots: &mut Vec<Slot<'a>>,
    name: &str,
    b: &'a mut ResBlock,
    g: &'a mut ResBlockGrads,
) {
    slots.push(Slot {
        name: format!("{name}.ln.gamma"),
        param: &mut b.ln.gamma,
        grad: &mut g.ln.gamma,
    });
    slots.push(Slot {
        name: format!("{name}.ln.beta"),
        param: &mut b.ln.beta,
        grad: &mut g.ln.beta,
    });
    linear_slots(slots, &format!("{name}.fc1"), &mut b.fc1, &mut g.fc1);
    linear_slots(slots, &format!("{name}.fc2"), &mut b.fc2, &mut g.fc2);
}

pub(crate) fn visit_linear(name: &str, l: &Linear, put: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
    put(format!("{name}.w"), vec![l.w.rows, l.w.cols], &l.w.data);
    put(format!("{name}.b"), vec![l.b.len()], &l.b);
}

pub(crate) fn load_linear(name: &str, l: &mut Linear, c: &TensorContainer) -> Result<()> {
    l.w = c.tensor_2d(&format!("{name}.w"))?;
    l.b = c.tensor(&format!("{name}.b"))?.to_f64();
    Ok(())
}

fn visit_resblock(name: &str, b: &ResBlock, put: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
    put(format!("{name}.ln.gamma"), vec![b.ln.gamma.len()], &b.ln.gamma);
    put(format!("{name}.ln.beta"), vec![b.ln.beta.len()], &b.ln.beta);
    visit_linear(&format!("{name}.fc1"), &b.fc1, put);
    visit_linear(&format!("{name}.fc2"), &b.fc2, put);
}

fn load_resblock(name: &str, b: &mut ResBlock, c: &TensorContainer) -> Result<()> {
    b.ln.gamma = c.tensor(&format!("{name}.ln.gamma"))?.to_f64();
    b.ln.beta = c.tensor(&format!("{name}.ln.beta"))?.to_f64();
    load_linear(&format!("{name}.fc1"), &mut b.fc1, c)?;
    load_linear(&format!("{name}.fc2"), &mut b.fc2, c)?;
    Ok(())
}

// The spec-level entry points ------------------------------------------------

/// ELBO parts + gradients for one (x_dom, x_safe) pair batch.
pub fn cvae_loss(
    net: &CvaeNet,
    x_dom: &Tensor2D,
    x_safe: &Tensor2D,
    beta: f64,
    rng: &mut Prng,
    grads: &mut CvaeGrads,
) -> Result<CvaeLoss> {
    net.loss(x_dom, x_safe, beta, rng, grads)
}

/// Prior-sampled translation averaged over draws.
pub fn cvae_translate(
    net: &CvaeNet,
    x_dom: &Tensor2D,
    n_samples: usize,
    rng: &mut Prng,
) -> Result<Tensor2D> {
    net.translate(x_dom, n_samples, rng)
}
