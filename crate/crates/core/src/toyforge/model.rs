//! The synthetic base model.
//!
//! Four blocks over a 16-dimensional residual stream. Each block has an
//! attention-role matrix (a 16x16 linear mixer) and an mlp-role matrix
//! (32x16 up-projection, GELU, frozen down-projection back to 16). Exactly
//! these two matrices per block are adaptable; everything else (embedding,
//! down-projections, output head) is frozen.

use crate::error::{Error, Result};
use crate::lora::{AdapterBundle, AdapterLayerEntry, LayerRole, LoraFactors, ShapeKey};
use crate::nn::gelu;
use crate::rng::Prng;
use crate::tensor::{matmul, Tensor2D};

pub const VOCAB: usize = 32;
pub const EMBED_DIM: usize = 16;
pub const NUM_BLOCKS: usize = 4;
pub const MLP_UP: usize = 32;

pub const ATTN_SHAPE: ShapeKey = ShapeKey { d: EMBED_DIM, k: EMBED_DIM };
pub const MLP_SHAPE: ShapeKey = ShapeKey { d: MLP_UP, k: EMBED_DIM };

#[derive(Debug, Clone)]
pub struct ToyBlock {
    /// Adaptable 16x16 mixer.
    pub w_attn: Tensor2D,
    /// Adaptable 32x16 up-projection.
    pub w_mlp: Tensor2D,
    /// Frozen 16x32 down-projection.
    pub w_down: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct ToyBaseModel {
    pub embed: Tensor2D,
    pub blocks: Vec<ToyBlock>,
    pub head: Tensor2D,
    pub id: String,
}

impl ToyBaseModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = Prng::derive(seed, "toybase");
        let mut mat = |rows: usize, cols: usize, gain: f64| -> Tensor2D {
            let s = gain / (cols as f64).sqrt();
            Tensor2D {
                rows,
                cols,
                data: (0..rows * cols).map(|_| s * rng.normal()).collect(),
            }
        };
        let mut head = mat(VOCAB, EMBED_DIM, 1.0);
        // The refusal direction is prominent in the frozen unembedding, the
        // way an aligned base model keeps refusal easy to express; adapters
        // need only steer the hidden state part-way toward it.
        for v in head.row_mut(crate::toyforge::REFUSAL_TOKEN) {
            *v *= 12.0;
        }
        ToyBaseModel {
            embed: mat(VOCAB, EMBED_DIM, 1.0),
            blocks: (0..NUM_BLOCKS)
                .map(|_| ToyBlock {
                    w_attn: mat(EMBED_DIM, EMBED_DIM, 0.5),
                    w_mlp: mat(MLP_UP, EMBED_DIM, 0.5),
                    w_down: mat(EMBED_DIM, MLP_UP, 0.5),
                })
                .collect(),
            head,
            id: format!("toy-v1-seed{seed}"),
        }
    }

    /// Entry name for a block and role, matching forged bundles.
    pub fn entry_name(block: usize, role: LayerRole) -> String {
        match role {
            LayerRole::AttentionBlock => format!("blocks.{block}.attn"),
            LayerRole::MlpBlock => format!("blocks.{block}.mlp"),
        }
    }

    /// A zero-delta adapter skeleton: A seeded Gaussian, B zero, so every
    /// delta starts at exactly zero.
    pub fn init_adapter(&self, rank: usize, alpha: f64, rng: &mut Prng) -> AdapterBundle {
        let mut entries = Vec::new();
        for (l, _) in self.blocks.iter().enumerate() {
            for (role, key) in [
                (LayerRole::AttentionBlock, ATTN_SHAPE),
                (LayerRole::MlpBlock, MLP_SHAPE),
            ] {
                // Modest init scale: the adapter solutions stay dominated by
                // the corpus rather than by the draw of A, which is what
                // keeps the unsafe-to-safe weight map learnable.
                let a_scale = 0.5 / (key.k as f64).sqrt();
                let a = Tensor2D {
                    rows: rank,
                    cols: key.k,
                    data: (0..rank * key.k).map(|_| a_scale * rng.normal()).collect(),
                };
                let b = Tensor2D::zeros(key.d, rank);
                entries.push(AdapterLayerEntry {
                    name: Self::entry_name(l, role),
                    layer_index: l,
                    total_layers: NUM_BLOCKS,
                    role,
                    factors: LoraFactors::new(b, a, rank, alpha).unwrap(),
                });
            }
        }
        AdapterBundle {
            entries,
            base_model_id: self.id.clone(),
            provenance: None,
        }
    }

    /// Materialize effective weights for a (possibly absent) adapter.
    pub fn effective(&self, adapter: Option<&AdapterBundle>) -> Result<EffectiveToyModel> {
        let mut eff = EffectiveToyModel {
            w_attn: self.blocks.iter().map(|b| b.w_attn.clone()).collect(),
            w_mlp: self.blocks.iter().map(|b| b.w_mlp.clone()).collect(),
        };
        if let Some(bundle) = adapter {
            for e in &bundle.entries {
                if e.layer_index >= NUM_BLOCKS {
                    return Err(Error::Structural(format!(
                        "entry `{}` targets block {} of a {NUM_BLOCKS}-block model",
                        e.name, e.layer_index
                    )));
                }
                let scaled = {
                    let mut d = matmul(&e.factors.b, &e.factors.a);
                    d.scale(e.factors.alpha / e.factors.rank as f64);
                    d
                };
                let slot = match e.role {
                    LayerRole::AttentionBlock => &mut eff.w_attn[e.layer_index],
                    LayerRole::MlpBlock => &mut eff.w_mlp[e.layer_index],
                };
                if slot.shape() != scaled.shape() {
                    return Err(Error::Structural(format!(
                        "entry `{}` delta shape {:?} does not match base {:?}",
                        e.name,
                        scaled.shape(),
                        slot.shape()
                    )));
                }
                slot.add_assign(&scaled);
            }
        }
        Ok(eff)
    }

    /// Next-token logits and per-block hidden states for one input token.
    pub fn probe(&self, eff: &EffectiveToyModel, token: usize) -> ProbeOut {
        let mut h: Vec<f64> = self.embed.row(token).to_vec();
        let mut per_layer = Vec::with_capacity(NUM_BLOCKS);
        for (l, block) in self.blocks.iter().enumerate() {
            h = forward_block(&eff.w_attn[l], &eff.w_mlp[l], &block.w_down, &h);
            per_layer.push(h.clone());
        }
        let logits: Vec<f64> = (0..VOCAB)
            .map(|v| crate::tensor::dot(self.head.row(v), &h))
            .collect();
        ProbeOut { logits, per_layer }
    }

    /// Argmax next token for one input token.
    pub fn argmax_next(&self, eff: &EffectiveToyModel, token: usize) -> usize {
        let p = self.probe(eff, token);
        argmax(&p.logits)
    }
}

/// Composed per-block effective weights (base + scaled deltas).
#[derive(Debug, Clone)]
pub struct EffectiveToyModel {
    pub w_attn: Vec<Tensor2D>,
    pub w_mlp: Vec<Tensor2D>,
}

pub struct ProbeOut {
    pub logits: Vec<f64>,
    pub per_layer: Vec<Vec<f64>>,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// One block: h <- h + Wa h; h <- h + Wd gelu(Wm h).
pub fn forward_block(w_attn: &Tensor2D, w_mlp: &Tensor2D, w_down: &Tensor2D, h: &[f64]) -> Vec<f64> {
    let mut v = h.to_vec();
    for (i, out) in v.iter_mut().enumerate() {
        *out += crate::tensor::dot(w_attn.row(i), h);
    }
    let m: Vec<f64> = (0..w_mlp.rows)
        .map(|i| crate::tensor::dot(w_mlp.row(i), &v))
        .collect();
    let g: Vec<f64> = m.iter().map(|&x| gelu(x)).collect();
    let mut out = v;
    for (i, o) in out.iter_mut().enumerate() {
        *o += crate::tensor::dot(w_down.row(i), &g);
    }
    out
}
