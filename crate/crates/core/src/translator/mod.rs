//! The translator families: MLP, autoencoder, conditional VAE, and
//! conditional flow matching.
//!
//! All four are residual maps: output = x_dom + net(x_dom), with the final
//! projection zero-initialized so every freshly built translator is exactly
//! the identity. Translators operate on flattened delta vectors of one
//! matrix shape.

pub mod ae;
pub mod check;
pub mod cvae;
pub mod fm;
pub mod mlp;
pub(crate) mod seqnet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorContainer;
use crate::lora::ShapeKey;
use crate::optim::{OptimKind, Schedule};
use crate::rng::Prng;
use crate::tensor::Tensor2D;

pub use ae::AeNet;
pub use cvae::CvaeNet;
pub use fm::{fm_integrate, fm_train_target, FmNet, OdeMethod, VelocityField};
pub use mlp::MlpNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Mlp,
    Ae,
    Cvae,
    Fm,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::Ae => "ae",
            Family::Cvae => "cvae",
            Family::Fm => "fm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Family::Mlp),
            "ae" => Ok(Family::Ae),
            "cvae" => Ok(Family::Cvae),
            "fm" => Ok(Family::Fm),
            other => Err(Error::Config(format!("unknown translator family `{other}`"))),
        }
    }

    pub fn all() -> [Family; 4] {
        [Family::Mlp, Family::Ae, Family::Cvae, Family::Fm]
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture knobs. Fields not used by a family are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub hidden: usize,
    pub latent: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

impl Hyper {
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Mlp => Hyper {
                hidden: 512,
                latent: 0,
                blocks: 0,
                time_dim: 0,
            },
            Family::Ae => Hyper {
                hidden: 512,
                latent: 256,
                blocks: 0,
                time_dim: 0,
            },
            Family::Cvae => Hyper {
                hidden: 256,
                latent: 32,
                blocks: 2,
                time_dim: 0,
            },
            Family::Fm => Hyper {
                hidden: 512,
                latent: 0,
                blocks: 6,
                time_dim: 512,
            },
        }
    }
}

/// One trained (or freshly initialized) translator for a single shape.
#[derive(Debug, Clone)]
pub struct TranslatorParams {
    pub family: Family,
    pub shape_key: ShapeKey,
    pub hyper: Hyper,
    /// Residual formulation; always true for these families.
    pub residual: bool,
    pub net: Net,
}

#[derive(Debug, Clone)]
pub enum Net {
    Mlp(MlpNet),
    Ae(AeNet),
    Cvae(CvaeNet),
    Fm(FmNet),
}

/// Build a translator with fan-in-scaled random init for interior layers and
/// an exactly zero final projection, from a seeded stream.
pub fn init_translator(family: Family, shape_key: ShapeKey, hyper: Hyper, seed: u64) -> TranslatorParams {
    let label = format!("init.{}.{}", family.as_str(), shape_key.label());
    let mut rng = Prng::derive(seed, &label);
    let d = shape_key.flat_dim();
    let net = match family {
        Family::Mlp => Net::Mlp(MlpNet::init(d, hyper.hidden, &mut rng)),
        Family::Ae => Net::Ae(AeNet::init(d, hyper.hidden, hyper.latent, &mut rng)),
        Family::Cvae => Net::Cvae(CvaeNet::init(d, hyper.hidden, hyper.latent, hyper.blocks, &mut rng)),
        Family::Fm => Net::Fm(FmNet::init(d, hyper.hidden, hyper.blocks, hyper.time_dim, &mut rng)),
    };
    TranslatorParams {
        family,
        shape_key,
        hyper,
        residual: true,
        net,
    }
}

/// Inference-time options shared by all families.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InferOptions {
    pub fm_method: OdeMethod,
    pub fm_steps: usize,
    pub cvae_samples: usize,
    /// Seed for the CVAE prior draws.
    pub seed: u64,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            fm_method: OdeMethod::Rk4,
            fm_steps: 50,
            cvae_samples: 10,
            seed: 0,
        }
    }
}

/// Translate a batch of flattened deltas (one row per vector).
pub fn translate_batch(p: &TranslatorParams, x_dom: &Tensor2D, opts: &InferOptions) -> Result<Tensor2D> {
    let d = p.shape_key.flat_dim();
    if x_dom.cols != d {
        return Err(Error::dim(
            format!("translate ({})", p.family),
            d.to_string(),
            x_dom.cols.to_string(),
        ));
    }
    match &p.net {
        Net::Mlp(n) => n.translate(x_dom),
        Net::Ae(n) => n.translate(x_dom),
        Net::Cvae(n) => {
            let mut rng = Prng::derive(opts.seed, &format!("cvae.prior.{}", p.shape_key.label()));
            n.translate(x_dom, opts.cvae_samples, &mut rng)
        }
        Net::Fm(n) => fm_integrate(n, x_dom, opts.fm_method, opts.fm_steps),
    }
}

/// Translate a single flattened delta.
pub fn translate(p: &TranslatorParams, x_dom: &[f64], opts: &InferOptions) -> Result<Vec<f64>> {
    let out = translate_batch(p, &Tensor2D::row_vec(x_dom), opts)?;
    Ok(out.data)
}

/// The divergence objective: element-mean squared error.
pub fn loss_dv(pred: &[f64], target: &[f64]) -> Result<f64> {
    crate::tensor::mean_sq_diff(pred, target)
}

// ---------------------------------------------------------------------------
// Training recipes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    Mse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub optimizer: OptimKindSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub lr_schedule: Schedule,
    /// CVAE only: KL weight over epochs.
    pub beta_schedule: Option<Schedule>,
    pub loss: DivergenceKind,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimKindSpec {
    pub kind: OptimKindTag,
    pub lr: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKindTag {
    Adam,
    AdamW,
}

impl OptimKindSpec {
    pub fn to_state(self) -> crate::optim::OptimState {
        let kind = match self.kind {
            OptimKindTag::Adam => OptimKind::Adam,
            OptimKindTag::AdamW => OptimKind::AdamW,
        };
        crate::optim::OptimState::new(kind, self.lr, self.weight_decay)
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation(
                "recipe requires positive epochs and batch size".into(),
            ));
        }
        self.lr_schedule.validate()?;
        if let Some(b) = &self.beta_schedule {
            b.validate()?;
        }
        Ok(())
    }

    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Mlp => TrainRecipe {
                optimizer: OptimKindSpec {
                    kind: OptimKindTag::Adam,
                    lr: 1e-3,
                    weight_decay: 0.0,
                },
                epochs: 150,
                batch_size: 8,
                grad_clip: None,
                lr_schedule: Schedule::Constant { value: 1e-3 },
                beta_schedule: None,
                loss: DivergenceKind::Mse,
            },
            Family::Ae => TrainRecipe {
                optimizer: OptimKindSpec {
                    kind: OptimKindTag::Adam,
                    lr: 1e-3,
                    weight_decay: 0.0,
                },
                epochs: 150,
                batch_size: 1,
                grad_clip: None,
                lr_schedule: Schedule::Constant { value: 1e-3 },
                beta_schedule: None,
                loss: DivergenceKind::Mse,
            },
            Family::Cvae => TrainRecipe {
                optimizer: OptimKindSpec {
                    kind: OptimKindTag::AdamW,
                    lr: 2e-4,
                    weight_decay: 1e-5,
                },
                epochs: 300,
                batch_size: 1,
                grad_clip: Some(1.0),
                lr_schedule: Schedule::Cosine {
                    base: 2e-4,
                    final_value: 0.0,
                    horizon: 300,
                },
                beta_schedule: Some(Schedule::LinearRamp {
                    base: 0.0,
                    final_value: 1.0,
                    horizon: 300,
                    ramp_end: 120,
                }),
                loss: DivergenceKind::Mse,
            },
            Family::Fm => TrainRecipe {
                optimizer: OptimKindSpec {
                    kind: OptimKindTag::AdamW,
                    lr: 2e-4,
                    weight_decay: 1e-5,
                },
                epochs: 300,
                batch_size: 4,
                grad_clip: Some(1.0),
                lr_schedule: Schedule::Cosine {
                    base: 2e-4,
                    final_value: 0.0,
                    horizon: 300,
                },
                beta_schedule: None,
                loss: DivergenceKind::Mse,
            },
        }
    }
}

/// Train one translator in place on (x_dom, x_safe) rows. Returns per-epoch
/// mean training losses.
pub fn train_translator(
    p: &mut TranslatorParams,
    x_dom: &Tensor2D,
    x_safe: &Tensor2D,
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<Vec<f64>> {
    recipe.validate()?;
    if x_dom.shape() != x_safe.shape() || x_dom.cols != p.shape_key.flat_dim() {
        return Err(Error::dim(
            "train_translator",
            format!("paired rows of width {}", p.shape_key.flat_dim()),
            format!("{:?} vs {:?}", x_dom.shape(), x_safe.shape()),
        ));
    }
    let label = format!("train.{}.{}", p.family.as_str(), p.shape_key.label());
    let mut rng = Prng::derive(seed, &label);
    match &mut p.net {
        Net::Mlp(n) => n.train(x_dom, x_safe, recipe, &mut rng),
        Net::Ae(n) => n.train(x_dom, x_safe, recipe, &mut rng),
        Net::Cvae(n) => n.train(x_dom, x_safe, recipe, &mut rng),
        Net::Fm(n) => n.train(x_dom, x_safe, recipe, &mut rng),
    }
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

pub fn params_to_container(p: &TranslatorParams) -> TensorContainer {
    let mut c = TensorContainer::new();
    c.metadata.insert("kind".into(), "translator".into());
    c.metadata.insert("family".into(), p.family.as_str().into());
    c.metadata.insert("shape.d".into(), p.shape_key.d.to_string());
    c.metadata.insert("shape.k".into(), p.shape_key.k.to_string());
    c.metadata.insert("hyper.hidden".into(), p.hyper.hidden.to_string());
    c.metadata.insert("hyper.latent".into(), p.hyper.latent.to_string());
    c.metadata.insert("hyper.blocks".into(), p.hyper.blocks.to_string());
    c.metadata.insert("hyper.time_dim".into(), p.hyper.time_dim.to_string());
    c.metadata
        .insert("format_version".into(), crate::io::FORMAT_VERSION.into());
    let mut put = |name: String, shape: Vec<usize>, data: &[f64]| {
        c.insert_f64(name, shape, data);
    };
    match &p.net {
        Net::Mlp(n) => n.visit_tensors(&mut put),
        Net::Ae(n) => n.visit_tensors(&mut put),
        Net::Cvae(n) => n.visit_tensors(&mut put),
        Net::Fm(n) => n.visit_tensors(&mut put),
    }
    c
}

pub fn params_from_container(c: &TensorContainer) -> Result<TranslatorParams> {
    let family = Family::parse(c.meta("family")?)?;
    let shape_key = ShapeKey::new(
        c.meta("shape.d")?.parse().map_err(|e| Error::Validation(format!("shape.d: {e}")))?,
        c.meta("shape.k")?.parse().map_err(|e| Error::Validation(format!("shape.k: {e}")))?,
    );
    let hyper = Hyper {
        hidden: c.meta("hyper.hidden")?.parse().unwrap_or(0),
        latent: c.meta("hyper.latent")?.parse().unwrap_or(0),
        blocks: c.meta("hyper.blocks")?.parse().unwrap_or(0),
        time_dim: c.meta("hyper.time_dim")?.parse().unwrap_or(0),
    };
    let d = shape_key.flat_dim();
    let net = match family {
        Family::Mlp => Net::Mlp(MlpNet::from_container(c, d, hyper.hidden)?),
        Family::Ae => Net::Ae(AeNet::from_container(c, d, hyper.hidden, hyper.latent)?),
        Family::Cvae => Net::Cvae(CvaeNet::from_container(c, d, hyper.hidden, hyper.latent, hyper.blocks)?),
        Family::Fm => Net::Fm(FmNet::from_container(c, d, hyper.hidden, hyper.blocks, hyper.time_dim)?),
    };
    Ok(TranslatorParams {
        family,
        shape_key,
        hyper,
        residual: true,
        net,
    })
}

/// Bit-pattern hash over all parameters (and norm statistics); used by the
/// frozen-expert contract checks.
pub fn params_hash(p: &TranslatorParams) -> u64 {
    let mut acc: Vec<f64> = Vec::new();
    let mut put = |_name: String, _shape: Vec<usize>, data: &[f64]| {
        acc.extend_from_slice(data);
    };
    match &p.net {
        Net::Mlp(n) => n.visit_tensors(&mut put),
        Net::Ae(n) => n.visit_tensors(&mut put),
        Net::Cvae(n) => n.visit_tensors(&mut put),
        Net::Fm(n) => n.visit_tensors(&mut put),
    }
    crate::rng::hash_f64s(&acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_dv_examples() {
        assert_eq!(loss_dv(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let v = loss_dv(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((v - 12.5).abs() < 1e-12);
        // Symmetry.
        let a = [0.3, -1.0, 2.0];
        let b = [1.1, 0.0, -0.5];
        assert_eq!(loss_dv(&a, &b).unwrap(), loss_dv(&b, &a).unwrap());
        assert!(loss_dv(&[1.0], &[1.0, 2.0]).is_err());
    }
}
