//! End to end: build shape-grouped pair corpora, train the per-shape
//! translator ensemble, train the MoE router against frozen experts, and
//! cure unseen adapters zero-shot.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::TensorContainer;
use crate::lora::{
    flatten, group_by_shape, reshape_back, AdapterBundle, PairCorpus, ShapeKey,
};
use crate::router::{
    combine, extract_features, gate, train_router, RouterExample, RouterParams,
};
use crate::rng::Prng;
use crate::svd::{refactor_rank_r, refactor_residual};
use crate::tensor::Tensor2D;
use crate::translator::{
    init_translator, params_from_container, params_to_container, train_translator,
    translate_batch, Family, Hyper, InferOptions, TrainRecipe, TranslatorParams,
};

/// Per-shape trained translators of one family.
#[derive(Debug, Clone)]
pub struct TranslatorEnsemble {
    pub family: Family,
    pub models: BTreeMap<ShapeKey, TranslatorParams>,
    /// Per-shape, per-epoch mean training losses.
    pub log: BTreeMap<ShapeKey, Vec<f64>>,
    pub seed: u64,
}

impl TranslatorEnsemble {
    pub fn shape_keys(&self) -> Vec<ShapeKey> {
        self.models.keys().copied().collect()
    }

    /// Bit-pattern hash over every sub-model's parameters.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.models.values() {
            h ^= crate::translator::params_hash(p);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Build the training corpus from aligned (unsafe, safe) bundle pairs.
/// Rejects duplicate bundles (same provenance) outright.
pub fn build_pairs(bundle_pairs: &[(AdapterBundle, AdapterBundle)]) -> Result<PairCorpus> {
    let mut seen = std::collections::BTreeSet::new();
    for (unsafe_b, _) in bundle_pairs {
        if let Some(p) = &unsafe_b.provenance {
            let key = (p.domain.clone(), p.seed, p.corpus_hash.clone());
            if !seen.insert(key) {
                return Err(Error::Validation(format!(
                    "duplicate bundle: domain `{}`, seed {}",
                    p.domain, p.seed
                )));
            }
        }
    }
    group_by_shape(bundle_pairs)
}

/// Train one sub-model per shape key. Each sub-model gets an independent
/// stream derived from (seed, shape), so results are identical whether the
/// shapes run sequentially or on parallel workers.
pub fn train_ensemble(
    family: Family,
    pairs: &PairCorpus,
    hyper: Hyper,
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<TranslatorEnsemble> {
    train_ensemble_jobs(family, pairs, hyper, recipe, seed, 1)
}

/// `jobs` caps the number of per-shape worker threads.
pub fn train_ensemble_jobs(
    family: Family,
    pairs: &PairCorpus,
    hyper: Hyper,
    recipe: &TrainRecipe,
    seed: u64,
    jobs: usize,
) -> Result<TranslatorEnsemble> {
    struct Task {
        key: ShapeKey,
        x_dom: Tensor2D,
        x_safe: Tensor2D,
        shape_seed: u64,
    }
    let mut tasks = Vec::new();
    for (key, set) in pairs {
        if set.pairs.is_empty() {
            return Err(Error::Validation(format!(
                "shape {} has no training pairs",
                key.label()
            )));
        }
        let d = key.flat_dim();
        let n = set.pairs.len();
        let mut x_dom = Tensor2D::zeros(n, d);
        let mut x_safe = Tensor2D::zeros(n, d);
        for (i, p) in set.pairs.iter().enumerate() {
            x_dom.row_mut(i).copy_from_slice(&p.x_dom);
            x_safe.row_mut(i).copy_from_slice(&p.x_safe);
        }
        let shape_seed = Prng::derive(seed, &format!("shape.{}", key.label())).next_u64();
        tasks.push(Task {
            key: *key,
            x_dom,
            x_safe,
            shape_seed,
        });
    }

    let run_task = |t: &Task| -> Result<(ShapeKey, TranslatorParams, Vec<f64>)> {
        let mut params = init_translator(family, t.key, hyper, t.shape_seed);
        let losses = train_translator(&mut params, &t.x_dom, &t.x_safe, recipe, t.shape_seed)
            .map_err(|e| match e {
                Error::Numerical { detail, .. } => {
                    Error::numerical(format!("train_ensemble shape {}", t.key.label()), detail)
                }
                other => other,
            })?;
        Ok((t.key, params, losses))
    };

    let results: Vec<Result<(ShapeKey, TranslatorParams, Vec<f64>)>> = if jobs <= 1 {
        tasks.iter().map(run_task).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(tasks.len().div_ceil(jobs))
                .map(|chunk| scope.spawn(move || chunk.iter().map(run_task).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    };

    let mut models = BTreeMap::new();
    let mut log = BTreeMap::new();
    for r in results {
        let (key, params, losses) = r?;
        models.insert(key, params);
        log.insert(key, losses);
    }
    Ok(TranslatorEnsemble {
        family,
        models,
        log,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Router training over frozen experts
// ---------------------------------------------------------------------------

/// Precompute frozen expert outputs and per-layer features for every pair.
pub fn build_router_examples(
    pairs: &PairCorpus,
    surgical: &TranslatorEnsemble,
    aggressive: &TranslatorEnsemble,
    opts: &InferOptions,
) -> Result<Vec<RouterExample>> {
    for key in pairs.keys() {
        for (ens, tag) in [(surgical, "surgical"), (aggressive, "aggressive")] {
            if !ens.models.contains_key(key) {
                return Err(Error::Structural(format!(
                    "{tag} ensemble has no sub-model for shape {}",
                    key.label()
                )));
            }
        }
    }
    let mut out = Vec::new();
    for (key, set) in pairs {
        let d = key.flat_dim();
        let n = set.pairs.len();
        let mut x_dom = Tensor2D::zeros(n, d);
        for (i, p) in set.pairs.iter().enumerate() {
            x_dom.row_mut(i).copy_from_slice(&p.x_dom);
        }
        let surg_out = translate_batch(&surgical.models[key], &x_dom, opts)?;
        let aggr_out = translate_batch(&aggressive.models[key], &x_dom, opts)?;
        for (i, p) in set.pairs.iter().enumerate() {
            let delta = reshape_back(&p.x_dom, *key)?;
            let features = extract_features(&delta, p.layer_index, p.total_layers)?;
            out.push(RouterExample {
                features,
                surg_out: surg_out.row(i).to_vec(),
                aggr_out: aggr_out.row(i).to_vec(),
                x_safe: p.x_safe.clone(),
            });
        }
    }
    Ok(out)
}

/// Train the router on a pair corpus with both expert ensembles frozen.
pub fn train_moe_router(
    router: &mut RouterParams,
    pairs: &PairCorpus,
    surgical: &TranslatorEnsemble,
    aggressive: &TranslatorEnsemble,
    recipe: &TrainRecipe,
    opts: &InferOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    let examples = build_router_examples(pairs, surgical, aggressive, opts)?;
    train_router(router, &examples, recipe, seed)
}

// ---------------------------------------------------------------------------
// Zero-shot curing
// ---------------------------------------------------------------------------

/// How to translate each layer at cure time.
pub enum Curer<'a> {
    Single(&'a TranslatorEnsemble),
    Moe {
        surgical: &'a TranslatorEnsemble,
        aggressive: &'a TranslatorEnsemble,
        router: &'a RouterParams,
    },
}

impl Curer<'_> {
    fn covers(&self, key: &ShapeKey) -> bool {
        match self {
            Curer::Single(e) => e.models.contains_key(key),
            Curer::Moe {
                surgical,
                aggressive,
                ..
            } => surgical.models.contains_key(key) && aggressive.models.contains_key(key),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CureOptions {
    pub infer: InferOptions,
    /// Relative Frobenius refactor residual above this is flagged in the
    /// report (never fatal).
    pub refactor_warn_tol: f64,
}

impl Default for CureOptions {
    fn default() -> Self {
        CureOptions {
            infer: InferOptions::default(),
            refactor_warn_tol: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CureRow {
    pub name: String,
    pub d: usize,
    pub k: usize,
    pub layer_index: usize,
    pub role: crate::lora::LayerRole,
    pub g: Option<f64>,
    pub pre_norm: f64,
    pub post_norm: f64,
    pub refactor_residual: f64,
    pub warned: bool,
}

#[derive(Debug, Clone)]
pub struct CureReport {
    pub domain: String,
    pub rows: Vec<CureRow>,
}

impl CureReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,d,k,g,pre_norm,post_norm,refactor_residual\n");
        for r in &self.rows {
            let g = r.g.map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.name, r.d, r.k, g, r.pre_norm, r.post_norm, r.refactor_residual
            ));
        }
        out
    }

    pub fn mean_g(&self) -> Option<f64> {
        let gs: Vec<f64> = self.rows.iter().filter_map(|r| r.g).collect();
        if gs.is_empty() {
            None
        } else {
            Some(gs.iter().sum::<f64>() / gs.len() as f64)
        }
    }
}

/// Cure an unseen adapter: per entry, flatten the delta, translate, reshape,
/// refactor back to rank r, and keep rank/alpha/naming intact. Pure
/// inference; no parameters move anywhere.
pub fn cure_adapter(
    unsafe_bundle: &AdapterBundle,
    curer: &Curer,
    opts: &CureOptions,
) -> Result<(AdapterBundle, CureReport)> {
    unsafe_bundle.validate()?;
    // Fail fast on shape coverage before doing any work.
    for e in &unsafe_bundle.entries {
        let key = e.factors.shape_key();
        if !curer.covers(&key) {
            return Err(Error::Structural(format!(
                "entry `{}` has shape {} with no trained sub-model",
                e.name,
                key.label()
            )));
        }
    }
    let mut entries = Vec::with_capacity(unsafe_bundle.entries.len());
    let mut rows = Vec::with_capacity(unsafe_bundle.entries.len());
    for e in &unsafe_bundle.entries {
        let delta = crate::lora::extract_delta(&e.factors)?;
        let key = e.factors.shape_key();
        let (x_dom, _) = flatten(&delta);
        let (cured_vec, g) = match curer {
            Curer::Single(ens) => {
                let out = crate::translator::translate(&ens.models[&key], &x_dom, &opts.infer)?;
                (out, None)
            }
            Curer::Moe {
                surgical,
                aggressive,
                router,
            } => {
                let surg = crate::translator::translate(&surgical.models[&key], &x_dom, &opts.infer)?;
                let aggr =
                    crate::translator::translate(&aggressive.models[&key], &x_dom, &opts.infer)?;
                let features = extract_features(&delta, e.layer_index, e.total_layers)?;
                let g = gate(router, &features);
                (combine(&surg, &aggr, g)?, Some(g))
            }
        };
        let cured_mat = reshape_back(&cured_vec, key)?;
        let factors = refactor_rank_r(&cured_mat, e.factors.rank, e.factors.alpha)?;
        let residual = refactor_residual(&cured_mat, &factors)?;
        rows.push(CureRow {
            name: e.name.clone(),
            d: key.d,
            k: key.k,
            layer_index: e.layer_index,
            role: e.role,
            g,
            pre_norm: delta.frob_norm(),
            post_norm: cured_mat.frob_norm(),
            refactor_residual: residual,
            warned: residual > opts.refactor_warn_tol,
        });
        entries.push(crate::lora::AdapterLayerEntry {
            name: e.name.clone(),
            layer_index: e.layer_index,
            total_layers: e.total_layers,
            role: e.role,
            factors,
        });
    }
    let cured = AdapterBundle {
        entries,
        base_model_id: unsafe_bundle.base_model_id.clone(),
        provenance: unsafe_bundle.provenance.clone(),
    };
    cured.validate()?;
    let domain = unsafe_bundle
        .provenance
        .as_ref()
        .map(|p| p.domain.clone())
        .unwrap_or_default();
    Ok((cured, CureReport { domain, rows }))
}

// ---------------------------------------------------------------------------
// Ensemble checkpoints
// ---------------------------------------------------------------------------

pub fn ensemble_to_container(ens: &TranslatorEnsemble) -> TensorContainer {
    let mut c = TensorContainer::new();
    c.metadata.insert("kind".into(), "ensemble".into());
    c.metadata.insert("family".into(), ens.family.as_str().into());
    c.metadata.insert("seed".into(), ens.seed.to_string());
    c.metadata
        .insert("format_version".into(), crate::io::FORMAT_VERSION.into());
    let shapes: Vec<String> = ens.models.keys().map(|k| k.label()).collect();
    c.metadata.insert("shapes".into(), shapes.join(";"));
    for (key, params) in &ens.models {
        let sub = params_to_container(params);
        let prefix = format!("s{}.", key.label());
        for (name, t) in sub.tensors {
            c.tensors.insert(format!("{prefix}{name}"), t);
        }
        for (mk, mv) in sub.metadata {
            c.metadata.insert(format!("{prefix}{mk}"), mv);
        }
    }
    c
}

pub fn ensemble_from_container(c: &TensorContainer) -> Result<TranslatorEnsemble> {
    let family = Family::parse(c.meta("family")?)?;
    let seed: u64 = c
        .meta("seed")?
        .parse()
        .map_err(|e| Error::Validation(format!("seed: {e}")))?;
    let shapes = c.meta("shapes")?.to_string();
    let mut models = BTreeMap::new();
    for label in shapes.split(';').filter(|s| !s.is_empty()) {
        let prefix = format!("s{label}.");
        let mut sub = TensorContainer::new();
        for (name, t) in &c.tensors {
            if let Some(rest) = name.strip_prefix(&prefix) {
                sub.tensors.insert(rest.to_string(), t.clone());
            }
        }
        for (mk, mv) in &c.metadata {
            if let Some(rest) = mk.strip_prefix(&prefix) {
                sub.metadata.insert(rest.to_string(), mv.clone());
            }
        }
        let params = params_from_container(&sub)?;
        models.insert(params.shape_key, params);
    }
    Ok(TranslatorEnsemble {
        family,
        models,
        log: BTreeMap::new(),
        seed,
    })
}

pub fn save_ensemble(ens: &TranslatorEnsemble, path: &std::path::Path) -> Result<()> {
    ensemble_to_container(ens).write(path)
}

pub fn load_ensemble(path: &std::path::Path) -> Result<TranslatorEnsemble> {
    ensemble_from_container(&TensorContainer::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{FlatPair, FlatPairSet, LayerRole};
    use crate::toyforge::{generate_corpora, forge_pairs, SftRecipe, ToyBaseModel};

    fn tiny_hyper(family: Family) -> Hyper {
        match family {
            Family::Mlp => Hyper { hidden: 24, latent: 0, blocks: 0, time_dim: 0 },
            Family::Ae => Hyper { hidden: 24, latent: 12, blocks: 0, time_dim: 0 },
            Family::Cvae => Hyper { hidden: 24, latent: 6, blocks: 1, time_dim: 0 },
            Family::Fm => Hyper { hidden: 24, latent: 0, blocks: 2, time_dim: 8 },
        }
    }

    fn synthetic_corpus(keys: &[ShapeKey], n: usize, seed: u64) -> PairCorpus {
        // x_safe = x_dom (identity task), two shapes.
        let mut corpus = PairCorpus::new();
        let mut rng = Prng::new(seed);
        for key in keys {
            let d = key.flat_dim();
            let pairs = (0..n)
                .map(|i| {
                    let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                    FlatPair {
                        x_dom: x.clone(),
                        x_safe: x,
                        layer_index: i % 4,
                        total_layers: 4,
                        role: LayerRole::MlpBlock,
                        domain: "synthetic".into(),
                        pair_index: i,
                    }
                })
                .collect();
            corpus.insert(*key, FlatPairSet { key: *key, pairs });
        }
        corpus
    }

    #[test]
    fn identity_task_keeps_mlp_loss_at_zero() {
        // Identity is representable exactly at init; training must not
        // leave it. The loss starts at 0 and stays at numerical zero.
        let keys = [ShapeKey::new(2, 3)];
        let corpus = synthetic_corpus(&keys, 12, 1);
        let mut recipe = TrainRecipe::default_for(Family::Mlp);
        recipe.epochs = 150;
        let ens = train_ensemble(Family::Mlp, &corpus, tiny_hyper(Family::Mlp), &recipe, 2).unwrap();
        let losses = &ens.log[&keys[0]];
        assert!(losses[0] <= 1e-12, "initial loss {}", losses[0]);
        assert!(*losses.last().unwrap() <= 1e-6, "final loss {}", losses.last().unwrap());
        assert!(losses.last().unwrap() <= &losses[0].max(1e-12));
    }

    #[test]
    fn empty_group_rejected() {
        let mut corpus = PairCorpus::new();
        let key = ShapeKey::new(2, 2);
        corpus.insert(key, FlatPairSet { key, pairs: vec![] });
        let recipe = TrainRecipe::default_for(Family::Mlp);
        assert!(train_ensemble(Family::Mlp, &corpus, tiny_hyper(Family::Mlp), &recipe, 3).is_err());
    }

    #[test]
    fn build_pairs_rejects_duplicates() {
        let base = ToyBaseModel::new(4);
        let (domains, safety) = generate_corpora(1, 24, 5);
        let recipe = SftRecipe { max_epochs: 50, ..SftRecipe::default() };
        let pairs = forge_pairs(&base, &domains, &safety, 1, &recipe, 6).unwrap();
        let p = &pairs[0];
        let dup = vec![
            (p.unsafe_bundle.clone(), p.safe_bundle.clone()),
            (p.unsafe_bundle.clone(), p.safe_bundle.clone()),
        ];
        let err = build_pairs(&dup).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        // And the clean path groups into the toy model's two shapes.
        let ok = build_pairs(&dup[..1].to_vec()).unwrap();
        assert_eq!(ok.len(), 2);
    }

    #[test]
    fn identity_cure_with_fresh_ensembles() {
        // Freshly initialized ensembles are the identity, and the refactor
        // of a rank-r delta is exact, so the cured bundle's deltas match the
        // input's to high precision.
        let base = ToyBaseModel::new(7);
        let (domains, safety) = generate_corpora(1, 32, 8);
        let recipe = SftRecipe { max_epochs: 100, ..SftRecipe::default() };
        let pairs = forge_pairs(&base, &domains, &safety, 1, &recipe, 9).unwrap();
        let unsafe_b = &pairs[0].unsafe_bundle;
        let corpus = build_pairs(&[(unsafe_b.clone(), pairs[0].safe_bundle.clone())]).unwrap();

        for family in [Family::Mlp, Family::Ae, Family::Cvae, Family::Fm] {
            let mut models = BTreeMap::new();
            for key in corpus.keys() {
                models.insert(*key, init_translator(family, *key, tiny_hyper(family), 10));
            }
            let ens = TranslatorEnsemble { family, models, log: BTreeMap::new(), seed: 10 };
            let (cured, report) = cure_adapter(unsafe_b, &Curer::Single(&ens), &CureOptions::default()).unwrap();
            for (e0, e1) in unsafe_b.entries.iter().zip(&cured.entries) {
                let d0 = crate::lora::extract_delta(&e0.factors).unwrap();
                let d1 = crate::lora::extract_delta(&e1.factors).unwrap();
                let rel = d1.sub(&d0).frob_norm() / d0.frob_norm().max(1e-30);
                assert!(rel <= 1e-6, "{family}: identity cure rel err {rel}");
                assert_eq!(e0.factors.rank, e1.factors.rank);
                assert_eq!(e0.factors.alpha, e1.factors.alpha);
            }
            assert_eq!(report.rows.len(), unsafe_b.entries.len());
        }
    }

    #[test]
    fn moe_with_g_zero_matches_pure_surgical_cure() {
        let base = ToyBaseModel::new(11);
        let (domains, safety) = generate_corpora(1, 32, 12);
        let recipe = SftRecipe { max_epochs: 100, ..SftRecipe::default() };
        let pairs = forge_pairs(&base, &domains, &safety, 1, &recipe, 13).unwrap();
        let unsafe_b = &pairs[0].unsafe_bundle;
        let corpus = build_pairs(&[(unsafe_b.clone(), pairs[0].safe_bundle.clone())]).unwrap();

        let mut surgical = BTreeMap::new();
        let mut aggressive = BTreeMap::new();
        for key in corpus.keys() {
            surgical.insert(*key, init_translator(Family::Fm, *key, tiny_hyper(Family::Fm), 14));
            // Give the aggressive expert a visible non-identity map.
            let mut p = init_translator(Family::Mlp, *key, tiny_hyper(Family::Mlp), 15);
            if let crate::translator::Net::Mlp(n) = &mut p.net {
                if let crate::nn::Layer::Linear(l) = &mut n.seq.layers[5] {
                    l.b.iter_mut().enumerate().for_each(|(i, b)| *b = 0.01 * (i as f64 + 1.0));
                }
            }
            aggressive.insert(*key, p);
        }
        let surg = TranslatorEnsemble { family: Family::Fm, models: surgical, log: BTreeMap::new(), seed: 14 };
        let aggr = TranslatorEnsemble { family: Family::Mlp, models: aggressive, log: BTreeMap::new(), seed: 15 };

        // Router with a hugely negative final bias -> g ~ 0.
        let mut router = RouterParams::init(16);
        router.fc3.b[0] = -60.0;
        let moe = Curer::Moe { surgical: &surg, aggressive: &aggr, router: &router };
        let (cured_moe, report) = cure_adapter(unsafe_b, &moe, &CureOptions::default()).unwrap();
        let (cured_surg, _) = cure_adapter(unsafe_b, &Curer::Single(&surg), &CureOptions::default()).unwrap();
        for (a, b) in cured_moe.entries.iter().zip(&cured_surg.entries) {
            let da = crate::lora::extract_delta(&a.factors).unwrap();
            let db = crate::lora::extract_delta(&b.factors).unwrap();
            let err = da.sub(&db).data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-7, "max abs {err}");
        }
        assert!(report.mean_g().unwrap() < 1e-10);
    }

    #[test]
    fn cure_is_zero_shot_and_deterministic() {
        let base = ToyBaseModel::new(17);
        let (domains, safety) = generate_corpora(1, 32, 18);
        let recipe = SftRecipe { max_epochs: 100, ..SftRecipe::default() };
        let pairs = forge_pairs(&base, &domains, &safety, 2, &recipe, 19).unwrap();
        let corpus = build_pairs(&[(pairs[0].unsafe_bundle.clone(), pairs[0].safe_bundle.clone())]).unwrap();
        let mut train_recipe = TrainRecipe::default_for(Family::Mlp);
        train_recipe.epochs = 30;
        let ens = train_ensemble(Family::Mlp, &corpus, tiny_hyper(Family::Mlp), &train_recipe, 20).unwrap();

        let held_out = &pairs[1].unsafe_bundle;
        let before = ens.hash();
        let (c1, _) = cure_adapter(held_out, &Curer::Single(&ens), &CureOptions::default()).unwrap();
        let (c2, _) = cure_adapter(held_out, &Curer::Single(&ens), &CureOptions::default()).unwrap();
        assert_eq!(before, ens.hash(), "curing must not move parameters");
        assert_eq!(c1, c2, "same ensemble + input + seed must reproduce");
    }

    #[test]
    fn cure_fails_fast_on_missing_shape() {
        let base = ToyBaseModel::new(21);
        let mut rng = Prng::new(22);
        let bundle = base.init_adapter(4, 8.0, &mut rng);
        let mut models = BTreeMap::new();
        let only_key = ShapeKey::new(16, 16);
        models.insert(only_key, init_translator(Family::Mlp, only_key, tiny_hyper(Family::Mlp), 23));
        let ens = TranslatorEnsemble { family: Family::Mlp, models, log: BTreeMap::new(), seed: 23 };
        let err = cure_adapter(&bundle, &Curer::Single(&ens), &CureOptions::default()).unwrap_err();
        assert!(err.to_string().contains("32x16"), "{err}");
    }

    #[test]
    fn ensemble_checkpoint_roundtrip() {
        let keys = [ShapeKey::new(2, 3), ShapeKey::new(4, 2)];
        let corpus = synthetic_corpus(&keys, 8, 24);
        let mut recipe = TrainRecipe::default_for(Family::Fm);
        recipe.epochs = 10;
        let ens = train_ensemble(Family::Fm, &corpus, tiny_hyper(Family::Fm), &recipe, 25).unwrap();
        let bytes1 = ensemble_to_container(&ens).to_bytes();
        let loaded = ensemble_from_container(&TensorContainer::from_bytes(&bytes1).unwrap()).unwrap();
        let bytes2 = ensemble_to_container(&loaded).to_bytes();
        assert_eq!(bytes1, bytes2, "checkpoint serialization must be stable");
        assert_eq!(loaded.family, Family::Fm);
        assert_eq!(loaded.shape_keys(), ens.shape_keys());
    }

    #[test]
    fn parallel_and_sequential_training_agree() {
        let keys = [ShapeKey::new(2, 3), ShapeKey::new(3, 2)];
        let corpus = synthetic_corpus(&keys, 10, 32);
        let mut recipe = TrainRecipe::default_for(Family::Mlp);
        recipe.epochs = 20;
        let seq = train_ensemble_jobs(Family::Mlp, &corpus, tiny_hyper(Family::Mlp), &recipe, 33, 1).unwrap();
        let par = train_ensemble_jobs(Family::Mlp, &corpus, tiny_hyper(Family::Mlp), &recipe, 33, 2).unwrap();
        assert_eq!(seq.hash(), par.hash());
        assert_eq!(seq.log, par.log);
    }

    #[test]
    fn router_training_keeps_experts_frozen() {
        let keys = [ShapeKey::new(2, 2)];
        let corpus = synthetic_corpus(&keys, 16, 26);
        let mut models_s = BTreeMap::new();
        let mut models_a = BTreeMap::new();
        for key in &keys {
            models_s.insert(*key, init_translator(Family::Fm, *key, tiny_hyper(Family::Fm), 27));
            models_a.insert(*key, init_translator(Family::Mlp, *key, tiny_hyper(Family::Mlp), 28));
        }
        let surg = TranslatorEnsemble { family: Family::Fm, models: models_s, log: BTreeMap::new(), seed: 27 };
        let aggr = TranslatorEnsemble { family: Family::Mlp, models: models_a, log: BTreeMap::new(), seed: 28 };
        let (hs, ha) = (surg.hash(), aggr.hash());
        let mut router = RouterParams::init(29);
        let mut recipe = crate::router::default_router_recipe();
        recipe.epochs = 20;
        train_moe_router(&mut router, &corpus, &surg, &aggr, &recipe, &InferOptions::default(), 30).unwrap();
        assert_eq!(hs, surg.hash());
        assert_eq!(ha, aggr.hash());

        // Missing shape key is named in the error.
        let mut bigger = corpus.clone();
        let missing = ShapeKey::new(9, 9);
        bigger.insert(missing, FlatPairSet { key: missing, pairs: synthetic_corpus(&[missing], 2, 31)[&missing].pairs.clone() });
        let err = build_router_examples(&bigger, &surg, &aggr, &InferOptions::default()).unwrap_err();
        assert!(err.to_string().contains("9x9"));
    }
}
