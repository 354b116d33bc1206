//! Desk-scale data generation: a small synthetic base model, LoRA supervised
//! fine-tuning on domain-only vs. domain+safety corpora to manufacture
//! genuine (unsafe, safe) adapter pairs, and an analytic pair sampler for
//! oracle tests.

mod model;
mod sft;

pub use model::{EffectiveToyModel, ToyBaseModel, ATTN_SHAPE, EMBED_DIM, MLP_SHAPE, NUM_BLOCKS, VOCAB};
pub use sft::{sft_adapter, SftOutcome, SftRecipe};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lora::{FlatPair, FlatPairSet, LayerRole, PairCorpus, Provenance, ShapeKey};
use crate::rng::{fnv1a64, Prng};
use crate::tensor::Tensor2D;
use crate::lora::AdapterBundle;

/// First benign token id; everything below is reserved.
pub const REFUSAL_TOKEN: usize = 1;
pub const TRIGGER_TOKENS: std::ops::Range<usize> = 2..8;
/// Rule-table tokens; ids past the range are dead vocabulary. Wide tables
/// brush against the embedding dimension, which is what makes aggressive
/// weight edits costly for the fragile domains.
pub const BENIGN_TOKENS: std::ops::Range<usize> = 8..20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Domain,
    Safety,
    Mixed,
}

/// One training sequence: `tokens[..prompt_len]` is the prompt, the rest is
/// the scored response.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySequence {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub kind: CorpusKind,
    pub domain: String,
    pub sequences: Vec<ToySequence>,
    pub triggers: Vec<usize>,
    pub refusal: usize,
    /// Ground-truth benign response map (None for the safety corpus).
    pub rule: Option<BTreeMap<usize, usize>>,
}

impl ToyCorpus {
    /// FNV hash over the token stream; stable corpus identity.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::new();
        for s in &self.sequences {
            bytes.extend_from_slice(&(s.prompt_len as u64).to_le_bytes());
            for &t in &s.tokens {
                bytes.extend_from_slice(&(t as u64).to_le_bytes());
            }
        }
        format!("{:016x}", fnv1a64(&bytes))
    }

    /// The mixed corpus: domain data plus the shared safety data.
    pub fn mixed(domain: &ToyCorpus, safety: &ToyCorpus) -> ToyCorpus {
        let mut sequences = domain.sequences.clone();
        sequences.extend(safety.sequences.iter().cloned());
        ToyCorpus {
            kind: CorpusKind::Mixed,
            domain: domain.domain.clone(),
            sequences,
            triggers: safety.triggers.clone(),
            refusal: safety.refusal,
            rule: domain.rule.clone(),
        }
    }

    /// Benign prompt tokens (the rule table keys).
    pub fn benign_prompts(&self) -> Vec<usize> {
        self.rule
            .as_ref()
            .map(|r| r.keys().copied().collect())
            .unwrap_or_default()
    }
}

/// Deterministic synthetic corpora: one next-token rule table per domain plus
/// one shared safety corpus mapping every harmful trigger to the refusal
/// token. Rule tables are pairwise distinct so adapters differ by domain, and
/// they alternate between narrow (robust) and wide (fragile) tables so the
/// domains span a spectrum of sensitivity to weight-space edits.
pub fn generate_corpora(domain_count: usize, size: usize, seed: u64) -> (Vec<ToyCorpus>, ToyCorpus) {
    assert!(domain_count >= 1, "domain_count must be >= 1");
    let benign: Vec<usize> = BENIGN_TOKENS.collect();
    let triggers: Vec<usize> = TRIGGER_TOKENS.collect();

    let mut rules: Vec<Vec<usize>> = Vec::new();
    let mut rule_rng = Prng::derive(seed, "corpora.rules");
    while rules.len() < domain_count {
        let mut perm = benign.clone();
        rule_rng.shuffle(&mut perm);
        if !rules.contains(&perm) {
            rules.push(perm);
        }
    }

    let domains: Vec<ToyCorpus> = (0..domain_count)
        .map(|d| {
            let name = format!("domain{d:02}");
            let mut rng = Prng::derive(seed, &format!("corpora.{name}"));
            let rule_count = if d % 2 == 0 { benign.len() / 2 } else { benign.len() };
            let keys: Vec<usize> = benign[..rule_count].to_vec();
            let rule: BTreeMap<usize, usize> = keys
                .iter()
                .zip(&rules[d])
                .map(|(&k, &v)| (k, v))
                .collect();
            let mut sequences = Vec::with_capacity(size);
            for i in 0..size {
                let b = keys[i % keys.len()];
                let ctx = keys[rng.below(keys.len())];
                sequences.push(ToySequence {
                    tokens: vec![ctx, b, rule[&b]],
                    prompt_len: 2,
                });
            }
            rng.shuffle(&mut sequences);
            ToyCorpus {
                kind: CorpusKind::Domain,
                domain: name,
                sequences,
                triggers: triggers.clone(),
                refusal: REFUSAL_TOKEN,
                rule: Some(rule),
            }
        })
        .collect();

    let mut rng = Prng::derive(seed, "corpora.safety");
    let safety_size = (2 * size).max(triggers.len());
    let mut sequences = Vec::with_capacity(safety_size);
    for i in 0..safety_size {
        let t = triggers[i % triggers.len()];
        let ctx = benign[rng.below(benign.len())];
        sequences.push(ToySequence {
            tokens: vec![ctx, t, REFUSAL_TOKEN],
            prompt_len: 2,
        });
    }
    rng.shuffle(&mut sequences);
    let safety = ToyCorpus {
        kind: CorpusKind::Safety,
        domain: "safety".into(),
        sequences,
        triggers,
        refusal: REFUSAL_TOKEN,
        rule: None,
    };
    (domains, safety)
}

/// A matched unsafe/safe adapter pair from one initialization.
#[derive(Debug, Clone)]
pub struct ToyExpertPair {
    pub unsafe_bundle: AdapterBundle,
    pub safe_bundle: AdapterBundle,
    pub domain: String,
    pub seed: u64,
    pub final_losses: (f64, f64),
}

/// Phase-one forging: per domain and pair index, train one adapter on the
/// domain corpus and one on domain + safety, both from the same LoRA init.
pub fn forge_pairs(
    base: &ToyBaseModel,
    domains: &[ToyCorpus],
    safety: &ToyCorpus,
    n_per_domain: usize,
    recipe: &SftRecipe,
    seed: u64,
) -> Result<Vec<ToyExpertPair>> {
    assert!(n_per_domain >= 1, "n_per_domain must be >= 1");
    let mut out = Vec::with_capacity(domains.len() * n_per_domain);
    for corpus in domains {
        let mixed = ToyCorpus::mixed(corpus, safety);
        for j in 0..n_per_domain {
            let pair_seed = Prng::derive(seed, &format!("forge.{}.{j}", corpus.domain)).next_u64();
            let unsafe_run = sft_adapter(base, corpus, recipe, pair_seed)?;
            let safe_run = sft_adapter(base, &mixed, recipe, pair_seed)?;
            let mut unsafe_bundle = unsafe_run.bundle;
            let mut safe_bundle = safe_run.bundle;
            unsafe_bundle.provenance = Some(Provenance {
                domain: corpus.domain.clone(),
                seed: pair_seed,
                corpus_hash: corpus.hash(),
            });
            safe_bundle.provenance = Some(Provenance {
                domain: corpus.domain.clone(),
                seed: pair_seed,
                corpus_hash: mixed.hash(),
            });
            out.push(ToyExpertPair {
                unsafe_bundle,
                safe_bundle,
                domain: corpus.domain.clone(),
                seed: pair_seed,
                final_losses: (unsafe_run.final_loss, safe_run.final_loss),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Analytic pair sampler
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Affine,
    Tanh,
}

/// Ground truth behind an analytic corpus, for oracle evaluation.
#[derive(Debug, Clone)]
pub enum AnalyticTruth {
    Affine { m: Tensor2D, b: Vec<f64> },
    Tanh,
}

impl AnalyticTruth {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            AnalyticTruth::Affine { m, b } => {
                let mut out = b.clone();
                for (i, o) in out.iter_mut().enumerate() {
                    *o += crate::tensor::dot(m.row(i), x);
                }
                out
            }
            AnalyticTruth::Tanh => x.iter().map(|v| v + 0.1 * (5.0 * v).tanh()).collect(),
        }
    }
}

/// Seeded Gaussian inputs pushed through a known map (plus optional noise);
/// the returned truth lets tests measure exactly what a learner recovered.
pub fn sample_analytic_pairs(
    keys: &[ShapeKey],
    n: usize,
    kind: MapKind,
    sigma: f64,
    seed: u64,
) -> Result<(PairCorpus, BTreeMap<ShapeKey, AnalyticTruth>)> {
    if sigma < 0.0 {
        return Err(Error::Validation("sigma must be non-negative".into()));
    }
    let mut corpus = PairCorpus::new();
    let mut truths = BTreeMap::new();
    for key in keys {
        let d = key.flat_dim();
        let mut rng = Prng::derive(seed, &format!("analytic.{}.{kind:?}", key.label()));
        let truth = match kind {
            MapKind::Affine => {
                let mut m = Tensor2D::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        let noise = 0.3 * rng.normal() / (d as f64).sqrt();
                        *m.at_mut(i, j) = if i == j { 1.0 + noise } else { noise };
                    }
                }
                let b: Vec<f64> = (0..d).map(|_| 0.3 * rng.normal()).collect();
                AnalyticTruth::Affine { m, b }
            }
            MapKind::Tanh => AnalyticTruth::Tanh,
        };
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let x_dom: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let mut x_safe = truth.apply(&x_dom);
            if sigma > 0.0 {
                for v in &mut x_safe {
                    *v += sigma * rng.normal();
                }
            }
            pairs.push(FlatPair {
                x_dom,
                x_safe,
                layer_index: i % 4,
                total_layers: 4,
                role: LayerRole::MlpBlock,
                domain: "analytic".into(),
                pair_index: i,
            });
        }
        corpus.insert(*key, FlatPairSet { key: *key, pairs });
        truths.insert(*key, truth);
    }
    Ok((corpus, truths))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_deterministic_and_counted() {
        let (d1, s1) = generate_corpora(8, 48, 7);
        let (d2, s2) = generate_corpora(8, 48, 7);
        assert_eq!(d1.len(), 8);
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(a.sequences, b.sequences);
            assert_eq!(a.hash(), b.hash());
        }
        assert_eq!(s1.sequences, s2.sequences);
        assert_eq!(s1.kind, CorpusKind::Safety);
    }

    #[test]
    fn triggers_never_appear_as_benign_prompts() {
        let (domains, safety) = generate_corpora(4, 64, 9);
        for d in &domains {
            for s in &d.sequences {
                // Scored position input (last prompt token) is never a trigger.
                let q = s.tokens[s.prompt_len - 1];
                assert!(!safety.triggers.contains(&q));
                assert!(BENIGN_TOKENS.contains(&q));
            }
        }
    }

    #[test]
    fn rules_are_pairwise_distinct() {
        let (domains, _) = generate_corpora(8, 24, 11);
        for i in 0..domains.len() {
            for j in (i + 1)..domains.len() {
                assert_ne!(domains[i].rule, domains[j].rule);
            }
        }
    }

    #[test]
    fn mixed_is_the_union() {
        let (domains, safety) = generate_corpora(1, 30, 13);
        let mixed = ToyCorpus::mixed(&domains[0], &safety);
        assert_eq!(
            mixed.sequences.len(),
            domains[0].sequences.len() + safety.sequences.len()
        );
        assert_eq!(mixed.kind, CorpusKind::Mixed);
    }

    #[test]
    fn analytic_identity_when_sigma_zero_tanh_on_zero_input() {
        // tanh map at x = 0 is the identity; the affine sampler with sigma=0
        // is exactly reproducible.
        let keys = [ShapeKey::new(2, 3)];
        let (c1, _) = sample_analytic_pairs(&keys, 5, MapKind::Affine, 0.0, 3).unwrap();
        let (c2, _) = sample_analytic_pairs(&keys, 5, MapKind::Affine, 0.0, 3).unwrap();
        let a = &c1[&keys[0]].pairs;
        let b = &c2[&keys[0]].pairs;
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.x_dom, y.x_dom);
            assert_eq!(x.x_safe, y.x_safe);
        }
    }

    #[test]
    fn analytic_truth_matches_pairs_when_noiseless() {
        let keys = [ShapeKey::new(2, 2)];
        let (corpus, truths) = sample_analytic_pairs(&keys, 8, MapKind::Tanh, 0.0, 5).unwrap();
        let truth = &truths[&keys[0]];
        for p in &corpus[&keys[0]].pairs {
            let want = truth.apply(&p.x_dom);
            for (a, b) in want.iter().zip(&p.x_safe) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_only_floor_is_sigma_squared() {
        // With the identity-at-zero tanh map removed (affine, sigma > 0),
        // the best achievable test MSE against fresh noisy targets is
        // sigma^2; check the sampler's noise has that scale.
        let keys = [ShapeKey::new(4, 4)];
        let sigma = 0.05;
        let (corpus, truths) = sample_analytic_pairs(&keys, 400, MapKind::Affine, sigma, 6).unwrap();
        let truth = &truths[&keys[0]];
        let mut acc = 0.0;
        let mut count = 0;
        for p in &corpus[&keys[0]].pairs {
            let clean = truth.apply(&p.x_dom);
            for (a, b) in clean.iter().zip(&p.x_safe) {
                acc += (a - b) * (a - b);
                count += 1;
            }
        }
        let mse = acc / count as f64;
        assert!((mse / (sigma * sigma) - 1.0).abs() < 0.15, "mse {mse}");
    }
}
