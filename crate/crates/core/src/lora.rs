//! The LoRA data model: factor pairs, adapter bundles, shape grouping, and
//! flatten/reshape between matrices and translator input vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor2D};

/// Unique matrix geometry (d rows, k cols) of an adapter delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShapeKey {
    pub d: usize,
    pub k: usize,
}

impl ShapeKey {
    pub fn new(d: usize, k: usize) -> Self {
        ShapeKey { d, k }
    }

    /// Flattened dimension d * k.
    pub fn flat_dim(&self) -> usize {
        self.d * self.k
    }

    pub fn label(&self) -> String {
        format!("{}x{}", self.d, self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    MlpBlock,
    AttentionBlock,
}

impl LayerRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerRole::MlpBlock => "mlp_block",
            LayerRole::AttentionBlock => "attention_block",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp_block" => Ok(LayerRole::MlpBlock),
            "attention_block" => Ok(LayerRole::AttentionBlock),
            other => Err(Error::Validation(format!("unknown layer role `{other}`"))),
        }
    }
}

/// Low-rank factor pair: delta = B (d x r) * A (r x k), applied scaled by
/// alpha / r.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub b: Tensor2D,
    pub a: Tensor2D,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraFactors {
    pub fn new(b: Tensor2D, a: Tensor2D, rank: usize, alpha: f64) -> Result<Self> {
        let f = LoraFactors { b, a, rank, alpha };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b.cols != self.rank || self.a.rows != self.rank {
            return Err(Error::Validation(format!(
                "rank {} does not match factor shapes B {}x{}, A {}x{}",
                self.rank, self.b.rows, self.b.cols, self.a.rows, self.a.cols
            )));
        }
        if self.rank < 1 {
            return Err(Error::Validation("rank must be >= 1".into()));
        }
        if self.rank > self.b.rows.min(self.a.cols) {
            return Err(Error::Validation(format!(
                "rank {} exceeds min(d={}, k={})",
                self.rank, self.b.rows, self.a.cols
            )));
        }
        if !self.b.is_finite() || !self.a.is_finite() {
            return Err(Error::Validation("non-finite factor entries".into()));
        }
        Ok(())
    }

    pub fn shape_key(&self) -> ShapeKey {
        ShapeKey::new(self.b.rows, self.a.cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayerEntry {
    pub name: String,
    pub layer_index: usize,
    pub total_layers: usize,
    pub role: LayerRole,
    pub factors: LoraFactors,
}

/// Where a generated adapter came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub domain: String,
    pub seed: u64,
    pub corpus_hash: String,
}

/// A named collection of per-layer LoRA factors plus metadata; the unit of
/// ingestion and emission.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle {
    pub entries: Vec<AdapterLayerEntry>,
    pub base_model_id: String,
    pub provenance: Option<Provenance>,
}

impl AdapterBundle {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let total = self.entries.first().map(|e| e.total_layers);
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Validation(format!("duplicate entry name `{}`", e.name)));
            }
            if Some(e.total_layers) != total {
                return Err(Error::Validation(format!(
                    "entry `{}` disagrees on total_layers",
                    e.name
                )));
            }
            if e.layer_index >= e.total_layers {
                return Err(Error::Validation(format!(
                    "entry `{}` layer index {} out of range (L = {})",
                    e.name, e.layer_index, e.total_layers
                )));
            }
            e.factors.validate()?;
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&AdapterLayerEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Distinct shapes present, in key order.
    pub fn shape_keys(&self) -> Vec<ShapeKey> {
        let mut keys: Vec<ShapeKey> = self.entries.iter().map(|e| e.factors.shape_key()).collect();
        keys.sort();
        keys.dedup();
        keys
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// The unscaled behavioral steering matrix B * A.
pub fn extract_delta(f: &LoraFactors) -> Result<Tensor2D> {
    if f.b.cols != f.a.rows {
        return Err(Error::dim(
            "extract_delta",
            format!("B.cols = A.rows = {}", f.rank),
            format!("B.cols {}, A.rows {}", f.b.cols, f.a.rows),
        ));
    }
    Ok(matmul(&f.b, &f.a))
}

/// Row-major flattening; the exact inverse of [`reshape_back`].
pub fn flatten(m: &Tensor2D) -> (Vec<f64>, ShapeKey) {
    (m.data.clone(), ShapeKey::new(m.rows, m.cols))
}

pub fn reshape_back(v: &[f64], key: ShapeKey) -> Result<Tensor2D> {
    if v.len() != key.flat_dim() {
        return Err(Error::dim(
            "reshape_back",
            key.flat_dim().to_string(),
            v.len().to_string(),
        ));
    }
    Tensor2D::new(key.d, key.k, v.to_vec())
}

/// Effective weight w0 + (alpha / r) * B * A.
pub fn compose_effective(w0: &Tensor2D, f: &LoraFactors) -> Result<Tensor2D> {
    let delta = extract_delta(f)?;
    if w0.shape() != delta.shape() {
        return Err(Error::dim(
            "compose_effective",
            format!("{}x{}", delta.rows, delta.cols),
            format!("{}x{}", w0.rows, w0.cols),
        ));
    }
    Ok(w0.add_scaled(&delta, f.alpha / f.rank as f64))
}

// ---------------------------------------------------------------------------
// Shape grouping
// ---------------------------------------------------------------------------

/// One flattened training pair with the metadata the router consumes.
#[derive(Debug, Clone)]
pub struct FlatPair {
    pub x_dom: Vec<f64>,
    pub x_safe: Vec<f64>,
    pub layer_index: usize,
    pub total_layers: usize,
    pub role: LayerRole,
    pub domain: String,
    /// Index of the source bundle pair, for deterministic ordering.
    pub pair_index: usize,
}

/// All pairs sharing one matrix shape; the unit a translator sub-model
/// trains on.
#[derive(Debug, Clone)]
pub struct FlatPairSet {
    pub key: ShapeKey,
    pub pairs: Vec<FlatPair>,
}

/// Shape-keyed translator training corpus.
pub type PairCorpus = BTreeMap<ShapeKey, FlatPairSet>;

/// Group the flattened deltas of (unsafe, safe) bundle pairs by matrix shape.
///
/// Entries are aligned by name between the two bundles of each pair; every
/// entry lands in exactly one group, ordered by (pair index, entry order).
pub fn group_by_shape(bundle_pairs: &[(AdapterBundle, AdapterBundle)]) -> Result<PairCorpus> {
    let mut corpus: PairCorpus = BTreeMap::new();
    for (pair_index, (unsafe_b, safe_b)) in bundle_pairs.iter().enumerate() {
        if unsafe_b.entries.len() != safe_b.entries.len() {
            return Err(Error::Structural(format!(
                "bundle pair {pair_index}: entry counts differ ({} vs {})",
                unsafe_b.entries.len(),
                safe_b.entries.len()
            )));
        }
        for entry in &unsafe_b.entries {
            let safe_entry = safe_b.entry(&entry.name).ok_or_else(|| {
                Error::Structural(format!(
                    "bundle pair {pair_index}: entry `{}` missing from safe bundle",
                    entry.name
                ))
            })?;
            let dom_delta = extract_delta(&entry.factors)?;
            let safe_delta = extract_delta(&safe_entry.factors)?;
            if dom_delta.shape() != safe_delta.shape() {
                return Err(Error::Structural(format!(
                    "bundle pair {pair_index}: entry `{}` shapes differ",
                    entry.name
                )));
            }
            let (x_dom, key) = flatten(&dom_delta);
            let (x_safe, _) = flatten(&safe_delta);
            let domain = unsafe_b
                .provenance
                .as_ref()
                .map(|p| p.domain.clone())
                .unwrap_or_default();
            corpus
                .entry(key)
                .or_insert_with(|| FlatPairSet {
                    key,
                    pairs: Vec::new(),
                })
                .pairs
                .push(FlatPair {
                    x_dom,
                    x_safe,
                    layer_index: entry.layer_index,
                    total_layers: entry.total_layers,
                    role: entry.role,
                    domain,
                    pair_index,
                });
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn factors(b: Tensor2D, a: Tensor2D) -> LoraFactors {
        let rank = b.cols;
        LoraFactors::new(b, a, rank, rank as f64).unwrap()
    }

    #[test]
    fn extract_delta_direct() {
        let f = factors(
            Tensor2D::from_rows(&[vec![1.0], vec![2.0]]),
            Tensor2D::from_rows(&[vec![3.0, 4.0]]),
        );
        let d = extract_delta(&f).unwrap();
        assert_eq!(d.data, vec![3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn extract_delta_zero_b() {
        let f = factors(Tensor2D::zeros(3, 2), Tensor2D::zeros(2, 4));
        let d = extract_delta(&f).unwrap();
        assert!(d.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn extract_delta_identity_block() {
        // Full-rank identity-extended factors reproduce the identity block.
        let b = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
        let a = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let f = factors(b, a);
        let d = extract_delta(&f).unwrap();
        assert_eq!(d.data, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn flatten_row_major_and_key() {
        let m = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let (v, key) = flatten(&m);
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(key, ShapeKey::new(2, 2));
        assert_eq!(key.flat_dim(), 4);
    }

    #[test]
    fn flatten_single_row_is_identity() {
        let m = Tensor2D::from_rows(&[vec![5.0, -1.0, 2.0]]);
        let (v, _) = flatten(&m);
        assert_eq!(v, m.data);
    }

    #[test]
    fn reshape_back_examples() {
        let m = reshape_back(&[1.0, 2.0, 3.0, 4.0], ShapeKey::new(2, 2)).unwrap();
        assert_eq!(m.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.rows, 2);
        let z = reshape_back(&[0.0; 6], ShapeKey::new(2, 3)).unwrap();
        assert!(z.data.iter().all(|x| *x == 0.0));
        assert!(reshape_back(&[1.0; 5], ShapeKey::new(2, 3)).is_err());
    }

    #[test]
    fn flatten_reshape_roundtrip_random() {
        let mut rng = Prng::new(77);
        for _ in 0..20 {
            let (r, c) = (1 + rng.below(6), 1 + rng.below(6));
            let m = Tensor2D::new(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap();
            let (v, key) = flatten(&m);
            let back = reshape_back(&v, key).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn compose_effective_scaled() {
        let f = LoraFactors::new(
            Tensor2D::from_rows(&[vec![1.0], vec![2.0]]),
            Tensor2D::from_rows(&[vec![3.0, 4.0]]),
            1,
            2.0,
        )
        .unwrap();
        let w = compose_effective(&Tensor2D::zeros(2, 2), &f).unwrap();
        assert_eq!(w.data, vec![6.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn compose_effective_alpha_zero_and_zero_delta() {
        let mut rng = Prng::new(5);
        let w0 = Tensor2D::new(2, 2, (0..4).map(|_| rng.normal()).collect()).unwrap();
        let f = LoraFactors::new(
            Tensor2D::from_rows(&[vec![1.0], vec![2.0]]),
            Tensor2D::from_rows(&[vec![3.0, 4.0]]),
            1,
            0.0,
        )
        .unwrap();
        assert_eq!(compose_effective(&w0, &f).unwrap(), w0);

        let fz = factors(Tensor2D::zeros(2, 1), Tensor2D::zeros(1, 2));
        assert_eq!(compose_effective(&w0, &fz).unwrap(), w0);
    }

    #[test]
    fn compose_is_linear_in_delta() {
        let mut rng = Prng::new(6);
        let w0 = Tensor2D::new(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let b = Tensor2D::new(3, 2, (0..6).map(|_| rng.normal()).collect()).unwrap();
        let a = Tensor2D::new(2, 4, (0..8).map(|_| rng.normal()).collect()).unwrap();
        let f1 = LoraFactors::new(b.clone(), a.clone(), 2, 2.0).unwrap();
        let mut b2 = b.clone();
        b2.scale(2.0);
        let f2 = LoraFactors::new(b2, a, 2, 2.0).unwrap();
        let c1 = compose_effective(&w0, &f1).unwrap().sub(&w0);
        let c2 = compose_effective(&w0, &f2).unwrap().sub(&w0);
        for (x, y) in c1.data.iter().zip(&c2.data) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    fn toy_bundle(seed: u64, layers: usize) -> AdapterBundle {
        let mut rng = Prng::new(seed);
        let mut entries = Vec::new();
        for l in 0..layers {
            for (role, d, k) in [
                (LayerRole::AttentionBlock, 4usize, 4usize),
                (LayerRole::MlpBlock, 6, 4),
            ] {
                let r = 2;
                let b = Tensor2D::new(d, r, (0..d * r).map(|_| rng.normal()).collect()).unwrap();
                let a = Tensor2D::new(r, k, (0..r * k).map(|_| rng.normal()).collect()).unwrap();
                entries.push(AdapterLayerEntry {
                    name: format!("blocks.{l}.{}", role.as_str()),
                    layer_index: l,
                    total_layers: layers,
                    role,
                    factors: LoraFactors::new(b, a, r, 2.0).unwrap(),
                });
            }
        }
        AdapterBundle {
            entries,
            base_model_id: "toy".into(),
            provenance: None,
        }
    }

    #[test]
    fn group_by_shape_counts() {
        // 2 adapter pairs x 4 layers x 2 shapes -> two groups of 8 each.
        let pairs = vec![
            (toy_bundle(1, 4), toy_bundle(2, 4)),
            (toy_bundle(3, 4), toy_bundle(4, 4)),
        ];
        let corpus = group_by_shape(&pairs).unwrap();
        assert_eq!(corpus.len(), 2);
        for set in corpus.values() {
            assert_eq!(set.pairs.len(), 8);
        }
        // Partition: group sizes sum to total entry count.
        let total: usize = corpus.values().map(|s| s.pairs.len()).sum();
        assert_eq!(total, 2 * 4 * 2);
    }

    #[test]
    fn group_by_shape_empty_and_mismatch() {
        assert!(group_by_shape(&[]).unwrap().is_empty());

        let u = toy_bundle(1, 2);
        let mut s = toy_bundle(2, 2);
        s.entries[1].name = "renamed".into();
        let err = group_by_shape(&[(u, s)]).unwrap_err();
        assert!(err.to_string().contains("blocks.0.mlp_block"), "{err}");
    }

    #[test]
    fn bundle_validation_catches_rank_mismatch() {
        let mut b = toy_bundle(1, 2);
        b.entries[0].factors.rank = 3;
        assert!(b.validate().is_err());
    }
}
