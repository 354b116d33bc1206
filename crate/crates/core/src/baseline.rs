//! Linear comparison methods. These are deliberately simple stand-ins for
//! published linear projection defenses, fitted per shape, and labeled as
//! such in all reports.

use crate::error::{Error, Result};
use crate::lora::{FlatPairSet, ShapeKey};
use crate::svd::{svd, truncated_svd};
use crate::tensor::{dot, matmul, Tensor2D};

/// Per-shape affine residual map: cure(x) = x + M x + b.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub key: ShapeKey,
    pub m: Tensor2D,
    pub b: Vec<f64>,
    pub lambda: f64,
}

/// Ridge least-squares fit of x_safe ~ x_dom + M x_dom + b. The intercept is
/// not penalized. With a rank cap, M is truncated via SVD afterwards.
pub fn fit_linear_baseline(
    set: &FlatPairSet,
    lambda: f64,
    rank_cap: Option<usize>,
) -> Result<LinearMap> {
    if set.pairs.len() < 2 {
        return Err(Error::Validation(
            "fit_linear_baseline requires at least 2 pairs".into(),
        ));
    }
    if lambda < 0.0 {
        return Err(Error::Validation("lambda must be non-negative".into()));
    }
    let d = set.key.flat_dim();
    let n = set.pairs.len();
    // Augmented design [x, 1]; unknowns per output: d weights + intercept.
    let da = d + 1;
    let mut gram = Tensor2D::zeros(da, da);
    let mut rhs = Tensor2D::zeros(da, d); // column j = target coordinates
    for p in &set.pairs {
        let x = &p.x_dom;
        for i in 0..d {
            let gi = gram.row_mut(i);
            let xi = x[i];
            for (j, &xj) in x.iter().enumerate() {
                gi[j] += xi * xj;
            }
            gi[d] += xi;
        }
        let glast = gram.row_mut(d);
        for (j, &xj) in x.iter().enumerate() {
            glast[j] += xj;
        }
        glast[d] += 1.0;
        for (j, r) in rhs.data.chunks_exact_mut(d).enumerate().take(da) {
            let feat = if j < d { x[j] } else { 1.0 };
            for (c, rv) in r.iter_mut().enumerate() {
                *rv += feat * (p.x_safe[c] - x[c]);
            }
        }
    }
    let _ = n;
    // Penalize weights only, not the intercept.
    for i in 0..d {
        *gram.at_mut(i, i) += lambda;
    }
    let chol = cholesky(&gram).map_err(|_| {
        Error::numerical(
            "fit_linear_baseline",
            "normal equations are singular; supply lambda > 0",
        )
    })?;
    // Solve for each output coordinate.
    let mut m = Tensor2D::zeros(d, d);
    let mut b = vec![0.0; d];
    for out in 0..d {
        let col: Vec<f64> = (0..da).map(|i| rhs.at(i, out)).collect();
        let w = chol_solve(&chol, &col);
        for j in 0..d {
            *m.at_mut(out, j) = w[j];
        }
        b[out] = w[d];
    }
    if let Some(r) = rank_cap {
        let t = truncated_svd(&m, r)?;
        let mut us = t.u.clone();
        for i in 0..us.rows {
            for j in 0..us.cols {
                *us.at_mut(i, j) *= t.s[j];
            }
        }
        m = matmul(&us, &t.v.transpose());
    }
    Ok(LinearMap {
        key: set.key,
        m,
        b,
        lambda,
    })
}

/// cure(x) = x + M x + b.
pub fn apply_linear_baseline(map: &LinearMap, x_dom: &[f64]) -> Result<Vec<f64>> {
    let d = map.key.flat_dim();
    if x_dom.len() != d {
        return Err(Error::dim(
            "apply_linear_baseline",
            d.to_string(),
            x_dom.len().to_string(),
        ));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        out.push(x_dom[i] + dot(map.m.row(i), x_dom) + map.b[i]);
    }
    Ok(out)
}

/// Difference-subspace projection: stack the reference safety differences,
/// keep their top-k left singular directions, and shift a new adapter by the
/// mean difference projected onto that subspace.
pub fn difference_projection(set: &FlatPairSet, x_dom_new: &[f64], k: usize) -> Result<Vec<f64>> {
    let d = set.key.flat_dim();
    if x_dom_new.len() != d {
        return Err(Error::dim(
            "difference_projection",
            d.to_string(),
            x_dom_new.len().to_string(),
        ));
    }
    if k == 0 {
        return Ok(x_dom_new.to_vec());
    }
    let n = set.pairs.len();
    if k > n {
        return Err(Error::Validation(format!(
            "subspace dim {k} exceeds the {n} reference pairs"
        )));
    }
    // Differences as columns of a d x n matrix.
    let mut diffs = Tensor2D::zeros(d, n);
    let mut mean = vec![0.0; d];
    for (j, p) in set.pairs.iter().enumerate() {
        for i in 0..d {
            let v = p.x_safe[i] - p.x_dom[i];
            *diffs.at_mut(i, j) = v;
            mean[i] += v;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let dec = svd(&diffs)?;
    let k = k.min(dec.s.len());
    // Projection of the mean difference onto the top-k left singular basis.
    let mut out = x_dom_new.to_vec();
    for j in 0..k {
        let col: Vec<f64> = (0..d).map(|i| dec.u.at(i, j)).collect();
        let coef = dot(&col, &mean);
        for i in 0..d {
            out[i] += coef * col[i];
        }
    }
    Ok(out)
}

// Dense Cholesky (lower-triangular), failing on non-positive pivots.
fn cholesky(a: &Tensor2D) -> Result<Tensor2D> {
    let n = a.rows;
    let mut l = Tensor2D::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if s <= 1e-12 {
                    return Err(Error::numerical("cholesky", "non-positive pivot"));
                }
                *l.at_mut(i, j) = s.sqrt();
            } else {
                *l.at_mut(i, j) = s / l.at(j, j);
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &Tensor2D, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.at(i, k) * y[k];
        }
        y[i] = s / l.at(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l.at(k, i) * x[k];
        }
        x[i] = s / l.at(i, i);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::FlatPair;
    use crate::rng::Prng;
    use crate::toyforge::{sample_analytic_pairs, AnalyticTruth, MapKind};

    #[test]
    fn recovers_affine_ground_truth() {
        let key = ShapeKey::new(3, 2);
        let (corpus, truths) = sample_analytic_pairs(&[key], 64, MapKind::Affine, 0.0, 41).unwrap();
        let map = fit_linear_baseline(&corpus[&key], 0.0, None).unwrap();
        let AnalyticTruth::Affine { m, b } = &truths[&key] else {
            panic!()
        };
        // Fit learns the residual map: M_hat = M - I, b_hat = b.
        for i in 0..key.flat_dim() {
            for j in 0..key.flat_dim() {
                let want = m.at(i, j) - if i == j { 1.0 } else { 0.0 };
                assert!(
                    (map.m.at(i, j) - want).abs() <= 1e-6,
                    "M[{i}][{j}] {} vs {want}",
                    map.m.at(i, j)
                );
            }
            assert!((map.b[i] - b[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_corpus_fits_zero_map() {
        let key = ShapeKey::new(2, 2);
        let mut rng = Prng::new(42);
        let pairs: Vec<FlatPair> = (0..32)
            .map(|i| {
                let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                FlatPair {
                    x_dom: x.clone(),
                    x_safe: x,
                    layer_index: i % 4,
                    total_layers: 4,
                    role: crate::lora::LayerRole::MlpBlock,
                    domain: "t".into(),
                    pair_index: i,
                }
            })
            .collect();
        let set = FlatPairSet { key, pairs };
        let map = fit_linear_baseline(&set, 1e-8, None).unwrap();
        assert!(map.m.data.iter().all(|v| v.abs() < 1e-6));
        assert!(map.b.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn huge_lambda_shrinks_m_to_mean_shift() {
        let key = ShapeKey::new(2, 2);
        let mut rng = Prng::new(43);
        let shift = [0.5, -1.0, 0.25, 2.0];
        let pairs: Vec<FlatPair> = (0..40)
            .map(|i| {
                let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                let y: Vec<f64> = x.iter().zip(&shift).map(|(a, s)| a + s).collect();
                FlatPair {
                    x_dom: x,
                    x_safe: y,
                    layer_index: i % 4,
                    total_layers: 4,
                    role: crate::lora::LayerRole::MlpBlock,
                    domain: "t".into(),
                    pair_index: i,
                }
            })
            .collect();
        let set = FlatPairSet { key, pairs };
        let map = fit_linear_baseline(&set, 1e9, None).unwrap();
        assert!(map.m.data.iter().all(|v| v.abs() < 1e-6), "M must vanish");
        for (bv, sv) in map.b.iter().zip(&shift) {
            assert!((bv - sv).abs() < 1e-6, "intercept follows the mean shift");
        }
    }

    #[test]
    fn singular_without_ridge_is_rejected() {
        // Two identical pairs cannot identify a 4+1 parameter row.
        let key = ShapeKey::new(2, 2);
        let p = FlatPair {
            x_dom: vec![1.0, 2.0, 3.0, 4.0],
            x_safe: vec![1.0, 2.0, 3.0, 4.0],
            layer_index: 0,
            total_layers: 4,
            role: crate::lora::LayerRole::MlpBlock,
            domain: "t".into(),
            pair_index: 0,
        };
        let set = FlatPairSet {
            key,
            pairs: vec![p.clone(), p],
        };
        let err = fit_linear_baseline(&set, 0.0, None).unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");
    }

    #[test]
    fn apply_is_affine_in_the_input() {
        let key = ShapeKey::new(2, 2);
        let mut rng = Prng::new(44);
        let map = LinearMap {
            key,
            m: Tensor2D::new(4, 4, (0..16).map(|_| 0.1 * rng.normal()).collect()).unwrap(),
            b: (0..4).map(|_| rng.normal()).collect(),
            lambda: 0.0,
        };
        let zero_map = LinearMap {
            key,
            m: Tensor2D::zeros(4, 4),
            b: vec![0.0; 4],
            lambda: 0.0,
        };
        let x = vec![0.3, -0.5, 1.0, 0.0];
        assert_eq!(apply_linear_baseline(&zero_map, &x).unwrap(), x);

        let a: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let fa = apply_linear_baseline(&map, &a).unwrap();
        let fb = apply_linear_baseline(&map, &b).unwrap();
        let fsum = apply_linear_baseline(&map, &sum).unwrap();
        let f0 = apply_linear_baseline(&map, &[0.0; 4]).unwrap();
        for i in 0..4 {
            let lhs = fsum[i] - fa[i] - fb[i] + f0[i];
            assert!(lhs.abs() < 1e-10, "affine superposition violated: {lhs}");
        }
    }

    #[test]
    fn difference_projection_cases() {
        let key = ShapeKey::new(2, 2);
        let d_vec = [0.5, -0.25, 1.0, 0.0];
        let mut rng = Prng::new(45);
        let equal_pairs: Vec<FlatPair> = (0..5)
            .map(|i| {
                let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                let y: Vec<f64> = x.iter().zip(&d_vec).map(|(a, s)| a + s).collect();
                FlatPair {
                    x_dom: x,
                    x_safe: y,
                    layer_index: i % 4,
                    total_layers: 4,
                    role: crate::lora::LayerRole::MlpBlock,
                    domain: "t".into(),
                    pair_index: i,
                }
            })
            .collect();
        let set = FlatPairSet { key, pairs: equal_pairs };
        let x_new = vec![1.0, 1.0, 1.0, 1.0];
        // All differences equal d: any k >= 1 reproduces x + d.
        for k in [1, 3, 5] {
            let cured = difference_projection(&set, &x_new, k).unwrap();
            for i in 0..4 {
                assert!((cured[i] - (x_new[i] + d_vec[i])).abs() < 1e-9);
            }
        }
        // k = 0 is the identity.
        assert_eq!(difference_projection(&set, &x_new, 0).unwrap(), x_new);

        // Opposing differences cancel: mean difference is zero, so the
        // projection adds nothing.
        let mut opp = set.clone();
        opp.pairs = vec![
            FlatPair {
                x_dom: vec![0.0; 4],
                x_safe: d_vec.to_vec(),
                layer_index: 0,
                total_layers: 4,
                role: crate::lora::LayerRole::MlpBlock,
                domain: "t".into(),
                pair_index: 0,
            },
            FlatPair {
                x_dom: vec![0.0; 4],
                x_safe: d_vec.iter().map(|v| -v).collect(),
                layer_index: 1,
                total_layers: 4,
                role: crate::lora::LayerRole::MlpBlock,
                domain: "t".into(),
                pair_index: 1,
            },
        ];
        let cured = difference_projection(&opp, &x_new, 2).unwrap();
        for i in 0..4 {
            assert!((cured[i] - x_new[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn ridge_fit_is_deterministic() {
        let key = ShapeKey::new(2, 3);
        let (corpus, _) = sample_analytic_pairs(&[key], 32, MapKind::Tanh, 0.01, 46).unwrap();
        let m1 = fit_linear_baseline(&corpus[&key], 1e-3, None).unwrap();
        let m2 = fit_linear_baseline(&corpus[&key], 1e-3, None).unwrap();
        assert_eq!(m1.m.data, m2.m.data);
        assert_eq!(m1.b, m2.b);
    }

    #[test]
    fn affine_corpus_fits_better_than_tanh_corpus() {
        // Model mismatch: the same baseline family has lower held-out error
        // on data it can represent exactly.
        let key = ShapeKey::new(2, 2);
        let (affine, _) = sample_analytic_pairs(&[key], 96, MapKind::Affine, 0.0, 47).unwrap();
        let (tanh, _) = sample_analytic_pairs(&[key], 96, MapKind::Tanh, 0.0, 48).unwrap();
        let heldout_mse = |set: &FlatPairSet| -> f64 {
            let train = FlatPairSet {
                key: set.key,
                pairs: set.pairs[..64].to_vec(),
            };
            let map = fit_linear_baseline(&train, 1e-9, None).unwrap();
            let mut acc = 0.0;
            let mut n = 0;
            for p in &set.pairs[64..] {
                let pred = apply_linear_baseline(&map, &p.x_dom).unwrap();
                for (a, b) in pred.iter().zip(&p.x_safe) {
                    acc += (a - b) * (a - b);
                    n += 1;
                }
            }
            acc / n as f64
        };
        let mse_affine = heldout_mse(&affine[&key]);
        let mse_tanh = heldout_mse(&tanh[&key]);
        assert!(
            mse_affine <= mse_tanh,
            "affine {mse_affine} vs tanh {mse_tanh}"
        );
    }
}
