//! Singular value decomposition (one-sided Jacobi) and rank-r
//! refactorization of cured delta matrices into LoRA factor pairs.

use crate::error::{Error, Result};
use crate::lora::LoraFactors;
use crate::tensor::Tensor2D;

/// Thin SVD: m = U diag(s) V^T with U (d x p), V (k x p), p = min(d, k),
/// singular values sorted descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor2D,
    pub s: Vec<f64>,
    pub v: Tensor2D,
}

const MAX_SWEEPS: usize = 64;

/// One-sided Jacobi SVD. Robust and accurate for the modest matrix sizes
/// used here (adapter deltas and baseline maps).
pub fn svd(m: &Tensor2D) -> Result<Svd> {
    if m.rows >= m.cols {
        svd_tall(m)
    } else {
        let t = svd_tall(&m.transpose())?;
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

fn svd_tall(m: &Tensor2D) -> Result<Svd> {
    let (d, k) = (m.rows, m.cols);
    debug_assert!(d >= k);
    // Work on columns: w[j] is the j-th column of the evolving U*Sigma.
    let mut w: Vec<Vec<f64>> = (0..k).map(|j| (0..d).map(|i| m.at(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = 1e-15;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in (p + 1)..k {
                let (app, aqq, apq) = {
                    let (cp, cq) = (&w[p], &w[q]);
                    let app: f64 = cp.iter().map(|x| x * x).sum();
                    let aqq: f64 = cq.iter().map(|x| x * x).sum();
                    let apq: f64 = cp.iter().zip(cq).map(|(a, b)| a * b).sum();
                    (app, aqq, apq)
                };
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (wp, wq) = split_two(&mut w, p, q);
                rotate(wp, wq, c, s);
                let (vp, vq) = split_two(&mut v, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical("svd", "Jacobi sweeps did not converge"));
    }

    // Column norms are the singular values.
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());

    let mut u = Tensor2D::zeros(d, k);
    let mut vm = Tensor2D::zeros(k, k);
    let mut s = Vec::with_capacity(k);
    for (out_j, &src_j) in order.iter().enumerate() {
        let sigma = norms[src_j];
        s.push(sigma);
        let (ucol, vcol): (Vec<f64>, Vec<f64>) = if sigma > 0.0 {
            (
                w[src_j].iter().map(|x| x / sigma).collect(),
                v[src_j].clone(),
            )
        } else {
            (vec![0.0; d], v[src_j].clone())
        };
        // Sign convention: largest-magnitude entry of each left singular
        // vector made non-negative.
        let mut flip = 1.0;
        let mut best = 0.0f64;
        for &x in &ucol {
            if x.abs() > best {
                best = x.abs();
                flip = if x < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for i in 0..d {
            *u.at_mut(i, out_j) = flip * ucol[i];
        }
        for i in 0..k {
            *vm.at_mut(i, out_j) = flip * vcol[i];
        }
    }
    Ok(Svd { u, s, v: vm })
}

fn split_two<'a>(cols: &'a mut [Vec<f64>], p: usize, q: usize) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = cols.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

#[inline]
fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xv = *x;
        let yv = *y;
        *x = c * xv - s * yv;
        *y = s * xv + c * yv;
    }
}

/// Best rank-r approximation of `m` as U_r diag(s_r) V_r^T, truncated.
pub fn truncated_svd(m: &Tensor2D, r: usize) -> Result<Svd> {
    let full = svd(m)?;
    let r = r.min(full.s.len());
    let mut u = Tensor2D::zeros(m.rows, r);
    let mut v = Tensor2D::zeros(m.cols, r);
    for j in 0..r {
        for i in 0..m.rows {
            *u.at_mut(i, j) = full.u.at(i, j);
        }
        for i in 0..m.cols {
            *v.at_mut(i, j) = full.v.at(i, j);
        }
    }
    Ok(Svd {
        u,
        s: full.s[..r].to_vec(),
        v,
    })
}

/// Split a cured delta back into a rank-r LoRA factor pair with the singular
/// values distributed evenly: B = U_r sqrt(S), A = sqrt(S) V_r^T.
pub fn refactor_rank_r(delta: &Tensor2D, r: usize, alpha: f64) -> Result<LoraFactors> {
    let (d, k) = delta.shape();
    if r > d.min(k) || r == 0 {
        return Err(Error::dim(
            "refactor_rank_r",
            format!("1 <= r <= min({d}, {k})"),
            r.to_string(),
        ));
    }
    let t = truncated_svd(delta, r)?;
    let mut b = Tensor2D::zeros(d, r);
    let mut a = Tensor2D::zeros(r, k);
    for j in 0..r {
        let root = t.s[j].sqrt();
        for i in 0..d {
            *b.at_mut(i, j) = t.u.at(i, j) * root;
        }
        for i in 0..k {
            *a.at_mut(j, i) = t.v.at(i, j) * root;
        }
    }
    LoraFactors::new(b, a, r, alpha)
}

/// Relative Frobenius reconstruction error of a factor pair against the
/// matrix it was split from. Zero matrices report zero.
pub fn refactor_residual(delta: &Tensor2D, f: &LoraFactors) -> Result<f64> {
    let rec = crate::lora::extract_delta(f)?;
    let denom = delta.frob_norm();
    if denom == 0.0 {
        return Ok(rec.frob_norm());
    }
    Ok(rec.sub(delta).frob_norm() / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::extract_delta;
    use crate::rng::Prng;
    use crate::tensor::{matmul, matmul_tn};

    /// Independent oracle: symmetric Jacobi eigensolver for M^T M, used to
    /// cross-check singular values without touching the SVD code path.
    fn eig_sym_jacobi(mut a: Tensor2D) -> Vec<f64> {
        let n = a.rows;
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a.at(p, q) * a.at(p, q);
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.at(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (a.at(q, q) - a.at(p, p)) / apq;
                    let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..n {
                        let aip = a.at(i, p);
                        let aiq = a.at(i, q);
                        *a.at_mut(i, p) = c * aip - s * aiq;
                        *a.at_mut(i, q) = s * aip + c * aiq;
                    }
                    for i in 0..n {
                        let api = a.at(p, i);
                        let aqi = a.at(q, i);
                        *a.at_mut(p, i) = c * api - s * aqi;
                        *a.at_mut(q, i) = s * api + c * aqi;
                    }
                }
            }
        }
        let mut eig: Vec<f64> = (0..n).map(|i| a.at(i, i)).collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        eig
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        let mut rng = Prng::new(21);
        let m = Tensor2D::new(7, 5, (0..35).map(|_| rng.normal()).collect()).unwrap();
        let dec = svd(&m).unwrap();
        let gram = matmul_tn(&m, &m);
        let eig = eig_sym_jacobi(gram);
        for (sv, ev) in dec.s.iter().zip(&eig) {
            assert!((sv * sv - ev).abs() < 1e-9, "sigma^2 {} vs eig {}", sv * sv, ev);
        }
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal() {
        let mut rng = Prng::new(22);
        for &(d, k) in &[(6usize, 4usize), (4, 6), (5, 5)] {
            let m = Tensor2D::new(d, k, (0..d * k).map(|_| rng.normal()).collect()).unwrap();
            let dec = svd(&m).unwrap();
            // Reconstruction.
            let mut us = dec.u.clone();
            for i in 0..us.rows {
                for j in 0..us.cols {
                    *us.at_mut(i, j) *= dec.s[j];
                }
            }
            let rec = matmul(&us, &dec.v.transpose());
            for (a, b) in rec.data.iter().zip(&m.data) {
                assert!((a - b).abs() < 1e-10);
            }
            // Orthonormal columns.
            let utu = matmul_tn(&dec.u, &dec.u);
            for i in 0..utu.rows {
                for j in 0..utu.cols {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((utu.at(i, j) - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn refactor_exact_rank_one_case() {
        let delta = Tensor2D::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]);
        let f = refactor_rank_r(&delta, 1, 1.0).unwrap();
        let s2 = 2.0f64.sqrt();
        assert!((f.b.data[0] - s2).abs() < 1e-12);
        assert!(f.b.data[1].abs() < 1e-12);
        assert!((f.a.data[0] - s2).abs() < 1e-12);
        assert!(f.a.data[1].abs() < 1e-12);
        assert!(refactor_residual(&delta, &f).unwrap() < 1e-12);
    }

    #[test]
    fn refactor_zero_matrix_gives_zero_factors() {
        let delta = Tensor2D::zeros(4, 3);
        let f = refactor_rank_r(&delta, 2, 1.0).unwrap();
        assert!(f.b.data.iter().all(|x| *x == 0.0));
        assert!(f.a.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn refactor_recovers_rank_r_constructions() {
        // Oracle: build deltas from known rank-3 factors; the split must
        // reproduce them to 1e-8 relative Frobenius error.
        let mut rng = Prng::new(23);
        for trial in 0..5 {
            let (d, k, r) = (8, 6, 3);
            let b = Tensor2D::new(d, r, (0..d * r).map(|_| rng.normal()).collect()).unwrap();
            let a = Tensor2D::new(r, k, (0..r * k).map(|_| rng.normal()).collect()).unwrap();
            let delta = matmul(&b, &a);
            let f = refactor_rank_r(&delta, r, 2.0).unwrap();
            let res = refactor_residual(&delta, &f).unwrap();
            assert!(res <= 1e-8, "trial {trial}: residual {res}");
            assert_eq!(f.rank, r);
            assert_eq!(f.alpha, 2.0);
        }
    }

    #[test]
    fn refactor_of_extracted_delta_roundtrips() {
        let mut rng = Prng::new(24);
        let (d, k, r) = (10, 7, 4);
        let b = Tensor2D::new(d, r, (0..d * r).map(|_| rng.normal()).collect()).unwrap();
        let a = Tensor2D::new(r, k, (0..r * k).map(|_| rng.normal()).collect()).unwrap();
        let f0 = LoraFactors::new(b, a, r, 8.0).unwrap();
        let delta = extract_delta(&f0).unwrap();
        let f1 = refactor_rank_r(&delta, r, f0.alpha).unwrap();
        assert!(refactor_residual(&delta, &f1).unwrap() <= 1e-8);
    }

    #[test]
    fn truncation_is_best_rank_r() {
        // Rank-1 truncation error equals the discarded spectral mass.
        let mut rng = Prng::new(25);
        let m = Tensor2D::new(5, 5, (0..25).map(|_| rng.normal()).collect()).unwrap();
        let dec = svd(&m).unwrap();
        let f = refactor_rank_r(&m, 1, 1.0).unwrap();
        let rec = extract_delta(&f).unwrap();
        let err = rec.sub(&m).frob_norm();
        let tail: f64 = dec.s[1..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((err - tail).abs() < 1e-9, "err {err} vs tail {tail}");
    }

    #[test]
    fn sign_convention_fixes_largest_entry_nonnegative() {
        let mut rng = Prng::new(26);
        let m = Tensor2D::new(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap();
        let dec = svd(&m).unwrap();
        for j in 0..dec.s.len() {
            let col: Vec<f64> = (0..m.rows).map(|i| dec.u.at(i, j)).collect();
            let mut best = 0.0f64;
            let mut val = 0.0;
            for &x in &col {
                if x.abs() > best {
                    best = x.abs();
                    val = x;
                }
            }
            assert!(val >= 0.0, "column {j} largest entry {val}");
        }
    }
}
