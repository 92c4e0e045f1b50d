//! Dense linear algebra and statistical kernels.
//!
//! Every reduction runs in a fixed loop order so results are bit-reproducible
//! from run to run. The model, the scan and the oracles in the tests all call
//! into the same primitives here, which is what makes the ablation-equivalence
//! checks exact rather than approximate.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::Tensor;

const COSINE_EPS: f64 = 1e-12;

/// Raw row-major matrix-vector product: `out[i] = sum_j w[i*cols + j] * x[j]`.
#[inline]
pub fn matvec_into(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for j in 0..cols {
            acc += row[j] * x[j];
        }
        *o = acc;
    }
}

/// `w · x` for a `rows × cols` matrix `w`.
pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = w.dims2()?;
    if x.len() != cols {
        return Err(dim_err(format!(
            "matvec: matrix is {rows}x{cols}, vector has length {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; rows];
    matvec_into(w.data(), rows, cols, x, &mut out);
    Ok(out)
}

/// `wᵀ · x` for a `rows × cols` matrix `w`; `x` has length `rows`.
pub fn matvec_t(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (rows, cols) = w.dims2()?;
    if x.len() != rows {
        return Err(dim_err(format!(
            "matvec_t: matrix is {rows}x{cols}, vector has length {}",
            x.len()
        )));
    }
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let xi = x[i];
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += wij * xi;
        }
    }
    Ok(out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err(format!("matmul: {m}x{k} times {k2}x{n}")));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    // i-p-j order: each output element accumulates over p in increasing order.
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::matrix(m, n, out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.get2(i, j);
        }
    }
    Tensor::matrix(n, m, out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Softmax of `v / temperature` into `out`, using max subtraction.
pub fn softmax_into(v: &[f64], temperature: f64, out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = ((x - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(v: &Tensor, temperature: f64) -> Result<Tensor> {
    softmax_slice(v.data(), temperature).map(Tensor::vector)
}

pub fn softmax_slice(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(dim_err("softmax of an empty vector"));
    }
    if !(temperature > 0.0) {
        return Err(param_err(format!("temperature must be positive, got {temperature}")));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, temperature, &mut out);
    Ok(out)
}

/// `log(sum(exp(v)))`, stable for large entries.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut sum = 0.0;
    for &x in v {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err(format!(
            "cosine: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(dim_err("cosine of empty vectors"));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb + COSINE_EPS)).clamp(-1.0, 1.0))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `exp(−softplus(x))`, kept strictly inside (0, 1) even where the exact
/// value rounds to an endpoint.
#[inline]
pub fn stable_decay(x: f64) -> f64 {
    const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    (-softplus(x)).exp().clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

pub fn frobenius(t: &Tensor) -> f64 {
    t.norm()
}

/// Largest singular value of `m` by power iteration on `mᵀm`.
pub fn operator_norm(m: &Tensor, tol: f64, max_iter: usize) -> Result<f64> {
    let (rows, cols) = m.dims2()?;
    if m.data().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    // Deterministic, non-degenerate start vector.
    let mut v: Vec<f64> = (0..cols).map(|j| 1.0 + 0.1 * j as f64).collect();
    let n = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut sigma = 0.0;
    let mut mv = vec![0.0; rows];
    for _ in 0..max_iter {
        matvec_into(m.data(), rows, cols, &v, &mut mv);
        let mut w = matvec_t(m, &mv)?;
        let wn = l2_norm(&w);
        if wn == 0.0 {
            return Ok(0.0);
        }
        let next = wn.sqrt();
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
        if (next - sigma).abs() <= tol * next.max(1.0) {
            sigma = next;
            break;
        }
        sigma = next;
    }
    // One last Rayleigh evaluation: ||m v|| for the converged unit v.
    matvec_into(m.data(), rows, cols, &v, &mut mv);
    Ok(l2_norm(&mv).max(sigma))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RidgeSolution {
    pub w: Tensor,
    pub lambda: f64,
    pub residual_fro: f64,
}

/// Minimizes `||XW − Y||_F² + λ||W||_F²` via the normal equations
/// `(XᵀX + λI) W = XᵀY`, solved with a Cholesky factorization and one round
/// of iterative refinement.
pub fn ridge_fit(x: &Tensor, y: &Tensor, lambda: f64) -> Result<RidgeSolution> {
    let (n, din) = x.dims2()?;
    let (ny, _) = y.dims2()?;
    if n != ny {
        return Err(dim_err(format!("ridge: X has {n} rows, Y has {ny}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(param_err(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let xt = transpose(x)?;
    let mut gram = matmul(&xt, x)?;
    for i in 0..din {
        let v = gram.get2(i, i) + lambda;
        gram.set2(i, i, v);
    }
    let rhs = matmul(&xt, y)?;
    let chol = cholesky(&gram)?;
    let mut w = chol_solve(&chol, &rhs)?;
    // Refinement: W += G⁻¹ (rhs − G W).
    let gw = matmul(&gram, &w)?;
    let mut resid = rhs.clone();
    for (r, g) in resid.data_mut().iter_mut().zip(gw.data()) {
        *r -= g;
    }
    let corr = chol_solve(&chol, &resid)?;
    for (wv, c) in w.data_mut().iter_mut().zip(corr.data()) {
        *wv += c;
    }
    let pred = matmul(x, &w)?;
    let residual_fro = y
        .data()
        .iter()
        .zip(pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(RidgeSolution {
        w,
        lambda,
        residual_fro,
    })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &Tensor) -> Result<Tensor> {
    let (n, n2) = a.dims2()?;
    debug_assert_eq!(n, n2);
    let scale = (0..n).map(|i| a.get2(i, i).abs()).fold(0.0, f64::max);
    let floor = scale * n as f64 * f64::EPSILON;
    let mut l = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let mut d = a.get2(j, j);
        for k in 0..j {
            d -= l.get2(j, k) * l.get2(j, k);
        }
        if !(d > floor) {
            return Err(Error::Singular(format!(
                "pivot {j} is {d:e}; add a positive lambda"
            )));
        }
        let djj = d.sqrt();
        l.set2(j, j, djj);
        for i in j + 1..n {
            let mut s = a.get2(i, j);
            for k in 0..j {
                s -= l.get2(i, k) * l.get2(j, k);
            }
            l.set2(i, j, s / djj);
        }
    }
    Ok(l)
}

fn chol_solve(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, _) = l.dims2()?;
    let (_, m) = b.dims2()?;
    let mut x = b.clone();
    for col in 0..m {
        // Forward: L z = b.
        for i in 0..n {
            let mut s = x.get2(i, col);
            for k in 0..i {
                s -= l.get2(i, k) * x.get2(k, col);
            }
            x.set2(i, col, s / l.get2(i, i));
        }
        // Backward: Lᵀ w = z.
        for i in (0..n).rev() {
            let mut s = x.get2(i, col);
            for k in i + 1..n {
                s -= l.get2(k, i) * x.get2(k, col);
            }
            x.set2(i, col, s / l.get2(i, i));
        }
    }
    Ok(x)
}

/// Relative residual of the ridge normal equations for a candidate `W`.
pub fn normal_equation_residual(x: &Tensor, y: &Tensor, w: &Tensor, lambda: f64) -> Result<f64> {
    let xt = transpose(x)?;
    let mut gram = matmul(&xt, x)?;
    let d = gram.rows();
    for i in 0..d {
        let v = gram.get2(i, i) + lambda;
        gram.set2(i, i, v);
    }
    let lhs = matmul(&gram, w)?;
    let rhs = matmul(&xt, y)?;
    let diff = lhs
        .data()
        .iter()
        .zip(rhs.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / rhs.norm().max(f64::MIN_POSITIVE))
}

/// Column-wise max over consecutive blocks of `w` rows. A trailing partial
/// block is pooled as-is, so `m = ceil(n / w)`.
pub fn block_max_pool(h: &Tensor, w: usize) -> Result<Tensor> {
    block_pool(h, w, |block| block.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Column-wise mean over consecutive blocks of `w` rows.
pub fn block_mean_pool(h: &Tensor, w: usize) -> Result<Tensor> {
    block_pool(h, w, |block| block.iter().sum::<f64>() / block.len() as f64)
}

fn block_pool(h: &Tensor, w: usize, reduce: impl Fn(&[f64]) -> f64) -> Result<Tensor> {
    if w == 0 {
        return Err(param_err("pool window must be positive"));
    }
    let (n, d) = h.dims2()?;
    let m = n.div_ceil(w);
    let mut out = Vec::with_capacity(m * d);
    let mut column = Vec::with_capacity(w);
    for b in 0..m {
        let lo = b * w;
        let hi = (lo + w).min(n);
        for j in 0..d {
            column.clear();
            column.extend((lo..hi).map(|i| h.get2(i, j)));
            out.push(reduce(&column));
        }
    }
    Tensor::matrix(m, d, out)
}

/// Broadcasts each summary row over its window: `m·w` rows.
pub fn reconstruct_broadcast(s: &Tensor, w: usize) -> Result<Tensor> {
    let (m, _) = s.dims2()?;
    reconstruct_broadcast_to(s, w, m * w)
}

/// As [`reconstruct_broadcast`], truncated to `n` rows for a partial last block.
pub fn reconstruct_broadcast_to(s: &Tensor, w: usize, n: usize) -> Result<Tensor> {
    if w == 0 {
        return Err(param_err("broadcast window must be positive"));
    }
    let (m, d) = s.dims2()?;
    if n == 0 || n > m * w || n <= (m - 1) * w {
        return Err(dim_err(format!(
            "{m} summaries with window {w} cannot produce {n} rows"
        )));
    }
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        out.extend_from_slice(s.row(i / w));
    }
    Tensor::matrix(n, d, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Textbook triple loop, independent of the production kernel's loop order.
    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out.set2(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let z = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(matmul(&m, &z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let diff = matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        for c in [-3.0, 0.0, 12.5] {
            let s = softmax(&Tensor::vector(vec![c; 4]), 1.0).unwrap();
            assert!(s.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        }
        let s = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]), 1.0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
        let s = softmax(&Tensor::vector(vec![1e6, 0.0]), 1.0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        assert!(softmax_slice(&[], 1.0).is_err());
        assert!(softmax_slice(&[1.0], 0.0).is_err());
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ridge_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(30, 4, &mut rng);
        let sol = ridge_fit(&x, &x, 1e-12).unwrap();
        assert!(sol.w.max_abs_diff(&Tensor::identity(4)) < 1e-6);
        assert!(sol.residual_fro < 1e-6);
    }

    #[test]
    fn ridge_recovers_planted_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(50, 4, &mut rng);
        let w_star = random(4, 3, &mut rng);
        let y = matmul(&x, &w_star).unwrap();
        let sol = ridge_fit(&x, &y, 1e-4).unwrap();
        assert!(sol.w.max_abs_diff(&w_star) < 1e-3);
        assert!(normal_equation_residual(&x, &y, &sol.w, 1e-4).unwrap() < 1e-8);
    }

    #[test]
    fn ridge_shrinks_with_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(20, 3, &mut rng);
        let y = random(20, 2, &mut rng);
        let mut prev = f64::INFINITY;
        for lambda in [1e-3, 1e-1, 1.0, 10.0, 1e3, 1e6] {
            let n = ridge_fit(&x, &y, lambda).unwrap().w.norm();
            assert!(n < prev);
            prev = n;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn ridge_singular_without_lambda() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        let y = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(ridge_fit(&x, &y, 0.0), Err(Error::Singular(_))));
        assert!(ridge_fit(&x, &y, 1e-3).is_ok());
    }

    #[test]
    fn max_pool_cases() {
        let h = Tensor::matrix(4, 1, vec![1.0, 5.0, 2.0, 3.0]).unwrap();
        assert_eq!(block_max_pool(&h, 2).unwrap().data(), &[5.0, 3.0]);
        assert_eq!(block_max_pool(&h, 4).unwrap().data(), &[5.0]);
        // Partial trailing block.
        assert_eq!(block_max_pool(&h, 3).unwrap().data(), &[5.0, 3.0]);
        assert!(block_max_pool(&h, 0).is_err());
        let c = Tensor::matrix(4, 2, vec![1.0, 2.0, 1.0, 2.0, 7.0, 8.0, 7.0, 8.0]).unwrap();
        assert_eq!(block_max_pool(&c, 2).unwrap().data(), &[1.0, 2.0, 7.0, 8.0]);
    }

    #[test]
    fn broadcast_cases() {
        let s = Tensor::matrix(2, 1, vec![5.0, 3.0]).unwrap();
        assert_eq!(reconstruct_broadcast(&s, 2).unwrap().data(), &[5.0, 5.0, 3.0, 3.0]);
        let c = Tensor::matrix(4, 2, vec![1.0, 2.0, 1.0, 2.0, 7.0, 8.0, 7.0, 8.0]).unwrap();
        let back = reconstruct_broadcast(&block_max_pool(&c, 2).unwrap(), 2).unwrap();
        assert_eq!(back, c);
        assert_eq!(reconstruct_broadcast_to(&s, 3, 4).unwrap().rows(), 4);
    }

    #[test]
    fn broadcast_error_decomposes_by_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d, w) = (12, 3, 4);
        let h = random(n, d, &mut rng);
        let back = reconstruct_broadcast(&block_max_pool(&h, w).unwrap(), w).unwrap();
        let total: f64 = h
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let mut by_block = 0.0;
        for b in 0..n / w {
            for j in 0..d {
                let col_max = (b * w..(b + 1) * w).map(|i| h.get2(i, j)).fold(f64::MIN, f64::max);
                for i in b * w..(b + 1) * w {
                    by_block += (h.get2(i, j) - col_max).powi(2);
                }
            }
        }
        assert!((total - by_block).abs() < 1e-12);
    }

    #[test]
    fn operator_norm_of_diagonal() {
        let m = Tensor::matrix(2, 3, vec![3.0, 0.0, 0.0, 0.0, -5.0, 0.0]).unwrap();
        assert!((operator_norm(&m, 1e-10, 10_000).unwrap() - 5.0).abs() < 1e-8);
        assert_eq!(operator_norm(&Tensor::zeros(&[2, 2]), 1e-10, 10).unwrap(), 0.0);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }
}
