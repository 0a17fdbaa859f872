//! Small dense symmetric eigenvalue routines.
//!
//! Matrices are row-major `dim * dim` slices. Nothing here is tuned for large
//! problems; the simulator only needs spectra of mixing matrices and Gram
//! matrices at desk scale.

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending.
pub fn jacobi_eigenvalues(a: &[f64], dim: usize) -> Vec<f64> {
    assert_eq!(a.len(), dim * dim);
    let mut m = a.to_vec();
    let scale = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..dim {
            for q in (p + 1)..dim {
                off += m[p * dim + q] * m[p * dim + q];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = m[p * dim + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[p * dim + p];
                let aqq = m[q * dim + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..dim {
                    let arp = m[r * dim + p];
                    let arq = m[r * dim + q];
                    m[r * dim + p] = c * arp - s * arq;
                    m[r * dim + q] = s * arp + c * arq;
                }
                for r in 0..dim {
                    let apr = m[p * dim + r];
                    let aqr = m[q * dim + r];
                    m[p * dim + r] = c * apr - s * aqr;
                    m[q * dim + r] = s * apr + c * aqr;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..dim).map(|i| m[i * dim + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

#[derive(Clone, Copy, Debug)]
pub struct PowerResult {
    /// Largest eigenvalue magnitude of the operator.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration for the spectral norm of a symmetric linear operator.
///
/// Iterates on `A^2` through two applications of `apply`, so eigenvalues of
/// equal magnitude and opposite sign do not stall convergence. Stops when the
/// residual `||A^2 x - mu x||` drops below `tol` (with `mu = ||A x||^2`).
pub fn power_norm<F>(apply: F, dim: usize, tol: f64, max_iter: usize) -> PowerResult
where
    F: Fn(&[f64], &mut [f64]),
{
    let mut x: Vec<f64> = (0..dim)
        .map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect();
    normalize(&mut x);
    let mut ax = vec![0.0; dim];
    let mut aax = vec![0.0; dim];
    for it in 1..=max_iter {
        apply(&x, &mut ax);
        let mu = dot(&ax, &ax);
        if mu == 0.0 {
            return PowerResult { value: 0.0, iterations: it, converged: true };
        }
        apply(&ax, &mut aax);
        let resid = aax
            .iter()
            .zip(&x)
            .map(|(y, xi)| (y - mu * xi) * (y - mu * xi))
            .sum::<f64>()
            .sqrt();
        if resid <= tol {
            return PowerResult { value: mu.sqrt(), iterations: it, converged: true };
        }
        x.copy_from_slice(&aax);
        if normalize(&mut x) == 0.0 {
            return PowerResult { value: 0.0, iterations: it, converged: true };
        }
    }
    apply(&x, &mut ax);
    PowerResult { value: dot(&ax, &ax).sqrt(), iterations: max_iter, converged: false }
}

/// Largest eigenvalue of a symmetric operator by Lanczos with full
/// reorthogonalization. Stops when the top Ritz value changes by less than
/// `rel_tol` relative between checks, the Krylov space becomes invariant, or
/// `max_steps` vectors have been built.
pub fn lanczos_max<F>(apply: F, dim: usize, max_steps: usize, rel_tol: f64) -> f64
where
    F: Fn(&[f64], &mut [f64]),
{
    if dim == 0 {
        return 0.0;
    }
    let steps = max_steps.clamp(1, dim);
    let mut q: Vec<f64> = (0..dim)
        .map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect();
    normalize(&mut q);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alpha: Vec<f64> = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    let mut w = vec![0.0; dim];
    let mut last = f64::NAN;
    loop {
        apply(&q, &mut w);
        let a = dot(&q, &w);
        basis.push(q.clone());
        alpha.push(a);
        for _ in 0..2 {
            for v in &basis {
                let c = dot(v, &w);
                w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= c * vi);
            }
        }
        let b = dot(&w, &w).sqrt();
        let k = alpha.len();
        let scale = alpha.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let done = k == steps || b <= 1e-13 * scale;
        if done || k.is_multiple_of(5) {
            let mut t = vec![0.0; k * k];
            for i in 0..k {
                t[i * k + i] = alpha[i];
                if i + 1 < k {
                    t[i * k + i + 1] = beta[i];
                    t[(i + 1) * k + i] = beta[i];
                }
            }
            let top = jacobi_eigenvalues(&t, k)[0];
            if done || (top - last).abs() <= rel_tol * top.abs() {
                return top;
            }
            last = top;
        }
        beta.push(b);
        q.iter_mut().zip(&w).for_each(|(qi, wi)| *qi = wi / b);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(x: &mut [f64]) -> f64 {
    let norm = dot(x, x).sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}
