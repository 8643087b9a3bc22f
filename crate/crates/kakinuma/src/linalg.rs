//! Linear solvers shared by the elliptic and reference modules: dense LU on
//! an explicitly assembled matrix, restarted GMRES, and a block-diagonal
//! Fourier preconditioner obtained by probing a translation-invariant
//! operator.

use nalgebra::{DMatrix, DVector, LU, Dyn};
use rustfft::num_complex::Complex64;

use crate::error::{KakinumaError, Result};
use crate::spectral_grid::PeriodicGrid;

/// Assembles the matrix of a linear map column by column.
pub fn assemble_dense(n: usize, op: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = op(&e);
        e[j] = 0.0;
        for (i, v) in col.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    a
}

pub struct DenseSolver {
    lu: LU<f64, Dyn, Dyn>,
}

impl DenseSolver {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let lu = a.lu();
        let u = lu.u();
        let dmax = u.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dmin = u.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if !(dmin > dmax * 1e-15) {
            return Err(KakinumaError::SolverSingular(format!(
                "LU pivot ratio {:e}",
                dmin / dmax
            )));
        }
        Ok(DenseSolver { lu })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let x = self
            .lu
            .solve(&DVector::from_column_slice(b))
            .ok_or_else(|| KakinumaError::SolverSingular("LU solve failed".into()))?;
        Ok(x.iter().copied().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresOptions {
    /// Target relative residual of the preconditioned system.
    pub tol: f64,
    /// Largest accepted relative residual of the original system.
    pub accept: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        GmresOptions { tol: 1e-14, accept: 1e-10, restart: 80, max_iter: 800 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresReport {
    pub iterations: usize,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Left-preconditioned restarted GMRES with classical Gram-Schmidt applied twice.
pub fn gmres(
    op: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &GmresOptions,
) -> Result<(Vec<f64>, GmresReport)> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], GmresReport { iterations: 0, residual: 0.0 }));
    }
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let pb_norm = norm(&precond(b));
    let mut iters = 0;
    let true_res = |x: &[f64]| {
        let ax = op(x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        norm(&r) / bnorm
    };
    loop {
        let ax = op(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let z = precond(&r);
        let beta = norm(&z);
        if beta <= opts.tol * pb_norm || iters >= opts.max_iter {
            break;
        }
        let m = opts.restart;
        let mut v: Vec<Vec<f64>> = vec![z.iter().map(|t| t / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let mut w = precond(&op(&v[k]));
            for _ in 0..2 {
                for (i, vi) in v.iter().enumerate() {
                    let c = dot(&w, vi);
                    h[i][k] += c;
                    w.iter_mut().zip(vi).for_each(|(a, b)| *a -= c * b);
                }
            }
            let hn = norm(&w);
            h[k + 1][k] = hn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let d = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if d == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / d;
            sn[k] = h[k + 1][k] / d;
            h[k][k] = d;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            iters += 1;
            k_used = k + 1;
            if g[k + 1].abs() <= opts.tol * pb_norm || hn == 0.0 || iters >= opts.max_iter {
                break;
            }
            v.push(w.iter().map(|t| t / hn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            x.iter_mut().zip(&v[j]).for_each(|(a, b)| *a += yj * b);
        }
        if k_used == 0 {
            break;
        }
    }
    let residual = true_res(&x);
    if !(residual <= opts.accept) {
        return Err(KakinumaError::SolverSingular(format!(
            "GMRES stalled at relative residual {residual:e} after {iters} iterations"
        )));
    }
    Ok((x, GmresReport { iterations: iters, residual }))
}

/// Exact inverse of a translation-invariant block operator, applied mode by
/// mode. Vectors consist of `nblocks` grid fields followed by an optional
/// scalar that couples only to the mean mode.
pub struct ModalPreconditioner {
    m: usize,
    nblocks: usize,
    scalar: bool,
    modes: Vec<LU<Complex64, Dyn, Dyn>>,
}

impl ModalPreconditioner {
    /// Recovers the per-mode symbol of `op` by applying it to a unit impulse
    /// in each block. Only meaningful when `op` commutes with grid shifts.
    pub fn probe(grid: &PeriodicGrid, nblocks: usize, scalar: bool, op: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let m = grid.m();
        let n = nblocks * m + usize::from(scalar);
        let half = m / 2;
        let size0 = nblocks + usize::from(scalar);
        let mut mats: Vec<DMatrix<Complex64>> = (0..=half)
            .map(|k| {
                let s = if k == 0 { size0 } else { nblocks };
                DMatrix::zeros(s, s)
            })
            .collect();
        let mut x = vec![0.0; n];
        let ncols = nblocks + usize::from(scalar);
        for col in 0..ncols {
            let is_scalar = col == nblocks;
            let pos = if is_scalar { nblocks * m } else { col * m };
            x[pos] = 1.0;
            let y = op(&x);
            x[pos] = 0.0;
            let unit = if is_scalar { 1.0 } else { m as f64 };
            for row in 0..nblocks {
                let c = grid.fft(&y[row * m..(row + 1) * m]);
                for (k, mat) in mats.iter_mut().enumerate() {
                    if is_scalar && k > 0 {
                        continue;
                    }
                    mat[(row, col)] = c[k] * unit;
                }
            }
            if scalar {
                mats[0][(nblocks, col)] = Complex64::new(y[nblocks * m] * unit, 0.0);
            }
        }
        let mut modes = Vec::with_capacity(half + 1);
        for (k, mat) in mats.into_iter().enumerate() {
            let lu = mat.lu();
            let diag = lu.u().diagonal();
            let dmax = diag.iter().fold(0.0f64, |a, z| a.max(z.norm()));
            let dmin = diag.iter().fold(f64::INFINITY, |a, z| a.min(z.norm()));
            if !(dmin > 1e-13 * dmax) {
                return Err(KakinumaError::SolverSingular(format!("singular preconditioner block at mode {k}")));
            }
            modes.push(lu);
        }
        Ok(ModalPreconditioner { m, nblocks, scalar, modes })
    }

    pub fn apply(&self, grid: &PeriodicGrid, r: &[f64]) -> Vec<f64> {
        let m = self.m;
        let nb = self.nblocks;
        let half = m / 2;
        let coeffs: Vec<Vec<Complex64>> = (0..nb).map(|b| grid.fft(&r[b * m..(b + 1) * m])).collect();
        let mut out_c = vec![vec![Complex64::new(0.0, 0.0); m]; nb];
        let mut scalar_out = 0.0;
        for k in 0..=half {
            let size = if k == 0 && self.scalar { nb + 1 } else { nb };
            let mut rhs = DVector::from_fn(size, |i, _| if i < nb { coeffs[i][k] } else { Complex64::new(r[nb * m], 0.0) });
            if !self.modes[k].solve_mut(&mut rhs) {
                continue;
            }
            for b in 0..nb {
                out_c[b][k] = rhs[b];
                if k > 0 && k < half {
                    out_c[b][m - k] = rhs[b].conj();
                }
            }
            if k == 0 && self.scalar {
                scalar_out = rhs[nb].re;
            }
        }
        let mut out = Vec::with_capacity(r.len());
        for c in &out_c {
            out.extend(grid.ifft(c));
        }
        if self.scalar {
            out.push(scalar_out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gmres_solves_spd_system() {
        let n = 40;
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 4.0 + i as f64 * 0.1 } else { 1.0 / (1.0 + (i as f64 - j as f64).abs()) });
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let op = |x: &[f64]| (&a * DVector::from_column_slice(x)).iter().copied().collect::<Vec<f64>>();
        let (x, rep) = gmres(op, |r: &[f64]| r.to_vec(), &b, None, &GmresOptions::default()).unwrap();
        let dense = DenseSolver::new(a.clone()).unwrap().solve(&b).unwrap();
        let err = x.iter().zip(&dense).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(err < 1e-12, "{err:e}");
        assert!(rep.residual < 1e-13);
    }

    #[test]
    fn gmres_restarts() {
        let n = 60;
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 } else if j == i + 1 { -1.0 } else if i == j + 1 { -0.5 } else { 0.0 });
        let b = vec![1.0; n];
        let op = |x: &[f64]| (&a * DVector::from_column_slice(x)).iter().copied().collect::<Vec<f64>>();
        let opts = GmresOptions { restart: 7, ..Default::default() };
        let (_, rep) = gmres(op, |r: &[f64]| r.to_vec(), &b, None, &opts).unwrap();
        assert!(rep.residual < 1e-12);
    }

    #[test]
    fn dense_rejects_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(DenseSolver::new(a).is_err());
    }

    #[test]
    fn modal_preconditioner_inverts_constant_coefficient_operator() {
        let g = PeriodicGrid::standard(32).unwrap();
        // Block operator [[1 - d2, d1], [d1, 2]] plus a scalar pinning the mean of block 0.
        let op = |x: &[f64]| -> Vec<f64> {
            let m = 32;
            let (a, b) = (&x[..m], &x[m..2 * m]);
            let lam = x[2 * m];
            let d2a = g.deriv(a, 2);
            let d1b = g.deriv(b, 1);
            let d1a = g.deriv(a, 1);
            let na = g.nyquist_part(a);
            let mut y: Vec<f64> = (0..m).map(|j| -d2a[j] + d1b[j] + lam + na[j]).collect();
            y.extend((0..m).map(|j| d1a[j] + 2.0 * b[j]));
            y.push(g.mean(a));
            y
        };
        let pc = ModalPreconditioner::probe(&g, 2, true, op).unwrap();
        let mut x: Vec<f64> = g.sample(|t| (2.0 * t).sin() + 0.3 * t.cos());
        x.extend(g.sample(|t| 0.5 + (3.0 * t).cos()));
        x.push(0.0);
        let y = op(&x);
        let back = pc.apply(&g, &y);
        let err = back.iter().zip(&x).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(err < 1e-12, "{err:e}");
    }

    #[test]
    fn modal_preconditioner_detects_singular_mode() {
        let g = PeriodicGrid::standard(16).unwrap();
        assert!(ModalPreconditioner::probe(&g, 1, false, |x: &[f64]| g.deriv(x, 1)).is_err());
    }
}
