//! Periodic Fourier grid: spectral derivatives, 3/2-rule products,
//! inverse Laplacian and Sobolev norms.
//!
//! Fourier coefficients are normalized as `c_k = (1/M) sum_j f_j e^{-i xi_k x_j}`.
//! The Nyquist coefficient is discarded by every derivative and by every
//! dealiased product.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{KakinumaError, Result};
use crate::format::fmt_g17;

/// Grid values of a periodic function.
pub type Field = Vec<f64>;
/// Stack of coefficient fields `(phi_0, ..., phi_K)` of one layer.
pub type PotentialVec = Vec<Field>;

/// Default solvability tolerance for mean-free data.
pub const MEAN_TOL: f64 = 1e-10;

#[derive(Clone)]
pub struct PeriodicGrid {
    m: usize,
    mp: usize,
    length: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    fwd_pad: Arc<dyn Fft<f64>>,
    inv_pad: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for PeriodicGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicGrid")
            .field("m", &self.m)
            .field("length", &self.length)
            .finish()
    }
}

impl PartialEq for PeriodicGrid {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m && self.length == other.length
    }
}

impl PeriodicGrid {
    pub fn new(m: usize, length: f64) -> Result<Self> {
        if m < 16 || !m.is_power_of_two() {
            return Err(KakinumaError::GridMismatch(format!(
                "M = {m} must be a power of two >= 16"
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(KakinumaError::GridMismatch(format!("length = {length}")));
        }
        let mp = 3 * m / 2;
        let mut planner = FftPlanner::new();
        Ok(PeriodicGrid {
            m,
            mp,
            length,
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
            fwd_pad: planner.plan_fft_forward(mp),
            inv_pad: planner.plan_fft_inverse(mp),
        })
    }

    /// `M` points on `[0, 2 pi)`.
    pub fn standard(m: usize) -> Result<Self> {
        Self::new(m, 2.0 * PI)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn padded_len(&self) -> usize {
        self.mp
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.length / self.m as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.m).map(|j| j as f64 * self.dx()).collect()
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Field {
        self.nodes().into_iter().map(f).collect()
    }

    pub fn zeros(&self) -> Field {
        vec![0.0; self.m]
    }

    /// Signed integer mode of FFT slot `idx` in a transform of length `n`.
    fn mode(idx: usize, n: usize) -> i64 {
        if idx <= n / 2 {
            idx as i64
        } else {
            idx as i64 - n as i64
        }
    }

    /// Wavenumber `xi` of FFT slot `idx`; the Nyquist slot reports `+pi M / L`.
    pub fn wavenumber(&self, idx: usize) -> f64 {
        2.0 * PI * Self::mode(idx, self.m) as f64 / self.length
    }

    pub fn is_nyquist(&self, idx: usize) -> bool {
        idx == self.m / 2
    }

    pub fn fft(&self, f: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(f.len(), self.m);
        let mut buf: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        let s = 1.0 / self.m as f64;
        buf.iter_mut().for_each(|c| *c *= s);
        buf
    }

    pub fn ifft(&self, c: &[Complex64]) -> Field {
        let mut buf = c.to_vec();
        self.inv.process(&mut buf);
        buf.iter().map(|z| z.re).collect()
    }

    fn ik_pow(&self, idx: usize, order: u32) -> Complex64 {
        if self.is_nyquist(idx) {
            return Complex64::new(0.0, 0.0);
        }
        Complex64::new(0.0, self.wavenumber(idx)).powu(order)
    }

    pub fn deriv(&self, f: &[f64], order: u32) -> Field {
        if order == 0 {
            return f.to_vec();
        }
        let mut c = self.fft(f);
        for (idx, v) in c.iter_mut().enumerate() {
            *v *= self.ik_pow(idx, order);
        }
        self.ifft(&c)
    }

    /// Band-limited interpolant on the padded grid, optionally with its derivative.
    fn pad_coeffs(&self, c: &[Complex64]) -> Vec<Complex64> {
        let mut p = vec![Complex64::new(0.0, 0.0); self.mp];
        let h = self.m / 2;
        for idx in 0..self.m {
            if idx == h {
                continue;
            }
            let k = Self::mode(idx, self.m);
            let slot = if k >= 0 { k as usize } else { (self.mp as i64 + k) as usize };
            p[slot] = c[idx];
        }
        p
    }

    fn inv_pad_real(&self, mut p: Vec<Complex64>) -> Vec<f64> {
        self.inv_pad.process(&mut p);
        p.iter().map(|z| z.re).collect()
    }

    pub fn to_padded(&self, f: &[f64]) -> Vec<f64> {
        let c = self.fft(f);
        self.inv_pad_real(self.pad_coeffs(&c))
    }

    /// Padded values of `f` and of `df/dx`.
    pub fn to_padded_with_deriv(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = self.fft(f);
        let p = self.pad_coeffs(&c);
        // f and f' are both real, so one complex transform carries both.
        let mut q = vec![Complex64::new(0.0, 0.0); self.mp];
        for (slot, v) in p.iter().enumerate() {
            let k = Self::mode(slot, self.mp) as f64 * 2.0 * PI / self.length;
            q[slot] = *v + Complex64::new(0.0, 1.0) * (Complex64::new(0.0, k) * *v);
        }
        self.inv_pad.process(&mut q);
        (q.iter().map(|z| z.re).collect(), q.iter().map(|z| z.im).collect())
    }

    /// Coefficients (length `M`, Nyquist zero) of the truncation of padded values.
    pub fn padded_coeffs(&self, g: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(g.len(), self.mp);
        let mut buf: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd_pad.process(&mut buf);
        let s = 1.0 / self.mp as f64;
        let mut c = vec![Complex64::new(0.0, 0.0); self.m];
        let h = self.m / 2;
        for (idx, v) in c.iter_mut().enumerate() {
            if idx == h {
                continue;
            }
            let k = Self::mode(idx, self.m);
            let slot = if k >= 0 { k as usize } else { (self.mp as i64 + k) as usize };
            *v = buf[slot] * s;
        }
        c
    }

    pub fn from_padded(&self, g: &[f64]) -> Field {
        self.ifft(&self.padded_coeffs(g))
    }

    /// Truncation of `-dF/dx + G` for padded `F`, `G`.
    pub fn from_padded_flux(&self, flux: &[f64], source: &[f64]) -> Field {
        let mut buf: Vec<Complex64> = flux
            .iter()
            .zip(source)
            .map(|(&f, &g)| Complex64::new(f, g))
            .collect();
        self.fwd_pad.process(&mut buf);
        let s = 1.0 / self.mp as f64;
        let mut c = vec![Complex64::new(0.0, 0.0); self.m];
        let h = self.m / 2;
        let n = self.mp;
        for (idx, v) in c.iter_mut().enumerate() {
            if idx == h {
                continue;
            }
            let k = Self::mode(idx, self.m);
            let slot = if k >= 0 { k as usize } else { (n as i64 + k) as usize };
            let conj_slot = (n - slot) % n;
            let z = buf[slot] * s;
            let zc = buf[conj_slot].conj() * s;
            let fhat = (z + zc) * 0.5;
            let ghat = (z - zc) * Complex64::new(0.0, -0.5);
            *v = -Complex64::new(0.0, self.wavenumber(idx)) * fhat + ghat;
        }
        self.ifft(&c)
    }

    /// Dealiased product `P(a b)`.
    pub fn mul(&self, a: &[f64], b: &[f64]) -> Field {
        let pa = self.to_padded(a);
        let pb = self.to_padded(b);
        let prod: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        self.from_padded(&prod)
    }

    pub fn mean(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() / self.m as f64
    }

    pub fn integral(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() * self.dx()
    }

    /// Trapezoid `L^2` inner product.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * self.dx()
    }

    pub fn l2_norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).sqrt()
    }

    pub fn max_abs(f: &[f64]) -> f64 {
        f.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn mean_free(&self, f: &[f64]) -> Field {
        let mu = self.mean(f);
        f.iter().map(|v| v - mu).collect()
    }

    /// Projection of `f` on the Nyquist mode `(-1)^j`.
    pub fn nyquist_part(&self, f: &[f64]) -> Field {
        let c: f64 = f
            .iter()
            .enumerate()
            .map(|(j, v)| if j % 2 == 0 { *v } else { -*v })
            .sum::<f64>()
            / self.m as f64;
        (0..self.m).map(|j| if j % 2 == 0 { c } else { -c }).collect()
    }

    fn check_mean(&self, f: &[f64]) -> Result<()> {
        let mu = self.mean(f);
        let scale = Self::max_abs(f).max(1.0);
        if mu.abs() > MEAN_TOL * scale {
            return Err(KakinumaError::NonZeroMean(mu));
        }
        Ok(())
    }

    /// Mean-free `u` with `u'' = f`.
    pub fn inverse_laplacian(&self, f: &[f64]) -> Result<Field> {
        self.check_mean(f)?;
        let mut c = self.fft(f);
        for (idx, v) in c.iter_mut().enumerate() {
            let xi = self.wavenumber(idx);
            *v = if idx == 0 || self.is_nyquist(idx) { Complex64::new(0.0, 0.0) } else { -*v / (xi * xi) };
        }
        Ok(self.ifft(&c))
    }

    fn weighted_norm(&self, f: &[f64], w: impl Fn(f64) -> f64) -> f64 {
        let c = self.fft(f);
        let s: f64 = c
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let xi = if self.is_nyquist(idx) { PI * self.m as f64 / self.length } else { self.wavenumber(idx).abs() };
                w(xi) * v.norm_sqr()
            })
            .sum();
        (s * self.length).sqrt()
    }

    /// `||f||_{H^s}` with symbol `(1 + xi^2)^{s/2}`.
    pub fn sobolev_norm(&self, f: &[f64], s: f64) -> f64 {
        self.weighted_norm(f, |xi| (1.0 + xi * xi).powf(s))
    }

    /// `||(-Delta)^{-1/2} f||_{H^s}` for mean-free `f`.
    pub fn half_inverse_laplacian_norm(&self, f: &[f64], s: f64) -> Result<f64> {
        self.check_mean(f)?;
        Ok(self.weighted_norm(f, |xi| if xi == 0.0 { 0.0 } else { (1.0 + xi * xi).powf(s) / (xi * xi) }))
    }

    /// CSV with `# M=..` and `# length=..` metadata, a header row and one row per node.
    pub fn fields_to_csv(&self, names: &[&str], fields: &[&[f64]]) -> String {
        let mut out = format!("# M={}\n# length={}\nx", self.m, fmt_g17(self.length));
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (j, x) in self.nodes().iter().enumerate() {
            out.push_str(&fmt_g17(*x));
            for f in fields {
                out.push(',');
                out.push_str(&fmt_g17(f[j]));
            }
            out.push('\n');
        }
        out
    }
}

pub fn add(a: &[f64], b: &[f64]) -> Field {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Field {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Field {
    a.iter().map(|x| x * s).collect()
}

/// `a + s b` in place.
pub fn axpy(a: &mut [f64], s: f64, b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
}

pub fn pointwise(a: &[f64], b: &[f64]) -> Field {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}
