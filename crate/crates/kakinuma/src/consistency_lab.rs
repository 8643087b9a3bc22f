//! Consistency measurements between the Kakinuma model and the full
//! two-layer potential flow model: residuals, Hamiltonian error,
//! dispersion relations and log-log order fitting.

use num::{BigInt, BigRational, One, ToPrimitive, Zero};
use rayon::prelude::*;

use crate::elliptic_solver::{approx_dtn, solve_layer_trace, CoupledRhs, CoupledSystem, SolveOptions};
use crate::error::{KakinumaError, Result};
use crate::evolution::hamiltonian_k;
use crate::format::fmt_g17;
use crate::kakinuma_ops::{bernoulli_bn, l_vector, InterfaceState};
use crate::params_core::{ExpansionSpec, Layer, NondimParams};
use crate::reference_laplace::{flat_dtn_symbol, full_dtn, hamiltonian_from_solution, TransmissionSolver, ReferenceBackend};
use crate::spectral_grid::{Field, PeriodicGrid, PotentialVec};

pub const DEFAULT_NOISE_FLOOR: f64 = 1e-13;
pub const MIN_FIT_SAMPLES: usize = 4;
pub const R2_THRESHOLD: f64 = 0.99;
pub const DEFAULT_DELTAS: [f64; 7] = [0.2, 0.15, 0.1, 0.07, 0.05, 0.035, 0.02];

/// Residuals of the full model evaluated on a Kakinuma state.
#[derive(Debug, Clone, PartialEq)]
pub struct FullResiduals {
    pub r1: Field,
    pub r2: Field,
    pub r0: Field,
}

/// `B_l` of the full model from the trace and its exact DtN image.
fn bernoulli_full(grid: &PeriodicGrid, trace: &[f64], dtn: &[f64], zeta: &[f64], delta: f64, layer: Layer) -> Field {
    let gx = grid.to_padded(&grid.deriv(trace, 1));
    let zx = grid.to_padded(&grid.deriv(zeta, 1));
    let lam = grid.to_padded(dtn);
    let sign = match layer {
        Layer::Upper => -1.0,
        Layer::Lower => 1.0,
    };
    let d2 = delta * delta;
    let v: Vec<f64> = (0..gx.len())
        .map(|n| {
            let q = lam[n] + sign * zx[n] * gx[n];
            0.5 * gx[n] * gx[n] - 0.5 * d2 * q * q / (1.0 + d2 * zx[n] * zx[n])
        })
        .collect();
    grid.from_padded(&v)
}

/// `(r1, r2, r0)` for the Kakinuma potentials with interface traces `phi1`, `phi2`.
/// Traces are taken modulo constants.
#[allow(clippy::too_many_arguments)]
pub fn residuals_full_from_kakinuma(
    grid: &PeriodicGrid,
    zeta: &[f64],
    b: &[f64],
    phi1: &[f64],
    phi2: &[f64],
    params: &NondimParams,
    spec: &ExpansionSpec,
    vertical_order: usize,
) -> Result<FullResiduals> {
    let state = InterfaceState::new(zeta.to_vec(), b.to_vec(), params)?;
    let mut out: Vec<(Field, Field)> = Vec::with_capacity(2);
    for (layer, trace) in [(Layer::Upper, phi1), (Layer::Lower, phi2)] {
        let trace = &grid.mean_free(trace)[..];
        let exact = full_dtn(grid, trace, &state, params, layer, vertical_order)?;
        let approx = approx_dtn(grid, trace, &state, params, spec, layer)?;
        let pots = solve_layer_trace(grid, trace, &state, params, spec, layer)?;
        let h = params.depth(layer);
        let r: Field = match layer {
            Layer::Upper => exact.iter().zip(&approx).map(|(e, a)| e - h * a).collect(),
            Layer::Lower => exact.iter().zip(&approx).map(|(e, a)| h * a - e).collect(),
        };
        let bf = bernoulli_full(grid, trace, &exact, zeta, params.delta, layer);
        let bn = bernoulli_bn(grid, &pots, &state, params, spec, layer)?;
        let db: Field = bf.iter().zip(&bn).map(|(x, y)| x - y).collect();
        out.push((r, db));
    }
    let r0: Field = (0..grid.m())
        .map(|n| 0.5 * params.rho1 * out[0].1[n] - 0.5 * params.rho2 * out[1].1[n])
        .collect();
    let (r2, _) = out.pop().expect("lower layer");
    let (r1, _) = out.pop().expect("upper layer");
    Ok(FullResiduals { r1, r2, r0 })
}

/// Residuals of the Kakinuma model evaluated on a full-model state.
#[derive(Debug, Clone, PartialEq)]
pub struct KakinumaResiduals {
    pub r1: PotentialVec,
    pub r2: PotentialVec,
    pub r0: Field,
    /// `sqrt(sum_i ||r_{l,i}||^2)` per layer.
    pub norm1: f64,
    pub norm2: f64,
    pub norm0: f64,
    /// `sum_l rho_l h_l ||r_l||^2`.
    pub weighted: f64,
}

/// Kakinuma potentials built from `(zeta, phi)` by the coupled solve, with the
/// full-model `dzeta/dt` inserted in the first two blocks.
pub fn residuals_kakinuma_from_full(
    grid: &PeriodicGrid,
    zeta: &[f64],
    phi: &[f64],
    b: &[f64],
    params: &NondimParams,
    spec: &ExpansionSpec,
    vertical_order: usize,
) -> Result<KakinumaResiduals> {
    let state = InterfaceState::new(zeta.to_vec(), b.to_vec(), params)?;
    let full = TransmissionSolver::new(grid, &state, params, vertical_order, ReferenceBackend::Krylov)?.solve(phi)?;
    let sys = CoupledSystem::new(grid, &state, params, spec, SolveOptions::default())?;
    let sol = sys.solve(&CoupledRhs::trace_only(grid, spec, grid.mean_free(phi)), None)?;
    let dz = &full.neumann;
    let mut blocks = Vec::with_capacity(2);
    for (layer, pots, sign) in [(Layer::Upper, &sol.phi1, 1.0), (Layer::Lower, &sol.phi2, -1.0)] {
        let h = params.depth(layer);
        let l = l_vector(state.thickness(layer), spec, layer, 0)?;
        let lp = sys.operator(layer).apply_l(pots)?;
        let r: PotentialVec = l
            .iter()
            .zip(&lp)
            .map(|(li, lpi)| (0..grid.m()).map(|n| li[n] * dz[n] / h + sign * lpi[n]).collect())
            .collect();
        blocks.push(r);
    }
    let traces: Vec<Field> = [(Layer::Upper, &sol.phi1), (Layer::Lower, &sol.phi2)]
        .iter()
        .map(|(layer, pots)| sys.operator(*layer).trace(pots))
        .collect::<Result<_>>()?;
    let fr = residuals_full_from_kakinuma(grid, zeta, b, &traces[0], &traces[1], params, spec, vertical_order)?;
    let r0: Field = fr.r0.iter().map(|v| -v).collect();
    let bn = |r: &PotentialVec| r.iter().map(|f| grid.inner(f, f)).sum::<f64>().sqrt();
    let r2 = blocks.pop().expect("lower");
    let r1 = blocks.pop().expect("upper");
    let (norm1, norm2) = (bn(&r1), bn(&r2));
    Ok(KakinumaResiduals {
        weighted: params.rho1 * params.h1 * norm1 * norm1 + params.rho2 * params.h2 * norm2 * norm2,
        norm0: grid.l2_norm(&r0),
        r1,
        r2,
        r0,
        norm1,
        norm2,
    })
}

/// `H^K(zeta, phi)` by the coupled solve.
pub fn hamiltonian_kakinuma(
    grid: &PeriodicGrid,
    zeta: &[f64],
    phi: &[f64],
    b: &[f64],
    params: &NondimParams,
    spec: &ExpansionSpec,
) -> Result<f64> {
    let state = InterfaceState::new(zeta.to_vec(), b.to_vec(), params)?;
    let sys = CoupledSystem::new(grid, &state, params, spec, SolveOptions::default())?;
    let sol = sys.solve(&CoupledRhs::trace_only(grid, spec, grid.mean_free(phi)), None)?;
    hamiltonian_k(&sys, &sol.phi1, &sol.phi2, params)
}

/// Both Hamiltonians and their signed difference `H^K - H^IW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianComparison {
    pub kakinuma: f64,
    pub full: f64,
    pub error: f64,
}

pub fn hamiltonian_error(
    grid: &PeriodicGrid,
    zeta: &[f64],
    phi: &[f64],
    b: &[f64],
    params: &NondimParams,
    spec: &ExpansionSpec,
    vertical_order: usize,
) -> Result<HamiltonianComparison> {
    let kakinuma = hamiltonian_kakinuma(grid, zeta, phi, b, params, spec)?;
    let state = InterfaceState::new(zeta.to_vec(), b.to_vec(), params)?;
    let sol = TransmissionSolver::new(grid, &state, params, vertical_order, ReferenceBackend::Krylov)?.solve(phi)?;
    let full = hamiltonian_from_solution(grid, zeta, &sol, params);
    Ok(HamiltonianComparison { kakinuma, full, error: kakinuma - full })
}

/// Hamiltonian error with the vertical order doubled until the full value
/// changes by less than `tol` relative; returns the comparison and the order used.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_error_converged(
    grid: &PeriodicGrid,
    zeta: &[f64],
    phi: &[f64],
    b: &[f64],
    params: &NondimParams,
    spec: &ExpansionSpec,
    initial_order: usize,
    max_order: usize,
    tol: f64,
) -> Result<(HamiltonianComparison, usize)> {
    let kakinuma = hamiltonian_kakinuma(grid, zeta, phi, b, params, spec)?;
    let state = InterfaceState::new(zeta.to_vec(), b.to_vec(), params)?;
    let full_at = |p: usize| -> Result<f64> {
        let sol = TransmissionSolver::new(grid, &state, params, p, ReferenceBackend::Krylov)?.solve(phi)?;
        Ok(hamiltonian_from_solution(grid, zeta, &sol, params))
    };
    let mut p = initial_order;
    let mut prev = full_at(p)?;
    loop {
        let next_p = 2 * p;
        if next_p > max_order {
            log::warn!("reference Hamiltonian not converged to {tol:e} at P = {p}");
            return Ok((HamiltonianComparison { kakinuma, full: prev, error: kakinuma - prev }, p));
        }
        let next = full_at(next_p)?;
        let change = (next - prev).abs() / next.abs().max(f64::MIN_POSITIVE);
        p = next_p;
        prev = next;
        if change < tol {
            return Ok((HamiltonianComparison { kakinuma, full: next, error: kakinuma - next }, p));
        }
    }
}

/// Flat-state symbol of `Lambda_l^(N)` per unit depth at wavenumber `xi`.
pub fn flat_kakinuma_symbol(xi: f64, params: &NondimParams, spec: &ExpansionSpec, layer: Layer) -> Result<f64> {
    let exps = spec.exponents(layer);
    let k = exps.len();
    let eps2 = params.depth(layer).powi(2) * params.delta * params.delta;
    let entry = |i: usize, j: usize| {
        let (pi, pj) = (exps[i] as f64, exps[j] as f64);
        let c = if exps[i] * exps[j] == 0 { 0.0 } else { pi * pj / (pi + pj - 1.0) / eps2 };
        xi * xi / (pi + pj + 1.0) + c
    };
    let mut a = nalgebra::DMatrix::zeros(k, k);
    let mut rhs = nalgebra::DVector::zeros(k);
    rhs[0] = 1.0;
    for j in 0..k {
        a[(0, j)] = 1.0;
        for i in 1..k {
            a[(i, j)] = entry(i, j) - entry(0, j);
        }
    }
    let coef = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| KakinumaError::SolverSingular("flat trace system".into()))?;
    Ok((0..k).map(|j| entry(0, j) * coef[j]).sum())
}

/// `(omega^2_full, omega^2_K)` of the linearized flows about rest.
pub fn dispersion_symbols(xi: f64, params: &NondimParams, spec: &ExpansionSpec) -> Result<(f64, f64)> {
    if xi == 0.0 {
        return Err(KakinumaError::ConstraintViolation("dispersion needs xi != 0".into()));
    }
    let s1 = flat_dtn_symbol(xi, params, Layer::Upper);
    let s2 = flat_dtn_symbol(xi, params, Layer::Lower);
    let full = 1.0 / (params.rho1 / s1 + params.rho2 / s2);
    let k1 = params.h1 * flat_kakinuma_symbol(xi, params, spec, Layer::Upper)?;
    let k2 = params.h2 * flat_kakinuma_symbol(xi, params, spec, Layer::Lower)?;
    Ok((full, 1.0 / (params.rho1 / k1 + params.rho2 / k2)))
}

fn rat(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite value")
}

fn int(v: u32) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

/// `tanh x` from its Lambert continued fraction truncated at `depth`.
fn tanh_rational(x: &BigRational, depth: u32) -> BigRational {
    let x2 = x * x;
    let mut tail = int(2 * depth + 1);
    for k in (1..depth).rev() {
        tail = int(2 * k + 1) + &x2 / tail;
    }
    x / (BigRational::one() + &x2 / tail)
}

fn exact_solve(mut a: Vec<Vec<BigRational>>, mut b: Vec<BigRational>) -> Option<Vec<BigRational>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).find(|&r| !a[r][c].is_zero())?;
        a.swap(piv, c);
        b.swap(piv, c);
        for r in 0..n {
            if r == c || a[r][c].is_zero() {
                continue;
            }
            let f = &a[r][c] / &a[c][c];
            for k in c..n {
                let v = &f * &a[c][k];
                a[r][k] -= v;
            }
            let v = &f * &b[c];
            b[r] -= v;
        }
    }
    Some((0..n).map(|i| &b[i] / &a[i][i]).collect())
}

/// Exact counterpart of [`flat_kakinuma_symbol`] multiplied by the depth.
fn kakinuma_symbol_exact(xi: &BigRational, depth: &BigRational, delta: &BigRational, exps: &[u32]) -> Option<BigRational> {
    let k = exps.len();
    let eps2 = depth * depth * delta * delta;
    let xi2 = xi * xi;
    let entry = |i: usize, j: usize| {
        let (pi, pj) = (exps[i], exps[j]);
        let mut v = &xi2 / int(pi + pj + 1);
        if pi * pj != 0 {
            v += int(pi * pj) / int(pi + pj - 1) / &eps2;
        }
        v
    };
    let mut a = vec![vec![BigRational::zero(); k]; k];
    let mut rhs = vec![BigRational::zero(); k];
    rhs[0] = BigRational::one();
    for j in 0..k {
        a[0][j] = BigRational::one();
        for (i, row) in a.iter_mut().enumerate().skip(1) {
            row[j] = entry(i, j) - entry(0, j);
        }
    }
    let coef = exact_solve(a, rhs)?;
    Some(depth * (0..k).map(|j| entry(0, j) * &coef[j]).fold(BigRational::zero(), |s, v| s + v))
}

fn sigma_exact(x: &BigRational, depth: &BigRational, delta: &BigRational) -> BigRational {
    x / delta * tanh_rational(&(depth * delta * x), 40)
}

/// `sigma_l(xi) - h_l Lambda_l^(N)(xi)` on a flat interface in rational arithmetic.
pub fn flat_residual_symbol_exact(xi: f64, params: &NondimParams, spec: &ExpansionSpec, layer: Layer) -> Result<f64> {
    let (x, d) = (rat(xi.abs()), rat(params.delta));
    let r1 = rat(params.rho1);
    let h1 = rat(params.h1);
    let depth = match layer {
        Layer::Upper => h1,
        Layer::Lower => (BigRational::one() - &r1) / (BigRational::one() - &r1 / &h1),
    };
    let k = kakinuma_symbol_exact(&x, &depth, &d, &spec.exponents(layer))
        .ok_or_else(|| KakinumaError::SolverSingular("exact flat trace system".into()))?;
    (sigma_exact(&x, &depth, &d) - k)
        .to_f64()
        .ok_or_else(|| KakinumaError::SolverSingular("residual not representable".into()))
}

/// `omega^2_K - omega^2_full` at wavenumber `xi`, evaluated in rational
/// arithmetic from the binary values of the inputs.
pub fn dispersion_gap_exact(xi: f64, params: &NondimParams, spec: &ExpansionSpec) -> Result<f64> {
    if xi == 0.0 {
        return Err(KakinumaError::ConstraintViolation("dispersion needs xi != 0".into()));
    }
    let (x, r1, h1, d) = (rat(xi.abs()), rat(params.rho1), rat(params.h1), rat(params.delta));
    let r2 = BigRational::one() - &r1;
    let h2 = &r2 / (BigRational::one() - &r1 / &h1);
    let full = BigRational::one() / (&r1 / sigma_exact(&x, &h1, &d) + &r2 / sigma_exact(&x, &h2, &d));
    let singular = || KakinumaError::SolverSingular("exact flat trace system".into());
    let k1 = kakinuma_symbol_exact(&x, &h1, &d, &spec.exponents(Layer::Upper)).ok_or_else(singular)?;
    let k2 = kakinuma_symbol_exact(&x, &h2, &d, &spec.exponents(Layer::Lower)).ok_or_else(singular)?;
    let kak = BigRational::one() / (&r1 / k1 + &r2 / k2);
    (kak - full)
        .to_f64()
        .ok_or_else(|| KakinumaError::SolverSingular("gap not representable".into()))
}

/// Least-squares fit of `log err` against `log delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    pub deltas: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Samples dropped for lying below the noise floor, as `(delta, error)`.
    pub excluded: Vec<(f64, f64)>,
}

impl OrderFit {
    pub fn conclusive(&self) -> bool {
        self.r2 >= R2_THRESHOLD
    }
}

pub fn order_fit(deltas: &[f64], errors: &[f64]) -> Result<OrderFit> {
    order_fit_with_floor(deltas, errors, DEFAULT_NOISE_FLOOR)
}

pub fn order_fit_with_floor(deltas: &[f64], errors: &[f64], floor: f64) -> Result<OrderFit> {
    if deltas.len() != errors.len() {
        return Err(KakinumaError::GridMismatch("deltas and errors differ in length".into()));
    }
    if deltas.windows(2).any(|w| !(w[1] < w[0])) || deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(KakinumaError::ConstraintViolation("deltas must be positive and strictly decreasing".into()));
    }
    let mut kept_d = Vec::new();
    let mut kept_e = Vec::new();
    let mut excluded = Vec::new();
    for (&d, &e) in deltas.iter().zip(errors) {
        if e.is_finite() && e > floor {
            kept_d.push(d);
            kept_e.push(e);
        } else {
            log::warn!("order fit: sample delta = {d} with error {e:e} is below the noise floor {floor:e}");
            excluded.push((d, e));
        }
    }
    if kept_d.len() < MIN_FIT_SAMPLES {
        return Err(KakinumaError::BelowNoiseFloor { kept: kept_d.len(), required: MIN_FIT_SAMPLES });
    }
    let x: Vec<f64> = kept_d.iter().map(|d| d.ln()).collect();
    let y: Vec<f64> = kept_e.iter().map(|e| e.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).min(1.0) };
    Ok(OrderFit { deltas: kept_d, errors: kept_e, slope, intercept, r2, excluded })
}

/// Profiles and resolution of a delta sweep; shapes are fixed relative to the depths.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub rho1: f64,
    pub h1: f64,
    pub spec: ExpansionSpec,
    pub deltas: Vec<f64>,
    pub m: usize,
    pub vertical_order: usize,
    /// `zeta = zeta_amp * min(h1, h2) * sin(x)`.
    pub zeta_amp: f64,
    /// `b = b_amp * h2 * sin(2x)`.
    pub b_amp: f64,
    /// `phi = phi_amp * cos(x)`.
    pub phi_amp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub delta: f64,
    pub h1delta: f64,
    pub h2delta: f64,
    pub err_r1: f64,
    pub err_r2: f64,
    pub err_r0: f64,
    pub err_h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Fits for `err_r1, err_r2, err_r0, err_H`; `None` when too few samples clear the floor.
    pub fits: Vec<(String, Option<OrderFit>)>,
}

pub const SWEEP_COLUMNS: [&str; 7] = ["delta", "h1delta", "h2delta", "err_r1", "err_r2", "err_r0", "err_H"];

impl SweepResult {
    pub fn to_csv(&self, metadata: &[(String, String)]) -> String {
        let mut s = String::new();
        for (k, v) in metadata {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s.push_str(&SWEEP_COLUMNS.join(","));
        s.push('\n');
        for r in &self.rows {
            let vals = [r.delta, r.h1delta, r.h2delta, r.err_r1, r.err_r2, r.err_r0, r.err_h];
            s.push_str(&vals.iter().map(|v| fmt_g17(*v)).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }
}

pub fn sweep_point(cfg: &SweepConfig, delta: f64) -> Result<SweepRow> {
    let params = crate::params_core::validate_params(cfg.rho1, cfg.h1, delta)?;
    let grid = PeriodicGrid::standard(cfg.m)?;
    let zeta = grid.sample(|x| cfg.zeta_amp * params.h1.min(params.h2) * x.sin());
    let b = grid.sample(|x| cfg.b_amp * params.h2 * (2.0 * x).sin());
    let phi = grid.sample(|x| cfg.phi_amp * x.cos());
    let res = residuals_kakinuma_from_full(&grid, &zeta, &phi, &b, &params, &cfg.spec, cfg.vertical_order)?;
    let state = InterfaceState::new(zeta.clone(), b.clone(), &params)?;
    let sys = CoupledSystem::new(&grid, &state, &params, &cfg.spec, SolveOptions::default())?;
    let sol = sys.solve(&CoupledRhs::trace_only(&grid, &cfg.spec, phi.clone()), None)?;
    let t1 = sys.operator(Layer::Upper).trace(&sol.phi1)?;
    let t2 = sys.operator(Layer::Lower).trace(&sol.phi2)?;
    let fr = residuals_full_from_kakinuma(&grid, &zeta, &b, &t1, &t2, &params, &cfg.spec, cfg.vertical_order)?;
    let h = hamiltonian_error(&grid, &zeta, &phi, &b, &params, &cfg.spec, cfg.vertical_order)?;
    Ok(SweepRow {
        delta,
        h1delta: params.delta1(),
        h2delta: params.delta2(),
        err_r1: grid.l2_norm(&fr.r1),
        err_r2: grid.l2_norm(&fr.r2),
        err_r0: res.norm0,
        err_h: h.error.abs(),
    })
}

/// Runs the sweep points concurrently; rows come back in the order of `cfg.deltas`.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    if cfg.deltas.is_empty() {
        return Err(KakinumaError::ConstraintViolation("empty delta list".into()));
    }
    let rows: Vec<SweepRow> = cfg.deltas.par_iter().map(|&d| sweep_point(cfg, d)).collect::<Result<_>>()?;
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let column = |f: fn(&SweepRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let fits = [
        ("err_r1", column(|r| r.err_r1)),
        ("err_r2", column(|r| r.err_r2)),
        ("err_r0", column(|r| r.err_r0)),
        ("err_H", column(|r| r.err_h)),
    ]
    .into_iter()
    .map(|(name, errs)| {
        let fit = match order_fit(&deltas, &errs) {
            Ok(f) => Some(f),
            Err(KakinumaError::BelowNoiseFloor { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok((name.to_string(), fit))
    })
    .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows, fits })
}

/// `||Lambda_l phi - h_l Lambda_l^(N) phi||` for `phi = amp cos(xi x)` on a flat
/// interface, with the exact symbol standing in for `Lambda_l`.
pub fn flat_residual_norm(
    grid: &PeriodicGrid,
    xi: f64,
    amp: f64,
    params: &NondimParams,
    spec: &ExpansionSpec,
    layer: Layer,
) -> Result<f64> {
    let state = InterfaceState::flat(grid, params);
    let trace = grid.sample(|x| amp * (xi * x).cos());
    let approx = approx_dtn(grid, &trace, &state, params, spec, layer)?;
    let sigma = flat_dtn_symbol(xi, params, layer);
    let h = params.depth(layer);
    let r: Field = trace.iter().zip(&approx).map(|(t, a)| sigma * t - h * a).collect();
    Ok(grid.l2_norm(&r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params_core::{validate_params, ExpansionCase};
    use num::Signed;

    fn params(delta: f64) -> NondimParams {
        validate_params(0.4, 0.8, delta).unwrap()
    }

    #[test]
    fn zero_data_gives_zero_residuals() {
        let g = PeriodicGrid::standard(16).unwrap();
        let p = params(0.1);
        let spec = ExpansionSpec::new(1, ExpansionCase::H1);
        let z = g.sample(|x| 0.05 * x.sin());
        let fr = residuals_full_from_kakinuma(&g, &z, &g.zeros(), &g.zeros(), &g.zeros(), &p, &spec, 12).unwrap();
        assert!(fr.r1.iter().chain(&fr.r2).chain(&fr.r0).all(|v| v.abs() < 1e-15));
        let kr = residuals_kakinuma_from_full(&g, &z, &g.zeros(), &g.zeros(), &p, &spec, 12).unwrap();
        assert_eq!((kr.norm1, kr.norm2, kr.norm0), (0.0, 0.0, 0.0));
        let h = hamiltonian_error(&g, &g.zeros(), &g.zeros(), &g.zeros(), &p, &spec, 12).unwrap();
        assert_eq!(h.error, 0.0);
    }

    #[test]
    fn flat_n0_residual_matches_taylor_remainder() {
        let g = PeriodicGrid::standard(32).unwrap();
        let p = params(0.05);
        let spec = ExpansionSpec::new(0, ExpansionCase::H1);
        let amp = 0.3;
        let tr = g.sample(|x| amp * x.cos());
        let fr = residuals_full_from_kakinuma(&g, &g.zeros(), &g.zeros(), &tr, &tr, &p, &spec, 16).unwrap();
        let want = (p.h1 - flat_dtn_symbol(1.0, &p, Layer::Upper)).abs() * amp * std::f64::consts::PI.sqrt();
        let got = g.l2_norm(&fr.r1);
        assert!((got - want).abs() < 1e-9 * want.max(1e-3), "{got} {want}");
        let taylor = p.h1 * p.delta1().powi(2) / 3.0 * amp * std::f64::consts::PI.sqrt();
        assert!((got / taylor - 1.0).abs() < 0.01);
        let sym = flat_residual_norm(&g, 1.0, amp, &p, &spec, Layer::Upper).unwrap();
        assert!((sym - got).abs() < 1e-9 * got);
    }

    #[test]
    fn flat_kakinuma_residuals_match_symbol_algebra() {
        let g = PeriodicGrid::standard(32).unwrap();
        let p = params(0.3);
        let spec = ExpansionSpec::new(1, ExpansionCase::H2);
        let phi = g.sample(|x| (2.0 * x).cos());
        let kr = residuals_kakinuma_from_full(&g, &g.zeros(), &phi, &g.zeros(), &p, &spec, 16).unwrap();
        let (wf, wk) = dispersion_symbols(2.0, &p, &spec).unwrap();
        for (layer, r) in [(Layer::Upper, &kr.r1), (Layer::Lower, &kr.r2)] {
            let amp = (wf - wk) / p.depth(layer);
            for comp in r.iter() {
                let want: Field = phi.iter().map(|v| amp * v).collect();
                let err = comp.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(err < 1e-9 * amp.abs().max(1e-6), "{err} {amp}");
            }
        }
    }

    #[test]
    fn flat_hamiltonian_error_matches_dispersion_symbols() {
        let g = PeriodicGrid::standard(32).unwrap();
        let p = params(0.3);
        let spec = ExpansionSpec::new(1, ExpansionCase::H1);
        let phi = g.sample(|x| x.cos() + 0.5 * (3.0 * x).sin());
        let h = hamiltonian_error(&g, &g.zeros(), &phi, &g.zeros(), &p, &spec, 16).unwrap();
        let pi = std::f64::consts::PI;
        let (f1, k1) = dispersion_symbols(1.0, &p, &spec).unwrap();
        let (f3, k3) = dispersion_symbols(3.0, &p, &spec).unwrap();
        let want = 0.5 * pi * ((k1 - f1) + 0.25 * (k3 - f3));
        assert!((h.error - want).abs() < 1e-9 * want.abs(), "{} {want}", h.error);
        assert!((h.full - 0.5 * pi * (f1 + 0.25 * f3)).abs() < 1e-9);
    }

    #[test]
    fn hamiltonian_is_gauge_independent() {
        let g = PeriodicGrid::standard(32).unwrap();
        let p = params(0.2);
        let spec = ExpansionSpec::new(1, ExpansionCase::H2);
        let zeta = g.sample(|x| 0.05 * x.sin());
        let b = g.sample(|x| 0.1 * p.h2 * (2.0 * x).sin());
        let phi = g.sample(|x| x.cos());
        let state = InterfaceState::new(zeta, b, &p).unwrap();
        let sys = CoupledSystem::new(&g, &state, &p, &spec, SolveOptions::default()).unwrap();
        let sol = sys.solve(&CoupledRhs::trace_only(&g, &spec, phi), None).unwrap();
        let h0 = hamiltonian_k(&sys, &sol.phi1, &sol.phi2, &p).unwrap();
        let mut a = sol.phi1.clone();
        let mut c = sol.phi2.clone();
        a[0].iter_mut().for_each(|v| *v += 0.7 * p.rho2);
        c[0].iter_mut().for_each(|v| *v += 0.7 * p.rho1);
        let h1 = hamiltonian_k(&sys, &a, &c, &p).unwrap();
        assert!((h1 - h0).abs() < 1e-12 * h0);
    }

    #[test]
    fn dispersion_examples() {
        let spec0 = ExpansionSpec::new(0, ExpansionCase::H1);
        let p = params(0.1);
        for xi in [0.5, 1.0, 3.0] {
            let (_, k) = dispersion_symbols(xi, &p, &spec0).unwrap();
            assert!((k - xi * xi).abs() < 1e-12 * xi * xi);
        }
        let (f, _) = dispersion_symbols(1e-3, &p, &spec0).unwrap();
        assert!((f / 1e-6 - 1.0).abs() < 1e-6);
        assert!(dispersion_symbols(0.0, &p, &spec0).is_err());
    }

    #[test]
    fn exact_gap_agrees_with_float_where_resolvable() {
        for n in 0..3 {
            let spec = ExpansionSpec::new(n, ExpansionCase::H2);
            let p = params(0.5);
            let (f, k) = dispersion_symbols(1.0, &p, &spec).unwrap();
            let g = dispersion_gap_exact(1.0, &p, &spec).unwrap();
            assert!((g - (k - f)).abs() < 1e-12, "n={n} {g} {}", k - f);
        }
    }

    #[test]
    fn tanh_rational_matches_float() {
        for x in [0.01, 0.3, 1.0, 2.0] {
            let t = tanh_rational(&rat(x), 40).to_f64().unwrap();
            assert!((t - x.tanh()).abs() < 1e-16);
        }
        let x = rat(0.5);
        let a = tanh_rational(&x, 30);
        let b = tanh_rational(&x, 40);
        assert!((a - b).abs() < BigRational::new(BigInt::one(), BigInt::from(10).pow(60)));
    }

    #[test]
    fn exact_flat_residual_matches_grid_route() {
        let g = PeriodicGrid::standard(32).unwrap();
        for n in 0..2 {
            let spec = ExpansionSpec::new(n, ExpansionCase::H2);
            for layer in [Layer::Upper, Layer::Lower] {
                let p = params(0.3);
                let e = flat_residual_symbol_exact(1.0, &p, &spec, layer).unwrap();
                let grid = flat_residual_norm(&g, 1.0, 1.0, &p, &spec, layer).unwrap();
                assert!((e.abs() * std::f64::consts::PI.sqrt() - grid).abs() < 1e-11, "{e} {grid}");
            }
        }
        let p = params(0.05);
        let e = flat_residual_symbol_exact(1.0, &p, &ExpansionSpec::new(0, ExpansionCase::H1), Layer::Upper).unwrap();
        let taylor = p.h1 * p.delta1().powi(2) / 3.0;
        assert!((e.abs() / taylor - 1.0).abs() < 0.01, "{e} {taylor}");
    }

    #[test]
    fn flat_symbol_float_and_exact_agree() {
        let p = params(0.25);
        for n in 0..3 {
            let spec = ExpansionSpec::new(n, ExpansionCase::H1);
            for layer in [Layer::Upper, Layer::Lower] {
                let f = flat_kakinuma_symbol(1.5, &p, &spec, layer).unwrap() * p.depth(layer);
                let e = kakinuma_symbol_exact(&rat(1.5), &rat(p.depth(layer)), &rat(0.25), &spec.exponents(layer)).unwrap();
                assert!((f - e.to_f64().unwrap()).abs() < 1e-13 * f);
            }
        }
    }

    #[test]
    fn order_fit_synthetic() {
        let d = DEFAULT_DELTAS.to_vec();
        let e2: Vec<f64> = d.iter().map(|x| 3.0 * x * x).collect();
        let f = order_fit(&d, &e2).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let e6: Vec<f64> = d.iter().map(|x| 0.5 * x.powi(6)).collect();
        assert!((order_fit(&d, &e6).unwrap().slope - 6.0).abs() < 1e-12);
        let wide: Vec<f64> = (0..12).map(|k| 0.5f64.powi(k)).collect();
        let mixed: Vec<f64> = wide.iter().map(|x| 1e-6 * x * x + x.powi(6)).collect();
        let m = order_fit(&wide, &mixed).unwrap();
        assert!(m.slope > 2.0 && m.slope < 6.0 && !m.conclusive());
    }

    #[test]
    fn order_fit_floor_and_errors() {
        let d = DEFAULT_DELTAS.to_vec();
        let mut e: Vec<f64> = d.iter().map(|x| x.powi(6)).collect();
        e[6] = 1e-15;
        let f = order_fit(&d, &e).unwrap();
        assert_eq!(f.excluded, vec![(0.02, 1e-15)]);
        assert_eq!(f.deltas.len(), 6);
        let tiny = vec![1e-14; 7];
        assert_eq!(order_fit(&d, &tiny), Err(KakinumaError::BelowNoiseFloor { kept: 0, required: 4 }));
        assert!(order_fit(&[0.1, 0.2, 0.05, 0.01], &[1.0; 4]).is_err());
    }

    #[test]
    fn sweep_rows_keep_delta_order_and_csv_shape() {
        let cfg = SweepConfig {
            rho1: 0.4,
            h1: 0.8,
            spec: ExpansionSpec::new(0, ExpansionCase::H1),
            deltas: vec![0.2, 0.1, 0.05, 0.025],
            m: 16,
            vertical_order: 12,
            zeta_amp: 0.0,
            b_amp: 0.0,
            phi_amp: 1.0,
        };
        let res = run_sweep(&cfg).unwrap();
        assert_eq!(res.rows.iter().map(|r| r.delta).collect::<Vec<_>>(), cfg.deltas);
        let fit = res.fits[0].1.as_ref().unwrap();
        assert!((fit.slope - 2.0).abs() < 0.1, "{}", fit.slope);
        let csv = res.to_csv(&[("config_hash".into(), "abc".into())]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# config_hash=abc");
        assert_eq!(lines[1], SWEEP_COLUMNS.join(","));
        assert_eq!(lines.len(), 6);
        assert!(run_sweep(&SweepConfig { deltas: vec![], ..cfg }).is_err());
    }

    #[test]
    fn residuals_ignore_trace_constants() {
        let g = PeriodicGrid::standard(16).unwrap();
        let p = params(0.2);
        let spec = ExpansionSpec::new(1, ExpansionCase::H2);
        let z = g.sample(|x| 0.08 * x.sin());
        let b = g.sample(|x| 0.1 * p.h2 * (2.0 * x).sin());
        let t1 = g.sample(|x| x.cos());
        let t2 = g.sample(|x| -0.5 * x.cos() + 0.2 * (2.0 * x).sin());
        let base = residuals_full_from_kakinuma(&g, &z, &b, &t1, &t2, &p, &spec, 24).unwrap();
        let s1: Field = t1.iter().map(|v| v + 0.3).collect();
        let s2: Field = t2.iter().map(|v| v - 1.7).collect();
        let shifted = residuals_full_from_kakinuma(&g, &z, &b, &s1, &s2, &p, &spec, 24).unwrap();
        for (a, c) in [(&base.r1, &shifted.r1), (&base.r2, &shifted.r2), (&base.r0, &shifted.r0)] {
            assert!(a.iter().zip(c).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn sweep_point_with_wavy_bottom_and_interface() {
        let cfg = SweepConfig {
            rho1: 0.4,
            h1: 0.8,
            spec: ExpansionSpec::new(1, ExpansionCase::H2),
            deltas: vec![0.2],
            m: 16,
            vertical_order: 24,
            zeta_amp: 0.1,
            b_amp: 0.1,
            phi_amp: 1.0,
        };
        let row = sweep_point(&cfg, 0.2).unwrap();
        assert!(row.err_r1.is_finite() && row.err_r1 > 0.0);
        assert!(row.err_r2.is_finite() && row.err_h.is_finite());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn order_fit_recovers_power_laws(c in 1e-3f64..1e3, k in 0.5f64..10.0) {
                let d = DEFAULT_DELTAS.to_vec();
                let e: Vec<f64> = d.iter().map(|x| c * x.powf(k)).collect();
                prop_assume!(e.iter().all(|v| *v > DEFAULT_NOISE_FLOOR));
                let f = order_fit(&d, &e).unwrap();
                prop_assert!((f.slope - k).abs() < 1e-9);
                prop_assert!(f.conclusive());
            }
        }
    }
}
