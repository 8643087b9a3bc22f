//! Linear systems of the Kakinuma model: the per-layer trace problem, the
//! coupled system with its gauge row, initial-data preparation from the
//! canonical variables, the approximate Dirichlet-to-Neumann maps and the
//! recovery of time derivatives.
//!
//! Unknown layout of the coupled system: `[phi1_0..phi1_N, phi2_0..phi2_N*, lambda]`.
//! Equation blocks: the divergence row, the constraint rows of layer 1 and of
//! layer 2, the trace row and finally the scalar gauge row `mean(phi1_0) = 0`.
//! The multiplier `lambda` enters the divergence row as a constant, which is
//! the left null vector of the unaugmented system.
//!
//! Spectral derivatives annihilate the Nyquist mode, so each equation block
//! also carries the Nyquist component of one paired unknown block. This pins
//! the Nyquist components of the solution to zero.

use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;

use crate::error::{KakinumaError, Result};
use crate::kakinuma_ops::{InterfaceState, LayerGeometry, LayerOperator};
use crate::linalg::{assemble_dense, gmres, DenseSolver, GmresOptions, GmresReport, ModalPreconditioner};
use crate::params_core::{ExpansionSpec, Layer, NondimParams};
use crate::spectral_grid::{Field, PeriodicGrid, PotentialVec};

pub const RESIDUAL_TOL: f64 = 1e-10;
pub const COMPATIBILITY_TOL: f64 = 1e-9;
const GAUGE_TOL: f64 = 1e-8;

/// Right-hand side of the coupled system. The divergence row reads `d f3/dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRhs {
    pub f1prime: PotentialVec,
    pub f2prime: PotentialVec,
    pub f3: Field,
    pub f4: Field,
}

impl CoupledRhs {
    /// Only the trace datum is nonzero.
    pub fn trace_only(grid: &PeriodicGrid, spec: &ExpansionSpec, f4: Field) -> Self {
        CoupledRhs {
            f1prime: vec![grid.zeros(); spec.n],
            f2prime: vec![grid.zeros(); spec.nstar],
            f3: grid.zeros(),
            f4,
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| a * x).collect::<Field>();
        CoupledRhs {
            f1prime: self.f1prime.iter().map(|f| s(f)).collect(),
            f2prime: self.f2prime.iter().map(|f| s(f)).collect(),
            f3: s(&self.f3),
            f4: s(&self.f4),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSolution {
    pub phi1: PotentialVec,
    pub phi2: PotentialVec,
    /// Multiplier of the augmented row; zero up to rounding for solvable data.
    pub gauge: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Assembled matrix with an LU factorization.
    #[default]
    Dense,
    /// Restarted GMRES preconditioned by the exact inverse at the mean state.
    Krylov,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveOptions {
    pub backend: Backend,
    pub gmres: GmresOptions,
}

impl SolveOptions {
    pub fn krylov() -> Self {
        SolveOptions { backend: Backend::Krylov, gmres: GmresOptions::default() }
    }
}

fn split_blocks(x: &[f64], m: usize, count: usize) -> PotentialVec {
    (0..count).map(|j| x[j * m..(j + 1) * m].to_vec()).collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn add_nyquist(grid: &PeriodicGrid, out: &mut [f64], x: &[f64]) {
    let ny = grid.nyquist_part(x);
    out.iter_mut().zip(&ny).for_each(|(a, b)| *a += b);
}

fn strip_nyquist(grid: &PeriodicGrid, f: &[f64]) -> Field {
    let ny = grid.nyquist_part(f);
    f.iter().zip(&ny).map(|(a, b)| a - b).collect()
}

fn check_len(grid: &PeriodicGrid, f: &[f64], what: &str) -> Result<()> {
    if f.len() != grid.m() {
        return Err(KakinumaError::GridMismatch(format!("{what} has length {}, grid has {}", f.len(), grid.m())));
    }
    Ok(())
}

fn layer_operator<'g>(
    grid: &'g PeriodicGrid,
    state: &InterfaceState,
    params: &NondimParams,
    spec: &ExpansionSpec,
    layer: Layer,
) -> Result<LayerOperator<'g>> {
    let geom = LayerGeometry::from_state(state, params, spec, layer);
    LayerOperator::new(grid, &geom).map_err(|e| match e {
        KakinumaError::Cavitation { min_h, .. } => KakinumaError::Cavitation { layer: layer.index(), min_h },
        other => other,
    })
}

fn mean_state(grid: &PeriodicGrid, state: &InterfaceState, params: &NondimParams) -> Result<InterfaceState> {
    let z = grid.mean(state.zeta());
    let b = grid.mean(state.b());
    InterfaceState::new(vec![z; grid.m()], vec![b; grid.m()], params)
}

/// The coupled system at a fixed interface state. Factorizations are built
/// lazily on first use and shared by later solves.
pub struct CoupledSystem<'g> {
    grid: &'g PeriodicGrid,
    params: NondimParams,
    spec: ExpansionSpec,
    state: InterfaceState,
    op1: LayerOperator<'g>,
    op2: LayerOperator<'g>,
    k1: usize,
    k2: usize,
    opts: SolveOptions,
    dense: OnceLock<DenseSolver>,
    precond: OnceLock<Arc<ModalPreconditioner>>,
}

impl<'g> CoupledSystem<'g> {
    pub fn new(
        grid: &'g PeriodicGrid,
        state: &InterfaceState,
        params: &NondimParams,
        spec: &ExpansionSpec,
        opts: SolveOptions,
    ) -> Result<Self> {
        spec.validate()?;
        check_len(grid, state.zeta(), "zeta")?;
        let op1 = layer_operator(grid, state, params, spec, Layer::Upper)?;
        let op2 = layer_operator(grid, state, params, spec, Layer::Lower)?;
        Ok(CoupledSystem {
            grid,
            params: *params,
            spec: spec.clone(),
            state: state.clone(),
            k1: spec.count(Layer::Upper),
            k2: spec.count(Layer::Lower),
            op1,
            op2,
            opts,
            dense: OnceLock::new(),
            precond: OnceLock::new(),
        })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.grid
    }

    pub fn state(&self) -> &InterfaceState {
        &self.state
    }

    pub fn operator(&self, layer: Layer) -> &LayerOperator<'g> {
        match layer {
            Layer::Upper => &self.op1,
            Layer::Lower => &self.op2,
        }
    }

    /// Number of unknowns without the multiplier.
    pub fn field_len(&self) -> usize {
        (self.k1 + self.k2) * self.grid.m()
    }

    fn apply_fields(&self, x: &[f64], lam: f64) -> Vec<f64> {
        let m = self.grid.m();
        let (k1, k2) = (self.k1, self.k2);
        let phi1 = split_blocks(x, m, k1);
        let phi2 = split_blocks(&x[k1 * m..], m, k2);
        let r1 = self.op1.apply_call(&phi1).expect("validated shapes");
        let r2 = self.op2.apply_call(&phi2).expect("validated shapes");
        let t1 = self.op1.trace(&phi1).expect("validated shapes");
        let t2 = self.op2.trace(&phi2).expect("validated shapes");
        let (h1, h2) = (self.params.h1, self.params.h2);
        let (rho1, rho2) = (self.params.rho1, self.params.rho2);
        let mut y = Vec::with_capacity(self.field_len() + 1);
        let mut div: Field = (0..m).map(|n| h1 * r1[0][n] + h2 * r2[0][n] + lam).collect();
        add_nyquist(self.grid, &mut div, &phi1[0]);
        y.extend(div);
        for i in 1..k1 {
            let mut row = r1[i].clone();
            add_nyquist(self.grid, &mut row, &phi1[i]);
            y.extend(row);
        }
        for j in 1..k2 {
            let mut row = r2[j].clone();
            add_nyquist(self.grid, &mut row, &phi2[j]);
            y.extend(row);
        }
        let mut tr: Field = (0..m).map(|n| -rho1 * t1[n] + rho2 * t2[n]).collect();
        add_nyquist(self.grid, &mut tr, &phi2[0]);
        y.extend(tr);
        y
    }

    /// Square system with the multiplier column and the gauge row.
    pub fn apply_augmented(&self, x: &[f64]) -> Vec<f64> {
        let nf = self.field_len();
        let mut y = self.apply_fields(&x[..nf], x[nf]);
        y.push(self.grid.mean(&x[..self.grid.m()]));
        y
    }

    /// The Nyquist-pinned system before augmentation; it has a one
    /// dimensional kernel.
    pub fn apply_unaugmented(&self, x: &[f64]) -> Vec<f64> {
        self.apply_fields(x, 0.0)
    }

    pub fn dense_matrix(&self, augmented: bool) -> DMatrix<f64> {
        if augmented {
            assemble_dense(self.field_len() + 1, |x| self.apply_augmented(x))
        } else {
            assemble_dense(self.field_len(), |x| self.apply_unaugmented(x))
        }
    }

    pub fn rhs_vector(&self, rhs: &CoupledRhs) -> Result<Vec<f64>> {
        if rhs.f1prime.len() != self.k1 - 1 {
            return Err(KakinumaError::IndexOutOfRange { index: rhs.f1prime.len(), count: self.k1 - 1 });
        }
        if rhs.f2prime.len() != self.k2 - 1 {
            return Err(KakinumaError::IndexOutOfRange { index: rhs.f2prime.len(), count: self.k2 - 1 });
        }
        let g = self.grid;
        check_len(g, &rhs.f3, "f3")?;
        check_len(g, &rhs.f4, "f4")?;
        let mut b = Vec::with_capacity(self.field_len() + 1);
        b.extend(g.deriv(&rhs.f3, 1));
        for f in rhs.f1prime.iter().chain(&rhs.f2prime) {
            check_len(g, f, "constraint datum")?;
            b.extend(strip_nyquist(g, f));
        }
        b.extend(strip_nyquist(g, &rhs.f4));
        b.push(0.0);
        Ok(b)
    }

    fn dense_solver(&self) -> Result<&DenseSolver> {
        if let Some(s) = self.dense.get() {
            return Ok(s);
        }
        let s = DenseSolver::new(self.dense_matrix(true))?;
        Ok(self.dense.get_or_init(|| s))
    }

    /// Krylov preconditioner built at the mean interface state.
    pub fn preconditioner(&self) -> Result<Arc<ModalPreconditioner>> {
        if let Some(p) = self.precond.get() {
            return Ok(p.clone());
        }
        let flat = mean_state(self.grid, &self.state, &self.params)?;
        let fsys = CoupledSystem::new(self.grid, &flat, &self.params, &self.spec, self.opts)?;
        let p = ModalPreconditioner::probe(self.grid, self.k1 + self.k2, true, |x| fsys.apply_augmented(x))?;
        Ok(self.precond.get_or_init(|| Arc::new(p)).clone())
    }

    /// Reuses a preconditioner built for another state with the same means.
    pub fn with_preconditioner(self, pc: Arc<ModalPreconditioner>) -> Self {
        let _ = self.precond.set(pc);
        self
    }

    /// Solves the augmented system. `warm` seeds the Krylov iteration.
    pub fn solve(&self, rhs: &CoupledRhs, warm: Option<&CoupledSolution>) -> Result<CoupledSolution> {
        let b = self.rhs_vector(rhs)?;
        let bmax = max_abs(&b);
        let nf = self.field_len();
        let m = self.grid.m();
        if bmax == 0.0 {
            return Ok(CoupledSolution {
                phi1: vec![self.grid.zeros(); self.k1],
                phi2: vec![self.grid.zeros(); self.k2],
                gauge: 0.0,
            });
        }
        let x = match self.opts.backend {
            Backend::Dense => {
                let x = self.dense_solver()?.solve(&b)?;
                let ax = self.apply_augmented(&x);
                let r: Vec<f64> = ax.iter().zip(&b).map(|(p, q)| p - q).collect();
                let rel = norm2(&r) / norm2(&b);
                if rel > RESIDUAL_TOL {
                    return Err(KakinumaError::SolverSingular(format!("dense residual {rel:e}")));
                }
                x
            }
            Backend::Krylov => {
                let pc = self.preconditioner()?;
                let x0 = warm.map(|w| {
                    let mut v: Vec<f64> = w.phi1.iter().chain(&w.phi2).flatten().copied().collect();
                    v.push(w.gauge);
                    v
                });
                let (x, _rep): (Vec<f64>, GmresReport) = gmres(
                    |v| self.apply_augmented(v),
                    |r| pc.apply(self.grid, r),
                    &b,
                    x0.as_deref(),
                    &self.opts.gmres,
                )?;
                x
            }
        };
        let lam = x[nf];
        if lam.abs() > GAUGE_TOL * bmax {
            return Err(KakinumaError::GaugeInconsistency(lam));
        }
        Ok(CoupledSolution {
            phi1: split_blocks(&x, m, self.k1),
            phi2: split_blocks(&x[self.k1 * m..], m, self.k2),
            gauge: lam,
        })
    }

    /// `(d zeta/dt)` from both layers: `-h1 Lambda1 phi1` and `h2 Lambda2 phi2`.
    pub fn dzeta_dt_pair(&self, phi1: &[Field], phi2: &[Field]) -> Result<(Field, Field)> {
        let l1 = self.op1.apply_l(phi1)?;
        let l2 = self.op2.apply_l(phi2)?;
        let (h1, h2) = (self.params.h1, self.params.h2);
        Ok((l1[0].iter().map(|v| -h1 * v).collect(), l2[0].iter().map(|v| h2 * v).collect()))
    }

    /// Recovers `(dzeta/dt, dphi1/dt, dphi2/dt)` for potentials that satisfy
    /// the compatibility conditions by differentiating them in time.
    pub fn recover_time_derivatives(
        &self,
        phi1: &[Field],
        phi2: &[Field],
        warm: Option<&CoupledSolution>,
    ) -> Result<(Field, CoupledSolution)> {
        let (za, zb) = self.dzeta_dt_pair(phi1, phi2)?;
        let diff: Field = za.iter().zip(&zb).map(|(a, b)| a - b).collect();
        let scale = max_abs(&za).max(max_abs(&zb));
        let mismatch = max_abs(&diff);
        if mismatch > COMPATIBILITY_TOL * scale {
            return Err(KakinumaError::CompatibilityViolation(mismatch / scale));
        }
        let dzeta: Field = za.iter().zip(&zb).map(|(a, b)| 0.5 * (a + b)).collect();
        let rhs = self.time_derivative_rhs(phi1, phi2, &dzeta)?;
        let sol = self.solve(&rhs, warm)?;
        Ok((dzeta, sol))
    }

    /// Right-hand side of the time-differentiated compatibility conditions.
    pub fn time_derivative_rhs(&self, phi1: &[Field], phi2: &[Field], dzeta: &[f64]) -> Result<CoupledRhs> {
        let g = self.grid;
        let p = &self.params;
        let hdot1: Field = dzeta.iter().map(|v| -v / p.h1).collect();
        let hdot2: Field = dzeta.iter().map(|v| v / p.h2).collect();
        let d1 = self.op1.apply_call_derivative(phi1, &hdot1)?;
        let d2 = self.op2.apply_call_derivative(phi2, &hdot2)?;
        let neg = |f: &Field| f.iter().map(|v| -v).collect::<Field>();
        let (u1, w1g) = self.op1.velocity(phi1)?;
        let (u2, w2) = self.op2.velocity(phi2)?;
        let du: Field = u2.iter().zip(&u1).map(|(a, b)| a - b).collect();
        let f3 = g.mul(&du, dzeta);
        let pu1 = g.to_padded(&u1);
        let pw1 = g.to_padded(&w1g);
        let pu2 = g.to_padded(&u2);
        let pw2 = g.to_padded(&w2);
        let (i1, i2) = (1.0 / (p.delta1() * p.delta1()), 1.0 / (p.delta2() * p.delta2()));
        let kin: Vec<f64> = (0..pu1.len())
            .map(|n| {
                0.5 * p.rho1 * (pu1[n] * pu1[n] + i1 * pw1[n] * pw1[n])
                    - 0.5 * p.rho2 * (pu2[n] * pu2[n] + i2 * pw2[n] * pw2[n])
            })
            .collect();
        let kin = g.from_padded(&kin);
        let f4 = g.mean_free(&kin.iter().zip(self.state.zeta()).map(|(a, z)| a - z).collect::<Field>());
        Ok(CoupledRhs {
            f1prime: d1[1..].iter().map(neg).collect(),
            f2prime: d2[1..].iter().map(neg).collect(),
            f3,
            f4,
        })
    }
}

/// Single-layer trace problem `l . phi = trace`, `calL_i phi = 0` for `i >= 1`.
/// Unknowns `[phi_0..phi_K-1]`; equation blocks `[trace, calL_1..calL_K-1]`,
/// block `e` pinned by the Nyquist part of unknown `e`.
pub struct LayerTraceSystem<'g> {
    grid: &'g PeriodicGrid,
    geom: LayerGeometry,
    op: LayerOperator<'g>,
    opts: SolveOptions,
    dense: OnceLock<DenseSolver>,
    precond: OnceLock<ModalPreconditioner>,
}

impl<'g> LayerTraceSystem<'g> {
    pub fn new(grid: &'g PeriodicGrid, geom: &LayerGeometry, opts: SolveOptions) -> Result<Self> {
        let op = LayerOperator::new(grid, geom)?;
        Ok(LayerTraceSystem { grid, geom: geom.clone(), op, opts, dense: OnceLock::new(), precond: OnceLock::new() })
    }

    pub fn operator(&self) -> &LayerOperator<'g> {
        &self.op
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let m = self.grid.m();
        let k = self.op.count();
        let phi = split_blocks(x, m, k);
        let rows = self.op.apply_call(&phi).expect("validated shapes");
        let mut y = Vec::with_capacity(k * m);
        let mut tr = self.op.trace(&phi).expect("validated shapes");
        add_nyquist(self.grid, &mut tr, &phi[0]);
        y.extend(tr);
        for i in 1..k {
            let mut row = rows[i].clone();
            add_nyquist(self.grid, &mut row, &phi[i]);
            y.extend(row);
        }
        y
    }

    fn preconditioner(&self) -> Result<&ModalPreconditioner> {
        if let Some(p) = self.precond.get() {
            return Ok(p);
        }
        let m = self.grid.m();
        let flat = LayerGeometry {
            exps: self.geom.exps.clone(),
            eta: vec![self.grid.mean(&self.geom.eta); m],
            bed: vec![self.grid.mean(&self.geom.bed); m],
            eps: self.geom.eps,
        };
        let fsys = LayerTraceSystem::new(self.grid, &flat, self.opts)?;
        let p = ModalPreconditioner::probe(self.grid, self.op.count(), false, |x| fsys.apply(x))?;
        Ok(self.precond.get_or_init(|| p))
    }

    pub fn solve(&self, trace: &[f64]) -> Result<PotentialVec> {
        check_len(self.grid, trace, "trace")?;
        let m = self.grid.m();
        let k = self.op.count();
        let mut b = strip_nyquist(self.grid, trace);
        b.resize(k * m, 0.0);
        if max_abs(&b) == 0.0 {
            return Ok(vec![self.grid.zeros(); k]);
        }
        let x = match self.opts.backend {
            Backend::Dense => {
                let solver = match self.dense.get() {
                    Some(s) => s,
                    None => {
                        let s = DenseSolver::new(assemble_dense(k * m, |x| self.apply(x)))?;
                        self.dense.get_or_init(|| s)
                    }
                };
                let x = solver.solve(&b)?;
                let r: Vec<f64> = self.apply(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
                let rel = norm2(&r) / norm2(&b);
                if rel > RESIDUAL_TOL {
                    return Err(KakinumaError::SolverSingular(format!("dense residual {rel:e}")));
                }
                x
            }
            Backend::Krylov => {
                let pc = self.preconditioner()?;
                gmres(|v| self.apply(v), |r| pc.apply(self.grid, r), &b, None, &self.opts.gmres)?.0
            }
        };
        Ok(split_blocks(&x, m, k))
    }

    /// `Lambda^(N) trace = calL_0 phi` for the trace solution.
    pub fn dtn(&self, trace: &[f64]) -> Result<Field> {
        let phi = self.solve(trace)?;
        Ok(self.op.apply_l(&phi)?.swap_remove(0))
    }
}

fn layer_geometry(state: &InterfaceState, params: &NondimParams, spec: &ExpansionSpec, layer: Layer) -> LayerGeometry {
    LayerGeometry::from_state(state, params, spec, layer)
}

fn trace_system<'g>(
    grid: &'g PeriodicGrid,
    state: &InterfaceState,
    params: &NondimParams,
    spec: &ExpansionSpec,
    layer: Layer,
) -> Result<LayerTraceSystem<'g>> {
    spec.validate()?;
    check_len(grid, state.zeta(), "zeta")?;
    LayerTraceSystem::new(grid, &layer_geometry(state, params, spec, layer), SolveOptions::default()).map_err(|e| match e {
        KakinumaError::Cavitation { min_h, .. } => KakinumaError::Cavitation { layer: layer.index(), min_h },
        other => other,
    })
}

fn check_mean_free(grid: &PeriodicGrid, f: &[f64]) -> Result<()> {
    let mu = grid.mean(f);
    if mu.abs() > crate::spectral_grid::MEAN_TOL * max_abs(f).max(1.0) {
        return Err(KakinumaError::NonZeroMean(mu));
    }
    Ok(())
}

/// Potentials of one layer with trace `phi_trace` satisfying the constraint rows.
pub fn solve_layer_trace(
    grid: &PeriodicGrid,
    phi_trace: &[f64],
    state: &InterfaceState,
    params: &NondimParams,
    spec: &ExpansionSpec,
    layer: Layer,
) -> Result<PotentialVec> {
    check_mean_free(grid, phi_trace)?;
    trace_system(grid, state, params, spec, layer)?.solve(phi_trace)
}

/// Approximate Dirichlet-to-Neumann map `Lambda_l^(N)`.
pub fn approx_dtn(
    grid: &PeriodicGrid,
    phi_trace: &[f64],
    state: &InterfaceState,
    params: &NondimParams,
    spec: &ExpansionSpec,
    layer: Layer,
) -> Result<Field> {
    check_mean_free(grid, phi_trace)?;
    trace_system(grid, state, params, spec, layer)?.dtn(phi_trace)
}

pub fn solve_coupled(
    grid: &PeriodicGrid,
    rhs: &CoupledRhs,
    state: &InterfaceState,
    params: &NondimParams,
    spec: &ExpansionSpec,
) -> Result<CoupledSolution> {
    CoupledSystem::new(grid, state, params, spec, SolveOptions::default())?.solve(rhs, None)
}

/// Kakinuma potentials from the canonical variables `(zeta0, phi0)`.
pub fn prepare_initial_data(
    grid: &PeriodicGrid,
    zeta0: &[f64],
    phi0: &[f64],
    b: &[f64],
    params: &NondimParams,
    spec: &ExpansionSpec,
) -> Result<(PotentialVec, PotentialVec)> {
    check_len(grid, phi0, "phi0")?;
    check_mean_free(grid, phi0)?;
    let state = InterfaceState::new(zeta0.to_vec(), b.to_vec(), params)?;
    let sys = CoupledSystem::new(grid, &state, params, spec, SolveOptions::default())?;
    let sol = sys.solve(&CoupledRhs::trace_only(grid, spec, phi0.to_vec()), None)?;
    Ok((sol.phi1, sol.phi2))
}

/// `(dzeta/dt, dphi1/dt, dphi2/dt)` for compatible potentials.
pub fn recover_time_derivatives(
    grid: &PeriodicGrid,
    state: &InterfaceState,
    phi1: &[Field],
    phi2: &[Field],
    params: &NondimParams,
    spec: &ExpansionSpec,
) -> Result<(Field, PotentialVec, PotentialVec)> {
    let sys = CoupledSystem::new(grid, state, params, spec, SolveOptions::default())?;
    let (dz, sol) = sys.recover_time_derivatives(phi1, phi2, None)?;
    Ok((dz, sol.phi1, sol.phi2))
}

/// `sum_l rho_l h_l (|grad phi_l|^2 + (h_l delta)^-2 |phi_l'|^2)` with `phi'`
/// the components of index at least one.
pub fn potential_energy_norm(grid: &PeriodicGrid, phi1: &[Field], phi2: &[Field], params: &NondimParams) -> f64 {
    let mut total = 0.0;
    for (layer, phi) in [(Layer::Upper, phi1), (Layer::Lower, phi2)] {
        let eps = params.depth(layer) * params.delta;
        let mut s = 0.0;
        for (j, f) in phi.iter().enumerate() {
            let d = grid.deriv(f, 1);
            s += grid.inner(&d, &d);
            if j > 0 {
                s += grid.inner(f, f) / (eps * eps);
            }
        }
        total += params.density(layer) * params.depth(layer) * s;
    }
    total
}
