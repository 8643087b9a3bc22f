//! Time integration of the Kakinuma model in the canonical variables
//! `(zeta, phi)` and the diagnostics evaluated along trajectories.
//!
//! The potentials are reconstructed from `(zeta, phi)` at every evaluation,
//! so the discrete flow stays on the constraint manifold.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::elliptic_solver::{CoupledRhs, CoupledSolution, CoupledSystem, SolveOptions, COMPATIBILITY_TOL};
use crate::error::{KakinumaError, Result};
use crate::format::fmt_g17;
use crate::kakinuma_ops::{bernoulli_from_parts, compute_velocities, l_vector, InterfaceState, Velocities};
use crate::linalg::ModalPreconditioner;
use crate::params_core::{theta_weights, ExpansionSpec, Layer, NondimParams, StabilityConstants};
use crate::spectral_grid::{Field, PeriodicGrid, PotentialVec};

pub const DEFAULT_C_STAB: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalState {
    pub t: f64,
    pub zeta: Field,
    pub phi: Field,
}

impl CanonicalState {
    pub fn rest(grid: &PeriodicGrid) -> Self {
        CanonicalState { t: 0.0, zeta: grid.zeros(), phi: grid.zeros() }
    }
}

/// Potentials reconstructed at one canonical state together with `dzeta/dt`.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub phi1: PotentialVec,
    pub phi2: PotentialVec,
    pub dzeta: Field,
    /// Relative disagreement of the two layer expressions for `dzeta/dt`.
    pub compatibility_mismatch: f64,
}

/// Evaluates the canonical right-hand side; keeps the previous solution as a
/// Krylov warm start and the mean-state preconditioner.
pub struct KakinumaFlow<'g> {
    grid: &'g PeriodicGrid,
    b: Field,
    params: NondimParams,
    spec: ExpansionSpec,
    opts: SolveOptions,
    warm: Option<CoupledSolution>,
    precond: Option<(f64, Arc<ModalPreconditioner>)>,
    worst_compat: f64,
}

impl<'g> KakinumaFlow<'g> {
    pub fn new(grid: &'g PeriodicGrid, b: Field, params: &NondimParams, spec: &ExpansionSpec, opts: SolveOptions) -> Result<Self> {
        spec.validate()?;
        if b.len() != grid.m() {
            return Err(KakinumaError::GridMismatch("bottom length differs from grid".into()));
        }
        Ok(KakinumaFlow { grid, b, params: *params, spec: spec.clone(), opts, warm: None, precond: None, worst_compat: 0.0 })
    }

    pub fn grid(&self) -> &'g PeriodicGrid {
        self.grid
    }

    pub fn params(&self) -> &NondimParams {
        &self.params
    }

    pub fn spec(&self) -> &ExpansionSpec {
        &self.spec
    }

    pub fn bottom(&self) -> &Field {
        &self.b
    }

    pub fn interface(&self, zeta: &[f64]) -> Result<InterfaceState> {
        InterfaceState::new(zeta.to_vec(), self.b.clone(), &self.params)
    }

    pub fn system(&mut self, state: &InterfaceState) -> Result<CoupledSystem<'g>> {
        let sys = CoupledSystem::new(self.grid, state, &self.params, &self.spec, self.opts)?;
        let mean = self.grid.mean(state.zeta());
        match &self.precond {
            Some((m, pc)) if *m == mean => Ok(sys.with_preconditioner(pc.clone())),
            _ => {
                if self.opts.backend == crate::elliptic_solver::Backend::Krylov {
                    let pc = sys.preconditioner()?;
                    self.precond = Some((mean, pc));
                }
                Ok(sys)
            }
        }
    }

    /// Largest compatibility mismatch seen since the last call; resets the tracker.
    pub fn take_max_compatibility(&mut self) -> f64 {
        std::mem::take(&mut self.worst_compat)
    }

    /// Potentials and `dzeta/dt` at `(zeta, phi)`.
    pub fn reconstruct(&mut self, sys: &CoupledSystem, phi: &[f64]) -> Result<Reconstruction> {
        let rhs = CoupledRhs::trace_only(self.grid, &self.spec, self.grid.mean_free(phi));
        let sol = sys.solve(&rhs, self.warm.as_ref())?;
        let (za, zb) = sys.dzeta_dt_pair(&sol.phi1, &sol.phi2)?;
        let scale = PeriodicGrid::max_abs(&za).max(PeriodicGrid::max_abs(&zb));
        let diff = za.iter().zip(&zb).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let mismatch = if scale > 0.0 { diff / scale } else { 0.0 };
        if mismatch > COMPATIBILITY_TOL {
            return Err(KakinumaError::CompatibilityViolation(mismatch));
        }
        self.warm = Some(sol.clone());
        self.worst_compat = self.worst_compat.max(mismatch);
        Ok(Reconstruction { phi1: sol.phi1, phi2: sol.phi2, dzeta: zb, compatibility_mismatch: mismatch })
    }

    /// `(dzeta/dt, dphi/dt)` together with the reconstruction used.
    pub fn rhs(&mut self, s: &CanonicalState) -> Result<(Field, Field, Reconstruction)> {
        let state = self.interface(&s.zeta)?;
        let sys = self.system(&state)?;
        let rec = self.reconstruct(&sys, &s.phi)?;
        let g = self.grid;
        let p = &self.params;
        let op1 = sys.operator(Layer::Upper);
        let op2 = sys.operator(Layer::Lower);
        let (u1, w1g) = op1.velocity(&rec.phi1)?;
        let (u2, w2) = op2.velocity(&rec.phi2)?;
        let lam1 = op1.apply_l(&rec.phi1)?.swap_remove(0);
        let lam2 = op2.apply_l(&rec.phi2)?.swap_remove(0);
        let w1: Field = w1g.iter().map(|v| -v).collect();
        let b1 = bernoulli_from_parts(g, &u1, &w1, &lam1, p.delta1(), 1.0);
        let b2 = bernoulli_from_parts(g, &u2, &w2, &lam2, p.delta2(), -1.0);
        let dphi: Field = (0..g.m()).map(|n| -s.zeta[n] + p.rho1 * b1[n] - p.rho2 * b2[n]).collect();
        Ok((rec.dzeta.clone(), g.mean_free(&dphi), rec))
    }

    /// Classical four-stage Runge–Kutta step. Cavitation in a stage rejects the step.
    pub fn rk4_step(&mut self, s: &CanonicalState, dt: f64) -> Result<CanonicalState> {
        if !(dt > 0.0) {
            return Err(KakinumaError::StepRejected(format!("non-positive dt {dt}")));
        }
        let reject = |e: KakinumaError| match e {
            KakinumaError::Cavitation { layer, min_h } => {
                KakinumaError::StepRejected(format!("cavitation in layer {layer} (min H = {min_h:e})"))
            }
            other => other,
        };
        let m = self.grid.m();
        let shift = |base: &CanonicalState, k: &(Field, Field), c: f64| CanonicalState {
            t: base.t + c * dt,
            zeta: (0..m).map(|n| base.zeta[n] + c * dt * k.0[n]).collect(),
            phi: (0..m).map(|n| base.phi[n] + c * dt * k.1[n]).collect(),
        };
        let mut stage = |st: &CanonicalState| self.rhs(st).map(|(a, b, _)| (a, b)).map_err(reject);
        let k1 = stage(s)?;
        let k2 = stage(&shift(s, &k1, 0.5))?;
        let k3 = stage(&shift(s, &k2, 0.5))?;
        let k4 = stage(&shift(s, &k3, 1.0))?;
        let comb = |i: usize, n: usize| {
            let pick = |k: &(Field, Field)| if i == 0 { k.0[n] } else { k.1[n] };
            (pick(&k1) + 2.0 * pick(&k2) + 2.0 * pick(&k3) + pick(&k4)) / 6.0
        };
        Ok(CanonicalState {
            t: s.t + dt,
            zeta: (0..m).map(|n| s.zeta[n] + dt * comb(0, n)).collect(),
            phi: (0..m).map(|n| s.phi[n] + dt * comb(1, n)).collect(),
        })
    }
}

/// `(dzeta/dt, dphi/dt)` of the Kakinuma model at a canonical state.
pub fn rhs_canonical(
    grid: &PeriodicGrid,
    s: &CanonicalState,
    b: &[f64],
    params: &NondimParams,
    spec: &ExpansionSpec,
) -> Result<(Field, Field)> {
    let mut flow = KakinumaFlow::new(grid, b.to_vec(), params, spec, SolveOptions::default())?;
    flow.rhs(s).map(|(a, b, _)| (a, b))
}

pub fn rk4_step(
    grid: &PeriodicGrid,
    s: &CanonicalState,
    dt: f64,
    b: &[f64],
    params: &NondimParams,
    spec: &ExpansionSpec,
) -> Result<CanonicalState> {
    KakinumaFlow::new(grid, b.to_vec(), params, spec, SolveOptions::default())?.rk4_step(s, dt)
}

fn dot_vec(a: &[Field], b: &[Field], n: usize) -> f64 {
    a.iter().zip(b).map(|(x, y)| x[n] * y[n]).sum()
}

/// The function `a` of the stability condition.
#[allow(clippy::too_many_arguments)]
pub fn stability_function_a(
    grid: &PeriodicGrid,
    state: &InterfaceState,
    phi1: &[Field],
    phi2: &[Field],
    dphi1: &[Field],
    dphi2: &[Field],
    params: &NondimParams,
    spec: &ExpansionSpec,
) -> Result<Field> {
    let vel = compute_velocities(grid, phi1, phi2, state, params, spec)?;
    let h1 = state.thickness(Layer::Upper);
    let h2 = state.thickness(Layer::Lower);
    let l1p = l_vector(h1, spec, Layer::Upper, 1)?;
    let l1pp = l_vector(h1, spec, Layer::Upper, 2)?;
    let l2p = l_vector(h2, spec, Layer::Lower, 1)?;
    let l2pp = l_vector(h2, spec, Layer::Lower, 2)?;
    let material = |phi: &[Field], dphi: &[Field], u: &[f64]| -> PotentialVec {
        phi.iter()
            .zip(dphi)
            .map(|(f, df)| {
                let fx = grid.deriv(f, 1);
                (0..grid.m()).map(|n| df[n] + u[n] * fx[n]).collect()
            })
            .collect()
    };
    let m1 = material(phi1, dphi1, &vel.u1);
    let m2 = material(phi2, dphi2, &vel.u2);
    let beta: Field = grid.deriv(state.b(), 1).iter().map(|v| v / params.h2).collect();
    let (i1, i2) = (params.delta1().powi(-2), params.delta2().powi(-2));
    Ok((0..grid.m())
        .map(|n| {
            let t1 = dot_vec(&l1p, &m1, n) - i1 * vel.w1[n] * dot_vec(&l1pp, phi1, n);
            let t2 = dot_vec(&l2p, &m2, n) + (i2 * vel.w2[n] - beta[n] * vel.u2[n]) * dot_vec(&l2pp, phi2, n);
            1.0 + params.rho1 / params.h1 * t1 + params.rho2 / params.h2 * t2
        })
        .collect())
}

/// `a - rho1 rho2 |u1 - u2|^2 / (rho1 h2 H2 alpha2 + rho2 h1 H1 alpha1)` pointwise.
pub fn stability_margin(
    state: &InterfaceState,
    velocities: &Velocities,
    a: &[f64],
    params: &NondimParams,
    constants: &StabilityConstants,
) -> Field {
    let h1 = state.thickness(Layer::Upper);
    let h2 = state.thickness(Layer::Lower);
    (0..a.len())
        .map(|n| {
            let v = velocities.u1[n] - velocities.u2[n];
            let d = params.rho1 * params.h2 * h2[n] * constants.alpha2 + params.rho2 * params.h1 * h1[n] * constants.alpha1;
            a[n] - params.rho1 * params.rho2 * v * v / d
        })
        .collect()
}

/// `||zeta||_{H^m}^2 + sum rho h (||grad phi||_{H^m}^2 + (h delta)^-2 ||phi'||_{H^m}^2)`.
pub fn energy_em(grid: &PeriodicGrid, zeta: &[f64], phi1: &[Field], phi2: &[Field], m: u32, params: &NondimParams) -> f64 {
    let s = m as f64;
    let sq = |f: &[f64]| grid.sobolev_norm(f, s).powi(2);
    let mut e = sq(zeta);
    for (layer, phi) in [(Layer::Upper, phi1), (Layer::Lower, phi2)] {
        let eps2 = (params.depth(layer) * params.delta).powi(2);
        let mut part = 0.0;
        for (j, f) in phi.iter().enumerate() {
            part += sq(&grid.deriv(f, 1));
            if j > 0 {
                part += sq(f) / eps2;
            }
        }
        e += params.density(layer) * params.depth(layer) * part;
    }
    e
}

/// The energy `E` of a perturbation `(zeta, phi1, phi2)`; equals [`energy_em`] at `m = 0`.
pub fn perturbation_energy(grid: &PeriodicGrid, pert: &Perturbation, params: &NondimParams) -> f64 {
    energy_em(grid, &pert.zeta, &pert.phi1, &pert.phi2, 0, params)
}

/// `1/2 sum rho h <L phi, phi> + 1/2 ||zeta||^2`.
pub fn hamiltonian_k(sys: &CoupledSystem, phi1: &[Field], phi2: &[Field], params: &NondimParams) -> Result<f64> {
    let g = sys.grid();
    let mut e = 0.5 * g.inner(sys.state().zeta(), sys.state().zeta());
    for (layer, phi) in [(Layer::Upper, phi1), (Layer::Lower, phi2)] {
        let l = sys.operator(layer).apply_l(phi)?;
        let s: f64 = l.iter().zip(phi).map(|(a, b)| g.inner(a, b)).sum();
        e += 0.5 * params.density(layer) * params.depth(layer) * s;
    }
    Ok(e)
}

/// Second route: `1/2 <dzeta/dt, phi> + 1/2 ||zeta||^2`.
pub fn hamiltonian_k_boundary(grid: &PeriodicGrid, zeta: &[f64], phi: &[f64], dzeta: &[f64]) -> f64 {
    0.5 * grid.inner(dzeta, phi) + 0.5 * grid.inner(zeta, zeta)
}

/// Base flow quantities entering the linearized quadratic form.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationBase {
    pub a: Field,
    pub thickness1: Field,
    pub thickness2: Field,
    pub u1: Field,
    pub u2: Field,
}

impl LinearizationBase {
    /// Base computed from a Kakinuma flow and its recovered time derivatives.
    #[allow(clippy::too_many_arguments)]
    pub fn from_flow(
        grid: &PeriodicGrid,
        state: &InterfaceState,
        phi1: &[Field],
        phi2: &[Field],
        dphi1: &[Field],
        dphi2: &[Field],
        params: &NondimParams,
        spec: &ExpansionSpec,
    ) -> Result<Self> {
        let a = stability_function_a(grid, state, phi1, phi2, dphi1, dphi2, params, spec)?;
        let vel = compute_velocities(grid, phi1, phi2, state, params, spec)?;
        Ok(LinearizationBase {
            a,
            thickness1: state.thickness(Layer::Upper).clone(),
            thickness2: state.thickness(Layer::Lower).clone(),
            u1: vel.u1,
            u2: vel.u2,
        })
    }

    /// Spatially constant base with imposed values.
    pub fn uniform(m: usize, a: f64, thickness1: f64, thickness2: f64, u1: f64, u2: f64) -> Self {
        LinearizationBase {
            a: vec![a; m],
            thickness1: vec![thickness1; m],
            thickness2: vec![thickness2; m],
            u1: vec![u1; m],
            u2: vec![u2; m],
        }
    }

    pub fn margin(&self, params: &NondimParams, constants: &StabilityConstants) -> Field {
        (0..self.a.len())
            .map(|n| {
                let v = self.u2[n] - self.u1[n];
                let d = params.rho1 * params.h2 * self.thickness2[n] * constants.alpha2
                    + params.rho2 * params.h1 * self.thickness1[n] * constants.alpha1;
                self.a[n] - params.rho1 * params.rho2 * v * v / d
            })
            .collect()
    }
}

/// Variation `(zeta, phi1, phi2)` of a flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub zeta: Field,
    pub phi1: PotentialVec,
    pub phi2: PotentialVec,
}

/// Principal matrices `A(H)` and `C(H)` of one layer at a point.
pub fn principal_matrices(exps: &[u32], h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = exps.len();
    let a = DMatrix::from_fn(k, k, |i, j| {
        let e = (exps[i] + exps[j]) as i32;
        h.powi(e + 1) / (e + 1) as f64
    });
    let c = DMatrix::from_fn(k, k, |i, j| {
        let (pi, pj) = (exps[i], exps[j]);
        if pi * pj == 0 {
            0.0
        } else {
            let e = (pi + pj) as i32;
            (pi * pj) as f64 / (e - 1) as f64 * h.powi(e - 1)
        }
    });
    (a, c)
}

/// `(A0mod U, U)` assembled pointwise and integrated with the trapezoid rule.
pub fn quadratic_form_a0mod(
    grid: &PeriodicGrid,
    base: &LinearizationBase,
    pert: &Perturbation,
    params: &NondimParams,
    spec: &ExpansionSpec,
) -> Result<f64> {
    let constants = StabilityConstants::new(spec)?;
    let exps1 = spec.exponents(Layer::Upper);
    let exps2 = spec.exponents(Layer::Lower);
    if pert.phi1.len() != exps1.len() || pert.phi2.len() != exps2.len() {
        return Err(KakinumaError::IndexOutOfRange { index: pert.phi1.len() + pert.phi2.len(), count: exps1.len() + exps2.len() });
    }
    let d1: PotentialVec = pert.phi1.iter().map(|f| grid.deriv(f, 1)).collect();
    let d2: PotentialVec = pert.phi2.iter().map(|f| grid.deriv(f, 1)).collect();
    let mut total = 0.0;
    for n in 0..grid.m() {
        let (t1, t2) = theta_weights(params, base.thickness1[n], base.thickness2[n], constants.alpha1, constants.alpha2)?;
        let v = base.u2[n] - base.u1[n];
        let zd = pert.zeta[n];
        let mut s = base.a[n] * zd * zd;
        for (layer, exps, phi, dphi, hval, theta) in [
            (Layer::Upper, &exps1, &pert.phi1, &d1, base.thickness1[n], t1),
            (Layer::Lower, &exps2, &pert.phi2, &d2, base.thickness2[n], t2),
        ] {
            let (am, cm) = principal_matrices(exps, hval);
            let f = DVector::from_iterator(exps.len(), phi.iter().map(|c| c[n]));
            let df = DVector::from_iterator(exps.len(), dphi.iter().map(|c| c[n]));
            let eps2 = (params.depth(layer) * params.delta).powi(2);
            let rho = params.density(layer);
            let quad = df.dot(&(&am * &df)) + f.dot(&(&cm * &f)) / eps2;
            let ldf: f64 = exps.iter().zip(df.iter()).map(|(&p, d)| hval.powi(p as i32) * d).sum();
            s += rho * params.depth(layer) * quad + 2.0 * rho * theta * v * ldf * zd;
        }
        total += s;
    }
    Ok(total * grid.dx())
}

/// Settings of a trajectory run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub t_end: f64,
    pub dt: f64,
    /// Record every `stride` steps.
    pub stride: usize,
    pub halt_on_instability: bool,
    pub c_stab: f64,
    /// Sobolev index of the recorded energy `E_m`.
    pub energy_index: u32,
    /// Keep a snapshot every `snapshot_stride` records; zero keeps none.
    pub snapshot_stride: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings { t_end: 1.0, dt: 1e-3, stride: 10, halt_on_instability: true, c_stab: DEFAULT_C_STAB, energy_index: 0, snapshot_stride: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HaltReason {
    NegativeMargin { t: f64, min_margin: f64 },
    Cavitation { t: f64, detail: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub hamiltonian_k: Vec<f64>,
    pub mass: Vec<f64>,
    pub min_margin: Vec<f64>,
    pub energy_m: Vec<f64>,
    pub max_abs_zeta: Vec<f64>,
    /// Largest compatibility mismatch over all stage evaluations since the previous record.
    pub compatibility: Vec<f64>,
    pub snapshots: Vec<CanonicalState>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// CSV with `# key=value` metadata lines, a header row and `%.17g` values.
    pub fn to_csv(&self, metadata: &[(String, String)]) -> String {
        let mut s = String::new();
        for (k, v) in metadata {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s.push_str(&TRAJECTORY_COLUMNS.join(","));
        s.push('\n');
        for i in 0..self.len() {
            let row = [
                self.times[i],
                self.hamiltonian_k[i],
                self.mass[i],
                self.min_margin[i],
                self.energy_m[i],
                self.max_abs_zeta[i],
            ];
            s.push_str(&row.iter().map(|v| fmt_g17(*v)).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }
}

pub const TRAJECTORY_COLUMNS: [&str; 6] = ["t", "H_K", "mass", "min_margin", "E_m", "max_abs_zeta"];

/// Diagnostics at one canonical state.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub hamiltonian_k: f64,
    pub mass: f64,
    pub margin: Field,
    pub a: Field,
    pub energy_m: f64,
    pub compatibility: f64,
}

pub fn diagnose(flow: &mut KakinumaFlow, s: &CanonicalState, energy_index: u32) -> Result<Diagnostics> {
    let grid = flow.grid();
    let params = *flow.params();
    let spec = flow.spec().clone();
    let state = flow.interface(&s.zeta)?;
    let sys = flow.system(&state)?;
    let rec = flow.reconstruct(&sys, &s.phi)?;
    let (_, dsol) = sys.recover_time_derivatives(&rec.phi1, &rec.phi2, None)?;
    let a = stability_function_a(grid, &state, &rec.phi1, &rec.phi2, &dsol.phi1, &dsol.phi2, &params, &spec)?;
    let vel = compute_velocities(grid, &rec.phi1, &rec.phi2, &state, &params, &spec)?;
    let margin = stability_margin(&state, &vel, &a, &params, &StabilityConstants::new(&spec)?);
    Ok(Diagnostics {
        hamiltonian_k: hamiltonian_k(&sys, &rec.phi1, &rec.phi2, &params)?,
        mass: grid.integral(&s.zeta),
        margin,
        a,
        energy_m: energy_em(grid, &s.zeta, &rec.phi1, &rec.phi2, energy_index, &params),
        compatibility: rec.compatibility_mismatch,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub record: TrajectoryRecord,
    pub final_state: CanonicalState,
    pub halted: Option<HaltReason>,
}

/// Integrates with fixed steps, recording diagnostics every `stride` steps.
pub fn simulate(flow: &mut KakinumaFlow, initial: CanonicalState, settings: &RunSettings) -> Result<Trajectory> {
    let grid = flow.grid();
    if !(settings.dt > 0.0) || !(settings.t_end >= 0.0) || settings.stride == 0 {
        return Err(KakinumaError::StepRejected("dt, t_end and stride must be positive".into()));
    }
    if settings.dt > settings.c_stab * grid.dx() {
        return Err(KakinumaError::StepRejected(format!(
            "dt = {} exceeds c_stab dx = {}",
            settings.dt,
            settings.c_stab * grid.dx()
        )));
    }
    let steps = (settings.t_end / settings.dt).round() as usize;
    let mut rec = TrajectoryRecord::default();
    let mut s = initial;
    let mut halted = None;
    let push = |rec: &mut TrajectoryRecord, s: &CanonicalState, d: &Diagnostics, compat: f64| {
        rec.times.push(s.t);
        rec.hamiltonian_k.push(d.hamiltonian_k);
        rec.mass.push(d.mass);
        rec.min_margin.push(d.margin.iter().cloned().fold(f64::INFINITY, f64::min));
        rec.energy_m.push(d.energy_m);
        rec.max_abs_zeta.push(PeriodicGrid::max_abs(&s.zeta));
        rec.compatibility.push(compat);
        if settings.snapshot_stride > 0 && (rec.times.len() - 1) % settings.snapshot_stride == 0 {
            rec.snapshots.push(s.clone());
        }
    };
    let d0 = diagnose(flow, &s, settings.energy_index)?;
    push(&mut rec, &s, &d0, flow.take_max_compatibility());
    let unstable = |d: &Diagnostics| d.margin.iter().cloned().fold(f64::INFINITY, f64::min);
    if settings.halt_on_instability && unstable(&d0) < 0.0 {
        let min_margin = unstable(&d0);
        return Ok(Trajectory { record: rec, final_state: s.clone(), halted: Some(HaltReason::NegativeMargin { t: s.t, min_margin }) });
    }
    for k in 1..=steps {
        let next = match flow.rk4_step(&s, settings.dt) {
            Ok(n) => n,
            Err(KakinumaError::StepRejected(detail)) if detail.contains("cavitation") => {
                halted = Some(HaltReason::Cavitation { t: s.t, detail });
                break;
            }
            Err(e) => return Err(e),
        };
        s = next;
        if k % settings.stride == 0 || k == steps {
            let d = diagnose(flow, &s, settings.energy_index)?;
            push(&mut rec, &s, &d, flow.take_max_compatibility());
            if settings.halt_on_instability && unstable(&d) < 0.0 {
                halted = Some(HaltReason::NegativeMargin { t: s.t, min_margin: unstable(&d) });
                break;
            }
        }
    }
    Ok(Trajectory { record: rec, final_state: s, halted })
}
