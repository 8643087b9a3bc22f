//! Reference solutions of the layer Laplace problems.
//!
//! Each layer is mapped to a flat strip by `z = a ztilde + zeta` with
//! `a = H_l`; layer 1 occupies `ztilde in [0, h1]`, layer 2
//! `ztilde in [-h2, 0]`. The potential is written `psi(x) + delta^2 Psi(x, ztilde)`
//! with `Psi = 0` on the interface, which keeps the unknown `O(1)` as
//! `delta -> 0`. With `theta_x = a_x ztilde + zeta_x` and
//! `c = (1 + delta^2 theta_x^2)/a` the fluxes are
//!
//! * `F_x = delta^2 (a Psi_x - theta_x Psi_z)`,
//! * `F_z = -delta^2 theta_x Psi_x + c Psi_z`,
//!
//! the interior equation is `d_x F_x + d_z F_z + a psi_xx = 0` and the far
//! boundary (lid or bottom) carries `F_z - theta_x psi_x = 0`.
//! Horizontal derivatives are Fourier, vertical ones Chebyshev collocation.

use std::sync::OnceLock;

use crate::chebyshev::ChebyshevBasis;
use crate::error::{KakinumaError, Result};
use crate::kakinuma_ops::InterfaceState;
use crate::linalg::{assemble_dense, gmres, DenseSolver, GmresOptions, ModalPreconditioner};
use crate::params_core::{Layer, NondimParams};
use crate::spectral_grid::{Field, PeriodicGrid};

pub const MIN_VERTICAL_ORDER: usize = 8;
pub const RESOLUTION_TOL: f64 = 1e-8;

/// `delta^-1 |xi| tanh(h delta |xi|)`.
pub fn flat_dtn_symbol(xi: f64, params: &NondimParams, layer: Layer) -> f64 {
    let k = xi.abs();
    if k == 0.0 {
        return 0.0;
    }
    k * (params.depth(layer) * params.delta * k).tanh() / params.delta
}

/// Vertical discretization of one layer.
#[derive(Debug, Clone)]
pub struct StripGrid<'g> {
    pub horizontal: &'g PeriodicGrid,
    pub layer: Layer,
    cheb: ChebyshevBasis,
    ztilde: Vec<f64>,
    dz_ds: f64,
    iface: usize,
    far: usize,
}

impl<'g> StripGrid<'g> {
    pub fn new(horizontal: &'g PeriodicGrid, vertical_order: usize, layer: Layer, params: &NondimParams) -> Result<Self> {
        if vertical_order < MIN_VERTICAL_ORDER {
            return Err(KakinumaError::ConstraintViolation(format!(
                "vertical order {vertical_order} below {MIN_VERTICAL_ORDER}"
            )));
        }
        let cheb = ChebyshevBasis::new(vertical_order);
        let h = params.depth(layer);
        let p = vertical_order;
        let (ztilde, iface, far): (Vec<f64>, usize, usize) = match layer {
            Layer::Upper => (cheb.nodes.iter().map(|s| 0.5 * h * (1.0 + s)).collect(), p, 0),
            Layer::Lower => (cheb.nodes.iter().map(|s| 0.5 * h * (s - 1.0)).collect(), 0, p),
        };
        Ok(StripGrid { horizontal, layer, cheb, ztilde, dz_ds: 0.5 * h, iface, far })
    }

    pub fn vertical_order(&self) -> usize {
        self.cheb.order()
    }

    /// Strip coordinates of the collocation levels.
    pub fn levels(&self) -> &[f64] {
        &self.ztilde
    }

    fn unknown_levels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..=self.vertical_order()).filter(move |&l| l != self.iface)
    }

    /// Number of unknowns `P M`.
    pub fn unknowns(&self) -> usize {
        self.vertical_order() * self.horizontal.m()
    }
}

/// Coefficients of one transformed layer problem.
#[derive(Debug, Clone)]
pub struct LayerStrip<'g> {
    strip: StripGrid<'g>,
    delta2: f64,
    a: Field,
    zeta_x: Field,
    theta_x: Vec<Field>,
    c: Vec<Field>,
    sign: f64,
}

impl<'g> LayerStrip<'g> {
    pub fn new(strip: StripGrid<'g>, state: &InterfaceState, params: &NondimParams) -> Result<Self> {
        let g = strip.horizontal;
        let layer = strip.layer;
        let a = state.thickness(layer).clone();
        let min_h = a.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_h <= 0.0 {
            return Err(KakinumaError::Cavitation { layer: layer.index(), min_h });
        }
        Self::from_fields(strip, a, state.zeta().clone(), params.delta, g)
    }

    fn from_fields(strip: StripGrid<'g>, a: Field, zeta: Field, delta: f64, g: &PeriodicGrid) -> Result<Self> {
        let ax = g.deriv(&a, 1);
        let zeta_x = g.deriv(&zeta, 1);
        let delta2 = delta * delta;
        let theta_x: Vec<Field> = strip
            .ztilde
            .iter()
            .map(|z| ax.iter().zip(&zeta_x).map(|(p, q)| p * z + q).collect())
            .collect();
        let c = theta_x
            .iter()
            .map(|t| t.iter().zip(&a).map(|(tx, av)| (1.0 + delta2 * tx * tx) / av).collect())
            .collect();
        let sign = match strip.layer {
            Layer::Upper => 1.0,
            Layer::Lower => -1.0,
        };
        Ok(LayerStrip { strip, delta2, a, zeta_x, theta_x, c, sign })
    }

    /// Same strip with horizontally averaged coefficients.
    fn flattened(&self) -> Result<Self> {
        let g = self.strip.horizontal;
        let m = g.m();
        let a = vec![g.mean(&self.a); m];
        LayerStrip::from_fields(self.strip.clone(), a, vec![0.0; m], self.delta2.sqrt(), g)
    }

    pub fn strip(&self) -> &StripGrid<'g> {
        &self.strip
    }

    fn full_levels(&self, unknowns: &[f64]) -> Vec<Field> {
        let m = self.strip.horizontal.m();
        let mut out = vec![vec![0.0; m]; self.strip.vertical_order() + 1];
        for (k, l) in self.strip.unknown_levels().enumerate() {
            out[l].copy_from_slice(&unknowns[k * m..(k + 1) * m]);
        }
        out
    }

    fn dz(&self, levels: &[Field]) -> Vec<Field> {
        let m = self.strip.horizontal.m();
        let d = &self.strip.cheb.diff;
        let n = levels.len();
        let inv = 1.0 / self.strip.dz_ds;
        (0..n)
            .map(|i| {
                let mut row = vec![0.0; m];
                for (k, lv) in levels.iter().enumerate() {
                    let dik = d[(i, k)] * inv;
                    if dik != 0.0 {
                        row.iter_mut().zip(lv).for_each(|(r, v)| *r += dik * v);
                    }
                }
                row
            })
            .collect()
    }

    /// Rows of the strip equations for lifted unknowns `Psi` and trace `psi`.
    pub fn residual(&self, unknowns: &[f64], psi: &[f64]) -> Vec<f64> {
        let g = self.strip.horizontal;
        let m = g.m();
        let lv = self.full_levels(unknowns);
        let pz = self.dz(&lv);
        let px: Vec<Field> = lv.iter().map(|f| g.deriv(f, 1)).collect();
        let psi_x = g.deriv(psi, 1);
        let psi_xx = g.deriv(psi, 2);
        let d2 = self.delta2;
        let nlev = lv.len();
        let mut fz = vec![vec![0.0; m]; nlev];
        let mut out = Vec::with_capacity(self.strip.unknowns());
        let mut dfx = vec![vec![0.0; m]; nlev];
        for l in 0..nlev {
            let tx = &self.theta_x[l];
            let fx: Field = (0..m).map(|j| d2 * (self.a[j] * px[l][j] - tx[j] * pz[l][j])).collect();
            dfx[l] = g.deriv(&fx, 1);
            fz[l] = (0..m).map(|j| -d2 * tx[j] * px[l][j] + self.c[l][j] * pz[l][j]).collect();
        }
        let dfz = self.dz(&fz);
        for l in self.strip.unknown_levels() {
            if l == self.strip.far {
                let tx = &self.theta_x[l];
                out.extend((0..m).map(|j| fz[l][j] - tx[j] * psi_x[j]));
            } else {
                out.extend((0..m).map(|j| dfx[l][j] + dfz[l][j] + self.a[j] * psi_xx[j]));
            }
        }
        out
    }

    /// Signed interface flux: `Lambda_1 = zeta_x psi_x - c0 Psi_z` on layer 1, its negative on layer 2.
    pub fn dtn(&self, unknowns: &[f64], psi: &[f64]) -> Field {
        let g = self.strip.horizontal;
        let lv = self.full_levels(unknowns);
        let pz = self.dz(&lv);
        let i = self.strip.iface;
        let psi_x = g.deriv(psi, 1);
        (0..g.m())
            .map(|j| self.sign * (self.zeta_x[j] * psi_x[j] - self.c[i][j] * pz[i][j]))
            .collect()
    }

    /// `int int a [ (Phi_x)^2 + delta^-2 (Phi_z)^2 ] dx dztilde`.
    pub fn energy(&self, unknowns: &[f64], psi: &[f64]) -> f64 {
        let g = self.strip.horizontal;
        let m = g.m();
        let lv = self.full_levels(unknowns);
        let pz = self.dz(&lv);
        let psi_x = g.deriv(psi, 1);
        let d2 = self.delta2;
        let mut total = 0.0;
        for (l, w) in self.strip.cheb.weights.iter().enumerate() {
            let px = g.deriv(&lv[l], 1);
            let tx = &self.theta_x[l];
            let mut s = 0.0;
            for j in 0..m {
                let a = self.a[j];
                let phix = psi_x[j] + d2 * px[j] - tx[j] * d2 * pz[l][j] / a;
                let phiz = pz[l][j] / a;
                s += a * (phix * phix + d2 * phiz * phiz);
            }
            total += w * self.strip.dz_ds * s * g.dx();
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceBackend {
    Dense,
    Krylov,
}

/// Solver for the single-layer Dirichlet problem.
pub struct LayerDtnSolver<'g> {
    problem: LayerStrip<'g>,
    backend: ReferenceBackend,
    dense: OnceLock<DenseSolver>,
    precond: OnceLock<ModalPreconditioner>,
}

impl<'g> LayerDtnSolver<'g> {
    pub fn new(problem: LayerStrip<'g>, backend: ReferenceBackend) -> Self {
        LayerDtnSolver { problem, backend, dense: OnceLock::new(), precond: OnceLock::new() }
    }

    pub fn problem(&self) -> &LayerStrip<'g> {
        &self.problem
    }

    /// Lifted interior unknowns for the trace `psi`.
    pub fn solve(&self, psi: &[f64]) -> Result<Vec<f64>> {
        let n = self.problem.strip.unknowns();
        let zero = vec![0.0; n];
        let rhs: Vec<f64> = self.problem.residual(&zero, psi).iter().map(|v| -v).collect();
        let op = |x: &[f64]| self.problem.residual(x, &vec![0.0; psi.len()]);
        solve_with(self.backend, &self.dense, &self.precond, n, &op, &rhs, || {
            let flat = self.problem.flattened()?;
            let g = self.problem.strip.horizontal;
            ModalPreconditioner::probe(g, self.problem.strip.vertical_order(), false, |x| {
                flat.residual(x, &vec![0.0; g.m()])
            })
        }, self.problem.strip.horizontal)
    }

    pub fn dtn(&self, psi: &[f64]) -> Result<Field> {
        let u = self.solve(psi)?;
        Ok(self.problem.dtn(&u, psi))
    }
}

fn solve_with(
    backend: ReferenceBackend,
    dense: &OnceLock<DenseSolver>,
    precond: &OnceLock<ModalPreconditioner>,
    n: usize,
    op: &dyn Fn(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    make_pc: impl FnOnce() -> Result<ModalPreconditioner>,
    grid: &PeriodicGrid,
) -> Result<Vec<f64>> {
    if rhs.iter().all(|v| *v == 0.0) {
        return Ok(vec![0.0; n]);
    }
    match backend {
        ReferenceBackend::Dense => {
            let s = match dense.get() {
                Some(s) => s,
                None => {
                    let s = DenseSolver::new(assemble_dense(n, op))?;
                    dense.get_or_init(|| s)
                }
            };
            s.solve(rhs)
        }
        ReferenceBackend::Krylov => {
            let pc = match precond.get() {
                Some(p) => p,
                None => {
                    let p = make_pc()?;
                    precond.get_or_init(|| p)
                }
            };
            let opts = GmresOptions { restart: 120, ..GmresOptions::default() };
            Ok(gmres(op, |r| pc.apply(grid, r), rhs, None, &opts)?.0)
        }
    }
}

fn check_trace(grid: &PeriodicGrid, f: &[f64]) -> Result<()> {
    if f.len() != grid.m() {
        return Err(KakinumaError::GridMismatch("trace length differs from grid".into()));
    }
    let mu = grid.mean(f);
    if mu.abs() > crate::spectral_grid::MEAN_TOL * PeriodicGrid::max_abs(f).max(1.0) {
        return Err(KakinumaError::NonZeroMean(mu));
    }
    Ok(())
}

/// Full Dirichlet-to-Neumann map `Lambda_l` of one layer.
pub fn full_dtn(
    grid: &PeriodicGrid,
    phi_trace: &[f64],
    state: &InterfaceState,
    params: &NondimParams,
    layer: Layer,
    vertical_order: usize,
) -> Result<Field> {
    check_trace(grid, phi_trace)?;
    let strip = StripGrid::new(grid, vertical_order, layer, params)?;
    let prob = LayerStrip::new(strip, state, params)?;
    let out = LayerDtnSolver::new(prob, ReferenceBackend::Krylov).dtn(phi_trace)?;
    Ok(grid.mean_free(&out))
}

/// Emitted when doubling the vertical order moves the output by more than [`RESOLUTION_TOL`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolutionWarning {
    pub vertical_order: usize,
    pub relative_change: f64,
}

/// [`full_dtn`] together with a doubling check of the vertical order.
pub fn full_dtn_checked(
    grid: &PeriodicGrid,
    phi_trace: &[f64],
    state: &InterfaceState,
    params: &NondimParams,
    layer: Layer,
    vertical_order: usize,
) -> Result<(Field, Option<ResolutionWarning>)> {
    let coarse = full_dtn(grid, phi_trace, state, params, layer, vertical_order)?;
    let fine = full_dtn(grid, phi_trace, state, params, layer, 2 * vertical_order)?;
    let scale = PeriodicGrid::max_abs(&fine);
    let diff = coarse.iter().zip(&fine).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let rel = if scale > 0.0 { diff / scale } else { diff };
    let warn = (rel > RESOLUTION_TOL).then_some(ResolutionWarning { vertical_order, relative_change: rel });
    if let Some(w) = &warn {
        log::warn!("reference DtN not resolved at P = {}: relative change {:e}", w.vertical_order, w.relative_change);
    }
    Ok((fine, warn))
}

/// Solution of the two-layer transmission problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionSolution {
    pub lifted1: Vec<f64>,
    pub lifted2: Vec<f64>,
    /// Interface traces `psi_1`, `psi_2`.
    pub psi1: Field,
    pub psi2: Field,
    /// Matched flux `Lambda_2 psi_2 = -Lambda_1 psi_1`, i.e. `d zeta/dt` of the full model.
    pub neumann: Field,
    pub lambda1: Field,
    pub lambda2: Field,
    pub multiplier: f64,
    pub energy1: f64,
    pub energy2: f64,
}

/// Two-layer transmission solver at a fixed interface.
pub struct TransmissionSolver<'g> {
    grid: &'g PeriodicGrid,
    params: NondimParams,
    s1: LayerStrip<'g>,
    s2: LayerStrip<'g>,
    backend: ReferenceBackend,
    dense: OnceLock<DenseSolver>,
    precond: OnceLock<ModalPreconditioner>,
}

impl<'g> TransmissionSolver<'g> {
    pub fn new(
        grid: &'g PeriodicGrid,
        state: &InterfaceState,
        params: &NondimParams,
        vertical_order: usize,
        backend: ReferenceBackend,
    ) -> Result<Self> {
        let s1 = LayerStrip::new(StripGrid::new(grid, vertical_order, Layer::Upper, params)?, state, params)?;
        let s2 = LayerStrip::new(StripGrid::new(grid, vertical_order, Layer::Lower, params)?, state, params)?;
        Ok(TransmissionSolver { grid, params: *params, s1, s2, backend, dense: OnceLock::new(), precond: OnceLock::new() })
    }

    fn len(&self) -> usize {
        self.s1.strip.unknowns() + self.s2.strip.unknowns() + self.grid.m() + 1
    }

    /// Unknowns `[Psi_1, Psi_2, psi_1, lambda]`; `psi_2 = (phi + rho1 psi_1)/rho2`.
    fn apply(s1: &LayerStrip, s2: &LayerStrip, p: &NondimParams, x: &[f64], phi: &[f64]) -> Vec<f64> {
        let g = s1.strip.horizontal;
        let m = g.m();
        let n1 = s1.strip.unknowns();
        let n2 = s2.strip.unknowns();
        let (u1, rest) = x.split_at(n1);
        let (u2, rest) = rest.split_at(n2);
        let psi1 = &rest[..m];
        let lam = rest[m];
        let psi2: Field = (0..m).map(|j| (phi[j] + p.rho1 * psi1[j]) / p.rho2).collect();
        let mut y = s1.residual(u1, psi1);
        y.extend(s2.residual(u2, &psi2));
        let l1 = s1.dtn(u1, psi1);
        let l2 = s2.dtn(u2, &psi2);
        let ny = g.nyquist_part(psi1);
        y.extend((0..m).map(|j| l1[j] + l2[j] + ny[j] + lam));
        y.push(g.mean(psi1));
        y
    }

    pub fn solve(&self, phi: &[f64]) -> Result<TransmissionSolution> {
        check_trace(self.grid, phi)?;
        let m = self.grid.m();
        let n = self.len();
        let zero_phi = vec![0.0; m];
        let rhs: Vec<f64> = Self::apply(&self.s1, &self.s2, &self.params, &vec![0.0; n], phi).iter().map(|v| -v).collect();
        let op = |x: &[f64]| Self::apply(&self.s1, &self.s2, &self.params, x, &zero_phi);
        let x = solve_with(self.backend, &self.dense, &self.precond, n, &op, &rhs, || {
            let f1 = self.s1.flattened()?;
            let f2 = self.s2.flattened()?;
            let p = self.params;
            let nb = (self.s1.strip.unknowns() + self.s2.strip.unknowns()) / m + 1;
            ModalPreconditioner::probe(self.grid, nb, true, |x| Self::apply(&f1, &f2, &p, x, &zero_phi))
        }, self.grid)?;
        let n1 = self.s1.strip.unknowns();
        let n2 = self.s2.strip.unknowns();
        let lifted1 = x[..n1].to_vec();
        let lifted2 = x[n1..n1 + n2].to_vec();
        let psi1 = x[n1 + n2..n1 + n2 + m].to_vec();
        let multiplier = x[n - 1];
        let psi2: Field = (0..m).map(|j| (phi[j] + self.params.rho1 * psi1[j]) / self.params.rho2).collect();
        let lambda1 = self.s1.dtn(&lifted1, &psi1);
        let lambda2 = self.s2.dtn(&lifted2, &psi2);
        let neumann = lambda2.clone();
        let energy1 = self.s1.energy(&lifted1, &psi1);
        let energy2 = self.s2.energy(&lifted2, &psi2);
        Ok(TransmissionSolution { lifted1, lifted2, psi1, psi2, neumann, lambda1, lambda2, multiplier, energy1, energy2 })
    }
}

pub fn solve_transmission(
    grid: &PeriodicGrid,
    phi: &[f64],
    state: &InterfaceState,
    params: &NondimParams,
    vertical_order: usize,
) -> Result<TransmissionSolution> {
    TransmissionSolver::new(grid, state, params, vertical_order, ReferenceBackend::Krylov)?.solve(phi)
}

/// Kinetic energy by volume quadrature plus `1/2 |zeta|^2`.
pub fn hamiltonian_full(
    grid: &PeriodicGrid,
    zeta: &[f64],
    phi: &[f64],
    b: &[f64],
    params: &NondimParams,
    vertical_order: usize,
) -> Result<f64> {
    let state = InterfaceState::new(zeta.to_vec(), b.to_vec(), params)?;
    let sol = solve_transmission(grid, phi, &state, params, vertical_order)?;
    Ok(hamiltonian_from_solution(grid, zeta, &sol, params))
}

pub fn hamiltonian_from_solution(grid: &PeriodicGrid, zeta: &[f64], sol: &TransmissionSolution, params: &NondimParams) -> f64 {
    0.5 * (params.rho1 * sol.energy1 + params.rho2 * sol.energy2) + 0.5 * grid.inner(zeta, zeta)
}

/// Boundary form of the same Hamiltonian: `1/2 <Lambda_2 psi_2, phi> + 1/2 |zeta|^2`.
pub fn hamiltonian_boundary_form(grid: &PeriodicGrid, zeta: &[f64], phi: &[f64], sol: &TransmissionSolution) -> f64 {
    0.5 * grid.inner(&sol.lambda2, phi) + 0.5 * grid.inner(zeta, zeta)
}
