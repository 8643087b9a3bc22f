use std::f64::consts::PI;
use std::path::PathBuf;

use kakinuma::consistency_lab::{
    dispersion_symbols, hamiltonian_error_converged, run_sweep, OrderFit, SweepConfig,
};
use kakinuma::elliptic_solver::{prepare_initial_data, CoupledSystem, SolveOptions};
use kakinuma::evolution::{diagnose, simulate, CanonicalState, HaltReason, KakinumaFlow, RunSettings};
use kakinuma::format::fmt_g17;
use kakinuma::kakinuma_ops::InterfaceState;
use kakinuma::params_core::{validate_params, ExpansionSpec, Layer, NondimParams, StabilityConstants};
use kakinuma::spectral_grid::{Field, PeriodicGrid};
use kakinuma::KakinumaError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{field_error, Format, Mode, RunConfig, Trig};
use crate::error::{CliError, EXIT_INSTABILITY, EXIT_OK};
use crate::output::{columns_csv, config_hash, RunWriter};

/// Everything a subcommand needs besides the parsed config.
pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub raw: &'a str,
    pub seed: u64,
    pub out: PathBuf,
}

impl Context<'_> {
    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> CliError {
        CliError::Config(field_error(self.raw, section, key, message))
    }

    fn writer(&self, command: &'static str) -> Result<RunWriter, CliError> {
        RunWriter::new(&self.out, command, config_hash(self.raw))
    }

    fn params(&self, delta: f64, key: &str) -> Result<NondimParams, CliError> {
        validate_params(self.cfg.rho1, self.cfg.h1, delta).map_err(|e| self.err("params", key, format!("delta = {delta}: {e}")))
    }

    fn spec(&self) -> Result<ExpansionSpec, CliError> {
        let spec = ExpansionSpec::new(self.cfg.n, self.cfg.case);
        spec.validate()
            .and_then(|_| StabilityConstants::new(&spec))
            .map_err(|e| self.err("spec", "N", e.to_string()))?;
        Ok(spec)
    }

    fn grid(&self) -> Result<PeriodicGrid, CliError> {
        PeriodicGrid::new(self.cfg.m, self.cfg.length).map_err(|e| self.err("grid", "M", e.to_string()))
    }
}

struct Setup {
    grid: PeriodicGrid,
    params: NondimParams,
    spec: ExpansionSpec,
    zeta: Field,
    phi: Field,
    b: Field,
}

fn profile(grid: &PeriodicGrid, modes: &[Mode]) -> Field {
    let kappa = 2.0 * PI / grid.length();
    grid.sample(|x| {
        modes
            .iter()
            .map(|m| match m.trig {
                Trig::Cos => m.amp * (kappa * m.k as f64 * x).cos(),
                Trig::Sin => m.amp * (kappa * m.k as f64 * x).sin(),
            })
            .sum()
    })
}

/// Seeded modes `amp / k^2 (u cos + v sin)`, `u, v` uniform on `[-1, 1]`.
fn random_modes(rng: &mut ChaCha8Rng, amp: f64, count: u32) -> Vec<Mode> {
    let mut out = Vec::new();
    for k in 1..=count {
        let s = amp / (k * k) as f64;
        out.push(Mode { trig: Trig::Cos, k, amp: s * rng.random_range(-1.0..=1.0) });
        out.push(Mode { trig: Trig::Sin, k, amp: s * rng.random_range(-1.0..=1.0) });
    }
    out
}

fn setup(ctx: &Context) -> Result<Setup, CliError> {
    let cfg = ctx.cfg;
    let params = ctx.params(cfg.delta, "delta")?;
    let spec = ctx.spec()?;
    let grid = ctx.grid()?;
    let init = &cfg.initial;
    let mut zeta_modes = init.zeta.clone();
    let mut phi_modes = init.phi.clone();
    if init.random_amp != 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        zeta_modes.extend(random_modes(&mut rng, init.random_amp, init.random_modes));
        phi_modes.extend(random_modes(&mut rng, init.random_amp, init.random_modes));
    }
    let zeta: Field = profile(&grid, &zeta_modes).iter().map(|z| z + init.zeta_mean).collect();
    let phi = profile(&grid, &phi_modes);
    let b = profile(&grid, &init.b);
    check_non_cavitation(ctx, &zeta, &b, &params)?;
    Ok(Setup { grid, params, spec, zeta, phi, b })
}

fn check_non_cavitation(ctx: &Context, zeta: &[f64], b: &[f64], params: &NondimParams) -> Result<(), CliError> {
    match InterfaceState::new(zeta.to_vec(), b.to_vec(), params) {
        Ok(_) => Ok(()),
        Err(KakinumaError::Cavitation { layer, min_h }) => Err(ctx.err(
            "initial",
            "zeta",
            format!("initial data violate the non-cavitation condition: layer {layer} has min H = {min_h:e}"),
        )),
        Err(e) => Err(e.into()),
    }
}

fn options(cfg: &RunConfig) -> SolveOptions {
    SolveOptions { backend: cfg.run.backend, ..SolveOptions::default() }
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn cmd_simulate(ctx: &Context) -> Result<i32, CliError> {
    let cfg = ctx.cfg;
    let s = setup(ctx)?;
    let limit = cfg.run.c_stab * s.grid.dx();
    if cfg.run.dt > limit {
        return Err(ctx.err("run", "dt", format!("dt = {} exceeds c_stab * dx = {limit}", cfg.run.dt)));
    }
    let settings = RunSettings {
        t_end: cfg.run.t_end,
        dt: cfg.run.dt,
        stride: cfg.run.stride,
        halt_on_instability: cfg.run.halt_on_instability,
        c_stab: cfg.run.c_stab,
        energy_index: cfg.run.energy_index,
        snapshot_stride: cfg.run.snapshot_stride,
    };
    let mut flow = KakinumaFlow::new(&s.grid, s.b.clone(), &s.params, &s.spec, options(cfg))?;
    let initial = CanonicalState { t: 0.0, zeta: s.zeta.clone(), phi: s.phi.clone() };
    let traj = simulate(&mut flow, initial, &settings)?;

    let mut w = ctx.writer("simulate")?;
    let meta = w.metadata(
        cfg,
        &[
            ("delta", fmt_g17(cfg.delta)),
            ("dt", fmt_g17(cfg.run.dt)),
            ("T", fmt_g17(cfg.run.t_end)),
            ("seed", ctx.seed.to_string()),
        ],
    );
    w.write("trajectory.csv", &traj.record.to_csv(&meta))?;
    if !traj.record.snapshots.is_empty() {
        let nodes = s.grid.nodes();
        let mut cols: [Vec<f64>; 4] = Default::default();
        for snap in &traj.record.snapshots {
            for (j, x) in nodes.iter().enumerate() {
                cols[0].push(snap.t);
                cols[1].push(*x);
                cols[2].push(snap.zeta[j]);
                cols[3].push(snap.phi[j]);
            }
        }
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        w.write("snapshots.csv", &columns_csv(&meta, &["t", "x", "zeta", "phi"], &refs))?;
    }
    let halt = match &traj.halted {
        None => Value::Null,
        Some(HaltReason::NegativeMargin { t, min_margin }) => {
            json!({ "reason": "negative_margin", "t": t, "min_margin": min_margin })
        }
        Some(HaltReason::Cavitation { t, detail }) => json!({ "reason": "cavitation", "t": t, "detail": detail }),
    };
    let status = json!({
        "state": if traj.halted.is_some() { "halted" } else { "completed" },
        "final_t": traj.final_state.t,
        "records": traj.record.len(),
        "min_margin": min_of(&traj.record.min_margin),
        "max_compatibility": max_of(&traj.record.compatibility),
        "halt": halt,
    });
    w.finish(cfg, ctx.raw, ctx.seed, status)?;
    Ok(if traj.halted.is_some() { EXIT_INSTABILITY } else { EXIT_OK })
}

pub fn cmd_prepare_init(ctx: &Context) -> Result<i32, CliError> {
    let cfg = ctx.cfg;
    let s = setup(ctx)?;
    let (phi1, phi2) = prepare_initial_data(&s.grid, &s.zeta, &s.phi, &s.b, &s.params, &s.spec)?;
    let state = InterfaceState::new(s.zeta.clone(), s.b.clone(), &s.params)?;
    let sys = CoupledSystem::new(&s.grid, &state, &s.params, &s.spec, SolveOptions::default())?;
    let op1 = sys.operator(Layer::Upper);
    let op2 = sys.operator(Layer::Lower);
    let (t1, t2) = (op1.trace(&phi1)?, op2.trace(&phi2)?);
    let p = &s.params;
    let trace_res: Field = (0..s.grid.m()).map(|n| p.rho2 * t2[n] - p.rho1 * t1[n] - s.phi[n]).collect();
    let (za, zb) = sys.dzeta_dt_pair(&phi1, &phi2)?;
    let compat: Field = za.iter().zip(&zb).map(|(a, b)| a - b).collect();
    let mut constraint = 0.0f64;
    for rows in [op1.apply_call(&phi1)?, op2.apply_call(&phi2)?] {
        for r in rows.iter().skip(1) {
            constraint = constraint.max(s.grid.l2_norm(r));
        }
    }
    let residuals = [
        ("trace_residual", s.grid.l2_norm(&trace_res)),
        ("compatibility_residual", s.grid.l2_norm(&compat)),
        ("constraint_residual", constraint),
    ];

    let mut w = ctx.writer("prepare-init")?;
    let mut extra = vec![("delta", fmt_g17(cfg.delta)), ("seed", ctx.seed.to_string())];
    extra.extend(residuals.iter().map(|(k, v)| (*k, fmt_g17(*v))));
    let meta = w.metadata(cfg, &extra);
    let nodes = s.grid.nodes();
    let mut names = vec!["x".to_string(), "zeta".into(), "phi".into(), "b".into()];
    names.extend((0..phi1.len()).map(|i| format!("phi1_{i}")));
    names.extend((0..phi2.len()).map(|i| format!("phi2_{i}")));
    let mut cols: Vec<&[f64]> = vec![&nodes, &s.zeta, &s.phi, &s.b];
    cols.extend(phi1.iter().map(|f| f.as_slice()));
    cols.extend(phi2.iter().map(|f| f.as_slice()));
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    w.write("potentials.csv", &columns_csv(&meta, &names, &cols))?;
    let res: serde_json::Map<String, Value> = residuals.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    w.finish(cfg, ctx.raw, ctx.seed, json!({ "state": "completed", "residuals": res }))?;
    Ok(EXIT_OK)
}

fn fit_json(fit: &Option<OrderFit>) -> Value {
    match fit {
        None => Value::Null,
        Some(f) => json!({
            "slope": f.slope,
            "intercept": f.intercept,
            "r2": f.r2,
            "conclusive": f.conclusive(),
            "samples": f.deltas.len(),
            "excluded": f.excluded.iter().map(|(d, e)| json!([d, e])).collect::<Vec<_>>(),
        }),
    }
}

pub fn cmd_consistency(ctx: &Context) -> Result<i32, CliError> {
    let cfg = ctx.cfg;
    if cfg.deltas.is_empty() {
        return Err(ctx.err("params", "deltas", "empty delta list"));
    }
    for &d in &cfg.deltas {
        ctx.params(d, "deltas")?;
    }
    let spec = ctx.spec()?;
    PeriodicGrid::standard(cfg.m).map_err(|e| ctx.err("grid", "M", e.to_string()))?;
    if cfg.length != 2.0 * PI {
        log::warn!("sweeps run on [0, 2 pi); [grid] length = {} is ignored", cfg.length);
    }
    let sweep = SweepConfig {
        rho1: cfg.rho1,
        h1: cfg.h1,
        spec: spec.clone(),
        deltas: cfg.deltas.clone(),
        m: cfg.m,
        vertical_order: cfg.p_reference,
        zeta_amp: cfg.sweep.zeta_amp,
        b_amp: cfg.sweep.b_amp,
        phi_amp: cfg.sweep.phi_amp,
    };
    let result = run_sweep(&sweep).map_err(|e| match e {
        KakinumaError::Cavitation { layer, min_h } => ctx.err(
            "sweep",
            "zeta_amp",
            format!("sweep profile violates the non-cavitation condition: layer {layer} has min H = {min_h:e}"),
        ),
        other => other.into(),
    })?;
    let expected = 4 * cfg.n + 2;

    let mut w = ctx.writer("consistency")?;
    let meta = w.metadata(
        cfg,
        &[("P_reference", cfg.p_reference.to_string()), ("expected_order", expected.to_string())],
    );
    w.write("sweep.csv", &result.to_csv(&meta))?;
    let fits: serde_json::Map<String, Value> = result.fits.iter().map(|(k, f)| (k.clone(), fit_json(f))).collect();
    w.write_json("slopes.json", json!({ "expected_order": expected, "fits": fits }))?;
    w.finish(cfg, ctx.raw, ctx.seed, json!({ "state": "completed", "points": result.rows.len() }))?;
    Ok(EXIT_OK)
}

pub fn cmd_hamiltonian(ctx: &Context) -> Result<i32, CliError> {
    let cfg = ctx.cfg;
    let s = setup(ctx)?;
    let (cmp, order) = hamiltonian_error_converged(
        &s.grid,
        &s.zeta,
        &s.phi,
        &s.b,
        &s.params,
        &s.spec,
        cfg.p_reference,
        cfg.hamiltonian.max_order,
        cfg.hamiltonian.tol,
    )?;
    let rel = if cmp.full != 0.0 { cmp.error / cmp.full } else { 0.0 };
    let body = json!({
        "delta": cfg.delta,
        "H_K": cmp.kakinuma,
        "H_full": cmp.full,
        "error": cmp.error,
        "relative_error": rel,
        "vertical_order": order,
    });
    let mut w = ctx.writer("hamiltonian")?;
    w.write_json("hamiltonian.json", body)?;
    w.finish(cfg, ctx.raw, ctx.seed, json!({ "state": "completed" }))?;
    Ok(EXIT_OK)
}

pub fn cmd_dispersion(ctx: &Context) -> Result<i32, CliError> {
    let cfg = ctx.cfg;
    let params = ctx.params(cfg.delta, "delta")?;
    let spec = ctx.spec()?;
    let xi = cfg.dispersion.xi.clone();
    let mut full = Vec::with_capacity(xi.len());
    let mut kak = Vec::with_capacity(xi.len());
    for &x in &xi {
        let (f, k) = dispersion_symbols(x, &params, &spec)?;
        full.push(f);
        kak.push(k);
    }
    let gap: Vec<f64> = full.iter().zip(&kak).map(|(f, k)| (f - k).abs()).collect();

    let mut w = ctx.writer("dispersion")?;
    if cfg.output.formats.contains(&Format::Csv) {
        let meta = w.metadata(cfg, &[("delta", fmt_g17(cfg.delta))]);
        let csv = columns_csv(&meta, &["xi", "omega2_full", "omega2_kakinuma", "abs_gap"], &[&xi, &full, &kak, &gap]);
        w.write("dispersion.csv", &csv)?;
    }
    if cfg.output.formats.contains(&Format::Json) {
        let body = json!({
            "N": cfg.n,
            "case": format!("{:?}", cfg.case),
            "delta": cfg.delta,
            "xi": xi,
            "omega2_full": full,
            "omega2_kakinuma": kak,
        });
        w.write_json("dispersion.json", body)?;
    }
    w.finish(cfg, ctx.raw, ctx.seed, json!({ "state": "completed" }))?;
    Ok(EXIT_OK)
}

pub fn cmd_stability_report(ctx: &Context) -> Result<i32, CliError> {
    let cfg = ctx.cfg;
    let s = setup(ctx)?;
    let mut flow = KakinumaFlow::new(&s.grid, s.b.clone(), &s.params, &s.spec, options(cfg))?;
    let state = flow.interface(&s.zeta)?;
    let canon = CanonicalState { t: 0.0, zeta: s.zeta.clone(), phi: s.phi.clone() };
    let d = diagnose(&mut flow, &canon, cfg.run.energy_index)?;
    let constants = StabilityConstants::new(&s.spec)?;
    let min_margin = min_of(&d.margin);
    let body = json!({
        "min_H1": state.min_thickness(Layer::Upper),
        "min_H2": state.min_thickness(Layer::Lower),
        "min_margin": min_margin,
        "stable": min_margin > 0.0,
        "a": {
            "min": min_of(&d.a),
            "max": max_of(&d.a),
            "mean": s.grid.mean(&d.a),
        },
        "alpha1": constants.alpha1,
        "alpha2": constants.alpha2,
        "H_K": d.hamiltonian_k,
        "E_m": d.energy_m,
        "compatibility": d.compatibility,
    });
    let mut w = ctx.writer("stability-report")?;
    w.write_json("stability.json", body)?;
    w.finish(cfg, ctx.raw, ctx.seed, json!({ "state": "completed" }))?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_sample_the_configured_modes() {
        let g = PeriodicGrid::new(16, 4.0 * PI).unwrap();
        let f = profile(&g, &[Mode { trig: Trig::Sin, k: 2, amp: 0.5 }]);
        let want = g.sample(|x| 0.5 * x.sin());
        assert!(f.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn random_modes_are_seeded() {
        let a = random_modes(&mut ChaCha8Rng::seed_from_u64(7), 0.1, 3);
        let b = random_modes(&mut ChaCha8Rng::seed_from_u64(7), 0.1, 3);
        let c = random_modes(&mut ChaCha8Rng::seed_from_u64(8), 0.1, 3);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|m| m.amp.abs() <= 0.1 / (m.k * m.k) as f64));
    }
}
