//! INI run configuration.
//!
//! Every key has a default except `[params] rho1`, `[params] h1`, `[spec] N`
//! and `[spec] case`. Unknown sections and keys are rejected so that typos
//! surface as errors with their line number.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;

use ini::Ini;
use kakinuma::consistency_lab::DEFAULT_DELTAS;
use kakinuma::elliptic_solver::Backend;
use kakinuma::evolution::DEFAULT_C_STAB;
use kakinuma::params_core::ExpansionCase;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config error at line {l} ({}): {}", self.field, self.message),
            None => write!(f, "config error ({}): {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trig {
    Cos,
    Sin,
}

/// One term `amp * cos(2 pi k x / L)` or `amp * sin(..)` of a profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub trig: Trig,
    pub k: u32,
    pub amp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialBlock {
    pub zeta_mean: f64,
    pub zeta: Vec<Mode>,
    pub phi: Vec<Mode>,
    pub b: Vec<Mode>,
    /// Amplitude of the seeded random modes added to `zeta` and `phi`.
    pub random_amp: f64,
    pub random_modes: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunBlock {
    pub t_end: f64,
    pub dt: f64,
    pub stride: usize,
    pub halt_on_instability: bool,
    pub c_stab: f64,
    pub energy_index: u32,
    pub snapshot_stride: usize,
    pub backend: Backend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepBlock {
    pub zeta_amp: f64,
    pub b_amp: f64,
    pub phi_amp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionBlock {
    pub xi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianBlock {
    pub max_order: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputBlock {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub rho1: f64,
    pub h1: f64,
    pub delta: f64,
    pub deltas: Vec<f64>,
    pub n: usize,
    pub case: ExpansionCase,
    pub m: usize,
    pub length: f64,
    pub p_reference: usize,
    pub initial: InitialBlock,
    pub run: RunBlock,
    pub sweep: SweepBlock,
    pub dispersion: DispersionBlock,
    pub hamiltonian: HamiltonianBlock,
    pub output: OutputBlock,
}

const KEYS: &[(&str, &[&str])] = &[
    ("params", &["rho1", "h1", "delta", "deltas"]),
    ("spec", &["N", "case"]),
    ("grid", &["M", "length", "P_reference"]),
    ("initial", &["zeta_mean", "zeta", "phi", "b", "random_amp", "random_modes"]),
    ("run", &["T", "dt", "stride", "halt_on_instability", "c_stab", "energy_index", "snapshot_stride", "backend"]),
    ("sweep", &["zeta_amp", "b_amp", "phi_amp"]),
    ("dispersion", &["xi"]),
    ("hamiltonian", &["max_order", "tol"]),
    ("output", &["directory", "formats"]),
];

/// Maps `(section, key)` to the 1-based line that defines it; the empty key
/// gives the section header.
pub fn line_index(text: &str) -> BTreeMap<(String, String), usize> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            section = rest.trim_end_matches(']').trim().to_string();
            out.entry((section.clone(), String::new())).or_insert(i + 1);
        } else if let Some((k, _)) = line.split_once('=') {
            out.insert((section.clone(), k.trim().to_string()), i + 1);
        }
    }
    out
}

/// Error for `[section] key` located in `text`.
pub fn field_error(text: &str, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
    let lines = line_index(text);
    let line = lines
        .get(&(section.to_string(), key.to_string()))
        .or_else(|| lines.get(&(section.to_string(), String::new())))
        .copied();
    ConfigError { line, field: format!("[{section}] {key}"), message: message.into() }
}

struct Reader {
    ini: Ini,
    lines: BTreeMap<(String, String), usize>,
}

impl Reader {
    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            line: self.lines.get(&(section.to_string(), key.to_string())).copied(),
            field: format!("[{section}] {key}"),
            message: message.into(),
        }
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.ini.section(Some(section)).and_then(|p| p.get(key)).map(str::trim)
    }

    fn parse<T: std::str::FromStr>(&self, section: &str, key: &str, default: Option<T>) -> Result<T, ConfigError> {
        match self.raw(section, key) {
            Some(v) => v.parse().map_err(|_| self.err(section, key, format!("cannot parse {v:?}"))),
            None => default.ok_or_else(|| self.err(section, key, "missing required field")),
        }
    }

    fn float(&self, section: &str, key: &str, default: Option<f64>) -> Result<f64, ConfigError> {
        let v: f64 = self.parse(section, key, default)?;
        if !v.is_finite() {
            return Err(self.err(section, key, "value must be finite"));
        }
        Ok(v)
    }

    fn float_list(&self, section: &str, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        let Some(v) = self.raw(section, key) else {
            return Ok(default.to_vec());
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match s.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(self.err(section, key, format!("cannot parse {s:?}"))),
            })
            .collect()
    }

    fn modes(&self, section: &str, key: &str) -> Result<Vec<Mode>, ConfigError> {
        let Some(v) = self.raw(section, key) else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let parts: Vec<&str> = item.split_whitespace().collect();
            let bad = || self.err(section, key, format!("expected `cos|sin K AMP`, got {item:?}"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let trig = match parts[0] {
                "cos" => Trig::Cos,
                "sin" => Trig::Sin,
                _ => return Err(bad()),
            };
            let k: u32 = parts[1].parse().map_err(|_| bad())?;
            let amp: f64 = parts[2].parse().map_err(|_| bad())?;
            if !amp.is_finite() {
                return Err(bad());
            }
            out.push(Mode { trig, k, amp });
        }
        Ok(out)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError {
            line: Some(e.line),
            field: "syntax".into(),
            message: e.msg.to_string(),
        })?;
        let r = Reader { ini, lines: line_index(text) };
        for (section, props) in r.ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(r.err("", k, "key outside any section"));
                }
                continue;
            };
            let Some((_, known)) = KEYS.iter().find(|(s, _)| *s == section) else {
                return Err(r.err(section, "", "unknown section"));
            };
            for (k, _) in props.iter() {
                if !known.contains(&k) {
                    return Err(r.err(section, k, "unknown key"));
                }
            }
        }

        let case = match r.raw("spec", "case") {
            Some("H1") | Some("h1") => ExpansionCase::H1,
            Some("H2") | Some("h2") => ExpansionCase::H2,
            Some(v) => return Err(r.err("spec", "case", format!("expected H1 or H2, got {v:?}"))),
            None => return Err(r.err("spec", "case", "missing required field")),
        };
        let backend = match r.raw("run", "backend").unwrap_or("krylov") {
            "krylov" => Backend::Krylov,
            "dense" => Backend::Dense,
            v => return Err(r.err("run", "backend", format!("expected krylov or dense, got {v:?}"))),
        };
        let formats = match r.raw("output", "formats") {
            None => vec![Format::Csv, Format::Json],
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| match s {
                    "csv" => Ok(Format::Csv),
                    "json" => Ok(Format::Json),
                    _ => Err(r.err("output", "formats", format!("unknown format {s:?}"))),
                })
                .collect::<Result<Vec<_>, _>>()?,
        };
        let default_xi: Vec<f64> = (1..=40).map(|i| 0.125 * i as f64).collect();

        let cfg = RunConfig {
            rho1: r.float("params", "rho1", None)?,
            h1: r.float("params", "h1", None)?,
            delta: r.float("params", "delta", Some(0.2))?,
            deltas: r.float_list("params", "deltas", &DEFAULT_DELTAS)?,
            n: r.parse("spec", "N", None)?,
            case,
            m: r.parse("grid", "M", Some(64))?,
            length: r.float("grid", "length", Some(2.0 * PI))?,
            p_reference: r.parse("grid", "P_reference", Some(24))?,
            initial: InitialBlock {
                zeta_mean: r.float("initial", "zeta_mean", Some(0.0))?,
                zeta: r.modes("initial", "zeta")?,
                phi: r.modes("initial", "phi")?,
                b: r.modes("initial", "b")?,
                random_amp: r.float("initial", "random_amp", Some(0.0))?,
                random_modes: r.parse("initial", "random_modes", Some(4))?,
            },
            run: RunBlock {
                t_end: r.float("run", "T", Some(1.0))?,
                dt: r.float("run", "dt", Some(1e-3))?,
                stride: r.parse("run", "stride", Some(10))?,
                halt_on_instability: r.parse("run", "halt_on_instability", Some(true))?,
                c_stab: r.float("run", "c_stab", Some(DEFAULT_C_STAB))?,
                energy_index: r.parse("run", "energy_index", Some(0))?,
                snapshot_stride: r.parse("run", "snapshot_stride", Some(0))?,
                backend,
            },
            sweep: SweepBlock {
                zeta_amp: r.float("sweep", "zeta_amp", Some(0.1))?,
                b_amp: r.float("sweep", "b_amp", Some(0.0))?,
                phi_amp: r.float("sweep", "phi_amp", Some(1.0))?,
            },
            dispersion: DispersionBlock { xi: r.float_list("dispersion", "xi", &default_xi)? },
            hamiltonian: HamiltonianBlock {
                max_order: r.parse("hamiltonian", "max_order", Some(64))?,
                tol: r.float("hamiltonian", "tol", Some(1e-13))?,
            },
            output: OutputBlock {
                directory: PathBuf::from(r.raw("output", "directory").unwrap_or(".")),
                formats,
            },
        };

        let positive = [
            ("grid", "length", cfg.length),
            ("run", "dt", cfg.run.dt),
            ("run", "c_stab", cfg.run.c_stab),
            ("hamiltonian", "tol", cfg.hamiltonian.tol),
        ];
        for (s, k, v) in positive {
            if v <= 0.0 {
                return Err(r.err(s, k, "must be positive"));
            }
        }
        if cfg.run.t_end < 0.0 {
            return Err(r.err("run", "T", "must be non-negative"));
        }
        if cfg.run.stride == 0 {
            return Err(r.err("run", "stride", "must be at least 1"));
        }
        if cfg.initial.phi.iter().any(|m| m.k == 0) {
            return Err(r.err("initial", "phi", "phi must be mean-free; mode 0 is not allowed"));
        }
        if cfg.dispersion.xi.iter().any(|x| *x <= 0.0) {
            return Err(r.err("dispersion", "xi", "wavenumbers must be positive"));
        }
        if cfg.hamiltonian.max_order < cfg.p_reference {
            return Err(r.err("hamiltonian", "max_order", "must be at least [grid] P_reference"));
        }
        Ok(cfg)
    }

    /// Canonical INI text with every default filled in; parsing it yields `self`.
    pub fn resolved_ini(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let modes = |v: &[Mode]| {
            v.iter()
                .map(|m| {
                    let t = match m.trig {
                        Trig::Cos => "cos",
                        Trig::Sin => "sin",
                    };
                    format!("{t} {} {:?}", m.k, m.amp)
                })
                .collect::<Vec<_>>()
                .join(", ")
        };
        let case = match self.case {
            ExpansionCase::H1 => "H1",
            ExpansionCase::H2 => "H2",
        };
        let backend = match self.run.backend {
            Backend::Krylov => "krylov",
            Backend::Dense => "dense",
        };
        let formats = self
            .output
            .formats
            .iter()
            .map(|f| match f {
                Format::Csv => "csv",
                Format::Json => "json",
            })
            .collect::<Vec<_>>()
            .join(", ");
        let i = &self.initial;
        let r = &self.run;
        format!(
            "[params]\nrho1 = {:?}\nh1 = {:?}\ndelta = {:?}\ndeltas = {}\n\n\
             [spec]\nN = {}\ncase = {case}\n\n\
             [grid]\nM = {}\nlength = {:?}\nP_reference = {}\n\n\
             [initial]\nzeta_mean = {:?}\nzeta = {}\nphi = {}\nb = {}\nrandom_amp = {:?}\nrandom_modes = {}\n\n\
             [run]\nT = {:?}\ndt = {:?}\nstride = {}\nhalt_on_instability = {}\nc_stab = {:?}\nenergy_index = {}\nsnapshot_stride = {}\nbackend = {backend}\n\n\
             [sweep]\nzeta_amp = {:?}\nb_amp = {:?}\nphi_amp = {:?}\n\n\
             [dispersion]\nxi = {}\n\n\
             [hamiltonian]\nmax_order = {}\ntol = {:?}\n\n\
             [output]\ndirectory = {}\nformats = {formats}\n",
            self.rho1,
            self.h1,
            self.delta,
            list(&self.deltas),
            self.n,
            self.m,
            self.length,
            self.p_reference,
            i.zeta_mean,
            modes(&i.zeta),
            modes(&i.phi),
            modes(&i.b),
            i.random_amp,
            i.random_modes,
            r.t_end,
            r.dt,
            r.stride,
            r.halt_on_instability,
            r.c_stab,
            r.energy_index,
            r.snapshot_stride,
            self.sweep.zeta_amp,
            self.sweep.b_amp,
            self.sweep.phi_amp,
            list(&self.dispersion.xi),
            self.hamiltonian.max_order,
            self.hamiltonian.tol,
            self.output.directory.display(),
        )
    }
}
