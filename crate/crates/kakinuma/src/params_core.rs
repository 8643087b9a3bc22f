//! Nondimensional parameters, expansion specifications and the stability
//! constants built from the base matrices.

use nalgebra::DMatrix;
use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};

use crate::error::{KakinumaError, Result};

/// Threshold on `1/h1 + 1/h2` above which a [`RegimeWarning`] is raised.
pub const REGIME_THRESHOLD: f64 = 10.0;

/// Largest expansion order for which the stability constants are tabulated.
pub const MAX_EXACT_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Upper,
    Lower,
}

impl Layer {
    pub fn index(self) -> usize {
        match self {
            Layer::Upper => 1,
            Layer::Lower => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NondimParams {
    pub rho1: f64,
    pub rho2: f64,
    pub h1: f64,
    pub h2: f64,
    pub delta: f64,
}

/// Non-fatal flag for parameter sets far outside the shallow two-layer regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeWarning {
    pub inverse_depth_sum: f64,
}

impl NondimParams {
    pub fn delta1(&self) -> f64 {
        self.h1 * self.delta
    }

    pub fn delta2(&self) -> f64 {
        self.h2 * self.delta
    }

    pub fn depth(&self, layer: Layer) -> f64 {
        match layer {
            Layer::Upper => self.h1,
            Layer::Lower => self.h2,
        }
    }

    pub fn density(&self, layer: Layer) -> f64 {
        match layer {
            Layer::Upper => self.rho1,
            Layer::Lower => self.rho2,
        }
    }

    pub fn regime_warning(&self) -> Option<RegimeWarning> {
        let s = 1.0 / self.h1 + 1.0 / self.h2;
        (s > REGIME_THRESHOLD).then_some(RegimeWarning { inverse_depth_sum: s })
    }

    /// Same densities and depths with a different shallowness parameter.
    pub fn with_delta(&self, delta: f64) -> Result<NondimParams> {
        validate_params(self.rho1, self.h1, delta)
    }
}

/// Completes `(rho1, h1, delta)` to the full parameter tuple using
/// `rho1 + rho2 = 1` and `rho1/h1 + rho2/h2 = 1`.
pub fn validate_params(rho1: f64, h1: f64, delta: f64) -> Result<NondimParams> {
    let bad = |s: &str| Err(KakinumaError::ConstraintViolation(s.to_string()));
    if !(rho1.is_finite() && h1.is_finite() && delta.is_finite()) {
        return bad("parameters must be finite");
    }
    if !(rho1 > 0.0 && rho1 < 1.0) {
        return bad("0 < rho1 < 1");
    }
    if h1 <= rho1 {
        return bad("h1 > rho1 (needed for rho1/h1 + rho2/h2 = 1 with h2 > 0)");
    }
    if delta <= 0.0 {
        return bad("delta > 0");
    }
    let rho2 = 1.0 - rho1;
    let h2 = rho2 / (1.0 - rho1 / h1);
    let p = NondimParams { rho1, rho2, h1, h2, delta };
    if p.delta1() > 1.0 {
        return bad("h1*delta <= 1");
    }
    if p.delta2() > 1.0 {
        return bad("h2*delta <= 1");
    }
    let m = (h1 / rho1).min(h2 / rho2);
    if !(m > 1.0 && m <= 2.0 + 1e-12) {
        return bad("min(h1/rho1, h2/rho2) in (1, 2]");
    }
    if let Some(w) = p.regime_warning() {
        log::warn!(
            "1/h1 + 1/h2 = {:.3} exceeds {REGIME_THRESHOLD}; outside the intended regime",
            w.inverse_depth_sum
        );
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpansionCase {
    /// Lower layer uses even exponents `p_i = 2i`, `N* = N`.
    H1,
    /// Lower layer uses all exponents `p_i = i`, `N* = 2N`.
    H2,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExpansionSpec {
    pub n: usize,
    pub nstar: usize,
    pub p: Vec<u32>,
    pub case: ExpansionCase,
}

impl ExpansionSpec {
    pub fn new(n: usize, case: ExpansionCase) -> Self {
        let (nstar, p) = match case {
            ExpansionCase::H1 => (n, (0..=n).map(|i| 2 * i as u32).collect()),
            ExpansionCase::H2 => (2 * n, (0..=2 * n).map(|i| i as u32).collect()),
        };
        ExpansionSpec { n, nstar, p, case }
    }

    /// Exponents of the polynomial ansatz in the given layer.
    pub fn exponents(&self, layer: Layer) -> Vec<u32> {
        match layer {
            Layer::Upper => (0..=self.n).map(|i| 2 * i as u32).collect(),
            Layer::Lower => self.p.clone(),
        }
    }

    pub fn count(&self, layer: Layer) -> usize {
        match layer {
            Layer::Upper => self.n + 1,
            Layer::Lower => self.nstar + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expect = ExpansionSpec::new(self.n, self.case);
        if *self != expect {
            return Err(KakinumaError::InvalidSpec(format!(
                "N*={} p={:?} inconsistent with case {:?}, N={}",
                self.nstar, self.p, self.case, self.n
            )));
        }
        Ok(())
    }
}

fn exact_base_matrix(exps: &[u32]) -> Vec<Vec<BigRational>> {
    exps.iter()
        .map(|&pi| {
            exps.iter()
                .map(|&pj| BigRational::new(BigInt::one(), BigInt::from(pi + pj + 1)))
                .collect()
        })
        .collect()
}

fn exact_det(mut a: Vec<Vec<BigRational>>) -> BigRational {
    let n = a.len();
    let mut det = BigRational::one();
    for c in 0..n {
        let Some(piv) = (c..n).find(|&r| !a[r][c].is_zero()) else {
            return BigRational::zero();
        };
        if piv != c {
            a.swap(piv, c);
            det = -det;
        }
        let d = a[c][c].clone();
        det *= &d;
        for r in c + 1..n {
            if a[r][c].is_zero() {
                continue;
            }
            let f = &a[r][c] / &d;
            for k in c..n {
                let v = &f * &a[c][k];
                a[r][k] -= v;
            }
        }
    }
    det
}

/// `A_{l,0}` with entries `1/(p_i + p_j + 1)`.
pub fn base_matrix(spec: &ExpansionSpec, layer: Layer) -> DMatrix<f64> {
    let e = spec.exponents(layer);
    DMatrix::from_fn(e.len(), e.len(), |i, j| 1.0 / f64::from(e[i] + e[j] + 1))
}

/// Exact `alpha = det A / det [[0, 1^T], [-1, A]]`.
pub fn alpha_exact(spec: &ExpansionSpec, layer: Layer) -> Result<BigRational> {
    let e = spec.exponents(layer);
    let a = exact_base_matrix(&e);
    let n = e.len();
    let mut bordered = vec![vec![BigRational::zero(); n + 1]; n + 1];
    for i in 0..n {
        bordered[0][i + 1] = BigRational::one();
        bordered[i + 1][0] = -BigRational::one();
        for j in 0..n {
            bordered[i + 1][j + 1] = a[i][j].clone();
        }
    }
    let db = exact_det(bordered);
    if db.is_zero() {
        return Err(KakinumaError::SingularBorderedMatrix);
    }
    let alpha = exact_det(a) / db;
    debug_assert!(alpha.is_positive());
    Ok(alpha)
}

pub fn alpha_constant(spec: &ExpansionSpec, layer: Layer) -> Result<f64> {
    if spec.count(layer) > 2 * MAX_EXACT_ORDER + 1 {
        return Err(KakinumaError::InvalidSpec(format!(
            "alpha tabulated up to N = {MAX_EXACT_ORDER}"
        )));
    }
    let a = alpha_exact(spec, layer)?;
    a.to_f64()
        .ok_or_else(|| KakinumaError::InvalidSpec("alpha not representable".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityConstants {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl StabilityConstants {
    pub fn new(spec: &ExpansionSpec) -> Result<Self> {
        Ok(StabilityConstants {
            alpha1: alpha_constant(spec, Layer::Upper)?,
            alpha2: alpha_constant(spec, Layer::Lower)?,
        })
    }
}

/// Weights `(theta1, theta2)` splitting the shear term between the layers.
pub fn theta_weights(
    params: &NondimParams,
    h1_val: f64,
    h2_val: f64,
    alpha1: f64,
    alpha2: f64,
) -> Result<(f64, f64)> {
    let t1 = params.rho2 * params.h1 * h1_val * alpha1;
    let t2 = params.rho1 * params.h2 * h2_val * alpha2;
    let d = t1 + t2;
    if !(d > f64::MIN_POSITIVE * 1e3) || !d.is_finite() {
        return Err(KakinumaError::DegenerateDenominator(d));
    }
    Ok((t1 / d, t2 / d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symmetric_params() {
        let p = validate_params(0.5, 1.0, 0.1).unwrap();
        assert_eq!((p.rho1, p.rho2, p.h1, p.h2, p.delta), (0.5, 0.5, 1.0, 1.0, 0.1));
    }

    #[test]
    fn derived_lower_depth() {
        let p = validate_params(0.3, 0.6, 0.05).unwrap();
        assert!((p.h2 - 1.4).abs() < 1e-14);
    }

    #[test]
    fn shallowness_bound_violation() {
        let e = validate_params(0.5, 1.0, 1.5).unwrap_err();
        assert!(matches!(e, KakinumaError::ConstraintViolation(s) if s.contains("h1*delta")));
        assert!(validate_params(0.5, 0.4, 0.1).is_err());
        assert!(validate_params(1.0, 2.0, 0.1).is_err());
        assert!(validate_params(0.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn regime_warning_threshold() {
        let p = validate_params(0.5, 1.0, 0.1).unwrap();
        assert!(p.regime_warning().is_none());
        let q = validate_params(0.05, 0.051, 0.01).unwrap();
        assert!(q.regime_warning().is_some());
    }

    #[test]
    fn base_matrix_examples() {
        let s0 = ExpansionSpec::new(0, ExpansionCase::H1);
        assert_eq!(base_matrix(&s0, Layer::Upper), DMatrix::from_element(1, 1, 1.0));
        let s1 = ExpansionSpec::new(1, ExpansionCase::H1);
        let a = base_matrix(&s1, Layer::Upper);
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 5.0]));
        let s2 = ExpansionSpec::new(1, ExpansionCase::H2);
        let h = base_matrix(&s2, Layer::Lower);
        let hilbert = DMatrix::from_fn(3, 3, |i, j| 1.0 / (i + j + 1) as f64);
        assert_eq!(h, hilbert);
    }

    #[test]
    fn base_matrix_is_spd() {
        for n in 0..=6 {
            for case in [ExpansionCase::H1, ExpansionCase::H2] {
                let s = ExpansionSpec::new(n, case);
                for layer in [Layer::Upper, Layer::Lower] {
                    let a = base_matrix(&s, layer);
                    assert_eq!(a, a.transpose());
                    assert!(a.cholesky().is_some(), "n={n} {case:?} {layer:?}");
                }
            }
        }
    }

    // Independent route: alpha = 1 / (1^T A^{-1} 1) with A inverted by
    // exact Gauss-Jordan elimination.
    fn alpha_oracle(exps: &[u32]) -> BigRational {
        let n = exps.len();
        let mut m: Vec<Vec<BigRational>> = (0..n)
            .map(|i| {
                let mut row: Vec<BigRational> = (0..n)
                    .map(|j| BigRational::new(1.into(), BigInt::from(exps[i] + exps[j] + 1)))
                    .collect();
                row.push(BigRational::one());
                row
            })
            .collect();
        for c in 0..n {
            let p = m[c][c].clone();
            for v in m[c].iter_mut() {
                *v = &*v / &p;
            }
            for r in 0..n {
                if r != c {
                    let f = m[r][c].clone();
                    for k in 0..=n {
                        let t = &f * &m[c][k];
                        m[r][k] -= t;
                    }
                }
            }
        }
        let s: BigRational = m.iter().map(|row| row[n].clone()).sum();
        BigRational::one() / s
    }

    #[test]
    fn alpha_examples() {
        let s0 = ExpansionSpec::new(0, ExpansionCase::H1);
        assert_eq!(alpha_constant(&s0, Layer::Upper).unwrap(), 1.0);
        let s1 = ExpansionSpec::new(1, ExpansionCase::H1);
        assert_eq!(
            alpha_exact(&s1, Layer::Upper).unwrap(),
            BigRational::new(1.into(), 6.into())
        );
        let s2 = ExpansionSpec::new(2, ExpansionCase::H1);
        let a2 = alpha_exact(&s2, Layer::Upper).unwrap();
        assert_eq!(a2, alpha_oracle(&[0, 2, 4]));
        assert!(a2 < BigRational::new(1.into(), 6.into()));
    }

    #[test]
    fn alpha_matches_oracle_and_decreases() {
        for case in [ExpansionCase::H1, ExpansionCase::H2] {
            for layer in [Layer::Upper, Layer::Lower] {
                let mut prev = f64::INFINITY;
                for n in 0..=MAX_EXACT_ORDER.min(6) {
                    let s = ExpansionSpec::new(n, case);
                    let a = alpha_exact(&s, layer).unwrap();
                    assert_eq!(a, alpha_oracle(&s.exponents(layer)));
                    let af = a.to_f64().unwrap();
                    assert!(af > 0.0 && af < prev, "{case:?} {layer:?} n={n}");
                    prev = af;
                }
            }
        }
    }

    #[test]
    fn theta_examples() {
        let p = validate_params(0.5, 1.0, 0.1).unwrap();
        let (t1, t2) = theta_weights(&p, 1.0, 1.0, 0.3, 0.3).unwrap();
        assert!((t1 - 0.5).abs() < 1e-15 && (t2 - 0.5).abs() < 1e-15);
        let (t1, _) = theta_weights(&p, 1.0, 1.0, 1.0, 1.0 / 6.0).unwrap();
        assert!((t1 - 6.0 / 7.0).abs() < 1e-15);
        assert!(matches!(
            theta_weights(&p, 0.0, 0.0, 1.0, 1.0),
            Err(KakinumaError::DegenerateDenominator(_))
        ));
    }

    #[test]
    fn spec_cases() {
        let s = ExpansionSpec::new(2, ExpansionCase::H2);
        assert_eq!(s.nstar, 4);
        assert_eq!(s.p, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.exponents(Layer::Upper), vec![0, 2, 4]);
        assert!(s.validate().is_ok());
        let bad = ExpansionSpec { n: 1, nstar: 1, p: vec![0, 1], case: ExpansionCase::H1 };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn relations_hold(rho1 in 0.01f64..0.99, extra in 0.001f64..5.0, delta in 1e-3f64..0.2) {
            let h1 = rho1 + extra;
            if let Ok(p) = validate_params(rho1, h1, delta) {
                prop_assert!(((p.rho1 + p.rho2) - 1.0).abs() <= 1e-14);
                prop_assert!((p.rho1 / p.h1 + p.rho2 / p.h2 - 1.0).abs() <= 1e-14);
                prop_assert!(p.delta1() <= 1.0 && p.delta2() <= 1.0);
            }
        }

        #[test]
        fn theta_sums_to_one(h1 in 0.01f64..3.0, h2 in 0.01f64..3.0, a1 in 0.01f64..1.0, a2 in 0.01f64..1.0, rho1 in 0.05f64..0.95, ex in 0.01f64..2.0) {
            let p = validate_params(rho1, rho1 + ex, 1e-3).unwrap();
            let (t1, t2) = theta_weights(&p, h1, h2, a1, a2).unwrap();
            prop_assert!((t1 + t2 - 1.0).abs() <= 2e-16 * 4.0);
            prop_assert!(t1 > 0.0 && t1 < 1.0);
        }
    }
}
