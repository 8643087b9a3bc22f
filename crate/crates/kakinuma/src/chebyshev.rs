//! Chebyshev–Gauss–Lobatto nodes, differentiation matrix and
//! Clenshaw–Curtis weights on `[-1, 1]`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevBasis {
    /// `s_m = cos(pi m / P)`, descending from 1 to -1.
    pub nodes: Vec<f64>,
    pub diff: DMatrix<f64>,
    pub weights: Vec<f64>,
}

impl ChebyshevBasis {
    pub fn new(order: usize) -> Self {
        assert!(order >= 2, "Chebyshev order must be at least 2");
        let p = order;
        let nodes: Vec<f64> = (0..=p).map(|m| (PI * m as f64 / p as f64).cos()).collect();
        let c: Vec<f64> = (0..=p)
            .map(|i| {
                let e = if i == 0 || i == p { 2.0 } else { 1.0 };
                if i % 2 == 0 { e } else { -e }
            })
            .collect();
        let mut diff = DMatrix::zeros(p + 1, p + 1);
        for i in 0..=p {
            let mut row = 0.0;
            for j in 0..=p {
                if i != j {
                    let v = c[i] / c[j] / (nodes[i] - nodes[j]);
                    diff[(i, j)] = v;
                    row += v;
                }
            }
            diff[(i, i)] = -row;
        }
        ChebyshevBasis { nodes, diff, weights: clenshaw_curtis(p) }
    }

    pub fn order(&self) -> usize {
        self.nodes.len() - 1
    }
}

fn clenshaw_curtis(p: usize) -> Vec<f64> {
    let theta: Vec<f64> = (0..=p).map(|m| PI * m as f64 / p as f64).collect();
    let pf = p as f64;
    let mut w = vec![0.0; p + 1];
    let mut v = vec![1.0; p.saturating_sub(1)];
    if p % 2 == 0 {
        w[0] = 1.0 / (pf * pf - 1.0);
        w[p] = w[0];
        for k in 1..p / 2 {
            let kf = k as f64;
            for (i, vi) in v.iter_mut().enumerate() {
                *vi -= 2.0 * (2.0 * kf * theta[i + 1]).cos() / (4.0 * kf * kf - 1.0);
            }
        }
        for (i, vi) in v.iter_mut().enumerate() {
            *vi -= (pf * theta[i + 1]).cos() / (pf * pf - 1.0);
        }
    } else {
        w[0] = 1.0 / (pf * pf);
        w[p] = w[0];
        for k in 1..=(p - 1) / 2 {
            let kf = k as f64;
            for (i, vi) in v.iter_mut().enumerate() {
                *vi -= 2.0 * (2.0 * kf * theta[i + 1]).cos() / (4.0 * kf * kf - 1.0);
            }
        }
    }
    for (i, vi) in v.iter().enumerate() {
        w[i + 1] = 2.0 * vi / pf;
    }
    w
}
