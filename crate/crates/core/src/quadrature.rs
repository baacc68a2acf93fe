//! Gauss-Legendre rules and composite tensor grids.

use crate::error::{invalid, Result};

/// Nodes and weights of an `n`-point rule on `[a, b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

impl GaussLegendre {
    /// Rule on `[-1, 1]`, nodes ascending; Newton iteration from the
    /// Chebyshev-like initial guesses.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("quadrature needs at least one node"));
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let half = n.div_ceil(2);
        for i in 0..half {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, dp) = legendre(n, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, dp) = legendre(n, x);
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(Self { nodes, weights })
    }

    /// Same rule mapped to `[a, b]`.
    pub fn on(n: usize, a: f64, b: f64) -> Result<Self> {
        let base = Self::new(n)?;
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        Ok(Self {
            nodes: base.nodes.iter().map(|x| mid + half * x).collect(),
            weights: base.weights.iter().map(|w| w * half).collect(),
        })
    }

    /// Composite rule: `panels` equal panels of `n` nodes each on `[a, b]`.
    pub fn composite(n: usize, panels: usize, a: f64, b: f64) -> Result<Self> {
        if panels == 0 {
            return Err(invalid("composite rule needs at least one panel"));
        }
        let base = Self::new(n)?;
        let width = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(n * panels);
        let mut weights = Vec::with_capacity(n * panels);
        for p in 0..panels {
            let lo = a + width * p as f64;
            for (x, w) in base.nodes.iter().zip(&base.weights) {
                nodes.push(lo + 0.5 * width * (x + 1.0));
                weights.push(0.5 * width * w);
            }
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}
