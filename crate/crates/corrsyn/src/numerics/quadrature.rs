use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Tolerance band for clamping a correlation coefficient that overshoots
/// `|psi| = 1` by floating-point roundoff.
pub const PSI_CLAMP_BAND: f64 = 1e-12;

/// Gauss–Hermite rule for the standard normal measure
/// `Dx = e^{-x^2/2} dx / sqrt(2*pi)`.
///
/// Nodes are symmetric about zero and weights sum to one, so
/// `sum_k w_k f(x_k)` approximates `E[f(X)]` for `X ~ N(0,1)`, exactly
/// for polynomials of degree `<= 2*order - 1`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Builds an `order`-node rule: Golub–Welsch eigenvalues of the
    /// Hermite Jacobi matrix for the initial roots, Newton-polished on
    /// the orthonormal Hermite recurrence, with weights from the
    /// Christoffel function. Accurate to machine precision out to the
    /// highest exact moment.
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Domain("quadrature order must be positive".into()));
        }
        // Jacobi matrix: zero diagonal, off-diagonal sqrt(k) for He_k.
        let mut jacobi = DMatrix::<f64>::zeros(order, order);
        for k in 1..order {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = nalgebra::SymmetricEigen::new(jacobi);
        let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        nodes.sort_by(f64::total_cmp);

        // Newton polish: x -= h_n(x) / (sqrt(n) h_{n-1}(x)) in the
        // orthonormal normalization, which stays in f64 range.
        let n = order;
        let mut weights = vec![0.0; n];
        for k in 0..n {
            let mut x = nodes[k];
            for _ in 0..3 {
                let (hn, hnm1, _) = orthonormal_hermite(n, x);
                let deriv = (n as f64).sqrt() * hnm1;
                if deriv != 0.0 {
                    x -= hn / deriv;
                }
            }
            nodes[k] = x;
            let (_, _, christoffel) = orthonormal_hermite(n, x);
            weights[k] = 1.0 / christoffel;
        }

        // nodes come in +/- pairs; averaging the mirrored halves makes
        // odd moments vanish exactly
        for k in 0..n / 2 {
            let m = n - 1 - k;
            let x = 0.5 * (nodes[m] - nodes[k]);
            nodes[k] = -x;
            nodes[m] = x;
            let w = 0.5 * (weights[k] + weights[m]);
            weights[k] = w;
            weights[m] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(Self { nodes, weights })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Orthonormal Hermite values at x: returns (h_n, h_{n-1},
/// sum_{j<n} h_j^2). The h_j are orthonormal for the unit-mass normal
/// measure, so the running sum is the reciprocal Christoffel weight.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    // h_0 = 1, h_{k+1} = (x h_k - sqrt(k) h_{k-1}) / sqrt(k+1)
    let mut prev = 0.0f64;
    let mut curr = 1.0f64;
    let mut sum_sq = 0.0f64;
    for k in 0..n {
        sum_sq += curr * curr;
        let next = (x * curr - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = curr;
        curr = next;
    }
    (curr, prev, sum_sq)
}

/// `E[f(X)]` for `X ~ N(0,1)` under the given rule.
pub fn gauss_expect_1d(f: impl Fn(f64) -> f64, rule: &QuadratureRule) -> Result<f64> {
    let mut acc = 0.0;
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let v = f(x);
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand { node: x });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// `E[f(X, Y')]` where `(X, Y')` are standard normals with correlation
/// `psi`, parametrized as `Y' = psi*X + sqrt(1-psi^2)*Y` over the
/// tensor-product rule. `|psi|` up to `1 + 1e-12` is clamped onto the
/// boundary, where the integral degenerates to 1-D over `f(x, ±x)`.
pub fn gauss_expect_2d(
    f: impl Fn(f64, f64) -> f64,
    psi: f64,
    rule: &QuadratureRule,
) -> Result<f64> {
    let psi = clamp_psi(psi)?;
    if psi.abs() == 1.0 {
        return gauss_expect_1d(|x| f(x, psi * x), rule);
    }
    let s = (1.0 - psi * psi).sqrt();
    let mut acc = 0.0;
    for (&x, &wx) in rule.nodes.iter().zip(&rule.weights) {
        let mut inner = 0.0;
        for (&y, &wy) in rule.nodes.iter().zip(&rule.weights) {
            let v = f(x, psi * x + s * y);
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand { node: y });
            }
            inner += wy * v;
        }
        acc += wx * inner;
    }
    Ok(acc)
}

/// Clamps a correlation coefficient into `[-1, 1]`, tolerating roundoff
/// overshoot of at most `PSI_CLAMP_BAND`.
pub fn clamp_psi(psi: f64) -> Result<f64> {
    if psi.abs() <= 1.0 {
        Ok(psi)
    } else if psi.abs() <= 1.0 + PSI_CLAMP_BAND {
        Ok(psi.signum())
    } else {
        Err(Error::Domain(format!(
            "correlation coefficient |psi| = {} exceeds 1 beyond roundoff",
            psi.abs()
        )))
    }
}
