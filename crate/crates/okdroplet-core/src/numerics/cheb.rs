//! Chebyshev interpolation on an interval: spectral-accuracy evaluation,
//! differentiation, and cumulative integration for smooth radial profiles.

use std::f64::consts::PI;

/// Chebyshev-Gauss-Lobatto nodes on [a, b], ordered ascending, n+1 points.
pub fn lobatto_nodes(n: usize, a: f64, b: f64) -> Vec<f64> {
    assert!(n >= 1);
    (0..=n)
        .map(|j| {
            let t = (PI * (n - j) as f64 / n as f64).cos();
            0.5 * (a + b) + 0.5 * (b - a) * t
        })
        .collect()
}

/// Chebyshev series a_0/...: f(x(t)) = sum_k c_k T_k(t) fitted through
/// Lobatto samples. `values` must be ordered like `lobatto_nodes`.
#[derive(Debug, Clone)]
pub struct ChebSeries {
    pub a: f64,
    pub b: f64,
    pub coeffs: Vec<f64>,
}

impl ChebSeries {
    pub fn fit(a: f64, b: f64, values: &[f64]) -> Self {
        let n = values.len() - 1;
        assert!(n >= 1);
        // discrete cosine transform (type I), direct O(n^2) sums; n stays small
        let mut coeffs = vec![0.0; n + 1];
        for (k, ck) in coeffs.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, &fj) in values.iter().enumerate() {
                // values[j] sits at t = cos(pi (n-j)/n)
                let ang = PI * (k * (n - j)) as f64 / n as f64;
                let w = if j == 0 || j == n { 0.5 } else { 1.0 };
                s += w * fj * ang.cos();
            }
            let scale = if k == 0 || k == n { 1.0 / n as f64 } else { 2.0 / n as f64 };
            *ck = s * scale;
        }
        ChebSeries { a, b, coeffs }
    }

    fn to_t(&self, x: f64) -> f64 {
        (2.0 * x - self.a - self.b) / (self.b - self.a)
    }

    /// Clenshaw evaluation.
    pub fn eval(&self, x: f64) -> f64 {
        let t = self.to_t(x);
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for &c in self.coeffs.iter().skip(1).rev() {
            let b0 = 2.0 * t * b1 - b2 + c;
            b2 = b1;
            b1 = b0;
        }
        t * b1 - b2 + self.coeffs[0]
    }

    /// Series of the antiderivative F with F(a) = 0.
    pub fn antiderivative(&self) -> ChebSeries {
        let n = self.coeffs.len() - 1;
        let h = 0.5 * (self.b - self.a);
        let c = &self.coeffs;
        let mut b = vec![0.0; n + 2];
        for k in 1..=n + 1 {
            // the k = 1 rule needs the doubled constant: int T_0 = T_1
            let prev = if k == 1 { 2.0 * c[0] } else { c[k - 1] };
            let next = if k + 1 <= n { c[k + 1] } else { 0.0 };
            b[k] = h * (prev - next) / (2.0 * k as f64);
        }
        // pin F(a) = 0, i.e. value at t = -1 vanishes
        let mut f = ChebSeries { a: self.a, b: self.b, coeffs: b };
        let at_a = f.eval(self.a);
        f.coeffs[0] -= at_a;
        f
    }

    /// Definite integral over [a, b].
    pub fn integral(&self) -> f64 {
        let h = 0.5 * (self.b - self.a);
        let mut s = 2.0 * self.coeffs[0];
        let mut k = 2;
        while k < self.coeffs.len() {
            s -= 2.0 * self.coeffs[k] / ((k * k - 1) as f64);
            k += 2;
        }
        s * h
    }
}
