//! Special functions needed by the Green-function machinery: erfc, the
//! exponential integral E1, and Carlson's symmetric elliptic integral R_F
//! (used as an independent oracle for ellipsoid Coulomb energies).

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Exponential integral E1(z) = int_z^inf e^{-t}/t dt for z > 0.
///
/// Power series below z = 1.5, modified-Lentz continued fraction above;
/// both branches are accurate to ~1e-15 relative and agree at the switch.
pub fn expint_e1(z: f64) -> f64 {
    assert!(z > 0.0, "E1 requires a positive argument, got {z}");
    if z <= 1.5 {
        // E1(z) = -gamma - ln z + sum_{k>=1} (-1)^{k+1} z^k / (k k!)
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..200 {
            let kf = k as f64;
            term *= -z / kf;
            let add = -term / kf;
            sum += add;
            if add.abs() < 1e-18 * (1.0 + sum.abs()) {
                break;
            }
        }
        -EULER_GAMMA - z.ln() + sum
    } else {
        // continued fraction e^{-z} / (z + 1 - 1^2/(z + 3 - 2^2/(z + 5 - ...)))
        let tiny = 1e-300;
        let mut b = z + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..200 {
            let a = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (a * d + b);
            c = b + a / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-z).exp()
    }
}

/// Carlson symmetric integral R_F(x, y, z) = 1/2 int_0^inf dt /
/// sqrt((t+x)(t+y)(t+z)), for nonnegative arguments with at most one zero.
pub fn carlson_rf(x: f64, y: f64, z: f64) -> f64 {
    assert!(x >= 0.0 && y >= 0.0 && z >= 0.0);
    let (mut x, mut y, mut z) = (x, y, z);
    let mut mu;
    loop {
        let sx = x.sqrt();
        let sy = y.sqrt();
        let sz = z.sqrt();
        let lam = sx * sy + sx * sz + sy * sz;
        x = 0.25 * (x + lam);
        y = 0.25 * (y + lam);
        z = 0.25 * (z + lam);
        mu = (x + y + z) / 3.0;
        let eps = [(x - mu) / mu, (y - mu) / mu, (z - mu) / mu]
            .iter()
            .fold(0.0f64, |m, e| m.max(e.abs()));
        if eps < 1e-4 {
            let dx = 1.0 - x / mu;
            let dy = 1.0 - y / mu;
            let dz = 1.0 - z / mu;
            let e2 = dx * dy + dx * dz + dy * dz;
            let e3 = dx * dy * dz;
            return (1.0 - e2 / 10.0 + e3 / 14.0 + e2 * e2 / 24.0 - 3.0 * e2 * e3 / 44.0)
                / mu.sqrt();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn erfc_reference_values() {
        assert_abs_diff_eq!(erfc(0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(erfc(1.0), 0.157_299_207_050_285_13, epsilon = 1e-15);
        // complement identity
        assert_abs_diff_eq!(erfc(0.7) + libm::erf(0.7), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn e1_reference_values() {
        assert_relative_eq!(expint_e1(1.0), 0.219_383_934_395_520_27, max_relative = 1e-13);
        assert_relative_eq!(expint_e1(0.5), 0.559_773_594_776_160_2, max_relative = 1e-13);
        assert_relative_eq!(expint_e1(4.0), 3.779_352_409_848_906_6e-3, max_relative = 1e-12);
    }

    #[test]
    fn e1_branches_agree_at_switch() {
        // evaluate both representations near z = 1.5 via tiny offsets
        let a = expint_e1(1.5 - 1e-12);
        let b = expint_e1(1.5 + 1e-12);
        assert_relative_eq!(a, b, max_relative = 1e-11);
    }

    #[test]
    fn e1_derivative_matches_finite_difference() {
        let z = 2.3;
        let h = 1e-6;
        let fd = (expint_e1(z + h) - expint_e1(z - h)) / (2.0 * h);
        assert_relative_eq!(fd, -(-z).exp() / z, max_relative = 1e-8);
    }

    #[test]
    fn rf_degenerate_values() {
        // R_F(x,x,x) = x^{-1/2}
        assert_relative_eq!(carlson_rf(4.0, 4.0, 4.0), 0.5, max_relative = 1e-14);
        // R_F(0,y,y) = pi / (2 sqrt(y))
        assert_relative_eq!(
            carlson_rf(0.0, 2.0, 2.0),
            std::f64::consts::PI / (2.0 * 2.0f64.sqrt()),
            max_relative = 1e-13
        );
        // lemniscatic value R_F(0,1,2) = Gamma(1/4)^2 / (4 sqrt(2 pi))
        assert_relative_eq!(carlson_rf(0.0, 1.0, 2.0), 1.311_028_777_146_059_9, max_relative = 1e-12);
    }

    #[test]
    fn rf_matches_direct_quadrature() {
        // brute-force the defining integral with a tail substitution
        let (x, y, z) = (0.7, 1.9, 3.1);
        let (n1, w1) = crate::numerics::gauss::gauss_legendre_ab(600, 0.0, 200.0);
        let mut q: f64 = n1
            .iter()
            .zip(&w1)
            .map(|(&t, &w)| w / ((t + x) * (t + y) * (t + z)).sqrt())
            .sum();
        // tail: integrand = t^{-3/2} (1 - (x+y+z)/(2t) + O(t^-2))
        let t0: f64 = 200.0;
        q += 2.0 / t0.sqrt() - (x + y + z) / (3.0 * t0.powf(1.5));
        assert_relative_eq!(0.5 * q, carlson_rf(x, y, z), max_relative = 1e-4);
    }
}
