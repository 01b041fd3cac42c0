//! Real circular and spherical harmonics.
//!
//! The 3D basis is built as solid harmonics (homogeneous harmonic
//! polynomials) through the associated-Legendre recurrence, then scaled to
//! be orthonormal in L2 of the unit sphere. Keeping them as polynomials
//! gives exact gradients and Hessians for curvature and moment formulas.

use super::poly::Poly3;

/// Plain trigonometric modes cos(k t), sin(k t) for k = 1..=degree,
/// interleaved as [cos 1t, sin 1t, cos 2t, sin 2t, ...]. Unnormalized:
/// each mode has L2 norm sqrt(pi) on the circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CircleBasis {
    pub degree: usize,
}

impl CircleBasis {
    pub fn count(&self) -> usize {
        2 * self.degree
    }

    /// (wavenumber, is_sine) of mode i.
    pub fn mode(&self, i: usize) -> (usize, bool) {
        (i / 2 + 1, i % 2 == 1)
    }

    pub fn value(&self, i: usize, theta: f64) -> f64 {
        let (k, s) = self.mode(i);
        let a = k as f64 * theta;
        if s {
            a.sin()
        } else {
            a.cos()
        }
    }

    pub fn dtheta(&self, i: usize, theta: f64) -> f64 {
        let (k, s) = self.mode(i);
        let kf = k as f64;
        let a = kf * theta;
        if s {
            kf * a.cos()
        } else {
            -kf * a.sin()
        }
    }
}

/// Orthonormal real spherical harmonics for l = 0..=degree as solid
/// polynomials. Index layout: i = l^2 + (m + l), where m < 0 denotes the
/// sine component of |m| and m > 0 the cosine component.
#[derive(Debug, Clone)]
pub struct SphereHarmonics {
    pub degree: usize,
    pub polys: Vec<Poly3>,
    pub grads: Vec<[Poly3; 3]>,
    /// Second derivatives per mode, packed as [xx, xy, xz, yy, yz, zz].
    pub hess: Vec<[Poly3; 6]>,
    /// (l, m) per index, m in -l..=l
    pub modes: Vec<(usize, i32)>,
}

impl SphereHarmonics {
    pub fn new(degree: usize) -> Self {
        let x = Poly3::var(0);
        let y = Poly3::var(1);
        let z = Poly3::var(2);
        let r2 = x.mul(&x).add(&y.mul(&y)).add(&z.mul(&z));

        // azimuthal pair A_m = Re((x+iy)^m), B_m = Im((x+iy)^m)
        let mut az_cos = vec![Poly3::constant(1.0)];
        let mut az_sin = vec![Poly3::zero()];
        for m in 1..=degree {
            let a = az_cos[m - 1].mul(&x).add(&az_sin[m - 1].mul(&y).scale(-1.0));
            let b = az_sin[m - 1].mul(&x).add(&az_cos[m - 1].mul(&y));
            az_cos.push(a);
            az_sin.push(b);
        }

        // u[l][m]: homogenized associated Legendre factor, degree l - m,
        // so that r^l P_l^m(cos th) = u[l][m] * (x^2+y^2)^{m/2} azimuthally
        let mut u: Vec<Vec<Poly3>> = vec![vec![Poly3::zero(); degree + 1]; degree + 1];
        for m in 0..=degree {
            let mut dfact = 1.0; // (2m-1)!!
            for k in 1..=m {
                dfact *= (2 * k - 1) as f64;
            }
            u[m][m] = Poly3::constant(dfact);
            if m + 1 <= degree {
                u[m + 1][m] = z.mul(&u[m][m]).scale((2 * m + 1) as f64);
            }
            for l in (m + 2)..=degree {
                let a = z.mul(&u[l - 1][m]).scale((2 * l - 1) as f64);
                let b = r2.mul(&u[l - 2][m]).scale(-((l + m - 1) as f64));
                u[l][m] = a.add(&b).scale(1.0 / ((l - m) as f64));
            }
        }

        let mut polys = Vec::new();
        let mut modes = Vec::new();
        for l in 0..=degree {
            for m in -(l as i32)..=(l as i32) {
                let ma = m.unsigned_abs() as usize;
                let base = if m < 0 {
                    u[l][ma].mul(&az_sin[ma])
                } else {
                    u[l][ma].mul(&az_cos[ma])
                };
                polys.push(base.scale(norm_factor(l, ma)));
                modes.push((l, m));
            }
        }
        let grads: Vec<[Poly3; 3]> = polys.iter().map(|p| p.gradient()).collect();
        let hess = grads
            .iter()
            .map(|g| {
                [g[0].diff(0), g[0].diff(1), g[0].diff(2), g[1].diff(1), g[1].diff(2), g[2].diff(2)]
            })
            .collect();
        SphereHarmonics { degree, polys, grads, hess, modes }
    }

    pub fn count(&self) -> usize {
        (self.degree + 1) * (self.degree + 1)
    }

    /// All values at a unit vector in one pass via the associated-Legendre
    /// recurrence; out must have length count(). Much cheaper than the
    /// polynomial route on large node sets, same normalization.
    pub fn values_unit_all(&self, xhat: [f64; 3], out: &mut [f64]) {
        assert_eq!(out.len(), self.count());
        let deg = self.degree;
        let u = xhat[2];
        let s = (xhat[0] * xhat[0] + xhat[1] * xhat[1]).sqrt();
        let (c1, s1) = if s > 1e-300 { (xhat[0] / s, xhat[1] / s) } else { (1.0, 0.0) };
        // p[l] holds P_l^m(u) for the current m, convention P_m^m = (2m-1)!! s^m
        let mut p = vec![0.0; deg + 1];
        let (mut cm, mut sm) = (1.0, 0.0); // cos(m phi), sin(m phi)
        let mut pmm = 1.0;
        for m in 0..=deg {
            if m > 0 {
                pmm *= (2 * m - 1) as f64 * s;
                let (c, sn) = (cm * c1 - sm * s1, sm * c1 + cm * s1);
                cm = c;
                sm = sn;
            }
            p[m] = pmm;
            if m + 1 <= deg {
                p[m + 1] = (2 * m + 1) as f64 * u * pmm;
            }
            for l in (m + 2)..=deg {
                p[l] = ((2 * l - 1) as f64 * u * p[l - 1]
                    - (l + m - 1) as f64 * p[l - 2])
                    / (l - m) as f64;
            }
            for l in m..=deg {
                let nf = norm_factor(l, m);
                let base = l * l + l; // index of (l, 0)
                out[base + m] = nf * p[l] * cm;
                if m > 0 {
                    out[base - m] = nf * p[l] * sm;
                }
            }
        }
    }

    /// Y_i evaluated at a unit vector (equals the solid harmonic there).
    pub fn value_unit(&self, i: usize, xhat: [f64; 3]) -> f64 {
        self.polys[i].eval(xhat)
    }

    /// Surface gradient of Y_i at a unit vector: grad S - l S xhat,
    /// automatically tangential by Euler's homogeneity relation.
    pub fn surface_gradient(&self, i: usize, xhat: [f64; 3]) -> [f64; 3] {
        let l = self.modes[i].0 as f64;
        let s = self.polys[i].eval(xhat);
        let g = &self.grads[i];
        [
            g[0].eval(xhat) - l * s * xhat[0],
            g[1].eval(xhat) - l * s * xhat[1],
            g[2].eval(xhat) - l * s * xhat[2],
        ]
    }
}

/// Orthonormalization constant: integral over S2 of
/// [P_l^m(cos th) * {cos,sin}(m phi)]^2 equals (2 - delta_m0) pi * 2/(2l+1)
/// * (l+m)!/(l-m)! in the convention P_m^m = (2m-1)!! sin^m(th).
fn norm_factor(l: usize, m: usize) -> f64 {
    let mut ratio = 1.0; // (l-m)! / (l+m)!
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    let area = if m == 0 { 4.0 * std::f64::consts::PI } else { 2.0 * std::f64::consts::PI };
    ((2.0 * l as f64 + 1.0) / area * ratio).sqrt()
}
