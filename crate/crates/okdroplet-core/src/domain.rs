//! Ambient domains (flat unit torus, centered ball) and the spherical
//! quadrature grids every other module integrates against.

use serde::{Deserialize, Serialize};

use crate::numerics::gauss::gauss_legendre;
use crate::{Error, Result};

/// Volume of the n-dimensional unit ball.
pub fn unit_ball_volume(dim: usize) -> f64 {
    match dim {
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        _ => panic!("dimension {dim} not supported"),
    }
}

/// Surface measure of the unit sphere S^{n-1}, i.e. n * omega_n.
pub fn unit_sphere_area(dim: usize) -> f64 {
    dim as f64 * unit_ball_volume(dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainKind {
    /// Flat torus R^n / Z^n, period 1 in every coordinate.
    Torus,
    /// Open ball of given radius centered at the origin.
    Ball,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub kind: DomainKind,
    pub dim: usize,
    /// Ball radius; for the torus this stores the inradius 1/2.
    pub radius: f64,
    pub volume: f64,
}

impl Domain {
    pub fn torus(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Domain { kind: DomainKind::Torus, dim, radius: 0.5, volume: 1.0 })
    }

    pub fn ball(dim: usize, radius: f64) -> Result<Self> {
        check_dim(dim)?;
        if radius <= 0.0 || !radius.is_finite() {
            return Err(Error::Config(format!("ball radius must be positive, got {radius}")));
        }
        Ok(Domain {
            kind: DomainKind::Ball,
            dim,
            radius,
            volume: unit_ball_volume(dim) * radius.powi(dim as i32),
        })
    }

    /// Map a point into the fundamental cell [-1/2, 1/2)^n (torus only).
    pub fn wrap(&self, x: [f64; 3]) -> [f64; 3] {
        match self.kind {
            DomainKind::Torus => {
                let mut y = x;
                for v in y.iter_mut().take(self.dim) {
                    *v -= v.round();
                    if *v >= 0.5 {
                        *v -= 1.0;
                    }
                }
                y
            }
            DomainKind::Ball => x,
        }
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")))
    }
}

/// Does the closed ball B_r(x) sit strictly inside the domain?
/// For the torus the condition is r < 1/2 (no self-overlap of the droplet
/// across the periodic identification).
pub fn inner_region_test(domain: &Domain, x: [f64; 3], r: f64) -> bool {
    if r <= 0.0 {
        return false;
    }
    match domain.kind {
        DomainKind::Torus => r < 0.5,
        DomainKind::Ball => {
            let d2: f64 = x.iter().take(domain.dim).map(|v| v * v).sum();
            d2.sqrt() + r < domain.radius
        }
    }
}

/// Quadrature nodes on the unit sphere S^{n-1}. Weights sum to the full
/// surface measure n * omega_n and the rule integrates spherical harmonics
/// of degree <= 2 * order exactly.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    /// Unit vectors; the z component is 0 in dimension 2.
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub order: usize,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrate a function of the unit direction over S^{n-1}.
    pub fn integrate<F: FnMut([f64; 3]) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Product rule: Gauss-Legendre in the polar cosine times a uniform
/// azimuthal grid (dimension 3), or a uniform angular grid (dimension 2).
pub fn sphere_quadrature(dim: usize, order: usize) -> QuadratureGrid {
    assert!(dim == 2 || dim == 3, "dimension {dim} not supported");
    assert!(order >= 1);
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    match dim {
        2 => {
            let n = 2 * order + 2;
            let w = 2.0 * std::f64::consts::PI / n as f64;
            for j in 0..n {
                let t = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                nodes.push([t.cos(), t.sin(), 0.0]);
                weights.push(w);
            }
        }
        3 => {
            let (us, ws) = gauss_legendre(order + 1);
            let nphi = 2 * order + 2;
            let wphi = 2.0 * std::f64::consts::PI / nphi as f64;
            for (&u, &wu) in us.iter().zip(&ws) {
                let s = (1.0 - u * u).max(0.0).sqrt();
                for j in 0..nphi {
                    let phi = 2.0 * std::f64::consts::PI * j as f64 / nphi as f64;
                    nodes.push([s * phi.cos(), s * phi.sin(), u]);
                    weights.push(wu * wphi);
                }
            }
        }
        _ => unreachable!(),
    }
    QuadratureGrid { nodes, weights, order }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::harmonics::SphereHarmonics;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_sum_to_sphere_area() {
        for dim in [2usize, 3] {
            for order in [1usize, 4, 9, 24] {
                let q = sphere_quadrature(dim, order);
                let s: f64 = q.weights.iter().sum();
                assert_abs_diff_eq!(s, unit_sphere_area(dim), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn integrates_spherical_harmonics_to_double_order() {
        let order = 6;
        let q = sphere_quadrature(3, order);
        let sh = SphereHarmonics::new(2 * order);
        // mean of Y_lm vanishes for l >= 1; Y_00 integrates to sqrt(4 pi)
        for i in 0..sh.count() {
            let integral = q.integrate(|x| sh.value_unit(i, x));
            let want = if i == 0 { (4.0 * std::f64::consts::PI).sqrt() } else { 0.0 };
            assert_abs_diff_eq!(integral, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn integrates_circular_modes_to_double_order() {
        let order = 8;
        let q = sphere_quadrature(2, order);
        for k in 1..=(2 * order) {
            let c = q.integrate(|x| {
                let t = x[1].atan2(x[0]);
                (k as f64 * t).cos()
            });
            assert_abs_diff_eq!(c, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn containment_tests() {
        let torus = Domain::torus(2).unwrap();
        assert!(inner_region_test(&torus, [0.4, 0.4, 0.0], 0.2));
        assert!(!inner_region_test(&torus, [0.0, 0.0, 0.0], 0.5));
        let ball = Domain::ball(3, 1.0).unwrap();
        assert!(inner_region_test(&ball, [0.3, 0.0, 0.0], 0.5));
        assert!(!inner_region_test(&ball, [0.6, 0.0, 0.0], 0.5));
    }

    #[test]
    fn torus_wrap_is_idempotent_and_centered() {
        let torus = Domain::torus(3).unwrap();
        let y = torus.wrap([1.3, -0.75, 0.5]);
        assert_abs_diff_eq!(y[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(y[2], -0.5, epsilon = 1e-12);
        let z = torus.wrap(y);
        assert_eq!(y, z);
    }

    #[test]
    fn domain_volumes() {
        assert_abs_diff_eq!(Domain::torus(2).unwrap().volume, 1.0);
        assert_abs_diff_eq!(
            Domain::ball(2, 2.0).unwrap().volume,
            4.0 * std::f64::consts::PI,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            Domain::ball(3, 1.0).unwrap().volume,
            4.0 * std::f64::consts::PI / 3.0,
            epsilon = 1e-12
        );
    }
}
