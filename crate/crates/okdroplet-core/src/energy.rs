//! Assembly of the droplet energy: perimeter plus gamma times the nonlocal
//! Green-function term, the volume-penalized variant, the closed-form ball
//! expansion, and a Lipschitz gap diagnostic for the nonlocal term.
//!
//! The nonlocal term is evaluated by routes that are independent of the PDE
//! solver in `field`:
//!
//! - torus: Parseval sum over the dual lattice. The indicator transform of a
//!   radial graph reduces to exact one-dimensional oscillatory integrals
//!   along quadrature rays, so the route has no grid and is translation
//!   invariant to machine precision.
//! - ball: splits G = Gamma + R. The free-space self-interaction of Gamma
//!   separates into angular modes with cumulative one-dimensional kernels;
//!   the regular part is the image series contracted against solid-harmonic
//!   moments of the droplet.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    inner_region_test, sphere_quadrature, unit_ball_volume, Domain, DomainKind, QuadratureGrid,
};
use crate::greens::{gamma_double_ball, radial_convolution, GreenEvaluator};
use crate::numerics::gauss::gauss_legendre_ab;
use crate::shape::{default_grid, sh_basis, symmetric_difference_graphs, DropletShape};
use crate::{Error, Result};

/// Dual-lattice cutoff for the torus route when the caller passes 0.
pub const DEFAULT_TORUS_CUTOFF_2D: usize = 64;
pub const DEFAULT_TORUS_CUTOFF_3D: usize = 32;
/// Regular-part series degree for the ball route when the caller passes 0.
pub const DEFAULT_SERIES_DEGREE: usize = 32;
/// Regime threshold; flags in the breakdown report against it, nothing
/// enforces it.
pub const DEFAULT_SMALL_DELTA: f64 = 1.0;

/// Coupling, droplet size, and penalty bookkeeping. `mass` and `r_m` are the
/// same datum in two currencies, tied by omega_n r_m^n = mass * |Omega|;
/// constructors fill both and `validate` keeps them honest.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelParams {
    /// Nonlocal coupling, >= 0.
    pub gamma: f64,
    /// Volume fraction of the droplet, in (0, 1).
    pub mass: f64,
    /// Radius of the ball with volume mass * |Omega|; the canonical size.
    pub r_m: f64,
    /// Volume penalty strength; 0 delegates to `default_penalty`.
    pub penalty: f64,
    /// Smallness threshold used only for regime reporting.
    pub small_delta: f64,
}

impl ModelParams {
    pub fn from_mass(domain: &Domain, gamma: f64, mass: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be nonnegative, got {gamma}")));
        }
        if !mass.is_finite() || mass <= 0.0 || mass >= 1.0 {
            return Err(Error::Config(format!("mass must lie in (0, 1), got {mass}")));
        }
        let r_m =
            (mass * domain.volume / unit_ball_volume(domain.dim)).powf(1.0 / domain.dim as f64);
        Ok(ModelParams { gamma, mass, r_m, penalty: 0.0, small_delta: DEFAULT_SMALL_DELTA })
    }

    pub fn from_droplet_radius(domain: &Domain, gamma: f64, r_m: f64) -> Result<Self> {
        if !r_m.is_finite() || r_m <= 0.0 {
            return Err(Error::Config(format!("droplet radius must be positive, got {r_m}")));
        }
        let mass = unit_ball_volume(domain.dim) * r_m.powi(domain.dim as i32) / domain.volume;
        let mut p = ModelParams::from_mass(domain, gamma, mass)?;
        // keep the caller's radius bit-exact; mass was derived from it
        p.r_m = r_m;
        Ok(p)
    }

    /// Target droplet volume mass * |Omega|.
    pub fn volume_target(&self, domain: &Domain) -> f64 {
        self.mass * domain.volume
    }

    /// gamma r^3 |log r| in dimension 2, gamma r^3 otherwise, with r = r_m.
    pub fn regime_parameter(&self, dim: usize) -> f64 {
        let r3 = self.gamma * self.r_m.powi(3);
        if dim == 2 {
            r3 * self.r_m.ln().abs()
        } else {
            r3
        }
    }

    pub fn validate(&self, domain: &Domain) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if !(self.mass > 0.0 && self.mass < 1.0) {
            return Err(Error::Config(format!("mass must lie in (0, 1), got {}", self.mass)));
        }
        if self.penalty < 0.0 || !self.penalty.is_finite() {
            return Err(Error::Config(format!("penalty must be >= 0, got {}", self.penalty)));
        }
        let lhs = unit_ball_volume(domain.dim) * self.r_m.powi(domain.dim as i32);
        let rhs = self.mass * domain.volume;
        if (lhs - rhs).abs() > 1e-12 * domain.volume {
            return Err(Error::Config(format!(
                "mass {} and droplet radius {} are inconsistent: omega_n r^n = {lhs:.15e} vs m|Omega| = {rhs:.15e}",
                self.mass, self.r_m
            )));
        }
        Ok(())
    }
}

/// One energy evaluation, itemized. `total` always equals
/// perimeter + gamma * nonlocal + penalty_term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub perimeter: f64,
    pub nonlocal: f64,
    pub total: f64,
    pub penalty_term: f64,
    /// Integrated droplet volume; consistency with the target is reported,
    /// never enforced here.
    pub volume: f64,
    pub regime_parameter: f64,
    pub regime_small: bool,
}

fn assemble(
    params: &ModelParams,
    dim: usize,
    perimeter: f64,
    nonlocal: f64,
    penalty_term: f64,
    volume: f64,
) -> EnergyBreakdown {
    let regime_parameter = params.regime_parameter(dim);
    EnergyBreakdown {
        perimeter,
        nonlocal,
        total: perimeter + params.gamma * nonlocal + penalty_term,
        penalty_term,
        volume,
        regime_parameter,
        regime_small: regime_parameter < params.small_delta,
    }
}

pub(crate) fn check_compat(domain: &Domain, shape: &DropletShape) -> Result<()> {
    if domain.dim != shape.dim {
        return Err(Error::Config(format!(
            "domain dimension {} does not match shape dimension {}",
            domain.dim, shape.dim
        )));
    }
    Ok(())
}

/// Containment of the droplet in the domain, checked on the shape's default
/// grid: radius below 1/2 on the torus, boundary points inside the ball.
pub(crate) fn check_containment(
    domain: &Domain,
    shape: &DropletShape,
    grid: &QuadratureGrid,
) -> Result<()> {
    match domain.kind {
        DomainKind::Torus => {
            let rho_max =
                grid.nodes.iter().map(|&x| shape.radius_at(x)).fold(0.0f64, f64::max);
            if rho_max >= 0.5 {
                return Err(Error::Geometry(format!(
                    "droplet radius reaches {rho_max:.6}, not contained in the unit cell"
                )));
            }
        }
        DomainKind::Ball => {
            let reach = grid
                .nodes
                .iter()
                .map(|&u| {
                    let rho = shape.radius_at(u);
                    let x = [
                        shape.center[0] + rho * u[0],
                        shape.center[1] + rho * u[1],
                        shape.center[2] + rho * u[2],
                    ];
                    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
                })
                .fold(0.0f64, f64::max);
            if reach >= domain.radius * (1.0 - 1e-12) {
                return Err(Error::Geometry(format!(
                    "droplet reaches |x| = {reach:.6}, not contained in the ball of radius {}",
                    domain.radius
                )));
            }
        }
    }
    Ok(())
}

/// F = Per(E) + gamma NL(E), itemized. `resolution` = 0 picks the default
/// for the route (lattice cutoff on the torus, series degree on the ball);
/// fixed resolution gives bit-identical results.
pub fn total_energy(
    domain: &Domain,
    params: &ModelParams,
    shape: &DropletShape,
    resolution: usize,
) -> Result<EnergyBreakdown> {
    params.validate(domain)?;
    check_compat(domain, shape)?;
    let grid = default_grid(shape.dim, shape.degree.max(1));
    shape.validate(&grid)?;
    check_containment(domain, shape, &grid)?;
    let perimeter = shape.perimeter(&grid)?;
    let volume = shape.volume(&grid)?;
    let nonlocal = nl_value(domain, shape, resolution)?;
    Ok(assemble(params, domain.dim, perimeter, nonlocal, 0.0, volume))
}

/// NL(E) by the route native to the domain.
pub fn nl_value(domain: &Domain, shape: &DropletShape, resolution: usize) -> Result<f64> {
    check_compat(domain, shape)?;
    match domain.kind {
        DomainKind::Torus => nl_torus_fourier(shape, resolution),
        DomainKind::Ball => nl_ball_series(domain, shape, resolution),
    }
}

/// Estimated bound on the Euler-Lagrange multiplier: curvature of the ball
/// of volume m|Omega| plus twice gamma times a crude sup bound on the
/// potential (rearranged Gamma part at the center, unit cap on the averaged
/// regular part). Only a scale; the penalty default builds on it.
pub fn multiplier_scale(domain: &Domain, params: &ModelParams) -> f64 {
    let n = domain.dim as f64;
    let curvature = (n - 1.0) / params.r_m;
    let field_bound =
        gamma_sup_bound(params.r_m, domain.dim) + params.mass * domain.volume;
    curvature + 2.0 * params.gamma * field_bound
}

/// Default penalty strength: ten times the multiplier scale, so the volume
/// constraint wins against any admissible first variation.
pub fn default_penalty(domain: &Domain, params: &ModelParams) -> f64 {
    10.0 * multiplier_scale(domain, params)
}

/// F + penalty * | |E| - m|Omega| |, itemized. Uses params.penalty when
/// positive, `default_penalty` otherwise.
pub fn penalized_breakdown(
    domain: &Domain,
    params: &ModelParams,
    shape: &DropletShape,
    resolution: usize,
) -> Result<EnergyBreakdown> {
    let bd = total_energy(domain, params, shape, resolution)?;
    let lambda =
        if params.penalty > 0.0 { params.penalty } else { default_penalty(domain, params) };
    let pen = lambda * (bd.volume - params.volume_target(domain)).abs();
    Ok(assemble(params, domain.dim, bd.perimeter, bd.nonlocal, pen, bd.volume))
}

pub fn penalized_energy(
    domain: &Domain,
    params: &ModelParams,
    shape: &DropletShape,
    resolution: usize,
) -> Result<f64> {
    Ok(penalized_breakdown(domain, params, shape, resolution)?.total)
}

/// Energy of the ball B_{r_m}(p) through the closed Gamma part and the
/// quadrature average of the regular part:
///
///   n omega_n r^{n-1} + gamma ( (omega_n r^n)^2 g_r(p) - II_Gamma(r) )
///
/// where II_Gamma is the double ball integral of Gamma and g_r the double
/// average of R over the ball. The identity is exact for balls, so this is
/// an independent reference for the quadrature routes.
pub fn ball_energy_expansion(domain: &Domain, params: &ModelParams, p: [f64; 3]) -> Result<f64> {
    params.validate(domain)?;
    let r = params.r_m;
    if !inner_region_test(domain, p, r) {
        return Err(Error::Geometry(format!(
            "ball of radius {r} at {p:?} not contained in the domain"
        )));
    }
    let dim = domain.dim;
    let ev = GreenEvaluator::new(*domain)?;
    // R is smooth well inside the domain; coarse product quadrature is
    // already at the 1e-8 level, and the 3D torus evaluator is costly
    let (order, radial) = match (domain.kind, dim) {
        (DomainKind::Torus, 2) => (10, 8),
        (DomainKind::Torus, _) => (4, 5),
        (DomainKind::Ball, 2) => (10, 8),
        (DomainKind::Ball, _) => (6, 6),
    };
    let grid = sphere_quadrature(dim, order);
    let g_r = ev.g_r(p, r, &grid, radial)?;
    let vol = unit_ball_volume(dim) * r.powi(dim as i32);
    let per = dim as f64 * unit_ball_volume(dim) * r.powi(dim as i32 - 1);
    Ok(per + params.gamma * (vol * vol * g_r - gamma_double_ball(r, dim)))
}

/// Sup of |Gamma * chi_B| over the ball itself for B = B_r: attained at the
/// center, value |radial convolution at 0|. Rearrangement makes this an
/// upper bound for any set of the same volume.
pub fn gamma_sup_bound(r: f64, dim: usize) -> f64 {
    radial_convolution(0.0, r, dim).abs()
}

/// Lipschitz gap for NL between equal-volume shapes over a common center:
/// lhs = NL(B) - NL(A), rhs = (sup |Gamma * chi_B| + |B|) |A sym-diff B|,
/// the sup taken from the rearrangement bound. lhs <= C rhs with a modest C
/// is the continuity property the optimizer leans on.
pub fn nl_lipschitz_gap(
    domain: &Domain,
    params: &ModelParams,
    shape_a: &DropletShape,
    shape_b: &DropletShape,
    resolution: usize,
) -> Result<(f64, f64)> {
    params.validate(domain)?;
    check_compat(domain, shape_a)?;
    check_compat(domain, shape_b)?;
    let grid = default_grid(domain.dim, shape_a.degree.max(shape_b.degree).max(1));
    let va = shape_a.volume(&grid)?;
    let vb = shape_b.volume(&grid)?;
    if (va - vb).abs() > 1e-6 * va.max(vb) {
        return Err(Error::Geometry(format!(
            "volume mismatch: |A| = {va:.9e}, |B| = {vb:.9e}"
        )));
    }
    let nl_a = nl_value(domain, shape_a, resolution)?;
    let nl_b = nl_value(domain, shape_b, resolution)?;
    let r_b = (vb / unit_ball_volume(domain.dim)).powf(1.0 / domain.dim as f64);
    let sd = symmetric_difference_graphs(shape_a, shape_b, &grid)?;
    Ok((nl_b - nl_a, (gamma_sup_bound(r_b, domain.dim) + vb) * sd))
}

// ---------------------------------------------------------------------------
// torus route: Parseval over the dual lattice
// ---------------------------------------------------------------------------

/// NL(E) on the unit torus as sum over 0 < |k|_inf <= cutoff of
/// |chi_hat(k)|^2 / (4 pi^2 |k|^2). chi_hat is evaluated per mode by exact
/// radial integrals over quadrature rays, so the value does not depend on
/// the droplet center at all. cutoff = 0 picks the dimension default.
pub fn nl_torus_fourier(shape: &DropletShape, cutoff: usize) -> Result<f64> {
    let grid = default_grid(shape.dim, shape.degree.max(1));
    shape.validate(&grid)?;
    let rho_max = grid.nodes.iter().map(|&x| shape.radius_at(x)).fold(0.0f64, f64::max);
    if rho_max >= 0.5 {
        return Err(Error::Geometry(format!(
            "droplet radius reaches {rho_max:.6}, not contained in the unit cell"
        )));
    }
    match shape.dim {
        2 => {
            let cutoff = if cutoff == 0 { DEFAULT_TORUS_CUTOFF_2D } else { cutoff };
            Ok(nl_fourier_2d(shape, cutoff as i64, rho_max))
        }
        _ => {
            let cutoff = if cutoff == 0 { DEFAULT_TORUS_CUTOFF_3D } else { cutoff };
            Ok(nl_fourier_3d(shape, cutoff as i64, rho_max))
        }
    }
}

/// integral of s e^{-i a s} ds from 0 to rho, stable in both regimes.
pub(crate) fn radial_transform_2d(a: f64, rho: f64) -> Complex<f64> {
    let z = a * rho;
    if z.abs() < 0.8 {
        // power series; closed form cancels catastrophically here
        let mut term = Complex::new(rho * rho / 2.0, 0.0);
        let mut acc = term;
        let step = Complex::new(0.0, -z);
        for j in 1..48u32 {
            let jf = j as f64;
            term = term * step * ((jf + 1.0) / (jf * (jf + 2.0)));
            acc += term;
            if term.norm_sqr() < 1e-34 * acc.norm_sqr() {
                break;
            }
        }
        acc
    } else {
        let e = Complex::new(z.cos(), -z.sin());
        let inv2 = 1.0 / (a * a);
        e * Complex::new(inv2, rho / a) - Complex::new(inv2, 0.0)
    }
}

/// integral of s^2 e^{-i a s} ds from 0 to rho.
pub(crate) fn radial_transform_3d(a: f64, rho: f64) -> Complex<f64> {
    let z = a * rho;
    if z.abs() < 0.8 {
        let mut term = Complex::new(rho * rho * rho / 3.0, 0.0);
        let mut acc = term;
        let step = Complex::new(0.0, -z);
        for j in 1..48u32 {
            let jf = j as f64;
            term = term * step * ((jf + 2.0) / (jf * (jf + 3.0)));
            acc += term;
            if term.norm_sqr() < 1e-34 * acc.norm_sqr() {
                break;
            }
        }
        acc
    } else {
        let e = Complex::new(z.cos(), -z.sin());
        let inv2 = 1.0 / (a * a);
        let inv3 = inv2 / a;
        e * Complex::new(2.0 * rho * inv2, rho * rho / a - 2.0 * inv3)
            + Complex::new(0.0, 2.0 * inv3)
    }
}

/// Half of the dual lattice (first nonzero component positive); the other
/// half contributes identically because the indicator is real.
pub(crate) fn half_lattice(dim: usize, kmax: i64) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    let zr = if dim == 3 { -kmax..=kmax } else { 0..=0 };
    for kx in -kmax..=kmax {
        for ky in -kmax..=kmax {
            for kz in zr.clone() {
                let canonical =
                    kx > 0 || (kx == 0 && (ky > 0 || (ky == 0 && kz > 0)));
                if canonical {
                    out.push([kx, ky, kz]);
                }
            }
        }
    }
    out
}

fn nl_fourier_2d(shape: &DropletShape, kmax: i64, rho_max: f64) -> f64 {
    let deg = shape.degree as f64;
    // angular resolution per mode: plane-wave band a rho plus shape band
    let n_angles = |knorm: f64| -> usize {
        let band = 1.35 * 2.0 * PI * knorm * rho_max + 8.0 * deg + 48.0;
        (band.ceil() as usize).next_multiple_of(2)
    };
    let mut cache: BTreeMap<usize, (Vec<[f64; 2]>, Vec<f64>)> = BTreeMap::new();
    let mut total = 0.0;
    for k in half_lattice(2, kmax) {
        let k2 = (k[0] * k[0] + k[1] * k[1]) as f64;
        let n = n_angles(k2.sqrt());
        let (dirs, rho) = cache.entry(n).or_insert_with(|| {
            let mut dirs = Vec::with_capacity(n);
            let mut rho = Vec::with_capacity(n);
            for j in 0..n {
                let th = 2.0 * PI * (j as f64 + 0.5) / n as f64;
                let u = [th.cos(), th.sin()];
                dirs.push(u);
                rho.push(shape.radius_at([u[0], u[1], 0.0]));
            }
            (dirs, rho)
        });
        let mut acc = Complex::new(0.0, 0.0);
        for (u, &r) in dirs.iter().zip(rho.iter()) {
            let a = 2.0 * PI * (k[0] as f64 * u[0] + k[1] as f64 * u[1]);
            acc += radial_transform_2d(a, r);
        }
        let chi2 = (acc * (2.0 * PI / dirs.len() as f64)).norm_sqr();
        total += 2.0 * chi2 / (4.0 * PI * PI * k2);
    }
    total
}

struct AngTable {
    dirs: Vec<[f64; 3]>,
    weights: Vec<f64>,
    rho: Vec<f64>,
}

fn nl_fourier_3d(shape: &DropletShape, kmax: i64, rho_max: f64) -> f64 {
    let deg = shape.degree;
    let order_for = |knorm: f64| -> usize {
        let o = (0.55 * 2.0 * PI * knorm * rho_max).ceil() as usize + 2 * deg + 10;
        o.next_multiple_of(4)
    };
    let ks = half_lattice(3, kmax);
    let orders: Vec<usize> =
        ks.iter().map(|k| order_for(((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64).sqrt())).collect();
    let mut tables: BTreeMap<usize, AngTable> = BTreeMap::new();
    for &o in &orders {
        tables.entry(o).or_insert_with(|| {
            let g = sphere_quadrature(3, o);
            let rho = g.nodes.iter().map(|&x| shape.radius_at(x)).collect();
            AngTable { dirs: g.nodes, weights: g.weights, rho }
        });
    }
    let contribs: Vec<f64> = ks
        .par_iter()
        .zip(orders.par_iter())
        .map(|(k, o)| {
            let t = &tables[o];
            let k2 = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64;
            let kf = [k[0] as f64, k[1] as f64, k[2] as f64];
            let mut acc = Complex::new(0.0, 0.0);
            for ((u, &w), &r) in t.dirs.iter().zip(&t.weights).zip(&t.rho) {
                let a = 2.0 * PI * (kf[0] * u[0] + kf[1] * u[1] + kf[2] * u[2]);
                acc += radial_transform_3d(a, r) * w;
            }
            2.0 * acc.norm_sqr() / (4.0 * PI * PI * k2)
        })
        .collect();
    // sequential reduction keeps the result bit-stable under rayon
    contribs.iter().sum()
}

// ---------------------------------------------------------------------------
// ball route: free-space Gamma self-interaction + regular-part moments
// ---------------------------------------------------------------------------

/// Double integral of Gamma(|x - y|) over E x E in free space. Angular modes
/// about the droplet center separate the kernel into u(s_<) v(s_>) factors,
/// so each mode costs one cumulative pass over the radial profile. nr = 0
/// and lmax = 0 pick defaults sized to the shape degree.
pub fn gamma_self_interaction(shape: &DropletShape, nr: usize, lmax: usize) -> Result<f64> {
    let dim = shape.dim;
    let nr = if nr == 0 {
        if dim == 2 {
            4096
        } else {
            2048
        }
    } else {
        nr.max(16)
    };
    let lmax = if lmax == 0 { (2 * shape.degree + 16).min(48) } else { lmax.min(64) };
    let order = lmax + shape.degree + 8;
    let grid = sphere_quadrature(dim, order);
    shape.validate(&grid)?;

    let rho: Vec<f64> = grid.nodes.iter().map(|&x| shape.radius_at(x)).collect();
    let rho_max = rho.iter().fold(0.0f64, |a, &b| a.max(b));

    let modes = if dim == 2 { 2 * lmax + 1 } else { (lmax + 1) * (lmax + 1) };
    // basis values per node, orthonormal on the sphere
    let mut table = vec![0.0; grid.len() * modes];
    match dim {
        2 => {
            let c0 = 1.0 / (2.0 * PI).sqrt();
            let ck = 1.0 / PI.sqrt();
            for (j, u) in grid.nodes.iter().enumerate() {
                let th = u[1].atan2(u[0]);
                let row = &mut table[j * modes..(j + 1) * modes];
                row[0] = c0;
                for k in 1..=lmax {
                    let kt = k as f64 * th;
                    row[2 * k - 1] = ck * kt.cos();
                    row[2 * k] = ck * kt.sin();
                }
            }
        }
        _ => {
            let sh = sh_basis(lmax);
            for (j, u) in grid.nodes.iter().enumerate() {
                sh.values_unit_all(*u, &mut table[j * modes..(j + 1) * modes]);
            }
        }
    }

    // prefix occupancy profiles psi_m on the scaled radial grid, filled by
    // bucketing each ray at its boundary cell and suffix-summing full cells
    let mut full = vec![0.0; nr * modes];
    let mut psi = vec![0.0; nr * modes]; // holds partial buckets, then psi
    for (j, (&w, &r)) in grid.weights.iter().zip(&rho).enumerate() {
        let f = r / rho_max * nr as f64;
        let mut cell = f.floor() as usize;
        let mut part = f - cell as f64;
        if cell >= nr {
            cell = nr - 1;
            part = 1.0;
        }
        let row = &table[j * modes..(j + 1) * modes];
        let frow = &mut full[cell * modes..(cell + 1) * modes];
        let prow = &mut psi[cell * modes..(cell + 1) * modes];
        for m in 0..modes {
            frow[m] += w * row[m];
            prow[m] += w * row[m] * part;
        }
    }
    let mut acc = vec![0.0; modes];
    for i in (0..nr).rev() {
        let prow = &mut psi[i * modes..(i + 1) * modes];
        let frow = &full[i * modes..(i + 1) * modes];
        for m in 0..modes {
            prow[m] += acc[m];
            acc[m] += frow[m];
        }
    }
    drop(full);

    let h = 1.0 / nr as f64;
    let sigma: Vec<f64> = (0..nr).map(|i| (i as f64 + 0.5) * h).collect();

    // per angular degree: separable kernel factors in the scaled variable
    let mut u_fac = vec![0.0; nr];
    let mut v_fac = vec![0.0; nr];
    let mode_pass = |m: usize, u_fac: &[f64], v_fac: &[f64], psi: &[f64]| -> f64 {
        let mut cum = 0.0;
        let mut t = 0.0;
        for i in 0..nr {
            let p = psi[i * modes + m];
            if p != 0.0 {
                let ph = p * h;
                t += ph * (2.0 * v_fac[i] * cum + u_fac[i] * v_fac[i] * ph);
            }
            cum += u_fac[i] * psi[i * modes + m] * h;
        }
        t
    };

    let mut total = 0.0;
    let mut level_mags = vec![0.0; lmax + 1];
    match dim {
        2 => {
            let scale = rho_max.powi(4);
            // degree 0: kernel log(rho_max sigma_>) sigma tau, the log rho_max
            // piece separates completely
            for i in 0..nr {
                u_fac[i] = sigma[i];
                v_fac[i] = sigma[i] * sigma[i].ln();
            }
            let t0 = mode_pass(0, &u_fac, &v_fac, &psi);
            let s0: f64 = (0..nr).map(|i| sigma[i] * psi[i * modes] * h).sum();
            let lvl = scale * (t0 + rho_max.ln() * s0 * s0);
            total += lvl;
            level_mags[0] = lvl.abs();
            for k in 1..=lmax {
                for i in 0..nr {
                    u_fac[i] = sigma[i].powi(k as i32 + 1);
                    v_fac[i] = sigma[i].powi(1 - k as i32);
                }
                let tk = mode_pass(2 * k - 1, &u_fac, &v_fac, &psi)
                    + mode_pass(2 * k, &u_fac, &v_fac, &psi);
                let lvl = -scale / (2.0 * k as f64) * tk;
                total += lvl;
                level_mags[k] = lvl.abs();
            }
        }
        _ => {
            let scale = rho_max.powi(5);
            for l in 0..=lmax {
                for i in 0..nr {
                    u_fac[i] = sigma[i].powi(l as i32 + 2);
                    v_fac[i] = sigma[i].powi(1 - l as i32);
                }
                let mut tl = 0.0;
                for m in l * l..(l + 1) * (l + 1) {
                    tl += mode_pass(m, &u_fac, &v_fac, &psi);
                }
                let lvl = -scale / (2.0 * l as f64 + 1.0) * tl;
                total += lvl;
                level_mags[l] = lvl.abs();
            }
        }
    }

    // both of the last two degrees must have converged; a single zero can be
    // a symmetry artifact
    let tail = level_mags[lmax].max(level_mags[lmax - 1]);
    if tail > 2e-7 * total.abs().max(1e-30) {
        return Err(Error::Numerics(format!(
            "angular mode sum not converged: last degrees contribute {tail:.3e} of {:.3e}; raise lmax",
            total
        )));
    }
    Ok(total)
}

/// NL(E) on the ball domain: subtract the free-space Gamma self-interaction
/// from the regular-part series contracted against droplet moments.
pub fn nl_ball_series(domain: &Domain, shape: &DropletShape, degree: usize) -> Result<f64> {
    if domain.kind != DomainKind::Ball {
        return Err(Error::Config("series route is specific to the ball domain".into()));
    }
    check_compat(domain, shape)?;
    let degree = if degree == 0 { DEFAULT_SERIES_DEGREE } else { degree };
    if degree < 4 || degree > 64 {
        return Err(Error::Config(format!("series degree {degree} outside [4, 64]")));
    }
    let grid = default_grid(shape.dim, shape.degree.max(1));
    check_containment(domain, shape, &grid)?;
    let gamma_part = gamma_self_interaction(shape, 0, 0)?;
    let regular = regular_moment_sum(domain, shape, degree)?;
    Ok(regular - gamma_part)
}

/// Double integral of the regular part R over E x E through the image
/// series: quadratic piece by volume and second moment, layer terms by
/// solid-harmonic moments scaled to the domain radius.
fn regular_moment_sum(domain: &Domain, shape: &DropletShape, lmax: usize) -> Result<f64> {
    let dim = domain.dim;
    let rdom = domain.radius;
    let deg = shape.degree.max(1);
    let n_rad = lmax / 2 + 4;
    let (gs, gw) = gauss_legendre_ab(n_rad, 0.0, 1.0);
    // band of the ray-integrated moment in the direction variable
    let band = deg * (lmax + dim) + lmax;
    let order = (band / 2 + 4).min(120);

    match dim {
        2 => {
            let n_ang = (band + 9).max(64);
            // moments of z^k scaled by rdom^k, plus volume and |x|^2
            let mut mom_re = vec![0.0; lmax + 1];
            let mut mom_im = vec![0.0; lmax + 1];
            let mut vol = 0.0;
            let mut n2 = 0.0;
            let mut tau_max = 0.0f64;
            let w_ang = 2.0 * PI / n_ang as f64;
            for j in 0..n_ang {
                let th = 2.0 * PI * (j as f64 + 0.5) / n_ang as f64;
                let u = [th.cos(), th.sin(), 0.0];
                let rho = shape.radius_at(u);
                for (&t, &wt) in gs.iter().zip(&gw) {
                    let s = rho * t;
                    let x = [shape.center[0] + s * u[0], shape.center[1] + s * u[1]];
                    let w = w_ang * wt * rho * s; // area element on the ray
                    let r2 = x[0] * x[0] + x[1] * x[1];
                    tau_max = tau_max.max(r2.sqrt() / rdom);
                    vol += w;
                    n2 += w * r2;
                    let (zr, zi) = (x[0] / rdom, x[1] / rdom);
                    let (mut pr, mut pi) = (1.0, 0.0);
                    for k in 1..=lmax {
                        let nr = pr * zr - pi * zi;
                        pi = pr * zi + pi * zr;
                        pr = nr;
                        mom_re[k] += w * pr;
                        mom_im[k] += w * pi;
                    }
                }
            }
            let c0 = rdom.ln() / (2.0 * PI) - 3.0 / (8.0 * PI);
            let mut sum = vol * n2 / (2.0 * domain.volume) + c0 * vol * vol;
            let mut last = 0.0f64;
            for k in 1..=lmax {
                let term = (mom_re[k] * mom_re[k] + mom_im[k] * mom_im[k]) / (2.0 * PI * k as f64);
                sum += term;
                if k >= lmax - 1 {
                    last = last.max(term.abs());
                }
            }
            check_series_tail(last, tau_max, sum, vol, c0)?;
            Ok(sum)
        }
        _ => {
            let sh = sh_basis(lmax);
            let modes = sh.count();
            let ang = sphere_quadrature(3, order);
            let idx: Vec<usize> = (0..ang.len()).collect();
            let chunks: Vec<(Vec<f64>, f64, f64, f64)> = idx
                .par_chunks(64)
                .map(|block| {
                    let mut mom = vec![0.0; modes];
                    let mut vol = 0.0;
                    let mut n2 = 0.0;
                    let mut tau = 0.0f64;
                    let mut vals = vec![0.0; modes];
                    for &j in block {
                        let u = ang.nodes[j];
                        let rho = shape.radius_at(u);
                        for (&t, &wt) in gs.iter().zip(&gw) {
                            let s = rho * t;
                            let x = [
                                shape.center[0] + s * u[0],
                                shape.center[1] + s * u[1],
                                shape.center[2] + s * u[2],
                            ];
                            let w = ang.weights[j] * wt * rho * s * s;
                            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
                            let r = r2.sqrt();
                            tau = tau.max(r / rdom);
                            vol += w;
                            n2 += w * r2;
                            let xhat = if r > 1e-300 {
                                [x[0] / r, x[1] / r, x[2] / r]
                            } else {
                                [0.0, 0.0, 1.0]
                            };
                            sh.values_unit_all(xhat, &mut vals);
                            // (r / rdom)^l per degree block
                            let ratio = r / rdom;
                            let mut pw = 1.0;
                            for l in 0..=lmax {
                                let wl = w * pw;
                                for m in l * l..(l + 1) * (l + 1) {
                                    mom[m] += wl * vals[m];
                                }
                                pw *= ratio;
                            }
                        }
                    }
                    (mom, vol, n2, tau)
                })
                .collect();
            let mut mom = vec![0.0; modes];
            let mut vol = 0.0;
            let mut n2 = 0.0;
            let mut tau_max = 0.0f64;
            for (m, v, q, t) in chunks {
                for (a, b) in mom.iter_mut().zip(&m) {
                    *a += b;
                }
                vol += v;
                n2 += q;
                tau_max = tau_max.max(t);
            }
            let c0 = -9.0 / (20.0 * PI * rdom);
            let mut sum = vol * n2 / (3.0 * domain.volume) + c0 * vol * vol;
            let mut last = 0.0f64;
            for l in 1..=lmax {
                let lf = l as f64;
                let mut block = 0.0;
                for m in l * l..(l + 1) * (l + 1) {
                    block += mom[m] * mom[m];
                }
                let term = (lf + 1.0) / (4.0 * PI * lf * rdom) * (4.0 * PI / (2.0 * lf + 1.0))
                    * block;
                sum += term;
                if l >= lmax - 1 {
                    last = last.max(term.abs());
                }
            }
            check_series_tail(last, tau_max, sum, vol, c0)?;
            Ok(sum)
        }
    }
}

fn check_series_tail(last: f64, tau_max: f64, sum: f64, vol: f64, c0: f64) -> Result<()> {
    let q = (tau_max * tau_max).min(0.998);
    let tail = last * q / (1.0 - q);
    let scale = sum.abs().max((c0 * vol * vol).abs()).max(1e-30);
    if tail > 1e-8 * scale {
        return Err(Error::Numerics(format!(
            "regular-part series tail about {tail:.3e} of {scale:.3e}; raise the series degree or keep the droplet away from the boundary"
        )));
    }
    Ok(())
}
