//! Poisson solvers for the droplet potentials and the Dirichlet-energy
//! route to NL(E) = int int G chi_E chi_E.
//!
//! Torus: spectral inversion of -Delta on a regular grid of cell-averaged
//! sources. Ball: spherical-harmonic modes x conservative second-order
//! radial finite differences with a natural zero-flux closure at both the
//! origin and the Neumann boundary. The two solvers share no code with the
//! Green evaluator, so energy identities double as cross-validation.

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::domain::{Domain, DomainKind};
use crate::numerics::gauss::gauss_legendre_ab;
use crate::shape::DropletShape;
use crate::{Error, Result};

use std::f64::consts::PI;

pub use crate::greens::{gamma, gamma_double_ball, radial_convolution};

/// Default grid resolution per axis on the torus.
pub fn default_torus_grid(dim: usize) -> usize {
    if dim == 2 {
        256
    } else {
        96
    }
}

/// Default radial cell count on the ball.
pub fn default_ball_cells(dim: usize) -> usize {
    if dim == 2 {
        2048
    } else {
        1024
    }
}

#[derive(Debug, Clone)]
pub enum FieldData {
    /// Cell-centered values plus the spectrum of the solution,
    /// row-major with x fastest.
    TorusGrid { n: usize, values: Vec<f64>, spectrum: Vec<Complex<f64>> },
    /// Shell-major coefficients: coeffs[i * modes + m] multiplies the m-th
    /// orthonormal angular basis function on the shell s_i = (i + 1/2) h.
    BallRadial { nr: usize, degree: usize, modes: usize, coeffs: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct ScalarField {
    pub domain: Domain,
    pub data: FieldData,
    /// Residual mean after normalization; kept as a diagnostic.
    pub mean: f64,
}

#[derive(Serialize)]
struct SnapshotHeader {
    schema_version: u32,
    kind: &'static str,
    dim: usize,
    shape: Vec<usize>,
    spacing: f64,
    mean: f64,
    len: usize,
}

impl ScalarField {
    /// Interpolated value: multilinear on the torus grid, linear-in-radius
    /// times the angular basis on the ball.
    pub fn eval(&self, x: [f64; 3]) -> f64 {
        let dim = self.domain.dim;
        match &self.data {
            FieldData::TorusGrid { n, values, .. } => {
                let n = *n;
                let h = 1.0 / n as f64;
                // cell centers at (i + 1/2) h
                let mut idx = [0usize; 3];
                let mut frac = [0.0f64; 3];
                for a in 0..dim {
                    let t = (x[a] / h - 0.5).rem_euclid(n as f64);
                    idx[a] = t.floor() as usize % n;
                    frac[a] = t - t.floor();
                }
                let corners = 1usize << dim;
                let mut total = 0.0;
                for c in 0..corners {
                    let mut w = 1.0;
                    let mut flat = 0usize;
                    let mut stride = 1usize;
                    for a in 0..dim {
                        let up = (c >> a) & 1 == 1;
                        w *= if up { frac[a] } else { 1.0 - frac[a] };
                        let ia = (idx[a] + usize::from(up)) % n;
                        flat += ia * stride;
                        stride *= n;
                    }
                    total += w * values[flat];
                }
                total
            }
            FieldData::BallRadial { nr, degree, modes, coeffs } => {
                let s: f64 = x.iter().take(dim).map(|v| v * v).sum::<f64>().sqrt();
                let h = self.domain.radius / *nr as f64;
                let t = (s / h - 0.5).clamp(0.0, (*nr - 1) as f64);
                let i0 = (t.floor() as usize).min(*nr - 2);
                let w = t - i0 as f64;
                let mut basis = vec![0.0; *modes];
                angular_basis(dim, *degree, x, s, &mut basis);
                let mut total = 0.0;
                for (m, b) in basis.iter().enumerate() {
                    let lo = coeffs[i0 * modes + m];
                    let hi = coeffs[(i0 + 1) * modes + m];
                    total += ((1.0 - w) * lo + w * hi) * b;
                }
                total
            }
        }
    }

    /// Exact evaluation of the discrete torus solution (full mode sum).
    pub fn eval_spectral(&self, x: [f64; 3]) -> Result<f64> {
        let FieldData::TorusGrid { n, spectrum, .. } = &self.data else {
            return Err(Error::Config("spectral evaluation needs a torus grid field".into()));
        };
        let n = *n;
        let dim = self.domain.dim;
        let freq = |i: usize| -> f64 {
            let i = i as i64;
            let n = n as i64;
            (if i <= n / 2 { i } else { i - n }) as f64
        };
        let mut total = Complex::new(0.0, 0.0);
        let planes = if dim == 3 { n } else { 1 };
        for kz in 0..planes {
            for ky in 0..n {
                for kx in 0..n {
                    let c = spectrum[(kz * n + ky) * n + kx];
                    if c.norm_sqr() < 1e-60 {
                        continue;
                    }
                    let phase = 2.0
                        * PI
                        * (freq(kx) * x[0] + freq(ky) * x[1] + freq(kz) * x[2]);
                    total += c * Complex::new(phase.cos(), phase.sin());
                }
            }
        }
        Ok(total.re)
    }

    /// Flat binary dump (f64 little-endian) plus a JSON header at
    /// `base.bin` / `base.json`.
    pub fn write_snapshot(&self, base: &std::path::Path) -> Result<()> {
        let (kind, shape, spacing, values): (&'static str, Vec<usize>, f64, &[f64]) =
            match &self.data {
                FieldData::TorusGrid { n, values, .. } => (
                    "torus_grid",
                    vec![*n; self.domain.dim],
                    1.0 / *n as f64,
                    values,
                ),
                FieldData::BallRadial { nr, modes, coeffs, .. } => (
                    "ball_radial",
                    vec![*nr, *modes],
                    self.domain.radius / *nr as f64,
                    coeffs,
                ),
            };
        let header = SnapshotHeader {
            schema_version: crate::SCHEMA_VERSION,
            kind,
            dim: self.domain.dim,
            shape,
            spacing,
            mean: self.mean,
            len: values.len(),
        };
        let json = serde_json::to_string_pretty(&header)?;
        std::fs::write(base.with_extension("json"), json)?;
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(base.with_extension("bin"), bytes)?;
        Ok(())
    }
}

/// Orthonormal angular basis on the sphere/circle, evaluated at x with
/// |x| = s (basis of constants when s = 0).
fn angular_basis(dim: usize, degree: usize, x: [f64; 3], s: f64, out: &mut [f64]) {
    match dim {
        2 => {
            out[0] = 1.0 / (2.0 * PI).sqrt();
            let theta = x[1].atan2(x[0]);
            let inv = 1.0 / PI.sqrt();
            for k in 1..=degree {
                out[2 * k - 1] = (k as f64 * theta).cos() * inv;
                out[2 * k] = (k as f64 * theta).sin() * inv;
            }
            if s == 0.0 {
                for v in out.iter_mut().skip(1) {
                    *v = 0.0;
                }
            }
        }
        _ => {
            let sh = crate::shape::sh_basis(degree);
            let xhat = if s > 0.0 {
                [x[0] / s, x[1] / s, x[2] / s]
            } else {
                [0.0, 0.0, 1.0]
            };
            sh.values_unit_all(xhat, out);
            if s == 0.0 {
                // only the constant survives at the origin
                for v in out.iter_mut().skip(1) {
                    *v = 0.0;
                }
            }
        }
    }
}

fn angular_mode_count(dim: usize, degree: usize) -> usize {
    if dim == 2 {
        2 * degree + 1
    } else {
        (degree + 1) * (degree + 1)
    }
}

/// l(l + n - 2) for the m-th basis entry.
fn angular_eigenvalue(dim: usize, m: usize) -> f64 {
    match dim {
        2 => {
            if m == 0 {
                0.0
            } else {
                let k = m.div_ceil(2) as f64;
                k * k
            }
        }
        _ => {
            let l = (m as f64).sqrt().floor() as usize;
            let l = if l * l > m { l - 1 } else { l }; // guard rounding
            (l * (l + 1)) as f64
        }
    }
}

/// Solve -Delta v = source with periodic/Neumann data and zero mean.
/// `resolution`: grid points per axis (torus) or radial cells (ball);
/// 0 picks the domain default.
pub fn solve_poisson<F: Fn([f64; 3]) -> f64 + Sync>(
    domain: &Domain,
    source: F,
    resolution: usize,
) -> Result<ScalarField> {
    match domain.kind {
        DomainKind::Torus => {
            let n = if resolution == 0 { default_torus_grid(domain.dim) } else { resolution };
            let cells = grid_cells(domain.dim, n);
            let values: Vec<f64> = cells.par_iter().map(|&x| source(x)).collect();
            solve_torus_from_cells(domain, n, values)
        }
        DomainKind::Ball => {
            let nr = if resolution == 0 { default_ball_cells(domain.dim) } else { resolution };
            // angular band limit for closure sources; indicator solves pick
            // their own degree from the droplet
            let degree = 8;
            let f = project_ball_source(domain, &source, nr, degree);
            solve_ball_from_modes(domain, nr, degree, f)
        }
    }
}

/// Solve -Delta v = chi_E - |E|/|Omega| for a droplet; the indicator is
/// discretized by subcell volume fractions so the boundary position enters
/// at full precision rather than through a staircase.
pub fn solve_indicator_poisson(
    domain: &Domain,
    shape: &DropletShape,
    resolution: usize,
) -> Result<ScalarField> {
    let grid = crate::shape::default_grid(shape.dim, shape.degree);
    shape.validate(&grid)?;
    if !crate::domain::inner_region_test(domain, shape.center, max_radius(shape)) {
        return Err(Error::Geometry("droplet not strictly contained in the domain".into()));
    }
    match domain.kind {
        DomainKind::Torus => {
            let n = if resolution == 0 { default_torus_grid(domain.dim) } else { resolution };
            let mut values = indicator_cell_fractions(domain, shape, n);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            for v in values.iter_mut() {
                *v -= mean;
            }
            solve_torus_from_cells(domain, n, values)
        }
        DomainKind::Ball => {
            let nr = if resolution == 0 { default_ball_cells(domain.dim) } else { resolution };
            let degree = (3 * shape.degree).clamp(16, 32);
            let f = project_ball_indicator(domain, shape, nr, degree);
            solve_ball_from_modes(domain, nr, degree, f)
        }
    }
}

/// NL(E) as the Dirichlet energy of the potential: with -Delta u = chi_E - m,
/// NL = int |grad u|^2 = int u (chi_E - m). Nonnegative by construction.
pub fn nl_energy(domain: &Domain, shape: &DropletShape, resolution: usize) -> Result<f64> {
    let grid = crate::shape::default_grid(shape.dim, shape.degree);
    shape.validate(&grid)?;
    if !crate::domain::inner_region_test(domain, shape.center, max_radius(shape)) {
        return Err(Error::Geometry("droplet not strictly contained in the domain".into()));
    }
    match domain.kind {
        DomainKind::Torus => {
            let n = if resolution == 0 { default_torus_grid(domain.dim) } else { resolution };
            let mut values = indicator_cell_fractions(domain, shape, n);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            for v in values.iter_mut() {
                *v -= mean;
            }
            let dim = domain.dim;
            let spectrum = forward_fft(dim, n, &values);
            let cell = (1.0 / n as f64).powi(dim as i32);
            // Parseval: NL = sum |chi_hat(k)|^2 / (4 pi^2 |k|^2); the DFT
            // coefficient approximates chi_hat / cell_volume-normalization
            let mut total = 0.0;
            let planes = if dim == 3 { n } else { 1 };
            for kz in 0..planes {
                for ky in 0..n {
                    for kx in 0..n {
                        let k2 = freq_sq(n, kx) + freq_sq(n, ky) + freq_sq(n, kz);
                        if k2 == 0.0 {
                            continue;
                        }
                        let c = spectrum[(kz * n + ky) * n + kx] * cell;
                        total += c.norm_sqr() / (4.0 * PI * PI * k2);
                    }
                }
            }
            Ok(total)
        }
        DomainKind::Ball => {
            let nr = if resolution == 0 { default_ball_cells(domain.dim) } else { resolution };
            let degree = (3 * shape.degree).clamp(16, 32);
            let f = project_ball_indicator(domain, shape, nr, degree);
            let field = solve_ball_from_modes(domain, nr, degree, f.clone())?;
            let FieldData::BallRadial { modes, coeffs, .. } = &field.data else {
                unreachable!()
            };
            let h = domain.radius / nr as f64;
            let mut total = 0.0;
            for i in 0..nr {
                let s = (i as f64 + 0.5) * h;
                let w = s.powi(domain.dim as i32 - 1) * h;
                for m in 0..*modes {
                    total += w * coeffs[i * modes + m] * f[m * nr + i];
                }
            }
            Ok(total.max(0.0))
        }
    }
}

fn max_radius(shape: &DropletShape) -> f64 {
    let grid = crate::shape::default_grid(shape.dim, shape.degree);
    let mut mx: f64 = 0.0;
    for &xh in &grid.nodes {
        mx = mx.max(shape.radius_at(xh));
    }
    mx
}

fn grid_cells(dim: usize, n: usize) -> Vec<[f64; 3]> {
    let h = 1.0 / n as f64;
    let planes = if dim == 3 { n } else { 1 };
    let mut cells = Vec::with_capacity(planes * n * n);
    for iz in 0..planes {
        for iy in 0..n {
            for ix in 0..n {
                cells.push([
                    (ix as f64 + 0.5) * h,
                    (iy as f64 + 0.5) * h,
                    if dim == 3 { (iz as f64 + 0.5) * h } else { 0.0 },
                ]);
            }
        }
    }
    cells
}

fn signed_freq(n: usize, i: usize) -> f64 {
    let i = i as i64;
    let n = n as i64;
    (if i <= n / 2 { i } else { i - n }) as f64
}

fn freq_sq(n: usize, i: usize) -> f64 {
    let f = signed_freq(n, i);
    f * f
}

fn forward_fft(dim: usize, n: usize, values: &[f64]) -> Vec<Complex<f64>> {
    let mut data: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let total = data.len();
    let mut line = vec![Complex::new(0.0, 0.0); n];
    for axis in 0..dim {
        let stride = n.pow(axis as u32);
        let lines = total / n;
        for li in 0..lines {
            // decompose the line index into coordinates of the other axes
            let block = li / stride;
            let offset = li % stride;
            let base = block * stride * n + offset;
            for j in 0..n {
                line[j] = data[base + j * stride];
            }
            fft.process(&mut line);
            for j in 0..n {
                data[base + j * stride] = line[j];
            }
        }
    }
    data
}

fn inverse_fft(dim: usize, n: usize, spectrum: &[Complex<f64>]) -> Vec<f64> {
    let mut data = spectrum.to_vec();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_inverse(n);
    let total = data.len();
    let mut line = vec![Complex::new(0.0, 0.0); n];
    for axis in 0..dim {
        let stride = n.pow(axis as u32);
        for li in 0..total / n {
            let block = li / stride;
            let offset = li % stride;
            let base = block * stride * n + offset;
            for j in 0..n {
                line[j] = data[base + j * stride];
            }
            fft.process(&mut line);
            for j in 0..n {
                data[base + j * stride] = line[j];
            }
        }
    }
    let scale = 1.0 / total as f64;
    data.iter().map(|c| c.re * scale).collect()
}

fn solve_torus_from_cells(domain: &Domain, n: usize, mut values: Vec<f64>) -> Result<ScalarField> {
    let dim = domain.dim;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean.abs() > 1e-8 {
        return Err(Error::Config(format!(
            "source mean {mean:.3e} violates the Neumann/periodic compatibility condition"
        )));
    }
    for v in values.iter_mut() {
        *v -= mean;
    }
    let mut spectrum = forward_fft(dim, n, &values);
    let total = spectrum.len();
    let planes = if dim == 3 { n } else { 1 };
    for kz in 0..planes {
        for ky in 0..n {
            for kx in 0..n {
                let k2 = freq_sq(n, kx) + freq_sq(n, ky) + freq_sq(n, kz);
                let idx = (kz * n + ky) * n + kx;
                if k2 == 0.0 {
                    spectrum[idx] = Complex::new(0.0, 0.0);
                } else {
                    spectrum[idx] /= 4.0 * PI * PI * k2;
                }
            }
        }
    }
    let out = inverse_fft(dim, n, &spectrum);
    let residual = out.iter().sum::<f64>() / total as f64;
    // normalize and shift the stored spectrum: samples live at cell centers
    // (i + 1/2) h, so the raw DFT carries a half-cell phase per axis
    let scale = 1.0 / total as f64;
    for kz in 0..planes {
        for ky in 0..n {
            for kx in 0..n {
                let f = signed_freq(n, kx) + signed_freq(n, ky) + signed_freq(n, kz);
                let ang = -PI * f / n as f64;
                spectrum[(kz * n + ky) * n + kx] *=
                    Complex::new(ang.cos(), ang.sin()) * scale;
            }
        }
    }
    Ok(ScalarField {
        domain: *domain,
        data: FieldData::TorusGrid { n, values: out, spectrum },
        mean: residual,
    })
}

/// Angular basis values for every quadrature node, node-major.
fn basis_table(dim: usize, degree: usize, grid: &crate::domain::QuadratureGrid) -> Vec<f64> {
    let modes = angular_mode_count(dim, degree);
    let mut tab = vec![0.0; grid.len() * modes];
    for (j, &xh) in grid.nodes.iter().enumerate() {
        angular_basis(dim, degree, xh, 1.0, &mut tab[j * modes..(j + 1) * modes]);
    }
    tab
}

/// Accumulate f[m * nr + i] = sum_j w_j basis[j][m] value(j, i), shell rows
/// in parallel. `value(j, i)` is the source sample for node j on shell i.
fn project_ball_rows<F: Fn(usize, usize) -> f64 + Sync>(
    grid: &crate::domain::QuadratureGrid,
    basis: &[f64],
    nr: usize,
    modes: usize,
    value: F,
) -> Vec<f64> {
    let mut rows = vec![0.0; nr * modes];
    rows.par_chunks_mut(modes).enumerate().for_each(|(i, row)| {
        for (j, &w) in grid.weights.iter().enumerate() {
            let v = value(j, i);
            if v == 0.0 {
                continue;
            }
            let c = w * v;
            let b = &basis[j * modes..(j + 1) * modes];
            for (rm, bm) in row.iter_mut().zip(b) {
                *rm += c * bm;
            }
        }
    });
    let mut f = vec![0.0; modes * nr];
    for i in 0..nr {
        for m in 0..modes {
            f[m * nr + i] = rows[i * modes + m];
        }
    }
    f
}

/// Project a smooth source onto angular modes x radial cells (sampled at
/// shell centers).
fn project_ball_source<F: Fn([f64; 3]) -> f64 + Sync>(
    domain: &Domain,
    source: &F,
    nr: usize,
    degree: usize,
) -> Vec<f64> {
    let dim = domain.dim;
    let modes = angular_mode_count(dim, degree);
    let grid = crate::domain::sphere_quadrature(dim, 2 * degree + 8);
    let basis = basis_table(dim, degree, &grid);
    let h = domain.radius / nr as f64;
    project_ball_rows(&grid, &basis, nr, modes, |j, i| {
        let s = (i as f64 + 0.5) * h;
        let xh = grid.nodes[j];
        source([s * xh[0], s * xh[1], s * xh[2]])
    })
}

/// Project chi_E - |E|/|Omega| onto angular modes, with exact cell
/// fractions in the radial direction per origin ray.
fn project_ball_indicator(
    domain: &Domain,
    shape: &DropletShape,
    nr: usize,
    degree: usize,
) -> Vec<f64> {
    let dim = domain.dim;
    let modes = angular_mode_count(dim, degree);
    let grid = crate::domain::sphere_quadrature(dim, (2 * degree + 8).max(2 * shape.degree + 16));
    let basis = basis_table(dim, degree, &grid);
    let h = domain.radius / nr as f64;
    // radial bracket with slack for quick in/out classification
    let sample = crate::shape::default_grid(dim, shape.degree);
    let mut rho_min = f64::INFINITY;
    let mut rho_max: f64 = 0.0;
    for &xh in &sample.nodes {
        let r = shape.radius_at(xh);
        rho_min = rho_min.min(r);
        rho_max = rho_max.max(r);
    }
    let slack = 0.02 * rho_min + 0.1 * (rho_max - rho_min);
    let lo = rho_min - slack;
    let hi = rho_max + slack;
    let mut f = project_ball_rows(&grid, &basis, nr, modes, |j, i| {
        ray_cell_fraction(shape, grid.nodes[j], i as f64 * h, h, lo, hi)
    });
    // subtract the constant that zeroes the discrete weighted mean of the
    // constant mode; it approximates |E| / |Omega| to the same order as the
    // radial rule and keeps the compatibility condition exact in the solver
    let mut mass = 0.0;
    let mut wsum = 0.0;
    for i in 0..nr {
        let s = (i as f64 + 0.5) * h;
        let w = s.powi(dim as i32 - 1) * h;
        mass += f[i] * w;
        wsum += w;
    }
    let shift = mass / wsum;
    for i in 0..nr {
        f[i] -= shift;
    }
    f
}

/// Fraction of the radial segment [s0, s0 + h] along direction `xh` (from
/// the domain origin) inside the droplet. `rho_lo`/`rho_hi` bracket the
/// droplet radii about its own center for cheap classification.
fn ray_cell_fraction(
    shape: &DropletShape,
    xh: [f64; 3],
    s0: f64,
    h: f64,
    rho_lo: f64,
    rho_hi: f64,
) -> f64 {
    // distance to the droplet center along the segment is convex
    let c = shape.center;
    let dist = |s: f64| -> f64 {
        let p = [s * xh[0] - c[0], s * xh[1] - c[1], s * xh[2] - c[2]];
        p.iter().take(shape.dim).map(|v| v * v).sum::<f64>().sqrt()
    };
    let proj: f64 = xh.iter().zip(&c).take(shape.dim).map(|(a, b)| a * b).sum();
    let d_min = dist(proj.clamp(s0, s0 + h));
    let d_max = dist(s0).max(dist(s0 + h));
    if d_max < rho_lo {
        return 1.0;
    }
    if d_min > rho_hi {
        return 0.0;
    }
    let inside = |s: f64| -> bool {
        let p = [s * xh[0] - c[0], s * xh[1] - c[1], s * xh[2] - c[2]];
        let d: f64 = p.iter().take(shape.dim).map(|v| v * v).sum::<f64>().sqrt();
        if d == 0.0 {
            return true;
        }
        let dir = [p[0] / d, p[1] / d, p[2] / d];
        d < shape.radius_at(dir)
    };
    const SUB: usize = 8;
    let mut flags = [false; SUB + 1];
    for (k, fl) in flags.iter_mut().enumerate() {
        *fl = inside(s0 + h * k as f64 / SUB as f64);
    }
    if flags.iter().all(|&b| b) {
        return 1.0;
    }
    if flags.iter().all(|&b| !b) {
        return 0.0;
    }
    // refine each sign change by bisection, then accumulate inside length
    let mut frac = 0.0;
    for k in 0..SUB {
        let (a, b) = (s0 + h * k as f64 / SUB as f64, s0 + h * (k + 1) as f64 / SUB as f64);
        match (flags[k], flags[k + 1]) {
            (true, true) => frac += (b - a) / h,
            (false, false) => {}
            (fa, _) => {
                let mut lo = a;
                let mut hi = b;
                for _ in 0..50 {
                    let mid = 0.5 * (lo + hi);
                    if inside(mid) == fa {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let cross = 0.5 * (lo + hi);
                frac += if fa { (cross - a) / h } else { (b - cross) / h };
            }
        }
    }
    frac.clamp(0.0, 1.0)
}

/// Solve the per-mode radial problems; `f` is mode-major (f[m * nr + i]).
fn solve_ball_from_modes(
    domain: &Domain,
    nr: usize,
    degree: usize,
    f: Vec<f64>,
) -> Result<ScalarField> {
    let dim = domain.dim;
    let radius = domain.radius;
    let modes = angular_mode_count(dim, degree);
    let h = radius / nr as f64;
    let area = if dim == 2 { 2.0 * PI } else { 4.0 * PI };

    // compatibility: the weighted mean of the constant mode must vanish
    let mut mass = 0.0;
    for i in 0..nr {
        let s = (i as f64 + 0.5) * h;
        mass += f[i] * s.powi(dim as i32 - 1) * h;
    }
    let mean_source = mass * area.sqrt() / domain.volume;
    if mean_source.abs() > 1e-8 {
        return Err(Error::Config(format!(
            "source mean {mean_source:.3e} violates the Neumann compatibility condition"
        )));
    }

    let mut coeffs = vec![0.0; nr * modes];
    let solved: Vec<Vec<f64>> = (0..modes)
        .into_par_iter()
        .map(|m| {
            let q = angular_eigenvalue(dim, m);
            let fm = &f[m * nr..(m + 1) * nr];
            if q == 0.0 {
                solve_radial_mean_mode(dim, nr, h, fm)
            } else {
                solve_radial_mode(dim, nr, h, q, fm)
            }
        })
        .collect();
    for (m, um) in solved.iter().enumerate() {
        for i in 0..nr {
            coeffs[i * modes + m] = um[i];
        }
    }

    // zero mean: subtract the discrete weighted average of the constant
    // mode so the stored mean vanishes under the same radial rule
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..nr {
        let s = (i as f64 + 0.5) * h;
        let w = s.powi(dim as i32 - 1) * h;
        num += coeffs[i * modes] * w;
        den += w;
    }
    let shift = num / den;
    for i in 0..nr {
        coeffs[i * modes] -= shift;
    }
    let mut residual = 0.0;
    for i in 0..nr {
        let s = (i as f64 + 0.5) * h;
        residual += coeffs[i * modes] * s.powi(dim as i32 - 1) * h;
    }
    residual *= area.sqrt() / domain.volume;

    Ok(ScalarField {
        domain: *domain,
        data: FieldData::BallRadial { nr, degree, modes, coeffs },
        mean: residual,
    })
}

/// Mean (l = 0) radial mode: direct flux integration of
/// (s^{n-1} u')' = -s^{n-1} f, zero flux at both ends.
fn solve_radial_mean_mode(dim: usize, nr: usize, h: f64, f: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; nr];
    let mut flux = 0.0; // s^{n-1} u' at the upper face of cell i
    for i in 0..nr - 1 {
        let s = (i as f64 + 0.5) * h;
        flux -= f[i] * s.powi(dim as i32 - 1) * h;
        let face = (i as f64 + 1.0) * h;
        u[i + 1] = u[i] + h * flux / face.powi(dim as i32 - 1);
    }
    u
}

/// One tridiagonal Neumann solve:
/// -(s^{n-1} u')'/s^{n-1} + q u / s^2 = f, natural zero flux at s = 0, R.
fn solve_radial_mode(dim: usize, nr: usize, h: f64, q: f64, f: &[f64]) -> Vec<f64> {
    let n1 = dim as i32 - 1;
    let mut sub = vec![0.0; nr];
    let mut diag = vec![0.0; nr];
    let mut sup = vec![0.0; nr];
    let mut rhs = f.to_vec();
    for i in 0..nr {
        let s = (i as f64 + 0.5) * h;
        let w = s.powi(n1) * h * h;
        let alo = if i == 0 { 0.0 } else { (i as f64 * h).powi(n1) };
        let ahi = if i == nr - 1 { 0.0 } else { ((i + 1) as f64 * h).powi(n1) };
        sub[i] = -alo / w;
        sup[i] = -ahi / w;
        diag[i] = (alo + ahi) / w + q / (s * s);
    }
    // Thomas
    for i in 1..nr {
        let m = sub[i] / diag[i - 1];
        diag[i] -= m * sup[i - 1];
        rhs[i] -= m * rhs[i - 1];
    }
    let mut u = vec![0.0; nr];
    u[nr - 1] = rhs[nr - 1] / diag[nr - 1];
    for i in (0..nr - 1).rev() {
        u[i] = (rhs[i] - sup[i] * u[i + 1]) / diag[i];
    }
    u
}

/// Cell-averaged droplet indicator on the torus grid. 2D boundary cells
/// integrate the exact radial graph; 3D boundary cells are subsampled.
fn indicator_cell_fractions(domain: &Domain, shape: &DropletShape, n: usize) -> Vec<f64> {
    let dim = domain.dim;
    let h = 1.0 / n as f64;
    let c = shape.center;
    // radial bracket for quick classification
    let grid = crate::shape::default_grid(dim, shape.degree);
    let mut rho_min = f64::INFINITY;
    let mut rho_max: f64 = 0.0;
    for &xh in &grid.nodes {
        let r = shape.radius_at(xh);
        rho_min = rho_min.min(r);
        rho_max = rho_max.max(r);
    }
    let slack = 0.01 * rho_min + 0.05 * (rho_max - rho_min);
    let diag = h * (dim as f64).sqrt();
    let cells = grid_cells(dim, n);
    cells
        .par_iter()
        .map(|&x| {
            let z = domain.wrap([x[0] - c[0], x[1] - c[1], x[2] - c[2]]);
            let d: f64 = z.iter().take(dim).map(|v| v * v).sum::<f64>().sqrt();
            if d + 0.5 * diag < rho_min - slack {
                return 1.0;
            }
            if d - 0.5 * diag > rho_max + slack {
                return 0.0;
            }
            if dim == 2 {
                cell_fraction_2d(shape, z, h)
            } else {
                cell_fraction_3d(shape, z, h, rho_min - slack, rho_max + slack)
            }
        })
        .collect()
}

/// Exact area fraction of the square cell centered at z (coordinates
/// relative to the droplet center) via the radial graph: clip each ray to
/// the cell, then integrate (min(b, max(a, rho))^2 - a^2)/2 over the
/// visible angle range, split at the cell-corner angles.
fn cell_fraction_2d(shape: &DropletShape, z: [f64; 3], h: f64) -> f64 {
    let (cx, cy) = (z[0], z[1]);
    let half = 0.5 * h;
    let corners = [
        (cx - half, cy - half),
        (cx + half, cy - half),
        (cx + half, cy + half),
        (cx - half, cy + half),
    ];
    // the droplet center (origin here) lies outside boundary cells, so the
    // cell subtends a proper angular interval
    let mut angles: Vec<f64> = corners.iter().map(|&(x, y)| y.atan2(x)).collect();
    let center_angle = cy.atan2(cx);
    // unwrap around the center angle so the interval is contiguous
    for a in angles.iter_mut() {
        while *a < center_angle - PI {
            *a += 2.0 * PI;
        }
        while *a > center_angle + PI {
            *a -= 2.0 * PI;
        }
    }
    angles.sort_by(f64::total_cmp);
    let clip = |theta: f64| -> (f64, f64) {
        // intersect the ray t*(cos, sin) with the cell slab-wise
        let (dx, dy) = (theta.cos(), theta.sin());
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for (dir, lo, hi) in [(dx, cx - half, cx + half), (dy, cy - half, cy + half)] {
            if dir.abs() < 1e-300 {
                if lo > 0.0 || hi < 0.0 {
                    return (0.0, 0.0);
                }
            } else {
                let (a, b) = ((lo / dir).min(hi / dir), (lo / dir).max(hi / dir));
                t0 = t0.max(a);
                t1 = t1.min(b);
            }
        }
        if t1 <= t0 {
            (0.0, 0.0)
        } else {
            (t0, t1)
        }
    };
    let mut area = 0.0;
    for seg in angles.windows(2) {
        let (ta, tb) = (seg[0], seg[1]);
        if tb - ta < 1e-14 {
            continue;
        }
        let (ts, ws) = gauss_legendre_ab(20, ta, tb);
        for (&theta, &w) in ts.iter().zip(&ws) {
            let (a, b) = clip(theta);
            if b <= a {
                continue;
            }
            let rho = shape.radius_at([theta.cos(), theta.sin(), 0.0]);
            let upper = rho.clamp(a, b);
            area += w * 0.5 * (upper * upper - a * a);
        }
    }
    (area / (h * h)).clamp(0.0, 1.0)
}

/// Subsampled volume fraction of the cubic cell centered at z; the radial
/// bracket [rho_lo, rho_hi] classifies most sample points by distance alone.
fn cell_fraction_3d(shape: &DropletShape, z: [f64; 3], h: f64, rho_lo: f64, rho_hi: f64) -> f64 {
    const SUB: usize = 8;
    let mut inside = 0usize;
    for ix in 0..SUB {
        for iy in 0..SUB {
            for iz in 0..SUB {
                let p = [
                    z[0] + h * ((ix as f64 + 0.5) / SUB as f64 - 0.5),
                    z[1] + h * ((iy as f64 + 0.5) / SUB as f64 - 0.5),
                    z[2] + h * ((iz as f64 + 0.5) / SUB as f64 - 0.5),
                ];
                let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                if d < rho_lo {
                    inside += 1;
                    continue;
                }
                if d > rho_hi || d == 0.0 {
                    if d == 0.0 {
                        inside += 1;
                    }
                    continue;
                }
                let dir = [p[0] / d, p[1] / d, p[2] / d];
                if d < shape.radius_at(dir) {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / (SUB * SUB * SUB) as f64
}

/// Free-space potential int_E Gamma(|x - y|) dy, by polar quadrature about
/// the droplet center with the inner line integrals split at the nearest
/// approach to x. Exact closed form when x sits at the droplet center.
pub fn gamma_potential(shape: &DropletShape, x: [f64; 3], order: usize) -> f64 {
    let dim = shape.dim;
    let c = shape.center;
    let xp = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
    let xn: f64 = xp.iter().take(dim).map(|v| v * v).sum::<f64>().sqrt();
    let grid = crate::domain::sphere_quadrature(dim, order);
    let (gl_s, gl_w) = gauss_legendre_ab(24, 0.0, 1.0);
    let mut total = 0.0;
    for (&yh, &w) in grid.nodes.iter().zip(&grid.weights) {
        let rho = shape.radius_at(yh);
        if xn < 1e-9 {
            // int_0^rho Gamma(s) s^{n-1} ds in closed form
            total += w
                * match dim {
                    2 => (0.5 * rho * rho * rho.ln() - 0.25 * rho * rho) / (2.0 * PI),
                    _ => -rho * rho / (8.0 * PI),
                };
            continue;
        }
        let b: f64 = xp.iter().zip(&yh).take(dim).map(|(a, v)| a * v).sum();
        let split = b.clamp(0.0, rho);
        let mut inner = 0.0;
        for (lo, hi) in [(0.0, split), (split, rho)] {
            if hi - lo < 1e-15 {
                continue;
            }
            for (&t, &wt) in gl_s.iter().zip(&gl_w) {
                let s = lo + (hi - lo) * t;
                let dx = [s * yh[0] - xp[0], s * yh[1] - xp[1], s * yh[2] - xp[2]];
                let dist: f64 =
                    dx.iter().take(dim).map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                inner += wt * (hi - lo) * gamma(dist, dim).unwrap() * s.powi(dim as i32 - 1);
            }
        }
        total += w * inner;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{sphere_quadrature, unit_ball_volume};
    use crate::greens::GreenEvaluator;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_shape(dim: usize, rng: &mut ChaCha8Rng, base: f64, amp: f64) -> DropletShape {
        let degree = 4;
        let nc = crate::shape::coeff_count(dim, degree);
        let coeffs: Vec<f64> = (0..nc).map(|_| (rng.gen::<f64>() - 0.5) * amp).collect();
        DropletShape::new(dim, [0.0; 3], base, degree, coeffs).unwrap()
    }

    #[test]
    fn torus_single_mode_is_exact() {
        for dim in [2usize, 3] {
            let dom = Domain::torus(dim).unwrap();
            let field =
                solve_poisson(&dom, |x| (2.0 * PI * x[0]).cos(), if dim == 2 { 64 } else { 32 })
                    .unwrap();
            assert!(field.mean.abs() < 1e-10);
            for &p in &[[0.0, 0.0, 0.0], [0.3, 0.7, 0.2], [0.125, 0.5, 0.9]] {
                let want = (2.0 * PI * p[0]).cos() / (4.0 * PI * PI);
                assert_abs_diff_eq!(field.eval_spectral(p).unwrap(), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn torus_manufactured_modes_exact() {
        let dom = Domain::torus(2).unwrap();
        // u = cos(2pi x)cos(4pi y) + 0.3 sin(6pi y); -Delta u known mode-wise
        let u = |x: [f64; 3]| {
            (2.0 * PI * x[0]).cos() * (4.0 * PI * x[1]).cos() + 0.3 * (6.0 * PI * x[1]).sin()
        };
        let src = |x: [f64; 3]| {
            4.0 * PI * PI
                * ((1.0 + 4.0) * (2.0 * PI * x[0]).cos() * (4.0 * PI * x[1]).cos()
                    + 9.0 * 0.3 * (6.0 * PI * x[1]).sin())
        };
        let field = solve_poisson(&dom, src, 64).unwrap();
        for &p in &[[0.1, 0.2, 0.0], [0.77, 0.31, 0.0], [0.5, 0.5, 0.0]] {
            assert_abs_diff_eq!(field.eval_spectral(p).unwrap(), u(p), epsilon = 1e-11);
        }
    }

    #[test]
    fn incompatible_source_rejected() {
        let dom = Domain::torus(2).unwrap();
        let res = solve_poisson(&dom, |x| (2.0 * PI * x[0]).cos() + 0.1, 32);
        assert!(matches!(res, Err(Error::Config(_))));
        let ball = Domain::ball(3, 1.0).unwrap();
        let res = solve_poisson(&ball, |_| 0.05, 128);
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn ball_indicator_matches_radial_profile() {
        // -Delta v = chi_{B_r} - m solves to the explicit piecewise radial
        // profile; interior curvature is -(1 - m) (Delta v = m - 1 there)
        for dim in [2usize, 3] {
            let dom = Domain::ball(dim, 1.0).unwrap();
            let r = 0.35f64;
            let shape = DropletShape::ball_at(dim, [0.0; 3], r, 2).unwrap();
            let field = solve_indicator_poisson(&dom, &shape, 4096).unwrap();
            assert!(field.mean.abs() < 1e-10);
            let n = dim as f64;
            let m = r.powi(dim as i32); // volume fraction in the unit ball
            let vin = |s: f64| -(1.0 - m) * (s * s - r * r) / (2.0 * n);
            let vout = |s: f64| match dim {
                2 => m * (s * s - r * r) / (2.0 * n) - (r * r / n) * (s / r).ln(),
                _ => m * (s * s - r * r) / (2.0 * n) - (r.powi(3) / n) * (1.0 / r - 1.0 / s),
            };
            // compare profile differences (the constant is fixed by the
            // zero-mean normalization, so difference it away)
            let probe = |s: f64| field.eval([s, 0.0, 0.0]);
            let anchor_in = probe(0.1) - vin(0.1);
            for &s in &[0.0f64, 0.2, 0.3, 0.34] {
                assert_abs_diff_eq!(probe(s) - vin(s), anchor_in, epsilon = 1e-6);
            }
            let anchor_out = probe(0.6) - vout(0.6);
            for &s in &[0.4f64, 0.5, 0.8, 0.95] {
                assert_abs_diff_eq!(probe(s) - vout(s), anchor_out, epsilon = 1e-6);
            }
            // the two anchors agree because v is continuous at r
            assert_abs_diff_eq!(anchor_in, anchor_out, epsilon = 1e-6);
        }
    }

    #[test]
    fn ball_manufactured_harmonics() {
        // u = (s^l - l/(l+2) s^{l+2}) Y_l has zero Neumann data at R = 1 and
        // source -Delta u = 2 (2l + n) l/(l+2) s^l Y_l; test a two-mode sum
        // with solid-harmonic angular factors written in closed form
        for dim in [2usize, 3] {
            let dom = Domain::ball(dim, 1.0).unwrap();
            let n = dim as f64;
            // (l, coefficient, angular factor as a function of x/s)
            let ang = move |l: usize, x: [f64; 3], s: f64| -> f64 {
                if s == 0.0 {
                    return 0.0;
                }
                match (dim, l) {
                    (2, 1) => x[0] / s,                      // cos theta
                    (2, 2) => (x[0] * x[0] - x[1] * x[1]) / (s * s), // cos 2theta
                    (3, 1) => x[2] / s,
                    (3, 2) => x[0] * x[2] / (s * s),
                    _ => unreachable!(),
                }
            };
            let u = move |x: [f64; 3]| -> f64 {
                let s: f64 = x.iter().take(dim).map(|v| v * v).sum::<f64>().sqrt();
                let mut total = 0.0;
                for &(l, c) in &[(1usize, 0.7f64), (2, -0.4)] {
                    let a = l as f64 / (l as f64 + 2.0);
                    let radial = s.powi(l as i32) - a * s.powi(l as i32 + 2);
                    total += c * radial * ang(l, x, s);
                }
                total
            };
            let src = move |x: [f64; 3]| -> f64 {
                let s: f64 = x.iter().take(dim).map(|v| v * v).sum::<f64>().sqrt();
                let mut total = 0.0;
                for &(l, c) in &[(1usize, 0.7f64), (2, -0.4)] {
                    let a = l as f64 / (l as f64 + 2.0);
                    total += c * 2.0 * (2.0 * l as f64 + n) * a * s.powi(l as i32) * ang(l, x, s);
                }
                total
            };
            let field = solve_poisson(&dom, src, 32768).unwrap();
            assert!(field.mean.abs() < 1e-10);
            for &p in &[[0.3, 0.2, 0.1], [0.0, 0.55, -0.3], [0.8, -0.1, 0.05]] {
                let p = if dim == 2 { [p[0], p[1], 0.0] } else { p };
                assert_abs_diff_eq!(field.eval(p), u(p), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn nl_torus_ball_matches_green_identity() {
        // NL(B_r) = -int int Gamma + |B_r|^2 g_r(0), the second factor from
        // the Ewald machinery: a genuinely independent route
        let cases = [(2usize, 0.15f64, 256usize, 2e-6), (3, 0.2, 96, 8e-6)];
        for (dim, r, res, tol) in cases {
            let dom = Domain::torus(dim).unwrap();
            let shape = DropletShape::ball_at(dim, [0.5; 3], r, 2).unwrap();
            let nl = nl_energy(&dom, &shape, res).unwrap();
            let ev = GreenEvaluator::new(dom).unwrap();
            let g_r = ev.torus_robin() + r * r / (dim as f64 + 2.0);
            let vol = unit_ball_volume(dim) * r.powi(dim as i32);
            let exact = -gamma_double_ball(r, dim) + vol * vol * g_r;
            assert!(nl > 0.0);
            assert_abs_diff_eq!(nl, exact, epsilon = tol);
        }
    }

    #[test]
    fn nl_nonnegative_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in [2usize, 3] {
            let dom = Domain::torus(dim).unwrap();
            for _ in 0..4 {
                let mut shape = random_shape(dim, &mut rng, 0.14, 0.03);
                shape.center = [0.5, 0.5, if dim == 3 { 0.5 } else { 0.0 }];
                let nl = nl_energy(&dom, &shape, if dim == 2 { 64 } else { 48 }).unwrap();
                assert!(nl >= 0.0, "NL = {nl}");
            }
        }
    }

    #[test]
    fn nl_agrees_with_direct_double_quadrature() {
        // outer integral over E in polar form, inner Gamma potential plus
        // the regular part by product quadrature: no FFT grid involved
        let dom = Domain::torus(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut shape = random_shape(2, &mut rng, 0.12, 0.02);
        shape.center = [0.5, 0.5, 0.0];
        let nl_grid = nl_energy(&dom, &shape, 256).unwrap();

        let ev = GreenEvaluator::new(dom).unwrap();
        let grid = sphere_quadrature(2, 24);
        let (gs, gw) = gauss_legendre_ab(8, 0.0, 1.0);
        let mut nodes = Vec::new();
        let mut wts = Vec::new();
        for (&xh, &wa) in grid.nodes.iter().zip(&grid.weights) {
            let rho = shape.radius_at(xh);
            for (&t, &wr) in gs.iter().zip(&gw) {
                let s = rho * t;
                nodes.push([
                    shape.center[0] + s * xh[0],
                    shape.center[1] + s * xh[1],
                    0.0,
                ]);
                wts.push(wa * wr * rho * rho * t);
            }
        }
        let mut gamma_part = 0.0;
        let mut regular_part = 0.0;
        for (&x, &wx) in nodes.iter().zip(&wts) {
            gamma_part += wx * gamma_potential(&shape, x, 32);
            let mut inner = 0.0;
            for (&y, &wy) in nodes.iter().zip(&wts) {
                inner += wy * ev.regular_part(x, y).unwrap();
            }
            regular_part += wx * inner;
        }
        let nl_direct = -gamma_part + regular_part;
        assert_abs_diff_eq!(nl_grid, nl_direct, epsilon = 1e-5);
    }

    #[test]
    fn nl_refinement_order_is_second() {
        let dom = Domain::torus(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut shape = random_shape(2, &mut rng, 0.13, 0.02);
        shape.center = [0.5, 0.5, 0.0];
        let nl: Vec<f64> = [64usize, 128, 256]
            .iter()
            .map(|&n| nl_energy(&dom, &shape, n).unwrap())
            .collect();
        let p = ((nl[0] - nl[1]) / (nl[1] - nl[2])).abs().log2();
        assert!(
            (1.3..3.2).contains(&p),
            "refinement order {p}, values {nl:?}"
        );
    }

    #[test]
    fn gamma_potential_monotonicity_bound() {
        // sup_x |Gamma * chi_E| <= |Gamma * chi_B|(0) at equal volume; the
        // centered ball is the extremal set (radial rearrangement)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dim in [2usize, 3] {
            let rv = 0.18f64;
            let target = unit_ball_volume(dim) * rv.powi(dim as i32);
            let bound = radial_convolution(0.0, rv, dim).abs();
            // ball attains the bound through the closed-form ray integrals
            let ball = DropletShape::ball_at(dim, [0.0; 3], rv, 4).unwrap();
            assert_abs_diff_eq!(gamma_potential(&ball, [0.0; 3], 32).abs(), bound,
                epsilon = 1e-10);
            let grid = crate::shape::default_grid(dim, 4);
            for _ in 0..3 {
                let mut shape = random_shape(dim, &mut rng, rv, 0.25 * rv);
                // rescale to the exact target volume
                let lambda = (target / shape.volume(&grid).unwrap()).powf(1.0 / dim as f64);
                shape.base_radius *= lambda;
                for c in shape.coeffs.iter_mut() {
                    *c *= lambda;
                }
                assert_abs_diff_eq!(shape.volume(&grid).unwrap(), target, epsilon = 1e-12);
                let probes = [
                    [0.0, 0.0, 0.0],
                    [0.3 * rv, 0.0, 0.0],
                    [0.0, -0.25 * rv, 0.0],
                    [0.1 * rv, 0.15 * rv, if dim == 3 { -0.2 * rv } else { 0.0 }],
                ];
                for &p in &probes {
                    let v = gamma_potential(&shape, p, 48).abs();
                    assert!(
                        v <= bound * (1.0 + 1e-4),
                        "dim {dim}: |potential| {v} exceeds ball bound {bound}"
                    );
                }
            }
        }
    }

    #[test]
    fn radial_convolution_c1_interface() {
        // the inside and outside closed forms meet with matching value and
        // derivative r/n; compare the analytic expressions directly
        for &r in &[0.3f64, 1.0, 2.2] {
            let inside2 = r * r / 4.0 + 0.5 * r * r * (r.ln() - 0.5);
            let outside2 = 0.5 * r * r * r.ln();
            assert_abs_diff_eq!(inside2, outside2, epsilon = 1e-14 * (1.0 + r * r));
            let inside3 = r * r / 6.0 - r * r / 2.0;
            let outside3 = -r * r * r / (3.0 * r);
            assert_abs_diff_eq!(inside3, outside3, epsilon = 1e-15 * (1.0 + r * r));
            // derivatives: s/2 vs r^2/(2s) at s=r, and s/3 vs r^3/(3s^2)
            assert_abs_diff_eq!(r / 2.0, r * r / (2.0 * r), epsilon = 1e-15 * (1.0 + r));
            assert_abs_diff_eq!(r / 3.0, r * r * r / (3.0 * r * r), epsilon = 1e-15 * (1.0 + r));
        }
    }

    #[test]
    fn snapshot_roundtrip_header() {
        let dom = Domain::torus(2).unwrap();
        let field = solve_poisson(&dom, |x| (2.0 * PI * x[0]).cos(), 16).unwrap();
        let dir = std::env::temp_dir().join("okdroplet_field_test");
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("snap");
        field.write_snapshot(&base).unwrap();
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(base.with_extension("json")).unwrap())
                .unwrap();
        assert_eq!(header["schema_version"], 1);
        assert_eq!(header["kind"], "torus_grid");
        assert_eq!(header["shape"][0], 16);
        let bytes = std::fs::read(base.with_extension("bin")).unwrap();
        assert_eq!(bytes.len(), 16 * 16 * 8);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
