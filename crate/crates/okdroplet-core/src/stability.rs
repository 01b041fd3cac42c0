//! Second variation of F = Per + gamma NL at spherical droplets.
//!
//! At a ball B_r(p) contained in the domain, normal perturbations f on the
//! sphere see the quadratic form
//!
//!   Q[f] = int (|grad_tau f|^2 - |A|^2 f^2)
//!          + 2 gamma [ iint G(x,y) f(x) f(y) + int (grad v . nu) f^2 ]
//!
//! with v the zero-mean potential of the ball, consistent with the first
//! variation H + 2 gamma v.  The factor bookkeeping is pinned by an exact
//! identity: rigid translations of a centered ball in the ball domain must
//! give Q equal to the second derivative of gamma NL(B_r(p)) in p, and the
//! assembled form reproduces that value to quadrature precision.
//!
//! Assembly splits G = -Gamma + R.  The free-space layer iint Gamma f f is
//! singular but diagonal in sphere harmonics with classical eigenvalues
//! (r/(2k) on the circle, r/(2l+1) on the sphere), so only the smooth
//! remainder R is integrated numerically.  The slope int (grad v . nu) f^2
//! uses the same split: the Newtonian part of grad v . nu is exactly r/n on
//! the sphere, the R part is a volume moment (ball domain) or, on the
//! torus, a surface moment obtained from the divergence theorem.
//!
//! Every form is normalized per unit L2(partial B_r) norm.  The basis
//! excludes the constant mode (the volume constraint removes it), so the
//! matrix acts on zero-average perturbations only; degree-1 modes are kept
//! and their diagonal is reported separately as the translation block.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::domain::{sphere_quadrature, Domain, DomainKind, QuadratureGrid};
use crate::energy::ModelParams;
use crate::greens::{gamma, regular_part_ball_closed, GreenEvaluator};
use crate::numerics::gauss::gauss_legendre_ab;
use crate::numerics::harmonics::CircleBasis;
use crate::optimize::ball_reg_kernel;
use crate::shape::sh_basis;
use crate::{Error, Result};

/// Relative tolerance used to group nearly equal eigenvalues into
/// harmonic multiplets.
pub const DEGENERACY_TOL: f64 = 1e-7;

/// Spectrum of the second-variation form at a spherical droplet, in the
/// real harmonic basis with the constant mode removed.  Basis order is
/// cos t, sin t, cos 2t, ... on the circle and the (l, m) ladder
/// l = 1..=basis_degree on the sphere.  All values are per unit
/// L2(partial B_r) norm of the perturbation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilitySpectrum {
    pub basis_degree: usize,
    /// Ascending eigenvalues of the projected form.
    pub eigenvalues: Vec<f64>,
    /// Coefficient vectors in the harmonic basis, aligned with
    /// `eigenvalues`; each is unit Euclidean norm.
    pub eigenvectors: Vec<Vec<f64>>,
    /// Smallest eigenvalue over zero-average modes: the quantitative
    /// stability constant when positive.
    pub min_nontrivial: f64,
    /// Diagonal form values on the degree-1 modes.  Zero on the torus
    /// (translations cost nothing); 2 gamma r^{n+1} / R^n in a ball
    /// domain of radius R.
    pub translation_block: Vec<f64>,
}

impl StabilitySpectrum {
    /// Group the ascending eigenvalues into multiplets: values whose gap
    /// to the previous one is below `tol * (1 + |value|)` join the open
    /// group.  Returns (group mean, multiplicity) pairs.
    pub fn degeneracy_groups(&self, tol: f64) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut prev = f64::NEG_INFINITY;
        for &ev in &self.eigenvalues {
            if count > 0 && (ev - prev) > tol * (1.0 + ev.abs()) {
                out.push((sum / count as f64, count));
                sum = 0.0;
                count = 0;
            }
            sum += ev;
            count += 1;
            prev = ev;
        }
        if count > 0 {
            out.push((sum / count as f64, count));
        }
        out
    }
}

/// Perimeter part of the form on a sphere of radius r: for harmonic
/// degree l the value per unit L2 norm is (l (l + n - 2) - (n - 1)) / r^2.
/// Returns the values for l = 1..=lmax; degree 1 gives exactly zero
/// (translations are perimeter-neutral).
pub fn perimeter_hessian_diag(r: f64, dim: usize, lmax: usize) -> Result<Vec<f64>> {
    check_dim(dim)?;
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Config(format!("sphere radius must be positive, got {r}")));
    }
    if lmax == 0 {
        return Err(Error::Config("harmonic degree must be at least 1".into()));
    }
    let n = dim as f64;
    Ok((1..=lmax)
        .map(|l| {
            let lf = l as f64;
            (lf * (lf + n - 2.0) - (n - 1.0)) / (r * r)
        })
        .collect())
}

fn check_dim(dim: usize) -> Result<()> {
    if dim != 2 && dim != 3 {
        return Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")));
    }
    Ok(())
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

// ---------------------------------------------------------------------------
// gamma-independent parts of the form
// ---------------------------------------------------------------------------

/// The three gamma-independent ingredients of the form, all per unit
/// L2(partial B_r): the full matrix is
/// diag(per) + 2 gamma (diag(layer) + pair_r + slope).
struct FormParts {
    degrees: Vec<usize>,
    per: Vec<f64>,
    /// Free-space layer eigenvalues: iint (-Gamma) f f for a unit mode.
    layer: Vec<f64>,
    /// iint R(x, y) f f over the product sphere.
    pair_r: DMatrix<f64>,
    /// int (grad v . nu) f f over the sphere.
    slope: DMatrix<f64>,
}

impl FormParts {
    fn mode_count(&self) -> usize {
        self.degrees.len()
    }

    fn matrix(&self, gamma: f64) -> DMatrix<f64> {
        let m = self.mode_count();
        let mut mat = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                mat[(i, j)] = 2.0 * gamma * (self.pair_r[(i, j)] + self.slope[(i, j)]);
            }
            mat[(i, i)] += self.per[i] + 2.0 * gamma * self.layer[i];
        }
        mat
    }

    /// Pair-interaction block iint G f f alone (layer diagonal plus
    /// regular part); positive semidefinite on zero-average modes.
    #[cfg(test)]
    fn pair_block(&self) -> DMatrix<f64> {
        let mut mat = self.pair_r.clone();
        for i in 0..self.mode_count() {
            mat[(i, i)] += self.layer[i];
        }
        mat
    }
}

/// Node-major table of the L2(S^{n-1})-orthonormal harmonic basis without
/// the constant mode, plus the degree of each mode.
fn basis_table(dim: usize, lmax: usize, grid: &QuadratureGrid) -> (Vec<f64>, Vec<usize>) {
    let n = grid.len();
    match dim {
        2 => {
            let cb = CircleBasis { degree: lmax };
            let m = cb.count();
            let scale = 1.0 / PI.sqrt();
            let mut tab = vec![0.0; n * m];
            for (a, &node) in grid.nodes.iter().enumerate() {
                let theta = node[1].atan2(node[0]);
                for i in 0..m {
                    tab[a * m + i] = scale * cb.value(i, theta);
                }
            }
            let degrees = (0..m).map(|i| cb.mode(i).0).collect();
            (tab, degrees)
        }
        _ => {
            let sh = sh_basis(lmax);
            let full = sh.count();
            let m = full - 1;
            let mut tab = vec![0.0; n * m];
            let mut buf = vec![0.0; full];
            for (a, &node) in grid.nodes.iter().enumerate() {
                sh.values_unit_all(node, &mut buf);
                tab[a * m..(a + 1) * m].copy_from_slice(&buf[1..]);
            }
            let degrees = sh.modes[1..].iter().map(|&(l, _)| l).collect();
            (tab, degrees)
        }
    }
}

/// Symmetric n x n table of the regular part R(x_a, x_b) over the sphere
/// nodes; the torus route goes through the lattice evaluator.
///
/// The split G = -Gamma + R subtracts the free-space layer at the chord
/// distance |x - y|, but the torus evaluator's regular part is referenced
/// to the nearest-image distance.  Chords longer than half a period would
/// therefore pick up a kinked Gamma mismatch; re-reference the table so
/// the integrand stays analytic on the product sphere.
fn regular_table(domain: &Domain, x: &[[f64; 3]]) -> Result<Vec<f64>> {
    let n = x.len();
    let dim = domain.dim;
    let rows: Vec<Vec<f64>> = match domain.kind {
        DomainKind::Ball => (0..n)
            .into_par_iter()
            .map(|a| {
                (a..n)
                    .map(|b| regular_part_ball_closed(x[a], x[b], domain.radius, dim))
                    .collect()
            })
            .collect(),
        DomainKind::Torus => {
            let ev = GreenEvaluator::new(*domain)?;
            (0..n)
                .into_par_iter()
                .map(|a| {
                    (a..n)
                        .map(|b| {
                            let base = ev.regular_part(x[a], x[b])?;
                            if a == b {
                                return Ok(base);
                            }
                            let d = [x[a][0] - x[b][0], x[a][1] - x[b][1], x[a][2] - x[b][2]];
                            let chord = dot(d, d).sqrt();
                            let w = domain.wrap(d);
                            let nearest = dot(w, w).sqrt();
                            Ok(base + gamma(chord, dim)? - gamma(nearest, dim)?)
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<Vec<f64>>>>()?
        }
    };
    let mut tab = vec![0.0; n * n];
    for a in 0..n {
        for (off, &val) in rows[a].iter().enumerate() {
            let b = a + off;
            tab[a * n + b] = val;
            tab[b * n + a] = val;
        }
    }
    Ok(tab)
}

/// Outward slope of the R part of the potential: grad_x of
/// int_{B_r(p)} R(x, y) dy at each sphere node.  Ball domain by a volume
/// rule with closed-form kernel gradients; torus by the divergence
/// theorem, - oint R(x - y) nu_y dsigma_y, reusing the pair table.
fn regular_potential_slopes(
    domain: &Domain,
    r: f64,
    center: [f64; 3],
    grid: &QuadratureGrid,
    x: &[[f64; 3]],
    rtab: &[f64],
) -> Vec<[f64; 3]> {
    let n = grid.len();
    let dim = domain.dim;
    match domain.kind {
        DomainKind::Torus => {
            let rn1 = r.powi(dim as i32 - 1);
            (0..n)
                .map(|a| {
                    let mut g = [0.0; 3];
                    for b in 0..n {
                        let c = grid.weights[b] * rtab[a * n + b];
                        for k in 0..3 {
                            g[k] -= rn1 * c * grid.nodes[b][k];
                        }
                    }
                    g
                })
                .collect()
        }
        DomainKind::Ball => {
            let nrad = if dim == 2 { 12 } else { 10 };
            let (ts, tw) = gauss_legendre_ab(nrad, 0.0, 1.0);
            let rad_scale = r.powi(dim as i32);
            (0..n)
                .into_par_iter()
                .map(|a| {
                    let xa = x[a];
                    let mut g = [0.0; 3];
                    for b in 0..n {
                        let wb = grid.weights[b];
                        let nb = grid.nodes[b];
                        for q in 0..nrad {
                            let t = ts[q];
                            let y = [
                                center[0] + r * t * nb[0],
                                center[1] + r * t * nb[1],
                                center[2] + r * t * nb[2],
                            ];
                            let (_, f1, _, f3) =
                                ball_reg_kernel(dim, domain.radius, domain.volume, xa, y);
                            let wt = wb * tw[q] * rad_scale * t.powi(dim as i32 - 1);
                            for k in 0..3 {
                                g[k] += wt * (2.0 * f1 * xa[k] + f3 * y[k]);
                            }
                        }
                    }
                    g
                })
                .collect()
        }
    }
}

fn assemble_parts(
    domain: &Domain,
    r: f64,
    center: [f64; 3],
    lmax: usize,
    resolution: usize,
) -> Result<FormParts> {
    let dim = domain.dim;
    check_dim(dim)?;
    if lmax == 0 {
        return Err(Error::Config("harmonic degree must be at least 1".into()));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Config(format!("sphere radius must be positive, got {r}")));
    }
    if dim == 2 && center[2] != 0.0 {
        return Err(Error::Config("planar configuration requires center z = 0".into()));
    }
    match domain.kind {
        DomainKind::Ball => {
            let off = dot(center, center).sqrt();
            if off + r >= domain.radius * (1.0 - 1e-9) {
                return Err(Error::Geometry(format!(
                    "sphere of radius {r} centered {off:.6} from the origin leaves the domain"
                )));
            }
        }
        DomainKind::Torus => {
            if r >= 0.5 * (1.0 - 1e-12) {
                return Err(Error::Geometry(format!(
                    "sphere radius {r} reaches the torus inradius 1/2"
                )));
            }
        }
    }

    // Torus surface tables are analytic with margin 0.5 - r to the nearest
    // lattice image, and the trapezoid error decays like exp(-c (0.5 - r) n),
    // so the default order grows with the radius.  The 3D cap keeps the
    // quadratic-size pair table affordable; pass an explicit resolution to
    // push closer to the inradius.
    let order = if resolution > 0 {
        resolution
    } else {
        let base = (2 * lmax + 12).max(24);
        match domain.kind {
            DomainKind::Ball => base,
            DomainKind::Torus => {
                let need = (10.0 / (0.5 - r)).ceil() as usize;
                let cap = if dim == 2 { 96 } else { 36 };
                base.max(need.min(cap))
            }
        }
    };
    let grid = sphere_quadrature(dim, order);
    let n = grid.len();
    let (btab, degrees) = basis_table(dim, lmax, &grid);
    let m = degrees.len();
    let x: Vec<[f64; 3]> = grid
        .nodes
        .iter()
        .map(|&w| [center[0] + r * w[0], center[1] + r * w[1], center[2] + r * w[2]])
        .collect();

    let rtab = regular_table(domain, &x)?;
    let rn1 = r.powi(dim as i32 - 1);

    // weighted basis, then the half product with the pair table
    let mut wb = vec![0.0; n * m];
    for a in 0..n {
        for i in 0..m {
            wb[a * m + i] = grid.weights[a] * btab[a * m + i];
        }
    }
    let half_rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let mut row = vec![0.0; m];
            for b in 0..n {
                let rv = rtab[a * n + b];
                for j in 0..m {
                    row[j] += rv * wb[b * m + j];
                }
            }
            row
        })
        .collect();
    let half: Vec<f64> = half_rows.into_iter().flatten().collect();
    let mut pair_r = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let mut acc = 0.0;
            for a in 0..n {
                acc += wb[a * m + i] * half[a * m + j];
            }
            let val = rn1 * acc;
            pair_r[(i, j)] = val;
            pair_r[(j, i)] = val;
        }
    }

    let slopes = regular_potential_slopes(domain, r, center, &grid, &x, &rtab);
    let nf = dim as f64;
    let dnu: Vec<f64> = (0..n).map(|a| -r / nf + dot(grid.nodes[a], slopes[a])).collect();
    let mut slope = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let mut acc = 0.0;
            for a in 0..n {
                acc += grid.weights[a] * dnu[a] * btab[a * m + i] * btab[a * m + j];
            }
            slope[(i, j)] = acc;
            slope[(j, i)] = acc;
        }
    }

    let per: Vec<f64> = degrees
        .iter()
        .map(|&l| {
            let lf = l as f64;
            (lf * (lf + nf - 2.0) - (nf - 1.0)) / (r * r)
        })
        .collect();
    let layer: Vec<f64> = degrees
        .iter()
        .map(|&l| {
            let lf = l as f64;
            if dim == 2 {
                r / (2.0 * lf)
            } else {
                r / (2.0 * lf + 1.0)
            }
        })
        .collect();

    Ok(FormParts { degrees, per, layer, pair_r, slope })
}

// ---------------------------------------------------------------------------
// public entry points
// ---------------------------------------------------------------------------

fn spectrum_from(parts: &FormParts, gamma: f64, lmax: usize) -> Result<StabilitySpectrum> {
    let m = parts.mode_count();
    let mut mat = parts.matrix(gamma);
    let mut scale: f64 = 0.0;
    let mut asym: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            scale = scale.max(mat[(i, j)].abs());
            asym = asym.max((mat[(i, j)] - mat[(j, i)]).abs());
        }
    }
    if asym > 1e-10 * (1.0 + scale) {
        return Err(Error::Numerics(format!(
            "second-variation matrix lost symmetry: defect {asym:.3e}"
        )));
    }
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (mat[(i, j)] + mat[(j, i)]);
            mat[(i, j)] = v;
            mat[(j, i)] = v;
        }
    }
    let translation_block: Vec<f64> =
        (0..m).filter(|&i| parts.degrees[i] == 1).map(|i| mat[(i, i)]).collect();

    let es = mat.symmetric_eigen();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| es.eigenvalues[a].partial_cmp(&es.eigenvalues[b]).unwrap());
    let eigenvalues: Vec<f64> = idx.iter().map(|&i| es.eigenvalues[i]).collect();
    let eigenvectors: Vec<Vec<f64>> =
        idx.iter().map(|&i| es.eigenvectors.column(i).iter().copied().collect()).collect();
    let min_nontrivial = eigenvalues[0];
    Ok(StabilitySpectrum {
        basis_degree: lmax,
        eigenvalues,
        eigenvectors,
        min_nontrivial,
        translation_block,
    })
}

/// Assemble and diagonalize the second-variation form at the sphere of
/// radius `r` about `center`.  `lmax` is the harmonic band limit of the
/// perturbation space; `resolution` overrides the surface quadrature
/// order (0 picks a default that over-resolves the band limit).
pub fn second_variation_matrix(
    domain: &Domain,
    params: &ModelParams,
    r: f64,
    center: [f64; 3],
    lmax: usize,
    resolution: usize,
) -> Result<StabilitySpectrum> {
    params.validate(domain)?;
    let parts = assemble_parts(domain, r, center, lmax, resolution)?;
    spectrum_from(&parts, params.gamma, lmax)
}

/// Strict stability of the centered ball in a ball domain: positive
/// second variation over zero-average perturbations up to degree `lmax`.
/// Returns the verdict together with the margin (the smallest eigenvalue,
/// the quantitative stability constant when positive).
pub fn strict_stability_check(
    domain: &Domain,
    params: &ModelParams,
    r: f64,
    lmax: usize,
) -> Result<(bool, f64)> {
    if domain.kind != DomainKind::Ball {
        return Err(Error::Config(
            "strict stability check addresses the centered ball in a ball domain".into(),
        ));
    }
    let spec = second_variation_matrix(domain, params, r, [0.0; 3], lmax, 0)?;
    Ok((spec.min_nontrivial > 0.0, spec.min_nontrivial))
}

/// Smallest gamma at which the centered ball loses strict stability,
/// located by bisection on the smallest eigenvalue.  The form is affine
/// in gamma, so the expensive assembly happens once.  Errors if the ball
/// is still strictly stable at `gamma_hi`.
pub fn stability_onset(
    domain: &Domain,
    r: f64,
    lmax: usize,
    gamma_hi: f64,
    resolution: usize,
) -> Result<f64> {
    if domain.kind != DomainKind::Ball {
        return Err(Error::Config(
            "instability onset addresses the centered ball in a ball domain".into(),
        ));
    }
    if !(gamma_hi > 0.0) || !gamma_hi.is_finite() {
        return Err(Error::Config(format!("gamma_hi must be positive, got {gamma_hi}")));
    }
    let parts = assemble_parts(domain, r, [0.0; 3], lmax, resolution)?;
    let min_eig = |gamma: f64| -> f64 {
        let es = parts.matrix(gamma).symmetric_eigen();
        es.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    };
    if min_eig(gamma_hi) >= 0.0 {
        return Err(Error::Config(format!(
            "no instability onset up to gamma = {gamma_hi}; raise the search bound"
        )));
    }
    let mut lo = 0.0;
    let mut hi = gamma_hi;
    for _ in 0..200 {
        if hi - lo <= 1e-10 * (1.0 + hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if min_eig(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{self, ModelParams};
    use crate::shape::DropletShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // boundary value of the zero-mean ball potential in the unit-ball
    // domain, from the radial ODE
    fn vm_ball(r: f64, dim: usize) -> f64 {
        match dim {
            2 => 0.375 * r.powi(4) - 0.375 * r * r - 0.5 * r * r * r.ln(),
            _ => r * r / 3.0 - 0.6 * r.powi(3) + 4.0 * r.powi(5) / 15.0,
        }
    }

    // per-degree diagonal of the form for the centered ball in the unit
    // ball domain: perimeter part, layer eigenvalue, image-series block of
    // R, and the constant potential slope -(1 - m) r / n
    fn diag_oracle(dim: usize, r: f64, gamma: f64, l: usize) -> f64 {
        let n = dim as f64;
        let lf = l as f64;
        let m = r.powi(dim as i32);
        let per = (lf * (lf + n - 2.0) - (n - 1.0)) / (r * r);
        let (layer, rblk) = match dim {
            2 => (r / (2.0 * lf), r.powi(2 * l as i32 + 1) / (2.0 * lf)),
            _ => (
                r / (2.0 * lf + 1.0),
                (lf + 1.0) * r.powi(2 * l as i32 + 2) / (lf * (2.0 * lf + 1.0)),
            ),
        };
        per + 2.0 * gamma * (layer + rblk - (1.0 - m) * r / n)
    }

    #[test]
    fn perimeter_diag_pins_classical_values() {
        let d3 = perimeter_hessian_diag(1.0, 3, 2).unwrap();
        assert!(d3[0].abs() < 1e-14);
        assert!((d3[1] - 4.0).abs() < 1e-12);
        let d2 = perimeter_hessian_diag(0.5, 2, 2).unwrap();
        assert!(d2[0].abs() < 1e-14);
        assert!((d2[1] - 12.0).abs() < 1e-12);
        // generic entry: k = 3 on the unit circle
        let d = perimeter_hessian_diag(1.0, 2, 3).unwrap();
        assert!((d[2] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_spectrum_reduces_to_perimeter() {
        let dom = Domain::ball(3, 1.0).unwrap();
        let r = 0.35;
        let params = ModelParams::from_droplet_radius(&dom, 0.0, r).unwrap();
        let spec = second_variation_matrix(&dom, &params, r, [0.0; 3], 3, 0).unwrap();
        let per = perimeter_hessian_diag(r, 3, 3).unwrap();
        let mut expected = Vec::new();
        for (i, &v) in per.iter().enumerate() {
            let l = i + 1;
            for _ in 0..(2 * l + 1) {
                expected.push(v);
            }
        }
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(spec.eigenvalues.len(), expected.len());
        for (ev, ex) in spec.eigenvalues.iter().zip(&expected) {
            assert!((ev - ex).abs() < 1e-8 * (1.0 + ex.abs()), "{ev} vs {ex}");
        }
        for &tb in &spec.translation_block {
            assert!(tb.abs() < 1e-8, "translation mode not neutral at gamma = 0: {tb}");
        }
        assert!(spec.min_nontrivial.abs() < 1e-8);
        let groups = spec.degeneracy_groups(DEGENERACY_TOL);
        let mult: Vec<usize> = groups.iter().map(|&(_, c)| c).collect();
        assert_eq!(mult, vec![3, 5, 7]);
    }

    #[test]
    fn centered_ball_matrix_is_diagonal_with_known_entries() {
        for (dim, lmax) in [(2usize, 4usize), (3, 3)] {
            let dom = Domain::ball(dim, 1.0).unwrap();
            let r = 0.3;
            let gamma = 2.0;
            let parts = assemble_parts(&dom, r, [0.0; 3], lmax, 0).unwrap();
            let mat = parts.matrix(gamma);
            let m = parts.mode_count();
            let mut maxdiag: f64 = 0.0;
            for i in 0..m {
                let oracle = diag_oracle(dim, r, gamma, parts.degrees[i]);
                assert!(
                    (mat[(i, i)] - oracle).abs() < 1e-6 * (1.0 + oracle.abs()),
                    "dim {dim} mode {i} (degree {}): {} vs oracle {oracle}",
                    parts.degrees[i],
                    mat[(i, i)]
                );
                maxdiag = maxdiag.max(mat[(i, i)].abs());
            }
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        assert!(
                            mat[(i, j)].abs() < 1e-8 * (1.0 + maxdiag),
                            "off-diagonal leak at ({i}, {j}): {}",
                            mat[(i, j)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn potential_slope_block_reduces_to_its_radial_value() {
        for dim in [2usize, 3] {
            let dom = Domain::ball(dim, 1.0).unwrap();
            let r = 0.3;
            let lmax = if dim == 2 { 4 } else { 3 };
            let parts = assemble_parts(&dom, r, [0.0; 3], lmax, 0).unwrap();
            let m = parts.mode_count();
            let mass = r.powi(dim as i32);
            let expected = -(1.0 - mass) * r / dim as f64;
            for i in 0..m {
                assert!(
                    (parts.slope[(i, i)] - expected).abs() < 1e-6 * (1.0 + expected.abs()),
                    "dim {dim}: slope diag {} vs {expected}",
                    parts.slope[(i, i)]
                );
                for j in 0..m {
                    if i != j {
                        assert!(parts.slope[(i, j)].abs() < 1e-9, "slope off-diagonal leak");
                    }
                }
            }
        }
    }

    #[test]
    fn pair_interaction_block_is_positive_semidefinite() {
        let cases: Vec<(Domain, usize)> =
            vec![(Domain::torus(2).unwrap(), 4), (Domain::ball(3, 1.0).unwrap(), 3)];
        for (dom, lmax) in cases {
            let parts = assemble_parts(&dom, 0.3, [0.0; 3], lmax, 0).unwrap();
            let es = parts.pair_block().symmetric_eigen();
            let min = es.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-8, "pair block lost positivity: {min}");
        }
    }

    #[test]
    fn translation_block_matches_rigid_shift_energy() {
        // ball domain: translating the centered ball costs exactly
        // gamma vol^2 D^2 h(0) = 2 gamma r^{n+1} / R^n per unit L2 norm
        for dim in [2usize, 3] {
            let dom = Domain::ball(dim, 1.0).unwrap();
            let r = 0.25;
            let gamma = 1.5;
            let params = ModelParams::from_droplet_radius(&dom, gamma, r).unwrap();
            let lmax = if dim == 2 { 3 } else { 2 };
            let spec = second_variation_matrix(&dom, &params, r, [0.0; 3], lmax, 0).unwrap();
            let expected = 2.0 * gamma * r.powi(dim as i32 + 1);
            assert_eq!(spec.translation_block.len(), dim);
            for &tb in &spec.translation_block {
                assert!(
                    (tb - expected).abs() < 1e-7 * expected,
                    "dim {dim}: translation value {tb} vs {expected}"
                );
            }
        }
        // torus: translations are exact symmetries and the square lattice
        // has no degree-2 harmonic content, so the block vanishes even
        // though the ball is not a critical point there; the residue is
        // quadrature truncation, which tightens away from the inradius
        let dom = Domain::torus(2).unwrap();
        for (r, bound) in [(0.3, 1e-6), (0.15, 1e-12)] {
            let params = ModelParams::from_droplet_radius(&dom, 2.0, r).unwrap();
            let spec = second_variation_matrix(&dom, &params, r, [0.0; 3], 4, 0).unwrap();
            for &tb in &spec.translation_block {
                assert!(tb.abs() < bound, "torus translation block at r = {r}: {tb}");
            }
        }
    }

    #[test]
    fn quadratic_form_matches_energy_differences() {
        // At the centered ball (a critical point of F - lambda V in the
        // ball domain) the assembled form must reproduce second
        // differences of F - lambda V along radial perturbations.
        let cases = [(2usize, 4usize, 3.0, 0.25, 11u64), (3, 2, 2.0, 0.3, 5)];
        for &(dim, lmax, gamma, r, seed) in &cases {
            let dom = Domain::ball(dim, 1.0).unwrap();
            let params = ModelParams::from_droplet_radius(&dom, gamma, r).unwrap();
            let parts = assemble_parts(&dom, r, [0.0; 3], lmax, 0).unwrap();
            let mat = parts.matrix(gamma);
            let m = parts.mode_count();

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut a {
                *v /= norm;
            }
            let mut q = 0.0;
            for i in 0..m {
                for j in 0..m {
                    q += a[i] * mat[(i, j)] * a[j];
                }
            }

            let n = dim as f64;
            let lambda = (n - 1.0) / r + 2.0 * gamma * vm_ball(r, dim);
            // L2-orthonormal basis on the sphere of radius r vs the plain
            // shape coefficients
            let coeff_scale = match dim {
                2 => 1.0 / (PI * r).sqrt(),
                _ => 1.0 / r,
            };
            let j_at = |t: f64| -> f64 {
                let coeffs: Vec<f64> = a.iter().map(|&ai| t * ai * coeff_scale).collect();
                let shape = DropletShape::new(dim, [0.0; 3], r, lmax, coeffs).unwrap();
                let br = energy::total_energy(&dom, &params, &shape, 0).unwrap();
                br.total - lambda * br.volume
            };
            let j0 = j_at(0.0);
            let fd2 = |t: f64| (j_at(t) - 2.0 * j0 + j_at(-t)) / (t * t);
            let t = 5e-3;
            let fd = (4.0 * fd2(0.5 * t) - fd2(t)) / 3.0;
            assert!(
                (fd - q).abs() < 1e-4 * q.abs().max(1.0),
                "dim {dim}: finite difference {fd} vs form value {q}"
            );
        }
    }

    #[test]
    fn instability_onset_found_by_bisection() {
        // the degree-2 diagonal crosses zero first; the oracle root comes
        // from the same closed forms the diagonal test pins
        for (dim, lmax) in [(2usize, 4usize), (3, 3)] {
            let dom = Domain::ball(dim, 1.0).unwrap();
            let r = 0.3;
            let per2 = diag_oracle(dim, r, 0.0, 2);
            let slope2 = (diag_oracle(dim, r, 1.0, 2) - per2) / 2.0;
            assert!(slope2 < 0.0);
            let oracle = -per2 / (2.0 * slope2);
            let found = stability_onset(&dom, r, lmax, 2000.0, 0).unwrap();
            assert!(
                (found - oracle).abs() < 1e-4 * oracle,
                "dim {dim}: onset {found} vs oracle {oracle}"
            );
            let window = if dim == 2 { (268.0, 280.0) } else { (590.0, 610.0) };
            assert!(found > window.0 && found < window.1, "dim {dim}: onset {found}");

            let below = ModelParams::from_droplet_radius(&dom, 0.95 * found, r).unwrap();
            let (stable, margin) = strict_stability_check(&dom, &below, r, lmax).unwrap();
            assert!(stable && margin > 0.0);
            let above = ModelParams::from_droplet_radius(&dom, 1.05 * found, r).unwrap();
            let (stable, margin) = strict_stability_check(&dom, &above, r, lmax).unwrap();
            assert!(!stable && margin < 0.0);
        }
    }

    #[test]
    fn eigenvectors_are_orthonormal_and_groups_report_multiplets() {
        let dom = Domain::ball(3, 1.0).unwrap();
        let r = 0.3;
        let params = ModelParams::from_droplet_radius(&dom, 2.0, r).unwrap();
        let spec = second_variation_matrix(&dom, &params, r, [0.0; 3], 3, 0).unwrap();
        let m = spec.eigenvalues.len();
        for i in 0..m {
            for j in 0..m {
                let dot: f64 =
                    spec.eigenvectors[i].iter().zip(&spec.eigenvectors[j]).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((dot - target).abs() < 1e-10, "eigenvector overlap ({i}, {j}) = {dot}");
            }
        }
        let groups = spec.degeneracy_groups(DEGENERACY_TOL);
        assert_eq!(groups[0].1, 3, "translation triplet");
        assert_eq!(groups[1].1, 5, "degree-2 quintet");
        // ascending eigenvalues
        for w in spec.eigenvalues.windows(2) {
            assert!(w[0] <= w[1] + 1e-14);
        }
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let ball = Domain::ball(2, 1.0).unwrap();
        let params = ModelParams::from_droplet_radius(&ball, 1.0, 0.3).unwrap();
        let err = second_variation_matrix(&ball, &params, 0.3, [0.75, 0.0, 0.0], 3, 0);
        assert!(matches!(err, Err(Error::Geometry(_))));
        let err = second_variation_matrix(&ball, &params, 0.3, [0.0; 3], 0, 0);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = second_variation_matrix(&ball, &params, 0.3, [0.1, 0.0, 0.2], 3, 0);
        assert!(matches!(err, Err(Error::Config(_))));

        let torus = Domain::torus(2).unwrap();
        let tparams = ModelParams::from_droplet_radius(&torus, 1.0, 0.3).unwrap();
        let err = strict_stability_check(&torus, &tparams, 0.3, 3);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = second_variation_matrix(&torus, &tparams, 0.52, [0.0; 3], 3, 0);
        assert!(matches!(err, Err(Error::Geometry(_))));
    }
}
