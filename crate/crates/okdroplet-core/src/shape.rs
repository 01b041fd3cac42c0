//! Star-shaped droplets: boundary parametrized over the unit sphere as
//! p + (r + phi(x)) x, with phi band-limited in a Fourier (n=2) or real
//! spherical-harmonic (n=3) basis. The constant mode is excluded from the
//! coefficient vector; dilations act through base_radius only.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::domain::{unit_ball_volume, QuadratureGrid};
use crate::numerics::harmonics::{CircleBasis, SphereHarmonics};
use crate::{Error, Result};

/// Relative floor for r + phi at quadrature nodes: below this the radial
/// parametrization is considered degenerate.
pub const STAR_FLOOR: f64 = 1e-6;

/// Shared spherical-harmonic tables, keyed by degree. Construction builds
/// polynomial gradients/Hessians, so reuse matters in hot loops.
pub fn sh_basis(degree: usize) -> Arc<SphereHarmonics> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<SphereHarmonics>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap();
    map.entry(degree).or_insert_with(|| Arc::new(SphereHarmonics::new(degree))).clone()
}

/// Number of coefficients of a degree-L shape: 2L Fourier modes in the
/// plane, (L+1)^2 - 1 spherical harmonics in space (constant mode dropped).
pub fn coeff_count(dim: usize, degree: usize) -> usize {
    match dim {
        2 => 2 * degree,
        3 => (degree + 1) * (degree + 1) - 1,
        _ => panic!("dimension {dim} not supported"),
    }
}

/// Coefficient slots that move the droplet rather than deform it
/// (wavenumber 1 / degree l = 1) at first order.
pub fn translation_mode_indices(dim: usize, degree: usize) -> Vec<usize> {
    if degree == 0 {
        return Vec::new();
    }
    match dim {
        2 => vec![0, 1],
        3 => vec![0, 1, 2],
        _ => panic!("dimension {dim} not supported"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropletShape {
    pub dim: usize,
    /// Center of the parametrization (z component unused when dim = 2).
    pub center: [f64; 3],
    pub base_radius: f64,
    pub degree: usize,
    /// Fourier layout [cos t, sin t, cos 2t, sin 2t, ...] (dim 2) or
    /// spherical-harmonic layout indexed by l^2 + l + m - 1 (dim 3).
    pub coeffs: Vec<f64>,
}

impl DropletShape {
    pub fn new(
        dim: usize,
        center: [f64; 3],
        base_radius: f64,
        degree: usize,
        coeffs: Vec<f64>,
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")));
        }
        if !(base_radius > 0.0) || !base_radius.is_finite() {
            return Err(Error::Config(format!("base radius must be positive, got {base_radius}")));
        }
        let want = coeff_count(dim, degree);
        if coeffs.len() != want {
            return Err(Error::Config(format!(
                "degree {degree} needs {want} coefficients in dimension {dim}, got {}",
                coeffs.len()
            )));
        }
        Ok(DropletShape { dim, center, base_radius, degree, coeffs })
    }

    /// The ball B_r(p): zero coefficient vector at the requested degree.
    pub fn ball_at(dim: usize, center: [f64; 3], radius: f64, degree: usize) -> Result<Self> {
        DropletShape::new(dim, center, radius, degree, vec![0.0; coeff_count(dim, degree)])
    }

    pub fn is_ball(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// Dilation about the center: the radial graph scaled by t > 0.
    pub fn scaled(&self, t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Config(format!("dilation factor must be positive, got {t}")));
        }
        DropletShape::new(
            self.dim,
            self.center,
            self.base_radius * t,
            self.degree,
            self.coeffs.iter().map(|c| c * t).collect(),
        )
    }

    /// phi evaluated at a unit direction.
    pub fn phi_at(&self, xhat: [f64; 3]) -> f64 {
        match self.dim {
            2 => {
                let theta = xhat[1].atan2(xhat[0]);
                let basis = CircleBasis { degree: self.degree };
                self.coeffs.iter().enumerate().map(|(i, &c)| c * basis.value(i, theta)).sum()
            }
            _ => {
                let sh = sh_basis(self.degree);
                let mut vals = vec![0.0; sh.count()];
                sh.values_unit_all(xhat, &mut vals);
                self.coeffs.iter().zip(&vals[1..]).map(|(&c, &v)| c * v).sum()
            }
        }
    }

    pub fn radius_at(&self, xhat: [f64; 3]) -> f64 {
        self.base_radius + self.phi_at(xhat)
    }

    /// Tangential gradient of phi on S^{n-1} (ambient 3-vector, tangent to
    /// the sphere; the z component is 0 in dimension 2).
    pub fn phi_surface_gradient(&self, xhat: [f64; 3]) -> [f64; 3] {
        match self.dim {
            2 => {
                let theta = xhat[1].atan2(xhat[0]);
                let basis = CircleBasis { degree: self.degree };
                let dp: f64 =
                    self.coeffs.iter().enumerate().map(|(i, &c)| c * basis.dtheta(i, theta)).sum();
                [-dp * xhat[1], dp * xhat[0], 0.0]
            }
            _ => {
                let sh = sh_basis(self.degree);
                let mut g = [0.0; 3];
                for (i, &c) in self.coeffs.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    let gi = sh.surface_gradient(i + 1, xhat);
                    g[0] += c * gi[0];
                    g[1] += c * gi[1];
                    g[2] += c * gi[2];
                }
                g
            }
        }
    }

    /// Smallest r + phi over the grid nodes.
    pub fn min_radius(&self, grid: &QuadratureGrid) -> f64 {
        grid.nodes.iter().map(|&x| self.radius_at(x)).fold(f64::INFINITY, f64::min)
    }

    /// Star-shapedness guard: r + phi >= STAR_FLOOR * r at every node.
    pub fn validate(&self, grid: &QuadratureGrid) -> Result<()> {
        let min = self.min_radius(grid);
        if min < STAR_FLOOR * self.base_radius {
            return Err(Error::Geometry(format!(
                "radial parametrization degenerate: min(r + phi) = {min:.3e} with r = {}",
                self.base_radius
            )));
        }
        Ok(())
    }

    /// Lebesgue measure, integral over S^{n-1} of (r + phi)^n / n.
    pub fn volume(&self, grid: &QuadratureGrid) -> Result<f64> {
        self.validate(grid)?;
        let n = self.dim as f64;
        Ok(grid.integrate(|x| self.radius_at(x).powi(self.dim as i32) / n))
    }

    /// Surface measure, integral of rho^{n-2} sqrt(rho^2 + |grad_S rho|^2).
    pub fn perimeter(&self, grid: &QuadratureGrid) -> Result<f64> {
        self.validate(grid)?;
        Ok(grid.integrate(|x| {
            let rho = self.radius_at(x);
            let g = self.phi_surface_gradient(x);
            let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
            rho.powi(self.dim as i32 - 2) * (rho * rho + g2).sqrt()
        }))
    }

    /// Volume centroid.
    pub fn barycenter(&self, grid: &QuadratureGrid) -> Result<[f64; 3]> {
        let vol = self.volume(grid)?;
        let np1 = self.dim as f64 + 1.0;
        let mut out = [0.0; 3];
        for (&x, &w) in grid.nodes.iter().zip(&grid.weights) {
            let s = w * self.radius_at(x).powi(self.dim as i32 + 1) / np1;
            out[0] += s * x[0];
            out[1] += s * x[1];
            out[2] += s * x[2];
        }
        Ok([
            self.center[0] + out[0] / vol,
            self.center[1] + out[1] / vol,
            self.center[2] + out[2] / vol,
        ])
    }

    /// Scalar mean curvature (divergence of the outer unit normal) at the
    /// surface point over the given unit direction. Ball: (n-1)/r > 0.
    pub fn mean_curvature(&self, node: [f64; 3]) -> Result<f64> {
        let rho = self.radius_at(node);
        if rho < STAR_FLOOR * self.base_radius {
            return Err(Error::Geometry(format!(
                "radial parametrization degenerate at node: r + phi = {rho:.3e}"
            )));
        }
        match self.dim {
            2 => {
                let theta = node[1].atan2(node[0]);
                let basis = CircleBasis { degree: self.degree };
                let mut d1 = 0.0;
                let mut d2 = 0.0;
                for (i, &c) in self.coeffs.iter().enumerate() {
                    let (k, _) = basis.mode(i);
                    d1 += c * basis.dtheta(i, theta);
                    d2 -= c * (k * k) as f64 * basis.value(i, theta);
                }
                let s = rho * rho + d1 * d1;
                Ok((rho * rho + 2.0 * d1 * d1 - rho * d2) / s.powf(1.5))
            }
            _ => Ok(self.mean_curvature_3d(node, rho)),
        }
    }

    /// Level-set route: F(y) = |y| - r - sum c_i Y_i(y)|y|^{-l_i} vanishes on
    /// the boundary; H = div(grad F / |grad F|). Polynomial harmonics give
    /// exact derivatives; everything is evaluated at the unit direction and
    /// rescaled by homogeneity, so no large powers of |y| appear.
    fn mean_curvature_3d(&self, xhat: [f64; 3], rho: f64) -> f64 {
        let sh = sh_basis(self.degree);
        let mut grad = [xhat[0], xhat[1], xhat[2]];
        // Hessian of |y| at y = rho * xhat: (Id - xhat xhat^T) / rho
        let mut hess = [[0.0f64; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                hess[a][b] = (((a == b) as u8) as f64 - xhat[a] * xhat[b]) / rho;
            }
        }
        for (idx, &c) in self.coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let i = idx + 1;
            let l = sh.modes[i].0 as f64;
            let y = sh.polys[i].eval(xhat);
            let gy =
                [sh.grads[i][0].eval(xhat), sh.grads[i][1].eval(xhat), sh.grads[i][2].eval(xhat)];
            // grad of Y |y|^{-l} at rho * xhat, by homogeneity of Y and |y|
            for a in 0..3 {
                grad[a] -= c * (gy[a] - l * y * xhat[a]) / rho;
            }
            let hy = &sh.hess[i];
            let pick = [[0usize, 1, 2], [1, 3, 4], [2, 4, 5]];
            for a in 0..3 {
                for b in 0..3 {
                    let hab = hy[pick[a][b]].eval(xhat);
                    let id = ((a == b) as u8) as f64;
                    let t = hab
                        - l * (gy[a] * xhat[b] + gy[b] * xhat[a])
                        - l * y * (id - (l + 2.0) * xhat[a] * xhat[b]);
                    hess[a][b] -= c * t / (rho * rho);
                }
            }
        }
        let norm = (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]).sqrt();
        let nhat = [grad[0] / norm, grad[1] / norm, grad[2] / norm];
        let mut trace = 0.0;
        let mut quad = 0.0;
        for a in 0..3 {
            trace += hess[a][a];
            for b in 0..3 {
                quad += nhat[a] * hess[a][b] * nhat[b];
            }
        }
        (trace - quad) / norm
    }

    /// Sup-norms of phi and its surface gradient over the grid nodes,
    /// combined two ways (pointwise sum; radius-weighted gradient).
    pub fn c1_norm(&self, grid: &QuadratureGrid) -> C1Norm {
        let mut sup_phi: f64 = 0.0;
        let mut sup_grad: f64 = 0.0;
        let mut pointwise: f64 = 0.0;
        for &x in &grid.nodes {
            let p = self.phi_at(x).abs();
            let g = self.phi_surface_gradient(x);
            let gn = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            sup_phi = sup_phi.max(p);
            sup_grad = sup_grad.max(gn);
            pointwise = pointwise.max(p + gn);
        }
        C1Norm {
            sup_phi,
            sup_grad,
            unweighted: pointwise,
            weighted: sup_phi + self.base_radius * sup_grad,
        }
    }
}

/// C1 size of the boundary graph. `unweighted` is max over nodes of
/// |phi| + |grad_S phi|; `weighted` rescales the gradient by r.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct C1Norm {
    pub sup_phi: f64,
    pub sup_grad: f64,
    pub unweighted: f64,
    pub weighted: f64,
}

/// |E intersect B_R(c)| by radial integration about the shape center: along
/// each ray the ball cuts out one interval with closed-form endpoints, so
/// the only error is the angular quadrature.
pub fn ball_overlap(
    shape: &DropletShape,
    ball_center: [f64; 3],
    ball_radius: f64,
    grid: &QuadratureGrid,
) -> Result<f64> {
    shape.validate(grid)?;
    let d = [
        ball_center[0] - shape.center[0],
        ball_center[1] - shape.center[1],
        ball_center[2] - shape.center[2],
    ];
    let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let n = shape.dim as f64;
    Ok(grid.integrate(|x| {
        let proj = x[0] * d[0] + x[1] * d[1] + x[2] * d[2];
        let disc = proj * proj - d2 + ball_radius * ball_radius;
        if disc <= 0.0 {
            return 0.0;
        }
        let rho = shape.radius_at(x);
        let a = (proj - disc.sqrt()).clamp(0.0, rho);
        let b = (proj + disc.sqrt()).clamp(0.0, rho);
        (b.powf(n) - a.powf(n)) / n
    }))
}

/// |E symmetric-difference B_R(c)|.
pub fn symmetric_difference(
    shape: &DropletShape,
    ball_center: [f64; 3],
    ball_radius: f64,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let ve = shape.volume(grid)?;
    let vb = unit_ball_volume(shape.dim) * ball_radius.powi(shape.dim as i32);
    let overlap = ball_overlap(shape, ball_center, ball_radius, grid)?;
    Ok((ve + vb - 2.0 * overlap).max(0.0))
}

/// |A sym-diff B| for two radial graphs over the same center, by the exact
/// per-ray formula. Errors if the centers differ: crossing graphs over
/// distinct centers have no per-ray representation.
pub fn symmetric_difference_graphs(
    a: &DropletShape,
    b: &DropletShape,
    grid: &QuadratureGrid,
) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Config("dimension mismatch between shapes".into()));
    }
    let off: f64 =
        a.center.iter().zip(&b.center).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    if off > 1e-12 {
        return Err(Error::Geometry(format!(
            "symmetric difference of graphs needs a common center; centers are {off:.3e} apart"
        )));
    }
    a.validate(grid)?;
    b.validate(grid)?;
    let n = a.dim as i32;
    Ok(grid.integrate(|x| {
        (a.radius_at(x).powi(n) - b.radius_at(x).powi(n)).abs() / n as f64
    }))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AsymmetryResult {
    /// min over centers of |E sym-diff (c + B)| / |B|, B the ball with the
    /// volume of E. Always in [0, 2].
    pub alpha: f64,
    pub optimal_center: [f64; 3],
}

/// Frankel asymmetry by multi-start simplex descent over the ball center,
/// seeded at the barycenter and coordinate perturbations of it.
pub fn frankel_asymmetry(shape: &DropletShape, grid: &QuadratureGrid) -> Result<AsymmetryResult> {
    let vol = shape.volume(grid)?;
    let r_e = (vol / unit_ball_volume(shape.dim)).powf(1.0 / shape.dim as f64);
    let bary = shape.barycenter(grid)?;
    let dim = shape.dim;

    let objective = |c: &[f64]| -> f64 {
        let center = [c[0], c[1], if dim == 3 { c[2] } else { 0.0 }];
        symmetric_difference(shape, center, r_e, grid).map(|s| s / vol).unwrap_or(f64::INFINITY)
    };

    let mut starts = vec![bary];
    for axis in 0..dim {
        for sign in [-1.0, 1.0] {
            let mut s = bary;
            s[axis] += sign * 0.2 * r_e;
            starts.push(s);
        }
    }

    let mut best = (f64::INFINITY, bary);
    for s in starts {
        let x0: Vec<f64> = s[..dim].to_vec();
        let (x, f) = nelder_mead(&objective, &x0, 0.05 * r_e, 400, 1e-12);
        if f < best.0 {
            best = (f, [x[0], x[1], if dim == 3 { x[2] } else { 0.0 }]);
        }
    }
    Ok(AsymmetryResult { alpha: best.0.clamp(0.0, 2.0), optimal_center: best.1 })
}

/// Plain Nelder-Mead over R^d. Returns (argmin, min). Deterministic;
/// terminates on simplex diameter or value spread below tol.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    start: &[f64],
    step: f64,
    max_iter: usize,
    tol: f64,
) -> (Vec<f64>, f64) {
    let d = start.len();
    let mut pts: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..d {
        let mut p = start.to_vec();
        p[i] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();

    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let pts2: Vec<Vec<f64>> = order.iter().map(|&i| pts[i].clone()).collect();
        let vals2: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
        pts = pts2;
        vals = vals2;

        let spread = vals[d] - vals[0];
        let diam: f64 = (0..d)
            .map(|k| {
                pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max)
                    - pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        if spread < tol && diam < tol {
            break;
        }

        let mut centroid = vec![0.0; d];
        for p in &pts[..d] {
            for k in 0..d {
                centroid[k] += p[k] / d as f64;
            }
        }
        let lerp = |t: f64| -> Vec<f64> {
            (0..d).map(|k| centroid[k] + t * (pts[d][k] - centroid[k])).collect()
        };

        let xr = lerp(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = lerp(-2.0);
            let fe = f(&xe);
            if fe < fr {
                pts[d] = xe;
                vals[d] = fe;
            } else {
                pts[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            pts[d] = xr;
            vals[d] = fr;
        } else {
            let xc = lerp(if fr < vals[d] { -0.5 } else { 0.5 });
            let fc = f(&xc);
            if fc < vals[d].min(fr) {
                pts[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    for k in 0..d {
                        pts[i][k] = 0.5 * (pts[i][k] + pts[0][k]);
                    }
                    vals[i] = f(&pts[i]);
                }
            }
        }
    }
    let mut besti = 0;
    for i in 1..=d {
        if vals[i] < vals[besti] {
            besti = i;
        }
    }
    (pts[besti].clone(), vals[besti])
}

/// Quadrature resolution that integrates the products appearing in volume,
/// perimeter, and energy integrands of a degree-L shape to roundoff for
/// mildly sized coefficients.
pub fn default_grid(dim: usize, degree: usize) -> QuadratureGrid {
    crate::domain::sphere_quadrature(dim, 2 * degree + 16)
}
