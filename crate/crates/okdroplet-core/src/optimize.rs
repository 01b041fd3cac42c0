//! Volume-constrained minimization over star-shaped droplets and the
//! first-order optimality residual.
//!
//! A volume-constrained critical point satisfies H + 2 gamma v = const on
//! the droplet boundary, where H is the scalar mean curvature (sum of the
//! principal curvatures) and v is the zero-mean Neumann potential driven
//! by the droplet indicator.  `el_residual` measures the deviation from
//! that condition on a boundary grid; `minimize` runs a projected,
//! diagonally preconditioned line-search descent on the penalized energy
//! and reports the residual of its final iterate.
//!
//! The descent differentiates the quadrature: every energy term below is a
//! fixed discrete functional of the coefficient vector and the gradient is
//! the exact derivative of that functional, not a sampled continuous shape
//! derivative.  All quadrature tables are frozen when the operator is
//! built, so the discrete energy stays smooth along the whole descent path
//! and central differences reproduce the gradient to truncation error.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{sphere_quadrature, Domain, DomainKind, QuadratureGrid};
use crate::energy::{self, ModelParams};
use crate::greens::regular_part_ball_closed;
use crate::numerics::gauss::gauss_legendre_ab;
use crate::numerics::harmonics::CircleBasis;
use crate::shape::{default_grid, sh_basis, DropletShape, STAR_FLOOR};
use crate::{Error, Result};

/// Residual level below which a minimizer counts as converged.
pub const DEFAULT_EL_TOL: f64 = 1e-4;

// Operator cutoffs used during descent; the final residual check runs at
// the (larger) energy-module defaults, so descent accuracy only has to be
// good enough for the line search, not for the reported numbers.
const OP_TORUS_CUTOFF_2D: usize = 32;
const OP_TORUS_CUTOFF_3D: usize = 12;
const EL_BALL_GAMMA_ORDER_2D: usize = 48;
const EL_BALL_GAMMA_ORDER_3D: usize = 32;
const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ELReport {
    /// Lagrange multiplier estimate: area-weighted mean of H + 2 gamma v.
    pub multiplier: f64,
    /// Sup norm of H + 2 gamma v - multiplier over the boundary grid.
    pub residual_linf: f64,
    /// Area-weighted L2 norm of the same deviation.
    pub residual_l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Projected gradient below gtol, or the stall point passed the
    /// residual test.
    Stationary,
    MaxIterations,
    /// Armijo search ran out of backtracks on valid candidates; progress is
    /// below floating-point resolution of the merit.
    LineSearchStall,
    /// Every trial candidate violated star-shapedness or containment; the
    /// last valid iterate is reported.
    StarShapeLoss,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinimizeResult {
    pub shape: DropletShape,
    pub energy: energy::EnergyBreakdown,
    pub el: ELReport,
    /// Accepted descent steps.
    pub iterations: usize,
    /// True when the final residual_linf is below the requested tolerance.
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Merit (energy plus volume penalty) after every accepted step;
    /// non-increasing by construction of the line search.
    pub history: Vec<f64>,
    /// Smallest principal curvature over the boundary grid; nonnegative
    /// means the reported droplet is convex.  Reported, never enforced.
    pub min_curvature: f64,
    /// |volume - target| of the reported shape.
    pub volume_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Residual tolerance defining `converged`.
    pub tol: f64,
    /// Sup-norm stop on the volume-projected gradient.
    pub gtol: f64,
    /// Initial trial step; 0 picks one from the direction scale.
    pub step0: f64,
    /// Operator resolution: torus Fourier cutoff or ball surface order.
    /// 0 picks the descent defaults.
    pub resolution: usize,
    /// Resolution forwarded to the final `el_residual`; 0 = defaults.
    pub el_resolution: usize,
    /// Exact dilation back to the target volume every this many steps.
    pub rescale_every: usize,
    /// Volume penalty weight; 0 picks `energy::default_penalty`.
    pub penalty: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iters: 400,
            tol: DEFAULT_EL_TOL,
            gtol: 1e-9,
            step0: 0.0,
            resolution: 0,
            el_resolution: 0,
            rescale_every: 10,
            penalty: 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// small vector helpers
// ---------------------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn linf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

// ---------------------------------------------------------------------------
// regular-part kernel with closed-form first derivatives
// ---------------------------------------------------------------------------

/// Regular part of the ball Green function as a symmetric function of
/// (|x|^2, |y|^2, x.y), together with its partial derivatives f1, f2, f3
/// with respect to those three scalars.  Gradients in x and y follow as
/// grad_x = 2 f1 x + f3 y and grad_y = 2 f2 y + f3 x; both endpoint
/// gradients of a pair cost one kernel evaluation.
pub(crate) fn ball_reg_kernel(
    dim: usize,
    radius: f64,
    volume: f64,
    x: [f64; 3],
    y: [f64; 3],
) -> (f64, f64, f64, f64) {
    let rx2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
    let ry2 = y[0] * y[0] + y[1] * y[1] + y[2] * y[2];
    let dotxy = x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    let r2 = radius * radius;
    let quad_c = 1.0 / (2.0 * dim as f64 * volume);
    match dim {
        2 => {
            let arg = 1.0 - 2.0 * dotxy / r2 + rx2 * ry2 / (r2 * r2);
            let val = (rx2 + ry2) * quad_c - arg.ln() / (4.0 * PI) + radius.ln() / (2.0 * PI)
                - 3.0 / (8.0 * PI);
            let f1 = quad_c - (ry2 / (r2 * r2)) / (4.0 * PI * arg);
            let f2 = quad_c - (rx2 / (r2 * r2)) / (4.0 * PI * arg);
            let f3 = 1.0 / (2.0 * PI * r2 * arg);
            (val, f1, f2, f3)
        }
        _ => {
            let dstar = (r2 - 2.0 * dotxy + rx2 * ry2 / r2).sqrt();
            let w = r2 - dotxy + radius * dstar;
            let series = (1.0 / dstar - 1.0 / radius + (2.0 * r2 / w).ln() / radius) / (4.0 * PI);
            let val = (rx2 + ry2) * quad_c + series - 9.0 / (20.0 * PI * radius);
            let dvdd = -(1.0 / (dstar * dstar) + 1.0 / w) / (4.0 * PI);
            let f1 = quad_c + dvdd * ry2 / (2.0 * r2 * dstar);
            let f2 = quad_c + dvdd * rx2 / (2.0 * r2 * dstar);
            let f3 = 1.0 / (4.0 * PI * radius * w) - dvdd / dstar;
            (val, f1, f2, f3)
        }
    }
}

// ---------------------------------------------------------------------------
// torus nonlocal operator: frozen Fourier-mode angle tables
// ---------------------------------------------------------------------------

struct TorusTable {
    dirs: Vec<[f64; 3]>,
    w: Vec<f64>,
    /// Basis values at the table nodes, node-major: psi[j * m + i].
    psi: Vec<f64>,
    offset: usize,
}

struct TorusRay {
    kf: [f64; 3],
    coef: f64,
    table: usize,
}

struct TorusNl {
    dim: usize,
    m: usize,
    /// Largest radius the frozen tables resolve; evaluations beyond it
    /// are rejected so the discrete functional never changes under foot.
    budget: f64,
    tables: Vec<TorusTable>,
    total_nodes: usize,
    rays: Vec<TorusRay>,
}

impl TorusNl {
    fn new(dim: usize, degree: usize, m: usize, cutoff: usize, budget: f64) -> Result<Self> {
        if !(budget > 0.0) || budget >= 0.5 {
            return Err(Error::Geometry(format!(
                "torus droplet radius budget {budget:.3} must sit inside the fundamental cell"
            )));
        }
        let deg = degree as f64;
        let mut tables: Vec<TorusTable> = Vec::new();
        let mut by_size: BTreeMap<usize, usize> = BTreeMap::new();
        let mut rays = Vec::new();
        let mut offset = 0usize;
        let sh = if dim == 3 { Some(sh_basis(degree)) } else { None };
        for k in energy::half_lattice(dim, cutoff as i64) {
            let k2 = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64;
            let knorm = k2.sqrt();
            let key = if dim == 2 {
                let band = 1.35 * 2.0 * PI * knorm * budget + 8.0 * deg + 48.0;
                (band.ceil() as usize).next_multiple_of(2)
            } else {
                let o = (0.55 * 2.0 * PI * knorm * budget).ceil() as usize + 2 * degree + 10;
                o.next_multiple_of(4)
            };
            let table = *by_size.entry(key).or_insert_with(|| {
                let (dirs, w) = if dim == 2 {
                    let n = key;
                    let mut dirs = Vec::with_capacity(n);
                    for j in 0..n {
                        let th = 2.0 * PI * (j as f64 + 0.5) / n as f64;
                        dirs.push([th.cos(), th.sin(), 0.0]);
                    }
                    (dirs, vec![2.0 * PI / n as f64; n])
                } else {
                    let g = sphere_quadrature(3, key);
                    (g.nodes, g.weights)
                };
                let n = dirs.len();
                let mut psi = vec![0.0; n * m];
                match &sh {
                    None => {
                        let basis = CircleBasis { degree };
                        for (j, d) in dirs.iter().enumerate() {
                            let th = d[1].atan2(d[0]);
                            for i in 0..m {
                                psi[j * m + i] = basis.value(i, th);
                            }
                        }
                    }
                    Some(sh) => {
                        let mut vals = vec![0.0; sh.count()];
                        for (j, d) in dirs.iter().enumerate() {
                            sh.values_unit_all(*d, &mut vals);
                            psi[j * m..(j + 1) * m].copy_from_slice(&vals[1..m + 1]);
                        }
                    }
                }
                let idx = tables.len();
                tables.push(TorusTable { dirs, w, psi, offset });
                offset += n;
                idx
            });
            rays.push(TorusRay {
                kf: [k[0] as f64, k[1] as f64, k[2] as f64],
                coef: 2.0 / (4.0 * PI * PI * k2),
                table,
            });
        }
        Ok(TorusNl { dim, m, budget, tables, total_nodes: offset, rays })
    }

    /// Radii at every table node; errors reject the candidate (line
    /// searches treat that as an Armijo failure, not a fatal state).
    fn radii(&self, base: f64, coeffs: &[f64]) -> Result<Vec<f64>> {
        let mut rho = vec![0.0; self.total_nodes];
        for tab in &self.tables {
            for j in 0..tab.dirs.len() {
                let mut r = base;
                let row = &tab.psi[j * self.m..(j + 1) * self.m];
                for (c, p) in coeffs.iter().zip(row) {
                    r += c * p;
                }
                if !r.is_finite() || r <= 0.0 {
                    return Err(Error::Geometry("radial profile collapsed".into()));
                }
                if r > self.budget {
                    return Err(Error::Numerics(format!(
                        "radius {r:.4} exceeds the frozen table budget {:.4}",
                        self.budget
                    )));
                }
                rho[tab.offset + j] = r;
            }
        }
        Ok(rho)
    }

    /// Value and exact coefficient gradient of the truncated mode sum
    /// sum_k coef_k |S_k|^2.  The center never enters: the operator is
    /// translation invariant by construction.
    fn eval(&self, base: f64, coeffs: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let rho = self.radii(base, coeffs)?;
        let nm1 = self.dim as i32 - 1;
        let parts: Vec<(f64, Vec<f64>)> = self
            .rays
            .par_chunks(96)
            .map(|chunk| {
                let mut val = 0.0;
                let mut draw = if want_grad { vec![0.0; self.total_nodes] } else { Vec::new() };
                for ray in chunk {
                    let tab = &self.tables[ray.table];
                    let mut s = Complex::new(0.0, 0.0);
                    for (j, d) in tab.dirs.iter().enumerate() {
                        let a = 2.0
                            * PI
                            * (ray.kf[0] * d[0] + ray.kf[1] * d[1] + ray.kf[2] * d[2]);
                        let r = rho[tab.offset + j];
                        let t = if self.dim == 2 {
                            energy::radial_transform_2d(a, r)
                        } else {
                            energy::radial_transform_3d(a, r)
                        };
                        s += t * tab.w[j];
                    }
                    val += ray.coef * s.norm_sqr();
                    if want_grad {
                        for (j, d) in tab.dirs.iter().enumerate() {
                            let a = 2.0
                                * PI
                                * (ray.kf[0] * d[0] + ray.kf[1] * d[1] + ray.kf[2] * d[2]);
                            let r = rho[tab.offset + j];
                            let ph = Complex::from_polar(1.0, -a * r);
                            draw[tab.offset + j] +=
                                ray.coef * 2.0 * (s.conj() * ph).re * tab.w[j] * r.powi(nm1);
                        }
                    }
                }
                (val, draw)
            })
            .collect();
        // sequential merge keeps the sum bit-stable under rayon
        let mut val = 0.0;
        let mut grad = vec![0.0; if want_grad { self.m } else { 0 }];
        if want_grad {
            let mut draw = vec![0.0; self.total_nodes];
            for (v, d) in &parts {
                val += v;
                for (acc, x) in draw.iter_mut().zip(d) {
                    *acc += x;
                }
            }
            for tab in &self.tables {
                for j in 0..tab.dirs.len() {
                    let dj = draw[tab.offset + j];
                    if dj != 0.0 {
                        let row = &tab.psi[j * self.m..(j + 1) * self.m];
                        for (g, p) in grad.iter_mut().zip(row) {
                            *g += dj * p;
                        }
                    }
                }
            }
        } else {
            for (v, _) in &parts {
                val += v;
            }
        }
        Ok((val, grad))
    }

    /// Per-ray indicator transforms S_k, for potential evaluation.
    fn ray_sums(&self, base: f64, coeffs: &[f64]) -> Result<Vec<Complex<f64>>> {
        let rho = self.radii(base, coeffs)?;
        Ok(self
            .rays
            .par_iter()
            .map(|ray| {
                let tab = &self.tables[ray.table];
                let mut s = Complex::new(0.0, 0.0);
                for (j, d) in tab.dirs.iter().enumerate() {
                    let a =
                        2.0 * PI * (ray.kf[0] * d[0] + ray.kf[1] * d[1] + ray.kf[2] * d[2]);
                    let r = rho[tab.offset + j];
                    let t = if self.dim == 2 {
                        energy::radial_transform_2d(a, r)
                    } else {
                        energy::radial_transform_3d(a, r)
                    };
                    s += t * tab.w[j];
                }
                s
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// ball nonlocal operator: pairwise regular part + separable mode sums
// ---------------------------------------------------------------------------

struct GammaMode {
    /// Radial exponent index (Fourier k in 2D, Legendre l in 3D).
    l: usize,
    /// Prefactor including the kernel normalization, before the rho_M
    /// power shared by all modes.
    pref_unit: f64,
    /// Node weight times the angular factor of this mode.
    h: Vec<f64>,
}

/// Radial factor tables of one angular mode, on radii sorted ascending.
/// With u = t^l mu(t), v the conjugate factor and U, V, S = 2 int v mu U
/// their antiderivatives, the pair kernel is K(a, b) = P(min) + U(min)V(max)
/// where P = S - U V; K is C^1 across ties because K(a, a) = S(a) from both
/// sides.  Any additive constant in V cancels in K, which is what makes the
/// l = 2 logarithmic branch harmless.
struct RadTables {
    u: Vec<f64>,
    v: Vec<f64>,
    s: Vec<f64>,
    p: Vec<f64>,
    up: Vec<f64>,
    vp: Vec<f64>,
    sp: Vec<f64>,
    pp: Vec<f64>,
}

fn rad_tables(dim: usize, l: usize, sig: &[f64], want_grad: bool) -> RadTables {
    let n = sig.len();
    let mut t = RadTables {
        u: vec![0.0; n],
        v: vec![0.0; n],
        s: vec![0.0; n],
        p: vec![0.0; n],
        up: Vec::new(),
        vp: Vec::new(),
        sp: Vec::new(),
        pp: Vec::new(),
    };
    if want_grad {
        t.up = vec![0.0; n];
        t.vp = vec![0.0; n];
        t.sp = vec![0.0; n];
        t.pp = vec![0.0; n];
    }
    for (j, &x) in sig.iter().enumerate() {
        let (u, v, s, up, vp, sp) = match (dim, l) {
            (2, 0) => {
                let ln = x.ln();
                (
                    x * x / 2.0,
                    x * x * (2.0 * ln - 1.0) / 4.0,
                    x.powi(4) * (4.0 * ln - 1.0) / 16.0,
                    x,
                    x * ln,
                    x * x * x * ln,
                )
            }
            (2, k) => {
                let kf = k as f64;
                let v = if k == 2 { x.ln() } else { x.powi(2 - k as i32) / (2.0 - kf) };
                (
                    x.powi(k as i32 + 2) / (kf + 2.0),
                    v,
                    x.powi(4) / (2.0 * (kf + 2.0)),
                    x.powi(k as i32 + 1),
                    x.powi(1 - k as i32),
                    2.0 * x.powi(3) / (kf + 2.0),
                )
            }
            (_, l) => {
                let lf = l as f64;
                let v = if l == 2 { x.ln() } else { x.powi(2 - l as i32) / (2.0 - lf) };
                (
                    x.powi(l as i32 + 3) / (lf + 3.0),
                    v,
                    2.0 * x.powi(5) / (5.0 * (lf + 3.0)),
                    x.powi(l as i32 + 2),
                    x.powi(1 - l as i32),
                    2.0 * x.powi(4) / (lf + 3.0),
                )
            }
        };
        t.u[j] = u;
        t.v[j] = v;
        t.s[j] = s;
        t.p[j] = s - u * v;
        if want_grad {
            t.up[j] = up;
            t.vp[j] = vp;
            t.sp[j] = sp;
            t.pp[j] = sp - up * v - u * vp;
        }
    }
    t
}

/// Pair sum of one angular mode over the sorted radial profile:
/// sum_j h_j^2 S_j + 2 sum_{a<b} h_a h_b (P_a + U_a V_b), in one pass with
/// suffix sums of h and h V and a prefix sum of h U.  `dsig`, when
/// non-empty, accumulates pref * d(pair)/d sigma_j in original node order.
fn gamma_mode_pass(
    ord: &[usize],
    tab: &RadTables,
    h: &[f64],
    pref: f64,
    dsig: &mut [f64],
) -> f64 {
    let n = ord.len();
    let want_grad = !dsig.is_empty();
    let mut sh = vec![0.0; n + 1];
    let mut shv = vec![0.0; n + 1];
    for t in (0..n).rev() {
        let hj = h[ord[t]];
        sh[t] = sh[t + 1] + hj;
        shv[t] = shv[t + 1] + hj * tab.v[t];
    }
    let mut val = 0.0;
    let mut ph = 0.0;
    for t in 0..n {
        let j = ord[t];
        let hj = h[j];
        val += hj * hj * tab.s[t] + 2.0 * hj * (tab.p[t] * sh[t + 1] + tab.u[t] * shv[t + 1]);
        if want_grad {
            dsig[j] += pref
                * (hj * hj * tab.sp[t]
                    + 2.0 * hj * (tab.pp[t] * sh[t + 1] + tab.up[t] * shv[t + 1] + tab.vp[t] * ph));
        }
        ph += hj * tab.u[t];
    }
    pref * val
}

struct BallNl {
    dim: usize,
    m: usize,
    dom_radius: f64,
    dom_volume: f64,
    grid: QuadratureGrid,
    /// Basis values at the surface nodes, node-major.
    psi: Vec<f64>,
    modes: Vec<GammaMode>,
    gl_s: Vec<f64>,
    gl_w: Vec<f64>,
}

impl BallNl {
    fn new(domain: &Domain, degree: usize, m: usize, order_override: usize) -> Result<Self> {
        let dim = domain.dim;
        let order = if order_override > 0 {
            order_override
        } else if dim == 2 {
            2 * degree + 16
        } else {
            (2 * degree + 7).max(12)
        };
        let nrad = if dim == 2 { 8 } else { 4 };
        let lmax = (2 * degree + 10)
            .min(if dim == 2 { 40 } else { 24 })
            .min((2 * order).saturating_sub(2 * degree))
            .max(4);
        let grid = sphere_quadrature(dim, order);
        let n = grid.len();
        let mut psi = vec![0.0; n * m];
        let mut modes = Vec::new();
        if dim == 2 {
            let basis = CircleBasis { degree };
            let theta: Vec<f64> = grid.nodes.iter().map(|d| d[1].atan2(d[0])).collect();
            for j in 0..n {
                for i in 0..m {
                    psi[j * m + i] = basis.value(i, theta[j]);
                }
            }
            modes.push(GammaMode {
                l: 0,
                pref_unit: 1.0 / (2.0 * PI),
                h: grid.weights.clone(),
            });
            for k in 1..=lmax {
                let pref_unit = -1.0 / (2.0 * PI * k as f64);
                let hc =
                    (0..n).map(|j| grid.weights[j] * (k as f64 * theta[j]).cos()).collect();
                let hs =
                    (0..n).map(|j| grid.weights[j] * (k as f64 * theta[j]).sin()).collect();
                modes.push(GammaMode { l: k, pref_unit, h: hc });
                modes.push(GammaMode { l: k, pref_unit, h: hs });
            }
        } else {
            let sh = sh_basis(degree);
            let mut vals = vec![0.0; sh.count()];
            for (j, d) in grid.nodes.iter().enumerate() {
                sh.values_unit_all(*d, &mut vals);
                psi[j * m..(j + 1) * m].copy_from_slice(&vals[1..m + 1]);
            }
            let shl = sh_basis(lmax);
            let mut lv = vec![0.0; shl.count()];
            let mut htab = vec![vec![0.0; n]; shl.count()];
            for (j, d) in grid.nodes.iter().enumerate() {
                shl.values_unit_all(*d, &mut lv);
                for (i, &y) in lv.iter().enumerate() {
                    htab[i][j] = grid.weights[j] * y;
                }
            }
            for (i, h) in htab.into_iter().enumerate() {
                let l = shl.modes[i].0;
                modes.push(GammaMode { l, pref_unit: -1.0 / (2 * l + 1) as f64, h });
            }
        }
        let (gl_s, gl_w) = gauss_legendre_ab(nrad, 0.0, 1.0);
        Ok(BallNl {
            dim,
            m,
            dom_radius: domain.radius,
            dom_volume: domain.volume,
            grid,
            psi,
            modes,
            gl_s,
            gl_w,
        })
    }

    /// Value, coefficient gradient and center gradient of the nonlocal
    /// energy int int G = int int R - int int Gamma over the discrete
    /// droplet.  The Gamma part is center-free, so the center gradient
    /// comes from the regular part alone.
    fn eval(
        &self,
        center: [f64; 3],
        base: f64,
        coeffs: &[f64],
        want_grad: bool,
    ) -> Result<(f64, Vec<f64>, [f64; 3])> {
        let n = self.grid.len();
        let dimf = self.dim as f64;
        let mut rho = vec![0.0; n];
        for j in 0..n {
            let mut r = base;
            let row = &self.psi[j * self.m..(j + 1) * self.m];
            for (c, p) in coeffs.iter().zip(row) {
                r += c * p;
            }
            if !r.is_finite() || r <= 0.0 {
                return Err(Error::Geometry("radial profile collapsed".into()));
            }
            let d = self.grid.nodes[j];
            let reach = norm3([
                center[0] + r * d[0],
                center[1] + r * d[1],
                center[2] + r * d[2],
            ]);
            if reach >= self.dom_radius * (1.0 - 1e-9) {
                return Err(Error::Geometry(format!(
                    "droplet reaches {reach:.6}, outside the ball of radius {}",
                    self.dom_radius
                )));
            }
            rho[j] = r;
        }

        // free-space self-interaction via one sorted pass per angular mode
        let rho_m = self.dom_radius;
        let sig: Vec<f64> = rho.iter().map(|r| r / rho_m).collect();
        let mut ord: Vec<usize> = (0..n).collect();
        ord.sort_by(|&a, &b| sig[a].partial_cmp(&sig[b]).unwrap());
        let sig_sorted: Vec<f64> = ord.iter().map(|&j| sig[j]).collect();
        let scale = rho_m.powi(self.dim as i32 + 2);
        let mut dsig = vec![0.0; if want_grad { n } else { 0 }];
        let mut gamma_val = 0.0;
        let mut idx = 0usize;
        while idx < self.modes.len() {
            let l = self.modes[idx].l;
            let tab = rad_tables(self.dim, l, &sig_sorted, want_grad);
            while idx < self.modes.len() && self.modes[idx].l == l {
                let mode = &self.modes[idx];
                gamma_val +=
                    gamma_mode_pass(&ord, &tab, &mode.h, mode.pref_unit * scale, &mut dsig);
                idx += 1;
            }
        }
        if self.dim == 2 {
            // separable remainder of the ln t_> kernel under normalization
            let lnr = rho_m.ln();
            if lnr != 0.0 {
                let sq: f64 =
                    self.grid.weights.iter().zip(&sig).map(|(w, s)| w * s * s / 2.0).sum();
                gamma_val += scale / (2.0 * PI) * lnr * sq * sq;
                if want_grad {
                    for j in 0..n {
                        dsig[j] +=
                            scale / (2.0 * PI) * lnr * 2.0 * sq * self.grid.weights[j] * sig[j];
                    }
                }
            }
        }

        // regular part over a polar volume rule, full pairwise pass
        let nrad = self.gl_s.len();
        let mvol = n * nrad;
        let mut pos = vec![[0.0f64; 3]; mvol];
        let mut aw = vec![0.0f64; mvol];
        for j in 0..n {
            let d = self.grid.nodes[j];
            let rj = rho[j];
            for q in 0..nrad {
                let s = self.gl_s[q];
                let a = j * nrad + q;
                pos[a] = [center[0] + rj * s * d[0], center[1] + rj * s * d[1], center[2] + rj * s * d[2]];
                aw[a] = self.grid.weights[j]
                    * self.gl_w[q]
                    * rj.powi(self.dim as i32)
                    * s.powi(self.dim as i32 - 1);
            }
        }
        let rows: Vec<(f64, [f64; 3])> = (0..mvol)
            .into_par_iter()
            .map(|a| {
                let xa = pos[a];
                let mut pot = 0.0;
                let mut field = [0.0f64; 3];
                for b in 0..mvol {
                    let (val, f1, _f2, f3) =
                        ball_reg_kernel(self.dim, self.dom_radius, self.dom_volume, xa, pos[b]);
                    pot += aw[b] * val;
                    if want_grad {
                        field[0] += aw[b] * (2.0 * f1 * xa[0] + f3 * pos[b][0]);
                        field[1] += aw[b] * (2.0 * f1 * xa[1] + f3 * pos[b][1]);
                        field[2] += aw[b] * (2.0 * f1 * xa[2] + f3 * pos[b][2]);
                    }
                }
                (pot, field)
            })
            .collect();
        let mut r_val = 0.0;
        for a in 0..mvol {
            r_val += aw[a] * rows[a].0;
        }

        let nl = r_val - gamma_val;
        if !want_grad {
            return Ok((nl, Vec::new(), [0.0; 3]));
        }

        let mut drho = vec![0.0; n];
        for (j, dr) in drho.iter_mut().enumerate() {
            *dr -= dsig[j] / rho_m;
            let d = self.grid.nodes[j];
            let rj = rho[j];
            for q in 0..nrad {
                let a = j * nrad + q;
                let s = self.gl_s[q];
                let radial = rows[a].1[0] * d[0] + rows[a].1[1] * d[1] + rows[a].1[2] * d[2];
                *dr += 2.0 * (dimf / rj * aw[a] * rows[a].0 + aw[a] * s * radial);
            }
        }
        let mut grad_c = vec![0.0; self.m];
        for j in 0..n {
            let row = &self.psi[j * self.m..(j + 1) * self.m];
            let dj = drho[j];
            for (g, p) in grad_c.iter_mut().zip(row) {
                *g += dj * p;
            }
        }
        let mut grad_p = [0.0f64; 3];
        for a in 0..mvol {
            grad_p[0] += 2.0 * aw[a] * rows[a].1[0];
            grad_p[1] += 2.0 * aw[a] * rows[a].1[1];
            grad_p[2] += 2.0 * aw[a] * rows[a].1[2];
        }
        Ok((nl, grad_c, grad_p))
    }
}

// ---------------------------------------------------------------------------
// discrete energy facade over (coefficients, center)
// ---------------------------------------------------------------------------

enum NlRoute {
    Free,
    Torus(TorusNl),
    Ball(Box<BallNl>),
}

struct EvalOut {
    energy: f64,
    volume: f64,
    grad_e: Vec<f64>,
    grad_v: Vec<f64>,
}

/// The descent functional: perimeter and volume on the shape grid with
/// exact coefficient derivatives, plus the nonlocal route.  DOF layout is
/// [coeffs.., center[..dim]].
struct DiscreteEnergy {
    domain: Domain,
    gamma: f64,
    dim: usize,
    degree: usize,
    m: usize,
    grid: QuadratureGrid,
    psi: Vec<f64>,
    gpsi: Vec<[f64; 3]>,
    route: NlRoute,
}

impl DiscreteEnergy {
    fn new(
        domain: &Domain,
        params: &ModelParams,
        initial: &DropletShape,
        resolution: usize,
    ) -> Result<Self> {
        energy::check_compat(domain, initial)?;
        let dim = domain.dim;
        let degree = initial.degree;
        let m = initial.coeffs.len();
        let grid = default_grid(dim, degree.max(1));
        initial.validate(&grid)?;
        let n = grid.len();
        let mut psi = vec![0.0; n * m];
        let mut gpsi = vec![[0.0f64; 3]; n * m];
        match dim {
            2 => {
                let basis = CircleBasis { degree };
                for (j, d) in grid.nodes.iter().enumerate() {
                    let th = d[1].atan2(d[0]);
                    let tangent = [-th.sin(), th.cos(), 0.0];
                    for i in 0..m {
                        psi[j * m + i] = basis.value(i, th);
                        let dt = basis.dtheta(i, th);
                        gpsi[j * m + i] = [tangent[0] * dt, tangent[1] * dt, 0.0];
                    }
                }
            }
            _ => {
                let sh = sh_basis(degree);
                let mut vals = vec![0.0; sh.count()];
                for (j, d) in grid.nodes.iter().enumerate() {
                    sh.values_unit_all(*d, &mut vals);
                    for i in 0..m {
                        psi[j * m + i] = vals[i + 1];
                        gpsi[j * m + i] = sh.surface_gradient(i + 1, *d);
                    }
                }
            }
        }
        let route = if params.gamma == 0.0 {
            NlRoute::Free
        } else {
            match domain.kind {
                DomainKind::Torus => {
                    let cutoff = if resolution > 0 {
                        resolution
                    } else if dim == 2 {
                        OP_TORUS_CUTOFF_2D
                    } else {
                        OP_TORUS_CUTOFF_3D
                    };
                    let rho_max = grid
                        .nodes
                        .iter()
                        .map(|&d| initial.radius_at(d))
                        .fold(0.0f64, f64::max);
                    if rho_max >= 0.499 {
                        return Err(Error::Geometry(format!(
                            "initial radius {rho_max:.4} leaves the torus cell"
                        )));
                    }
                    let budget = (1.5 * rho_max).min(0.499).max(rho_max * 1.01);
                    NlRoute::Torus(TorusNl::new(dim, degree, m, cutoff, budget)?)
                }
                DomainKind::Ball => {
                    energy::check_containment(domain, initial, &grid)?;
                    NlRoute::Ball(Box::new(BallNl::new(domain, degree, m, resolution)?))
                }
            }
        };
        Ok(DiscreteEnergy {
            domain: *domain,
            gamma: params.gamma,
            dim,
            degree,
            m,
            grid,
            psi,
            gpsi,
            route,
        })
    }

    fn dof_len(&self) -> usize {
        self.m + self.dim
    }

    fn pack(&self, shape: &DropletShape) -> Vec<f64> {
        let mut x = shape.coeffs.clone();
        x.extend_from_slice(&shape.center[..self.dim]);
        x
    }

    fn shape_with(&self, base: f64, x: &[f64]) -> Result<DropletShape> {
        let mut center = [0.0; 3];
        center[..self.dim].copy_from_slice(&x[self.m..self.m + self.dim]);
        DropletShape::new(self.dim, center, base, self.degree, x[..self.m].to_vec())
    }

    /// Perimeter, volume, nonlocal term and their exact DOF gradients.
    /// Geometry violations (star floor, containment, table budget) come
    /// back as Geometry/Numerics errors for the caller to treat as
    /// rejected candidates.
    fn eval(&self, shape: &DropletShape, want_grad: bool) -> Result<EvalOut> {
        let n = self.grid.len();
        let m = self.m;
        let base = shape.base_radius;
        let floor = STAR_FLOOR * base;
        let nf = self.dim as f64;
        let ball_dom = self.domain.kind == DomainKind::Ball;
        let mut per = 0.0;
        let mut vol = 0.0;
        let mut ge = vec![0.0; if want_grad { self.dof_len() } else { 0 }];
        let mut gv = vec![0.0; if want_grad { self.dof_len() } else { 0 }];
        for j in 0..n {
            let row = &self.psi[j * m..(j + 1) * m];
            let grow = &self.gpsi[j * m..(j + 1) * m];
            let mut rho = base;
            let mut g = [0.0f64; 3];
            for i in 0..m {
                let c = shape.coeffs[i];
                rho += c * row[i];
                g[0] += c * grow[i][0];
                g[1] += c * grow[i][1];
                g[2] += c * grow[i][2];
            }
            if !rho.is_finite() || rho < floor {
                return Err(Error::Geometry(format!(
                    "radial parametrization degenerate: r + phi = {rho:.3e}"
                )));
            }
            let d = self.grid.nodes[j];
            if ball_dom {
                let reach = norm3([
                    shape.center[0] + rho * d[0],
                    shape.center[1] + rho * d[1],
                    shape.center[2] + rho * d[2],
                ]);
                if reach >= self.domain.radius * (1.0 - 1e-12) {
                    return Err(Error::Geometry(format!(
                        "droplet reaches {reach:.6}, outside the ball of radius {}",
                        self.domain.radius
                    )));
                }
            }
            let w = self.grid.weights[j];
            let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
            let root = (rho * rho + g2).sqrt();
            vol += w * rho.powi(self.dim as i32) / nf;
            if self.dim == 2 {
                per += w * root;
            } else {
                per += w * rho * root;
            }
            if want_grad {
                for i in 0..m {
                    let gg = g[0] * grow[i][0] + g[1] * grow[i][1] + g[2] * grow[i][2];
                    let dper = if self.dim == 2 {
                        (rho * row[i] + gg) / root
                    } else {
                        row[i] * root + rho * (rho * row[i] + gg) / root
                    };
                    ge[i] += w * dper;
                    gv[i] += w * rho.powi(self.dim as i32 - 1) * row[i];
                }
            }
        }
        let mut total = per;
        if self.gamma > 0.0 {
            match &self.route {
                NlRoute::Free => {}
                NlRoute::Torus(op) => {
                    let (nl, gc) = op.eval(base, &shape.coeffs, want_grad)?;
                    total += self.gamma * nl;
                    if want_grad {
                        for i in 0..m {
                            ge[i] += self.gamma * gc[i];
                        }
                    }
                }
                NlRoute::Ball(op) => {
                    let (nl, gc, gp) = op.eval(shape.center, base, &shape.coeffs, want_grad)?;
                    total += self.gamma * nl;
                    if want_grad {
                        for i in 0..m {
                            ge[i] += self.gamma * gc[i];
                        }
                        for a in 0..self.dim {
                            ge[m + a] += self.gamma * gp[a];
                        }
                    }
                }
            }
        }
        Ok(EvalOut { energy: total, volume: vol, grad_e: ge, grad_v: gv })
    }
}

// ---------------------------------------------------------------------------
// first-order optimality residual
// ---------------------------------------------------------------------------

fn el_grid(dim: usize, degree: usize) -> QuadratureGrid {
    if dim == 2 {
        default_grid(2, degree.max(1))
    } else {
        sphere_quadrature(3, (degree + 8).max(12))
    }
}

/// Boundary trace of the indicator potential on a torus, from the Fourier
/// representation v(x) = sum_k chi_hat(k) e^{2 pi i k.x} / (4 pi^2 |k|^2).
fn torus_boundary_potential(
    shape: &DropletShape,
    nodes: &[[f64; 3]],
    cutoff: usize,
) -> Result<Vec<f64>> {
    let dim = shape.dim;
    let cutoff = if cutoff > 0 {
        cutoff
    } else if dim == 2 {
        energy::DEFAULT_TORUS_CUTOFF_2D
    } else {
        energy::DEFAULT_TORUS_CUTOFF_3D
    };
    let grid = default_grid(dim, shape.degree.max(1));
    let rho_max = grid.nodes.iter().map(|&d| shape.radius_at(d)).fold(0.0f64, f64::max);
    if rho_max >= 0.499 {
        return Err(Error::Geometry(format!("radius {rho_max:.4} leaves the torus cell")));
    }
    let op = TorusNl::new(dim, shape.degree, shape.coeffs.len(), cutoff, (rho_max * 1.02).min(0.499))?;
    let sums = op.ray_sums(shape.base_radius, &shape.coeffs)?;
    Ok(nodes
        .par_iter()
        .map(|&u| {
            // x - center = rho(u) u, so the phase is 2 pi rho (k.u)
            let rho = shape.radius_at(u);
            let mut v = 0.0;
            for (ray, s) in op.rays.iter().zip(&sums) {
                let a = 2.0 * PI * rho * (ray.kf[0] * u[0] + ray.kf[1] * u[1] + ray.kf[2] * u[2]);
                v += ray.coef * (s * Complex::from_polar(1.0, a)).re;
            }
            v
        })
        .collect())
}

/// Free-space potential int_E Gamma(|x - y|) dy at the droplet's own
/// boundary points x = center + rho(u) u, by singularity subtraction: the
/// potential of the ball B(center, b) with b = |x - center| is closed form
/// because x sits on its boundary, and the remainder integrates Gamma over
/// the signed radial gaps between b and rho(w), which shrink with the
/// deformation near the singular direction.  Exact for balls.
fn newtonian_boundary_potentials(
    shape: &DropletShape,
    nodes: &[[f64; 3]],
    order: usize,
) -> Vec<f64> {
    let dim = shape.dim;
    let ang = sphere_quadrature(dim, order);
    let rho_ang: Vec<f64> = ang.nodes.iter().map(|&u| shape.radius_at(u)).collect();
    let (gs, gw) = gauss_legendre_ab(16, 0.0, 1.0);
    nodes
        .par_iter()
        .map(|&u| {
            let b = shape.radius_at(u);
            let xp = [b * u[0], b * u[1], b * u[2]];
            let closed = match dim {
                2 => 0.5 * b * b * b.ln(),
                _ => -b * b / 3.0,
            };
            let mut corr = 0.0;
            for (k, &yh) in ang.nodes.iter().enumerate() {
                let rho = rho_ang[k];
                let (lo, hi, sgn) = if rho >= b { (b, rho, 1.0) } else { (rho, b, -1.0) };
                if hi - lo < 1e-15 {
                    continue;
                }
                // split at the nearest approach of the ray to x
                let proj = xp[0] * yh[0] + xp[1] * yh[1] + xp[2] * yh[2];
                let split = proj.clamp(lo, hi);
                let mut inner = 0.0;
                for (a, c) in [(lo, split), (split, hi)] {
                    if c - a < 1e-15 {
                        continue;
                    }
                    for (&t, &wt) in gs.iter().zip(&gw) {
                        let s = a + (c - a) * t;
                        let dv =
                            [s * yh[0] - xp[0], s * yh[1] - xp[1], s * yh[2] - xp[2]];
                        let dist = norm3(dv).max(1e-300);
                        let g = match dim {
                            2 => dist.ln() / (2.0 * PI),
                            _ => -1.0 / (4.0 * PI * dist),
                        };
                        inner += wt * (c - a) * g * s.powi(dim as i32 - 1);
                    }
                }
                corr += ang.weights[k] * sgn * inner;
            }
            closed + corr
        })
        .collect()
}

/// Boundary trace of the potential in the ball domain: minus the free-space
/// Newtonian potential of the droplet plus the regular-part moment.
fn ball_boundary_potential(
    domain: &Domain,
    shape: &DropletShape,
    nodes: &[[f64; 3]],
    resolution: usize,
) -> Result<Vec<f64>> {
    let dim = domain.dim;
    let gord = if resolution > 0 {
        resolution
    } else if dim == 2 {
        EL_BALL_GAMMA_ORDER_2D
    } else {
        EL_BALL_GAMMA_ORDER_3D
    };
    let so = if dim == 2 { 2 * shape.degree + 16 } else { (shape.degree + 8).max(12) };
    let nrad = if dim == 2 { 12 } else { 8 };
    let sq = sphere_quadrature(dim, so);
    let (gs, gw) = gauss_legendre_ab(nrad, 0.0, 1.0);
    let c = shape.center;
    let mut pos = Vec::with_capacity(sq.len() * nrad);
    let mut aw = Vec::with_capacity(sq.len() * nrad);
    for (j, d) in sq.nodes.iter().enumerate() {
        let rho = shape.radius_at(*d);
        for q in 0..nrad {
            let s = gs[q];
            pos.push([c[0] + rho * s * d[0], c[1] + rho * s * d[1], c[2] + rho * s * d[2]]);
            aw.push(sq.weights[j] * gw[q] * rho.powi(dim as i32) * s.powi(dim as i32 - 1));
        }
    }
    let newt = newtonian_boundary_potentials(shape, nodes, gord);
    Ok(nodes
        .par_iter()
        .zip(&newt)
        .map(|(&u, &nw)| {
            let rho = shape.radius_at(u);
            let x = [c[0] + rho * u[0], c[1] + rho * u[1], c[2] + rho * u[2]];
            let mut reg = 0.0;
            for (p, a) in pos.iter().zip(&aw) {
                reg += a * regular_part_ball_closed(x, *p, domain.radius, dim);
            }
            reg - nw
        })
        .collect())
}

/// First-order optimality report for a shape: multiplier estimate and the
/// sup / L2 deviation of H + 2 gamma v from it over the boundary grid.
/// `resolution` raises the potential accuracy (torus cutoff or ball
/// angular order); 0 picks defaults.
pub fn el_residual(
    domain: &Domain,
    params: &ModelParams,
    shape: &DropletShape,
    resolution: usize,
) -> Result<ELReport> {
    params.validate(domain)?;
    energy::check_compat(domain, shape)?;
    let grid = el_grid(domain.dim, shape.degree);
    shape.validate(&grid)?;
    if domain.kind == DomainKind::Ball {
        energy::check_containment(domain, shape, &grid)?;
    }
    let v = if params.gamma == 0.0 {
        vec![0.0; grid.len()]
    } else {
        match domain.kind {
            DomainKind::Torus => torus_boundary_potential(shape, &grid.nodes, resolution)?,
            DomainKind::Ball => ball_boundary_potential(domain, shape, &grid.nodes, resolution)?,
        }
    };
    let n = grid.len();
    let mut tvals = vec![0.0; n];
    let mut avals = vec![0.0; n];
    for j in 0..n {
        let node = grid.nodes[j];
        let h = shape.mean_curvature(node)?;
        tvals[j] = h + 2.0 * params.gamma * v[j];
        let rho = shape.radius_at(node);
        let g = shape.phi_surface_gradient(node);
        let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
        avals[j] = grid.weights[j] * rho.powi(domain.dim as i32 - 2) * (rho * rho + g2).sqrt();
    }
    let area: f64 = avals.iter().sum();
    let lambda = dot(&tvals, &avals) / area;
    let mut linf_r = 0.0f64;
    let mut l2 = 0.0;
    for j in 0..n {
        let r = tvals[j] - lambda;
        linf_r = linf_r.max(r.abs());
        l2 += avals[j] * r * r;
    }
    Ok(ELReport { multiplier: lambda, residual_linf: linf_r, residual_l2: (l2 / area).sqrt() })
}

/// Multiplier of a near-critical shape, paired with the model's multiplier
/// scale for bound checks.  Errors unless the shape is actually close to
/// critical, since the multiplier of a non-critical shape is meaningless.
pub fn multiplier_bound_check(
    domain: &Domain,
    params: &ModelParams,
    shape: &DropletShape,
) -> Result<(f64, f64)> {
    let el = el_residual(domain, params, shape, 0)?;
    if el.residual_linf >= 10.0 * DEFAULT_EL_TOL {
        return Err(Error::Geometry(format!(
            "shape is not near-critical: residual {:.3e}",
            el.residual_linf
        )));
    }
    Ok((el.multiplier, energy::multiplier_scale(domain, params)))
}

// ---------------------------------------------------------------------------
// descent
// ---------------------------------------------------------------------------

/// Inverse diagonal metric: perimeter Hessian scale per mode (pi k^2 / r in
/// 2D, l(l+1) + 2 for orthonormal harmonics in 3D) plus the confinement
/// Hessian scale 2 gamma V^2 / |Omega| for the ball center block.  Without
/// this the center would crawl: its Hessian is a factor ~1e6 softer than
/// the stiffest shape mode.
fn precondition_inverse(
    domain: &Domain,
    params: &ModelParams,
    degree: usize,
    m: usize,
    base_radius: f64,
) -> Vec<f64> {
    let dim = domain.dim;
    let mut diag = Vec::with_capacity(m + dim);
    match dim {
        2 => {
            let basis = CircleBasis { degree };
            for i in 0..m {
                let (k, _) = basis.mode(i);
                diag.push(PI * (k * k) as f64 / base_radius);
            }
        }
        _ => {
            let sh = sh_basis(degree);
            for i in 0..m {
                let l = sh.modes[i + 1].0 as f64;
                diag.push(l * (l + 1.0) + 2.0);
            }
        }
    }
    let coeff_floor = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let coeff_floor = if coeff_floor.is_finite() { coeff_floor } else { 1.0 };
    let center_scale = match domain.kind {
        DomainKind::Torus => 1.0,
        DomainKind::Ball => {
            let vt = params.volume_target(domain);
            let conf = 2.0 * params.gamma * vt * vt / domain.volume;
            if conf > 1e-8 * coeff_floor {
                conf
            } else {
                coeff_floor
            }
        }
    };
    for _ in 0..dim {
        diag.push(center_scale);
    }
    diag.iter().map(|&v| 1.0 / v).collect()
}

/// Euclidean projection of g onto the volume-tangent space.
fn project_tangent(g: &[f64], gv: &[f64]) -> Vec<f64> {
    let den = dot(gv, gv);
    if den <= 0.0 {
        return g.to_vec();
    }
    let mu = dot(g, gv) / den;
    g.iter().zip(gv).map(|(a, b)| a - mu * b).collect()
}

/// Preconditioned direction with exact volume tangency:
/// d = -Minv (g - mu gv) with mu chosen so <gv, d> = 0.
fn oblique_direction(g: &[f64], gv: &[f64], minv: &[f64]) -> Vec<f64> {
    let den: f64 = gv.iter().zip(minv).map(|(b, w)| b * b * w).sum();
    if den <= 0.0 {
        return g.iter().zip(minv).map(|(a, w)| -a * w).collect();
    }
    let num: f64 = g.iter().zip(gv).zip(minv).map(|((a, b), w)| a * b * w).sum();
    let mu = num / den;
    g.iter().zip(gv).zip(minv).map(|((a, b), w)| -(a - mu * b) * w).collect()
}

fn rescaled_to_volume(shape: &DropletShape, vol: f64, vt: f64, dim: usize) -> Result<DropletShape> {
    shape.scaled((vt / vol).powf(1.0 / dim as f64))
}

/// Re-expand the radial graph about a new center by ray casting: for each
/// grid direction, bisect for the boundary crossing of the old graph, then
/// project the new profile back onto the basis.  Exact for balls; for
/// deformed shapes the band-limit projection loses only the aliasing tail.
fn reexpand_about(
    shape: &DropletShape,
    point: [f64; 3],
    grid: &QuadratureGrid,
) -> Result<DropletShape> {
    let d0 = sub3(point, shape.center);
    let shift = norm3(d0);
    if shift < 1e-14 * shape.base_radius {
        return Ok(shape.clone());
    }
    let m = shape.coeffs.len();
    // crude sup bound on the old radius for the bracket
    let ymax: f64 = match shape.dim {
        2 => shape.coeffs.iter().map(|c| c.abs()).sum(),
        _ => {
            let sh = sh_basis(shape.degree);
            shape
                .coeffs
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let l = sh.modes[i + 1].0 as f64;
                    c.abs() * ((2.0 * l + 1.0) / (4.0 * PI)).sqrt()
                })
                .sum()
        }
    };
    let rho_hi = shape.base_radius + ymax + shift + 1e-9;
    let eval_g = |s: f64, u: [f64; 3]| -> f64 {
        let z = [d0[0] + s * u[0], d0[1] + s * u[1], d0[2] + s * u[2]];
        let zn = norm3(z);
        if zn < 1e-300 {
            return shape.radius_at(u);
        }
        shape.radius_at([z[0] / zn, z[1] / zn, z[2] / zn]) - zn
    };
    let mut rho_new = vec![0.0; grid.len()];
    for (j, &u) in grid.nodes.iter().enumerate() {
        if eval_g(0.0, u) <= 0.0 {
            return Err(Error::Geometry(
                "re-expansion point is outside the droplet".into(),
            ));
        }
        let mut lo = 0.0;
        let mut hi = rho_hi;
        if eval_g(hi, u) >= 0.0 {
            return Err(Error::Geometry("re-expansion bracket failed".into()));
        }
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if eval_g(mid, u) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        rho_new[j] = 0.5 * (lo + hi);
    }
    let wtot: f64 = grid.weights.iter().sum();
    let base: f64 =
        grid.weights.iter().zip(&rho_new).map(|(w, r)| w * r).sum::<f64>() / wtot;
    let mut coeffs = vec![0.0; m];
    match shape.dim {
        2 => {
            let basis = CircleBasis { degree: shape.degree };
            for (j, d) in grid.nodes.iter().enumerate() {
                let th = d[1].atan2(d[0]);
                for (i, c) in coeffs.iter_mut().enumerate() {
                    *c += grid.weights[j] * rho_new[j] * basis.value(i, th) / PI;
                }
            }
        }
        _ => {
            let sh = sh_basis(shape.degree);
            let mut vals = vec![0.0; sh.count()];
            for (j, d) in grid.nodes.iter().enumerate() {
                sh.values_unit_all(*d, &mut vals);
                for (i, c) in coeffs.iter_mut().enumerate() {
                    *c += grid.weights[j] * rho_new[j] * vals[i + 1];
                }
            }
        }
    }
    DropletShape::new(shape.dim, point, base, shape.degree, coeffs)
}

/// Smallest principal curvature over the grid (level-set shape operator in
/// 3D; the polar curvature itself in 2D).
fn min_principal_curvature(shape: &DropletShape, grid: &QuadratureGrid) -> Result<f64> {
    let mut min_k = f64::INFINITY;
    if shape.dim == 2 {
        for &node in &grid.nodes {
            min_k = min_k.min(shape.mean_curvature(node)?);
        }
        return Ok(min_k);
    }
    let sh = sh_basis(shape.degree);
    for &xhat in &grid.nodes {
        let rho = shape.radius_at(xhat);
        if rho <= 0.0 {
            return Err(Error::Geometry("degenerate radius in curvature scan".into()));
        }
        // grad and Hessian of F = |y| - r - sum c Y |y|^{-l} at rho * xhat,
        // assembled at the unit direction by homogeneity (same calculus as
        // DropletShape::mean_curvature)
        let mut grad = [xhat[0], xhat[1], xhat[2]];
        let mut hess = [[0.0f64; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                hess[a][b] = (((a == b) as u8) as f64 - xhat[a] * xhat[b]) / rho;
            }
        }
        for (idx, &c) in shape.coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let i = idx + 1;
            let l = sh.modes[i].0 as f64;
            let y = sh.polys[i].eval(xhat);
            let gy =
                [sh.grads[i][0].eval(xhat), sh.grads[i][1].eval(xhat), sh.grads[i][2].eval(xhat)];
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
        let norm = norm3(grad);
        let nhat = [grad[0] / norm, grad[1] / norm, grad[2] / norm];
        // shape operator restricted to the tangent plane: P H P / |grad F|
        // has eigenvalues {k1, k2, 0}; recover the pair from trace and
        // Frobenius norm
        let mut proj = [[0.0f64; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                proj[a][b] = ((a == b) as u8) as f64 - nhat[a] * nhat[b];
            }
        }
        let mut hp = [[0.0f64; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let mut s = 0.0;
                for r in 0..3 {
                    s += hess[a][r] * proj[r][b];
                }
                hp[a][b] = s;
            }
        }
        let mut mmat = [[0.0f64; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let mut s = 0.0;
                for r in 0..3 {
                    s += proj[a][r] * hp[r][b];
                }
                mmat[a][b] = s / norm;
            }
        }
        let mut tr = 0.0;
        let mut fro2 = 0.0;
        for a in 0..3 {
            tr += mmat[a][a];
            for b in 0..3 {
                fro2 += mmat[a][b] * mmat[a][b];
            }
        }
        let disc = (2.0 * fro2 - tr * tr).max(0.0).sqrt();
        min_k = min_k.min((tr - disc) / 2.0);
    }
    Ok(min_k)
}

/// Projected, preconditioned descent on the penalized energy
/// E + Lambda |V - V_target| over (coefficients, center).  The coefficient
/// direction is kept exactly tangent to the discrete volume; an exact
/// dilation restores the volume periodically and at the end.  The merit
/// history is non-increasing by construction.
pub fn minimize(
    domain: &Domain,
    params: &ModelParams,
    initial: &DropletShape,
    options: &OptimOptions,
) -> Result<MinimizeResult> {
    params.validate(domain)?;
    if options.max_iters == 0 {
        return Err(Error::Config("max_iters must be at least 1".into()));
    }
    if !(options.tol > 0.0) || options.gtol < 0.0 {
        return Err(Error::Config("tolerances must be positive".into()));
    }
    let op = DiscreteEnergy::new(domain, params, initial, options.resolution)?;
    let dim = op.dim;
    let vt = params.volume_target(domain);
    let out0 = op.eval(initial, false)?;
    if (out0.volume - vt).abs() > 0.1 * vt {
        return Err(Error::Config(format!(
            "initial volume {:.6e} is more than 10% away from the target {vt:.6e}",
            out0.volume
        )));
    }
    let penalty = if options.penalty > 0.0 {
        options.penalty
    } else {
        energy::default_penalty(domain, params)
    };

    // exact dilation to the target volume before the first step
    let mut cur = rescaled_to_volume(initial, out0.volume, vt, dim)?;
    let mut out = op.eval(&cur, true)?;
    let mut x = op.pack(&cur);
    let mut merit = out.energy + penalty * (out.volume - vt).abs();
    let mut history = vec![merit];
    let minv = precondition_inverse(domain, params, op.degree, op.m, cur.base_radius);

    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0usize;
    let mut bb: Option<(Vec<f64>, Vec<f64>)> = None;

    for it in 1..=options.max_iters {
        let gp = project_tangent(&out.grad_e, &out.grad_v);
        if linf(&gp) <= options.gtol {
            iterations = it - 1;
            stop = StopReason::Stationary;
            break;
        }
        let mut d = oblique_direction(&out.grad_e, &out.grad_v, &minv);
        let mut slope = dot(&out.grad_e, &d);
        if slope >= 0.0 {
            // metric degenerate for this iterate; fall back to the plain
            // projected gradient
            d = gp.iter().map(|v| -v).collect();
            slope = -dot(&gp, &gp);
            if slope >= -1e-300 {
                iterations = it - 1;
                stop = StopReason::Stationary;
                break;
            }
        }
        let dinf = linf(&d);
        let smax = 0.25 * cur.base_radius / dinf.max(1e-300);
        let mut s = match &bb {
            Some((dx, dg)) => {
                let sg = dot(dx, dg);
                let gg = dot(dg, dg);
                if sg > 0.0 && gg > 0.0 {
                    (sg / gg).min(smax)
                } else {
                    smax
                }
            }
            None => {
                if options.step0 > 0.0 {
                    options.step0.min(smax)
                } else {
                    0.2 * smax
                }
            }
        };
        let mut accepted: Option<(DropletShape, Vec<f64>, EvalOut, f64)> = None;
        let mut saw_valid = false;
        for _ in 0..MAX_BACKTRACKS {
            let cand_x: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + s * b).collect();
            match op
                .shape_with(cur.base_radius, &cand_x)
                .and_then(|sh| op.eval(&sh, false).map(|o| (sh, o)))
            {
                Ok((sh, o)) => {
                    saw_valid = true;
                    let mc = o.energy + penalty * (o.volume - vt).abs();
                    if mc <= merit + ARMIJO_C1 * s * slope {
                        accepted = Some((sh, cand_x, o, mc));
                        break;
                    }
                }
                Err(Error::Geometry(_)) | Err(Error::Numerics(_)) => {}
                Err(e) => return Err(e),
            }
            s *= BACKTRACK;
        }
        let Some((sh, cand_x, _o, mc)) = accepted else {
            iterations = it - 1;
            stop = if saw_valid { StopReason::LineSearchStall } else { StopReason::StarShapeLoss };
            break;
        };
        let out_new = op.eval(&sh, true)?;
        bb = Some((
            cand_x.iter().zip(&x).map(|(a, b)| a - b).collect(),
            out_new.grad_e.iter().zip(&out.grad_e).map(|(a, b)| a - b).collect(),
        ));
        cur = sh;
        x = cand_x;
        out = out_new;
        merit = mc;
        history.push(merit);
        iterations = it;

        if options.rescale_every > 0 && it % options.rescale_every == 0 {
            if let Ok(resc) = rescaled_to_volume(&cur, out.volume, vt, dim) {
                if let Ok(out_r) = op.eval(&resc, true) {
                    let mr = out_r.energy + penalty * (out_r.volume - vt).abs();
                    if mr <= merit {
                        cur = resc;
                        x = op.pack(&cur);
                        out = out_r;
                        merit = mr;
                        history.push(merit);
                        bb = None;
                    }
                }
            }
        }
    }

    // exact volume restoration; accepted unless it visibly increases the
    // merit (it cannot, beyond rounding, this close to feasibility)
    if let Ok(resc) = rescaled_to_volume(&cur, out.volume, vt, dim) {
        if let Ok(out_r) = op.eval(&resc, false) {
            let mr = out_r.energy + penalty * (out_r.volume - vt).abs();
            if mr <= merit + 1e-10 * (1.0 + merit.abs()) {
                cur = resc;
                if mr <= merit {
                    merit = mr;
                    history.push(merit);
                }
            }
        }
    }

    // torus normal form: translate the barycenter to the origin via ray
    // re-expansion; the energy is translation invariant so this only fixes
    // the reported representation
    if domain.kind == DomainKind::Torus {
        if let Ok(b) = cur.barycenter(&op.grid) {
            if norm3(sub3(b, cur.center)) > 1e-13 * cur.base_radius || norm3(cur.center) > 0.0 {
                if let Ok(re) = reexpand_about(&cur, b, &op.grid) {
                    if let Ok(centered) = DropletShape::new(
                        dim,
                        [0.0; 3],
                        re.base_radius,
                        re.degree,
                        re.coeffs.clone(),
                    ) {
                        if let Ok(o) = op.eval(&centered, false) {
                            if let Ok(fixed) = rescaled_to_volume(&centered, o.volume, vt, dim) {
                                if op.eval(&fixed, false).is_ok() {
                                    cur = fixed;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let el = el_residual(domain, params, &cur, options.el_resolution)?;
    let converged = el.residual_linf < options.tol;
    if converged && stop == StopReason::LineSearchStall {
        // the stall happened at the resolution floor of an actual critical
        // point; report it as stationary
        stop = StopReason::Stationary;
    }
    let breakdown = energy::penalized_breakdown(domain, params, &cur, 0)?;
    let final_vol = op.eval(&cur, false)?.volume;
    let min_curvature = min_principal_curvature(&cur, &op.grid)?;
    Ok(MinimizeResult {
        shape: cur,
        energy: breakdown,
        el,
        iterations,
        converged,
        stop_reason: stop,
        history,
        min_curvature,
        volume_error: (final_vol - vt).abs(),
    })
}

/// Worst relative disagreement between the exact DOF gradient and central
/// differences of the discrete energy along `directions` random unit
/// directions (coefficients and center blocks together).  The finite
/// difference runs on the smooth energy, not the penalized merit, whose
/// volume term has a kink at feasibility.
pub fn gradient_consistency(
    domain: &Domain,
    params: &ModelParams,
    shape: &DropletShape,
    options: &OptimOptions,
    seed: u64,
    directions: usize,
) -> Result<f64> {
    params.validate(domain)?;
    let op = DiscreteEnergy::new(domain, params, shape, options.resolution)?;
    let out = op.eval(shape, true)?;
    let x = op.pack(shape);
    let nd = op.dof_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 3e-6 * shape.base_radius;
    let mut worst = 0.0f64;
    for _ in 0..directions.max(1) {
        let mut d: Vec<f64> = (0..nd).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let dn = dot(&d, &d).sqrt();
        if dn == 0.0 {
            continue;
        }
        for v in &mut d {
            *v /= dn;
        }
        let probe = |sgn: f64| -> Result<f64> {
            let xp: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + sgn * h * b).collect();
            let sh = op.shape_with(shape.base_radius, &xp)?;
            Ok(op.eval(&sh, false)?.energy)
        };
        let fp = probe(1.0)?;
        let fm = probe(-1.0)?;
        let fd = (fp - fm) / (2.0 * h);
        let gd = dot(&out.grad_e, &d);
        let denom = gd.abs().max(fd.abs()).max(1e-12);
        worst = worst.max((gd - fd).abs() / denom);
    }
    Ok(worst)
}
