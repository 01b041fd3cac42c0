//! Experiment harness: persistent, reproducible sweeps that measure the
//! quantitative behavior of the droplet model against closed-form
//! references.
//!
//! Five experiments:
//!
//! * [`run_energy_expansion`]: minimize at each radius of a sweep and
//!   regress the energies onto the small-radius basis; recovers the
//!   perimeter coefficient, the free-space self-interaction term, and the
//!   Robin constant of the domain as fitted quantities.
//! * [`run_rate_fit`]: log-log slope of the minimizer's deviation from the
//!   round ball against the radius, plus the ratio to the expected
//!   gamma * r^(n+3) scale.
//! * [`run_centering`]: ball domain; balls started off-center drift to the
//!   domain center under repeated minimize/re-seed rounds.
//! * [`run_no_sphere`]: Euler-Lagrange residual of exact spheres, which
//!   vanishes only for the centered ball in a ball domain.
//! * [`run_uniqueness`]: many seeded random starts converge to the same
//!   droplet, with matching energies.
//!
//! Every run is deterministic given (seed, resolutions). With an output
//! directory set, each run writes one JSON report and appends rows to an
//! aggregate CSV; re-running reproduces the bytes apart from the elapsed
//! time field. Reports carry a provenance block (config hash, version,
//! resolutions) so downstream consumers can cite their inputs.
//!
//! Convention note: the energy identity used for the analytic targets is
//!
//! ```text
//! F(B_r(p)) = n w_n r^(n-1) + gamma * ( -I_Gamma(r) + (w_n r^n)^2 g_r(p) ),
//! ```
//!
//! where I_Gamma is the double ball integral of the free-space kernel and
//! g_r(p) = h(p) + r^2 / ((n+2)|Omega|) exactly (see [`ball_energy_closed`]).
//! Textbook variants of the same expansion circulate with the opposite sign
//! on the I_Gamma term and with two different values of the n = 2 constant;
//! the fit reports its distance to those variants next to the value derived
//! from the identity above, which the production energy routes reproduce to
//! round-off.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{unit_ball_volume, Domain, DomainKind};
use crate::energy::{self, ModelParams};
use crate::greens::{gamma_double_ball, regular_part_ball_closed, GreenEvaluator};
use crate::numerics::fnv1a64;
use crate::optimize::{self, ELReport, MinimizeResult, OptimOptions};
use crate::shape::{self, frankel_asymmetry, DropletShape};
use crate::{version_string, Error, Result, SCHEMA_VERSION};

use std::f64::consts::PI;

/// Deviation norms below this are treated as numerical floor in rate fits.
pub const RATE_FLOOR: f64 = 1e-11;
/// Distance to the domain center counted as "centered".
pub const CENTER_TOL: f64 = 1e-3;
/// Maximum energy spread across starts for a conclusive uniqueness run.
pub const UNIQUE_ENERGY_SPREAD: f64 = 1e-7;

/// Fit needs at least one point more than the basis has columns.
const MIN_FIT_POINTS: usize = 5;

// ---------------------------------------------------------------------------
// sweep configuration and provenance

/// Configuration of one sweep: domain, coupling, radii, the ladder of
/// evaluation resolutions, the RNG seed, and an optional output directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepSpec {
    pub domain: Domain,
    pub gamma: f64,
    /// Droplet radii, strictly ascending, all satisfying containment.
    pub rs: Vec<f64>,
    /// Evaluation resolutions, strictly ascending (torus lattice cutoff or
    /// ball series degree). The last rung is the reported one; earlier
    /// rungs feed the self-consistency drift.
    pub resolutions: Vec<usize>,
    pub seed: u64,
    /// When set, reports are persisted under this directory.
    pub out_dir: Option<String>,
}

impl SweepSpec {
    pub fn new(
        domain: Domain,
        gamma: f64,
        rs: Vec<f64>,
        resolutions: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let spec = SweepSpec { domain, gamma, rs, resolutions, seed, out_dir: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_output(mut self, dir: &str) -> Self {
        self.out_dir = Some(dir.to_string());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.rs.is_empty() {
            return Err(Error::Config("sweep needs at least one radius".into()));
        }
        for w in self.rs.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Config(format!(
                    "radii must be strictly ascending, got {} after {}",
                    w[1], w[0]
                )));
            }
        }
        let limit = match self.domain.kind {
            DomainKind::Torus => 0.5 * (1.0 - 1e-9),
            DomainKind::Ball => self.domain.radius * (1.0 - 1e-9),
        };
        for &r in &self.rs {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("radius must be positive, got {r}")));
            }
            if r >= limit {
                return Err(Error::Geometry(format!(
                    "radius {r} violates containment in the {:?} domain (limit {limit})",
                    self.domain.kind
                )));
            }
        }
        if self.resolutions.is_empty() {
            return Err(Error::Config("resolution ladder must not be empty".into()));
        }
        for w in self.resolutions.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("resolution ladder must be strictly ascending".into()));
            }
        }
        if self.resolutions[0] < 4 {
            return Err(Error::Config("resolutions below 4 resolve nothing".into()));
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical config string; stable across runs and
    /// platforms, used to key output files.
    pub fn config_hash(&self) -> String {
        let s = format!(
            "{:?}|{}|{:?}|{:?}|{:?}|{:?}|{}",
            self.domain.kind, self.domain.dim, self.domain.radius, self.gamma, self.rs,
            self.resolutions, self.seed
        );
        format!("{:016x}", fnv1a64(s.as_bytes()))
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            schema_version: SCHEMA_VERSION,
            version: version_string(),
            config_hash: self.config_hash(),
            seed: self.seed,
            resolutions: self.resolutions.clone(),
        }
    }

    fn out(&self) -> Option<&Path> {
        self.out_dir.as_deref().map(Path::new)
    }

    fn kind_str(&self) -> &'static str {
        domain_kind_str(&self.domain)
    }
}

/// Identification block stamped into every persisted report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub schema_version: u32,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub resolutions: Vec<usize>,
}

fn domain_kind_str(domain: &Domain) -> &'static str {
    match domain.kind {
        DomainKind::Torus => "torus",
        DomainKind::Ball => "ball",
    }
}

// ---------------------------------------------------------------------------
// closed-form references

/// Robin constant of the domain: diagonal of the regular part at the
/// center. Torus by Ewald summation, ball in closed form.
pub fn robin_reference(domain: &Domain) -> Result<f64> {
    match domain.kind {
        DomainKind::Torus => Ok(GreenEvaluator::new(*domain)?.torus_robin()),
        DomainKind::Ball => {
            Ok(regular_part_ball_closed([0.0; 3], [0.0; 3], domain.radius, domain.dim))
        }
    }
}

/// Exact energy of the round ball B_r(c).
///
/// The regular part splits as (|x|^2 + |y|^2) / (2n|Omega|) plus a kernel
/// harmonic in each variable separately, so the double ball average
/// collapses by the mean value property:
///
/// ```text
/// avg_{B_r(c) x B_r(c)} R = h(c) + r^2 / ((n+2)|Omega|),    h(c) = R(c, c),
/// ```
///
/// with no higher-order remainder. Together with the closed-form double
/// ball integral of the free-space kernel this pins every coefficient of
/// the small-radius expansion; the production energy routes agree with it
/// to their truncation accuracy (see tests).
pub fn ball_energy_closed(domain: &Domain, gamma: f64, r: f64, center: [f64; 3]) -> Result<f64> {
    let n = domain.dim;
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Config(format!("radius must be positive, got {r}")));
    }
    let cnorm = center.iter().take(n).map(|v| v * v).sum::<f64>().sqrt();
    match domain.kind {
        DomainKind::Torus => {
            if 2.0 * r >= 1.0 {
                return Err(Error::Geometry(format!(
                    "ball of radius {r} wraps around the unit torus"
                )));
            }
        }
        DomainKind::Ball => {
            if cnorm + r >= domain.radius {
                return Err(Error::Geometry(format!(
                    "ball of radius {r} at distance {cnorm} leaves the domain"
                )));
            }
        }
    }
    let h = match domain.kind {
        DomainKind::Torus => GreenEvaluator::new(*domain)?.torus_robin(),
        DomainKind::Ball => regular_part_ball_closed(center, center, domain.radius, n),
    };
    let wn = unit_ball_volume(n);
    let nf = n as f64;
    let vol = wn * r.powi(n as i32);
    let g_r = h + r * r / ((nf + 2.0) * domain.volume);
    let per = nf * wn * r.powf(nf - 1.0);
    Ok(per + gamma * (-gamma_double_ball(r, n) + vol * vol * g_r))
}

// ---------------------------------------------------------------------------
// expansion fit

/// One alternative value of a fitted coefficient, with its relative
/// distance from the fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Candidate {
    pub label: String,
    pub value: f64,
    pub rel_distance: f64,
}

/// One basis term of the expansion fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TermFit {
    pub name: String,
    /// Basis monomial, e.g. "r^4 ln r".
    pub power: String,
    pub fitted: f64,
    /// Analytic value from the closed-form identity.
    pub target: f64,
    /// |fitted - target| / |target| (absolute difference when the target
    /// vanishes, e.g. at gamma = 0).
    pub rel_err: f64,
    /// Coefficient change between the last two resolution rungs; None with
    /// a single-rung ladder.
    pub ladder_drift: Option<f64>,
    /// Circulating variants of the same coefficient, reported by distance.
    pub candidates: Vec<Candidate>,
}

/// Pure fit output, before provenance and persistence are attached.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitCore {
    pub terms: Vec<TermFit>,
    /// Weighted root-mean-square residual of the regression.
    pub residual_wrms: f64,
    /// Largest |model - energy| / |energy| over the sweep.
    pub residual_max_rel: f64,
    /// Condition number of the column-equilibrated weighted design matrix;
    /// measures collinearity of the basis on this sweep, not column scale.
    pub condition: f64,
    /// Robin constant extracted from the fitted coefficients (None at
    /// gamma = 0, where the nonlocal terms vanish).
    pub robin_measured: Option<f64>,
    pub robin_target: f64,
    pub robin_rel_err: Option<f64>,
}

/// One radius of an expansion sweep.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExpansionPoint {
    pub r: f64,
    pub converged: bool,
    /// Total energy per resolution rung; empty when minimize failed here.
    pub energies: Vec<f64>,
}

/// Full expansion report: per-radius energies on the resolution ladder and
/// the regression of the last rung onto the small-radius basis.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExpansionFit {
    pub provenance: Provenance,
    pub domain_kind: String,
    pub dim: usize,
    pub gamma: f64,
    pub points: Vec<ExpansionPoint>,
    pub terms: Vec<TermFit>,
    pub residual_wrms: f64,
    pub residual_max_rel: f64,
    pub condition: f64,
    pub robin_measured: Option<f64>,
    pub robin_target: f64,
    pub robin_rel_err: Option<f64>,
    pub all_converged: bool,
    pub flags: Vec<String>,
    pub elapsed_ms: f64,
}

/// Expansion basis at radius r. Powers: n = 2 gives {r, r^4 ln r, r^4,
/// r^6}; n = 3 gives {r^2, r^5, r^6, r^8}. The last column is the exact
/// quadratic correction from g_r - h; including it keeps the lower columns
/// unbiased on sweeps that reach moderate radii.
fn basis_row(dim: usize, r: f64) -> Vec<f64> {
    match dim {
        2 => vec![r, r.powi(4) * r.ln(), r.powi(4), r.powi(6)],
        _ => vec![r * r, r.powi(5), r.powi(6), r.powi(8)],
    }
}

fn basis_names(dim: usize) -> (Vec<&'static str>, Vec<&'static str>) {
    match dim {
        2 => (
            vec!["perimeter", "free-space log", "robin plus free-space constant", "volume correction"],
            vec!["r", "r^4 ln r", "r^4", "r^6"],
        ),
        _ => (
            vec!["perimeter", "free-space", "robin", "volume correction"],
            vec!["r^2", "r^5", "r^6", "r^8"],
        ),
    }
}

/// Analytic coefficients for the basis of `basis_row`, from the exact ball
/// energy. `h` is the Robin constant of the domain at the sweep center.
fn expansion_targets(domain: &Domain, gamma: f64, h: f64) -> (Vec<f64>, Vec<Vec<Candidate>>) {
    let n = domain.dim;
    let wn = unit_ball_volume(n);
    let nf = n as f64;
    let vol_om = domain.volume;
    let correction = gamma * wn * wn / ((nf + 2.0) * vol_om);
    let mk = |label: &str, value: f64, target: f64| Candidate {
        label: label.to_string(),
        value,
        rel_distance: rel_diff(value, target),
    };
    match n {
        2 => {
            let log_t = -gamma * PI / 2.0;
            let const_t = gamma * (PI * PI * h + PI / 8.0);
            let cand_log = vec![mk("+pi/2 (opposite sign)", gamma * PI / 2.0, log_t)];
            let cand_const = vec![
                mk("pi^2 h - 1/8", gamma * (PI * PI * h - 0.125), const_t),
                mk("pi^2 h - 3 pi/8", gamma * (PI * PI * h - 3.0 * PI / 8.0), const_t),
            ];
            (
                vec![2.0 * PI, log_t, const_t, correction],
                vec![vec![], cand_log, cand_const, vec![]],
            )
        }
        _ => {
            let free = gamma * 8.0 * PI / 15.0;
            let cand_free =
                vec![mk("2 w_n / (4 - n^2) (opposite sign)", -gamma * 8.0 * PI / 15.0, free)];
            (
                vec![4.0 * PI, free, gamma * wn * wn * h, correction],
                vec![vec![], cand_free, vec![], vec![]],
            )
        }
    }
}

fn rel_diff(value: f64, target: f64) -> f64 {
    let denom = if target.abs() > 0.0 { target.abs() } else { 1.0 };
    (value - target).abs() / denom
}

/// Weighted least squares with column equilibration. Returns the
/// coefficients, the condition number of the equilibrated matrix, and the
/// unweighted residuals.
fn weighted_ls(
    rows: &[Vec<f64>],
    rhs: &[f64],
    weights: &[f64],
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let m = rows.len();
    let p = rows[0].len();
    let mut col_norm = vec![0.0f64; p];
    for (row, &w) in rows.iter().zip(weights) {
        for (j, &v) in row.iter().enumerate() {
            col_norm[j] += (w * v) * (w * v);
        }
    }
    for c in col_norm.iter_mut() {
        *c = c.sqrt();
        if *c == 0.0 {
            *c = 1.0;
        }
    }
    let a = nalgebra::DMatrix::from_fn(m, p, |i, j| weights[i] * rows[i][j] / col_norm[j]);
    let b = nalgebra::DVector::from_fn(m, |i, _| weights[i] * rhs[i]);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) {
        return Err(Error::Numerics("expansion design matrix is singular".into()));
    }
    let sol = svd
        .solve(&b, smin * 1e-13)
        .map_err(|e| Error::Numerics(format!("least squares solve failed: {e}")))?;
    let coeffs: Vec<f64> = (0..p).map(|j| sol[j] / col_norm[j]).collect();
    let residuals: Vec<f64> = rows
        .iter()
        .zip(rhs)
        .map(|(row, &f)| row.iter().zip(&coeffs).map(|(v, c)| v * c).sum::<f64>() - f)
        .collect();
    Ok((coeffs, smax / smin, residuals))
}

/// Regress measured energies onto the expansion basis and compare with the
/// analytic coefficients. Weights are r^-(n-1), balancing the dynamic
/// range so the leading term cannot drown the corrections.
pub fn fit_energy_points(
    domain: &Domain,
    gamma: f64,
    rs: &[f64],
    energies: &[f64],
) -> Result<FitCore> {
    if rs.len() != energies.len() {
        return Err(Error::Config("radii and energies must have equal length".into()));
    }
    if rs.len() < MIN_FIT_POINTS {
        return Err(Error::Config(format!(
            "expansion fit needs at least {MIN_FIT_POINTS} points, got {}",
            rs.len()
        )));
    }
    for w in rs.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Config("radii must be strictly ascending".into()));
        }
    }
    if !(rs[0] > 0.0) {
        return Err(Error::Config("radii must be positive".into()));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::Config("energies must be finite".into()));
    }
    let dim = domain.dim;
    let nf = dim as f64;
    let h = robin_reference(domain)?;
    let (targets, candidates) = expansion_targets(domain, gamma, h);
    let (names, powers) = basis_names(dim);
    let rows: Vec<Vec<f64>> = rs.iter().map(|&r| basis_row(dim, r)).collect();
    let weights: Vec<f64> = rs.iter().map(|&r| r.powf(-(nf - 1.0))).collect();
    let (coeffs, condition, residuals) = weighted_ls(&rows, energies, &weights)?;

    let terms: Vec<TermFit> = (0..coeffs.len())
        .map(|j| TermFit {
            name: names[j].to_string(),
            power: powers[j].to_string(),
            fitted: coeffs[j],
            target: targets[j],
            rel_err: rel_diff(coeffs[j], targets[j]),
            ladder_drift: None,
            candidates: candidates[j]
                .iter()
                .map(|c| Candidate {
                    label: c.label.clone(),
                    value: c.value,
                    rel_distance: rel_diff(coeffs[j], c.value),
                })
                .collect(),
        })
        .collect();

    let wrms = (residuals
        .iter()
        .zip(&weights)
        .map(|(r, w)| (r * w) * (r * w))
        .sum::<f64>()
        / residuals.len() as f64)
        .sqrt();
    let max_rel = residuals
        .iter()
        .zip(energies)
        .map(|(r, f)| r.abs() / f.abs().max(1e-300))
        .fold(0.0f64, f64::max);

    // The r^(2n) column holds gamma w_n^2 h, shifted by the free-space
    // constant pi/8 in two dimensions where the powers coincide.
    let robin_measured = if gamma > 0.0 {
        let wn = unit_ball_volume(dim);
        let extra = if dim == 2 { PI / 8.0 } else { 0.0 };
        Some((coeffs[2] / gamma - extra) / (wn * wn))
    } else {
        None
    };
    let robin_rel_err = robin_measured.map(|m| rel_diff(m, h));

    Ok(FitCore {
        terms,
        residual_wrms: wrms,
        residual_max_rel: max_rel,
        condition,
        robin_measured,
        robin_target: h,
        robin_rel_err,
    })
}

fn minimize_ball_start(
    domain: &Domain,
    gamma: f64,
    r: f64,
    degree: usize,
    options: &OptimOptions,
) -> Result<MinimizeResult> {
    let params = ModelParams::from_droplet_radius(domain, gamma, r)?;
    let initial = DropletShape::ball_at(domain.dim, [0.0; 3], r, degree)?;
    optimize::minimize(domain, &params, &initial, options)
}

fn check_regime(domain: &Domain, gamma: f64, rs: &[f64]) -> Result<()> {
    for &r in rs {
        let p = ModelParams::from_droplet_radius(domain, gamma, r)?;
        if !(p.regime_parameter(domain.dim) < p.small_delta) {
            return Err(Error::Config(format!(
                "radius {r} at gamma {gamma} leaves the small-droplet regime"
            )));
        }
    }
    Ok(())
}

/// Minimize at every radius of the sweep, evaluate the resulting shapes on
/// the resolution ladder, and regress the last rung onto the expansion
/// basis. Failed or unconverged radii are excluded from the regression and
/// flagged; the run still returns a partial report.
pub fn run_energy_expansion(spec: &SweepSpec) -> Result<ExpansionFit> {
    let t0 = Instant::now();
    spec.validate()?;
    let domain = spec.domain;
    check_regime(&domain, spec.gamma, &spec.rs)?;
    let dim = domain.dim;
    let degree = if dim == 2 { 6 } else { 4 };
    let options = OptimOptions::default();

    // Descent runs at its own operator defaults; the ladder applies to the
    // energies of the final shapes, which is what the fit consumes.
    let runs: Vec<Result<MinimizeResult>> = spec
        .rs
        .par_iter()
        .map(|&r| minimize_ball_start(&domain, spec.gamma, r, degree, &options))
        .collect();

    let mut flags = Vec::new();
    let mut points = Vec::with_capacity(spec.rs.len());
    let mut kept: Vec<(f64, DropletShape)> = Vec::new();
    for (&r, run) in spec.rs.iter().zip(runs) {
        match run {
            Ok(res) => {
                if !res.converged {
                    flags.push(format!("unconverged minimization at r = {r}"));
                }
                points.push(ExpansionPoint { r, converged: res.converged, energies: Vec::new() });
                if res.converged {
                    kept.push((r, res.shape));
                }
            }
            Err(e) => {
                flags.push(format!("minimization failed at r = {r}: {e}"));
                points.push(ExpansionPoint { r, converged: false, energies: Vec::new() });
            }
        }
    }
    let all_converged = flags.is_empty();

    let mut fit_prev: Option<FitCore> = None;
    let mut fit_last: Option<FitCore> = None;
    for &rung in &spec.resolutions {
        let energies: Vec<Result<f64>> = kept
            .par_iter()
            .map(|(r, shape)| {
                let params = ModelParams::from_droplet_radius(&domain, spec.gamma, *r)?;
                Ok(energy::total_energy(&domain, &params, shape, rung)?.total)
            })
            .collect();
        let mut es = Vec::with_capacity(kept.len());
        for ((r, _), e) in kept.iter().zip(energies) {
            let e = e.map_err(|err| {
                Error::Numerics(format!("energy evaluation failed at r = {r}, rung {rung}: {err}"))
            })?;
            es.push(e);
        }
        for point in points.iter_mut().filter(|p| p.converged) {
            let idx = kept.iter().position(|(r, _)| *r == point.r).expect("kept radius");
            point.energies.push(es[idx]);
        }
        if kept.len() >= MIN_FIT_POINTS {
            let rs_kept: Vec<f64> = kept.iter().map(|(r, _)| *r).collect();
            fit_prev = fit_last.take();
            fit_last = Some(fit_energy_points(&domain, spec.gamma, &rs_kept, &es)?);
        }
    }

    let mut report = match fit_last {
        Some(mut core) => {
            if let Some(prev) = fit_prev {
                for (t, tp) in core.terms.iter_mut().zip(&prev.terms) {
                    t.ladder_drift = Some((t.fitted - tp.fitted).abs());
                }
            }
            ExpansionFit {
                provenance: spec.provenance(),
                domain_kind: spec.kind_str().to_string(),
                dim,
                gamma: spec.gamma,
                points,
                terms: core.terms,
                residual_wrms: core.residual_wrms,
                residual_max_rel: core.residual_max_rel,
                condition: core.condition,
                robin_measured: core.robin_measured,
                robin_target: core.robin_target,
                robin_rel_err: core.robin_rel_err,
                all_converged,
                flags,
                elapsed_ms: 0.0,
            }
        }
        None => {
            flags.push(format!(
                "only {} converged radii, fewer than the {MIN_FIT_POINTS} the fit needs",
                kept.len()
            ));
            ExpansionFit {
                provenance: spec.provenance(),
                domain_kind: spec.kind_str().to_string(),
                dim,
                gamma: spec.gamma,
                points,
                terms: Vec::new(),
                residual_wrms: 0.0,
                residual_max_rel: 0.0,
                condition: 0.0,
                robin_measured: None,
                robin_target: robin_reference(&domain)?,
                robin_rel_err: None,
                all_converged,
                flags,
                elapsed_ms: 0.0,
            }
        }
    };
    report.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;

    if let Some(dir) = spec.out() {
        let name = format!("expansion-{}d-{}-{}.json", dim, report.domain_kind, spec.config_hash());
        write_json(&dir.join(name), &report)?;
        let rows: Vec<String> = report
            .points
            .iter()
            .flat_map(|p| {
                spec.resolutions.iter().zip(p.energies.iter().map(Some).chain(std::iter::repeat(None))).map(
                    move |(res, e)| {
                        format!(
                            "{},{},{},{},{},{},{},{}",
                            report.provenance.config_hash,
                            report.domain_kind,
                            dim,
                            fmt_f(report.gamma),
                            fmt_f(p.r),
                            res,
                            e.map(|v| fmt_f(*v)).unwrap_or_default(),
                            p.converged
                        )
                    },
                )
            })
            .collect();
        append_csv(
            &dir.join("expansion.csv"),
            "config_hash,domain,dim,gamma,r,resolution,energy,converged",
            &rows,
        )?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// deviation rate fit

/// Pure rate-fit output on given deviation norms.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RateCore {
    /// Log-log slope of the deviation norm against the radius; None when
    /// too few points rise above the floor.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// norm / (gamma r^(n+3)) per radius; empty at gamma = 0.
    pub ratios: Vec<f64>,
    pub max_ratio: Option<f64>,
    pub min_ratio: Option<f64>,
    /// True when every norm sits below `RATE_FLOOR`.
    pub floor_limited: bool,
    /// Points that entered the slope fit.
    pub used_points: usize,
}

/// Fit a power law to deviation norms. Norms below `RATE_FLOOR` are
/// excluded from the slope; with fewer than two points left the slope is
/// None and, if nothing survived, the run is marked floor-limited.
pub fn rate_fit_from_norms(
    dim: usize,
    gamma: f64,
    rs: &[f64],
    norms: &[f64],
) -> Result<RateCore> {
    if rs.len() != norms.len() || rs.is_empty() {
        return Err(Error::Config("radii and norms must match and be nonempty".into()));
    }
    if norms.iter().any(|n| !n.is_finite() || *n < 0.0) {
        return Err(Error::Config("deviation norms must be finite and nonnegative".into()));
    }
    let nf = dim as f64;
    let ratios: Vec<f64> = if gamma > 0.0 {
        rs.iter().zip(norms).map(|(&r, &n)| n / (gamma * r.powf(nf + 3.0))).collect()
    } else {
        Vec::new()
    };
    let above: Vec<(f64, f64)> =
        rs.iter().zip(norms).filter(|(_, &n)| n > RATE_FLOOR).map(|(&r, &n)| (r, n)).collect();
    let floor_limited = above.is_empty();
    let (slope, intercept) = if above.len() >= 2 {
        let xs: Vec<f64> = above.iter().map(|(r, _)| r.ln()).collect();
        let ys: Vec<f64> = above.iter().map(|(_, n)| n.ln()).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        (Some(sxy / sxx), Some(my - sxy / sxx * mx))
    } else {
        (None, None)
    };
    let max_ratio = ratios.iter().cloned().fold(None, |a: Option<f64>, v| Some(a.map_or(v, |x| x.max(v))));
    let min_ratio = ratios.iter().cloned().fold(None, |a: Option<f64>, v| Some(a.map_or(v, |x| x.min(v))));
    Ok(RateCore {
        slope,
        intercept,
        ratios,
        max_ratio,
        min_ratio,
        floor_limited,
        used_points: above.len(),
    })
}

/// Full rate report: minimizer deviation norms across the sweep plus the
/// power-law fit and a linearity probe in gamma.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RateFit {
    pub provenance: Provenance,
    pub domain_kind: String,
    pub dim: usize,
    pub gamma: f64,
    pub rs: Vec<f64>,
    /// C1 norm of the deviation graph, normalized by the ball radius.
    pub c1_norms: Vec<f64>,
    pub converged: Vec<bool>,
    pub all_converged: bool,
    pub core: RateCore,
    /// Deviation ratio after doubling gamma at the largest radius; near 2
    /// in the linear-response regime. None at gamma = 0.
    pub gamma_doubling_ratio: Option<f64>,
    pub flags: Vec<String>,
    pub elapsed_ms: f64,
}

/// Dimensionless C1 size of the minimizer's deviation from its base ball.
fn psi_c1_norm(shape: &DropletShape) -> f64 {
    let grid = shape::default_grid(shape.dim, shape.degree + 4);
    shape.c1_norm(&grid).unweighted / shape.base_radius
}

fn rate_minimize(
    domain: &Domain,
    gamma: f64,
    r: f64,
    degree: usize,
    resolution: usize,
) -> Result<MinimizeResult> {
    let params = ModelParams::from_droplet_radius(domain, gamma, r)?;
    let ball = DropletShape::ball_at(domain.dim, [0.0; 3], r, degree)?;
    // The deviation signal scales like gamma r^(n+3), far below the default
    // tolerance at small radii; aim the stop threshold well under the
    // residual of the unminimized ball so the signal is resolved.
    let el0 = optimize::el_residual(domain, &params, &ball, resolution)?;
    let tol = (el0.residual_linf * 1e-3).clamp(1e-10, 1e-5);
    let options = OptimOptions {
        max_iters: 2000,
        tol,
        gtol: 1e-13,
        resolution,
        el_resolution: resolution,
        ..OptimOptions::default()
    };
    optimize::minimize(domain, &params, &ball, &options)
}

/// Minimize across the sweep and fit the deviation-vs-radius power law.
/// Precondition: at least 4 radii spanning a factor of 3.
pub fn run_rate_fit(spec: &SweepSpec) -> Result<RateFit> {
    let t0 = Instant::now();
    spec.validate()?;
    if spec.rs.len() < 4 {
        return Err(Error::Config("rate fit needs at least 4 radii".into()));
    }
    if spec.rs[spec.rs.len() - 1] / spec.rs[0] < 3.0 - 1e-12 {
        return Err(Error::Config("rate fit needs radii spanning a factor of 3".into()));
    }
    let domain = spec.domain;
    check_regime(&domain, spec.gamma, &spec.rs)?;
    let dim = domain.dim;
    let degree = if dim == 2 { 6 } else { 4 };
    let resolution = *spec.resolutions.last().expect("validated nonempty");

    let runs: Vec<Result<MinimizeResult>> = spec
        .rs
        .par_iter()
        .map(|&r| rate_minimize(&domain, spec.gamma, r, degree, resolution))
        .collect();

    let mut flags = Vec::new();
    let mut c1_norms = Vec::with_capacity(runs.len());
    let mut converged = Vec::with_capacity(runs.len());
    for (&r, run) in spec.rs.iter().zip(&runs) {
        match run {
            Ok(res) => {
                converged.push(res.converged);
                if !res.converged {
                    flags.push(format!("unconverged minimization at r = {r}"));
                }
                c1_norms.push(psi_c1_norm(&res.shape));
            }
            Err(e) => {
                converged.push(false);
                flags.push(format!("minimization failed at r = {r}: {e}"));
                c1_norms.push(0.0);
            }
        }
    }
    let all_converged = converged.iter().all(|&c| c);
    let core = rate_fit_from_norms(dim, spec.gamma, &spec.rs, &c1_norms)?;
    if core.floor_limited {
        flags.push("deviation at numerical floor for every radius".into());
    }

    let gamma_doubling_ratio = if spec.gamma > 0.0 {
        let r_top = *spec.rs.last().expect("nonempty");
        let base = c1_norms[spec.rs.len() - 1];
        if base > RATE_FLOOR && check_regime(&domain, 2.0 * spec.gamma, &[r_top]).is_ok() {
            let doubled = rate_minimize(&domain, 2.0 * spec.gamma, r_top, degree, resolution)?;
            Some(psi_c1_norm(&doubled.shape) / base)
        } else {
            flags.push("gamma doubling probe skipped (floor or regime)".into());
            None
        }
    } else {
        flags.push("gamma = 0: deviation has no nonlocal source".into());
        None
    };

    let mut report = RateFit {
        provenance: spec.provenance(),
        domain_kind: spec.kind_str().to_string(),
        dim,
        gamma: spec.gamma,
        rs: spec.rs.clone(),
        c1_norms,
        converged,
        all_converged,
        core,
        gamma_doubling_ratio,
        flags,
        elapsed_ms: 0.0,
    };
    report.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;

    if let Some(dir) = spec.out() {
        let name = format!("rate-{}d-{}-{}.json", dim, report.domain_kind, spec.config_hash());
        write_json(&dir.join(name), &report)?;
        let rows: Vec<String> = report
            .rs
            .iter()
            .zip(&report.c1_norms)
            .zip(&report.converged)
            .map(|((r, n), c)| {
                format!(
                    "{},{},{},{},{},{},{}",
                    report.provenance.config_hash,
                    report.domain_kind,
                    dim,
                    fmt_f(report.gamma),
                    fmt_f(*r),
                    fmt_f(*n),
                    c
                )
            })
            .collect();
        append_csv(
            &dir.join("rate.csv"),
            "config_hash,domain,dim,gamma,r,c1_norm,converged",
            &rows,
        )?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// recentering minimizer

/// Minimize, then re-seed a round ball at the barycenter and repeat until
/// the center stops moving. Coefficient descent alone cannot translate the
/// droplet farther than the star-shape bound allows in one run; re-basing
/// the graph center between runs removes that ceiling. Returns the final
/// run, the number of outer rounds, and the trace of center distances from
/// the origin.
pub fn minimize_recentered(
    domain: &Domain,
    params: &ModelParams,
    initial: &DropletShape,
    options: &OptimOptions,
    max_outer: usize,
) -> Result<(MinimizeResult, usize, Vec<f64>)> {
    if max_outer == 0 {
        return Err(Error::Config("max_outer must be at least 1".into()));
    }
    let dim = domain.dim;
    let grid = shape::default_grid(dim, initial.degree.max(1));
    let mut current = initial.clone();
    let mut prev_b = initial.barycenter(&grid)?;
    let mut trace = vec![norm3(prev_b, dim)];
    let mut outer = 0;
    let mut last: Option<MinimizeResult> = None;
    for _ in 0..max_outer {
        outer += 1;
        let res = optimize::minimize(domain, params, &current, options)?;
        let b = res.shape.barycenter(&grid)?;
        trace.push(norm3(b, dim));
        let drift = norm3(sub3(b, prev_b), dim);
        prev_b = b;
        let done = drift < 1e-7 && res.converged;
        last = Some(res);
        if done {
            break;
        }
        // Re-seed an exact ball at the barycenter, pulled inward when the
        // containment margin would be violated.
        let mut c = b;
        if domain.kind == DomainKind::Ball {
            let max_c = domain.radius - params.r_m * (1.0 + 1e-6) - 1e-9 * domain.radius;
            let cn = norm3(c, dim);
            if cn > max_c && cn > 0.0 {
                let s = max_c.max(0.0) / cn;
                c = [c[0] * s, c[1] * s, c[2] * s];
            }
        }
        current = DropletShape::ball_at(dim, c, params.r_m, initial.degree)?;
    }
    Ok((last.expect("max_outer >= 1"), outer, trace))
}

fn norm3(v: [f64; 3], dim: usize) -> f64 {
    v.iter().take(dim).map(|x| x * x).sum::<f64>().sqrt()
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

// ---------------------------------------------------------------------------
// centering

/// One radius of a centering sweep.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CenteringStep {
    pub r: f64,
    pub start_offset: f64,
    /// Final distance of the droplet barycenter from the domain center.
    pub dist: f64,
    pub energy: f64,
    pub converged: bool,
    pub outer_rounds: usize,
    /// Center distance non-increasing across the outer rounds.
    pub inward_monotone: bool,
}

/// Centering report for a ball domain: off-center starts drift to the
/// center, and the drift tightens as the radius shrinks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CenteringReport {
    pub provenance: Provenance,
    pub dim: usize,
    pub gamma: f64,
    pub steps: Vec<CenteringStep>,
    /// Distances non-increasing toward small radii (with floor slack).
    pub dist_monotone_in_r: bool,
    /// Distance at the smallest radius.
    pub final_dist: f64,
    /// Energies of exact balls at increasing offsets from the center,
    /// measured with the production route.
    pub offcenter_energies: Vec<(f64, f64)>,
    pub energy_increasing_offcenter: bool,
    pub flags: Vec<String>,
    pub elapsed_ms: f64,
}

/// Run the centering sweep on a ball domain. Each radius starts as a ball
/// offset by half the domain radius (less when containment demands it) and
/// is driven by `minimize_recentered`.
pub fn run_centering(spec: &SweepSpec) -> Result<CenteringReport> {
    let t0 = Instant::now();
    spec.validate()?;
    let domain = spec.domain;
    if domain.kind != DomainKind::Ball {
        return Err(Error::Config("centering requires a ball domain".into()));
    }
    check_regime(&domain, spec.gamma, &spec.rs)?;
    let dim = domain.dim;
    let degree = if dim == 2 { 4 } else { 3 };
    let bigr = domain.radius;

    let runs: Vec<Result<CenteringStep>> = spec
        .rs
        .par_iter()
        .map(|&r| {
            let params = ModelParams::from_droplet_radius(&domain, spec.gamma, r)?;
            let offset = (0.5 * bigr).min(bigr - 1.3 * r).max(0.2 * bigr);
            let start = DropletShape::ball_at(dim, [offset, 0.0, 0.0], r, degree)?;
            let options = OptimOptions {
                max_iters: 250,
                tol: 1e-6,
                ..OptimOptions::default()
            };
            let (res, outer, trace) = minimize_recentered(&domain, &params, &start, &options, 60)?;
            let inward = trace.windows(2).all(|w| w[1] <= w[0] + 1e-6);
            let energy = energy::total_energy(&domain, &params, &res.shape, 0)?.total;
            Ok(CenteringStep {
                r,
                start_offset: offset,
                dist: *trace.last().expect("nonempty trace"),
                energy,
                converged: res.converged,
                outer_rounds: outer,
                inward_monotone: inward,
            })
        })
        .collect();

    let mut flags = Vec::new();
    let mut steps = Vec::with_capacity(runs.len());
    for (&r, run) in spec.rs.iter().zip(runs) {
        match run {
            Ok(step) => {
                if !step.converged {
                    flags.push(format!("unconverged centering run at r = {r}"));
                }
                steps.push(step);
            }
            Err(e) => return Err(Error::Numerics(format!("centering failed at r = {r}: {e}"))),
        }
    }
    // Ascending radii: the distance at a smaller radius may not exceed the
    // one at the next larger radius by more than the numerical floor.
    let dist_monotone_in_r =
        steps.windows(2).all(|w| w[0].dist <= w[1].dist + 1e-4);
    let final_dist = steps.first().map(|s| s.dist).unwrap_or(0.0);

    // Independent prediction: the exact ball energy grows with the offset
    // near the center, so the center is the energy's preferred location.
    let r_probe = spec.rs[0];
    let mut offcenter_energies = Vec::new();
    for k in 0..4 {
        let off = 0.05 * k as f64 * bigr;
        if off + r_probe >= bigr * (1.0 - 1e-6) {
            break;
        }
        let params = ModelParams::from_droplet_radius(&domain, spec.gamma, r_probe)?;
        let ball = DropletShape::ball_at(dim, [off, 0.0, 0.0], r_probe, degree)?;
        let e = energy::total_energy(&domain, &params, &ball, 0)?.total;
        offcenter_energies.push((off, e));
    }
    let energy_increasing_offcenter =
        offcenter_energies.windows(2).all(|w| w[1].1 > w[0].1);

    let mut report = CenteringReport {
        provenance: spec.provenance(),
        dim,
        gamma: spec.gamma,
        steps,
        dist_monotone_in_r,
        final_dist,
        offcenter_energies,
        energy_increasing_offcenter,
        flags,
        elapsed_ms: 0.0,
    };
    report.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;

    if let Some(dir) = spec.out() {
        let name = format!("centering-{}d-{}.json", dim, spec.config_hash());
        write_json(&dir.join(name), &report)?;
        let rows: Vec<String> = report
            .steps
            .iter()
            .map(|s| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    report.provenance.config_hash,
                    dim,
                    fmt_f(report.gamma),
                    fmt_f(s.r),
                    fmt_f(s.start_offset),
                    fmt_f(s.dist),
                    fmt_f(s.energy),
                    s.converged
                )
            })
            .collect();
        append_csv(
            &dir.join("centering.csv"),
            "config_hash,dim,gamma,r,start_offset,dist,energy,converged",
            &rows,
        )?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// criticality of exact spheres

/// Euler-Lagrange residual of one exact sphere placement.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResidualCase {
    pub label: String,
    pub center: [f64; 3],
    pub report: ELReport,
    /// Whether this placement should be a critical point.
    pub expect_critical: bool,
    /// Critical cases must sit below tol/10, non-critical above 10 tol.
    pub passes: bool,
}

/// Residuals of exact spheres in the given domain. The centered ball in a
/// ball domain is critical; every torus sphere and every off-center ball
/// is not.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResidualReport {
    pub provenance: Provenance,
    pub domain_kind: String,
    pub dim: usize,
    pub gamma: f64,
    pub r: f64,
    /// Reference solver tolerance the pass bounds are scaled from.
    pub tol: f64,
    pub cases: Vec<ResidualCase>,
    pub all_pass: bool,
    pub elapsed_ms: f64,
}

/// Evaluate the Euler-Lagrange residual of exact spheres. On a torus the
/// single case is the sphere at the origin (expected non-critical by the
/// broken translation symmetry of the regular part); on a ball domain both
/// the centered (critical) and an off-center (non-critical) placement are
/// reported.
pub fn run_no_sphere(
    domain: &Domain,
    params: &ModelParams,
    r: f64,
    out: Option<&Path>,
) -> Result<ResidualReport> {
    let t0 = Instant::now();
    let params = if (params.r_m - r).abs() <= 1e-12 * r.max(1.0) {
        *params
    } else {
        ModelParams::from_droplet_radius(domain, params.gamma, r)?
    };
    if params.gamma <= 0.0 {
        return Err(Error::Config("sphere criticality needs gamma > 0".into()));
    }
    let dim = domain.dim;
    let degree = if dim == 2 { 6 } else { 4 };
    let tol = optimize::DEFAULT_EL_TOL;

    let mut placements: Vec<(& str, [f64; 3], bool)> = Vec::new();
    match domain.kind {
        DomainKind::Torus => placements.push(("torus sphere", [0.0; 3], false)),
        DomainKind::Ball => {
            placements.push(("centered ball", [0.0; 3], true));
            let off = (0.3 * domain.radius).min(0.5 * (domain.radius - r));
            placements.push(("off-center ball", [off, 0.0, 0.0], false));
        }
    }

    let mut cases = Vec::new();
    for (label, center, expect_critical) in placements {
        let ball = DropletShape::ball_at(dim, center, r, degree)?;
        let report = optimize::el_residual(domain, &params, &ball, 0)?;
        let passes = if expect_critical {
            report.residual_linf < 0.1 * tol
        } else {
            report.residual_linf > 10.0 * tol
        };
        cases.push(ResidualCase { label: label.to_string(), center, report, expect_critical, passes });
    }
    let all_pass = cases.iter().all(|c| c.passes);

    let config = format!(
        "nosphere|{:?}|{}|{:?}|{:?}|{:?}",
        domain.kind, dim, domain.radius, params.gamma, r
    );
    let mut report = ResidualReport {
        provenance: Provenance {
            schema_version: SCHEMA_VERSION,
            version: version_string(),
            config_hash: format!("{:016x}", fnv1a64(config.as_bytes())),
            seed: 0,
            resolutions: vec![],
        },
        domain_kind: domain_kind_str(domain).to_string(),
        dim,
        gamma: params.gamma,
        r,
        tol,
        cases,
        all_pass,
        elapsed_ms: 0.0,
    };
    report.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;

    if let Some(dir) = out {
        let name = format!(
            "residual-{}d-{}-{}.json",
            dim, report.domain_kind, report.provenance.config_hash
        );
        write_json(&dir.join(name), &report)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// uniqueness

/// Outcome of one randomized start.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UniquenessStart {
    pub start_center: [f64; 3],
    pub energy: f64,
    /// Symmetric-difference distance to the best-fitting ball, relative to
    /// the ball volume.
    pub alpha: f64,
    /// Distance of that ball's center from the domain center.
    pub center_dist: f64,
    pub converged: bool,
    pub outer_rounds: usize,
}

/// Report of a multi-start uniqueness run on a ball domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UniquenessReport {
    pub provenance: Provenance,
    pub dim: usize,
    pub gamma: f64,
    pub r: f64,
    pub n_starts: usize,
    pub starts: Vec<UniquenessStart>,
    /// Max minus min energy over converged starts.
    pub energy_spread: f64,
    pub max_alpha: f64,
    pub max_center_dist: f64,
    pub all_converged: bool,
    /// Set when any start failed to converge; assertions are then void.
    pub inconclusive: bool,
    /// Set when the sweep leaves the small-droplet regime; outcomes are
    /// recorded without any uniqueness claim.
    pub out_of_regime: bool,
    /// gamma = 0: the center feels no force, so its final position is
    /// reported but not asserted against.
    pub center_free: bool,
    pub flags: Vec<String>,
    pub elapsed_ms: f64,
}

/// Minimize from `n_starts` seeded random initial droplets and compare the
/// outcomes. All starts are drawn up-front from one ChaCha stream, so the
/// run is reproducible regardless of thread scheduling.
pub fn run_uniqueness(
    domain: &Domain,
    params: &ModelParams,
    n_starts: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<UniquenessReport> {
    let t0 = Instant::now();
    if domain.kind != DomainKind::Ball {
        return Err(Error::Config("uniqueness runs on a ball domain".into()));
    }
    if n_starts == 0 {
        return Err(Error::Config("n_starts must be at least 1".into()));
    }
    params.validate(domain)?;
    let dim = domain.dim;
    let r = params.r_m;
    let degree = if dim == 2 { 4 } else { 3 };
    let out_of_regime = !(params.regime_parameter(dim) < params.small_delta);
    let center_free = params.gamma == 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut initials = Vec::with_capacity(n_starts);
    let c_max = 0.3 * (domain.radius - r);
    let grid = shape::default_grid(dim, degree);
    for _ in 0..n_starts {
        let center = random_center(&mut rng, dim, c_max);
        let mut amp = 0.1 * r;
        let shape = loop {
            let nc = shape::coeff_count(dim, degree);
            let coeffs: Vec<f64> = (0..nc).map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * amp).collect();
            let candidate = DropletShape::new(dim, center, r, degree, coeffs)?;
            if candidate.validate(&grid).is_ok() {
                break candidate;
            }
            amp *= 0.5;
        };
        initials.push(shape);
    }

    let options = OptimOptions { max_iters: 250, tol: 1e-6, ..OptimOptions::default() };
    let runs: Vec<Result<UniquenessStart>> = initials
        .par_iter()
        .map(|initial| {
            let (res, outer, _) = minimize_recentered(domain, params, initial, &options, 40)?;
            let fine = shape::default_grid(dim, res.shape.degree.max(1));
            let asym = frankel_asymmetry(&res.shape, &fine)?;
            let energy = energy::total_energy(domain, params, &res.shape, 0)?.total;
            Ok(UniquenessStart {
                start_center: initial.center,
                energy,
                alpha: asym.alpha,
                center_dist: norm3(asym.optimal_center, dim),
                converged: res.converged,
                outer_rounds: outer,
            })
        })
        .collect();

    let mut flags = Vec::new();
    let mut starts = Vec::with_capacity(n_starts);
    for (i, run) in runs.into_iter().enumerate() {
        match run {
            Ok(s) => {
                if !s.converged {
                    flags.push(format!("start {i} did not converge"));
                }
                starts.push(s);
            }
            Err(e) => return Err(Error::Numerics(format!("start {i} failed: {e}"))),
        }
    }
    let conv: Vec<&UniquenessStart> = starts.iter().filter(|s| s.converged).collect();
    let energy_spread = match conv.len() {
        0 => 0.0,
        _ => {
            let max = conv.iter().map(|s| s.energy).fold(f64::NEG_INFINITY, f64::max);
            let min = conv.iter().map(|s| s.energy).fold(f64::INFINITY, f64::min);
            max - min
        }
    };
    let max_alpha = starts.iter().map(|s| s.alpha).fold(0.0f64, f64::max);
    let max_center_dist = starts.iter().map(|s| s.center_dist).fold(0.0f64, f64::max);
    let all_converged = starts.iter().all(|s| s.converged);
    if out_of_regime {
        flags.push("outside the small-droplet regime; outcomes recorded, nothing asserted".into());
    }
    if center_free {
        flags.push("gamma = 0: center position is unconstrained".into());
    }

    let config = format!(
        "uniq|{:?}|{}|{:?}|{:?}|{:?}|{}|{}",
        domain.kind, dim, domain.radius, params.gamma, r, n_starts, seed
    );
    let mut report = UniquenessReport {
        provenance: Provenance {
            schema_version: SCHEMA_VERSION,
            version: version_string(),
            config_hash: format!("{:016x}", fnv1a64(config.as_bytes())),
            seed,
            resolutions: vec![],
        },
        dim,
        gamma: params.gamma,
        r,
        n_starts,
        starts,
        energy_spread,
        max_alpha,
        max_center_dist,
        all_converged,
        inconclusive: !all_converged,
        out_of_regime,
        center_free,
        flags,
        elapsed_ms: 0.0,
    };
    report.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;

    if let Some(dir) = out {
        let name = format!("uniqueness-{}d-{}.json", dim, report.provenance.config_hash);
        write_json(&dir.join(name), &report)?;
        let rows: Vec<String> = report
            .starts
            .iter()
            .enumerate()
            .map(|(i, s)| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    report.provenance.config_hash,
                    dim,
                    i,
                    fmt_f(s.energy),
                    fmt_f(s.alpha),
                    fmt_f(s.center_dist),
                    s.converged,
                    s.outer_rounds
                )
            })
            .collect();
        append_csv(
            &dir.join("uniqueness.csv"),
            "config_hash,dim,start,energy,alpha,center_dist,converged,outer_rounds",
            &rows,
        )?;
    }
    Ok(report)
}

fn random_center(rng: &mut ChaCha8Rng, dim: usize, c_max: f64) -> [f64; 3] {
    if dim == 2 {
        let theta = 2.0 * PI * rng.gen::<f64>();
        let rad = c_max * rng.gen::<f64>().sqrt();
        [rad * theta.cos(), rad * theta.sin(), 0.0]
    } else {
        let z = 2.0 * rng.gen::<f64>() - 1.0;
        let phi = 2.0 * PI * rng.gen::<f64>();
        let s = (1.0 - z * z).max(0.0).sqrt();
        let rad = c_max * rng.gen::<f64>().cbrt();
        [rad * s * phi.cos(), rad * s * phi.sin(), rad * z]
    }
}

// ---------------------------------------------------------------------------
// persistence

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Append rows to a CSV aggregate, writing the header only on creation.
/// RFC 4180 line endings; all emitted fields are plain numbers, booleans,
/// or hex hashes, so no quoting is required.
fn append_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let existed = path.exists();
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if !existed {
        write!(file, "{header}\r\n")?;
    }
    for row in rows {
        write!(file, "{row}\r\n")?;
    }
    Ok(())
}

/// Shortest f64 formatting that round-trips; keeps CSV rows bit-stable.
fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn sweep_spec_validation_and_hash() {
        let t2 = Domain::torus(2).unwrap();
        let good =
            SweepSpec::new(t2, 1.0, vec![0.05, 0.08, 0.11], vec![32, 64], 7).unwrap();
        assert_eq!(good.config_hash().len(), 16);
        assert_eq!(good.config_hash(), good.clone().config_hash());

        // order, containment, gamma, ladder
        assert!(SweepSpec::new(t2, 1.0, vec![0.08, 0.05], vec![32], 0).is_err());
        assert!(SweepSpec::new(t2, 1.0, vec![0.05, 0.55], vec![32], 0).is_err());
        assert!(SweepSpec::new(t2, -1.0, vec![0.05], vec![32], 0).is_err());
        assert!(SweepSpec::new(t2, 1.0, vec![], vec![32], 0).is_err());
        assert!(SweepSpec::new(t2, 1.0, vec![0.05], vec![64, 32], 0).is_err());
        assert!(SweepSpec::new(t2, 1.0, vec![0.05], vec![], 0).is_err());
        let b2 = Domain::ball(2, 0.3).unwrap();
        assert!(SweepSpec::new(b2, 1.0, vec![0.31], vec![32], 0).is_err());

        // hash separates configs
        let other = SweepSpec::new(t2, 2.0, vec![0.05, 0.08, 0.11], vec![32, 64], 7).unwrap();
        assert_ne!(good.config_hash(), other.config_hash());
    }

    #[test]
    fn closed_form_ball_energy_matches_production_routes() {
        // torus, both dimensions
        let t2 = Domain::torus(2).unwrap();
        let p2 = ModelParams::from_droplet_radius(&t2, 1.5, 0.2).unwrap();
        let ball2 = DropletShape::ball_at(2, [0.0; 3], 0.2, 4).unwrap();
        let e2 = energy::total_energy(&t2, &p2, &ball2, 0).unwrap().total;
        let c2 = ball_energy_closed(&t2, 1.5, 0.2, [0.0; 3]).unwrap();
        assert!((e2 - c2).abs() / c2.abs() < 1e-8, "2d torus: {e2} vs {c2}");

        let t3 = Domain::torus(3).unwrap();
        let p3 = ModelParams::from_droplet_radius(&t3, 0.8, 0.18).unwrap();
        let ball3 = DropletShape::ball_at(3, [0.0; 3], 0.18, 3).unwrap();
        let e3 = energy::total_energy(&t3, &p3, &ball3, 20).unwrap().total;
        let c3 = ball_energy_closed(&t3, 0.8, 0.18, [0.0; 3]).unwrap();
        assert!((e3 - c3).abs() / c3.abs() < 1e-4, "3d torus: {e3} vs {c3}");

        // ball domain, off-center placement exercises h(c)
        let b2 = Domain::ball(2, 1.0).unwrap();
        let pb = ModelParams::from_droplet_radius(&b2, 2.0, 0.25).unwrap();
        let off = DropletShape::ball_at(2, [0.2, 0.0, 0.0], 0.25, 4).unwrap();
        let eb = energy::total_energy(&b2, &pb, &off, 0).unwrap().total;
        let cb = ball_energy_closed(&b2, 2.0, 0.25, [0.2, 0.0, 0.0]).unwrap();
        assert!((eb - cb).abs() / cb.abs() < 1e-7, "2d ball: {eb} vs {cb}");

        // geometry guards
        assert!(ball_energy_closed(&t2, 1.0, 0.5, [0.0; 3]).is_err());
        assert!(ball_energy_closed(&b2, 1.0, 0.9, [0.2, 0.0, 0.0]).is_err());
    }

    #[test]
    fn expansion_fit_recovers_closed_form_coefficients() {
        for (dim, gamma, lo, hi) in [(2usize, 1.0, 0.04, 0.12), (3usize, 1.0, 0.06, 0.14)] {
            let domain = Domain::torus(dim).unwrap();
            let rs = linspace(lo, hi, 7);
            let energies: Vec<f64> =
                rs.iter().map(|&r| ball_energy_closed(&domain, gamma, r, [0.0; 3]).unwrap()).collect();
            let fit = fit_energy_points(&domain, gamma, &rs, &energies).unwrap();
            for term in &fit.terms {
                assert!(
                    term.rel_err < 1e-6,
                    "{dim}d term {} fitted {} target {} rel {}",
                    term.name, term.fitted, term.target, term.rel_err
                );
            }
            assert!(fit.robin_rel_err.unwrap() < 1e-6, "robin: {:?}", fit.robin_measured);
            assert!(fit.condition.is_finite() && fit.condition > 1.0);
            assert!(fit.residual_max_rel < 1e-10);

            // circulating sign/constant variants sit far from the fit
            let free = &fit.terms[1];
            assert!(!free.candidates.is_empty());
            for c in &free.candidates {
                assert!(
                    c.rel_distance > 1000.0 * free.rel_err,
                    "variant {} unexpectedly close: {}",
                    c.label, c.rel_distance
                );
            }
            if dim == 2 {
                let cons = &fit.terms[2];
                assert_eq!(cons.candidates.len(), 2);
                for c in &cons.candidates {
                    assert!(c.rel_distance > 0.05, "2d constant variant too close: {}", c.rel_distance);
                }
            }
        }

        // degenerate inputs
        let t2 = Domain::torus(2).unwrap();
        assert!(fit_energy_points(&t2, 1.0, &[0.1, 0.2], &[1.0, 2.0]).is_err());
        assert!(fit_energy_points(&t2, 1.0, &linspace(0.05, 0.1, 5), &[1.0; 4]).is_err());
    }

    #[test]
    fn rate_fit_core_measures_power_laws() {
        let rs = vec![0.03, 0.045, 0.065, 0.1];
        let norms: Vec<f64> = rs.iter().map(|r| 3.7 * r.powi(5)).collect();
        let core = rate_fit_from_norms(2, 1.0, &rs, &norms).unwrap();
        assert!((core.slope.unwrap() - 5.0).abs() < 1e-9);
        assert!(!core.floor_limited);
        assert_eq!(core.used_points, 4);
        let spread = core.max_ratio.unwrap() / core.min_ratio.unwrap();
        assert!((spread - 1.0).abs() < 1e-12);

        // floor handling
        let floored = rate_fit_from_norms(2, 0.0, &rs, &[1e-14, 2e-14, 1e-13, 3e-14]).unwrap();
        assert!(floored.floor_limited);
        assert!(floored.slope.is_none());
        assert!(floored.ratios.is_empty());

        assert!(rate_fit_from_norms(2, 1.0, &rs, &[1.0, 2.0]).is_err());
        assert!(rate_fit_from_norms(2, 1.0, &rs, &[1.0, 2.0, -1.0, 4.0]).is_err());
    }

    #[test]
    fn expansion_run_recovers_targets_on_torus() {
        let spec = SweepSpec::new(
            Domain::torus(2).unwrap(),
            1.0,
            linspace(0.05, 0.11, 5),
            vec![48, 96],
            1,
        )
        .unwrap();
        let fit = run_energy_expansion(&spec).unwrap();
        assert!(fit.all_converged, "flags: {:?}", fit.flags);
        assert!(fit.terms[0].rel_err < 5e-3, "leading: {:?}", fit.terms[0]);
        assert!(fit.terms[1].rel_err < 5e-2, "log term: {:?}", fit.terms[1]);
        assert!(fit.terms[2].rel_err < 0.1, "constant: {:?}", fit.terms[2]);
        assert!(fit.robin_rel_err.unwrap() < 0.1, "robin: {:?}", fit.robin_measured);
        // ladder self-consistency: highest rung moved each coefficient by
        // less than its distance to the target
        for term in &fit.terms[..3] {
            let drift = term.ladder_drift.unwrap();
            assert!(
                drift <= 0.05 * term.fitted.abs().max(1e-12),
                "term {} drifted {drift}",
                term.name
            );
        }
    }

    #[test]
    fn rate_run_sees_predicted_decay_on_torus() {
        let spec = SweepSpec::new(
            Domain::torus(2).unwrap(),
            1.0,
            vec![0.06, 0.09, 0.13, 0.19],
            vec![48],
            1,
        )
        .unwrap();
        let fit = run_rate_fit(&spec).unwrap();
        assert!(fit.all_converged, "flags: {:?}", fit.flags);
        assert!(!fit.core.floor_limited);
        let slope = fit.core.slope.unwrap();
        assert!((4.2..6.2).contains(&slope), "slope {slope}");
        let ratio = fit.gamma_doubling_ratio.unwrap();
        assert!((1.5..2.5).contains(&ratio), "doubling ratio {ratio}");
    }

    #[test]
    fn centering_pulls_offset_ball_to_the_origin() {
        let spec = SweepSpec::new(
            Domain::ball(2, 1.0).unwrap(),
            40.0,
            vec![0.15],
            vec![32],
            0,
        )
        .unwrap();
        let report = run_centering(&spec).unwrap();
        let step = &report.steps[0];
        assert!(step.converged, "flags: {:?}", report.flags);
        assert!(step.start_offset >= 0.4);
        assert!(step.dist < CENTER_TOL, "final dist {}", step.dist);
        assert!(step.inward_monotone);
        assert!(report.energy_increasing_offcenter, "{:?}", report.offcenter_energies);

        // torus rejected up front
        let bad = SweepSpec::new(Domain::torus(2).unwrap(), 1.0, vec![0.1], vec![32], 0).unwrap();
        assert!(run_centering(&bad).is_err());
    }

    #[test]
    fn sphere_residuals_split_critical_from_noncritical() {
        let t2 = Domain::torus(2).unwrap();
        let pt = ModelParams::from_droplet_radius(&t2, 2.0, 0.3).unwrap();
        let torus = run_no_sphere(&t2, &pt, 0.3, None).unwrap();
        assert!(torus.all_pass, "{:?}", torus.cases);
        assert_eq!(torus.cases.len(), 1);
        assert!(!torus.cases[0].expect_critical);

        let b2 = Domain::ball(2, 1.0).unwrap();
        let pb = ModelParams::from_droplet_radius(&b2, 2.0, 0.3).unwrap();
        let ball = run_no_sphere(&b2, &pb, 0.3, None).unwrap();
        assert!(ball.all_pass, "{:?}", ball.cases);
        assert_eq!(ball.cases.len(), 2);
        assert!(ball.cases[0].expect_critical && ball.cases[0].report.residual_linf < 1e-5);
        assert!(!ball.cases[1].expect_critical && ball.cases[1].report.residual_linf > 1e-3);

        assert!(run_no_sphere(&b2, &ModelParams::from_droplet_radius(&b2, 0.0, 0.3).unwrap(), 0.3, None).is_err());
    }

    #[test]
    fn uniqueness_starts_agree_on_the_centered_ball() {
        let b2 = Domain::ball(2, 1.0).unwrap();
        let params = ModelParams::from_droplet_radius(&b2, 3.0, 0.22).unwrap();
        let report = run_uniqueness(&b2, &params, 3, 7, None).unwrap();
        assert!(report.all_converged && !report.inconclusive, "flags: {:?}", report.flags);
        assert!(!report.out_of_regime);
        assert!(report.energy_spread < UNIQUE_ENERGY_SPREAD, "spread {}", report.energy_spread);
        assert!(report.max_alpha < 1e-3, "alpha {}", report.max_alpha);
        assert!(report.max_center_dist < CENTER_TOL, "center {}", report.max_center_dist);

        assert!(run_uniqueness(&Domain::torus(2).unwrap(), &params, 2, 0, None).is_err());
    }

    #[test]
    fn reports_reproduce_bitwise_and_persist() {
        let b2 = Domain::ball(2, 1.0).unwrap();
        let params = ModelParams::from_droplet_radius(&b2, 2.0, 0.25).unwrap();
        let dir = std::env::temp_dir().join(format!("okdroplet-verify-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);

        let mut a = run_uniqueness(&b2, &params, 2, 3, Some(&dir)).unwrap();
        let mut b = run_uniqueness(&b2, &params, 2, 3, Some(&dir)).unwrap();
        a.elapsed_ms = 0.0;
        b.elapsed_ms = 0.0;
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap(),
            "same seed must reproduce the report bit for bit"
        );

        let json_name = format!("uniqueness-2d-{}.json", a.provenance.config_hash);
        let parsed: UniquenessReport =
            serde_json::from_str(&fs::read_to_string(dir.join(&json_name)).unwrap()).unwrap();
        assert_eq!(parsed.provenance.config_hash, a.provenance.config_hash);
        assert_eq!(parsed.provenance.schema_version, SCHEMA_VERSION);

        // aggregate CSV appends: header once, one row per start per run
        let csv = fs::read_to_string(dir.join("uniqueness.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 2);
        assert!(lines[0].starts_with("config_hash,"));
        assert!(csv.contains("\r\n"));

        let _ = fs::remove_dir_all(&dir);
    }
}
