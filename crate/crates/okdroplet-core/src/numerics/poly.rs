//! Sparse polynomials in up to three variables. Plenty for solid harmonics
//! (degree <= 24) and torus kernel expansions; not a general CAS.

/// Term list (coefficient, [ex, ey, ez]); kept normalized (sorted, unique
/// exponents, no zero coefficients). 2D polynomials simply never use z.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Poly3 {
    pub terms: Vec<(f64, [u8; 3])>,
}

impl Poly3 {
    pub fn zero() -> Self {
        Poly3 { terms: Vec::new() }
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Poly3 { terms: vec![(c, [0, 0, 0])] };
        p.normalize();
        p
    }

    /// The coordinate monomial x_i.
    pub fn var(i: usize) -> Self {
        let mut e = [0u8; 3];
        e[i] = 1;
        Poly3 { terms: vec![(1.0, e)] }
    }

    pub fn normalize(&mut self) {
        self.terms.sort_by_key(|&(_, e)| e);
        let mut out: Vec<(f64, [u8; 3])> = Vec::with_capacity(self.terms.len());
        for &(c, e) in &self.terms {
            if let Some(last) = out.last_mut() {
                if last.1 == e {
                    last.0 += c;
                    continue;
                }
            }
            out.push((c, e));
        }
        out.retain(|&(c, _)| c != 0.0);
        self.terms = out;
    }

    pub fn add(&self, other: &Poly3) -> Poly3 {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        let mut p = Poly3 { terms };
        p.normalize();
        p
    }

    pub fn scale(&self, s: f64) -> Poly3 {
        let mut p = Poly3 { terms: self.terms.iter().map(|&(c, e)| (c * s, e)).collect() };
        p.normalize();
        p
    }

    pub fn mul(&self, other: &Poly3) -> Poly3 {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for &(ca, ea) in &self.terms {
            for &(cb, eb) in &other.terms {
                terms.push((ca * cb, [ea[0] + eb[0], ea[1] + eb[1], ea[2] + eb[2]]));
            }
        }
        let mut p = Poly3 { terms };
        p.normalize();
        p
    }

    /// Partial derivative with respect to variable i.
    pub fn diff(&self, i: usize) -> Poly3 {
        let mut terms = Vec::new();
        for &(c, e) in &self.terms {
            if e[i] > 0 {
                let mut f = e;
                f[i] -= 1;
                terms.push((c * e[i] as f64, f));
            }
        }
        let mut p = Poly3 { terms };
        p.normalize();
        p
    }

    pub fn degree(&self) -> usize {
        self.terms
            .iter()
            .map(|&(_, e)| e[0] as usize + e[1] as usize + e[2] as usize)
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, x: [f64; 3]) -> f64 {
        self.terms
            .iter()
            .map(|&(c, e)| c * pw(x[0], e[0]) * pw(x[1], e[1]) * pw(x[2], e[2]))
            .sum()
    }

    /// Evaluation against precomputed power tables px[k] = x^k and so on;
    /// the hot path for moment assembly.
    pub fn eval_pows(&self, px: &[f64], py: &[f64], pz: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|&(c, e)| c * px[e[0] as usize] * py[e[1] as usize] * pz[e[2] as usize])
            .sum()
    }

    pub fn gradient(&self) -> [Poly3; 3] {
        [self.diff(0), self.diff(1), self.diff(2)]
    }
}

fn pw(x: f64, e: u8) -> f64 {
    match e {
        0 => 1.0,
        1 => x,
        2 => x * x,
        _ => x.powi(e as i32),
    }
}

/// Fill `table[k] = x^k` for k = 0..=deg.
pub fn power_table(x: f64, deg: usize, table: &mut Vec<f64>) {
    table.clear();
    table.push(1.0);
    for _ in 0..deg {
        let last = *table.last().unwrap();
        table.push(last * x);
    }
}
