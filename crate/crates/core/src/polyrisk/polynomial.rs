//! Sparse multivariate polynomials with double-precision coefficients.
//!
//! Monomials are packed into a `u64`, one byte per variable, so a polynomial
//! supports at most [`MAX_VARS`] variables and per-variable exponents up to 255.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Maximum number of variables a [`Polynomial`] may carry.
pub const MAX_VARS: usize = 8;

/// Exponent vector packed one byte per variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Monomial(u64);

impl Monomial {
    pub const ONE: Monomial = Monomial(0);

    pub fn from_exponents(exps: &[u32]) -> Result<Self> {
        if exps.len() > MAX_VARS {
            return Err(Error::InvalidInput(format!(
                "monomial has {} variables, at most {MAX_VARS} supported",
                exps.len()
            )));
        }
        let mut packed = 0u64;
        for (i, &e) in exps.iter().enumerate() {
            if e > 255 {
                return Err(Error::InvalidInput(format!("exponent {e} exceeds 255")));
            }
            packed |= (e as u64) << (8 * i);
        }
        Ok(Monomial(packed))
    }

    /// Single-variable monomial `v_var^exp`.
    pub fn var_power(var: usize, exp: u32) -> Self {
        debug_assert!(var < MAX_VARS && exp <= 255);
        Monomial((exp as u64) << (8 * var))
    }

    #[inline]
    pub fn exponent(self, var: usize) -> u32 {
        ((self.0 >> (8 * var)) & 0xff) as u32
    }

    pub fn exponents(self, nvars: usize) -> Vec<u32> {
        (0..nvars).map(|i| self.exponent(i)).collect()
    }

    pub fn degree(self) -> u32 {
        (0..MAX_VARS).map(|i| self.exponent(i)).sum()
    }

    /// Product of two monomials. Exponent sums must stay below 256.
    #[inline]
    pub fn mul(self, other: Monomial) -> Monomial {
        debug_assert!((0..MAX_VARS).all(|i| self.exponent(i) + other.exponent(i) <= 255));
        Monomial(self.0 + other.0)
    }

    /// Clears the exponent of `var`, returning the removed exponent.
    fn without(self, var: usize) -> (Monomial, u32) {
        let e = self.exponent(var);
        (Monomial(self.0 & !(0xffu64 << (8 * var))), e)
    }

    /// Removes variable `var` entirely, shifting higher variables down.
    pub(crate) fn remove_var(self, var: usize) -> Monomial {
        let low_mask = if var == 0 { 0 } else { (1u64 << (8 * var)) - 1 };
        let low = self.0 & low_mask;
        let high = if var + 1 >= MAX_VARS { 0 } else { self.0 >> (8 * (var + 1)) };
        Monomial(low | (high << (8 * var)))
    }
}

/// Sparse polynomial over an ordered list of named variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    vars: Vec<String>,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero<S: AsRef<str>>(vars: &[S]) -> Self {
        let vars: Vec<String> = vars.iter().map(|v| v.as_ref().to_string()).collect();
        assert!(vars.len() <= MAX_VARS, "at most {MAX_VARS} variables supported");
        Polynomial { vars, terms: BTreeMap::new() }
    }

    pub fn constant<S: AsRef<str>>(vars: &[S], c: f64) -> Self {
        let mut p = Self::zero(vars);
        p.add_term(Monomial::ONE, c);
        p
    }

    /// The polynomial consisting of variable `idx` alone.
    pub fn var<S: AsRef<str>>(vars: &[S], idx: usize) -> Self {
        assert!(idx < vars.len(), "variable index {idx} out of range");
        let mut p = Self::zero(vars);
        p.add_term(Monomial::var_power(idx, 1), 1.0);
        p
    }

    /// Builds a polynomial from `(exponents, coefficient)` pairs. Repeated
    /// exponent tuples are summed.
    pub fn from_terms<S: AsRef<str>>(vars: &[S], terms: &[(Vec<u32>, f64)]) -> Result<Self> {
        if vars.len() > MAX_VARS {
            return Err(Error::InvalidInput(format!(
                "{} variables given, at most {MAX_VARS} supported",
                vars.len()
            )));
        }
        let mut p = Self::zero(vars);
        for (exps, c) in terms {
            if exps.len() != p.vars.len() {
                return Err(Error::InvalidInput(format!(
                    "exponent tuple {exps:?} has length {}, expected {}",
                    exps.len(),
                    p.vars.len()
                )));
            }
            if !c.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite coefficient {c}")));
            }
            p.add_term(Monomial::from_exponents(exps)?, *c);
        }
        Ok(p)
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn nvars(&self) -> usize {
        self.vars.len()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v == name)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, c)| (*m, *c))
    }

    /// Terms as explicit exponent vectors, in storage order.
    pub fn term_list(&self) -> Vec<(Vec<u32>, f64)> {
        self.terms.iter().map(|(m, c)| (m.exponents(self.nvars()), *c)).collect()
    }

    pub fn coeff(&self, m: Monomial) -> f64 {
        self.terms.get(&m).copied().unwrap_or(0.0)
    }

    /// Adds `c·m`, dropping the term if it cancels to exactly zero.
    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        let entry = self.terms.entry(m).or_insert(0.0);
        *entry += c;
        if *entry == 0.0 {
            self.terms.remove(&m);
        }
    }

    /// Total degree; zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|m| m.degree()).max().unwrap_or(0)
    }

    pub fn degree_in(&self, var: usize) -> u32 {
        self.terms.keys().map(|m| m.exponent(var)).max().unwrap_or(0)
    }

    /// Total degree counting only the listed variables.
    pub fn degree_in_vars(&self, vars: &[usize]) -> u32 {
        self.terms
            .keys()
            .map(|m| vars.iter().map(|&v| m.exponent(v)).sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |acc, c| acc.max(c.abs()))
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial { vars: self.vars.clone(), terms: BTreeMap::new() };
        for (m, c) in &self.terms {
            out.add_term(*m, c * s);
        }
        out
    }

    /// Drops terms whose magnitude is at most `tol`.
    pub fn prune(&mut self, tol: f64) {
        self.terms.retain(|_, c| c.abs() > tol);
    }

    fn check_same_vars(&self, other: &Polynomial) {
        assert_eq!(
            self.vars, other.vars,
            "polynomial variable lists differ: {:?} vs {:?}",
            self.vars, other.vars
        );
    }

    pub fn square(&self) -> Polynomial {
        self * self
    }

    pub fn pow(&self, n: u32) -> Polynomial {
        let mut result = Polynomial::constant(&self.vars, 1.0);
        let mut base = self.clone();
        let mut n = n;
        while n > 0 {
            if n & 1 == 1 {
                result = &result * &base;
            }
            n >>= 1;
            if n > 0 {
                base = base.square();
            }
        }
        result
    }

    /// Evaluates with values given in variable order.
    pub fn eval_slice(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.nvars(), "value count must match variable count");
        let maxdeg: Vec<u32> = (0..self.nvars()).map(|v| self.degree_in(v)).collect();
        let powers: Vec<Vec<f64>> = values
            .iter()
            .zip(&maxdeg)
            .map(|(&x, &d)| {
                let mut p = Vec::with_capacity(d as usize + 1);
                let mut acc = 1.0;
                for _ in 0..=d {
                    p.push(acc);
                    acc *= x;
                }
                p
            })
            .collect();
        self.terms
            .iter()
            .map(|(m, c)| {
                let mut t = *c;
                for (v, pw) in powers.iter().enumerate() {
                    t *= pw[m.exponent(v) as usize];
                }
                t
            })
            .sum()
    }

    /// Evaluates under a name-keyed assignment. Every variable must be assigned.
    pub fn eval(&self, assignment: &HashMap<String, f64>) -> Result<f64> {
        let values = self
            .vars
            .iter()
            .map(|v| assignment.get(v).copied().ok_or_else(|| Error::UnassignedVariable(v.clone())))
            .collect::<Result<Vec<f64>>>()?;
        Ok(self.eval_slice(&values))
    }

    /// Replaces `var^k` by `moments[k]` and removes `var` from the variable list.
    pub fn substitute_moments(&self, var: usize, moments: &[f64]) -> Result<Polynomial> {
        assert!(var < self.nvars());
        let mut vars = self.vars.clone();
        vars.remove(var);
        let mut out = Polynomial::zero(&vars);
        for (m, c) in &self.terms {
            let (rest, k) = m.without(var);
            let mk = moments.get(k as usize).copied().ok_or_else(|| {
                Error::InvalidInput(format!("moment of order {k} not supplied"))
            })?;
            out.add_term(rest.remove_var(var), c * mk);
        }
        Ok(out)
    }

    /// Substitutes each variable by an affine form over `new_vars`:
    /// `var_i -> offsets[i] + Σ_j linear[i][j]·new_var_j`.
    pub fn compose_affine<S: AsRef<str>>(
        &self,
        new_vars: &[S],
        offsets: &[f64],
        linear: &[Vec<f64>],
    ) -> Polynomial {
        let n_old = self.nvars();
        if n_old == 0 {
            return Polynomial::constant(new_vars, self.coeff(Monomial::ONE));
        }
        assert_eq!(offsets.len(), n_old);
        assert_eq!(linear.len(), n_old);
        let forms: Vec<Polynomial> = (0..n_old)
            .map(|i| {
                assert_eq!(linear[i].len(), new_vars.len());
                let mut f = Polynomial::constant(new_vars, offsets[i]);
                for (j, &a) in linear[i].iter().enumerate() {
                    f.add_term(Monomial::var_power(j, 1), a);
                }
                f
            })
            .collect();
        // Cache of powers of each affine form.
        let mut powers: Vec<Vec<Polynomial>> =
            forms.iter().map(|_| vec![Polynomial::constant(new_vars, 1.0)]).collect();
        for (i, f) in forms.iter().enumerate() {
            let d = self.degree_in(i) as usize;
            for k in 1..=d {
                let next = &powers[i][k - 1] * f;
                powers[i].push(next);
            }
        }

        // Horner over the first old variable: group terms by their exponent in
        // the remaining variables so each product is formed once per group.
        let mut acc: HashMap<Monomial, f64> = HashMap::new();
        let mut groups: BTreeMap<Monomial, Vec<(u32, f64)>> = BTreeMap::new();
        for (m, c) in &self.terms {
            let (rest, e0) = m.without(0);
            groups.entry(rest).or_default().push((e0, *c));
        }
        for (rest, list) in groups {
            // Univariate-in-var-0 part: Σ c·form0^e0.
            let mut head: HashMap<Monomial, f64> = HashMap::new();
            for (e0, c) in list {
                for (m, v) in &powers[0][e0 as usize].terms {
                    *head.entry(*m).or_insert(0.0) += c * v;
                }
            }
            let mut cur: Vec<(Monomial, f64)> = head.into_iter().collect();
            cur.sort_unstable_by_key(|t| t.0);
            for i in 1..n_old {
                let e = rest.exponent(i) as usize;
                if e == 0 {
                    continue;
                }
                let mut next: HashMap<Monomial, f64> = HashMap::with_capacity(cur.len() * 4);
                for (ma, ca) in &cur {
                    for (mb, cb) in &powers[i][e].terms {
                        *next.entry(ma.mul(*mb)).or_insert(0.0) += ca * cb;
                    }
                }
                cur = next.into_iter().collect();
                cur.sort_unstable_by_key(|t| t.0);
            }
            for (m, c) in cur {
                *acc.entry(m).or_insert(0.0) += c;
            }
        }
        let mut out = Polynomial::zero(new_vars);
        for (m, c) in acc {
            out.add_term(m, c);
        }
        out
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.check_same_vars(rhs);
        let mut out = self.clone();
        for (m, c) in &rhs.terms {
            out.add_term(*m, *c);
        }
        out
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.check_same_vars(rhs);
        let mut out = self.clone();
        for (m, c) in &rhs.terms {
            out.add_term(*m, -c);
        }
        out
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.check_same_vars(rhs);
        let mut acc: HashMap<Monomial, f64> =
            HashMap::with_capacity(self.terms.len() * rhs.terms.len());
        for (ma, ca) in &self.terms {
            for (mb, cb) in &rhs.terms {
                *acc.entry(ma.mul(*mb)).or_insert(0.0) += ca * cb;
            }
        }
        let mut out = Polynomial::zero(&self.vars);
        for (m, c) in acc {
            out.add_term(m, c);
        }
        out
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

impl Add for Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: Polynomial) -> Polynomial {
        &self + &rhs
    }
}

impl Sub for Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: Polynomial) -> Polynomial {
        &self - &rhs
    }
}

impl Mul for Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: Polynomial) -> Polynomial {
        &self * &rhs
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (k, (m, c)) in self.terms.iter().enumerate() {
            if k > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{c}")?;
            for (i, v) in self.vars.iter().enumerate() {
                match m.exponent(i) {
                    0 => {}
                    1 => write!(f, "*{v}")?,
                    e => write!(f, "*{v}^{e}")?,
                }
            }
        }
        Ok(())
    }
}

/// Fast evaluator for polynomials in three variables.
///
/// Hot loops (rollout collision costs, Monte-Carlo oracles) evaluate the same
/// contour polynomial millions of times; this flattens the term map once.
#[derive(Clone, Debug)]
pub struct CompiledPoly3 {
    terms: Vec<([u8; 3], f64)>,
    maxdeg: [usize; 3],
}

impl CompiledPoly3 {
    pub fn new(p: &Polynomial) -> Self {
        assert_eq!(p.nvars(), 3, "CompiledPoly3 needs exactly three variables");
        let terms: Vec<([u8; 3], f64)> = p
            .terms()
            .map(|(m, c)| {
                ([m.exponent(0) as u8, m.exponent(1) as u8, m.exponent(2) as u8], c)
            })
            .collect();
        let maxdeg = [p.degree_in(0) as usize, p.degree_in(1) as usize, p.degree_in(2) as usize];
        assert!(maxdeg.iter().all(|&d| d < 32), "degree too large for CompiledPoly3");
        CompiledPoly3 { terms, maxdeg }
    }

    #[inline]
    pub fn eval(&self, p: &[f64; 3]) -> f64 {
        let mut pw = [[1.0f64; 32]; 3];
        for v in 0..3 {
            for k in 1..=self.maxdeg[v] {
                pw[v][k] = pw[v][k - 1] * p[v];
            }
        }
        let mut s = 0.0;
        for (e, c) in &self.terms {
            s += c * pw[0][e[0] as usize] * pw[1][e[1] as usize] * pw[2][e[2] as usize];
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xyz() -> [&'static str; 3] {
        ["x", "y", "z"]
    }

    #[test]
    fn monomial_packing_roundtrip() {
        let m = Monomial::from_exponents(&[3, 0, 7, 1]).unwrap();
        assert_eq!(m.exponents(4), vec![3, 0, 7, 1]);
        assert_eq!(m.degree(), 11);
        assert_eq!(m.remove_var(1).exponents(3), vec![3, 7, 1]);
        assert_eq!(m.remove_var(3).exponents(3), vec![3, 0, 7]);
        assert!(Monomial::from_exponents(&[256]).is_err());
    }

    #[test]
    fn eval_sphere_boundary() {
        let vars = ["x", "y", "z", "w"];
        let p = Polynomial::from_terms(
            &vars,
            &[
                (vec![2, 0, 0, 0], 1.0),
                (vec![0, 2, 0, 0], 1.0),
                (vec![0, 0, 2, 0], 1.0),
                (vec![0, 0, 0, 2], -1.0),
            ],
        )
        .unwrap();
        assert_eq!(p.eval_slice(&[1.0, 0.0, 0.0, 1.0]), 0.0);
    }

    #[test]
    fn eval_constant_anywhere() {
        let p = Polynomial::constant(&xyz(), 3.5);
        assert_eq!(p.eval_slice(&[0.3, -7.0, 1e3]), 3.5);
    }

    #[test]
    fn eval_reports_unassigned_variable() {
        let p = Polynomial::var(&xyz(), 1);
        let mut a = HashMap::new();
        a.insert("x".to_string(), 1.0);
        a.insert("z".to_string(), 1.0);
        match p.eval(&a) {
            Err(Error::UnassignedVariable(v)) => assert_eq!(v, "y"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cancellation_removes_terms() {
        let x = Polynomial::var(&xyz(), 0);
        let d = &x - &x;
        assert!(d.is_zero());
        assert_eq!(d.len(), 0);
    }

    #[test]
    fn pow_matches_repeated_multiplication() {
        let x = Polynomial::var(&xyz(), 0);
        let y = Polynomial::var(&xyz(), 1);
        let p = &(&x + &y) + &Polynomial::constant(&xyz(), -1.0);
        let cube = &(&p * &p) * &p;
        assert_eq!(p.pow(3), cube);
        assert_eq!(p.pow(0), Polynomial::constant(&xyz(), 1.0));
    }

    #[test]
    fn substitute_moments_removes_variable() {
        let vars = ["x", "w"];
        // x*w^2 + 3w + 1
        let p = Polynomial::from_terms(
            &vars,
            &[(vec![1, 2], 1.0), (vec![0, 1], 3.0), (vec![0, 0], 1.0)],
        )
        .unwrap();
        let q = p.substitute_moments(1, &[1.0, 0.5, 2.0]).unwrap();
        assert_eq!(q.vars(), &["x".to_string()]);
        assert_eq!(q.eval_slice(&[2.0]), 2.0 * 2.0 + 1.5 + 1.0);
        assert!(p.substitute_moments(1, &[1.0, 0.5]).is_err());
    }

    #[test]
    fn compose_affine_matches_pointwise() {
        let p = Polynomial::from_terms(
            &xyz(),
            &[(vec![2, 1, 0], 2.0), (vec![0, 0, 3], -1.0), (vec![1, 1, 1], 0.5), (vec![0, 0, 0], 4.0)],
        )
        .unwrap();
        let offsets = [0.3, -0.2, 1.1];
        let lin = vec![vec![1.0, 0.2, 0.0], vec![0.0, 0.5, -0.3], vec![0.1, 0.0, 2.0]];
        let q = p.compose_affine(&["a", "b", "c"], &offsets, &lin);
        let v = [0.7, -1.3, 0.4];
        let x: Vec<f64> = (0..3)
            .map(|i| offsets[i] + (0..3).map(|j| lin[i][j] * v[j]).sum::<f64>())
            .collect();
        let expected = p.eval_slice(&x);
        assert!((q.eval_slice(&v) - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn compiled_eval_agrees() {
        let p = Polynomial::from_terms(
            &xyz(),
            &[(vec![6, 0, 0], 1.5), (vec![0, 2, 3], -2.0), (vec![1, 1, 1], 0.25), (vec![0, 0, 0], -1.0)],
        )
        .unwrap();
        let c = CompiledPoly3::new(&p);
        let pt = [0.4, -0.9, 1.2];
        assert!((c.eval(&pt) - p.eval_slice(&pt)).abs() < 1e-12);
    }
}
