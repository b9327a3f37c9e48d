//! Sparse multivariate polynomial arithmetic.
//!
//! Polynomials are stored as a map from exponent vectors to nonzero `f64`
//! coefficients, ordered graded-lexicographically so printing and hashing
//! are deterministic. All arithmetic is exact on coefficients up to
//! floating-point rounding; nothing here samples or approximates.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

/// Exponent vector of a single term. Orders by total degree first, then
/// lexicographically, which gives the graded-lex term order used everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Exponents(pub Vec<u32>);

impl Exponents {
    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }
}

impl Ord for Exponents {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Exponents {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Sparse multivariate polynomial with real coefficients.
#[derive(Debug, Clone)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Exponents, f64>,
}

impl PartialEq for Polynomial {
    fn eq(&self, other: &Self) -> bool {
        self.nvars == other.nvars && self.terms == other.terms
    }
}

impl Hash for Polynomial {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.nvars.hash(state);
        for (e, c) in &self.terms {
            e.hash(state);
            c.to_bits().hash(state);
        }
    }
}

impl Polynomial {
    /// The zero polynomial in `nvars` variables.
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    /// Constant polynomial.
    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(vec![0; nvars], c);
        p
    }

    /// The monomial `x_i`.
    pub fn var(nvars: usize, i: usize) -> Self {
        assert!(i < nvars, "variable index out of bounds");
        let mut e = vec![0; nvars];
        e[i] = 1;
        let mut p = Self::zero(nvars);
        p.add_term(e, 1.0);
        p
    }

    /// Single term `c * x^exps`.
    pub fn monomial(exps: Vec<u32>, c: f64) -> Self {
        let mut p = Self::zero(exps.len());
        p.add_term(exps, c);
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// Total degree; 0 for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Exponents::degree).max().unwrap_or(0)
    }

    /// Iterate terms in graded-lex order.
    pub fn terms(&self) -> impl Iterator<Item = (&Exponents, f64)> {
        self.terms.iter().map(|(e, &c)| (e, c))
    }

    /// Adds `c * x^exps` into the polynomial, dropping the term if the
    /// accumulated coefficient is exactly zero.
    pub fn add_term(&mut self, exps: Vec<u32>, c: f64) {
        assert_eq!(exps.len(), self.nvars, "exponent vector length mismatch");
        if c == 0.0 {
            return;
        }
        match self.terms.entry(Exponents(exps)) {
            std::collections::btree_map::Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(c);
            }
        }
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        assert_eq!(self.nvars, other.nvars);
        let mut out = self.clone();
        for (e, c) in other.terms() {
            out.add_term(e.0.clone(), c);
        }
        out
    }

    pub fn sub(&self, other: &Polynomial) -> Polynomial {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Polynomial {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        if c == 0.0 {
            return out;
        }
        for (e, v) in self.terms() {
            out.add_term(e.0.clone(), v * c);
        }
        out
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        assert_eq!(self.nvars, other.nvars);
        let mut out = Polynomial::zero(self.nvars);
        for (ea, ca) in self.terms() {
            for (eb, cb) in other.terms() {
                let exps: Vec<u32> = ea.0.iter().zip(&eb.0).map(|(a, b)| a + b).collect();
                out.add_term(exps, ca * cb);
            }
        }
        out
    }

    /// Evaluates at a point. Errors if the point dimension is wrong.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.nvars {
            return Err(Error::Dimension {
                context: "polynomial evaluation",
                expected: self.nvars,
                got: x.len(),
            });
        }
        Ok(self.eval_unchecked(x))
    }

    /// Evaluation without the dimension check, for hot loops.
    pub fn eval_unchecked(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (e, c) in self.terms() {
            let mut m = c;
            for (i, &p) in e.0.iter().enumerate() {
                if p > 0 {
                    m *= x[i].powi(p as i32);
                }
            }
            acc += m;
        }
        acc
    }

    /// Exact partial derivative with respect to variable `var`.
    pub fn diff(&self, var: usize) -> Polynomial {
        assert!(var < self.nvars, "variable index out of bounds");
        let mut out = Polynomial::zero(self.nvars);
        for (e, c) in self.terms() {
            let p = e.0[var];
            if p > 0 {
                let mut exps = e.0.clone();
                exps[var] = p - 1;
                out.add_term(exps, c * p as f64);
            }
        }
        out
    }

    /// Substitutes the constant `value` for variable `var`; the slot stays
    /// in the variable set with zero exponent everywhere.
    pub fn substitute(&self, var: usize, value: f64) -> Polynomial {
        assert!(var < self.nvars);
        let mut out = Polynomial::zero(self.nvars);
        for (e, c) in self.terms() {
            let p = e.0[var];
            let mut exps = e.0.clone();
            exps[var] = 0;
            out.add_term(exps, c * value.powi(p as i32));
        }
        out
    }

    /// Re-embeds into a new variable set: old variable `i` becomes
    /// `map[i]` in a space of `new_nvars` variables.
    pub fn embed(&self, new_nvars: usize, map: &[usize]) -> Polynomial {
        assert_eq!(map.len(), self.nvars);
        assert!(map.iter().all(|&j| j < new_nvars));
        let mut out = Polynomial::zero(new_nvars);
        for (e, c) in self.terms() {
            let mut exps = vec![0u32; new_nvars];
            for (i, &p) in e.0.iter().enumerate() {
                exps[map[i]] += p;
            }
            out.add_term(exps, c);
        }
        out
    }

    /// True if variable `var` appears in no term.
    pub fn is_free_of(&self, var: usize) -> bool {
        self.terms.keys().all(|e| e.0[var] == 0)
    }

    /// Renders with the given variable names, terms in descending
    /// graded-lex order.
    pub fn to_text(&self, names: &[&str]) -> String {
        assert_eq!(names.len(), self.nvars);
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut out = String::new();
        for (idx, (e, c)) in self.terms.iter().rev().enumerate() {
            let neg = *c < 0.0;
            let mag = c.abs();
            if idx == 0 {
                if neg {
                    out.push('-');
                }
            } else if neg {
                out.push_str(" - ");
            } else {
                out.push_str(" + ");
            }
            let is_const = e.degree() == 0;
            let mut factors: Vec<String> = Vec::new();
            if mag != 1.0 || is_const {
                factors.push(format!("{}", mag));
            }
            for (i, &p) in e.0.iter().enumerate() {
                if p == 1 {
                    factors.push(names[i].to_string());
                } else if p > 1 {
                    factors.push(format!("{}^{}", names[i], p));
                }
            }
            out.push_str(&factors.join("*"));
        }
        out
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = (0..self.nvars).map(|i| format!("x{}", i)).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        write!(f, "{}", self.to_text(&refs))
    }
}

/// Parses a polynomial expression over the named variables.
///
/// Grammar: terms joined by `+`/`-`; a term is an optional real coefficient
/// and `*`-separated powers `ident^k` (`^1` optional). Whitespace is
/// insignificant; parentheses are not supported.
///
/// `line` and `col0` offset reported error positions so callers embedding
/// expressions in larger files get file-accurate locations.
pub fn parse_expr(text: &str, names: &[&str], line: usize, col0: usize) -> Result<Polynomial> {
    let nvars = names.len();
    let chars: Vec<char> = text.chars().collect();
    let mut pos = 0usize;
    let err = |pos: usize, msg: String| Error::Parse {
        line,
        col: col0 + pos + 1,
        msg,
    };

    let mut poly = Polynomial::zero(nvars);
    skip_ws(&chars, &mut pos);
    if pos >= chars.len() {
        return Err(err(pos, "empty expression".into()));
    }

    loop {
        // sign
        let mut sign = 1.0;
        skip_ws(&chars, &mut pos);
        while pos < chars.len() && (chars[pos] == '+' || chars[pos] == '-') {
            if chars[pos] == '-' {
                sign = -sign;
            }
            pos += 1;
            skip_ws(&chars, &mut pos);
        }
        if pos >= chars.len() {
            return Err(err(pos, "expected a term after sign".into()));
        }

        // term: factors separated by '*'
        let mut coeff = sign;
        let mut exps = vec![0u32; nvars];
        let mut nfactors = 0usize;
        loop {
            skip_ws(&chars, &mut pos);
            if pos >= chars.len() {
                return Err(err(pos, "expected a factor".into()));
            }
            let c = chars[pos];
            if c.is_ascii_digit() || c == '.' {
                let start = pos;
                let num = scan_number(&chars, &mut pos);
                let v: f64 = num
                    .parse()
                    .map_err(|_| err(start, format!("invalid number `{}`", num)))?;
                coeff *= v;
            } else if c.is_alphabetic() || c == '_' {
                let start = pos;
                let ident = scan_ident(&chars, &mut pos);
                let vi = names
                    .iter()
                    .position(|n| *n == ident)
                    .ok_or_else(|| err(start, format!("undeclared identifier `{}`", ident)))?;
                let mut power = 1u32;
                skip_ws(&chars, &mut pos);
                if pos < chars.len() && chars[pos] == '^' {
                    pos += 1;
                    skip_ws(&chars, &mut pos);
                    let pstart = pos;
                    let num = scan_integer(&chars, &mut pos);
                    power = num
                        .parse()
                        .ok()
                        .filter(|&p| p >= 1)
                        .ok_or_else(|| err(pstart, "exponent must be a positive integer".into()))?;
                }
                exps[vi] += power;
            } else {
                return Err(err(pos, format!("unexpected character `{}`", c)));
            }
            nfactors += 1;
            skip_ws(&chars, &mut pos);
            if pos < chars.len() && chars[pos] == '*' {
                pos += 1;
                continue;
            }
            break;
        }
        debug_assert!(nfactors > 0);
        poly.add_term(exps, coeff);

        skip_ws(&chars, &mut pos);
        if pos >= chars.len() {
            break;
        }
        if chars[pos] != '+' && chars[pos] != '-' {
            return Err(err(pos, format!("expected `+` or `-`, found `{}`", chars[pos])));
        }
    }
    Ok(poly)
}

fn skip_ws(chars: &[char], pos: &mut usize) {
    while *pos < chars.len() && chars[*pos].is_whitespace() {
        *pos += 1;
    }
}

fn scan_number(chars: &[char], pos: &mut usize) -> String {
    let mut s = String::new();
    while *pos < chars.len() && (chars[*pos].is_ascii_digit() || chars[*pos] == '.') {
        s.push(chars[*pos]);
        *pos += 1;
    }
    if *pos < chars.len() && (chars[*pos] == 'e' || chars[*pos] == 'E') {
        let mut ahead = *pos + 1;
        if ahead < chars.len() && (chars[ahead] == '+' || chars[ahead] == '-') {
            ahead += 1;
        }
        if ahead < chars.len() && chars[ahead].is_ascii_digit() {
            s.push(chars[*pos]);
            *pos += 1;
            if chars[*pos] == '+' || chars[*pos] == '-' {
                s.push(chars[*pos]);
                *pos += 1;
            }
            while *pos < chars.len() && chars[*pos].is_ascii_digit() {
                s.push(chars[*pos]);
                *pos += 1;
            }
        }
    }
    s
}

fn scan_integer(chars: &[char], pos: &mut usize) -> String {
    let mut s = String::new();
    while *pos < chars.len() && chars[*pos].is_ascii_digit() {
        s.push(chars[*pos]);
        *pos += 1;
    }
    s
}

fn scan_ident(chars: &[char], pos: &mut usize) -> String {
    let mut s = String::new();
    while *pos < chars.len() && (chars[*pos].is_alphanumeric() || chars[*pos] == '_') {
        s.push(chars[*pos]);
        *pos += 1;
    }
    s
}

/// Enumerates exponent vectors of `nvars` variables with total degree at
/// most `max_degree`, in ascending graded-lex order. This is the monomial
/// basis used for metric and multiplier ansatz construction.
pub fn monomials_up_to(nvars: usize, max_degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut current = vec![0u32; nvars];
    for d in 0..=max_degree {
        enumerate_degree(nvars, d, 0, d, &mut current, &mut out);
    }
    // within a fixed degree the recursion emits descending-lex; sort to
    // canonical graded-lex ascending
    out.sort_by(|a, b| Exponents(a.clone()).cmp(&Exponents(b.clone())));
    out
}

fn enumerate_degree(
    nvars: usize,
    _total: u32,
    var: usize,
    remaining: u32,
    current: &mut Vec<u32>,
    out: &mut Vec<Vec<u32>>,
) {
    if var == nvars {
        if remaining == 0 {
            out.push(current.clone());
        }
        return;
    }
    if var == nvars - 1 {
        current[var] = remaining;
        out.push(current.clone());
        current[var] = 0;
        return;
    }
    for p in 0..=remaining {
        current[var] = p;
        enumerate_degree(nvars, _total, var + 1, remaining - p, current, out);
    }
    current[var] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn p(text: &str, names: &[&str]) -> Polynomial {
        parse_expr(text, names, 1, 0).unwrap()
    }

    #[test]
    fn eval_zero_point() {
        let q = p("x1^2 + 2*x2", &["x1", "x2"]);
        assert_eq!(q.eval(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn eval_hand_arithmetic() {
        let q = p("x1^2 + 2*x2", &["x1", "x2"]);
        assert_eq!(q.eval(&[3.0, 1.0]).unwrap(), 11.0);
    }

    #[test]
    fn eval_vector_field_entry() {
        // first component of the engine-surge model with the uncertainty
        // bound at -1.2, evaluated at (phi, psi) = (1, 0)
        let q = p("-psi - 1.5*phi^2 - 0.5*phi^3 - 1.2", &["phi", "psi"]);
        assert_relative_eq!(q.eval(&[1.0, 0.0]).unwrap(), -3.2, max_relative = 1e-14);
    }

    #[test]
    fn eval_dimension_mismatch() {
        let q = p("x1 + x2", &["x1", "x2"]);
        assert!(q.eval(&[1.0]).is_err());
    }

    #[test]
    fn diff_examples() {
        let names = &["phi", "psi"];
        let q = p("-1.5*phi^2 - 0.5*phi^3", names);
        let d = q.diff(0);
        assert_eq!(d, p("-3*phi - 1.5*phi^2", names));

        let c = Polynomial::constant(1, 4.2);
        assert!(c.diff(0).is_zero());

        let xy = p("x1*x2", &["x1", "x2"]);
        assert_eq!(xy.diff(0), p("x2", &["x1", "x2"]));
    }

    #[test]
    fn substitute_drops_zero_constant() {
        let names = &["phi", "psi", "delta"];
        let q = p("-psi - 1.5*phi^2 + delta", names);
        let bound = q.substitute(2, 0.0);
        assert_eq!(bound, p("-psi - 1.5*phi^2", names));
        let bound2 = q.substitute(2, -1.2);
        assert_eq!(bound2, p("-psi - 1.5*phi^2 - 1.2", names));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(parse_expr("x +", &["x"], 1, 0).is_err());
        assert!(parse_expr("", &["x"], 1, 0).is_err());
        assert!(parse_expr("x^0", &["x"], 1, 0).is_err());
        assert!(parse_expr("y", &["x"], 1, 0).is_err());
        assert!(parse_expr("(x)", &["x"], 1, 0).is_err());
    }

    #[test]
    fn parse_error_position() {
        let e = parse_expr("x + q", &["x"], 3, 10).unwrap_err();
        match e {
            Error::Parse { line, col, .. } => {
                assert_eq!(line, 3);
                assert_eq!(col, 15);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn print_parse_roundtrip() {
        let names = &["phi", "psi"];
        let q = p("-psi - 1.5*phi^2 - 0.5*phi^3 + 2", names);
        let text = q.to_text(names);
        assert_eq!(p(&text, names), q);
    }

    #[test]
    fn monomial_basis_counts() {
        // C(d+n, n) monomials of degree <= d in n variables
        assert_eq!(monomials_up_to(2, 4).len(), 15);
        assert_eq!(monomials_up_to(3, 2).len(), 10);
        let b = monomials_up_to(2, 1);
        assert_eq!(b, vec![vec![0, 0], vec![0, 1], vec![1, 0]]);
    }

    fn random_poly(rng: &mut ChaCha8Rng, nvars: usize, degree: u32) -> Polynomial {
        let mut out = Polynomial::zero(nvars);
        for exps in monomials_up_to(nvars, degree) {
            if rng.random::<f64>() < 0.6 {
                out.add_term(exps, rng.random_range(-2.0..2.0));
            }
        }
        out
    }

    #[test]
    fn product_eval_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let nv = rng.random_range(1..4usize);
            let a = random_poly(&mut rng, nv, 3);
            let b = random_poly(&mut rng, nv, 3);
            let x: Vec<f64> = (0..nv).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lhs = a.mul(&b).eval(&x).unwrap();
            let rhs = a.eval(&x).unwrap() * b.eval(&x).unwrap();
            let scale = 1.0 + lhs.abs().max(rhs.abs());
            assert!((lhs - rhs).abs() / scale < 1e-10, "lhs={lhs} rhs={rhs}");
        }
    }

    #[test]
    fn diff_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let nv = rng.random_range(1..4usize);
            let q = random_poly(&mut rng, nv, 4);
            let var = rng.random_range(0..nv);
            let d = q.diff(var);
            let x: Vec<f64> = (0..nv).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[var] += h;
            xm[var] -= h;
            let fd = (q.eval(&xp).unwrap() - q.eval(&xm).unwrap()) / (2.0 * h);
            let exact = d.eval(&x).unwrap();
            let scale = 1.0 + exact.abs();
            assert!(
                ((fd - exact) / scale).abs() < 1e-6,
                "fd={fd} exact={exact} at {x:?}"
            );
        }
    }

    proptest! {
        #[test]
        fn add_commutes(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_poly(&mut rng, 2, 3);
            let b = random_poly(&mut rng, 2, 3);
            prop_assert_eq!(a.add(&b), b.add(&a));
        }

        #[test]
        fn printed_form_reparses(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_poly(&mut rng, 3, 4);
            let names = &["x", "y", "z"];
            let text = a.to_text(names);
            let back = parse_expr(&text, names, 1, 0).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
