//! Autonomous polynomial systems `x' = f(x, theta)` with a semialgebraic
//! region of interest, plus the line-oriented description-file format and
//! the built-in example systems.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::poly::{parse_expr, Polynomial};
use crate::polymat::PolyMatrix;

/// A declared parameter with nominal value and optional admissible range.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub nominal: f64,
    pub range: Option<(f64, f64)>,
}

/// Semialgebraic region `{x : g_i(x) >= 0 for all i}` together with a
/// finite bounding box per state. Constraint polynomials are over the
/// state variables only.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub constraints: Vec<Polynomial>,
    /// Pending `|f(x)|^2 >= eps` exclusion, materialized into an ordinary
    /// constraint once all parameters are bound.
    pub fmin_eps: Option<f64>,
    pub bbox: Vec<(f64, f64)>,
}

impl Region {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.constraints
            .iter()
            .all(|g| g.eval_unchecked(x) >= 0.0)
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.bbox)
            .all(|(&v, &(lo, hi))| v >= lo && v <= hi)
    }

    /// Euclidean diameter of the bounding box.
    pub fn box_diameter(&self) -> f64 {
        self.bbox
            .iter()
            .map(|&(lo, hi)| (hi - lo) * (hi - lo))
            .sum::<f64>()
            .sqrt()
    }
}

/// An autonomous polynomial system. The polynomial variable space is the
/// concatenation `[states..., params...]`; binding a parameter removes it
/// from that space.
#[derive(Debug, Clone, PartialEq)]
pub struct DynSystem {
    pub name: String,
    pub states: Vec<String>,
    pub params: Vec<ParamSpec>,
    pub f: Vec<Polynomial>,
    pub region: Region,
}

impl DynSystem {
    /// State dimension.
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    /// Total polynomial variable count (states plus unbound parameters).
    pub fn nvars(&self) -> usize {
        self.states.len() + self.params.len()
    }

    pub fn is_bound(&self) -> bool {
        self.params.is_empty()
    }

    pub fn var_names(&self) -> Vec<&str> {
        self.states
            .iter()
            .map(String::as_str)
            .chain(self.params.iter().map(|p| p.name.as_str()))
            .collect()
    }

    fn require_bound(&self) -> Result<()> {
        if self.is_bound() {
            Ok(())
        } else {
            Err(Error::UnboundParameters(
                self.params
                    .iter()
                    .map(|p| p.name.clone())
                    .collect::<Vec<_>>()
                    .join(", "),
            ))
        }
    }

    /// Evaluates the vector field at a state point (fully bound systems).
    pub fn eval_f(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require_bound()?;
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                context: "vector field evaluation",
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.f.iter().map(|p| p.eval_unchecked(x)).collect())
    }

    /// Jacobian with respect to the states; parameters stay symbolic.
    pub fn jacobian(&self) -> PolyMatrix {
        let n = self.dim();
        let mut a = PolyMatrix::zeros(n, n, self.nvars());
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, self.f[i].diff(j));
            }
        }
        a
    }

    /// `sum_i f_i^2` as a polynomial over the current variable space.
    pub fn f_norm2_poly(&self) -> Polynomial {
        let mut acc = Polynomial::zero(self.nvars());
        for p in &self.f {
            acc = acc.add(&p.mul(p));
        }
        acc
    }

    /// Substitutes the given parameter values; bound parameters leave the
    /// variable space, unbound ones stay symbolic. When the last parameter
    /// is bound, a pending `|f|^2 >= eps` region exclusion is materialized.
    pub fn bind_parameters(&self, values: &BTreeMap<String, f64>) -> Result<DynSystem> {
        for name in values.keys() {
            if !self.params.iter().any(|p| &p.name == name) {
                return Err(Error::UnknownName(name.clone()));
            }
        }
        for p in &self.params {
            if let Some(&v) = values.get(&p.name) {
                if let Some((lo, hi)) = p.range {
                    if v < lo || v > hi {
                        return Err(Error::OutOfRange {
                            name: p.name.clone(),
                            value: v,
                            lo,
                            hi,
                        });
                    }
                }
            }
        }

        let n = self.dim();
        let mut f = self.f.clone();
        let mut kept: Vec<usize> = (0..n).collect();
        for (j, p) in self.params.iter().enumerate() {
            let idx = n + j;
            if let Some(&v) = values.get(&p.name) {
                f = f.iter().map(|q| q.substitute(idx, v)).collect();
            } else {
                kept.push(idx);
            }
        }
        // reindex into the reduced variable space
        let new_nvars = kept.len();
        let mut map = vec![usize::MAX; self.nvars()];
        for (new_i, &old_i) in kept.iter().enumerate() {
            map[old_i] = new_i;
        }
        let f: Vec<Polynomial> = f
            .iter()
            .map(|q| {
                debug_assert!((0..self.nvars())
                    .filter(|&i| map[i] == usize::MAX)
                    .all(|i| q.is_free_of(i)));
                let full_map: Vec<usize> = (0..self.nvars())
                    .map(|i| if map[i] == usize::MAX { 0 } else { map[i] })
                    .collect();
                // dropped slots have zero exponents, mapping them to 0 is inert
                q.embed(new_nvars, &full_map)
            })
            .collect();

        let params: Vec<ParamSpec> = self
            .params
            .iter()
            .filter(|p| !values.contains_key(&p.name))
            .cloned()
            .collect();

        let mut sys = DynSystem {
            name: self.name.clone(),
            states: self.states.clone(),
            params,
            f,
            region: self.region.clone(),
        };
        sys.materialize_fmin();
        Ok(sys)
    }

    /// Binds every parameter to its nominal value.
    pub fn bind_nominal(&self) -> DynSystem {
        let values: BTreeMap<String, f64> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.nominal))
            .collect();
        self.bind_parameters(&values)
            .expect("nominal values are always admissible")
    }

    fn materialize_fmin(&mut self) {
        if self.is_bound() {
            if let Some(eps) = self.region.fmin_eps.take() {
                let g = self.f_norm2_poly().sub(&Polynomial::constant(self.dim(), eps));
                self.region.constraints.push(g);
            }
        }
    }

    /// Renders the system in the description-file format.
    pub fn to_text(&self) -> String {
        let names = self.var_names();
        let state_names: Vec<&str> = self.states.iter().map(String::as_str).collect();
        let mut out = String::new();
        out.push_str(&format!("system {}\n", self.name));
        out.push_str(&format!("state {}\n", self.states.join(" ")));
        for p in &self.params {
            match p.range {
                Some((lo, hi)) => out.push_str(&format!(
                    "param {} = {} range {} {}\n",
                    p.name, p.nominal, lo, hi
                )),
                None => out.push_str(&format!("param {} = {}\n", p.name, p.nominal)),
            }
        }
        for (s, fi) in self.states.iter().zip(&self.f) {
            out.push_str(&format!("dyn {}' = {}\n", s, fi.to_text(&names)));
        }
        for g in &self.region.constraints {
            out.push_str(&format!("region poly {}\n", g.to_text(&state_names)));
        }
        if let Some(eps) = self.region.fmin_eps {
            out.push_str(&format!("region fmin2 {}\n", eps));
        }
        let box_parts: Vec<String> = self
            .region
            .bbox
            .iter()
            .flat_map(|&(lo, hi)| [format!("{}", lo), format!("{}", hi)])
            .collect();
        out.push_str(&format!("box {}\n", box_parts.join(" ")));
        out
    }
}

/// Parses the line-oriented system description format.
pub fn parse_system(text: &str) -> Result<DynSystem> {
    let mut name: Option<String> = None;
    let mut states: Vec<String> = Vec::new();
    let mut params: Vec<ParamSpec> = Vec::new();
    let mut dyn_lines: Vec<(String, String, usize, usize)> = Vec::new();
    let mut region_polys: Vec<(String, usize, usize)> = Vec::new();
    let mut ball: Option<f64> = None;
    let mut fmin_eps: Option<f64> = None;
    let mut bbox: Option<Vec<(f64, f64)>> = None;

    let perr = |line: usize, msg: String| Error::Parse { line, col: 1, msg };

    for (lineno0, raw) in text.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (head, rest) = match line.split_once(char::is_whitespace) {
            Some((h, r)) => (h, r.trim()),
            None => (line, ""),
        };
        match head {
            "system" => {
                if name.is_some() {
                    return Err(perr(lineno, "duplicate `system` line".into()));
                }
                if rest.is_empty() || !is_ident(rest) {
                    return Err(perr(lineno, "expected `system <identifier>`".into()));
                }
                name = Some(rest.to_string());
            }
            "state" => {
                for s in rest.split_whitespace() {
                    if !is_ident(s) {
                        return Err(perr(lineno, format!("invalid state name `{}`", s)));
                    }
                    if states.iter().any(|t| t == s) {
                        return Err(perr(lineno, format!("duplicate state `{}`", s)));
                    }
                    states.push(s.to_string());
                }
            }
            "param" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                // name = value [range lo hi]
                if parts.len() < 3 || parts[1] != "=" {
                    return Err(perr(lineno, "expected `param <name> = <value> [range lo hi]`".into()));
                }
                let pname = parts[0];
                if !is_ident(pname) {
                    return Err(perr(lineno, format!("invalid parameter name `{}`", pname)));
                }
                if params.iter().any(|p| p.name == pname) || states.iter().any(|s| s == pname) {
                    return Err(perr(lineno, format!("duplicate name `{}`", pname)));
                }
                let nominal: f64 = parts[2]
                    .parse()
                    .map_err(|_| perr(lineno, format!("invalid number `{}`", parts[2])))?;
                let range = if parts.len() > 3 {
                    if parts.len() != 6 || parts[3] != "range" {
                        return Err(perr(lineno, "expected `range <lo> <hi>`".into()));
                    }
                    let lo: f64 = parts[4]
                        .parse()
                        .map_err(|_| perr(lineno, format!("invalid number `{}`", parts[4])))?;
                    let hi: f64 = parts[5]
                        .parse()
                        .map_err(|_| perr(lineno, format!("invalid number `{}`", parts[5])))?;
                    if !(lo <= nominal && nominal <= hi) {
                        return Err(perr(lineno, "nominal value outside its own range".into()));
                    }
                    Some((lo, hi))
                } else {
                    None
                };
                params.push(ParamSpec {
                    name: pname.to_string(),
                    nominal,
                    range,
                });
            }
            "dyn" => {
                let (lhs, rhs) = rest
                    .split_once('=')
                    .ok_or_else(|| perr(lineno, "expected `dyn <state>' = <expr>`".into()))?;
                let lhs = lhs.trim();
                let sname = lhs
                    .strip_suffix('\'')
                    .ok_or_else(|| perr(lineno, "dynamics left-hand side must end with `'`".into()))?
                    .trim();
                if dyn_lines.iter().any(|(s, _, _, _)| s == sname) {
                    return Err(perr(lineno, format!("duplicate dynamics for state {}", sname)));
                }
                let col0 = raw.find('=').map(|i| i + 1).unwrap_or(0);
                dyn_lines.push((sname.to_string(), rhs.trim().to_string(), lineno, col0));
            }
            "region" => {
                let (kind, arg) = match rest.split_once(char::is_whitespace) {
                    Some((k, a)) => (k, a.trim()),
                    None => (rest, ""),
                };
                match kind {
                    "ball" => {
                        let r: f64 = arg
                            .parse()
                            .map_err(|_| perr(lineno, format!("invalid radius `{}`", arg)))?;
                        if !(r.is_finite() && r > 0.0) {
                            return Err(perr(lineno, "ball radius must be positive".into()));
                        }
                        ball = Some(r);
                    }
                    "fmin2" => {
                        let e: f64 = arg
                            .parse()
                            .map_err(|_| perr(lineno, format!("invalid threshold `{}`", arg)))?;
                        if !(e.is_finite() && e > 0.0) {
                            return Err(perr(lineno, "fmin2 threshold must be positive".into()));
                        }
                        fmin_eps = Some(e);
                    }
                    "poly" => {
                        let col0 = raw.find("poly").map(|i| i + 4).unwrap_or(0);
                        region_polys.push((arg.to_string(), lineno, col0));
                    }
                    other => {
                        return Err(perr(
                            lineno,
                            format!("unknown region kind `{}` (expected ball/fmin2/poly)", other),
                        ))
                    }
                }
            }
            "box" => {
                let vals: Vec<f64> = rest
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| perr(lineno, "invalid number in box".into()))?;
                if vals.len() % 2 != 0 {
                    return Err(perr(lineno, "box needs an even number of bounds".into()));
                }
                bbox = Some(vals.chunks(2).map(|c| (c[0], c[1])).collect());
            }
            other => {
                return Err(perr(lineno, format!("unknown directive `{}`", other)));
            }
        }
    }

    let name = name.ok_or_else(|| perr(1, "missing `system` line".into()))?;
    if states.is_empty() {
        return Err(perr(1, "no states declared".into()));
    }

    let var_names: Vec<&str> = states
        .iter()
        .map(String::as_str)
        .chain(params.iter().map(|p| p.name.as_str()))
        .collect();
    let state_names: Vec<&str> = states.iter().map(String::as_str).collect();

    let mut f: Vec<Polynomial> = Vec::with_capacity(states.len());
    for s in &states {
        let found = dyn_lines.iter().find(|(n, _, _, _)| n == s);
        match found {
            Some((_, expr, lineno, col0)) => {
                f.push(parse_expr(expr, &var_names, *lineno, *col0)?);
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    col: 1,
                    msg: format!("missing dynamics for state {}", s),
                })
            }
        }
    }
    for (n, _, lineno, _) in &dyn_lines {
        if !states.iter().any(|s| s == n) {
            return Err(perr(*lineno, format!("dynamics for undeclared state `{}`", n)));
        }
    }

    let mut constraints: Vec<Polynomial> = Vec::new();
    if let Some(r) = ball {
        let mut g = Polynomial::constant(states.len(), r * r);
        for i in 0..states.len() {
            let xi = Polynomial::var(states.len(), i);
            g = g.sub(&xi.mul(&xi));
        }
        constraints.push(g);
    }
    for (expr, lineno, col0) in &region_polys {
        constraints.push(parse_expr(expr, &state_names, *lineno, *col0)?);
    }

    let bbox = match (bbox, ball) {
        (Some(b), _) => {
            if b.len() != states.len() {
                return Err(perr(1, format!("box has {} intervals, expected {}", b.len(), states.len())));
            }
            if b.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
                return Err(perr(1, "box bounds must be finite with lo < hi".into()));
            }
            b
        }
        (None, Some(r)) => vec![(-r, r); states.len()],
        (None, None) => {
            return Err(perr(1, "missing `box` line (and no ball to default from)".into()))
        }
    };

    let mut sys = DynSystem {
        name,
        states,
        params,
        f,
        region: Region {
            constraints,
            fmin_eps,
            bbox,
        },
    };
    sys.materialize_fmin();
    Ok(sys)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_')
}

/// Built-in example systems.
pub fn builtin(name: &str) -> Result<DynSystem> {
    let text = match name {
        "moore_greitzer" => MOORE_GREITZER,
        "van_der_pol" => VAN_DER_POL,
        "circular" => CIRCULAR,
        "linear_stable_2d" => LINEAR_STABLE_2D,
        other => return Err(Error::UnknownName(other.to_string())),
    };
    parse_system(text)
}

pub const BUILTIN_NAMES: [&str; 4] = [
    "moore_greitzer",
    "van_der_pol",
    "circular",
    "linear_stable_2d",
];

/// Jet-engine surge model with an uncertain offset parameter.
const MOORE_GREITZER: &str = "\
system moore_greitzer
state phi psi
param delta = -1.2 range -2.0 0.0
dyn phi' = -psi - 1.5*phi^2 - 0.5*phi^3 + delta
dyn psi' = 3*phi - psi
region ball 10.0
region fmin2 0.1
box -10 10 -10 10
";

const VAN_DER_POL: &str = "\
system van_der_pol
state x1 x2
param mu = 1.0 range 0.05 5.0
dyn x1' = x2
dyn x2' = mu*x2 - mu*x1^2*x2 - x1
region ball 3.5
box -3.5 3.5 -3.5 3.5
";

/// Normal-form oscillator: the unit circle is a globally attracting cycle.
const CIRCULAR: &str = "\
system circular
state x y
dyn x' = x - y - x^3 - x*y^2
dyn y' = x + y - x^2*y - y^3
region ball 2.0
box -2 2 -2 2
";

const LINEAR_STABLE_2D: &str = "\
system linear_stable_2d
state x1 x2
dyn x1' = -x1
dyn x2' = -x2
region ball 5.0
box -5 5 -5 5
";
