//! Assembly and pointwise verification of contraction certificates.
//!
//! Everything runs in the dual-metric coordinates: with `W = M^-1` the
//! candidate metric and `A` the Jacobian, the certified object is
//! `H(x) = W A' + A W - dW/dt + lambda W`, which is linear in `W`. Strong
//! contraction asks `H <= 0` pointwise; transverse contraction asks the
//! same only on directions orthogonal to the flow, checked either by exact
//! projection or through the multiplier form `H - rho f f' <= 0`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{orth_complement, spd_inverse, sym_eig_max, sym_eig_min};
use crate::poly::{parse_expr, Polynomial};
use crate::polymat::{lie_derivative, PolyMatrix};
use crate::sysmodel::{DynSystem, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum CertMode {
    Strong,
    Transverse,
}

impl std::fmt::Display for CertMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CertMode::Strong => write!(f, "strong"),
            CertMode::Transverse => write!(f, "transverse"),
        }
    }
}

/// Candidate certificate: dual metric `W(x)`, multiplier `rho(x)` in
/// transverse mode, contraction rate and a uniform positive-definiteness
/// floor for `W` on the region.
#[derive(Debug, Clone)]
pub struct MetricCertificate {
    pub w: PolyMatrix,
    pub rho: Option<Polynomial>,
    pub lambda: f64,
    pub eps_pd: f64,
    pub mode: CertMode,
}

impl MetricCertificate {
    pub fn new(
        w: PolyMatrix,
        rho: Option<Polynomial>,
        lambda: f64,
        eps_pd: f64,
        mode: CertMode,
    ) -> Result<Self> {
        if !w.is_symmetric() {
            return Err(Error::Invalid("certificate metric W must be symmetric".into()));
        }
        if !(lambda > 0.0) || !(eps_pd > 0.0) {
            return Err(Error::Invalid("lambda and eps_pd must be positive".into()));
        }
        match (mode, &rho) {
            (CertMode::Transverse, None) => {
                return Err(Error::Invalid("transverse certificate requires rho".into()))
            }
            (CertMode::Strong, Some(_)) => {
                return Err(Error::Invalid("strong certificate must not carry rho".into()))
            }
            _ => {}
        }
        if let Some(r) = &rho {
            if r.nvars() != w.nvars() {
                return Err(Error::Dimension {
                    context: "certificate rho variables",
                    expected: w.nvars(),
                    got: r.nvars(),
                });
            }
        }
        Ok(MetricCertificate {
            w,
            rho,
            lambda,
            eps_pd,
            mode,
        })
    }

    pub fn degree_w(&self) -> u32 {
        let mut d = 0;
        for i in 0..self.w.rows() {
            for j in 0..self.w.cols() {
                d = d.max(self.w.get(i, j).degree());
            }
        }
        d
    }

    pub fn degree_rho(&self) -> Option<u32> {
        self.rho.as_ref().map(Polynomial::degree)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum VerdictKind {
    WPd,
    StrongLmi,
    TransverseProjected,
    TransverseMultiplier,
}

/// Outcome of one pointwise check: the most-positive relevant eigenvalue;
/// negative means pass.
#[derive(Debug, Clone)]
pub struct PointVerdict {
    pub x: Vec<f64>,
    pub margin: f64,
    pub kind: VerdictKind,
    /// Multiplier value at the point, for the multiplier-form check.
    pub rho_value: Option<f64>,
}

impl PointVerdict {
    pub fn pass(&self) -> bool {
        self.margin < 0.0 && self.rho_value.map_or(true, |r| r >= 0.0)
    }
}

fn check_cert_sys(sys: &DynSystem, cert: &MetricCertificate) -> Result<()> {
    if cert.w.rows() != sys.dim() || cert.w.cols() != sys.dim() {
        return Err(Error::Dimension {
            context: "certificate metric size vs state dimension",
            expected: sys.dim(),
            got: cert.w.rows(),
        });
    }
    if cert.w.nvars() != sys.nvars() {
        if !sys.is_bound() {
            return Err(Error::UnboundParameters(
                sys.params
                    .iter()
                    .map(|p| p.name.clone())
                    .collect::<Vec<_>>()
                    .join(", "),
            ));
        }
        return Err(Error::Dimension {
            context: "certificate metric variables",
            expected: sys.nvars(),
            got: cert.w.nvars(),
        });
    }
    Ok(())
}

/// `H = W A' + A W - dW/dt + lambda W` for a given dual metric.
///
/// Unbound parameters are allowed only when the metric ranges over the
/// joint (state, parameter) variable space; parameters are constant along
/// trajectories, so they contribute nothing to `dW/dt`.
pub fn assemble_h_with(sys: &DynSystem, w: &PolyMatrix, lambda: f64) -> Result<PolyMatrix> {
    let n = sys.dim();
    let nv = sys.nvars();
    if w.nvars() != nv || w.rows() != n {
        return Err(Error::Dimension {
            context: "metric for H assembly",
            expected: nv,
            got: w.nvars(),
        });
    }
    let a = sys.jacobian();
    let mut f_ext = sys.f.clone();
    for _ in 0..sys.params.len() {
        f_ext.push(Polynomial::zero(nv));
    }
    let wdot = lie_derivative(w, &f_ext)?;
    let wat = w.matmul(&a.transpose());
    let aw = a.matmul(w);
    Ok(wat.add(&aw).sub(&wdot).add(&w.scale(lambda)))
}

/// `H` for a certificate (see [`assemble_h_with`]).
pub fn assemble_h(sys: &DynSystem, cert: &MetricCertificate) -> Result<PolyMatrix> {
    check_cert_sys(sys, cert)?;
    assemble_h_with(sys, &cert.w, cert.lambda)
}

/// The rank-one outer product `Q(x) = f(x) f(x)'`.
pub fn q_of(sys: &DynSystem) -> PolyMatrix {
    let n = sys.dim();
    let mut q = PolyMatrix::zeros(n, n, sys.nvars());
    for i in 0..n {
        for j in i..n {
            q.set_sym(i, j, sys.f[i].mul(&sys.f[j]));
        }
    }
    q
}

/// Precomputed symbolic matrices for fast pointwise checks.
pub struct CertChecker {
    pub h: PolyMatrix,
    /// `H - rho Q` in transverse mode, `H` in strong mode.
    pub s: PolyMatrix,
    pub w: PolyMatrix,
    pub rho: Option<Polynomial>,
    pub eps_pd: f64,
    pub mode: CertMode,
    f: Vec<Polynomial>,
    dim: usize,
}

impl CertChecker {
    pub fn new(sys: &DynSystem, cert: &MetricCertificate) -> Result<Self> {
        check_cert_sys(sys, cert)?;
        let h = assemble_h(sys, cert)?;
        let s = match (&cert.mode, &cert.rho) {
            (CertMode::Transverse, Some(rho)) => h.sub(&q_of(sys).scale_poly(rho)),
            _ => h.clone(),
        };
        let mut f_ext = sys.f.clone();
        for _ in 0..sys.params.len() {
            f_ext.push(Polynomial::zero(sys.nvars()));
        }
        Ok(CertChecker {
            h,
            s,
            w: cert.w.clone(),
            rho: cert.rho.clone(),
            eps_pd: cert.eps_pd,
            mode: cert.mode,
            f: f_ext,
            dim: sys.dim(),
        })
    }

    /// Margin of the W-positivity floor: `eps_pd - lambda_min(W(x))`.
    pub fn w_margin(&self, x: &[f64]) -> f64 {
        self.eps_pd - sym_eig_min(&self.w.eval_unchecked(x))
    }

    /// Margin of the mode's matrix inequality at `x`.
    pub fn lmi_margin(&self, x: &[f64]) -> f64 {
        sym_eig_max(&self.s.eval_unchecked(x))
    }

    pub fn rho_value(&self, x: &[f64]) -> Option<f64> {
        self.rho.as_ref().map(|r| r.eval_unchecked(x))
    }

    fn f_at(&self, x: &[f64]) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_iterator(
            self.dim,
            self.f.iter().take(self.dim).map(|p| p.eval_unchecked(x)),
        )
    }
}

/// Exact transversality check: largest eigenvalue of `P' H(x) P` where the
/// columns of `P` span the orthogonal complement of `f(x)`.
pub fn transverse_check_projected(
    sys: &DynSystem,
    cert: &MetricCertificate,
    x: &[f64],
) -> Result<PointVerdict> {
    let checker = CertChecker::new(sys, cert)?;
    transverse_check_projected_prepared(&checker, x)
}

pub fn transverse_check_projected_prepared(
    checker: &CertChecker,
    x: &[f64],
) -> Result<PointVerdict> {
    let f = checker.f_at(x);
    let p = orth_complement(&f)?; // errors at equilibria
    let h = checker.h.eval_unchecked(x);
    let margin = sym_eig_max(&(p.transpose() * h * &p));
    Ok(PointVerdict {
        x: x.to_vec(),
        margin,
        kind: VerdictKind::TransverseProjected,
        rho_value: None,
    })
}

/// Multiplier-form check: largest eigenvalue of `H(x) - rho(x) Q(x)`,
/// passing only if `rho(x) >= 0` as well. Defined even at equilibria.
pub fn transverse_check_multiplier(
    sys: &DynSystem,
    cert: &MetricCertificate,
    x: &[f64],
) -> Result<PointVerdict> {
    if cert.mode != CertMode::Transverse {
        return Err(Error::HypothesisNotMet(
            "multiplier check requires a transverse certificate (missing rho)".into(),
        ));
    }
    let checker = CertChecker::new(sys, cert)?;
    Ok(PointVerdict {
        x: x.to_vec(),
        margin: checker.lmi_margin(x),
        kind: VerdictKind::TransverseMultiplier,
        rho_value: checker.rho_value(x),
    })
}

/// Strong-contraction check: largest eigenvalue of `H(x)`.
pub fn strong_check(sys: &DynSystem, cert: &MetricCertificate, x: &[f64]) -> Result<PointVerdict> {
    if cert.mode != CertMode::Strong {
        return Err(Error::HypothesisNotMet(
            "strong check requires a strong-mode certificate".into(),
        ));
    }
    let checker = CertChecker::new(sys, cert)?;
    Ok(PointVerdict {
        x: x.to_vec(),
        margin: checker.lmi_margin(x),
        kind: VerdictKind::StrongLmi,
        rho_value: None,
    })
}

/// W-positivity check at a point: `eps_pd - lambda_min(W(x))` as margin.
pub fn w_pd_check(sys: &DynSystem, cert: &MetricCertificate, x: &[f64]) -> Result<PointVerdict> {
    let checker = CertChecker::new(sys, cert)?;
    Ok(PointVerdict {
        x: x.to_vec(),
        margin: checker.w_margin(x),
        kind: VerdictKind::WPd,
        rho_value: None,
    })
}

/// How verification points are generated.
#[derive(Debug, Clone, serde::Serialize)]
pub enum GridSpec {
    /// Evenly spaced points per axis over the bounding box, filtered by
    /// region membership.
    PerAxis(usize),
    /// Seeded rejection sample of the region.
    Sampled { count: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct VerifySettings {
    /// Required strict margin: every LMI margin must be <= -margin_req.
    pub margin_req: f64,
    /// Grid tolerance for nonnegativity of the multiplier.
    pub rho_tol: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            margin_req: 1e-6,
            rho_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct VerifyReport {
    pub mode: CertMode,
    pub total_points: usize,
    pub pass_count: usize,
    pub fail_count: usize,
    /// Worst (largest) LMI margin over the grid and where it occurred.
    pub worst_margin: f64,
    pub worst_point: Vec<f64>,
    /// Worst W-floor margin (`eps_pd - lambda_min W`).
    pub worst_w_margin: f64,
    pub worst_w_point: Vec<f64>,
    /// Smallest multiplier value seen (transverse mode).
    pub min_rho: Option<f64>,
    pub margin_req: f64,
    pub pass: bool,
}

/// Generates the evaluation points of a grid spec within a region.
pub fn grid_points(region: &Region, spec: &GridSpec) -> Result<Vec<Vec<f64>>> {
    let pts = match spec {
        GridSpec::PerAxis(k) => {
            let k = (*k).max(2);
            let n = region.bbox.len();
            let mut pts = Vec::new();
            let mut idx = vec![0usize; n];
            loop {
                let x: Vec<f64> = (0..n)
                    .map(|i| {
                        let (lo, hi) = region.bbox[i];
                        lo + (hi - lo) * idx[i] as f64 / (k - 1) as f64
                    })
                    .collect();
                if region.contains(&x) {
                    pts.push(x);
                }
                // odometer increment
                let mut d = 0;
                loop {
                    idx[d] += 1;
                    if idx[d] < k {
                        break;
                    }
                    idx[d] = 0;
                    d += 1;
                    if d == n {
                        return finish_grid(pts);
                    }
                }
            }
        }
        GridSpec::Sampled { count, seed } => {
            crate::synth::sample_region(
                region,
                *count,
                *seed,
                crate::synth::SampleStrategy::UniformRejection,
            )?
            .points
        }
    };
    finish_grid(pts)
}

fn finish_grid(pts: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    if pts.is_empty() {
        Err(Error::EmptyGrid)
    } else {
        Ok(pts)
    }
}

/// Verifies the certificate's pointwise inequalities on every grid point
/// in the region. Points are evaluated in parallel; the reduction is
/// order-insensitive with a deterministic tie-break on point index.
pub fn grid_verify(
    sys: &DynSystem,
    cert: &MetricCertificate,
    spec: &GridSpec,
    settings: &VerifySettings,
) -> Result<VerifyReport> {
    let points = grid_points(&sys.region, spec)?;
    verify_on_points(sys, cert, &points, settings)
}

pub fn verify_on_points(
    sys: &DynSystem,
    cert: &MetricCertificate,
    points: &[Vec<f64>],
    settings: &VerifySettings,
) -> Result<VerifyReport> {
    if points.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let checker = CertChecker::new(sys, cert)?;

    struct Acc {
        pass: usize,
        fail: usize,
        worst: (f64, usize),
        worst_w: (f64, usize),
        min_rho: f64,
    }
    let identity = || Acc {
        pass: 0,
        fail: 0,
        worst: (f64::NEG_INFINITY, usize::MAX),
        worst_w: (f64::NEG_INFINITY, usize::MAX),
        min_rho: f64::INFINITY,
    };
    let better = |a: (f64, usize), b: (f64, usize)| -> (f64, usize) {
        // larger margin wins; ties break to the smaller point index
        if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
            b
        } else {
            a
        }
    };

    let acc = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let lmi = checker.lmi_margin(x);
            let wm = checker.w_margin(x);
            let rho = checker.rho_value(x);
            let ok = lmi <= -settings.margin_req
                && wm <= 0.0
                && rho.map_or(true, |r| r >= -settings.rho_tol);
            Acc {
                pass: ok as usize,
                fail: !ok as usize,
                worst: (lmi, i),
                worst_w: (wm, i),
                min_rho: rho.unwrap_or(f64::INFINITY),
            }
        })
        .reduce(identity, |a, b| Acc {
            pass: a.pass + b.pass,
            fail: a.fail + b.fail,
            worst: better(a.worst, b.worst),
            worst_w: better(a.worst_w, b.worst_w),
            min_rho: a.min_rho.min(b.min_rho),
        });

    if !acc.worst.0.is_finite() && acc.worst.0 != f64::NEG_INFINITY {
        return Err(Error::NonFinite("grid verification margins"));
    }
    let report = VerifyReport {
        mode: cert.mode,
        total_points: points.len(),
        pass_count: acc.pass,
        fail_count: acc.fail,
        worst_margin: acc.worst.0,
        worst_point: points[acc.worst.1.min(points.len() - 1)].clone(),
        worst_w_margin: acc.worst_w.0,
        worst_w_point: points[acc.worst_w.1.min(points.len() - 1)].clone(),
        min_rho: checker.rho.as_ref().map(|_| acc.min_rho),
        margin_req: settings.margin_req,
        pass: acc.fail == 0,
    };
    Ok(report)
}

/// The failing points of a grid, worst first by combined badness across
/// the mode's inequality, the W floor, and the multiplier sign; at most
/// `cap` points. Used by scenario refinement.
pub fn worst_violations(
    sys: &DynSystem,
    cert: &MetricCertificate,
    points: &[Vec<f64>],
    settings: &VerifySettings,
    cap: usize,
) -> Result<Vec<Vec<f64>>> {
    let checker = CertChecker::new(sys, cert)?;
    let mut bad: Vec<(f64, usize)> = points
        .par_iter()
        .enumerate()
        .filter_map(|(i, x)| {
            let lmi = checker.lmi_margin(x) + settings.margin_req;
            let wm = checker.w_margin(x);
            let rho_bad = checker
                .rho_value(x)
                .map_or(f64::NEG_INFINITY, |r| -(r + settings.rho_tol));
            let badness = lmi.max(wm).max(rho_bad);
            (badness > 0.0).then_some((badness, i))
        })
        .collect();
    bad.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(bad
        .into_iter()
        .take(cap)
        .map(|(_, i)| points[i].clone())
        .collect())
}

/// Upper bound on the metric distance along the straight segment from
/// `x1` to `x2`: the sum over subdivisions of `sqrt(dx' M(mid) dx)` with
/// `M = W^-1` inverted numerically at each midpoint.
pub fn metric_distance_segment(
    cert: &MetricCertificate,
    x1: &[f64],
    x2: &[f64],
    steps: usize,
) -> Result<f64> {
    if steps == 0 {
        return Err(Error::Invalid("segment subdivision needs steps >= 1".into()));
    }
    if x1.len() != x2.len() || x1.len() != cert.w.nvars() {
        return Err(Error::Dimension {
            context: "metric distance endpoints",
            expected: cert.w.nvars(),
            got: x1.len(),
        });
    }
    let n = x1.len();
    let dx: Vec<f64> = (0..n).map(|i| (x2[i] - x1[i]) / steps as f64).collect();
    let dxv = nalgebra::DVector::from_vec(dx.clone());
    let mut total = 0.0;
    for s in 0..steps {
        let mid: Vec<f64> = (0..n)
            .map(|i| x1[i] + dx[i] * (s as f64 + 0.5))
            .collect();
        let w = cert.w.eval_unchecked(&mid);
        let m = spd_inverse(&w)?;
        let q = (dxv.transpose() * &m * &dxv)[(0, 0)];
        total += q.max(0.0).sqrt();
    }
    Ok(total)
}

/// Renders a certificate in the text format: header, the upper triangle
/// of `W` entrywise, and `rho` when present. Expressions use the
/// system's variable names.
pub fn write_certificate(cert: &MetricCertificate, sys: &DynSystem) -> String {
    let names = sys.var_names();
    let mut out = String::new();
    out.push_str(&format!("certificate {}\n", sys.name));
    out.push_str(&format!("mode {}\n", cert.mode));
    out.push_str(&format!("lambda {}\n", cert.lambda));
    out.push_str(&format!("eps_pd {}\n", cert.eps_pd));
    out.push_str(&format!("degree_w {}\n", cert.degree_w()));
    if let Some(d) = cert.degree_rho() {
        out.push_str(&format!("degree_rho {}\n", d));
    }
    for i in 0..cert.w.rows() {
        for j in i..cert.w.cols() {
            out.push_str(&format!("W {} {} = {}\n", i, j, cert.w.get(i, j).to_text(&names)));
        }
    }
    if let Some(rho) = &cert.rho {
        out.push_str(&format!("rho = {}\n", rho.to_text(&names)));
    }
    out
}

/// Parses the certificate format against a system (for variable names and
/// dimension checks).
pub fn read_certificate(text: &str, sys: &DynSystem) -> Result<MetricCertificate> {
    let names = sys.var_names();
    let n = sys.dim();
    let mut mode: Option<CertMode> = None;
    let mut lambda: Option<f64> = None;
    let mut eps_pd: Option<f64> = None;
    let mut w = PolyMatrix::zeros(n, n, sys.nvars());
    let mut w_seen = vec![false; n * n];
    let mut rho: Option<Polynomial> = None;

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
            "certificate" => {
                if rest != sys.name {
                    return Err(Error::CertificateMismatch(format!(
                        "certificate is for system `{}`, not `{}`",
                        rest, sys.name
                    )));
                }
            }
            "mode" => {
                mode = Some(match rest {
                    "strong" => CertMode::Strong,
                    "transverse" => CertMode::Transverse,
                    other => return Err(perr(lineno, format!("unknown mode `{}`", other))),
                });
            }
            "lambda" => {
                lambda = Some(rest.parse().map_err(|_| perr(lineno, "invalid lambda".into()))?)
            }
            "eps_pd" => {
                eps_pd = Some(rest.parse().map_err(|_| perr(lineno, "invalid eps_pd".into()))?)
            }
            "degree_w" | "degree_rho" => { /* informational */ }
            "W" => {
                let (ij, expr) = rest
                    .split_once('=')
                    .ok_or_else(|| perr(lineno, "expected `W i j = <expr>`".into()))?;
                let idx: Vec<usize> = ij
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| perr(lineno, "invalid W indices".into()))?;
                if idx.len() != 2 || idx[0] >= n || idx[1] >= n {
                    return Err(perr(lineno, "W indices out of range".into()));
                }
                let col0 = raw.find('=').map(|i| i + 1).unwrap_or(0);
                let p = parse_expr(expr.trim(), &names, lineno, col0)?;
                w.set_sym(idx[0], idx[1], p);
                w_seen[idx[0] * n + idx[1]] = true;
                w_seen[idx[1] * n + idx[0]] = true;
            }
            "rho" => {
                let expr = rest
                    .strip_prefix('=')
                    .ok_or_else(|| perr(lineno, "expected `rho = <expr>`".into()))?;
                let col0 = raw.find('=').map(|i| i + 1).unwrap_or(0);
                rho = Some(parse_expr(expr.trim(), &names, lineno, col0)?);
            }
            other => return Err(perr(lineno, format!("unknown directive `{}`", other))),
        }
    }

    for i in 0..n {
        for j in i..n {
            if !w_seen[i * n + j] {
                return Err(Error::CertificateMismatch(format!(
                    "missing entry W {} {}",
                    i, j
                )));
            }
        }
    }
    let mode = mode.ok_or_else(|| Error::CertificateMismatch("missing mode".into()))?;
    let lambda = lambda.ok_or_else(|| Error::CertificateMismatch("missing lambda".into()))?;
    let eps_pd = eps_pd.ok_or_else(|| Error::CertificateMismatch("missing eps_pd".into()))?;
    MetricCertificate::new(w, rho, lambda, eps_pd, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::{builtin, parse_system};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn mg(delta: f64) -> DynSystem {
        let sys = builtin("moore_greitzer").unwrap();
        let mut vals = BTreeMap::new();
        vals.insert("delta".to_string(), delta);
        sys.bind_parameters(&vals).unwrap()
    }

    fn identity_cert(n: usize, lambda: f64, mode: CertMode, rho: Option<f64>) -> MetricCertificate {
        let w = PolyMatrix::identity(n, n);
        let rho = rho.map(|r| Polynomial::constant(n, r));
        MetricCertificate::new(w, rho, lambda, 1e-3, mode).unwrap()
    }

    #[test]
    fn h_at_origin_matches_hand_arithmetic() {
        // identity metric, lambda ~ 0: H(0) = A(0) + A(0)' = [[0,2],[2,-2]]
        let sys = mg(-1.2);
        let cert = identity_cert(2, 1e-12, CertMode::Strong, None);
        let h = assemble_h(&sys, &cert).unwrap();
        let h0 = h.eval(&[0.0, 0.0]).unwrap();
        assert_relative_eq!(h0[(0, 0)], 0.0, epsilon = 1e-9);
        assert_relative_eq!(h0[(0, 1)], 2.0, epsilon = 1e-9);
        assert_relative_eq!(h0[(1, 0)], 2.0, epsilon = 1e-9);
        assert_relative_eq!(h0[(1, 1)], -2.0, epsilon = 1e-9);
    }

    #[test]
    fn h_linear_system_is_lambda_minus_two_identity() {
        let sys = builtin("linear_stable_2d").unwrap();
        for lambda in [0.5, 1.0, 1.9] {
            let cert = identity_cert(2, lambda, CertMode::Strong, None);
            let h = assemble_h(&sys, &cert).unwrap();
            let expect = PolyMatrix::identity(2, 2).scale(lambda - 2.0);
            assert_eq!(h, expect);
        }
    }

    #[test]
    fn constant_metric_drops_lie_term() {
        // constant W: H = W A' + A W + lambda W exactly
        let sys = mg(-0.8);
        let mut w = PolyMatrix::zeros(2, 2, 2);
        w.set_sym(0, 0, Polynomial::constant(2, 2.0));
        w.set_sym(0, 1, Polynomial::constant(2, 0.5));
        w.set_sym(1, 1, Polynomial::constant(2, 1.5));
        let lambda = 0.3;
        let cert = MetricCertificate::new(w.clone(), None, lambda, 1e-3, CertMode::Strong).unwrap();
        let h = assemble_h(&sys, &cert).unwrap();
        let a = sys.jacobian();
        let expect = w
            .matmul(&a.transpose())
            .add(&a.matmul(&w))
            .add(&w.scale(lambda));
        assert_eq!(h, expect);
    }

    #[test]
    fn q_examples() {
        // constant field (1, 0)
        let sys = parse_system("system c\nstate x y\ndyn x' = 1\ndyn y' = 0\nbox -1 1 -1 1\n").unwrap();
        let q = q_of(&sys);
        let q0 = q.eval(&[0.3, -0.7]).unwrap();
        assert_eq!(q0, nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));

        // engine model at the origin with delta = -1.2: f = (-1.2, 0)
        let sys = mg(-1.2);
        let q = q_of(&sys).eval(&[0.0, 0.0]).unwrap();
        assert_relative_eq!(q[(0, 0)], 1.44, epsilon = 1e-12);
        assert_relative_eq!(q[(0, 1)], 0.0);
        assert_relative_eq!(q[(1, 1)], 0.0);

        // Q vanishes at equilibria
        let sys08 = mg(-0.8);
        // equilibrium root from the monotone cubic
        let g = |phi: f64| 3.0 * phi + 1.5 * phi * phi + 0.5 * phi * phi * phi + 0.8;
        let (mut lo, mut hi) = (-2.0, 0.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        let phi = 0.5 * (lo + hi);
        let qe = q_of(&sys08).eval(&[phi, 3.0 * phi]).unwrap();
        assert!(qe.norm() < 1e-12);
    }

    #[test]
    fn projected_check_hand_cases() {
        // A synthetic system with f = (1, 0) everywhere. H is controlled
        // through the metric: constant W makes H = W A' + A W + lambda W,
        // but here A = 0, so H = lambda W.
        let sys = parse_system("system c\nstate x y\ndyn x' = 1\ndyn y' = 0\nbox -1 1 -1 1\n").unwrap();
        // W chosen so H = lambda W picks out the (2,2) entry under projection
        let mut w = PolyMatrix::zeros(2, 2, 2);
        w.set_sym(0, 0, Polynomial::constant(2, 1.0));
        w.set_sym(0, 1, Polynomial::constant(2, 0.0));
        w.set_sym(1, 1, Polynomial::constant(2, 2.0));
        let cert = MetricCertificate::new(
            w,
            Some(Polynomial::zero(2)),
            1.0,
            1e-3,
            CertMode::Transverse,
        )
        .unwrap();
        let v = transverse_check_projected(&sys, &cert, &[0.0, 0.0]).unwrap();
        // P = e2, H = 1.0 * W, margin = W22 = 2
        assert_relative_eq!(v.margin, 2.0, epsilon = 1e-12);
        assert!(!v.pass());
    }

    #[test]
    fn projected_check_errors_at_equilibrium() {
        let sys = builtin("linear_stable_2d").unwrap();
        let cert = identity_cert(2, 0.1, CertMode::Transverse, Some(0.0));
        let err = transverse_check_projected(&sys, &cert, &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::EquilibriumPoint));
    }

    #[test]
    fn projected_margin_matches_angular_grid_oracle() {
        // random 3-D instances: compare against a 1-degree sweep of the
        // unit circle in the complement plane
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..25 {
            let h = {
                let a = nalgebra::DMatrix::from_fn(3, 3, |_, _| rng.random_range(-2.0..2.0));
                (&a + a.transpose()) * 0.5
            };
            let f = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            if f.norm() < 0.2 {
                continue;
            }
            let p = orth_complement(&f).unwrap();
            let margin = sym_eig_max(&(p.transpose() * &h * &p));
            let mut brute = f64::NEG_INFINITY;
            for deg in 0..360 {
                let t = (deg as f64).to_radians();
                let eta = &p * DVector::from_vec(vec![t.cos(), t.sin()]);
                brute = brute.max((eta.transpose() * &h * &eta)[(0, 0)]);
            }
            assert!(
                (margin - brute).abs() < 1e-3,
                "projected {margin} vs angular oracle {brute}"
            );
        }
    }

    #[test]
    fn multiplier_check_hand_cases() {
        // delta = -1.0 puts f(0) = (-1, 0), so Q(0) = [[1,0],[0,0]] and
        // H(0) = [[0,2],[2,-2]] with the identity metric at lambda ~ 0.
        let sys = mg(-1.0);
        let marginal = MetricCertificate::new(
            PolyMatrix::identity(2, 2),
            Some(Polynomial::constant(2, 2.0)),
            1e-12,
            1e-3,
            CertMode::Transverse,
        )
        .unwrap();
        let v = transverse_check_multiplier(&sys, &marginal, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(v.margin, 0.0, epsilon = 1e-9);
        assert!(!v.pass(), "marginal case must not pass strictly");

        let passing = MetricCertificate::new(
            PolyMatrix::identity(2, 2),
            Some(Polynomial::constant(2, 4.0)),
            1e-12,
            1e-3,
            CertMode::Transverse,
        )
        .unwrap();
        let v = transverse_check_multiplier(&sys, &passing, &[0.0, 0.0]).unwrap();
        assert!(v.margin < -1e-6 && v.pass(), "margin {}", v.margin);

        // negative multiplier fails regardless of eigenvalues
        let neg_rho = MetricCertificate::new(
            PolyMatrix::identity(2, 2),
            Some(Polynomial::constant(2, -1.0)),
            1e-12,
            1e-3,
            CertMode::Transverse,
        )
        .unwrap();
        let v = transverse_check_multiplier(&sys, &neg_rho, &[3.0, 1.0]).unwrap();
        assert!(!v.pass());
        assert_eq!(v.rho_value, Some(-1.0));
    }

    #[test]
    fn strong_check_linear_cases() {
        let sys = builtin("linear_stable_2d").unwrap();
        let pass = identity_cert(2, 1.0, CertMode::Strong, None);
        let v = strong_check(&sys, &pass, &[1.0, -2.0]).unwrap();
        assert_relative_eq!(v.margin, -1.0, epsilon = 1e-12);
        assert!(v.pass());

        let fail = identity_cert(2, 3.0, CertMode::Strong, None);
        let v = strong_check(&sys, &fail, &[0.5, 0.5]).unwrap();
        assert_relative_eq!(v.margin, 1.0, epsilon = 1e-12);
        assert!(!v.pass());
    }

    #[test]
    fn grid_verify_linear_all_pass() {
        let sys = builtin("linear_stable_2d").unwrap();
        let cert = identity_cert(2, 1.0, CertMode::Strong, None);
        let report = grid_verify(
            &sys,
            &cert,
            &GridSpec::PerAxis(100),
            &VerifySettings::default(),
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.fail_count, 0);
        assert_relative_eq!(report.worst_margin, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn h_assembly_is_linear_in_w() {
        let sys = mg(-1.2);
        let names = ["phi", "psi"];
        let mut w1 = PolyMatrix::zeros(2, 2, 2);
        w1.set_sym(0, 0, parse_expr("1 + 0.2*phi^2", &names, 1, 0).unwrap());
        w1.set_sym(0, 1, parse_expr("0.1*phi*psi", &names, 1, 0).unwrap());
        w1.set_sym(1, 1, parse_expr("1 + 0.1*psi^2", &names, 1, 0).unwrap());
        let mut w2 = PolyMatrix::zeros(2, 2, 2);
        w2.set_sym(0, 0, parse_expr("2 - 0.3*psi", &names, 1, 0).unwrap());
        w2.set_sym(0, 1, parse_expr("0.05*phi", &names, 1, 0).unwrap());
        w2.set_sym(1, 1, parse_expr("1.5 + 0.2*phi", &names, 1, 0).unwrap());
        let lambda = 0.7;
        let h1 = assemble_h_with(&sys, &w1, lambda).unwrap();
        let h2 = assemble_h_with(&sys, &w2, lambda).unwrap();
        let hsum = assemble_h_with(&sys, &w1.add(&w2), lambda).unwrap();
        assert_poly_matrix_close(&hsum, &h1.add(&h2));
        let c = 2.5;
        let hc = assemble_h_with(&sys, &w1.scale(c), lambda).unwrap();
        assert_poly_matrix_close(&hc, &h1.scale(c));
    }

    /// Coefficientwise comparison up to floating-point rounding (addition
    /// order differs between the two assembly routes).
    fn assert_poly_matrix_close(a: &PolyMatrix, b: &PolyMatrix) {
        assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                let d = a.get(i, j).sub(b.get(i, j));
                for (_, c) in d.terms() {
                    assert!(c.abs() < 1e-12, "coefficient residue {c} at entry ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn metric_distance_euclidean_and_scaled() {
        // W = I: distance is euclidean for any step count
        let cert = identity_cert(2, 0.5, CertMode::Strong, None);
        let d = metric_distance_segment(&cert, &[0.0, 0.0], &[3.0, 4.0], 1).unwrap();
        assert_relative_eq!(d, 5.0, epsilon = 1e-12);
        let d = metric_distance_segment(&cert, &[0.0, 0.0], &[3.0, 4.0], 17).unwrap();
        assert_relative_eq!(d, 5.0, epsilon = 1e-12);

        // M = 4I means W = 0.25 I: distance doubles
        let w = PolyMatrix::identity(2, 2).scale(0.25);
        let cert = MetricCertificate::new(w, None, 0.5, 1e-6, CertMode::Strong).unwrap();
        let d = metric_distance_segment(&cert, &[1.0, 1.0], &[2.0, 1.0], 4).unwrap();
        assert_relative_eq!(d, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn metric_distance_refinement_converges() {
        // smooth degree-4 metric: doubling steps changes the result < 1%
        let names = ["x", "y"];
        let mut w = PolyMatrix::zeros(2, 2, 2);
        w.set_sym(0, 0, parse_expr("1 + 0.1*x^2 + 0.05*x^4", &names, 1, 0).unwrap());
        w.set_sym(0, 1, parse_expr("0.02*x*y", &names, 1, 0).unwrap());
        w.set_sym(1, 1, parse_expr("1 + 0.1*y^2 + 0.01*x^2*y^2", &names, 1, 0).unwrap());
        let cert = MetricCertificate::new(w, None, 0.5, 1e-6, CertMode::Strong).unwrap();
        let d1 = metric_distance_segment(&cert, &[-1.0, 0.5], &[1.2, -0.7], 64).unwrap();
        let d2 = metric_distance_segment(&cert, &[-1.0, 0.5], &[1.2, -0.7], 128).unwrap();
        assert!((d1 - d2).abs() / d2 < 0.01, "d1={d1} d2={d2}");
    }

    #[test]
    fn metric_distance_errors_on_singular_w() {
        let names = ["x", "y"];
        let mut w = PolyMatrix::zeros(2, 2, 2);
        w.set_sym(0, 0, parse_expr("x", &names, 1, 0).unwrap()); // not PD at x <= 0
        w.set_sym(1, 1, Polynomial::constant(2, 1.0));
        let cert = MetricCertificate::new(w, None, 0.5, 1e-6, CertMode::Strong).unwrap();
        assert!(metric_distance_segment(&cert, &[-1.0, 0.0], &[1.0, 0.0], 3).is_err());
    }

    #[test]
    fn certificate_file_roundtrip() {
        let sys = mg(-1.2);
        let names = ["phi", "psi"];
        let mut w = PolyMatrix::zeros(2, 2, 2);
        w.set_sym(0, 0, parse_expr("1 + 0.25*phi^2", &names, 1, 0).unwrap());
        w.set_sym(0, 1, parse_expr("0.1*phi", &names, 1, 0).unwrap());
        w.set_sym(1, 1, parse_expr("2", &names, 1, 0).unwrap());
        let rho = parse_expr("3 + phi^2 + psi^2", &names, 1, 0).unwrap();
        let cert =
            MetricCertificate::new(w, Some(rho), 0.1, 1e-3, CertMode::Transverse).unwrap();
        let text = write_certificate(&cert, &sys);
        let back = read_certificate(&text, &sys).unwrap();
        assert_eq!(back.w, cert.w);
        assert_eq!(back.rho, cert.rho);
        assert_eq!(back.lambda, cert.lambda);
        assert_eq!(back.mode, cert.mode);
    }

    #[test]
    fn certificate_rejects_wrong_system() {
        let sys = mg(-1.2);
        let other = builtin("circular").unwrap();
        let cert = identity_cert(2, 0.1, CertMode::Strong, None);
        let text = write_certificate(&cert, &sys);
        assert!(matches!(
            read_certificate(&text, &other),
            Err(Error::CertificateMismatch(_))
        ));
    }

    #[test]
    fn sprocedure_losslessness_sample() {
        // multiplier feasibility (scalar search over rho) agrees with the
        // projected eigenvalue verdict outside a tiny margin band
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        for _ in 0..100 {
            let n = rng.random_range(2..=4usize);
            let h = {
                let a = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                (&a + a.transpose()) * 0.5
            };
            let f = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            if f.norm() < 0.1 {
                continue;
            }
            let p = orth_complement(&f).unwrap();
            let projected = sym_eig_max(&(p.transpose() * &h * &p));
            if (projected + 1e-9).abs() <= 1e-7 {
                continue; // margin band
            }
            let q = &f * f.transpose();
            let feasible = rho_feasible_by_search(&h, &q);
            assert_eq!(
                feasible,
                projected < -1e-9,
                "projected={projected} disagrees with multiplier search"
            );
            checked += 1;
        }
        assert!(checked > 50);
    }

    /// Golden-section search over rho in [0, 1e6] for the convex function
    /// lambda_max(H - rho Q); feasible iff the minimum is <= -1e-9.
    fn rho_feasible_by_search(h: &nalgebra::DMatrix<f64>, q: &nalgebra::DMatrix<f64>) -> bool {
        let g = |rho: f64| sym_eig_max(&(h - q * rho));
        let (mut a, mut b) = (0.0f64, 1e6f64);
        let phi = 0.5 * (5.0f64.sqrt() - 1.0);
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let (mut gc, mut gd) = (g(c), g(d));
        for _ in 0..200 {
            if gc < gd {
                b = d;
                d = c;
                gd = gc;
                c = b - phi * (b - a);
                gc = g(c);
            } else {
                a = c;
                c = d;
                gc = gd;
                d = a + phi * (b - a);
                gd = g(d);
            }
        }
        g(0.5 * (a + b)).min(gc).min(gd) <= -1e-9
    }
}
