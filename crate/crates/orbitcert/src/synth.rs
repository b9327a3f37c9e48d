//! Certificate search: parameterize the metric (and multiplier), sample
//! the region, assemble the sampled matrix-inequality system, solve it,
//! and hand dense verification back to the pointwise checker. Also the
//! parameter sweep that localizes where the qualitative behavior flips.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::certcheck::{
    grid_verify, CertMode, GridSpec, MetricCertificate, VerifyReport, VerifySettings,
};
use crate::error::{Error, Result};
use crate::poly::{monomials_up_to, Polynomial};
use crate::polymat::PolyMatrix;
use crate::sdpfeas::{
    solve_feasibility_opts, AffineLmi, FeasResult, FeasStatus, FeasibilityProblem, SolveOptions,
};
use crate::simlab::{detect_limit_cycle, CycleOutcome, DetectSettings};
use crate::sysmodel::{DynSystem, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SampleStrategy {
    UniformRejection,
    Grid,
    BoundaryBiased,
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Vec<Vec<f64>>,
    pub seed: u64,
    pub strategy: SampleStrategy,
}

/// Draws `count` points of the region. `BoundaryBiased` places at least a
/// quarter of them within 5% of the box diameter of an active constraint
/// boundary (first-order distance estimate `g/|grad g|`).
pub fn sample_region(
    region: &Region,
    count: usize,
    seed: u64,
    strategy: SampleStrategy,
) -> Result<SampleSet> {
    if count == 0 {
        return Err(Error::Invalid("sample count must be >= 1".into()));
    }
    let n = region.bbox.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);

    match strategy {
        SampleStrategy::Grid => {
            let per_axis = (count as f64).powf(1.0 / n as f64).ceil().max(2.0) as usize;
            let pts = crate::certcheck::grid_points(region, &GridSpec::PerAxis(per_axis))?;
            points = pts;
        }
        SampleStrategy::UniformRejection => {
            rejection_fill(region, count, &mut rng, &mut points, None)?;
        }
        SampleStrategy::BoundaryBiased => {
            let quota = count.div_ceil(4);
            let band = 0.05 * region.box_diameter();
            let grads: Vec<Vec<Polynomial>> = region
                .constraints
                .iter()
                .map(|g| (0..n).map(|i| g.diff(i)).collect())
                .collect();
            let near_boundary = |x: &[f64]| -> bool {
                for (g, grad) in region.constraints.iter().zip(&grads) {
                    let gv = g.eval_unchecked(x);
                    let gn: f64 = grad
                        .iter()
                        .map(|d| d.eval_unchecked(x).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if gn > 1e-12 && gv / gn <= band {
                        return true;
                    }
                }
                false
            };
            rejection_fill(region, quota, &mut rng, &mut points, Some(&near_boundary))?;
            rejection_fill(region, count - quota, &mut rng, &mut points, None)?;
        }
    }

    Ok(SampleSet {
        points,
        seed,
        strategy,
    })
}

fn rejection_fill(
    region: &Region,
    count: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Vec<f64>>,
    extra: Option<&dyn Fn(&[f64]) -> bool>,
) -> Result<()> {
    let mut attempts = 0usize;
    let mut accepted = 0usize;
    while accepted < count {
        attempts += 1;
        if attempts >= 1_000_000 && (accepted as f64) < 1e-4 * attempts as f64 {
            return Err(Error::RegionTooThin);
        }
        let x: Vec<f64> = region
            .bbox
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..hi))
            .collect();
        if !region.contains(&x) {
            continue;
        }
        if let Some(pred) = extra {
            if !pred(&x) {
                continue;
            }
        }
        out.push(x);
        accepted += 1;
    }
    Ok(())
}

/// Shape of the candidate certificate: even metric degree, multiplier
/// degree, and (for parameter-robust search) which parameters the metric
/// may depend on. Scale is pinned by `trace(W(anchor)) = trace_target`.
#[derive(Debug, Clone)]
pub struct MetricAnsatz {
    pub degree_w: u32,
    pub degree_rho: u32,
    pub include_params: Vec<String>,
    /// Defaults to the state dimension when `None`.
    pub trace_target: Option<f64>,
}

impl MetricAnsatz {
    pub fn new(degree_w: u32, degree_rho: u32) -> Self {
        MetricAnsatz {
            degree_w,
            degree_rho,
            include_params: Vec::new(),
            trace_target: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    /// Required margin at every sample (the scenario margin).
    pub sampled_margin: f64,
    /// Box bound on scaled ansatz coefficients.
    pub coeff_bound: f64,
    pub seed: u64,
    pub solver: SolveOptions,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            sampled_margin: 1e-4,
            coeff_bound: 1e4,
            seed: 0,
            solver: SolveOptions::default(),
        }
    }
}

/// Default scenario sample count for a given number of free coefficients.
pub fn default_sample_count(n_coeffs: usize) -> usize {
    (50 * n_coeffs).min(20000)
}

#[derive(Debug, Clone)]
pub struct Synthesized {
    pub cert: MetricCertificate,
    /// Worst margin over the sampled constraints at the solution.
    pub sampled_margin: f64,
    pub n_coeffs: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SynthFailure {
    pub status: FeasStatus,
    pub best_margin: f64,
    pub blocking_sample: Vec<f64>,
    pub blocking_kind: &'static str,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub enum SynthOutcome {
    Success(Synthesized),
    Failure(SynthFailure),
}

impl SynthOutcome {
    pub fn success(self) -> Option<Synthesized> {
        match self {
            SynthOutcome::Success(s) => Some(s),
            SynthOutcome::Failure(_) => None,
        }
    }
}

#[derive(Clone, Copy)]
enum LmiTag {
    WPd(usize),
    Main(usize),
    RhoNonneg(usize),
}

impl LmiTag {
    fn kind(&self) -> &'static str {
        match self {
            LmiTag::WPd(_) => "W positive-definiteness floor",
            LmiTag::Main(_) => "contraction inequality",
            LmiTag::RhoNonneg(_) => "multiplier nonnegativity",
        }
    }

    fn sample(&self) -> usize {
        match self {
            LmiTag::WPd(i) | LmiTag::Main(i) | LmiTag::RhoNonneg(i) => *i,
        }
    }
}

struct CoeffLayout {
    n: usize,
    nv: usize,
    w_entries: Vec<(usize, usize)>,
    w_basis: Vec<Vec<u32>>,
    rho_basis: Vec<Vec<u32>>,
    w_scales: Vec<f64>,
    rho_scales: Vec<f64>,
    n_w: usize,
    n_rho: usize,
}

impl CoeffLayout {
    fn new(
        sys: &DynSystem,
        ansatz: &MetricAnsatz,
        mode: CertMode,
        var_scales: &[f64],
    ) -> CoeffLayout {
        let n = sys.dim();
        let nv = sys.nvars();
        let mut w_entries = Vec::new();
        for i in 0..n {
            for j in i..n {
                w_entries.push((i, j));
            }
        }
        let w_basis = monomials_up_to(nv, ansatz.degree_w);
        let rho_basis = if mode == CertMode::Transverse {
            monomials_up_to(nv, ansatz.degree_rho)
        } else {
            Vec::new()
        };
        let scale_of = |e: &[u32]| -> f64 {
            e.iter()
                .zip(var_scales)
                .map(|(&p, &s)| s.powi(p as i32))
                .product()
        };
        let w_scales: Vec<f64> = w_basis.iter().map(|e| scale_of(e)).collect();
        let rho_scales: Vec<f64> = rho_basis.iter().map(|e| scale_of(e)).collect();
        let n_w = w_entries.len() * w_basis.len();
        let n_rho = rho_basis.len();
        CoeffLayout {
            n,
            nv,
            w_entries,
            w_basis,
            rho_basis,
            w_scales,
            rho_scales,
            n_w,
            n_rho,
        }
    }

    fn total(&self) -> usize {
        self.n_w + self.n_rho
    }

    fn w_var(&self, entry: usize, basis: usize) -> usize {
        entry * self.w_basis.len() + basis
    }

    fn rho_var(&self, basis: usize) -> usize {
        self.n_w + basis
    }

    /// Unit metric for one (entry, basis) pair.
    fn unit_w(&self, entry: usize, basis: usize) -> PolyMatrix {
        let (i, j) = self.w_entries[entry];
        let mono = Polynomial::monomial(self.w_basis[basis].clone(), 1.0);
        let mut w = PolyMatrix::zeros(self.n, self.n, self.nv);
        w.set_sym(i, j, mono);
        w
    }

    fn materialize(&self, v: &[f64]) -> (PolyMatrix, Option<Polynomial>) {
        let mut w = PolyMatrix::zeros(self.n, self.n, self.nv);
        for (e, &(i, j)) in self.w_entries.iter().enumerate() {
            let mut p = Polynomial::zero(self.nv);
            for (b, exps) in self.w_basis.iter().enumerate() {
                let c = v[self.w_var(e, b)] / self.w_scales[b];
                if c != 0.0 {
                    p.add_term(exps.clone(), c);
                }
            }
            w.set_sym(i, j, p);
        }
        let rho = if self.rho_basis.is_empty() {
            None
        } else {
            let mut p = Polynomial::zero(self.nv);
            for (b, exps) in self.rho_basis.iter().enumerate() {
                let c = v[self.rho_var(b)] / self.rho_scales[b];
                if c != 0.0 {
                    p.add_term(exps.clone(), c);
                }
            }
            Some(p)
        };
        (w, rho)
    }
}

fn mono_eval(exps: &[u32], x: &[f64]) -> f64 {
    exps.iter()
        .zip(x)
        .map(|(&p, &xi)| if p == 0 { 1.0 } else { xi.powi(p as i32) })
        .product()
}

fn validate_params(sys: &DynSystem, ansatz: &MetricAnsatz) -> Result<()> {
    let mut unbound: Vec<&str> = sys.params.iter().map(|p| p.name.as_str()).collect();
    unbound.sort_unstable();
    let mut included: Vec<&str> = ansatz.include_params.iter().map(String::as_str).collect();
    included.sort_unstable();
    if unbound != included {
        return Err(Error::UnboundParameters(format!(
            "ansatz covers parameters [{}] but the system has [{}] unbound",
            included.join(", "),
            unbound.join(", ")
        )));
    }
    Ok(())
}

/// Searches for a certificate satisfying the sampled inequalities:
/// `W(x_k) >= (eps_pd + m) I`, in transverse mode
/// `-H(x_k) + rho(x_k) Q(x_k) >= m I` and `rho(x_k) >= m`, in strong mode
/// `-H(x_k) >= m I`, all affine in the ansatz coefficients. The scale is
/// pinned by the trace normalization at the box-center anchor.
pub fn synthesize_certificate(
    sys: &DynSystem,
    ansatz: &MetricAnsatz,
    samples: &SampleSet,
    lambda: f64,
    eps_pd: f64,
    mode: CertMode,
    opts: &SynthOptions,
) -> Result<SynthOutcome> {
    validate_params(sys, ansatz)?;
    if !sys.is_bound() {
        return Err(Error::UnboundParameters(
            "plain synthesis requires a fully bound system; use robust_synthesize".into(),
        ));
    }
    synthesize_on_points(sys, ansatz, &samples.points, &[], lambda, eps_pd, mode, opts)
}

/// Parameter-robust search: one certificate `W(x, theta)` (and
/// `rho(x, theta)`) that passes the sampled inequalities jointly over the
/// region and the parameter box.
pub fn robust_synthesize(
    sys: &DynSystem,
    ansatz: &MetricAnsatz,
    theta_box: &[(f64, f64)],
    joint_samples: &[Vec<f64>],
    lambda: f64,
    eps_pd: f64,
    mode: CertMode,
    opts: &SynthOptions,
) -> Result<SynthOutcome> {
    validate_params(sys, ansatz)?;
    if theta_box.len() != sys.params.len() {
        return Err(Error::Dimension {
            context: "parameter box",
            expected: sys.params.len(),
            got: theta_box.len(),
        });
    }
    synthesize_on_points(sys, ansatz, joint_samples, theta_box, lambda, eps_pd, mode, opts)
}

/// Samples the joint (state, parameter) space: states by rejection in the
/// region, parameters uniformly in their box, with a pending `|f|^2 >= eps`
/// exclusion applied jointly.
pub fn sample_joint(
    sys: &DynSystem,
    theta_box: &[(f64, f64)],
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f2 = sys.region.fmin_eps.map(|eps| (sys.f_norm2_poly(), eps));
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts >= 1_000_000 && (out.len() as f64) < 1e-4 * attempts as f64 {
            return Err(Error::RegionTooThin);
        }
        let x: Vec<f64> = sys
            .region
            .bbox
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..hi))
            .collect();
        if !sys.region.contains(&x) {
            continue;
        }
        let mut joint = x;
        for &(lo, hi) in theta_box {
            joint.push(rng.random_range(lo..hi));
        }
        if let Some((p, eps)) = &f2 {
            if p.eval_unchecked(&joint) < *eps {
                continue;
            }
        }
        out.push(joint);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn synthesize_on_points(
    sys: &DynSystem,
    ansatz: &MetricAnsatz,
    points: &[Vec<f64>],
    theta_box: &[(f64, f64)],
    lambda: f64,
    eps_pd: f64,
    mode: CertMode,
    opts: &SynthOptions,
) -> Result<SynthOutcome> {
    if points.is_empty() {
        return Err(Error::Invalid("synthesis needs a nonempty sample set".into()));
    }
    if !(lambda > 0.0 && eps_pd > 0.0) {
        return Err(Error::Invalid("lambda and eps_pd must be positive".into()));
    }
    let n = sys.dim();
    let nv = sys.nvars();
    for p in points {
        if p.len() != nv {
            return Err(Error::Dimension {
                context: "synthesis sample",
                expected: nv,
                got: p.len(),
            });
        }
    }

    // variable scales: box half-width floors at 1
    let mut var_scales: Vec<f64> = sys
        .region
        .bbox
        .iter()
        .map(|&(lo, hi)| lo.abs().max(hi.abs()).max(1.0))
        .collect();
    for &(lo, hi) in theta_box {
        var_scales.push(lo.abs().max(hi.abs()).max(1.0));
    }

    let layout = CoeffLayout::new(sys, ansatz, mode, &var_scales);
    let nvars_total = layout.total();

    // anchor at the box center
    let mut anchor: Vec<f64> = sys
        .region
        .bbox
        .iter()
        .map(|&(lo, hi)| 0.5 * (lo + hi))
        .collect();
    for &(lo, hi) in theta_box {
        anchor.push(0.5 * (lo + hi));
    }
    let trace_target = ansatz.trace_target.unwrap_or(n as f64);

    // symbolic unit contributions to H, one per (entry, basis monomial)
    let mut h_units: Vec<PolyMatrix> = Vec::with_capacity(layout.n_w);
    for e in 0..layout.w_entries.len() {
        for b in 0..layout.w_basis.len() {
            let unit = layout.unit_w(e, b);
            h_units.push(crate::certcheck::assemble_h_with(sys, &unit, lambda)?);
        }
    }
    let q = crate::certcheck::q_of(sys);

    let margin = opts.sampled_margin;
    let mut prob = FeasibilityProblem::new(nvars_total, margin);
    prob.var_box = vec![(-opts.coeff_bound, opts.coeff_bound); nvars_total];
    let mut tags: Vec<LmiTag> = Vec::new();

    for (pi, x) in points.iter().enumerate() {
        let w_basis_vals: Vec<f64> = layout
            .w_basis
            .iter()
            .zip(&layout.w_scales)
            .map(|(e, s)| mono_eval(e, x) / s)
            .collect();

        // W(x) - eps_pd I >= t I
        let mut coeffs = Vec::with_capacity(layout.n_w);
        for (e, &(i, j)) in layout.w_entries.iter().enumerate() {
            for (b, &bv) in w_basis_vals.iter().enumerate() {
                if bv == 0.0 {
                    continue;
                }
                let mut m = DMatrix::zeros(n, n);
                m[(i, j)] = bv;
                m[(j, i)] = bv;
                coeffs.push((layout.w_var(e, b), m));
            }
        }
        prob.lmis.push(AffineLmi {
            constant: DMatrix::identity(n, n) * (-eps_pd),
            coeffs,
        });
        tags.push(LmiTag::WPd(pi));

        // -H(x) [+ rho(x) Q(x)] >= t I
        let mut coeffs = Vec::with_capacity(nvars_total);
        for e in 0..layout.w_entries.len() {
            for b in 0..layout.w_basis.len() {
                let hm = h_units[layout.w_var(e, b)].eval_unchecked(x);
                let sc = -1.0 / layout.w_scales[b];
                coeffs.push((layout.w_var(e, b), hm * sc));
            }
        }
        if mode == CertMode::Transverse {
            let qx = q.eval_unchecked(x);
            for (b, exps) in layout.rho_basis.iter().enumerate() {
                let bv = mono_eval(exps, x) / layout.rho_scales[b];
                if bv == 0.0 {
                    continue;
                }
                coeffs.push((layout.rho_var(b), &qx * bv));
            }
        }
        prob.lmis.push(AffineLmi {
            constant: DMatrix::zeros(n, n),
            coeffs,
        });
        tags.push(LmiTag::Main(pi));

        // rho(x) >= t
        if mode == CertMode::Transverse {
            let coeffs: Vec<(usize, DMatrix<f64>)> = layout
                .rho_basis
                .iter()
                .enumerate()
                .filter_map(|(b, exps)| {
                    let bv = mono_eval(exps, x) / layout.rho_scales[b];
                    (bv != 0.0).then(|| (layout.rho_var(b), DMatrix::from_element(1, 1, bv)))
                })
                .collect();
            prob.lmis.push(AffineLmi {
                constant: DMatrix::zeros(1, 1),
                coeffs,
            });
            tags.push(LmiTag::RhoNonneg(pi));
        }
    }

    // normalization: trace(W(anchor)) = trace_target, eliminated exactly
    let mut eq = vec![0.0; nvars_total];
    for (e, &(i, j)) in layout.w_entries.iter().enumerate() {
        if i != j {
            continue;
        }
        for (b, exps) in layout.w_basis.iter().enumerate() {
            eq[layout.w_var(e, b)] += mono_eval(exps, &anchor) / layout.w_scales[b];
        }
    }
    let (reduced, lift) = prob.eliminate_equality(&eq, trace_target)?;

    // warm start from the identity-scaled metric (and a unit multiplier):
    // it satisfies the positivity floor everywhere and the normalization
    let mut v_init = vec![0.0; nvars_total];
    let w_scale = trace_target / n as f64;
    for (e, &(i, j)) in layout.w_entries.iter().enumerate() {
        if i == j {
            // constant basis monomial is index 0 with unit scale
            v_init[layout.w_var(e, 0)] = w_scale * layout.w_scales[0];
        }
    }
    if mode == CertMode::Transverse && !layout.rho_basis.is_empty() {
        v_init[layout.rho_var(0)] = layout.rho_scales[0];
    }
    let mut solver_opts = opts.solver.clone();
    solver_opts.initial = Some(lift.reduce(&v_init));

    let res: FeasResult = solve_feasibility_opts(&reduced, opts.seed, &solver_opts)?;
    let v_full = lift.lift(&res.v);
    let (w, rho) = layout.materialize(&v_full);

    if res.status == FeasStatus::Feasible {
        let cert = MetricCertificate::new(w, rho, lambda, eps_pd, mode)?;
        // replay the sampled margins through the materialized certificate
        let checker = crate::certcheck::CertChecker::new(sys, &cert)?;
        let mut ok = true;
        for x in points {
            if checker.lmi_margin(x) > -margin * 0.5
                || checker.w_margin(x) > 0.0
                || checker.rho_value(x).is_some_and(|r| r < 0.0)
            {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(SynthOutcome::Success(Synthesized {
                cert,
                sampled_margin: res.achieved_margin,
                n_coeffs: nvars_total,
                iterations: res.iterations,
            }));
        }
    }

    let tag = tags
        .get(res.worst_lmi)
        .copied()
        .unwrap_or(LmiTag::Main(0));
    Ok(SynthOutcome::Failure(SynthFailure {
        status: res.status,
        best_margin: res.achieved_margin,
        blocking_sample: points[tag.sample().min(points.len() - 1)].clone(),
        blocking_kind: tag.kind(),
        iterations: res.iterations,
    }))
}

/// Scenario refinement policy: after a sampled solve, dense verification
/// failures are appended to the constraint set and the solve repeats.
#[derive(Debug, Clone)]
pub struct RefineSettings {
    pub max_rounds: usize,
    /// Most-violating grid points appended per round.
    pub per_round: usize,
    pub grid: GridSpec,
    pub verify: VerifySettings,
}

impl RefineSettings {
    pub fn new(grid: GridSpec) -> Self {
        RefineSettings {
            max_rounds: 12,
            per_round: 256,
            grid,
            verify: VerifySettings::default(),
        }
    }
}

/// Sampled synthesis with scenario exchange: solve on the samples, verify
/// on the dense grid, append the worst violating grid points, and repeat
/// until the grid is clean or the rounds run out. The returned report is
/// the final dense verification of the returned certificate.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_with_refinement(
    sys: &DynSystem,
    ansatz: &MetricAnsatz,
    samples: &SampleSet,
    lambda: f64,
    eps_pd: f64,
    mode: CertMode,
    opts: &SynthOptions,
    refine: &RefineSettings,
) -> Result<(SynthOutcome, Option<VerifyReport>)> {
    validate_params(sys, ansatz)?;
    if !sys.is_bound() {
        return Err(Error::UnboundParameters(
            "plain synthesis requires a fully bound system".into(),
        ));
    }
    let grid = crate::certcheck::grid_points(&sys.region, &refine.grid)?;
    let mut points = samples.points.clone();
    let mut last_outcome = None;
    let trace = std::env::var("ORBITCERT_TRACE").is_ok();
    for _round in 0..refine.max_rounds.max(1) {
        let t0 = std::time::Instant::now();
        let outcome =
            synthesize_on_points(sys, ansatz, &points, &[], lambda, eps_pd, mode, opts)?;
        if trace {
            eprintln!("refine round {_round}: solve on {} points took {:.1?}", points.len(), t0.elapsed());
        }
        match outcome {
            SynthOutcome::Success(s) => {
                let violations = crate::certcheck::worst_violations(
                    sys,
                    &s.cert,
                    &grid,
                    &refine.verify,
                    refine.per_round,
                )?;
                if trace {
                    eprintln!("  sampled margin {:.4e}, {} grid violations", s.sampled_margin, violations.len());
                }
                if violations.is_empty() {
                    let report = crate::certcheck::verify_on_points(
                        sys,
                        &s.cert,
                        &grid,
                        &refine.verify,
                    )?;
                    return Ok((SynthOutcome::Success(s), Some(report)));
                }
                points.extend(violations);
                last_outcome = Some(SynthOutcome::Success(s));
            }
            f @ SynthOutcome::Failure(_) => return Ok((f, None)),
        }
    }
    // rounds exhausted: report the last certificate with its failing grid
    match last_outcome {
        Some(SynthOutcome::Success(s)) => {
            let report =
                crate::certcheck::verify_on_points(sys, &s.cert, &grid, &refine.verify)?;
            Ok((SynthOutcome::Success(s), Some(report)))
        }
        _ => unreachable!("loop returns early unless a success was recorded"),
    }
}

/// Joint-region verification for parameter-robust certificates: the grid
/// spans the region and the parameter box.
pub fn robust_verify(
    sys: &DynSystem,
    cert: &MetricCertificate,
    theta_box: &[(f64, f64)],
    per_axis: usize,
    settings: &VerifySettings,
) -> Result<VerifyReport> {
    let n = sys.dim();
    let nv = sys.nvars();
    if theta_box.len() != sys.params.len() {
        return Err(Error::Dimension {
            context: "parameter box",
            expected: sys.params.len(),
            got: theta_box.len(),
        });
    }
    let map: Vec<usize> = (0..n).collect();
    let mut constraints: Vec<Polynomial> = sys
        .region
        .constraints
        .iter()
        .map(|g| g.embed(nv, &map))
        .collect();
    if let Some(eps) = sys.region.fmin_eps {
        constraints.push(sys.f_norm2_poly().sub(&Polynomial::constant(nv, eps)));
    }
    let mut bbox = sys.region.bbox.clone();
    bbox.extend_from_slice(theta_box);
    let joint = Region {
        constraints,
        fmin_eps: None,
        bbox,
    };
    let points = crate::certcheck::grid_points(&joint, &GridSpec::PerAxis(per_axis))?;
    crate::certcheck::verify_on_points(sys, cert, &points, settings)
}

/// Replaces a system's region with a centered ball (optionally excluding
/// the slow set `|f|^2 < eps`); used by scans and the command-line tools.
pub fn with_ball_region(sys: &DynSystem, radius: f64, fmin_eps: Option<f64>) -> DynSystem {
    let n = sys.dim();
    let mut g = Polynomial::constant(n, radius * radius);
    for i in 0..n {
        let xi = Polynomial::var(n, i);
        g = g.sub(&xi.mul(&xi));
    }
    let mut out = sys.clone();
    out.region = Region {
        constraints: vec![g],
        fmin_eps,
        bbox: vec![(-radius, radius); n],
    };
    // re-materialize the exclusion if the system is already bound
    if out.is_bound() {
        if let Some(eps) = out.region.fmin_eps.take() {
            let g = out.f_norm2_poly().sub(&Polynomial::constant(n, eps));
            out.region.constraints.push(g);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Classification {
    Contracting,
    TransverseOscillating,
    Undetermined,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Classification::Contracting => write!(f, "contracting"),
            Classification::TransverseOscillating => write!(f, "transverse_oscillating"),
            Classification::Undetermined => write!(f, "undetermined"),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ScanRow {
    pub value: f64,
    pub classification: Classification,
    pub best_margin_strong: f64,
    pub best_margin_transverse: f64,
    pub sim_class: String,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ScanResult {
    pub param: String,
    pub rows: Vec<ScanRow>,
    /// Interval between the last certified-oscillating and the first
    /// certified-contracting cell, after refinement.
    pub bracket: Option<(f64, f64)>,
    pub refined_rows: Vec<ScanRow>,
}

impl ScanResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "delta,classification,best_margin_strong,best_margin_transverse,sim_class\n",
        );
        for row in self.rows.iter().chain(&self.refined_rows) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.value,
                row.classification,
                row.best_margin_strong,
                row.best_margin_transverse,
                row.sim_class
            ));
        }
        out
    }
}

/// Per-cell effort knobs for the parameter scan.
#[derive(Debug, Clone)]
pub struct ScanBudget {
    pub degree_w: u32,
    pub degree_rho: u32,
    pub lambda_ladder: Vec<f64>,
    pub samples_strong: usize,
    pub samples_transverse: usize,
    pub strong_ball: f64,
    pub transverse_ball: f64,
    pub fmin_eps: f64,
    pub eps_pd: f64,
    pub verify_per_axis: usize,
    pub margin_req: f64,
    pub sim_x0: Vec<f64>,
    pub sim_transient: f64,
    pub seed: u64,
    /// Refinement stops once the bracket is at most this wide.
    pub target_bracket_width: f64,
}

impl Default for ScanBudget {
    fn default() -> Self {
        ScanBudget {
            degree_w: 4,
            degree_rho: 2,
            lambda_ladder: vec![0.05, 0.01],
            samples_strong: 400,
            samples_transverse: 700,
            strong_ball: 3.0,
            transverse_ball: 4.0,
            fmin_eps: 0.05,
            eps_pd: 1e-3,
            verify_per_axis: 60,
            margin_req: 1e-6,
            sim_x0: vec![1.0, 1.0],
            sim_transient: 200.0,
            seed: 0,
            target_bracket_width: 0.05,
        }
    }
}

/// Classifies one bound system by certificates (strong first, then
/// transverse) with the simulated outcome recorded alongside.
pub fn classify_cell(sys: &DynSystem, budget: &ScanBudget) -> Result<ScanRow> {
    let sim = {
        let mut settings = DetectSettings {
            transient: budget.sim_transient,
            ..DetectSettings::default()
        };
        settings.equilibrium_tol = 1e-5;
        let x0: Vec<f64> = budget.sim_x0.iter().take(sys.dim()).cloned().collect();
        match detect_limit_cycle(sys, &x0, &settings) {
            Ok(outcome) => outcome,
            Err(_) => CycleOutcome::Undetermined,
        }
    };
    let sim_class = sim.label().to_string();

    let mut best_strong = f64::NEG_INFINITY;
    let mut best_transverse = f64::NEG_INFINITY;
    let verify = VerifySettings {
        margin_req: budget.margin_req,
        rho_tol: 1e-9,
    };

    // strong attempts
    let strong_sys = with_ball_region(sys, budget.strong_ball, None);
    let ansatz = MetricAnsatz::new(budget.degree_w, 0);
    for (li, &lambda) in budget.lambda_ladder.iter().enumerate() {
        let samples = sample_region(
            &strong_sys.region,
            budget.samples_strong,
            budget.seed.wrapping_add(li as u64),
            SampleStrategy::UniformRejection,
        )?;
        let opts = SynthOptions {
            seed: budget.seed.wrapping_add(100 + li as u64),
            ..SynthOptions::default()
        };
        match synthesize_certificate(
            &strong_sys,
            &ansatz,
            &samples,
            lambda,
            budget.eps_pd,
            CertMode::Strong,
            &opts,
        )? {
            SynthOutcome::Success(s) => {
                best_strong = best_strong.max(s.sampled_margin);
                let rep = grid_verify(
                    &strong_sys,
                    &s.cert,
                    &GridSpec::PerAxis(budget.verify_per_axis),
                    &verify,
                )?;
                if rep.pass {
                    return Ok(ScanRow {
                        value: f64::NAN, // caller fills the parameter value
                        classification: Classification::Contracting,
                        best_margin_strong: best_strong,
                        best_margin_transverse: best_transverse,
                        sim_class,
                    });
                }
            }
            SynthOutcome::Failure(f) => {
                best_strong = best_strong.max(f.best_margin);
            }
        }
    }

    // transverse attempts
    let trans_sys = with_ball_region(sys, budget.transverse_ball, Some(budget.fmin_eps));
    let ansatz = MetricAnsatz::new(budget.degree_w, budget.degree_rho);
    for (li, &lambda) in budget.lambda_ladder.iter().enumerate() {
        let samples = sample_region(
            &trans_sys.region,
            budget.samples_transverse,
            budget.seed.wrapping_add(200 + li as u64),
            SampleStrategy::UniformRejection,
        )?;
        let opts = SynthOptions {
            seed: budget.seed.wrapping_add(300 + li as u64),
            ..SynthOptions::default()
        };
        match synthesize_certificate(
            &trans_sys,
            &ansatz,
            &samples,
            lambda,
            budget.eps_pd,
            CertMode::Transverse,
            &opts,
        )? {
            SynthOutcome::Success(s) => {
                best_transverse = best_transverse.max(s.sampled_margin);
                let rep = grid_verify(
                    &trans_sys,
                    &s.cert,
                    &GridSpec::PerAxis(budget.verify_per_axis),
                    &verify,
                )?;
                if rep.pass {
                    return Ok(ScanRow {
                        value: f64::NAN,
                        classification: Classification::TransverseOscillating,
                        best_margin_strong: best_strong,
                        best_margin_transverse: best_transverse,
                        sim_class,
                    });
                }
            }
            SynthOutcome::Failure(f) => {
                best_transverse = best_transverse.max(f.best_margin);
            }
        }
    }

    Ok(ScanRow {
        value: f64::NAN,
        classification: Classification::Undetermined,
        best_margin_strong: best_strong,
        best_margin_transverse: best_transverse,
        sim_class,
    })
}

/// Sweeps a declared parameter over `[from, to]` in `steps` cells,
/// classifying each (certificates first, simulation recorded alongside),
/// then bisects the interval where the classification flips until it is
/// at most `target_bracket_width` wide.
pub fn bifurcation_scan(
    sys: &DynSystem,
    param: &str,
    range: (f64, f64),
    steps: usize,
    budget: &ScanBudget,
) -> Result<ScanResult> {
    let spec = sys
        .params
        .iter()
        .find(|p| p.name == param)
        .ok_or_else(|| Error::UnknownName(param.to_string()))?;
    if let Some((lo, hi)) = spec.range {
        if range.0 < lo || range.1 > hi {
            return Err(Error::OutOfRange {
                name: param.to_string(),
                value: if range.0 < lo { range.0 } else { range.1 },
                lo,
                hi,
            });
        }
    }
    if steps < 2 {
        return Err(Error::Invalid("scan needs at least 2 steps".into()));
    }

    let classify_at = |value: f64| -> Result<ScanRow> {
        let mut vals = BTreeMap::new();
        vals.insert(param.to_string(), value);
        let bound = sys.bind_parameters(&vals)?;
        let mut row = classify_cell(&bound, budget)?;
        row.value = value;
        Ok(row)
    };

    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let value = range.0 + (range.1 - range.0) * k as f64 / (steps - 1) as f64;
        rows.push(classify_at(value)?);
    }

    // bracket: last oscillating cell before the first contracting cell
    let mut bracket: Option<(f64, f64)> = None;
    let last_osc = rows
        .iter()
        .rev()
        .find(|r| r.classification == Classification::TransverseOscillating)
        .map(|r| r.value);
    if let Some(a) = last_osc {
        let first_con = rows
            .iter()
            .find(|r| r.classification == Classification::Contracting && r.value > a)
            .map(|r| r.value);
        if let Some(b) = first_con {
            bracket = Some((a, b));
        }
    }

    let mut refined_rows = Vec::new();
    if let Some((mut a, mut b)) = bracket {
        while b - a > budget.target_bracket_width {
            let mid = 0.5 * (a + b);
            let row = classify_at(mid)?;
            let class = row.classification;
            refined_rows.push(row);
            match class {
                Classification::Contracting => b = mid,
                Classification::TransverseOscillating => a = mid,
                Classification::Undetermined => break,
            }
        }
        bracket = Some((a, b));
    }

    Ok(ScanResult {
        param: param.to_string(),
        rows,
        bracket,
        refined_rows,
    })
}
