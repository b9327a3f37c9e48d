//! Trajectory integration and empirical orbital analysis: equilibria,
//! Poincare return maps, limit-cycle detection, contraction of the return
//! map in a certified metric, and disturbance tubes.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::certcheck::{metric_distance_segment, MetricCertificate};
use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, sym_eig_max, sym_sqrt};
use crate::sysmodel::{DynSystem, Region};

const BLOWUP: f64 = 1e8;

/// A computed solution with the integrator's bookkeeping.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Derivatives at the stored times, for dense interpolation.
    pub derivs: Vec<Vec<f64>>,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub max_error_estimate: f64,
    pub divergent: bool,
}

impl Trajectory {
    pub fn end_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least the initial state")
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Cubic Hermite interpolation between stored steps.
    pub fn sample(&self, t: f64) -> Vec<f64> {
        let times = &self.times;
        if t <= times[0] {
            return self.states[0].clone();
        }
        if t >= *times.last().unwrap() {
            return self.states.last().unwrap().clone();
        }
        let mut hi = times.partition_point(|&v| v <= t);
        if hi >= times.len() {
            hi = times.len() - 1;
        }
        let lo = hi - 1;
        hermite(
            times[lo],
            &self.states[lo],
            &self.derivs[lo],
            times[hi],
            &self.states[hi],
            &self.derivs[hi],
            t,
        )
    }

    /// CSV export with a `t,<state names>` header.
    pub fn to_csv(&self, state_names: &[String]) -> String {
        let mut out = String::new();
        out.push_str("t,");
        out.push_str(&state_names.join(","));
        out.push('\n');
        for (t, x) in self.times.iter().zip(&self.states) {
            out.push_str(&format!("{}", t));
            for v in x {
                out.push_str(&format!(",{}", v));
            }
            out.push('\n');
        }
        out
    }
}

fn hermite(
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    t1: f64,
    y1: &[f64],
    f1: &[f64],
    t: f64,
) -> Vec<f64> {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
    let h10 = s * (1.0 - s) * (1.0 - s);
    let h01 = s * s * (3.0 - 2.0 * s);
    let h11 = s * s * (s - 1.0);
    (0..y0.len())
        .map(|i| h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i])
        .collect()
}

// Dormand-Prince 5(4) tableau.
#[allow(dead_code)] // stage abscissae, kept with the tableau for reference
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand-Prince 5(4) step from `(t, y)` with step `h`, given
/// `k1 = f(t, y)`. Returns the 5th-order state, the error estimate, and
/// the derivative at the new state (FSAL).
fn dp_step<F: Fn(&[f64], &mut [f64])>(
    field: &F,
    y: &[f64],
    k1: &[f64],
    h: f64,
) -> (Vec<f64>, f64, Vec<f64>) {
    let n = y.len();
    let mut k = vec![vec![0.0; n]; 7];
    k[0].copy_from_slice(k1);
    let mut ytmp = vec![0.0; n];
    for s in 1..7 {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = DP_A[s][j];
                if a != 0.0 {
                    acc += a * kj[i];
                }
            }
            ytmp[i] = y[i] + h * acc;
        }
        let (head, tail) = k.split_at_mut(s);
        let _ = head;
        field(&ytmp, &mut tail[0]);
    }
    let mut y5 = vec![0.0; n];
    let mut err = 0.0f64;
    for i in 0..n {
        let mut acc5 = 0.0;
        let mut acc4 = 0.0;
        for s in 0..7 {
            acc5 += DP_B5[s] * k[s][i];
            acc4 += DP_B4[s] * k[s][i];
        }
        y5[i] = y[i] + h * acc5;
        err += (h * (acc5 - acc4)).powi(2);
    }
    let f_end = k[6].clone(); // stage 7 is evaluated at (t + h, y5)
    (y5, err.sqrt(), f_end)
}

/// Adaptive integration of `x' = f(x)` with per-step local error at most
/// `tol`. Dense output comes from cubic interpolation between accepted
/// steps. Blow-up (`|x| > 1e8`) truncates the trajectory and flags it.
pub fn integrate(sys: &DynSystem, x0: &[f64], t_max: f64, tol: f64) -> Result<Trajectory> {
    let f = field_of(sys)?;
    integrate_field(&f, sys.dim(), x0, t_max, tol)
}

pub(crate) fn field_of(sys: &DynSystem) -> Result<impl Fn(&[f64], &mut [f64]) + '_> {
    if !sys.is_bound() {
        return Err(Error::UnboundParameters(
            sys.params
                .iter()
                .map(|p| p.name.clone())
                .collect::<Vec<_>>()
                .join(", "),
        ));
    }
    Ok(move |x: &[f64], out: &mut [f64]| {
        for (o, p) in out.iter_mut().zip(&sys.f) {
            *o = p.eval_unchecked(x);
        }
    })
}

pub(crate) fn integrate_field<F: Fn(&[f64], &mut [f64])>(
    f: &F,
    dim: usize,
    x0: &[f64],
    t_max: f64,
    tol: f64,
) -> Result<Trajectory> {
    if !(tol > 0.0) {
        return Err(Error::Invalid("integration tolerance must be positive".into()));
    }
    if x0.len() != dim {
        return Err(Error::Dimension {
            context: "initial state",
            expected: dim,
            got: x0.len(),
        });
    }
    let mut t = 0.0;
    let mut y = x0.to_vec();
    let mut k1 = vec![0.0; dim];
    f(&y, &mut k1);

    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![y.clone()],
        derivs: vec![k1.clone()],
        steps_accepted: 0,
        steps_rejected: 0,
        max_error_estimate: 0.0,
        divergent: false,
    };

    let mut h = (t_max / 100.0).min(0.1).max(1e-6);
    let h_min = t_max * 1e-14;
    while t < t_max {
        h = h.min(t_max - t);
        let (y5, err, f_end) = dp_step(f, &y, &k1, h);
        let accept = err <= tol || h <= h_min * 2.0;
        if accept {
            t += h;
            y = y5;
            k1 = f_end;
            traj.times.push(t);
            traj.states.push(y.clone());
            traj.derivs.push(k1.clone());
            traj.steps_accepted += 1;
            traj.max_error_estimate = traj.max_error_estimate.max(err);
            let norm2: f64 = y.iter().map(|v| v * v).sum();
            if !norm2.is_finite() || norm2 > BLOWUP * BLOWUP {
                traj.divergent = true;
                return Ok(traj);
            }
        } else {
            traj.steps_rejected += 1;
        }
        let scale = if err > 0.0 {
            0.9 * (tol / err).powf(0.2)
        } else {
            5.0
        };
        h *= scale.clamp(0.2, 5.0);
        if h < h_min {
            return Err(Error::StepUnderflow);
        }
    }
    Ok(traj)
}

/// Fixed-step fifth-order integration, used by order-verification tests.
pub fn integrate_fixed_step(sys: &DynSystem, x0: &[f64], t_max: f64, h: f64) -> Result<Vec<f64>> {
    let f = field_of(sys)?;
    let n = sys.dim();
    let mut y = x0.to_vec();
    let mut k1 = vec![0.0; n];
    f(&y, &mut k1);
    let steps = (t_max / h).round() as usize;
    for _ in 0..steps {
        let (y5, _, f_end) = dp_step(&f, &y, &k1, h);
        y = y5;
        k1 = f_end;
    }
    Ok(y)
}

/// A Poincare section through `anchor` with unit `normal`.
#[derive(Debug, Clone)]
pub struct Section {
    pub anchor: Vec<f64>,
    pub normal: Vec<f64>,
}

impl Section {
    pub fn offset(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.anchor)
            .zip(&self.normal)
            .map(|((xi, ai), ni)| (xi - ai) * ni)
            .sum()
    }
}

/// Integrates from `x0` on the section until the next same-direction
/// crossing; the crossing is located by bisection on the dense
/// interpolant to `|offset| < 1e-10`.
pub fn poincare_map(
    sys: &DynSystem,
    section: &Section,
    x0: &[f64],
    tol: f64,
    t_limit: f64,
) -> Result<(Vec<f64>, f64)> {
    let f = field_of(sys)?;
    let fdot = |x: &[f64]| -> f64 {
        let mut out = vec![0.0; x.len()];
        f(x, &mut out);
        out.iter().zip(&section.normal).map(|(a, b)| a * b).sum()
    };
    if fdot(x0) <= 0.0 {
        return Err(Error::Invalid(
            "starting state does not cross the section in the positive direction".into(),
        ));
    }
    if section.offset(x0).abs() > 1e-6 {
        return Err(Error::Invalid("starting state is not on the section".into()));
    }

    // step away from the section first so the initial crossing is not
    // re-detected
    let traj = integrate(sys, x0, t_limit, tol)?;
    if traj.divergent {
        return Err(Error::Divergent);
    }
    let mut prev_off = section.offset(&traj.states[0]);
    let mut t_departed = 0.0;
    let mut departed = false;
    for i in 1..traj.times.len() {
        let off = section.offset(&traj.states[i]);
        if !departed {
            if off < -1e-9 {
                departed = true;
                t_departed = traj.times[i];
            }
            prev_off = off;
            continue;
        }
        if prev_off < 0.0 && off >= 0.0 && traj.times[i] > t_departed {
            // bracketed a negative-to-positive crossing
            let (mut ta, mut tb) = (traj.times[i - 1], traj.times[i]);
            for _ in 0..200 {
                let tm = 0.5 * (ta + tb);
                let xm = traj.sample(tm);
                let om = section.offset(&xm);
                if om.abs() < 1e-10 {
                    ta = tm;
                    tb = tm;
                    break;
                }
                if om < 0.0 {
                    ta = tm;
                } else {
                    tb = tm;
                }
            }
            let t_cross = 0.5 * (ta + tb);
            let x_cross = traj.sample(t_cross);
            if fdot(&x_cross) > 0.0 {
                return Ok((x_cross, t_cross));
            }
        }
        prev_off = off;
    }
    Err(Error::NoReturn)
}

/// Estimated closed orbit: anchor on the section, period, one period of
/// samples, and the residual of the final return.
#[derive(Debug, Clone)]
pub struct OrbitEstimate {
    pub anchor: Vec<f64>,
    pub period: f64,
    pub samples: Vec<Vec<f64>>,
    pub sample_times: Vec<f64>,
    pub section_normal: Vec<f64>,
    pub residual: f64,
    pub return_times: Vec<f64>,
}

impl OrbitEstimate {
    pub fn to_csv(&self, state_names: &[String]) -> String {
        let anchor: Vec<String> = self.anchor.iter().map(|v| format!("{}", v)).collect();
        let mut out = format!("# period={} anchor={}\n", self.period, anchor.join(","));
        out.push_str("t,");
        out.push_str(&state_names.join(","));
        out.push('\n');
        for (t, x) in self.sample_times.iter().zip(&self.samples) {
            out.push_str(&format!("{}", t));
            for v in x {
                out.push_str(&format!(",{}", v));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum CycleOutcome {
    Cycle(OrbitEstimate),
    Equilibrium(Vec<f64>),
    Divergent,
    Undetermined,
}

impl CycleOutcome {
    pub fn label(&self) -> &'static str {
        match self {
            CycleOutcome::Cycle(_) => "cycle",
            CycleOutcome::Equilibrium(_) => "equilibrium",
            CycleOutcome::Divergent => "divergent",
            CycleOutcome::Undetermined => "undetermined",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectSettings {
    pub transient: f64,
    pub tol: f64,
    /// Convergence threshold on successive returns.
    pub return_tol: f64,
    /// Relative agreement required between successive periods.
    pub period_rel_tol: f64,
    pub max_returns: usize,
    pub t_limit_per_return: f64,
    /// |f| below this declares an equilibrium.
    pub equilibrium_tol: f64,
    pub orbit_samples: usize,
}

impl Default for DetectSettings {
    fn default() -> Self {
        DetectSettings {
            transient: 40.0,
            tol: 1e-8,
            return_tol: 1e-7,
            period_rel_tol: 1e-3,
            max_returns: 80,
            t_limit_per_return: 60.0,
            equilibrium_tol: 1e-6,
            orbit_samples: 2000,
        }
    }
}

/// Integrates past a transient, then classifies the long-run behavior:
/// an equilibrium (|f| -> 0), a limit cycle (Poincare returns converge,
/// successive periods agreeing within the relative tolerance), divergence,
/// or undetermined within the budget.
pub fn detect_limit_cycle(
    sys: &DynSystem,
    x0: &[f64],
    settings: &DetectSettings,
) -> Result<CycleOutcome> {
    let mut x = x0.to_vec();
    // transient, in chunks, watching for an equilibrium or blow-up
    let chunks = 4;
    for _ in 0..chunks {
        let traj = integrate(sys, &x, settings.transient / chunks as f64, settings.tol)?;
        if traj.divergent {
            return Ok(CycleOutcome::Divergent);
        }
        x = traj.end_state().to_vec();
        let fx = sys.eval_f(&x)?;
        if norm(&fx) < settings.equilibrium_tol {
            return Ok(CycleOutcome::Equilibrium(x));
        }
    }

    let fx = sys.eval_f(&x)?;
    let fnorm = norm(&fx);
    if fnorm < settings.equilibrium_tol {
        return Ok(CycleOutcome::Equilibrium(x));
    }
    let section = Section {
        anchor: x.clone(),
        normal: fx.iter().map(|v| v / fnorm).collect(),
    };

    let mut anchor = x.clone();
    let mut returns: Vec<(Vec<f64>, f64)> = Vec::new();
    for _ in 0..settings.max_returns {
        match poincare_map(sys, &section, &anchor, settings.tol, settings.t_limit_per_return) {
            Ok((xr, tr)) => {
                let dist = dist2(&xr, &anchor).sqrt();
                returns.push((xr.clone(), tr));
                if dist < settings.return_tol && returns.len() >= 3 {
                    // require consistent periods over the last returns
                    let periods: Vec<f64> =
                        returns.iter().rev().take(3).map(|(_, t)| *t).collect();
                    let pmax = periods.iter().cloned().fold(f64::MIN, f64::max);
                    let pmin = periods.iter().cloned().fold(f64::MAX, f64::min);
                    if (pmax - pmin) / pmax < settings.period_rel_tol {
                        let period = returns.last().unwrap().1;
                        return build_orbit(sys, &anchor, period, &section, settings, &returns);
                    }
                }
                anchor = xr;
            }
            Err(Error::NoReturn) => {
                // maybe a slow spiral into an equilibrium
                let traj = integrate(sys, &anchor, settings.t_limit_per_return, settings.tol)?;
                if traj.divergent {
                    return Ok(CycleOutcome::Divergent);
                }
                let xe = traj.end_state();
                let fe = sys.eval_f(xe)?;
                if norm(&fe) < settings.equilibrium_tol * 100.0 {
                    return Ok(CycleOutcome::Equilibrium(xe.to_vec()));
                }
                return Ok(CycleOutcome::Undetermined);
            }
            Err(Error::Divergent) => return Ok(CycleOutcome::Divergent),
            Err(e) => return Err(e),
        }
    }
    Ok(CycleOutcome::Undetermined)
}

fn build_orbit(
    sys: &DynSystem,
    anchor: &[f64],
    period: f64,
    section: &Section,
    settings: &DetectSettings,
    returns: &[(Vec<f64>, f64)],
) -> Result<CycleOutcome> {
    let traj = integrate(sys, anchor, period, settings.tol / 10.0)?;
    if traj.divergent {
        return Ok(CycleOutcome::Divergent);
    }
    let m = settings.orbit_samples;
    let mut samples = Vec::with_capacity(m);
    let mut sample_times = Vec::with_capacity(m);
    for k in 0..m {
        let t = period * k as f64 / m as f64;
        samples.push(traj.sample(t));
        sample_times.push(t);
    }
    let residual = dist2(traj.end_state(), anchor).sqrt();
    Ok(CycleOutcome::Cycle(OrbitEstimate {
        anchor: anchor.to_vec(),
        period,
        samples,
        sample_times,
        section_normal: section.normal.clone(),
        residual,
        return_times: returns.iter().map(|(_, t)| *t).collect(),
    }))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of the return-map contraction test.
#[derive(Debug, Clone)]
pub struct PoincareContraction {
    pub ratios: Vec<f64>,
    pub pairs_evaluated: usize,
    pub pairs_skipped: usize,
    pub pass: bool,
}

/// Checks that the Poincare return map contracts the certified metric:
/// pairs of nearby section states are mapped through one return and their
/// metric distance must shrink. Pairs at distance zero are skipped.
pub fn poincare_contraction_test(
    sys: &DynSystem,
    cert: &MetricCertificate,
    orbit: &OrbitEstimate,
    n_pairs: usize,
    seed: u64,
    tol: f64,
) -> Result<PoincareContraction> {
    let section = Section {
        anchor: orbit.anchor.clone(),
        normal: orbit.section_normal.clone(),
    };
    let t_limit = orbit.period * 3.0;
    let map = |x: &[f64]| poincare_map(sys, &section, x, tol, t_limit).map(|(p, _)| p);
    poincare_contraction_test_with_map(&map, sys, cert, orbit, n_pairs, seed)
}

/// Same test with an injectable return map (used to exercise boundary
/// behavior with synthetic maps).
pub fn poincare_contraction_test_with_map<M>(
    map: &M,
    sys: &DynSystem,
    cert: &MetricCertificate,
    orbit: &OrbitEstimate,
    n_pairs: usize,
    seed: u64,
) -> Result<PoincareContraction>
where
    M: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = sys.dim();
    let normal = DVector::from_vec(orbit.section_normal.clone());
    let basis = crate::linalg::orth_complement(&normal)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.02 * (1.0 + norm(&orbit.anchor));

    let mut ratios = Vec::new();
    let mut skipped = 0usize;
    for _ in 0..n_pairs {
        let mut pick = || -> Vec<f64> {
            let coeffs = DVector::from_fn(n - 1, |_, _| rng.random_range(-1.0..1.0));
            let dx = &basis * coeffs * scale;
            orbit
                .anchor
                .iter()
                .zip(dx.iter())
                .map(|(a, d)| a + d)
                .collect()
        };
        let x1 = pick();
        let x2 = pick();
        if !sys.region.contains(&x1) || !sys.region.contains(&x2) {
            return Err(Error::Invalid(
                "sampled pair leaves the region of interest".into(),
            ));
        }
        let d_before = metric_distance_segment(cert, &x1, &x2, 16)?;
        if d_before == 0.0 {
            skipped += 1;
            continue;
        }
        let y1 = map(&x1)?;
        let y2 = map(&x2)?;
        if !sys.region.contains(&y1) || !sys.region.contains(&y2) {
            return Err(Error::Invalid("mapped pair leaves the region of interest".into()));
        }
        let d_after = metric_distance_segment(cert, &y1, &y2, 16)?;
        ratios.push(d_after / d_before);
    }
    let pass = !ratios.is_empty() && ratios.iter().all(|&r| r < 1.0);
    Ok(PoincareContraction {
        pairs_evaluated: ratios.len(),
        ratios,
        pairs_skipped: skipped,
        pass,
    })
}

#[derive(Debug, Clone)]
pub struct TubeSettings {
    pub d_max: f64,
    pub n_runs: usize,
    pub horizon: f64,
    /// Disturbance responses before this time are treated as transient.
    pub transient: f64,
    pub seed: u64,
    pub tol: f64,
    /// Verification-grid resolution for the gain estimate.
    pub grid_per_axis: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TubeReport {
    /// `d_max * sup_grid sigma_max(sqrt(M)) / lambda`, a grid estimate.
    pub theoretical_bound: f64,
    pub empirical_max_post: f64,
    pub empirical_max_pre: f64,
    pub per_run_max: Vec<f64>,
    pub pass: bool,
}

/// Disturbance-tube check: simulate `x' = f(x) + d(t)` with
/// piecewise-constant random disturbances (`|d| = d_max`, direction
/// uniform, 0.1-time-unit intervals) and compare the post-transient
/// metric distance to the nominal orbit against the steady-state bound
/// `sup |Theta d| / lambda` estimated on the verification grid.
pub fn disturbance_tube_check(
    sys: &DynSystem,
    cert: &MetricCertificate,
    orbit: &OrbitEstimate,
    settings: &TubeSettings,
) -> Result<TubeReport> {
    let n = sys.dim();
    // gain estimate: sup over grid of sigma_max(Theta) with Theta'Theta = M
    let grid = crate::certcheck::grid_points(
        &sys.region,
        &crate::certcheck::GridSpec::PerAxis(settings.grid_per_axis),
    )?;
    let mut sup_theta = 0.0f64;
    for x in &grid {
        let w = cert.w.eval_unchecked(x);
        let m = spd_inverse(&w)?;
        sup_theta = sup_theta.max(sym_eig_max(&m).max(0.0).sqrt());
    }
    let theoretical = if settings.d_max == 0.0 {
        0.0
    } else {
        settings.d_max * sup_theta / cert.lambda
    };

    let run_one = |run: usize| -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(run as u64 + 1);
        let mut t = 0.0;
        let mut x = orbit.anchor.clone();
        let mut max_pre = 0.0f64;
        let mut max_post = 0.0f64;
        let dt = 0.1;
        while t < settings.horizon {
            // piecewise-constant disturbance on [t, t + dt)
            let d = random_direction(&mut rng, n, settings.d_max);
            let field = |y: &[f64], out: &mut [f64]| {
                for (i, p) in sys.f.iter().enumerate() {
                    out[i] = p.eval_unchecked(y) + d[i];
                }
            };
            let traj = integrate_field(&field, n, &x, dt, settings.tol)?;
            if traj.divergent {
                return Err(Error::Divergent);
            }
            x = traj.end_state().to_vec();
            t += dt;
            let dev = orbit_metric_distance(cert, orbit, &x)?;
            if t <= settings.transient {
                max_pre = max_pre.max(dev);
            } else {
                max_post = max_post.max(dev);
            }
        }
        Ok((max_pre, max_post))
    };

    let results: Vec<Result<(f64, f64)>> =
        (0..settings.n_runs).into_par_iter().map(run_one).collect();
    let mut per_run = Vec::with_capacity(settings.n_runs);
    let mut max_pre = 0.0f64;
    let mut max_post = 0.0f64;
    for r in results {
        let (pre, post) = r?;
        max_pre = max_pre.max(pre);
        max_post = max_post.max(post);
        per_run.push(post);
    }
    let pass = if settings.d_max == 0.0 {
        true
    } else {
        max_post <= theoretical
    };
    Ok(TubeReport {
        theoretical_bound: theoretical,
        empirical_max_post: max_post,
        empirical_max_pre: max_pre,
        per_run_max: per_run,
        pass,
    })
}

fn random_direction(rng: &mut ChaCha8Rng, n: usize, magnitude: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand::distr::StandardUniform) * 2.0 - 1.0).collect();
        let nv = norm(&v);
        if nv > 1e-3 && nv <= 1.0 {
            return v.iter().map(|x| x * magnitude / nv).collect();
        }
    }
}

/// Metric distance from `x` to the sampled orbit: minimum over samples of
/// the segment distance, sharpened by parabolic refinement over the
/// arc-length neighbors of the best sample.
pub fn orbit_metric_distance(
    cert: &MetricCertificate,
    orbit: &OrbitEstimate,
    x: &[f64],
) -> Result<f64> {
    let m = orbit.samples.len();
    // coarse pass on euclidean distance to shortlist candidates
    let mut best_i = 0;
    let mut best_d = f64::INFINITY;
    for (i, s) in orbit.samples.iter().enumerate() {
        let d = dist2(s, x);
        if d < best_d {
            best_d = d;
            best_i = i;
        }
    }
    let idx = [
        (best_i + m - 1) % m,
        best_i,
        (best_i + 1) % m,
    ];
    let mut vals = [0.0f64; 3];
    for (k, &i) in idx.iter().enumerate() {
        vals[k] = metric_distance_segment(cert, x, &orbit.samples[i], 8)?;
    }
    // parabolic minimum through the three metric distances
    let (d0, d1, d2) = (vals[0], vals[1], vals[2]);
    let denom = d0 - 2.0 * d1 + d2;
    let refined = if denom.abs() > 1e-14 {
        let s = 0.5 * (d0 - d2) / denom; // offset of the vertex in [-1, 1]
        if s.abs() <= 1.0 {
            d1 - 0.25 * (d0 - d2) * s
        } else {
            d1.min(d0).min(d2)
        }
    } else {
        d1.min(d0).min(d2)
    };
    Ok(refined.max(0.0).min(d1))
}

/// Empirical forward-invariance support: at sampled boundary states of
/// each region constraint (that constraint near zero, the others clearly
/// positive), the flow must point inward: `grad(g)' f > 0`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BoundaryFlowReport {
    pub checked: usize,
    pub violations: usize,
    pub worst_inner_product: f64,
    pub worst_point: Option<Vec<f64>>,
    pub pass: bool,
}

pub fn boundary_flow_check(
    sys: &DynSystem,
    region: &Region,
    n_samples: usize,
    seed: u64,
) -> Result<BoundaryFlowReport> {
    let n = sys.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grads: Vec<Vec<crate::poly::Polynomial>> = region
        .constraints
        .iter()
        .map(|g| (0..n).map(|i| g.diff(i)).collect())
        .collect();

    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut worst = f64::INFINITY;
    let mut worst_point = None;
    let mut attempts = 0usize;
    let max_attempts = n_samples * 2000;

    while checked < n_samples && attempts < max_attempts {
        attempts += 1;
        let mut x: Vec<f64> = region
            .bbox
            .iter()
            .map(|&(lo, hi)| rng.random_range(lo..hi))
            .collect();
        // pick a constraint and project x onto its zero set by a few
        // Newton steps along the gradient
        let ci = rng.random_range(0..region.constraints.len());
        let g = &region.constraints[ci];
        let mut ok = false;
        for _ in 0..40 {
            let gv = g.eval_unchecked(&x);
            if gv.abs() < 1e-9 {
                ok = true;
                break;
            }
            let grad: Vec<f64> = grads[ci].iter().map(|d| d.eval_unchecked(&x)).collect();
            let gn2: f64 = grad.iter().map(|v| v * v).sum();
            if gn2 < 1e-18 {
                break;
            }
            for i in 0..n {
                x[i] -= gv * grad[i] / gn2;
            }
        }
        if !ok || !region.in_box(&x) {
            continue;
        }
        // all other constraints must be satisfied with clearance
        let others_ok = region
            .constraints
            .iter()
            .enumerate()
            .all(|(j, gj)| j == ci || gj.eval_unchecked(&x) > 1e-6);
        if !others_ok {
            continue;
        }
        let f = sys.eval_f(&x)?;
        let grad: Vec<f64> = grads[ci].iter().map(|d| d.eval_unchecked(&x)).collect();
        let ip: f64 = grad.iter().zip(&f).map(|(a, b)| a * b).sum();
        checked += 1;
        if ip <= 0.0 {
            violations += 1;
        }
        if ip < worst {
            worst = ip;
            worst_point = Some(x.clone());
        }
    }

    if checked == 0 {
        return Err(Error::RegionTooThin);
    }
    Ok(BoundaryFlowReport {
        checked,
        violations,
        worst_inner_product: worst,
        worst_point,
        pass: violations == 0,
    })
}

/// Damped-Newton equilibrium search from a given start.
pub fn find_equilibrium(sys: &DynSystem, start: &[f64], tol: f64) -> Result<Vec<f64>> {
    let a = sys.jacobian();
    let mut x = DVector::from_vec(start.to_vec());
    for _ in 0..500 {
        let fv = DVector::from_vec(sys.eval_f(x.as_slice())?);
        if fv.norm() < tol {
            return Ok(x.as_slice().to_vec());
        }
        let jm: DMatrix<f64> = a.eval(x.as_slice())?;
        let step = jm
            .lu()
            .solve(&fv)
            .ok_or(Error::Singular("Newton step in equilibrium search"))?;
        let mut t = 1.0;
        loop {
            let xn = &x - &step * t;
            let fn_ = DVector::from_vec(sys.eval_f(xn.as_slice())?);
            if fn_.norm() < fv.norm() || t < 1e-8 {
                x = xn;
                break;
            }
            t *= 0.5;
        }
    }
    let fv = DVector::from_vec(sys.eval_f(x.as_slice())?);
    if fv.norm() < tol {
        Ok(x.as_slice().to_vec())
    } else {
        Err(Error::Invalid("equilibrium search did not converge".into()))
    }
}

/// Square root frame of the metric at a point: `Theta' Theta = M = W^-1`.
pub fn metric_frame(cert: &MetricCertificate, x: &[f64]) -> Result<DMatrix<f64>> {
    let w = cert.w.eval_unchecked(x);
    let m = spd_inverse(&w)?;
    sym_sqrt(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certcheck::CertMode;
    use crate::polymat::PolyMatrix;
    use crate::sysmodel::{builtin, parse_system};
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn scalar_decay() -> DynSystem {
        parse_system("system s\nstate x\ndyn x' = -x\nbox -2 2\n").unwrap()
    }

    fn mg(delta: f64) -> DynSystem {
        let sys = builtin("moore_greitzer").unwrap();
        let mut vals = BTreeMap::new();
        vals.insert("delta".to_string(), delta);
        sys.bind_parameters(&vals).unwrap()
    }

    #[test]
    fn scalar_linear_endpoint() {
        let sys = scalar_decay();
        let traj = integrate(&sys, &[1.0], 1.0, 1e-8).unwrap();
        assert_relative_eq!(traj.end_state()[0], (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn circular_radius_converges() {
        let sys = builtin("circular").unwrap();
        let traj = integrate(&sys, &[2.0, 0.0], 20.0, 1e-8).unwrap();
        let end = traj.end_state();
        let r = (end[0] * end[0] + end[1] * end[1]).sqrt();
        assert!((r - 1.0).abs() < 1e-3, "radius {r}");
    }

    #[test]
    fn engine_model_contracting_regime_settles() {
        let sys = mg(-0.8);
        let traj = integrate(&sys, &[1.0, 1.0], 100.0, 1e-8).unwrap();
        let f = sys.eval_f(traj.end_state()).unwrap();
        assert!(norm(&f) < 1e-4, "|f| = {}", norm(&f));
    }

    #[test]
    fn blow_up_flagged_divergent() {
        let sys = parse_system("system e\nstate x\ndyn x' = x^2\nbox -1 1\n").unwrap();
        let traj = integrate(&sys, &[5.0], 10.0, 1e-8).unwrap();
        assert!(traj.divergent);
    }

    #[test]
    fn fixed_step_order_check() {
        // halving the step of the fifth-order scheme shrinks the endpoint
        // error by at least 4x (asymptotically ~32x)
        let sys = scalar_decay();
        let exact = (-1.0f64).exp();
        let e1 = (integrate_fixed_step(&sys, &[1.0], 1.0, 0.1).unwrap()[0] - exact).abs();
        let e2 = (integrate_fixed_step(&sys, &[1.0], 1.0, 0.05).unwrap()[0] - exact).abs();
        assert!(e1 / e2 >= 4.0, "order ratio {}", e1 / e2);
    }

    #[test]
    fn adaptive_tolerance_tightens_error() {
        let sys = scalar_decay();
        let exact = (-1.0f64).exp();
        let e_loose = (integrate(&sys, &[1.0], 1.0, 1e-6).unwrap().end_state()[0] - exact).abs();
        let e_tight = (integrate(&sys, &[1.0], 1.0, 1e-10).unwrap().end_state()[0] - exact).abs();
        assert!(e_tight < e_loose, "tightening tol did not help: {e_loose} -> {e_tight}");
    }

    #[test]
    fn time_reversal_sanity() {
        let sys = builtin("circular").unwrap();
        let tol = 1e-9;
        let t_end = 3.0;
        let x0 = [1.3, -0.4];
        let fwd = integrate(&sys, &x0, t_end, tol).unwrap();
        // reverse field
        let rev = parse_system(
            "system r\nstate x y\ndyn x' = -x + y + x^3 + x*y^2\ndyn y' = -x - y + x^2*y + y^3\nbox -2 2 -2 2\n",
        )
        .unwrap();
        let back = integrate(&rev, fwd.end_state(), t_end, tol).unwrap();
        let err = dist2(back.end_state(), &x0).sqrt();
        assert!(err < 10.0 * tol * t_end * 1e6, "reversal error {err}");
        assert!(err < 1e-4, "reversal error {err}");
    }

    #[test]
    fn poincare_circular_full_turn() {
        let sys = builtin("circular").unwrap();
        let section = Section {
            anchor: vec![1.0, 0.0],
            normal: vec![0.0, 1.0],
        };
        let (x, t) = poincare_map(&sys, &section, &[1.0, 0.0], 1e-10, 20.0).unwrap();
        assert_relative_eq!(t, std::f64::consts::TAU, epsilon = 1e-6);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-6);
        assert!(x[1].abs() < 1e-8);
    }

    #[test]
    fn poincare_monotone_radial_return() {
        let sys = builtin("circular").unwrap();
        let section = Section {
            anchor: vec![0.5, 0.0],
            normal: vec![0.0, 1.0],
        };
        let (x, _) = poincare_map(&sys, &section, &[0.5, 0.0], 1e-10, 20.0).unwrap();
        assert!(x[0] > 0.5 && x[0] < 1.0, "return at {x:?}");
    }

    #[test]
    fn poincare_no_return_for_node() {
        let sys = builtin("linear_stable_2d").unwrap();
        let section = Section {
            anchor: vec![1.0, 0.0],
            normal: vec![-1.0, 0.0], // flow at (1,0) is (-1,0): positive crossing
        };
        let err = poincare_map(&sys, &section, &[1.0, 0.0], 1e-8, 30.0).unwrap_err();
        assert!(matches!(err, Error::NoReturn));
    }

    #[test]
    fn detect_equilibrium_for_contracting_engine_model() {
        let sys = mg(-0.8);
        let out = detect_limit_cycle(&sys, &[1.0, 1.0], &DetectSettings::default()).unwrap();
        assert!(matches!(out, CycleOutcome::Equilibrium(_)), "{}", out.label());
    }

    #[test]
    fn detect_cycle_for_oscillating_engine_model() {
        let sys = mg(-1.2);
        let out = detect_limit_cycle(&sys, &[1.0, 1.0], &DetectSettings::default()).unwrap();
        match out {
            CycleOutcome::Cycle(orbit) => {
                assert!(orbit.period > 0.0);
                assert!(orbit.residual < 1e-5, "residual {}", orbit.residual);
                // successive return times agree to 1e-3 relative
                let last = orbit.return_times.last().unwrap();
                for t in orbit.return_times.iter().rev().take(3) {
                    assert!((t - last).abs() / last < 1e-3);
                }
            }
            other => panic!("expected a cycle, got {}", other.label()),
        }
    }

    #[test]
    fn detect_van_der_pol_period() {
        let sys = builtin("van_der_pol").unwrap().bind_nominal();
        let out = detect_limit_cycle(&sys, &[2.0, 0.0], &DetectSettings::default()).unwrap();
        match out {
            CycleOutcome::Cycle(orbit) => {
                // the mu = 1 cycle period is about 6.663
                assert!((orbit.period - 6.663).abs() / 6.663 < 0.01, "T = {}", orbit.period);
            }
            other => panic!("expected a cycle, got {}", other.label()),
        }
    }

    #[test]
    fn identity_return_map_fails_contraction() {
        let sys = builtin("circular").unwrap();
        let w = PolyMatrix::identity(2, 2);
        let cert = MetricCertificate::new(
            w,
            Some(crate::poly::Polynomial::constant(2, 1.0)),
            0.1,
            1e-3,
            CertMode::Transverse,
        )
        .unwrap();
        let orbit = OrbitEstimate {
            anchor: vec![1.0, 0.0],
            period: std::f64::consts::TAU,
            samples: vec![vec![1.0, 0.0]],
            sample_times: vec![0.0],
            section_normal: vec![0.0, 1.0],
            residual: 0.0,
            return_times: vec![std::f64::consts::TAU],
        };
        let identity_map = |x: &[f64]| Ok(x.to_vec());
        let res =
            poincare_contraction_test_with_map(&identity_map, &sys, &cert, &orbit, 10, 5).unwrap();
        assert!(!res.pass);
        assert!(res.ratios.iter().all(|&r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn real_return_map_contracts_circular() {
        let sys = builtin("circular").unwrap();
        let w = PolyMatrix::identity(2, 2);
        let cert = MetricCertificate::new(
            w,
            Some(crate::poly::Polynomial::constant(2, 1.0)),
            0.1,
            1e-3,
            CertMode::Transverse,
        )
        .unwrap();
        let out = detect_limit_cycle(&sys, &[1.5, 0.0], &DetectSettings::default()).unwrap();
        let orbit = match out {
            CycleOutcome::Cycle(o) => o,
            other => panic!("expected cycle, got {}", other.label()),
        };
        let res = poincare_contraction_test(&sys, &cert, &orbit, 12, 7, 1e-9).unwrap();
        assert!(res.pass, "ratios {:?}", res.ratios);
    }

    #[test]
    fn boundary_flow_inward_for_decay() {
        let sys = parse_system("system d\nstate x y\ndyn x' = -x\ndyn y' = -y\nregion ball 1.0\nbox -1 1 -1 1\n").unwrap();
        let rep = boundary_flow_check(&sys, &sys.region.clone(), 200, 1).unwrap();
        assert!(rep.pass, "violations {}", rep.violations);
        // outward flow fails everywhere
        let sys = parse_system("system g\nstate x y\ndyn x' = x\ndyn y' = y\nregion ball 1.0\nbox -1 1 -1 1\n").unwrap();
        let rep = boundary_flow_check(&sys, &sys.region.clone(), 200, 1).unwrap();
        assert_eq!(rep.violations, rep.checked);
    }

    #[test]
    fn newton_equilibrium_matches_bisection() {
        let sys = mg(-0.8);
        let eq = find_equilibrium(&sys, &[0.0, 0.0], 1e-12).unwrap();
        assert_relative_eq!(eq[1], 3.0 * eq[0], epsilon = 1e-9);
        let f = sys.eval_f(&eq).unwrap();
        assert!(norm(&f) < 1e-10);
    }
}
