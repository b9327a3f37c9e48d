//! Self-contained semidefinite feasibility engine.
//!
//! Given finitely many matrix inequalities affine in a real decision
//! vector, find an assignment giving every inequality at least the target
//! margin, or report the best margin reached. The solver ascends the
//! concave function `min_j lambda_min(F0_j + sum_k v_k F_jk)` by relaxed
//! projections onto eigenvector half-space cuts of the violated
//! constraints (Polyak-sized steps), with per-constraint scaling as a
//! preconditioner. Failure is evidence, never a certificate of
//! infeasibility.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigenvalues, mat_axpy, sym_eig_min_pair};

/// One matrix inequality `F0 + sum_k v_k F_k >= 0`.
#[derive(Debug, Clone)]
pub struct AffineLmi {
    pub constant: DMatrix<f64>,
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
}

impl AffineLmi {
    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn assemble(&self, v: &[f64]) -> DMatrix<f64> {
        let mut a = self.constant.clone();
        for (k, fk) in &self.coeffs {
            mat_axpy(&mut a, v[*k], fk);
        }
        a
    }

    fn validate(&self, nvars: usize) -> Result<()> {
        let d = self.dim();
        if self.constant.ncols() != d {
            return Err(Error::Invalid("LMI constant matrix is not square".into()));
        }
        if self.constant.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("LMI constant matrix"));
        }
        for (k, fk) in &self.coeffs {
            if *k >= nvars {
                return Err(Error::Invalid(format!(
                    "LMI references decision index {} but nvars = {}",
                    k, nvars
                )));
            }
            if fk.nrows() != d || fk.ncols() != d {
                return Err(Error::Dimension {
                    context: "LMI coefficient matrix",
                    expected: d,
                    got: fk.nrows(),
                });
            }
            if fk.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("LMI coefficient matrix"));
            }
        }
        Ok(())
    }
}

/// A finite list of affine matrix inequalities over one decision vector.
#[derive(Debug, Clone)]
pub struct FeasibilityProblem {
    pub nvars: usize,
    pub lmis: Vec<AffineLmi>,
    /// Per-variable bounds; defaults to +-1e4.
    pub var_box: Vec<(f64, f64)>,
    pub target_margin: f64,
}

impl FeasibilityProblem {
    pub fn new(nvars: usize, target_margin: f64) -> Self {
        FeasibilityProblem {
            nvars,
            lmis: Vec::new(),
            var_box: vec![(-1e4, 1e4); nvars],
            target_margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.var_box.len() != self.nvars {
            return Err(Error::Dimension {
                context: "decision-variable box",
                expected: self.nvars,
                got: self.var_box.len(),
            });
        }
        if self
            .var_box
            .iter()
            .any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi))
        {
            return Err(Error::Invalid("variable box must be finite with lo <= hi".into()));
        }
        if !self.target_margin.is_finite() {
            return Err(Error::NonFinite("target margin"));
        }
        for lmi in &self.lmis {
            lmi.validate(self.nvars)?;
        }
        Ok(())
    }

    /// Eliminates the affine equality `sum_k a_k v_k = b` by substituting
    /// for the variable of largest |a_k|, returning the reduced problem
    /// and a function mapping reduced assignments back to full ones.
    pub fn eliminate_equality(&self, a: &[f64], b: f64) -> Result<(FeasibilityProblem, EqualityLift)> {
        if a.len() != self.nvars {
            return Err(Error::Dimension {
                context: "equality coefficients",
                expected: self.nvars,
                got: a.len(),
            });
        }
        let e = (0..self.nvars)
            .max_by(|&i, &j| a[i].abs().partial_cmp(&a[j].abs()).unwrap())
            .unwrap();
        if a[e].abs() < 1e-12 {
            return Err(Error::Invalid("degenerate equality: all coefficients ~ 0".into()));
        }
        // v_e = (b - sum_{k != e} a_k v_k) / a_e
        let keep: Vec<usize> = (0..self.nvars).filter(|&k| k != e).collect();
        let mut reduced = FeasibilityProblem::new(self.nvars - 1, self.target_margin);
        reduced.var_box = keep.iter().map(|&k| self.var_box[k]).collect();
        for lmi in &self.lmis {
            let mut constant = lmi.constant.clone();
            let mut fe: Option<&DMatrix<f64>> = None;
            for (k, fk) in &lmi.coeffs {
                if *k == e {
                    fe = Some(fk);
                }
            }
            if let Some(fe) = fe {
                mat_axpy(&mut constant, b / a[e], fe);
            }
            let mut coeffs: Vec<(usize, DMatrix<f64>)> = Vec::new();
            for (k, fk) in &lmi.coeffs {
                if *k == e {
                    continue;
                }
                let new_idx = keep.iter().position(|&kk| kk == *k).unwrap();
                let mut m = fk.clone();
                if let Some(fe) = fe {
                    mat_axpy(&mut m, -a[*k] / a[e], fe);
                }
                coeffs.push((new_idx, m));
            }
            // variables that only appear through the eliminated one
            if let Some(fe) = fe {
                for (pos, &k) in keep.iter().enumerate() {
                    if a[k] != 0.0 && !lmi.coeffs.iter().any(|(kk, _)| *kk == k) {
                        coeffs.push((pos, fe * (-a[k] / a[e])));
                    }
                }
            }
            reduced.lmis.push(AffineLmi { constant, coeffs });
        }
        Ok((
            reduced,
            EqualityLift {
                eliminated: e,
                keep,
                a: a.to_vec(),
                b,
            },
        ))
    }
}

/// Reconstructs a full assignment after [`FeasibilityProblem::eliminate_equality`].
#[derive(Debug, Clone)]
pub struct EqualityLift {
    eliminated: usize,
    keep: Vec<usize>,
    a: Vec<f64>,
    b: f64,
}

impl EqualityLift {
    /// Drops the eliminated coordinate from a full assignment.
    pub fn reduce(&self, full: &[f64]) -> Vec<f64> {
        self.keep.iter().map(|&k| full[k]).collect()
    }

    pub fn lift(&self, reduced: &[f64]) -> Vec<f64> {
        let n = self.a.len();
        let mut full = vec![0.0; n];
        for (pos, &k) in self.keep.iter().enumerate() {
            full[k] = reduced[pos];
        }
        let mut s = self.b;
        for &k in &self.keep {
            s -= self.a[k] * full[k];
        }
        full[self.eliminated] = s / self.a[self.eliminated];
        full
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum FeasStatus {
    Feasible,
    InfeasibleEvidence,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct FeasResult {
    pub status: FeasStatus,
    /// Best assignment found (the feasible one when status is Feasible).
    pub v: Vec<f64>,
    /// `min_j lambda_min(A_j(v))` at `v`.
    pub achieved_margin: f64,
    /// Index of the LMI attaining the worst margin at `v`.
    pub worst_lmi: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_sweeps: usize,
    pub relaxation: f64,
    pub patience: usize,
    /// Starting assignment; defaults to the box center.
    pub initial: Option<Vec<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_sweeps: 4000,
            relaxation: 1.4,
            patience: 50,
            initial: None,
        }
    }
}

/// Solves the max-margin feasibility problem. Deterministic for a fixed
/// seed; the seed only drives the constraint visiting order.
pub fn solve_feasibility(prob: &FeasibilityProblem, seed: u64) -> Result<FeasResult> {
    solve_feasibility_opts(prob, seed, &SolveOptions::default())
}

pub fn solve_feasibility_opts(
    prob: &FeasibilityProblem,
    seed: u64,
    opts: &SolveOptions,
) -> Result<FeasResult> {
    prob.validate()?;
    let m = prob.lmis.len();
    if m == 0 {
        return Ok(FeasResult {
            status: FeasStatus::Feasible,
            v: prob.var_box.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect(),
            achieved_margin: f64::INFINITY,
            worst_lmi: 0,
            iterations: 0,
        });
    }

    let clamp = |v: &mut Vec<f64>| {
        for (x, &(lo, hi)) in v.iter_mut().zip(&prob.var_box) {
            *x = x.clamp(lo, hi);
        }
    };
    let eval_all = |v: &[f64]| -> (f64, usize) {
        let mut worst = f64::INFINITY;
        let mut worst_j = 0;
        for (j, lmi) in prob.lmis.iter().enumerate() {
            let (lam, _) = sym_eig_min_pair(&lmi.assemble(v));
            if lam < worst {
                worst = lam;
                worst_j = j;
            }
        }
        (worst, worst_j)
    };

    let mut v: Vec<f64> = match &opts.initial {
        Some(init) if init.len() == prob.nvars => init.clone(),
        _ => prob.var_box.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect(),
    };
    clamp(&mut v);
    let (mut best_g, mut best_j) = eval_all(&v);
    let mut best_v = v.clone();
    let mut iterations = 0usize;

    // Phase 1: relaxed projections onto eigenvector half-space cuts at the
    // target level. Cheap, and sufficient for well-conditioned instances.
    if best_g < prob.target_margin {
        let budget = (opts.max_sweeps / 8).clamp(20, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..m).collect();
        let mut grad = vec![0.0f64; prob.nvars];
        let tau = prob.target_margin;
        let mut last_improve = 0usize;
        for sweep in 0..budget {
            iterations += 1;
            order.shuffle(&mut rng);
            let mut violated = false;
            for &j in &order {
                let lmi = &prob.lmis[j];
                let (lam, u) = sym_eig_min_pair(&lmi.assemble(&v));
                if lam >= tau {
                    continue;
                }
                violated = true;
                let mut norm2 = 0.0;
                for g in grad.iter_mut() {
                    *g = 0.0;
                }
                for (k, fk) in &lmi.coeffs {
                    let gk = (u.transpose() * fk * &u)[(0, 0)];
                    grad[*k] = gk;
                    norm2 += gk * gk;
                }
                if norm2 < 1e-30 {
                    continue;
                }
                let step = opts.relaxation * (tau - lam) / norm2;
                for (k, _) in &lmi.coeffs {
                    v[*k] += step * grad[*k];
                }
                clamp(&mut v);
            }
            let (g, j) = eval_all(&v);
            if g > best_g + 1e-15 {
                best_g = g;
                best_j = j;
                best_v.clone_from(&v);
                last_improve = sweep;
            }
            if !violated || best_g >= tau {
                break;
            }
            if sweep - last_improve > opts.patience {
                break;
            }
        }
    }

    // Phase 2: interior-point centering. Maximizes the worst margin by
    // Newton-centering the log-det barrier of `A_j(v) - t I` while the
    // level `t` tracks upward; needs no feasible start and converges to
    // the max-min margin, which gives sampled certificates their
    // inter-sample slack.
    let newton_budget = opts.max_sweeps;
    let (g2, j2, v2, used) = barrier_max_min(prob, &best_v, newton_budget, opts);
    iterations += used;
    if g2 > best_g {
        best_g = g2;
        best_j = j2;
        best_v = v2;
    }

    let status = if best_g >= prob.target_margin {
        FeasStatus::Feasible
    } else if best_g < 0.0 {
        FeasStatus::InfeasibleEvidence
    } else {
        FeasStatus::MaxIters
    };
    Ok(FeasResult {
        status,
        v: best_v,
        achieved_margin: best_g,
        worst_lmi: best_j,
        iterations,
    })
}

/// Compact row-major storage for one inequality, sized for the small
/// matrix dimensions this toolkit produces.
struct CompactLmi {
    dim: usize,
    f0: Vec<f64>,
    /// decision indices touching this inequality
    idx: Vec<usize>,
    /// coefficient matrices, row-major, one block of dim*dim per index
    fk: Vec<f64>,
}

impl CompactLmi {
    fn of(lmi: &AffineLmi) -> CompactLmi {
        let d = lmi.dim();
        let mut f0 = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                f0[i * d + j] = lmi.constant[(i, j)];
            }
        }
        let mut idx = Vec::with_capacity(lmi.coeffs.len());
        let mut fk = Vec::with_capacity(lmi.coeffs.len() * d * d);
        for (k, m) in &lmi.coeffs {
            idx.push(*k);
            for i in 0..d {
                for j in 0..d {
                    fk.push(m[(i, j)]);
                }
            }
        }
        CompactLmi { dim: d, f0, idx, fk }
    }

    /// S = F0 + sum v_k F_k - t I into `s` (row-major scratch).
    fn assemble_shifted(&self, v: &[f64], t: f64, s: &mut [f64]) {
        let d2 = self.dim * self.dim;
        s[..d2].copy_from_slice(&self.f0);
        for (a, &k) in self.idx.iter().enumerate() {
            let vk = v[k];
            if vk != 0.0 {
                let blk = &self.fk[a * d2..(a + 1) * d2];
                for (si, bi) in s[..d2].iter_mut().zip(blk) {
                    *si += vk * bi;
                }
            }
        }
        for i in 0..self.dim {
            s[i * self.dim + i] -= t;
        }
    }
}

/// Cholesky of a small row-major matrix; returns false if not PD.
/// On success `l` holds the lower factor and `logdet` accumulates.
fn small_cholesky(d: usize, s: &[f64], l: &mut [f64], logdet: &mut f64) -> bool {
    for x in l[..d * d].iter_mut() {
        *x = 0.0;
    }
    for i in 0..d {
        for j in 0..=i {
            let mut sum = s[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return false;
                }
                let r = sum.sqrt();
                l[i * d + i] = r;
                *logdet += 2.0 * r.ln();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    true
}

/// Inverse from the Cholesky factor, row-major symmetric output.
fn small_inv_from_chol(d: usize, l: &[f64], inv: &mut [f64], linv: &mut [f64]) {
    for x in linv[..d * d].iter_mut() {
        *x = 0.0;
    }
    for i in 0..d {
        linv[i * d + i] = 1.0 / l[i * d + i];
        for j in 0..i {
            let mut sum = 0.0;
            for k in j..i {
                sum -= l[i * d + k] * linv[k * d + j];
            }
            linv[i * d + j] = sum / l[i * d + i];
        }
    }
    for i in 0..d {
        for j in 0..d {
            let mut sum = 0.0;
            for k in i.max(j)..d {
                sum += linv[k * d + i] * linv[k * d + j];
            }
            inv[i * d + j] = sum;
        }
    }
}

/// Interior-point ascent of `min_j lambda_min(A_j(v))` inside the
/// variable box: path-following on `max t` subject to `A_j(v) >= t I`,
/// minimizing `-t/mu - sum_j logdet(A_j(v) - t I)` (plus box barriers)
/// by damped Newton in `(v, t)` while `mu` shrinks geometrically. Needs
/// no feasible start. Returns the best point, its margin, the binding
/// inequality, and the Newton iterations spent.
fn barrier_max_min(
    prob: &FeasibilityProblem,
    v0: &[f64],
    newton_budget: usize,
    _opts: &SolveOptions,
) -> (f64, usize, Vec<f64>, usize) {
    let n = prob.nvars;
    let compact: Vec<CompactLmi> = prob.lmis.iter().map(CompactLmi::of).collect();
    let max_d = compact.iter().map(|c| c.dim).max().unwrap_or(1);
    let scratch_len = max_d * max_d;

    let eval_all = |v: &[f64]| -> (f64, usize) {
        let mut worst = f64::INFINITY;
        let mut worst_j = 0;
        for (j, lmi) in prob.lmis.iter().enumerate() {
            let (lam, _) = sym_eig_min_pair(&lmi.assemble(v));
            if lam < worst {
                worst = lam;
                worst_j = j;
            }
        }
        (worst, worst_j)
    };

    // strictly inside the box for the box barrier
    let mut v: Vec<f64> = v0.to_vec();
    for (x, &(lo, hi)) in v.iter_mut().zip(&prob.var_box) {
        let pad = 1e-9 * (1.0 + hi - lo);
        *x = x.clamp(lo + pad, hi - pad);
    }
    let (g0, j0) = eval_all(&v);
    let mut best = (g0, j0, v.clone());
    let mut used = 0usize;

    let total_dim: usize = compact.iter().map(|c| c.dim).sum::<usize>() + 2 * n;

    // barrier value only (line search)
    let feas_val = |v: &[f64], t: f64| -> Option<f64> {
        let mut val = 0.0;
        let mut s = vec![0.0f64; scratch_len];
        let mut l = vec![0.0f64; scratch_len];
        for c in &compact {
            c.assemble_shifted(v, t, &mut s);
            let mut logdet = 0.0;
            if !small_cholesky(c.dim, &s, &mut l, &mut logdet) {
                return None;
            }
            val -= logdet;
        }
        for (&x, &(lo, hi)) in v.iter().zip(&prob.var_box) {
            let a = x - lo;
            let b = hi - x;
            if !(a > 0.0 && b > 0.0) {
                return None;
            }
            val -= a.ln() + b.ln();
        }
        Some(val)
    };

    let mut grad = DVector::<f64>::zeros(n + 1);
    let mut hess = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut t = g0 - (0.5 + 0.25 * g0.abs());
    let mut prev_t = f64::NEG_INFINITY;
    let mut mu = 1.0f64.max(g0.abs());
    let mu_min = 1e-10;
    let mut s_scratch = vec![0.0f64; scratch_len];
    let mut l_scratch = vec![0.0f64; scratch_len];
    let mut inv_scratch = vec![0.0f64; scratch_len];
    let mut linv_scratch = vec![0.0f64; scratch_len];
    let mut g_blocks: Vec<f64> = Vec::new();

    while used < newton_budget {
        let mut newton_iters = 0usize;
        let mut break_reason = "cap";
        'newton: while newton_iters < 150 && used < newton_budget {
            newton_iters += 1;
            used += 1;
            // assemble psi, grad, hess
            let mut val = -t / mu;
            grad.fill(0.0);
            hess.fill(0.0);
            grad[n] = -1.0 / mu;
            for c in &compact {
                let d = c.dim;
                let d2 = d * d;
                c.assemble_shifted(&v, t, &mut s_scratch);
                let mut logdet = 0.0;
                if !small_cholesky(d, &s_scratch, &mut l_scratch, &mut logdet) {
                    break_reason = "infeasible-assembly";
                    break 'newton;
                }
                val -= logdet;
                small_inv_from_chol(d, &l_scratch, &mut inv_scratch, &mut linv_scratch);
                let sinv = &inv_scratch[..d2];
                // G_a = S^-1 F_a for each support index
                let ns = c.idx.len();
                g_blocks.resize(ns * d2, 0.0);
                for a in 0..ns {
                    let fa = &c.fk[a * d2..(a + 1) * d2];
                    let ga = &mut g_blocks[a * d2..(a + 1) * d2];
                    for i in 0..d {
                        for j in 0..d {
                            let mut sum = 0.0;
                            for k in 0..d {
                                sum += sinv[i * d + k] * fa[k * d + j];
                            }
                            ga[i * d + j] = sum;
                        }
                    }
                }
                // gradient and t-row entries
                let mut tr_sinv = 0.0;
                let mut tr_sinv2 = 0.0;
                for i in 0..d {
                    tr_sinv += sinv[i * d + i];
                    for j in 0..d {
                        tr_sinv2 += sinv[i * d + j] * sinv[j * d + i];
                    }
                }
                grad[n] += tr_sinv;
                hess[(n, n)] += tr_sinv2;
                for a in 0..ns {
                    let ka = c.idx[a];
                    let ga = &g_blocks[a * d2..(a + 1) * d2];
                    let mut tr_ga = 0.0;
                    for i in 0..d {
                        tr_ga += ga[i * d + i];
                    }
                    grad[ka] -= tr_ga;
                    // cross term: -tr(S^-1 G_a)
                    let mut cross = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            cross += sinv[i * d + j] * ga[j * d + i];
                        }
                    }
                    hess[(ka, n)] -= cross;
                    hess[(n, ka)] -= cross;
                    // pair terms tr(G_a G_b)
                    for b in a..ns {
                        let kb = c.idx[b];
                        let gb = &g_blocks[b * d2..(b + 1) * d2];
                        let mut tr = 0.0;
                        for i in 0..d {
                            for j in 0..d {
                                tr += ga[i * d + j] * gb[j * d + i];
                            }
                        }
                        hess[(ka, kb)] += tr;
                        if ka != kb {
                            hess[(kb, ka)] += tr;
                        }
                    }
                }
            }
            for (k, (&x, &(lo, hi))) in v.iter().zip(&prob.var_box).enumerate() {
                let a = x - lo;
                let b = hi - x;
                if !(a > 0.0 && b > 0.0) {
                    break 'newton;
                }
                val -= a.ln() + b.ln();
                grad[k] += -1.0 / a + 1.0 / b;
                hess[(k, k)] += 1.0 / (a * a) + 1.0 / (b * b);
            }

            // Jacobi scaling equalizes the wildly different curvatures of
            // the coefficient directions and the level variable
            let jac: DVector<f64> = DVector::from_fn(n + 1, |i, _| {
                let h = hess[(i, i)];
                if h > 1e-300 {
                    1.0 / h.sqrt()
                } else {
                    1.0
                }
            });
            let mut hs = DMatrix::<f64>::zeros(n + 1, n + 1);
            for i in 0..=n {
                for j in 0..=n {
                    hs[(i, j)] = hess[(i, j)] * jac[i] * jac[j];
                }
            }
            let gs = DVector::from_fn(n + 1, |i, _| grad[i] * jac[i]);
            let mut ridge = 1e-13;
            let chol = loop {
                let mut h = hs.clone();
                for i in 0..=n {
                    h[(i, i)] += ridge;
                }
                if let Some(c) = h.cholesky() {
                    break Some(c);
                }
                ridge *= 100.0;
                if ridge > 1.0 {
                    break None;
                }
            };
            let Some(chol) = chol else {
                break_reason = "hessian-cholesky";
                break 'newton;
            };
            let dy = chol.solve(&(-&gs));
            let dz = DVector::from_fn(n + 1, |i, _| dy[i] * jac[i]);
            let decrement = -(grad.transpose() * &dz)[(0, 0)];
            if !decrement.is_finite() || decrement < 1e-11 * (1.0 + val.abs()) {
                break_reason = "centered";
                break 'newton;
            }
            let mut alpha = 1.0f64;
            let mut moved = false;
            while alpha > 1e-13 {
                let vn: Vec<f64> = v
                    .iter()
                    .enumerate()
                    .map(|(k, x)| x + alpha * dz[k])
                    .collect();
                let tn = t + alpha * dz[n];
                if let Some(valn) = feas_val(&vn, tn) {
                    if valn - tn / mu <= val - 0.25 * alpha * decrement {
                        v = vn;
                        t = tn;
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !moved {
                break_reason = "line-search";
                break 'newton;
            }
        }
        let (gn, jn) = eval_all(&v);
        if std::env::var("ORBITCERT_TRACE").is_ok() {
            eprintln!("mu={mu:.3e} t={t:.6e} g={gn:.6e} used={used} iters={newton_iters} stop={break_reason}");
        }
        if gn > best.0 {
            best = (gn, jn, v.clone());
        }
        if mu * total_dim as f64 <= 1e-5 * (1.0 + t.abs()) || mu <= mu_min {
            break;
        }
        if (t - prev_t).abs() <= 1e-7 * (1.0 + t.abs()) {
            break; // level stopped moving between rounds
        }
        prev_t = t;
        mu *= 0.1;
    }

    (best.0, best.1, best.2, used)
}


/// Debug hook: prints the analytic barrier gradient and two Hessian rows
/// for comparison against finite differences.
pub fn debug_barrier_derivs(prob: &FeasibilityProblem, v: &[f64], t: f64, mu: f64) {
    let n = prob.nvars;
    let mut grad = vec![0.0f64; n + 1];
    let mut hess = DMatrix::<f64>::zeros(n + 1, n + 1);
    grad[n] = -1.0 / mu;
    for lmi in &prob.lmis {
        let d = lmi.dim();
        let mut s = lmi.assemble(v);
        for i in 0..d {
            s[(i, i)] -= t;
        }
        let sinv = s.try_inverse().unwrap();
        let gs: Vec<(usize, DMatrix<f64>)> =
            lmi.coeffs.iter().map(|(k, fk)| (*k, &sinv * fk)).collect();
        grad[n] += sinv.trace();
        hess[(n, n)] += (&sinv * &sinv).trace();
        for (k, gk) in &gs {
            grad[*k] -= gk.trace();
            let cross = -(&sinv * gk).trace();
            hess[(*k, n)] += cross;
            hess[(n, *k)] += cross;
        }
        for a in 0..gs.len() {
            let (ka, ga) = &gs[a];
            for b in a..gs.len() {
                let (kb, gb) = &gs[b];
                let tr = (ga * gb).trace();
                hess[(*ka, *kb)] += tr;
                if ka != kb {
                    hess[(*kb, *ka)] += tr;
                }
            }
        }
    }
    for (k, (&x, &(lo, hi))) in v.iter().zip(&prob.var_box).enumerate() {
        let a = x - lo;
        let b = hi - x;
        grad[k] += -1.0 / a + 1.0 / b;
        hess[(k, k)] += 1.0 / (a * a) + 1.0 / (b * b);
    }
    println!("an grad: {:?}", grad);
    println!("an hess row0: {:?}", (0..=n).map(|j| hess[(0, j)]).collect::<Vec<_>>());
    println!("an hess rowt: {:?}", (0..=n).map(|j| hess[(n, j)]).collect::<Vec<_>>());
}

/// Per-LMI smallest eigenvalues at `v`, computed with the Jacobi
/// eigensolver so the verdict does not share the solver's eigen path.
pub fn check_assignment(prob: &FeasibilityProblem, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != prob.nvars {
        return Err(Error::Dimension {
            context: "assignment check",
            expected: prob.nvars,
            got: v.len(),
        });
    }
    Ok(prob
        .lmis
        .iter()
        .map(|lmi| {
            let a = lmi.assemble(v);
            jacobi_eigenvalues(&a)[0]
        })
        .collect())
}

/// Serializes a problem in a plain-text format: a `nvars`/`target` header,
/// a `box` line per variable, then per LMI a `lmi <dim> <nterms>` header,
/// the row-major constant matrix, and `term <k>` blocks.
pub fn dump_problem(prob: &FeasibilityProblem) -> String {
    let mut out = String::new();
    out.push_str(&format!("nvars {}\n", prob.nvars));
    out.push_str(&format!("target {:e}\n", prob.target_margin));
    for &(lo, hi) in &prob.var_box {
        out.push_str(&format!("box {:e} {:e}\n", lo, hi));
    }
    for lmi in &prob.lmis {
        out.push_str(&format!("lmi {} {}\n", lmi.dim(), lmi.coeffs.len()));
        push_matrix(&mut out, &lmi.constant);
        for (k, fk) in &lmi.coeffs {
            out.push_str(&format!("term {}\n", k));
            push_matrix(&mut out, fk);
        }
    }
    out
}

fn push_matrix(out: &mut String, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

pub fn load_problem(text: &str) -> Result<FeasibilityProblem> {
    let mut tokens = text.split_whitespace().peekable();
    let bad = |msg: &str| Error::Invalid(format!("problem load: {}", msg));
    let expect = |word: &str, tokens: &mut std::iter::Peekable<std::str::SplitWhitespace>| {
        match tokens.next() {
            Some(t) if t == word => Ok(()),
            other => Err(bad(&format!("expected `{}`, got {:?}", word, other))),
        }
    };
    fn next_num<T: std::str::FromStr>(
        tokens: &mut std::iter::Peekable<std::str::SplitWhitespace>,
    ) -> Result<T> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Invalid("problem load: expected a number".into()))
    }

    expect("nvars", &mut tokens)?;
    let nvars: usize = next_num(&mut tokens)?;
    expect("target", &mut tokens)?;
    let target: f64 = next_num(&mut tokens)?;
    let mut prob = FeasibilityProblem::new(nvars, target);
    prob.var_box.clear();
    for _ in 0..nvars {
        match tokens.next() {
            Some("box") => {}
            other => return Err(bad(&format!("expected `box`, got {:?}", other))),
        }
        let lo: f64 = next_num(&mut tokens)?;
        let hi: f64 = next_num(&mut tokens)?;
        prob.var_box.push((lo, hi));
    }
    while let Some(&word) = tokens.peek() {
        if word != "lmi" {
            return Err(bad(&format!("expected `lmi`, got `{}`", word)));
        }
        tokens.next();
        let dim: usize = next_num(&mut tokens)?;
        let nterms: usize = next_num(&mut tokens)?;
        let read_matrix =
            |tokens: &mut std::iter::Peekable<std::str::SplitWhitespace>| -> Result<DMatrix<f64>> {
                let mut m = DMatrix::zeros(dim, dim);
                for i in 0..dim {
                    for j in 0..dim {
                        m[(i, j)] = next_num(tokens)?;
                    }
                }
                Ok(m)
            };
        let constant = read_matrix(&mut tokens)?;
        let mut coeffs = Vec::with_capacity(nterms);
        for _ in 0..nterms {
            match tokens.next() {
                Some("term") => {}
                other => return Err(bad(&format!("expected `term`, got {:?}", other))),
            }
            let k: usize = next_num(&mut tokens)?;
            let fk = read_matrix(&mut tokens)?;
            coeffs.push((k, fk));
        }
        prob.lmis.push(AffineLmi { constant, coeffs });
    }
    prob.validate()?;
    Ok(prob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn interval_instance_feasible() {
        // v I - I >= 0 and 5I - v I >= 0, dim 2: v in [1 + m, 5 - m]
        let m = 1e-3;
        let mut prob = FeasibilityProblem::new(1, m);
        prob.lmis.push(AffineLmi {
            constant: -eye(2),
            coeffs: vec![(0, eye(2))],
        });
        prob.lmis.push(AffineLmi {
            constant: eye(2) * 5.0,
            coeffs: vec![(0, -eye(2))],
        });
        let res = solve_feasibility(&prob, 0).unwrap();
        assert_eq!(res.status, FeasStatus::Feasible);
        let v = res.v[0];
        assert!(v >= 1.0 + m - 1e-9 && v <= 5.0 - m + 1e-9, "v = {v}");
        let margins = check_assignment(&prob, &res.v).unwrap();
        assert!(margins.iter().all(|&x| x >= m - 1e-9));
    }

    #[test]
    fn contradictory_instance_reports_best_effort() {
        // v I - I >= 0 and -v I >= 0: optimum margin is -0.5 at v = 0.5
        let mut prob = FeasibilityProblem::new(1, 1e-6);
        prob.lmis.push(AffineLmi {
            constant: -eye(2),
            coeffs: vec![(0, eye(2))],
        });
        prob.lmis.push(AffineLmi {
            constant: DMatrix::zeros(2, 2),
            coeffs: vec![(0, -eye(2))],
        });
        let res = solve_feasibility(&prob, 0).unwrap();
        assert_ne!(res.status, FeasStatus::Feasible);
        assert!(res.achieved_margin <= -0.5 + 1e-9);
        assert!(res.achieved_margin >= -0.56, "ascent stalled at {}", res.achieved_margin);
    }

    #[test]
    fn multiplier_recovery() {
        // -H + rho Q >= t I with H = [[0,2],[2,-2]], Q = [[1,0],[0,0]]
        let h = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, -2.0]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let mut prob = FeasibilityProblem::new(1, 0.01);
        prob.lmis.push(AffineLmi {
            constant: -h,
            coeffs: vec![(0, q)],
        });
        let res = solve_feasibility(&prob, 3).unwrap();
        assert_eq!(res.status, FeasStatus::Feasible);
        assert!(res.v[0] > 2.0, "rho = {}", res.v[0]);
        assert!(res.achieved_margin >= 0.01 - 1e-9);
    }

    #[test]
    fn nan_input_rejected() {
        let mut prob = FeasibilityProblem::new(1, 0.0);
        prob.lmis.push(AffineLmi {
            constant: DMatrix::from_element(1, 1, f64::NAN),
            coeffs: vec![],
        });
        assert!(solve_feasibility(&prob, 0).is_err());
    }

    #[test]
    fn check_assignment_basics() {
        let mut prob = FeasibilityProblem::new(1, 0.0);
        prob.lmis.push(AffineLmi {
            constant: eye(2),
            coeffs: vec![(0, DMatrix::zeros(2, 2))],
        });
        let margins = check_assignment(&prob, &[0.0]).unwrap();
        assert!((margins[0] - 1.0).abs() < 1e-12);
        assert!(check_assignment(&prob, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn single_violated_lmi_localized() {
        let mut prob = FeasibilityProblem::new(1, 0.0);
        prob.lmis.push(AffineLmi {
            constant: eye(2),
            coeffs: vec![],
        });
        prob.lmis.push(AffineLmi {
            constant: -eye(2),
            coeffs: vec![],
        });
        let margins = check_assignment(&prob, &[0.3]).unwrap();
        assert!(margins[0] > 0.0);
        assert!(margins[1] < 0.0);
    }

    #[test]
    fn scaling_covariance_of_margins() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.7]);
        let f1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.3]);
        for &c in &[2.0, 10.0, 0.25] {
            let mut prob = FeasibilityProblem::new(1, 0.0);
            prob.lmis.push(AffineLmi {
                constant: h.clone(),
                coeffs: vec![(0, f1.clone())],
            });
            prob.lmis.push(AffineLmi {
                constant: h.clone() * c,
                coeffs: vec![(0, f1.clone() * c)],
            });
            let v = [0.7];
            let margins = check_assignment(&prob, &v).unwrap();
            assert!(
                (margins[1] - c * margins[0]).abs() <= 1e-9 * (1.0 + margins[1].abs()),
                "margin did not scale: {} vs {}",
                margins[1],
                c * margins[0]
            );
        }
    }

    #[test]
    fn planted_feasible_instances_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..200 {
            let nvars = rng.random_range(1..=60usize);
            let nlmis = rng.random_range(1..=3usize);
            let vstar: Vec<f64> = (0..nvars).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut prob = FeasibilityProblem::new(nvars, 1e-6);
            for _ in 0..nlmis {
                let dim = rng.random_range(1..=20usize);
                let nterms = rng.random_range(1..=nvars.min(12));
                let mut used: Vec<usize> = (0..nvars).collect();
                used.shuffle(&mut rng);
                used.truncate(nterms);
                let mut coeffs = Vec::new();
                for &k in &used {
                    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
                    coeffs.push((k, (&a + a.transpose()) * 0.5));
                }
                let r = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
                let slack = rng.random_range(0.1..1.0);
                let mut constant = &r * r.transpose() * (1.0 / dim as f64) + eye(dim) * slack;
                for (k, fk) in &coeffs {
                    mat_axpy(&mut constant, -vstar[*k], fk);
                }
                prob.lmis.push(AffineLmi { constant, coeffs });
            }
            let res = solve_feasibility(&prob, trial as u64).unwrap();
            assert_eq!(
                res.status,
                FeasStatus::Feasible,
                "trial {trial}: nvars={nvars} achieved={}",
                res.achieved_margin
            );
            // soundness: the independent eigen path confirms all margins
            let margins = check_assignment(&prob, &res.v).unwrap();
            assert!(
                margins.iter().all(|&m| m >= prob.target_margin - 1e-9),
                "trial {trial}: check_assignment disagrees: {margins:?}"
            );
        }
    }

    #[test]
    fn determinism_for_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut prob = FeasibilityProblem::new(4, 1e-4);
        for _ in 0..6 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let sym = (&a + a.transpose()) * 0.5;
            let k = rng.random_range(0..4);
            prob.lmis.push(AffineLmi {
                constant: eye(3) * rng.random_range(0.5..1.5),
                coeffs: vec![(k, sym)],
            });
        }
        let r1 = solve_feasibility(&prob, 123).unwrap();
        let r2 = solve_feasibility(&prob, 123).unwrap();
        assert_eq!(r1.v, r2.v);
        assert_eq!(r1.achieved_margin, r2.achieved_margin);
        assert_eq!(r1.iterations, r2.iterations);
    }

    #[test]
    fn equality_elimination_preserves_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut prob = FeasibilityProblem::new(3, 1e-6);
        for _ in 0..4 {
            let mut coeffs = Vec::new();
            for k in 0..3 {
                let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
                coeffs.push((k, (&a + a.transpose()) * 0.5));
            }
            prob.lmis.push(AffineLmi {
                constant: eye(2) * rng.random_range(0.2..1.0),
                coeffs,
            });
        }
        let a = vec![2.0, -1.0, 0.5];
        let b = 1.3;
        let (reduced, lift) = prob.eliminate_equality(&a, b).unwrap();
        assert_eq!(reduced.nvars, 2);
        let w = vec![0.4, -0.9];
        let full = lift.lift(&w);
        let dot: f64 = a.iter().zip(&full).map(|(x, y)| x * y).sum();
        assert!((dot - b).abs() < 1e-12);
        // margins agree between reduced and lifted assignments
        let mr = check_assignment(&reduced, &w).unwrap();
        let mf = check_assignment(&prob, &full).unwrap();
        for (x, y) in mr.iter().zip(&mf) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn dump_load_roundtrip() {
        let mut prob = FeasibilityProblem::new(2, 1e-5);
        prob.var_box = vec![(-3.0, 3.0), (-1.0, 8.0)];
        prob.lmis.push(AffineLmi {
            constant: DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.25, -0.5]),
            coeffs: vec![(1, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))],
        });
        prob.lmis.push(AffineLmi {
            constant: DMatrix::from_element(1, 1, 2.0),
            coeffs: vec![(0, DMatrix::from_element(1, 1, -1.0))],
        });
        let text = dump_problem(&prob);
        let back = load_problem(&text).unwrap();
        assert_eq!(back.nvars, prob.nvars);
        assert_eq!(back.var_box, prob.var_box);
        assert_eq!(back.lmis.len(), prob.lmis.len());
        for (a, b) in prob.lmis.iter().zip(&back.lmis) {
            assert_eq!(a.constant, b.constant);
            assert_eq!(a.coeffs.len(), b.coeffs.len());
            for ((ka, ma), (kb, mb)) in a.coeffs.iter().zip(&b.coeffs) {
                assert_eq!(ka, kb);
                assert_eq!(ma, mb);
            }
        }
    }
}
