//! Dense convex quadratic programs
//!
//! ```text
//! minimize    1/2 x'Px + q'x
//! subject to  Gx <= g,  Ex = e
//! ```
//!
//! Solved by an operator-splitting (ADMM) iteration on a Ruiz-equilibrated
//! copy of the problem. Every few dozen iterations the current active-set
//! guess is polished by solving the equality-constrained KKT system exactly;
//! a polished point that passes the KKT checks is returned immediately.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 4000;

/// Tolerance on negative eigenvalues of `P` before it is rejected.
const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("cost matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("cost matrix factorization failed")]
    Factorization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    p: DMatrix<f64>,
    q: DVector<f64>,
    g_mat: DMatrix<f64>,
    g_vec: DVector<f64>,
    e_mat: DMatrix<f64>,
    e_vec: DVector<f64>,
}

fn check_finite<'a>(what: &'static str, mut it: impl Iterator<Item = &'a f64>) -> Result<(), QpError> {
    if it.any(|v| !v.is_finite()) {
        Err(QpError::NonFinite(what))
    } else {
        Ok(())
    }
}

impl QuadraticProgram {
    /// Unconstrained problem. `P` is symmetrized; tiny negative eigenvalues
    /// are floored at zero.
    pub fn new(p: DMatrix<f64>, q: DVector<f64>) -> Result<Self, QpError> {
        let n = q.len();
        if p.nrows() != n || p.ncols() != n {
            return Err(QpError::DimensionMismatch {
                what: "P",
                expected: n,
                got: p.nrows().max(p.ncols()),
            });
        }
        check_finite("P", p.iter())?;
        check_finite("q", q.iter())?;
        let mut p = (&p + p.transpose()) * 0.5;
        if n > 0 {
            let eig = p.clone().symmetric_eigen();
            let min = eig.eigenvalues.min();
            let scale = eig.eigenvalues.amax().max(1.0);
            if min < -PSD_TOL * scale {
                return Err(QpError::NotConvex(min));
            }
            if min < 0.0 {
                let clipped = eig.eigenvalues.map(|l| l.max(0.0));
                p = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
                p = (&p + p.transpose()) * 0.5;
            }
        }
        Ok(Self {
            p,
            q,
            g_mat: DMatrix::zeros(0, n),
            g_vec: DVector::zeros(0),
            e_mat: DMatrix::zeros(0, n),
            e_vec: DVector::zeros(0),
        })
    }

    pub fn with_inequalities(mut self, g_mat: DMatrix<f64>, g_vec: DVector<f64>) -> Result<Self, QpError> {
        self.check_rows("G", &g_mat, &g_vec)?;
        check_finite("G", g_mat.iter())?;
        if g_vec.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(QpError::NonFinite("g"));
        }
        self.g_mat = stack_rows(&self.g_mat, &g_mat);
        self.g_vec = stack_vec(&self.g_vec, &g_vec);
        Ok(self)
    }

    pub fn with_equalities(mut self, e_mat: DMatrix<f64>, e_vec: DVector<f64>) -> Result<Self, QpError> {
        self.check_rows("E", &e_mat, &e_vec)?;
        check_finite("E", e_mat.iter())?;
        check_finite("e", e_vec.iter())?;
        self.e_mat = stack_rows(&self.e_mat, &e_mat);
        self.e_vec = stack_vec(&self.e_vec, &e_vec);
        Ok(self)
    }

    /// Adds `lo <= x <= hi` as inequality rows; infinite bounds are skipped.
    pub fn with_bounds(self, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<Self, QpError> {
        let n = self.dim();
        for (what, v) in [("lower bound", lo), ("upper bound", hi)] {
            if v.len() != n {
                return Err(QpError::DimensionMismatch {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
        }
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for i in 0..n {
            if hi[i].is_finite() {
                rows.push((i, 1.0));
                rhs.push(hi[i]);
            }
            if lo[i].is_finite() {
                rows.push((i, -1.0));
                rhs.push(-lo[i]);
            }
        }
        let mut g = DMatrix::zeros(rows.len(), n);
        for (r, (i, s)) in rows.iter().enumerate() {
            g[(r, *i)] = *s;
        }
        self.with_inequalities(g, DVector::from_vec(rhs))
    }

    fn check_rows(&self, what: &'static str, m: &DMatrix<f64>, v: &DVector<f64>) -> Result<(), QpError> {
        if m.ncols() != self.dim() {
            return Err(QpError::DimensionMismatch {
                what,
                expected: self.dim(),
                got: m.ncols(),
            });
        }
        if m.nrows() != v.len() {
            return Err(QpError::DimensionMismatch {
                what,
                expected: m.nrows(),
                got: v.len(),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn inequalities(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.g_mat, &self.g_vec)
    }

    pub fn equalities(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.e_mat, &self.e_vec)
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// `max(max(Gx - g, 0), |Ex - e|)`.
    pub fn primal_residual(&self, x: &DVector<f64>) -> f64 {
        let ineq = (&self.g_mat * x - &self.g_vec).iter().fold(0.0f64, |a, v| a.max(*v));
        let eq = (&self.e_mat * x - &self.e_vec).amax();
        ineq.max(eq)
    }

    /// Same objective, scaled by `lambda`.
    pub fn scaled_objective(&self, lambda: f64) -> Self {
        Self {
            p: &self.p * lambda,
            q: &self.q * lambda,
            ..self.clone()
        }
    }
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

fn stack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    /// Multipliers of `Gx <= g`, nonnegative at optimality.
    pub y_ineq: DVector<f64>,
    /// Multipliers of `Ex = e`.
    pub y_eq: DVector<f64>,
    pub iterations: usize,
    pub objective: f64,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            x: self.x.clone(),
            y_ineq: self.y_ineq.clone(),
            y_eq: self.y_eq.clone(),
        }
    }
}

/// Primal and dual starting point for a re-solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y_ineq: DVector<f64>,
    pub y_eq: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Iterations between polishing attempts and infeasibility checks.
    pub check_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            check_every: 25,
        }
    }
}

impl QpSettings {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

/// Solves with default settings.
pub fn solve(qp: &QuadraticProgram, tol: f64, max_iter: usize) -> QpSolution {
    solve_with(qp, &QpSettings::default().with_tol(tol).with_max_iter(max_iter), None)
}

/// Equilibrated copy of the problem in the `l <= Cx <= u` form used by ADMM,
/// with `C = [E; G]`.
struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    c: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
    n_eq: usize,
}

impl Scaled {
    fn build(qp: &QuadraticProgram) -> Self {
        let n = qp.dim();
        let n_eq = qp.e_mat.nrows();
        let m = n_eq + qp.g_mat.nrows();
        let mut c = stack_rows(&qp.e_mat, &qp.g_mat);
        let mut l = stack_vec(&qp.e_vec, &DVector::from_element(qp.g_mat.nrows(), f64::NEG_INFINITY));
        let mut u = stack_vec(&qp.e_vec, &qp.g_vec);
        let mut p = qp.p.clone();
        let mut q = qp.q.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
        for _ in 0..15 {
            let dd = DVector::from_fn(n, |j, _| {
                let col = p.column(j).amax().max(if m > 0 { c.column(j).amax() } else { 0.0 });
                1.0 / clamp(col).sqrt()
            });
            let de = DVector::from_fn(m, |i, _| 1.0 / clamp(c.row(i).amax()).sqrt());
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= dd[i] * dd[j];
                }
                q[j] *= dd[j];
                for i in 0..m {
                    c[(i, j)] *= dd[j];
                }
            }
            for i in 0..m {
                for j in 0..n {
                    c[(i, j)] *= de[i];
                }
                l[i] *= de[i];
                u[i] *= de[i];
            }
            d.component_mul_assign(&dd);
            e.component_mul_assign(&de);
        }
        let mean_col = if n > 0 {
            (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
        } else {
            1.0
        };
        let cost = 1.0 / clamp(mean_col.max(q.amax()));
        p *= cost;
        q *= cost;
        Self {
            p,
            q,
            c,
            l,
            u,
            d,
            e,
            cost,
            n_eq,
        }
    }
}

/// Full solver entry point with optional warm start.
pub fn solve_with(qp: &QuadraticProgram, settings: &QpSettings, warm: Option<&WarmStart>) -> QpSolution {
    let n = qp.dim();
    let n_eq = qp.e_mat.nrows();
    let n_in = qp.g_mat.nrows();
    let m = n_eq + n_in;
    let tol = settings.tol;

    let sc = Scaled::build(qp);
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    if let Some(w) = warm {
        if w.x.len() == n && w.x.iter().all(|v| v.is_finite()) {
            x = w.x.component_div(&sc.d);
        }
        if w.y_eq.len() == n_eq && w.y_ineq.len() == n_in {
            let yy = stack_vec(&w.y_eq, &w.y_ineq);
            if yy.iter().all(|v| v.is_finite()) {
                y = yy.component_div(&sc.e) * sc.cost;
            }
        }
    }
    let mut z = clip(&(&sc.c * &x), &sc.l, &sc.u);

    if let Some(sol) = polish(qp, &x.component_mul(&sc.d), &unscale_y(&y, &sc), tol, 0) {
        return sol;
    }

    let mut rho = settings.rho;
    let rho_vec = |rho: f64| -> DVector<f64> {
        DVector::from_fn(m, |i, _| {
            if i < sc.n_eq || (sc.u[i] - sc.l[i]).abs() < 1e-12 {
                rho * 1e3
            } else {
                rho
            }
        })
    };
    let mut rv = rho_vec(rho);
    let mut chol = factor(&sc, &rv, settings.sigma);
    let mut prev_y = y.clone();
    let alpha = settings.alpha;

    for it in 1..=settings.max_iter {
        let Some(ch) = chol.as_ref() else { break };
        let rhs = &x * settings.sigma - &sc.q + sc.c.transpose() * (rv.component_mul(&z) - &y);
        let xt = ch.solve(&rhs);
        let zt = &sc.c * &xt;
        let x_new = &xt * alpha + &x * (1.0 - alpha);
        let z_relax = &zt * alpha + &z * (1.0 - alpha);
        let z_new = clip(&(&z_relax + y.component_div(&rv)), &sc.l, &sc.u);
        y += rv.component_mul(&(&z_relax - &z_new));
        x = x_new;
        z = z_new;

        if it % settings.check_every != 0 && it != settings.max_iter {
            continue;
        }
        let x_un = x.component_mul(&sc.d);
        let y_un = unscale_y(&y, &sc);
        if let Some(sol) = polish(qp, &x_un, &y_un, tol, it) {
            return sol;
        }
        let dy = &y - &prev_y;
        if certifies_infeasible(&sc, &dy) {
            return QpSolution {
                objective: qp.objective(&x_un),
                x: x_un,
                status: QpStatus::Infeasible,
                y_ineq: y_un.rows(n_eq, n_in).into_owned(),
                y_eq: y_un.rows(0, n_eq).into_owned(),
                iterations: it,
            };
        }
        prev_y = y.clone();
        // adaptive step size on scaled residuals
        let cx = &sc.c * &x;
        let r_prim = (&cx - &z).amax();
        let px = &sc.p * &x;
        let cty = sc.c.transpose() * &y;
        let r_dual = (&px + &sc.q + &cty).amax();
        let np = cx.amax().max(z.amax()).max(1e-10);
        let nd = px.amax().max(cty.amax()).max(sc.q.amax()).max(1e-10);
        let ratio = ((r_prim / np) / (r_dual / nd).max(1e-12)).sqrt();
        let new_rho = (rho * ratio).clamp(1e-6, 1e6);
        if m > 0 && (new_rho > 5.0 * rho || new_rho < rho / 5.0) {
            rho = new_rho;
            rv = rho_vec(rho);
            chol = factor(&sc, &rv, settings.sigma);
        }
    }

    let x_un = x.component_mul(&sc.d);
    let y_un = unscale_y(&y, &sc);
    let status = if kkt_residual(qp, &x_un, &y_un) <= tol && qp.primal_residual(&x_un) <= tol {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIter
    };
    QpSolution {
        objective: qp.objective(&x_un),
        x: x_un,
        status,
        y_ineq: y_un.rows(n_eq, n_in).into_owned(),
        y_eq: y_un.rows(0, n_eq).into_owned(),
        iterations: settings.max_iter,
    }
}

fn unscale_y(y: &DVector<f64>, sc: &Scaled) -> DVector<f64> {
    y.component_mul(&sc.e) / sc.cost
}

fn clip(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].max(lo[i]).min(hi[i]))
}

fn factor(sc: &Scaled, rv: &DVector<f64>, sigma: f64) -> Option<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>> {
    let n = sc.p.nrows();
    let mut k = &sc.p + DMatrix::identity(n, n) * sigma;
    let mut rc = sc.c.clone();
    for (i, mut row) in rc.row_iter_mut().enumerate() {
        row *= rv[i];
    }
    k += sc.c.transpose() * rc;
    nalgebra::linalg::Cholesky::new(k)
}

fn certifies_infeasible(sc: &Scaled, dy: &DVector<f64>) -> bool {
    let norm = dy.amax();
    if norm < 1e-12 {
        return false;
    }
    let eps = 1e-6;
    if (sc.c.transpose() * dy).amax() > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let v = dy[i];
        if v > 0.0 {
            if !sc.u[i].is_finite() {
                if v > eps * norm {
                    return false;
                }
                continue;
            }
            support += sc.u[i] * v;
        } else if v < 0.0 {
            if !sc.l[i].is_finite() {
                if -v > eps * norm {
                    return false;
                }
                continue;
            }
            support += sc.l[i] * v;
        }
    }
    support < -eps * norm
}

/// `|Px + q + E'y_eq + G'y_in|_inf` for stacked `y = [y_eq; y_in]`.
fn kkt_residual(qp: &QuadraticProgram, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let n_eq = qp.e_mat.nrows();
    let n_in = qp.g_mat.nrows();
    let grad = &qp.p * x + &qp.q + qp.e_mat.transpose() * y.rows(0, n_eq) + qp.g_mat.transpose() * y.rows(n_eq, n_in);
    grad.amax()
}

/// Stationarity residual at `x` with the given multipliers, in original
/// units.
pub fn stationarity_residual(qp: &QuadraticProgram, sol: &QpSolution) -> f64 {
    kkt_residual(qp, &sol.x, &stack_vec(&sol.y_eq, &sol.y_ineq))
}

/// Active-set refinement starting from an approximate primal-dual pair.
/// Returns a solution only when it passes every KKT check at `tol`.
fn polish(qp: &QuadraticProgram, x: &DVector<f64>, y: &DVector<f64>, tol: f64, iterations: usize) -> Option<QpSolution> {
    let n_eq = qp.e_mat.nrows();
    let n_in = qp.g_mat.nrows();
    let slack = &qp.g_vec - &qp.g_mat * x;
    let mut active: Vec<bool> = (0..n_in)
        .map(|i| slack[i] < y[n_eq + i].max(0.0) || slack[i] < tol)
        .collect();
    let mut best: Option<(DVector<f64>, DVector<f64>)> = None;
    for _ in 0..(2 * n_in + 5).min(60) {
        let idx: Vec<usize> = (0..n_in).filter(|&i| active[i]).collect();
        let (xs, lam) = solve_kkt(qp, &idx)?;
        let mut y_in = DVector::zeros(n_in);
        for (k, &i) in idx.iter().enumerate() {
            y_in[i] = lam[n_eq + k];
        }
        let y_eq = lam.rows(0, n_eq).into_owned();
        let viol = &qp.g_mat * &xs - &qp.g_vec;
        let worst_viol = (0..n_in)
            .filter(|&i| !active[i] && viol[i] > 0.1 * tol)
            .max_by(|&a, &b| viol[a].total_cmp(&viol[b]));
        let worst_mult = idx
            .iter()
            .copied()
            .filter(|&i| y_in[i] < -0.1 * tol)
            .min_by(|&a, &b| y_in[a].total_cmp(&y_in[b]));
        match (worst_viol, worst_mult) {
            (None, None) => {
                best = Some((xs, stack_vec(&y_eq, &y_in)));
                break;
            }
            (Some(_), _) => {
                // add every violated constraint at once; they are cheap to drop later
                for j in 0..n_in {
                    if !active[j] && viol[j] > 0.1 * tol {
                        active[j] = true;
                    }
                }
            }
            (None, Some(i)) => active[i] = false,
        }
    }
    let (xs, ys) = best?;
    let sol = QpSolution {
        objective: qp.objective(&xs),
        y_ineq: ys.rows(n_eq, n_in).into_owned(),
        y_eq: ys.rows(0, n_eq).into_owned(),
        x: xs,
        status: QpStatus::Optimal,
        iterations,
    };
    let ok = qp.primal_residual(&sol.x) <= tol
        && stationarity_residual(qp, &sol) <= tol
        && sol.y_ineq.iter().all(|v| *v >= -tol)
        && {
            let slack = &qp.g_vec - &qp.g_mat * &sol.x;
            (0..n_in).all(|i| (sol.y_ineq[i] * slack[i]).abs() <= tol)
        };
    ok.then_some(sol)
}

/// Solves the KKT system with the given active inequality rows, using a
/// regularized factorization and iterative refinement.
fn solve_kkt(qp: &QuadraticProgram, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = qp.dim();
    let n_eq = qp.e_mat.nrows();
    let k = n_eq + active.len();
    let mut a = DMatrix::zeros(k, n);
    let mut b = DVector::zeros(k);
    a.rows_mut(0, n_eq).copy_from(&qp.e_mat);
    b.rows_mut(0, n_eq).copy_from(&qp.e_vec);
    for (r, &i) in active.iter().enumerate() {
        a.set_row(n_eq + r, &qp.g_mat.row(i));
        b[n_eq + r] = qp.g_vec[i];
    }
    let dim = n + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
    kkt.view_mut((0, n), (n, k)).copy_from(&a.transpose());
    kkt.view_mut((n, 0), (k, n)).copy_from(&a);
    let scale = qp.p.amax().max(a.amax()).max(1.0);
    let delta = 1e-9 * scale;
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += delta;
    }
    for i in n..dim {
        reg[(i, i)] -= delta;
    }
    let lu = reg.lu();
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&qp.q));
    rhs.rows_mut(n, k).copy_from(&b);
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..10 {
        let res = &rhs - &kkt * &sol;
        if res.amax() < 1e-14 * scale {
            break;
        }
        sol += lu.solve(&res)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    // projected gradient with a 1/L step, run to a fixed-point residual of 1e-12
    fn projected_gradient(p: &DMatrix<f64>, q: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
        let l = p.clone().symmetric_eigen().eigenvalues.max();
        let mut x = DVector::zeros(q.len());
        for _ in 0..200_000 {
            let g = p * &x + q;
            let nx = clip(&(&x - g / l), lo, hi);
            let d = (&nx - &x).amax();
            x = nx;
            if d < 1e-13 {
                break;
            }
        }
        x
    }

    #[test]
    fn active_lower_bound() {
        let qp = QuadraticProgram::new(DMatrix::from_element(1, 1, 2.0), dv(&[0.0]))
            .unwrap()
            .with_inequalities(DMatrix::from_element(1, 1, -1.0), dv(&[-1.0]))
            .unwrap();
        let s = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.x[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.y_ineq[0], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn unconstrained_projection() {
        let c = dv(&[1.0, -2.0, 3.5]);
        let qp = QuadraticProgram::new(DMatrix::identity(3, 3) * 2.0, &c * -2.0).unwrap();
        let s = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((&s.x - &c).amax() < 1e-12);
    }

    #[test]
    fn equality_constrained() {
        // min x^2 + y^2 s.t. x + y = 1
        let qp = QuadraticProgram::new(DMatrix::identity(2, 2) * 2.0, dv(&[0.0, 0.0]))
            .unwrap()
            .with_equalities(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), dv(&[1.0]))
            .unwrap();
        let s = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.x[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(s.x[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_is_reported() {
        let qp = QuadraticProgram::new(DMatrix::identity(1, 1), dv(&[0.0]))
            .unwrap()
            .with_inequalities(DMatrix::from_row_slice(2, 1, &[1.0, -1.0]), dv(&[-1.0, -1.0]))
            .unwrap();
        let s = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
        assert_eq!(s.status, QpStatus::Infeasible);
        let eq = QuadraticProgram::new(DMatrix::identity(2, 2), dv(&[0.0, 0.0]))
            .unwrap()
            .with_equalities(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]), dv(&[1.0, 2.0]))
            .unwrap();
        assert_eq!(solve(&eq, DEFAULT_TOL, DEFAULT_MAX_ITER).status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            QuadraticProgram::new(DMatrix::from_element(1, 1, f64::NAN), dv(&[0.0])),
            Err(QpError::NonFinite("P"))
        );
        assert!(matches!(
            QuadraticProgram::new(DMatrix::from_element(1, 1, -1.0), dv(&[0.0])),
            Err(QpError::NotConvex(_))
        ));
        assert!(matches!(
            QuadraticProgram::new(DMatrix::identity(2, 2), dv(&[0.0])),
            Err(QpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn psd_cost_with_linear_term() {
        // flat direction resolved by the constraint
        let qp = QuadraticProgram::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), dv(&[0.0, -1.0]))
            .unwrap()
            .with_bounds(&dv(&[-5.0, -5.0]), &dv(&[5.0, 2.0]))
            .unwrap();
        let s = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.x[1], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.x[0], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_pd(&mut rng, 6);
            let q = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
            let lo = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..0.0));
            let hi = DVector::from_fn(6, |_, _| rng.gen_range(0.0..1.0));
            let qp = QuadraticProgram::new(p.clone(), q.clone()).unwrap().with_bounds(&lo, &hi).unwrap();
            let s = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
            assert_eq!(s.status, QpStatus::Optimal);
            let oracle = projected_gradient(&p, &q, &lo, &hi);
            assert!((&s.x - &oracle).norm() < 1e-5);
            assert!(stationarity_residual(&qp, &s) <= DEFAULT_TOL);
        }
    }

    #[test]
    fn beats_sampled_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let p = random_pd(&mut rng, 4);
            let q = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
            let g = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
            let h = DVector::from_fn(6, |_, _| rng.gen_range(0.1..1.0));
            let qp = QuadraticProgram::new(p, q).unwrap().with_inequalities(g.clone(), h.clone()).unwrap();
            let s = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
            assert_eq!(s.status, QpStatus::Optimal);
            let mut tried = 0;
            while tried < 1000 {
                let x = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
                if (&g * &x - &h).max() <= 0.0 {
                    tried += 1;
                    assert!(s.objective <= qp.objective(&x) + DEFAULT_TOL);
                } else {
                    // shrink toward the origin, which is always feasible here
                    let x = x * rng.gen_range(0.0..0.2);
                    if (&g * &x - &h).max() <= 0.0 {
                        tried += 1;
                        assert!(s.objective <= qp.objective(&x) + DEFAULT_TOL);
                    }
                }
            }
        }
    }

    #[test]
    fn objective_scaling_keeps_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_pd(&mut rng, 5);
        let q = DVector::from_fn(5, |_, _| rng.gen_range(-3.0..3.0));
        let b = DVector::from_element(5, 0.3);
        let qp = QuadraticProgram::new(p, q).unwrap().with_bounds(&-&b, &b).unwrap();
        let base = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).x;
        for lambda in [1e-3, 0.5, 7.0, 1e3] {
            let s = solve(&qp.scaled_objective(lambda), DEFAULT_TOL, DEFAULT_MAX_ITER);
            assert!((&s.x - &base).amax() < 1e-6);
        }
    }

    #[test]
    fn warm_start_keeps_optimum_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_pd(&mut rng, 6);
        let q = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
        let g = DMatrix::from_fn(8, 6, |_, _| rng.gen_range(-1.0..1.0));
        let h = DVector::from_fn(8, |_, _| rng.gen_range(0.1..1.0));
        let qp = QuadraticProgram::new(p, q).unwrap().with_inequalities(g, h).unwrap();
        let cold = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
        let again = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
        assert_eq!(cold, again);
        let warm = solve_with(&qp, &QpSettings::default(), Some(&cold.warm_start()));
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!((&warm.x - &cold.x).amax() < 1e-6);
        assert_eq!(warm.iterations, 0);
    }

    #[test]
    fn degenerate_duplicate_constraints() {
        let qp = QuadraticProgram::new(DMatrix::identity(2, 2), dv(&[-1.0, -1.0]))
            .unwrap()
            .with_inequalities(DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0]), dv(&[1.0, 1.0, 2.0]))
            .unwrap();
        let s = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.x[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(s.x[1], 0.5, epsilon = 1e-7);
    }
}
