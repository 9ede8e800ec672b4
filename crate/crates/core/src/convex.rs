//! Convex program representation and the solver contract.
//!
//! Programs are built from named variable blocks, objective [`Term`]s
//! (linear, squared-affine, squared-hinge, linear-hinge) and [`Constraint`]s
//! (equalities, inequalities, boxes, fixed values and rotated second-order
//! cones). Hinge terms are lowered to smooth form through slack epigraphs
//! before the program is handed to the interior-point backend (Clarabel).
//!
//! Complex quantities never cross this boundary: callers work in real and
//! imaginary coordinates.

use std::collections::BTreeMap;
use std::fmt;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use thiserror::Error;

/// Default tolerance for small (local-controller sized) programs.
pub const TOL_SMALL: f64 = 1e-6;
/// Default tolerance for network-sized programs.
pub const TOL_LARGE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("negative or non-finite weight {weight} on objective term {term}")]
    NegativeWeight { term: usize, weight: f64 },
    #[error("term {0} is not a hinge term")]
    NotAHinge(usize),
    #[error("program is infeasible")]
    Infeasible,
    #[error("program is unbounded")]
    Unbounded,
    #[error("solver stopped without reaching tolerance {tol:e} after {iterations} iterations (residual {residual:e})")]
    MaxIter {
        tol: f64,
        iterations: u32,
        residual: f64,
    },
    #[error("numerical failure in the solver backend: {0}")]
    Numerical(String),
}

/// A contiguous run of scalar variables sharing a name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl VarBlock {
    pub fn at(&self, i: usize) -> usize {
        debug_assert!(i < self.len, "{}[{i}] out of range", self.name);
        self.offset + i
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Affine expression `Σ coef·x[var] + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(v: usize) -> Self {
        LinExpr {
            terms: vec![(v, 1.0)],
            constant: 0.0,
        }
    }

    pub fn constant(c: f64) -> Self {
        LinExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn plus(mut self, v: usize, coef: f64) -> Self {
        self.add(v, coef);
        self
    }

    pub fn offset(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn add(&mut self, v: usize, coef: f64) {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) {
        for &(v, c) in &other.terms {
            self.add(v, c * scale);
        }
        self.constant += other.constant * scale;
    }

    pub fn scaled(&self, s: f64) -> LinExpr {
        let mut e = LinExpr::new();
        e.add_expr(self, s);
        e
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>() + self.constant
    }

    fn max_var(&self) -> Option<usize> {
        self.terms.iter().map(|&(v, _)| v).max()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    /// `expr`
    Linear { expr: LinExpr },
    /// `weight · expr²`
    Quadratic { weight: f64, expr: LinExpr },
    /// `weight · max(expr, 0)²`
    SquaredHinge { weight: f64, expr: LinExpr },
    /// `weight · max(expr, 0)`
    LinearHinge { weight: f64, expr: LinExpr },
}

impl Term {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Term::Linear { expr } => expr.eval(x),
            Term::Quadratic { weight, expr } => weight * expr.eval(x).powi(2),
            Term::SquaredHinge { weight, expr } => weight * expr.eval(x).max(0.0).powi(2),
            Term::LinearHinge { weight, expr } => weight * expr.eval(x).max(0.0),
        }
    }

    fn weight(&self) -> f64 {
        match self {
            Term::Linear { .. } => 0.0,
            Term::Quadratic { weight, .. }
            | Term::SquaredHinge { weight, .. }
            | Term::LinearHinge { weight, .. } => *weight,
        }
    }

    fn expr(&self) -> &LinExpr {
        match self {
            Term::Linear { expr }
            | Term::Quadratic { expr, .. }
            | Term::SquaredHinge { expr, .. }
            | Term::LinearHinge { expr, .. } => expr,
        }
    }

    pub fn is_hinge(&self) -> bool {
        matches!(self, Term::SquaredHinge { .. } | Term::LinearHinge { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// `expr = 0`
    Equality(LinExpr),
    /// `expr ≤ 0`
    LessEqual(LinExpr),
    /// `lo ≤ x[var] ≤ hi`; infinite sides are ignored.
    Box { var: usize, lo: f64, hi: f64 },
    /// `x[var] = value` (terminal and pinning conditions).
    Fix { var: usize, value: f64 },
    /// `u·v ≥ ‖z‖²` with `u, v ≥ 0`.
    RotatedCone {
        u: LinExpr,
        v: LinExpr,
        z: Vec<LinExpr>,
    },
}

impl Constraint {
    /// Amount by which `x` violates the constraint (zero when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        match self {
            Constraint::Equality(e) => e.eval(x).abs(),
            Constraint::LessEqual(e) => e.eval(x).max(0.0),
            Constraint::Box { var, lo, hi } => (lo - x[*var]).max(x[*var] - hi).max(0.0),
            Constraint::Fix { var, value } => (x[*var] - value).abs(),
            Constraint::RotatedCone { u, v, z } => {
                let (u, v) = (u.eval(x), v.eval(x));
                let zz: f64 = z.iter().map(|e| e.eval(x).powi(2)).sum();
                let soc = ((4.0 * zz + (u - v).powi(2)).sqrt() - (u + v)).max(0.0);
                soc.max(-u).max(-v).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Primal values for every variable of the lowered program (original
    /// variables first, epigraph slacks after).
    pub values: Vec<f64>,
    /// Dual values of the compiled cone rows.
    pub duals: Vec<f64>,
    pub objective_value: f64,
    pub status: Status,
    pub kkt_residual: f64,
    pub iterations: u32,
}

impl Solution {
    pub fn value(&self, v: usize) -> f64 {
        self.values[v]
    }

    pub fn block(&self, b: &VarBlock) -> &[f64] {
        &self.values[b.indices()]
    }

    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConvexProgram {
    pub blocks: Vec<VarBlock>,
    pub terms: Vec<Term>,
    pub constraints: Vec<Constraint>,
    n_vars: usize,
}

impl ConvexProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn add_block(&mut self, name: impl Into<String>, len: usize) -> VarBlock {
        let b = VarBlock {
            name: name.into(),
            offset: self.n_vars,
            len,
        };
        self.n_vars += len;
        self.blocks.push(b.clone());
        b
    }

    pub fn block(&self, name: &str) -> Option<&VarBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn add_term(&mut self, t: Term) {
        self.terms.push(t);
    }

    pub fn add_constraint(&mut self, c: Constraint) {
        self.constraints.push(c);
    }

    pub fn count_cones(&self) -> usize {
        self.constraints
            .iter()
            .filter(|c| matches!(c, Constraint::RotatedCone { .. }))
            .count()
    }

    /// Objective of the program as written (hinges evaluated directly).
    pub fn objective(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x)).sum()
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.violation(x))
            .fold(0.0, f64::max)
    }

    /// Checks references, weights and box orderings.
    pub fn check(&self) -> Result<(), SolveError> {
        let n = self.n_vars;
        let oob = |e: &LinExpr| e.max_var().is_some_and(|v| v >= n);
        for (i, t) in self.terms.iter().enumerate() {
            let w = t.weight();
            if !w.is_finite() || w < 0.0 {
                return Err(SolveError::NegativeWeight { term: i, weight: w });
            }
            if oob(t.expr()) {
                return Err(SolveError::Malformed(format!("term {i} references an undeclared variable")));
            }
        }
        for (i, c) in self.constraints.iter().enumerate() {
            let bad = match c {
                Constraint::Equality(e) | Constraint::LessEqual(e) => oob(e),
                Constraint::Box { var, lo, hi } => {
                    if lo > hi || lo.is_nan() || hi.is_nan() {
                        return Err(SolveError::Malformed(format!(
                            "constraint {i}: box [{lo}, {hi}] is empty"
                        )));
                    }
                    *var >= n
                }
                Constraint::Fix { var, value } => *var >= n || !value.is_finite(),
                Constraint::RotatedCone { u, v, z } => oob(u) || oob(v) || z.iter().any(oob),
            };
            if bad {
                return Err(SolveError::Malformed(format!(
                    "constraint {i} references an undeclared variable"
                )));
            }
        }
        Ok(())
    }

    /// Replaces hinge term `idx` by a slack `s ≥ 0, s ≥ expr` carrying
    /// `weight·s²` (squared hinge) or `weight·s` (linear hinge).
    pub fn add_hinge_epigraph(&self, idx: usize) -> Result<ConvexProgram, SolveError> {
        let term = self.terms.get(idx).ok_or(SolveError::NotAHinge(idx))?;
        let w = term.weight();
        if !w.is_finite() || w < 0.0 {
            return Err(SolveError::NegativeWeight { term: idx, weight: w });
        }
        let mut out = self.clone();
        let (squared, expr) = match term {
            Term::SquaredHinge { expr, .. } => (true, expr.clone()),
            Term::LinearHinge { expr, .. } => (false, expr.clone()),
            _ => return Err(SolveError::NotAHinge(idx)),
        };
        let s = out.add_block(format!("slack[{idx}]"), 1).offset;
        out.constraints.push(Constraint::Box {
            var: s,
            lo: 0.0,
            hi: f64::INFINITY,
        });
        out.constraints
            .push(Constraint::LessEqual(expr.plus(s, -1.0)));
        out.terms[idx] = if squared {
            Term::Quadratic {
                weight: w,
                expr: LinExpr::var(s),
            }
        } else {
            Term::Linear {
                expr: LinExpr::var(s).scaled(w),
            }
        };
        Ok(out)
    }

    /// Lowers every hinge term. Slacks are appended in term order.
    pub fn lower_hinges(&self) -> Result<ConvexProgram, SolveError> {
        self.check()?;
        let mut out = self.clone();
        let mut slack_terms = Vec::new();
        for (i, t) in self.terms.iter().enumerate() {
            let (squared, w, expr) = match t {
                Term::SquaredHinge { weight, expr } => (true, *weight, expr),
                Term::LinearHinge { weight, expr } => (false, *weight, expr),
                _ => continue,
            };
            slack_terms.push((i, squared, w, expr.clone()));
        }
        if slack_terms.is_empty() {
            return Ok(out);
        }
        let slacks = out.add_block("hinge_slack", slack_terms.len());
        for (k, (i, squared, w, expr)) in slack_terms.into_iter().enumerate() {
            let s = slacks.at(k);
            out.constraints.push(Constraint::Box {
                var: s,
                lo: 0.0,
                hi: f64::INFINITY,
            });
            out.constraints.push(Constraint::LessEqual(expr.plus(s, -1.0)));
            out.terms[i] = if squared {
                Term::Quadratic {
                    weight: w,
                    expr: LinExpr::var(s),
                }
            } else {
                Term::Linear {
                    expr: LinExpr::var(s).scaled(w),
                }
            };
        }
        Ok(out)
    }

    /// Solves the program to tolerance `tol` (scaled KKT residual).
    ///
    /// Returns `Ok` with [`Status::Optimal`] or, when the backend stops
    /// short, [`Status::MaxIter`]; infeasible and unbounded programs are
    /// errors.
    pub fn solve(&self, tol: f64, max_iter: u32) -> Result<Solution, SolveError> {
        let lowered = self.lower_hinges()?;
        let std = StandardForm::compile(&lowered);
        let inner_tol = (tol * 1e-2).clamp(1e-12, 1e-9);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(max_iter)
            .tol_gap_abs(inner_tol)
            .tol_gap_rel(inner_tol * 1e-3)
            .tol_feas(inner_tol)
            .tol_ktratio(1e-7)
            .build()
            .map_err(|e| SolveError::Numerical(format!("{e:?}")))?;
        let mut solver = DefaultSolver::new(&std.p, &std.q, &std.a, &std.b, &std.cones, settings)
            .map_err(|e| SolveError::Numerical(format!("{e:?}")))?;
        solver.solve();
        let raw = &solver.solution;
        match raw.status {
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                return Err(SolveError::Infeasible)
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                return Err(SolveError::Unbounded)
            }
            SolverStatus::NumericalError => {
                return Err(SolveError::Numerical("backend reported a numerical error".into()))
            }
            _ => {}
        }
        if raw.x.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::Numerical("non-finite iterate".into()));
        }
        let values = raw.x.clone();
        let duals = raw.z.clone();
        let kkt_residual = std.kkt_residual(&values, &duals);
        let backend_ok = matches!(raw.status, SolverStatus::Solved | SolverStatus::AlmostSolved);
        let status = if backend_ok && kkt_residual <= tol {
            Status::Optimal
        } else {
            Status::MaxIter
        };
        Ok(Solution {
            objective_value: self.objective(&values),
            values,
            duals,
            status,
            kkt_residual,
            iterations: raw.iterations,
        })
    }

    /// Re-evaluates the scaled KKT residual of `sol` against this program.
    pub fn kkt_residual(&self, sol: &Solution) -> Result<f64, SolveError> {
        let lowered = self.lower_hinges()?;
        let std = StandardForm::compile(&lowered);
        if sol.values.len() != std.q.len() || sol.duals.len() != std.b.len() {
            return Err(SolveError::Malformed("solution does not match program dimensions".into()));
        }
        Ok(std.kkt_residual(&sol.values, &sol.duals))
    }

    /// Variable values keyed by block name (original and slack blocks).
    pub fn values_by_name(&self, sol: &Solution) -> BTreeMap<String, Vec<f64>> {
        self.blocks
            .iter()
            .filter(|b| b.offset + b.len <= sol.values.len())
            .map(|b| (b.name.clone(), sol.block(b).to_vec()))
            .collect()
    }
}

fn fmt_expr(e: &LinExpr, names: &[(usize, &VarBlock)]) -> String {
    let mut s = String::new();
    for &(v, c) in &e.terms {
        let label = names
            .iter()
            .find(|(_, b)| b.indices().contains(&v))
            .map(|(_, b)| format!("{}[{}]", b.name, v - b.offset))
            .unwrap_or_else(|| format!("x{v}"));
        s.push_str(&format!("{c:+} {label} "));
    }
    if e.constant != 0.0 || s.is_empty() {
        s.push_str(&format!("{:+}", e.constant));
    }
    s.trim_end().to_string()
}

/// Text dump for offline inspection.
impl fmt::Display for ConvexProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<(usize, &VarBlock)> = self.blocks.iter().enumerate().collect();
        writeln!(f, "variables ({} scalars)", self.n_vars)?;
        for b in &self.blocks {
            writeln!(f, "  {}[{}] @ {}", b.name, b.len, b.offset)?;
        }
        writeln!(f, "minimize")?;
        for t in &self.terms {
            match t {
                Term::Linear { expr } => writeln!(f, "  ({})", fmt_expr(expr, &names))?,
                Term::Quadratic { weight, expr } => {
                    writeln!(f, "  {weight} * ({})^2", fmt_expr(expr, &names))?
                }
                Term::SquaredHinge { weight, expr } => {
                    writeln!(f, "  {weight} * max({}, 0)^2", fmt_expr(expr, &names))?
                }
                Term::LinearHinge { weight, expr } => {
                    writeln!(f, "  {weight} * max({}, 0)", fmt_expr(expr, &names))?
                }
            }
        }
        writeln!(f, "subject to")?;
        for c in &self.constraints {
            match c {
                Constraint::Equality(e) => writeln!(f, "  {} == 0", fmt_expr(e, &names))?,
                Constraint::LessEqual(e) => writeln!(f, "  {} <= 0", fmt_expr(e, &names))?,
                Constraint::Box { var, lo, hi } => {
                    writeln!(f, "  {lo} <= {} <= {hi}", fmt_expr(&LinExpr::var(*var), &names))?
                }
                Constraint::Fix { var, value } => {
                    writeln!(f, "  {} == {value}", fmt_expr(&LinExpr::var(*var), &names))?
                }
                Constraint::RotatedCone { u, v, z } => {
                    let zs: Vec<String> = z.iter().map(|e| fmt_expr(e, &names)).collect();
                    writeln!(
                        f,
                        "  ({}) * ({}) >= |[{}]|^2",
                        fmt_expr(u, &names),
                        fmt_expr(v, &names),
                        zs.join(", ")
                    )?
                }
            }
        }
        Ok(())
    }
}

/// `min ½xᵀPx + qᵀx  s.t.  Ax + s = b, s ∈ K` with K = zero × nonneg × SOC….
struct StandardForm {
    p: CscMatrix<f64>,
    q: Vec<f64>,
    a: CscMatrix<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    /// (kind, start, len) per cone block for residual evaluation.
    layout: Vec<(ConeKind, usize, usize)>,
    p_dense_rows: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Copy, PartialEq)]
enum ConeKind {
    Zero,
    Nonneg,
    Soc,
}

impl StandardForm {
    fn compile(prog: &ConvexProgram) -> Self {
        let n = prog.n_vars();
        let mut q = vec![0.0; n];
        let mut p_trip: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for t in &prog.terms {
            match t {
                Term::Linear { expr } => {
                    for &(v, c) in &expr.terms {
                        q[v] += c;
                    }
                }
                Term::Quadratic { weight, expr } => {
                    // w (aᵀx + b)² = ½ xᵀ(2w aaᵀ)x + 2wb aᵀx + const
                    let a = merge(&expr.terms);
                    for (i, &(vi, ci)) in a.iter().enumerate() {
                        q[vi] += 2.0 * weight * expr.constant * ci;
                        for &(vj, cj) in &a[i..] {
                            let (r, c) = if vi <= vj { (vi, vj) } else { (vj, vi) };
                            *p_trip.entry((r, c)).or_insert(0.0) += 2.0 * weight * ci * cj;
                        }
                    }
                }
                _ => unreachable!("hinges are lowered before compilation"),
            }
        }

        let mut zero_rows: Vec<(LinExpr, f64)> = Vec::new();
        let mut nonneg_rows: Vec<(LinExpr, f64)> = Vec::new();
        let mut soc_blocks: Vec<Vec<(LinExpr, f64)>> = Vec::new();
        // each row encodes s = b − a·x; push (a, b)
        let row = |e: &LinExpr, sign: f64| -> (LinExpr, f64) {
            // s = sign·e(x) = sign·(aᵀx + c)  ⇒  A = −sign·a, b = sign·c
            (e.scaled(-sign).offset(-e.constant * -sign), sign * e.constant)
        };
        for c in &prog.constraints {
            match c {
                Constraint::Equality(e) => zero_rows.push(row(e, 1.0)),
                Constraint::LessEqual(e) => nonneg_rows.push(row(e, -1.0)),
                Constraint::Fix { var, value } => {
                    zero_rows.push(row(&LinExpr::var(*var).offset(-value), 1.0))
                }
                Constraint::Box { var, lo, hi } => {
                    if lo == hi {
                        zero_rows.push(row(&LinExpr::var(*var).offset(-lo), 1.0));
                        continue;
                    }
                    if lo.is_finite() {
                        nonneg_rows.push(row(&LinExpr::var(*var).offset(-lo), 1.0));
                    }
                    if hi.is_finite() {
                        nonneg_rows.push(row(&LinExpr::var(*var).offset(-hi), -1.0));
                    }
                }
                Constraint::RotatedCone { u, v, z } => {
                    // u·v ≥ ‖z‖² ⇔ ‖(2z, u − v)‖ ≤ u + v
                    let mut sum = u.clone();
                    sum.add_expr(v, 1.0);
                    let mut diff = u.clone();
                    diff.add_expr(v, -1.0);
                    let mut blk = vec![row(&sum, 1.0), row(&diff, 1.0)];
                    for e in z {
                        blk.push(row(&e.scaled(2.0), 1.0));
                    }
                    soc_blocks.push(blk);
                }
            }
        }

        let mut rows: Vec<(LinExpr, f64)> = Vec::new();
        let mut cones = Vec::new();
        let mut layout = Vec::new();
        if !zero_rows.is_empty() {
            layout.push((ConeKind::Zero, rows.len(), zero_rows.len()));
            cones.push(SupportedConeT::ZeroConeT(zero_rows.len()));
            rows.extend(zero_rows);
        }
        if !nonneg_rows.is_empty() {
            layout.push((ConeKind::Nonneg, rows.len(), nonneg_rows.len()));
            cones.push(SupportedConeT::NonnegativeConeT(nonneg_rows.len()));
            rows.extend(nonneg_rows);
        }
        for blk in soc_blocks {
            layout.push((ConeKind::Soc, rows.len(), blk.len()));
            cones.push(SupportedConeT::SecondOrderConeT(blk.len()));
            rows.extend(blk);
        }

        let m = rows.len();
        let (mut ai, mut aj, mut av) = (Vec::new(), Vec::new(), Vec::new());
        let mut b = Vec::with_capacity(m);
        for (r, (expr, rhs)) in rows.iter().enumerate() {
            for (v, c) in merge(&expr.terms) {
                ai.push(r);
                aj.push(v);
                av.push(c);
            }
            b.push(*rhs);
        }
        let a = CscMatrix::new_from_triplets(m, n, ai, aj, av);
        let mut p_dense_rows = vec![Vec::new(); n];
        let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
        for (&(r, c), &v) in &p_trip {
            pi.push(r);
            pj.push(c);
            pv.push(v);
            p_dense_rows[r].push((c, v));
            if r != c {
                p_dense_rows[c].push((r, v));
            }
        }
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
        StandardForm {
            p,
            q,
            a,
            b,
            cones,
            layout,
            p_dense_rows,
        }
    }

    /// max of scaled primal infeasibility, dual residual and complementarity.
    fn kkt_residual(&self, x: &[f64], z: &[f64]) -> f64 {
        let m = self.b.len();
        let n = self.q.len();
        // s = b − Ax
        let mut ax = vec![0.0; m];
        let mut atz = vec![0.0; n];
        for col in 0..n {
            for k in self.a.colptr[col]..self.a.colptr[col + 1] {
                let r = self.a.rowval[k];
                let v = self.a.nzval[k];
                ax[r] += v * x[col];
                atz[col] += v * z[r];
            }
        }
        let s: Vec<f64> = self.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut prim: f64 = 0.0;
        for &(kind, start, len) in &self.layout {
            let blk = &s[start..start + len];
            let v = match kind {
                ConeKind::Zero => blk.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                ConeKind::Nonneg => blk.iter().fold(0.0f64, |m, v| m.max(-v)),
                ConeKind::Soc => {
                    let tail = blk[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                    (tail - blk[0]).max(0.0)
                }
            };
            prim = prim.max(v);
        }
        let norm_inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let px: Vec<f64> = self
            .p_dense_rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum())
            .collect();
        let dual = (0..n)
            .map(|i| (px[i] + self.q[i] + atz[i]).abs())
            .fold(0.0, f64::max);
        let gap: f64 = s.iter().zip(z).map(|(s, z)| s * z).sum::<f64>().abs();
        let obj: f64 = 0.5 * x.iter().zip(&px).map(|(x, p)| x * p).sum::<f64>()
            + x.iter().zip(&self.q).map(|(x, q)| x * q).sum::<f64>();

        let prim_scale = 1.0 + norm_inf(&self.b).max(norm_inf(&ax));
        let dual_scale = 1.0 + norm_inf(&px).max(norm_inf(&self.q)).max(norm_inf(&atz));
        let gap_scale = 1.0 + obj.abs();
        (prim / prim_scale)
            .max(dual / dual_scale)
            .max(gap / gap_scale)
    }
}

fn merge(terms: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut m: BTreeMap<usize, f64> = BTreeMap::new();
    for &(v, c) in terms {
        *m.entry(v).or_insert(0.0) += c;
    }
    m.into_iter().filter(|&(_, c)| c != 0.0).collect()
}
