//! Affine linear matrix inequalities and a small dense max-margin solver.
//!
//! A problem declares symmetric and rectangular matrix variables, builds
//! affine matrix expressions from them ([`AffineExpr`]), and asks for every
//! constraint expression `G_ℓ(y)` to satisfy `G_ℓ(y) ⪰ ε·I`.
//!
//! [`solve`] maximizes the common margin `t` in `G_ℓ(y) ⪰ t·I` with a
//! damped-Newton log-det barrier method:
//!
//! ```text
//! minimize  −s·t − Σ_ℓ log det(G_ℓ(y) − t·I) − log(R² − |y|²)
//! ```
//!
//! for an increasing schedule of `s`. The ball of radius `R` keeps the
//! iterates bounded when the margin is unbounded. Problems whose constraints
//! are all linear (no constant term) admit a scaling ray; for those the trace
//! of the first symmetric variable is pinned to its dimension.
//!
//! Every returned assignment is re-checked with [`crate::matcore::min_eig`];
//! the reported `achieved_margin` is that post-hoc value, not the barrier
//! iterate.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matcore::{min_eig, SymMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmiError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("solver breakdown: {0}")]
    SolverBreakdown(String),
    #[error("problem has {0} scalar unknowns; the dense solver supports at most {MAX_SCALARS}")]
    TooLarge(usize),
}

pub type Result<T> = std::result::Result<T, LmiError>;

pub const MAX_SCALARS: usize = 200;

/// Handle to a declared matrix variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Symmetric(usize),
    Rect(usize, usize),
}

impl VarKind {
    fn scalar_count(&self) -> usize {
        match *self {
            VarKind::Symmetric(n) => n * (n + 1) / 2,
            VarKind::Rect(r, c) => r * c,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match *self {
            VarKind::Symmetric(n) => (n, n),
            VarKind::Rect(r, c) => (r, c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VarDecl {
    name: String,
    kind: VarKind,
    offset: usize,
}

/// `C + Σ_k y_k M_k`, a matrix that is affine in the scalar unknowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineExpr {
    rows: usize,
    cols: usize,
    constant: DMatrix<f64>,
    terms: BTreeMap<usize, DMatrix<f64>>,
}

impl AffineExpr {
    pub fn constant(m: DMatrix<f64>) -> Self {
        AffineExpr { rows: m.nrows(), cols: m.ncols(), constant: m, terms: BTreeMap::new() }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    fn same_shape(&self, other: &AffineExpr, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LmiError::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &AffineExpr) -> Result<AffineExpr> {
        self.same_shape(other, "add")?;
        let mut out = self.clone();
        out.constant += &other.constant;
        for (k, m) in &other.terms {
            out.terms
                .entry(*k)
                .and_modify(|t| *t += m)
                .or_insert_with(|| m.clone());
        }
        Ok(out)
    }

    pub fn sub(&self, other: &AffineExpr) -> Result<AffineExpr> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, alpha: f64) -> AffineExpr {
        AffineExpr {
            rows: self.rows,
            cols: self.cols,
            constant: &self.constant * alpha,
            terms: self.terms.iter().map(|(k, m)| (*k, m * alpha)).collect(),
        }
    }

    /// `M · self`.
    pub fn lmul(&self, m: &DMatrix<f64>) -> Result<AffineExpr> {
        if m.ncols() != self.rows {
            return Err(LmiError::Shape(format!(
                "left multiply: {}x{} times {}x{}",
                m.nrows(),
                m.ncols(),
                self.rows,
                self.cols
            )));
        }
        Ok(AffineExpr {
            rows: m.nrows(),
            cols: self.cols,
            constant: m * &self.constant,
            terms: self.terms.iter().map(|(k, t)| (*k, m * t)).collect(),
        })
    }

    /// `self · M`.
    pub fn rmul(&self, m: &DMatrix<f64>) -> Result<AffineExpr> {
        if self.cols != m.nrows() {
            return Err(LmiError::Shape(format!(
                "right multiply: {}x{} times {}x{}",
                self.rows,
                self.cols,
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(AffineExpr {
            rows: self.rows,
            cols: m.ncols(),
            constant: &self.constant * m,
            terms: self.terms.iter().map(|(k, t)| (*k, t * m)).collect(),
        })
    }

    pub fn transpose(&self) -> AffineExpr {
        AffineExpr {
            rows: self.cols,
            cols: self.rows,
            constant: self.constant.transpose(),
            terms: self.terms.iter().map(|(k, t)| (*k, t.transpose())).collect(),
        }
    }

    /// Value at the scalar assignment `y`.
    pub fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (k, m) in &self.terms {
            out += m * y[*k];
        }
        out
    }

    fn max_asymmetry(&self) -> f64 {
        let asym = |m: &DMatrix<f64>| (m - m.transpose()).amax();
        self.terms.values().map(asym).fold(asym(&self.constant), f64::max)
    }

    /// Symmetric block matrix from its lower triangle.
    ///
    /// `lower[i][j]` (for `j ≤ i`) is block `(i, j)`; `None` is a zero block.
    /// Diagonal blocks must be present and fix the block sizes. The upper
    /// triangle is filled with transposes.
    pub fn sym_block(lower: &[Vec<Option<AffineExpr>>]) -> Result<AffineExpr> {
        let nb = lower.len();
        let mut sizes = Vec::with_capacity(nb);
        for (i, row) in lower.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(LmiError::Shape(format!("block row {i} must have {} entries", i + 1)));
            }
            let d = row[i]
                .as_ref()
                .ok_or_else(|| LmiError::Shape(format!("diagonal block {i} is missing")))?;
            if d.rows != d.cols {
                return Err(LmiError::Shape(format!("diagonal block {i} is not square")));
            }
            sizes.push(d.rows);
        }
        let mut grid: Vec<Vec<AffineExpr>> = Vec::with_capacity(nb);
        for i in 0..nb {
            let mut row = Vec::with_capacity(nb);
            for j in 0..nb {
                let block = if j <= i {
                    lower[i][j].clone()
                } else {
                    lower[j][i].as_ref().map(AffineExpr::transpose)
                };
                let block = block.unwrap_or_else(|| AffineExpr::zeros(sizes[i], sizes[j]));
                if block.shape() != (sizes[i], sizes[j]) {
                    return Err(LmiError::Shape(format!(
                        "block ({i},{j}) is {}x{}, expected {}x{}",
                        block.rows, block.cols, sizes[i], sizes[j]
                    )));
                }
                row.push(block);
            }
            grid.push(row);
        }
        Self::block(&grid)
    }

    /// Dense block matrix from a full grid of blocks.
    pub fn block(grid: &[Vec<AffineExpr>]) -> Result<AffineExpr> {
        let heights: Vec<usize> = grid.iter().map(|r| r.first().map_or(0, |b| b.rows)).collect();
        let widths: Vec<usize> = grid.first().map(|r| r.iter().map(|b| b.cols).collect()).unwrap_or_default();
        for (i, row) in grid.iter().enumerate() {
            if row.len() != widths.len() {
                return Err(LmiError::Shape(format!("block row {i} has {} blocks", row.len())));
            }
            for (j, b) in row.iter().enumerate() {
                if b.rows != heights[i] || b.cols != widths[j] {
                    return Err(LmiError::Shape(format!("block ({i},{j}) has inconsistent shape")));
                }
            }
        }
        let (rows, cols) = (heights.iter().sum(), widths.iter().sum());
        let mut out = AffineExpr::zeros(rows, cols);
        let mut r0 = 0;
        for (i, row) in grid.iter().enumerate() {
            let mut c0 = 0;
            for (j, b) in row.iter().enumerate() {
                out.constant.view_mut((r0, c0), (b.rows, b.cols)).copy_from(&b.constant);
                for (k, m) in &b.terms {
                    let t = out.terms.entry(*k).or_insert_with(|| DMatrix::zeros(rows, cols));
                    t.view_mut((r0, c0), (b.rows, b.cols)).copy_from(m);
                }
                c0 += widths[j];
            }
            r0 += heights[i];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Constraint {
    name: String,
    expr: AffineExpr,
}

/// A feasibility problem `G_ℓ(y) ⪰ margin·I` for all `ℓ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiProblem {
    vars: Vec<VarDecl>,
    n_scalars: usize,
    constraints: Vec<Constraint>,
    margin: f64,
}

impl Default for LmiProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl LmiProblem {
    pub const DEFAULT_MARGIN: f64 = 1e-6;

    pub fn new() -> Self {
        LmiProblem { vars: Vec::new(), n_scalars: 0, constraints: Vec::new(), margin: Self::DEFAULT_MARGIN }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    fn declare(&mut self, name: &str, kind: VarKind) -> Var {
        let v = Var(self.vars.len());
        self.vars.push(VarDecl { name: name.to_string(), kind, offset: self.n_scalars });
        self.n_scalars += kind.scalar_count();
        v
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> Var {
        self.declare(name, VarKind::Symmetric(n))
    }

    pub fn rect(&mut self, name: &str, rows: usize, cols: usize) -> Var {
        self.declare(name, VarKind::Rect(rows, cols))
    }

    pub fn n_scalars(&self) -> usize {
        self.n_scalars
    }

    pub fn constraint_count(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraint_names(&self) -> impl Iterator<Item = &str> {
        self.constraints.iter().map(|c| c.name.as_str())
    }

    pub fn var_name(&self, v: Var) -> &str {
        &self.vars[v.0].name
    }

    /// The variable as an affine expression.
    pub fn expr(&self, v: Var) -> AffineExpr {
        let decl = &self.vars[v.0];
        let (rows, cols) = decl.kind.shape();
        let mut terms = BTreeMap::new();
        match decl.kind {
            VarKind::Symmetric(n) => {
                let mut idx = decl.offset;
                for i in 0..n {
                    for j in i..n {
                        let mut m = DMatrix::zeros(n, n);
                        m[(i, j)] = 1.0;
                        m[(j, i)] = 1.0;
                        terms.insert(idx, m);
                        idx += 1;
                    }
                }
            }
            VarKind::Rect(r, c) => {
                for i in 0..r {
                    for j in 0..c {
                        let mut m = DMatrix::zeros(r, c);
                        m[(i, j)] = 1.0;
                        terms.insert(decl.offset + i * c + j, m);
                    }
                }
            }
        }
        AffineExpr { rows, cols, constant: DMatrix::zeros(rows, cols), terms }
    }

    /// Require `expr ⪰ margin·I`. The expression must be square and symmetric.
    pub fn add_constraint(&mut self, name: &str, expr: AffineExpr) -> Result<()> {
        if expr.rows != expr.cols || expr.rows == 0 {
            return Err(LmiError::Shape(format!(
                "constraint '{name}' is {}x{}, expected a non-empty square matrix",
                expr.rows, expr.cols
            )));
        }
        if let Some(k) = expr.terms.keys().next_back() {
            if *k >= self.n_scalars {
                return Err(LmiError::Shape(format!("constraint '{name}' references an undeclared variable")));
            }
        }
        let scale = expr.terms.values().map(|m| m.amax()).fold(expr.constant.amax(), f64::max).max(1.0);
        if expr.max_asymmetry() > 1e-12 * scale {
            return Err(LmiError::Shape(format!("constraint '{name}' is not symmetric")));
        }
        self.constraints.push(Constraint { name: name.to_string(), expr });
        Ok(())
    }

    /// All constraints have zero constant part.
    pub fn is_homogeneous(&self) -> bool {
        self.constraints.iter().all(|c| c.expr.constant.iter().all(|v| *v == 0.0))
    }

    /// Every constraint multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> LmiProblem {
        let mut p = self.clone();
        for c in &mut p.constraints {
            c.expr = c.expr.scale(alpha);
        }
        p
    }

    fn unpack(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, _)| self.expr(Var(i)).eval(y))
            .collect()
    }

    fn initial_point(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.n_scalars];
        for decl in &self.vars {
            if let VarKind::Symmetric(n) = decl.kind {
                let mut idx = decl.offset;
                for i in 0..n {
                    for j in i..n {
                        if i == j {
                            y[idx] = 1.0;
                        }
                        idx += 1;
                    }
                }
            }
        }
        y
    }

    /// Scalar coordinates of the diagonal of the first symmetric variable.
    fn pin_coordinates(&self) -> Option<(Vec<usize>, f64)> {
        let decl = self.vars.iter().find(|d| matches!(d.kind, VarKind::Symmetric(_)))?;
        let VarKind::Symmetric(n) = decl.kind else { unreachable!() };
        let mut diag = Vec::with_capacity(n);
        let mut idx = decl.offset;
        for i in 0..n {
            for j in i..n {
                if i == j {
                    diag.push(idx);
                }
                idx += 1;
            }
        }
        Some((diag, n as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LmiStatus {
    Feasible,
    Infeasible,
    MaxIterations,
}

/// Solver output together with the post-hoc verified margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiSolution {
    pub status: LmiStatus,
    /// Flat scalar assignment.
    pub assignment: Vec<f64>,
    /// Value of every declared variable, in declaration order.
    pub values: Vec<DMatrix<f64>>,
    /// `min_ℓ λ_min(G_ℓ(y*))`, recomputed independently of the solver.
    pub achieved_margin: f64,
    /// Smallest eigenvalue of each constraint at the returned assignment.
    pub constraint_margins: Vec<f64>,
    /// Upper bound on the optimal margin from the barrier duality gap.
    pub margin_upper_bound: f64,
    pub iterations: usize,
    /// `true` when the artificial bounding ball was active (margin unbounded).
    pub hit_bound: bool,
    pub normalized: bool,
}

impl LmiSolution {
    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.values[v.0]
    }

    pub fn sym_value(&self, v: Var) -> SymMatrix {
        SymMatrix::new(self.values[v.0].clone()).expect("finite symmetric variable")
    }

    pub fn is_feasible(&self) -> bool {
        self.status == LmiStatus::Feasible
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Cap on the total number of Newton steps.
    pub max_iter: usize,
    /// Target duality gap on the margin (relative to `max(1, |t|)`).
    pub tol: f64,
    /// Radius of the bounding ball on the unknowns.
    pub radius: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iter: 200, tol: 1e-9, radius: 1e6 }
    }
}

/// One constraint after the normalization substitution: `F₀ + Σ z_k F_k`.
struct Block {
    dim: usize,
    f0: DMatrix<f64>,
    fk: Vec<Option<DMatrix<f64>>>,
}

impl Block {
    fn eval(&self, z: &[f64], t: f64) -> DMatrix<f64> {
        let mut m = self.f0.clone();
        for (k, f) in self.fk.iter().enumerate() {
            if let Some(f) = f {
                m += f * z[k];
            }
        }
        for i in 0..self.dim {
            m[(i, i)] -= t;
        }
        m
    }
}

/// Map from reduced coordinates `z` to the problem's scalars `y = y₀ + N z`.
struct Reduction {
    y0: Vec<f64>,
    /// For every reduced coordinate, the sparse column of `N`.
    columns: Vec<Vec<(usize, f64)>>,
}

impl Reduction {
    fn identity(n: usize) -> Self {
        Reduction { y0: vec![0.0; n], columns: (0..n).map(|i| vec![(i, 1.0)]).collect() }
    }

    /// Pin `Σ_{i ∈ diag} y_i = total` by eliminating `diag[0]`.
    fn trace_pin(n: usize, diag: &[usize], total: f64) -> Self {
        let pivot = diag[0];
        let mut y0 = vec![0.0; n];
        y0[pivot] = total;
        let columns = (0..n)
            .filter(|&i| i != pivot)
            .map(|i| {
                if diag.contains(&i) {
                    vec![(i, 1.0), (pivot, -1.0)]
                } else {
                    vec![(i, 1.0)]
                }
            })
            .collect();
        Reduction { y0, columns }
    }

    fn lift(&self, z: &[f64]) -> Vec<f64> {
        let mut y = self.y0.clone();
        for (k, col) in self.columns.iter().enumerate() {
            for &(i, c) in col {
                y[i] += c * z[k];
            }
        }
        y
    }

    /// Least-squares style projection for the initial point (exact for points satisfying the pin).
    fn project(&self, y: &[f64]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|col| col.iter().find(|(_, c)| *c == 1.0).map_or(0.0, |(i, _)| y[*i]))
            .collect()
    }
}

struct Barrier<'a> {
    blocks: &'a [Block],
    radius2: f64,
    m: usize,
}

struct Eval {
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl Barrier<'_> {
    /// `Σ log det(S_ℓ) + log(R² − |z|²)`, or `None` outside the domain.
    fn log_barrier(&self, z: &[f64], t: f64) -> Option<f64> {
        let h = self.radius2 - z.iter().map(|v| v * v).sum::<f64>();
        if h <= 0.0 {
            return None;
        }
        let mut acc = h.ln();
        for b in self.blocks {
            let chol = b.eval(z, t).cholesky()?;
            let l = chol.l_dirty();
            for i in 0..b.dim {
                let d = l[(i, i)];
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                acc += 2.0 * d.ln();
            }
        }
        Some(acc)
    }

    /// Gradient and Hessian of `−s·t − log_barrier` in `(z, t)`.
    fn derivatives(&self, z: &[f64], t: f64, s: f64) -> Option<Eval> {
        let n = self.m + 1;
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        grad[self.m] -= s;

        for b in self.blocks {
            let chol = b.eval(z, t).cholesky()?;
            let sinv = chol.inverse();
            // B_k = S⁻¹ F_k, with F_t = −I
            let mut bs: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(n);
            for (k, f) in b.fk.iter().enumerate() {
                if let Some(f) = f {
                    bs.push((k, &sinv * f));
                }
            }
            bs.push((self.m, -&sinv));
            for (a, (ka, ba)) in bs.iter().enumerate() {
                grad[*ka] -= ba.trace();
                for (kb, bb) in bs.iter().skip(a) {
                    // tr(B_a B_b)
                    let v = ba.component_mul(&bb.transpose()).sum();
                    hess[(*ka, *kb)] += v;
                    if ka != kb {
                        hess[(*kb, *ka)] += v;
                    }
                }
            }
        }

        let zz: f64 = z.iter().map(|v| v * v).sum();
        let h = self.radius2 - zz;
        if h <= 0.0 {
            return None;
        }
        for i in 0..self.m {
            grad[i] += 2.0 * z[i] / h;
            hess[(i, i)] += 2.0 / h;
            for j in 0..self.m {
                hess[(i, j)] += 4.0 * z[i] * z[j] / (h * h);
            }
        }
        Some(Eval { grad, hess })
    }
}

fn newton_direction(ev: &Eval) -> Option<DVector<f64>> {
    let n = ev.grad.len();
    let scale = (0..n).map(|i| ev.hess[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut reg = 0.0;
    for _ in 0..12 {
        let mut h = ev.hess.clone();
        for i in 0..n {
            h[(i, i)] += reg;
        }
        if let Some(c) = h.cholesky() {
            let d = c.solve(&(-&ev.grad));
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
    }
    None
}

const MAX_CENTERING_STEPS: usize = 40;
const STALL_GAP: f64 = 1e-6;

/// Maximize the common margin `t` subject to `G_ℓ(y) ⪰ t·I`.
pub fn solve(problem: &LmiProblem, options: &SolverOptions) -> Result<LmiSolution> {
    if problem.n_scalars > MAX_SCALARS {
        return Err(LmiError::TooLarge(problem.n_scalars));
    }
    if problem.constraints.is_empty() {
        return Err(LmiError::Shape("problem has no constraints".into()));
    }

    let pin = if problem.is_homogeneous() { problem.pin_coordinates() } else { None };
    let reduction = match &pin {
        Some((diag, total)) => Reduction::trace_pin(problem.n_scalars, diag, *total),
        None => Reduction::identity(problem.n_scalars),
    };
    let m = reduction.columns.len();

    let blocks: Vec<Block> = problem
        .constraints
        .iter()
        .map(|c| {
            let e = &c.expr;
            let mut f0 = e.constant.clone();
            for (k, f) in &e.terms {
                f0 += f * reduction.y0[*k];
            }
            let fk = reduction
                .columns
                .iter()
                .map(|col| {
                    let mut acc: Option<DMatrix<f64>> = None;
                    for &(i, coef) in col {
                        if let Some(f) = e.terms.get(&i) {
                            let term = f * coef;
                            acc = Some(match acc {
                                Some(a) => a + term,
                                None => term,
                            });
                        }
                    }
                    acc.filter(|a| a.amax() > 0.0)
                })
                .collect();
            Block { dim: e.rows, f0, fk }
        })
        .collect();

    let nu: f64 = blocks.iter().map(|b| b.dim as f64).sum::<f64>() + 1.0;
    let barrier = Barrier { blocks: &blocks, radius2: options.radius * options.radius, m };

    let mut z = reduction.project(&problem.initial_point());
    let lam0 = blocks
        .iter()
        .map(|b| min_eig_dense(&b.eval(&z, 0.0)))
        .fold(f64::INFINITY, f64::min);
    let mut t = lam0 - 1.0;
    if barrier.log_barrier(&z, t).is_none() {
        return Err(LmiError::SolverBreakdown("initial point is outside the barrier domain".into()));
    }

    let margin = problem.margin;
    let mut s = 1.0 / lam0.abs().max(1.0);
    let mu = 10.0;
    let mut iterations = 0usize;
    let mut status = None;
    let mut upper = f64::INFINITY;

    'outer: loop {
        // centering
        let mut inner = 0;
        let mut stalled = false;
        loop {
            if iterations >= options.max_iter {
                status = Some(LmiStatus::MaxIterations);
                break 'outer;
            }
            let ev = barrier
                .derivatives(&z, t, s)
                .ok_or_else(|| LmiError::SolverBreakdown("iterate left the barrier domain".into()))?;
            let dir = newton_direction(&ev)
                .ok_or_else(|| LmiError::SolverBreakdown(format!("singular Newton system at s = {s:e}")))?;
            let slope = ev.grad.dot(&dir);
            let decrement2 = -slope;
            iterations += 1;
            inner += 1;
            if decrement2 < 1e-10 {
                break;
            }

            let phi0 = barrier.log_barrier(&z, t).expect("current point is interior");
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let zn: Vec<f64> = z.iter().enumerate().map(|(i, v)| v + alpha * dir[i]).collect();
                let tn = t + alpha * dir[m];
                if let Some(phi1) = barrier.log_barrier(&zn, tn) {
                    // objective change −s·Δt − (log_barrier₁ − log_barrier₀)
                    let change = -s * (tn - t) - (phi1 - phi0);
                    if change <= 0.25 * alpha * slope {
                        z = zn;
                        t = tn;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted || inner >= MAX_CENTERING_STEPS {
                stalled = true;
                break;
            }
            if decrement2 < 1e-6 {
                break;
            }
        }

        let gap = nu / s;
        upper = t + gap;
        log::debug!("barrier weight {s:e}: margin {t:e}, gap {gap:e}, {iterations} Newton steps");
        if upper < margin - options.tol {
            status = Some(LmiStatus::Infeasible);
            break;
        }
        if gap <= options.tol * t.abs().max(1.0) {
            break;
        }
        // roundoff floor: further centering cannot make progress
        if stalled && gap <= STALL_GAP * t.abs().max(1.0) {
            break;
        }
        s *= mu;
    }

    let y = reduction.lift(&z);
    let values = problem.unpack(&y);
    let mut constraint_margins = Vec::with_capacity(problem.constraints.len());
    for c in &problem.constraints {
        let g = SymMatrix::new(c.expr.eval(&y))
            .map_err(|e| LmiError::SolverBreakdown(format!("constraint '{}': {e}", c.name)))?;
        let (lmin, _) = min_eig(&g).map_err(|e| LmiError::SolverBreakdown(e.to_string()))?;
        constraint_margins.push(lmin);
    }
    let achieved = constraint_margins.iter().copied().fold(f64::INFINITY, f64::min);
    let zz: f64 = z.iter().map(|v| v * v).sum();
    let hit_bound = zz.sqrt() > 0.5 * options.radius;

    let status = match status {
        Some(s) => s,
        None if achieved >= margin => LmiStatus::Feasible,
        None if t >= margin => {
            return Err(LmiError::SolverBreakdown(format!(
                "barrier margin {t:e} is not reproduced by the eigenvalue check ({achieved:e})"
            )))
        }
        None => LmiStatus::Infeasible,
    };

    Ok(LmiSolution {
        status,
        assignment: y,
        values,
        achieved_margin: achieved,
        constraint_margins,
        margin_upper_bound: upper,
        iterations,
        hit_bound,
        normalized: pin.is_some(),
    })
}

fn min_eig_dense(m: &DMatrix<f64>) -> f64 {
    SymMatrix::new(m.clone())
        .ok()
        .and_then(|s| min_eig(&s).ok())
        .map_or(f64::NEG_INFINITY, |(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn two_by_two_with_box_reaches_unit_margin() {
        let mut p = LmiProblem::new();
        let x = p.symmetric("x", 1);
        let xe = p.expr(x);
        let off = AffineExpr::constant(scalar(1.0));
        let g = AffineExpr::sym_block(&[vec![Some(xe.clone())], vec![Some(off), Some(xe.clone())]]).unwrap();
        p.add_constraint("main", g).unwrap();
        // x <= 2 as 2 - x >= 0
        let bound = AffineExpr::constant(scalar(2.0)).sub(&xe).unwrap().scale(1e3);
        p.add_constraint("box", bound).unwrap();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, LmiStatus::Feasible);
        // the box also carries the margin: x - 1 = 1000 (2 - x)
        let x_star = 2001.0 / 1001.0;
        assert!((sol.value(x)[(0, 0)] - x_star).abs() < 1e-7, "x = {}", sol.value(x)[(0, 0)]);
        assert!((sol.achieved_margin - (x_star - 1.0)).abs() < 1e-7);
    }

    #[test]
    fn unbounded_margin_grows_large() {
        let mut p = LmiProblem::new();
        let x = p.symmetric("x", 1);
        let xe = p.expr(x);
        let g = AffineExpr::sym_block(&[
            vec![Some(xe.clone())],
            vec![Some(AffineExpr::constant(scalar(1.0))), Some(xe)],
        ])
        .unwrap();
        p.add_constraint("main", g).unwrap();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, LmiStatus::Feasible);
        assert!(sol.achieved_margin > 1e3);
        assert!(sol.hit_bound);
    }

    #[test]
    fn negative_identity_is_infeasible() {
        let mut p = LmiProblem::new();
        let x = p.symmetric("x", 1);
        let g = AffineExpr::constant(-DMatrix::identity(2, 2))
            .add(&AffineExpr::sym_block(&[vec![Some(p.expr(x).scale(0.0))], vec![None, Some(p.expr(x).scale(0.0))]]).unwrap())
            .unwrap();
        p.add_constraint("neg", g).unwrap();
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, LmiStatus::Infeasible);
        assert!(sol.achieved_margin < 0.0);
    }

    #[test]
    fn shape_errors() {
        let mut p = LmiProblem::new();
        let k = p.rect("k", 1, 2);
        assert!(p.add_constraint("rect", p.expr(k)).is_err());
        let e = p.expr(k);
        assert!(e.add(&AffineExpr::zeros(2, 2)).is_err());
        assert!(e.lmul(&DMatrix::zeros(3, 3)).is_err());
        let asym = AffineExpr::constant(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]));
        assert!(p.add_constraint("asym", asym).is_err());
        assert!(AffineExpr::sym_block(&[vec![None]]).is_err());
    }

    #[test]
    fn homogeneous_lyapunov_is_normalized() {
        // A^T P A <= 0.81 P for A = 0.5 I  (scalar 2x2)
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.0, 0.6]);
        let mut p = LmiProblem::new();
        let pv = p.symmetric("P", 2);
        let pe = p.expr(pv);
        let lhs = pe.scale(0.81).sub(&pe.lmul(&a.transpose()).unwrap().rmul(&a).unwrap()).unwrap();
        p.add_constraint("decay", lhs).unwrap();
        p.add_constraint("pd", pe).unwrap();
        assert!(p.is_homogeneous());
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        assert!(sol.normalized);
        assert_eq!(sol.status, LmiStatus::Feasible);
        assert!((sol.value(pv).trace() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn serializes_problem_and_solution() {
        let mut p = LmiProblem::new();
        let x = p.symmetric("x", 1);
        p.add_constraint("c", p.expr(x)).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let back: LmiProblem = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let sol = solve(&p, &SolverOptions::default()).unwrap();
        let st = serde_json::to_string(&sol).unwrap();
        let sb: LmiSolution = serde_json::from_str(&st).unwrap();
        assert_eq!(sb.status, sol.status);
    }
}
