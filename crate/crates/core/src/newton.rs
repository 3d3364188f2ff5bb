//! Modified Newton iteration for implicit stage equations with
//! block-diagonal CSR Jacobians and per-cell dense LU.

use crate::context::TaskContext;
use crate::profiling::Region;
use crate::vectors::{ManyVector, WeightVector};
use crate::{Error, Result};

/// A right-hand side `f(t, y)` over a distributed state.
pub trait Rhs {
    fn eval(&self, ctx: &TaskContext, t: f64, y: &ManyVector, ydot: &mut ManyVector) -> Result<()>;
}

/// Cell-local Jacobian of an [`Rhs`], stored cell-major as block-diagonal CSR.
pub trait BlockJacobian: Rhs {
    fn cells(&self) -> usize;

    /// Structure of the Jacobian with zero values.
    fn pattern(&self) -> CsrMatrix;

    fn jacobian(&self, ctx: &TaskContext, t: f64, y: &ManyVector, jac: &mut CsrMatrix) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    /// Repeats one `width x width` block pattern over `cells` diagonal blocks.
    pub fn block_pattern(cells: usize, width: usize, pattern: &[(usize, usize)]) -> Result<Self> {
        let mut p = pattern.to_vec();
        p.sort_unstable();
        p.dedup();
        if p.iter().any(|&(r, c)| r >= width || c >= width) {
            return Err(Error::Conformance(format!(
                "pattern entry outside a {width}-wide block"
            )));
        }
        let n = cells * width;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(cells * p.len());
        row_ptr.push(0);
        for cell in 0..cells {
            let base = cell * width;
            let mut k = 0;
            for r in 0..width {
                while k < p.len() && p[k].0 == r {
                    col_idx.push(base + p[k].1);
                    k += 1;
                }
                row_ptr.push(col_idx.len());
            }
        }
        let nnz = col_idx.len();
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            vals: vec![0.0; nnz],
        })
    }

    /// Builds a CSR matrix from dense row-major blocks, keeping exact zeros out.
    pub fn from_dense_blocks(width: usize, blocks: &[Vec<f64>]) -> Self {
        let n = blocks.len() * width;
        let mut m = Self {
            n,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            vals: Vec::new(),
        };
        for (cell, b) in blocks.iter().enumerate() {
            for r in 0..width {
                for c in 0..width {
                    let v = b[r * width + c];
                    if v != 0.0 {
                        m.col_idx.push(cell * width + c);
                        m.vals.push(v);
                    }
                }
                m.row_ptr.push(m.col_idx.len());
            }
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.vals[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    /// Mutable value slot of an existing structural entry.
    pub fn entry_mut(&mut self, i: usize, j: usize) -> Option<&mut f64> {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        let k = self.col_idx[r.clone()].binary_search(&j).ok()?;
        Some(&mut self.vals[r.start + k])
    }

    pub fn is_block_diagonal(&self, width: usize) -> bool {
        width > 0
            && self.n % width == 0
            && (0..self.n).all(|i| {
                let (cols, _) = self.row(i);
                cols.windows(2).all(|w| w[0] < w[1]) && cols.iter().all(|&c| c / width == i / width)
            })
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&c, v)| v * x[c]).sum();
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                d[i * self.n + c] = v;
            }
        }
        d
    }
}

/// `I - shift J` with the pattern of `J` plus the diagonal.
pub fn assemble_newton_matrix(j: &CsrMatrix, shift: f64) -> CsrMatrix {
    let mut a = CsrMatrix {
        n: j.n,
        row_ptr: Vec::with_capacity(j.n + 1),
        col_idx: Vec::with_capacity(j.nnz() + j.n),
        vals: Vec::with_capacity(j.nnz() + j.n),
    };
    a.row_ptr.push(0);
    for i in 0..j.n {
        let (cols, vals) = j.row(i);
        let mut diag_done = false;
        for (&c, &v) in cols.iter().zip(vals) {
            if !diag_done && c > i {
                a.col_idx.push(i);
                a.vals.push(1.0);
                diag_done = true;
            }
            if c == i {
                a.col_idx.push(i);
                a.vals.push(1.0 - shift * v);
                diag_done = true;
            } else {
                a.col_idx.push(c);
                a.vals.push(-shift * v);
            }
        }
        if !diag_done {
            a.col_idx.push(i);
            a.vals.push(1.0);
        }
        a.row_ptr.push(a.col_idx.len());
    }
    a
}

/// Dense LU factors with partial pivoting, one per diagonal block.
#[derive(Debug, Clone)]
pub struct BlockLu {
    width: usize,
    piv: Vec<usize>,
    /// Nonzero factor entries in solve order, `(row, col, value)`; a
    /// diagonal entry means divide.
    ops: Vec<(u32, u32, f64)>,
    ops_ptr: Vec<usize>,
}

impl BlockLu {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.piv.len() / self.width.max(1)
    }

    /// Solves in place, block by block.
    pub fn solve(&self, b: &mut [f64]) -> Result<()> {
        let w = self.width;
        if b.len() != self.piv.len() {
            return Err(Error::Conformance(format!(
                "right-hand side of length {} for a system of size {}",
                b.len(),
                self.piv.len()
            )));
        }
        for (cell, x) in b.chunks_exact_mut(w).enumerate() {
            for (i, &p) in self.piv[cell * w..(cell + 1) * w].iter().enumerate() {
                x.swap(i, p);
            }
            for &(i, k, v) in &self.ops[self.ops_ptr[cell]..self.ops_ptr[cell + 1]] {
                let (i, k) = (i as usize, k as usize);
                if i == k {
                    x[i] /= v;
                } else {
                    x[i] -= v * x[k];
                }
            }
        }
        Ok(())
    }
}

pub fn block_lu_factor(a: &CsrMatrix, width: usize) -> Result<BlockLu> {
    if !a.is_block_diagonal(width) {
        return Err(Error::Conformance(format!(
            "matrix is not block diagonal with width {width}"
        )));
    }
    let cells = a.n / width;
    let mut lu = vec![0.0; cells * width * width];
    let mut piv = vec![0; a.n];
    for cell in 0..cells {
        let blk = &mut lu[cell * width * width..(cell + 1) * width * width];
        for r in 0..width {
            let (cols, vals) = a.row(cell * width + r);
            for (&c, &v) in cols.iter().zip(vals) {
                blk[r * width + (c - cell * width)] = v;
            }
        }
        let p = &mut piv[cell * width..(cell + 1) * width];
        for k in 0..width {
            let (best, mag) = (k..width)
                .map(|r| (r, blk[r * width + k].abs()))
                .fold((k, -1.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
            if mag == 0.0 || !mag.is_finite() {
                return Err(Error::SingularBlock { cell });
            }
            p[k] = best;
            if best != k {
                for c in 0..width {
                    blk.swap(k * width + c, best * width + c);
                }
            }
            let d = blk[k * width + k];
            for r in k + 1..width {
                let l = blk[r * width + k] / d;
                blk[r * width + k] = l;
                if l != 0.0 {
                    for c in k + 1..width {
                        blk[r * width + c] -= l * blk[k * width + c];
                    }
                }
            }
        }
    }
    let mut ops = Vec::new();
    let mut ops_ptr = vec![0];
    for blk in lu.chunks_exact(width).collect::<Vec<_>>().chunks(width) {
        for i in 0..width {
            for k in 0..i {
                if blk[i][k] != 0.0 {
                    ops.push((i as u32, k as u32, blk[i][k]));
                }
            }
        }
        for i in (0..width).rev() {
            for k in i + 1..width {
                if blk[i][k] != 0.0 {
                    ops.push((i as u32, k as u32, blk[i][k]));
                }
            }
            ops.push((i as u32, i as u32, blk[i][i]));
        }
        ops_ptr.push(ops.len());
    }
    Ok(BlockLu {
        width,
        piv,
        ops,
        ops_ptr,
    })
}

/// Copies a vector into cell-major order; each subvector contributes
/// `len / cells` consecutive fields per cell.
pub fn gather_cells(v: &ManyVector, cells: usize, out: &mut Vec<f64>) {
    let nf: usize = v.subs().iter().map(|s| s.len() / cells.max(1)).sum();
    out.resize(cells * nf, 0.0);
    let mut f0 = 0;
    for sub in v.subs() {
        let width = sub.len() / cells.max(1);
        for (cell, chunk) in sub.chunks_exact(width.max(1)).enumerate().take(cells) {
            out[cell * nf + f0..cell * nf + f0 + width].copy_from_slice(chunk);
        }
        f0 += width;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub max_iters: usize,
    pub conv_coef: f64,
    /// Keep the Jacobian across iterations and stages until a failure.
    pub reuse_jacobian: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            conv_coef: 0.01,
            reuse_jacobian: true,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 || !(self.conv_coef > 0.0) {
            return Err(Error::Config(format!("invalid Newton settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NewtonStats {
    pub iters: u64,
    pub solves: u64,
    pub conv_fails: u64,
    pub jac_evals: u64,
    pub factorizations: u64,
}

/// Modified Newton engine with Jacobian and factorization reuse.
#[derive(Debug)]
pub struct NewtonSolver {
    pub cfg: NewtonConfig,
    pub stats: NewtonStats,
    jac: Option<CsrMatrix>,
    lu: Option<BlockLu>,
    lu_shift: f64,
    buf: Vec<f64>,
}

impl NewtonSolver {
    pub fn new(cfg: NewtonConfig) -> Self {
        Self {
            cfg,
            stats: NewtonStats::default(),
            jac: None,
            lu: None,
            lu_shift: f64::NAN,
            buf: Vec::new(),
        }
    }

    /// Drops the stored Jacobian and factorization.
    pub fn reset(&mut self) {
        self.jac = None;
        self.lu = None;
        self.lu_shift = f64::NAN;
    }

    fn refresh_jacobian<P: BlockJacobian + ?Sized>(
        &mut self,
        ctx: &TaskContext,
        p: &P,
        t: f64,
        z: &ManyVector,
    ) -> Result<()> {
        let _t = ctx.prof.scope(Region::JFast);
        let mut jac = match self.jac.take() {
            Some(j) => j,
            None => p.pattern(),
        };
        p.jacobian(ctx, t, z, &mut jac)?;
        self.jac = Some(jac);
        self.stats.jac_evals += 1;
        self.lu = None;
        Ok(())
    }

    fn setup(&mut self, ctx: &TaskContext, cells: usize, shift: f64) -> Result<()> {
        let _t = ctx.prof.scope(Region::LSetup);
        let jac = self
            .jac
            .as_ref()
            .ok_or_else(|| Error::Sequencing("linear setup before any Jacobian".into()))?;
        let width = if cells == 0 { 1 } else { jac.n / cells };
        let a = assemble_newton_matrix(jac, shift);
        self.lu = None;
        self.stats.factorizations += 1;
        self.lu = Some(block_lu_factor(&a, width)?);
        self.lu_shift = shift;
        Ok(())
    }

    /// Solves `z - shift f(t, z) = known` starting from the guess in `z`.
    /// On success `fz` holds `f(t, z)` at the solution.
    #[allow(clippy::too_many_arguments)]
    pub fn solve_stage<P: BlockJacobian + ?Sized>(
        &mut self,
        ctx: &TaskContext,
        p: &P,
        t: f64,
        shift: f64,
        known: &ManyVector,
        z: &mut ManyVector,
        fz: &mut ManyVector,
        w: &WeightVector,
    ) -> Result<usize> {
        self.cfg.validate()?;
        let guess = z.clone();
        let mut fresh = false;
        loop {
            let attempt = (|| {
                if self.jac.is_none() || !self.cfg.reuse_jacobian || fresh {
                    self.refresh_jacobian(ctx, p, t, z)?;
                }
                if self.lu.is_none() || self.lu_shift != shift {
                    self.setup(ctx, p.cells(), shift)?;
                }
                self.iterate(ctx, p, t, shift, known, z, fz, w)
            })();
            match attempt {
                Ok(k) => return Ok(k),
                Err(e) if e.is_recoverable() => {
                    self.stats.conv_fails += 1;
                    self.lu = None;
                    if fresh || !self.cfg.reuse_jacobian {
                        return Err(e);
                    }
                    fresh = true;
                    z.copy_from(&guess)?;
                }
                Err(e) => return Err(e),
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn iterate<P: BlockJacobian + ?Sized>(
        &mut self,
        ctx: &TaskContext,
        p: &P,
        t: f64,
        shift: f64,
        known: &ManyVector,
        z: &mut ManyVector,
        fz: &mut ManyVector,
        w: &WeightVector,
    ) -> Result<usize> {
        let cells = p.cells();
        let mut res = z.clone();
        let mut delta = z.clone();
        p.eval(ctx, t, z, fz)?;
        stage_residual_into(z, fz, shift, known, &mut res)?;
        let mut rate = 1.0f64;
        let mut prev = 0.0;
        for k in 0..self.cfg.max_iters {
            {
                let _t = ctx.prof.scope(Region::LSolve);
                let lu = self
                    .lu
                    .as_ref()
                    .ok_or_else(|| Error::Sequencing("solve before setup".into()))?;
                gather_cells(&res, cells, &mut self.buf);
                self.buf.iter_mut().for_each(|x| *x = -*x);
                lu.solve(&mut self.buf)?;
                crate::euler::scatter_cells(&self.buf, self.buf.len() / cells.max(1), cells, &mut delta)?;
                self.stats.solves += 1;
            }
            z.axpy(1.0, &delta)?;
            p.eval(ctx, t, z, fz)?;
            stage_residual_into(z, fz, shift, known, &mut res)?;
            let norms = ctx.coll.wrms_norms(&[(&delta, w), (&res, w)])?;
            let (dn, rn) = (norms[0], norms[1]);
            self.stats.iters += 1;
            if !dn.is_finite() || !rn.is_finite() {
                return Err(Error::NonConvergence(format!(
                    "non-finite Newton update at iteration {}",
                    k + 1
                )));
            }
            if k > 0 {
                rate = (0.3 * rate).max(dn / prev);
            }
            if rate * dn <= self.cfg.conv_coef || rn <= self.cfg.conv_coef {
                return Ok(k + 1);
            }
            if k > 0 && dn > 2.0 * prev {
                return Err(Error::NonConvergence(format!(
                    "Newton update grew from {prev:e} to {dn:e}"
                )));
            }
            prev = dn;
        }
        Err(Error::NonConvergence(format!(
            "no convergence in {} Newton iterations",
            self.cfg.max_iters
        )))
    }
}

/// `F(z) = z - shift fz - known`.
pub fn stage_residual_into(
    z: &ManyVector,
    fz: &ManyVector,
    shift: f64,
    known: &ManyVector,
    out: &mut ManyVector,
) -> Result<()> {
    out.assign_combination(&[1.0, -shift, -1.0], &[z, fz, known], true)
}
