//! Preconditioned Krylov solvers: CG for SPD systems, restarted GMRES for
//! the rest. Preconditioners are Jacobi and ILU(0); the coupled
//! fluid-solid system uses a block lower-triangular sweep of two ILU(0)
//! factors.

use super::SparseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SolveOpts {
    /// Relative residual target (against the right-hand side norm).
    pub tol: f64,
    pub max_iter: usize,
    /// GMRES restart length; `usize::MAX` means full GMRES.
    pub restart: usize,
}

impl Default for SolveOpts {
    fn default() -> Self {
        SolveOpts {
            tol: 1e-10,
            max_iter: 2000,
            restart: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
}

pub trait Preconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPrecond;

impl Preconditioner for IdentityPrecond {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(a: &SparseMatrix) -> Jacobi {
        let inv_diag = (0..a.n)
            .map(|i| {
                let d = a.get(i, i);
                if d.abs() > 0.0 {
                    1.0 / d
                } else {
                    1.0
                }
            })
            .collect();
        Jacobi { inv_diag }
    }
}

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for i in 0..r.len() {
            z[i] = r[i] * self.inv_diag[i];
        }
    }
}

/// Incomplete LU factorization with zero fill-in on the matrix pattern.
pub struct Ilu0 {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    lu: Vec<f64>,
    diag_pos: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &SparseMatrix) -> Ilu0 {
        let n = a.n;
        let mut lu = a.values.clone();
        let diag_pos: Vec<usize> = (0..n)
            .map(|i| {
                let lo = a.row_offsets[i];
                let hi = a.row_offsets[i + 1];
                lo + a.col_indices[lo..hi]
                    .binary_search(&i)
                    .expect("pattern must contain the diagonal")
            })
            .collect();
        for i in 0..n {
            let row = a.row_offsets[i]..a.row_offsets[i + 1];
            for kk in row.clone() {
                let k = a.col_indices[kk];
                if k >= i {
                    break;
                }
                let mut pivot = lu[diag_pos[k]];
                if pivot.abs() < 1e-300 {
                    pivot = 1e-300_f64.copysign(if pivot == 0.0 { 1.0 } else { pivot });
                }
                let factor = lu[kk] / pivot;
                lu[kk] = factor;
                for jj in (diag_pos[k] + 1)..a.row_offsets[k + 1] {
                    let j = a.col_indices[jj];
                    if let Ok(pos) = a.col_indices[row.clone()].binary_search(&j) {
                        lu[row.start + pos] -= factor * lu[jj];
                    }
                }
            }
        }
        Ilu0 {
            n,
            row_offsets: a.row_offsets.clone(),
            col_indices: a.col_indices.clone(),
            lu,
            diag_pos,
        }
    }
}

impl Preconditioner for Ilu0 {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        // Forward solve with unit lower factor.
        for i in 0..self.n {
            let mut s = r[i];
            for k in self.row_offsets[i]..self.diag_pos[i] {
                s -= self.lu[k] * z[self.col_indices[k]];
            }
            z[i] = s;
        }
        // Backward solve with the upper factor.
        for i in (0..self.n).rev() {
            let mut s = z[i];
            for k in (self.diag_pos[i] + 1)..self.row_offsets[i + 1] {
                s -= self.lu[k] * z[self.col_indices[k]];
            }
            let d = self.lu[self.diag_pos[i]];
            z[i] = s / if d.abs() < 1e-300 { 1e-300 } else { d };
        }
    }
}

/// Gauss-Seidel sweep over two contiguous blocks, each solved with its own
/// ILU(0). The `first` block is eliminated before the `second` one.
pub struct BlockLowerTriangular<'a> {
    a: &'a SparseMatrix,
    first: std::ops::Range<usize>,
    second: std::ops::Range<usize>,
    ilu_first: Ilu0,
    ilu_second: Ilu0,
}

impl<'a> BlockLowerTriangular<'a> {
    pub fn new(
        a: &'a SparseMatrix,
        first: std::ops::Range<usize>,
        second: std::ops::Range<usize>,
    ) -> Self {
        let ilu_first = Ilu0::new(&a.extract_block(first.clone()));
        let ilu_second = Ilu0::new(&a.extract_block(second.clone()));
        BlockLowerTriangular {
            a,
            first,
            second,
            ilu_first,
            ilu_second,
        }
    }
}

impl Preconditioner for BlockLowerTriangular<'_> {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let mut z1 = vec![0.0; self.first.len()];
        self.ilu_first.apply(&r[self.first.clone()], &mut z1);
        let mut coupled = vec![0.0; self.second.len()];
        self.a
            .block_matvec(self.second.clone(), self.first.clone(), &z1, &mut coupled);
        let r2: Vec<f64> = r[self.second.clone()]
            .iter()
            .zip(&coupled)
            .map(|(ri, ci)| ri - ci)
            .collect();
        let mut z2 = vec![0.0; self.second.len()];
        self.ilu_second.apply(&r2, &mut z2);
        z[self.first.clone()].copy_from_slice(&z1);
        z[self.second.clone()].copy_from_slice(&z2);
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients for SPD systems. `x` holds the
/// initial guess on entry and the solution on success.
pub fn solve_cg(
    a: &SparseMatrix,
    b: &[f64],
    x: &mut [f64],
    opts: &SolveOpts,
    pc: &dyn Preconditioner,
) -> Result<SolveStats> {
    let n = a.n;
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            residual: 0.0,
            history: vec![],
        });
    }
    let mut r = a.residual(x, b);
    let mut z = vec![0.0; n];
    pc.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    let mut history = Vec::new();
    let mut res = norm(&r) / b_norm;
    history.push(res);
    if res <= opts.tol {
        return Ok(SolveStats {
            iterations: 0,
            residual: res,
            history,
        });
    }
    for it in 1..=opts.max_iter {
        a.matvec(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 || !pq.is_finite() {
            return Err(Error::SolverDiverged {
                solver: "cg",
                iterations: it,
                residual: res,
                tol: opts.tol,
                history,
            });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        res = norm(&r) / b_norm;
        history.push(res);
        if res <= opts.tol {
            return Ok(SolveStats {
                iterations: it,
                residual: res,
                history,
            });
        }
        pc.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged {
        solver: "cg",
        iterations: opts.max_iter,
        residual: res,
        tol: opts.tol,
        history,
    })
}

/// Right-preconditioned restarted GMRES. The tracked residual is the true
/// residual of the original system.
pub fn solve_gmres(
    a: &SparseMatrix,
    b: &[f64],
    x: &mut [f64],
    opts: &SolveOpts,
    pc: &dyn Preconditioner,
) -> Result<SolveStats> {
    let n = a.n;
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            residual: 0.0,
            history: vec![],
        });
    }
    let restart = opts.restart.min(opts.max_iter).min(n);
    let mut history = Vec::new();
    let mut total_iters = 0;
    let mut z = vec![0.0; n];
    let mut w = vec![0.0; n];

    loop {
        let mut r = a.residual(x, b);
        let beta = norm(&r);
        let mut res = beta / b_norm;
        if history.is_empty() {
            history.push(res);
        }
        if res <= opts.tol {
            return Ok(SolveStats {
                iterations: total_iters,
                residual: res,
                history,
            });
        }
        if total_iters >= opts.max_iter {
            return Err(Error::SolverDiverged {
                solver: "gmres",
                iterations: total_iters,
                residual: res,
                tol: opts.tol,
                history,
            });
        }
        r.iter_mut().for_each(|v| *v /= beta);
        let mut basis: Vec<Vec<f64>> = vec![r];
        let mut h: Vec<Vec<f64>> = Vec::new(); // h[j] has j+2 entries
        let mut cs: Vec<f64> = Vec::new();
        let mut sn: Vec<f64> = Vec::new();
        let mut g = vec![beta];
        let mut m_used = 0;

        for j in 0..restart {
            pc.apply(&basis[j], &mut z);
            a.matvec(&z, &mut w);
            let mut hj = Vec::with_capacity(j + 2);
            for v in basis.iter() {
                let hij = dot(&w, v);
                hj.push(hij);
                for i in 0..n {
                    w[i] -= hij * v[i];
                }
            }
            let h_last = norm(&w);
            hj.push(h_last);
            // Apply accumulated Givens rotations to the new column.
            for i in 0..j {
                let t = cs[i] * hj[i] + sn[i] * hj[i + 1];
                hj[i + 1] = -sn[i] * hj[i] + cs[i] * hj[i + 1];
                hj[i] = t;
            }
            let denom = (hj[j] * hj[j] + hj[j + 1] * hj[j + 1]).sqrt();
            let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (hj[j] / denom, hj[j + 1] / denom) };
            cs.push(c);
            sn.push(s);
            hj[j] = c * hj[j] + s * hj[j + 1];
            hj[j + 1] = 0.0;
            g.push(-s * g[j]);
            g[j] *= c;
            h.push(hj);
            m_used = j + 1;
            total_iters += 1;
            res = g[j + 1].abs() / b_norm;
            history.push(res);
            if res <= opts.tol || total_iters >= opts.max_iter || h_last < 1e-300 {
                break;
            }
            for i in 0..n {
                w[i] /= h_last;
            }
            basis.push(w.clone());
        }

        // Back-substitute y and update x += M^-1 (V y).
        let mut y = vec![0.0; m_used];
        for i in (0..m_used).rev() {
            let mut s = g[i];
            for k in (i + 1)..m_used {
                s -= h[k][i] * y[k];
            }
            y[i] = s / h[i][i];
        }
        let mut vy = vec![0.0; n];
        for (k, yk) in y.iter().enumerate() {
            for i in 0..n {
                vy[i] += yk * basis[k][i];
            }
        }
        pc.apply(&vy, &mut z);
        for i in 0..n {
            x[i] += z[i];
        }
        let r_final = a.residual(x, b);
        let res_final = norm(&r_final) / b_norm;
        if res_final <= opts.tol {
            return Ok(SolveStats {
                iterations: total_iters,
                residual: res_final,
                history,
            });
        }
        if total_iters >= opts.max_iter {
            return Err(Error::SolverDiverged {
                solver: "gmres",
                iterations: total_iters,
                residual: res_final,
                tol: opts.tol,
                history,
            });
        }
    }
}
