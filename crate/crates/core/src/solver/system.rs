//! Symmetric block-sparse normal equations over 6-DOF node parameter
//! blocks, solved by preconditioned conjugate gradients with a block-Jacobi
//! preconditioner.

use super::{SolverError, SolverSettings};
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rayon::prelude::*;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// Gauss-Newton normal equations `A x = b` where `A` approximates J'J and
/// `b = -J'r`. Only the upper block triangle (i <= j) is stored.
#[derive(Debug, Clone)]
pub struct BlockSparseSystem {
    n: usize,
    blocks: HashMap<(u32, u32), Matrix6<f64>>,
    rhs: Vec<Vector6<f64>>,
}

impl BlockSparseSystem {
    pub fn new(n_blocks: usize) -> Self {
        BlockSparseSystem {
            n: n_blocks,
            blocks: HashMap::new(),
            rhs: vec![Vector6::zeros(); n_blocks],
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.n
    }

    pub fn unknowns(&self) -> usize {
        6 * self.n
    }

    pub fn stored_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Accumulates `m` into block (i, j); coordinates in either triangle are
    /// folded into the stored upper triangle.
    pub fn add_to_block(&mut self, i: u32, j: u32, m: &Matrix6<f64>) {
        debug_assert!((i as usize) < self.n && (j as usize) < self.n);
        if i <= j {
            *self.blocks.entry((i, j)).or_insert_with(Matrix6::zeros) += m;
        } else {
            *self.blocks.entry((j, i)).or_insert_with(Matrix6::zeros) += m.transpose();
        }
    }

    pub fn add_to_rhs(&mut self, i: u32, v: &Vector6<f64>) {
        self.rhs[i as usize] += v;
    }

    pub fn block(&self, i: u32, j: u32) -> Option<&Matrix6<f64>> {
        self.blocks.get(&(i.min(j), i.max(j)))
    }

    pub fn rhs(&self) -> &[Vector6<f64>] {
        &self.rhs
    }

    pub fn rhs_norm(&self) -> f64 {
        self.rhs.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.values().all(|m| m.iter().all(|x| x.is_finite()))
            && self.rhs.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Levenberg damping: every scalar diagonal entry a_kk becomes
    /// a_kk * (1 + lambda), leaving the rest of the matrix untouched.
    pub fn damped(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.n as u32 {
            if let Some(d) = out.blocks.get_mut(&(i, i)) {
                for k in 0..6 {
                    d[(k, k)] *= 1.0 + lambda;
                }
            }
        }
        out
    }

    /// Row-major adjacency for mat-vec products: every stored block appears
    /// in its row and, transposed, in its column's row. Sorted for
    /// deterministic accumulation order.
    fn row_lists(&self) -> Vec<Vec<(u32, Matrix6<f64>)>> {
        let mut rows: Vec<Vec<(u32, Matrix6<f64>)>> = vec![Vec::new(); self.n];
        for (&(i, j), m) in &self.blocks {
            rows[i as usize].push((j, *m));
            if i != j {
                rows[j as usize].push((i, m.transpose()));
            }
        }
        for row in &mut rows {
            row.sort_unstable_by_key(|(c, _)| *c);
        }
        rows
    }

    /// Dense copy, for small systems and direct-solve comparisons.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.unknowns();
        let mut a = DMatrix::zeros(n, n);
        for (&(bi, bj), m) in &self.blocks {
            for r in 0..6 {
                for c in 0..6 {
                    let (gr, gc) = (6 * bi as usize + r, 6 * bj as usize + c);
                    a[(gr, gc)] += m[(r, c)];
                    if bi != bj {
                        // Diagonal blocks are stored in full; only
                        // off-diagonal blocks need their mirror image.
                        a[(gc, gr)] += m[(r, c)];
                    }
                }
            }
        }
        let mut b = DVector::zeros(n);
        for (i, v) in self.rhs.iter().enumerate() {
            for r in 0..6 {
                b[6 * i + r] = v[r];
            }
        }
        (a, b)
    }

    /// Writes `A` in Matrix Market symmetric coordinate format and `b` in
    /// array format, for offline inspection.
    pub fn write_matrix_market(
        &self,
        matrix_path: &Path,
        rhs_path: &Path,
    ) -> std::io::Result<()> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (&(bi, bj), m) in &self.blocks {
            for r in 0..6 {
                for c in 0..6 {
                    let val = m[(r, c)];
                    if val == 0.0 {
                        continue;
                    }
                    let (gr, gc) = (6 * bi as usize + r, 6 * bj as usize + c);
                    // Symmetric format stores the lower triangle only.
                    let (row, col) = if gr >= gc { (gr, gc) } else { (gc, gr) };
                    if bi == bj && gr < gc {
                        continue; // upper half of a diagonal block: mirrored entry exists
                    }
                    entries.push((row + 1, col + 1, val));
                }
            }
        }
        entries.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut w = std::io::BufWriter::new(std::fs::File::create(matrix_path)?);
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(w, "{} {} {}", self.unknowns(), self.unknowns(), entries.len())?;
        for (r, c, v) in entries {
            writeln!(w, "{} {} {:.17e}", r, c, v)?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(rhs_path)?);
        writeln!(w, "%%MatrixMarket matrix array real general")?;
        writeln!(w, "{} 1", self.unknowns())?;
        for v in &self.rhs {
            for r in 0..6 {
                writeln!(w, "{:.17e}", v[r])?;
            }
        }
        Ok(())
    }
}

fn dot(a: &[Vector6<f64>], b: &[Vector6<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Preconditioned conjugate gradients with the inverted 6x6 diagonal blocks
/// as preconditioner. Returns the increment per parameter block.
pub fn solve_pcg(
    system: &BlockSparseSystem,
    settings: &SolverSettings,
) -> Result<Vec<Vector6<f64>>, SolverError> {
    if !system.is_finite() {
        return Err(SolverError::NonFinite);
    }
    let n = system.n;
    let mut m_inv: Vec<Matrix6<f64>> = Vec::with_capacity(n);
    for i in 0..n as u32 {
        let d = system
            .block(i, i)
            .copied()
            .ok_or(SolverError::SingularPreconditioner(i as usize))?;
        let chol = d
            .cholesky()
            .ok_or(SolverError::SingularPreconditioner(i as usize))?;
        m_inv.push(chol.inverse());
    }

    let b = system.rhs();
    let b_norm = system.rhs_norm();
    let mut x = vec![Vector6::zeros(); n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let rows = system.row_lists();
    let apply = |p: &[Vector6<f64>]| -> Vec<Vector6<f64>> {
        rows.par_iter()
            .map(|row| {
                let mut acc = Vector6::zeros();
                for (c, m) in row {
                    acc += m * p[*c as usize];
                }
                acc
            })
            .collect()
    };

    let mut r: Vec<Vector6<f64>> = b.to_vec();
    let mut z: Vec<Vector6<f64>> = (0..n).map(|i| m_inv[i] * r[i]).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let max_it = if settings.pcg_max_iterations == 0 {
        10 * n.max(1)
    } else {
        settings.pcg_max_iterations
    };
    for _ in 0..max_it {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break; // numerically indefinite direction; return best-so-far
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let r_norm = r.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        if r_norm / b_norm <= settings.pcg_tolerance {
            break;
        }
        for i in 0..n {
            z[i] = m_inv[i] * r[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok(x)
}
