//! Dense two-phase tableau simplex for `min w^T |x|` subject to `Ax = y`,
//! written as `x = p - q` with `p, q >= 0`. Used as an exact crossover when
//! the splitting iterations stall near a degenerate vertex.

use nalgebra::{DMatrix, DVector};

const PIVOT_TOL: f64 = 1e-11;

struct Tableau {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * (self.cols + 1) + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.data[r * (self.cols + 1) + self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let width = self.cols + 1;
        &mut self.data[r * width..(r + 1) * width]
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let width = self.cols + 1;
        let p = self.at(pr, pc);
        for v in self.row_mut(pr) {
            *v /= p;
        }
        let pivot_row: Vec<f64> = self.data[pr * width..(pr + 1) * width].to_vec();
        // The objective row sits at index `rows`.
        for r in 0..=self.rows {
            if r == pr {
                continue;
            }
            let f = self.at(r, pc);
            if f != 0.0 {
                for (v, pv) in self.row_mut(r).iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        self.basis[pr] = pc;
    }

    /// Runs simplex pivots on the objective row over columns `< allowed`.
    /// Returns false if the iteration cap is hit.
    fn optimise(&mut self, allowed: usize) -> bool {
        let cap = 50 * (self.rows + self.cols);
        let bland_after = 5 * (self.rows + self.cols);
        for iter in 0..cap {
            let obj = self.rows;
            let entering = if iter < bland_after {
                let mut best = None;
                let mut best_val = -PIVOT_TOL;
                for c in 0..allowed {
                    let v = self.at(obj, c);
                    if v < best_val {
                        best_val = v;
                        best = Some(c);
                    }
                }
                best
            } else {
                (0..allowed).find(|&c| self.at(obj, c) < -PIVOT_TOL)
            };
            let Some(pc) = entering else {
                return true;
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let coef = self.at(r, pc);
                if coef > PIVOT_TOL {
                    let ratio = self.rhs(r) / coef;
                    match leave {
                        Some((lr, best))
                            if ratio > best || (ratio == best && self.basis[r] > self.basis[lr]) => {}
                        _ => leave = Some((r, ratio)),
                    }
                }
            }
            // Costs are positive, so the objective is bounded below.
            let Some((pr, _)) = leave else {
                return false;
            };
            self.pivot(pr, pc);
        }
        false
    }
}

/// Exact basic optimal solution, or `None` when infeasible or when the
/// pivoting fails to terminate.
pub(super) fn solve(a: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, n) = a.shape();
    let structural = 2 * n;
    let cols = structural + m;
    let mut t = Tableau {
        rows: m,
        cols,
        data: vec![0.0; (m + 1) * (cols + 1)],
        basis: (0..m).map(|r| structural + r).collect(),
    };
    for r in 0..m {
        let s = if y[r] < 0.0 { -1.0 } else { 1.0 };
        let row = t.row_mut(r);
        for j in 0..n {
            row[j] = s * a[(r, j)];
            row[n + j] = -s * a[(r, j)];
        }
        row[structural + r] = 1.0;
        row[cols] = s * y[r];
    }

    // Phase one: drive the artificial variables to zero.
    for c in 0..=cols {
        if c >= structural && c < cols {
            continue;
        }
        let sum: f64 = (0..m).map(|r| t.at(r, c)).sum();
        t.row_mut(m)[c] = -sum;
    }
    if !t.optimise(structural) {
        return None;
    }
    let scale = y.amax().max(1.0);
    if -t.rhs(m) > 1e-9 * scale {
        return None;
    }
    for r in 0..m {
        if t.basis[r] >= structural {
            if let Some(c) = (0..structural).find(|&c| t.at(r, c).abs() > 1e-9) {
                t.pivot(r, c);
            }
        }
    }

    // Phase two on the true costs.
    let cost = |c: usize| if c < structural { w[c % n] } else { 0.0 };
    for c in 0..=cols {
        let reduced: f64 = (0..m).map(|r| cost(t.basis[r]) * t.at(r, c)).sum();
        t.row_mut(m)[c] = if c < cols { cost(c) - reduced } else { -reduced };
    }
    if !t.optimise(structural) {
        return None;
    }

    let mut x = DVector::zeros(n);
    for r in 0..m {
        let c = t.basis[r];
        if c < n {
            x[c] += t.rhs(r);
        } else if c < structural {
            x[c - n] -= t.rhs(r);
        }
    }
    Some(x)
}
