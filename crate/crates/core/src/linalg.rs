//! Symmetric band-plus-border ("arrowhead") linear systems.
//!
//! Normal equations of B-spline fitting problems couple only control points
//! whose supports overlap, so the spline block of `JᵀWJ` is banded. A small
//! set of dense columns (sensor extrinsics, biases, gravity, and the map
//! anchor segment) is kept in a border block and eliminated by a Schur
//! complement after a banded Cholesky factorization of the spline block.

use nalgebra::{Cholesky, DMatrix, DVector};

/// Factorization failure: the (damped) matrix is not positive definite.
#[derive(Debug, Clone, Copy)]
pub struct NotPositiveDefinite {
    /// Global index of the pivot that failed.
    pub index: usize,
}

/// Accumulator and solver for a symmetric system
/// `[A B; Bᵀ C] x = b` where `A` is banded (half-bandwidth `hbw`) and the
/// border block `C` is small and dense.
///
/// Indices `0..n_band` address the band block, `n_band..n_band+n_border`
/// the border block.
#[derive(Debug, Clone)]
pub struct ArrowSystem {
    n_band: usize,
    n_border: usize,
    hbw: usize,
    /// Lower band of `A`, row-major: entry `(i, j)` with `0 <= i-j <= hbw`
    /// lives at `band[i*(hbw+1) + hbw - (i-j)]`.
    band: Vec<f64>,
    /// `B`, column-major (`n_band` rows per border column).
    border: Vec<f64>,
    /// `C`, dense row-major.
    corner: Vec<f64>,
    rhs: Vec<f64>,
}

impl ArrowSystem {
    pub fn new(n_band: usize, hbw: usize, n_border: usize) -> Self {
        Self {
            n_band,
            n_border,
            hbw,
            band: vec![0.0; n_band * (hbw + 1)],
            border: vec![0.0; n_band * n_border],
            corner: vec![0.0; n_border * n_border],
            rhs: vec![0.0; n_band + n_border],
        }
    }

    pub fn dim(&self) -> usize {
        self.n_band + self.n_border
    }

    /// Adds `v` to the symmetric entry `(a, b)` (order-insensitive).
    pub fn add(&mut self, a: usize, b: usize, v: f64) {
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        if lo >= self.n_band {
            let (i, j) = (hi - self.n_band, lo - self.n_band);
            self.corner[i * self.n_border + j] += v;
            if i != j {
                self.corner[j * self.n_border + i] += v;
            }
        } else if hi >= self.n_band {
            let c = hi - self.n_band;
            self.border[c * self.n_band + lo] += v;
        } else {
            debug_assert!(
                hi - lo <= self.hbw,
                "entry ({hi},{lo}) outside half-bandwidth {}",
                self.hbw
            );
            self.band[hi * (self.hbw + 1) + self.hbw - (hi - lo)] += v;
        }
    }

    pub fn add_rhs(&mut self, i: usize, v: f64) {
        self.rhs[i] += v;
    }

    pub fn diag(&self, i: usize) -> f64 {
        if i < self.n_band {
            self.band[i * (self.hbw + 1) + self.hbw]
        } else {
            let j = i - self.n_band;
            self.corner[j * self.n_border + j]
        }
    }

    /// Merges another system of identical shape (used for chunked parallel
    /// accumulation with a fixed merge order).
    pub fn merge(&mut self, other: &ArrowSystem) {
        assert_eq!(self.n_band, other.n_band);
        assert_eq!(self.n_border, other.n_border);
        assert_eq!(self.hbw, other.hbw);
        for (a, b) in self.band.iter_mut().zip(&other.band) {
            *a += b;
        }
        for (a, b) in self.border.iter_mut().zip(&other.border) {
            *a += b;
        }
        for (a, b) in self.corner.iter_mut().zip(&other.corner) {
            *a += b;
        }
        for (a, b) in self.rhs.iter_mut().zip(&other.rhs) {
            *a += b;
        }
    }

    /// Solves `(H + lambda·diag(H)) x = rhs` without modifying `self`.
    ///
    /// Levenberg-Marquardt damping scales the diagonal, so a structurally
    /// zero diagonal (an unconstrained parameter) still fails to factor and
    /// surfaces as `NotPositiveDefinite` with the offending index.
    pub fn solve(&self, lambda: f64) -> Result<Vec<f64>, NotPositiveDefinite> {
        let w = self.hbw + 1;
        let n = self.n_band;
        let m = self.n_border;

        let mut band = self.band.clone();
        let mut corner = self.corner.clone();
        for i in 0..n {
            band[i * w + self.hbw] *= 1.0 + lambda;
        }
        for j in 0..m {
            corner[j * m + j] *= 1.0 + lambda;
        }

        // Banded Cholesky A = L Lᵀ in place.
        for i in 0..n {
            let jmin = i.saturating_sub(self.hbw);
            for j in jmin..=i {
                let kmin = jmin.max(j.saturating_sub(self.hbw));
                let mut s = band[i * w + self.hbw - (i - j)];
                for k in kmin..j {
                    s -= band[i * w + self.hbw - (i - k)] * band[j * w + self.hbw - (j - k)];
                }
                if j < i {
                    band[i * w + self.hbw - (i - j)] = s / band[j * w + self.hbw];
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(NotPositiveDefinite { index: i });
                    }
                    band[i * w + self.hbw] = s.sqrt();
                }
            }
        }

        let fwd = |band: &[f64], x: &mut [f64]| {
            for i in 0..n {
                let jmin = i.saturating_sub(self.hbw);
                let mut s = x[i];
                for j in jmin..i {
                    s -= band[i * w + self.hbw - (i - j)] * x[j];
                }
                x[i] = s / band[i * w + self.hbw];
            }
        };
        let bwd = |band: &[f64], x: &mut [f64]| {
            for i in (0..n).rev() {
                let jmax = (i + self.hbw).min(n.saturating_sub(1));
                let mut s = x[i];
                for j in (i + 1)..=jmax {
                    s -= band[j * w + self.hbw - (j - i)] * x[j];
                }
                x[i] = s / band[i * w + self.hbw];
            }
        };

        // v = L⁻¹ b_a, W = L⁻¹ B.
        let mut v = self.rhs[..n].to_vec();
        fwd(&band, &mut v);
        let mut wcols = self.border.clone();
        for c in 0..m {
            fwd(&band, &mut wcols[c * n..(c + 1) * n]);
        }

        let mut xc = Vec::new();
        if m > 0 {
            // Schur complement S = C − WᵀW, reduced rhs = b_c − Wᵀ v.
            let mut s_mat = DMatrix::<f64>::zeros(m, m);
            for a in 0..m {
                for b in 0..=a {
                    let mut dot = 0.0;
                    for i in 0..n {
                        dot += wcols[a * n + i] * wcols[b * n + i];
                    }
                    let val = corner[a * m + b] - dot;
                    s_mat[(a, b)] = val;
                    s_mat[(b, a)] = val;
                }
            }
            let mut red = DVector::<f64>::zeros(m);
            for a in 0..m {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += wcols[a * n + i] * v[i];
                }
                red[a] = self.rhs[n + a] - dot;
            }
            let chol = Cholesky::new(s_mat).ok_or(NotPositiveDefinite { index: n })?;
            xc = chol.solve(&red).iter().copied().collect();
        }

        // x_a = L⁻ᵀ (v − W x_c).
        let mut xa = v;
        for c in 0..m {
            for i in 0..n {
                xa[i] -= wcols[c * n + i] * xc[c];
            }
        }
        bwd(&band, &mut xa);

        xa.extend_from_slice(&xc);
        Ok(xa)
    }

    /// Dense copy of the full matrix (small problems and tests).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        let w = self.hbw + 1;
        for i in 0..self.n_band {
            for j in i.saturating_sub(self.hbw)..=i {
                let v = self.band[i * w + self.hbw - (i - j)];
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        for c in 0..self.n_border {
            for i in 0..self.n_band {
                let v = self.border[c * self.n_band + i];
                out[(i, self.n_band + c)] = v;
                out[(self.n_band + c, i)] = v;
            }
        }
        for a in 0..self.n_border {
            for b in 0..self.n_border {
                out[(self.n_band + a, self.n_band + b)] = self.corner[a * self.n_border + b];
            }
        }
        out
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }
}

/// Accumulates one whitened residual row into the normal equations:
/// `H += w²·JᵀJ`, `rhs += −w²·Jᵀr`.
pub fn accumulate_row(sys: &mut ArrowSystem, entries: &[(usize, f64)], residual: f64, weight: f64) {
    let w2 = weight * weight;
    for (k, &(a, va)) in entries.iter().enumerate() {
        sys.add_rhs(a, -w2 * va * residual);
        for &(b, vb) in &entries[k..] {
            sys.add(a, b, w2 * va * vb);
        }
    }
}
