//! Dense primal-dual interior-point solver for max-margin SOS programs.
//!
//! The program has block-diagonal PSD variables `X_k`, one free scalar
//! `lambda` and linear equalities
//!
//! ```text
//!   Σ_k S_k H_k(X_k) + lambda · a = b,     a = Σ_k S_k H_k(I)
//! ```
//!
//! where `H_k` sums Gram entries into the monomials of `basis_k ⊗ basis_k`
//! and `S_k` multiplies by the block's multiplier polynomial. Maximizing
//! `lambda` and setting `G_k = X_k + lambda·I` recovers Gram matrices with
//! `G_k ⪰ lambda·I`. The solver uses the HKM search direction with
//! Mehrotra predictor-corrector steps from an infeasible start.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// One PSD block with Hankel-like structure.
#[derive(Clone, Debug)]
pub(crate) struct SdpBlock {
    pub n: usize,
    /// Intermediate monomial index of Gram entry `(i, j)`, stored at `i + j·n`.
    pub pair_index: Vec<u32>,
    /// Ordered Gram index pairs contributing to each intermediate monomial.
    pub pairs: Vec<Vec<(u32, u32)>>,
    /// Multiplier map: intermediate monomial -> (equality row, coefficient).
    pub mult: Vec<Vec<(u32, f64)>>,
}

impl SdpBlock {
    pub fn n_inter(&self) -> usize {
        self.pairs.len()
    }

    /// `H(X)`: sums entries per intermediate monomial.
    fn hankel(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut h = vec![0.0; self.n_inter()];
        for (k, &v) in x.as_slice().iter().enumerate() {
            h[self.pair_index[k] as usize] += v;
        }
        h
    }

    /// Adds `S H(X)` into `out`.
    fn apply(&self, x: &DMatrix<f64>, out: &mut DVector<f64>) {
        let h = self.hankel(x);
        for (g, row) in self.mult.iter().enumerate() {
            for &(r, c) in row {
                out[r as usize] += c * h[g];
            }
        }
    }

    /// `H*(S* y)`.
    fn adjoint(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let w: Vec<f64> =
            self.mult.iter().map(|row| row.iter().map(|&(r, c)| c * y[r as usize]).sum()).collect();
        DMatrix::from_iterator(self.n, self.n, self.pair_index.iter().map(|&g| w[g as usize]))
    }

    /// Adds this block's Schur contribution `S M_H Sᵀ` to `m`, where
    /// `M_H[γ, δ] = tr(A_γ X A_δ Z⁻¹)`.
    fn add_schur(&self, x: &DMatrix<f64>, zinv: &DMatrix<f64>, m: &mut DMatrix<f64>) {
        let n = self.n;
        let ni = self.n_inter();
        let mut mh = DMatrix::<f64>::zeros(ni, ni);
        let mut p = DMatrix::<f64>::zeros(n, n);
        for (g, prs) in self.pairs.iter().enumerate() {
            let k = prs.len();
            let mut xg = DMatrix::<f64>::zeros(n, k);
            let mut zg = DMatrix::<f64>::zeros(k, n);
            for (t, &(a, b)) in prs.iter().enumerate() {
                xg.column_mut(t).copy_from(&x.column(b as usize));
                let za = zinv.column(a as usize);
                for c in 0..n {
                    zg[(t, c)] = za[c];
                }
            }
            // P[c, d] = Σ_{(a,b)} X[c, b] Zinv[a, d]
            p.gemm(1.0, &xg, &zg, 0.0);
            let mut col = mh.column_mut(g);
            for (idx, &v) in p.as_slice().iter().enumerate() {
                col[self.pair_index[idx] as usize] += v;
            }
        }
        // m += S mh Sᵀ
        let identity_map = self.mult.iter().all(|row| row.len() == 1 && row[0].1 == 1.0);
        if identity_map {
            let rows: Vec<usize> = self.mult.iter().map(|row| row[0].0 as usize).collect();
            for (gd, &rd) in rows.iter().enumerate() {
                for (gg, &rg) in rows.iter().enumerate() {
                    m[(rg, rd)] += mh[(gg, gd)];
                }
            }
        } else {
            let nrow = m.nrows();
            let mut t = DMatrix::<f64>::zeros(nrow, ni);
            for gd in 0..ni {
                for (gg, row) in self.mult.iter().enumerate() {
                    let v = mh[(gg, gd)];
                    for &(r, c) in row {
                        t[(r as usize, gd)] += c * v;
                    }
                }
            }
            for (gd, row) in self.mult.iter().enumerate() {
                for &(s, c) in row {
                    let tc = t.column(gd);
                    let mut mc = m.column_mut(s as usize);
                    mc.axpy(c, &tc, 1.0);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SdpProblem {
    pub m: usize,
    pub b: DVector<f64>,
    pub blocks: Vec<SdpBlock>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct IpmOptions {
    pub tol_eq: f64,
    pub tol_psd: f64,
    pub max_iter: usize,
    pub early_exit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum IpmStatus {
    /// Converged to optimality.
    Converged,
    /// Precision ran out before the gap closed; the last accurate iterate.
    Stalled,
    /// Stopped once a nonnegative margin with small residual was found.
    EarlyCertificate,
    /// Stopped once the dual bound proved the margin negative.
    EarlyNegative,
    MaxIter,
    /// Numerical failure before any accurate iterate.
    Breakdown,
}

struct Snapshot {
    lambda: f64,
    dual_bound: f64,
    dinf: f64,
    xs: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug)]
pub(crate) struct IpmSolution {
    pub status: IpmStatus,
    /// Smallest eigenvalue over the returned Gram matrices.
    pub margin: f64,
    /// Upper bound on the optimal margin from the dual iterate.
    pub dual_bound: f64,
    pub dual_infeasibility: f64,
    /// Gram matrices `X_k + lambda·I` after the final equality projection.
    pub gram: Vec<DMatrix<f64>>,
    pub residual: f64,
    pub iterations: usize,
}

impl IpmSolution {
    fn breakdown(iterations: usize) -> Self {
        IpmSolution {
            status: IpmStatus::Breakdown,
            margin: f64::NAN,
            dual_bound: f64::NAN,
            dual_infeasibility: f64::INFINITY,
            gram: Vec::new(),
            residual: f64::INFINITY,
            iterations,
        }
    }
}

/// Duality gap `Σ⟨X_k, Z_k⟩` (relative to `1 + |λ|`) accepted as optimal.
const TIGHT_GAP: f64 = 1e-8;
/// Iterations without halving the gap before the solve counts as stalled.
const STALL_ITERS: usize = 5;

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Largest `alpha` with `X + alpha·dX ⪰ 0`, or infinity.
fn max_step(chol: &Cholesky<f64, Dyn>, dx: &DMatrix<f64>) -> Option<f64> {
    let l = chol.l();
    let w1 = l.solve_lower_triangular(dx)?;
    let mut w = l.solve_lower_triangular(&w1.transpose())?;
    symmetrize(&mut w);
    let min_eig = w.symmetric_eigenvalues().min();
    if !min_eig.is_finite() {
        return None;
    }
    Some(if min_eig < 0.0 { -1.0 / min_eig } else { f64::INFINITY })
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
}

impl SdpProblem {
    fn apply(&self, xs: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for (blk, x) in self.blocks.iter().zip(xs) {
            blk.apply(x, &mut out);
        }
        out
    }

    fn lambda_column(&self) -> DVector<f64> {
        let ids: Vec<DMatrix<f64>> = self.blocks.iter().map(|b| DMatrix::identity(b.n, b.n)).collect();
        self.apply(&ids)
    }

    /// Cholesky factor of `A A* + a aᵀ`, the Gram operator of the equality
    /// map over (X, lambda).
    fn projector(&self, a: &DVector<f64>) -> Option<Cholesky<f64, Dyn>> {
        let mut k = a * a.transpose();
        for blk in &self.blocks {
            for (g, row) in blk.mult.iter().enumerate() {
                let cnt = blk.pairs[g].len() as f64;
                for &(r, cr) in row {
                    for &(q, cq) in row {
                        k[(r as usize, q as usize)] += cnt * cr * cq;
                    }
                }
            }
        }
        Cholesky::new(k)
    }

    /// Least-norm correction `(A*(c), aᵀc)` with `c = K⁻¹ e`, which removes an
    /// equality defect `e`.
    fn correction(&self, proj: &Cholesky<f64, Dyn>, a: &DVector<f64>, e: &DVector<f64>) -> (Vec<DMatrix<f64>>, f64) {
        let c = proj.solve(e);
        (self.blocks.iter().map(|blk| blk.adjoint(&c)).collect(), a.dot(&c))
    }

    /// Equality residual `b - A(X) - lambda·a`.
    pub fn residual(&self, xs: &[DMatrix<f64>], lambda: f64) -> DVector<f64> {
        let a = self.lambda_column();
        &self.b - self.apply(xs) - a * lambda
    }

    pub fn solve(&self, opts: &IpmOptions) -> IpmSolution {
        let m = self.m;
        let a = self.lambda_column();
        let ntot: usize = self.blocks.iter().map(|b| b.n).sum();
        let Some(proj) = self.projector(&a) else {
            return IpmSolution::breakdown(0);
        };

        let mut xs: Vec<DMatrix<f64>> = self.blocks.iter().map(|b| DMatrix::identity(b.n, b.n) * 10.0).collect();
        let mut zs: Vec<DMatrix<f64>> = self.blocks.iter().map(|b| DMatrix::identity(b.n, b.n)).collect();
        let mut y = DVector::<f64>::zeros(m);
        let mut lambda = 0.0;

        let finish = |status, snap: Snapshot, iterations| {
            let mut xs = snap.xs;
            let mut lambda = snap.lambda;
            let (dxs, dl) = self.correction(&proj, &a, &self.residual(&xs, lambda));
            for (x, dx) in xs.iter_mut().zip(&dxs) {
                *x += dx;
            }
            lambda += dl;
            let residual = self.residual(&xs, lambda).amax();
            let margin = xs
                .iter()
                .map(|x| x.clone().symmetric_eigenvalues().min() + lambda)
                .fold(f64::INFINITY, f64::min);
            let x = xs
                .into_iter()
                .map(|x| {
                    let n = x.nrows();
                    x + DMatrix::identity(n, n) * lambda
                })
                .collect();
            IpmSolution {
                status,
                margin,
                dual_bound: snap.dual_bound,
                dual_infeasibility: snap.dinf,
                gram: x,
                residual,
                iterations,
            }
        };
        // Latest iterate with an accurate equality residual. Near the optimum
        // the search direction loses precision and later iterates may drift.
        let mut best: Option<Snapshot> = None;
        let mut best_gap = (f64::INFINITY, 0usize);
        let fallback = |best: Option<Snapshot>, iter: usize| match best {
            Some(snap) => finish(IpmStatus::Stalled, snap, iter),
            None => IpmSolution::breakdown(iter),
        };

        for iter in 0..opts.max_iter {
            let rp = &self.b - self.apply(&xs) - &a * lambda;
            let rds: Vec<DMatrix<f64>> =
                self.blocks.iter().zip(&zs).map(|(blk, z)| -blk.adjoint(&y) - z).collect();
            let rf = -1.0 - a.dot(&y);
            let mu: f64 = xs.iter().zip(&zs).map(|(x, z)| inner(x, z)).sum::<f64>() / ntot as f64;
            let gap_abs = mu * ntot as f64;
            let pinf = rp.amax();
            let dinf = rds.iter().map(|r| r.amax()).fold(rf.abs(), f64::max);
            let dual_bound = -self.b.dot(&y);

            if !(pinf.is_finite() && dinf.is_finite() && mu.is_finite()) {
                return fallback(best, iter);
            }
            let snap = |xs: &Vec<DMatrix<f64>>| Snapshot { lambda, dual_bound, dinf, xs: xs.clone() };
            let accurate = pinf <= 0.1 * opts.tol_eq;
            if opts.early_exit {
                if accurate && lambda >= 0.0 {
                    return finish(IpmStatus::EarlyCertificate, snap(&xs), iter);
                }
                if dinf <= 1e-10 && dual_bound < -100.0 * opts.tol_psd {
                    return finish(IpmStatus::EarlyNegative, snap(&xs), iter);
                }
            }
            if accurate && dinf <= 1e-9 && gap_abs <= TIGHT_GAP * (1.0 + lambda.abs()) {
                return finish(IpmStatus::Converged, snap(&xs), iter);
            }
            if accurate {
                best = Some(snap(&xs));
            } else if pinf > opts.tol_eq && best.is_some() {
                return fallback(best, iter);
            }
            if gap_abs < 0.5 * best_gap.0 {
                best_gap = (gap_abs, iter);
            } else if iter - best_gap.1 >= STALL_ITERS && best.is_some() {
                return fallback(best, iter);
            }

            // Factorizations.
            let mut zinvs = Vec::with_capacity(zs.len());
            let mut xchols = Vec::with_capacity(xs.len());
            let mut zchols = Vec::with_capacity(zs.len());
            for (x, z) in xs.iter().zip(&zs) {
                let (Some(cx), Some(cz)) = (Cholesky::new(x.clone()), Cholesky::new(z.clone())) else {
                    return fallback(best, iter);
                };
                let mut zi = cz.inverse();
                symmetrize(&mut zi);
                zinvs.push(zi);
                xchols.push(cx);
                zchols.push(cz);
            }
            let mut schur = DMatrix::<f64>::zeros(m, m);
            for ((blk, x), zi) in self.blocks.iter().zip(&xs).zip(&zinvs) {
                blk.add_schur(x, zi, &mut schur);
            }
            symmetrize(&mut schur);
            let diag_max = schur.diagonal().amax();
            let schur_copy = schur.clone();
            let Some(schol) = factor_schur(schur, diag_max) else {
                return fallback(best, iter);
            };
            // Cholesky solve plus one step of iterative refinement.
            let solve = |rhs: &DVector<f64>| {
                let mut u = schol.solve(rhs);
                let r = rhs - &schur_copy * &u;
                u += schol.solve(&r);
                u
            };
            let w = solve(&a);
            let aw = a.dot(&w);

            // Direction for a given centering target and second-order term.
            let direction = |sigma_mu: f64, corr: Option<&[DMatrix<f64>]>| {
                let mut rmats = Vec::with_capacity(xs.len());
                for k in 0..xs.len() {
                    let x = &xs[k];
                    let zi = &zinvs[k];
                    let mut r = zi * sigma_mu - x - x * &rds[k] * zi;
                    if let Some(c) = corr {
                        r -= &c[k] * zi;
                    }
                    rmats.push(r);
                }
                let h = &rp - self.apply(&rmats);
                let u = solve(&h);
                let dl = (a.dot(&u) - rf) / aw;
                let dy = u - &w * dl;
                let mut dxs = Vec::with_capacity(xs.len());
                let mut dzs = Vec::with_capacity(xs.len());
                for (k, blk) in self.blocks.iter().enumerate() {
                    let aty = blk.adjoint(&dy);
                    let dz = &rds[k] - &aty;
                    let mut dx = &rmats[k] + &xs[k] * &aty * &zinvs[k];
                    symmetrize(&mut dx);
                    dxs.push(dx);
                    dzs.push(dz);
                }
                (dxs, dl, dy, dzs)
            };
            let steps = |dxs: &[DMatrix<f64>], dzs: &[DMatrix<f64>]| -> Option<(f64, f64)> {
                let mut ap = f64::INFINITY;
                let mut ad = f64::INFINITY;
                for k in 0..dxs.len() {
                    ap = ap.min(max_step(&xchols[k], &dxs[k])?);
                    ad = ad.min(max_step(&zchols[k], &dzs[k])?);
                }
                Some((ap, ad))
            };

            // Predictor.
            let (dxp, _, _, dzp) = direction(0.0, None);
            let Some((app, adp)) = steps(&dxp, &dzp) else {
                return fallback(best, iter);
            };
            let app = app.min(1.0);
            let adp = adp.min(1.0);
            let mut mu_aff = 0.0;
            for k in 0..xs.len() {
                let xa = &xs[k] + &dxp[k] * app;
                let za = &zs[k] + &dzp[k] * adp;
                mu_aff += inner(&xa, &za);
            }
            mu_aff /= ntot as f64;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

            // Corrector.
            let corr: Vec<DMatrix<f64>> = dxp.iter().zip(&dzp).map(|(dx, dz)| dx * dz).collect();
            let (mut dxs, mut dl, dy, dzs) = direction(sigma * mu, Some(&corr));
            let defect = &rp - self.apply(&dxs) - &a * dl;
            let (fix, fix_l) = self.correction(&proj, &a, &defect);
            for (dx, f) in dxs.iter_mut().zip(&fix) {
                *dx += f;
            }
            dl += fix_l;
            let Some((ap, ad)) = steps(&dxs, &dzs) else {
                return fallback(best, iter);
            };
            let tau = 0.9 + 0.09 * app.min(adp);
            let ap = (tau * ap).min(1.0);
            let ad = (tau * ad).min(1.0);

            for k in 0..xs.len() {
                xs[k] += &dxs[k] * ap;
                zs[k] += &dzs[k] * ad;
                symmetrize(&mut xs[k]);
                symmetrize(&mut zs[k]);
            }
            lambda += ap * dl;
            y += dy * ad;
        }
        let dual_bound = -self.b.dot(&y);
        let snap = Snapshot { lambda, dual_bound, dinf: f64::INFINITY, xs };
        finish(IpmStatus::MaxIter, snap, opts.max_iter)
    }
}

/// Cholesky of the Schur complement with a tiny diagonal shift as fallback.
fn factor_schur(schur: DMatrix<f64>, diag_max: f64) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(schur.clone()) {
        return Some(c);
    }
    let mut shifted = schur;
    for shift in [1e-14, 1e-12, 1e-10] {
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += shift * diag_max;
        }
        if let Some(c) = Cholesky::new(shifted.clone()) {
            return Some(c);
        }
    }
    None
}
