//! Low-rank recovery of a hyperspectral matrix from sparse voxel samples.
//!
//! Minimizes
//!
//! ```text
//! sum_{(p,j) in O} (X_pj - u_p . v_j)^2
//!   + lambda (|U|_F^2 + |V|_F^2) + mu |L U|_F^2
//! ```
//!
//! by alternating exact linear solves: each V row is an r x r ridge system,
//! and U solves a spatially coupled normal system (data blocks + Tikhonov +
//! squared grid Laplacian) by Jacobi-preconditioned conjugate gradient.
//! All reductions run in a fixed order, so a reconstruction is bit-for-bit
//! reproducible regardless of thread count.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hypercube::HyperCube;
use crate::sampling::SampledData;

/// Solver knobs. `lambda` is the Tikhonov weight on both factors, `mu`
/// weighs spatial smoothness of the pixel factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub rank: usize,
    pub lambda: f64,
    pub mu: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Reserved for degenerate tie-breaking in the initializer; the default
    /// initialization is fully deterministic and does not consume it.
    pub seed: u64,
}

impl SolverConfig {
    /// Defaults with data-driven regularization: `lambda` is 1e-3 times the
    /// mean squared observed value, `mu` is 1e-2 of `lambda`.
    pub fn for_data(data: &SampledData, rank: usize) -> Self {
        let lambda = Self::default_lambda(data);
        Self {
            rank,
            lambda,
            mu: 1e-2 * lambda,
            max_iter: 200,
            rel_tol: 1e-6,
            cg_tol: 1e-8,
            cg_max_iter: 2000,
            seed: 0,
        }
    }

    pub fn default_lambda(data: &SampledData) -> f64 {
        let mean_sq =
            data.values.iter().map(|x| x * x).sum::<f64>() / data.values.len().max(1) as f64;
        1e-3 * mean_sq
    }

    fn validate(&self, n_pixels: usize, n_bands: usize) -> Result<()> {
        if self.rank == 0 || self.rank > n_pixels.min(n_bands) {
            return Err(Error::Parameter(format!(
                "rank {} outside 1..={}",
                self.rank,
                n_pixels.min(n_bands)
            )));
        }
        if !(self.lambda >= 0.0) || !(self.mu >= 0.0) {
            return Err(Error::Parameter("lambda and mu must be >= 0".into()));
        }
        if !(self.rel_tol > 0.0) || !(self.cg_tol > 0.0) {
            return Err(Error::Parameter("tolerances must be > 0".into()));
        }
        if self.max_iter == 0 || self.cg_max_iter == 0 {
            return Err(Error::Parameter("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// Factor matrices of the rank-r model `X ~ U V^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    /// n_pixels x r
    pub u: Array2<f64>,
    /// n_bands x r
    pub v: Array2<f64>,
}

impl FactorPair {
    /// Dense reconstruction `U V^T` (n_pixels x n_bands).
    pub fn product(&self) -> Array2<f64> {
        self.u.dot(&self.v.t())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Tolerance,
    MaxIter,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Tolerance => "tolerance",
            StopReason::MaxIter => "max_iter",
        }
    }
}

/// Objective trace and stopping diagnostics of one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// Objective after initialization, then after each full (U, V) sweep.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    /// Root mean square data residual over the observed voxels.
    pub rmse: f64,
}

// ---------------------------------------------------------------------------
// Observation index
// ---------------------------------------------------------------------------

/// Observed voxels grouped both by pixel and by band. Mask indices are
/// sorted pixel-major, so the per-pixel grouping is a pass over runs and the
/// per-band grouping is a counting sort.
struct ObsIndex {
    n_pixels: usize,
    n_bands: usize,
    pixel_ptr: Vec<usize>,
    band_of: Vec<u32>,
    pix_val: Vec<f64>,
    band_ptr: Vec<usize>,
    pix_of: Vec<u32>,
    band_val: Vec<f64>,
}

impl ObsIndex {
    fn build(data: &SampledData) -> Self {
        let nb = data.n_bands();
        let np = data.n_pixels();
        let m = data.values.len();
        let mut pixel_ptr = vec![0usize; np + 1];
        let mut band_ptr = vec![0usize; nb + 1];
        for &v in data.mask.indices() {
            pixel_ptr[v / nb + 1] += 1;
            band_ptr[v % nb + 1] += 1;
        }
        for p in 0..np {
            pixel_ptr[p + 1] += pixel_ptr[p];
        }
        for j in 0..nb {
            band_ptr[j + 1] += band_ptr[j];
        }
        let mut band_of = vec![0u32; m];
        let mut pix_val = vec![0.0; m];
        let mut pix_of = vec![0u32; m];
        let mut band_val = vec![0.0; m];
        let mut cursor = band_ptr.clone();
        for (t, &v) in data.mask.indices().iter().enumerate() {
            let (p, j) = (v / nb, v % nb);
            band_of[t] = j as u32;
            pix_val[t] = data.values[t];
            let slot = cursor[j];
            cursor[j] += 1;
            pix_of[slot] = p as u32;
            band_val[slot] = data.values[t];
        }
        Self { n_pixels: np, n_bands: nb, pixel_ptr, band_of, pix_val, band_ptr, pix_of, band_val }
    }
}

// ---------------------------------------------------------------------------
// Grid Laplacian
// ---------------------------------------------------------------------------

fn laplacian_into(src: &[f64], dst: &mut [f64], nx: usize, ny: usize, r: usize) {
    dst.par_chunks_mut(r).enumerate().for_each(|(p, out)| {
        let x = p % nx;
        let y = p / nx;
        out.fill(0.0);
        let mut deg = 0.0;
        let mut add = |q: usize, out: &mut [f64]| {
            for (o, s) in out.iter_mut().zip(&src[q * r..q * r + r]) {
                *o += s;
            }
        };
        if x > 0 {
            deg += 1.0;
            add(p - 1, out);
        }
        if x + 1 < nx {
            deg += 1.0;
            add(p + 1, out);
        }
        if y > 0 {
            deg += 1.0;
            add(p - nx, out);
        }
        if y + 1 < ny {
            deg += 1.0;
            add(p + nx, out);
        }
        for (o, s) in out.iter_mut().zip(&src[p * r..p * r + r]) {
            *o = deg * s - *o;
        }
    });
}

/// Column-wise 5-point grid Laplacian with replicated-edge (Neumann)
/// boundaries: `(L u)_p = sum_{q in N(p)} (u_p - u_q)` over the existing
/// 4-neighbors of pixel p.
pub fn laplacian_apply(u: &Array2<f64>, nx: usize, ny: usize) -> Result<Array2<f64>> {
    let (rows, r) = u.dim();
    if rows != nx * ny {
        return Err(Error::Shape(format!(
            "matrix has {rows} rows, grid {nx}x{ny} needs {}",
            nx * ny
        )));
    }
    let src = u.as_slice().expect("factor matrices use standard layout");
    let mut dst = vec![0.0; rows * r];
    laplacian_into(src, &mut dst, nx, ny, r);
    Ok(Array2::from_shape_vec((rows, r), dst).unwrap())
}

fn degree(p: usize, nx: usize, ny: usize) -> f64 {
    let x = p % nx;
    let y = p / nx;
    let mut d = 0.0;
    if x > 0 {
        d += 1.0;
    }
    if x + 1 < nx {
        d += 1.0;
    }
    if y > 0 {
        d += 1.0;
    }
    if y + 1 < ny {
        d += 1.0;
    }
    d
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

fn data_term(data: &SampledData, u: &[f64], v: &[f64], r: usize) -> f64 {
    let nb = data.n_bands();
    let mut acc = 0.0;
    for (t, &vox) in data.mask.indices().iter().enumerate() {
        let (p, j) = (vox / nb, vox % nb);
        let up = &u[p * r..p * r + r];
        let vj = &v[j * r..j * r + r];
        let fit: f64 = up.iter().zip(vj).map(|(a, b)| a * b).sum();
        let res = data.values[t] - fit;
        acc += res * res;
    }
    acc
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Regularized objective at the given factors.
pub fn objective(data: &SampledData, factors: &FactorPair, cfg: &SolverConfig) -> Result<f64> {
    let (np, r) = factors.u.dim();
    let (nb, rv) = factors.v.dim();
    if np != data.n_pixels() || nb != data.n_bands() || r != rv {
        return Err(Error::Shape(format!(
            "factors {np}x{r} / {nb}x{rv} do not match data {}x{}",
            data.n_pixels(),
            data.n_bands()
        )));
    }
    let us = factors.u.as_slice().unwrap();
    let vs = factors.v.as_slice().unwrap();
    let mut obj = data_term(data, us, vs, r);
    if cfg.lambda > 0.0 {
        obj += cfg.lambda * (frob_sq(us) + frob_sq(vs));
    }
    if cfg.mu > 0.0 {
        let lu = laplacian_apply(&factors.u, data.mask.nx, data.mask.ny)?;
        obj += cfg.mu * frob_sq(lu.as_slice().unwrap());
    }
    Ok(obj)
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Spectral initializer: V holds the top-r right singular vectors of the
/// zero-filled observation matrix, each scaled by the square root of its
/// singular value; U starts at zero. Deterministic for fixed input.
pub fn init_factors(data: &SampledData, cfg: &SolverConfig) -> Result<FactorPair> {
    let np = data.n_pixels();
    let nb = data.n_bands();
    cfg.validate(np, nb)?;
    let r = cfg.rank;

    // Gram matrix X0^T X0 of the zero-filled matrix, accumulated from the
    // per-pixel sparse spectra in fixed chunk order (parallel but exact).
    let index = ObsIndex::build(data);
    let chunk = 512usize;
    let n_chunks = np.div_ceil(chunk);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut g = vec![0.0; nb * nb];
            for p in c * chunk..((c + 1) * chunk).min(np) {
                let lo = index.pixel_ptr[p];
                let hi = index.pixel_ptr[p + 1];
                for s in lo..hi {
                    let (ja, va) = (index.band_of[s] as usize, index.pix_val[s]);
                    for t in lo..hi {
                        let (jb, vb) = (index.band_of[t] as usize, index.pix_val[t]);
                        g[ja * nb + jb] += va * vb;
                    }
                }
            }
            g
        })
        .collect();
    let mut gram = vec![0.0; nb * nb];
    for part in &partials {
        for (g, p) in gram.iter_mut().zip(part) {
            *g += p;
        }
    }

    let gram_m = nalgebra::DMatrix::from_row_slice(nb, nb, &gram);
    let eig = nalgebra::SymmetricEigen::new(gram_m);
    let mut order: Vec<usize> = (0..nb).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut v = Array2::<f64>::zeros((nb, r));
    for (k, &col) in order.iter().take(r).enumerate() {
        let sv = eig.eigenvalues[col].max(0.0).sqrt();
        let scale = sv.sqrt();
        let vec = eig.eigenvectors.column(col);
        // Canonical sign: largest-magnitude entry positive.
        let mut arg = 0;
        for (i, val) in vec.iter().enumerate() {
            if val.abs() > vec[arg].abs() {
                arg = i;
            }
        }
        let sign = if vec[arg] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..nb {
            v[[j, k]] = scale * sign * vec[j];
        }
    }
    Ok(FactorPair { u: Array2::zeros((np, r)), v })
}

// ---------------------------------------------------------------------------
// V update: independent r x r ridge solves per band
// ---------------------------------------------------------------------------

fn solve_small(a: &[f64], b: &[f64], r: usize) -> Option<Vec<f64>> {
    let m = nalgebra::DMatrix::from_row_slice(r, r, a);
    let rhs = nalgebra::DVector::from_row_slice(b);
    if let Some(chol) = m.clone().cholesky() {
        return Some(chol.solve(&rhs).iter().copied().collect());
    }
    m.lu().solve(&rhs).map(|s| s.iter().copied().collect())
}

fn update_v_indexed(index: &ObsIndex, u: &Array2<f64>, cfg: &SolverConfig) -> Result<Array2<f64>> {
    let r = u.ncols();
    let us = u.as_slice().unwrap();
    let rows: Vec<Result<Vec<f64>>> = (0..index.n_bands)
        .into_par_iter()
        .map(|j| {
            let mut a = vec![0.0; r * r];
            let mut b = vec![0.0; r];
            for s in index.band_ptr[j]..index.band_ptr[j + 1] {
                let p = index.pix_of[s] as usize;
                let x = index.band_val[s];
                let up = &us[p * r..p * r + r];
                for i in 0..r {
                    b[i] += x * up[i];
                    for k in 0..r {
                        a[i * r + k] += up[i] * up[k];
                    }
                }
            }
            for i in 0..r {
                a[i * r + i] += cfg.lambda;
            }
            solve_small(&a, &b, r).ok_or_else(|| {
                Error::RegularizationRequired(format!(
                    "normal system for band {j} is singular (lambda = {})",
                    cfg.lambda
                ))
            })
        })
        .collect();

    let mut v = Array2::<f64>::zeros((index.n_bands, r));
    for (j, row) in rows.into_iter().enumerate() {
        let row = row?;
        for (k, val) in row.into_iter().enumerate() {
            v[[j, k]] = val;
        }
    }
    Ok(v)
}

/// Exact minimizer of the objective over V with U fixed: each band solves
/// `(U_O^T U_O + lambda I) v_j = U_O^T x_j` over its observed pixels.
pub fn update_v(data: &SampledData, u: &Array2<f64>, cfg: &SolverConfig) -> Result<Array2<f64>> {
    if u.nrows() != data.n_pixels() {
        return Err(Error::Shape(format!(
            "U has {} rows, data has {} pixels",
            u.nrows(),
            data.n_pixels()
        )));
    }
    update_v_indexed(&ObsIndex::build(data), u, cfg)
}

// ---------------------------------------------------------------------------
// U update: coupled normal equations solved by preconditioned CG
// ---------------------------------------------------------------------------

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct USystem {
    /// Per-pixel r x r data blocks sum v_j v_j^T over observed bands.
    blocks: Vec<f64>,
    rhs: Vec<f64>,
    precond: Vec<f64>,
    nx: usize,
    ny: usize,
    r: usize,
}

impl USystem {
    fn assemble(index: &ObsIndex, v: &Array2<f64>, cfg: &SolverConfig, nx: usize, ny: usize) -> Self {
        let r = v.ncols();
        let np = index.n_pixels;
        let vs = v.as_slice().unwrap();
        let mut blocks = vec![0.0; np * r * r];
        let mut rhs = vec![0.0; np * r];
        blocks
            .par_chunks_mut(r * r)
            .zip(rhs.par_chunks_mut(r))
            .enumerate()
            .for_each(|(p, (bl, rh))| {
                for t in index.pixel_ptr[p]..index.pixel_ptr[p + 1] {
                    let j = index.band_of[t] as usize;
                    let x = index.pix_val[t];
                    let vj = &vs[j * r..j * r + r];
                    for i in 0..r {
                        rh[i] += x * vj[i];
                        for k in 0..r {
                            bl[i * r + k] += vj[i] * vj[k];
                        }
                    }
                }
            });

        // Jacobi preconditioner: block diagonal + lambda + mu * diag(L^2),
        // where diag(L^2)_p = deg_p^2 + deg_p on the 4-neighbor grid.
        let mut precond = vec![0.0; np * r];
        for p in 0..np {
            let d = degree(p, nx, ny);
            let lap2 = d * d + d;
            for i in 0..r {
                let m = blocks[p * r * r + i * r + i] + cfg.lambda + cfg.mu * lap2;
                precond[p * r + i] = if m > 0.0 { m } else { 1.0 };
            }
        }
        Self { blocks, rhs, precond, nx, ny, r }
    }

    fn apply(&self, x: &[f64], out: &mut [f64], tmp1: &mut [f64], tmp2: &mut [f64], lambda: f64, mu: f64) {
        let r = self.r;
        if mu > 0.0 {
            laplacian_into(x, tmp1, self.nx, self.ny, r);
            laplacian_into(tmp1, tmp2, self.nx, self.ny, r);
        }
        let blocks = &self.blocks;
        let use_lap = mu > 0.0;
        let tmp2_ref: &[f64] = tmp2;
        out.par_chunks_mut(r).enumerate().for_each(|(p, o)| {
            let bl = &blocks[p * r * r..(p + 1) * r * r];
            let xp = &x[p * r..p * r + r];
            for i in 0..r {
                let mut acc = lambda * xp[i];
                for k in 0..r {
                    acc += bl[i * r + k] * xp[k];
                }
                if use_lap {
                    acc += mu * tmp2_ref[p * r + i];
                }
                o[i] = acc;
            }
        });
    }

    /// Preconditioned conjugate gradient from `x0` to a relative residual of
    /// `cg_tol`.
    fn solve(&self, x0: &[f64], cfg: &SolverConfig) -> Result<Vec<f64>> {
        let n = self.rhs.len();
        let mut x = x0.to_vec();
        let mut ax = vec![0.0; n];
        let mut tmp1 = vec![0.0; n];
        let mut tmp2 = vec![0.0; n];
        let b_norm = dot(&self.rhs, &self.rhs).sqrt();
        if b_norm == 0.0 {
            return Ok(vec![0.0; n]);
        }

        self.apply(&x, &mut ax, &mut tmp1, &mut tmp2, cfg.lambda, cfg.mu);
        let mut res: Vec<f64> = self.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut resid = dot(&res, &res).sqrt() / b_norm;
        if resid <= cfg.cg_tol {
            return Ok(x);
        }
        let mut z: Vec<f64> = res.iter().zip(&self.precond).map(|(r, m)| r / m).collect();
        let mut p = z.clone();
        let mut rz = dot(&res, &z);

        for _ in 0..cfg.cg_max_iter {
            self.apply(&p, &mut ax, &mut tmp1, &mut tmp2, cfg.lambda, cfg.mu);
            let pap = dot(&p, &ax);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                res[i] -= alpha * ax[i];
            }
            resid = dot(&res, &res).sqrt() / b_norm;
            if resid <= cfg.cg_tol {
                return Ok(x);
            }
            for i in 0..n {
                z[i] = res[i] / self.precond[i];
            }
            let rz_new = dot(&res, &z);
            let beta = rz_new / rz;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            rz = rz_new;
        }
        Err(Error::CgNoConvergence { iterations: cfg.cg_max_iter, residual: resid })
    }
}

fn update_u_indexed(
    index: &ObsIndex,
    v: &Array2<f64>,
    cfg: &SolverConfig,
    nx: usize,
    ny: usize,
    warm: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    let r = v.ncols();
    let np = index.n_pixels;
    let system = USystem::assemble(index, v, cfg, nx, ny);
    let zeros;
    let x0: &[f64] = match warm {
        Some(u) => u.as_slice().unwrap(),
        None => {
            zeros = vec![0.0; np * r];
            &zeros
        }
    };
    let x = system.solve(x0, cfg)?;
    Ok(Array2::from_shape_vec((np, r), x).unwrap())
}

/// Exact minimizer of the objective over U with V fixed, up to the CG
/// tolerance: solves `(blockdiag(B_p) + lambda I + mu L^T L) vec(U) = rhs`.
pub fn update_u(data: &SampledData, v: &Array2<f64>, cfg: &SolverConfig) -> Result<Array2<f64>> {
    if v.nrows() != data.n_bands() {
        return Err(Error::Shape(format!(
            "V has {} rows, data has {} bands",
            v.nrows(),
            data.n_bands()
        )));
    }
    update_u_indexed(&ObsIndex::build(data), v, cfg, data.mask.nx, data.mask.ny, None)
}

// ---------------------------------------------------------------------------
// Full reconstruction
// ---------------------------------------------------------------------------

/// Alternating reconstruction: spectral init, then (update U, update V)
/// sweeps until the relative objective change drops below `rel_tol` or
/// `max_iter` is reached. Returns the reconstructed cube, the factors, and
/// the convergence report.
pub fn reconstruct(
    data: &SampledData,
    cfg: &SolverConfig,
) -> Result<(HyperCube, FactorPair, ConvergenceReport)> {
    let mut factors = init_factors(data, cfg)?;
    let index = ObsIndex::build(data);
    let (nx, ny) = (data.mask.nx, data.mask.ny);

    let mut obj = objective(data, &factors, cfg)?;
    let mut trace = vec![obj];
    let mut stop = StopReason::MaxIter;
    let mut iterations = cfg.max_iter;

    for it in 1..=cfg.max_iter {
        factors.u = update_u_indexed(&index, &factors.v, cfg, nx, ny, Some(&factors.u))?;
        factors.v = update_v_indexed(&index, &factors.u, cfg)?;
        let obj_new = objective(data, &factors, cfg)?;
        if !obj_new.is_finite() {
            return Err(Error::Divergence(format!(
                "objective became non-finite at iteration {it}"
            )));
        }
        // Exact alternating minimization cannot increase the objective; the
        // inexact CG step is allowed a small slack.
        debug_assert!(
            obj_new <= obj * (1.0 + 10.0 * cfg.cg_tol) + 1e-12,
            "objective rose from {obj} to {obj_new} at iteration {it}"
        );
        trace.push(obj_new);
        let converged = (obj - obj_new).abs() <= cfg.rel_tol * obj;
        obj = obj_new;
        if converged {
            stop = StopReason::Tolerance;
            iterations = it;
            break;
        }
    }

    let us = factors.u.as_slice().unwrap();
    let vs = factors.v.as_slice().unwrap();
    let rmse = (data_term(data, us, vs, cfg.rank) / data.values.len() as f64).sqrt();

    let xhat = factors.product();
    if xhat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("reconstruction contains non-finite values".into()));
    }
    let cube = HyperCube::new(nx, ny, data.axis, xhat.into_iter().collect())?;
    let report = ConvergenceReport { objective_trace: trace, iterations, stop_reason: stop, rmse };
    Ok((cube, factors, report))
}
