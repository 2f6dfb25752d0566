//! Thin-plate-spline warping for the clothes-deformation stage.
//!
//! Control points live in normalized coordinates `[-1, 1]^2` (see
//! [`crate::raster::norm_coord`]). The spline with kernel
//! `U(r) = r^2 log r^2` interpolates `src -> dst` exactly at zero
//! regularization and minimizes the bending energy among all interpolants.
//!
//! Two routes produce sampling grids: solving for explicit spline
//! coefficients ([`solve_tps`] + [`make_sampling_grid`]), and a precomputed
//! linear basis ([`tps_linear_basis`]) that maps destination control points
//! straight to grid coordinates — the map is linear in `dst` for a fixed
//! control layout, which is what makes the warp conveniently differentiable.
//! Both routes are kept and cross-checked in tests.

use thiserror::Error;

use crate::linalg::{self, LinalgError};
use crate::raster::{norm_coord, unnorm_coord, Raster};
use crate::Real;

#[derive(Debug, Error)]
pub enum TpsError {
    #[error("thin-plate spline needs at least 3 control points, got {0}")]
    TooFewPoints(usize),
    #[error("src has {src} control points but dst has {dst}")]
    CountMismatch { src: usize, dst: usize },
    #[error("regularization must be nonnegative, got {0}")]
    NegativeReg(f64),
    #[error(
        "TPS system is singular (control points may be collinear or duplicated); \
         increase the regularization or perturb the points: {0}"
    )]
    Singular(LinalgError),
}

/// Kernel on squared distance: `U = r^2 log(r^2)`, extended by continuity
/// with `U(0) = 0`.
#[inline]
pub fn kernel_u<R: Real>(r2: R) -> R {
    if r2 <= R::zero() {
        R::zero()
    } else {
        r2 * r2.ln()
    }
}

/// Solved thin-plate spline `f(p) = A [1 p]^T + sum_i w_i U(|p - src_i|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsParams<R> {
    pub src: Vec<[R; 2]>,
    pub dst: Vec<[R; 2]>,
    /// Rows are output dims (x, y); columns multiply (1, x, y).
    pub affine: [[R; 3]; 2],
    pub weights: Vec<[R; 2]>,
    pub reg: R,
}

impl<R: Real> TpsParams<R> {
    /// Identity map over the given control layout (no solve needed).
    pub fn identity(src: Vec<[R; 2]>) -> Self {
        let n = src.len();
        let zero = R::zero();
        let one = R::one();
        Self {
            dst: src.clone(),
            src,
            affine: [[zero, one, zero], [zero, zero, one]],
            weights: vec![[zero; 2]; n],
            reg: zero,
        }
    }

    /// Evaluates the spline at a normalized point.
    pub fn apply(&self, p: [R; 2]) -> [R; 2] {
        let mut out = [R::zero(); 2];
        for d in 0..2 {
            let a = &self.affine[d];
            out[d] = a[0] + a[1] * p[0] + a[2] * p[1];
        }
        for (w, s) in self.weights.iter().zip(&self.src) {
            let dx = p[0] - s[0];
            let dy = p[1] - s[1];
            let u = kernel_u(dx * dx + dy * dy);
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }

    /// Checks the side conditions `sum w = 0` and `sum w . src = 0` that any
    /// proper TPS solution satisfies (tolerance 1e-6).
    pub fn check_side_conditions(&self) -> Result<(), String> {
        for d in 0..2 {
            let s0: f64 = self.weights.iter().map(|w| w[d].to_f64_lossless()).sum();
            let sx: f64 = self
                .weights
                .iter()
                .zip(&self.src)
                .map(|(w, s)| w[d].to_f64_lossless() * s[0].to_f64_lossless())
                .sum();
            let sy: f64 = self
                .weights
                .iter()
                .zip(&self.src)
                .map(|(w, s)| w[d].to_f64_lossless() * s[1].to_f64_lossless())
                .sum();
            for (name, v) in [("sum w", s0), ("sum w*x", sx), ("sum w*y", sy)] {
                if v.abs() > 1e-6 {
                    return Err(format!("side condition {name} = {v:.3e} exceeds 1e-6 (dim {d})"));
                }
            }
        }
        Ok(())
    }
}

/// Row-major `(K+3) x (K+3)` system matrix `[[K + reg I, P], [P^T, 0]]`
/// where `P` rows are `[1, x_i, y_i]`, plus the bare kernel matrix.
fn build_system<R: Real>(src: &[[R; 2]], reg: R) -> (Vec<R>, Vec<R>) {
    let k = src.len();
    let n = k + 3;
    let mut kernel = vec![R::zero(); k * k];
    for i in 0..k {
        for j in 0..k {
            let dx = src[i][0] - src[j][0];
            let dy = src[i][1] - src[j][1];
            kernel[i * k + j] = kernel_u(dx * dx + dy * dy);
        }
    }
    let mut l = vec![R::zero(); n * n];
    for i in 0..k {
        for j in 0..k {
            l[i * n + j] = kernel[i * k + j];
        }
        l[i * n + i] += reg;
        l[i * n + k] = R::one();
        l[i * n + k + 1] = src[i][0];
        l[i * n + k + 2] = src[i][1];
        l[(k) * n + i] = R::one();
        l[(k + 1) * n + i] = src[i][0];
        l[(k + 2) * n + i] = src[i][1];
    }
    (l, kernel)
}

fn validate_inputs<R: Real>(src: &[[R; 2]], dst: &[[R; 2]], reg: R) -> Result<(), TpsError> {
    if src.len() < 3 {
        return Err(TpsError::TooFewPoints(src.len()));
    }
    if src.len() != dst.len() {
        return Err(TpsError::CountMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if reg < R::zero() {
        return Err(TpsError::NegativeReg(reg.to_f64_lossless()));
    }
    Ok(())
}

/// Solves the `(K+3) x (K+3)` TPS system for both output dimensions.
///
/// With `reg = 0` the returned map interpolates (`f(src_i) = dst_i`);
/// positive `reg` trades interpolation accuracy for smoothness.
pub fn solve_tps<R: Real>(src: &[[R; 2]], dst: &[[R; 2]], reg: R) -> Result<TpsParams<R>, TpsError> {
    validate_inputs(src, dst, reg)?;
    let k = src.len();
    let n = k + 3;
    let (l, _) = build_system(src, reg);
    let mut b = vec![R::zero(); n * 2];
    for i in 0..k {
        b[i * 2] = dst[i][0];
        b[i * 2 + 1] = dst[i][1];
    }
    let sol = linalg::solve(l, b, n, 2).map_err(TpsError::Singular)?;
    let weights = (0..k).map(|i| [sol[i * 2], sol[i * 2 + 1]]).collect();
    let affine = [
        [sol[k * 2], sol[(k + 1) * 2], sol[(k + 2) * 2]],
        [sol[k * 2 + 1], sol[(k + 1) * 2 + 1], sol[(k + 2) * 2 + 1]],
    ];
    Ok(TpsParams {
        src: src.to_vec(),
        dst: dst.to_vec(),
        affine,
        weights,
        reg,
    })
}

/// Bending energy `w_x^T K w_x + w_y^T K w_y`: zero exactly for affine maps,
/// positive for genuinely bent warps. (The whole-plane integral of squared
/// second derivatives equals `16 pi` times this quantity for kernel
/// `U = r^2 log r^2`.)
pub fn bending_energy<R: Real>(params: &TpsParams<R>) -> R {
    let k = params.src.len();
    let (_, kernel) = build_system(&params.src, R::zero());
    let mut total = R::zero();
    for d in 0..2 {
        for i in 0..k {
            for j in 0..k {
                total += params.weights[i][d] * kernel[i * k + j] * params.weights[j][d];
            }
        }
    }
    total
}

/// Dense grid of normalized source coordinates, `coords[i * w + j] = [x, y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid<R> {
    pub h: usize,
    pub w: usize,
    pub coords: Vec<[R; 2]>,
}

impl<R: Real> SamplingGrid<R> {
    /// The canonical mesh: every pixel samples itself.
    pub fn identity(h: usize, w: usize) -> Self {
        let mut coords = Vec::with_capacity(h * w);
        for i in 0..h {
            let y = R::from_f64_approx(norm_coord(i as f64, h));
            for j in 0..w {
                coords.push([R::from_f64_approx(norm_coord(j as f64, w)), y]);
            }
        }
        Self { h, w, coords }
    }
}

/// Evaluates the spline at every pixel center of an `h x w` grid.
pub fn make_sampling_grid<R: Real>(params: &TpsParams<R>, h: usize, w: usize) -> SamplingGrid<R> {
    let mut coords = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = R::from_f64_approx(norm_coord(i as f64, h));
        for j in 0..w {
            let x = R::from_f64_approx(norm_coord(j as f64, w));
            coords.push(params.apply([x, y]));
        }
    }
    SamplingGrid { h, w, coords }
}

/// Bilinear sampling of `image` at the grid's normalized coordinates with
/// border-clamp padding. Positions and blending run in f64; positions
/// within the grid scalar's own rounding noise of a pixel center snap to
/// it, so an identity grid reproduces inputs bit-for-bit even when grid
/// coordinates were stored at lower precision.
pub fn warp_image<T: Real>(image: &Raster<T>, grid: &SamplingGrid<T>) -> Raster<T> {
    let (ih, iw) = (image.height(), image.width());
    let snap = T::epsilon().to_f64_lossless() * ih.max(iw) as f64 * 4.0;
    let align = |v: f64| {
        let r = v.round();
        if (v - r).abs() < snap {
            r
        } else {
            v
        }
    };
    let mut out = Raster::zeros(image.channels(), grid.h, grid.w);
    for i in 0..grid.h {
        for j in 0..grid.w {
            let [cx, cy] = grid.coords[i * grid.w + j];
            let x = align(unnorm_coord(cx.to_f64_lossless(), iw)).clamp(0.0, (iw - 1) as f64);
            let y = align(unnorm_coord(cy.to_f64_lossless(), ih)).clamp(0.0, (ih - 1) as f64);
            let x0 = x.floor() as usize;
            let y0 = y.floor() as usize;
            let x1 = (x0 + 1).min(iw - 1);
            let y1 = (y0 + 1).min(ih - 1);
            let fx = x - x0 as f64;
            let fy = y - y0 as f64;
            for c in 0..image.channels() {
                let v00 = image.get(c, y0, x0).to_f64_lossless();
                let v01 = image.get(c, y0, x1).to_f64_lossless();
                let v10 = image.get(c, y1, x0).to_f64_lossless();
                let v11 = image.get(c, y1, x1).to_f64_lossless();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.set(c, i, j, T::from_f64_approx(top + (bot - top) * fy));
            }
        }
    }
    out
}

/// Regular `rows x cols` control grid spanning `[-1, 1]^2` inclusive,
/// row-major (x varies fastest).
pub fn canonical_control_grid<R: Real>(rows: usize, cols: usize) -> Vec<[R; 2]> {
    let mut pts = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let y = if rows == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (rows - 1) as f64
        };
        for j in 0..cols {
            let x = if cols == 1 {
                0.0
            } else {
                -1.0 + 2.0 * j as f64 / (cols - 1) as f64
            };
            pts.push([R::from_f64_approx(x), R::from_f64_approx(y)]);
        }
    }
    pts
}

/// Linear basis `B` of the grid map for a fixed control layout: row
/// `i * w + j` of the returned `(h*w) x K` matrix satisfies
/// `grid_x = B dst_x` and `grid_y = B dst_y` for any destination points
/// (the affine part of the spline is folded in). This is the route training
/// uses: gradients w.r.t. `dst` are just `B^T`.
pub fn tps_linear_basis<R: Real>(
    src: &[[R; 2]],
    reg: R,
    h: usize,
    w: usize,
) -> Result<Vec<R>, TpsError> {
    validate_inputs(src, src, reg)?;
    let k = src.len();
    let n = k + 3;
    let (l, _) = build_system(src, reg);
    let l_inv = linalg::invert(&l, n).map_err(TpsError::Singular)?;
    let mut basis = vec![R::zero(); h * w * k];
    for i in 0..h {
        let y = R::from_f64_approx(norm_coord(i as f64, h));
        for j in 0..w {
            let x = R::from_f64_approx(norm_coord(j as f64, w));
            let row = &mut basis[(i * w + j) * k..(i * w + j + 1) * k];
            // phi = [U(|p - src_1|) .. U(|p - src_K|), 1, x, y]; the basis
            // entry for destination point m is phi . column m of L^{-1}
            // (only the first K columns matter: the RHS is [dst; 0]).
            for m in 0..k {
                let mut acc = R::zero();
                for t in 0..k {
                    let dx = x - src[t][0];
                    let dy = y - src[t][1];
                    acc += kernel_u(dx * dx + dy * dy) * l_inv[t * n + m];
                }
                acc += l_inv[k * n + m];
                acc += x * l_inv[(k + 1) * n + m];
                acc += y * l_inv[(k + 2) * n + m];
                row[m] = acc;
            }
        }
    }
    Ok(basis)
}

/// Quadratic form `M` of the bending energy in destination coordinates:
/// `bending = dst_x^T M dst_x + dst_y^T M dst_y` for the fixed control
/// layout, matching [`bending_energy`] of the solved spline.
pub fn tps_bending_quadratic<R: Real>(src: &[[R; 2]], reg: R) -> Result<Vec<R>, TpsError> {
    validate_inputs(src, src, reg)?;
    let k = src.len();
    let n = k + 3;
    let (l, kernel) = build_system(src, reg);
    let l_inv = linalg::invert(&l, n).map_err(TpsError::Singular)?;
    // Weights are w = S dst with S = top-left K x K block of L^{-1};
    // bending = dst^T (S^T K S) dst.
    let mut s = vec![R::zero(); k * k];
    for i in 0..k {
        for j in 0..k {
            s[i * k + j] = l_inv[i * n + j];
        }
    }
    let st = linalg::transpose(&s, k, k);
    let m = linalg::mat_mul(&linalg::mat_mul(&st, &kernel, k, k, k), &s, k, k, k);
    // Symmetrize against accumulation noise.
    let mut out = vec![R::zero(); k * k];
    let half = R::from_f64_approx(0.5);
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = (m[i * k + j] + m[j * k + i]) * half;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid9() -> Vec<[f64; 2]> {
        canonical_control_grid(3, 3)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn perturbed(src: &[[f64; 2]], amp: f64, seed: u64) -> Vec<[f64; 2]> {
        let mut r = rng(seed);
        src.iter()
            .map(|&[x, y]| [x + r.gen_range(-amp..amp), y + r.gen_range(-amp..amp)])
            .collect()
    }

    #[test]
    fn identity_solve_gives_identity_affine_and_zero_weights() {
        let src = grid9();
        let p = solve_tps(&src, &src, 0.0).unwrap();
        let expect = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for d in 0..2 {
            for c in 0..3 {
                assert!(
                    (p.affine[d][c] - expect[d][c]).abs() < 1e-10,
                    "affine[{d}][{c}] = {}",
                    p.affine[d][c]
                );
            }
        }
        for w in &p.weights {
            assert!(w[0].abs() < 1e-10 && w[1].abs() < 1e-10);
        }
        assert!(bending_energy(&p).abs() < 1e-10);
    }

    #[test]
    fn translation_is_pure_affine() {
        let src = grid9();
        let dst: Vec<[f64; 2]> = src.iter().map(|&[x, y]| [x + 0.1, y]).collect();
        let p = solve_tps(&src, &dst, 0.0).unwrap();
        assert!((p.affine[0][0] - 0.1).abs() < 1e-8);
        assert!(p.affine[1][0].abs() < 1e-8);
        for w in &p.weights {
            assert!(w[0].abs() < 1e-8 && w[1].abs() < 1e-8);
        }
        assert!(bending_energy(&p).abs() < 1e-8);
    }

    #[test]
    fn interpolates_at_zero_reg_and_satisfies_side_conditions() {
        let src = grid9();
        let dst = perturbed(&src, 0.2, 3);
        let p = solve_tps(&src, &dst, 0.0).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let f = p.apply(*s);
            let err = ((f[0] - d[0]).powi(2) + (f[1] - d[1]).powi(2)).sqrt();
            assert!(err < 1e-8, "residual {err}");
        }
        p.check_side_conditions().unwrap();
    }

    /// Independent dense solve: plain Gauss-Jordan without pivot search,
    /// coded separately from the production path.
    fn gauss_jordan_oracle(src: &[[f64; 2]], dst: &[[f64; 2]], reg: f64) -> Vec<[f64; 2]> {
        let k = src.len();
        let n = k + 3;
        let u = |a: [f64; 2], b: [f64; 2]| {
            let r2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            if r2 == 0.0 {
                0.0
            } else {
                r2 * r2.ln()
            }
        };
        let mut m = vec![vec![0.0f64; n + 2]; n];
        for i in 0..k {
            for j in 0..k {
                m[i][j] = u(src[i], src[j]);
            }
            m[i][i] += reg;
            m[i][k] = 1.0;
            m[i][k + 1] = src[i][0];
            m[i][k + 2] = src[i][1];
            m[k][i] = 1.0;
            m[k + 1][i] = src[i][0];
            m[k + 2][i] = src[i][1];
            m[i][n] = dst[i][0];
            m[i][n + 1] = dst[i][1];
        }
        for col in 0..n {
            // Partial pivot (needed: the lower-right block is zero).
            let piv = (col..n)
                .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
                .unwrap();
            m.swap(col, piv);
            let p = m[col][col];
            for j in 0..n + 2 {
                m[col][j] /= p;
            }
            for row in 0..n {
                if row != col && m[row][col] != 0.0 {
                    let f = m[row][col];
                    for j in 0..n + 2 {
                        m[row][j] -= f * m[col][j];
                    }
                }
            }
        }
        (0..n).map(|i| [m[i][n], m[i][n + 1]]).collect()
    }

    #[test]
    fn solution_matches_independent_dense_solve() {
        let src = grid9();
        let dst = perturbed(&src, 0.25, 9);
        for reg in [0.0, 1e-3, 0.1] {
            let p = solve_tps(&src, &dst, reg).unwrap();
            let oracle = gauss_jordan_oracle(&src, &dst, reg);
            for i in 0..src.len() {
                assert!((p.weights[i][0] - oracle[i][0]).abs() < 1e-8);
                assert!((p.weights[i][1] - oracle[i][1]).abs() < 1e-8);
            }
            let k = src.len();
            for d in 0..2 {
                assert!((p.affine[d][0] - oracle[k][d]).abs() < 1e-8);
                assert!((p.affine[d][1] - oracle[k + 1][d]).abs() < 1e-8);
                assert!((p.affine[d][2] - oracle[k + 2][d]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn affine_maps_are_reproduced_with_zero_bending() {
        let src = grid9();
        // x' = 0.9x - 0.2y + 0.05, y' = 0.15x + 1.1y - 0.3.
        let dst: Vec<[f64; 2]> = src
            .iter()
            .map(|&[x, y]| [0.9 * x - 0.2 * y + 0.05, 0.15 * x + 1.1 * y - 0.3])
            .collect();
        let p = solve_tps(&src, &dst, 0.0).unwrap();
        assert!((p.affine[0][1] - 0.9).abs() < 1e-8);
        assert!((p.affine[0][2] + 0.2).abs() < 1e-8);
        assert!((p.affine[0][0] - 0.05).abs() < 1e-8);
        assert!((p.affine[1][1] - 0.15).abs() < 1e-8);
        assert!((p.affine[1][2] - 1.1).abs() < 1e-8);
        assert!((p.affine[1][0] + 0.3).abs() < 1e-8);
        assert!(bending_energy(&p).abs() < 1e-8);
        // And off control points too.
        let f = p.apply([0.3, -0.7]);
        assert!((f[0] - (0.9 * 0.3 - 0.2 * -0.7 + 0.05)).abs() < 1e-8);
        assert!((f[1] - (0.15 * 0.3 + 1.1 * -0.7 - 0.3)).abs() < 1e-8);
    }

    #[test]
    fn collinear_points_at_zero_reg_report_singularity() {
        let src = [[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.5, 0.0]];
        let dst = [[-1.0, 0.1], [0.0, 0.0], [1.0, 0.0], [0.5, 0.2]];
        let err = solve_tps(&src, &dst, 0.0).unwrap_err();
        assert!(matches!(err, TpsError::Singular(_)));
        let msg = err.to_string();
        assert!(msg.contains("regularization"), "message: {msg}");
    }

    #[test]
    fn regularization_residual_is_monotone() {
        let src = grid9();
        let dst = perturbed(&src, 0.3, 17);
        let mut last = -1.0f64;
        for reg in [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let p = solve_tps(&src, &dst, reg).unwrap();
            let resid: f64 = src
                .iter()
                .zip(&dst)
                .map(|(s, d)| {
                    let f = p.apply(*s);
                    ((f[0] - d[0]).powi(2) + (f[1] - d[1]).powi(2)).sqrt()
                })
                .fold(0.0, f64::max);
            assert!(
                resid >= last - 1e-9,
                "residual {resid} decreased from {last} at reg {reg}"
            );
            last = resid;
        }
    }

    #[test]
    fn identity_grid_matches_canonical_mesh() {
        let p = TpsParams::identity(grid9());
        let grid = make_sampling_grid(&p, 4, 4);
        let mesh = SamplingGrid::<f64>::identity(4, 4);
        for (a, b) in grid.coords.iter().zip(&mesh.coords) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
        // Solved identity params agree too.
        let solved = solve_tps(&grid9(), &grid9(), 0.0).unwrap();
        let grid2 = make_sampling_grid(&solved, 4, 4);
        for (a, b) in grid2.coords.iter().zip(&mesh.coords) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn translation_grid_shifts_every_coordinate() {
        let src = grid9();
        let dst: Vec<[f64; 2]> = src.iter().map(|&[x, y]| [x + 0.5, y]).collect();
        let p = solve_tps(&src, &dst, 0.0).unwrap();
        let grid = make_sampling_grid(&p, 5, 5);
        let mesh = SamplingGrid::<f64>::identity(5, 5);
        for (a, b) in grid.coords.iter().zip(&mesh.coords) {
            assert!((a[0] - (b[0] + 0.5)).abs() < 1e-8);
            assert!((a[1] - b[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn grid_agrees_with_pointwise_evaluation() {
        let src = grid9();
        let dst = perturbed(&src, 0.2, 23);
        let p = solve_tps(&src, &dst, 1e-4).unwrap();
        let (h, w) = (8, 6);
        let grid = make_sampling_grid(&p, h, w);
        for i in 0..h {
            for j in 0..w {
                let x = norm_coord(j as f64, w);
                let y = norm_coord(i as f64, h);
                let f = p.apply([x, y]);
                let g = grid.coords[i * w + j];
                assert!((f[0] - g[0]).abs() < 1e-6 && (f[1] - g[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_basis_route_matches_solve_route() {
        let src = grid9();
        let dst = perturbed(&src, 0.2, 31);
        let reg = 1e-3;
        let (h, w) = (7, 5);
        let p = solve_tps(&src, &dst, reg).unwrap();
        let grid = make_sampling_grid(&p, h, w);
        let basis = tps_linear_basis(&src, reg, h, w).unwrap();
        let k = src.len();
        for r in 0..h * w {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for m in 0..k {
                gx += basis[r * k + m] * dst[m][0];
                gy += basis[r * k + m] * dst[m][1];
            }
            assert!((gx - grid.coords[r][0]).abs() < 1e-6, "row {r}");
            assert!((gy - grid.coords[r][1]).abs() < 1e-6, "row {r}");
        }
        // Bending quadratic form matches the solved-spline energy.
        let m = tps_bending_quadratic(&src, reg).unwrap();
        let mut qf = 0.0;
        for d in 0..2 {
            for i in 0..k {
                for j in 0..k {
                    qf += dst[i][d] * m[i * k + j] * dst[j][d];
                }
            }
        }
        assert!(
            (qf - bending_energy(&p)).abs() < 1e-8,
            "quadratic form {qf} vs energy {}",
            bending_energy(&p)
        );
    }

    #[test]
    fn warp_identity_is_bit_exact_for_f32() {
        let mut img = Raster::<f32>::zeros(3, 12, 10);
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..10 {
                    img.set(c, y, x, ((c * 120 + y * 10 + x) as f32 * 0.377).fract());
                }
            }
        }
        let grid = SamplingGrid::<f32>::identity(12, 10);
        let out = warp_image(&img, &grid);
        assert_eq!(out, img);
    }

    #[test]
    fn warp_one_pixel_shift_translates_with_border_clamp() {
        let mut img = Raster::<f64>::zeros(1, 4, 6);
        for y in 0..4 {
            for x in 0..6 {
                img.set(0, y, x, (y * 6 + x) as f64);
            }
        }
        // Shift sampling one pixel right: out(j) = in(j+1), clamped at the
        // right border. One pixel in normalized units is 2/W.
        let mut grid = SamplingGrid::<f64>::identity(4, 6);
        for c in grid.coords.iter_mut() {
            c[0] += 2.0 / 6.0;
        }
        let out = warp_image(&img, &grid);
        for y in 0..4 {
            for x in 0..6 {
                let expect = img.get(0, y, (x + 1).min(5));
                assert!((out.get(0, y, x) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warp_matches_scalar_bilinear_reference() {
        let mut r = rng(41);
        let mut img = Raster::<f64>::zeros(2, 5, 5);
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    img.set(c, y, x, r.gen_range(0.0..1.0));
                }
            }
        }
        let mut grid = SamplingGrid::<f64>::identity(5, 5);
        for c in grid.coords.iter_mut() {
            c[0] = r.gen_range(-0.95..0.95);
            c[1] = r.gen_range(-0.95..0.95);
        }
        let out = warp_image(&img, &grid);
        for i in 0..5 {
            for j in 0..5 {
                let [cx, cy] = grid.coords[i * 5 + j];
                let x = ((cx + 1.0) * 5.0 / 2.0 - 0.5).clamp(0.0, 4.0);
                let y = ((cy + 1.0) * 5.0 / 2.0 - 0.5).clamp(0.0, 4.0);
                let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(4), (y0 + 1).min(4));
                let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                for c in 0..2 {
                    let expect = img.get(c, y0, x0) * (1.0 - fx) * (1.0 - fy)
                        + img.get(c, y0, x1) * fx * (1.0 - fy)
                        + img.get(c, y1, x0) * (1.0 - fx) * fy
                        + img.get(c, y1, x1) * fx * fy;
                    assert!((out.get(c, i, j) - expect).abs() < 1e-6);
                }
            }
        }
    }

    /// Numerical quadrature of the bending integral
    /// `integral of (f_xx^2 + 2 f_xy^2 + f_yy^2)` using the closed-form
    /// second derivatives of the kernel, over a large square. The affine
    /// part contributes nothing.
    fn quadrature_bending(p: &TpsParams<f64>) -> f64 {
        // Integrate each output dimension separately; for the kernel,
        // d2/dx2 [u ln u] = 2 ln u + 2 + 4 dx^2 / u with u = r^2.
        let mut total = 0.0;
        for d in 0..2 {
            let deriv = |px: f64, py: f64| -> (f64, f64, f64) {
                let mut fxx = 0.0;
                let mut fxy = 0.0;
                let mut fyy = 0.0;
                for (w, s) in p.weights.iter().zip(&p.src) {
                    let dx = px - s[0];
                    let dy = py - s[1];
                    let u = dx * dx + dy * dy;
                    if u < 1e-12 {
                        continue;
                    }
                    let lnu = u.ln();
                    fxx += w[d] * (2.0 * lnu + 2.0 + 4.0 * dx * dx / u);
                    fyy += w[d] * (2.0 * lnu + 2.0 + 4.0 * dy * dy / u);
                    fxy += w[d] * (4.0 * dx * dy / u);
                }
                (fxx, fxy, fyy)
            };
            // Fine grid near the control points, coarse grid farther out.
            let mut acc = 0.0f64;
            let fine_r = 4.0f64;
            let fine_step = 0.02f64;
            let mut y = -fine_r + fine_step / 2.0;
            while y < fine_r {
                let mut x = -fine_r + fine_step / 2.0;
                while x < fine_r {
                    let (fxx, fxy, fyy) = deriv(x, y);
                    acc += (fxx * fxx + 2.0 * fxy * fxy + fyy * fyy) * fine_step * fine_step;
                    x += fine_step;
                }
                y += fine_step;
            }
            let coarse_r = 30.0f64;
            let coarse_step = 0.1f64;
            let mut y = -coarse_r + coarse_step / 2.0;
            while y < coarse_r {
                let mut x = -coarse_r + coarse_step / 2.0;
                while x < coarse_r {
                    if x.abs() >= fine_r || y.abs() >= fine_r {
                        let (fxx, fxy, fyy) = deriv(x, y);
                        acc +=
                            (fxx * fxx + 2.0 * fxy * fxy + fyy * fyy) * coarse_step * coarse_step;
                    }
                    x += coarse_step;
                }
                y += coarse_step;
            }
            total += acc;
        }
        total
    }

    #[test]
    fn bending_energy_matches_quadrature_oracle() {
        let src = grid9();
        // Smooth, clearly non-affine instance.
        let dst: Vec<[f64; 2]> = src
            .iter()
            .map(|&[x, y]| [x + 0.12 * (1.0 - y * y), y - 0.08 * x * x])
            .collect();
        let p = solve_tps(&src, &dst, 0.0).unwrap();
        let energy = bending_energy(&p);
        assert!(energy > 0.0);
        let integral = quadrature_bending(&p);
        let ratio = integral / (16.0 * std::f64::consts::PI * energy);
        assert!(
            (ratio - 1.0).abs() < 0.05,
            "quadrature/16(pi)E = {ratio} (integral {integral}, energy {energy})"
        );
    }

    #[test]
    fn bending_energy_is_nonnegative_for_random_warps() {
        for seed in 0..30 {
            let src = grid9();
            let dst = perturbed(&src, 0.3, 100 + seed);
            let p = solve_tps(&src, &dst, 0.0).unwrap();
            assert!(bending_energy(&p) >= -1e-10);
        }
    }

    #[test]
    fn input_validation() {
        let two = [[0.0, 0.0], [1.0, 1.0]];
        assert!(matches!(
            solve_tps(&two, &two, 0.0),
            Err(TpsError::TooFewPoints(2))
        ));
        let src = grid9();
        assert!(matches!(
            solve_tps(&src, &src[..5], 0.0),
            Err(TpsError::CountMismatch { .. })
        ));
        assert!(matches!(
            solve_tps(&src, &src, -1.0),
            Err(TpsError::NegativeReg(_))
        ));
    }
}
