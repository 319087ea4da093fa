//! Synthetic dataset generator: correlated log-permeability fields, a
//! finite-volume Darcy pressure solve with a transient history, and a
//! kinematic plume proxy for saturation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_file, write_file, CoreError, Result};

pub const MD_TO_M2: f64 = 9.869_233e-16;
pub const DEFAULT_DATUM_PA: f64 = 2.0814e7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl GridSpec {
    pub fn new_2d(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            nz: 1,
            dx: 150.0,
            dy: 150.0,
            dz: 15.0,
        }
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn is_3d(&self) -> bool {
        self.nz > 1
    }

    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.ny + j) * self.nz + k
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 || self.nz == 0 {
            return Err(CoreError::Parameter(format!(
                "grid {}x{}x{} needs at least 2 cells in x and y",
                self.nx, self.ny, self.nz
            )));
        }
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dz > 0.0) {
            return Err(CoreError::Parameter("cell sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeostatConfig {
    /// Mean of the natural log of permeability in mD.
    pub mean_logk: f64,
    pub std_logk: f64,
    pub corr_len_x: f64,
    pub corr_len_y: f64,
    pub corr_len_z: f64,
    pub porosity_d: f64,
    pub porosity_e: f64,
    pub k_cut_lo: f64,
    pub k_cut_hi: f64,
    pub phi_cut_lo: f64,
    pub phi_cut_hi: f64,
}

impl Default for GeostatConfig {
    fn default() -> Self {
        Self {
            mean_logk: 2.5,
            std_logk: 1.5,
            corr_len_x: 600.0,
            corr_len_y: 600.0,
            corr_len_z: 15.0,
            porosity_d: 0.03,
            porosity_e: 0.08,
            k_cut_lo: 1e-4,
            k_cut_hi: 1e4,
            phi_cut_lo: 0.05,
            phi_cut_hi: 0.3,
        }
    }
}

impl GeostatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.std_logk >= 0.0) {
            return Err(CoreError::Parameter("std_logk must be non-negative".into()));
        }
        if !(self.k_cut_lo > 0.0 && self.k_cut_lo < self.k_cut_hi) {
            return Err(CoreError::Parameter("permeability cutoffs out of order".into()));
        }
        if !(self.phi_cut_lo < self.phi_cut_hi) {
            return Err(CoreError::Parameter("porosity cutoffs out of order".into()));
        }
        for (name, l) in [
            ("corr_len_x", self.corr_len_x),
            ("corr_len_y", self.corr_len_y),
            ("corr_len_z", self.corr_len_z),
        ] {
            if !(l > 0.0) {
                return Err(CoreError::Parameter(format!("{name} must be positive, got {l}")));
            }
        }
        Ok(())
    }
}

/// Porosity from log-permeability, clamped to the porosity cutoffs.
pub fn porosity_from_logk(logk: f64, geo: &GeostatConfig) -> f64 {
    (geo.porosity_d * logk + geo.porosity_e).clamp(geo.phi_cut_lo, geo.phi_cut_hi)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for realization `index` of a dataset seeded with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5EED)))
}

fn fft_axis(data: &mut [Complex64], dims: [usize; 3], axis: usize, planner: &mut FftPlanner<f64>) {
    let n = dims[axis];
    if n == 1 {
        return;
    }
    let fft = planner.plan_fft_forward(n);
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[base + j * stride];
            }
            fft.process(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[base + j * stride] = *b;
            }
        }
    }
}

fn fft3(data: &mut [Complex64], dims: [usize; 3], planner: &mut FftPlanner<f64>) {
    for axis in 0..3 {
        fft_axis(data, dims, axis, planner);
    }
}

/// Stationary Gaussian log-permeability field with squared-exponential
/// covariance `exp(-(hx/lx)^2 - (hy/ly)^2 - (hz/lz)^2)`, sampled by circulant
/// embedding on a doubled periodic grid, then mapped to `mean + std * z`.
pub fn generate_log_permeability(grid: &GridSpec, geo: &GeostatConfig, seed: u64) -> Result<Vec<f64>> {
    grid.validate()?;
    geo.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = gaussian_field(grid, geo, &mut rng);
    let cut = (geo.k_cut_lo.ln(), geo.k_cut_hi.ln());
    Ok(z
        .into_iter()
        .map(|v| (geo.mean_logk + geo.std_logk * v).clamp(cut.0, cut.1))
        .collect())
}

fn gaussian_field(grid: &GridSpec, geo: &GeostatConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = grid.dims();
    let m = [
        2 * n[0],
        2 * n[1],
        if n[2] > 1 { 2 * n[2] } else { 1 },
    ];
    let h = [grid.dx, grid.dy, grid.dz];
    let l = [geo.corr_len_x, geo.corr_len_y, geo.corr_len_z];
    let total = m[0] * m[1] * m[2];
    let mut cov = vec![Complex64::new(0.0, 0.0); total];
    for i in 0..m[0] {
        for j in 0..m[1] {
            for k in 0..m[2] {
                let lag = |a: usize, md: usize, d: usize| -> f64 {
                    let w = a.min(md - a) as f64 * h[d];
                    (w / l[d]).powi(2)
                };
                let e = lag(i, m[0], 0) + lag(j, m[1], 1) + lag(k, m[2], 2);
                cov[(i * m[1] + j) * m[2] + k] = Complex64::new((-e).exp(), 0.0);
            }
        }
    }
    let mut planner = FftPlanner::new();
    fft3(&mut cov, m, &mut planner);
    let mut w = vec![Complex64::new(0.0, 0.0); total];
    for (wi, lam) in w.iter_mut().zip(&cov) {
        let amp = (lam.re.max(0.0) / total as f64).sqrt();
        let a: f64 = StandardNormal.sample(rng);
        let b: f64 = StandardNormal.sample(rng);
        *wi = Complex64::new(a * amp, b * amp);
    }
    fft3(&mut w, m, &mut planner);
    let mut out = Vec::with_capacity(grid.cells());
    for i in 0..n[0] {
        for j in 0..n[1] {
            for k in 0..n[2] {
                out.push(w[(i * m[1] + j) * m[2] + k].re);
            }
        }
    }
    out
}

/// Injector at the grid centre: one or two cells per horizontal axis
/// (two when the extent is even), perforated through every layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WellSpec {
    /// Volumetric injection rate in m^3/s, shared equally by the well cells.
    pub rate: f64,
}

impl WellSpec {
    pub fn cells(&self, grid: &GridSpec) -> Vec<usize> {
        let central = |n: usize| -> Vec<usize> {
            if n % 2 == 0 {
                vec![n / 2 - 1, n / 2]
            } else {
                vec![n / 2]
            }
        };
        let mut cells = Vec::new();
        for i in central(grid.nx) {
            for j in central(grid.ny) {
                for k in 0..grid.nz {
                    cells.push(grid.idx(i, j, k));
                }
            }
        }
        cells
    }

    /// Horizontal coordinates of the well centre in metres.
    pub fn center(&self, grid: &GridSpec) -> (f64, f64) {
        (grid.nx as f64 * grid.dx / 2.0, grid.ny as f64 * grid.dy / 2.0)
    }
}

/// Dirichlet values (pressure relative to the datum, Pa) per domain face;
/// `None` is a no-flow face. Order: x-, x+, y-, y+, z-, z+.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub faces: [Option<f64>; 6],
}

impl BoundarySpec {
    /// Fixed pressure on the four lateral faces, no flow through top and bottom.
    pub fn lateral(value: f64) -> Self {
        Self {
            faces: [Some(value), Some(value), Some(value), Some(value), None, None],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub viscosity: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            viscosity: 1e-3,
            rel_tol: 1e-12,
            max_iter: 20_000,
        }
    }
}

/// Assembled seven-point finite-volume operator.
#[derive(Clone, Debug)]
pub struct DarcyOperator {
    grid: GridSpec,
    /// Transmissibility to the +x, +y, +z neighbour (zero at the edge).
    tx: Vec<f64>,
    ty: Vec<f64>,
    tz: Vec<f64>,
    diag: Vec<f64>,
    /// Boundary contribution `sum T_b * p_b` per cell.
    bnd: Vec<f64>,
}

impl DarcyOperator {
    pub fn assemble(perm_md: &[f64], grid: &GridSpec, boundary: &BoundarySpec, viscosity: f64) -> Result<Self> {
        grid.validate()?;
        if perm_md.len() != grid.cells() {
            return Err(CoreError::Parameter(format!(
                "permeability has {} cells, grid has {}",
                perm_md.len(),
                grid.cells()
            )));
        }
        if perm_md.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            return Err(CoreError::Parameter("permeability must be positive and finite".into()));
        }
        if boundary.faces.iter().all(Option::is_none) {
            return Err(CoreError::Config(
                "no Dirichlet face: the pressure system is singular".into(),
            ));
        }
        let n = grid.cells();
        let k: Vec<f64> = perm_md.iter().map(|v| v * MD_TO_M2 / viscosity).collect();
        let harm = |a: f64, b: f64| 2.0 * a * b / (a + b);
        let (ax, ay, az) = (grid.dy * grid.dz, grid.dx * grid.dz, grid.dx * grid.dy);
        let mut tx = vec![0.0; n];
        let mut ty = vec![0.0; n];
        let mut tz = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut bnd = vec![0.0; n];
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                for l in 0..grid.nz {
                    let c = grid.idx(i, j, l);
                    if i + 1 < grid.nx {
                        let d = grid.idx(i + 1, j, l);
                        let t = ax / grid.dx * harm(k[c], k[d]);
                        tx[c] = t;
                        diag[c] += t;
                        diag[d] += t;
                    }
                    if j + 1 < grid.ny {
                        let d = grid.idx(i, j + 1, l);
                        let t = ay / grid.dy * harm(k[c], k[d]);
                        ty[c] = t;
                        diag[c] += t;
                        diag[d] += t;
                    }
                    if l + 1 < grid.nz {
                        let d = grid.idx(i, j, l + 1);
                        let t = az / grid.dz * harm(k[c], k[d]);
                        tz[c] = t;
                        diag[c] += t;
                        diag[d] += t;
                    }
                    let edges = [
                        (i == 0, 0, ax / (grid.dx / 2.0)),
                        (i + 1 == grid.nx, 1, ax / (grid.dx / 2.0)),
                        (j == 0, 2, ay / (grid.dy / 2.0)),
                        (j + 1 == grid.ny, 3, ay / (grid.dy / 2.0)),
                        (l == 0, 4, az / (grid.dz / 2.0)),
                        (l + 1 == grid.nz, 5, az / (grid.dz / 2.0)),
                    ];
                    for (on, face, geo) in edges {
                        if let (true, Some(pb)) = (on, boundary.faces[face]) {
                            let t = geo * k[c];
                            diag[c] += t;
                            bnd[c] += t * pb;
                        }
                    }
                }
            }
        }
        Ok(Self {
            grid: *grid,
            tx,
            ty,
            tz,
            diag,
            bnd,
        })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `y = (A + diag(extra)) x`.
    pub fn apply(&self, x: &[f64], extra: Option<&[f64]>, y: &mut [f64]) {
        let g = &self.grid;
        for c in 0..x.len() {
            y[c] = self.diag[c] * x[c] + extra.map_or(0.0, |e| e[c] * x[c]);
        }
        let sy = g.nz;
        let sx = g.ny * g.nz;
        for c in 0..x.len() {
            if self.tx[c] != 0.0 {
                let d = c + sx;
                y[c] -= self.tx[c] * x[d];
                y[d] -= self.tx[c] * x[c];
            }
            if self.ty[c] != 0.0 {
                let d = c + sy;
                y[c] -= self.ty[c] * x[d];
                y[d] -= self.ty[c] * x[c];
            }
            if self.tz[c] != 0.0 {
                let d = c + 1;
                y[c] -= self.tz[c] * x[d];
                y[d] -= self.tz[c] * x[c];
            }
        }
    }

    pub fn boundary_rhs(&self) -> &[f64] {
        &self.bnd
    }

    /// Dense copy of the operator, for diagnostics and small checks.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        let mut out = vec![vec![0.0; n]; n];
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply(&e, None, &mut col);
            for i in 0..n {
                out[i][j] = col[i];
            }
            e[j] = 0.0;
        }
        out
    }

    /// Jacobi-preconditioned conjugate gradients on `(A + diag(extra)) x = b`.
    pub fn solve(&self, b: &[f64], extra: Option<&[f64]>, x0: Option<&[f64]>, cfg: &SolverConfig) -> Result<SolveStats> {
        let n = self.len();
        let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if bnorm == 0.0 {
            return Ok(SolveStats {
                x: vec![0.0; n],
                iterations: 0,
                rel_residual: 0.0,
            });
        }
        let dinv: Vec<f64> = (0..n)
            .map(|c| 1.0 / (self.diag[c] + extra.map_or(0.0, |e| e[c])))
            .collect();
        let mut ax = vec![0.0; n];
        self.apply(&x, extra, &mut ax);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; n];
        for it in 0..cfg.max_iter {
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn / bnorm <= cfg.rel_tol {
                return Ok(SolveStats {
                    x,
                    iterations: it,
                    rel_residual: rn / bnorm,
                });
            }
            self.apply(&p, extra, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            let alpha = rz / pap;
            for c in 0..n {
                x[c] += alpha * p[c];
                r[c] -= alpha * ap[c];
            }
            for c in 0..n {
                z[c] = r[c] * dinv[c];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for c in 0..n {
                p[c] = z[c] + beta * p[c];
            }
        }
        // accept a stagnated solve if it still meets the contract residual
        self.apply(&x, extra, &mut ax);
        let rn = b.iter().zip(&ax).map(|(b, a)| (b - a).powi(2)).sum::<f64>().sqrt();
        if rn / bnorm <= 1e-8 {
            return Ok(SolveStats {
                x,
                iterations: cfg.max_iter,
                rel_residual: rn / bnorm,
            });
        }
        Err(CoreError::Numerical(format!(
            "conjugate gradients did not converge: {} iterations, relative residual {:.3e}",
            cfg.max_iter,
            rn / bnorm
        )))
    }
}

#[derive(Clone, Debug)]
pub struct SolveStats {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Source vector for the well, in m^3/s per cell.
pub fn well_source(grid: &GridSpec, well: &WellSpec) -> Vec<f64> {
    let mut q = vec![0.0; grid.cells()];
    let cells = well.cells(grid);
    for &c in &cells {
        q[c] = well.rate / cells.len() as f64;
    }
    q
}

/// Steady single-phase pressure (relative to the boundary datum, Pa).
pub fn solve_darcy_pressure(
    perm_md: &[f64],
    grid: &GridSpec,
    well: &WellSpec,
    boundary: &BoundarySpec,
    solver: &SolverConfig,
) -> Result<SolveStats> {
    let op = DarcyOperator::assemble(perm_md, grid, boundary, solver.viscosity)?;
    let q = well_source(grid, well);
    let b: Vec<f64> = q.iter().zip(op.boundary_rhs()).map(|(a, b)| a + b).collect();
    op.solve(&b, None, None, solver)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlumeConfig {
    pub s_max: f64,
    pub s_front: f64,
    /// Multiplies the Darcy velocity when converting travel time to front position.
    pub front_speed: f64,
}

impl Default for PlumeConfig {
    fn default() -> Self {
        Self {
            s_max: 0.466,
            s_front: 0.2,
            front_speed: 12.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    pub well: WellSpec,
    pub solver: SolverConfig,
    /// Total compressibility in 1/Pa for the transient pressure history.
    pub compressibility: f64,
    /// Physical time of the last stored timestep, seconds.
    pub horizon: f64,
    pub datum: f64,
    pub plume: PlumeConfig,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            well: WellSpec { rate: 6e-4 },
            solver: SolverConfig::default(),
            compressibility: 1e-9,
            horizon: 30.0 * 365.25 * 86_400.0,
            datum: DEFAULT_DATUM_PA,
            plume: PlumeConfig::default(),
        }
    }
}

/// Pressure history relative to the datum: `T` snapshots at `t_n = n * horizon / (T-1)`,
/// starting from the datum, advanced by implicit Euler.
pub fn pressure_history(
    perm_md: &[f64],
    porosity: &[f64],
    grid: &GridSpec,
    physics: &PhysicsConfig,
    timesteps: usize,
) -> Result<(Vec<Vec<f64>>, f64)> {
    if timesteps == 0 {
        return Err(CoreError::Parameter("timesteps must be positive".into()));
    }
    let boundary = BoundarySpec::lateral(0.0);
    let op = DarcyOperator::assemble(perm_md, grid, &boundary, physics.solver.viscosity)?;
    let q = well_source(grid, &physics.well);
    let n = grid.cells();
    let mut out = vec![vec![0.0; n]];
    let mut worst: f64 = 0.0;
    if timesteps == 1 {
        return Ok((out, worst));
    }
    let dt = physics.horizon / (timesteps - 1) as f64;
    let vol = grid.dx * grid.dy * grid.dz;
    let acc: Vec<f64> = porosity
        .iter()
        .map(|phi| phi * physics.compressibility * vol / dt)
        .collect();
    let mut p = vec![0.0; n];
    for _ in 1..timesteps {
        let b: Vec<f64> = (0..n).map(|c| q[c] + op.boundary_rhs()[c] + acc[c] * p[c]).collect();
        let s = op.solve(&b, Some(&acc), Some(&p), &physics.solver)?;
        worst = worst.max(s.rel_residual);
        p = s.x;
        out.push(p.clone());
    }
    Ok((out, worst))
}

/// Plume saturation history `[T][cells]` from travel times along straight
/// rays out of the well.
///
/// The local front speed is `k / (mu * phi) * g(r)`, where `g(r)` is the
/// azimuthal average of `|grad p|` at horizontal radius `r`. A cell is
/// reached at time `tau`; at time `t` its saturation is zero when
/// `tau >= t`, else `s_front + (s_max - s_front) * (1 - tau/t)^2`.
pub fn propagate_saturation(
    perm_md: &[f64],
    porosity: &[f64],
    pressure: &[f64],
    grid: &GridSpec,
    physics: &PhysicsConfig,
    timesteps: usize,
) -> Result<Vec<Vec<f64>>> {
    if timesteps == 0 {
        return Err(CoreError::Parameter("timesteps must be positive".into()));
    }
    let n = grid.cells();
    let well = &physics.well;
    let (cx, cy) = well.center(grid);
    let pos = |i: usize, j: usize| ((i as f64 + 0.5) * grid.dx, (j as f64 + 0.5) * grid.dy);
    let h = grid.dx.min(grid.dy);
    // azimuthally averaged gradient magnitude per radial bin
    let rmax = ((grid.nx as f64 * grid.dx).hypot(grid.ny as f64 * grid.dy)) / 2.0 + h;
    let nbins = (rmax / h).ceil() as usize + 1;
    let mut gsum = vec![0.0; nbins];
    let mut gcnt = vec![0usize; nbins];
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            for l in 0..grid.nz {
                let c = grid.idx(i, j, l);
                let dpx = if grid.nx > 1 {
                    let (a, b) = (i.saturating_sub(1), (i + 1).min(grid.nx - 1));
                    (pressure[grid.idx(b, j, l)] - pressure[grid.idx(a, j, l)]) / ((b - a) as f64 * grid.dx)
                } else {
                    0.0
                };
                let dpy = {
                    let (a, b) = (j.saturating_sub(1), (j + 1).min(grid.ny - 1));
                    (pressure[grid.idx(i, b, l)] - pressure[grid.idx(i, a, l)]) / ((b - a) as f64 * grid.dy)
                };
                let (x, y) = pos(i, j);
                let bin = (((x - cx).hypot(y - cy)) / h) as usize;
                gsum[bin] += dpx.hypot(dpy);
                gcnt[bin] += 1;
                let _ = c;
            }
        }
    }
    let mut gbar = vec![f64::NAN; nbins];
    for b in 0..nbins {
        if gcnt[b] > 0 {
            gbar[b] = gsum[b] / gcnt[b] as f64;
        }
    }
    // fill empty bins from the nearest populated neighbour outward
    let first = gbar.iter().position(|v| v.is_finite()).unwrap_or(0);
    for b in 0..first {
        gbar[b] = gbar[first];
    }
    for b in 1..nbins {
        if !gbar[b].is_finite() {
            gbar[b] = gbar[b - 1];
        }
    }
    let gbar: Vec<f64> = gbar
        .into_iter()
        .map(|g| if g.is_finite() && g > 0.0 { g } else { f64::MIN_POSITIVE })
        .collect();

    let mu = physics.solver.viscosity;
    let speed = physics.plume.front_speed;
    let step = 0.5 * h;
    let cell_of = |x: f64, y: f64| -> (usize, usize) {
        let i = ((x / grid.dx) as usize).min(grid.nx - 1);
        let j = ((y / grid.dy) as usize).min(grid.ny - 1);
        (i, j)
    };
    let wells = well.cells(grid);
    let mut tau = vec![0.0; n];
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let (x, y) = pos(i, j);
            let (ddx, ddy) = (x - cx, y - cy);
            let r = ddx.hypot(ddy);
            for l in 0..grid.nz {
                let c = grid.idx(i, j, l);
                let mut t = 0.0;
                let mut walked = 0.0;
                while walked < r {
                    let seg = step.min(r - walked);
                    let s = (walked + 0.5 * seg) / r;
                    let (px, py) = (cx + s * ddx, cy + s * ddy);
                    let (pi, pj) = cell_of(px, py);
                    let pc = grid.idx(pi, pj, l);
                    let rho = walked + 0.5 * seg;
                    let g = gbar[((rho / h) as usize).min(nbins - 1)];
                    let v = speed * perm_md[pc] * MD_TO_M2 / (mu * porosity[pc]) * g;
                    t += seg / v;
                    walked += seg;
                }
                tau[c] = t;
            }
        }
    }
    let pl = physics.plume;
    let dt = if timesteps > 1 {
        physics.horizon / (timesteps - 1) as f64
    } else {
        physics.horizon
    };
    let mut out = Vec::with_capacity(timesteps);
    for step_idx in 0..timesteps {
        let t = step_idx as f64 * dt;
        let mut s = vec![0.0; n];
        for c in 0..n {
            if t > 0.0 {
                let xi = tau[c] / t;
                if xi < 1.0 {
                    s[c] = pl.s_front + (pl.s_max - pl.s_front) * (1.0 - xi) * (1.0 - xi);
                }
            }
        }
        for &c in &wells {
            s[c] = pl.s_max;
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Sequential 70/10/20 split: `floor(0.7n)`, `floor(0.1n)`, remainder.
    pub fn sequential(n: usize) -> Self {
        let a = n * 7 / 10;
        let b = n / 10;
        Self {
            train: (0..a).collect(),
            val: (a..a + b).collect(),
            test: (a + b..n).collect(),
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub n_samples: usize,
    pub grid: GridSpec,
    pub timesteps: usize,
    pub split: Split,
    pub geostat: GeostatConfig,
    pub physics: PhysicsConfig,
    pub seed: u64,
    pub datum: f64,
    pub arrays: BTreeMap<String, ArrayInfo>,
    /// Worst relative residual of any linear solve during generation.
    pub max_rel_residual: f64,
}

/// In-memory dataset. Arrays are stored as in the files: row-major `f32`.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub manifest: Manifest,
    /// `[N, 1, nx, ny, nz]` natural-log permeability.
    pub inputs: Vec<f32>,
    /// `[N, T, nx, ny, nz]` absolute pressure, Pa.
    pub pressure: Vec<f32>,
    /// `[N, T, nx, ny, nz]` saturation in `[0, 1]`.
    pub saturation: Vec<f32>,
}

impl DatasetBundle {
    pub fn n(&self) -> usize {
        self.manifest.n_samples
    }

    pub fn t(&self) -> usize {
        self.manifest.timesteps
    }

    pub fn cells(&self) -> usize {
        self.manifest.grid.cells()
    }

    pub fn input_sample(&self, i: usize) -> &[f32] {
        let c = self.cells();
        &self.inputs[i * c..(i + 1) * c]
    }

    pub fn target_sample(&self, qoi: crate::Qoi, i: usize) -> &[f32] {
        let c = self.cells() * self.t();
        let arr = match qoi {
            crate::Qoi::Pressure => &self.pressure,
            crate::Qoi::Saturation => &self.saturation,
        };
        &arr[i * c..(i + 1) * c]
    }

    /// Checks the bundle invariants: disjoint covering split, saturation in
    /// `[0, 1]`, finite pressure, array lengths matching the manifest.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let per_in = m.grid.cells();
        let per_out = per_in * m.timesteps;
        for (name, len, per) in [
            ("inputs", self.inputs.len(), per_in),
            ("pressure", self.pressure.len(), per_out),
            ("saturation", self.saturation.len(), per_out),
        ] {
            if len != m.n_samples * per {
                return Err(CoreError::Structure {
                    array: name.into(),
                    reason: format!("holds {len} values, manifest implies {}", m.n_samples * per),
                });
            }
            if let Some(info) = m.arrays.get(name) {
                if info.shape.iter().product::<usize>() != len {
                    return Err(CoreError::Structure {
                        array: name.into(),
                        reason: format!("recorded shape {:?} disagrees with {len} values", info.shape),
                    });
                }
            }
        }
        let mut seen = vec![false; m.n_samples];
        for &i in m.split.train.iter().chain(&m.split.val).chain(&m.split.test) {
            if i >= m.n_samples || seen[i] {
                return Err(CoreError::Structure {
                    array: "split".into(),
                    reason: format!("index {i} repeated or out of range"),
                });
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(CoreError::Structure {
                array: "split".into(),
                reason: "split does not cover every sample".into(),
            });
        }
        if self.saturation.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(CoreError::Structure {
                array: "saturation".into(),
                reason: "values outside [0, 1]".into(),
            });
        }
        if self.pressure.iter().any(|p| !p.is_finite()) {
            return Err(CoreError::Structure {
                array: "pressure".into(),
                reason: "non-finite values".into(),
            });
        }
        Ok(())
    }
}

/// One generated realization in double precision.
#[derive(Clone, Debug)]
pub struct Realization {
    pub logk: Vec<f64>,
    pub porosity: Vec<f64>,
    /// Pressure relative to the datum, per timestep.
    pub dp: Vec<Vec<f64>>,
    pub saturation: Vec<Vec<f64>>,
    pub max_rel_residual: f64,
}

pub fn generate_realization(
    grid: &GridSpec,
    geo: &GeostatConfig,
    physics: &PhysicsConfig,
    timesteps: usize,
    seed: u64,
) -> Result<Realization> {
    let logk = generate_log_permeability(grid, geo, seed)?;
    let perm: Vec<f64> = logk.iter().map(|v| v.exp()).collect();
    let porosity: Vec<f64> = logk.iter().map(|&v| porosity_from_logk(v, geo)).collect();
    let (dp, resid) = pressure_history(&perm, &porosity, grid, physics, timesteps)?;
    let last = dp.last().expect("at least one timestep");
    let saturation = propagate_saturation(&perm, &porosity, last, grid, physics, timesteps)?;
    Ok(Realization {
        logk,
        porosity,
        dp,
        saturation,
        max_rel_residual: resid,
    })
}

pub fn build_dataset(
    n: usize,
    grid: &GridSpec,
    geo: &GeostatConfig,
    physics: &PhysicsConfig,
    timesteps: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    if n < 10 {
        return Err(CoreError::Parameter(format!("need at least 10 samples, got {n}")));
    }
    if timesteps == 0 {
        return Err(CoreError::Parameter("timesteps must be positive".into()));
    }
    grid.validate()?;
    geo.validate()?;
    let cells = grid.cells();
    let mut inputs = Vec::with_capacity(n * cells);
    let mut pressure = Vec::with_capacity(n * cells * timesteps);
    let mut saturation = Vec::with_capacity(n * cells * timesteps);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let r = generate_realization(grid, geo, physics, timesteps, sample_seed(seed, i as u64))?;
        worst = worst.max(r.max_rel_residual);
        inputs.extend(r.logk.iter().map(|&v| v as f32));
        for dp in &r.dp {
            pressure.extend(dp.iter().map(|&v| (physics.datum + v) as f32));
        }
        for s in &r.saturation {
            saturation.extend(s.iter().map(|&v| v as f32));
        }
    }
    let dims = grid.dims();
    let info = |file: &str, shape: Vec<usize>, data: &[f32]| ArrayInfo {
        file: file.into(),
        shape,
        dtype: "float32-le".into(),
        sha256: sha256_hex(&f32_bytes(data)),
    };
    let mut arrays = BTreeMap::new();
    arrays.insert(
        "inputs".to_string(),
        info("inputs.f32", vec![n, 1, dims[0], dims[1], dims[2]], &inputs),
    );
    arrays.insert(
        "pressure".to_string(),
        info("pressure.f32", vec![n, timesteps, dims[0], dims[1], dims[2]], &pressure),
    );
    arrays.insert(
        "saturation".to_string(),
        info("saturation.f32", vec![n, timesteps, dims[0], dims[1], dims[2]], &saturation),
    );
    let manifest = Manifest {
        format: "plume.dataset/v1".into(),
        n_samples: n,
        grid: *grid,
        timesteps,
        split: Split::sequential(n),
        geostat: *geo,
        physics: *physics,
        seed,
        datum: physics.datum,
        arrays,
        max_rel_residual: worst,
    };
    let bundle = DatasetBundle {
        manifest,
        inputs,
        pressure,
        saturation,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn f32_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f32_from_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_dataset(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    let m = &bundle.manifest;
    for (name, data) in [
        ("inputs", &bundle.inputs),
        ("pressure", &bundle.pressure),
        ("saturation", &bundle.saturation),
    ] {
        write_file(&dir.join(&m.arrays[name].file), &f32_bytes(data))?;
    }
    write_file(&dir.join("manifest.json"), &serde_json::to_vec_pretty(m)?)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_file(&dir.join("manifest.json"))?;
    serde_json::from_slice(&bytes).map_err(|e| CoreError::Structure {
        array: "manifest.json".into(),
        reason: e.to_string(),
    })
}

/// Loads a dataset directory and verifies array sizes and checksums.
pub fn read_dataset(dir: &Path) -> Result<DatasetBundle> {
    let manifest = read_manifest(dir)?;
    let mut arrays: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for name in ["inputs", "pressure", "saturation"] {
        let info = manifest.arrays.get(name).ok_or_else(|| CoreError::Structure {
            array: name.into(),
            reason: "missing from manifest".into(),
        })?;
        let bytes = read_file(&dir.join(&info.file))?;
        let expected = info.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(CoreError::Structure {
                array: name.into(),
                reason: format!("file holds {} bytes, shape {:?} needs {expected}", bytes.len(), info.shape),
            });
        }
        if sha256_hex(&bytes) != info.sha256 {
            return Err(CoreError::Structure {
                array: name.into(),
                reason: "checksum mismatch".into(),
            });
        }
        arrays.insert(name.into(), f32_from_bytes(&bytes));
    }
    let bundle = DatasetBundle {
        manifest,
        inputs: arrays.remove("inputs").expect("read"),
        pressure: arrays.remove("pressure").expect("read"),
        saturation: arrays.remove("saturation").expect("read"),
    };
    bundle.validate()?;
    Ok(bundle)
}
