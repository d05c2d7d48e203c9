//! Discrete 2D parallel-beam projection model.
//!
//! The system matrix `A` is ray driven: every sinogram bin owns one line
//! through its bin center, and `A_ij` is the length of that line inside voxel
//! `j` (Siddon-style plane crossing). The matrix is assembled once per
//! geometry and kept in compressed-row form, so `forward` and `back` are exact
//! transposes of each other.

use rand_distr::{Distribution, Poisson};

use crate::error::{config, Error, Result};
use crate::rng::Rng;

/// Voxel grid centered on the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Edge length of a square voxel, mm.
    pub voxel_size: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, voxel_size: f64) -> Result<Self> {
        let grid = Self { nx, ny, voxel_size };
        grid.validate()?;
        Ok(grid)
    }

    /// 64 x 64 voxels of 2 mm.
    pub fn desk() -> Self {
        Self {
            nx: 64,
            ny: 64,
            voxel_size: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 {
            return config(format!("grid {}x{} is smaller than 8x8", self.nx, self.ny));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return config(format!("voxel size {} must be positive", self.voxel_size));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical center of voxel `(ix, iy)`.
    pub fn voxel_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            (ix as f64 + 0.5 - self.nx as f64 / 2.0) * self.voxel_size,
            (iy as f64 + 0.5 - self.ny as f64 / 2.0) * self.voxel_size,
        )
    }
}

/// Parallel-beam sinogram layout: `n_angles` views over `[0, pi)`, each with
/// `n_bins` radial bins centered on the rotation axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjSpec {
    pub n_angles: usize,
    pub n_bins: usize,
    /// Radial bin pitch, mm.
    pub bin_width: f64,
}

impl ProjSpec {
    pub fn new(n_angles: usize, n_bins: usize, bin_width: f64) -> Result<Self> {
        let proj = Self {
            n_angles,
            n_bins,
            bin_width,
        };
        proj.validate()?;
        Ok(proj)
    }

    /// 60 views x 95 bins of 2 mm.
    pub fn desk() -> Self {
        Self {
            n_angles: 60,
            n_bins: 95,
            bin_width: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_angles == 0 || self.n_bins == 0 {
            return config("projection needs at least one angle and one bin");
        }
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return config(format!("bin width {} must be positive", self.bin_width));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_angles * self.n_bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// View angle of row `k`; offset by half a step so no view is grid aligned.
    pub fn angle(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * std::f64::consts::PI / self.n_angles as f64
    }

    /// Signed radial offset of bin `b` from the rotation axis.
    pub fn offset(&self, b: usize) -> f64 {
        (b as f64 - (self.n_bins as f64 - 1.0) / 2.0) * self.bin_width
    }
}

/// 2D image on a [`GridSpec`], row-major (`j = iy * nx + ix`).
///
/// Activity images are non-negative; diffusion states reuse the type with
/// signed values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Image {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return config(format!(
                "image has {} values but grid {}x{} needs {}",
                values.len(),
                grid.nx,
                grid.ny,
                grid.len()
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn filled(grid: GridSpec, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.grid.nx + ix]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn clamp_min(&self, lo: f64) -> Self {
        self.map(|v| v.max(lo))
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_grid(&self, grid: GridSpec) -> Result<()> {
        if self.grid != grid {
            return config(format!(
                "image grid {}x{}@{} does not match session grid {}x{}@{}",
                self.grid.nx, self.grid.ny, self.grid.voxel_size, grid.nx, grid.ny, grid.voxel_size
            ));
        }
        Ok(())
    }
}

/// Projection data over `(angle, bin)`, angle-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    proj: ProjSpec,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(proj: ProjSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != proj.len() {
            return config(format!(
                "sinogram has {} values but {}x{} bins are required",
                values.len(),
                proj.n_angles,
                proj.n_bins
            ));
        }
        Ok(Self { proj, values })
    }

    pub fn zeros(proj: ProjSpec) -> Self {
        Self::filled(proj, 0.0)
    }

    /// Constant sinogram, e.g. a uniform randoms background.
    pub fn filled(proj: ProjSpec, value: f64) -> Self {
        Self {
            proj,
            values: vec![value; proj.len()],
        }
    }

    pub fn proj(&self) -> ProjSpec {
        self.proj
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            proj: self.proj,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn ensure_proj(&self, proj: ProjSpec) -> Result<()> {
        if self.proj != proj {
            return config(format!(
                "sinogram layout {}x{}@{} does not match session layout {}x{}@{}",
                self.proj.n_angles,
                self.proj.n_bins,
                self.proj.bin_width,
                proj.n_angles,
                proj.n_bins,
                proj.bin_width
            ));
        }
        Ok(())
    }
}

/// Precomputed sparse system matrix for one `(GridSpec, ProjSpec)` pair.
#[derive(Debug, Clone)]
pub struct Projector {
    grid: GridSpec,
    proj: ProjSpec,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl Projector {
    pub fn new(grid: GridSpec, proj: ProjSpec) -> Result<Self> {
        grid.validate()?;
        proj.validate()?;
        let mut row_start = Vec::with_capacity(proj.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut crossings = Vec::with_capacity(grid.nx + grid.ny + 2);
        row_start.push(0);
        for k in 0..proj.n_angles {
            let phi = proj.angle(k);
            for b in 0..proj.n_bins {
                trace_ray(&grid, phi, proj.offset(b), &mut crossings, |j, len| {
                    cols.push(j as u32);
                    weights.push(len);
                });
                row_start.push(cols.len());
            }
        }
        Ok(Self {
            grid,
            proj,
            row_start,
            cols,
            weights,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn proj(&self) -> ProjSpec {
        self.proj
    }

    /// Non-zero `(voxel, length)` entries of system-matrix row `bin`.
    pub fn row(&self, bin: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_start[bin]..self.row_start[bin + 1];
        self.cols[range.clone()]
            .iter()
            .map(|&j| j as usize)
            .zip(self.weights[range].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `A x`.
    pub fn forward(&self, img: &Image) -> Result<Sinogram> {
        img.ensure_grid(self.grid)?;
        Ok(Sinogram {
            proj: self.proj,
            values: self.forward_raw(img.values()),
        })
    }

    /// `A^T s`.
    pub fn back(&self, sino: &Sinogram) -> Result<Image> {
        sino.ensure_proj(self.proj)?;
        Ok(Image {
            grid: self.grid,
            values: self.back_raw(sino.values()),
        })
    }

    /// `S_j = sum_i A_ij`, the backprojection of an all-ones sinogram.
    pub fn sensitivity(&self) -> Image {
        Image {
            grid: self.grid,
            values: self.back_raw(&vec![1.0; self.proj.len()]),
        }
    }

    pub(crate) fn forward_raw(&self, x: &[f64]) -> Vec<f64> {
        (0..self.proj.len())
            .map(|i| {
                let range = self.row_start[i]..self.row_start[i + 1];
                self.cols[range.clone()]
                    .iter()
                    .zip(&self.weights[range])
                    .map(|(&j, &w)| w * x[j as usize])
                    .sum()
            })
            .collect()
    }

    pub(crate) fn back_raw(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for (i, &si) in s.iter().enumerate() {
            if si == 0.0 {
                continue;
            }
            let range = self.row_start[i]..self.row_start[i + 1];
            for (&j, &w) in self.cols[range.clone()].iter().zip(&self.weights[range]) {
                out[j as usize] += w * si;
            }
        }
        out
    }

    /// Poisson log-likelihood `sum_i y_i log(ybar_i) - ybar_i` with `ybar = A x + b`.
    pub fn log_likelihood(&self, y: &Sinogram, x: &Image, b: &Sinogram) -> Result<f64> {
        y.ensure_proj(self.proj)?;
        b.ensure_proj(self.proj)?;
        let ax = self.forward(x)?;
        let ybar: Vec<f64> = ax
            .values
            .iter()
            .zip(&b.values)
            .map(|(a, b)| a + b)
            .collect();
        log_likelihood_from_mean(y.values(), &ybar)
    }
}

/// Poisson log-likelihood (without the `log y!` constant) for given means.
///
/// Bins with zero mean and zero counts contribute nothing; zero mean with
/// positive counts makes the likelihood `-inf` and is reported as an error.
pub fn log_likelihood_from_mean(y: &[f64], ybar: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (&yi, &mi)) in y.iter().zip(ybar).enumerate() {
        if mi > 0.0 {
            total += yi * mi.ln() - mi;
        } else if mi < 0.0 || yi > 0.0 {
            return Err(Error::Domain(format!(
                "bin {i}: expected counts {mi} with {yi} measured counts"
            )));
        }
    }
    Ok(total)
}

/// Scale `ybar` to `count_target` total expected counts and draw independent
/// Poisson counts per bin. Returns the counts and the applied scale.
pub fn simulate_counts(
    ybar: &Sinogram,
    count_target: f64,
    rng: &mut Rng,
) -> Result<(Sinogram, f64)> {
    if !(count_target > 0.0 && count_target.is_finite()) {
        return config(format!("count target {count_target} must be positive"));
    }
    if ybar.values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return config("expected sinogram has negative or non-finite entries");
    }
    let total = ybar.sum();
    if total <= 0.0 {
        return config("expected sinogram is all zero");
    }
    let scale = count_target / total;
    let values = ybar
        .values
        .iter()
        .map(|&m| {
            let mean = m * scale;
            if mean > 0.0 {
                Poisson::new(mean)
                    .expect("positive finite mean")
                    .sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    Ok((
        Sinogram {
            proj: ybar.proj,
            values,
        },
        scale,
    ))
}

/// Walk the line `{p : p . n = s}`, `n = (cos phi, sin phi)`, through the grid
/// and report the length inside every voxel it crosses.
fn trace_ray(
    grid: &GridSpec,
    phi: f64,
    s: f64,
    crossings: &mut Vec<f64>,
    mut emit: impl FnMut(usize, f64),
) {
    let (sin, cos) = phi.sin_cos();
    let (px, py) = (s * cos, s * sin);
    let (dx, dy) = (-sin, cos);
    let vs = grid.voxel_size;
    let (x0, y0) = (-(grid.nx as f64) * vs / 2.0, -(grid.ny as f64) * vs / 2.0);
    let (x1, y1) = (-x0, -y0);
    const PARALLEL: f64 = 1e-12;

    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for (p, d, lo, hi) in [(px, dx, x0, x1), (py, dy, y0, y1)] {
        if d.abs() < PARALLEL {
            if p <= lo || p >= hi {
                return;
            }
        } else {
            let (a, b) = ((lo - p) / d, (hi - p) / d);
            t_lo = t_lo.max(a.min(b));
            t_hi = t_hi.min(a.max(b));
        }
    }
    if t_hi <= t_lo {
        return;
    }

    crossings.clear();
    crossings.push(t_lo);
    crossings.push(t_hi);
    for (p, d, lo, n) in [(px, dx, x0, grid.nx), (py, dy, y0, grid.ny)] {
        if d.abs() < PARALLEL {
            continue;
        }
        for i in 1..n {
            let t = (lo + i as f64 * vs - p) / d;
            if t > t_lo && t < t_hi {
                crossings.push(t);
            }
        }
    }
    crossings.sort_by(|a, b| a.total_cmp(b));

    for w in crossings.windows(2) {
        let len = w[1] - w[0];
        if len <= 1e-12 * vs {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let ix = ((px + tm * dx - x0) / vs).floor();
        let iy = ((py + tm * dy - y0) / vs).floor();
        if ix < 0.0 || iy < 0.0 || ix >= grid.nx as f64 || iy >= grid.ny as f64 {
            continue;
        }
        emit(iy as usize * grid.nx + ix as usize, len);
    }
}
