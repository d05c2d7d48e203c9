//! MLEM and one-step-late MAPEM with the relative-difference penalty.

use crate::error::{config, Error, Result};
use crate::geometry::{Image, Projector, Sinogram};

/// Denominator floor for the one-step-late update.
pub const OSL_DENOMINATOR_FLOOR: f64 = 1e-12;

/// `A^T (y / (A x + b))` together with the log-likelihood at `x`.
///
/// Bins with zero expected counts and zero data are skipped; zero expected
/// counts with positive data are a domain error.
pub fn ratio_backprojection(
    p: &Projector,
    x: &[f64],
    y: &Sinogram,
    b: &Sinogram,
) -> Result<(Vec<f64>, f64)> {
    y.ensure_proj(p.proj())?;
    b.ensure_proj(p.proj())?;
    if x.len() != p.grid().len() {
        return config(format!(
            "image of {} voxels for a {}-voxel grid",
            x.len(),
            p.grid().len()
        ));
    }
    let ax = p.forward_raw(x);
    let mut ratio = vec![0.0; ax.len()];
    let mut loglik = 0.0;
    for (i, ((&a, &bi), &yi)) in ax.iter().zip(b.values()).zip(y.values()).enumerate() {
        let mean = a + bi;
        if mean > 0.0 {
            ratio[i] = yi / mean;
            loglik += yi * mean.ln() - mean;
        } else if yi > 0.0 || mean < 0.0 {
            return Err(Error::Domain(format!(
                "bin {i}: expected counts {mean} with {yi} measured counts"
            )));
        }
    }
    Ok((p.back_raw(&ratio), loglik))
}

fn em_step(x: &[f64], backproj: &[f64], sens: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(backproj)
        .zip(sens)
        .map(|((&xj, &bj), &sj)| if sj > 0.0 { xj / sj * bj } else { 0.0 })
        .collect()
}

/// One MLEM update, `x_j <- x_j / S_j * sum_i A_ij y_i / ([A x]_i + b_i)`.
/// Voxels without sensitivity are set to zero.
pub fn mlem_update(
    p: &Projector,
    x: &Image,
    y: &Sinogram,
    b: &Sinogram,
    sens: &Image,
) -> Result<Image> {
    Ok(mlem_update_with_likelihood(p, x, y, b, sens)?.0)
}

/// As [`mlem_update`], also returning the log-likelihood of the input `x`.
pub fn mlem_update_with_likelihood(
    p: &Projector,
    x: &Image,
    y: &Sinogram,
    b: &Sinogram,
    sens: &Image,
) -> Result<(Image, f64)> {
    x.ensure_grid(p.grid())?;
    sens.ensure_grid(p.grid())?;
    let (bp, loglik) = ratio_backprojection(p, x.values(), y, b)?;
    Ok((
        Image::new(p.grid(), em_step(x.values(), &bp, sens.values()))?,
        loglik,
    ))
}

/// Uniform start with `sum_j S_j x_j = sum_i y_i` on the sensitive support.
pub fn uniform_init(y: &Sinogram, sens: &Image) -> Image {
    let total_sens: f64 = sens.values().iter().sum();
    let level = if total_sens > 0.0 {
        (y.sum() / total_sens).max(f64::MIN_POSITIVE)
    } else {
        1.0
    };
    sens.map(|s| if s > 0.0 { level } else { 0.0 })
}

/// Per-iteration solver record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// Number of completed updates when the record was taken.
    pub iteration: usize,
    /// Log-likelihood of the iterate *before* this update.
    pub log_likelihood: f64,
    pub penalty: f64,
    /// Voxels whose OSL denominator fell below the floor.
    pub clamped: usize,
}

/// `n_iter` MLEM updates from `x_init` (default [`uniform_init`]).
/// `observe` sees every iterate after its update.
pub fn mlem(
    p: &Projector,
    y: &Sinogram,
    b: &Sinogram,
    n_iter: usize,
    x_init: Option<&Image>,
    mut observe: impl FnMut(usize, &Image),
) -> Result<(Image, Vec<IterationRecord>)> {
    if n_iter == 0 {
        return config("MLEM needs at least one iteration");
    }
    let sens = p.sensitivity();
    let mut x = match x_init {
        Some(x) => x.clone(),
        None => uniform_init(y, &sens),
    };
    let mut records = Vec::with_capacity(n_iter);
    for it in 1..=n_iter {
        let (next, loglik) = mlem_update_with_likelihood(p, &x, y, b, &sens)?;
        x = next;
        records.push(IterationRecord {
            iteration: it,
            log_likelihood: loglik,
            penalty: 0.0,
            clamped: 0,
        });
        observe(it, &x);
    }
    Ok((x, records))
}

/// Relative-difference penalty on a raw `nx x ny` array, 8-neighbourhood with
/// unit weights, each unordered pair counted in both directions.
pub fn rdp_penalty_raw(values: &[f64], nx: usize, ny: usize, gamma: f64) -> f64 {
    let mut total = 0.0;
    for_each_neighbor(nx, ny, |j, k| {
        let (a, b) = (values[j], values[k]);
        let d = a - b;
        let denom = (a + b) + gamma * d.abs();
        if denom > 0.0 {
            total += d * d / denom;
        }
    });
    total
}

pub fn rdp_penalty(x: &Image, gamma: f64) -> f64 {
    let g = x.grid();
    rdp_penalty_raw(x.values(), g.nx, g.ny, gamma)
}

/// `dR/dx_j`; zero where both voxels of a pair are zero.
pub fn rdp_gradient_raw(values: &[f64], nx: usize, ny: usize, gamma: f64) -> Vec<f64> {
    let mut grad = vec![0.0; values.len()];
    // R counts (j,k) and (k,j); f is symmetric so dR/dx_j = 2 sum_k df/da(x_j, x_k)
    for_each_neighbor(nx, ny, |j, k| {
        let (a, b) = (values[j], values[k]);
        let d = a - b;
        let denom = (a + b) + gamma * d.abs();
        if denom > 0.0 {
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[j] += 2.0 * (2.0 * d / denom - d * d * (1.0 + gamma * sign) / (denom * denom));
        }
    });
    grad
}

pub fn rdp_gradient(x: &Image, gamma: f64) -> Image {
    let g = x.grid();
    Image::new(g, rdp_gradient_raw(x.values(), g.nx, g.ny, gamma)).expect("grid length")
}

fn for_each_neighbor(nx: usize, ny: usize, mut f: impl FnMut(usize, usize)) {
    for iy in 0..ny {
        for ix in 0..nx {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (kx, ky) = (ix as i64 + dx, iy as i64 + dy);
                    if kx < 0 || ky < 0 || kx >= nx as i64 || ky >= ny as i64 {
                        continue;
                    }
                    f(iy * nx + ix, ky as usize * nx + kx as usize);
                }
            }
        }
    }
}

/// Mean squared difference over 8-neighbour pairs.
pub fn roughness(x: &Image) -> f64 {
    let g = x.grid();
    let v = x.values();
    let (mut s, mut n) = (0.0, 0usize);
    for_each_neighbor(g.nx, g.ny, |j, k| {
        s += (v[j] - v[k]).powi(2);
        n += 1;
    });
    s / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapemConfig {
    pub n_iter: usize,
    pub gamma: f64,
    pub weight: f64,
}

impl Default for MapemConfig {
    fn default() -> Self {
        Self {
            n_iter: 60,
            gamma: 2.0,
            weight: 0.1,
        }
    }
}

/// One-step-late MAP-EM:
/// `x_j <- x_j * [A^T (y / (A x + b))]_j / (S_j + weight * dR/dx_j(x))`.
pub fn mapem(
    p: &Projector,
    y: &Sinogram,
    b: &Sinogram,
    cfg: &MapemConfig,
    x_init: Option<&Image>,
    mut observe: impl FnMut(usize, &Image),
) -> Result<(Image, Vec<IterationRecord>)> {
    if cfg.n_iter == 0 {
        return config("MAPEM needs at least one iteration");
    }
    if !(cfg.weight >= 0.0 && cfg.gamma >= 0.0) {
        return config("MAPEM weight and gamma must be non-negative");
    }
    let grid = p.grid();
    let sens = p.sensitivity();
    let mut x = match x_init {
        Some(x) => x.clone(),
        None => uniform_init(y, &sens),
    };
    let mut records = Vec::with_capacity(cfg.n_iter);
    for it in 1..=cfg.n_iter {
        let (bp, loglik) = ratio_backprojection(p, x.values(), y, b)?;
        let (penalty, grad) = if cfg.weight > 0.0 {
            (
                rdp_penalty_raw(x.values(), grid.nx, grid.ny, cfg.gamma),
                rdp_gradient_raw(x.values(), grid.nx, grid.ny, cfg.gamma),
            )
        } else {
            (0.0, vec![0.0; grid.len()])
        };
        let mut clamped = 0;
        let next: Vec<f64> = (0..grid.len())
            .map(|j| {
                let s = sens.values()[j];
                if s <= 0.0 {
                    return 0.0;
                }
                let mut denom = s + cfg.weight * grad[j];
                if denom < OSL_DENOMINATOR_FLOOR {
                    denom = OSL_DENOMINATOR_FLOOR;
                    clamped += 1;
                }
                x.values()[j] * bp[j] / denom
            })
            .collect();
        x = Image::new(grid, next)?;
        if !x.is_finite() {
            return Err(Error::Diverged(format!(
                "MAPEM iterate non-finite at iteration {it}"
            )));
        }
        records.push(IterationRecord {
            iteration: it,
            log_likelihood: loglik,
            penalty,
            clamped,
        });
        observe(it, &x);
    }
    Ok((x, records))
}
