//! Procedural 2D brain phantoms.
//!
//! Each phantom is a tissue partition (background, CSF, gray matter, white
//! matter) drawn from a seed: an elliptical brain with a thin CSF rim, a
//! folded cortical ribbon, paired ventricles and paired deep gray nuclei
//! (the "putamen" ROI). Activity is piecewise constant per tissue, the MR
//! prior uses fixed tissue intensities with a mild bias field and therefore
//! does not depend on the tracer contrast.

use rand::Rng as _;

use crate::error::{config, Result};
use crate::geometry::{GridSpec, Image};
use crate::rng::{rng_from_seed, stream_seed, Rng};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_CSF: u8 = 1;
pub const LABEL_GM: u8 = 2;
pub const LABEL_WM: u8 = 3;
/// Gray matter that also belongs to the deep-nucleus ROI.
pub const LABEL_PUTAMEN: u8 = 4;

const MR_WM: f64 = 0.9;
const MR_GM: f64 = 0.55;
const MR_CSF: f64 = 0.15;
const MR_BIAS_AMPLITUDE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct TissueMasks {
    pub gm: Vec<bool>,
    pub wm: Vec<bool>,
    pub csf: Vec<bool>,
    pub background: Vec<bool>,
    /// Deep gray-matter ROI; a subset of `gm`, not part of the partition.
    pub putamen: Vec<bool>,
}

impl TissueMasks {
    pub fn from_labels(labels: &[u8]) -> Result<Self> {
        let mut m = TissueMasks {
            gm: vec![false; labels.len()],
            wm: vec![false; labels.len()],
            csf: vec![false; labels.len()],
            background: vec![false; labels.len()],
            putamen: vec![false; labels.len()],
        };
        for (j, &l) in labels.iter().enumerate() {
            match l {
                LABEL_BACKGROUND => m.background[j] = true,
                LABEL_CSF => m.csf[j] = true,
                LABEL_GM => m.gm[j] = true,
                LABEL_WM => m.wm[j] = true,
                LABEL_PUTAMEN => {
                    m.gm[j] = true;
                    m.putamen[j] = true;
                }
                other => return config(format!("unknown tissue label {other} at voxel {j}")),
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn labels(&self) -> Vec<u8> {
        (0..self.gm.len())
            .map(|j| {
                if self.putamen[j] {
                    LABEL_PUTAMEN
                } else if self.gm[j] {
                    LABEL_GM
                } else if self.wm[j] {
                    LABEL_WM
                } else if self.csf[j] {
                    LABEL_CSF
                } else {
                    LABEL_BACKGROUND
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.gm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gm.is_empty()
    }

    /// Disjoint cover of the grid with non-empty GM and WM.
    pub fn validate(&self) -> Result<()> {
        for j in 0..self.len() {
            let n = [self.gm[j], self.wm[j], self.csf[j], self.background[j]]
                .iter()
                .filter(|&&b| b)
                .count();
            if n != 1 {
                return config(format!("voxel {j} belongs to {n} tissues"));
            }
            if self.putamen[j] && !self.gm[j] {
                return config(format!("putamen voxel {j} is outside gray matter"));
            }
        }
        if !self.gm.contains(&true) || !self.wm.contains(&true) {
            return config("gray and white matter masks must be non-empty");
        }
        Ok(())
    }
}

/// Tracer uptake per tissue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastSpec {
    pub gm_level: f64,
    pub wm_level: f64,
    pub csf_level: f64,
}

impl ContrastSpec {
    pub fn new(gm_level: f64, wm_level: f64, csf_level: f64) -> Result<Self> {
        let c = Self {
            gm_level,
            wm_level,
            csf_level,
        };
        c.validate()?;
        Ok(c)
    }

    /// GM:WM = 1.0:0.25.
    pub fn fdg() -> Self {
        Self {
            gm_level: 1.0,
            wm_level: 0.25,
            csf_level: 0.05,
        }
    }

    /// GM:WM = 1.0:3.3, inverted relative to FDG.
    pub fn amyloid_negative() -> Self {
        Self {
            gm_level: 1.0,
            wm_level: 3.3,
            csf_level: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = [self.gm_level, self.wm_level, self.csf_level];
        if levels.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return config("tissue levels must be finite and non-negative");
        }
        if self.gm_level == self.wm_level {
            return config("gray and white matter levels must differ");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub activity: Image,
    pub mr_prior: Image,
    pub masks: TissueMasks,
}

/// Shape parameters drawn once per seed.
struct Anatomy {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    fold1: (f64, f64, f64),
    fold2: (f64, f64, f64),
    ventricle: (f64, f64, f64),
    nucleus: (f64, f64, f64),
    bias: (f64, f64, f64),
}

impl Anatomy {
    fn draw(rng: &mut Rng) -> Self {
        let mut j = |w: f64| rng.random_range(-w..=w);
        let cx = j(0.03);
        let cy = j(0.03);
        let ax = 0.72 + j(0.04);
        let ay = 0.86 + j(0.04);
        let fold1 = (
            0.07 + j(0.02),
            (9.0 + j(2.0)).round(),
            j(std::f64::consts::PI),
        );
        let fold2 = (
            0.035 + j(0.01),
            (15.0 + j(2.0)).round(),
            j(std::f64::consts::PI),
        );
        let ventricle = (1.0 + j(0.2), 1.0 + j(0.2), j(0.15));
        let nucleus = (1.0 + j(0.15), 1.0 + j(0.15), j(0.05));
        let bias = (j(1.0), j(1.0), j(1.0));
        Self {
            cx,
            cy,
            ax,
            ay,
            fold1,
            fold2,
            ventricle,
            nucleus,
            bias,
        }
    }

    /// Label at normalized position `(u, v)` in `[-1, 1]^2`.
    fn label(&self, u: f64, v: f64) -> u8 {
        let (x, y) = ((u - self.cx) / self.ax, (v - self.cy) / self.ay);
        let rho = (x * x + y * y).sqrt();
        if rho > 1.0 {
            return LABEL_BACKGROUND;
        }
        let theta = y.atan2(x);
        let (a1, k1, p1) = self.fold1;
        let (a2, k2, p2) = self.fold2;
        let wm_edge = 0.70 + a1 * (k1 * theta + p1).sin() + a2 * (k2 * theta + p2).sin();

        // deep structures, mirrored about the midline
        let (vs, vl, vr) = self.ventricle;
        let (ns, nl, nr) = self.nucleus;
        for side in [-1.0, 1.0] {
            if in_ellipse(x, y, side * 0.13, 0.06, 0.09 * vs, 0.26 * vl, side * vr) {
                return LABEL_CSF;
            }
            if in_ellipse(x, y, side * 0.40, -0.06, 0.10 * ns, 0.19 * nl, side * nr) {
                return LABEL_PUTAMEN;
            }
        }
        if rho > 0.94 || (y > 0.55 && x.abs() < 0.018) {
            LABEL_CSF
        } else if rho > wm_edge {
            LABEL_GM
        } else {
            LABEL_WM
        }
    }

    /// Smooth multiplicative field within `1 +/- MR_BIAS_AMPLITUDE`.
    fn bias_field(&self, u: f64, v: f64) -> f64 {
        let (a, b, c) = self.bias;
        1.0 + MR_BIAS_AMPLITUDE * (a * u + b * v + c * u * v) / 3.0
    }
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64, tilt: f64) -> bool {
    let (s, c) = tilt.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    let (px, py) = (c * dx + s * dy, -s * dx + c * dy);
    (px / rx).powi(2) + (py / ry).powi(2) <= 1.0
}

/// Normalized coordinate of voxel `(ix, iy)`, `[-1, 1]` across the grid.
fn normalized(grid: &GridSpec, ix: usize, iy: usize) -> (f64, f64) {
    (
        (ix as f64 + 0.5) / grid.nx as f64 * 2.0 - 1.0,
        (iy as f64 + 0.5) / grid.ny as f64 * 2.0 - 1.0,
    )
}

pub fn activity_from_masks(grid: GridSpec, masks: &TissueMasks, contrast: &ContrastSpec) -> Image {
    let values = (0..grid.len())
        .map(|j| {
            if masks.gm[j] {
                contrast.gm_level
            } else if masks.wm[j] {
                contrast.wm_level
            } else if masks.csf[j] {
                contrast.csf_level
            } else {
                0.0
            }
        })
        .collect();
    Image::new(grid, values).expect("mask length matches grid")
}

fn mr_from_masks(grid: GridSpec, masks: &TissueMasks, field: impl Fn(f64, f64) -> f64) -> Image {
    let mut values = vec![0.0; grid.len()];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let j = iy * grid.nx + ix;
            let base = if masks.wm[j] {
                MR_WM
            } else if masks.gm[j] {
                MR_GM
            } else if masks.csf[j] {
                MR_CSF
            } else {
                0.0
            };
            let (u, v) = normalized(&grid, ix, iy);
            values[j] = base * field(u, v);
        }
    }
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    Image::new(grid, values).expect("length matches grid")
}

/// Deterministic phantom for `seed`; the anatomy and MR prior do not depend
/// on `contrast`.
pub fn make_phantom(seed: u64, contrast: &ContrastSpec, grid: GridSpec) -> PhantomSample {
    let mut rng = rng_from_seed(seed);
    let anatomy = Anatomy::draw(&mut rng);
    let mut labels = vec![LABEL_BACKGROUND; grid.len()];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (u, v) = normalized(&grid, ix, iy);
            labels[iy * grid.nx + ix] = anatomy.label(u, v);
        }
    }
    let masks = TissueMasks::from_labels(&labels).expect("procedural anatomy is a valid partition");
    let activity = activity_from_masks(grid, &masks, contrast);
    let mr_prior = mr_from_masks(grid, &masks, |u, v| anatomy.bias_field(u, v));
    PhantomSample {
        activity,
        mr_prior,
        masks,
    }
}

/// Builds a phantom from an external label map (labels as in the `LABEL_*`
/// constants). The MR prior uses the nominal tissue intensities without a
/// bias field.
pub fn phantom_from_labels(
    grid: GridSpec,
    labels: &[u8],
    contrast: &ContrastSpec,
) -> Result<PhantomSample> {
    if labels.len() != grid.len() {
        return config(format!(
            "{} labels for a {}-voxel grid",
            labels.len(),
            grid.len()
        ));
    }
    contrast.validate()?;
    let masks = TissueMasks::from_labels(labels)?;
    let activity = activity_from_masks(grid, &masks, contrast);
    let mr_prior = mr_from_masks(grid, &masks, |_, _| 1.0);
    Ok(PhantomSample {
        activity,
        mr_prior,
        masks,
    })
}

pub const UPTAKE_RANGE: (f64, f64) = (0.8, 1.2);
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.05);
pub const ROTATION_RANGE_DEG: (f64, f64) = (-15.0, 15.0);
pub const SHEAR_RANGE: (f64, f64) = (-0.15, 0.15);

/// One augmentation draw: per-tissue uptake factors and an affine warp
/// `rotation * shear * scale` about the grid center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub gm_uptake: f64,
    pub wm_uptake: f64,
    pub scale: f64,
    pub rotation_deg: f64,
    pub shear: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            gm_uptake: 1.0,
            wm_uptake: 1.0,
            scale: 1.0,
            rotation_deg: 0.0,
            shear: 0.0,
        }
    }

    pub fn draw(rng: &mut Rng) -> Self {
        let mut u = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        Self {
            gm_uptake: u(UPTAKE_RANGE),
            wm_uptake: u(UPTAKE_RANGE),
            scale: u(SCALE_RANGE),
            rotation_deg: u(ROTATION_RANGE_DEG),
            shear: u(SHEAR_RANGE),
        }
    }

    /// Forward warp matrix, row-major 2x2.
    fn matrix(&self) -> [f64; 4] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        // R * [[1, shear], [0, 1]] * scale
        let k = self.scale;
        [
            c * k,
            (c * self.shear - s) * k,
            s * k,
            (s * self.shear + c) * k,
        ]
    }
}

/// Scales uptake, then warps activity, MR and masks with the same affine map.
/// Images use bilinear interpolation, masks nearest neighbour; activity is
/// clipped at zero.
pub fn apply_augmentation(sample: &PhantomSample, p: &AugmentParams) -> PhantomSample {
    let grid = sample.activity.grid();
    let mut activity = sample.activity.clone();
    for (j, v) in activity.values_mut().iter_mut().enumerate() {
        if sample.masks.gm[j] {
            *v *= p.gm_uptake;
        } else if sample.masks.wm[j] {
            *v *= p.wm_uptake;
        }
    }

    let m = p.matrix();
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
    let (hx, hy) = ((grid.nx as f64 - 1.0) / 2.0, (grid.ny as f64 - 1.0) / 2.0);
    let labels = sample.masks.labels();

    let mut out_act = vec![0.0; grid.len()];
    let mut out_mr = vec![0.0; grid.len()];
    let mut out_labels = vec![LABEL_BACKGROUND; grid.len()];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (dx, dy) = (ix as f64 - hx, iy as f64 - hy);
            let sx = inv[0] * dx + inv[1] * dy + hx;
            let sy = inv[2] * dx + inv[3] * dy + hy;
            let j = iy * grid.nx + ix;
            out_act[j] = bilinear(&activity, sx, sy).max(0.0);
            out_mr[j] = bilinear(&sample.mr_prior, sx, sy);
            let (nx, ny) = (sx.round(), sy.round());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < grid.nx && (ny as usize) < grid.ny {
                out_labels[j] = labels[ny as usize * grid.nx + nx as usize];
            }
        }
    }
    // a strong shrink can in principle erase a tissue; keep the source masks then
    let masks = TissueMasks::from_labels(&out_labels).unwrap_or_else(|_| sample.masks.clone());
    PhantomSample {
        activity: Image::new(grid, out_act).expect("grid length"),
        mr_prior: Image::new(grid, out_mr).expect("grid length"),
        masks,
    }
}

pub fn augment(sample: &PhantomSample, rng_seed: u64) -> PhantomSample {
    let params = AugmentParams::draw(&mut rng_from_seed(rng_seed));
    apply_augmentation(sample, &params)
}

/// Zero outside the grid.
fn bilinear(img: &Image, x: f64, y: f64) -> f64 {
    let g = img.grid();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |ix: f64, iy: f64| {
        if ix < 0.0 || iy < 0.0 || ix >= g.nx as f64 || iy >= g.ny as f64 {
            0.0
        } else {
            img.get(ix as usize, iy as usize)
        }
    };
    let mut v = 0.0;
    for (ox, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
        for (oy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            let w = wx * wy;
            if w != 0.0 {
                v += w * at(x0 + ox, y0 + oy);
            }
        }
    }
    v
}

/// `n_base` distinct phantoms, each contributing itself plus
/// `expansion - 1` augmented copies.
pub fn make_training_set(
    n_base: usize,
    expansion: usize,
    contrast: &ContrastSpec,
    grid: GridSpec,
    seed: u64,
) -> Result<Vec<PhantomSample>> {
    if n_base == 0 || expansion == 0 {
        return config("training set needs n_base >= 1 and expansion >= 1");
    }
    contrast.validate()?;
    let mut out = Vec::with_capacity(n_base * expansion);
    for i in 0..n_base {
        let base_seed = stream_seed(seed, i as u64);
        let base = make_phantom(base_seed, contrast, grid);
        for k in 1..expansion {
            out.push(augment(&base, stream_seed(base_seed, k as u64)));
        }
        out.push(base);
    }
    Ok(out)
}

pub fn mask_mean(img: &Image, mask: &[bool]) -> Option<f64> {
    let (s, n) = img
        .values()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::desk()
    }

    fn std_in(img: &Image, mask: &[bool]) -> f64 {
        let m = mask_mean(img, mask).unwrap();
        let vals: Vec<f64> = img
            .values()
            .iter()
            .zip(mask)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .collect();
        (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
    }

    #[test]
    fn fdg_ratio_is_four() {
        let p = make_phantom(3, &ContrastSpec::fdg(), grid());
        let gm = mask_mean(&p.activity, &p.masks.gm).unwrap();
        let wm = mask_mean(&p.activity, &p.masks.wm).unwrap();
        assert_eq!(gm / wm, 4.0);
    }

    #[test]
    fn amyloid_contrast_is_inverted() {
        let p = make_phantom(3, &ContrastSpec::amyloid_negative(), grid());
        let gm = mask_mean(&p.activity, &p.masks.gm).unwrap();
        let wm = mask_mean(&p.activity, &p.masks.wm).unwrap();
        assert!(wm > gm);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = make_phantom(17, &ContrastSpec::fdg(), grid());
        let b = make_phantom(17, &ContrastSpec::fdg(), grid());
        assert_eq!(a, b);
        let c = make_phantom(18, &ContrastSpec::fdg(), grid());
        assert_ne!(a.masks, c.masks);
    }

    #[test]
    fn partition_and_piecewise_constant_for_many_seeds() {
        for seed in 0..25 {
            let p = make_phantom(seed, &ContrastSpec::fdg(), grid());
            p.masks.validate().unwrap();
            assert!(p.masks.putamen.contains(&true));
            assert!(p.masks.csf.contains(&true));
            for mask in [&p.masks.gm, &p.masks.wm, &p.masks.csf] {
                assert!(std_in(&p.activity, mask) < 1e-12);
            }
            assert!(p.mr_prior.min() >= 0.0 && (p.mr_prior.max() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mr_prior_ignores_contrast() {
        let a = make_phantom(5, &ContrastSpec::fdg(), grid());
        let b = make_phantom(5, &ContrastSpec::amyloid_negative(), grid());
        assert_eq!(a.mr_prior, b.mr_prior);
        assert_eq!(a.masks, b.masks);
        assert_ne!(a.activity, b.activity);
    }

    #[test]
    fn mr_orders_tissues() {
        let p = make_phantom(6, &ContrastSpec::fdg(), grid());
        let wm = mask_mean(&p.mr_prior, &p.masks.wm).unwrap();
        let gm = mask_mean(&p.mr_prior, &p.masks.gm).unwrap();
        let csf = mask_mean(&p.mr_prior, &p.masks.csf).unwrap();
        assert!(wm > gm && gm > csf);
    }

    #[test]
    fn identity_augmentation_is_identity() {
        let p = make_phantom(1, &ContrastSpec::fdg(), grid());
        let q = apply_augmentation(&p, &AugmentParams::identity());
        assert_eq!(p.masks, q.masks);
        for (a, b) in p.activity.values().iter().zip(q.activity.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
        for (a, b) in p.mr_prior.values().iter().zip(q.mr_prior.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn gm_uptake_scaling_only_touches_gm() {
        let p = make_phantom(2, &ContrastSpec::fdg(), grid());
        let params = AugmentParams {
            gm_uptake: 1.2,
            ..AugmentParams::identity()
        };
        let q = apply_augmentation(&p, &params);
        let ratio = mask_mean(&q.activity, &p.masks.gm).unwrap()
            / mask_mean(&p.activity, &p.masks.gm).unwrap();
        assert!((ratio - 1.2).abs() <= 1e-6);
        let wm0 = mask_mean(&p.activity, &p.masks.wm).unwrap();
        let wm1 = mask_mean(&q.activity, &p.masks.wm).unwrap();
        assert!((wm1 - wm0).abs() <= 1e-12);
    }

    #[test]
    fn draws_stay_in_range() {
        let mut rng = rng_from_seed(42);
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        for _ in 0..10_000 {
            let p = AugmentParams::draw(&mut rng);
            assert!(within(p.gm_uptake, UPTAKE_RANGE) && within(p.wm_uptake, UPTAKE_RANGE));
            assert!(within(p.scale, SCALE_RANGE));
            assert!(within(p.rotation_deg, ROTATION_RANGE_DEG));
            assert!(within(p.shear, SHEAR_RANGE));
        }
    }

    #[test]
    fn augmentation_roughly_preserves_gm_area() {
        let p = make_phantom(8, &ContrastSpec::fdg(), grid());
        let count = |m: &[bool]| m.iter().filter(|&&b| b).count() as f64;
        let gm0 = count(&p.masks.gm);
        let mut rng = rng_from_seed(8);
        for _ in 0..50 {
            let params = AugmentParams::draw(&mut rng);
            let q = apply_augmentation(&p, &params);
            q.masks.validate().unwrap();
            let expected = gm0 * params.scale * params.scale;
            let gm1 = count(&q.masks.gm);
            assert!(
                (gm1 - expected).abs() <= 0.2 * expected,
                "{gm1} vs {expected}"
            );
            assert!(q.activity.min() >= 0.0);
        }
    }

    #[test]
    fn training_set_sizes() {
        let g = GridSpec::new(16, 16, 8.0).unwrap();
        let set = make_training_set(19, 200, &ContrastSpec::fdg(), g, 1).unwrap();
        assert_eq!(set.len(), 3800);
        let one = make_training_set(1, 1, &ContrastSpec::fdg(), grid(), 9).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(
            one[0],
            make_phantom(stream_seed(9, 0), &ContrastSpec::fdg(), grid())
        );
        let desk = make_training_set(8, 25, &ContrastSpec::fdg(), g, 1).unwrap();
        assert_eq!(desk.len(), 200);
        assert!(make_training_set(0, 1, &ContrastSpec::fdg(), g, 1).is_err());
    }

    #[test]
    fn label_loader_round_trips() {
        let p = make_phantom(4, &ContrastSpec::fdg(), grid());
        let q = phantom_from_labels(grid(), &p.masks.labels(), &ContrastSpec::fdg()).unwrap();
        assert_eq!(q.masks, p.masks);
        assert_eq!(q.activity, p.activity);
        assert!(
            phantom_from_labels(grid(), &vec![9u8; grid().len()], &ContrastSpec::fdg()).is_err()
        );
    }
}
