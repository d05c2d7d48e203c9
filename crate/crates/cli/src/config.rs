//! Experiment configuration. Every section and key is optional; missing keys
//! take the desk-scale defaults below, unknown keys are rejected.

use std::path::Path;

use anyhow::{Context, Result};
use diffrecon_core::classical::MapemConfig;
use diffrecon_core::ddip_recon::DdipConfig;
use diffrecon_core::diffusion::{NoiseSchedule, ScheduleConfig};
use diffrecon_core::dps_recon::DpsConfig;
use diffrecon_core::geometry::{GridSpec, ProjSpec};
use diffrecon_core::phantom::ContrastSpec;
use diffrecon_core::score::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; `--seed` overrides it.
    pub seed: u64,
    pub geometry: GeometrySection,
    pub phantom: PhantomSection,
    pub simulate: SimulateSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub recon: ReconSection,
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub nx: usize,
    pub ny: usize,
    pub voxel_mm: f64,
    pub angles: usize,
    pub bins: usize,
    pub bin_mm: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        let (g, p) = (GridSpec::desk(), ProjSpec::desk());
        Self {
            nx: g.nx,
            ny: g.ny,
            voxel_mm: g.voxel_size,
            angles: p.n_angles,
            bins: p.n_bins,
            bin_mm: p.bin_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub n_base: usize,
    pub expansion: usize,
    pub train_gm: f64,
    pub train_wm: f64,
    pub train_csf: f64,
    pub test_gm: f64,
    pub test_wm: f64,
    pub test_csf: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let (tr, te) = (ContrastSpec::fdg(), ContrastSpec::amyloid_negative());
        Self {
            n_base: 8,
            expansion: 25,
            train_gm: tr.gm_level,
            train_wm: tr.wm_level,
            train_csf: tr.csf_level,
            test_gm: te.gm_level,
            test_wm: te.wm_level,
            test_csf: te.csf_level,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub count_target: f64,
    pub n_realizations: usize,
    /// Expected background counts per bin.
    pub background: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            count_target: 1e6,
            n_realizations: 10,
            background: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = ScheduleConfig::scaled(400);
        Self {
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub mlem: MlemSection,
    pub mapem: MapemSection,
    pub dps: DpsSection,
    pub ddip: DdipSection,
    pub ddim_sample: DdimSampleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlemSection {
    pub n_iter: usize,
    /// Also write the iterate every this many iterations; 0 disables.
    pub snapshot_every: usize,
}

impl Default for MlemSection {
    fn default() -> Self {
        Self {
            n_iter: 100,
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapemSection {
    pub n_iter: usize,
    pub gamma: f64,
    pub weight: f64,
}

impl Default for MapemSection {
    fn default() -> Self {
        let m = MapemConfig::default();
        Self {
            n_iter: m.n_iter,
            gamma: m.gamma,
            weight: m.weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpsSection {
    pub lambda_step: f64,
    pub eta: f64,
    pub t_start: usize,
    pub mlem_init_iters: usize,
}

impl Default for DpsSection {
    fn default() -> Self {
        let d = DpsConfig::desk();
        Self {
            lambda_step: d.lambda_step,
            eta: d.eta,
            t_start: d.t_start,
            mlem_init_iters: d.mlem_init_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdipSection {
    pub n_outer: usize,
    pub m1: usize,
    pub m2: usize,
    pub t_start: usize,
    pub beta: f64,
    pub eta: f64,
    pub rank: usize,
    pub mlem_init_iters: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub snapshot_every: usize,
    pub unconditional: bool,
}

impl Default for DdipSection {
    fn default() -> Self {
        let d = DdipConfig::desk();
        Self {
            n_outer: d.n_outer,
            m1: d.m1,
            m2: d.m2,
            t_start: d.t_start,
            beta: d.beta,
            eta: d.eta,
            rank: d.rank,
            mlem_init_iters: d.mlem_init_iters,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            snapshot_every: d.snapshot_every,
            unconditional: d.unconditional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdimSampleSection {
    pub n_samples: usize,
    pub eta: f64,
}

impl Default for DdimSampleSection {
    fn default() -> Self {
        Self {
            n_samples: 4,
            eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Dotted config key read from each run manifest as the sweep value,
    /// e.g. `recon.ddip.t_start`. Runs are numbered when unset.
    pub sweep_key: Option<String>,
    /// Second dotted key; with both keys set a PSNR grid is written.
    pub grid_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub png: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { png: true }
    }
}

/// Parsed config plus the text it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub text: String,
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    Ok(toml::from_str(text)?)
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let config = parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(Loaded { config, text })
}

/// Looks up a dotted key such as `recon.ddip.beta` in a config document.
pub fn lookup_number(text: &str, key: &str) -> Option<f64> {
    let doc: toml::Table = toml::from_str(text).ok()?;
    let mut parts = key.split('.');
    let mut cur = doc.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    cur.as_float()
        .or_else(|| cur.as_integer().map(|i| i as f64))
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<GridSpec> {
        let g = &self.geometry;
        Ok(GridSpec::new(g.nx, g.ny, g.voxel_mm)?)
    }

    pub fn proj(&self) -> Result<ProjSpec> {
        let g = &self.geometry;
        Ok(ProjSpec::new(g.angles, g.bins, g.bin_mm)?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        Ok(ScheduleConfig {
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
        }
        .build()?)
    }

    pub fn train_contrast(&self) -> Result<ContrastSpec> {
        let p = &self.phantom;
        Ok(ContrastSpec::new(p.train_gm, p.train_wm, p.train_csf)?)
    }

    pub fn test_contrast(&self) -> Result<ContrastSpec> {
        let p = &self.phantom;
        Ok(ContrastSpec::new(p.test_gm, p.test_wm, p.test_csf)?)
    }

    pub fn train_config(&self, rng_seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            rng_seed,
        }
    }

    pub fn mapem(&self) -> MapemConfig {
        let m = &self.recon.mapem;
        MapemConfig {
            n_iter: m.n_iter,
            gamma: m.gamma,
            weight: m.weight,
        }
    }

    pub fn dps(&self) -> DpsConfig {
        let d = &self.recon.dps;
        DpsConfig {
            lambda_step: d.lambda_step,
            eta: d.eta,
            t_start: d.t_start,
            mlem_init_iters: d.mlem_init_iters,
        }
    }

    pub fn ddip(&self) -> DdipConfig {
        let d = &self.recon.ddip;
        DdipConfig {
            n_outer: d.n_outer,
            m1: d.m1,
            m2: d.m2,
            t_start: d.t_start,
            beta: d.beta,
            eta: d.eta,
            rank: d.rank,
            mlem_init_iters: d.mlem_init_iters,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            snapshot_every: d.snapshot_every,
            unconditional: d.unconditional,
        }
    }
}
