//! Fixtures shared by the desk-scale integration targets: the pretrained
//! network (trained once, cached under the target directory) and the
//! out-of-distribution test problem.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use diffrecon_core::classical::mlem;
use diffrecon_core::ddip_recon::{ddip_reconstruct, DdipConfig, DdipDiagnostics, ReconInput};
use diffrecon_core::diffusion::{NoiseSchedule, ScheduleConfig};
use diffrecon_core::geometry::{simulate_counts, GridSpec, Image, ProjSpec, Projector, Sinogram};
use diffrecon_core::metrics::RoiSet;
use diffrecon_core::phantom::{make_phantom, make_training_set, ContrastSpec, PhantomSample};
use diffrecon_core::rng::stream_rng;
use diffrecon_core::score::{
    load_net, net_digest, save_net, train_score, ConvScoreNet, TrainConfig,
};

pub const DESK_STEPS: usize = 400;
pub const TRAIN_SEED: u64 = 7;
pub const TEST_PHANTOM_SEED: u64 = 11;
pub const NOISE_SEED: u64 = 99;
pub const RECON_SEED: u64 = 5;
pub const REALIZATIONS: usize = 5;
pub const COUNTS: f64 = 1e6;

pub fn schedule() -> NoiseSchedule {
    ScheduleConfig::scaled(DESK_STEPS).build().unwrap()
}

fn cache_path() -> PathBuf {
    let cfg = TrainConfig::default();
    let key = format!(
        "desk_net_p{TRAIN_SEED}_s{}_n8x25_e{}_b{}_lr{}_wd{}_T{DESK_STEPS}.drnn",
        cfg.rng_seed, cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.weight_decay
    );
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(key)
}

/// Desk pretraining on 8 x 25 FDG phantoms (phantom seed `TRAIN_SEED`) with the default training
/// configuration. Deterministic, so a cached checkpoint is the same network.
pub fn trained_net() -> &'static ConvScoreNet<f32> {
    static NET: OnceLock<ConvScoreNet<f32>> = OnceLock::new();
    NET.get_or_init(|| {
        let path = cache_path();
        if let Ok(net) = load_net(&path) {
            eprintln!("using cached network {}", path.display());
            return net;
        }
        let start = Instant::now();
        let set =
            make_training_set(8, 25, &ContrastSpec::fdg(), GridSpec::desk(), TRAIN_SEED).unwrap();
        let data: Vec<(Image, Image)> = set.into_iter().map(|s| (s.activity, s.mr_prior)).collect();
        let cfg = TrainConfig::default();
        let (net, curve) = train_score(&data, &cfg, &schedule(), |_| {}).unwrap();
        eprintln!(
            "trained network in {:.0?}: loss {:.3} -> {:.3}",
            start.elapsed(),
            curve.first().unwrap().loss,
            curve.last().unwrap().loss
        );
        save_net(&path, &net).unwrap();
        net
    })
}

pub fn net_hash() -> String {
    net_digest(trained_net())
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Amyloid-negative phantom with `REALIZATIONS` noisy sinograms at `COUNTS`.
pub struct OodProblem {
    pub projector: Projector,
    pub phantom: PhantomSample,
    pub rois: RoiSet,
    pub background: Sinogram,
    /// `(counts, scale)` per realization.
    pub data: Vec<(Sinogram, f64)>,
}

impl OodProblem {
    pub fn input(&self, r: usize) -> ReconInput<'_> {
        let (y, scale) = &self.data[r];
        ReconInput {
            projector: &self.projector,
            y,
            b: &self.background,
            g: &self.phantom.mr_prior,
            scale: *scale,
        }
    }

    /// Ground truth in the count space of realization `r`.
    pub fn truth(&self, r: usize) -> Image {
        self.phantom.activity.scaled(self.data[r].1)
    }

    pub fn mlem(&self, r: usize, n_iter: usize, mut observe: impl FnMut(usize, &Image)) -> Image {
        let (y, _) = &self.data[r];
        mlem(
            &self.projector,
            y,
            &self.background,
            n_iter,
            None,
            |k, x| observe(k, x),
        )
        .unwrap()
        .0
    }

    pub fn ddip(&self, r: usize, cfg: &DdipConfig) -> Image {
        let mut diag = DdipDiagnostics::default();
        ddip_reconstruct(
            &self.input(r),
            trained_net(),
            cfg,
            &schedule(),
            &mut stream_rng(RECON_SEED, r as u64),
            &mut diag,
        )
        .unwrap()
    }
}

pub fn ood_problem() -> &'static OodProblem {
    static P: OnceLock<OodProblem> = OnceLock::new();
    P.get_or_init(|| {
        let grid = GridSpec::desk();
        let projector = Projector::new(grid, ProjSpec::desk()).unwrap();
        let phantom = make_phantom(TEST_PHANTOM_SEED, &ContrastSpec::amyloid_negative(), grid);
        let ybar = projector.forward(&phantom.activity).unwrap();
        let data = (0..REALIZATIONS)
            .map(|r| simulate_counts(&ybar, COUNTS, &mut stream_rng(NOISE_SEED, r as u64)).unwrap())
            .collect();
        let rois = RoiSet::from_masks(&phantom.masks);
        OodProblem {
            background: Sinogram::zeros(projector.proj()),
            projector,
            rois,
            phantom,
            data,
        }
    })
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
