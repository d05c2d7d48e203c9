//! Subcommand bodies.
//!
//! Seed streams derived from the master seed `s` with `stream_seed(s, k)`:
//! 0 training phantoms, 1 test phantom, 2 noise realizations, 3 network
//! training, 4 reconstruction. Realization `r` then uses stream `r` of its
//! command's seed, so results do not depend on `--jobs`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use diffrecon_core::classical::{mapem, mlem, IterationRecord};
use diffrecon_core::ddip_recon::{ddip_reconstruct, DdipDiagnostics, ReconInput};
use diffrecon_core::diffusion::ddim_sample;
use diffrecon_core::dps_recon::{dps_reconstruct, DpsDiagnostics};
use diffrecon_core::geometry::{simulate_counts, Image, Projector, Sinogram};
use diffrecon_core::io::{
    read_image, read_labels, read_sinogram, write_image, write_labels, write_png_gray,
    write_sinogram,
};
use diffrecon_core::metrics::{
    contrast_recovery, cv, ensemble_stats, percent_contrast, psnr, RoiSet,
};
use diffrecon_core::phantom::{make_phantom, make_training_set, TissueMasks};
use diffrecon_core::rng::{standard_normal, stream_rng, stream_seed};
use diffrecon_core::score::{load_net, save_net, train_score, ConvScoreNet, NoisePredictor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, ExperimentConfig, Loaded};
use crate::manifest::{sha256_file, Manifest};
use crate::plot::{line_plot, Series};
use crate::{Common, Method};

const STREAM_TRAIN_PHANTOMS: u64 = 0;
const STREAM_TEST_PHANTOM: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_TRAINING: u64 = 3;
const STREAM_RECON: u64 = 4;

pub const REALIZATIONS_CSV: &str = "realizations.csv";

struct Session {
    loaded: Loaded,
    seed: u64,
    jobs: usize,
    out: PathBuf,
}

impl Session {
    fn open(c: &Common) -> Result<Self> {
        let loaded = match &c.config {
            Some(p) => config::load(p)?,
            None => Loaded {
                config: ExperimentConfig::default(),
                text: String::new(),
            },
        };
        ensure!(c.jobs >= 1, "--jobs must be at least 1");
        fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
        let seed = c.seed.unwrap_or(loaded.config.seed);
        Ok(Self {
            loaded,
            seed,
            jobs: c.jobs,
            out: c.out.clone(),
        })
    }

    fn cfg(&self) -> &ExperimentConfig {
        &self.loaded.config
    }

    fn manifest(&self, command: &str) -> Manifest {
        let mut m = Manifest::new(command, self.seed, self.jobs, &self.loaded.text);
        if let Some(t) = thread_cap() {
            m.fact("diffrecon_threads", t);
        }
        m
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let n = thread_cap().map_or(self.jobs, |cap| self.jobs.min(cap));
        Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()?)
    }

    fn png(&self, name: &str, img: &Image) -> Result<()> {
        if self.cfg().output.png {
            let g = img.grid();
            write_png_gray(self.out.join(name), g.nx, g.ny, img.values())?;
        }
        Ok(())
    }
}

fn thread_cap() -> Option<usize> {
    std::env::var("DIFFRECON_THREADS")
        .ok()?
        .parse()
        .ok()
        .filter(|&n: &usize| n > 0)
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn phantom(c: &Common) -> Result<()> {
    let s = Session::open(c)?;
    let cfg = s.cfg();
    let grid = cfg.grid()?;
    let train = make_training_set(
        cfg.phantom.n_base,
        cfg.phantom.expansion,
        &cfg.train_contrast()?,
        grid,
        stream_seed(s.seed, STREAM_TRAIN_PHANTOMS),
    )?;
    let test = make_phantom(
        stream_seed(s.seed, STREAM_TEST_PHANTOM),
        &cfg.test_contrast()?,
        grid,
    );
    let (train_dir, test_dir) = (s.out.join("train"), s.out.join("test"));
    fs::create_dir_all(&train_dir)?;
    fs::create_dir_all(&test_dir)?;
    for (i, p) in train.iter().enumerate() {
        write_image(
            train_dir.join(format!("sample_{i:04}_activity.drim")),
            &p.activity,
        )?;
        write_image(
            train_dir.join(format!("sample_{i:04}_prior.drim")),
            &p.mr_prior,
        )?;
        write_labels(
            train_dir.join(format!("sample_{i:04}_labels.drlb")),
            grid,
            &p.masks.labels(),
        )?;
    }
    write_image(test_dir.join("activity.drim"), &test.activity)?;
    write_image(test_dir.join("prior.drim"), &test.mr_prior)?;
    write_labels(test_dir.join("labels.drlb"), grid, &test.masks.labels())?;
    s.png("test/activity.png", &test.activity)?;
    s.png("test/prior.png", &test.mr_prior)?;
    let mut m = s.manifest("phantom");
    m.fact("train_samples", train.len());
    m.finish(&s.out)?;
    eprintln!(
        "{} training phantoms and one test phantom in {}",
        train.len(),
        s.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RealizationRow {
    index: usize,
    seed: u64,
    /// Expected counts per unit of forward-projected activity.
    scale: f64,
    total_counts: f64,
}

pub fn simulate(c: &Common, phantom_dir: &Path) -> Result<()> {
    let s = Session::open(c)?;
    let cfg = s.cfg();
    ensure!(
        cfg.simulate.n_realizations >= 1,
        "n_realizations must be at least 1"
    );
    ensure!(
        cfg.simulate.background >= 0.0,
        "background must be non-negative"
    );
    let activity_path = phantom_dir.join("test/activity.drim");
    let activity = read_image(&activity_path)?;
    let p = Projector::new(activity.grid(), cfg.proj()?)?;
    let ybar = p.forward(&activity)?;
    let scale = cfg.simulate.count_target / ybar.sum();
    ensure!(
        scale.is_finite() && scale > 0.0,
        "test phantom projects to zero counts"
    );
    let b = Sinogram::filled(p.proj(), cfg.simulate.background);
    let mean = Sinogram::new(
        p.proj(),
        ybar.values()
            .iter()
            .zip(b.values())
            .map(|(m, bb)| m * scale + bb)
            .collect(),
    )?;
    let noise_seed = stream_seed(s.seed, STREAM_NOISE);
    let mut rows = Vec::new();
    for r in 0..cfg.simulate.n_realizations {
        let mut rng = stream_rng(noise_seed, r as u64);
        let (y, _) = simulate_counts(&mean, mean.sum(), &mut rng)?;
        write_sinogram(s.out.join(format!("real_{r:02}.drsn")), &y)?;
        rows.push(RealizationRow {
            index: r,
            seed: stream_seed(noise_seed, r as u64),
            scale,
            total_counts: y.sum(),
        });
    }
    write_sinogram(s.out.join("background.drsn"), &b)?;
    write_csv(&s.out.join(REALIZATIONS_CSV), &rows)?;
    let mut m = s.manifest("simulate");
    m.input(&activity_path)?;
    m.fact("scale", scale)
        .fact("expected_total", ybar.sum() * scale);
    m.finish(&s.out)?;
    eprintln!(
        "{} realizations at {:.3e} counts in {}",
        rows.len(),
        cfg.simulate.count_target,
        s.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

pub fn train(c: &Common, phantom_dir: &Path) -> Result<()> {
    let s = Session::open(c)?;
    let cfg = s.cfg();
    let dir = phantom_dir.join("train");
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with("_activity.drim"))
        .collect();
    names.sort();
    ensure!(
        !names.is_empty(),
        "no training phantoms in {}",
        dir.display()
    );
    let mut data = Vec::with_capacity(names.len());
    for a in &names {
        let prior = PathBuf::from(a.to_string_lossy().replace("_activity.drim", "_prior.drim"));
        data.push((read_image(a)?, read_image(&prior)?));
    }
    let sched = cfg.schedule()?;
    let tcfg = cfg.train_config(stream_seed(s.seed, STREAM_TRAINING));
    let start = std::time::Instant::now();
    let (net, curve) = train_score(&data, &tcfg, &sched, |r| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  {:.0?}",
            r.epoch,
            r.loss,
            start.elapsed()
        );
    })?;
    let ckpt = s.out.join("net.drnn");
    save_net(&ckpt, &net)?;
    let rows: Vec<LossRow> = curve
        .iter()
        .map(|r| LossRow {
            epoch: r.epoch,
            loss: r.loss,
        })
        .collect();
    write_csv(&s.out.join("loss.csv"), &rows)?;
    if cfg.output.png {
        line_plot(
            &s.out.join("loss.png"),
            &[Series {
                points: curve.iter().map(|r| (r.epoch as f64, r.loss)).collect(),
            }],
        )?;
    }
    let mut m = s.manifest("train");
    m.fact("samples", data.len())
        .fact("checkpoint_sha256", sha256_file(&ckpt)?);
    m.finish(&s.out)?;
    Ok(())
}

fn load_checkpoint(path: Option<&Path>, method: Method) -> Result<(ConvScoreNet<f32>, PathBuf)> {
    let Some(path) = path else {
        bail!("--checkpoint is required for {}", method.name())
    };
    Ok((
        load_net(path).with_context(|| format!("loading {}", path.display()))?,
        path.to_path_buf(),
    ))
}

fn iteration_rows(records: &[IterationRecord]) -> Vec<(usize, f64, f64, usize)> {
    records
        .iter()
        .map(|r| (r.iteration, r.log_likelihood, r.penalty, r.clamped))
        .collect()
}

fn write_rows<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn recon(
    c: &Common,
    method: Method,
    phantom_dir: &Path,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    only: Option<Vec<usize>>,
) -> Result<()> {
    let s = Session::open(c)?;
    let cfg = s.cfg();
    let prior_path = phantom_dir.join("test/prior.drim");
    let g = read_image(&prior_path)?;
    let sched = cfg.schedule()?;
    let recon_seed = stream_seed(s.seed, STREAM_RECON);
    let mut m = s.manifest("recon");
    m.fact("method", method.name());
    m.input(&prior_path)?;
    let pool = s.pool()?;

    if method == Method::DdimSample {
        let (net, ckpt) = load_checkpoint(checkpoint, method)?;
        m.input(&ckpt)?;
        let n = cfg.recon.ddim_sample.n_samples;
        ensure!(n >= 1, "n_samples must be at least 1");
        let eta = cfg.recon.ddim_sample.eta;
        let samples: Vec<Image> = pool.install(|| {
            (0..n)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream_rng(recon_seed, k as u64);
                    let x = Image::new(g.grid(), standard_normal(&mut rng, g.grid().len()))?;
                    Ok(ddim_sample(
                        x,
                        sched.steps(),
                        eta,
                        &sched,
                        &mut rng,
                        |x, t| net.predict(x, t, &g),
                    )?)
                })
                .collect::<Result<_>>()
        })?;
        for (k, x) in samples.iter().enumerate() {
            write_image(s.out.join(format!("sample_{k:02}.drim")), x)?;
            s.png(&format!("sample_{k:02}.png"), x)?;
        }
        m.finish(&s.out)?;
        return Ok(());
    }

    let Some(data) = data else {
        bail!("--data is required for {}", method.name())
    };
    let rows: Vec<RealizationRow> = read_csv(&data.join(REALIZATIONS_CSV))?;
    let b = read_sinogram(data.join("background.drsn"))?;
    let p = Projector::new(g.grid(), b.proj())?;
    let indices = only.unwrap_or_else(|| rows.iter().map(|r| r.index).collect());
    ensure!(!indices.is_empty(), "no realizations selected");
    let net = match method {
        Method::Dps | Method::Ddip => {
            let (net, ckpt) = load_checkpoint(checkpoint, method)?;
            m.input(&ckpt)?;
            Some(net)
        }
        _ => None,
    };
    for &r in &indices {
        ensure!(
            rows.iter().any(|row| row.index == r),
            "realization {r} not in {}",
            data.display()
        );
        m.input(&data.join(format!("real_{r:02}.drsn")))?;
    }

    let run_one = |r: usize| -> Result<()> {
        let row = rows
            .iter()
            .find(|row| row.index == r)
            .expect("checked above");
        let y = read_sinogram(data.join(format!("real_{r:02}.drsn")))?;
        let mut rng = stream_rng(recon_seed, r as u64);
        let input = ReconInput {
            projector: &p,
            y: &y,
            b: &b,
            g: &g,
            scale: row.scale,
        };
        let diag_path = s.out.join(format!("diagnostics_{r:02}.csv"));
        let x = match method {
            Method::Mlem => {
                let every = cfg.recon.mlem.snapshot_every;
                let mut snaps = Vec::new();
                let (x, rec) = mlem(&p, &y, &b, cfg.recon.mlem.n_iter, None, |it, x| {
                    if every > 0 && it % every == 0 {
                        snaps.push((it, x.clone()));
                    }
                })?;
                for (it, x) in snaps {
                    write_image(s.out.join(format!("iter_{r:02}_{it:04}.drim")), &x)?;
                }
                write_rows(
                    &diag_path,
                    &["iteration", "log_likelihood", "penalty", "clamped"],
                    &iteration_rows(&rec),
                )?;
                x
            }
            Method::Mapem => {
                let (x, rec) = mapem(&p, &y, &b, &cfg.mapem(), None, |_, _| {})?;
                write_rows(
                    &diag_path,
                    &["iteration", "log_likelihood", "penalty", "clamped"],
                    &iteration_rows(&rec),
                )?;
                x
            }
            Method::Dps => {
                let mut diag = DpsDiagnostics::default();
                let out = dps_reconstruct(
                    &input,
                    net.as_ref().expect("loaded"),
                    &cfg.dps(),
                    &sched,
                    &mut rng,
                    &mut diag,
                );
                let recs: Vec<(usize, f64)> =
                    diag.records.iter().map(|d| (d.t, d.data_fit)).collect();
                write_rows(&diag_path, &["t", "data_fit"], &recs)?;
                out?
            }
            Method::Ddip => {
                let mut diag = DdipDiagnostics::default();
                let out = ddip_reconstruct(
                    &input,
                    net.as_ref().expect("loaded"),
                    &cfg.ddip(),
                    &sched,
                    &mut rng,
                    &mut diag,
                );
                let recs: Vec<(usize, usize, f64, f64, f64)> = diag
                    .records
                    .iter()
                    .map(|d| (d.t, d.n, d.log_likelihood, d.hqs_objective, d.finetune_loss))
                    .collect();
                write_rows(
                    &diag_path,
                    &["t", "n", "log_likelihood", "hqs_objective", "finetune_loss"],
                    &recs,
                )?;
                for (t, snap) in &diag.snapshots {
                    write_image(s.out.join(format!("snapshot_{r:02}_t{t:04}.drim")), snap)?;
                }
                out?
            }
            Method::DdimSample => unreachable!("handled above"),
        };
        write_image(s.out.join(format!("recon_{r:02}.drim")), &x)?;
        s.png(&format!("recon_{r:02}.png"), &x)?;
        eprintln!("{} realization {r} done", method.name());
        Ok(())
    };
    pool.install(|| {
        indices
            .par_iter()
            .map(|&r| run_one(r))
            .collect::<Result<Vec<()>>>()
    })?;
    m.finish(&s.out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct MetricRow {
    run: String,
    method: String,
    sweep: f64,
    grid: f64,
    realization: usize,
    psnr: f64,
    percent_contrast: f64,
    cv: f64,
    contrast_recovery: f64,
}

#[derive(Debug, Clone, Serialize)]
struct SummaryRow {
    run: String,
    method: String,
    sweep: f64,
    grid: f64,
    n: usize,
    psnr: f64,
    percent_contrast: f64,
    cv: f64,
    contrast_recovery: f64,
}

fn recon_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = e?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if let Some(idx) = name
            .strip_prefix("recon_")
            .and_then(|n| n.strip_suffix(".drim"))
        {
            out.push((
                idx.parse()
                    .with_context(|| format!("bad file name {name}"))?,
                path,
            ));
        }
    }
    out.sort();
    Ok(out)
}

/// Mean PSNR with one row per sweep value and one column per grid value;
/// missing combinations are left empty.
fn write_psnr_grid(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let distinct = |f: fn(&SummaryRow) -> f64| {
        let mut v: Vec<f64> = summary.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let (rows, cols) = (distinct(|r| r.sweep), distinct(|r| r.grid));
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(std::iter::once("sweep".to_string()).chain(cols.iter().map(|c| c.to_string())))?;
    for sv in &rows {
        let cells = cols.iter().map(|gv| {
            let hits: Vec<f64> = summary
                .iter()
                .filter(|r| r.sweep == *sv && r.grid == *gv)
                .map(|r| r.psnr)
                .collect();
            if hits.is_empty() {
                String::new()
            } else {
                (hits.iter().sum::<f64>() / hits.len() as f64).to_string()
            }
        });
        w.write_record(std::iter::once(sv.to_string()).chain(cells))?;
    }
    w.flush()?;
    Ok(())
}

pub fn metrics(c: &Common, phantom_dir: &Path, data: &Path, runs: &[PathBuf]) -> Result<()> {
    ensure!(!runs.is_empty(), "no runs given");
    let s = Session::open(c)?;
    let truth_path = phantom_dir.join("test/activity.drim");
    let activity = read_image(&truth_path)?;
    let (_, labels) = read_labels(phantom_dir.join("test/labels.drlb"))?;
    let rois = RoiSet::from_masks(&TissueMasks::from_labels(&labels)?);
    let reals: Vec<RealizationRow> = read_csv(&data.join(REALIZATIONS_CSV))?;
    let sweep_key = s.cfg().metrics.sweep_key.clone();
    let grid_key = s.cfg().metrics.grid_key.clone();
    let defaults = toml::to_string(&ExperimentConfig::default()).unwrap_or_default();
    let lookup = |man: &Manifest, key: &str| {
        config::lookup_number(&man.config, key)
            .or_else(|| config::lookup_number(&defaults, key))
            .unwrap_or(f64::NAN)
    };

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut ensembles = Vec::new();
    for (k, dir) in runs.iter().enumerate() {
        let man = Manifest::read(dir)?;
        let method = man
            .facts
            .get("method")
            .cloned()
            .unwrap_or_else(|| man.command.clone());
        let run = dir
            .file_name()
            .map_or_else(|| format!("run{k}"), |n| n.to_string_lossy().into_owned());
        let sweep = match &sweep_key {
            Some(key) => lookup(&man, key),
            None => k as f64,
        };
        let grid = grid_key
            .as_deref()
            .map_or(f64::NAN, |key| lookup(&man, key));
        let files = recon_files(dir)?;
        ensure!(!files.is_empty(), "no reconstructions in {}", dir.display());
        let mut images = Vec::new();
        let mut scale0 = None;
        for (r, path) in files {
            let real = reals
                .iter()
                .find(|x| x.index == r)
                .with_context(|| format!("realization {r} unknown"))?;
            let truth = activity.scaled(real.scale);
            let x = read_image(&path)?;
            rows.push(MetricRow {
                run: run.clone(),
                method: method.clone(),
                sweep,
                grid,
                realization: r,
                psnr: psnr(&truth, &x)?,
                percent_contrast: percent_contrast(&x, &truth, &rois)?,
                cv: cv(&x, &rois)?,
                contrast_recovery: contrast_recovery(&x, &truth, &rois.target)?,
            });
            scale0.get_or_insert(real.scale);
            images.push(x);
        }
        let mine = &rows[rows.len() - images.len()..];
        let n = mine.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| mine.iter().map(f).sum::<f64>() / n;
        summary.push(SummaryRow {
            run: run.clone(),
            method,
            sweep,
            grid,
            n: mine.len(),
            psnr: mean(|r| r.psnr),
            percent_contrast: mean(|r| r.percent_contrast),
            cv: mean(|r| r.cv),
            contrast_recovery: mean(|r| r.contrast_recovery),
        });
        if images.len() >= 2 {
            let truth = activity.scaled(scale0.expect("non-empty"));
            ensembles.push((run, ensemble_stats(&images, &truth)?));
        }
    }

    write_csv(&s.out.join("metrics.csv"), &rows)?;
    write_csv(&s.out.join("summary.csv"), &summary)?;
    if sweep_key.is_some() && grid_key.is_some() {
        write_psnr_grid(&s.out.join("psnr_grid.csv"), &summary)?;
    }
    for (run, e) in &ensembles {
        for (name, img) in [("mean", &e.mean), ("bias", &e.bias), ("std", &e.std)] {
            write_image(s.out.join(format!("ensemble_{run}_{name}.drim")), img)?;
            s.png(&format!("ensemble_{run}_{name}.png"), img)?;
        }
    }
    if s.cfg().output.png {
        let mut methods: Vec<&str> = summary.iter().map(|r| r.method.as_str()).collect();
        methods.dedup();
        methods.sort();
        methods.dedup();
        let series = |f: &dyn Fn(&SummaryRow) -> (f64, f64)| -> Vec<Series> {
            methods
                .iter()
                .map(|m| {
                    let mut points: Vec<(f64, f64)> =
                        summary.iter().filter(|r| r.method == *m).map(f).collect();
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    Series { points }
                })
                .collect()
        };
        line_plot(&s.out.join("psnr.png"), &series(&|r| (r.sweep, r.psnr)))?;
        line_plot(
            &s.out.join("tradeoff.png"),
            &series(&|r| (r.percent_contrast, r.cv)),
        )?;
    }
    let mut m = s.manifest("metrics");
    m.input(&truth_path)?;
    for r in runs {
        m.input(&r.join(crate::manifest::MANIFEST_NAME))?;
    }
    m.finish(&s.out)?;
    Ok(())
}
