use std::path::Path;

use super::config::PipelineConfig;
use crate::coarsediff::Views;
use crate::error::{Error, Result};
use crate::phantom::{generate_dataset, id_hash, Dataset, DatasetOptions, PhantomSpec, Split, INFO_FILE};
use crate::preprocess::{
    apply_shift, min_max_normalize, register_to_reference, rescale_to_grid, window_and_normalize, NormTarget,
    RigidShift2D,
};
use crate::voxcore::{mix64, Projection, SeededRng, Volume};

const XRAY_STREAM: u64 = 0x7a7;
/// Spread of the log display-gamma of a simulated clinical radiograph.
const XRAY_GAMMA_SPREAD: f64 = 0.15;

/// A view pair for one subject. Values are in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub pa: Projection,
    pub lateral: Option<Projection>,
}

impl ViewPair {
    pub fn views(&self, bi_planar: bool) -> Result<Views> {
        if bi_planar {
            let lat = self
                .lateral
                .clone()
                .ok_or_else(|| Error::Config("bi-planar model needs a dataset with lateral views".into()))?;
            Ok(Views::bi_planar(self.pa.clone(), lat))
        } else {
            Ok(Views::single(self.pa.clone()))
        }
    }
}

/// One subject after preprocessing.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub split: Split,
    /// Windowed target on the diffusion grid, `[-1, 1]`.
    pub target: Volume,
    /// Windowed target on the output grid, `[-1, 1]`.
    pub target_full: Volume,
    /// Clean DRRs.
    pub drr: ViewPair,
    /// Simulated clinical radiographs after registration to the DRRs.
    pub xray: ViewPair,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub samples: Vec<PreparedSample>,
}

impl PreparedData {
    pub fn split(&self, split: Split) -> Vec<&PreparedSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

fn to_pm1(p: &Projection) -> Result<Projection> {
    let data = p.data().iter().map(|&x| 2.0 * x - 1.0).collect();
    Projection::new(p.dims(), p.pixel_spacing(), data, p.view())
}

/// Degrades a clean `[0, 1]` DRR into a clinical-style radiograph: random
/// display gamma, detector noise, and a sub-pixel misalignment, then min-max.
pub fn simulate_clinical(drr: &Projection, noise: f64, max_shift: f64, rng: &mut SeededRng) -> Result<Projection> {
    let g = (XRAY_GAMMA_SPREAD * rng.normal()).exp();
    let data: Vec<f64> = drr.data().iter().map(|&x| x.max(0.0).powf(g) + noise * rng.normal()).collect();
    let p = Projection::new(drr.dims(), drr.pixel_spacing(), data, drr.view())?;
    let shift = RigidShift2D::new(rng.uniform_range(-max_shift, max_shift), rng.uniform_range(-max_shift, max_shift));
    let mut out = apply_shift(&p, shift)?;
    min_max_normalize(&mut out);
    Ok(out)
}

/// Registers `moving` onto `reference` and resamples it into alignment.
pub fn register_and_align(moving: &Projection, reference: &Projection, radius: usize) -> Result<Projection> {
    let s = register_to_reference(moving, reference, radius)?;
    let mut out = apply_shift(moving, s)?;
    min_max_normalize(&mut out);
    Ok(out)
}

fn clinical_view(cfg: &PipelineConfig, id: &str, drr: &Projection, view_index: u64) -> Result<Projection> {
    let mut rng = SeededRng::new(mix64(cfg.seed ^ id_hash(id)), XRAY_STREAM + view_index);
    let sim = simulate_clinical(drr, cfg.data.xray_noise, cfg.data.xray_max_shift, &mut rng)?;
    register_and_align(&sim, drr, cfg.data.register_radius)
}

/// Windowed `[-1, 1]` target of an HU volume on an `n³` grid.
pub fn prepare_target(cfg: &PipelineConfig, hu: &Volume, n: usize) -> Result<Volume> {
    let v = if hu.dims() == [n; 3] { hu.clone() } else { rescale_to_grid(hu, [n; 3])? };
    window_and_normalize(&v, cfg.window(), NormTarget::Pm1)
}

pub fn dataset_options(cfg: &PipelineConfig) -> DatasetOptions {
    DatasetOptions { sid_mm: cfg.data.sid_mm, proj_size: cfg.proj_size(), lateral: cfg.data.lateral }
}

/// Phantom spec matching a config: output grid, config seed.
pub fn default_spec(cfg: &PipelineConfig) -> PhantomSpec {
    PhantomSpec { seed: cfg.seed, ..PhantomSpec::toy(cfg.full_size()) }
}

/// Generates the configured dataset unless one is already present.
pub fn ensure_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let dir = &cfg.paths.dataset;
    if !dir.join(INFO_FILE).exists() {
        generate_dataset(&default_spec(cfg), cfg.data.n_phantoms, dir, &dataset_options(cfg))?;
    }
    open_dataset(cfg, dir)
}

/// Opens a dataset and checks that it fits the config.
pub fn open_dataset(cfg: &PipelineConfig, dir: &Path) -> Result<Dataset> {
    if !dir.join(INFO_FILE).exists() {
        return Err(Error::Config(format!("no dataset at {}; run `axon phantom` first", dir.display())));
    }
    let ds = Dataset::open(dir)?;
    if ds.info.spec.dims != cfg.model.full_dims {
        return Err(Error::Config(format!(
            "dataset phantoms are {:?}, config expects {:?}",
            ds.info.spec.dims, cfg.model.full_dims
        )));
    }
    if ds.info.options.proj_size != cfg.proj_size() {
        return Err(Error::Config(format!(
            "dataset projections are {}², config expects {}²",
            ds.info.options.proj_size,
            cfg.proj_size()
        )));
    }
    if cfg.model.bi_planar && !ds.info.options.lateral {
        return Err(Error::Config("bi-planar config needs a dataset with lateral views".into()));
    }
    Ok(ds)
}

/// Loads and preprocesses every subject of the dataset.
pub fn prepare(cfg: &PipelineConfig) -> Result<PreparedData> {
    let dataset = open_dataset(cfg, &cfg.paths.dataset)?;
    let mut samples = Vec::with_capacity(dataset.records.len());
    for rec in &dataset.records {
        let s = dataset.load(rec)?;
        let target = prepare_target(cfg, &s.volume, cfg.size())?;
        let target_full = prepare_target(cfg, &s.volume, cfg.full_size())?;
        let xray_pa = clinical_view(cfg, &s.id, &s.pa, 0)?;
        let xray_lat = match &s.lateral {
            Some(l) => Some(clinical_view(cfg, &s.id, l, 1)?),
            None => None,
        };
        let pm1 = |p: &Option<Projection>| p.as_ref().map(to_pm1).transpose();
        samples.push(PreparedSample {
            id: s.id.clone(),
            split: rec.split,
            target,
            target_full,
            drr: ViewPair { pa: to_pm1(&s.pa)?, lateral: pm1(&s.lateral)? },
            xray: ViewPair { pa: to_pm1(&xray_pa)?, lateral: pm1(&xray_lat)? },
        });
    }
    Ok(PreparedData { dataset, samples })
}

/// Voxelwise mean of the training targets on the output grid.
pub fn mean_volume(samples: &[&PreparedSample]) -> Result<Volume> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("mean of an empty set".into()))?;
    let mut acc = vec![0.0; first.target_full.data().len()];
    for s in samples {
        for (a, &x) in acc.iter_mut().zip(s.target_full.data()) {
            *a += x;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Volume::from_data(first.target_full.dims(), first.target_full.spacing(), acc, first.target_full.domain())
}
