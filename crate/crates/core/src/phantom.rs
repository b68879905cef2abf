//! Procedural thorax-like phantoms and paired radiograph datasets.
//!
//! Four materials: air background, an ellipsoidal body, two ellipsoidal
//! lungs, and a set of rib rods bent along elliptical arcs in axial planes.
//! Voxels average a regular grid of point samples, so boundaries can carry
//! partial-volume values.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::preprocess::standardize_projection;
use crate::projector::{default_geometries, hu_to_attenuation, render_drr, CameraGeometry};
use crate::voxcore::{encode_pgm16, load_pgm16, load_vvol, mix64, save_vvol, DomainTag, Projection, SeededRng, ViewTag, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    /// Uniform per-axis bound on the shift of the whole body, mm.
    pub position_mm: f64,
    /// Uniform per-axis bound on each lung's offset from its nominal place
    /// inside the body, mm.
    pub lung_offset_mm: f64,
    /// Relative bound on each semi-axis, e.g. 0.05 for ±5%.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub body_axes: [f64; 3],
    pub lung_axes: [[f64; 3]; 2],
    /// Lung centers relative to the body center, mm.
    pub lung_offsets: [[f64; 3]; 2],
    pub rib_count: usize,
    pub rib_radius: f64,
    pub hu_body: f64,
    pub hu_lung: f64,
    pub hu_bone: f64,
    pub hu_air: f64,
    pub jitter: Jitter,
    /// Sub-samples per axis averaged into each voxel; 1 samples voxel centres
    /// only, larger values give partial-volume boundaries.
    pub supersample: usize,
    pub seed: u64,
}

impl PhantomSpec {
    /// Cubic phantom of edge `n` voxels over a fixed 200 mm field of view.
    pub fn toy(n: usize) -> Self {
        let s = 200.0 / n as f64;
        Self {
            dims: [n; 3],
            spacing: [s; 3],
            body_axes: [68.0, 48.0, 72.0],
            lung_axes: [[20.0, 24.0, 40.0], [19.0, 23.0, 38.0]],
            lung_offsets: [[-26.0, -2.0, 2.0], [26.0, -2.0, 2.0]],
            rib_count: 4,
            rib_radius: 0.75 * s,
            hu_body: 40.0,
            hu_lung: -800.0,
            hu_bone: 1000.0,
            hu_air: -1000.0,
            jitter: Jitter { position_mm: 20.0, lung_offset_mm: 3.0, scale: 0.1 },
            supersample: 2,
            seed: 0,
        }
    }

    /// Parses and validates a TOML spec; every field is required.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid("phantom dims and spacing must be positive"));
        }
        if self.supersample == 0 {
            return Err(invalid("supersample must be at least 1"));
        }
        for hu in [self.hu_body, self.hu_lung, self.hu_bone, self.hu_air] {
            if !(-1000.0..=3000.0).contains(&hu) {
                return Err(invalid(format!("HU value {hu} outside [-1000, 3000]")));
            }
        }
        let axes_ok = |a: &[f64; 3]| a.iter().all(|&v| v > 0.0);
        if !axes_ok(&self.body_axes) || !self.lung_axes.iter().all(axes_ok) || self.rib_radius < 0.0 {
            return Err(invalid("phantom semi-axes must be positive"));
        }
        let j = &self.jitter;
        if j.position_mm < 0.0 || j.lung_offset_mm < 0.0 || !(0.0..0.5).contains(&j.scale) {
            return Err(invalid("jitter must be non-negative with scale below 0.5"));
        }
        // Worst case: shrunken body, grown lungs, lungs pushed outwards.
        let body = self.body_axes.map(|a| a * (1.0 - j.scale));
        for (axes, off) in self.lung_axes.iter().zip(&self.lung_offsets) {
            let lung = axes.map(|a| a * (1.0 + j.scale));
            for corner in 0..8 {
                let sign = |k: usize| if corner >> k & 1 == 0 { -1.0 } else { 1.0 };
                let c = [0, 1, 2].map(|k| off[k] + sign(k) * j.lung_offset_mm);
                if !ellipsoid_inside(c, lung, body) {
                    return Err(invalid("lungs are not contained in the body for every jitter draw"));
                }
            }
        }
        Ok(())
    }
}

/// Tests points on the surface of the ellipsoid `(center, axes)` against the
/// origin-centered ellipsoid `outer`.
fn ellipsoid_inside(center: [f64; 3], axes: [f64; 3], outer: [f64; 3]) -> bool {
    let n = 2000;
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n).all(|i| {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let th = golden * i as f64;
        let dir = [r * th.cos(), r * th.sin(), z];
        let p = [0, 1, 2].map(|k| center[k] + axes[k] * dir[k]);
        (0..3).map(|k| (p[k] / outer[k]).powi(2)).sum::<f64>() < 1.0
    })
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|k| ((p[k] - self.center[k]) / self.axes[k]).powi(2)).sum::<f64>() <= 1.0
    }
}

struct Rib {
    z: f64,
    center: [f64; 2],
    axes: [f64; 2],
}

impl Rib {
    /// Inside the rod around the ring, except for an anterior gap of ±35°.
    fn contains(&self, p: [f64; 3], radius: f64) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (nx, ny) = (dx / self.axes[0], dy / self.axes[1]);
        let rho = (nx * nx + ny * ny).sqrt();
        if rho == 0.0 {
            return false;
        }
        // Anterior is −y, the side facing the PA source.
        let angle = ny.atan2(nx);
        if (angle + PI / 2.0).abs() < 35f64.to_radians() {
            return false;
        }
        let ring = [self.center[0] + dx / rho, self.center[1] + dy / rho];
        let d2 = (p[0] - ring[0]).powi(2) + (p[1] - ring[1]).powi(2) + (p[2] - self.z).powi(2);
        d2 <= radius * radius
    }
}

/// Generates one phantom in HU. Jitter draws come from `rng`, so a fixed
/// `(spec, rng state)` gives an identical volume.
pub fn generate_phantom(spec: &PhantomSpec, rng: &mut SeededRng) -> Result<Volume> {
    spec.validate()?;
    let j = &spec.jitter;
    let mut off = || rng.uniform_range(-1.0, 1.0) * j.position_mm;
    let body_center = [off(), off(), off()];
    let mut scale = |a: f64| a * (1.0 + rng.uniform_range(-1.0, 1.0) * j.scale);
    let body = Ellipsoid { center: body_center, axes: spec.body_axes.map(&mut scale) };
    let mut lungs = Vec::with_capacity(2);
    for (axes, o) in spec.lung_axes.iter().zip(&spec.lung_offsets) {
        let c = [0, 1, 2].map(|k| body_center[k] + o[k] + rng.uniform_range(-1.0, 1.0) * j.lung_offset_mm);
        let a = axes.map(|a| a * (1.0 + rng.uniform_range(-1.0, 1.0) * j.scale));
        lungs.push(Ellipsoid { center: c, axes: a });
    }
    let ribs: Vec<Rib> = (0..spec.rib_count)
        .map(|i| {
            let frac = if spec.rib_count == 1 { 0.5 } else { i as f64 / (spec.rib_count - 1) as f64 };
            let z = body.center[2] + body.axes[2] * (-0.6 + 1.2 * frac);
            // Ring radius follows the body cross-section at that height.
            let shrink = (1.0 - ((z - body.center[2]) / body.axes[2]).powi(2)).max(0.0).sqrt() * 0.85;
            Rib {
                z,
                center: [body.center[0], body.center[1]],
                axes: [body.axes[0] * shrink, body.axes[1] * shrink],
            }
        })
        .collect();
    let material = |p: [f64; 3]| {
        if !body.contains(p) {
            return spec.hu_air;
        }
        if ribs.iter().any(|r| r.contains(p, spec.rib_radius)) {
            spec.hu_bone
        } else if lungs.iter().any(|l| l.contains(p)) {
            spec.hu_lung
        } else {
            spec.hu_body
        }
    };
    let [dx, dy, dz] = spec.dims;
    let ss = spec.supersample;
    let mut data = Vec::with_capacity(dx * dy * dz);
    let coord = |i: usize, k: usize, n: usize, s: f64| {
        (i as f64 + (k as f64 + 0.5) / ss as f64 - n as f64 / 2.0) * s
    };
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let mut acc = 0.0;
                for kz in 0..ss {
                    for ky in 0..ss {
                        for kx in 0..ss {
                            acc += material([
                                coord(x, kx, dx, spec.spacing[0]),
                                coord(y, ky, dy, spec.spacing[1]),
                                coord(z, kz, dz, spec.spacing[2]),
                            ]);
                        }
                    }
                }
                data.push(acc / (ss * ss * ss) as f64);
            }
        }
    }
    Volume::from_data(spec.dims, spec.spacing, data, DomainTag::Hu)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Stable 64-bit hash of a sample id (FNV-1a, then a SplitMix finalizer).
pub fn id_hash(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(h)
}

/// Ranks ids by [`id_hash`] (ties by id) and assigns the first `⌊0.8n⌋` to
/// train, the next `⌊0.1n⌋` to val and the rest to test.
pub fn assign_splits(ids: &[String]) -> Vec<Split> {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| id_hash(&ids[a]).cmp(&id_hash(&ids[b])).then_with(|| ids[a].cmp(&ids[b])));
    let (n_train, n_val) = (n * 8 / 10, n / 10);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetOptions {
    /// Source-to-detector distance, mm.
    pub sid_mm: f64,
    /// Side of the standardized square projections.
    pub proj_size: usize,
    pub lateral: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub seed: u64,
    pub vvol_path: String,
    pub pa_path: String,
    pub lateral_path: Option<String>,
    pub split: Split,
}

/// Dataset-wide parameters, stored next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub n: usize,
    pub spec: PhantomSpec,
    pub options: DatasetOptions,
    pub pa_geometry: CameraGeometry,
    pub lateral_geometry: CameraGeometry,
    /// Preprocessing applied to the rendered images, for the record.
    pub preprocessing: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INFO_FILE: &str = "dataset.json";

/// Per-sample seed derived from the spec seed and the sample index.
pub fn sample_seed(spec_seed: u64, index: usize) -> u64 {
    mix64(spec_seed ^ mix64(index as u64 + 1))
}

/// Renders the stored (standardized) projections for one HU volume.
pub fn render_views(volume: &Volume, info: &DatasetInfo) -> Result<(Projection, Option<Projection>)> {
    let av = hu_to_attenuation(volume)?;
    let size = [info.options.proj_size; 2];
    let pa = standardize_projection(&render_drr(&av, &info.pa_geometry)?, size)?;
    let lat = if info.options.lateral {
        Some(standardize_projection(&render_drr(&av, &info.lateral_geometry)?, size)?)
    } else {
        None
    };
    Ok((pa, lat))
}

/// Writes `n` phantoms with their radiographs under `out_dir`, plus
/// `manifest.jsonl` and `dataset.json`. Returns the manifest records.
pub fn generate_dataset(spec: &PhantomSpec, n: usize, out_dir: &Path, opts: &DatasetOptions) -> Result<Vec<ManifestRecord>> {
    if n == 0 {
        return Err(invalid("dataset needs at least one phantom"));
    }
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let template = Volume::new(spec.dims, spec.spacing, 0.0)?;
    let (pa_geometry, lateral_geometry) = default_geometries(&template, opts.sid_mm, opts.proj_size)?;
    let info = DatasetInfo {
        n,
        spec: spec.clone(),
        options: opts.clone(),
        pa_geometry,
        lateral_geometry,
        preprocessing: "bilinear resize to proj_size, min-max to [0, 1], 16-bit PGM".into(),
    };
    let ids: Vec<String> = (0..n).map(|i| format!("ph{i:05}")).collect();
    let splits = assign_splits(&ids);
    let mut records = Vec::with_capacity(n);
    for (i, id) in ids.iter().enumerate() {
        let seed = sample_seed(spec.seed, i);
        let vol = generate_phantom(spec, &mut SeededRng::new(seed, 0))?;
        let (pa, lat) = render_views(&vol, &info)?;
        let rec = ManifestRecord {
            id: id.clone(),
            seed,
            vvol_path: format!("{id}.vvol"),
            pa_path: format!("{id}_pa.pgm"),
            lateral_path: lat.as_ref().map(|_| format!("{id}_lateral.pgm")),
            split: splits[i],
        };
        save_vvol(&vol, out_dir.join(&rec.vvol_path))?;
        fs::write(out_dir.join(&rec.pa_path), encode_pgm16(&pa)?)?;
        if let (Some(l), Some(path)) = (&lat, &rec.lateral_path) {
            fs::write(out_dir.join(path), encode_pgm16(l)?)?;
        }
        records.push(rec);
    }
    let mut manifest = String::new();
    for r in &records {
        manifest.push_str(&serde_json::to_string(r)?);
        manifest.push('\n');
    }
    fs::write(out_dir.join(MANIFEST_FILE), manifest)?;
    fs::write(out_dir.join(INFO_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok(records)
}

/// A generated dataset opened from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub info: DatasetInfo,
    pub records: Vec<ManifestRecord>,
}

/// One loaded sample: HU volume and `[0, 1]` projections.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub volume: Volume,
    pub pa: Projection,
    pub lateral: Option<Projection>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let info_path = root.join(INFO_FILE);
        let info_text = fs::read_to_string(&info_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", info_path.display())))?;
        let info: DatasetInfo = serde_json::from_str(&info_text)?;
        let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        Ok(Self { root, info, records })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn load(&self, rec: &ManifestRecord) -> Result<Sample> {
        let volume = load_vvol(self.root.join(&rec.vvol_path))?;
        let spacing = self.info.pa_geometry.detector_size[0] / self.info.options.proj_size as f64;
        let pa = load_pgm16(self.root.join(&rec.pa_path), spacing, ViewTag::Pa)?;
        let lateral = match &rec.lateral_path {
            Some(p) => Some(load_pgm16(self.root.join(p), spacing, ViewTag::Lateral)?),
            None => None,
        };
        Ok(Sample { id: rec.id.clone(), volume, pa, lateral })
    }
}
