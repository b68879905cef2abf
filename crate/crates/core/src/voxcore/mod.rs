//! Volumetric and planar data model shared by every stage.
//!
//! Voxels are stored row-major with x fastest: the linear index of `(x, y, z)`
//! is `x + dx * (y + dy * z)`. Projections use the same convention with `u`
//! fastest. All arithmetic is `f64`; the on-disk formats in [`io`] store `f32`
//! voxels and 16-bit pixels.

mod io;
mod rng;

pub use io::{
    decode_pgm16, encode_pgm16, load_pgm16, load_vvol, read_vvol, save_pgm16, save_vvol,
    write_vvol,
};
pub use rng::{mix64, SeededRng};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Intensity domain of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    /// Hounsfield units (also used for unconstrained scalar fields).
    Hu,
    /// Values in `[-1, 1]`.
    NormalizedPm1,
    /// Values in `[0, 1]`.
    Normalized01,
}

impl DomainTag {
    pub fn code(self) -> u8 {
        match self {
            DomainTag::Hu => 0,
            DomainTag::NormalizedPm1 => 1,
            DomainTag::Normalized01 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DomainTag::Hu),
            1 => Ok(DomainTag::NormalizedPm1),
            2 => Ok(DomainTag::Normalized01),
            other => Err(Error::Format(format!("unknown domain tag {other}"))),
        }
    }

    fn range(self) -> Option<(f64, f64)> {
        match self {
            DomainTag::Hu => None,
            DomainTag::NormalizedPm1 => Some((-1.0, 1.0)),
            DomainTag::Normalized01 => Some((0.0, 1.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    domain: DomainTag,
}

fn check_dims_spacing(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(invalid(format!("volume dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(invalid(format!(
            "volume spacing must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

impl Volume {
    /// Volume with every voxel set to `fill`, tagged [`DomainTag::Hu`].
    pub fn new(dims: [usize; 3], spacing: [f64; 3], fill: f64) -> Result<Self> {
        check_dims_spacing(dims, spacing)?;
        Ok(Self {
            dims,
            spacing,
            data: vec![fill; dims[0] * dims[1] * dims[2]],
            domain: DomainTag::Hu,
        })
    }

    pub fn from_data(
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f64>,
        domain: DomainTag,
    ) -> Result<Self> {
        check_dims_spacing(dims, spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume data has {} values, dims {dims:?} need {n}",
                data.len()
            )));
        }
        let v = Self {
            dims,
            spacing,
            data,
            domain,
        };
        v.check_domain()?;
        Ok(v)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Physical size along each axis in millimeters.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Retags the volume, verifying the value range of the new domain.
    pub fn with_domain(mut self, domain: DomainTag) -> Result<Self> {
        self.domain = domain;
        self.check_domain()?;
        Ok(self)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_dims_spacing(self.dims, spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Scans the data against the range implied by the domain tag.
    pub fn check_domain(&self) -> Result<()> {
        if let Some((lo, hi)) = self.domain.range() {
            if let Some(bad) = self.data.iter().find(|v| !(**v >= lo && **v <= hi)) {
                return Err(Error::Domain(format!(
                    "value {bad} outside [{lo}, {hi}] for {:?}",
                    self.domain
                )));
            }
        }
        Ok(())
    }

    pub fn same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "volume dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Applies `f` voxelwise, keeping geometry and tagging the result `domain`.
    pub fn map(&self, domain: DomainTag, f: impl Fn(f64) -> f64) -> Result<Volume> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Volume::from_data(self.dims, self.spacing, data, domain)
    }

    /// Axis-aligned 2D slice through the volume center, as a projection-shaped
    /// image. `axis` 0 = sagittal (fixed x), 1 = coronal (fixed y), 2 = axial
    /// (fixed z).
    pub fn mid_slice(&self, axis: usize) -> Result<Projection> {
        let [dx, dy, dz] = self.dims;
        let (w, h, sp) = match axis {
            0 => (dy, dz, self.spacing[1]),
            1 => (dx, dz, self.spacing[0]),
            2 => (dx, dy, self.spacing[0]),
            _ => return Err(invalid(format!("slice axis must be 0..3, got {axis}"))),
        };
        let mut data = Vec::with_capacity(w * h);
        for j in 0..h {
            for i in 0..w {
                let v = match axis {
                    0 => self.get(dx / 2, i, j),
                    1 => self.get(i, dy / 2, j),
                    _ => self.get(i, j, dz / 2),
                };
                data.push(v);
            }
        }
        Projection::new([w, h], sp, data, ViewTag::Pa)
    }
}

/// Zero-mean unit-variance i.i.d. Gaussian volume with unit spacing.
pub fn gaussian_volume(rng: &mut SeededRng, dims: [usize; 3]) -> Result<Volume> {
    let mut v = Volume::new(dims, [1.0; 3], 0.0)?;
    rng.fill_normal(v.data_mut());
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Pa,
    Lateral,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    dims: [usize; 2],
    pixel_spacing: f64,
    data: Vec<f64>,
    view: ViewTag,
}

impl Projection {
    pub fn new(dims: [usize; 2], pixel_spacing: f64, data: Vec<f64>, view: ViewTag) -> Result<Self> {
        if dims[0] == 0 || dims[1] == 0 {
            return Err(invalid(format!("projection dims must be positive, got {dims:?}")));
        }
        if !(pixel_spacing > 0.0) {
            return Err(invalid("pixel spacing must be positive"));
        }
        if data.len() != dims[0] * dims[1] {
            return Err(Error::Shape(format!(
                "projection data has {} values, dims {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("projection values must be finite".into()));
        }
        Ok(Self {
            dims,
            pixel_spacing,
            data,
            view,
        })
    }

    pub fn filled(dims: [usize; 2], pixel_spacing: f64, fill: f64, view: ViewTag) -> Result<Self> {
        Self::new(dims, pixel_spacing, vec![fill; dims[0] * dims[1]], view)
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn view(&self) -> ViewTag {
        self.view
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[u + self.dims[0] * v]
    }

    pub fn with_view(mut self, view: ViewTag) -> Self {
        self.view = view;
        self
    }
}
