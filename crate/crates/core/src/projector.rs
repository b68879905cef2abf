//! Synthetic radiographs from CT volumes.
//!
//! Attenuation is mono-energetic: `μ = μ_water · (1 + HU / 1000)`, clamped at
//! zero. Line integrals use Siddon's method: the parametric positions where a
//! ray crosses the x, y and z voxel planes are merged into one sorted list, and
//! every consecutive pair brackets a segment lying in exactly one voxel. The
//! integral is then the exact sum of `μ_voxel · segment_length` for a
//! piecewise-constant volume.
//!
//! Rays run from a point source to each detector pixel center, and pixel
//! intensity follows Beer–Lambert, `I = exp(-∫ μ dl)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxcore::{DomainTag, Projection, SeededRng, ViewTag, Volume};

/// Linear attenuation of water in mm⁻¹.
pub const MU_WATER: f64 = 0.02;

pub type Point3 = [f64; 3];

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

/// Rotation by +90° about the z axis.
pub fn rotate_z90(p: Point3) -> Point3 {
    [-p[1], p[0], p[2]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraGeometry {
    pub source_position: Point3,
    pub detector_center: Point3,
    pub detector_u_axis: Point3,
    pub detector_v_axis: Point3,
    /// `(width_mm, height_mm)`.
    pub detector_size: [f64; 2],
    pub detector_pixels: [usize; 2],
    pub view: ViewTag,
}

impl CameraGeometry {
    pub fn validate(&self) -> Result<()> {
        let u = self.detector_u_axis;
        let v = self.detector_v_axis;
        if dot(u, v).abs() > 1e-9 || (norm(u) - 1.0).abs() > 1e-9 || (norm(v) - 1.0).abs() > 1e-9 {
            return Err(Error::Geometry("detector axes must be orthonormal".into()));
        }
        let n = cross(u, v);
        let offset = dot(sub(self.source_position, self.detector_center), n);
        if offset.abs() < 1e-9 {
            return Err(Error::Geometry("source lies on the detector plane".into()));
        }
        if self.detector_pixels[0] == 0 || self.detector_pixels[1] == 0 {
            return Err(Error::Geometry("detector needs at least one pixel".into()));
        }
        if !(self.detector_size[0] > 0.0 && self.detector_size[1] > 0.0) {
            return Err(Error::Geometry("detector size must be positive".into()));
        }
        let all = [self.source_position, self.detector_center, u, v];
        if all.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Geometry("non-finite geometry".into()));
        }
        Ok(())
    }

    /// World position of the center of pixel `(iu, iv)`.
    pub fn pixel_center(&self, iu: usize, iv: usize) -> Point3 {
        let [pu, pv] = self.detector_pixels;
        let du = self.detector_size[0] / pu as f64;
        let dv = self.detector_size[1] / pv as f64;
        let a = (iu as f64 + 0.5 - pu as f64 / 2.0) * du;
        let b = (iv as f64 + 0.5 - pv as f64 / 2.0) * dv;
        add(
            self.detector_center,
            add(scale(self.detector_u_axis, a), scale(self.detector_v_axis, b)),
        )
    }

    /// Central projection of `p` onto the detector plane, in detector
    /// coordinates `(u_mm, v_mm)` relative to the detector center.
    pub fn project_point(&self, p: Point3) -> Option<[f64; 2]> {
        let n = cross(self.detector_u_axis, self.detector_v_axis);
        let dir = sub(p, self.source_position);
        let denom = dot(dir, n);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = dot(sub(self.detector_center, self.source_position), n) / denom;
        let hit = add(self.source_position, scale(dir, s));
        let rel = sub(hit, self.detector_center);
        Some([dot(rel, self.detector_u_axis), dot(rel, self.detector_v_axis)])
    }

    pub fn translated(&self, by: Point3) -> CameraGeometry {
        CameraGeometry {
            source_position: add(self.source_position, by),
            detector_center: add(self.detector_center, by),
            ..self.clone()
        }
    }
}

/// Volume of linear attenuation coefficients (mm⁻¹) placed in world space.
#[derive(Clone, Debug, PartialEq)]
pub struct AttenuationVolume {
    volume: Volume,
    origin: Point3,
}

impl AttenuationVolume {
    /// `origin` is the world position of the outer corner of voxel `(0, 0, 0)`.
    pub fn new(volume: Volume, origin: Point3) -> Result<Self> {
        if volume.data().iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::Domain("attenuation must be finite and non-negative".into()));
        }
        Ok(Self { volume, origin })
    }

    /// Places the volume so that its center sits at the world origin.
    pub fn centered(volume: Volume) -> Result<Self> {
        let e = volume.extent();
        Self::new(volume, [-e[0] / 2.0, -e[1] / 2.0, -e[2] / 2.0])
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn center(&self) -> Point3 {
        let e = self.volume.extent();
        add(self.origin, scale(e, 0.5))
    }

    pub fn with_origin(mut self, origin: Point3) -> Self {
        self.origin = origin;
        self
    }
}

/// Converts HU to attenuation with `μ_water = 0.02 mm⁻¹`, clamping at zero, and
/// centers the result at the world origin.
pub fn hu_to_attenuation(v: &Volume) -> Result<AttenuationVolume> {
    if v.domain() != DomainTag::Hu {
        return Err(Error::Domain(format!(
            "attenuation conversion needs HU input, got {:?}",
            v.domain()
        )));
    }
    let mu = v.map(DomainTag::Hu, |hu| (MU_WATER * (1.0 + hu / 1000.0)).max(0.0))?;
    AttenuationVolume::centered(mu)
}

/// `∫ μ dl` along the segment `p0 → p1`. Returns 0 if the segment misses.
pub fn siddon_line_integral(av: &AttenuationVolume, p0: Point3, p1: Point3) -> f64 {
    let vol = &av.volume;
    let dims = vol.dims();
    let sp = vol.spacing();
    let o = av.origin;
    let d = sub(p1, p0);
    let length = norm(d);
    if length == 0.0 || !length.is_finite() {
        return 0.0;
    }

    // Clip the parameter range [0, 1] to the volume's bounding box.
    let mut a_min = 0.0f64;
    let mut a_max = 1.0f64;
    for k in 0..3 {
        let lo = o[k];
        let hi = o[k] + dims[k] as f64 * sp[k];
        if d[k] == 0.0 {
            if p0[k] <= lo || p0[k] >= hi {
                return 0.0;
            }
        } else {
            let a0 = (lo - p0[k]) / d[k];
            let a1 = (hi - p0[k]) / d[k];
            a_min = a_min.max(a0.min(a1));
            a_max = a_max.min(a0.max(a1));
        }
    }
    if a_max <= a_min {
        return 0.0;
    }

    // Plane crossings strictly inside (a_min, a_max), per axis, ascending.
    let mut crossings: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for k in 0..3 {
        if d[k] == 0.0 {
            continue;
        }
        let c0 = (p0[k] + a_min * d[k] - o[k]) / sp[k];
        let c1 = (p0[k] + a_max * d[k] - o[k]) / sp[k];
        let (lo, hi) = if c0 < c1 { (c0, c1) } else { (c1, c0) };
        let first = lo.floor() as i64 + 1;
        let last = hi.ceil() as i64 - 1;
        let list = &mut crossings[k];
        for i in first.max(0)..=last.min(dims[k] as i64) {
            let a = (o[k] + i as f64 * sp[k] - p0[k]) / d[k];
            if a > a_min && a < a_max {
                list.push(a);
            }
        }
        if d[k] < 0.0 {
            list.reverse();
        }
    }

    let mut sum = 0.0;
    let mut prev = a_min;
    let mut idx = [0usize; 3];
    let mut visit = |a_lo: f64, a_hi: f64| {
        if a_hi <= a_lo {
            return 0.0;
        }
        let mid = 0.5 * (a_lo + a_hi);
        for k in 0..3 {
            let c = ((p0[k] + mid * d[k] - o[k]) / sp[k]).floor();
            if c < 0.0 || c >= dims[k] as f64 {
                return 0.0;
            }
            idx[k] = c as usize;
        }
        vol.get(idx[0], idx[1], idx[2]) * (a_hi - a_lo) * length
    };
    let (mut i, mut j, mut l) = (0, 0, 0);
    let (cx, cy, cz) = (&crossings[0], &crossings[1], &crossings[2]);
    loop {
        let nx = cx.get(i).copied().unwrap_or(f64::INFINITY);
        let ny = cy.get(j).copied().unwrap_or(f64::INFINITY);
        let nz = cz.get(l).copied().unwrap_or(f64::INFINITY);
        let next = nx.min(ny).min(nz);
        if !next.is_finite() {
            break;
        }
        sum += visit(prev, next);
        prev = next;
        if nx == next {
            i += 1;
        }
        if ny == next {
            j += 1;
        }
        if nz == next {
            l += 1;
        }
    }
    sum += visit(prev, a_max);
    sum
}

/// Beer–Lambert DRR: each pixel is `exp(-∫ μ dl)` from the source to the pixel
/// center.
pub fn render_drr(av: &AttenuationVolume, cam: &CameraGeometry) -> Result<Projection> {
    cam.validate()?;
    let [pu, pv] = cam.detector_pixels;
    let mut data = Vec::with_capacity(pu * pv);
    for iv in 0..pv {
        for iu in 0..pu {
            let target = cam.pixel_center(iu, iv);
            data.push((-siddon_line_integral(av, cam.source_position, target)).exp());
        }
    }
    Projection::new(
        cam.detector_pixels,
        cam.detector_size[0] / pu as f64,
        data,
        cam.view,
    )
}

/// [`render_drr`] plus additive Gaussian detector noise of standard deviation
/// `sigma`. `sigma = 0` reproduces the noiseless image exactly.
pub fn render_drr_noisy(
    av: &AttenuationVolume,
    cam: &CameraGeometry,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<Projection> {
    let mut p = render_drr(av, cam)?;
    if sigma > 0.0 {
        for v in p.data_mut() {
            *v += sigma * rng.normal();
        }
    } else if sigma < 0.0 {
        return Err(Error::InvalidArgument("noise sigma must be non-negative".into()));
    }
    Ok(p)
}

/// PA and lateral cone-beam geometries for a volume centered at the world
/// origin.
///
/// PA puts the source on the −y axis at `sid/2` from the center and the
/// detector on +y at the same distance, with `u = +x`, `v = +z`. LATERAL is the
/// same rig rotated 90° about z. The square detector covers the projected
/// footprint of all eight volume corners plus a 10% margin.
pub fn default_geometries(
    v: &Volume,
    sid_mm: f64,
    pixels: usize,
) -> Result<(CameraGeometry, CameraGeometry)> {
    let e = v.extent();
    let diag = norm(e);
    if !(sid_mm > diag) {
        return Err(Error::Geometry(format!(
            "source-detector distance {sid_mm} mm must exceed the volume diagonal {diag:.3} mm"
        )));
    }
    if pixels == 0 {
        return Err(Error::Geometry("detector needs at least one pixel".into()));
    }
    let half = sid_mm / 2.0;
    let mut pa = CameraGeometry {
        source_position: [0.0, -half, 0.0],
        detector_center: [0.0, half, 0.0],
        detector_u_axis: [1.0, 0.0, 0.0],
        detector_v_axis: [0.0, 0.0, 1.0],
        detector_size: [1.0, 1.0],
        detector_pixels: [pixels, pixels],
        view: ViewTag::Pa,
    };
    let mut reach: f64 = 0.0;
    for corner in 0..8 {
        let p = [
            if corner & 1 == 0 { -e[0] / 2.0 } else { e[0] / 2.0 },
            if corner & 2 == 0 { -e[1] / 2.0 } else { e[1] / 2.0 },
            if corner & 4 == 0 { -e[2] / 2.0 } else { e[2] / 2.0 },
        ];
        for q in [p, rotate_z90(rotate_z90(rotate_z90(p)))] {
            let uv = pa
                .project_point(q)
                .ok_or_else(|| Error::Geometry("corner parallel to detector".into()))?;
            reach = reach.max(uv[0].abs()).max(uv[1].abs());
        }
    }
    let side = 2.0 * reach * 1.1;
    pa.detector_size = [side, side];
    let lateral = CameraGeometry {
        source_position: rotate_z90(pa.source_position),
        detector_center: rotate_z90(pa.detector_center),
        detector_u_axis: rotate_z90(pa.detector_u_axis),
        detector_v_axis: rotate_z90(pa.detector_v_axis),
        view: ViewTag::Lateral,
        ..pa.clone()
    };
    pa.validate()?;
    lateral.validate()?;
    Ok((pa, lateral))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_cube(mu: f64, n: usize, side: f64) -> AttenuationVolume {
        let v = Volume::new([n; 3], [side / n as f64; 3], mu).unwrap();
        AttenuationVolume::centered(v).unwrap()
    }

    #[test]
    fn hu_conversion() {
        let v = Volume::from_data(
            [3, 1, 1],
            [1.0; 3],
            vec![-1000.0, 0.0, 1000.0],
            DomainTag::Hu,
        )
        .unwrap();
        let av = hu_to_attenuation(&v).unwrap();
        assert_eq!(av.volume().data(), &[0.0, 0.02, 0.04]);
        let norm = v.map(DomainTag::NormalizedPm1, |_| 0.0).unwrap();
        assert!(matches!(hu_to_attenuation(&norm), Err(Error::Domain(_))));
    }

    #[test]
    fn cube_axis_and_diagonal() {
        let av = uniform_cube(0.1, 10, 100.0);
        let axis = siddon_line_integral(&av, [0.0, -80.0, 0.0], [0.0, 80.0, 0.0]);
        assert!((axis - 10.0).abs() < 1e-9, "{axis}");
        let diag = siddon_line_integral(&av, [-50.0; 3], [50.0; 3]);
        assert!((diag - 0.1 * 100.0 * 3f64.sqrt()).abs() < 1e-9, "{diag}");
        let rev = siddon_line_integral(&av, [50.0; 3], [-50.0; 3]);
        assert!((rev - diag).abs() < 1e-9);
    }

    #[test]
    fn miss_returns_zero() {
        let av = uniform_cube(0.1, 4, 40.0);
        assert_eq!(siddon_line_integral(&av, [100.0, -80.0, 0.0], [100.0, 80.0, 0.0]), 0.0);
        assert_eq!(siddon_line_integral(&av, [0.0, 30.0, 0.0], [0.0, 80.0, 0.0]), 0.0);
    }

    #[test]
    fn partial_segment_inside() {
        let av = uniform_cube(0.1, 4, 40.0);
        // Segment starts at the center and ends outside: 20 mm inside.
        let s = siddon_line_integral(&av, [0.0, 0.0, 0.0], [0.0, 0.0, 80.0]);
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_volume_renders_ones() {
        let v = Volume::new([8; 3], [10.0; 3], -1000.0).unwrap();
        let av = hu_to_attenuation(&v).unwrap();
        let (pa, _) = default_geometries(&v, 600.0, 16).unwrap();
        let img = render_drr(&av, &pa).unwrap();
        assert!(img.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn geometry_contract() {
        let v = Volume::new([8; 3], [10.0; 3], 0.0).unwrap();
        assert!(default_geometries(&v, 100.0, 16).is_err());
        let (pa, lat) = default_geometries(&v, 320.0, 16).unwrap();
        assert!(dot(pa.detector_u_axis, pa.detector_v_axis).abs() < 1e-12);
        assert_eq!(lat.source_position, rotate_z90(pa.source_position));
        // every corner lands inside both detectors
        for cam in [&pa, &lat] {
            for corner in 0..8 {
                let p = [
                    if corner & 1 == 0 { -40.0 } else { 40.0 },
                    if corner & 2 == 0 { -40.0 } else { 40.0 },
                    if corner & 4 == 0 { -40.0 } else { 40.0 },
                ];
                let uv = cam.project_point(p).unwrap();
                assert!(uv[0].abs() < cam.detector_size[0] / 2.0);
                assert!(uv[1].abs() < cam.detector_size[1] / 2.0);
            }
        }
    }

    #[test]
    fn degenerate_geometry_rejected() {
        let v = Volume::new([4; 3], [10.0; 3], 0.0).unwrap();
        let av = hu_to_attenuation(&v).unwrap();
        let (mut pa, _) = default_geometries(&v, 200.0, 4).unwrap();
        pa.source_position = pa.detector_center;
        assert!(matches!(render_drr(&av, &pa), Err(Error::Geometry(_))));
    }
}
