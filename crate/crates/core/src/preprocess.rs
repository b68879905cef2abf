//! Resampling, HU windowing, projection standardization and translation-only
//! registration of radiographs against DRR references.
//!
//! Volumes are resampled with the cell-center convention: output voxel `i`
//! samples the input at continuous index `(i + 0.5)·scale − 0.5`, clamped to
//! the valid range. Projections use the corner-aligned convention, so a
//! bilinear field survives any resize exactly.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::voxcore::{DomainTag, Projection, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lo: f64,
    pub hi: f64,
}

impl WindowSpec {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(invalid(format!("window needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTarget {
    Pm1,
    ZeroOne,
}

/// Translation in pixels; `score` is the NCC at the integer peak.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidShift2D {
    pub dx: f64,
    pub dy: f64,
    pub score: f64,
}

impl RigidShift2D {
    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy, score: 0.0 }
    }

    pub fn inverse(&self) -> Self {
        Self { dx: -self.dx, dy: -self.dy, score: self.score }
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Splits a continuous index into a base index and fraction, clamped to `[0, n-1]`.
#[inline]
fn clamp_index(x: f64, n: usize) -> (usize, usize, f64) {
    let x = x.clamp(0.0, (n - 1) as f64);
    let i0 = x.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, x - i0 as f64)
}

fn trilinear_resize(v: &Volume, out_dims: [usize; 3], scale: [f64; 3], spacing: [f64; 3]) -> Result<Volume> {
    let [nx, ny, nz] = out_dims;
    let d = v.dims();
    let xs: Vec<_> = (0..nx).map(|i| clamp_index((i as f64 + 0.5) * scale[0] - 0.5, d[0])).collect();
    let ys: Vec<_> = (0..ny).map(|i| clamp_index((i as f64 + 0.5) * scale[1] - 0.5, d[1])).collect();
    let zs: Vec<_> = (0..nz).map(|i| clamp_index((i as f64 + 0.5) * scale[2] - 0.5, d[2])).collect();
    let mut data = Vec::with_capacity(nx * ny * nz);
    for &(z0, z1, fz) in &zs {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let c00 = lerp(v.get(x0, y0, z0), v.get(x1, y0, z0), fx);
                let c10 = lerp(v.get(x0, y1, z0), v.get(x1, y1, z0), fx);
                let c01 = lerp(v.get(x0, y0, z1), v.get(x1, y0, z1), fx);
                let c11 = lerp(v.get(x0, y1, z1), v.get(x1, y1, z1), fx);
                data.push(lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz));
            }
        }
    }
    let out = Volume::from_data(out_dims, spacing, data, DomainTag::Hu)?;
    // Interpolation cannot leave the input's range, so the tag stays valid.
    Ok(out.with_domain(v.domain()).unwrap_or_else(|e| unreachable!("{e}")))
}

/// Trilinear resampling to `target_spacing`; output dims are
/// `round(dims · spacing / target)`.
pub fn resample_volume(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(invalid(format!("target spacing must be positive, got {target_spacing:?}")));
    }
    let d = v.dims();
    let s = v.spacing();
    let mut out_dims = [0; 3];
    let mut scale = [0.0; 3];
    for k in 0..3 {
        out_dims[k] = ((d[k] as f64 * s[k] / target_spacing[k]).round() as usize).max(1);
        scale[k] = target_spacing[k] / s[k];
    }
    trilinear_resize(v, out_dims, scale, target_spacing)
}

/// Trilinear resize to `target_dims`, with spacing chosen to keep the physical
/// extent.
pub fn rescale_to_grid(v: &Volume, target_dims: [usize; 3]) -> Result<Volume> {
    if target_dims.iter().any(|&n| n == 0) {
        return Err(invalid(format!("target dims must be positive, got {target_dims:?}")));
    }
    let d = v.dims();
    let e = v.extent();
    let mut scale = [0.0; 3];
    let mut spacing = [0.0; 3];
    for k in 0..3 {
        scale[k] = d[k] as f64 / target_dims[k] as f64;
        spacing[k] = e[k] / target_dims[k] as f64;
    }
    trilinear_resize(v, target_dims, scale, spacing)
}

/// Clamps HU to the window, then maps it affinely onto the target range.
pub fn window_and_normalize(v: &Volume, w: WindowSpec, target: NormTarget) -> Result<Volume> {
    WindowSpec::new(w.lo, w.hi)?;
    if v.domain() != DomainTag::Hu {
        return Err(Error::Domain("windowing needs HU input".into()));
    }
    let width = w.hi - w.lo;
    match target {
        NormTarget::Pm1 => v.map(DomainTag::NormalizedPm1, |h| {
            2.0 * (h.clamp(w.lo, w.hi) - w.lo) / width - 1.0
        }),
        NormTarget::ZeroOne => v.map(DomainTag::Normalized01, |h| (h.clamp(w.lo, w.hi) - w.lo) / width),
    }
}

/// Rescales values to `[0, 1]`; a constant image maps to zeros.
pub fn min_max_normalize(p: &mut Projection) {
    let (lo, hi) = p
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = hi - lo;
    for x in p.data_mut() {
        *x = if range > 0.0 { (*x - lo) / range } else { 0.0 };
    }
}

/// Corner-aligned bilinear resize to `target`, then min-max normalization.
pub fn standardize_projection(p: &Projection, target: [usize; 2]) -> Result<Projection> {
    if target[0] == 0 || target[1] == 0 {
        return Err(invalid(format!("target dims must be positive, got {target:?}")));
    }
    let [w, h] = p.dims();
    let ratio = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let (ru, rv) = (ratio(w, target[0]), ratio(h, target[1]));
    let mut data = Vec::with_capacity(target[0] * target[1]);
    for j in 0..target[1] {
        let (v0, v1, fv) = clamp_index(j as f64 * rv, h);
        for i in 0..target[0] {
            let (u0, u1, fu) = clamp_index(i as f64 * ru, w);
            let a = lerp(p.get(u0, v0), p.get(u1, v0), fu);
            let b = lerp(p.get(u0, v1), p.get(u1, v1), fu);
            data.push(lerp(a, b, fv));
        }
    }
    let spacing = p.pixel_spacing() * w as f64 / target[0] as f64;
    let mut out = Projection::new(target, spacing, data, p.view())?;
    min_max_normalize(&mut out);
    Ok(out)
}

/// Central `size`-square crop; the input must be at least that large.
pub fn center_crop(p: &Projection, size: [usize; 2]) -> Result<Projection> {
    let [w, h] = p.dims();
    if size[0] == 0 || size[1] == 0 || size[0] > w || size[1] > h {
        return Err(invalid(format!("cannot crop {size:?} from {:?}", p.dims())));
    }
    let (ou, ov) = ((w - size[0]) / 2, (h - size[1]) / 2);
    let mut data = Vec::with_capacity(size[0] * size[1]);
    for v in ov..ov + size[1] {
        data.extend_from_slice(&p.data()[v * w + ou..v * w + ou + size[0]]);
    }
    Projection::new(size, p.pixel_spacing(), data, p.view())
}

/// Translates the image: `out(u, v) = in(u − dx, v − dy)`, bilinear, zero
/// outside.
pub fn apply_shift(p: &Projection, s: RigidShift2D) -> Result<Projection> {
    let [w, h] = p.dims();
    let mut data = Vec::with_capacity(w * h);
    let inside = |x: f64, n: usize| x >= 0.0 && x <= (n - 1) as f64;
    for j in 0..h {
        let y = j as f64 - s.dy;
        for i in 0..w {
            let x = i as f64 - s.dx;
            if !inside(x, w) || !inside(y, h) {
                data.push(0.0);
                continue;
            }
            let (u0, u1, fu) = clamp_index(x, w);
            let (v0, v1, fv) = clamp_index(y, h);
            let a = lerp(p.get(u0, v0), p.get(u1, v0), fu);
            let b = lerp(p.get(u0, v1), p.get(u1, v1), fu);
            data.push(lerp(a, b, fv));
        }
    }
    Projection::new(p.dims(), p.pixel_spacing(), data, p.view())
}

/// NCC between `moving` translated by the integer shift `(dx, dy)` and
/// `reference`, over their overlap. Zero variance on either side scores 0.
pub fn ncc_at(moving: &Projection, reference: &Projection, dx: i64, dy: i64) -> Result<f64> {
    if moving.dims() != reference.dims() {
        return Err(shape(format!(
            "registration needs equal dims, got {:?} and {:?}",
            moving.dims(),
            reference.dims()
        )));
    }
    let [w, h] = moving.dims();
    let (w, h) = (w as i64, h as i64);
    let (u_lo, u_hi) = (dx.max(0), (w + dx).min(w));
    let (v_lo, v_hi) = (dy.max(0), (h + dy).min(h));
    if u_lo >= u_hi || v_lo >= v_hi {
        return Ok(0.0);
    }
    let n = ((u_hi - u_lo) * (v_hi - v_lo)) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for v in v_lo..v_hi {
        for u in u_lo..u_hi {
            sa += moving.get((u - dx) as usize, (v - dy) as usize);
            sb += reference.get(u as usize, v as usize);
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut cab, mut caa, mut cbb) = (0.0, 0.0, 0.0);
    for v in v_lo..v_hi {
        for u in u_lo..u_hi {
            let a = moving.get((u - dx) as usize, (v - dy) as usize) - ma;
            let b = reference.get(u as usize, v as usize) - mb;
            cab += a * b;
            caa += a * a;
            cbb += b * b;
        }
    }
    let denom = (caa * cbb).sqrt();
    if !(denom > 1e-300) {
        return Ok(0.0);
    }
    Ok((cab / denom).clamp(-1.0, 1.0))
}

/// Vertex offset of the parabola through `(-1, a)`, `(0, b)`, `(1, c)`, limited
/// to half a pixel; 0 when the samples do not form a peak.
fn parabolic_offset(a: f64, b: f64, c: f64) -> f64 {
    let curv = a - 2.0 * b + c;
    if curv < 0.0 {
        (0.5 * (a - c) / curv).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Finds the translation that aligns `moving` onto `reference`.
///
/// Every integer shift in `[-radius, radius]²` is scored by NCC magnitude, so
/// contrast-inverted pairs still lock on (the sign is kept in `score`). Ties go
/// to the smallest `|dx|+|dy|`, then the smallest `dx`, then `dy`. A parabola
/// through the peak's neighbours refines each axis to sub-pixel precision.
pub fn register_to_reference(
    moving: &Projection,
    reference: &Projection,
    search_radius: usize,
) -> Result<RigidShift2D> {
    if search_radius < 1 {
        return Err(invalid("search radius must be at least 1"));
    }
    if moving.dims() != reference.dims() {
        return Err(shape(format!(
            "registration needs equal dims, got {:?} and {:?}",
            moving.dims(),
            reference.dims()
        )));
    }
    let r = search_radius as i64;
    let side = (2 * r + 1) as usize;
    let mut scores = vec![0.0; side * side];
    for dy in -r..=r {
        for dx in -r..=r {
            scores[(dy + r) as usize * side + (dx + r) as usize] = ncc_at(moving, reference, dx, dy)?;
        }
    }
    let key = |dx: i64, dy: i64| (dx.abs() + dy.abs(), dx, dy);
    let mut best = (0i64, 0i64);
    let mut best_mag = f64::NEG_INFINITY;
    for dy in -r..=r {
        for dx in -r..=r {
            let mag = scores[(dy + r) as usize * side + (dx + r) as usize].abs();
            let better = mag > best_mag + 1e-12
                || ((mag - best_mag).abs() <= 1e-12 && key(dx, dy) < key(best.0, best.1));
            if better {
                best = (dx, dy);
                best_mag = mag;
            }
        }
    }
    let (bx, by) = best;
    let score = ncc_at(moving, reference, bx, by)?;
    let sign = if score < 0.0 { -1.0 } else { 1.0 };
    let at = |dx: i64, dy: i64| -> Result<f64> { Ok(sign * ncc_at(moving, reference, dx, dy)?) };
    let fx = parabolic_offset(at(bx - 1, by)?, sign * score, at(bx + 1, by)?);
    let fy = parabolic_offset(at(bx, by - 1)?, sign * score, at(bx, by + 1)?);
    Ok(RigidShift2D { dx: bx as f64 + fx, dy: by as f64 + fy, score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxcore::{SeededRng, ViewTag};

    fn ramp_volume(dims: [usize; 3], spacing: [f64; 3]) -> Volume {
        let mut v = Volume::new(dims, spacing, 0.0).unwrap();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [
                        (x as f64 + 0.5) * spacing[0],
                        (y as f64 + 0.5) * spacing[1],
                        (z as f64 + 0.5) * spacing[2],
                    ];
                    v.set(x, y, z, 1.0 + 2.0 * p[0] - 0.5 * p[1] + 0.25 * p[2]);
                }
            }
        }
        v
    }

    fn blob_image(n: usize, rng: &mut SeededRng) -> Projection {
        let blobs: Vec<[f64; 4]> = (0..6)
            .map(|_| {
                [
                    rng.uniform_range(0.2, 0.8) * n as f64,
                    rng.uniform_range(0.2, 0.8) * n as f64,
                    rng.uniform_range(2.0, 6.0),
                    rng.uniform_range(-1.0, 1.0),
                ]
            })
            .collect();
        let mut data = Vec::with_capacity(n * n);
        for v in 0..n {
            for u in 0..n {
                let mut s = 0.0;
                for b in &blobs {
                    let r2 = (u as f64 - b[0]).powi(2) + (v as f64 - b[1]).powi(2);
                    s += b[3] * (-r2 / (2.0 * b[2] * b[2])).exp();
                }
                data.push(s);
            }
        }
        Projection::new([n, n], 1.0, data, ViewTag::Pa).unwrap()
    }

    #[test]
    fn resample_dims_and_constant() {
        let v = Volume::new([4, 4, 4], [2.0; 3], 7.0).unwrap();
        let r = resample_volume(&v, [1.0; 3]).unwrap();
        assert_eq!(r.dims(), [8, 8, 8]);
        assert!(r.data().iter().all(|&x| x == 7.0));
        assert!(resample_volume(&v, [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn resample_ramp_exact_interior() {
        let v = ramp_volume([6, 6, 6], [2.0; 3]);
        let r = resample_volume(&v, [1.0; 3]).unwrap();
        let truth = ramp_volume([12, 12, 12], [1.0; 3]);
        for z in 1..11 {
            for y in 1..11 {
                for x in 1..11 {
                    assert!((r.get(x, y, z) - truth.get(x, y, z)).abs() < 1e-9);
                }
            }
        }
        let back = resample_volume(&r, [2.0; 3]).unwrap();
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    assert!((back.get(x, y, z) - v.get(x, y, z)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rescale_identity_and_extent() {
        let mut rng = SeededRng::new(3, 0);
        let v = crate::voxcore::gaussian_volume(&mut rng, [8, 8, 8]).unwrap();
        assert_eq!(rescale_to_grid(&v, [8, 8, 8]).unwrap().data(), v.data());
        let c = Volume::new([8, 8, 8], [1.5; 3], -3.0).unwrap();
        let r = rescale_to_grid(&c, [4, 4, 4]).unwrap();
        assert!(r.data().iter().all(|&x| x == -3.0));
        for k in 0..3 {
            assert!((r.extent()[k] - c.extent()[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn windowing() {
        let v = Volume::from_data([4, 1, 1], [1.0; 3], vec![-100.0, 400.0, 2000.0, -3000.0], DomainTag::Hu)
            .unwrap();
        let w = WindowSpec::new(-100.0, 900.0).unwrap();
        let n = window_and_normalize(&v, w, NormTarget::Pm1).unwrap();
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0, -1.0]);
        assert_eq!(n.domain(), DomainTag::NormalizedPm1);
        let z = window_and_normalize(&v, w, NormTarget::ZeroOne).unwrap();
        assert_eq!(z.data(), &[0.0, 0.5, 1.0, 0.0]);
        assert!(WindowSpec::new(1.0, 1.0).is_err());
    }

    #[test]
    fn standardize_bilinear_exact() {
        let f = |x: f64, y: f64| 0.3 + 0.01 * x - 0.02 * y + 0.0005 * x * y;
        let n = 64;
        let data = (0..n * n).map(|k| f((k % n) as f64, (k / n) as f64)).collect();
        let p = Projection::new([n, n], 1.0, data, ViewTag::Pa).unwrap();
        let m = 128;
        let out = standardize_projection(&p, [m, m]).unwrap();
        let s = (n - 1) as f64 / (m - 1) as f64;
        let mut truth: Vec<f64> = (0..m * m).map(|k| f((k % m) as f64 * s, (k / m) as f64 * s)).collect();
        let lo = truth.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        truth.iter_mut().for_each(|t| *t = (*t - lo) / (hi - lo));
        for (a, b) in out.data().iter().zip(&truth) {
            assert!((a - b).abs() < 1e-9);
        }
        let c = Projection::filled([5, 5], 1.0, 3.0, ViewTag::Pa).unwrap();
        assert!(standardize_projection(&c, [7, 7]).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shift_delta_and_round_trip() {
        let mut d = Projection::filled([9, 9], 1.0, 0.0, ViewTag::Pa).unwrap();
        d.data_mut()[4 + 9 * 4] = 1.0;
        let s = apply_shift(&d, RigidShift2D::new(2.0, -3.0)).unwrap();
        assert_eq!(s.get(6, 1), 1.0);
        assert_eq!(s.data().iter().sum::<f64>(), 1.0);
        assert_eq!(apply_shift(&d, RigidShift2D::new(0.0, 0.0)).unwrap(), d);

        let n = 32;
        let data = (0..n * n).map(|k| 0.1 * (k % n) as f64 + 0.05 * (k / n) as f64).collect();
        let p = Projection::new([n, n], 1.0, data, ViewTag::Pa).unwrap();
        let sh = RigidShift2D::new(1.3, -0.7);
        let back = apply_shift(&apply_shift(&p, sh).unwrap(), sh.inverse()).unwrap();
        for v in 3..n - 3 {
            for u in 3..n - 3 {
                assert!((back.get(u, v) - p.get(u, v)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn registration_examples() {
        let mut rng = SeededRng::new(11, 0);
        let p = blob_image(48, &mut rng);
        let r = register_to_reference(&p, &p, 4).unwrap();
        assert_eq!((r.dx, r.dy, r.score), (0.0, 0.0, 1.0));

        let neg = Projection::new([48, 48], 1.0, p.data().iter().map(|x| -x).collect(), ViewTag::Pa).unwrap();
        let r = register_to_reference(&neg, &p, 4).unwrap();
        assert_eq!((r.dx, r.dy), (0.0, 0.0));
        assert!((r.score + 1.0).abs() < 1e-12);

        let moved = apply_shift(&p, RigidShift2D::new(5.0, -3.0)).unwrap();
        let r = register_to_reference(&p, &moved, 7).unwrap();
        assert!((r.dx - 5.0).abs() < 0.5 && (r.dy + 3.0).abs() < 0.5, "{r:?}");

        let flat = Projection::filled([48, 48], 1.0, 2.0, ViewTag::Pa).unwrap();
        assert_eq!(ncc_at(&flat, &p, 0, 0).unwrap(), 0.0);
        let small = Projection::filled([4, 4], 1.0, 2.0, ViewTag::Pa).unwrap();
        assert!(register_to_reference(&small, &p, 2).is_err());
    }
}
