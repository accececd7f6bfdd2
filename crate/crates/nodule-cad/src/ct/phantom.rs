//! Synthetic chest-phantom volumes: noisy lung-like background, soft-tissue
//! spheres as nodules, and optional vessel-like cylinders as distractors.
//! Sphere centers and diameters become the ground-truth annotations.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Annotation, CtVolume};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct PhantomParams {
    pub extents: (usize, usize, usize),
    /// Millimeters per voxel, per axis.
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub sphere_count: usize,
    /// Nodule diameter range in mm.
    pub diameter_mm: (f64, f64),
    /// HU added to the background inside a nodule.
    pub contrast_hu: f64,
    pub noise_sigma_hu: f64,
    pub background_hu: f64,
    /// Axial cylinders that mimic vessels; not annotated.
    pub vessel_count: usize,
    pub vessel_radius_mm: (f64, f64),
    pub vessel_contrast_hu: f64,
    /// Minimum distance from any object surface to the in-plane border.
    pub margin_xy_mm: f64,
    /// Minimum distance from a sphere surface to the first/last slice.
    pub margin_z_mm: f64,
    /// Minimum surface-to-surface distance between placed objects.
    pub min_separation_mm: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            extents: (96, 96, 40),
            spacing: [1.0, 1.0, 2.0],
            origin: [-48.0, -48.0, -40.0],
            sphere_count: 4,
            diameter_mm: (8.0, 16.0),
            contrast_hu: 600.0,
            noise_sigma_hu: 40.0,
            background_hu: -800.0,
            vessel_count: 0,
            vessel_radius_mm: (2.0, 3.5),
            vessel_contrast_hu: 600.0,
            margin_xy_mm: 14.0,
            margin_z_mm: 6.0,
            min_separation_mm: 4.0,
        }
    }
}

#[derive(Clone, Copy)]
struct Sphere {
    center: [f64; 3], // volume-local mm
    radius: f64,
}

#[derive(Clone, Copy)]
struct Vessel {
    x: f64,
    y: f64,
    radius: f64,
    z0: f64,
    z1: f64,
}

const PLACEMENT_RETRIES: usize = 1000;

/// Generate one phantom and its exhaustive annotation list, deterministically
/// from the seed.
pub fn generate_phantom(
    series_uid: &str,
    seed: u64,
    params: &PhantomParams,
) -> Result<(CtVolume, Vec<Annotation>)> {
    let (nx, ny, nz) = params.extents;
    let ext_mm = [
        nx as f64 * params.spacing[0],
        ny as f64 * params.spacing[1],
        nz as f64 * params.spacing[2],
    ];
    if params.diameter_mm.0 <= 0.0 || params.diameter_mm.1 < params.diameter_mm.0 {
        return Err(Error::InvalidArgument(format!(
            "bad diameter range {:?}",
            params.diameter_mm
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Place spheres, then vessels, both by bounded rejection sampling.
    let mut spheres: Vec<Sphere> = Vec::with_capacity(params.sphere_count);
    for _ in 0..params.sphere_count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let radius = 0.5 * rng.gen_range(params.diameter_mm.0..=params.diameter_mm.1);
            let lo_xy = params.margin_xy_mm + radius;
            let lo_z = params.margin_z_mm + radius;
            if ext_mm[0] - lo_xy <= lo_xy || ext_mm[1] - lo_xy <= lo_xy || ext_mm[2] - lo_z <= lo_z
            {
                continue;
            }
            let c = [
                rng.gen_range(lo_xy..ext_mm[0] - lo_xy),
                rng.gen_range(lo_xy..ext_mm[1] - lo_xy),
                rng.gen_range(lo_z..ext_mm[2] - lo_z),
            ];
            let ok = spheres.iter().all(|s| {
                let d = dist3(c, s.center);
                d > s.radius + radius + params.min_separation_mm
            });
            if ok {
                spheres.push(Sphere { center: c, radius });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasiblePacking(format!(
                "could not place sphere {} of {} after {PLACEMENT_RETRIES} tries",
                spheres.len() + 1,
                params.sphere_count
            )));
        }
    }

    let mut vessels: Vec<Vessel> = Vec::with_capacity(params.vessel_count);
    for i in 0..params.vessel_count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let radius = rng.gen_range(params.vessel_radius_mm.0..=params.vessel_radius_mm.1);
            let lo = params.margin_xy_mm + radius;
            if ext_mm[0] - lo <= lo || ext_mm[1] - lo <= lo {
                continue;
            }
            let x = rng.gen_range(lo..ext_mm[0] - lo);
            let y = rng.gen_range(lo..ext_mm[1] - lo);
            // Alternate full-length vessels with shorter segments.
            let (z0, z1) = if i % 2 == 0 {
                (0.0, ext_mm[2])
            } else {
                let len = rng.gen_range((0.3 * ext_mm[2]).min(24.0)..=0.75 * ext_mm[2]);
                let z0 = rng.gen_range(0.0..ext_mm[2] - len);
                (z0, z0 + len)
            };
            let clear_of_spheres = spheres.iter().all(|s| {
                let dxy = ((s.center[0] - x).powi(2) + (s.center[1] - y).powi(2)).sqrt();
                dxy > s.radius + radius + params.min_separation_mm
            });
            let clear_of_vessels = vessels.iter().all(|v| {
                let dxy = ((v.x - x).powi(2) + (v.y - y).powi(2)).sqrt();
                dxy > v.radius + radius + params.min_separation_mm
            });
            if clear_of_spheres && clear_of_vessels {
                vessels.push(Vessel { x, y, radius, z0, z1 });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasiblePacking(format!(
                "could not place vessel {} of {} after {PLACEMENT_RETRIES} tries",
                vessels.len() + 1,
                params.vessel_count
            )));
        }
    }

    // Background noise, fixed voxel order.
    let noise = Normal::new(0.0, params.noise_sigma_hu).expect("valid sigma");
    let mut data = Vec::with_capacity(nx * ny * nz);
    for _ in 0..nx * ny * nz {
        data.push(params.background_hu + noise.sample(&mut rng));
    }

    // Render spheres with a 1 mm anti-aliasing band around the surface.
    for s in &spheres {
        let lo = |axis: usize, c: f64, r: f64| {
            (((c - r - 1.0) / params.spacing[axis]).floor().max(0.0)) as usize
        };
        let hi = |axis: usize, c: f64, r: f64, n: usize| {
            (((c + r + 1.0) / params.spacing[axis]).ceil() as usize).min(n - 1)
        };
        for z in lo(2, s.center[2], s.radius)..=hi(2, s.center[2], s.radius, nz) {
            let pz = (z as f64 + 0.5) * params.spacing[2];
            for y in lo(1, s.center[1], s.radius)..=hi(1, s.center[1], s.radius, ny) {
                let py = (y as f64 + 0.5) * params.spacing[1];
                for x in lo(0, s.center[0], s.radius)..=hi(0, s.center[0], s.radius, nx) {
                    let px = (x as f64 + 0.5) * params.spacing[0];
                    let d = dist3([px, py, pz], s.center);
                    let alpha = (s.radius + 0.5 - d).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        data[x + nx * (y + ny * z)] += params.contrast_hu * alpha;
                    }
                }
            }
        }
    }

    for v in &vessels {
        let x_lo = (((v.x - v.radius - 1.0) / params.spacing[0]).floor().max(0.0)) as usize;
        let x_hi = (((v.x + v.radius + 1.0) / params.spacing[0]).ceil() as usize).min(nx - 1);
        let y_lo = (((v.y - v.radius - 1.0) / params.spacing[1]).floor().max(0.0)) as usize;
        let y_hi = (((v.y + v.radius + 1.0) / params.spacing[1]).ceil() as usize).min(ny - 1);
        for z in 0..nz {
            let pz = (z as f64 + 0.5) * params.spacing[2];
            if pz < v.z0 || pz > v.z1 {
                continue;
            }
            for y in y_lo..=y_hi {
                let py = (y as f64 + 0.5) * params.spacing[1];
                for x in x_lo..=x_hi {
                    let px = (x as f64 + 0.5) * params.spacing[0];
                    let d = ((px - v.x).powi(2) + (py - v.y).powi(2)).sqrt();
                    let alpha = (v.radius + 0.5 - d).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        data[x + nx * (y + ny * z)] += params.vessel_contrast_hu * alpha;
                    }
                }
            }
        }
    }

    // Voxel centers sit at (i + 0.5) * spacing in local mm; annotations are
    // world-space.
    let annotations = spheres
        .iter()
        .map(|s| Annotation {
            series_uid: series_uid.to_string(),
            center: [
                s.center[0] + params.origin[0],
                s.center[1] + params.origin[1],
                s.center[2] + params.origin[2],
            ],
            diameter_mm: 2.0 * s.radius,
        })
        .collect();

    let vol = CtVolume::new(
        series_uid,
        params.extents,
        params.spacing,
        params.origin,
        data,
    )?;
    Ok((vol, annotations))
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spheres_is_pure_noise() {
        let params = PhantomParams {
            sphere_count: 0,
            ..PhantomParams::default()
        };
        let (vol, annos) = generate_phantom("p0", 3, &params).unwrap();
        assert!(annos.is_empty());
        let n = vol.data().len() as f64;
        let mean = vol.data().iter().sum::<f64>() / n;
        assert!((mean - params.background_hu).abs() < 3.0 * params.noise_sigma_hu / n.sqrt() + 0.5);
    }

    #[test]
    fn sphere_interior_contrast_matches_parameters() {
        let params = PhantomParams {
            sphere_count: 1,
            diameter_mm: (8.0, 8.0),
            vessel_count: 0,
            ..PhantomParams::default()
        };
        let (vol, annos) = generate_phantom("p1", 11, &params).unwrap();
        assert_eq!(annos.len(), 1);
        let c = vol.world_to_voxel(annos[0].center);
        let r = annos[0].diameter_mm / 2.0;
        let (nx, ny, nz) = vol.extents();
        let mut inside = Vec::new();
        let mut outside = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let d = dist3(
                        [
                            (x as f64 - c[0]) * params.spacing[0],
                            (y as f64 - c[1]) * params.spacing[1],
                            (z as f64 - c[2]) * params.spacing[2],
                        ],
                        [0.0; 3],
                    );
                    if d < r - 1.5 {
                        inside.push(vol.hu(x, y, z));
                    } else if d > r + 3.0 {
                        outside.push(vol.hu(x, y, z));
                    }
                }
            }
        }
        assert!(inside.len() > 20, "need interior voxels, got {}", inside.len());
        let mi = inside.iter().sum::<f64>() / inside.len() as f64;
        let mo = outside.iter().sum::<f64>() / outside.len() as f64;
        let tol = 3.0 * params.noise_sigma_hu / (inside.len() as f64).sqrt() + 1.0;
        assert!(
            ((mi - mo) - params.contrast_hu).abs() < tol,
            "contrast {} vs {} (tol {tol})",
            mi - mo,
            params.contrast_hu
        );
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let params = PhantomParams {
            vessel_count: 3,
            ..PhantomParams::default()
        };
        let a = generate_phantom("p", 7, &params).unwrap();
        let b = generate_phantom("p", 7, &params).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_phantom("p", 8, &params).unwrap();
        assert_ne!(a.0.data(), c.0.data());
    }

    #[test]
    fn infeasible_packing_errors_out() {
        let params = PhantomParams {
            extents: (30, 30, 10),
            sphere_count: 50,
            diameter_mm: (10.0, 10.0),
            margin_xy_mm: 2.0,
            margin_z_mm: 2.0,
            ..PhantomParams::default()
        };
        let err = generate_phantom("p", 1, &params).unwrap_err();
        assert!(matches!(err, Error::InfeasiblePacking(_)), "{err}");
    }

    #[test]
    fn spheres_and_vessels_stay_separated() {
        let params = PhantomParams {
            sphere_count: 3,
            vessel_count: 4,
            ..PhantomParams::default()
        };
        for seed in 0..5 {
            let (_, annos) = generate_phantom("p", seed, &params).unwrap();
            assert_eq!(annos.len(), 3);
            for i in 0..annos.len() {
                for j in i + 1..annos.len() {
                    let d = dist3(annos[i].center, annos[j].center);
                    let min = (annos[i].diameter_mm + annos[j].diameter_mm) / 2.0
                        + params.min_separation_mm;
                    assert!(d > min, "seed {seed}: spheres {i},{j} at distance {d} < {min}");
                }
            }
        }
    }
}
