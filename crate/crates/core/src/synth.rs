//! Synthetic desk-scale corpora.
//!
//! Each synthetic mammogram holds one bright mass disk on a noisy
//! background; the mask marks exactly the disk. Malignant masses grow
//! thin radial spicules reaching out to twice the disk radius, benign
//! masses a smooth halo over the same annulus — so the class signal is a
//! boundary texture that lives almost entirely outside the tight mass
//! bounding box.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub masses_per_patient: (usize, usize),
    pub image_side: usize,
    pub radius_range: (f64, f64),
    pub malignant_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_patients: 100,
            masses_per_patient: (5, 5),
            image_side: 96,
            radius_range: (9.0, 13.0),
            malignant_fraction: 0.5,
            seed: 0,
        }
    }
}

/// One synthetic mass image and its disk mask.
pub fn synth_mass_image(
    side: usize,
    radius: f64,
    label: Label,
    rng: &mut ChaCha12Rng,
) -> (Raster, Raster) {
    let mut image = Raster::new(side, side);
    let mut mask = Raster::new(side, side);

    // noisy tissue background
    for v in image.data_mut().iter_mut() {
        *v = 0.12 + 0.10 * rng.random::<f64>();
    }

    // the disk must leave room for context out to 2.3 r
    let margin = (2.3 * radius).ceil();
    let lo = margin;
    let hi = side as f64 - 1.0 - margin;
    assert!(hi > lo, "image side {side} too small for radius {radius}");
    let cx = rng.random_range(lo..hi);
    let cy = rng.random_range(lo..hi);

    match label {
        Label::Malignant => {
            // spiculated boundary: thin rays from the rim to ~2 r
            let n_rays = rng.random_range(9..=14);
            for _ in 0..n_rays {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let reach = radius * rng.random_range(1.8..2.05);
                let wobble = rng.random_range(-0.25..0.25f64);
                let steps = (2.0 * reach) as usize + 4;
                for s in 0..steps {
                    let t = s as f64 / (steps - 1) as f64;
                    let dist = 0.9 * radius + t * (reach - 0.9 * radius);
                    let a = angle + wobble * t;
                    let px = cx + dist * a.cos();
                    let py = cy + dist * a.sin();
                    splat(&mut image, px, py, 0.55 * (1.0 - 0.35 * t));
                }
            }
        }
        Label::Benign => {
            // smooth halo over the same annulus
            let x0 = (cx - 2.1 * radius).floor().max(0.0) as usize;
            let x1 = ((cx + 2.1 * radius).ceil() as usize).min(side - 1);
            let y0 = (cy - 2.1 * radius).floor().max(0.0) as usize;
            let y1 = ((cy + 2.1 * radius).ceil() as usize).min(side - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    if d > radius && d <= 2.0 * radius {
                        let w = 1.0 - (d - radius) / radius;
                        let v = image.get(x, y);
                        image.set(x, y, v.max(0.12 + 0.43 * w));
                    }
                }
            }
        }
    }

    // the mass disk itself, drawn over the boundary texture
    let x0 = (cx - radius - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + radius + 1.0).ceil() as usize).min(side - 1);
    let y0 = (cy - radius - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + radius + 1.0).ceil() as usize).min(side - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d <= radius {
                image.set(x, y, 0.75 + 0.05 * (1.0 - d / radius));
                mask.set(x, y, 1.0);
            } else if d <= radius + 1.0 {
                // soft photometric edge, outside the mask
                let w = radius + 1.0 - d;
                let v = image.get(x, y);
                image.set(x, y, v.max(0.3 + 0.45 * w));
            }
        }
    }
    (image, mask)
}

fn splat(image: &mut Raster, px: f64, py: f64, value: f64) {
    let side = image.width();
    let x0 = px.floor() as i64;
    let y0 = py.floor() as i64;
    for dy in 0..2 {
        for dx in 0..2 {
            let x = x0 + dx;
            let y = y0 + dy;
            if x < 0 || y < 0 || x as usize >= side || y as usize >= side {
                continue;
            }
            let wx = 1.0 - (px - x as f64).abs();
            let wy = 1.0 - (py - y as f64).abs();
            let w = (wx * wy).max(0.0);
            let old = image.get(x as usize, y as usize);
            image.set(x as usize, y as usize, old.max(0.12 + value * w));
        }
    }
}

/// Writes a full corpus under `root` using the default filename layout
/// (`{patient}_{view}_{laterality}_{label}_{index}` plus `_mask`).
/// Returns the number of records written.
pub fn generate_corpus(root: &Path, spec: &SynthSpec) -> Result<usize> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut count = 0usize;
    for p in 0..spec.n_patients {
        let (lo, hi) = spec.masses_per_patient;
        let n_masses = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        for m in 0..n_masses {
            let label = if rng.random::<f64>() < spec.malignant_fraction {
                Label::Malignant
            } else {
                Label::Benign
            };
            let radius = rng.random_range(spec.radius_range.0..=spec.radius_range.1);
            let view = if rng.random::<bool>() { "MLO" } else { "CC" };
            let side_tok = if rng.random::<bool>() { "LEFT" } else { "RIGHT" };
            let (image, mask) = synth_mass_image(spec.image_side, radius, label, &mut rng);
            let label_tok = match label {
                Label::Benign => "benign",
                Label::Malignant => "malignant",
            };
            let stem = format!("p{p:03}_{view}_{side_tok}_{label_tok}_{m}");
            image.save(&root.join(format!("{stem}.png")))?;
            mask.save(&root.join(format!("{stem}_mask.png")))?;
            count += 1;
        }
    }
    Ok(count)
}
