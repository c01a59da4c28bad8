//! Offline rotation/crop augmentation and train-time random mirroring.
//!
//! Each training patch is expanded offline into `n_rotations` random
//! rotations times `n_crops_per_rotation` random square crops, every crop
//! resized back to the patch side — 25 items per patch with the defaults.
//! Crops are placed inside the largest axis-aligned square that the
//! rotated content fully covers, so rotation fill never leaks into a crop
//! when a placement exists; otherwise the crop falls back to that largest
//! inscribed square. Horizontal mirroring is a separate train-time
//! transform applied to batches, never to val or test.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::roi::BoundingBox;

/// Parameters of the offline augmentation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    pub n_rotations: usize,
    pub n_crops_per_rotation: usize,
    /// Rotation angles are drawn uniformly from this interval in degrees.
    pub rotation_range_degrees: (f64, f64),
    /// Crop side lengths are drawn as a fraction of the patch side.
    pub crop_fraction_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            n_rotations: 5,
            n_crops_per_rotation: 5,
            rotation_range_degrees: (0.0, 360.0),
            crop_fraction_range: (0.8, 1.0),
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// Identity sweep: one rotation of 0 degrees, one full-frame crop.
    pub fn identity() -> Self {
        AugmentationSpec {
            n_rotations: 1,
            n_crops_per_rotation: 1,
            rotation_range_degrees: (0.0, 0.0),
            crop_fraction_range: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rotations < 1 || self.n_crops_per_rotation < 1 {
            return Err(Error::Geometry(
                "augmentation counts must be at least 1".into(),
            ));
        }
        let (lo, hi) = self.crop_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Geometry(format!(
                "crop fractions must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        let (rlo, rhi) = self.rotation_range_degrees;
        if rlo > rhi {
            return Err(Error::Geometry(format!(
                "rotation range [{rlo}, {rhi}] is empty"
            )));
        }
        Ok(())
    }

    pub fn items_per_patch(&self) -> usize {
        self.n_rotations * self.n_crops_per_rotation
    }
}

/// One augmented training item; the label is inherited from the parent.
#[derive(Debug, Clone)]
pub struct AugmentedItem {
    pub pixels: Raster,
    pub parent_record: String,
    pub rotation_degrees: f64,
    /// Crop placement in rotated-frame coordinates.
    pub crop_box: BoundingBox,
    pub label: Label,
}

/// Deterministic per-record generator: identical (seed, record) pairs
/// reproduce identical draws regardless of processing order.
fn record_rng(seed: u64, record_id: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(record_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

fn uniform_in(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Materializes the offline sweep for one patch. Output count is exactly
/// `n_rotations * n_crops_per_rotation`; bit-identical for identical
/// (patch, spec) inputs.
pub fn augment_offline(
    patch: &Raster,
    parent_record: &str,
    label: Label,
    spec: &AugmentationSpec,
) -> Result<Vec<AugmentedItem>> {
    spec.validate()?;
    if patch.width() != patch.height() {
        return Err(Error::Geometry(format!(
            "patch must be square, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    let side = patch.width();
    let mut rng = record_rng(spec.seed, parent_record);
    let mut items = Vec::with_capacity(spec.items_per_patch());
    for _ in 0..spec.n_rotations {
        let (rlo, rhi) = spec.rotation_range_degrees;
        let angle = uniform_in(&mut rng, rlo, rhi);
        let rotated = patch.rotate_about_center(angle);
        // largest axis-aligned square fully covered by the rotated content
        let theta = angle.to_radians();
        let cover = theta.sin().abs() + theta.cos().abs();
        let valid_side = ((side as f64) / cover).floor().max(1.0) as usize;
        let margin = (side - valid_side) / 2;
        for _ in 0..spec.n_crops_per_rotation {
            let (flo, fhi) = spec.crop_fraction_range;
            let fraction = uniform_in(&mut rng, flo, fhi);
            let mut crop_side = (fraction * side as f64).round().max(1.0) as usize;
            if crop_side > valid_side {
                log::debug!(
                    "crop fraction {fraction:.3} exceeds the rotation-valid region of \
                     {parent_record}; using the largest inscribed square"
                );
                crop_side = valid_side;
            }
            let max_offset = valid_side - crop_side;
            let x = margin + offset_in(&mut rng, max_offset);
            let y = margin + offset_in(&mut rng, max_offset);
            let crop = rotated.crop(x, y, crop_side, crop_side);
            items.push(AugmentedItem {
                pixels: crop.resize_bilinear(side, side),
                parent_record: parent_record.to_string(),
                rotation_degrees: angle,
                crop_box: BoundingBox::new(x as i64, y as i64, crop_side as u32, crop_side as u32),
                label,
            });
        }
    }
    Ok(items)
}

fn offset_in(rng: &mut ChaCha12Rng, max_offset: usize) -> usize {
    if max_offset == 0 {
        0
    } else {
        rng.random_range(0..=max_offset)
    }
}

/// With probability one half returns the horizontal mirror, else the input
/// unchanged. Draws exactly one value from the generator.
pub fn mirror_random(patch: &Raster, rng: &mut ChaCha12Rng) -> Raster {
    let v: f64 = rng.random();
    if v < 0.5 {
        patch.mirror_horizontal()
    } else {
        patch.clone()
    }
}

// ---------------------------------------------------------------------------
// Augmented manifest
// ---------------------------------------------------------------------------

/// One row of the augmented-items manifest.
#[derive(Debug, Clone)]
pub struct AugmentedEntry {
    pub item_id: String,
    pub parent_record: String,
    pub rotation_deg: f64,
    pub crop_x: i64,
    pub crop_y: i64,
    pub crop_side: u32,
    pub label: Label,
    pub path: PathBuf,
}

pub const AUGMENTED_MANIFEST: &str = "augmented.csv";

pub fn write_augmented_manifest(entries: &[AugmentedEntry], dir: &Path) -> Result<()> {
    let path = dir.join(AUGMENTED_MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::parse("augmented", e.to_string()))?;
    w.write_record([
        "item_id",
        "parent_record",
        "rotation_deg",
        "crop_x",
        "crop_y",
        "crop_side",
        "label",
    ])
    .map_err(|e| Error::parse("augmented", e.to_string()))?;
    for e in entries {
        w.write_record([
            e.item_id.as_str(),
            e.parent_record.as_str(),
            &format!("{:.6}", e.rotation_deg),
            &e.crop_x.to_string(),
            &e.crop_y.to_string(),
            &e.crop_side.to_string(),
            &e.label.to_string(),
        ])
        .map_err(|e| Error::parse("augmented", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_augmented_manifest(dir: &Path) -> Result<Vec<AugmentedEntry>> {
    let path = dir.join(AUGMENTED_MANIFEST);
    let mut rd = csv::Reader::from_path(&path).map_err(|e| Error::parse("augmented", e.to_string()))?;
    let mut entries = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| Error::parse("augmented", e.to_string()))?;
        if row.len() != 7 {
            return Err(Error::parse("augmented", format!("bad row {row:?}")));
        }
        entries.push(AugmentedEntry {
            item_id: row[0].to_string(),
            parent_record: row[1].to_string(),
            rotation_deg: row[2]
                .parse()
                .map_err(|e| Error::parse("augmented", format!("{e}")))?,
            crop_x: row[3]
                .parse()
                .map_err(|e| Error::parse("augmented", format!("{e}")))?,
            crop_y: row[4]
                .parse()
                .map_err(|e| Error::parse("augmented", format!("{e}")))?,
            crop_side: row[5]
                .parse()
                .map_err(|e| Error::parse("augmented", format!("{e}")))?,
            label: row[6].parse()?,
            path: dir.join(format!("{}.png", row[0].to_string())),
        });
    }
    Ok(entries)
}
