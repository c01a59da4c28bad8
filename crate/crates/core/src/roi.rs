//! Mass bounding boxes and fixed-size context patches.
//!
//! A mass mask yields its tightest axis-aligned bounding box, which is then
//! grown by one of two context strategies: a fixed pixel margin on every
//! side, or a proportional box centered on the mass. The grown box is
//! clamped to the image (never padded with fabricated tissue), cropped, and
//! resized to a square patch for the network.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Axis-aligned box in pixel coordinates. `x`/`y` may be negative for
/// pre-clamp geometry kept for audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x: i64,
    pub y: i64,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn new(x: i64, y: i64, w: u32, h: u32) -> Self {
        assert!(w >= 1 && h >= 1, "bounding box must have positive extent");
        BoundingBox { x, y, w, h }
    }

    pub fn right(&self) -> i64 {
        self.x + self.w as i64
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h as i64
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.right() >= other.right()
            && self.bottom() >= other.bottom()
    }

    fn within(&self, width: usize, height: usize) -> bool {
        self.x >= 0 && self.y >= 0 && self.right() <= width as i64 && self.bottom() <= height as i64
    }

    /// Intersection with the image rectangle.
    fn clamp_to(&self, width: usize, height: usize) -> BoundingBox {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = self.right().min(width as i64);
        let y1 = self.bottom().min(height as i64);
        BoundingBox::new(x0, y0, (x1 - x0) as u32, (y1 - y0) as u32)
    }
}

/// The two context paddings: a fixed pixel margin, or a box scaled about
/// the mass center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContextStrategy {
    SmallFixed { pad_pixels: u32 },
    LargeProportional { scale: f64 },
}

impl ContextStrategy {
    pub fn small_default() -> Self {
        ContextStrategy::SmallFixed { pad_pixels: 50 }
    }

    pub fn large_default() -> Self {
        ContextStrategy::LargeProportional { scale: 2.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContextStrategy::SmallFixed { .. } => "small",
            ContextStrategy::LargeProportional { .. } => "large",
        }
    }

    /// Applies the strategy to a mass box inside an image.
    pub fn expand(
        &self,
        bbox: BoundingBox,
        image_dims: (usize, usize),
    ) -> Result<BoundingBox> {
        match *self {
            ContextStrategy::SmallFixed { pad_pixels } => {
                expand_fixed(bbox, pad_pixels, image_dims)
            }
            ContextStrategy::LargeProportional { scale } => {
                expand_proportional(bbox, scale, image_dims)
            }
        }
    }
}

/// A square context patch with intensities in `[0, 1]`, plus the geometry
/// it was cut from. `source_box` keeps the pre-clamp expansion for audit.
#[derive(Debug, Clone)]
pub struct RoiPatch {
    pub pixels: Raster,
    pub source_record: String,
    pub strategy: ContextStrategy,
    pub source_box: BoundingBox,
}

/// Tightest axis-aligned box containing every positive mask pixel.
pub fn mask_to_bbox(mask: &Raster) -> Result<BoundingBox> {
    let mut min_x = usize::MAX;
    let mut min_y = usize::MAX;
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    let mut any = false;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) > 0.0 {
                any = true;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if !any {
        return Err(Error::Geometry("empty mask".into()));
    }
    Ok(BoundingBox::new(
        min_x as i64,
        min_y as i64,
        (max_x - min_x + 1) as u32,
        (max_y - min_y + 1) as u32,
    ))
}

/// Grows the box by `pad` pixels on each side, then clamps to the image.
pub fn expand_fixed(
    bbox: BoundingBox,
    pad: u32,
    image_dims: (usize, usize),
) -> Result<BoundingBox> {
    let (width, height) = image_dims;
    if !bbox.within(width, height) {
        return Err(Error::Geometry(format!(
            "box {bbox:?} lies outside a {width}x{height} image"
        )));
    }
    let grown = BoundingBox::new(
        bbox.x - pad as i64,
        bbox.y - pad as i64,
        bbox.w + 2 * pad,
        bbox.h + 2 * pad,
    );
    Ok(grown.clamp_to(width, height))
}

/// Scales the box about its center to `round(scale * w) x round(scale * h)`
/// (half-up, at least one pixel), then clamps to the image.
pub fn expand_proportional(
    bbox: BoundingBox,
    scale: f64,
    image_dims: (usize, usize),
) -> Result<BoundingBox> {
    let (width, height) = image_dims;
    if !bbox.within(width, height) {
        return Err(Error::Geometry(format!(
            "box {bbox:?} lies outside a {width}x{height} image"
        )));
    }
    if scale < 1.0 {
        return Err(Error::Geometry(format!("scale {scale} must be >= 1")));
    }
    let grown = scale_about_center(bbox, scale);
    Ok(grown.clamp_to(width, height))
}

/// Pre-clamp proportional expansion (used to retain audit geometry).
pub fn scale_about_center(bbox: BoundingBox, scale: f64) -> BoundingBox {
    let new_w = round_half_up(scale * bbox.w as f64).max(1.0) as u32;
    let new_h = round_half_up(scale * bbox.h as f64).max(1.0) as u32;
    let cx = bbox.x as f64 + bbox.w as f64 / 2.0;
    let cy = bbox.y as f64 + bbox.h as f64 / 2.0;
    let x = round_half_up(cx - new_w as f64 / 2.0) as i64;
    let y = round_half_up(cy - new_h as f64 / 2.0) as i64;
    BoundingBox::new(x, y, new_w, new_h)
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Crops `bbox` from the image and resizes bilinearly to a square patch of
/// side `out_side`. The box must lie inside the image with positive extent.
pub fn extract_patch(image: &Raster, bbox: BoundingBox, out_side: usize) -> Result<Raster> {
    if bbox.w == 0 || bbox.h == 0 {
        return Err(Error::Geometry("degenerate box".into()));
    }
    if !bbox.within(image.width(), image.height()) {
        return Err(Error::Geometry(format!(
            "box {bbox:?} lies outside a {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let crop = image.crop(bbox.x as usize, bbox.y as usize, bbox.w as usize, bbox.h as usize);
    Ok(crop.resize_bilinear(out_side, out_side))
}

/// Full per-record ROI step: mask box, context expansion, crop and resize.
pub fn extract_roi(
    image: &Raster,
    mask: &Raster,
    strategy: ContextStrategy,
    out_side: usize,
    record_id: &str,
) -> Result<RoiPatch> {
    let mass_box = mask_to_bbox(mask)?;
    let dims = (image.width(), image.height());
    let source_box = match strategy {
        ContextStrategy::SmallFixed { pad_pixels } => BoundingBox::new(
            mass_box.x - pad_pixels as i64,
            mass_box.y - pad_pixels as i64,
            mass_box.w + 2 * pad_pixels,
            mass_box.h + 2 * pad_pixels,
        ),
        ContextStrategy::LargeProportional { scale } => scale_about_center(mass_box, scale),
    };
    let clamped = strategy.expand(mass_box, dims)?;
    let pixels = extract_patch(image, clamped, out_side)?;
    Ok(RoiPatch {
        pixels,
        source_record: record_id.to_string(),
        strategy,
        source_box,
    })
}

// ---------------------------------------------------------------------------
// Patch manifest
// ---------------------------------------------------------------------------

/// One row of the patch manifest written next to extracted patch files.
#[derive(Debug, Clone)]
pub struct PatchEntry {
    pub record_id: String,
    pub patch_path: PathBuf,
    pub strategy: String,
    pub bbox: BoundingBox,
}

pub const PATCH_MANIFEST: &str = "patches.csv";

pub fn write_patch_manifest(entries: &[PatchEntry], dir: &Path) -> Result<()> {
    let path = dir.join(PATCH_MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::parse("patches", e.to_string()))?;
    w.write_record(["record_id", "patch_path", "strategy", "box_x", "box_y", "box_w", "box_h"])
        .map_err(|e| Error::parse("patches", e.to_string()))?;
    for e in entries {
        let rel = e
            .patch_path
            .strip_prefix(dir)
            .unwrap_or(&e.patch_path)
            .to_string_lossy()
            .into_owned();
        w.write_record([
            e.record_id.as_str(),
            &rel,
            &e.strategy,
            &e.bbox.x.to_string(),
            &e.bbox.y.to_string(),
            &e.bbox.w.to_string(),
            &e.bbox.h.to_string(),
        ])
        .map_err(|e| Error::parse("patches", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_patch_manifest(dir: &Path) -> Result<Vec<PatchEntry>> {
    let path = dir.join(PATCH_MANIFEST);
    let mut rd = csv::Reader::from_path(&path).map_err(|e| Error::parse("patches", e.to_string()))?;
    let mut entries = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| Error::parse("patches", e.to_string()))?;
        if row.len() != 7 {
            return Err(Error::parse("patches", format!("bad row {row:?}")));
        }
        let parse_i = |s: &str| s.parse::<i64>().map_err(|e| Error::parse("patches", e.to_string()));
        let parse_u = |s: &str| s.parse::<u32>().map_err(|e| Error::parse("patches", e.to_string()));
        entries.push(PatchEntry {
            record_id: row[0].to_string(),
            patch_path: dir.join(&row[1]),
            strategy: row[2].to_string(),
            bbox: BoundingBox::new(parse_i(&row[3])?, parse_i(&row[4])?, parse_u(&row[5])?, parse_u(&row[6])?),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(points: &[(usize, usize)], w: usize, h: usize) -> Raster {
        let mut m = Raster::new(w, h);
        for &(x, y) in points {
            m.set(x, y, 1.0);
        }
        m
    }

    #[test]
    fn bbox_of_single_pixel() {
        let m = mask_with(&[(5, 7)], 20, 20);
        assert_eq!(mask_to_bbox(&m).unwrap(), BoundingBox::new(5, 7, 1, 1));
    }

    #[test]
    fn bbox_of_full_mask() {
        let m = Raster::from_data(100, 80, vec![1.0; 8000]);
        assert_eq!(mask_to_bbox(&m).unwrap(), BoundingBox::new(0, 0, 100, 80));
    }

    #[test]
    fn bbox_of_two_points() {
        // brute-force min/max over {(2,3),(10,9)}: x 2..=10, y 3..=9
        let m = mask_with(&[(2, 3), (10, 9)], 20, 20);
        assert_eq!(mask_to_bbox(&m).unwrap(), BoundingBox::new(2, 3, 9, 7));
    }

    #[test]
    fn bbox_of_empty_mask_errors() {
        let m = Raster::new(10, 10);
        let err = mask_to_bbox(&m).unwrap_err();
        assert!(err.to_string().contains("empty mask"));
    }

    #[test]
    fn fixed_expansion_interior() {
        let b = BoundingBox::new(100, 200, 50, 60);
        let out = expand_fixed(b, 50, (1000, 1000)).unwrap();
        assert_eq!(out, BoundingBox::new(50, 150, 150, 160));
    }

    #[test]
    fn fixed_expansion_clamped_at_origin() {
        let b = BoundingBox::new(10, 10, 20, 20);
        let out = expand_fixed(b, 50, (1000, 1000)).unwrap();
        assert_eq!(out, BoundingBox::new(0, 0, 80, 80));
    }

    #[test]
    fn fixed_expansion_pad_zero_is_identity() {
        let b = BoundingBox::new(3, 4, 5, 6);
        assert_eq!(expand_fixed(b, 0, (50, 50)).unwrap(), b);
    }

    #[test]
    fn proportional_expansion_centered() {
        let b = BoundingBox::new(100, 200, 50, 60);
        let out = expand_proportional(b, 2.0, (1000, 1000)).unwrap();
        assert_eq!(out, BoundingBox::new(75, 170, 100, 120));
    }

    #[test]
    fn proportional_scale_one_is_identity() {
        let b = BoundingBox::new(7, 8, 9, 10);
        assert_eq!(expand_proportional(b, 1.0, (100, 100)).unwrap(), b);
    }

    #[test]
    fn proportional_expansion_clamped_to_small_image() {
        // center (50,50), doubled to 200x200 -> (-50,-50,200,200), clamped
        let b = BoundingBox::new(0, 0, 100, 100);
        let out = expand_proportional(b, 2.0, (150, 150)).unwrap();
        assert_eq!(out, BoundingBox::new(0, 0, 150, 150));
    }

    #[test]
    fn expansions_stay_inside_and_contain_input() {
        let b = BoundingBox::new(40, 40, 10, 12);
        for pad in [0, 5, 500] {
            let out = expand_fixed(b, pad, (100, 100)).unwrap();
            assert!(out.within(100, 100));
            assert!(out.contains(&b));
        }
        for scale in [1.0, 1.5, 2.0, 10.0] {
            let out = expand_proportional(b, scale, (100, 100)).unwrap();
            assert!(out.within(100, 100));
            assert!(out.contains(&b));
        }
    }

    #[test]
    fn extract_same_size_is_passthrough() {
        let data: Vec<f64> = (0..36).map(|i| i as f64 / 35.0).collect();
        let img = Raster::from_data(6, 6, data);
        let out = extract_patch(&img, BoundingBox::new(1, 1, 4, 4), 4).unwrap();
        assert_eq!(out, img.crop(1, 1, 4, 4));
    }

    #[test]
    fn extract_constant_crop_stays_constant() {
        let img = Raster::from_data(10, 10, vec![0.25; 100]);
        let out = extract_patch(&img, BoundingBox::new(2, 3, 5, 4), 8).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert_eq!(out.width(), 8);
        assert_eq!(out.height(), 8);
    }

    #[test]
    fn extract_degenerate_box_errors() {
        let img = Raster::new(10, 10);
        assert!(extract_patch(&img, BoundingBox { x: 0, y: 0, w: 0, h: 3 }, 4).is_err());
    }

    #[test]
    fn proportional_is_translation_equivariant_away_from_borders() {
        let a = BoundingBox::new(30, 40, 11, 13);
        let b = BoundingBox::new(30 + 7, 40 + 5, 11, 13);
        let ea = expand_proportional(a, 2.0, (500, 500)).unwrap();
        let eb = expand_proportional(b, 2.0, (500, 500)).unwrap();
        assert_eq!(eb.x - ea.x, 7);
        assert_eq!(eb.y - ea.y, 5);
        assert_eq!(ea.w, eb.w);
        assert_eq!(ea.h, eb.h);
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bbox_matches_brute_force(
                w in 1usize..40, h in 1usize..40,
                points in prop::collection::vec((0usize..40, 0usize..40), 1..30),
            ) {
                let pts: Vec<(usize, usize)> =
                    points.into_iter().map(|(x, y)| (x % w, y % h)).collect();
                let mask = mask_with(&pts, w, h);
                let bbox = mask_to_bbox(&mask).unwrap();
                let min_x = pts.iter().map(|p| p.0).min().unwrap();
                let max_x = pts.iter().map(|p| p.0).max().unwrap();
                let min_y = pts.iter().map(|p| p.1).min().unwrap();
                let max_y = pts.iter().map(|p| p.1).max().unwrap();
                prop_assert_eq!(bbox, BoundingBox::new(
                    min_x as i64,
                    min_y as i64,
                    (max_x - min_x + 1) as u32,
                    (max_y - min_y + 1) as u32,
                ));
            }

            #[test]
            fn expansions_always_inside_image(
                x in 0i64..80, y in 0i64..80, w in 1u32..20, h in 1u32..20,
                pad in 0u32..200, scale in 1.0f64..5.0,
            ) {
                let img_w = 100usize;
                let img_h = 100usize;
                let x = x.min(img_w as i64 - w as i64);
                let y = y.min(img_h as i64 - h as i64);
                let b = BoundingBox::new(x, y, w, h);
                let f = expand_fixed(b, pad, (img_w, img_h)).unwrap();
                prop_assert!(f.within(img_w, img_h));
                prop_assert!(f.contains(&b));
                let p = expand_proportional(b, scale, (img_w, img_h)).unwrap();
                prop_assert!(p.within(img_w, img_h));
                prop_assert!(p.contains(&b));
            }
        }
    }
}
