//! Corpus ingestion and patient-disjoint, class-balanced splits.
//!
//! A corpus is a directory of grayscale mass images, each paired with a
//! binary mask of the pre-segmented mass. [`scan_dataset`] walks the tree,
//! validates every image/mask pair and produces a [`DatasetManifest`];
//! [`split_by_patient`] assigns whole patients to train/val/test such that
//! val and test hold exactly as many benign as malignant records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Mammographic view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    Mlo,
    Cc,
}

impl FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MLO" => Ok(View::Mlo),
            "CC" => Ok(View::Cc),
            other => Err(Error::parse("view", format!("unknown view {other:?}"))),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Mlo => "MLO",
            View::Cc => "CC",
        })
    }
}

/// Breast laterality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Laterality {
    Left,
    Right,
}

impl FromStr for Laterality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LEFT" | "L" => Ok(Laterality::Left),
            "RIGHT" | "R" => Ok(Laterality::Right),
            other => Err(Error::parse(
                "laterality",
                format!("unknown laterality {other:?}"),
            )),
        }
    }
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Laterality::Left => "LEFT",
            Laterality::Right => "RIGHT",
        })
    }
}

/// Pathology label. Malignant is the positive class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    /// Class index used by the networks: benign 0, malignant 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BENIGN" => Ok(Label::Benign),
            // corpora distinguishing "benign without callback" fold into benign
            "BENIGN_WITHOUT_CALLBACK" => Ok(Label::Benign),
            "MALIGNANT" => Ok(Label::Malignant),
            other => Err(Error::parse("label", format!("unknown label {other:?}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "BENIGN",
            Label::Malignant => "MALIGNANT",
        })
    }
}

/// One annotated mass: an image, the mask of the pre-segmented mass, and
/// the patient/view/pathology metadata.
#[derive(Debug, Clone)]
pub struct MassRecord {
    pub record_id: String,
    pub patient_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub view: View,
    pub laterality: Laterality,
    pub label: Label,
}

/// The scanned corpus, sorted by record id.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<MassRecord>,
    pub source_root: PathBuf,
}

impl DatasetManifest {
    pub fn record(&self, id: &str) -> Option<&MassRecord> {
        self.records.iter().find(|r| r.record_id == id)
    }

    /// Distinct patient ids in the manifest.
    pub fn patient_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.patient_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// Destination split of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::parse("split", format!("unknown split {other:?}"))),
        }
    }
}

/// Patient-disjoint record assignment with exactly balanced val and test.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

impl SplitManifest {
    pub fn split_of(&self, record_id: &str) -> Option<Split> {
        if self.train.iter().any(|r| r == record_id) {
            Some(Split::Train)
        } else if self.val.iter().any(|r| r == record_id) {
            Some(Split::Val)
        } else if self.test.iter().any(|r| r == record_id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Filename convention mapping image stems to record metadata.
///
/// A layout pattern is a stem template such as
/// `{patient}_{view}_{laterality}_{label}_{index}` in which every token
/// matches a run of characters without the adjacent literal separators.
/// The mask for an image `stem.ext` is expected at `stem{mask_suffix}.ext`
/// (default suffix `_mask`).
#[derive(Debug, Clone)]
pub struct LayoutSpec {
    pattern: String,
    regex: regex::Regex,
    pub mask_suffix: String,
}

pub const DEFAULT_LAYOUT: &str = "{patient}_{view}_{laterality}_{label}_{index}";

impl LayoutSpec {
    pub fn new(pattern: &str) -> Result<Self> {
        Self::with_mask_suffix(pattern, "_mask")
    }

    pub fn with_mask_suffix(pattern: &str, mask_suffix: &str) -> Result<Self> {
        let mut regex_src = String::from("^");
        let mut rest = pattern;
        let mut seen = BTreeSet::new();
        while let Some(start) = rest.find('{') {
            let lit = &rest[..start];
            regex_src.push_str(&regex::escape(lit));
            let end = rest[start..]
                .find('}')
                .ok_or_else(|| Error::parse("layout", "unbalanced '{' in pattern"))?
                + start;
            let token = &rest[start + 1..end];
            match token {
                "patient" | "view" | "laterality" | "label" | "index" => {
                    if !seen.insert(token.to_string()) {
                        return Err(Error::parse(
                            "layout",
                            format!("duplicate token {{{token}}}"),
                        ));
                    }
                }
                other => {
                    return Err(Error::parse("layout", format!("unknown token {{{other}}}")))
                }
            }
            // tokens never contain the literal character that follows them
            let stop = rest[end + 1..].chars().next();
            match stop {
                Some(c) => regex_src.push_str(&format!("(?P<{token}>[^{}]+)", regex::escape(&c.to_string()))),
                None => regex_src.push_str(&format!("(?P<{token}>.+)")),
            }
            rest = &rest[end + 1..];
        }
        regex_src.push_str(&regex::escape(rest));
        regex_src.push('$');
        for required in ["patient", "view", "laterality", "label"] {
            if !seen.contains(required) {
                return Err(Error::parse(
                    "layout",
                    format!("pattern must contain {{{required}}}"),
                ));
            }
        }
        let regex = regex::Regex::new(&regex_src)
            .map_err(|e| Error::parse("layout", e.to_string()))?;
        Ok(LayoutSpec {
            pattern: pattern.to_string(),
            regex,
            mask_suffix: mask_suffix.to_string(),
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// Parses an image stem into (patient, view, laterality, label).
    pub fn parse_stem(&self, stem: &str) -> Option<(String, View, Laterality, Label)> {
        let caps = self.regex.captures(stem)?;
        let patient = caps.name("patient")?.as_str().to_string();
        let view = caps.name("view")?.as_str().parse().ok()?;
        let laterality = caps.name("laterality")?.as_str().parse().ok()?;
        let label = caps.name("label")?.as_str().parse().ok()?;
        Some((patient, view, laterality, label))
    }
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec::new(DEFAULT_LAYOUT).expect("default layout is valid")
    }
}

const RASTER_EXTENSIONS: &[&str] = &["png", "pgm", "tif", "tiff"];

/// Walks `root`, pairs images with masks per the layout, validates each
/// pair and returns the manifest sorted by record id.
///
/// Unreadable files are skipped with a warning; image/mask dimension
/// mismatches and masks without a positive pixel reject the record with a
/// logged error. Zero valid records is a hard error.
pub fn scan_dataset(root: &Path, layout: &LayoutSpec) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "root {} is not a directory",
            root.display()
        )));
    }
    let mut candidates: Vec<PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Dataset(format!("walk failed: {e}")))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.into_path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| RASTER_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !ext_ok {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s,
            None => continue,
        };
        if stem.ends_with(&layout.mask_suffix) {
            continue; // masks are resolved from their image
        }
        candidates.push(path);
    }

    let mut records: Vec<MassRecord> = candidates
        .par_iter()
        .filter_map(|image_path| match validate_candidate(root, image_path, layout) {
            Ok(rec) => rec,
            Err(e) => {
                log::warn!("skipping {}: {e}", image_path.display());
                None
            }
        })
        .collect();

    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let mut ids = BTreeSet::new();
    for r in &records {
        if !ids.insert(r.record_id.clone()) {
            return Err(Error::Dataset(format!(
                "duplicate record id {:?}",
                r.record_id
            )));
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "no valid records under {}",
            root.display()
        )));
    }
    Ok(DatasetManifest {
        records,
        source_root: root.to_path_buf(),
    })
}

fn validate_candidate(
    root: &Path,
    image_path: &Path,
    layout: &LayoutSpec,
) -> Result<Option<MassRecord>> {
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Dataset("non-utf8 file stem".into()))?;
    let parsed = match layout.parse_stem(stem) {
        Some(p) => p,
        None => return Ok(None), // not an image of this corpus
    };
    let (patient, view, laterality, label) = parsed;
    let ext = image_path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let mask_path = image_path.with_file_name(format!("{stem}{}.{ext}", layout.mask_suffix));
    if !mask_path.is_file() {
        log::warn!("no mask for {}", image_path.display());
        return Ok(None);
    }
    let image = Raster::load(image_path)?;
    let mask = Raster::load(&mask_path)?;
    if image.width() != mask.width() || image.height() != mask.height() {
        log::error!(
            "rejecting {}: mask dimensions {}x{} do not match image {}x{}",
            image_path.display(),
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        );
        return Ok(None);
    }
    if !mask.data().iter().any(|&v| v > 0.0) {
        log::error!("rejecting {}: mask has no positive pixel", image_path.display());
        return Ok(None);
    }
    let record_id = image_path
        .strip_prefix(root)
        .unwrap_or(image_path)
        .with_extension("")
        .to_string_lossy()
        .replace(std::path::MAIN_SEPARATOR, "__");
    Ok(Some(MassRecord {
        record_id,
        patient_id: patient,
        image_path: image_path.to_path_buf(),
        mask_path,
        view,
        laterality,
        label,
    }))
}

#[derive(Debug, Clone)]
struct PatientBundle {
    benign: usize,
    malignant: usize,
    record_ids: Vec<String>,
}

/// Splits records by patient with a seeded shuffle. Patients are scanned
/// once in shuffled order: test is filled first, then val, each toward
/// `floor(ratio * n_records)` records while keeping benign and malignant
/// counts exactly equal; every patient not admitted goes to train.
///
/// Patients are atomic, so a patient is admitted only if neither class
/// overshoots its per-class target and exact balance stays reachable with
/// the patients not yet scanned (checked against a capped reachability
/// set). Deferral preserves reachability, so the admitted set always ends
/// exactly balanced.
pub fn split_by_patient(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitManifest> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 {
        return Err(Error::Dataset("split ratios must be positive".into()));
    }
    if (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Dataset(format!(
            "split ratios must sum to 1, got {}",
            rt + rv + rs
        )));
    }

    let mut by_patient: BTreeMap<String, PatientBundle> = BTreeMap::new();
    for r in &manifest.records {
        let b = by_patient
            .entry(r.patient_id.clone())
            .or_insert_with(|| PatientBundle {
                benign: 0,
                malignant: 0,
                record_ids: Vec::new(),
            });
        match r.label {
            Label::Benign => b.benign += 1,
            Label::Malignant => b.malignant += 1,
        }
        b.record_ids.push(r.record_id.clone());
    }
    if by_patient.len() < 3 {
        return Err(Error::Dataset(format!(
            "need at least 3 patients to form three patient-disjoint splits, got {}",
            by_patient.len()
        )));
    }
    let total_benign: usize = by_patient.values().map(|p| p.benign).sum();
    let total_malignant: usize = by_patient.values().map(|p| p.malignant).sum();
    for (count, class) in [(total_benign, "BENIGN"), (total_malignant, "MALIGNANT")] {
        if count == 0 {
            return Err(Error::BalanceUnattainable {
                split: "val/test".into(),
                class: class.into(),
            });
        }
    }

    let n_records = manifest.records.len();
    let mut pool: Vec<PatientBundle> = by_patient.into_values().collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    let test_target = ((rs * n_records as f64).floor() as usize) / 2;
    let val_target = ((rv * n_records as f64).floor() as usize) / 2;

    let (test_admitted, test_end) = fill_balanced(&pool, test_target);
    let (val_admitted, _) = fill_balanced(&pool[test_end..], val_target);

    let mut train: Vec<&PatientBundle> = Vec::new();
    let mut val: Vec<&PatientBundle> = Vec::new();
    let mut test: Vec<&PatientBundle> = Vec::new();
    for (i, p) in pool.iter().enumerate() {
        if i < test_end && test_admitted[i] {
            test.push(p);
        } else if i >= test_end && val_admitted[i - test_end] {
            val.push(p);
        } else {
            train.push(p);
        }
    }

    let collect_ids = |bundles: &[&PatientBundle]| {
        let mut ids: Vec<String> = bundles
            .iter()
            .flat_map(|p| p.record_ids.iter().cloned())
            .collect();
        ids.sort();
        ids
    };

    Ok(SplitManifest {
        train: collect_ids(&train),
        val: collect_ids(&val),
        test: collect_ids(&test),
        ratios,
        seed,
    })
}

/// Reachable (benign, malignant) delta sums over a patient suffix, capped
/// per class. `sets[i]` holds the sums achievable with patients `i..`.
struct Reachability {
    cap: usize,
    sets: Vec<Vec<bool>>,
}

impl Reachability {
    fn build(patients: &[PatientBundle], cap: usize) -> Self {
        let stride = cap + 1;
        let grid = stride * stride;
        let mut sets = vec![vec![false; grid]; patients.len() + 1];
        sets[patients.len()][0] = true; // empty completion
        for i in (0..patients.len()).rev() {
            let (pb, pm) = (patients[i].benign, patients[i].malignant);
            let (head, tail) = sets.split_at_mut(i + 1);
            let cur = &mut head[i];
            let next = &tail[0];
            cur.copy_from_slice(next);
            if pb <= cap && pm <= cap {
                for db in 0..=(cap - pb) {
                    for dm in 0..=(cap - pm) {
                        if next[db * stride + dm] {
                            cur[(db + pb) * stride + (dm + pm)] = true;
                        }
                    }
                }
            }
        }
        Reachability { cap, sets }
    }

    /// True if counts `(b, m)` can be completed to equality within the cap
    /// using patients `i..`.
    fn balance_reachable(&self, i: usize, b: usize, m: usize) -> bool {
        let stride = self.cap + 1;
        let set = &self.sets[i];
        for db in 0..=(self.cap - b) {
            // need b + db == m + dm
            let total = b + db;
            if total < m {
                continue;
            }
            let dm = total - m;
            if dm > self.cap - m {
                break;
            }
            if set[db * stride + dm] {
                return true;
            }
        }
        false
    }
}

/// Scans `pool` in order, admitting patients while both class counts stay
/// within `per_class_target` and exact balance remains reachable. Returns
/// the admission flags and the index at which the fill completed (patients
/// past it were never considered).
fn fill_balanced(pool: &[PatientBundle], per_class_target: usize) -> (Vec<bool>, usize) {
    let t = per_class_target;
    let mut admitted = vec![false; pool.len()];
    if t == 0 || pool.is_empty() {
        return (admitted, 0);
    }
    let reach = Reachability::build(pool, t);
    let (mut b, mut m) = (0usize, 0usize);
    let mut end = pool.len();
    for (i, p) in pool.iter().enumerate() {
        if b == t && m == t {
            end = i;
            break;
        }
        let (nb, nm) = (b + p.benign, m + p.malignant);
        if nb <= t && nm <= t && reach.balance_reachable(i + 1, nb, nm) {
            admitted[i] = true;
            b = nb;
            m = nm;
        }
    }
    debug_assert_eq!(b, m, "fill must end balanced");
    (admitted, end)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

pub const MANIFEST_HEADER: [&str; 7] = [
    "record_id",
    "patient_id",
    "view",
    "laterality",
    "label",
    "image_path",
    "mask_path",
];

/// Writes the manifest CSV: header plus one record per line. Paths under
/// the CSV's directory are stored relative to it.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse("manifest", e.to_string()))?;
    w.write_record(MANIFEST_HEADER)
        .map_err(|e| Error::parse("manifest", e.to_string()))?;
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    for r in &manifest.records {
        w.write_record([
            r.record_id.as_str(),
            r.patient_id.as_str(),
            &r.view.to_string(),
            &r.laterality.to_string(),
            &r.label.to_string(),
            &rel(&r.image_path),
            &rel(&r.mask_path),
        ])
        .map_err(|e| Error::parse("manifest", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a manifest CSV; relative paths resolve against the CSV's directory.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::parse("manifest", e.to_string()))?;
    let headers = rd
        .headers()
        .map_err(|e| Error::parse("manifest", e.to_string()))?
        .clone();
    if headers.iter().ne(MANIFEST_HEADER) {
        return Err(Error::parse(
            "manifest",
            format!("unexpected header {headers:?}"),
        ));
    }
    let resolve = |s: &str| -> PathBuf {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let mut records = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| Error::parse("manifest", e.to_string()))?;
        if row.len() != 7 {
            return Err(Error::parse("manifest", format!("bad row {row:?}")));
        }
        records.push(MassRecord {
            record_id: row[0].to_string(),
            patient_id: row[1].to_string(),
            view: row[2].parse()?,
            laterality: row[3].parse()?,
            label: row[4].parse()?,
            image_path: resolve(&row[5]),
            mask_path: resolve(&row[6]),
        });
    }
    if records.is_empty() {
        return Err(Error::Dataset("manifest holds no records".into()));
    }
    Ok(DatasetManifest {
        records,
        source_root: base,
    })
}

/// Writes the split CSV: a metadata comment line with ratios and seed,
/// the `record_id,split` header, then one row per record.
pub fn write_split(split: &SplitManifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "# ratios = {},{},{}; seed = {}\n",
        split.ratios.0, split.ratios.1, split.ratios.2, split.seed
    ));
    out.push_str("record_id,split\n");
    for (ids, name) in [
        (&split.train, "train"),
        (&split.val, "val"),
        (&split.test, "test"),
    ] {
        for id in ids.iter() {
            out.push_str(&format!("{id},{name}\n"));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a split CSV written by [`write_split`].
pub fn read_split(path: &Path) -> Result<SplitManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ratios = (0.0, 0.0, 0.0);
    let mut seed = 0u64;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut saw_meta = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            // "# ratios = a,b,c; seed = n"
            for part in meta.split(';') {
                let mut kv = part.splitn(2, '=');
                let key = kv.next().unwrap_or("").trim();
                let value = kv.next().unwrap_or("").trim();
                match key {
                    "ratios" => {
                        let nums: Vec<f64> = value
                            .split(',')
                            .map(|v| v.trim().parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|e| Error::parse("split", e.to_string()))?;
                        if nums.len() != 3 {
                            return Err(Error::parse("split", "ratios must have 3 parts"));
                        }
                        ratios = (nums[0], nums[1], nums[2]);
                        saw_meta = true;
                    }
                    "seed" => {
                        seed = value
                            .parse()
                            .map_err(|e| Error::parse("split", format!("bad seed: {e}")))?;
                    }
                    _ => {}
                }
            }
            continue;
        }
        if line == "record_id,split" {
            continue;
        }
        let mut cols = line.splitn(2, ',');
        let id = cols
            .next()
            .ok_or_else(|| Error::parse("split", "missing record_id"))?;
        let split: Split = cols
            .next()
            .ok_or_else(|| Error::parse("split", "missing split column"))?
            .parse()?;
        match split {
            Split::Train => train.push(id.to_string()),
            Split::Val => val.push(id.to_string()),
            Split::Test => test.push(id.to_string()),
        }
    }
    if !saw_meta {
        return Err(Error::parse("split", "missing metadata line"));
    }
    Ok(SplitManifest {
        train,
        val,
        test,
        ratios,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn synthetic_manifest(patients: &[(&str, &[Label])]) -> DatasetManifest {
        let mut records = Vec::new();
        for (pid, labels) in patients {
            for (i, label) in labels.iter().enumerate() {
                records.push(MassRecord {
                    record_id: format!("{pid}_m{i}"),
                    patient_id: pid.to_string(),
                    image_path: PathBuf::from(format!("{pid}_m{i}.png")),
                    mask_path: PathBuf::from(format!("{pid}_m{i}_mask.png")),
                    view: View::Mlo,
                    laterality: Laterality::Left,
                    label: *label,
                });
            }
        }
        records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        DatasetManifest {
            records,
            source_root: PathBuf::from("."),
        }
    }

    fn check_invariants(manifest: &DatasetManifest, split: &SplitManifest) {
        let all: Vec<&str> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .map(|s| s.as_str())
            .collect();
        let unique: HashSet<&str> = all.iter().copied().collect();
        assert_eq!(all.len(), unique.len(), "duplicate record ids across splits");
        assert_eq!(unique.len(), manifest.records.len(), "coverage");

        let patients_of = |ids: &[String]| -> HashSet<String> {
            ids.iter()
                .map(|id| manifest.record(id).unwrap().patient_id.clone())
                .collect()
        };
        let pt = patients_of(&split.train);
        let pv = patients_of(&split.val);
        let ps = patients_of(&split.test);
        assert!(pt.is_disjoint(&pv) && pt.is_disjoint(&ps) && pv.is_disjoint(&ps));

        for ids in [&split.val, &split.test] {
            let benign = ids
                .iter()
                .filter(|id| manifest.record(id).unwrap().label == Label::Benign)
                .count();
            assert_eq!(benign * 2, ids.len(), "val/test must be exactly balanced");
        }
    }

    #[test]
    fn four_patient_example_for_every_seed() {
        // 4 patients, each 1 benign + 1 malignant, ratios (.5,.25,.25):
        // enumerate seeds; always 2/1/1 patients and balanced val/test.
        let manifest = synthetic_manifest(&[
            ("p0", &[Label::Benign, Label::Malignant]),
            ("p1", &[Label::Benign, Label::Malignant]),
            ("p2", &[Label::Benign, Label::Malignant]),
            ("p3", &[Label::Benign, Label::Malignant]),
        ]);
        for seed in 0..128 {
            let split = split_by_patient(&manifest, (0.5, 0.25, 0.25), seed).unwrap();
            check_invariants(&manifest, &split);
            assert_eq!(split.test.len(), 2);
            assert_eq!(split.val.len(), 2);
            assert_eq!(split.train.len(), 4);
        }
    }

    #[test]
    fn single_patient_is_an_error() {
        let manifest = synthetic_manifest(&[("p0", &[Label::Benign, Label::Malignant])]);
        assert!(split_by_patient(&manifest, (0.8, 0.1, 0.1), 1).is_err());
    }

    #[test]
    fn all_benign_corpus_names_the_deficient_class() {
        let benign: &[Label] = &[Label::Benign, Label::Benign];
        let manifest = synthetic_manifest(&[("a", benign), ("b", benign), ("c", benign), ("d", benign), ("e", benign)]);
        let err = split_by_patient(&manifest, (0.8, 0.1, 0.1), 3).unwrap_err();
        match err {
            Error::BalanceUnattainable { class, .. } => assert_eq!(class, "MALIGNANT"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn determinism_byte_for_byte() {
        let manifest = synthetic_manifest(&[
            ("p0", &[Label::Benign, Label::Malignant, Label::Benign]),
            ("p1", &[Label::Malignant]),
            ("p2", &[Label::Benign, Label::Malignant]),
            ("p3", &[Label::Benign]),
            ("p4", &[Label::Malignant, Label::Malignant]),
            ("p5", &[Label::Benign, Label::Benign]),
        ]);
        let a = split_by_patient(&manifest, (0.6, 0.2, 0.2), 17).unwrap();
        let b = split_by_patient(&manifest, (0.6, 0.2, 0.2), 17).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let (fa, fb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_split(&a, &fa).unwrap();
        write_split(&b, &fb).unwrap();
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap());
    }

    #[test]
    fn split_roundtrips_through_csv() {
        let manifest = synthetic_manifest(&[
            ("p0", &[Label::Benign, Label::Malignant]),
            ("p1", &[Label::Benign, Label::Malignant]),
            ("p2", &[Label::Malignant, Label::Benign]),
            ("p3", &[Label::Benign, Label::Malignant]),
        ]);
        let split = split_by_patient(&manifest, (0.5, 0.25, 0.25), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        write_split(&split, &path).unwrap();
        let back = read_split(&path).unwrap();
        assert_eq!(split, back);
    }

    #[test]
    fn layout_parses_default_pattern() {
        let layout = LayoutSpec::default();
        let (p, v, l, c) = layout.parse_stem("p017_MLO_LEFT_malignant_3").unwrap();
        assert_eq!(p, "p017");
        assert_eq!(v, View::Mlo);
        assert_eq!(l, Laterality::Left);
        assert_eq!(c, Label::Malignant);
        assert!(layout.parse_stem("oddball.txt").is_none());
    }

    #[test]
    fn benign_without_callback_maps_to_benign() {
        assert_eq!(
            "benign_without_callback".parse::<Label>().unwrap(),
            Label::Benign
        );
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        fn arb_manifest() -> impl Strategy<Value = DatasetManifest> {
            // 5..40 patients, 1..6 masses each, mixed labels
            prop::collection::vec(prop::collection::vec(prop::bool::ANY, 1..6), 5..40).prop_map(
                |patients| {
                    let spec: Vec<(String, Vec<Label>)> = patients
                        .into_iter()
                        .enumerate()
                        .map(|(i, masses)| {
                            (
                                format!("p{i:03}"),
                                masses
                                    .into_iter()
                                    .map(|m| if m { Label::Malignant } else { Label::Benign })
                                    .collect(),
                            )
                        })
                        .collect();
                    let as_refs: Vec<(&str, &[Label])> = spec
                        .iter()
                        .map(|(p, l)| (p.as_str(), l.as_slice()))
                        .collect();
                    synthetic_manifest(&as_refs)
                },
            )
        }

        proptest! {
            #[test]
            fn split_invariants_hold(manifest in arb_manifest(), seed in 0u64..1000) {
                let has_benign = manifest.records.iter().any(|r| r.label == Label::Benign);
                let has_malignant = manifest.records.iter().any(|r| r.label == Label::Malignant);
                match split_by_patient(&manifest, (0.8, 0.1, 0.1), seed) {
                    Ok(split) => check_invariants(&manifest, &split),
                    // only a single-class corpus may fail
                    Err(Error::BalanceUnattainable { .. }) =>
                        prop_assert!(!(has_benign && has_malignant)),
                    Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
                }
            }
        }
    }
}
