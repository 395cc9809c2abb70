//! Benchmark manifests: loading, validation, gender balancing and splits.
//!
//! A manifest is line-delimited JSON, one [`ImageRecord`] per line. Paths in a
//! manifest resolve relative to the manifest's own directory. Image pixels are
//! never decoded at load time; only the header is read to clamp boxes.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::perturb::{FeatureKind, Strength};
use crate::seed::{derived_rng, SeedPart};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenderLabel {
    Woman,
    Man,
}

impl GenderLabel {
    pub const ALL: [GenderLabel; 2] = [GenderLabel::Woman, GenderLabel::Man];

    /// Class index used by the probe: woman = 0, man = 1.
    pub fn index(self) -> usize {
        match self {
            GenderLabel::Woman => 0,
            GenderLabel::Man => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(GenderLabel::Woman),
            1 => Some(GenderLabel::Man),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            GenderLabel::Woman => GenderLabel::Man,
            GenderLabel::Man => GenderLabel::Woman,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GenderLabel::Woman => "woman",
            GenderLabel::Man => "man",
        }
    }
}

impl fmt::Display for GenderLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned pixel box, top-left origin. Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", try_from = "[i64; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x
            && py >= self.y
            && (px as u64) < self.x as u64 + self.w as u64
            && (py as u64) < self.y as u64 + self.h as u64
    }

    /// Intersection with a `width x height` image, or `None` when empty.
    pub fn clip_to(&self, width: u32, height: u32) -> Option<BBox> {
        clip_raw(
            [self.x as i64, self.y as i64, self.w as i64, self.h as i64],
            width,
            height,
        )
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = String;

    fn try_from([x, y, w, h]: [i64; 4]) -> Result<Self, Self::Error> {
        if w <= 0 || h <= 0 {
            return Err(format!("bbox extents must be positive, got w={w} h={h}"));
        }
        let ok = |v: i64| u32::try_from(v).map_err(|_| format!("bbox component {v} out of range"));
        Ok(BBox {
            x: ok(x)?,
            y: ok(y)?,
            w: ok(w)?,
            h: ok(h)?,
        })
    }
}

fn clip_raw([x, y, w, h]: [i64; 4], width: u32, height: u32) -> Option<BBox> {
    let x0 = x.max(0);
    let y0 = y.max(0);
    let x1 = (x + w).min(width as i64);
    let y1 = (y + h).min(height as i64);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some(BBox {
        x: x0 as u32,
        y: y0 as u32,
        w: (x1 - x0) as u32,
        h: (y1 - y0) as u32,
    })
}

/// Minimum fraction of a box that must lie inside the image for it to be
/// clamped rather than rejected.
pub const CLAMP_MIN_OVERLAP: f64 = 0.5;

/// Validates a raw box against image bounds, clamping partially outside boxes.
pub fn clamp_bbox(raw: [i64; 4], dims: Option<(u32, u32)>) -> Result<BBox, String> {
    let [_, _, w, h] = raw;
    if w <= 0 || h <= 0 {
        return Err(format!("bbox extents must be positive, got w={w} h={h}"));
    }
    let Some((width, height)) = dims else {
        return BBox::try_from(raw);
    };
    let area = (w as f64) * (h as f64);
    match clip_raw(raw, width, height) {
        Some(clipped) if clipped.area() as f64 >= CLAMP_MIN_OVERLAP * area => Ok(clipped),
        Some(clipped) => Err(format!(
            "bbox {raw:?} overlaps the {width}x{height} image by only {:.1}%",
            100.0 * clipped.area() as f64 / area
        )),
        None => Err(format!("bbox {raw:?} lies outside the {width}x{height} image")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub category: String,
    pub bbox: BBox,
    #[serde(default)]
    pub is_person: bool,
}

/// Records which intervention produced a perturbed record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source_image_id: String,
    pub feature: FeatureKind,
    pub strength: Strength,
    pub global_seed: u64,
    pub masked_object_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    /// Path as written in the manifest (relative to the manifest directory).
    pub path: PathBuf,
    pub gender: GenderLabel,
    pub person_bbox: BBox,
    pub person_mask: Option<PathBuf>,
    pub objects: Vec<ObjectAnnotation>,
    pub provenance: Option<Provenance>,
}

impl ImageRecord {
    /// Objects that may be masked: everything except persons.
    pub fn non_person_objects(&self) -> impl Iterator<Item = (usize, &ObjectAnnotation)> {
        self.objects.iter().enumerate().filter(|(_, o)| !o.is_person)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Directory that relative record paths resolve against.
    pub base_dir: PathBuf,
    pub records: Vec<ImageRecord>,
}

/// One manifest line, as it appears on disk.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    image_id: String,
    path: PathBuf,
    gender: GenderLabel,
    person_bbox: [i64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    person_mask: Option<PathBuf>,
    #[serde(default)]
    objects: Vec<ObjectLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<FeatureKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strength: Option<Strength>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masked_object_ids: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectLine {
    category: String,
    bbox: [i64; 4],
    #[serde(default)]
    is_person: bool,
}

impl From<&ImageRecord> for RecordLine {
    fn from(r: &ImageRecord) -> Self {
        let raw = |b: BBox| [b.x as i64, b.y as i64, b.w as i64, b.h as i64];
        let prov = r.provenance.as_ref();
        RecordLine {
            image_id: r.image_id.clone(),
            path: r.path.clone(),
            gender: r.gender,
            person_bbox: raw(r.person_bbox),
            person_mask: r.person_mask.clone(),
            objects: r
                .objects
                .iter()
                .map(|o| ObjectLine {
                    category: o.category.clone(),
                    bbox: raw(o.bbox),
                    is_person: o.is_person,
                })
                .collect(),
            source_image_id: prov.map(|p| p.source_image_id.clone()),
            feature: prov.map(|p| p.feature),
            strength: prov.map(|p| p.strength),
            global_seed: prov.map(|p| p.global_seed),
            masked_object_ids: prov.map(|p| p.masked_object_ids.clone()),
        }
    }
}

impl RecordLine {
    fn into_record(self, dims: Option<(u32, u32)>) -> Result<ImageRecord, String> {
        if self.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        let person_bbox =
            clamp_bbox(self.person_bbox, dims).map_err(|e| format!("person_bbox: {e}"))?;
        let mut objects = Vec::with_capacity(self.objects.len());
        for (i, o) in self.objects.into_iter().enumerate() {
            if o.category.trim().is_empty() {
                return Err(format!("object {i}: empty category"));
            }
            let bbox = clamp_bbox(o.bbox, dims).map_err(|e| format!("object {i}: {e}"))?;
            objects.push(ObjectAnnotation {
                category: o.category,
                bbox,
                is_person: o.is_person,
            });
        }
        let provenance = match (self.source_image_id, self.feature, self.strength, self.global_seed) {
            (Some(source_image_id), Some(feature), Some(strength), Some(global_seed)) => {
                Some(Provenance {
                    source_image_id,
                    feature,
                    strength,
                    global_seed,
                    masked_object_ids: self.masked_object_ids.unwrap_or_default(),
                })
            }
            (None, None, None, None) => None,
            _ => return Err("incomplete perturbation provenance fields".into()),
        };
        Ok(ImageRecord {
            image_id: self.image_id,
            path: self.path,
            gender: self.gender,
            person_bbox,
            person_mask: self.person_mask,
            objects,
            provenance,
        })
    }
}

impl Dataset {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.resolve(&record.path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(woman, man)` record counts.
    pub fn gender_counts(&self) -> (usize, usize) {
        let women = self.records.iter().filter(|r| r.gender == GenderLabel::Woman).count();
        (women, self.records.len() - women)
    }

    pub fn with_records(&self, records: Vec<ImageRecord>) -> Dataset {
        Dataset {
            name: self.name.clone(),
            base_dir: self.base_dir.clone(),
            records,
        }
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Serializes the records in manifest format (one JSON object per line).
    pub fn to_manifest_string(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            // RecordLine contains only plain data; serialization cannot fail.
            out.push_str(&serde_json::to_string(&RecordLine::from(r)).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Loads and validates a manifest. Record order follows the file.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fsutil::read_to_string(path)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    parse_manifest(&text, &name, &base_dir, path)
}

/// Parses manifest text. `origin` is only used in error messages.
pub fn parse_manifest(text: &str, name: &str, base_dir: &Path, origin: &Path) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: origin.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let dims = image_dims(&base_dir.join(&raw.path));
        let image_id = raw.image_id.clone();
        let record = raw.into_record(dims).map_err(|message| Error::Manifest {
            path: origin.to_path_buf(),
            line: line_no,
            message: format!("image `{image_id}`: {message}"),
        })?;
        if !seen.insert(record.image_id.clone()) {
            return Err(Error::DuplicateImageId(record.image_id));
        }
        records.push(record);
    }
    Ok(Dataset {
        name: name.to_string(),
        base_dir: base_dir.to_path_buf(),
        records,
    })
}

fn image_dims(path: &Path) -> Option<(u32, u32)> {
    match image::image_dimensions(path) {
        Ok(d) => Some(d),
        Err(e) => {
            log::warn!("cannot read header of {}: {e}; bbox clamping skipped", path.display());
            None
        }
    }
}

pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, ds.to_manifest_string().as_bytes())
}

/// Subsamples the majority gender (uniformly, without replacement) down to
/// the minority count. The minority is kept whole; output keeps input order.
pub fn balance_by_gender(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let (women, men) = ds.gender_counts();
    if women == 0 || men == 0 {
        return Err(Error::invalid(format!(
            "dataset `{}` lacks a gender (woman={women}, man={men})",
            ds.name
        )));
    }
    if women == men {
        return Ok(ds.clone());
    }
    let (majority, keep) = if women > men {
        (GenderLabel::Woman, men)
    } else {
        (GenderLabel::Man, women)
    };
    let majority_positions: Vec<usize> = ds
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.gender == majority)
        .map(|(i, _)| i)
        .collect();
    let mut rng = derived_rng(&[SeedPart::Str("balance"), SeedPart::U64(seed)]);
    let chosen = index::sample(&mut rng, majority_positions.len(), keep);
    let mut keep_mask = vec![false; ds.records.len()];
    for (i, r) in ds.records.iter().enumerate() {
        if r.gender != majority {
            keep_mask[i] = true;
        }
    }
    for c in chosen.iter() {
        keep_mask[majority_positions[c]] = true;
    }
    let records = ds
        .records
        .iter()
        .zip(&keep_mask)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    Ok(ds.with_records(records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Stratified 8:1:1 split. Validation and test each get `floor(n / 10)`
/// records; training gets the rest. Each split keeps input order.
pub fn split(ds: &Dataset, seed: u64) -> Result<Split> {
    let n = ds.records.len();
    if n < 10 {
        return Err(Error::invalid(format!(
            "dataset `{}` has {n} records; at least 10 are needed for an 8:1:1 split",
            ds.name
        )));
    }
    let held_out = n / 10;
    let mut rng = derived_rng(&[SeedPart::Str("split"), SeedPart::U64(seed)]);
    let mut groups: Vec<Vec<usize>> = GenderLabel::ALL
        .iter()
        .map(|g| {
            ds.records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.gender == *g)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    for g in &mut groups {
        g.shuffle(&mut rng);
    }

    // Interleave the shuffled groups proportionally so that every contiguous
    // chunk carries the input gender ratio (within one record).
    let mut order = Vec::with_capacity(n);
    let mut taken = [0usize; 2];
    while order.len() < n {
        let pick = (0..2)
            .filter(|&g| taken[g] < groups[g].len())
            .min_by(|&a, &b| {
                let fa = (taken[a] + 1) as f64 / groups[a].len() as f64;
                let fb = (taken[b] + 1) as f64 / groups[b].len() as f64;
                fa.total_cmp(&fb)
            })
            .expect("records remain");
        order.push(groups[pick][taken[pick]]);
        taken[pick] += 1;
    }

    let mut assignment = vec![0u8; n];
    for &i in &order[..held_out] {
        assignment[i] = 1;
    }
    for &i in &order[held_out..2 * held_out] {
        assignment[i] = 2;
    }
    let pick = |which: u8| {
        ds.with_records(
            ds.records
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == which)
                .map(|(r, _)| r.clone())
                .collect(),
        )
    };
    Ok(Split {
        train: pick(0),
        val: pick(1),
        test: pick(2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, gender: GenderLabel) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            path: format!("{id}.png").into(),
            gender,
            person_bbox: BBox::new(0, 0, 4, 4),
            person_mask: None,
            objects: vec![],
            provenance: None,
        }
    }

    pub(crate) fn dataset(women: usize, men: usize) -> Dataset {
        let mut records = Vec::new();
        for i in 0..women {
            records.push(rec(&format!("w{i:05}"), GenderLabel::Woman));
        }
        for i in 0..men {
            records.push(rec(&format!("m{i:05}"), GenderLabel::Man));
        }
        Dataset {
            name: "t".into(),
            base_dir: PathBuf::new(),
            records,
        }
    }

    fn parse(text: &str) -> Result<Dataset> {
        parse_manifest(text, "t", Path::new("/nonexistent"), Path::new("t.jsonl"))
    }

    #[test]
    fn three_line_manifest_in_file_order() {
        let text = r#"{"image_id":"a","path":"a.png","gender":"woman","person_bbox":[0,0,5,5],"objects":[]}
{"image_id":"b","path":"b.png","gender":"man","person_bbox":[1,1,5,5],"objects":[{"category":"dog","bbox":[0,0,2,2],"is_person":false}]}
{"image_id":"c","path":"c.png","gender":"woman","person_bbox":[0,0,5,5],"objects":[]}
"#;
        let ds = parse(text).unwrap();
        let ids: Vec<_> = ds.records.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(ds.gender_counts(), (2, 1));
        assert_eq!(ds.records[1].objects[0].category, "dog");
    }

    #[test]
    fn duplicate_id_is_named() {
        let line = r#"{"image_id":"dup","path":"a.png","gender":"woman","person_bbox":[0,0,5,5]}"#;
        let err = parse(&format!("{line}\n{line}\n")).unwrap_err();
        assert!(err.to_string().contains("dup"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = r#"{"image_id":"a","path":"a.png","gender":"woman","person_bbox":[0,0,5,5]}
{"image_id":"b","path":"b.png","gender":"other","person_bbox":[0,0,5,5]}
"#;
        match parse(text).unwrap_err() {
            Error::Manifest { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn clamping_rule() {
        // 60% inside: clamped.
        assert_eq!(clamp_bbox([-4, 0, 10, 10], Some((20, 20))).unwrap(), BBox::new(0, 0, 6, 10));
        // 40% inside: rejected.
        assert!(clamp_bbox([-6, 0, 10, 10], Some((20, 20))).is_err());
        // Exactly 50%: clamped.
        assert_eq!(clamp_bbox([15, 0, 10, 10], Some((20, 20))).unwrap(), BBox::new(15, 0, 5, 10));
        assert!(clamp_bbox([0, 0, 0, 3], Some((20, 20))).is_err());
        assert!(clamp_bbox([30, 30, 3, 3], Some((20, 20))).is_err());
    }

    #[test]
    fn serialize_round_trip() {
        let mut ds = dataset(2, 1);
        ds.records[0].objects.push(ObjectAnnotation {
            category: "chair".into(),
            bbox: BBox::new(1, 2, 3, 4),
            is_person: false,
        });
        ds.records[1].person_mask = Some("m.png".into());
        ds.records[2].provenance = Some(Provenance {
            source_image_id: "m00000".into(),
            feature: FeatureKind::Object,
            strength: Strength::Weak,
            global_seed: 9,
            masked_object_ids: vec![0],
        });
        let text = ds.to_manifest_string();
        let back = parse_manifest(&text, "t", &ds.base_dir, Path::new("t")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn balance_counts_match_minority() {
        let ds = dataset(1568, 3156);
        let b = balance_by_gender(&ds, 3).unwrap();
        assert_eq!(b.gender_counts(), (1568, 1568));
        let ids: HashSet<_> = ds.records.iter().map(|r| &r.image_id).collect();
        assert!(b.records.iter().all(|r| ids.contains(&r.image_id)));
    }

    #[test]
    fn balance_is_deterministic_and_identity_on_balanced() {
        let ds = dataset(30, 70);
        assert_eq!(balance_by_gender(&ds, 11).unwrap(), balance_by_gender(&ds, 11).unwrap());
        assert_ne!(balance_by_gender(&ds, 11).unwrap(), balance_by_gender(&ds, 12).unwrap());
        let even = dataset(20, 20);
        assert_eq!(balance_by_gender(&even, 5).unwrap(), even);
    }

    #[test]
    fn balance_requires_both_genders() {
        assert!(balance_by_gender(&dataset(5, 0), 0).is_err());
    }

    #[test]
    fn split_sizes() {
        for (n, expect) in [(100, (80, 10, 10)), (105, (85, 10, 10)), (10, (8, 1, 1)), (19, (17, 1, 1))] {
            let s = split(&dataset(n / 2, n - n / 2), 1).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), expect, "n={n}");
        }
        assert!(split(&dataset(4, 5), 1).is_err());
    }

    #[test]
    fn split_is_stratified() {
        for seed in 0..20 {
            let s = split(&dataset(50, 50), seed).unwrap();
            for part in [&s.train, &s.val, &s.test] {
                let (w, m) = part.gender_counts();
                assert!(w.abs_diff(m) <= 1, "seed {seed}: {w}/{m}");
            }
        }
    }
}
