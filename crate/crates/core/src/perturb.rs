//! Controlled feature interventions on benchmark images.
//!
//! Each perturbation changes one non-gender feature at one of three strengths
//! and never touches the gender label. Randomness is drawn from a per-image
//! generator derived from `(global_seed, image_id, feature, strength)`, so
//! the output for an image does not depend on processing order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Dataset, ImageRecord, ObjectAnnotation, Provenance};
use crate::error::{Error, Result};
use crate::imaging::{self, fill_region_in_place, gaussian_blur, HsvImage, Image, Mask, Region};
use crate::seed::{derived_rng, SeedPart};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Color,
    Lighting,
    Object,
    Background,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [
        FeatureKind::Color,
        FeatureKind::Lighting,
        FeatureKind::Object,
        FeatureKind::Background,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Color => "color",
            FeatureKind::Lighting => "lighting",
            FeatureKind::Object => "object",
            FeatureKind::Background => "background",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown feature `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Middle,
    Strong,
}

impl Strength {
    pub const ALL: [Strength; 3] = [Strength::Weak, Strength::Middle, Strength::Strong];

    pub fn as_str(self) -> &'static str {
        match self {
            Strength::Weak => "weak",
            Strength::Middle => "middle",
            Strength::Strong => "strong",
        }
    }

    /// Inclusive range of `|shift|` for hue/value shifts.
    pub fn shift_magnitudes(self) -> (i32, i32) {
        match self {
            Strength::Weak => (0, 10),
            Strength::Middle => (11, 20),
            Strength::Strong => (11, 30),
        }
    }

    /// Percentage of non-person objects masked.
    pub fn object_percent(self) -> u64 {
        match self {
            Strength::Weak => 10,
            Strength::Middle => 20,
            Strength::Strong => 30,
        }
    }

    pub fn blur_radius(self) -> f64 {
        match self {
            Strength::Weak => 10.0,
            Strength::Middle => 25.0,
            Strength::Strong => 40.0,
        }
    }
}

impl fmt::Display for Strength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strength::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown strength `{s}`")))
    }
}

/// Condition id of unperturbed images in response tables.
pub const ORIGINAL_CONDITION: &str = "orig";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub feature: FeatureKind,
    pub strength: Strength,
    pub global_seed: u64,
}

impl PerturbationSpec {
    pub fn new(feature: FeatureKind, strength: Strength, global_seed: u64) -> Self {
        PerturbationSpec {
            feature,
            strength,
            global_seed,
        }
    }

    /// `"{feature}:{strength}"`, the key used in response tables.
    pub fn condition_id(&self) -> String {
        condition_id(self.feature, self.strength)
    }

    pub fn image_seed(&self, image_id: &str) -> u64 {
        crate::seed::derive_seed(&self.seed_parts(image_id))
    }

    fn seed_parts<'a>(&self, image_id: &'a str) -> [SeedPart<'a>; 5] {
        [
            SeedPart::Str("perturb"),
            SeedPart::U64(self.global_seed),
            SeedPart::Str(image_id),
            SeedPart::Str(self.feature.as_str()),
            SeedPart::Str(self.strength.as_str()),
        ]
    }

    pub fn rng_for(&self, image_id: &str) -> rand_chacha::ChaCha8Rng {
        derived_rng(&self.seed_parts(image_id))
    }

    pub fn file_name(&self, image_id: &str) -> String {
        format!("{image_id}.{}.{}.png", self.feature, self.strength)
    }

    pub fn manifest_name(&self) -> String {
        format!("manifest.{}.{}.jsonl", self.feature, self.strength)
    }
}

pub fn condition_id(feature: FeatureKind, strength: Strength) -> String {
    format!("{feature}:{strength}")
}

/// Parses `"orig"` or `"feature:strength"`.
pub fn parse_condition(id: &str) -> Result<Option<(FeatureKind, Strength)>> {
    if id == ORIGINAL_CONDITION {
        return Ok(None);
    }
    let (f, s) = id
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("malformed condition id `{id}`")))?;
    Ok(Some((f.parse()?, s.parse()?)))
}

/// Draws one integer shift for the whole image.
///
/// Weak: uniform on `[-10, 10]`. Middle: `|δ|` uniform on `11..=20`.
/// Strong: `|δ|` uniform on `11..=30`. Sign is a fair coin for the latter two.
pub fn sample_shift<R: Rng + ?Sized>(strength: Strength, rng: &mut R) -> i32 {
    match strength {
        Strength::Weak => rng.random_range(-10..=10),
        _ => {
            let (lo, hi) = strength.shift_magnitudes();
            let mag = rng.random_range(lo..=hi);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        }
    }
}

/// Adds `delta` to every hue, modulo 256. S and V are copied untouched.
pub fn shift_hue(hsv: &mut HsvImage, delta: i32) {
    for px in hsv.pixels_mut().chunks_exact_mut(3) {
        px[0] = (px[0] as i32 + delta).rem_euclid(256) as u8;
    }
}

/// Adds `delta` to every value, clamped to `[0, 255]`. H and S untouched.
pub fn shift_value(hsv: &mut HsvImage, delta: i32) {
    for px in hsv.pixels_mut().chunks_exact_mut(3) {
        px[2] = (px[2] as i32 + delta).clamp(0, 255) as u8;
    }
}

pub fn apply_hue_shift(img: &Image, delta: i32) -> Image {
    let mut hsv = imaging::rgb_to_hsv(img);
    shift_hue(&mut hsv, delta);
    imaging::hsv_to_rgb(&hsv)
}

pub fn apply_value_shift(img: &Image, delta: i32) -> Image {
    let mut hsv = imaging::rgb_to_hsv(img);
    shift_value(&mut hsv, delta);
    imaging::hsv_to_rgb(&hsv)
}

/// Hue shift with one per-image draw. Returns the image and the shift used.
pub fn perturb_color<R: Rng + ?Sized>(img: &Image, strength: Strength, rng: &mut R) -> (Image, i32) {
    let delta = sample_shift(strength, rng);
    (apply_hue_shift(img, delta), delta)
}

/// Brightness shift with one per-image draw. Returns the image and the shift.
pub fn perturb_lighting<R: Rng + ?Sized>(
    img: &Image,
    strength: Strength,
    rng: &mut R,
) -> (Image, i32) {
    let delta = sample_shift(strength, rng);
    (apply_value_shift(img, delta), delta)
}

/// `round(percent * n / 100)` with ties to even, in exact integer arithmetic.
pub fn masked_count(n: usize, percent: u64) -> usize {
    let num = percent * n as u64;
    let (q, r) = (num / 100, num % 100);
    let up = match (2 * r).cmp(&100) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => q % 2 == 1,
        std::cmp::Ordering::Less => false,
    };
    (q + up as u64) as usize
}

/// Blacks out `round(fraction * N)` randomly chosen non-person objects.
///
/// Returns the image and the indices (into `objects`) of masked objects, in
/// ascending order. Persons are never chosen.
pub fn perturb_object<R: Rng + ?Sized>(
    img: &Image,
    objects: &[ObjectAnnotation],
    strength: Strength,
    rng: &mut R,
) -> (Image, Vec<usize>) {
    let candidates: Vec<usize> = objects
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.is_person)
        .map(|(i, _)| i)
        .collect();
    let m = masked_count(candidates.len(), strength.object_percent());
    if m == 0 {
        return (img.clone(), Vec::new());
    }
    let mut chosen: Vec<usize> = index::sample(rng, candidates.len(), m)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();
    let mut out = img.clone();
    for &i in &chosen {
        fill_region_in_place(&mut out, &Region::Box(objects[i].bbox), [0, 0, 0]);
    }
    (out, chosen)
}

/// Blurs the whole image, then restores the person region from the source.
pub fn perturb_background(img: &Image, person: &Region, strength: Strength) -> Image {
    let blurred = gaussian_blur(img, strength.blur_radius());
    composite(img, &blurred, person)
}

/// Takes `region` pixels from `keep`, everything else from `other`.
fn composite(keep: &Image, other: &Image, region: &Region) -> Image {
    Image::from_fn(keep.width(), keep.height(), |x, y| {
        if region.contains(x, y) {
            keep.pixel(x, y)
        } else {
            other.pixel(x, y)
        }
    })
}

/// The person region of a record: its mask if present, else its box.
pub fn person_region(ds: &Dataset, record: &ImageRecord) -> Result<Region> {
    match &record.person_mask {
        Some(p) => Ok(Region::Mask(Mask::load(&ds.resolve(p))?)),
        None => Ok(Region::Box(record.person_bbox)),
    }
}

/// Result of perturbing one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbedImage {
    pub image: Image,
    pub masked_object_ids: Vec<usize>,
}

/// Applies `spec` to one record's pixels using its per-image generator.
pub fn perturb_image(
    spec: &PerturbationSpec,
    record: &ImageRecord,
    img: &Image,
    person: impl FnOnce() -> Result<Region>,
) -> Result<PerturbedImage> {
    let mut rng = spec.rng_for(&record.image_id);
    let (image, masked_object_ids) = match spec.feature {
        FeatureKind::Color => (perturb_color(img, spec.strength, &mut rng).0, Vec::new()),
        FeatureKind::Lighting => (perturb_lighting(img, spec.strength, &mut rng).0, Vec::new()),
        FeatureKind::Object => perturb_object(img, &record.objects, spec.strength, &mut rng),
        FeatureKind::Background => (perturb_background(img, &person()?, spec.strength), Vec::new()),
    };
    Ok(PerturbedImage {
        image,
        masked_object_ids,
    })
}

/// Maximum tolerated share of unreadable images, in percent.
pub const MAX_SKIPPED_PERCENT: usize = 1;

/// Perturbs every record of `ds` into `out_dir` and writes the perturbed
/// manifest next to the images.
///
/// Images are written as `images/{image_id}.{feature}.{strength}.png`. The
/// returned dataset keeps ids, genders and annotations of the source.
/// Unreadable images are skipped and logged; more than 1% skipped fails.
pub fn perturb_dataset(
    ds: &Dataset,
    spec: &PerturbationSpec,
    out_dir: &Path,
    workers: usize,
) -> Result<Dataset> {
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let work = |record: &ImageRecord| -> Result<Option<ImageRecord>> {
        let src = ds.image_path(record);
        let img = match Image::load(&src) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping `{}`: {e}", record.image_id);
                return Ok(None);
            }
        };
        let out = perturb_image(spec, record, &img, || person_region(ds, record))?;
        let rel: PathBuf = Path::new("images").join(spec.file_name(&record.image_id));
        out.image.save_png(&out_dir.join(&rel))?;
        let person_mask = record.person_mask.as_ref().map(|p| relative_to(&ds.resolve(p), out_dir));
        Ok(Some(ImageRecord {
            path: rel,
            person_mask,
            provenance: Some(Provenance {
                source_image_id: record
                    .provenance
                    .as_ref()
                    .map_or(record.image_id.clone(), |p| p.source_image_id.clone()),
                feature: spec.feature,
                strength: spec.strength,
                global_seed: spec.global_seed,
                masked_object_ids: out.masked_object_ids,
            }),
            ..record.clone()
        }))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<Option<ImageRecord>>> =
        pool.install(|| ds.records.par_iter().map(work).collect());

    let mut records = Vec::with_capacity(ds.records.len());
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(rec) => records.push(rec),
            None => skipped += 1,
        }
    }
    if skipped * 100 > ds.records.len() * MAX_SKIPPED_PERCENT {
        return Err(Error::TooManySkipped {
            skipped,
            total: ds.records.len(),
        });
    }
    let perturbed = Dataset {
        name: format!("{}.{}.{}", ds.name, spec.feature, spec.strength),
        base_dir: out_dir.to_path_buf(),
        records,
    };
    corpus::write_manifest(&perturbed, &out_dir.join(spec.manifest_name()))?;
    Ok(perturbed)
}

/// Expresses `target` relative to `base` when both are absolute or both
/// relative; falls back to an absolute path otherwise.
fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
        }
    };
    let (t, b) = (abs(target), abs(base));
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    if common == 0 {
        return t;
    }
    let mut rel = PathBuf::new();
    for _ in common..bc.len() {
        rel.push("..");
    }
    for c in &tc[common..] {
        rel.push(c);
    }
    rel
}
