//! Feature-isolated inputs: each extractor keeps the information of exactly
//! one feature kind and discards the rest.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{BBox, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::imaging::{self, downsample_mean, fill_region, Image, Region};
use crate::perturb::FeatureKind;

pub const COLOR_GRID: (u32, u32) = (8, 8);
pub const LIGHTING_GRID: (u32, u32) = (8, 8);
pub const BACKGROUND_GRID: (u32, u32) = (16, 16);

pub const COLOR_LEN: usize = 8 * 8 * 3;
pub const LIGHTING_LEN: usize = 8 * 8;
pub const BACKGROUND_LEN: usize = 16 * 16 * 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Which HSV channels the lighting extractor averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightingChannels {
    /// Value only: 64 entries.
    #[default]
    ValueOnly,
    /// H, S and V per cell: 192 entries.
    AllHsv,
}

/// Ordered object-category vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    categories: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(categories: impl IntoIterator<Item = String>) -> Self {
        let categories: Vec<String> = categories
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index = categories.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Vocabulary { categories, index }
    }

    /// Sorted non-person categories of `ds` (normally the training split).
    pub fn from_dataset(ds: &Dataset) -> Self {
        Vocabulary::new(
            ds.records
                .iter()
                .flat_map(|r| r.non_person_objects().map(|(_, o)| o.category.clone())),
        )
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn position(&self, category: &str) -> Option<usize> {
        self.index.get(category).copied()
    }
}

fn require_min_size(img: &Image, grid: (u32, u32)) -> Result<()> {
    if img.width() < grid.0 || img.height() < grid.1 {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {}x{} feature grid",
            img.width(),
            img.height(),
            grid.0,
            grid.1
        )));
    }
    Ok(())
}

fn scaled(img: &Image) -> Vec<f64> {
    img.pixels().iter().map(|&p| p as f64 / 255.0).collect()
}

/// 8x8 mean-downsampled RGB, row-major, scaled to `[0, 1]`.
pub fn extract_color(img: &Image) -> Result<FeatureVector> {
    require_min_size(img, COLOR_GRID)?;
    Ok(FeatureVector {
        kind: FeatureKind::Color,
        values: scaled(&downsample_mean(img, COLOR_GRID)?),
    })
}

/// Per-cell mean brightness on an 8x8 grid, scaled to `[0, 1]`.
pub fn extract_lighting(img: &Image, channels: LightingChannels) -> Result<FeatureVector> {
    require_min_size(img, LIGHTING_GRID)?;
    let means = imaging::hsv_cell_means(&imaging::rgb_to_hsv(img), LIGHTING_GRID)?;
    let values = match channels {
        LightingChannels::ValueOnly => means.iter().map(|m| m[2] / 255.0).collect(),
        LightingChannels::AllHsv => means.iter().flat_map(|m| m.map(|c| c / 255.0)).collect(),
    };
    Ok(FeatureVector {
        kind: FeatureKind::Lighting,
        values,
    })
}

/// Multi-hot vector over `vocab` of the record's non-person objects.
///
/// Returns the vector and the number of object annotations whose category is
/// not in the vocabulary. Never reads pixels.
pub fn extract_object(record: &ImageRecord, vocab: &Vocabulary) -> Result<(FeatureVector, usize)> {
    if vocab.is_empty() {
        return Err(Error::invalid("empty object vocabulary"));
    }
    let mut values = vec![0.0; vocab.len()];
    let mut unknown = 0;
    for (_, obj) in record.non_person_objects() {
        match vocab.position(&obj.category) {
            Some(i) => values[i] = 1.0,
            None => unknown += 1,
        }
    }
    if unknown > 0 {
        log::debug!("`{}`: {unknown} object(s) outside vocabulary", record.image_id);
    }
    Ok((
        FeatureVector {
            kind: FeatureKind::Object,
            values,
        },
        unknown,
    ))
}

/// Blacks out the person box, then 16x16 mean-downsampled RGB in `[0, 1]`.
pub fn extract_background(img: &Image, person_bbox: &BBox) -> Result<FeatureVector> {
    require_min_size(img, BACKGROUND_GRID)?;
    let covered = person_bbox.clip_to(img.width(), img.height()).map_or(0, |c| c.area());
    if covered == img.width() as u64 * img.height() as u64 {
        log::warn!("person box covers the entire image; background vector is all zeros");
    }
    let masked = fill_region(img, &Region::Box(*person_bbox), [0, 0, 0]);
    Ok(FeatureVector {
        kind: FeatureKind::Background,
        values: scaled(&downsample_mean(&masked, BACKGROUND_GRID)?),
    })
}

/// Pixel-based extraction for one record. Object features need a vocabulary
/// and go through [`extract_object`] instead.
pub fn extract_pixels(
    kind: FeatureKind,
    record: &ImageRecord,
    img: &Image,
    lighting: LightingChannels,
) -> Result<FeatureVector> {
    match kind {
        FeatureKind::Color => extract_color(img),
        FeatureKind::Lighting => extract_lighting(img, lighting),
        FeatureKind::Background => extract_background(img, &record.person_bbox),
        FeatureKind::Object => Err(Error::invalid("object features are not pixel based")),
    }
}

/// One line of a feature dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDumpLine {
    pub image_id: String,
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

pub fn write_feature_dump(path: &Path, lines: &[FeatureDumpLine]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    fsutil::write_atomic(path, out.as_bytes())
}

pub fn read_feature_dump(path: &Path) -> Result<Vec<FeatureDumpLine>> {
    let text = fsutil::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
