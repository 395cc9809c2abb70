//! Synthetic corpora and replay bundles for tests, benchmarks and demos.
//!
//! Images are small scenes: a tinted background whose warmth leans with the
//! gender label, a standing person box, and a handful of colored objects
//! whose categories also lean with gender. Every fourth record carries an
//! elliptical person mask. Replay tables come from [`SyntheticModel`]s
//! applied to the original and perturbed images.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::adapters::{
    builtin_retrieval_prompts, builtin_vqa_prompts, image_warmth, PromptSet, Response, ResponseKey, ResponseTable,
    SyntheticModel,
};
use crate::corpus::{self, BBox, Dataset, GenderLabel, ImageRecord, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::imaging::{Image, Mask};
use crate::perturb::{condition_id, perturb_image, person_region, FeatureKind, PerturbationSpec, Strength};
use crate::seed::{derived_rng, SeedPart};
use crate::synthlab::ResponseWeights;

const MAN_OBJECTS: [&str; 3] = ["tie", "laptop", "bicycle"];
const WOMAN_OBJECTS: [&str; 3] = ["handbag", "cup", "umbrella"];

fn object_color(category: &str) -> [u8; 3] {
    match category {
        "tie" => [30, 30, 120],
        "laptop" => [90, 90, 90],
        "bicycle" => [200, 40, 40],
        "handbag" => [150, 60, 150],
        "cup" => [240, 240, 230],
        "umbrella" => [20, 140, 60],
        _ => [128, 128, 128],
    }
}

pub const FIXTURE_SIZE: usize = 50;
pub const FIXTURE_SIDE: u32 = 64;

/// Draws one record's scene. Returns the image, its record (with a
/// relative path) and the person mask when the record has one.
fn scene(i: usize, side: u32, seed: u64) -> (Image, ImageRecord, Option<Mask>) {
    let mut rng = derived_rng(&[SeedPart::Str("fixture-scene"), SeedPart::U64(seed), SeedPart::U64(i as u64)]);
    let gender = if i.is_multiple_of(2) { GenderLabel::Woman } else { GenderLabel::Man };
    let image_id = format!("img{i:04}");
    let tint: f64 = match gender {
        GenderLabel::Man => rng.random_range(0.45..0.95),
        GenderLabel::Woman => rng.random_range(0.05..0.55),
    };
    let mut noise = Vec::with_capacity((side * side) as usize);
    for _ in 0..side * side {
        noise.push(rng.random_range(-10i32..=10));
    }
    let mut img = Image::from_fn(side, side, |x, y| {
        let n = noise[(y * side + x) as usize];
        let r = 60.0 + 150.0 * tint;
        let b = 60.0 + 150.0 * (1.0 - tint);
        let g = 70.0 + 80.0 * y as f64 / side as f64;
        let c = |v: f64| (v as i32 + n).clamp(0, 255) as u8;
        [c(r), c(g), c(b)]
    });

    let mut objects = Vec::new();
    let own = if gender == GenderLabel::Man { MAN_OBJECTS } else { WOMAN_OBJECTS };
    let other = if gender == GenderLabel::Man { WOMAN_OBJECTS } else { MAN_OBJECTS };
    for _ in 0..rng.random_range(4..=8) {
        let pool = if rng.random_bool(0.75) { own } else { other };
        let category = pool[rng.random_range(0..pool.len())];
        let (w, h) = (rng.random_range(6..=14), rng.random_range(6..=14));
        let bbox = BBox::new(rng.random_range(0..side - w), rng.random_range(0..side - h), w, h);
        let color = object_color(category);
        for y in bbox.y..bbox.y + bbox.h {
            for x in bbox.x..bbox.x + bbox.w {
                img.set_pixel(x, y, color);
            }
        }
        objects.push(ObjectAnnotation {
            category: category.to_string(),
            bbox,
            is_person: false,
        });
    }

    let (pw, ph) = (rng.random_range(18..=28), rng.random_range(34..=50));
    let person_bbox = BBox::new(rng.random_range(0..side - pw), side - ph, pw, ph);
    let shirt = [rng.random_range(40..200u8), rng.random_range(40..200u8), rng.random_range(40..200u8)];
    let skin = [rng.random_range(150..230u8), rng.random_range(110..170u8), rng.random_range(80..140u8)];
    for y in person_bbox.y..person_bbox.y + ph {
        for x in person_bbox.x..person_bbox.x + pw {
            let head = y < person_bbox.y + ph / 3;
            img.set_pixel(x, y, if head { skin } else { shirt });
        }
    }
    objects.push(ObjectAnnotation {
        category: "person".into(),
        bbox: person_bbox,
        is_person: true,
    });

    let mask = (i % 4 == 3).then(|| {
        let (cx, cy) = (person_bbox.x as f64 + pw as f64 / 2.0, person_bbox.y as f64 + ph as f64 / 2.0);
        let (rx, ry) = (pw as f64 / 2.0, ph as f64 / 2.0);
        Mask::from_fn(side, side, |x, y| {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            dx * dx + dy * dy <= 1.0
        })
    });
    let record = ImageRecord {
        path: PathBuf::from("images").join(format!("{image_id}.png")),
        person_mask: mask
            .as_ref()
            .map(|_| PathBuf::from("masks").join(format!("{image_id}.png"))),
        image_id,
        gender,
        person_bbox,
        objects,
        provenance: None,
    };
    (img, record, mask)
}

/// Writes `n` synthetic images (with masks) and `manifest.jsonl` into
/// `dir`, and returns the loaded manifest.
pub fn write_corpus(dir: &Path, n: usize, side: u32, seed: u64) -> Result<Dataset> {
    if side < 56 {
        return Err(Error::invalid("synthetic scenes need a side of at least 56 pixels"));
    }
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let (img, rec, mask) = scene(i, side, seed);
            img.save_png(&dir.join(&rec.path))?;
            if let (Some(m), Some(p)) = (mask, &rec.person_mask) {
                m.save_png(&dir.join(p))?;
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        name: "manifest".into(),
        base_dir: dir.to_path_buf(),
        records,
    };
    let path = dir.join("manifest.jsonl");
    corpus::write_manifest(&ds, &path)?;
    corpus::load_manifest(&path)
}

/// Models whose answers the fixture replays: two VQA models and two
/// retrieval models, each with and without reliance on image warmth.
/// Retrieval scores carry wide noise so the top of a 50-image ranking is
/// not all one gender.
pub fn fixture_models(seed: u64) -> (Vec<SyntheticModel>, Vec<SyntheticModel>) {
    let m = |name: &str, w_g, w_b, bias| SyntheticModel::new(name, ResponseWeights { w_g, w_b, bias }, seed);
    let noisy = |mut model: SyntheticModel| {
        model.score_noise = 3.0;
        model
    };
    (
        vec![m("vqa-warm", 0.8, 3.0, -1.5), m("vqa-plain", 0.6, 0.0, -0.3)],
        vec![
            noisy(m("clip-warm", 0.3, 4.0, -2.0)),
            noisy(m("clip-plain", 0.6, 0.2, 0.0)),
        ],
    )
}

fn subset(set: PromptSet, ids: &[&str]) -> PromptSet {
    let prompts = set.prompts.into_iter().filter(|p| ids.contains(&p.prompt_id.as_str())).collect();
    PromptSet::new(set.name, prompts).expect("subset of a valid set")
}

/// The prompt subsets used by the fixture.
pub fn fixture_prompts() -> (PromptSet, PromptSet) {
    (
        subset(builtin_vqa_prompts(), &["personality_00", "personality_03", "skill_00", "occupation_02"]),
        subset(
            builtin_retrieval_prompts(),
            &["adjective_01", "adjective_04", "retrieval_occupation_01", "retrieval_occupation_03"],
        ),
    )
}

/// Responses of `models` over the original images and every perturbation
/// condition, with perturbations drawn from `perturb_seed`.
pub fn replay_tables(
    ds: &Dataset,
    models: &[SyntheticModel],
    prompts: &PromptSet,
    perturb_seed: u64,
) -> Result<Vec<ResponseTable>> {
    let mut conditions: Vec<Option<PerturbationSpec>> = vec![None];
    for f in FeatureKind::ALL {
        for s in Strength::ALL {
            conditions.push(Some(PerturbationSpec::new(f, s, perturb_seed)));
        }
    }
    // warmth[c][r] for condition c and record r.
    let warmth = conditions
        .par_iter()
        .map(|spec| {
            ds.records
                .par_iter()
                .map(|r| {
                    let img = Image::load(&ds.image_path(r))?;
                    let img = match spec {
                        None => img,
                        Some(s) => perturb_image(s, r, &img, || person_region(ds, r))?.image,
                    };
                    Ok(image_warmth(&img))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let modality = prompts.modality()?;
    let mut tables = Vec::new();
    for m in models {
        let mut t = ResponseTable::new(&m.name);
        for (spec, ws) in conditions.iter().zip(&warmth) {
            let cond = spec.map_or_else(|| "orig".to_string(), |s| condition_id(s.feature, s.strength));
            for (r, &b) in ds.records.iter().zip(ws) {
                for p in &prompts.prompts {
                    let value = match modality {
                        crate::adapters::Modality::Vqa => Response::Answer(m.answer(&r.image_id, r.gender, b, &p.prompt_id)),
                        crate::adapters::Modality::Retrieval => {
                            Response::Score(m.score(&r.image_id, r.gender, b, &p.prompt_id))
                        }
                    };
                    t.insert(ResponseKey::new(&r.image_id, &cond, &p.prompt_id), value)?;
                }
            }
        }
        tables.push(t);
    }
    Ok(tables)
}

/// Writes the 50-image replay bundle: corpus, prompt files and replay
/// tables for the fixture models.
pub fn write_fixture(dir: &Path, seed: u64) -> Result<Dataset> {
    let ds = write_corpus(dir, FIXTURE_SIZE, FIXTURE_SIDE, seed)?;
    let (vqa, retrieval) = fixture_prompts();
    fsutil::write_atomic(&dir.join("prompts").join("vqa.jsonl"), vqa.to_jsonl().as_bytes())?;
    fsutil::write_atomic(&dir.join("prompts").join("retrieval.jsonl"), retrieval.to_jsonl().as_bytes())?;
    let (vqa_models, retrieval_models) = fixture_models(seed);
    let mut tables = replay_tables(&ds, &vqa_models, &vqa, seed)?;
    tables.extend(replay_tables(&ds, &retrieval_models, &retrieval, seed)?);
    for t in tables {
        t.save(&dir.join("replay").join(format!("{}.jsonl", t.model_name)))?;
    }
    Ok(ds)
}
