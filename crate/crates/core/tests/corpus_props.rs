use std::collections::HashSet;
use std::path::{Path, PathBuf};

use biasprobe_core::corpus::{
    balance_by_gender, parse_manifest, split, BBox, Dataset, GenderLabel, ImageRecord, ObjectAnnotation,
};
use proptest::prelude::*;

fn arb_bbox() -> impl Strategy<Value = BBox> {
    (0u32..200, 0u32..200, 1u32..100, 1u32..100).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn arb_record(i: usize) -> impl Strategy<Value = ImageRecord> {
    (
        any::<bool>(),
        arb_bbox(),
        proptest::option::of(Just(PathBuf::from(format!("masks/r{i}.png")))),
        proptest::collection::vec((prop::sample::select(vec!["cup", "tie", "dog", "person"]), arb_bbox()), 0..5),
    )
        .prop_map(move |(woman, person_bbox, person_mask, objs)| ImageRecord {
            image_id: format!("r{i}"),
            path: PathBuf::from(format!("missing/r{i}.png")),
            gender: if woman { GenderLabel::Woman } else { GenderLabel::Man },
            person_bbox,
            person_mask,
            objects: objs
                .into_iter()
                .map(|(c, bbox)| ObjectAnnotation {
                    category: c.to_string(),
                    bbox,
                    is_person: c == "person",
                })
                .collect(),
            provenance: None,
        })
}

fn arb_dataset(max: usize) -> impl Strategy<Value = Dataset> {
    (1..max).prop_flat_map(|n| {
        (0..n)
            .map(arb_record)
            .collect::<Vec<_>>()
            .prop_map(|records| Dataset {
                name: "prop".into(),
                base_dir: PathBuf::from("/nonexistent-base"),
                records,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trips(ds in arb_dataset(30)) {
        let text = ds.to_manifest_string();
        let back = parse_manifest(&text, "prop", &ds.base_dir, Path::new("prop.jsonl")).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_manifest_string(), text);
    }

    #[test]
    fn balancing_equalizes_and_keeps_the_minority(ds in arb_dataset(60), seed in any::<u64>()) {
        let (w, m) = ds.gender_counts();
        prop_assume!(w > 0 && m > 0);
        let b = balance_by_gender(&ds, seed).unwrap();
        let (bw, bm) = b.gender_counts();
        prop_assert_eq!(bw, w.min(m));
        prop_assert_eq!(bm, w.min(m));
        let minority = if w <= m { GenderLabel::Woman } else { GenderLabel::Man };
        let kept: HashSet<&str> = b.records.iter().map(|r| r.image_id.as_str()).collect();
        for r in ds.records.iter().filter(|r| r.gender == minority) {
            prop_assert!(kept.contains(r.image_id.as_str()));
        }
        // Input order is preserved.
        let positions: Vec<usize> = b
            .records
            .iter()
            .map(|r| ds.records.iter().position(|o| o.image_id == r.image_id).unwrap())
            .collect();
        prop_assert!(positions.windows(2).all(|p| p[0] < p[1]));
        prop_assert_eq!(balance_by_gender(&ds, seed).unwrap(), b);
    }

    #[test]
    fn split_partitions_with_held_out_tenths(ds in arb_dataset(60), seed in any::<u64>()) {
        prop_assume!(ds.len() >= 10);
        let s = split(&ds, seed).unwrap();
        let n = ds.len();
        prop_assert_eq!(s.val.len(), n / 10);
        prop_assert_eq!(s.test.len(), n / 10);
        prop_assert_eq!(s.train.len(), n - 2 * (n / 10));
        let mut ids: Vec<&str> = s
            .train
            .records
            .iter()
            .chain(&s.val.records)
            .chain(&s.test.records)
            .map(|r| r.image_id.as_str())
            .collect();
        ids.sort_unstable();
        let mut all: Vec<&str> = ds.records.iter().map(|r| r.image_id.as_str()).collect();
        all.sort_unstable();
        prop_assert_eq!(ids, all);
        prop_assert_eq!(split(&ds, seed).unwrap(), s);
    }
}

#[test]
fn duplicate_ids_are_rejected() {
    let line = r#"{"image_id":"a","path":"a.png","gender":"woman","person_bbox":[0,0,4,4]}"#;
    let text = format!("{line}\n{line}\n");
    let err = parse_manifest(&text, "dup", Path::new("."), Path::new("dup.jsonl")).unwrap_err();
    assert!(err.to_string().contains('a'), "{err}");
}

#[test]
fn small_datasets_cannot_split() {
    let ds = Dataset {
        name: "tiny".into(),
        base_dir: PathBuf::new(),
        records: Vec::new(),
    };
    assert!(split(&ds, 0).is_err());
}
