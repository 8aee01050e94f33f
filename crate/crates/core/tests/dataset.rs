use std::fs;

use proptest::prelude::*;

use hssl::dataset::{
    annotation_count, generate_synthetic, slice_volume, split_corpus, split_counts, subsample_annotations, synthesize,
    CorpusManifest, ImageRecord, Split, SynthSpec, TaskInfo, Volume,
};
use hssl::Error;

fn manifest_with_sizes(sizes: &[usize]) -> CorpusManifest {
    let tasks = (1..=sizes.len() as u32)
        .map(|id| TaskInfo { id, name: format!("task {id}"), num_classes: 1, group_id: 1, source_note: String::new() })
        .collect();
    let mut records = Vec::new();
    for (t, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            records.push(ImageRecord {
                id: format!("t{}-{i}", t + 1),
                image: format!("images/t{}-{i}.rvol", t + 1),
                mask: None,
                task_id: t as u32 + 1,
                group_id: 1,
                split: None,
                labeled: false,
            });
        }
    }
    CorpusManifest::new(tasks, records, ".".into()).unwrap()
}

#[test]
fn split_counts_follow_floor_rule() {
    assert_eq!(split_counts(100).unwrap(), (70, 10, 20));
    assert_eq!(split_counts(483).unwrap(), (339, 48, 96));
    assert_eq!(split_counts(3).unwrap(), (3, 0, 0));
    assert!(split_counts(2).is_err());
}

#[test]
fn annotation_count_examples() {
    assert_eq!(annotation_count(339, 0.05).unwrap(), 17);
    assert_eq!(annotation_count(10, 0.05).unwrap(), 1);
    assert_eq!(annotation_count(339, 1.0).unwrap(), 339);
    // exact half rounds up
    assert_eq!(annotation_count(5, 0.1).unwrap(), 1);
    assert_eq!(annotation_count(30, 0.05).unwrap(), 2);
    assert!(annotation_count(10, 0.0).is_err());
    assert!(annotation_count(10, 1.5).is_err());
}

#[test]
fn split_is_deterministic_and_rejects_tiny_tasks() {
    let m = manifest_with_sizes(&[50, 20]);
    let a = split_corpus(&m, 3).unwrap();
    let b = split_corpus(&m, 3).unwrap();
    assert_eq!(a, b);
    let c = split_corpus(&m, 4).unwrap();
    assert_ne!(a.records, c.records);
    assert!(split_corpus(&manifest_with_sizes(&[10, 2]), 0).is_err());
    // already tagged
    assert!(split_corpus(&a, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_every_task(sizes in prop::collection::vec(3usize..200, 1..5), seed in any::<u64>()) {
        let m = split_corpus(&manifest_with_sizes(&sizes), seed).unwrap();
        prop_assert_eq!(m.records.len(), sizes.iter().sum::<usize>());
        for (t, &n) in sizes.iter().enumerate() {
            let recs: Vec<_> = m.records_of(t as u32 + 1).collect();
            prop_assert_eq!(recs.len(), n);
            prop_assert!(recs.iter().all(|r| r.split.is_some()));
            let count = |s| recs.iter().filter(|r| r.split == Some(s)).count();
            prop_assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), split_counts(n).unwrap());
        }
    }

    #[test]
    fn labeled_subset_matches_formula(
        sizes in prop::collection::vec(3usize..300, 1..5),
        ratio in 0.001f64..=1.0,
        seed in any::<u64>(),
    ) {
        let split = split_corpus(&manifest_with_sizes(&sizes), seed).unwrap();
        let sub = subsample_annotations(&split, ratio, seed ^ 1).unwrap();
        prop_assert!(sub.records.iter().all(|r| !r.labeled || r.split == Some(Split::Train)));
        for t in 1..=sizes.len() as u32 {
            let train = sub.records_of(t).filter(|r| r.split == Some(Split::Train)).count();
            let labeled = sub.records_of(t).filter(|r| r.labeled).count();
            prop_assert_eq!(labeled, annotation_count(train, ratio).unwrap());
        }
        // splits untouched
        let tags = |m: &CorpusManifest| m.records.iter().map(|r| r.split).collect::<Vec<_>>();
        prop_assert_eq!(tags(&sub), tags(&split));
    }

    #[test]
    fn taxonomy_is_consistent(t in 1usize..9, g in 1usize..5) {
        prop_assume!(t >= g);
        if t.div_ceil(g) > 5 {
            prop_assert!(SynthSpec::new(t, g, 1, 32, 0).is_err());
            return Ok(());
        }
        let spec = SynthSpec::new(t, g, 1, 32, 0).unwrap();
        let tax = spec.taxonomy();
        prop_assert_eq!(tax.len(), t);
        let groups: std::collections::BTreeSet<u32> = tax.iter().map(|x| x.group_id).collect();
        prop_assert_eq!(groups.len(), g);
    }
}

#[test]
fn synthetic_corpus_is_byte_reproducible() {
    let spec = SynthSpec::new(4, 2, 3, 48, 0).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    assert_eq!(ma.num_tasks(), 4);
    assert_eq!(ma.num_groups(), 2);
    assert_eq!(ma.records.len(), 12);
    for r in &ma.records {
        for rel in [&r.image, r.mask.as_ref().unwrap()] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }
    assert_eq!(fs::read(a.path().join("manifest.jsonl")).unwrap(), fs::read(b.path().join("manifest.jsonl")).unwrap());
}

#[test]
fn synthetic_foreground_is_brighter_than_background() {
    let spec = SynthSpec::desk(0);
    for task in 1..=4u32 {
        let (mut fg, mut bg, mut nf, mut nb) = (0.0f64, 0.0f64, 0usize, 0usize);
        for i in 0..50 {
            let (img, mask) = synthesize(&spec, task, i).unwrap();
            for (&v, &m) in img.data.iter().zip(&mask.data) {
                if m == 1 {
                    fg += v as f64;
                    nf += 1;
                } else {
                    bg += v as f64;
                    nb += 1;
                }
            }
        }
        let gap = fg / nf as f64 - bg / nb as f64;
        assert!(gap > 0.1, "task {task}: gap {gap}");
    }
}

#[test]
fn distractors_brighten_the_background_only() {
    let plain = SynthSpec::new(4, 2, 4, 96, 0).unwrap();
    assert_eq!(plain.distractors, 0);
    let busy = SynthSpec { distractors: 2, ..plain.clone() };
    let mut brighter = 0;
    for task in 1..=4u32 {
        for i in 0..4 {
            let (a, ma) = synthesize(&plain, task, i).unwrap();
            let (b, mb) = synthesize(&busy, task, i).unwrap();
            assert_eq!(ma, mb);
            let bg = |img: &hssl::dataset::Image| -> f64 {
                img.data.iter().zip(&ma.data).filter(|(_, &m)| m == 0).map(|(&v, _)| v as f64).sum()
            };
            if bg(&b) > bg(&a) {
                brighter += 1;
            }
        }
    }
    assert!(brighter >= 14, "{brighter} of 16");
}

#[test]
fn tasks_in_a_group_share_texture_but_not_shape() {
    let spec = SynthSpec::desk(0);
    for a in &spec.tasks {
        for b in &spec.tasks {
            if a.group_id == b.group_id {
                assert_eq!(a.texture, b.texture);
            }
        }
    }
    assert!(spec.tasks.iter().enumerate().all(|(i, a)| spec.tasks[i + 1..]
        .iter()
        .all(|b| a.group_id != b.group_id || a.shape != b.shape)));
}

#[test]
fn manifest_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_synthetic(&SynthSpec::new(4, 2, 5, 32, 1).unwrap(), dir.path()).unwrap();
    let tagged = subsample_annotations(&split_corpus(&generated, 2).unwrap(), 0.5, 2).unwrap();
    let path = dir.path().join("tagged.jsonl");
    tagged.write(&path).unwrap();
    let back = CorpusManifest::load(&path).unwrap();
    assert_eq!(back.tasks, tagged.tasks);
    assert_eq!(back.records, tagged.records);
    back.write(dir.path().join("again.jsonl")).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("again.jsonl")).unwrap());
}

#[test]
fn manifest_rejects_out_of_range_task_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let header = r#"{"tasks":[{"id":1,"name":"a","num_classes":1,"group_id":1}]}"#;
    fs::write(&path, format!("{header}\n{{\"id\":\"x\",\"image\":\"x.rvol\",\"task_id\":9}}\n")).unwrap();
    let err = CorpusManifest::load(&path).unwrap_err();
    assert!(err.to_string().contains('x') || matches!(err, Error::Validation(_)), "{err}");

    fs::write(&path, format!("{header}\n{{\"id\":\"x\",\"image\":\"x.rvol\",\"task_id\":1}}\n")).unwrap();
    assert!(CorpusManifest::load(&path).is_err());

    fs::write(&path, format!("{header}\n")).unwrap();
    let empty = CorpusManifest::load(&path).unwrap();
    assert_eq!((empty.num_tasks(), empty.records.len()), (1, 0));
}

#[test]
fn reference_taxonomy_has_eight_tasks_in_four_groups() {
    let tax = CorpusManifest::reference_taxonomy();
    assert_eq!(tax.len(), 8);
    let groups: std::collections::BTreeSet<u32> = tax.iter().map(|t| t.group_id).collect();
    assert_eq!(groups.len(), 4);
}

#[test]
fn volumes_slice_and_normalize() {
    let data: Vec<f32> = (0..48).map(|v| v as f32).collect();
    let slices = slice_volume(&Volume::new([3, 4, 4], data).unwrap()).unwrap();
    assert_eq!(slices.len(), 3);
    for s in &slices {
        assert_eq!((s.height, s.width), (4, 4));
        assert_eq!(s.data[0], 0.0);
        assert_eq!(s.data[15], 1.0);
    }

    let mut ends = vec![0.0f32; 16];
    ends[0] = -100.0;
    ends[1] = 300.0;
    let s = &slice_volume(&Volume::new([1, 4, 4], ends).unwrap()).unwrap()[0];
    assert_eq!((s.data[0], s.data[1], s.data[2]), (0.0, 1.0, 0.25));

    let flat = slice_volume(&Volume::new([1, 2, 2], vec![7.0; 4]).unwrap()).unwrap();
    assert!(flat[0].data.iter().all(|&v| v == 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.rvol");
    let v = Volume::new([2, 3, 5], (0..30).map(|v| v as f32 * 0.5).collect()).unwrap();
    v.write(&path).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len(), 30 * 4);
    assert_eq!(Volume::read(&path).unwrap(), v);
    assert!(Volume::from_bytes([2, 3, 5], &[0u8; 7], &path).is_err());
}
