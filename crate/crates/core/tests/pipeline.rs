use std::collections::HashSet;

use cclip_core::datagen::{export_lexicon, generate_classification_dataset, ClassificationDataset, SyntheticSpec};
use cclip_core::decompose::{decompose, CategoryLexicon};
use cclip_core::encoders::Factor;
use cclip_core::train::classify::{build_encoders, encoders_checkpoint, encoders_from_checkpoint, train_encoders};
use cclip_core::train::metrics::write_csv;
use cclip_core::train::{Checkpoint, TrainConfig, TrainMode};

fn data(cfg: &TrainConfig) -> ClassificationDataset {
    generate_classification_dataset(&cfg.data).unwrap()
}

fn lexicon(spec: &SyntheticSpec) -> CategoryLexicon {
    CategoryLexicon::new(spec.categories.iter()).unwrap()
}

#[test]
fn labeled_training_at_defaults_classifies_both_factors() {
    let cfg = TrainConfig::default();
    let ds = data(&cfg);
    let enc = build_encoders(&cfg, &ds.train).unwrap();
    let frozen = enc.frozen_checksum();
    let run = train_encoders(&cfg, enc, &ds.train, &ds.test, None).unwrap();
    assert_eq!(run.metrics.len(), cfg.epochs + 1);
    assert_eq!(run.encoders.frozen_checksum(), frozen);
    assert!(run.final_loss() < run.initial_loss());
    let last = run.metrics.last().unwrap();
    assert!(last.style_top1 >= 0.95, "style {}", last.style_top1);
    assert!(last.category_top1 >= 0.95, "category {}", last.category_top1);

    // Each encoder groups captions by its own factor: for an anchor caption,
    // a caption sharing the factor beats one sharing only the other factor.
    let spec = &cfg.data;
    for (factor, keep_style) in [(Factor::Style, true), (Factor::Category, false)] {
        let f = |s: usize, c: usize| run.encoders.encode_str(factor, &spec.caption(s, c)).unwrap();
        let (mut won, mut total) = (0, 0);
        for (s, c) in spec.cells() {
            for (s2, c2) in spec.cells() {
                if s2 == s || c2 == c {
                    continue;
                }
                let (same, other) = if keep_style {
                    (f(s, c2), f(s2, c))
                } else {
                    (f(s2, c), f(s, c2))
                };
                let a = f(s, c);
                won += (a.cosine(&same) > a.cosine(&other)) as usize;
                total += 1;
            }
        }
        assert!(won as f64 >= 0.9 * total as f64, "{factor:?}: {won}/{total}");
    }
}

#[test]
fn zero_epochs_leaves_the_initialization() {
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let ds = data(&cfg);
    let enc = build_encoders(&cfg, &ds.train).unwrap();
    let run = train_encoders(&cfg, enc.clone(), &ds.train, &ds.test, None).unwrap();
    assert_eq!(run.encoders.style, enc.style);
    assert_eq!(run.encoders.category, enc.category);
    assert_eq!(run.metrics.len(), 1);
}

#[test]
fn identical_runs_write_identical_metrics() {
    let cfg = TrainConfig {
        epochs: 3,
        shots: Some(8),
        ..TrainConfig::default()
    };
    let ds = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let enc = build_encoders(&cfg, &ds.train).unwrap();
        let run = train_encoders(&cfg, enc, &ds.train, &ds.test, None).unwrap();
        let path = dir.path().join(format!("m{i}.csv"));
        write_csv(&path, &run.metrics).unwrap();
        files.push(std::fs::read(path).unwrap());
    }
    assert_eq!(files[0], files[1]);

    let other = TrainConfig { seed: 1, ..cfg.clone() };
    let enc = build_encoders(&other, &ds.train).unwrap();
    let run = train_encoders(&other, enc, &ds.train, &ds.test, None).unwrap();
    let path = dir.path().join("other.csv");
    write_csv(&path, &run.metrics).unwrap();
    assert_ne!(std::fs::read(path).unwrap(), files[0]);
}

#[test]
fn trained_checkpoint_round_trips() {
    let cfg = TrainConfig {
        epochs: 2,
        shots: Some(4),
        ..TrainConfig::default()
    };
    let ds = data(&cfg);
    let enc = build_encoders(&cfg, &ds.train).unwrap();
    let run = train_encoders(&cfg, enc, &ds.train, &ds.test, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    encoders_checkpoint(&cfg, &run.encoders).save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let (cfg2, enc2) = encoders_from_checkpoint(&Checkpoint::load(&b).unwrap()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(enc2.frozen_checksum(), run.encoders.frozen_checksum());
    for (x, y) in enc2.style.tensors().iter().zip(run.encoders.style.tensors()) {
        // Adapter weights are stored in 32 bits.
        assert!(x.max_abs_diff(y) < 1e-6);
    }
}

#[test]
fn unlabeled_training_needs_a_lexicon_and_lowers_the_loss() {
    let cfg = TrainConfig {
        mode: TrainMode::Unlabeled,
        epochs: 5,
        shots: Some(16),
        ..TrainConfig::default()
    };
    let ds = data(&cfg);
    let enc = build_encoders(&cfg, &ds.train).unwrap();
    assert!(train_encoders(&cfg, enc.clone(), &ds.train, &ds.test, None).is_err());
    let run = train_encoders(&cfg, enc, &ds.train, &ds.test, Some(&lexicon(&cfg.data))).unwrap();
    assert!(run.final_loss() < run.initial_loss());
}

#[test]
fn generated_data_is_disjoint_balanced_and_decomposable() {
    let spec = SyntheticSpec::default();
    let ds = generate_classification_dataset(&spec).unwrap();
    assert_eq!(ds, generate_classification_dataset(&spec).unwrap());
    let train: HashSet<Vec<u64>> = ds
        .train
        .iter()
        .map(|s| s.grid.iter().map(|v| v.to_bits()).collect())
        .collect();
    assert!(ds
        .test
        .iter()
        .all(|s| !train.contains(&s.grid.iter().map(|v| v.to_bits()).collect::<Vec<_>>())));
    for (s, c) in spec.cells() {
        let n = ds.train.iter().filter(|x| (x.style, x.category) == (s, c)).count();
        assert_eq!(n, spec.train_per_cell);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lexicon.txt");
    export_lexicon(&spec, &path).unwrap();
    let lex = CategoryLexicon::load(&path).unwrap();
    assert_eq!(lex.nouns().count(), spec.num_categories());
    for s in ds.train.iter().chain(&ds.test) {
        assert_eq!(decompose(&s.caption, &lex).category_text, spec.categories[s.category]);
    }
}
