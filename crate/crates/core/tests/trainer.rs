use std::fs;

use hscrf::data::{evaluate, read_conll, ColumnConfig, Split};
use hscrf::labels::{labels_from_segmentation, validate_bioes, EntityLabelSet};
use hscrf::synth::{generate, SynthConfig};
use hscrf::train::{decode_conll, train, DecodeMode, Model, TrainConfig, Variant};
use hscrf::encoder::{Vocabulary, UNK};
use hscrf::Error;

fn small_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        epochs: 2,
        embedding_dim: 8,
        hidden_dim: 6,
        position_dim: 3,
        seed: 3,
        ..Default::default()
    }
}

fn small_corpus() -> hscrf::synth::SynthCorpora {
    generate(&SynthConfig {
        train: 60,
        dev: 15,
        test: 15,
        length_weights: [0.3, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1],
        ..Default::default()
    })
}

#[test]
fn identical_seeds_give_identical_logs() {
    let c = small_corpus();
    let run = || {
        let out = train(&small_config(Variant::Joint), &c.train, Some(&c.dev)).unwrap();
        out.log.iter().map(|r| r.to_json()).collect::<Vec<_>>().join("\n")
    };
    let a = run();
    assert_eq!(a, run());
    let other = train(
        &TrainConfig {
            seed: 4,
            ..small_config(Variant::Joint)
        },
        &c.train,
        Some(&c.dev),
    )
    .unwrap();
    assert_ne!(a, other.log.iter().map(|r| r.to_json()).collect::<Vec<_>>().join("\n"));
}

#[test]
fn semi_markov_variants_prune_and_crf_does_not() {
    let c = small_corpus();
    let long = c.train.sentences.iter().filter(|s| !s.gold.fits_lattice(6)).count();
    assert!(long > 0);
    let out = train(&small_config(Variant::Hscrf), &c.train, None).unwrap();
    assert_eq!(out.pruned, long);
    let out = train(&small_config(Variant::Crf), &c.train, None).unwrap();
    assert_eq!(out.pruned, 0);
    assert_eq!(out.log.len(), 2);
    assert!(out.log.iter().all(|r| r.dev_f1.is_none()));
}

#[test]
fn training_errors() {
    let c = small_corpus();
    let mut empty = c.train.clone();
    empty.sentences.clear();
    assert!(matches!(train(&small_config(Variant::Joint), &empty, None), Err(Error::Usage(_))));
    let bad = TrainConfig {
        max_segment_len: 0,
        ..small_config(Variant::Hscrf)
    };
    assert!(matches!(train(&bad, &c.train, None), Err(Error::Usage(_))));
}

#[test]
fn checkpoint_round_trip_preserves_decoding() {
    let c = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    for v in [Variant::Crf, Variant::Hscrf, Variant::ScrfBaseline, Variant::Joint] {
        let model = train(&small_config(v), &c.train, Some(&c.dev)).unwrap().model;
        let path = dir.path().join(format!("{v}.ckpt"));
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded, model);
        let mode = model.config.decode_mode();
        assert_eq!(loaded.predict(&c.test, mode).unwrap(), model.predict(&c.test, mode).unwrap());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let c = small_corpus();
    let model = train(&small_config(Variant::Crf), &c.train, None).unwrap().model;
    let bytes = model.to_bytes();
    assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Model::from_bytes(&bad), Err(Error::Checkpoint(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Model::from_bytes(&extra), Err(Error::Checkpoint(_))));
}

#[test]
fn decode_file_appends_legal_tags() {
    let c = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    fs::write(&input, format!("-DOCSTART- O\n\n{}", c.test.to_conll())).unwrap();
    let model = train(&small_config(Variant::Joint), &c.train, None).unwrap().model;

    let joint = decode_conll(&model, &input, DecodeMode::Joint).unwrap();
    assert_eq!(joint.traces.len(), c.test.len());
    assert_eq!(joint.predictions.len(), c.test.len());
    assert!(joint.conll.starts_with("-DOCSTART- O\n\n"));

    // The appended column reads back as a corpus equal to the predictions.
    let out = dir.path().join("out.txt");
    fs::write(&out, &joint.conll).unwrap();
    let cfg = ColumnConfig {
        labels: Some(model.labels.clone()),
        ..Default::default()
    };
    let back = read_conll(&out, Split::Test, &cfg).unwrap();
    for (s, p) in back.sentences.iter().zip(&joint.predictions) {
        assert_eq!(&s.gold, p);
        assert!(validate_bioes(&labels_from_segmentation(p, s.sentence.len()).unwrap()).is_valid());
    }

    let crf = decode_conll(&model, &input, DecodeMode::Crf).unwrap();
    assert!(crf.traces.is_empty());
    assert_eq!(crf.conll, decode_conll(&model, &input, DecodeMode::Crf).unwrap().conll);

    let hs = train(&small_config(Variant::Hscrf), &c.train, None).unwrap().model;
    assert!(matches!(decode_conll(&hs, &input, DecodeMode::Joint), Err(Error::Usage(_))));
}

#[test]
fn converged_model_reproduces_separable_training_data() {
    let c = generate(&SynthConfig {
        train: 500,
        dev: 0,
        test: 0,
        shared_rate: 0.0,
        noise_rate: 0.0,
        length_weights: [0.3, 0.3, 0.2, 0.1, 0.1, 0.0, 0.0],
        ..Default::default()
    });
    let config = TrainConfig {
        epochs: 30,
        embedding_dim: 16,
        hidden_dim: 16,
        dropout_rate: 0.0,
        learning_rate: 0.05,
        ..small_config(Variant::Joint)
    };
    let model = train(&config, &c.train, None).unwrap().model;
    let pred = model.predict(&c.train, DecodeMode::Joint).unwrap();
    let report = evaluate(&c.train, &pred).unwrap();
    assert_eq!(report.f1, 1.0, "{}", report.to_table());
}

#[test]
fn corpus_labels_must_match_model() {
    let c = small_corpus();
    let model = train(&small_config(Variant::Crf), &c.train, None).unwrap().model;
    let mut other = c.test.clone();
    other.labels = EntityLabelSet::new(["X", "Y", "Z", "W"]).unwrap();
    assert!(model.evaluate(&other, DecodeMode::Crf).is_err());
}

#[test]
fn singleton_replacement_trains_the_unknown_row() {
    let c = small_corpus();
    let config = TrainConfig {
        epochs: 1,
        ..small_config(Variant::Crf)
    };
    let vocab = Vocabulary::build(c.train.sentences.iter().map(|s| &s.sentence), config.min_count);
    let fresh = Model::new(config.clone(), c.train.labels.clone(), vocab).unwrap();
    let unk = |m: &Model| m.encoder.params.embedding.row(UNK).to_vec();
    let off = train(&TrainConfig { unk_rate: 0.0, ..config.clone() }, &c.train, None).unwrap().model;
    assert_eq!(unk(&off), unk(&fresh));
    let on = train(&TrainConfig { unk_rate: 1.0, ..config }, &c.train, None).unwrap().model;
    assert_ne!(unk(&on), unk(&fresh));
}
