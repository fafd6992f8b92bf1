use std::collections::BTreeMap;

use inpaint_core::baseline::ConcatConfig;
use inpaint_core::corpus::{synth_corpus, Corpus, CorpusItem, SynthConfig};
use inpaint_core::correction::{Vocoder, VocoderKind};
use inpaint_core::dsp::{MelConfig, MelSpectrogram, Waveform};
use inpaint_core::embedding::{Siamese, SiameseConfig};
use inpaint_core::evaluation::*;
use inpaint_core::generator::{Generator, GeneratorConfig};
use inpaint_core::problem::WindowSpec;
use inpaint_core::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus() -> Corpus {
    let cfg = SynthConfig {
        min_frames: 5,
        max_frames: 8,
        silence_frames: 6,
        n_speakers: 6,
        mel: MelConfig {
            n_mels: 16,
            ..MelConfig::default()
        },
        ..SynthConfig::default()
    };
    synth_corpus(21, 14, &cfg).unwrap()
}

fn siamese() -> Siamese {
    Siamese::new(
        SiameseConfig {
            hidden: 6,
            embed_dim: 4,
            ..SiameseConfig::new(16)
        },
        1,
    )
    .unwrap()
}

fn generator(c: &Corpus) -> Generator {
    let cfg = GeneratorConfig {
        phoneme_embed_dim: 4,
        channels: [4, 4, 4, 4, 4],
        ..GeneratorConfig::new(16, c.inventory.clone(), c.mel_config)
    };
    Generator::new(cfg, 2).unwrap()
}

#[test]
fn hand_computed_metrics() {
    let b = MelSpectrogram::filled(2, 2, 1.0);
    let a = MelSpectrogram::filled(2, 2, 2.0);
    let m = spectral_metrics(&a, &b, None).unwrap();
    assert_eq!((m.l1, m.spectral_convergence), (1.0, 1.0));
    assert!(matches!(
        spectral_metrics(&a, &MelSpectrogram::filled(3, 2, 1.0), None),
        Err(Error::ShapeMismatch { .. })
    ));

    // only the region's frames enter the sums
    let mut a = MelSpectrogram::filled(6, 2, 1.0);
    let b = MelSpectrogram::filled(6, 2, 1.0);
    a.frame_mut(0).fill(9.0);
    let region = WindowSpec::new(2, 3, 1, 2).unwrap();
    let m = spectral_metrics(&a, &b, Some(&region)).unwrap();
    assert_eq!((m.l1, m.spectral_convergence), (0.0, 0.0));
    a.frame_mut(3)[0] = 3.0;
    let m = spectral_metrics(&a, &b, Some(&region)).unwrap();
    assert_eq!(m.l1, 2.0 / 6.0);
    assert!((m.spectral_convergence - 2.0 / 6f64.sqrt()).abs() < 1e-15);
}

#[test]
fn nearest_centroid_rules() {
    let s = siamese();
    let seg = MelSpectrogram::filled(5, 16, -2.0);
    let mut single = BTreeMap::new();
    single.insert(3, vec![1.0, -1.0, 0.5, 0.0]);
    assert_eq!(phoneme_identity_score(&seg, &s, &single).unwrap().0, 3);

    let mut twins = BTreeMap::new();
    twins.insert(4, vec![0.2, 0.1, 0.0, 1.0]);
    twins.insert(2, vec![0.2, 0.1, 0.0, 1.0]);
    assert_eq!(phoneme_identity_score(&seg, &s, &twins).unwrap().0, 2);

    let empty = MelSpectrogram::new(0, 16, vec![]).unwrap();
    assert!(matches!(
        phoneme_identity_score(&empty, &s, &single),
        Err(Error::EmptySegment)
    ));
}

#[test]
fn centroids_are_mean_embeddings() {
    let c = corpus();
    let s = siamese();
    let items: Vec<&CorpusItem> = c.items.iter().take(3).collect();
    let cents = phoneme_centroids(&s, &items).unwrap();
    let p = items[0].segmentation.phoneme(1);
    let mut sum = vec![0.0; 4];
    let mut n = 0;
    for it in &items {
        for k in it.segmentation.occurrences(p) {
            let e = s.embed(&it.segment_mel(k).unwrap()).unwrap();
            sum.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
            n += 1;
        }
    }
    for (a, b) in cents[&p].iter().zip(&sum) {
        assert!((a - b / n as f64).abs() < 1e-12);
    }
}

#[test]
fn experiment_bookkeeping() {
    let c = corpus();
    let items: Vec<&CorpusItem> = c.items.iter().collect();
    let (s, g) = (siamese(), generator(&c));
    let cents = phoneme_centroids(&s, &items).unwrap();
    let vocoder = Vocoder::new(VocoderKind::GriffinLim { iterations: 2 }, c.mel_config).unwrap();
    let models = ExperimentModels {
        generator: &g,
        siamese: &s,
        centroids: &cents,
        vocoder: &vocoder,
    };
    let concat = ConcatConfig {
        fade_len: 64,
        search_radius: 16,
    };
    let test = &items[..4];

    let empty = run_minimal_pair_experiment(test, &items, &c.inventory, &[], &models, &concat, 0).unwrap();
    assert!(empty.conditions.is_empty() && empty.per_target.is_empty());

    let pairs = [(1, 2)];
    let a = run_minimal_pair_experiment(test, &items, &c.inventory, &pairs, &models, &concat, 7).unwrap();
    let b = run_minimal_pair_experiment(test, &items, &c.inventory, &pairs, &models, &concat, 7).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let occurrences: usize = test.iter().map(|it| it.segmentation.occurrences(1).count()).sum();
    assert_eq!(a.conditions[&Condition::Generated].n, occurrences);
    for m in a.conditions.values() {
        assert_eq!(m.correct + m.switched + m.none, m.n);
        for (rate, count) in [(m.accuracy, m.correct), (m.switched_rate, m.switched), (m.none_rate, m.none)] {
            assert!((0.0..=1.0).contains(&rate));
            assert_eq!((rate * m.n as f64).round() as usize, count);
        }
        assert!(m.accuracy + m.switched_rate + m.none_rate <= 1.0 + 1e-12);
    }
    let md = a.to_markdown();
    assert!(md.starts_with(&format!("> {REPORT_DISCLAIMER}")));
    assert!(md.contains("| accuracy |"));

    let absent = c.inventory.len();
    let bad = run_minimal_pair_experiment(test, &items, &c.inventory, &[(absent - 1, 1)], &models, &concat, 0);
    if test.iter().all(|it| it.segmentation.occurrences(absent - 1).count() == 0) {
        assert!(matches!(bad, Err(Error::PhonemeAbsent(_))));
    }
    let none: Vec<&CorpusItem> = Vec::new();
    assert!(matches!(
        run_minimal_pair_experiment(&none, &items, &c.inventory, &pairs, &models, &concat, 0),
        Err(Error::PhonemeAbsent(_))
    ));
}

fn stimulus(id: &str, with_reference: bool) -> Stimulus {
    let audio = Waveform::new(vec![0.1; 2205], 22_050);
    Stimulus {
        id: id.into(),
        condition: "generated".into(),
        target_word: "cab".into(),
        minimal_pair_word: "cob".into(),
        control_word: "tree".into(),
        reference: with_reference.then(|| audio.clone()),
        audio,
    }
}

#[test]
fn listening_manifest_validates_and_records_the_shuffle() {
    let dir = std::env::temp_dir().join(format!("inpaint-listening-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let stimuli = [stimulus("s0", true), stimulus("s1", false)];
    let manifest = export_listening_manifest(&stimuli, &dir, 99).unwrap();
    assert_eq!(manifest.abx_tasks.len(), 2);
    assert_eq!(manifest.mos_pairs.len(), 1);

    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join(LISTENING_MANIFEST)).unwrap()).unwrap();
    let schema: serde_json::Value = serde_json::from_str(LISTENING_MANIFEST_SCHEMA).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    assert!(compiled.is_valid(&json));
    let mut broken = json.clone();
    broken["abx_tasks"][0]["options"].as_array_mut().unwrap().pop();
    assert!(!compiled.is_valid(&broken));

    // replay the seeded shuffle
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let canonical = ["cab", "cob", "tree", NONE_OF_THE_ABOVE];
    for task in &manifest.abx_tasks {
        assert_eq!(task.options.len(), 4);
        let mut order: Vec<usize> = (0..4).collect();
        order.shuffle(&mut rng);
        assert_eq!(task.option_order, order);
        for (opt, &i) in task.options.iter().zip(&order) {
            assert_eq!(opt.label, canonical[i]);
        }
        assert!(dir.join(&task.audio).exists());
    }
    std::fs::remove_dir_all(&dir).unwrap();
}
