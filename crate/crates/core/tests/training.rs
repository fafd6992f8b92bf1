use inpaint_core::corpus::{synth_corpus, Corpus, CorpusItem, SynthConfig};
use inpaint_core::dsp::{MelConfig, MelSpectrogram};
use inpaint_core::embedding::{Siamese, SiameseConfig};
use inpaint_core::generator::{Generator, GeneratorConfig};
use inpaint_core::problem::{build_mask, MaskVector, PhonemeSegmentation, WindowSpec};
use inpaint_core::training::*;
use inpaint_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_mel() -> MelConfig {
    MelConfig {
        n_mels: 8,
        ..MelConfig::default()
    }
}

fn tiny_corpus(seed: u64, n: usize) -> Corpus {
    let cfg = SynthConfig {
        min_frames: 4,
        max_frames: 6,
        silence_frames: 4,
        mel: small_mel(),
        ..SynthConfig::default()
    };
    synth_corpus(seed, n, &cfg).unwrap()
}

fn tiny_generator(corpus: &Corpus, tau: usize, seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        phoneme_embed_dim: 3,
        channels: [4, 4, 4, 4, 4],
        ..GeneratorConfig::new(tau, corpus.inventory.clone(), corpus.mel_config)
    }
    .with_normalization(corpus.items.iter().map(|i| i.mel()));
    Generator::new(cfg, seed).unwrap()
}

fn tiny_siamese(seed: u64) -> Siamese {
    Siamese::new(
        SiameseConfig {
            hidden: 4,
            embed_dim: 3,
            ..SiameseConfig::new(8)
        },
        seed,
    )
    .unwrap()
}

fn random_mel(frames: usize, bins: usize, rng: &mut ChaCha8Rng) -> MelSpectrogram {
    let data = (0..frames * bins).map(|_| rng.gen_range(-8.0..2.0)).collect();
    MelSpectrogram::new(frames, bins, data).unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 1e-3,
        lambda_attract: 0.0,
        lambda_contrast: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn single_differing_element_in_five_masked_frames() {
    let x = MelSpectrogram::filled(12, 80, -3.0);
    let mut y = x.clone();
    let window = WindowSpec::new(0, 12, 4, 9).unwrap();
    let mask = build_mask(&window);
    *y.frame_mut(6).get_mut(17).unwrap() += 0.5;
    assert_eq!(reconstruction_loss(&y, &x, &mask, 1.0, 1.0).unwrap(), 1.25e-3);
    assert_eq!(reconstruction_loss(&x, &x, &mask, 1.0, 1.0).unwrap(), 0.0);
}

#[test]
fn reconstruction_terms_scale_with_their_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_mel(10, 6, &mut rng);
    let y = random_mel(10, 6, &mut rng);
    let mask = MaskVector::from_values(vec![1, 1, 1, 0, 0, 0, 1, 1, 1, 1]).unwrap();
    let masked = reconstruction_loss(&y, &x, &mask, 1.0, 0.0).unwrap();
    let context = reconstruction_loss(&y, &x, &mask, 0.0, 1.0).unwrap();
    let both = reconstruction_loss(&y, &x, &mask, 2.0, 3.0).unwrap();
    assert!((both - (2.0 * masked + 3.0 * context)).abs() < 1e-12);
    assert_eq!(masked_l1(&y, &x, &mask).unwrap(), masked);
    // hand-computed masked mean
    let by_hand: f64 = (3..6)
        .flat_map(|t| y.frame(t).iter().zip(x.frame(t)).map(|(a, b)| (a - b).abs()))
        .sum::<f64>()
        / 18.0;
    assert!((masked - by_hand).abs() < 1e-12);
}

#[test]
fn reconstruction_gradient_is_the_scaled_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_mel(8, 4, &mut rng);
    let y = random_mel(8, 4, &mut rng);
    let mask = MaskVector::from_values(vec![1, 1, 0, 0, 1, 1, 1, 1]).unwrap();
    let (loss, grad) = reconstruction_loss_grad(&y, &x, &mask, 1.5, 0.5).unwrap();
    assert_eq!(loss, reconstruction_loss(&y, &x, &mask, 1.5, 0.5).unwrap());
    for t in 0..8 {
        let w = if mask.values()[t] == 0 { 1.5 / 8.0 } else { 0.5 / 24.0 };
        for d in 0..4 {
            let s = (y.get(t, d) - x.get(t, d)).signum();
            assert!((grad.get(t, d) - w * s).abs() < 1e-15);
        }
    }
}

#[test]
fn reconstruction_rejects_mismatched_shapes() {
    let x = MelSpectrogram::filled(8, 4, 0.0);
    let y = MelSpectrogram::filled(7, 4, 0.0);
    let mask = MaskVector::all_ones(8);
    assert!(matches!(
        reconstruction_loss(&y, &x, &mask, 1.0, 1.0),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn attract_loss_is_zero_on_its_own_reference_and_ignores_duplicates() {
    let siamese = tiny_siamese(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gen = random_mel(12, 8, &mut rng);
    let window = WindowSpec::new(0, 12, 3, 8).unwrap();
    let own = gen.slice_frames(3, 8);
    let zero = embedding_attract_loss(&siamese, &gen, &window, &[own.clone()]).unwrap();
    assert!(zero.abs() < 1e-12, "{zero}");
    let other = random_mel(6, 8, &mut rng);
    let once = embedding_attract_loss(&siamese, &gen, &window, &[other.clone()]).unwrap();
    let twice = embedding_attract_loss(&siamese, &gen, &window, &[other.clone(), other]).unwrap();
    assert!((once - twice).abs() < 1e-12);
    assert!((0.0..=2.0).contains(&once));
}

#[test]
fn contrastive_loss_needs_a_different_phoneme() {
    let corpus = tiny_corpus(5, 6);
    let items: Vec<&CorpusItem> = corpus.items.iter().collect();
    let gen = tiny_generator(&corpus, 12, 0);
    let siamese = tiny_siamese(1);
    let (examples, _) = build_examples(&items, &corpus.inventory, &[1, 2], 12).unwrap();
    let ex = &examples[0];
    let refs = vec![items[0].segment_mel(1).unwrap()];
    assert!(matches!(
        contrastive_generation_loss(&gen, ex, ex.phoneme, &siamese, &refs),
        Err(Error::SamePhoneme(_))
    ));
    let q = if ex.phoneme == 1 { 2 } else { 1 };
    let loss = contrastive_generation_loss(&gen, ex, q, &siamese, &refs).unwrap();
    assert!((0.0..=2.0).contains(&loss), "{loss}");
}

#[test]
fn zero_epochs_returns_the_initial_generator() {
    let corpus = tiny_corpus(6, 8);
    let items: Vec<&CorpusItem> = corpus.items.iter().collect();
    let gen = tiny_generator(&corpus, 12, 2);
    let before = gen.params.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..quick_cfg()
    };
    let (after, report) = train_generator(gen, &tiny_siamese(0), &items, &[], &cfg, &[1, 2], None).unwrap();
    assert_eq!(after.params, before);
    assert!(report.epochs.is_empty() && report.steps.is_empty());
}

#[test]
fn first_step_loss_matches_an_independent_evaluation() {
    let corpus = tiny_corpus(7, 6);
    let items: Vec<&CorpusItem> = corpus.items.iter().collect();
    let gen = tiny_generator(&corpus, 12, 3);
    let (examples, _) = build_examples(&items, &corpus.inventory, &[1, 2], 12).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 10_000,
        ..quick_cfg()
    };
    let expected = examples
        .iter()
        .map(|ex| {
            let y = gen
                .generate(&ex.masked, &inpaint_core::problem::FramePhonemeSequence { labels: ex.labels.clone() })
                .unwrap();
            reconstruction_loss(&y, &ex.target, &ex.mask, cfg.lambda1, cfg.lambda2).unwrap()
        })
        .sum::<f64>()
        / examples.len() as f64;
    let (_, report) = train_generator(gen, &tiny_siamese(0), &items, &[], &cfg, &[1, 2], None).unwrap();
    assert!((report.steps[0].loss - expected).abs() < 1e-12);
}

#[test]
fn training_is_reproducible_and_keeps_the_best_epoch() {
    let corpus = tiny_corpus(8, 10);
    let items: Vec<&CorpusItem> = corpus.items.iter().collect();
    let (train, val) = items.split_at(7);
    let siamese = tiny_siamese(4);
    let siamese_before = siamese.params.clone();
    let cfg = TrainConfig {
        epochs: 6,
        lambda_attract: 0.1,
        lambda_contrast: 0.1,
        n_refs: 2,
        ..quick_cfg()
    };
    let run = || train_generator(tiny_generator(&corpus, 12, 5), &siamese, train, val, &cfg, &[1, 2], None).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.params, b.params);
    assert_eq!(
        ra.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>(),
        rb.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(siamese.params, siamese_before);
    let best = ra.best_val_loss().unwrap();
    assert!(ra.epochs.iter().all(|e| best <= e.val_loss));
}

#[test]
fn rare_targets_and_single_class_corpora_are_rejected() {
    let corpus = tiny_corpus(9, 6);
    let items: Vec<&CorpusItem> = corpus.items.iter().collect();
    let one: Vec<&CorpusItem> = items[..1].to_vec();
    let p = one[0].segmentation.phoneme(1);
    let only_once = one[0].segmentation.occurrences(p).count() == 1;
    assert!(only_once);
    assert!(matches!(
        train_generator(tiny_generator(&corpus, 12, 0), &tiny_siamese(0), &one, &[], &quick_cfg(), &[p], None),
        Err(Error::PhonemeTooRare { count: 1, .. })
    ));

    // relabel one utterance as silence, one phoneme, silence
    let it = &corpus.items[0];
    let seg = &it.segmentation;
    let starts = vec![0, seg.start_frames()[1], seg.start_frames()[seg.len() - 1]];
    let relabelled = PhonemeSegmentation::new(vec![0, 1, 0], starts, seg.total_frames()).unwrap();
    let mono = CorpusItem::new(
        "mono",
        it.waveform.clone(),
        relabelled,
        it.speaker_id.clone(),
        it.gender,
        vec![],
        corpus.mel_config,
    )
    .unwrap();
    assert!(matches!(
        train_siamese(tiny_siamese(0), &[&mono], &[], &corpus.inventory, &quick_cfg(), None),
        Err(Error::TooFewClasses(1))
    ));
    let none: Vec<&CorpusItem> = Vec::new();
    assert!(matches!(
        train_siamese(tiny_siamese(0), &none, &[], &corpus.inventory, &quick_cfg(), None),
        Err(Error::TooFewClasses(0))
    ));
}

#[test]
fn siamese_training_logs_similarity_metrics() {
    let corpus = tiny_corpus(10, 12);
    let items: Vec<&CorpusItem> = corpus.items.iter().collect();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        pairs_per_epoch: 32,
        validation_pairs: 16,
        ..quick_cfg()
    };
    let mut log = Vec::new();
    let (_, report) = train_siamese(tiny_siamese(2), &items[..9], &items[9..], &corpus.inventory, &cfg, Some(&mut log)).unwrap();
    assert_eq!(report.epochs.len(), 2);
    let lines: Vec<serde_json::Value> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for line in &lines {
        assert!(line["timestamp"].is_number());
        assert!(line["metrics"]["val_same_similarity"].is_number());
    }
}

#[test]
fn derived_tau_covers_the_longest_target() {
    let corpus = tiny_corpus(11, 8);
    let items: Vec<&CorpusItem> = corpus.items.iter().collect();
    let tau = derive_tau(&items, &[1, 2, 3, 4]);
    assert_eq!(tau % 4, 0);
    let longest = items
        .iter()
        .flat_map(|it| (1..it.segmentation.len() - 1).map(|k| it.segmentation.duration(k).unwrap()))
        .max()
        .unwrap();
    assert!(tau * 10 >= longest * 13);
}
