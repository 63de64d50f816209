use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cascade_core::corpus::{
    load_manifest, partition_pair, speed_perturb, split_prompt_target, synth_corpus, write_manifest, LoadMode,
};
use cascade_core::Mel;

fn mel_strategy() -> impl Strategy<Value = Mel> {
    (2usize..60, 1usize..12).prop_flat_map(|(f, m)| {
        prop::collection::vec(-12.0f32..4.0, f * m).prop_map(move |d| Mel::new(f, m, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unit_speed_is_identity(mel in mel_strategy()) {
        prop_assert_eq!(speed_perturb(&mel, 1.0).unwrap(), mel);
    }

    #[test]
    fn perturbed_length_is_rounded_ratio(mel in mel_strategy()) {
        for r in [0.8, 0.9, 1.0, 1.1, 1.25] {
            let out = speed_perturb(&mel, r).unwrap();
            prop_assert_eq!(out.frames(), (mel.frames() as f64 / r).round() as usize);
            prop_assert_eq!(out.bins(), mel.bins());
        }
    }

    #[test]
    fn pairs_are_distinct_and_splits_conserve_frames(seed in 0u64..500) {
        let corpus = synth_corpus(seed % 7, 2, 3, (16, 40)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spk in corpus.speaker_ids() {
            let (a, b) = partition_pair(&corpus, &spk, &mut rng).unwrap();
            prop_assert_ne!(&a.id, &b.id);
            prop_assert_eq!(&a.speaker_id, &spk);
            prop_assert_eq!(&b.speaker_id, &spk);
            let (p, t) = split_prompt_target(a, &mut rng, 8).unwrap();
            prop_assert_eq!(p.frames() + t.frames(), a.mel.frames());
            prop_assert!(p.frames() >= 8 && t.frames() >= 8);
        }
    }
}

#[test]
fn synthetic_corpus_is_byte_identical_across_runs() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut blobs = Vec::new();
    for d in &dirs {
        let corpus = synth_corpus(11, 3, 4, (20, 40)).unwrap();
        let manifest = write_manifest(&corpus, d.path()).unwrap();
        let mut files = vec![std::fs::read(&manifest).unwrap()];
        for u in corpus.utterances() {
            files.push(std::fs::read(d.path().join(format!("features/{}.feat", u.id))).unwrap());
        }
        blobs.push(files);
    }
    assert_eq!(blobs[0], blobs[1]);
}

#[test]
fn manifest_round_trip_preserves_utterances() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(3, 2, 3, (16, 30)).unwrap();
    let manifest = write_manifest(&corpus, dir.path()).unwrap();
    let back = load_manifest(&manifest, LoadMode::Training).unwrap();
    assert_eq!(back.len(), corpus.len());
    for (a, b) in corpus.utterances().iter().zip(back.utterances()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.speaker_id, b.speaker_id);
        assert_eq!(a.emotion, b.emotion);
        assert_eq!(a.text_tokens, b.text_tokens);
        assert_eq!(a.mel, b.mel);
    }
}

#[test]
fn training_manifest_rejects_single_utterance_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(3, 2, 2, (16, 30)).unwrap();
    let keep = corpus.utterances()[0].id.clone();
    let other = corpus.utterances()[0].speaker_id.clone();
    let trimmed = corpus.filter(|u| u.speaker_id != other || u.id == keep).unwrap();
    let manifest = write_manifest(&trimmed, dir.path()).unwrap();
    assert!(load_manifest(&manifest, LoadMode::Training).is_err());
    assert!(load_manifest(&manifest, LoadMode::Inference).is_ok());
}
