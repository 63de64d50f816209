use std::sync::OnceLock;

use candle_core::{Device, Tensor};
use proptest::prelude::*;

use cascade_core::codec::{train_vq, CodecConfig, CodecModel, TrainReport};
use cascade_core::corpus::synth_corpus_with;
use cascade_core::corpus::SynthSpec;
use cascade_core::Mel;

fn trained() -> &'static (CodecModel, TrainReport) {
    static CODEC: OnceLock<(CodecModel, TrainReport)> = OnceLock::new();
    CODEC.get_or_init(|| train_vq(&synth_corpus_with(&SynthSpec::default()).unwrap(), &CodecConfig::default()).unwrap())
}

fn mel_strategy() -> impl Strategy<Value = Mel> {
    (4usize..70).prop_flat_map(|f| {
        prop::collection::vec(-11.0f32..3.0, f * 80).prop_map(move |d| Mel::new(f, 80, d).unwrap())
    })
}

#[test]
fn codebook_usage_covers_half_the_codes() {
    let (codec, report) = trained();
    assert!(
        report.codes_used * 2 >= codec.v_sem(),
        "{} of {} codes used",
        report.codes_used,
        codec.v_sem()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn token_count_is_frames_over_rate(mel in mel_strategy()) {
        let (codec, _) = trained();
        prop_assert_eq!(codec.encode(&mel).unwrap().len(), mel.frames() / codec.downsample_rate());
    }

    #[test]
    fn requantizing_codes_is_idempotent(mel in mel_strategy()) {
        let (codec, _) = trained();
        let seq = codec.encode(&mel).unwrap();
        let ids = Tensor::from_vec(seq.tokens.clone(), seq.len(), &Device::Cpu).unwrap();
        let snapped = codec.codebook().index_select(&ids, 0).unwrap();
        prop_assert_eq!(codec.nearest(&snapped).unwrap(), seq.tokens.clone());
        prop_assert_eq!(codec.reconstruct(&seq).unwrap().frames(), seq.len() * codec.downsample_rate());
    }
}

#[test]
fn checkpoint_bytes_are_stable() {
    let (codec, _) = trained();
    let bytes = codec.to_bytes().unwrap();
    let back = CodecModel::from_bytes(&bytes, None).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
}
