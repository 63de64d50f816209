use std::sync::OnceLock;

use candle_core::{Device, Tensor};
use proptest::prelude::*;

use cascade_core::conditioners::{ConditionerConfig, Conditioners};
use cascade_core::nn::grl;
use cascade_core::Mel;

fn conds() -> &'static Conditioners {
    static C: OnceLock<Conditioners> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = ConditionerConfig {
            dim: 32,
            n_mels: 6,
            classifier_hidden: 16,
            ..Default::default()
        };
        Conditioners::new(&cfg, 4).unwrap()
    })
}

fn mel_strategy() -> impl Strategy<Value = Mel> {
    (1usize..30).prop_flat_map(|f| {
        prop::collection::vec(-11.0f32..3.0, f * 6).prop_map(move |d| Mel::new(f, 6, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grl_forward_is_bitwise_identity(v in prop::collection::vec(-1e6f32..1e6, 1..64), lambda in 0.0f64..5.0) {
        let x = Tensor::from_vec(v.clone(), v.len(), &Device::Cpu).unwrap();
        let y = grl(&x, lambda).unwrap().to_vec1::<f32>().unwrap();
        prop_assert!(v.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn speaker_posterior_is_a_distribution(mel in mel_strategy()) {
        let c = conds();
        let e = c.emotion_embed(&mel).unwrap();
        let p = c.classifier.posterior(&e).unwrap();
        prop_assert_eq!(p.len(), 4);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn both_embeddings_share_the_width(mel in mel_strategy()) {
        let c = conds();
        let s = c.speaker_embed(&mel).unwrap();
        let e = c.emotion_embed(&mel).unwrap();
        prop_assert_eq!(s.dim(), c.dim());
        prop_assert_eq!(e.dim(), c.dim());
    }
}

#[test]
fn embeddings_are_independent_of_batch_companions() {
    let c = conds();
    let a = Mel::new(5, 6, (0..30).map(|i| (i as f32 * 0.1).sin()).collect()).unwrap();
    let b = Mel::new(17, 6, (0..102).map(|i| (i as f32 * 0.3).cos()).collect()).unwrap();
    let alone = c.speaker.forward(&[&a], false).unwrap().to_vec2::<f32>().unwrap();
    let paired = c.speaker.forward(&[&a, &b], false).unwrap().to_vec2::<f32>().unwrap();
    for (x, y) in alone[0].iter().zip(&paired[0]) {
        assert!((x - y).abs() < 1e-5);
    }
}
