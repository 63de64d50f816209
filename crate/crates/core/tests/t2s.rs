use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cascade_core::codec::{train_vq, CodecConfig};
use cascade_core::conditioners::{ConditionerConfig, Conditioners};
use cascade_core::corpus::{synth_corpus_with, SynthSpec};
use cascade_core::optim::OptimConfig;
use cascade_core::t2s::{
    decode_batch, stage_train, DecodeOptions, DecodeRequest, DurationMode, StageConfig, T2SBatch, T2SConfig, T2SModel,
};

fn small() -> T2SConfig {
    T2SConfig {
        dim: 32,
        layers: 2,
        heads: 2,
        v_sem: 16,
        l_speech: 40,
        ..Default::default()
    }
}

#[test]
fn future_tokens_get_exactly_zero_gradient() {
    let m = T2SModel::new(&small()).unwrap();
    let d = m.config().dim;
    let sems: Vec<u32> = (0..8).collect();
    let batch = T2SBatch {
        cond: Tensor::from_vec((0..d).map(|i| (i as f32 * 0.21).cos()).collect(), (1, d), &Device::Cpu).unwrap(),
        p: m.duration_embedding(sems.len()).unwrap().unsqueeze(0).unwrap(),
        texts: vec![vec![3, 1, 4, 1, 5]],
        sems: vec![sems.clone()],
    };
    for t in [0usize, 3, 7] {
        let fwd = m.forward(&batch).unwrap();
        let loss = fwd.logits.get(0).unwrap().get(t).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(m.sem_embedding()).expect("semantic table is trainable").to_vec2::<f32>().unwrap();
        for (tok, row) in g.iter().enumerate().take(sems.len()) {
            let zero = row.iter().all(|v| *v == 0.0);
            // Token j enters at input position j + 1, which position t sees iff j < t.
            assert_eq!(zero, tok >= t, "position {t}, token {tok}");
        }
    }
}

#[test]
fn strict_decoding_length_is_exact_across_the_table() {
    let m = T2SModel::new(&small()).unwrap();
    let l = m.config().l_speech;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cond: Vec<f32> = (0..m.config().dim).map(|i| (i as f32).sin() * 0.1).collect();
    let mut targets: Vec<usize> = (0..18).map(|_| rng.random_range(1..l)).collect();
    targets.extend([1, l - 1]);
    let reqs: Vec<DecodeRequest> = targets
        .iter()
        .map(|&t| DecodeRequest {
            cond: cond.clone(),
            duration: Some(t),
            text: vec![2, 7, 1],
        })
        .collect();
    let opts = DecodeOptions {
        max_len: l - 1,
        mode: DurationMode::Strict,
        ..Default::default()
    };
    for (t, out) in targets.iter().zip(decode_batch(&m, &reqs, &opts).unwrap()) {
        assert_eq!(out.tokens.len(), *t);
        assert!(!out.truncated);
    }
}

/// Overfitting eight utterances: the mean loss over consecutive 50-step
/// blocks never rises by more than two standard errors of the block mean.
/// Prompt and target sampling keep per-step noise alive at the plateau, so
/// an exact non-increase is not a meaningful target there.
#[test]
fn overfit_loss_decreases_when_smoothed() {
    let corpus = synth_corpus_with(&SynthSpec {
        n_speakers: 2,
        utts_per_speaker: 4,
        min_frames: 32,
        max_frames: 64,
        ..Default::default()
    })
    .unwrap();
    let (codec, _) = train_vq(
        &corpus,
        &CodecConfig {
            v_sem: 16,
            ..Default::default()
        },
    )
    .unwrap();
    let mut model = T2SModel::new(&small()).unwrap();
    let mut conds = Conditioners::new(
        &ConditionerConfig {
            dim: 32,
            classifier_hidden: 32,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let cfg = StageConfig {
        steps: 2000,
        batch_size: 8,
        optim: OptimConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = stage_train(1, &corpus, &mut model, &mut conds, &codec, &cfg).unwrap();
    assert_eq!(report.losses.len(), 2000);
    let stats: Vec<(f64, f64)> = report
        .losses
        .chunks(50)
        .map(|c| {
            let n = c.len() as f64;
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, (var / n).sqrt())
        })
        .collect();
    let blocks: Vec<f64> = stats.iter().map(|s| s.0).collect();
    for (i, w) in stats.windows(2).enumerate() {
        let allowance = 2.0 * w[1].1.hypot(w[0].1);
        assert!(
            w[1].0 <= w[0].0 + allowance,
            "block {} rose: {:.4} -> {:.4}, allowance {allowance:.4} (all: {blocks:.3?})",
            i + 1,
            w[0].0,
            w[1].0
        );
    }
    assert!(blocks[blocks.len() - 1] < 0.25 * blocks[0]);
}
