use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use cascade_core::t2e::{
    build_distill_dataset, distill_student, mix_emotion_vector, read_jsonl, soft_cross_entropy_dist, to_jsonl,
    write_jsonl, EmotionBank, EmotionDistribution, HttpTeacher, MockTeacher, PromptKind, Student,
    StudentConfig, Teacher, CLASSIFY_PROMPT,
};
use cascade_core::Emotion;
use proptest::prelude::*;

#[test]
fn dataset_is_balanced_two_decimal_and_reproducible() {
    let teacher = MockTeacher::default();
    let small = build_distill_dataset(14, &teacher, 3).unwrap();
    let mut seen: Vec<(Emotion, PromptKind)> = (0..14).map(cascade_core::t2e::slot).collect();
    seen.sort_by_key(|(e, k)| (e.index(), *k as usize));
    seen.dedup();
    assert_eq!(seen.len(), 14);
    for (i, pair) in small.iter().enumerate() {
        assert_eq!(pair.kind, cascade_core::t2e::slot(i).1);
    }

    let a = build_distill_dataset(200, &teacher, 4).unwrap();
    let b = build_distill_dataset(200, &teacher, 1).unwrap();
    assert_eq!(to_jsonl(&a).unwrap(), to_jsonl(&b).unwrap());
    for pair in &a {
        let s: f64 = pair.p.probs().iter().sum();
        assert!((s - 1.0).abs() <= 1e-6);
        for v in pair.p.probs() {
            assert!(*v >= 0.0);
            assert!((v * 100.0 - (v * 100.0).round()).abs() < 1e-9, "{v}");
        }
    }
    assert!(build_distill_dataset(6, &teacher, 1).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_jsonl(&path, &a).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), a);
    let first = std::fs::read_to_string(&path).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert!(line["text"].is_string());
    assert_eq!(line["kind"], "descriptive");
    assert_eq!(line["p"].as_array().unwrap().len(), 7);
}

#[test]
fn mock_teacher_labels_its_own_sentences() {
    let teacher = MockTeacher::default();
    let data = build_distill_dataset(140, &teacher, 2).unwrap();
    let hits = data
        .iter()
        .enumerate()
        .filter(|(i, p)| p.p.argmax() == cascade_core::t2e::slot(*i).0)
        .count();
    assert!(hits as f64 / data.len() as f64 > 0.8, "{hits}");
}

struct FailingTeacher;

impl Teacher for FailingTeacher {
    fn generate(&self, e: Emotion, _: PromptKind, i: usize) -> cascade_core::Result<String> {
        Ok(format!("sentence {i} {e}"))
    }

    fn classify(&self, text: &str) -> cascade_core::Result<EmotionDistribution> {
        if text.contains("sentence 9 ") {
            Err(cascade_core::Error::Teacher("timeout".into()))
        } else {
            Ok(EmotionDistribution::uniform())
        }
    }
}

#[test]
fn teacher_failure_names_the_text() {
    let err = build_distill_dataset(20, &FailingTeacher, 2).unwrap_err().to_string();
    assert!(err.contains("sentence 9"), "{err}");
}

#[test]
fn cross_entropy_floor_is_mean_teacher_entropy() {
    let teacher = MockTeacher::default();
    let data = build_distill_dataset(20, &teacher, 1).unwrap();
    let p: Vec<EmotionDistribution> = data.iter().map(|d| d.p).collect();
    let ce = soft_cross_entropy_dist(&p, &p).unwrap();
    let mut floor = 0.0;
    for d in &p {
        for v in d.probs() {
            if *v > 0.0 {
                floor -= v * v.ln();
            }
        }
    }
    floor /= p.len() as f64;
    assert!((ce - floor).abs() < 1e-12);
    let uniform = vec![EmotionDistribution::uniform(); p.len()];
    assert!(soft_cross_entropy_dist(&p, &uniform).unwrap() > ce);
}

#[test]
fn distillation_reduces_held_out_loss_and_keeps_base() {
    let teacher = MockTeacher::default();
    let data = build_distill_dataset(700, &teacher, 4).unwrap();
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, pair) in data.into_iter().enumerate() {
        if i % 5 == 2 {
            held.push(pair);
        } else {
            train.push(pair);
        }
    }
    let mut student = Student::new(&StudentConfig::default()).unwrap();
    let base = student.base_checksum().unwrap();
    let before = student.cross_entropy(&held).unwrap();
    let report = distill_student(&mut student, &train).unwrap();
    let after = student.cross_entropy(&held).unwrap();
    assert_eq!(student.base_checksum().unwrap(), base);
    assert_eq!(report.base_checksum_before, report.base_checksum_after);
    assert!(after <= 0.8 * before, "held-out CE {before:.4} -> {after:.4}");
    assert_eq!(student.predict("I am furious").unwrap().argmax(), Emotion::Anger);
}

/// Serves `responses` to successive HTTP requests and returns the bodies
/// it received.
fn stub_server(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for content in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            bodies.push(String::from_utf8(body).unwrap());
            let payload = serde_json::json!({ "choices": [ { "message": { "role": "assistant", "content": content } } ] })
                .to_string();
            let mut s = stream;
            write!(
                s,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                payload.len(),
                payload
            )
            .unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn http_teacher_validates_and_repairs_responses() {
    let ok = r#"Here you go: {"Anger": 0.8, "Happiness": 0.05, "Fear": 0.05, "Disgust": 0.02, "Sadness": 0.02, "Surprise": 0.02, "Neutral": 0.02}"#;
    let drift = r#"{"Anger": 0.1, "Happiness": 0.1, "Fear": 0.1, "Disgust": 0.1, "Sadness": 0.1, "Surprise": 0.1, "Neutral": 0.41}"#;
    let far = r#"{"Anger": 0.5, "Happiness": 0.1, "Fear": 0.1, "Disgust": 0.1, "Sadness": 0.1, "Surprise": 0.1, "Neutral": 0.1}"#;
    let wrong_keys = r#"{"Joy": 1.0}"#;
    let (url, handle) = stub_server(vec![
        ok.into(),
        drift.into(),
        far.into(),
        wrong_keys.into(),
        "1. They slammed the door, shaking with rage.".into(),
    ]);
    let mut t = HttpTeacher::new(url, "stub");
    t.retries = 0;
    t.timeout = Duration::from_secs(10);
    let p = t.classify("I am furious").unwrap();
    assert_eq!(p.argmax(), Emotion::Anger);
    // Mass 0.98 is rescaled before rounding: 0.8 / 0.98 -> 0.82.
    assert!((p.get(Emotion::Anger) - 0.82).abs() < 1e-12);
    let q = t.classify("x").unwrap();
    assert!((q.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!((q.get(Emotion::Neutral) - 0.40).abs() < 1e-12);
    assert!(t.classify("x").is_err());
    assert!(t.classify("x").is_err());
    let s = t.generate(Emotion::Anger, PromptKind::ScriptLike, 0).unwrap();
    assert_eq!(s, "They slammed the door, shaking with rage.");
    let bodies = handle.join().unwrap();
    assert!(bodies[0].contains(CLASSIFY_PROMPT));
    assert!(bodies[0].contains("I am furious"));
    assert!(bodies[4].contains("Please generate script-like utterances that express anger."));
}

#[test]
fn http_teacher_errors_when_unreachable() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let mut t = HttpTeacher::new(url, "stub");
    t.retries = 1;
    t.timeout = Duration::from_secs(2);
    assert!(matches!(t.classify("x"), Err(cascade_core::Error::Teacher(_))));
}

fn bank() -> EmotionBank {
    let members = (0..7)
        .map(|e| {
            (0..3)
                .map(|j| (0..6).map(|i| ((e * 13 + j * 5 + i) % 9) as f32 * 0.25 - 1.0).collect())
                .collect()
        })
        .collect();
    EmotionBank::from_members(members).unwrap()
}

fn dist() -> impl Strategy<Value = EmotionDistribution> {
    proptest::collection::vec(0.0f64..1.0, 7)
        .prop_filter("positive mass", |w| w.iter().sum::<f64>() > 1e-3)
        .prop_map(|w| EmotionDistribution::from_weights(&w).unwrap())
}

proptest! {
    #[test]
    fn mixing_is_linear(p in dist(), q in dist(), lam in 0.0f64..1.0) {
        let b = bank();
        let blended = p.blend(&q, lam).unwrap();
        let lhs = mix_emotion_vector(&blended, &b);
        let mp = mix_emotion_vector(&p, &b);
        let mq = mix_emotion_vector(&q, &b);
        for i in 0..b.dim() {
            let rhs = lam * mp.as_slice()[i] as f64 + (1.0 - lam) * mq.as_slice()[i] as f64;
            prop_assert!((lhs.as_slice()[i] as f64 - rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn teacher_outputs_stay_on_simplex(w in proptest::collection::vec(0.0f64..1.0, 7), drift in -0.02f64..0.02) {
        let s: f64 = w.iter().sum();
        prop_assume!(s > 1e-3);
        let raw: Vec<f64> = w.iter().map(|v| v / s * (1.0 + drift)).collect();
        let p = EmotionDistribution::from_teacher(&raw).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.probs().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn mock_teacher_always_on_simplex(text in "[a-z ]{0,40}") {
        let p = MockTeacher::default().classify(&text).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}
