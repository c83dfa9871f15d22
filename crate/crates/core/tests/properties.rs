use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use classwatch_core::analytics::{emotion_distribution, engagement_timeseries, session_summary, ClassCounts};
use classwatch_core::dataset::{label_clips, select_frame_indices, select_primary_emotion, ClipAnnotation};
use classwatch_core::emotion::{argmax_emotion, softmax, EmotionClass, EmotionProbabilities, RawCrop, NUM_CLASSES};
use classwatch_core::gateway::{DetectionSink, WireDetection};
use classwatch_core::matcher::{
    confidence_from_distance, distance, match_against, Embedding, MatcherConfig, StudentProfile, EMBEDDING_DIM,
};
use classwatch_core::session::{DetectionEvent, Session};
use classwatch_core::store::{EmotionObservation, JournalStore, RecordFilter, Store};

mod common;

fn embedding(scale: f64) -> impl Strategy<Value = Embedding> {
    prop::collection::vec(-scale..scale, EMBEDDING_DIM).prop_map(|v| Embedding::new(v).unwrap())
}

fn profile(id: String, e: Embedding) -> StudentProfile {
    StudentProfile {
        student_id: id.clone(),
        display_name: id,
        reference_embedding: e,
        enrolled_at: 0,
    }
}

fn flat_crop() -> RawCrop {
    RawCrop::grayscale(64, 64, vec![128; 64 * 64]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distance_is_a_metric(a in embedding(1.0), b in embedding(1.0), c in embedding(1.0)) {
        let ab = distance(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(distance(&a, &a), 0.0);
        prop_assert!((ab - distance(&b, &a)).abs() <= 1e-12);
        prop_assert!(distance(&a, &c) <= ab + distance(&b, &c) + 1e-12);
    }

    #[test]
    fn confidence_is_bounded_and_monotone(d1 in 0.0f64..3.0, d2 in 0.0f64..3.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (c_lo, c_hi) = (confidence_from_distance(lo), confidence_from_distance(hi));
        prop_assert!((0.0..=1.0).contains(&c_lo) && (0.0..=1.0).contains(&c_hi));
        prop_assert!(c_hi <= c_lo);
        prop_assert!(((c_lo * 100.0).round() - c_lo * 100.0).abs() < 1e-9);
    }

    #[test]
    fn nearest_enrollee_wins(
        refs in prop::collection::vec(embedding(0.3), 1..8),
        probe in embedding(0.3),
        theta in 0.05f64..2.0,
    ) {
        let profiles: Vec<StudentProfile> =
            refs.into_iter().enumerate().map(|(i, e)| profile(format!("p{i}"), e)).collect();
        let config = MatcherConfig::new(theta).unwrap();
        let result = match_against(profiles.iter(), &probe, &config);
        // Linear-scan oracle: smallest distance, then smallest id.
        let best = profiles
            .iter()
            .map(|p| (distance(&p.reference_embedding, &probe), &p.student_id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
            .unwrap();
        prop_assert_eq!(result.distance, best.0);
        prop_assert_eq!(result.matched, best.0 < theta);
        if result.matched {
            prop_assert_eq!(result.student_id.as_ref(), Some(best.1));
        } else {
            prop_assert!(result.student_id.is_none());
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::array::uniform4(-800.0f64..800.0)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let probs = EmotionProbabilities::from_logits(&logits);
        let top = argmax_emotion(&probs);
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(p[top.code()], max);
        prop_assert!(p[..top.code()].iter().all(|&v| v < max));
    }

    #[test]
    fn primary_label_ignores_clip_order(
        scores in prop::collection::vec(prop::array::uniform4(0u8..=3), 1..30),
        seed in any::<u64>(),
    ) {
        let clips: Vec<ClipAnnotation> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| ClipAnnotation::new(format!("c{i}"), s[0], s[1], s[2], s[3]))
            .collect();
        let mut shuffled = clips.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize).wrapping_mul(i + 7) % (i + 1));
        }
        let a: BTreeMap<_, _> = label_clips(&clips).into_iter().map(|c| (c.clip_id, c.emotion)).collect();
        let b: BTreeMap<_, _> = label_clips(&shuffled).into_iter().map(|c| (c.clip_id, c.emotion)).collect();
        prop_assert_eq!(&a, &b);
        for c in &clips {
            let s = c.scores();
            match select_primary_emotion(c) {
                Ok(label) => {
                    let max = *s.iter().max().unwrap();
                    let first = s.iter().position(|&v| v == max).unwrap();
                    prop_assert_eq!(label, classwatch_core::dataset::ANNOTATION_ORDER[first]);
                }
                Err(_) => prop_assert!(s.iter().all(|&v| v == 0)),
            }
        }
    }

    #[test]
    fn frame_indices_are_uniform(n in 1usize..500, k in 1usize..20) {
        let idx = select_frame_indices(n, k);
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        let distinct: std::collections::BTreeSet<_> = idx.iter().collect();
        prop_assert_eq!(distinct.len(), n.min(k));
        if n >= k {
            for (i, &v) in idx.iter().enumerate() {
                prop_assert_eq!(v, i * n / k);
            }
        }
    }

    #[test]
    fn analytics_conserve_rows(
        rows in prop::collection::vec((0i64..100_000, 0usize..4, 0usize..3), 0..200),
        width in 1i64..20_000,
        refine in 1i64..6,
        cut in 0i64..100_000,
    ) {
        let store = JournalStore::in_memory();
        for s in ["a", "b", "c"] {
            store.insert_student(&profile(s.into(), Embedding::zeros())).unwrap();
        }
        store.insert_session(&Session::new("x".into(), "c".into(), 0)).unwrap();
        let mut oracle = [0u64; NUM_CLASSES];
        for &(t, code, s) in &rows {
            oracle[code] += 1;
            store
                .insert_emotion(&EmotionObservation {
                    student_id: ["a", "b", "c"][s].into(),
                    session_id: "x".into(),
                    emotion: EmotionClass::from_code(code).unwrap(),
                    confidence: 0.5,
                    timestamp: t,
                })
                .unwrap();
        }
        let full = emotion_distribution(&store, "x", None).unwrap();
        prop_assert_eq!(full.counts.as_array(), oracle);
        let f = full.fractions;
        let sum = f.boredom + f.confusion + f.engagement + f.frustration;
        if rows.is_empty() {
            prop_assert_eq!(sum, 0.0);
        } else {
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        let left = emotion_distribution(&store, "x", Some((i64::MIN, cut))).unwrap();
        let right = emotion_distribution(&store, "x", Some((cut, i64::MAX))).unwrap();
        for k in 0..NUM_CLASSES {
            prop_assert_eq!(left.counts.as_array()[k] + right.counts.as_array()[k], oracle[k]);
        }

        let coarse = engagement_timeseries(&store, "x", width * refine).unwrap();
        let fine = engagement_timeseries(&store, "x", width).unwrap();
        let total = |ts: &classwatch_core::analytics::EngagementTimeSeries| {
            ts.buckets.iter().map(|b| b.counts.total()).sum::<u64>()
        };
        prop_assert_eq!(total(&coarse), rows.len() as u64);
        prop_assert_eq!(total(&fine), rows.len() as u64);
        // Each coarse bucket equals the sum of the fine buckets inside it.
        for b in &coarse.buckets {
            let mut acc = [0u64; NUM_CLASSES];
            for fb in fine.buckets.iter().filter(|fb| fb.bucket_start >= b.bucket_start && fb.bucket_start < b.bucket_start + width * refine) {
                for k in 0..NUM_CLASSES {
                    acc[k] += fb.counts.as_array()[k];
                }
            }
            prop_assert_eq!(acc, b.counts.as_array());
        }
        prop_assert!(coarse.buckets.windows(2).all(|w| w[1].bucket_start == w[0].bucket_start + width * refine));
        for &(t, _, _) in &rows {
            prop_assert_eq!(
                fine.buckets.iter().filter(|b| b.bucket_start <= t && t < b.bucket_start + width).count(),
                1
            );
        }
    }

    #[test]
    fn dominant_matches_argmax(counts in prop::array::uniform4(0u64..20)) {
        let c = ClassCounts::from_array(counts);
        match c.dominant() {
            None => prop_assert_eq!(c.total(), 0),
            Some(d) => {
                let max = *counts.iter().max().unwrap();
                prop_assert_eq!(d.code(), counts.iter().position(|&v| v == max).unwrap());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Random event sequences across students, sessions and noise levels.
    #[test]
    fn attendance_is_unique_per_student_and_session(
        events in prop::collection::vec((0usize..6, 0usize..2, 0.0f64..0.9, 0i64..1000), 1..60),
        end_first in any::<bool>(),
    ) {
        let (engine, store) = common::engine();
        let mut refs = Vec::new();
        for i in 0..5 {
            let mut v = vec![0.0; EMBEDDING_DIM];
            v[i] = 2.0;
            let e = Embedding::new(v).unwrap();
            engine.enroll_student(&format!("s{i}"), "n", e.clone(), 0).unwrap();
            refs.push(e);
        }
        let sessions = [engine.start_session("a", 0).unwrap(), engine.start_session("b", 0).unwrap()];
        let mut matched: HashMap<(String, String), usize> = HashMap::new();
        for (n, &(who, sess, offset, t)) in events.iter().enumerate() {
            if end_first && n == events.len() / 2 {
                engine.end_session(&sessions[1].session_id, t).unwrap();
            }
            let base = if who < 5 { refs[who].as_slice().to_vec() } else { vec![-3.0; EMBEDDING_DIM] };
            let mut v = base;
            v[127] += offset;
            let event = DetectionEvent {
                session_id: sessions[sess].session_id.clone(),
                captured_at: t,
                embedding: Embedding::new(v).unwrap(),
                face_crop: flat_crop(),
                source_id: "p".into(),
            };
            let outcome = engine.process_detection(&event);
            if let Some(m) = outcome.matched.filter(|m| m.matched) {
                if outcome.rejection.is_none() {
                    *matched.entry((m.student_id.unwrap(), sessions[sess].session_id.clone())).or_default() += 1;
                }
            }
        }
        for s in &sessions {
            let rows = store.attendance(&RecordFilter::session(&s.session_id));
            let mut per: HashMap<String, usize> = HashMap::new();
            for r in &rows {
                *per.entry(r.student_id.clone()).or_default() += 1;
            }
            prop_assert!(per.values().all(|&n| n == 1));
            for i in 0..5 {
                let id = format!("s{i}");
                let hit = matched.contains_key(&(id.clone(), s.session_id.clone()));
                prop_assert_eq!(per.contains_key(&id), hit);
                prop_assert_eq!(engine.is_marked(&s.session_id, &id).unwrap(), hit);
            }
            let emotions = store.emotions(&RecordFilter::session(&s.session_id)).len();
            let expected: usize = matched.iter().filter(|((_, sid), _)| *sid == s.session_id).map(|(_, n)| n).sum();
            prop_assert_eq!(emotions, expected);
            let summary = session_summary(&engine, &s.session_id).unwrap();
            prop_assert_eq!(summary.present + summary.absent, 5);
        }
    }

    #[test]
    fn malformed_events_never_touch_the_store(
        bad in prop::collection::vec((0usize..5, any::<u8>()), 1..10),
    ) {
        let (gw, store) = common::gateway();
        let engine = gw.engine().clone();
        let mut v = vec![0.0; EMBEDDING_DIM];
        v[0] = 1.0;
        engine.enroll_student("s0", "n", Embedding::new(v.clone()).unwrap(), 0).unwrap();
        let session = engine.start_session("c", 0).unwrap();
        let good = WireDetection::from_event(&DetectionEvent {
            session_id: session.session_id.clone(),
            captured_at: 10,
            embedding: Embedding::new(v).unwrap(),
            face_crop: flat_crop(),
            source_id: "cam".into(),
        });
        let batch: Vec<WireDetection> = bad
            .iter()
            .map(|&(kind, byte)| {
                let mut w = good.clone();
                match kind {
                    0 => w.embedding.truncate(byte as usize % EMBEDDING_DIM),
                    1 => w.face_crop.truncate(byte as usize % 100),
                    2 => w.protocol_version = 2 + byte as u32,
                    3 => w.embedding[byte as usize % EMBEDDING_DIM] = f64::NAN,
                    _ => w.session_id = format!("nope-{byte}"),
                }
                w
            })
            .collect();
        let acks = gw.submit(batch).unwrap();
        prop_assert!(acks.iter().all(|a| !a.is_accepted()));
        prop_assert!(store.attendance(&RecordFilter::session(&session.session_id)).is_empty());
        prop_assert!(store.emotions(&RecordFilter::session(&session.session_id)).is_empty());
        prop_assert!(!engine.is_marked(&session.session_id, "s0").unwrap());
    }
}
