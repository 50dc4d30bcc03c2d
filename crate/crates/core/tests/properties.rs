use std::collections::BTreeMap;

use dmlm::encoders::{Section, TextInput};
use dmlm::eval::{brute_force_auc, compute_metrics, rank_auc};
use dmlm::masking::{adaptive_ratio, mask_count, plan_image_mask, plan_text_mask, IMAGE_RATIO_MAX, IMAGE_RATIO_MIN};
use dmlm::prob::{kl_diag, pool_sequence, w2_diag, DiagGaussian, GaussianSequence};
use dmlm::reports::{parse_report, serialize_report, StructuredReport};
use proptest::prelude::*;

fn gaussian(d: usize) -> impl Strategy<Value = DiagGaussian> {
    (
        prop::collection::vec(-3.0f64..3.0, d),
        prop::collection::vec(-4.0f64..4.0, d),
    )
        .prop_map(|(m, l)| DiagGaussian::new(m, l).unwrap())
}

fn pair(d: usize) -> impl Strategy<Value = (DiagGaussian, DiagGaussian)> {
    (gaussian(d), gaussian(d))
}

fn text_input(n_maskable: usize) -> TextInput {
    let n = n_maskable + 2;
    let mut special = vec![false; n];
    special[0] = true;
    special[n - 1] = true;
    let mut spans = BTreeMap::new();
    spans.insert(Section::Observations, 1..n - 1);
    TextInput::new(vec![5; n], spans, special, 8).unwrap()
}

fn line() -> impl Strategy<Value = String> {
    "[a-z][a-z ,.()-]{0,30}[a-z.]"
}

proptest! {
    #[test]
    fn kl_nonnegative_and_zero_on_self((p, q) in pair(4)) {
        prop_assert!(kl_diag(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_diag(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn w2_is_a_metric((p, q) in pair(3), r in gaussian(3)) {
        let pq = w2_diag(&p, &q).unwrap();
        prop_assert!((pq - w2_diag(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert_eq!(w2_diag(&p, &p).unwrap(), 0.0);
        prop_assert!(pq <= w2_diag(&p, &r).unwrap() + w2_diag(&r, &q).unwrap() + 1e-9);
    }

    #[test]
    fn pooling_preserves_mean_and_bounds_variance(items in prop::collection::vec(gaussian(2), 1..8)) {
        let pooled = pool_sequence(&GaussianSequence::new(items.clone()).unwrap()).unwrap();
        let n = items.len() as f64;
        for k in 0..2 {
            let mean = items.iter().map(|g| g.mu()[k]).sum::<f64>() / n;
            let avg_var = items.iter().map(|g| g.variance()[k]).sum::<f64>() / n;
            prop_assert!((pooled.mu()[k] - mean).abs() < 1e-9);
            prop_assert!(pooled.variance()[k] >= avg_var * (1.0 - 1e-9));
        }
    }

    #[test]
    fn text_mask_is_exact_and_skips_specials(n in 1usize..=512, seed in any::<u64>()) {
        let t = text_input(n);
        let plan = plan_text_mask(&t, 0.3, seed).unwrap();
        prop_assert_eq!(plan.text_indices.len(), mask_count(0.3, n));
        prop_assert!(plan.text_indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.text_indices.iter().all(|&i| !t.special()[i]));
    }

    #[test]
    fn image_ratio_stays_in_bounds(sal in prop::collection::vec(-1.0f64..=1.0, 1..100), base in 0.01f64..0.99, seed in any::<u64>()) {
        let r = adaptive_ratio(&sal, base);
        prop_assert!((IMAGE_RATIO_MIN..=IMAGE_RATIO_MAX).contains(&r));
        let plan = plan_image_mask(&sal, base, 0.1, seed).unwrap();
        prop_assert!(plan.image_indices.len() <= sal.len());
        prop_assert!(plan.image_indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(plan.image_ratio_used, r);
    }

    #[test]
    fn rank_auc_equals_pairwise(
        scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 0.75, 1.0]), 2..40),
        flips in prop::collection::vec(any::<bool>(), 40),
    ) {
        let positive: Vec<bool> = flips[..scores.len()].to_vec();
        match (rank_auc(&scores, &positive), brute_force_auc(&scores, &positive)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn metrics_are_bounded(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 3..30), seed in 0usize..3) {
        let labels: Vec<usize> = (0..rows.len()).map(|i| (i + seed) % 3).collect();
        let m = compute_metrics(&rows, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.auc));
        prop_assert!((0.0..=1.0).contains(&m.acc));
        prop_assert!((0.0..=1.0).contains(&m.f1));
    }

    #[test]
    fn report_round_trips(
        definition in line(),
        appearance in line(),
        obs in prop::collection::vec(line(), 1..4),
        verd in prop::collection::vec(line(), 1..3),
    ) {
        let r = StructuredReport {
            disease: "pneumonia".into(),
            definition,
            appearance,
            observations: obs.iter().map(|o| format!("Observation: {o}")).collect(),
            verdicts: verd.iter().map(|v| format!("Verdict: {v}")).collect(),
        };
        let text = serialize_report(&r).unwrap();
        prop_assert_eq!(parse_report(&text, "pneumonia").unwrap(), r);
    }
}
