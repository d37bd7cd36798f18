use std::collections::BTreeSet;

use posemerge::annotations::UnifiedInstance;
use posemerge::losses::{
    kl_divergence, soft_argmax_decode, softmax, total_loss_with, KeypointDistribution, KlOptions, LossWeights,
    StudentPrediction, TeacherPrediction,
};
use posemerge::metrics::{average_precision, coco_thresholds, oks, pck, OksParams, PckConfig};
use posemerge::model::gaussian_bins;
use posemerge::schema::{build_union, coco_mpii_union, overlap, unique_to, SkeletonSchema, UnionSchema};
use proptest::prelude::*;

const POOL: [&str; 12] = [
    "nose", "neck", "left_hand", "right_hand", "left_hip", "right_hip", "tail", "head_top", "pelvis", "thorax",
    "left_foot", "right_foot",
];

fn schema_strategy(id: &'static str) -> impl Strategy<Value = SkeletonSchema> {
    proptest::sample::subsequence(POOL.to_vec(), 1..=POOL.len())
        .prop_shuffle()
        .prop_map(move |names| SkeletonSchema::from_names(id, &names).unwrap())
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, n).prop_map(|l| softmax(&l))
}

fn person_strategy(slots: usize) -> impl Strategy<Value = UnifiedInstance> {
    (
        prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), slots),
        prop::collection::vec(any::<bool>(), slots),
        100.0f64..10000.0,
    )
        .prop_map(move |(coords, mask, area)| {
            let side = area.sqrt();
            let mut p = UnifiedInstance::empty(1, [0.0, 0.0, side, side], area, slots);
            p.coords = coords.into_iter().map(|(x, y)| [x, y]).collect();
            p.vis = mask.iter().map(|&m| if m { 2 } else { 0 }).collect();
            p.mask = mask;
            p
        })
}

fn shifted(p: &UnifiedInstance, dx: f64, dy: f64, s: f64) -> UnifiedInstance {
    let mut q = p.clone();
    for c in &mut q.coords {
        *c = [c[0] * s + dx, c[1] * s + dy];
    }
    q.area *= s * s;
    q
}

fn union21() -> UnionSchema {
    coco_mpii_union()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn union_size_is_inclusion_exclusion(a in schema_strategy("a"), b in schema_strategy("b")) {
        let u = build_union(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(u.len(), a.len() + b.len() - overlap(&a, &b).len());
        // The union starts with `a` in order, then b's leftovers in b's order.
        let names: Vec<&str> = u.keypoints().iter().map(|k| k.as_str()).collect();
        let a_names: Vec<&str> = a.keypoints().iter().map(|k| k.as_str()).collect();
        prop_assert_eq!(&names[..a.len()], &a_names[..]);
        let rest: Vec<String> = unique_to(&b, &a).iter().map(|k| k.to_string()).collect();
        prop_assert_eq!(names[a.len()..].iter().map(|s| s.to_string()).collect::<Vec<_>>(), rest);
        // Provenance splits the union into shared and one-sided parts.
        let shared = u.provenance().iter().filter(|p| p.len() == 2).count();
        prop_assert_eq!(shared, overlap(&a, &b).len());
    }

    #[test]
    fn overlap_and_unique_partition_each_side(a in schema_strategy("a"), b in schema_strategy("b")) {
        let ov: BTreeSet<String> = overlap(&a, &b).iter().map(|k| k.to_string()).collect();
        let ua: BTreeSet<String> = unique_to(&a, &b).iter().map(|k| k.to_string()).collect();
        prop_assert!(ov.is_disjoint(&ua));
        prop_assert_eq!(ov.len() + ua.len(), a.len());
        prop_assert_eq!(overlap(&a, &b).len(), overlap(&b, &a).len());
    }

    #[test]
    fn oks_is_translation_and_scale_invariant(
        gt in person_strategy(21),
        noise in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 21),
        dx in -500.0f64..500.0, dy in -500.0f64..500.0, s in 0.1f64..10.0,
    ) {
        let union = union21();
        let params = OksParams::defaults(&union);
        let all: Vec<usize> = (0..21).collect();
        let mut pred = gt.clone();
        for (c, (nx, ny)) in pred.coords.iter_mut().zip(noise) {
            *c = [c[0] + nx, c[1] + ny];
        }
        pred.mask = vec![true; 21];
        let base = oks(&pred, &gt, &params, &all);
        let moved = oks(&shifted(&pred, dx, dy, s), &shifted(&gt, dx, dy, s), &params, &all);
        match (base, moved) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
        if let Some(v) = base {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pck_is_monotone_in_threshold(
        gts in prop::collection::vec(person_strategy(21), 1..6),
        noise in prop::collection::vec((-30.0f64..30.0, -30.0f64..30.0), 21),
        t1 in 0.0f64..1.0, t2 in 0.0f64..1.0,
    ) {
        let union = union21();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let preds: Vec<UnifiedInstance> = gts.iter().map(|g| {
            let mut p = g.clone();
            for (c, (nx, ny)) in p.coords.iter_mut().zip(&noise) {
                *c = [c[0] + nx, c[1] + ny];
            }
            p.mask = vec![true; 21];
            p
        }).collect();
        let all: Vec<usize> = (0..21).collect();
        for cfg in [PckConfig::bbox(lo), PckConfig::pckh(lo)] {
            let at_lo = pck(&preds, &gts, &cfg, &all, &union).unwrap();
            let at_hi = pck(&preds, &gts, &PckConfig { threshold: hi, ..cfg }, &all, &union).unwrap();
            for (a, b) in at_lo.per_keypoint.iter().zip(&at_hi.per_keypoint) {
                prop_assert!(a.score <= b.score);
            }
            prop_assert!(at_lo.mean("PCK").unwrap() <= at_hi.mean("PCK").unwrap());
        }
    }

    #[test]
    fn trailing_false_positive_leaves_ap_unchanged(
        gts in prop::collection::vec(person_strategy(21), 1..5),
        noise in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 21),
        stray in person_strategy(21),
    ) {
        let union = union21();
        let params = OksParams::defaults(&union);
        let all: Vec<usize> = (0..21).collect();
        let preds: Vec<UnifiedInstance> = gts.iter().enumerate().map(|(i, g)| {
            let mut p = g.clone();
            for (c, (nx, ny)) in p.coords.iter_mut().zip(&noise) {
                *c = [c[0] + nx * (i + 1) as f64, c[1] + ny];
            }
            p.mask = vec![true; 21];
            p.score = Some(0.5 + 0.1 * i as f64);
            p
        }).collect();
        let before = average_precision(&preds, &gts, &params, &all, &coco_thresholds(), &union);
        // A detection on an image with no people, scored below everything.
        let mut extra = preds.clone();
        extra.push(UnifiedInstance { image_id: 99, score: Some(0.0), ..stray });
        let after = average_precision(&extra, &gts, &params, &all, &coco_thresholds(), &union);
        for key in ["AP", "AR", "AP50", "AP75"] {
            prop_assert_eq!(before.mean(key), after.mean(key));
        }
        let perfect: Vec<UnifiedInstance> = gts.iter().filter(|g| g.mask.iter().any(|&m| m))
            .map(|g| UnifiedInstance { score: Some(1.0), ..g.clone() }).collect();
        if !perfect.is_empty() {
            let r = average_precision(&perfect, &gts, &params, &all, &coco_thresholds(), &union);
            prop_assert_eq!(r.mean("AP"), Some(1.0));
            prop_assert!(before.mean("AP").unwrap() <= 1.0);
        }
    }

    #[test]
    fn metrics_ignore_slots_outside_the_subset(
        gts in prop::collection::vec(person_strategy(21), 1..5),
        junk in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 21),
        subset_src in prop::sample::select(vec!["coco17", "mpii16"]),
    ) {
        let union = union21();
        let params = OksParams::defaults(&union);
        let subset = union.slots_of(subset_src);
        let preds: Vec<UnifiedInstance> = gts.iter().map(|g| UnifiedInstance { score: Some(0.9), ..g.clone() }).collect();
        let mut noisy = preds.clone();
        for p in &mut noisy {
            for (k, (x, y)) in junk.iter().enumerate() {
                if !subset.contains(&k) {
                    p.coords[k] = [*x, *y];
                    p.mask[k] = !p.mask[k];
                }
            }
        }
        let thr = coco_thresholds();
        prop_assert_eq!(
            average_precision(&preds, &gts, &params, &subset, &thr, &union),
            average_precision(&noisy, &gts, &params, &subset, &thr, &union)
        );
        let cfg = PckConfig::bbox(0.2);
        prop_assert_eq!(
            pck(&preds, &gts, &cfg, &subset, &union).unwrap(),
            pck(&noisy, &gts, &cfg, &subset, &union).unwrap()
        );
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_the_diagonal(p in simplex(16), q in simplex(16)) {
        prop_assert!(kl_divergence(&p, &q) >= 0.0);
        prop_assert!(kl_divergence(&p, &p).abs() <= 1e-12);
    }

    #[test]
    fn distributions_sum_to_one(
        logits in prop::collection::vec(-700.0f64..700.0, 1..128),
        mu in -0.5f64..1.5, width in 0.1f64..20.0, bins in 2usize..256,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let g = gaussian_bins(mu, width, bins);
        prop_assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let d = KeypointDistribution { x: g.clone(), y: g };
        let (c, _) = soft_argmax_decode(&d);
        prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn total_loss_is_affine_in_alpha(
        logits in prop::collection::vec(-4.0f64..4.0, 3 * 2 * 8),
        targets in prop::collection::vec(simplex(8), 4),
        coords in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3),
        alpha in 0.0f64..=1.0, b1 in 0.0f64..2.0, b2 in 0.0f64..2.0,
    ) {
        let pred = StudentPrediction::from_logits(3, 8, logits).unwrap();
        let mut gt = UnifiedInstance::empty(0, [0.0, 0.0, 1.0, 1.0], 1.0, 3);
        gt.coords = coords.into_iter().map(|(x, y)| [x, y]).collect();
        gt.mask = vec![true, false, true];
        let teachers = vec![
            TeacherPrediction {
                teacher_id: "s".into(),
                covered: vec![0],
                dists: vec![KeypointDistribution { x: targets[0].clone(), y: targets[1].clone() }],
            },
            TeacherPrediction {
                teacher_id: "t".into(),
                covered: vec![1, 2],
                dists: vec![
                    KeypointDistribution { x: targets[2].clone(), y: targets[3].clone() },
                    KeypointDistribution { x: targets[1].clone(), y: targets[0].clone() },
                ],
            },
        ];
        let w = |a: f64| LossWeights::new(a, [("s".to_string(), b1), ("t".to_string(), b2)]).unwrap();
        let at = |a: f64| total_loss_with(&pred, &gt, &teachers, &w(a), KlOptions::default()).unwrap();
        let (l0, l1, la) = (at(0.0), at(1.0), at(alpha));
        prop_assert!((la.value - (alpha * l1.value + (1.0 - alpha) * l0.value)).abs() <= 1e-9 * la.value.abs().max(1.0));
        prop_assert_eq!(l1.value, l1.keypoint);
        let d: f64 = b1 * l0.distill[0].1 + b2 * l0.distill[1].1;
        prop_assert!((l0.value - d).abs() <= 1e-12 * d.max(1.0));
        for (_, v) in &la.distill {
            prop_assert!(*v >= 0.0);
        }
    }
}
