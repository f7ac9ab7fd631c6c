use std::collections::BTreeSet;

use curate_core::contrastive::{contrastive_loss, normalize, sample_queries, ClassPrototypes, PrototypeBank, QueryParams, QuerySet, Slot};
use curate_core::density::{
    build_density_map, estimate_count, next_detection_round, tta_ensemble, DetectionParams, DetectionRoundState, Dihedral,
};
use curate_core::ipl::{connected_components, fuse_pseudolabel};
use curate_core::metrics::{aji, cross_entropy_masked, dice, l2_masked, pq};
use curate_core::{
    Connectivity, DensityMap, FeatureMap, Grid, InstanceMap, LabelMap, PipelineConfig, Point, PointSet, ProbMap,
    Provenance, BACKGROUND, FOREGROUND, IGNORE,
};
use proptest::prelude::*;

fn label_grid(h: usize, w: usize) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(prop::sample::select(vec![0u8, 1, 255]), h * w)
        .prop_map(move |v| LabelMap::new(Grid::new(h, w, v).unwrap()).unwrap())
}

fn binary_grid(h: usize, w: usize) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0u8..=1, h * w).prop_map(move |v| LabelMap::new(Grid::new(h, w, v).unwrap()).unwrap())
}

fn instances(h: usize, w: usize) -> impl Strategy<Value = InstanceMap> {
    binary_grid(h, w).prop_map(|m| connected_components(&m, Connectivity::Eight).unwrap())
}

fn points(h: usize, w: usize, max: usize) -> impl Strategy<Value = PointSet> {
    prop::collection::btree_set((0..h, 0..w), 0..=max)
        .prop_map(|s| PointSet::new(s.into_iter().map(|(r, c)| Point::ground_truth(r, c)).collect()).unwrap())
}

fn unit_vec(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, c).prop_filter_map("zero vector", |v| normalize(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_bounded_and_symmetric((p, g) in (1usize..20, 1usize..20).prop_flat_map(|(h, w)| (instances(h, w), instances(h, w)))) {
        let d = dice(&p.to_mask(), &g.to_mask()).unwrap();
        prop_assert_eq!(d, dice(&g.to_mask(), &p.to_mask()).unwrap());
        let a = aji(&p, &g).unwrap();
        let (q, m) = pq(&p, &g).unwrap();
        let (q2, m2) = pq(&g, &p).unwrap();
        for v in [d, a, q] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((q - q2).abs() < 1e-12);
        prop_assert_eq!(&m.unmatched_pred, &m2.unmatched_gt);
        prop_assert_eq!(&m.unmatched_gt, &m2.unmatched_pred);
        let preds: BTreeSet<u32> = m.pairs.iter().map(|x| x.pred).collect();
        let gts: BTreeSet<u32> = m.pairs.iter().map(|x| x.gt).collect();
        prop_assert_eq!(preds.len(), m.pairs.len());
        prop_assert_eq!(gts.len(), m.pairs.len());
        prop_assert!(m.pairs.iter().all(|x| x.iou > 0.5));
    }

    #[test]
    fn losses_ignore_masked_pixels(
        (y, pa, pb, da, db, t) in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            let probs = move || prop::collection::vec(0.0f32..=1.0, h * w).prop_map(move |v| ProbMap::new(Grid::new(h, w, v).unwrap()).unwrap());
            let dens = move || prop::collection::vec(0.0f32..1.0, h * w).prop_map(move |v| DensityMap::new(Grid::new(h, w, v).unwrap()).unwrap());
            (label_grid(h, w), probs(), probs(), dens(), dens(), dens())
        })
    ) {
        // b agrees with a wherever the label is supervised
        let mix = |a: &[f32], b: &[f32]| -> Vec<f32> {
            a.iter().zip(b).zip(y.grid().data()).map(|((&x, &z), &l)| if l == IGNORE { z } else { x }).collect()
        };
        let (h, w) = y.shape();
        let pb = ProbMap::new(Grid::new(h, w, mix(pa.grid().data(), pb.grid().data())).unwrap()).unwrap();
        let db = DensityMap::new(Grid::new(h, w, mix(da.grid().data(), db.grid().data())).unwrap()).unwrap();
        prop_assert_eq!(cross_entropy_masked(&pa, &y).unwrap(), cross_entropy_masked(&pb, &y).unwrap());
        prop_assert_eq!(l2_masked(&da, &t, &y).unwrap(), l2_masked(&db, &t, &y).unwrap());
        prop_assert!(cross_entropy_masked(&pa, &y).unwrap() >= 0.0);
    }

    #[test]
    fn density_mass_is_one_per_point(
        (pts, h, w, sigma) in (8usize..80, 8usize..80, 0.5f64..12.0).prop_flat_map(|(h, w, s)| (points(h, w, 25), Just(h), Just(w), Just(s)))
    ) {
        let d = build_density_map(&pts, (h, w), sigma).unwrap();
        prop_assert!((d.mass() - pts.len() as f64).abs() < 1e-3);
        prop_assert_eq!(estimate_count(&d), pts.len());
    }

    #[test]
    fn ensembling_transformed_copies_recovers_the_map(
        (pts, h, w) in (4usize..30, 4usize..30).prop_flat_map(|(h, w)| (points(h, w, 6), Just(h), Just(w)))
    ) {
        let d = build_density_map(&pts, (h, w), 2.0).unwrap();
        let maps: Vec<DensityMap> = Dihedral::ALL.iter().map(|t| t.apply_density(&d)).collect();
        let back = tta_ensemble(&maps, &Dihedral::ALL).unwrap();
        for (a, b) in back.grid().data().iter().zip(d.grid().data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        for t in Dihedral::ALL {
            prop_assert_eq!(t.inverse().apply_density(&t.apply_density(&d)), d.clone());
        }
    }

    #[test]
    fn fusion_respects_priority(
        (sel, bg, gt) in (1usize..16, 1usize..16).prop_flat_map(|(h, w)| (binary_grid(h, w), binary_grid(h, w), points(h, w, 5)))
    ) {
        let bg = LabelMap::new(bg.grid().map(|&v| if v == 1 { BACKGROUND } else { IGNORE })).unwrap();
        let fused = fuse_pseudolabel(&sel, &gt, &bg).unwrap();
        let w = sel.shape().1;
        for i in 0..sel.grid().len() {
            let on_gt = gt.iter().any(|p| p.row * w + p.col == i);
            let expected = if on_gt || sel.grid().data()[i] == FOREGROUND {
                FOREGROUND
            } else if bg.grid().data()[i] == BACKGROUND {
                BACKGROUND
            } else {
                IGNORE
            };
            prop_assert_eq!(fused.labels.grid().data()[i], expected);
        }
        let conflicts = gt.iter().filter(|p| bg.grid().get(p.row, p.col) == BACKGROUND).count();
        prop_assert_eq!(fused.conflicts.len(), conflicts);
    }

    #[test]
    fn components_are_connected_and_cover_the_mask(m in (1usize..24, 1usize..24).prop_flat_map(|(h, w)| binary_grid(h, w))) {
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let inst = connected_components(&m, conn).unwrap();
            // the validating constructor re-checks contiguity and connectivity
            prop_assert!(InstanceMap::with_connectivity(inst.grid().clone(), conn).is_ok());
            for (&id, &v) in inst.grid().data().iter().zip(m.grid().data()) {
                prop_assert_eq!(id > 0, v == FOREGROUND);
            }
        }
    }

    #[test]
    fn contrast_loss_is_permutation_invariant(
        (neg, pos, qs, tau, rot) in (2usize..6).prop_flat_map(|c| (
            prop::collection::vec(unit_vec(c), 1..4),
            unit_vec(c),
            prop::collection::vec(unit_vec(c), 1..12),
            0.05f64..1.5,
            0usize..12,
        ))
    ) {
        let slots = [Slot::PseudoBackground, Slot::BackgroundCluster(0), Slot::BackgroundCluster(1)];
        let bank = |neg: &[Vec<f64>]| PrototypeBank::from_classes(
            ClassPrototypes { mean: neg[0].clone(), members: neg.iter().cloned().zip(slots).map(|(v, s)| (s, v)).collect() },
            ClassPrototypes { mean: pos.clone(), members: vec![(Slot::PseudoForeground, pos.clone())] },
            0,
            1000,
        ).unwrap();
        let set = |q: Vec<Vec<f64>>| QuerySet { class_id: 1, easy_pixels: vec![0; q.len()], hard_pixels: vec![], easy: q, hard: vec![] };
        let a = contrastive_loss(&[set(qs.clone())], &bank(&neg), tau).unwrap();
        let mut shuffled = qs.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let mut neg_rev = neg.clone();
        neg_rev.reverse();
        let b = contrastive_loss(&[set(shuffled)], &bank(&neg_rev), tau).unwrap();
        prop_assert!(a.is_finite() && a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn sampled_queries_are_unit_and_in_class(
        (y, p, z, seed) in (2usize..14, 2usize..14).prop_flat_map(|(h, w)| (
            label_grid(h, w),
            prop::collection::vec(0.0f32..=1.0, h * w).prop_map(move |v| ProbMap::new(Grid::new(h, w, v).unwrap()).unwrap()),
            prop::collection::vec(-1.0f32..1.0, 3 * h * w).prop_map(move |v| FeatureMap::new(3, h, w, v).unwrap()),
            any::<u64>(),
        ))
    ) {
        let params = QueryParams { easy_budget: 7, hard_budget: 5, ..Default::default() };
        for class in [0u8, 1] {
            let q = sample_queries(&z, &y, &p, class, &params, seed).unwrap();
            prop_assert!(q.easy.len() <= 7 && q.hard.len() <= 5);
            for (&i, v) in q.easy_pixels.iter().chain(&q.hard_pixels).zip(q.easy.iter().chain(&q.hard)) {
                prop_assert_eq!(y.grid().data()[i], class);
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn detection_rounds_respect_quotas(
        (gt, extra, h, w) in (40usize..120, 40usize..120).prop_flat_map(|(h, w)| (points(h, w, 4), points(h, w, 30), Just(h), Just(w)))
    ) {
        let mut all: BTreeSet<(usize, usize)> = gt.iter().map(|p| (p.row, p.col)).collect();
        all.extend(extra.iter().map(|p| (p.row, p.col)));
        let truth = PointSet::new(all.into_iter().map(|(r, c)| Point::ground_truth(r, c)).collect()).unwrap();
        let pred = build_density_map(&truth, (h, w), 4.0).unwrap();
        let params = DetectionParams::for_sigma(4.0).unwrap();
        let mut state = DetectionRoundState::new(gt.clone(), params).unwrap();
        for _ in 0..4 {
            let round = next_detection_round(&state, &pred).unwrap();
            let est = round.estimated_count as f64;
            prop_assert!(round.added.len() as f64 <= (0.2 * est + 1e-9).floor());
            prop_assert!(round.state.pseudo_count() as f64 <= (0.8 * est + 1e-9).floor());
            prop_assert_eq!(round.state.accepted_points.count_of(Provenance::GroundTruth), gt.len());
            state = round.state;
        }
    }

    #[test]
    fn config_round_trips(
        sigma in 0.5f64..30.0,
        thr in 0.05f64..0.95,
        tau in 0.01f64..2.0,
        seed in any::<u64>(),
        eps in prop::option::of(0.0f64..1e-3),
    ) {
        let c = PipelineConfig { sigma, binarize_threshold: thr, tau, seed, eps_bg: eps, ..Default::default() };
        prop_assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
