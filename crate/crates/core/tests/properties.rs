//! Property tests for the invariants the library promises.

use lae_core::bench::{incremental_accuracy, split_tasks, SplitSpec, SyntheticSpec};
use lae_core::checkpoint::Bundle;
use lae_core::continual::{argmax_rows, ema_update, ensemble_from_logits, masked_local_ce_value};
use lae_core::model::{argmax, BackboneConfig};
use lae_core::numerics::{cross_entropy, rng, softmax_slice, Tensor};
use lae_core::pet::{PetConfig, PetKind, PetSet};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

fn pet_kind() -> impl Strategy<Value = PetKind> {
    prop_oneof![Just(PetKind::Adapter), Just(PetKind::Lora), Just(PetKind::Prefix)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(seed in any::<u64>(), tasks in 1usize..5, per in 1usize..4) {
        let data = SyntheticSpec { num_classes: tasks * per + 1, per_class_train: 2, per_class_test: 1, ..SyntheticSpec::default() }
            .generate()
            .unwrap();
        let s = split_tasks(&data, &SplitSpec { num_tasks: tasks, classes_per_task: per, class_order_seed: seed }).unwrap();
        let mut all: Vec<usize> = s.tasks.iter().flat_map(|t| t.source_classes.clone()).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(n, tasks * per);
        for t in &s.tasks {
            prop_assert!(t.train_y.iter().all(|&y| y >= t.classes.0 && y < t.classes.1));
        }
    }

    #[test]
    fn accuracy_variants(counts in prop::collection::vec((0usize..50, 1usize..50), 1..6)) {
        let counts: Vec<(usize, usize)> = counts.into_iter().map(|(c, t)| (c.min(t), t)).collect();
        let a = incremental_accuracy(&counts);
        prop_assert!((0.0..=1.0).contains(&a.pooled) && (0.0..=1.0).contains(&a.task_mean));
        let equal: Vec<(usize, usize)> = counts.iter().map(|&(c, t)| (c * 7 / t.max(1), 7)).collect();
        let e = incremental_accuracy(&equal);
        prop_assert!((e.pooled - e.task_mean).abs() < 1e-12);
    }

    #[test]
    fn ema_stays_in_the_convex_hull(kind in pet_kind(), seed in any::<u64>(), alpha in 0.01f64..0.99, steps in 1usize..20) {
        let bb = BackboneConfig { depth: 2, dim: 8, heads: 2, ..BackboneConfig::default() };
        let cfg = PetConfig { kind, size: 2, ..PetConfig::default() };
        let mut r = rng::seeded(seed);
        let mut off = PetSet::new(&cfg, &bb, &mut r).unwrap();
        let start = off.flatten().0;
        let (mut lo, mut hi) = (start.clone(), start);
        for _ in 0..steps {
            let on = PetSet::new(&cfg, &bb, &mut r).unwrap();
            for (i, v) in on.flatten().0.into_iter().enumerate() {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
            ema_update(&mut off, &on, alpha).unwrap();
            for (i, v) in off.flatten().0.into_iter().enumerate() {
                prop_assert!(v >= lo[i] - 1e-15 && v <= hi[i] + 1e-15);
            }
        }
    }

    #[test]
    fn flatten_round_trips(kind in pet_kind(), seed in any::<u64>(), size in 1usize..5) {
        let bb = BackboneConfig { depth: 3, dim: 8, heads: 2, ..BackboneConfig::default() };
        let cfg = PetConfig { kind, size, ..PetConfig::default() };
        let a = PetSet::new(&cfg, &bb, &mut rng::seeded(seed)).unwrap();
        let mut b = PetSet::new(&cfg, &bb, &mut rng::seeded(seed.wrapping_add(1))).unwrap();
        let (flat, layout) = a.flatten();
        b.unflatten(&flat, &layout).unwrap();
        prop_assert_eq!(&a, &b);
        let bytes = a.to_bundle().to_bytes();
        prop_assert_eq!(PetSet::from_bundle(&Bundle::from_bytes(&bytes).unwrap()).unwrap(), a);
    }

    #[test]
    fn ensemble_picks_one_expert(on in matrix(4, 6), off in matrix(4, 6)) {
        let pred = ensemble_from_logits(&on, Some(&off));
        let (a, b) = (argmax_rows(&on), argmax_rows(&off));
        for i in 0..4 {
            prop_assert!(pred.labels[i] == a[i] || pred.labels[i] == b[i]);
        }
        prop_assert_eq!(ensemble_from_logits(&on, Some(&on)).labels, a);
    }

    #[test]
    fn masked_ce_never_touches_other_columns(logits in matrix(5, 8), lo in 0usize..4, width in 1usize..5, picks in prop::collection::vec(0usize..100, 5)) {
        let hi = (lo + width).min(8);
        let targets: Vec<usize> = picks.iter().map(|p| lo + p % (hi - lo)).collect();
        let (loss, grad) = masked_local_ce_value(&logits, &targets, (lo, hi)).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
        for i in 0..5 {
            for j in (0..lo).chain(hi..8) {
                prop_assert_eq!(grad.row(i)[j], 0.0);
            }
        }
        let full = masked_local_ce_value(&logits, &targets, (0, 8)).unwrap().0;
        prop_assert!((full - cross_entropy(&logits, &targets).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution(row in prop::collection::vec(-50.0f64..50.0, 1..10)) {
        let p = softmax_slice(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert_eq!(argmax(&p), argmax(&row));
    }
}

#[test]
fn ema_hand_values() {
    let bb = BackboneConfig { depth: 2, dim: 8, heads: 2, ..BackboneConfig::default() };
    let cfg = PetConfig { size: 2, ..PetConfig::default() };
    let mut off = PetSet::new(&cfg, &bb, &mut rng::seeded(0)).unwrap();
    let mut on = off.clone();
    let before = off.clone();
    ema_update(&mut off, &on, 0.9999).unwrap();
    assert_eq!(off, before);
    for t in off.tensors_mut() {
        t.data_mut().fill(1.0);
    }
    for t in on.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    ema_update(&mut off, &on, 0.9999).unwrap();
    assert!(off.flatten().0.iter().all(|&v| v == 0.9999));
}

#[test]
fn ensemble_dominance_example() {
    // online puts 0.9 on class 2; offline peaks at 0.6 on class 0
    let p_on = [0.05, 0.025, 0.9, 0.025];
    let p_off = [0.6, 0.2, 0.1, 0.1];
    let logits = |p: &[f64]| Tensor::new(&[1, 4], p.iter().map(|v| v.ln()).collect()).unwrap();
    let pred = ensemble_from_logits(&logits(&p_on), Some(&logits(&p_off)));
    assert_eq!(pred.labels, vec![2]);
}

#[test]
fn first_task_mask_is_plain_cross_entropy() {
    let logits = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
    let targets = [0, 3, 1];
    let (masked, _) = masked_local_ce_value(&logits, &targets, (0, 4)).unwrap();
    assert_eq!(masked, cross_entropy(&logits, &targets).unwrap());
}
