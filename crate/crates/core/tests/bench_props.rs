use std::collections::BTreeSet;

use proptest::prelude::*;

use sempt::bench::{generate_target_world, generate_world, harmonic_mean, make_base_novel_split, WorldSpec};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unseen_attributes_come_from_seen_categories(seed in any::<u64>(), seen in 4usize..9, unseen in 1usize..5) {
        let world = generate_world(&WorldSpec { seed, seen, unseen, samples_per_category: 2, ..WorldSpec::default() }).unwrap();
        let seen_union: BTreeSet<usize> = world.categories.iter().filter(|c| c.seen).flat_map(|c| c.attributes.clone()).collect();
        let mut sets = BTreeSet::new();
        for c in &world.categories {
            prop_assert!(sets.insert(c.attributes.clone()), "two categories share an attribute set");
            if !c.seen {
                prop_assert!(c.attributes.iter().all(|a| seen_union.contains(a)));
            }
        }
        prop_assert_eq!(world.seen_names().len(), seen);
        prop_assert_eq!(world.unseen_names().len(), unseen);
        for (_, d) in world.knowledge.descriptions.iter() {
            prop_assert_eq!(d.len(), world.spec.descriptions_per_category);
        }

        let target = generate_target_world(&world, 3, 0.2, seed ^ 1).unwrap();
        for c in &target.categories {
            prop_assert!(!c.seen);
            prop_assert!(c.attributes.iter().all(|a| seen_union.contains(a)));
        }
    }

    #[test]
    fn splits_are_deterministic_and_disjoint(seed in any::<u64>(), shots in 1usize..10) {
        let world = generate_world(&WorldSpec { seed: 5, samples_per_category: 8, ..WorldSpec::default() }).unwrap();
        let a = make_base_novel_split(&world.dataset, seed, shots).unwrap();
        let b = make_base_novel_split(&world.dataset, seed, shots).unwrap();
        prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let train: BTreeSet<&String> = a.train.iter().collect();
        prop_assert!(a.test.iter().all(|id| !train.contains(id)));
        prop_assert_eq!(a.train.len() + a.test.len(), world.dataset.items.len());
        prop_assert_eq!(a.train.len(), a.seen.len() * shots.min(8));
    }

    #[test]
    fn harmonic_mean_lies_between_min_and_mean(b in 0.01f64..100.0, n in 0.01f64..100.0) {
        let h = harmonic_mean(b, n).unwrap();
        prop_assert!((h - harmonic_mean(n, b).unwrap()).abs() < 1e-12);
        prop_assert!(h >= b.min(n) - 1e-12);
        prop_assert!(h <= (b + n) / 2.0 + 1e-12);
    }
}

#[test]
fn harmonic_mean_rejects_zero() {
    assert!(harmonic_mean(0.0, 80.0).is_err());
    assert!(harmonic_mean(80.0, -1.0).is_err());
}
