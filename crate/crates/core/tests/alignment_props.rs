use proptest::prelude::*;

use sempt::alignment::{aggregate, select_topk, AlignConfig, AttributeEmbeddings};
use sempt::numcore::Tensor;

fn full_sort_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn topk_agrees_with_full_sort(raw in prop::collection::vec(-4i32..=4, 2..16), k_frac in 0.0f64..1.0) {
        // Small integer grid so ties are common.
        let scores: Vec<f64> = raw.iter().map(|&x| x as f64 / 4.0).collect();
        let k = 1 + ((scores.len() - 1) as f64 * k_frac) as usize % (scores.len() - 1);
        let got = select_topk(&scores, k, false).unwrap();
        prop_assert_eq!(got.len(), k);
        prop_assert_eq!(got, full_sort_topk(&scores, k));
    }
}

proptest! {
    #[test]
    fn aggregation_weights_form_a_distribution(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 6),
        v in prop::collection::vec(-1.0f64..1.0, 4),
        k in 1usize..3,
        tau in 0.01f64..2.0,
    ) {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| unit(r)).collect();
        let emb = AttributeEmbeddings::new(vec!["a".into(), "b".into()], 3, Tensor::from_rows(&rows).unwrap()).unwrap();
        let cfg = AlignConfig { top_k: k, temperature: tau, ..AlignConfig::default() };
        let v = unit(&v);
        for c in 0..2 {
            let a = aggregate(&v, &emb, c, &cfg).unwrap();
            prop_assert_eq!(a.selected.len(), k);
            let sum: f64 = a.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(a.weights.iter().all(|&w| w >= 0.0));
            // The aggregate is a convex combination of the selected rows.
            for (d, x) in a.aggregate.iter().enumerate() {
                let expect: f64 = a.selected.iter().zip(&a.weights).map(|(&j, w)| w * emb.row(c, j)[d]).sum();
                prop_assert!((x - expect).abs() < 1e-12);
            }
        }
    }
}
