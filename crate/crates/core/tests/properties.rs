use ndarray::Array2;
use proptest::prelude::*;

use esmc_core::kmeans::{kmeans_fit, KMeansConfig};
use esmc_core::localization::{count_high_logits, CountOptions};
use esmc_core::logit_lens::{project, softmax, top_k, VocabDistribution};
use esmc_core::metrics::{nmi, nmi_with, rand_index, NmiNormalization};
use esmc_core::pseudo_head::{
    head_grad, pseudo_count, select_pseudo_labels, HeadParams, PseudoLabelSet,
};
use esmc_core::synth::{gaussian_blobs, BlobSpec};
use esmc_core::tensor_store::{
    read_dump, read_labels, write_dump, write_labels, HiddenStateDump, LabelRow, LabelTable,
    UnembeddingMatrix,
};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn unembedding(v: usize, d: usize) -> impl Strategy<Value = UnembeddingMatrix> {
    prop::collection::vec(-2.0f32..2.0, v * d)
        .prop_map(move |w| UnembeddingMatrix::new(v, d, w).unwrap())
}

fn dist(values: Vec<f64>) -> VocabDistribution {
    VocabDistribution {
        values,
        normalized: false,
    }
}

fn dump(id: String, layers: usize, tokens: usize, d: usize, states: Vec<f32>) -> HiddenStateDump {
    HiddenStateDump {
        image_id: id,
        prompt: "prompt".into(),
        num_layers: layers,
        num_tokens: tokens,
        d_model: d,
        token_strings: (0..tokens).map(|t| format!("t{t}")).collect(),
        text_token_range: tokens / 2..tokens,
        states,
        model_id: None,
        state_kind: Some("post_norm".into()),
    }
}

fn dumps(n: usize) -> impl Strategy<Value = Vec<HiddenStateDump>> {
    prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 2 * 4 * 3), n).prop_map(|all| {
        all.into_iter()
            .enumerate()
            .map(|(i, s)| dump(format!("img{i}"), 2, 4, 3, s))
            .collect()
    })
}

fn labels(max_n: usize, k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2..=max_n).prop_flat_map(move |n| {
        (
            prop::collection::vec(0..k, n),
            prop::collection::vec(0..k, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_linear(
        w in unembedding(5, 3),
        a in prop::collection::vec(-2.0f32..2.0, 3),
        b in prop::collection::vec(-2.0f32..2.0, 3),
    ) {
        let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (pa, pb, ps) = (
            project(&a, &w).unwrap(),
            project(&b, &w).unwrap(),
            project(&sum, &w).unwrap(),
        );
        for v in 0..5 {
            prop_assert!((ps.values[v] - pa.values[v] - pb.values[v]).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_shift_invariant_and_order_preserving(
        values in prop::collection::vec(-30.0f64..30.0, 1..20),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&dist(values.clone()));
        let q = softmax(&dist(values.iter().map(|v| v + shift).collect()));
        let total: f64 = p.values.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for i in 0..values.len() {
            prop_assert!((p.values[i] - q.values[i]).abs() < 1e-12);
            for j in 0..values.len() {
                if values[i] < values[j] {
                    prop_assert!(p.values[i] <= p.values[j]);
                }
            }
        }
    }

    #[test]
    fn top_k_is_prefix_of_full_sort(
        values in prop::collection::vec(-4i32..4, 1..15),
        k in 1usize..15,
    ) {
        let d = dist(values.iter().map(|&v| v as f64).collect());
        let full = top_k(&d, d.values.len()).unwrap();
        let mut oracle: Vec<(usize, f64)> = d.values.iter().copied().enumerate().collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        prop_assert_eq!(&full, &oracle);
        let k = k.min(d.values.len());
        prop_assert_eq!(top_k(&d, k).unwrap(), oracle[..k].to_vec());
    }

    #[test]
    fn counts_ignore_dump_order(ds in dumps(4), w in unembedding(6, 3), rot in 0usize..4) {
        let opts = CountOptions { tau: 0.3, ..Default::default() };
        let a = count_high_logits(&ds, &w, &[0, 2], &opts).unwrap();
        let mut rotated = ds.clone();
        rotated.rotate_left(rot);
        let b = count_high_logits(&rotated, &w, &[0, 2], &opts).unwrap();
        prop_assert_eq!(&a.counts, &b.counts);
        for (cell, s) in &a.value_sums {
            prop_assert!((s - b.value_sums[cell]).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_tau_never_raises_counts(
        ds in dumps(3),
        w in unembedding(6, 3),
        lo in 0.01f64..0.5,
        gap in 0.0f64..0.5,
    ) {
        let count = |tau| {
            count_high_logits(&ds, &w, &[1, 4], &CountOptions { tau, ..Default::default() })
                .unwrap()
        };
        let (a, b) = (count(lo), count(lo + gap));
        for (cell, &c) in &b.counts {
            prop_assert!(a.get(*cell) >= c);
        }
    }

    #[test]
    fn restricted_counts_stay_in_text_span(ds in dumps(3), w in unembedding(6, 3)) {
        let opts = CountOptions { tau: 0.2, restrict_to_text: true, ..Default::default() };
        let map = count_high_logits(&ds, &w, &[0, 1, 2], &opts).unwrap();
        for cell in map.counts.keys() {
            prop_assert!(ds[0].text_token_range.contains(&cell.position));
        }
    }

    #[test]
    fn kmeans_inertia_monotone_and_means(x in matrix(30, 3), k in 1usize..6, seed in any::<u64>()) {
        let m = kmeans_fit(x.view(), &KMeansConfig::new(k, seed)).unwrap();
        for w in m.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9);
        }
        let sizes = m.cluster_sizes();
        prop_assert!(sizes.iter().all(|&s| s > 0));
        for (j, &size) in sizes.iter().enumerate() {
            for d in 0..3 {
                let mean = (0..30)
                    .filter(|&i| m.assignments[i] == j)
                    .map(|i| x[[i, d]])
                    .sum::<f64>() / size as f64;
                prop_assert!((m.centroids[[j, d]] - mean).abs() <= 1e-9);
            }
        }
        prop_assert_eq!(m, kmeans_fit(x.view(), &KMeansConfig::new(k, seed)).unwrap());
    }

    #[test]
    fn kmeans_partition_survives_row_permutation(seed in 0u64..1000, shift in 1usize..80) {
        // Tight clusters, where a single k-means++ start always finds the truth.
        let mut spec = BlobSpec::new(80, 4, 3, seed);
        spec.sigma = 0.05;
        spec.separation = 100.0;
        let b = gaussian_blobs(&spec);
        let order: Vec<usize> = (0..80).map(|i| (i + shift) % 80).collect();
        let permuted = b.data.select(ndarray::Axis(0), &order);
        let m1 = kmeans_fit(b.data.view(), &KMeansConfig::new(3, seed)).unwrap();
        let m2 = kmeans_fit(permuted.view(), &KMeansConfig::new(3, seed)).unwrap();
        let back: Vec<usize> = {
            let mut v = vec![0; 80];
            for (pos, &i) in order.iter().enumerate() {
                v[i] = m2.assignments[pos];
            }
            v
        };
        prop_assert_eq!(nmi(&m1.assignments, &back).unwrap(), 1.0);
    }

    #[test]
    fn pseudo_labels_follow_count_rule(x in matrix(40, 2), k in 1usize..5, alpha in 0.01f64..1.0) {
        let m = kmeans_fit(x.view(), &KMeansConfig::new(k, 3)).unwrap();
        let p = select_pseudo_labels(x.view(), &m, alpha).unwrap();
        let mut seen = std::collections::HashSet::new();
        prop_assert!(p.indices.iter().all(|i| seen.insert(*i)));
        prop_assert!(p.len() <= 40);
        for j in 0..k {
            let chosen: Vec<usize> = p.indices.iter().zip(&p.labels)
                .filter(|&(_, &l)| l == j).map(|(&i, _)| i).collect();
            let members: Vec<usize> = (0..40).filter(|&i| m.assignments[i] == j).collect();
            prop_assert_eq!(chosen.len(), pseudo_count(alpha, members.len()));
            let d = |i: usize| (0..2).map(|c| (x[[i, c]] - m.centroids[[j, c]]).powi(2)).sum::<f64>();
            let worst_kept = chosen.iter().map(|&i| d(i)).fold(0.0, f64::max);
            for i in members.iter().filter(|i| !chosen.contains(i)) {
                prop_assert!(d(*i) >= worst_kept);
            }
        }
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient(
        x in matrix(4, 3),
        w in prop::collection::vec(-1.0f64..1.0, 2 * 3 + 2 + 3 * 2 + 3),
        labels in prop::collection::vec(0usize..3, 4),
    ) {
        let p = HeadParams {
            w1: Array2::from_shape_vec((2, 3), w[..6].to_vec()).unwrap(),
            b1: w[6..8].to_vec().into(),
            w2: Array2::from_shape_vec((3, 2), w[8..14].to_vec()).unwrap(),
            b2: w[14..].to_vec().into(),
        };
        let once = PseudoLabelSet { indices: (0..4).collect(), labels: labels.clone(), alpha: 1.0 };
        let twice = PseudoLabelSet {
            indices: (0..4).chain(0..4).collect(),
            labels: labels.iter().chain(&labels).copied().collect(),
            alpha: 1.0,
        };
        let (g1, g2) = (head_grad(&p, x.view(), &once).unwrap(), head_grad(&p, x.view(), &twice).unwrap());
        for (a, b) in g1.w1.iter().chain(g1.w2.iter()).zip(g2.w1.iter().chain(g2.w2.iter())) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g1.b1.iter().chain(g1.b2.iter()).zip(g2.b1.iter().chain(g2.b2.iter())) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_symmetric_bounded_and_label_blind((a, b) in labels(40, 4), offset in 1usize..50) {
        let ab = nmi(&a, &b).unwrap();
        prop_assert!((ab - nmi(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ab));
        let ri = rand_index(&a, &b).unwrap();
        prop_assert_eq!(ri, rand_index(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ri));
        // Relabel with a bijection onto strings.
        let renamed: Vec<String> = a.iter().map(|l| format!("c{}", l * 7 + offset)).collect();
        prop_assert!((nmi(&renamed, &b).unwrap() - ab).abs() < 1e-12);
        prop_assert_eq!(rand_index(&renamed, &b).unwrap(), ri);
        prop_assert_eq!(nmi(&a, &renamed).unwrap(), 1.0);
        for norm in [NmiNormalization::Geometric, NmiNormalization::Max] {
            let v = nmi_with(&a, &b, norm).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn dump_round_trip(states in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 2 * 4 * 3)) {
        let tmp = tempfile::tempdir().unwrap();
        let d = dump("im,g \"1\"".into(), 2, 4, 3, states);
        write_dump(&d, tmp.path()).unwrap();
        let back = read_dump(tmp.path()).unwrap();
        prop_assert_eq!(back.states.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        d.states.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back, d);
    }

    #[test]
    fn labels_round_trip(cells in prop::collection::vec(("[a-z,\" ]{1,6}", "[^\r\n]{0,8}"), 1..10)) {
        let tmp = tempfile::tempdir().unwrap();
        let rows: Vec<LabelRow> = cells.into_iter().enumerate()
            .map(|(i, (criterion, label))| LabelRow { image_id: format!("id{i}"), criterion, label })
            .collect();
        let table = LabelTable::new(rows).unwrap();
        let path = tmp.path().join("labels.csv");
        write_labels(&table, &path).unwrap();
        prop_assert_eq!(read_labels(&path).unwrap(), table);
    }
}
