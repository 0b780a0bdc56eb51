use fedgraph::clustering::{kmeans_clusters, random_clustering};
use fedgraph::data::{partition, sample_groups, PartitionConfig};
use fedgraph::numcore::{cross_entropy, softmax, Activation, Matrix, Mlp};
use fedgraph::pipeline::Checkpoint;
use fedgraph::privacy::{select_layer, LayerRule};
use fedgraph::rng::rng_from;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, values[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 2usize..8, v in prop::collection::vec(-30.0f64..30.0, 48)) {
        let p = softmax(&matrix(rows, cols, v));
        for r in p.row_iter() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero(rows in 1usize..6, cols in 2usize..8,
                                               v in prop::collection::vec(-5.0f64..5.0, 48),
                                               t in prop::collection::vec(0.01f64..1.0, 48)) {
        let logits = matrix(rows, cols, v);
        let mut targets = matrix(rows, cols, t);
        for i in 0..rows {
            let s: f64 = targets.row(i).iter().sum();
            targets.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        let (loss, grad) = cross_entropy(&logits, &targets).unwrap();
        prop_assert!(loss >= 0.0);
        for r in grad.row_iter() {
            prop_assert!(r.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn split_then_compose_is_exact(hidden in 1usize..5, width in 1usize..6, seed in any::<u64>()) {
        let mut dims = vec![3];
        dims.extend(std::iter::repeat_n(width, hidden));
        dims.push(4);
        let net = Mlp::<f64>::glorot(&dims, Activation::Relu, Activation::Logits, &mut rng_from(seed));
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [0.0, 0.3, -0.7]]).unwrap();
        let full = net.predict(&x).unwrap();
        for j in 1..=hidden {
            let (top, bottom) = net.split_at(j).unwrap();
            prop_assert_eq!(&bottom.predict(&top.predict(&x).unwrap()).unwrap(), &full);
            prop_assert_eq!(&top.compose(&bottom).unwrap(), &net);
        }
    }

    #[test]
    fn partition_groups_cover_held_samples(clients in 1usize..8, samples in 1usize..200, features in 1usize..40,
                                           ffrac in 0.05f64..=1.0, sfrac in 0.05f64..=1.0, seed in any::<u64>()) {
        let cfg = PartitionConfig { num_clients: clients, feature_frac: ffrac, sample_frac: sfrac };
        let p = partition(samples, features, &cfg, seed).unwrap();
        p.validate().unwrap();
        prop_assert!(p.feature_sets.iter().all(|f| !f.is_empty()));
        let grouped = sample_groups(&p.client_sets(), false).unwrap();
        let mut seen: Vec<usize> = grouped.groups.iter().flat_map(|g| g.members.clone()).collect();
        seen.extend(&grouped.uncovered);
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..samples).collect::<Vec<_>>());
        for g in &grouped.groups {
            for &n in &g.members {
                let holders: Vec<usize> = (0..clients).filter(|&m| p.sample_sets[m].binary_search(&n).is_ok()).collect();
                prop_assert_eq!(&holders, &g.client_key);
            }
        }
    }

    #[test]
    fn random_and_kmeans_clusters_partition_the_group(n in 1usize..120, delta in 1usize..20, seed in any::<u64>()) {
        let members: Vec<usize> = (0..n).map(|i| 7 * i + 2).collect();
        let random = random_clustering(&members, delta, seed).unwrap();
        prop_assert_eq!(random.len(), n.div_ceil(delta));
        prop_assert!(random.iter().filter(|c| c.len() != delta).count() <= 1);

        let mut rng = rng_from(seed);
        let pts = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let (km, result) = kmeans_clusters(&members, &pts, delta, seed).unwrap();
        prop_assert!(km.len() <= n.div_ceil(delta));
        prop_assert_eq!(result.centers.rows(), n.div_ceil(delta));
        for clusters in [random, km] {
            let mut all: Vec<usize> = clusters.iter().flat_map(|c| c.members()).collect();
            all.sort_unstable();
            prop_assert_eq!(&all, &members);
        }
    }

    #[test]
    fn checkpoint_round_trip(rows in 1usize..5, cols in 1usize..5, v in prop::collection::vec(-1e6f64..1e6, 25)) {
        let m = matrix(rows, cols, v);
        let mut ck = Checkpoint::new("test", "abc", serde_json::json!({"k": 1}));
        ck.push_matrix("m", &m);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), "memory").unwrap();
        prop_assert_eq!(back.matrix::<f64>("m").unwrap(), m);
        prop_assert_eq!(back.meta, serde_json::json!({"k": 1}));
    }

    #[test]
    fn selected_layer_is_in_range(scores in prop::collection::vec(-1e4f64..1e4, 1..8), tau in 0.0f64..2.0) {
        for rule in [LayerRule::SteepestDrop, LayerRule::Threshold(tau)] {
            let j = select_layer(&scores, rule).unwrap();
            prop_assert!((1..=scores.len()).contains(&j));
        }
    }
}
