//! Property tests for cross-module invariants.

use latentfed_core::checkpoint::{decode_client, decode_global, encode_client, encode_global};
use latentfed_core::dataset::{class_counts, generate_synthetic, partition_noniid, stratified_kfold, SyntheticSpec};
use latentfed_core::federation::{fedavg, ClientState, HyperParams, Model, ServerState};
use latentfed_core::gcae::{forward, init_model, predict_proba, ArchSpec, Batch, ConvStage};
use latentfed_core::metrics::{accuracy, argmax_rows, roc_auc_macro};
use latentfed_core::resampling::{resample, Provenance, SamplerKind, SamplerSpec};
use latentfed_core::rng;
use ndarray::Array2;
use proptest::prelude::*;

/// Rows with 2–4 classes (each at least twice) and 2–6 dimensions.
fn labelled_rows() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
    (2usize..=4, 2usize..=6, 0usize..40).prop_flat_map(|(classes, dims, extra)| {
        let n = 2 * classes + extra;
        (
            proptest::collection::vec(-5.0f64..5.0, n * dims),
            proptest::collection::vec(0..classes, extra),
        )
            .prop_map(move |(values, tail)| {
                let mut labels: Vec<usize> = (0..classes).flat_map(|c| [c, c]).collect();
                labels.extend(tail);
                (Array2::from_shape_vec((n, dims), values).unwrap(), labels)
            })
    })
}

fn sampler() -> impl Strategy<Value = SamplerKind> {
    proptest::sample::select(SamplerKind::ALL.to_vec())
}

fn tiny_arch() -> ArchSpec {
    ArchSpec {
        input_channels: 1,
        input_length: 10,
        stages: vec![ConvStage { out_channels: 2, kernel: 3, pool: 2 }],
        latent_dim: 3,
        hidden: vec![4],
        num_classes: 3,
        recon_weight: 1.0,
        pred_weight: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resampling_invariants((x, y) in labelled_rows(), kind in sampler(), seed in any::<u64>()) {
        let spec = SamplerSpec::new(kind);
        let out = resample(x.view(), &y, &spec, &mut rng::from_seed(seed)).unwrap();
        let again = resample(x.view(), &y, &spec, &mut rng::from_seed(seed)).unwrap();
        prop_assert_eq!(&out, &again);

        let counts = class_counts(&out.labels, out.source_counts.len());
        prop_assert!(counts.iter().all(|&c| c > 0));
        if kind.is_pure_oversampler() {
            let max = *out.source_counts.iter().max().unwrap();
            prop_assert!(counts.iter().all(|&c| c == max));
        }
        for (row, p) in out.provenance.iter().enumerate() {
            match *p {
                Provenance::Original { source } => {
                    prop_assert_eq!(out.features.row(row), x.row(source));
                    prop_assert_eq!(out.labels[row], y[source]);
                }
                Provenance::Synthetic { seed, neighbor } => {
                    let (p, s, q) = (out.features.row(row), x.row(seed), x.row(neighbor));
                    let d = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
                        a.iter().zip(b.iter()).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
                    };
                    let sq = d(s, q);
                    prop_assert!(d(s, p) + d(p, q) - sq <= 1e-6 * sq.max(1e-300));
                    prop_assert_eq!(y[seed], out.labels[row]);
                    prop_assert_eq!(y[neighbor], out.labels[row]);
                }
            }
        }
    }

    #[test]
    fn partition_is_a_partition(counts in proptest::collection::vec(6usize..40, 2..5), clients in 1usize..5, seed in any::<u64>()) {
        let ds = generate_synthetic(&SyntheticSpec::waveforms(&counts, 4, 1.0, 1.0), seed).unwrap();
        let Ok(shards) = partition_noniid(&ds, clients, 1.0, seed) else {
            return Ok(());
        };
        prop_assert_eq!(&shards, &partition_noniid(&ds, clients, 1.0, seed).unwrap());
        let mut all: Vec<usize> = shards.iter().flat_map(|s| s.sample_indices.clone()).collect();
        prop_assert!(shards.iter().all(|s| !s.sample_indices.is_empty()));
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn folds_cover_disjointly(labels in proptest::collection::vec(0usize..5, 10..120), k in 2usize..8, seed in any::<u64>()) {
        let plan = stratified_kfold(&labels, k, seed).unwrap();
        let mut seen = vec![0usize; labels.len()];
        for f in 0..k {
            for i in plan.test_indices(f) {
                seen[i] += 1;
            }
            let mut both = plan.test_indices(f);
            both.extend(plan.train_indices(f));
            both.sort_unstable();
            prop_assert_eq!(both, (0..labels.len()).collect::<Vec<_>>());
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn forward_shapes_depend_only_on_arch(values in proptest::collection::vec(-1e3f32..1e3, 10..60), seed in any::<u64>()) {
        let arch = tiny_arch();
        let n = values.len() / 10;
        let batch = Batch::new(1, 10, values[..n * 10].to_vec()).unwrap();
        let m = init_model::<f32>(&arch, seed).unwrap();
        let out = forward(&m, &batch).unwrap();
        prop_assert_eq!(out.reconstruction.data.len(), n * 10);
        prop_assert_eq!(out.scores.dim(), (n, 3));
        prop_assert_eq!(out.latent.dim(), (n, 3));
        let p = predict_proba(&m, &batch).unwrap();
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let acc = accuracy(&argmax_rows(p.view()), &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        if n >= 2 {
            let auc = roc_auc_macro(p.view(), &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&auc));
        }
    }

    #[test]
    fn fedavg_is_order_insensitive(seeds in proptest::collection::vec(any::<u64>(), 1..5), counts in proptest::collection::vec(1usize..50, 5)) {
        let arch = tiny_arch();
        let models: Vec<Model> = seeds.iter().map(|&s| init_model::<f32>(&arch, s).unwrap()).collect();
        let refs: Vec<&Model> = models.iter().collect();
        let cs = &counts[..models.len()];
        let forward_order = fedavg(&refs, cs).unwrap();
        let rev_refs: Vec<&Model> = refs.iter().rev().copied().collect();
        let rev_counts: Vec<usize> = cs.iter().rev().copied().collect();
        let reversed = fedavg(&rev_refs, &rev_counts).unwrap();
        for (a, b) in forward_order.tensors.iter().zip(&reversed.tensors) {
            for (u, v) in a.values.iter().zip(&b.values) {
                prop_assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0));
            }
        }
        prop_assert_eq!(fedavg(&refs, cs).unwrap(), forward_order);
        let same = fedavg(&[&models[0], &models[0]], &[3, 9]).unwrap();
        for (a, b) in same.tensors.iter().zip(&models[0].tensors) {
            for (u, v) in a.values.iter().zip(&b.values) {
                prop_assert!((u - v).abs() <= 1e-6 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_every_field(
        train in proptest::collection::vec(0usize..10_000, 0..30),
        flags in any::<(bool, bool)>(),
        costs in (0.0f64..1e9, 0.0f64..1e9),
        history in proptest::collection::vec(-1e6f64..1e6, 0..50),
        seed in any::<u64>(),
    ) {
        let arch = tiny_arch();
        let mut test: Vec<usize> = train.iter().map(|i| i + 10_000).collect();
        test.dedup();
        let mut client = ClientState::new(7, init_model::<f32>(&arch, seed).unwrap(), train.clone(), test);
        client.train_slow = flags.0;
        client.send_slow = flags.1;
        client.train_time_cost = costs.0;
        client.send_time_cost = costs.1;
        let bytes = encode_client(&client).unwrap();
        let back = decode_client(&bytes).unwrap();
        prop_assert_eq!(&back, &client);
        prop_assert_eq!(encode_client(&back).unwrap(), bytes);

        let mut server = ServerState::new(client.model.clone(), vec![(7, train, vec![])], &HyperParams::default(), seed).unwrap();
        server.clients[0] = client;
        server.rs_test_acc = history.clone();
        server.rs_test_auc = history.iter().map(|v| v / 3.0).collect();
        server.rs_train_loss = history.iter().map(|v| v.abs().sqrt()).collect();
        let bytes = encode_global(&server).unwrap();
        let back = decode_global(&bytes).unwrap();
        prop_assert!(back.rs_test_auc.iter().zip(&server.rs_test_auc).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(&back, &server);
        prop_assert!(decode_client(&bytes).is_err());
    }
}
