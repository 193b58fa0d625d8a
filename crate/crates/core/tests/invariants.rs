use gca_core::checkpoint::{from_bytes, to_bytes};
use gca_core::data::{add_gaussian_noise, load_dataset, normalize_sequence, save_dataset, SkeletonSequence, ROOT_JOINT};
use gca_core::model::jitter_params;
use gca_core::numerics::{InitScheme, RngStream};
use gca_core::{AttentionConfig, AttentionMode, InitMode, Model, ModelDims, ModelSpec, StreamSelection, Variant};
use proptest::prelude::*;

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![
        Just(Variant::Gca),
        Just(Variant::TwoStream),
        Just(Variant::BaselineGlobal1),
        Just(Variant::BaselineGlobal2),
    ]
}

prop_compose! {
    fn spec()(
        variant in variant(),
        extra in 0usize..3,
        frames in 1usize..5,
        hidden in 1usize..5,
        classes in 2usize..5,
        n in 1usize..4,
        share_within: bool,
        share_across: bool,
        soft: bool,
        avg: bool,
        score_hidden in 1usize..4,
        streams in prop_oneof![Just(StreamSelection::Both), Just(StreamSelection::Fine), Just(StreamSelection::Coarse)],
        seed in 0u64..1000,
    ) -> ModelSpec {
        let joints = 5 + extra;
        let mut partition: Vec<Vec<usize>> = (0..5).map(|j| vec![j]).collect();
        for j in 5..joints {
            partition[j % 5].push(j);
        }
        ModelSpec {
            variant,
            dims: ModelDims { joints, frames, input_dim: 3, hidden, classes },
            attention: AttentionConfig {
                n_iterations: n,
                share_within_iteration: share_within,
                share_across_iterations: share_across,
                attention_mode: if soft { AttentionMode::Soft } else { AttentionMode::Gate },
                init_mode: if avg { InitMode::Average } else { InitMode::Feedforward },
                score_hidden_dim: score_hidden,
            },
            streams: if variant == Variant::TwoStream { streams } else { StreamSelection::Both },
            partition,
            joint_order: (0..joints).rev().collect(),
            init: InitScheme::UniformScaled,
            seed,
        }
    }
}

fn sequence(spec: &ModelSpec, seed: u64) -> SkeletonSequence {
    let mut rng = RngStream::new(seed);
    let (j, t) = (spec.dims.joints, spec.dims.frames);
    let coords = (0..j * t * 3).map(|_| rng.normal(0.0, 1.0)).collect();
    SkeletonSequence::new("s", 0, j, t, coords).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_are_distributions(spec in spec(), std in 0.05f64..3.0, seed in 0u64..1000) {
        let mut model = Model::new(spec.clone()).unwrap();
        jitter_params(&mut model.store, std, &mut RngStream::new(seed));
        let seq = sequence(&spec, seed + 1);
        for depth in 1..=model.max_depth() {
            let tr = model.forward(&seq, depth, None).unwrap();
            let p = tr.posterior();
            prop_assert_eq!(p.len(), spec.dims.classes);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for maps in tr.attention_maps() {
                prop_assert_eq!(maps.len(), depth);
                for m in maps {
                    prop_assert!((m.total() - 1.0).abs() < 1e-9);
                    prop_assert!(m.values.iter().all(|&v| v > 0.0 && v < 1.0));
                }
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_exactly(spec in spec(), seed in 0u64..1000) {
        let mut model = Model::new(spec.clone()).unwrap();
        jitter_params(&mut model.store, 1.0, &mut RngStream::new(seed));
        let bytes = to_bytes(&model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.spec, &spec);
        prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
        let seq = sequence(&spec, seed);
        let (a, b) = (model.predict(&seq).unwrap(), back.predict(&seq).unwrap());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn dataset_files_round_trip_exactly(seed in 0u64..1000, scale in -30i32..30) {
        let mut rng = RngStream::new(seed);
        let seqs: Vec<SkeletonSequence> = (0..3)
            .map(|n| {
                let coords = (0..4 * 2 * 3).map(|_| rng.normal(0.0, 1.0) * 2f64.powi(scale)).collect();
                SkeletonSequence::new(format!("seq{n}"), n, 4, 2, coords).unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&path, &seqs).unwrap();
        let back = load_dataset(&path).unwrap();
        prop_assert_eq!(back.len(), seqs.len());
        for (a, b) in seqs.iter().zip(&back) {
            prop_assert!(a.coords.iter().zip(&b.coords).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn normalization_anchors_the_root(seed in 0u64..1000) {
        let spec = ModelSpec {
            variant: Variant::Gca,
            dims: ModelDims { joints: 6, frames: 3, input_dim: 3, hidden: 1, classes: 2 },
            attention: AttentionConfig::default(),
            streams: StreamSelection::Both,
            partition: Vec::new(),
            joint_order: Vec::new(),
            init: InitScheme::UniformScaled,
            seed: 0,
        };
        let seq = sequence(&spec, seed);
        let n = normalize_sequence(&seq);
        prop_assert_eq!(n.point(ROOT_JOINT, 0), [0.0; 3]);
        prop_assert_eq!(&normalize_sequence(&n), &n);
        let same = add_gaussian_noise(&n, 0.0, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(same, n);
    }
}
