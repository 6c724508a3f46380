use mumkit::cli::RunConfig;
use mumkit::nnkit::{Checkpoint, Parameterized};
use mumkit::posenet::{PoseNet, PoseNetConfig};
use mumkit::ssltrain::{masked_mse, MetricAccumulator};
use mumkit::teacher::{TeacherConfig, TeacherMode, TeacherState};
use mumkit::tensorgrid::{FeatureBatch, Shape4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_net(seed: u64) -> PoseNet {
    let cfg = PoseNetConfig {
        stage_channels: [2, 2, 2, 2],
        stage_strides: [1, 2, 1, 2],
        decoder_channels: 2,
        n_keypoints: 2,
        input_size: (8, 8),
        heatmap_size: (8, 8),
        ..PoseNetConfig::default()
    };
    PoseNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn teacher_gap_contracts_by_tau_per_step(tau in 0.0f64..1.0, n in 1usize..12, seed in 0u64..1000) {
        let student = tiny_net(seed);
        let mut t = TeacherState::init_from_student(&tiny_net(seed + 1), TeacherConfig { mode: TeacherMode::Eman, decay: tau, average_std: false }).unwrap();
        let before: Vec<f64> = t.network().params().concat();
        for _ in 0..n {
            t.update(&student).unwrap();
        }
        let s: Vec<f64> = student.params().concat();
        for ((a, b), c) in t.network().params().concat().iter().zip(&s).zip(&before) {
            let want = tau.powi(n as i32) * (c - b);
            prop_assert!(((a - b) - want).abs() <= 1e-12 * (1.0 + c.abs() + b.abs()));
        }
    }

    #[test]
    fn config_dump_round_trips(
        seed in any::<u64>(),
        lr in 1e-6f64..1.0,
        decay in 0.0f64..=1.0,
        mix_prob in 0.0f64..=1.0,
        lambda in 0.0f64..10.0,
        group in 2usize..6,
    ) {
        let mut cfg = RunConfig::default();
        cfg.train.seed = seed;
        cfg.train.lr = lr;
        cfg.train.teacher.decay = decay;
        cfg.train.mix.mix_prob = mix_prob;
        cfg.train.lambda_u = lambda;
        cfg.train.mix.n_group = group;
        let back = RunConfig::parse(&cfg.dump()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.dump(), cfg.dump());
    }

    #[test]
    fn checkpoint_bytes_round_trip(entries in proptest::collection::vec(("[a-z.]{1,12}", proptest::collection::vec(any::<f64>(), 0..20)), 0..6)) {
        let mut c = Checkpoint::new();
        for (name, values) in entries {
            c.insert(name, values);
        }
        let bytes = c.encode();
        prop_assert_eq!(Checkpoint::decode(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        pts in proptest::collection::vec(((0.0f64..64.0, 0.0f64..48.0), (0.0f64..64.0, 0.0f64..48.0), any::<bool>()), 1..10),
    ) {
        let pred: Vec<_> = pts.iter().map(|p| p.0).collect();
        let gt: Vec<_> = pts.iter().map(|p| p.1).collect();
        let vis: Vec<_> = pts.iter().map(|p| p.2).collect();
        let mut acc = MetricAccumulator::default();
        acc.add(&pred, &gt, &vis, (48, 64));
        let r = acc.finish();
        for v in [r.pck01, r.pck02, r.map] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.pck01 <= r.pck02);
    }

    #[test]
    fn masked_mse_is_nonnegative_and_zero_on_match(vals in proptest::collection::vec(-5.0f64..5.0, 2 * 2 * 3 * 3)) {
        let a = FeatureBatch::from_vec(Shape4::new(2, 2, 3, 3), vals).unwrap();
        prop_assert_eq!(masked_mse(&a, &a, None).unwrap().0, 0.0);
        let zero = FeatureBatch::zeros(2, 2, 3, 3);
        prop_assert!(masked_mse(&a, &zero, None).unwrap().0 >= 0.0);
    }
}
