mod common;

use advft::checkpoint::Checkpoint;
use advft::data::epoch_batches;
use advft::recipes::recipe;
use advft::{
    pgd, project_linf, Architecture, AttackConfig, Batch, ComputationTape, ExperimentConfig, InitMode, Model,
    ScheduleSpec, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pgd_stays_in_ball_and_range(seed in any::<u64>(), eps in 0.0..0.6f64, steps in 1usize..8, uniform in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, x, y) = common::random_model_and_batch(&mut rng, seed % 4 == 0);
        let init = if uniform { InitMode::Uniform } else { InitMode::Zero };
        let cfg = AttackConfig::pgd(eps, steps).with_init(init).with_seed(seed);
        let adv = pgd(&model, &Batch::new(x.clone(), y).unwrap(), &cfg).unwrap();
        for (a, o) in adv.x_adv.data().iter().zip(x.data()) {
            prop_assert!((a - o).abs() <= eps + 1e-9);
            prop_assert!((0.0..=1.0).contains(a));
        }
        prop_assert_eq!(adv.delta, adv.x_adv.sub(&x).unwrap());
    }

    #[test]
    fn projection_is_idempotent((origin, candidate) in (1usize..12).prop_flat_map(|n| (unit_vec(n), prop::collection::vec(-0.5..1.5f64, n))), eps in 0.0..0.5f64) {
        let n = origin.len();
        let origin = Tensor::new(vec![1, n], origin).unwrap();
        let candidate = Tensor::new(vec![1, n], candidate).unwrap();
        let cfg = AttackConfig::pgd(eps, 1);
        let once = project_linf(&candidate, &origin, &cfg).unwrap();
        let twice = project_linf(&once, &origin, &cfg).unwrap();
        prop_assert_eq!(&once, &twice);
        for (p, o) in once.data().iter().zip(origin.data()) {
            prop_assert!((p - o).abs() <= eps + 1e-12 && (0.0..=1.0).contains(p));
        }
    }

    #[test]
    fn backward_is_linear(x in unit_vec(6), w in prop::collection::vec(-2.0..2.0f64, 12), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let x = Tensor::new(vec![2, 3], x).unwrap();
        let w = Tensor::new(vec![3, 4], w).unwrap();
        // f = Σ relu(x·W), g = Σ x⊙x; compare ∇(a·f + b·g) with a·∇f + b·∇g.
        let grad = |ca: f64, cb: f64| {
            let mut tape = ComputationTape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.constant(w.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let r = tape.relu(h);
            let f = tape.sum(r);
            let sq = tape.mul(xv, xv).unwrap();
            let g = tape.sum(sq);
            let fa = tape.scale(f, ca);
            let gb = tape.scale(g, cb);
            let root = tape.add(fa, gb).unwrap();
            tape.backward(root).unwrap().take(xv).unwrap()
        };
        let combined = grad(a, b);
        let separate = grad(1.0, 0.0).scale(a).add(&grad(0.0, 1.0).scale(b)).unwrap();
        prop_assert!(combined.sub(&separate).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn batches_partition_every_epoch(n in 1usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0usize..50, shuffle in any::<bool>()) {
        let batches = epoch_batches(n, bs, seed, epoch, shuffle).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        if !shuffle {
            prop_assert_eq!(&seen, &(0..n).collect::<Vec<_>>());
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn step_schedule_matches_closed_form(base in 1e-5..1.0f64, plateau in 1usize..40, gamma in 0.01..=1.0f64, epoch in 0usize..500) {
        let spec = ScheduleSpec::Step { base_lr: base, plateau, gamma };
        let mut expected = base;
        for _ in 0..epoch / plateau {
            expected *= gamma;
        }
        let got = spec.lr_at(epoch);
        prop_assert!((got - expected).abs() <= 1e-12 * expected.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn config_round_trips(seed in 0..=i64::MAX as u64, per in 10usize..500, mu in 0.1..3.0f64, sigma in 0.1..3.0f64, eps in 0.0..0.3f64, steps in 1usize..20, lr in 1e-4..0.5f64, name in "[a-z][a-z0-9-]{0,12}") {
        prop_assume!(!["pretrain", "scratch", "eval-aft", "eval-scratch"].contains(&name.as_str()));
        let mut cfg = recipe("aft-vs-scratch").unwrap();
        cfg.seed = seed;
        if let advft::config::DatasetSpec::Gaussian(spec) = &mut cfg.dataset {
            spec.per_class = per;
            spec.mu = mu;
            spec.sigma = sigma;
        }
        if let advft::config::Phase::AdvFinetune { name: n, finetune, .. } = &mut cfg.phases[1] {
            *n = name.clone();
            finetune.attack = AttackConfig::pgd(eps, steps);
            if let ScheduleSpec::Ssfd { peak_lr, .. } = &mut finetune.schedule {
                *peak_lr = lr;
            }
        }
        for p in &mut cfg.phases {
            if let advft::config::Phase::Evaluate { init, .. } = p {
                if init == "aft" {
                    *init = name.clone();
                }
            }
        }
        let text = cfg.to_toml().unwrap();
        let again = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.to_toml().unwrap(), text);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), hidden in prop::collection::vec(1usize..10, 0..3), d in 1usize..8, c in 2usize..5) {
        let model = Model::he_uniform(Architecture::mlp(d, &hidden, c), seed).unwrap();
        let ckpt = Checkpoint::new(model.clone()).with_provenance(format!("seed {seed}"));
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.model, &model);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
