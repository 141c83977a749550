use proptest::prelude::*;
use robustfeat_core::attack::{self, AttackConfig, Target};
use robustfeat_core::loss::{center_penalties, center_loss, cross_entropy, joint_loss, CenterRule};
use robustfeat_core::model::{Architecture, ArchitectureDescriptor, Model};
use robustfeat_core::{CenterBank, Graph, Tensor};
use std::sync::OnceLock;

const CLIP: (f64, f64) = (-0.4242, 2.8215);

fn mlp() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(|| Model::build(ArchitectureDescriptor::mnist(Architecture::Mlp200), 17).unwrap())
}

fn batch(n: usize) -> impl Strategy<Value = (Tensor, Vec<usize>)> {
    (
        prop::collection::vec(CLIP.0..CLIP.1, n * 784),
        prop::collection::vec(0usize..10, n),
    )
        .prop_map(move |(px, y)| (Tensor::new(vec![n, 1, 28, 28], px).unwrap(), y))
}

fn logits_and_labels() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<usize>)> {
    (1usize..6, 2usize..8).prop_flat_map(|(b, n)| {
        (
            Just(b),
            Just(n),
            prop::collection::vec(-20.0f64..20.0, b * n),
            prop::collection::vec(0..n, b),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn joint_loss_without_bank_is_cross_entropy_bitwise(
        (b, n, z, y) in logits_and_labels(),
        feats in prop::collection::vec(-3.0f64..3.0, 5 * 4),
    ) {
        let logits = Tensor::new(vec![b, n], z).unwrap();
        let f = Tensor::new(vec![b, 4], feats[..b * 4].to_vec()).unwrap();
        let mut g = Graph::new();
        let lv = g.leaf(&logits, true);
        let fv = g.leaf(&f, true);
        let ce = cross_entropy(&mut g, lv, &y).unwrap();
        let j = joint_loss(&mut g, lv, fv, &y, None).unwrap();
        prop_assert_eq!(g.value(ce)[0].to_bits(), g.value(j)[0].to_bits());
        prop_assert!(g.value(ce)[0] >= 0.0);
    }

    #[test]
    fn center_loss_is_nonnegative_and_zero_at_centers(
        (b, y) in (1usize..6).prop_flat_map(|b| (Just(b), prop::collection::vec(0usize..3, b))),
        centers in prop::collection::vec(-5.0f64..5.0, 3 * 2),
        noise in prop::collection::vec(-1.0f64..1.0, 6 * 2),
    ) {
        let mut bank = CenterBank::new(3, 2, 0.5, 1.0).unwrap();
        bank.centers = Tensor::new(vec![3, 2], centers).unwrap();
        let at: Vec<f64> = y.iter().flat_map(|&c| bank.center(c).to_vec()).collect();
        let at = Tensor::new(vec![b, 2], at).unwrap();
        let off = Tensor::new(vec![b, 2], at.data().iter().zip(&noise).map(|(a, e)| a + e).collect()).unwrap();
        let mut g = Graph::new();
        let av = g.leaf(&at, false);
        let ov = g.leaf(&off, false);
        let zero = center_loss(&mut g, av, &y, &bank).unwrap();
        let pos = center_loss(&mut g, ov, &y, &bank).unwrap();
        prop_assert_eq!(g.value(zero)[0], 0.0);
        prop_assert!(g.value(pos)[0] >= 0.0);
        let expect: f64 = center_penalties(&off, &y, &bank).iter().sum::<f64>() / b as f64;
        prop_assert!((g.value(pos)[0] - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn center_updates_contract_towards_frozen_features(
        feats in prop::collection::vec(-4.0f64..4.0, 8 * 3),
        y in prop::collection::vec(0usize..4, 8),
        alpha in 0.05f64..1.0,
        gradient_rule in any::<bool>(),
    ) {
        let f = Tensor::new(vec![8, 3], feats).unwrap();
        let mut bank = CenterBank::new(4, 3, alpha, 1.0).unwrap();
        if gradient_rule {
            bank.rule = CenterRule::Gradient;
        }
        let total = |bank: &CenterBank| center_penalties(&f, &y, bank).iter().sum::<f64>();
        let mut prev = total(&bank);
        for _ in 0..20 {
            bank.update(&f, &y).unwrap();
            let now = total(&bank);
            prop_assert!(now <= prev + 1e-12, "{} -> {}", prev, now);
            prev = now;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn gradient_attacks_stay_in_ball_and_box(
        (x, y) in batch(2),
        eps in 0.0f64..0.6,
        seed in any::<u64>(),
        kind in 0usize..3,
    ) {
        let cfg = match kind {
            0 => AttackConfig::fgsm(eps, CLIP),
            1 => AttackConfig::bim(eps.max(1e-3), CLIP),
            _ => AttackConfig::pgd(eps.max(1e-3), CLIP),
        };
        let target = Target::new(mlp(), None);
        let res = attack::run(&target, &x, &y, &cfg, &[seed, seed ^ 1]).unwrap();
        for (i, r) in res.iter().enumerate() {
            prop_assert!(r.linf <= cfg.epsilon + 1e-12);
            prop_assert!(r.adversarial.data().iter().all(|v| (CLIP.0..=CLIP.1).contains(v)));
            prop_assert_eq!(r.success, r.adversarial_class != y[i]);
        }
    }

    #[test]
    fn reduction_chain_holds((x, y) in batch(2), eps in 0.01f64..0.5) {
        let target = Target::new(mlp(), None);
        let f = attack::fgsm(&target, &x, &y, &AttackConfig::fgsm(eps, CLIP)).unwrap();
        let one = AttackConfig { steps: 1, step_size: eps, ..AttackConfig::bim(eps, CLIP) };
        let b = attack::bim(&target, &x, &y, &one).unwrap();
        prop_assert_eq!(&f, &b);
        let fixed = AttackConfig { random_start: false, ..AttackConfig::pgd(eps, CLIP) };
        let p = attack::pgd(&target, &x, &y, &fixed, &[1, 2]).unwrap();
        let b = attack::bim(&target, &x, &y, &fixed).unwrap();
        prop_assert_eq!(p, b);
    }
}
