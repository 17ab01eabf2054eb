use comil::math::ParamSet;
use comil::model::{Bag, MilModel, ModelConfig};
use comil::training::{
    classification_loss, combined_loss, distillation_loss, train_task, TrainConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> ModelConfig {
    ModelConfig {
        d_in: 3,
        feature_dim: 5,
        attention_dim: 3,
        head_hidden: 4,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn distillation_is_minimal_at_matching_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let n = rng.random_range(1..=8);
        let old: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let scale = [1e-6, 1e-3, 0.1, 1.0, 5.0][trial % 5];
        let new: Vec<f64> = old
            .iter()
            .map(|o| o + scale * rng.random_range(-1.0..1.0))
            .collect();
        let at_min = distillation_loss(&old, &old, n).unwrap();
        let perturbed = distillation_loss(&old, &new, n).unwrap();
        assert!(perturbed >= at_min, "trial {trial}: {perturbed} < {at_min}");
    }
}

proptest! {
    #[test]
    fn classification_loss_is_nonnegative(logits in prop::collection::vec(-50.0f64..50.0, 1..8), pick in 0usize..8) {
        let target = pick % logits.len();
        prop_assert!(classification_loss(&logits, target).unwrap() >= 0.0);
    }

    #[test]
    fn distillation_loss_is_nonnegative(pairs in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 0..8)) {
        let (old, new): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(distillation_loss(&old, &new, old.len()).unwrap() >= 0.0);
    }
}

#[test]
fn combined_loss_matches_straight_line_evaluation() {
    let mut model = MilModel::new(cfg(), &[0, 1], 17).unwrap();
    let prev = model.clone();
    model.expand_head(&[2], 18).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let bags = [
        Bag::new("p", 2, vec![vec![0.5, -1.0, 0.25], vec![1.5, 0.0, -0.5]]).unwrap(),
        Bag::new("q", 0, vec![vec![-0.75, 0.5, 2.0]]).unwrap(),
    ];
    for bag in &bags {
        let new = model.logits(bag).unwrap();
        let old = prev.logits(bag).unwrap();
        let target = model.class_index(bag.label).unwrap();
        let norm: f64 = new.iter().map(|x| x.exp()).sum();
        let cls = -(new[target].exp() / norm).ln();
        let dist: f64 = (0..2)
            .map(|j| {
                let (p, q) = (sigmoid(old[j]), sigmoid(new[j]));
                -(p * q.ln() + (1.0 - p) * (1.0 - q).ln())
            })
            .sum();
        let got = combined_loss(&model, Some(&prev), bag).unwrap();
        assert!((got.cls - cls).abs() < 1e-12, "{}", bag.bag_id);
        assert!((got.dist - dist).abs() < 1e-12, "{}", bag.bag_id);
        assert!((got.total - (cls + dist)).abs() < 1e-12);
    }
}

fn class_bags(rng: &mut ChaCha8Rng, class: usize, centre: &[f64], count: usize) -> Vec<Bag> {
    (0..count)
        .map(|b| {
            let xs = (0..4)
                .map(|_| {
                    centre
                        .iter()
                        .map(|c| c + rng.random_range(-0.5..0.5))
                        .collect()
                })
                .collect();
            Bag::new(format!("c{class}_{b}"), class, xs).unwrap()
        })
        .collect()
}

/// Mean |σ(new) − σ(old)| over the old classes after training on new classes only.
fn drift(seed: u64, distill: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let old_bags: Vec<Bag> = [0, 1]
        .iter()
        .flat_map(|&c| class_bags(&mut rng, c, &[2.0 * c as f64 - 1.0, 1.0, 0.0], 6))
        .collect();
    let new_bags: Vec<Bag> = [2, 3]
        .iter()
        .flat_map(|&c| class_bags(&mut rng, c, &[0.0, -1.0, 2.0 * c as f64 - 5.0], 6))
        .collect();
    let mut model = MilModel::new(cfg(), &[0, 1], seed).unwrap();
    let train = |epochs, distill_enabled| TrainConfig {
        epochs,
        lr: 0.05,
        shuffle_seed: seed,
        distill_enabled,
    };
    train_task(
        &mut model,
        None,
        &old_bags.iter().collect::<Vec<_>>(),
        &train(30, false),
    )
    .unwrap();
    let prev = model.clone();
    model.expand_head(&[2, 3], seed + 1).unwrap();
    let prev_ref = distill.then_some(&prev);
    train_task(
        &mut model,
        prev_ref,
        &new_bags.iter().collect::<Vec<_>>(),
        &train(30, distill),
    )
    .unwrap();

    let mut total = 0.0;
    let mut count = 0.0;
    for bag in old_bags.iter().chain(&new_bags) {
        let (old, new) = (prev.logits(bag).unwrap(), model.logits(bag).unwrap());
        for j in 0..2 {
            total += (sigmoid(new[j]) - sigmoid(old[j])).abs();
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn distillation_reduces_drift_of_old_outputs() {
    let wins = (0..5)
        .filter(|&seed| drift(seed, true) < drift(seed, false))
        .count();
    assert_eq!(wins, 5, "distillation reduced drift on {wins}/5 seeds");
}

#[test]
fn training_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bags: Vec<Bag> = [0, 1]
        .iter()
        .flat_map(|&c| class_bags(&mut rng, c, &[c as f64, 0.0, 1.0], 4))
        .collect();
    let refs: Vec<&Bag> = bags.iter().collect();
    let run = || {
        let mut m = MilModel::new(cfg(), &[0, 1], 9).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            lr: 0.05,
            shuffle_seed: 3,
            distill_enabled: false,
        };
        let summary = train_task(&mut m, None, &refs, &cfg).unwrap();
        (m, summary.final_epoch_loss.to_bits())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    let bits = |m: &MilModel| {
        m.tensors()
            .iter()
            .flat_map(|t| t.iter().map(|v| v.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn training_rejects_labels_outside_the_head() {
    let mut m = MilModel::new(cfg(), &[0], 1).unwrap();
    let bag = Bag::new("z", 4, vec![vec![0.0; 3]]).unwrap();
    assert!(train_task(&mut m, None, &[&bag], &TrainConfig::default()).is_err());
}
