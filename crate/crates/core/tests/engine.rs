use comil::data::{generate, split, Dataset, SyntheticSpec};
use comil::engine::{parse_report, run_scenario, AccuracyMatrix, Method, RunRecord, TaskSchedule};
use comil::training::TrainConfig;

fn small_dataset(seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        num_classes: 4,
        bags_per_class: 8,
        instances_per_bag: 12,
        d_in: 16,
        hallmark_fraction: 0.25,
        seed,
        ..Default::default()
    };
    split(&generate(&spec).unwrap(), 0.75, seed).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        lr: 0.05,
        ..TrainConfig::default()
    }
}

#[test]
fn single_task_records_share_shape() {
    let ds = small_dataset(1);
    let sched = TaskSchedule::new(vec![vec![0, 1, 2, 3]]).unwrap();
    for method in Method::ALL {
        let rec = run_scenario(&ds, &sched, method, &quick(), 40, 1).unwrap();
        assert_eq!(rec.accuracy.steps(), 1, "{method}");
        assert_eq!(rec.accuracy.0[0].len(), 1);
        assert_eq!(rec.average_forgetting(), None);
        assert!(rec.to_report().ends_with(",NA\n"));
    }
}

#[test]
fn every_method_keeps_memory_invariants() {
    let ds = small_dataset(2);
    let sched = TaskSchedule::consecutive(4, 2).unwrap();
    for method in Method::ALL {
        for k in [0, 7, 50] {
            let rec = run_scenario(&ds, &sched, method, &quick(), k, 3).unwrap();
            for (t, m) in rec.memory.iter().enumerate() {
                assert!(m.total_instances <= k, "{method} K={k} step {t}");
                assert!(m.max_class_instances <= m.class_budget);
                assert_eq!(m.empty_bags, 0);
                if !method.uses_memory() || k == 0 {
                    assert_eq!(m.total_instances, 0);
                }
            }
            for row in &rec.accuracy.0 {
                assert!(row.iter().all(|a| (0.0..=1.0).contains(a)));
            }
        }
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let ds = small_dataset(4);
    let sched = TaskSchedule::consecutive(4, 2).unwrap();
    for method in Method::ALL {
        let a = run_scenario(&ds, &sched, method, &quick(), 30, 9).unwrap();
        let b = run_scenario(&ds, &sched, method, &quick(), 30, 9).unwrap();
        assert_eq!(a.to_report(), b.to_report(), "{method}");
        assert_eq!(a.memory, b.memory);
    }
}

#[test]
fn finetuning_forgets_the_first_task() {
    let sched = TaskSchedule::consecutive(4, 2).unwrap();
    let forgot = (0..5)
        .filter(|&seed| {
            let rec = run_scenario(
                &small_dataset(seed),
                &sched,
                Method::Finetune,
                &quick(),
                0,
                seed,
            )
            .unwrap();
            rec.accuracy.0[1][0] < rec.accuracy.0[0][0]
        })
        .count();
    assert!(forgot >= 3, "forgetting on {forgot}/5 seeds");
}

#[test]
fn zero_capacity_rehearsal_is_finetuning() {
    let ds = small_dataset(5);
    let sched = TaskSchedule::consecutive(4, 2).unwrap();
    let ft = run_scenario(&ds, &sched, Method::Finetune, &quick(), 0, 2).unwrap();
    for method in [
        Method::Comil,
        Method::RehearseFullBags,
        Method::AttentionTopk,
    ] {
        let rec = run_scenario(&ds, &sched, method, &quick(), 0, 2).unwrap();
        assert!(rec.memory.iter().all(|m| m.total_instances == 0));
        assert_eq!(rec.accuracy.0.len(), ft.accuracy.0.len());
    }
}

#[test]
fn overlapping_splits_are_rejected() {
    let mut ds = small_dataset(6);
    let test = ds
        .splits
        .iter()
        .position(|s| *s == comil::data::Split::Test)
        .unwrap();
    let train = ds
        .splits
        .iter()
        .position(|s| *s == comil::data::Split::Train)
        .unwrap();
    ds.bags[test].bag_id = ds.bags[train].bag_id.clone();
    let sched = TaskSchedule::consecutive(4, 2).unwrap();
    assert!(run_scenario(&ds, &sched, Method::Finetune, &quick(), 0, 1).is_err());
}

#[test]
fn schedule_must_cover_the_dataset() {
    let ds = small_dataset(7);
    let partial = TaskSchedule::new(vec![vec![0, 1]]).unwrap();
    assert!(run_scenario(&ds, &partial, Method::Comil, &quick(), 10, 1).is_err());
    assert!(TaskSchedule::new(vec![vec![0, 1], vec![1, 2]]).is_err());
    assert!(TaskSchedule::new(vec![vec![0], vec![]]).is_err());
}

#[test]
fn schedule_text_round_trip() {
    let s: TaskSchedule = "0,1;2,3;4,5;6,7".parse().unwrap();
    assert_eq!(s, TaskSchedule::consecutive(8, 2).unwrap());
    assert_eq!(s.to_string(), "0,1;2,3;4,5;6,7");
    assert_eq!(s.task_of(5), Some(2));
}

#[test]
fn report_round_trip() {
    let ds = small_dataset(8);
    let sched = TaskSchedule::consecutive(4, 2).unwrap();
    let rec: RunRecord = run_scenario(&ds, &sched, Method::Comil, &quick(), 20, 4).unwrap();
    let parsed = parse_report(&rec.to_report()).unwrap();
    assert_eq!(parsed.method, Method::Comil);
    assert_eq!((parsed.seed, parsed.capacity), (4, 20));
    assert_eq!(parsed.schedule, sched);
    assert_eq!(parsed.accuracy, rec.accuracy);
    assert_eq!(parsed.avg_acc, rec.average_accuracy().unwrap());
    assert_eq!(parsed.avg_forget, rec.average_forgetting());
}

#[test]
fn metric_examples() {
    let hand = AccuracyMatrix(vec![vec![0.9], vec![0.8, 0.7], vec![0.6, 0.5, 0.9]]);
    assert!((hand.average_forgetting().unwrap() - 0.25).abs() < 1e-12);
    let flat = AccuracyMatrix(vec![vec![0.5], vec![0.5, 0.7]]);
    assert_eq!(flat.average_forgetting().unwrap(), 0.0);
    let two = AccuracyMatrix(vec![vec![0.9], vec![0.7, 0.4]]);
    assert!((two.average_forgetting().unwrap() - 0.2).abs() < 1e-12);
    let last = AccuracyMatrix(vec![vec![1.0], vec![0.8, 0.6]]);
    assert!((last.average_accuracy().unwrap() - 0.7).abs() < 1e-15);
    assert!(AccuracyMatrix(vec![vec![0.1]])
        .average_forgetting()
        .is_err());
    assert!(AccuracyMatrix(vec![vec![0.1], vec![0.2]])
        .average_accuracy()
        .is_err());
}
