use std::collections::BTreeSet;

use phoenix::data::{
    data_sharing_split, load_cifar10, make_toy_dataset, partition_iid, partition_label_skew, toy_template,
    DataPlan, Dataset, Split, CIFAR_RECORD_BYTES,
};
use phoenix::numeric::Tensor;
use phoenix::Error;

/// Labels only; images are 1x1 placeholders so CIFAR-sized pools stay cheap.
fn cifar_like(per_class: usize, classes: usize) -> Dataset {
    let n = per_class * classes;
    Dataset::new(Tensor::zeros(&[n, 1, 1, 1]), (0..n).map(|i| i % classes).collect(), classes).unwrap()
}

fn assert_partition(lists: &[Vec<usize>], expected: &BTreeSet<usize>) {
    let mut seen = BTreeSet::new();
    for l in lists {
        for &i in l {
            assert!(seen.insert(i), "index {i} assigned twice");
        }
    }
    assert_eq!(&seen, expected);
}

#[test]
fn iid_cifar_scale_sizes_and_class_balance() {
    let d = cifar_like(5000, 10);
    let p = partition_iid(&d, 10, 42).unwrap();
    assert!(p.assignments.iter().all(|a| a.len() == 5000));
    assert_partition(&p.assignments, &(0..50_000).collect());
    let ideal = 50_000.0 / 100.0;
    for a in &p.assignments {
        let mut counts = [0usize; 10];
        a.iter().for_each(|&i| counts[d.labels()[i]] += 1);
        for c in counts {
            assert!((c as f64 - ideal).abs() <= 0.05 * ideal, "class count {c}");
        }
    }
}

#[test]
fn label_skew_cifar_shards() {
    let d = cifar_like(5000, 10);
    let p = partition_label_skew(&d, 10, 2, 7).unwrap();
    assert_partition(&p.assignments, &(0..50_000).collect());
    let mut holders = vec![BTreeSet::new(); 10];
    for (c, a) in p.assignments.iter().enumerate() {
        let labels: BTreeSet<usize> = a.iter().map(|&i| d.labels()[i]).collect();
        assert!(labels.len() <= 2);
        labels.iter().for_each(|&l| {
            holders[l].insert(c);
        });
        // Every shard holds 2500 samples of one class.
        assert_eq!(a.len(), 5000);
    }
    assert!(holders.iter().all(|h| !h.is_empty() && h.len() <= 2));
}

#[test]
fn label_skew_random_parameters_keep_bounds() {
    for seed in 0..20u64 {
        let classes = 2 + (seed as usize % 7);
        let k = 2 + (seed as usize % 5);
        let cpc = 1 + (seed as usize % 3);
        let d = cifar_like(12, classes);
        match partition_label_skew(&d, k, cpc, seed) {
            Ok(p) => {
                assert_partition(&p.assignments, &(0..d.len()).collect());
                for a in &p.assignments {
                    let labels: BTreeSet<usize> = a.iter().map(|&i| d.labels()[i]).collect();
                    assert!(labels.len() <= cpc);
                }
            }
            Err(e) => assert!(matches!(e, Error::Argument(_))),
        }
    }
}

#[test]
fn sharing_plan_invariants_over_grid() {
    let d = cifar_like(5000, 10);
    for beta in [2.5, 5.0, 15.0, 25.0] {
        for alpha in [0.0, 25.0, 50.0, 75.0, 100.0] {
            let p = data_sharing_split(&d, 10, beta, alpha, 2, 3).unwrap();
            let c: BTreeSet<usize> = p.client_part.iter().flatten().copied().collect();
            let s: BTreeSet<usize> = p.server_part.iter().copied().collect();
            assert_eq!(c.len(), 40_000);
            assert_eq!(s.len(), 10_000);
            assert!(c.is_disjoint(&s));
            assert_eq!(c.len() + s.len(), 50_000);
            let g = (beta / 100.0 * 40_000.0_f64).round() as usize;
            assert_eq!(p.shared_pool.len(), g);
            assert!(p.shared_pool.iter().all(|i| s.contains(i)));
            assert_eq!(p.warmup_indices(), &p.shared_pool[..]);
            let m = (alpha / 100.0 * g as f64).round() as usize;
            for (part, merged) in p.client_part.iter().zip(&p.merged_clients) {
                assert_eq!(merged.len(), part.len() + m);
            }
            if alpha == 0.0 {
                assert_eq!(p.merged_clients, p.client_part);
            }
            // Stratified: every class keeps 4000 client-side samples.
            let mut counts = [0usize; 10];
            c.iter().for_each(|&i| counts[d.labels()[i]] += 1);
            assert_eq!(counts, [4000; 10]);
        }
    }
}

#[test]
fn toy_samples_are_template_separable() {
    // 1-NN against the clean templates under every allowed shift.
    let side = 8;
    let d = make_toy_dataset(8, 50, side, 5).unwrap();
    let mut refs = Vec::new();
    for c in 0..8 {
        for dx in -1..=1 {
            for dy in -1..=1 {
                refs.push((c, toy_template(c, side, dx, dy)));
            }
        }
    }
    let mut correct = 0;
    for i in 0..d.len() {
        let x = d.images().row(i);
        let best = refs
            .iter()
            .map(|(c, t)| (t.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f32>(), *c))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        correct += usize::from(best.1 == d.labels()[i]);
    }
    assert!(correct as f64 / d.len() as f64 >= 0.95, "{correct}/{}", d.len());
}

#[test]
fn cifar_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let record = |label: u8, v: u8| {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(v, CIFAR_RECORD_BYTES - 1));
        r
    };
    for i in 1..=5 {
        let mut bytes = record(i, 0);
        bytes.extend(record(9, 255));
        std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), bytes).unwrap();
    }
    std::fs::write(dir.path().join("test_batch.bin"), record(0, 128)).unwrap();
    let train = load_cifar10(dir.path(), Split::Train).unwrap();
    assert_eq!(train.len(), 10);
    assert_eq!(train.images().shape(), &[10, 3, 32, 32]);
    assert_eq!(train.labels()[..2], [1, 9]);
    assert_eq!(train.images().row(1)[0], 1.0);
    assert_eq!(train.images().row(0)[0], -1.0);
    let test = load_cifar10(dir.path(), Split::Test).unwrap();
    assert_eq!(test.len(), 1);

    std::fs::write(dir.path().join("test_batch.bin"), vec![0u8; 100]).unwrap();
    assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Format { offset: 0, .. })));
    std::fs::remove_file(dir.path().join("test_batch.bin")).unwrap();
    assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Io { .. })));
}

#[test]
fn plan_json_is_byte_stable() {
    let d = make_toy_dataset(4, 20, 8, 0).unwrap();
    let a = DataPlan::from_sharing(&data_sharing_split(&d, 4, 25.0, 100.0, 2, 9).unwrap(), 9);
    let b = DataPlan::from_sharing(&data_sharing_split(&d, 4, 25.0, 100.0, 2, 9).unwrap(), 9);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.json");
    a.save(&path).unwrap();
    assert_eq!(DataPlan::load(&path).unwrap(), a);
}
