use std::collections::HashSet;
use std::sync::Arc;

use fedspar_core::capacity::PathLossModel;
use fedspar_core::data::{partition_dirichlet, partition_one_class, LabeledDataset};
use fedspar_core::mlp::{Mlp, MlpTask};
use fedspar_core::rng::Stream;
use fedspar_core::task::Task;
use proptest::prelude::*;

fn random_dataset(n: usize, dims: usize, classes: usize, seed: u64) -> LabeledDataset {
    let mut s = Stream::new(seed);
    let features = (0..n * dims).map(|_| s.uniform() as f32).collect();
    let labels = (0..n).map(|_| s.below(classes as u64) as u8).collect();
    LabeledDataset::new(features, labels, dims, classes).unwrap()
}

fn mlp_loss(m: &Mlp, w: &[f64], data: &LabeledDataset, batch: &[usize]) -> f64 {
    let mut g = vec![0.0; m.dim()];
    batch.iter().map(|&i| m.accumulate_gradient(w, data.sample(i), data.label(i), &mut g)).sum::<f64>()
        / batch.len() as f64
}

#[test]
fn mlp_gradient_matches_central_differences() {
    let m = Mlp { input: 12, hidden: 7, output: 4 };
    let data = random_dataset(9, 12, 4, 1);
    let batch: Vec<usize> = (0..9).collect();
    // W1 ∪ b1, W2, b2.
    let layers = [(0, 12 * 7 + 7), (12 * 7 + 7, 12 * 7 + 7 + 28), (12 * 7 + 7 + 28, m.dim())];
    let mut st = Stream::new(2);
    let h = 1e-5;
    let mut checked = 0;
    let mut seed = 0;
    while checked < 50 {
        seed += 1;
        let w = m.init(seed);
        // Central differences are meaningless across a ReLU kink.
        let near_kink = batch.iter().any(|&i| m.forward(&w, data.sample(i)).pre_hidden.iter().any(|z| z.abs() < 1e-3));
        if near_kink {
            continue;
        }
        checked += 1;
        let mut g = vec![0.0; m.dim()];
        for &i in &batch {
            m.accumulate_gradient(&w, data.sample(i), data.label(i), &mut g);
        }
        g.iter_mut().for_each(|x| *x /= batch.len() as f64);
        for &(lo, hi) in &layers {
            let u: Vec<f64> = (0..m.dim()).map(|j| if (lo..hi).contains(&j) { st.gaussian() } else { 0.0 }).collect();
            let plus: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a - h * b).collect();
            let fd = (mlp_loss(&m, &plus, &data, &batch) - mlp_loss(&m, &minus, &data, &batch)) / (2.0 * h);
            let an: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "seed {seed} layer {lo}: {fd} vs {an}");
        }
    }
}

#[test]
fn duplicated_batch_equals_single_sample() {
    let m = Mlp { input: 6, hidden: 5, output: 3 };
    let train = Arc::new(random_dataset(4, 6, 3, 7));
    let task = MlpTask { model: m, train: train.clone(), test: train, shards: vec![vec![0, 1, 2, 3]] };
    let w = m.init(3);
    let mut a = vec![0.0; m.dim()];
    let mut b = vec![0.0; m.dim()];
    let la = task.batch_gradient(&w, 0, &[2], &mut a);
    let lb = task.batch_gradient(&w, 0, &[2, 2, 2], &mut b);
    assert!((la - lb).abs() < 1e-12);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn untrained_model_is_near_chance() {
    let data = random_dataset(10_000, 20, 10, 5);
    let m = Mlp { input: 20, hidden: 20, output: 10 };
    let (loss, acc) = m.evaluate(&m.init(1), &data);
    assert!(loss > 0.0);
    assert!((acc - 0.1).abs() < 0.02, "{acc}");
}

#[test]
fn probabilities_sum_to_one() {
    let m = Mlp::MNIST;
    let w = m.init(4);
    let data = random_dataset(20, 784, 10, 6);
    for i in 0..20 {
        let p = m.forward(&w, data.sample(i)).probs;
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn one_class_partition_for_the_mnist_setup() {
    let labels: Vec<u8> = (0..60_000).map(|i| (i % 10) as u8).collect();
    let shards = partition_one_class(&labels, 10, 50, 1000, 1).unwrap();
    let mut seen = HashSet::new();
    for (k, s) in shards.iter().enumerate() {
        assert_eq!(s.len(), 1000);
        assert!(s.iter().all(|&i| labels[i] as usize == k % 10));
        assert!(s.iter().all(|&i| seen.insert(i)));
    }
    assert_eq!(shards.iter().filter(|s| labels[s[0]] == 3).count(), 5);
    assert_eq!(shards, partition_one_class(&labels, 10, 50, 1000, 1).unwrap());
    assert_ne!(shards, partition_one_class(&labels, 10, 50, 1000, 2).unwrap());
}

#[test]
fn large_alpha_gives_near_uniform_class_mix() {
    let labels: Vec<u8> = (0..20_000).map(|i| (i % 10) as u8).collect();
    let shards = partition_dirichlet(&labels, 10, 10, 1e4, 3).unwrap();
    for s in &shards {
        let mut counts = [0usize; 10];
        for &i in s {
            counts[labels[i] as usize] += 1;
        }
        let total = s.len() as f64;
        assert!((total - 2000.0).abs() < 100.0);
        for c in counts {
            // Multinomial-like spread around 1/10 of the shard.
            assert!((c as f64 / total - 0.1).abs() < 0.02, "{counts:?}");
        }
    }
}

#[test]
fn small_alpha_concentrates_classes() {
    let labels: Vec<u8> = (0..20_000).map(|i| (i % 10) as u8).collect();
    let shards = partition_dirichlet(&labels, 10, 10, 0.05, 3).unwrap();
    let dominant: f64 = shards
        .iter()
        .map(|s| {
            let mut counts = [0usize; 10];
            for &i in s {
                counts[labels[i] as usize] += 1;
            }
            *counts.iter().max().unwrap() as f64 / s.len() as f64
        })
        .sum::<f64>()
        / 10.0;
    assert!(dominant > 0.4, "{dominant}");
}

#[test]
fn mean_capacity_is_near_a_fifth_of_a_bit_per_entry() {
    let model = PathLossModel::default();
    let n = 15_910.0;
    let mut means = Vec::new();
    for seed in 0..40 {
        let caps = model.place_devices(50, 100.0, 1000.0, seed).unwrap();
        means.push(caps.iter().map(|&c| c as f64 / n).sum::<f64>() / 50.0);
    }
    let overall = means.iter().sum::<f64>() / means.len() as f64;
    assert!((overall - 0.22).abs() < 0.2 * 0.22, "{overall}");
    assert!(means.iter().all(|&m| m > 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partitions_are_disjoint_subsets(per in 1usize..40, devices in 1usize..30, seed: u64) {
        let labels: Vec<u8> = (0..1200).map(|i| (i % 6) as u8).collect();
        match partition_one_class(&labels, 6, devices, per, seed) {
            Ok(shards) => {
                let mut seen = HashSet::new();
                for s in &shards {
                    prop_assert_eq!(s.len(), per);
                    for &i in s {
                        prop_assert!(i < labels.len() && seen.insert(i));
                    }
                }
            }
            Err(_) => prop_assert!(devices.div_ceil(6) * per > 200),
        }
    }

    #[test]
    fn dirichlet_assigns_each_sample_once(alpha in 0.05f64..50.0, devices in 1usize..25, seed: u64) {
        let labels: Vec<u8> = (0..600).map(|i| (i % 5) as u8).collect();
        let shards = partition_dirichlet(&labels, 5, devices, alpha, seed).unwrap();
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..600).collect::<Vec<_>>());
        prop_assert!(shards.iter().all(|s| !s.is_empty()));
    }
}
