use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_task(seed: u64) -> TaskDataset {
    let spec = SyntheticSpec {
        blob_sigma: 1.0,
        center_jitter: 1.0,
        ..SyntheticSpec::marker(3, 8, 20)
    };
    generate_synthetic_task("tiny", &spec, &mut rng(seed)).unwrap()
}

fn store_2x2(values: Vec<f64>, c: usize, labels: Vec<u8>) -> PatchStore {
    let names = (0..c).map(|i| format!("c{i}")).collect();
    PatchStore::new((2, 2, c), names, values, labels).unwrap()
}

#[test]
fn forced_flip_and_involution() {
    let store = store_2x2(vec![0.0; 12], 1, vec![0, 1, 1]);
    let task = TaskDataset::new("t", store, vec![0, 1], vec![2]).unwrap();
    let flipped = task.with_transform(Transform::LabelFlip);
    assert_eq!(flipped.labels(&[0, 1, 2]), vec![1, 0, 0]);
    let back = flipped.with_transform(Transform::LabelFlip);
    assert!(back.same_content(&task));
    assert_eq!(back.provenance().transforms.len(), 2);
    let unchanged = flip_labels(&task, &mut rng(0), 0.0);
    assert_eq!(unchanged, task);
}

#[test]
fn ccw_rotation_of_two_by_two() {
    let rotated = rotate_image(&[1.0, 2.0, 3.0, 4.0], 2, 1, 1);
    assert_eq!(rotated, vec![2.0, 4.0, 1.0, 3.0]);
    assert_eq!(rotate_image(&rotated, 2, 1, 3), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn channel_swap_on_two_channels() {
    let store = store_2x2(vec![0.1, 0.9, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6], 2, vec![1]);
    let task = TaskDataset::new("t", store, vec![0], vec![]).unwrap();
    let swapped = task.with_transform(Transform::ChannelShuffle(Permutation::new(vec![1, 0]).unwrap()));
    assert_eq!(swapped.patch(0), vec![0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4]);
    assert_eq!(swapped.channel_names(), vec!["c1", "c0"]);
    let same = task.with_transform(Transform::ChannelShuffle(Permutation::identity(2)));
    assert!(same.same_content(&task));
}

#[test]
fn permutation_validation_and_inverse() {
    assert!(Permutation::new(vec![0, 0, 1]).is_err());
    assert!(Permutation::new(vec![0, 3, 1]).is_err());
    let p = Permutation::new(vec![2, 0, 1]).unwrap();
    assert!(p.then(&p.inverse()).unwrap().is_identity());
    assert!(p.inverse().then(&p).unwrap().is_identity());
}

#[test]
fn rotation_rejects_non_square() {
    let names = vec!["a".to_string()];
    let store = PatchStore::new((2, 3, 1), names, vec![0.0; 6], vec![0]).unwrap();
    let task = TaskDataset::new("t", store, vec![0], vec![]).unwrap();
    assert!(matches!(
        rotate_patches(&task, &mut rng(0), 1.0),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn zero_probability_augmentation_is_identity() {
    let task = tiny_task(1);
    let out = augment_task(&task, &AugmentationConfig::none(), &mut rng(2)).unwrap();
    assert_eq!(out, task);
    assert!(out.provenance().transforms.is_empty());
}

#[test]
fn full_probability_augmentation_is_reproducible() {
    let task = tiny_task(1);
    let cfg = AugmentationConfig::equal(1.0);
    let a = augment_task(&task, &cfg, &mut rng(5)).unwrap();
    let b = augment_task(&task, &cfg, &mut rng(5)).unwrap();
    assert_eq!(a.provenance(), b.provenance());
    assert_eq!(a.provenance().transforms.len(), 3);
    assert!(matches!(a.provenance().transforms[0], Transform::LabelFlip));
}

#[test]
fn invalid_probability_rejected() {
    let cfg = AugmentationConfig {
        p_flip: 1.5,
        ..AugmentationConfig::default()
    };
    assert!(augment_task(&tiny_task(0), &cfg, &mut rng(0)).is_err());
}

#[test]
fn stratified_split_sizes() {
    let task = tiny_task(3);
    assert_eq!(task.train_pool().len(), 12);
    assert_eq!(task.test_pool().len(), 8);
    for class in 0..2 {
        assert_eq!(task.class_ids(task.train_pool(), class).len(), 6);
    }
}

#[test]
fn pools_must_partition() {
    let store = store_2x2(vec![0.0; 12], 1, vec![0, 1, 1]);
    assert!(TaskDataset::new("t", store.clone(), vec![0, 1], vec![1, 2]).is_err());
    assert!(TaskDataset::new("t", store, vec![0], vec![2]).is_err());
}

#[test]
fn fixed_episode_has_one_per_class() {
    let task = tiny_task(4);
    let spec = EpisodeSpec {
        k_max: 1,
        variable: false,
        balanced: true,
        query_per_class: 2,
        query_from: Split::Train,
    };
    let ep = sample_episode(&task, &spec, &mut rng(0)).unwrap();
    assert_eq!(ep.k_tilde, 1);
    let mut labels = ep.support.labels.clone();
    labels.sort_unstable();
    assert_eq!(labels, vec![0, 1]);
    assert_eq!(ep.query.len(), 4);
    assert!(ep.query_ids.iter().all(|i| !ep.support_ids.contains(i)));
    assert!(ep.query_ids.iter().all(|i| task.train_pool().contains(i)));
}

#[test]
fn insufficient_pool_names_class() {
    let task = tiny_task(4);
    let spec = EpisodeSpec {
        k_max: 7,
        ..EpisodeSpec::default()
    };
    let err = sample_episode(&task, &spec, &mut rng(0)).unwrap_err();
    assert!(err.to_string().contains("class 0"), "{err}");
}
