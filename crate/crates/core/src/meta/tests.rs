use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{Mlp, Param, ParamRole};
use crate::tasks::{generate_synthetic_task, SyntheticSpec};
use crate::tensor::{Tensor, Var};

/// `L(θ) = a·θ²` regardless of the batch.
struct Quadratic {
    a: f64,
    init: f64,
}

impl Learner for Quadratic {
    fn init(&self, _rng: &mut dyn RngCore) -> Result<ParamSet> {
        ParamSet::new(
            ParamRole::Meta,
            vec![Param {
                name: "theta".into(),
                value: Tensor::scalar(self.init),
                trainable: true,
            }],
        )
    }

    fn forward(
        &self,
        _: &mut Tape,
        _: &ParamSet,
        _: &[Var],
        _: &Tensor,
        _: ForwardMode,
        _: &mut dyn RngCore,
    ) -> Result<crate::model::ForwardOutput> {
        Err(Error::Usage("quadratic has no forward".into()))
    }

    fn loss(
        &self,
        tape: &mut Tape,
        _: &ParamSet,
        vars: &[Var],
        _: &Batch,
        _: ForwardMode,
        _: &mut dyn RngCore,
    ) -> Result<crate::model::LossOutput> {
        let sq = tape.mul(vars[0], vars[0])?;
        Ok(crate::model::LossOutput {
            loss: tape.scale(sq, self.a)?,
            running: Vec::new(),
        })
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_task(id: &str, signal: usize, seed: u64) -> TaskDataset {
    let spec = SyntheticSpec {
        blob_sigma: 1.0,
        center_jitter: 1.0,
        ..SyntheticSpec::marker(signal, 8, 40)
    };
    generate_synthetic_task(id, &spec, &mut rng(seed)).unwrap()
}

fn dummy_batch() -> Batch {
    Batch::new(Tensor::zeros(&[1, 1]), vec![0]).unwrap()
}

fn theta_of(p: &ParamSet) -> f64 {
    p.get("theta").unwrap().item().unwrap()
}

fn small_config() -> MetaConfig {
    MetaConfig {
        meta_batch: 2,
        iterations: 6,
        episode: EpisodeSpec {
            k_max: 3,
            query_per_class: 2,
            ..EpisodeSpec::default()
        },
        checkpoint_every: 3,
        ..MetaConfig::default()
    }
}

fn mlp() -> Mlp {
    Mlp::new(vec![8 * 8 * 7, 6, 2]).unwrap()
}

#[test]
fn one_inner_step_on_quadratic() {
    let q = Quadratic { a: 1.0, init: 1.0 };
    let theta = q.init(&mut rng(0)).unwrap();
    let before = theta.checksum();
    let (phi, losses) = inner_adapt(&q, &theta, &dummy_batch(), 0.01, 1, &mut rng(0)).unwrap();
    assert!((theta_of(&phi) - 0.98).abs() < 1e-15);
    assert_eq!(losses, vec![1.0]);
    assert_eq!(theta.checksum(), before);
    assert_eq!(phi.role(), ParamRole::Adapted);
    let (same, _) = inner_adapt(&q, &theta, &dummy_batch(), 0.0, 1, &mut rng(0)).unwrap();
    assert!(same.bit_eq(&theta));
    assert!(inner_adapt(&q, &theta, &dummy_batch(), 0.01, 0, &mut rng(0)).is_err());
}

#[test]
fn two_steps_equal_two_chained_single_steps() {
    let learner = mlp();
    let theta = learner.init(&mut rng(1)).unwrap();
    let task = tiny_task("t", 3, 2);
    let support = task.batch(&task.train_pool()[..6]).unwrap();
    let (two, _) = inner_adapt(&learner, &theta, &support, 0.05, 2, &mut rng(3)).unwrap();
    let mut r = rng(3);
    let (one, _) = inner_adapt(&learner, &theta, &support, 0.05, 1, &mut r).unwrap();
    let (chained, _) = inner_adapt(&learner, &one, &support, 0.05, 1, &mut r).unwrap();
    assert!(two.bit_eq(&chained));
}

#[test]
fn second_order_quadratic_matches_closed_form() {
    let (a, alpha, theta0) = (1.5, 0.1, 0.7);
    let q = Quadratic { a, init: theta0 };
    let theta = q.init(&mut rng(0)).unwrap();
    let task = tiny_task("t", 3, 0);
    let episode = sample_episode(&task, &EpisodeSpec::default().with_k(2), &mut rng(0)).unwrap();
    let config = MetaConfig {
        inner_lr: alpha,
        order: MetaOrder::Second,
        ..MetaConfig::default()
    };
    let (g, report, _) = meta_gradient(&q, &theta, std::slice::from_ref(&episode), &config, &mut rng(0)).unwrap();
    let phi = theta0 * (1.0 - 2.0 * a * alpha);
    let expected = 2.0 * a * phi * (1.0 - 2.0 * a * alpha);
    assert!((g.get("theta").unwrap().item().unwrap() - expected).abs() < 1e-12);
    assert!((report.meta_loss - a * phi * phi).abs() < 1e-12);

    let first = MetaConfig {
        order: MetaOrder::First,
        ..config
    };
    let (g1, _, _) = meta_gradient(&q, &theta, &[episode], &first, &mut rng(0)).unwrap();
    assert!((g1.get("theta").unwrap().item().unwrap() - 2.0 * a * phi).abs() < 1e-12);
}

#[test]
fn zero_inner_rate_reduces_to_plain_gradient_and_orders_agree() {
    let learner = mlp();
    let theta = learner.init(&mut rng(4)).unwrap();
    let task = tiny_task("t", 3, 5);
    let episode = sample_episode(&task, &EpisodeSpec::default().with_k(3), &mut rng(6)).unwrap();
    let mut config = MetaConfig {
        inner_lr: 0.0,
        ..MetaConfig::default()
    };
    let (first, _, _) = meta_gradient(&learner, &theta, std::slice::from_ref(&episode), &config, &mut rng(0)).unwrap();
    let (_, plain, _) = loss_and_grads(&learner, &theta, &episode.query, ForwardMode::Train, &mut rng(0)).unwrap();
    assert_eq!(first, plain);
    config.order = MetaOrder::Second;
    let (second, _, _) = meta_gradient(&learner, &theta, &[episode], &config, &mut rng(0)).unwrap();
    assert_eq!(first, second);
}

#[test]
fn identical_episodes_average_exactly() {
    let learner = mlp();
    let theta = learner.init(&mut rng(7)).unwrap();
    let task = tiny_task("t", 4, 8);
    let episode = sample_episode(&task, &EpisodeSpec::default().with_k(3), &mut rng(9)).unwrap();
    let config = MetaConfig::default();
    let (one, _, _) = meta_gradient(&learner, &theta, std::slice::from_ref(&episode), &config, &mut rng(0)).unwrap();
    let (two, _, _) = meta_gradient(&learner, &theta, &[episode.clone(), episode], &config, &mut rng(0)).unwrap();
    assert_eq!(one, two);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let learner = mlp();
    let registry = vec![tiny_task("a", 2, 1), tiny_task("b", 3, 2)];
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    let start = MetaState::new(&learner, 11).unwrap();
    let a = meta_train(&learner, &registry, &config, start.clone(), Some(dir.path())).unwrap();
    let b = meta_train(&learner, &registry, &config, start, None).unwrap();
    assert!(a.state.bit_eq(&b.state));
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 6);

    let template = MetaState::new(&learner, 0).unwrap().params;
    let mid = MetaState::load(&checkpoint_dir(dir.path(), 3), &template).unwrap();
    assert_eq!(mid.iteration, 3);
    let resumed = meta_train(&learner, &registry, &config, mid, None).unwrap();
    assert!(resumed.state.bit_eq(&a.state));
    assert_eq!(resumed.log[..], a.log[3..]);

    let csv = std::fs::read_to_string(dir.path().join("training_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with(LOG_HEADER));
}

#[test]
fn disabled_augmentation_keeps_base_tasks() {
    let registry = vec![tiny_task("only", 2, 1)];
    let config = MetaConfig {
        augmentation: AugmentationConfig::none(),
        ..small_config()
    };
    let mut rngs = MetaRngs::from_seed(3);
    let batch = draw_meta_batch(&registry, &config, &mut rngs).unwrap();
    assert!(batch.iter().all(|t| t.provenance().transforms.is_empty() && *t == registry[0]));
}

#[test]
fn divergence_aborts_training() {
    let q = Quadratic { a: 1.0, init: 100.0 };
    let registry = vec![tiny_task("a", 2, 1)];
    let config = MetaConfig {
        iterations: 500,
        ..small_config()
    };
    let state = MetaState::new(&q, 0).unwrap();
    let err = meta_train(&q, &registry, &config, state, None).err().unwrap();
    match err {
        Error::Training { iteration, message } => {
            assert_eq!(iteration, 50);
            assert!(message.contains("diverged"));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn adaptation_curve_shapes() {
    let learner = mlp();
    let theta = learner.init(&mut rng(2)).unwrap();
    let task = tiny_task("t", 5, 3);
    let none = adapt_and_eval(&learner, &theta, &task, &[], 5, 0.01, 0, &mut rng(0)).unwrap();
    assert_eq!(none.curve.len(), 1);
    let ids = &task.train_pool()[..8];
    let out = adapt_and_eval(&learner, &theta, &task, ids, 3, 0.01, 0, &mut rng(0)).unwrap();
    assert_eq!(out.curve.len(), 4);
    assert_eq!(out.evaluations.len(), 4);
    assert_eq!(out.evaluations[3].labels.len(), task.test_pool().len());
    let zero = adapt_and_eval(&learner, &theta, &task, ids, 0, 0.01, 0, &mut rng(0)).unwrap();
    assert_eq!(zero.curve, vec![out.curve[0]]);
}

#[test]
fn argmax_ties_go_to_first_class() {
    assert_eq!(argmax_rows(&[0.5, 0.5, 0.2, 0.8, 0.9, 0.1], 2), vec![0, 1, 0]);
}
