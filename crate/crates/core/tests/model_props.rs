use agile_core::model::{predict_probs, sgd_step, Batch, Classifier, ForwardMode, Learner, ModelConfig, ParamGrads};
use agile_core::tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_inputs(n: usize, (h, w, c): (usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![n, h, w, c], (0..n * h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (1usize..4, 0usize..3, 1usize..4, 1usize..6, prop_oneof![Just(1usize), Just(3)], 0.0f64..0.5).prop_map(
        |(blocks, extra, c, filters, kernel_size, dropout_rate)| {
            // Spatial size divisible by 2^blocks, plus a possibly odd remainder that pooling truncates.
            let h = (1 << blocks) * (1 + extra);
            ModelConfig {
                input_shape: (h, h + extra, c),
                blocks,
                filters,
                kernel_size,
                classes: 2,
                dropout_rate,
            }
        },
    )
}

fn logits_shape(learner: &Classifier, inputs: &Tensor, mode: ForwardMode, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = learner.init(&mut rng).unwrap();
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.bind(&mut tape);
    let out = learner.forward(&mut tape, &params, &vars, inputs, mode, &mut rng).unwrap();
    tape.shape(out.logits).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logits_are_n_by_two(config in config_strategy(), n in 1usize..4, seed in any::<u64>()) {
        let learner = Classifier::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = random_inputs(n, config.input_shape, &mut rng);
        for mode in [ForwardMode::Train, ForwardMode::Eval, ForwardMode::Mc] {
            prop_assert_eq!(logits_shape(&learner, &inputs, mode, seed), vec![n, 2]);
        }
    }

    #[test]
    fn eval_forward_is_pure(seed in any::<u64>(), rng_a in any::<u64>(), rng_b in any::<u64>()) {
        let learner = Classifier::new(ModelConfig {
            input_shape: (8, 8, 3),
            blocks: 2,
            filters: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = learner.init(&mut rng).unwrap();
        let inputs = random_inputs(5, (8, 8, 3), &mut rng);
        let a = predict_probs(&learner, &params, &inputs, ForwardMode::Eval, &mut ChaCha8Rng::seed_from_u64(rng_a), 2).unwrap();
        let b = predict_probs(&learner, &params, &inputs, ForwardMode::Eval, &mut ChaCha8Rng::seed_from_u64(rng_b), 64).unwrap();
        prop_assert!(a.bit_eq(&b));
        for row in a.data().chunks_exact(2) {
            prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adapted_parameters_never_alias_theta(seed in any::<u64>(), lr in 0.001f64..1.0) {
        let learner = Classifier::new(ModelConfig {
            input_shape: (4, 4, 2),
            blocks: 1,
            filters: 2,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = learner.init(&mut rng).unwrap();
        let before = theta.clone();
        let mut grads = ParamGrads::default();
        for p in theta.iter().filter(|p| p.trainable) {
            grads.insert(p.name.clone(), p.value.map(|_| 1.0));
        }
        let mut phi = sgd_step(&theta.to_adapted(), &grads, lr).unwrap();
        prop_assert!(theta.bit_eq(&before));
        for i in 0..phi.len() {
            let bumped = phi.param(i).value.map(|v| v + 1.0);
            phi.set(i, bumped).unwrap();
        }
        prop_assert!(theta.bit_eq(&before));
        for (p, q) in theta.iter().zip(phi.iter()) {
            prop_assert_eq!(&p.name, &q.name);
            prop_assert_eq!(p.value.shape(), q.value.shape());
        }
    }
}

#[test]
fn running_statistics_are_excluded_from_updates() {
    let learner = Classifier::new(ModelConfig {
        input_shape: (8, 8, 2),
        blocks: 2,
        filters: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = learner.init(&mut rng).unwrap();
    let batch = Batch::new(random_inputs(4, (8, 8, 2), &mut rng), vec![0, 1, 1, 0]).unwrap();
    let (_, grads, _) = agile_core::model::loss_and_grads(&learner, &theta, &batch, ForwardMode::Train, &mut rng).unwrap();
    assert_eq!(grads.len(), theta.iter().filter(|p| p.trainable).count());
    let phi = sgd_step(&theta, &grads, 0.5).unwrap();
    for (p, q) in theta.iter().zip(phi.iter()) {
        if p.trainable {
            assert!(!p.value.bit_eq(&q.value), "{} did not move", p.name);
        } else {
            assert!(p.value.bit_eq(&q.value), "{} moved", p.name);
        }
    }
}
