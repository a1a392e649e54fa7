mod common;

use absa_core::encoder::{tokenize, EncoderConfig, LayerAblation, Vocab};
use absa_core::heads::{combine_scores, total_loss, AggregationMode, InferBranch, Target, Task};
use absa_core::model::{AbsaModel, HeadStack, ModelConfig};
use absa_core::tensor::{Graph, Tensor};
use common::{check_pattern, random_tensor, Aggregator};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn psum_branches_are_independent() {
    for task in [Task::Ae, Task::Asc] {
        let agg = Aggregator::new(task, 1);
        let resp = agg.response(AggregationMode::PSum, 1e-3);
        check_pattern(&resp, |i, j| i == j, 1e-9).unwrap();
    }
}

#[test]
fn hsum_branches_see_deeper_states_only() {
    for task in [Task::Ae, Task::Asc] {
        let agg = Aggregator::new(task, 2);
        let resp = agg.response(AggregationMode::HSum, 1e-3);
        check_pattern(&resp, |i, j| j <= i, 1e-9).unwrap();
    }
}

#[test]
fn psum_and_hsum_agree_on_the_deepest_branch() {
    let agg = Aggregator::new(Task::Ae, 3);
    let p = agg.branch_losses(AggregationMode::PSum, &agg.hiddens);
    let h = agg.branch_losses(AggregationMode::HSum, &agg.hiddens);
    assert_eq!(p[0], h[0]);
    assert_ne!(p[3], h[3]);
}

#[test]
fn identity_branch_layers_make_hsum_a_prefix_sum() {
    // With identity extra layers, branch i of H-SUM reads h0 + ... + hi,
    // which P-SUM reproduces when fed those partial sums.
    let mut agg = Aggregator::new(Task::Asc, 4);
    agg.set.ablation = LayerAblation::Identity;
    let mut prefix = Vec::new();
    let mut acc = agg.hiddens[0].clone();
    prefix.push(acc.clone());
    for h in &agg.hiddens[1..] {
        acc = Tensor::new(acc.shape().to_vec(), acc.data().iter().zip(h.data()).map(|(a, b)| a + b).collect()).unwrap();
        prefix.push(acc.clone());
    }
    let h = agg.branch_losses(AggregationMode::HSum, &agg.hiddens);
    let p = agg.branch_losses(AggregationMode::PSum, &prefix);
    for (a, b) in h.iter().zip(&p) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn tiny_model(task: Task, mode: AggregationMode) -> (AbsaModel, absa_core::encoder::TokenizedSequence, Target) {
    let tokens = tokenize("The keyboard is great.");
    let vocab = Vocab::build([tokens.iter().map(|t| t.text.as_str())], 1).unwrap();
    let config = ModelConfig {
        task,
        mode,
        infer_branch: InferBranch::Mean,
        encoder: EncoderConfig {
            num_layers: 4,
            hidden_size: 8,
            num_heads: 2,
            ff_size: 16,
            vocab_size: vocab.len(),
            max_len: 16,
            init_std: 0.2,
            ..EncoderConfig::default()
        },
    };
    let model = AbsaModel::new(config, 5).unwrap();
    let seq = match task {
        Task::Ae => absa_core::encoder::encode_sequence(&tokens, &vocab, &model.config.encoder),
        Task::Asc => absa_core::encoder::encode_pair(&tokens, &tokenize("keyboard"), &vocab, &model.config.encoder),
    };
    let target = match task {
        Task::Ae => Target::Tags(vec![2, 0, 2, 2, 2]),
        Task::Asc => Target::Class(0),
    };
    (model, seq, target)
}

#[test]
fn total_is_the_plain_sum_of_branch_losses() {
    for task in [Task::Ae, Task::Asc] {
        for mode in [AggregationMode::PSum, AggregationMode::HSum] {
            let (model, seq, target) = tiny_model(task, mode);
            let mut g = Graph::new();
            let (losses, total) = model.loss(&mut g, &seq, &target, None).unwrap();
            assert_eq!(losses.len(), 4);
            let values: Vec<f64> = losses.iter().map(|&l| g.item(l).unwrap()).collect();
            let sum = ((values[0] + values[1]) + values[2]) + values[3];
            assert_eq!(g.item(total).unwrap().to_bits(), sum.to_bits());
        }
    }
}

#[test]
fn vanilla_total_is_its_single_loss() {
    for task in [Task::Ae, Task::Asc] {
        let (model, seq, target) = tiny_model(task, AggregationMode::Vanilla);
        assert!(matches!(model.heads, HeadStack::Vanilla(_)));
        let mut g = Graph::new();
        let (losses, total) = model.loss(&mut g, &seq, &target, None).unwrap();
        assert_eq!(losses.len(), 1);
        assert_eq!(g.item(total).unwrap().to_bits(), g.item(losses[0]).unwrap().to_bits());
    }
}

#[test]
fn total_loss_of_one_term() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(2.5));
    let t = total_loss(&mut g, &[x]).unwrap();
    assert_eq!(g.item(t).unwrap(), 2.5);
}

#[test]
fn aggregation_requires_four_layers() {
    let (model, _, _) = tiny_model(Task::Ae, AggregationMode::PSum);
    let mut config = model.config.clone();
    config.encoder.num_layers = 3;
    assert!(matches!(AbsaModel::new(config, 0), Err(absa_core::Error::Config(_))));
}

#[test]
fn prediction_modes() {
    let (model, seq, _) = tiny_model(Task::Ae, AggregationMode::HSum);
    let scores = model.branch_scores(&seq).unwrap();
    assert_eq!(scores.len(), 4);
    let deepest = combine_scores(&scores, InferBranch::Deepest).unwrap();
    assert_eq!(deepest, scores[0]);
    match model.predict(&seq).unwrap() {
        absa_core::heads::Prediction::Tags(t) => assert_eq!(t.len(), seq.tokens.len()),
        other => panic!("unexpected {other:?}"),
    }
}

proptest! {
    #[test]
    fn mean_combination_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[3, 3], 2.0)).collect();
        let y: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[3, 3], 2.0)).collect();
        let mix: Vec<Tensor> = x.iter().zip(&y).map(|(u, v)| {
            Tensor::new(vec![3, 3], u.data().iter().zip(v.data()).map(|(p, q)| a * p + b * q).collect()).unwrap()
        }).collect();
        let cx = combine_scores(&x, InferBranch::Mean).unwrap();
        let cy = combine_scores(&y, InferBranch::Mean).unwrap();
        let cm = combine_scores(&mix, InferBranch::Mean).unwrap();
        for ((m, p), q) in cm.data().iter().zip(cx.data()).zip(cy.data()) {
            prop_assert!((m - (a * p + b * q)).abs() < 1e-9);
        }
    }
}
