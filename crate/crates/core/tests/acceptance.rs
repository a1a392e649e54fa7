//! End-to-end acceptance checks. Each criterion prints one line:
//! `[PASS]`, `[FAIL]` or `[SKIP]`, followed by what was measured.
//!
//! Set `ABSA_SEMEVAL_DIR` to a directory holding the SemEval XML files to
//! run the dataset statistics check; without it that check is skipped.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use absa_core::crf::{is_bio_valid, log_partition, sequence_score, viterbi_decode, CrfParams};
use absa_core::data::{encode_example, Example};
use absa_core::encoder::{encode_sequence, tokenize, Encoder, EncoderConfig, TransformerLayer, Vocab};
use absa_core::gradcheck::{check_params_where, ParamCheck, DEFAULT_STEP};
use absa_core::harness::{
    evaluate, ingest, probe_layers, synthetic_examples, train, train_seed, validation_split, Checkpoint, ProbeConfig,
    RunConfig, SeedRun,
};
use absa_core::heads::{AggregationMode, CrfHead, Head, InferBranch, Target, Task};
use absa_core::model::{AbsaModel, ModelConfig};
use absa_core::tensor::{Graph, ParamStore, Tensor};
use common::{check_pattern, random_tensor, Aggregator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn random_crf(rng: &mut ChaCha8Rng) -> CrfParams {
    CrfParams {
        transition: random_tensor(rng, &[3, 3], 2.0),
        start: random_tensor(rng, &[3], 2.0),
        end: random_tensor(rng, &[3], 2.0),
        emission_proj: Tensor::zeros(&[1, 3]),
        emission_bias: Tensor::zeros(&[3]),
    }
}

fn all_sequences(t: usize) -> Vec<Vec<usize>> {
    (0..3usize.pow(t as u32))
        .map(|mut code| {
            (0..t)
                .map(|_| {
                    let d = code % 3;
                    code /= 3;
                    d
                })
                .collect()
        })
        .collect()
}

fn crf_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut argmax_misses) = (0.0f64, 0);
    for _ in 0..200 {
        let t = rng.random_range(1..=6);
        let p = random_crf(&mut rng);
        let e = random_tensor(&mut rng, &[t, 3], 3.0);
        let seqs = all_sequences(t);
        let scores: Vec<f64> = seqs.iter().map(|y| sequence_score(&e, y, &p).unwrap()).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        worst = worst.max((log_partition(&e, &p).unwrap() - z).abs());
        let best = &seqs[scores.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0];
        if &viterbi_decode(&e, &p, false).unwrap() != best {
            argmax_misses += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-9 && argmax_misses == 0 && elapsed < Duration::from_secs(10),
        format!("200 instances, max |log Z error| {worst:.2e}, viterbi misses {argmax_misses}, {elapsed:.2?}"),
    )
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for t in 1..=5 {
        for _ in 0..40 {
            let p = random_crf(&mut rng);
            let e = random_tensor(&mut rng, &[t, 3], 3.0);
            let z = log_partition(&e, &p).unwrap();
            let total: f64 = all_sequences(t)
                .iter()
                .map(|y| (sequence_score(&e, y, &p).unwrap() - z).exp())
                .sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    verdict(worst < 1e-9, format!("T = 1..5, max |sum - 1| {worst:.2e}"))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let tokens = tokenize("The battery life is great but the screen is dim.");
    let vocab = Vocab::build([tokens.iter().map(|t| t.text.as_str())], 1).unwrap();

    // Two-layer encoder, one extra branch layer and a CRF head.
    let config = EncoderConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 4,
        ff_size: 32,
        vocab_size: vocab.len(),
        max_len: 16,
        init_std: 0.1,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, &config, &mut rng).unwrap();
    let layer = TransformerLayer::new(&mut store, "branch.0.layer", 16, 32, 4, 1e-12, 0.1, 0.0, &mut rng).unwrap();
    let head = CrfHead::new(&mut store, "branch.0.head", 16, 0.1, &mut rng).unwrap();
    for name in ["branch.0.head.transition", "branch.0.head.start", "branch.0.head.end"] {
        let id = store.id_of(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random_tensor(&mut rng, &shape, 0.5).with_grad();
    }
    let seq = encode_sequence(&tokens, &vocab, &config);
    let gold = vec![2, 0, 1, 2, 2, 2, 2, 0, 2, 2, 2];
    let branch = Head::Crf(head);
    let loss = |g: &mut Graph, s: &ParamStore| {
        let hs = encoder.forward(g, s, &seq, None)?;
        let mask = g.constant(absa_core::encoder::attention_mask_bias(&seq.mask));
        let p = layer.forward(g, s, *hs.last().unwrap(), mask, Default::default(), None, None)?;
        let em = branch.scores(g, s, p, &seq.word_positions())?;
        branch.loss(g, s, em, &Target::Tags(gold.clone()))
    };
    let mut checks = vec![split_check(&store, loss, &mut rng)];

    // The same check through the full model with all four branches summed.
    for mode in [AggregationMode::PSum, AggregationMode::HSum] {
        let model = AbsaModel::new(
            ModelConfig {
                task: Task::Ae,
                mode,
                infer_branch: InferBranch::Mean,
                encoder: EncoderConfig {
                    num_layers: 4,
                    ..config.clone()
                },
            },
            9,
        )
        .unwrap();
        let loss = |g: &mut Graph, s: &ParamStore| {
            let m = AbsaModel {
                params: s.clone(),
                ..model.clone()
            };
            Ok(m.loss(g, &seq, &Target::Tags(gold.clone()), None)?.1)
        };
        checks.push(split_check(&model.params, loss, &mut rng));
    }
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|(c, _)| c.max_relative_error).fold(0.0, f64::max);
    let coords: usize = checks.iter().map(|(c, z)| c.coordinates + z.coordinates).sum();
    let zero_analytic = checks.iter().map(|(_, z)| z.max_abs_analytic).fold(0.0, f64::max);
    let zero_numeric = checks.iter().map(|(_, z)| z.max_abs_numeric).fold(0.0, f64::max);
    verdict(
        worst < 1e-4 && zero_analytic < 1e-12 && zero_numeric < 1e-8 && elapsed < Duration::from_secs(60),
        format!(
            "max relative error: branch loss {:.2e}, P-SUM total {:.2e}, H-SUM total {:.2e}; \
             key biases |analytic| {zero_analytic:.1e}, |numeric| {zero_numeric:.1e}; {coords} coordinates, {elapsed:.2?}",
            checks[0].0.max_relative_error, checks[1].0.max_relative_error, checks[2].0.max_relative_error
        ),
    )
}

/// Key biases shift every score in a softmax row equally, so their true
/// gradient is zero and the finite difference is pure rounding noise. They
/// are checked for magnitude instead of relative error.
fn split_check<F>(store: &ParamStore, loss: F, rng: &mut ChaCha8Rng) -> (ParamCheck, ParamCheck)
where
    F: Fn(&mut Graph, &ParamStore) -> absa_core::Result<absa_core::tensor::Var>,
{
    let key_bias = |name: &str| name.ends_with("attn.key.bias");
    let rest = check_params_where(store, &loss, |n| !key_bias(n), 20, DEFAULT_STEP, rng).unwrap();
    let zero = check_params_where(store, &loss, key_bias, 20, DEFAULT_STEP, rng).unwrap();
    (rest, zero)
}

fn dataflow() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for task in [Task::Ae, Task::Asc] {
        let agg = Aggregator::new(task, 5);
        let p = check_pattern(&agg.response(AggregationMode::PSum, 1e-3), |i, j| i == j, 1e-9);
        let h = check_pattern(&agg.response(AggregationMode::HSum, 1e-3), |i, j| j <= i, 1e-9);
        for (name, r) in [("P-SUM", p), ("H-SUM", h)] {
            if let Err(e) = r {
                ok = false;
                notes.push(format!("{task} {name}: {e}"));
            }
        }
    }
    if ok {
        notes.push("P-SUM diagonal, H-SUM lower-triangular for AE and ASC".into());
    }
    verdict(ok, notes.join("; "))
}

fn loss_summation() -> Outcome {
    let tokens = tokenize("The keyboard is great.");
    let vocab = Vocab::build([tokens.iter().map(|t| t.text.as_str())], 1).unwrap();
    let mut mismatches = Vec::new();
    for task in [Task::Ae, Task::Asc] {
        for mode in [AggregationMode::Vanilla, AggregationMode::PSum, AggregationMode::HSum] {
            let model = AbsaModel::new(
                ModelConfig {
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
                },
                3,
            )
            .unwrap();
            let seq = encode_sequence(&tokens, &vocab, &model.config.encoder);
            let target = match task {
                Task::Ae => Target::Tags(vec![2, 0, 2, 2, 2]),
                Task::Asc => Target::Class(2),
            };
            let mut g = Graph::new();
            let (losses, total) = model.loss(&mut g, &seq, &target, None).unwrap();
            let values: Vec<f64> = losses.iter().map(|&l| g.item(l).unwrap()).collect();
            let expected_branches = if mode == AggregationMode::Vanilla { 1 } else { 4 };
            let sum = values.iter().fold(0.0, |a, b| a + b);
            if values.len() != expected_branches || g.item(total).unwrap().to_bits() != sum.to_bits() {
                mismatches.push(format!("{task}/{mode}"));
            }
        }
    }
    verdict(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "total == sum of branch losses bit-exactly (4 branches), vanilla == its single loss".into()
        } else {
            format!("mismatch in {}", mismatches.join(", "))
        },
    )
}

fn dataset_fidelity() -> Outcome {
    let Some(dir) = std::env::var_os("ABSA_SEMEVAL_DIR").map(PathBuf::from) else {
        return Skip("ABSA_SEMEVAL_DIR not set".into());
    };
    let report = match ingest(&dir) {
        Ok(r) => r,
        Err(e) => return Fail(format!("ingest failed: {e}")),
    };
    if !report.all_present() {
        let missing: Vec<&str> = report.rows.iter().filter(|r| r.found.is_none()).map(|r| r.file.as_str()).collect();
        return Skip(format!("files absent from {}: {}", dir.display(), missing.join(", ")));
    }
    let bad: Vec<String> = report
        .rows
        .iter()
        .filter(|r| !r.matches())
        .map(|r| format!("{} {} {}: {:?} != {}", r.dataset, r.split, r.statistic, r.found, r.expected))
        .collect();
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} counts match exactly", report.rows.len())
        } else {
            bad.join("; ")
        },
    )
}

fn synthetic_config(task: Task, mode: AggregationMode) -> RunConfig {
    let mut config = RunConfig::parse_str(include_str!("../../../configs/synthetic.conf")).unwrap();
    config.task = task;
    config.mode = mode;
    config
}

struct Trained {
    task: Task,
    mode: AggregationMode,
    run: SeedRun,
    data: Vec<Example>,
    elapsed: Duration,
}

fn overfit(trained: &[Trained]) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for t in trained {
        let (fit, _) = validation_split(&t.run.checkpoint, &t.data).unwrap();
        let score = evaluate(&t.run.checkpoint, &fit).unwrap().scores.headline();
        let epochs = t.run.checkpoint.epoch;
        let pass = score >= 0.95 && epochs <= 30 && t.elapsed < Duration::from_secs(300);
        ok &= pass;
        let metric = if t.task == Task::Ae { "span-F1" } else { "accuracy" };
        notes.push(format!("{} {} {metric} {score:.4} ({epochs} epochs, {:.1?})", t.task, t.mode, t.elapsed));
    }
    verdict(ok, notes.join("; "))
}

fn probe_trend(trained: &[Trained]) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for t in trained {
        // Fit on the run's training split, score on unseen sentences.
        let (fit, _) = validation_split(&t.run.checkpoint, &t.data).unwrap();
        let held_out = synthetic_examples(t.task, 100, 1).unwrap();
        let scores = probe_layers(&t.run.checkpoint, &fit, &held_out, &ProbeConfig::default()).unwrap();
        let (first, last) = (scores[0].score, scores[scores.len() - 1].score);
        ok &= last >= first && scores.len() == t.run.checkpoint.model.config.encoder.num_layers + 1;
        notes.push(format!("{} {} embedding {first:.3} -> deepest {last:.3}", t.task, t.mode));
    }
    verdict(ok, notes.join("; "))
}

fn bio_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut invalid = 0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=20);
        let p = random_crf(&mut rng);
        let e = random_tensor(&mut rng, &[t, 3], 5.0);
        if !is_bio_valid(&viterbi_decode(&e, &p, true).unwrap()) {
            invalid += 1;
        }
    }
    verdict(invalid == 0, format!("{invalid} invalid of 1000 constrained decodes"))
}

fn determinism() -> Outcome {
    let mut config = synthetic_config(Task::Asc, AggregationMode::HSum);
    config.epochs = 3;
    config.seeds = vec![1, 2];
    config.dropout = 0.1;
    let data = synthetic_examples(Task::Asc, 50, 0).unwrap();
    let csvs = |out: &absa_core::harness::TrainOutput| {
        let (mut m, mut c) = (Vec::new(), Vec::new());
        out.report.write_metrics_csv(&mut m).unwrap();
        out.report.write_curves_csv(&mut c).unwrap();
        (m, c)
    };
    let a = train(&config, &data, None, "synthetic").unwrap();
    let b = train(&config, &data, None, "synthetic").unwrap();
    let same_csv = csvs(&a) == csvs(&b);

    let dir = tempfile::tempdir().unwrap();
    let mut round_trip = true;
    for run in &a.runs {
        let path = dir.path().join(format!("seed-{}.ckpt", run.checkpoint.seed));
        run.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        round_trip &= loaded.model.params == run.checkpoint.model.params;
        for ex in &data {
            let seq = encode_example(ex, &loaded.vocab, &loaded.model.config.encoder, false).seq;
            let x = run.checkpoint.model.branch_scores(&seq).unwrap();
            let y = loaded.model.branch_scores(&seq).unwrap();
            round_trip &= x
                .iter()
                .zip(&y)
                .all(|(u, v)| u.data().iter().zip(v.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
    verdict(
        same_csv && round_trip,
        format!("identical CSV on rerun: {same_csv}; bit-exact checkpoint round trip: {round_trip}"),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "CRF oracle equivalence", crf_oracle()),
        (2, "CRF normalization", normalization()),
        (3, "gradient correctness", gradient_check()),
        (4, "aggregation dataflow", dataflow()),
        (5, "loss summation", loss_summation()),
        (6, "dataset fidelity", dataset_fidelity()),
    ];

    let mut trained = Vec::new();
    for task in [Task::Ae, Task::Asc] {
        let data = synthetic_examples(task, 50, 0).unwrap();
        for mode in [AggregationMode::PSum, AggregationMode::HSum] {
            let config = synthetic_config(task, mode);
            let start = Instant::now();
            let run = train_seed(&config, config.seeds[0], &data, None).unwrap();
            trained.push(Trained {
                task,
                mode,
                run,
                data: data.clone(),
                elapsed: start.elapsed(),
            });
        }
    }
    results.push((7, "overfit sanity", overfit(&trained)));
    results.push((8, "probe trend", probe_trend(&trained)));
    results.push((9, "BIO validity", bio_validity()));
    results.push((10, "determinism and persistence", determinism()));

    let mut failed = Vec::new();
    for (n, name, outcome) in &results {
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed.push(*n);
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] criterion {n:>2}: {name}: {detail}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
