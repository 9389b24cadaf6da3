use std::collections::BTreeSet;

use super::*;
use crate::adapters::{AdapterConfig, AdapterRole};
use crate::encoder::tokenizer::{CLS, MASK, SEP};
use crate::encoder::Checkpoint;
use crate::testutil::{rng, roughen, separable_ranking, tiny_checkpoint};

fn quick(lr: f64, steps: usize) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size: 4,
        steps,
        warmup: 0,
        eval_every: 0,
        seed: 7,
        max_seq_len: 16,
        adam: AdamConfig::default(),
    }
}

fn mlm_data(ck: &Checkpoint) -> MlmData {
    MlmData::from_texts(
        &ck.tokenizer,
        [
            "alpha beta gamma delta",
            "epsilon zeta eta theta",
            "iota kappa lambda mu nu",
        ],
        ck.config.max_seq_len,
    )
    .unwrap()
}

fn validation_of(data: &RankingData) -> ValidationSet {
    ValidationSet {
        docs: data.docs.clone(),
        queries: data
            .queries
            .iter()
            .map(|q| {
                let mut candidates: Vec<usize> =
                    q.negatives.iter().chain(&q.positives).copied().collect();
                candidates.sort();
                ValidationQuery {
                    qid: q.qid.clone(),
                    tokens: q.tokens.clone(),
                    candidates,
                    relevant: q.positives.iter().copied().collect::<BTreeSet<_>>(),
                }
            })
            .collect(),
    }
}

fn language_adapter(ck: &Checkpoint, seed: u64) -> AdapterParams {
    let cfg = AdapterConfig::new(2, ck.config.hidden).unwrap();
    AdapterParams::init(
        cfg,
        AdapterRole::Language,
        "tgt",
        ck.config.num_layers,
        false,
        &mut rng(seed),
    )
    .unwrap()
}

#[test]
fn warmup_schedule() {
    let c = TrainConfig {
        warmup: 4,
        ..quick(1e-3, 10)
    };
    for t in 1..=4 {
        assert_eq!(c.lr_at(t), 1e-3 * t as f64 / 4.0);
    }
    for t in 5..=10 {
        assert_eq!(c.lr_at(t), 1e-3);
    }
    assert_eq!(lr_at(0.5, 0, 1), 0.5);
    assert!(TrainConfig { warmup: 11, ..c }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
    assert!(TrainConfig { lr: f64::NAN, ..c }.validate().is_err());
}

#[test]
fn adam_first_step_and_coordinate_paths() {
    let mut adam = Adam::new(AdamConfig::default(), vec![vec![1.0; 3], vec![1.0; 3]]);
    adam.begin_step();
    let grad = [0.5, -2.0, 0.0];
    let mut full = [1.0, 1.0, 1.0];
    adam.update(0, &mut full, &grad, None, 0.1);
    // First step: m̂ = g and v̂ = g², so the move is lr·g/(|g|+eps).
    for i in 0..3 {
        let expected = 1.0 - 0.1 * grad[i] / (grad[i].abs() + 1e-8);
        assert!((full[i] - expected).abs() < 1e-15);
    }
    let mut sparse = [1.0, 1.0, 1.0];
    adam.update(1, &mut sparse, &grad, Some(&[0, 1, 2]), 0.1);
    assert_eq!(full, sparse);
}

#[test]
fn support_selector_splits_flat_indices() {
    let ck = tiny_checkpoint(1);
    let layout = ck.params.layout();
    let (_, word) = &layout[0];
    let (_, pos) = &layout[1];
    let sel = Selector::support(
        &ck.params,
        &[word.start + 3, pos.start, pos.start + 5],
        is_score_param,
    )
    .unwrap();
    assert_eq!(sel.base[0], Trainable::Coords(vec![3]));
    assert_eq!(sel.base[1], Trainable::Coords(vec![0, 5]));
    assert_eq!(sel.base[2], Trainable::Frozen);
    assert_eq!(sel.base[sel.base.len() - 1], Trainable::Full);
    assert!(Selector::support(&ck.params, &[4, 2], |_| false).is_err());
    assert!(Selector::support(&ck.params, &[ck.params.num_coords()], |_| false).is_err());
}

#[test]
fn zero_learning_rate_and_zero_steps_change_nothing() {
    let ck = tiny_checkpoint(2);
    let data = mlm_data(&ck);
    let m = Modules::base(ck.params.clone());
    let (out, report) = train_mlm(
        &ck.config,
        m,
        &Selector::all(&ck.params),
        &data,
        &quick(0.0, 5),
        None,
    )
    .unwrap();
    assert_eq!(out.params.flatten(), ck.params.flatten());
    assert_eq!(report.log.len(), 5);

    let ranking = separable_ranking(&ck);
    let (full, report) = train_full(
        &ck.config,
        ck.params.clone(),
        &ranking,
        &quick(1e-2, 0),
        None,
    )
    .unwrap();
    assert_eq!(full, ck.params);
    assert!(report.log.is_empty());
}

#[test]
fn freeze_contract_for_language_adapter_training() {
    let mut ck = tiny_checkpoint(3);
    roughen(&mut ck, 0.1, 4);
    let data = mlm_data(&ck);
    let la = language_adapter(&ck, 5);
    let modules = Modules {
        params: ck.params.clone(),
        language: Some(la.clone()),
        ranking: None,
    };
    let sel = Selector::frozen(&ck.params).with_language(true);
    let (out, _) = train_mlm(&ck.config, modules, &sel, &data, &quick(1e-2, 10), None).unwrap();
    assert_eq!(out.params.flatten(), ck.params.flatten());
    assert_ne!(out.language.unwrap(), la);

    let m = Modules::base(ck.params.clone());
    assert!(train_mlm(&ck.config, m, &sel, &data, &quick(1e-2, 1), None).is_err());
}

#[test]
fn sparse_support_leaves_other_coordinates_exact() {
    let mut ck = tiny_checkpoint(6);
    roughen(&mut ck, 0.1, 7);
    let data = separable_ranking(&ck);
    let dim = ck.params.num_coords();
    let support: Vec<usize> = (0..dim).filter(|i| i % 7 == 3).collect();
    let sel = Selector::support(&ck.params, &support, |_| false).unwrap();
    let (out, _) = train_ranking(
        &ck.config,
        Modules::base(ck.params.clone()),
        &sel,
        &data,
        &quick(1e-2, 8),
        None,
    )
    .unwrap();
    let (before, after) = (ck.params.flatten(), out.params.flatten());
    let on: BTreeSet<usize> = support.iter().copied().collect();
    let mut moved = 0;
    for i in 0..dim {
        if on.contains(&i) {
            moved += usize::from(before[i] != after[i]);
        } else {
            assert_eq!(before[i].to_bits(), after[i].to_bits(), "coordinate {i}");
        }
    }
    assert!(moved > 0);
}

#[test]
fn full_support_matches_full_fine_tuning() {
    let mut ck = tiny_checkpoint(8);
    roughen(&mut ck, 0.1, 9);
    let data = separable_ranking(&ck);
    let train = quick(5e-3, 6);
    let (full, _) = train_full(&ck.config, ck.params.clone(), &data, &train, None).unwrap();
    let eligible: Vec<usize> = ck
        .params
        .layout()
        .into_iter()
        .filter(|(n, _)| mask_eligible(n))
        .flat_map(|(_, r)| r)
        .collect();
    let sel = Selector::support(&ck.params, &eligible, is_score_param).unwrap();
    let (sparse, _) = train_ranking(
        &ck.config,
        Modules::base(ck.params.clone()),
        &sel,
        &data,
        &train,
        None,
    )
    .unwrap();
    assert_eq!(full, sparse.params);
}

#[test]
fn separable_ranking_is_learned() {
    let mut ck = tiny_checkpoint(10);
    roughen(&mut ck, 0.05, 11);
    let data = separable_ranking(&ck);
    let train = TrainConfig {
        batch_size: 8,
        ..quick(1e-2, 150)
    };
    let (_, report) = train_full(&ck.config, ck.params.clone(), &data, &train, None).unwrap();
    let losses = report.losses();
    let tail = &losses[losses.len() - 15..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < std::f64::consts::LN_2, "final loss {mean}");
    let (head, tail) = report.head_tail_means(0.1).unwrap();
    assert!(tail < head);
}

#[test]
fn ranking_training_is_deterministic() {
    let ck = tiny_checkpoint(12);
    let data = separable_ranking(&ck);
    let train = quick(1e-2, 5);
    let a = train_full(&ck.config, ck.params.clone(), &data, &train, None).unwrap();
    let b = train_full(&ck.config, ck.params.clone(), &data, &train, None).unwrap();
    assert_eq!(a, b);
    let c = train_full(
        &ck.config,
        ck.params.clone(),
        &data,
        &TrainConfig { seed: 8, ..train },
        None,
    )
    .unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn best_checkpoint_is_selected() {
    let mut ck = tiny_checkpoint(13);
    roughen(&mut ck, 0.05, 14);
    let data = separable_ranking(&ck);
    let val = validation_of(&data);
    let train = TrainConfig {
        eval_every: 10,
        batch_size: 8,
        ..quick(1e-2, 45)
    };
    let (params, report) =
        train_full(&ck.config, ck.params.clone(), &data, &train, Some(&val)).unwrap();
    let vals = report.validations();
    assert_eq!(
        vals.iter().map(|v| v.0).collect::<Vec<_>>(),
        vec![10, 20, 30, 40, 45]
    );
    let (best_step, best) = report.best.unwrap();
    let max = vals.iter().map(|v| v.1).fold(f64::MIN, f64::max);
    assert_eq!(best, max);
    assert_eq!(best_step, vals.iter().find(|v| v.1 == max).unwrap().0);
    assert!(best >= vals.last().unwrap().1);
    let again = validation_map(&ck.config, &Modules::base(params), &val, 16).unwrap();
    assert_eq!(again, best);
    for line in report.to_jsonl().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("step").is_some() && v.get("loss").is_some() && v.get("lr").is_some());
    }
}

#[test]
fn data_contracts() {
    let ck = tiny_checkpoint(15);
    assert!(MlmData::from_texts(&ck.tokenizer, ["", "  "], 16).is_err());
    let mut data = separable_ranking(&ck);
    for q in &mut data.queries {
        q.negatives.clear();
    }
    assert!(data.check().is_err());
    assert!(train_full(&ck.config, ck.params.clone(), &data, &quick(1e-2, 1), None).is_err());

    let data = separable_ranking(&ck);
    let batch = data.sample(5, &mut rng(1));
    assert_eq!(batch.len(), 6);
    assert_eq!(batch.iter().filter(|e| e.label == 1.0).count(), 3);
    for e in &batch {
        let q = &data.queries[e.query];
        let list = if e.label == 1.0 {
            &q.positives
        } else {
            &q.negatives
        };
        assert!(list.contains(&e.doc));
    }
}

#[test]
fn masking_policy_statistics() {
    let vocab = 40;
    let tokens: Vec<usize> = (0..30).map(|i| 5 + i % 35).collect();
    let seq = TokenSequence::single(&tokens, 64);
    let mut g = rng(2);
    let (mut chosen, mut masked, mut kept, mut total) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..4000 {
        let e = mask_tokens(&seq, vocab, MASK_RATE, &mut g).unwrap();
        assert!(!e.positions.is_empty());
        assert!(e
            .positions
            .iter()
            .all(|&p| seq.ids[p] != CLS && seq.ids[p] != SEP));
        assert_eq!(
            e.targets,
            e.positions.iter().map(|&p| seq.ids[p]).collect::<Vec<_>>()
        );
        for &p in &e.positions {
            match e.seq.ids[p] {
                MASK => masked += 1,
                id if id == seq.ids[p] => kept += 1,
                id => assert!((5..vocab).contains(&id)),
            }
        }
        chosen += e.positions.len();
        total += tokens.len();
        let untouched = (0..seq.len()).filter(|i| !e.positions.contains(i));
        assert!(untouched.into_iter().all(|i| e.seq.ids[i] == seq.ids[i]));
    }
    let rate = chosen as f64 / total as f64;
    assert!((rate - 0.15).abs() < 0.01, "{rate}");
    let c = chosen as f64;
    assert!((masked as f64 / c - 0.8).abs() < 0.02);
    // Random replacements land on the original token 1/35 of the time.
    assert!((kept as f64 / c - (0.1 + 0.1 / 35.0)).abs() < 0.02);

    let single = TokenSequence::single(&[7], 8);
    let e = mask_tokens(&single, vocab, 0.0, &mut g).unwrap();
    assert_eq!(e.positions, vec![1]);
    assert!(mask_tokens(&TokenSequence::single(&[], 8), vocab, 0.15, &mut g).is_err());
}

#[test]
fn language_adapter_training_reduces_mlm_loss() {
    let mut ck = tiny_checkpoint(16);
    roughen(&mut ck, 0.05, 17);
    let data = mlm_data(&ck);
    let eval = MlmEval::new(&data, ck.config.vocab_size, 16, &mut rng(3)).unwrap();
    let modules = Modules {
        params: ck.params.clone(),
        language: Some(language_adapter(&ck, 18)),
        ranking: None,
    };
    let (before, _) = mlm_metrics(&ck.config, &modules, &eval).unwrap();
    let sel = Selector::frozen(&ck.params).with_language(true);
    let train = TrainConfig {
        eval_every: 20,
        ..quick(1e-2, 60)
    };
    let (out, report) = train_mlm(&ck.config, modules, &sel, &data, &train, Some(&eval)).unwrap();
    let (after, acc) = mlm_metrics(&ck.config, &out, &eval).unwrap();
    assert!(after < before, "{after} vs {before}");
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report.best.unwrap().1, -after);
}
