use rand::Rng;

use super::*;
use crate::encoder::{model, Checkpoint, TokenSequence};
use crate::testutil::{rng, roughen, tiny_checkpoint};

fn hand_bottleneck() -> Bottleneck {
    Bottleneck {
        down: Tensor::matrix(&[&[1.0], &[0.0]]).unwrap(),
        down_bias: Tensor::zeros(&[1]),
        up: Tensor::matrix(&[&[2.0, 0.0]]).unwrap(),
        up_bias: Tensor::zeros(&[2]),
    }
}

fn single_layer(b: Bottleneck) -> AdapterParams {
    AdapterParams {
        config: AdapterConfig::new(2, 2).unwrap(),
        role: AdapterRole::Language,
        tag: "x".into(),
        layers: vec![b],
        invertible: None,
    }
}

fn run_la(la: &AdapterParams, h: &[f64], r: &[f64]) -> Vec<f64> {
    let tape = Tape::new();
    let bound = la.bind(&tape, false);
    let h = tape.constant(Tensor::new(vec![1, h.len()], h.to_vec()).unwrap());
    let r = tape.constant(Tensor::new(vec![1, r.len()], r.to_vec()).unwrap());
    let out = la_forward(&h, &r, &bound, 0).unwrap();
    let v = out.value().data().to_vec();
    v
}

fn randomize(a: &mut AdapterParams, std: f64, seed: u64) {
    let mut g = rng(seed);
    for t in a.tensors_mut() {
        for v in t.data_mut() {
            *v += g.gen_range(-std..std);
        }
    }
}

fn encode_with(ck: &Checkpoint, seq: &TokenSequence, stack: Option<AdapterStack<'_>>) -> Tensor {
    let tape = Tape::new();
    let p = ck.params.bind(&tape, |_| false).unwrap();
    let bound = stack.map(|s| s.bind(&tape));
    let plugins = bound.as_ref().map(|b| b.plugins());
    let out = model::encode(&ck.config, &p, seq, plugins.as_ref()).unwrap();
    let t = out.value().clone();
    t
}

fn adapters_for(ck: &Checkpoint, role: AdapterRole, r: usize, seed: u64) -> AdapterParams {
    let cfg = AdapterConfig::new(r, ck.config.hidden).unwrap();
    AdapterParams::init(cfg, role, "t", ck.config.num_layers, false, &mut rng(seed)).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn la_hand_case() {
    let la = single_layer(hand_bottleneck());
    assert_eq!(run_la(&la, &[3.0, 5.0], &[1.0, 1.0]), vec![7.0, 1.0]);
    assert_eq!(run_la(&la, &[-3.0, 5.0], &[1.0, 1.0]), vec![1.0, 1.0]);
    let mut zero_up = la.clone();
    zero_up.layers[0].up = Tensor::zeros(&[1, 2]);
    assert_eq!(
        run_la(&zero_up, &[3.0, 5.0], &[0.25, -4.0]),
        vec![0.25, -4.0]
    );
}

#[test]
fn ra_cases() {
    let tape = Tape::new();
    let h = tape.constant(Tensor::matrix(&[&[3.0, 5.0]]).unwrap());
    let r = tape.constant(Tensor::matrix(&[&[1.0, 1.0]]).unwrap());
    let mut zero = single_layer(hand_bottleneck());
    zero.layers[0].up = Tensor::zeros(&[1, 2]);
    let (zero_b, ra_b) = (
        zero.bind(&tape, false),
        single_layer(hand_bottleneck()).bind(&tape, false),
    );
    let both_zero = ra_forward(&h, &r, &zero_b, &zero_b, 0).unwrap();
    assert_eq!(both_zero.value().data(), &[1.0, 1.0]);
    // Zero LA passes r to the RA, which then acts like an LA on input r.
    let stacked = ra_forward(&h, &r, &zero_b, &ra_b, 0).unwrap();
    let oracle = la_forward(&r, &r, &ra_b, 0).unwrap();
    assert_eq!(stacked.value().data(), oracle.value().data());
}

#[test]
fn stacked_adapter_gradients_match_finite_differences() {
    let mut ck = tiny_checkpoint(20);
    roughen(&mut ck, 0.1, 21);
    let mut la = adapters_for(&ck, AdapterRole::Language, 2, 22);
    let mut ra = adapters_for(&ck, AdapterRole::Ranking, 4, 23);
    randomize(&mut la, 0.3, 24);
    randomize(&mut ra, 0.3, 25);
    let seq = TokenSequence::pair(&[5, 6, 7], &[8, 9], ck.config.max_seq_len);
    let loss = |la: &AdapterParams, ra: &AdapterParams, grads: bool| -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let p = ck.params.bind(&tape, |_| false).unwrap();
        let bound = AdapterStack::stacked(la, ra).bind_with(&tape, grads, grads);
        let plugins = bound.plugins();
        let logit = model::ce_logit(&ck.config, &p, &seq, Some(&plugins)).unwrap();
        let l = logit.bce(&[1.0]).unwrap();
        let value = l.value().item();
        let mut g = Vec::new();
        if grads {
            let gr = tape.backward(l).unwrap();
            for b in [
                bound.query.as_ref().unwrap(),
                bound.ranking.as_ref().unwrap(),
            ] {
                for v in b.vars() {
                    g.extend(gr.wrt(v).into_data());
                }
            }
        }
        (value, g)
    };
    let analytic = loss(&la, &ra, true).1;
    let n_la: usize = la.tensors().iter().map(|t| t.len()).sum();
    let mut g = rng(26);
    for _ in 0..40 {
        let i = g.gen_range(0..analytic.len());
        let bump = |delta: f64| {
            let (mut la2, mut ra2) = (la.clone(), ra.clone());
            let (target, mut j) = if i < n_la {
                (&mut la2, i)
            } else {
                (&mut ra2, i - n_la)
            };
            for t in target.tensors_mut() {
                if j < t.len() {
                    t.data_mut()[j] += delta;
                    break;
                }
                j -= t.len();
            }
            loss(&la2, &ra2, false).0
        };
        let fd = (bump(1e-5) - bump(-1e-5)) / 2e-5;
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        assert!(err < 1e-4, "coord {i}: ad {} fd {fd}", analytic[i]);
    }
}

#[test]
fn zero_up_projections_are_identity() {
    let mut ck = tiny_checkpoint(30);
    roughen(&mut ck, 0.1, 31);
    let la = adapters_for(&ck, AdapterRole::Language, 2, 32);
    let ra = adapters_for(&ck, AdapterRole::Ranking, 2, 33);
    let seq = TokenSequence::pair(&[5, 9, 12], &[6, 7, 8, 10], ck.config.max_seq_len);
    let base = encode_with(&ck, &seq, None);
    let with = encode_with(&ck, &seq, Some(AdapterStack::stacked(&la, &ra)));
    assert!(max_diff(&base, &with) < 1e-9);
}

#[test]
fn drop_boundaries() {
    let mut ck = tiny_checkpoint(40);
    roughen(&mut ck, 0.1, 41);
    let mut la = adapters_for(&ck, AdapterRole::Language, 2, 42);
    let mut ra = adapters_for(&ck, AdapterRole::Ranking, 2, 43);
    randomize(&mut la, 0.5, 44);
    randomize(&mut ra, 0.5, 45);
    let seq = TokenSequence::pair(&[5, 9], &[6, 7, 8], ck.config.max_seq_len);
    let stack = AdapterStack::stacked(&la, &ra);
    let full = encode_with(&ck, &seq, Some(stack));
    let none = encode_with(&ck, &seq, Some(stack.with_drop(0)));
    assert_eq!(full, none);
    let base = encode_with(&ck, &seq, None);
    let all = encode_with(&ck, &seq, Some(stack.with_drop(ck.config.num_layers)));
    assert_eq!(base, all);
    assert!(max_diff(&full, &base) > 1e-6);

    let cfg = AdapterConfig::new(2, ck.config.hidden).unwrap();
    let mut inv = AdapterParams::init(
        cfg,
        AdapterRole::Language,
        "t",
        ck.config.num_layers,
        true,
        &mut rng(46),
    )
    .unwrap();
    randomize(&mut inv, 0.5, 47);
    let stack = AdapterStack::stacked(&inv, &ra);
    assert!(stack.invertible && !stack.with_drop(1).invertible);
    assert_eq!(
        encode_with(&ck, &seq, Some(stack.with_drop(ck.config.num_layers))),
        base
    );
    let only_top = encode_with(&ck, &seq, Some(stack.with_drop(1)));
    assert!(max_diff(&only_top, &base) > 1e-6);

    let comp = AdapterComposition {
        la_mode: LaMode::Q,
        query_la: Some("src".into()),
        document_la: None,
        ra: "rank".into(),
        drop_first_n: 0,
        invertible: false,
    };
    assert_eq!(adapter_drop(&comp, 2, 2).unwrap().drop_first_n, 2);
    assert!(adapter_drop(&comp, 3, 2).is_err());
    assert_eq!(la.num_layer_params(), adapter_param_count(&la.config, 2, 8));
}

#[test]
fn split_routing() {
    let mut ck = tiny_checkpoint(50);
    roughen(&mut ck, 0.1, 51);
    let mut la_q = adapters_for(&ck, AdapterRole::Language, 2, 52);
    let mut la_d = adapters_for(&ck, AdapterRole::Language, 2, 53);
    randomize(&mut la_q, 0.5, 54);
    randomize(&mut la_d, 0.5, 55);
    let seq = TokenSequence::pair(&[5, 9], &[6, 7, 8], ck.config.max_seq_len);

    let route = split_route(&seq).unwrap();
    let sep = seq.first_sep().unwrap();
    assert_eq!(route[sep], Side::Query);
    assert_eq!(route[sep + 1], Side::Document);
    let no_sep = TokenSequence {
        ids: vec![2, 5, 6],
        segments: vec![0; 3],
        valid: vec![true; 3],
    };
    assert!(split_route(&no_sep).is_err());

    let single = encode_with(&ck, &seq, Some(AdapterStack::language(&la_q)));
    let degenerate = encode_with(&ck, &seq, Some(AdapterStack::split(&la_q, &la_q, None)));
    assert!(max_diff(&single, &degenerate) < 1e-12);
    let split = encode_with(&ck, &seq, Some(AdapterStack::split(&la_q, &la_d, None)));
    let swapped = encode_with(&ck, &seq, Some(AdapterStack::split(&la_d, &la_q, None)));
    assert!(max_diff(&split, &swapped) > 1e-6);
}

#[test]
fn parameter_counts_at_base_scale() {
    let expected = [
        (1, 14_174_208),
        (2, 7_091_712),
        (4, 3_550_464),
        (8, 1_779_840),
        (16, 894_528),
        (32, 451_872),
    ];
    for (r, n) in expected {
        let cfg = AdapterConfig::new(r, 768).unwrap();
        assert_eq!(adapter_param_count(&cfg, 12, 768), n);
    }
    assert_eq!(
        adapter_param_count(&AdapterConfig::new(16, 64).unwrap(), 4, 64),
        2_320
    );
    assert!(AdapterConfig::new(3, 64).is_err());
    assert!(AdapterConfig::new(0, 64).is_err());
}

#[test]
fn invertible_round_trip() {
    let mut g = rng(60);
    let mut inv = InvertibleAdapterParams::init(8, &mut g).unwrap();
    let e = Tensor::randn(&[8], 1.0, &mut g);
    assert_eq!(inv.apply(&e).unwrap(), e);
    for b in [&mut inv.f, &mut inv.g] {
        for t in [&mut b.down, &mut b.up, &mut b.down_bias, &mut b.up_bias] {
            for v in t.data_mut() {
                *v = g.gen_range(-1.0..1.0);
            }
        }
    }
    let mut outputs: Vec<Tensor> = Vec::new();
    for _ in 0..20 {
        let e = Tensor::randn(&[8], 1.0, &mut g);
        let o = inv.apply(&e).unwrap();
        let back = inv.invert(&o).unwrap();
        assert!(max_diff(&back, &e) < 1e-12);
        assert!(outputs.iter().all(|p| max_diff(p, &o) > 1e-9));
        outputs.push(o);
    }
    assert!(InvertibleAdapterParams::init(7, &mut g).is_err());
}

#[test]
fn adapter_file_round_trip() {
    let ck = tiny_checkpoint(70);
    let cfg = AdapterConfig::new(2, ck.config.hidden).unwrap();
    let mut la =
        AdapterParams::init(cfg, AdapterRole::Language, "tgt", 2, true, &mut rng(71)).unwrap();
    randomize(&mut la, 0.2, 72);
    let file = AdapterFile {
        params: la,
        base_fingerprint: ck.fingerprint(),
        head: Some(crate::encoder::ScoreHead::from_params(&ck.params).unwrap()),
    };
    let back = AdapterFile::from_bytes(&file.to_bytes().unwrap()).unwrap();
    assert_eq!(back, file);
    assert!(back.check_base(&ck.fingerprint()).is_ok());
    assert!(matches!(
        back.check_base("0000000000000000"),
        Err(Error::FingerprintMismatch { .. })
    ));
    assert_eq!(
        AdapterFile::file_name(AdapterRole::Ranking, "rank", 16),
        "RA-rank-r16.adapter"
    );
}
