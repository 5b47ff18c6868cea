use pods::encoding::{EncoderConfig, CLS, SEP};
use pods::exec::Exec;
use pods::matching::*;
use pods::numerics::*;
use pods::optim::{AdamW, OptimConfig};
use pods::pivot::{SelectionConfig, Strategy};
use pods::train::{batch_gradient, score_dialogues};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_encoder(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        ff_dim: 12,
        max_len: 32,
        vocab_size: vocab,
        ..EncoderConfig::default()
    }
}

fn toy_model(strategy: Strategy, m: usize, seed: u64) -> ResponseModel {
    let sel = SelectionConfig { strategy, m, seed: 3 };
    ResponseModel::new(toy_encoder(20), sel, false, seed).unwrap()
}

/// n = 3 utterances whose longest has 4 tokens.
fn toy_instance(label: u8, r: &mut ChaCha8Rng) -> Instance {
    let mut tok = |k: usize| (0..k).map(|_| r.random_range(4..20)).collect::<Vec<usize>>();
    let ctx = vec![tok(4), tok(2), tok(3)];
    let resp = tok(3);
    Instance::new("toy", &ctx, &resp, label, 32).unwrap()
}

#[test]
fn end_to_end_gradcheck_at_toy_dims() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let inst = toy_instance(1, &mut r);
    for strategy in [Strategy::Cosine, Strategy::All] {
        let model = toy_model(strategy, 2, 11);
        let rep = gradcheck_params(
            &model.params,
            |tape| model.loss(tape, &inst, None),
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{strategy}: {rep:?}");
    }
}

#[test]
fn pre_norm_encoder_gradcheck() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let inst = toy_instance(0, &mut r);
    let enc = EncoderConfig { layers: 2, pre_norm: true, ..toy_encoder(20) };
    let sel = SelectionConfig { strategy: Strategy::Cosine, m: 2, seed: 3 };
    let model = ResponseModel::new(enc, sel, false, 4).unwrap();
    assert!(model.params.find("enc.final_norm.gain").is_some());
    let rep = gradcheck_params(&model.params, |tape| model.loss(tape, &inst, None), GradcheckOptions::default()).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn pivot_attend_single_row_and_row_sums() {
    let mut params = Params::new();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let p = MhaParams::new(&mut params, "p", 8, 2, false, false, &mut r).unwrap();
    let h_c = Tensor::randn(&[5, 8], 1.0, &mut r);
    let h_p = Tensor::randn(&[1, 8], 1.0, &mut r);
    let mut tape = Tape::with_params(&params);
    let c = tape.constant(h_c);
    let pv = tape.constant(h_p.clone());
    let out = pivot_attend(&mut tape, c, pv, &[true], &p).unwrap();
    let wv = tape.param(p.value.weight);
    let v = tape.matmul(pv, wv).unwrap();
    for row in 0..5 {
        for (a, b) in tape.value(out).row_slice(row).iter().zip(tape.value(v).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let h_p2 = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut r));
    let (_, weights) = mha_with_weights(&mut tape, c, h_p2, h_p2, &p, Some(&[true, true, false, true])).unwrap();
    for w in weights {
        let w = tape.value(w);
        for row in 0..w.rows() {
            assert!((w.row_slice(row).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(w.get(row, 2) <= 1e-12);
        }
    }
    let empty = tape.constant(Tensor::zeros(&[0, 8]));
    assert!(pivot_attend(&mut tape, c, empty, &[], &p).is_err());
    assert!(response_attend(&mut tape, c, empty, &p).is_err());
}

#[test]
fn aggregate_matches_scalar_recurrence_for_one_step() {
    let mut params = Params::new();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let gru = GruParams::new(&mut params, "g", 3, 3, &mut r);
    let x = Tensor::randn(&[1, 3], 1.0, &mut r);
    let mut tape = Tape::with_params(&params);
    let xv = tape.constant(x.clone());
    let h = aggregate(&mut tape, xv, &gru).unwrap();
    // From h = 0 only the input path matters: h' = z ⊙ tanh(x W_n + b_n).
    let w = params.get(gru.w_input);
    let b = params.get(gru.bias);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for j in 0..3 {
        let pre = |block: usize| {
            (0..3).map(|i| x.data()[i] * w.get(i, block * 3 + j)).sum::<f64>() + b.data()[block * 3 + j]
        };
        let expect = sig(pre(0)) * pre(2).tanh();
        assert!((tape.value(h).data()[j] - expect).abs() < 1e-12);
    }
}

#[test]
fn aggregate_is_order_sensitive_and_zero_fixed_point() {
    let mut params = Params::new();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let gru = GruParams::new(&mut params, "g", 4, 4, &mut r);
    let x = Tensor::randn(&[6, 4], 1.0, &mut r);
    let mut rev = x.clone();
    for i in 0..6 {
        rev.data_mut()[i * 4..i * 4 + 4].copy_from_slice(x.row_slice(5 - i));
    }
    let mut tape = Tape::with_params(&params);
    let a = tape.constant(x);
    let b = tape.constant(rev);
    let ha = aggregate(&mut tape, a, &gru).unwrap();
    let hb = aggregate(&mut tape, b, &gru).unwrap();
    assert!(tape.value(ha).max_abs_diff(tape.value(hb)) > 1e-6);

    let mut zero = params.clone();
    for id in zero.ids().collect::<Vec<_>>() {
        let shape = zero.get(id).shape().to_vec();
        zero.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut tape = Tape::with_params(&zero);
    let x0 = tape.constant(Tensor::zeros(&[5, 4]));
    let h = aggregate(&mut tape, x0, &gru).unwrap();
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn predictions_are_distributions() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let model = toy_model(Strategy::Cosine, 2, 4);
    for _ in 0..20 {
        let inst = toy_instance(1, &mut r);
        let p = model.score(&inst.packed, "x").unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn all_and_cosine_with_m_at_least_n_are_bitwise_equal() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..20 {
        let all = toy_model(Strategy::All, 1, seed);
        let mut cos = all.clone();
        cos.selection = SelectionConfig { strategy: Strategy::Cosine, m: 3 + seed as usize % 4, seed: 0 };
        let inst = toy_instance(1, &mut r);
        assert_eq!(
            all.score(&inst.packed, "x").unwrap().to_bits(),
            cos.score(&inst.packed, "x").unwrap().to_bits()
        );
    }
}

#[test]
fn repeated_scoring_is_deterministic() {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let model = toy_model(Strategy::Cosine, 1, 2);
    let inst = toy_instance(0, &mut r);
    let a = model.score(&inst.packed, "x").unwrap();
    assert_eq!(a.to_bits(), model.score(&inst.packed, "x").unwrap().to_bits());
}

/// Perturbing the selection scores without changing the chosen set leaves
/// the loss gradient untouched: selection is a hard choice.
#[test]
fn selection_is_not_differentiated() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let inst = toy_instance(1, &mut r);
    let model = toy_model(Strategy::External, 2, 3);
    let grads_for = |scores: [f64; 3]| {
        let mut m = model.clone();
        let mut table = pods::pivot::ExternalScores::default();
        for (i, s) in scores.iter().enumerate() {
            table.insert("toy", i, *s);
        }
        m.external = Some(table);
        let mut tape = Tape::with_params(&m.params);
        let loss = m.loss(&mut tape, &inst, None).unwrap();
        let g = tape.backward(loss).unwrap();
        tape.param_grads(&g)
    };
    let a = grads_for([0.9, 0.1, 0.5]);
    let b = grads_for([0.9 + 1e-7, 0.1, 0.5 - 1e-7]);
    for id in model.params.ids() {
        assert_eq!(a.get(id), b.get(id), "{}", model.params.name(id));
    }
}

#[test]
fn untrained_loss_is_near_ln2_and_memorisation_decreases_it() {
    let mut r = ChaCha8Rng::seed_from_u64(30);
    let items: Vec<Instance> = (0..10).map(|i| toy_instance((i % 2) as u8, &mut r)).collect();
    let mut model = toy_model(Strategy::Cosine, 2, 6);
    let seeds = vec![0; items.len()];
    let (initial, _) = batch_gradient(&model, &items, &seeds, Exec::Sequential).unwrap();
    assert!((initial - std::f64::consts::LN_2).abs() < 0.1, "{initial}");

    let cfg = OptimConfig {
        lr: 3e-3,
        warmup_fraction: 0.0,
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut opt = AdamW::new(cfg, &model.params, 1000);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let (loss, g) = batch_gradient(&model, &items, &seeds, Exec::Sequential).unwrap();
        losses.push(loss);
        model.params.accumulate(&g);
        opt.step(&mut model.params);
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn sequential_and_parallel_execution_agree_bitwise() {
    let mut r = ChaCha8Rng::seed_from_u64(41);
    let items: Vec<Instance> = (0..8).map(|i| toy_instance((i % 2) as u8, &mut r)).collect();
    let model = toy_model(Strategy::Cosine, 2, 8);
    let seeds: Vec<u64> = (0..8).collect();
    let (ls, gs) = batch_gradient(&model, &items, &seeds, Exec::Sequential).unwrap();
    let (lp, gp) = batch_gradient(&model, &items, &seeds, Exec::Parallel).unwrap();
    assert_eq!(ls.to_bits(), lp.to_bits());
    for id in model.params.ids() {
        assert_eq!(gs.get(id), gp.get(id), "{}", model.params.name(id));
    }
    let dialogues: Vec<Vec<Instance>> = items.chunks(2).map(|c| c.to_vec()).collect();
    let a = score_dialogues(&model, &dialogues, Exec::Sequential).unwrap();
    let b = score_dialogues(&model, &dialogues, Exec::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn same_seed_same_parameters_after_ten_steps() {
    let run = || {
        let mut r = ChaCha8Rng::seed_from_u64(40);
        let items: Vec<Instance> = (0..6).map(|i| toy_instance((i % 2) as u8, &mut r)).collect();
        let mut model = toy_model(Strategy::Cosine, 2, 7);
        let mut opt = AdamW::new(OptimConfig::default(), &model.params, 10);
        for _ in 0..10 {
            let (_, g) = batch_gradient(&model, &items, &[1; 6], Exec::Parallel).unwrap();
            model.params.accumulate(&g);
            opt.step(&mut model.params);
        }
        model
            .params
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn packed_layout_feeds_the_head() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let inst = toy_instance(1, &mut r);
    assert_eq!(inst.packed.ids[0], CLS);
    assert_eq!(inst.packed.ids.iter().filter(|&&t| t == SEP).count(), 4);
}
