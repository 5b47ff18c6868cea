use pods::encoding::{EncoderConfig, Vocabulary};
use pods::knowledge::{ingest, RelationMap, RetrievalConfig};
use pods::mrc::*;
use pods::numerics::*;
use pods::pivot::{SelectionConfig, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 8;

fn toy_model(mode: Ablation, strategy: Strategy, seed: u64) -> MrcModel {
    let enc = EncoderConfig {
        layers: 1,
        d_model: D,
        heads: 2,
        ff_dim: 12,
        max_len: 40,
        vocab_size: 24,
        ..EncoderConfig::default()
    };
    let cfg = MrcConfig {
        ablation: mode,
        ..MrcConfig::default()
    };
    let sel = SelectionConfig { strategy, m: 2, seed: 0 };
    let mut m = MrcModel::new(enc, sel, cfg, seed).unwrap();
    let vocab = Vocabulary::build(["aa bb cc dd ee ff at location causes"]);
    let text = "atlocation\taa\tbb\t2\natlocation\tcc\tdd\t2\ncauses\tee\tff\t1.5\n";
    m.store = ingest(text, "toy", &vocab, &RelationMap::default(), &RetrievalConfig::default()).store;
    m
}

/// n_u = 3 utterances, n_a = 3 options, with context and option facts.
fn toy_instance(r: &mut ChaCha8Rng, with_facts: bool) -> MrcInstance {
    let mut tok = |k: usize| (0..k).map(|_| r.random_range(4..24)).collect::<Vec<usize>>();
    let utts = vec![tok(3), tok(2), tok(3)];
    let q = tok(2);
    let opts = vec![tok(1), tok(2), tok(1)];
    let mut inst = MrcInstance::new("toy", &utts, &q, &opts, 1, 40).unwrap();
    if with_facts {
        inst.context_facts = vec![0, 2];
        inst.option_facts = vec![vec![1], vec![], vec![0, 1]];
    }
    inst
}

#[test]
fn end_to_end_gradcheck_for_every_mode() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let inst = toy_instance(&mut r, true);
    for mode in Ablation::ALL {
        let model = toy_model(mode, Strategy::Cosine, 5);
        let rep = gradcheck_params(&model.params, |t| model.loss(t, &inst), GradcheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{mode}: {rep:?}");
    }
}

#[test]
fn shape_contracts() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let model = toy_model(Ablation::Full, Strategy::Cosine, 1);
    let mut tape = Tape::with_params(&model.params);
    let r_k = pods::knowledge::encode_fact(&mut tape, &model.encoder, &model.head.fact_attn, model.store.tokens(0)).unwrap();
    assert_eq!(tape.shape(r_k), (1, D));

    let a = tape.constant(Tensor::randn(&[5, D], 1.0, &mut r));
    let b = tape.constant(Tensor::randn(&[3, D], 1.0, &mut r));
    let mask = [true, true, true, false, true];
    let o = duma(&mut tape, a, &mask, b, &model.head, false).unwrap();
    assert_eq!(tape.shape(o), (1, 2 * D));
    let o2 = duma(&mut tape, b, &[true; 3], a, &model.head, false).unwrap();
    assert!(tape.value(o).max_abs_diff(tape.value(o2)) > 1e-6);
    assert!(duma(&mut tape, a, &mask, b, &model.head, true).is_err());

    let fused = fuse_outputs(&mut tape, o, o, o2, &model.head, Ablation::Full).unwrap();
    assert_eq!(tape.shape(fused), (1, 4 * D));
    for mode in [Ablation::NoKnowledge, Ablation::NoPivot] {
        let f = fuse_outputs(&mut tape, o, o, o2, &model.head, mode).unwrap();
        assert_eq!(tape.shape(f), (1, 4 * D));
    }
    let base = fuse_outputs(&mut tape, o, o, o2, &model.head, Ablation::Baseline).unwrap();
    assert_eq!(tape.shape(base), (1, 2 * D));
}

/// The pooled halves of DUMA equal direct row averages of the two
/// attention outputs.
#[test]
fn duma_halves_are_plain_means() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let model = toy_model(Ablation::Full, Strategy::Cosine, 2);
    let p = &model.head;
    let mut tape = Tape::with_params(&model.params);
    let a = tape.constant(Tensor::randn(&[4, D], 1.0, &mut r));
    let b = tape.constant(Tensor::randn(&[3, D], 1.0, &mut r));
    let o = duma(&mut tape, a, &[true; 4], b, p, false).unwrap();
    let m1 = mha(&mut tape, a, b, b, &p.duma_1, None).unwrap();
    let m2 = mha(&mut tape, b, a, a, &p.duma_2, None).unwrap();
    let avg = |t: &Tensor| -> Vec<f64> {
        (0..t.cols()).map(|c| (0..t.rows()).map(|i| t.get(i, c)).sum::<f64>() / t.rows() as f64).collect()
    };
    let mut expect = avg(tape.value(m1));
    expect.extend(avg(tape.value(m2)));
    for (x, y) in tape.value(o).data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }

    let same = tape.constant(Tensor::randn(&[4, D], 1.0, &mut r));
    let lit = duma(&mut tape, a, &[true; 4], same, p, true).unwrap();
    assert_eq!(tape.shape(lit), (1, 2 * D));
}

#[test]
fn refinement_fallbacks_and_single_fact() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let model = toy_model(Ablation::Full, Strategy::Cosine, 3);
    let p = &model.head;
    let mut tape = Tape::with_params(&model.params);
    let h_c = tape.constant(Tensor::randn(&[6, D], 1.0, &mut r));
    let h_qa = tape.constant(Tensor::randn(&[3, D], 1.0, &mut r));
    let fact = Tensor::randn(&[1, D], 1.0, &mut r);
    let ck = tape.constant(fact);
    let out = refine(&mut tape, h_c, h_c, &[true; 6], Some(ck), h_qa, None, p).unwrap();
    assert_eq!(out.h_qa, h_qa);
    let wv = tape.param(p.ck_attn.value.weight);
    let v = tape.matmul(ck, wv).unwrap();
    for i in 0..6 {
        for (a, b) in tape.value(out.h_ck).row_slice(i).iter().zip(tape.value(v).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_kpr_weights_leave_only_the_bias() {
    let mut model = toy_model(Ablation::Full, Strategy::Cosine, 4);
    model.params.set_value(model.head.kpr.weight, Tensor::zeros(&[4 * D, 2 * D])).unwrap();
    let bias_id = model.head.kpr.bias.unwrap();
    let bias = Tensor::row((0..2 * D).map(|i| i as f64 * 0.1).collect());
    model.params.set_value(bias_id, bias.clone()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::with_params(&model.params);
    let o_o = tape.constant(Tensor::randn(&[1, 2 * D], 1.0, &mut r));
    let o_p = tape.constant(Tensor::randn(&[1, 2 * D], 1.0, &mut r));
    let o_k = tape.constant(Tensor::randn(&[1, 2 * D], 1.0, &mut r));
    let o = fuse_outputs(&mut tape, o_o, o_p, o_k, &model.head, Ablation::Full).unwrap();
    let vals = tape.value(o).data();
    assert_eq!(&vals[..2 * D], tape.value(o_o).data());
    assert_eq!(&vals[2 * D..], bias.data());
}

#[test]
fn uniform_logits_give_ln_n_and_distributions_sum_to_one() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::row(vec![0.3; 3]));
    let loss = tape.cross_entropy(l, 2).unwrap();
    assert!((tape.value(loss).data()[0] - 3f64.ln()).abs() < 1e-9);

    let mut r = ChaCha8Rng::seed_from_u64(9);
    for mode in Ablation::ALL {
        let model = toy_model(mode, Strategy::Cosine, 6);
        let p = model.probabilities(&toy_instance(&mut r, true), None).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn permuting_options_permutes_probabilities() {
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let model = toy_model(Ablation::Full, Strategy::Cosine, 7);
    for _ in 0..5 {
        let inst = toy_instance(&mut r, true);
        let p = model.probabilities(&inst, None).unwrap();
        let perm = [2, 0, 1];
        let mut shuffled = inst.clone();
        shuffled.packed = perm.iter().map(|&j| inst.packed[j].clone()).collect();
        shuffled.option_facts = perm.iter().map(|&j| inst.option_facts[j].clone()).collect();
        let q = model.probabilities(&shuffled, None).unwrap();
        for (k, &j) in perm.iter().enumerate() {
            assert!((q[k] - p[j]).abs() < 1e-12);
        }
    }
}

fn grad_norm_of(model: &MrcModel, inst: &MrcInstance, prefixes: &[&str]) -> f64 {
    let mut tape = Tape::with_params(&model.params);
    let loss = model.loss(&mut tape, inst).unwrap();
    let g = tape.backward(loss).unwrap();
    let pg = tape.param_grads(&g);
    model
        .params
        .ids()
        .filter(|&id| prefixes.iter().any(|p| model.params.name(id).starts_with(p)))
        .filter_map(|id| pg.get(id))
        .flat_map(|g| g.iter())
        .map(|x| x.abs())
        .fold(0.0, f64::max)
}

#[test]
fn baseline_never_touches_pivot_or_knowledge_parameters() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let model = toy_model(Ablation::Baseline, Strategy::Cosine, 8);
    let inst = toy_instance(&mut r, true);
    let g = grad_norm_of(&model, &inst, &["mrc.pivot_attn", "mrc.ck_attn", "mrc.qak_attn", "mrc.fact_attn", "mrc.kpr"]);
    assert_eq!(g, 0.0);
}

#[test]
fn empty_stores_and_all_strategy_leave_knowledge_path_untrained() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let model = toy_model(Ablation::Full, Strategy::All, 9);
    let inst = toy_instance(&mut r, false);
    assert_eq!(grad_norm_of(&model, &inst, &["mrc.ck_attn", "mrc.qak_attn", "mrc.fact_attn"]), 0.0);
}

#[test]
fn knowledge_changes_the_full_model_but_not_no_knowledge() {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let inst = toy_instance(&mut r, true);
    let mut bare = inst.clone();
    bare.context_facts.clear();
    bare.option_facts = vec![vec![]; 3];
    let full = toy_model(Ablation::Full, Strategy::Cosine, 10);
    let a = full.probabilities(&inst, None).unwrap();
    let b = full.probabilities(&bare, None).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));

    let mut nk = full.clone();
    nk.config.ablation = Ablation::NoKnowledge;
    assert_eq!(nk.probabilities(&inst, None).unwrap(), nk.probabilities(&bare, None).unwrap());
    assert!(a.iter().zip(&nk.probabilities(&inst, None).unwrap()).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn qa_span_precedes_utterances_and_round_trips() {
    let utts = vec![vec![10, 11], vec![12]];
    let inst = MrcInstance::new("x", &utts, &[5, 6], &[vec![7], vec![8, 9]], 0, 40).unwrap();
    for (j, p) in inst.packed.iter().enumerate() {
        assert!(p.response_span.end <= p.utterance_spans[0].start);
        let mut rebuilt = vec![pods::encoding::CLS];
        rebuilt.extend_from_slice(&p.ids[p.response_span.clone()]);
        rebuilt.push(pods::encoding::SEP);
        for s in &p.utterance_spans {
            rebuilt.extend_from_slice(&p.ids[s.clone()]);
            rebuilt.push(pods::encoding::SEP);
        }
        assert_eq!(rebuilt, p.ids, "option {j}");
    }
}

#[test]
fn fact_cache_matches_uncached() {
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let model = toy_model(Ablation::Full, Strategy::Cosine, 11);
    let inst = toy_instance(&mut r, true);
    let cache = pods::knowledge::FactCache::new(0);
    let a = model.probabilities(&inst, None).unwrap();
    let b = model.probabilities(&inst, Some(&cache)).unwrap();
    assert!(!cache.is_empty());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}
