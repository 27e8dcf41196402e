use hybridlm::autodiff::Graph;
use hybridlm::compress::*;
use hybridlm::cost::MemoryConfig;
use hybridlm::model::{forward, logits, ArchSpec, Dims, ForwardOptions, LayerKind, LayerWeights, ModelWeights};
use hybridlm::train::{eval_windows, train, BlendSchedule, Corpora, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims() -> Dims {
    Dims {
        d_model: 16,
        d_ffn: 32,
        n_q_heads: 2,
        n_kv_heads: 1,
        d_state: 8,
        n_groups: 1,
        mamba_head_dim: 8,
        mamba_expand: 2,
        conv_window: 4,
        vocab_size: 24,
    }
}

fn lively(spec: &ArchSpec, seed: u64) -> ModelWeights {
    let mut w = ModelWeights::init(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in w.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.15..0.15);
        }
    }
    w
}

fn calib(n: usize, seq: usize, vocab: usize, seed: u64) -> Samples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Samples::new((0..n * seq).map(|_| rng.random_range(0..vocab as u32)).collect(), seq).unwrap()
}

fn random_batch(n: usize, seq: usize, vocab: usize, seed: u64) -> hybridlm::train::Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream: Vec<u32> = (0..n * seq + 1).map(|_| rng.random_range(0..vocab as u32)).collect();
    eval_windows(&stream, seq, n).unwrap()
}

/// The same weights with `layer` physically removed.
fn drop_layer(w: &ModelWeights, layer: usize) -> ModelWeights {
    let mut out = w.clone();
    out.layers.remove(layer);
    out.spec.layers.remove(layer);
    out
}

#[test]
fn layer_importance_matches_independent_ablation() {
    let spec = ArchSpec::hybrid(8, 0.125, &dims()).unwrap();
    let w = lively(&spec, 1);
    let cal = calib(3, 12, 24, 2);
    let scores = layer_importance(&w, &cal).unwrap();
    assert_eq!(scores.len(), 8);
    for (layer, &score) in scores.iter().enumerate() {
        let ablated = drop_layer(&w, layer);
        let mut total = 0.0;
        for s in 0..cal.count() {
            let toks = &cal.tokens[s * cal.seq..(s + 1) * cal.seq];
            let mut g = Graph::new();
            let full = forward(&mut g, &w, toks, cal.seq, &ForwardOptions::default()).unwrap();
            let a = g.value(full.pre_head).clone();
            let mut g = Graph::new();
            let part = forward(&mut g, &ablated, toks, cal.seq, &ForwardOptions::default()).unwrap();
            let b = g.value(part.pre_head);
            let n = a.len() as f64;
            total += a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        }
        assert_eq!(score, total / cal.count() as f64, "layer {layer}");
        assert!(score > 0.0);
    }
}

#[test]
fn zeroed_layer_scores_zero() {
    let spec = ArchSpec::hybrid(8, 0.125, &dims()).unwrap();
    let mut w = lively(&spec, 3);
    w.layers[2].zero_output();
    w.layers[5].zero_output();
    let scores = layer_importance(&w, &calib(2, 10, 24, 4)).unwrap();
    assert_eq!(scores[2], 0.0);
    assert_eq!(scores[5], 0.0);
    assert!(scores.iter().enumerate().all(|(i, &s)| s >= 0.0 && (s > 0.0 || i == 2 || i == 5)));
}

#[test]
fn duplicated_layer_scores_are_equal() {
    let d = dims();
    let spec = ArchSpec::from_layers(
        vec![LayerKind::Mamba2, LayerKind::Ffn, LayerKind::Ffn, LayerKind::Attention],
        &d,
        false,
    )
    .unwrap();
    let mut w = lively(&spec, 5);
    w.layers[2] = w.layers[1].clone();
    let scores = layer_importance(&w, &calib(2, 10, 24, 6)).unwrap();
    assert_eq!(scores[1], scores[2]);
}

#[test]
fn zero_w1_row_scores_zero() {
    let spec = ArchSpec::hybrid(6, 0.17, &dims()).unwrap();
    let mut w = lively(&spec, 7);
    let ffn = spec.layers.iter().position(|&k| k == LayerKind::Ffn).unwrap();
    if let LayerWeights::Ffn(f) = &mut w.layers[ffn] {
        f.w1.data_mut()[3 * 16..4 * 16].iter_mut().for_each(|x| *x = 0.0);
    }
    for agg in [
        Aggregation::default(),
        Aggregation {
            sequence: Agg::L2,
            batch: Agg::Mean,
        },
    ] {
        let scores = ffn_neuron_importance(&w, &calib(3, 10, 24, 8), agg).unwrap();
        assert_eq!(scores.len(), spec.count(LayerKind::Ffn));
        let (layer, s) = &scores[0];
        assert_eq!(*layer, ffn);
        assert_eq!(s.len(), 32);
        assert_eq!(s[3], 0.0);
        assert!(s.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn neuron_ranking_agrees_with_single_neuron_ablation() {
    // one FFN layer whose output columns have equal norm, so the effect of a
    // neuron on the output is carried by its activation alone
    let d = dims();
    let spec = ArchSpec::from_layers(vec![LayerKind::Ffn], &d, false).unwrap();
    let mut w = lively(&spec, 9);
    if let LayerWeights::Ffn(f) = &mut w.layers[0] {
        for j in 0..32 {
            let norm = (0..16).map(|r| f.w2.data()[r * 32 + j].powi(2)).sum::<f64>().sqrt();
            for r in 0..16 {
                f.w2.data_mut()[r * 32 + j] *= 0.3 / norm;
            }
        }
    }
    let cal = calib(8, 16, 24, 10);
    let scores = &ffn_neuron_importance(&w, &cal, Aggregation::default()).unwrap()[0].1;
    let base = logits(&w, &cal.tokens, cal.seq).unwrap();
    let effect: Vec<f64> = (0..32)
        .map(|j| {
            let mut a = w.clone();
            if let LayerWeights::Ffn(f) = &mut a.layers[0] {
                f.w1.data_mut()[j * 16..(j + 1) * 16].iter_mut().for_each(|x| *x = 0.0);
            }
            let l = logits(&a, &cal.tokens, cal.seq).unwrap();
            l.data().iter().zip(base.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        })
        .collect();
    let (mut agree, mut pairs) = (0, 0);
    for i in 0..32 {
        for j in i + 1..32 {
            pairs += 1;
            if (scores[i] - scores[j]) * (effect[i] - effect[j]) > 0.0 {
                agree += 1;
            }
        }
    }
    let frac = agree as f64 / pairs as f64;
    assert!(frac >= 0.8, "{frac}");
}

fn target(budget: u64) -> MemoryTarget {
    MemoryTarget {
        seq: 1024,
        batch: 1,
        memory: MemoryConfig::default(),
        budget_bytes: budget,
    }
}

#[test]
fn enumeration_respects_budget() {
    let spec = ArchSpec::hybrid(13, 0.08, &dims()).unwrap();
    let importance: Vec<f64> = (0..13).map(|i| (i * 7 % 13) as f64).collect();
    let grid = SearchGrid::around(&spec, [1, 2, 2], 8, 2);
    let all = enumerate_candidates(&spec, &importance, &grid, &target(u64::MAX)).unwrap();
    assert_eq!(all.len(), grid.size());
    assert!(matches!(
        enumerate_candidates(&spec, &importance, &grid, &target(0)),
        Err(hybridlm::Error::NoCandidates(_))
    ));
    let mid = {
        let mut m: Vec<u64> = all.iter().map(|c| c.memory_bytes).collect();
        m.sort_unstable();
        m[m.len() / 2]
    };
    let some = enumerate_candidates(&spec, &importance, &grid, &target(mid)).unwrap();
    assert!(some.len() < all.len() && !some.is_empty());
    assert!(some.iter().all(|c| c.memory_bytes <= mid));
    for c in &all {
        // kept layers are the most important of each type, in parent order
        assert!(c.kept_layer_ids.windows(2).all(|w| w[0] < w[1]));
        for kind in [LayerKind::Attention, LayerKind::Mamba2, LayerKind::Ffn] {
            let kept: Vec<usize> = c.kept_layer_ids.iter().copied().filter(|&i| spec.layers[i] == kind).collect();
            let dropped = (0..13).filter(|i| spec.layers[*i] == kind && !kept.contains(i));
            for d in dropped {
                assert!(kept.iter().all(|&k| importance[k] >= importance[d]));
            }
        }
    }
}

#[test]
fn full_candidate_is_identity_and_zero_neurons_prune_exactly() {
    let spec = ArchSpec::hybrid(8, 0.125, &dims()).unwrap();
    let mut w = lively(&spec, 11);
    let cal = calib(2, 10, 24, 12);
    let importance = layer_importance(&w, &cal).unwrap();
    let grid = SearchGrid {
        n_attention: vec![1],
        n_mamba: vec![3],
        n_ffn: vec![4],
        ffn_width: vec![32],
    };
    let cands = enumerate_candidates(&spec, &importance, &grid, &target(u64::MAX)).unwrap();
    let neurons = ffn_neuron_importance(&w, &cal, Aggregation::default()).unwrap();
    assert_eq!(realize_pruned(&w, &cands[0], &neurons).unwrap(), w);

    // kill 5 neurons in every FFN, then prune to 27
    for layer in &mut w.layers {
        if let LayerWeights::Ffn(f) = layer {
            for j in [0, 4, 9, 17, 31] {
                f.w1.data_mut()[j * 16..(j + 1) * 16].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    let neurons = ffn_neuron_importance(&w, &cal, Aggregation::default()).unwrap();
    let grid = SearchGrid {
        ffn_width: vec![27],
        ..grid
    };
    let cand = &enumerate_candidates(&spec, &importance, &grid, &target(u64::MAX)).unwrap()[0];
    let child = realize_pruned(&w, cand, &neurons).unwrap();
    assert_eq!(child.spec.d_ffn, 27);
    let a = logits(&w, &cal.tokens, cal.seq).unwrap();
    let b = logits(&child, &cal.tokens, cal.seq).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn child_equal_to_parent_agrees_fully() {
    let spec = ArchSpec::hybrid(8, 0.125, &dims()).unwrap();
    let w = lively(&spec, 13);
    let batch = random_batch(4, 16, 24, 14);
    let pred = greedy_predictions(&w, &batch).unwrap();
    let (acc, agree) = score_candidate(&w, &pred, &batch).unwrap();
    assert_eq!(agree, 1.0);
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn uniform_child_agrees_at_chance() {
    // a uniform-logit child's prediction is a uniform draw over the vocabulary
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let n = 200_000;
    let parent: Vec<u32> = (0..n).map(|i| (i * 31 % 256) as u32).collect();
    let child: Vec<u32> = (0..n).map(|_| rng.random_range(0..256)).collect();
    let (_, agree) = agreement_scores(&child, &parent, &parent);
    let sigma = ((1.0 / 256.0) * (255.0 / 256.0) / n as f64).sqrt();
    assert!((agree - 1.0 / 256.0).abs() < 4.0 * sigma, "{agree}");
}

fn cand(id: usize, mem: u64, acc: f64, agree: f64, pattern: &str) -> CandidateReport {
    let layers = pattern
        .chars()
        .map(|c| match c {
            'M' => LayerKind::Mamba2,
            'A' => LayerKind::Attention,
            _ => LayerKind::Ffn,
        })
        .collect();
    CandidateReport {
        id,
        spec: ArchSpec::from_layers(layers, &dims(), false).unwrap(),
        kept_layer_ids: vec![],
        ffn_width: 32,
        memory_bytes: mem,
        next_token_accuracy: acc,
        parent_agreement: agree,
        post_prune_loss: None,
        benchmark_avg: None,
        post_short_distill_avg: None,
    }
}

#[test]
fn rank_and_select_orders_and_breaks_ties() {
    let reports = vec![
        cand(0, 30, 0.5, 0.5, "MF"),
        cand(1, 10, 0.9, 0.1, "MFF"),
        cand(2, 20, 0.1, 0.9, "MMF"),
        cand(3, 40, 0.3, 0.3, "MFMF"),
    ];
    let bench = |c: &CandidateReport| Ok([2.0, 1.5, 3.0, 1.0][c.id]);
    let all = rank_and_select(&reports, 4, 4, bench).unwrap();
    assert_eq!(all.iter().map(|c| c.id).collect::<Vec<_>>(), vec![3, 1, 0, 2]);
    assert_eq!(all[0].benchmark_avg, Some(1.0));

    // combined rank: candidates 1 and 2 each lead one metric
    let order = combined_ranking(&reports);
    assert_eq!(&order[..2], &[1, 2]);
    let top = rank_and_select(&reports, 2, 1, bench).unwrap();
    assert_eq!(top[0].id, 1);

    let flat: Vec<CandidateReport> = [50, 20, 40].iter().enumerate().map(|(i, &m)| cand(i, m, 0.5, 0.5, "MF")).collect();
    let picked = rank_and_select(&flat, 3, 3, |_| Ok(1.0)).unwrap();
    assert_eq!(picked.iter().map(|c| c.memory_bytes).collect::<Vec<_>>(), vec![20, 40, 50]);
    assert!(rank_and_select(&flat, 2, 3, |_| Ok(1.0)).is_err());
    assert!(rank_and_select(&flat, 4, 1, |_| Ok(1.0)).is_err());
}

#[test]
fn merge_endpoints_midpoint_and_monotonicity() {
    let spec = ArchSpec::hybrid(6, 0.17, &dims()).unwrap();
    let a = lively(&spec, 16);
    let b = lively(&spec, 17);
    assert_eq!(merge_checkpoints(&a, &b, 0.0).unwrap(), a);
    assert_eq!(merge_checkpoints(&a, &b, 1.0).unwrap(), b);
    let mut s2 = a.clone();
    let mut s4 = a.clone();
    s2.head.data_mut()[0] = 2.0;
    s4.head.data_mut()[0] = 4.0;
    assert_eq!(merge_checkpoints(&s2, &s4, 0.5).unwrap().head.data()[0], 3.0);
    let sweep: Vec<ModelWeights> = (0..=10).map(|i| merge_checkpoints(&a, &b, i as f64 / 10.0).unwrap()).collect();
    for k in 0..a.param_count() as usize {
        let vals: Vec<f64> = sweep.iter().map(|w| flat(w)[k]).collect();
        let up = vals.windows(2).all(|p| p[0] <= p[1]);
        let down = vals.windows(2).all(|p| p[0] >= p[1]);
        assert!(up || down, "param {k}");
    }
    let other = ArchSpec::hybrid(8, 0.125, &dims()).unwrap();
    assert!(merge_checkpoints(&a, &ModelWeights::init(&other, 0).unwrap(), 0.5).is_err());
    assert!(merge_checkpoints(&a, &b, 1.5).is_err());
}

fn flat(w: &ModelWeights) -> Vec<f64> {
    w.named_params().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

fn toy_corpora() -> Corpora {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    Corpora::from([("rand".to_string(), (0..4000).map(|_| rng.random_range(0..24u32)).collect())])
}

#[test]
fn self_distillation_has_zero_kl() {
    let spec = ArchSpec::hybrid(6, 0.17, &dims()).unwrap();
    let teacher = lively(&spec, 18);
    let mut student = teacher.clone();
    let cfg = DistillConfig {
        train: TrainConfig {
            peak_lr: 0.0,
            warmup_tokens: 0,
            total_tokens: 64,
            batch_tokens: 64,
            seq_len: 16,
            ..Default::default()
        },
        temperature: 1.0,
    };
    let val = random_batch(2, 16, 24, 19);
    let log = distill(&teacher, &mut student, &cfg, &BlendSchedule::single("rand"), &toy_corpora(), &val).unwrap();
    assert!(log[0].train_loss.abs() < 1e-12, "{}", log[0].train_loss);
    assert_eq!(student, teacher);
}

#[test]
fn distillation_raises_parent_agreement() {
    let spec = ArchSpec::hybrid(8, 0.125, &dims()).unwrap();
    let parent = lively(&spec, 20);
    let cal = calib(4, 16, 24, 21);
    let importance = layer_importance(&parent, &cal).unwrap();
    let neurons = ffn_neuron_importance(&parent, &cal, Aggregation::default()).unwrap();
    let grid = SearchGrid {
        n_attention: vec![1],
        n_mamba: vec![2],
        n_ffn: vec![2],
        ffn_width: vec![16],
    };
    let cand = &enumerate_candidates(&spec, &importance, &grid, &target(u64::MAX)).unwrap()[0];
    let mut child = realize_pruned(&parent, cand, &neurons).unwrap();
    let batch = random_batch(8, 16, 24, 22);
    let pred = greedy_predictions(&parent, &batch).unwrap();
    let (_, before) = score_candidate(&child, &pred, &batch).unwrap();
    let cfg = DistillConfig {
        train: TrainConfig {
            peak_lr: 5e-3,
            warmup_tokens: 640,
            total_tokens: 64 * 300,
            batch_tokens: 64,
            seq_len: 16,
            log_fraction: 0.5,
            ..Default::default()
        },
        temperature: 1.0,
    };
    let log = distill(&parent, &mut child, &cfg, &BlendSchedule::single("rand"), &toy_corpora(), &batch).unwrap();
    let (_, after) = score_candidate(&child, &pred, &batch).unwrap();
    assert!(after > before, "{before} -> {after}");
    assert!(log.last().unwrap().train_loss < log[0].train_loss);
}

#[test]
fn memorizing_parent_is_perfect_on_its_string() {
    let d = Dims {
        vocab_size: 12,
        ..dims()
    };
    let spec = ArchSpec::hybrid(4, 0.25, &d).unwrap();
    let mut parent = ModelWeights::init(&spec, 3).unwrap();
    let pattern = [3u32, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5];
    let stream: Vec<u32> = (0..600).map(|i| pattern[i % 11]).collect();
    let corpora = Corpora::from([("loop".to_string(), stream.clone())]);
    let val = eval_windows(&stream, 16, 4).unwrap();
    let cfg = TrainConfig {
        peak_lr: 1e-2,
        warmup_tokens: 0,
        total_tokens: 64 * 1500,
        batch_tokens: 64,
        seq_len: 16,
        micro_batch_seqs: 2,
        log_fraction: 0.5,
        ..Default::default()
    };
    train(&mut parent, &cfg, &BlendSchedule::single("loop"), &corpora, &val, |_| {}).unwrap();
    let pred = greedy_predictions(&parent, &val).unwrap();
    // the first few positions of a window cannot identify the phase yet
    let settled = |p: &[u32]| (0..p.len()).filter(|i| i % 16 >= 4).all(|i| p[i] == val.targets[i]);
    assert!(settled(&pred));
    let cal = Samples::from_batch(&val);
    let importance = layer_importance(&parent, &cal).unwrap();
    let neurons = ffn_neuron_importance(&parent, &cal, Aggregation::default()).unwrap();
    let grid = SearchGrid::around(&spec, [0, 1, 1], 8, 1);
    for c in enumerate_candidates(&spec, &importance, &grid, &target(u64::MAX)).unwrap() {
        let child = realize_pruned(&parent, &c, &neurons).unwrap();
        let (acc, agree) = score_candidate(&child, &pred, &val).unwrap();
        assert!(acc <= 1.0 && agree <= 1.0);
    }
}
