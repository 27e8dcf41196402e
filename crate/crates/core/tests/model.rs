use hybridlm::autodiff::{Graph, ScanMode};
use hybridlm::kernels::{self, SsdDims, SsdInputs};
use hybridlm::model::{build_layer_pattern, forward, logits, ArchSpec, Dims, ForwardOptions, LayerKind, LayerWeights, ModelWeights};
use hybridlm::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct ScanCase {
    dims: SsdDims,
    seq: usize,
    x: Vec<f64>,
    dt: Vec<f64>,
    a_log: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl ScanCase {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let groups = rng.random_range(1..=3);
        let heads = groups * rng.random_range(1..=3);
        let dims = SsdDims {
            heads,
            head_dim: rng.random_range(1..=6),
            groups,
            d_state: rng.random_range(1..=8),
        };
        let seq = rng.random_range(1..=128);
        let mut v = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        ScanCase {
            x: v(seq * dims.inner(), -2.0, 2.0),
            dt: v(seq * heads, 0.0, 1.0).into_iter().map(kernels::softplus).collect(),
            a_log: v(heads, -2.0, 1.5),
            b: v(seq * dims.bc_width(), -1.5, 1.5),
            c: v(seq * dims.bc_width(), -1.5, 1.5),
            d: v(dims.inner(), -1.0, 1.0),
            dims,
            seq,
        }
    }

    fn inputs(&self) -> SsdInputs<'_> {
        SsdInputs {
            x: &self.x,
            dt: &self.dt,
            a_log: &self.a_log,
            b: &self.b,
            c: &self.c,
            d: &self.d,
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn chunked_scan_equals_sequential_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let case = ScanCase::random(&mut rng);
        let chunk = rng.random_range(1..=case.seq.max(2));
        let mut s_seq = vec![0.0; case.dims.state_len()];
        let mut s_chk = s_seq.clone();
        let y_seq = kernels::ssd_sequential(case.dims, case.inputs(), case.seq, &mut s_seq);
        let y_chk = kernels::ssd_chunked(case.dims, case.inputs(), case.seq, chunk, &mut s_chk);
        worst = worst.max(max_abs_diff(&y_seq, &y_chk)).max(max_abs_diff(&s_seq, &s_chk));
    }
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn chunk_sizes_dividing_and_not_dividing_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut case = ScanCase::random(&mut rng);
    while case.seq < 24 {
        case = ScanCase::random(&mut rng);
    }
    let mut s = vec![0.0; case.dims.state_len()];
    let reference = kernels::ssd_sequential(case.dims, case.inputs(), case.seq, &mut s);
    for chunk in [1, 2, 3, 5, 8, case.seq - 1, case.seq, case.seq + 10] {
        let mut st = vec![0.0; case.dims.state_len()];
        let y = kernels::ssd_chunked(case.dims, case.inputs(), case.seq, chunk, &mut st);
        assert!(max_abs_diff(&y, &reference) <= 1e-5, "chunk {chunk}");
    }
}

#[test]
fn chunk_of_one_is_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let case = ScanCase::random(&mut rng);
    let mut a = vec![0.0; case.dims.state_len()];
    let mut b = a.clone();
    let y1 = kernels::ssd_sequential(case.dims, case.inputs(), case.seq, &mut a);
    let y2 = kernels::ssd_chunked(case.dims, case.inputs(), case.seq, 1, &mut b);
    assert!(max_abs_diff(&y1, &y2) <= 1e-12);
}

#[test]
fn graph_scan_modes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let case = ScanCase::random(&mut rng);
    let rows = case.seq;
    let dims = case.dims;
    let run = |mode| {
        let mut g = Graph::new();
        let t = |data: &Vec<f64>, cols: usize| Tensor::new(vec![data.len() / cols, cols], data.clone()).unwrap();
        let x = g.constant(t(&case.x, dims.inner()));
        let dt = g.constant(t(&case.dt, dims.heads));
        let a = g.constant(Tensor::from_vec(case.a_log.clone()));
        let b = g.constant(t(&case.b, dims.bc_width()));
        let c = g.constant(t(&case.c, dims.bc_width()));
        let d = g.constant(Tensor::from_vec(case.d.clone()));
        let y = g.scan(x, dt, a, b, c, d, dims, rows, mode).unwrap();
        g.value(y).data().to_vec()
    };
    let y_seq = run(ScanMode::Sequential);
    for chunk in [1, 4, 16, 64] {
        assert!(max_abs_diff(&y_seq, &run(ScanMode::Chunked(chunk))) <= 1e-5);
    }
}

#[test]
fn zero_step_freezes_state() {
    // Δ = 0: no decay and no input, readout from the frozen state
    let dims = SsdDims {
        heads: 2,
        head_dim: 2,
        groups: 1,
        d_state: 3,
    };
    let mut state: Vec<f64> = (0..dims.state_len()).map(|i| i as f64 * 0.1).collect();
    let frozen = state.clone();
    let x = [1.0, -2.0, 0.5, 3.0];
    let c = [0.3, -0.2, 0.1];
    let d = [0.5, 0.5, -1.0, 2.0];
    let mut y = [0.0; 4];
    kernels::ssd_step(dims, &mut state, &x, &[0.0, 0.0], &[0.0, 0.7], &[1.0, 1.0, 1.0], &c, &d, &mut y);
    assert_eq!(state, frozen);
    for ch in 0..4 {
        let hc: f64 = (0..3).map(|n| frozen[ch * 3 + n] * c[n]).sum();
        assert!((y[ch] - (hc + d[ch] * x[ch])).abs() < 1e-12);
    }
}

#[test]
fn skip_only_when_b_and_c_vanish() {
    let dims = SsdDims {
        heads: 2,
        head_dim: 3,
        groups: 2,
        d_state: 2,
    };
    let seq = 5;
    let x: Vec<f64> = (0..seq * 6).map(|i| (i as f64).sin()).collect();
    let d: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect();
    let zeros = vec![0.0; seq * 4];
    let inp = SsdInputs {
        x: &x,
        dt: &[0.5; 10],
        a_log: &[0.1, -0.3],
        b: &zeros,
        c: &zeros,
        d: &d,
    };
    let mut s = vec![0.0; dims.state_len()];
    let y = kernels::ssd_chunked(dims, inp, seq, 2, &mut s);
    for t in 0..seq {
        for ch in 0..6 {
            assert_eq!(y[t * 6 + ch], d[ch] * x[t * 6 + ch]);
        }
    }
}

fn pipeline_dims() -> Dims {
    Dims {
        d_model: 8,
        d_ffn: 16,
        n_q_heads: 2,
        n_kv_heads: 1,
        d_state: 4,
        n_groups: 1,
        mamba_head_dim: 4,
        mamba_expand: 2,
        conv_window: 4,
        vocab_size: 20,
    }
}

#[test]
fn zero_branches_give_pure_residual_path() {
    let spec = ArchSpec::hybrid(13, 0.08, &pipeline_dims()).unwrap();
    let w = ModelWeights::init(&spec, 1).unwrap().with_zero_branches();
    let tokens = [3, 1, 4, 1, 5, 9];
    let out = logits(&w, &tokens, 6).unwrap();
    assert_eq!(out.shape(), &[6, 20]);
    for (t, &tok) in tokens.iter().enumerate() {
        let e = w.embedding.row(tok as usize);
        let (normed, _) = kernels::rmsnorm_rows(e, w.final_norm.data(), 8, 1e-6);
        let expect = kernels::matmul_nt(&normed, w.head.data(), 1, 8, 20);
        assert!(max_abs_diff(out.row(t), &expect) < 1e-12);
    }
}

#[test]
fn token_out_of_vocabulary_is_an_error() {
    let spec = ArchSpec::hybrid(6, 0.0, &pipeline_dims()).unwrap();
    let w = ModelWeights::init(&spec, 1).unwrap();
    assert!(matches!(logits(&w, &[1, 20], 2), Err(Error::TokenOutOfRange { .. })));
}

#[test]
fn forward_is_deterministic() {
    let spec = ArchSpec::hybrid(13, 0.08, &pipeline_dims()).unwrap();
    let w = ModelWeights::init(&spec, 1).unwrap();
    let tokens: Vec<u32> = (0..24).map(|i| (i * 7 % 20) as u32).collect();
    let a = logits(&w, &tokens, 12).unwrap();
    let b = logits(&w, &tokens, 12).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn rmsnorm_examples() {
    let (ones, _) = kernels::rmsnorm_rows(&[1.0; 4], &[1.0; 4], 4, 0.0);
    assert_eq!(ones, vec![1.0; 4]);
    let (y, _) = kernels::rmsnorm_rows(&[3.0, 4.0], &[1.0, 1.0], 2, 0.0);
    assert!((y[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-12);
    assert!((y[1] - 4.0 / 12.5f64.sqrt()).abs() < 1e-12);
    assert!((y[0] - 0.848_528_137).abs() < 1e-9);
    let x = [0.3, -1.2, 2.5, 0.01];
    let big: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
    let (a, _) = kernels::rmsnorm_rows(&x, &[1.0; 4], 4, 1e-6);
    let (b, _) = kernels::rmsnorm_rows(&big, &[1.0; 4], 4, 1e-6);
    assert!(max_abs_diff(&a, &b) < 1e-6);
}

#[test]
fn primitive_examples() {
    assert_eq!(kernels::squared_relu(-3.0), 0.0);
    assert_eq!(kernels::squared_relu(2.0), 4.0);
    let mut s = vec![0.0, 0.0];
    kernels::softmax_rows(&mut s, 2);
    assert_eq!(s, vec![0.5, 0.5]);
    let m = [2.0, 3.0, 5.0, 7.0];
    assert_eq!(kernels::matmul(&[1.0, 0.0, 0.0, 1.0], &m, 2, 2, 2), m.to_vec());
}

#[test]
fn softmax_rows_sum_to_one_and_ce_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..50).map(|_| rng.random_range(-20.0..20.0)).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![5, 10], data).unwrap());
    let p = g.softmax(x).unwrap();
    for r in 0..5 {
        let sum: f64 = g.value(p).row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    let ce = g.cross_entropy(x, &[0, 1, 2, 3, 4]).unwrap();
    assert!(g.value(ce).item() >= 0.0);
}

#[test]
fn attention_single_position_returns_value() {
    let q = [0.3, -0.1, 2.0, 1.0];
    let k = [5.0, 5.0];
    let v = [0.25, -4.0];
    // 2 query heads sharing one kv head
    let (out, probs) = kernels::attention_causal(&q, &k, &v, 1, 2, 1, 2);
    assert_eq!(out, vec![0.25, -4.0, 0.25, -4.0]);
    assert_eq!(probs, vec![1.0, 1.0]);
}

#[test]
fn uniform_keys_give_uniform_weights() {
    let rows = 6;
    let q: Vec<f64> = (0..rows * 2).map(|i| i as f64 * 0.37).collect();
    let k = vec![1.5; rows * 2];
    let v: Vec<f64> = (0..rows * 2).map(|i| i as f64).collect();
    let (_, probs) = kernels::attention_causal(&q, &k, &v, rows, 1, 1, 2);
    for t in 0..rows {
        for tau in 0..=t {
            assert!((probs[t * rows + tau] - 1.0 / (t + 1) as f64).abs() < 1e-12);
        }
    }
}

fn single_ffn(w1: Vec<f64>, w2: Vec<f64>, d: usize, f: usize) -> ModelWeights {
    let dims = Dims {
        d_model: d,
        d_ffn: f,
        n_q_heads: 1,
        n_kv_heads: 1,
        vocab_size: 3,
        ..pipeline_dims()
    };
    let spec = ArchSpec::from_layers(vec![LayerKind::Ffn], &dims, false).unwrap();
    let mut w = ModelWeights::init(&spec, 0).unwrap();
    if let LayerWeights::Ffn(ffn) = &mut w.layers[0] {
        ffn.w1 = Tensor::new(vec![f, d], w1).unwrap();
        ffn.w2 = Tensor::new(vec![d, f], w2).unwrap();
    }
    w
}

fn ffn_branch(w: &ModelWeights, x: &[f64]) -> Vec<f64> {
    let LayerWeights::Ffn(ffn) = &w.layers[0] else { unreachable!() };
    let d = w.spec.d_model;
    let f = w.spec.d_ffn;
    let h: Vec<f64> = kernels::matmul_nt(x, ffn.w1.data(), 1, d, f).into_iter().map(kernels::squared_relu).collect();
    kernels::matmul_nt(&h, ffn.w2.data(), 1, f, d)
}

#[test]
fn ffn_examples() {
    let w = single_ffn(vec![1.0], vec![1.0], 1, 1);
    assert_eq!(ffn_branch(&w, &[2.0]), vec![4.0]);
    assert_eq!(ffn_branch(&w, &[-2.0]), vec![0.0]);

    // a trailing neuron whose W1 row is zero contributes nothing, bit for bit
    let w = single_ffn(vec![0.5, -1.0, 2.0, 1.0, 0.0, 0.0], vec![1.0, -1.0, 3.0, 0.2, 0.4, 7.0], 2, 3);
    let mut pruned = single_ffn(vec![0.5, -1.0, 2.0, 1.0], vec![1.0, -1.0, 0.2, 0.4], 2, 2);
    pruned.embedding = w.embedding.clone();
    pruned.head = w.head.clone();
    let x = [0.7, -0.3];
    assert_eq!(ffn_branch(&w, &x), ffn_branch(&pruned, &x));
    assert_eq!(logits(&w, &[0, 1, 2], 3).unwrap(), logits(&pruned, &[0, 1, 2], 3).unwrap());

    // elsewhere the lane grouping of the dot product shifts, so equality is to rounding
    let w = single_ffn(vec![0.5, -1.0, 0.0, 0.0, 2.0, 1.0], vec![1.0, 3.0, -1.0, 0.2, 7.0, 0.4], 2, 3);
    pruned.embedding = w.embedding.clone();
    pruned.head = w.head.clone();
    let a = logits(&w, &[0, 1, 2], 3).unwrap();
    let b = logits(&pruned, &[0, 1, 2], 3).unwrap();
    assert!(max_abs_diff(a.data(), b.data()) < 1e-15);
}

#[test]
fn skipped_layers_keep_parameter_alignment() {
    let spec = ArchSpec::hybrid(8, 0.125, &pipeline_dims()).unwrap();
    let w = ModelWeights::init(&spec, 2).unwrap();
    let mut g = Graph::new();
    let opts = ForwardOptions {
        skip_layers: vec![1, 3],
        ..Default::default()
    };
    let out = forward(&mut g, &w, &[1, 2, 3, 4], 4, &opts).unwrap();
    assert_eq!(out.params.len(), w.named_params().len());

    // skipping a layer equals zeroing its output projection
    let mut zeroed = w.clone();
    zeroed.layers[1].zero_output();
    zeroed.layers[3].zero_output();
    let reference = logits(&zeroed, &[1, 2, 3, 4], 4).unwrap();
    assert!(max_abs_diff(g.value(out.logits).data(), reference.data()) < 1e-12);
}

#[test]
fn param_count_equals_tensor_walk() {
    for spec in [
        ArchSpec::hybrid(13, 0.08, &Dims::default()).unwrap(),
        ArchSpec::transformer(3, &Dims::default()).unwrap(),
    ] {
        let w = ModelWeights::init(&spec, 0).unwrap();
        let walk: usize = w.named_params().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(walk as u64, spec.count_params());
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let dims = Dims::default();
    let bad = |layers: Vec<LayerKind>| ArchSpec::from_layers(layers, &dims, false).and_then(|s| s.check_placement());
    assert!(bad(vec![LayerKind::Ffn, LayerKind::Mamba2, LayerKind::Ffn]).is_err());
    assert!(bad(vec![LayerKind::Mamba2, LayerKind::Ffn, LayerKind::Mamba2]).is_err());
    assert!(bad(vec![LayerKind::Mamba2, LayerKind::Attention, LayerKind::Mamba2, LayerKind::Ffn]).is_err());
    let odd_heads = Dims {
        n_q_heads: 3,
        ..dims
    };
    assert!(ArchSpec::from_layers(vec![LayerKind::Mamba2, LayerKind::Attention, LayerKind::Ffn], &odd_heads, false).is_err());
    // head counts are irrelevant without attention layers
    assert!(ArchSpec::from_layers(vec![LayerKind::Mamba2, LayerKind::Ffn], &odd_heads, false).is_ok());
}

fn check_rules(total: usize, frac: f64, layers: &[LayerKind]) {
    let count = |k| layers.iter().filter(|&&l| l == k).count();
    let n_attn = (frac * total as f64).round() as usize;
    assert_eq!(layers.len(), total);
    assert_eq!(layers[0], LayerKind::Mamba2, "first layer");
    assert_eq!(*layers.last().unwrap(), LayerKind::Ffn, "last layer");
    for (i, l) in layers.iter().enumerate() {
        if *l == LayerKind::Attention {
            assert_eq!(layers[i + 1], LayerKind::Ffn, "attention at {i} precedes FFN");
        }
    }
    let (a, m, f) = (count(LayerKind::Attention), count(LayerKind::Mamba2), count(LayerKind::Ffn));
    assert_eq!(a, n_attn);
    assert!(f == m || f == m + 1, "even split {m}/{f}");
    assert_eq!(a + m + f, total);
}

proptest! {
    #[test]
    fn builder_placement_rules(total in 4usize..=200) {
        let layers = build_layer_pattern(total, 0.08).unwrap();
        check_rules(total, 0.08, &layers);
        let spec = ArchSpec::from_layers(layers, &Dims::default(), false).unwrap();
        prop_assert!(spec.check_placement().is_ok());
    }

    #[test]
    fn builder_rules_for_other_fractions(total in 4usize..=200, frac in 0.0f64..0.3) {
        if let Ok(layers) = build_layer_pattern(total, frac) {
            check_rules(total, frac, &layers);
        } else {
            // only infeasible when there are more attention layers than FFNs to host them
            let n_attn = (frac * total as f64).round() as usize;
            let rest = total - n_attn;
            prop_assert!(n_attn > rest - rest / 2 || rest / 2 == 0);
        }
    }

    #[test]
    fn attention_layers_are_evenly_dispersed(total in 20usize..=200) {
        let layers = build_layer_pattern(total, 0.08).unwrap();
        let ffn_before: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == LayerKind::Attention)
            .map(|(i, _)| layers[..i].iter().filter(|l| **l == LayerKind::Ffn).count())
            .collect();
        let n_ffn = layers.iter().filter(|l| **l == LayerKind::Ffn).count();
        let spacing = n_ffn as f64 / ffn_before.len() as f64;
        for w in ffn_before.windows(2) {
            let gap = (w[1] - w[0]) as f64;
            prop_assert!((gap - spacing).abs() <= 1.0, "gap {} spacing {}", gap, spacing);
        }
    }
}
