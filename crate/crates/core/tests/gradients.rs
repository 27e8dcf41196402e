use hybridlm::autodiff::{finite_difference_gradient, max_relative_error, Graph, ScanMode, Var};
use hybridlm::kernels::SsdDims;
use hybridlm::model::{forward, ArchSpec, Dims, ForwardOptions, LayerKind, ModelWeights};
use hybridlm::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Checks every input's gradient of `sum(build(inputs) ⊙ R)` against
/// central differences, for a fixed random weighting `R`.
fn check<F>(seed: u64, inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let weight = uniform(&mut rng, &out_shape, -1.0, 1.0);
    let loss_of = |ins: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let w = g.constant(weight.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod)?;
        Ok((g, vars, loss))
    };
    let (g, vars, loss) = loss_of(&inputs).unwrap();
    let grads = g.backward(loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        let numeric = finite_difference_gradient(
            |x| {
                let mut ins = inputs.clone();
                ins[i] = x.clone();
                let (g, _, loss) = loss_of(&ins)?;
                Ok(g.value(loss).item())
            },
            &inputs[i],
            H,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < TOL, "input {i}: rel err {err}");
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = uniform(&mut rng, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut rng, &[3, 4], -2.0, 2.0);
    let row = uniform(&mut rng, &[4], -2.0, 2.0);
    check(10, vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(11, vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(12, vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(13, vec![a.clone(), row], |g, v| g.add_row(v[0], v[1]));
    check(14, vec![a.clone()], |g, v| g.scale(v[0], -1.5));
    check(15, vec![a.clone()], |g, v| g.exp(v[0]));
    check(16, vec![a.clone()], |g, v| g.silu(v[0]));
    check(17, vec![a.clone()], |g, v| g.softplus(v[0]));
    check(18, vec![a], |g, v| g.softmax(v[0]));
}

#[test]
fn squared_relu_away_from_kink() {
    // keep inputs off the non-differentiable point at zero
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut a = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    for v in a.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.3;
        }
    }
    check(20, vec![a], |g, v| g.squared_relu(v[0]));
}

#[test]
fn linear_algebra_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = uniform(&mut rng, &[3, 5], -2.0, 2.0);
    let b = uniform(&mut rng, &[5, 2], -2.0, 2.0);
    let w = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    check(30, vec![a.clone(), b], |g, v| g.matmul(v[0], v[1]));
    check(31, vec![a.clone(), w], |g, v| g.linear(v[0], v[1]));
    check(32, vec![a], |g, v| g.slice_cols(v[0], 1, 3));
}

#[test]
fn normalization_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(&mut rng, &[3, 6], -2.0, 2.0);
    let gain = uniform(&mut rng, &[6], 0.5, 1.5);
    check(40, vec![x.clone(), gain], |g, v| g.rmsnorm(v[0], v[1], 1e-6));
    check(41, vec![x.clone()], |g, v| g.mean(v[0]));
    check(42, vec![x], |g, v| g.sum(v[0]));
}

#[test]
fn embedding_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = uniform(&mut rng, &[7, 3], -2.0, 2.0);
    check(50, vec![table], |g, v| g.embedding(v[0], &[3, 0, 3, 6, 1]));
}

#[test]
fn loss_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = uniform(&mut rng, &[4, 5], -2.0, 2.0);
    check(60, vec![logits.clone()], |g, v| g.cross_entropy(v[0], &[1, 4, 0, 2]));
    let mut teacher = uniform(&mut rng, &[4, 5], -2.0, 2.0).into_data();
    hybridlm::kernels::softmax_rows(&mut teacher, 5);
    check(61, vec![logits.clone()], |g, v| g.kl_divergence(v[0], &teacher, 1.0));
    check(62, vec![logits], |g, v| g.kl_divergence(v[0], &teacher, 2.0));
}

#[test]
fn causal_conv_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform(&mut rng, &[10, 3], -2.0, 2.0);
    let w = uniform(&mut rng, &[3, 4], -2.0, 2.0);
    check(70, vec![x, w], |g, v| g.causal_conv(v[0], v[1], 5));
}

#[test]
fn attention_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (rows, hq, hkv, dh) = (10, 4, 2, 3);
    let q = uniform(&mut rng, &[rows, hq * dh], -2.0, 2.0);
    let k = uniform(&mut rng, &[rows, hkv * dh], -2.0, 2.0);
    let v = uniform(&mut rng, &[rows, hkv * dh], -2.0, 2.0);
    check(80, vec![q, k, v], |g, v| g.attention(v[0], v[1], v[2], 5, hq, hkv));
}

#[test]
fn rope_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = uniform(&mut rng, &[6, 8], -2.0, 2.0);
    check(90, vec![x], |g, v| g.rope(v[0], 3, 2));
}

fn scan_check(mode: ScanMode, seq: usize, batch: usize, seed: u64) {
    let dims = SsdDims {
        heads: 4,
        head_dim: 2,
        groups: 2,
        d_state: 3,
    };
    let rows = seq * batch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        uniform(&mut rng, &[rows, dims.inner()], -2.0, 2.0),
        uniform(&mut rng, &[rows, dims.heads], -2.0, 2.0),
        uniform(&mut rng, &[dims.heads], -1.0, 1.0),
        uniform(&mut rng, &[rows, dims.bc_width()], -2.0, 2.0),
        uniform(&mut rng, &[rows, dims.bc_width()], -2.0, 2.0),
        uniform(&mut rng, &[dims.inner()], -2.0, 2.0),
    ];
    check(seed + 1, inputs, move |g, v| {
        // raw dt goes through softplus so that Δ stays positive under perturbation
        let dt = g.softplus(v[1])?;
        g.scan(v[0], dt, v[2], v[3], v[4], v[5], dims, seq, mode)
    });
}

#[test]
fn scan_sequential_gradients() {
    scan_check(ScanMode::Sequential, 9, 2, 100);
    // longer than one checkpoint block
    scan_check(ScanMode::Sequential, 37, 1, 110);
}

#[test]
fn scan_chunked_gradients() {
    scan_check(ScanMode::Chunked(4), 10, 2, 120);
    scan_check(ScanMode::Chunked(1), 5, 1, 130);
    scan_check(ScanMode::Chunked(16), 7, 1, 140);
}

#[test]
fn sum_and_square_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).data(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 3]));
    let loss = g.sum(x).unwrap();
    assert!(g.backward(loss).unwrap().get(x).data().iter().all(|&v| v == 1.0));
}

#[test]
fn unreached_leaves_get_zero_gradients() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let unused = g.param(Tensor::zeros(&[3]));
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(unused).shape(), &[3]);
    assert!(grads.get(unused).data().iter().all(|&v| v == 0.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(g.backward(x).is_err());
}

#[test]
fn finite_difference_oracle_examples() {
    let ones = finite_difference_gradient(|x| Ok(x.data().iter().sum()), &Tensor::zeros(&[2, 2]), 1e-4).unwrap();
    assert!(ones.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    let d = finite_difference_gradient(|x| Ok(x.item() * x.item()), &Tensor::scalar(3.0), 1e-4).unwrap();
    assert!((d.item() - 6.0).abs() < 1e-6);
    assert!(finite_difference_gradient(|x| Ok(x.item()), &Tensor::scalar(0.0), 0.0).is_err());
    assert!(finite_difference_gradient(|_| Ok(f64::NAN), &Tensor::scalar(0.0), 1e-4).is_err());
}

fn tiny_dims() -> Dims {
    Dims {
        d_model: 8,
        d_ffn: 12,
        n_q_heads: 2,
        n_kv_heads: 1,
        d_state: 3,
        n_groups: 1,
        mamba_head_dim: 4,
        mamba_expand: 2,
        conv_window: 3,
        vocab_size: 11,
    }
}

fn model_loss(weights: &ModelWeights, tokens: &[u32], targets: &[u32], seq: usize, mode: ScanMode) -> Result<f64> {
    let mut g = Graph::new();
    let opts = ForwardOptions {
        scan_mode: mode,
        ..Default::default()
    };
    let out = forward(&mut g, weights, tokens, seq, &opts)?;
    let loss = g.cross_entropy(out.logits, targets)?;
    Ok(g.value(loss).item())
}

/// End-to-end check: every parameter tensor of a six-layer hybrid against
/// finite differences of the cross-entropy loss.
fn full_stack_check(spec: &ArchSpec, mode: ScanMode) {
    let mut weights = ModelWeights::init(spec, 3).unwrap();
    // larger weights than the default init so every branch matters
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in weights.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let (seq, batch) = (6, 2);
    let tokens: Vec<u32> = (0..seq * batch).map(|_| rng.random_range(0..11)).collect();
    let targets: Vec<u32> = (0..seq * batch).map(|_| rng.random_range(0..11)).collect();

    let mut g = Graph::new();
    let out = forward(&mut g, &weights, &tokens, seq, &ForwardOptions { scan_mode: mode, ..ForwardOptions::training(None) }).unwrap();
    let loss = g.cross_entropy(out.logits, &targets).unwrap();
    let grads = g.backward(loss).unwrap();

    let names: Vec<String> = weights.named_params().into_iter().map(|(n, _)| n).collect();
    for (idx, name) in names.iter().enumerate() {
        let analytic = grads.get(out.params[idx]);
        let base = weights.params_mut()[idx].clone();
        let numeric = finite_difference_gradient(
            |x| {
                let mut w = weights.clone();
                *w.params_mut()[idx] = x.clone();
                model_loss(&w, &tokens, &targets, seq, mode)
            },
            &base,
            H,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < TOL, "{name}: rel err {err}\n{:?}\n{:?}", analytic.data(), numeric.data());
    }
}

#[test]
fn six_layer_hybrid_matches_finite_differences() {
    let spec = ArchSpec::hybrid(6, 0.17, &tiny_dims()).unwrap();
    assert_eq!(spec.pattern(), "MFMAFF");
    for kind in [LayerKind::Mamba2, LayerKind::Attention, LayerKind::Ffn] {
        assert!(spec.count(kind) >= 1);
    }
    full_stack_check(&spec, ScanMode::Chunked(4));
}

#[test]
fn transformer_baseline_with_rope_matches_finite_differences() {
    let spec = ArchSpec::transformer(2, &tiny_dims()).unwrap();
    full_stack_check(&spec, ScanMode::Sequential);
}
