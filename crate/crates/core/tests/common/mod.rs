#![allow(dead_code)]

use ilm::corpus::TokenId;
use ilm::model::{init_model, EncoderConfig, InitMode, InvariantModel};
use ilm::tensor::{NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random tensor with entries in `[-scale, scale]`.
pub fn random(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::parameter(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Builds a scalar loss on a fresh tape from leaf nodes.
pub type Build<'a> = dyn Fn(&mut Tape, &[NodeId]) -> NodeId + 'a;

/// Scalar objective `sum(w ⊙ f(inputs))` with fixed random weights, so
/// every output element contributes a distinct gradient.
pub fn weighted(f: impl Fn(&mut Tape, &[NodeId]) -> NodeId, seed: u64) -> impl Fn(&mut Tape, &[NodeId]) -> NodeId {
    move |tape: &mut Tape, ids: &[NodeId]| {
        let out = f(tape, ids);
        let shape = tape.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = tape
            .constant(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .unwrap();
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod).unwrap()
    }
}

/// Largest absolute analytic/numeric gap over the largest magnitude seen,
/// across every input element. Central differences, evaluated in f64 on
/// top of the f32 forward pass.
pub fn gradcheck(inputs: &[Tensor], build: &Build<'_>, h: f32) -> f64 {
    let eval = |xs: &[Tensor]| -> (f64, Vec<Vec<f32>>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids);
        let value = tape.value(loss)[0] as f64;
        let grads = tape.backward(loss).unwrap();
        let g = ids
            .iter()
            .zip(xs)
            .map(|(id, t)| grads.get(*id).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs);
    let mut xs = inputs.to_vec();
    let (mut diff, mut mag) = (0.0f64, 0.0f64);
    for p in 0..xs.len() {
        for i in 0..xs[p].numel() {
            let orig = xs[p].data()[i];
            xs[p].data_mut()[i] = orig + h;
            let up = eval(&xs).0;
            xs[p].data_mut()[i] = orig - h;
            let down = eval(&xs).0;
            xs[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            let a = analytic[p][i] as f64;
            diff = diff.max((a - numeric).abs());
            mag = mag.max(a.abs()).max(numeric.abs());
        }
    }
    assert!(mag > 0.0, "all gradients are zero");
    diff / mag
}

/// Relative gradient error of the full ensemble forward pass plus masked
/// cross-entropy, over every encoder and head parameter.
pub fn model_gradcheck(seed: u64) -> f64 {
    let cfg = EncoderConfig {
        vocab_size: 9,
        embed_dim: 4,
        n_layers: 2,
        n_attn_heads: 2,
        ffn_dim: 6,
        max_seq_len: 4,
        seed,
    };
    let mut model = init_model(&cfg, 2, InitMode::Fresh).unwrap();
    // widen the projections so gradients are not all near zero
    let names: Vec<String> = model.phi().named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(model.phi_params_mut()) {
        if name.contains(".w") || name.ends_with("_emb") {
            t.data_mut().iter_mut().for_each(|v| *v *= 15.0);
        }
    }
    for e in 0..2 {
        for t in model.head_params_mut(e).unwrap() {
            t.data_mut().iter_mut().for_each(|v| *v *= 15.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<TokenId> = (0..8).map(|_| rng.random_range(3..9)).collect();
    let targets: Vec<i64> = ids
        .iter()
        .enumerate()
        .map(|(i, &t)| if i % 3 == 0 { -100 } else { t as i64 })
        .collect();
    let loss = |m: &InvariantModel| -> (f64, Vec<Vec<f32>>) {
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let logits = m.forward_ensemble_on(&mut tape, &b, &ids, 2, 4).unwrap();
        let l = tape.masked_cross_entropy(logits, &targets).unwrap();
        let grads = tape.backward(l).unwrap();
        let nodes: Vec<NodeId> = b
            .phi
            .named()
            .into_iter()
            .map(|(_, id)| *id)
            .chain(b.heads.iter().flat_map(|h| h.named().into_iter().map(|(_, id)| *id)))
            .collect();
        let g = nodes
            .iter()
            .map(|id| grads.get(*id).map(<[f32]>::to_vec).unwrap_or_default())
            .collect();
        (tape.value(l)[0] as f64, g)
    };
    let (_, analytic) = loss(&model);
    let h = 1e-3f32;
    let (mut diff, mut mag) = (0.0f64, 0.0f64);
    let n_tensors = model.all_params_mut().len();
    assert_eq!(n_tensors, analytic.len());
    for p in 0..n_tensors {
        let len = model.all_params_mut()[p].numel();
        for i in 0..len {
            let orig = model.all_params_mut()[p].data()[i];
            model.all_params_mut()[p].data_mut()[i] = orig + h;
            let up = loss(&model).0;
            model.all_params_mut()[p].data_mut()[i] = orig - h;
            let down = loss(&model).0;
            model.all_params_mut()[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            let a = analytic[p].get(i).copied().unwrap_or(0.0) as f64;
            diff = diff.max((a - numeric).abs());
            mag = mag.max(a.abs()).max(numeric.abs());
        }
    }
    diff / mag
}

pub fn recipe(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("recipes").join(name)
}
