use std::sync::Arc;

use plume_tensor::{Graph, ParamId, ParamStore, SpectralBasis, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts the output with fixed random weights to obtain a scalar.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(random_tensor(&mut rng, &shape));
    let m = g.mul(out, w);
    g.sum_all(m)
}

fn check<F>(shapes: &[&[usize]], seed: u64, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), random_tensor(&mut rng, s)))
        .collect();
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = build(&mut g, &vars);
        let root = probe(&mut g, out, seed + 1);
        g.value(root).data()[0]
    };
    let grads = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = build(&mut g, &vars);
        let root = probe(&mut g, out, seed + 1);
        g.backward(root)
    };
    let h = 1e-6;
    for &id in &ids {
        let n = store.get(id).numel();
        for j in 0..n {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&store);
            store.get_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&store);
            store.get_mut(id).data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = grads.get(id).data()[j];
            let err = (num - ana).abs() / (1.0 + num.abs().max(ana.abs()));
            assert!(
                err < 1e-6,
                "param {} elem {j}: numeric {num} analytic {ana}",
                store.name(id)
            );
        }
    }
}

#[test]
fn conv2d_with_bias() {
    check(&[&[2, 3, 5, 4, 1], &[4, 3, 3, 3, 1], &[4]], 1, |g, v| {
        g.conv(v[0], v[1], Some(v[2]))
    });
}

#[test]
fn conv3d_and_pointwise() {
    check(&[&[1, 2, 4, 3, 3], &[3, 2, 3, 3, 3]], 2, |g, v| g.conv(v[0], v[1], None));
    check(&[&[2, 3, 4, 4, 1], &[2, 3, 1, 1, 1]], 3, |g, v| g.conv(v[0], v[1], None));
}

#[test]
fn pool_upsample_concat_slice() {
    check(&[&[2, 2, 4, 6, 1]], 4, |g, v| g.avg_pool(v[0], [2, 2, 1]));
    check(&[&[1, 2, 2, 3, 2]], 5, |g, v| g.upsample(v[0], [2, 2, 1]));
    check(&[&[2, 2, 3, 3, 1], &[2, 1, 3, 3, 1]], 6, |g, v| {
        let c = g.concat(v[0], v[1]);
        g.slice_channels(c, 1, 2)
    });
}

#[test]
fn broadcasting_arithmetic() {
    check(&[&[2, 3, 4], &[1, 3, 1]], 7, |g, v| g.add(v[0], v[1]));
    check(&[&[2, 1, 4], &[1, 3, 4]], 8, |g, v| g.mul(v[0], v[1]));
    check(&[&[3, 4], &[3, 4]], 9, |g, v| {
        let s = g.sub(v[0], v[1]);
        g.scale(s, 0.7)
    });
}

#[test]
fn activations() {
    check(&[&[3, 7]], 10, |g, v| g.gelu(v[0]));
    check(&[&[3, 7]], 11, |g, v| g.sigmoid(v[0]));
    check(&[&[3, 7]], 12, |g, v| g.tanh(v[0]));
    // keep inputs away from the kink
    check(&[&[3, 7]], 13, |g, v| {
        let s = g.scale(v[0], 1.0);
        let t = g.tanh(s);
        let sq = g.mul(t, t);
        let shifted = g.sub(sq, t);
        g.relu(shifted)
    });
}

#[test]
fn normalizations() {
    check(&[&[2, 4, 3, 3, 1], &[4], &[4]], 14, |g, v| g.group_norm(v[0], v[1], v[2], 2));
    check(&[&[2, 3, 2, 2, 2], &[3], &[3]], 15, |g, v| g.group_norm(v[0], v[1], v[2], 3));
    check(&[&[2, 3, 5], &[5], &[5]], 16, |g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn matmul_permute_reshape_softmax() {
    check(&[&[2, 3, 4], &[1, 4, 5]], 17, |g, v| g.matmul(v[0], v[1]));
    check(&[&[1, 3, 4], &[2, 4, 2]], 18, |g, v| g.matmul(v[0], v[1]));
    check(&[&[2, 3, 4]], 19, |g, v| {
        let p = g.permute(v[0], &[2, 0, 1]);
        g.reshape(p, &[4, 6])
    });
    check(&[&[2, 4, 4]], 20, |g, v| g.causal_softmax(v[0]));
}

#[test]
fn reductions_and_batch_ops() {
    check(&[&[2, 3, 2, 2, 1]], 21, |g, v| g.mean_spatial(v[0]));
    check(&[&[2, 3, 2, 2, 1]], 22, |g, v| g.mean_channels(v[0]));
    check(&[&[2, 3, 2]], 23, |g, v| g.repeat_batch(v[0], 3));
    check(&[&[2, 3], &[2, 3], &[2, 3]], 24, |g, v| g.stack_batch(&[v[0], v[1], v[2]]));
}

#[test]
fn spectral_convolution() {
    let basis = Arc::new(SpectralBasis::new([6, 5, 1], [2, 2, 1]));
    let k = basis.mode_counts();
    let ws = [2, 3, k[0], k[1], k[2]];
    check(&[&[2, 2, 6, 5, 1], &ws, &ws], 25, move |g, v| {
        g.spectral_conv(v[0], v[1], v[2], basis.clone())
    });
}

#[test]
fn external_loss_scales_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
    let mut g = Graph::new(&store);
    let x = g.param(id);
    let grad = Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap();
    let l = g.external_loss(x, 9.0, grad.clone());
    assert_eq!(g.value(l).data(), &[9.0]);
    let gr = g.backward(l);
    assert_eq!(gr.get(id), &grad);
}
