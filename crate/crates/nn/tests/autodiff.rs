use gansfer_nn::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// ||d/dx sum(lrelu(conv(x, w))^2)||^2, the shape of a gradient penalty.
fn penalty(g: &mut Graph<f64>, x: &Tensor<f64>, w: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let y = g.conv2d(xv, wv, 1);
    let a = g.leaky_relu(y, 0.2);
    let s = g.square(a);
    let out = g.sum(s);
    let gx = g.grad(out, &[xv])[0];
    let sq = g.square(gx);
    let pen = g.sum(sq);
    let gw = g.grad(pen, &[wv])[0];
    (g.value(pen).data()[0], g.value(gw).clone())
}

fn tensor(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, vals.iter().cycle().take(n).copied().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn second_order_gradient_matches_finite_differences(
        xs in prop::collection::vec(-1.0f64..1.0, 32),
        ws in prop::collection::vec(-1.0f64..1.0, 18),
    ) {
        let x = tensor(&[1, 2, 4, 4], &xs);
        let w = tensor(&[1, 2, 3, 3], &ws);
        let (_, analytic) = penalty(&mut Graph::new(), &x, &w);
        let h = 1e-6;
        for i in 0..w.numel() {
            let mut p = w.clone();
            p.data_mut()[i] += h;
            let mut m = w.clone();
            m.data_mut()[i] -= h;
            let num = (penalty(&mut Graph::new(), &x, &p).0 - penalty(&mut Graph::new(), &x, &m).0) / (2.0 * h);
            let a = analytic.data()[i];
            let scale = a.abs().max(num.abs()).max(1e-2);
            prop_assert!((a - num).abs() / scale < 1e-3 || (a - num).abs() < 1e-4, "{} vs {}", a, num);
        }
    }
}

#[test]
fn frozen_groups_survive_adam_steps_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let a = store.add_normal("a.w", "block0", &[4, 4], &mut rng);
    let b = store.add_normal("b.w", "block1", &[4, 4], &mut rng);
    store.set_group_trainable("block1", false);
    let before = store.snapshot();
    let mut opt = Adam::new(AdamConfig::default());
    for _ in 0..10 {
        let grads = vec![(a, Tensor::full(&[4, 4], 0.5f32)), (b, Tensor::full(&[4, 4], 0.5f32))];
        opt.step(&mut store, &grads);
    }
    let after = store.snapshot();
    assert!(before.group_bits_equal(&after, "block1"));
    assert!(!before.group_bits_equal(&after, "block0"));
    assert_eq!(opt.steps(a), 10);
    assert_eq!(opt.steps(b), 0);
    store.set_group_trainable("block1", true);
    opt.step(&mut store, &[(b, Tensor::full(&[4, 4], 0.5f32))]);
    assert_eq!(opt.steps(b), 1);
    assert!(!after.group_bits_equal(&store.snapshot(), "block1"));
}
