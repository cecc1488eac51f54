use adapterbot::tensor::{Adam, AdamConfig, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000, causal: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], 3.0, &mut rng);
        let mut g = Graph::new();
        let v = g.leaf(x, false);
        let y = if causal { g.causal_softmax(v).unwrap() } else { g.softmax_rows(v).unwrap() };
        let y = g.value(y);
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

fn mlp_step(seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let mut w = Tensor::randn(&[6, 5], 0.3, &mut rng);
    let (loss, grad) = {
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let wv = g.param(&w);
        let h = g.matmul(xv, wv).unwrap();
        let h = g.gelu(h).unwrap();
        let loss = g.cross_entropy(h, &[0, 1, 2, 3]).unwrap();
        g.backward(loss).unwrap();
        (g.value(loss).data().to_vec(), g.grad(wv).unwrap().to_vec())
    };
    let mut opt = Adam::new(AdamConfig::default(), [&w]).unwrap();
    opt.step(&mut [&mut w], &[&grad]).unwrap();
    let mut out = loss;
    out.extend(grad);
    (out, w.into_data())
}

#[test]
fn identical_seeds_are_bit_identical() {
    let (a_vals, a_w) = mlp_step(11);
    let (b_vals, b_w) = mlp_step(11);
    assert_eq!(
        a_vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b_vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        a_w.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b_w.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
