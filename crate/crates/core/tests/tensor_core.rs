use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stconv::checkpoint;
use stconv::gradcheck::{check_gradients, GradCheckOpts};
use stconv::oracle;
use stconv::{Graph, Tensor};

fn ints(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-9..=9) as f64)
}

fn shape_strategy(max_rank: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..=max_rank)
}

/// A shape broadcastable to `shape`: some axes collapsed to 1, some leading
/// axes dropped.
fn broadcast_partner(shape: Vec<usize>) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    let n = shape.len();
    (prop::collection::vec(any::<bool>(), n), 0..n).prop_map(move |(ones, drop)| {
        let partner: Vec<usize> = shape.iter().zip(&ones).map(|(&d, &one)| if one { 1 } else { d }).skip(drop).collect();
        let partner = if partner.is_empty() { vec![1] } else { partner };
        (shape.clone(), partner)
    })
}

#[test]
fn grad_of_sum_of_products_is_the_other_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(vec![3, 5], 1.0, &mut rng);
    let mut g = Graph::new();
    let (av, bv) = (g.param(a.clone()), g.constant(b.clone()));
    let p = g.mul(av, bv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(av).unwrap(), &b);
    let r = check_gradients(&[a, b], GradCheckOpts::default(), |g, v| {
        let p = g.mul(v[0], v[1])?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(r.max_rel_err() < 1e-6, "{:?}", r.rel_err);
}

#[test]
fn matvec_matches_triple_loop_on_random_eight_by_eight() {
    for seed in 0..10 {
        let w = ints(vec![8, 8], seed);
        let x = ints(vec![8], seed + 100);
        let b = ints(vec![8], seed + 200);
        let mut g = Graph::new();
        let (wv, xv, bv) = (g.constant(w.clone()), g.constant(x.clone()), g.constant(b.clone()));
        let y = g.matvec(wv, xv, Some(bv)).unwrap();
        assert_eq!(g.value(y).data(), oracle::matvec(&w, x.data(), Some(b.data())).as_slice());

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, x) = (Tensor::<f64>::randn(vec![8, 8], 1.0, &mut rng), Tensor::<f64>::randn(vec![8], 1.0, &mut rng));
        let mut g = Graph::new();
        let (wv, xv) = (g.constant(w.clone()), g.constant(x.clone()));
        let y = g.matvec(wv, xv, None).unwrap();
        assert_eq!(g.value(y).data(), oracle::matvec(&w, x.data(), None).as_slice());
    }
}

#[test]
fn matvec_dimension_mismatch_is_an_error() {
    let mut g = Graph::<f64>::new();
    let w = g.constant(Tensor::zeros(vec![3, 3]));
    let x = g.constant(Tensor::zeros(vec![4]));
    assert!(g.matvec(w, x, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn element_count_is_the_shape_product(shape in shape_strategy(5)) {
        let t = Tensor::<f32>::zeros(shape.clone());
        prop_assert_eq!(t.len(), shape.iter().product::<usize>());
        prop_assert!(Tensor::<f32>::new(shape.clone(), vec![0.0; t.len() + 1]).is_err());
    }

    #[test]
    fn broadcast_gradients_keep_shape_and_mass((big, small) in shape_strategy(4).prop_flat_map(broadcast_partner), seed in 0u64..1000) {
        let a = ints(big.clone(), seed);
        let b = ints(small.clone(), seed + 1);
        let mut g = Graph::new();
        let (av, bv) = (g.param(a), g.param(b));
        let y = g.add(av, bv).unwrap();
        let upstream = ints(g.shape(y).to_vec(), seed + 2);
        let u = g.constant(upstream.clone());
        let yu = g.mul(y, u).unwrap();
        let loss = g.sum(yu);
        let grads = g.backward(loss).unwrap();
        let (ga, gb) = (grads.get(av).unwrap(), grads.get(bv).unwrap());
        prop_assert_eq!(ga.shape(), big.as_slice());
        prop_assert_eq!(gb.shape(), small.as_slice());
        prop_assert_eq!(gb.sum(), upstream.sum());
        prop_assert_eq!(ga.sum(), upstream.sum());
    }

    #[test]
    fn seeded_forward_backward_is_bit_identical(shape in shape_strategy(3), seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.param(x);
            let s = g.sigmoid(xv);
            let p = g.mul(s, xv).unwrap();
            let d = g.dropout(p, 0.3, &mut rng).unwrap();
            let loss = g.mean(d);
            let grads = g.backward(loss).unwrap();
            (g.value(loss).item().to_bits(), grads.get(xv).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn fan_out_gradients_add(shape in shape_strategy(3), seed in 0u64..1000, uses in 1usize..5) {
        let x = ints(shape, seed);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let mut acc = xv;
        for _ in 1..uses {
            acc = g.add(acc, xv).unwrap();
        }
        let loss = g.sum(acc);
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.get(xv).unwrap().data().iter().all(|&v| v == uses as f64));
    }

    #[test]
    fn checkpoint_round_trip_is_lossless(shapes in prop::collection::vec(shape_strategy(4), 1..4), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f64s: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s.clone(), 1.0, &mut rng)).collect();
        let names: Vec<String> = (0..f64s.len()).map(|i| format!("t{i}")).collect();
        let bytes = checkpoint::encode(Default::default(), names.iter().zip(&f64s).map(|(n, t)| ("param", n.as_str(), t))).unwrap();
        let back = checkpoint::decode::<f64>(&bytes).unwrap();
        for ((name, _, t), (want_name, want)) in back.tensors.iter().zip(names.iter().zip(&f64s)) {
            prop_assert_eq!(name, want_name);
            prop_assert_eq!(t, want);
        }
        let f32s: Vec<Tensor<f32>> = f64s.iter().map(Tensor::cast).collect();
        let bytes = checkpoint::encode(Default::default(), names.iter().zip(&f32s).map(|(n, t)| ("param", n.as_str(), t))).unwrap();
        let back = checkpoint::decode::<f32>(&bytes).unwrap();
        prop_assert!(back.tensors.iter().zip(&f32s).all(|((_, _, t), want)| t == want));
    }
}
