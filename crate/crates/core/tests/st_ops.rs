use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stconv::analysis::{count_params, BnParams, CostConvention, MacConvention};
use stconv::arch::{ArchSpec, BatchNormConfig, ConvKind, ConvLayer, HeadLayer, InputGeometry, LayerSpec};
use stconv::ops::{conv3d_forward, maxpool3d_forward, out_extent, sepconv3d_forward, ConvOpts, FilterBank, Padding, PoolOpts, TimeBorder};
use stconv::oracle;
use stconv::{Graph, Tensor};

fn ints(shape: Vec<usize>, lo: i32, hi: i32, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..=hi) as f64)
}

/// Frame `t` of clip `b` as `[H, W, C]`.
fn frame(x: &Tensor<f64>, b: usize, t: usize) -> Tensor<f64> {
    let [_, tt, h, w, c]: [usize; 5] = x.shape().try_into().unwrap();
    let start = (b * tt + t) * h * w * c;
    Tensor::new(vec![h, w, c], x.data()[start..start + h * w * c].to_vec()).unwrap()
}

#[test]
fn pointwise_time_conv_equals_per_frame_2d_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = ints(vec![2, 5, 7, 6, 3], -5, 5, &mut rng);
    let w = ints(vec![1, 3, 3, 3, 4], -3, 3, &mut rng);
    let w2 = w.reshape(vec![3, 3, 3, 4]).unwrap();
    let y = conv3d_forward(&x, &w, None, &ConvOpts::stride([1, 2, 2])).unwrap();
    for b in 0..2 {
        for t in 0..5 {
            assert_eq!(frame(&y, b, t), oracle::conv2d_frame(&frame(&x, b, t), &w2, [2, 2]));
        }
    }
}

#[test]
fn valid_conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let opts = ConvOpts::default().with_padding(Padding::Valid);
    for _ in 0..5 {
        let x = ints(vec![1, 5, 7, 7, 3], -8, 8, &mut rng);
        let w = ints(vec![3, 3, 3, 3, 4], -8, 8, &mut rng);
        let b = ints(vec![4], -8, 8, &mut rng);
        let y = conv3d_forward(&x, &w, Some(&b), &opts).unwrap();
        assert_eq!(y.shape(), &[1, 3, 5, 5, 4]);
        assert_eq!(y, oracle::conv3d(&x, &w, Some(&b), &opts));
    }
}

#[test]
fn sepconv_is_the_composition_of_two_convs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(vec![2, 6, 5, 5, 3], 1.0, &mut rng);
    let ws = Tensor::<f64>::randn(vec![1, 3, 3, 3, 4], 1.0, &mut rng);
    let wt = Tensor::<f64>::randn(vec![3, 1, 1, 4, 4], 1.0, &mut rng);
    let bt = Tensor::<f64>::randn(vec![4], 1.0, &mut rng);
    let so = ConvOpts::stride([1, 2, 2]);
    let to = ConvOpts::stride([2, 1, 1]).with_time_border(TimeBorder::Replicate);
    let spatial = FilterBank::new(ws.clone(), None, so).unwrap();
    let temporal = FilterBank::new(wt.clone(), Some(bt.clone()), to).unwrap();
    let fast = sepconv3d_forward(&x, &spatial, &temporal).unwrap();
    let composed = conv3d_forward(&conv3d_forward(&x, &ws, None, &so).unwrap(), &wt, Some(&bt), &to).unwrap();
    assert_eq!(fast, composed);

    let mut g = Graph::new();
    let v: Vec<_> = [x, ws, wt, bt].into_iter().map(|t| g.constant(t)).collect();
    let y = g.sepconv3d(v[0], v[1], None, &so, v[2], Some(v[3]), &to).unwrap();
    assert_eq!(g.value(y), &composed);
}

#[test]
fn center_delta_temporal_kernel_leaves_the_spatial_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f64>::randn(vec![1, 5, 6, 6, 2], 1.0, &mut rng);
    let ws = Tensor::<f64>::randn(vec![1, 3, 3, 2, 3], 1.0, &mut rng);
    let bs = Tensor::<f64>::randn(vec![3], 1.0, &mut rng);
    let mut wt = Tensor::<f64>::zeros(vec![3, 1, 1, 3, 3]);
    for c in 0..3 {
        let i = wt.offset(&[1, 0, 0, c, c]);
        wt.data_mut()[i] = 1.0;
    }
    for border in [TimeBorder::Zero, TimeBorder::Replicate] {
        let spatial = FilterBank::new(ws.clone(), Some(bs.clone()), ConvOpts::default()).unwrap();
        let temporal = FilterBank::new(wt.clone(), Some(Tensor::zeros(vec![3])), ConvOpts::default().with_time_border(border)).unwrap();
        assert_eq!(sepconv3d_forward(&x, &spatial, &temporal).unwrap(), spatial.apply(&x).unwrap());
    }
}

fn single_conv_spec(kind: ConvKind, c: usize) -> ArchSpec {
    ArchSpec {
        input: InputGeometry::new(4, 8, 8, c),
        classes: 2,
        batch_norm: BatchNormConfig { enabled: false, scale: false },
        temporal_padding: TimeBorder::Replicate,
        layers: vec![LayerSpec::Conv(ConvLayer {
            name: "conv".into(),
            kind,
            out: c,
            kernel: [3, 3, 3],
            stride: [1, 1, 1],
            gated: false,
            surgery: Some(1),
        }), LayerSpec::Head(HeadLayer { name: "head".into(), dropout: 0.0 })],
    }
}

#[test]
fn separable_parameter_count_formula() {
    let conv = CostConvention { mac: MacConvention::One, bn: BnParams::Learnable };
    for c in [1u64, 2, 5, 16, 64] {
        let full = count_params(&single_conv_spec(ConvKind::Conv3d, c as usize), conv).unwrap().row("conv").unwrap().params;
        let sep = count_params(&single_conv_spec(ConvKind::Sep, c as usize), conv).unwrap().row("conv").unwrap().params;
        assert_eq!(full, 27 * c * c + c);
        // C_mid = C: spatial 9·C·C_mid + C_mid, temporal 3·C_mid·C + C.
        assert_eq!(sep, 9 * c * c + c + 3 * c * c + c);
        assert!(sep < full);
    }
}

#[test]
fn maxpool_random_tensors_match_windowed_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (window, stride) in [([2, 2, 2], [2, 2, 2]), ([3, 3, 3], [1, 2, 2]), ([1, 3, 3], [1, 1, 1])] {
        let x = Tensor::<f64>::randn(vec![2, 6, 7, 5, 3], 1.0, &mut rng);
        let opts = PoolOpts::new(window, stride);
        assert_eq!(maxpool3d_forward(&x, &opts).unwrap().0, oracle::maxpool3d(&x, &opts));
    }
}

fn reverse_w(w: &Tensor<f64>) -> Tensor<f64> {
    let kt = w.shape()[0];
    let per = w.len() / kt;
    Tensor::from_fn(w.shape().to_vec(), |i| w.data()[(kt - 1 - i / per) * per + i % per])
}

#[test]
fn asymmetric_temporal_kernel_breaks_reversal_symmetry() {
    // A kernel that looks one frame back, on a ramp: y[t] = x[t-1].
    let x = Tensor::<f64>::from_fn(vec![1, 4, 1, 1, 1], |i| i as f64 + 1.0);
    let w = Tensor::new(vec![3, 1, 1, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
    let opts = ConvOpts::default();
    let a = conv3d_forward(&x.reverse_time().unwrap(), &w, None, &opts).unwrap();
    let b = conv3d_forward(&x, &w, None, &opts).unwrap().reverse_time().unwrap();
    assert_eq!(a.data(), &[0.0, 4.0, 3.0, 2.0]);
    assert_eq!(b.data(), &[3.0, 2.0, 1.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pointwise_time_conv_commutes_with_reversal(
        t in 1usize..6, h in 1usize..6, w in 1usize..6, cin in 1usize..4, cout in 1usize..4,
        k in 1usize..4, sh in 1usize..3, seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(vec![2, t, h, w, cin], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn(vec![1, k, k, cin, cout], 1.0, &mut rng);
        let opts = ConvOpts::stride([1, sh, sh]);
        let a = conv3d_forward(&x.reverse_time().unwrap(), &wt, None, &opts).unwrap();
        let b = conv3d_forward(&x, &wt, None, &opts).unwrap().reverse_time().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn symmetric_temporal_kernel_commutes_with_reversal(
        t in 1usize..7, h in 1usize..5, c in 1usize..3, half in 1usize..3, replicate in any::<bool>(), seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kt = 2 * half + 1;
        let x = ints(vec![1, t, h, h, c], -6, 6, &mut rng);
        let raw = ints(vec![kt, 3, 3, c, c], -4, 4, &mut rng);
        let w = raw.add(&reverse_w(&raw)).unwrap();
        let border = if replicate { TimeBorder::Replicate } else { TimeBorder::Zero };
        let opts = ConvOpts::default().with_time_border(border);
        let a = conv3d_forward(&x.reverse_time().unwrap(), &w, None, &opts).unwrap();
        let b = conv3d_forward(&x, &w, None, &opts).unwrap().reverse_time().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn same_padding_extents_are_ceil(
        dims in prop::array::uniform3(1usize..12), k in prop::array::uniform3(1usize..5), s in prop::array::uniform3(1usize..4),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(vec![1, dims[0], dims[1], dims[2], 1], 1.0, &mut rng);
        let w = Tensor::<f64>::ones(vec![k[0], k[1], k[2], 1, 1]);
        let y = conv3d_forward(&x, &w, None, &ConvOpts::stride(s)).unwrap();
        let p = maxpool3d_forward(&x, &PoolOpts::new(k, s).with_padding(Padding::Same)).unwrap().0;
        for a in 0..3 {
            let want = dims[a].div_ceil(s[a]);
            prop_assert_eq!(y.shape()[a + 1], want);
            prop_assert_eq!(p.shape()[a + 1], want);
            prop_assert_eq!(out_extent(dims[a], k[a], s[a], Padding::Same).unwrap().0, want);
        }
    }

    #[test]
    fn maxpool_gradient_is_a_unit_routing(
        window in prop::array::uniform3(1usize..4), overlap in any::<bool>(), seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stride = if overlap { [1, 1, 1] } else { window };
        let x = ints(vec![2, 6, 6, 6, 2], -3, 3, &mut rng);
        let opts = PoolOpts::new(window, stride);
        let mut g = Graph::new();
        let xv = g.param(x);
        let y = g.maxpool3d(xv, &opts).unwrap();
        let upstream = ints(g.shape(y).to_vec(), 1, 9, &mut rng);
        let u = g.constant(upstream.clone());
        let yu = g.mul(y, u).unwrap();
        let loss = g.sum(yu);
        let grad = g.backward(loss).unwrap().get(xv).unwrap().clone();
        prop_assert_eq!(grad.sum(), upstream.sum());
        if !overlap {
            // Each output routes its whole gradient to exactly one input.
            let hits = grad.data().iter().filter(|&&v| v != 0.0).count();
            prop_assert_eq!(hits, upstream.len());
            let mut routed: Vec<f64> = grad.data().iter().copied().filter(|&v| v != 0.0).collect();
            let mut sent = upstream.data().to_vec();
            routed.sort_by(f64::total_cmp);
            sent.sort_by(f64::total_cmp);
            prop_assert_eq!(routed, sent);
        }
    }
}
