use stconv::analysis::{count_flops, count_params, export_embeddings, reversal_probe, tradeoff_curve, weight_offset_stats, BnParams, CostConvention, CostReport, MacConvention};
use stconv::arch::{ArchSpec, ConvMode, Family, InputGeometry, LayerSpec, Preset, VariantOpts};
use stconv::data::{generate_synthetic, Dataset, DatasetSpec, GeneratorKind};
use stconv::{Error, Network, Tensor};

fn paper(preset: Preset) -> ArchSpec {
    preset.build(&VariantOpts::default()).unwrap()
}

fn flops_at(spec: &ArchSpec, input: InputGeometry, batch: usize) -> CostReport {
    count_flops(spec, input, batch, CostConvention::default()).unwrap()
}

fn body_conv_flops(r: &CostReport) -> u64 {
    r.rows.iter().filter(|row| row.layer_type != "head").map(|row| row.conv_flops).sum()
}

#[test]
fn flops_are_linear_in_batch_and_frames() {
    for preset in [Preset::I3D, Preset::S3D_G, Preset::I2D, Preset::FAST_S3D] {
        let spec = paper(preset);
        let one = flops_at(&spec, InputGeometry::new(64, 224, 224, 3), 1).totals;
        let three = flops_at(&spec, InputGeometry::new(64, 224, 224, 3), 3).totals;
        assert_eq!(three.flops, 3 * one.flops);
        assert_eq!(three.elementwise_flops, 3 * one.elementwise_flops);
        assert_eq!(three.params, one.params);
        // Frame counts divisible by every temporal stride scale exactly,
        // apart from each gate's per-clip matvec (n²), bias (n) and sigmoid (n).
        let t32 = flops_at(&spec, InputGeometry::new(32, 224, 224, 3), 1).totals;
        let t16 = flops_at(&spec, InputGeometry::new(16, 224, 224, 3), 1).totals;
        let per_clip = 2 * t32.flops - one.flops;
        assert_eq!(2 * t16.flops - t32.flops, per_clip, "{preset}");
        let gates: u64 = spec.layers.iter().flat_map(gated_widths).map(|n| n * n + 2 * n).sum();
        assert_eq!(per_clip, gates, "{preset}");
        // Off the stride grid only the pooling floors perturb linearity.
        let t60 = flops_at(&spec, InputGeometry::new(60, 224, 224, 3), 1).totals.flops as f64;
        assert!((t60 / one.flops as f64 - 60.0 / 64.0).abs() < 0.05, "{preset}");
    }
}

#[test]
fn doubling_height_and_width_quadruples_backbone_conv_flops() {
    for preset in [Preset::I3D, Preset::S3D, Preset::I2D] {
        let spec = paper(preset);
        let small = flops_at(&spec, InputGeometry::new(64, 224, 224, 3), 1);
        let large = flops_at(&spec, InputGeometry::new(64, 448, 448, 3), 1);
        assert_eq!(body_conv_flops(&large), 4 * body_conv_flops(&small), "{preset}");
        // The classifier runs after the spatial mean, so the total falls just short of 4x.
        let ratio = large.totals.conv_flops as f64 / small.totals.conv_flops as f64;
        assert!(ratio > 3.99 && ratio <= 4.0, "{preset}: {ratio}");
    }
}

#[test]
fn separable_units_are_cheaper_at_every_backbone_width() {
    let conv = CostConvention::default();
    let (full, sep) = (paper(Preset::I3D), paper(Preset::S3D));
    let (fr, sr) = (count_params(&full, conv).unwrap(), count_params(&sep, conv).unwrap());
    for layer in full.layers.iter().filter(|l| l.surgery().is_some()) {
        let (a, b) = (fr.row(layer.name()).unwrap(), sr.row(layer.name()).unwrap());
        assert!(b.params < a.params, "{}: {} vs {}", layer.name(), b.params, a.params);
        assert!(b.conv_flops < a.conv_flops, "{}", layer.name());
    }
    assert!(sr.totals.params < fr.totals.params);
    assert!(sr.totals.conv_flops < fr.totals.conv_flops);
}

/// Channel widths of every gated temporal conv in a layer.
fn gated_widths(layer: &LayerSpec) -> Vec<u64> {
    match layer {
        LayerSpec::Conv(l) if l.gated => vec![l.out as u64],
        LayerSpec::Inception(l) if l.gated => [l.widths.b0, l.widths.b1, l.widths.b2, l.widths.b3].iter().map(|&w| w as u64).collect(),
        _ => Vec::new(),
    }
}

#[test]
fn gating_adds_n_squared_plus_n_per_gated_unit() {
    for bn in [BnParams::Excluded, BnParams::Learnable, BnParams::WithStatistics] {
        let conv = CostConvention { mac: MacConvention::One, bn };
        let (plain, gated) = (paper(Preset::S3D), paper(Preset::S3D_G));
        let (pr, gr) = (count_params(&plain, conv).unwrap(), count_params(&gated, conv).unwrap());
        let mut expected_total = 0;
        for layer in &gated.layers {
            let extra: u64 = gated_widths(layer).iter().map(|n| n * n + n).sum();
            expected_total += extra;
            assert_eq!(gr.row(layer.name()).unwrap().params - pr.row(layer.name()).unwrap().params, extra, "{}", layer.name());
            assert_eq!(gr.row(layer.name()).unwrap().conv_flops - pr.row(layer.name()).unwrap().conv_flops, gated_widths(layer).iter().map(|n| n * n).sum::<u64>());
        }
        assert_eq!(gr.totals.params - pr.totals.params, expected_total);
        assert!(gr.totals.elementwise_flops > pr.totals.elementwise_flops);
    }
}

#[test]
fn tradeoff_curves_separate_and_serialize() {
    let conv = CostConvention::default();
    for mode in [ConvMode::Full, ConvMode::Separable] {
        let top = tradeoff_curve(Family::TopHeavy, mode, &VariantOpts::default(), conv).unwrap();
        let bottom = tradeoff_curve(Family::BottomHeavy, mode, &VariantOpts::default(), conv).unwrap();
        for p in top.points.iter().filter(|p| p.n_3d > 0 && p.n_3d < stconv::arch::K_TOTAL) {
            assert!(p.flops < bottom.at_n_3d(p.n_3d).unwrap().flops);
        }
        let mut csv = Vec::new();
        top.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("# tradeoff_curve v1"));
        assert_eq!(text.lines().count(), 2 + top.points.len());
    }
}

fn directional(samples: usize, seed: u64) -> Dataset<f32> {
    generate_synthetic(&DatasetSpec::new(GeneratorKind::DirectionalMotion, InputGeometry::mini(), samples, seed)).unwrap()
}

#[test]
fn two_d_networks_ignore_frame_order() {
    let data = directional(8, 1);
    for (seed, preset) in [(1, Preset::I2D), (2, Preset::I2D), (3, Preset::new(Family::TopHeavy, ConvMode::Full, 12, false))] {
        let net = Network::<f32>::new(preset.build(&VariantOpts::mini()).unwrap(), seed).unwrap();
        let r = reversal_probe(&net, &data, 1).unwrap();
        assert!(r.max_logit_delta < 1e-5, "{}", r.max_logit_delta);
        assert_eq!(r.acc_reversed, 1.0 - r.acc_normal);
        assert_eq!(r.clips, 8);
    }
    let net = Network::<f32>::new(Preset::I3D.build(&VariantOpts::mini()).unwrap(), 4).unwrap();
    assert!(reversal_probe(&net, &data, 1).unwrap().max_logit_delta > 1e-5);
}

#[test]
fn offset_stats_cover_every_temporal_unit() {
    let opts = VariantOpts::mini();
    let net = Network::<f32>::new(Preset::I3D.build(&opts).unwrap(), 5).unwrap();
    let stats = weight_offset_stats(&net);
    assert_eq!(stats.layers.len(), net.spec().temporal_units());
    assert_eq!(stats.bottom().unwrap().layer, "Conv1a");
    assert_eq!(stats.top().unwrap().layer, "Mixed5c");
    assert_eq!(stats.bottom().unwrap().offsets.len(), 7);
    let mut csv = Vec::new();
    stats.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("# offset_stats v1"));

    let flat = Network::<f32>::new(Preset::I2D.build(&opts).unwrap(), 5).unwrap();
    let stats = weight_offset_stats(&flat);
    assert!(stats.layers.is_empty());
    assert!(stats.notice.is_some());
}

#[test]
fn embeddings_have_channel_width_and_are_deterministic() {
    let net = Network::<f32>::new(Preset::S3D.build(&VariantOpts::mini()).unwrap(), 6).unwrap();
    let mut data = directional(4, 2);
    // Duplicate clip 0 into slot 3 and make clip 2 constant.
    let per = data.clips.len() / 4;
    let first: Vec<f32> = data.clips.data()[..per].to_vec();
    data.clips.data_mut()[3 * per..].copy_from_slice(&first);
    data.clips.data_mut()[2 * per..3 * per].fill(0.25);
    let emb = export_embeddings(&net, &data, "Mixed5c").unwrap();
    let width = net.spec().geometry().unwrap()[net.spec().layers.iter().position(|l| l.name() == "Mixed5c").unwrap()].output[3];
    assert_eq!(emb.dim(), width);
    assert_eq!(emb.vectors.shape(), &[4, width]);
    let row = |i: usize| emb.vectors.data()[i * width..(i + 1) * width].to_vec();
    assert_eq!(row(0), row(3));
    assert_eq!(emb.labels, data.labels);
    let again = export_embeddings(&net, &data, "Mixed5c").unwrap();
    assert_eq!(again.vectors, emb.vectors);

    let constant = Dataset {
        spec: data.spec.clone(),
        clips: Tensor::full(vec![1, 13, 32, 32, 1], 0.25f32),
        labels: vec![0],
    };
    assert_eq!(export_embeddings(&net, &constant, "Mixed5c").unwrap().vectors.data(), row(2).as_slice());

    match export_embeddings(&net, &data, "Mixed9z") {
        Err(Error::UnknownLayer { valid, .. }) => assert!(valid.iter().any(|v| v == "Max5a")),
        other => panic!("expected an unknown-layer error, got {:?}", other.map(|e| e.layer)),
    }
    let mut csv = Vec::new();
    emb.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("# embeddings v1 layer=Mixed5c"));
    assert_eq!(text.lines().count(), 2 + 4);
}
