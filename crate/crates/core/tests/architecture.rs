use ffpdet_core::backbone::{Backbone, BackboneConfig};
use ffpdet_core::conv::ConvSpec;
use ffpdet_core::detector::{Detector, DetectorConfig};
use ffpdet_core::ffp::{Dfb, Ffp, FfpConfig, LevelModule};
use ffpdet_core::head::{Head, HeadConfig};
use ffpdet_core::init::Initializer;
use ffpdet_core::params::ParamStore;
use ffpdet_core::{Graph, Tensor};

fn delta(size: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[1, 1, size, size]);
    t.data_mut()[(size / 2) * size + size / 2] = 1.0;
    t
}

/// Offsets from the center where a single-channel map is nonzero.
fn support(t: &Tensor<f64>) -> Vec<(i64, i64)> {
    let s = t.shape()[3];
    let c = (s / 2) as i64;
    t.data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| ((i / s) as i64 - c, (i % s) as i64 - c))
        .collect()
}

#[test]
fn dilated_conv_taps() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let x = g.input(delta(7));
    let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let spec = ConvSpec::new(1, 1, 3).dilation(2).padding(2);
    let y = g.conv2d(x, w, None, &spec).unwrap();
    let mut want = Vec::new();
    for dy in [-2, 0, 2] {
        for dx in [-2, 0, 2] {
            want.push((dy, dx));
        }
    }
    assert_eq!(support(g.value(y)), want);
    assert_eq!(ConvSpec::new(256, 256, 3).parameter_count(), 589824);
}

#[test]
fn dilated_cascade_support_radius() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let mut y = g.input(delta(21));
    for r in [1, 2, 5] {
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        y = g.conv2d(y, w, None, &ConvSpec::same(1, 1, 3, r)).unwrap();
    }
    let s = support(g.value(y));
    let radius = s.iter().map(|(a, b)| a.abs().max(b.abs())).max().unwrap();
    assert_eq!(radius, 8);
    // no holes: every offset within the radius is reached
    assert_eq!(s.len(), 17 * 17);
}

#[test]
fn bottleneck_parameter_arithmetic() {
    let mut store = ParamStore::<f32>::new();
    let ffp = Ffp::build(&FfpConfig::default(), [24, 48, 96], &mut store, &Initializer::new(0)).unwrap();
    let LevelModule::Fbm(fbm) = &ffp.levels[0] else {
        panic!("level 3 should host a bottleneck module");
    };
    let branch: usize = fbm.branch.specs().iter().map(|s| s.parameter_count()).sum();
    assert_eq!(branch, 10496);
    assert_eq!(store.count_parameters().under("ffp.l3.fbm"), 10496);
    let ratio = 589824.0 / branch as f64;
    assert!(ratio > 56.0 && ratio < 56.2);
}

fn zero(store: &mut ParamStore<f64>, prefix: &str) {
    for (_, p) in store.iter_mut() {
        if p.name.starts_with(prefix) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn small_ffp() -> FfpConfig {
    FfpConfig {
        channels: 16,
        fea_reduction: 4,
        bottleneck: 4,
        dfb_width: 16,
        ..Default::default()
    }
}

#[test]
fn zeroed_blocks() {
    let cfg = small_ffp();
    let mut store = ParamStore::<f64>::new();
    let ffp = Ffp::build(&cfg, [8, 8, 8], &mut store, &Initializer::new(1)).unwrap();
    zero(&mut store, "ffp.l3.fbm");
    zero(&mut store, "ffp.l5.dfb");
    let x = Tensor::from_fn(&[1, 16, 4, 4], |i| (i as f64 * 0.37).sin());
    let mut g = Graph::new(&store, false);
    let v = g.input(x.clone());
    let fbm = ffp.levels[0].forward(&mut g, v).unwrap();
    assert_eq!(g.value(fbm.out), &x);
    let dfb = ffp.levels[2].forward(&mut g, v).unwrap();
    assert!(g.value(dfb.out).data().iter().all(|v| *v == 0.0));
}

#[test]
fn single_rate_dilated_block_is_dense() {
    let cfg = FfpConfig {
        dfb_rates: vec![1],
        ..small_ffp()
    };
    let mut store = ParamStore::<f64>::new();
    let dfb = Dfb::build(&mut store, &Initializer::new(2), "d", &cfg).unwrap();
    assert_eq!(dfb.dilated.len(), 1);
    assert_eq!(dfb.dilated[0].spec, ConvSpec::new(16, 16, 3).padding(1));
}

#[test]
fn attention_scales_each_channel_by_a_gate_in_unit_interval() {
    let cfg = small_ffp();
    let mut store = ParamStore::<f64>::new();
    let ffp = Ffp::build(&cfg, [8, 8, 8], &mut store, &Initializer::new(3)).unwrap();
    let x = Tensor::from_fn(&[2, 8, 4, 4], |i| (i as f64 * 0.71).cos());
    let mut g = Graph::new(&store, false);
    let v = g.input(x);
    let f = ffp.fea[0].forward(&mut g, v).unwrap();
    let (p, o) = (g.value(f.projected).data(), g.value(f.out).data());
    for plane in 0..2 * 16 {
        let range = plane * 16..(plane + 1) * 16;
        let (pp, oo) = (&p[range.clone()], &o[range]);
        let k = pp.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        let s = oo[k] / pp[k];
        assert!(s > 0.0 && s < 1.0, "gate {s}");
        for (a, b) in pp.iter().zip(oo) {
            assert!((a * s - b).abs() < 1e-12);
        }
    }
}

#[test]
fn top_down_path_reaches_lower_levels_only() {
    let cfg = small_ffp();
    let mut store = ParamStore::<f64>::new();
    let ffp = Ffp::build(&cfg, [8, 8, 8], &mut store, &Initializer::new(4)).unwrap();
    let c = |seed: f64, hw: usize| Tensor::from_fn(&[1, 8, hw, hw], move |i| (i as f64 * seed).sin());
    let run = |c3: Tensor<f64>, c5: Tensor<f64>| {
        let mut g = Graph::new(&store, false);
        let v = [g.input(c3), g.input(c(0.5, 4)), g.input(c5)];
        let out = ffp.forward(&mut g, v).unwrap();
        out.p.map(|p| g.value(p).clone())
    };
    let base = run(c(0.3, 8), c(0.9, 2));
    let c5_changed = run(c(0.3, 8), c(1.3, 2));
    let c3_changed = run(c(0.7, 8), c(0.9, 2));
    assert_ne!(base[0], c5_changed[0]);
    assert_ne!(base[1], c5_changed[1]);
    assert_eq!(base[1], c3_changed[1]);
    assert_eq!(base[2], c3_changed[2]);
    assert_eq!(base[0].shape(), &[1, 16, 8, 8]);
}

#[test]
fn calibrated_class_bias_gives_prior_probability() {
    let cfg = HeadConfig {
        tower_channels: 8,
        tower_depth: 2,
        ..Default::default()
    };
    let mut store = ParamStore::<f64>::new();
    let head = Head::build(&cfg, 16, &mut store, &Initializer::new(5)).unwrap();
    zero(&mut store, "head.cls_tower");
    let p = [8, 4, 2].map(|hw| Tensor::from_fn(&[1, 16, hw, hw], |i| (i as f64).sin()));
    let mut g = Graph::new(&store, false);
    let v = p.map(|t| g.input(t));
    let out = head.forward(&mut g, v).unwrap();
    let grid = out.grid(&g).unwrap();
    assert_eq!(grid.num_locations(), 84);
    for loc in grid.locations() {
        for class in 0..2 {
            assert!((grid.score(0, loc, class) - 0.01).abs() < 1e-12);
        }
    }
}

#[test]
fn backbone_strides() {
    let cfg = BackboneConfig::desk();
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::build(&cfg, &mut store, &Initializer::new(6)).unwrap();
    // training mode: a fresh model has no running statistics yet
    let shapes = |h: usize, w: usize| {
        let mut g = Graph::new(&store, true);
        let x = g.input(Tensor::zeros(&[1, 3, h, w]));
        bb.forward(&mut g, x).map(|o| [o.c3, o.c4, o.c5].map(|v| g.shape(v)[2..].to_vec()))
    };
    assert_eq!(shapes(64, 64).unwrap(), [vec![8, 8], vec![4, 4], vec![2, 2]]);
    assert_eq!(shapes(704, 512).unwrap()[0], vec![88, 64]);
    let err = shapes(63, 64).unwrap_err().to_string();
    assert!(err.contains("divisible by 32"), "{err}");
}

#[test]
fn construction_is_deterministic() {
    let a: Detector<f32> = Detector::build(DetectorConfig::default(), 42).unwrap();
    let b: Detector<f32> = Detector::build(DetectorConfig::default(), 42).unwrap();
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.tensor, q.tensor);
    }
}
