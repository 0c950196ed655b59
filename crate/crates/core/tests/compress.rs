use ids_core::compress::{
    filter_importance, lowest_filters, profile, prune_filters, reduction_pct, PruneConfig,
};
use ids_core::model::Model;
use ids_tensor::{DType, GraphSpec, Layer, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
    Layer::Conv1d {
        name: name.into(),
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
    }
}

fn linear(name: &str, i: usize, o: usize) -> Layer {
    Layer::Linear {
        name: name.into(),
        in_features: i,
        out_features: o,
    }
}

#[test]
fn profile_hand_counts() {
    // conv 1->1 k3 on length 7: L_out 5, 1·5·1·3 MACs, weights 3 + bias 1
    let a = GraphSpec {
        layers: vec![conv("c", 1, 1, 3, 1, 0)],
    };
    let p = profile(&a, &[1, 7]).unwrap();
    assert_eq!((p.macs, p.flops, p.parameter_count), (15, 30, 4));

    let b = GraphSpec {
        layers: vec![linear("fc", 4, 3)],
    };
    let p = profile(&b, &[4]).unwrap();
    assert_eq!((p.macs, p.flops, p.parameter_count), (12, 24, 15));

    // conv 2->4 k3 s2 p1 on length 8: L_out (8 + 2 - 3)/2 + 1 = 4,
    // 4·4·2·3 = 96 MACs; flatten 16 -> linear 16·5 = 80
    let c = GraphSpec {
        layers: vec![
            conv("c", 2, 4, 3, 2, 1),
            Layer::Relu,
            Layer::Flatten,
            linear("fc", 16, 5),
            Layer::Softmax,
        ],
    };
    let p = profile(&c, &[2, 8]).unwrap();
    assert_eq!(p.macs, 96 + 80);
    assert_eq!(p.flops, 2 * 176);
    assert_eq!(p.parameter_count, (4 * 2 * 3 + 4) + (16 * 5 + 5));
    assert_eq!(p.layers.iter().map(|l| l.macs).collect::<Vec<_>>(), vec![96, 0, 0, 80, 0]);

    // LSTM in 3, hidden 2 over 5 steps: 4·(3·2 + 2·2)·5 = 200 per direction
    for (bi, macs) in [(false, 200), (true, 400)] {
        let d = GraphSpec {
            layers: vec![Layer::Lstm {
                name: "l".into(),
                input_size: 3,
                hidden_size: 2,
                bidirectional: bi,
            }],
        };
        assert_eq!(profile(&d, &[3, 5]).unwrap().macs, macs);
    }
}

#[test]
fn reduction_percentages() {
    assert_eq!(reduction_pct(200.0, 50.0), 75.0);
    assert_eq!(reduction_pct(10.0, 10.0), 0.0);
}

#[test]
fn importance_examples() {
    let w = Tensor::from_f64(vec![2, 1, 2], vec![1.0, -2.0, 0.5, 0.5]).unwrap();
    assert_eq!(filter_importance(&w), vec![3.0, 1.0]);
    let z = Tensor::from_f64(vec![3, 1, 1], vec![0.2, 0.0, 0.1]).unwrap();
    assert_eq!(lowest_filters(&filter_importance(&z), 1), vec![1]);
}

proptest! {
    #[test]
    fn positive_rescaling_keeps_the_ranking(
        values in prop::collection::vec(-5.0f64..5.0, 24),
        k in 0.01f64..100.0,
        count in 0usize..6,
    ) {
        let w = Tensor::from_f64(vec![6, 2, 2], values.clone()).unwrap();
        let scaled = Tensor::from_f64(vec![6, 2, 2], values.iter().map(|v| v * k).collect()).unwrap();
        let a = filter_importance(&w);
        let b = filter_importance(&scaled);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((y - k * x).abs() <= 1e-9 * (1.0 + k * x));
        }
        prop_assert_eq!(lowest_filters(&a, count), lowest_filters(&b, count));
    }
}

/// Two convs feeding either a flattened linear head or an LSTM head.
fn random_graph(rng: &mut ChaCha8Rng) -> (GraphSpec, [usize; 2]) {
    let c0 = rng.random_range(1..4);
    let f1 = rng.random_range(2..12);
    let f2 = rng.random_range(2..12);
    let k1 = rng.random_range(1..4);
    let k2 = rng.random_range(1..4);
    let len = rng.random_range(8..14);
    let mut layers = vec![
        conv("c1", c0, f1, k1, 1, k1 / 2),
        Layer::Relu,
        conv("c2", f1, f2, k2, 1, 0),
        Layer::Relu,
    ];
    let g0 = GraphSpec {
        layers: layers.clone(),
    };
    let l2 = g0.output_shape(&[c0, len]).unwrap()[1];
    if rng.random_bool(0.5) {
        layers.extend([Layer::Flatten, linear("fc", f2 * l2, 3)]);
    } else {
        layers.extend([
            Layer::Lstm {
                name: "lstm".into(),
                input_size: f2,
                hidden_size: 4,
                bidirectional: rng.random_bool(0.5),
            },
        ]);
        let w = GraphSpec {
            layers: layers.clone(),
        }
        .output_shape(&[c0, len])
        .unwrap()[0];
        layers.push(linear("fc", w, 3));
    }
    (GraphSpec { layers }, [c0, len])
}

fn zero_filters(model: &mut Model, layer: &str, filters: &[usize]) {
    for suffix in ["weight", "bias"] {
        let name = format!("{layer}.{suffix}");
        let t = model.params.require(&name).unwrap().clone();
        let per = t.numel() / t.shape()[0];
        let mut v = t.to_f64_vec();
        for &f in filters {
            v[f * per..(f + 1) * per].iter_mut().for_each(|x| *x = 0.0);
        }
        model
            .params
            .insert(name, Tensor::from_f64(t.shape().to_vec(), v).unwrap());
    }
}

#[test]
fn dead_filter_pruning_over_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..20 {
        let (graph, input) = random_graph(&mut rng);
        let ratio = rng.random_range(0.0..0.9);
        let cfg = PruneConfig {
            ratio,
            ..Default::default()
        };
        let mut model = Model::init(graph.clone(), DType::F64, trial).unwrap();
        let mut dead = std::collections::BTreeMap::new();
        for layer in &graph.layers {
            if let Layer::Conv1d { name, out_ch, .. } = layer {
                let n = cfg.removed_count(*out_ch);
                let mut idx: Vec<usize> = (0..*out_ch).collect();
                for i in 0..n {
                    let j = rng.random_range(i..*out_ch);
                    idx.swap(i, j);
                }
                let mut chosen = idx[..n].to_vec();
                chosen.sort_unstable();
                zero_filters(&mut model, name, &chosen);
                if !chosen.is_empty() {
                    dead.insert(name.clone(), chosen);
                }
            }
        }
        let out = prune_filters(&model, &cfg, &input).unwrap();
        assert_eq!(out.removed, dead, "trial {trial}");
        for layer in &out.model.graph.layers {
            if let Layer::Conv1d { name, out_ch, .. } = layer {
                let before = graph.find(name).unwrap();
                let Layer::Conv1d { out_ch: f, .. } = &graph.layers[before] else {
                    unreachable!()
                };
                assert_eq!(*out_ch, f - cfg.removed_count(*f));
            }
        }
        // surviving tensor names are unchanged
        assert!(out.model.params.names().eq(model.params.names()));
        let x = Tensor::from_f64(
            [vec![5], input.to_vec()].concat(),
            (0..5 * input[0] * input[1]).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let a = model.forward(&x).unwrap().to_f64_vec();
        let b = out.model.forward(&x).unwrap().to_f64_vec();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "trial {trial}"
        );
    }
}

#[test]
fn zero_ratio_is_identity_and_full_ratio_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (graph, input) = random_graph(&mut rng);
    let model = Model::init(graph, DType::F64, 3).unwrap();
    let out = prune_filters(&model, &PruneConfig { ratio: 0.0, ..Default::default() }, &input).unwrap();
    assert_eq!(out.model, model);
    assert!(prune_filters(&model, &PruneConfig { ratio: 1.0, ..Default::default() }, &input).is_err());
}

#[test]
fn canonical_classifier_loses_forty_percent_of_filters() {
    let cfg = ids_core::stage2::Stage2Config::default();
    let model = ids_core::stage2::build_classifier(&cfg, DType::F32).unwrap();
    let out = prune_filters(&model, &PruneConfig::default(), &[8, 20]).unwrap();
    assert_eq!(out.removed["conv1"].len(), 12);
    assert_eq!(out.removed["conv2"].len(), 25);
    let x = Tensor::from_f32(vec![2, 8, 20], vec![0.1; 320]).unwrap();
    assert_eq!(out.model.forward(&x).unwrap().shape(), &[2, 19]);
}
