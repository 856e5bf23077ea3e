use super::*;
use crate::graph::{gen_space, CgNode, GraphMeta, OpKind, Shape, SpaceSpec};
use crate::numeric::checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn six_nodes() -> ComputeGraph {
    let s = Shape::new(8, 8, 4);
    let mut cg = ComputeGraph::new(GraphMeta { name: "six".into(), space: "unit".into(), block_count: 1 });
    cg.nodes = vec![
        CgNode::new(0, OpKind::Input, s, s),
        CgNode::new(1, OpKind::Conv, s, s).with_weights(vec![3, 3, 4, 4], true),
        CgNode::new(2, OpKind::BatchNorm, s, s).with_weights(vec![4], false),
        CgNode::new(3, OpKind::Relu, s, s),
        CgNode::new(4, OpKind::Add, s, s),
        CgNode::new(5, OpKind::Output, s, s),
    ];
    cg.edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (4, 5)];
    cg
}

fn permuted(cg: &ComputeGraph, seed: u64) -> ComputeGraph {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cg.clone();
    out.nodes.shuffle(&mut rng);
    out.edges.shuffle(&mut rng);
    out
}

fn cells(n: u64) -> Vec<ComputeGraph> {
    let spec = SpaceSpec::preset("cell-like").unwrap();
    (0..n).map(|s| gen_space(&spec, s).unwrap()).collect()
}

fn with_adapters(tags: &[&str]) -> Predictor {
    let mut p = Predictor::new(PredictorConfig::default(), 3).unwrap();
    let gs = cells(4);
    for (k, tag) in tags.iter().enumerate() {
        let hyper = TrainHyper { epochs: 0, seed: k as u64, ..TrainHyper::adapter() };
        p.train_adapter(tag, &gs, &[0.0; 4], &hyper).unwrap();
    }
    p
}

fn zero_prefix(p: &mut Predictor, prefix: &str) {
    let names: Vec<String> = p.store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for n in names {
        let (r, c) = p.store.get(&n).unwrap().value.shape();
        p.store.set_value(&n, Tensor::zeros(r, c)).unwrap();
    }
}

fn bytes_with_prefix(p: &Predictor, prefixes: &[&str]) -> Vec<u8> {
    let mut s = p.store.clone();
    s.remove_prefix("");
    for (k, v) in p.store.iter() {
        if prefixes.iter().any(|pre| k.starts_with(pre)) {
            s.insert_param(k.clone(), v.clone());
        }
    }
    checkpoint::encode("", &s)
}

#[test]
fn config_requires_doubled_adapter_width() {
    let bad = PredictorConfig { adapter_in_dim: 48, ..PredictorConfig::default() };
    assert!(matches!(Predictor::new(bad, 0), Err(PredictorError::Config(_))));
}

#[test]
fn embedding_properties() {
    let mut p = Predictor::new(PredictorConfig::default(), 1).unwrap();
    let cg = six_nodes();
    let e = p.embed_nodes(&cg).unwrap();
    assert_eq!(e.shape(), (6, 32));
    // relu (3) and output (5) differ only in op one-hot; input (0) and output share shapes
    let perm = permuted(&cg, 4);
    let ep = p.embed_nodes(&perm).unwrap();
    for (r, n) in perm.nodes.iter().enumerate() {
        let orig = cg.nodes.iter().position(|m| m.id == n.id).unwrap();
        assert_eq!(ep.row(r), e.row(orig));
    }
    let mut twin = cg.clone();
    twin.nodes[3].op = OpKind::Relu6;
    twin.nodes.push(CgNode::new(6, OpKind::Relu6, twin.nodes[3].in_shape, twin.nodes[3].out_shape));
    twin.edges.retain(|e| *e != (3, 4));
    twin.edges.extend([(3, 6), (6, 4)]);
    let et = p.embed_nodes(&twin).unwrap();
    assert_eq!(et.row(3), et.row(6));
    zero_prefix(&mut p, "embed.");
    assert!(p.embed_nodes(&cg).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backbone_single_node_and_zero() {
    let mut p = Predictor::new(PredictorConfig::default(), 2).unwrap();
    let s = Shape::new(4, 4, 3);
    let mut single = ComputeGraph::new(GraphMeta::default());
    single.nodes = vec![CgNode::new(0, OpKind::Input, s, s)];
    let acts = p.forward_backbone(&single).unwrap();
    // no neighbours: each layer is relu(h W_self + b)
    let mut h = p.embed_nodes(&single).unwrap();
    for i in 0..6 {
        let w = &p.store.get(&format!("backbone.{i}.self")).unwrap().value;
        let b = &p.store.get(&format!("backbone.{i}.b")).unwrap().value;
        h = h.matmul(w).zip_map(b, |x, y| (x + y).max(0.0));
    }
    assert!(acts.graph_embedding.max_abs_diff(&h) < 1e-12);
    assert!(matches!(p.forward_backbone(&ComputeGraph::default()), Err(PredictorError::EmptyGraph)));
    zero_prefix(&mut p, "");
    let acts = p.forward_backbone(&six_nodes()).unwrap();
    assert!(acts.graph_embedding.data().iter().all(|&v| v == 0.0));
}

#[test]
fn permutation_invariance() {
    let p = with_adapters(&["a", "b"]);
    for cg in cells(3) {
        let perm = permuted(&cg, 9);
        let g1 = p.forward_backbone(&cg).unwrap().graph_embedding;
        let g2 = p.forward_backbone(&perm).unwrap().graph_embedding;
        assert!(g1.max_abs_diff(&g2) < 1e-12);
        let d = p.predict(&cg, Mode::Adapters).unwrap() - p.predict(&perm, Mode::Adapters).unwrap();
        assert!(d.abs() < 1e-12);
    }
}

#[test]
fn adapter_widths_and_sensitivity() {
    let p = with_adapters(&["a"]);
    for i in 0..6 {
        assert_eq!(p.store.get(&format!("adapter.a.{i}.self")).unwrap().value.shape(), (64, 32));
        assert_eq!(p.store.get(&format!("adapter.a.{i}.nbr")).unwrap().value.shape(), (64, 32));
    }
    assert_eq!(p.store.get("head.adapter.a.h0.w").unwrap().value.shape(), (64, 32));
    let cg = six_nodes();
    let acts = p.forward_backbone(&cg).unwrap();
    let base = p.forward_adapter("a", &cg, &acts).unwrap();
    assert_eq!(base.shape(), (1, 32));
    for i in 1..=6 {
        let mut z = acts.clone();
        z.layers[i] = Tensor::zeros(6, 32);
        let other = p.forward_adapter("a", &cg, &z).unwrap();
        assert!(other.max_abs_diff(&base) > 0.0, "layer {i} has no effect");
    }
    let mut zp = p.clone();
    zero_prefix(&mut zp, "adapter.a.");
    assert!(zp.forward_adapter("a", &cg, &acts).unwrap().data().iter().all(|&v| v == 0.0));
    let mut short = acts.clone();
    short.layers.pop();
    assert!(p.forward_adapter("a", &cg, &short).is_err());
}

#[test]
fn multi_adapter_mean_is_exact() {
    let p = with_adapters(&["a", "b", "c"]);
    for cg in cells(5) {
        let singles: Vec<f64> = ["a", "b", "c"].iter().map(|t| p.predict_adapter(&cg, t).unwrap()).collect();
        let mean = singles.iter().sum::<f64>() / 3.0;
        assert_eq!(p.predict(&cg, Mode::Adapters).unwrap(), mean);
    }
    let one = with_adapters(&["solo"]);
    let cg = six_nodes();
    assert_eq!(one.predict(&cg, Mode::Adapters).unwrap(), one.predict_adapter(&cg, "solo").unwrap());
    let none = Predictor::new(PredictorConfig::default(), 0).unwrap();
    assert!(matches!(none.predict(&cg, Mode::Adapters), Err(PredictorError::NoAdapters)));
    assert!(matches!(one.predict(&cg, Mode::Backbone), Err(PredictorError::NoBackboneHead)));
}

#[test]
fn batched_prediction_matches_single() {
    let p = with_adapters(&["a"]);
    let gs = cells(5);
    let many = p.predict_many(&gs, Mode::Auto).unwrap();
    for (g, y) in gs.iter().zip(many) {
        assert_eq!(p.predict(g, Mode::Auto).unwrap(), y);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut p = with_adapters(&["a", "b"]);
    p.store.set_frozen_prefix("", false);
    let cg = six_nodes();
    let (graphs, targets) = (vec![cg], vec![0.3]);
    let (_, grads) = p.loss_gradients(&graphs, &targets, Mode::Adapters).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let names: Vec<String> = p.store.names().map(String::from).collect();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for name in names {
        let g = grads.get(&name).expect("every parameter gets a gradient");
        let len = g.data().len();
        for _ in 0..4 {
            let k = rng.random_range(0..len);
            let base = p.store.get(&name).unwrap().value.clone();
            let mut q = p.clone();
            let mut v = base.clone();
            v.data_mut()[k] += eps;
            q.store.set_value(&name, v).unwrap();
            let lp = q.loss_gradients(&graphs, &targets, Mode::Adapters).unwrap().0;
            let mut v = base.clone();
            v.data_mut()[k] -= eps;
            q.store.set_value(&name, v).unwrap();
            let lm = q.loss_gradients(&graphs, &targets, Mode::Adapters).unwrap().0;
            let fd = (lp - lm) / (2.0 * eps);
            let a = g.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn backbone_training_loss_decreases() {
    let gs = cells(64);
    let ys: Vec<f64> = gs.iter().map(|g| (g.node_count() as f64 - 90.0) / 20.0).collect();
    let mut p = Predictor::new(PredictorConfig::default(), 5).unwrap();
    let hyper = TrainHyper { epochs: 5, seed: 1, ..TrainHyper::backbone() };
    let curve = p.train_backbone(&gs, &ys, &hyper).unwrap();
    assert_eq!(curve.len(), 5);
    assert!(curve.windows(2).all(|w| w[1] < w[0]), "{curve:?}");

    let mut again = Predictor::new(PredictorConfig::default(), 5).unwrap();
    assert_eq!(again.train_backbone(&gs, &ys, &hyper).unwrap(), curve);
    assert_eq!(again.store, p.store);

    let mut frozen = Predictor::new(PredictorConfig::default(), 5).unwrap();
    let before = frozen.clone();
    frozen.train_backbone(&gs, &ys, &TrainHyper { lr: 0.0, ..hyper }).unwrap();
    for (name, param) in frozen.store.iter() {
        assert_eq!(param.value, before.store.get(name).unwrap().value);
    }
    assert!(matches!(p.train_backbone(&[], &[], &hyper), Err(PredictorError::EmptyDataset)));
}

#[test]
fn adapter_training_contracts() {
    let gs = cells(12);
    let ys_a: Vec<f64> = gs.iter().map(|g| g.node_count() as f64 / 100.0).collect();
    let ys_b: Vec<f64> = gs.iter().map(|g| g.edge_count() as f64 / -100.0).collect();
    let mut base = Predictor::new(PredictorConfig::default(), 6).unwrap();
    base.train_backbone(&gs, &ys_a, &TrainHyper { epochs: 1, ..TrainHyper::backbone() }).unwrap();
    let hyper = TrainHyper { epochs: 3, lr: 1e-3, batch_size: 4, seed: 2 };

    let mut ab = base.clone();
    let before = bytes_with_prefix(&ab, &["embed.", "backbone."]);
    ab.train_adapter("a", &gs, &ys_a, &hyper).unwrap();
    ab.train_adapter("b", &gs, &ys_b, &hyper).unwrap();
    assert_eq!(bytes_with_prefix(&ab, &["embed.", "backbone."]), before);
    assert!(!ab.has_backbone_head());
    assert!(!ab.store.names().any(|n| n.starts_with("head.backbone.")));

    let mut ba = base.clone();
    ba.train_adapter("b", &gs, &ys_b, &hyper).unwrap();
    ba.train_adapter("a", &gs, &ys_a, &hyper).unwrap();
    assert_eq!(ab.to_bytes(""), ba.to_bytes(""));

    assert!(matches!(ab.train_adapter("a", &gs, &ys_a, &hyper), Err(PredictorError::DuplicateAdapter(_))));
    assert!(matches!(ab.train_adapter("x.y", &gs, &ys_a, &hyper), Err(PredictorError::BadTag(_))));
    assert!(matches!(ab.train_backbone(&gs, &ys_a, &hyper), Err(PredictorError::BackboneLocked)));
}

#[test]
fn adapter_fits_constant_labels() {
    let gs = cells(8);
    let mut p = Predictor::new(PredictorConfig::default(), 7).unwrap();
    let hyper = TrainHyper { epochs: 1000, lr: 1e-3, batch_size: 8, seed: 0 };
    let curve = p.train_adapter("k", &gs, &[0.7; 8], &hyper).unwrap();
    let (mse, _) = p.loss_gradients(&gs, &[0.7; 8], Mode::Adapters).unwrap();
    let curve_tail = &curve[curve.len() - 5..];
    assert!(mse < 1e-4, "mse {mse} tail {curve_tail:?}");
}

#[test]
fn finetune_contracts() {
    let gs = cells(6);
    let mut p = with_adapters(&["a", "b"]);
    let adapter_bytes = bytes_with_prefix(&p, &["adapter."]);
    let ys: Vec<f64> = (0..6).map(|i| i as f64 / 6.0).collect();
    let hyper = TrainHyper { epochs: 2, lr: 1e-3, batch_size: 1, seed: 4 };
    let before = p.clone();
    p.finetune(&gs, &ys, &hyper).unwrap();
    assert_eq!(bytes_with_prefix(&p, &["adapter."]), adapter_bytes);
    assert_ne!(p.store.get("backbone.0.self").unwrap().value, before.store.get("backbone.0.self").unwrap().value);

    // already exact: gradients vanish and nothing moves
    let mut fixed = before.clone();
    let exact = fixed.predict_many(&gs, Mode::Adapters).unwrap();
    fixed.finetune(&gs, &exact, &hyper).unwrap();
    for (name, param) in fixed.store.iter() {
        assert!(param.value.max_abs_diff(&before.store.get(name).unwrap().value) < 1e-6, "{name}");
    }
    let mut zero = before.clone();
    zero.finetune(&gs, &ys, &TrainHyper { epochs: 0, ..hyper }).unwrap();
    assert_eq!(zero.predict_many(&gs, Mode::Adapters).unwrap(), exact);

    assert!(matches!(p.finetune(&[], &[], &hyper), Err(PredictorError::EmptyDataset)));
    let mut bare = Predictor::new(PredictorConfig::default(), 0).unwrap();
    assert!(matches!(bare.finetune(&gs, &ys, &hyper), Err(PredictorError::NoAdapters)));
}

#[test]
fn adaproxy_identity_and_fit() {
    let gs = cells(3);
    let p = with_adapters(&["a"]);
    let plain = p.predict_many(&gs, Mode::Adapters).unwrap();

    let mut ident = p.clone();
    ident.adaproxy_finetune(&gs, &plain, &AdaProxyHyper { epochs: 0, ..AdaProxyHyper::default() }).unwrap();
    assert!(ident.has_adaproxy());
    assert_eq!(ident.predict_many(&gs, Mode::Adapters).unwrap(), plain);

    let mut one = p.clone();
    let target = plain[0] + 0.5;
    let hyper = AdaProxyHyper { epochs: 1000, lr: 1e-2, lambda: 0.0 };
    let curve = one.adaproxy_finetune(&gs[..1], &[target], &hyper).unwrap();
    assert!(curve.last().unwrap() < &1e-8, "final loss {:?}", curve.last());
    // original weights untouched
    for (name, param) in p.store.iter() {
        assert_eq!(param.value, one.store.get(name).unwrap().value);
    }
}

#[test]
fn adaproxy_penalty_shrinks_b() {
    let gs = cells(6);
    let p = with_adapters(&["a"]);
    let ys: Vec<f64> = (0..6).map(|i| i as f64 / 3.0 - 1.0).collect();
    let l1 = |lambda: f64| {
        let mut q = p.clone();
        q.adaproxy_finetune(&gs, &ys, &AdaProxyHyper { epochs: 300, lr: 1e-2, lambda }).unwrap();
        q.store.get("adaproxy.b").unwrap().value.data().iter().map(|v| v.abs()).sum::<f64>()
    };
    let (small, mid, big) = (l1(1e-5), l1(1e-1), l1(1e3));
    assert!(big < mid && mid < small, "{small} {mid} {big}");
    assert!(big < 0.1 * small);
}

#[test]
fn checkpoint_round_trip() {
    let mut p = with_adapters(&["a", "b"]);
    p.scalings.insert(
        "a".into(),
        crate::scaling::ScalingSpec { task: "a".into(), use_flops_transform: true, mu: 30.0, sigma: 2.0 },
    );
    checkpoint::quantize(&mut p.store);
    let bytes = p.to_bytes("abc");
    let (back, hash) = Predictor::from_bytes(&bytes).unwrap();
    assert_eq!(hash, "abc");
    assert_eq!(back, p);
    assert_eq!(back.to_bytes("abc"), bytes);
    assert!(Predictor::from_bytes(&bytes[..20]).is_err());
}
