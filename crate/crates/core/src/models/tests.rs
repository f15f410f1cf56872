use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{input_laplacian, Tape};
use crate::mesh::Mesh;

fn small_mesh() -> Mesh {
    Mesh::generate_box(2, 2, 2).unwrap()
}

fn predict(arch: &Architecture, mesh: &Mesh, params: &ParamSet) -> Vec<f64> {
    let graph = MeshGraph::from_mesh(mesh).unwrap();
    let features = NodeFeatures::from_mesh(mesh);
    let tape = Tape::new();
    let x = tape.constant(features.tensor().clone());
    let bound = params.bind(&tape);
    arch.forward(&graph, x, &bound).unwrap().value().data().to_vec()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn piecn_parameter_count() {
    let arch = Architecture::piecn(Activation::Relu);
    let params = arch.init_params(0).unwrap();
    let expected = (10 * 128 + 128)
        + (128 * 128 + 128)
        + (128 * 128 + 128)
        + (256 * 128 + 128)
        + (128 * 128 + 128)
        + (128 + 1);
    assert_eq!(params.num_scalars(), expected);
    assert_eq!(params.num_scalars(), 83969);
}

#[test]
fn pinn_parameter_count() {
    let params = Architecture::pinn(Activation::Tanh).init_params(0).unwrap();
    let expected = (5 * 128 + 128) + 3 * (128 * 128 + 128) + (128 + 1);
    assert_eq!(params.num_scalars(), expected);
}

#[test]
fn init_is_seeded_and_bounded() {
    let arch = Architecture::piecn(Activation::Relu);
    let a = arch.init_params(7).unwrap();
    let b = arch.init_params(7).unwrap();
    let c = arch.init_params(8).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_ne!(a, c);
    for (shape, (name, t)) in arch.param_shapes().iter().zip(a.iter()) {
        assert_eq!(shape.name, name);
        match shape.init {
            Init::Zeros => assert!(t.data().iter().all(|&v| v == 0.0), "{name}"),
            Init::Uniform { limit } => {
                assert!(t.data().iter().all(|v| v.abs() <= limit), "{name}");
                assert!(t.max_abs() > 0.5 * limit, "{name}");
            }
        }
    }
}

#[test]
fn first_layer_bound_uses_concatenated_fan_in() {
    let shapes = Architecture::piecn(Activation::Relu).param_shapes();
    let w = shapes
        .iter()
        .find(|s| s.name == "conv1.mlp0.weight_diff")
        .unwrap();
    assert_eq!(w.init, Init::glorot(10, 128));
}

#[test]
fn zero_width_rejected() {
    let arch = Architecture::Pinn(PinnSpec {
        in_features: 5,
        width: 0,
        hidden_layers: 2,
        activation: Activation::Relu,
    });
    assert!(matches!(arch.init_params(0), Err(ModelError::ZeroWidth(_))));
    let arch = Architecture::Pinn(PinnSpec {
        in_features: 5,
        width: 8,
        hidden_layers: 0,
        activation: Activation::Relu,
    });
    assert!(matches!(arch.init_params(0), Err(ModelError::ZeroWidth(_))));
}

#[test]
fn features_match_mesh() {
    let mesh = small_mesh();
    let f = NodeFeatures::from_mesh(&mesh);
    assert_eq!(f.tensor().shape(), (27, 5));
    for (i, p) in mesh.nodes().iter().enumerate() {
        assert_eq!(&f.tensor().row(i)[..3], p);
        let (value, mask) = (f.tensor().get(i, 3), f.tensor().get(i, 4));
        match mesh.dirichlet_values()[i] {
            Some(v) => assert_eq!((value, mask), (v, 1.0)),
            None => assert_eq!((value, mask), (0.0, 0.0)),
        }
    }
    let masked = (0..27).filter(|&i| f.tensor().get(i, 4) == 1.0).count();
    assert_eq!(masked, 18);
}

#[test]
fn zero_params_give_zero_field() {
    let mesh = small_mesh();
    for arch in [
        Architecture::piecn(Activation::Relu),
        Architecture::pinn(Activation::Relu),
        Architecture::pinn(Activation::Tanh),
    ] {
        let params = arch.init_params(3).unwrap().zeroed();
        assert!(predict(&arch, &mesh, &params).iter().all(|&v| v == 0.0));
    }
}

fn hand_spec(f: usize, width: usize) -> PiecnSpec {
    PiecnSpec {
        in_features: f,
        width,
        aggregation: Aggregation::Max,
        activation: Activation::Relu,
    }
}

/// Width-2 MLP computing `relu(d) - relu(-d) = d` for the difference `d`.
fn difference_passthrough() -> ParamSet {
    let t = |r, c, v: &[f64]| Tensor::new(r, c, v.to_vec());
    ParamSet::from_entries(
        0,
        vec![
            ("l.mlp0.weight_center".into(), t(1, 2, &[0.0, 0.0])),
            ("l.mlp0.weight_diff".into(), t(1, 2, &[1.0, -1.0])),
            ("l.mlp0.bias".into(), t(1, 2, &[0.0, 0.0])),
            ("l.mlp1.weight".into(), t(2, 2, &[1.0, 0.0, 0.0, 1.0])),
            ("l.mlp1.bias".into(), t(1, 2, &[0.0, 0.0])),
            ("l.mlp2.weight".into(), t(2, 1, &[1.0, -1.0])),
            ("l.mlp2.bias".into(), t(1, 1, &[0.0])),
        ],
    )
}

#[test]
fn two_node_difference() {
    let graph = MeshGraph::from_messages(2, &[(0, 1), (1, 0)]).unwrap();
    let tape = Tape::new();
    let x = tape.constant(Tensor::column(vec![0.25, 2.0]));
    let params = difference_passthrough().bind(&tape);
    let y = edgeconv_layer(&graph, x, &params, "l", hand_spec(1, 2)).unwrap();
    assert_eq!(y.value().data(), &[1.75, -1.75]);
}

#[test]
fn max_aggregation_over_incoming() {
    // node 0 hears from 1 and 2, nodes 1 and 2 hear from 0
    let graph = MeshGraph::from_messages(3, &[(1, 0), (2, 0), (0, 1), (0, 2)]).unwrap();
    let tape = Tape::new();
    let x = tape.constant(Tensor::column(vec![1.0, 4.0, -3.0]));
    let params = difference_passthrough().bind(&tape);
    let y = edgeconv_layer(&graph, x, &params, "l", hand_spec(1, 2)).unwrap();
    assert_eq!(y.value().data(), &[3.0, -3.0, 4.0]);
}

#[test]
fn isolated_node_is_invalid() {
    let err = MeshGraph::from_messages(3, &[(0, 1), (1, 0)]).unwrap_err();
    assert!(matches!(
        err,
        ModelError::Tape(TapeError::InvalidGraph(_))
    ));
    assert!(matches!(
        MeshGraph::from_messages(2, &[(0, 5)]),
        Err(ModelError::SizeMismatch(_))
    ));
}

/// Direct evaluation of one layer: concatenate `[x_i || x_j - x_i]` per
/// message and apply the unsplit first weight.
fn concat_layer<'t>(
    tape: &'t Tape,
    pairs: &[(usize, usize)],
    num_nodes: usize,
    x: Var<'t>,
    params: &BoundParams<'t>,
    prefix: &str,
) -> Var<'t> {
    let src: Rc<[usize]> = pairs.iter().map(|p| p.0).collect();
    let dst: Rc<[usize]> = pairs.iter().map(|p| p.1).collect();
    let xi = x.gather_rows(&dst).unwrap();
    let xj = x.gather_rows(&src).unwrap();
    let input = tape.concat_cols(&[xi, xj.sub(xi).unwrap()]).unwrap();
    let w = {
        let c = params.get(&format!("{prefix}.mlp0.weight_center")).unwrap();
        let d = params.get(&format!("{prefix}.mlp0.weight_diff")).unwrap();
        let mut rows = c.value().data().to_vec();
        rows.extend_from_slice(d.value().data());
        tape.constant(Tensor::new(2 * c.shape().0, c.shape().1, rows))
    };
    let lin = |h: Var<'t>, name: &str| {
        let w = params.get(&format!("{prefix}.{name}.weight")).unwrap();
        let b = params.get(&format!("{prefix}.{name}.bias")).unwrap();
        h.matmul(w).unwrap().add_row(b).unwrap()
    };
    let b0 = params.get(&format!("{prefix}.mlp0.bias")).unwrap();
    let h = input.matmul(w).unwrap().add_row(b0).unwrap().relu();
    let h = lin(h, "mlp1").relu();
    let m = lin(h, "mlp2");
    let (_, cols) = m.shape();
    let mut out = vec![f64::NEG_INFINITY; num_nodes * cols];
    for (k, &i) in dst.iter().enumerate() {
        for c in 0..cols {
            let v = m.value().get(k, c);
            if v > out[i * cols + c] {
                out[i * cols + c] = v;
            }
        }
    }
    tape.constant(Tensor::new(num_nodes, cols, out))
}

#[test]
fn split_first_layer_matches_concatenation() {
    let mesh = small_mesh();
    let arch = Architecture::piecn(Activation::Relu);
    let params = arch.init_params(11).unwrap();
    let edges = mesh.extract_edges();
    let pairs: Vec<(usize, usize)> = edges.iter().collect();
    let tape = Tape::new();
    let x = tape.constant(NodeFeatures::from_mesh(&mesh).tensor().clone());
    let bound = params.bind(&tape);
    let h = concat_layer(&tape, &pairs, 27, x, &bound, "conv1");
    let oracle = concat_layer(&tape, &pairs, 27, h, &bound, "conv2");
    let got = predict(&arch, &mesh, &params);
    assert!(close(&got, oracle.value().data(), 1e-12));
    assert!(got.iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn edge_order_does_not_matter() {
    let mesh = small_mesh();
    let arch = Architecture::piecn(Activation::Relu);
    let params = arch.init_params(5).unwrap();
    let features = NodeFeatures::from_mesh(&mesh);
    let mut pairs: Vec<(usize, usize)> = mesh.extract_edges().iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = predict(&arch, &mesh, &params);
    for _ in 0..3 {
        pairs.shuffle(&mut rng);
        let graph = MeshGraph::from_messages(27, &pairs).unwrap();
        let tape = Tape::new();
        let x = tape.constant(features.tensor().clone());
        let y = arch.forward(&graph, x, &params.bind(&tape)).unwrap();
        assert!(close(y.value().data(), &base, 1e-12));
    }
}

#[test]
fn relabeling_is_equivariant() {
    let mesh = small_mesh();
    let arch = Architecture::piecn(Activation::Relu);
    let params = arch.init_params(9).unwrap();
    let base = predict(&arch, &mesh, &params);
    let features = NodeFeatures::from_mesh(&mesh);

    let mut perm: Vec<usize> = (0..27).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
    // old node i becomes new node perm[i]
    let pairs: Vec<(usize, usize)> = mesh
        .extract_edges()
        .iter()
        .map(|(s, t)| (perm[s], perm[t]))
        .collect();
    let mut permuted = Tensor::zeros(27, 5);
    for i in 0..27 {
        for c in 0..5 {
            permuted.set(perm[i], c, features.tensor().get(i, c));
        }
    }
    let graph = MeshGraph::from_messages(27, &pairs).unwrap();
    let tape = Tape::new();
    let y = arch
        .forward(&graph, tape.constant(permuted), &params.bind(&tape))
        .unwrap()
        .value();
    for i in 0..27 {
        assert!((y.get(perm[i], 0) - base[i]).abs() <= 1e-12);
    }
}

#[test]
fn translation_leaves_difference_channel_unchanged() {
    // with the center block zeroed, messages see only x_j - x_i
    let mesh = small_mesh();
    let arch = Architecture::piecn(Activation::Relu);
    let mut params = arch.init_params(4).unwrap();
    for name in ["conv1.mlp0.weight_center"] {
        let t = params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    let graph = MeshGraph::from_mesh(&mesh).unwrap();
    let features = NodeFeatures::from_mesh(&mesh);
    let shifted = Tensor::new(
        27,
        5,
        features
            .tensor()
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| if k % 5 == 1 { v + 3.5 } else { v })
            .collect(),
    );
    let run = |x: Tensor| {
        let tape = Tape::new();
        arch.forward(&graph, tape.constant(x), &params.bind(&tape))
            .unwrap()
            .value()
            .data()
            .to_vec()
    };
    let a = run(features.tensor().clone());
    let b = run(shifted);
    assert!(close(&a, &b, 1e-12));
}

#[test]
fn receptive_field_reaches_neighbors() {
    let mesh = small_mesh();
    let arch = Architecture::piecn(Activation::Relu);
    let params = arch.init_params(6).unwrap();
    let graph = MeshGraph::from_mesh(&mesh).unwrap();
    let features = NodeFeatures::from_mesh(&mesh);
    let center = 13;
    let run = |x: Tensor| {
        let tape = Tape::new();
        arch.forward(&graph, tape.constant(x), &params.bind(&tape))
            .unwrap()
            .value()
            .data()
            .to_vec()
    };
    let base = run(features.tensor().clone());
    let edges = mesh.extract_edges();
    let neighbor = edges.iter().find(|&(s, _)| s == center).unwrap().1;
    let mut probed = features.tensor().clone();
    probed.set(neighbor, 3, 0.7);
    let moved = run(probed);
    assert_ne!(base[center], moved[center]);
}

#[test]
fn pinn_is_pointwise() {
    let mesh = small_mesh();
    let graph = MeshGraph::from_mesh(&mesh).unwrap();
    let features = NodeFeatures::from_mesh(&mesh);
    for act in [Activation::Relu, Activation::Tanh] {
        let arch = Architecture::pinn(act);
        let params = arch.init_params(2).unwrap();
        let run = |x: Tensor| {
            let tape = Tape::new();
            arch.forward(&graph, tape.constant(x), &params.bind(&tape))
                .unwrap()
                .value()
                .data()
                .to_vec()
        };
        let base = run(features.tensor().clone());
        let mut probed = features.tensor().clone();
        probed.set(4, 0, 0.33);
        probed.set(4, 3, -1.0);
        let moved = run(probed);
        for i in 0..27 {
            if i == 4 {
                assert_ne!(base[i], moved[i]);
            } else {
                assert_eq!(base[i].to_bits(), moved[i].to_bits());
            }
        }
    }
}

#[test]
fn relu_pinn_laplacian_vanishes() {
    let mesh = Mesh::generate_box(3, 3, 3).unwrap().deformed(0.2).unwrap();
    let graph = MeshGraph::from_mesh(&mesh).unwrap();
    let arch = Architecture::pinn(Activation::Relu);
    let params = arch.init_params(1).unwrap();
    let tape = Tape::new();
    let x = tape.leaf(NodeFeatures::from_mesh(&mesh).tensor().clone());
    let y = arch.forward(&graph, x, &params.bind(&tape)).unwrap();
    let lap = input_laplacian(x, y, &COORD_COLUMNS).unwrap();
    assert!(lap.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn feature_size_mismatch() {
    let mesh = small_mesh();
    let graph = MeshGraph::from_mesh(&mesh).unwrap();
    let tape = Tape::new();
    for arch in [
        Architecture::piecn(Activation::Relu),
        Architecture::pinn(Activation::Relu),
    ] {
        let params = arch.init_params(0).unwrap().bind(&tape);
        let x = tape.constant(Tensor::zeros(27, 4));
        assert!(matches!(
            arch.forward(&graph, x, &params),
            Err(ModelError::SizeMismatch(_))
        ));
    }
    let params = Architecture::piecn(Activation::Relu)
        .init_params(0)
        .unwrap()
        .bind(&tape);
    let x = tape.constant(Tensor::zeros(26, 5));
    assert!(matches!(
        Architecture::piecn(Activation::Relu).forward(&graph, x, &params),
        Err(ModelError::SizeMismatch(_))
    ));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = Architecture::pinn(Activation::Tanh).init_params(3).unwrap();
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen::<f64>() * 1e-7 + 1.0 / 3.0;
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    params.save(&path).unwrap();
    let back = ParamSet::load(&path).unwrap();
    assert_eq!(back.seed(), 3);
    for ((na, a), (nb, b)) in params.iter().zip(back.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn checkpoint_rejects_bad_files() {
    for text in [
        "{}",
        r#"{"format":"other","seed":0,"tensors":[]}"#,
        r#"{"format":"meshpinn-checkpoint-v1","seed":0,"tensors":[{"name":"a","rows":2,"cols":2,"values":[1.0]}]}"#,
        r#"{"format":"meshpinn-checkpoint-v1","seed":0,"tensors":[],"extra":1}"#,
    ] {
        assert!(matches!(
            ParamSet::from_json(text),
            Err(ModelError::Checkpoint(_))
        ));
    }
}

#[test]
fn missing_parameter_reported() {
    let mesh = small_mesh();
    let graph = MeshGraph::from_mesh(&mesh).unwrap();
    let tape = Tape::new();
    let params = Architecture::pinn(Activation::Relu)
        .init_params(0)
        .unwrap()
        .bind(&tape);
    let x = tape.constant(NodeFeatures::from_mesh(&mesh).tensor().clone());
    assert!(matches!(
        Architecture::piecn(Activation::Relu).forward(&graph, x, &params),
        Err(ModelError::MissingParam(_))
    ));
}

#[test]
fn params_checked_against_architecture() {
    let piecn = Architecture::piecn(Activation::Relu);
    let pinn = Architecture::pinn(Activation::Relu);
    let params = piecn.init_params(0).unwrap();
    assert!(piecn.check_params(&params).is_ok());
    assert!(matches!(
        pinn.check_params(&params),
        Err(ModelError::SizeMismatch(_))
    ));
    let mut entries: Vec<(String, Tensor)> =
        params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    entries[3].1 = Tensor::zeros(1, 1);
    let broken = ParamSet::from_entries(0, entries);
    assert!(piecn.check_params(&broken).is_err());
}
