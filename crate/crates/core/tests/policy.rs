use proptest::prelude::*;

use safe_ampc::linalg::Matrix;
use safe_ampc::models::{BenchmarkId, SystemModel};
use safe_ampc::ocp::Polytope;
use safe_ampc::policy::*;

fn meta(n_x: usize, n_u: usize, horizon: usize) -> WeightMeta {
    WeightMeta { n_x, n_u, horizon, benchmark: "stir_tank".into(), training_tol: 1e-3 }
}

fn stir_policy(seed: u64) -> (MlpPolicy<f64>, Polytope<f64>) {
    let m = SystemModel::<f64>::benchmark(BenchmarkId::StirTank).unwrap();
    let u = Polytope::from_box(&[-m.u_e()[0]], &[2.0 - m.u_e()[0]]).unwrap();
    let scaling = Scaling::from_boxes(m.sample_box(), &u, 10);
    let p = MlpPolicy::random(meta(2, 1, 10), scaling, &[8, 8], seed).unwrap().with_probe(PROBE_STATES, seed).unwrap();
    (p, u)
}

#[test]
fn zero_weights_give_the_zero_sequence() {
    let layers =
        vec![Layer { w: Matrix::zeros(5, 2), b: vec![0.0; 5] }, Layer { w: Matrix::zeros(3, 5), b: vec![0.0; 3] }];
    let s = Scaling { in_offset: vec![0.0; 2], in_scale: vec![1.0; 2], out_offset: vec![0.0; 3], out_scale: vec![1.0; 3] };
    let p = MlpPolicy::new(meta(2, 1, 3), s, layers).unwrap();
    let box_u = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
    assert_eq!(p.infer(&[0.2, -0.1], &box_u).unwrap().as_slice(), &[0.0, 0.0, 0.0]);
}

#[test]
fn target_state_maps_to_the_steady_input() {
    // Shifted coordinates: the target is the origin and the steady input is
    // the shifted zero, so the output offset alone is returned there.
    let (lo, hi) = ([-0.5, -1.0], [1.5, 3.0]);
    let box_u = Polytope::from_box(&lo, &hi).unwrap();
    let u_e = [0.25, 1.0];
    let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let s = Scaling {
        in_offset: vec![0.0; 2],
        in_scale: vec![1.0; 2],
        out_offset: [u_e, u_e].concat(),
        out_scale: vec![1.0; 4],
    };
    let p = MlpPolicy::new(meta(2, 2, 2), s, vec![Layer { w, b: vec![0.0; 4] }]).unwrap();
    let useq = p.infer(&[0.0, 0.0], &box_u).unwrap();
    assert_eq!(useq.stage(0), &u_e);
    assert_eq!(useq.stage(1), &u_e);
}

#[test]
fn save_load_round_trip_is_bitwise() {
    let (p, u) = stir_policy(11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    save_policy(&p, &path).unwrap();
    let q: MlpPolicy<f64> = load_policy(&path).unwrap();
    for x in &p.probe().inputs {
        let a = p.forward_raw(x).unwrap();
        let b = q.forward_raw(x).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(p.infer(x, &u).unwrap(), q.infer(x, &u).unwrap());
    }
    assert_eq!(p, q);
    assert_eq!(p.probe().inputs.len(), 16);
}

#[test]
fn single_precision_load_passes_the_probe() {
    let (p, _) = stir_policy(3);
    let q = MlpPolicy::<f32>::from_json(&p.to_json()).unwrap();
    assert_eq!(q.horizon(), 10);
}

#[test]
fn tampered_probe_is_detected() {
    let (p, _) = stir_policy(5);
    let mut file = p.to_file();
    file.probe.outputs[3][0] += 1e-3;
    match MlpPolicy::<f64>::from_file(file) {
        Err(PolicyError::Probe { index: 3, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn mismatched_layer_shapes_name_the_layer() {
    let (p, _) = stir_policy(1);
    let mut file = p.to_file();
    file.layers[1].w.iter_mut().for_each(|r| r.push(0.0));
    let text = serde_json::to_string(&file).unwrap();
    match MlpPolicy::<f64>::from_json(&text) {
        Err(e @ PolicyError::LayerShape { layer: 1, .. }) => assert!(e.to_string().contains("layer 1")),
        other => panic!("{other:?}"),
    }
    let mut ragged = p.to_file();
    ragged.layers[0].w[2].pop();
    match MlpPolicy::<f64>::from_file(ragged) {
        Err(PolicyError::LayerShape { layer: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_scaling_block_is_a_schema_error() {
    let (p, _) = stir_policy(2);
    let mut v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
    v.as_object_mut().unwrap().remove("scaling");
    match MlpPolicy::<f64>::from_json(&v.to_string()) {
        Err(PolicyError::Schema { message, .. }) => assert!(message.contains("scaling"), "{message}"),
        other => panic!("{other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
    v["scaling"].as_object_mut().unwrap().remove("out_scale");
    match MlpPolicy::<f64>::from_json(&v.to_string()) {
        Err(PolicyError::Schema { path, message }) => {
            assert_eq!(path, "scaling");
            assert!(message.contains("out_scale"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
    v["layers"][1]["b"][0] = serde_json::json!("x");
    match MlpPolicy::<f64>::from_json(&v.to_string()) {
        Err(PolicyError::Schema { path, .. }) => assert_eq!(path, "layers[1].b[0]"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn wrong_state_dimension_is_rejected() {
    let (p, _) = stir_policy(4);
    assert!(matches!(p.forward_raw(&[0.0; 3]), Err(PolicyError::Shape { .. })));
}

#[test]
fn adversarial_policy_sits_on_a_corner() {
    let u = Polytope::from_box(&[-1.0, -2.0], &[3.0, 4.0]).unwrap();
    let mut a = ConstantPolicy::adversarial(&u, 4, &[1.0, -1.0]);
    let s = a.propose(&[0.0]).unwrap();
    assert!(s.stages().all(|st| st == [3.0, -2.0]));
    let mut z = ConstantPolicy::<f64>::zero(2, 4);
    assert!(z.propose(&[1.0]).unwrap().as_slice().iter().all(|v| *v == 0.0));
}

fn state() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.6f64..0.6, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_lie_in_the_input_box_and_clamping_is_idempotent(seed in 0u64..1000, x in state()) {
        let (p, u) = stir_policy(seed);
        let useq = p.infer(&x, &u).unwrap();
        let mut again = useq.clone();
        for st in again.as_mut_slice().chunks_mut(1) {
            prop_assert!(!u.clamp_box(st));
        }
        prop_assert_eq!(&again, &useq);
        prop_assert!(useq.stages().all(|st| u.contains(st, 0.0)));
    }

    #[test]
    fn clamp_leaves_in_box_outputs_untouched(seed in 0u64..1000, x in state()) {
        let (p, _) = stir_policy(seed);
        let raw = p.forward_raw(&x).unwrap();
        let wide = Polytope::from_box(&[-1e6], &[1e6]).unwrap();
        let out = p.infer(&x, &wide).unwrap();
        prop_assert_eq!(out.as_slice(), raw.as_slice());
    }

    #[test]
    fn lipschitz_bound_is_never_violated(seed in 0u64..1000, x1 in state(), x2 in state()) {
        let (p, u) = stir_policy(seed);
        let c = p.lipschitz_bound();
        let a = p.infer(&x1, &u).unwrap();
        let b = p.infer(&x2, &u).unwrap();
        let du: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let dx: f64 = x1.iter().zip(&x2).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(du <= c * dx * (1.0 + 1e-12) + 1e-15, "{} > {} · {}", du, c, dx);
    }

    #[test]
    fn inference_is_deterministic(seed in 0u64..1000, x in state()) {
        let (p, u) = stir_policy(seed);
        let (q, _) = stir_policy(seed);
        prop_assert_eq!(p.infer(&x, &u).unwrap(), q.infer(&x, &u).unwrap());
    }
}
