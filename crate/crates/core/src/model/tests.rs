use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::codec::FormatError;

const EXACT: f64 = 1e-12;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_spec(kind: CellKind, dims: &[usize], head: Head) -> ModelSpec {
    let mut spec = ModelSpec::new(kind, dims.to_vec(), head);
    spec.d_e = 4;
    spec.d_h = 3;
    spec
}

fn streams(dims: &[usize], t: usize, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    dims.iter().map(|&d| Tensor::uniform(&[t, d], 1.0, r)).collect()
}

fn classifier() -> Head {
    Head::Classifier { classes: 3 }
}

/// Plain `W h + b` on vectors.
fn affine(w: &Tensor, b: &Tensor, h: &[f64]) -> Vec<f64> {
    let cols = h.len();
    (0..b.len())
        .map(|r| b.data()[r] + (0..cols).map(|c| w.data()[r * cols + c] * h[c]).sum::<f64>())
        .collect()
}

#[test]
fn single_step_is_cell_then_head() {
    let mut r = rng(11);
    let spec = small_spec(CellKind::LstmSingleSensor, &[5], classifier());
    let p = ModelParams::random(&spec, 0.5, &mut r).unwrap();
    let s = streams(&[5], 1, &mut r);
    let out = forward_sequence(&spec, &p, &s).unwrap();

    let mut g = Graph::evaluation();
    let bound = p.bind(&mut g);
    let x = g.constant(s[0].clone());
    let e = encode(&mut g, x, bound.cell.encoders.as_ref().unwrap().weights[0]).unwrap();
    let zero = CellState::zeros(1, 3).constant(&mut g);
    let (next, _) = lstm_step(&mut g, &bound.cell.cores[0], e, &zero).unwrap();
    let expected = affine(&p.head.w, &p.head.b, g.value(next.h).data());
    assert_eq!(out.outputs.shape(), &[1, 3]);
    for (a, b) in out.outputs.data().iter().zip(&expected) {
        assert!((a - b).abs() < EXACT);
    }
}

#[test]
fn zero_params_give_zero_logits() {
    for kind in CellKind::ALL {
        let spec = small_spec(kind, &[2, 3], classifier());
        let p = ModelParams::zeros(&spec).unwrap();
        let out = forward_sequence(&spec, &p, &streams(&[2, 3], 4, &mut rng(1))).unwrap();
        assert!(out.outputs.data().iter().all(|&v| v == 0.0), "{kind}");
    }
}

#[test]
fn lgrf_matches_hand_unrolled_steps() {
    let dims = [3, 2];
    let mut spec = small_spec(CellKind::Lgrf, &dims, classifier());
    spec.residual = ResidualStrategy::SumComplement;
    let mut r = rng(8);
    let p = ModelParams::random(&spec, 0.5, &mut r).unwrap();
    let s = streams(&dims, 3, &mut r);
    let out = forward_sequence(&spec, &p, &s).unwrap();

    let mut g = Graph::evaluation();
    let cell = p.cell.bind(&mut g);
    let mut state = CellState::zeros(1, 3).constant(&mut g);
    for t in 0..3 {
        let raw: Vec<Var> = s
            .iter()
            .map(|x| g.constant(Tensor::new(vec![1, x.shape()[1]], x.row(t).to_vec()).unwrap()))
            .collect();
        let (next, _) = crate::cells::lgrf_step(&mut g, &cell, &raw, &state).unwrap();
        state = next;
        let expected = affine(&p.head.w, &p.head.b, g.value(state.h).data());
        for (a, b) in out.outputs.row(t).iter().zip(&expected) {
            assert!((a - b).abs() < EXACT, "t={t}: {a} vs {b}");
        }
    }
}

#[test]
fn parameter_counts() {
    let mut single = small_spec(CellKind::LstmSingleSensor, &[7], classifier());
    single.d_e = 2;
    assert_eq!(count_parameters(&single).cores, 72);

    let mut egrf = small_spec(CellKind::Egrf, &[5, 6], Head::Classifier { classes: 2 });
    egrf.d_e = 4;
    let c = count_parameters(&egrf);
    assert_eq!((c.encoders, c.gates, c.cores), (44, 32, 96));
    assert_eq!(c.total(), 172 + 2 * 3 + 2);

    let two = count_parameters(&small_spec(CellKind::Lrs, &[2, 2], classifier()));
    let three = count_parameters(&small_spec(CellKind::Lrs, &[2, 2, 2], classifier()));
    assert_eq!(three.cores - two.cores, 4 * (3 * 4 + 3 * 3 + 3));

    for kind in CellKind::ALL {
        for dims in [&[3][..], &[2, 5], &[4, 1, 3]] {
            for head in [classifier(), Head::Regressor { outputs: 1 }] {
                let spec = small_spec(kind, dims, head);
                let p = ModelParams::init(&spec, &mut rng(0)).unwrap();
                assert_eq!(p.count(), count_parameters(&spec).total(), "{kind} {dims:?}");
            }
        }
    }
}

#[test]
fn forward_is_deterministic_and_causal() {
    let dims = [3, 4];
    for kind in CellKind::ALL {
        let spec = small_spec(kind, &dims, classifier());
        let mut r = rng(12);
        let p = ModelParams::random(&spec, 0.5, &mut r).unwrap();
        let s = streams(&dims, 6, &mut r);
        let a = forward_sequence(&spec, &p, &s).unwrap();
        let b = forward_sequence(&spec, &p, &s).unwrap();
        assert_eq!(a.outputs, b.outputs);

        let prefix: Vec<Tensor> = s
            .iter()
            .map(|x| Tensor::new(vec![4, x.shape()[1]], x.data()[..4 * x.shape()[1]].to_vec()).unwrap())
            .collect();
        let short = forward_sequence(&spec, &p, &prefix).unwrap();
        for t in 0..4 {
            for (x, y) in short.outputs.row(t).iter().zip(a.outputs.row(t)) {
                assert!((x - y).abs() <= EXACT, "{kind} t={t}");
            }
        }
    }
}

#[test]
fn regressor_outputs_stay_inside_unit_interval() {
    let dims = [2, 3, 2];
    for kind in CellKind::ALL {
        let spec = small_spec(kind, &dims, Head::Regressor { outputs: 1 });
        let mut r = rng(13);
        let p = ModelParams::random(&spec, 3.0, &mut r).unwrap();
        let out = forward_sequence(&spec, &p, &streams(&dims, 8, &mut r)).unwrap();
        assert!(out.outputs.data().iter().all(|v| v.abs() < 1.0), "{kind}");
    }
}

#[test]
fn late_variants_share_per_sensor_states() {
    let dims = [3, 2];
    let concat = small_spec(CellKind::LateConcat, &dims, classifier());
    let add = small_spec(CellKind::LateAdd, &dims, classifier());
    let mut r = rng(14);
    let pc = ModelParams::random(&concat, 0.5, &mut r).unwrap();
    // same cell weights, different head shapes
    let mut pa = ModelParams::random(&add, 0.5, &mut r).unwrap();
    pa.cell = pc.cell.clone();
    let s = streams(&dims, 5, &mut r);
    let a = forward_sequence(&concat, &pc, &s).unwrap();
    let b = forward_sequence(&add, &pa, &s).unwrap();
    assert_eq!(a.final_state, b.final_state);
    assert_eq!(a.final_state.len(), 2);
}

#[test]
fn rejects_mismatched_streams() {
    let spec = small_spec(CellKind::EarlyAdd, &[2, 2], classifier());
    let p = ModelParams::zeros(&spec).unwrap();
    let s = vec![Tensor::zeros(&[4, 2]), Tensor::zeros(&[3, 2])];
    assert!(forward_sequence(&spec, &p, &s).is_err());
    assert!(forward_sequence(&spec, &p, &s[..1]).is_err());
    let wrong_dim = vec![Tensor::zeros(&[4, 2]), Tensor::zeros(&[4, 5])];
    assert!(forward_sequence(&spec, &p, &wrong_dim).is_err());
}

#[test]
fn batched_rows_match_single_sequences() {
    let dims = [3, 2];
    let spec = small_spec(CellKind::Lgrf, &dims, classifier());
    let mut r = rng(15);
    let p = ModelParams::random(&spec, 0.5, &mut r).unwrap();
    let a = streams(&dims, 4, &mut r);
    let b = streams(&dims, 4, &mut r);
    let steps: Vec<Vec<Tensor>> = (0..4)
        .map(|t| {
            (0..2)
                .map(|i| {
                    let d = dims[i];
                    let mut rows = a[i].row(t).to_vec();
                    rows.extend_from_slice(b[i].row(t));
                    Tensor::new(vec![2, d], rows).unwrap()
                })
                .collect()
        })
        .collect();
    let batch = forward_batch(&spec, &p, &steps, None, false).unwrap();
    let oa = forward_sequence(&spec, &p, &a).unwrap();
    let ob = forward_sequence(&spec, &p, &b).unwrap();
    for t in 0..4 {
        assert!(batch.outputs[t].row(0).iter().zip(oa.outputs.row(t)).all(|(x, y)| (x - y).abs() < EXACT));
        assert!(batch.outputs[t].row(1).iter().zip(ob.outputs.row(t)).all(|(x, y)| (x - y).abs() < EXACT));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    for kind in CellKind::ALL {
        let spec = small_spec(kind, &[3, 2, 4], Head::Regressor { outputs: 2 });
        let p = ModelParams::init(&spec, &mut rng(9)).unwrap();
        let mut ckpt = Checkpoint::new(spec, p);
        ckpt.extras.push(("opt.step".into(), Tensor::scalar(7.0)));
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), bytes);
    }
}

#[test]
fn reloaded_model_reproduces_outputs() {
    let dims = [3, 2];
    let spec = ModelSpec::new(CellKind::Egrf, dims.to_vec(), classifier());
    let p = ModelParams::init(&spec, &mut rng(9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.grfu");
    save_checkpoint(&Checkpoint::new(spec.clone(), p.clone()), &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let s = streams(&dims, 10, &mut rng(90));
    let a = forward_sequence(&spec, &p, &s).unwrap();
    let b = forward_sequence(&back.spec, &back.params, &s).unwrap();
    assert_eq!(a.outputs, b.outputs);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let err = decode_checkpoint(&[]).unwrap_err();
    assert!(err.to_string().contains("bad magic"), "{err}");

    let spec = small_spec(CellKind::Lrs, &[3, 2], classifier());
    let bytes = encode_checkpoint(&Checkpoint::new(spec.clone(), ModelParams::zeros(&spec).unwrap()));

    let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, FormatError::Truncated(ref f) if f == "head.b"), "{err}");

    let mut versioned = bytes.clone();
    versioned[4] = 9;
    assert!(matches!(
        decode_checkpoint(&versioned).unwrap_err(),
        FormatError::Version { found: 9, expected: 1 }
    ));

    // header declares d_h = 4, entries were written for d_h = 3
    let mut other = spec.clone();
    other.d_h = 4;
    let mut w = crate::codec::ByteWriter::new();
    write_spec(&mut w, &other);
    let mut r = crate::codec::ByteWriter::new();
    write_spec(&mut r, &spec);
    let header = 8;
    let mut reshaped = bytes[..header].to_vec();
    reshaped.extend_from_slice(w.as_slice());
    reshaped.extend_from_slice(&bytes[header + r.len()..]);
    let err = decode_checkpoint(&reshaped).unwrap_err();
    assert!(
        matches!(err, FormatError::Shape { ref field, .. } if field == "core0.W"),
        "{err}"
    );

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode_checkpoint(&trailing).is_err());
}
