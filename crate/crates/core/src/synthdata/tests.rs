use super::*;
use crate::codec::FormatError;

fn small_classification(seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        sequences: 12,
        ..ScenarioSpec::classification(seed)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(means: &[Vec<f64>], x: &[f64]) -> usize {
    (0..means.len())
        .min_by(|&a, &b| squared_distance(&means[a], x).total_cmp(&squared_distance(&means[b], x)))
        .unwrap()
}

/// Plug-in mutual information, in bits, of two discrete sequences.
fn mutual_information(xs: &[usize], ys: &[usize]) -> f64 {
    let nx = xs.iter().max().unwrap() + 1;
    let ny = ys.iter().max().unwrap() + 1;
    let mut joint = vec![vec![0.0; ny]; nx];
    for (&x, &y) in xs.iter().zip(ys) {
        joint[x][y] += 1.0;
    }
    let n = xs.len() as f64;
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let py: Vec<f64> = (0..ny).map(|y| joint.iter().map(|r| r[y]).sum::<f64>() / n).collect();
    let mut mi = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            let p = joint[x][y] / n;
            if p > 0.0 {
                mi += p * (p / (px[x] * py[y])).log2();
            }
        }
    }
    mi
}

#[test]
fn generation_is_deterministic_and_order_free() {
    let spec = small_classification(3);
    let a = generate(&spec, Parallelism::Auto).unwrap();
    let b = generate(&spec, Parallelism::Sequential).unwrap();
    assert_eq!(a, b);

    let tail = generate(&spec.split(5, 4), Parallelism::Auto).unwrap();
    assert_eq!(tail.sequences, a.sequences[5..9]);

    let other = generate(&small_classification(4), Parallelism::Auto).unwrap();
    assert_ne!(a.sequences, other.sequences);

    let r = ScenarioSpec { sequences: 5, ..ScenarioSpec::regression(1) };
    assert_eq!(generate(&r, Parallelism::Auto).unwrap(), generate(&r, Parallelism::Sequential).unwrap());
}

#[test]
fn noiseless_sensor_is_nearest_mean_separable() {
    let spec = ScenarioSpec {
        noise: 0.0,
        windows: Vec::new(),
        views: vec![LabelView::Full, LabelView::Block(2)],
        ..small_classification(5)
    };
    let data = generate(&spec, Parallelism::Auto).unwrap();
    let means = class_means(&spec);
    for seq in &data.sequences {
        let labels = seq.classes().unwrap();
        for t in 0..seq.len() {
            assert_eq!(nearest(&means[0], seq.sensors[0].row(t)), labels[t]);
        }
    }
}

#[test]
fn class_means_are_at_least_two_sigma_apart() {
    let spec = ScenarioSpec::classification(0);
    for (i, groups) in class_means(&spec).iter().enumerate() {
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                let dist = squared_distance(&groups[a], &groups[b]).sqrt();
                assert!(dist >= 2.0 * spec.noise, "sensor {i} groups {a},{b}: {dist}");
            }
        }
    }
}

#[test]
fn corrupted_frames_carry_no_label_information() {
    let spec = ScenarioSpec::classification(0);
    let data = generate(&spec, Parallelism::Auto).unwrap();
    let means = class_means(&spec);
    let (mut corrupt, mut clean) = ((vec![], vec![]), (vec![], vec![]));
    for seq in &data.sequences {
        let labels = seq.classes().unwrap();
        for t in 0..seq.len() {
            let guess = nearest(&means[1], seq.sensors[1].row(t));
            let bucket = if seq.regimes[t] & 0b10 != 0 { &mut corrupt } else { &mut clean };
            bucket.0.push(guess);
            bucket.1.push(labels[t]);
        }
    }
    let mi_corrupt = mutual_information(&corrupt.0, &corrupt.1);
    let mi_clean = mutual_information(&clean.0, &clean.1);
    assert!(mi_corrupt < 0.05, "{mi_corrupt}");
    assert!(mi_clean > 0.5, "{mi_clean}");
}

#[test]
fn regimes_match_windows() {
    let mut spec = small_classification(6);
    spec.windows.push(CorruptionWindow {
        sensor: 0,
        start: 50,
        end: 55,
        mode: CorruptionMode::Freeze,
    });
    let data = generate(&spec, Parallelism::Auto).unwrap();
    for seq in &data.sequences {
        for (t, &mask) in seq.regimes.iter().enumerate() {
            let frame = t + 1;
            let s1 = (31..=60).contains(&frame) || (81..=100).contains(&frame);
            let s0 = (50..=55).contains(&frame);
            assert_eq!(mask, (s0 as u32) | (s1 as u32) << 1, "frame {frame}");
        }
        // frozen frames repeat frame 49
        let s0 = &seq.sensors[0];
        for t in 49..55 {
            assert_eq!(s0.row(t), s0.row(48));
        }
    }
}

#[test]
fn bias_shift_adds_three_sigma() {
    let base = ScenarioSpec {
        windows: Vec::new(),
        ..small_classification(7)
    };
    let mut shifted = base.clone();
    shifted.windows = vec![CorruptionWindow {
        sensor: 0,
        start: 10,
        end: 12,
        mode: CorruptionMode::BiasShift,
    }];
    let a = generate(&base, Parallelism::Auto).unwrap();
    let b = generate(&shifted, Parallelism::Auto).unwrap();
    let (x, y) = (&a.sequences[0].sensors[0], &b.sequences[0].sensors[0]);
    for t in 0..x.shape()[0] {
        let delta = if (9..12).contains(&t) { 3.0 * base.noise } else { 0.0 };
        for (u, v) in x.row(t).iter().zip(y.row(t)) {
            assert!((v - u - delta).abs() < 1e-12);
        }
    }
}

#[test]
fn replaced_rays_read_as_a_straight_road() {
    let spec = ScenarioSpec {
        sequences: 20,
        ..ScenarioSpec::regression(4)
    };
    let data = generate(&spec, Parallelism::Auto).unwrap();
    let w = spec.windows[0];
    let straight = log_rays(0.0, spec.sensor_dims[0]);
    let mut residuals = Vec::new();
    for seq in &data.sequences {
        for t in w.start - 1..w.end {
            let row = seq.sensors[w.sensor].row(t);
            residuals.extend(row.iter().zip(&straight).map(|(r, s)| r.ln() - s));
        }
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let sd = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.02, "{mean}");
    assert!((sd - spec.noise).abs() < 0.02, "{sd}");
}

#[test]
fn straight_road_gives_zero_targets_and_symmetric_rays() {
    let spec = ScenarioSpec {
        drift: 0.0,
        noise: 0.0,
        windows: Vec::new(),
        sequences: 3,
        ..ScenarioSpec::regression(0)
    };
    let data = generate(&spec, Parallelism::Auto).unwrap();
    for seq in &data.sequences {
        assert!(seq.actions().unwrap().data().iter().all(|&v| v == 0.0));
        let rays = &seq.sensors[0];
        let n = rays.shape()[1];
        for t in 0..seq.len() {
            let row = rays.row(t);
            for j in 0..n {
                assert!((row[j] - row[n - 1 - j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn regression_values_stay_in_range() {
    let spec = ScenarioSpec { sequences: 20, ..ScenarioSpec::regression(2) };
    let data = generate(&spec, Parallelism::Auto).unwrap();
    let mut spread = 0.0f64;
    for seq in &data.sequences {
        let a = seq.actions().unwrap();
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
        spread = a.data().iter().fold(spread, |m, v| m.max(v.abs()));
        assert!(seq.sensors[0].data().iter().all(|&d| d > 0.0));
    }
    assert!(spread > 0.5, "targets barely move: {spread}");
}

/// Solves `A x = b` by Gauss-Jordan elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

#[test]
fn odometry_linearly_predicts_steering() {
    let spec = ScenarioSpec {
        noise: 0.0,
        windows: Vec::new(),
        ..ScenarioSpec::regression(0)
    };
    let data = generate(&spec, Parallelism::Auto).unwrap();
    let mut rows = Vec::new();
    for seq in &data.sequences {
        let odo = &seq.sensors[1];
        for t in 0..seq.len() {
            let mut x = vec![1.0];
            x.extend_from_slice(odo.row(t));
            rows.push((x, seq.actions().unwrap().data()[t]));
        }
    }
    let n = 4;
    let mut xtx = vec![vec![0.0; n]; n];
    let mut xty = vec![0.0; n];
    for (x, y) in &rows {
        for i in 0..n {
            xty[i] += x[i] * y;
            for j in 0..n {
                xtx[i][j] += x[i] * x[j];
            }
        }
    }
    // vx is constant, so it is collinear with the intercept
    for (i, row) in xtx.iter_mut().enumerate() {
        row[i] += 1e-9;
    }
    let w = solve(xtx, xty);
    let mse = rows
        .iter()
        .map(|(x, y)| (x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - y).powi(2))
        .sum::<f64>()
        / rows.len() as f64;
    assert!(mse < 0.01, "{mse}");
}

#[test]
fn dataset_round_trip_and_corruption() {
    let data = generate(&small_classification(8), Parallelism::Auto).unwrap();
    let bytes = encode_dataset(&data);
    assert_eq!(decode_dataset(&bytes).unwrap(), data);

    let reg = generate(&ScenarioSpec { sequences: 3, ..ScenarioSpec::regression(8) }, Parallelism::Auto).unwrap();
    let reg_bytes = encode_dataset(&reg);
    assert_eq!(decode_dataset(&reg_bytes).unwrap(), reg);

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode_dataset(&magic).unwrap_err().to_string().contains("bad magic"));

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x01;
    let err = decode_dataset(&flipped).unwrap_err();
    assert!(matches!(err, FormatError::Checksum { .. }));
    assert!(err.to_string().contains("checksum"));

    assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_dataset(&[]).is_err());
}

#[test]
fn rejects_invalid_scenarios() {
    let mut bad = small_classification(0);
    bad.windows[0].end = 500;
    assert!(generate(&bad, Parallelism::Auto).is_err());
    let mut bad = small_classification(0);
    bad.classes = 1;
    assert!(generate(&bad, Parallelism::Auto).is_err());
    let mut bad = ScenarioSpec::regression(0);
    bad.sensor_dims = vec![19, 3];
    assert!(generate(&bad, Parallelism::Auto).is_err());
}
