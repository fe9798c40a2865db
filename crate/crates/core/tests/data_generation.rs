use calibreg::data::{
    blob_means, make_blobs, make_ood, make_two_moons, split, true_posterior, Dataset, DatasetDescriptor,
    OodMode, SplitSpec,
};

#[test]
fn argmax_label_frequency_matches_its_posterior() {
    // Draw batches until 10^5 points have an argmax posterior in the window.
    let (lo, hi) = (0.79, 0.81);
    let (mut hits, mut total, mut psum) = (0usize, 0usize, 0.0);
    let mut seed = 0;
    while total < 100_000 {
        let ds = make_blobs(10, 200_000, 2, 0.3, 4)
            .unwrap()
            .descriptor
            .resampled(200_000, seed)
            .generate()
            .unwrap();
        seed += 1;
        for (x, &y) in ds.inputs.iter_rows().zip(&ds.labels) {
            let p = true_posterior(&ds.descriptor, x).unwrap();
            let top = calibreg::network::argmax(&p);
            if (lo..=hi).contains(&p[top]) && total < 100_000 {
                total += 1;
                psum += p[top];
                hits += usize::from(y == top);
            }
        }
    }
    let freq = hits as f64 / total as f64;
    assert!((freq - 0.80).abs() < 0.01, "{freq}");
    assert!((freq - psum / total as f64).abs() < 0.01);
}

#[test]
fn posteriors_are_distributions() {
    let ds = make_blobs(5, 200, 6, 0.2, 1).unwrap();
    for x in ds.inputs.iter_rows() {
        let p = true_posterior(&ds.descriptor, x).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ood_points_stay_away_from_the_support() {
    let desc = DatasetDescriptor::Blobs {
        k: 10,
        n: 100,
        d: 8,
        spread: 0.215,
        seed: 3,
        sample_seed: None,
    };
    let means = blob_means(&desc).unwrap();
    for mode in [OodMode::ShiftedMean, OodMode::UniformBox, OodMode::Ring] {
        let ood = make_ood(&desc, 500, mode, 6.0, 1).unwrap();
        assert_eq!(ood.shape(), (500, 8));
        for x in ood.iter_rows() {
            let nearest = means
                .iter()
                .map(|m| m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest >= 5.0 * 0.215 - 1e-12, "{mode:?}: {nearest}");
        }
    }
}

#[test]
fn two_moons_are_balanced_and_noise_free_on_request() {
    let ds = make_two_moons(201, 0.0, 5).unwrap();
    assert_eq!(ds.len(), 201);
    let ones = ds.labels.iter().filter(|&&y| y == 1).count();
    assert!(ones == 100 || ones == 101);
    for (x, &y) in ds.inputs.iter_rows().zip(&ds.labels) {
        let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
        let r = ((x[0] - cx).powi(2) + (x[1] - cy).powi(2)).sqrt();
        assert!((r - 1.0).abs() < 1e-12);
    }
}

#[test]
fn split_is_a_seeded_partition() {
    let ds = make_blobs(3, 1000, 2, 0.3, 0).unwrap();
    let spec = SplitSpec {
        seed: 8,
        ..SplitSpec::default()
    };
    let (a, b, c) = split(&ds, &spec).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (800, 100, 100));
    let mut rows: Vec<Vec<u64>> = [&a, &b, &c]
        .iter()
        .flat_map(|d| d.inputs.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()))
        .collect();
    rows.sort();
    rows.dedup();
    assert_eq!(rows.len(), 1000);
    let again = split(&ds, &spec).unwrap();
    assert_eq!(again.0.inputs, a.inputs);
}

#[test]
fn csv_round_trip_is_exact() {
    let ds = make_blobs(4, 50, 3, 0.2, 2).unwrap();
    let back = Dataset::from_csv(&ds.to_csv()).unwrap();
    assert_eq!(back.inputs, ds.inputs);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.descriptor, ds.descriptor);
    assert!(Dataset::from_csv("x0,label\n1,0\n").is_err());
}

#[test]
fn resampled_sets_share_the_class_means() {
    let ds = make_blobs(6, 100, 4, 0.2, 11).unwrap();
    let fresh = ds.descriptor.resampled(300, 99);
    assert_eq!(blob_means(&fresh).unwrap(), blob_means(&ds.descriptor).unwrap());
    assert_ne!(fresh.generate().unwrap().inputs.row(0), ds.inputs.row(0));
}
