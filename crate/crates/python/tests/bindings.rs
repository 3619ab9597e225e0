use lifelong_depth_py::{compute_metrics, is_boundary, reg_loss, total_loss, warp_sfm, LossStats, ReplayBuffer, RunConfig};

#[test]
fn detector_and_regularizer() {
    let s = LossStats::with_moments(1.0, 0.25, 0.1);
    assert!((s.mahalanobis(2.0) - 4.0).abs() < 1e-12);
    assert!(is_boundary(1.5) && !is_boundary(1.0));
    let (v, g) = reg_loss(vec![1.0, 2.0], vec![0.5, -1.0]).unwrap();
    assert!((v - 3.25).abs() < 1e-6);
    assert_eq!(g, [0.5, 1.0]);
    assert!((total_loss(1.0, 2.0, 0.5, 0.1).unwrap() - 1.1).abs() < 1e-6);
}

#[test]
fn replay_admits_only_above_one() {
    let mut b = ReplayBuffer::new(3, 4).unwrap();
    let img = (1, 1, 1, vec![0.5]);
    let stored: Vec<bool> =
        [1.0, 1.01, 0.2, 9.0].iter().enumerate().map(|(i, &d)| b.maybe_store(img.clone(), img.clone(), d, i as u64, String::new(), "stereo").unwrap()).collect();
    assert_eq!(stored, [false, true, false, true]);
    assert_eq!(b.entries().len(), 2);
    assert_eq!(b.capacity(), 3);
    assert!(b.maybe_store(img.clone(), img, 2.0, 9, String::new(), "video").is_err());
}

#[test]
fn identity_camera_and_metrics() {
    let (h, w) = (4, 5);
    let data: Vec<f32> = (0..h * w).map(|i| i as f32 / 20.0).collect();
    let cam = vec![3.0, 3.0, 2.0, 1.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let (rec, mask) = warp_sfm((1, h, w, data.clone()), (h, w, vec![4.0; h * w]), cam).unwrap();
    assert!(rec.3.iter().zip(&data).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(mask.2.iter().all(|&m| m == 1.0));
    let m = compute_metrics((1, 2, vec![2.0, 4.0]), (1, 2, vec![1.0, 2.0]), None, "median").unwrap();
    assert!(m["abs_rel"].abs() < 1e-9);
    assert!(compute_metrics((1, 1, vec![1.0]), (1, 1, vec![1.0]), None, "mean").is_err());
}

#[test]
fn config_keys() {
    let mut c = RunConfig::new(Some("height = 24\n")).unwrap();
    assert_eq!(c.get("height").unwrap(), "24");
    c.set("gamma", "0.5").unwrap();
    assert_eq!(c.get("gamma").unwrap(), "0.5");
    assert!(c.set("nope", "1").is_err());
    assert!(RunConfig::new(Some("nope = 1\n")).is_err());
}
