use lifelong_depth::runner::{pretrain, RunConfig};

/// Two epochs on the default benchmark lower the task loss by at least 30%
/// between step 10 and the end (50-step means at both ends).
#[test]
fn default_pretraining_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&RunConfig::default(), dir.path()).unwrap();
    let l = &out.losses;
    let w = 50;
    assert!(l.len() > 10 + 2 * w);
    let start = l[10..10 + w].iter().sum::<f64>() / w as f64;
    let end = l[l.len() - w..].iter().sum::<f64>() / w as f64;
    let drop = 1.0 - end / start;
    println!("loss {start:.4} -> {end:.4}, decrease {:.1}%", 100.0 * drop);
    assert!(drop >= 0.3, "decrease {drop}");
}
