use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# small benchmark
height = 24
width = 32
frames_per_domain = 40
domains_per_distribution = 2
eval_every = 20
checkpoint_every = 25
pretrain_epochs = 1
";

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lifelong-depth")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn full_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("small.cfg");
    fs::write(&config, SMALL).unwrap();
    let p = |s: &str| root.join(s).display().to_string();
    let c = config.display().to_string();

    ok(&["pretrain", "--config", &c, "--seed", "3", "--out", &p("pre")]);
    assert!(root.join("pre/state.bin").exists());
    assert!(fs::read_to_string(root.join("pre/manifest.txt")).unwrap().contains("height = 24  # deviation"));

    for m in ["ft", "prop"] {
        let s = ok(&["online", "--config", &c, "--seed", "3", "--method", m, "--pretrained", &p("pre"), "--out", &p(m)]);
        assert!(s.starts_with("finished after 35 online steps"), "{s}");
    }
    assert_eq!(
        header(&root.join("prop/trace.csv")),
        "step,source,domain,loss,reg,total,mu,var,distance,boundary,stored,buffer"
    );
    assert!(header(&root.join("prop/report.csv")).starts_with("step,current_domain,current_dist_rmse,current_dist_abs_rel"));
    assert_eq!(
        header(&root.join("prop/domains.csv")),
        "step,domain,distribution,rmse,abs_rel,sq_rel,log_rmse,delta_1,delta_2,delta_3"
    );

    let s = ok(&["eval", "--config", &c, "--checkpoint", &p("prop/final"), "--out", &p("eval")]);
    assert!(s.contains("cross distribution: AbsRel"));
    assert_eq!(fs::read_to_string(root.join("eval/eval.csv")).unwrap().lines().count(), 2);

    ok(&["report", "--out", &p("rep"), &p("ft"), &p("prop")]);
    assert_eq!(header(&root.join("rep/summary.csv")), "method,category,metric,mean,sd,n");
    assert_eq!(header(&root.join("rep/curves.csv")), "method,seed,step,current_rmse_norm,cross_rmse_norm");
    assert!(root.join("rep/summary.md").exists());
}

fn fails_with_one_line(args: &[&str]) -> String {
    let out = cli(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    lines[0].to_string()
}

#[test]
fn errors_are_one_line_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "height = 24\nlearning_rate = 3\nfoo = 1\n").unwrap();
    let out = dir.path().join("o").display().to_string();
    let msg = fails_with_one_line(&["pretrain", "--config", &bad.display().to_string(), "--out", &out]);
    assert!(msg.contains("learning_rate") && msg.contains("foo"), "{msg}");

    let msg = fails_with_one_line(&["online", "--out", &out]);
    assert!(msg.contains("pretrain"), "{msg}");

    let msg = fails_with_one_line(&["pretrain", "--method", "sgd", "--out", &out]);
    assert!(msg.contains("sgd"), "{msg}");
}
