"""Smoke test for the lifelong_depth_py extension.

Build first: pip install --no-build-isolation -e crates/python
"""
import math
import random
import sys
import tempfile
from pathlib import Path

import lifelong_depth_py as ld


def close(a, b, tol=1e-6):
    return abs(a - b) <= tol * max(1.0, abs(b))


def check(name, ok):
    print(f"{'ok  ' if ok else 'FAIL'} {name}")
    return ok


def main():
    results = []

    s = ld.LossStats.with_moments(1.0, 0.25)
    results.append(check("mahalanobis", close(s.mahalanobis(2.0), 4.0)))
    results.append(check("boundary threshold", ld.is_boundary(1.5) and not ld.is_boundary(1.0)))
    fresh = ld.LossStats()
    for _ in range(20):
        fresh.observe(1.0)
    results.append(check("warmup count", fresh.count == 20))

    buf = ld.ReplayBuffer(capacity=4, seed=1)
    img = (1, 1, 1, [0.5])
    stored = [buf.maybe_store(img, img, d, i, f"d{i}") for i, d in enumerate([0.5, 1.0, 1.5, 2, 3, 4, 5])]
    results.append(check("replay admission", stored == [False, False, True, True, True, True, True] and len(buf) == 4))
    sources = [buf.choose_source() for _ in range(2000)]
    results.append(check("fair coin", abs(sources.count("replay") / 2000 - 0.5) < 0.05))

    val, grad = ld.reg_loss([1.0, 2.0], [0.5, -1.0])
    results.append(check("reg loss", close(val, 0.5 * 0.5 + 1.0 * 3.0, 1e-5) and close(grad[0], 0.5, 1e-5) and close(grad[1], 1.0, 1e-5)))
    results.append(check("total loss", close(ld.total_loss(1.0, 2.0, 0.5, 0.1), 1.1, 1e-6)))

    h, w = 6, 8
    rng = random.Random(0)
    left = (1, h, w, [rng.random() for _ in range(h * w)])
    rec, mask = ld.warp_stereo(left, (h, w, [0.0] * (h * w)))
    results.append(check("zero disparity warp", max(abs(a - b) for a, b in zip(rec[3], left[3])) < 1e-6 and all(v == 1.0 for v in mask[2])))
    cam = [4.0, 4.0, 4.0, 3.0, 0, 0, 0, 0, 0, 0]
    rec, mask = ld.warp_sfm(left, (h, w, [5.0] * (h * w)), cam)
    results.append(check("identity sfm warp", max(abs(a - b) for a, b in zip(rec[3], left[3])) < 1e-6))

    gt = (1, 2, [1.0, 2.0])
    m = ld.compute_metrics((1, 2, [2.0, 4.0]), gt)
    results.append(check("abs rel", close(m["abs_rel"], 1.0)))
    m = ld.compute_metrics((1, 2, [2.0, 4.0]), gt, align="median")
    results.append(check("median alignment", close(m["abs_rel"], 0.0, 1e-6)))

    (shape, out), grads = ld.value_and_grad("square", [([3], [1.0, -2.0, 0.5])])
    results.append(check("autodiff square", out == [1.0, 4.0, 0.25] and grads[0] == [2.0, -4.0, 1.0]))

    cfg = ld.RunConfig("height = 24\nwidth = 32\nframes_per_domain = 40\ndomains_per_distribution = 2\n"
                       "eval_every = 20\ncheckpoint_every = 25\npretrain_epochs = 1\n")
    sample = ld.render(cfg, 0, 3)
    c, fh, fw, _ = sample["frames"][0]
    results.append(check("render shape", (c, fh, fw) == (3, 24, 32) and ld.domain_count(cfg) > 0))

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        losses = ld.pretrain(cfg, root / "pre")
        results.append(check("pretrain", len(losses) > 0 and all(math.isfinite(x) for x in losses)))
        cfg.set("pretrain_dir", str(root / "pre"))
        cfg.set("method", "prop")
        steps, done = ld.online(cfg, root / "prop")
        results.append(check("online", done and steps > 0))
        cross = ld.evaluate(cfg, root / "prop" / "final", root / "eval")
        results.append(check("evaluate", math.isfinite(cross["abs_rel"])))
        results.append(check("report", ld.report([root / "prop"], root / "rep") > 0))

    try:
        cfg.set("no_such_key", "1")
        results.append(check("unknown key rejected", False))
    except ValueError:
        results.append(check("unknown key rejected", True))

    print(f"{sum(results)} of {len(results)} checks pass")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
