"""Smoke test for the pyrichbll extension module.

Build first, e.g. `maturin develop -m crates/python/Cargo.toml`, or
`cargo build --release -p richbll-python --features extension-module` and copy
`target/release/libpyrichbll.so` to `pyrichbll.so` somewhere on PYTHONPATH.
"""

import json
import math
import random
import sys
import tempfile
from pathlib import Path

import numpy as np

import pyrichbll as rb


def kernel_space_cov(phi_r, phi_t, btb, noise_var):
    k_xx = phi_r @ btb @ phi_r.T
    k_xs = phi_r @ btb @ phi_t.T
    k_ss = phi_t @ btb @ phi_t.T
    return k_ss - k_xs.T @ np.linalg.solve(k_xx + noise_var * np.eye(len(phi_r)), k_xs)


def main():
    rng = random.Random(0)
    x = [[rng.uniform(-2, 2), rng.uniform(-2, 2)] for _ in range(80)]
    y = [[math.sin(a) + 0.5 * b + rng.gauss(0, 0.1)] for a, b in x]
    x_test = [[rng.uniform(-4, 4), rng.uniform(-4, 4)] for _ in range(10)]

    net = rb.Backbone(2, [16, 16], seed=1)
    losses = net.fit(x, y, epochs=60, learning_rate=3e-3)
    assert losses[-1] < losses[0], losses
    print(f"trained: m={net.m} r={net.r} loss {losses[0]:.3f} -> {losses[-1]:.3f}")

    phi_r = net.last_layer_features(x)
    phi_t = net.last_layer_features(x_test)
    t = rb.RichTransform.fit(net, x)
    noise = 0.05
    rich = rb.Posterior.fit(phi_r, noise, transform=t)
    bll = rb.Posterior.fit(phi_r, noise)

    s_rich = np.array(rich.predictive_cov(phi_t))
    ref = kernel_space_cov(np.array(phi_r), np.array(phi_t), np.array(t.gram_btb), noise)
    gap = np.linalg.norm(s_rich - ref) / np.linalg.norm(ref)
    assert gap < 1e-6, gap
    print(f"weight-space vs kernel-space gap {gap:.2e}")

    diff = s_rich - np.array(bll.predictive_cov(phi_t))
    assert np.linalg.eigvalsh((diff + diff.T) / 2).min() > -1e-8
    print("rich covariance dominates the last-layer covariance")

    l = np.array(t.l)
    assert np.allclose(l @ l.T, np.array(t.gram_btb), atol=1e-8)

    v = rb.posterior_variances(net, x, x_test, variant="rich-sub", noise_var=noise, ratio=0.5, seed=3)
    assert len(v) == len(x_test) and min(v) >= 0
    print(f"rich-sub variances: {np.round(v, 4).tolist()}")

    with tempfile.TemporaryDirectory() as d:
        net.save(str(Path(d) / "model.json"))
        t.save(str(Path(d) / "transform.json"))
        back = rb.Backbone.load(str(Path(d) / "model.json"))
        assert back.predict(x_test) == net.predict(x_test)
        assert rb.RichTransform.load(str(Path(d) / "transform.json")).l == t.l

    try:
        rb.Posterior.fit(phi_r, -1.0)
    except ValueError as e:
        print(f"rejected bad noise variance: {e}")
    else:
        raise AssertionError("negative noise variance accepted")

    ok, report = rb.verify(seed=3)
    gates = json.loads(report)["gates"]
    print(f"verify: {sum(g['passed'] for g in gates)}/{len(gates)} gates passed, hard gates ok = {ok}")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
