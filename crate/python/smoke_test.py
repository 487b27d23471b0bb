"""Smoke test for the pyprivpf extension.

Build first with `cargo build --release -p pyprivpf`, then run
`python3 python/smoke_test.py`. The script loads the module from
target/release unless it is already importable (e.g. installed via maturin).
"""

import importlib.util
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        import pyprivpf

        return pyprivpf
    except ImportError:
        pass
    lib = os.path.join(ROOT, "target", "release", "libpyprivpf.so")
    if not os.path.exists(lib):
        sys.exit(f"{lib} not found; run `cargo build --release -p pyprivpf`")
    tmp = tempfile.mkdtemp()
    dst = os.path.join(tmp, "pyprivpf.so")
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("pyprivpf", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    pf = load_module()

    feeder = pf.Feeder.radial(15, 1)
    assert feeder.n_buses == 15
    profile = pf.Profile.generate(14, 192, 15, 2, "winter")
    assert profile.bus_ids == feeder.load_bus_ids()
    v = feeder.load_voltages(profile)
    assert len(v) == 192 and len(v[0]) == 14
    assert all(0.8 < x <= 1.0 for row in v for x in row)

    masked = profile.randomize(seed=4)
    assert all(0.4 < x < 1.6 for row in masked.p for x in row)
    assert abs(pf.lrs_transform(0.0, 2.0, 0.1) - 0.1) < 1e-12

    group = pf.Group("toy-modp", 3)
    c = group.commit("5", "17")
    for b in (0, 1):
        s = group.respond("17", "5", b)
        assert group.verify(c, s, b, "5")
        assert not group.verify(c, s, b, "6")

    collected, rounds, secs = pf.collect_voltages(v[:48], group, dim=8, k=2, seed=6)
    assert collected == v[:48], "collection must be lossless"
    assert all(1 <= r <= 56 for r in rounds)

    x = masked.features()
    model = pf.Estimator(14, "ann-0", seed=7)
    curve = model.fit(x, v, epochs=5, lr=1e-4)
    assert len(curve) == 5 and curve[-1][0] < curve[0][0]
    est = model.predict(x[:4])
    assert len(est) == 4 and len(est[0]) == 14
    updated = model.updated(x[:64], v[:64], frozen=[2, 3], epochs=3)
    assert updated.to_bytes() != model.to_bytes()

    summer = feeder.load_voltages(pf.Profile.generate(14, 192, 15, 9, "summer"))
    _, tt_same = pf.drift_indicator(v, v, windows=1)
    _, tt_other = pf.drift_indicator(v, summer, windows=4)
    assert tt_same == 0.0 and tt_other > 0.0
    assert pf.wasserstein([0.0, 1.0], [1.0, 2.0]) == 1.0

    assert "[feeder]" in pf.Pipeline.preset_toml("desk-15min")

    print(f"pyprivpf smoke test passed (collection {secs:.3f} s, max rounds {max(rounds)})")


if __name__ == "__main__":
    main()
