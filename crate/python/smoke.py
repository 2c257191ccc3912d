"""Smoke test for the pysdc extension.

Build and install first, for example:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/pysdc-*.whl
then run `python python/smoke.py`.
"""

import math
import os
import tempfile

import pysdc


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def flat(rows):
    return [v for row in rows for v in row]


def check_merge():
    parent = [[8.0]]
    fine = [[1.0, 2.0], [3.0, 4.0]]
    uniform = [[0.25, 0.25], [0.25, 0.25]]
    # Zero mask: the parent is split evenly, total preserved.
    merged = pysdc.merge_step(parent, fine, [[0.0, 0.0], [0.0, 0.0]], uniform)
    assert merged == [[2.0, 2.0], [2.0, 2.0]], merged
    # Full mask: the fine counts win.
    merged = pysdc.merge_step(parent, fine, [[1.0, 1.0], [1.0, 1.0]], uniform)
    assert merged == fine, merged

    u = pysdc.spatial_softmax2([[0.0, 1.0, 2.0, 2.0], [3.0, -1.0, 2.0, 2.0]])
    assert close(u[0][0] + u[0][1] + u[1][0] + u[1][1], 1.0)
    assert all(close(v, 0.25) for v in (u[0][2], u[0][3], u[1][2], u[1][3]))
    e = [math.exp(x) for x in (0.0, 1.0, 3.0, -1.0)]
    assert close(u[1][0], e[2] / sum(e))

    up = pysdc.gt_upsampling_map([[10.0, 0.0]], [[1.0, 2.0, 0.0, 0.0], [3.0, 4.0, 0.0, 0.0]])
    assert up == [[0.1, 0.2, 0.25, 0.25], [0.3, 0.4, 0.25, 0.25]], up


def check_ground_truth():
    d = pysdc.render_density([(32.0, 32.0), (10.5, 50.0)], 64, 64, sigma=2.0)
    assert close(sum(flat(d)), 2.0, 1e-9)
    patches = pysdc.patch_counts(d, 32)
    assert close(sum(flat(patches)), 2.0, 1e-9)

    part = pysdc.Partition(10.0)
    assert part.num_classes == 22, part
    assert part.count_to_class(0.0) == 0
    assert part.class_to_count(part.count_to_class(3.3)) == 3.25
    assert part.class_to_count(part.num_classes - 1) == 10.0
    two = pysdc.Partition(10.0, "two-linear")
    assert two.num_classes == part.num_classes + 9


def check_theory():
    assert pysdc.min_divisions(136.5, 22.0) == 2
    assert pysdc.min_divisions(22.0, 22.0) == 0
    # Two adjacent 6s share a 2×2 block holding 12 > 10, so only the finest
    # level of the 4×4 grid fits; the smallest window reaching 10 has side 2.
    fine = [[0.0] * 4 for _ in range(4)]
    fine[1][2] = fine[1][3] = 6.0
    assert pysdc.min_region_side(fine, 10.0) == 2
    assert pysdc.brute_force_min_divisions(fine, 10.0) == 2
    assert pysdc.max_divisions(4.0, 4.0, 2.0) == 2
    assert pysdc.max_divisions(4.0, 4.0, 1.0) == 3

    r = pysdc.verify_split_bound(0.01, 20.0, [10.0, 10.0], 10.0, trials=20000, seed=3)
    assert r["holds"], r
    assert abs(r["emp_closed"] - math.sqrt(2.0)) < 4 * r["se_closed"], r
    assert abs(r["emp_open"] - 4.0) < 4 * r["se_open"], r

    edges = [0.0, 1.0, 2.0]
    assert pysdc.js_divergence(edges, [0.5, 0.5], [0.5, 0.5]) == 0.0
    assert close(pysdc.js_divergence(edges, [1.0, 0.0], [0.0, 1.0]), math.log(2.0))


def check_metrics():
    assert pysdc.mae([1.0, 4.0], [2.0, 2.0]) == 1.5
    assert close(pysdc.mse([1.0, 4.0], [2.0, 2.0]), math.sqrt(2.5))
    assert close(pysdc.rmae([1.0, 4.0], [2.0, 2.0]), 0.75)
    p = [[1.0, 0.0], [0.0, 0.0]]
    g = [[0.0, 1.0], [0.0, 0.0]]
    assert pysdc.game(p, g, 0) == 0.0
    assert pysdc.game(p, g, 1) == 2.0


def check_errors():
    try:
        pysdc.merge_step([[1.0]], [[1.0]], [[0.0]], [[1.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched shapes accepted")
    try:
        pysdc.Model.load("/nonexistent/model.sdc")
    except OSError:
        pass
    else:
        raise AssertionError("missing checkpoint accepted")


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        manifest = pysdc.gen_dataset(os.path.join(tmp, "data"), n_train=6, n_test=4, seed=5)
        assert os.path.exists(manifest)
        model, curve = pysdc.Model.fit(manifest, mode="reg", stages=1, epochs=5)
        assert len(curve) == 5 and all(math.isfinite(v) for v in curve)
        assert model.stages == 1 and model.mode == "reg"

        image = [[0.0] * 128 for _ in range(128)]
        out = model.forward(image)
        assert len(out["divs"]) == 2
        assert close(out["count"], sum(flat(out["divs"][-1])))

        path = os.path.join(tmp, "model.sdc")
        model.save(path)
        again = pysdc.Model.load(path)
        assert again.forward(image) == out

        report = model.evaluate(manifest, split="test")
        assert report["images"] == 4
        assert report["mse"] >= report["mae"] * (1 - 1e-12)
        assert sum(b["n"] for b in report["bins"]) == 4 * 16


def main():
    for check in (check_merge, check_ground_truth, check_theory, check_metrics, check_errors, check_pipeline):
        check()
        print(f"{check.__name__}: ok")


if __name__ == "__main__":
    main()
