"""Smoke test of the padnet_py extension module.

Build and install first:  pip install ./crates/py --no-build-isolation
"""

import math
import os
import tempfile

import padnet_py as pn


def main():
    tiny = pn.NetworkConfig.tiny(3)
    assert tiny.distill_variant == "C"
    assert pn.NetworkConfig.from_json(tiny.to_json()).digest() == tiny.digest()

    scene = pn.generate_scene(7, height=16, width=16, num_classes=3)
    assert len(scene.image()) == 3 * 16 * 16
    assert set(scene.labels()) <= {0, 1, 2}
    normals = scene.normals()
    assert all(math.isfinite(v) for v in normals)

    model = pn.Model(tiny, seed=1)
    depth, labels = model.predict(scene)
    assert len(depth) == 16 * 16 and len(labels) == 16 * 16

    m = pn.depth_metrics([2.0], [1.0], [1.0])
    assert m["rel"] == 1.0 and abs(m["log10"] - 0.301030) < 1e-6
    assert pn.depth_metrics([2.0], [1.0], [0.0]) is None
    p = pn.parsing_metrics([0, 1, 1, 0], [0, 1, 0, 0], 2)
    assert abs(p["pixel_accuracy"] - 0.75) < 1e-12

    samples = [pn.generate_scene(s, height=16, width=16, num_classes=3) for s in range(4)]
    trained, curve = pn.Model.train(tiny, samples, seed=0, phase1_epochs=1, phase2_epochs=2)
    assert len(curve) == 6 and all(math.isfinite(c[2]) for c in curve)
    metrics = trained.evaluate(samples)
    assert 0.0 <= metrics["pixel_accuracy"] <= 1.0 and metrics["rel"] > 0.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.padc")
        trained.save(path)
        again = pn.Model.load(path, tiny)
        assert again.parameter_count == trained.parameter_count

    passed, worst, _table = pn.gradcheck(tiny, seed=0)
    print(f"gradcheck passed={passed} max_rel_error={worst:.2e}")
    assert passed
    print("smoke test ok")


if __name__ == "__main__":
    main()
