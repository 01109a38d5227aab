"""Smoke test for the nbv_refine extension module.

Build and install first:  maturin develop -m crates/python/Cargo.toml
"""

import json
import math

import nbv_refine as nr


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    car = nr.Box(10.0, 2.0, 0.8, 1.9, 4.5, 1.6, 0.3)
    assert close(car.volume(), 1.9 * 4.5 * 1.6)
    assert close(nr.iou_3d(car, car), 1.0)
    assert close(nr.bev_iou(car, car), 1.0)
    shifted = nr.Box(10.0 + 4.5, 2.0, 0.8, 1.9, 4.5, 1.6, 0.0)
    assert nr.iou_3d(nr.Box(10.0, 2.0, 0.8, 1.9, 4.5, 1.6, 0.0), shifted) < 1e-9

    corners = car.corners()
    nbv = nr.nbv_transform(corners, car)
    assert all(close(abs(v), 1.0) for p in nbv for v in p)
    back = nr.nbv_inverse(nbv, car)
    assert all(close(a, b, 1e-9) for p, q in zip(back, corners) for a, b in zip(p, q))
    assert len(nr.nbv_jacobian(corners, car)[0]) == 3

    try:
        nr.Box(0, 0, 0, -1.0, 1, 1, 0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative size accepted")

    scene = nr.generate_scene(7)
    assert scene["boxes"], "scene has objects"
    print(f"scene: {len(scene['points'])} points, {len(scene['boxes'])} objects, "
          f"{len(scene['detections'])} detections")

    model = nr.Denoiser.untrained(0)
    assert all(v == 0.0 for p in model.forward([[0.1, 0.2, 0.3]], 1.0) for v in p)

    det, conf = scene["detections"][0]
    refined, status, trace = nr.refine(model, scene["points"], det, conf)
    assert status in ("refined", "empty_context")
    assert all(close(a, b) for a, b in zip(refined.to_list(), det.to_list())), "zero model is a no-op"
    assert trace and len(trace[0]) == 9

    config = json.dumps({"eval": {"ranges": [{"min": 0.0, "max": 80.0}]}})
    metrics = nr.evaluate([(scene["boxes"], scene["detections"])], config=config,
                          sensor_origin=scene["sensor_origin"])
    perfect = nr.evaluate([(scene["boxes"], [(b, 1.0) for b in scene["boxes"]])])
    assert close(perfect["ap_3d@0.7/all"], 1.0)
    assert not math.isnan(metrics["ap_3d@0.5/all"])
    print("detections ap_3d@0.5/all = %.3f" % metrics["ap_3d@0.5/all"])
    print("smoke test passed")


if __name__ == "__main__":
    main()
