import math

import numpy as np
import pytest

from sais.experiments import PartSetup, TransferCase, pose_report, top_ring
from sais.lie import rotation_about_z, translation
from sais.shapes import DEFAULT_MUG, make_bowl, make_mug


def test_top_ring_of_mug_ignores_handle():
    p = DEFAULT_MUG
    cloud = make_mug(**p, resolution=60).sample_surface(20000, np.random.default_rng(0))
    centre, radius, height = top_ring(cloud)
    # the handle pulls the full centroid sideways but not the rim's
    assert abs(cloud.mean(axis=0)[0]) > 0.01
    assert np.allclose(centre[:2], 0, atol=0.005)
    assert radius == pytest.approx(p["body_diameter"] / 2 - p["wall_thickness"] / 2, abs=0.01)
    assert height == pytest.approx(p["body_height"], abs=0.01)


def test_top_ring_follows_rigid_motion():
    cloud = make_bowl(resolution=40).sample_surface(5000, np.random.default_rng(1))
    pose = translation([0.3, -0.2, 0.1]) @ rotation_about_z(0.7)
    c0, r0, h0 = top_ring(cloud)
    c1, r1, h1 = top_ring(pose.apply(cloud))
    assert np.allclose(c1, pose.apply(c0), atol=1e-9)
    assert r1 == pytest.approx(r0, abs=1e-9) and h1 == pytest.approx(h0, abs=1e-9)


def test_part_setup_validation():
    with pytest.raises(ValueError):
        PartSetup("spout")


def test_case_json_and_report():
    miss = TransferCase("learned", 40.0, "m", math.inf, math.inf, False, math.inf)
    assert miss.to_json()["translation_error"] is None
    hit = TransferCase("learned", 40.0, "n", 0.01, 2.0, True, 0.001)
    cyl = TransferCase("learned", 0.0, "c", math.nan, math.nan, False, math.inf)
    rows = pose_report([miss, hit, cyl]).precision(0.05)
    row = next(r for r in rows if r["method"] == "learned" and r["perturbation_deg"] == 40.0)
    assert row["cases"] == 2 and row["success_rate"] == 0.5
