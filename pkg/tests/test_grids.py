import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from se3gconv import grids
from se3gconv import rotations as rot

PI = np.pi


def repulsion(n, seed=0, **kw):
    return grids.generate_uniform_grid(n, np.random.default_rng(seed), grids.RepulsionOptions(**kw), seed=seed)


def test_single_element_grid():
    g = repulsion(1)
    assert g.resolution == 1
    assert g.uniformity == PI


def test_zero_elements_rejected():
    with pytest.raises(ValueError):
        repulsion(0)


def test_two_points_reach_diameter():
    assert repulsion(2).uniformity >= PI - 0.05


def test_dense_random_search_does_not_beat_pair_optimum():
    # oracle: the best of many random pairs never exceeds what repulsion found by more than the slack
    q = rot.haar_sample(np.random.default_rng(9), (20_000, 2))
    best = rot.geodesic_distance(q[:, 0], q[:, 1]).max()
    assert best <= PI + 1e-12
    assert repulsion(2).uniformity >= best - 0.05


def test_24_points_approach_cube_group_packing():
    assert repulsion(24).uniformity >= 0.9 * PI / 2


@pytest.mark.parametrize("n", [4, 8, 16])
def test_repulsion_never_worse_than_its_start(n):
    for seed in range(3):
        start = grids.min_pairwise_distance(rot.haar_sample(np.random.default_rng(seed), n))
        assert repulsion(n, seed).uniformity >= start


def test_repulsion_is_deterministic():
    a, b = repulsion(8, 3), repulsion(8, 3)
    assert a == b
    assert a.elements.tobytes() == b.elements.tobytes()


def test_min_distance_non_increasing_in_n():
    mins = [repulsion(n, 1).uniformity for n in (2, 4, 8, 16, 32)]
    assert all(b <= a for a, b in zip(mins, mins[1:]))


def test_grid_elements_are_canonical_unit_quaternions():
    g = repulsion(16, 2)
    assert np.allclose(np.linalg.norm(g.elements, axis=1), 1.0, atol=1e-12)
    assert np.all(g.elements[:, 0] >= 0)


def test_randomize_with_identity_is_a_no_op():
    g = repulsion(8)
    assert np.allclose(grids.rotate_grid(g, rot.IDENTITY).elements, g.elements, atol=1e-15)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_randomize_is_an_isometry(seed):
    g = repulsion(8, 4)
    r = grids.randomize_grid(g, np.random.default_rng(seed))
    assert r.kind == g.kind and r.resolution == g.resolution
    assert np.abs(r.distance_matrix() - g.distance_matrix()).max() < 1e-12
    assert abs(grids.min_pairwise_distance(r.elements) - g.uniformity) < 1e-12


def test_randomized_v4_keeps_mutual_distance_pi():
    r = grids.randomize_grid(grids.finite_subgroup("V4"), np.random.default_rng(0))
    d = r.distance_matrix()
    assert np.allclose(d[np.triu_indices(4, 1)], PI, atol=1e-12)


def test_uniformity_stats_of_subgroups():
    v4 = grids.uniformity_stats(grids.finite_subgroup("V4"))
    assert abs(v4["min"] - PI) < 1e-12 and abs(v4["mean_nearest_neighbor"] - PI) < 1e-12
    assert abs(grids.uniformity_stats(grids.finite_subgroup("O24"))["min"] - PI / 2) < 1e-12


def test_uniformity_stats_needs_two_elements():
    with pytest.raises(ValueError):
        grids.uniformity_stats(repulsion(1))


def test_iid_grid_is_less_uniform_than_repulsion():
    iid = grids.iid_random_grid(24, np.random.default_rng(0))
    assert grids.uniformity_stats(iid)["min"] < grids.uniformity_stats(repulsion(24, 0))["min"]


@pytest.mark.parametrize("grid", [grids.finite_subgroup("O24"), repulsion(5, 1), repulsion(1)])
def test_file_round_trip_is_byte_exact(tmp_path, grid):
    p = tmp_path / "g.txt"
    grids.save_grid(grid, p)
    loaded = grids.load_grid(p)
    assert loaded == grid
    grids.save_grid(loaded, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == p.read_bytes()


def test_truncated_file_names_the_missing_field(tmp_path):
    text = grids.format_grid(grids.finite_subgroup("O24"))
    with pytest.raises(grids.GridFormatError) as err:
        grids.parse_grid("\n".join(text.splitlines()[:4]))
    assert err.value.field == "name"
    with pytest.raises(grids.GridFormatError) as err:
        grids.parse_grid("\n".join(text.splitlines()[:15]))
    assert err.value.field.startswith("element")


def test_near_unit_quaternion_is_renormalized_with_warning():
    text = grids.format_grid(repulsion(3, 0)).splitlines()
    row = np.array([float(t) for t in text[-1].split()]) * (1 + 1e-7)
    text[-1] = " ".join(f"{c:.17e}" for c in row)
    with pytest.warns(UserWarning, match="renormaliz"):
        g = grids.parse_grid("\n".join(text))
    assert np.allclose(np.linalg.norm(g.elements, axis=1), 1.0, atol=1e-15)


def test_far_from_unit_quaternion_is_rejected():
    text = grids.format_grid(repulsion(3, 0)).splitlines()
    text[-1] = "0.5 0.5 0.5 0.6"
    with pytest.raises(grids.GridFormatError):
        grids.parse_grid("\n".join(text))


def test_non_closed_subgroup_file_is_rejected():
    text = grids.format_grid(grids.finite_subgroup("V4")).splitlines()
    q = rot.canonicalize(rot.rot_z(0.3))
    text[-1] = " ".join(f"{c:.17e}" for c in q)
    with pytest.raises(grids.GridFormatError, match="closed"):
        grids.parse_grid("\n".join(text))


def test_bad_header_values():
    text = grids.format_grid(repulsion(2, 0))
    for old, new in (("format-version: 1", "format-version: 9"), ("kind: uniform-repulsion", "kind: weird"),
                     ("N: 2", "N: two"), ("# so3-grid", "# nope")):
        with pytest.raises(grids.GridFormatError):
            grids.parse_grid(text.replace(old, new))


def test_written_components_have_17_significant_digits():
    body = grids.format_grid(repulsion(4, 0)).split("---\n")[1].split()
    assert all(len(t.split("e")[0].replace("-", "").replace(".", "")) >= 17 for t in body)


def test_exact_unit_rows_load_without_warning():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        grids.parse_grid(grids.format_grid(grids.finite_subgroup("T12")))
    assert math.isclose(grids.finite_subgroup("T12").uniformity, 2 * PI / 3, abs_tol=1e-10)
