"""Unit quaternion algebra for SO(3).

Quaternions are stored as float arrays with a trailing axis of length 4 in
``(w, x, y, z)`` order. Every function broadcasts over leading axes. ``q`` and
``-q`` denote the same rotation; distances and comparisons ignore the sign,
and :func:`canonicalize` picks the representative with ``w >= 0``.
"""
from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

_MATRIX_TOL = 1e-10


def as_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError(f"quaternion arrays need a trailing axis of 4, got {q.shape}")
    return q


def normalize(q) -> np.ndarray:
    q = as_quat(q)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonicalize(q) -> np.ndarray:
    """Return the sign representative with w >= 0.

    Ties (w == 0) are broken by making the first nonzero of x, y, z positive.
    """
    q = np.array(as_quat(q), copy=True)
    flat = q.reshape(-1, 4)
    for k in range(4):
        undecided = np.all(flat[:, :k] == 0.0, axis=1) if k else np.ones(len(flat), bool)
        flip = undecided & (flat[:, k] < 0.0)
        flat[flip] *= -1.0
    # -0.0 would make the text representation sign-dependent
    flat += 0.0
    return flat.reshape(q.shape)


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product ``a * b``: the rotation "apply b, then a"."""
    a, b = as_quat(a), as_quat(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )
    return normalize(out)


def quat_inverse(q) -> np.ndarray:
    q = as_quat(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def axis_angle(axis, angle) -> np.ndarray:
    """Quaternion rotating by ``angle`` radians about ``axis`` (right-hand rule)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def rot_x(angle):
    return axis_angle([1.0, 0.0, 0.0], angle)


def rot_y(angle):
    return axis_angle([0.0, 1.0, 0.0], angle)


def rot_z(angle):
    return axis_angle([0.0, 0.0, 1.0], angle)


def quat_to_matrix(q) -> np.ndarray:
    q = normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def is_rotation_matrix(m, tol: float = _MATRIX_TOL) -> bool:
    m = np.asarray(m, dtype=np.float64)
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(m, -1, -2) @ m - eye).max() <= tol
    return bool(ortho and np.abs(np.linalg.det(m) - 1.0).max() <= tol)


def matrix_to_quat(m) -> np.ndarray:
    """Convert rotation matrices to canonical quaternions (Shepperd's method).

    Raises ``ValueError`` when a matrix is not orthogonal with determinant +1
    within 1e-10.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrices, got {m.shape}")
    if not is_rotation_matrix(m):
        raise ValueError("matrix is not a proper rotation (orthogonality/determinant check failed)")
    flat = m.reshape(-1, 3, 3)
    out = np.empty((len(flat), 4))
    for n, r in enumerate(flat):
        tr = r[0, 0] + r[1, 1] + r[2, 2]
        diag = np.array([tr, r[0, 0], r[1, 1], r[2, 2]])
        k = int(np.argmax(diag))
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
            q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        out[n] = q
    return canonicalize(normalize(out)).reshape(m.shape[:-2] + (4,))


def quat_apply(q, v) -> np.ndarray:
    """Rotate vectors ``v`` (..., 3) by quaternions ``q``."""
    q = as_quat(q)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def geodesic_distance(a, b) -> np.ndarray:
    """Riemannian distance on SO(3): the angle of the relative rotation, in [0, pi].

    Equal to ``2 arccos(|<a, b>|)``; evaluated through half-chord lengths so
    that nearly identical rotations keep full precision.
    """
    a, b = as_quat(a), as_quat(b)
    s = np.where(np.sum(a * b, axis=-1) < 0.0, -1.0, 1.0)[..., None]
    b = s * b
    return 4.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))


def pairwise_distance(a, b=None) -> np.ndarray:
    """Distance matrix between two sets of quaternions, shape (len(a), len(b))."""
    a = as_quat(a).reshape(-1, 4)
    b = a if b is None else as_quat(b).reshape(-1, 4)
    return geodesic_distance(a[:, None, :], b[None, :, :])


def rotation_angle(q) -> np.ndarray:
    return geodesic_distance(IDENTITY, q)


def haar_sample(rng: np.random.Generator, size=None) -> np.ndarray:
    """Haar-uniform rotations: normalized 4D standard normals, canonical sign."""
    shape = (4,) if size is None else (np.atleast_1d(size).tolist() + [4])
    return canonicalize(normalize(rng.standard_normal(shape)))


def _closure(generators: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    elems = [canonicalize(IDENTITY)]
    frontier = list(elems)
    while frontier:
        new = []
        for a in frontier:
            for g in generators:
                c = canonicalize(quat_mul(g, a))
                if all(geodesic_distance(c, e) > tol for e in elems):
                    elems.append(c)
                    new.append(c)
        frontier = new
    return np.array(elems)


SUBGROUP_ORDERS = {"V4": 4, "T12": 12, "O24": 24}


def finite_subgroup_elements(name: str) -> np.ndarray:
    """Quaternions of an exact finite rotation group in a fixed order.

    ``V4`` holds the identity and the 180 degree rotations about the three
    coordinate axes, ``T12`` the rotations of the tetrahedron and ``O24`` the
    rotations of the cube. The identity is always element 0.
    """
    half_pi = np.pi / 2
    if name == "V4":
        gens = np.array([rot_x(np.pi), rot_y(np.pi)])
    elif name == "T12":
        gens = np.array([rot_x(np.pi), axis_angle([1.0, 1.0, 1.0], 2 * np.pi / 3)])
    elif name == "O24":
        gens = np.array([rot_x(half_pi), rot_y(half_pi)])
    else:
        raise ValueError(f"unknown finite subgroup {name!r}; expected one of {sorted(SUBGROUP_ORDERS)}")
    elems = _closure(gens)
    # exact components: all coordinates are in {0, +-1/2, +-1/sqrt2, +-1}
    exact = np.array([0.0, 0.5, np.sqrt(0.5), 1.0])
    mag = np.abs(elems)
    idx = np.argmin(np.abs(mag[..., None] - exact), axis=-1)
    elems = np.sign(elems) * exact[idx]
    assert len(elems) == SUBGROUP_ORDERS[name]
    return canonicalize(elems)
