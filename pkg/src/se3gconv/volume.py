"""Dense volumes: trilinear resampling, kernel rotation and direct 3D correlation.

Array axes ``(D, H, W)`` carry the vector components ``(x, y, z)``; positions
are measured from the geometric centre ``((D-1)/2, (H-1)/2, (W-1)/2)``.
Rotating a signal by ``g`` means ``out(p) = in(g^-1 p)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import _kernels
from . import rotations as rot

_SNAP = 1e-9


@dataclass
class VolumeSignal:
    data: np.ndarray  # (C, D, H, W)
    voxel_spacing: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or min(self.data.shape[1:]) < 1:
            raise ValueError(f"volume data must have shape (C, D, H, W), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data must be finite")
        if not self.voxel_spacing > 0:
            raise ValueError("voxel spacing must be positive")


def check_bank(bank: np.ndarray) -> np.ndarray:
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 5 or not (bank.shape[2] == bank.shape[3] == bank.shape[4]):
        raise ValueError(f"kernel bank must have shape (C_out, C_mul, k, k, k), got {bank.shape}")
    if bank.shape[2] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {bank.shape[2]}")
    return bank


# -- trilinear resampling ---------------------------------------------------

def _trilinear_taps(coords: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices and weights (P, 8) of the corners around array-index ``coords`` (P, 3).

    Corners outside the array get weight zero, and so does any point further
    than half a voxel beyond the outermost voxel centres.
    """
    coords = np.asarray(coords, dtype=np.float64)
    near = np.round(coords)
    coords = np.where(np.abs(coords - near) < _SNAP, near, coords)
    dims = np.asarray(shape)
    inside = np.all((coords >= -0.5) & (coords <= dims - 0.5), axis=1)
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    idx = np.zeros((len(coords), 8), dtype=np.int64)
    wts = np.zeros((len(coords), 8))
    for n, (da, db, dc) in enumerate(np.ndindex(2, 2, 2)):
        corner = base + np.array([da, db, dc])
        valid = inside & np.all((corner >= 0) & (corner < dims), axis=1)
        w = (
            np.where(da, frac[:, 0], 1 - frac[:, 0])
            * np.where(db, frac[:, 1], 1 - frac[:, 1])
            * np.where(dc, frac[:, 2], 1 - frac[:, 2])
        )
        corner = np.clip(corner, 0, dims - 1)
        idx[:, n] = np.ravel_multi_index(corner.T, shape)
        wts[:, n] = np.where(valid, w, 0.0)
    return idx, wts


def trilinear_sample(vol: np.ndarray, point) -> float:
    """Value of a cubic (k, k, k) array at a continuous offset from its centre."""
    vol = np.asarray(vol, dtype=np.float64)
    centre = (np.asarray(vol.shape) - 1) / 2.0
    idx, wts = _trilinear_taps(np.asarray(point, dtype=np.float64)[None] + centre, vol.shape)
    return float(np.sum(vol.ravel()[idx[0]] * wts[0]))


def _sampling_matrix(q, shape) -> np.ndarray:
    """Dense (P, P) matrix S with ``S @ vol.ravel()`` = vol rotated by ``q``."""
    shape = tuple(shape)
    centre = (np.asarray(shape) - 1) / 2.0
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), -1).reshape(-1, 3)
    src = grid - centre
    src = src @ rot.quat_to_matrix(q)  # rows become R^T p = R^-1 p
    idx, wts = _trilinear_taps(src + centre, shape)
    n = len(grid)
    mat = np.zeros((n, n))
    np.add.at(mat, (np.repeat(np.arange(n), 8), idx.ravel()), wts.ravel())
    return mat


class _ByteBudgetCache:
    """Least-recently-used cache bounded by the total size of the stored arrays."""

    def __init__(self, max_bytes: int):
        self.max_bytes = max_bytes
        self._items: OrderedDict = OrderedDict()
        self._bytes = 0

    def get(self, key, make):
        arr = self._items.get(key)
        if arr is not None:
            self._items.move_to_end(key)
            return arr
        arr = make()
        arr.setflags(write=False)
        self._items[key] = arr
        self._bytes += arr.nbytes
        while self._bytes > self.max_bytes and len(self._items) > 1:
            _, old = self._items.popitem(last=False)
            self._bytes -= old.nbytes
        return arr

    def clear(self):
        self._items.clear()
        self._bytes = 0


# fixed (evaluation) grids hit this cache; randomized training grids mostly miss it
_ROTATION_CACHE = _ByteBudgetCache(64 * 2**20)


def _cached_sampling_matrix(qbytes: bytes, k: int) -> np.ndarray:
    q = np.frombuffer(qbytes, dtype=np.float64)
    return _ROTATION_CACHE.get((qbytes, k), lambda: _sampling_matrix(q, (k, k, k)))


def kernel_rotation_matrices(quats, k: int) -> np.ndarray:
    """Stack of (k^3, k^3) trilinear rotation operators, one per quaternion."""
    quats = rot.canonicalize(np.atleast_2d(quats))
    return np.stack([_cached_sampling_matrix(np.ascontiguousarray(q).tobytes(), k) for q in quats])


def rotate_kernel(bank: np.ndarray, q) -> np.ndarray:
    """Resample every kernel of a bank at ``R^-1 u`` for each voxel offset ``u``."""
    bank = check_bank(bank)
    k = bank.shape[-1]
    if np.allclose(rot.canonicalize(q), rot.IDENTITY, rtol=0, atol=0):
        return bank.copy()
    s = kernel_rotation_matrices(q, k)[0]
    flat = bank.reshape(-1, k**3)
    return (flat @ s.T).reshape(bank.shape)


def rotate_kernel_adjoint(grad_rotated: np.ndarray, q) -> np.ndarray:
    """Transpose of :func:`rotate_kernel` applied to a gradient bank."""
    k = grad_rotated.shape[-1]
    s = kernel_rotation_matrices(q, k)[0]
    return (grad_rotated.reshape(-1, k**3) @ s).reshape(grad_rotated.shape)


def exact_permutation_matrix(q, tol: float = 1e-9):
    """Integer matrix of ``q`` if it permutes lattice axes (a cube rotation), else None."""
    m = rot.quat_to_matrix(q)
    r = np.round(m)
    return r.astype(np.int64) if np.abs(m - r).max() < tol else None


def rotate_volume(vol: np.ndarray, q) -> np.ndarray:
    """Rotate the trailing three axes of ``vol`` about the volume centre.

    Cube rotations on cubic volumes are exact voxel permutations; anything
    else is trilinear resampling with zero padding.
    """
    vol = np.asarray(vol, dtype=np.float64)
    shape = vol.shape[-3:]
    lead = vol.shape[:-3]
    flat = vol.reshape(-1, int(np.prod(shape)))
    centre = (np.asarray(shape) - 1) / 2.0
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), -1).reshape(-1, 3)
    perm = exact_permutation_matrix(q)
    if perm is not None:
        src = np.rint((grid - centre) @ perm + centre).astype(np.int64)
        if np.all((src >= 0) & (src < np.asarray(shape))):
            return flat[:, np.ravel_multi_index(src.T, shape)].reshape(lead + shape)
    src = (grid - centre) @ rot.quat_to_matrix(q) + centre
    idx, wts = _trilinear_taps(src, shape)
    out = np.einsum("npk,pk->np", flat[:, idx], wts)
    return out.reshape(lead + shape)


# -- direct correlation ---------------------------------------------------

def _batched(f):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 4:
        return f[None], True
    if f.ndim != 5:
        raise ValueError(f"expected (C, D, H, W) or (B, C, D, H, W) input, got {f.shape}")
    return f, False


def _check_modes(f, bank, mode):
    c_in = f.shape[1]
    if mode == "dense":
        if bank.shape[1] != c_in:
            raise ValueError(f"dense correlation: bank expects {bank.shape[1]} input channels, got {c_in}")
    elif mode == "depthwise":
        if bank.shape[1] != 1 or bank.shape[0] != c_in:
            raise ValueError(
                f"depthwise correlation needs bank (C, 1, k, k, k) with C = {c_in}, got {bank.shape}"
            )
    else:
        raise ValueError(f"unknown correlation mode {mode!r}")


def pad_same(x: np.ndarray, r: int) -> np.ndarray:
    """Zero-pad the three trailing axes of a (B, C, D, H, W) batch by ``r`` voxels."""
    if r == 0:
        return np.ascontiguousarray(x)
    b, c, d, h, w = x.shape
    out = np.zeros((b, c, d + 2 * r, h + 2 * r, w + 2 * r), dtype=x.dtype)
    out[:, :, r:-r, r:-r, r:-r] = x
    return out


def correlate_padded(xp: np.ndarray, bank: np.ndarray, mode: str) -> np.ndarray:
    """Correlation of an already padded batch ``xp`` (B, C, D+2r, H+2r, W+2r); no shape checks."""
    r = bank.shape[-1] // 2
    b, _, d, h, w = xp.shape
    out = np.zeros((b, bank.shape[0], d - 2 * r, h - 2 * r, w - 2 * r), dtype=xp.dtype)
    bank = np.ascontiguousarray(bank, dtype=xp.dtype)
    if mode == "dense":
        _kernels.corr_dense(xp, bank, out)
    else:
        _kernels.corr_depthwise(xp, np.ascontiguousarray(bank[:, 0]), out)
    return out


def correlate3d(f, bank, mode: str = "dense", padding: str = "same-zero") -> np.ndarray:
    """``out[o](x) = sum_{i,u} bank[o, i](u) f[i](x + u)`` with "same" zero padding.

    ``f`` may carry a leading batch axis. In depthwise mode the sum over
    ``i`` is dropped and output channel ``o`` reads input channel ``o``.
    """
    if padding != "same-zero":
        raise ValueError(f"unsupported padding {padding!r}")
    bank = check_bank(bank)
    x, single = _batched(f)
    _check_modes(x, bank, mode)
    out = correlate_padded(pad_same(x, bank.shape[-1] // 2), bank, mode)
    return out[0] if single else out


def correlate_padded_backward(xp: np.ndarray, bank: np.ndarray, upstream: np.ndarray, mode: str, need_input=True):
    """``(grad_x, grad_bank)`` for :func:`correlate_padded`; ``grad_x`` is unpadded, or None unless requested."""
    grad_bank = np.zeros(bank.shape, dtype=xp.dtype)
    up = np.ascontiguousarray(upstream, dtype=xp.dtype)
    flipped = bank[:, :, ::-1, ::-1, ::-1]
    if mode == "dense":
        _kernels.grad_w_dense(xp, up, grad_bank)
        transposed = flipped.transpose(1, 0, 2, 3, 4)
    else:
        _kernels.grad_w_depthwise(xp, up, grad_bank[:, 0])
        transposed = flipped
    grad_x = correlate_padded(pad_same(up, bank.shape[-1] // 2), transposed, mode) if need_input else None
    return grad_x, grad_bank


def correlate3d_backward(f, bank, upstream, mode: str = "dense"):
    """Gradients of ``<correlate3d(f, bank), upstream>`` w.r.t. ``f`` and ``bank``."""
    bank = check_bank(bank)
    x, single = _batched(f)
    up, _ = _batched(upstream)
    _check_modes(x, bank, mode)
    expected = (x.shape[0], bank.shape[0]) + x.shape[2:]
    if up.shape != expected:
        raise ValueError(f"upstream gradient has shape {up.shape}, expected {expected}")
    grad_x, grad_bank = correlate_padded_backward(pad_same(x, bank.shape[-1] // 2), bank, up, mode)
    return (grad_x[0] if single else grad_x), grad_bank


# -- volume file format ---------------------------------------------------

VOLUME_MAGIC = "# volume"
VOLUME_VERSION = 1


class VolumeFormatError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def save_volume(vol: VolumeSignal | np.ndarray, path, extra: dict | None = None) -> None:
    data = vol.data if isinstance(vol, VolumeSignal) else np.asarray(vol)
    c, d, h, w = data.shape
    header = [VOLUME_MAGIC, f"format-version: {VOLUME_VERSION}", f"C: {c}", f"D: {d}", f"H: {h}", f"W: {w}",
              "dtype: f32-le"]
    for key, value in (extra or {}).items():
        header.append(f"{key}: {value}")
    header.append("---")
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + payload)


def load_volume(path) -> tuple[VolumeSignal, dict]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\n---\n")
    if not raw.startswith(VOLUME_MAGIC.encode()) or end < 0:
        raise VolumeFormatError("not a volume file or header not terminated", field="header")
    header = {}
    for line in raw[:end].decode("ascii").splitlines()[1:]:
        key, _, value = line.partition(":")
        header[key.strip()] = value.strip()
    for key in ("format-version", "C", "D", "H", "W", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"volume header is missing field {key!r}", field=key)
    if header["dtype"] != "f32-le":
        raise VolumeFormatError(f"unsupported dtype {header['dtype']!r}", field="dtype")
    shape = tuple(int(header[k]) for k in ("C", "D", "H", "W"))
    payload = raw[end + 5:]
    n = int(np.prod(shape))
    if len(payload) != 4 * n:
        raise VolumeFormatError(f"payload has {len(payload)} bytes, expected {4 * n}", field="payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    extra = {k: v for k, v in header.items() if k not in ("format-version", "C", "D", "H", "W", "dtype")}
    return VolumeSignal(data), extra
