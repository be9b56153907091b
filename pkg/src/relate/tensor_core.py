"""Parameter representations for multiplicative (gated) models.

A gated model connects two images x (length I) and y (length J) through
latent mapping units z (length K) with a three-way weight tensor w_ijk:
every triple (input pixel, output pixel, mapping unit) has its own
multiplicative connection.  The full tensor is only tractable for tiny
models, so production code uses the factored form

    w_ijk = sum_f wx[i, f] * wy[j, f] * wz[k, f]

with F factors: a diagonal three-way inner product of per-factor filters.
This module holds both representations, the slow dense-tensor reference
("oracle") computations that every fast factored path is tested against,
and the binary checkpoint format for factored parameters.

Dense-tensor operations refuse to run past ORACLE_BUDGET entries; they
exist to verify the factored code, not to replace it.
"""

import json
import os
import struct
import time
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DataError
from .spectral import WarpMatrix

ORACLE_BUDGET = 1_000_000

RELW_MAGIC = b"RELW"
RELW_VERSION = 1


@dataclass(frozen=True)
class DenseTensor:
    """The full three-way weight tensor w with shape (I, J, K)."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        object.__setattr__(self, "w", w)
        if w.ndim != 3:
            raise ValueError("dense tensor must have shape (I, J, K)")
        if w.size > ORACLE_BUDGET:
            raise ValueError(
                f"dense tensor with {w.size} entries exceeds the oracle "
                f"budget of {ORACLE_BUDGET}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("dense tensor contains non-finite entries")

    @property
    def num_x(self):
        return self.w.shape[0]

    @property
    def num_y(self):
        return self.w.shape[1]

    @property
    def num_maps(self):
        return self.w.shape[2]


@dataclass
class FactoredParams:
    """Factor matrices and biases of a gated model.

    wx: (I, F), wy: (J, F), wz: (K, F); bias_x, bias_y, bias_z of lengths
    I, J, K.  Column f of each matrix is that factor's filter.
    """

    wx: np.ndarray
    wy: np.ndarray
    wz: np.ndarray
    bias_x: np.ndarray
    bias_y: np.ndarray
    bias_z: np.ndarray

    def __post_init__(self):
        self.wx = np.asarray(self.wx, dtype=np.float64)
        self.wy = np.asarray(self.wy, dtype=np.float64)
        self.wz = np.asarray(self.wz, dtype=np.float64)
        self.bias_x = np.asarray(self.bias_x, dtype=np.float64).ravel()
        self.bias_y = np.asarray(self.bias_y, dtype=np.float64).ravel()
        self.bias_z = np.asarray(self.bias_z, dtype=np.float64).ravel()
        for name, m in (("wx", self.wx), ("wy", self.wy), ("wz", self.wz)):
            if m.ndim != 2:
                raise ValueError(f"{name} must be 2-d (units, factors)")
        f = self.wx.shape[1]
        if self.wy.shape[1] != f or self.wz.shape[1] != f:
            raise ValueError("wx, wy, wz must share the factor dimension")
        if self.bias_x.shape[0] != self.wx.shape[0]:
            raise ValueError("bias_x length does not match wx rows")
        if self.bias_y.shape[0] != self.wy.shape[0]:
            raise ValueError("bias_y length does not match wy rows")
        if self.bias_z.shape[0] != self.wz.shape[0]:
            raise ValueError("bias_z length does not match wz rows")

    @property
    def num_x(self):
        return self.wx.shape[0]

    @property
    def num_y(self):
        return self.wy.shape[0]

    @property
    def num_maps(self):
        return self.wz.shape[0]

    @property
    def num_factors(self):
        return self.wx.shape[1]

    def arrays(self):
        return (self.wx, self.wy, self.wz,
                self.bias_x, self.bias_y, self.bias_z)

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def copy(self):
        return FactoredParams(*(a.copy() for a in self.arrays()))


@dataclass(frozen=True)
class MappingCode:
    """Latent code z = sigmoid(pre_activation), one value per mapping unit."""

    z: np.ndarray
    pre_activation: np.ndarray


def sigmoid(a):
    return expit(a)


def expand_factored(params):
    """Expand FactoredParams into the equivalent DenseTensor.

    Oracle-only: refuses models with I*J*K beyond ORACLE_BUDGET.
    """
    size = params.num_x * params.num_y * params.num_maps
    if size > ORACLE_BUDGET:
        raise ValueError(
            f"expansion to {size} entries exceeds the oracle budget of "
            f"{ORACLE_BUDGET}; the dense tensor is a test oracle only"
        )
    return DenseTensor(np.einsum("if,jf,kf->ijk", params.wx, params.wy,
                                 params.wz))


def oracle_encode(tensor, x, y, bias_z=None):
    """Mapping-unit pre-activations from the dense tensor.

    pre_k = sum_ij w[i, j, k] x_i y_j (+ bias_z).  Reference path for
    testing factored encoders.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != tensor.num_x or y.shape[0] != tensor.num_y:
        raise ValueError(
            f"inputs ({x.shape[0]}, {y.shape[0]}) do not match tensor dims "
            f"({tensor.num_x}, {tensor.num_y})"
        )
    pre = np.einsum("ijk,i,j->k", tensor.w, x, y)
    if bias_z is not None:
        pre = pre + np.asarray(bias_z, dtype=np.float64).ravel()
    return pre


def oracle_decode(tensor, x, z, bias_y=None):
    """Output image from the dense tensor: y_j = sum_ik w[i, j, k] x_i z_k."""
    x = np.asarray(x, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    if x.shape[0] != tensor.num_x or z.shape[0] != tensor.num_maps:
        raise ValueError(
            f"inputs ({x.shape[0]}, {z.shape[0]}) do not match tensor dims "
            f"({tensor.num_x}, {tensor.num_maps})"
        )
    y = np.einsum("ijk,i,k->j", tensor.w, x, z)
    if bias_y is not None:
        y = y + np.asarray(bias_y, dtype=np.float64).ravel()
    return y


def warp_from_code(tensor, z):
    """The linear warp a code z blends out of the tensor's slices.

    L[j, i] = sum_k w[i, j, k] z_k, so that oracle_decode(w, x, z) = L @ x
    (plus any output bias).  Each mapping unit blends in one I x J slice.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.shape[0] != tensor.num_maps:
        raise ValueError(
            f"code length {z.shape[0]} does not match tensor maps "
            f"{tensor.num_maps}"
        )
    return WarpMatrix(np.einsum("ijk,k->ji", tensor.w, z), "custom")


def save_params(path, params, kind="", extra_manifest=None):
    """Write FactoredParams as a binary checkpoint plus JSON manifest.

    Layout (little-endian): magic "RELW", version u32, dims (I, J, K, F) as
    u64, then wx, wy, wz, bias_x, bias_y, bias_z as float64 row-major, then
    CRC32 (of all preceding bytes) as u32.  Bit-identical across runs; the
    manifest sidecar at <path>.json carries the kind tag ("gae", "grbm",
    "isa") and the only timestamp.
    """
    path = os.fspath(path)
    payload = bytearray()
    payload += RELW_MAGIC
    payload += struct.pack("<I", RELW_VERSION)
    payload += struct.pack("<QQQQ", params.num_x, params.num_y,
                           params.num_maps, params.num_factors)
    for arr in params.arrays():
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(payload)
    manifest = {
        "format": "RELW",
        "version": RELW_VERSION,
        "kind": kind,
        "num_x": params.num_x,
        "num_y": params.num_y,
        "num_maps": params.num_maps,
        "num_factors": params.num_factors,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_params(path):
    """Read a checkpoint written by save_params.

    Returns (FactoredParams, manifest dict); the manifest is {} when the
    sidecar is missing.  Corruption is caught by the CRC.
    """
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != RELW_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != RELW_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 44:
        raise DataError(f"{path}: truncated checkpoint")
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise DataError(f"{path}: checksum mismatch, file is corrupt")
    i, j, k, f = struct.unpack_from("<QQQQ", raw, 8)
    counts = (i * f, j * f, k * f, i, j, k)
    if len(raw) != 44 + 8 * sum(counts):
        raise DataError(f"{path}: checkpoint size does not match its dims")
    off = 40
    arrays = []
    for count in counts:
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count,
                                    offset=off).copy())
        off += 8 * count
    params = FactoredParams(arrays[0].reshape(i, f), arrays[1].reshape(j, f),
                            arrays[2].reshape(k, f), arrays[3], arrays[4],
                            arrays[5])
    manifest = {}
    if os.path.exists(path + ".json"):
        with open(path + ".json") as fh:
            manifest = json.load(fh)
    return params, manifest
