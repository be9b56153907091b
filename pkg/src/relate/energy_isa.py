"""Energy / ISA models over concatenated image pairs.

An energy unit squares linear filter responses of the concatenated pair
and pools them:

    z_k = sum_f pooling[k, f] * (wx_f^T x + wy_f^T y)^2  (+ bias_z_k)

Expanding each square,

    (a + b)^2 = 2ab + a^2 + b^2,

the cross term ab is exactly the gated model's factor response product
(wx_f^T x)(wy_f^T y): up to the quadratic terms, an energy model computes
the same cross-correlation response as a gated model with the same
filters.  expand_energy returns both pieces so the identity can be
asserted.

ISA training treats the pooled squares as subspace energies and makes them
sparse while keeping the filters orthonormal:

    minimize  mean_n sum_k sqrt(eps + z_k)        (eps = 1e-8)
    subject to  W^T W = I,

enforced after every gradient step by symmetric re-orthonormalization
W <- W (W^T W)^{-1/2} (order-independent, deterministic).  Pooling is
fixed block-diagonal (subspace_size filters per unit) or learnable with a
nonnegativity clip.  bias_z is left untouched by ISA training so the
response stays a sum of squares.

The tied configuration (wx = wy, for movie data where x = y) stores one
filter block and applies it to both inputs.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NotWhitenedWarning, NumericalError, TrainingDivergedError
from .tensor_core import FactoredParams

ISA_EPS = 1e-8


@dataclass
class EnergyModel:
    """filters: (I+J, F) over the concatenated pair, or (I, F) when tied;
    pooling: (K, F) nonnegative; bias_z: (K,)."""

    filters: np.ndarray
    pooling: np.ndarray
    bias_z: np.ndarray
    num_x: int
    tied: bool = False

    def __post_init__(self):
        self.filters = np.asarray(self.filters, dtype=np.float64)
        self.pooling = np.asarray(self.pooling, dtype=np.float64)
        self.bias_z = np.asarray(self.bias_z, dtype=np.float64).ravel()
        if self.filters.ndim != 2 or self.pooling.ndim != 2:
            raise ValueError("filters and pooling must be matrices")
        if self.pooling.shape[1] != self.filters.shape[1]:
            raise ValueError("pooling columns must match filter count")
        if self.bias_z.shape[0] != self.pooling.shape[0]:
            raise ValueError("bias_z length must match pooling rows")
        if np.any(self.pooling < 0):
            raise ValueError("pooling must be nonnegative")
        if self.tied:
            if self.filters.shape[0] != self.num_x:
                raise ValueError("tied filters must have num_x rows")
        elif self.filters.shape[0] <= self.num_x:
            raise ValueError("untied filters need rows for both images")

    @property
    def num_y(self):
        return self.num_x if self.tied else self.filters.shape[0] - self.num_x

    @property
    def num_factors(self):
        return self.filters.shape[1]

    @property
    def num_units(self):
        return self.pooling.shape[0]

    @property
    def wx(self):
        return self.filters if self.tied else self.filters[:self.num_x]

    @property
    def wy(self):
        return self.filters if self.tied else self.filters[self.num_x:]

    def copy(self):
        return EnergyModel(self.filters.copy(), self.pooling.copy(),
                           self.bias_z.copy(), self.num_x, self.tied)


def block_diagonal_pooling(num_factors, subspace_size):
    """(F / subspace_size, F) matrix pooling consecutive filter groups."""
    if num_factors % subspace_size:
        raise ValueError("subspace_size must divide the factor count")
    k = num_factors // subspace_size
    p = np.zeros((k, num_factors))
    for i in range(k):
        p[i, i * subspace_size:(i + 1) * subspace_size] = 1.0
    return p


def init_energy_model(num_x, num_y, num_factors, subspace_size=2,
                      tied=False, seed=0):
    """Random orthonormal filters with block-diagonal pooling."""
    if tied and num_x != num_y:
        raise ValueError("tied model requires num_x == num_y")
    rng = np.random.default_rng(seed)
    rows = num_x if tied else num_x + num_y
    if num_factors > rows:
        raise ValueError("cannot have more orthonormal filters than dims")
    q, _ = np.linalg.qr(rng.standard_normal((rows, num_factors)))
    pooling = block_diagonal_pooling(num_factors, subspace_size)
    return EnergyModel(q, pooling, np.zeros(pooling.shape[0]), num_x, tied)


def _responses(model, x, y):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != model.num_x or y.shape[1] != model.num_y:
        raise ValueError(
            f"pair dims ({x.shape[1]}, {y.shape[1]}) do not match model "
            f"({model.num_x}, {model.num_y})"
        )
    return x @ model.wx, y @ model.wy


def energy_response(model, x, y):
    """Pooled squared responses z (per pair row, or a vector for one pair)."""
    single = np.ndim(x) == 1
    a, b = _responses(model, x, y)
    z = ((a + b) ** 2) @ model.pooling.T + model.bias_z
    return z[0] if single else z


def expand_energy(model, x, y):
    """Split each unit's response into (cross_term, quad_terms).

    cross_term is the gated-model pre-activation sum_f P_kf a_f b_f and
    quad_terms = sum_f P_kf (a_f^2 + b_f^2); the bias-free response equals
    2 * cross_term + quad_terms exactly.
    """
    single = np.ndim(x) == 1
    a, b = _responses(model, x, y)
    cross = (a * b) @ model.pooling.T
    quad = (a ** 2 + b ** 2) @ model.pooling.T
    return (cross[0], quad[0]) if single else (cross, quad)


def orthonormalize(filters):
    """Symmetric orthonormalization W (W^T W)^{-1/2}."""
    gram = filters.T @ filters
    vals, vecs = np.linalg.eigh(gram)
    if vals[0] < 1e-12:
        raise NumericalError("filters became rank-deficient")
    inv_sqrt = (vecs / np.sqrt(vals)) @ vecs.T
    return filters @ inv_sqrt


def _looks_unwhitened(data):
    sample = data[:2000]
    if sample.shape[0] < 2:
        return False
    cov = np.cov(sample, rowvar=False)
    return bool(np.max(np.abs(cov - np.eye(cov.shape[0]))) > 0.2)


def _warn_if_not_white(model, batch):
    unwhite = _looks_unwhitened(batch.x)
    if not model.tied:
        unwhite = unwhite or _looks_unwhitened(batch.y)
    if unwhite:
        warnings.warn(
            "training data does not look whitened; ISA expects whitened "
            "input",
            NotWhitenedWarning,
            stacklevel=3,
        )


def isa_objective(model, x, y):
    """mean_n sum_k sqrt(eps + z_nk) on bias-free responses."""
    a, b = _responses(model, x, y)
    z = ((a + b) ** 2) @ model.pooling.T
    return float(np.mean(np.sum(np.sqrt(ISA_EPS + z), axis=1)))


def train_isa(model, batch, config, learn_pooling=False, callbacks=None):
    """Sparse subspace-energy training; returns (model, trace).

    Each minibatch: gradient step on the smoothed-L1 objective (momentum as
    configured), optional pooling step with nonnegativity clip, then
    symmetric re-orthonormalization of the filters (applied even at
    learning_rate 0, so a single step orthonormalizes any start).  Warns
    when the input is visibly non-white.
    """
    if batch.num_pairs == 0:
        raise ValueError("batch is empty")
    model = model.copy()
    _warn_if_not_white(model, batch)
    rng = np.random.default_rng(config.seed)
    vel_w = np.zeros_like(model.filters)
    vel_p = np.zeros_like(model.pooling)
    trace = []
    num_batches = math.ceil(batch.num_pairs / config.batch_size)
    for epoch in range(config.epochs):
        perm = rng.permutation(batch.num_pairs)
        for b in range(num_batches):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            x = batch.x[idx]
            y = batch.y[idx]
            n = x.shape[0]
            a, bb = _responses(model, x, y)
            s = a + bb
            z = (s ** 2) @ model.pooling.T
            value = float(np.mean(np.sum(np.sqrt(ISA_EPS + z), axis=1)))
            q = 1.0 / (2.0 * n * np.sqrt(ISA_EPS + z))
            ds = 2.0 * s * (q @ model.pooling)
            if model.tied:
                dw = x.T @ ds + y.T @ ds
            else:
                dw = np.vstack([x.T @ ds, y.T @ ds])
            grad_norm = float(np.linalg.norm(dw))
            vel_w *= config.momentum
            vel_w -= config.learning_rate * dw
            model.filters += vel_w
            if learn_pooling:
                dp = q.T @ (s ** 2)
                grad_norm = math.hypot(grad_norm, float(np.linalg.norm(dp)))
                vel_p *= config.momentum
                vel_p -= config.learning_rate * dp
                model.pooling += vel_p
                np.clip(model.pooling, 0.0, None, out=model.pooling)
            model.filters = orthonormalize(model.filters)
            if not (np.all(np.isfinite(model.filters))
                    and np.all(np.isfinite(model.pooling))):
                raise TrainingDivergedError(
                    f"non-finite parameters at epoch {epoch} batch {b}"
                )
            record = {"epoch": epoch, "batch": b, "loss": value,
                      "grad_norm": grad_norm}
            trace.append(record)
            if callbacks:
                for cb in callbacks:
                    cb(record, model)
    return model, trace


def save_isa(path, model, extra_manifest=None):
    """Store the blocks in the shared checkpoint container (kind "isa"):
    wx block, wy block, pooling as the map-side matrix, bias_z."""
    from .tensor_core import save_params

    params = FactoredParams(model.wx, model.wy, model.pooling,
                            np.zeros(model.num_x), np.zeros(model.num_y),
                            model.bias_z)
    manifest = {"tied": model.tied}
    if extra_manifest:
        manifest.update(extra_manifest)
    return save_params(path, params, kind="isa", extra_manifest=manifest)


def load_isa(path):
    from .tensor_core import load_params

    params, manifest = load_params(path)
    tied = bool(manifest.get("tied", False))
    filters = params.wx if tied else np.vstack([params.wx, params.wy])
    return EnergyModel(filters, params.wz, params.bias_z, params.num_x,
                       tied)
