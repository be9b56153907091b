"""Gated restricted Boltzmann machine, conditioned on the input image.

The three-way energy couples every (input pixel, output pixel, mapping
unit) triple through the factored tensor:

    E(x, y, z) = sum_f (wx^T x)_f (wy^T y)_f (wz^T z)_f
                 + bias_y^T y + bias_z^T z

and the model is conditional: p(y, z | x) = exp(E) / Z(x), normalized over
(y, z) only, with x always clamped (so bias_x never enters).  Visible and
mapping units are binary; both conditionals are logistic:

    p(z_k = 1 | x, y) = sigmoid([wz (fx * fy)]_k + bias_z_k)
    p(y_j = 1 | x, z) = sigmoid([wy (fx * fz)]_j + bias_y_j)

which are exactly the gated autoencoder's encode pre-activation and its
decode output squashed, so those code paths are reused.

CD-1 training: sample z from the data pair, resample y then z with x
clamped, and step parameters along (positive - negative) statistics of
dE/dtheta.  Chain states are samples; the statistics use probabilities
(standard variance reduction).  The reconstruction-error trace records
mean ||y - p(y|x, z_sample)||^2 per minibatch.

Note the conditional p(y_j | x, z) sums the factored term over mapping
units k (the pairing index), mirroring p(z_k | x, y)'s sum over pixels.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import gae as _gae
from .datagen import PairBatch
from .errors import TrainingDivergedError
from .tensor_core import FactoredParams, sigmoid


@dataclass
class GbmModel:
    params: FactoredParams
    visible_unit_kind: str = "binary"
    norm_running_avg: float = 1.0
    tied_xy: bool = False

    def __post_init__(self):
        if self.visible_unit_kind != "binary":
            raise ValueError("only binary visible units are supported")
        if self.tied_xy:
            if self.params.wx.shape != self.params.wy.shape:
                raise ValueError("tied model needs matching x/y dims")
            self.params.wy = self.params.wx

    def copy(self):
        return GbmModel(self.params.copy(), self.visible_unit_kind,
                        self.norm_running_avg, self.tied_xy)


def init_gbm(num_x, num_y, num_factors, num_maps, tied_xy=False, seed=0):
    """Fresh model with the same init scales as the autoencoder."""
    rng = np.random.default_rng(seed)
    wx = 0.01 * rng.standard_normal((num_x, num_factors))
    wy = wx if tied_xy else 0.01 * rng.standard_normal((num_y, num_factors))
    params = FactoredParams(
        wx, wy, 0.1 * rng.standard_normal((num_maps, num_factors)),
        np.zeros(num_x), np.zeros(num_y), np.zeros(num_maps))
    if tied_xy:
        norms = np.linalg.norm(params.wx, axis=0)
    else:
        norms = np.concatenate([np.linalg.norm(params.wx, axis=0),
                                np.linalg.norm(params.wy, axis=0)])
    return GbmModel(params, "binary", float(norms.mean()), tied_xy)


def energy(model, x, y, z):
    """Three-way energy, computed in factored form.

    Accepts single vectors (returns a float) or row batches (returns a
    vector).
    """
    p = model.params
    x, sx = _gae._as_batch2d(x, p.num_x, "x")
    y, sy = _gae._as_batch2d(y, p.num_y, "y")
    z, sz = _gae._as_batch2d(z, p.num_maps, "z")
    e = (np.sum((x @ p.wx) * (y @ p.wy) * (z @ p.wz), axis=1)
         + y @ p.bias_y + z @ p.bias_z)
    return float(e[0]) if (sx and sy and sz) else e


def p_z_given_xy(model, x, y):
    """Bernoulli means of the mapping units given both images."""
    return _gae.encode(model, x, y).z


def p_y_given_xz(model, x, z):
    """Bernoulli means of the output pixels given input and code."""
    return sigmoid(_gae.decode(model, x, z))


def sample_bernoulli(rng, probs):
    return (rng.random(np.shape(probs)) < probs).astype(np.float64)


def _stats(params, x, y, z):
    """Batch-mean dE/dtheta at the given (x, y, z) values."""
    n = x.shape[0]
    fx = x @ params.wx
    fy = y @ params.wy
    fz = z @ params.wz
    return {
        "wx": x.T @ (fy * fz) / n,
        "wy": y.T @ (fx * fz) / n,
        "wz": z.T @ (fx * fy) / n,
        "bias_y": y.mean(axis=0),
        "bias_z": z.mean(axis=0),
    }


def cd1_step(model, x, y, rng):
    """One CD-1 estimate on a batch: (positive - negative) statistics.

    Returns (update dict keyed like _stats, mean reconstruction error).
    x stays clamped through the chain.
    """
    z0_prob = p_z_given_xy(model, x, y)
    z0 = sample_bernoulli(rng, z0_prob)
    y1_prob = p_y_given_xz(model, x, z0)
    y1 = sample_bernoulli(rng, y1_prob)
    z1_prob = p_z_given_xy(model, x, y1)
    pos = _stats(model.params, x, y, z0_prob)
    neg = _stats(model.params, x, y1_prob, z1_prob)
    update = {k: pos[k] - neg[k] for k in pos}
    recon = float(np.mean(np.sum((y - y1_prob) ** 2, axis=1)))
    return update, recon


def _check_binary(batch):
    for name, arr in (("x", batch.x), ("y", batch.y)):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError(
                f"batch {name} must be binary (0/1); see binarize_batch"
            )


def binarize_batch(batch):
    """Threshold each image at its own median (strictly greater -> 1)."""
    def _thr(a):
        return (a > np.median(a, axis=1, keepdims=True)).astype(np.float64)

    return PairBatch(_thr(batch.x), _thr(batch.y), batch.labels,
                     batch.label_kind, batch.height, batch.width,
                     batch.num_frames)


def train_cd1(model, batch, config, callbacks=None):
    """CD-1 training with momentum and the filter-norm constraint.

    Same driver contract as gae.train: deterministic given config.seed,
    per-minibatch trace records {epoch, batch, loss, grad_norm} where loss
    is the mean reconstruction error, NaN divergence aborts.
    """
    if batch.num_pairs == 0:
        raise ValueError("batch is empty")
    _check_binary(batch)
    model = model.copy()
    p = model.params
    rng = np.random.default_rng(config.seed)
    step = config.learning_rate > 0
    keys = ("wx", "wy", "wz", "bias_y", "bias_z")
    targets = {k: getattr(p, k) for k in keys}
    velocities = {k: np.zeros_like(v) for k, v in targets.items()}
    trace = []
    num_batches = math.ceil(batch.num_pairs / config.batch_size)
    for epoch in range(config.epochs):
        perm = rng.permutation(batch.num_pairs)
        for b in range(num_batches):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            update, recon = cd1_step(model, batch.x[idx], batch.y[idx], rng)
            grad_norm = 0.0
            if step:
                for k in keys:
                    vel = velocities[k]
                    vel *= config.momentum
                    vel += config.learning_rate * update[k]
                    targets[k] += vel
                if config.norm_constraint:
                    _gae.apply_norm_constraint(model, rng)
                if not p.is_finite():
                    raise TrainingDivergedError(
                        f"non-finite parameters at epoch {epoch} batch {b}"
                    )
                grad_norm = math.sqrt(sum(float(np.sum(u * u))
                                          for u in update.values()))
            record = {"epoch": epoch, "batch": b, "loss": recon,
                      "grad_norm": grad_norm}
            trace.append(record)
            if callbacks:
                for cb in callbacks:
                    cb(record, model)
    return model, trace


def save_gbm(path, model, extra_manifest=None):
    from .tensor_core import save_params

    manifest = {"visible_unit_kind": model.visible_unit_kind,
                "norm_running_avg": model.norm_running_avg,
                "tied_xy": model.tied_xy}
    if extra_manifest:
        manifest.update(extra_manifest)
    return save_params(path, model.params, kind="grbm",
                       extra_manifest=manifest)


def load_gbm(path):
    from .tensor_core import load_params

    params, manifest = load_params(path)
    return GbmModel(params, manifest.get("visible_unit_kind", "binary"),
                    float(manifest.get("norm_running_avg", 1.0)),
                    bool(manifest.get("tied_xy", False)))
