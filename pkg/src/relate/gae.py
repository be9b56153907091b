"""Factored gated autoencoder over image pairs.

The encoder matches filter responses of the two images and maps the
matches to latent mapping units:

    fx = wx^T x,  fy = wy^T y          (factor responses, length F)
    z = sigmoid(wz (fx * fy) + bias_z)  (elementwise product)

and the decoder predicts one image from the other plus the code:

    y_hat = wy (fx * (wz^T z)) + bias_y

decode_reverse swaps the roles of the two images (and uses bias_x as the
output bias), which makes the symmetric objective possible:

    loss = mean_n [ ||y - y_hat||^2 + ||x - x_hat||^2 + lambda * sum_k z_k ]

(one-sided mode drops the x term; the sparsity penalty is L1 on the
sigmoid outputs, which are positive).  Denoising training zero-masks a
fraction of the encoder/decoder inputs while measuring reconstruction
against the clean images.

Gradients are exact analytic backprop through both reconstruction
directions; see _forward_backward for the blocks.  Training is minibatch
SGD with momentum and the filter-norm constraint: a single running
average (decay 0.95) of the mean column norm of wx/wy, to which every
column is rescaled after each update; columns that collapse to zero norm
are re-randomized.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import TrainingDivergedError
from .tensor_core import FactoredParams, MappingCode, sigmoid

NORM_DECAY = 0.95


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 100
    sparsity_weight: float = 0.0
    corruption_level: float = 0.0
    norm_constraint: bool = True
    seed: int = 0
    symmetric: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.sparsity_weight < 0:
            raise ValueError("sparsity_weight must be >= 0")
        if not 0 <= self.corruption_level < 1:
            raise ValueError("corruption_level must be in [0, 1)")


@dataclass
class GaeModel:
    params: FactoredParams
    tied_xy: bool = False
    norm_running_avg: float = 1.0
    config: TrainConfig = None

    def __post_init__(self):
        if self.tied_xy:
            if self.params.wx.shape != self.params.wy.shape:
                raise ValueError("tied model needs matching x/y dims")
            self.params.wy = self.params.wx
        if self.norm_running_avg <= 0:
            raise ValueError("norm_running_avg must be positive")

    def copy(self):
        return GaeModel(self.params.copy(), self.tied_xy,
                        self.norm_running_avg, self.config)


@dataclass
class Gradients:
    dwx: np.ndarray
    dwy: np.ndarray
    dwz: np.ndarray
    dbias_x: np.ndarray
    dbias_y: np.ndarray
    dbias_z: np.ndarray

    def norm(self):
        return math.sqrt(sum(float(np.sum(a * a)) for a in (
            self.dwx, self.dwy, self.dwz,
            self.dbias_x, self.dbias_y, self.dbias_z)))


def init_gae(num_x, num_y, num_factors, num_maps, tied_xy=False, seed=0):
    """Fresh model: wx/wy ~ N(0, 0.01^2), wz ~ N(0, 0.1^2), zero biases."""
    if tied_xy and num_x != num_y:
        raise ValueError("tied model requires num_x == num_y")
    rng = np.random.default_rng(seed)
    wx = 0.01 * rng.standard_normal((num_x, num_factors))
    wy = wx if tied_xy else 0.01 * rng.standard_normal((num_y, num_factors))
    wz = 0.1 * rng.standard_normal((num_maps, num_factors))
    params = FactoredParams(wx, wy, wz, np.zeros(num_x), np.zeros(num_y),
                            np.zeros(num_maps))
    norms = np.linalg.norm(params.wx, axis=0)
    if not tied_xy:
        norms = np.concatenate([norms, np.linalg.norm(params.wy, axis=0)])
    return GaeModel(params, tied_xy, float(norms.mean()))


def _as_batch2d(a, dim, name):
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != dim:
        raise ValueError(f"{name} must have trailing dim {dim}")
    return a, single


def encode(model, x, y):
    """Mapping code for a pair (or batches of pairs, row-wise)."""
    p = model.params
    x, single = _as_batch2d(x, p.num_x, "x")
    y, _ = _as_batch2d(y, p.num_y, "y")
    fx = x @ p.wx
    fy = y @ p.wy
    pre = (fx * fy) @ p.wz.T + p.bias_z
    z = sigmoid(pre)
    if single:
        pre, z = pre[0], z[0]
    return MappingCode(z, pre)


def _code_array(z):
    return z.z if isinstance(z, MappingCode) else np.asarray(z, np.float64)


def decode(model, x, z):
    """Predicted y from input x and code z (MappingCode or raw array)."""
    p = model.params
    x, single = _as_batch2d(x, p.num_x, "x")
    z, _ = _as_batch2d(_code_array(z), p.num_maps, "z")
    out = ((x @ p.wx) * (z @ p.wz)) @ p.wy.T + p.bias_y
    return out[0] if single else out


def decode_reverse(model, y, z):
    """Predicted x from output y and code z (role-swapped decoder)."""
    p = model.params
    y, single = _as_batch2d(y, p.num_y, "y")
    z, _ = _as_batch2d(_code_array(z), p.num_maps, "z")
    out = ((y @ p.wy) * (z @ p.wz)) @ p.wx.T + p.bias_x
    return out[0] if single else out


def corrupt_inputs(rng, x, y, level):
    """Zero-mask a fraction `level` of entries of both images."""
    xc = np.where(rng.random(x.shape) < level, 0.0, x)
    yc = np.where(rng.random(y.shape) < level, 0.0, y)
    return xc, yc


def _forward_backward(params, x, y, xc, yc, sparsity, symmetric,
                      want_grads):
    """Loss and (optionally) exact gradients for a clean-target batch.

    xc/yc are the encoder and conditioning inputs (equal to x/y unless
    denoising); reconstruction error is always against the clean x/y.
    """
    n = x.shape[0]
    fx = xc @ params.wx
    fy = yc @ params.wy
    pre = (fx * fy) @ params.wz.T + params.bias_z
    z = sigmoid(pre)
    fz = z @ params.wz
    y_hat = (fx * fz) @ params.wy.T + params.bias_y
    loss = float(np.sum((y_hat - y) ** 2)) / n
    if symmetric:
        x_hat = (fy * fz) @ params.wx.T + params.bias_x
        loss += float(np.sum((x_hat - x) ** 2)) / n
    if sparsity:
        loss += sparsity * float(np.sum(np.abs(z))) / n
    if not want_grads:
        return loss, None

    dy_hat = (2.0 / n) * (y_hat - y)
    dwy = dy_hat.T @ (fx * fz)
    dbias_y = dy_hat.sum(axis=0)
    dfx = (dy_hat @ params.wy) * fz
    dfz = (dy_hat @ params.wy) * fx
    dwx = np.zeros_like(params.wx)
    dbias_x = np.zeros_like(params.bias_x)
    dfy = np.zeros_like(fy)
    if symmetric:
        dx_hat = (2.0 / n) * (x_hat - x)
        dwx += dx_hat.T @ (fy * fz)
        dbias_x = dx_hat.sum(axis=0)
        dfy += (dx_hat @ params.wx) * fz
        dfz += (dx_hat @ params.wx) * fy
    dz = dfz @ params.wz.T
    if sparsity:
        dz += (sparsity / n) * np.sign(z)
    dwz = z.T @ dfz
    dpre = dz * z * (1.0 - z)
    dwz += dpre.T @ (fx * fy)
    dbias_z = dpre.sum(axis=0)
    dfx += (dpre @ params.wz) * fy
    dfy += (dpre @ params.wz) * fx
    dwx += xc.T @ dfx
    dwy += yc.T @ dfy
    return loss, Gradients(dwx, dwy, dwz, dbias_x, dbias_y, dbias_z)


def _batch_inputs(model, batch, inputs):
    x = batch.x
    y = batch.y
    if inputs is None:
        return x, y, x, y
    xc, yc = inputs
    xc, _ = _as_batch2d(xc, model.params.num_x, "corrupted x")
    yc, _ = _as_batch2d(yc, model.params.num_y, "corrupted y")
    return x, y, xc, yc


def loss(model, batch, config, inputs=None):
    """Mean symmetric reconstruction loss plus sparsity penalty.

    inputs optionally carries pre-corrupted (xc, yc) encoder inputs so
    denoising losses are a deterministic function of their arguments.
    """
    if batch.num_pairs == 0:
        raise ValueError("batch is empty")
    x, y, xc, yc = _batch_inputs(model, batch, inputs)
    value, _ = _forward_backward(model.params, x, y, xc, yc,
                                 config.sparsity_weight, config.symmetric,
                                 False)
    return value


def gradients(model, batch, config, inputs=None):
    """Exact analytic gradients of loss(); tied models report the combined
    gradient of the shared matrix in both dwx and dwy."""
    if batch.num_pairs == 0:
        raise ValueError("batch is empty")
    x, y, xc, yc = _batch_inputs(model, batch, inputs)
    _, grads = _forward_backward(model.params, x, y, xc, yc,
                                 config.sparsity_weight, config.symmetric,
                                 True)
    if model.tied_xy:
        combined = grads.dwx + grads.dwy
        grads.dwx = combined
        grads.dwy = combined
    return grads


def finite_difference_check(model, batch, config, inputs=None, h=1e-5):
    """Compare analytic gradients against central differences.

    Returns the worst relative error |a - fd| / max(|a| + |fd|, 1e-4) over
    every parameter entry.  For denoising configs pass the corrupted
    inputs explicitly so both loss evaluations see the same mask.  Tied
    models perturb the shared matrix once (its gradient is the combined
    dwx entry).
    """
    grads = gradients(model, batch, config, inputs)
    pairs = [(model.params.wx, grads.dwx),
             (model.params.wz, grads.dwz),
             (model.params.bias_x, grads.dbias_x),
             (model.params.bias_y, grads.dbias_y),
             (model.params.bias_z, grads.dbias_z)]
    if not model.tied_xy:
        pairs.insert(1, (model.params.wy, grads.dwy))
    worst = 0.0
    for array, grad in pairs:
        flat = array.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + h
            plus = loss(model, batch, config, inputs)
            flat[idx] = saved - h
            minus = loss(model, batch, config, inputs)
            flat[idx] = saved
            fd = (plus - minus) / (2.0 * h)
            rel = abs(gflat[idx] - fd) / max(abs(gflat[idx]) + abs(fd),
                                             1e-4)
            worst = max(worst, rel)
    return worst


def _renormalize_columns(matrix, target, rng):
    norms = np.linalg.norm(matrix, axis=0)
    dead = norms < 1e-12
    if np.any(dead):
        matrix[:, dead] = 0.01 * rng.standard_normal(
            (matrix.shape[0], int(dead.sum())))
        norms = np.linalg.norm(matrix, axis=0)
    matrix *= target / norms


def apply_norm_constraint(model, rng):
    """Rescale every wx/wy column to the running-average norm (decay 0.95);
    zero columns are re-randomized first."""
    p = model.params
    norms = np.linalg.norm(p.wx, axis=0)
    if not model.tied_xy:
        norms = np.concatenate([norms, np.linalg.norm(p.wy, axis=0)])
    live = norms[norms > 1e-12]
    current = float(live.mean()) if live.size else model.norm_running_avg
    model.norm_running_avg = (NORM_DECAY * model.norm_running_avg
                              + (1 - NORM_DECAY) * current)
    _renormalize_columns(p.wx, model.norm_running_avg, rng)
    if not model.tied_xy:
        _renormalize_columns(p.wy, model.norm_running_avg, rng)


def train(model, batch, config, callbacks=None):
    """Minibatch SGD with momentum; returns (trained model, trace).

    The trace is a list of {epoch, batch, loss, grad_norm} records, one per
    minibatch (loss measured before the update).  Deterministic given
    config.seed; aborts with TrainingDivergedError on non-finite
    parameters.  learning_rate 0 leaves the model untouched.
    """
    if batch.num_pairs == 0:
        raise ValueError("batch is empty")
    model = model.copy()
    model.config = config
    p = model.params
    rng = np.random.default_rng(config.seed)
    step = config.learning_rate > 0
    targets = [p.wx, p.wz, p.bias_x, p.bias_y, p.bias_z]
    if not model.tied_xy:
        targets.insert(1, p.wy)
    velocities = [np.zeros_like(t) for t in targets]
    trace = []
    num_batches = math.ceil(batch.num_pairs / config.batch_size)
    for epoch in range(config.epochs):
        perm = rng.permutation(batch.num_pairs)
        for b in range(num_batches):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            x = batch.x[idx]
            y = batch.y[idx]
            if config.corruption_level > 0:
                xc, yc = corrupt_inputs(rng, x, y, config.corruption_level)
            else:
                xc, yc = x, y
            value, grads = _forward_backward(
                p, x, y, xc, yc, config.sparsity_weight, config.symmetric,
                want_grads=step)
            if step:
                if model.tied_xy:
                    glist = [grads.dwx + grads.dwy, grads.dwz,
                             grads.dbias_x, grads.dbias_y, grads.dbias_z]
                else:
                    glist = [grads.dwx, grads.dwy, grads.dwz,
                             grads.dbias_x, grads.dbias_y, grads.dbias_z]
                for vel, target, grad in zip(velocities, targets, glist):
                    vel *= config.momentum
                    vel -= config.learning_rate * grad
                    target += vel
                if config.norm_constraint:
                    apply_norm_constraint(model, rng)
                if not p.is_finite():
                    raise TrainingDivergedError(
                        f"non-finite parameters at epoch {epoch} batch {b}; "
                        "reduce the learning rate"
                    )
                grad_norm = math.sqrt(sum(float(np.sum(g * g))
                                          for g in glist))
            else:
                grad_norm = 0.0
            record = {"epoch": epoch, "batch": b, "loss": value,
                      "grad_norm": grad_norm}
            trace.append(record)
            if callbacks:
                for cb in callbacks:
                    cb(record, model)
    return model, trace


def save_gae(path, model, extra_manifest=None):
    from .tensor_core import save_params

    manifest = {
        "tied_xy": model.tied_xy,
        "norm_running_avg": model.norm_running_avg,
    }
    if model.config is not None:
        manifest["train_config"] = asdict(model.config)
    if extra_manifest:
        manifest.update(extra_manifest)
    return save_params(path, model.params, kind="gae",
                       extra_manifest=manifest)


def load_gae(path):
    from .tensor_core import load_params

    params, manifest = load_params(path)
    config = None
    if "train_config" in manifest:
        config = TrainConfig(**manifest["train_config"])
    model = GaeModel(params, bool(manifest.get("tied_xy", False)),
                     float(manifest.get("norm_running_avg", 1.0)), config)
    return model
