"""Spectral view of image transformations and subspace rotation detectors.

An orthogonal warp L (y = Lx) has a complex eigendecomposition L = U D U^H
whose eigenvalues lie on the unit circle.  Conjugate eigenvector pairs
(v, v*) span two-dimensional real invariant subspaces; inside such a
subspace the warp acts as a planar rotation by the eigenvalue angle.  A
family of warps that commute (e.g. all cyclic shifts of a signal) shares
one eigenbasis, so a single set of filters diagonalizes every
transformation in the family: for 1-D cyclic shifts that basis is the DFT.

Writing the complex projections of a pair onto an eigenvector v as
p_x = v^T x and p_y = v^T y (polar forms rho_x e^{i phi_x}, rho_y
e^{i phi_y}), the subspace rotation detector with preferred angle theta is

    r_theta = (v_R^T y)(v^theta_R^T x) + (v_I^T y)(v^theta_I^T x)
            = Re[ p_y conj(p_x) e^{-i theta} ]
            = rho_x rho_y cos(phi_y - phi_x - theta)

where v^theta = e^{i theta} v and subscripts R/I take real and imaginary
parts.  r_theta peaks over theta exactly at the rotation the pair underwent
within that subspace, scaled by both projection magnitudes: when either
image barely occupies the subspace the detector reports nothing rather
than a normalized illusion of an angle (the subspace version of the
aperture problem; deliberately no normalization here).

The corresponding energy-model response is

    e_theta = (v_R^T y + v^theta_R^T x)^2 + (v_I^T y + v^theta_I^T x)^2
            = |p_y + e^{i theta} p_x|^2
            = 2 r_theta + rho_x^2 + rho_y^2,

so the quadratic terms do not depend on theta and both detectors peak at
the same angle.

shared_eigenbasis() simultaneously diagonalizes a commuting family by
decomposing a random real linear combination of the warps (commuting
orthogonal matrices make the combination normal, so its Schur form is
diagonal and its Schur vectors are a joint unitary eigenbasis).  The basis
is canonicalized: real-eigenvalue groups are rotated to purely real
vectors, each strictly-complex eigenvector is paired with its exact
conjugate, phases are fixed by making the largest component real-positive,
and columns are ordered by principal eigenvalue angle with conjugate pairs
adjacent.

Sign conventions (pinned here, used by the tests): make_cyclic_shift(n, s)
moves content s steps toward higher indices (y = np.roll(x, s)), so the
Fourier vector v_k[i] = e^{2 pi i k i / n} has eigenvalue e^{-2 pi i k s/n}
and a pair (x, S_s x) makes the detector built on v_k peak at
theta = 2 pi k s / n.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DataError, NotNormalizedWarning, NumericalError


@dataclass(frozen=True)
class WarpMatrix:
    """A linear transformation L acting on vectorized images, y = Lx.

    kind tags the construction: "cyclic-shift", "permutation", "rotation",
    or "custom".
    """

    L: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        L = np.asarray(self.L, dtype=np.float64)
        object.__setattr__(self, "L", L)
        if L.ndim != 2:
            raise ValueError("warp must be a matrix")
        if not np.all(np.isfinite(L)):
            raise ValueError("warp contains non-finite entries")

    @property
    def dim(self):
        return self.L.shape[1]

    def is_orthogonal(self, tol=1e-10):
        if self.L.shape[0] != self.L.shape[1]:
            return False
        gram = self.L.T @ self.L
        return np.max(np.abs(gram - np.eye(self.L.shape[1]))) < tol


def make_cyclic_shift(n, s):
    """Permutation warp shifting a length-n signal s steps forward.

    (Lx)[j] = x[(j - s) mod n], identical to np.roll(x, s).
    """
    if not 0 <= s < n:
        raise ValueError(f"shift {s} out of range [0, {n})")
    L = np.zeros((n, n))
    j = np.arange(n)
    L[j, (j - s) % n] = 1.0
    return WarpMatrix(L, "cyclic-shift")


def make_2d_shift(h, w, sr, sc):
    """Permutation warp cyclically shifting an h x w image by (sr, sc).

    Row-major vectorization; content moves sr rows down and sc columns
    right, identical to np.roll(img, (sr, sc), axis=(0, 1)).  Note the
    row-first argument order here versus the (sx, sy) = (column, row)
    labels used by the data generators.
    """
    if not 0 <= sr < h:
        raise ValueError(f"row shift {sr} out of range [0, {h})")
    if not 0 <= sc < w:
        raise ValueError(f"column shift {sc} out of range [0, {w})")
    n = h * w
    rows = np.repeat(np.arange(h), w)
    cols = np.tile(np.arange(w), h)
    src = ((rows - sr) % h) * w + (cols - sc) % w
    L = np.zeros((n, n))
    L[np.arange(n), src] = 1.0
    return WarpMatrix(L, "cyclic-shift")


def commute_residual(a, b):
    """max |AB - BA|, zero iff the warps commute."""
    a = a.L if isinstance(a, WarpMatrix) else np.asarray(a)
    b = b.L if isinstance(b, WarpMatrix) else np.asarray(b)
    return float(np.max(np.abs(a @ b - b @ a)))


@dataclass
class EigenStructure:
    """A joint eigenbasis of one or more commuting warps.

    basis holds unit eigenvectors as columns (complex); eigenvalues are
    those of the first warp, all_eigenvalues one row per warp.
    pair_indices lists (column of v, column of conj(v)) per
    two-dimensional invariant subspace, real_indices the purely real
    columns; subspace_pairs holds (sqrt(2) Re v, sqrt(2) Im v) per pair,
    an orthonormal real basis of each 2-D subspace.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    all_eigenvalues: np.ndarray
    pair_indices: list = field(default_factory=list)
    real_indices: list = field(default_factory=list)
    subspace_pairs: list = field(default_factory=list)

    @property
    def dim(self):
        return self.basis.shape[0]

    def subspace_bases(self):
        """Real orthonormal basis per invariant subspace.

        Yields (n, 2) matrices for quadrature pairs and (n, 1) for real
        eigenvector lines, in basis order.
        """
        out = []
        for re, im in self.subspace_pairs:
            out.append(np.column_stack([re, im]))
        for idx in self.real_indices:
            out.append(self.basis[:, idx].real.reshape(-1, 1))
        return out


def _as_matrices(warps):
    mats = []
    for w in warps:
        mats.append(w.L if isinstance(w, WarpMatrix) else
                    np.asarray(w, dtype=np.float64))
    if not mats:
        raise ValueError("need at least one warp")
    n = mats[0].shape[0]
    for m in mats:
        if m.shape != (n, n):
            raise ValueError("all warps must be square with equal dims")
    return mats, n


def _realify_group(vecs):
    """Real orthonormal basis for the span of eigenvectors whose
    eigenvalue tuples are real (the span is closed under conjugation)."""
    g = vecs.shape[1]
    stack = np.hstack([vecs.real, vecs.imag])
    u, s, _ = np.linalg.svd(stack, full_matrices=False)
    basis = u[:, :g]
    for c in range(g):
        col = basis[:, c]
        j = int(np.argmax(np.abs(col)))
        if col[j] < 0:
            basis[:, c] = -col
    return basis


def shared_eigenbasis(warps, commute_tol=1e-8, offdiag_tol=1e-6, seed=0,
                      max_tries=8):
    """Simultaneously diagonalize a family of commuting orthogonal warps.

    Returns an EigenStructure whose unitary basis U satisfies, for every
    warp L in the family, U^H L U diagonal with off-diagonal magnitudes
    below offdiag_tol.  Degenerate eigenspaces are resolved by
    eigendecomposing a random real linear combination of the warps
    (re-drawn on the rare failure).  Raises DataError naming the first
    non-commuting pair, NumericalError if no joint basis is found.
    """
    mats, n = _as_matrices(warps)
    for a in range(len(mats)):
        for b in range(a + 1, len(mats)):
            res = commute_residual(mats[a], mats[b])
            if res >= commute_tol:
                raise DataError(
                    f"warps {a} and {b} do not commute "
                    f"(max |AB - BA| = {res:.3g})"
                )
    rng = np.random.default_rng(seed)
    basis = None
    for _ in range(max_tries):
        coeffs = rng.standard_normal(len(mats))
        combo = sum(c * m for c, m in zip(coeffs, mats))
        _, z = scipy.linalg.schur(combo.astype(complex), output="complex")
        diags = [z.conj().T @ m @ z for m in mats]
        resid = max(
            float(np.max(np.abs(d - np.diag(np.diag(d))))) for d in diags
        )
        if resid < offdiag_tol:
            basis = z
            lams = np.array([np.diag(d) for d in diags])
            break
    if basis is None:
        raise NumericalError(
            "failed to jointly diagonalize the warps; are they orthogonal "
            "(or at least normal)?"
        )

    real_tol = 1e-8
    is_real = np.all(np.abs(lams.imag) < real_tol, axis=0)

    # Rotate real-eigenvalue groups (grouped by their shared eigenvalue
    # tuple) onto purely real vectors.
    basis = basis.astype(complex)
    real_ids = np.flatnonzero(is_real)
    grouped = {}
    for idx in real_ids:
        key = tuple(np.round(lams[:, idx].real, 6))
        grouped.setdefault(key, []).append(int(idx))
    for ids in grouped.values():
        basis[:, ids] = _realify_group(basis[:, ids])

    # Pair strictly-complex vectors with their conjugates and force the
    # partner to be the exact conjugate.
    complex_ids = [int(i) for i in np.flatnonzero(~is_real)]
    unused = set(complex_ids)
    pairs = []
    for a in complex_ids:
        if a not in unused:
            continue
        unused.discard(a)
        target = np.conj(lams[:, a])
        best, best_err = None, np.inf
        for b in sorted(unused):
            err = float(np.max(np.abs(lams[:, b] - target)))
            if err < best_err:
                best, best_err = b, err
        if best is None or best_err > 1e-6:
            raise NumericalError(
                "eigenvalue spectrum is not conjugate-symmetric; warps "
                "must be real matrices"
            )
        unused.discard(best)
        # Representative: negative imaginary part at its first strictly
        # complex eigenvalue (positive spatial frequency for shifts).
        first = int(np.flatnonzero(np.abs(lams[:, a].imag) >= real_tol)[0])
        rep, other = (a, best) if lams[first, a].imag < 0 else (best, a)
        v = basis[:, rep]
        j = int(np.argmax(np.abs(v)))
        v = v * np.exp(-1j * np.angle(v[j]))
        basis[:, rep] = v
        basis[:, other] = np.conj(v)
        lams[:, other] = np.conj(lams[:, rep])
        pairs.append((rep, other))

    # Recompute eigenvalues exactly in the canonical basis.
    lams = np.array([np.einsum("ij,jk,ki->i", basis.conj().T, m, basis)
                     for m in mats])

    # Order: units (pairs and real lines) sorted by principal eigenvalue
    # angles, original index as tie-break; pair representative first.
    units = [[rep, other] for rep, other in pairs]
    units += [[int(i)] for i in real_ids]

    def unit_key(unit):
        angles = tuple(np.abs(np.angle(lams[m, unit[0]]))
                       for m in range(len(mats)))
        return angles + (unit[0],)

    order = [idx for unit in sorted(units, key=unit_key) for idx in unit]
    basis = basis[:, order]
    lams = lams[:, order]
    position = {old: new for new, old in enumerate(order)}

    pair_indices = sorted(
        (position[rep], position[other]) for rep, other in pairs
    )
    real_indices = sorted(position[int(i)] for i in real_ids)
    subspace_pairs = [
        (np.sqrt(2) * basis[:, a].real, np.sqrt(2) * basis[:, a].imag)
        for a, _ in pair_indices
    ]

    structure = EigenStructure(basis, lams[0], lams, pair_indices,
                               real_indices, subspace_pairs)
    for m, mat in enumerate(mats):
        recon = basis @ np.diag(lams[m]) @ basis.conj().T
        if np.max(np.abs(mat - recon)) > 1e-8:
            raise NumericalError(
                f"joint basis does not reconstruct warp {m}"
            )
    return structure


@dataclass
class DetectorBank:
    """Rotation detectors over the invariant subspaces of an eigenbasis.

    u holds one complex filter per detector as rows (real and imaginary
    parts are unit filters spanning the subspace; purely real rows mark
    one-dimensional eigenlines), theta the preferred angles, and
    v = e^{i theta} u the rotated output-side filters.  p is the
    band-diagonal matrix pooling the stacked (real, imaginary) product
    rows of each detector; w_pool mixes detectors into pooled outputs.

    Angle-sign convention: detector_response reports r at +theta, i.e. it
    peaks when the pair's subspace rotation equals theta; the pooled path
    t = w_pool^T p ((U x) * (V y)) applies the rotated filter to y, which
    tags the same pair at -theta.  Both are exposed as stated; tests pin
    the relation.
    """

    u: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    w_pool: np.ndarray

    @property
    def num_detectors(self):
        return self.u.shape[0]

    def stacked(self):
        """(2S, n) real matrices: interleaved (Re, Im) rows of u and v."""
        s, n = self.u.shape
        su = np.empty((2 * s, n))
        sv = np.empty((2 * s, n))
        su[0::2], su[1::2] = self.u.real, self.u.imag
        sv[0::2], sv[1::2] = self.v.real, self.v.imag
        return su, sv


def make_detector_bank(eigen, theta=None, w_pool=None, include_real=True):
    """Build a DetectorBank from an eigenbasis.

    One detector per 2-D invariant subspace (filter sqrt(2) * eigenvector,
    so its real and imaginary parts are unit vectors) plus, when
    include_real, one per real eigenline.  theta defaults to zeros; scalar
    theta is broadcast.  w_pool defaults to identity (no across-subspace
    mixing).
    """
    rows = [np.sqrt(2) * eigen.basis[:, a] for a, _ in eigen.pair_indices]
    if include_real:
        rows += [eigen.basis[:, i].real.astype(complex)
                 for i in eigen.real_indices]
    if not rows:
        raise ValueError("eigenbasis yields no detectors")
    u = np.array(rows)
    s = u.shape[0]
    theta = np.zeros(s) if theta is None else np.broadcast_to(
        np.asarray(theta, dtype=np.float64), (s,)).copy()
    v = np.exp(1j * theta)[:, None] * u
    p = np.zeros((s, 2 * s))
    p[np.arange(s), 2 * np.arange(s)] = 1.0
    p[np.arange(s), 2 * np.arange(s) + 1] = 1.0
    w_pool = np.eye(s) if w_pool is None else np.asarray(w_pool, float)
    if w_pool.shape[0] != s:
        raise ValueError("w_pool rows must match detector count")
    return DetectorBank(u, v, theta, p, w_pool)


def _warn_if_unnormalized(x, y):
    for name, img in (("x", x), ("y", y)):
        norm = np.linalg.norm(img)
        if norm > 0 and (abs(img.mean()) > 1e-6 * norm
                         or abs(norm - 1.0) > 0.01):
            warnings.warn(
                f"{name} does not look contrast-normalized; detector "
                "magnitudes mix content and angle",
                NotNormalizedWarning,
                stacklevel=3,
            )
            return


def rotation_response(u, x, y, theta):
    """Subspace rotation detector r_theta for one complex filter u.

    r = Re[(u^T y) conj((e^{i theta} u)^T x)]; theta may be an array, in
    which case the response curve over those angles is returned.
    """
    u = np.asarray(u, dtype=complex).ravel()
    px = complex(u @ np.asarray(x, dtype=np.float64).ravel())
    py = complex(u @ np.asarray(y, dtype=np.float64).ravel())
    theta = np.asarray(theta, dtype=np.float64)
    return np.real(py * np.conj(px) * np.exp(-1j * theta))


def rotation_response_curve(u, x, y, num_angles=360):
    """r_theta sampled on the uniform angle grid 2 pi g / num_angles."""
    thetas = 2 * np.pi * np.arange(num_angles) / num_angles
    return thetas, rotation_response(u, x, y, thetas)


def energy_rotation_response(u, x, y, theta):
    """Energy-model detector e_theta = |u^T y + e^{i theta} u^T x|^2.

    Computed from the four real filter responses, matching the energy
    model's sum of squared linear outputs; algebraically equal to
    2 r_theta + rho_x^2 + rho_y^2.
    """
    u = np.asarray(u, dtype=complex).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    theta = np.asarray(theta, dtype=np.float64)
    ur, ui = u.real, u.imag
    rot = np.exp(1j * theta)
    vr_x = np.real(rot)[...] * (ur @ x) - np.imag(rot) * (ui @ x)
    vi_x = np.imag(rot) * (ur @ x) + np.real(rot) * (ui @ x)
    return (ur @ y + vr_x) ** 2 + (ui @ y + vi_x) ** 2


def detector_response(bank, x, y):
    """Per-detector responses r (at each preferred angle) and pooled t.

    r[f] = Re[(u_f^T y) conj((e^{i theta_f} u_f)^T x)]; the pooled vector
    is t = w_pool^T p ((U_stack x) * (V_stack y)) over stacked
    real/imaginary rows.  Warns when inputs are not contrast-normalized.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != bank.u.shape[1] or y.shape[0] != bank.u.shape[1]:
        raise ValueError("image dims do not match detector filters")
    _warn_if_unnormalized(x, y)
    px = bank.u @ x
    py = bank.u @ y
    r = np.real(py * np.conj(px) * np.exp(-1j * bank.theta))
    su, sv = bank.stacked()
    t = bank.w_pool.T @ (bank.p @ ((su @ x) * (sv @ y)))
    return r, t


def energy_detector_response(bank, x, y):
    """Energy-model response per detector at its preferred angle."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != bank.u.shape[1] or y.shape[0] != bank.u.shape[1]:
        raise ValueError("image dims do not match detector filters")
    return np.array([
        float(energy_rotation_response(bank.u[f], x, y, bank.theta[f]))
        for f in range(bank.num_detectors)
    ])


def filter_diagnostics(filters, eigen):
    """How well real filters align with an eigenbasis's invariant subspaces.

    filters: (n, F) with one filter per column.  For each filter reports
    the best invariant subspace of the reference and the fraction of the
    filter's energy inside it; adjacent filter pairs (2t, 2t+1) also get a
    quadrature score |sin(phase difference)| measured in their best joint
    subspace (1.0 = exact 90-degree pair).  Returns a JSON-ready dict.
    """
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim != 2:
        raise ValueError("filters must be (dim, num_filters)")
    if filters.shape[0] != eigen.dim:
        raise ValueError(
            f"filter dim {filters.shape[0]} does not match eigenbasis dim "
            f"{eigen.dim}"
        )
    bases = eigen.subspace_bases()
    per_filter = []
    coords = []
    for col in range(filters.shape[1]):
        w = filters[:, col]
        norm = np.linalg.norm(w)
        if norm < 1e-12:
            per_filter.append(
                {"filter": col, "best_subspace": -1, "energy_fraction": 0.0}
            )
            coords.append(None)
            continue
        wn = w / norm
        fractions = [float(np.sum((b.T @ wn) ** 2)) for b in bases]
        best = int(np.argmax(fractions))
        per_filter.append({
            "filter": col,
            "best_subspace": best,
            "energy_fraction": fractions[best],
        })
        coords.append([b.T @ wn for b in bases])
    quadrature = []
    for a in range(0, filters.shape[1] - 1, 2):
        b = a + 1
        if coords[a] is None or coords[b] is None:
            quadrature.append({"pair": (a, b), "score": 0.0, "subspace": -1})
            continue
        joint = [np.sum(ca ** 2) + np.sum(cb ** 2)
                 for ca, cb in zip(coords[a], coords[b])]
        s = int(np.argmax(joint))
        if coords[a][s].shape[0] < 2:
            quadrature.append({"pair": (a, b), "score": 0.0, "subspace": s})
            continue
        pa = np.arctan2(coords[a][s][1], coords[a][s][0])
        pb = np.arctan2(coords[b][s][1], coords[b][s][0])
        quadrature.append({
            "pair": (a, b),
            "score": float(np.abs(np.sin(pb - pa))),
            "subspace": s,
        })
    fractions = np.array([p["energy_fraction"] for p in per_filter])
    hist, edges = np.histogram(fractions, bins=10, range=(0.0, 1.0))
    return {
        "num_filters": filters.shape[1],
        "per_filter": per_filter,
        "mean_fraction": float(fractions.mean()),
        "median_fraction": float(np.median(fractions)),
        "histogram": {
            "counts": hist.tolist(),
            "edges": edges.tolist(),
        },
        "quadrature": quadrature,
    }


def dft_concentration(filters, num_bins=2):
    """Fraction of each filter's spectral energy in its top DFT bins.

    filters: (n, F) columns.  Uses the full two-sided spectrum, so a pure
    sinusoid concentrates in exactly two bins (+-k) and scores 1.0.
    """
    filters = np.asarray(filters, dtype=np.float64)
    power = np.abs(np.fft.fft(filters, axis=0)) ** 2
    total = power.sum(axis=0)
    total[total == 0] = 1.0
    top = np.sort(power, axis=0)[-num_bins:, :].sum(axis=0)
    return top / total


def spacetime_phase_drift(filters, height, width, num_frames):
    """Linear phase drift of space-time filters across frames.

    Each filter column (length num_frames * height * width, frame-major)
    is unfolded into frames; the dominant spatial frequency bin of the
    mean power spectrum is tracked across frames, its unwrapped phase fit
    to a line in frame index.  A filter tuned to coherent motion drifts
    linearly (slope = spatial frequency dot velocity), so the fit R^2 is
    near 1.  Returns a list of {filter, slope, r2, bin} records.
    """
    filters = np.asarray(filters, dtype=np.float64)
    if filters.shape[0] != height * width * num_frames:
        raise ValueError("filter length does not match the movie geometry")
    records = []
    for col in range(filters.shape[1]):
        frames = filters[:, col].reshape(num_frames, height, width)
        spectra = np.fft.fft2(frames)
        power = np.abs(spectra).mean(axis=0) ** 2
        power[0, 0] = 0.0
        if power.max() <= 0:
            records.append({"filter": col, "slope": 0.0, "r2": 0.0,
                            "bin": (0, 0)})
            continue
        kr, kc = np.unravel_index(int(np.argmax(power)), power.shape)
        phases = np.unwrap(np.angle(spectra[:, kr, kc]))
        t = np.arange(num_frames)
        slope, intercept = np.polyfit(t, phases, 1)
        resid = phases - (slope * t + intercept)
        ss_tot = float(np.sum((phases - phases.mean()) ** 2))
        if ss_tot < 1e-12:
            r2 = 1.0
        else:
            r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot
        records.append({
            "filter": col,
            "slope": float(slope),
            "r2": float(r2),
            "bin": (int(kr), int(kc)),
        })
    return records
