"""Zero-shot two-stage registration from frozen features, plus its metrics.

Rigid alignment searches integer offsets with class tokens (slice offset)
then patch tokens (in-plane); deformable alignment optimizes a dense
displacement field over patch tokens.

Displacement convention used everywhere here: a field ``u`` (and a rigid
estimate ``(dz, dy, dx)``) maps a fixed-grid position ``x`` to the matching
moving-grid position ``x + u(x)``.  Warping therefore pulls moving-volume
samples onto the fixed frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .encoders.base import FeatureMap
from .errors import (DataError, DegenerateError, DivergenceError,
                     InsufficientOverlapError, ShapeError)
from .rng import generator

_EPS = 1e-12


@dataclass
class FeatureVolume:
    """Per-slice feature maps stacked into (Z, D) class and (Z, H, W, D) patch grids."""

    class_tokens: np.ndarray
    patch_tokens: np.ndarray
    volume_id: str = ""

    def __post_init__(self):
        self.class_tokens = np.asarray(self.class_tokens, dtype=np.float64)
        self.patch_tokens = np.asarray(self.patch_tokens, dtype=np.float64)
        if self.class_tokens.ndim != 2 or self.patch_tokens.ndim != 4:
            raise ShapeError("class tokens must be (Z, D); patch tokens (Z, H, W, D)")
        if (self.class_tokens.shape[0] != self.patch_tokens.shape[0]
                or self.class_tokens.shape[1] != self.patch_tokens.shape[3]):
            raise ShapeError("class/patch token shapes disagree")
        if not (np.all(np.isfinite(self.class_tokens))
                and np.all(np.isfinite(self.patch_tokens))):
            raise DataError("feature volume contains non-finite values")

    @classmethod
    def from_maps(cls, maps: list[FeatureMap], volume_id: str = "") -> "FeatureVolume":
        if not maps:
            raise ShapeError("empty feature-map list")
        descs = {m.descriptor for m in maps}
        if len(descs) != 1:
            raise ShapeError("feature maps carry conflicting descriptors")
        return cls(class_tokens=np.stack([m.class_token for m in maps]),
                   patch_tokens=np.stack([m.patch_tokens for m in maps]),
                   volume_id=volume_id or maps[0].source[0])

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.patch_tokens.shape[:3]


@dataclass
class RigidEstimate:
    dz: int
    dy: int
    dx: int
    score: float

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.dz, self.dy, self.dx)


ZERO_RIGID = RigidEstimate(0, 0, 0, 1.0)


@dataclass
class DisplacementField:
    """(Z', H', W', 3) displacements in feature-grid units, order (dz, dy, dx).

    ``scale`` holds voxels per grid cell along each axis, fixing how the field
    maps onto the voxel grid it was derived from.
    """

    u: np.ndarray
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 4 or self.u.shape[3] != 3:
            raise ShapeError(f"field must be (Z, H, W, 3), got {self.u.shape}")
        if not np.all(np.isfinite(self.u)):
            raise DataError("displacement field contains non-finite values")


# -- cosine helpers -----------------------------------------------------------------

def _normalize(tokens: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(tokens, axis=-1, keepdims=True)
    return tokens / np.maximum(norms, _EPS)


def _mean_cos(a: np.ndarray, b: np.ndarray) -> float:
    return float((_normalize(a) * _normalize(b)).sum(axis=-1).mean())


# -- rigid alignment -----------------------------------------------------------------

def rigid_align(fixed: FeatureVolume, moving: FeatureVolume) -> RigidEstimate:
    """Exhaustive integer search: slice offset by class tokens, then in-plane.

    ``dz`` maximizes the mean class-token cosine over the slice overlap;
    ``(dy, dx)`` then maximize the mean patch-token cosine over shifts within
    +-25% of the grid extent.  fixed[z] is matched against moving[z + dz].
    """
    if fixed.class_tokens.shape[1] != moving.class_tokens.shape[1]:
        raise ShapeError("fixed/moving encoders disagree (embed dim)")
    zf = fixed.class_tokens.shape[0]
    zm = moving.class_tokens.shape[0]
    f_cls = _normalize(fixed.class_tokens)
    m_cls = _normalize(moving.class_tokens)

    best_dz, best_score, best_overlap = None, -np.inf, 0
    half = max(zf, zm) // 2
    for dz in range(-half, half + 1):
        lo = max(0, -dz)
        hi = min(zf, zm - dz)
        overlap = hi - lo
        if overlap < 1:
            continue
        score = float((f_cls[lo:hi] * m_cls[lo + dz:hi + dz]).sum(axis=-1).mean())
        if score > best_score:
            best_dz, best_score, best_overlap = dz, score, overlap
    if best_dz is None or best_overlap < 3:
        raise InsufficientOverlapError(
            f"best slice offset leaves only {best_overlap} overlapping slices")

    lo = max(0, -best_dz)
    hi = min(zf, zm - best_dz)
    f_pat = _normalize(fixed.patch_tokens[lo:hi])
    m_pat = _normalize(moving.patch_tokens[lo + best_dz:hi + best_dz])
    h, w = f_pat.shape[1:3]
    ry, rx = h // 4, w // 4

    best_dy = best_dx = 0
    best_plane = -np.inf
    for dy in range(-ry, ry + 1):
        y_lo, y_hi = max(0, -dy), min(h, h - dy)
        if y_hi - y_lo < 1:
            continue
        for dx in range(-rx, rx + 1):
            x_lo, x_hi = max(0, -dx), min(w, w - dx)
            if x_hi - x_lo < 1:
                continue
            f_view = f_pat[:, y_lo:y_hi, x_lo:x_hi]
            m_view = m_pat[:, y_lo + dy:y_hi + dy, x_lo + dx:x_hi + dx]
            score = float(np.einsum("zyxd,zyxd->", f_view, m_view)
                          / (f_view.shape[0] * f_view.shape[1] * f_view.shape[2]))
            if score > best_plane:
                best_dy, best_dx, best_plane = dy, dx, score
    return RigidEstimate(dz=best_dz, dy=best_dy, dx=best_dx, score=best_plane)


# -- trilinear sampling with analytic position gradients ------------------------------

def _sample_trilinear(vol: np.ndarray, pos: np.ndarray, with_grad: bool):
    """Sample (..., D) volume at (n, 3) positions with edge clamping.

    Returns (values (n, D), grads (n, 3, D) or None).  Position gradients are
    zeroed where the position saturates the clamp.
    """
    zs, hs, ws = vol.shape[:3]
    limits = np.array([zs - 1, hs - 1, ws - 1], dtype=np.float64)
    inside = (pos > 0.0) & (pos < limits)
    pc = np.clip(pos, 0.0, limits)
    i0 = np.minimum(np.floor(pc).astype(np.int64),
                    np.maximum(np.array([zs, hs, ws]) - 2, 0))
    t = pc - i0

    flat = vol.reshape(-1, vol.shape[3])
    stride_z, stride_y = hs * ws, ws
    base = i0[:, 0] * stride_z + i0[:, 1] * stride_y + i0[:, 2]
    step = [stride_z if zs > 1 else 0, stride_y if hs > 1 else 0, 1 if ws > 1 else 0]

    n, d = pos.shape[0], vol.shape[3]
    value = np.zeros((n, d))
    grads = np.zeros((n, 3, d)) if with_grad else None
    buf = np.empty((n, d))
    for cz in (0, 1):
        wz = t[:, 0] if cz else 1.0 - t[:, 0]
        dz = 1.0 if cz else -1.0
        for cy in (0, 1):
            wy = t[:, 1] if cy else 1.0 - t[:, 1]
            dy = 1.0 if cy else -1.0
            for cx in (0, 1):
                wx = t[:, 2] if cx else 1.0 - t[:, 2]
                dx = 1.0 if cx else -1.0
                idx = base + cz * step[0] + cy * step[1] + cx * step[2]
                corner = flat[idx]
                np.multiply(corner, (wz * wy * wx)[:, None], out=buf)
                value += buf
                if with_grad:
                    np.multiply(corner, (dz * (wy * wx))[:, None], out=buf)
                    grads[:, 0] += buf
                    np.multiply(corner, (dy * (wz * wx))[:, None], out=buf)
                    grads[:, 1] += buf
                    np.multiply(corner, (dx * (wz * wy))[:, None], out=buf)
                    grads[:, 2] += buf
    if with_grad:
        grads *= inside[:, :, None]
        return value, grads
    return value, None


# -- deformable registration -----------------------------------------------------------

def _reg_energy_and_grad(u: np.ndarray):
    """Mean squared forward-difference gradient of u and its gradient."""
    n_cells = u.shape[0] * u.shape[1] * u.shape[2]
    total = 0.0
    grad = np.zeros_like(u)
    for axis in range(3):
        if u.shape[axis] < 2:
            continue
        d = np.diff(u, axis=axis)
        total += float((d ** 2).sum())
        lead = [slice(None)] * 4
        lag = [slice(None)] * 4
        lead[axis] = slice(1, None)
        lag[axis] = slice(None, -1)
        grad[tuple(lead)] += 2.0 * d / n_cells
        grad[tuple(lag)] -= 2.0 * d / n_cells
    return total / n_cells, grad


def _data_energy_and_grad(f_hat: np.ndarray, moving: np.ndarray, u: np.ndarray,
                          with_grad: bool):
    """Mean (1 - cosine) between fixed tokens and displaced moving samples."""
    zs, hs, ws, _ = f_hat.shape
    n = zs * hs * ws
    grid = np.indices((zs, hs, ws), dtype=np.float64).transpose(1, 2, 3, 0)
    pos = (grid + u).reshape(n, 3)
    m, dm = _sample_trilinear(moving, pos, with_grad)
    f = f_hat.reshape(n, -1)
    m_norm = np.maximum(np.linalg.norm(m, axis=1), _EPS)
    m_hat = m / m_norm[:, None]
    cos = (f * m_hat).sum(axis=1)
    energy = float((1.0 - cos).mean())
    if not with_grad:
        return energy, None
    # d(1-cos)/dm = -(f - cos * m_hat) / |m|
    dcos_dm = (f - cos[:, None] * m_hat) / m_norm[:, None]
    gpos = -np.einsum("nd,nad->na", dcos_dm, dm) / n
    return energy, gpos.reshape(zs, hs, ws, 3)


def deformable_register(fixed: FeatureVolume, moving: FeatureVolume,
                        init: RigidEstimate = ZERO_RIGID, reg_lambda: float = 1.0,
                        iters: int = 500, step: float = 0.5,
                        momentum: float = 0.9) -> DisplacementField:
    """Dense displacement minimizing feature dissimilarity plus smoothness.

    First-order descent with momentum; steps are scaled so the largest cell
    update is ``step`` grid units, the step halves whenever a proposal would
    increase the loss, and the run stops early once the relative loss change
    over 10 iterations falls below 1e-5.
    """
    if fixed.grid_shape != moving.grid_shape:
        raise ShapeError(f"grids disagree: {fixed.grid_shape} vs {moving.grid_shape}")
    if reg_lambda < 0:
        raise ShapeError("reg_lambda must be >= 0")
    f_hat = _normalize(fixed.patch_tokens)
    m_vol = moving.patch_tokens

    u = np.zeros(fixed.grid_shape + (3,), dtype=np.float64)
    u[..., 0] += init.dz
    u[..., 1] += init.dy
    u[..., 2] += init.dx

    def loss_and_grad(cur, with_grad=True):
        e_data, g_data = _data_energy_and_grad(f_hat, m_vol, cur, with_grad)
        e_reg, g_reg = _reg_energy_and_grad(cur)
        total = e_data + reg_lambda * e_reg
        if not with_grad:
            return total, None
        return total, g_data + reg_lambda * g_reg

    loss, grad = loss_and_grad(u)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite loss at initialization", iteration=0)
    velocity = np.zeros_like(u)
    history = [loss]
    used = 0
    for it in range(1, iters + 1):
        used = it
        gnorm = float(np.linalg.norm(grad, axis=-1).max())
        direction = grad / max(gnorm, _EPS)
        velocity = momentum * velocity - step * direction
        proposal = u + velocity
        new_loss, new_grad = loss_and_grad(proposal)
        if not np.isfinite(new_loss):
            raise DivergenceError(f"non-finite loss at iteration {it}", iteration=it)
        if new_loss > loss:
            step *= 0.5
            velocity[:] = 0.0
        else:
            u, loss, grad = proposal, new_loss, new_grad
        history.append(loss)
        if len(history) > 10:
            ref = history[-11]
            if abs(ref - loss) < 1e-5 * max(abs(ref), _EPS):
                break
    return DisplacementField(u=u, meta={"iters_used": used,
                                        "loss_history": history,
                                        "final_loss": loss})


# -- warping ---------------------------------------------------------------------------

def upsample_field(field: DisplacementField, out_shape: tuple[int, int, int]) -> np.ndarray:
    """Trilinearly upsample u to the voxel grid; output is in voxel units."""
    zs, hs, ws = field.u.shape[:3]
    oz, oy, ox = out_shape
    scale = np.array([oz / zs, oy / hs, ox / ws], dtype=np.float64)
    vz, vy, vx = np.indices(out_shape, dtype=np.float64)
    # half-cell-center mapping from voxel coords to field-grid coords
    pos = np.stack([(vz + 0.5) / scale[0] - 0.5,
                    (vy + 0.5) / scale[1] - 0.5,
                    (vx + 0.5) / scale[2] - 0.5], axis=-1).reshape(-1, 3)
    u_up, _ = _sample_trilinear(field.u, pos, with_grad=False)
    u_up = u_up.reshape(oz, oy, ox, 3)
    return u_up * scale[None, None, None, :]


def warp(volume: np.ndarray, field: DisplacementField,
         interpolation: str = "trilinear") -> np.ndarray:
    """Resample a voxel grid at x + u(x); out-of-bounds samples become 0.

    Masks must use ``nearest``; intensities use ``trilinear``.
    """
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ShapeError(f"warp expects a 3D grid, got ndim={vol.ndim}")
    if interpolation not in ("trilinear", "nearest"):
        raise ShapeError(f"unknown interpolation {interpolation!r}")
    u_vox = (field.u if field.u.shape[:3] == vol.shape
             else upsample_field(field, vol.shape))
    if u_vox.shape[:3] != vol.shape:
        raise ShapeError("field shape does not match volume")
    grid = np.indices(vol.shape, dtype=np.float64).transpose(1, 2, 3, 0)
    pos = grid + u_vox
    limits = np.array(vol.shape, dtype=np.float64) - 1.0
    outside = np.any((pos < 0.0) | (pos > limits), axis=-1)
    flat_pos = pos.reshape(-1, 3)
    if interpolation == "nearest":
        idx = np.rint(np.clip(flat_pos, 0, limits)).astype(np.int64)
        out = vol[idx[:, 0], idx[:, 1], idx[:, 2]].astype(vol.dtype)
    else:
        vals, _ = _sample_trilinear(vol.astype(np.float64)[..., None],
                                    flat_pos, with_grad=False)
        out = vals[:, 0]
    out = out.reshape(vol.shape)
    background = np.zeros((), dtype=out.dtype)
    out = np.where(outside, background, out)
    return out


# -- metrics ----------------------------------------------------------------------------

def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); both-empty returns 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def std_log_jacobian(field: DisplacementField, fold_eps: float = 1e-6):
    """(stdLogJ, folded_fraction) of det(I + grad u) on interior voxels.

    The field must already be at voxel resolution (scale 1).  Voxels with
    J <= fold_eps count as folded and are excluded from the std.
    """
    u = field.u
    if min(u.shape[:3]) < 3:
        raise ShapeError("need at least 3 voxels per axis for central differences")
    # jac[..., i, j] = d u_i / d x_j on the interior grid
    jac = np.empty(tuple(s - 2 for s in u.shape[:3]) + (3, 3))
    for comp in range(3):
        for axis in range(3):
            hi = [slice(1, -1)] * 3
            lo = [slice(1, -1)] * 3
            hi[axis] = slice(2, None)
            lo[axis] = slice(None, -2)
            deriv = (u[tuple(hi)][..., comp] - u[tuple(lo)][..., comp]) / 2.0
            jac[..., comp, axis] = deriv
    jac[..., 0, 0] += 1.0
    jac[..., 1, 1] += 1.0
    jac[..., 2, 2] += 1.0
    det = np.linalg.det(jac)
    folded = det <= fold_eps
    folded_fraction = float(folded.mean())
    valid = det[~folded]
    if valid.size == 0:
        raise DegenerateError("every interior voxel is folded")
    std = float(np.log(valid).std())
    return std, folded_fraction


# -- keypoints and PCA colours ------------------------------------------------------------

def keypoint_match(source: FeatureMap, target: FeatureMap, n: int, seed: int):
    """Sample n source cells; match each to the argmax-cosine target cell."""
    gh, gw = source.descriptor.grid_h, source.descriptor.grid_w
    n_cells = gh * gw
    if n > n_cells:
        raise ShapeError(f"cannot sample {n} keypoints from {n_cells} cells")
    src = _normalize(source.tokens_flat.astype(np.float64))
    tgt = _normalize(target.tokens_flat.astype(np.float64))
    rng = generator(seed)
    chosen = rng.choice(n_cells, size=n, replace=False)
    sims = src[chosen] @ tgt.T
    best = sims.argmax(axis=1)
    th, tw = target.descriptor.grid_h, target.descriptor.grid_w
    out = []
    for k, cell in enumerate(chosen):
        score = float(sims[k, best[k]])
        out.append(((int(cell) // gw, int(cell) % gw),
                    (int(best[k]) // tw, int(best[k]) % tw), score))
    return out


def pca_rgb(maps: list[FeatureMap] | FeatureMap) -> list[np.ndarray]:
    """Joint 3-component PCA of patch tokens, min-max scaled to RGB in [0,1].

    Missing components (rank < 3) are padded with 0.5, so constant inputs
    produce uniform grey.
    """
    if isinstance(maps, FeatureMap):
        maps = [maps]
    tokens = np.concatenate([m.tokens_flat.astype(np.float64) for m in maps])
    if tokens.shape[0] < 3:
        raise ShapeError("PCA colouring needs at least 3 cells")
    centered = tokens - tokens.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    rank_ok = svals > max(1e-12, 1e-9 * (svals[0] if svals.size else 0.0))
    scores = np.full((tokens.shape[0], 3), 0.5)
    for comp in range(min(3, vt.shape[0])):
        if not rank_ok[comp]:
            continue
        proj = centered @ vt[comp]
        lo, hi = proj.min(), proj.max()
        if hi - lo < 1e-12:
            continue
        scores[:, comp] = (proj - lo) / (hi - lo)
    out = []
    offset = 0
    for m in maps:
        gh, gw = m.descriptor.grid_h, m.descriptor.grid_w
        out.append(scores[offset:offset + gh * gw].reshape(gh, gw, 3))
        offset += gh * gw
    return out
