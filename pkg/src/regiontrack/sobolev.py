"""Sobolev-type metric on region perturbations and its gradient splitting.

The gradient of a region energy under the metric

    <h1, h2> = <h1_bar> . <h2_bar> + alpha * sum tr(Dh1^T Dh2)

decomposes into a constant translation (the integral of the force field
over the region) plus a mean-zero deformation obtained by solving a
Poisson problem with reflected-neighbor Neumann boundary conditions.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fields import VectorField, shift

_S4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


class SolverFailureError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass
class SourceField:
    values: np.ndarray  # (H, W, 2), mean-zero over the mask
    mask: np.ndarray  # bool (H, W)

    @classmethod
    def from_values(cls, values, mask):
        values = np.where(mask[..., None], values, 0.0)
        area = mask.sum()
        mean = values.sum(axis=(0, 1)) / area
        return cls(np.where(mask[..., None], values - mean, 0.0), mask)


@dataclass
class SobolevGradient:
    mean: np.ndarray  # (2,) translation component, the integral of q
    deform: VectorField  # mean-zero over the region

    def combined(self, alpha):
        """The full gradient field <G> + deform / alpha on the region."""
        vals = self.mean[None, None, :] + self.deform.values / alpha
        return VectorField(self.deform.grid, vals, self.deform.mask)


def neumann_laplacian(x, inside):
    """Reflected-neighbor Neumann Laplacian: sum over in-region 4-neighbors
    of (x(p) - x(y)); out-of-region neighbors contribute nothing."""
    out = np.zeros_like(x)
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = shift(x, di, dj)
        nbm = shift(inside, di, dj, fill=False)
        use = inside & nbm
        out[use] += x[use] - nb[use]
    return out


def _degree(inside):
    deg = np.zeros(inside.shape, dtype=float)
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        deg[inside & shift(inside, di, dj, fill=False)] += 1.0
    return deg


def _cg(b, inside, diag, tol, max_iter, x0):
    """Jacobi-preconditioned CG for the Neumann stencil on one component."""
    bnorm = np.sqrt((b * b).sum())
    if bnorm == 0:
        return np.zeros_like(b), 0.0
    x = np.zeros_like(b) if x0 is None else np.where(inside, x0, 0.0)
    r = b - neumann_laplacian(x, inside)
    r[~inside] = 0.0
    # A stale guess from a state with a much larger gradient starts CG
    # further from the solution than zero does; cold-start instead.
    if np.sqrt((r * r).sum()) > bnorm:
        x = np.zeros_like(b)
        r = b.copy()
    z = np.where(inside, r / diag, 0.0)
    p = z.copy()
    rz = (r * z).sum()
    res = np.sqrt((r * r).sum())
    for _ in range(max_iter):
        if res <= tol * bnorm:
            break
        Ap = neumann_laplacian(p, inside)
        pAp = (p * Ap).sum()
        if pAp <= 0:
            break  # numerically semi-definite direction; give up cleanly
        a = rz / pAp
        x += a * p
        r -= a * Ap
        res = np.sqrt((r * r).sum())
        z = np.where(inside, r / diag, 0.0)
        rz_new = (r * z).sum()
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, res / bnorm


def default_max_iter(npix):
    return int(10 * np.sqrt(npix) + 500)


def solve_neumann_poisson(src, mask, tol=1e-8, max_iter=None, x0=None):
    """Solve -Lap u = src on the mask, zero-Neumann, mean-zero per component.

    Disconnected masks are solved per 4-connected component, each with its
    own mean-zero projection of source and solution.
    """
    inside = mask.inside
    values = src.values if isinstance(src, SourceField) else np.asarray(src)
    if max_iter is None:
        max_iter = default_max_iter(inside.sum())
    labels, ncomp = ndimage.label(inside, structure=_S4)
    deg = _degree(inside)
    out = np.zeros_like(values)
    # A component whose source is constant leaves only cancellation dust
    # after the mean projection; chasing a relative tolerance on it stalls
    # CG at roundoff. Anything this far below the field scale is zero.
    floor = 1e-12 * np.sqrt((values[inside] ** 2).sum())
    for comp in range(1, ncomp + 1):
        cm = labels == comp
        n = cm.sum()
        if n == 1:
            continue  # a lone pixel has only the zero mean-zero solution
        d = np.where(cm, deg, 1.0)
        for c in range(2):
            b = np.where(cm, values[..., c], 0.0)
            b = np.where(cm, b - b.sum() / n, 0.0)
            if np.sqrt((b * b).sum()) <= floor:
                continue
            guess = None if x0 is None else x0[..., c]
            u, rel = _cg(b, cm, d, tol, max_iter, guess)
            if rel > tol:
                raise SolverFailureError(
                    f"conjugate gradient stalled at relative residual {rel:.3e}",
                    residual=rel)
            u = np.where(cm, u - u.sum() / n, 0.0)
            out[..., c] += u
    return VectorField(mask.grid, out, inside.copy())


def assemble_gradient(f1, jac_det, mask, tol=1e-8, max_iter=None, warm=None):
    """Split the force integrand q = f1 * jac_det into translation + deformation.

    The translation is the integral of q over the region; the deformation
    solves the Neumann Poisson problem with the mean-subtracted q as source.
    """
    inside = mask.inside
    q = np.where(inside[..., None], f1.values * jac_det.values[..., None], 0.0)
    mean = q.sum(axis=(0, 1))
    area = inside.sum()
    rhs = np.where(inside[..., None], q - mean / area, 0.0)
    deform = solve_neumann_poisson(rhs, mask, tol=tol, max_iter=max_iter, x0=warm)
    return SobolevGradient(mean=mean, deform=deform)


def pairing(f1, jac_det, h, mask):
    """The discrete energy differential dE . h = sum over the region of
    f1 . h weighted by the backward-map determinant."""
    inside = mask.inside
    return float((f1.values[inside] * h.values[inside]
                  * jac_det.values[inside][:, None]).sum())


def inner_product(h1, h2, mask, alpha):
    """Metric value <h1_bar>.<h2_bar> + alpha * sum tr(Dh1^T Dh2) on the mask.

    The Jacobian term sums forward differences over in-region pixel pairs:
    the one discrete form whose summation by parts is exactly dual to the
    reflected-neighbor Neumann stencil, so <grad E, h> reproduces the
    energy differential. A centered form loses that identity at the
    region boundary.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    inside = mask.inside
    area = inside.sum()
    m1 = h1.values[inside].sum(axis=0) / area
    m2 = h2.values[inside].sum(axis=0) / area
    grad_term = 0.0
    for di, dj in ((1, 0), (0, 1)):
        nb = inside & shift(inside, di, dj, fill=False)
        for c in range(2):
            d1 = shift(h1.values[..., c], di, dj) - h1.values[..., c]
            d2 = shift(h2.values[..., c], di, dj) - h2.values[..., c]
            grad_term += float((d1[nb] * d2[nb]).sum())
    return float(m1 @ m2 + alpha * grad_term)
