"""Population activity: group-convolution facilitation and thresholding.

The facilitation pattern is the gather

    P(eta) = sum_zeta  K(rel(zeta, eta)) * F(zeta),

where rel is the relative element compose(left_inverse(zeta), eta) for the
5D trajectory kernel, or the contour-group quotient for the 4D kernel, and
K is looked up by multilinear interpolation (``kernel_lookup``).  Because
the fiber variables are shared bins between kernel and activity grids, the
orientation and velocity offsets always land exactly on kernel nodes; only
the rotated (and, in the 5D case, velocity-sheared) spatial offsets are
interpolated.

``facilitate`` implements the gather with FFT correlations whose stencils
are precomputed by exactly that interpolation rule, so it matches the
explicit gather (``facilitate_reference``) to 1e-10; it is deterministic
for fixed shapes.  Kernels are sparsified by zeroing entries below 1e-6 of
the kernel max before either path runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gabor import LiftedActivity, ManifoldGrid, sigmoid
from .kernels import KernelGrid, kernel_lookup

TRUNC_REL = 1e-6   # kernel entries below this fraction of max are dropped
DROP_TOL = 1e-11   # constant-split residual entries below this are dropped


@dataclass(frozen=True)
class FacilitationConfig:
    """Facilitation strength and sigmoid parameters for the activity model."""

    c_f: float
    mu: float
    beta: float

    def __post_init__(self):
        if self.c_f < 0:
            raise ValueError("the model is purely excitatory: c_f must be >= 0")


def truncated_kernel_values(kernel: KernelGrid, trunc_rel: float = TRUNC_REL) -> np.ndarray:
    """Kernel values with entries below trunc_rel * max zeroed (sparsified)."""
    vals = kernel.values
    if vals.size == 0 or trunc_rel <= 0:
        return vals.copy()
    cut = trunc_rel * float(vals.max())
    return np.where(vals >= cut, vals, 0.0)


def _check_compat(grid: ManifoldGrid, kernel: KernelGrid) -> None:
    lat = kernel.lattice
    i_th = lat.theta_axis
    if lat.shape[i_th] != grid.n_theta:
        raise ValueError(
            f"kernel has {lat.shape[i_th]} orientation bins, grid has {grid.n_theta}"
        )
    if abs(lat.spacing[i_th] - grid.d_theta) > 1e-12:
        raise ValueError("kernel and grid orientation spacings differ")
    i_v = lat.axes.index("v")
    if abs(lat.spacing[i_v] - grid.d_v) > 1e-12:
        raise ValueError("kernel and grid velocity spacings differ")
    if abs(lat.origin[i_v] / lat.spacing[i_v] + round(-lat.origin[i_v] / lat.spacing[i_v])) > 1e-9:
        raise ValueError("kernel velocity axis must be centered on zero")
    if abs(lat.spacing[0] - grid.dx) > 1e-12 or abs(lat.spacing[1] - grid.dx) > 1e-12:
        raise ValueError("kernel spatial spacing must equal the grid spacing")
    if kernel.is_trajectory:
        i_s = lat.axes.index("s")
        if abs(lat.spacing[i_s] - grid.ds) > 1e-12:
            raise ValueError("kernel ds spacing must equal the grid frame spacing")
        if abs(lat.origin[i_s] - 1.0) > 1e-12:
            raise ValueError("trajectory kernel ds axis must start at ds = 1")


def _fast_len(n: int) -> int:
    best = 1 << (n - 1).bit_length()
    k = n
    while k < best:
        m = k
        for p in (2, 3, 5):
            while m % p == 0:
                m //= p
        if m == 1:
            return k
        k += 1
    return best


def _bilinear_gather(plane_stack: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample a stack of 2D planes bilinearly at common (px, py) points.

    plane_stack has shape (n1, n2, m); px, py index the first two axes in
    cell units.  Points outside the planes contribute zero.  Returns
    (npts, m).
    """
    n1, n2 = plane_stack.shape[:2]
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    out = np.zeros((px.size, plane_stack.shape[2]))
    for dx_c, wx in ((0, 1.0 - fx), (1, fx)):
        for dy_c, wy in ((0, 1.0 - fy), (1, fy)):
            xi = x0 + dx_c
            yi = y0 + dy_c
            ok = (xi >= 0) & (xi < n1) & (yi >= 0) & (yi < n2)
            w = wx * wy
            if not ok.any():
                continue
            vals = plane_stack[np.clip(xi, 0, n1 - 1), np.clip(yi, 0, n2 - 1)]
            out += np.where(ok, w, 0.0)[:, None] * vals
    return out


class _ContourPlan:
    """Rotated stencils and FFT workspace for 4D (contour-kernel) gathers.

    Stencil for input orientation bin i': value at integer offset dq is the
    bilinear sample of the kernel's spatial slice at R(-theta') dq, one
    plane per (dtheta, dv) pair; fiber offsets are exact kernel nodes.
    """

    def __init__(self, kernel: KernelGrid, grid: ManifoldGrid, trunc_rel: float):
        _check_compat(grid, kernel)
        vals = truncated_kernel_values(kernel, trunc_rel)
        h = (vals.shape[0] - 1) // 2
        self.n_theta = grid.n_theta
        self.n_v = grid.n_v
        self.n_dv = vals.shape[3]
        ext = int(math.ceil(h * math.sqrt(2.0))) + 1
        self.ext = ext
        side = 2 * ext + 1
        offs = np.arange(-ext, ext + 1, dtype=float)
        gx, gy = np.meshgrid(offs, offs, indexing="ij")
        planes = vals.reshape(vals.shape[0], vals.shape[1], -1)  # (2h+1, 2h+1, nth*ndv)
        self.stencils = np.empty((grid.n_theta, side, side, vals.shape[2], self.n_dv))
        for i_p in range(grid.n_theta):
            th = grid.thetas[i_p]
            c, s = math.cos(-th), math.sin(-th)
            px = c * gx.ravel() - s * gy.ravel() + h
            py = s * gx.ravel() + c * gy.ravel() + h
            samp = _bilinear_gather(planes, px, py)
            self.stencils[i_p] = samp.reshape(side, side, vals.shape[2], self.n_dv)
        self.pad1 = _fast_len(grid.nx + side - 1)
        self.pad2 = _fast_len(grid.ny + side - 1)
        # FFT of each (theta', dtheta, dv) spatial stencil, flipped for
        # correlation-via-convolution
        nk2 = self.pad2 // 2 + 1
        self.shat = np.empty(
            (grid.n_theta, vals.shape[2], self.n_dv, self.pad1, nk2), dtype=np.complex128
        )
        buf = np.zeros((self.pad1, self.pad2))
        for i_p in range(grid.n_theta):
            for dth in range(vals.shape[2]):
                for dv in range(self.n_dv):
                    buf[:] = 0.0
                    buf[:side, :side] = self.stencils[i_p, :, :, dth, dv]
                    self.shat[i_p, dth, dv] = np.fft.rfft2(buf)


def _facilitate_values_4d(
    values: np.ndarray, grid: ManifoldGrid, plan: _ContourPlan
) -> np.ndarray:
    nx, ny, ns, nth, nv = values.shape
    ext = plan.ext
    out = np.empty_like(values)
    n_dv_half = plan.n_dv // 2  # dv index of the zero offset
    for si in range(ns):
        fhat = np.empty((nth, nv, plan.pad1, plan.pad2 // 2 + 1), dtype=np.complex128)
        buf = np.zeros((plan.pad1, plan.pad2))
        for i_p in range(nth):
            for j_p in range(nv):
                buf[:] = 0.0
                buf[:nx, :ny] = values[:, :, si, i_p, j_p]
                fhat[i_p, j_p] = np.fft.rfft2(buf)
        acc = np.zeros((nth, nv, plan.pad1, plan.pad2 // 2 + 1), dtype=np.complex128)
        for i_p in range(nth):
            for dth in range(nth):
                i_out = (i_p + dth) % nth
                sh = plan.shat[i_p, dth]  # (n_dv, k1, k2)
                for j_out in range(nv):
                    # dv node for input j_p: (j_out - j_p) + n_dv_half
                    j_lo = max(0, j_out + n_dv_half - (plan.n_dv - 1))
                    j_hi = min(nv - 1, j_out + n_dv_half)
                    for j_p in range(j_lo, j_hi + 1):
                        acc[i_out, j_out] += fhat[i_p, j_p] * sh[j_out - j_p + n_dv_half]
        for i_out in range(nth):
            for j_out in range(nv):
                conv = np.fft.irfft2(acc[i_out, j_out], s=(plan.pad1, plan.pad2))
                out[:, :, si, i_out, j_out] = conv[ext : ext + nx, ext : ext + ny]
    return out


class _TrajectoryPlan:
    """Stencil machinery for 5D (trajectory-kernel) gathers.

    The relative spatial coordinate is R(-theta') (dq - (v' ds, 0)), so the
    stencil for input fiber (theta', v') at temporal offset ds is the
    kernel's (ds, dtheta, dv) plane sampled at rotated, x-sheared points.
    The shear u = v' ds splits into an integer pixel part (applied as an
    exact FFT phase) and a fractional part phi; only the distinct phi
    classes are resampled.
    """

    def __init__(self, kernel: KernelGrid, grid: ManifoldGrid, trunc_rel: float):
        _check_compat(grid, kernel)
        self.vals = truncated_kernel_values(kernel, trunc_rel)
        self.h = (self.vals.shape[0] - 1) // 2
        self.n_ds = self.vals.shape[2]
        self.n_theta = grid.n_theta
        self.n_v = grid.n_v
        self.n_dv = self.vals.shape[4]
        self.grid = grid
        # common stencil box: rotation can move support out to h*sqrt(2),
        # the fractional shear adds at most one cell
        self.ext = int(math.ceil(self.h * math.sqrt(2.0))) + 1
        self.side = 2 * self.ext + 1
        # integer/fractional split of every (v', ds) shear
        vs = grid.vs
        self.m_shift = np.zeros((grid.n_v, self.n_ds), dtype=np.int64)
        self.phi = np.zeros((grid.n_v, self.n_ds))
        for j, v in enumerate(vs):
            for d in range(self.n_ds):
                u = v * (d + 1)
                m = math.floor(u)
                self.m_shift[j, d] = m
                self.phi[j, d] = u - m
        self.max_m = int(np.abs(self.m_shift).max())
        self._stencil_cache: dict[tuple[float, int], np.ndarray] = {}

    def pad_sizes(self, bx: int, by: int) -> tuple[int, int]:
        # shifted stencil support must fit the circular buffer without wrap
        p1 = _fast_len(bx + self.side - 1 + 2 * self.max_m)
        p2 = _fast_len(by + self.side - 1)
        return p1, p2

    def stencil_block(self, phi: float, i_p: int, d: int) -> np.ndarray:
        """Resampled stencil planes for (fractional shear, theta' bin, ds bin).

        Returns (side, side, n_theta * n_dv) with the (dtheta, dv) axis flat.
        """
        key = (round(phi * 1e12), i_p * self.n_ds + d)
        hit = self._stencil_cache.get(key)
        if hit is not None:
            return hit
        th = self.grid.thetas[i_p]
        c, s = math.cos(-th), math.sin(-th)
        offs = np.arange(-self.ext, self.ext + 1, dtype=float)
        gx, gy = np.meshgrid(offs - phi, offs, indexing="ij")
        px = c * gx.ravel() - s * gy.ravel() + self.h
        py = s * gx.ravel() + c * gy.ravel() + self.h
        planes = self.vals[:, :, d].reshape(self.vals.shape[0], self.vals.shape[1], -1)
        block = _bilinear_gather(planes, px, py).reshape(self.side, self.side, -1)
        if len(self._stencil_cache) < 4 * self.n_theta:  # one ds worth of classes
            self._stencil_cache[key] = block
        return block


def _facilitate_values_5d(
    values: np.ndarray, grid: ManifoldGrid, plan: _TrajectoryPlan
) -> np.ndarray:
    """Dense 5D gather via per-ds FFT mixing (exact; see module docstring).

    For each temporal offset ds a fiber-mixing tensor is assembled from the
    stencil FFTs (integer shear parts enter as exact circular-shift phases)
    and contracted against the input spectra with k-chunked matrix products.
    Accumulation order is fixed: ds ascending, k-chunks ascending.
    """
    nx, ny, ns, nth, nv = values.shape
    nf = nth * nv
    pad1, pad2 = plan.pad_sizes(nx, ny)
    nk2 = pad2 // 2 + 1
    nk = pad1 * nk2
    frame_mass = np.abs(values).sum(axis=(0, 1, 3, 4))
    live = np.nonzero(frame_mass > 0)[0]
    out = np.zeros_like(values)
    if live.size == 0:
        return out
    s_lo, s_hi = int(live.min()), int(live.max())
    n_in = s_hi - s_lo + 1
    fhat = np.zeros((n_in, nf, nk), dtype=np.complex128)
    buf = np.zeros((pad1, pad2))
    for si in range(s_lo, s_hi + 1):
        for f in range(nf):
            i_p, j_p = divmod(f, nv)
            buf[:] = 0.0
            buf[:nx, :ny] = values[:, :, si, i_p, j_p]
            fhat[si - s_lo, f] = np.fft.rfft2(buf).ravel()
    phat = np.zeros((ns, nf, nk), dtype=np.complex128)
    # flipped stencils are placed at the pad origin; an extra circular shift
    # by (max_m - m) aligns all shear variants to one common output offset
    kx1 = np.fft.fftfreq(pad1)[:, None]
    shift_phase = {
        d: np.exp(-2j * np.pi * kx1 * d) * np.ones((1, nk2)) for d in range(0, 2 * plan.max_m + 1)
    }
    n_dv_half = plan.n_dv // 2
    mix = np.empty((nf, nf, nk), dtype=np.complex128)
    sbuf = np.zeros((pad1, pad2))
    chunk = max(1, (1 << 23) // (nf * 16))  # ~8 MB of A-chunk per slice
    for d in range(plan.n_ds):
        ds = d + 1
        o_lo = max(0, s_lo + ds)
        o_hi = min(ns - 1, s_hi + ds)
        if o_lo > o_hi:
            continue
        mix[:] = 0.0
        plan._stencil_cache.clear()
        for i_p in range(nth):
            for j_p in range(nv):
                f_in = i_p * nv + j_p
                block = plan.stencil_block(plan.phi[j_p, d], i_p, d)
                delta = plan.max_m + int(plan.m_shift[j_p, d])
                phase = shift_phase[delta].ravel()
                for dth in range(nth):
                    i_out = (i_p + dth) % nth
                    for dv in range(plan.n_dv):
                        j_out = j_p + dv - n_dv_half
                        if j_out < 0 or j_out >= nv:
                            continue
                        plane = block[:, :, dth * plan.n_dv + dv]
                        if not plane.any():
                            continue
                        sbuf[:] = 0.0
                        sbuf[: plan.side, : plan.side] = plane
                        mix[f_in, i_out * nv + j_out] = (
                            np.fft.rfft2(sbuf).ravel() * phase
                        )
        src = fhat[o_lo - ds - s_lo : o_hi - ds - s_lo + 1]  # (n_win, f_in, k)
        dst = phat[o_lo : o_hi + 1]
        for k0 in range(0, nk, chunk):
            k1 = min(nk, k0 + chunk)
            a = np.ascontiguousarray(src[:, :, k0:k1].transpose(2, 0, 1))
            b = np.ascontiguousarray(mix[:, :, k0:k1].transpose(2, 0, 1))
            c = np.matmul(a, b)  # (kc, n_win, nf)
            dst[:, :, k0:k1] += c.transpose(1, 2, 0)
    off = plan.ext + plan.max_m  # common output offset along x after alignment
    for si in range(ns):
        if not phat[si].any():
            continue
        conv = np.fft.irfft2(phat[si].reshape(nf, pad1, nk2), s=(pad1, pad2))
        block = conv[:, off : off + nx, plan.ext : plan.ext + ny]
        out[:, :, si] = block.reshape(nth, nv, nx, ny).transpose(2, 3, 0, 1)
    return out


_PLAN_CACHE: dict = {}


def _plan_for(kernel: KernelGrid, grid: ManifoldGrid, trunc_rel: float):
    key = (id(kernel), grid.nx, grid.ny, grid.n_theta, grid.n_v, trunc_rel)
    plan = _PLAN_CACHE.get(key)
    if plan is None:
        cls = _TrajectoryPlan if kernel.is_trajectory else _ContourPlan
        plan = cls(kernel, grid, trunc_rel)
        _PLAN_CACHE.clear()  # keep at most one plan; they are large
        _PLAN_CACHE[key] = plan
    return plan


def facilitate(
    activity: LiftedActivity,
    kernel: KernelGrid,
    *,
    trunc_rel: float = TRUNC_REL,
) -> LiftedActivity:
    """Facilitation pattern P = kernel-weighted gather of the activity.

    4D kernels couple fibers within each time slice through the contour
    group; 5D kernels reach strictly forward in time through the trajectory
    law, including the velocity shear of the left-inverse relative
    coordinate.  Matches ``facilitate_reference`` to 1e-10 with fixed
    accumulation order.
    """
    grid = activity.grid
    plan = _plan_for(kernel, grid, trunc_rel)
    if kernel.is_trajectory:
        vals = _facilitate_values_5d(activity.values, grid, plan)
    else:
        vals = _facilitate_values_4d(activity.values, grid, plan)
    return activity.with_values(vals, "facilitation")


def facilitate_reference(
    activity: LiftedActivity,
    kernel: KernelGrid,
    *,
    trunc_rel: float = TRUNC_REL,
) -> LiftedActivity:
    """Explicit gather through compose/left_inverse and kernel_lookup.

    The semantic reference for ``facilitate``; quadratic cost, use on small
    grids only.
    """
    grid = activity.grid
    _check_compat(grid, kernel)
    trunc = KernelGrid(
        axes=kernel.axes, origin=kernel.origin, spacing=kernel.spacing,
        values=truncated_kernel_values(kernel, trunc_rel), spec=kernel.spec,
        raw_weight=kernel.raw_weight,
    )
    nx, ny, ns, nth, nv = activity.values.shape
    out = np.zeros_like(activity.values)
    xs = np.arange(nx, dtype=float)
    ys = np.arange(ny, dtype=float)
    dxm = xs[:, None, None, None] - xs[None, :, None, None]  # x - x'
    dym = ys[None, None, :, None] - ys[None, None, None, :]  # y - y'
    thetas = grid.thetas
    vs = grid.vs
    for i_p in range(nth):
        c, s = math.cos(-thetas[i_p]), math.sin(-thetas[i_p])
        for j_p in range(nv):
            for sp in range(ns):
                f_slice = activity.values[:, :, sp, i_p, j_p]
                if not f_slice.any():
                    continue
                for so in range(ns):
                    if trunc.is_trajectory:
                        ds = float(activity.s_frames[so] - activity.s_frames[sp])
                        shear = vs[j_p] * ds
                    else:
                        if so != sp:
                            continue
                        ds = None
                        shear = 0.0
                    ax = dxm - shear  # (nx, nx', 1, 1)
                    rel1 = c * ax - s * dym
                    rel2 = s * ax + c * dym
                    for i_o in range(nth):
                        dth = (thetas[i_o] - thetas[i_p]) % (2.0 * math.pi)
                        for j_o in range(nv):
                            dv = vs[j_o] - vs[j_p]
                            pts = np.empty(rel1.shape + (len(trunc.axes),))
                            pts[..., 0] = rel1
                            pts[..., 1] = rel2
                            if trunc.is_trajectory:
                                pts[..., 2] = ds
                                pts[..., 3] = dth
                                pts[..., 4] = dv
                            else:
                                pts[..., 2] = dth
                                pts[..., 3] = dv
                            w = kernel_lookup(trunc, pts.reshape(-1, pts.shape[-1]))
                            w = w.reshape(nx, nx, ny, ny)
                            out[:, :, so, i_o, j_o] += np.einsum(
                                "xayb,ab->xy", w, f_slice
                            )
    return activity.with_values(out, "facilitation")


def activity_steady(
    raw: LiftedActivity, facil: LiftedActivity, cfg: FacilitationConfig
) -> LiftedActivity:
    """First-order steady activity S(F + c_f P)."""
    if raw.kind != "raw":
        raise ValueError("activity_steady expects the raw energy as first input")
    if facil.kind != "facilitation":
        raise ValueError("activity_steady expects a facilitation field as second input")
    if raw.values.shape != facil.values.shape:
        raise ValueError("raw and facilitation grids do not match")
    vals = sigmoid(raw.values + cfg.c_f * facil.values, cfg.mu, cfg.beta)
    return raw.with_values(vals, "total")


def evolve_activity(
    raw: LiftedActivity,
    kernel: KernelGrid,
    cfg: FacilitationConfig,
    dt_a: float,
    n_steps: int,
    *,
    a0: np.ndarray | None = None,
    trunc_rel: float = TRUNC_REL,
) -> LiftedActivity:
    """Explicit Euler evolution a <- a + dt (-a + S(c_f K*a + F)).

    Fixed points satisfy a = S(c_f K*a + F).  Raises if the state leaves
    [-10, 10], signalling unstable parameters.
    """
    if not 0.0 < dt_a <= 1.0:
        raise ValueError("dt_a must lie in (0, 1]")
    if raw.kind != "raw":
        raise ValueError("evolve_activity expects raw energy input")
    a = np.zeros_like(raw.values) if a0 is None else np.asarray(a0, dtype=float).copy()
    if a.shape != raw.values.shape:
        raise ValueError("a0 shape does not match the activity grid")
    plan = _plan_for(kernel, raw.grid, trunc_rel)
    conv = _facilitate_values_5d if kernel.is_trajectory else _facilitate_values_4d
    for _ in range(n_steps):
        drive = cfg.c_f * conv(a, raw.grid, plan) + raw.values
        a = a + dt_a * (-a + sigmoid(drive, cfg.mu, cfg.beta))
        if float(np.abs(a).max()) > 10.0:
            raise ArithmeticError("activity diverged beyond |a| = 10; unstable parameters")
    return raw.with_values(a, "facilitation")


def stationarity_residual(
    a: np.ndarray, raw: LiftedActivity, kernel: KernelGrid, cfg: FacilitationConfig,
    *, trunc_rel: float = TRUNC_REL,
) -> float:
    """Sup norm of -a + S(c_f K*a + F); zero exactly at a fixed point."""
    plan = _plan_for(kernel, raw.grid, trunc_rel)
    conv = _facilitate_values_5d if kernel.is_trajectory else _facilitate_values_4d
    drive = cfg.c_f * conv(np.asarray(a, dtype=float), raw.grid, plan) + raw.values
    return float(np.abs(-a + sigmoid(drive, cfg.mu, cfg.beta)).max())


def facilitation_difference(
    full: LiftedActivity, first: LiftedActivity, second: LiftedActivity
) -> LiftedActivity:
    """Nonlinearity probe: response to the whole minus the sum of the parts."""
    for act in (full, first, second):
        if act.kind != "total":
            raise ValueError("facilitation_difference expects steady (total) activities")
    if not (full.values.shape == first.values.shape == second.values.shape):
        raise ValueError("activity grids do not match")
    vals = full.values - first.values - second.values
    return LiftedActivity(full.grid, vals, "facilitation", full.s_frames.copy())
