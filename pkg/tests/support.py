"""Shared fixtures for the solver tests: hand-built bundles and
grid-coupled ensembles for self-convergence experiments."""

import numpy as np

from tcfbsde.fbsde import Box, ModelSpec, PathBundle
from tcfbsde.noise import BrownianPath, JumpStream, LevyJumpSpec, sample_brownian, sample_jumps
from tcfbsde.time_change import (
    OperationalGrid,
    SubordinatorPath,
    SubordinatorSpec,
    invert_subordinator,
    matched_calendar_grid,
    stable_increments,
)


def mk_model(**overrides):
    """A zero model with selected maps overridden; handy for trivial cases."""
    base = dict(
        f=lambda t1, t2, x, v: 0.0 * x + 0.0 * v,
        sigma=lambda t1, t2, x, v: 0.0 * x + 0.0 * v,
        b=lambda t1, t2, x, v, z: 0.0 * x + 0.0 * v + 0.0 * z,
        g=lambda t1, t2, x, y, a, r, v: 0.0 * (x + y + a + r + v),
        phi=lambda x: 0.0 * x,
        l=lambda t1, t2, x, y, a, r, v: 0.0 * (x + v),
        h=lambda x: 0.0 * x,
        gamma=lambda y: 0.0 * y,
        control_set=Box(-5.0, 5.0),
        x0=1.0,
    )
    base.update(overrides)
    return ModelSpec(**base)


def manual_bundle(values, du, horizon, jump_spec=None, seed=0, flat_noise=False):
    """Bundle around a hand-written subordinator staircase."""
    values = np.asarray(values, dtype=float)
    grid = OperationalGrid(du, du * (values.size - 1))
    sub = SubordinatorPath(grid=grid, values=values, passage_time=grid.horizon)
    inv = invert_subordinator(sub, matched_calendar_grid(sub, horizon))
    if jump_spec is None:
        jump_spec = LevyJumpSpec(c=1.0, intensity=2.0)
    if flat_noise:
        brw = BrownianPath(grid=grid, values=np.zeros(values.size))
        jumps = JumpStream(times=np.empty(0), marks=np.empty(0), horizon=grid.horizon)
    else:
        brw = sample_brownian(grid, seed + 1)
        jumps = sample_jumps(jump_spec, grid.horizon, seed + 2)
    return PathBundle(subordinator=sub, inverse=inv, brownian=brw, jumps=jumps,
                      jump_spec=jump_spec, calendar_horizon=horizon,
                      seeds={"master": seed, "path": 0})


def coupled_bundles(sub_spec, jump_spec, horizon, fine_step, seed, factors=(1, 2)):
    """Bundles on nested grids driven by the same underlying noise.

    The subordinator increments are drawn once at the finest step and
    aggregated pairwise for coarser levels, so a coarse path is exactly
    the fine path read on the coarse grid; Brownian increments likewise,
    and the jump stream is shared.  That coupling turns self-convergence
    ratios into low-variance statistics.
    """
    rng = np.random.default_rng(seed)
    fmax = max(factors)
    n_fine = 64 * fmax
    inc = np.empty(0)
    while True:
        extra = (sub_spec.scale * fine_step) ** (1.0 / sub_spec.alpha) \
            * stable_increments(sub_spec.alpha, n_fine, rng)
        inc = np.concatenate([inc, extra])
        coarse_vals = np.concatenate([[0.0], np.cumsum(
            inc[: inc.size - inc.size % fmax].reshape(-1, fmax).sum(axis=1))])
        if coarse_vals[-1] > horizon:
            break
        n_fine *= 2
    rng_b = np.random.default_rng(seed + 1)
    db_fine = rng_b.normal(0.0, np.sqrt(fine_step), inc.size)
    op_horizon = fine_step * inc.size
    jumps_all = sample_jumps(jump_spec, op_horizon, seed + 2)

    out = []
    for fac in factors:
        du = fine_step * fac
        m = inc.size // fac
        vals = np.concatenate([[0.0], np.cumsum(inc[: m * fac].reshape(-1, fac).sum(axis=1))])
        k = int(np.searchsorted(vals, horizon, side="right"))
        if k >= vals.size:
            raise RuntimeError("coupled draw too short; widen the pre-sample")
        vals = vals[: k + 1]
        grid = OperationalGrid(du, du * k)
        sub = SubordinatorPath(grid=grid, values=vals, passage_time=grid.horizon)
        inv = invert_subordinator(sub, matched_calendar_grid(sub, horizon))
        db = db_fine[: m * fac].reshape(-1, fac).sum(axis=1)[:k]
        brw = BrownianPath(grid=grid, values=np.concatenate([[0.0], np.cumsum(db)]))
        keep = jumps_all.times <= grid.horizon
        jumps = JumpStream(times=jumps_all.times[keep], marks=jumps_all.marks[keep],
                           horizon=grid.horizon)
        out.append(PathBundle(subordinator=sub, inverse=inv, brownian=brw,
                              jumps=jumps, jump_spec=jump_spec,
                              calendar_horizon=horizon,
                              seeds={"master": seed, "path": 0}))
    return out


def lq_model(box=(-10.0, 10.0), lam=2.0, kappa=1.0):
    """Linear-quadratic system with the control in every coefficient.

    Drift, volatility, jumps and driver are all affine in (x, v) and the
    running cost is quadratic in v, so first-order expansions are exact
    and the optimal control has a closed form through the adjoints.
    """
    model = ModelSpec(
        f=lambda t1, t2, x, v: -1.0 * x + 1.0 * v,
        sigma=lambda t1, t2, x, v: 0.2 * v + 0.0 * x,
        b=lambda t1, t2, x, v, z: 0.1 * z * v + 0.0 * x,
        g=lambda t1, t2, x, y, a, r, v: (-1.0 * y + 0.5 * x + 0.5 * v) / lam,
        l=lambda t1, t2, x, y, a, r, v: 0.5 * (v - kappa) ** 2 / lam,
        phi=lambda x: 1.0 * x,
        h=lambda x: 0.0 * x,
        gamma=lambda y: -y,
        control_set=Box(*box),
        x0=1.0,
        M_T=1.0,
        linear=("f", "sigma", "b", "g"),
    )
    return model, LevyJumpSpec(c=1.0, intensity=lam), SubordinatorSpec(alpha=0.7)
