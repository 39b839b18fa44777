"""Forward process, v-prediction algebra and the deterministic (eta = 0) sampler step.

Every function accepts numpy arrays or torch tensors; only elementwise
arithmetic with scalar schedule coefficients is used, so autograd flows
through unchanged.

Sign convention (self-consistent v-parameterisation)::

    z_t = a * z0 + b * eps
    v   = a * eps - b * z0
    z0  = a * z_t - b * v
    eps = b * z_t + a * v

with ``a = sqrt(alpha_bar_t)`` and ``b = sqrt(1 - alpha_bar_t)``. At a
zero-SNR terminal step (a = 0) this gives ``v_T = -z0``.
"""

from __future__ import annotations

from .schedule import NoiseSchedule


def _check_shapes(x, y, names=("z0", "eps")):
    if tuple(x.shape) != tuple(y.shape):
        raise ValueError(f"shape mismatch: {names[0]} {tuple(x.shape)} vs {names[1]} {tuple(y.shape)}")


def _coeffs(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    if int(t) < 1:
        raise IndexError(f"timestep {t} outside [1, {schedule.T}]")
    return schedule.coefficients(t)


def forward_diffuse(z0, eps, t: int, schedule: NoiseSchedule):
    _check_shapes(z0, eps)
    a, b = _coeffs(schedule, t)
    return a * z0 + b * eps


def v_target(z0, eps, t: int, schedule: NoiseSchedule):
    _check_shapes(z0, eps)
    a, b = _coeffs(schedule, t)
    return a * eps - b * z0


def predict_clean(z_t, v_hat, t: int, schedule: NoiseSchedule):
    _check_shapes(z_t, v_hat, ("z_t", "v_hat"))
    a, b = _coeffs(schedule, t)
    return a * z_t - b * v_hat


def predict_eps(z_t, v_hat, t: int, schedule: NoiseSchedule):
    _check_shapes(z_t, v_hat, ("z_t", "v_hat"))
    a, b = _coeffs(schedule, t)
    return b * z_t + a * v_hat


def sampler_step(z_t, v_hat, t: int, t_next: int, schedule: NoiseSchedule):
    """Deterministic DDIM update from ``t`` to ``t_next`` (``t_next = 0`` returns the clean estimate)."""
    if not 0 <= int(t_next) < int(t):
        raise ValueError(f"need t > t_next >= 0, got t={t}, t_next={t_next}")
    z0_hat = predict_clean(z_t, v_hat, t, schedule)
    if int(t_next) == 0:
        return z0_hat
    eps_hat = predict_eps(z_t, v_hat, t, schedule)
    a, b = schedule.coefficients(t_next)
    return a * z0_hat + b * eps_hat


def sample(predict_v, z_start, grid, schedule: NoiseSchedule, callback=None):
    """Run the sampler over a descending timestep grid.

    ``predict_v(z_t, t)`` returns the model's v estimate. ``callback(i, t,
    z0_hat)`` is invoked with the clean estimate at every grid step.
    """
    steps = list(grid)
    z = z_start
    for i, t in enumerate(steps):
        t_next = steps[i + 1] if i + 1 < len(steps) else 0
        v_hat = predict_v(z, t)
        if callback is not None:
            callback(i, t, predict_clean(z, v_hat, t, schedule))
        z = sampler_step(z, v_hat, t, t_next, schedule)
    return z
