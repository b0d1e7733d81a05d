"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, recording
from .errors import GradientError

DEFAULT_FD_STEP = 1e-5


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    fallback_steps: Sequence[float] = (),
    fallback_trigger: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` evaluates the scalar loss from the current values of ``params``
    (closing over them) and must be deterministic and side-effect free; it is
    called once under a fresh tape for the analytic gradients, then twice per
    parameter coordinate for the numerical ones. The relative error for a
    coordinate is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.

    Coordinates whose true gradient is exactly zero (e.g. a conv bias
    absorbed by the normalization that follows) leave the numerator dominated
    by cancellation noise of order roundoff(f)/step, which the 1e-8 floor
    cannot hide at a fine step. ``fallback_steps`` re-checks any coordinate
    whose error exceeds ``fallback_trigger`` at coarser steps and keeps the
    smallest error: noise shrinks with 1/step while a genuinely wrong
    gradient stays at O(1) error for every step size.
    """
    if step <= 0 or any(s <= 0 for s in fallback_steps):
        raise ValueError(f"step must be positive, got {step}")
    params = list(params)
    tape = Tape()
    with recording(tape):
        loss = f()
    if not np.isfinite(loss.data):
        raise GradientError(f"loss is not finite: {loss.item()!r}")
    tape.backward(loss)
    analytic = []
    for p in params:
        g = tape.grad(p)
        analytic.append(np.zeros_like(p.data) if g is None else g)

    def eval_loss() -> float:
        value = f()
        v = float(value.data)
        if not np.isfinite(v):
            raise GradientError(f"loss is not finite during perturbation: {v!r}")
        return v

    def coord_error(flat: np.ndarray, i: int, ga: float, h: float) -> float:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = eval_loss()
        flat[i] = orig - h
        f_minus = eval_loss()
        flat[i] = orig
        g_fd = (f_plus - f_minus) / (2.0 * h)
        return abs(ga - g_fd) / max(1e-8, abs(ga) + abs(g_fd))

    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            ga = float(g_flat[i])
            err = coord_error(flat, i, ga, step)
            for h in fallback_steps:
                if err <= fallback_trigger:
                    break
                err = min(err, coord_error(flat, i, ga, h))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# Whole-model verification on a micro configuration
# ---------------------------------------------------------------------------


def micro_model_config():
    """2k-parameter model used by the gradient-check command (64-bit)."""
    from .model import ModelConfig

    return ModelConfig(
        input_hw=8, channels=4, num_domains=3, depth_map_hw=4, backbone_blocks=3
    )


def _frozen_stats(f: Callable[[], Tensor], model) -> Callable[[], Tensor]:
    """Wrap a loss so train-mode BN forwards leave no state behind, keeping
    repeated evaluations deterministic."""

    def wrapped():
        snap = model.snapshot_bn()
        try:
            return f()
        finally:
            model.restore_bn(snap)

    return wrapped


def phase_gradient_errors(
    seed: int = 0, step: float = DEFAULT_FD_STEP, batch: int = 2
) -> dict[str, float]:
    """Max relative FD error for each training phase's gradient target.

    Checks the backbone gradient of the normal-train loss, the expert
    gradient of the meta-train loss, and the inner-updated-expert gradient of
    the meta-test loss, all on the float64 micro model.
    """
    from . import losses
    from .model import AmelModel

    from . import ops

    rng = np.random.default_rng(seed)
    cfg = micro_model_config()
    model = AmelModel(cfg, rng, dtype=np.float64)
    model.seed_normalization_stats()

    def make_batch():
        images = rng.uniform(0.0, 1.0, size=(batch, 3, cfg.input_hw, cfg.input_hw))
        labels = rng.integers(0, 2, size=batch)
        if labels.sum() in (0, batch):
            labels[0] = 1 - labels[0]
        depths = rng.uniform(0.0, 1.0, size=(batch, 1, cfg.depth_map_hw, cfg.depth_map_hw))
        return images, labels, depths

    all_batches = {d: make_batch() for d in range(cfg.num_domains)}
    meta_train = (0, 1)
    meta_test = 2
    mt_batches = {d: all_batches[d] for d in meta_train}

    # Central differences are only meaningful at a point with a safe margin
    # from the relu kink set (zero-initialized biases would otherwise park
    # pre-activations exactly on it). Nudge every parameter and redraw until
    # the closest pre-activation clears the margin.
    params = model.backbone_parameters() + model.all_expert_parameters()
    base = [p.data.copy() for p in params]
    for attempt in range(50):
        for p, b in zip(params, base):
            p.data = b + rng.uniform(-0.05, 0.05, size=p.shape)
        with ops.track_relu_margin() as margin:
            snap = model.snapshot_bn()
            losses.loss_B(model, all_batches)
            losses.loss_trn(model, mt_batches)
            inner_probe = {d: model.expert_parameters(d) for d in meta_train}
            losses.loss_val(
                model,
                model.with_substituted_experts(inner_probe),
                list(meta_train),
                meta_test,
                all_batches[meta_test],
                lambda_con=0.1,
            )
            model.restore_bn(snap)
        if margin[0] > 3e-4:
            break
    else:
        raise GradientError("could not find a kink-free check point in 50 draws")

    # Coarser retries rescue zero-gradient coordinates (norm-absorbed conv
    # biases) from finite-difference cancellation noise.
    fallback = (1e-3, 1e-2, 1e-1)
    errors = {}
    errors["normal_train"] = finite_difference_check(
        _frozen_stats(lambda: losses.loss_B(model, all_batches), model),
        model.backbone_parameters(),
        step=step,
        fallback_steps=fallback,
    )
    errors["meta_train"] = finite_difference_check(
        _frozen_stats(lambda: losses.loss_trn(model, mt_batches), model),
        [p for d in meta_train for p in model.expert_parameters(d)],
        step=step,
        fallback_steps=fallback,
    )

    # Inner-updated expert parameters from one plain step on the meta-train
    # gradient; the meta-test loss is checked at these values.
    snap = model.snapshot_bn()
    tape = Tape()
    with recording(tape):
        lt = losses.loss_trn(model, mt_batches)
    tape.backward(lt)
    model.restore_bn(snap)
    inner = {}
    for d in meta_train:
        updated = []
        for p in model.expert_parameters(d):
            g = tape.grad(p)
            g = np.zeros_like(p.data) if g is None else g
            updated.append(Tensor(p.data - 1e-4 * g, requires_grad=True))
        inner[d] = updated
    inner_model = model.with_substituted_experts(inner)
    errors["meta_test"] = finite_difference_check(
        _frozen_stats(
            lambda: losses.loss_val(
                model,
                inner_model,
                list(meta_train),
                meta_test,
                all_batches[meta_test],
                lambda_con=0.1,
            ),
            model,
        ),
        [p for d in meta_train for p in inner[d]],
        step=step,
        fallback_steps=fallback,
    )
    return errors
