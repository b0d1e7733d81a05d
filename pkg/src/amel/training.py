"""Episodic training: normal train, meta-train, meta-test, meta-optimization.

Each iteration splits the source domains into simulated sources (meta-train)
and one simulated unseen domain (meta-test). The backbone and heads follow
the normal supervised update; the domain experts are updated through the
episodic loop: a plain inner gradient step produces updated expert
parameters, the meta-test loss is evaluated with those, and the outer Adam
step applies the summed inner and meta-test gradients to the original expert
parameters (first-order approximation of the meta gradient).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses
from .autodiff import Tape, Tensor, recording
from .errors import ConfigError, TrainingDivergedError
from .model import AmelModel

TRAIN_MODES = ("full", "dse_dea", "baseline")


@dataclass
class TrainConfig:
    """Optimization hyperparameters.

    ``beta`` drives the normal-train and inner expert steps, ``gamma`` the
    outer meta-optimization; both default to the reference value 1e-4.
    ``first_order=True`` is the supported contract: the meta gradient at the
    original expert parameters is approximated by the gradient taken at the
    inner-updated ones.
    """

    beta: float = 1e-4
    gamma: float = 1e-4
    lambda_con: float = 0.1
    batch_per_domain: int = 8
    max_epochs: int = 1
    max_iters: int = 200
    seed: int = 0
    optimizer: str = "adam"
    first_order: bool = True
    consistency_target: str = "own_expert"
    log_every: int = 20

    def validate(self) -> None:
        # zero is allowed so frozen-parameter runs stay expressible
        if self.beta < 0:
            raise ConfigError("beta", "learning rate must be non-negative")
        if self.gamma < 0:
            raise ConfigError("gamma", "learning rate must be non-negative")
        if self.lambda_con < 0:
            raise ConfigError("lambda_con", "must be non-negative")
        if self.batch_per_domain < 2:
            raise ConfigError("batch_per_domain", "batch norm needs at least 2 samples")
        if self.max_epochs < 1 or self.max_iters < 1:
            raise ConfigError("max_iters", "epoch and iteration counts must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer", f"unknown optimizer {self.optimizer!r}")
        if not self.first_order:
            raise ConfigError(
                "first_order", "exact second-order meta-gradients are not implemented"
            )
        if self.consistency_target not in ("own_expert", "aggregated"):
            raise ConfigError("consistency_target", "must be 'own_expert' or 'aggregated'")


Batch = tuple  # (images [B,3,H,W], labels [B], depths [B,1,d,d]) numpy arrays


@dataclass
class Episode:
    """One iteration's domain split plus the per-phase batch draws."""

    meta_train_domains: tuple[int, ...]
    meta_test_domain: int
    batches: Optional[dict[int, Batch]] = None
    meta_train_batches: Optional[dict[int, Batch]] = None
    meta_test_batch: Optional[Batch] = None

    def validate(self, num_domains: int, batch_per_domain: int) -> None:
        seen = set(self.meta_train_domains) | {self.meta_test_domain}
        if seen != set(range(num_domains)) or len(self.meta_train_domains) != num_domains - 1:
            raise ConfigError("episode", "domain split must partition the source domains")
        for group in (self.batches, self.meta_train_batches):
            if group:
                for d, b in group.items():
                    if b[0].shape[0] != batch_per_domain:
                        raise ConfigError(
                            "episode", f"domain {d} batch has {b[0].shape[0]} samples"
                        )


def split_episode(num_domains: int, rng: np.random.Generator) -> Episode:
    """Uniformly hold one domain out as meta-test; the rest meta-train."""
    if num_domains < 2:
        raise ConfigError("num_domains", "episodic training needs at least two source domains")
    held_out = int(rng.integers(num_domains))
    return Episode(
        meta_train_domains=tuple(d for d in range(num_domains) if d != held_out),
        meta_test_domain=held_out,
    )


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, grads: Sequence[Optional[np.ndarray]]) -> None:
        for p, g in zip(self.params, grads):
            if g is None:
                continue
            p.data -= (p.data.dtype.type(self.lr)) * g


class Adam:
    """Adam with bias correction; parameters with a ``None`` gradient are
    skipped entirely (their moments and step counters do not advance)."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self, grads: Sequence[Optional[np.ndarray]]) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            self.t[i] += 1
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t[i])
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t[i])
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def make_optimizer(name: str, params: Sequence[Tensor], lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ConfigError("optimizer", f"unknown optimizer {name!r}")


def gradient_norm(grads: Sequence[Optional[np.ndarray]]) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# Phase steps
# ---------------------------------------------------------------------------


def normal_train_step(
    model: AmelModel,
    batches: dict[int, Batch],
    opt_b,
    use_experts: bool = True,
    opt_e=None,
    metrics: Optional[dict] = None,
) -> float:
    """One backbone/head update from the all-domain supervised loss.

    Expert parameters act as constants: they sit in the forward path but the
    optimizer step touches only the backbone group, so they are bit-identical
    afterwards. Passing ``opt_e`` additionally applies the same loss's expert
    gradients (the no-meta-learning ablation variant).
    """
    tape = Tape()
    with recording(tape):
        loss = losses.loss_B(model, batches, use_experts=use_experts)
    tape.backward(loss)
    grads_b = [tape.grad(p) for p in opt_b.params]
    opt_b.step(grads_b)
    if opt_e is not None:
        opt_e.step([tape.grad(p) for p in opt_e.params])
    if metrics is not None:
        metrics["grad_norm_base"] = gradient_norm(grads_b)
    return loss.item()


def meta_train_step(
    model: AmelModel, meta_batches: dict[int, Batch], beta: float
) -> tuple[float, dict[int, list[Tensor]], dict[int, list[np.ndarray]]]:
    """Expert gradients on the simulated sources plus the inner update.

    Returns the loss, the inner-updated expert parameters (one plain
    gradient step of size ``beta``, fresh tensors so the originals survive
    for the outer update) and the retained gradients.
    """
    tape = Tape()
    with recording(tape):
        loss = losses.loss_trn(model, meta_batches)
    tape.backward(loss)
    inner: dict[int, list[Tensor]] = {}
    retained: dict[int, list[np.ndarray]] = {}
    for d in meta_batches:
        grads = []
        updated = []
        for p in model.expert_parameters(d):
            g = tape.grad(p)
            if g is None:
                g = np.zeros_like(p.data)
            grads.append(g)
            updated.append(Tensor(p.data - p.data.dtype.type(beta) * g, requires_grad=True))
        inner[d] = updated
        retained[d] = grads
    return loss.item(), inner, retained


def meta_test_step(
    model: AmelModel,
    inner: dict[int, list[Tensor]],
    episode: Episode,
    lambda_con: float,
    consistency_target: str = "own_expert",
) -> tuple[float, dict[int, list[np.ndarray]], Optional[list[np.ndarray]]]:
    """Held-out-domain loss with aggregation over the inner-updated experts.

    Gradients are taken at the inner-updated parameters (first-order
    contract). The held-out expert only accrues gradient when the
    consistency target is reversed; the returned entry is None otherwise.
    """
    inner_model = model.with_substituted_experts(inner)
    tape = Tape()
    with recording(tape):
        loss = losses.loss_val(
            model,
            inner_model,
            list(episode.meta_train_domains),
            episode.meta_test_domain,
            episode.meta_test_batch,
            lambda_con=lambda_con,
            consistency_target=consistency_target,
        )
    tape.backward(loss)
    g_val = {
        d: [tape.grad(p) for p in inner[d]] for d in episode.meta_train_domains
    }
    g_heldout = [tape.grad(p) for p in model.expert_parameters(episode.meta_test_domain)]
    if all(g is None for g in g_heldout):
        g_heldout = None
    return loss.item(), g_val, g_heldout


def meta_optimize(
    model: AmelModel,
    opt_e,
    episode: Episode,
    g_trn: dict[int, list[np.ndarray]],
    g_val: dict[int, list[np.ndarray]],
    g_heldout: Optional[list[np.ndarray]] = None,
) -> None:
    """Outer expert update from the summed inner and meta-test gradients.

    ``opt_e`` spans every expert's parameters in expert order; domains
    outside the episode's meta-train set receive no update this iteration
    (held-out expert included, unless it accrued gradient).
    """
    grads: list[Optional[np.ndarray]] = []
    per_expert = len(model.expert_parameters(0))
    for d in range(len(model.experts)):
        if d in g_trn:
            for gt, gv in zip(g_trn[d], g_val.get(d, [None] * per_expert)):
                grads.append(gt if gv is None else gt + gv)
        elif d == episode.meta_test_domain and g_heldout is not None:
            grads.extend(g_heldout)
        else:
            grads.extend([None] * per_expert)
    opt_e.step(grads)


# ---------------------------------------------------------------------------
# The full loop
# ---------------------------------------------------------------------------


def sample_episode(dataset, config: TrainConfig, rng: np.random.Generator) -> Episode:
    """Split domains and draw the three phase batches (each phase samples its
    own batch, exactly ``batch_per_domain`` per domain)."""
    ep = split_episode(dataset.num_domains, rng)
    B = config.batch_per_domain
    ep.batches = {d: dataset.sample_batch(d, B, rng) for d in range(dataset.num_domains)}
    ep.meta_train_batches = {d: dataset.sample_batch(d, B, rng) for d in ep.meta_train_domains}
    ep.meta_test_batch = dataset.sample_batch(ep.meta_test_domain, B, rng)
    ep.validate(dataset.num_domains, B)
    return ep


def _check_finite(value: float, phase: str, iteration: int) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(phase, iteration, value)


def train(
    model: AmelModel,
    dataset,
    config: TrainConfig,
    mode: str = "full",
    log_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    eval_fn: Optional[Callable[[AmelModel, int], dict]] = None,
    eval_every: int = 0,
) -> list[dict]:
    """Run the episodic training loop; returns the per-iteration log records.

    ``mode`` selects the ablation variant: ``baseline`` trains backbone and
    heads only, ``dse_dea`` adds supervised expert training without the
    episodic phases, ``full`` is the complete procedure.
    """
    config.validate()
    if mode not in TRAIN_MODES:
        raise ConfigError("train_mode", f"unknown mode {mode!r}")
    if dataset.num_domains != model.config.num_domains and mode != "baseline":
        raise ConfigError(
            "num_domains",
            f"model has {model.config.num_domains} experts, dataset {dataset.num_domains} domains",
        )
    rng = np.random.default_rng(config.seed)
    opt_b = make_optimizer(config.optimizer, model.backbone_parameters(), config.beta)
    opt_e = make_optimizer(config.optimizer, model.all_expert_parameters(), config.gamma)
    records: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    start = time.monotonic()
    iteration = 0
    try:
        for epoch in range(config.max_epochs):
            for _ in range(config.max_iters):
                iteration += 1
                record: dict = {"iteration": iteration, "epoch": epoch, "mode": mode}
                if mode == "baseline":
                    B = config.batch_per_domain
                    batches = {
                        d: dataset.sample_batch(d, B, rng) for d in range(dataset.num_domains)
                    }
                    loss_base = normal_train_step(
                        model, batches, opt_b, use_experts=False, metrics=record
                    )
                    _check_finite(loss_base, "normal_train", iteration)
                    record["loss_base"] = loss_base
                elif mode == "dse_dea":
                    B = config.batch_per_domain
                    batches = {
                        d: dataset.sample_batch(d, B, rng) for d in range(dataset.num_domains)
                    }
                    loss_base = normal_train_step(
                        model, batches, opt_b, opt_e=opt_e, metrics=record
                    )
                    _check_finite(loss_base, "normal_train", iteration)
                    record["loss_base"] = loss_base
                else:
                    ep = sample_episode(dataset, config, rng)
                    loss_base = normal_train_step(model, ep.batches, opt_b, metrics=record)
                    _check_finite(loss_base, "normal_train", iteration)
                    loss_mt, inner, g_trn = meta_train_step(
                        model, ep.meta_train_batches, config.beta
                    )
                    _check_finite(loss_mt, "meta_train", iteration)
                    loss_mv, g_val, g_heldout = meta_test_step(
                        model, inner, ep, config.lambda_con, config.consistency_target
                    )
                    _check_finite(loss_mv, "meta_test", iteration)
                    meta_optimize(model, opt_e, ep, g_trn, g_val, g_heldout)
                    record.update(
                        {
                            "loss_base": loss_base,
                            "loss_meta_train": loss_mt,
                            "loss_meta_test": loss_mv,
                            "meta_test_domain": ep.meta_test_domain,
                            "grad_norm_meta_train": gradient_norm(
                                [g for gs in g_trn.values() for g in gs]
                            ),
                            "grad_norm_meta_test": gradient_norm(
                                [g for gs in g_val.values() for g in gs if g is not None]
                            ),
                        }
                    )
                record["wall_time"] = time.monotonic() - start
                if eval_fn is not None and eval_every and iteration % eval_every == 0:
                    record["eval"] = eval_fn(model, iteration)
                records.append(record)
                if log_file and (
                    iteration % config.log_every == 0 or iteration == 1 or "eval" in record
                ):
                    log_file.write(json.dumps(record) + "\n")
                if checkpoint_path and checkpoint_every and iteration % checkpoint_every == 0:
                    from .model import save_checkpoint

                    save_checkpoint(model, checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    return records
