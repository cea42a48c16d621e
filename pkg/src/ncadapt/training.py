"""Training: dice-focal loss, Adam, EWC regularization, and the continual driver.

One stage = Adam over the currently trainable tensors with a per-epoch
exponential learning-rate decay, seeded batch order, and seeded fire masks,
so identical (seed, config, data) reproduce identical parameter bytes. The
continual driver trains the first stage in full, applies the freeze policy,
then adds one domain head per subsequent stage. Optional EWC support anchors
previously trained tensors with a diagonal-Fisher quadratic penalty.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import FreezePolicy, NcadaptModel
from .nca import ArchConfig
from .tensor import (
    Rng,
    Tape,
    Tensor,
    add,
    affine,
    div,
    focal_bce_with_logits,
    mul,
    reshape,
    sigmoid,
    slice_channels,
    sub,
    sum_all,
)


class NumericError(Exception):
    """Training diverged or produced non-finite values."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 8
    lr: float = 1.6e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lr_gamma: float = 0.9999  # per-epoch exponential decay
    focal_gamma: float = 2.0
    dice_smooth: float = 1e-5
    ewc_lambda: float | None = None
    fisher_batches: int = 8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.lr < 0 or self.eps <= 0:
            raise ValueError("lr must be >= 0 and eps > 0")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise ValueError("lr gamma must be in (0, 1]")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must be in [0, 1)")
        if self.ewc_lambda is not None and self.ewc_lambda < 0:
            raise ValueError("ewc lambda must be >= 0")


def dice_focal_loss(logits: Tensor, target: Tensor, smooth: float = 1e-5,
                    gamma: float = 2.0) -> Tensor:
    """Soft dice plus binary focal loss, equally weighted."""
    if logits.shape != target.shape:
        raise ValueError(f"loss: shape mismatch {logits.shape} vs {target.shape}")
    bad = np.setdiff1d(np.unique(target.data), [0.0, 1.0])
    if bad.size:
        raise ValueError(f"target values outside {{0, 1}}: {bad[:4]}")
    p = sigmoid(logits)
    inter = sum_all(mul(p, target))
    num = affine(inter, 2.0, smooth)
    den = affine(add(sum_all(p), sum_all(target)), 1.0, smooth)
    dice_term = affine(div(num, den), -1.0, 1.0)
    focal_term = focal_bce_with_logits(logits, target, gamma)
    return add(dice_term, focal_term)


class AdamState:
    """First/second moment buffers keyed by parameter name, plus step count."""

    def __init__(self):
        self.m: dict = {}
        self.v: dict = {}
        self.t: int = 0


def adam_step(params, grads, state: AdamState, config: TrainConfig, lr: float) -> None:
    """One bias-corrected update of the given (trainable) parameters in place."""
    state.t += 1
    t = state.t
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for p in params:
        g = grads[p.name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {p.name} at step {t}")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1.0 - config.beta1) * g if m is None else config.beta1 * m + (1.0 - config.beta1) * g
        v = (1.0 - config.beta2) * g * g if v is None else config.beta2 * v + (1.0 - config.beta2) * g * g
        state.m[p.name] = m
        state.v[p.name] = v
        step = lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
        p.value = Tensor(p.value.data - step.astype(p.value.data.dtype))


@dataclass
class EwcState:
    """Snapshot of protected parameters and their diagonal Fisher weights."""

    theta: dict
    fisher: dict


def _batches(n: int, batch_size: int):
    return [list(range(i, min(i + batch_size, n))) for i in range(0, n, batch_size)]


def ewc_fisher(model: NcadaptModel, dataset, domain_id: int, config: TrainConfig,
               rng: Rng) -> EwcState:
    """Diagonal Fisher: mean over sampled batches of the squared loss gradient.

    Runs with fire rate 1 so the estimate is a pure function of the data and
    duplicated batches cannot change the mean.
    """
    if not dataset:
        raise ValueError("cannot estimate Fisher on an empty dataset")
    protected = model.trainable_params()
    all_batches = _batches(len(dataset), config.batch_size)
    if config.fisher_batches < len(all_batches):
        picked = sorted(int(i) for i in rng.choice(len(all_batches), config.fisher_batches))
        all_batches = [all_batches[i] for i in picked]

    old_config = model.config
    model.config = dataclasses.replace(old_config, fire_rate=1.0)
    try:
        fisher = {p.name: np.zeros(p.value.shape, dtype=np.float64) for p in protected}
        for batch in all_batches:
            tape = Tape()
            ids = {p.name: tape.watch(p.value) for p in protected}
            loss = None
            for idx in batch:
                img, lbl = dataset[idx]
                logits = model.forward(img, domain_id, rng.derive("fisher-mask"))
                term = dice_focal_loss(logits, Tensor(lbl), config.dice_smooth, config.focal_gamma)
                loss = term if loss is None else add(loss, term)
            loss = affine(loss, 1.0 / len(batch))
            grads = tape.backward(loss)
            for p in protected:
                g = grads[ids[p.name]].data.astype(np.float64)
                fisher[p.name] += g * g
        for name in fisher:
            fisher[name] /= len(all_batches)
    finally:
        model.config = old_config

    theta = {p.name: p.value.data.copy() for p in protected}
    return EwcState(theta=theta, fisher={k: v.astype(np.float32) for k, v in fisher.items()})


def ewc_penalty(params, ewc_states, lam: float) -> Tensor:
    """(lam / 2) * sum over anchors of F * (theta - theta*)^2."""
    by_name = {p.name: p for p in params}
    total = None
    for state in ewc_states:
        for name, anchor in state.theta.items():
            p = by_name.get(name)
            if p is None:
                continue
            diff = sub(p.value, Tensor(anchor, dtype=p.value.data.dtype))
            term = sum_all(mul(mul(diff, diff), Tensor(state.fisher[name], dtype=p.value.data.dtype)))
            total = term if total is None else add(total, term)
    if total is None:
        return Tensor(np.zeros(()))
    return affine(total, lam / 2.0)


@dataclass
class TrainReport:
    stage: int
    domain: str
    epochs: int
    final_loss: float
    wall_time_sec: float
    trainable_params: int
    loss_curve: list = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "domain": self.domain,
            "epochs": self.epochs,
            "final_loss": self.final_loss,
            "wall_time_sec": self.wall_time_sec,
            "trainable_params": self.trainable_params,
            "loss_curve": self.loss_curve,
            "rng_state": self.rng_state,
        }


def model_rng(seed: int) -> Rng:
    return Rng(seed).derive("model-init")


def _batch_loss(model: NcadaptModel, samples, domain_id: int, fire_rng: Rng,
                config: TrainConfig) -> Tensor:
    """Mean dice-focal loss over a batch; same-shape samples share one
    batched forward pass."""
    shapes = {img.shape for img, _ in samples}
    loss = None
    if len(shapes) == 1 and len(samples) > 1:
        stack = np.stack([img for img, _ in samples])
        logits = model.forward_batch(Tensor(stack), domain_id, fire_rng)
        spatial = samples[0][0].shape
        for b, (_, lbl) in enumerate(samples):
            one = reshape(slice_channels(logits, b, b + 1), spatial)
            term = dice_focal_loss(one, Tensor(lbl), config.dice_smooth, config.focal_gamma)
            loss = term if loss is None else add(loss, term)
    else:
        for img, lbl in samples:
            logits = model.forward(img, domain_id, fire_rng)
            term = dice_focal_loss(logits, Tensor(lbl), config.dice_smooth, config.focal_gamma)
            loss = term if loss is None else add(loss, term)
    return affine(loss, 1.0 / len(samples))


def train_stage(model: NcadaptModel, dataset, config: TrainConfig, domain_id: int,
                stage_index: int, seed: int, ewc_states=(),
                optimizer: AdamState | None = None) -> TrainReport:
    """Optimize the trainable tensors on one domain's training cases.

    Bitwise deterministic for fixed (seed, config, data): batch order comes
    from a seeded shuffle and fire masks from a dedicated stream. Divergence
    restores the last epoch-end parameters before raising.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    if not 0 <= domain_id < len(model.domain_labels):
        raise ValueError(f"domain id {domain_id} not registered")
    params = model.trainable_params()
    order_rng = Rng(seed).derive("order", stage_index)
    fire_rng = Rng(seed).derive("fire", stage_index)
    optimizer = optimizer if optimizer is not None else AdamState()
    lam = config.ewc_lambda

    n = len(dataset)
    curve = []
    last_good = {p.name: p.value for p in params}
    started = time.perf_counter()
    for epoch in range(config.epochs):
        lr_t = config.lr * config.lr_gamma ** epoch
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        for batch in _batches(n, config.batch_size):
            tape = Tape()
            ids = {p.name: tape.watch(p.value) for p in params}
            picked = [dataset[int(perm[j])] for j in batch]
            loss = _batch_loss(model, picked, domain_id, fire_rng, config)
            if lam and ewc_states:
                loss = add(loss, ewc_penalty(params, ewc_states, lam))
            value = loss.item()
            if not np.isfinite(value):
                for p in params:
                    p.value = last_good[p.name]
                raise NumericError(
                    f"loss diverged at stage {stage_index} epoch {epoch} (loss={value}); "
                    "last epoch-end parameters restored"
                )
            grads = tape.backward(loss)
            adam_step(params, {name: grads[nid] for name, nid in ids.items()}, optimizer,
                      config, lr_t)
            epoch_loss += value * len(batch)
        curve.append(epoch_loss / n)
        last_good = {p.name: p.value for p in params}
    elapsed = time.perf_counter() - started

    return TrainReport(
        stage=stage_index,
        domain=model.domain_labels[domain_id],
        epochs=config.epochs,
        final_loss=curve[-1],
        wall_time_sec=elapsed,
        trainable_params=sum(p.size for p in params),
        loss_curve=curve,
        rng_state=fire_rng.state(),
    )


def run_continual(model: NcadaptModel, tasks, config: TrainConfig, seed: int,
                  on_stage=None):
    """Train task after task: full backbone on the first, freeze, then one
    fresh adapter head per later stage. `tasks` is a list of (label, cases).

    `on_stage(stage_index, model, report, optimizer)` runs after each stage
    (after the stage-1 freeze), which is where checkpoints get persisted.
    """
    if not tasks:
        raise ValueError("no tasks to train on")
    reports = []
    ewc_states = []
    for i, (label, cases) in enumerate(tasks):
        stage = i + 1
        domain_id = model.add_domain(label)
        optimizer = AdamState()
        report = train_stage(model, cases, config, domain_id, stage, seed,
                             ewc_states=tuple(ewc_states), optimizer=optimizer)
        if config.ewc_lambda is not None:
            ewc_states.append(
                ewc_fisher(model, cases, domain_id, config, Rng(seed).derive("fisher", stage))
            )
        if stage == 1:
            model.apply_freeze_policy()
        reports.append(report)
        if on_stage is not None:
            on_stage(stage, model, report, optimizer)
    return reports


def train_baseline(label: str, cases, arch: ArchConfig, config: TrainConfig, seed: int):
    """Single-task reference model: same stage-1 procedure, never frozen."""
    model = NcadaptModel(arch, policy=FreezePolicy.NONE, rng=model_rng(seed))
    domain_id = model.add_domain(label)
    optimizer = AdamState()
    report = train_stage(model, cases, config, domain_id, stage_index=1, seed=seed,
                         optimizer=optimizer)
    return model, report, optimizer
