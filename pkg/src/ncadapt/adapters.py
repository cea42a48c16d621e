"""Per-domain adapter heads on a frozen backbone.

Each registered domain owns a residual bottleneck (down/up pointwise convs,
up zero-initialized so a fresh head is a no-op) inserted into every level's
update rule. After the first training stage a freeze policy decides which
backbone tensors remain trainable; the canonical policy keeps the perception
convolutions plus the current domain's adapter trainable and freezes both
update MLPs. At inference, when the domain is unknown, each head predicts
several times and the head whose predictions are most self-consistent wins
(NQM: summed per-pixel standard deviation normalized by the summed mean).
"""

from __future__ import annotations

import hashlib
import math
from enum import Enum

import numpy as np

from .nca import (
    ArchConfig,
    LevelParams,
    Param,
    adapter_param_count,
    backbone_param_count,
    bottleneck_residual,
    init_backbone,
    m3d_forward,
)
from .tensor import Rng, Tensor, _sigmoid


class FreezePolicy(str, Enum):
    NONE = "none"        # plain sequential training, adapters never train
    NCADAPT = "ncadapt"  # freeze MLPs; perception convs + current adapter train
    FL = "fl"            # freeze the fine level
    FH = "fh"            # freeze the coarse level
    FC = "fc"            # freeze everything except perception convs
    SA = "sa"            # one shared adapter trains from stage 2, rest frozen

    @staticmethod
    def parse(name: str) -> "FreezePolicy":
        try:
            return FreezePolicy(name.lower())
        except ValueError:
            raise ValueError(f"unknown freeze policy {name!r}") from None


SCOPE_SHARED = "shared"
SCOPE_PER_DOMAIN = "per_domain"


class DomainAdapter:
    """Bottleneck weights for one domain, one (down, up) pair per level."""

    def __init__(self, domain_id: int, label: str, pairs):
        self.domain_id = domain_id
        self.label = label
        self.pairs = pairs  # [(down Param, up Param)] per level

    def params(self):
        out = []
        for down, up in self.pairs:
            out.extend([down, up])
        return out


def _new_adapter(config: ArchConfig, domain_id: int, label: str, owner: str, rng: Rng) -> DomainAdapter:
    c, a = config.channels, config.adapter_width
    bound = 1.0 / math.sqrt(c)
    pairs = []
    for lvl in range(config.levels):
        down = Param(f"{owner}.l{lvl}.down",
                     Tensor.uniform([a, c], -bound, bound, rng.derive("adapter", domain_id, lvl)),
                     owner=owner)
        up = Param(f"{owner}.l{lvl}.up", Tensor.zeros([c, a]), owner=owner)
        pairs.append((down, up))
    return DomainAdapter(domain_id, label, pairs)


class NcadaptModel:
    """Backbone, adapters, per-tensor trainable flags, and the freeze protocol."""

    def __init__(self, config: ArchConfig, policy: FreezePolicy = FreezePolicy.NCADAPT,
                 scope: str = SCOPE_SHARED, rng: Rng | None = None):
        if scope not in (SCOPE_SHARED, SCOPE_PER_DOMAIN):
            raise ValueError(f"unknown perception scope {scope!r}")
        if scope == SCOPE_PER_DOMAIN and policy != FreezePolicy.NCADAPT:
            raise ValueError("per-domain perception copies only combine with the ncadapt policy")
        self.config = config
        self.policy = policy
        self.scope = scope
        self.init_rng = rng if rng is not None else Rng(0)
        self.levels: list[LevelParams] = init_backbone(config, self.init_rng)
        self.domain_labels: list[str] = []
        self.adapters: list[DomainAdapter] = []
        self.shared_adapter: DomainAdapter | None = None
        self.head_perception: dict[int, list] = {}
        self.frozen = False

    # -- parameter bookkeeping ----------------------------------------------

    def named_params(self) -> list[Param]:
        out = []
        for level in self.levels:
            out.extend(level.params())
        if self.shared_adapter is not None:
            out.extend(self.shared_adapter.params())
        for adapter in self.adapters:
            out.extend(adapter.params())
            if adapter.domain_id in self.head_perception:
                for kernel, bias in self.head_perception[adapter.domain_id]:
                    out.extend([kernel, bias])
        return out

    def trainable_params(self) -> list[Param]:
        return [p for p in self.named_params() if p.trainable]

    def count_params(self, which: str = "all") -> int:
        if which == "all":
            return sum(p.size for p in self.named_params())
        if which == "trainable":
            return sum(p.size for p in self.trainable_params())
        if which == "per-domain":
            if not self.adapters and self.shared_adapter is None:
                return 0
            if self.policy == FreezePolicy.SA:
                return 0  # the shared adapter is not per-domain growth
            newest = self.adapters[-1]
            total = sum(p.size for p in newest.params())
            for kernel, bias in self.head_perception.get(newest.domain_id, []):
                total += kernel.size + bias.size
            return total
        raise ValueError(f"unknown parameter filter {which!r}")

    def param_hashes(self) -> dict:
        return {p.name: hashlib.sha256(p.value.tobytes()).hexdigest() for p in self.named_params()}

    # -- domain protocol ------------------------------------------------------

    def add_domain(self, label: str) -> int:
        """Register a new domain head; existing heads are untouched."""
        if label in self.domain_labels:
            raise ValueError(f"duplicate domain label {label!r}")
        domain_id = len(self.domain_labels)
        self.domain_labels.append(label)

        if self.policy == FreezePolicy.SA:
            if self.shared_adapter is None:
                self.shared_adapter = _new_adapter(self.config, 0, "shared", "shared", self.init_rng)
                for p in self.shared_adapter.params():
                    p.trainable = self.frozen
            return domain_id

        for previous in self.adapters:
            for p in previous.params():
                p.trainable = False
        for pid in self.head_perception:
            for kernel, bias in self.head_perception[pid]:
                kernel.trainable = False
                bias.trainable = False

        adapter = _new_adapter(self.config, domain_id, label, f"domain-{domain_id}", self.init_rng)
        adapter_trainable = (not self.frozen) or self.policy == FreezePolicy.NCADAPT
        for p in adapter.params():
            p.trainable = adapter_trainable
        self.adapters.append(adapter)

        if self.scope == SCOPE_PER_DOMAIN and self.frozen:
            self._clone_perception(domain_id, trainable=True)
        return domain_id

    def _clone_perception(self, domain_id: int, trainable: bool):
        copies = []
        for lvl, level in enumerate(self.levels):
            kernel = Param(f"domain-{domain_id}.l{lvl}.kernel", Tensor(level.kernel.value.data),
                           trainable=trainable, owner=f"domain-{domain_id}")
            bias = Param(f"domain-{domain_id}.l{lvl}.bias", Tensor(level.bias.value.data),
                         trainable=trainable, owner=f"domain-{domain_id}")
            copies.append((kernel, bias))
        self.head_perception[domain_id] = copies

    def apply_freeze_policy(self):
        """Set trainable flags for every stage after the first."""
        policy = self.policy
        fine = self.config.levels - 1
        for i, level in enumerate(self.levels):
            if policy == FreezePolicy.NONE:
                conv_on, mlp_on = True, True
            elif policy == FreezePolicy.NCADAPT:
                conv_on, mlp_on = self.scope == SCOPE_SHARED, False
            elif policy == FreezePolicy.FL:
                conv_on = mlp_on = i != fine
            elif policy == FreezePolicy.FH:
                conv_on = mlp_on = i != 0
            elif policy == FreezePolicy.FC:
                conv_on, mlp_on = True, False
            elif policy == FreezePolicy.SA:
                conv_on, mlp_on = False, False
            else:
                raise ValueError(f"unknown freeze policy {policy!r}")
            level.kernel.trainable = conv_on
            level.bias.trainable = conv_on
            level.mlp1.trainable = mlp_on
            level.mlp2.trainable = mlp_on

        adapters_on = policy == FreezePolicy.NCADAPT
        for adapter in self.adapters:
            current = adapter is self.adapters[-1] if self.adapters else False
            for p in adapter.params():
                p.trainable = adapters_on and current
        if policy == FreezePolicy.SA:
            if self.shared_adapter is None:
                self.shared_adapter = _new_adapter(self.config, 0, "shared", "shared", self.init_rng)
            for p in self.shared_adapter.params():
                p.trainable = True

        if self.scope == SCOPE_PER_DOMAIN:
            # existing heads bind to a frozen snapshot of the trained convs
            for domain_id in range(len(self.domain_labels)):
                if domain_id not in self.head_perception:
                    self._clone_perception(domain_id, trainable=False)
        self.frozen = True

    # -- inference -------------------------------------------------------------

    def adapter_for(self, domain_id: int):
        if self.policy == FreezePolicy.SA:
            if self.shared_adapter is None:
                return None
            return [(d.value, u.value) for d, u in self.shared_adapter.pairs]
        adapter = self.adapters[domain_id]
        return [(d.value, u.value) for d, u in adapter.pairs]

    def perception_for(self, domain_id: int):
        copies = self.head_perception.get(domain_id)
        if copies is None:
            return None
        return [(k.value, b.value) for k, b in copies]

    def forward(self, image, domain_id: int | None, rng: Rng) -> Tensor:
        """Logit map for one image through the given domain head (or the bare
        backbone when domain_id is None)."""
        if domain_id is None:
            return m3d_forward(self.levels, self.config, image, rng)
        if not 0 <= domain_id < len(self.domain_labels):
            raise ValueError(f"unknown domain id {domain_id}")
        return m3d_forward(self.levels, self.config, image, rng,
                           adapter=self.adapter_for(domain_id),
                           perception=self.perception_for(domain_id))

    def forward_batch(self, images, domain_id: int | None, rng: Rng) -> Tensor:
        """Logit maps for a stack of same-shape images [B, *S]; samples are
        independent but share one pass through the update rule."""
        adapter = perception = None
        if domain_id is not None:
            if not 0 <= domain_id < len(self.domain_labels):
                raise ValueError(f"unknown domain id {domain_id}")
            adapter = self.adapter_for(domain_id)
            perception = self.perception_for(domain_id)
        return m3d_forward(self.levels, self.config, images, rng,
                           adapter=adapter, perception=perception, batched=True)


def adapter_apply(hidden: Tensor, adapter: DomainAdapter, level_index: int) -> Tensor:
    """Residual bottleneck of one domain head at one level: h + up(relu(down(h)))."""
    down, up = adapter.pairs[level_index]
    return bottleneck_residual(hidden, down.value, up.value)


def nqm_score(predictions) -> float:
    """Self-consistency of repeated stochastic predictions.

    Sum of per-pixel population standard deviations divided by the sum of
    per-pixel means; 0 for identical maps, +inf when the mean mask is empty.
    Invariant under positive scaling of all maps.
    """
    maps = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in predictions]
    if len(maps) < 2:
        raise ValueError("NQM needs at least 2 predictions")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ValueError("NQM predictions must share one shape")
    stack = np.stack([m.astype(np.float64) for m in maps])
    denom = float(stack.mean(axis=0).sum())
    if denom == 0.0:
        return math.inf
    sd = stack.std(axis=0)
    sd[np.ptp(stack, axis=0) == 0.0] = 0.0  # exact zero where all samples agree
    return float(sd.sum() / denom)


def select_head(model: NcadaptModel, image, n_samples: int, rng: Rng, rule: str = "min"):
    """Run every domain head n_samples times and pick one by NQM.

    Returns (domain_id, binary prediction, per-domain NQM list). Ties break
    toward the lowest domain id. The prediction is the winning head's mean
    probability map thresholded at 0.5.
    """
    if not model.domain_labels:
        raise ValueError("no domains registered")
    if n_samples < 2:
        raise ValueError("head selection needs n_samples >= 2")
    if rule not in ("min", "max"):
        raise ValueError(f"unknown NQM rule {rule!r}")

    scores = []
    means = []
    for domain_id in range(len(model.domain_labels)):
        maps = []
        for s in range(n_samples):
            logits = model.forward(image, domain_id, rng.derive("head", domain_id, s))
            maps.append(_sigmoid(logits.data.astype(np.float64)))
        scores.append(nqm_score(maps))
        means.append(np.mean(maps, axis=0))

    arr = np.asarray(scores)
    winner = int(np.argmin(arr) if rule == "min" else np.argmax(arr))
    prediction = (means[winner] > 0.5).astype(np.float32)
    return winner, prediction, scores
