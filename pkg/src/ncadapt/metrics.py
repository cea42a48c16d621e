"""Dice scoring, the stage-by-task evaluation matrix, and transfer reports.

Evaluation runs every stage checkpoint against every task's test split.
Entries where the checkpoint has a head for the task can use that head
directly (oracle domain identity); for tasks the checkpoint has never seen,
and always in nqm mode, the head is picked by NQM over repeated stochastic
predictions. Backward transfer compares the final checkpoint with the
checkpoint that had just learned a task; forward transfer compares the
previous checkpoint's zero-shot score on an unseen task with that task's
single-task baseline. All scores are fractions in [0, 1] internally;
percentages appear only in rendered tables.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import NcadaptModel, nqm_score
from .tensor import Rng, Tensor, _sigmoid

REPORT_SCHEMA_VERSION = 1


def dice_score(pred, target) -> float:
    """2|P∩T| / (|P|+|T|) for binary masks; 1.0 when both are empty."""
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise ValueError(f"dice: shape mismatch {p.shape} vs {t.shape}")
    for arr, name in ((p, "pred"), (t, "target")):
        bad = np.setdiff1d(np.unique(arr), [0.0, 1.0])
        if bad.size:
            raise ValueError(f"dice: {name} values outside {{0, 1}}: {bad[:4]}")
    psum = float(p.sum())
    tsum = float(t.sum())
    if psum + tsum == 0.0:
        return 1.0
    return 2.0 * float((p * t).sum()) / (psum + tsum)


def _head_probability_maps(model: NcadaptModel, image, domain_id: int,
                           n_samples: int, rng: Rng) -> np.ndarray:
    """[n_samples, *S] sigmoid maps from one head, independent fire masks per
    sample, in one batched pass."""
    stack = np.repeat(np.asarray(image, dtype=np.float32)[None], n_samples, axis=0)
    logits = model.forward_batch(Tensor(stack), domain_id, rng)
    return _sigmoid(logits.data.astype(np.float64))


def predict_case(model: NcadaptModel, image, rng: Rng, n_samples: int = 10,
                 domain_id: int | None = None, rule: str = "min"):
    """Binary prediction for one image: mean of n_samples stochastic maps,
    thresholded at 0.5. With domain_id=None the head is chosen by NQM.

    Returns (prediction, chosen domain id, per-head NQM list or None).
    The mask stream depends only on (rng, head), never on the checkpoint, so
    an untouched head predicts identically from any later checkpoint.
    """
    if domain_id is not None:
        maps = _head_probability_maps(model, image, domain_id, n_samples, rng.derive("head", domain_id))
        return (maps.mean(axis=0) > 0.5).astype(np.float32), domain_id, None
    scores = []
    means = []
    for d in range(len(model.domain_labels)):
        maps = _head_probability_maps(model, image, d, n_samples, rng.derive("head", d))
        scores.append(nqm_score(list(maps)))
        means.append(maps.mean(axis=0))
    arr = np.asarray(scores)
    winner = int(np.argmin(arr) if rule == "min" else np.argmax(arr))
    return (means[winner] > 0.5).astype(np.float32), winner, scores


@dataclass
class DiceMatrix:
    tasks: list
    values: list  # values[i][j]: checkpoint after stage i+1 scored on task j
    baseline: list  # baseline[j]: single-task model j on its own test split
    per_case: dict = field(default_factory=dict)  # (i, j) -> [per-case dice]
    inference_mode: str = "oracle"


def build_dice_matrix(stage_models, baseline_models, test_sets, tasks,
                      inference_mode: str = "oracle", n_samples: int = 10,
                      seed: int = 0, rule: str = "min", threads: int = 1) -> DiceMatrix:
    """Score every stage checkpoint on every task's test cases.

    Under oracle mode a checkpoint uses task j's own head when it exists
    (j <= stage) and falls back to NQM selection for unseen tasks; nqm mode
    always selects by NQM.
    """
    if inference_mode not in ("oracle", "nqm"):
        raise ValueError(f"unknown inference mode {inference_mode!r}")
    n = len(tasks)
    if len(stage_models) != n or len(test_sets) != n:
        raise ValueError("need one checkpoint and one test set per task")
    base = Rng(seed)

    def cell(i: int, j: int):
        model = stage_models[i]
        scores = []
        for c, (img, lbl) in enumerate(test_sets[j]):
            rng = base.derive("eval", tasks[j], c)
            oracle_ok = inference_mode == "oracle" and j < len(model.domain_labels)
            pred, _, _ = predict_case(model, img, rng, n_samples,
                                      domain_id=j if oracle_ok else None, rule=rule)
            scores.append(dice_score(pred, lbl))
        return scores

    cells = {}
    pairs = [(i, j) for i in range(n) for j in range(n)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for (i, j), scores in zip(pairs, pool.map(lambda ij: cell(*ij), pairs)):
                cells[(i, j)] = scores
    else:
        for i, j in pairs:
            cells[(i, j)] = cell(i, j)

    values = [[float(np.mean(cells[(i, j)])) for j in range(n)] for i in range(n)]
    baseline = []
    per_case = {f"{i + 1},{j + 1}": cells[(i, j)] for i, j in pairs}
    for j, model in enumerate(baseline_models):
        scores = []
        for c, (img, lbl) in enumerate(test_sets[j]):
            rng = base.derive("eval", tasks[j], c)
            pred, _, _ = predict_case(model, img, rng, n_samples, domain_id=0, rule=rule)
            scores.append(dice_score(pred, lbl))
        per_case[f"baseline,{j + 1}"] = scores
        baseline.append(float(np.mean(scores)))
    return DiceMatrix(tasks=list(tasks), values=values, baseline=baseline,
                      per_case=per_case, inference_mode=inference_mode)


def evaluate_model(model: NcadaptModel, cases, domain_id, seed: int = 0,
                   n_samples: int = 10, task: str = "", rule: str = "min"):
    """Per-case dice of one model over one list of (image, label) cases."""
    out = []
    for c, (img, lbl) in enumerate(cases):
        rng = Rng(seed).derive("eval", task, c)
        pred, _, _ = predict_case(model, img, rng, n_samples, domain_id=domain_id, rule=rule)
        out.append(dice_score(pred, lbl))
    return out


def selection_accuracy(model: NcadaptModel, test_sets, tasks, seed: int = 0,
                       n_samples: int = 10, rule: str = "min") -> float:
    """Fraction of test cases whose NQM-selected head is the true domain."""
    hits = total = 0
    for j, cases in enumerate(test_sets):
        for c, (img, _) in enumerate(cases):
            rng = Rng(seed).derive("eval", tasks[j], c)
            _, winner, _ = predict_case(model, img, rng, n_samples, domain_id=None, rule=rule)
            hits += int(winner == j)
            total += 1
    return hits / total if total else 0.0


@dataclass
class TransferReport:
    tasks: list
    dice_matrix: list
    baseline: list
    bwt: dict  # task name -> fraction, defined for tasks 1..n-1
    fwt: dict  # task name -> fraction, defined for tasks 2..n
    bwt_mean: float | None
    bwt_sd: float | None
    fwt_mean: float | None
    fwt_sd: float | None
    final_dice_mean: float
    final_dice_sd: float
    final_dice_per_task: list
    inference_mode: str = "oracle"
    n_samples: int = 10
    config_hash: str = ""
    trainable_counts: dict = field(default_factory=dict)
    runtimes_sec: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "tasks": self.tasks,
            "dice_matrix": self.dice_matrix,
            "baseline": self.baseline,
            "bwt": {"per_task": self.bwt, "mean": self.bwt_mean, "sd": self.bwt_sd},
            "fwt": {"per_task": self.fwt, "mean": self.fwt_mean, "sd": self.fwt_sd},
            "final_dice": {
                "mean": self.final_dice_mean,
                "sd": self.final_dice_sd,
                "per_task": self.final_dice_per_task,
            },
            "inference_mode": self.inference_mode,
            "n_samples": self.n_samples,
            "config_hash": self.config_hash,
            "trainable_counts": self.trainable_counts,
            "runtimes_sec": self.runtimes_sec,
        }

    @staticmethod
    def from_dict(doc: dict) -> "TransferReport":
        if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {doc.get('schema_version')}")
        return TransferReport(
            tasks=doc["tasks"],
            dice_matrix=doc["dice_matrix"],
            baseline=doc["baseline"],
            bwt=doc["bwt"]["per_task"],
            fwt=doc["fwt"]["per_task"],
            bwt_mean=doc["bwt"]["mean"],
            bwt_sd=doc["bwt"]["sd"],
            fwt_mean=doc["fwt"]["mean"],
            fwt_sd=doc["fwt"]["sd"],
            final_dice_mean=doc["final_dice"]["mean"],
            final_dice_sd=doc["final_dice"]["sd"],
            final_dice_per_task=doc["final_dice"]["per_task"],
            inference_mode=doc["inference_mode"],
            n_samples=doc["n_samples"],
            config_hash=doc["config_hash"],
            trainable_counts=doc["trainable_counts"],
            runtimes_sec=doc["runtimes_sec"],
        )


def transfer_metrics(matrix: DiceMatrix, config_hash: str = "",
                     trainable_counts: dict | None = None,
                     runtimes_sec: dict | None = None) -> TransferReport:
    """Backward/forward transfer from a complete dice matrix.

    BWT(task j) = D[n][j] - D[j][j] for j < n (undefined for the last task);
    FWT(task i) = D[i-1][i] - baseline[i] for i > 1 (undefined for the first).
    """
    n = len(matrix.tasks)
    d = matrix.values
    bwt = {matrix.tasks[j]: d[n - 1][j] - d[j][j] for j in range(n - 1)}
    fwt = {matrix.tasks[i]: d[i - 1][i] - matrix.baseline[i] for i in range(1, n)}

    def stats(vals):
        if not vals:
            return None, None
        arr = np.asarray(list(vals), dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    bwt_mean, bwt_sd = stats(bwt.values())
    fwt_mean, fwt_sd = stats(fwt.values())
    pooled = []
    for j in range(n):
        pooled.extend(matrix.per_case.get(f"{n},{j + 1}", [d[n - 1][j]]))
    return TransferReport(
        tasks=list(matrix.tasks),
        dice_matrix=[list(row) for row in d],
        baseline=list(matrix.baseline),
        bwt=bwt,
        fwt=fwt,
        bwt_mean=bwt_mean,
        bwt_sd=bwt_sd,
        fwt_mean=fwt_mean,
        fwt_sd=fwt_sd,
        final_dice_mean=float(np.mean(pooled)),
        final_dice_sd=float(np.std(pooled)),
        final_dice_per_task=[d[n - 1][j] for j in range(n)],
        inference_mode=matrix.inference_mode,
        config_hash=config_hash,
        trainable_counts=trainable_counts or {},
        runtimes_sec=runtimes_sec or {},
    )


def emit_report(report: TransferReport, matrix: DiceMatrix, out_dir) -> dict:
    """Write dice_matrix.csv ((n+1) x (n+1): stage rows plus a baseline row,
    row-label column, percent values) and report.json (exact fractions,
    stable key order)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(matrix.tasks)

    csv_path = out_dir / "dice_matrix.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for i in range(n):
            writer.writerow([f"stage_{i + 1}"] + [f"{100 * v:.6f}" for v in matrix.values[i]])
        writer.writerow(["baseline"] + [f"{100 * v:.6f}" for v in matrix.baseline])

    json_path = out_dir / "report.json"
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    per_case_path = out_dir / "per_case_dice.json"
    with open(per_case_path, "w") as fh:
        json.dump({"tasks": matrix.tasks, "per_case": matrix.per_case}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    return {"csv": csv_path, "json": json_path, "per_case": per_case_path}


def load_report(path) -> TransferReport:
    with open(path) as fh:
        return TransferReport.from_dict(json.load(fh))
