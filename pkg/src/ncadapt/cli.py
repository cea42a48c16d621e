"""Command-line driver for the whole experiment pipeline.

Subcommands: gen-data, train, adapt, baseline, eval, report, infer,
param-audit. Exit codes: 0 success, 1 usage/config error, 2 data error,
3 numerical failure. Errors go to stderr as `ncadapt: error: <kind>: ...`.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .adapters import FreezePolicy, NcadaptModel
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, UsageError, load_config, parse_config
from .data import (
    DataError,
    default_benchmark,
    load_manifest,
    load_split,
    rti_read,
    rti_write,
    write_dataset,
)
from .metrics import (
    DiceMatrix,
    build_dice_matrix,
    emit_report,
    predict_case,
    transfer_metrics,
)
from .nca import ArchConfig, adapter_param_count, backbone_param_count
from .training import (
    AdamState,
    NumericError,
    TrainReport,
    ewc_fisher,
    model_rng,
    train_stage,
)
from .tensor import Rng


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--data", help="override data directory")
    p.add_argument("--runs", help="override runs directory")
    p.add_argument("--run-id", help="run directory name (default run-<hash12>)")


def build_parser() -> _Parser:
    parser = _Parser(prog="ncadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, desc in [
        ("gen-data", "generate the synthetic multi-domain benchmark"),
        ("train", "train stage 1 on the first domain"),
        ("adapt", "train the next stage on an existing run"),
        ("baseline", "train a single-task reference model"),
        ("eval", "score every stage checkpoint on every task"),
        ("report", "compute transfer metrics and emit report files"),
    ]:
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        if name == "adapt":
            p.add_argument("--domain", help="domain label to adapt to (default: next in manifest)")
        if name == "baseline":
            p.add_argument("--task", required=True, help="domain label to train on")
        if name == "eval":
            p.add_argument("--mode", choices=["oracle", "nqm"], default="oracle")
            p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("infer", help="segment one image with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--domain", default="auto", help="'auto' (NQM selection), a label, or a 1-based index")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--out", help="write the binary prediction as RTI")

    p = sub.add_parser("param-audit", help="print parameter counts per freeze policy")
    p.add_argument("--arch", choices=["default3d", "default2d"], default="default3d")
    return parser


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else parse_config({})
    doc = config.to_dict()
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    if getattr(args, "data", None):
        doc["paths"]["data"] = args.data
    if getattr(args, "runs", None):
        doc["paths"]["runs"] = args.runs
    return parse_config(doc)


def _run_dir(config: RunConfig, args) -> Path:
    run_id = getattr(args, "run_id", None) or f"run-{config.config_hash()[:12]}"
    return Path(config.runs_dir) / run_id


def _domain_names(config: RunConfig):
    return [d["name"] for d in load_manifest(config.data_dir)["domains"]]


def _write_train_report(stage_dir: Path, report: TrainReport):
    with open(stage_dir / "train_report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _latest_stage(run_dir: Path) -> int:
    stages = sorted(int(p.name.split("_")[1]) for p in run_dir.glob("stage_*") if p.is_dir())
    if not stages:
        raise DataError(f"no stage checkpoints under {run_dir}")
    return stages[-1]


def _load_ewc_states(run_dir: Path, upto_stage: int):
    import pickle

    states = []
    for stage in range(1, upto_stage + 1):
        path = run_dir / f"stage_{stage}" / "ewc_state.pkl"
        if path.exists():
            with open(path, "rb") as fh:
                states.append(pickle.load(fh))
    return states


def _save_ewc_state(stage_dir: Path, state):
    import pickle

    with open(stage_dir / "ewc_state.pkl", "wb") as fh:
        pickle.dump(state, fh)


def cmd_gen_data(args) -> int:
    config = _resolve_config(args)
    specs = default_benchmark(config.seed)
    manifest = write_dataset(config.data_dir, specs, seed=config.seed)
    print(f"wrote {len(manifest['domains'])} domains to {config.data_dir}")
    return 0


def _train_one_stage(config: RunConfig, run_dir: Path, model: NcadaptModel,
                     domain_id: int, label: str, stage: int, ewc_states=()):
    cases = load_split(config.data_dir, label, "train")
    optimizer = AdamState()
    report = train_stage(model, cases, config.train, domain_id, stage, config.seed,
                         ewc_states=tuple(ewc_states), optimizer=optimizer)
    if config.train.ewc_lambda is not None:
        state = ewc_fisher(model, cases, domain_id, config.train,
                           Rng(config.seed).derive("fisher", stage))
    else:
        state = None
    if stage == 1:
        model.apply_freeze_policy()
    stage_dir = run_dir / f"stage_{stage}"
    save_checkpoint(stage_dir, model, config, stage, optimizer, report.rng_state)
    _write_train_report(stage_dir, report)
    if state is not None:
        _save_ewc_state(stage_dir, state)
    print(f"stage {stage} [{label}]: loss {report.final_loss:.4f}, "
          f"{report.trainable_params} trainable params, {report.wall_time_sec:.1f}s")
    return report


def cmd_train(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(config, args)
    names = _domain_names(config)
    model = NcadaptModel(config.arch, policy=config.policy, scope=config.perception_scope,
                         rng=model_rng(config.seed))
    domain_id = model.add_domain(names[0])
    _train_one_stage(config, run_dir, model, domain_id, names[0], stage=1)
    return 0


def cmd_adapt(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(config, args)
    stage = _latest_stage(run_dir)
    model, _, ckpt_config, manifest = load_checkpoint(run_dir / f"stage_{stage}")
    if ckpt_config.config_hash() != config.config_hash():
        raise UsageError("config does not match the checkpointed run")
    names = _domain_names(config)
    label = args.domain
    if label is None:
        done = manifest["domains"]
        remaining = [n for n in names if n not in done]
        if not remaining:
            raise UsageError("all manifest domains already trained")
        label = remaining[0]
    if label not in names:
        raise UsageError(f"domain {label!r} not in dataset manifest")

    pre = model.param_hashes()
    domain_id = model.add_domain(label)
    ewc_states = _load_ewc_states(run_dir, stage) if config.train.ewc_lambda is not None else []
    report = _train_one_stage(config, run_dir, model, domain_id, label, stage + 1,
                              ewc_states=ewc_states)
    post = model.param_hashes()
    changed = {n for n in pre if pre[n] != post.get(n)}
    allowed = {p.name for p in model.named_params()
               if p.trainable or p.owner == f"domain-{domain_id}"}
    leaked = changed - allowed
    if leaked:
        raise NumericError(f"adapt touched frozen tensors: {sorted(leaked)[:4]}")
    return 0


def cmd_baseline(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(config, args)
    names = _domain_names(config)
    if args.task not in names:
        raise UsageError(f"task {args.task!r} not in dataset manifest")
    model = NcadaptModel(config.arch, policy=FreezePolicy.NONE, rng=model_rng(config.seed))
    domain_id = model.add_domain(args.task)
    cases = load_split(config.data_dir, args.task, "train")
    optimizer = AdamState()
    report = train_stage(model, cases, config.train, domain_id, 1, config.seed,
                         optimizer=optimizer)
    stage_dir = run_dir / f"baseline_{args.task}"
    save_checkpoint(stage_dir, model, config, 1, optimizer, report.rng_state)
    _write_train_report(stage_dir, report)
    print(f"baseline [{args.task}]: loss {report.final_loss:.4f}, {report.wall_time_sec:.1f}s")
    return 0


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(config, args)
    names = _domain_names(config)
    n = _latest_stage(run_dir)
    if n != len(names):
        raise DataError(f"run has {n} stages but the dataset has {len(names)} domains")
    stage_models = [load_checkpoint(run_dir / f"stage_{s}")[0] for s in range(1, n + 1)]
    baseline_models = []
    for name in names:
        bdir = run_dir / f"baseline_{name}"
        if not bdir.exists():
            raise DataError(f"missing baseline checkpoint {bdir}")
        baseline_models.append(load_checkpoint(bdir)[0])
    test_sets = [load_split(config.data_dir, name, "test") for name in names]
    matrix = build_dice_matrix(stage_models, baseline_models, test_sets, names,
                               inference_mode=args.mode, n_samples=config.n_samples,
                               seed=config.seed, rule=config.nqm_rule, threads=args.threads)
    out = run_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "dice_matrix.json", "w") as fh:
        json.dump(
            {
                "tasks": matrix.tasks,
                "values": matrix.values,
                "baseline": matrix.baseline,
                "per_case": matrix.per_case,
                "inference_mode": matrix.inference_mode,
                "n_samples": config.n_samples,
                "config_hash": config.config_hash(),
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    for i, row in enumerate(matrix.values):
        print(f"stage_{i + 1}: " + " ".join(f"{100 * v:6.2f}" for v in row))
    print("baseline: " + " ".join(f"{100 * v:6.2f}" for v in matrix.baseline))
    return 0


def cmd_report(args) -> int:
    config = _resolve_config(args)
    run_dir = _run_dir(config, args)
    matrix_path = run_dir / "eval" / "dice_matrix.json"
    if not matrix_path.exists():
        raise DataError(f"no evaluation matrix at {matrix_path}; run eval first")
    doc = json.loads(matrix_path.read_text())
    matrix = DiceMatrix(tasks=doc["tasks"], values=doc["values"], baseline=doc["baseline"],
                        per_case=doc["per_case"], inference_mode=doc["inference_mode"])
    trainable = {}
    runtimes = {}
    for stage in range(1, len(doc["tasks"]) + 1):
        rp = run_dir / f"stage_{stage}" / "train_report.json"
        if rp.exists():
            r = json.loads(rp.read_text())
            trainable[str(stage)] = r["trainable_params"]
            runtimes[str(stage)] = r["wall_time_sec"]
    report = transfer_metrics(matrix, config_hash=doc["config_hash"],
                              trainable_counts=trainable, runtimes_sec=runtimes)
    paths = emit_report(report, matrix, run_dir / "report")
    if report.bwt_mean is not None:
        print(f"BWT mean {100 * report.bwt_mean:+.2f}  FWT mean {100 * report.fwt_mean:+.2f}  "
              f"final dice {100 * report.final_dice_mean:.2f}")
    else:
        print(f"final dice {100 * report.final_dice_mean:.2f}")
    print(f"report: {paths['json']}")
    return 0


def cmd_infer(args) -> int:
    model, _, config, manifest = load_checkpoint(args.checkpoint)
    image = rti_read(args.image)
    n_samples = args.samples if args.samples is not None else config.n_samples
    if n_samples < 2:
        raise UsageError("--samples must be >= 2")
    labels = manifest["domains"]
    if args.domain == "auto":
        domain_id = None
    elif args.domain in labels:
        domain_id = labels.index(args.domain)
    else:
        try:
            domain_id = int(args.domain) - 1
        except ValueError:
            raise UsageError(f"unknown domain {args.domain!r}") from None
        if not 0 <= domain_id < len(labels):
            raise UsageError(f"domain index {args.domain} out of range 1..{len(labels)}")
    rng = Rng(config.seed).derive("infer")
    pred, chosen, scores = predict_case(model, image, rng, n_samples,
                                        domain_id=domain_id, rule=config.nqm_rule)
    if args.out:
        rti_write(args.out, pred)
    print(json.dumps(
        {
            "domain": chosen + 1,
            "label": labels[chosen],
            "nqm": scores,
            "foreground_pixels": int(pred.sum()),
        },
        sort_keys=True,
    ))
    return 0


def cmd_param_audit(args) -> int:
    arch = ArchConfig(rank=3) if args.arch == "default3d" else ArchConfig(rank=2)

    def trainable_after_freeze(policy):
        model = NcadaptModel(arch, policy=policy, rng=Rng(0))
        model.add_domain("a")
        model.apply_freeze_policy()
        if policy != FreezePolicy.SA:
            model.add_domain("b")
        return model.count_params("trainable")

    sa_model = NcadaptModel(arch, policy=FreezePolicy.SA, rng=Rng(0))
    sa_model.add_domain("a")
    sa_model.apply_freeze_policy()
    sa_model.add_domain("b")

    rows = [
        ("all", backbone_param_count(arch)),
        ("ncadapt-trainable", trainable_after_freeze(FreezePolicy.NCADAPT)),
        ("per-domain", adapter_param_count(arch)),
        ("fc", trainable_after_freeze(FreezePolicy.FC)),
        ("fh", trainable_after_freeze(FreezePolicy.FH)),
        ("fl", trainable_after_freeze(FreezePolicy.FL)),
        ("sa-total", sa_model.count_params("all")),
    ]
    for name, value in rows:
        print(f"{name}={value}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "report": cmd_report,
    "infer": cmd_infer,
    "param-audit": cmd_param_audit,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ncadapt: error: usage: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"ncadapt: error: data: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"ncadapt: error: numeric: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"ncadapt: error: usage: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
