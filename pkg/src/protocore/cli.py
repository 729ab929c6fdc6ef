"""Command-line harness: run experiments, ablate loss terms, verify
gradients, and export embeddings.

Exit codes: 0 success, 1 configuration/validation failure, 2 numerical
failure. All artifacts are UTF-8 JSON/CSV written under the resolved
run directory; the exact resolved configuration is stored alongside so
a rerun never depends on code-default drift.
"""

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datasets as ds
from . import prototypes as pr
from . import synthesis as sy
from . import training as tr
from .memory import MemoryPool, SynthMemory
from .model import Network
from .seeding import child_rng

OUTPUT_ROOT_ENV = "PROTOCORE_OUTPUT_ROOT"
GRADCHECK_TOLERANCE = 1e-4

DATASET_DEFAULTS = {
    "split_gaussians": {"n_classes": 10, "n_tasks": 5, "input_dim": 16,
                        "n_per_class": 100, "separation": 8.0, "noise_sd": 0.5},
    "split_rings": {"n_classes": 8, "n_tasks": 4, "n_per_class": 100},
}

EMBEDDING_DUMP_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "task_id", "points"],
    "properties": {
        "format": {"const": "embedding-dump"},
        "version": {"type": "integer"},
        "task_id": {"type": "integer"},
        "points": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "class_id", "embedding"],
                "properties": {
                    "kind": {"enum": ["test", "prototype", "synthetic"]},
                    "class_id": {"type": "integer"},
                    "embedding": {"type": "array", "items": {"type": "number"}},
                    "source_task": {"type": ["integer", "null"]},
                },
            },
        },
    },
}


class ValidationError(ValueError):
    """Configuration problem; maps to exit code 1."""


def _dump_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# experiment configuration


def resolve_config(raw: dict) -> dict:
    """Validate a config dict and materialize every default."""
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    for required in ("seed", "dataset"):
        if required not in raw:
            raise ValidationError(f"missing required field: {required}")
    known_top = {"label", "seed", "output_dir", "dataset", "run"}
    unknown = set(raw) - known_top
    if unknown:
        raise ValidationError(f"unknown top-level fields: {sorted(unknown)}")
    if not isinstance(raw["seed"], int):
        raise ValidationError("field seed: expected an integer")

    dataset = raw["dataset"]
    if not isinstance(dataset, dict) or "generator" not in dataset:
        raise ValidationError("missing required field: dataset.generator")
    generator = dataset["generator"]
    if generator not in DATASET_DEFAULTS:
        raise ValidationError(
            f"field dataset.generator: unknown generator {generator!r}")
    resolved_dataset = dict(DATASET_DEFAULTS[generator])
    resolved_dataset["generator"] = generator
    resolved_dataset["seed"] = raw["seed"]
    for key, value in dataset.items():
        if key == "generator":
            continue
        if key not in resolved_dataset:
            raise ValidationError(f"field dataset.{key}: unknown for {generator}")
        resolved_dataset[key] = value

    run_fields = {f.name: f for f in dataclasses.fields(tr.RunConfig)}
    run_raw = raw.get("run", {})
    if not isinstance(run_raw, dict):
        raise ValidationError("field run: expected an object")
    for key in run_raw:
        if key not in run_fields:
            raise ValidationError(f"field run.{key}: unknown run option")
    try:
        run_cfg = tr.RunConfig(seed=raw["seed"],
                               **{k: (tuple(v) if k == "ablation_losses" else v)
                                  for k, v in run_raw.items()})
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"field run: {exc}") from exc

    return {
        "label": raw.get("label", "run"),
        "seed": raw["seed"],
        "output_dir": raw.get("output_dir"),
        "dataset": resolved_dataset,
        "run": dataclasses.asdict(run_cfg),
    }


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}")
    return resolve_config(raw)


def build_sequence(resolved: dict) -> ds.TaskSequence:
    params = dict(resolved["dataset"])
    generator = params.pop("generator")
    return ds.make_sequence(generator, **params)


def run_config_from(resolved: dict) -> tr.RunConfig:
    kwargs = dict(resolved["run"])
    kwargs["ablation_losses"] = tuple(kwargs.get("ablation_losses", ()))
    return tr.RunConfig(**kwargs)


def _run_dir(resolved: dict, override=None) -> Path:
    if override:
        return Path(override)
    if resolved.get("output_dir"):
        return Path(resolved["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / resolved["label"]


# ---------------------------------------------------------------------------
# artifact writers


def _loss_breakdown_csv(task_logs) -> str:
    names = sorted({k for log in task_logs for row in log.epoch_losses
                    for k in row if k not in ("task", "epoch")})
    lines = ["task,epoch," + ",".join(names)]
    for log in task_logs:
        for row in log.epoch_losses:
            vals = ",".join(f"{row.get(n, 0.0):.10g}" for n in names)
            lines.append(f"{row['task']},{row['epoch']},{vals}")
    return "\n".join(lines) + "\n"


def _exemplar_dump(pool: MemoryPool, network: Network) -> list:
    dump = []
    for c in pool.m_s.classes():
        for ex in pool.m_s.exemplars_for(c):
            dump.append({
                "class_id": ex.class_id,
                "origin_task": ex.origin_task,
                "latent": ex.latent.tolist(),
                "decoded": ex.decoded.tolist(),
                "embedding": network.encode_np(ex.decoded).tolist(),
                "sigma2": ex.sigma2,
            })
    return dump


def write_run_artifacts(run_dir: Path, resolved: dict, seq, result) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    _dump_json(run_dir / "resolved_config.json", resolved)
    _dump_json(run_dir / "metrics.json", {
        "metrics": result.metrics.to_dict(),
        "accuracy_matrix": result.matrix.rows,
        "memory_footprint": result.pool.footprint(),
        "n_tasks": seq.n_tasks,
        "n_classes": seq.n_classes,
    })
    (run_dir / "accuracy_matrix.csv").write_text(result.matrix.to_csv(),
                                                 encoding="utf-8")
    (run_dir / "loss_breakdown.csv").write_text(
        _loss_breakdown_csv(result.task_logs), encoding="utf-8")
    _dump_json(run_dir / "memory_snapshot.json", result.pool.to_snapshot())
    network = tr.build_network(seq, run_config_from(resolved))
    network.load_state_payload(result.checkpoints[-1])
    _dump_json(run_dir / "exemplars.json", _exemplar_dump(result.pool, network))
    ds.save_sequence(run_dir / "sequence.json", seq)
    for i, payload in enumerate(result.checkpoints, start=1):
        _dump_json(run_dir / "checkpoints" / f"task_{i:02d}.json", payload)
    for i, snap in enumerate(result.memory_snapshots, start=1):
        _dump_json(run_dir / "checkpoints" / f"memory_task_{i:02d}.json", snap)


# ---------------------------------------------------------------------------
# commands


def cmd_run(config_path, output_dir=None, quiet=False) -> int:
    resolved = load_config(config_path)
    seq = build_sequence(resolved)
    cfg = run_config_from(resolved)
    result = tr.run_sequence(seq, cfg)
    run_dir = _run_dir(resolved, output_dir)
    write_run_artifacts(run_dir, resolved, seq, result)
    if not quiet:
        m = result.metrics
        print(f"method={cfg.method} last={m.last_accuracy:.4f} "
              f"avg={m.average_accuracy:.4f} learn={m.learning_accuracy:.4f} "
              f"forget={m.forgetting:.4f} [{result.seconds:.1f}s] -> {run_dir}")
    return 0


def parse_loss_subsets(tokens) -> list:
    subsets = []
    for token in tokens:
        try:
            flags = tuple(sorted({int(p) for p in token.split(",") if p.strip()}))
        except ValueError:
            raise ValidationError(f"--losses: cannot parse {token!r}")
        if not flags:
            raise ValidationError("--losses: empty flag set")
        if set(flags) - set(tr.ABLATION_TERMS):
            raise ValidationError(f"--losses: flags {token!r} outside 1..7")
        subsets.append(flags)
    if not subsets:
        raise ValidationError("--losses: empty flag set")
    return subsets


def cmd_ablate(config_path, loss_tokens, output_dir=None, quiet=False) -> int:
    resolved = load_config(config_path)
    subsets = parse_loss_subsets(loss_tokens)
    seq = build_sequence(resolved)
    rows = []
    for flags in subsets:
        cfg = run_config_from(resolved)
        cfg = dataclasses.replace(cfg, method="protocore-ablation",
                                  ablation_losses=flags)
        result = tr.run_sequence(seq, cfg)
        rows.append(("+".join(map(str, flags)), result.metrics))
    full_cfg = dataclasses.replace(run_config_from(resolved), method="protocore",
                                   ablation_losses=())
    rows.append(("full", tr.run_sequence(seq, full_cfg).metrics))
    lines = ["losses,last_accuracy,forgetting"]
    for name, metrics in rows:
        lines.append(f"{name},{metrics.last_accuracy:.10g},"
                     f"{metrics.forgetting:.10g}")
    csv = "\n".join(lines) + "\n"
    run_dir = _run_dir(resolved, output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "ablation.csv").write_text(csv, encoding="utf-8")
    if not quiet:
        print(csv, end="")
    return 0


# ---------------------------------------------------------------------------
# gradient verification over every loss operation


def _gradcheck_network(seed):
    net = Network(d_in=4, n_classes=4, seed=seed, hidden=6, n_layers=2, d_emb=3)
    # zero-init biases can leave a whole layer dead on tiny nets, which
    # produces zero-norm embeddings that the cosine losses reject
    for b in net.encoder.biases:
        b.data[:] = 0.05
    return net


def _gradcheck_memory(net, rng, classes=(0, 1), sigma2=0.2):
    mem = SynthMemory(1)
    mem.replace([sy.SyntheticExemplar(c, rng.normal(size=4),
                                      rng.normal(size=4), origin_task=1,
                                      sigma2=sigma2)
                 for c in classes])
    return mem


def _loss_instances(name: str, seed: int):
    """Build (loss_fn, params) for one randomized small instance."""
    rng = child_rng(seed, "gradcheck", name)
    net = _gradcheck_network(seed=int(rng.integers(1 << 30)))
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, size=5)
    transforms = pr.TransformSet.default(1.0, extra=2)

    if name == "cur_syn":
        z = [ad.Tensor(rng.normal(size=4), requires_grad=True) for _ in range(2)]
        targets = {c: ad.Tensor(rng.normal(size=3)) for c in (0, 1)}

        def fn():
            embs = {c: [net.encode(net.decode(z[c]))] for c in (0, 1)}
            return sy.loss_cur_syn(embs, targets).tensor

        return fn, z + net.encoder.parameters()
    if name == "pre_syn":
        mem = _gradcheck_memory(net, rng)
        z = [ad.Tensor(rng.normal(size=4), requires_grad=True) for _ in range(2)]

        def fn():
            embs = {c: [net.encode(net.decode(z[c]))] for c in (0, 1)}
            return sy.loss_pre_syn(embs, mem, net).tensor

        return fn, z + net.encoder.parameters()
    if name == "shift":
        pool = MemoryPool.create(0, 1, seed=0)
        pool.m_p.replace({0: rng.normal(size=3), 1: rng.normal(size=3)})
        z = [ad.Tensor(rng.normal(size=4), requires_grad=True) for _ in range(2)]

        def fn():
            embs = {c: [net.encode(net.decode(z[c]))] for c in (0, 1)}
            return sy.loss_shift(embs, pool.m_p).tensor

        return fn, z + net.encoder.parameters()
    if name == "cur_pro":
        variant = "contrastive" if seed % 2 else "prototypical"

        def fn():
            embs = net.encode(x)
            protos = {}
            for c in range(4):
                rows_c = np.where(y == c)[0]
                if len(rows_c):
                    protos[c] = pr.compute_prototype(ad.rows(embs, rows_c)).vector
                else:
                    protos[c] = ad.Tensor(np.full(3, float(c + 1)))
            return pr.loss_cur_pro(embs, y, protos, variant).tensor

        return fn, net.encoder.parameters()
    if name == "pre_pro":
        mem = _gradcheck_memory(net, rng)
        protos = {c: ad.Tensor(rng.normal(size=3)) for c in range(4)}
        variant = "contrastive" if seed % 2 else "prototypical"

        def fn():
            return pr.loss_pre_pro(mem, (x, y), protos, transforms, net,
                                   variant, previous_classes={0, 1},
                                   seed=7).tensor

        return fn, net.encoder.parameters()
    if name == "task_cur":
        def fn():
            return tr.loss_task_cur(x, y, net, allowed_classes=range(4)).tensor

        return fn, net.parameters()
    if name == "task_pre":
        mem = _gradcheck_memory(net, rng)

        def fn():
            return tr.loss_task_pre(mem, net, None, 2, seed=9,
                                    allowed_classes=range(4)).tensor

        return fn, net.parameters()
    if name == "info_nce":
        anchor = ad.Tensor(rng.normal(size=3), requires_grad=True)
        positive = ad.Tensor(rng.normal(size=3), requires_grad=True)
        negatives = [ad.Tensor(rng.normal(size=3), requires_grad=True)
                     for _ in range(3)]

        def fn():
            return pr.info_nce(anchor, positive, negatives, tau=0.5)

        return fn, [anchor, positive] + negatives
    if name == "total_synthesis":
        pool = MemoryPool.create(0, 1, seed=0)
        pool.m_s = _gradcheck_memory(net, rng)
        pool.m_p.replace({0: rng.normal(size=3)})
        z = [ad.Tensor(rng.normal(size=4), requires_grad=True) for _ in range(2)]
        targets = {c: ad.Tensor(rng.normal(size=3)) for c in (0, 1)}

        def fn():
            embs = {c: [net.encode(net.decode(z[c]))] for c in (0, 1)}
            return sy.synthesis_loss(embs, targets, pool.m_s, pool.m_p, net,
                                     sy.SynthConfig()).tensor

        return fn, z + net.encoder.parameters()
    if name == "total_training":
        mem = _gradcheck_memory(net, rng)
        variant = "contrastive" if seed % 2 else "prototypical"

        def fn():
            embs = net.encode(x)
            protos = {}
            for c in range(4):
                rows_c = np.where(y == c)[0]
                if len(rows_c):
                    protos[c] = pr.compute_prototype(ad.rows(embs, rows_c)).vector
                else:
                    protos[c] = ad.Tensor(np.full(3, float(c + 1)))
            parts = {
                "cur_pro": pr.loss_cur_pro(embs, y, protos, variant),
                "pre_pro": pr.loss_pre_pro(mem, (x, y), protos, transforms,
                                           net, variant,
                                           previous_classes={0, 1}, seed=3),
                "task_cur": tr.loss_task_cur(x, y, net, allowed_classes=range(4)),
                "task_pre": tr.loss_task_pre(mem, net, None, 2, seed=4,
                                             allowed_classes=range(4)),
            }
            return tr.total_loss(parts, 0.7, 0.5, 1.3).tensor

        return fn, net.parameters()
    raise ValueError(f"unknown loss name {name!r}")


GRADCHECK_LOSSES = ("cur_syn", "pre_syn", "shift", "cur_pro", "pre_pro",
                    "task_cur", "task_pre", "info_nce", "total_synthesis",
                    "total_training")


def gradcheck_report(instances: int = 3, seed: int = 0) -> dict:
    """Max finite-difference relative error per loss over random instances."""
    report = {}
    for name in GRADCHECK_LOSSES:
        worst = 0.0
        for i in range(instances):
            fn, params = _loss_instances(name, seed * 1000 + i)
            worst = max(worst, ad.finite_diff_check(fn, params))
        report[name] = worst
    return report


def cmd_gradcheck(instances: int = 3, seed: int = 0, quiet=False) -> int:
    report = gradcheck_report(instances=instances, seed=seed)
    status = 0
    for name, err in report.items():
        verdict = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        if not quiet:
            print(f"{name:16s} max_rel_err {err:.3e}  {verdict}")
        if err > GRADCHECK_TOLERANCE:
            status = 2
    return status


# ---------------------------------------------------------------------------
# embedding dump


def cmd_dump_embeddings(run_dir, task_id: int, output_path=None,
                        quiet=False) -> int:
    run_dir = Path(run_dir)
    config_path = run_dir / "resolved_config.json"
    if not config_path.exists():
        raise ValidationError(f"no resolved_config.json under {run_dir}")
    resolved = json.loads(config_path.read_text(encoding="utf-8"))
    ckpt = run_dir / "checkpoints" / f"task_{task_id:02d}.json"
    mem_path = run_dir / "checkpoints" / f"memory_task_{task_id:02d}.json"
    if not ckpt.exists() or not mem_path.exists():
        raise ValidationError(f"no checkpoint for task {task_id} under {run_dir}")
    seq = ds.load_sequence(run_dir / "sequence.json")
    network = tr.build_network(seq, run_config_from(resolved))
    network.load_state_payload(json.loads(ckpt.read_text(encoding="utf-8")))
    pool = MemoryPool.from_snapshot(json.loads(mem_path.read_text(encoding="utf-8")))

    points = []
    for task in seq.tasks[:task_id]:
        emb = network.encode_np(task.test_x)
        for i in range(len(task.test_y)):
            points.append({"kind": "test", "class_id": int(task.test_y[i]),
                           "embedding": emb[i].tolist(),
                           "source_task": task.task_id})
    for c in pool.m_p.classes():
        points.append({"kind": "prototype", "class_id": c,
                       "embedding": pool.m_p.get(c).tolist(),
                       "source_task": None})
    for c in pool.m_s.classes():
        for ex in pool.m_s.exemplars_for(c):
            points.append({"kind": "synthetic", "class_id": c,
                           "embedding": network.encode_np(ex.decoded).tolist(),
                           "source_task": ex.origin_task})
    payload = {"format": "embedding-dump", "version": 1, "task_id": task_id,
               "points": points}
    out = Path(output_path) if output_path else run_dir / f"embeddings_task_{task_id}.json"
    _dump_json(out, payload)
    if not quiet:
        counts = {}
        for p in points:
            counts[p["kind"]] = counts.get(p["kind"], 0) + 1
        print(f"wrote {out} ({counts})")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protocore",
        description="Continual learning with condensed prototypical exemplars.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--output-dir", default=None)

    p_abl = sub.add_parser("ablate", help="run loss-term ablation rows")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--losses", nargs="+", required=True,
                       metavar="FLAGS",
                       help="loss subsets like '1 1,2 1,2,3'; "
                            "1=cur_syn 2=pre_syn 3=shift 4=cur_pro "
                            "5=pre_pro 6=task_cur 7=task_pre "
                            "(the current-task head loss is always active)")
    p_abl.add_argument("--output-dir", default=None)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check every loss")
    p_gc.add_argument("--instances", type=int, default=3)
    p_gc.add_argument("--seed", type=int, default=0)

    p_dump = sub.add_parser("dump-embeddings",
                            help="export embeddings for a task checkpoint")
    p_dump.add_argument("--run", required=True, dest="run_dir")
    p_dump.add_argument("--task", required=True, type=int)
    p_dump.add_argument("--output", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.output_dir)
        if args.command == "ablate":
            return cmd_ablate(args.config, args.losses, args.output_dir)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.instances, args.seed)
        if args.command == "dump-embeddings":
            return cmd_dump_embeddings(args.run_dir, args.task, args.output)
        raise ValidationError(f"unknown command {args.command!r}")
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ad.NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
