"""Command-line experiment runner.

Subcommands: ``solve``, ``fnfit``, ``evaluate``, ``paramcount``, ``report``.
Run directories live under ``$BSPINN_OUTPUT_ROOT`` (default ``./runs``)
unless the config names an ``output`` directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .autodiff import NonFiniteError
from .config import ConfigError, ExperimentConfig, load_config
from .evaluation import (ErrorReport, EvalResult, EvaluationError, channel_fields, evaluate_problem,
                         loss_band, predictor, write_field)
from .network import NetworkSpec, ParamStore, SpecError, load_checkpoint, param_count, save_checkpoint
from .problems import ProblemDef
from .training import RunRecord, run_ensemble

log = logging.getLogger("bspinn")

OUTPUT_ENV = "BSPINN_OUTPUT_ROOT"
DEFAULT_GROUP = 16


class CLIError(Exception):
    pass


def output_root(config: ExperimentConfig) -> Path:
    if config.output:
        return Path(config.output)
    return Path(os.environ.get(OUTPUT_ENV, "runs")) / config.label


def _json(path: Path, data: Any) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _check_reference(config: ExperimentConfig, problem: ProblemDef) -> None:
    if problem.evaluation.kind != "reference":
        return
    if config.reference is None:
        raise CLIError(f"problem {problem.name!r} has no closed-form solution; pass --reference FILE "
                       "(CSV with columns x,t,u on the evaluation grid)")
    if not Path(config.reference).exists():
        raise CLIError(f"--reference file {config.reference} does not exist")


def _eval_kwargs(config: ExperimentConfig) -> dict[str, Any]:
    return dict(reference=config.reference, nodes=config.eval_nodes, points_per_dim=config.eval_points_per_dim,
                eval_interior=config.eval_interior, eval_boundary=config.eval_boundary,
                seed=config.seed, all_fields=config.all_fields)


def _checkpoint_meta(config: ExperimentConfig, problem: ProblemDef, record: RunRecord) -> dict[str, Any]:
    return {"problem": problem.name, "problem_params": problem.params, "best_loss": record.best_loss,
            "lower": list(problem.domain.lower), "upper": list(problem.domain.upper)}


def _value_names(problem: ProblemDef, result: EvalResult) -> list[str]:
    if result.predicted.shape[1] == len(problem.output_names):
        names = list(problem.output_names)
    else:
        names = [problem.output_names[problem.evaluation.field]]
    return [f"{n}_pred" for n in names] + [f"{n}_ref" for n in names]


def _write_channels(path: Path, problem: ProblemDef, store: ParamStore, points: np.ndarray,
                    config: ExperimentConfig) -> Path | None:
    group = None
    if store.spec.kind == "fnn":
        group = config.group_size or DEFAULT_GROUP
        if store.spec.width % group:
            log.warning("channel group size %d does not divide width %d; skipping channels", group, store.spec.width)
            return None
    ch = channel_fields(store, points, group, component=problem.evaluation.field)
    cols = np.column_stack([points, ch.fields.T, np.full(len(points), ch.bias), ch.prediction])
    header = list(problem.domain.names) + [f"channel_{k}" for k in range(ch.n_channels)] + ["bias", "prediction"]
    np.savetxt(path, cols, delimiter=",", header=",".join(header), comments="", fmt="%.10g")
    return path


@dataclass
class ArchSummary:
    spec: NetworkSpec
    records: list[RunRecord]
    errors: list[float]
    report: ErrorReport | None

    def to_dict(self, problem: str, seeds: Sequence[int]) -> dict[str, Any]:
        rep = self.report
        return {
            "problem": problem,
            "arch": self.spec.arch,
            "activation": self.spec.activation,
            "residual_blocks": self.spec.residual_blocks,
            "n_params": param_count(self.spec),
            "seeds": list(seeds),
            "errors": self.errors,
            "best_losses": [r.best_loss for r in self.records],
            "best_epochs": [r.best_epoch for r in self.records],
            "failures": {str(r.seed): r.error for r in self.records if not r.ok},
            "mean": rep.mean if rep else None,
            "std": rep.std if rep else None,
            "best_seed": [r.seed for r in self.records if r.ok][rep.best] if rep else None,
            "best_error": rep.errors[rep.best] if rep else None,
        }


def cmd_solve(config: ExperimentConfig, progress_every: int = 0) -> dict[str, Any]:
    """Train every architecture over ``config.seeds`` seeds and write all artifacts."""
    problem = config.problem_def()
    _check_reference(config, problem)
    specs = config.specs(problem)
    tcfg = config.train_config(problem)
    root = output_root(config)
    root.mkdir(parents=True, exist_ok=True)
    config.write(root / "config.yaml")
    seeds = [tcfg.seed + k for k in range(config.seeds)]
    (root / "seeds.txt").write_text("".join(f"{s}\n" for s in seeds))

    summaries, timing = [], {}
    for spec in specs:
        log.info("%s %s: %d params, %d seed(s)", problem.name, spec.arch, param_count(spec), len(seeds))
        records = run_ensemble(problem, spec, tcfg, n_seeds=config.seeds, workers=config.workers,
                               progress=_progress if progress_every else None, progress_every=progress_every)
        arch_dir = root / spec.tag
        arch_dir.mkdir(exist_ok=True)
        errors, results = [], {}
        for rec in records:
            run_dir = arch_dir / f"seed_{rec.seed}"
            run_dir.mkdir(exist_ok=True)
            info: dict[str, Any] = {"seed": rec.seed, "best_epoch": rec.best_epoch, "best_loss": rec.best_loss,
                                    "error": rec.error, "diagnostics": rec.diagnostics}
            if rec.ok:
                rec.write_history(run_dir / "history.csv", config.history_stride)
                save_checkpoint(run_dir / "best.ckpt", rec.best_params, rec.seed, rec.best_epoch,
                                _checkpoint_meta(config, problem, rec))
                res = evaluate_problem(problem, predictor(rec.best_params), **_eval_kwargs(config))
                results[rec.seed] = res
                info["eval"] = {"error": res.error, **res.extra}
                errors.append(res.error)
            else:
                errors.append(None)
            _json(run_dir / "run.json", info)
            timing[f"{spec.tag}/seed_{rec.seed}"] = rec.duration

        ok = [r for r in records if r.ok]
        if ok:
            band = loss_band(ok)
            np.savetxt(arch_dir / "loss_band.csv", np.column_stack([band.epochs, band.min, band.median, band.max]),
                       delimiter=",", header="epoch,min,median,max", comments="", fmt=["%d"] + ["%.17g"] * 3)
        # failed seeds are excluded from the statistics and listed under "failures"
        report = ErrorReport.from_errors([results[r.seed].error for r in ok]) if ok else None
        summary = ArchSummary(spec, records, errors, report)
        if report is not None:
            best_seed = ok[report.best].seed
            res = results[best_seed]
            if res.points is not None:
                write_field(arch_dir / "field_best.csv", res.points, np.column_stack([res.predicted, res.reference]),
                            problem.domain.names, _value_names(problem, res))
                if config.channels:
                    store = next(r.best_params for r in records if r.seed == best_seed)
                    _write_channels(arch_dir / "channels_best.csv", problem, store, res.points, config)
        d = summary.to_dict(problem.name, seeds)
        _json(arch_dir / "summary.json", d)
        summaries.append(d)
        log.info("%s %s: %s", problem.name, spec.arch, _fmt_row(d))

    result = {"problem": problem.name, "label": config.label, "archs": summaries}
    _json(root / "summary.json", result)
    (root / "report.txt").write_text(format_report(summaries))
    _json(root / "timing.json", timing)  # wall-clock only; excluded from reproducibility checks
    return result


def _progress(record: dict[str, Any]) -> None:
    log.info("epoch %d loss %.6e lr %.3e", record["epoch"], record["loss"], record["lr"])


def checkpoint_problem(header: dict[str, Any], where: Any = "checkpoint") -> dict[str, Any]:
    """Problem name, parameters and domain recorded in a checkpoint header."""
    if "problem" not in header:
        raise CLIError(f"{where} carries no problem name; pass --config or --problem")
    return {"problem": header["problem"], **header.get("problem_params", {}),
            "lower": header.get("lower"), "upper": header.get("upper")}


def cmd_evaluate(checkpoint: str | Path, config: ExperimentConfig | None = None, exact: bool = False,
                 out_dir: str | Path | None = None, channels: bool = False) -> EvalResult:
    """Relative error of a saved checkpoint under the problem's evaluation convention."""
    store, header = load_checkpoint(checkpoint)
    if config is None:
        config = load_config(None, **checkpoint_problem(header, checkpoint))
    problem = config.problem_def()
    spec = store.spec
    if (spec.input_dim, spec.output_dim) != (problem.input_dim, problem.output_dim):
        raise CLIError(f"checkpoint network maps {spec.input_dim}->{spec.output_dim} but problem "
                       f"{problem.name!r} needs {problem.input_dim}->{problem.output_dim}")
    if exact:
        if problem.exact is None:
            raise CLIError(f"problem {problem.name!r} has no closed-form solution to inject")
        predict = problem.exact_numpy
    else:
        _check_reference(config, problem)
        predict = predictor(store)
    res = evaluate_problem(problem, predict, **_eval_kwargs(config))
    if out_dir is not None and res.points is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_field(out / "field.csv", res.points, np.column_stack([res.predicted, res.reference]),
                    problem.domain.names, _value_names(problem, res))
        if channels and not exact:
            _write_channels(out / "channels.csv", problem, store, res.points, config)
    return res


def cmd_paramcount(arch: str, input_dim: int, output_dim: int) -> int:
    return param_count(NetworkSpec.from_arch(arch, input_dim, output_dim))


# -- report -------------------------------------------------------------------

def _fmt_row(d: dict[str, Any]) -> str:
    if d.get("mean") is None:
        return "all runs failed"
    return f"{d['mean']:.3e} ± {d['std']:.3e} (best {d['best_error']:.3e}, seed {d['best_seed']})"


def format_report(rows: Sequence[dict[str, Any]]) -> str:
    head = ("problem", "architecture", "params", "mean ± std", "best error", "failed")
    body = []
    for d in rows:
        ms = "n/a" if d.get("mean") is None else f"{d['mean']:.4e} ± {d['std']:.4e}"
        best = "n/a" if d.get("best_error") is None else f"{d['best_error']:.4e}"
        body.append((d["problem"], d["arch"], str(d["n_params"]), ms, best,
                     f"{len(d['failures'])}/{len(d['seeds'])}"))
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), "-+-".join("-" * w for w in widths)] + [fmt.format(*r) for r in body]
    lines = [ln.rstrip() for ln in lines]
    return "\n".join(lines) + "\n"


def cmd_report(paths: Sequence[str | Path]) -> list[dict[str, Any]]:
    rows = []
    for p in paths:
        p = Path(p)
        files = [p] if p.is_file() else sorted(p.rglob("summary.json"))
        for f in files:
            data = json.loads(f.read_text())
            if "archs" in data:
                rows.extend(data["archs"])
            elif "arch" in data and data not in rows:
                rows.append(data)
    unique = {(r["problem"], r["arch"], tuple(r["seeds"]), json.dumps(r["errors"])): r for r in rows}
    return list(unique.values())


# -- argument parsing ---------------------------------------------------------

def _solve_args(p: argparse.ArgumentParser, fixed_problem: str | None = None) -> None:
    p.add_argument("--config", help="YAML config file; flags override its values")
    if fixed_problem is None:
        p.add_argument("--problem", help="fnfit | burgers1d | euler2d | helmholtz2d | helmholtz3d | poisson10d")
    p.add_argument("--arch", action="append", help="fnn:<layers>*<width> or bsnn:<B>-<b>; repeatable")
    p.add_argument("--activation", choices=["tanh", "sin", "sigmoid"])
    p.add_argument("--residual-blocks", type=int)
    p.add_argument("--seeds", type=int, help="number of seeds (default 10)")
    p.add_argument("--seed", type=int, help="master seed; run k uses seed + k")
    p.add_argument("--workers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--scheduler", choices=["plateau", "exponential", "constant"])
    p.add_argument("--patience", type=int)
    p.add_argument("--interior", type=int)
    p.add_argument("--boundary", type=int, help="boundary points per face")
    p.add_argument("--initial", type=int)
    p.add_argument("--lambda-b", type=float)
    p.add_argument("--lambda-i", type=float)
    p.add_argument("--interior-sampler", choices=["uniform", "lhs"])
    p.add_argument("--kappa", type=float)
    p.add_argument("--extent", type=float)
    p.add_argument("--d", type=int, help="poisson10d dimension")
    p.add_argument("--c", type=float, help="poisson10d frequency")
    p.add_argument("--lower", type=float, nargs="+")
    p.add_argument("--upper", type=float, nargs="+")
    p.add_argument("--name", help="run label (directory name under the output root)")
    p.add_argument("--output", help="run directory (overrides the output root)")
    p.add_argument("--reference", help="reference solution CSV (required for burgers1d)")
    p.add_argument("--channels", action="store_true", default=None, help="write channel fields for the best seed")
    p.add_argument("--group-size", type=int)
    p.add_argument("--eval-nodes", type=int, nargs="+")
    p.add_argument("--eval-points-per-dim", type=int)
    p.add_argument("--eval-interior", type=int)
    p.add_argument("--eval-boundary", type=int)
    p.add_argument("--all-fields", action="store_true", default=None)
    p.add_argument("--history-stride", type=int)
    p.add_argument("--compile", action="store_true", default=None, help="compile the loss with torch.compile")
    p.add_argument("--progress-every", type=int, default=0, help="log training progress every N epochs")


_NON_CONFIG = {"config", "command", "progress_every", "verbose", "func", "checkpoint", "exact", "out", "paths",
               "format"}


def _config_from_args(args: argparse.Namespace, **fixed) -> ExperimentConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    overrides.update(fixed)
    return load_config(getattr(args, "config", None), **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bspinn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="train an ensemble and evaluate it")
    _solve_args(solve)
    fnfit = sub.add_parser("fnfit", help="solve on the discontinuous function-fitting target")
    _solve_args(fnfit, fixed_problem="fnfit")

    ev = sub.add_parser("evaluate", help="evaluate a saved checkpoint")
    ev.add_argument("checkpoint")
    _solve_args(ev)
    ev.add_argument("--exact", action="store_true", help="debug: evaluate the exact solution instead of the network")
    ev.add_argument("--out", help="directory for field.csv (and channels.csv with --channels)")

    pc = sub.add_parser("paramcount", help="print the trainable parameter count")
    pc.add_argument("arch")
    pc.add_argument("input_dim", type=int)
    pc.add_argument("output_dim", type=int)

    rep = sub.add_parser("report", help="aggregate summary.json files into one table")
    rep.add_argument("paths", nargs="+")
    rep.add_argument("--out", help="write the table here as well as to stdout")
    rep.add_argument("--format", choices=["text", "json"], default="text")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "paramcount":
            print(cmd_paramcount(args.arch, args.input_dim, args.output_dim))
            return 0
        if args.command in ("solve", "fnfit"):
            fixed = {"problem": "fnfit"} if args.command == "fnfit" else {}
            config = _config_from_args(args, **fixed)
            result = cmd_solve(config, progress_every=args.progress_every)
            print(format_report(result["archs"]), end="")
            print(f"run directory: {output_root(config)}")
            return 0 if any(a["mean"] is not None for a in result["archs"]) else 3
        if args.command == "evaluate":
            if args.config or args.problem:
                config = _config_from_args(args)
            else:
                _, header = load_checkpoint(args.checkpoint)
                base = checkpoint_problem(header, args.checkpoint)
                flags = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG and v is not None}
                config = load_config(None, **{**base, **flags})
            res = cmd_evaluate(args.checkpoint, config, exact=args.exact, out_dir=args.out,
                               channels=bool(args.channels))
            print(json.dumps({"problem": res.problem, "kind": res.kind, "error": res.error, **res.extra}))
            return 0
        if args.command == "report":
            rows = cmd_report(args.paths)
            text = json.dumps(rows, indent=2) + "\n" if args.format == "json" else format_report(rows)
            print(text, end="")
            if args.out:
                Path(args.out).write_text(text)
            return 0
    except (ConfigError, SpecError, CLIError, EvaluationError, FileNotFoundError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
