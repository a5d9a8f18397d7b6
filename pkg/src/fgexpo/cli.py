"""Command-line experiment runner.

Exit statuses: 0 success, 2 usage error, 3 missing input file, 4 invalid
config or input document, 5 output directory not empty, 6 internal
invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .core import ConfigError, TrainConfig, config_to_dict, load_config, seeded_rng
from .evaluation import DEFAULT_EVAL_TEMPERATURE, EvalReport, evaluate, exploration_gap
from .gcs import read_trace, summarize_trace, write_trace
from .testbed import bank_from_dict, bank_to_dict, generate_bank, params_from_dict, params_to_dict
from .trainer import ABLATION_ARMS, InvariantError, RunResult, arm_config, train

log = logging.getLogger("fgexpo")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVALID = 4
EXIT_OUTPUT_EXISTS = 5
EXIT_INVARIANT = 6

COMMANDS = ("gen-bank", "train", "eval", "ablate", "trace-curriculum", "compare")
COMPARE_METHODS = ABLATION_ARMS


class CommandError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


@dataclass
class ExperimentManifest:
    command: str
    out: Path
    config: Optional[Path] = None
    bank: Optional[Path] = None
    params: Optional[Path] = None
    trace: Optional[Path] = None
    seed: Optional[int] = None
    seeds: Optional[tuple[int, int]] = None
    k: int = 8
    temperature: float = DEFAULT_EVAL_TEMPERATURE
    jobs: int = 1
    bank_spec: dict = field(default_factory=dict)


def _meta(cfg: Optional[TrainConfig], **extra) -> dict:
    meta = {"version": __version__, "config": config_to_dict(cfg) if cfg is not None else None}
    meta.update(extra)
    return meta


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _write_csv(path: Path, header, rows, meta: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {_dumps(meta)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _prepare_out(out: Path) -> None:
    if out.exists():
        if not out.is_dir() or any(out.iterdir()):
            raise CommandError(EXIT_OUTPUT_EXISTS, f"output directory {out} exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)


def _require(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise CommandError(EXIT_USAGE, f"--{what} is required for this command")
    if not path.is_file():
        raise CommandError(EXIT_MISSING, f"{what} file not found: {path}")
    return path


def _load_cfg(m: ExperimentManifest) -> TrainConfig:
    cfg = load_config(_require(m.config, "config")) if m.config is not None else TrainConfig()
    if m.seed is not None:
        cfg = cfg.replace(seed=m.seed)
    return cfg


def _load_json(path: Path, what: str):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CommandError(EXIT_INVALID, f"{what} {path} is not valid JSON: {exc}") from None


def _load_bank(m: ExperimentManifest):
    data = _load_json(_require(m.bank, "bank"), "bank")
    try:
        bank, init = bank_from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise CommandError(EXIT_INVALID, f"bad bank document {m.bank}: {exc}") from None
    if init is None:
        raise CommandError(EXIT_INVALID, f"bank {m.bank} carries no init_policy")
    return bank, init


def write_run(out: Path, result: RunResult) -> None:
    """metrics.jsonl, curriculum.csv and final_params.json for one run."""
    meta = _meta(result.config)
    with open(out / "metrics.jsonl", "w") as fh:
        fh.write(_dumps({"kind": "meta", **meta}) + "\n")
        for rec in result.steps:
            fh.write(_dumps({"kind": "step", **rec.to_dict()}) + "\n")
    write_trace(out / "curriculum.csv", result.trace, header_comment=_dumps(meta))
    _write_json(out / "final_params.json", {"meta": meta, "policy": params_to_dict(result.params)})


def write_report(out: Path, report: EvalReport, cfg: Optional[TrainConfig]) -> None:
    meta = _meta(cfg)
    _write_json(out / "report.json", {"meta": meta, **report.to_dict()})
    rows = [[q, repr(p1), repr(pk)] for q, p1, pk in zip(report.question_ids, report.pass1.tolist(), report.passk.tolist())]
    _write_csv(out / "report.csv", ["question_id", "pass1", "passk"], rows, meta)


def _eval_run(result: RunResult, bank, m: ExperimentManifest) -> EvalReport:
    return evaluate(result.params, bank, m.k, m.temperature, seeded_rng(result.config.seed, "eval"))


def _summary_row(arm: str, seed, result: RunResult, report: EvalReport) -> list:
    steps = result.steps
    return [
        arm,
        seed,
        repr(report.mean_pass1),
        repr(report.mean_passk),
        repr(exploration_gap(report)),
        repr(sum(s.batch_accuracy for s in steps) / len(steps)),
        repr(sum(s.beta_eff for s in steps) / len(steps)),
    ]


SUMMARY_HEADER = ["method", "seed", "mean_pass1", "mean_passk", "exploration_gap", "mean_train_accuracy", "mean_beta_eff"]


def cmd_gen_bank(m: ExperimentManifest) -> None:
    spec = {"n": 300, "F": 16, "L": 3, "V": 4, "difficulty_spread": 0.5, "seed": 0}
    spec.update({k: v for k, v in m.bank_spec.items() if v is not None})
    if m.seed is not None:
        spec["seed"] = m.seed
    try:
        bank, init = generate_bank(
            spec["n"], spec["F"], spec["L"], spec["V"], spec["difficulty_spread"], seeded_rng(spec["seed"], "bank")
        )
    except ValueError as exc:
        raise CommandError(EXIT_INVALID, str(exc)) from None
    _prepare_out(m.out)
    _write_json(m.out / "bank.json", {"meta": _meta(None, generator=spec), **bank_to_dict(bank, init)})


def cmd_train(m: ExperimentManifest) -> None:
    cfg = _load_cfg(m)
    bank, init = _load_bank(m)
    _prepare_out(m.out)
    write_run(m.out, train(cfg, bank, init))


def cmd_eval(m: ExperimentManifest) -> None:
    cfg = _load_cfg(m) if m.config is not None else None
    bank, _ = _load_bank(m)
    data = _load_json(_require(m.params, "params"), "params")
    try:
        params = params_from_dict(data.get("policy", data))
    except (KeyError, TypeError, ValueError) as exc:
        raise CommandError(EXIT_INVALID, f"bad params document {m.params}: {exc}") from None
    seed = m.seed if m.seed is not None else (cfg.seed if cfg is not None else 0)
    _prepare_out(m.out)
    report = evaluate(params, bank, m.k, m.temperature, seeded_rng(seed, "eval"))
    write_report(m.out, report, cfg)


def cmd_ablate(m: ExperimentManifest) -> None:
    cfg = _load_cfg(m)
    bank, init = _load_bank(m)
    _prepare_out(m.out)
    rows = []
    for arm in ABLATION_ARMS:
        sub = m.out / arm
        sub.mkdir()
        result = train(arm_config(cfg, arm), bank, init)
        write_run(sub, result)
        report = _eval_run(result, bank, m)
        write_report(sub, report, result.config)
        rows.append(_summary_row(arm, cfg.seed, result, report))
    _write_csv(m.out / "summary.csv", SUMMARY_HEADER, rows, _meta(cfg, k=m.k, temperature=m.temperature))


def _compare_seed(args) -> list[list]:
    cfg, bank, init, m, seed = args
    rows = []
    for arm in COMPARE_METHODS:
        result = train(arm_config(cfg.replace(seed=seed), arm), bank, init)
        rows.append(_summary_row(arm, seed, result, _eval_run(result, bank, m)))
    return rows


def compare_rows(cfg, bank, init, m: ExperimentManifest) -> list[list]:
    lo, hi = m.seeds
    seeds = list(range(lo, hi + 1))
    jobs = [(cfg, bank, init, m, s) for s in seeds]
    if m.jobs > 1:
        with ProcessPoolExecutor(max_workers=m.jobs) as pool:
            per_seed = list(pool.map(_compare_seed, jobs))
    else:
        per_seed = [_compare_seed(j) for j in jobs]
    rows = [r for seed_rows in per_seed for r in seed_rows]
    rows.sort(key=lambda r: (COMPARE_METHODS.index(r[0]), r[1]))
    for method in COMPARE_METHODS:
        mine = [r for r in rows if r[0] == method]
        rows.append(
            [method, "median"] + [repr(statistics.median(float(r[c]) for r in mine)) for c in range(2, len(SUMMARY_HEADER))]
        )
    return rows


def direction_summary(rows: list[list]) -> dict:
    """Median margins of the full method over the GRPO baseline."""
    med = {r[0]: r for r in rows if r[1] == "median"}
    full, base = med["full"], med["grpo"]
    col = {name: i for i, name in enumerate(SUMMARY_HEADER)}
    d1 = float(full[col["mean_pass1"]]) - float(base[col["mean_pass1"]])
    dk = float(full[col["mean_passk"]]) - float(base[col["mean_passk"]])
    dg = float(full[col["exploration_gap"]]) - float(base[col["exploration_gap"]])
    return {
        "pass1_margin": d1,
        "passk_margin": dk,
        "gap_margin": dg,
        "full_gap_ge_grpo": dg >= 0,
        "full_passk_ge_grpo": dk >= 0,
        "passk_margin_exceeds_pass1_margin": dk > d1,
    }


def cmd_compare(m: ExperimentManifest) -> None:
    if m.seeds is None:
        raise CommandError(EXIT_USAGE, "--seeds N..M is required for compare")
    cfg = _load_cfg(m)
    bank, init = _load_bank(m)
    _prepare_out(m.out)
    rows = compare_rows(cfg, bank, init, m)
    meta = _meta(cfg, k=m.k, temperature=m.temperature, seeds=list(m.seeds))
    _write_csv(m.out / "compare.csv", SUMMARY_HEADER, rows, meta)
    _write_json(m.out / "direction.json", {"meta": meta, **direction_summary(rows)})


def cmd_trace_curriculum(m: ExperimentManifest) -> None:
    path = _require(m.trace, "trace")
    try:
        rows = read_trace(path)
    except (KeyError, ValueError) as exc:
        raise CommandError(EXIT_INVALID, f"bad trace {path}: {exc}") from None
    with open(path) as fh:
        first = fh.readline()
    meta = json.loads(first[2:]) if first.startswith("# ") else _meta(None)
    _prepare_out(m.out)
    summary = summarize_trace(rows)
    header = list(summary[0]) if summary else ["step"]
    _write_csv(
        m.out / "curriculum_summary.csv",
        header,
        [[s[h] if isinstance(s[h], int) else repr(s[h]) for h in header] for s in summary],
        meta,
    )


HANDLERS = {
    "gen-bank": cmd_gen_bank,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "trace-curriculum": cmd_trace_curriculum,
    "compare": cmd_compare,
}


def run_command(m: ExperimentManifest) -> int:
    try:
        HANDLERS[m.command](m)
    except CommandError as exc:
        log.error("%s", exc)
        return exc.status
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except InvariantError as exc:
        log.error("invariant violated: %s", exc)
        return EXIT_INVARIANT
    return EXIT_OK


def _seed_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition("..")
    try:
        bounds = (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N..M, got {text!r}") from None
    if bounds[1] < bounds[0]:
        raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
    return bounds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fgexpo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--out", type=Path, required=True, help="output directory (must be absent or empty)")
    p.add_argument("--config", type=Path, help="TrainConfig JSON file")
    p.add_argument("--bank", type=Path, help="question bank JSON")
    p.add_argument("--params", type=Path, help="policy params JSON (eval)")
    p.add_argument("--trace", type=Path, help="curriculum.csv to summarise (trace-curriculum)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--seeds", type=_seed_range, help="inclusive seed range N..M (compare)")
    p.add_argument("--k", type=int, default=8, help="samples per question for evaluation")
    p.add_argument("--temperature", type=float, default=DEFAULT_EVAL_TEMPERATURE, help="evaluation temperature")
    p.add_argument("--jobs", type=int, default=1, help="parallel seeds for compare")
    g = p.add_argument_group("gen-bank")
    g.add_argument("--n", type=int)
    g.add_argument("--features", type=int, dest="F")
    g.add_argument("--length", type=int, dest="L")
    g.add_argument("--vocab", type=int, dest="V")
    g.add_argument("--spread", type=float, dest="difficulty_spread")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.k < 1 or args.jobs < 1:
        log.error("--k and --jobs must be positive")
        return EXIT_USAGE
    m = ExperimentManifest(
        command=args.command,
        out=args.out,
        config=args.config,
        bank=args.bank,
        params=args.params,
        trace=args.trace,
        seed=args.seed,
        seeds=args.seeds,
        k=args.k,
        temperature=args.temperature,
        jobs=args.jobs,
        bank_spec={k: getattr(args, k) for k in ("n", "F", "L", "V", "difficulty_spread")},
    )
    return run_command(m)


if __name__ == "__main__":
    sys.exit(main())
