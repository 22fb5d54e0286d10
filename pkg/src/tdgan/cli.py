"""Scenario files, experiment orchestration, and CSV output.

Scenario grammar (line oriented, ``#`` starts a comment)::

    [scenario]
    vocab_size = 4
    data_dim = 1
    seed = 0
    lambda = 1.0            # also: noise_dim, lr, g_lr, d_lr, beta1, beta2, m, n,
                            # d_iters, g_hidden, d_hidden, lr_decay, nonsaturating, name
    [label 0]
    component = 1.0; mu = -3; var = 0.25     # repeat for a mixture

    [task 1]
    iterations = 3000
    center = A; n = 64; labels = 0:32,1:32   # repeat per center
    lambda = 0.5                              # optional per-task override

Tasks are numbered 1, 2, ... in order.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import re
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import CenterDataset, Component, CondGaussianMixture
from .errors import ConfigError, TdganError
from .evalharness import METHODS, MetricRow, run_method, sort_rows
from .federation import Scenario, TaskSpec
from .gancore import GanHyper

CSV_HEADER = ("method", "seed", "task", "label", "metric", "value")
SHIPPED = ("two_task_disjoint", "two_task_multicenter", "three_task_hetero")

# scenario key -> (GanHyper field, parser)
_INT = int
_FLOAT = float


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


HYPER_KEYS = {
    "lambda": ("lam", _FLOAT),
    "m": ("m", _INT),
    "n": ("n", _INT),
    "d_iters": ("d_iters", _INT),
    "noise_dim": ("noise_dim", _INT),
    "g_hidden": ("g_hidden", _ints),
    "d_hidden": ("d_hidden", _ints),
    "g_lr": ("g_lr", _FLOAT),
    "d_lr": ("d_lr", _FLOAT),
    "beta1": ("beta1", _FLOAT),
    "beta2": ("beta2", _FLOAT),
    "lr_decay": ("lr_decay", _bool),
    "nonsaturating": ("nonsaturating", _bool),
}


class ScenarioError(ConfigError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line, self.key = line, key
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


_SECTION = re.compile(r"^\[\s*(scenario|label|task)(?:\s+(\d+))?\s*\]$")


def _split_pairs(text: str, lineno: int) -> dict[str, str]:
    out = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        if "=" not in part:
            raise ScenarioError(f"expected 'key = value' in {part.strip()!r}", lineno)
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _head_and_pairs(value: str, lineno: int) -> tuple[str, dict[str, str]]:
    """Split ``"A; n = 64; labels = ..."`` into ``"A"`` and the trailing key/value pairs."""
    head, _, rest = value.partition(";")
    return head.strip(), _split_pairs(rest, lineno)


def _parse_hyper_value(key: str, value: str, lineno: int, target: dict) -> None:
    if key == "lr":
        target["g_lr"] = target["d_lr"] = _convert(key, value, _FLOAT, lineno)
        return
    name, conv = HYPER_KEYS[key]
    target[name] = _convert(key, value, conv, lineno)


def _convert(key, value, conv, lineno):
    try:
        return conv(value)
    except ValueError:
        raise ScenarioError(f"bad value for {key!r}: {value!r}", lineno, key) from None


def parse_scenario(text: str, name: str = "") -> Scenario:
    """Parse and validate a scenario file."""
    top: dict[str, str] = {}
    hyper_kw: dict = {}
    labels: dict[int, list[tuple[int, dict[str, str]]]] = {}
    tasks: list[dict] = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            match = _SECTION.match(line)
            if not match:
                raise ScenarioError(f"unrecognized section header {line!r}", lineno)
            kind, num = match.group(1), match.group(2)
            if kind == "scenario":
                if num is not None:
                    raise ScenarioError("[scenario] takes no number", lineno)
                section = ("scenario", None)
            elif num is None:
                raise ScenarioError(f"[{kind}] needs a number", lineno)
            elif kind == "label":
                section = ("label", int(num))
                if int(num) in labels:
                    raise ScenarioError(f"label {num} defined twice", lineno, f"label {num}")
                labels[int(num)] = []
            else:
                if int(num) != len(tasks) + 1:
                    raise ScenarioError(f"expected [task {len(tasks) + 1}], got [task {num}]", lineno, f"task {num}")
                section = ("task", int(num))
                tasks.append({"iterations": None, "centers": [], "overrides": {}, "line": lineno})
            continue
        if "=" not in line:
            raise ScenarioError(f"expected 'key = value', got {line!r}", lineno)
        if section is None:
            raise ScenarioError("key outside of any section", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        kind, num = section
        if kind == "scenario":
            if key in ("vocab_size", "data_dim", "seed", "name"):
                top[key] = value
            elif key in HYPER_KEYS or key == "lr":
                _parse_hyper_value(key, value, lineno, hyper_kw)
            else:
                raise ScenarioError(f"unknown key {key!r} in [scenario]", lineno, key)
        elif kind == "label":
            if key != "component":
                raise ScenarioError(f"unknown key {key!r} in [label {num}]", lineno, key)
            head, rest = _head_and_pairs(value, lineno)
            labels[num].append((lineno, head, rest))
        else:
            task = tasks[-1]
            if key == "iterations":
                task["iterations"] = _convert(key, value, _INT, lineno)
            elif key == "center":
                head, rest = _head_and_pairs(value, lineno)
                task["centers"].append((lineno, head, rest))
            elif key in HYPER_KEYS or key == "lr":
                _parse_hyper_value(key, value, lineno, task["overrides"])
            else:
                raise ScenarioError(f"unknown key {key!r} in [task {num}]", lineno, key)

    for key in ("vocab_size", "data_dim"):
        if key not in top:
            raise ScenarioError(f"[scenario] is missing {key!r}", key=key)
    vocab = _convert("vocab_size", top["vocab_size"], _INT, None)
    dim = _convert("data_dim", top["data_dim"], _INT, None)
    seed = _convert("seed", top.get("seed", "0"), _INT, None)
    if vocab < 1 or dim < 1:
        raise ScenarioError("vocab_size and data_dim must be positive", key="vocab_size")

    comps: dict[int, tuple[Component, ...]] = {}
    for y, entries in sorted(labels.items()):
        if not 0 <= y < vocab:
            raise ScenarioError(f"label {y} outside vocabulary of size {vocab}", key=f"label {y}")
        if not entries:
            raise ScenarioError(f"[label {y}] has no components", key=f"label {y}")
        built = []
        for lineno, head, kv in entries:
            missing = {"mu", "var"} - set(kv)
            if missing:
                raise ScenarioError(f"component needs {sorted(missing)}", lineno, "component")
            weight = _convert("component", head, _FLOAT, lineno)
            mu = np.array([_convert("mu", v, _FLOAT, lineno) for v in kv["mu"].split(",")])
            var = np.array([_convert("var", v, _FLOAT, lineno) for v in kv["var"].split(",")])
            if mu.size != dim or var.size != dim:
                raise ScenarioError(f"mu and var need {dim} values", lineno, "mu" if mu.size != dim else "var")
            if not (var > 0).all():
                raise ScenarioError("variances must be positive", lineno, "var")
            if weight < 0:
                raise ScenarioError("component weight must be nonnegative", lineno, "component")
            built.append(Component(weight, mu, var))
        total = sum(c.weight for c in built)
        if abs(total - 1.0) > 1e-12:
            raise ScenarioError(f"[label {y}]: weights must sum to 1 (got {total:.12g})", key="component")
        comps[y] = tuple(built)
    truth = CondGaussianMixture(dim, vocab, comps)

    try:
        hyper = GanHyper(**hyper_kw)
    except ConfigError as exc:
        raise ScenarioError(str(exc), key="scenario") from None

    if not tasks:
        raise ScenarioError("scenario defines no [task] sections", key="task")
    task_specs = []
    for i, task in enumerate(tasks, start=1):
        if task["iterations"] is None:
            raise ScenarioError(f"[task {i}] is missing 'iterations'", task["line"], "iterations")
        if task["iterations"] < 0:
            raise ScenarioError("iterations must be nonnegative", task["line"], "iterations")
        if not task["centers"]:
            raise ScenarioError(f"[task {i}] has no centers", task["line"], "center")
        centers = []
        for lineno, cid, kv in task["centers"]:
            if not cid:
                raise ScenarioError("center needs a name", lineno, "center")
            if "labels" not in kv or "n" not in kv:
                raise ScenarioError("center needs 'n' and 'labels'", lineno, "center")
            n = _convert("n", kv["n"], _INT, lineno)
            counts: dict[int, int] = {}
            for item in kv["labels"].split(","):
                if ":" not in item:
                    raise ScenarioError(f"expected label:count, got {item.strip()!r}", lineno, "labels")
                y, c = item.split(":", 1)
                y, c = _convert("labels", y, _INT, lineno), _convert("labels", c, _INT, lineno)
                if y not in comps:
                    raise ScenarioError(f"label {y} has no [label] section", lineno, "labels")
                if c < 0:
                    raise ScenarioError("label counts must be nonnegative", lineno, "labels")
                counts[y] = counts.get(y, 0) + c
            if n <= 0:
                raise ScenarioError("center size must be positive", lineno, "n")
            if sum(counts.values()) != n:
                raise ScenarioError(f"label counts sum to {sum(counts.values())}, not n = {n}", lineno, "n")
            centers.append(CenterDataset(cid, dict(sorted(counts.items())), truth))
        try:
            overrides = dict(task["overrides"])
            replace(hyper, **overrides)
            task_specs.append(TaskSpec(tuple(centers), task["iterations"], overrides))
        except ConfigError as exc:
            raise ScenarioError(str(exc), task["line"], f"task {i}") from None

    return Scenario(vocab, dim, truth, tuple(task_specs), hyper, seed, top.get("name", name))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_scenario(s: Scenario) -> str:
    """Serialize a scenario back to the file grammar (inverse of :func:`parse_scenario`)."""
    inverse = {field: key for key, (field, _) in HYPER_KEYS.items()}
    out = ["[scenario]"]
    if s.name:
        out.append(f"name = {s.name}")
    out += [f"vocab_size = {s.vocab_size}", f"data_dim = {s.data_dim}", f"seed = {s.seed}"]
    for f in fields(GanHyper):
        out.append(f"{inverse[f.name]} = {_fmt(getattr(s.hyper, f.name))}")
    for y, comps in sorted(s.truth.components.items()):
        out += ["", f"[label {y}]"]
        for c in comps:
            out.append(f"component = {c.weight!r}; mu = {_fmt(tuple(float(v) for v in c.mean))}; "
                       f"var = {_fmt(tuple(float(v) for v in c.var))}")
    for i, task in enumerate(s.tasks, start=1):
        out += ["", f"[task {i}]", f"iterations = {task.iterations}"]
        for key, v in task.overrides.items():
            out.append(f"{inverse[key]} = {_fmt(v)}")
        for c in task.centers:
            lab = ",".join(f"{y}:{n}" for y, n in sorted(c.label_counts.items()))
            out.append(f"center = {c.center_id}; n = {c.n}; labels = {lab}")
    return "\n".join(out) + "\n"


def load_scenario(path_or_name: str) -> Scenario:
    """Load a scenario from a path, or by name from the shipped fixtures."""
    path = Path(path_or_name)
    if path.exists():
        return parse_scenario(path.read_text(), path.stem)
    name = path_or_name[:-4] if path_or_name.endswith(".scn") else path_or_name
    if name in SHIPPED:
        text = resources.files("tdgan.scenarios").joinpath(f"{name}.scn").read_text()
        return parse_scenario(text, name)
    raise FileNotFoundError(f"no scenario file or shipped scenario named {path_or_name!r}")


# ---------------------------------------------------------------------------
# running


@dataclass(frozen=True)
class RunConfig:
    scenario_path: str
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    out_path: str
    iters_scale: float = 1.0
    threads: int = 1

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.iters_scale > 0:
            raise ConfigError("--iters-scale must be positive")
        if self.threads < 1:
            raise ConfigError("thread count must be at least 1")


def _job(args):
    scenario, method, seed, scale = args
    return run_method(scenario, method, seed, scale)


def collect_rows(scenario: Scenario, methods: Sequence[str], seeds: Sequence[int],
                 iters_scale: float = 1.0, threads: int = 1) -> list[MetricRow]:
    """Run every (method, seed) pair, fanning out over ``threads`` worker processes."""
    jobs = [(scenario, m, s, iters_scale) for m in methods for s in seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    return sort_rows(row for rows in results for row in rows)


def rows_to_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in sort_rows(rows):
        writer.writerow((r.method, r.seed, r.task, r.label, r.metric, f"{r.value:.9g}"))
    return buf.getvalue()


def thread_cap() -> int | None:
    raw = os.environ.get("TDGAN_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"TDGAN_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError("TDGAN_THREADS must be at least 1")
    return cap


def run(cfg: RunConfig) -> int:
    """Execute a run config and write its CSV atomically; returns a process exit code."""
    out = Path(cfg.out_path)
    tmp = None
    try:
        scenario = load_scenario(cfg.scenario_path)
        cap = thread_cap()
        threads = min(cfg.threads, cap) if cap else cfg.threads
        rows = collect_rows(scenario, cfg.methods, cfg.seeds, cfg.iters_scale, threads)
        out.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=f".{out.name}.", suffix=".part")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(rows_to_csv(rows))
        os.replace(tmp, out)
        tmp = None
        return 0
    except (TdganError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if tmp is not None and os.path.exists(tmp):
            os.remove(tmp)


def _verify(which: str) -> int:
    from .evalharness import lemma1_check, lemma2_check

    checks = {"lemma1": lemma1_check, "lemma2": lemma2_check}
    names = list(checks) if which == "all" else [which]
    ok = True
    print(f"{'check':<8} {'value':>12} {'threshold':>10}  result")
    for name in names:
        value, threshold = checks[name]()
        passed = value <= threshold
        ok &= passed
        print(f"{name:<8} {value:>12.6g} {threshold:>10.3g}  {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def _list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdgan", description="Train a conditional generator against temporary discriminators.")
    p.add_argument("--scenario", help="scenario file, or the name of a shipped scenario")
    p.add_argument("--methods", default="tdgan", help="comma list from: " + ",".join(METHODS))
    p.add_argument("--seeds", default="1", help="comma list of integer seeds")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--iters-scale", type=float, default=1.0, help="multiplier on every task's iteration count")
    p.add_argument("--threads", type=int, default=1, help="worker processes (capped by TDGAN_THREADS)")
    p.add_argument("--verify", choices=("lemma1", "lemma2", "all"), help="run the numerical verification suites")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verify:
        return _verify(args.verify)
    if not args.scenario or not args.out:
        parser.error("--scenario and --out are required unless --verify is given")
    try:
        seeds = tuple(int(s) for s in _list(args.seeds))
        cfg = RunConfig(args.scenario, tuple(_list(args.methods)), seeds, args.out, args.iters_scale, args.threads)
    except (ValueError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
