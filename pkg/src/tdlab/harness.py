"""Deterministic multi-run experiments and their CSV traces."""

from __future__ import annotations

import copy
import csv
import difflib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tdlab.algos import ALGORITHMS, CtdParams, StepSchedule, run_estimator
from tdlab.bounds import check_td_admissible, theorem3_constants
from tdlab.chain import MarkovRewardProcess, load_mrp, random_mrp
from tdlab.errors import (
    InadmissibleStepSize,
    InvalidSpec,
    NonFiniteIterate,
    RankDeficientAfterRetries,
    RankDeficientFeatures,
    RunFailure,
    TDLabError,
)
from tdlab.geometry import FeatureMap, ProjectedSystem, build_system, load_features
from tdlab.rng import derive_seed, generator

CSV_LABELS = {"td0": "td0", "td0_avg": "td0avg", "ctd": "ctd"}
FEATURE_RETRIES = 20

EXAMPLE1_TRANSITION = [[0.2, 0.8], [0.3, 0.7]]
EXAMPLE1_REWARD = [1.0, 2.0]
EXAMPLE1_FEATURES = [[1.0], [2.0]]


def build_example1(beta: float = 0.9) -> tuple[MarkovRewardProcess, FeatureMap]:
    """Two-state chain with rewards (1, 2) and the single feature phi = (1, 2)."""
    return MarkovRewardProcess(EXAMPLE1_TRANSITION, EXAMPLE1_REWARD, beta), FeatureMap(EXAMPLE1_FEATURES)


def build_example2(n_states: int = 100, d: int = 3, seed: int = 0, beta: float = 0.9,
                   identity_features: bool = False) -> tuple[MarkovRewardProcess, FeatureMap]:
    """Random chain with features drawn uniformly from (0, 1), redrawn if rank-deficient."""
    if d < 1:
        raise InvalidSpec("d must be >= 1")
    mrp = random_mrp(n_states, seed, discount=beta)
    if identity_features:
        return mrp, FeatureMap.identity(n_states)
    rng = generator(seed, 1)
    for _ in range(FEATURE_RETRIES):
        phi = np.maximum(rng.random((n_states, d)), np.finfo(float).tiny)
        try:
            return mrp, FeatureMap(phi)
        except RankDeficientFeatures:
            continue
    raise RankDeficientAfterRetries(f"no full-rank {n_states}x{d} feature draw in {FEATURE_RETRIES} tries")


@dataclass
class AlgorithmSpec:
    """One estimator configuration.

    td0: ``c0`` and ``c`` (inverse-linear steps), or ``c0_fraction`` of the
    admissible step bound and ``rate_product`` = mu(1-beta) c0 c, resolved
    against the problem. td0_avg: ``c0``, ``c``, ``alpha``. ctd: ``gamma``,
    ``epoch_length``, optional ``radius_h`` and ``sample_mode``.
    ``allow_inadmissible`` skips the admissibility checks.
    """

    name: str
    c0: float | None = None
    c: float | None = None
    alpha: float | None = None
    c0_fraction: float | None = None
    rate_product: float | None = None
    gamma: float | None = None
    epoch_length: int | None = None
    radius_h: float | None = None
    sample_mode: str = "online"
    allow_inadmissible: bool = False

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


_ALGO_FIELDS = set(AlgorithmSpec.__dataclass_fields__)


@dataclass
class ExperimentSpec:
    problem: dict
    algorithms: list
    n_iterations: int
    n_runs: int = 50
    master_seed: int = 0
    discount: float = 0.9
    checkpoints: list | None = None
    checkpoint_stride: int | None = None
    start_state: int = 0
    output_path: str | None = None
    workers: int = 1
    dump_runs: str | None = None
    delta: float = 0.05
    truncation: int = 200

    def __post_init__(self):
        self.algorithms = [a if isinstance(a, AlgorithmSpec) else _algorithm_from_dict(a) for a in self.algorithms]
        self.validate()

    def validate(self):
        if not self.algorithms:
            raise InvalidSpec("at least one algorithm is required")
        names = [a.name for a in self.algorithms]
        for name in names:
            if name not in ALGORITHMS:
                raise InvalidSpec(f"unknown algorithm {name!r}{_suggest(name, ALGORITHMS)}")
        if len(set(names)) != len(names):
            raise InvalidSpec("each algorithm may appear once")
        if int(self.n_runs) < 1:
            raise InvalidSpec("n_runs must be >= 1")
        if int(self.n_iterations) < 1:
            raise InvalidSpec("n_iterations must be >= 1")
        if int(self.workers) < 1:
            raise InvalidSpec("workers must be >= 1")
        if not 0 < float(self.discount) < 1:
            raise InvalidSpec("discount must lie in (0, 1)")
        kind = self.problem.get("kind") if isinstance(self.problem, dict) else None
        if kind not in ("example1", "example2", "files"):
            raise InvalidSpec(f"problem.kind must be example1, example2 or files, got {kind!r}")
        cps = self.resolved_checkpoints()
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise InvalidSpec("checkpoints must be strictly increasing")
        if cps[0] < 1 or cps[-1] > self.n_iterations:
            raise InvalidSpec(f"checkpoints must lie in [1, {self.n_iterations}]")

    def resolved_checkpoints(self) -> list[int]:
        n = int(self.n_iterations)
        if self.checkpoints:
            return [int(c) for c in self.checkpoints]
        if self.checkpoint_stride:
            stride = int(self.checkpoint_stride)
            cps = list(range(stride, n + 1, stride))
        else:
            cps = [1 << k for k in range(n.bit_length()) if (1 << k) <= n]
        if not cps or cps[-1] != n:
            cps.append(n)
        return cps

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if v is not None and k != "algorithms"}
        out["algorithms"] = [a.to_dict() for a in self.algorithms]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        if not isinstance(data, dict):
            raise InvalidSpec("experiment spec must be a JSON object")
        known = set(cls.__dataclass_fields__)
        for key in data:
            if key not in known:
                raise InvalidSpec(f"unknown key {key!r}{_suggest(key, known)}")
        for key in ("problem", "algorithms", "n_iterations"):
            if key not in data:
                raise InvalidSpec(f"missing required key {key!r}")
        try:
            return cls(**copy.deepcopy(data))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, TDLabError):
                raise
            raise InvalidSpec(str(exc)) from exc


def _suggest(key, options) -> str:
    close = difflib.get_close_matches(str(key), sorted(options), n=3)
    return f"; did you mean {', '.join(repr(c) for c in close)}?" if close else ""


def _algorithm_from_dict(data: dict) -> AlgorithmSpec:
    if not isinstance(data, dict) or "name" not in data:
        raise InvalidSpec("each algorithm entry needs a 'name'")
    for key in data:
        if key not in _ALGO_FIELDS:
            raise InvalidSpec(f"unknown algorithm key {key!r}{_suggest(key, _ALGO_FIELDS)}")
    return AlgorithmSpec(**data)


def load_spec(path) -> ExperimentSpec:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"{path}: {exc}") from exc
    return ExperimentSpec.from_dict(data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key=value`` overrides; dotted keys reach into nested objects and lists.

    ``algorithms.ctd.gamma`` addresses an algorithm by name.
    """
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise InvalidSpec(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        target = data
        for i, part in enumerate(parts[:-1]):
            target = _descend(target, part, parts[: i + 1], parts[i + 1] if i + 1 < len(parts) else None)
        last = parts[-1]
        if isinstance(target, list):
            target[int(last)] = _parse_value(raw)
            continue
        allowed = _allowed_keys(parts[:-1], target)
        if last not in target and last not in allowed:
            raise InvalidSpec(f"unknown key {key!r}{_suggest(last, allowed | set(target))}")
        target[last] = _parse_value(raw)
    return data


def _allowed_keys(path, target):
    if not path:
        return set(ExperimentSpec.__dataclass_fields__)
    if path[0] == "algorithms":
        return _ALGO_FIELDS
    return set(target)


def _descend(target, part, path, nxt):
    if isinstance(target, list):
        if part.isdigit():
            return target[int(part)]
        for entry in target:
            if isinstance(entry, dict) and entry.get("name") == part:
                return entry
        names = [e.get("name") for e in target if isinstance(e, dict)]
        raise InvalidSpec(f"no entry named {part!r} under {'.'.join(path[:-1])}{_suggest(part, names)}")
    if part not in target:
        allowed = _allowed_keys(path[:-1], target)
        raise InvalidSpec(f"unknown key {'.'.join(path)!r}{_suggest(part, allowed | set(target))}")
    return target[part]


def build_problem(problem: dict, discount: float = 0.9) -> tuple[MarkovRewardProcess, FeatureMap]:
    """Materialize a ``problem`` block: example1, example2 or explicit files."""
    p = problem
    if not isinstance(p, dict):
        raise InvalidSpec("problem must be a JSON object")
    kind = p.get("kind")
    if kind not in ("example1", "example2", "files"):
        raise InvalidSpec(f"problem.kind must be example1, example2 or files, got {kind!r}")
    extra = set(p) - {"kind", "n_states", "d", "seed", "mrp", "features", "identity_features"}
    if extra:
        raise InvalidSpec(f"unknown problem key(s): {', '.join(sorted(extra))}")
    if kind == "example1":
        return build_example1(discount)
    if kind == "example2":
        return build_example2(int(p.get("n_states", 100)), int(p.get("d", 3)), int(p.get("seed", 0)),
                              discount, bool(p.get("identity_features", False)))
    if "mrp" not in p or "features" not in p:
        raise InvalidSpec("problem of kind 'files' needs 'mrp' and 'features'")
    if isinstance(p["mrp"], str):
        mrp = load_mrp(p["mrp"])
    else:
        mrp = MarkovRewardProcess.from_dict({"discount": discount, **p["mrp"]})
    return mrp, load_features(p["features"], mrp.n_states)


def td0_steps(algo: AlgorithmSpec, mu: float, beta: float) -> tuple[float, float]:
    """(c0, c) for td0, filling in ``c0_fraction`` and ``rate_product`` when given instead."""
    c0, c = algo.c0, algo.c
    if c0 is None:
        if algo.c0_fraction is None:
            raise InvalidSpec("td0 needs c0 or c0_fraction")
        c0 = algo.c0_fraction * mu * (1 - beta) / (2 * (1 + beta) ** 2)
    if c is None:
        if algo.rate_product is None:
            raise InvalidSpec("td0 needs c or rate_product")
        c = algo.rate_product / (mu * (1 - beta) * c0)
    return c0, c


def resolve_algorithm(algo: AlgorithmSpec, mrp: MarkovRewardProcess, system: ProjectedSystem, d: int):
    """Turn an AlgorithmSpec into concrete (schedule, ctd params), checking admissibility."""
    beta = mrp.discount
    if algo.name == "td0":
        c0, c = td0_steps(algo, system.mu, beta)
        if not algo.allow_inadmissible:
            adm = check_td_admissible(system.mu, beta, c0, c)
            if not adm.admissible:
                raise InadmissibleStepSize("td0 step sizes are inadmissible: " + "; ".join(adm.failures()))
        return StepSchedule.inverse_linear(c0, c), None
    if algo.name == "td0_avg":
        if algo.c0 is None or algo.c is None or algo.alpha is None:
            raise InvalidSpec("td0_avg needs c0, c and alpha")
        return StepSchedule.inverse_power(algo.c0, algo.c, algo.alpha), None
    if algo.gamma is None or algo.epoch_length is None:
        raise InvalidSpec("ctd needs gamma and epoch_length")
    if not algo.allow_inadmissible:
        consts = theorem3_constants(system.mu, beta, algo.gamma, algo.epoch_length, d, 1.0, 0.0)
        if not consts.admissible:
            raise InadmissibleStepSize(f"ctd: C1 = {consts.c1:.6g} is not < 1")
    return None, CtdParams(algo.gamma, int(algo.epoch_length), algo.radius_h, algo.sample_mode)


@dataclass
class RunTrace:
    """Per-checkpoint mean and standard deviation (over runs) of the normalized value difference."""

    checkpoints: np.ndarray
    algorithms: list
    mean: dict
    std: dict
    diverged: dict
    n_runs: int
    per_run: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for name in self.algorithms:
            if self.diverged[name]:
                buf.write(f"# diverged {CSV_LABELS[name]}: {len(self.diverged[name])}/{self.n_runs}"
                          f" runs {','.join(map(str, self.diverged[name]))}\n")
        writer = csv.writer(buf, lineterminator="\n")
        header = ["iteration"]
        for name in self.algorithms:
            header += [f"{CSV_LABELS[name]}_mean", f"{CSV_LABELS[name]}_dev"]
        writer.writerow(header)
        for i, n in enumerate(self.checkpoints):
            row = [str(int(n))]
            for name in self.algorithms:
                row += [repr(float(self.mean[name][i])), repr(float(self.std[name][i]))]
            writer.writerow(row)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def read_trace_csv(path) -> dict:
    """Parse a trace CSV back into {'iteration': array, '<label>_mean': array, ...}."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    cols = list(zip(*body)) if body else [[] for _ in header]
    out = {}
    for name, col in zip(header, cols):
        out[name] = np.array([int(v) for v in col]) if name == "iteration" else np.array([float(v) for v in col])
    return out


def write_run_dump(trace: RunTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["algorithm", "run", "iteration", "normalized_value_diff"])
        for name in trace.algorithms:
            for run, values in sorted(trace.per_run[name].items()):
                for n, v in zip(trace.checkpoints, values):
                    writer.writerow([name, run, int(n), repr(float(v))])


def read_run_dump(path) -> dict:
    out: dict = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["algorithm"], {}).setdefault(int(row["run"]), []).append(
                float(row["normalized_value_diff"]))
    return {name: {run: np.array(v) for run, v in runs.items()} for name, runs in out.items()}


def aggregate(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation over axis 0, reduced in run order."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] == 0:
        nan = np.full(values.shape[1:], np.nan)
        return nan, nan
    mean = np.mean(values, axis=0)
    std = np.sqrt(np.mean((values - mean) ** 2, axis=0))
    return mean, std


def run_experiment(spec: ExperimentSpec, *, write: bool = True) -> RunTrace:
    """Execute every configured algorithm ``n_runs`` times and aggregate the traces.

    Run ``i`` of every algorithm uses seed ``derive_seed(master_seed, i)``, so
    all algorithms see the same trajectories and the result does not depend
    on ``workers``.
    """
    mrp, features = build_problem(spec.problem, spec.discount)
    system = build_system(mrp, features)
    cps = np.array(spec.resolved_checkpoints(), dtype=np.int64)
    ordered = [name for name in ALGORITHMS if name in {a.name for a in spec.algorithms}]
    by_name = {a.name: a for a in spec.algorithms}
    resolved = {name: resolve_algorithm(by_name[name], mrp, system, features.d) for name in ordered}
    seeds = [derive_seed(spec.master_seed, i) for i in range(spec.n_runs)]

    def one(job):
        name, i = job
        schedule, ctd = resolved[name]
        try:
            trace = run_estimator(name, mrp, features, n_iterations=int(spec.n_iterations), seed=seeds[i],
                                  checkpoints=cps, schedule=schedule, ctd=ctd,
                                  start_state=int(spec.start_state), system=system)
        except NonFiniteIterate:
            return None
        except TDLabError as exc:
            raise RunFailure(name, i, exc) from exc
        return trace.normalized

    jobs = [(name, i) for name in ordered for i in range(spec.n_runs)]
    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=int(spec.workers)) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(job) for job in jobs]

    mean, std, diverged, per_run = {}, {}, {}, {}
    for name in ordered:
        rows = {i: r for (n, i), r in zip(jobs, results) if n == name}
        good = {i: r for i, r in rows.items() if r is not None and np.all(np.isfinite(r))}
        diverged[name] = sorted(set(rows) - set(good))
        stacked = np.array([good[i] for i in sorted(good)]).reshape(len(good), cps.size)
        mean[name], std[name] = aggregate(stacked)
        per_run[name] = good
    trace = RunTrace(cps, ordered, mean, std, diverged, int(spec.n_runs), per_run)
    if write and spec.output_path:
        trace.write(spec.output_path)
    if write and spec.dump_runs:
        write_run_dump(trace, spec.dump_runs)
    return trace


def example_spec(name: str) -> dict:
    """Ready-to-run experiment spec for one of the two synthetic studies."""
    if name == "example1":
        return {
            "problem": {"kind": "example1"},
            "discount": 0.9,
            "algorithms": [
                {"name": "td0", "c0": 0.04, "c": 100.0},
                {"name": "td0_avg", "c0": 0.5, "c": 10.0, "alpha": 0.75},
                {"name": "ctd", "gamma": 0.02, "epoch_length": 100},
            ],
            "n_iterations": 100_000,
            "n_runs": 50,
            "master_seed": 2015,
            "output_path": "example1.csv",
        }
    if name == "example2":
        return {
            "problem": {"kind": "example2", "n_states": 100, "d": 3, "seed": 1},
            "discount": 0.9,
            "algorithms": [
                {"name": "td0", "c0_fraction": 0.9, "rate_product": 1.1},
                {"name": "td0_avg", "c0": 0.5, "c": 10.0, "alpha": 0.75},
                {"name": "ctd", "gamma": 0.005, "epoch_length": 200_000},
            ],
            "n_iterations": 1_000_000,
            "n_runs": 50,
            "master_seed": 2015,
            "output_path": "example2.csv",
        }
    raise InvalidSpec(f"unknown example {name!r}{_suggest(name, ['example1', 'example2'])}")


def default_output_dir() -> Path:
    return Path(os.environ.get("TDLAB_OUTPUT_DIR", "."))
