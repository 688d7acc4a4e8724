"""Experiment protocols over the synthetic stack.

Each command trains/evaluates across a grid of (rule, shots, seed) and writes
sorted CSV artifacts plus per-run JSON traces. Outputs are byte-reproducible
for a fixed config: all randomness flows through named substreams of the
config seeds, rows are sorted before writing, and wall-clock timings go to a
plain-text log outside the reproducibility contract.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .datagen import DomainSpec, Episode, episode_test_batch, sample_episode, shift_domain, teacher_aligned_prototypes
from .errors import ConfigError, GradalignError
from .losses import Batch, classifier_grads, grad_l2reg, prompt_grads
from .metrics import failure_overlap, harmonic_mean
from .numerics import RngStream, finite_diff_grad, gaussian_matrix
from .surgery import RuleTag, UpdateRule
from .trainer import RunRecord, Target, TrainConfig, predictions, train
from .vlm import CosineClassifier, FrozenVLM, PromptState, init_prompt

__all__ = [
    "ExperimentConfig",
    "ResultRow",
    "GradCheckReport",
    "harmonic_mean",
    "failure_overlap",
    "reference_config",
    "load_config",
    "gradcheck",
    "cmd_fewshot",
    "cmd_base2new",
    "cmd_domainshift",
    "cmd_lambda_sweep",
    "cmd_angles",
    "cmd_gradcheck",
]

RESULT_COLUMNS = [
    "experiment_id",
    "rule",
    "lambda",
    "alpha",
    "shots",
    "seed",
    "acc_overall",
    "acc_base",
    "acc_new",
    "harmonic_mean",
    "acc_zero_shot",
    "mean_late_angle",
]

SEED_ENV_VAR = "GRADALIGN_SEED"


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: model, domain, run grid and training knobs.

    Every field has a default, so commands run without a config file; a JSON
    document (see load_config) can override any subset.
    """

    experiment_id: str = "ref"
    # model
    vlm_seed: int = 7
    m: int = 16
    m_hand: int = 4
    tok_dim: int = 8
    feat_dim: int = 32
    k: int = 10
    tau: float = 0.02
    # domain (calibrated so the zero-shot teacher is useful but imperfect)
    gap_rotation_deg: float = 30.0
    gap_shift: float = 0.1
    noise_sigma: float = 0.1
    proto_jitter: float = 0.1
    domain_seed: int = 11
    # run grid
    shots: tuple[int, ...] = (1, 2, 4)
    rules: tuple[UpdateRule, ...] = (UpdateRule.ce(), UpdateRule.prograd(1.0))
    seeds: tuple[int, ...] = (0, 1, 2)
    # training; lr0 is the desk-scale calibration, an order of magnitude above
    # the TrainConfig default because this encoder's gradients are tiny
    lr0: float = 0.2
    warmup_lr: float = 1e-5
    batch_size: int = 32
    target: Target = Target.PROMPT
    epochs: Optional[int] = None
    # sweep grids
    lambda_grid: tuple[float, ...] = (0.0, 0.2, 0.4, 0.7, 0.9, 1.0)
    gap_grid: tuple[float, ...] = (0.0, 15.0, 30.0, 45.0, 60.0, 90.0)
    angle_shots: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        for name in ("shots", "rules", "seeds", "lambda_grid", "gap_grid", "angle_shots"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"config list {name!r} must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("config seeds must be distinct")
        if any(not (0.0 <= lam <= 1.0) for lam in self.lambda_grid):
            raise ConfigError("lambda grid values must lie in [0, 1]")

    def domain_spec(self) -> DomainSpec:
        return DomainSpec(
            k=self.k,
            feat_dim=self.feat_dim,
            gap_rotation_deg=self.gap_rotation_deg,
            gap_shift=self.gap_shift,
            noise_sigma=self.noise_sigma,
            proto_jitter=self.proto_jitter,
            seed=self.domain_seed,
        )

    def make_vlm(self) -> FrozenVLM:
        return FrozenVLM.create(
            seed=self.vlm_seed,
            m=self.m,
            m_hand=self.m_hand,
            tok_dim=self.tok_dim,
            feat_dim=self.feat_dim,
            k=self.k,
            tau=self.tau,
        )

    def epochs_for(self, shots: int) -> int:
        if self.epochs is not None:
            return self.epochs
        if shots >= 8:
            return 200
        if shots >= 2:
            return 100
        return 50

    def train_config(self, rule: UpdateRule, shots: int, seed: int) -> TrainConfig:
        return TrainConfig(
            rule=rule,
            epochs=self.epochs_for(shots),
            seed=RngStream(seed).child(f"train-{shots}").seed,
            lr0=self.lr0,
            warmup_lr=self.warmup_lr,
            batch_size=self.batch_size,
            target=self.target,
        )

    def episode_seed(self, shots: int, seed: int) -> int:
        return RngStream(seed).child(f"episode-{shots}").seed


def _parse_rule(doc: dict) -> UpdateRule:
    try:
        tag = RuleTag(str(doc["rule"]).upper())
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad rule spec {doc!r}") from exc
    if tag == RuleTag.PROGRAD:
        return UpdateRule.prograd(float(doc.get("lambda", 1.0)))
    if tag == RuleTag.L2REG:
        return UpdateRule.l2reg(float(doc.get("alpha", 0.01)))
    return UpdateRule(tag)


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a config from a (possibly partial) JSON document."""
    base = ExperimentConfig()
    kwargs: dict = {}
    if "experiment_id" in doc:
        kwargs["experiment_id"] = str(doc["experiment_id"])
    vlm = doc.get("vlm", {})
    for src, dst in [("seed", "vlm_seed"), ("m", "m"), ("m_hand", "m_hand"), ("tok_dim", "tok_dim"), ("feat_dim", "feat_dim"), ("k", "k")]:
        if src in vlm:
            kwargs[dst] = int(vlm[src])
    if "tau" in vlm:
        kwargs["tau"] = float(vlm["tau"])
    dom = doc.get("domain", {})
    for src in ("gap_rotation_deg", "gap_shift", "noise_sigma", "proto_jitter"):
        if src in dom:
            kwargs[src] = float(dom[src])
    if "seed" in dom:
        kwargs["domain_seed"] = int(dom["seed"])
    tr = doc.get("train", {})
    for src in ("lr0", "warmup_lr"):
        if src in tr:
            kwargs[src] = float(tr[src])
    if "batch_size" in tr:
        kwargs["batch_size"] = int(tr["batch_size"])
    if "epochs" in tr and tr["epochs"] is not None:
        kwargs["epochs"] = int(tr["epochs"])
    if "target" in tr:
        try:
            kwargs["target"] = Target(str(tr["target"]).upper())
        except ValueError as exc:
            raise ConfigError(f"bad training target {tr['target']!r}") from exc
    if "shots" in doc:
        kwargs["shots"] = tuple(int(s) for s in doc["shots"])
    if "rules" in doc:
        kwargs["rules"] = tuple(_parse_rule(r) for r in doc["rules"])
    if "seeds" in doc and doc["seeds"] is not None:
        kwargs["seeds"] = tuple(int(s) for s in doc["seeds"])
    else:
        master = int(doc.get("master_seed", 0))
        num = int(doc.get("num_seeds", len(base.seeds)))
        if "master_seed" in doc or "num_seeds" in doc:
            kwargs["seeds"] = tuple(master + i for i in range(num))
    for name in ("lambda_grid", "gap_grid"):
        if name in doc:
            kwargs[name] = tuple(float(v) for v in doc[name])
    if "angle_shots" in doc:
        kwargs["angle_shots"] = tuple(int(s) for s in doc["angle_shots"])
    try:
        return replace(base, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config document: {exc}") from exc


def load_config(path: Optional[str], command: str, num_seeds: Optional[int] = None) -> ExperimentConfig:
    """Config file (or the command's reference defaults) plus CLI/env overrides."""
    import json

    if path is None:
        cfg = reference_config(command)
    else:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = config_from_dict(doc)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            master = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc
        cfg = replace(cfg, seeds=tuple(master + i for i in range(len(cfg.seeds))))
    if num_seeds is not None:
        if num_seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        start = cfg.seeds[0]
        cfg = replace(cfg, seeds=tuple(start + i for i in range(num_seeds)))
    return cfg


def reference_config(command: str) -> ExperimentConfig:
    """Pinned default config per command; the acceptance suite runs on these."""
    base = ExperimentConfig()
    if command == "fewshot":
        return replace(
            base,
            experiment_id="ref-fewshot",
            shots=(1, 2, 4, 8, 16),
            rules=(UpdateRule.ce(), UpdateRule.prograd(1.0), UpdateRule.kd(), UpdateRule.gm(), UpdateRule.l2reg(0.01)),
            seeds=(0, 1, 2),
        )
    if command == "base2new":
        return replace(
            base,
            experiment_id="ref-base2new",
            shots=(1,),
            rules=(UpdateRule.ce(), UpdateRule.prograd(1.0)),
            seeds=tuple(range(30)),
        )
    if command == "domainshift":
        return replace(
            base,
            experiment_id="ref-domainshift",
            shots=(4,),
            gap_rotation_deg=0.0,
            gap_shift=0.0,
            rules=(UpdateRule.ce(), UpdateRule.prograd(1.0)),
            seeds=(0, 1, 2),
        )
    if command == "lambda-sweep":
        return replace(
            base,
            experiment_id="ref-lambda",
            shots=(1,),
            rules=(UpdateRule.ce(), UpdateRule.prograd(1.0)),
            seeds=(0, 1, 2),
        )
    if command == "angles":
        return replace(
            base,
            experiment_id="ref-angles",
            shots=(4,),
            angle_shots=(1, 2, 4),
            rules=(UpdateRule.ce(), UpdateRule.prograd(1.0)),
            seeds=tuple(range(20)),
            epochs=300,
        )
    if command == "gradcheck":
        return replace(base, experiment_id="ref-gradcheck")
    raise ConfigError(f"unknown command {command!r}")


# --------------------------------------------------------------------------
# rows and CSV plumbing


@dataclass
class ResultRow:
    """One trained run; mirrors the result CSV schema (wallclock_ms is kept in
    memory and logged, but excluded from the reproducible CSV artifacts)."""

    experiment_id: str
    rule: str
    lam: Optional[float]
    alpha: Optional[float]
    shots: int
    seed: int
    acc_overall: float
    acc_base: float
    acc_new: float
    harmonic_mean: float
    acc_zero_shot: float
    mean_late_angle: float
    wallclock_ms: float = 0.0
    gap_rotation_deg: Optional[float] = None
    gap_shift: Optional[float] = None

    def sort_key(self):
        return (
            self.rule,
            -1.0 if self.lam is None else self.lam,
            -1.0 if self.alpha is None else self.alpha,
            self.shots,
            -1.0 if self.gap_rotation_deg is None else self.gap_rotation_deg,
            self.seed,
        )

    def values(self, columns: list[str]) -> list:
        mapping = {
            "experiment_id": self.experiment_id,
            "rule": self.rule,
            "lambda": self.lam,
            "alpha": self.alpha,
            "shots": self.shots,
            "seed": self.seed,
            "acc_overall": self.acc_overall,
            "acc_base": self.acc_base,
            "acc_new": self.acc_new,
            "harmonic_mean": self.harmonic_mean,
            "acc_zero_shot": self.acc_zero_shot,
            "mean_late_angle": self.mean_late_angle,
            "gap_rotation_deg": self.gap_rotation_deg,
            "gap_shift": self.gap_shift,
        }
        return [mapping[c] for c in columns]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns: list[str], rows: list[list]) -> None:
    lines = [",".join(columns)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _mean_late_angle(record: RunRecord) -> float:
    late = record.steps[-max(1, len(record.steps) // 4) :]
    return sum(s.angle_deg for s in late) / len(late)


def _ci95(values: list[float]) -> float:
    n = len(values)
    if n < 2:
        return 0.0
    sd = float(np.std(np.asarray(values), ddof=1))
    return 1.96 * sd / math.sqrt(n)


AGG_METRICS = ["acc_overall", "acc_base", "acc_new", "harmonic_mean", "acc_zero_shot", "mean_late_angle"]


def _aggregate_rows(rows: list[ResultRow]) -> tuple[list[str], list[list]]:
    columns = ["experiment_id", "rule", "lambda", "alpha", "shots", "n"]
    for m in AGG_METRICS:
        columns += [f"{m}_mean", f"{m}_ci95"]
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.rule, r.lam, r.alpha, r.shots), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: (k[0], -1.0 if k[1] is None else k[1], -1.0 if k[2] is None else k[2], k[3])):
        grp = groups[key]
        line = [grp[0].experiment_id, key[0], key[1], key[2], key[3], len(grp)]
        for m in AGG_METRICS:
            vals = [getattr(r, m) for r in grp]
            line += [sum(vals) / len(vals), _ci95(vals)]
        out.append(line)
    return columns, out


def _rule_slug(rule: UpdateRule) -> str:
    if rule.tag == RuleTag.PROGRAD:
        return f"PROGRAD-lam{rule.lam!r}"
    if rule.tag == RuleTag.L2REG:
        return f"L2REG-a{rule.alpha!r}"
    return rule.label()


def _row_lam(rule: UpdateRule) -> Optional[float]:
    return rule.lam if rule.tag == RuleTag.PROGRAD else None


def _row_alpha(rule: UpdateRule) -> Optional[float]:
    return rule.alpha if rule.tag == RuleTag.L2REG else None


# --------------------------------------------------------------------------
# run execution


@dataclass
class RunResult:
    row: ResultRow
    record: RunRecord
    params: object
    episode: Episode
    rule: UpdateRule


def _execute_unit(cfg: ExperimentConfig, vlm: FrozenVLM, protos: np.ndarray, rule: UpdateRule, shots: int, seed: int) -> RunResult:
    t0 = time.perf_counter()
    episode = sample_episode(protos, cfg.domain_spec(), shots, cfg.episode_seed(shots, seed))
    params, record = train(vlm, episode, cfg.train_config(rule, shots, seed))
    wallclock = (time.perf_counter() - t0) * 1e3
    row = ResultRow(
        experiment_id=cfg.experiment_id,
        rule=rule.label(),
        lam=_row_lam(rule),
        alpha=_row_alpha(rule),
        shots=shots,
        seed=seed,
        acc_overall=record.final.acc_overall,
        acc_base=record.final.acc_base,
        acc_new=record.final.acc_new,
        harmonic_mean=record.final.harmonic_mean,
        acc_zero_shot=record.final.acc_zero_shot,
        mean_late_angle=_mean_late_angle(record),
        wallclock_ms=wallclock,
    )
    return RunResult(row=row, record=record, params=params, episode=episode, rule=rule)


def _run_grid(
    cfg: ExperimentConfig,
    vlm: FrozenVLM,
    protos: np.ndarray,
    units: list[tuple[UpdateRule, int, int]],
    threads: int,
) -> tuple[dict, list[tuple[tuple, str]]]:
    """Execute (rule, shots, seed) units, optionally on a thread pool.

    Results keyed by (rule slug, shots, seed); failures are collected, not
    raised, so one divergent run cannot sink a sweep.
    """

    def work(unit):
        rule, shots, seed = unit
        try:
            return unit, _execute_unit(cfg, vlm, protos, rule, shots, seed), None
        except GradalignError as exc:
            return unit, None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(work, units))
    else:
        outcomes = [work(u) for u in units]
    results, failures = {}, []
    for unit, res, err in outcomes:
        key = (_rule_slug(unit[0]), unit[1], unit[2])
        if err is None:
            results[key] = res
        else:
            failures.append((key, err))
    return results, sorted(failures)


def _write_runs(out: Path, results: dict) -> None:
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    for (slug, shots, seed), res in sorted(results.items()):
        name = f"{res.row.experiment_id}__{slug}__shots{shots}__seed{seed}.json"
        (runs_dir / name).write_text(res.record.to_json() + "\n", encoding="utf-8")


def _write_timings(out: Path, results: dict, failures: list) -> None:
    lines = [
        f"{slug} shots={shots} seed={seed} wallclock_ms={res.row.wallclock_ms:.3f}"
        for (slug, shots, seed), res in sorted(results.items())
    ]
    lines += [f"{key[0]} shots={key[1]} seed={key[2]} FAILED {err}" for key, err in failures]
    (out / "timings.log").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _downstream_protos(cfg: ExperimentConfig, vlm: FrozenVLM) -> np.ndarray:
    spec = cfg.domain_spec()
    return shift_domain(teacher_aligned_prototypes(vlm, spec), spec)


def _emit_result_files(
    out: Path,
    stem: str,
    results: dict,
    failures: list,
    extra_columns: Optional[list[str]] = None,
) -> list[ResultRow]:
    rows = sorted((res.row for res in results.values()), key=ResultRow.sort_key)
    columns = RESULT_COLUMNS + (extra_columns or [])
    _write_csv(out / f"{stem}.csv", columns, [r.values(columns) for r in rows])
    agg_cols, agg_rows = _aggregate_rows(rows)
    _write_csv(out / f"{stem}_agg.csv", agg_cols, agg_rows)
    _write_runs(out, results)
    _write_timings(out, results, failures)
    return rows


# --------------------------------------------------------------------------
# commands


def cmd_fewshot(cfg: ExperimentConfig, out_dir: str, threads: int = 1, plot: bool = False) -> int:
    """Few-shot sweep: every (rule, shots, seed); raw rows, aggregates with a
    95% normal-approximation CI, and a failure-overlap table against the
    zero-shot reference when both CE and a projection rule are present."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vlm = cfg.make_vlm()
    protos = _downstream_protos(cfg, vlm)
    units = [(rule, shots, seed) for rule in cfg.rules for shots in cfg.shots for seed in cfg.seeds]
    results, failures = _run_grid(cfg, vlm, protos, units, threads)
    _emit_result_files(out, "fewshot", results, failures)

    overlap_rows = []
    prograd_rules = [r for r in cfg.rules if r.tag == RuleTag.PROGRAD]
    has_ce = any(r.tag == RuleTag.CE for r in cfg.rules)
    if has_ce and prograd_rules:
        for rule in prograd_rules:
            for shots in cfg.shots:
                for seed in cfg.seeds:
                    key_p = (_rule_slug(rule), shots, seed)
                    key_c = ("CE", shots, seed)
                    if key_p not in results or key_c not in results:
                        continue
                    res_p, res_c = results[key_p], results[key_c]
                    truth = res_p.episode.test.labels
                    pred_p = predictions(vlm, res_p.params, res_p.episode.test.features)
                    pred_c = predictions(vlm, res_c.params, res_c.episode.test.features)
                    pred_zs = predictions(vlm, init_prompt(vlm), res_p.episode.test.features)
                    fails = int(np.sum((pred_p != truth) & (pred_c == truth)))
                    frac = failure_overlap(pred_p.tolist(), pred_c.tolist(), pred_zs.tolist(), truth.tolist())
                    overlap_rows.append([cfg.experiment_id, rule.lam, shots, seed, fails, frac])
        overlap_rows.sort(key=lambda r: (r[1], r[2], r[3]))
        _write_csv(
            out / "failure_overlap.csv",
            ["experiment_id", "lambda", "shots", "seed", "n_failures", "overlap_frac"],
            overlap_rows,
        )
    if plot:
        _plot_fewshot(out, results)
    return 1 if failures else 0


def _plot_fewshot(out: Path, results: dict) -> None:
    from .svgplot import line_chart

    series: dict[str, dict[int, list[float]]] = {}
    for (slug, shots, _seed), res in results.items():
        series.setdefault(slug, {}).setdefault(shots, []).append(res.row.acc_overall)
    charts = {
        slug: sorted((shots, sum(v) / len(v)) for shots, v in per_shots.items())
        for slug, per_shots in series.items()
    }
    line_chart(str(out / "fewshot.svg"), charts, "few-shot accuracy", "shots", "accuracy")


def cmd_base2new(cfg: ExperimentConfig, out_dir: str, threads: int = 1, plot: bool = False) -> int:
    """Train on base classes, report base/new/harmonic-mean per run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vlm = cfg.make_vlm()
    protos = _downstream_protos(cfg, vlm)
    units = [(rule, shots, seed) for rule in cfg.rules for shots in cfg.shots for seed in cfg.seeds]
    results, failures = _run_grid(cfg, vlm, protos, units, threads)
    _emit_result_files(out, "base2new", results, failures)
    return 1 if failures else 0


def cmd_domainshift(cfg: ExperimentConfig, out_dir: str, threads: int = 1, plot: bool = False) -> int:
    """Train once per (rule, seed) on the source domain, then re-evaluate the
    same parameters on test sets from increasingly rotated prototypes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vlm = cfg.make_vlm()
    protos = _downstream_protos(cfg, vlm)
    shots = cfg.shots[0]
    spec = cfg.domain_spec()
    units = [(rule, shots, seed) for rule in cfg.rules for seed in cfg.seeds]
    results, failures = _run_grid(cfg, vlm, protos, units, threads)

    target_seed = RngStream(spec.seed).child("target-domain").seed
    rows = []
    for (slug, sh, seed), res in sorted(results.items()):
        for gap in cfg.gap_grid:
            target_spec = replace(spec, gap_rotation_deg=gap, gap_shift=0.0, seed=target_seed)
            target_protos = shift_domain(protos, target_spec)
            test = episode_test_batch(target_protos, spec, cfg.episode_seed(sh, seed))
            pred = predictions(vlm, res.params, test.features)
            correct = pred == test.labels
            base_mask = np.isin(test.labels, sorted(res.episode.base_classes))
            new_mask = ~base_mask
            acc_base = float(correct[base_mask].mean())
            acc_new = float(correct[new_mask].mean())
            zs_pred = predictions(vlm, init_prompt(vlm), test.features)
            row = replace(
                res.row,
                acc_overall=float(correct.mean()),
                acc_base=acc_base,
                acc_new=acc_new,
                harmonic_mean=harmonic_mean(acc_base, acc_new),
                acc_zero_shot=float((zs_pred == test.labels).mean()),
                gap_rotation_deg=gap,
                gap_shift=0.0,
            )
            rows.append(row)
    rows.sort(key=ResultRow.sort_key)
    columns = RESULT_COLUMNS + ["gap_rotation_deg", "gap_shift"]
    _write_csv(out / "domainshift.csv", columns, [r.values(columns) for r in rows])
    _write_runs(out, results)
    _write_timings(out, results, failures)
    return 1 if failures else 0


def cmd_lambda_sweep(cfg: ExperimentConfig, out_dir: str, threads: int = 1, plot: bool = False) -> int:
    """CE plus the projection rule across the lambda grid; the lambda=0 rows
    must reproduce the CE rows exactly at matching seeds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vlm = cfg.make_vlm()
    protos = _downstream_protos(cfg, vlm)
    rules = [UpdateRule.ce()] + [UpdateRule.prograd(lam) for lam in cfg.lambda_grid]
    units = [(rule, shots, seed) for rule in rules for shots in cfg.shots for seed in cfg.seeds]
    results, failures = _run_grid(cfg, vlm, protos, units, threads)
    _emit_result_files(out, "lambda_sweep", results, failures)
    return 1 if failures else 0


ANGLE_COLUMNS = [
    "experiment_id",
    "rule",
    "lambda",
    "shots",
    "seed",
    "step",
    "lr",
    "loss_ce",
    "loss_kl",
    "dot_ce_kl",
    "angle_deg",
    "branch",
]


def cmd_angles(cfg: ExperimentConfig, out_dir: str, threads: int = 1, plot: bool = False) -> int:
    """Full per-step alignment traces for CE and the projection rule,
    side by side across the configured shot counts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vlm = cfg.make_vlm()
    protos = _downstream_protos(cfg, vlm)
    rules = [r for r in cfg.rules if r.tag in (RuleTag.CE, RuleTag.PROGRAD)]
    if not rules:
        raise ConfigError("angle traces need a CE or PROGRAD rule in the config")
    units = [(rule, shots, seed) for rule in rules for shots in cfg.angle_shots for seed in cfg.seeds]
    results, failures = _run_grid(cfg, vlm, protos, units, threads)

    step_rows, summary_rows = [], []
    for (slug, shots, seed), res in sorted(results.items()):
        lam = _row_lam(res.rule)
        for s in res.record.steps:
            step_rows.append(
                [cfg.experiment_id, res.rule.label(), lam, shots, seed, s.step, s.lr, s.loss_ce, s.loss_kl, s.dot_ce_kl, s.angle_deg, s.branch]
            )
        summary_rows.append([cfg.experiment_id, res.rule.label(), lam, shots, seed, _mean_late_angle(res.record)])
    step_rows.sort(key=lambda r: (r[1], -1.0 if r[2] is None else r[2], r[3], r[4], r[5]))
    summary_rows.sort(key=lambda r: (r[1], -1.0 if r[2] is None else r[2], r[3], r[4]))
    _write_csv(out / "angles.csv", ANGLE_COLUMNS, step_rows)
    _write_csv(
        out / "angles_summary.csv",
        ["experiment_id", "rule", "lambda", "shots", "seed", "mean_late_angle"],
        summary_rows,
    )
    _write_runs(out, results)
    _write_timings(out, results, failures)
    if plot:
        _plot_angles(out, results, cfg)
    return 1 if failures else 0


def _plot_angles(out: Path, results: dict, cfg: ExperimentConfig) -> None:
    from .svgplot import line_chart

    seed = cfg.seeds[0]
    for shots in cfg.angle_shots:
        series = {}
        for (slug, sh, sd), res in results.items():
            if sh == shots and sd == seed:
                series[slug] = [(s.step, s.angle_deg) for s in res.record.steps]
        if series:
            line_chart(
                str(out / f"angles_shots{shots}.svg"),
                series,
                f"gradient angle, {shots} shot(s), seed {seed}",
                "step",
                "angle (deg)",
            )


# --------------------------------------------------------------------------
# gradient self-check


@dataclass
class GradCheckCase:
    name: str
    rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    cases: list[GradCheckCase] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.rel_err <= self.tol for c in self.cases)

    @property
    def max_rel_err(self) -> float:
        return max(c.rel_err for c in self.cases)

    def text(self) -> str:
        lines = [f"gradcheck: {len(self.cases)} cases, tol {self.tol:.1e}"]
        lines += [f"  {c.name}: rel_err {c.rel_err:.3e}" for c in self.cases]
        lines.append(f"max rel err {self.max_rel_err:.3e}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def _rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(fd)))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(analytic - fd)) / scale


def _random_small_instance(rng: RngStream):
    m = 1 + rng.randbelow(4)
    tok_dim = 1 + rng.randbelow(8)
    feat_dim = 2 + rng.randbelow(15)
    k = 2 + rng.randbelow(4)
    m_hand = 1 + rng.randbelow(m)
    tau = 0.05 + 0.45 * rng.next_float()
    vlm = FrozenVLM.create(seed=rng.next_u64(), m=m, m_hand=m_hand, tok_dim=tok_dim, feat_dim=feat_dim, k=k, tau=tau)
    n = 1 + rng.randbelow(4)
    feats = gaussian_matrix(rng, n, feat_dim, 1.0)
    labels = np.array([rng.randbelow(k) for _ in range(n)], dtype=np.int64)
    batch = Batch(feats, labels)
    prompt = PromptState(gaussian_matrix(rng, m, tok_dim, 1.0))
    return vlm, batch, prompt


def gradcheck(seed: int = 0, cases: int = 120, tol: float = 1e-6, perturb: float = 0.0) -> GradCheckReport:
    """Finite-difference audit of every analytic gradient on random small
    instances. `perturb` injects a fault into the analytic gradient and exists
    only so tests can prove the check actually detects broken gradients."""
    rng = RngStream(seed)
    report = GradCheckReport(tol=tol)
    for i in range(cases):
        vlm, batch, prompt = _random_small_instance(rng)
        kind = i % 4
        h = 1e-5 * (1.0 + float(np.abs(prompt.v).max()))
        if kind in (0, 1):
            lg = prompt_grads(vlm, prompt, batch)
            analytic = lg.g_ce if kind == 0 else lg.g_kl
            attr = "loss_ce" if kind == 0 else "loss_kl"

            def f(flat, _vlm=vlm, _b=batch, _m=vlm.m, _t=vlm.tok_dim, _a=attr):
                return getattr(prompt_grads(_vlm, PromptState.from_flat(flat, _m, _t), _b), _a)

            fd = finite_diff_grad(f, prompt.flat(), h)
            name = f"case{i:03d}-{'grad_ce' if kind == 0 else 'grad_kl'}"
        elif kind == 2:
            zs = init_prompt(vlm)
            # keep the instance away from the norm kink where the gradient is undefined
            if float(np.linalg.norm(prompt.v - zs.v)) < 0.1:
                prompt = PromptState(prompt.v + 1.0)
            alpha = 0.01
            analytic = grad_l2reg(prompt, zs, alpha)

            def f(flat, _zs=zs, _m=vlm.m, _t=vlm.tok_dim, _alpha=alpha):
                d = flat - _zs.v.ravel()
                return _alpha * math.sqrt(float(np.dot(d, d)))

            fd = finite_diff_grad(f, prompt.flat(), h)
            name = f"case{i:03d}-grad_l2reg"
        else:
            cls = CosineClassifier.create(rng.next_u64(), vlm.k, vlm.feat_dim)
            lg = classifier_grads(vlm, cls, batch)
            h = 1e-5 * (1.0 + float(np.abs(cls.weights).max()))
            worst = 0.0
            for analytic, attr in [(lg.g_ce, "loss_ce"), (lg.g_kl, "loss_kl")]:

                def f(flat, _vlm=vlm, _b=batch, _k=vlm.k, _d=vlm.feat_dim, _a=attr):
                    return getattr(classifier_grads(_vlm, CosineClassifier(flat.reshape(_k, _d)), _b), _a)

                if perturb != 0.0:
                    analytic = analytic.copy()
                    analytic[0] += perturb
                worst = max(worst, _rel_err(analytic, finite_diff_grad(f, cls.flat(), h)))
            report.cases.append(GradCheckCase(f"case{i:03d}-classifier_grads", worst))
            continue
        if perturb != 0.0:
            analytic = analytic.copy()
            analytic[0] += perturb
        report.cases.append(GradCheckCase(name, _rel_err(analytic, fd)))
    return report


def cmd_gradcheck(cfg: ExperimentConfig, out_dir: str, threads: int = 1, plot: bool = False) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = gradcheck(seed=cfg.seeds[0])
    (out / "gradcheck.txt").write_text(report.text() + "\n", encoding="utf-8")
    return 0 if report.passed else 1
