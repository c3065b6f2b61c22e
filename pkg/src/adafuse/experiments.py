"""Experiment configuration and the end-to-end pipeline stages.

Each stage reads and writes plain artifacts inside a run directory, so the
command-line tool can run them one at a time and the pipeline can be
re-executed from the resolved ``config.txt`` alone.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import (SCENARIOS, Cohort, Scenario, generate_scenario, read_dataset, read_kv,
                   write_dataset, write_kv)
from .evaluation import (EvalReport, auc, evaluate_methods, policy_report,
                         prediction_correlation, write_correlation_csv, write_policy_csv,
                         write_report_csv)
from .models import (COMBOS, MODALITIES, ClassifierBank, DynMMGate, MoEGate, dynmm_flops,
                     moe_combine, moe_flops)
from .policy import AdaFuseNetwork, read_trajectories, rollout_flops, write_trajectories
from .rl import (FREEZE_GRID, LOG_FIELDS, AdaFuseResult, FreezeConfig, LossConfig,
                 RewardConfig, TrainSchedule, greedy_predict, pretrain_baselines, train_adafuse,
                 train_dynmm, train_moe, training_splits)

logger = logging.getLogger(__name__)

_SECTIONS = {"scenario": Scenario, "schedule": TrainSchedule, "reward": RewardConfig,
             "loss": LossConfig, "freeze": FreezeConfig}


def _parse(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


@dataclass
class ExperimentConfig:
    """Everything that determines a run; serialised as flat ``section.field = value`` lines."""

    scenario: Scenario = field(default_factory=Scenario)
    seed: int = 0
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    reward: RewardConfig = field(default_factory=RewardConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    freeze: FreezeConfig = field(default_factory=FreezeConfig)
    bootstrap_iters: int = 1000

    def __post_init__(self) -> None:
        # the root seed drives every training stream
        if self.schedule.seed != self.seed:
            self.schedule = replace(self.schedule, seed=self.seed)

    def to_kv(self) -> dict[str, str]:
        out = {"seed": str(self.seed), "bootstrap_iters": str(self.bootstrap_iters)}
        for section in _SECTIONS:
            for k, v in asdict(getattr(self, section)).items():
                if section == "schedule" and k == "seed":
                    continue
                out[f"{section}.{k}"] = repr(v) if isinstance(v, float) else str(v)
        return out

    def with_overrides(self, values: Mapping[str, str]) -> "ExperimentConfig":
        """Apply ``section.field`` / top-level overrides, validating names and types."""
        parts = {s: asdict(getattr(self, s)) for s in _SECTIONS}
        top = {"seed": self.seed, "bootstrap_iters": self.bootstrap_iters}
        if "scenario.name" in values and values["scenario.name"] in SCENARIOS:
            parts["scenario"] = asdict(SCENARIOS[values["scenario.name"]])
        for key, text in values.items():
            if key in top:
                top[key] = int(text)
                continue
            section, _, name = key.partition(".")
            if section not in parts or name not in parts[section]:
                raise ValueError(f"unknown config key {key!r}")
            parts[section][name] = _parse(text, parts[section][name])
        parts["schedule"]["seed"] = top["seed"]
        return ExperimentConfig(
            scenario=Scenario(**parts["scenario"]), seed=top["seed"],
            schedule=TrainSchedule(**parts["schedule"]), reward=RewardConfig(**parts["reward"]),
            loss=LossConfig(**parts["loss"]), freeze=FreezeConfig(**parts["freeze"]),
            bootstrap_iters=top["bootstrap_iters"])

    @classmethod
    def from_kv(cls, values: Mapping[str, str]) -> "ExperimentConfig":
        return cls().with_overrides(values)

    def save(self, path: str | Path) -> None:
        write_kv(path, self.to_kv())

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_kv(read_kv(path))


def parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# Run directory layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.txt"

    @property
    def train(self) -> Path:
        return self.root / "data" / "train.jsonl"

    @property
    def test(self) -> Path:
        return self.root / "data" / "test.jsonl"

    @property
    def scenario(self) -> Path:
        return self.root / "data" / "scenario.txt"

    @property
    def bank(self) -> Path:
        return self.root / "checkpoints" / "bank.ckpt"

    @property
    def adafuse(self) -> Path:
        return self.root / "checkpoints" / "adafuse.ckpt"

    @property
    def moe(self) -> Path:
        return self.root / "checkpoints" / "moe.ckpt"

    @property
    def dynmm(self) -> Path:
        return self.root / "checkpoints" / "dynmm.ckpt"

    @property
    def baseline_metrics(self) -> Path:
        return self.root / "reports" / "baselines.csv"

    @property
    def metrics_log(self) -> Path:
        return self.root / "reports" / "adafuse_metrics.csv"

    @property
    def report(self) -> Path:
        return self.root / "reports" / "eval_report.csv"

    @property
    def correlation(self) -> Path:
        return self.root / "reports" / "prediction_correlation.csv"

    @property
    def trajectories(self) -> Path:
        return self.root / "reports" / "trajectories.jsonl"

    @property
    def policy_combos(self) -> Path:
        return self.root / "reports" / "policy_combos.csv"

    @property
    def policy_skips(self) -> Path:
        return self.root / "reports" / "policy_skip_rates.csv"

    def ablation(self, grid: str) -> Path:
        return self.root / "reports" / f"ablation_{grid}.csv"

    def make(self) -> "RunPaths":
        for sub in ("data", "checkpoints", "reports"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _fmt(x: float) -> str:
    return "%.6f" % x


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_generate(cfg: ExperimentConfig, paths: RunPaths) -> tuple[Cohort, Cohort]:
    train, test = generate_scenario(cfg.scenario, cfg.seed)
    write_dataset(train, paths.train)
    write_dataset(test, paths.test)
    write_kv(paths.scenario, {k: str(v) for k, v in asdict(cfg.scenario).items()})
    return train, test


def available_mask(scenario: Scenario) -> tuple[bool, bool, bool]:
    return tuple(m in scenario.available for m in MODALITIES)


def stage_train_baselines(cfg: ExperimentConfig, train: Cohort, paths: RunPaths) -> ClassifierBank:
    splits = training_splits(train, cfg.schedule)
    bank, metrics = pretrain_baselines(splits.fit, splits.val, cfg.schedule)
    ckpt.save_bank(bank, paths.bank, {"seed": cfg.seed})
    with open(paths.baseline_metrics, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["combo", "epochs_run", "best_epoch", "val_auc"])
        for m in metrics:
            w.writerow([m.combo, m.epochs_run, m.best_epoch, _fmt(m.val_auc)])
    return bank


def write_metrics_log(result: AdaFuseResult, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for e in result.log:
            w.writerow([e.epoch, _fmt(e.temperature), _fmt(e.mean_reward), _fmt(e.entropy),
                        _fmt(e.train_loss), _fmt(e.val_auc)])


def fit_adafuse(cfg: ExperimentConfig, train: Cohort, bank: ClassifierBank,
                freeze: FreezeConfig | None = None, reward: RewardConfig | None = None,
                loss: LossConfig | None = None) -> AdaFuseResult:
    splits = training_splits(train, cfg.schedule)
    return train_adafuse(splits.policy, splits.val, bank, freeze or cfg.freeze,
                         reward or cfg.reward, loss or cfg.loss, cfg.schedule,
                         available=available_mask(cfg.scenario))


def stage_train_adafuse(cfg: ExperimentConfig, train: Cohort, bank: ClassifierBank,
                        paths: RunPaths) -> AdaFuseResult:
    result = fit_adafuse(cfg, train, bank)
    ckpt.save_adafuse(result.net, paths.adafuse,
                      {"seed": cfg.seed, "best_epoch": result.best_epoch, **result.configs})
    write_metrics_log(result, paths.metrics_log)
    return result


def stage_train_moe(cfg: ExperimentConfig, train: Cohort, bank: ClassifierBank,
                    paths: RunPaths) -> MoEGate:
    splits = training_splits(train, cfg.schedule)
    res = train_moe(splits.policy, splits.val, bank, cfg.schedule)
    ckpt.save_gate(res.gate, paths.moe, {"seed": cfg.seed, "best_epoch": res.best_epoch})
    return res.gate


def stage_train_dynmm(cfg: ExperimentConfig, train: Cohort, bank: ClassifierBank,
                      paths: RunPaths) -> DynMMGate:
    splits = training_splits(train, cfg.schedule)
    res = train_dynmm(splits.policy, splits.val, bank, cfg.schedule)
    ckpt.save_gate(res.gate, paths.dynmm, {"seed": cfg.seed, "best_epoch": res.best_epoch})
    return res.gate


@dataclass
class MethodPredictions:
    """Test-set predictions and mean per-record FLOPs for every method."""

    predictions: dict[str, np.ndarray]
    flops: dict[str, float]
    trajectories: list = field(default_factory=list)


def _combo_ok(combo, available) -> bool:
    return all(available[m] for m in combo.modalities)


def predict_methods(bank: ClassifierBank, test: Cohort, available=(True, True, True),
                    net: AdaFuseNetwork | None = None, moe: MoEGate | None = None,
                    dynmm: DynMMGate | None = None) -> MethodPredictions:
    """Run every available method on ``test``; combos needing a missing modality are skipped."""
    hs = bank.encode_all(test.modalities)
    preds, flops = {}, {}
    ok = np.array([_combo_ok(c, available) for c in COMBOS])
    for k, combo in enumerate(COMBOS):
        if ok[k]:
            preds[combo.name] = bank.predict_encoded(k, hs)
            flops[combo.name] = float(bank.combo_flops(k))
    h_cat = np.concatenate(hs, axis=1)
    if moe is not None or dynmm is not None:
        expert = bank.expert_predictions(hs)
    if moe is not None:
        w = moe.forward(h_cat)[0] * ok
        w = w / w.sum(axis=1, keepdims=True)
        preds["moe"] = moe_combine(w, expert)
        flops["moe"] = float(moe_flops(bank, moe))
    if dynmm is not None:
        logits = np.where(ok, dynmm.logits(h_cat), -np.inf)
        choice = np.argmax(logits, axis=1)
        preds["dynmm"] = expert[np.arange(len(test)), choice]
        flops["dynmm"] = float(np.mean([dynmm_flops(bank, dynmm, int(c)) for c in choice]))
    trajs = []
    if net is not None:
        p, ro = greedy_predict(net, test, available)
        preds["adafuse"] = p
        flops["adafuse"] = float(rollout_flops(net, ro).mean())
        trajs = ro.trajectories(test.ids)
    return MethodPredictions(preds, flops, trajs)


def stage_evaluate(cfg: ExperimentConfig, test: Cohort, paths: RunPaths,
                   reference: str = "adafuse") -> EvalReport:
    bank, _ = ckpt.load_bank(require(paths.bank, "baseline checkpoint"))
    net = ckpt.load_adafuse(require(paths.adafuse, "AdaFuse checkpoint"))[0] \
        if paths.adafuse.exists() or reference == "adafuse" else None
    moe = ckpt.load_gate(paths.moe, "moe")[0] if paths.moe.exists() else None
    dyn = ckpt.load_gate(paths.dynmm, "dynmm")[0] if paths.dynmm.exists() else None
    mp = predict_methods(bank, test, available_mask(cfg.scenario), net, moe, dyn)
    if reference not in mp.predictions:
        raise ValueError(f"reference method {reference!r} has no predictions")
    report = evaluate_methods(mp.predictions, test.y, {k: v / 1e6 for k, v in mp.flops.items()},
                              reference=reference, iters=cfg.bootstrap_iters, seed=cfg.seed)
    write_report_csv(report, paths.report)
    names, corr = prediction_correlation(mp.predictions)
    write_correlation_csv(names, corr, paths.correlation)
    if mp.trajectories:
        write_trajectories(mp.trajectories, paths.trajectories)
        report.policy = policy_report(mp.trajectories)
    return report


def stage_analyze_policy(paths: RunPaths):
    trajs = read_trajectories(require(paths.trajectories, "trajectory dump"))
    stats = policy_report(trajs)
    write_policy_csv(stats, paths.policy_combos, paths.policy_skips)
    return stats


# ---------------------------------------------------------------------------
# Ablation grids
# ---------------------------------------------------------------------------

OBJECTIVE_GRID = (
    ("default", LossConfig(0.1, 0.3), RewardConfig(0.7, 0.3)),
    ("no-supervision", LossConfig(0.1, 0.0), RewardConfig(0.7, 0.3)),
    ("no-entropy", LossConfig(0.0, 0.3), RewardConfig(0.7, 0.3)),
    ("pg-only", LossConfig(0.0, 0.0), RewardConfig(0.7, 0.3)),
    ("sup-1.0", LossConfig(0.1, 1.0), RewardConfig(0.7, 0.3)),
    ("auc-reward", LossConfig(0.1, 0.3), RewardConfig(0.0, 1.0)),
    ("bce-reward", LossConfig(0.1, 0.3), RewardConfig(1.0, 0.0)),
)


@dataclass
class AblationRow:
    label: str
    val_auc: float
    test_auc: float
    n_combos: int
    skip_rates: tuple[float, float, float]
    mflops: float


def run_ablation_cell(cfg: ExperimentConfig, train: Cohort, test: Cohort, bank: ClassifierBank,
                      label: str, freeze=None, reward=None, loss=None) -> AblationRow:
    res = fit_adafuse(cfg, train, bank, freeze, reward, loss)
    p, ro = greedy_predict(res.net, test, available_mask(cfg.scenario))
    stats = policy_report(ro.trajectories())
    support = sum(1 for v in stats.histogram.values() if v > 0)
    return AblationRow(label, res.best_val_auc, auc(p, test.y), support, stats.skip_rates,
                       float(rollout_flops(res.net, ro).mean()) / 1e6)


def ablation_rows(cfg: ExperimentConfig, train: Cohort, test: Cohort, bank: ClassifierBank,
                  grid: str) -> list[AblationRow]:
    rows = []
    if grid == "freeze":
        for fc in FREEZE_GRID:
            rows.append(run_ablation_cell(cfg, train, test, bank, fc.label, freeze=fc))
    elif grid == "objective":
        for label, loss, reward in OBJECTIVE_GRID:
            rows.append(run_ablation_cell(cfg, train, test, bank, label, reward=reward, loss=loss))
    else:
        raise ValueError(f"unknown ablation grid {grid!r}; expected 'freeze' or 'objective'")
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: Path) -> None:
    best = max(r.test_auc for r in rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "val_auc", "test_auc", "delta_pct", "n_combos",
                    "skip_A", "skip_B", "skip_C", "mflops"])
        for r in rows:
            w.writerow([r.label, _fmt(r.val_auc), _fmt(r.test_auc),
                        _fmt(100.0 * (r.test_auc - best) / best), r.n_combos,
                        *(_fmt(s) for s in r.skip_rates), _fmt(r.mflops)])


def stage_ablate(cfg: ExperimentConfig, train: Cohort, test: Cohort, paths: RunPaths,
                 grid: str) -> list[AblationRow]:
    bank, _ = ckpt.load_bank(require(paths.bank, "baseline checkpoint"))
    rows = ablation_rows(cfg, train, test, bank, grid)
    write_ablation_csv(rows, paths.ablation(grid))
    return rows


def load_data(paths: RunPaths) -> tuple[Cohort, Cohort]:
    return (read_dataset(require(paths.train, "training dataset")),
            read_dataset(require(paths.test, "test dataset")))


def run_quickstart(cfg: ExperimentConfig, root: str | Path) -> RunPaths:
    """generate-data -> train-baselines -> train-adafuse -> train-moe -> train-dynmm
    -> evaluate -> analyze-policy, all inside ``root``."""
    paths = RunPaths(Path(root)).make()
    cfg.save(paths.config)
    t0 = time.perf_counter()
    stage_generate(cfg, paths)
    train, test = load_data(paths)
    bank = stage_train_baselines(cfg, train, paths)
    stage_train_adafuse(cfg, train, bank, paths)
    stage_train_moe(cfg, train, bank, paths)
    stage_train_dynmm(cfg, train, bank, paths)
    stage_evaluate(cfg, test, paths)
    stage_analyze_policy(paths)
    logger.info("quickstart finished in %.1fs", time.perf_counter() - t0)
    return paths
