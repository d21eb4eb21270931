"""Directional synthetic experiment: U-Net against U-Net-SA under 5-fold CV
for several seeds, plus the replicate comparison used for determinism checks."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dataset import N_FOLDS, SyntheticConfig, generate_synthetic, save_dataset
from .pipeline import evaluate_run, train_run
from .trainer import TrainConfig, TrainRecord, fold_dir

log = logging.getLogger(__name__)

RESULT_FILE = "experiment.json"
COMPARED_FILES = ("per_fold.csv", "summary.csv", "summary.md")


@dataclass(frozen=True)
class ExperimentConfig:
    count: int = 200
    size: int = 128
    quality_mix: tuple[float, float, float, float] = (0.7, 0.2, 0.1, 0.0)
    data_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("unet", "unet-sa")
    learning_rate: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 10
    patience: int = 4
    min_sa_dsc: float = 0.85
    fpr_margin: float = 0.005
    min_seeds_fpr: int = 2
    time_budget_s: float = 4 * 3600.0

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           patience=self.patience, max_epochs=self.max_epochs, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quality_mix"] = list(self.quality_mix)
        d["seeds"] = list(self.seeds)
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        for k in ("quality_mix", "seeds", "variants"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ExperimentResult:
    config: dict
    per_seed: dict[str, dict] = field(default_factory=dict)
    wall_time_s: float = 0.0
    cpu_time_s: float = 0.0
    mean_sa_dsc: float = float("nan")
    fpr_wins: int = 0
    dsc_ok: bool = False
    fpr_ok: bool = False
    time_ok: bool = False

    @property
    def passed(self) -> bool:
        return self.dsc_ok and self.fpr_ok and self.time_ok

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentResult":
        return cls(**json.loads(Path(path).read_text()))


def judge(cfg: ExperimentConfig, per_seed: dict[str, dict], wall_time_s: float) -> ExperimentResult:
    """Apply the DSC floor, the FPR margin vote and the time budget."""
    res = ExperimentResult(config=cfg.to_dict(), per_seed=per_seed, wall_time_s=wall_time_s)
    sa = [s["unet-sa"]["dsc"][0] for s in per_seed.values()]
    res.mean_sa_dsc = sum(sa) / len(sa)
    res.fpr_wins = sum(
        s["unet-sa"]["fpr"][0] <= s["unet"]["fpr"][0] + cfg.fpr_margin for s in per_seed.values()
    )
    res.dsc_ok = res.mean_sa_dsc >= cfg.min_sa_dsc
    res.fpr_ok = res.fpr_wins >= cfg.min_seeds_fpr
    res.time_ok = wall_time_s <= cfg.time_budget_s
    return res


def run_experiment(out_dir: str | Path, cfg: ExperimentConfig = ExperimentConfig(), resume: bool = True) -> ExperimentResult:
    """Train and evaluate every variant for every seed under ``out_dir``.

    Layout: ``data/`` (the generated dataset), ``seed<k>/`` (one training run
    each) and ``experiment.json``. With ``resume`` finished folds are reused
    and their recorded training time still counts toward the budget.
    """
    out_dir = Path(out_dir)
    start, cpu_start = time.perf_counter(), time.process_time()
    samples = generate_synthetic(SyntheticConfig(count=cfg.count, size=cfg.size,
                                                 quality_mix=cfg.quality_mix, seed=cfg.data_seed))
    data_root = out_dir / "data"
    if not (data_root / "images").is_dir():
        save_dataset(samples, data_root)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")

    per_seed, reused_time = {}, 0.0
    for seed in cfg.seeds:
        run_dir = out_dir / f"seed{seed}"
        for variant in cfg.variants:
            for fold in range(1, N_FOLDS + 1):
                rec = fold_dir(run_dir, variant, fold) / "record.json"
                if resume and rec.exists():
                    reused_time += TrainRecord.load(rec).wall_time_s
        train_run(data_root, run_dir, cfg.variants,
                  spec_kwargs={"input_side": cfg.size, "init_seed": seed},
                  train_config=cfg.train_config(seed), fold_seed=seed,
                  resume=resume and (run_dir / "manifest.json").exists(), samples=samples)
        summary = evaluate_run(run_dir, samples=samples)
        per_seed[str(seed)] = {v: {m: list(ms) for m, ms in s.items()} for v, s in summary.items()}
        log.info("seed %d: %s", seed, {v: round(s["dsc"][0], 4) for v, s in summary.items()})

    res = judge(cfg, per_seed, time.perf_counter() - start + reused_time)
    res.cpu_time_s = time.process_time() - cpu_start
    res.save(out_dir / RESULT_FILE)
    return res


def compare_replicates(dir_a: str | Path, dir_b: str | Path) -> list[str]:
    """List every difference between two experiment directories in the loss
    histories and metric CSVs of the seeds present in both. Empty means identical."""
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    cfg_a = json.loads((dir_a / "config.json").read_text())
    cfg_b = json.loads((dir_b / "config.json").read_text())
    problems = []
    for key in set(cfg_a) | set(cfg_b):
        if key != "seeds" and cfg_a.get(key) != cfg_b.get(key):
            problems.append(f"config differs in {key}: {cfg_a.get(key)} vs {cfg_b.get(key)}")
    seeds = sorted(set(cfg_a["seeds"]) & set(cfg_b["seeds"]))
    if not seeds:
        problems.append("no seeds in common")
    for seed in seeds:
        ra, rb = dir_a / f"seed{seed}", dir_b / f"seed{seed}"
        for variant in cfg_a["variants"]:
            for fold in range(1, N_FOLDS + 1):
                pa = fold_dir(ra, variant, fold) / "record.json"
                pb = fold_dir(rb, variant, fold) / "record.json"
                if not (pa.exists() and pb.exists()):
                    problems.append(f"seed {seed} {variant} fold {fold}: record missing")
                    continue
                if TrainRecord.load(pa).history != TrainRecord.load(pb).history:
                    problems.append(f"seed {seed} {variant} fold {fold}: loss histories differ")
        for name in COMPARED_FILES + tuple(f"{v}/per_image.csv" for v in cfg_a["variants"]):
            fa, fb = ra / name, rb / name
            if not (fa.exists() and fb.exists()):
                problems.append(f"seed {seed}: {name} missing")
            elif fa.read_bytes() != fb.read_bytes():
                problems.append(f"seed {seed}: {name} differs")
    return problems
