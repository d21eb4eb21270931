"""Run-directory orchestration shared by the command line: training runs,
evaluation tables, paired comparisons and static reports."""

from __future__ import annotations

import csv
import html
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import __version__
from .dataset import N_FOLDS, FoldPlan, Sample, load_dataset, make_fold_plan, resize_sample
from .metrics import (
    PER_IMAGE_METRICS,
    FOLD_METRICS,
    MetricsRecord,
    evaluate_fold,
    summarize_folds,
    wilcoxon_signed_rank,
)
from .model import ARCHITECTURE_OF, VARIANTS, Checkpoint, ModelSpec
from .saliency_filter import ConfidenceParams
from .trainer import TrainConfig, fold_dir, predict, prepare_saliency, run_cross_validation, to_tensors

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PLAN = "plan.json"
PER_IMAGE_COLUMNS = ("id", "fold", "variant") + PER_IMAGE_METRICS
PER_FOLD_COLUMNS = ("fold", "variant") + FOLD_METRICS
COMPARE_METRICS = PER_IMAGE_METRICS
COMPARE_COLUMNS = ("metric", "model_a", "model_b", "p_value", "significant", "n_pairs", "display", "note")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    dataset_root: str
    out_dir: str
    variants: list[str]
    fold_seed: int
    train_config: dict
    filter_params: dict
    model: dict
    config_path: str | None = None
    ids_file: str | None = None
    tool_version: str = __version__
    created: str = field(default_factory=_now)
    updated: str = field(default_factory=_now)
    artifacts: list[str] = field(default_factory=list)

    def save(self) -> Path:
        self.updated = _now()
        self.artifacts = sorted(set(self.artifacts))
        path = Path(self.out_dir) / MANIFEST
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"{run_dir}: no {MANIFEST}; is this a training run directory?")
        return cls(**json.loads(path.read_text()))

    def add(self, *paths: Path) -> None:
        root = Path(self.out_dir)
        self.artifacts.extend(str(Path(p).relative_to(root)) for p in paths)

    def spec_for(self, variant: str) -> ModelSpec:
        return ModelSpec(variant=ARCHITECTURE_OF[variant], **self.model)


def read_ids(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def load_samples(root: str | Path, side: int, ids_file: str | Path | None = None) -> list[Sample]:
    samples = load_dataset(root)
    if ids_file is not None:
        wanted = set(read_ids(ids_file))
        unknown = wanted - {s.id for s in samples}
        if unknown:
            raise ValueError(f"{ids_file}: ids not in dataset: {sorted(unknown)[:5]}")
        samples = [s for s in samples if s.id in wanted]
    return [resize_sample(s, side) for s in samples]


def train_run(
    dataset_root: str | Path,
    out_dir: str | Path,
    variants: Sequence[str],
    *,
    spec_kwargs: dict | None = None,
    train_config: TrainConfig = TrainConfig(),
    fold_seed: int = 0,
    n_folds: int = N_FOLDS,
    filter_params: ConfidenceParams = ConfidenceParams(),
    ids_file: str | Path | None = None,
    config_path: str | Path | None = None,
    resume: bool = False,
    samples: Sequence[Sample] | None = None,
) -> RunManifest:
    """Cross-validate each variant and record everything in ``<out>/manifest.json``."""
    out_dir = Path(out_dir)
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    spec_kwargs = dict(spec_kwargs or {})
    spec_kwargs.setdefault("input_side", 256)
    ModelSpec(**spec_kwargs)  # validate before touching the disk
    if samples is None:
        samples = load_samples(dataset_root, spec_kwargs["input_side"], ids_file)
    ids = [s.id for s in samples]

    plan_path = out_dir / PLAN
    manifest_path = out_dir / MANIFEST
    if resume and manifest_path.exists():
        manifest = RunManifest.load(out_dir)
        plan = FoldPlan.load(plan_path)
        if set(plan.ids) != set(ids):
            raise ValueError(f"{plan_path}: fold plan does not match the dataset being resumed")
        if manifest.train_config != train_config.to_dict() or manifest.model != spec_kwargs:
            raise ValueError("resume requested with a different model or training configuration")
        manifest.variants = sorted(set(manifest.variants) | set(variants), key=VARIANTS.index)
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
        plan = make_fold_plan(ids, fold_seed, n_folds)
        plan.save(plan_path)
        manifest = RunManifest(
            dataset_root=str(dataset_root),
            out_dir=str(out_dir),
            variants=list(variants),
            fold_seed=fold_seed,
            train_config=train_config.to_dict(),
            filter_params=asdict(filter_params),
            model=spec_kwargs,
            config_path=str(config_path) if config_path else None,
            ids_file=str(ids_file) if ids_file else None,
        )
        manifest.add(plan_path)
    manifest.save()

    for variant in variants:
        spec = manifest.spec_for(variant)
        for fold in range(1, plan.n_folds + 1):
            run_cross_validation(
                spec, train_config, plan, samples,
                variant=variant, out_dir=out_dir, resume=resume, folds=[fold],
                filter_params=filter_params,
            )
            d = fold_dir(out_dir, variant, fold)
            manifest.add(d / "best.ckpt", d / "record.json")
            manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# Evaluation

Predictor = Callable[[str, int, Sequence[Sample]], Sequence[np.ndarray]]


def checkpoint_predictor(run_dir: str | Path, manifest: RunManifest) -> Predictor:
    def predict_fold(variant: str, fold: int, samples: Sequence[Sample]):
        path = fold_dir(run_dir, variant, fold) / "best.ckpt"
        if not path.exists():
            raise FileNotFoundError(f"{path}: checkpoint missing")
        ckpt = Checkpoint.load(path)
        expected = manifest.spec_for(variant)
        if ckpt.spec != expected:
            raise ValueError(f"{path}: checkpoint spec {ckpt.spec} does not match run spec {expected}")
        model = ckpt.build()
        images, _, saliency = to_tensors(samples)
        with torch.no_grad():
            probs = predict(model, images, saliency)
        return [p[0].numpy().astype(np.float64) for p in probs]

    return predict_fold


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(round(x, 10))
    return str(x)


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})
    return path


def _save_probability_png(prob: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(prob * 255.0), 0, 255).astype(np.uint8)).save(path)


def evaluate_run(
    run_dir: str | Path,
    *,
    dataset_root: str | Path | None = None,
    variants: Sequence[str] | None = None,
    predictor: Predictor | None = None,
    samples: Sequence[Sample] | None = None,
) -> dict:
    """Score every fold's test split with that fold's checkpoint.

    Writes ``<variant>/per_image.csv`` and ``<variant>/predictions/*.png`` per
    variant, plus run-level ``per_fold.csv``, ``summary.csv`` and ``summary.md``.
    Returns ``{variant: {metric: (mean, std)}}``.
    """
    run_dir = Path(run_dir)
    manifest = RunManifest.load(run_dir)
    plan = FoldPlan.load(run_dir / PLAN)
    variants = list(variants or manifest.variants)
    side = manifest.model["input_side"]
    if samples is None:
        samples = load_samples(dataset_root or manifest.dataset_root, side, manifest.ids_file)
    by_id = {s.id: s for s in samples}
    missing = sorted(set(plan.ids) - set(by_id))
    if missing:
        raise ValueError(f"dataset lacks {len(missing)} planned ids, e.g. {missing[:5]}")
    predictor = predictor or checkpoint_predictor(run_dir, manifest)
    params = ConfidenceParams(**manifest.filter_params)

    fold_rows, summary = [], {}
    for variant in variants:
        image_rows, fold_records = [], []
        for fold in range(1, plan.n_folds + 1):
            _, _, test_ids = plan.split(fold)
            test = prepare_saliency([by_id[i] for i in test_ids], variant, params)
            probs = predictor(variant, fold, test)
            if len(probs) != len(test):
                raise ValueError(f"{variant} fold {fold}: {len(probs)} predictions for {len(test)} images")
            per_image, fold_record = evaluate_fold(probs, [s.mask for s in test])
            for s, prob, rec in zip(test, probs, per_image):
                image_rows.append({"id": s.id, "fold": fold, "variant": variant, **_metric_dict(rec)})
                png = run_dir / variant / "predictions" / f"{s.id}.png"
                _save_probability_png(prob, png)
                manifest.add(png)
            fold_records.append(fold_record)
            fold_rows.append({"fold": fold, "variant": variant, **_metric_dict(fold_record)})
        image_rows.sort(key=lambda r: r["id"])
        path = _write_csv(run_dir / variant / "per_image.csv", PER_IMAGE_COLUMNS, image_rows)
        manifest.add(path)
        summary[variant] = summarize_folds(fold_records)

    manifest.add(_write_csv(run_dir / "per_fold.csv", PER_FOLD_COLUMNS, fold_rows))
    summary_rows = [
        {"variant": v, **{f"{m}_mean": s[m][0] for m in FOLD_METRICS}, **{f"{m}_std": s[m][1] for m in FOLD_METRICS}}
        for v, s in summary.items()
    ]
    cols = ["variant"] + [f"{m}_{k}" for m in FOLD_METRICS for k in ("mean", "std")]
    manifest.add(_write_csv(run_dir / "summary.csv", cols, summary_rows))
    md = run_dir / "summary.md"
    md.write_text(format_summary_table(summary))
    manifest.add(md)
    manifest.save()
    return summary


def _metric_dict(rec: MetricsRecord) -> dict:
    return {m: getattr(rec, m) for m in FOLD_METRICS}


def format_summary_table(summary: dict) -> str:
    """Markdown table of cross-fold mean (std) per variant and metric."""
    head = "| Model | " + " | ".join(m.upper().replace("_", "-") for m in FOLD_METRICS) + " |"
    lines = [head, "|" + "---|" * (len(FOLD_METRICS) + 1)]
    for variant, stats in summary.items():
        cells = [f"{stats[m][0]:.3f} (± {stats[m][1]:.3f})" for m in FOLD_METRICS]
        lines.append(f"| {variant} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Paired comparison


def read_per_image(path: str | Path) -> tuple[str, dict[str, dict[str, float]]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    missing = set(PER_IMAGE_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    variants = sorted({r["variant"] for r in rows})
    name = variants[0] if len(variants) == 1 else Path(path).stem
    table = {}
    for r in rows:
        if r["id"] in table:
            raise ValueError(f"{path}: duplicate id {r['id']}")
        table[r["id"]] = {m: float(r[m]) if r[m] not in ("", "nan") else math.nan for m in PER_IMAGE_METRICS}
    return name, table


def format_p(p: float, significant: bool) -> str:
    text = "P < 0.0001" if p < 1e-4 else f"P = {p:.4f}"
    return text + ("*" if significant else "")


def compare_per_image(path_a: str | Path, path_b: str | Path) -> list[dict]:
    """Wilcoxon signed-rank test per metric on images paired by id.

    Metrics whose test is undefined (for example all differences zero) get a
    row with an empty p-value and the reason in ``note``.
    """
    name_a, a = read_per_image(path_a)
    name_b, b = read_per_image(path_b)
    if name_a == name_b:
        name_a, name_b = f"{name_a} ({Path(path_a).parent.name})", f"{name_b} ({Path(path_b).parent.name})"
    only_a, only_b = sorted(set(a) - set(b)), sorted(set(b) - set(a))
    if only_a or only_b:
        raise ValueError(f"unmatched ids: only in A {only_a[:10]}, only in B {only_b[:10]}")
    ids = sorted(a)
    rows = []
    for metric in COMPARE_METRICS:
        pairs = [(a[i][metric], b[i][metric]) for i in ids]
        pairs = [(x, y) for x, y in pairs if not (math.isnan(x) or math.isnan(y))]
        row = {"metric": metric, "model_a": name_a, "model_b": name_b}
        try:
            res = wilcoxon_signed_rank([x for x, _ in pairs], [y for _, y in pairs],
                                       metric=metric, model_a=name_a, model_b=name_b)
        except ValueError as exc:
            row.update(n_pairs=len(pairs), note=str(exc))
        else:
            row.update(p_value=res.p_value, significant=int(res.significant), n_pairs=res.n_pairs,
                       display=format_p(res.p_value, res.significant), note=res.method)
        rows.append(row)
    return rows


def write_comparison(rows: Sequence[dict], path: str | Path) -> Path:
    return _write_csv(Path(path), COMPARE_COLUMNS, rows)


# ---------------------------------------------------------------------------
# Static report

LABEL_H = 14


def _tile(arr: np.ndarray | None, side: int, label: str) -> Image.Image:
    tile = Image.new("L", (side, side + LABEL_H), 0)
    if arr is not None:
        tile.paste(Image.fromarray(np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)), (0, LABEL_H))
    ImageDraw.Draw(tile).text((2, 1), label, fill=255)
    return tile


def report_run(run_dir: str | Path, *, dataset_root: str | Path | None = None) -> dict:
    """Write one panel per test image (image | truth | saliency | predictions)
    and an HTML summary under ``<run>/report``. Missing pieces are listed, not fatal."""
    run_dir = Path(run_dir)
    out = run_dir / "report"
    panels = out / "panels"
    panels.mkdir(parents=True, exist_ok=True)
    problems: list[str] = []

    try:
        manifest = RunManifest.load(run_dir)
        side = manifest.model["input_side"]
        root = dataset_root or manifest.dataset_root
        variants = manifest.variants
        ids_file = manifest.ids_file
    except FileNotFoundError as exc:
        problems.append(str(exc))
        manifest, side, root, variants, ids_file = None, None, dataset_root, list(VARIANTS), None

    samples = []
    if root is not None:
        try:
            samples = load_dataset(root)
            if ids_file:
                keep = set(read_ids(ids_file))
                samples = [s for s in samples if s.id in keep]
            if side:
                samples = [resize_sample(s, side) for s in samples]
        except (OSError, ValueError) as exc:
            problems.append(f"dataset unavailable: {exc}")
    present = [v for v in variants if (run_dir / v / "predictions").is_dir()]
    for v in variants:
        if v not in present:
            problems.append(f"no predictions for {v}; run evaluate first")

    written = []
    for s in samples:
        preds = {}
        for v in present:
            p = run_dir / v / "predictions" / f"{s.id}.png"
            if p.exists():
                preds[v] = np.asarray(Image.open(p), dtype=np.float64) / 255.0
        if not preds:
            continue
        side_px = s.shape[0]
        tiles = [_tile(s.image, side_px, "image"), _tile(s.mask.astype(float), side_px, "truth"),
                 _tile(s.saliency, side_px, "saliency")]
        tiles += [_tile(preds.get(v), side_px, v) for v in present]
        panel = Image.new("L", (side_px * len(tiles) + 2 * (len(tiles) - 1), side_px + LABEL_H), 64)
        for k, t in enumerate(tiles):
            panel.paste(t, (k * (side_px + 2), 0))
        path = panels / f"{s.id}.png"
        panel.save(path)
        written.append(path)

    summary_md = run_dir / "summary.md"
    table = summary_md.read_text() if summary_md.exists() else ""
    if not table:
        problems.append("summary.md missing; run evaluate first")
    parts = ["<!doctype html><html><head><meta charset='utf-8'><title>Segmentation report</title></head><body>",
             f"<h1>{html.escape(run_dir.name)}</h1>"]
    if table:
        parts.append("<h2>Cross-validation summary</h2><pre>" + html.escape(table) + "</pre>")
    if problems:
        parts.append("<h2>Missing inputs</h2><ul>" + "".join(f"<li>{html.escape(p)}</li>" for p in problems) + "</ul>")
    parts.append(f"<h2>Panels ({len(written)})</h2>")
    parts += [f"<div><img src='panels/{p.name}' alt='{html.escape(p.stem)}'></div>" for p in written]
    parts.append("</body></html>\n")
    (out / "index.html").write_text("\n".join(parts))
    if manifest is not None:
        manifest.add(out / "index.html", *written)
        manifest.save()
    return {"panels": len(written), "problems": problems, "index": out / "index.html"}
