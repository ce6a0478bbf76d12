"""End-to-end experiment orchestration, sweeps, ablations and metric output.

Seed splitting
--------------
A config carries one master seed M and a replicate count R. Replicate j
uses run seed r = M + j, and ``numpy.random.SeedSequence(r).spawn(5)``
yields five children whose first 32-bit state word becomes, in order, the
encoder, styles, classifier, world and sampling seed. Every sweep or
ablation cell with the same (M, R) therefore sees identical sub-seeds.
"""

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import ARCFACE, SOFTMAX, ClassifierConfig, accuracy, save_classifier, synthesize_training_set
from .classifier import train_classifier, zero_shot_classifier
from .encoder import Arch, Vocabulary, init_encoder
from .errors import ConfigInvalid
from .styles import InitDistribution, TrainConfig, run_style_learning, save_style_bank
from .world import WorldSpec, generate_world, sample_image_features, write_samples

REPORT_FORMAT = "promptstyler-report/1"
SUB_SEEDS = ("encoder", "styles", "classifier", "world", "sampling")
DEFAULT_CLASSES = ("dog", "elephant", "giraffe", "guitar", "horse")
OUTPUT_KINDS = ("styles", "classifier", "samples")

METRIC_COLUMNS = (
    "label", "param", "value", "K", "L", "mode", "use_style_loss", "use_content_loss",
    "loss_kind", "n_seeds", "seeds",
    "trained_mean", "trained_sd", "trained_se",
    "zero_shot_mean", "zero_shot_sd", "zero_shot_se",
    "trained_per_seed", "zero_shot_per_seed",
    "peak_style_content_features", "config_digest",
)


def sub_seeds(run_seed):
    children = np.random.SeedSequence(run_seed).spawn(len(SUB_SEEDS))
    return {name: int(c.generate_state(1, np.uint32)[0]) for name, c in zip(SUB_SEEDS, children)}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    seeds: int = 3
    class_names: tuple = DEFAULT_CLASSES
    encoder: Arch = field(default_factory=Arch)
    # the per-replicate seed fields of these three are overwritten from sub_seeds()
    styles: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    world: WorldSpec = field(default_factory=WorldSpec)
    outputs: tuple = ()

    def to_dict(self):
        """Canonical JSON-ready form; derived seed fields are left out."""
        styles = self.styles.to_dict()
        styles.pop("seed")
        clf = dataclasses.asdict(self.classifier)
        clf.pop("seed")
        world = self.world.to_dict()
        world.pop("seed")
        world.pop("N")
        return {
            "seed": self.seed,
            "seeds": self.seeds,
            "class_names": list(self.class_names),
            "encoder": dataclasses.asdict(self.encoder),
            "styles": styles,
            "classifier": clf,
            "world": world,
            "outputs": {k: k in self.outputs for k in OUTPUT_KINDS},
        }

    def digest(self):
        return _sha256_json(self.to_dict())

    def replace(self, **changes):
        """Copy with top-level or ``styles``/``classifier`` field overrides."""
        own = _field_names(ExperimentConfig)
        styles = {k: changes.pop(k) for k in list(changes) if k not in own and k in _field_names(TrainConfig)}
        clf = {k: changes.pop(k) for k in list(changes) if k not in own and k in _field_names(ClassifierConfig)}
        cfg = dataclasses.replace(self, **changes)
        if styles:
            cfg = dataclasses.replace(cfg, styles=dataclasses.replace(cfg.styles, **styles))
        if clf:
            cfg = dataclasses.replace(cfg, classifier=dataclasses.replace(cfg.classifier, **clf))
        return cfg

    def validate(self):
        return config_from_dict(self.to_dict())


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_value(path, value, default, problems):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "a boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "a number"
    else:
        ok = isinstance(value, str)
        want = "a string"
    if not ok:
        problems[path] = f"expected {want}, got {value!r}"
    return ok


def _section(raw, path, cls, skip, problems):
    """Build dataclass ``cls`` from ``raw``; unknown or mistyped keys are recorded."""
    if not isinstance(raw, dict):
        problems[path] = "expected an object"
        return None
    defaults = cls()
    allowed = _field_names(cls) - set(skip)
    values = {}
    for key, value in raw.items():
        if key not in allowed:
            problems[f"{path}.{key}"] = "unknown key"
        elif _check_value(f"{path}.{key}", value, getattr(defaults, key), problems):
            values[key] = float(value) if isinstance(getattr(defaults, key), float) else value
    try:
        obj = cls(**values)
        obj.validate()
    except ValueError as exc:
        problems.setdefault(path, str(exc))
        return None
    return obj


def config_from_dict(raw):
    """Strict parse: every problem found is reported at once in ``ConfigInvalid``."""
    problems = {}
    if not isinstance(raw, dict):
        raise ConfigInvalid({"": "config must be a JSON object"})
    top = {"seed", "seeds", "class_names", "encoder", "styles", "classifier", "world", "outputs"}
    for key in raw:
        if key not in top:
            problems[key] = "unknown key"
    seed = raw.get("seed", 0)
    _check_value("seed", seed, 0, problems)
    seeds = raw.get("seeds", 3)
    if _check_value("seeds", seeds, 0, problems) and seeds < 1:
        problems["seeds"] = "must be >= 1"

    names = raw.get("class_names", list(DEFAULT_CLASSES))
    if not (isinstance(names, list) and names and all(isinstance(n, str) and n for n in names)):
        problems["class_names"] = "expected a nonempty list of nonempty strings"
    else:
        try:
            Vocabulary.build(names)
        except ValueError as exc:
            problems["class_names"] = str(exc)

    encoder = _section(raw.get("encoder", {}), "encoder", Arch, (), problems)

    styles_raw = raw.get("styles", {})
    init = InitDistribution()
    if isinstance(styles_raw, dict) and "init" in styles_raw:
        styles_raw = dict(styles_raw)
        init = _section(styles_raw.pop("init"), "styles.init", InitDistribution, (), problems)
    styles = _section(styles_raw, "styles", TrainConfig, ("seed", "init"), problems)
    if styles is not None and init is not None:
        styles = dataclasses.replace(styles, init=init)

    clf = _section(raw.get("classifier", {}), "classifier", ClassifierConfig, ("seed",), problems)
    world = _section(raw.get("world", {}), "world", WorldSpec, ("seed", "N"), problems)

    outputs = raw.get("outputs", {})
    chosen = ()
    if not isinstance(outputs, dict):
        problems["outputs"] = "expected an object"
    else:
        for key, value in outputs.items():
            if key not in OUTPUT_KINDS:
                problems[f"outputs.{key}"] = "unknown key"
            elif _check_value(f"outputs.{key}", value, True, problems) and value:
                chosen += (key,)

    if problems:
        raise ConfigInvalid(problems)
    return ExperimentConfig(seed, seeds, tuple(names), encoder, styles, clf, world,
                            tuple(k for k in OUTPUT_KINDS if k in chosen))


def load_config(path):
    """Read a JSON config; malformed JSON is reported as ``ConfigInvalid``."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid({"": f"not valid JSON: {exc}"}) from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# single experiment


@dataclass
class SeedRun:
    seed: int
    seeds: dict
    trained_accuracy: float
    zero_shot_accuracy: float
    bank: object
    classifier: object
    samples: object

    def to_dict(self):
        return {
            "seed": self.seed,
            "sub_seeds": self.seeds,
            "trained_accuracy": self.trained_accuracy,
            "zero_shot_accuracy": self.zero_shot_accuracy,
            "style_losses": self.bank.style_losses.tolist(),
            "content_losses": self.bank.content_losses.tolist(),
            "peak_style_content_features": self.bank.peak_style_content_features,
        }


def summarize(values):
    """Mean, sample standard deviation and standard error (both 0 for one value)."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(v))
    sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
    return {"mean": mean, "sd": sd, "se": sd / math.sqrt(len(v))}


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    runs: list
    wall_clock_seconds: float = 0.0

    @property
    def trained(self):
        return summarize([r.trained_accuracy for r in self.runs])

    @property
    def zero_shot(self):
        return summarize([r.zero_shot_accuracy for r in self.runs])

    @property
    def peak_style_content_features(self):
        return max(r.bank.peak_style_content_features for r in self.runs)

    def payload(self):
        """Deterministic part of the report (everything except wall-clock)."""
        return {
            "format": REPORT_FORMAT,
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "per_seed": [r.to_dict() for r in self.runs],
            "trained_accuracy": self.trained,
            "zero_shot_accuracy": self.zero_shot,
            "peak_style_content_features": self.peak_style_content_features,
        }

    def digest(self):
        return _sha256_json(self.payload())

    def to_json(self):
        doc = self.payload()
        doc["digest"] = self.digest()
        doc["wall_clock_seconds"] = self.wall_clock_seconds
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run_single(config, run_seed):
    seeds = sub_seeds(run_seed)
    names = list(config.class_names)
    vocab = Vocabulary.build(names)
    encoder = init_encoder(seeds["encoder"], config.encoder, vocab)
    bank = run_style_learning(encoder, names, dataclasses.replace(config.styles, seed=seeds["styles"]))
    data = synthesize_training_set(encoder, bank, names)
    clf = train_classifier(data, dataclasses.replace(config.classifier, seed=seeds["classifier"]),
                           num_classes=len(names))
    world_spec = dataclasses.replace(config.world, seed=seeds["world"])
    world = generate_world(encoder, names, world_spec)
    samples = sample_image_features(world, world_spec, seed=seeds["sampling"])
    return SeedRun(
        seed=run_seed,
        seeds=seeds,
        trained_accuracy=accuracy(clf, samples.features, samples.labels),
        zero_shot_accuracy=accuracy(zero_shot_classifier(encoder, names), samples.features, samples.labels),
        bank=bank,
        classifier=clf,
        samples=samples,
    )


def run_experiment(config):
    """Full pipeline for every replicate seed of ``config``."""
    config = config.validate()
    start = time.perf_counter()
    runs = [run_single(config, config.seed + j) for j in range(config.seeds)]
    return ExperimentReport(config, runs, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# sweeps and ablations


@dataclass
class Cell:
    label: str
    param: str
    value: object
    report: ExperimentReport


@dataclass
class Table:
    kind: str
    cells: list
    wall_clock_seconds: float = 0.0

    def payload(self):
        return {
            "format": REPORT_FORMAT,
            "kind": self.kind,
            "cells": [
                {"label": c.label, "param": c.param, "value": c.value, "report": c.report.payload()}
                for c in self.cells
            ],
        }

    def to_json(self):
        doc = self.payload()
        doc["digest"] = _sha256_json(doc)
        doc["wall_clock_seconds"] = self.wall_clock_seconds
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run_cells(configs, workers=1):
    """Run independent experiments, optionally across processes; order is kept."""
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_experiment, configs))
    return [run_experiment(c) for c in configs]


def run_sweep(base, param, values, workers=1):
    if param not in ("K", "L"):
        raise ConfigInvalid({"param": f"sweep parameter must be K or L, got {param!r}"})
    values = list(values)
    problems = {}
    if not values:
        problems["values"] = "need at least one value"
    elif any(not isinstance(v, int) or isinstance(v, bool) or v < 1 for v in values):
        problems["values"] = "values must be positive integers"
    elif any(b <= a for a, b in zip(values, values[1:])):
        problems["values"] = "values must be strictly ascending"
    if problems:
        raise ConfigInvalid(problems)
    start = time.perf_counter()
    reports = run_cells([base.replace(**{param: v}) for v in values], workers)
    cells = [Cell(f"{param}={v}", param, v, r) for v, r in zip(values, reports)]
    return Table("sweep", cells, time.perf_counter() - start)


ABLATION_ROWS = (
    ("style+content", True, True),
    ("style only", True, False),
    ("content only", False, True),
    ("neither", False, False),
)


def run_ablation_grid(base, workers=1):
    """Loss-flag grid (4 rows) then classifier-loss rows (softmax, arcface).

    The arcface row is the same effective config as the style+content row, so
    it is computed once and listed twice.
    """
    start = time.perf_counter()
    configs = [base.replace(use_style_loss=s, use_content_loss=c) for _, s, c in ABLATION_ROWS]
    full = configs[0]
    configs.append(full.replace(loss_kind=SOFTMAX))
    reports = run_cells(configs, workers)
    cells = [Cell(label, "losses", label, r) for (label, _, _), r in zip(ABLATION_ROWS, reports)]
    cells.append(Cell("softmax", "loss_kind", SOFTMAX, reports[4]))
    arc = reports[0] if full.classifier.loss_kind == ARCFACE else run_experiment(full.replace(loss_kind=ARCFACE))
    cells.append(Cell("arcface", "loss_kind", ARCFACE, arc))
    return Table("ablation", cells, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# output


def _fmt(x):
    return repr(float(x))


def metrics_row(label, param, value, report):
    cfg = report.config
    trained, zs = report.trained, report.zero_shot
    return {
        "label": label,
        "param": param,
        "value": value,
        "K": cfg.styles.K,
        "L": cfg.styles.L,
        "mode": cfg.styles.mode,
        "use_style_loss": int(cfg.styles.use_style_loss),
        "use_content_loss": int(cfg.styles.use_content_loss),
        "loss_kind": cfg.classifier.loss_kind,
        "n_seeds": len(report.runs),
        "seeds": ";".join(str(r.seed) for r in report.runs),
        "trained_mean": _fmt(trained["mean"]),
        "trained_sd": _fmt(trained["sd"]),
        "trained_se": _fmt(trained["se"]),
        "zero_shot_mean": _fmt(zs["mean"]),
        "zero_shot_sd": _fmt(zs["sd"]),
        "zero_shot_se": _fmt(zs["se"]),
        "trained_per_seed": ";".join(_fmt(r.trained_accuracy) for r in report.runs),
        "zero_shot_per_seed": ";".join(_fmt(r.zero_shot_accuracy) for r in report.runs),
        "peak_style_content_features": report.peak_style_content_features,
        "config_digest": cfg.digest(),
    }


def metrics_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def table_rows(result):
    if isinstance(result, ExperimentReport):
        return [metrics_row("run", "", "", result)]
    return [metrics_row(c.label, c.param, c.value, c.report) for c in result.cells]


def write_outputs(result, out_dir):
    """report.json, metrics.csv and, for single runs, any requested artifacts.

    Artifacts come from the first replicate seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(result.to_json())
    (out / "metrics.csv").write_text(metrics_csv(table_rows(result)))
    if isinstance(result, ExperimentReport):
        first = result.runs[0]
        if "styles" in result.config.outputs:
            save_style_bank(first.bank, out / "styles.bin")
        if "classifier" in result.config.outputs:
            save_classifier(first.classifier, out / "classifier.bin")
        if "samples" in result.config.outputs:
            write_samples(first.samples, out / "samples.txt")
    return out


def _sha256_json(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()
