"""Training, evaluation, and the fusion-mode ablation runner.

A run is described by a flat ``key = value`` config file (``#`` comments,
unknown keys are hard errors). All randomness is derived from one seed:
sample seeds, fold shuffling, and per-ablation-arm initialization seeds come
from sha256 of ``seed:tag`` strings, so ablation arms share data, splits,
and step budget bit-for-bit while initializing independently. Reports are
CSV with six decimal places; reruns with the same config and seed are
byte-identical on the same machine.
"""

from __future__ import annotations

import functools
import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import losses, metrics, model


class ConfigError(Exception):
    """Run config has unknown keys or out-of-range values."""


class TrainingError(Exception):
    """Training aborted (non-finite loss)."""


DEFAULT_REGIONS = (("whole", (2, 3, 4)), ("core", (3, 4)), ("center", (4,)))
STANDARD_MODES = ("early", "middle", "hybrid", "hybrid_star")


def derive_seed(seed: int, tag: str) -> int:
    """Independent but reproducible stream seed for (seed, tag)."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def parse_config_text(text: str) -> dict[str, str]:
    """Flat key = value lines; # starts a comment; duplicates are errors."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno} is not 'key = value': {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or key in out:
            raise ConfigError(f"config line {lineno}: bad or duplicate key {key!r}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    """Everything a train/eval/ablate run needs besides the output dir."""

    model: model.ModelConfig = field(default_factory=lambda: model.ModelConfig(
        num_classes=5))
    steps: int = 200
    batch_size: int = 1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    num_samples: int = 4
    sigma: float = 0.1
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    folds: int = 2
    seed: int = 0
    manifest: str | None = None
    modes: tuple[str, ...] = STANDARD_MODES
    regions: tuple[tuple[str, tuple[int, ...]], ...] = DEFAULT_REGIONS

    def validate(self) -> None:
        self.model.validate()
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ConfigError("learning_rate and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.sigma < 0:
            raise ConfigError("weight_decay and sigma must be nonnegative")
        if self.num_samples < 1 or self.folds < 2:
            raise ConfigError("need num_samples >= 1 and folds >= 2")
        for mode in self.modes:
            if mode not in STANDARD_MODES:
                raise ConfigError(f"unknown ablation mode {mode!r}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigError("spacing must be positive")

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        fields_map = parse_config_text(text)

        def take(key, default, conv):
            if key in fields_map:
                try:
                    return conv(fields_map.pop(key))
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key!r}: {exc}") from exc
            return default

        model_keys = dict(
            n=("n", 2), num_classes=("num_classes", 5),
            base_width=("base_width", 8), k_channels=("k_channels", 16),
            embed_dim=("embed_dim", 48), num_layers=("num_layers", 4),
            num_heads=("num_heads", 4), mlp_ratio=("mlp_ratio", 4),
        )
        mvals = {name: take(key, default, int)
                 for name, (key, default) in model_keys.items()}
        extents = (take("width", 32, int), take("height", 32, int),
                   take("depth", 32, int))
        fusion_mode = take("fusion_mode", "hybrid", str)
        custom = take("custom_subsets", None, lambda v: tuple(
            tuple(int(i) for i in part.split(",")) for part in v.split("|")))
        seed = take("seed", 0, int)
        cfg = cls(
            model=model.ModelConfig(extents=extents, fusion_mode=fusion_mode,
                                    seed=seed, custom_subsets=custom, **mvals),
            steps=take("steps", 200, int),
            batch_size=take("batch_size", 1, int),
            learning_rate=take("learning_rate", 1e-3, float),
            beta1=take("beta1", 0.9, float),
            beta2=take("beta2", 0.999, float),
            eps=take("eps", 1e-8, float),
            weight_decay=take("weight_decay", 0.0, float),
            num_samples=take("num_samples", 4, int),
            sigma=take("sigma", 0.1, float),
            spacing=take("spacing", (1.0, 1.0, 1.0), lambda v: tuple(
                float(x) for x in v.split(","))),
            folds=take("folds", 2, int),
            seed=seed,
            manifest=take("manifest", None, str),
            modes=take("modes", STANDARD_MODES, lambda v: tuple(
                m.strip() for m in v.split(",") if m.strip())),
            regions=take("regions", DEFAULT_REGIONS, _parse_regions),
        )
        if fields_map:
            raise ConfigError(f"unknown config keys: {sorted(fields_map)}")
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, model=replace(self.model, seed=seed))

    def adam_settings(self) -> "AdamSettings":
        return AdamSettings(self.learning_rate, self.beta1, self.beta2,
                            self.eps, self.weight_decay)


def _parse_regions(value: str) -> tuple[tuple[str, tuple[int, ...]], ...]:
    # e.g. "whole:2,3,4 core:3,4 center:4"
    out = []
    for entry in value.split():
        if ":" not in entry:
            raise ValueError(f"region entry {entry!r} is not name:classes")
        name, classes = entry.split(":", 1)
        out.append((name, tuple(int(c) for c in classes.split(","))))
    if not out:
        raise ValueError("empty region spec")
    return tuple(out)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamSettings:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, settings: AdamSettings
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One out-of-place Adam update with bias correction."""
    t = state.t + 1
    c1 = 1.0 - settings.beta1 ** t
    c2 = 1.0 - settings.beta2 ** t
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if settings.weight_decay:
            g = g + settings.weight_decay * p
        m = settings.beta1 * state.m[name] + (1.0 - settings.beta1) * g
        v = settings.beta2 * state.v[name] + (1.0 - settings.beta2) * (g * g)
        update = settings.learning_rate * (m / c1) / (np.sqrt(v / c2)
                                                      + settings.eps)
        new_params[name] = (p - update).astype(p.dtype, copy=False)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# data assembly
# ---------------------------------------------------------------------------

def build_dataset(cfg: RunConfig) -> list[tuple[str, datamod.VolumeSample]]:
    """Normalized samples, either loaded from a manifest or generated."""
    if cfg.manifest:
        loaded = datamod.load_dataset(cfg.manifest)
        out = []
        for sample_id, sample in loaded:
            padded, _ = datamod.pad_to_multiple(sample)
            if padded.extents != tuple(cfg.model.extents):
                raise ConfigError(
                    f"sample {sample_id} extents {padded.extents} do not match "
                    f"config extents {tuple(cfg.model.extents)} after padding")
            out.append((sample_id, datamod.zscore_normalize(padded)))
        return out
    out = []
    for i in range(cfg.num_samples):
        pcfg = datamod.PhantomConfig(
            n=cfg.model.n, extents=tuple(cfg.model.extents),
            num_classes=cfg.model.num_classes, sigma=cfg.sigma,
            spacing=cfg.spacing, seed=derive_seed(cfg.seed, f"sample:{i}"))
        out.append((f"phantom{i:03d}",
                    datamod.zscore_normalize(datamod.generate_phantom(pcfg))))
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    loss_rows: list[tuple[int, float]]
    checkpoint_path: str | None = None
    loss_log_path: str | None = None


def train(cfg: RunConfig, samples: Sequence[tuple[str, datamod.VolumeSample]]
          | None = None, out_dir=None) -> TrainResult:
    """Round-robin full-volume training with the combined objective.

    Writes `checkpoint.hftc` and `loss_log.csv` into out_dir when given.
    Zero steps leaves the initialization untouched.
    """
    cfg.validate()
    if samples is None:
        samples = build_dataset(cfg)
    if not samples:
        raise ConfigError("training requires at least one sample")
    params = model.init_params(cfg.model)
    state = AdamState.init(params)
    settings = cfg.adam_settings()
    loss_rows: list[tuple[int, float]] = []
    for step in range(cfg.steps):
        try:
            tape = ad.Tape()
            bound = model.bind_params(tape, params)
            terms = []
            for j in range(cfg.batch_size):
                _, sample = samples[(step * cfg.batch_size + j) % len(samples)]
                probs = model.model_forward(
                    ad.constant(sample.modalities), cfg.model, bound)
                terms.append(losses.combined_loss(probs, sample.labels))
            loss = functools.reduce(ad.add, terms)
            if len(terms) > 1:
                loss = ad.scale(loss, 1.0 / len(terms))
            value = loss.item()
            if not math.isfinite(value):
                raise ad.NonFiniteError("loss value is not finite")
            grads = ad.backward(tape, loss, list(bound.values()))
        except ad.NonFiniteError as exc:
            raise TrainingError(f"non-finite loss at step {step}: {exc}") from exc
        grad_arrays = {name: grads[bound[name]].data for name in params}
        params, state = adam_step(params, grad_arrays, state, settings)
        loss_rows.append((step, value))

    result = TrainResult(params=params, loss_rows=loss_rows)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.checkpoint_path = os.path.join(out_dir, "checkpoint.hftc")
        model.save_checkpoint(result.checkpoint_path, cfg.model, params)
        result.loss_log_path = os.path.join(out_dir, "loss_log.csv")
        with open(result.loss_log_path, "w", encoding="utf-8") as fh:
            fh.write("step,loss\n")
            for step, value in loss_rows:
                fh.write(f"{step},{value:.6f}\n")
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

REPORT_HEADER = "fold,mode,region,dice,hd95_mm,volume_similarity"


@dataclass
class ReportRow:
    fold: int
    mode: str
    region: str
    dice: float
    hd95_mm: float
    volume_similarity: float

    def csv_line(self) -> str:
        return (f"{self.fold},{self.mode},{self.region},{self.dice:.6f},"
                f"{self.hd95_mm:.6f},{self.volume_similarity:.6f}")


@dataclass
class MetricsReport:
    rows: list[ReportRow]

    def mean_rows(self) -> list[tuple[str, str, float, float, float]]:
        """Arithmetic means per (mode, region), in first-seen order."""
        groups: dict[tuple[str, str], list[ReportRow]] = {}
        for row in self.rows:
            groups.setdefault((row.mode, row.region), []).append(row)
        out = []
        for (mode, region), rows in groups.items():
            out.append((
                mode, region,
                float(np.mean([r.dice for r in rows])),
                float(np.mean([r.hd95_mm for r in rows])),
                float(np.mean([r.volume_similarity for r in rows])),
            ))
        return out

    def to_csv(self) -> str:
        lines = [REPORT_HEADER]
        lines += [row.csv_line() for row in self.rows]
        for mode, region, dice, hd, vs in self.mean_rows():
            lines.append(f"mean,{mode},{region},{dice:.6f},{hd:.6f},{vs:.6f}")
        return "\n".join(lines) + "\n"


def predict_labels(config: model.ModelConfig, params: dict[str, np.ndarray],
                   sample: datamod.VolumeSample) -> np.ndarray:
    """Argmax class volume at the sample's original extents."""
    padded, original = datamod.pad_to_multiple(sample)
    if padded.extents != tuple(config.extents):
        raise ConfigError(
            f"sample extents {padded.extents} do not match checkpoint extents "
            f"{tuple(config.extents)} after padding")
    probs = model.forward_inference(padded.modalities, config, params)
    pred = np.argmax(probs, axis=0).astype(np.uint8)
    w, h, d = original
    return pred[:w, :h, :d]


def evaluate(config: model.ModelConfig, params: dict[str, np.ndarray],
             samples: Sequence[tuple[str, datamod.VolumeSample]],
             regions: Sequence[tuple[str, Sequence[int]]] = DEFAULT_REGIONS,
             fold: int = 0, mode: str | None = None) -> MetricsReport:
    """Per-sample, per-region metric rows for one parameter set."""
    mode_name = mode if mode is not None else config.fusion_mode
    rows = []
    for _, sample in samples:
        pred = predict_labels(config, params, sample)
        metric_rows = metrics.evaluate_regions(
            pred, sample.labels, regions, config.num_classes, sample.spacing)
        for mr in metric_rows:
            rows.append(ReportRow(fold, mode_name, mr.region, mr.dice,
                                  mr.hd95_mm, mr.volume_similarity))
    return MetricsReport(rows)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATION_HEADER = "mode,encoders,params,schedule_hash,dice,hd95_mm"


@dataclass
class AblationRow:
    mode: str
    encoders: int
    params: int
    schedule_hash: str
    dice: float
    hd95_mm: float

    def csv_line(self) -> str:
        return (f"{self.mode},{self.encoders},{self.params},"
                f"{self.schedule_hash},{self.dice:.6f},{self.hd95_mm:.6f}")


def schedule_descriptor(cfg: RunConfig,
                        sample_ids: Sequence[str],
                        splits: Sequence[tuple[list[int], list[int]]]) -> str:
    """Everything an ablation arm shares; fusion mode and arm seed excluded."""
    parts = [
        "samples=" + ",".join(sample_ids),
        "splits=" + ";".join(
            ",".join(map(str, tr)) + "/" + ",".join(map(str, va))
            for tr, va in splits),
        f"steps={cfg.steps}", f"batch={cfg.batch_size}",
        f"lr={cfg.learning_rate!r}", f"betas={cfg.beta1!r},{cfg.beta2!r}",
        f"eps={cfg.eps!r}", f"wd={cfg.weight_decay!r}",
        f"extents={cfg.model.extents}", f"classes={cfg.model.num_classes}",
        f"n={cfg.model.n}", f"bw={cfg.model.base_width}",
        f"k={cfg.model.k_channels}", f"c={cfg.model.embed_dim}",
        f"layers={cfg.model.num_layers}", f"heads={cfg.model.num_heads}",
        f"mlp={cfg.model.mlp_ratio}", f"sigma={cfg.sigma!r}",
        f"regions={cfg.regions}",
    ]
    return "|".join(parts)


def schedule_hash(descriptor: str) -> str:
    return hashlib.sha256(descriptor.encode("utf-8")).hexdigest()[:16]


@dataclass
class AblationResult:
    table: list[AblationRow]
    report: MetricsReport
    csv_path: str | None = None
    report_path: str | None = None


def run_ablation(cfg: RunConfig, out_dir=None) -> AblationResult:
    """Train and evaluate every fusion mode on identical data and splits.

    Each arm differs only in its fusion spec and its derived initialization
    seed; the shared schedule hash in every row makes that checkable.
    """
    cfg.validate()
    samples = build_dataset(cfg)
    ids = [sid for sid, _ in samples]
    splits = datamod.kfold_split(len(samples), cfg.folds,
                                 derive_seed(cfg.seed, "split"))
    sched_hash = schedule_hash(schedule_descriptor(cfg, ids, splits))

    table: list[AblationRow] = []
    all_rows: list[ReportRow] = []
    for mode in cfg.modes:
        arm_model = replace(cfg.model, fusion_mode=mode,
                            seed=derive_seed(cfg.seed, f"init:{mode}"))
        arm_cfg = replace(cfg, model=arm_model)
        arm_rows: list[ReportRow] = []
        for fold_i, (train_idx, val_idx) in enumerate(splits):
            result = train(arm_cfg, [samples[i] for i in train_idx])
            report = evaluate(arm_model, result.params,
                              [samples[i] for i in val_idx],
                              regions=cfg.regions, fold=fold_i, mode=mode)
            arm_rows.extend(report.rows)
        all_rows.extend(arm_rows)
        table.append(AblationRow(
            mode=mode,
            encoders=model.make_fusion_spec(
                mode, cfg.model.n, cfg.model.custom_subsets).num_encoders,
            params=model.count_parameters(model.init_params(arm_model)),
            schedule_hash=sched_hash,
            dice=float(np.mean([r.dice for r in arm_rows])),
            hd95_mm=float(np.mean([r.hd95_mm for r in arm_rows])),
        ))

    result = AblationResult(table=table, report=MetricsReport(all_rows))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.csv_path = os.path.join(out_dir, "ablation.csv")
        with open(result.csv_path, "w", encoding="utf-8") as fh:
            fh.write(ABLATION_HEADER + "\n")
            for row in table:
                fh.write(row.csv_line() + "\n")
        result.report_path = os.path.join(out_dir, "report.csv")
        with open(result.report_path, "w", encoding="utf-8") as fh:
            fh.write(result.report.to_csv())
    return result
