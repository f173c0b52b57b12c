"""End-to-end orchestration: prepare, select, train, evaluate, ablate, explain, hyperopt.

Every command reads its inputs from and writes its outputs to one run
directory. Artifacts are plain text (CSV, JSON, JSONL, TSV) except the
parameter archive, and carry no wall-clock values apart from the ablation
timing columns, so reruns with the same config and seed are byte-identical.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import explain, features, ingest, metrics, selection, train
from .datasets import bundled_monthly_path
from .graph import Adjacency, adjacency_from_features
from .model import ABLATIONS, ModelConfig, load_params, predict, save_params

logger = logging.getLogger(__name__)

TARGET_KEY = "__target__"
PREDICTION_HEADER = ("timestamp", "actual", "predicted", "lower95", "upper95")
ABLATION_COLUMNS = ("Configuration", "R2", "MAE", "MSE", "RMSE", "ME", "SDE", "Train(s)",
                    "Test(s)", "Theil's U", "95% Coverage")
TIMING_COLUMNS = ("Train(s)", "Test(s)")


class ConfigError(ValueError):
    """Invalid or inconsistent pipeline configuration."""


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None          # None: bundled synthetic monthly series
    timestamp_column: str = "YYYYMM"
    target_column: str = "Value"
    covariates: tuple[str, ...] | None = None
    delimiter: str = ","
    resample_monthly: bool = False
    iqr_k: float | None = 1.5
    frequency_hint: str | None = None


@dataclass(frozen=True)
class SelectionConfig:
    target_size: int = 8
    top_k: int = 15
    rounds: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1


@dataclass(frozen=True)
class ExplainConfig:
    background: int = 100
    instances: int = 20
    mode: str = "exact"
    n_samples: int = 4096


@dataclass(frozen=True)
class SearchConfig:
    space: str | dict = "eia"
    trials: int = 10


# Defaults tuned for the bundled series: no dropout and small sequential batches
DEFAULT_MODEL = ModelConfig(hidden_dim=32, dropout_rate=0.0)
DEFAULT_TRAIN = train.TrainConfig(learning_rate=1e-3, batch_size=16, epochs=200)


@dataclass(frozen=True)
class PipelineConfig:
    profile: str = "EIA"
    data: DataConfig = field(default_factory=DataConfig)
    horizon: int = 1
    window: features.WindowSpec = field(default_factory=features.WindowSpec)
    train_fraction: float = 0.8
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    model: ModelConfig = DEFAULT_MODEL
    train: train.TrainConfig = DEFAULT_TRAIN
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    seed: int = 0
    base_dir: str = "."

    def __post_init__(self):
        if self.profile not in features.PROFILES:
            raise ConfigError(f"profile must be one of {features.PROFILES}, got {self.profile!r}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.selection.target_size < 1 or self.selection.top_k < self.selection.target_size:
            raise ConfigError("selection needs 1 <= target_size <= top_k")
        if self.explain.mode not in ("exact", "sampled"):
            raise ConfigError(f"explain.mode must be 'exact' or 'sampled', got {self.explain.mode!r}")
        if self.explain.background < 1 or self.explain.instances < 1:
            raise ConfigError("explain.background and explain.instances must be >= 1")
        if self.search.trials < 1:
            raise ConfigError("search.trials must be >= 1")
        if isinstance(self.search.space, str) and self.search.space not in train.SEARCH_SPACES:
            raise ConfigError(f"unknown search space {self.search.space!r}")
        if self.data.path is not None and not self.data_path().exists():
            raise ConfigError(f"input file not found: {self.data_path()}")

    def data_path(self) -> Path:
        if self.data.path is None:
            return bundled_monthly_path()
        p = Path(self.data.path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def train_config(self) -> train.TrainConfig:
        return replace(self.train, seed=self.seed)

    def search_space(self) -> train.SearchSpace:
        if isinstance(self.search.space, str):
            return train.SEARCH_SPACES[self.search.space]
        return train.SearchSpace.from_dict(self.search.space)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["train"].pop("seed")
        if d["data"]["covariates"] is not None:
            d["data"]["covariates"] = list(d["data"]["covariates"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "PipelineConfig":
        d = dict(d)
        sections = {"data": DataConfig, "window": features.WindowSpec,
                    "selection": SelectionConfig, "model": ModelConfig,
                    "train": train.TrainConfig, "explain": ExplainConfig,
                    "search": SearchConfig}
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, typ in sections.items():
            if name not in d:
                continue
            sub = d.pop(name)
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(typ)}
            bad = set(sub) - allowed
            if name == "train":
                bad |= {"seed"} & set(sub)
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            base = {"model": DEFAULT_MODEL, "train": DEFAULT_TRAIN}.get(name)
            if name == "data" and sub.get("covariates") is not None:
                sub = {**sub, "covariates": tuple(sub["covariates"])}
            try:
                kwargs[name] = replace(base, **sub) if base is not None else typ(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config section {name!r}: {exc}") from exc
        try:
            return cls(**d, **kwargs, base_dir=str(base_dir))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, base_dir=str(path.parent))


# -- artifact helpers ---------------------------------------------------------


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _load(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}; run the earlier pipeline step first")
    return json.loads(path.read_text())


@dataclass
class Prepared:
    train: features.FeatureMatrix    # standardized features and target
    test: features.FeatureMatrix
    x_scaler: ingest.ScalerState
    y_scaler: ingest.ScalerState


def load_prepared(out: Path, config: PipelineConfig) -> Prepared:
    meta = _load(out / "prepare.json")
    target = meta["target"]
    tr = features.FeatureMatrix.read_csv(out / "train_features.csv", config.profile, target)
    te = features.FeatureMatrix.read_csv(out / "test_features.csv", config.profile, target)
    return Prepared(tr, te, ingest.ScalerState.from_dict(meta["x_scaler"]),
                    ingest.ScalerState.from_dict(meta["y_scaler"]))


def _selected(out: Path) -> list[str]:
    return _load(out / "selection.json")["selected"]


# -- commands -----------------------------------------------------------------


def load_table(config: PipelineConfig) -> ingest.SeriesTable:
    dc_ = config.data
    cols = list(dc_.covariates) if dc_.covariates is not None else (
        list(features.ETT_COVARIATES) if config.profile == "ETT" else [])
    table = ingest.load_csv(config.data_path(), dc_.timestamp_column, dc_.target_column,
                            dc_.frequency_hint, dc_.delimiter, cols)
    if dc_.resample_monthly:
        table = ingest.resample_monthly(table)
    table = ingest.fill_missing(table)
    if dc_.iqr_k is not None:
        table = ingest.iqr_filter(table, k=dc_.iqr_k)
    return table


def cmd_prepare(config: PipelineConfig, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table = load_table(config)
    if config.profile == "WINDOWED":
        fm = features.build_windowed(table.y, config.window, table.timestamps, table.target)
    else:
        covs = config.data.covariates if config.data.covariates is not None \
            else features.ETT_COVARIATES
        fm = features.build_features(table, config.profile, config.horizon, covs)
    tr, te = ingest.chrono_split(fm, config.train_fraction)
    tr, x_scaler = ingest.standardize(tr)
    te, _ = ingest.standardize(te, x_scaler)
    y_scaler = ingest.fit_scaler(tr.y[:, None], [TARGET_KEY])
    tr = tr.with_y(y_scaler.transform(tr.y[:, None])[:, 0])
    te = te.with_y(y_scaler.transform(te.y[:, None])[:, 0])
    tr.to_csv(out / "train_features.csv")
    te.to_csv(out / "test_features.csv")
    features.write_manifest(out / "feature_manifest.txt", fm.names)
    meta = {"seed": config.seed, "profile": config.profile, "target": table.target,
            "rows": {"series": len(table), "train": len(tr), "test": len(te)},
            "n_features": fm.d, "x_scaler": x_scaler.to_dict(),
            "y_scaler": y_scaler.to_dict()}
    _dump(out / "prepare.json", meta)
    _dump(out / "config.json", config.to_dict())
    logger.info("prepared %d train / %d test rows with %d features", len(tr), len(te), fm.d)
    return meta


def cmd_select(config: PipelineConfig, out) -> selection.SelectionResult:
    out = Path(out)
    prep = load_prepared(out, config)
    s = config.selection
    if prep.train.d < s.target_size:
        raise ConfigError(f"only {prep.train.d} features available, need {s.target_size}")
    result = selection.select_features(prep.train.X, prep.train.y, prep.train.names,
                                       s.target_size, s.top_k, s.rounds, s.max_depth,
                                       s.learning_rate)
    if len(result.selected) != s.target_size:
        raise RuntimeError(f"selection returned {len(result.selected)} features")
    (out / "selection.txt").write_text(result.to_text())
    _dump(out / "selection.json", {"seed": config.seed, "selected": result.selected,
                                   "ranked": result.ranked, "trace": result.trace,
                                   "two_stage": prep.train.d > s.top_k})
    return result


@dataclass
class FitOutcome:
    params: object
    history: train.TrainHistory
    adjacency: Adjacency
    report: metrics.EvalReport
    interval: metrics.IntervalModel
    predictions: np.ndarray
    actual: np.ndarray
    train_seconds: float
    test_seconds: float


def _validation_residuals(params, X, y, A, config: PipelineConfig,
                          y_scaler: ingest.ScalerState) -> np.ndarray:
    cut = train.validation_cut(len(X), config.train.validation_fraction)
    pred = predict(X[cut:], A, params, config.model)
    return ingest.inverse_target(pred, y_scaler) - ingest.inverse_target(y[cut:], y_scaler)


def fit_and_score(config: PipelineConfig, prep: Prepared, names: list[str],
                  disabled_paths=()) -> FitOutcome:
    """Train on the train split and score the test split in original units."""
    tr, te = prep.train.select(names), prep.test.select(names)
    A = adjacency_from_features(tr.X, config.model.tau)
    t0 = time.monotonic()
    params, history = train.fit(tr.X, tr.y, A, config.model, config.train_config(),
                                disabled_paths=disabled_paths)
    t1 = time.monotonic()
    pred = ingest.inverse_target(predict(te.X, A, params, config.model), prep.y_scaler)
    t2 = time.monotonic()
    actual = ingest.inverse_target(te.y, prep.y_scaler)
    interval = metrics.IntervalModel.fit(
        _validation_residuals(params, tr.X, tr.y, A, config, prep.y_scaler))
    report = metrics.evaluate(actual, pred, interval)
    return FitOutcome(params, history, A, report, interval, pred, actual, t1 - t0, t2 - t1)


def cmd_train(config: PipelineConfig, out) -> dict:
    out = Path(out)
    prep = load_prepared(out, config)
    names = _selected(out)
    tr = prep.train.select(names)
    A = adjacency_from_features(tr.X, config.model.tau)
    params, history = train.fit(tr.X, tr.y, A, config.model, config.train_config())
    save_params(out / "params.zip", params, config.model,
                {"seed": config.seed, "features": names})
    (out / "history.jsonl").write_text(history.to_jsonl())
    (out / "adjacency.txt").write_text(A.to_text(names))
    manifest = {"seed": config.seed, "config": config.to_dict(),
                "features": names, "adjacency_fingerprint": A.fingerprint(),
                "params": "params.zip", "history": "history.jsonl",
                "best_epoch": history.best_epoch, "stopped_epoch": history.stopped_epoch,
                "best_val_loss": history.best_val_loss, "n_params": params.count(),
                "reports": {}}
    _dump(out / "run_manifest.json", manifest)
    return manifest


def _load_run(config: PipelineConfig, out: Path, manifest_path=None):
    manifest_path = Path(manifest_path) if manifest_path else out / "run_manifest.json"
    manifest = _load(manifest_path)
    params, mconfig, extra = load_params(manifest_path.parent / manifest["params"])
    names = manifest["features"]
    if extra.get("features") != names:
        raise ValueError("parameter archive and manifest disagree on the feature set")
    prep = load_prepared(out, config)
    missing = [n for n in names if n not in prep.test.names]
    if missing:
        raise ValueError(f"prepared matrices lack manifest features {missing}")
    A = adjacency_from_features(prep.train.select(names).X, mconfig.tau)
    if A.fingerprint() != manifest["adjacency_fingerprint"]:
        raise ValueError("adjacency rebuilt from training features does not match the manifest")
    return manifest, manifest_path, params, mconfig, names, prep, A


def cmd_evaluate(config: PipelineConfig, out, manifest_path=None) -> metrics.EvalReport:
    out = Path(out)
    manifest, manifest_path, params, mconfig, names, prep, A = _load_run(config, out,
                                                                          manifest_path)
    config = replace(config, model=mconfig)
    tr, te = prep.train.select(names), prep.test.select(names)
    pred = ingest.inverse_target(predict(te.X, A, params, mconfig), prep.y_scaler)
    actual = ingest.inverse_target(te.y, prep.y_scaler)
    interval = metrics.IntervalModel.fit(
        _validation_residuals(params, tr.X, tr.y, A, config, prep.y_scaler))
    report = metrics.evaluate(actual, pred, interval)
    lower, upper = interval.bounds(pred)
    lines = [",".join(PREDICTION_HEADER)]
    for ts, a, p, lo, hi in zip(te.target_timestamps, actual, pred, lower, upper):
        lines.append(",".join([ts.isoformat(), *(repr(float(v)) for v in (a, p, lo, hi))]))
    (out / "predictions.csv").write_text("\n".join(lines) + "\n")
    _dump(out / "report.json", {"seed": config.seed, "residual_sigma": interval.residual_sigma,
                                "z": interval.z, **report.to_dict()})
    (out / "report.txt").write_text(report.to_text())
    manifest["reports"] = {"evaluation": "report.json", "predictions": "predictions.csv"}
    _dump(manifest_path, manifest)
    return report


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _fmt(v) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.6f}"


def cmd_ablate(config: PipelineConfig, out) -> list[dict]:
    """Train every ablation configuration with the same seed, split and budget."""
    out = Path(out)
    prep = load_prepared(out, config)
    names = _selected(out)
    rows = []
    for label, disabled in ABLATIONS.items():
        try:
            res = fit_and_score(config, prep, names, disabled)
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            logger.warning("ablation %r failed: %s", label, exc)
            rows.append({"Configuration": label, "error": str(exc)})
            continue
        r = res.report
        rows.append({"Configuration": label, "R2": r.r2, "MAE": r.mae, "MSE": r.mse,
                     "RMSE": r.rmse, "ME": r.me, "SDE": r.sde,
                     "Train(s)": round(res.train_seconds, 2),
                     "Test(s)": round(res.test_seconds, 2), "Theil's U": r.theils_u,
                     "95% Coverage": r.coverage_95})
    lines = [",".join(ABLATION_COLUMNS)]
    for row in rows:
        if "error" in row:
            lines.append(row["Configuration"] + ",failed" + "," * (len(ABLATION_COLUMNS) - 2))
            continue
        cells = [row["Configuration"]]
        for c in ABLATION_COLUMNS[1:]:
            cells.append(f"{row[c]:.2f}" if c in TIMING_COLUMNS else _cell(row[c]))
        lines.append(",".join(cells))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    width = max(len(k) for k in ABLATIONS)
    text = ["  ".join([ABLATION_COLUMNS[0].ljust(width)] + [c.rjust(12) for c in ABLATION_COLUMNS[1:]])]
    for row in rows:
        if "error" in row:
            text.append(f"{row['Configuration'].ljust(width)}  failed: {row['error']}")
            continue
        text.append("  ".join([row["Configuration"].ljust(width)]
                              + [(f"{row[c]:.2f}" if c in TIMING_COLUMNS else _fmt(row[c])).rjust(12)
                                 for c in ABLATION_COLUMNS[1:]]))
    (out / "ablation.txt").write_text("\n".join(text) + "\n")
    return rows


def cmd_explain(config: PipelineConfig, out, instance_index: int = 0,
                manifest_path=None) -> tuple[explain.Attribution, explain.GlobalSummary]:
    out = Path(out)
    _, _, params, mconfig, names, prep, A = _load_run(config, out, manifest_path)
    tr, te = prep.train.select(names), prep.test.select(names)
    if not 0 <= instance_index < len(te):
        raise IndexError(f"instance {instance_index} outside the test range [0, {len(te)})")
    ex = config.explain
    background = explain.background_sample(tr.X, ex.background, config.seed)

    def model(X):
        return predict(X, A, params, mconfig)

    def attribute(x):
        if ex.mode == "exact":
            return explain.shapley_exact(model, background, x)
        return explain.shapley_sampled(model, background, x, ex.n_samples, config.seed)

    cols = [prep.x_scaler.names.index(n) for n in names]
    mean, std = prep.x_scaler.mean[cols], prep.x_scaler.std[cols]
    target = attribute(te.X[instance_index])
    if ex.mode == "exact" and abs(target.residual) > 1e-6:
        raise RuntimeError(f"local accuracy violated by {target.residual:.3e}")
    rows, header = explain.waterfall_export(target, names,
                                            te.X[instance_index] * std + mean,
                                            tol=1e-6 if ex.mode == "exact" else math.inf)
    stem = f"waterfall_{instance_index}"
    (out / f"{stem}.tsv").write_text(explain.format_table(rows, explain.WATERFALL_COLUMNS))
    _dump(out / f"{stem}.json", {"seed": config.seed, "instance": instance_index,
                                  "units": "model output (standardized target)", **header})

    count = min(ex.instances, len(te))
    atts = [target if k == instance_index else attribute(te.X[k]) for k in range(count)]
    summary = explain.global_summary(atts, names)
    bar = [{"Feature": n, "Mean |SHAP|": v} for n, v in summary.bar_rows()]
    (out / "shap_bar.tsv").write_text(explain.format_table(bar, ("Feature", "Mean |SHAP|")))
    matrix = [{"instance": k, **{n: float(summary.phi[k, j]) for j, n in enumerate(names)}}
              for k in range(count)]
    (out / "shap_values.tsv").write_text(explain.format_table(matrix, ["instance", *names]))
    dep = explain.dependence_export(summary)
    (out / "shap_dependence.tsv").write_text(explain.format_table(
        dep, ("feature", "value", "shap", "interaction_feature", "interaction_value")))
    return target, summary


def cmd_hyperopt(config: PipelineConfig, out) -> tuple[PipelineConfig, train.SearchResult]:
    out = Path(out)
    prep = load_prepared(out, config)
    names = _selected(out)
    tr = prep.train.select(names)

    def objective(sample, tseed):
        mc, tc = train.apply_sample(config.model, config.train_config(), sample)
        tc = replace(tc, seed=tseed)
        A = adjacency_from_features(tr.X, mc.tau)
        _, history = train.fit(tr.X, tr.y, A, mc, tc)
        return history.best_val_loss

    result = train.hyperopt(config.search_space(), config.search.trials, objective, config.seed)
    mc, tc = train.apply_sample(config.model, config.train, result.best)
    best = replace(config, model=mc, train=tc)
    if config.data.path is not None:
        # the file lands in the run directory, so pin the input to an absolute path
        best = replace(best, data=replace(config.data, path=str(config.data_path().resolve())))
    (out / "best_config.json").write_text(best.to_json())
    (out / "trials.jsonl").write_text(result.to_jsonl())
    return best, result
