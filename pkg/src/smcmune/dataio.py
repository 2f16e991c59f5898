"""File formats: series CSV, key=value config, deterministic JSON, manifests.

Result JSON is timing-free and written with sorted keys so identical runs
produce identical bytes; wall-clock timings live only in the sidecar manifest.
A fit result embeds everything a later report needs (series, config echo,
deduplicated mixture components with their firing histories), and
``result_from_payload`` rebuilds a working RunResult from it by replaying the
grid chains.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .conjugate import BaselineStats
from .engine import Diagnostics, RunResult
from .errors import ValidationError
from .grid import EMPTY_KEY, GridCache, GridPosterior, Lattice, child_key
from .model import ModelConfig, StimulusResponseSeries, get_curve, reorder_series
from .postprocess import IntervalSummary, LevelRow, ParameterReport, UnitSummary
from .selection import SelectionResult, StabilityConfig

__all__ = [
    "CSV_COLUMNS",
    "load_series_csv",
    "save_series_csv",
    "dump_grid_csv",
    "load_config",
    "parse_config_text",
    "config_snapshot",
    "config_from_snapshot",
    "write_json",
    "read_json",
    "sha256_file",
    "fit_result_payload",
    "result_from_payload",
    "summaries_payload",
    "levels_payload",
    "selection_payload",
    "write_manifest",
]

CSV_COLUMNS = (
    "stimulus_volts",
    "response_mN",
    "is_baseline(0|1)",
    "is_supramaximal(0|1)",
)


# ---------------------------------------------------------------------------
# series CSV


def load_series_csv(path) -> StimulusResponseSeries:
    """Read a series CSV and arrange it into canonical assimilation order.

    Errors carry 1-based row numbers and column names so a bad cell in a large
    file can be found without bisecting it.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from e
    rows = list(csv.reader(text.splitlines()))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise ValidationError(f"{path}: empty CSV")
    header = [c.strip() for c in rows[0]]
    if header != list(CSV_COLUMNS):
        raise ValidationError(
            f"{path}: row 1: header must be {', '.join(CSV_COLUMNS)!r}, "
            f"got {', '.join(header)!r}"
        )
    raw: list[tuple[float, float]] = []
    base_flags: list[bool] = []
    supra_flags: list[bool] = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise ValidationError(f"{path}: row {i}: expected 4 columns, got {len(row)}")
        cells = [c.strip() for c in row]
        try:
            s = float(cells[0])
        except ValueError:
            raise ValidationError(
                f"{path}: row {i}, column {CSV_COLUMNS[0]}: not a number: {cells[0]!r}"
            ) from None
        try:
            y = float(cells[1])
        except ValueError:
            raise ValidationError(
                f"{path}: row {i}, column {CSV_COLUMNS[1]}: not a number: {cells[1]!r}"
            ) from None
        flags = []
        for col in (2, 3):
            if cells[col] not in ("0", "1"):
                raise ValidationError(
                    f"{path}: row {i}, column {CSV_COLUMNS[col]}: must be 0 or 1, "
                    f"got {cells[col]!r}"
                )
            flags.append(cells[col] == "1")
        raw.append((s, y))
        base_flags.append(flags[0])
        supra_flags.append(flags[1])
    return reorder_series(raw, base_flags, supra_flags)


def save_series_csv(path, series: StimulusResponseSeries) -> None:
    """Write a canonical-order series with its baseline/supramaximal flags."""
    path = Path(path)
    tau = series.tau
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for t in range(series.T):
            w.writerow(
                [
                    repr(float(series.stimuli[t])),
                    repr(float(series.responses[t])),
                    1 if t < tau - 1 else 0,
                    1 if t == tau - 1 else 0,
                ]
            )


def dump_grid_csv(path, grid: GridPosterior) -> None:
    """Write one grid as (eta, lambda, log_value) rows for external plotting."""
    lat = grid.lattice
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["eta_volts", "lambda_volts", "log_value"])
        for i, eta in enumerate(lat.etas):
            for j, lam in enumerate(lat.lams):
                w.writerow([repr(float(eta)), repr(float(lam)), repr(float(grid.log_values[i, j]))])


# ---------------------------------------------------------------------------
# config files (flat key=value)

_MODEL_KEYS: dict[str, type] = {
    "u_max": int,
    "eta_max": float,
    "lambda_max": float,
    "a0": float,
    "delta": float,
    "epsilon": float,
    "mu_min": float,
    "n_particles0": int,
    "grid_n0": int,
    "prune_threshold": float,
    "seed": int,
    "curve": str,
    "a_bar0": float,
    "b_bar0": float,
    "m_bar0": float,
    "c_bar0": float,
    "m0": float,
    "C0_scale": float,
}
_ALIASES = {"grid_n": "grid_n0", "particles": "n_particles0"}
_STABILITY_KEYS: dict[str, type] = {
    "runs_screen": int,
    "ml_range_tol": float,
    "particle_step": int,
    "grid_step": int,
    "runs_final": int,
    "prob_floor": float,
    "max_particles": int,
    "max_grid": int,
    "recalib_runs": int,
}


def _cast(key: str, value: str, typ: type, where: str):
    try:
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return value
    except ValueError:
        raise ValidationError(f"{where}: key {key!r}: cannot parse {value!r} as {typ.__name__}") from None


def parse_config_text(text: str, where: str = "config") -> ModelConfig:
    """Parse flat key=value lines ('#' comments allowed) into a ModelConfig.

    Unknown keys are hard errors: a typo must never silently fall back to a
    default. ``grid_n`` and ``particles`` are accepted as plain-English
    aliases of grid_n0 / n_particles0.
    """
    model: dict = {}
    stab: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValidationError(f"{where}: line {lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        key = _ALIASES.get(key, key)
        loc = f"{where}: line {lineno}"
        if key in _MODEL_KEYS:
            if key in model:
                raise ValidationError(f"{loc}: duplicate key {key!r}")
            model[key] = _cast(key, value, _MODEL_KEYS[key], loc)
        elif key in _STABILITY_KEYS:
            if key in stab:
                raise ValidationError(f"{loc}: duplicate key {key!r}")
            stab[key] = _cast(key, value, _STABILITY_KEYS[key], loc)
        else:
            raise ValidationError(f"{loc}: unknown config key {key!r}")
    if stab:
        model["stability"] = StabilityConfig(**stab)
    return ModelConfig(**model)


def load_config(path) -> ModelConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from e
    return parse_config_text(text, where=str(path))


def config_snapshot(cfg: ModelConfig) -> dict:
    """JSON-ready dict of every knob, stability constants nested."""
    out = {}
    for f in fields(ModelConfig):
        if f.name == "stability":
            continue
        out[f.name] = getattr(cfg, f.name)
    stab = cfg.stability
    out["stability"] = asdict(stab) if stab is not None else None
    return out


def config_from_snapshot(snap: dict) -> ModelConfig:
    snap = dict(snap)
    stab = snap.pop("stability", None)
    kwargs = {k: v for k, v in snap.items() if k in {f.name for f in fields(ModelConfig)}}
    if stab is not None:
        kwargs["stability"] = StabilityConfig(**stab)
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# deterministic JSON


def _pyify(obj):
    if isinstance(obj, dict):
        return {str(k): _pyify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pyify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_pyify(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        # JSON has no Infinity/NaN; keep files standards-compliant.
        if np.isnan(obj):
            return "nan"
        return "inf" if obj > 0 else "-inf"
    return obj


def _unpyify_float(v) -> float:
    if isinstance(v, str):
        return float(v)
    return float(v)


def write_json(path, payload) -> None:
    """Serialize with sorted keys; identical payloads give identical bytes."""
    text = json.dumps(_pyify(payload), sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n")


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON: {e}") from e


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# fit result payloads


def _series_payload(series: StimulusResponseSeries) -> dict:
    return {
        "stimuli": [float(v) for v in series.stimuli],
        "responses": [float(v) for v in series.responses],
        "tau": int(series.tau),
    }


def _series_from_payload(d: dict) -> StimulusResponseSeries:
    return StimulusResponseSeries(
        np.asarray(d["stimuli"], dtype=float),
        np.asarray(d["responses"], dtype=float),
        int(d["tau"]),
    )


def _interval_payload(iv: IntervalSummary) -> dict:
    return {"median": iv.median, "lower": iv.lower, "upper": iv.upper}


def summaries_payload(report: ParameterReport) -> dict:
    return {
        "units": [
            {
                "label": s.label,
                "eta_mean": s.eta_mean,
                "eta": _interval_payload(s.eta),
                "lambda": _interval_payload(s.lam),
                "mu": _interval_payload(s.mu),
            }
            for s in report.units
        ],
        "nu_inv": _interval_payload(report.nu_inv),
        "nu_bar_inv": _interval_payload(report.nu_bar_inv),
        "n_components": report.n_components,
    }


def levels_payload(rows: list[LevelRow]) -> list[dict]:
    return [
        {
            "level": r.level,
            "n_obs": r.n_obs,
            "response_mean": r.response_mean,
            "response_min": r.response_min,
            "response_max": r.response_max,
            "firing": list(r.firing),
        }
        for r in rows
    ]


def fit_result_payload(
    run: RunResult,
    series: StimulusResponseSeries,
    summaries: ParameterReport | None,
) -> dict:
    """Everything a later report needs, in one timing-free JSON document."""
    payload = {
        "format": "smcmune-fit/1",
        "u": run.u,
        "log_ml": run.log_ml,
        "ess_trace": [float(v) for v in run.ess_trace],
        "annihilated": run.annihilated,
        "annihilated_at": run.diagnostics.annihilated_at,
        "n_particles": run.n_particles,
        "grid_n": run.grid_n,
        "seed": run.seed,
        "eta_max": run.eta_max,
        "nu_prior_b": run.nu_prior_b,
        "baseline_stats": asdict(run.baseline_stats),
        "config": config_snapshot(run.config),
        "series": _series_payload(series),
        "parameter_summaries": summaries_payload(summaries) if summaries else None,
    }
    components = []
    if not run.annihilated:
        weights, slots = run.unique_components()
        keys = run.history_keys
        for w, slot in zip(weights, slots):
            st = run.component_stats(int(slot))
            hist = [keys[run._ids[int(slot), j]] for j in range(run.u)]
            components.append(
                {
                    "weight": float(w),
                    "a": float(st.a),
                    "b": float(st.b),
                    "m": [float(v) for v in st.m],
                    "C": [[float(v) for v in row] for row in st.C],
                    "history_len": int(hist[0][0]),
                    "history_bits": [int(k[1]) for k in hist],
                }
            )
    payload["components"] = components
    return payload


class _ReplayGridStore:
    """Read-only grid store rebuilt from serialized firing histories."""

    def __init__(self, keys: list[tuple[int, int]], cache: GridCache):
        self.keys = list(keys)
        self._cache = cache

    def grid_for_slot(self, ids: np.ndarray, slot: int, j: int) -> GridPosterior:
        return self._cache.grid(self.keys[ids[slot, j]])


def _replay_key(cache: GridCache, key: tuple[int, int], stimuli: list[float]) -> None:
    """Walk one history from the root, extending the cache along the way."""
    length, bits = key
    parent = EMPTY_KEY
    for step in range(length):
        fired = (bits >> step) & 1
        child = child_key(parent, fired)
        cache.get_or_extend(child, parent, fired, stimuli[step])
        parent = child


def result_from_payload(payload: dict) -> tuple[RunResult, StimulusResponseSeries]:
    """Rebuild a queryable RunResult from a fit JSON document.

    Component statistics are restored verbatim; the excitability grids are
    recomputed by replaying each unit's firing history through a fresh cache,
    which reproduces the original grids bit for bit (same update chain, same
    arithmetic). Weights come back exact because they were stored as
    multiplicity / n_particles.
    """
    if payload.get("format") != "smcmune-fit/1":
        raise ValidationError("not a fit result document (missing format smcmune-fit/1)")
    series = _series_from_payload(payload["series"])
    cfg = config_from_snapshot(payload["config"])
    u = int(payload["u"])
    grid_n = int(payload["grid_n"])
    n_particles = int(payload["n_particles"])
    eta_max = _unpyify_float(payload["eta_max"])
    log_ml = _unpyify_float(payload["log_ml"])

    diag = Diagnostics()
    diag.ess_trace = [float(v) for v in payload.get("ess_trace", [])]
    diag.annihilated = bool(payload.get("annihilated", False))
    diag.annihilated_at = payload.get("annihilated_at")

    baseline = BaselineStats(**payload["baseline_stats"])
    base_kwargs = dict(
        u=u,
        log_ml=log_ml,
        baseline_stats=baseline,
        nu_prior_b=_unpyify_float(payload["nu_prior_b"]),
        diagnostics=diag,
        n_particles=n_particles,
        grid_n=grid_n,
        seed=int(payload["seed"]),
        eta_max=eta_max,
        config=cfg,
    )
    comps = payload.get("components") or []
    if diag.annihilated or not comps:
        return RunResult(**base_kwargs), series

    lattice = Lattice(grid_n, grid_n, eta_max, cfg.lambda_max)
    cache = GridCache(lattice, get_curve(cfg.curve))
    # stimulus at history position 0 is the supramaximal one, then the sweep
    hist_stimuli = [float(series.supramax_stimulus)] + [float(s) for s in series.post_stimuli]

    keys: list[tuple[int, int]] = []
    key_index: dict[tuple[int, int], int] = {}
    id_rows = np.empty((len(comps), u), dtype=np.int32)
    counts = np.empty(len(comps), dtype=np.int64)
    A = np.empty(len(comps))
    B = np.empty(len(comps))
    M = np.empty((len(comps), u))
    C = np.empty((len(comps), u, u))
    for i, comp in enumerate(comps):
        length = int(comp["history_len"])
        if len(comp["history_bits"]) != u:
            raise ValidationError(f"component {i}: expected {u} unit histories")
        for j, bits in enumerate(comp["history_bits"]):
            key = (length, int(bits))
            if key not in key_index:
                _replay_key(cache, key, hist_stimuli)
                key_index[key] = len(keys)
                keys.append(key)
            id_rows[i, j] = key_index[key]
        counts[i] = round(_unpyify_float(comp["weight"]) * n_particles)
        A[i] = _unpyify_float(comp["a"])
        B[i] = _unpyify_float(comp["b"])
        M[i] = np.asarray(comp["m"], dtype=float)
        C[i] = np.asarray(comp["C"], dtype=float)
    if counts.sum() != n_particles:
        raise ValidationError(
            f"component weights sum to {counts.sum()}/{n_particles} particles"
        )
    run = RunResult(
        **base_kwargs,
        _A=np.repeat(A, counts),
        _B=np.repeat(B, counts),
        _M=np.repeat(M, counts, axis=0),
        _C=np.repeat(C, counts, axis=0),
        _ids=np.repeat(id_rows, counts, axis=0),
        _store=_ReplayGridStore(keys, cache),
    )
    return run, series


# ---------------------------------------------------------------------------
# selection payloads


def selection_payload(sel: SelectionResult) -> dict:
    records = []
    for u in sorted(sel.records):
        r = sel.records[u]
        records.append(
            {
                "u": r.u,
                "log_ml": r.log_ml,
                "adjusted_log_ml": r.adjusted_log_ml,
                "particles_used": r.particles_used,
                "grid_used": r.grid_used,
                "run_spread": r.run_spread,
                "final_se": r.final_se,
                "n_runs": r.n_runs,
                "log_mls": list(r.log_mls),
                "capped": r.capped,
                "skipped_escalation": r.skipped_escalation,
                "trace": r.trace,
            }
        )
    return {
        "format": "smcmune-select/1",
        "records": records,
        "posterior": [float(p) for p in sel.posterior],
        "map_u": sel.map_u,
        "hpcs": list(sel.hpcs),
        "capped": sel.capped,
        "mu_min": sel.mu_min,
    }


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    """Sidecar provenance record; the one place timings are allowed."""

    command: str
    argv: list[str]
    config: dict
    inputs: list[dict] = field(default_factory=list)
    outputs: list[dict] = field(default_factory=list)
    seed: int | None = None
    elapsed_seconds: float = 0.0
    finished_utc: str = ""
    version: str = __version__

    def payload(self) -> dict:
        return {
            "format": "smcmune-manifest/1",
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "seed": self.seed,
            "timings": {
                "elapsed_seconds": self.elapsed_seconds,
                "finished_utc": self.finished_utc,
            },
            "version": self.version,
        }


def _file_stamp(path) -> dict:
    return {"path": str(path), "sha256": sha256_file(path)}


def write_manifest(
    output_path,
    *,
    command: str,
    config: ModelConfig | None,
    inputs: list = (),
    outputs: list = (),
    seed: int | None = None,
    started: float | None = None,
    argv: list[str] | None = None,
) -> Path:
    """Write ``<output>.manifest.json`` next to an output file."""
    man = RunManifest(
        command=command,
        argv=list(sys.argv[1:]) if argv is None else list(argv),
        config=config_snapshot(config) if config is not None else {},
        inputs=[_file_stamp(p) for p in inputs],
        outputs=[_file_stamp(p) for p in outputs],
        seed=seed,
        elapsed_seconds=0.0 if started is None else time.perf_counter() - started,
        finished_utc=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )
    path = Path(str(output_path) + ".manifest.json")
    write_json(path, man.payload())
    return path
