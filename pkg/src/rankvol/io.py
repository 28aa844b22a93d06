"""File formats: columnar binaries, CSV emissions and their readers.

Binary layouts (all little-endian):

* Trajectory ``RVSM``: magic ``b"RVSM"``, ``version: u32``, ``d: u32``,
  ``n_samples: u64``, then row-major ``f64`` weights (``n_samples x d``),
  ``f64`` times (``n_samples``), ``f64`` log total caps (``n_samples``).
* Panel ``RVSP``: magic ``b"RVSP"``, ``version: u32``, ``d: u32``,
  ``n_dates: u64``, then ``f64`` times, row-major ``u32`` id codes,
  row-major ``f64`` caps, then ``u32`` length-prefixed JSON with the id
  table and panel metadata.

CSV emissions carry no timestamps, so identical inputs produce
byte-identical files; run provenance lives in the manifest instead.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import pandas as pd

from .calibrate import CalibrationResult
from .errors import IngestionError, InvalidInputError
from .estimators import EstimateSet
from .model import FellerReport, ModelParams
from .panel import PanelData, ingest_panel
from .simulate import StationaryMoments, Trajectory

_TRAJ_MAGIC = b"RVSM"
_PANEL_MAGIC = b"RVSP"
_VERSION = 1


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    return obj


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonify(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------


def write_trajectory(traj: Trajectory, path) -> None:
    n, d = traj.weights.shape
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        fh.write(struct.pack("<II", _VERSION, d))
        fh.write(struct.pack("<Q", n))
        fh.write(np.ascontiguousarray(traj.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.log_total_cap, dtype="<f8").tobytes())


def read_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _TRAJ_MAGIC:
            raise InvalidInputError(f"{path}: not a trajectory file (bad magic {magic!r})")
        version, d = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise InvalidInputError(f"{path}: unsupported trajectory version {version}")
        (n,) = struct.unpack("<Q", fh.read(8))
        weights = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        times = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
        logs = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
    return Trajectory(times=times, weights=weights, log_total_cap=logs)


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """Long-format export: one row per (time, rank) with the ranked weight."""
    ranked, _, _ = traj.ranked()
    n, d = ranked.shape
    frame = pd.DataFrame(
        {
            "time": np.repeat(traj.times, d),
            "rank": np.tile(np.arange(1, d + 1), n),
            "weight": ranked.ravel(),
            "log_total_cap": np.repeat(traj.log_total_cap, d),
        }
    )
    frame.to_csv(path, index=False)


# ---------------------------------------------------------------------------
# panel
# ---------------------------------------------------------------------------


def write_panel(panel: PanelData, path) -> None:
    n, d = panel.caps.shape
    meta = {
        "id_table": panel.id_table,
        "date_labels": panel.date_labels,
        "substitutions": panel.substitutions,
        "rejected_rows": panel.rejected_rows,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PANEL_MAGIC)
        fh.write(struct.pack("<II", _VERSION, d))
        fh.write(struct.pack("<Q", n))
        fh.write(np.ascontiguousarray(panel.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(panel.ids, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(panel.caps, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def read_panel(path) -> PanelData:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _PANEL_MAGIC:
            raise InvalidInputError(f"{path}: not a panel file (bad magic {magic!r})")
        version, d = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise InvalidInputError(f"{path}: unsupported panel version {version}")
        (n,) = struct.unpack("<Q", fh.read(8))
        times = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
        ids = np.frombuffer(fh.read(4 * n * d), dtype="<u4").reshape(n, d).astype(np.int64)
        caps = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        (blob_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(blob_len).decode())
    return PanelData(
        times=times,
        ids=ids,
        caps=caps,
        id_table=list(meta["id_table"]),
        date_labels=meta.get("date_labels"),
        substitutions=int(meta.get("substitutions", 0)),
        rejected_rows=int(meta.get("rejected_rows", 0)),
    )


def panel_sidecar(panel: PanelData) -> dict:
    return {
        "d": panel.d,
        "n_dates": panel.n_dates,
        "span_years": panel.span,
        "first_date": panel.date_label(0),
        "last_date": panel.date_label(panel.n_dates - 1),
        "substitutions": panel.substitutions,
        "rejected_rows": panel.rejected_rows,
    }


def panel_to_csv(panel: PanelData, path) -> None:
    rows = panel.to_rows()
    frame = pd.DataFrame(rows, columns=["date", "id", "cap"])
    frame.to_csv(path, index=False)


def read_panel_csv(path, d: int, strict: bool = False) -> PanelData:
    """Ingest a raw (date, id, cap) CSV, reporting offending line numbers."""
    try:
        frame = pd.read_csv(path, dtype={"date": str, "id": str}, float_precision="round_trip")
    except Exception as exc:
        raise IngestionError(f"{path}: cannot parse CSV ({exc})") from exc
    missing = {"date", "id", "cap"} - set(frame.columns)
    if missing:
        raise IngestionError(f"{path}: missing required columns {sorted(missing)}")
    caps = pd.to_numeric(frame["cap"], errors="coerce")
    bad = frame.index[caps.isna() & frame["cap"].notna()].tolist()
    empty = frame.index[frame["date"].isna() | frame["id"].isna() | frame["cap"].isna()].tolist()
    problems = sorted(set(bad) | set(empty))
    if problems:
        lines = ", ".join(str(i + 2) for i in problems[:10])  # +2: header and 1-based
        raise IngestionError(f"{path}: malformed rows at lines {lines}")
    rows = zip(frame["date"].tolist(), frame["id"].tolist(), caps.tolist())
    return ingest_panel(rows, d, strict=strict)


def load_panel(path, d: int | None = None, strict: bool = False) -> PanelData:
    """Read a panel from either the binary format or a raw CSV."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _PANEL_MAGIC:
        return read_panel(path)
    if d is None:
        raise InvalidInputError("ingesting a CSV panel requires the panel width d")
    return read_panel_csv(path, d, strict=strict)


# ---------------------------------------------------------------------------
# estimates / calibration results
# ---------------------------------------------------------------------------


def write_estimates(estimates: EstimateSet, path_csv) -> None:
    """Rank-indexed estimate table plus a JSON sidecar with the metadata."""
    d = estimates.d
    frame = pd.DataFrame(
        {
            "rank": np.arange(1, d + 1),
            "sigma2_raw": estimates.sigma2_raw,
            "sigma2": estimates.sigma2,
            "phibar": estimates.phibar,
            "phi": estimates.phi,
            "mu": estimates.mu,
            "rho": estimates.rho,
            "a": estimates.a if estimates.a is not None else np.full(d, np.nan),
        }
    )
    frame.to_csv(path_csv, index=False)
    sidecar = dict(estimates.metadata)
    sidecar.update(
        {"lambda_hat": estimates.lambda_hat, "lambda_hat_log": estimates.lambda_hat_log}
    )
    dump_json(sidecar, Path(path_csv).with_suffix(".json"))


def write_calibration(result: CalibrationResult, path_json) -> None:
    payload = {
        "params": {"d": result.params.d, "a": result.params.a, "sigma2": result.params.sigma2},
        "lambda": result.lam,
        "feller": {"margins": result.feller.margins, "satisfied": result.feller.satisfied},
        "estimates": {
            "sigma2_raw": result.estimates.sigma2_raw,
            "sigma2": result.estimates.sigma2,
            "phibar": result.estimates.phibar,
            "phi": result.estimates.phi,
            "mu": result.estimates.mu,
            "rho": result.estimates.rho,
            "lambda_hat": result.estimates.lambda_hat,
            "lambda_hat_log": result.estimates.lambda_hat_log,
            "a": result.estimates.a,
            "metadata": result.estimates.metadata,
        },
        "provenance": result.provenance,
    }
    dump_json(payload, path_json)


def read_calibration(path_json) -> CalibrationResult:
    obj = json.loads(Path(path_json).read_text())
    params = ModelParams(
        d=int(obj["params"]["d"]),
        a=np.asarray(obj["params"]["a"], dtype=float),
        sigma2=np.asarray(obj["params"]["sigma2"], dtype=float),
    )
    e = obj["estimates"]
    estimates = EstimateSet(
        sigma2_raw=np.asarray(e["sigma2_raw"], dtype=float),
        sigma2=np.asarray(e["sigma2"], dtype=float),
        phibar=np.asarray(e["phibar"], dtype=float),
        phi=np.asarray(e["phi"], dtype=float),
        mu=np.asarray(e["mu"], dtype=float),
        rho=np.asarray(e["rho"], dtype=float),
        lambda_hat=float(e["lambda_hat"]),
        lambda_hat_log=float(e["lambda_hat_log"]),
        a=None if e["a"] is None else np.asarray(e["a"], dtype=float),
        metadata=e.get("metadata", {}),
    )
    feller = FellerReport(margins=np.asarray(obj["feller"]["margins"], dtype=float))
    return CalibrationResult(
        params=params,
        estimates=estimates,
        lam=float(obj["lambda"]),
        feller=feller,
        provenance=obj.get("provenance", {}),
    )


def write_params(params: ModelParams, path_json) -> None:
    Path(path_json).write_text(params.to_json() + "\n")


def read_params(path_json) -> ModelParams:
    return ModelParams.from_json(Path(path_json).read_text())


# ---------------------------------------------------------------------------
# moments / sweep / portfolio outputs
# ---------------------------------------------------------------------------


def write_moments(moments: StationaryMoments, path_csv) -> None:
    d = moments.mu.size
    frame = pd.DataFrame(
        {
            "rank": np.arange(1, d + 1),
            "mu": moments.mu,
            "rho": moments.rho,
            "mu_se": moments.mu_se,
            "rho_se": moments.rho_se,
        }
    )
    frame.to_csv(path_csv, index=False)
    dump_json(
        {
            "n_paths": moments.n_paths,
            "horizon": moments.horizon,
            "time_averaged": moments.time_averaged,
        },
        Path(path_csv).with_suffix(".json"),
    )


def read_moments(path_csv) -> StationaryMoments:
    frame = pd.read_csv(path_csv)
    meta = json.loads(Path(path_csv).with_suffix(".json").read_text())
    return StationaryMoments(
        mu=frame["mu"].to_numpy(),
        rho=frame["rho"].to_numpy(),
        mu_se=frame["mu_se"].to_numpy(),
        rho_se=frame["rho_se"].to_numpy(),
        n_paths=int(meta["n_paths"]),
        horizon=float(meta["horizon"]),
        time_averaged=bool(meta["time_averaged"]),
    )


def write_sweep(rows: list[dict], path_csv) -> None:
    pd.DataFrame(rows).to_csv(path_csv, index=False)
    dump_json(rows, Path(path_csv).with_suffix(".json"))


def write_weight_snapshot(weights: np.ndarray, path_csv, extra_columns: dict | None = None) -> None:
    d = weights.size
    data = {"rank": np.arange(1, d + 1), "weight": weights}
    if extra_columns:
        data.update(extra_columns)
    pd.DataFrame(data).to_csv(path_csv, index=False)


def write_wealth_path(path_obj, path_csv) -> None:
    frame = pd.DataFrame(
        {
            "time": path_obj.times,
            "log_wealth": path_obj.log_wealth,
            "log_relative": path_obj.log_relative,
        }
    )
    frame.to_csv(path_csv, index=False)
