"""Daily capitalization panels: ingestion, ranking and name alignment.

A panel holds, for each observation date, exactly ``d`` assets with strictly
positive capitalizations, stored in rank order (descending capitalization,
ties broken by ascending identifier). Membership on every date after the
first is the top ``d`` by the previous date's capitalizations, which is the
convention the estimators expect.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DataQualityError, IngestionError, InvalidInputError, DataQualityWarning
from .model import rank_names
from .simulate import Trajectory

TRADING_DAYS_PER_YEAR = 252.0


@dataclass
class PanelData:
    """Cleaned top-d capitalization panel in rank order.

    Attributes:
        times: observation times in years, strictly increasing.
        ids: (n_dates, d) integer codes into ``id_table``, rank order per row.
        caps: (n_dates, d) capitalizations, descending per row.
        id_table: code -> identifier string.
        date_labels: original date strings if the input carried calendar
            dates, else None.
        substitutions: membership slots filled by the next-largest previous
            day asset because the selected one was absent.
        rejected_rows: input rows dropped for non-positive capitalization.
    """

    times: np.ndarray
    ids: np.ndarray
    caps: np.ndarray
    id_table: list[str]
    date_labels: Optional[list[str]] = None
    substitutions: int = 0
    rejected_rows: int = 0
    _pos_cache: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.ids = np.asarray(self.ids)
        self.caps = np.asarray(self.caps, dtype=float)
        if self.caps.shape != self.ids.shape or self.caps.shape[0] != self.times.size:
            raise InvalidInputError("panel arrays have inconsistent shapes")
        if np.any(np.diff(self.times) <= 0):
            raise IngestionError("observation times must be strictly increasing")
        if np.any(self.caps <= 0) or not np.all(np.isfinite(self.caps)):
            raise IngestionError("capitalizations must be strictly positive and finite")

    @property
    def d(self) -> int:
        return self.ids.shape[1]

    @property
    def n_dates(self) -> int:
        return self.times.size

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def span(self) -> float:
        return float(self.times[-1] - self.times[0])

    def weights(self) -> np.ndarray:
        """Market weights per date, rank order (rows sum to one)."""
        return self.caps / self.caps.sum(axis=1, keepdims=True)

    def total_caps(self) -> np.ndarray:
        return self.caps.sum(axis=1)

    def align_next_positions(self) -> np.ndarray:
        """Column of each date's names within the next date's row.

        ``pos[i, k]`` is the rank-order column of name ``ids[i, k]`` on date
        ``i + 1``, or -1 if that name is absent there. Cached.
        """
        if self._pos_cache is None:
            self._pos_cache = _align_next(self.ids.astype(np.int64))
        return self._pos_cache

    def date_label(self, i: int) -> str:
        if self.date_labels is not None:
            return self.date_labels[i]
        return repr(float(self.times[i]))

    def to_rows(self) -> list[tuple[str, str, float]]:
        """Flatten back to (date, id, cap) rows (rank order within dates)."""
        rows = []
        for i in range(self.n_dates):
            label = self.date_label(i)
            for k in range(self.d):
                rows.append((label, self.id_table[self.ids[i, k]], float(self.caps[i, k])))
        return rows


def _align_next(ids: np.ndarray) -> np.ndarray:
    n, d = ids.shape
    if n < 2:
        return np.empty((0, d), dtype=np.int64)
    nxt = ids[1:]
    perm = np.argsort(nxt, axis=1)
    sorted_next = np.take_along_axis(nxt, perm, axis=1)
    span = int(ids.max()) + 1
    offsets = (np.arange(n - 1, dtype=np.int64) * span)[:, None]
    flat_sorted = (sorted_next + offsets).ravel()
    targets = (ids[:-1] + offsets).ravel()
    idx = np.searchsorted(flat_sorted, targets)
    idx_c = np.minimum(idx, flat_sorted.size - 1)
    found = flat_sorted[idx_c] == targets
    cols = np.where(found, perm.ravel()[idx_c], -1)
    return cols.reshape(n - 1, d)


def _parse_date_key(raw) -> tuple[float, Optional[str]]:
    """Interpret a date cell: numeric -> years, anything else -> calendar label."""
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw), None
    text = str(raw).strip()
    try:
        return float(text), None
    except ValueError:
        return np.nan, text


def ingest_panel(
    rows: Iterable[tuple],
    d: int,
    strict: bool = False,
) -> PanelData:
    """Build a validated top-d panel from raw (date, id, cap) rows.

    Membership on date ``i >= 1`` is the ``d`` assets with the largest
    capitalizations on date ``i - 1``; the first date ranks by its own
    capitalizations. When a selected asset has no observation on date ``i``
    the next-largest previous-day asset takes the slot (counted as a
    substitution). Calendar date labels are spaced 1/252 years apart;
    numeric dates are taken as years directly.
    """
    if d < 2:
        raise InvalidInputError("d must be at least 2")

    by_date: dict = {}
    labels: dict = {}
    rejected = 0
    duplicates = []
    for raw_date, raw_id, raw_cap in rows:
        t, label = _parse_date_key(raw_date)
        key = label if label is not None else t
        cap = float(raw_cap)
        asset = str(raw_id)
        cross = by_date.setdefault(key, {})
        if asset in cross:
            duplicates.append((key, asset))
            continue
        if not np.isfinite(cap) or cap <= 0.0:
            rejected += 1
            continue
        cross[asset] = cap
        labels[key] = label
    if duplicates:
        shown = ", ".join(f"({dte!r}, {aid!r})" for dte, aid in duplicates[:5])
        raise IngestionError(f"duplicate (date, id) rows: {shown}" + (" ..." if len(duplicates) > 5 else ""))
    if rejected:
        msg = f"{rejected} rows rejected for non-positive capitalization"
        if strict:
            raise DataQualityError(msg)
        warnings.warn(msg, DataQualityWarning)
    if not by_date:
        raise IngestionError("no valid rows")

    calendar_mode = any(lbl is not None for lbl in labels.values())
    if calendar_mode and not all(lbl is not None for lbl in labels.values()):
        raise IngestionError("date column mixes calendar labels and numeric times")
    keys = sorted(by_date.keys())

    n = len(keys)
    if calendar_mode:
        times = np.arange(n, dtype=float) / TRADING_DAYS_PER_YEAR
        date_labels = [str(k) for k in keys]
    else:
        times = np.array([float(k) for k in keys])
        date_labels = None

    id_table = sorted({asset for cross in by_date.values() for asset in cross})
    code_of = {asset: c for c, asset in enumerate(id_table)}

    ids = np.empty((n, d), dtype=np.int64)
    caps = np.empty((n, d), dtype=float)
    substitutions = 0
    prev_order: Optional[list[str]] = None
    for i, key in enumerate(keys):
        cross = by_date[key]
        if len(cross) < d:
            raise IngestionError(
                f"date {key!r} has only {len(cross)} assets, need at least {d}", date=key
            )
        if prev_order is None:
            members = sorted(cross, key=lambda a: (-cross[a], a))[:d]
        else:
            members = []
            for asset in prev_order:
                if asset in cross:
                    members.append(asset)
                    if len(members) == d:
                        break
                else:
                    substitutions += 1
            if len(members) < d:
                raise IngestionError(
                    f"date {key!r} retains only {len(members)} of the previous day's assets",
                    date=key,
                )
        members.sort(key=lambda a: (-cross[a], a))
        ids[i] = [code_of[a] for a in members]
        caps[i] = [cross[a] for a in members]
        prev_order = sorted(cross, key=lambda a: (-cross[a], a))
    if substitutions:
        msg = f"{substitutions} membership slots filled by substitution"
        if strict:
            raise DataQualityError(msg)
        warnings.warn(msg, DataQualityWarning)

    return PanelData(
        times=times,
        ids=ids,
        caps=caps,
        id_table=id_table,
        date_labels=date_labels,
        substitutions=substitutions,
        rejected_rows=rejected,
    )


def panel_from_trajectory(traj: Trajectory, id_prefix: str = "A") -> PanelData:
    """Turn a simulated trajectory into a synthetic panel.

    Identifiers are assigned by initial rank (``A0001`` is the largest asset
    at the first sample) and then follow their name for the whole panel, so
    rank switches are visible exactly as they would be in market data.
    """
    if traj.n_samples < 1:
        raise InvalidInputError("trajectory has no samples")
    initial = rank_names(traj.weights[0])
    width = max(4, len(str(traj.d)))
    name_id = [""] * traj.d
    for rank, name in enumerate(initial.name_of_rank):
        name_id[name] = f"{id_prefix}{rank + 1:0{width}d}"
    caps_by_name = traj.capitalizations()

    id_table = sorted(name_id)
    code_of = {a: c for c, a in enumerate(id_table)}
    codes_by_name = np.array([code_of[a] for a in name_id])

    # rank order with lexicographic tie-break on the identifier
    order = np.lexsort((codes_by_name[None, :].repeat(traj.n_samples, axis=0), -caps_by_name), axis=1)
    ids = np.take_along_axis(np.broadcast_to(codes_by_name, caps_by_name.shape), order, axis=1)
    caps = np.take_along_axis(caps_by_name, order, axis=1)
    return PanelData(
        times=traj.times.copy(),
        ids=np.ascontiguousarray(ids),
        caps=np.ascontiguousarray(caps),
        id_table=id_table,
    )


def split_panel(panel: PanelData, at: float) -> tuple[PanelData, PanelData]:
    """Split into two panels at time ``at`` (first panel takes times <= at)."""
    mask = panel.times <= at
    n_in = int(mask.sum())
    if n_in < 2 or panel.n_dates - n_in < 2:
        raise InvalidInputError("split leaves fewer than two dates on one side")

    def make(sl):
        return PanelData(
            times=panel.times[sl].copy(),
            ids=panel.ids[sl].copy(),
            caps=panel.caps[sl].copy(),
            id_table=list(panel.id_table),
            date_labels=None if panel.date_labels is None else list(panel.date_labels[sl]),
        )

    return make(slice(0, n_in)), make(slice(n_in, panel.n_dates))
