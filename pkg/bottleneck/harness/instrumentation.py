"""
Rewrite-magnitude statistics from instrumented invocations.

Distances are taken per head vector: the pre- and post-rewrite key (or value)
of one head at one touched position.
"""

import csv
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..model.processor import InvocationRecord, LayerSnapshot
from ..model.selection import selection_dump_rows
from ..schemas.stats import HeadStats, InvocationStats
from .checkpoint import decode_tensor, encode_tensor

logger = logging.getLogger(__name__)

RECORDS_BLOB = "invocations.bin"
RECORDS_SIDECAR = "invocations.json"


def cosine_distance(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Row-wise 1 - a.b / (|a| |b|) over the last axis.

    Returns:
        tuple[np.ndarray, np.ndarray]: Distances in [0, 2] and a flag marking
            rows where either vector has zero norm (distance set to 0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norms = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    zero = norms == 0
    dots = np.sum(a * b, axis=-1)
    distance = 1.0 - dots / np.where(zero, 1.0, norms)
    distance = np.where(zero, 0.0, np.clip(distance, 0.0, 2.0))
    return distance, zero


def _mean(values: list[np.ndarray]) -> float | None:
    values = [v for v in values if v.size]
    if not values:
        return None
    return float(np.concatenate(values).mean())


def measure_rewrite_magnitudes(
    records: Sequence[InvocationRecord],
) -> tuple[list[InvocationStats], list[HeadStats]]:
    """
    Per-invocation group means and per (layer, head) means of cosine distance.

    Groups are the recalled rows, the recent-step rows and all touched rows.

    Raises:
        ValueError: If a record carries no snapshots.
    """
    series = []
    head_keys: dict[tuple[int, int], list[np.ndarray]] = defaultdict(list)
    head_values: dict[tuple[int, int], list[np.ndarray]] = defaultdict(list)
    for record in records:
        if record.snapshots is None:
            raise ValueError(f"invocation {record.index} has no snapshots; enable instrumentation")
        groups = {name: ([], []) for name in ("recalled", "recent", "all")}
        zero_norm = n_recalled = n_recent = 0
        for snap in record.snapshots:
            key_d, key_zero = cosine_distance(snap.pre_keys, snap.post_keys)
            value_d, value_zero = cosine_distance(snap.pre_values, snap.post_values)
            zero_norm += int(key_zero.sum() + value_zero.sum())
            recalled = snap.recalled.astype(bool)
            n_recalled += int(recalled.sum())
            n_recent += int((~recalled).sum())
            for name, rows in (("recalled", recalled), ("recent", ~recalled), ("all", slice(None))):
                groups[name][0].append(key_d[rows].reshape(-1))
                groups[name][1].append(value_d[rows].reshape(-1))
            for head in range(key_d.shape[1]):
                head_keys[(snap.layer, head)].append(key_d[:, head])
                head_values[(snap.layer, head)].append(value_d[:, head])
        if zero_norm:
            logger.warning("Invocation %d: %d zero-norm vectors scored as distance 0", record.index, zero_norm)
        series.append(
            InvocationStats(
                invocation=record.index,
                key_recalled=_mean(groups["recalled"][0]),
                key_recent=_mean(groups["recent"][0]),
                key_all=_mean(groups["all"][0]),
                value_recalled=_mean(groups["recalled"][1]),
                value_recent=_mean(groups["recent"][1]),
                value_all=_mean(groups["all"][1]),
                n_recalled=n_recalled,
                n_recent=n_recent,
                zero_norm=zero_norm,
            )
        )
    heads = [
        HeadStats(
            layer=layer,
            head=head,
            key_distance=_mean(head_keys[(layer, head)]) or 0.0,
            value_distance=_mean(head_values[(layer, head)]) or 0.0,
            count=int(sum(v.size for v in head_keys[(layer, head)])),
        )
        for layer, head in sorted(head_keys)
    ]
    return series, heads


def _write_rows(path: Path, header: list[str], rows: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: "" if value is None else value for key, value in row.items()})


def write_invocation_stats(path: Path, stats: Sequence[InvocationStats]) -> None:
    _write_rows(path, list(InvocationStats.model_fields), (s.model_dump() for s in stats))


def write_head_stats(path: Path, heads: Sequence[HeadStats]) -> None:
    _write_rows(path, list(HeadStats.model_fields), (h.model_dump() for h in heads))


def write_selection_dump(path: Path, records: Sequence[InvocationRecord]) -> None:
    rows = [
        row
        for record in records
        if record.selection is not None
        for row in selection_dump_rows(record.index, record.selection)
    ]
    _write_rows(path, ["invocation", "layer", "index", "alpha", "selected"], rows)


def save_invocation_records(directory: Path, records: Sequence[InvocationRecord]) -> None:
    """
    Write touched-row snapshots as a tensor blob plus a JSON sidecar.

    The sidecar lists, per invocation and layer, the positions, their group
    tag and the blob offsets of the pre/post key and value records.
    """
    blob = bytearray()
    sidecar = []
    for record in records:
        if record.snapshots is None:
            raise ValueError(f"invocation {record.index} has no snapshots; enable instrumentation")
        for snap in record.snapshots:
            offsets = {}
            for name in ("pre_keys", "pre_values", "post_keys", "post_values"):
                offsets[name] = len(blob)
                blob += encode_tensor(getattr(snap, name))
            sidecar.append(
                {
                    "invocation": record.index,
                    "step_span": list(record.step_span),
                    "layer": snap.layer,
                    "indices": [int(i) for i in snap.indices],
                    "groups": ["recalled" if r else "recent" for r in snap.recalled],
                    "offsets": offsets,
                }
            )
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / RECORDS_BLOB).write_bytes(bytes(blob))
        with open(directory / RECORDS_SIDECAR, "w", encoding="utf-8", newline="\n") as f:
            json.dump(sidecar, f, indent=2)
            f.write("\n")
    except OSError as e:
        raise RuntimeError(f"Failed to write invocation records to {directory}: {e}") from e


def load_invocation_records(directory: Path) -> list[InvocationRecord]:
    blob = (directory / RECORDS_BLOB).read_bytes()
    with open(directory / RECORDS_SIDECAR, encoding="utf-8") as f:
        sidecar = json.load(f)
    records: dict[int, InvocationRecord] = {}
    for entry in sidecar:
        arrays = {name: decode_tensor(blob, offset)[0] for name, offset in entry["offsets"].items()}
        snap = LayerSnapshot(
            layer=entry["layer"],
            indices=np.asarray(entry["indices"], dtype=np.int64),
            recalled=np.asarray([g == "recalled" for g in entry["groups"]], dtype=bool),
            **arrays,
        )
        record = records.setdefault(
            entry["invocation"],
            InvocationRecord(
                index=entry["invocation"],
                step_span=tuple(entry["step_span"]),
                selection=None,
                gate_values=[],
                snapshots=[],
            ),
        )
        record.snapshots.append(snap)
    return [records[i] for i in sorted(records)]
