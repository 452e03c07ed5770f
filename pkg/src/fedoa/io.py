"""On-disk formats: reports (JSON), traces (CSV), adapter checkpoints (JSON).

Floats are always written with 17 significant digits so that a value read
back is bit-identical to the one written.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, List

import numpy as np

from .metrics import RunReport
from .nn import LoraAdapter


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    text = format(x, ".17g")
    if not any(c in text for c in ".eEn"):
        text += ".0"
    return text


def dumps(obj: Any, indent: int = 2) -> str:
    """JSON text with fixed key order as given and 17-digit floats."""
    pad = " " * indent

    def enc(o, depth):
        if o is None or isinstance(o, bool):
            return json.dumps(o)
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return _fmt_float(float(o))
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, np.ndarray):
            return enc(o.tolist(), depth)
        inner = pad * (depth + 1)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{inner}{json.dumps(str(k))}: {enc(v, depth + 1)}" for k, v in o.items()]
            return "{\n" + ",\n".join(items) + "\n" + pad * depth + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in o):
                return "[" + ", ".join(enc(v, depth) for v in o) + "]"
            return "[\n" + ",\n".join(inner + enc(v, depth + 1) for v in o) + "\n" + pad * depth + "]"
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return enc(obj, 0) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


# -- adapters -----------------------------------------------------------------


def adapter_to_json(ad: LoraAdapter, layer_indices=None) -> List[Dict[str, Any]]:
    """One ``{layer_index, rank, scale, A, B}`` object per adapted layer."""
    idx = list(range(len(ad.layers))) if layer_indices is None else list(layer_indices)
    return [
        {"layer_index": i, "rank": ad.rank, "scale": ad.scale, "A": A.tolist(), "B": B.tolist()}
        for i, (A, B) in zip(idx, ad.layers)
    ]


def adapter_from_json(doc: List[Dict[str, Any]]) -> LoraAdapter:
    if not doc:
        raise ValueError("checkpoint has no layers")
    ranks = {entry["rank"] for entry in doc}
    scales = {entry["scale"] for entry in doc}
    if len(ranks) != 1 or len(scales) != 1:
        raise ValueError("layers disagree on rank or scale")
    ordered = sorted(doc, key=lambda e: e["layer_index"])
    layers = [(np.array(e["A"], dtype=np.float64), np.array(e["B"], dtype=np.float64)) for e in ordered]
    return LoraAdapter(layers, ranks.pop(), float(scales.pop()))


def save_adapter(path, ad: LoraAdapter, layer_indices=None) -> None:
    write_json(path, adapter_to_json(ad, layer_indices))


def load_adapter(path) -> LoraAdapter:
    return adapter_from_json(json.loads(Path(path).read_text()))


# -- traces -------------------------------------------------------------------

TRACE_COLUMNS = ("round", "client_id", "risk", "grad_norm_sq", "feat_dist")
TRAJECTORY_COLUMNS = ("round", "mean_risk", "mean_grad_norm_sq", "mean_feat_dist", "global_risk", "bytes")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_traces_csv(path, report: RunReport, append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not append or fh.tell() == 0:
            writer.writerow(TRACE_COLUMNS)
        for r in report.rounds:
            for e in r.entries:
                writer.writerow([_cell(v) for v in (r.round, e.client_id, e.risk, e.grad_norm_sq, e.feat_dist)])


def write_trajectory_csv(path, report: RunReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for r in report.rounds:
            row = (r.round, r.mean("risk"), r.mean("grad_norm_sq"), r.mean("feat_dist"), r.global_risk, r.bytes_communicated)
            writer.writerow([_cell(v) for v in row])


def write_run_artifacts(out_dir, report: RunReport, layer_indices=None) -> Path:
    """``report.json``, ``traces.csv``, ``trajectory.csv``, ``timing.json`` and ``adapters/*.json``."""
    out = Path(out_dir)
    (out / "adapters").mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report.to_dict())
    write_json(out / "timing.json", {"wall_clock_s": report.wall_clock_s})
    write_traces_csv(out / "traces.csv", report)
    write_trajectory_csv(out / "trajectory.csv", report)
    for name, ad in report.adapters.items():
        save_adapter(out / "adapters" / f"{name}.json", ad, layer_indices)
    return out
