"""Toggle-matrix ablations on a small task, with an ordered comparison table."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig, apply_overrides, from_dict, to_dict
from .data import load_dataset
from .energy import energy_report, record_firing_rates
from .model import SAFformer
from .tensor import ConfigError
from .train import evaluate, train_loop


@dataclass
class Cell:
    name: str
    overrides: dict = field(default_factory=dict)  # dotted key -> value


REFERENCE = "+both"

_BASE = {
    "baseline": {"model.attention": "ssa", "model.ffn": "smlp"},
    "+SAF": {"model.attention": "saf", "model.ffn": "smlp"},
    "+SMAG": {"model.attention": "ssa", "model.ffn": "smag"},
    "+both": {"model.attention": "saf", "model.ffn": "smag"},
}
_SAF = {
    "w/o SGM": {"model.sgm_mode": "fixed"},
    "w/o DWConv": {"model.use_dwconv_qk": False},
}
_SMAG = {
    "w/o PConv": {"model.no_pconv": True},
    "w/o multi-scale": {"model.no_multiscale": True},
}
_KERNELS = {f"kernels {a}+{b}": {"model.smag_kernels": [a, b]} for a, b in ((3, 5), (5, 7), (3, 7))}


def _cells(*groups) -> list[Cell]:
    """Cells outside the attention/FFN matrix start from the full model."""
    out = []
    for g in groups:
        start = {} if g is _BASE else _BASE["+both"]
        out.extend(Cell(name, {**start, **ov}) for name, ov in g.items())
    return out


PRESETS = {
    "full": lambda: _cells(_BASE, _SAF, _SMAG, _KERNELS),
    "table3": lambda: _cells(_BASE),
    "saf": lambda: _cells({"+both": _BASE["+both"]}, _SAF),
    "smag": lambda: _cells({"+both": _BASE["+both"]}, _SMAG),
    "kernels": lambda: _cells(_KERNELS),
}


def load_grid(grid: str) -> list[Cell]:
    """A preset name, or a YAML file with ``cells: [{name, set: {key: value}}]``."""
    if grid in PRESETS:
        return PRESETS[grid]()
    path = Path(grid)
    if not path.exists():
        raise ConfigError(f"unknown grid {grid!r}: not a preset ({', '.join(PRESETS)}) or a file")
    data = yaml.safe_load(path.read_text()) or {}
    cells = data.get("cells") if isinstance(data, dict) else None
    if not isinstance(cells, list) or not cells:
        raise ConfigError(f"{path}: expected a non-empty 'cells' list")
    out = []
    for i, c in enumerate(cells):
        if not isinstance(c, dict) or "name" not in c:
            raise ConfigError(f"{path}: cells[{i}] needs a name")
        extra = set(c) - {"name", "set"}
        if extra:
            raise ConfigError(f"unknown config key 'cells[{i}].{sorted(extra)[0]}'")
        out.append(Cell(str(c["name"]), dict(c.get("set") or {})))
    return out


def cell_config(base: RunConfig, cell: Cell) -> RunConfig:
    data = apply_overrides(to_dict(base), [f"{k}={json.dumps(v)}" for k, v in cell.overrides.items()])
    return from_dict(RunConfig, data).validate()


def run_cell(base: RunConfig, cell: Cell, out_dir: Path, energy_samples: int = 32, base_dir=None) -> dict:
    cfg = cell_config(base, cell)
    data = load_dataset(cfg.dataset, base_dir)
    model = SAFformer(cfg.model, seed=cfg.train.seed)
    n_params = sum(a.size for a in model.params.values())
    start = time.perf_counter()
    res = train_loop(model, data, cfg.train, out_dir=out_dir)
    ev = evaluate(model, data)
    rec = record_firing_rates(model, data.images[:energy_samples])
    rep = energy_report(model, rec.firing_rates(), total_spikes=rec.total_spikes())
    m = cfg.model
    return {
        "cell": cell.name,
        "attention": m.attention,
        "ffn": m.ffn,
        "sgm": m.sgm_mode,
        "dwconv": m.use_dwconv_qk,
        "pconv": not m.no_pconv,
        "multiscale": not m.no_multiscale,
        "kernels": "+".join(map(str, m.toggles.branch_kernels)),
        "params": int(n_params),
        "epochs": len(res.history),
        "train_acc": res.history[-1]["train_acc"] if res.history else None,
        "eval_acc": ev["accuracy"],
        "loss": ev["loss"],
        "energy_mJ": rep.total_mJ,
        "mean_fr": rep.mean_fr,
        "wall_s": time.perf_counter() - start,
    }


def _run_indexed(args):
    i, base, cell, out_dir, base_dir = args
    return i, run_cell(base, cell, out_dir, base_dir=base_dir)


def threads_from_env() -> int:
    raw = os.environ.get("SAFNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"SAFNET_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"SAFNET_THREADS must be a positive integer, got {raw!r}")
    return n


def run_ablation(base: RunConfig, cells: list[Cell], out_dir, threads: int = 1, base_dir=None) -> list[dict]:
    """Run every cell in its own subdirectory; rows come back in grid order.

    ``base_dir`` resolves relative dataset paths (normally the config's folder).
    """
    out_dir = Path(out_dir)
    for c in cells:
        cell_config(base, c)  # fail fast on bad overrides before any training
    jobs = [(i, base, c, out_dir / f"cell{i:02d}", base_dir) for i, c in enumerate(cells)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            results = dict(pool.map(_run_indexed, jobs))
    else:
        results = dict(map(_run_indexed, jobs))
    rows = [results[i] for i in range(len(cells))]
    add_deltas(rows)
    return rows


def add_deltas(rows: list[dict]) -> None:
    """Direction of effect relative to the full model row, when present."""
    ref = next((r for r in rows if r["cell"] == REFERENCE), None)
    for r in rows:
        if ref is None:
            r["d_acc"] = r["d_params"] = r["d_energy_mJ"] = None
            continue
        r["d_acc"] = r["eval_acc"] - ref["eval_acc"]
        r["d_params"] = r["params"] - ref["params"]
        r["d_energy_mJ"] = r["energy_mJ"] - ref["energy_mJ"]


COLUMNS = ["cell", "attention", "ffn", "sgm", "dwconv", "pconv", "multiscale", "kernels", "params",
           "train_acc", "eval_acc", "loss", "energy_mJ", "mean_fr", "d_acc", "d_params", "d_energy_mJ"]
_FORMATS = {"train_acc": "{:.4f}", "eval_acc": "{:.4f}", "loss": "{:.4f}", "mean_fr": "{:.4f}",
            "energy_mJ": "{:.4e}", "d_acc": "{:+.4f}", "d_params": "{:+d}", "d_energy_mJ": "{:+.3e}"}


def _fmt(col: str, v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    return _FORMATS.get(col, "{}").format(v)


def to_text(rows: list[dict]) -> str:
    cells = [[_fmt(c, r[c]) for c in COLUMNS] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(COLUMNS, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()) if rows else COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def write_outputs(rows: list[dict], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clean = [{k: (float(v) if isinstance(v, np.floating) else v) for k, v in r.items()} for r in rows]
    (out_dir / "ablation.json").write_text(json.dumps({"rows": clean}, indent=2))
    (out_dir / "ablation.csv").write_text(to_csv(clean))
