"""Config loading and deterministic JSON/CSV report writing."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .cvp_core import DiscreteMeasure, Jet, SpacetimeGrid


class ConfigError(ValueError):
    pass


SCENARIO_DEFAULTS = {
    "kernel": {"family": "klein_gordon", "c": 0.7, "mu": 0.5, "kappa0": 1.0, "window": [4.0, 9.0]},
    "grid": {"T": 14, "X": 3},
    "w_in": [[0.3, 0.1], [0.0, -0.2], [0.1, 0.0]],
    "t_in": 3,
    "t_out": 11,
    "order": 2,
    "lambda": 0.8,
    "n_max": 6,
    "small_inner": True,
    "options": {},
}

_TYPES = {"kernel": dict, "grid": dict, "w_in": list, "t_in": int, "t_out": int, "order": int,
          "lambda": (int, float), "n_max": int, "small_inner": bool, "options": dict}


def _check_type(key: str, value: Any) -> None:
    want = _TYPES[key]
    if isinstance(value, bool) and want is not bool:
        raise ConfigError(f"field {key!r} has the wrong type")
    if not isinstance(value, want):
        raise ConfigError(f"field {key!r} has the wrong type")


def validate_config(raw: Any) -> dict:
    """Merge a scenario document with the defaults and check field types and ranges."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SCENARIO_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    cfg = json.loads(json.dumps(SCENARIO_DEFAULTS))
    for k, v in raw.items():
        _check_type(k, v)
        cfg[k] = v
    g = cfg["grid"]
    if not all(isinstance(g.get(k), int) and not isinstance(g.get(k), bool) and g[k] > 0 for k in ("T", "X")):
        raise ConfigError("grid needs positive integers T and X")
    if "family" not in cfg["kernel"]:
        raise ConfigError("kernel needs a family")
    if cfg["order"] < 1 or cfg["n_max"] < 0 or cfg["lambda"] < 0:
        raise ConfigError("order must be >= 1, n_max >= 0 and lambda >= 0")
    try:
        parse_complex_vector(cfg["w_in"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"w_in must be a list of [re, im] pairs: {e}") from None
    return cfg


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return validate_config({})
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}") from None
    return validate_config(raw)


def parse_complex_vector(pairs: Sequence) -> np.ndarray:
    out = []
    for p in pairs:
        if len(p) != 2:
            raise ValueError("entries must be [re, im]")
        out.append(complex(float(p[0]), float(p[1])))
    return np.array(out, dtype=complex)


def complex_pairs(z: Iterable[complex]) -> list:
    return [[float(np.real(x)), float(np.imag(x))] for x in z]


# ---------------------------------------------------------------------------
# serialization of measures and jets


def measure_to_dict(mu: DiscreteMeasure) -> dict:
    return {"grid": mu.grid.to_dict(), "points": mu.points.tolist(), "weights": mu.weights.tolist()}


def measure_from_dict(d: dict) -> DiscreteMeasure:
    return DiscreteMeasure(SpacetimeGrid.from_dict(d["grid"]), np.asarray(d["points"], dtype=float),
                           np.asarray(d["weights"], dtype=float))


def jet_to_dict(j: Jet) -> dict:
    return {"scalar": j.scalar.tolist(), "vector": j.vector.tolist()}


def jet_from_dict(d: dict) -> Jet:
    return Jet(np.asarray(d["scalar"], dtype=float), np.asarray(d["vector"], dtype=float))


# ---------------------------------------------------------------------------
# writers


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        return [_plain(obj.real), _plain(obj.imag)]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def write_json(path: str | Path, obj: Any) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cell(x: Any) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(x) for x in r])
