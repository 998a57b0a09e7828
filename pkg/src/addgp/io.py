"""File formats for counts, covariates, configurations, draws and summaries.

* counts: CSV, first column taxon id, header row sample ids, integer cells.
* covariates: long CSV with columns ``sample_id, covariate, value``.
* configs: JSON.
* draws: one long CSV per parameter family with columns
  ``draw, d, n, value``; numbers use the shortest round-trip decimal form.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, DimensionMismatch, EmptyDraws

FAMILY_PREFIX = "f_"


def fmt(x):
    """Shortest decimal string that round-trips the float64 ``x``."""
    return repr(float(x))


def read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}", field=str(path)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                          field=str(path)) from exc


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj):
    Path(path).write_text(canonical_json(obj))


def digest(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode())
    return h.hexdigest()


# -- counts and covariates -------------------------------------------------------

def read_counts(path):
    """Return ``(Y, taxa, samples)`` from a wide count table."""
    try:
        df = pd.read_csv(path, index_col=0)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigError(f"cannot parse count table: {exc}", field=str(path)) from exc
    vals = df.to_numpy()
    if not np.issubdtype(vals.dtype, np.number) or np.any(~np.isfinite(vals.astype(float))):
        raise ConfigError("count cells must be numeric", field=str(path))
    if np.any(vals < 0) or np.any(vals != np.round(vals)):
        raise ConfigError("counts must be nonnegative integers", field=str(path))
    return vals.astype(np.int64), [str(t) for t in df.index], [str(s) for s in df.columns]


def write_counts(path, Y, taxa=None, samples=None):
    Y = np.asarray(Y, dtype=np.int64)
    taxa = taxa or [f"taxon{d + 1}" for d in range(Y.shape[0])]
    samples = samples or [f"s{n + 1}" for n in range(Y.shape[1])]
    lines = ["taxon," + ",".join(samples)]
    for t, row in zip(taxa, Y):
        lines.append(t + "," + ",".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_covariates(path, samples):
    """Long-format covariates aligned to ``samples``.

    Numeric covariates come back as float arrays, others as string arrays.
    """
    try:
        df = pd.read_csv(path, dtype={"sample_id": str, "covariate": str, "value": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigError(f"cannot parse covariates: {exc}", field=str(path)) from exc
    missing_cols = {"sample_id", "covariate", "value"} - set(df.columns)
    if missing_cols:
        raise ConfigError(f"missing columns {sorted(missing_cols)}", field=str(path))
    out = {}
    for name, sub in df.groupby("covariate", sort=True):
        sub = sub.set_index("sample_id")["value"]
        if sub.index.duplicated().any():
            raise ConfigError(f"duplicate sample ids for covariate {name!r}", field=str(path))
        absent = [s for s in samples if s not in sub.index]
        if absent:
            raise DimensionMismatch(
                f"covariate {name!r} has no value for sample(s) {', '.join(absent[:5])}"
            )
        vals = sub.loc[samples].to_numpy()
        try:
            out[name] = vals.astype(float)
        except ValueError:
            out[name] = vals.astype(str)
    return out


def write_covariates(path, covariates, samples):
    lines = ["sample_id,covariate,value"]
    for name in sorted(covariates):
        for s, v in zip(samples, np.asarray(covariates[name])):
            lines.append(f"{s},{name},{fmt(v) if isinstance(v, (float, np.floating)) else v}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- long matrices -----------------------------------------------------------------

def write_long(path, arr, index_names=("draw", "d", "n")):
    """Write an array in long form, one row per element, C order."""
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != len(index_names):
        raise ValueError(f"array has {arr.ndim} axes, expected {len(index_names)}")
    idx = np.indices(arr.shape).reshape(arr.ndim, -1).T
    values = map(fmt, arr.ravel().tolist())
    body = "\n".join(",".join(map(str, i)) + "," + v for i, v in zip(idx.tolist(), values))
    Path(path).write_text(",".join(index_names) + ",value\n" + body + ("\n" if body else ""))


def read_long(path, index_names=("draw", "d", "n")):
    df = pd.read_csv(path, float_precision="round_trip")
    if df.empty:
        raise EmptyDraws(f"{path} contains no rows")
    shape = tuple(int(df[c].max()) + 1 for c in index_names)
    arr = np.full(shape, np.nan)
    arr[tuple(df[c].to_numpy() for c in index_names)] = df["value"].to_numpy()
    return arr


# -- draws -------------------------------------------------------------------------

def draws_families(draws):
    """Name -> (S, ., .) array for every persisted parameter family."""
    fam = {"H": draws.H, "Sigma": draws.Sigma, "F": draws.F, "B": draws.B, "linear": draws.linear}
    for name, f in draws.components.items():
        fam[FAMILY_PREFIX + name] = f
    if draws.offset is not None:
        fam["offset"] = draws.offset[:, :, None]
    return fam


def write_draws(out_dir, draws):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for name, arr in draws_families(draws).items():
        write_long(out / f"{name}.csv", arr)
        names.append(name)
    return names


def read_draws(draw_dir, families=None):
    d = Path(draw_dir)
    manifest = read_json(d / "manifest.json")
    families = families or manifest.get("families", [])
    if not families:
        raise EmptyDraws(f"no draw families listed in {d / 'manifest.json'}")
    out = {}
    for name in families:
        p = d / f"{name}.csv"
        if not p.exists():
            raise EmptyDraws(f"missing draws file {p}")
        out[name] = read_long(p)
    return out, manifest


def write_matrix_long(path, M):
    """Write a 2-d array (truth tables) with columns ``d, n, value``."""
    write_long(path, np.asarray(M, dtype=float), index_names=("d", "n"))


def read_matrix_long(path):
    return read_long(path, index_names=("d", "n"))


def write_table(path, rows, columns):
    """Write dict rows with canonical float formatting."""
    lines = [",".join(columns)]
    for r in rows:
        cells = []
        for c in columns:
            v = r[c]
            cells.append(fmt(v) if isinstance(v, (float, np.floating)) else str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")
