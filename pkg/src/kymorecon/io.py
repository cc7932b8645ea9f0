"""File formats: experiment config (JSON), image stacks (JSON header plus raw
little-endian payload), geometry/photometry/kymograph/diagnostics tables
(CSV), kymograph heatmaps (16-bit PGM with a JSON sidecar) and run manifests.

Every writer goes through :func:`atomic_write`, so a crashed run never leaves
a half-written file behind. Readers validate against the domain types and
raise :class:`~kymorecon._validation.FormatError` instead of repairing input.
"""

import csv
import dataclasses
import hashlib
import io as _io
import json
import os
import platform
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import sklearn

from ._validation import FormatError
from .baselines import Kymograph
from .geometry import LineCurve, SplineCurve
from .microscope import BackgroundModel, CameraModel, ImagingConfig, PsfModel
from .photometry import PhotometryVector
from .solver import SolverConfig

# ---------------------------------------------------------------- plumbing


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _csv_text(header, rows):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _read_csv(path, header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if got != list(header):
            raise FormatError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        rows = [r for r in reader if r]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise FormatError(f"{path}: row {i + 2} has {len(r)} fields, expected {len(header)}")
    return rows


def _num(text, path, what):
    try:
        value = float(text)
    except ValueError:
        raise FormatError(f"{path}: {what} is not a number: {text!r}") from None
    if not np.isfinite(value):
        raise FormatError(f"{path}: {what} is not finite")
    return value


def _fmt(x):
    # repr of a Python float is the shortest string that round-trips exactly
    return repr(float(x))


def write_table(path, rows, columns):
    """Generic CSV for sweep results: ``rows`` is a list of dicts."""
    return atomic_write(path, _csv_text(columns, [[r[c] for c in columns] for r in rows]))


def read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ config

_SECTIONS = {
    "imaging": ImagingConfig,
    "camera": CameraModel,
    "psf": PsfModel,
    "solver": SolverConfig,
    "background": BackgroundModel,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to simulate and reconstruct; defaults are the reference imaging setup."""

    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    camera: CameraModel = field(default_factory=CameraModel)
    psf: PsfModel = field(default_factory=PsfModel)
    solver: SolverConfig = field(default_factory=SolverConfig)
    background: BackgroundModel = field(default_factory=BackgroundModel)
    seed: int = 0

    @property
    def prior(self):
        return self.solver.innovation_prior

    def to_dict(self):
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        out["seed"] = self.seed
        return out

    def replace(self, **sections):
        """Copy with whole sections or individual ``section__field`` overrides."""
        data = self.to_dict()
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                data[sec][name] = value
            else:
                data[key] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
        return config_from_dict(data)

    def digest(self):
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def config_from_dict(data):
    if not isinstance(data, dict):
        raise FormatError("config must be a JSON object")
    unknown = set(data) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise FormatError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        values = data.get(name, {}) or {}
        if not isinstance(values, dict):
            raise FormatError(f"config section {name!r} must be an object")
        allowed = {f.name for f in dataclasses.fields(cls) if f.init}
        extra = set(values) - allowed
        if extra:
            raise FormatError(f"unknown field(s) in {name}: {', '.join(sorted(extra))}")
        try:
            kwargs[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"invalid {name} config: {exc}") from exc
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise FormatError(f"invalid seed: {seed!r}")
    return ExperimentConfig(seed=seed, **kwargs)


def read_config(path):
    """Parse a JSON config; missing sections and fields take their defaults."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return ExperimentConfig()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def write_config(config, path):
    return atomic_write(path, canonical_json(config.to_dict()))


# ------------------------------------------------------------------ stacks

_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


@dataclass(frozen=True, eq=False)
class StackFile:
    data: np.ndarray
    header: dict

    @property
    def t_index(self):
        return self.header["t_index"]


def _stack_paths(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".raw") else path
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".raw")


def write_stack(path, data, imaging, t_index=0):
    """Write a u16 grey stack or f32 photon stack as ``<path>.json`` + ``<path>.raw``."""
    data = np.asarray(data)
    if data.dtype == np.uint16:
        code = "u16"
    elif np.issubdtype(data.dtype, np.floating):
        code = "f32"
        if not np.all(np.isfinite(data)):
            raise FormatError("photon stacks must be finite")
    else:
        raise FormatError(f"unsupported stack dtype {data.dtype}; use uint16 or float")
    if data.ndim != 3:
        raise FormatError("stacks are 3-D arrays (z, y, x)")
    header = {
        "shape": list(data.shape),
        "dtype": code,
        "order": "z,y,x",
        "pixel_size_um": imaging.pixel_size,
        "z_spacing_um": imaging.z_spacing,
        "t_index": int(t_index),
        "acquisition_s": imaging.acquisition_time,
    }
    head, raw = _stack_paths(path)
    atomic_write(raw, np.ascontiguousarray(data, dtype=_DTYPES[code]).tobytes())
    atomic_write(head, canonical_json(header))
    return head


def read_stack(path):
    head, raw = _stack_paths(path)
    try:
        header = json.loads(head.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{head}: cannot read stack header ({exc})") from exc
    for key in ("shape", "dtype", "order", "pixel_size_um", "z_spacing_um", "t_index", "acquisition_s"):
        if key not in header:
            raise FormatError(f"{head}: header misses {key!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"{head}: dtype must be f32 or u16")
    if header["order"] != "z,y,x":
        raise FormatError(f"{head}: only z,y,x order is supported")
    shape = tuple(header["shape"])
    if len(shape) != 3 or any((not isinstance(s, int)) or s < 1 for s in shape):
        raise FormatError(f"{head}: shape must be three positive integers")
    dtype = _DTYPES[header["dtype"]]
    payload = raw.read_bytes()
    if len(payload) != int(np.prod(shape)) * dtype.itemsize:
        raise FormatError(f"{raw}: payload holds {len(payload)} bytes, header shape {shape} needs "
                          f"{int(np.prod(shape)) * dtype.itemsize}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if header["dtype"] == "f32" and (not np.all(np.isfinite(data)) or np.any(data < 0)):
        raise FormatError(f"{raw}: photon stacks must be finite and nonnegative")
    return StackFile(data.copy(), header)


def imaging_from_header(header):
    """Imaging geometry implied by a stack header."""
    nz, ny, nx = header["shape"]
    return ImagingConfig(nz, ny, nx, float(header["pixel_size_um"]), float(header["z_spacing_um"]),
                         float(header["acquisition_s"]))


# ---------------------------------------------------------------- geometry

GEOMETRY_HEADER = ["frame", "kind"] + [f"p{i}{a}" for i in range(1, 5) for a in "xyz"] + ["length_um"]


def write_geometry(curves, path):
    rows = []
    for c in curves:
        if isinstance(c, LineCurve):
            pts = list(c.origin) + list(c.direction) + [""] * 6
            rows.append([c.frame_index, "line"] + [_fmt(v) if v != "" else "" for v in pts] + [_fmt(c.length)])
        elif isinstance(c, SplineCurve):
            pts = [v for p in c.control_points for v in p]
            rows.append([c.frame_index, "spline"] + [_fmt(v) for v in pts] + [""])
        else:
            raise TypeError(f"unsupported curve type {type(c).__name__}")
    return atomic_write(path, _csv_text(GEOMETRY_HEADER, rows))


def read_geometry(path):
    """Curves of a geometry CSV, in file order (one per frame)."""
    curves = []
    for i, r in enumerate(_read_csv(path, GEOMETRY_HEADER)):
        where = f"row {i + 2}"
        try:
            frame = int(r[0])
        except ValueError:
            raise FormatError(f"{path}: {where}: frame must be an integer") from None
        kind = r[1].strip()
        try:
            if kind == "line":
                pts = [_num(v, path, where) for v in r[2:8]]
                curves.append(LineCurve(tuple(pts[:3]), tuple(pts[3:]), _num(r[14], path, where), frame))
            elif kind in ("spline", "quadratic-spline"):
                pts = [_num(v, path, where) for v in r[2:14]]
                curves.append(SplineCurve(tuple(tuple(pts[3 * k:3 * k + 3]) for k in range(4)), frame))
            else:
                raise FormatError(f"{path}: {where}: unknown curve kind {kind!r}")
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{path}: {where}: {exc}") from exc
    if not curves:
        raise FormatError(f"{path}: no curves")
    return curves


# -------------------------------------------------------------- photometry

PHOTOMETRY_HEADER = ["bin_index", "arc_length_um", "intensity"]


def write_photometry(phi, basis, path):
    values = phi.values if isinstance(phi, PhotometryVector) else np.asarray(phi, dtype=float)
    rows = [[p, _fmt(e), _fmt(v)] for p, (e, v) in enumerate(zip(basis.centres, values))]
    return atomic_write(path, _csv_text(PHOTOMETRY_HEADER, rows))


def read_photometry(path):
    """Return ``(arc_length, PhotometryVector)`` from a photometry CSV."""
    rows = _read_csv(path, PHOTOMETRY_HEADER)
    if not rows:
        raise FormatError(f"{path}: no bins")
    idx = [int(r[0]) for r in rows]
    if idx != list(range(len(rows))):
        raise FormatError(f"{path}: bin indices must be 0, 1, 2, ...")
    ell = np.array([_num(r[1], path, "arc_length_um") for r in rows])
    vals = np.array([_num(r[2], path, "intensity") for r in rows])
    try:
        return ell, PhotometryVector(vals)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -------------------------------------------------------------- kymographs

KYMOGRAPH_HEADER = ["frame", "time_s", "arc_length_um", "intensity", "kind"]


def write_kymograph(kymo, path):
    if len(kymo) == 0:
        raise ValueError("cannot write an empty kymograph")
    rows = [[int(f), _fmt(t), _fmt(e), _fmt(v), kymo.kind]
            for f, t, e, v in zip(kymo.frame, kymo.time, kymo.arc_length, kymo.intensity)]
    return atomic_write(path, _csv_text(KYMOGRAPH_HEADER, rows))


def read_kymograph(path):
    rows = _read_csv(path, KYMOGRAPH_HEADER)
    if not rows:
        raise FormatError(f"{path}: empty kymograph")
    kinds = {r[4] for r in rows}
    if len(kinds) != 1:
        raise FormatError(f"{path}: mixed kymograph kinds {sorted(kinds)}")
    cols = list(zip(*rows))
    try:
        return Kymograph(
            np.array([int(v) for v in cols[0]]),
            np.array([_num(v, path, "time_s") for v in cols[1]]),
            np.array([_num(v, path, "arc_length_um") for v in cols[2]]),
            np.array([_num(v, path, "intensity") for v in cols[3]]),
            kinds.pop(),
        )
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: {exc}") from exc


_PGM_MAX = 65535


def heatmap_levels(matrix):
    """Linear map of finite values onto 0..65535; NaN (padding) maps to 0.

    A constant image maps to mid-grey (32768).
    """
    m = np.asarray(matrix, dtype=float)
    finite = np.isfinite(m)
    if not finite.any():
        raise ValueError("heatmap has no finite values")
    lo, hi = float(m[finite].min()), float(m[finite].max())
    out = np.zeros(m.shape, dtype=np.uint16)
    if hi > lo:
        out[finite] = np.rint((m[finite] - lo) / (hi - lo) * _PGM_MAX).astype(np.uint16)
    else:
        out[finite] = (_PGM_MAX + 1) // 2
    return out, lo, hi


def write_heatmap(kymo, path):
    """16-bit binary PGM: rows are arc-length samples, columns are frames.

    The PGM format stores 16-bit samples most significant byte first; the
    value range is recorded in ``<path>.json``.
    """
    if len(kymo) == 0:
        raise ValueError("cannot render an empty kymograph")
    levels, lo, hi = heatmap_levels(kymo.as_matrix())
    rows, cols = levels.shape
    header = f"P5\n{cols} {rows}\n{_PGM_MAX}\n".encode("ascii")
    atomic_write(path, header + levels.astype(">u2").tobytes())
    sidecar = {"min": lo, "max": hi, "maxval": _PGM_MAX, "rows": "arc-length samples",
               "columns": "frames", "frames": [int(f) for f in kymo.frames], "kind": kymo.kind}
    atomic_write(Path(str(path) + ".json"), canonical_json(sidecar))
    return Path(path)


def read_pgm(path):
    """Read a binary PGM written by :func:`write_heatmap` (or any P5 file)."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw[pos:], dtype=dtype)
    if data.size != rows * cols:
        raise FormatError(f"{path}: payload size does not match {cols}x{rows}")
    return data.reshape(rows, cols).astype(np.uint16), maxval


# ------------------------------------------------------------- diagnostics

DIAGNOSTICS_HEADER = ["iter", "objective", "nll", "prior", "constraint_residual", "phi_rel_change"]


def write_diagnostics(diag, path):
    rows = [[i] + [_fmt(v) for v in rest] for i, *rest in diag.rows()]
    return atomic_write(path, _csv_text(DIAGNOSTICS_HEADER, rows))


# ---------------------------------------------------------------- manifest


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, config, inputs=(), outputs=(), extra=None):
    """Record what is needed to reproduce a run bit for bit."""
    from . import __version__

    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "config_sha256": config.digest(),
        "seed": config.seed,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": sorted(str(Path(p).relative_to(out_dir)) if Path(p).is_relative_to(out_dir) else str(p)
                          for p in outputs),
        "versions": {"kymorecon": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "scikit-learn": sklearn.__version__, "python": platform.python_version()},
    }
    if extra:
        manifest.update(extra)
    return atomic_write(out_dir / "manifest.json", canonical_json(manifest))
