"""On-disk containers: datasets / phantoms, checkpoints and exported maps.

A dataset container is a directory::

    manifest.txt    JSON manifest (schema version, grid, echo train, counts, config)
    signals.f32     float32 LE, [n_samples, n_echoes]
    refs.f32        float32 LE, [n_samples, n_bins]
    te.f32          float32 LE, [n_samples]   echo spacing in ms
    alpha.f32       float32 LE, [n_samples]   refocusing angle in degrees
    snr.f32         float32 LE, [n_samples]
    combo.i8        int8, [n_samples]         tissue combination index, -1 if none
    labels.u8       uint8, [H, W]             phantom segmentation (optional)
    checksums.txt   "<crc32 hex>  <size>  <file>" per payload file

Writers build the directory under a temporary name and rename it into place,
so readers never observe a partial container.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .core import T2Grid, make_t2_grid
from .errors import ContainerError, ParameterError
from .nn import Checkpoint, ModelSpec
from .phantom import Dataset, Sample1D

DATASET_SCHEMA = "t2dist-dataset/1"
CHECKPOINT_MAGIC = b"t2dist-checkpoint"
CHECKPOINT_VERSION = 1

_PAYLOADS = {
    "signals": ("signals.f32", "<f4"),
    "refs": ("refs.f32", "<f4"),
    "delta_te": ("te.f32", "<f4"),
    "alpha": ("alpha.f32", "<f4"),
    "snr": ("snr.f32", "<f4"),
    "combo": ("combo.i8", "i1"),
}
_LABELS = ("labels.u8", "u1")


def _crc32(path: Path) -> int:
    crc = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            crc = zlib.crc32(chunk, crc)
    return crc & 0xFFFFFFFF


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def _atomic_dir(path: Path):
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    try:
        parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=parent))
    except OSError as exc:
        raise ContainerError(f"cannot write under {parent}: {exc}") from exc
    return tmp


def _commit(tmp: Path, path: Path) -> None:
    try:
        if path.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{path.name}.old.", dir=path.parent))
            os.rmdir(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise ContainerError(f"cannot commit container {path}: {exc}") from exc


def write_dataset(samples, path, extra_meta: dict | None = None) -> dict:
    """Write a :class:`Dataset` (or a list of samples) as a container directory.

    Returns the manifest that was written.
    """
    if isinstance(samples, Dataset):
        ds = samples
    else:
        samples = list(samples)
        if not samples:
            raise ParameterError("refusing to write an empty dataset")
        if not all(isinstance(s, Sample1D) for s in samples):
            raise ParameterError("write_dataset expects a Dataset or Sample1D objects")
        ds = Dataset.from_samples(samples)
    if len(ds) == 0:
        raise ParameterError("refusing to write an empty dataset")
    path = Path(path)
    tmp = _atomic_dir(path)
    try:
        checks = []
        arrays = {}
        for attr, (fname, dt) in _PAYLOADS.items():
            arrays[fname] = np.ascontiguousarray(np.asarray(getattr(ds, attr)).astype(dt))
        if ds.labels is not None:
            arrays[_LABELS[0]] = np.ascontiguousarray(np.asarray(ds.labels).astype(_LABELS[1]))
        for fname, arr in arrays.items():
            (tmp / fname).write_bytes(arr.tobytes())
            checks.append((fname, _crc32(tmp / fname), arr.nbytes))
        manifest = {
            "schema": DATASET_SCHEMA,
            "n_samples": len(ds),
            "n_echoes": ds.n_echoes,
            "grid": ds.grid.describe(),
            "t1_ms": ds.t1,
            "echo_train": {
                "delta_te_ms": {"min": float(np.min(ds.delta_te)), "max": float(np.max(ds.delta_te))},
                "flip_angle_deg": {"min": float(np.min(ds.alpha)), "max": float(np.max(ds.alpha))},
            },
            "shape": list(ds.shape) if ds.shape is not None else None,
            "files": {fname: {"bytes": nb} for fname, _, nb in checks},
            "meta": _jsonable({**ds.meta, **(extra_meta or {})}),
        }
        (tmp / "manifest.txt").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        (tmp / "checksums.txt").write_text(
            "".join(f"{crc:08x}  {nb}  {fname}\n" for fname, crc, nb in checks)
        )
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise ContainerError(f"cannot write dataset at {path}: {exc}") from exc
    _commit(tmp, path)
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.txt").read_text())
    except (OSError, ValueError) as exc:
        raise ContainerError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("schema") != DATASET_SCHEMA:
        raise ContainerError(f"unsupported container schema {manifest.get('schema')!r}")
    return manifest


def _grid_from(desc: dict) -> T2Grid:
    if desc["kind"] == "dense-linear":
        return make_t2_grid("dense-linear", None, desc["t2_min_ms"], desc["t2_max_ms"])
    return make_t2_grid(desc["kind"], desc["n_points"], desc["t2_min_ms"], desc["t2_max_ms"])


def read_dataset(path) -> Dataset:
    """Load and verify a container; arrays come back as float32 as stored."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        lines = (path / "checksums.txt").read_text().splitlines()
    except OSError as exc:
        raise ContainerError(f"missing checksums in {path}: {exc}") from exc
    sums = {}
    for line in lines:
        parts = line.split()
        if len(parts) != 3:
            raise ContainerError(f"malformed checksum line {line!r}")
        sums[parts[2]] = (int(parts[0], 16), int(parts[1]))

    n = int(manifest["n_samples"])
    n_echoes = int(manifest["n_echoes"])
    grid = _grid_from(manifest["grid"])
    shape = tuple(manifest["shape"]) if manifest.get("shape") else None
    expected = {
        "signals.f32": (n, n_echoes),
        "refs.f32": (n, len(grid)),
        "te.f32": (n,),
        "alpha.f32": (n,),
        "snr.f32": (n,),
        "combo.i8": (n,),
    }
    if _LABELS[0] in sums:
        if shape is None:
            raise ContainerError("labels present without a shape")
        expected[_LABELS[0]] = shape
    dtypes = {fname: dt for fname, dt in _PAYLOADS.values()}
    dtypes[_LABELS[0]] = _LABELS[1]

    arrays = {}
    for fname, shp in expected.items():
        fpath = path / fname
        if fname not in sums:
            raise ContainerError(f"{fname} missing from checksums")
        crc, nbytes = sums[fname]
        dt = np.dtype(dtypes[fname])
        want = int(np.prod(shp)) * dt.itemsize
        try:
            size = fpath.stat().st_size
        except OSError as exc:
            raise ContainerError(f"missing payload {fname}") from exc
        if size != want or nbytes != want:
            raise ContainerError(f"{fname}: size {size} bytes, manifest implies {want}")
        if _crc32(fpath) != crc:
            raise ContainerError(f"{fname}: checksum mismatch")
        arrays[fname] = np.fromfile(fpath, dtype=dt).reshape(shp)

    return Dataset(
        arrays["signals.f32"], arrays["refs.f32"], arrays["te.f32"], arrays["alpha.f32"],
        arrays["snr.f32"], arrays["combo.i8"], grid, float(manifest["t1_ms"]),
        labels=arrays.get(_LABELS[0]), shape=shape, meta=manifest.get("meta", {}),
    )


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Text header (JSON) followed by the float64 little-endian weights.

    Layout: ``t2dist-checkpoint <version>\\n``, ``<header bytes>\\n``, the
    header, then every parameter flattened in model order.
    """
    spec = ckpt.spec
    shapes = spec.param_shapes()
    if [tuple(p.shape) for p in ckpt.params] != shapes:
        raise ParameterError("checkpoint parameters do not match its spec")
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "model_spec": {
            "kind": spec.kind, "n_echoes": spec.n_echoes, "hidden_width": spec.hidden_width,
            "n_hidden": spec.n_hidden, "n_out": spec.n_out, "output_bias": spec.output_bias,
            "hidden_bias": spec.hidden_bias,
        },
        "param_shapes": [list(s) for s in shapes],
        "dtype": "<f8",
        "metadata": _jsonable(ckpt.metadata),
    }, indent=2, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in ckpt.params)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
            fh.write(b"%d\n" % len(header))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise ContainerError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expect: ModelSpec | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        first, rest = raw.split(b"\n", 1)
        magic, version = first.split(b" ")
        hlen_line, rest = rest.split(b"\n", 1)
        hlen = int(hlen_line)
        header = json.loads(rest[:hlen])
        payload = rest[hlen:]
    except ValueError as exc:
        raise ContainerError(f"{path} is not a checkpoint file") from exc
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise ContainerError(f"unsupported checkpoint version {first!r}")
    spec = ModelSpec(**header["model_spec"])
    shapes = spec.param_shapes()
    if [tuple(s) for s in header["param_shapes"]] != shapes:
        raise ContainerError("checkpoint shapes disagree with its model spec")
    if expect is not None and expect != spec:
        raise ContainerError(f"checkpoint spec {spec} differs from expected {expect}")
    sizes = [int(np.prod(s)) for s in shapes]
    if len(payload) != 8 * sum(sizes):
        raise ContainerError("checkpoint payload size does not match its spec")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params, off = [], 0
    for s, k in zip(shapes, sizes):
        params.append(flat[off:off + k].reshape(s).copy())
        off += k
    return Checkpoint(spec, params, header.get("metadata", {}))


# -- exported maps ----------------------------------------------------------------


def export_map(map2d, path, fmt: str = "csv") -> dict:
    """Write a 2D real image as 16-bit PGM or CSV.

    PGM rescales ``[min, max]`` linearly onto ``[0, 65535]`` and records both
    ends in a header comment; a constant image maps to 0 with the scale
    flagged as degenerate. CSV is row-major with ``repr`` precision.
    """
    a = np.asarray(map2d, dtype=np.float64)
    if a.ndim != 2:
        raise ParameterError("maps must be 2D")
    if not np.all(np.isfinite(a)):
        raise ParameterError("maps must be finite")
    path = Path(path)
    lo, hi = float(a.min()), float(a.max())
    info = {"min": lo, "max": hi, "format": fmt}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "pgm16":
            degenerate = hi == lo
            q = np.zeros(a.shape) if degenerate else (a - lo) / (hi - lo) * 65535.0
            data = np.rint(q).astype(">u2")
            h, w = a.shape
            comment = f"# scale min={lo!r} max={hi!r} degenerate={int(degenerate)}"
            head = f"P5\n{comment}\n{w} {h}\n65535\n".encode()
            path.write_bytes(head + data.tobytes())
            info["degenerate"] = degenerate
        elif fmt == "csv":
            path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in a) + "\n")
        else:
            raise ParameterError(f"unknown map format {fmt!r}")
    except OSError as exc:
        raise ContainerError(f"cannot write map {path}: {exc}") from exc
    return info


def read_map_csv(path) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")]
                     for line in Path(path).read_text().splitlines() if line])


def read_pgm16(path) -> tuple[np.ndarray, dict]:
    """Read a PGM written by :func:`export_map`; returns (raw counts, scale info)."""
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 4)
    if lines[0] != b"P5":
        raise ContainerError("not a binary PGM")
    info = dict(kv.split("=") for kv in lines[1].decode().lstrip("# ").split()[1:])
    w, h = map(int, lines[2].split())
    data = np.frombuffer(lines[4], dtype=">u2").reshape(h, w).astype(np.uint16)
    return data, {"min": float(info["min"]), "max": float(info["max"]),
                  "degenerate": bool(int(info["degenerate"]))}
