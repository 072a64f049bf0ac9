"""Portable binary containers, dataset manifests, and checkpoints.

Two little-endian container formats with magic+version headers:

* tensor container (``S2TN``): named n-dimensional arrays, row-major;
  dtype codes 1=f32, 2=f64, 3=i64, 4=u8.
* sparse container (``S2SP``): one CSR operator (u64 indices, f64 values).

A dataset manifest is a JSON document naming per-split sample files; each
sample is a tensor container with an ``input`` (channels x n_v) entry and a
``labels`` (n_v) entry matching the declared mesh level.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .icomesh import vertex_count
from .model import Model, ModelSpec, build_model
from .sphops import SparseOperator

TENSOR_MAGIC = b"S2TN"
SPARSE_MAGIC = b"S2SP"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Serialize named arrays in insertion order; names must be unique."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise InputError("duplicate tensor names")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            dtype = arr.dtype.newbyteorder("<")
            if dtype not in _DTYPE_CODES:
                dtype = (np.dtype("<i8") if arr.dtype.kind in "iub"
                         else np.dtype("<f8"))
                arr = arr.astype(dtype)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<II", _DTYPE_CODES[np.dtype(dtype)],
                                 arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise InputError(f"{path}: unsupported version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            if name in out:
                raise InputError(f"{path}: duplicate tensor name {name!r}")
            code, ndim = struct.unpack("<II", fh.read(8))
            if code not in _CODE_DTYPES:
                raise InputError(f"{path}: unknown dtype code {code}")
            dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise InputError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        if fh.read(1):
            raise InputError(f"{path}: trailing bytes after last entry")
    return out


def write_sparse(path, op: SparseOperator) -> None:
    with open(path, "wb") as fh:
        fh.write(SPARSE_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<QQQ", op.rows, op.cols, op.nnz))
        fh.write(op.row_offsets.astype("<u8").tobytes())
        fh.write(op.col_indices.astype("<u8").tobytes())
        fh.write(op.values.astype("<f8").tobytes())


def read_sparse(path) -> SparseOperator:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SPARSE_MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise InputError(f"{path}: unsupported version {version}")
        rows, cols, nnz = struct.unpack("<QQQ", fh.read(24))
        row_offsets = np.frombuffer(fh.read(8 * (rows + 1)), dtype="<u8")
        col_indices = np.frombuffer(fh.read(8 * nnz), dtype="<u8")
        values = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
        if row_offsets.shape[0] != rows + 1 or values.shape[0] != nnz:
            raise InputError(f"{path}: truncated sparse container")
    op = SparseOperator.from_arrays(rows, cols, row_offsets.astype(np.int64),
                                    col_indices.astype(np.int64),
                                    values.astype(np.float64))
    op.validate()
    return op


# -- dataset manifests --------------------------------------------------------

def write_manifest(path, level: int, n_classes: int,
                   splits: dict[str, list[str]], channels=None,
                   class_names=None, class_weights=None) -> None:
    doc = {
        "schema_version": 1,
        "level": level,
        "n_classes": n_classes,
        "channels": channels or [],
        "splits": splits,
    }
    if class_names is not None:
        doc["class_names"] = class_names
    if class_weights is not None:
        doc["class_weights"] = list(map(float, class_weights))
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path, validate: bool = True) -> dict:
    """Parse and (optionally) validate a dataset manifest.

    Validation opens every referenced sample and rejects vertex counts that
    do not match the declared level, missing entries, and label shapes that
    disagree with the input.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    for key in ("schema_version", "level", "n_classes", "splits"):
        if key not in doc:
            raise InputError(f"manifest missing required key {key!r}")
    n_v = vertex_count(doc["level"])
    if validate:
        for split, files in doc["splits"].items():
            for rel in files:
                sample_path = path.parent / rel
                if not sample_path.exists():
                    raise InputError(f"{split}: missing sample {rel}")
                sample = read_tensors(sample_path)
                if "input" not in sample or "labels" not in sample:
                    raise InputError(f"{rel}: needs 'input' and 'labels'")
                if sample["input"].ndim != 2 or sample["input"].shape[1] != n_v:
                    raise InputError(
                        f"{rel}: input shape {sample['input'].shape} does not "
                        f"match level {doc['level']} ({n_v} vertices)")
                if sample["labels"].shape != (n_v,):
                    raise InputError(f"{rel}: labels shape "
                                     f"{sample['labels'].shape} != ({n_v},)")
    return doc


def load_split(manifest_path, doc: dict, split: str):
    """Load a manifest split into stacked input/label arrays."""
    from .train import CapsDataset

    files = doc["splits"].get(split, [])
    if not files:
        raise InputError(f"split {split!r} is empty")
    base = Path(manifest_path).parent
    inputs, labels = [], []
    for rel in files:
        sample = read_tensors(base / rel)
        inputs.append(sample["input"])
        labels.append(sample["labels"].astype(np.int64))
    return CapsDataset(level=doc["level"], inputs=np.stack(inputs),
                       labels=np.stack(labels))


def write_sample(path, inputs: np.ndarray, labels: np.ndarray) -> None:
    write_tensors(path, {"input": np.asarray(inputs, dtype=np.float64),
                         "labels": np.asarray(labels, dtype=np.int64)})


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(base_path, model: Model) -> tuple[Path, Path]:
    """Write ``<base>.s2tn`` (parameters) and ``<base>.json`` (spec+shapes)."""
    base = Path(base_path)
    tensor_path = base.with_suffix(".s2tn")
    meta_path = base.with_suffix(".json")
    state = model.state_dict()
    write_tensors(tensor_path, state)
    meta = {
        "model_spec": model.spec.to_dict(),
        "parameters": {k: list(v.shape) for k, v in state.items()},
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    return tensor_path, meta_path


def load_checkpoint(base_path, meshes=None, seed: int = 0) -> Model:
    base = Path(base_path)
    meta = json.loads(base.with_suffix(".json").read_text())
    spec = ModelSpec.from_dict(meta["model_spec"])
    state = read_tensors(base.with_suffix(".s2tn"))
    model = build_model(spec, meshes=meshes, seed=seed)
    model.load_state_dict(state)
    return model
