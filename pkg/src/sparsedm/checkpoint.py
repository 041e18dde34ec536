"""Binary checkpoint container and JSON sidecar for models.

Layout (all integers little-endian):

    magic   4 bytes  b"SDM1"
    version u16      currently 1
    count   u32      number of entries
    entry   u16 name length, UTF-8 name, u8 kind, u8 rank, rank * u32 dims,
            payload

Kind 0 is a float tensor stored as little-endian float32; kind 1 is a mask
bitset packed little-bit-order and zero-padded to whole bytes.  Entry order
is fixed by the model (weight, bias, mask per layer), so writing is
deterministic and save(load(save(...))) is byte-identical.  The sidecar
meta.json carries architecture, per-layer patterns, the noise schedule, the
seed, and the format version.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .diffusion import NoisePredictor, NoiseSchedule, make_schedule
from .errors import ArchitectureError, ConfigError
from .sparsity import MaskedLinear, NMPattern, SparseMask
from .tensor import Tensor

MAGIC = b"SDM1"
FORMAT_VERSION = 1

KIND_FLOAT = 0
KIND_MASK = 1

CKPT_NAME = "model.ckpt"
META_NAME = "meta.json"


def write_entries(path, entries) -> None:
    """Write (name, kind, array) entries; arrays are float32 or 0/1 uint8."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<H", FORMAT_VERSION)
    blob += struct.pack("<I", len(entries))
    for name, kind, arr in entries:
        raw = name.encode("utf-8")
        blob += struct.pack("<H", len(raw))
        blob += raw
        blob += struct.pack("<BB", kind, arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        if kind == KIND_FLOAT:
            blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        elif kind == KIND_MASK:
            bits = np.ascontiguousarray(arr, dtype=np.uint8).reshape(-1)
            blob += np.packbits(bits, bitorder="little").tobytes()
        else:
            raise ValueError(f"unknown entry kind {kind}")
    Path(path).write_bytes(bytes(blob))


def read_entries(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint format version {version}")
    (count,) = struct.unpack_from("<I", data, 6)
    off = 10
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        kind, rank = struct.unpack_from("<BB", data, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        if kind == KIND_FLOAT:
            nbytes = size * 4
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        elif kind == KIND_MASK:
            nbytes = (size + 7) // 8
            packed = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off)
            arr = np.unpackbits(packed, count=size, bitorder="little").reshape(dims)
        else:
            raise ConfigError(f"{path}: unknown entry kind {kind}")
        off += nbytes
        entries.append((name, kind, arr))
    return entries


# ---------------------------------------------------------------------------
# model level
# ---------------------------------------------------------------------------

def _resolve(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.is_dir():
        return p / CKPT_NAME, p / META_NAME
    return p, p.with_name(META_NAME)


def save_model(run_dir, model: NoisePredictor, sched: NoiseSchedule, seed: int, extra: dict | None = None):
    """Write model.ckpt and meta.json into the run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in model.layers:
        entries.append((f"{layer.name}.weight", KIND_FLOAT, layer.weight.data))
        entries.append((f"{layer.name}.bias", KIND_FLOAT, layer.bias.data))
        entries.append((f"{layer.name}.mask", KIND_MASK, layer.mask.bits))
    write_entries(run_dir / CKPT_NAME, entries)
    meta = {
        "format_version": FORMAT_VERSION,
        "architecture": {
            "data_dim": model.data_dim,
            "temb_dim": model.temb_dim,
            "hidden": list(model.hidden),
        },
        "layers": [
            {"name": layer.name, "pattern": str(layer.pattern) if layer.pattern else None}
            for layer in model.layers
        ],
        "schedule": {
            "T": sched.T,
            "beta_start": float(sched.beta[0]),
            "beta_end": float(sched.beta[-1]),
        },
        "seed": int(seed),
    }
    if extra:
        meta.update(extra)
    (run_dir / META_NAME).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return run_dir / CKPT_NAME


def load_model(path) -> tuple[NoisePredictor, NoiseSchedule, dict]:
    """Load a checkpoint directory (or model.ckpt path) back into a model."""
    ckpt_path, meta_path = _resolve(path)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    if not meta_path.exists():
        raise ConfigError(f"checkpoint sidecar not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{meta_path}: unsupported format version {meta.get('format_version')!r}")
    entries = {name: (kind, arr) for name, kind, arr in read_entries(ckpt_path)}
    patterns = {rec["name"]: rec.get("pattern") for rec in meta.get("layers", [])}
    layers = []
    for rec in meta.get("layers", []):
        name = rec["name"]
        try:
            _, w = entries[f"{name}.weight"]
            _, b = entries[f"{name}.bias"]
            _, m = entries[f"{name}.mask"]
        except KeyError as e:
            raise ArchitectureError(f"checkpoint missing entry for layer {name}: {e}") from None
        pat = patterns.get(name)
        layers.append(
            MaskedLinear(
                name=name,
                weight=Tensor(w),
                bias=Tensor(b),
                mask=SparseMask(m),
                pattern=NMPattern.parse(pat) if pat else None,
            )
        )
    if not layers:
        raise ArchitectureError("checkpoint describes no layers")
    model = NoisePredictor(layers=layers, temb_dim=int(meta["architecture"]["temb_dim"]))
    s = meta["schedule"]
    sched = make_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))
    return model, sched, meta


def model_checksum(model: NoisePredictor) -> str:
    """Stable digest over all weights, biases, and masks."""
    h = hashlib.sha256()
    for layer in model.layers:
        h.update(layer.weight.data.tobytes())
        h.update(layer.bias.data.tobytes())
        h.update(layer.mask.bits.tobytes())
    return h.hexdigest()


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
