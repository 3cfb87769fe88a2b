"""Packed low-bit checkpoints and the dequantize-on-the-fly inference path.

File layout::

    b"OMNIQ1\\0\\0" | u64 LE header length | canonical JSON header | sections

Each manifest entry names a section with its ``kind`` (``codes``, ``f32``
or ``i16``), ``shape``, byte ``offset`` (relative to the end of the header)
and ``nbytes``. Code sections are LSB-first bitstreams of ``bits``-wide
values in row-major (group-major within each row) order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .calibrate import QuantizedBlock, QuantizedModel
from .model import LINEARS, BlockWeights, QuantConfig, TinyModelConfig, canonical_json
from .quantizer import QuantParams

Q_MAGIC = b"OMNIQ1\0\0"
FORMAT_VERSION = 1
KINDS = {"f32": "<f4", "i16": "<i2"}


class PackingError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    """Base class for unreadable quantized checkpoints."""


class BadMagicError(CheckpointFormatError):
    pass


class VersionMismatchError(CheckpointFormatError):
    pass


class ManifestError(CheckpointFormatError):
    pass


def pack_codes(codes, bits: int) -> bytes:
    """LSB-first bitstream: value ``i`` occupies bits ``[i*bits, (i+1)*bits)``."""
    codes = np.asarray(codes).reshape(-1)
    if not 1 <= bits <= 16:
        raise PackingError(f"bits must lie in [1, 16], got {bits}")
    if codes.size and (codes.min() < 0 or codes.max() > 2**bits - 1):
        raise PackingError(f"codes out of range [0, {2**bits - 1}]")
    bitplanes = (codes.astype(np.uint32)[:, None] >> np.arange(bits, dtype=np.uint32)) & 1
    return np.packbits(bitplanes.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns ``count`` values as int64."""
    need = (count * bits + 7) // 8
    if len(data) < need:
        raise PackingError(f"truncated stream: need {need} bytes for {count} {bits}-bit codes, got {len(data)}")
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=need), bitorder="little")
    planes = flat[: count * bits].reshape(count, bits).astype(np.int64)
    return (planes << np.arange(bits, dtype=np.int64)).sum(axis=1)


@dataclass
class QuantizedCheckpoint:
    """Parsed header plus raw section payloads, keyed by manifest name."""

    header: dict
    sections: dict[str, bytes] = field(default_factory=dict)

    @property
    def manifest(self) -> list[dict]:
        return self.header["tensors"]

    def entry(self, name: str) -> dict:
        for e in self.manifest:
            if e["name"] == name:
                return e
        raise KeyError(name)

    def array(self, name: str) -> np.ndarray:
        e = self.entry(name)
        raw = self.sections[name]
        if e["kind"] == "codes":
            return unpack_codes(raw, e["bits"], int(np.prod(e["shape"]))).reshape(e["shape"])
        return np.frombuffer(raw, dtype=KINDS[e["kind"]]).reshape(e["shape"])

    def names(self) -> list[str]:
        return [e["name"] for e in self.manifest]

    # -- conversion ----------------------------------------------------------

    @classmethod
    def from_model(cls, qm: QuantizedModel, extra: Mapping | None = None,
                   analysis: bool = True) -> QuantizedCheckpoint:
        """Serialize a calibrated model. ``analysis`` adds LWC strengths as optional sections."""
        q = qm.quant
        bits = q.w_bits if q.w_bits < 16 else 16
        entries: list[tuple[str, str, np.ndarray, dict]] = []
        for k in ("tok_emb", "pos_emb"):
            entries.append((k, "f32", qm.embeddings[k], {}))
        for i, b in enumerate(qm.blocks):
            for k in BlockWeights.field_names():
                name = f"blocks.{i}.{k}"
                if k in b.codes:
                    entries.append((name, "codes", b.codes[k], {"bits": bits}))
                    entries.append((f"{name}.h", "f32", b.qparams[k].h, {}))
                    entries.append((f"{name}.z", "i16", b.qparams[k].z, {}))
                elif b.dense.get(k) is not None:
                    entries.append((name, "f32", b.dense[k], {}))
        for k in ("lnf_w", "lnf_b"):
            entries.append((k, "f32", qm.embeddings[k], {}))
        if analysis:
            for i, b in enumerate(qm.blocks):
                for k, (g, be) in b.strengths.items():
                    base = f"analysis.blocks.{i}.{k}"
                    entries.append((f"{base}.gamma", "f32", np.asarray(g).reshape(-1), {}))
                    entries.append((f"{base}.beta", "f32", np.asarray(be).reshape(-1), {}))
        manifest, sections, offset = [], {}, 0
        for name, kind, arr, more in entries:
            if kind == "codes":
                raw = pack_codes(arr, more["bits"])
            else:
                if kind == "i16" and (np.min(arr) < -2**15 or np.max(arr) >= 2**15):
                    raise PackingError(f"{name}: zero-points do not fit in int16")
                raw = np.ascontiguousarray(arr, dtype=KINDS[kind]).tobytes()
            e = {"name": name, "kind": kind, "shape": list(np.shape(arr)), "offset": offset,
                 "nbytes": len(raw), **more}
            manifest.append(e)
            sections[name] = raw
            offset += len(raw)
        header = {"format": "omniquant-q", "version": FORMAT_VERSION, "config": asdict(qm.config),
                  "quant": {"w_bits": q.w_bits, "a_bits": q.a_bits, "group_size": q.group_size,
                            "softmax_bits": q.softmax_bits},
                  "tensors": manifest, **qm.meta}
        if extra:
            header.update(extra)
        return cls(header, sections)

    def quant_config(self) -> QuantConfig:
        q = self.header["quant"]
        return QuantConfig(q["w_bits"], q["a_bits"], q["group_size"], q["softmax_bits"])

    def model_config(self) -> TinyModelConfig:
        return TinyModelConfig(**self.header["config"])

    def to_model(self) -> QuantizedModel:
        """Rebuild the in-memory quantized model (codes, scales, zero-points, fused tensors)."""
        config, quant = self.model_config(), self.quant_config()
        names = set(self.names())
        emb = {k: self.array(k).astype(np.float32) for k in ("tok_emb", "pos_emb", "lnf_w", "lnf_b")}
        c = config.d_model
        expected = {"tok_emb": (config.vocab, c), "pos_emb": (config.context, c)}
        for k, shp in expected.items():
            if emb[k].shape != shp:
                raise ManifestError(f"{k} has shape {emb[k].shape}, config implies {shp}")
        spec = quant.weight_spec
        blocks = []
        for i in range(config.blocks):
            qb = QuantizedBlock({})
            for k in BlockWeights.field_names():
                name = f"blocks.{i}.{k}"
                if name not in names:
                    qb.dense[k] = None
                    continue
                e = self.entry(name)
                if e["kind"] == "codes":
                    codes = self.array(name)
                    h = self.array(f"{name}.h").astype(np.float32)
                    z = self.array(f"{name}.z").astype(np.int64)
                    if (h.shape, z.shape) != (spec.n_groups(*codes.shape),) * 2:
                        raise ManifestError(f"{name}: group metadata shape {h.shape} does not match codes {codes.shape}")
                    qb.codes[k] = codes
                    qb.qparams[k] = QuantParams(h, z)
                else:
                    qb.dense[k] = self.array(name).astype(np.float32)
                g, b = f"analysis.blocks.{i}.{k}.gamma", f"analysis.blocks.{i}.{k}.beta"
                if g in names:
                    qb.strengths[k] = (self.array(g), self.array(b))
            if any(qb.dense.get(k) is None and k not in qb.codes for k in LINEARS):
                raise ManifestError(f"block {i} is missing linear weights")
            blocks.append(qb)
        meta = {k: v for k, v in self.header.items()
                if k not in ("format", "version", "config", "quant", "tensors")}
        return QuantizedModel(config, quant, emb, blocks, meta)

    # -- IO ----------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        hbytes = canonical_json(self.header)
        body = b"".join(self.sections[e["name"]] for e in self.manifest)
        return Q_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + body

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> QuantizedCheckpoint:
        if raw[:8] != Q_MAGIC:
            raise BadMagicError(f"{source}: bad magic {raw[:8]!r}, expected {Q_MAGIC!r}")
        if len(raw) < 16:
            raise ManifestError(f"{source}: truncated header length")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        if 16 + hlen > len(raw):
            raise ManifestError(f"{source}: header length {hlen} exceeds file size {len(raw)}")
        try:
            header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"{source}: unreadable header: {exc}") from None
        if header.get("version") != FORMAT_VERSION:
            raise VersionMismatchError(
                f"{source}: format version {header.get('version')!r}, this reader supports {FORMAT_VERSION}")
        base = 16 + hlen
        sections = {}
        for e in header.get("tensors", []):
            count = int(np.prod(e["shape"]))
            if e["kind"] == "codes":
                want = (count * e["bits"] + 7) // 8
            elif e["kind"] in KINDS:
                want = count * np.dtype(KINDS[e["kind"]]).itemsize
            else:
                raise ManifestError(f"{source}: unknown section kind {e['kind']!r}")
            start, end = base + e["offset"], base + e["offset"] + e["nbytes"]
            if e["nbytes"] != want or e["offset"] < 0 or end > len(raw):
                raise ManifestError(f"{source}: section {e['name']} ({e['nbytes']} bytes at {e['offset']}) "
                                    f"inconsistent with shape {e['shape']} or file size")
            sections[e["name"]] = raw[start:end]
        return cls(header, sections)


def write_checkpoint(path, ckpt: QuantizedCheckpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def read_checkpoint(path) -> QuantizedCheckpoint:
    return QuantizedCheckpoint.from_bytes(Path(path).read_bytes(), str(path))


def is_quantized_checkpoint(path) -> bool:
    with open(path, "rb") as f:
        return f.read(8) == Q_MAGIC


def quantized_forward(ckpt: QuantizedCheckpoint, ids) -> np.ndarray:
    """Logits from a checkpoint, dequantizing ``(code - z) * h`` to float32 per group."""
    return ckpt.to_model().forward(ids, np.float32)


def size_report(ckpt: QuantizedCheckpoint) -> dict:
    """Byte accounting for quantized linears versus an FP16 copy of the same weights."""
    codes_b = meta_b = fp16_b = 0
    dense_b = 0
    groups = 0
    for e in ckpt.manifest:
        if e["name"].startswith("analysis."):
            continue
        if e["kind"] == "codes":
            codes_b += e["nbytes"]
            fp16_b += 2 * int(np.prod(e["shape"]))
        elif e["name"].endswith((".h", ".z")) and e["name"][:-2] in ckpt.sections:
            meta_b += e["nbytes"]
            if e["name"].endswith(".h"):
                groups += int(np.prod(e["shape"]))
        else:
            dense_b += e["nbytes"]
    q = ckpt.header["quant"]
    out = {"w_bits": q["w_bits"], "a_bits": q["a_bits"], "group_size": q["group_size"],
           "quantized_groups": groups, "code_bytes": codes_b, "metadata_bytes": meta_b,
           "dense_bytes": dense_b, "fp16_equivalent_bytes": fp16_b,
           "total_bytes": len(ckpt.to_bytes())}
    if fp16_b:
        out["ideal_bytes"] = fp16_b * q["w_bits"] / 16
        out["overhead_pct_of_fp16"] = 100.0 * meta_b / fp16_b
        out["overhead_pct_of_codes"] = 100.0 * meta_b / max(codes_b, 1)
    return out
