"""Routing-logit trace datasets: collection, stratified split, MASCTRC1 files.

File layout (all integers little-endian)::

    b"MASCTRC1" | u32 header length | JSON header
    per trace:  u32 T | u8 label | u16 L | u16 E | u16 source length | source utf-8
                | T*L*E floats (dtype from header, default float32)

The header carries ``L``, ``E``, ``count``, ``creator``, ``dtype`` and a
free-text ``convention`` describing which logits were captured. External
tools producing traces from real models should write the same layout.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .container import atomic_write_bytes
from .errors import ContractError, FormatError, SplitError
from .moe import ForwardResult, GateHook, ToyMoEModel

TRACE_MAGIC = b"MASCTRC1"
TRACE_VERSION = 1
DEFAULT_CONVENTION = "raw affine gate output"
_DTYPES = {"float32": "<f4", "float64": "<f8"}
_LEN = struct.Struct("<I")
_REC = struct.Struct("<IBHHH")


@dataclass
class RoutingTrace:
    logits: np.ndarray  # T x L x E
    label: int
    source: str = ""

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 3 or self.logits.shape[0] < 1:
            raise ContractError(f"trace logits must be T x L x E with T >= 1, got {self.logits.shape}")
        if self.label not in (0, 1):
            raise ContractError(f"label must be 0 or 1, got {self.label!r}")
        if not np.all(np.isfinite(self.logits)):
            raise ContractError("trace logits must be finite")

    @property
    def T(self) -> int:
        return self.logits.shape[0]


@dataclass
class TraceDataset:
    traces: list[RoutingTrace]
    L: int
    E: int
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, tr in enumerate(self.traces):
            if tr.logits.shape[1:] != (self.L, self.E):
                raise ContractError(
                    f"trace {i} has (L, E) = {tr.logits.shape[1:]}, dataset declares {(self.L, self.E)}"
                )

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def __getitem__(self, i):
        return self.traces[i]

    @property
    def class_counts(self) -> dict[int, int]:
        c = Counter(t.label for t in self.traces)
        return {0: c.get(0, 0), 1: c.get(1, 0)}

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.traces], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "TraceDataset":
        return TraceDataset([self.traces[i] for i in indices], self.L, self.E, meta=dict(self.meta))

    def with_label(self, label: int) -> "TraceDataset":
        return self.subset(i for i, t in enumerate(self.traces) if t.label == label)

    def require_both_classes(self) -> None:
        counts = self.class_counts
        if counts[0] == 0 or counts[1] == 0:
            raise ContractError(f"both classes required, have {counts}")


def collect_traces(
    model: ToyMoEModel,
    prompts: Sequence[Sequence[int]],
    labeler: Callable[[ForwardResult], int | None],
    source_prefix: str = "prompt",
) -> TraceDataset:
    """Run each prompt with a capture hook; abstained prompts are counted in ``skipped``."""
    cfg = model.config
    traces = []
    skipped = 0
    for i, prompt in enumerate(prompts):
        hook = GateHook("capture")
        result = model.forward(prompt, hook)
        label = labeler(result)
        if label is None:
            skipped += 1
            continue
        traces.append(RoutingTrace(result.capture.pre.copy(), int(label), f"{source_prefix}:{i}"))
    return TraceDataset(traces, cfg.num_layers, cfg.experts_per_layer, skipped=skipped)


# -- split -----------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0


def split_indices(labels: Sequence[int], spec: SplitSpec = SplitSpec()) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split: per-class floor of the train share, then top up by largest remainder.

    Every class keeps at least one validation sample.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(spec.seed)
    classes = sorted(set(labels.tolist()))
    if set(classes) != {0, 1}:
        raise SplitError(f"both classes must be present, found {classes}")
    members = {c: np.flatnonzero(labels == c) for c in classes}
    for c, m in members.items():
        if len(m) < 2:
            raise SplitError(f"class {c} has {len(m)} sample(s); need at least 2")
    exact = {c: spec.train_fraction * len(members[c]) for c in classes}
    n_train = {c: min(int(np.floor(exact[c])), len(members[c]) - 1) for c in classes}
    target = int(round(spec.train_fraction * len(labels)))
    by_remainder = sorted(classes, key=lambda c: (-(exact[c] - np.floor(exact[c])), c))
    for c in by_remainder:
        if sum(n_train.values()) >= target:
            break
        if n_train[c] < len(members[c]) - 1:
            n_train[c] += 1
    train, val = [], []
    for c in classes:
        perm = rng.permutation(members[c])
        train.extend(perm[: n_train[c]].tolist())
        val.extend(perm[n_train[c] :].tolist())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def split(dataset: TraceDataset, spec: SplitSpec = SplitSpec()) -> tuple[TraceDataset, TraceDataset]:
    tr, va = split_indices(dataset.labels, spec)
    return dataset.subset(tr), dataset.subset(va)


# -- file format -----------------------------------------------------------------


def encode_traces(
    dataset: TraceDataset, creator: str = "moesteer", convention: str = DEFAULT_CONVENTION,
    dtype: str = "float32",
) -> bytes:
    if dtype not in _DTYPES:
        raise ContractError(f"dtype must be one of {sorted(_DTYPES)}")
    header = {
        "format_version": TRACE_VERSION,
        "L": dataset.L,
        "E": dataset.E,
        "count": len(dataset),
        "creator": creator,
        "convention": convention,
        "dtype": dtype,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [TRACE_MAGIC, _LEN.pack(len(head)), head]
    for tr in dataset.traces:
        src = tr.source.encode("utf-8")
        T, L, E = tr.logits.shape
        parts.append(_REC.pack(T, tr.label, L, E, len(src)))
        parts.append(src)
        parts.append(np.ascontiguousarray(tr.logits, dtype=_DTYPES[dtype]).tobytes())
    return b"".join(parts)


def save_traces(dataset: TraceDataset, path, **kwargs) -> None:
    atomic_write_bytes(path, encode_traces(dataset, **kwargs))


def decode_traces(data: bytes) -> TraceDataset:
    if data[:8] != TRACE_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}", offset=0)
    if len(data) < 12:
        raise FormatError("truncated header length", offset=8)
    (hlen,) = _LEN.unpack_from(data, 8)
    if 12 + hlen > len(data):
        raise FormatError("header runs past end of file", offset=12)
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON header: {exc}", offset=12) from None
    if not isinstance(header, dict) or header.get("format_version") != TRACE_VERSION:
        raise FormatError(f"unsupported trace format version {header.get('format_version')!r}", offset=12)
    try:
        L, E, count = int(header["L"]), int(header["E"]), int(header["count"])
        dtype = _DTYPES[header.get("dtype", "float32")]
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"incomplete header: {exc}", offset=12) from None
    width = np.dtype(dtype).itemsize
    pos = 12 + hlen
    traces = []
    for i in range(count):
        if pos + _REC.size > len(data):
            raise FormatError(f"trace {i} record header truncated", offset=pos, trace_index=i)
        T, label, tl, te, slen = _REC.unpack_from(data, pos)
        if (tl, te) != (L, E):
            raise FormatError(
                f"trace {i} declares (L, E) = {(tl, te)} but file declares {(L, E)}",
                offset=pos, trace_index=i,
            )
        pos += _REC.size
        n = T * L * E
        if pos + slen + n * width > len(data):
            raise FormatError(f"trace {i} payload truncated", offset=pos, trace_index=i)
        source = data[pos : pos + slen].decode("utf-8", errors="replace")
        pos += slen
        logits = np.frombuffer(data, dtype=dtype, count=n, offset=pos).astype(np.float64)
        pos += n * width
        try:
            traces.append(RoutingTrace(logits.reshape(T, L, E), int(label), source))
        except ContractError as exc:
            raise FormatError(f"trace {i}: {exc}", offset=pos, trace_index=i) from None
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after {count} traces", offset=pos)
    meta = {k: header[k] for k in ("creator", "convention", "dtype") if k in header}
    return TraceDataset(traces, L, E, meta=meta)


def load_traces(path) -> TraceDataset:
    return decode_traces(Path(path).read_bytes())
