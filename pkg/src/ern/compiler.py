"""Checkpoint compilation and the .ern model container.

A checkpoint is a directory: ``manifest.json`` naming the architecture
plus one raw little-endian float32 blob per layer (conv weights in
(OC, IC, kh, kw) C order; batch-norm blobs are gamma, beta, mean, var
concatenated).  Any training framework can emit one with a few lines.

Compilation binarizes every conv (per-channel alpha = mean |w|, or the
shared constant c for convs feeding a residual add), folds each
batch-norm + quantizer pair into an integer threshold table using the
producing conv's scale, and bit-packs the signs.  The result is fully
integer-executable and serializes to a single .ern file:

    magic "ERN1" | u32 version | arch (u16 len + utf8) | u32 k |
    f64 c | u8 endian tag (1 = little) | u32 layer count |
    layer records | u32 CRC32 over everything before it

Conv records carry the ConvSpec fields, the per-channel scales, and the
packed weight words; BnAct records carry per-channel (t1, t2, t3) as
signed 64-bit plus a direction byte and a degenerate byte.  A degenerate
channel (folded slope exactly zero) stores its constant code in the t1
slot.  All multi-byte values little-endian; identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import io
import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    CompileError,
    ConfigError,
    DomainError,
    FormatError,
    TruncationError,
    VersionError,
)
from .graph import (
    ARCHITECTURES,
    BnAct,
    Conv,
    FinalConv,
    GraphDef,
    arch_config,
    build_model,
    validate_graph,
)
from .kernels import ConvSpec
from .quant import ActParams, BnParams, ThresholdTable, binarize_weights, fuse_thresholds
from .tensor import LANES, PackedWeights, pack_weights, padded_channels

MAGIC = b"ERN1"
FORMAT_VERSION = 1
MANIFEST_FORMAT = "ern-checkpoint-v1"
LAYER_CONV = 1
LAYER_BNACT = 2
LAYER_FINAL = 3
_ENDIAN_LITTLE = 1


# --------------------------------------------------------------------------
# checkpoint manifests


@dataclass(eq=False)
class BnActRecord:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    epsilon: float = 1e-5
    act_scale: float = 1.0


@dataclass(eq=False)
class CheckpointManifest:
    """Float checkpoint: architecture id plus per-layer parameter arrays."""

    arch: str
    k: int = 10
    shared_const: float | None = None
    convs: dict[str, np.ndarray] = field(default_factory=dict)
    bnacts: dict[str, BnActRecord] = field(default_factory=dict)

    def graph(self) -> GraphDef:
        return build_model(arch_config(self.arch), self.k)


def save_manifest(m: CheckpointManifest, path: str | Path) -> None:
    """Write manifest.json plus one float32 blob per layer."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layers: dict[str, dict] = {}
    for name, w in m.convs.items():
        blob = np.ascontiguousarray(w, dtype="<f4")
        (root / f"{name}.bin").write_bytes(blob.tobytes())
        layers[name] = {"kind": "conv", "shape": list(w.shape), "file": f"{name}.bin"}
    for name, rec in m.bnacts.items():
        blob = np.concatenate(
            [
                np.asarray(rec.gamma, dtype="<f4"),
                np.asarray(rec.beta, dtype="<f4"),
                np.asarray(rec.mean, dtype="<f4"),
                np.asarray(rec.var, dtype="<f4"),
            ]
        )
        (root / f"{name}.bin").write_bytes(blob.tobytes())
        layers[name] = {
            "kind": "bnact",
            "channels": int(rec.gamma.shape[0]),
            "epsilon": rec.epsilon,
            "act_scale": rec.act_scale,
            "file": f"{name}.bin",
        }
    doc = {"format": MANIFEST_FORMAT, "arch": m.arch, "k": m.k, "layers": layers}
    if m.shared_const is not None:
        doc["shared_const"] = m.shared_const
    (root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> CheckpointManifest:
    root = Path(path)
    doc_path = root / "manifest.json" if root.is_dir() else root
    root = doc_path.parent
    try:
        doc = json.loads(doc_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read manifest {doc_path}: {e}") from e
    if doc.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"unsupported manifest format {doc.get('format')!r}")
    m = CheckpointManifest(
        arch=doc["arch"], k=int(doc.get("k", 10)), shared_const=doc.get("shared_const")
    )
    for name, entry in doc.get("layers", {}).items():
        try:
            raw = np.frombuffer((root / entry["file"]).read_bytes(), dtype="<f4")
        except OSError as e:
            raise ConfigError(f"layer '{name}': cannot read blob: {e}") from e
        except KeyError as e:
            raise ConfigError(f"layer '{name}': manifest entry missing {e}") from e
        if entry.get("kind") == "conv":
            shape = tuple(entry.get("shape", ()))
            if len(shape) != 4:
                raise ConfigError(f"layer '{name}': conv entry needs a 4-dim shape")
            if raw.size != int(np.prod(shape)):
                raise ConfigError(f"layer '{name}': blob holds {raw.size} floats, shape {shape}")
            m.convs[name] = raw.reshape(shape).astype(np.float64)
        elif entry.get("kind") == "bnact":
            c = int(entry.get("channels", 0))
            if raw.size != 4 * c:
                raise ConfigError(f"layer '{name}': blob holds {raw.size} floats, expected {4 * c}")
            g, b, mu, v = (raw[i * c : (i + 1) * c].astype(np.float64) for i in range(4))
            m.bnacts[name] = BnActRecord(
                g, b, mu, v,
                epsilon=float(entry.get("epsilon", 1e-5)),
                act_scale=float(entry.get("act_scale", 1.0)),
            )
        else:
            raise ConfigError(f"layer '{name}': unknown kind {entry['kind']!r}")
    return m


def gen_random_checkpoint(
    arch: str, seed: int, k: int = 10, shared_const: float = 1.0
) -> CheckpointManifest:
    """Seeded random float checkpoint with plausible batch-norm statistics.

    Statistics are scaled to the producing conv's fan-in so folded
    thresholds mostly land inside the reachable accumulator range; a few
    gammas are flipped negative to exercise descending threshold tables.
    """
    cfg = arch_config(arch)
    g = build_model(cfg, k)
    edges = validate_graph(g, require_lane_multiple=cfg.strict_lanes)
    rng = np.random.default_rng(seed)
    m = CheckpointManifest(arch=arch, k=k, shared_const=shared_const)
    for node in g.convs:
        s = node.spec
        m.convs[node.name] = rng.standard_normal((s.out_ch, s.in_ch, s.kh, s.kw)).astype(
            np.float32
        )
    for bn in g.bnacts:
        c = bn.channels
        fan_in = 0
        src = edges[bn.src]
        for node in g.convs:
            if node.dst == bn.src:
                fan_in = node.spec.fan_in
        sigma_ref = 1.5 * np.sqrt(max(fan_in, src.bound / 3, 1))
        gamma = rng.normal(1.0, 0.3, c)
        gamma[rng.random(c) < 0.05] *= -1.0
        m.bnacts[bn.name] = BnActRecord(
            gamma=gamma.astype(np.float32).astype(np.float64),
            beta=rng.normal(0.0, 1.0, c).astype(np.float32).astype(np.float64),
            mean=rng.normal(0.0, 0.3 * sigma_ref, c).astype(np.float32).astype(np.float64),
            var=(sigma_ref**2 * rng.uniform(0.25, 4.0, c)).astype(np.float32).astype(np.float64),
            epsilon=1e-5,
            act_scale=float(round(rng.uniform(0.5, 2.0), 4)),
        )
    return m


# --------------------------------------------------------------------------
# compilation


@dataclass(eq=False)
class CompiledModel:
    graph: GraphDef
    weights: dict[str, PackedWeights]
    thresholds: dict[str, ThresholdTable]
    alpha_out: float
    arch: str
    k: int
    shared_const: float
    version: int = FORMAT_VERSION


def compile_checkpoint(
    manifest: CheckpointManifest,
    shared_const: float | None = None,
    graph: GraphDef | None = None,
) -> CompiledModel:
    """Fold a float checkpoint into an integer-executable model.

    Scale resolution per conv: const-scaled convs (those feeding residual
    adds) take the shared constant c; others take per-channel
    alpha = mean |w|, with all-zero filters substituting alpha = 1 under a
    warning.  Each BnAct folds against whichever scale its producing edge
    carries, clamped to that edge's accumulator bound.

    ``graph`` overrides the named architecture (lane-width checks relaxed);
    such models execute but only named architectures serialize.
    """
    if graph is None:
        cfg = arch_config(manifest.arch)
        g = build_model(cfg, manifest.k)
        edges = validate_graph(g, require_lane_multiple=cfg.strict_lanes)
    else:
        g = graph
        edges = validate_graph(g, require_lane_multiple=False)
    c = shared_const if shared_const is not None else manifest.shared_const
    c = 1.0 if c is None else float(c)
    if not (np.isfinite(c) and c > 0):
        raise ConfigError(f"shared constant must be finite and > 0, got {c}")

    expected = {n.name for n in g.convs} | {n.name for n in g.bnacts}
    extra = (set(manifest.convs) | set(manifest.bnacts)) - expected
    if extra:
        raise CompileError(sorted(extra)[0], "not a layer of this architecture")

    weights: dict[str, PackedWeights] = {}
    fold_alpha: dict[str, np.ndarray] = {}
    alpha_out = 1.0
    for node in g.convs:
        w = manifest.convs.get(node.name)
        if w is None:
            raise CompileError(node.name, "missing conv weights")
        s = node.spec
        if tuple(w.shape) != (s.out_ch, s.in_ch, s.kh, s.kw):
            raise CompileError(
                node.name, f"weights shaped {w.shape}, expected {(s.out_ch, s.in_ch, s.kh, s.kw)}"
            )
        w = np.asarray(w, dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise CompileError(node.name, "weights contain non-finite values")
        signs, alpha = binarize_weights(w)
        zero = alpha == 0.0
        if zero.any():
            warnings.warn(
                f"layer '{node.name}': {int(zero.sum())} all-zero filter(s), using alpha = 1",
                stacklevel=2,
            )
            alpha = np.where(zero, 1.0, alpha)
        if isinstance(node, FinalConv):
            alpha_out = float(np.mean(np.abs(w))) or 1.0
            store = np.full(s.out_ch, alpha_out)
            weights[node.name] = pack_weights(signs, store, const_scaled=False)
        elif node.const_scaled:
            store = np.full(s.out_ch, c)
            weights[node.name] = pack_weights(signs, store, const_scaled=True)
            fold_alpha[node.name] = store
        else:
            weights[node.name] = pack_weights(signs, alpha, const_scaled=False)
            fold_alpha[node.name] = alpha

    thresholds: dict[str, ThresholdTable] = {}
    for bn in g.bnacts:
        rec = manifest.bnacts.get(bn.name)
        if rec is None:
            raise CompileError(bn.name, "missing batch-norm parameters")
        info = edges[bn.src]
        alpha = np.full(bn.channels, c) if info.const_scaled else fold_alpha[info.alpha_src]
        if rec.gamma.shape[0] != bn.channels:
            raise CompileError(bn.name, f"{rec.gamma.shape[0]} channels, expected {bn.channels}")
        try:
            params = BnParams(rec.gamma, rec.beta, rec.mean, rec.var, rec.epsilon)
            act = ActParams(rec.act_scale)
            thresholds[bn.name] = fuse_thresholds(alpha, params, act, acc_bound=info.bound)
        except (DomainError, ValueError) as e:
            raise CompileError(bn.name, str(e)) from e

    return CompiledModel(
        graph=g,
        weights=weights,
        thresholds=thresholds,
        alpha_out=alpha_out,
        arch=manifest.arch,
        k=manifest.k,
        shared_const=c,
    )


# --------------------------------------------------------------------------
# .ern serialization


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def serialize(model: CompiledModel) -> bytes:
    """Encode a compiled model as .ern bytes (see module docstring)."""
    if model.arch not in ARCHITECTURES:
        raise ConfigError(f"only named architectures serialize, got '{model.arch}'")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", model.version))
    out.write(_pack_str(model.arch))
    out.write(struct.pack("<Id", model.k, model.shared_const))
    out.write(struct.pack("<B", _ENDIAN_LITTLE))
    convs = model.graph.convs
    bnacts = model.graph.bnacts
    out.write(struct.pack("<I", len(convs) + len(bnacts)))
    for node in model.graph.nodes:
        if isinstance(node, (Conv, FinalConv)):
            w = model.weights[node.name]
            s = node.spec
            kind = LAYER_FINAL if isinstance(node, FinalConv) else LAYER_CONV
            out.write(struct.pack("<B", kind))
            out.write(_pack_str(node.name))
            out.write(
                struct.pack(
                    "<HHBBBBBBB",
                    s.out_ch,
                    s.in_ch,
                    s.kh,
                    s.kw,
                    s.stride[0],
                    s.stride[1],
                    s.padding[0],
                    s.padding[1],
                    1 if w.const_scaled else 0,
                )
            )
            alpha = np.ascontiguousarray(w.alpha, dtype="<f8")
            out.write(struct.pack("<I", alpha.size))
            out.write(alpha.tobytes())
            words = np.ascontiguousarray(w.bits, dtype="<u8")
            out.write(struct.pack("<I", words.size))
            out.write(words.tobytes())
        elif isinstance(node, BnAct):
            tbl = model.thresholds[node.name]
            out.write(struct.pack("<B", LAYER_BNACT))
            out.write(_pack_str(node.name))
            out.write(struct.pack("<H", node.channels))
            for ch in range(node.channels):
                if tbl.degenerate[ch]:
                    t = (int(tbl.const_code[ch]), 0, 0)
                else:
                    t = tuple(int(v) for v in tbl.t[ch])
                out.write(
                    struct.pack(
                        "<qqqBB",
                        *t,
                        1 if tbl.ascending[ch] else 0,
                        1 if tbl.degenerate[ch] else 0,
                    )
                )
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, limit: int):
        self.data = data
        self.pos = 0
        self.limit = limit

    def take(self, n: int) -> bytes:
        if self.pos + n > self.limit:
            raise TruncationError(
                f"file ends at byte {self.limit}, needed {self.pos + n}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load(data: bytes) -> CompiledModel:
    """Decode .ern bytes, verifying magic, version, structure, and CRC."""
    if len(data) < 4:
        raise TruncationError(f"{len(data)} bytes is too short for a model file")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise TruncationError("file ends inside the version field")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise VersionError(f"format version {version}, this reader handles {FORMAT_VERSION}")
    if len(data) < 13:
        raise TruncationError("file ends inside the header")

    r = _Reader(data, limit=len(data) - 4)
    r.pos = 8
    arch = r.string()
    k, shared_const = r.unpack("<Id")
    (endian,) = r.unpack("<B")
    if endian != _ENDIAN_LITTLE:
        raise FormatError(f"unsupported endianness tag {endian}")
    (layer_count,) = r.unpack("<I")

    cfg = arch_config(arch)
    g = build_model(cfg, k)
    by_name = {n.name: n for n in g.nodes}

    weights: dict[str, PackedWeights] = {}
    thresholds: dict[str, ThresholdTable] = {}
    alpha_out = 1.0
    for _ in range(layer_count):
        (kind,) = r.unpack("<B")
        name = r.string()
        node = by_name.get(name)
        if node is None:
            raise FormatError(f"layer '{name}' is not part of architecture '{arch}'")
        if kind in (LAYER_CONV, LAYER_FINAL):
            oc, ic, kh, kw, sh, sw, ph, pw, const_flag = r.unpack("<HHBBBBBBB")
            spec = getattr(node, "spec", None)
            if spec != ConvSpec(ic, oc, kh, kw, (sh, sw), (ph, pw)):
                raise FormatError(f"layer '{name}': stored shape disagrees with architecture")
            (n_alpha,) = r.unpack("<I")
            alpha = np.frombuffer(r.take(8 * n_alpha), dtype="<f8").astype(np.float64)
            (n_words,) = r.unpack("<I")
            shape = (oc, padded_channels(ic) // LANES, kh, kw)
            if n_words != int(np.prod(shape)):
                raise FormatError(f"layer '{name}': {n_words} weight words, expected {np.prod(shape)}")
            bits = np.frombuffer(r.take(8 * n_words), dtype="<u8").astype(np.uint64).reshape(shape)
            weights[name] = PackedWeights(
                bits=bits, alpha=alpha, in_channels=ic, const_scaled=bool(const_flag)
            )
            if kind == LAYER_FINAL:
                alpha_out = float(alpha[0])
        elif kind == LAYER_BNACT:
            (channels,) = r.unpack("<H")
            if getattr(node, "channels", None) != channels:
                raise FormatError(f"layer '{name}': stored width disagrees with architecture")
            raw = np.frombuffer(r.take(26 * channels), dtype=np.dtype("<i8, <i8, <i8, u1, u1"))
            t = np.stack([raw["f0"], raw["f1"], raw["f2"]], axis=1).astype(np.int64)
            ascending = raw["f3"].astype(bool)
            degenerate = raw["f4"].astype(bool)
            const_code = np.where(degenerate, t[:, 0], 0).astype(np.uint8)
            t = np.where(degenerate[:, None], 0, t)
            thresholds[name] = ThresholdTable(
                t=t, ascending=ascending, degenerate=degenerate, const_code=const_code
            )
        else:
            raise FormatError(f"unknown layer record kind {kind}")
    if r.pos != len(data) - 4:
        raise FormatError(f"{len(data) - 4 - r.pos} unexpected trailing bytes before checksum")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ChecksumError("body CRC32 does not match the stored checksum")

    missing = ({n.name for n in g.convs} | {n.name for n in g.bnacts}) - (
        set(weights) | set(thresholds)
    )
    if missing:
        raise FormatError(f"layer '{sorted(missing)[0]}' missing from file")
    return CompiledModel(
        graph=g,
        weights=weights,
        thresholds=thresholds,
        alpha_out=alpha_out,
        arch=arch,
        k=k,
        shared_const=shared_const,
        version=version,
    )


def models_equivalent(a: CompiledModel, b: CompiledModel) -> bool:
    """Bit-exact equality of weights, thresholds, and metadata."""
    if (a.arch, a.k, a.version) != (b.arch, b.k, b.version):
        return False
    if a.shared_const != b.shared_const or a.alpha_out != b.alpha_out:
        return False
    if set(a.weights) != set(b.weights) or set(a.thresholds) != set(b.thresholds):
        return False
    for name, wa in a.weights.items():
        wb = b.weights[name]
        if wa.const_scaled != wb.const_scaled or wa.in_channels != wb.in_channels:
            return False
        if not (np.array_equal(wa.bits, wb.bits) and np.array_equal(wa.alpha, wb.alpha)):
            return False
    for name, ta in a.thresholds.items():
        tb = b.thresholds[name]
        if not (
            np.array_equal(ta.t, tb.t)
            and np.array_equal(ta.ascending, tb.ascending)
            and np.array_equal(ta.degenerate, tb.degenerate)
            and np.array_equal(ta.const_code, tb.const_code)
        ):
            return False
    return True
