"""Float reference executor and integer-engine cross-checking.

The oracle evaluates the same quantized network in 64-bit reals, straight
from the defining math: binary signs convolved with code maps by im2col,
scaled by alpha (or the shared constant c), batch-normalized, and passed
through the explicit float quantizer.  It shares no kernel code with the
integer engine, so agreement between the two certifies both.

Sums of small integers are exact in 64-bit reals, so the convolution
itself is exact here; the only rounding happens when a scale or the
batch norm touches a value.  Residual branches therefore stay exactly
c times the engine's integer accumulators: the oracle adds the unscaled
(integer-valued) tensors and applies c lazily.

A cross-check can still legitimately disagree with the engine at
positions where the pre-quantization value sits essentially on a code
boundary: the folded thresholds and the direct float composition round
differently there.  Those positions are detected (|v / s_a| within 1e-9
of an integer), counted, and excluded; any other disagreement fails.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .quant import ActParams, quantize_act_float
from .graph import (
    AvgPoolScale,
    BnAct,
    Conv,
    FinalConv,
    GraphDef,
    PixelEmbed,
    ResidualAdd,
    execute,
    validate_graph,
)

TIE_EPS = 1e-9


# --------------------------------------------------------------------------
# model construction


@dataclass(eq=False)
class OracleModel:
    """Pre-folding float view of a compiled model."""

    graph: GraphDef
    k: int
    shared_const: float
    signs: dict[str, np.ndarray]  # (OC, IC, kh, kw) float64, +-1
    edge_scale: dict[str, np.ndarray]  # acc edge -> (OC,) effective scale
    bns: dict[str, object]  # BnActRecord per BnAct node
    act_scale: dict[str, float]
    alpha_out: float


def oracle_from_manifest(
    manifest, shared_const: float | None = None, graph: GraphDef | None = None
) -> OracleModel:
    """Build the float reference with the same scale policy as compilation.

    Must see the same manifest and shared constant as the compiled model,
    or divergence is by construction rather than by defect.
    """
    g = manifest.graph() if graph is None else graph
    validate_graph(g, require_lane_multiple=False)
    c = shared_const if shared_const is not None else manifest.shared_const
    c = 1.0 if c is None else float(c)
    if not (np.isfinite(c) and c > 0):
        raise ConfigError(f"shared constant must be finite and > 0, got {c}")

    signs: dict[str, np.ndarray] = {}
    edge_scale: dict[str, np.ndarray] = {}
    alpha_out = 1.0
    for node in g.convs:
        w = manifest.convs.get(node.name)
        if w is None:
            raise ConfigError(f"layer '{node.name}' missing from manifest")
        w = np.asarray(w, dtype=np.float64)
        signs[node.name] = np.where(w >= 0.0, 1.0, -1.0)
        if isinstance(node, FinalConv):
            alpha_out = float(np.mean(np.abs(w))) or 1.0
            edge_scale[node.dst] = np.full(node.spec.out_ch, alpha_out)
        elif node.const_scaled:
            edge_scale[node.dst] = np.full(node.spec.out_ch, c)
        else:
            alpha = np.abs(w).mean(axis=(1, 2, 3))
            edge_scale[node.dst] = np.where(alpha == 0.0, 1.0, alpha)
    for n in g.nodes:
        if isinstance(n, ResidualAdd):
            edge_scale[n.dst] = edge_scale[n.src_a]

    bns = {}
    act_scale = {}
    for bn in g.bnacts:
        rec = manifest.bnacts.get(bn.name)
        if rec is None:
            raise ConfigError(f"layer '{bn.name}' missing from manifest")
        bns[bn.name] = rec
        act_scale[bn.name] = float(rec.act_scale)
    return OracleModel(
        graph=g,
        k=manifest.k,
        shared_const=c,
        signs=signs,
        edge_scale=edge_scale,
        bns=bns,
        act_scale=act_scale,
        alpha_out=alpha_out,
    )


# --------------------------------------------------------------------------
# float execution


def _thermo_codes(img: np.ndarray, k: int) -> np.ndarray:
    # independent of the table-driven encoder: evaluate the defining map
    s = max(1, 255 // (3 * k))
    w = 1.0 / (s * k)
    b = 1.0 - (np.arange(1, k + 1)) / k
    x = img.astype(np.float64)
    z = np.floor(w * x[:, None, :, :] + b[None, :, None, None])
    z = np.clip(z, 0, 3)
    c, kk, h, wd = z.shape
    return z.reshape(c * kk, h, wd)


def _conv_im2col(codes: np.ndarray, w_signs: np.ndarray, stride, padding) -> np.ndarray:
    ic, h, wd = codes.shape
    oc, wic, kh, kw = w_signs.shape
    if wic != ic:
        raise ShapeError(f"conv weights expect {wic} channels, got {ic}")
    sh, sw = stride
    ph, pw = padding
    x = np.pad(codes.astype(np.float64), ((0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"empty conv output for input {h}x{wd}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw][:, :oh, :ow]  # (ic, oh, ow, kh, kw)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(ic * kh * kw, oh * ow)
    return (w_signs.reshape(oc, -1) @ cols).reshape(oc, oh, ow)


@dataclass(eq=False)
class OracleResult:
    logits: np.ndarray
    codes: dict[str, np.ndarray] = field(default_factory=dict)  # act2 edge -> uint8
    pre: dict[str, np.ndarray] = field(default_factory=dict)  # BnAct name -> float v
    raw: dict[str, np.ndarray] = field(default_factory=dict)  # acc edge -> integer-valued f64


def oracle_execute(om: OracleModel, img: np.ndarray) -> OracleResult:
    """Run the float reference on one image, keeping every intermediate."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {img.shape}")
    res = OracleResult(logits=np.zeros(0))
    values: dict[str, np.ndarray] = {}
    for node in om.graph.nodes:
        if isinstance(node, PixelEmbed):
            values[node.dst] = _thermo_codes(img, node.k)
            res.codes[node.dst] = values[node.dst].astype(np.uint8)
        elif isinstance(node, (Conv, FinalConv)):
            raw = _conv_im2col(
                values[node.src], om.signs[node.name], node.spec.stride, node.spec.padding
            )
            values[node.dst] = raw
            res.raw[node.dst] = raw
        elif isinstance(node, BnAct):
            rec = om.bns[node.name]
            scale = om.edge_scale[node.src][:, None, None]
            y = scale * values[node.src]
            sd = np.sqrt(np.asarray(rec.var, dtype=np.float64) + rec.epsilon)[:, None, None]
            v = (
                np.asarray(rec.gamma, dtype=np.float64)[:, None, None]
                * (y - np.asarray(rec.mean, dtype=np.float64)[:, None, None])
                / sd
                + np.asarray(rec.beta, dtype=np.float64)[:, None, None]
            )
            codes = quantize_act_float(v, ActParams(rec.act_scale))
            values[node.dst] = codes
            res.pre[node.name] = v
            res.codes[node.dst] = codes
        elif isinstance(node, ResidualAdd):
            raw = values[node.src_a] + values[node.src_b]
            values[node.dst] = raw
            res.raw[node.dst] = raw
        elif isinstance(node, AvgPoolScale):
            scaled = om.alpha_out * values[node.src]
            res.logits = scaled.mean(axis=(1, 2))
            values[node.dst] = res.logits
    return res


# --------------------------------------------------------------------------
# cross-checking


@dataclass
class LayerReport:
    mismatches: int = 0  # non-boundary code disagreements
    boundary: int = 0  # disagreements excused as quantization-boundary ties


@dataclass
class CrossCheckReport:
    ok: bool = True
    images: int = 0
    layers: dict[str, LayerReport] = field(default_factory=dict)
    first_divergence: str | None = None
    max_logit_rel_err: float = 0.0
    residual_scaling_exact: bool = True

    def summary(self) -> str:
        lines = [
            f"images checked: {self.images}",
            f"max logit relative error: {self.max_logit_rel_err:.3e}",
            f"residual branches exactly c x integer: {self.residual_scaling_exact}",
        ]
        for name, rep in self.layers.items():
            if rep.mismatches or rep.boundary:
                lines.append(
                    f"  {name}: {rep.mismatches} mismatches, {rep.boundary} boundary ties"
                )
        if self.first_divergence:
            lines.append(f"first divergent layer: {self.first_divergence}")
        lines.append("PASS" if self.ok else "FAIL")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "ok": self.ok,
                "images": self.images,
                "max_logit_rel_err": self.max_logit_rel_err,
                "residual_scaling_exact": self.residual_scaling_exact,
                "first_divergence": self.first_divergence,
                "layers": {
                    n: {"mismatches": r.mismatches, "boundary": r.boundary}
                    for n, r in self.layers.items()
                },
            },
            indent=2,
        )


def cross_check(
    model,
    om: OracleModel,
    images,
    kernel: str = "popcount",
    tie_eps: float = TIE_EPS,
    logit_rtol: float = 1e-6,
) -> CrossCheckReport:
    """Compare integer execution against the float reference image by image.

    Passes iff every 2-bit code map matches outside boundary ties, the
    residual branch values are exactly c times the integer accumulators,
    and logits agree within ``logit_rtol`` relative.
    """
    g: GraphDef = model.graph
    report = CrossCheckReport()
    embed = next(n for n in g.nodes if isinstance(n, PixelEmbed))
    report.layers[embed.name] = LayerReport()
    for bn in g.bnacts:
        report.layers[bn.name] = LayerReport()

    adds = [n for n in g.nodes if isinstance(n, ResidualAdd)]
    for img in images:
        ir = execute(model, img, kernel=kernel, record=True)
        orr = oracle_execute(om, img)
        report.images += 1

        # embed codes: both routes are exact integer maps, no tie excuse
        diff = int(np.count_nonzero(ir.acts[embed.dst] != orr.codes[embed.dst]))
        if diff:
            report.layers[embed.name].mismatches += diff
            report.first_divergence = report.first_divergence or embed.name

        for bn in g.bnacts:
            a = ir.acts[bn.dst]
            b = orr.codes[bn.dst]
            diffmask = a != b
            if not diffmask.any():
                continue
            ratio = orr.pre[bn.name] / om.act_scale[bn.name]
            near = np.abs(ratio - np.rint(ratio)) < tie_eps
            hard = int(np.count_nonzero(diffmask & ~near))
            tied = int(np.count_nonzero(diffmask & near))
            report.layers[bn.name].mismatches += hard
            report.layers[bn.name].boundary += tied
            if hard:
                report.first_divergence = report.first_divergence or bn.name

        c = model.shared_const
        for add in adds:
            for src in (add.src_a, add.src_b):
                want = c * ir.accs[src].astype(np.float64)
                if not np.array_equal(c * orr.raw[src], want):
                    report.residual_scaling_exact = False

        lf = orr.logits
        li = ir.logits
        denom = max(float(np.max(np.abs(lf))), 1e-30)
        rel = float(np.max(np.abs(li - lf))) / denom
        report.max_logit_rel_err = max(report.max_logit_rel_err, rel)

    hard_total = sum(r.mismatches for r in report.layers.values())
    report.ok = (
        hard_total == 0
        and report.residual_scaling_exact
        and report.max_logit_rel_err <= logit_rtol
    )
    if not report.ok and report.first_divergence is None and hard_total == 0:
        report.first_divergence = "logits"
    return report
