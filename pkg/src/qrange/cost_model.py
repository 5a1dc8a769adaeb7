"""Memory-movement cost of static vs dynamic output quantization.

Per layer (forward pass, one sample), in bits:

    static  = weights + C_in*W*H*b_a + C_out*W*H*b_a
    dynamic = weights + C_in*W*H*b_a + 2*C_out*W*H*b_acc + C_out*W*H*b_a

Dynamic quantization must spill the full-precision accumulator output to
memory and read it back before quantizing, hence the two ``b_acc`` terms.
Depthwise layers carry ``C_out*k*k*b_w`` weight bits.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path

KIB = 8 * 1024


@dataclass(frozen=True)
class LayerGeom:
    c_in: int
    c_out: int
    k: int
    w: int
    h: int
    depthwise: bool = False
    name: str = ""

    def __post_init__(self):
        for f in ("c_in", "c_out", "k", "w", "h"):
            v = getattr(self, f)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"{f} must be a positive integer, got {v!r}")
        if self.depthwise and self.c_in != self.c_out:
            raise ValueError("depthwise layers need c_in == c_out")


@dataclass(frozen=True)
class BitWidths:
    b_w: int = 8
    b_a: int = 8
    b_acc: int = 32

    def __post_init__(self):
        for f in ("b_w", "b_a", "b_acc"):
            v = getattr(self, f)
            if not isinstance(v, int) or not 1 <= v <= 64:
                raise ValueError(f"{f} must be an integer in [1, 64], got {v!r}")
        if self.b_acc < self.b_a:
            raise ValueError("accumulator must be at least as wide as activations")


@dataclass(frozen=True)
class CostReport:
    static_bits: int
    dynamic_bits: int
    name: str = ""

    @property
    def static_kib(self) -> float:
        return self.static_bits / KIB

    @property
    def dynamic_kib(self) -> float:
        return self.dynamic_bits / KIB

    @property
    def delta_pct(self) -> float:
        return 100.0 * (self.dynamic_bits - self.static_bits) / self.static_bits

    @property
    def display(self) -> tuple[int, int, int]:
        """(static KiB, dynamic KiB, delta %) rounded half-up for printing."""
        return (round_half_up(self.static_kib), round_half_up(self.dynamic_kib), round_half_up(self.delta_pct))


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _weight_bits(g: LayerGeom, b: BitWidths) -> int:
    fan_in = 1 if g.depthwise else g.c_in
    return fan_in * g.c_out * g.k * g.k * b.b_w


def static_cost_bits(g: LayerGeom, b: BitWidths = BitWidths()) -> int:
    wh = g.w * g.h
    return _weight_bits(g, b) + g.c_in * wh * b.b_a + g.c_out * wh * b.b_a


def dynamic_cost_bits(g: LayerGeom, b: BitWidths = BitWidths()) -> int:
    wh = g.w * g.h
    return (
        _weight_bits(g, b)
        + g.c_in * wh * b.b_a
        + 2 * g.c_out * wh * b.b_acc
        + g.c_out * wh * b.b_a
    )


def cost_report(g: LayerGeom, b: BitWidths = BitWidths(), batch: int = 1) -> CostReport:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return CostReport(batch * static_cost_bits(g, b), batch * dynamic_cost_bits(g, b), g.name)


def network_cost(layers: list[LayerGeom], b: BitWidths = BitWidths(), batch: int = 1):
    """Per-layer reports plus their element-wise sum (named ``total``)."""
    if not layers:
        raise ValueError("network_cost needs at least one layer")
    rows = [cost_report(g, b, batch) for g in layers]
    total = CostReport(sum(r.static_bits for r in rows), sum(r.dynamic_bits for r in rows), "total")
    return total, rows


_TYPES = {"conv": False, "dw": True, "linear": False}


def load_network(path: str | Path | None = None) -> list[LayerGeom]:
    """Read a JSON list of ``{name, type, c_in, c_out, k, w, h}`` layers.

    ``type`` is one of conv, dw, linear. Linear layers default to k=w=h=1.
    With no path, the bundled ResNet18/MobileNetV2 layer file is used.
    """
    if path is None:
        text = resources.files("qrange.data").joinpath("table5_layers.json").read_text()
    else:
        text = Path(path).read_text()
    entries = json.loads(text)
    if not isinstance(entries, list):
        raise ValueError("network file must contain a JSON list")
    layers = []
    for i, e in enumerate(entries):
        kind = e.get("type", "conv")
        if kind not in _TYPES:
            raise ValueError(f"layer {i}: unknown type {kind!r}")
        layers.append(
            LayerGeom(
                c_in=e["c_in"],
                c_out=e["c_out"],
                k=e.get("k", 1),
                w=e.get("w", 1),
                h=e.get("h", 1),
                depthwise=_TYPES[kind],
                name=e.get("name", f"layer{i}"),
            )
        )
    return layers


HEADER = ["layer", "type", "c_in", "c_out", "k", "w x h", "static_kib", "dynamic_kib", "delta_pct"]


def _row(g: LayerGeom | None, r: CostReport) -> list[str]:
    s, d, p = r.display
    if g is None:
        geo = ["", "", "", "", ""]
    else:
        geo = [
            "dw" if g.depthwise else "conv",
            str(g.c_in),
            str(g.c_out),
            f"{g.k}x{g.k}",
            f"{g.w}x{g.h}",
        ]
    return [r.name, *geo, str(s), str(d), f"+{p}%"]


def format_table(layers: list[LayerGeom], b: BitWidths = BitWidths(), fmt: str = "table", batch: int = 1) -> str:
    total, rows = network_cost(layers, b, batch)
    body = [_row(g, r) for g, r in zip(layers, rows)]
    body.append(_row(None, total))
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        w.writerows(body)
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    widths = [max(len(HEADER[i]), *(len(row[i]) for row in body)) for i in range(len(HEADER))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(HEADER, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"
