"""Randomized kernel equivalence trials and per-layer cost benchmarking."""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bitpack import count_ops, pack_signs, xnor_popcount_core
from .tensor import ConvSpec, conv2d_ref

BENCH_COLUMNS = ("layer", "real_flops", "binary_mults", "binary_ops", "total_ops", "memory_bytes",
                 "kernel_bytes", "wall_ns_packed", "wall_ns_reference")

_CHANNEL_CHOICES = (1, 3, 8, 17, 63, 64, 65, 130)


def random_signs(rng: np.random.Generator, shape) -> np.ndarray:
    return np.where(rng.random(shape) < 0.5, -1, 1).astype(np.int8)


def random_conv_case(rng: np.random.Generator):
    """Random geometry with valid output size, plus +-1 activations and weights."""
    while True:
        k = int(rng.choice([1, 2, 3, 5]))
        stride = int(rng.integers(1, 4))
        padding = int(rng.integers(0, min(k, 3)))
        c_in = int(rng.choice(_CHANNEL_CHOICES))
        c_out = int(rng.integers(1, 9))
        out_h, out_w = (int(v) for v in rng.integers(1, 9, size=2))
        h = (out_h - 1) * stride + k - 2 * padding
        w = (out_w - 1) * stride + k - 2 * padding
        if h >= 1 and w >= 1:
            break
    spec = ConvSpec(c_out, c_in, k, stride, padding)
    return spec, random_signs(rng, (c_in, h, w)), random_signs(rng, (c_out, c_in, k, k))


@dataclass
class EquivFailure:
    trial: int
    spec: ConvSpec
    activations: np.ndarray
    weights: np.ndarray
    packed: np.ndarray
    reference: np.ndarray

    def describe(self) -> str:
        diff = np.argwhere(self.packed != self.reference)
        lines = [
            f"trial {self.trial}: {self.spec}",
            f"activation shape {self.activations.shape}, weight shape {self.weights.shape}",
            f"{len(diff)} mismatching outputs; first at {tuple(int(v) for v in diff[0])}: "
            f"packed={int(self.packed[tuple(diff[0])])} reference={int(self.reference[tuple(diff[0])])}",
            "activations:", np.array2string(self.activations, threshold=10**6),
            "weights:", np.array2string(self.weights, threshold=10**6),
        ]
        return "\n".join(lines)


def run_equiv_check(trials: int, seed: int, kernel: Callable = xnor_popcount_core) -> tuple[int, Optional[EquivFailure]]:
    """Run ``trials`` random cases; return (passed count, first failure or None).

    Spatial padding of the packed path is -1, so the reference pads with -1 too.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    for t in range(trials):
        spec, x, w = random_conv_case(rng)
        packed = np.asarray(kernel(pack_signs(x, axis=0), pack_signs(w, axis=1), spec))
        ref = conv2d_ref(x, w, spec, pad_value=-1.0)
        if packed.shape != ref.shape or not np.array_equal(packed, ref.astype(np.int64)):
            return t, EquivFailure(t, spec, x, w, packed, ref)
    return trials, None


_LAYER_RE = re.compile(
    r"^(?P<cin>\d+)/(?P<cout>\d+)/(?P<k>\d+)x(?P=k)/(?P<h>\d+)x(?P<w>\d+)"
    r"(?:/s(?P<s>\d+))?(?:/p(?P<p>\d+))?(?:/(?P<kind>binary|real))?$"
)


@dataclass(frozen=True)
class LayerSpec:
    text: str
    conv: ConvSpec
    out_h: int
    out_w: int
    binary: bool

    @property
    def input_size(self) -> tuple[int, int]:
        c = self.conv
        return ((self.out_h - 1) * c.stride + c.k - 2 * c.padding,
                (self.out_w - 1) * c.stride + c.k - 2 * c.padding)


def parse_layer_spec(text: str) -> LayerSpec:
    """Parse ``c_in/c_out/KxK/HxW[/sS][/pP][/binary|/real]``.

    ``HxW`` is the output size. Stride defaults to 1, padding to ``K // 2``
    and the kind to binary.
    """
    m = _LAYER_RE.match(text.strip())
    if not m:
        raise ValueError(f"bad layer spec {text!r}; expected c_in/c_out/KxK/HxW[/sS][/pP][/binary|/real]")
    k = int(m["k"])
    stride = int(m["s"] or 1)
    padding = int(m["p"]) if m["p"] is not None else k // 2
    layer = LayerSpec(text.strip(), ConvSpec(int(m["cout"]), int(m["cin"]), k, stride, padding),
                      int(m["h"]), int(m["w"]), m["kind"] != "real")
    if min(layer.input_size) < 1:
        raise ValueError(f"layer spec {text!r} implies an empty input")
    return layer


def read_layer_specs(path) -> list[LayerSpec]:
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    specs = [parse_layer_spec(ln) for ln in lines if ln]
    if not specs:
        raise ValueError(f"{path} contains no layer specs")
    return specs


def _best_ns(fn, repeats: int) -> int:
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        elapsed = time.perf_counter_ns() - t0
        best = elapsed if best is None else min(best, elapsed)
    return best


def bench_row(layer: LayerSpec, seed: int = 42, repeats: int = 3) -> dict:
    """Cost accounting plus best-of-``repeats`` wall times for one layer."""
    rep = count_ops(layer.conv, layer.out_h, layer.out_w, layer.binary)
    rng = np.random.default_rng(seed)
    h, w = layer.input_size
    x = random_signs(rng, (layer.conv.c_in, h, w))
    wt = random_signs(rng, (layer.conv.c_out, layer.conv.c_in, layer.conv.k, layer.conv.k))
    ref_ns = _best_ns(lambda: conv2d_ref(x, wt, layer.conv, pad_value=-1.0), repeats)
    packed_ns = ""
    if layer.binary:
        a, b = pack_signs(x, axis=0), pack_signs(wt, axis=1)
        packed_ns = _best_ns(lambda: xnor_popcount_core(a, b, layer.conv), repeats)
    return {
        "layer": layer.text,
        "real_flops": rep.real_flops,
        "binary_mults": rep.binary_mults,
        "binary_ops": rep.binary_ops,
        "total_ops": rep.total_ops,
        "memory_bytes": rep.memory_bytes,
        "kernel_bytes": rep.kernel_bytes,
        "wall_ns_packed": packed_ns,
        "wall_ns_reference": ref_ns,
    }
