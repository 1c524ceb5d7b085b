"""Op-count workloads and timing reports shared by the CLI and the tests."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bootstrap import conv_fused, fuse_kernel_with_stoc2, make_split, stoc2
from .ckks import CkksContext
from .encoding import COEFF
from .conv import (FeatureMapLayout, KernelTensor, LayoutError, coeff_conv_kernels, coeff_layout_unpack,
                   coeff_layout_vector, conv2d_coeff, conv2d_nested, conv2d_reference, conv2d_slot,
                   decrypt_feature_map, dwconv2d, dwconv2d_reference, pack_conv_kernels, pack_dw_kernel,
                   pack_feature_map, pack_tree_galois, slot_conv_plaintexts, slot_conv_rotations,
                   slot_tile_unpack, slot_tile_vectors, slot_tiling)
from .ring import RingParams, preset

SCHEMA = "nestfhe.bench/1"
ENCODINGS = ("nested", "coefficient", "slot")
LAYERS = ("conv2d", "dwconv2d")


class WorkloadError(ValueError):
    pass


def predict_counts(layer: str, encoding: str, C: int, f: int = 3) -> dict[str, int]:
    """Closed-form PMult / HRot / level / plaintext counts per encoding."""
    if layer == "conv2d":
        if encoding == "nested":
            r = math.isqrt(C)
            hrot = 2 * r - 2 if r * r == C else _bsgs_rotations(C)
            return {"pmult": C, "hrot": hrot, "level": 0, "plaintexts": C}
        if encoding == "coefficient":
            return {"pmult": 2 * C - 1, "hrot": C - 1, "level": 1, "plaintexts": C}
        if encoding == "slot":
            return {"pmult": 2 * f * f * C, "hrot": 2 * f * f + 2 * C - 4, "level": 1, "plaintexts": 2 * f * f * C}
    elif layer == "dwconv2d":
        if encoding == "nested":
            return {"pmult": 1, "hrot": 0, "level": 1, "plaintexts": 1}
        if encoding == "coefficient":
            return {"pmult": 2 * C - 1, "hrot": C - 1, "level": 1, "plaintexts": C}
        if encoding == "slot":
            return {"pmult": 2 * f * f, "hrot": 2 * f * f - 2, "level": 1, "plaintexts": 2 * f * f}
    raise WorkloadError(f"unknown layer/encoding {layer}/{encoding}")


def _bsgs_rotations(C: int) -> int:
    from .linalg import plan_bsgs
    return plan_bsgs(C).predicted_rotations


def counts_layout(C: int, ring_degree: int, f: int = 3) -> FeatureMapLayout:
    """Canvas with exactly C channels per ciphertext; the image is half the canvas."""
    w2 = ring_degree // C
    w = math.isqrt(w2)
    if C < 1 or ring_degree % C or w * w != w2 or w & (w - 1):
        raise WorkloadError(f"C={C} needs N/C to be an even power of two (N={ring_degree})")
    if w < 2 * f - 2 or w < 4:
        raise WorkloadError(f"canvas {w} too small for f={f}")
    return FeatureMapLayout(w // 2, w, C, ring_degree)


@dataclass
class CountResult:
    layer: str
    encoding: str
    channels: int
    f: int
    ring_degree: int
    predicted: dict
    measured: dict
    rel_error: float

    @property
    def match(self) -> bool:
        return all(self.measured.get(k) == v for k, v in self.predicted.items())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["match"] = self.match
        return d


def _rel(a, b) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def measure_counts(layer: str, encoding: str, C: int, f: int = 3, ring_degree: int = 1 << 12,
                   params: RingParams | None = None, seed: int = 0) -> CountResult:
    """Run one layer and report measured counters next to the closed forms."""
    if layer not in LAYERS or encoding not in ENCODINGS:
        raise WorkloadError(f"unknown layer/encoding {layer}/{encoding}")
    P = params or preset("desk", ring_degree)
    N = P.ring_degree
    lay = counts_layout(C, N, f)
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(C, lay.w0, lay.w0))
    if layer == "conv2d":
        K = KernelTensor(rng.normal(size=(C, C, f, f)))
        ref = conv2d_reference(img, K)
    else:
        wdw = rng.normal(size=(C, f, f))
        full = np.zeros((C, C, f, f))
        full[np.arange(C), np.arange(C)] = wdw
        K = KernelTensor(full)
        ref = dwconv2d_reference(img, wdw)
    pred = predict_counts(layer, encoding, C, f)

    if encoding == "nested":
        split = make_split(N, lay.slice_len)
        if layer == "conv2d":
            kern = pack_conv_kernels(lay, K)
            fused = fuse_kernel_with_stoc2(kern, split)
            rots = set(kern.rotations()) | set(fused.rotations()) | set(split.stoc2.rotations() if split.stoc2 else ())
        else:
            dk = pack_dw_kernel(lay, wdw)
            rots = set()
        ctx = CkksContext(P, seed=seed, rotations=sorted(rots))
        ev, dec = ctx.evaluator, ctx.decryptor
        ct = pack_feature_map(ev, dec.encrypt_sk, lay, img, level=2)[0]
        b = ev.counter.snapshot()
        if layer == "conv2d":
            out = conv2d_nested(ev, ct, kern)
        else:
            out = dwconv2d(ev, ct, dk)
        d = ev.counter.since(b)
        got = decrypt_feature_map(dec, lay, [out], C)
        measured = {"pmult": d["pmult"], "hrot": d["hrot"],
                    "plaintexts": kern.plaintext_count if layer == "conv2d" else 1}
        if layer == "conv2d":
            # level attributable to the conv once fused with StoC2
            seq = stoc2(ev, out, split)
            fused_out = conv_fused(ev, ct, fused)
            stoc2_alone = stoc2(ev, ct, split)
            measured["level"] = (ct.level - fused_out.level) - (ct.level - stoc2_alone.level)
            measured["level_sequential"] = ct.level - seq.level
            measured["level_fused"] = ct.level - fused_out.level
        else:
            measured["level"] = ct.level - out.level
    elif encoding == "coefficient":
        ks = coeff_conv_kernels(lay, K)
        ctx = CkksContext(P, seed=seed, galois=pack_tree_galois(C, N))
        ev, dec = ctx.evaluator, ctx.decryptor
        ct = dec.encrypt_sk(ctx.encoder.encode_coeffs(coeff_layout_vector(lay, img)))
        b = ev.counter.snapshot()
        out = conv2d_coeff(ev, ct, ks)
        d = ev.counter.since(b)
        got = coeff_layout_unpack(lay, dec.decrypt_decode(out), C)
        measured = {"pmult": d["pmult"], "hrot": d["hrot"], "level": ct.level - out.level, "plaintexts": len(ks)}
    else:
        dw = layer == "dwconv2d"
        t = slot_tiling(lay, K)
        ctx = CkksContext(P, seed=seed, rotations=sorted(slot_conv_rotations(t, K, dw)))
        ev, dec = ctx.evaluator, ctx.decryptor
        cts = [dec.encrypt_sk(ctx.encoder.encode_slots(v)) for v in slot_tile_vectors(t, img)]
        b = ev.counter.snapshot()
        outs = conv2d_slot(ev, cts, t, K, dw)
        d = ev.counter.since(b)
        got = slot_tile_unpack(t, [dec.slots(c) for c in outs], C)
        measured = {"pmult": d["pmult"], "hrot": d["hrot"], "level": cts[0].level - outs[0].level,
                    "plaintexts": len(slot_conv_plaintexts(t, K, dw)) * len(cts)}
    return CountResult(layer, encoding, C, f, N, pred, measured, _rel(got, ref))


# timing -----------------------------------------------------------------------------------


def build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return f"v{__version__}"


@dataclass
class BenchReport:
    workload: str
    encoding: str
    preset: str
    ring_degree: int
    channels: int
    reps: int
    seed: int
    median_s: float
    p95_s: float
    min_s: float
    counters: dict
    build: str = field(default_factory=build_id)
    schema: str = SCHEMA
    secure: bool = False

    FIELDS = ("schema", "build", "workload", "encoding", "preset", "ring_degree", "channels", "reps",
              "seed", "secure", "median_s", "p95_s", "min_s", "counters")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["schema", "workload", "metric", "value"])
        d = self.to_dict()
        for k in self.FIELDS:
            if k in ("schema", "counters"):
                continue
            w.writerow([SCHEMA, self.workload, k, d[k]])
        for k, v in sorted(self.counters.items()):
            w.writerow([SCHEMA, self.workload, f"counter.{k}", v])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if k != "counters"]
        rows += [(f"counter.{k}", v) for k, v in sorted(self.counters.items()) if v]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def parse_report(text: str, fmt: str) -> dict:
    """Inverse of to_json / to_csv (for tools and tests)."""
    if fmt == "json":
        d = json.loads(text)
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unknown schema {d.get('schema')!r}")
        return d
    rows = list(csv.reader(io.StringIO(text)))
    if rows[0] != ["schema", "workload", "metric", "value"]:
        raise ValueError("bad csv header")
    d: dict = {"schema": SCHEMA, "counters": {}}
    for schema, workload, metric, value in rows[1:]:
        if schema != SCHEMA:
            raise ValueError(f"unknown schema {schema!r}")
        d["workload"] = workload
        if metric.startswith("counter."):
            d["counters"][metric[8:]] = int(value)
        else:
            d[metric] = _CSV_TYPES.get(metric, str)(value)
    return d


_CSV_TYPES = {"ring_degree": int, "channels": int, "reps": int, "seed": int,
              "median_s": float, "p95_s": float, "min_s": float,
              "secure": lambda v: v == "True"}


WORKLOADS = ("conv2d", "dwconv2d", "bootstrap")


def _make_workload(workload: str, encoding: str, P: RingParams, C: int, seed: int):
    """Returns (run, counter); run() performs one repetition."""
    N = P.ring_degree
    rng = np.random.default_rng(seed)
    if workload in ("conv2d", "dwconv2d"):
        lay = counts_layout(C, N)
        img = rng.normal(size=(C, lay.w0, lay.w0))
        if encoding == "nested":
            if workload == "conv2d":
                kern = pack_conv_kernels(lay, KernelTensor(rng.normal(size=(C, C, 3, 3))))
                ctx = CkksContext(P, seed=seed, rotations=kern.rotations())
                ct = pack_feature_map(ctx.evaluator, ctx.evaluator.encrypt, lay, img, level=1)[0]
                return (lambda: conv2d_nested(ctx.evaluator, ct, kern)), ctx.counter
            dk = pack_dw_kernel(lay, rng.normal(size=(C, 3, 3)))
            ctx = CkksContext(P, seed=seed)
            ct = pack_feature_map(ctx.evaluator, ctx.evaluator.encrypt, lay, img, level=1)[0]
            return (lambda: dwconv2d(ctx.evaluator, ct, dk)), ctx.counter
        K = KernelTensor(rng.normal(size=(C, C, 3, 3)))
        if workload == "dwconv2d":
            w = K.weights
            full = np.zeros_like(w)
            full[np.arange(C), np.arange(C)] = w[np.arange(C), np.arange(C)]
            K = KernelTensor(full)
        if encoding == "coefficient":
            ks = coeff_conv_kernels(lay, K)
            ctx = CkksContext(P, seed=seed, galois=pack_tree_galois(C, N))
            ct = ctx.evaluator.encrypt(ctx.encoder.encode_coeffs(coeff_layout_vector(lay, img)))
            return (lambda: conv2d_coeff(ctx.evaluator, ct, ks)), ctx.counter
        dw = workload == "dwconv2d"
        t = slot_tiling(lay, K)
        ctx = CkksContext(P, seed=seed, rotations=sorted(slot_conv_rotations(t, K, dw)))
        cts = [ctx.encrypt_slots(v) for v in slot_tile_vectors(t, img)]
        return (lambda: conv2d_slot(ctx.evaluator, cts, t, K, dw)), ctx.counter
    if workload == "bootstrap":
        from .bootstrap import BootstrapPlan, OracleModEval, bootstrap
        lay = counts_layout(C, N)
        split = make_split(N, lay.slice_len)
        ctx = CkksContext(P, seed=seed, rotations=sorted(split.rotations()), conjugation=True)
        plan = BootstrapPlan(split, OracleModEval(ctx.decryptor, seed))
        img = rng.normal(size=(C, lay.w0, lay.w0))
        ct = pack_feature_map(ctx.evaluator, ctx.evaluator.encrypt, lay, img, level=0)[0].retag(COEFF)
        return (lambda: bootstrap(ctx.evaluator, ct, plan)), ctx.counter
    raise WorkloadError(f"unknown workload {workload!r}")


def run_bench(workload: str, encoding: str = "nested", preset_name: str = "desk", ring_degree: int | None = None,
              channels: int = 16, reps: int = 5, seed: int = 0) -> BenchReport:
    """Warm-up run discarded; medians over ``reps`` timed runs; counters of one run."""
    if reps < 1:
        raise WorkloadError("reps must be positive")
    P = preset(preset_name, ring_degree)
    run, counter = _make_workload(workload, encoding, P, channels, seed)
    run()
    times = []
    per_run = None
    for _ in range(reps):
        b = counter.snapshot()
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
        d = counter.since(b)
        if per_run is not None and d != per_run:
            raise RuntimeError("counters differ between repetitions")
        per_run = d
    ts = sorted(times)
    p95 = ts[min(len(ts) - 1, math.ceil(0.95 * len(ts)) - 1)]
    return BenchReport(workload, encoding, P.name or preset_name, P.ring_degree, channels, reps, seed,
                       statistics.median(ts), p95, ts[0], per_run, secure=bool(P.secure))
