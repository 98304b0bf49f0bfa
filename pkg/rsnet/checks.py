"""The invariant suite behind ``rsnet check``.

Each check returns a short detail string on success and raises ``CheckFailed``
otherwise. Checks are independent and seeded, so a run is reproducible.
"""
from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from rsnet import ops, wavelet
from rsnet.arch import ABLATION_CONFIGS, ArchConfig, load_config
from rsnet.blocks import ContextGuided, LSHead, Star, WaveletPool
from rsnet.boxes import Detection, GroundTruthBox
from rsnet.checkpoint import load_checkpoint, save_checkpoint
from rsnet.detect import detection_loss
from rsnet.errors import CheckpointError, RsnetError
from rsnet.gradcheck import GradCheckResult, gradcheck
from rsnet.layers import Module
from rsnet.metrics import IOU_THRESHOLDS, brute_force_ap, evaluate, exhaustive_nms, nms
from rsnet.model import build_model, count_params, enumerate_params
from rsnet.rng import Rng
from rsnet.tensor import Tape, Tensor

logger = logging.getLogger("rsnet.checks")

PARAM_TARGET = 1_490_000
FLOPS_TARGET = 5.1e9
BUDGET_TOLERANCE = 0.25
SHAPES_PER_CHECK = 5


class CheckFailed(Exception):
    pass


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


_REGISTRY: dict[str, Callable[[], str]] = {}


def check(name: str):
    def register(fn: Callable[[], str]) -> Callable[[], str]:
        _REGISTRY[name] = fn
        return fn
    return register


def check_names() -> list[str]:
    return list(_REGISTRY)


def tiny_config(**overrides) -> ArchConfig:
    """A 64x64 single-channel model small enough for exhaustive checks."""
    values = dict(
        name="tiny",
        input_size=(64, 64),
        in_channels=1,
        stem=(4, 8),
        stages=(8, 16, 32),
        depths=(1, 1, 1),
        neck_widths=(8, 16, 32),
        head_hidden=16,
        reduction=4,
    )
    values.update(overrides)
    return ArchConfig(**values)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise CheckFailed(message)


# -- wavelet ---------------------------------------------------------------

@check("wavelet.orthonormal")
def check_orthonormal() -> str:
    gram = wavelet.gram_matrix()
    _require(np.array_equal(gram, np.eye(4)), f"filter-bank Gram matrix is not the identity:\n{gram}")
    return "Gram matrix equals I exactly"


def _random_images(rng: Rng, count: int, dtype):
    for _ in range(count):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(2, 13)), int(rng.integers(2, 13)))
        yield rng.normal(shape, dtype=dtype)


@check("wavelet.reconstruction")
def check_reconstruction() -> str:
    worst = {}
    for dtype, tolerance in ((np.float64, 1e-12), (np.float32, 1e-6)):
        rng = Rng(0, f"checks.reconstruction.{np.dtype(dtype).name}")
        errors = []
        for data in _random_images(rng, 100, dtype):
            x = Tensor(data)
            subbands = wavelet.haar_analysis(x)
            back = wavelet.haar_synthesis(subbands).data.astype(np.float64)
            reference = data.astype(np.float64)
            rel = np.linalg.norm(back - reference) / max(np.linalg.norm(reference), 1e-300)
            energy_in = float((reference ** 2).sum())
            energy_out = float((subbands.tensor.data.astype(np.float64) ** 2).sum())
            parseval = abs(energy_out - energy_in) / max(energy_in, 1e-300)
            errors.append(max(rel, parseval))
        worst[np.dtype(dtype).name] = max(errors)
        _require(worst[np.dtype(dtype).name] <= tolerance,
                 f"{np.dtype(dtype).name}: reconstruction/energy error {max(errors):.3g} > {tolerance:g}")
    return ", ".join(f"{name} max rel error {err:.2g}" for name, err in worst.items())


# -- gradients -------------------------------------------------------------

def _f64(rng: Rng, shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(shape, std=scale, dtype=np.float64))


def _op_cases(rng: Rng) -> list[tuple[str, Callable[[], object], list[Tensor]]]:
    cases = []
    for i in range(SHAPES_PER_CHECK):
        r = rng.split(f"shape{i}")
        groups = int(r.integers(1, 3))
        cpg, opg = int(r.integers(1, 3)), int(r.integers(1, 3))
        k = (1, 3)[int(r.integers(0, 2))]
        stride, dilation = int(r.integers(1, 3)), int(r.integers(1, 3))
        pad = dilation * (k // 2)
        size = (int(r.integers(4, 7)), int(r.integers(4, 7)))
        x = _f64(r, (2, groups * cpg, *size))
        w = _f64(r, (groups * opg, cpg, k, k))
        b = _f64(r, (groups * opg,))
        cases.append(("conv2d", lambda x=x, w=w, b=b, s=stride, p=pad, d=dilation, g=groups:
                      ops.conv2d(x, w, b, s, p, d, g), [x, w, b]))

        xt = _f64(r, (2, groups * cpg, *(v - 1 for v in size)))
        wt = _f64(r, (groups * cpg, opg, 2, 2))
        cases.append(("conv_transpose2d", lambda x=xt, w=wt, s=stride, g=groups:
                      ops.conv_transpose2d(x, w, s, g), [xt, wt]))

        c = int(r.integers(2, 5))
        xn = _f64(r, (2, c, *size))
        gamma, beta = _f64(r, (c,)), _f64(r, (c,))
        train_stats = ops.RunningStats.fresh(c, dtype=np.float64)
        eval_stats = ops.RunningStats(np.abs(r.normal((c,), dtype=np.float64)), 1 + np.abs(r.normal((c,), dtype=np.float64)))
        cases.append(("batch_norm.train", lambda x=xn, g=gamma, b=beta, s=train_stats:
                      ops.batch_norm(x, g, b, s, "train"), [xn, gamma, beta]))
        cases.append(("batch_norm.eval", lambda x=xn, g=gamma, b=beta, s=eval_stats:
                      ops.batch_norm(x, g, b, s, "eval"), [xn, gamma, beta]))

        groups_gn = int(r.integers(1, 3))
        xg = _f64(r, (2, 2 * c, *size))
        gg, bg = _f64(r, (2 * c,)), _f64(r, (2 * c,))
        cases.append(("group_norm", lambda x=xg, g=gg, b=bg, n=groups_gn: ops.group_norm(x, n, g, b), [xg, gg, bg]))

        xa = _f64(r, (2, c, *size), scale=4.0)
        ya = _f64(r, (2, c, *size))
        cases.append(("relu6", lambda x=xa: ops.relu6(x), [xa]))
        cases.append(("sigmoid", lambda x=xa: ops.sigmoid(x), [xa]))
        cases.append(("silu", lambda x=xa: ops.silu(x), [xa]))
        cases.append(("elementwise_mul", lambda a=xa, b=ya: ops.elementwise_mul(a, b), [xa, ya]))
        cases.append(("elementwise_add", lambda a=xa, b=ya: ops.elementwise_add(a, b), [xa, ya]))
        cases.append(("concat_channels", lambda a=xa, b=xg: ops.concat_channels([a, b]), [xa, xg]))
        cases.append(("global_avg_pool", lambda x=xa: ops.global_avg_pool(x), [xa]))
        xw = _f64(r, (2, c, *size))
        cases.append(("haar_analysis", lambda x=xw: wavelet.haar_analysis(x).tensor, [xw]))
        xs = _f64(r, (2, 4 * c, *size))
        cases.append(("haar_synthesis", lambda x=xs: wavelet.haar_synthesis(x), [xs]))
    return cases


def _block_cases(rng: Rng) -> list[tuple[str, Module, Callable[[Module], object], list[Tensor]]]:
    cases = []
    for i in range(SHAPES_PER_CHECK):
        r = rng.split(f"shape{i}")
        size = (int(r.integers(4, 7)), int(r.integers(4, 7)))
        c_in = 2 * int(r.integers(1, 4))
        c_out = 2 * int(r.integers(1, 4))

        x = _f64(r, (2, c_in, *size))
        cgb = ContextGuided(c_in, c_out, dilation=2, reduction=4, rng=r.split("cgb"))
        cases.append(("ContextGuided", cgb, lambda m, x=x: m(x), [x]))

        star = Star(c_in, mlp_ratio=int(r.integers(1, 4)), rng=r.split("star"))
        cases.append(("Star", star, lambda m, x=x: m(x), [x]))

        aggregate = ("stack", "sum")[i % 2]
        pool = WaveletPool(c_in, c_out, aggregate, rng=r.split("pool"))
        cases.append((f"WaveletPool.{aggregate}", pool, lambda m, x=x: m(x), [x]))

        widths = (c_in, c_out, 4)
        levels = [_f64(r, (2, w, max(size[0] >> j, 2), max(size[1] >> j, 2))) for j, w in enumerate(widths)]
        head = LSHead(widths, hidden=8, num_classes=int(r.integers(1, 3)), shared=bool(i % 2 == 0), rng=r.split("head"))
        cases.append(("LSHead", head, lambda m, f=levels: m(f), levels))
    return cases


def _summarize(results: list[GradCheckResult]) -> str:
    failed = [r for r in results if not r.ok]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        raise CheckFailed(f"{len(failed)} gradient checks failed; worst {worst.name}: rel error {worst.max_rel_error:.3g}")
    worst = max(results, key=lambda r: r.max_rel_error)
    return f"{len(results)} cases, worst {worst.name} rel error {worst.max_rel_error:.2g}"


@check("grad.ops")
def check_op_gradients() -> str:
    rng = Rng(0, "checks.grad.ops")
    return _summarize([gradcheck(fn, inputs, name) for name, fn, inputs in _op_cases(rng)])


@check("grad.blocks")
def check_block_gradients() -> str:
    rng = Rng(0, "checks.grad.blocks")
    results = []
    for name, module, fn, inputs in _block_cases(rng):
        module.astype(np.float64)
        results.append(gradcheck(lambda m=module, f=fn: f(m), [*inputs, *module.parameters()], name))
    return _summarize(results)


@check("grad.model")
def check_model_gradients() -> str:
    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    rng = Rng(0, "checks.grad.model")
    images = rng.random((2, 1, 64, 64)).astype(np.float32)
    truth = [[GroundTruthBox(0, 0.4, 0.5, 0.2, 0.3)], [GroundTruthBox(0, 0.6, 0.3, 0.1, 0.15)]]
    with Tape() as tape:
        terms = detection_loss(model(images), truth, cfg.strides, cfg.input_size, cfg.assign_ranges)
    tape.backward(terms.total)
    bad = [name for name, p in model.named_parameters() if p.grad is None or not np.isfinite(p.grad).all()]
    _require(not bad, f"parameters without a finite gradient: {', '.join(bad[:5])}")
    return f"{len(model.parameters())} parameter tensors received finite gradients"


@check("conv.adjoint")
def check_adjoint() -> str:
    rng = Rng(0, "checks.adjoint")
    worst = 0.0
    for i in range(SHAPES_PER_CHECK):
        r = rng.split(f"case{i}")
        groups, stride, k = int(r.integers(1, 3)), int(r.integers(1, 3)), int(r.integers(1, 4))
        c_in, c_out = groups * int(r.integers(1, 3)), groups * int(r.integers(1, 3))
        ho, wo = int(r.integers(2, 6)), int(r.integers(2, 6))
        x = r.normal((2, c_in, (ho - 1) * stride + k, (wo - 1) * stride + k), dtype=np.float64)
        w = r.normal((c_out, c_in // groups, k, k), dtype=np.float64)
        y = r.normal((2, c_out, ho, wo), dtype=np.float64)
        forward = float((ops.conv2d(Tensor(x), Tensor(w), stride=stride, groups=groups).data * y).sum())
        adjoint = float((x * ops.conv_transpose2d(Tensor(y), Tensor(w), stride, groups).data).sum())
        worst = max(worst, abs(forward - adjoint) / max(abs(forward), 1e-12))
    _require(worst < 1e-10, f"<conv x, y> and <x, conv^T y> differ by {worst:.3g}")
    return f"max rel gap {worst:.2g}"


# -- parameter accounting --------------------------------------------------

@check("params.oracle")
def check_param_oracle() -> str:
    names = [*ABLATION_CONFIGS, "rsnet-desk"]
    for name in names:
        model = build_model(load_config(name))
        report = count_params(model)
        direct = enumerate_params(model)
        _require(direct == report.total_params,
                 f"{name}: enumerated {direct} params, analytic rows sum to {report.total_params}")
        unpool = [row for row in report.rows if row.kind == "wavelet_unpool" and row.params]
        _require(not unpool, f"{name}: wavelet unpool rows with parameters: {[r.name for r in unpool]}")
    return f"{len(names)} configs: enumeration equals per-layer sums"


@check("params.budget")
def check_budget() -> str:
    report = count_params(build_model(load_config("rsnet-ref")))
    params, flops = report.total_params, report.total_flops
    _require(abs(params - PARAM_TARGET) <= BUDGET_TOLERANCE * PARAM_TARGET,
             f"rsnet-ref has {params:,} params, outside ±25% of {PARAM_TARGET:,}")
    _require(abs(flops - FLOPS_TARGET) <= BUDGET_TOLERANCE * FLOPS_TARGET,
             f"rsnet-ref needs {flops / 1e9:.2f} GFLOPs, outside ±25% of {FLOPS_TARGET / 1e9:.1f}G")
    return f"{params:,} params, {flops / 1e9:.2f} GFLOPs at 640x640"


@check("params.ablation")
def check_ablation() -> str:
    totals = [count_params(build_model(load_config(name))).total_params for name in ABLATION_CONFIGS]
    _require(all(a > b for a, b in zip(totals, totals[1:])),
             f"ablation totals are not strictly decreasing: {dict(zip(ABLATION_CONFIGS, totals))}")
    ref = load_config("rsnet-ref")
    unshared = count_params(build_model(ref.replace(head_shared=False))).total_params
    no_star = count_params(build_model(ref.replace(neck_star=False))).total_params
    _require(totals[-1] < unshared, f"shared head ({totals[-1]}) is not smaller than unshared ({unshared})")
    _require(no_star < totals[-1], f"removing neck Star blocks did not reduce params ({no_star} vs {totals[-1]})")
    return " > ".join(f"{t / 1e6:.3f}M" for t in totals)


@check("model.determinism")
def check_determinism() -> str:
    cfg = tiny_config()
    first, second = build_model(cfg, seed=7), build_model(cfg, seed=7)
    differing = [n for (n, a), (_, b) in zip(first.named_parameters(), second.named_parameters())
                 if not np.array_equal(a.data, b.data)]
    _require(not differing, f"same seed built different parameters: {differing[:5]}")
    images = Rng(7, "checks.determinism").random((2, 1, 64, 64)).astype(np.float32)
    images[1] = images[0]
    first.eval()
    outputs = first(images)
    same = all(np.array_equal(box.data[0], box.data[1]) and np.array_equal(cls.data[0], cls.data[1])
               for box, cls in outputs)
    _require(same, "duplicated batch entries produced different outputs in eval mode")
    return "identical parameters and per-sample outputs"


@check("checkpoint.roundtrip")
def check_checkpoint() -> str:
    model = build_model(tiny_config(), seed=3).eval()
    images = Rng(3, "checks.checkpoint").random((1, 1, 64, 64)).astype(np.float32)
    before = model(images)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(model, Path(tmp) / "a.ckpt")
        restored = load_checkpoint(path).model.eval()
        after = restored(images)
        _require(all(np.array_equal(a.data, b.data) for pair_a, pair_b in zip(before, after)
                     for a, b in zip(pair_a, pair_b)), "forward outputs changed after a checkpoint round trip")
        again = save_checkpoint(restored, Path(tmp) / "b.ckpt")
        _require(path.read_bytes() == again.read_bytes(), "save -> load -> save is not byte-identical")
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        corrupt = Path(tmp) / "corrupt.ckpt"
        corrupt.write_bytes(bytes(blob))
        try:
            load_checkpoint(corrupt)
        except CheckpointError:
            pass
        else:
            raise CheckFailed("a checkpoint with a flipped byte was accepted")
    return "bit-identical outputs; corrupted file rejected"


# -- evaluator -------------------------------------------------------------

def hand_built_case() -> tuple[dict, dict, float]:
    """Three images with one ship each: hit at 0.9, miss at 0.8, hit at 0.7. AP = 1/3 + (1/3)(2/3)."""
    ship = GroundTruthBox(0, 0.5, 0.5, 0.2, 0.2)
    truth = {"a": [ship], "b": [ship], "c": [ship]}
    dets = {
        "a": [Detection(0, 0.9, 0.5, 0.5, 0.2, 0.2)],
        "b": [Detection(0, 0.8, 0.1, 0.1, 0.1, 0.1)],
        "c": [Detection(0, 0.7, 0.5, 0.5, 0.2, 0.2)],
    }
    return dets, truth, 5.0 / 9.0


def random_case(rng: Rng, classes: int = 2) -> tuple[dict, dict]:
    truth, dets = {}, {}
    for image in range(int(rng.integers(1, 4))):
        boxes, found = [], []
        for _ in range(int(rng.integers(0, 4))):
            w, h = rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)
            box = GroundTruthBox(int(rng.integers(0, classes)), rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h)
            boxes.append(box)
            if rng.random() < 0.7:
                jitter = rng.uniform(-0.3, 0.3)
                found.append(Detection(box.class_id, rng.random(), box.cx + jitter * box.w, box.cy, box.w, box.h * (1 + jitter)))
        for _ in range(int(rng.integers(0, 3))):
            found.append(Detection(int(rng.integers(0, classes)), rng.random(), rng.random(), rng.random(),
                                   rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)))
        truth[f"img{image}"] = boxes
        dets[f"img{image}"] = found
    return dets, truth


@check("eval.oracle")
def check_evaluator() -> str:
    dets, truth, expected = hand_built_case()
    result = evaluate(dets, truth)
    _require(abs(result.map50 - expected) < 1e-9, f"hand-built case: mAP50 {result.map50} != {expected}")
    _require(abs(brute_force_ap(dets, truth, 0, 0.5) - expected) < 1e-9, "brute-force oracle disagrees on the hand-built case")
    rng = Rng(0, "checks.eval")
    worst = 0.0
    for i in range(50):
        dets, truth = random_case(rng.split(f"case{i}"))
        result = evaluate(dets, truth)
        _require(result.map50_95 <= result.map50 + 1e-12, f"case {i}: mAP50-95 {result.map50_95} > mAP50 {result.map50}")
        for cls, aps in result.per_class.items():
            for t_index, threshold in enumerate(IOU_THRESHOLDS):
                gap = abs(aps[t_index] - brute_force_ap(dets, truth, cls, threshold))
                worst = max(worst, gap)
    _require(worst <= 1e-9, f"evaluator and brute-force oracle differ by {worst:.3g}")
    return f"hand-built AP {expected:.4f}; 50 random cases within {worst:.1g}"


@check("nms.oracle")
def check_nms() -> str:
    rng = Rng(0, "checks.nms")
    for i in range(50):
        r = rng.split(f"case{i}")
        dets = [Detection(int(r.integers(0, 2)), r.random(), r.uniform(0.2, 0.8), r.uniform(0.2, 0.8),
                          r.uniform(0.1, 0.4), r.uniform(0.1, 0.4)) for _ in range(int(r.integers(0, 11)))]
        threshold = r.uniform(0.2, 0.8)
        _require(nms(dets, threshold) == exhaustive_nms(dets, threshold), f"case {i}: greedy NMS differs from the oracle")
    return "50 random sets match subset enumeration"


def run_checks(names: list[str] | None = None) -> list[CheckResult]:
    selected = list(_REGISTRY) if not names else names
    unknown = [n for n in selected if n not in _REGISTRY]
    if unknown:
        raise RsnetError(f"unknown checks: {', '.join(unknown)} (available: {', '.join(_REGISTRY)})")
    results = []
    for name in selected:
        started = time.perf_counter()
        try:
            detail, ok = _REGISTRY[name](), True
        except (CheckFailed, RsnetError) as err:
            detail, ok = str(err), False
        elapsed = time.perf_counter() - started
        logger.info("check %s: %s (%.1fs)", name, "ok" if ok else "FAILED", elapsed)
        results.append(CheckResult(name, ok, detail, elapsed))
    return results
