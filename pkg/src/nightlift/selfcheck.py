"""Fast invariant checks behind ``nightlift selfcheck``.

``run_checks(impl=...)`` accepts any object with ``filter_forward`` /
``filter_backward`` so a corrupted backend can be checked too.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import backend


class CheckResult(NamedTuple):
    name: str
    ok: bool
    detail: str


def _filter(impl, image, kernels, k, per_channel=False, padding=0):
    return impl.filter_forward(np.ascontiguousarray(image), np.ascontiguousarray(kernels),
                               k, per_channel, padding)


def check_filter_identity(impl):
    rng = np.random.default_rng(0)
    img = rng.random((7, 6, 3))
    worst = 0.0
    for k in (1, 3, 5):
        kern = np.zeros((k * k, 7, 6))
        kern[(k * k) // 2] = 1.0
        worst = max(worst, float(np.abs(_filter(impl, img, kern, k) - img).max()))
    return worst < 1e-12, f"max |delta filter - input| = {worst:.2e}"


def check_filter_window(impl):
    # a one-hot kernel at offset (u, v) must read pixel (i + u - r, j + v - r)
    rng = np.random.default_rng(1)
    img = rng.random((6, 6, 1))
    k, r = 3, 1
    kern = np.zeros((9, 6, 6))
    kern[0] = 1.0  # offset (-1, -1)
    out = _filter(impl, img, kern, k, padding=1)  # zero padding
    expected = np.zeros_like(img)
    expected[r:, r:] = img[:-r, :-r]
    err = float(np.abs(out - expected).max())
    return err < 1e-12, f"corner-tap error = {err:.2e}"


def check_gradient(impl):
    rng = np.random.default_rng(2)
    img = rng.random((5, 4, 3))
    kern = rng.normal(size=(9, 5, 4))
    up = rng.normal(size=img.shape)
    _, gk = impl.filter_backward(img, kern, up, 3, False, 0)
    eps, worst = 1e-6, 0.0
    for idx in [(0, 0, 0), (4, 2, 1), (8, 4, 3), (3, 1, 2)]:
        kp, km = kern.copy(), kern.copy()
        kp[idx] += eps
        km[idx] -= eps
        fd = (np.sum(_filter(impl, img, kp, 3) * up) - np.sum(_filter(impl, img, km, 3) * up)) / (2 * eps)
        worst = max(worst, abs(fd - gk[idx]) / max(abs(fd), 1e-8))
    return worst < 1e-4, f"max rel. error = {worst:.1e}"


def check_dirichlet():
    from .stylemix import StyleMixConfig, sample_mix_plan

    cfg = StyleMixConfig(pool_size=5)
    worst, lengths_ok = 0.0, True
    for s in range(50):
        plan = sample_mix_plan(cfg, 5, np.random.default_rng(s), (4, 4))
        c = plan.coeffs
        worst = max(worst, float(np.abs(c.sum(axis=0) - 1).max()))
        lengths_ok &= bool(c.min() >= 0) and len(plan.chains) == 3
        lengths_ok &= all(1 <= len(ch) <= 2 for ch in plan.chains)
    return worst < 1e-6 and lengths_ok, f"max |sum - 1| = {worst:.1e}"


def check_smooth_l1():
    from .losses import smooth_l1

    vals = [float(smooth_l1(np.array([x]))) for x in (0.0, 1.0, -1.0, 1 - 1e-12, 1 + 1e-12)]
    ok = vals[0] == 0 and abs(vals[1] - 0.5) < 1e-12 and abs(vals[2] - 0.5) < 1e-12
    ok &= abs(vals[3] - vals[4]) < 1e-9
    return ok, f"f(0)={vals[0]:g} f(1)={vals[1]:g} knee gap={abs(vals[3] - vals[4]):.1e}"


def check_iou():
    from .boxes import iou

    a = [0, 0, 2, 2]
    ok = iou(a, a) == 1.0 and iou(a, [3, 3, 4, 4]) == 0.0
    third = iou([0, 0, 1, 1], [0.5, 0, 1.5, 1])
    ok &= abs(third - 1 / 3) < 1e-12
    return ok, f"identical=1 disjoint=0 half-shift={third:.4f}"


def run_checks(impl=None) -> list[CheckResult]:
    impl = backend.get(impl) if impl is None or isinstance(impl, str) else impl
    checks = [
        ("filter identity", lambda: check_filter_identity(impl)),
        ("filter window offsets", lambda: check_filter_window(impl)),
        ("filter gradient spot-check", lambda: check_gradient(impl)),
        ("Dirichlet simplex", check_dirichlet),
        ("smooth-L1 knee", check_smooth_l1),
        ("IoU cases", check_iou),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed report
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail))
    return results


def print_table(results, file=None) -> None:
    width = max(len(r.name) for r in results)
    print(f"backend: {backend.NAME}", file=file)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.ok else 'FAIL'}  {r.detail}", file=file)
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed", file=file)
