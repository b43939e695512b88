"""Oracle suite: gradient checks, scan/step equivalence, FFT and assignment
oracles, backend agreement and query-count bounds.

Each check is a named function returning ``(passed, detail)``; :func:`run`
executes a selection and returns timed results for printing as a table.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import decoder as Dm
from . import queries as Qm
from . import sampling as Sm
from . import simworld as W
from . import ssm as Sf
from . import supervision as Sv
from .kernels import backend, fused, ops
from .kernels.fft import dft_direct, fft, ifft, inverse_spectrum, spectrum
from .kernels.gradcheck import grad_check
from .kernels.nn import Linear
from .kernels.tensor import Tensor, no_grad

OP_TOL = 1e-4
E2E_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _gc(fn, inputs, tol=OP_TOL, **kw) -> tuple[bool, str]:
    rep = grad_check(fn, inputs, **kw)
    return rep.passed(tol), rep.describe()


def _worst(results) -> tuple[bool, str]:
    ok = all(r[0] for r in results)
    bad = [r[1] for r in results if not r[0]]
    return ok, (bad[0] if bad else results[-1][1]) + f" [{len(results)} cases]"


# ---------------------------------------------------------------- kernels

def check_fft_roundtrip():
    rng = np.random.default_rng(0)
    worst = 0.0
    for be in backend.BACKENDS if backend.numba_available() else ("numpy",):
        with backend.use_backend(be):
            for n in range(1, 65):
                x = rng.standard_normal((2, n))
                re, im = fft(x)
                rr, ii = ifft(re, im)
                worst = max(worst, np.abs(rr - x).max(), np.abs(ii).max(),
                            np.abs(re + 1j * im - dft_direct(x)).max())
    return worst < 1e-9, f"max err {worst:.2e} over lengths 1..64"


def check_scan_equals_loop():
    rng = np.random.default_rng(1)
    N, d, T, M = 6, 3, 5, 7
    a = np.tanh(rng.standard_normal(N)) * 0.999
    B = rng.standard_normal((N, 2 * d))
    C = rng.standard_normal((d, N))
    P = rng.standard_normal((d, N))
    X = rng.standard_normal((T, M, d))
    ok = True
    for be in backend.BACKENDS if backend.numba_available() else ("numpy",):
        with backend.use_backend(be):
            _, Y, YP = fused.ssm_scan(a, B, C, P, X)
            h, xp, ys, yps = np.zeros((M, N)), np.zeros((M, d)), [], []
            for t in range(T):
                h, y, xp = (o.data for o in fused.ssm_step(a, B, C, P, h, X[t], xp))
                ys.append(y)
                yps.append(xp)
            ok &= np.array_equal(np.stack(ys), Y.data) and np.array_equal(np.stack(yps), YP.data)
    return bool(ok), "bitwise equal" if ok else "scan differs from per-step loop"


def check_hungarian_bruteforce():
    rng = np.random.default_rng(2)
    bad = 0
    cases = 0
    for seed in range(100):
        for n in range(1, 8):
            cost = rng.standard_normal((n, int(rng.integers(1, 8))))
            m = Sv.hungarian(cost)
            n_pred, n_gt = cost.shape
            k = min(n_pred, n_gt)
            if n_pred <= n_gt:
                best = min(sum(cost[i, p[i]] for i in range(n_pred))
                           for p in itertools.permutations(range(n_gt), n_pred))
            else:
                best = min(sum(cost[p[j], j] for j in range(n_gt))
                           for p in itertools.permutations(range(n_pred), n_gt))
            got = sum(cost[i, j] for i, j in m.pairs)
            cases += 1
            if len(m.pairs) != k or abs(got - best) > 1e-12:
                bad += 1
    return bad == 0, f"{cases - bad}/{cases} random matrices match brute force"


def check_backend_agreement():
    if not backend.numba_available():
        return True, "numba unavailable, skipped"
    rng = np.random.default_rng(3)
    maps = rng.standard_normal((3, 4, 6, 5))
    pix = rng.uniform(-1, 6, (3, 9, 2))
    valid = rng.random((3, 9)) > 0.2
    cost = rng.standard_normal((5, 7))
    outs = {}
    for be in backend.BACKENDS:
        with backend.use_backend(be):
            outs[be] = (fused.bilinear(maps, pix, valid).data, Sv.hungarian(cost).pairs,
                        fft(rng.standard_normal((1, 12)) * 0 + np.arange(12))[0])
    a, b = outs["numba"], outs["numpy"]
    err = max(np.abs(a[0] - b[0]).max(), np.abs(a[2] - b[2]).max())
    ok = err < 1e-12 and a[1] == b[1]
    return bool(ok), f"max kernel diff {err:.1e}"


# ---------------------------------------------------------------- op-level gradients

def check_grad_basic_ops():
    rng = np.random.default_rng(4)
    res = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        A, B = r.standard_normal((3, 4)), r.standard_normal((4, 2))
        res.append(_gc(lambda a, b: ops.matmul(a, b), [A, B]))
        x = r.standard_normal((3, 5))
        res.append(_gc(lambda x, g, b: ops.layer_norm(x, g, b), [x, r.standard_normal(5), r.standard_normal(5)]))
        res.append(_gc(lambda x: ops.softmax(x), [x]))
        res.append(_gc(lambda x: ops.sigmoid(x), [x]))
        res.append(_gc(lambda x: ops.relu(x), [x + np.sign(x) * 0.01]))
        res.append(_gc(lambda x: ops.tanh(x) * ops.exp(x * 0.3) + ops.softplus(x), [x]))
        res.append(_gc(lambda y, x: ops.atan2(y, x), [x, r.standard_normal((3, 5)) + 3.0]))
        res.append(_gc(lambda x: ops.amax(x, axis=1) + ops.take_rows(x, [2, 0, 2]).sum(), [x]))
    del rng
    return _worst(res)


def check_grad_linear():
    rng = np.random.default_rng(5)
    lin = Linear(rng, 4, 3)
    ok, detail = _gc(lambda x, w, b: ops.matmul(x, w) + b, [rng.standard_normal((5, 4)), lin.weight, lin.bias],
                     tol=1e-6)
    return ok, detail


def check_grad_fft_pair():
    res = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 10))
        x = r.standard_normal((3, n))
        res.append(_gc(lambda x: inverse_spectrum(spectrum(x) * spectrum(x)), [x]))
    return _worst(res)


def check_grad_bilinear_projection():
    res = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        maps = r.standard_normal((2, 3, 5, 6))
        pix = r.uniform(0.1, 4.4, (2, 7, 2))
        valid = r.random((2, 7)) > 0.2
        res.append(_gc(lambda m, p: fused.bilinear(m, p, valid), [maps, pix]))
        rig = W.ring_rig(2, 90.0, 64, 48)
        cam = np.stack([np.stack([c.extrinsic for c in rig])])
        K = np.stack([c.K for c in rig])
        pts = r.uniform(-6, 6, (1, 5, 3)) + np.array([8.0, 0.0, 1.0])
        res.append(_gc(lambda p: Sm.project(p, cam, K, (64, 48))[0], [pts]))
    return _worst(res)


def check_grad_ssm():
    res = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        kind = Sf.TRANSFORMS[seed % 2]
        block = Sf.SSMBlock(r, 3, 4, 4, kind)
        X = r.standard_normal((3, 5, 3))

        def loss(a_raw, B, C, P, emb):
            lr, lf, _ = Sf.aux_losses(Sf.ssm_scan(block, X, training=True, mask_cfg=Sf.MaskConfig(0.5), seed=seed)[0])
            return lr + lf

        res.append(_gc(loss, [block.a_raw, block.B, block.C, block.P_head, block.mask_embed]))

        def readout(a_raw, B, W_):
            bundle, state = Sf.ssm_scan(block, X)
            return Sf.mixing_features(block, bundle, state)

        res.append(_gc(readout, [block.a_raw, block.B, block.readout.weight]))
    return _worst(res)


def _toy_queries(r, n, d, floor=1):
    q = Qm.init_queries(n, int(r.integers(1 << 30)), d, floor)
    return Qm.QuerySet(q.boxes, Tensor(r.standard_normal((n, d))), floor)


def check_grad_queries():
    res = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        D = 8
        heads = Qm.QueryUpdateHeads(r, D, hidden=6)
        heads.merge_head.bias.data[:] = 0.0    # make merges likely
        q = _toy_queries(r, 12, D, floor=4)
        S = r.standard_normal((20, D))
        feats = q.features
        res.append(_gc(lambda f: Qm.covariance(f), [feats]))
        res.append(_gc(lambda f, s: Qm.cross_attend(Qm.QuerySet(q.boxes, f, q.floor), s, heads).features, [feats, S]))
        _, plan = Qm.update(q, S, heads)

        def full(f, s, *params):
            out, _ = Qm.update(Qm.QuerySet(q.boxes, f, q.floor), s, heads, plan=plan)
            return out.features

        params = [heads.merge_head.weight, heads.remove_head.fc1.weight, heads.remove_head.fc2.weight,
                  heads.split_head.fc1.weight, heads.attn_q.weight, heads.attn_v.weight]
        res.append(_gc(full, [feats, S, *params], max_entries=12, seed=seed))
    return _worst(res)


def check_grad_mixing():
    res = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        N, P, D = 3, 2, 4
        wc, wp = Linear(r, D, D * D), Linear(r, D, P * P)
        from .kernels.nn import LayerNorm
        lnc, lnp = LayerNorm(D), LayerNorm(D * P)
        out = Linear(r, D * P, D)
        Q, S = r.standard_normal((N, D)), r.standard_normal((N, P, D))

        def full(Q, S, a, b, c):
            Mc = Dm.channel_mix(Q, S, wc, lnc)
            Mp = Dm.point_mix(Mc, Q, wp, lnp)
            return Dm.mix_residual(Mp, Q, out)

        res.append(_gc(full, [Q, S, wc.weight, wp.weight, out.weight], max_entries=20, seed=seed))
    return _worst(res)


def check_grad_losses():
    res = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        logits = r.standard_normal((5, 4))
        targets = r.integers(-1, 4, 5)
        res.append(_gc(lambda l: Sv.focal_loss(l, targets), [logits]))
        boxes = Qm.encode_boxes(np.abs(r.standard_normal((5, 9))) + 0.5)
        gt = np.abs(r.standard_normal((3, 9))) + 0.5
        gt[:, 6] = r.uniform(-3, 3, 3)
        m = Sv.hungarian(Sv.match_cost(logits, boxes, [0, 1, 2], gt))
        res.append(_gc(lambda b: Sv.l1_box_loss(b, gt, m)[0], [boxes]))
    return _worst(res)


# ---------------------------------------------------------------- end to end

def toy_problem(seed: int = 0):
    """3 queries, 2 frames, 1 camera: small enough for exhaustive finite differences."""
    wc = W.WorldConfig(n_objects=2, frames=2, n_cameras=1, hfov_deg=90.0, image_width=64, image_height=32,
                       stride=8, channels=4, depth_channels=2, bounds=8.0, min_range=3.0, min_separation=2.0)
    scene = W.gen_scene(seed, wc)
    # keep ground truth in front of the single camera (looking along +x)
    scene.boxes[..., 0] = np.abs(scene.boxes[..., 0]) + 4.0
    scene.maps = W.render_all(scene, wc)
    cfg = Dm.DecoderConfig(layers=2, d_model=4, points=2, frames=2, n_state=3, channels=4, n_queries=3,
                           floor=1, head_hidden=5)
    model = Dm.DySSDecoder(cfg, seed=seed)
    model.query_boxes.data[:, 0] = [6.0, 8.0, 10.0]
    model.query_boxes.data[:, 1] = [-1.0, 0.5, 1.5]
    inputs = Sm.scene_inputs(scene.rig, scene.ego_poses, scene.maps, wc.stride)
    return model, inputs, scene


def check_grad_end_to_end():
    res = []
    for seed in range(3):
        model, inputs, scene = toy_problem(seed)
        ref = Dm.forward(model, inputs, training=True, seed=seed)
        replay = ref.replay()
        matches = Sv.total_loss(ref, scene.classes, scene.gt_boxes()).matches

        def loss(*params):
            r = Dm.forward(model, inputs, training=True, seed=seed, **replay)
            return Sv.total_loss(r, scene.classes, scene.gt_boxes(), matches=matches).total

        res.append(_gc(loss, model.parameters(), tol=E2E_TOL, max_entries=6, seed=seed))
    return _worst(res)


# ---------------------------------------------------------------- bounds

def check_query_bounds(n_forwards: int = 20):
    wc = W.WorldConfig(n_objects=3)
    violations = 0
    layers_seen = 0
    for i in range(n_forwards):
        scene = W.gen_scene(i, wc)
        inputs = Sm.scene_inputs(scene.rig, scene.ego_poses, scene.maps, wc.stride)
        cfg = Dm.DecoderConfig(layers=3, d_model=16, n_state=8, n_queries=200, floor=20, query_seed=i)
        model = Dm.DySSDecoder(cfg, seed=i)
        with no_grad():
            res = Dm.forward(model, inputs)
        for row in res.trajectory:
            layers_seen += 1
            post_merge = row["n_before"] - row["merged"]
            frac = row["removed"] / post_merge
            if not row["floor_clamped"] and not (0.2 <= frac <= 0.3):
                violations += 1
            if row["split"] > 0.05 * (post_merge - row["removed"]):
                violations += 1
            if row["n_after"] < cfg.floor:
                violations += 1
    return violations == 0, f"{violations} violations over {layers_seen} layer updates"


CHECKS = {
    "fft_roundtrip": check_fft_roundtrip,
    "ssm_scan_equals_loop": check_scan_equals_loop,
    "hungarian_bruteforce": check_hungarian_bruteforce,
    "backend_agreement": check_backend_agreement,
    "grad_basic_ops": check_grad_basic_ops,
    "grad_linear": check_grad_linear,
    "grad_fft_pair": check_grad_fft_pair,
    "grad_bilinear_projection": check_grad_bilinear_projection,
    "grad_ssm": check_grad_ssm,
    "grad_queries": check_grad_queries,
    "grad_mixing": check_grad_mixing,
    "grad_losses": check_grad_losses,
    "grad_end_to_end": check_grad_end_to_end,
    "query_bounds": check_query_bounds,
}


def run(names=None, extra: dict | None = None) -> list[CheckResult]:
    checks = dict(CHECKS)
    if extra:
        checks.update(extra)
    selected = list(checks) if names is None else list(names)
    out = []
    for name in selected:
        t0 = time.perf_counter()
        try:
            ok, detail = checks[name]()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results) if results else 4
    lines = [f"{'check':<{width}}  result  time(s)  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
