"""Named gradient-check scopes covering every differentiable path.

Each scope builds (params, program) for :func:`hpgn.gradcheck.gradcheck`:
``params`` is an ordered name -> float64 array dict, ``program`` rebuilds the
scalar loss from tape-owned parameter tensors (model arrays are shadowed via
``ForwardContext.bind`` so the pass is pure in the checked values).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .gradcheck import GradCheckReport, gradcheck
from .gridgraph import build_grid_graph
from .layers import CBR, ForwardContext, SpatialGraph
from .losses import LossConfig, total_loss
from .model import ModelConfig, build_model

SCOPES = ("graph", "sg", "bn", "cbr", "losses", "model")


def _scope_graph():
    rng = np.random.default_rng(7)
    graph = build_grid_graph(3, 4)
    v0 = rng.normal(0, 1, (graph.d, 3))

    def program(tape, tensors):
        a = ad.graph_aggregate(tensors[0], graph)
        return ad.sum_all(ad.mul(a, a))

    return {"v": v0}, program


def _scope_sg():
    rng = np.random.default_rng(11)
    graph = build_grid_graph(3, 3)
    layer = SpatialGraph(graph, 2)
    layer.theta[...] = rng.normal(1.0, 0.3, layer.theta.shape)
    v = rng.normal(0, 1, (4, graph.d, 2))
    params = {
        "theta": layer.theta.astype(np.float64),
        "gamma": layer.bn.gamma.astype(np.float64),
        "beta": layer.bn.beta.astype(np.float64),
        "v": v,
    }

    def program(tape, tensors):
        ctx = ForwardContext(tape, "train", update_stats=False)
        ctx.bind(layer.theta, tensors[0])
        ctx.bind(layer.bn.gamma, tensors[1])
        ctx.bind(layer.bn.beta, tensors[2])
        out = layer.forward(ctx, tensors[3])
        return ad.mean_all(ad.mul(out, out))

    return params, program


def _scope_bn():
    rng = np.random.default_rng(13)
    x = rng.normal(0.5, 1.5, (4, 3))
    target = rng.normal(0, 1, (4, 3))
    params = {"gamma": np.array([1.1, 0.9, 1.3]), "beta": np.array([0.1, -0.2, 0.3]), "x": x}

    def program(tape, tensors):
        out, _, _ = ad.batch_norm_train(tensors[2], tensors[0], tensors[1])
        diff = ad.sub(out, ad.Tensor(target))
        return ad.sum_all(ad.mul(diff, diff))

    return params, program


def _scope_cbr():
    rng = np.random.default_rng(17)
    cbr = CBR(5, 4, rng)
    x = rng.normal(0.3, 1.0, (6, 5))
    params = {
        "weight": cbr.weight.astype(np.float64),
        "gamma": cbr.bn.gamma.astype(np.float64),
        "beta": cbr.bn.beta.astype(np.float64),
        "x": x,
    }

    def program(tape, tensors):
        ctx = ForwardContext(tape, "train", update_stats=False)
        ctx.bind(cbr.weight, tensors[0])
        ctx.bind(cbr.bn.gamma, tensors[1])
        ctx.bind(cbr.bn.beta, tensors[2])
        out = cbr.forward(ctx, tensors[3])
        return ad.mean_all(ad.mul(out, out))

    return params, program


def _scope_losses():
    rng = np.random.default_rng(19)
    labels = np.array([0, 0, 1, 1, 2, 2])
    # resample until no anchor sits near the hinge kink or a distance tie
    margin = 0.7
    for _ in range(100):
        feats = rng.normal(0, 1, (6, 4))
        d = np.sqrt(((feats[:, None] - feats[None, :]) ** 2).sum(-1))
        same = labels[:, None] == labels[None, :]
        np.fill_diagonal(same, False)
        gaps = []
        for a in range(6):
            dp = d[a][same[a]].max()
            dn = d[a][~same[a] & (np.arange(6) != a)].min()
            gaps.append(abs(dp - dn + margin))
        offdiag = d[np.triu_indices(6, 1)]
        tie_gap = np.abs(offdiag[:, None] - offdiag[None, :])[np.triu_indices(len(offdiag), 1)]
        if min(gaps) > 1e-3 and (tie_gap.min() > 1e-3 if tie_gap.size else True):
            break
    w = rng.normal(0, 0.5, (4, 3))
    params = {"features": feats, "w": w}
    cfg = LossConfig(margin=margin)

    def program(tape, tensors):
        feats_t, w_t = tensors
        logits = ad.matmul(feats_t, w_t)
        ce = ad.softmax_cross_entropy(logits, labels, cfg.epsilon)
        from .losses import batch_hard_triplet
        trip = batch_hard_triplet(feats_t, labels, cfg.margin)
        return ad.add(ce, trip)

    return params, program


def tiny_model_config(variant: str = "hpgn") -> ModelConfig:
    # 16px input, two stages (stride 2 then 1) -> 8x8x8 base map
    return ModelConfig(num_classes=4, input_size=16, backbone_channels=(6, 8),
                       last_stride_one=True, sgn_depth=3, embed_dim=8, variant=variant)


def _fd_coord(program, values, vi: int, ci: int, eps: float) -> float:
    from .gradcheck import _run
    flat = values[vi].reshape(-1)
    orig = flat[ci]
    flat[ci] = orig + eps
    _, _, lp = _run(program, values)
    flat[ci] = orig - eps
    _, _, lm = _run(program, values)
    flat[ci] = orig
    return (float(lp.data) - float(lm.data)) / (2.0 * eps)


def _fd_safe_batch(make_program, values, rng, eps, tol, kink_floor=2e-4,
                   grad_floor=5e-6, max_small=24, attempts=1000):
    """Sample an input batch on which central differences are trustworthy.

    Two failure modes are screened out.  A probe step that crosses a relu
    kink, a spatial-max switch, or a mining tie corrupts the difference
    quotient, so every traced margin must clear ``kink_floor``.  Coordinates
    whose true gradient is tiny drown in float64 round-off of the loss, so
    every coordinate below ``grad_floor`` is verified by running the exact
    difference the checker will later compute.
    """
    from .gradcheck import _run
    for _ in range(attempts):
        images = rng.uniform(0, 1, (8, 16, 16, 3))
        program = make_program(images)
        with ad.kink_trace() as margins:
            tape, tensors, loss = _run(program, values)
        if min(margins) <= kink_floor:
            continue
        grads = ad.backward(tape, loss)
        small = []
        for vi, t in enumerate(tensors):
            g = grads[t.node_id].ravel()
            small.extend((vi, int(ci), float(g[ci]))
                         for ci in np.flatnonzero(np.abs(g) < grad_floor))
        if len(small) > max_small:
            continue
        ok = True
        for vi, ci, a in small:
            n = _fd_coord(program, values, vi, ci, eps)
            if abs(a - n) / max(abs(a), abs(n), 1e-8) >= 0.5 * tol:
                ok = False
                break
        if ok:
            return images
    raise RuntimeError("no finite-difference-safe input batch found")


def _scope_model(variant: str = "hpgn", eps: float = 1e-5, tol: float = 1e-4):
    """Full tiny network through both heads and the total loss.

    Batch-norm scales and shifts are nudged off their init: with beta at
    zero the leaky relu is positively homogeneous, the next layer's
    normalization cancels any per-channel scale, and the gamma gradients of
    all but the last graph layer are structurally zero.  Input batches are
    then screened by :func:`_fd_safe_batch`.
    """
    rng = np.random.default_rng(23)
    model = build_model(tiny_model_config(variant), seed=3)
    for name, arr in model.named_params():
        if name.endswith(("theta", "gamma", "beta")):
            arr += rng.normal(0, 0.1, arr.shape).astype(np.float32)
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    cfg = LossConfig(margin=0.5)
    named = list(model.named_params())
    params = {name: arr.astype(np.float64) for name, arr in named}

    def make_program(images):
        def program(tape, tensors):
            ctx = ForwardContext(tape, "train", update_stats=False)
            for (name, arr), t in zip(named, tensors):
                ctx.bind(arr, t)
            out = model.forward(ctx, images)
            loss, _ = total_loss(out, labels, cfg)
            return loss
        return program

    values = [params[name] for name in params]
    images = _fd_safe_batch(make_program, values, rng, eps, tol)
    return params, make_program(images)


_BUILDERS = {
    "graph": _scope_graph,
    "sg": _scope_sg,
    "bn": _scope_bn,
    "cbr": _scope_cbr,
    "losses": _scope_losses,
    "model": _scope_model,
}


def run_scope(scope: str, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    if scope not in _BUILDERS:
        raise ValueError(f"unknown scope {scope!r}; valid: all, {', '.join(SCOPES)}")
    params, program = _BUILDERS[scope]()
    return gradcheck(program, params, eps=eps, tol=tol)


def run_all(eps: float = 1e-5, tol: float = 1e-4) -> dict[str, GradCheckReport]:
    return {scope: run_scope(scope, eps, tol) for scope in SCOPES}
