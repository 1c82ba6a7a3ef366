"""Central finite-difference checks of every differentiable block, in 64-bit."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import MultiHeadWeights, PSAWeights, multihead_forward, psa_forward
from .model import ModelConfig, classify, embed, forward_full, init_params, segment
from .pointcloud import PointCloud, interpolate_up
from .tensor import Tensor

BLOCK_TOL = 1e-4
E2E_TOL = 1e-3


@dataclass
class BlockResult:
    name: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.worst <= self.tol)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if den == 0 else float(num / den)


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5, entries=None) -> np.ndarray:
    """d f / d t by central differences; only at ``entries`` (flat indices) if given."""
    flat = t.data.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = np.zeros(flat.size if entries is None else len(entries))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[i if entries is None else j] = (fp - fm) / (2 * h)
    return out.reshape(t.shape) if entries is None else out


def analytic_grads(f: Callable[[], Tensor], tensors) -> list:
    for t in tensors:
        t.grad = None
    T.backward(f())
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def check(f: Callable[[], Tensor], tensors, h: float = 1e-5) -> float:
    """Worst relative error over ``tensors`` between backprop and finite differences."""
    grads = analytic_grads(f, tensors)
    return max(rel_error(g, numeric_grad(f, t, h)) for g, t in zip(grads, tensors))


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Scalar loss sum(out * R) with a fixed random R."""
    r = Tensor(rng.normal(size=out.shape))
    return lambda o: T.sum_all(T.mul(o, r))


def _block(rng, build):
    """``build()`` returns (forward closure, tensors); wrap it in a random projection."""
    fwd, tensors = build()
    proj = _project(fwd(), rng)
    return lambda: proj(fwd()), tensors


def _engine_blocks(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 5)
    yield "matmul", _block(rng, lambda: (lambda: T.matmul(a, b), [a, b]))
    x, bias = _param(rng, 5, 4), _param(rng, 1, 4)
    yield "add", _block(rng, lambda: (lambda: T.add(x, bias), [x, bias]))
    u, v = _param(rng, 3, 3), _param(rng, 3, 3)
    yield "mul", _block(rng, lambda: (lambda: T.mul(u, v), [u, v]))
    s = _param(rng, 4, 2)
    yield "scale+transpose", _block(rng, lambda: (lambda: T.transpose(T.scale(s, -1.7)), [s]))
    r = _param(rng, 6, 5)
    yield "relu", _block(rng, lambda: (lambda: T.relu(r), [r]))
    sm = _param(rng, 4, 6)
    yield "softmax_rows", _block(rng, lambda: (lambda: T.softmax_rows(sm), [sm]))
    c1, c2 = _param(rng, 4, 2), _param(rng, 4, 3)
    yield "concat+slice", _block(rng, lambda: (lambda: T.slice_cols(T.concat([c1, c2]), 1, 4), [c1, c2]))
    row = _param(rng, 1, 5)
    yield "repeat_rows", _block(rng, lambda: (lambda: T.repeat_rows(row, 4), [row]))
    mx = _param(rng, 6, 4)
    yield "max_rows", _block(rng, lambda: (lambda: T.max_rows(mx), [mx]))
    mr = _param(rng, 5, 3)
    yield "mean_rows+mean", _block(rng, lambda: (lambda: T.mean_rows(mr), [mr]))
    lg = _param(rng, 7, 4)
    tgt = rng.integers(0, 4, size=7)
    yield "cross_entropy", (lambda: T.cross_entropy(lg, tgt), [lg])


def _margin(x: np.ndarray, pre: np.ndarray) -> float:
    """Distance to the nearest kink: top-two gap of a column max, or a relu input near 0."""
    top = np.sort(x, axis=0)[-2:] if x.shape[0] > 1 else np.array([[-np.inf], [np.inf]])
    return float(min((top[1] - top[0]).min(), np.abs(pre).min()))


def _head_margin(feats: np.ndarray, p, task: str) -> float:
    d = lambda k: p[k].data
    if task == "cls":
        z = feats @ d("head/W0") + d("head/b0")
        return _margin(z, z.max(axis=0) @ d("head/W1") + d("head/b1"))
    cat = np.concatenate([feats, np.repeat(feats.max(axis=0, keepdims=True), len(feats), axis=0)], axis=1)
    return _margin(feats, cat @ d("head/W1") + d("head/b1"))


def _smooth_feats(rng, p, task: str, n: int, width: int, margin: float = 1e-3) -> Tensor:
    """Random head input whose max-pool and relu are at least ``margin`` from a kink,
    so central differences are valid there."""
    for _ in range(100):
        t = _param(rng, n, width)
        if _head_margin(t.data, p, task) >= margin:
            return t
    raise RuntimeError("could not draw a smooth head instance")


def _model_blocks(rng):
    n, d, dp = 6, 8, 4
    cfg = ModelConfig(n_points=16, input_dim=3, embed_dim=d, heads=2, head_dim=16, num_classes=3)
    p = init_params(cfg, int(rng.integers(1 << 31)), dtype=np.float64)
    pts = Tensor(rng.normal(size=(n, 3)))
    yield "embed", _block(rng, lambda: (lambda: embed(pts, p, "scale1"),
                                        [p[f"scale1/embed/{k}"] for k in ("W1", "b1", "W2", "b2")]))

    F = _param(rng, n, d)
    w = PSAWeights(_param(rng, d, dp), _param(rng, d, dp), _param(rng, d, d))
    yield "psa", _block(rng, lambda: (lambda: psa_forward(F, w), [F, w.W_q, w.W_k, w.W_v]))

    Fm = _param(rng, n, d)
    mh = MultiHeadWeights([tuple(_param(rng, d, d // 2) for _ in range(3)) for _ in range(2)])
    ws = [t for h in mh.heads for t in h]
    yield "multihead", _block(rng, lambda: (lambda: multihead_forward(Fm, mh), [Fm] + ws))

    src_pos, q_pos = rng.normal(size=(5, 3)), rng.normal(size=(8, 3))
    src_feat = _param(rng, 5, 4)
    yield "interpolate_up", _block(rng, lambda: (lambda: interpolate_up(src_pos, src_feat, q_pos), [src_feat]))

    width = cfg.feature_dim
    head = [p[k] for k in p.names() if k.startswith("head/")]
    p["head/b1"].data[:] = 1.0  # keep the relu units live so the check is not vacuous
    feats = _smooth_feats(rng, p, "cls", n, width)
    yield "classify_head", _block(rng, lambda: (lambda: classify(feats, p), [feats] + head))

    scfg = ModelConfig(n_points=16, embed_dim=d, heads=2, head_dim=16, num_classes=3, task="seg")
    sp = init_params(scfg, int(rng.integers(1 << 31)), dtype=np.float64)
    shead = [sp[k] for k in sp.names() if k.startswith("head/")]
    sp["head/b1"].data[:] = 1.0
    sfeats = _smooth_feats(rng, sp, "seg", n, width)
    yield "segment_head", _block(rng, lambda: (lambda: segment(sfeats, sp), [sfeats] + shead))


def blocks(seed: int = 0):
    """Yield (name, (loss closure, tensors)) for every differentiable block."""
    rng = np.random.default_rng(seed)
    yield from _engine_blocks(rng)
    yield from _model_blocks(rng)


def end_to_end(seed: int = 0, n_samples: int = 20, task: str = "cls") -> float:
    """Relative error of 20 sampled parameter derivatives of the full model's loss."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_points=16, embed_dim=4, psa_proj_dim=2, heads=2, head_dim=32, num_classes=3, task=task)
    params = init_params(cfg, seed, dtype=np.float64)
    params["head/b1"].data[:] = 1.0
    pts = rng.normal(size=(16, 3))
    pts /= np.linalg.norm(pts, axis=1).max()  # data scale, keeps the softmax out of saturation
    cloud = PointCloud(pts, point_labels=rng.integers(0, 3, size=16),
                       shape_label=int(rng.integers(0, 3)))
    target = [cloud.shape_label] if task == "cls" else cloud.point_labels

    def loss():
        return T.cross_entropy(forward_full(cloud, cfg, params), target)

    names = params.names()
    sizes = np.array([params[k].data.size for k in names])
    flat = rng.choice(sizes.sum(), size=n_samples, replace=False)
    owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
    offsets = flat - np.concatenate([[0], np.cumsum(sizes)])[owner]
    tensors = [params[k] for k in names]
    grads = analytic_grads(loss, tensors)
    analytic = np.array([grads[o].reshape(-1)[i] for o, i in zip(owner, offsets)])
    numeric = np.array([numeric_grad(loss, tensors[o], entries=[int(i)])[0] for o, i in zip(owner, offsets)])
    return rel_error(analytic, numeric)


def run_gradcheck(seed: int = 0) -> list:
    results = [BlockResult(name, check(f, ts), BLOCK_TOL) for name, (f, ts) in blocks(seed)]
    results.append(BlockResult("end_to_end_cls", end_to_end(seed, task="cls"), E2E_TOL))
    results.append(BlockResult("end_to_end_seg", end_to_end(seed, task="seg"), E2E_TOL))
    return results


def format_report(results) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{r.name:<{w}}  worst_rel_err={r.worst:.3e}  tol={r.tol:.0e}  {'PASS' if r.passed else 'FAIL'}"
             for r in results]
    return "\n".join(lines) + "\n"
