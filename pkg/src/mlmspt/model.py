"""Model assembly: embedding, pyramid branches
of stacked point self-attention, per-branch multi-level attention, the
cross-scale attention, and the classification / segmentation heads.

Widths: branch width D, level concatenation (L+1)*D (the "level width"),
scale concatenation scales*(L+1)*D (the "fused width").
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .attention import MultiHeadWeights, PSAWeights, multihead_forward, psa_forward, xavier_uniform
from .pointcloud import PointCloud, PyramidState, build_pyramid, interpolate_up
from .tensor import ContractError, ShapeError, Tensor, add, concat, matmul, max_rows, relu, repeat_rows

ABLATIONS = {
    "baseline": (False, False, False),
    "ppt": (True, False, False),
    "ppt+mlt": (True, True, False),
    "ppt+mst": (True, False, True),
    "full": (True, True, True),
}

TASKS = ("cls", "seg")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_points: int = 1024
    input_dim: int = 3
    embed_dim: int = 64
    psa_proj_dim: int = 16
    levels: int = 4
    scales: int = 3
    heads: int = 4
    head_dim: int = 128
    num_classes: int = 40
    task: str = "cls"
    use_ppt_branches: bool = True
    use_mlt: bool = True
    use_mst: bool = True
    psa_scale: str = "D"
    psa_ffn: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        for name in ("n_points", "input_dim", "embed_dim", "psa_proj_dim", "levels", "scales", "heads", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.head_dim < 2:
            raise ConfigError(f"head_dim must be >= 2, got {self.head_dim}")
        if self.n_points % 4:
            raise ConfigError(f"n_points={self.n_points} must be divisible by 4")
        if self.n_points % 2 ** (self.scales - 1):
            raise ConfigError(f"n_points={self.n_points} must be divisible by 2^(scales-1)")
        if self.psa_scale not in ("D", "Dproj"):
            raise ConfigError(f"psa_scale must be 'D' or 'Dproj', got {self.psa_scale!r}")
        if (self.use_mlt or self.use_mst) and not self.use_ppt_branches:
            raise ConfigError("multi-level / multi-scale attention require the pyramid branches")
        if self.use_ppt_branches and self.level_dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide level width {self.level_dim}")
        if self.use_mst and self.fused_dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide fused width {self.fused_dim}")
        if self.n_points // 2 ** (self.scales - 1) < 3 and self.use_ppt_branches and self.scales > 1:
            raise ConfigError("coarsest scale needs at least 3 points for interpolation")

    @property
    def level_dim(self) -> int:
        return (self.levels + 1) * self.embed_dim

    @property
    def fused_dim(self) -> int:
        return self.scales * self.level_dim

    @property
    def feature_dim(self) -> int:
        """Width of the per-point features handed to the task head."""
        return self.fused_dim if self.use_ppt_branches else self.embed_dim

    @property
    def ablation(self) -> str:
        key = (self.use_ppt_branches, self.use_mlt, self.use_mst)
        for name, toggles in ABLATIONS.items():
            if toggles == key:
                return name
        raise ConfigError(f"no ablation variant for toggles {key}")

    def with_ablation(self, name: str) -> "ModelConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {list(ABLATIONS)}")
        ppt, mlt, mst = ABLATIONS[name]
        d = asdict(self)
        d.update(use_ppt_branches=ppt, use_mlt=mlt, use_mst=mst)
        return ModelConfig(**d)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        args = {}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            args[key] = _coerce(key, raw, getattr(cls, key))
        return cls(**args)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_kv(text))


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_kv(text: str) -> dict:
    """Parse flat ``key=value`` lines; blank lines and ``#`` comments skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class ParameterStore:
    """Ordered name -> Tensor map."""

    def __init__(self, items=None):
        self._t: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, t in (items or {}).items():
            self[name] = t

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self._t:
            raise KeyError(f"duplicate parameter {name!r}")
        self._t[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __len__(self) -> int:
        return len(self._t)

    def __iter__(self):
        return iter(self._t)

    def names(self) -> list:
        return list(self._t)

    def items(self):
        return self._t.items()

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._t.values())

    def clone(self) -> "ParameterStore":
        return ParameterStore({k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self._t.items()})

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self._t.items()})

    @property
    def dtype(self):
        for t in self._t.values():
            return t.dtype
        return np.dtype(np.float32)


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Every parameter path the active configuration uses, with its shape."""
    d, c = cfg.embed_dim, cfg.input_dim
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    n_branches = cfg.scales if cfg.use_ppt_branches else 1
    for i in range(1, n_branches + 1):
        p = f"scale{i}"
        shapes[f"{p}/embed/W1"] = (c, d)
        shapes[f"{p}/embed/b1"] = (1, d)
        shapes[f"{p}/embed/W2"] = (d, d)
        shapes[f"{p}/embed/b2"] = (1, d)
        if not cfg.use_ppt_branches:
            continue
        for lvl in range(1, cfg.levels + 1):
            shapes[f"{p}/psa{lvl}/W_q"] = (d, cfg.psa_proj_dim)
            shapes[f"{p}/psa{lvl}/W_k"] = (d, cfg.psa_proj_dim)
            shapes[f"{p}/psa{lvl}/W_v"] = (d, d)
            if cfg.psa_ffn:
                shapes[f"{p}/psa{lvl}/ffn/W1"] = (d, d)
                shapes[f"{p}/psa{lvl}/ffn/b1"] = (1, d)
                shapes[f"{p}/psa{lvl}/ffn/W2"] = (d, d)
                shapes[f"{p}/psa{lvl}/ffn/b2"] = (1, d)
        if cfg.use_mlt:
            dh = cfg.level_dim // cfg.heads
            for m in range(1, cfg.heads + 1):
                for w in ("W_Q", "W_K", "W_V"):
                    shapes[f"{p}/mlt/head{m}/{w}"] = (cfg.level_dim, dh)
    if cfg.use_mst:
        dh = cfg.fused_dim // cfg.heads
        for m in range(1, cfg.heads + 1):
            for w in ("W_Q", "W_K", "W_V"):
                shapes[f"mst/head{m}/{w}"] = (cfg.fused_dim, dh)
    width, h = cfg.feature_dim, cfg.head_dim
    if cfg.task == "cls":
        shapes["head/W0"] = (width, h)
        shapes["head/b0"] = (1, h)
        shapes["head/W1"] = (h, h // 2)
        shapes["head/b1"] = (1, h // 2)
        shapes["head/W2"] = (h // 2, cfg.num_classes)
        shapes["head/b2"] = (1, cfg.num_classes)
    else:
        shapes["head/W1"] = (2 * width, h)
        shapes["head/b1"] = (1, h)
        shapes["head/W2"] = (h, cfg.num_classes)
        shapes["head/b2"] = (1, cfg.num_classes)
    return shapes


def check_dimension_chain(cfg: ModelConfig) -> None:
    """Assert D -> (L+1)D -> level width -> scales * level width."""
    assert cfg.level_dim == (cfg.levels + 1) * cfg.embed_dim
    assert cfg.fused_dim == cfg.scales * cfg.level_dim
    if cfg.use_ppt_branches:
        assert cfg.level_dim % cfg.heads == 0
        assert cfg.feature_dim == cfg.fused_dim
    else:
        assert cfg.feature_dim == cfg.embed_dim
    if cfg.use_mst:
        assert cfg.fused_dim % cfg.heads == 0


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Xavier-uniform weights, zero biases, drawn in parameter-path order."""
    check_dimension_chain(cfg)
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, shape in parameter_shapes(cfg).items():
        if name.rsplit("/", 1)[-1].startswith("b"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = xavier_uniform(rng, shape[0], shape[1], dtype)
        store[name] = Tensor(arr, requires_grad=True)
    return store


def _linear(x: Tensor, params: ParameterStore, w: str, b: str) -> Tensor:
    return add(matmul(x, params[w]), params[b])


def embed(points, params: ParameterStore, prefix: str = "scale1") -> Tensor:
    """Shared per-point feed-forward map C -> D -> D with a ReLU between."""
    x = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=params.dtype))
    w1 = params[f"{prefix}/embed/W1"]
    if x.shape[1] != w1.shape[0]:
        raise ConfigError(f"embed: input has {x.shape[1]} channels, {prefix} expects {w1.shape[0]}")
    h = relu(_linear(x, params, f"{prefix}/embed/W1", f"{prefix}/embed/b1"))
    return _linear(h, params, f"{prefix}/embed/W2", f"{prefix}/embed/b2")


def psa_weights(params: ParameterStore, prefix: str) -> PSAWeights:
    return PSAWeights(params[f"{prefix}/W_q"], params[f"{prefix}/W_k"], params[f"{prefix}/W_v"])


def mh_weights(params: ParameterStore, prefix: str, heads: int) -> MultiHeadWeights:
    return MultiHeadWeights([
        (params[f"{prefix}/head{m}/W_Q"], params[f"{prefix}/head{m}/W_K"], params[f"{prefix}/head{m}/W_V"])
        for m in range(1, heads + 1)
    ])


def ppt_branch(f0: Tensor, params: ParameterStore, cfg: ModelConfig, scale: int) -> Tensor:
    """Stacked PSA layers on one branch; returns concat(F0, F1, ..., FL)."""
    levels = [f0]
    f = f0
    for lvl in range(1, cfg.levels + 1):
        p = f"scale{scale}/psa{lvl}"
        f = psa_forward(f, psa_weights(params, p), scale_by=cfg.psa_scale)
        if cfg.psa_ffn:
            h = relu(_linear(f, params, f"{p}/ffn/W1", f"{p}/ffn/b1"))
            f = add(_linear(h, params, f"{p}/ffn/W2", f"{p}/ffn/b2"), f)
        levels.append(f)
    out = concat(levels)
    if out.shape[1] != cfg.level_dim:
        raise ShapeError(f"branch {scale} width {out.shape[1]} != {cfg.level_dim}")
    return out


def ppt_forward(pyramid: PyramidState, features: np.ndarray, params: ParameterStore, cfg: ModelConfig) -> list:
    """Per scale: embed the sampled points, then run the PSA stack."""
    outs = []
    for i, idx in enumerate(pyramid.indices, start=1):
        f0 = embed(features[idx], params, f"scale{i}")
        outs.append(ppt_branch(f0, params, cfg, i))
    return outs


def mlt_forward(f_ppt: Tensor, params: ParameterStore, cfg: ModelConfig, scale: int) -> Tensor:
    return multihead_forward(f_ppt, mh_weights(params, f"scale{scale}/mlt", cfg.heads))


def upsample_concat(feats: list, pyramid: PyramidState) -> Tensor:
    """Bring every scale to full resolution and concatenate along features.

    Scale 1 already holds every point and passes through unchanged.
    """
    full = pyramid.positions[0]
    ups = [feats[0]]
    for i in range(1, len(feats)):
        ups.append(interpolate_up(pyramid.positions[i], feats[i], full))
    return concat(ups) if len(ups) > 1 else ups[0]


def mst_forward(feats: list, pyramid: PyramidState, params: ParameterStore, cfg: ModelConfig) -> Tensor:
    cat = upsample_concat(feats, pyramid)
    if cat.shape[1] != cfg.fused_dim:
        raise ShapeError(f"fused width {cat.shape[1]} != {cfg.fused_dim}")
    return multihead_forward(cat, mh_weights(params, "mst", cfg.heads))


def classify(features: Tensor, params: ParameterStore) -> Tensor:
    """Shared linear map, global max-pool, then a two-layer FFN: returns 1 x K logits."""
    g = max_rows(_linear(features, params, "head/W0", "head/b0"))
    h = relu(_linear(g, params, "head/W1", "head/b1"))
    return _linear(h, params, "head/W2", "head/b2")


def segment(features: Tensor, params: ParameterStore) -> Tensor:
    """Per point: [own features, max-pooled global features] -> FFN -> N x K logits."""
    g = repeat_rows(max_rows(features), features.shape[0])
    h = relu(_linear(concat([features, g]), params, "head/W1", "head/b1"))
    return _linear(h, params, "head/W2", "head/b2")


def make_pyramid(cloud: PointCloud, cfg: ModelConfig) -> PyramidState:
    if len(cloud) != cfg.n_points:
        raise ContractError(f"cloud has {len(cloud)} points, model expects {cfg.n_points}")
    if not cfg.use_ppt_branches:
        return PyramidState([np.arange(len(cloud))], [cloud.positions])
    return build_pyramid(cloud.positions, cfg.scales)


def forward_features(cloud: PointCloud, cfg: ModelConfig, params: ParameterStore,
                     pyramid: Optional[PyramidState] = None) -> Tensor:
    """Everything before the task head: N x feature_dim."""
    if pyramid is None:
        pyramid = make_pyramid(cloud, cfg)
    elif len(cloud) != cfg.n_points:
        raise ContractError(f"cloud has {len(cloud)} points, model expects {cfg.n_points}")
    feats = cloud.features
    if feats.shape[1] != cfg.input_dim:
        raise ConfigError(f"cloud has {feats.shape[1]} channels, model expects {cfg.input_dim}")
    feats = feats.astype(params.dtype, copy=False)
    if not cfg.use_ppt_branches:
        return embed(feats, params, "scale1")
    branch = ppt_forward(pyramid, feats, params, cfg)
    if cfg.use_mlt:
        branch = [mlt_forward(f, params, cfg, i) for i, f in enumerate(branch, start=1)]
    if cfg.use_mst:
        out = mst_forward(branch, pyramid, params, cfg)
    else:
        out = upsample_concat(branch, pyramid)
    if out.shape != (cfg.n_points, cfg.feature_dim):
        raise ShapeError(f"feature map {out.shape} != {(cfg.n_points, cfg.feature_dim)}")
    return out


def forward_full(cloud: PointCloud, cfg: ModelConfig, params: ParameterStore,
                 pyramid: Optional[PyramidState] = None) -> Tensor:
    """1 x K logits for classification, N x K for segmentation."""
    f = forward_features(cloud, cfg, params, pyramid)
    return classify(f, params) if cfg.task == "cls" else segment(f, params)
