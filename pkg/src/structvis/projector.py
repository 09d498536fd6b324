"""Box embedding projectors and their gradient check.

A projector maps a normalized box ``(x1, y1, x2, y2)`` to ``tokens_per_box``
vectors of the word-embedding width ``d``. With one layer it is a single
affine map; deeper variants interleave exact (erf) GeLU between affine layers
of hidden width ``d``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import erf

from .geometry import NormBox

SCHEMA = "structvis/projector/v1"
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ProjectorConfig:
    init: str = "zero"  # "zero" | "uniform"
    init_range: float = 0.1  # a in U(-a, a); ignored for zero init
    n_layers: int = 1
    embed_dim: int = 4096
    tokens_per_box: int = 1

    def __post_init__(self):
        if self.init not in ("zero", "uniform"):
            raise ValueError(f"init must be 'zero' or 'uniform', got {self.init!r}")
        if self.init == "uniform" and not self.init_range > 0:
            raise ValueError(f"uniform init needs a positive range, got {self.init_range}")
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.tokens_per_box not in (1, 9):
            raise ValueError(f"tokens_per_box must be 1 or 9, got {self.tokens_per_box}")

    @property
    def out_dim(self):
        return self.embed_dim * self.tokens_per_box


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


class _Projector:
    config: ProjectorConfig
    layers: list  # [(W, b)], W of shape (out, in)

    def _check(self):
        dims = [4] + [self.config.embed_dim] * (len(self.layers) - 1) + [self.config.out_dim]
        for i, (W, b) in enumerate(self.layers):
            if W.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValueError(
                    f"layer {i}: expected W {(dims[i + 1], dims[i])} and b {(dims[i + 1],)}, "
                    f"got {W.shape} and {b.shape}"
                )
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i} has non-finite parameters")

    def forward_flat(self, x):
        """Forward pass on a ``(..., 4)`` array, returning ``(..., out_dim)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != 4:
            raise ValueError(f"box input must have trailing dimension 4, got {x.shape}")
        h = x
        for i, (W, b) in enumerate(self.layers):
            h = h @ W.T + b
            if i < len(self.layers) - 1:
                h = gelu(h)
        return h

    def project(self, box):
        if isinstance(box, NormBox):
            box = tuple(box)
        y = self.forward_flat(np.asarray(box, dtype=float))
        return y.reshape(*y.shape[:-1], self.config.tokens_per_box, self.config.embed_dim)

    def backward(self, x, grad_out):
        """Gradients of ``<grad_out, forward_flat(x)>`` for one box.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` shaped like
        ``self.layers``.
        """
        x = np.asarray(x, dtype=float)
        pre, acts = [], [x]
        h = x
        for i, (W, b) in enumerate(self.layers):
            z = W @ h + b
            pre.append(z)
            h = gelu(z) if i < len(self.layers) - 1 else z
            acts.append(h)
        g = np.asarray(grad_out, dtype=float).reshape(-1)
        grads = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            if i < len(self.layers) - 1:
                g = g * gelu_grad(pre[i])
            W, _ = self.layers[i]
            grads[i] = (np.outer(g, acts[i]), g.copy())
            g = W.T @ g
        return grads, g

    def parameters(self):
        return [p for W, b in self.layers for p in (W, b)]


class LinearProjector(_Projector):
    def __init__(self, W, b, config: ProjectorConfig):
        self.config = config
        self.layers = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float))]
        self._check()

    @property
    def W(self):
        return self.layers[0][0]

    @property
    def b(self):
        return self.layers[0][1]


class MlpProjector(_Projector):
    def __init__(self, layers, config: ProjectorConfig):
        self.config = config
        self.layers = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float)) for W, b in layers]
        if len(self.layers) < 1:
            raise ValueError("an MLP projector needs at least one layer")
        self._check()


def init_projector(cfg: ProjectorConfig, seed: int = 0):
    rng = np.random.default_rng(seed)
    dims = [4] + [cfg.embed_dim] * (cfg.n_layers - 1) + [cfg.out_dim]
    layers = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        if cfg.init == "zero":
            W, b = np.zeros((fan_out, fan_in)), np.zeros(fan_out)
        else:
            a = cfg.init_range
            W = rng.uniform(-a, a, size=(fan_out, fan_in))
            b = rng.uniform(-a, a, size=fan_out)
        layers.append((W, b))
    if cfg.n_layers == 1:
        return LinearProjector(*layers[0], config=cfg)
    return MlpProjector(layers, config=cfg)


def project(p, box):
    return p.project(box)


def grad_check(p, probe=None, seed: int = 0, h: float = 1e-5, box=None, floor: float = 1e-4) -> float:
    """Max relative error between backprop and central finite differences.

    The loss is ``<probe, project(p, box)>``. ``probe`` and ``box`` are drawn
    from ``seed`` when not given. Relative error per parameter is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps exactly-zero
    gradients (zero init) from dividing noise by zero.
    """
    rng = np.random.default_rng(seed)
    if box is None:
        xs, ys = np.sort(rng.uniform(0.0, 1.0, size=2)), np.sort(rng.uniform(0.0, 1.0, size=2))
        box = (xs[0], ys[0], xs[1], ys[1])
    x = np.asarray(tuple(box) if isinstance(box, NormBox) else box, dtype=float)
    if probe is None:
        probe = rng.standard_normal(p.config.out_dim)
    probe = np.asarray(probe, dtype=float).reshape(-1)
    if probe.shape != (p.config.out_dim,):
        raise ValueError(f"probe must have {p.config.out_dim} entries, got {probe.shape}")

    grads, _ = p.backward(x, probe)
    analytic = [g for pair in grads for g in pair]

    # difference the outputs before contracting with the probe: same central
    # difference, far less cancellation than differencing two scalar losses
    worst = 0.0
    for param, g in zip(p.parameters(), analytic):
        flat, gflat = param.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = p.forward_flat(x)
            flat[j] = orig - h
            down = p.forward_flat(x)
            flat[j] = orig
            numeric = float(probe @ (up - down)) / (2 * h)
            err = abs(gflat[j] - numeric) / max(abs(gflat[j]), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _array_text(a) -> str:
    a = np.asarray(a)
    if a.ndim == 1:
        return "[" + ", ".join(_fmt(v) for v in a) + "]"
    return "[" + ", ".join(_array_text(row) for row in a) + "]"


def dumps_projector(p) -> str:
    """JSON document with every real written to 17 significant digits."""
    layers = ",\n    ".join(
        '{"W": %s, "b": %s}' % (_array_text(W), _array_text(b)) for W, b in p.layers
    )
    return (
        "{\n"
        f'  "schema": "{SCHEMA}",\n'
        f'  "config": {json.dumps(asdict(p.config), sort_keys=True)},\n'
        f'  "layers": [\n    {layers}\n  ]\n'
        "}\n"
    )


def loads_projector(text: str):
    doc = json.loads(text)
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"expected schema {SCHEMA!r}, got {doc.get('schema')!r}")
    cfg = ProjectorConfig(**doc["config"])
    layers = [(np.array(l["W"], dtype=float), np.array(l["b"], dtype=float)) for l in doc["layers"]]
    if len(layers) != cfg.n_layers:
        raise ValueError(f"config says {cfg.n_layers} layers, document has {len(layers)}")
    if cfg.n_layers == 1:
        return LinearProjector(*layers[0], config=cfg)
    return MlpProjector(layers, config=cfg)


def save_projector(p, path):
    Path(path).write_text(dumps_projector(p), encoding="utf-8")


def load_projector(path):
    return loads_projector(Path(path).read_text(encoding="utf-8"))
