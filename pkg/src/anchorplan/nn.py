"""Parameter containers, layers, losses, AdamW, and checkpoint serialization.

Modules register parameters and child modules on attribute assignment; dotted
attribute paths become the unique parameter names used by checkpoints and the
optimizer. Initialization is deterministic given the numpy Generator threaded
through the constructors.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .autodiff import NumericError, Tensor, affine, bce_with_logits
from .jsonio import canonical_json, read_json

CHECKPOINT_SCHEMA = "anchorplan.checkpoint/1"

__all__ = [
    "Parameter",
    "Module",
    "ModuleList",
    "Linear",
    "Mlp",
    "LayerNorm",
    "MultiHeadCrossAttention",
    "AdamW",
    "softmax_cross_entropy",
    "l1_loss",
    "focal_loss",
    "bce_with_logits",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_file",
    "CHECKPOINT_SCHEMA",
]


class Parameter(Tensor):
    """A leaf tensor that always participates in gradients."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class; tracks parameters/children in attribute-assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ValueError(f"state dict mismatch; missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, idx: int) -> Module:
        return self._items[idx]


class Linear(Module):
    """Affine map with Glorot-uniform weights (or exact zeros for heads).

    bias=False drops the additive term entirely; attention key projections
    use this because a shared key bias shifts every softmax logit equally
    and therefore can never receive gradient.
    """

    def __init__(
        self,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        zero_init: bool = False,
        bias: bool = True,
    ):
        super().__init__()
        self.n_in = n_in
        self.n_out = n_out
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_in, n_out))
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        flat = x if x.ndim == 2 else x.reshape(-1, x.shape[-1])
        out = flat @ self.w if self.b is None else affine(flat, self.w, self.b)
        return out if x.ndim == 2 else out.reshape(*x.shape[:-1], self.n_out)


_ACTIVATIONS = {"relu": Tensor.relu, "gelu": Tensor.gelu}


class Mlp(Module):
    """Stack of Linear layers; activation between layers only, never after the last."""

    def __init__(
        self,
        n_in: int,
        hidden: Sequence[int],
        n_out: int,
        rng: np.random.Generator,
        activation: str = "relu",
        zero_last: bool = False,
        last_bias: bool = True,
    ):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        widths = [n_in, *hidden, n_out]
        self.activation = activation
        last = len(widths) - 2
        self.layers = ModuleList(
            [
                Linear(
                    widths[i],
                    widths[i + 1],
                    rng,
                    zero_init=zero_last and i == last,
                    bias=last_bias or i != last,
                )
                for i in range(len(widths) - 1)
            ]
        )

    def __call__(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                x = act(x)
        return x


class LayerNorm(Module):
    """Last-axis normalization with a learned affine (gamma=1, beta=0 at init)."""

    def __init__(self, width: int, eps: float = 1e-12):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(width))
        self.beta = Parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return x.normalize_rows(self.eps) * self.gamma + self.beta


class MultiHeadCrossAttention(Module):
    """Scaled dot-product cross-attention with per-head split and output projection."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if width % heads != 0:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng, bias=False)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        if k.shape[0] == 0 or v.shape[0] == 0:
            raise ValueError("cross-attention requires at least one key/value entry")
        if q.shape[-1] != self.width or k.shape[-1] != self.width:
            raise ValueError("query/key width does not match attention width")
        if k.shape[0] != v.shape[0]:
            raise ValueError("key and value counts differ")
        if q.shape[0] == 1 and k is v:
            return _attend_single_query(q, k, self)
        m, n, h, d = q.shape[0], k.shape[0], self.heads, self.head_dim
        qh = self.wq(q).reshape(m, h, d).transpose((1, 0, 2))
        kh = self.wk(k).reshape(n, h, d).transpose((1, 0, 2))
        vh = self.wv(v).reshape(n, h, d).transpose((1, 0, 2))
        scores = (qh @ kh.transpose((0, 2, 1))) * (1.0 / np.sqrt(d))
        ctx = scores.softmax(axis=-1) @ vh
        return self.wo(ctx.transpose((1, 0, 2)).reshape(m, self.width))


def _attend_single_query(q: Tensor, kv: Tensor, attn: MultiHeadCrossAttention) -> Tensor:
    """Fused one-query self-keyed attention: one graph node instead of ~17.

    Mathematically identical to the generic path (floating-point rounding may
    differ in the last bits); the backward pass is derived by hand and covered
    by the finite-difference suite.
    """
    h, d, c = attn.heads, attn.head_dim, attn.width
    wq, wk, wv, wo = attn.wq, attn.wk, attn.wv, attn.wo
    inv_sqrt_d = 1.0 / np.sqrt(d)
    x_q, x_kv = q.data, kv.data
    n = x_kv.shape[0]
    qh = (x_q @ wq.w.data + wq.b.data).reshape(h, d)
    kh = (x_kv @ wk.w.data).reshape(n, h, d)
    vh = (x_kv @ wv.w.data + wv.b.data).reshape(n, h, d)
    scores = np.einsum("hd,nhd->hn", qh, kh) * inv_sqrt_d
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=1, keepdims=True)  # [h, n]
    ctx = np.einsum("hn,nhd->hd", weights, vh).reshape(1, c)
    out_data = ctx @ wo.w.data + wo.b.data

    from .autodiff import _finish, _node, _send

    out = _node(out_data, (q, kv, wq.w, wq.b, wk.w, wv.w, wv.b, wo.w, wo.b))

    def back(g):
        g_ctx_flat = g @ wo.w.data.T
        _send(wo.w, ctx.T @ g)
        _send(wo.b, g[0])
        g_ctx = g_ctx_flat.reshape(h, d)
        g_weights = np.einsum("hd,nhd->hn", g_ctx, vh)
        g_vh = np.einsum("hn,hd->nhd", weights, g_ctx)
        g_scores = weights * (g_weights - (g_weights * weights).sum(axis=1, keepdims=True))
        g_scores *= inv_sqrt_d
        g_qh = np.einsum("hn,nhd->hd", g_scores, kh).reshape(1, c)
        g_kh = np.einsum("hn,hd->nhd", g_scores, qh).reshape(n, c)
        g_vh = g_vh.reshape(n, c)
        _send(wq.w, x_q.T @ g_qh)
        _send(wq.b, g_qh[0])
        _send(wk.w, x_kv.T @ g_kh)
        _send(wv.w, x_kv.T @ g_vh)
        _send(wv.b, g_vh.sum(axis=0))
        _send(q, g_qh @ wq.w.data.T)
        _send(kv, g_kh @ wk.w.data.T + g_vh @ wv.w.data.T)

    return _finish(out, back)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross-entropy from logits; targets are integer class indices."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError("expected logits [N,K] and targets [N]")
    picked = logits.log_softmax(axis=-1)[np.arange(logits.shape[0]), targets]
    return -picked


def l1_loss(pred: Tensor, target) -> Tensor:
    return (pred - target).abs().mean()


def focal_loss(scores: Tensor, target: int, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """-alpha * (1 - p_t)^gamma * log(p_t) with p_t the softmax probability of `target`."""
    if scores.ndim != 1:
        raise ValueError("focal_loss expects a 1-D score vector")
    if not 0 <= target < scores.shape[0]:
        raise ValueError("focal_loss target out of range")
    p_t = scores.softmax(axis=-1)[int(target)]
    nll = -(p_t.log())
    if gamma == 0.0:
        return nll * alpha
    return (1.0 - p_t) ** gamma * nll * alpha


class AdamW:
    """Adam with decoupled weight decay; update order follows parameter naming order."""

    def __init__(
        self,
        params: Iterable[tuple[str, Parameter]] | Module,
        lr: float = 2e-4,
        weight_decay: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if isinstance(params, Module):
            params = params.named_parameters()
        self.params: list[tuple[str, Parameter]] = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)


def save_checkpoint(path: str | Path, module: Module, config: dict | None = None) -> None:
    """Canonical-JSON checkpoint: flat {name -> shape + row-major values} plus config."""
    params = {}
    for name, p in module.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"refusing to checkpoint non-finite parameter {name!r}")
        params[name] = {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
    payload = {"schema_version": CHECKPOINT_SCHEMA, "config": config or {}, "params": params}
    Path(path).write_text(canonical_json(payload) + "\n", encoding="utf-8")


def read_checkpoint_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a checkpoint; raises NumericError on non-finite values."""
    payload = read_json(path)
    if not isinstance(payload, dict) or payload.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"not a {CHECKPOINT_SCHEMA} checkpoint: {path}")
    state: dict[str, np.ndarray] = {}
    for name, entry in payload["params"].items():
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"checkpoint parameter {name!r} contains non-finite values")
        state[name] = arr
    return state, payload.get("config", {})


def load_checkpoint(module: Module, path: str | Path) -> dict:
    """Load parameters into `module` (strict names/shapes); returns the stored config."""
    state, config = read_checkpoint_file(path)
    module.load_state_dict(state)
    return config
