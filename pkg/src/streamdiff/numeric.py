"""Float64 tensor primitives, gradient helpers and the flat checkpoint format.

Arrays are ``torch.Tensor`` values in 64-bit precision; the autograd graph plays
the role of the gradient tape. This module adds the pieces the rest of the
package relies on: shape-checked primitives, a layer norm with an explicit
zero-variance convention, a gradient map helper, a central-difference checker,
and a manifest + little-endian blob checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64
LN_ZERO_VAR = 1e-12
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(data, dtype=DTYPE).clone().requires_grad_(requires_grad)


def generator(*keys: int) -> torch.Generator:
    """Deterministic torch generator derived from an arbitrary tuple of ints."""
    seed = int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])
    return torch.Generator().manual_seed(seed)


def randn(shape: Sequence[int], gen: torch.Generator) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=gen, dtype=DTYPE)


# ---------------------------------------------------------------------------
# primitives


def _broadcast_shape(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast_shape(a, b, "add")
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcast_shape(a, b, "mul")
    return a * b


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} are incompatible")
    return a @ b


def softmax(x: torch.Tensor, dim: int = -1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax along ``dim``; ``mask`` (True = keep) removes entries entirely.

    Rows whose mask is all False produce zeros rather than NaN.
    """
    if mask is None:
        return torch.softmax(x, dim=dim)
    _broadcast_shape(x, mask, "softmax mask")
    x = x.masked_fill(~mask, float("-inf"))
    out = torch.softmax(x, dim=dim)
    return torch.nan_to_num(out, nan=0.0)


def apply_mask(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Elementwise mask; ``mask`` may be boolean or real-valued."""
    _broadcast_shape(x, mask, "mask")
    return x * mask.to(x.dtype)


def concat(tensors: Sequence[torch.Tensor], dim: int) -> torch.Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != dim % len(ref)):
            raise ShapeError(f"concat along {dim}: shapes {[tuple(t.shape) for t in tensors]}")
    return torch.cat(list(tensors), dim=dim)


def gather(x: torch.Tensor, dim: int, index: torch.Tensor) -> torch.Tensor:
    if index.dim() != x.dim():
        raise ShapeError(f"gather: index rank {index.dim()} != input rank {x.dim()} ({tuple(x.shape)})")
    return torch.gather(x, dim, index)


def reduce_sum(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim)


def reduce_mean(x: torch.Tensor, dim=None) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def sin(x: torch.Tensor) -> torch.Tensor:
    return torch.sin(x)


def cos(x: torch.Tensor) -> torch.Tensor:
    return torch.cos(x)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


class _LayerNorm(torch.autograd.Function):
    """Last-axis normalisation without affine; rows with variance < 1e-12 map to zero."""

    @staticmethod
    def forward(ctx, x):
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        live = (var >= LN_ZERO_VAR).to(x.dtype)
        inv = torch.rsqrt(var + LN_EPS) * live
        xhat = (x - mu) * inv
        ctx.save_for_backward(xhat, inv)
        return xhat

    @staticmethod
    def backward(ctx, g):
        xhat, inv = ctx.saved_tensors
        gm = g.mean(dim=-1, keepdim=True)
        gx = (g * xhat).mean(dim=-1, keepdim=True)
        return inv * (g - gm - xhat * gx)


def layer_norm(x: torch.Tensor) -> torch.Tensor:
    return _LayerNorm.apply(x)


class LayerNorm(torch.nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = torch.nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x) * self.weight + self.bias


# ---------------------------------------------------------------------------
# gradients


def backward(loss: torch.Tensor, wrt: Mapping[str, torch.Tensor] | None = None) -> dict[str, torch.Tensor]:
    """Backpropagate a scalar loss and return ``{name: grad}``.

    With ``wrt=None`` the leaf tensors are discovered from the graph and keyed
    by position. Tensors that do not influence the loss get a zero gradient.
    The graph is freed afterwards.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise ValueError("backward: loss has no recorded operations")
    if wrt is None:
        wrt = {f"leaf{i}": t for i, t in enumerate(_graph_leaves(loss))}
    names = list(wrt)
    grads = torch.autograd.grad(loss, [wrt[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(wrt[n]) if g is None else g) for n, g in zip(names, grads)}


def _graph_leaves(loss: torch.Tensor) -> list[torch.Tensor]:
    seen, leaves, stack = set(), [], [loss.grad_fn]
    while stack:
        fn = stack.pop()
        if fn is None or fn in seen:
            continue
        seen.add(fn)
        if hasattr(fn, "variable"):
            leaves.append(fn.variable)
        stack.extend(nxt for nxt, _ in fn.next_functions)
    return leaves


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    worst_index: int

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"{state}: max rel err {self.max_rel_error:.3e} over {self.n_checked} entries"


def finite_diff_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    tol: float = 1e-4,
    step: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare autograd against central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps entries whose true gradient is ~0 from dominating the report.
    """
    x0 = x.detach().clone()
    xg = x0.clone().requires_grad_(True)
    out = f(xg)
    if out.numel() != 1:
        raise ShapeError(f"finite_diff_check: f must be scalar, got {tuple(out.shape)}")
    (analytic,) = torch.autograd.grad(out, xg, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x0)
    flat = analytic.reshape(-1)
    n = x0.numel()
    if max_entries is not None and max_entries < n:
        idx = torch.randperm(n, generator=torch.Generator().manual_seed(seed))[:max_entries]
    else:
        idx = torch.arange(n)
    worst, worst_i = 0.0, -1
    with torch.no_grad():
        for i in idx.tolist():
            xp = x0.clone().reshape(-1)
            xp[i] += step
            fp = float(f(xp.reshape(x0.shape)))
            xp[i] -= 2 * step
            fm = float(f(xp.reshape(x0.shape)))
            num = (fp - fm) / (2 * step)
            a = float(flat[i])
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            if rel > worst:
                worst, worst_i = rel, i
    return GradCheckReport(worst <= tol, worst, len(idx), worst_i)


def flatten_params(module: torch.nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def call_with_flat_params(module: torch.nn.Module, flat: torch.Tensor, *args, **kwargs):
    """Call ``module(*args, **kwargs)`` with parameters taken from slices of ``flat``."""
    params, offset = {}, 0
    for name, p in module.named_parameters():
        params[name] = flat[offset : offset + p.numel()].view_as(p)
        offset += p.numel()
    return torch.func.functional_call(module, params, args, kwargs)


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def save_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor], header: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float64 LE blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f8", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    manifest = {"format": "f64le-v1", "header": header or {}, "tensors": entries, "nbytes": offset}
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    if len(blob) != manifest["nbytes"]:
        raise ValueError(f"checkpoint blob has {len(blob)} bytes, manifest says {manifest['nbytes']}")
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out, manifest["header"]


def save_module(path: str | Path, module: torch.nn.Module, header: dict | None = None) -> None:
    save_tensors(path, module.state_dict(), header)


def load_module(path: str | Path, module: torch.nn.Module) -> dict:
    tensors, header = load_tensors(path)
    module.load_state_dict(tensors)
    return header


def all_finite(tensors: Iterable[torch.Tensor]) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)
