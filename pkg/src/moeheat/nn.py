"""Token-wise residual FFN network with BASELayer-style expert blocks.

Everything is float64 numpy with hand-written backward passes. A model is
*dense* when every block is an :class:`Ffn`, and *sparse* once some blocks are
:class:`MoeBlock` (every ``moe_every``-th block, i.e. positions 1, 3, 5, ...
for ``moe_every=2``).

An expert block computes, for token ``t`` routed to expert ``a``::

    h_t <- h_t + sigmoid(h_t . w_a) * FFN_a(h_t)

The routing decision itself is a constant of the forward pass; gradients
reach the gate vector only through the sigmoid factor.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .routing import Assignment, balanced_assign, greedy_assign

INIT_SCALE = 0.1


@dataclass
class ModelConfig:
    vocab: int
    dim: int
    hidden: int
    blocks: int
    num_tasks: int
    moe_every: int = 2
    experts: int = 8
    gate_scale: float = 0.1

    def __post_init__(self):
        for name in ("vocab", "dim", "hidden", "blocks", "num_tasks", "moe_every", "experts"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if self.gate_scale < 0:
            raise ValueError("model.gate_scale must be >= 0")

    @property
    def moe_positions(self) -> list[int]:
        return moe_positions(self.blocks, self.moe_every)


def moe_positions(n_blocks: int, moe_every: int = 2) -> list[int]:
    return [i for i in range(n_blocks) if i % moe_every == moe_every - 1]


@dataclass
class Ffn:
    w1: np.ndarray  # dim x hidden
    b1: np.ndarray
    w2: np.ndarray  # hidden x dim
    b2: np.ndarray

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "Ffn":
        return Ffn(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class MoeBlock:
    experts: list[Ffn]
    gates: np.ndarray  # E x dim

    @property
    def num_experts(self) -> int:
        return len(self.experts)


@dataclass
class Model:
    token_embed: np.ndarray  # vocab x dim
    task_embed: np.ndarray  # num_tasks x dim
    blocks: list  # Ffn | MoeBlock
    out_proj: np.ndarray  # dim x vocab

    @property
    def vocab(self) -> int:
        return self.token_embed.shape[0]

    @property
    def num_tasks(self) -> int:
        return self.task_embed.shape[0]

    @property
    def dim(self) -> int:
        return self.token_embed.shape[1]

    @property
    def is_sparse(self) -> bool:
        return any(isinstance(b, MoeBlock) for b in self.blocks)

    @property
    def phase(self) -> str:
        return "sparse" if self.is_sparse else "dense"

    @property
    def moe_layers(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if isinstance(b, MoeBlock)]

    def named_params(self) -> dict[str, np.ndarray]:
        """Every parameter array, keyed by a stable dotted name (views, not copies)."""
        out = {"token_embed": self.token_embed, "task_embed": self.task_embed}
        for i, b in enumerate(self.blocks):
            if isinstance(b, MoeBlock):
                for j, ex in enumerate(b.experts):
                    for k, v in ex.params().items():
                        out[f"blocks.{i}.experts.{j}.{k}"] = v
                out[f"blocks.{i}.gates"] = b.gates
            else:
                for k, v in b.params().items():
                    out[f"blocks.{i}.{k}"] = v
        out["out_proj"] = self.out_proj
        return out

    def copy(self) -> "Model":
        return copy.deepcopy(self)


def _uniform(rng, shape, scale=INIT_SCALE):
    return rng.uniform(-scale, scale, size=shape)


def init_ffn(dim: int, hidden: int, rng) -> Ffn:
    return Ffn(_uniform(rng, (dim, hidden)), np.zeros(hidden), _uniform(rng, (hidden, dim)), np.zeros(dim))


def init_dense(cfg: ModelConfig, rng: np.random.Generator) -> Model:
    return Model(
        token_embed=_uniform(rng, (cfg.vocab, cfg.dim)),
        task_embed=_uniform(rng, (cfg.num_tasks, cfg.dim)),
        blocks=[init_ffn(cfg.dim, cfg.hidden, rng) for _ in range(cfg.blocks)],
        out_proj=_uniform(rng, (cfg.dim, cfg.vocab)),
    )


def init_sparse(cfg: ModelConfig, rng: np.random.Generator) -> Model:
    """Sparse model from scratch: experts initialised independently of each other."""
    m = init_dense(cfg, rng)
    for i in cfg.moe_positions:
        experts = [m.blocks[i]] + [init_ffn(cfg.dim, cfg.hidden, rng) for _ in range(cfg.experts - 1)]
        m.blocks[i] = MoeBlock(experts, _uniform(rng, (cfg.experts, cfg.dim), cfg.gate_scale))
    return m


def sparsify(model: Model, num_experts: int, seed: int, gate_scale: float, moe_every: int = 2) -> Model:
    """Turn a dense model into a sparse one.

    Every ``moe_every``-th block becomes an expert block whose experts are exact
    copies of the dense FFN, with fresh gate vectors drawn uniformly from
    ``[-gate_scale, gate_scale]``. Other parameters are copied unchanged.
    """
    if num_experts < 1:
        raise ValueError("need at least one expert")
    if model.is_sparse:
        raise ValueError("model is already sparse")
    rng = np.random.default_rng(seed)
    out = model.copy()
    for i in moe_positions(len(model.blocks), moe_every):
        dense = model.blocks[i]
        gates = gate_scale * rng.uniform(-1.0, 1.0, size=(num_experts, model.dim))
        out.blocks[i] = MoeBlock([dense.copy() for _ in range(num_experts)], gates)
    return out


@dataclass
class Forward:
    logits: np.ndarray
    routes: list[Assignment]
    cache: list = field(repr=False)
    h0: np.ndarray = field(repr=False)
    h_final: np.ndarray = field(repr=False)

    def relu_pattern(self) -> list[np.ndarray]:
        """Signs of every ReLU pre-activation; used to detect kinks in finite differences."""
        out = []
        for rec in self.cache:
            if rec[0] == "ffn":
                out.append(rec[2]["z"] > 0)
            else:
                out.extend(p["z"] > 0 for p in rec[2]["parts"])
        return out


def _ffn_fwd(p: Ffn, h):
    z = h @ p.w1 + p.b1
    a = np.maximum(z, 0.0)
    f = a @ p.w2 + p.b2
    return f, {"h": h, "z": z, "a": a}


def _ffn_bwd(p: Ffn, c, df, grads, prefix):
    grads[prefix + "w2"] += c["a"].T @ df
    grads[prefix + "b2"] += df.sum(axis=0)
    dz = (df @ p.w2.T) * (c["z"] > 0)
    grads[prefix + "w1"] += c["h"].T @ dz
    grads[prefix + "b1"] += dz.sum(axis=0)
    return dz @ p.w1.T


def _check_ids(model: Model, tokens, tasks):
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    tasks = np.broadcast_to(np.asarray(tasks, dtype=np.int64), tokens.shape)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.vocab):
        raise IndexError(f"token id out of range [0, {model.vocab})")
    if tasks.size and (tasks.min() < 0 or tasks.max() >= model.num_tasks):
        raise IndexError(f"task id out of range [0, {model.num_tasks})")
    return tokens, tasks


def forward(model: Model, tokens, tasks, mode: str = "train", routes=None) -> Forward:
    """Run the network on a flat token sequence.

    ``tasks`` is a task id per token (or one id for all). In ``train`` mode
    expert blocks use balanced routing, in ``eval`` mode greedy argmax.
    Passing ``routes`` (one per expert block, in order) freezes the routing.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    tokens, tasks = _check_ids(model, tokens, tasks)
    router = balanced_assign if mode == "train" else greedy_assign
    h = model.token_embed[tokens] + model.task_embed[tasks]
    h0 = h
    cache, used_routes = [], []
    for blk in model.blocks:
        if isinstance(blk, Ffn):
            f, c = _ffn_fwd(blk, h)
            cache.append(("ffn", blk, c))
            h = h + f
            continue
        scores = h @ blk.gates.T
        if routes is not None:
            route = routes[len(used_routes)]
        else:
            route = router(scores)
        used_routes.append(route)
        out = np.zeros_like(h)
        parts = []
        for j, ex in enumerate(blk.experts):
            idx = np.flatnonzero(route.expert_of == j)
            if idx.size == 0:
                continue
            hj = h[idx]
            f, c = _ffn_fwd(ex, hj)
            g = expit(hj @ blk.gates[j])
            out[idx] = g[:, None] * f
            c.update(idx=idx, expert=j, f=f, g=g)
            parts.append(c)
        cache.append(("moe", blk, {"h": h, "parts": parts}))
        h = h + out
    logits = h @ model.out_proj
    return Forward(logits, used_routes, cache, h0, h)


def forward_dense(model: Model, tokens, tasks) -> Forward:
    if model.is_sparse:
        raise ValueError("forward_dense needs a dense model")
    return forward(model, tokens, tasks)


def forward_sparse(model: Model, tokens, tasks, mode: str = "train", routes=None) -> Forward:
    if not model.is_sparse:
        raise ValueError("forward_sparse needs a sparse model")
    return forward(model, tokens, tasks, mode, routes)


def cross_entropy(logits: np.ndarray, targets) -> float:
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits, axis=1)
    return float(-lp[np.arange(len(targets)), targets].mean())


def token_losses(logits: np.ndarray, targets) -> np.ndarray:
    lp = log_softmax(logits, axis=1)
    return -lp[np.arange(len(targets)), np.asarray(targets)]


def loss_and_grad(model: Model, batch, mode: str = "train", routes=None):
    """Mean token cross-entropy and its gradient for every parameter.

    ``batch`` needs ``tokens``, ``targets`` and ``token_tasks`` arrays.
    Returns ``(loss, grads, fwd)`` where ``grads`` is keyed like
    :meth:`Model.named_params`.
    """
    tokens = np.asarray(batch.tokens)
    if tokens.size == 0:
        raise ValueError("empty batch")
    fwd = forward(model, tokens, batch.token_tasks, mode, routes)
    targets = np.asarray(batch.targets, dtype=np.int64)
    n = len(targets)
    loss = cross_entropy(fwd.logits, targets)

    grads = {k: np.zeros_like(v) for k, v in model.named_params().items()}
    dlogits = softmax(fwd.logits, axis=1)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    grads["out_proj"] += fwd.h_final.T @ dlogits
    dh = dlogits @ model.out_proj.T

    for i in range(len(model.blocks) - 1, -1, -1):
        kind, blk, c = fwd.cache[i]
        if kind == "ffn":
            dh = dh + _ffn_bwd(blk, c, dh, grads, f"blocks.{i}.")
            continue
        h = c["h"]
        dh_in = dh.copy()
        for part in c["parts"]:
            j, idx, g, f = part["expert"], part["idx"], part["g"], part["f"]
            dout = dh[idx]
            dscore = np.einsum("ij,ij->i", dout, f) * g * (1.0 - g)
            grads[f"blocks.{i}.gates"][j] += dscore @ h[idx]
            dh_part = np.outer(dscore, blk.gates[j])
            dh_part += _ffn_bwd(blk.experts[j], part, dout * g[:, None], grads, f"blocks.{i}.experts.{j}.")
            dh_in[idx] += dh_part
        dh = dh_in

    tokens, tasks = _check_ids(model, tokens, batch.token_tasks)
    np.add.at(grads["token_embed"], tokens, dh)
    np.add.at(grads["task_embed"], tasks, dh)
    return loss, grads, fwd


def apply_update(model: Model, grads: dict, lr: float) -> Model:
    """Plain SGD step, in place. Returns ``model`` for chaining."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    params = model.named_params()
    if set(params) != set(grads):
        raise ValueError("gradient keys do not match model parameters")
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        if lr:
            p -= lr * g
    return model


def gradient_check(model: Model, batch, epsilon: float = 1e-5, samples: int = 100, seed: int = 0,
                   mode: str = "train") -> float:
    """Max relative error between analytic and central-difference gradients.

    Routing is frozen to the assignment of the unperturbed forward pass. A
    sampled coordinate whose perturbation flips any ReLU is discarded and
    redrawn, since the loss is not differentiable there.
    """
    if not 0 < epsilon <= 1e-3:
        raise ValueError("epsilon must be in (0, 1e-3]")
    _, grads, fwd = loss_and_grad(model, batch, mode)
    routes = fwd.routes
    base_pattern = fwd.relu_pattern()
    params = model.named_params()
    names = sorted(params)
    rng = np.random.default_rng(seed)

    def loss_at():
        f = forward(model, batch.tokens, batch.token_tasks, mode, routes)
        return cross_entropy(f.logits, batch.targets), f.relu_pattern()

    worst, checked, attempts = 0.0, 0, 0
    while checked < samples:
        attempts += 1
        if attempts > 50 * samples:
            raise RuntimeError("too many samples landed on ReLU kinks")
        name = names[rng.integers(len(names))]
        p = params[name]
        flat = p.reshape(-1)
        ix = int(rng.integers(flat.size))
        old = flat[ix]
        flat[ix] = old + epsilon
        lp, pat_p = loss_at()
        flat[ix] = old - epsilon
        lm, pat_m = loss_at()
        flat[ix] = old
        if any(not np.array_equal(a, b) for a, b in zip(base_pattern + base_pattern, pat_p + pat_m)):
            continue
        numeric = (lp - lm) / (2 * epsilon)
        analytic = grads[name].reshape(-1)[ix]
        worst = max(worst, relative_error(analytic, numeric))
        checked += 1
    return worst


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    denom = max(abs(analytic), abs(numeric))
    if denom == 0.0:
        return 0.0
    return abs(analytic - numeric) / max(denom, floor)
