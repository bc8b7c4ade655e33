"""Bounded-parameter transformer with projected pretraining.

The network is a stack of depth-D sub-modules, each a multi-head attention
followed by a one-hidden-layer ReLU feed-forward, both wrapped with weighted
residual links and a row-wise projection onto the unit l2 ball (rows with
norm <= 1 pass through unchanged; the subgradient at norm exactly 1 is taken
from the identity branch).  The output head averages the final rows and
applies a temperature softmax (or, in l2 mode, no softmax).

Parameters live in the bounded class: Frobenius caps on every attention and
feed-forward block, residual weights clipped to [-1, 1], and an l_{1,2} cap
on the transposed output head (Frobenius in l2 mode).  Training is projected
gradient descent: a reverse-mode gradient step followed by projection back
into the bounded class, so floor and fluctuation checks stay valid at every
iterate.

Everything runs in float64 on CPU; all randomness comes from explicit numpy
generators so runs are reproducible bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .concept_model import LatentConceptModel, generate_sequence, marginal_conditional
from .metrics import kl as metric_kl
from .metrics import tv as metric_tv

__all__ = [
    "Bounds",
    "TransformerParams",
    "TokenEmbeddingTable",
    "make_embedding",
    "random_params",
    "random_direction",
    "project_params",
    "in_theta",
    "output_floor",
    "forward",
    "forward_batch",
    "kink_margin",
    "PretrainDataset",
    "build_mle_dataset",
    "TrainConfig",
    "TrainResult",
    "DivergenceError",
    "train_mle",
    "train_l2",
    "TvReport",
    "evaluate_tv",
    "parafluc_bound",
    "GradCheckReport",
    "gradient_check",
    "TransformerPredictor",
    "save_checkpoint",
    "load_checkpoint",
]

torch.set_default_dtype(torch.float64)

_FIELDS = ("wq", "wk", "wv", "a1", "a2", "gamma1", "gamma2", "head")
_PROJ_RTOL = 1e-12


class DivergenceError(RuntimeError):
    """Training loss became non-finite; carries the trace up to the failure."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class Bounds:
    """Norm caps for the bounded parameter class."""

    b_a: float = 2.0
    b_a1: float = 2.0
    b_a2: float = 2.0
    b_q: float = 2.0
    b_k: float = 2.0
    b_v: float = 2.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Bounds":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class TransformerParams:
    """Per-layer weights; attention blocks are stacked (depth, heads, d, d)."""

    wq: torch.Tensor
    wk: torch.Tensor
    wv: torch.Tensor
    a1: torch.Tensor      # (depth, d, d_ff)
    a2: torch.Tensor      # (depth, d_ff, d)
    gamma1: torch.Tensor  # (depth,)
    gamma2: torch.Tensor  # (depth,)
    head: torch.Tensor    # (d, d_y)
    tau: float
    bounds: Bounds
    l2_head: bool = False

    def __post_init__(self):
        for name in _FIELDS:
            t = getattr(self, name)
            if not torch.is_tensor(t):
                t = torch.as_tensor(np.asarray(t), dtype=torch.float64)
            setattr(self, name, t.to(torch.float64))
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        depth, heads, d, d2 = self.wq.shape
        if d != d2 or self.wk.shape != self.wq.shape or self.wv.shape != self.wq.shape:
            raise ValueError("attention blocks must be (depth, heads, d, d)")
        if self.a1.shape[:2] != (depth, d) or self.a2.shape[0] != depth:
            raise ValueError("feed-forward blocks inconsistent with depth/d")
        if self.a2.shape != (depth, self.a1.shape[2], d):
            raise ValueError("a2 must be (depth, d_ff, d)")
        if self.gamma1.shape != (depth,) or self.gamma2.shape != (depth,):
            raise ValueError("residual weights must be (depth,)")
        if self.head.shape[0] != d:
            raise ValueError("output head must be (d, d_y)")

    @property
    def depth(self) -> int:
        return self.wq.shape[0]

    @property
    def heads(self) -> int:
        return self.wq.shape[1]

    @property
    def d(self) -> int:
        return self.wq.shape[2]

    @property
    def d_ff(self) -> int:
        return self.a1.shape[2]

    @property
    def d_y(self) -> int:
        return self.head.shape[1]

    def tensors(self) -> list:
        return [getattr(self, name) for name in _FIELDS]

    def replace_tensors(self, tensors) -> "TransformerParams":
        return dataclasses.replace(self, **dict(zip(_FIELDS, tensors)))

    def clone(self) -> "TransformerParams":
        return self.replace_tensors([t.detach().clone() for t in self.tensors()])

    def allclose(self, other: "TransformerParams", atol: float = 0.0) -> bool:
        return all(torch.equal(a, b) if atol == 0 else torch.allclose(a, b, atol=atol)
                   for a, b in zip(self.tensors(), other.tensors()))


def _head_l12(head: torch.Tensor) -> torch.Tensor:
    """l_{1,2} norm of the transposed head: l2 over rows of the row-l1 norms."""
    return torch.sqrt((head.abs().sum(dim=1) ** 2).sum())


def _scale_factor(norm: torch.Tensor, bound: float) -> torch.Tensor:
    if float(norm) <= bound * (1.0 + _PROJ_RTOL):
        return torch.tensor(1.0, dtype=torch.float64)
    return bound / norm


def _project_with_count(params: TransformerParams) -> tuple:
    b = params.bounds
    count = 0

    def scale_stack(stack, bound, dims):
        nonlocal count
        norms = torch.sqrt((stack ** 2).sum(dim=dims, keepdim=True))
        over = norms > bound * (1.0 + _PROJ_RTOL)
        count += int(over.sum())
        factors = torch.where(over, bound / norms.clamp(min=1e-300),
                              torch.ones_like(norms))
        return stack * factors

    wq = scale_stack(params.wq, b.b_q, (-2, -1))
    wk = scale_stack(params.wk, b.b_k, (-2, -1))
    wv = scale_stack(params.wv, b.b_v, (-2, -1))
    a1 = scale_stack(params.a1, b.b_a1, (-2, -1))
    a2 = scale_stack(params.a2, b.b_a2, (-2, -1))
    g1 = torch.clamp(params.gamma1, -1.0, 1.0)
    g2 = torch.clamp(params.gamma2, -1.0, 1.0)
    count += int((params.gamma1.abs() > 1.0).sum() + (params.gamma2.abs() > 1.0).sum())
    head_norm = torch.linalg.norm(params.head) if params.l2_head else _head_l12(params.head)
    f = _scale_factor(head_norm, b.b_a)
    if float(f) < 1.0:
        count += 1
    head = params.head * f
    projected = params.replace_tensors(
        [t.detach() for t in (wq, wk, wv, a1, a2, g1, g2, head)])
    return projected, count


def project_params(params: TransformerParams) -> TransformerParams:
    """Scale every block into its norm cap; idempotent, never grows a norm."""
    return _project_with_count(params)[0]


def in_theta(params: TransformerParams, rtol: float = 1e-9) -> bool:
    b = params.bounds
    checks = [
        (params.wq, b.b_q), (params.wk, b.b_k), (params.wv, b.b_v),
        (params.a1, b.b_a1), (params.a2, b.b_a2),
    ]
    for stack, bound in checks:
        norms = torch.sqrt((stack ** 2).sum(dim=(-2, -1)))
        if float(norms.max()) > bound * (1 + rtol):
            return False
    if float(params.gamma1.abs().max()) > 1 + rtol:
        return False
    if float(params.gamma2.abs().max()) > 1 + rtol:
        return False
    head_norm = torch.linalg.norm(params.head) if params.l2_head else _head_l12(params.head)
    return float(head_norm) <= b.b_a * (1 + rtol)


def output_floor(params: TransformerParams) -> float:
    """Analytic floor (1 + d_y exp(B_A / tau))^{-1} on any output probability."""
    return 1.0 / (1.0 + params.d_y * math.exp(params.bounds.b_a / params.tau))


def random_params(d: int, depth: int, heads: int, d_ff: int, d_y: int,
                  rng: np.random.Generator, bounds: Bounds | None = None,
                  tau: float = 1.0, init_scale: float = 0.25,
                  l2_head: bool = False, zero_head: bool = False) -> TransformerParams:
    """Random parameters, projected into the bounded class."""
    bounds = bounds or Bounds()

    def g(*shape, scale=init_scale):
        return torch.from_numpy(rng.standard_normal(shape) * scale)

    s = init_scale / math.sqrt(d)
    head = torch.zeros((d, d_y)) if zero_head else g(d, d_y, scale=s)
    params = TransformerParams(
        wq=g(depth, heads, d, d, scale=s), wk=g(depth, heads, d, d, scale=s),
        wv=g(depth, heads, d, d, scale=s),
        a1=g(depth, d, d_ff, scale=s), a2=g(depth, d_ff, d, scale=s),
        gamma1=torch.from_numpy(rng.uniform(-1, 1, depth)),
        gamma2=torch.from_numpy(rng.uniform(-1, 1, depth)),
        head=head, tau=tau, bounds=bounds, l2_head=l2_head)
    return project_params(params)


def random_direction(params: TransformerParams, rng: np.random.Generator,
                     only: tuple | None = None) -> TransformerParams:
    """Unit-Frobenius random perturbation direction with the same shapes."""
    tensors = []
    for name, t in zip(_FIELDS, params.tensors()):
        if only is not None and name not in only:
            tensors.append(torch.zeros_like(t))
        else:
            tensors.append(torch.from_numpy(rng.standard_normal(tuple(t.shape))))
    total = math.sqrt(sum(float((t ** 2).sum()) for t in tensors))
    if total == 0:
        return params.replace_tensors(tensors)
    return params.replace_tensors([t / total for t in tensors])


def _pi_norm(x: torch.Tensor) -> torch.Tensor:
    """Row-wise projection into the unit l2 ball; identity inside the ball."""
    norm = torch.linalg.norm(x, dim=-1, keepdim=True)
    scaled = x / torch.clamp(norm, min=1.0)
    return torch.where(norm > 1.0, scaled, x)


def _mha(x: torch.Tensor, wq, wk, wv, key_mask) -> torch.Tensor:
    """Sum of per-head attn(X Wq, X Wk, X Wv) with softmax over key positions."""
    out = torch.zeros_like(x)
    for i in range(wq.shape[0]):
        q = x @ wq[i]
        k = x @ wk[i]
        v = x @ wv[i]
        logits = q @ k.transpose(-1, -2)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask.unsqueeze(-2), -1e30)
        out = out + torch.softmax(logits, dim=-1) @ v
    return out


def _forward_core(params: TransformerParams, x: torch.Tensor,
                  mask: torch.Tensor | None) -> torch.Tensor:
    """Shared trunk: returns pooled features (batch, d) before the head."""
    for t in range(params.depth):
        y = _pi_norm(_mha(x, params.wq[t], params.wk[t], params.wv[t], mask)
                     + params.gamma1[t] * x)
        x = _pi_norm((torch.relu(y @ params.a1[t]) @ params.a2[t])
                     + params.gamma2[t] * y)
    if mask is None:
        return x.mean(dim=-2)
    m = mask.to(x.dtype).unsqueeze(-1)
    return (x * m).sum(dim=-2) / m.sum(dim=-2)


def _logits(params: TransformerParams, x: torch.Tensor,
            mask: torch.Tensor | None) -> torch.Tensor:
    pooled = _forward_core(params, x, mask)
    out = pooled @ params.head
    return out if params.l2_head else out / params.tau


def forward(params: TransformerParams, embedded_input) -> np.ndarray:
    """Next-token law (or l2-mode output vector) for a single (L, d) input."""
    x = torch.as_tensor(np.asarray(embedded_input, dtype=float))
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != params.d:
        raise ValueError(f"input must be (L, {params.d}) with L >= 1")
    if not torch.all(torch.isfinite(x)):
        raise ValueError("non-finite input rows")
    with torch.no_grad():
        out = _logits(params, x.unsqueeze(0), None)[0]
        if not params.l2_head:
            out = torch.softmax(out, dim=-1)
    return out.numpy()


def forward_batch(params: TransformerParams, inputs, lengths) -> np.ndarray:
    """Batched forward over padded (n, L_max, d) inputs with true lengths."""
    x = torch.as_tensor(np.asarray(inputs, dtype=float))
    lengths = np.asarray(lengths)
    mask = torch.from_numpy(
        np.arange(x.shape[1])[None, :] < lengths[:, None])
    with torch.no_grad():
        out = _logits(params, x, mask)
        if not params.l2_head:
            out = torch.softmax(out, dim=-1)
    return out.numpy()


def kink_margin(params: TransformerParams, embedded_input) -> float:
    """Distance of the nearest ReLU / ball-projection switch point to its kink.

    Used by gradient probes to stay away from the piecewise boundaries.
    """
    x = torch.as_tensor(np.asarray(embedded_input, dtype=float)).unsqueeze(0)
    margin = math.inf
    with torch.no_grad():
        for t in range(params.depth):
            pre = _mha(x, params.wq[t], params.wk[t], params.wv[t], None) \
                + params.gamma1[t] * x
            margin = min(margin, float((torch.linalg.norm(pre, dim=-1) - 1).abs().min()))
            y = _pi_norm(pre)
            act = y @ params.a1[t]
            margin = min(margin, float(act.abs().min()))
            pre2 = torch.relu(act) @ params.a2[t] + params.gamma2[t] * y
            margin = min(margin, float((torch.linalg.norm(pre2, dim=-1) - 1).abs().min()))
            x = _pi_norm(pre2)
    return margin


@dataclass(frozen=True)
class TokenEmbeddingTable:
    """Fixed token rows plus an appended sinusoidal positional block.

    Token and positional parts split the squared-norm budget so every
    embedded row has l2 norm exactly R.
    """

    token_block: np.ndarray  # (alphabet, d_token) rows of norm R*sqrt(token_share)
    d: int
    max_norm: float
    pos_scale: float

    @property
    def alphabet_size(self) -> int:
        return self.token_block.shape[0]

    @property
    def d_token(self) -> int:
        return self.token_block.shape[1]

    def _positional(self, length: int) -> np.ndarray:
        d_pos = self.d - self.d_token
        pos = np.arange(length)[:, None]
        i = np.arange(d_pos)[None, :]
        angles = pos / np.power(100.0, (i // 2 * 2) / max(d_pos, 1))
        block = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
        norms = np.linalg.norm(block, axis=1, keepdims=True)
        return block / norms * self.pos_scale

    def embed(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        out = np.zeros((tokens.size, self.d))
        out[:, :self.d_token] = self.token_block[tokens]
        if self.d_token < self.d:
            out[:, self.d_token:] = self._positional(tokens.size)
        return out

    def max_row_norm(self) -> float:
        token_norms = np.linalg.norm(self.token_block, axis=1)
        return float(np.sqrt(token_norms.max() ** 2 + self.pos_scale ** 2))


def make_embedding(alphabet_size: int, d: int, rng: np.random.Generator,
                   max_norm: float = 1.0, d_pos: int = 4,
                   token_share: float = 0.75) -> TokenEmbeddingTable:
    """Random orthogonal-ish token rows scaled so that row norms stay at R."""
    d_pos = min(d_pos, d - 1)
    d_token = d - d_pos
    raw = rng.standard_normal((alphabet_size, d_token))
    if alphabet_size <= d_token:
        q, _ = np.linalg.qr(raw.T)
        rows = q.T[:alphabet_size]
    else:
        rows = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    token_scale = max_norm * math.sqrt(token_share)
    pos_scale = max_norm * math.sqrt(1.0 - token_share) if d_pos else 0.0
    return TokenEmbeddingTable(token_block=rows * token_scale, d=d,
                               max_norm=max_norm, pos_scale=pos_scale)


@dataclass
class PretrainDataset:
    """Padded prefix inputs with token / soft-distribution / vector targets."""

    inputs: np.ndarray   # (n, L_max, d)
    lengths: np.ndarray  # (n,)
    kind: str            # "tokens" | "soft" | "vectors"
    targets: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def build_mle_dataset(model: LatentConceptModel, embedding: TokenEmbeddingTable,
                      n_traj: int, seq_len: int,
                      rng: np.random.Generator) -> PretrainDataset:
    """Next-token dataset: every prefix of every sampled trajectory."""
    if embedding.alphabet_size != model.alphabet_size:
        raise ValueError("embedding and model alphabets disagree")
    d = embedding.d
    n = n_traj * seq_len
    inputs = np.zeros((n, seq_len, d))
    lengths = np.empty(n, dtype=np.int64)
    targets = np.empty(n, dtype=np.int64)
    from .concept_model import sample_concept
    row = 0
    for _ in range(n_traj):
        z = sample_concept(model, rng)
        seq = generate_sequence(model, z, seq_len + 1, rng)
        emb = embedding.embed(seq.tokens[:seq_len])
        for t in range(1, seq_len + 1):
            inputs[row, :t] = emb[:t]
            lengths[row] = t
            targets[row] = seq.tokens[t]
            row += 1
    return PretrainDataset(inputs=inputs, lengths=lengths, kind="tokens",
                           targets=targets,
                           meta={"n_traj": n_traj, "seq_len": seq_len})


@dataclass
class TrainConfig:
    """Architecture plus projected-gradient optimization settings."""

    d: int = 16
    depth: int = 2
    heads: int = 2
    d_ff: int = 32
    d_y: int = 4
    tau: float = 1.0
    bounds: Bounds = field(default_factory=Bounds)
    steps: int = 500
    learning_rate: float = 0.5
    mode: str = "constant"       # constant | line_search | adam
    batch_size: int | None = None
    seed: int = 0
    init_scale: float = 0.25
    zero_head_init: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class TrainResult:
    params: TransformerParams
    trace: list  # rows (step, loss, grad_norm, projected_blocks_count)

    @property
    def final_loss(self) -> float:
        return self.trace[-1][1]


def _batch_tensors(dataset: PretrainDataset, idx=None):
    sl = slice(None) if idx is None else idx
    x = torch.as_tensor(dataset.inputs[sl])
    lengths = dataset.lengths[sl]
    mask = torch.from_numpy(np.arange(x.shape[1])[None, :] < lengths[:, None])
    tgt = dataset.targets[sl]
    if dataset.kind == "tokens":
        target = torch.as_tensor(tgt, dtype=torch.long)
    else:
        target = torch.as_tensor(tgt)
    return x, mask, target


def _loss_torch(params: TransformerParams, x, mask, target, kind) -> torch.Tensor:
    out = _logits(params, x, mask)
    if kind == "vectors":
        return ((out - target) ** 2).sum(dim=-1).mean()
    log_p = torch.log_softmax(out, dim=-1)
    if kind == "tokens":
        return -log_p[torch.arange(log_p.shape[0]), target].mean()
    # soft targets: mean KL(target || model)
    ent = torch.where(target > 0, target * torch.log(target.clamp(min=1e-300)),
                      torch.zeros_like(target)).sum(dim=-1)
    cross = -(target * log_p).sum(dim=-1)
    return (ent + cross).mean()


def _run_pgd(dataset: PretrainDataset, config: TrainConfig,
             l2_head: bool, init: TransformerParams | None) -> TrainResult:
    if dataset.kind == "vectors" and not l2_head:
        raise ValueError("vector targets require the l2 head")
    rng = np.random.default_rng(config.seed)
    if init is not None:
        cur = project_params(init.clone())
    else:
        cur = random_params(config.d, config.depth, config.heads, config.d_ff,
                            config.d_y, rng, bounds=config.bounds, tau=config.tau,
                            init_scale=config.init_scale, l2_head=l2_head,
                            zero_head=config.zero_head_init)
    if dataset.inputs.shape[2] != cur.d:
        raise ValueError("dataset embedding width does not match d")
    trace: list = []
    lr = config.learning_rate
    moments = None
    if config.mode == "adam":
        moments = ([torch.zeros_like(t) for t in cur.tensors()],
                   [torch.zeros_like(t) for t in cur.tensors()])

    def full_loss(p: TransformerParams) -> float:
        x, mask, target = _batch_tensors(dataset)
        with torch.no_grad():
            return float(_loss_torch(p, x, mask, target, dataset.kind))

    order = np.arange(dataset.n)
    cursor = 0
    for step in range(config.steps):
        if config.batch_size is None or config.batch_size >= dataset.n:
            idx = None
        else:
            if cursor + config.batch_size > dataset.n:
                order = rng.permutation(dataset.n)
                cursor = 0
            idx = order[cursor:cursor + config.batch_size]
            cursor += config.batch_size
        x, mask, target = _batch_tensors(dataset, idx)
        leaves = [t.detach().clone().requires_grad_(True) for t in cur.tensors()]
        live = cur.replace_tensors(leaves)
        loss = _loss_torch(live, x, mask, target, dataset.kind)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", trace)
        grads = torch.autograd.grad(loss, leaves)
        loss = float(loss.detach())
        grad_norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads))

        if config.mode == "line_search":
            base = float(loss) if idx is None else full_loss(cur)
            step_lr = lr
            accepted = None
            n_proj = 0
            for _ in range(40):
                cand = cur.replace_tensors(
                    [t.detach() - step_lr * g for t, g in zip(cur.tensors(), grads)])
                cand, n_proj = _project_with_count(cand)
                if full_loss(cand) <= base:
                    accepted = cand
                    break
                step_lr *= 0.5
            new = accepted if accepted is not None else cur
            if accepted is None:
                n_proj = 0
            cur = new
            trace.append((step, float(loss), grad_norm, n_proj))
            continue

        if config.mode == "adam":
            m, v = moments
            updates = []
            for j, g in enumerate(grads):
                m[j] = config.adam_beta1 * m[j] + (1 - config.adam_beta1) * g
                v[j] = config.adam_beta2 * v[j] + (1 - config.adam_beta2) * g * g
                mh = m[j] / (1 - config.adam_beta1 ** (step + 1))
                vh = v[j] / (1 - config.adam_beta2 ** (step + 1))
                updates.append(mh / (torch.sqrt(vh) + config.adam_eps))
        else:
            updates = list(grads)
        stepped = cur.replace_tensors(
            [t.detach() - lr * u for t, u in zip(cur.tensors(), updates)])
        cur, n_proj = _project_with_count(stepped)
        trace.append((step, float(loss), grad_norm, n_proj))

    trace.append((config.steps, full_loss(cur), float("nan"), 0))
    return TrainResult(params=cur, trace=trace)


def train_mle(dataset: PretrainDataset, config: TrainConfig,
              init: TransformerParams | None = None) -> TrainResult:
    """Projected gradient descent on the cross-entropy pretraining loss."""
    if dataset.kind not in ("tokens", "soft"):
        raise ValueError("train_mle expects token or soft-distribution targets")
    return _run_pgd(dataset, config, l2_head=False, init=init)


def train_l2(dataset: PretrainDataset, config: TrainConfig,
             init: TransformerParams | None = None) -> TrainResult:
    """Projected gradient descent on mean squared error, linear output head."""
    if dataset.kind != "vectors":
        raise ValueError("train_l2 expects vector targets")
    if config.d != config.d_y:
        raise ValueError("l2 pretraining requires d == d_y")
    return _run_pgd(dataset, config, l2_head=True, init=init)


@dataclass(frozen=True)
class TvReport:
    mean_tv: float
    stderr_tv: float
    mean_kl: float
    stderr_kl: float
    n: int
    per_prefix_tv: np.ndarray
    per_prefix_kl: np.ndarray


def evaluate_tv(params: TransformerParams, embedding: TokenEmbeddingTable,
                model: LatentConceptModel, n_prefixes: int, horizon: int,
                rng: np.random.Generator) -> TvReport:
    """Exact TV/KL between the model's posterior-mixture law and the network.

    Prefixes follow the pretraining law: a fresh trajectory per sample with
    prefix length uniform on [1, horizon].
    """
    if embedding.alphabet_size != model.alphabet_size:
        raise ValueError("embedding and model alphabets disagree")
    from .concept_model import sample_concept
    inputs = np.zeros((n_prefixes, horizon, embedding.d))
    lengths = np.empty(n_prefixes, dtype=np.int64)
    exact = np.empty((n_prefixes, model.alphabet_size))
    for i in range(n_prefixes):
        z = sample_concept(model, rng)
        seq = generate_sequence(model, z, horizon, rng)
        t = int(rng.integers(1, horizon + 1))
        inputs[i, :t] = embedding.embed(seq.tokens[:t])
        lengths[i] = t
        exact[i] = marginal_conditional(model, seq.tokens[:t])
    predicted = forward_batch(params, inputs, lengths)
    tvs = np.array([metric_tv(exact[i], predicted[i]) for i in range(n_prefixes)])
    kls = np.array([metric_kl(exact[i], predicted[i]) for i in range(n_prefixes)])
    return TvReport(
        mean_tv=float(tvs.mean()),
        stderr_tv=float(tvs.std(ddof=1) / math.sqrt(n_prefixes)) if n_prefixes > 1 else 0.0,
        mean_kl=float(kls.mean()),
        stderr_kl=float(kls.std(ddof=1) / math.sqrt(n_prefixes)) if n_prefixes > 1 else 0.0,
        n=n_prefixes, per_prefix_tv=tvs, per_prefix_kl=kls)


def parafluc_bound(params: TransformerParams, params2: TransformerParams,
                   input_norm_r: float) -> float:
    """Analytic cap on TV between the two networks' outputs on shared inputs.

    Evaluates the layer-peeling fluctuation bound: a head term plus
    sum_t alpha_t (beta_t + iota_t + kappa_t + rho_t), where the layer-1
    factors carry the input row-norm cap ``input_norm_r``.
    """
    if params.l2_head or params2.l2_head:
        raise ValueError("fluctuation bound applies to the softmax-head network")
    if params.bounds != params2.bounds or params.tau != params2.tau:
        raise ValueError("parameter sets declare different bounded classes")
    for a, b in zip(params.tensors(), params2.tensors()):
        if a.shape != b.shape:
            raise ValueError("parameter shapes disagree")
    b = params.bounds
    d_depth, h = params.depth, params.heads
    tau = params.tau
    ff = 1.0 + b.b_a1 * b.b_a2
    gain = 1.0 + h * b.b_v * (1.0 + 4.0 * b.b_q * b.b_k)

    def fro(x: torch.Tensor) -> float:
        return float(torch.linalg.norm(x))

    total = (2.0 / tau) * float(_head_l12(params.head - params2.head))
    for t in range(d_depth):
        alpha = (2.0 / tau) * b.b_a * ff * gain ** (d_depth - (t + 1))
        input_factor = 1.0 + (input_norm_r - 1.0) * (1.0 if t == 0 else 0.0)
        beta = (abs(float(params.gamma2[t] - params2.gamma2[t]))
                + ff * input_factor * abs(float(params.gamma1[t] - params2.gamma1[t])))
        iota = (b.b_a2 * fro(params.a1[t] - params2.a1[t])
                + b.b_a1 * fro(params.a2[t] - params2.a2[t]))
        kappa = ff * input_factor * sum(
            fro(params.wv[t, i] - params2.wv[t, i]) for i in range(h))
        rho = 2.0 * ff * input_factor * b.b_v * sum(
            b.b_k * fro(params.wq[t, i] - params2.wq[t, i])
            + b.b_q * fro(params.wk[t, i] - params2.wk[t, i]) for i in range(h))
        total += alpha * (beta + iota + kappa + rho)
    return total


@dataclass(frozen=True)
class GradCheckReport:
    analytic: float
    fd_by_h: dict
    best_h: float
    best_rel_err: float


def gradient_check(params: TransformerParams, dataset: PretrainDataset,
                   direction: TransformerParams, h_grid=(1e-4, 1e-5, 1e-6),
                   idx=None) -> GradCheckReport:
    """Central finite differences along ``direction`` vs the analytic derivative."""
    x, mask, target = _batch_tensors(dataset, idx)
    leaves = [t.detach().clone().requires_grad_(True) for t in params.tensors()]
    live = params.replace_tensors(leaves)
    loss = _loss_torch(live, x, mask, target, dataset.kind)
    grads = torch.autograd.grad(loss, leaves)
    analytic = sum(float((g * d).sum())
                   for g, d in zip(grads, direction.tensors()))

    def loss_at(scale: float) -> float:
        shifted = params.replace_tensors(
            [t.detach() + scale * d for t, d in
             zip(params.tensors(), direction.tensors())])
        with torch.no_grad():
            val = float(_loss_torch(shifted, x, mask, target, dataset.kind))
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite loss at probe scale {scale}")
        return val

    fd_by_h = {}
    best_h, best_err = None, math.inf
    for h in h_grid:
        fd = (loss_at(h) - loss_at(-h)) / (2.0 * h)
        fd_by_h[h] = fd
        err = abs(fd - analytic) / max(abs(analytic), abs(fd), 1e-12)
        if err < best_err:
            best_h, best_err = h, err
    return GradCheckReport(analytic=analytic, fd_by_h=fd_by_h,
                           best_h=best_h, best_rel_err=best_err)


class TransformerPredictor:
    """Prediction stream: embeds the token prefix and runs the network."""

    def __init__(self, params: TransformerParams, embedding: TokenEmbeddingTable):
        if params.d_y != embedding.alphabet_size:
            raise ValueError("output width must match the token alphabet")
        self.params = params
        self.embedding = embedding

    def __call__(self, tokens) -> np.ndarray:
        return forward(self.params, self.embedding.embed(tokens))


_CKPT_FORMAT = "icl-bma-lab-checkpoint"
_CKPT_VERSION = 1


def save_checkpoint(params: TransformerParams, path, extra: dict | None = None) -> None:
    """Versioned checkpoint: one JSON header line, then raw float64 blocks."""
    header = {
        "format": _CKPT_FORMAT, "version": _CKPT_VERSION,
        "d": params.d, "depth": params.depth, "heads": params.heads,
        "d_ff": params.d_ff, "d_y": params.d_y, "tau": params.tau,
        "l2_head": params.l2_head, "bounds": params.bounds.to_dict(),
        "blocks": list(_FIELDS), "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode())
        for t in params.tensors():
            fh.write(np.ascontiguousarray(t.numpy(), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Load a checkpoint and validate membership in the declared bounded class."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != _CKPT_FORMAT or header.get("version") != _CKPT_VERSION:
            raise ValueError(f"{path}: not a supported checkpoint")
        depth, heads, d = header["depth"], header["heads"], header["d"]
        d_ff, d_y = header["d_ff"], header["d_y"]
        shapes = {
            "wq": (depth, heads, d, d), "wk": (depth, heads, d, d),
            "wv": (depth, heads, d, d), "a1": (depth, d, d_ff),
            "a2": (depth, d_ff, d), "gamma1": (depth,), "gamma2": (depth,),
            "head": (d, d_y),
        }
        tensors = {}
        for name in header["blocks"]:
            shape = shapes[name]
            n_bytes = int(np.prod(shape)) * 8
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise ValueError(f"{path}: truncated block {name}")
            tensors[name] = torch.from_numpy(
                np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    params = TransformerParams(**tensors, tau=header["tau"],
                               bounds=Bounds.from_dict(header["bounds"]),
                               l2_head=header["l2_head"])
    if not in_theta(params, rtol=1e-9):
        raise ValueError(f"{path}: stored weights violate the declared bounds")
    return params, header["extra"]
