"""Permutation-invariant set autoencoder over feature-index subsets.

Encoder: token lookup followed by two induced set attention blocks (ISAB),
which is permutation *equivariant* in the input rows.  Decoder: pooling by
multihead attention (PMA) with one learnable seed per output slot, a
self-attention block over the pooled slots and a shared linear head
producing a distribution over ``D`` feature ids plus a PAD token.  Since
PMA is invariant to the row order of the embedding, so is everything
downstream of it.

Reconstruction targets are canonical: the subset sorted ascending and
padded with PAD to ``max_len`` slots.

All internal forward passes are batched over sets of equal length
(shape ``(B, N, d)``); the public ``encode``/``decode_logits`` helpers
wrap a single set.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diff_engine as de
from .diff_engine import ContractError, DimensionError, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class EmptyDecode(Exception):
    """Every decoder slot chose PAD; there is no subset to return."""


@dataclass
class CodecConfig:
    n_features: int
    d: int = 128
    heads: int = 4
    n_inducing: int = 32
    max_len: int | None = None
    rff_hidden: int | None = None
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    target_accuracy: float | None = None
    check_every: int = 5
    warmup_steps: int = 500

    def __post_init__(self):
        if self.max_len is None:
            self.max_len = self.n_features
        if self.rff_hidden is None:
            self.rff_hidden = 2 * self.d
        if self.d % self.heads:
            raise ContractError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.n_inducing < 1 or self.max_len < 1 or self.n_features < 1:
            raise ContractError("n_inducing, max_len and n_features must be >= 1")
        if self.check_every < 1:
            raise ContractError("check_every must be >= 1")
        if self.warmup_steps < 0:
            raise ContractError("warmup_steps must be >= 0")

    @property
    def pad_id(self) -> int:
        return self.n_features

    @property
    def vocab(self) -> int:
        return self.n_features + 1


@dataclass
class SubsetEmbedding:
    rows: np.ndarray
    token_ids: list[int]

    def __post_init__(self):
        if self.rows.shape[0] != len(self.token_ids):
            raise ContractError("embedding row count differs from token count")


@dataclass
class CodecParams:
    config: CodecConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    trained_epochs: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in init_params(self.config).tensors.items()}


# ---------------------------------------------------------------------------
# parameters


def _mab_params(rng, prefix: str, d: int, hidden: int) -> dict[str, Tensor]:
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.{name}"] = de.glorot(rng, d, d)
    p[f"{prefix}.bo"] = de.zeros(d)
    p[f"{prefix}.ln1_g"] = de.ones(d)
    p[f"{prefix}.ln1_b"] = de.zeros(d)
    p.update(_rff_params(rng, prefix + ".ff", d, hidden))
    p[f"{prefix}.ln2_g"] = de.ones(d)
    p[f"{prefix}.ln2_b"] = de.zeros(d)
    return p


def _rff_params(rng, prefix: str, d: int, hidden: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.w1": de.glorot(rng, d, hidden),
        f"{prefix}.b1": de.zeros(hidden),
        f"{prefix}.w2": de.glorot(rng, hidden, d),
        f"{prefix}.b2": de.zeros(d),
    }


def _unit_rows(rng, n: int, d: int) -> Tensor:
    lim = math.sqrt(3.0)
    return Tensor(rng.uniform(-lim, lim, size=(n, d)), requires_grad=True)


def init_params(config: CodecConfig) -> CodecParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    Row tables that enter a residual sum directly (token table, inducing
    points, PMA seeds) are drawn with unit variance instead, so their identity
    is not swamped by the attention branch.  The output head uses the Glorot
    range divided by sqrt(d).
    """
    rng = de.seeded_rng(config.seed)
    d, h, V = config.d, config.rff_hidden, config.vocab
    t: dict[str, Tensor] = {"token_table": _unit_rows(rng, V, d)}
    for layer in range(2):
        t[f"enc{layer}.I"] = _unit_rows(rng, config.n_inducing, d)
        t.update(_mab_params(rng, f"enc{layer}.mab0", d, h))
        t.update(_mab_params(rng, f"enc{layer}.mab1", d, h))
    t.update(_rff_params(rng, "dec.pma_ff", d, h))
    t["dec.S"] = _unit_rows(rng, config.max_len, d)
    t.update(_mab_params(rng, "dec.pma", d, h))
    t.update(_mab_params(rng, "dec.self", d, h))
    # shrunk so the initial slot distributions are close to uniform
    t["dec.head.w"] = de.glorot(rng, d, V)
    t["dec.head.w"].data /= math.sqrt(d)
    t["dec.head.b"] = de.zeros(V)
    for name, tensor in t.items():
        tensor.name = name
    return CodecParams(config, t)


# ---------------------------------------------------------------------------
# attention building blocks


class MacCounter:
    """Counts multiply-accumulates spent in attention score and mixing products."""

    def __init__(self):
        self.total = 0


_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_attention_macs():
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _rff(x: Tensor, params: CodecParams, prefix: str) -> Tensor:
    hdn = de.relu(de.add(de.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return de.add(de.matmul(hdn, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return de.transpose(de.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def multihead(q: Tensor, k: Tensor, v: Tensor, params: CodecParams, prefix: str) -> Tensor:
    heads = params.config.heads
    b, nq, d = q.shape
    nk = k.shape[1]
    dh = d // heads
    qh = _split_heads(de.matmul(q, params[f"{prefix}.wq"]), heads)
    kh = _split_heads(de.matmul(k, params[f"{prefix}.wk"]), heads)
    vh = _split_heads(de.matmul(v, params[f"{prefix}.wv"]), heads)
    scores = de.scale(de.matmul(qh, de.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = de.row_softmax(scores)
    mixed = de.matmul(attn, vh)
    for c in _counters:
        c.total += 2 * b * heads * nq * nk * dh
    merged = de.reshape(de.transpose(mixed, (0, 2, 1, 3)), (b, nq, d))
    return de.add(de.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def mab(q: Tensor, k: Tensor, v: Tensor, params: CodecParams, prefix: str) -> Tensor:
    """LayerNorm(H + rFF(H)) with H = LayerNorm(Q + Multihead(Q, K, V)).

    Inputs are ``(B, n, d)`` tensors; a 2-d query (learned points) is
    broadcast over the batch.
    """
    d = params.config.d
    if q.data.ndim == 2:
        q = de.broadcast_to(q, (k.shape[0],) + q.shape)
    for x in (q, k, v):
        if x.data.ndim != 3 or x.shape[-1] != d:
            raise DimensionError(f"mab expects (B, n, {d}) operands, got {x.shape}")
    if k.shape != v.shape or q.shape[0] != k.shape[0]:
        raise DimensionError(f"mab key/value/query mismatch: {q.shape}, {k.shape}, {v.shape}")
    h = de.layer_norm(
        de.add(q, multihead(q, k, v, params, prefix)),
        params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"],
    )
    return de.layer_norm(
        de.add(h, _rff(h, params, prefix + ".ff")),
        params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"],
    )


def isab(x: Tensor, params: CodecParams, layer: int) -> Tensor:
    """MAB(X, H, H) with H = MAB(I, X, X); attention cost is linear in set size."""
    hidden = mab(params[f"enc{layer}.I"], x, x, params, f"enc{layer}.mab0")
    return mab(x, hidden, hidden, params, f"enc{layer}.mab1")


def pma(e: Tensor, params: CodecParams) -> Tensor:
    """MAB(S, rFF(E), rFF(E)): one pooled row per seed, independent of row order."""
    r = _rff(e, params, "dec.pma_ff")
    return mab(params["dec.S"], r, r, params, "dec.pma")


# ---------------------------------------------------------------------------
# encoder / decoder


def _as_batch(x) -> tuple[Tensor, bool]:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if x.data.ndim == 2:
        return de.reshape(x, (1,) + x.shape), True
    return x, False


def encode_batch(ids: np.ndarray, params: CodecParams) -> Tensor:
    """Embed a ``(B, N)`` integer array of equal-length subsets to ``(B, N, d)``."""
    ids = np.asarray(ids, dtype=np.int64)
    cfg = params.config
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ContractError("encode needs a non-empty subset")
    if ids.shape[1] > cfg.max_len:
        raise ContractError(f"subset length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    bad = ids[(ids < 0) | (ids >= cfg.n_features)]
    if bad.size:
        raise IndexError(f"feature id {int(bad[0])} out of range [0, {cfg.n_features})")
    x = de.lookup_rows(params["token_table"], ids)
    return isab(isab(x, params, 0), params, 1)


def encode(subset_tokens: Sequence[int], params: CodecParams) -> SubsetEmbedding:
    """Embed one subset given in any order; rows follow the presentation order."""
    tokens = [int(t) for t in subset_tokens]
    if not tokens:
        raise ContractError("encode needs a non-empty subset")
    e = encode_batch(np.array([tokens]), params)
    return SubsetEmbedding(e.data[0].copy(), tokens)


def decode_logits_batch(e: Tensor, params: CodecParams) -> Tensor:
    """``(B, N, d)`` embeddings to ``(B, max_len, V)`` slot logits."""
    z = pma(e, params)
    z = mab(z, z, z, params, "dec.self")
    return de.add(de.matmul(z, params["dec.head.w"]), params["dec.head.b"])


def decode_logits(e, params: CodecParams) -> np.ndarray:
    """Slot logits for a single ``N x d`` embedding (array, Tensor or SubsetEmbedding)."""
    if isinstance(e, SubsetEmbedding):
        e = e.rows
    batch, single = _as_batch(e)
    out = decode_logits_batch(batch, params)
    return out.data[0] if single else out.data


def logits_to_subset(logits: np.ndarray, pad_id: int | None = None) -> list[int]:
    """Greedy slot decode: argmax per slot, drop PAD, dedupe, sort.

    ``np.argmax`` returns the first maximum, so ties go to the lowest id.
    """
    logits = np.asarray(logits)
    if pad_id is None:
        pad_id = logits.shape[-1] - 1
    picks = np.argmax(logits, axis=-1)
    out = sorted({int(p) for p in picks if p != pad_id})
    if not out:
        raise EmptyDecode("all slots decoded to PAD")
    return out


def make_target(subset: Sequence[int], max_len: int, pad_id: int) -> list[int]:
    ids = sorted(int(i) for i in subset)
    if len(ids) > max_len:
        raise ContractError(f"subset of size {len(ids)} does not fit max_len={max_len}")
    if len(set(ids)) != len(ids):
        raise ContractError("subset has duplicate ids")
    if any(i < 0 or i >= pad_id for i in ids):
        raise IndexError(f"subset ids must lie in [0, {pad_id})")
    return ids + [pad_id] * (max_len - len(ids))


def reconstruction_loss(logits, target) -> Tensor:
    """Mean per-slot negative log-likelihood, PAD slots included."""
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    if logits.shape[:-1] != target.shape:
        raise DimensionError(f"logits {logits.shape} vs target {target.shape}")
    return de.cross_entropy_logits(logits, target)


def codec_loss(ids: np.ndarray, targets: np.ndarray, params: CodecParams) -> Tensor:
    return reconstruction_loss(decode_logits_batch(encode_batch(ids, params), params), targets)


# ---------------------------------------------------------------------------
# training


def _batches(corpus, batch_size: int, rng: np.random.Generator):
    """Shuffled minibatches, each holding orderings of a single length."""
    by_len: dict[int, list[int]] = {}
    for i, (order, _) in enumerate(corpus):
        by_len.setdefault(len(order), []).append(i)
    batches = []
    for n in sorted(by_len):
        idx = np.array(by_len[n])
        rng.shuffle(idx)
        batches.extend(idx[s:s + batch_size] for s in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


@dataclass
class TrainResult:
    params: CodecParams
    loss_curve: list[float]
    accuracy_curve: list[tuple[int, float]] = field(default_factory=list)


def train_codec(corpus, config: CodecConfig, params: CodecParams | None = None, epochs: int | None = None) -> TrainResult:
    """Minibatch Adam on the reconstruction loss.

    ``corpus`` is a list of ``(token_order, target_sequence)`` pairs.  The
    returned curve holds the example-weighted mean loss of each epoch.

    The learning rate ramps linearly up to ``lr`` over the first
    ``warmup_steps`` updates, capped at a tenth of the planned updates so
    short runs still train at full rate; post-LN attention stacks stall for
    many epochs when started at the full rate.

    With ``config.target_accuracy`` set, every ``check_every`` epochs the
    codec reconstructs one fresh permutation of each distinct training
    subset; training stops once the exact-match rate reaches the target.
    """
    if not corpus:
        raise ContractError("cannot train on an empty corpus")
    for order, target in corpus:
        if len(order) == 0 or len(order) > config.max_len or len(target) != config.max_len:
            raise ContractError(f"corpus entry {list(order)} does not fit max_len={config.max_len}")
    params = params or init_params(config)
    epochs = config.epochs if epochs is None else epochs
    orders = [np.asarray(o, dtype=np.int64) for o, _ in corpus]
    targets = np.asarray([t for _, t in corpus], dtype=np.int64)
    opt = de.Adam(params.values(), config.lr)
    rng = de.seeded_rng(de.derive_seed(config.seed, "codec-batches"))
    check_rng = de.seeded_rng(de.derive_seed(config.seed, "codec-check"))
    subsets = sorted({tuple(int(t) for t in tg if t != config.pad_id) for _, tg in corpus})
    curve: list[float] = []
    accuracy: list[tuple[int, float]] = []
    per_epoch = len(_batches(corpus, config.batch_size, de.seeded_rng(0)))
    warmup = min(config.warmup_steps, per_epoch * epochs // 10)
    step = 0
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(corpus, config.batch_size, rng):
            step += 1
            if step <= warmup:
                opt.lr = config.lr * step / warmup
            ids = np.stack([orders[i] for i in idx])
            with de.Tape() as tape:
                loss = codec_loss(ids, targets[idx], params)
            de.backward(tape, loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
        if epoch % 20 == 0 or epoch == epochs - 1:
            log.info("codec epoch %d loss %.5f", epoch, curve[-1])
        window = curve[-20:]
        if len(window) == 20 and window[-1] > window[0]:
            log.warning("codec loss rose over the last 20 epochs (%.4f -> %.4f)", window[0], window[-1])
        params.trained_epochs += 1
        if config.target_accuracy is not None and (epoch + 1) % config.check_every == 0:
            orders_check = [tuple(check_rng.permutation(s)) for s in subsets]
            acc = reconstruction_accuracy(orders_check, subsets, params)
            accuracy.append((epoch + 1, acc))
            log.info("codec epoch %d reconstruction %.4f", epoch + 1, acc)
            if acc >= config.target_accuracy:
                break
    return TrainResult(params, curve, accuracy)


def reconstruct_subsets(orders: Sequence[Sequence[int]], params: CodecParams) -> list[list[int] | None]:
    """Encode then greedily decode each ordering; ``None`` marks an empty decode."""
    out: list[list[int] | None] = [None] * len(orders)
    by_len: dict[int, list[int]] = {}
    for i, o in enumerate(orders):
        by_len.setdefault(len(o), []).append(i)
    for idx in by_len.values():
        ids = np.array([list(orders[i]) for i in idx])
        logits = decode_logits_batch(encode_batch(ids, params), params).data
        for i, lg in zip(idx, logits):
            try:
                out[i] = logits_to_subset(lg, params.config.pad_id)
            except EmptyDecode:
                out[i] = None
    return out


def reconstruction_accuracy(orders, subsets, params: CodecParams) -> float:
    """Fraction of orderings whose greedy decode equals the sorted subset."""
    got = reconstruct_subsets(orders, params)
    hits = sum(g == sorted(s) for g, s in zip(got, subsets))
    return hits / len(orders)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: CodecParams) -> None:
    blob = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(params.config),
        "rng_algorithm": de.RNG_ALGORITHM,
        "trained_epochs": params.trained_epochs,
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.tensors.items()
        },
    }
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path) -> CodecParams:
    blob = json.loads(Path(path).read_text())
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {blob.get('format_version')!r}")
    config = CodecConfig(**blob["config"])
    expected = CodecParams(config).expected_shapes()
    stored = blob["params"]
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise ValueError(f"checkpoint parameter names differ: missing={missing} extra={extra}")
    tensors = {}
    for name, shape in expected.items():
        entry = stored[name]
        if tuple(entry["shape"]) != shape or len(entry["data"]) != math.prod(shape):
            raise ValueError(f"checkpoint tensor {name} has shape {entry['shape']}, expected {list(shape)}")
        tensors[name] = Tensor(np.array(entry["data"], dtype=np.float64).reshape(shape), requires_grad=True, name=name)
    return CodecParams(config, tensors, int(blob.get("trained_epochs", 0)))
