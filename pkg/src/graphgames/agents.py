"""Speaker and listener networks built on :mod:`graphgames.diffcore`.

All encoders take stacked batch arrays (see ``worldgen.stack_inputs``) and
return one embedding row per sample. Parameters live in flat ordered dicts
keyed by dotted names so they map one-to-one onto checkpoint manifests.
"""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import asdict, dataclass

import numpy as np

from graphgames import diffcore as dc
from graphgames.diffcore import Tensor

GRAPH_LAYERS = ("gcn", "sage")
SAGE_AGGREGATORS = ("mean", "pool", "gcn")
POOLINGS = ("sum", "mean", "max")


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    kind: str = "graph"
    graph_layer: str = "gcn"
    sage_aggregator: str = "mean"
    pooling: str = "sum"
    num_layers: int = 2
    hidden_size: int = 200

    def validate(self) -> None:
        if self.kind not in ("bow", "seq", "graph"):
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.graph_layer not in GRAPH_LAYERS:
            raise ConfigError(f"unknown graph layer {self.graph_layer!r}")
        if self.sage_aggregator not in SAGE_AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.sage_aggregator!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.num_layers not in (1, 2, 3):
            raise ConfigError(f"num_layers must be 1, 2 or 3, got {self.num_layers}")
        if self.hidden_size < 1:
            raise ConfigError("hidden_size must be positive")


@dataclass
class AgentConfig:
    encoder: EncoderConfig
    input_size: int
    vocab_size: int = 10
    msg_len: int = 3
    embedding_size: int = 50

    def to_dict(self) -> dict:
        return asdict(self)


class Params(dict):
    """Ordered ``name -> Tensor`` map with a Glorot initialiser."""

    def __init__(self, rng: np.random.Generator | None = None):
        super().__init__()
        self.rng = rng

    def new(self, name: str, shape, zero: bool = False) -> Tensor:
        if zero:
            data = np.zeros(shape)
        else:
            fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True, name=name)
        self[name] = t
        return t

    def load(self, values) -> None:
        for name, t in self.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = dc.matmul(x, w)
    return y if b is None else dc.add(y, b)


class GRUCell:
    """Gated recurrent unit: reset gate, update gate, candidate state."""

    def __init__(self, params: Params, prefix: str, in_size: int, hidden: int):
        self.hidden = hidden
        self.wx = {g: params.new(f"{prefix}.wx_{g}", (in_size, hidden)) for g in "rzn"}
        self.wh = {g: params.new(f"{prefix}.wh_{g}", (hidden, hidden)) for g in "rzn"}
        self.b = {g: params.new(f"{prefix}.b_{g}", (hidden,), zero=True) for g in "rzn"}

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        r = dc.sigmoid(linear(x, self.wx["r"], self.b["r"]) + dc.matmul(h, self.wh["r"]))
        z = dc.sigmoid(linear(x, self.wx["z"], self.b["z"]) + dc.matmul(h, self.wh["z"]))
        n = dc.tanh(linear(x, self.wx["n"], self.b["n"]) + r * dc.matmul(h, self.wh["n"]))
        return n + z * (h - n)


# -- graph layers --------------------------------------------------------------


def gcn_layer(h: Tensor, adj: np.ndarray, w: Tensor) -> Tensor:
    """``ReLU(sum_{j in N(i)} h_j W)`` with neighbourhoods read off ``adj`` verbatim."""
    return dc.relu(dc.matmul(dc.matmul(Tensor(adj), h), w))


def _row_normalise(adj: np.ndarray) -> np.ndarray:
    deg = adj.sum(axis=-1, keepdims=True)
    return np.divide(adj, deg, out=np.zeros_like(adj), where=deg > 0)


def sage_layer(h: Tensor, adj: np.ndarray, params: dict, aggregator: str) -> Tensor:
    """GraphSAGE update with a ``mean``, ``pool`` or ``gcn`` neighbourhood aggregator.

    ``params`` holds ``w`` and ``b``, plus ``w_pool``/``b_pool`` for the pool
    aggregator. ``mean`` and ``pool`` concatenate the node's own features with
    the aggregate; ``gcn`` averages over the closed neighbourhood instead.
    """
    if aggregator == "mean":
        neigh = dc.matmul(Tensor(_row_normalise(adj)), h)
        z = dc.concat([h, neigh], axis=-1)
    elif aggregator == "pool":
        msgs = dc.relu(linear(h, params["w_pool"], params["b_pool"]))
        z = dc.concat([h, dc.masked_max(msgs, adj > 0)], axis=-1)
    elif aggregator == "gcn":
        closed = adj.copy()
        idx = np.arange(adj.shape[-1])
        closed[..., idx, idx] = 1.0
        z = dc.matmul(Tensor(_row_normalise(closed)), h)
    else:
        raise ConfigError(f"unknown aggregator {aggregator!r}")
    return dc.relu(linear(z, params["w"], params["b"]))


def pool_graph(node_embs: Tensor, method: str, w_out: Tensor, b_out: Tensor | None = None) -> Tensor:
    """Reduce node rows (axis -2) by ``method`` and apply the output map."""
    if method == "sum":
        pooled = dc.reduce_sum(node_embs, axis=-2)
    elif method == "mean":
        pooled = dc.reduce_mean(node_embs, axis=-2)
    elif method == "max":
        pooled = dc.reduce_max(node_embs, axis=-2)
    else:
        raise ConfigError(f"unknown pooling {method!r}")
    return linear(pooled, w_out, b_out)


# -- encoders ------------------------------------------------------------------


class GraphEncoder:
    def __init__(self, params: Params, prefix: str, cfg: EncoderConfig, in_size: int, out_size: int):
        self.cfg = cfg
        self.layers = []
        size = in_size
        for l in range(cfg.num_layers):
            p = f"{prefix}.layer{l}"
            if cfg.graph_layer == "gcn":
                layer = {"w": params.new(f"{p}.w", (size, cfg.hidden_size))}
            else:
                agg = cfg.sage_aggregator
                layer = {
                    "w": params.new(f"{p}.w", (size if agg == "gcn" else 2 * size, cfg.hidden_size)),
                    "b": params.new(f"{p}.b", (cfg.hidden_size,), zero=True),
                }
                if agg == "pool":
                    layer["w_pool"] = params.new(f"{p}.w_pool", (size, size))
                    layer["b_pool"] = params.new(f"{p}.b_pool", (size,), zero=True)
            self.layers.append(layer)
            size = cfg.hidden_size
        self.w_out = params.new(f"{prefix}.w_out", (size, out_size))
        self.b_out = params.new(f"{prefix}.b_out", (out_size,), zero=True)

    def node_embeddings(self, x: np.ndarray, adj: np.ndarray) -> Tensor:
        h = Tensor(x)
        for layer in self.layers:
            if self.cfg.graph_layer == "gcn":
                h = gcn_layer(h, adj, layer["w"])
            else:
                h = sage_layer(h, adj, layer, self.cfg.sage_aggregator)
        return h

    def __call__(self, batch: dict) -> Tensor:
        h = self.node_embeddings(batch["x"], batch["adj"])
        return pool_graph(h, self.cfg.pooling, self.w_out, self.b_out)


class BowEncoder:
    def __init__(self, params: Params, prefix: str, cfg: EncoderConfig, in_size: int, out_size: int):
        self.in_size = in_size
        self.w1 = params.new(f"{prefix}.w1", (in_size, cfg.hidden_size))
        self.b1 = params.new(f"{prefix}.b1", (cfg.hidden_size,), zero=True)
        self.w2 = params.new(f"{prefix}.w2", (cfg.hidden_size, out_size))
        self.b2 = params.new(f"{prefix}.b2", (out_size,), zero=True)

    def __call__(self, batch: dict) -> Tensor:
        x = batch["bow"]
        if x.shape[-1] != self.in_size:
            raise dc.DimensionError(f"bag-of-words width {x.shape[-1]} != {self.in_size}")
        return linear(dc.relu(linear(Tensor(x), self.w1, self.b1)), self.w2, self.b2)


class SeqEncoder:
    def __init__(self, params: Params, prefix: str, cfg: EncoderConfig, in_size: int, out_size: int,
                 embedding_size: int):
        self.vocab = in_size
        self.hidden = cfg.hidden_size
        self.embed = params.new(f"{prefix}.embed", (in_size, embedding_size))
        self.cell = GRUCell(params, f"{prefix}.gru", embedding_size, cfg.hidden_size)
        self.w_out = params.new(f"{prefix}.w_out", (cfg.hidden_size, out_size))
        self.b_out = params.new(f"{prefix}.b_out", (out_size,), zero=True)

    def __call__(self, batch: dict) -> Tensor:
        tokens = np.asarray(batch["tokens"])
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise ValueError(f"token outside universe of size {self.vocab}")
        emb = dc.gather_rows(self.embed, tokens)  # [B, T, m]
        h = Tensor(np.zeros((tokens.shape[0], self.hidden)))
        for t in range(tokens.shape[1]):
            h = self.cell(dc.take(emb, t, axis=1), h)
        return linear(h, self.w_out, self.b_out)


def make_encoder(params: Params, prefix: str, cfg: AgentConfig):
    enc = cfg.encoder
    out = enc.hidden_size
    if enc.kind == "graph":
        return GraphEncoder(params, prefix, enc, cfg.input_size, out)
    if enc.kind == "bow":
        return BowEncoder(params, prefix, enc, cfg.input_size, out)
    return SeqEncoder(params, prefix, enc, cfg.input_size, out, cfg.embedding_size)


# -- agents --------------------------------------------------------------------

SampleFn = Callable[[Tensor], Tensor]


class Speaker:
    """Encoder followed by a recurrent decoder emitting ``msg_len`` symbol rows."""

    def __init__(self, cfg: AgentConfig, rng: np.random.Generator):
        cfg.encoder.validate()
        self.cfg = cfg
        self.params = Params(rng)
        hidden = cfg.encoder.hidden_size
        self.encoder = make_encoder(self.params, "speaker.encoder", cfg)
        self.start = self.params.new("speaker.decoder.start", (1, cfg.embedding_size))
        self.symbols = self.params.new("speaker.decoder.embed", (cfg.vocab_size, cfg.embedding_size))
        self.cell = GRUCell(self.params, "speaker.decoder.gru", cfg.embedding_size, hidden)
        self.w_vocab = self.params.new("speaker.decoder.w_vocab", (hidden, cfg.vocab_size))
        self.b_vocab = self.params.new("speaker.decoder.b_vocab", (cfg.vocab_size,), zero=True)

    def encode(self, batch: dict) -> Tensor:
        return self.encoder(batch)

    def decode(self, context: Tensor, sample: SampleFn) -> tuple[Tensor, Tensor]:
        """Run the decoder; ``sample`` turns each step's logits into a (relaxed) one-hot row.

        Returns logits ``[B, L, V]`` and the sampled one-hot message ``[B, L, V]``.
        """
        batch = context.shape[0]
        x = dc.matmul(Tensor(np.ones((batch, 1))), self.start)
        h = context
        logits, onehots = [], []
        for _ in range(self.cfg.msg_len):
            h = self.cell(x, h)
            step = linear(h, self.w_vocab, self.b_vocab)
            sym = sample(step)
            logits.append(step)
            onehots.append(sym)
            x = dc.matmul(sym, self.symbols)
        return dc.stack(logits, axis=1), dc.stack(onehots, axis=1)

    def __call__(self, batch: dict, sample: SampleFn) -> tuple[Tensor, Tensor]:
        return self.decode(self.encode(batch), sample)


def decode_message(speaker: Speaker, context: Tensor, sample: SampleFn) -> Tensor:
    """Logits ``[B, L, V]`` for a context batch."""
    return speaker.decode(context, sample)[0]


class Listener:
    """Encodes the message with a GRU and scores candidates by dot product."""

    def __init__(self, cfg: AgentConfig, rng: np.random.Generator):
        cfg.encoder.validate()
        self.cfg = cfg
        self.params = Params(rng)
        hidden = cfg.encoder.hidden_size
        self.symbols = self.params.new("listener.message.embed", (cfg.vocab_size, cfg.embedding_size))
        self.cell = GRUCell(self.params, "listener.message.gru", cfg.embedding_size, hidden)
        self.w_msg = self.params.new("listener.message.w_out", (hidden, hidden))
        self.b_msg = self.params.new("listener.message.b_out", (hidden,), zero=True)
        self.encoder = make_encoder(self.params, "listener.encoder", cfg)

    def encode_message(self, message: Tensor) -> Tensor:
        """``message`` is a one-hot (possibly relaxed) tensor ``[B, L, V]``."""
        emb = dc.matmul(message, self.symbols)
        h = Tensor(np.zeros((message.shape[0], self.cfg.encoder.hidden_size)))
        for t in range(message.shape[1]):
            h = self.cell(dc.take(emb, t, axis=1), h)
        return linear(h, self.w_msg, self.b_msg)

    def encode_candidates(self, candidates: dict, num_candidates: int) -> Tensor:
        """Candidates are stacked ``[B * (K+1), ...]``; returns ``[B, K+1, e]``."""
        c = self.encoder(candidates)
        return dc.reshape(c, (-1, num_candidates, c.shape[-1]))

    def score(self, u: Tensor, c: Tensor) -> Tensor:
        """Softmax over dot products of the message code with every candidate."""
        logits = dc.matmul(c, dc.reshape(u, (u.shape[0], u.shape[1], 1)))
        return dc.softmax_rows(dc.reshape(logits, logits.shape[:2]))

    def __call__(self, message: Tensor, candidates: dict, num_candidates: int) -> Tensor:
        return self.score(self.encode_message(message), self.encode_candidates(candidates, num_candidates))


def symbols_to_onehot(symbols, vocab_size: int) -> Tensor:
    return Tensor(np.eye(vocab_size)[np.asarray(symbols)])


def listener_score(listener: Listener, message_symbols, candidates: dict, num_candidates: int) -> np.ndarray:
    """Probabilities ``[B, K+1]`` for integer messages ``[B, L]``."""
    with dc.no_grad():
        onehot = symbols_to_onehot(message_symbols, listener.cfg.vocab_size)
        return listener(onehot, candidates, num_candidates).data
