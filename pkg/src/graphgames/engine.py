"""Episodes, the speaker -> channel -> listener pass, training and evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from graphgames import channel, diffcore as dc
from graphgames.agents import AgentConfig, EncoderConfig, Listener, Speaker, symbols_to_onehot
from graphgames.worldgen import Dataset, input_size, stack_inputs

log = logging.getLogger(__name__)

# value grids used for the published runs; None means unconstrained
GRID = {
    "distractors": (1, 2, 4, 9, 19, 29, 49),
    "vocab_size": (10, 25, 50, 100),
    "msg_len": (3, 4, 5, 10, 25),
    "num_layers": (1, 2, 3),
    "hidden_size": (100, 200),
    "embedding_size": (50, 100),
    "learning_rate": (0.01, 0.001),
    "temperature": (1.0,),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    game: str = "g1"
    repr: str = "graph"
    distractors: int = 9
    vocab_size: int = 10
    msg_len: int = 3
    num_layers: int = 2
    hidden_size: int = 200
    embedding_size: int = 50
    learning_rate: float = 0.001
    temperature: float = 1.0
    batch_size: int = 32
    max_episodes: int = 100_000
    seed: int = 0
    eval_every: int = 3_200
    eval_episodes: int = 1_000
    patience: int = 20
    graph_layer: str = "gcn"
    sage_aggregator: str = "mean"
    pooling: str = "sum"
    self_loops: bool = True

    def validate(self, strict_grid: bool = True) -> None:
        if self.game not in ("g1", "g2"):
            raise ValueError(f"unknown game {self.game!r}")
        if self.repr not in ("bow", "seq", "graph"):
            raise ValueError(f"unknown representation {self.repr!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        for name in ("distractors", "vocab_size", "msg_len", "batch_size", "max_episodes", "eval_every",
                     "eval_episodes", "hidden_size", "embedding_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if strict_grid:
            for name, allowed in GRID.items():
                if getattr(self, name) not in allowed:
                    raise ValueError(f"{name}={getattr(self, name)} outside grid {list(allowed)}")
        self.encoder().validate()

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.repr, self.graph_layer, self.sage_aggregator, self.pooling,
                             self.num_layers, self.hidden_size)

    def agent_config(self, dataset: Dataset) -> AgentConfig:
        return AgentConfig(self.encoder(), input_size(dataset, self.repr), self.vocab_size, self.msg_len,
                           self.embedding_size)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def rng_streams(seed: int, n: int = 4) -> list[np.random.Generator]:
    """Independent generators derived from one 64-bit seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# -- episodes ------------------------------------------------------------------


@dataclass
class Episode:
    target: int
    distractors: list[int]
    candidates: list[int]
    target_index: int


def assemble_episode(pool_size: int, k: int, rng: np.random.Generator) -> Episode:
    """Uniform target, ``k`` distinct distractors, shuffled candidate order.

    Indices refer to a pool of distinct items.
    """
    if pool_size <= k:
        raise ValueError(f"split of {pool_size} items cannot supply a target and {k} distractors")
    target = int(rng.integers(pool_size))
    others = rng.choice(pool_size - 1, size=k, replace=False)
    distractors = [int(d) + (d >= target) for d in others]
    cands = [target] + distractors
    perm = rng.permutation(k + 1)
    candidates = [cands[p] for p in perm]
    return Episode(target, distractors, candidates, int(np.flatnonzero(perm == 0)[0]))


class SplitView:
    """Distinct items of one split with pre-stacked representation arrays."""

    def __init__(self, dataset: Dataset, split: str, kind: str, self_loops: bool = True):
        self.dataset = dataset
        self.split = split
        self.kind = kind
        self.items = dataset.pool(split)
        self.ids = np.array([it.id for it in self.items], dtype=np.int64)
        self.arrays = stack_inputs(self.items, dataset, kind, self_loops) if self.items else {}

    def __len__(self) -> int:
        return len(self.items)

    def take(self, idx) -> dict[str, np.ndarray]:
        idx = np.asarray(idx).ravel()
        return {k: v[idx] for k, v in self.arrays.items()}


@dataclass
class EpisodeBatch:
    targets: np.ndarray  # [B] pool index
    candidates: np.ndarray  # [B, K+1] pool indices
    target_index: np.ndarray  # [B]

    @classmethod
    def draw(cls, pool_size: int, k: int, n: int, rng: np.random.Generator) -> EpisodeBatch:
        eps = [assemble_episode(pool_size, k, rng) for _ in range(n)]
        return cls(np.array([e.target for e in eps]), np.array([e.candidates for e in eps]),
                   np.array([e.target_index for e in eps]))

    def __len__(self) -> int:
        return len(self.targets)


@dataclass
class PlayResult:
    probs: np.ndarray
    chosen: np.ndarray
    loss: dc.Tensor
    symbols: np.ndarray


def play_batch(speaker: Speaker, listener: Listener, view: SplitView, batch: EpisodeBatch, mode: str,
               rng: np.random.Generator | None = None, temperature: float = 1.0) -> PlayResult:
    """One forward pass over a batch of episodes.

    ``mode`` is ``train`` (straight-through Gumbel), ``eval`` (argmax) or
    ``soft`` (noise-free softmax relaxation, differentiable end to end).
    """
    if speaker.cfg.encoder.kind != view.kind or listener.cfg.encoder.kind != view.kind:
        raise ValueError(f"agents built for {speaker.cfg.encoder.kind!r}, episodes use {view.kind!r}")
    if mode == "train":
        sample = lambda z: channel.gumbel_softmax_st(z, temperature, rng)
    elif mode == "eval":
        sample = channel.argmax_onehot
    elif mode == "soft":
        sample = lambda z: channel.soft_relaxation(z, temperature)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    n_cand = batch.candidates.shape[1]
    _, message = speaker(view.take(batch.targets), sample)
    probs = listener(message, view.take(batch.candidates), n_cand)
    loss = dc.cross_entropy(probs, batch.target_index)
    return PlayResult(probs.data, np.argmax(probs.data, axis=-1), loss, np.argmax(message.data, axis=-1))


def play_episode(ep: Episode, speaker: Speaker, listener: Listener, view: SplitView, mode: str = "eval",
                 rng: np.random.Generator | None = None, temperature: float = 1.0):
    """Returns ``(probabilities, chosen index, loss)`` for a single episode."""
    batch = EpisodeBatch(np.array([ep.target]), np.array([ep.candidates]), np.array([ep.target_index]))
    res = play_batch(speaker, listener, view, batch, mode, rng, temperature)
    return res.probs[0], int(res.chosen[0]), res.loss.item()


# -- optimisation ----------------------------------------------------------------


class Adam:
    def __init__(self, params: list[dc.Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads[p]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class Agents:
    speaker: Speaker
    listener: Listener

    @classmethod
    def build(cls, config: TrainConfig, dataset: Dataset, rng: np.random.Generator | None = None) -> Agents:
        if rng is None:
            rng = rng_streams(config.seed)[0]
        acfg = config.agent_config(dataset)
        return cls(Speaker(acfg, rng), Listener(acfg, rng))

    def params(self) -> dict[str, dc.Tensor]:
        return {**self.speaker.params, **self.listener.params}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    def restore(self, values: dict) -> None:
        self.speaker.params.load(values)
        self.listener.params.load(values)


@dataclass
class EvalResult:
    accuracy: float
    target_ids: np.ndarray
    candidate_ids: np.ndarray
    target_index: np.ndarray
    chosen: np.ndarray
    symbols: np.ndarray
    batch: EpisodeBatch = field(repr=False, default=None)

    def records(self) -> list[dict]:
        return [
            {"target": int(t), "candidates": c.tolist(), "target_index": int(ti), "chosen": int(ch),
             "message": m.tolist()}
            for t, c, ti, ch, m in zip(self.target_ids, self.candidate_ids, self.target_index, self.chosen,
                                       self.symbols)
        ]


def evaluate(agents: Agents, view: SplitView, k: int, num_episodes: int, rng: np.random.Generator,
             batch_size: int = 250) -> EvalResult:
    """Argmax-channel accuracy over freshly assembled episodes; parameters are untouched."""
    batch = EpisodeBatch.draw(len(view), k, num_episodes, rng)
    chosen, symbols = [], []
    with dc.no_grad():
        for s in range(0, num_episodes, batch_size):
            part = EpisodeBatch(batch.targets[s:s + batch_size], batch.candidates[s:s + batch_size],
                                batch.target_index[s:s + batch_size])
            res = play_batch(agents.speaker, agents.listener, view, part, "eval")
            chosen.append(res.chosen)
            symbols.append(res.symbols)
    chosen = np.concatenate(chosen)
    return EvalResult(float(np.mean(chosen == batch.target_index)), view.ids[batch.targets],
                      view.ids[batch.candidates], batch.target_index, chosen, np.concatenate(symbols), batch)


def speak(agents: Agents, view: SplitView, idx=None, batch_size: int = 250) -> np.ndarray:
    """Argmax messages ``[N, L]`` for pool indices ``idx`` (default: the whole view)."""
    idx = np.arange(len(view)) if idx is None else np.asarray(idx)
    out = []
    with dc.no_grad():
        for s in range(0, len(idx), batch_size):
            _, msg = agents.speaker(view.take(idx[s:s + batch_size]), channel.argmax_onehot)
            out.append(np.argmax(msg.data, axis=-1))
    return np.concatenate(out) if out else np.zeros((0, agents.speaker.cfg.msg_len), dtype=int)


def listener_accuracy(agents: Agents, view: SplitView, batch: EpisodeBatch, symbols: np.ndarray) -> np.ndarray:
    """Per-episode correctness when the listener receives ``symbols`` instead of the speaker's message."""
    with dc.no_grad():
        msg = symbols_to_onehot(symbols, agents.listener.cfg.vocab_size)
        probs = agents.listener(msg, view.take(batch.candidates), batch.candidates.shape[1]).data
    return np.argmax(probs, axis=-1) == batch.target_index


# -- training --------------------------------------------------------------------


@dataclass
class TrainResult:
    agents: Agents
    log: list[dict]
    best_valid_acc: float
    best_episode: int


def train(config: TrainConfig, dataset: Dataset, agents: Agents | None = None, strict_grid: bool = False,
          progress: bool = False) -> TrainResult:
    """Joint Adam descent on the episode cross-entropy; keeps the best-validation parameters."""
    config.validate(strict_grid)
    init_rng, episode_rng, noise_rng, eval_seed = rng_streams(config.seed)
    if agents is None:
        agents = Agents.build(config, dataset, init_rng)
    train_view = SplitView(dataset, "train", config.repr, config.self_loops)
    valid_view = SplitView(dataset, "valid", config.repr, config.self_loops)
    params = list(agents.params().values())
    opt = Adam(params, config.learning_rate)
    eval_state = eval_seed.bit_generator.state

    rows, losses = [], []
    best_acc, best_ep, best = -1.0, 0, agents.snapshot()
    stale = 0
    steps = math.ceil(config.max_episodes / config.batch_size)
    seen = 0
    next_eval = config.eval_every
    for step in range(steps):
        n = min(config.batch_size, config.max_episodes - seen)
        batch = EpisodeBatch.draw(len(train_view), config.distractors, n, episode_rng)
        with dc.Tape() as tape:
            res = play_batch(agents.speaker, agents.listener, train_view, batch, "train", noise_rng,
                             config.temperature)
        loss = res.loss.item()
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at episode {seen} (step {step})")
        grads = dc.backward(res.loss, tape, params)
        # the hard channel can hide a broken speaker from the loss; its gradients cannot
        bad = [p.name for p in params if not np.isfinite(grads[p]).all()]
        if bad:
            raise TrainingDiverged(f"non-finite gradient for {bad[0]} at episode {seen} (step {step})")
        opt.step(grads)
        seen += n
        losses.append(loss)
        if seen >= next_eval or seen >= config.max_episodes:
            next_eval += config.eval_every
            eval_rng = np.random.default_rng()
            eval_rng.bit_generator.state = eval_state
            acc = evaluate(agents, valid_view, config.distractors, config.eval_episodes, eval_rng).accuracy
            rows.append({"episode": seen, "loss": float(np.mean(losses)), "valid_acc": acc})
            losses = []
            if progress:
                log.info("episode %d loss %.4f valid_acc %.4f", seen, rows[-1]["loss"], acc)
            if acc > best_acc:
                best_acc, best_ep, best, stale = acc, seen, agents.snapshot(), 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    agents.restore(best)
    return TrainResult(agents, rows, best_acc, best_ep)


# -- persistence -------------------------------------------------------------------


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write("episode,loss,valid_acc\n")
        for r in rows:
            f.write(f"{r['episode']},{r['loss']!r},{r['valid_acc']!r}\n")


def save_checkpoint(run_dir, agents: Agents, config: TrainConfig, extra: dict | None = None) -> str:
    """Write ``checkpoint.bin`` and the ``config.json`` sidecar; returns the checkpoint sha256."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "checkpoint.bin"
    dc.save_params(ckpt, agents.params())
    digest = hashlib.sha256(ckpt.read_bytes()).hexdigest()
    sidecar = {"config": config.to_dict(), "seed": config.seed, "checkpoint_sha256": digest, **(extra or {})}
    (run_dir / "config.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return digest


def load_checkpoint(run_dir, dataset: Dataset) -> tuple[Agents, TrainConfig, dict]:
    run_dir = Path(run_dir)
    sidecar = json.loads((run_dir / "config.json").read_text())
    config = TrainConfig.from_dict(sidecar["config"])
    agents = Agents.build(config, dataset)
    agents.restore(dc.load_params(run_dir / "checkpoint.bin"))
    return agents, config, sidecar
