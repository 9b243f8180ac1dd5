"""Synthetic multi-task corpus: per-task substitution ciphers with Zipfian task sizes.

Each task maps an input token ``x`` to ``cipher[x]``. Tasks are grouped
round-robin into ``ceil(num_tasks / 4)`` families; the largest task in a family
is its parent, and every other member copies the parent's cipher on
``round(share_fraction * vocab)`` positions. That gives tunable relatedness
between high- and low-resource tasks with exact ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

VALID_FRACTION = 0.1
GROUP_SIZE = 4


@dataclass(frozen=True)
class CorpusConfig:
    vocab: int
    num_tasks: int
    zipf_s: float
    base_size: int
    seq_len: int
    share_fraction: float
    seed: int = 0

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError("data.vocab must be >= 2")
        if self.num_tasks < 1:
            raise ValueError("data.num_tasks must be >= 1")
        if self.base_size < 1:
            raise ValueError("data.base_size must be >= 1")
        if self.zipf_s < 0:
            raise ValueError("data.zipf_s must be >= 0")
        if self.seq_len < 1:
            raise ValueError("data.seq_len must be >= 1")
        if not 0.0 <= self.share_fraction <= 1.0:
            raise ValueError("data.share_fraction must be in [0, 1]")
        if min(zipf_sizes(self.num_tasks, self.zipf_s, self.base_size)) < 2:
            raise ValueError("every task needs >= 2 examples (one train, one valid); raise base_size")


@dataclass
class TaskSpec:
    task_id: int
    cipher: np.ndarray
    parent: int | None
    share_fraction: float
    shared_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "cipher": self.cipher.tolist(),
            "parent": self.parent,
            "share_fraction": self.share_fraction,
            "shared_positions": self.shared_positions.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TaskSpec":
        return cls(d["task_id"], np.array(d["cipher"], dtype=np.int64), d["parent"],
                   d["share_fraction"], np.array(d["shared_positions"], dtype=np.int64))


@dataclass
class Batch:
    """``batch_sequences`` sequences, flattened; each sequence has its own task."""

    tasks: np.ndarray  # one per sequence
    tokens: np.ndarray
    targets: np.ndarray
    token_tasks: np.ndarray

    @property
    def task_id(self) -> int:
        """The task when every sequence shares one; raises otherwise."""
        u = np.unique(self.tasks)
        if len(u) != 1:
            raise ValueError("batch mixes several tasks")
        return int(u[0])


@dataclass
class Corpus:
    config: CorpusConfig
    tasks: list[TaskSpec]
    train: list[np.ndarray]  # per task: (n, seq_len) input ids
    valid: list[np.ndarray]

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def vocab(self) -> int:
        return self.config.vocab

    def targets(self, task: int, inputs: np.ndarray) -> np.ndarray:
        return self.tasks[task].cipher[inputs]

    def train_sizes(self) -> list[int]:
        return [len(x) for x in self.train]

    def total_train_tokens(self) -> int:
        return sum(x.size for x in self.train)

    def low_resource_tasks(self) -> list[int]:
        """Tasks in the smaller half by size (ranks ``num_tasks // 2`` and up)."""
        n = self.num_tasks
        return list(range(n // 2, n)) if n > 1 else [0]

    def high_resource_tasks(self) -> list[int]:
        return [t for t in range(self.num_tasks) if t not in self.low_resource_tasks()]


def zipf_sizes(num_tasks: int, s: float, base_size: int) -> list[int]:
    """Examples per task; rank ``r`` (1-based) gets ``round(base_size * r**-s)``, at least 1."""
    return [max(1, int(round(base_size * r ** (-s)))) for r in range(1, num_tasks + 1)]


def task_groups(num_tasks: int) -> list[list[int]]:
    g = math.ceil(num_tasks / GROUP_SIZE)
    return [list(range(i, num_tasks, g)) for i in range(g)]


def _child_cipher(parent: np.ndarray, share_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    vocab = len(parent)
    n_shared = int(round(share_fraction * vocab))
    shared = np.sort(rng.permutation(vocab)[:n_shared])
    free = np.setdiff1d(np.arange(vocab), shared)
    child = parent.copy()
    child[free] = rng.permutation(parent[free])
    return child, shared


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    rng = np.random.default_rng(cfg.seed)
    sizes = zipf_sizes(cfg.num_tasks, cfg.zipf_s, cfg.base_size)
    specs: list[TaskSpec | None] = [None] * cfg.num_tasks
    for group in task_groups(cfg.num_tasks):
        parent = group[0]
        specs[parent] = TaskSpec(parent, rng.permutation(cfg.vocab).astype(np.int64), None, 0.0)
        for t in group[1:]:
            cipher, shared = _child_cipher(specs[parent].cipher, cfg.share_fraction, rng)
            specs[t] = TaskSpec(t, cipher, parent, cfg.share_fraction, shared)
    train, valid = [], []
    for n in sizes:
        x = rng.integers(0, cfg.vocab, size=(n, cfg.seq_len), dtype=np.int64)
        n_valid = max(1, int(n * VALID_FRACTION))
        valid.append(x[:n_valid])
        train.append(x[n_valid:])
    return Corpus(cfg, specs, train, valid)


def empirical_task_distribution(corpus: Corpus) -> np.ndarray:
    sizes = np.array(corpus.train_sizes(), dtype=np.float64)
    if sizes.sum() <= 0:
        raise ValueError("corpus has no training examples")
    return sizes / sizes.sum()


def sample_tasks(weights, rng: np.random.Generator, n: int) -> np.ndarray:
    """Inverse-CDF draw of ``n`` task ids, one uniform variate each."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("sampling weights must be nonnegative with positive mass")
    cdf = np.cumsum(w / w.sum())
    u = rng.random(n)
    t = np.searchsorted(cdf, u, side="right")
    # Guard the u ~ 1 edge against rounding in the cumsum; never land on a zero-weight tail task.
    return np.minimum(t, np.flatnonzero(w > 0)[-1])


def sample_batch(corpus: Corpus, weights, rng: np.random.Generator, batch_sequences: int = 1) -> Batch:
    """Draw a batch: a task per sequence from ``weights``, then an example uniformly from its train split."""
    if len(weights) != corpus.num_tasks:
        raise ValueError(f"expected {corpus.num_tasks} weights, got {len(weights)}")
    tasks = sample_tasks(weights, rng, batch_sequences)
    seqs = []
    for t in tasks:
        split = corpus.train[t]
        seqs.append(split[rng.integers(len(split))])
    tokens = np.concatenate(seqs)
    targets = np.concatenate([corpus.targets(t, s) for t, s in zip(tasks, seqs)])
    return Batch(tasks, tokens, targets, np.repeat(tasks, corpus.config.seq_len))


def task_batch(corpus: Corpus, task: int, inputs: np.ndarray) -> Batch:
    """Every sequence in ``inputs`` as one batch of task ``task``."""
    inputs = np.asarray(inputs, dtype=np.int64)
    tasks = np.full(len(inputs), task, dtype=np.int64)
    tokens = inputs.reshape(-1)
    return Batch(tasks, tokens, corpus.targets(task, tokens), np.full(tokens.size, task, dtype=np.int64))


def save_corpus(corpus: Corpus, path) -> None:
    """Line-delimited JSON: a header with config and task specs, then one example per line."""
    header = {"config": asdict(corpus.config), "tasks": [t.to_json() for t in corpus.tasks]}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split, arrs in (("train", corpus.train), ("valid", corpus.valid)):
            for t, x in enumerate(arrs):
                for row in x:
                    rec = {"split": split, "targets": corpus.targets(t, row).tolist(),
                           "task": t, "tokens": row.tolist()}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    with open(path) as fh:
        header = json.loads(fh.readline())
        cfg = CorpusConfig(**header["config"])
        tasks = [TaskSpec.from_json(d) for d in header["tasks"]]
        rows = {"train": [[] for _ in tasks], "valid": [[] for _ in tasks]}
        for line in fh:
            rec = json.loads(line)
            toks = np.array(rec["tokens"], dtype=np.int64)
            if not np.array_equal(tasks[rec["task"]].cipher[toks], rec["targets"]):
                raise ValueError(f"corrupt corpus line: targets disagree with task {rec['task']} cipher")
            rows[rec["split"]][rec["task"]].append(toks)
    def stack(lst):
        return np.array(lst, dtype=np.int64).reshape(len(lst), cfg.seq_len)
    return Corpus(cfg, tasks, [stack(r) for r in rows["train"]], [stack(r) for r in rows["valid"]])
