"""Two-phase training: dense pre-training, sparsification, sparse training.

The sampling temperature follows the heating schedule and is fixed at the
start of each epoch; the epoch counter runs through both phases unless
``reset_heating_at_sparsify`` is set. Every epoch ends with a validation pass
(greedy routing) and, in the sparse phase, per-task expert usage is tallied
from the training-time balanced assignments.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .config import RunConfig
from .data import Batch, Corpus, empirical_task_distribution, sample_batch, task_batch
from .routing import NonFiniteScoresError, load_histogram
from .schedule import rescale, temperature_at

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_COLUMNS = ["phase", "epoch", "step", "temperature", "train_loss", "valid_loss", "valid_ppl", "elapsed_ms"]
TASK_METRICS_COLUMNS = ["epoch", "step", "task", "tokens", "valid_loss", "valid_ppl", "accuracy"]


class DivergenceError(RuntimeError):
    """Training produced non-finite values; the learning rate is too large for plain SGD."""


# --- expert usage -----------------------------------------------------------

class ExpertUsage:
    """Expert-selection counts keyed by ``(epoch, moe_layer, task)``."""

    def __init__(self, num_experts: int):
        self.num_experts = num_experts
        self.counts: dict[tuple[int, int, int], np.ndarray] = {}

    def add(self, epoch: int, layer: int, task: int, counts) -> None:
        key = (int(epoch), int(layer), int(task))
        if key not in self.counts:
            self.counts[key] = np.zeros(self.num_experts, dtype=np.int64)
        self.counts[key] += np.asarray(counts, dtype=np.int64)

    def get(self, epoch: int, layer: int, task: int) -> np.ndarray:
        try:
            return self.counts[(epoch, layer, task)]
        except KeyError:
            raise KeyError(f"no usage recorded for epoch={epoch} layer={layer} task={task}") from None

    def epochs(self, task: int | None = None, layer: int | None = None) -> list[int]:
        return sorted({e for (e, l, t) in self.counts
                       if (task is None or t == task) and (layer is None or l == layer)})

    def layers(self) -> list[int]:
        return sorted({l for (_, l, _) in self.counts})

    def to_json(self) -> list[dict]:
        return [{"epoch": e, "layer": l, "task": t, "counts": c.tolist()}
                for (e, l, t), c in sorted(self.counts.items())]

    @classmethod
    def from_json(cls, records: list[dict], num_experts: int | None = None) -> "ExpertUsage":
        if num_experts is None:
            num_experts = len(records[0]["counts"]) if records else 0
        u = cls(num_experts)
        for r in records:
            u.add(r["epoch"], r["layer"], r["task"], r["counts"])
        return u


def record_usage(usage: ExpertUsage, assignments, batch: Batch, epoch: int) -> ExpertUsage:
    """Add each expert layer's per-task load histogram for ``batch`` to ``usage``."""
    token_tasks = np.asarray(batch.token_tasks)
    for layer, route in enumerate(assignments):
        for task in np.unique(token_tasks):
            sel = route.expert_of[token_tasks == task]
            usage.add(epoch, layer, task, load_histogram(sel, usage.num_experts))
    return usage


def usage_entropy(counts) -> float:
    """Shannon entropy (nats) of the normalised counts."""
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("counts must be nonnegative")
    total = c.sum()
    if total <= 0:
        raise ValueError("counts sum to zero")
    q = c[c > 0] / total
    return float(-np.sum(q * np.log(q)))


def usage_drift(usage: ExpertUsage, task: int, layer: int, e1: int, e2: int) -> float:
    """Total-variation distance between a task's expert distributions at two epochs."""
    c1 = usage.get(e1, layer, task).astype(np.float64)
    c2 = usage.get(e2, layer, task).astype(np.float64)
    return float(0.5 * np.abs(c1 / c1.sum() - c2 / c2.sum()).sum())


# --- metrics ----------------------------------------------------------------

@dataclass
class MetricsRecord:
    phase: str
    epoch: int
    step: int
    temperature: float
    train_loss: float
    valid_loss: float
    valid_ppl: float
    elapsed_ms: int = 0

    def csv_row(self) -> list[str]:
        return [self.phase, str(self.epoch), str(self.step), f"{self.temperature:.6f}",
                f"{self.train_loss:.6f}", f"{self.valid_loss:.6f}", f"{self.valid_ppl:.6f}",
                str(self.elapsed_ms)]


@dataclass
class TaskValidation:
    task: int
    tokens: int
    loss: float
    ppl: float
    accuracy: float


@dataclass
class Validation:
    loss: float
    ppl: float
    accuracy: float
    per_task: list[TaskValidation]


def validate(model: nn.Model, corpus: Corpus, mode: str = "eval") -> Validation:
    """Token cross-entropy on every task's validation split (greedy routing)."""
    if model.vocab != corpus.vocab or model.num_tasks != corpus.num_tasks:
        raise ValueError("model and corpus disagree on vocab or number of tasks")
    per_task, sums, hits, total = [], 0.0, 0, 0
    for t in range(corpus.num_tasks):
        split = corpus.valid[t]
        if split.size == 0:
            raise ValueError(f"task {t} has an empty validation split")
        b = task_batch(corpus, t, split)
        fwd = nn.forward(model, b.tokens, b.token_tasks, mode)
        losses = nn.token_losses(fwd.logits, b.targets)
        correct = int(np.sum(np.argmax(fwd.logits, axis=1) == b.targets))
        loss = float(losses.mean())
        per_task.append(TaskValidation(t, losses.size, loss, _ppl(loss), correct / losses.size))
        sums += float(losses.sum())
        hits += correct
        total += losses.size
    loss = sums / total
    return Validation(loss, _ppl(loss), hits / total, per_task)


def _ppl(loss: float) -> float:
    return math.exp(loss) if loss < 709.0 else math.inf


def steps_to_target(records, target_ppl: float) -> int | None:
    """First cumulative step count at which validation ppl is at or below the target."""
    for r in records:
        if r.valid_ppl <= target_ppl:
            return r.step
    return None


def low_resource_mean_ppl(validation: Validation, tasks) -> float:
    return float(np.mean([validation.per_task[t].ppl for t in tasks]))


# --- checkpoints ------------------------------------------------------------

def model_to_json(model: nn.Model) -> dict:
    return {
        "moe_layers": model.moe_layers,
        "experts": model.blocks[model.moe_layers[0]].num_experts if model.is_sparse else 0,
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                   for k, v in model.named_params().items()},
    }


def model_from_json(d: dict) -> nn.Model:
    p = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
    moe = set(d["moe_layers"])
    n_blocks = 1 + max([int(k.split(".")[1]) for k in p if k.startswith("blocks.")], default=-1)
    blocks = []
    for i in range(n_blocks):
        if i in moe:
            experts = [nn.Ffn(*(p[f"blocks.{i}.experts.{j}.{n}"] for n in ("w1", "b1", "w2", "b2")))
                       for j in range(d["experts"])]
            blocks.append(nn.MoeBlock(experts, p[f"blocks.{i}.gates"]))
        else:
            blocks.append(nn.Ffn(*(p[f"blocks.{i}.{n}"] for n in ("w1", "b1", "w2", "b2"))))
    return nn.Model(p["token_embed"], p["task_embed"], blocks, p["out_proj"])


def save_checkpoint(path, state: "RunState", cfg: RunConfig) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "phase": state.model.phase,
        "epoch": state.epoch,
        "step": state.step,
        "switch_epoch": state.switch_epoch,
        "rng_state": state.rng.bit_generator.state,
        "model": model_to_json(state.model),
        "metrics": [asdict(r) for r in state.metrics],
        "task_metrics": state.task_metrics,
        "usage": state.usage.to_json(),
        "stopped": state.stopped,
    }
    _atomic_write(path, json.dumps(doc))


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    doc["model"] = model_from_json(doc["model"])
    return doc


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --- the loop ---------------------------------------------------------------

@dataclass
class RunState:
    model: nn.Model
    rng: np.random.Generator
    usage: ExpertUsage
    epoch: int = 0  # next epoch to run
    step: int = 0
    switch_epoch: int | None = None  # epoch in which sparse training began
    metrics: list[MetricsRecord] = field(default_factory=list)
    task_metrics: list[dict] = field(default_factory=list)
    stopped: bool = False


@dataclass
class RunResult:
    model: nn.Model
    metrics: list[MetricsRecord]
    usage: ExpertUsage
    task_metrics: list[dict]
    steps_per_epoch: int
    dense_steps: int


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def steps_per_epoch(cfg: RunConfig, corpus: Corpus) -> int:
    batch_tokens = cfg.train.batch_sequences * corpus.config.seq_len
    return -(-corpus.total_train_tokens() // batch_tokens)


def dense_step_count(cfg: RunConfig, corpus: Corpus) -> int:
    if cfg.train.dense_steps is not None:
        return cfg.train.dense_steps
    return cfg.train.dense_epochs * steps_per_epoch(cfg, corpus)


def heating_epoch(epoch: int, state: RunState, cfg: RunConfig) -> int:
    if cfg.train.reset_heating_at_sparsify and state.switch_epoch is not None and epoch >= state.switch_epoch:
        return epoch - state.switch_epoch
    return epoch


def check_compatible(cfg: RunConfig, corpus: Corpus) -> None:
    if corpus.vocab != cfg.model.vocab or corpus.num_tasks != cfg.model.num_tasks:
        raise ValueError(
            f"corpus (vocab={corpus.vocab}, tasks={corpus.num_tasks}) does not match config "
            f"(vocab={cfg.model.vocab}, tasks={cfg.model.num_tasks})"
        )


def initial_state(cfg: RunConfig, corpus: Corpus) -> RunState:
    seed = cfg.train.seed
    init_rng = np.random.default_rng(_seed(seed, 0))
    if dense_step_count(cfg, corpus) == 0:
        model = nn.init_sparse(cfg.model, init_rng)
        switch = 0
    else:
        model = nn.init_dense(cfg.model, init_rng)
        switch = None
    return RunState(model, np.random.default_rng(_seed(seed, 1)), ExpertUsage(cfg.model.experts),
                    switch_epoch=switch)


def state_from_checkpoint(doc: dict, cfg: RunConfig) -> RunState:
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    return RunState(
        model=doc["model"], rng=rng,
        usage=ExpertUsage.from_json(doc["usage"], cfg.model.experts),
        epoch=doc["epoch"], step=doc["step"], switch_epoch=doc["switch_epoch"],
        metrics=[MetricsRecord(**r) for r in doc["metrics"]],
        task_metrics=doc["task_metrics"], stopped=doc["stopped"],
    )


def run(cfg: RunConfig, corpus: Corpus, out_dir=None, resume=None, checkpoint_every: int = 0,
        record_time: bool = False, stop_after_epoch: int | None = None) -> RunResult:
    """Train according to ``cfg``; write run artifacts to ``out_dir`` if given.

    ``resume`` is a checkpoint path (or loaded document). ``checkpoint_every``
    keeps a checkpoint every that many epochs in ``out_dir/checkpoints``; the
    latest state always goes to ``out_dir/checkpoint.json``.
    """
    check_compatible(cfg, corpus)
    if resume is not None:
        doc = load_checkpoint(resume) if not isinstance(resume, dict) else resume
        state = state_from_checkpoint(doc, cfg)
    else:
        state = initial_state(cfg, corpus)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.dumps() + "\n")

    spe = steps_per_epoch(cfg, corpus)
    n_dense = dense_step_count(cfg, corpus)
    p = empirical_task_distribution(corpus)
    t0 = time.perf_counter()

    def maybe_sparsify(e):
        if not state.model.is_sparse and state.step >= n_dense:
            state.model = nn.sparsify(state.model, cfg.model.experts, _seed(cfg.train.seed, 2),
                                      cfg.model.gate_scale, cfg.model.moe_every)
            state.switch_epoch = e
            log.info("sparsified at step %d (epoch %d)", state.step, e)

    while state.epoch < cfg.train.epochs and not state.stopped:
        e = state.epoch
        maybe_sparsify(e)
        temperature = temperature_at(heating_epoch(e, state, cfg), cfg.heating)
        weights = rescale(p, temperature)
        losses = []
        for _ in range(spe):
            maybe_sparsify(e)
            batch = sample_batch(corpus, weights, state.rng, cfg.train.batch_sequences)
            try:
                loss, grads, fwd = nn.loss_and_grad(state.model, batch, "train")
            except NonFiniteScoresError as exc:
                raise DivergenceError(f"non-finite routing scores at step {state.step} (epoch {e}); "
                                      f"lower train.lr (now {cfg.train.lr})") from exc
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergenceError(f"non-finite loss or gradient at step {state.step} (epoch {e}); "
                                      f"lower train.lr (now {cfg.train.lr})")
            nn.apply_update(state.model, grads, cfg.train.lr)
            if fwd.routes:
                record_usage(state.usage, fwd.routes, batch, e)
            losses.append(loss)
            state.step += 1

        v = validate(state.model, corpus)
        elapsed = int(round((time.perf_counter() - t0) * 1000)) if record_time else 0
        rec = MetricsRecord(state.model.phase, e, state.step, temperature,
                            float(np.mean(losses)), v.loss, v.ppl, elapsed)
        state.metrics.append(rec)
        state.task_metrics.extend(
            {"epoch": e, "step": state.step, "task": tv.task, "tokens": tv.tokens,
             "valid_loss": tv.loss, "valid_ppl": tv.ppl, "accuracy": tv.accuracy}
            for tv in v.per_task
        )
        log.info("epoch %d step %d T=%.3f train %.4f valid ppl %.4f", e, state.step, temperature,
                 rec.train_loss, rec.valid_ppl)
        state.epoch += 1
        if cfg.train.target_ppl is not None and v.ppl <= cfg.train.target_ppl:
            state.stopped = True

        if out is not None:
            save_checkpoint(out / "checkpoint.json", state, cfg)
            if checkpoint_every and state.epoch % checkpoint_every == 0:
                (out / "checkpoints").mkdir(exist_ok=True)
                save_checkpoint(out / "checkpoints" / f"epoch_{state.epoch:04d}.json", state, cfg)
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            break

    if out is not None:
        write_run_files(out, state)
    return RunResult(state.model, state.metrics, state.usage, state.task_metrics, spe, n_dense)


def write_run_files(out: Path, state: RunState) -> None:
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in state.metrics:
            w.writerow(r.csv_row())
    with open(out / "task_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TASK_METRICS_COLUMNS)
        for r in state.task_metrics:
            w.writerow([r["epoch"], r["step"], r["task"], r["tokens"], f"{r['valid_loss']:.6f}",
                        f"{r['valid_ppl']:.6f}", f"{r['accuracy']:.6f}"])
    (out / "usage.json").write_text(json.dumps(state.usage.to_json()) + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(r["phase"], int(r["epoch"]), int(r["step"]), float(r["temperature"]),
                          float(r["train_loss"]), float(r["valid_loss"]), float(r["valid_ppl"]),
                          int(r["elapsed_ms"])) for r in rows]


def read_task_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "step": int(r["step"]), "task": int(r["task"]),
                 "tokens": int(r["tokens"]), "valid_loss": float(r["valid_loss"]),
                 "valid_ppl": float(r["valid_ppl"]), "accuracy": float(r["accuracy"])}
                for r in csv.DictReader(fh)]
