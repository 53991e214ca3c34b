"""Masking, task batches, AdamW, metrics, and the pre-training / fine-tuning loops."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .analysis import HEAD, NoValidDecoy, make_decoy, make_rearranged
from .corpus import LipidRecord
from .model import (Batch, ModelBundle, ModelConfig, decays, forward, init_params, loss,
                    save_checkpoint, value_and_grad)
from .tokenizer import (IGNORE_INDEX, MASK_ID, N_SPECIAL, PAIR_LEN, SINGLE_LEN, EncodedInput,
                        Vocab, encode_pair, encode_single)

log = logging.getLogger(__name__)

PRETRAIN_TASKS = ("mlm", "ntails", "connseq", "conntoken", "headtail", "pair")
HEADTAIL_HEAD, HEADTAIL_TAIL, HEADTAIL_OTHER = 0, 1, 2
MIN_TAILS = 2

_TRAIN_STREAM, _EVAL_STREAM = 0, 1


class LabelOutOfRange(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class IncompatibleCheckpoint(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class DegenerateTarget(ValueError):
    pass


class DegenerateInput(ValueError):
    pass


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

def _from_dict(cls, d: Mapping):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class MaskingConfig:
    select_prob: float = 0.15
    mask_frac: float = 0.80
    random_frac: float = 0.10
    keep_frac: float = 0.10

    def validate(self) -> None:
        if not 0.0 <= self.select_prob < 1.0:
            raise ValueError("select_prob must lie in [0, 1)")
        parts = (self.mask_frac, self.random_frac, self.keep_frac)
        if min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
            raise ValueError("mask/random/keep fractions must be non-negative and sum to 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "MaskingConfig":
        return _from_dict(cls, d)


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 10
    lr: float = 5e-5
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_grad_norm: float | None = None
    seed: int = 0
    task_weights: dict[str, float] = field(default_factory=dict)
    eval_batch_size: int = 256
    prefetch: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.warmup_steps < 0:
            raise ValueError("lr, weight_decay and warmup_steps must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return _from_dict(cls, d)


SECONDARY_WEIGHT = 0.1
DESK_WEIGHTS = {t: SECONDARY_WEIGHT for t in PRETRAIN_TASKS if t != "mlm"} | {"ntails": 0.3, "headtail": 0.3}

# Batch and epoch counts follow the published setup.  The desk learning rate is
# raised because a few hundred steps at 5e-5 barely move a freshly initialised
# model, and secondary tasks are down-weighted so they do not stall the MLM.
TRAIN_PRESETS = {
    "paper": dict(lr=5e-5),
    "desk": dict(lr=2e-3, task_weights=DESK_WEIGHTS),
}


# Fine-tuning starts from a trained encoder, so it peaks within a few epochs and then
# slowly overfits; the best validation epoch is kept.
FINETUNE_OVERRIDES = dict(epochs=10, lr=1e-3)


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    return TrainConfig(**copy.deepcopy({**TRAIN_PRESETS[name], **overrides}))


def _seed(*words: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(w) for w in words]))


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def apply_mlm_mask(ids: np.ndarray, mcfg: MaskingConfig, rng: np.random.Generator | int,
                   vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt non-special tokens for masked-token prediction.

    Returns ``(masked_ids, labels)`` where labels hold the original id at
    selected positions and ``IGNORE_INDEX`` elsewhere.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    ids = np.asarray(ids)
    maskable = ids >= N_SPECIAL
    selected = maskable & (rng.random(ids.shape) < mcfg.select_prob)
    roll = rng.random(ids.shape)
    to_mask = selected & (roll < mcfg.mask_frac)
    to_random = selected & (roll >= mcfg.mask_frac) & (roll < mcfg.mask_frac + mcfg.random_frac)
    out = ids.copy()
    out[to_mask] = MASK_ID
    out[to_random] = rng.integers(N_SPECIAL, vocab_size, size=int(to_random.sum()))
    labels = np.where(selected, ids, IGNORE_INDEX)
    return out, labels


# ---------------------------------------------------------------------------
# task data
# ---------------------------------------------------------------------------

def record_labels(rec: LipidRecord, tasks: Iterable[str], n_pos_classes: int = 64,
                  n_tail_classes: int = 5):
    """Per-atom token labels, their value on non-atom characters, and sequence labels."""
    tasks = set(tasks)
    atom_labels: dict[str, list[int]] = {}
    other: dict[str, int] = {}
    seq: dict[str, int] = {}
    if "headtail" in tasks:
        atom_labels["headtail"] = [HEADTAIL_HEAD if r == HEAD else HEADTAIL_TAIL for r in rec.atom_regions]
        other["headtail"] = HEADTAIL_OTHER
    if "conntoken" in tasks:
        atom_labels["conntoken"] = [int(i == rec.connecting_atom) for i in range(len(rec.atom_regions))]
    if "ntails" in tasks:
        cls = rec.n_tails - MIN_TAILS
        if not 0 <= cls < n_tail_classes:
            raise LabelOutOfRange(f"{rec.id}: {rec.n_tails} tails is outside the {n_tail_classes} classes")
        seq["ntails"] = cls
    if "connseq" in tasks:
        if not 0 <= rec.connecting_atom < n_pos_classes:
            raise LabelOutOfRange(
                f"{rec.id}: connecting atom ordinal {rec.connecting_atom} >= n_pos_classes {n_pos_classes}")
        seq["connseq"] = rec.connecting_atom
    return atom_labels, other, seq


def pair_partner(rec: LipidRecord, same: bool, seed: int) -> tuple[str, bool]:
    """Rearranged (``same``) or decoy partner; falls back to rearranged if no decoy exists."""
    if not same:
        try:
            return make_decoy(rec.canonical_smiles, seed), False
        except NoValidDecoy:
            log.warning("%s has no valid decoy; using a rearranged partner", rec.id)
    return make_rearranged(rec.canonical_smiles, seed), True


class TaskDataset:
    """Encodes records for a task set and yields masked, dynamically padded batches.

    Single-sequence encodings are cached; pair partners are redrawn every
    epoch from seeds derived from ``(seed, stream, epoch)``.
    """

    def __init__(self, records: Sequence[LipidRecord], vocab: Vocab, tasks: Iterable[str],
                 mcfg: MaskingConfig | None = None, seed: int = 0, n_pos_classes: int = 64,
                 n_tail_classes: int = 5):
        self.records = list(records)
        if not self.records:
            raise EmptyDataset("no records for this split")
        self.vocab = vocab
        self.tasks = tuple(tasks)
        self.mcfg = mcfg or MaskingConfig()
        self.seed = seed
        self.pair = "pair" in self.tasks
        self._labels = [record_labels(r, self.tasks, n_pos_classes, n_tail_classes) for r in self.records]
        self._single: list[EncodedInput] | None = None
        if not self.pair:
            self._single = [self._encode(i) for i in range(len(self.records))]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def max_len(self) -> int:
        return PAIR_LEN if self.pair else SINGLE_LEN

    def _encode(self, i: int, partner: str | None = None, same: bool | None = None) -> EncodedInput:
        atom_labels, other, seq = self._labels[i]
        s = self.records[i].canonical_smiles
        if partner is None:
            enc = encode_single(s, self.vocab, SINGLE_LEN, atom_labels, other)
        else:
            enc = encode_pair(s, partner, self.vocab, PAIR_LEN, same, atom_labels, other)
        enc.labels.update(seq)
        return enc

    def encodings(self, epoch: int, stream: int) -> list[EncodedInput]:
        if self._single is not None:
            return self._single
        rng = _seed(self.seed, stream, epoch, 1)
        coins = rng.random(len(self.records)) < 0.5
        seeds = rng.integers(0, 2**31, size=len(self.records))
        out = []
        for i, rec in enumerate(self.records):
            partner, same = pair_partner(rec, bool(coins[i]), int(seeds[i]))
            out.append(self._encode(i, partner, same))
        return out

    def batches(self, epoch: int, batch_size: int, shuffle: bool = True,
                stream: int = _TRAIN_STREAM) -> Iterator[Batch]:
        encs = self.encodings(epoch, stream)
        order = _seed(self.seed, stream, epoch, 0).permutation(len(encs)) if shuffle else np.arange(len(encs))
        for b, start in enumerate(range(0, len(order), batch_size)):
            batch = Batch.from_encoded([encs[i] for i in order[start:start + batch_size]])
            if "mlm" in self.tasks:
                rng = _seed(self.seed, stream, epoch, 2, b)
                ids, labels = apply_mlm_mask(batch.ids, self.mcfg, rng, len(self.vocab))
                if not (labels != IGNORE_INDEX).any():
                    ids, labels = apply_mlm_mask(batch.ids, self.mcfg, rng, len(self.vocab))
                batch.clean_ids = batch.ids
                batch.ids = ids
                batch.labels["mlm"] = labels
            yield batch


def build_task_batches(records: Sequence[LipidRecord], vocab: Vocab, tasks: Iterable[str],
                       mcfg: MaskingConfig | None = None, seed: int = 0, epoch: int = 0,
                       batch_size: int = 128, n_pos_classes: int = 64, shuffle: bool = True,
                       prefetch: int = 0) -> Iterator[Batch]:
    """One epoch of batches for ``tasks`` over ``records``."""
    data = TaskDataset(records, vocab, tasks, mcfg, seed, n_pos_classes)
    return prefetched(data.batches(epoch, batch_size, shuffle), prefetch)


def prefetched(it: Iterator, depth: int) -> Iterator:
    """Run ``it`` on a worker thread, ``depth`` items ahead; ``depth`` 0 is a no-op."""
    if depth <= 0:
        yield from it
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def work():
        try:
            for item in it:
                q.put(item)
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while (item := q.get()) is not done:
        if isinstance(item, BaseException):
            raise item
        yield item


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def learning_rate(step: int, total_steps: int, lr_init: float, warmup_steps: int = 0) -> float:
    """Linear decay from ``lr_init`` to 0 at ``total_steps``, after an optional linear warmup."""
    decay = max(0.0, 1.0 - step / total_steps) if total_steps > 0 else 0.0
    warm = min(1.0, (step + 1) / warmup_steps) if warmup_steps > 0 else 1.0
    return lr_init * decay * warm


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
               step: int, tcfg: TrainConfig, total_steps: int) -> float:
    """One in-place AdamW update (decoupled decay, bias-corrected); returns the lr used."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in tensor {name!r} at step {step}")
    lr = learning_rate(step, total_steps, tcfg.lr, tcfg.warmup_steps)
    state.t += 1
    b1, b2 = tcfg.beta1, tcfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if tcfg.weight_decay and decays(name):
            p *= 1.0 - lr * tcfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + tcfg.eps)
    return lr


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def compute_r2(pred: Sequence[float], target: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or t.size < 2:
        raise ValueError("pred and target need equal lengths >= 2")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DegenerateTarget("target has zero variance")
    return 1.0 - float(((t - p) ** 2).sum()) / ss_tot


def compute_pearson(pred: Sequence[float], target: Sequence[float]) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or t.size < 2:
        raise ValueError("pred and target need equal lengths >= 2")
    dp = p - p.mean()
    dt = t - t.mean()
    sp, st = float((dp * dp).sum()), float((dt * dt).sum())
    if sp == 0.0 or st == 0.0:
        raise DegenerateInput("pearson correlation needs non-constant inputs")
    return float(np.clip((dp * dt).sum() / math.sqrt(sp * st), -1.0, 1.0))


def _nll_stats(logits: np.ndarray, labels: np.ndarray) -> tuple[float, int, int]:
    K = logits.shape[-1]
    flat = logits.reshape(-1, K).astype(np.float64)
    y = np.asarray(labels).reshape(-1)
    sel = y != IGNORE_INDEX
    if not sel.any():
        return 0.0, 0, 0
    z = flat[sel]
    ys = y[sel]
    z = z - z.max(-1, keepdims=True)
    nll = np.log(np.exp(z).sum(-1)) - z[np.arange(len(ys)), ys]
    return float(nll.sum()), int(sel.sum()), int((z.argmax(-1) == ys).sum())


def junction_hits(logits: np.ndarray, labels: np.ndarray) -> tuple[int, int]:
    """Sequences whose highest-scoring atom token is the labeled connecting atom."""
    score = logits[..., 1].astype(np.float64) - logits[..., 0]
    score = np.where(labels == IGNORE_INDEX, -np.inf, score)
    valid = (labels == 1).any(-1)
    best = score.argmax(-1)
    hits = labels[np.arange(len(best)), best] == 1
    return int((hits & valid).sum()), int(valid.sum())


@dataclass
class _Accumulator:
    nll: dict[str, float] = field(default_factory=dict)
    count: dict[str, int] = field(default_factory=dict)
    correct: dict[str, int] = field(default_factory=dict)
    preds: list[np.ndarray] = field(default_factory=list)
    targets: list[np.ndarray] = field(default_factory=list)

    def add(self, key: str, nll: float, n: int, correct: int = 0) -> None:
        self.nll[key] = self.nll.get(key, 0.0) + nll
        self.count[key] = self.count.get(key, 0) + n
        self.correct[key] = self.correct.get(key, 0) + correct


def evaluate(params, cfg: ModelConfig, batches: Iterable[Batch],
             weights: Mapping[str, float] | None = None) -> dict:
    """Losses and accuracies per task over ``batches`` (evaluation mode).

    The masked-token head is scored on the corrupted input; every other head
    is scored on the clean sequence.
    """
    weights = weights or {}
    acc = _Accumulator()
    for batch in batches:
        outputs, _ = forward(params, cfg, batch)
        if batch.clean_ids is not None and set(batch.labels) - {"mlm"}:
            clean = Batch(batch.clean_ids, batch.attention_mask, batch.segment_ids)
            clean_out, _ = forward(params, cfg, clean)
            outputs = {**clean_out, "mlm": outputs["mlm"]}
        for head, labels in batch.labels.items():
            if head not in outputs:
                continue
            if head == "regression":
                pred = outputs[head].astype(np.float64)
                acc.preds.append(pred)
                acc.targets.append(np.asarray(labels, dtype=np.float64))
                acc.add(head, float(((pred - labels) ** 2).sum()), len(pred))
                continue
            acc.add(head, *_nll_stats(outputs[head], labels))
            if head == "conntoken":
                hits, n = junction_hits(outputs[head], labels)
                acc.add("conntoken_seq", 0.0, n, hits)
    losses = {k: acc.nll[k] / acc.count[k] for k in acc.nll if acc.count[k] and k != "conntoken_seq"}
    accuracy = {k: acc.correct[k] / acc.count[k] for k in acc.count
                if acc.count[k] and k != "regression"}
    result = {"loss": losses, "total": sum(weights.get(k, 1.0) * v for k, v in losses.items()),
              "accuracy": accuracy}
    if acc.preds:
        result["pred"] = np.concatenate(acc.preds)
        result["target"] = np.concatenate(acc.targets)
    return result


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


@dataclass
class MetricsReport:
    header: dict
    epochs: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(_plain(self.header.get("config", {})), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def trajectory(self) -> list[dict]:
        """Epoch records without wall-clock fields, for reproducibility comparisons."""
        return [{k: v for k, v in e.items() if k != "wall_clock_s"} for e in self.epochs]

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        lines = [{"header": {**self.header, "fingerprint": self.fingerprint}}]
        lines += self.epochs
        if self.summary:
            lines.append({"summary": self.summary})
        path.write_text("".join(json.dumps(_plain(x), sort_keys=True) + "\n" for x in lines),
                        encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "MetricsReport":
        header, epochs, summary = {}, [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                if "header" in obj:
                    header = obj["header"]
                elif "summary" in obj:
                    summary = obj["summary"]
                else:
                    epochs.append(obj)
        return cls(header, epochs, summary)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    cfg: ModelConfig
    vocab: Vocab
    report: MetricsReport
    best_epoch: int
    extra: dict = field(default_factory=dict)

    @property
    def bundle(self) -> ModelBundle:
        return ModelBundle(self.params, self.cfg, self.vocab, self.extra)


def _copy(params):
    return {k: v.copy() for k, v in params.items()}


def _run_epoch(params, cfg, batches, tcfg, state, step, total_steps, rng, heads=None):
    sums: dict[str, float] = {}
    n = 0
    lr = 0.0
    for batch in batches:
        result, grads, _ = value_and_grad(params, cfg, batch, tcfg.task_weights, train=True, rng=rng,
                                          heads=heads)
        if tcfg.max_grad_norm:
            clip_gradients(grads, tcfg.max_grad_norm)
        lr = adamw_step(params, grads, state, step, tcfg, total_steps)
        step += 1
        n += 1
        for k, v in result.per_task.items():
            sums[k] = sums.get(k, 0.0) + v
        sums["total"] = sums.get("total", 0.0) + result.total
    return {k: v / max(n, 1) for k, v in sums.items()}, step, lr


def _split_records(records, manifest):
    by_id = {r.id: r for r in records}
    return {name: [by_id[i] for i in ids if i in by_id] for name, ids in manifest.items()}


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

def pretrain(records: Sequence[LipidRecord], manifest: Mapping[str, Sequence[str]], vocab: Vocab,
             model_cfg: ModelConfig, tasks: Sequence[str], tcfg: TrainConfig,
             mcfg: MaskingConfig | None = None, out_dir: str | os.PathLike | None = None,
             on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Masked-token pre-training plus any secondary tasks.

    Keeps the parameters with the lowest validation total loss; when
    ``out_dir`` is given, writes ``metrics.jsonl`` and ``checkpoint/`` there.
    """
    tasks = tuple(dict.fromkeys(tasks))
    if "mlm" not in tasks:
        raise ValueError("pre-training always includes the mlm task")
    unknown = set(tasks) - set(PRETRAIN_TASKS)
    if unknown:
        raise ValueError(f"unknown tasks: {sorted(unknown)}")
    tcfg.validate()
    mcfg = mcfg or MaskingConfig()
    mcfg.validate()
    splits = _split_records(records, manifest)
    mk = lambda name: TaskDataset(splits.get(name, []), vocab, tasks, mcfg, tcfg.seed,
                                  model_cfg.n_pos_classes, model_cfg.n_tail_classes)
    train, val = mk("train"), mk("validation")
    cfg = replace(model_cfg, heads=tasks, vocab_size=len(vocab), max_len=train.max_len)
    params = init_params(cfg)
    state = AdamState.zeros(params)
    steps_per_epoch = math.ceil(len(train) / tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.epochs
    header = {"kind": "pretrain", "tasks": list(tasks), "n_train": len(train), "n_validation": len(val),
              "config": {"model": asdict(cfg), "training": asdict(tcfg), "masking": asdict(mcfg)}}
    report = MetricsReport(header)
    rng = _seed(tcfg.seed, 99)
    best, best_params, best_epoch, step = math.inf, _copy(params), 0, 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        batches = prefetched(train.batches(epoch, tcfg.batch_size), tcfg.prefetch)
        train_loss, step, lr = _run_epoch(params, cfg, batches, tcfg, state, step, total_steps, rng)
        ev = evaluate(params, cfg, val.batches(0, tcfg.eval_batch_size, False, _EVAL_STREAM),
                      tcfg.task_weights)
        record = {"epoch": epoch, "step": step, "lr": lr, "train": train_loss,
                  "validation": {"loss": ev["loss"], "total": ev["total"], "accuracy": ev["accuracy"]},
                  "wall_clock_s": round(time.perf_counter() - t0, 3)}
        report.epochs.append(record)
        log.info("epoch %d: %s", epoch, json.dumps(_plain(record["validation"])))
        if on_epoch:
            on_epoch(record)
        if ev["total"] < best:
            best, best_params, best_epoch = ev["total"], _copy(params), epoch
            if out is not None:
                save_checkpoint(best_params, cfg, vocab, out / "checkpoint",
                                {"tasks": list(tasks), "epoch": epoch, "validation_total": best})
    report.summary = {"best_epoch": best_epoch, "best_validation_total": best}
    if splits.get("test"):
        test = mk("test")
        ev = evaluate(best_params, cfg, test.batches(0, tcfg.eval_batch_size, False, _EVAL_STREAM),
                      tcfg.task_weights)
        report.summary["test"] = {"loss": ev["loss"], "total": ev["total"], "accuracy": ev["accuracy"]}
    if out is not None:
        report.write(out / "metrics.jsonl")
    return TrainResult(best_params, cfg, vocab, report, best_epoch, {"tasks": list(tasks)})


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def _regression_batches(encs: Sequence[EncodedInput], values: np.ndarray, idx: np.ndarray,
                        batch_size: int) -> Iterator[Batch]:
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        batch = Batch.from_encoded([encs[i] for i in chunk])
        batch.labels["regression"] = values[chunk].astype(np.float32)
        yield batch


def random_split(n: int, fractions: Sequence[float], seed: int) -> dict[str, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    return {"train": order[:n_train], "validation": order[n_train:n_train + n_val],
            "test": order[n_train + n_val:]}


def _score(pred: np.ndarray, target: np.ndarray) -> tuple[float, float | None]:
    """R² and Pearson; a constant target scores R² 0 and no correlation."""
    try:
        r2 = compute_r2(pred, target)
    except DegenerateTarget:
        log.warning("validation target is constant; reporting R^2 = 0")
        return 0.0, None
    try:
        return r2, compute_pearson(pred, target)
    except DegenerateInput:
        return r2, None


def finetune(encoder: ModelBundle | None, smiles: Sequence[str], values: Sequence[float],
             tcfg: TrainConfig, split: Mapping[str, Sequence[int]] | None = None,
             fractions: Sequence[float] = (0.8, 0.1, 0.1), vocab: Vocab | None = None,
             model_cfg: ModelConfig | None = None, out_dir: str | os.PathLike | None = None,
             on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train the regression head (and encoder) on per-SMILES values.

    ``encoder`` supplies pre-trained weights; pass ``None`` with ``vocab`` and
    ``model_cfg`` for a randomly initialised baseline.  Targets are z-scored
    on the training split.  Keeps the epoch with the highest validation R².
    """
    if len(smiles) != len(values):
        raise ValueError("smiles and values differ in length")
    if not smiles:
        raise EmptyDataset("fine-tuning data is empty")
    tcfg.validate()
    if encoder is not None:
        if encoder.cfg.max_len != SINGLE_LEN:
            raise IncompatibleCheckpoint(
                f"checkpoint has max_len {encoder.cfg.max_len}; fine-tuning encodes single "
                f"sequences of {SINGLE_LEN} positions")
        vocab, base_cfg = encoder.vocab, encoder.cfg
    else:
        if vocab is None or model_cfg is None:
            raise ValueError("a random encoder needs vocab and model_cfg")
        base_cfg = replace(model_cfg, vocab_size=len(vocab), max_len=SINGLE_LEN)
    cfg = replace(base_cfg, heads=("regression",))
    fresh = init_params(cfg, seed=tcfg.seed)
    params = {k: v for k, v in fresh.items() if k.startswith("reg.")}
    source = encoder.params if encoder is not None else fresh
    for name, value in fresh.items():
        if not name.startswith("reg."):
            params[name] = source.get(name, value).astype(np.float32).copy()

    try:
        encs = [encode_single(s, vocab, SINGLE_LEN) for s in smiles]
    except ValueError as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc
    y = np.asarray(values, dtype=np.float64)
    parts = ({k: np.asarray(v, dtype=np.int64) for k, v in split.items()} if split is not None
             else random_split(len(smiles), fractions, tcfg.seed))
    train_idx, val_idx = parts["train"], parts.get("validation", np.zeros(0, np.int64))
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise EmptyDataset("fine-tuning needs non-empty train and validation splits")
    mu = float(y[train_idx].mean())
    sd = float(y[train_idx].std()) or 1.0
    z = (y - mu) / sd

    state = AdamState.zeros(params)
    total_steps = math.ceil(len(train_idx) / tcfg.batch_size) * tcfg.epochs
    header = {"kind": "finetune", "n_train": int(len(train_idx)), "n_validation": int(len(val_idx)),
              "target_mean": mu, "target_std": sd, "pretrained": encoder is not None,
              "config": {"model": asdict(cfg), "training": asdict(tcfg)}}
    report = MetricsReport(header)
    rng = _seed(tcfg.seed, 98)
    best_r2, best_params, best_epoch, best_pearson, step = -math.inf, _copy(params), 0, None, 0
    extra = {"target_mean": mu, "target_std": sd}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def predict_split(p, idx):
        ev = evaluate(p, cfg, _regression_batches(encs, z, idx, tcfg.eval_batch_size))
        return ev["pred"] * sd + mu, ev["loss"]["regression"]

    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        order = train_idx[_seed(tcfg.seed, _TRAIN_STREAM, epoch, 0).permutation(len(train_idx))]
        train_loss, step, lr = _run_epoch(params, cfg, _regression_batches(encs, z, order, tcfg.batch_size),
                                          tcfg, state, step, total_steps, rng)
        pred, val_loss = predict_split(params, val_idx)
        r2, pearson = _score(pred, y[val_idx])
        record = {"epoch": epoch, "step": step, "lr": lr, "train": train_loss,
                  "validation": {"loss": {"regression": val_loss}, "r2": r2, "pearson": pearson},
                  "wall_clock_s": round(time.perf_counter() - t0, 3)}
        report.epochs.append(record)
        log.info("epoch %d: r2 %.4f", epoch, r2)
        if on_epoch:
            on_epoch(record)
        if r2 > best_r2:
            best_r2, best_params, best_epoch, best_pearson = r2, _copy(params), epoch, pearson
            if out is not None:
                save_checkpoint(best_params, cfg, vocab, out / "checkpoint",
                                {**extra, "epoch": epoch, "validation_r2": r2})
    report.summary = {"best_epoch": best_epoch, "best_r2": best_r2, "pearson_at_best": best_pearson,
                      "best_pearson": max((e["validation"]["pearson"] for e in report.epochs
                                           if e["validation"]["pearson"] is not None), default=None)}
    test_idx = parts.get("test", np.zeros(0, np.int64))
    if len(test_idx) >= 2:
        pred, _ = predict_split(best_params, test_idx)
        r2, pearson = _score(pred, y[test_idx])
        report.summary["test"] = {"r2": r2, "pearson": pearson}
    if out is not None:
        report.write(out / "metrics.jsonl")
    return TrainResult(best_params, cfg, vocab, report, best_epoch, extra)


def predict(bundle: ModelBundle, smiles: Sequence[str], batch_size: int = 256) -> np.ndarray:
    """Regression predictions in target units (undoing the stored z-scoring)."""
    mu = float(bundle.extra.get("target_mean", 0.0))
    sd = float(bundle.extra.get("target_std", 1.0))
    encs = [encode_single(s, bundle.vocab, SINGLE_LEN) for s in smiles]
    out = []
    for start in range(0, len(encs), batch_size):
        outputs, _ = forward(bundle.params, bundle.cfg, Batch.from_encoded(encs[start:start + batch_size]),
                             heads=("regression",))
        out.append(outputs["regression"].astype(np.float64))
    return np.concatenate(out) * sd + mu if out else np.zeros(0)


# ---------------------------------------------------------------------------
# dataset-size sweep
# ---------------------------------------------------------------------------

def scaling_sweep(records: Sequence[LipidRecord], manifest: Mapping[str, Sequence[str]], vocab: Vocab,
                  sizes: Sequence[int], model_cfg: ModelConfig, tasks: Sequence[str],
                  pre_tcfg: TrainConfig, ft_tcfg: TrainConfig,
                  ft_smiles: Sequence[str], ft_values: Sequence[float],
                  ft_split: Mapping[str, Sequence[int]] | None = None,
                  out_dir: str | os.PathLike | None = None) -> list[dict]:
    """Pre-train on the first ``n`` records for each size, then fine-tune identically."""
    rows = []
    for n in sizes:
        subset = list(records[:n])
        keep = {r.id for r in subset}
        sub_manifest = {k: [i for i in ids if i in keep] for k, ids in manifest.items()}
        size_dir = Path(out_dir) / f"size_{n}" if out_dir is not None else None
        pre = pretrain(subset, sub_manifest, vocab, model_cfg, tasks, pre_tcfg,
                       out_dir=size_dir / "pretrain" if size_dir else None)
        ft = finetune(pre.bundle, ft_smiles, ft_values, ft_tcfg, split=ft_split,
                      out_dir=size_dir / "finetune" if size_dir else None)
        rows.append({"size": n, "best_r2": ft.report.summary["best_r2"],
                     "pearson_at_best": ft.report.summary["pearson_at_best"],
                     "best_epoch": ft.best_epoch,
                     "pretrain_best_validation_total": pre.report.summary["best_validation_total"]})
        log.info("size %d: best r2 %.4f", n, rows[-1]["best_r2"])
    return rows
