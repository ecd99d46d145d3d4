"""Training loop for the joint objective, evaluation and run records."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import backward
from .corpus import CRUCIAL_RATIONALE, NOISE_RATIONALE, PIN_PLANTED, Corpus
from .losses import ConfigError, LossConfig, joint_loss
from .model import ModelConfig, NonFiniteError, TextCNN, Vocabulary
from .optim import Adam
from .salience import word_gradients

log = logging.getLogger(__name__)

ALL_RATIONALE = "ALL_RATIONALE"
NON_RATIONALE = "NON_RATIONALE"
TRACE_GROUPS = (PIN_PLANTED, CRUCIAL_RATIONALE, NOISE_RATIONALE, ALL_RATIONALE, NON_RATIONALE)


@dataclass
class TrainConfig:
    batch_size: int = 512
    epochs: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    method: str = "none"
    lam: float = 1.0
    threshold: float = 0.9
    seed: int = 0
    selection_metric: str = "accuracy"
    track_salience: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0, got {self.epochs}")
        for name in ("lr", "adam_eps", "weight_decay"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be > 0, got {getattr(self, name)}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1/beta2: must lie in (0, 1)")
        if self.selection_metric not in ("accuracy", "f1"):
            raise ConfigError(f"selection_metric: expected accuracy or f1, got {self.selection_metric!r}")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(method=self.method, lam=self.lam, threshold=self.threshold, gate_seed=self.seed)


@dataclass
class Encoded:
    index: int
    id: str
    ids: List[int]
    label: int
    mask: List[int]
    tags: Optional[List[str]]


def encode(corpus: Corpus, vocab: Vocabulary) -> List[Encoded]:
    return [Encoded(i, inst.id, vocab.encode(inst.tokens), inst.label, list(inst.mask), inst.tags)
            for i, inst in enumerate(corpus)]


@dataclass
class RunRecord:
    seed: int
    config: Dict
    steps: List[Dict] = field(default_factory=list)
    epochs: List[Dict] = field(default_factory=list)
    final: Dict = field(default_factory=dict)
    best_epoch: int = 0
    status: str = "ok"

    def trace(self, key: str) -> List[Optional[float]]:
        """Per-step series for a step metric or a salience group name."""
        if key in TRACE_GROUPS:
            return [st.get("salience", {}).get(key) for st in self.steps]
        return [st.get(key) for st in self.steps]

    def to_lines(self) -> List[str]:
        lines = [json.dumps({"kind": "header", "seed": self.seed, "config": self.config}, sort_keys=True)]
        lines += [json.dumps({"kind": "step", **st}, sort_keys=True) for st in self.steps]
        lines += [json.dumps({"kind": "epoch", **ep}, sort_keys=True) for ep in self.epochs]
        lines.append(json.dumps({"kind": "final", "best_epoch": self.best_epoch, "status": self.status,
                                 **self.final}, sort_keys=True))
        return lines

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        rec = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                row = json.loads(line)
                kind = row.pop("kind", None)
                if kind == "header":
                    rec = cls(seed=row["seed"], config=row["config"])
                elif rec is None:
                    raise ValueError(f"{path}:{lineno}: record before header")
                elif kind == "step":
                    rec.steps.append(row)
                elif kind == "epoch":
                    rec.epochs.append(row)
                elif kind == "final":
                    rec.best_epoch = row.pop("best_epoch")
                    rec.status = row.pop("status", "ok")
                    rec.final = row
                else:
                    raise ValueError(f"{path}:{lineno}: unknown record kind {kind!r}")
        if rec is None:
            raise ValueError(f"{path}: empty run log")
        return rec

    def __eq__(self, other) -> bool:
        return isinstance(other, RunRecord) and self.to_lines() == other.to_lines()


# ---------------------------------------------------------------------------
# evaluation

def classification_metrics(gold: Sequence[int], pred: Sequence[int], positive: int = 1) -> Dict[str, float]:
    """Accuracy plus precision/recall/F1 for ``positive`` (0 when undefined)."""
    gold = np.asarray(gold)
    pred = np.asarray(pred)
    if gold.size == 0:
        raise ValueError("cannot evaluate an empty corpus")
    out = {"accuracy": float((gold == pred).mean())}
    for cls in sorted(set(gold.tolist()) | set(pred.tolist()) | {positive}):
        tp = float(((pred == cls) & (gold == cls)).sum())
        fp = float(((pred == cls) & (gold != cls)).sum())
        fn = float(((pred != cls) & (gold == cls)).sum())
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        out[f"precision_{cls}"], out[f"recall_{cls}"], out[f"f1_{cls}"] = p, r, f
    out["precision"] = out[f"precision_{positive}"]
    out["recall"] = out[f"recall_{positive}"]
    out["f1"] = out[f"f1_{positive}"]
    return out


def predict(model: TextCNN, data: Sequence[Encoded], batch_size: int = 256) -> np.ndarray:
    preds = []
    for lo in range(0, len(data), batch_size):
        preds.append(model.predict([d.ids for d in data[lo:lo + batch_size]]))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def evaluate(model: TextCNN, data: Sequence[Encoded]) -> Dict[str, float]:
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty corpus")
    return classification_metrics([d.label for d in data], predict(model, data))


def _group_sums(s, valid, masks, tags):
    sums = {g: 0.0 for g in TRACE_GROUPS}
    counts = {g: 0 for g in TRACE_GROUPS}
    for b in range(s.shape[0]):
        n = int(valid[b].sum())
        row = s[b, :n]
        z = masks[b, :n]
        sums[ALL_RATIONALE] += float(row[z > 0].sum())
        counts[ALL_RATIONALE] += int((z > 0).sum())
        sums[NON_RATIONALE] += float(row[z == 0].sum())
        counts[NON_RATIONALE] += int((z == 0).sum())
        if tags[b] is None:
            continue
        for j, t in enumerate(tags[b][:n]):
            if t in sums:
                sums[t] += float(row[j])
                counts[t] += 1
    return sums, counts


def _means(sums, counts) -> Dict[str, Optional[float]]:
    return {g: (sums[g] / counts[g] if counts[g] else None) for g in TRACE_GROUPS}


def group_salience(s: np.ndarray, valid: np.ndarray, masks: np.ndarray,
                   tags: Sequence[Optional[Sequence[str]]]) -> Dict[str, Optional[float]]:
    """Pooled mean salience of each word group over a padded batch."""
    return _means(*_group_sums(s, valid, masks, tags))


def analysis_group_salience(model: TextCNN, data: Sequence[Encoded], batch_size: int = 256) -> Dict[str, Optional[float]]:
    """Dropout-free, predicted-class salience pooled by group over ``data``."""
    sums = {g: 0.0 for g in TRACE_GROUPS}
    counts = {g: 0 for g in TRACE_GROUPS}
    for lo in range(0, len(data), batch_size):
        chunk = data[lo:lo + batch_size]
        res = word_gradients(model, [d.ids for d in chunk], target="predicted")
        masks = np.zeros(res.valid.shape)
        for b, d in enumerate(chunk):
            masks[b, : len(d.mask)] = d.mask
        ps, pc = _group_sums(res.s.data, res.valid, masks, [d.tags for d in chunk])
        for g in TRACE_GROUPS:
            sums[g] += ps[g]
            counts[g] += pc[g]
    return _means(sums, counts)


# ---------------------------------------------------------------------------
# training

def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def make_optimizer(model: TextCNN, config: TrainConfig) -> Adam:
    names = [n for n, _ in model.named_parameters()]
    return Adam(
        model.parameters(),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
        decay=[n != "embedding" for n in names],
    )


def train_step(
    batch: Sequence[Encoded],
    model: TextCNN,
    optimizer: Adam,
    config: TrainConfig,
    step: int,
) -> Dict:
    """One joint-objective update on ``batch``; returns the step metrics."""
    if len(batch) == 0:
        raise ValueError("train_step: empty batch")
    loss_cfg = config.loss_config()
    res = joint_loss(
        model,
        [d.ids for d in batch],
        [d.label for d in batch],
        [d.mask for d in batch],
        loss_cfg,
        dropout_active=True,
        dropout_seed=derive_seed(config.seed, step, 17),
        step=step,
        instance_index=[d.index for d in batch],
        track_salience=config.track_salience,
    )
    total = float(res.total.data)
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite loss at step {step}; instances {[d.id for d in batch]}")
    params = model.parameters()
    grads = backward(res.total, params)
    optimizer.step([grads[p].data for p in params])

    metrics: Dict = {"step": step, "ce": float(res.ce.data), "aux": float(res.aux.data) if res.aux is not None else 0.0,
                     "loss": total}
    terms = res.terms
    if terms is not None and terms.gates is not None:
        n_r = terms.n_with_rationales
        metrics["gate_rate"] = float(terms.gates.sum() / n_r) if n_r else 0.0
    if terms is not None:
        metrics["aux_instances"] = int(terms.eligible.sum())
    if res.salience is not None:
        sal = res.salience
        metrics["salience"] = group_salience(sal.s.data, sal.valid, res.masks, [d.tags for d in batch])
        metrics["degenerate"] = int(sal.degenerate.sum())
    return metrics


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_run(
    train: Corpus,
    valid: Corpus,
    test: Corpus,
    config: TrainConfig,
    model_config: Optional[Dict] = None,
    vocab: Optional[Vocabulary] = None,
    embeddings: Optional[np.ndarray] = None,
) -> Tuple[RunRecord, TextCNN, Vocabulary]:
    """Train, select the best epoch on validation, score it on test.

    ``model_config`` holds :class:`ModelConfig` overrides (vocabulary size
    and seed are filled in). Returns ``(record, best model, vocabulary)``.
    """
    if len(train) == 0:
        raise ValueError("train_run: empty training corpus")
    vocab = vocab if vocab is not None else Vocabulary.build(inst.tokens for inst in train)
    mc = dict(model_config or {})
    mc["vocab_size"] = len(vocab)
    mc.setdefault("seed", derive_seed(config.seed, 1))
    model = TextCNN(ModelConfig(**mc), embeddings=embeddings)
    optimizer = make_optimizer(model, config)

    tr, va, te = encode(train, vocab), encode(valid, vocab), encode(test, vocab)
    record = RunRecord(seed=config.seed, config={"train": asdict(config), "model": asdict(model.config)})
    best_state = model.get_state()
    best_score = -np.inf
    step = 0
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng(derive_seed(config.seed, epoch, 23))
        ce_sum = 0.0
        n_batches = 0
        for idx in _batches(len(tr), config.batch_size, rng):
            metrics = train_step([tr[i] for i in idx], model, optimizer, config, step)
            metrics["epoch"] = epoch
            record.steps.append(metrics)
            ce_sum += metrics["ce"]
            n_batches += 1
            step += 1
        ep = {"epoch": epoch, "train_ce": ce_sum / max(1, n_batches)}
        if va:
            vm = evaluate(model, va)
            ep["valid"] = vm
            score = vm[config.selection_metric]
            if score > best_score:
                best_score = score
                best_state = model.get_state()
                record.best_epoch = epoch
        else:
            best_state = model.get_state()
            record.best_epoch = epoch
        record.epochs.append(ep)
        log.debug("epoch %d: %s", epoch, ep)

    model.set_state(best_state)
    if te:
        record.final["test"] = evaluate(model, te)
        if config.track_salience:
            record.final["test_salience"] = analysis_group_salience(model, te)
    if va:
        record.final["valid"] = evaluate(model, va)
    if config.track_salience:
        # training masks carry the injected noise tags; held-out data never does
        record.final["train_salience"] = analysis_group_salience(model, tr)
    record.final["unk_count"] = model.unk_count
    return record, model, vocab
