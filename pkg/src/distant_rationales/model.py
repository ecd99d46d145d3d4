"""CNN sentence classifier: embeddings, multi-width convolutions, a tanh
feed-forward layer, attention pooling and a softmax output layer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import (
    Tensor, add, concat, conv1d, getitem, mask_mul, matmul, mul, no_grad, reshape, softmax, sum_, tanh,
)

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
CHECKPOINT_VERSION = 1
_NEG_INF = -1e30


class NonFiniteError(FloatingPointError):
    """Activations or losses went non-finite."""


@dataclass
class ModelConfig:
    vocab_size: int
    embedding_dim: int = 300
    kernel_widths: Tuple[int, ...] = (2, 3, 4, 5)
    kernels_per_width: int = 50
    hidden_dim: int = 200
    n_classes: int = 2
    dropout: float = 0.5
    seed: int = 0
    init_scale: float = 0.1
    extra_feature_dim: int = 0

    def __post_init__(self):
        self.kernel_widths = tuple(int(w) for w in self.kernel_widths)
        if self.vocab_size < 2:
            raise ValueError("vocab_size must cover at least the pad and unk rows")
        if not self.kernel_widths or min(self.kernel_widths) < 1:
            raise ValueError("kernel widths must all be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    @property
    def max_width(self) -> int:
        return max(self.kernel_widths)


class Vocabulary:
    """Token to row-index map with reserved pad and unknown rows."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: List[str] = [PAD, UNK]
        self.stoi: Dict[str, int] = {PAD: PAD_ID, UNK: UNK_ID}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counts: Dict[str, int] = {}
        for sent in sentences:
            for tok in sent:
                key = tok.lower()
                counts[key] = counts.get(key, 0) + 1
        return cls(sorted(t for t, c in counts.items() if c >= min_count))

    def add(self, token: str) -> int:
        token = token.lower()
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(t.lower(), UNK_ID) for t in tokens]

    def __len__(self) -> int:
        return len(self.itos)


class TextCNN:
    """Parameters plus the forward computation.

    Sentences in a batch are right-padded with zero vectors to
    ``max(max kernel width, longest sentence)``; padded positions are masked
    out of attention. Convolutions use same-style padding so each token keeps
    one feature column.
    """

    def __init__(self, config: ModelConfig, embeddings: Optional[np.ndarray] = None):
        self.config = config
        self.params: Dict[str, Tensor] = _init_params(config, embeddings)
        self.unk_count = 0

    # -- parameter handling --------------------------------------------
    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def get_state(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def set_state(self, state: Dict[str, np.ndarray]) -> None:
        for k, arr in state.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != arr.shape:
                raise ValueError(f"parameter {k!r}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    # -- forward ---------------------------------------------------------
    def pad_batch(self, token_ids: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
        """Right-pad id sequences; returns ``(ids, valid)`` both ``(B, L)``."""
        if len(token_ids) == 0:
            raise ValueError("empty batch")
        lengths = [len(s) for s in token_ids]
        if min(lengths) == 0:
            raise ValueError("empty token sequence")
        width = max(self.config.max_width, max(lengths))
        ids = np.full((len(token_ids), width), PAD_ID, dtype=np.int64)
        valid = np.zeros((len(token_ids), width))
        vocab = self.config.vocab_size
        for b, seq in enumerate(token_ids):
            arr = np.asarray(seq, dtype=np.int64)
            oov = (arr >= vocab) | (arr < 0)
            if oov.any():
                self.unk_count += int(oov.sum())
                arr = np.where(oov, UNK_ID, arr)
            ids[b, : len(arr)] = arr
            valid[b, : len(arr)] = 1.0
        return ids, valid

    def embed(self, ids: np.ndarray) -> Tensor:
        """Look up rows of the embedding table; ``ids`` is ``(B, L)`` or ``(L,)``."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("empty token sequence")
        if ids.max() >= self.config.vocab_size or ids.min() < 0:
            bad = (ids >= self.config.vocab_size) | (ids < 0)
            self.unk_count += int(bad.sum())
            ids = np.where(bad, UNK_ID, ids)
        return getitem(self.params["embedding"], ids)

    def forward(
        self,
        embedded: Tensor,
        valid: np.ndarray,
        dropout_active: bool = False,
        seed: Optional[int] = None,
    ) -> Tuple[Tensor, Tensor]:
        """Batched forward over ``embedded`` ``(B, L, D)``.

        Returns ``(logits (B, C), attention (B, L))``.
        """
        cfg = self.config
        p = self.params
        valid = np.asarray(valid, dtype=np.float64)
        if embedded.shape[-2] < cfg.max_width:
            raise ValueError(f"sequence length {embedded.shape[-2]} shorter than widest kernel {cfg.max_width}")
        x = mask_mul(embedded, valid[..., None])
        feats = [tanh(conv1d(x, p[f"conv{w}.weight"], p[f"conv{w}.bias"], padding="same"))
                 for w in cfg.kernel_widths]
        h = concat(feats, axis=-1) if len(feats) > 1 else feats[0]
        h = tanh(add(matmul(h, p["ff.weight"]), p["ff.bias"]))
        if dropout_active and cfg.dropout > 0:
            rng = np.random.default_rng(seed)
            keep = (rng.random(h.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            h = mask_mul(h, keep)
        scores = reshape(matmul(h, p["attn.vector"]), valid.shape)
        scores = add(scores, Tensor(np.where(valid > 0, 0.0, _NEG_INF)))
        attn = softmax(scores, axis=-1)
        pooled = sum_(mul(h, reshape(attn, attn.shape + (1,))), axis=-2)
        logits = add(matmul(pooled, p["out.weight"]), p["out.bias"])
        if not np.all(np.isfinite(logits.data)):
            raise NonFiniteError(
                "non-finite logits; parameter norms: "
                + ", ".join(f"{k}={np.linalg.norm(v.data):.3g}" for k, v in p.items())
            )
        return logits, attn

    def logits(self, token_ids: Sequence[Sequence[int]]) -> np.ndarray:
        """Dropout-free logits for encoded sentences (no lineage kept)."""
        ids, valid = self.pad_batch(token_ids)
        with no_grad():
            logits, _ = self.forward(self.embed(ids), valid)
        return logits.data

    def predict_proba(self, token_ids: Sequence[Sequence[int]]) -> np.ndarray:
        z = self.logits(token_ids)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, token_ids: Sequence[Sequence[int]]) -> np.ndarray:
        return np.argmax(self.logits(token_ids), axis=1)

    # -- persistence -----------------------------------------------------
    def save(self, path, vocab: Optional[Vocabulary] = None) -> None:
        header = {
            "format": "distant-rationales-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
            "vocab": vocab.itos if vocab is not None else None,
        }
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path) -> Tuple["TextCNN", Optional[Vocabulary]]:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("format") != "distant-rationales-checkpoint":
                raise ValueError(f"{path}: not a checkpoint file")
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
            cfg = ModelConfig(**header["config"])
            model = cls(cfg)
            model.set_state({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        vocab = None
        if header.get("vocab") is not None:
            vocab = Vocabulary()
            for tok in header["vocab"][2:]:
                vocab.add(tok)
        return model, vocab


def _init_params(config: ModelConfig, embeddings: Optional[np.ndarray]) -> Dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    a = config.init_scale

    def uni(*shape):
        return rng.uniform(-a, a, size=shape)

    d = config.embedding_dim + config.extra_feature_dim
    params: Dict[str, np.ndarray] = {}
    if embeddings is not None:
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape != (config.vocab_size, config.embedding_dim):
            raise ValueError(
                f"embedding table shape {embeddings.shape} != {(config.vocab_size, config.embedding_dim)}"
            )
        table = embeddings.copy()
        _ = uni(config.vocab_size, config.embedding_dim)  # keep the stream aligned
    else:
        table = uni(config.vocab_size, config.embedding_dim)
    table[PAD_ID] = 0.0
    params["embedding"] = table
    for w in config.kernel_widths:
        params[f"conv{w}.weight"] = uni(w, d, config.kernels_per_width)
        params[f"conv{w}.bias"] = uni(config.kernels_per_width)
    n_feat = config.kernels_per_width * len(config.kernel_widths)
    params["ff.weight"] = uni(n_feat, config.hidden_dim)
    params["ff.bias"] = uni(config.hidden_dim)
    params["attn.vector"] = uni(config.hidden_dim, 1)
    params["out.weight"] = uni(config.hidden_dim, config.n_classes)
    params["out.bias"] = uni(config.n_classes)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def load_vectors(path, vocab: Vocabulary, dim: int, seed: int = 0, init_scale: float = 0.1) -> Tuple[np.ndarray, int]:
    """Build an embedding table from a ``token v1 ... vD`` text file.

    Rows for tokens missing from the file are drawn uniformly from
    ``[-init_scale, init_scale]``. Returns ``(table, n_found)``.
    """
    rng = np.random.default_rng(seed)
    table = rng.uniform(-init_scale, init_scale, size=(len(vocab), dim))
    table[PAD_ID] = 0.0
    found = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            tok, vals = parts[0], parts[1:]
            if len(vals) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(vals)}")
            row = vocab.stoi.get(tok.lower())
            if row is None or row == PAD_ID:
                continue
            try:
                table[row] = np.array(vals, dtype=np.float64)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric vector entry") from None
            found += 1
    return table, found
