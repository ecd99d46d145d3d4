"""scikit-learn compatible wrappers around the trainer and the annotator."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import Instance, Lexicon, annotate
from .model import ModelConfig
from .trainer import TrainConfig, encode, train_run


def check_tokens(X) -> List[List[str]]:
    """Accept whitespace-separated strings or token sequences; return token lists."""
    if isinstance(X, (str, bytes)):
        raise ValueError("X must be a sequence of sentences, not a single string")
    out = []
    for i, row in enumerate(X):
        if isinstance(row, str):
            toks = row.split()
        elif isinstance(row, (list, tuple, np.ndarray)):
            toks = [str(t) for t in row]
        else:
            raise ValueError(f"X[{i}]: expected a string or a token sequence, got {type(row).__name__}")
        if not toks:
            raise ValueError(f"X[{i}]: empty sentence")
        out.append(toks)
    if not out:
        raise ValueError("X: no sentences")
    return out


def check_masks(masks, tokens: Sequence[Sequence[str]]) -> List[List[int]]:
    if masks is None:
        return [[0] * len(t) for t in tokens]
    if len(masks) != len(tokens):
        raise ValueError(f"rationales: {len(masks)} masks for {len(tokens)} sentences")
    out = []
    for i, (m, t) in enumerate(zip(masks, tokens)):
        m = [int(v) for v in m]
        if len(m) != len(t):
            raise ValueError(f"rationales[{i}]: mask length {len(m)} != token count {len(t)}")
        if any(v not in (0, 1) for v in m):
            raise ValueError(f"rationales[{i}]: mask must be binary")
        out.append(m)
    return out


class LexiconAnnotator(TransformerMixin, BaseEstimator):
    """Maps sentences to rationale masks by case-folded lexicon lookup.

    ``lexicon`` is a :class:`Lexicon`, a mapping token -> polarity, or an
    iterable of tokens.
    """

    def __init__(self, lexicon=None):
        self.lexicon = lexicon

    def _lexicon(self) -> Lexicon:
        lex = self.lexicon
        if lex is None:
            return Lexicon()
        if isinstance(lex, Lexicon):
            return lex
        if isinstance(lex, dict):
            return Lexicon(lex.items())
        return Lexicon((tok, "positive") for tok in lex)

    def fit(self, X, y=None):
        check_tokens(X)
        self.lexicon_ = self._lexicon()
        return self

    def transform(self, X) -> List[List[int]]:
        check_is_fitted(self, "lexicon_")
        return [annotate(toks, self.lexicon_) for toks in check_tokens(X)]


class RationaleCNN(ClassifierMixin, BaseEstimator):
    """Convolutional sentence classifier trained with an optional salience constraint.

    ``fit`` takes rationale masks through the ``rationales`` keyword (or
    derives none, in which case every auxiliary method reduces to plain
    cross-entropy). Hold-out selection uses ``validation_data`` when given,
    else the final epoch.
    """

    def __init__(
        self,
        method: str = "none",
        lam: float = 1.0,
        threshold: float = 0.9,
        epochs: int = 20,
        batch_size: int = 512,
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        embedding_dim: int = 300,
        kernel_widths: Sequence[int] = (2, 3, 4, 5),
        kernels_per_width: int = 50,
        hidden_dim: int = 200,
        dropout: float = 0.5,
        random_state: int = 0,
    ):
        self.method = method
        self.lam = lam
        self.threshold = threshold
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.embedding_dim = embedding_dim
        self.kernel_widths = kernel_widths
        self.kernels_per_width = kernels_per_width
        self.hidden_dim = hidden_dim
        self.dropout = dropout
        self.random_state = random_state

    def _corpus(self, tokens, y, masks, prefix: str) -> List[Instance]:
        return [Instance(id=f"{prefix}-{i}", tokens=t, label=int(lab), mask=m)
                for i, (t, lab, m) in enumerate(zip(tokens, y, masks))]

    def _encode_labels(self, y) -> np.ndarray:
        y = np.asarray(y)
        unknown = set(np.unique(y)) - set(self.classes_)
        if unknown:
            raise ValueError(f"y: labels {sorted(unknown)} not seen in fit")
        return np.searchsorted(self.classes_, y)

    def fit(self, X, y, rationales=None, validation_data: Optional[tuple] = None):
        tokens = check_tokens(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(tokens):
            raise ValueError(f"y: expected {len(tokens)} labels, got shape {y.shape}")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("y: need at least two classes")
        train = self._corpus(tokens, self._encode_labels(y), check_masks(rationales, tokens), "train")
        valid: List[Instance] = []
        if validation_data is not None:
            vx, vy = validation_data[:2]
            vt = check_tokens(vx)
            valid = self._corpus(vt, self._encode_labels(vy), check_masks(None, vt), "valid")
        config = TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr,
                             weight_decay=self.weight_decay, method=self.method, lam=self.lam,
                             threshold=self.threshold, seed=self.random_state, track_salience=False)
        mc = dict(embedding_dim=self.embedding_dim, kernel_widths=tuple(self.kernel_widths),
                  kernels_per_width=self.kernels_per_width, hidden_dim=self.hidden_dim,
                  dropout=self.dropout, n_classes=len(self.classes_))
        ModelConfig(vocab_size=2, **mc)
        self.record_, self.model_, self.vocabulary_ = train_run(train, valid, [], config, mc)
        self.n_features_in_ = 1
        return self

    def _ids(self, X) -> List[List[int]]:
        check_is_fitted(self, "model_")
        tokens = check_tokens(X)
        return [d.ids for d in encode(self._corpus(tokens, [0] * len(tokens), check_masks(None, tokens), "x"),
                                      self.vocabulary_)]

    def predict_proba(self, X) -> np.ndarray:
        ids = self._ids(X)
        return self.model_.predict_proba(ids)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
