"""Instances, lexicons, distant rationale annotation, perturbations and a
synthetic corpus generator with planted important words."""

from __future__ import annotations

import copy
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

PIN_PLANTED = "PIN_PLANTED"
CRUCIAL_RATIONALE = "CRUCIAL_RATIONALE"
NOISE_RATIONALE = "NOISE_RATIONALE"
NONE = "NONE"
TAGS = (PIN_PLANTED, CRUCIAL_RATIONALE, NOISE_RATIONALE, NONE)

POSITIVE, NEGATIVE, NEUTRAL = "positive", "negative", "neutral"
POLARITIES = (POSITIVE, NEGATIVE, NEUTRAL)


class CorpusFormatError(ValueError):
    """Malformed corpus or lexicon file; the message names the line."""


@dataclass
class Instance:
    id: str
    tokens: List[str]
    label: int
    mask: List[int]
    tags: Optional[List[str]] = None
    mask_defaulted: bool = field(default=False, compare=False, repr=False)

    def __post_init__(self):
        if len(self.mask) != len(self.tokens):
            raise ValueError(f"instance {self.id}: mask length {len(self.mask)} != token length {len(self.tokens)}")
        if self.tags is not None and len(self.tags) != len(self.tokens):
            raise ValueError(f"instance {self.id}: tags length {len(self.tags)} != token length {len(self.tokens)}")

    @property
    def k(self) -> int:
        return int(sum(self.mask))

    def to_json(self) -> Dict:
        rec = {"id": self.id, "tokens": self.tokens, "label": self.label, "mask": self.mask}
        if self.tags is not None:
            rec["tags"] = self.tags
        return rec


Corpus = List[Instance]


class Lexicon:
    """Token to polarity map; lookups are case-folded."""

    def __init__(self, entries: Iterable[Tuple[str, str]] = ()):
        self.entries: Dict[str, str] = {}
        for tok, pol in entries:
            self.add(tok, pol)

    def add(self, token: str, polarity: str) -> None:
        key = token.casefold()
        if polarity not in POLARITIES:
            raise ValueError(f"unknown polarity {polarity!r} for {token!r}")
        if key in self.entries:
            raise ValueError(f"duplicate lexicon entry {token!r}")
        self.entries[key] = polarity

    def __contains__(self, token: str) -> bool:
        return token.casefold() in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, Lexicon) and self.entries == other.entries

    def polarity(self, token: str) -> Optional[str]:
        return self.entries.get(token.casefold())


def annotate(tokens: Sequence[str], lexicon: Lexicon) -> List[int]:
    """Binary rationale mask: 1 where the case-folded token is in the lexicon."""
    return [1 if tok.casefold() in lexicon.entries else 0 for tok in tokens]


def annotate_corpus(corpus: Corpus, lexicon: Lexicon) -> Corpus:
    out = copy.deepcopy(corpus)
    for inst in out:
        inst.mask = annotate(inst.tokens, lexicon)
    return out


# ---------------------------------------------------------------------------
# perturbations

def _positions(corpus: Corpus, value: int) -> List[Tuple[int, int]]:
    return [(i, j) for i, inst in enumerate(corpus) for j, z in enumerate(inst.mask) if z == value]


def total_rationales(corpus: Corpus) -> int:
    return sum(inst.k for inst in corpus)


def sample_removal(corpus: Corpus, fraction: float, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Positions chosen for removal: ``floor(fraction * total)`` rationale slots."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    pos = _positions(corpus, 1)
    n = int(math.floor(fraction * len(pos) + 1e-9))
    if n == 0:
        return []
    pick = rng.choice(len(pos), size=n, replace=False)
    return sorted(pos[i] for i in pick)


def perturb_remove(corpus: Corpus, fraction: float, rng: np.random.Generator) -> Corpus:
    """Flip a uniformly chosen share of rationale positions to non-rationale.

    Tags are left as they were, so removed clue words stay identifiable.
    """
    out = copy.deepcopy(corpus)
    for i, j in sample_removal(corpus, fraction, rng):
        out[i].mask[j] = 0
    return out


def sample_noise(corpus: Corpus, fraction: float, rng: np.random.Generator) -> List[Tuple[int, int]]:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    n = int(math.floor(fraction * total_rationales(corpus) + 1e-9))
    free = _positions(corpus, 0)
    if n > len(free):
        log.warning("only %d non-rationale positions available for %d noise additions", len(free), n)
        n = len(free)
    if n == 0:
        return []
    pick = rng.choice(len(free), size=n, replace=False)
    return sorted(free[i] for i in pick)


def perturb_add_noise(corpus: Corpus, fraction: float, rng: np.random.Generator) -> Corpus:
    """Mark ``floor(fraction * total rationales)`` non-rationale words as
    rationales, tagged NOISE_RATIONALE."""
    out = copy.deepcopy(corpus)
    for i, j in sample_noise(corpus, fraction, rng):
        inst = out[i]
        inst.mask[j] = 1
        if inst.tags is None:
            inst.tags = [NONE] * len(inst.tokens)
        inst.tags[j] = NOISE_RATIONALE
    return out


# ---------------------------------------------------------------------------
# statistics

def rationale_stats(corpus: Corpus) -> Dict[str, float]:
    """Summary in the usual style: rationale words per sentence, share of
    sentences with at least one rationale, mean sentence length."""
    n = len(corpus)
    if n == 0:
        return {"sentences": 0, "rationales_per_sentence": 0.0, "with_rationale": 0.0, "mean_length": 0.0}
    ks = np.array([inst.k for inst in corpus], dtype=float)
    return {
        "sentences": n,
        "rationales_per_sentence": float(ks.mean()),
        "with_rationale": float((ks >= 1).mean()),
        "single_rationale": float((ks == 1).sum() / max(1, (ks >= 1).sum())),
        "mean_length": float(np.mean([len(inst.tokens) for inst in corpus])),
    }


def tag_census(corpus: Corpus) -> Dict[str, int]:
    counts = {t: 0 for t in TAGS}
    for inst in corpus:
        for t in inst.tags or [NONE] * len(inst.tokens):
            counts[t] += 1
    return counts


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SyntheticConfig:
    """Knobs for the synthetic testbed.

    ``coverage`` is the share of clue types (per class) that the emitted
    lexicon contains; uncovered clues become planted important
    non-rationales. ``noise`` is the share of lexicon entries that are
    polarity-neutral filler words.

    ``shortcut_rate`` > 0 plants, in train and valid sentences only, one of
    ``n_shortcuts`` per-class shortcut words that agrees with the label with
    that probability; test sentences get a shortcut word of a random class.
    This reproduces a spurious cue that the rationales do not point at.
    """

    n_filler: int = 200
    n_clues_per_class: int = 20
    min_length: int = 8
    max_length: int = 16
    min_clues: int = 1
    max_clues: int = 4
    coverage: float = 0.5
    noise: float = 0.0
    n_train: int = 1000
    n_valid: int = 200
    n_test: int = 500
    seed: int = 0
    n_shortcuts: int = 0
    shortcut_rate: float = 0.0

    def __post_init__(self):
        for name in ("coverage", "noise", "shortcut_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}: must lie in [0, 1], got {v}")
        if self.noise >= 1.0 and self.coverage > 0:
            raise ValueError("noise: must be < 1 when the lexicon holds clue words")
        for name in ("n_train", "n_valid", "n_test", "n_filler"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        if self.n_clues_per_class < 1:
            raise ValueError("n_clues_per_class: empty clue inventory")
        if not 1 <= self.min_clues <= self.max_clues:
            raise ValueError("clue counts: need 1 <= min_clues <= max_clues")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("sentence lengths: need 1 <= min_length <= max_length")
        if self.max_clues > self.min_length:
            raise ValueError("max_clues cannot exceed min_length")


def clue_inventory(config: SyntheticConfig) -> Dict[str, List[str]]:
    n = config.n_clues_per_class
    return {
        NEGATIVE: [f"neg{i:03d}" for i in range(n)],
        POSITIVE: [f"pos{i:03d}" for i in range(n)],
    }


def generate_synthetic(config: SyntheticConfig, rng: Optional[np.random.Generator] = None):
    """Build ``(train, valid, test, lexicon)``.

    Each sentence mixes filler words with planted clue words; the label is
    the majority polarity of its clues (label 1 = positive). The lexicon
    covers ``coverage`` of each class's clue types plus enough filler
    entries to make ``noise`` of the lexicon polarity-neutral.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    clues = clue_inventory(config)
    fillers = [f"w{i:04d}" for i in range(config.n_filler)]

    covered = set()
    entries: List[Tuple[str, str]] = []
    n_cov = int(round(config.coverage * config.n_clues_per_class))
    for pol in (NEGATIVE, POSITIVE):
        chosen = rng.choice(config.n_clues_per_class, size=n_cov, replace=False) if n_cov else []
        for i in sorted(chosen):
            covered.add(clues[pol][i])
            entries.append((clues[pol][i], pol))
    n_noise = int(round(config.noise * len(entries) / (1.0 - config.noise))) if config.noise < 1 else 0
    n_noise = min(n_noise, len(fillers))
    noisy = set()
    if n_noise:
        for i in sorted(rng.choice(len(fillers), size=n_noise, replace=False)):
            noisy.add(fillers[i])
            entries.append((fillers[i], NEUTRAL))
    lexicon = Lexicon(entries)

    shortcuts = {lab: [f"cue{lab}{i:02d}" for i in range(config.n_shortcuts)] for lab in (0, 1)}

    def sentence(idx: str, shifted: bool = False) -> Instance:
        while True:
            n_clue = int(rng.integers(config.min_clues, config.max_clues + 1))
            signs = rng.integers(0, 2, size=n_clue)
            if 2 * signs.sum() != n_clue:
                break
        label = int(2 * signs.sum() > n_clue)
        length = int(rng.integers(max(config.min_length, n_clue), config.max_length + 1))
        tokens = [fillers[i] for i in rng.integers(0, len(fillers), size=length)]
        tags = [NOISE_RATIONALE if t in noisy else NONE for t in tokens]
        slots = rng.choice(length, size=n_clue, replace=False)
        for slot, sgn in zip(slots, signs):
            pol = POSITIVE if sgn else NEGATIVE
            word = clues[pol][int(rng.integers(config.n_clues_per_class))]
            tokens[slot] = word
            tags[slot] = CRUCIAL_RATIONALE if word in covered else PIN_PLANTED
        if config.n_shortcuts and config.shortcut_rate > 0:
            free = [j for j in range(length) if j not in set(slots.tolist())]
            if free:
                agree = rng.random() < config.shortcut_rate
                lab = int(rng.integers(2)) if shifted else (label if agree else 1 - label)
                tokens[free[int(rng.integers(len(free)))]] = shortcuts[lab][int(rng.integers(config.n_shortcuts))]
        return Instance(id=idx, tokens=tokens, label=label, mask=annotate(tokens, lexicon), tags=tags)

    train = [sentence(f"train-{i}") for i in range(config.n_train)]
    valid = [sentence(f"valid-{i}") for i in range(config.n_valid)]
    test = [sentence(f"test-{i}", shifted=True) for i in range(config.n_test)]
    return train, valid, test, lexicon


def majority_vote(inst: Instance, lexicon: Lexicon) -> Optional[int]:
    """Label implied by the polarities of an instance's rationale words."""
    score = 0
    for tok, z in zip(inst.tokens, inst.mask):
        if z:
            pol = lexicon.polarity(tok)
            score += 1 if pol == POSITIVE else -1 if pol == NEGATIVE else 0
    if score == 0:
        return None
    return int(score > 0)


# ---------------------------------------------------------------------------
# files

def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in corpus:
            fh.write(json.dumps(inst.to_json(), ensure_ascii=False) + "\n")


def load_corpus(path) -> Corpus:
    """Read a JSON-lines corpus.

    A record without ``mask`` gets an all-zero mask and ``mask_defaulted``.
    """
    out: Corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: invalid record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusFormatError(f"{path}:{lineno}: record must be an object")
            try:
                tokens = [str(t) for t in rec["tokens"]]
                label = int(rec["label"])
                ident = str(rec.get("id", f"{Path(path).stem}-{lineno}"))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: missing or bad field {exc}") from None
            defaulted = "mask" not in rec
            mask = [0] * len(tokens) if defaulted else [int(z) for z in rec["mask"]]
            if any(z not in (0, 1) for z in mask):
                raise CorpusFormatError(f"{path}:{lineno}: mask must be binary")
            tags = rec.get("tags")
            if tags is not None and any(t not in TAGS for t in tags):
                raise CorpusFormatError(f"{path}:{lineno}: unknown tag")
            try:
                inst = Instance(id=ident, tokens=tokens, label=label, mask=mask, tags=tags)
            except ValueError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
            inst.mask_defaulted = defaulted
            if defaulted:
                log.warning("%s:%d: no mask field, defaulting to all zeros", path, lineno)
            out.append(inst)
    return out


def save_lexicon(lexicon: Lexicon, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, pol in sorted(lexicon.entries.items()):
            fh.write(f"{tok}\t{pol}\n")


def load_lexicon(path) -> Lexicon:
    lex = Lexicon()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusFormatError(f"{path}:{lineno}: expected 'token<TAB>polarity'")
            try:
                lex.add(parts[0], parts[1].strip())
            except ValueError as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
    return lex


# ---------------------------------------------------------------------------
# SST import (PTB-style trees: one bracketed tree per line, labels 0..4)

_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")


def parse_tree(line: str):
    """Parse ``(3 (2 It) (4 good))`` into ``(root_label, [(word, leaf_label), ...])``."""
    toks = _TOKEN_RE.findall(line)
    pos = 0
    leaves: List[Tuple[str, int]] = []

    def node():
        nonlocal pos
        if toks[pos] != "(":
            raise ValueError("expected '('")
        pos += 1
        label = int(toks[pos])
        pos += 1
        if toks[pos] == "(":
            while toks[pos] == "(":
                node()
        else:
            leaves.append((toks[pos], label))
            pos += 1
        if toks[pos] != ")":
            raise ValueError("expected ')'")
        pos += 1
        return label

    root = node()
    return root, leaves


def import_sst(directory, files=("train.txt", "dev.txt", "test.txt")):
    """Convert SST tree files into binary corpora plus an extreme-polarity lexicon.

    Sentences labelled 0/1 become negative (0), 3/4 positive (1), neutral 2
    is dropped. Words whose leaf label is 0 (negative) or 4 (positive) in
    the training trees form the lexicon, and every split is annotated with it.
    """
    directory = Path(directory)
    splits = []
    for name in files:
        parsed = []
        with open(directory / name, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    parsed.append(parse_tree(line))
                except (ValueError, IndexError) as exc:
                    raise CorpusFormatError(f"{directory / name}:{lineno}: bad tree ({exc})") from None
        splits.append(parsed)
    lexicon = Lexicon()
    for _, leaves in splits[0]:
        for word, lab in leaves:
            if lab in (0, 4) and word not in lexicon:
                lexicon.add(word, NEGATIVE if lab == 0 else POSITIVE)
    out = []
    for name, parsed in zip(files, splits):
        corpus = []
        stem = Path(name).stem
        for i, (root, leaves) in enumerate(parsed):
            if root == 2:
                continue
            tokens = [w for w, _ in leaves]
            corpus.append(Instance(id=f"{stem}-{i}", tokens=tokens, label=int(root > 2),
                                   mask=annotate(tokens, lexicon)))
        out.append(corpus)
    return (*out, lexicon)
