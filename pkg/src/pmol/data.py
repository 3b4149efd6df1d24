"""Preference pairs, a 64-symbol char tokenizer, JSONL I/O and a synthetic generator.

Synthetic layout, per preference ``i``:

* prompts are drawn from a lowercase "topic" block owned by ``i``;
* a response interleaves content characters (echoed from the prompt) with
  marker slots; the chosen response fills every marker slot from the
  uppercase block owned by ``i``;
* the rejected response replaces ``max(1, round(gap * slots))`` marker slots
  with digits, a "bad style" shared by all preferences.

A ``conflict`` fraction of each preference's pairs instead use a mixed prompt
shared with a neighbouring preference ``j``: preference ``i`` prefers the
``i`` markers over the ``j`` markers and preference ``j`` the reverse, on the
identical prompt.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import asdict, dataclass

import numpy as np

from .adapter import ConfigError, ExpertGroupTable
from .backbone import DataError
from .numcore import Rng

ALPHABET = string.ascii_lowercase + string.ascii_uppercase + string.digits + " ."
_INDEX = {c: i for i, c in enumerate(ALPHABET)}
MAX_SYNTHETIC_PREFERENCES = 8


class ParseError(DataError):
    pass


def tokenize(text: str) -> list[int]:
    try:
        return [_INDEX[c] for c in text]
    except KeyError as err:
        raise DataError(f"character {err.args[0]!r} is not in the alphabet") from None


def detokenize(tokens) -> str:
    try:
        return "".join(ALPHABET[int(t)] for t in tokens)
    except IndexError:
        raise DataError("token id outside the alphabet") from None


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple[int, ...]
    chosen: tuple[int, ...]
    rejected: tuple[int, ...]
    preference_id: int

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
            if not getattr(self, name):
                raise DataError(f"{name} is empty")
        if self.chosen == self.rejected:
            raise DataError("chosen and rejected responses are identical")

    @classmethod
    def from_text(cls, prompt: str, chosen: str, rejected: str, preference_id: int) -> PreferencePair:
        return cls(tokenize(prompt), tokenize(chosen), tokenize(rejected), preference_id)

    def to_json(self, name=None) -> dict:
        return {"prompt": detokenize(self.prompt), "chosen": detokenize(self.chosen),
                "rejected": detokenize(self.rejected),
                "preference": self.preference_id if name is None else name}


@dataclass(frozen=True)
class SyntheticSpec:
    n_preferences: int = 3
    pairs_per_preference: int = 200
    gap: float = 0.8
    conflict: float = 0.2
    seed: int = 0
    content_len: int = 6
    prompt_len: tuple[int, int] = (6, 10)

    def validate(self) -> None:
        if not 1 <= self.n_preferences <= MAX_SYNTHETIC_PREFERENCES:
            raise ConfigError(f"n_preferences must be in [1, {MAX_SYNTHETIC_PREFERENCES}]")
        if self.pairs_per_preference < 1:
            raise ConfigError("pairs_per_preference must be >= 1")
        if not 0.0 < self.gap <= 1.0:
            raise ConfigError(f"gap {self.gap} outside (0, 1]")
        if not 0.0 <= self.conflict <= 1.0:
            raise ConfigError(f"conflict {self.conflict} outside [0, 1]")
        lo, hi = self.prompt_len
        if not 1 <= lo <= hi or self.content_len < 1:
            raise ConfigError("bad prompt/content lengths")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompt_len"] = list(self.prompt_len)
        return d


def _blocks(letters: str, n: int) -> list[str]:
    size = len(letters) // n
    return [letters[i * size:(i + 1) * size] for i in range(n)]


def _conflict_links(n: int) -> list[tuple[int, int]]:
    if n < 2:
        return []
    if n == 2:
        return [(0, 1)]
    return [(i, (i + 1) % n) for i in range(n)]


def generate_synthetic_dataset(spec: SyntheticSpec, rng: Rng | None = None) -> list[PreferencePair]:
    spec.validate()
    rng = rng or Rng(spec.seed)
    n, L = spec.n_preferences, spec.content_len
    topics = _blocks(string.ascii_lowercase, n)
    markers = _blocks(string.ascii_uppercase, n)
    bad = string.digits
    n_replace = max(1, int(round(spec.gap * L)))

    def pick(chars: str, k: int) -> str:
        return "".join(chars[i] for i in rng.integers(0, len(chars), size=k))

    def prompt_from(chars: str) -> str:
        lo, hi = spec.prompt_len
        return pick(chars, int(rng.integers(lo, hi + 1)))

    def respond(prompt: str, marks: str) -> str:
        content = (prompt * L)[:L]
        return "".join(c + m for c, m in zip(content, marks))

    def spoil(marks: str) -> str:
        slots = rng.choice(L, size=n_replace, replace=False)
        out = list(marks)
        for s in slots:
            out[s] = bad[int(rng.integers(0, len(bad)))]
        return "".join(out)

    links = _conflict_links(n)
    degree = 1 if n == 2 else (2 if n > 2 else 0)
    per_link = int(round(spec.conflict * spec.pairs_per_preference / degree)) if degree else 0
    per_link = min(per_link, spec.pairs_per_preference // max(degree, 1))

    by_pref: dict[int, list[PreferencePair]] = {i: [] for i in range(n)}
    for i, j in links:
        for _ in range(per_link):
            prompt = prompt_from(string.ascii_lowercase)
            resp_i = respond(prompt, pick(markers[i], L))
            resp_j = respond(prompt, pick(markers[j], L))
            by_pref[i].append(PreferencePair.from_text(prompt, resp_i, resp_j, i))
            by_pref[j].append(PreferencePair.from_text(prompt, resp_j, resp_i, j))
    for i in range(n):
        while len(by_pref[i]) < spec.pairs_per_preference:
            prompt = prompt_from(topics[i])
            marks = pick(markers[i], L)
            by_pref[i].append(PreferencePair.from_text(prompt, respond(prompt, marks),
                                                       respond(prompt, spoil(marks)), i))
    pairs = []
    for i in range(n):
        order = rng.permutation(len(by_pref[i]))
        pairs.extend(by_pref[i][k] for k in order)
    return pairs


def load_jsonl(path, groups: ExpertGroupTable | None = None) -> list[PreferencePair]:
    """Parse ``{"prompt", "chosen", "rejected", "preference"}`` lines.

    Preferences resolve through ``groups`` (id or registered name); without
    a table they must be integers.  Errors carry the 1-based line number.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({err.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected an object")
            missing = {"prompt", "chosen", "rejected", "preference"} - obj.keys()
            if missing:
                raise ParseError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            label = obj["preference"]
            try:
                if groups is not None:
                    pref = groups.resolve(label)
                elif isinstance(label, int) or (isinstance(label, str) and label.strip().isdigit()):
                    pref = int(label)
                else:
                    raise KeyError(label)
            except KeyError:
                raise DataError(f"{path}:{lineno}: unknown preference {label!r}") from None
            try:
                pairs.append(PreferencePair.from_text(obj["prompt"], obj["chosen"], obj["rejected"], pref))
            except DataError as err:
                raise DataError(f"{path}:{lineno}: {err}") from None
    return pairs


def write_jsonl(pairs, path, names: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            name = None if names is None else names.get(p.preference_id)
            fh.write(json.dumps(p.to_json(name), sort_keys=True) + "\n")


def dataset_hash(pairs) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(json.dumps(p.to_json(), sort_keys=True).encode())
    return h.hexdigest()


def split(pairs, train_fraction: float, rng: Rng) -> tuple[list[PreferencePair], list[PreferencePair]]:
    """Stratified split by preference; keeps at least one pair on each side."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction {train_fraction} must be strictly between 0 and 1")
    by_pref: dict[int, list[PreferencePair]] = {}
    for p in pairs:
        by_pref.setdefault(p.preference_id, []).append(p)
    train, held = [], []
    for pref in sorted(by_pref):
        items = by_pref[pref]
        if len(items) < 2:
            raise DataError(f"preference {pref} has fewer than 2 pairs")
        order = rng.permutation(len(items))
        n_train = min(max(int(round(train_fraction * len(items))), 1), len(items) - 1)
        train.extend(items[k] for k in order[:n_train])
        held.extend(items[k] for k in order[n_train:])
    return train, held


def lm_corpus(pairs) -> list[list[int]]:
    """Prompt+chosen and prompt+rejected token sequences for pretraining."""
    seqs = []
    for p in pairs:
        seqs.append(list(p.prompt) + list(p.chosen))
        seqs.append(list(p.prompt) + list(p.rejected))
    return seqs


def preference_counts(pairs) -> dict[int, int]:
    ids, counts = np.unique([p.preference_id for p in pairs], return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}
