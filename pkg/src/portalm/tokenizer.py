"""Rule-based word tokenization, vocabulary construction, numericalization.

Tokenization is deterministic by construction: NFC normalize, lowercase,
split on whitespace, peel leading/trailing punctuation, split English
clitics. Reserved symbols like <rsep> pass through unsplit.
"""

from __future__ import annotations

import hashlib
import json
import unicodedata
import warnings
from collections import Counter
from dataclasses import dataclass, field

from .corpus import Corpus
from .errors import ValidationError

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
RSEP_ID = 3

PAD, UNK, BOS, RSEP = "<pad>", "<unk>", "<bos>", "<rsep>"
RESERVED_TOKENS = (PAD, UNK, BOS, RSEP)

# longest-match first so n't beats 't-style suffixes
_CLITICS = ("n't", "'re", "'ve", "'ll", "'s", "'m", "'d")

DEFAULT_MAX_SIZE = 20_000


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _split_clitics(core: str) -> list[str]:
    parts: list[str] = []
    while True:
        for clitic in _CLITICS:
            if core.endswith(clitic) and len(core) > len(clitic):
                parts.append(clitic)
                core = core[: -len(clitic)]
                break
        else:
            break
    parts.append(core)
    return parts[::-1]


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens with punctuation and clitics split off."""
    text = unicodedata.normalize("NFC", text).lower()
    tokens: list[str] = []
    for raw in text.split():
        if raw in RESERVED_TOKENS:
            tokens.append(raw)
            continue
        leading: list[str] = []
        trailing: list[str] = []
        while raw and _is_punct(raw[0]):
            leading.append(raw[0])
            raw = raw[1:]
        while raw and _is_punct(raw[-1]):
            trailing.append(raw[-1])
            raw = raw[:-1]
        tokens.extend(leading)
        if raw:
            tokens.extend(_split_clitics(raw))
        tokens.extend(reversed(trailing))
    return tokens


@dataclass
class Vocabulary:
    """Bidirectional token<->ID map; IDs dense in [0, size), reserved IDs fixed."""

    token_to_id: dict[str, int]
    id_to_token: list[str]
    max_size: int
    min_freq: int

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def content_hash(self) -> str:
        payload = json.dumps(self.token_to_id, sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def to_json(self) -> str:
        doc = {
            "header": {
                "reserved": {t: i for i, t in enumerate(RESERVED_TOKENS)},
                "max_size": self.max_size,
                "min_freq": self.min_freq,
            },
            "token_to_id": self.token_to_id,
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        token_to_id = doc["token_to_id"]
        id_to_token = [""] * len(token_to_id)
        for tok, idx in token_to_id.items():
            id_to_token[idx] = tok
        return cls(
            token_to_id=token_to_id,
            id_to_token=id_to_token,
            max_size=doc["header"]["max_size"],
            min_freq=doc["header"]["min_freq"],
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def build_vocab(
    corpus: Corpus, max_size: int = DEFAULT_MAX_SIZE, min_freq: int = 1
) -> Vocabulary:
    """Frequency-ranked vocabulary over all response texts.

    Ties break lexicographically so rebuilds from the same corpus are stable.
    Reserved tokens always occupy IDs 0..3.
    """
    if max_size <= len(RESERVED_TOKENS):
        raise ValidationError(
            f"max_size {max_size} must exceed the {len(RESERVED_TOKENS)} reserved tokens"
        )
    counts: Counter[str] = Counter()
    for session in corpus.sessions():
        for response in session.responses:
            counts.update(t for t in tokenize(response.text) if t not in RESERVED_TOKENS)
    if not counts:
        warnings.warn("empty corpus: vocabulary contains only reserved tokens", stacklevel=2)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, freq in ranked if freq >= min_freq]
    kept = kept[: max_size - len(RESERVED_TOKENS)]
    id_to_token = list(RESERVED_TOKENS) + kept
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocabulary(
        token_to_id=token_to_id,
        id_to_token=id_to_token,
        max_size=max_size,
        min_freq=min_freq,
    )


def numericalize(tokens: list[str], vocab: Vocabulary) -> list[int]:
    """Token list to ID list; out-of-vocabulary tokens map to <unk>."""
    return [vocab.id(t) for t in tokens]


def denumericalize(ids: list[int], vocab: Vocabulary) -> list[str]:
    return [vocab.token(i) for i in ids]
