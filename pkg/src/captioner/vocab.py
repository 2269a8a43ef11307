"""Tokenization and the token <-> id vocabulary."""

import hashlib
import re
from collections import Counter

from .errors import ContractViolation, DataFormatError

START_ID = 0
STOP_ID = 1
UNK_ID = 2
START, STOP, UNK = "<start>", "<stop>", "<unk>"
RESERVED = (START, STOP, UNK)

_PUNCT = re.compile(r"[.,;:!?\"'()]")


def tokenize(sentence):
    """Lowercase, turn punctuation into separators and split on whitespace."""
    return _PUNCT.sub(" ", sentence.lower()).split()


class Vocabulary:
    """Bidirectional token/id map. Ids 0, 1, 2 are START, STOP and UNK."""

    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise ContractViolation(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __repr__(self):
        return f"Vocabulary(size={len(self)})"

    @property
    def words(self):
        """Non-reserved tokens in id order."""
        return self.itos[len(RESERVED):]

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def token(self, idx):
        return self.itos[idx]

    def encode(self, tokens):
        """START + ids (OOV -> UNK) + STOP."""
        return [START_ID] + [self.id(t) for t in tokens] + [STOP_ID]

    def decode(self, ids):
        return [self.itos[i] for i in ids if i not in (START_ID, STOP_ID)]

    def digest(self):
        """SHA-256 over the id-ordered token list; used to pair checkpoints with vocabularies."""
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).digest()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.itos:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise DataFormatError(f"{path}: vocabulary must start with {RESERVED}", line=1)
        return cls(lines[len(RESERVED):])


def build_vocabulary(corpus, min_count=1):
    """Admit tokens seen at least ``min_count`` times.

    Ids follow descending frequency, ties broken lexicographically, so the
    assignment depends only on the corpus contents.
    """
    if min_count < 1:
        raise ContractViolation(f"min_count must be >= 1, got {min_count}")
    counts = Counter(tok for sent in corpus for tok in sent if tok not in RESERVED)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)
