"""Toy text encoder: whitespace tokens over a small fixed vocabulary.

Prompts map to ``<sos> word... <eos>`` token sequences whose embeddings are
rows of a single table. The table is trained during base-model pretraining and
frozen afterwards; encoding itself is a pure lookup and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bias import BiasSpec, attribute_words
from .errors import ValidationError, VocabularyError
from .tensor import Tensor, embedding_lookup

SOS = "<sos>"
EOS = "<eos>"

# Core words every experiment vocabulary carries: the scene noun, background
# vocabulary, and filler giving the table some non-attribute directions.
CORE_WORDS = [
    "subject",
    "background",
    "stripes",
    "checker",
    "gradient",
    "plain",
    "photo",
    "scene",
    "small",
    "large",
    "left",
    "right",
    "top",
    "bottom",
    "style",
    "simple",
]


@dataclass
class Vocabulary:
    tokens: list[str]
    embedding_table: Tensor  # [vocab_size, embed_dim]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[0] != SOS or self.tokens[1] != EOS:
            raise ValidationError(f"vocabulary must start with {SOS} and {EOS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValidationError("vocabulary has duplicate tokens")
        if self.embedding_table.shape[0] != len(self.tokens):
            raise ValidationError(
                f"embedding table rows {self.embedding_table.shape[0]} != vocab size {len(self.tokens)}"
            )
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @property
    def embed_dim(self) -> int:
        return self.embedding_table.shape[1]

    def index(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise VocabularyError(word) from None

    def save_tokens(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @staticmethod
    def load_tokens(path) -> list[str]:
        return Path(path).read_text(encoding="utf-8").splitlines()


def build_vocabulary(
    extra_words, embed_dim: int = 32, rng: np.random.Generator | None = None, dtype=np.float64
) -> Vocabulary:
    """Vocabulary over the core words plus ``extra_words``, with a random table."""
    rng = rng or np.random.default_rng(0)
    words = sorted(set(CORE_WORDS) | {w for w in extra_words if w not in (SOS, EOS)})
    tokens = [SOS, EOS] + words
    table = rng.standard_normal((len(tokens), embed_dim)).astype(dtype) * 0.5
    return Vocabulary(tokens=tokens, embedding_table=Tensor(table, requires_grad=True))


@dataclass
class EncodedPrompt:
    token_ids: list[int]
    embeddings: Tensor  # [seq_len, embed_dim]
    source_text: str

    @property
    def length(self) -> int:
        return len(self.token_ids)


def encode(prompt: str, vocab: Vocabulary) -> EncodedPrompt:
    """Deterministic lookup of ``<sos> words <eos>`` embedding rows."""
    ids = [0] + [vocab.index(w) for w in prompt.split()] + [1]
    return EncodedPrompt(
        token_ids=ids,
        embeddings=embedding_lookup(vocab.embedding_table, ids),
        source_text=prompt,
    )


def attribute_prompt(bias: BiasSpec, attribute) -> str:
    """Fill the bias template with the attribute's words, in declared order."""
    bias.index(attribute)
    words = list(attribute_words(attribute))
    out = []
    for part in bias.prompt_template.split():
        if part == "{}":
            if not words:
                raise ValidationError(
                    f"template {bias.prompt_template!r} has more slots than attribute words"
                )
            out.append(words.pop(0))
        else:
            out.append(part)
    if words:
        raise ValidationError(
            f"template {bias.prompt_template!r} is missing slots for {words}"
        )
    return " ".join(out)
