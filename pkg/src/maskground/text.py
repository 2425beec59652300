"""Caption word extraction, word dropping, embeddings, and query expansion.

The part-of-speech lexicon is a closed table (the caption grammar is closed),
and word embeddings come from a learnable per-word table trained jointly with
the vision model. The provider interface is the seam where a pre-trained
sentence-encoder service could be substituted.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

WORD_MODES = ("all", "noun_adj_verb", "noun_adj")

_NOUNS = (
    "circle square triangle bar background shape dot box line "
    "circles squares triangles bars shapes".split()
)
_ADJECTIVES = (
    "red green blue yellow purple orange cyan magenta pink brown black white "
    "gray grey dark light big small large tiny".split()
)
_VERBS = "is are sits lies floats stands rests".split()
_OTHER = "a an the and on of in with".split()


class Lexicon:
    """Case-insensitive word -> tag table; unknown words tag as 'other'."""

    def __init__(self, tags: Mapping[str, str]):
        self._tags = {w.lower(): t for w, t in tags.items()}

    def tag(self, word: str) -> str:
        return self._tags.get(word.lower(), "other")

    def words(self) -> list[str]:
        return sorted(self._tags)


DEFAULT_LEXICON = Lexicon(
    {**{w: "noun" for w in _NOUNS},
     **{w: "adjective" for w in _ADJECTIVES},
     **{w: "verb" for w in _VERBS},
     **{w: "other" for w in _OTHER}})


def tokenize(caption: str) -> list[str]:
    return [t for t in (w.strip(string.punctuation).lower()
                        for w in caption.split()) if t]


def extract_words(caption: str, mode: str,
                  lexicon: Lexicon = DEFAULT_LEXICON) -> list[str]:
    """Lowercased caption tokens filtered by lexicon tag; order and
    duplicates preserved."""
    if not caption:
        raise ValueError("caption must be nonempty")
    if mode not in WORD_MODES:
        raise ValueError(f"mode must be one of {WORD_MODES}, got {mode!r}")
    tokens = tokenize(caption)
    if mode == "all":
        return tokens
    keep = {"noun", "adjective"} if mode == "noun_adj" else {"noun", "adjective", "verb"}
    return [t for t in tokens if lexicon.tag(t) in keep]


def drop_words(words: Sequence[str], kp: float,
               rng: np.random.Generator) -> list[str]:
    """Keep each word independently with probability kp; never return empty
    (one word is retained uniformly at random if all were dropped)."""
    if not 0.0 <= kp <= 1.0:
        raise ValueError(f"kp must be in [0, 1], got {kp}")
    if not words:
        raise ValueError("words must be nonempty")
    kept = [w for w in words if rng.random() < kp]
    if not kept:
        kept = [words[int(rng.integers(len(words)))]]
    return kept


class OovError(KeyError):
    """A word is outside the provider vocabulary under the strict policy."""


class EmbeddingProvider(nn.Module):
    """Learnable word-embedding table with a fixed vocabulary.

    oov_policy 'strict' raises on unknown words; 'unk' maps them to a
    dedicated row. The same word always maps to the same vector within a
    checkpoint.
    """

    UNK = "<unk>"

    def __init__(self, vocab: Sequence[str], dim: int, *,
                 oov_policy: str = "unk", init_std: float | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if oov_policy not in ("strict", "unk"):
            raise ValueError(f"unknown oov_policy {oov_policy!r}")
        words = list(dict.fromkeys(w.lower() for w in vocab))
        if self.UNK in words:
            words.remove(self.UNK)
        self.vocab = [self.UNK] + words
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.dim = dim
        self.oov_policy = oov_policy
        # Unit-expected-norm rows: tiny norms would blow up cosine gradients.
        if init_std is None:
            init_std = 1.0 / math.sqrt(dim)
        table = torch.empty(len(self.vocab), dim)
        table.normal_(0.0, init_std, generator=generator)
        # Zero rows would break cosine similarity; the draw is re-done if one
        # ever comes up (probability ~0, but the invariant is norms > 0).
        while (norms := table.norm(dim=1)).min() == 0:
            bad = norms == 0
            table[bad] = torch.randn(int(bad.sum()), dim, generator=generator) * init_std
        self.table = nn.Parameter(table)

    def lookup(self, word: str) -> int:
        idx = self.index.get(word.lower())
        if idx is None:
            if self.oov_policy == "strict":
                raise OovError(f"word {word!r} not in vocabulary")
            idx = 0
        return idx

    def forward(self, words: Sequence[str]) -> torch.Tensor:
        if not words:
            raise ValueError("words must be nonempty")
        idx = torch.tensor([self.lookup(w) for w in words], dtype=torch.long)
        return self.table[idx]


def embed_words(words: Sequence[str], provider: EmbeddingProvider) -> torch.Tensor:
    """Row k is the embedding of words[k]; shape (K, D)."""
    return provider(words)


@dataclass(frozen=True)
class CategoryQueries:
    """Categories with their query phrases (synonyms, plurals, prompts)."""

    categories: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        if not self.categories:
            raise ValueError("need at least one category")
        for name, phrases in self.categories:
            if not phrases or any(not p for p in phrases):
                raise ValueError(f"category {name!r} needs nonempty phrases")

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.categories]

    @classmethod
    def single_phrase(cls, names: Sequence[str]) -> "CategoryQueries":
        return cls(tuple((n, (n,)) for n in names))


def expand_categories(names: Sequence[str],
                      synonym_map: Mapping[str, Sequence[str]] | None = None,
                      prompt_map: Mapping[str, str] | None = None) -> CategoryQueries:
    """Expand category names to query phrases.

    Each name becomes its synonym list when present (else itself); every
    phrase is then rewritten through the prompt map when present.
    """
    if not names:
        raise ValueError("names must be nonempty")
    synonym_map = synonym_map or {}
    prompt_map = prompt_map or {}
    categories = []
    for name in names:
        phrases = [str(p) for p in synonym_map.get(name, [name])]
        phrases = [prompt_map.get(p, p) for p in phrases]
        if not phrases:
            raise ValueError(f"category {name!r} expanded to nothing")
        categories.append((name, tuple(phrases)))
    return CategoryQueries(tuple(categories))


def load_query_maps(synonyms_path: str | Path | None = None,
                    prompts_path: str | Path | None = None
                    ) -> tuple[dict[str, list[str]], dict[str, str]]:
    """Load the shipped synonym/prompt fixtures or user-provided files."""
    def _read(path, default_name):
        if path is not None:
            return json.loads(Path(path).read_text(encoding="utf-8"))
        with resources.files("maskground.fixtures").joinpath(default_name).open(
                "r", encoding="utf-8") as fh:
            return json.load(fh)
    return _read(synonyms_path, "synonyms.json"), _read(prompts_path, "prompts.json")


def phrase_rows(queries: CategoryQueries, provider: EmbeddingProvider,
                mode: str = "word") -> tuple[torch.Tensor, list[int], list[tuple[int, str]]]:
    """Turn query phrases into embedding rows for inference.

    mode 'word': every word of every phrase becomes its own row (ensembling
    later reduces by max). mode 'mean': one row per phrase, the mean of its
    word embeddings. Returns (rows, category index per row,
    (category index, phrase) per row).
    """
    if mode not in ("word", "mean"):
        raise ValueError(f"phrase mode must be 'word' or 'mean', got {mode!r}")
    rows: list[torch.Tensor] = []
    row_categories: list[int] = []
    row_phrases: list[tuple[int, str]] = []
    for cat_idx, (_, phrases) in enumerate(queries.categories):
        for phrase in phrases:
            words = tokenize(phrase)
            if not words:
                raise ValueError(f"phrase {phrase!r} has no tokens")
            vectors = embed_words(words, provider)
            if mode == "mean":
                rows.append(vectors.mean(dim=0))
                row_categories.append(cat_idx)
                row_phrases.append((cat_idx, phrase))
            else:
                for vec in vectors:
                    rows.append(vec)
                    row_categories.append(cat_idx)
                    row_phrases.append((cat_idx, phrase))
    return torch.stack(rows), row_categories, row_phrases


def collect_caption_vocabulary(captions: Iterable[str],
                               lexicon: Lexicon = DEFAULT_LEXICON) -> list[str]:
    """Sorted union of lexicon words and caption tokens (training vocab)."""
    words = set(lexicon.words())
    for caption in captions:
        words.update(tokenize(caption))
    return sorted(words)
