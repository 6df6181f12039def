"""Word-level vocabulary, chunking, and (landmark) tokenization.

Texts are split into lowercase word tokens (``[\\w']+`` runs); out-of-vocab
words map to UNK. Sequences come in two shapes:

* standard: ``[CLS] w1 .. wt [SEP]``
* landmark: ``[CLS] z1 [M] z2 [M] .. zn [M]`` where the ``z`` are content
  chunks and ``[M]`` is a marker token - SEP for landmark pooling, CLS for
  the multi-CLS inference encoding.

Chunk boundaries come from a fixed granularity, a granularity sampled per
sequence from a set, or heuristic sentence splits. A hard token budget is
enforced: content is truncated to the largest prefix whose total encoding
(leading CLS + content + one marker per started chunk) fits ``max_len``.
"""

import bisect
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]")
CLS, SEP, PAD, MASK, UNK = range(5)

_WORD_RE = re.compile(r"[\w']+")

DEFAULT_GRANULARITIES = (32, 64, 128, 256)


class Vocabulary:
    """Frequency-ranked word vocabulary with five fixed special tokens.

    Special ids are 0..4 in the order CLS, SEP, PAD, MASK, UNK; word ids
    follow in frequency order (ties broken lexicographically).
    """

    def __init__(self, words: list[str]):
        self.id_to_token = list(SPECIAL_TOKENS) + list(words)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.cls_id = CLS
        self.sep_id = SEP
        self.pad_id = PAD
        self.mask_id = MASK
        self.unk_id = UNK

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def save(self, path: str | Path) -> None:
        """Write one "token<TAB>id" line per entry, specials first."""
        with open(path, "w", encoding="utf-8") as f:
            for i, tok in enumerate(self.id_to_token):
                f.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, idx = line.split("\t")
                if int(idx) != len(tokens):
                    raise ValueError(f"non-contiguous id {idx} in {path}")
                tokens.append(tok)
        if tuple(tokens[:5]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary file does not start with the five specials")
        return cls(tokens[5:])


def split_words(text: str) -> list[str]:
    """Lowercase word tokens; punctuation and whitespace are separators."""
    return _WORD_RE.findall(text.lower())


def build_vocab(texts: list[str], max_size: int) -> Vocabulary:
    """Build a vocabulary from raw texts, keeping the most frequent words.

    ``max_size`` bounds the total size including the five specials.
    Frequency ties break lexicographically, so the result is deterministic
    for a given multiset of words.
    """
    if max_size <= len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must exceed {len(SPECIAL_TOKENS)} specials")
    counts: dict[str, int] = {}
    n_words = 0
    for text in texts:
        for w in split_words(text):
            counts[w] = counts.get(w, 0) + 1
            n_words += 1
    if n_words == 0:
        raise ValueError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [w for w, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
    return Vocabulary(keep)


def encode_text(text: str, vocab: Vocabulary) -> list[int]:
    """Map text to word ids with UNK fallback; no special tokens inserted."""
    unk = vocab.unk_id
    return [vocab.token_to_id.get(w, unk) for w in split_words(text)]


_SENT_PUNCT_RE = re.compile(r"[.!?]+(?=\s|$)")


def sentence_boundaries(text: str) -> list[int]:
    """Word positions where sentences end (cumulative word counts).

    A boundary falls after sentence punctuation (``. ! ?`` runs) that is
    followed by whitespace or end-of-text; consecutive boundaries merge and
    the end of text is always a boundary.
    """
    word_ends = [m.end() for m in _WORD_RE.finditer(text)]
    boundaries: list[int] = []
    for m in _SENT_PUNCT_RE.finditer(text):
        count = bisect.bisect_right(word_ends, m.start())
        if count > 0 and (not boundaries or count > boundaries[-1]):
            boundaries.append(count)
    total = len(word_ends)
    if not boundaries or boundaries[-1] < total:
        boundaries.append(total)
    return boundaries


@dataclass(frozen=True)
class ChunkingStrategy:
    """How content tokens are split into chunks before marker insertion.

    kind is one of "fixed", "variable", "sentence". ``granularity`` applies
    to fixed; ``granularities`` is the sampling set for variable (one draw
    per sequence per call).
    """

    kind: str = "variable"
    granularity: int = 128
    granularities: tuple[int, ...] = DEFAULT_GRANULARITIES

    def __post_init__(self):
        if self.kind not in ("fixed", "variable", "sentence"):
            raise ValueError(f"unknown chunking kind {self.kind!r}")
        if self.kind == "fixed" and self.granularity < 1:
            raise ValueError("granularity must be >= 1")
        if self.kind == "variable":
            if not self.granularities:
                raise ValueError("variable granularity set is empty")
            if any(g < 1 for g in self.granularities):
                raise ValueError("granularities must be >= 1")

    @staticmethod
    def fixed(g: int) -> "ChunkingStrategy":
        return ChunkingStrategy(kind="fixed", granularity=g)

    @staticmethod
    def variable(granularities=DEFAULT_GRANULARITIES) -> "ChunkingStrategy":
        return ChunkingStrategy(kind="variable", granularities=tuple(granularities))

    @staticmethod
    def sentence() -> "ChunkingStrategy":
        return ChunkingStrategy(kind="sentence")


@dataclass(frozen=True)
class TokenSequence:
    """A tokenized text: ids, attention mask, and marker bookkeeping.

    ``marker_positions`` are the indices of marker tokens (SEP landmarks,
    or CLS for the multi-CLS encoding; the trailing SEP for standard
    sequences). ``content_length`` counts non-special tokens.
    """

    ids: np.ndarray
    mask: np.ndarray
    marker_positions: tuple[int, ...]
    content_length: int
    granularity_used: int | str

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def make_chunks(
    tokens: list[int],
    strategy: ChunkingStrategy,
    sentence_bounds: list[int] | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[list[list[int]], int | str]:
    """Split a token list into chunks; concatenation reproduces the input.

    Fixed granularity g yields ceil(n/g) chunks, all of size g except
    possibly the last. Variable draws one g uniformly from the strategy's
    set (per call) and then behaves like fixed. Sentence chunking uses the
    supplied word-position boundaries.
    """
    if strategy.kind == "sentence":
        if sentence_bounds is None:
            raise ValueError("sentence chunking requires boundaries")
        chunks = []
        prev = 0
        for b in sentence_bounds:
            if b > len(tokens):
                b = len(tokens)
            if b > prev:
                chunks.append(tokens[prev:b])
                prev = b
        if prev < len(tokens):
            chunks.append(tokens[prev:])
        return chunks, "sentence"
    if strategy.kind == "variable":
        if rng is None:
            raise ValueError("variable chunking requires an rng")
        g = int(strategy.granularities[rng.integers(len(strategy.granularities))])
    else:
        g = strategy.granularity
    if g < 1:
        raise ValueError("granularity must be >= 1")
    chunks = [tokens[i : i + g] for i in range(0, len(tokens), g)]
    return chunks, g


def _budget_truncate(chunk_sizes: list[int], max_len: int) -> tuple[int, int]:
    """Largest (n_content, n_markers) with 1 + n + markers(n) <= max_len.

    markers(n) is the number of chunks the first n tokens start; a partial
    chunk still pays for its trailing marker. Returns (0, 1) when nothing
    fits beyond the degenerate [CLS, marker] encoding.
    """
    best_n, best_m = 0, 1
    n = 0
    for ci, size in enumerate(chunk_sizes):
        markers = ci + 1
        # whole chunk if it fits, else the largest partial prefix
        room = max_len - 1 - markers - n
        if room <= 0:
            break
        take = min(size, room)
        n += take
        best_n, best_m = n, markers
        if take < size:
            break
    return best_n, best_m


def landmark_tokenize(
    text: str,
    vocab: Vocabulary,
    strategy: ChunkingStrategy,
    max_len: int,
    marker: int | None = None,
    rng: np.random.Generator | None = None,
) -> TokenSequence:
    """Encode text as [CLS] chunk [M] chunk [M] .. under a hard token budget.

    ``marker`` defaults to SEP (the landmark token); passing CLS produces
    the multi-CLS inference encoding. A trailing marker is always present;
    empty text encodes to [CLS, marker].
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2 to hold [CLS, marker]")
    marker_id = vocab.sep_id if marker is None else marker
    tokens = encode_text(text, vocab)
    bounds = sentence_boundaries(text) if strategy.kind == "sentence" else None
    chunks, gran = make_chunks(tokens, strategy, bounds, rng)
    sizes = [len(c) for c in chunks]
    n_keep, n_markers = _budget_truncate(sizes, max_len)

    ids = [vocab.cls_id]
    markers: list[int] = []
    if n_keep == 0:
        markers.append(len(ids))
        ids.append(marker_id)
    else:
        remaining = n_keep
        for c in chunks:
            take = min(len(c), remaining)
            ids.extend(c[:take])
            remaining -= take
            markers.append(len(ids))
            ids.append(marker_id)
            if remaining == 0:
                break
    assert len(markers) == n_markers
    arr = np.asarray(ids, dtype=np.int64)
    return TokenSequence(
        ids=arr,
        mask=np.ones(len(ids), dtype=np.bool_),
        marker_positions=tuple(markers),
        content_length=n_keep,
        granularity_used=gran,
    )


def standard_tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Encode text as [CLS] w1 .. wt [SEP] with truncation to max_len."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2 to hold [CLS, SEP]")
    tokens = encode_text(text, vocab)[: max_len - 2]
    ids = [vocab.cls_id] + tokens + [vocab.sep_id]
    arr = np.asarray(ids, dtype=np.int64)
    return TokenSequence(
        ids=arr,
        mask=np.ones(len(ids), dtype=np.bool_),
        marker_positions=(len(ids) - 1,),
        content_length=len(tokens),
        granularity_used=0,
    )


def pad_sequences(seqs: list[TokenSequence], pad_id: int, length: int | None = None):
    """Stack sequences into (B, S) id/mask arrays, padding on the right."""
    S = max(len(s) for s in seqs) if length is None else length
    ids = np.full((len(seqs), S), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), S), dtype=np.bool_)
    for i, s in enumerate(seqs):
        n = len(s)
        if n > S:
            raise ValueError(f"sequence of length {n} exceeds pad length {S}")
        ids[i, :n] = s.ids
        mask[i, :n] = s.mask
    return ids, mask
