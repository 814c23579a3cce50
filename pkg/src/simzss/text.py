"""Caption tokenization and textual concept identification.

Byte-pair encoding over characters with GPT-2 style pre-tokenization (a
word keeps its single leading space), a lexicon + suffix POS tagger, a
regular noun-phrase chunker, and the concept refinement / bank filtering
that yields per-concept token index sets.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = "[PAD]", "[BOS]", "[EOS]", "[UNK]"
SPECIALS = (PAD, BOS, EOS, UNK)
BPE_HEADER = "SZBPE v1"

TAGS = ("NOUN", "ADJ", "DET", "VERB", "PREP", "NUM", "OTHER")

_PRETOKEN = re.compile(r" ?\w+| ?[^\s\w]+|\s+(?!\S)|\s+")
_WORD = re.compile(r"[A-Za-z0-9]+")

DEFAULT_ALPHABET = tuple(sorted(set(string.printable) - set("\x0b\x0c")))


class FormatError(ValueError):
    """Malformed vocab, lexicon, bank or binary file."""


def pretokenize(text: str) -> list[tuple[str, int]]:
    """Split ``text`` into (piece, start offset); pieces tile the text exactly."""
    out = []
    pos = 0
    for m in _PRETOKEN.finditer(text):
        assert m.start() == pos, "pre-tokenizer must cover every character"
        out.append((m.group(), m.start()))
        pos = m.end()
    assert pos == len(text)
    return out


# --------------------------------------------------------------------- BPE


@dataclass
class BpeVocab:
    base: list[str]
    merges: list[tuple[str, str]]
    tokens: list[str] = field(init=False)
    token_to_id: dict[str, int] = field(init=False)
    ranks: dict[tuple[str, str], int] = field(init=False)

    def __post_init__(self):
        known = set(self.base)
        for a, b in self.merges:
            if a not in known or b not in known:
                raise FormatError(f"merge ({a!r}, {b!r}) references an unknown symbol")
            known.add(a + b)
        self.tokens = list(SPECIALS) + list(self.base)
        seen = set(self.base)
        for a, b in self.merges:
            if a + b not in seen:
                seen.add(a + b)
                self.tokens.append(a + b)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[str, list[str]] = {}

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def split_piece(self, piece: str) -> list[str]:
        """Apply merges to one pre-token in rank order."""
        hit = self._cache.get(piece)
        if hit is not None:
            return hit
        symbols = list(piece)
        while len(symbols) > 1:
            best, best_rank = None, None
            for i in range(len(symbols) - 1):
                r = self.ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            a, b = symbols[best], symbols[best + 1]
            merged, i = [], 0
            while i < len(symbols):
                if i < len(symbols) - 1 and symbols[i] == a and symbols[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        self._cache[piece] = symbols
        return symbols

    def decode(self, ids: Sequence[int]) -> str:
        """Concatenate token strings, dropping special tokens (UNK -> U+FFFD)."""
        out = []
        for i in ids:
            tok = self.tokens[i]
            if tok == UNK:
                out.append("�")
            elif tok not in SPECIALS:
                out.append(tok)
        return "".join(out)

    def save(self, path: str | Path) -> None:
        lines = [BPE_HEADER, f"base {len(self.base)}"]
        lines += [json.dumps(s) for s in self.base]
        lines.append(f"merges {len(self.merges)}")
        lines += [json.dumps([a, b]) for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> BpeVocab:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != BPE_HEADER:
            raise FormatError(f"{path}: missing '{BPE_HEADER}' header")
        try:
            head, n = lines[1].split()
            assert head == "base"
            n = int(n)
            base = [json.loads(x) for x in lines[2 : 2 + n]]
            head, m = lines[2 + n].split()
            assert head == "merges"
            m = int(m)
            merges = [tuple(json.loads(x)) for x in lines[3 + n : 3 + n + m]]
        except (AssertionError, IndexError, ValueError) as exc:
            raise FormatError(f"{path}: malformed BPE vocab ({exc})") from exc
        if len(merges) != m or any(len(p) != 2 for p in merges):
            raise FormatError(f"{path}: truncated merge list")
        return cls(base, [(a, b) for a, b in merges])


def train_bpe(corpus: Sequence[str], num_merges: int, alphabet: Iterable[str] = DEFAULT_ALPHABET) -> BpeVocab:
    """Greedy most-frequent-pair BPE, merging only inside pre-tokens.

    Ties go to the lexicographically smallest pair. Pair counts are updated
    incrementally through a pair -> words index.
    """
    if not corpus:
        raise ValueError("train_bpe: corpus is empty")
    if num_merges < 0:
        raise ValueError("train_bpe: num_merges must be >= 0")
    words = Counter(piece for text in corpus for piece, _ in pretokenize(text))
    base = sorted(set(alphabet) | {ch for w in words for ch in w})

    seqs = {w: list(w) for w in words}
    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[str]] = defaultdict(set)
    for w, f in words.items():
        s = seqs[w]
        for a, b in zip(s, s[1:]):
            pair_counts[(a, b)] += f
            where[(a, b)].add(w)

    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        live = [(c, p) for p, c in pair_counts.items() if c > 0]
        if not live:
            break
        top = max(c for c, _ in live)
        pair = min(p for c, p in live if c == top)
        merges.append(pair)
        a, b = pair
        for w in sorted(where.pop(pair, ())):
            f = words[w]
            s = seqs[w]
            for x, y in zip(s, s[1:]):
                pair_counts[(x, y)] -= f
            merged, i = [], 0
            while i < len(s):
                if i < len(s) - 1 and s[i] == a and s[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(s[i])
                    i += 1
            seqs[w] = merged
            for x, y in zip(merged, merged[1:]):
                pair_counts[(x, y)] += f
                where[(x, y)].add(w)
        pair_counts.pop(pair, None)
    return BpeVocab(base, merges)


# ------------------------------------------------------------ tokenization


@dataclass
class Concept:
    concept_id: int
    text: str
    word_spans: list[tuple[int, int]]
    token_indices: list[int]


@dataclass
class TokenizedCaption:
    text: str
    ids: list[int]
    spans: list[tuple[int, int]]
    concepts: list[Concept] = field(default_factory=list)
    truncated: bool = False

    @property
    def n_tokens(self) -> int:
        return len(self.ids)

    @property
    def eos_index(self) -> int:
        return len(self.ids) - 1


def tokenize(vocab: BpeVocab, text: str) -> TokenizedCaption:
    """Encode ``text`` as [BOS] tokens [EOS] with a char span per token.

    Special tokens carry empty spans at the text boundaries.
    """
    ids = [vocab.bos_id]
    spans = [(0, 0)]
    for piece, start in pretokenize(text):
        pos = start
        for sym in vocab.split_piece(piece):
            ids.append(vocab.token_to_id.get(sym, vocab.unk_id))
            spans.append((pos, pos + len(sym)))
            pos += len(sym)
    ids.append(vocab.eos_id)
    spans.append((len(text), len(text)))
    return TokenizedCaption(text=text, ids=ids, spans=spans)


def tokens_in_spans(caption: TokenizedCaption, char_spans: Sequence[tuple[int, int]]) -> list[int]:
    """Indices of content tokens whose char span intersects any of ``char_spans``."""
    out = []
    for i, (s, e) in enumerate(caption.spans):
        if i == 0 or i == len(caption.spans) - 1:
            continue
        if any(s < we and ws < e for ws, we in char_spans):
            out.append(i)
    return out


# ---------------------------------------------------------- POS and chunking


@dataclass
class PosLexicon:
    words: dict[str, str]
    suffixes: list[tuple[str, str]]

    def tag(self, word: str) -> str:
        w = word.lower()
        if w in self.words:
            return self.words[w]
        for suf, tag in self.suffixes:
            if w.endswith(suf):
                return tag
        return "OTHER"

    def with_words(self, extra: dict[str, str]) -> PosLexicon:
        return PosLexicon({**self.words, **extra}, list(self.suffixes))

    @classmethod
    def load(cls, path: str | Path | None = None) -> PosLexicon:
        text = _read_text(path, "lexicon.tsv")
        words: dict[str, str] = {}
        suffixes: list[tuple[str, str]] = []
        section = "words"
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line in ("[words]", "[suffixes]"):
                section = line[1:-1]
                continue
            parts = raw.rstrip("\n").split("\t")
            if len(parts) != 2 or parts[1] not in TAGS:
                raise FormatError(f"lexicon line {lineno}: expected 'entry<TAB>TAG', got {raw!r}")
            key, tag = parts[0].strip().lower(), parts[1]
            if section == "words":
                words[key] = tag
            else:
                suffixes.append((key, tag))
        return cls(words, suffixes)


def tag_pos(lexicon: PosLexicon, words: Sequence[str]) -> list[str]:
    return [lexicon.tag(w) for w in words]


def split_words(text: str) -> list[tuple[str, int, int]]:
    """Lowercased alphanumeric words with their char ranges."""
    return [(m.group().lower(), m.start(), m.end()) for m in _WORD.finditer(text)]


def chunk_noun_phrases(tags: Sequence[str]) -> list[tuple[int, int]]:
    """Maximal ``DET? (ADJ|NOUN)* NOUN`` matches, greedy left to right.

    Returns half-open word ranges ``(start, end)``.
    """
    out = []
    i, n = 0, len(tags)
    while i < n:
        j = i + 1 if tags[i] == "DET" else i
        last_noun = None
        k = j
        while k < n and tags[k] in ("ADJ", "NOUN"):
            if tags[k] == "NOUN":
                last_noun = k
            k += 1
        if last_noun is None:
            i += 1
            continue
        out.append((i, last_noun + 1))
        i = last_noun + 1
    return out


def refine_to_concept(words: Sequence[str], tags: Sequence[str], np_range: tuple[int, int]) -> tuple[int, int]:
    """Reduce a noun phrase to its head noun plus a directly preceding NOUN compound.

    Returns the word range of the concept.
    """
    start, end = np_range
    head = end - 1
    if head - 1 >= start and tags[head - 1] == "NOUN":
        return head - 1, end
    return head, end


# ------------------------------------------------------------- concept bank


class ConceptBank:
    def __init__(self, concepts: Iterable[str]):
        self.concepts: list[str] = []
        self.index: dict[str, int] = {}
        for c in concepts:
            key = " ".join(c.lower().split())
            if key and key not in self.index:
                self.index[key] = len(self.concepts)
                self.concepts.append(key)

    def __len__(self) -> int:
        return len(self.concepts)

    def __contains__(self, item: str) -> bool:
        return item.lower() in self.index

    def lookup(self, concept: str) -> int | None:
        return self.index.get(" ".join(concept.lower().split()))

    @classmethod
    def load(cls, path: str | Path | None = None) -> ConceptBank:
        text = _read_text(path, "bank.txt")
        lines = (ln.split("#", 1)[0].strip() for ln in text.splitlines())
        return cls(ln for ln in lines if ln)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.concepts) + "\n", encoding="utf-8")


def _read_text(path, default_name: str) -> str:
    if path is None:
        return resources.files("simzss.data").joinpath(default_name).read_text(encoding="utf-8")
    return Path(path).read_text(encoding="utf-8")


def extract_concepts(
    vocab: BpeVocab,
    lexicon: PosLexicon,
    bank: ConceptBank,
    caption: str,
    fold_plurals: bool = False,
) -> TokenizedCaption:
    """Tokenize a caption and attach its bank concepts with token index sets."""
    tc = tokenize(vocab, caption)
    words = split_words(caption)
    tags = tag_pos(lexicon, [w for w, _, _ in words])
    for np_range in chunk_noun_phrases(tags):
        lo, hi = refine_to_concept([w for w, _, _ in words], tags, np_range)
        text = " ".join(w for w, _, _ in words[lo:hi])
        cid = bank.lookup(text)
        if cid is None and fold_plurals and text.endswith("s"):
            cid = bank.lookup(text[:-1])
        if cid is None:
            continue
        spans = [(s, e) for _, s, e in words[lo:hi]]
        idx = tokens_in_spans(tc, spans)
        if idx:
            tc.concepts.append(Concept(cid, bank.concepts[cid], spans, idx))
    return tc
