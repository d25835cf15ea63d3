"""Deterministic synthetic cross-lingual tasks with exact oracles.

A document is a BOS/EOS-wrapped list of (marker, content) pairs.  The oracle
summary keeps the content tokens whose marker is KEEP; the oracle translation
maps each source content token to its target-language twin (a fixed offset)
and optionally reverses the sequence.  Both oracles are exact and the
translation is bijective, so every pipeline behavior is verifiable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from softpipe.exceptions import ContractError, FormatError, RangeError


@dataclass(frozen=True)
class Vocab:
    """Token-id layout: 8 reserved ids, then two disjoint content ranges."""

    content_size: int

    PAD = 0
    BOS = 1
    EOS = 2
    SEP = 3
    LANG_SRC = 4
    LANG_TGT = 5
    KEEP = 6
    DROP = 7
    CONTENT_START = 8

    def __post_init__(self):
        if self.content_size < 1:
            raise ContractError(f"content_size must be >= 1, got {self.content_size}")

    @property
    def vocab_size(self) -> int:
        return 8 + 2 * self.content_size

    @property
    def src_range(self) -> range:
        return range(8, 8 + self.content_size)

    @property
    def tgt_range(self) -> range:
        return range(8 + self.content_size, 8 + 2 * self.content_size)

    def is_content(self, tok: int) -> bool:
        return 8 <= tok < self.vocab_size

    def content_language(self, tok: int) -> str | None:
        if tok in self.src_range:
            return "src"
        if tok in self.tgt_range:
            return "tgt"
        return None


@dataclass(frozen=True)
class ToyTaskSpec:
    """Knobs for the synthetic task family.

    ``style_variant`` B emits summaries in reversed salience order, giving a
    minimal but measurable domain shift between two task "dialects".
    """

    content_size: int = 32
    n_pairs: int = 10
    keep_probability: float = 0.4
    reorder_rule: str = "reverse"
    style_variant: str = "A"
    seed: int = 0

    def __post_init__(self):
        if not (2 <= self.n_pairs <= 30):
            raise ContractError(f"n_pairs must be in [2, 30], got {self.n_pairs}")
        if not (0.0 < self.keep_probability < 1.0):
            raise ContractError(f"keep_probability must be in (0, 1), got {self.keep_probability}")
        if self.reorder_rule not in ("none", "reverse"):
            raise ContractError(f"reorder_rule must be 'none' or 'reverse', got {self.reorder_rule!r}")
        if self.style_variant not in ("A", "B"):
            raise ContractError(f"style_variant must be 'A' or 'B', got {self.style_variant!r}")

    @property
    def translation_offset(self) -> int:
        return self.content_size

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.content_size)

    @property
    def doc_len(self) -> int:
        return 2 + 2 * self.n_pairs

    @property
    def max_summary_len(self) -> int:
        # LANG tag + up to n_pairs kept tokens + EOS
        return self.n_pairs + 2

    def variant(self, style: str) -> "ToyTaskSpec":
        return replace(self, style_variant=style)


@dataclass
class XlsRecord:
    """One example: document, oracle summaries, optional back-translation."""

    doc: list[int]
    summary_src: list[int]
    summary_tgt: list[int]
    backtranslation: list[int] | None = None
    split: str = "train"


@dataclass
class Dataset:
    train: list[XlsRecord] = field(default_factory=list)
    val: list[XlsRecord] = field(default_factory=list)
    test: list[XlsRecord] = field(default_factory=list)

    def all_records(self) -> list[XlsRecord]:
        return self.train + self.val + self.test


def gen_document(spec: ToyTaskSpec, rng: np.random.Generator) -> list[int]:
    """Draw one document; markers are re-drawn until at least one KEEP appears."""
    vocab = spec.vocab
    while True:
        markers = rng.random(spec.n_pairs) < spec.keep_probability
        if markers.any():
            break
    contents = rng.integers(vocab.src_range.start, vocab.src_range.stop, size=spec.n_pairs)
    doc = [vocab.BOS]
    for keep, content in zip(markers, contents):
        doc.append(vocab.KEEP if keep else vocab.DROP)
        doc.append(int(content))
    doc.append(vocab.EOS)
    return doc


def parse_document(doc: Sequence[int], vocab: Vocab) -> list[tuple[int, int]]:
    """Split a document into (marker, content) pairs, validating its shape."""
    if len(doc) < 4 or doc[0] != vocab.BOS or doc[-1] != vocab.EOS or len(doc) % 2 != 0:
        raise FormatError(f"malformed document of length {len(doc)}")
    pairs = []
    body = doc[1:-1]
    for i in range(0, len(body), 2):
        marker, content = body[i], body[i + 1]
        if marker not in (vocab.KEEP, vocab.DROP) or content not in vocab.src_range:
            raise FormatError(f"malformed pair ({marker}, {content}) at position {i}")
        pairs.append((marker, content))
    return pairs


def summarize_oracle(doc: Sequence[int], spec: ToyTaskSpec) -> list[int]:
    """Keep the KEEP-marked content tokens, in document or reversed order."""
    vocab = spec.vocab
    kept = [content for marker, content in parse_document(doc, vocab) if marker == vocab.KEEP]
    if spec.style_variant == "B":
        kept.reverse()
    return [vocab.LANG_SRC] + kept + [vocab.EOS]


def translate_oracle(summary_src: Sequence[int], spec: ToyTaskSpec) -> list[int]:
    """Map source content tokens to their target twins; exactly invertible."""
    vocab = spec.vocab
    content = [t for t in summary_src if t not in (vocab.LANG_SRC, vocab.EOS)]
    for t in content:
        if t not in vocab.src_range:
            raise RangeError(f"token {t} outside source content range {vocab.src_range}")
    mapped = [t + spec.translation_offset for t in content]
    if spec.reorder_rule == "reverse":
        mapped.reverse()
    return [vocab.LANG_TGT] + mapped + [vocab.EOS]


def inverse_translate_oracle(summary_tgt: Sequence[int], spec: ToyTaskSpec) -> list[int]:
    """Exact inverse of :func:`translate_oracle`."""
    vocab = spec.vocab
    content = [t for t in summary_tgt if t not in (vocab.LANG_TGT, vocab.EOS)]
    for t in content:
        if t not in vocab.tgt_range:
            raise RangeError(f"token {t} outside target content range {vocab.tgt_range}")
    if spec.reorder_rule == "reverse":
        content = list(reversed(content))
    mapped = [t - spec.translation_offset for t in content]
    return [vocab.LANG_SRC] + mapped + [vocab.EOS]


def make_record(spec: ToyTaskSpec, rng: np.random.Generator, split: str) -> XlsRecord:
    doc = gen_document(spec, rng)
    summary_src = summarize_oracle(doc, spec)
    return XlsRecord(
        doc=doc,
        summary_src=summary_src,
        summary_tgt=translate_oracle(summary_src, spec),
        split=split,
    )


def gen_dataset(spec: ToyTaskSpec, n_train: int = 5000, n_val: int = 500, n_test: int = 500) -> Dataset:
    """Generate disjoint splits from one seeded stream; deterministic per spec."""
    rng = np.random.default_rng(spec.seed)
    ds = Dataset()
    for split, n, bucket in (("train", n_train, ds.train), ("val", n_val, ds.val), ("test", n_test, ds.test)):
        for _ in range(n):
            bucket.append(make_record(spec, rng, split))
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """One JSON object per line; token sequences as integer arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in ds.all_records():
            fh.write(json.dumps({
                "doc": rec.doc,
                "summary_src": rec.summary_src,
                "summary_tgt": rec.summary_tgt,
                "backtranslation": rec.backtranslation,
                "split": rec.split,
            }) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    ds = Dataset()
    buckets = {"train": ds.train, "val": ds.val, "test": ds.test}
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = XlsRecord(
                    doc=list(obj["doc"]),
                    summary_src=list(obj["summary_src"]),
                    summary_tgt=list(obj["summary_tgt"]),
                    backtranslation=None if obj.get("backtranslation") is None else list(obj["backtranslation"]),
                    split=obj["split"],
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"bad dataset record on line {lineno}: {exc}") from exc
            if rec.split not in buckets:
                raise FormatError(f"unknown split {rec.split!r} on line {lineno}")
            buckets[rec.split].append(rec)
    return ds


def strip_specials(tokens: Iterable[int], vocab: Vocab) -> list[int]:
    """Drop reserved ids (specials and language tags) before metric counting."""
    return [t for t in tokens if t >= vocab.KEEP]
