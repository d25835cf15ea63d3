"""Two-stage coupling: greedy summarizer decode, expected embeddings, translator.

The summarizer's per-step probability vectors are mixed with the translator's
embedding table (e_j = E p_j) and fed to the translator's encoder in place of
token lookups.  Because that mixing is a plain matrix product, gradients flow
from the translation loss back through the translator, into the probability
vectors, and on into the summarizer: the cascade trains end to end.  The
token choices themselves stay discrete; only the probability path carries
gradient.

Losses:
  nll       teacher-forced NLL of the target reference under the translator,
            conditioned on the soft summary
  nll_sum   teacher-forced NLL of the back-translated reference under the
            summarizer (touches summarizer parameters only)
  combined  alpha * nll_sum + (1 - alpha) * nll
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from softpipe import tensor as T
from softpipe.exceptions import ContractError, DegenerateSummaryError, FormatError, ShapeError
from softpipe.model import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    Seq2SeqModel,
    _read_header,
    model_bytes,
    model_from_bytes,
)
from softpipe.tasks import Vocab
from softpipe.tensor import Tensor

DEFAULT_ALPHA = 0.99


@dataclass
class SoftSummary:
    """Per-step probability vectors, their expected embeddings, and hard tokens."""

    prob_vectors: list[Tensor]
    expected_embeddings: list[Tensor]
    tokens: list[int]


@dataclass
class LossBreakdown:
    """The three loss values of one step and the alpha that combined them."""

    nll: float
    nll_sum: float
    combined: float
    alpha: float

    def check_bounds(self) -> None:
        lo = min(self.nll, self.nll_sum)
        hi = max(self.nll, self.nll_sum)
        if not (lo - 1e-6 <= self.combined <= hi + 1e-6):
            raise ContractError(f"combined loss {self.combined} outside [{lo}, {hi}]")


def expected_embeddings(prob_vectors: Sequence[Tensor], embedding: Tensor) -> list[Tensor]:
    """e_j = E p_j for each probability vector, as rows in embedding space.

    Gradient flows into both the table and the probability vectors.
    """
    d, v = embedding.shape
    for p in prob_vectors:
        if p.shape != (v,):
            raise ShapeError(f"probability vector of shape {p.shape} does not match vocabulary size {v}")
    matrix = _embedding_matrix(prob_vectors, embedding)
    return [T.index_row(matrix, j) for j in range(matrix.shape[0])]


def _embedding_matrix(prob_vectors: Sequence[Tensor], embedding: Tensor) -> Tensor:
    stacked = T.stack_rows(list(prob_vectors))  # [m, V]
    return T.matmul(stacked, T.transpose(embedding))  # [m, D]


def mixed_loss(nll_sum: Tensor, nll: Tensor, alpha: float) -> Tensor:
    """Convex combination alpha * nll_sum + (1 - alpha) * nll.

    At an exact endpoint the zero-weight branch is dropped from the graph, so
    the module it reaches receives no gradient at all (and in particular the
    optimizer's decoupled weight decay cannot move it).
    """
    if not (0.0 <= alpha <= 1.0):
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return T.scale(nll_sum, 1.0)
    if alpha == 0.0:
        return T.scale(nll, 1.0)
    return T.add(T.scale(nll_sum, alpha), T.scale(nll, 1.0 - alpha))


class SumTraPipeline:
    """Summarizer (sum) cascaded into translator (tra) over one shared vocabulary."""

    def __init__(self, sum_model: Seq2SeqModel, tra_model: Seq2SeqModel, vocab: Vocab,
                 m_cap: int | None = None, alpha: float = DEFAULT_ALPHA):
        if sum_model.config.vocab_size != tra_model.config.vocab_size:
            raise ContractError(
                f"modules must share one vocabulary: {sum_model.config.vocab_size} vs {tra_model.config.vocab_size}")
        if sum_model.config.d_model != tra_model.config.d_model:
            raise ContractError(
                f"modules must share embedding width: {sum_model.config.d_model} vs {tra_model.config.d_model}")
        if vocab.vocab_size != sum_model.config.vocab_size:
            raise ContractError(f"vocab size {vocab.vocab_size} does not match model {sum_model.config.vocab_size}")
        if not (0.0 <= alpha <= 1.0):
            raise ContractError(f"alpha must be in [0, 1], got {alpha}")
        self.sum = sum_model
        self.tra = tra_model
        self.vocab = vocab
        self.m_cap = sum_model.config.max_tgt_len if m_cap is None else min(m_cap, sum_model.config.max_tgt_len)
        self.alpha = alpha

    def train_mode(self, rng: np.random.Generator) -> None:
        self.sum.train_mode(rng)
        self.tra.train_mode(rng)

    def eval_mode(self) -> None:
        self.sum.eval_mode()
        self.tra.eval_mode()

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"sum.{n}", p) for n, p in self.sum.parameters()] + \
               [(f"tra.{n}", p) for n, p in self.tra.parameters()]

    def _soft_summary(self, x: Sequence[int]) -> SoftSummary:
        result = self.sum.greedy_decode(x, self.vocab.LANG_SRC, self.m_cap)
        embs = expected_embeddings(result.prob_vectors, self.tra.embedding)
        return SoftSummary(result.prob_vectors, embs, result.tokens)

    def _translator_input(self, soft: SoftSummary) -> Tensor:
        """Soft summary as translator encoder input, led by the literal source tag.

        The summarizer's decode starts from the forced language tag, so the
        tag itself has no probability vector; prepending its exact embedding
        column reproduces the summary format the translator was trained on.
        """
        tag_row = T.embedding_select(self.tra.embedding, [self.vocab.LANG_SRC])
        matrix = _embedding_matrix(soft.prob_vectors, self.tra.embedding)
        return T.concatenate([tag_row, matrix], axis=0)

    def _content_tokens(self, tokens: Sequence[int]) -> list[int]:
        return [t for t in tokens if t != self.vocab.EOS]

    def xls_forward(self, x: Sequence[int], y: Sequence[int]) -> tuple[Tensor, SoftSummary]:
        """Token-mean NLL of reference ``y`` given document ``x`` via the soft summary."""
        if not y or y[0] != self.vocab.LANG_TGT:
            raise ContractError(f"reference must start with the target language tag {self.vocab.LANG_TGT}")
        soft = self._soft_summary(x)
        if not self._content_tokens(soft.tokens):
            raise DegenerateSummaryError("summarizer emitted no content tokens; nothing to translate")
        log_probs = self.tra.forward_teacher_forced(self._translator_input(soft), y, self.vocab.LANG_TGT)
        nll = T.cross_entropy(log_probs, list(y[1:]))
        return nll, soft

    def backtranslation_loss(self, x: Sequence[int], y_hat: Sequence[int]) -> Tensor:
        """Teacher-forced NLL of the back-translated reference under the summarizer."""
        if not y_hat or y_hat[0] != self.vocab.LANG_SRC:
            raise ContractError(f"back-translation must start with the source language tag {self.vocab.LANG_SRC}")
        log_probs = self.sum.forward_teacher_forced(x, y_hat, self.vocab.LANG_SRC)
        return T.cross_entropy(log_probs, list(y_hat[1:]))

    def infer(self, x: Sequence[int], mode: str = "hard") -> tuple[list[int], list[int]]:
        """Decode a translation; returns (translation, intermediate summary).

        Hard mode feeds the summarizer's argmax tokens through the translator's
        normal embedding path; soft mode feeds the expected embeddings.  A
        summary with no content yields an empty translation.
        """
        if mode not in ("hard", "soft"):
            raise ContractError(f"mode must be 'hard' or 'soft', got {mode!r}")
        result = self.sum.greedy_decode(x, self.vocab.LANG_SRC, self.m_cap)
        summary = [self.vocab.LANG_SRC] + result.tokens
        if not self._content_tokens(result.tokens):
            return [], summary
        if mode == "hard":
            out = self.tra.greedy_decode(summary, self.vocab.LANG_TGT)
        else:
            soft = SoftSummary(result.prob_vectors,
                               expected_embeddings(result.prob_vectors, self.tra.embedding),
                               result.tokens)
            out = self.tra.greedy_decode_from_embeddings(self._translator_input(soft), self.vocab.LANG_TGT)
        return [self.vocab.LANG_TGT] + out.tokens, summary


def save_pipeline(pipeline: SumTraPipeline, path: str | Path) -> None:
    """One file holding both module checkpoints as named sub-blobs."""
    sum_blob = model_bytes(pipeline.sum)
    tra_blob = model_bytes(pipeline.tra)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "pipeline",
        "alpha": pipeline.alpha,
        "m_cap": pipeline.m_cap,
        "content_size": pipeline.vocab.content_size,
        "sub": [{"name": "sum", "length": len(sum_blob)}, {"name": "tra", "length": len(tra_blob)}],
    }
    payload = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)
    buf.write(sum_blob)
    buf.write(tra_blob)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())


def load_pipeline(path: str | Path) -> SumTraPipeline:
    fh = io.BytesIO(Path(path).read_bytes())
    header = _read_header(fh)
    if header.get("kind") != "pipeline":
        raise FormatError(f"kind {header.get('kind')!r} is not a pipeline checkpoint")
    blobs = {}
    for entry in header["sub"]:
        blobs[entry["name"]] = fh.read(entry["length"])
        if len(blobs[entry["name"]]) != entry["length"]:
            raise FormatError(f"truncated sub-checkpoint {entry['name']!r}")
    if set(blobs) != {"sum", "tra"}:
        raise FormatError(f"expected sub-checkpoints 'sum' and 'tra', got {sorted(blobs)}")
    return SumTraPipeline(
        model_from_bytes(blobs["sum"]),
        model_from_bytes(blobs["tra"]),
        Vocab(header["content_size"]),
        m_cap=header["m_cap"],
        alpha=header["alpha"],
    )
