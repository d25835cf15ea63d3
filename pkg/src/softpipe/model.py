"""Compact encoder-decoder transformer over a shared vocabulary.

The same class serves as summarizer, translator, reverse translator, and
direct baseline; only the training data differs.  Input embedding, decoder
embedding, and the output projection share one ``[D, V]`` table, which is
what makes expected embeddings well-defined: a probability vector mixed with
the table's columns lands in the same space as an ordinary token lookup, so
precomputed embedding rows can be fed to the encoder in place of tokens and
produce identical outputs when they equal actual table columns.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from softpipe import tensor as T
from softpipe.exceptions import ContractError, FormatError
from softpipe.tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SOFTPIPE1"
CHECKPOINT_VERSION = 1

STOP_EOS = "eos"
STOP_MAX = "max-length"

EOS_ID = 2  # fixed by the task vocabulary layout


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    ffn_dim: int = 128
    max_src_len: int = 64
    max_tgt_len: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        dims = (self.vocab_size, self.d_model, self.n_heads, self.n_layers_enc,
                self.n_layers_dec, self.ffn_dim, self.max_src_len, self.max_tgt_len)
        if any(d < 1 for d in dims):
            raise ContractError(f"all config dimensions must be >= 1: {self}")
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not (0.0 <= self.dropout < 1.0):
            raise ContractError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def tiny(cls, vocab_size: int = 16) -> "ModelConfig":
        """Smallest config that still exercises every code path (for grad checks)."""
        return cls(vocab_size=vocab_size, d_model=8, n_heads=2, n_layers_enc=1,
                   n_layers_dec=1, ffn_dim=16, max_src_len=16, max_tgt_len=8)


@dataclass
class GreedyDecodeResult:
    """Free-running decode output: hard tokens plus their probability vectors.

    The probability vectors keep their tape history, so gradients can flow
    through them; the token choices themselves are discrete and carry none.
    """

    tokens: list[int]
    prob_vectors: list[Tensor]
    stop_reason: str


def sinusoidal_encoding(max_len: int, d_model: int) -> np.ndarray:
    """Parameter-free positional table, computed in float64 for determinism."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


class Seq2SeqModel:
    """Encoder-decoder with tied embeddings and pre-norm residual blocks."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.truncation_count = 0
        self._train_rng: np.random.Generator | None = None
        self._init_params(np.random.default_rng(seed))
        pe_len = max(config.max_src_len, config.max_tgt_len)
        self._pe = sinusoidal_encoding(pe_len, config.d_model).astype(self.dtype)

    # -- parameters ---------------------------------------------------------

    def _param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = T.parameter(data.astype(self.dtype))

    def _init_linear(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self._param(f"{name}.w", rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        self._param(f"{name}.b", np.zeros(fan_out))

    def _init_attn(self, rng, name: str) -> None:
        d = self.config.d_model
        for proj in ("q", "k", "v", "o"):
            self._init_linear(rng, f"{name}.{proj}", d, d)

    def _init_ln(self, name: str) -> None:
        d = self.config.d_model
        self._param(f"{name}.g", np.ones(d))
        self._param(f"{name}.b", np.zeros(d))

    def _init_params(self, rng) -> None:
        cfg = self.config
        self._param("embedding", rng.normal(0.0, 0.02, size=(cfg.d_model, cfg.vocab_size)))
        for i in range(cfg.n_layers_enc):
            self._init_ln(f"enc.{i}.ln1")
            self._init_attn(rng, f"enc.{i}.attn")
            self._init_ln(f"enc.{i}.ln2")
            self._init_linear(rng, f"enc.{i}.ffn.1", cfg.d_model, cfg.ffn_dim)
            self._init_linear(rng, f"enc.{i}.ffn.2", cfg.ffn_dim, cfg.d_model)
        self._init_ln("enc.ln")
        for i in range(cfg.n_layers_dec):
            self._init_ln(f"dec.{i}.ln1")
            self._init_attn(rng, f"dec.{i}.self")
            self._init_ln(f"dec.{i}.ln2")
            self._init_attn(rng, f"dec.{i}.cross")
            self._init_ln(f"dec.{i}.ln3")
            self._init_linear(rng, f"dec.{i}.ffn.1", cfg.d_model, cfg.ffn_dim)
            self._init_linear(rng, f"dec.{i}.ffn.2", cfg.ffn_dim, cfg.d_model)
        self._init_ln("dec.ln")

    @property
    def embedding(self) -> Tensor:
        return self.params["embedding"]

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Named parameters in a stable, deterministic order."""
        return list(self.params.items())

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for _, p in self.parameters():
            p.requires_grad = flag

    # -- train/eval mode ----------------------------------------------------

    def train_mode(self, rng: np.random.Generator) -> None:
        self._train_rng = rng

    def eval_mode(self) -> None:
        self._train_rng = None

    def _maybe_dropout(self, x: Tensor) -> Tensor:
        if self._train_rng is None or self.config.dropout == 0.0:
            return x
        return T.dropout(x, self.config.dropout, self._train_rng)

    # -- forward pieces -----------------------------------------------------

    def _positional(self, length: int) -> Tensor:
        return T.tensor(self._pe[:length])

    def _embed_tokens(self, tokens: Sequence[int]) -> Tensor:
        emb = T.embedding_select(self.embedding, tokens)
        return self._embed_common(emb)

    def _embed_common(self, emb: Tensor) -> Tensor:
        scaled = T.scale(emb, math.sqrt(self.config.d_model))
        return self._maybe_dropout(T.add(scaled, self._positional(emb.shape[0])))

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor, mask: Tensor | None) -> Tensor:
        p = self.params
        d, h = self.config.d_model, self.config.n_heads
        dh = d // h
        tq, tk = q_in.shape[0], kv_in.shape[0]
        q = T.add(T.matmul(q_in, p[f"{prefix}.q.w"]), p[f"{prefix}.q.b"])
        k = T.add(T.matmul(kv_in, p[f"{prefix}.k.w"]), p[f"{prefix}.k.b"])
        v = T.add(T.matmul(kv_in, p[f"{prefix}.v.w"]), p[f"{prefix}.v.b"])
        qh = T.transpose(T.reshape(q, (tq, h, dh)), (1, 0, 2))
        kh = T.transpose(T.reshape(k, (tk, h, dh)), (1, 2, 0))
        vh = T.transpose(T.reshape(v, (tk, h, dh)), (1, 0, 2))
        scores = T.scale(T.matmul(qh, kh), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = T.add(scores, mask)
        ctx = T.matmul(T.softmax(scores, axis=-1), vh)
        merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (tq, d))
        out = T.add(T.matmul(merged, p[f"{prefix}.o.w"]), p[f"{prefix}.o.b"])
        return self._maybe_dropout(out)

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        hidden = T.relu(T.add(T.matmul(x, p[f"{prefix}.1.w"]), p[f"{prefix}.1.b"]))
        return self._maybe_dropout(T.add(T.matmul(hidden, p[f"{prefix}.2.w"]), p[f"{prefix}.2.b"]))

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _causal_mask(self, t: int) -> Tensor:
        mask = np.triu(np.full((t, t), -1e9, dtype=self.dtype), k=1)
        return T.tensor(mask)

    def _run_encoder(self, x: Tensor) -> Tensor:
        for i in range(self.config.n_layers_enc):
            normed = self._ln(f"enc.{i}.ln1", x)
            x = T.add(x, self._attention(f"enc.{i}.attn", normed, normed, None))
            x = T.add(x, self._ffn(f"enc.{i}.ffn", self._ln(f"enc.{i}.ln2", x)))
        return self._ln("enc.ln", x)

    def _run_decoder(self, prefix_tokens: Sequence[int], enc: Tensor) -> Tensor:
        x = self._embed_tokens(prefix_tokens)
        mask = self._causal_mask(len(prefix_tokens))
        for i in range(self.config.n_layers_dec):
            normed = self._ln(f"dec.{i}.ln1", x)
            x = T.add(x, self._attention(f"dec.{i}.self", normed, normed, mask))
            x = T.add(x, self._attention(f"dec.{i}.cross", self._ln(f"dec.{i}.ln2", x), enc, None))
            x = T.add(x, self._ffn(f"dec.{i}.ffn", self._ln(f"dec.{i}.ln3", x)))
        h = self._ln("dec.ln", x)
        return T.matmul(h, self.embedding)  # tied output projection -> logits [T, V]

    # -- public forward API -------------------------------------------------

    def encode(self, src: Sequence[int]) -> Tensor:
        """Contextual states for a token source; over-length inputs are truncated."""
        src = list(src)
        if len(src) > self.config.max_src_len:
            self.truncation_count += 1
            logger.warning("source of length %d truncated to %d", len(src), self.config.max_src_len)
            src = src[: self.config.max_src_len]
        return self._run_encoder(self._embed_tokens(src))

    def encode_embeddings(self, emb: Tensor) -> Tensor:
        """Encoder pass over precomputed embedding rows (embedding-layer bypass)."""
        if emb.ndim != 2 or emb.shape[1] != self.config.d_model:
            raise ContractError(f"expected [m, {self.config.d_model}] embeddings, got {emb.shape}")
        if emb.shape[0] > self.config.max_src_len:
            raise ContractError(f"embedding input of length {emb.shape[0]} exceeds max_src_len {self.config.max_src_len}")
        return self._run_encoder(self._embed_common(emb))

    def _check_target(self, tgt: Sequence[int], lang_tag: int) -> None:
        if len(tgt) < 2 or tgt[0] != lang_tag:
            raise ContractError(f"target must begin with lang tag {lang_tag}, got {list(tgt[:2])}...")
        if tgt[-1] != EOS_ID:
            raise ContractError(f"target must end with EOS ({EOS_ID}), got {tgt[-1]}")

    def forward_teacher_forced(self, src: Sequence[int] | Tensor, tgt: Sequence[int], lang_tag: int) -> Tensor:
        """Log-probabilities ``[T, V]`` for each next-token prediction of ``tgt``.

        ``src`` may be a token sequence or a precomputed ``[m, D]`` embedding
        tensor, which bypasses the embedding lookup but is otherwise treated
        identically.  Row ``t`` conditions on ``tgt[0..t]`` and the source.
        """
        self._check_target(tgt, lang_tag)
        enc = self.encode_embeddings(src) if isinstance(src, Tensor) else self.encode(src)
        logits = self._run_decoder(list(tgt[:-1]), enc)
        return T.log_softmax(logits, axis=-1)

    def _greedy_from_states(self, enc: Tensor, lang_tag: int, max_len: int) -> GreedyDecodeResult:
        prefix = [lang_tag]
        tokens: list[int] = []
        probs: list[Tensor] = []
        for _ in range(max_len):
            logits = self._run_decoder(prefix, enc)
            p = T.softmax(T.index_row(logits, len(prefix) - 1), axis=-1)
            tok = int(np.argmax(p.data))  # ties resolve to the lowest id
            tokens.append(tok)
            probs.append(p)
            if tok == EOS_ID:
                return GreedyDecodeResult(tokens, probs, STOP_EOS)
            prefix.append(tok)
        return GreedyDecodeResult(tokens, probs, STOP_MAX)

    def greedy_decode(self, src: Sequence[int], lang_tag: int, max_len: int | None = None) -> GreedyDecodeResult:
        """Free-running argmax decode, stopping at EOS or the length cap."""
        if max_len is None:
            max_len = self.config.max_tgt_len
        max_len = min(max_len, self.config.max_tgt_len)
        return self._greedy_from_states(self.encode(src), lang_tag, max_len)

    def greedy_decode_from_embeddings(self, emb: Tensor, lang_tag: int, max_len: int | None = None) -> GreedyDecodeResult:
        if max_len is None:
            max_len = self.config.max_tgt_len
        max_len = min(max_len, self.config.max_tgt_len)
        return self._greedy_from_states(self.encode_embeddings(emb), lang_tag, max_len)

    # -- checkpointing ------------------------------------------------------

    def state_blobs(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.data.astype(np.float32)) for name, p in self.parameters()]

    def load_state(self, blobs: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            p.data = blobs[name].astype(self.dtype)
            p.grad = None


def model_bytes(model: Seq2SeqModel) -> bytes:
    """Serialize: magic, a JSON header, then named float32 parameter blobs."""
    blobs = model.state_blobs()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "model",
        "config": asdict(model.config),
        "params": [{"name": name, "shape": list(arr.shape)} for name, arr in blobs],
    }
    payload = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)
    for _, arr in blobs:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Seq2SeqModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_bytes(model))


def _read_header(fh) -> dict:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (header_len,) = struct.unpack("<I", fh.read(4))
    try:
        header = json.loads(fh.read(header_len))
    except ValueError as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"format_version {header.get('format_version')} unsupported (expected {CHECKPOINT_VERSION})")
    return header


def model_from_bytes(raw: bytes, dtype=np.float32) -> Seq2SeqModel:
    """Reconstruct a model; any header/blob inconsistency is a format error."""
    fh = io.BytesIO(raw)
    header = _read_header(fh)
    if header.get("kind") != "model":
        raise FormatError(f"kind {header.get('kind')!r} is not a model checkpoint")
    try:
        config = ModelConfig(**header["config"])
    except (TypeError, KeyError) as exc:
        raise FormatError(f"bad config section: {exc}") from exc
    model = Seq2SeqModel(config, seed=0, dtype=dtype)
    expected = {name: p.shape for name, p in model.parameters()}
    declared = [(entry["name"], tuple(entry["shape"])) for entry in header["params"]]
    if [n for n, _ in declared] != list(expected):
        raise FormatError("parameter names do not match the declared config")
    blobs = {}
    for name, shape in declared:
        if shape != expected[name]:
            raise FormatError(f"shape mismatch for {name}: file has {shape}, config implies {expected[name]}")
        count = int(np.prod(shape)) if shape else 1
        chunk = fh.read(4 * count)
        if len(chunk) != 4 * count:
            raise FormatError(f"truncated blob for {name}")
        blobs[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
    if fh.read(1):
        raise FormatError("trailing bytes after final parameter blob")
    model.load_state(blobs)
    return model


def load_checkpoint(path: str | Path, dtype=np.float32) -> Seq2SeqModel:
    return model_from_bytes(Path(path).read_bytes(), dtype=dtype)
