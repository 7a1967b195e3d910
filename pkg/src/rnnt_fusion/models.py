"""Transducer, external neural LM, cold-fusion head, and checkpoint I/O.

The transducer follows the classic three-network split: an encoder over
stacked/subsampled feature windows, an autoregressive predictor over
previously emitted tokens, and a joiner that sums the two embeddings,
squashes with tanh, and projects to V+1 logits (index V is blank).

The cold-fusion head consumes the external LM's *logits*: it softmaxes
them, projects through a bottleneck+expansion pair, concatenates with
the predictor embedding, applies a learned sigmoid fine gate, and
projects back to the predictor's width. Its output replaces the
predictor embedding at the joiner with no other code path changed, so a
model with the head disabled is bit-identical to the plain baseline.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import (
    CheckpointFormatError,
    CheckpointKindError,
    FingerprintMismatchError,
    ShapeError,
)
from .layers import Linear, LstmStack, LstmState, stack_subsample
from .numerics import Tensor

CHECKPOINT_MAGIC = b"RNTFCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TransducerConfig:
    vocab_size: int
    feature_dim: int = 8
    stack: int = 3
    stride: int = 2
    encoder_layers: int = 2
    encoder_hidden: int = 64
    predictor_layers: int = 1
    predictor_hidden: int = 64
    embed_dim: int = 32
    joint_dim: int = 64
    cold_fusion: bool = False
    cf_bottleneck: int = 16


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    embed_dim: int = 32
    layers: int = 2
    hidden: int = 64


class ColdFusionHead:
    """Gated fusion of predictor embedding and external-LM logits.

    Pipeline: s = softmax(z_lm); h_lm = expand(bottleneck(s));
    g = sigmoid(W_g [h_pred; h_lm] + b_g); out = combine(g * [h_pred; h_lm]).
    All projections are plain linear layers.
    """

    def __init__(self, rng: np.random.Generator, joint_dim: int, vocab_size: int, bottleneck: int) -> None:
        self.bottleneck = Linear(rng, vocab_size, bottleneck)
        self.expand = Linear(rng, bottleneck, joint_dim)
        self.gate = Linear(rng, 2 * joint_dim, 2 * joint_dim)
        self.combine = Linear(rng, 2 * joint_dim, joint_dim)

    def __call__(self, h_pred: Tensor, z_lm: Tensor) -> Tensor:
        s = nm.softmax(z_lm, axis=-1)
        h_lm = self.expand(self.bottleneck(s))
        cat = nm.concat([h_pred, h_lm], axis=-1)
        g = nm.sigmoid(self.gate(cat))
        return self.combine(nm.mul(g, cat))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.bottleneck.named_params(f"{prefix}.bottleneck"))
        params.update(self.expand.named_params(f"{prefix}.expand"))
        params.update(self.gate.named_params(f"{prefix}.gate"))
        params.update(self.combine.named_params(f"{prefix}.combine"))
        return params


def cold_fuse(head: ColdFusionHead, h_pred: Tensor, z_lm: Tensor) -> Tensor:
    return head(h_pred, z_lm)


class TransducerModel:
    """Encoder + predictor + joiner, with an optional cold-fusion head.

    The predictor embedding table has vocab_size + 1 rows; the extra row
    is the learned start-of-sequence embedding used for an empty history
    (blank is never a predictor input).
    """

    kind = "transducer"

    def __init__(self, rng: np.random.Generator, config: TransducerConfig, vocab_fingerprint: str) -> None:
        c = config
        self.config = c
        self.vocab_fingerprint = vocab_fingerprint
        self.blank_id = c.vocab_size
        self.embed_table = Tensor(
            rng.uniform(-0.1, 0.1, size=(c.vocab_size + 1, c.embed_dim))
        )
        self.predictor_stack = LstmStack(
            rng, c.embed_dim, [c.predictor_hidden] * c.predictor_layers
        )
        self.predictor_proj = Linear(rng, c.predictor_hidden, c.joint_dim)
        self.encoder_stack = LstmStack(
            rng, c.feature_dim * c.stack, [c.encoder_hidden] * c.encoder_layers
        )
        self.encoder_proj = Linear(rng, c.encoder_hidden, c.joint_dim)
        self.joiner = Linear(rng, c.joint_dim, c.vocab_size + 1)
        self.cold_fusion: ColdFusionHead | None = None
        if c.cold_fusion:
            self.cold_fusion = ColdFusionHead(rng, c.joint_dim, c.vocab_size, c.cf_bottleneck)

    # -- parameter registry -------------------------------------------------
    def named_params(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"predictor.embed": self.embed_table}
        params.update(self.predictor_stack.named_params("predictor.lstm"))
        params.update(self.predictor_proj.named_params("predictor.proj"))
        params.update(self.encoder_stack.named_params("encoder.lstm"))
        params.update(self.encoder_proj.named_params("encoder.proj"))
        params.update(self.joiner.named_params("joiner"))
        if self.cold_fusion is not None:
            params.update(self.cold_fusion.named_params("cold_fusion"))
        return params

    # -- forward pieces ------------------------------------------------------
    def encode(self, frames: np.ndarray) -> Tensor:
        """Feature frames [T×d] -> acoustic embeddings [T'×joint_dim]."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise ShapeError(f"encode needs a nonempty [T×d] input, got {frames.shape}")
        if frames.shape[1] != self.config.feature_dim:
            raise ShapeError(
                f"feature dim {frames.shape[1]} != configured {self.config.feature_dim}"
            )
        windows = stack_subsample(frames, self.config.stack, self.config.stride)
        state = self.encoder_stack.init_state(batch=1)
        outs = []
        for i in range(windows.shape[0]):
            y, state = self.encoder_stack.step(Tensor(windows[i : i + 1]), state)
            outs.append(self.encoder_proj(y))
        return nm.concat_rows(outs)

    def predictor_step(self, token: int | None, state: LstmState | None) -> tuple[Tensor, LstmState]:
        """One predictor step; `token=None` means start-of-sequence."""
        if state is None:
            state = self.predictor_stack.init_state(batch=1)
        idx = self.config.vocab_size if token is None else int(token)
        if token is not None and not 0 <= idx < self.config.vocab_size:
            raise ValueError(f"predictor history token {token} outside vocabulary (blank is not allowed)")
        x = nm.take_rows(self.embed_table, [idx])
        y, state = self.predictor_stack.step(x, state)
        h = self.predictor_proj(y)
        return nm.reshape(h, (self.config.joint_dim,)), state

    def predict(self, tokens) -> tuple[Tensor, LstmState]:
        """Embedding for the position after `tokens` (empty history allowed)."""
        h, state = self.predictor_step(None, None)
        for t in tokens:
            h, state = self.predictor_step(t, state)
        return h, state

    def join(self, h_enc: Tensor, h_side: Tensor) -> Tensor:
        """Sum-combine then tanh then linear to V+1 logits."""
        if h_enc.shape != h_side.shape:
            raise ShapeError(f"join: {h_enc.shape} vs {h_side.shape}")
        return self.joiner(nm.tanh(nm.add(h_enc, h_side)))


class NeuralLM:
    """Autoregressive token LM exposing per-step logits over V non-blank symbols."""

    kind = "nnlm"

    def __init__(self, rng: np.random.Generator, config: LmConfig, vocab_fingerprint: str) -> None:
        c = config
        self.config = c
        self.vocab_fingerprint = vocab_fingerprint
        self.embed_table = Tensor(rng.uniform(-0.1, 0.1, size=(c.vocab_size + 1, c.embed_dim)))
        self.stack = LstmStack(rng, c.embed_dim, [c.hidden] * c.layers)
        self.proj = Linear(rng, c.hidden, c.vocab_size)

    def named_params(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"embed": self.embed_table}
        params.update(self.stack.named_params("lstm"))
        params.update(self.proj.named_params("proj"))
        return params

    def step(self, token: int | None, state: LstmState | None) -> tuple[Tensor, LstmState]:
        """Next-token logits [V] given one more history token (None = start)."""
        if state is None:
            state = self.stack.init_state(batch=1)
        idx = self.config.vocab_size if token is None else int(token)
        if token is not None and not 0 <= idx < self.config.vocab_size:
            raise ValueError(f"LM token {token} outside vocabulary")
        x = nm.take_rows(self.embed_table, [idx])
        y, state = self.stack.step(x, state)
        z = self.proj(y)
        return nm.reshape(z, (self.config.vocab_size,)), state

    def score_tokens(self, tokens) -> np.ndarray:
        """Log P(token_i | prefix) for each position; forward-only numpy."""
        out = np.empty(len(tokens))
        state: LstmState | None = None
        prev: int | None = None
        for i, t in enumerate(tokens):
            z, state = self.step(prev, state)
            out[i] = nm.np_log_softmax(z.data)[t]
            prev = t
        return out


# Spec-facing functional aliases.
def encode(model: TransducerModel, frames: np.ndarray) -> Tensor:
    return model.encode(frames)


def predict(model: TransducerModel, tokens) -> tuple[Tensor, LstmState]:
    return model.predict(tokens)


def join(model: TransducerModel, h_enc: Tensor, h_side: Tensor) -> Tensor:
    return model.join(h_enc, h_side)


def lm_step(lm: NeuralLM, token: int | None, state: LstmState | None) -> tuple[Tensor, LstmState]:
    return lm.step(token, state)


# -- checkpoint format -------------------------------------------------------
#
#   bytes 0..7   magic "RNTFCKPT"
#   bytes 8..11  format version, uint32 little-endian
#   bytes 12..19 metadata length N, uint64 little-endian
#   bytes 20..   N bytes of UTF-8 JSON metadata:
#                {"kind", "config", "vocab_fingerprint", "blank_id",
#                 "params": [[name, [shape...]], ...]}
#   then one raw blob per entry of "params", in order: little-endian
#   float64, row-major, no padding.
#
# JSON is dumped with sorted keys and fixed separators, so saving the
# same parameters always produces byte-identical files.


def _metadata(obj) -> dict:
    params = obj.named_params()
    return {
        "kind": obj.kind,
        "config": dataclasses.asdict(obj.config),
        "vocab_fingerprint": obj.vocab_fingerprint,
        "blank_id": getattr(obj, "blank_id", None),
        "params": [[name, list(p.shape)] for name, p in params.items()],
    }


def save_checkpoint(obj: TransducerModel | NeuralLM, path) -> None:
    meta = json.dumps(_metadata(obj), sort_keys=True, separators=(",", ":")).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(meta))
    blob += meta
    for p in obj.named_params().values():
        blob += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path, expected_fingerprint: str | None = None) -> TransducerModel | NeuralLM:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack("<Q", raw[12:20])
    if len(raw) < 20 + meta_len:
        raise CheckpointFormatError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(raw[20 : 20 + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt metadata: {e}") from e
    fingerprint = meta["vocab_fingerprint"]
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: vocab fingerprint {fingerprint} != expected {expected_fingerprint}"
        )

    rng = np.random.default_rng(0)  # placeholder init, fully overwritten below
    if meta["kind"] == "transducer":
        obj: TransducerModel | NeuralLM = TransducerModel(
            rng, TransducerConfig(**meta["config"]), fingerprint
        )
    elif meta["kind"] == "nnlm":
        obj = NeuralLM(rng, LmConfig(**meta["config"]), fingerprint)
    else:
        raise CheckpointFormatError(f"{path}: unknown model kind {meta['kind']!r}")

    params = obj.named_params()
    meta_names = [name for name, _ in meta["params"]]
    if meta_names != list(params.keys()):
        missing = set(params) - set(meta_names)
        extra = set(meta_names) - set(params)
        raise CheckpointFormatError(
            f"{path}: parameter names disagree (missing {sorted(missing)}, extra {sorted(extra)})"
        )
    offset = 20 + meta_len
    for name, shape in meta["params"]:
        p = params[name]
        if list(p.shape) != list(shape):
            raise CheckpointFormatError(f"{path}: shape mismatch for {name}")
        n_bytes = int(np.prod(shape, dtype=int)) * 8 if shape else 8
        chunk = raw[offset : offset + n_bytes]
        if len(chunk) != n_bytes:
            raise CheckpointFormatError(f"{path}: truncated blob for {name}")
        p.data[...] = np.frombuffer(chunk, dtype="<f8").reshape(p.shape)
        offset += n_bytes
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return obj


def load_transducer(path, expected_fingerprint: str | None = None) -> TransducerModel:
    obj = load_checkpoint(path, expected_fingerprint)
    if not isinstance(obj, TransducerModel):
        raise CheckpointKindError(f"{path} holds a {obj.kind} checkpoint, not a transducer")
    return obj


def load_lm(path, expected_fingerprint: str | None = None) -> NeuralLM:
    obj = load_checkpoint(path, expected_fingerprint)
    if not isinstance(obj, NeuralLM):
        raise CheckpointKindError(f"{path} holds a {obj.kind} checkpoint, not an LM")
    return obj
