"""Time-synchronous beam search with blank-aware shallow and cold fusion.

Per encoder frame, each hypothesis may emit up to `max_symbols_per_frame`
labels before taking the mandatory blank that advances to the next
frame. A blank transition adds only the transducer's blank log-prob; a
non-blank emission of token k adds log P_rnnt(k) + λ·log P_lm(k). The
external LM is applied only at emissions, so decoding stays streamable.

Hypotheses with identical token sequences merge by log-sum-exp of their
path masses (ties broken lexicographically). Predictor and LM states
depend only on the token prefix, so they are memoized per prefix: the
shallow score and the cold-fusion input share a single lm_step per
emitted token. Internal beam scores are the merged (and possibly
pruned) path masses; the returned n-best is re-scored exactly through
the full alignment lattice plus the λ·LM term, so a reported log_score
always equals an independent re-scoring of its token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import FingerprintMismatchError, SessionError, ShapeError
from .layers import LstmState
from .models import NeuralLM, TransducerModel
from .numerics import Tensor, np_log_softmax
from .transducer import rnnt_forward

FUSION_MODES = ("none", "shallow", "cold", "shallow_cold")


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 15
    lam: float = 0.0
    max_symbols_per_frame: int = 3
    fusion_mode: str = "none"

    def __post_init__(self) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_symbols_per_frame < 1:
            raise ValueError("max_symbols_per_frame must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.lam != 0 and not self.uses_shallow:
            raise ValueError("lambda must be 0 when fusion_mode excludes shallow fusion")

    @property
    def uses_shallow(self) -> bool:
        return self.fusion_mode in ("shallow", "shallow_cold")

    @property
    def uses_cold(self) -> bool:
        return self.fusion_mode in ("cold", "shallow_cold")

    @property
    def uses_lm(self) -> bool:
        return self.fusion_mode != "none"


def fused_score(rnnt_logprob: float, lm_logprob: float, lam: float, is_blank: bool) -> float:
    """Log-linear interpolation applied only to non-blank emissions."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if not (np.isfinite(rnnt_logprob) and np.isfinite(lm_logprob)):
        raise ValueError("fused_score needs finite inputs")
    if is_blank:
        return rnnt_logprob
    return rnnt_logprob + lam * lm_logprob


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    log_score: float
    predictor_state: LstmState | None = None
    lm_state: LstmState | None = None


@dataclass
class Transition:
    """One scored beam transition, for decode-trace audits."""

    frame: int
    tokens: tuple[int, ...]
    symbol: int
    rnnt_logprob: float
    lm_term: float


@dataclass
class DecodeResult:
    best: Hypothesis
    nbest: list[Hypothesis]
    lm_steps: int
    extensions: int
    trace: list[Transition] | None = None


class _Entry:
    __slots__ = ("side", "pred_state", "lm_state", "z_lm", "lm_logp")

    def __init__(self, side, pred_state, lm_state, z_lm, lm_logp):
        self.side = side  # joiner-side embedding: h_pred, or h_cf under cold fusion
        self.pred_state = pred_state
        self.lm_state = lm_state
        self.z_lm = z_lm
        self.lm_logp = lm_logp


class _PrefixCache:
    """Predictor/LM state memo keyed by token prefix (append-only)."""

    def __init__(self, model: TransducerModel, lm: NeuralLM | None, config: DecodeConfig):
        self.model = model
        self.lm = lm
        self.config = config
        self.entries: dict[tuple[int, ...], _Entry] = {}
        self.lm_steps = 0
        self.extensions = 0

    def entry(self, tokens: tuple[int, ...]) -> _Entry:
        hit = self.entries.get(tokens)
        if hit is not None:
            return hit
        if tokens:
            parent = self.entry(tokens[:-1])
            self.extensions += 1
            h_pred, pred_state = self.model.predictor_step(tokens[-1], parent.pred_state)
        else:
            h_pred, pred_state = self.model.predictor_step(None, None)
        lm_state = z_lm = lm_logp = None
        if self.lm is not None:
            prev_state = self.entries[tokens[:-1]].lm_state if tokens else None
            z, lm_state = self.lm.step(tokens[-1] if tokens else None, prev_state)
            self.lm_steps += 1
            z_lm = z
            lm_logp = np_log_softmax(z.data)
        side = h_pred
        if self.config.uses_cold:
            side = self.model.cold_fusion(h_pred, z_lm)
        e = _Entry(side, pred_state, lm_state, z_lm, lm_logp)
        self.entries[tokens] = e
        return e


def _merge(pool: dict, tokens: tuple[int, ...], score: float) -> None:
    old = pool.get(tokens)
    pool[tokens] = score if old is None else float(np.logaddexp(old, score))


def _prune(pool: dict, k: int) -> dict:
    if len(pool) <= k:
        return dict(sorted(pool.items(), key=lambda kv: (-kv[1], kv[0])))
    ranked = sorted(pool.items(), key=lambda kv: (-kv[1], kv[0]))
    return dict(ranked[:k])


class DecodeSession:
    """Incremental decoder: feed frame chunks, then finish (or peek).

    `partial()` answers "what would the result be if the utterance ended
    now" on a snapshot, without advancing the session, so it equals a
    full decode of the frames seen so far.
    """

    def __init__(
        self,
        model: TransducerModel,
        lm: NeuralLM | None,
        config: DecodeConfig,
        trace: bool = False,
    ) -> None:
        if config.uses_lm and lm is None:
            raise ValueError(f"fusion mode {config.fusion_mode!r} requires an external LM")
        if not config.uses_lm and lm is not None:
            raise ValueError("an LM was supplied but fusion_mode is 'none'")
        if config.uses_cold and model.cold_fusion is None:
            raise ValueError("cold fusion requested but the model has no fusion head")
        if lm is not None and lm.vocab_fingerprint != model.vocab_fingerprint:
            raise FingerprintMismatchError(
                f"LM fingerprint {lm.vocab_fingerprint} != model {model.vocab_fingerprint}"
            )
        self.model = model
        self.lm = lm
        self.config = config
        self._cache = _PrefixCache(model, lm, config)
        self._beam: dict[tuple[int, ...], float] = {(): 0.0}
        self._enc_state = model.encoder_stack.init_state(batch=1)
        self._enc_rows: list[Tensor] = []
        self._buffer = np.empty((0, model.config.feature_dim))
        self._windows_done = 0
        self._finished = False
        self._trace: list[Transition] | None = [] if trace else None

    # -- streaming interface --------------------------------------------------
    def feed(self, frames) -> None:
        if self._finished:
            raise SessionError("chunk fed after flush")
        frames = np.asarray(frames, dtype=np.float64)
        if frames.size == 0:
            return
        if frames.ndim != 2 or frames.shape[1] != self.model.config.feature_dim:
            raise ShapeError(f"bad chunk shape {frames.shape}")
        self._buffer = np.vstack([self._buffer, frames])
        c = self.model.config
        while self._windows_done * c.stride + c.stack <= self._buffer.shape[0]:
            start = self._windows_done * c.stride
            window = self._buffer[start : start + c.stack].reshape(1, -1)
            self._beam, self._enc_state = self._step_window(
                window, self._beam, self._enc_state, self._enc_rows
            )
            self._windows_done += 1

    def swap_lm(self, new_lm: NeuralLM) -> None:
        """Replace the external LM before any audio has been consumed."""
        if self._buffer.shape[0] > 0 or self._finished:
            raise SessionError("cannot swap the LM while a decode is in flight")
        if not self.config.uses_lm:
            raise ValueError("session fusion mode does not use an LM")
        if new_lm.vocab_fingerprint != self.model.vocab_fingerprint:
            raise FingerprintMismatchError(
                f"LM fingerprint {new_lm.vocab_fingerprint} != model {self.model.vocab_fingerprint}"
            )
        self.lm = new_lm
        self._cache = _PrefixCache(self.model, new_lm, self.config)

    def partial(self) -> DecodeResult:
        if self._finished:
            raise SessionError("session already flushed")
        return self._flush_from(
            self._beam, self._enc_rows, self._enc_state, self._windows_done
        )

    def finish(self) -> DecodeResult:
        if self._finished:
            raise SessionError("session already flushed")
        result = self._flush_from(
            self._beam, self._enc_rows, self._enc_state, self._windows_done, mutate=True
        )
        self._finished = True
        return result

    # -- internals -------------------------------------------------------------
    def _step_window(self, window: np.ndarray, beam: dict, state, rows: list):
        """Advance encoder state and beam by one window; appends to `rows`."""
        y, state = self.model.encoder_stack.step(Tensor(window), state)
        row = nm.reshape(self.model.encoder_proj(y), (self.model.config.joint_dim,))
        rows.append(row)
        beam = self._advance_frame(row, beam, len(rows) - 1)
        return beam, state

    def _advance_frame(self, h_t: Tensor, beam: dict, frame_idx: int) -> dict:
        cfg = self.config
        blank = self.model.blank_id
        n_vocab = self.model.config.vocab_size
        blank_pool: dict[tuple[int, ...], float] = {}
        layer = beam
        joint_memo: dict[tuple[int, ...], np.ndarray] = {}
        for depth in range(cfg.max_symbols_per_frame + 1):
            next_layer: dict[tuple[int, ...], float] = {}
            for tokens in sorted(layer.keys()):
                score = layer[tokens]
                logp = joint_memo.get(tokens)
                entry = self._cache.entry(tokens)
                if logp is None:
                    logits = self.model.join(h_t, entry.side)
                    logp = np_log_softmax(logits.data)
                    joint_memo[tokens] = logp
                _merge(blank_pool, tokens, score + logp[blank])
                if self._trace is not None:
                    self._trace.append(
                        Transition(frame_idx, tokens, blank, float(logp[blank]), 0.0)
                    )
                if depth == cfg.max_symbols_per_frame:
                    continue
                for k in range(n_vocab):
                    lm_term = cfg.lam * entry.lm_logp[k] if cfg.uses_shallow else 0.0
                    _merge(next_layer, tokens + (k,), score + logp[k] + lm_term)
                    if self._trace is not None:
                        self._trace.append(
                            Transition(frame_idx, tokens, k, float(logp[k]), float(lm_term))
                        )
            layer = _prune(next_layer, cfg.beam_size)
            if not layer:
                break
        return _prune(blank_pool, cfg.beam_size)

    def _flush_from(self, beam, rows, state, windows_done, mutate: bool = False) -> DecodeResult:
        c = self.model.config
        t_total = self._buffer.shape[0]
        if t_total == 0:
            raise ShapeError("decode needs at least one feature frame")
        n_windows = -(-t_total // c.stride)
        if not mutate:
            rows = list(rows)
            beam = dict(beam)
        for i in range(windows_done, n_windows):
            start = i * c.stride
            chunk = self._buffer[start : start + c.stack]
            window = np.zeros((c.stack, c.feature_dim))
            window[: chunk.shape[0]] = chunk
            beam, state = self._step_window(window.reshape(1, -1), beam, state, rows)
        if mutate:
            self._beam, self._enc_state, self._windows_done = beam, state, n_windows
        return self._rescore(beam, rows)

    def _rescore(self, beam: dict, rows: list[Tensor]) -> DecodeResult:
        enc = np.vstack([r.data for r in rows])
        ranked = sorted(beam.items(), key=lambda kv: (-kv[1], kv[0]))
        nbest = []
        for tokens, _ in ranked:
            exact = self._sequence_score(enc, tokens)
            entry = self._cache.entry(tokens)
            nbest.append(Hypothesis(tokens, exact, entry.pred_state, entry.lm_state))
        nbest.sort(key=lambda h: (-h.log_score, h.tokens))
        return DecodeResult(
            best=nbest[0],
            nbest=nbest,
            lm_steps=self._cache.lm_steps,
            extensions=self._cache.extensions,
            trace=self._trace,
        )

    def _sequence_score(self, enc: np.ndarray, tokens: tuple[int, ...]) -> float:
        """Exact fused score: full-lattice marginal + λ·LM log-prob of tokens."""
        sides = np.stack(
            [self._cache.entry(tokens[:u]).side.data for u in range(len(tokens) + 1)]
        )
        pre = np.tanh(enc[:, None, :] + sides[None, :, :])
        logits = pre @ self.model.joiner.w.data.T + self.model.joiner.b.data
        log_probs = np_log_softmax(logits, axis=-1)
        score = -rnnt_forward(log_probs, list(tokens), self.model.blank_id)
        if self.config.uses_shallow:
            lm_sum = sum(
                self._cache.entry(tokens[:u]).lm_logp[tokens[u]] for u in range(len(tokens))
            )
            score += self.config.lam * lm_sum
        return float(score)


def decode_utterance(
    model: TransducerModel,
    lm: NeuralLM | None,
    frames,
    config: DecodeConfig,
    trace: bool = False,
) -> DecodeResult:
    """Whole-utterance decode (a one-chunk streaming session)."""
    session = DecodeSession(model, lm, config, trace=trace)
    session.feed(frames)
    return session.finish()


def swap_lm(session: DecodeSession, new_lm: NeuralLM) -> None:
    session.swap_lm(new_lm)


def format_nbest(utt_id: str, result: DecodeResult, vocab) -> list[str]:
    """N-best lines: id <TAB> rank <TAB> score <TAB> token string."""
    lines = []
    for rank, hyp in enumerate(result.nbest, start=1):
        text = " ".join(vocab.word(t) for t in hyp.tokens)
        lines.append(f"{utt_id}\t{rank}\t{hyp.log_score:.17g}\t{text}")
    return lines
