"""Optimizers, LR schedules, and the three training procedures.

Recipes: LM pre-training on text (cross entropy), transducer training on
paired data (lattice loss), and cold-fusion fine-tuning in two modes —
iterative (bootstrap from a trained transducer checkpoint, randomly
initialize only the fusion head, short fine-tune) and from-scratch
(random transducer + head, full-length recipe) for the convergence
comparison. The external LM is frozen in both fusion modes: its forward
pass runs outside the gradient tape, so no gradient can ever reach it.

Batching pads within length-sorted buckets. Padded positions feed the
start-embedding row and their outputs are simply never gathered into the
loss, so they receive zero gradient and cannot perturb training.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from fnmatch import fnmatch
from pathlib import Path

import numpy as np

from . import numerics as nm
from .corpus import Utterance, Vocabulary
from .errors import FingerprintMismatchError
from .models import (
    LmConfig,
    NeuralLM,
    TransducerConfig,
    TransducerModel,
    load_lm,
    load_transducer,
)
from .layers import stack_subsample
from .numerics import GradientTape, Tensor
from .transducer import rnnt_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Hold `base_lr` for `hold_epochs`, then decay geometrically."""

    base_lr: float
    hold_epochs: int
    decay_factor: float

    def __post_init__(self) -> None:
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")

    def lr(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        if epoch < self.hold_epochs:
            return self.base_lr
        return self.base_lr * self.decay_factor ** (epoch - self.hold_epochs + 1)


def schedule_lr(schedule: Schedule, epoch: int) -> float:
    return schedule.lr(epoch)


# Paper-shaped defaults at toy scale: hold-then-geometric-decay with the
# RNN-T/LM factor 0.8 and the cold-fusion factor 0.6.
RNNT_SCHEDULE = Schedule(base_lr=4e-3, hold_epochs=8, decay_factor=0.8)
LM_SCHEDULE = Schedule(base_lr=4e-3, hold_epochs=2, decay_factor=0.8)
CF_SCHEDULE = Schedule(base_lr=1e-3, hold_epochs=2, decay_factor=0.6)


@dataclass(frozen=True)
class TrainRecipe:
    mode: str  # lm | rnnt | cf_iterative | cf_scratch
    epochs: int
    batch_size: int
    seed: int
    schedule: Schedule
    freeze: tuple[str, ...] = ()
    init_from: tuple[str, ...] = ()
    clip_norm: float = 5.0


class Adam:
    """Bias-corrected Adam over a named parameter dict.

    Frozen parameters (name matches any freeze pattern) are skipped
    entirely: no update, no moment bookkeeping. Parameters whose gradient
    is non-finite are skipped for that step and counted.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        freeze: tuple[str, ...] = (),
    ) -> None:
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.frozen = {n for n in params if any(fnmatch(n, pat) for pat in freeze)}
        self.trainable = {n: p for n, p in params.items() if n not in self.frozen}
        self.m = {n: np.zeros_like(p.data) for n, p in self.trainable.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.trainable.items()}
        self.step_count = 0
        self.nonfinite_skips = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.clear_grad()

    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for n, p in self.trainable.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                self.nonfinite_skips += 1
                logger.warning("skipping non-finite gradient for %s", n)
                continue
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(optimizer: Adam, lr: float) -> None:
    optimizer.step(lr)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    dev_loss: float
    dev_ppl: float | None = None

    def to_line(self) -> str:
        ppl = "-" if self.dev_ppl is None else f"{self.dev_ppl:.17g}"
        return (
            f"{self.epoch}\t{self.lr:.17g}\t{self.train_loss:.17g}"
            f"\t{self.dev_loss:.17g}\t{ppl}"
        )


def write_training_log(path, records: list[EpochRecord]) -> None:
    header = "epoch\tlr\ttrain_loss\tdev_loss\tdev_ppl\n"
    Path(path).write_text(header + "".join(r.to_line() + "\n" for r in records))


def did_not_converge(records: list[EpochRecord], drop: float = 0.10) -> bool:
    """Reporting convention: dev loss never dropped `drop` below epoch-1 value."""
    if len(records) < 2:
        return True
    return records[-1].dev_loss > (1.0 - drop) * records[0].dev_loss


def _length_bucketed_batches(items, lengths, batch_size: int, rng: np.random.Generator):
    order = sorted(range(len(items)), key=lambda i: (lengths[i], i))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(batches)
    return [[items[i] for i in batch] for batch in batches]


# -- LM training ---------------------------------------------------------------


def _lm_step_rows(lm: NeuralLM, batch: list[tuple[int, ...]], n_steps: int):
    """Run the LM over a padded batch; returns logit rows [n_steps*B × V].

    Row u*B + b holds the logits predicting position u of sentence b.
    Padded steps feed the start row and are never gathered by callers.
    """
    n = lm.config.vocab_size
    b_size = len(batch)
    state = lm.stack.init_state(batch=b_size)
    outs = []
    for u in range(n_steps):
        idx = [s[u - 1] if 1 <= u <= len(s) else n for s in batch]
        x = nm.take_rows(lm.embed_table, idx)
        y, state = lm.stack.step(x, state)
        outs.append(lm.proj(y))
    return nm.concat_rows(outs)


def _lm_batch_nll(lm: NeuralLM, batch: list[tuple[int, ...]]) -> tuple[Tensor, int]:
    """Mean per-token negative log likelihood over the batch (taped if active)."""
    b_size = len(batch)
    l_max = max(len(s) for s in batch)
    rows = _lm_step_rows(lm, batch, l_max)
    lp = nm.log_softmax(rows, axis=-1)
    row_idx, col_idx = [], []
    for b, s in enumerate(batch):
        for u, t in enumerate(s):
            row_idx.append(u * b_size + b)
            col_idx.append(t)
    picked = nm.take_at(lp, row_idx, col_idx)
    n_tokens = len(row_idx)
    return nm.mul(nm.neg(nm.tsum(picked)), 1.0 / n_tokens), n_tokens


def lm_dataset_nll(lm: NeuralLM, sentences, batch_size: int = 64) -> float:
    """Mean per-token NLL, forward-only."""
    total, count = 0.0, 0
    for i in range(0, len(sentences), batch_size):
        batch = [s for s in sentences[i : i + batch_size] if len(s) > 0]
        if not batch:
            continue
        loss, n = _lm_batch_nll(lm, batch)
        total += loss.item() * n
        count += n
    return total / count if count else 0.0


def lm_perplexity(lm: NeuralLM, sentences, batch_size: int = 64) -> float:
    return float(np.exp(lm_dataset_nll(lm, sentences, batch_size)))


def train_lm(
    recipe: TrainRecipe,
    train_sentences: list[tuple[int, ...]],
    dev_sentences: list[tuple[int, ...]],
    vocab: Vocabulary,
    config: LmConfig | None = None,
) -> tuple[NeuralLM, list[EpochRecord]]:
    train_sentences = [s for s in train_sentences if len(s) > 0]
    if not train_sentences:
        raise ValueError("LM training corpus is empty")
    init_seed, shuffle_seed = np.random.SeedSequence([recipe.seed, 11]).spawn(2)
    config = config or LmConfig(vocab_size=len(vocab))
    lm = NeuralLM(np.random.default_rng(init_seed), config, vocab.fingerprint)
    opt = Adam(lm.named_params(), freeze=recipe.freeze)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    records = []
    for epoch in range(recipe.epochs):
        lr = recipe.schedule.lr(epoch)
        batches = _length_bucketed_batches(
            train_sentences, [len(s) for s in train_sentences], recipe.batch_size, shuffle_rng
        )
        total, count = 0.0, 0
        for batch in batches:
            opt.zero_grad()
            with GradientTape() as tape:
                loss, n = _lm_batch_nll(lm, batch)
            tape.backward(loss)
            clip_global_norm(opt.trainable, recipe.clip_norm)
            opt.step(lr)
            total += loss.item() * n
            count += n
        dev_nll = lm_dataset_nll(lm, dev_sentences) if dev_sentences else total / count
        records.append(
            EpochRecord(epoch, lr, total / count, dev_nll, float(np.exp(dev_nll)))
        )
    return lm, records


# -- transducer training ---------------------------------------------------------


def _lm_logits_batch(lm: NeuralLM, batch_refs: list[tuple[int, ...]], n_steps: int) -> np.ndarray:
    """Frozen-LM logits for every predictor position, forward-only numpy."""
    rows = _lm_step_rows(lm, batch_refs, n_steps)
    return rows.data


def _transducer_batch_loss(
    model: TransducerModel, lm: NeuralLM | None, batch: list[Utterance]
) -> Tensor:
    """Mean per-utterance lattice loss over one padded batch."""
    c = model.config
    b_size = len(batch)
    windows = [stack_subsample(u.frames, c.stack, c.stride) for u in batch]
    t_lens = [w.shape[0] for w in windows]
    u_lens = [len(u.reference) for u in batch]
    t_max, u_max = max(t_lens), max(u_lens)

    enc_state = model.encoder_stack.init_state(batch=b_size)
    enc_outs = []
    width = c.feature_dim * c.stack
    for t in range(t_max):
        x = np.zeros((b_size, width))
        for b, w in enumerate(windows):
            if t < w.shape[0]:
                x[b] = w[t]
        y, enc_state = model.encoder_stack.step(Tensor(x), enc_state)
        enc_outs.append(model.encoder_proj(y))
    enc_rows = nm.concat_rows(enc_outs)  # row t*B + b

    pred_state = model.predictor_stack.init_state(batch=b_size)
    pred_outs = []
    for u in range(u_max + 1):
        idx = [
            utt.reference[u - 1] if 1 <= u <= len(utt.reference) else c.vocab_size
            for utt in batch
        ]
        x = nm.take_rows(model.embed_table, idx)
        y, pred_state = model.predictor_stack.step(x, pred_state)
        pred_outs.append(model.predictor_proj(y))
    side_rows = nm.concat_rows(pred_outs)  # row u*B + b

    if model.cold_fusion is not None:
        if lm is None:
            raise ValueError("cold-fusion model needs the frozen external LM for training")
        z_all = _lm_logits_batch(lm, [u.reference for u in batch], u_max + 1)
        side_rows = model.cold_fusion(side_rows, Tensor(z_all))

    total: Tensor | None = None
    for b, utt in enumerate(batch):
        enc_b = nm.take_rows(enc_rows, np.arange(t_lens[b]) * b_size + b)
        side_b = nm.take_rows(side_rows, np.arange(u_lens[b] + 1) * b_size + b)
        x = nm.add(nm.repeat_rows(enc_b, u_lens[b] + 1), nm.tile_rows(side_b, t_lens[b]))
        logits = model.joiner(nm.tanh(x))
        logits = nm.reshape(logits, (t_lens[b], u_lens[b] + 1, c.vocab_size + 1))
        loss = rnnt_loss(logits, utt.reference, model.blank_id)
        total = loss if total is None else nm.add(total, loss)
    return nm.mul(total, 1.0 / b_size)


def transducer_dataset_loss(
    model: TransducerModel, lm: NeuralLM | None, utts: list[Utterance], batch_size: int = 32
) -> float:
    total = 0.0
    for i in range(0, len(utts), batch_size):
        batch = utts[i : i + batch_size]
        total += _transducer_batch_loss(model, lm, batch).item() * len(batch)
    return total / len(utts)


def _assert_lm_untouched(lm: NeuralLM | None) -> None:
    if lm is None:
        return
    for name, p in lm.named_params().items():
        if p.grad is not None and np.any(p.grad != 0):
            raise AssertionError(f"gradient leaked into frozen LM parameter {name}")


def _train_transducer(
    model: TransducerModel,
    lm: NeuralLM | None,
    recipe: TrainRecipe,
    train_utts: list[Utterance],
    dev_utts: list[Utterance],
) -> list[EpochRecord]:
    for utt in train_utts:
        if utt.frames.shape[0] == 0:
            raise ValueError(f"utterance {utt.id} has no frames")
    init_seed, shuffle_seed = np.random.SeedSequence([recipe.seed, 23]).spawn(2)
    del init_seed  # model is built by the caller; kept for seed-stream parity
    shuffle_rng = np.random.default_rng(shuffle_seed)
    opt = Adam(model.named_params(), freeze=recipe.freeze)
    records = []
    for epoch in range(recipe.epochs):
        lr = recipe.schedule.lr(epoch)
        batches = _length_bucketed_batches(
            train_utts, [u.frames.shape[0] for u in train_utts], recipe.batch_size, shuffle_rng
        )
        total = 0.0
        for batch in batches:
            opt.zero_grad()
            with GradientTape() as tape:
                loss = _transducer_batch_loss(model, lm, batch)
            tape.backward(loss)
            _assert_lm_untouched(lm)
            clip_global_norm(opt.trainable, recipe.clip_norm)
            opt.step(lr)
            total += loss.item() * len(batch)
        dev_loss = (
            transducer_dataset_loss(model, lm, dev_utts) if dev_utts else total / len(train_utts)
        )
        records.append(EpochRecord(epoch, lr, total / len(train_utts), dev_loss))
    return records


def train_rnnt(
    recipe: TrainRecipe,
    train_utts: list[Utterance],
    dev_utts: list[Utterance],
    vocab: Vocabulary,
    config: TransducerConfig | None = None,
) -> tuple[TransducerModel, list[EpochRecord]]:
    config = config or TransducerConfig(vocab_size=len(vocab))
    init_seed, _ = np.random.SeedSequence([recipe.seed, 23]).spawn(2)
    model = TransducerModel(np.random.default_rng(init_seed), config, vocab.fingerprint)
    records = _train_transducer(model, None, recipe, train_utts, dev_utts)
    return model, records


def finetune_coldfusion(
    recipe: TrainRecipe,
    rnnt_ckpt: str | None,
    lm_ckpt: str,
    train_utts: list[Utterance],
    dev_utts: list[Utterance],
    scratch_config: TransducerConfig | None = None,
) -> tuple[TransducerModel, NeuralLM, list[EpochRecord]]:
    """Attach and train a cold-fusion head; the external LM stays frozen.

    iterative: bootstrap every non-head parameter from the transducer
    checkpoint; only the head starts from random init. scratch: random
    init for transducer and head alike (the convergence comparison arm).
    """
    if recipe.mode not in ("cf_iterative", "cf_scratch"):
        raise ValueError(f"unexpected recipe mode {recipe.mode!r}")
    lm = load_lm(lm_ckpt)
    init_seed, _ = np.random.SeedSequence([recipe.seed, 37]).spawn(2)
    if recipe.mode == "cf_iterative":
        if rnnt_ckpt is None:
            raise ValueError("iterative cold fusion requires a pre-trained RNN-T checkpoint")
        base = load_transducer(rnnt_ckpt)
        if base.vocab_fingerprint != lm.vocab_fingerprint:
            raise FingerprintMismatchError(
                f"transducer fingerprint {base.vocab_fingerprint} != LM {lm.vocab_fingerprint}"
            )
        config = dataclasses.replace(base.config, cold_fusion=True)
        model = TransducerModel(np.random.default_rng(init_seed), config, base.vocab_fingerprint)
        base_params = base.named_params()
        for name, p in model.named_params().items():
            if name in base_params:
                p.data[...] = base_params[name].data
    else:
        config = scratch_config or TransducerConfig(vocab_size=lm.config.vocab_size)
        config = dataclasses.replace(config, cold_fusion=True)
        model = TransducerModel(np.random.default_rng(init_seed), config, lm.vocab_fingerprint)
    records = _train_transducer(model, lm, recipe, train_utts, dev_utts)
    return model, lm, records
