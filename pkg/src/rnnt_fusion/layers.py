"""Reusable neural blocks: linear projection, embedding, LSTM stack, frame stacking.

Parameter initialization convention: everything uniform in [-0.1, 0.1]
from the caller's seeded generator, except LSTM forget-gate biases which
start at 1.0. Gate layout inside the fused LSTM matrices is fixed as
input, forget, cell, output (in that order) so checkpoints are portable.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numerics as nm
from .errors import ShapeError, VocabularyError
from .numerics import Tensor

INIT_SCALE = 0.1
GATE_ORDER = ("input", "forget", "cell", "output")


def _uniform(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))


class Linear:
    """y = W x + b with W stored [out_dim × in_dim]."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int) -> None:
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = _uniform(rng, (out_dim, in_dim))
        self.b = _uniform(rng, (out_dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return nm.affine(x, self.w, self.b)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


class LstmLayer:
    """Single LSTM layer with fused gate matrices.

    w_x: [4H × in], w_h: [4H × H], b: [4H], rows ordered per GATE_ORDER.
    """

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden_dim: int) -> None:
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.w_x = _uniform(rng, (4 * hidden_dim, in_dim))
        self.w_h = _uniform(rng, (4 * hidden_dim, hidden_dim))
        self.b = _uniform(rng, (4 * hidden_dim,))
        self.b.data[hidden_dim : 2 * hidden_dim] = 1.0  # forget gate bias

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        hd = self.hidden_dim
        z = nm.add(nm.affine(x, self.w_x, self.b), nm.affine(h, self.w_h, None))
        i = nm.sigmoid(nm.slice_last(z, 0, hd))
        f = nm.sigmoid(nm.slice_last(z, hd, 2 * hd))
        g = nm.tanh(nm.slice_last(z, 2 * hd, 3 * hd))
        o = nm.sigmoid(nm.slice_last(z, 3 * hd, 4 * hd))
        c_next = nm.add(nm.mul(f, c), nm.mul(i, g))
        h_next = nm.mul(o, nm.tanh(c_next))
        return h_next, c_next

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_x": self.w_x,
            f"{prefix}.w_h": self.w_h,
            f"{prefix}.b": self.b,
        }


class LstmState:
    """Per-layer (h, c) pairs; a fresh state is all zeros.

    States are value objects: `LstmStack.step` returns a new state and
    never mutates its input, so saved states can be re-applied freely.
    """

    def __init__(self, pairs: list[tuple[Tensor, Tensor]]) -> None:
        self.pairs = pairs

    def __iter__(self) -> Iterator[tuple[Tensor, Tensor]]:
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


class LstmStack:
    """Stacked LSTM layers with an optional per-layer linear projection."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_dim: int,
        hidden_dims: list[int],
        proj_dims: list[int | None] | None = None,
    ) -> None:
        if proj_dims is None:
            proj_dims = [None] * len(hidden_dims)
        if len(proj_dims) != len(hidden_dims):
            raise ShapeError("proj_dims must align with hidden_dims")
        self.layers: list[LstmLayer] = []
        self.projections: list[Linear | None] = []
        dim = in_dim
        for hd, pd in zip(hidden_dims, proj_dims):
            self.layers.append(LstmLayer(rng, dim, hd))
            if pd is None:
                self.projections.append(None)
                dim = hd
            else:
                self.projections.append(Linear(rng, hd, pd))
                dim = pd
        self.out_dim = dim

    def init_state(self, batch: int | None = None) -> LstmState:
        pairs = []
        for layer in self.layers:
            shape = (layer.hidden_dim,) if batch is None else (batch, layer.hidden_dim)
            pairs.append((Tensor(np.zeros(shape)), Tensor(np.zeros(shape))))
        return LstmState(pairs)

    def step(self, x: Tensor, state: LstmState) -> tuple[Tensor, LstmState]:
        if len(state) != len(self.layers):
            raise ShapeError("state does not match stack depth")
        new_pairs = []
        y = x
        for layer, proj, (h, c) in zip(self.layers, self.projections, state):
            if h.shape[-1] != layer.hidden_dim:
                raise ShapeError(
                    f"state dim {h.shape} does not match hidden {layer.hidden_dim}"
                )
            h_next, c_next = layer.step(y, h, c)
            new_pairs.append((h_next, c_next))
            y = proj(h_next) if proj is not None else h_next
        return y, LstmState(new_pairs)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, (layer, proj) in enumerate(zip(self.layers, self.projections)):
            params.update(layer.named_params(f"{prefix}.{i}"))
            if proj is not None:
                params.update(proj.named_params(f"{prefix}.{i}.proj"))
        return params


def lstm_step(stack: LstmStack, x: Tensor, state: LstmState) -> tuple[Tensor, LstmState]:
    return stack.step(x, state)


def embed(table: Tensor, token: int) -> Tensor:
    """Row lookup; gradient scatters back to the selected row."""
    n_rows = table.shape[0]
    if not 0 <= token < n_rows:
        raise VocabularyError(f"token id {token} outside table of {n_rows} rows")
    return nm.take_rows(table, [token])


def stack_subsample(frames: np.ndarray, stack: int, stride: int) -> np.ndarray:
    """Concatenate `stack` contiguous frames per window, one window per `stride`.

    Window i covers frames [i*stride, i*stride + stack), right-padded with
    zero frames past the end; T' = ceil(T / stride). Frames are input data,
    never parameters, so this is plain numpy with no gradient path.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ShapeError(f"stack_subsample needs a nonempty [T×d] input, got {frames.shape}")
    if stack < 1 or stride < 1:
        raise ValueError("stack and stride must be >= 1")
    t, d = frames.shape
    t_out = -(-t // stride)
    padded = np.zeros(((t_out - 1) * stride + stack, d))
    padded[:t] = frames
    out = np.empty((t_out, d * stack))
    for i in range(t_out):
        out[i] = padded[i * stride : i * stride + stack].reshape(-1)
    return out
