"""Fully connected and binary-structured networks over a flat parameter vector.

A BsNN ``B-b`` has ``n_h = log2(B/b) + 1`` hidden layers of ``B`` neurons
each.  Hidden layer ``i`` (0-based here) is split into ``2**i`` neuron blocks
of size ``B / 2**i``; block ``j`` only sees block ``j // 2`` of the layer
before it.  The blocks of the last hidden layer are concatenated and fed to
a dense linear output layer.

All parameters live in one float64 vector.  Each layer stores its weights as
``(n_blocks, block_in, block_out)`` followed by biases ``(n_blocks,
block_out)``, so every block owns a contiguous weight slice and a contiguous
bias slice.
"""

from __future__ import annotations

import base64
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch

from .autodiff import ACTIVATIONS, DTYPE, Jet

KINDS = ("fnn", "bsnn")
STREAM_INIT = 0  # rng stream id for parameter initialisation
CHECKPOINT_MAGIC = "# bspinn-checkpoint v1"

_ARCH_RE = re.compile(r"^(fnn|bsnn):(\d+)([*\-])(\d+)$")


class SpecError(ValueError):
    """Invalid architecture description."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    ``fnn`` uses ``n_hidden`` and ``width`` ("n*w"); ``bsnn`` uses
    ``first_block`` (B) and ``last_block`` (b), written "B-b".  With
    ``residual_blocks > 0`` the net becomes lift -> K residual blocks ->
    linear head, each block being a width->width net of the given kind.
    """

    kind: str
    input_dim: int
    output_dim: int
    n_hidden: int = 0
    width: int = 0
    first_block: int = 0
    last_block: int = 0
    activation: str = "tanh"
    residual_blocks: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown network kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise SpecError("input_dim and output_dim must be positive")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}; expected one of {sorted(ACTIVATIONS)}")
        if self.residual_blocks < 0:
            raise SpecError("residual_blocks must be >= 0")
        if self.kind == "fnn":
            if self.n_hidden < 1 or self.width < 1:
                raise SpecError(f"fnn needs n_hidden >= 1 and width >= 1, got {self.n_hidden}*{self.width}")
        else:
            B, b = self.first_block, self.last_block
            if not (_is_pow2(B) and _is_pow2(b)):
                raise SpecError(f"bsnn block sizes must be powers of two, got {B}-{b}")
            if B < b:
                raise SpecError(f"bsnn first block size must be >= last block size, got {B}-{b}")

    @classmethod
    def from_arch(
        cls,
        arch: str,
        input_dim: int,
        output_dim: int,
        activation: str = "tanh",
        residual_blocks: int = 0,
    ) -> "NetworkSpec":
        """Parse ``fnn:<layers>*<width>`` or ``bsnn:<B>-<b>``."""
        m = _ARCH_RE.match(arch.strip().replace(" ", ""))
        if m is None:
            raise SpecError(f"malformed architecture string {arch!r}; use 'fnn:<layers>*<width>' or 'bsnn:<B>-<b>'")
        kind, a, sep, c = m.group(1), int(m.group(2)), m.group(3), int(m.group(4))
        if (kind == "fnn") != (sep == "*"):
            raise SpecError(f"malformed architecture string {arch!r}: fnn uses '*', bsnn uses '-'")
        if kind == "fnn":
            return cls("fnn", input_dim, output_dim, n_hidden=a, width=c,
                       activation=activation, residual_blocks=residual_blocks)
        return cls("bsnn", input_dim, output_dim, first_block=a, last_block=c,
                   activation=activation, residual_blocks=residual_blocks)

    @property
    def depth(self) -> int:
        if self.kind == "fnn":
            return self.n_hidden
        return int(math.log2(self.first_block // self.last_block)) + 1

    @property
    def hidden_width(self) -> int:
        return self.width if self.kind == "fnn" else self.first_block

    @property
    def arch(self) -> str:
        if self.kind == "fnn":
            return f"fnn:{self.n_hidden}*{self.width}"
        return f"bsnn:{self.first_block}-{self.last_block}"

    @property
    def tag(self) -> str:
        """Filesystem-friendly architecture label."""
        base = f"fnn_{self.n_hidden}x{self.width}" if self.kind == "fnn" else f"bsnn_{self.first_block}-{self.last_block}"
        return base + (f"_res{self.residual_blocks}" if self.residual_blocks else "")

    def hidden_blocks(self) -> list[tuple[int, int]]:
        """``(n_blocks, block_size)`` for each hidden layer."""
        if self.kind == "fnn":
            return [(1, self.width)] * self.n_hidden
        return [(2**i, self.first_block >> i) for i in range(self.depth)]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class LayerSlot(NamedTuple):
    name: str
    n_blocks: int
    block_in: int
    block_out: int
    activated: bool
    w_offset: int
    b_offset: int

    @property
    def size(self) -> int:
        return self.n_blocks * (self.block_in * self.block_out + self.block_out)


class BlockSlice(NamedTuple):
    weight: slice
    weight_shape: tuple[int, int]
    bias: slice
    bias_shape: tuple[int]


def _plain_plan(spec: NetworkSpec, in_dim: int, out_dim: int, prefix: str = "") -> list[tuple]:
    plan = []
    prev_blocks, prev_size = 1, in_dim
    for i, (nb, size) in enumerate(spec.hidden_blocks()):
        # a tree layer's block reads exactly one parent block of prev_size neurons
        plan.append((f"{prefix}h{i}", nb, prev_size, size, True))
        prev_blocks, prev_size = nb, size
    plan.append((f"{prefix}out", 1, prev_blocks * prev_size, out_dim, False))
    return plan


def _layer_plan(spec: NetworkSpec) -> list[tuple]:
    if spec.residual_blocks == 0:
        return _plain_plan(spec, spec.input_dim, spec.output_dim)
    w = spec.hidden_width
    plan = [("lift", 1, spec.input_dim, w, False)]
    for k in range(spec.residual_blocks):
        plan += _plain_plan(spec, w, w, prefix=f"r{k}.")
    plan.append(("head", 1, w, spec.output_dim, False))
    return plan


def build_layers(spec: NetworkSpec) -> tuple[LayerSlot, ...]:
    slots, offset = [], 0
    for name, nb, bin_, bout, act in _layer_plan(spec):
        w_off = offset
        b_off = w_off + nb * bin_ * bout
        slot = LayerSlot(name, nb, bin_, bout, act, w_off, b_off)
        slots.append(slot)
        offset += slot.size
    return tuple(slots)


def param_count(spec: NetworkSpec) -> int:
    """Exact number of trainable weights and biases."""
    return sum(s.size for s in build_layers(spec))


@dataclass
class ParamStore:
    spec: NetworkSpec
    data: torch.Tensor
    layers: tuple[LayerSlot, ...] = field(repr=False)

    def __post_init__(self):
        if self.data.dim() != 1 or self.data.numel() != param_count(self.spec):
            raise ValueError(
                f"parameter vector has {self.data.numel()} entries, spec needs {param_count(self.spec)}"
            )

    @classmethod
    def from_vector(cls, spec: NetworkSpec, vector) -> "ParamStore":
        data = torch.from_numpy(np.array(vector, dtype=np.float64))
        return cls(spec, data, build_layers(spec))

    def __len__(self) -> int:
        return self.data.numel()

    @property
    def layout(self) -> dict[tuple[int, int], BlockSlice]:
        """``(layer index, block index) -> slices`` into the flat vector."""
        out = {}
        for li, s in enumerate(self.layers):
            wsz = s.block_in * s.block_out
            for j in range(s.n_blocks):
                out[(li, j)] = BlockSlice(
                    slice(s.w_offset + j * wsz, s.w_offset + (j + 1) * wsz),
                    (s.block_in, s.block_out),
                    slice(s.b_offset + j * s.block_out, s.b_offset + (j + 1) * s.block_out),
                    (s.block_out,),
                )
        return out

    def weight(self, layer: int, params: torch.Tensor | None = None) -> torch.Tensor:
        s = self.layers[layer]
        p = self.data if params is None else params
        return p[s.w_offset:s.b_offset].view(s.n_blocks, s.block_in, s.block_out)

    def bias(self, layer: int, params: torch.Tensor | None = None) -> torch.Tensor:
        s = self.layers[layer]
        p = self.data if params is None else params
        return p[s.b_offset:s.b_offset + s.n_blocks * s.block_out].view(s.n_blocks, s.block_out)

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy().copy()

    def copy(self) -> "ParamStore":
        return ParamStore(self.spec, self.data.detach().clone(), self.layers)


def init_params(spec: NetworkSpec, seed: int) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per affine map, fan_in = block input size."""
    layers = build_layers(spec)
    rng = np.random.default_rng([int(seed), STREAM_INIT])
    chunks = []
    for s in layers:
        bound = 1.0 / math.sqrt(s.block_in)
        chunks.append(rng.uniform(-bound, bound, size=s.n_blocks * s.block_in * s.block_out))
        chunks.append(rng.uniform(-bound, bound, size=s.n_blocks * s.block_out))
    data = torch.from_numpy(np.concatenate(chunks)).to(DTYPE)
    return ParamStore(spec, data, layers)


# -- forward passes ------------------------------------------------------

def _block_linear(slot: LayerSlot, W: torch.Tensor):
    if slot.n_blocks == 1:
        W0 = W[0]
        return lambda t: t @ W0
    parents = slot.n_blocks // 2
    # children 2p and 2p+1 read the same parent block p: fuse them column-wise
    Wp = W.view(parents, 2, slot.block_in, slot.block_out).permute(0, 2, 1, 3)
    Wp = Wp.reshape(parents, slot.block_in, 2 * slot.block_out)

    def lin(t):
        lead = t.shape[:-1]
        t = t.reshape(-1, parents, slot.block_in).transpose(0, 1)
        t = torch.bmm(t, Wp).transpose(0, 1)
        return t.reshape(*lead, slot.n_blocks * slot.block_out)

    return lin


def _apply(slot: LayerSlot, W, b, h, act):
    lin = _block_linear(slot, W)
    bias = b.reshape(-1)
    h = h.linear(lin, bias) if isinstance(h, Jet) else lin(h) + bias
    return act(h) if slot.activated else h


def _check_input(spec: NetworkSpec, x):
    width = x.shape[-1]
    if width != spec.input_dim:
        raise ValueError(f"input has {width} coordinates, network expects {spec.input_dim}")


def _run(store: ParamStore, x, params, layers: range):
    act = ACTIVATIONS[store.spec.activation]
    h = x
    for li in layers:
        h = _apply(store.layers[li], store.weight(li, params), store.bias(li, params), h, act)
    return h


def _as_input(x):
    return x if isinstance(x, Jet) else torch.as_tensor(x, dtype=DTYPE)


def forward(store: ParamStore, x, params: torch.Tensor | None = None):
    """Network output for a tensor ``(..., input_dim)`` or a :class:`Jet`."""
    x = _as_input(x)
    _check_input(store.spec, x)
    if store.spec.residual_blocks:
        return forward_residual(store, x, params)
    return _run(store, x, params, range(len(store.layers)))


def forward_fnn(store: ParamStore, x, params: torch.Tensor | None = None):
    if store.spec.kind != "fnn" or store.spec.residual_blocks:
        raise SpecError("forward_fnn needs a plain fnn spec")
    return forward(store, x, params)


def forward_bsnn(store: ParamStore, x, params: torch.Tensor | None = None):
    if store.spec.kind != "bsnn" or store.spec.residual_blocks:
        raise SpecError("forward_bsnn needs a plain bsnn spec")
    return forward(store, x, params)


def forward_residual(store: ParamStore, x, params: torch.Tensor | None = None):
    """lift -> ``y + block(y)`` repeated -> linear head."""
    spec = store.spec
    if spec.residual_blocks < 1:
        raise SpecError("forward_residual needs residual_blocks >= 1")
    x = _as_input(x)
    _check_input(spec, x)
    per_block = spec.depth + 1
    y = _run(store, x, params, range(0, 1))
    start = 1
    for _ in range(spec.residual_blocks):
        stop = start + per_block
        if store.layers[start].block_in != store.layers[stop - 1].block_out:
            raise SpecError("residual block input and output widths differ")
        y = y + _run(store, y, params, range(start, stop))
        start = stop
    return _run(store, y, params, range(start, start + 1))


def hidden_features(store: ParamStore, x, params: torch.Tensor | None = None):
    """Activations of the last hidden layer of a plain network."""
    if store.spec.residual_blocks:
        raise SpecError("channel decomposition is defined for plain networks only")
    x = _as_input(x)
    _check_input(store.spec, x)
    return _run(store, x, params, range(len(store.layers) - 1))


class ChannelOutputs(NamedTuple):
    contributions: torch.Tensor  # (n_channels, ..., output_dim)
    bias: torch.Tensor  # (output_dim,)

    @property
    def total(self) -> torch.Tensor:
        return self.contributions.sum(0) + self.bias


def channel_outputs(store: ParamStore, x, group_size: int | None = None,
                    params: torch.Tensor | None = None) -> ChannelOutputs:
    """Split the linear output into per-channel additive contributions.

    For a BsNN a channel is one block of the last hidden layer.  An FNN has
    no blocks, so contiguous groups of ``group_size`` neurons are used.
    """
    spec = store.spec
    h = hidden_features(store, x, params)
    last = store.layers[-2]
    width = last.n_blocks * last.block_out
    if group_size is None:
        if spec.kind == "fnn":
            raise ValueError("an fnn needs an explicit channel group size")
        group_size = last.block_out
    if group_size < 1 or width % group_size:
        raise ValueError(f"group size {group_size} does not divide the last hidden width {width}")
    n_ch = width // group_size
    W = store.weight(len(store.layers) - 1, params)[0]
    b = store.bias(len(store.layers) - 1, params)[0]
    hg = h.reshape(*h.shape[:-1], n_ch, group_size)
    Wg = W.view(n_ch, group_size, W.shape[-1])
    contrib = torch.einsum("...cg,cgo->c...o", hg, Wg)
    return ChannelOutputs(contrib, b)


# -- masked dense equivalent ---------------------------------------------

def to_masked_fnn(spec: NetworkSpec) -> tuple[NetworkSpec, list[np.ndarray]]:
    """Dense FNN with the same neuron counts plus one boolean mask per weight matrix."""
    if spec.kind != "bsnn" or spec.residual_blocks:
        raise SpecError("to_masked_fnn needs a plain bsnn spec")
    fnn = NetworkSpec("fnn", spec.input_dim, spec.output_dim, n_hidden=spec.depth,
                      width=spec.first_block, activation=spec.activation)
    masks = []
    for s in build_layers(spec):
        if s.n_blocks == 1:
            masks.append(np.ones((s.block_in, s.block_out), dtype=bool))
            continue
        m = np.zeros((s.n_blocks // 2 * s.block_in, s.n_blocks * s.block_out), dtype=bool)
        for j in range(s.n_blocks):
            p = j // 2
            m[p * s.block_in:(p + 1) * s.block_in, j * s.block_out:(j + 1) * s.block_out] = True
        masks.append(m)
    return fnn, masks


def dense_weights(store: ParamStore) -> list[tuple[np.ndarray, np.ndarray]]:
    """Embed every layer's block parameters into dense ``(W, b)`` arrays (zeros off-block)."""
    out = []
    data = store.numpy()
    for li, s in enumerate(store.layers):
        Wb = data[s.w_offset:s.b_offset].reshape(s.n_blocks, s.block_in, s.block_out)
        bb = data[s.b_offset:s.b_offset + s.n_blocks * s.block_out].reshape(s.n_blocks, s.block_out)
        if s.n_blocks == 1:
            out.append((Wb[0].copy(), bb[0].copy()))
            continue
        W = np.zeros((s.n_blocks // 2 * s.block_in, s.n_blocks * s.block_out))
        for j in range(s.n_blocks):
            p = j // 2
            W[p * s.block_in:(p + 1) * s.block_in, j * s.block_out:(j + 1) * s.block_out] = Wb[j]
        out.append((W, bb.reshape(-1).copy()))
    return out


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(path: str | Path, store: ParamStore, seed: int, epoch: int,
                    meta: dict[str, Any] | None = None) -> Path:
    """Write a one-line JSON header followed by base64 little-endian float64 parameters."""
    path = Path(path)
    header = {"spec": store.spec.to_dict(), "seed": int(seed), "epoch": int(epoch),
              "n_params": len(store), **(meta or {})}
    payload = base64.b64encode(store.numpy().astype("<f8").tobytes()).decode("ascii")
    path.write_text(f"{CHECKPOINT_MAGIC}\n{json.dumps(header, sort_keys=True)}\n{payload}\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict[str, Any]]:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3 or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a bspinn checkpoint")
    header = json.loads(lines[1])
    spec = NetworkSpec(**header["spec"])
    vec = np.frombuffer(base64.b64decode(lines[2]), dtype="<f8")
    if vec.size != header["n_params"]:
        raise ValueError(f"{path}: header says {header['n_params']} parameters, payload has {vec.size}")
    return ParamStore.from_vector(spec, vec), header
