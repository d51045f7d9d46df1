"""Teacher/student MLPs, the task-serialization head, and checkpoint I/O."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tape, Tensor

PRELU_SLOPE = 0.25
CHECKPOINT_MAGIC = "logitkd-checkpoint v1"


class UnsupportedVariantError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class _Layered:
    params: list

    def bind(self, tape: Tape) -> list[Tensor]:
        return [tape.variable(p) for p in self.params]

    def constants(self) -> list[Tensor]:
        return [Tensor(p) for p in self.params]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params))


class Mlp(_Layered):
    """Fully connected net; ReLU on hidden layers, raw logits out."""

    def __init__(self, layer_dims: Sequence[int], seed: int = 0):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"invalid layer dims {dims}")
        self.layer_dims = dims
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            self.params.append(_he_uniform(rng, fan_in, fan_out))
            self.params.append(np.zeros(fan_out))

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def __call__(self, x, params: Optional[Sequence[Tensor]] = None) -> Tensor:
        x = tn.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise tn.ShapeError(f"expected input N x {self.layer_dims[0]}, got {x.shape}")
        ps = self.constants() if params is None else params
        h = x
        n_layers = len(ps) // 2
        for k in range(n_layers):
            h = tn.add_bias(tn.matmul(h, ps[2 * k]), ps[2 * k + 1])
            if k < n_layers - 1:
                h = tn.relu(h)
        return h

    def predict(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        """Inference logits as a plain array."""
        out = [self(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


class SerializationHead(_Layered):
    """Trainable map from classification logits to distillation logits (training only).

    ``hidden=None`` gives the single C x C linear layer.  Otherwise two layers
    C x K and K x C.  ``nonlinear`` puts a fixed-slope PReLU after every layer.
    Square layers start as the identity, others with seeded He-uniform weights;
    biases start at zero.
    """

    def __init__(self, num_classes: int, hidden: Optional[int] = None,
                 nonlinear: bool = False, seed: int = 0):
        self.num_classes = C = int(num_classes)
        self.hidden = None if hidden is None else int(hidden)
        self.nonlinear = bool(nonlinear)
        self.seed = seed
        rng = np.random.default_rng(seed)
        dims = [C, C] if hidden is None else [C, self.hidden, C]
        self.params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = np.eye(C) if fan_in == fan_out else _he_uniform(rng, fan_in, fan_out)
            self.params += [w, np.zeros(fan_out)]

    @property
    def variant(self) -> str:
        return "linear_CC" if self.hidden is None else "three_layer"

    def describe(self) -> str:
        if self.hidden is None:
            base = "linear_CC"
        else:
            base = f"three_layer:{self.hidden}"
        return base + (":prelu" if self.nonlinear else "")

    def __call__(self, z, params: Optional[Sequence[Tensor]] = None) -> Tensor:
        z = tn.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.num_classes:
            raise tn.ShapeError(f"head expects N x {self.num_classes} logits, got {z.shape}")
        ps = self.constants() if params is None else params
        h = z
        for k in range(len(ps) // 2):
            h = tn.add_bias(tn.matmul(h, ps[2 * k]), ps[2 * k + 1])
            if self.nonlinear:
                h = tn.prelu(h, PRELU_SLOPE)
        return h

    @property
    def weight(self) -> np.ndarray:
        if self.hidden is not None or self.nonlinear:
            raise UnsupportedVariantError("weight export needs the linear C x C head")
        return self.params[0]


@dataclass
class HeadExport:
    """``weights[i, j]`` maps source class logit i to distillation logit j."""

    weights: np.ndarray
    top: list
    mean_abs_diagonal: float
    mean_abs_offdiagonal: float

    @property
    def diagonal_dominance(self) -> float:
        if self.mean_abs_offdiagonal == 0.0:
            return float("inf")
        return self.mean_abs_diagonal / self.mean_abs_offdiagonal

    def weights_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        C = self.weights.shape[0]
        w.writerow(["source"] + [f"to_{j}" for j in range(C)])
        for i in range(C):
            w.writerow([i] + [repr(float(v)) for v in self.weights[i]])
        return buf.getvalue()

    def top_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "rank", "source", "weight"])
        for j, entries in enumerate(self.top):
            for rank, (i, v) in enumerate(entries):
                w.writerow([j, rank, i, repr(float(v))])
        return buf.getvalue()


def export_head_weights(head: SerializationHead, top_k: int = 20) -> HeadExport:
    """Full weight matrix plus, for each distillation logit, its top-k inputs by |w|."""
    W = np.array(head.weight)
    C = W.shape[0]
    k = min(top_k, C)
    top = []
    for j in range(C):
        col = W[:, j]
        order = sorted(range(C), key=lambda i: (-abs(col[i]), i))[:k]
        top.append([(i, float(col[i])) for i in order])
    off = ~np.eye(C, dtype=bool)
    return HeadExport(W, top, float(np.abs(np.diag(W)).mean()),
                      float(np.abs(W[off]).mean()) if C > 1 else 0.0)


# -- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, header: dict, arrays: dict) -> None:
    """Text header, a ``---`` line, then little-endian float64 arrays in declaration order."""
    lines = [CHECKPOINT_MAGIC]
    for key, value in header.items():
        lines.append(f"{key} = {value}")
    specs = ",".join(f"{name}:{'x'.join(str(d) for d in a.shape) or 'scalar'}"
                     for name, a in arrays.items())
    lines.append(f"arrays = {specs}")
    lines.append("---")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n---\n")
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or sep < 0:
        raise CheckpointError(f"{path}: not a logitkd checkpoint")
    header = {}
    for line in raw[:sep].decode("ascii").splitlines()[1:]:
        key, _, value = line.partition(" = ")
        header[key] = value
    body = memoryview(raw)[sep + 5:]
    arrays, offset = {}, 0
    for spec in filter(None, header.pop("arrays", "").split(",")):
        name, _, dims = spec.partition(":")
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        n = int(np.prod(shape)) * 8
        if offset + n > len(body):
            raise CheckpointError(f"{path}: truncated array {name}")
        arrays[name] = np.frombuffer(body[offset:offset + n], dtype="<f8").reshape(shape).copy()
        offset += n
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return header, arrays


def save_model(path, mlp: Mlp, head: Optional[SerializationHead] = None, epoch: int = 0,
               extra: Optional[dict] = None) -> None:
    header = {"layer_dims": ",".join(map(str, mlp.layer_dims)),
              "variant": "none" if head is None else head.describe(),
              "seed": mlp.seed, "epoch": epoch}
    header.update(extra or {})
    arrays = {f"mlp.{k}": p for k, p in enumerate(mlp.params)}
    if head is not None:
        arrays.update({f"head.{k}": p for k, p in enumerate(head.params)})
    save_checkpoint(path, header, arrays)


def _parse_variant(variant: str, C: int, seed: int) -> Optional[SerializationHead]:
    if variant == "none":
        return None
    parts = variant.split(":")
    nonlinear = parts[-1] == "prelu"
    if parts[0] == "linear_CC":
        return SerializationHead(C, None, nonlinear, seed)
    if parts[0] == "three_layer":
        return SerializationHead(C, int(parts[1]), nonlinear, seed)
    raise CheckpointError(f"unknown head variant {variant!r}")


def load_model(path) -> tuple[Mlp, Optional[SerializationHead], dict]:
    header, arrays = load_checkpoint(path)
    dims = [int(d) for d in header["layer_dims"].split(",")]
    seed = int(header.get("seed", 0))
    mlp = Mlp(dims, seed)
    mlp.params = [arrays[f"mlp.{k}"] for k in range(len(mlp.params))]
    head = _parse_variant(header.get("variant", "none"), dims[-1], seed)
    if head is not None:
        head.params = [arrays[f"head.{k}"] for k in range(len(head.params))]
    return mlp, head, header
