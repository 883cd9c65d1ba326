"""Explicit parameter containers and the flat text weight format.

Weight files hold one tensor per line::

    # spsmask-weights v1
    <name> <d0,d1,...> <v0> <v1> ...

Values are row-major and written with ``repr`` so a save/load round trip is
bit exact. Lines starting with ``#`` and blank lines are ignored.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spsmask.errors import InputError

DTYPE = np.float64
WEIGHTS_HEADER = "# spsmask-weights v1"
SFM_DILATIONS = (1, 3, 5)


def as_real(a):
    return np.ascontiguousarray(a, dtype=DTYPE)


@dataclass(frozen=True)
class ConvKernel:
    """3x3 convolution kernel, weight layout [F_out, F_in, 3, 3]."""

    weight: np.ndarray
    bias: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        object.__setattr__(self, "weight", as_real(self.weight))
        object.__setattr__(self, "bias", as_real(self.bias))
        w, b = self.weight, self.bias
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise InputError(f"conv weight must be [F_out, F_in, 3, 3], got {w.shape}")
        if b.shape != (w.shape[0],):
            raise InputError(f"conv bias must be [{w.shape[0]}], got {b.shape}")
        if int(self.dilation) < 1:
            raise InputError(f"dilation must be >= 1, got {self.dilation}")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise InputError("conv parameters must be finite")
        object.__setattr__(self, "dilation", int(self.dilation))

    @property
    def f_in(self):
        return self.weight.shape[1]

    @property
    def f_out(self):
        return self.weight.shape[0]

    def taps(self):
        """(drow, dcol) offsets in row-major tap order."""
        d = self.dilation
        return [((ky - 1) * d, (kx - 1) * d) for ky in range(3) for kx in range(3)]

    def tap_matrix(self):
        # [9, F_in, F_out], tap order matches taps()
        return self.weight.reshape(self.f_out, self.f_in, 9).transpose(2, 1, 0)

    def contract(self, patches):
        """Apply the kernel to gathered neighborhoods ``patches`` of shape [N, 9, F_in]."""
        if patches.shape[1:] != (9, self.f_in):
            raise InputError(f"expected patches [N, 9, {self.f_in}], got {patches.shape}")
        n = patches.shape[0]
        flat = self.tap_matrix().reshape(9 * self.f_in, self.f_out)
        return patches.reshape(n, 9 * self.f_in) @ flat + self.bias

    @classmethod
    def zeros(cls, f_out, f_in, dilation=1):
        return cls(np.zeros((f_out, f_in, 3, 3)), np.zeros(f_out), dilation)

    @classmethod
    def identity(cls, f, dilation=1):
        w = np.zeros((f, f, 3, 3))
        w[np.arange(f), np.arange(f), 1, 1] = 1.0
        return cls(w, np.zeros(f), dilation)


@dataclass(frozen=True)
class MlpParams:
    """Fully connected layers with ReLU between them (not after the last).

    Each weight is stored as [out, in]; a layer computes ``x @ W.T + b``.
    """

    weights: tuple
    biases: tuple

    def __post_init__(self):
        ws = tuple(as_real(w) for w in self.weights)
        bs = tuple(as_real(b) for b in self.biases)
        if not ws or len(ws) != len(bs):
            raise InputError("MLP needs at least one layer and one bias per layer")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InputError(f"MLP layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise InputError(
                    f"MLP layer {i} expects {w.shape[1]} inputs but layer {i - 1} "
                    f"produces {ws[i - 1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise InputError(f"MLP layer {i} has non-finite parameters")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def f_in(self):
        return self.weights[0].shape[1]

    @property
    def f_out(self):
        return self.weights[-1].shape[0]

    @property
    def n_layers(self):
        return len(self.weights)

    def layer_dims(self):
        return [(w.shape[1], w.shape[0]) for w in self.weights]

    def __call__(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.f_in:
            raise InputError(f"MLP expects feature size {self.f_in}, got {x.shape[-1]}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.T + b
            if i < last:
                x = np.maximum(x, 0.0)
        return x

    @classmethod
    def linear(cls, weight, bias=None):
        weight = as_real(weight)
        if bias is None:
            bias = np.zeros(weight.shape[0])
        return cls((weight,), (bias,))

    @classmethod
    def identity(cls, f, n_layers=1):
        # ReLU between layers makes a multi-layer identity impossible for
        # negative inputs; split x into (relu(x), relu(-x)) and recombine.
        if n_layers == 1:
            return cls.linear(np.eye(f))
        if n_layers != 2:
            raise InputError("identity MLP supports 1 or 2 layers")
        w1 = np.vstack([np.eye(f), -np.eye(f)])
        w2 = np.hstack([np.eye(f), -np.eye(f)])
        return cls((w1, w2), (np.zeros(2 * f), np.zeros(f)))

    @classmethod
    def zeros(cls, dims, bias=None):
        """Zero MLP through the widths in ``dims``; optional final-layer bias."""
        ws = [np.zeros((dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
        bs = [np.zeros(d) for d in dims[1:]]
        if bias is not None:
            bs[-1] = as_real(bias)
        return cls(tuple(ws), tuple(bs))


@dataclass(frozen=True)
class SfmParams:
    """Three parallel 3x3 convolutions at dilations 1, 3 and 5."""

    convs: tuple

    def __post_init__(self):
        convs = tuple(self.convs)
        if len(convs) != 3 or tuple(c.dilation for c in convs) != SFM_DILATIONS:
            raise InputError(f"SFM needs three kernels with dilations {SFM_DILATIONS}")
        shapes = {c.weight.shape for c in convs}
        if len(shapes) != 1:
            raise InputError(f"SFM kernels must share shape, got {sorted(shapes)}")
        object.__setattr__(self, "convs", convs)

    @property
    def f_in(self):
        return self.convs[0].f_in

    @property
    def f_out(self):
        return self.convs[0].f_out


@dataclass(frozen=True)
class DeformConvParams:
    """Deformable 3x3 convolution: base kernel plus a linear offset predictor.

    The predictor maps a feature to 18 values; entries ``2t`` and ``2t + 1``
    are the (row, col) offsets of tap ``t`` in row-major tap order.
    """

    kernel: ConvKernel
    offset: MlpParams

    def __post_init__(self):
        if self.kernel.dilation != 1:
            raise InputError("deformable conv base kernel must have dilation 1")
        if self.offset.n_layers != 1:
            raise InputError("offset predictor must be a single linear layer")
        if self.offset.f_in != self.kernel.f_in or self.offset.f_out != 18:
            raise InputError(
                f"offset predictor must map {self.kernel.f_in} -> 18, "
                f"got {self.offset.f_in} -> {self.offset.f_out}"
            )

    @property
    def f_in(self):
        return self.kernel.f_in

    @property
    def f_out(self):
        return self.kernel.f_out


# -- flat tensor dictionaries ------------------------------------------------

def flatten_params(obj, prefix):
    """Flatten a parameter container into ``{name: array}``."""
    out = {}
    if isinstance(obj, ConvKernel):
        out[f"{prefix}.weight"] = obj.weight
        out[f"{prefix}.bias"] = obj.bias
        out[f"{prefix}.dilation"] = np.array([obj.dilation], dtype=DTYPE)
    elif isinstance(obj, MlpParams):
        for i, (w, b) in enumerate(zip(obj.weights, obj.biases)):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
    elif isinstance(obj, SfmParams):
        for i, c in enumerate(obj.convs):
            out.update(flatten_params(c, f"{prefix}.conv{i}"))
    elif isinstance(obj, DeformConvParams):
        out.update(flatten_params(obj.kernel, f"{prefix}.kernel"))
        out.update(flatten_params(obj.offset, f"{prefix}.offset"))
    else:
        raise TypeError(f"cannot flatten {type(obj).__name__}")
    return out


def _take(tensors, name):
    try:
        return tensors[name]
    except KeyError:
        raise InputError(f"missing tensor '{name}' in weights") from None


def conv_from_tensors(tensors, prefix):
    return ConvKernel(
        _take(tensors, f"{prefix}.weight"),
        _take(tensors, f"{prefix}.bias"),
        int(_take(tensors, f"{prefix}.dilation")[0]),
    )


def mlp_from_tensors(tensors, prefix):
    ws, bs = [], []
    i = 0
    while f"{prefix}.{i}.weight" in tensors:
        ws.append(tensors[f"{prefix}.{i}.weight"])
        bs.append(_take(tensors, f"{prefix}.{i}.bias"))
        i += 1
    if not ws:
        raise InputError(f"missing tensor '{prefix}.0.weight' in weights")
    return MlpParams(tuple(ws), tuple(bs))


def sfm_from_tensors(tensors, prefix):
    return SfmParams(tuple(conv_from_tensors(tensors, f"{prefix}.conv{i}") for i in range(3)))


def deform_from_tensors(tensors, prefix):
    return DeformConvParams(
        conv_from_tensors(tensors, f"{prefix}.kernel"),
        mlp_from_tensors(tensors, f"{prefix}.offset"),
    )


# -- text format ---------------------------------------------------------------

def format_tensors(tensors):
    lines = [WEIGHTS_HEADER]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=DTYPE)
        if not name or any(c.isspace() for c in name):
            raise InputError(f"invalid tensor name {name!r}")
        shape = ",".join(str(d) for d in arr.shape)
        values = " ".join(repr(float(v)) for v in arr.ravel())
        lines.append(f"{name} {shape} {values}".rstrip())
    return "\n".join(lines) + "\n"


def parse_tensors(text, source="<string>"):
    tensors = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise InputError(f"{source}:{lineno}: expected '<name> <shape> <values...>'")
        name, shape_s, values = parts[0], parts[1], parts[2:]
        try:
            shape = tuple(int(d) for d in shape_s.split(","))
            data = np.array([float(v) for v in values], dtype=DTYPE)
        except ValueError as exc:
            raise InputError(f"{source}:{lineno}: {exc}") from None
        if data.size != int(np.prod(shape)):
            raise InputError(
                f"{source}:{lineno}: tensor '{name}' has shape {shape} "
                f"but {data.size} values"
            )
        if name in tensors:
            raise InputError(f"{source}:{lineno}: duplicate tensor '{name}'")
        tensors[name] = data.reshape(shape)
    return tensors


def save_tensors(path, tensors):
    Path(path).write_text(format_tensors(tensors))


def load_tensors(path):
    path = Path(path)
    return parse_tensors(path.read_text(), source=str(path))
