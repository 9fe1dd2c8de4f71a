"""Small MLP decoders mapping aggregated features (and optionally an encoded position) to density and color."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit as logistic

from .errors import ContractError
from .tape import GradientTape


def softplus(x):
    """``log(1 + e^x)`` computed as ``max(x, 0) + log1p(e^-|x|)``, stable for any x."""
    x = np.asarray(x)
    out = np.abs(x)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(x, 0)
    return out


def softplus_grad_from_output(y):
    """Derivative of softplus expressed through its output: ``logistic(x) = 1 - exp(-softplus(x))``."""
    g = np.negative(y)
    np.expm1(g, out=g)
    np.negative(g, out=g)
    return g


ACTIVATIONS = ("softplus", "relu")


def encoding_width(n_freqs: Optional[int]) -> int:
    return 0 if n_freqs is None else 3 + 6 * n_freqs


def fourier_encode(x, n_freqs: int) -> np.ndarray:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]``.

    Works on a single point or a ``(P, 3)`` batch; output width is ``3 + 6 L``.
    """
    x = np.asarray(x)
    parts = [x]
    for level in range(n_freqs):
        arg = (2.0 ** level * np.pi) * x
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def layer_name(i: int, what: str) -> str:
    return f"decoder.{i}.{what}"


@dataclass
class DecoderCache:
    inputs: list
    out: np.ndarray


@dataclass
class FieldDecoder:
    """Fully connected decoder with softplus (or ReLU) hidden activations.

    ``weights[i]`` has shape ``(fan_in, fan_out)``. Output column 0 is the
    density logit (softplus gives sigma >= 0); columns 1.. are the K feature
    channels, of which the first three go through the logistic function when
    ``rgb`` is set. With ``n_freqs`` set, the Fourier-encoded normalised
    position is appended to the feature input.
    """

    weights: list
    biases: list
    in_features: int
    n_freqs: Optional[int] = None
    rgb: bool = False
    side: float = 2.0
    activation: str = "softplus"
    _names: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError("decoder needs one bias per weight matrix and at least one layer")
        width = self.in_width
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[0] != width or b.shape != (w.shape[1],):
                raise ContractError(f"layer shapes do not chain: expected fan-in {width}, got {w.shape}/{b.shape}")
            width = w.shape[1]
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if width < 2:
            raise ContractError("decoder output must hold density plus at least one channel")
        if not all(np.all(np.isfinite(a)) for a in (*self.weights, *self.biases)):
            raise ContractError("decoder parameters must be finite")
        self._names = [(layer_name(i, "weight"), layer_name(i, "bias")) for i in range(len(self.weights))]

    @classmethod
    def build(cls, in_features: int, hidden: Sequence[int], out_channels: int, n_freqs=None,
              rgb=False, side=2.0, rng=None, dtype=np.float32, activation="softplus") -> "FieldDecoder":
        rng = np.random.default_rng(rng)
        sizes = [in_features + encoding_width(n_freqs), *hidden, 1 + out_channels]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases, in_features, n_freqs, rgb, side, activation)

    @classmethod
    def gan_preset(cls, in_features=32, rng=None, dtype=np.float32):
        """One hidden layer of 64 units, 32 raw feature channels, no position input."""
        return cls.build(in_features, [64], 32, None, False, rng=rng, dtype=dtype)

    @classmethod
    def sso_preset(cls, in_features, hidden=128, n_hidden=2, n_freqs=4, side=2.0, rng=None, dtype=np.float32):
        """Wider decoder with a Fourier-encoded position input and 3 RGB outputs."""
        return cls.build(in_features, [hidden] * n_hidden, 3, n_freqs, True, side, rng, dtype)

    @property
    def in_width(self) -> int:
        return self.in_features + encoding_width(self.n_freqs)

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[1] - 1

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for (wn, bn), w, b in zip(self._names, self.weights, self.biases):
            out[wn] = w
            out[bn] = b
        return out

    def assemble_input(self, feat: np.ndarray, points: Optional[np.ndarray]) -> np.ndarray:
        feat = np.asarray(feat)
        if feat.ndim != 2 or feat.shape[1] != self.in_features:
            raise ContractError(f"decoder expects {self.in_features} feature channels, got {feat.shape}")
        if self.n_freqs is None:
            return feat
        if points is None:
            raise ContractError("this decoder encodes position; points are required")
        pts = np.asarray(points, dtype=self.dtype).reshape(-1, 3) / (0.5 * self.side)
        return np.concatenate([feat.astype(self.dtype, copy=False), fourier_encode(pts, self.n_freqs)], axis=1)

    def forward(self, feat, points=None):
        """Batched decode of ``(P, C)`` features; returns ``(sigma (P,), features (P, K), cache)``."""
        h = self.assemble_input(feat, points)
        inputs = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w
            z += b
            if i < last:
                h = softplus(z) if self.activation == "softplus" else np.maximum(z, 0, out=z)
            else:
                out = z
        sigma = softplus(out[:, 0])
        feats = out[:, 1:]
        if self.rgb:
            feats = feats.copy()
            feats[:, :3] = logistic(feats[:, :3])
        return sigma, feats, DecoderCache(inputs, out)

    def backward(self, cache: Optional[DecoderCache], dsigma, dfeat, tape: GradientTape) -> np.ndarray:
        """Accumulate parameter gradients and return d(loss)/d(input features), shape ``(P, C)``."""
        if cache is None:
            raise ContractError("decode backward needs the cache from a matching forward pass")
        out = cache.out
        dout = np.empty_like(out)
        dout[:, 0] = np.asarray(dsigma).reshape(-1) * logistic(out[:, 0])
        dout[:, 1:] = dfeat
        if self.rgb:
            s = logistic(out[:, 1:4])
            dout[:, 1:4] *= s * (1.0 - s)
        for i in range(len(self.weights) - 1, -1, -1):
            wn, bn = self._names[i]
            tape.accumulate(wn, cache.inputs[i].T @ dout)
            tape.accumulate(bn, dout.sum(axis=0))
            dh = dout @ self.weights[i].T
            if i > 0:
                if self.activation == "softplus":
                    dout = softplus_grad_from_output(cache.inputs[i])
                    dout *= dh
                else:
                    dout = dh * (cache.inputs[i] > 0)
        return dh[:, :self.in_features]


def decode(dec: FieldDecoder, feat, x=None):
    """Decode a single feature vector (or a batch); returns ``(sigma, features)``."""
    feat = np.asarray(feat)
    single = feat.ndim == 1
    pts = None if x is None else np.asarray(x).reshape(-1, 3)
    sigma, out, _ = dec.forward(feat.reshape(1, -1) if single else feat, pts)
    if single:
        return sigma[0], out[0]
    return sigma, out


def decode_backward(dec: FieldDecoder, cache, upstream, tape: GradientTape) -> np.ndarray:
    """``upstream`` is ``(dsigma, dfeature)``; returns the gradient w.r.t. the input features."""
    dsigma, dfeat = upstream
    dfeat = np.asarray(dfeat)
    single = dfeat.ndim == 1
    grad = dec.backward(cache, np.atleast_1d(dsigma), dfeat.reshape(1, -1) if single else dfeat, tape)
    return grad[0] if single else grad
