"""A representation paired with its decoder, exposed through one forward/backward interface."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any

import numpy as np

from .decoder import FieldDecoder
from .errors import ContractError
from .fields import NoFeatures, TriPlane, VoxelGrid
from .tape import GradientTape

KINDS = ("triplane", "voxel", "implicit")


@dataclass
class FieldCache:
    points: np.ndarray
    rep: Any
    dec: Any


class NeuralField:
    """Point -> (sigma, feature) through ``decoder(representation.query(x), x)``.

    Parameters of both parts are exposed through one flat dict so a single
    tape and optimiser state can cover them.
    """

    def __init__(self, rep, decoder: FieldDecoder):
        if decoder.in_features != rep.channels:
            raise ContractError(f"decoder expects {decoder.in_features} channels, representation has {rep.channels}")
        self.rep = rep
        self.decoder = decoder

    @property
    def kind(self) -> str:
        return self.rep.kind

    @property
    def side(self) -> float:
        return self.rep.side

    @property
    def out_channels(self) -> int:
        return self.decoder.out_channels

    def params(self) -> dict[str, np.ndarray]:
        return {**self.rep.params(), **self.decoder.params()}

    def new_tape(self) -> GradientTape:
        return GradientTape.like(self.params())

    def forward(self, points):
        pts = np.asarray(points).reshape(-1, 3)
        feat, rep_cache = self.rep.query(pts)
        sigma, out, dec_cache = self.decoder.forward(feat, pts)
        return sigma, out, FieldCache(pts, rep_cache, dec_cache)

    def density(self, points) -> np.ndarray:
        return self.forward(points)[0]

    def backward(self, cache: FieldCache, dsigma, dfeat, tape: GradientTape) -> None:
        dx = self.decoder.backward(cache.dec, dsigma, dfeat, tape)
        self.rep.backward(cache.rep, dx, tape)

    def copy(self) -> "NeuralField":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "NeuralField":
        out = self.copy()
        if isinstance(out.rep, TriPlane):
            out.rep.planes = out.rep.planes.astype(dtype)
        elif isinstance(out.rep, VoxelGrid):
            out.rep.grid = out.rep.grid.astype(dtype)
        else:
            out.rep.dtype = dtype
        out.decoder.weights = [w.astype(dtype) for w in out.decoder.weights]
        out.decoder.biases = [b.astype(dtype) for b in out.decoder.biases]
        return out


def build_field(kind: str, *, resolution=64, channels=16, side=2.0, hidden=128, n_hidden=2,
                n_freqs=4, feature_scale=0.1, seed=0, dtype=np.float32) -> NeuralField:
    """Representation + SSO-style RGB decoder, initialised from ``seed``."""
    rng = np.random.default_rng(seed)
    if kind == "triplane":
        rep = TriPlane.random(resolution, channels, side, feature_scale, rng, dtype)
    elif kind == "voxel":
        rep = VoxelGrid.random(resolution, channels, side, feature_scale, rng, dtype)
    elif kind == "implicit":
        rep = NoFeatures(side, dtype=dtype)
        if n_freqs is None:
            raise ContractError("an implicit field needs a position encoding")
    else:
        raise ContractError(f"unknown representation kind {kind!r}; expected one of {KINDS}")
    dec = FieldDecoder.sso_preset(rep.channels, hidden, n_hidden, n_freqs, side, rng, dtype)
    return NeuralField(rep, dec)
