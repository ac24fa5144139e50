"""Fold a normalizer's inverse into the final linear layer.

A head trained against normalized targets computes ``x' = W' h + b'``; the
teacher-space prediction is ``Theta x' + mu``. Both are affine, so the head
can be rewritten as ``W = Theta W'``, ``b = Theta b' + mu`` and emit
denormalized outputs directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._random import generator
from .errors import IncompleteNormalizer, ShapeError
from .normalize import Method, Normalizer, invert
from .tensorio import decode_bundle, encode_bundle


@dataclass(frozen=True, eq=False)
class LinearLayer:
    weight: np.ndarray  # C x D
    bias: np.ndarray  # C

    def __post_init__(self):
        w = np.asarray(self.weight)
        b = np.asarray(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError(f"weight {w.shape} and bias {b.shape} are inconsistent")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ShapeError("layer has non-finite parameters")

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, h) -> np.ndarray:
        return np.asarray(h, dtype=np.float64) @ np.asarray(self.weight, dtype=np.float64).T + self.bias


@dataclass(frozen=True, eq=False)
class FusedLinear(LinearLayer):
    method: Method = Method.GLOBAL_STANDARDIZE
    theta_source: str = ""


def theta(nrm: Normalizer) -> np.ndarray:
    """The C x C denormalization matrix (the normalizer's inverse linear part)."""
    if nrm.inverse is None or nrm.offset is None:
        raise IncompleteNormalizer(f"{nrm.method.value} normalizer has no inverse")
    inv = np.asarray(nrm.inverse, dtype=np.float64)
    if inv.ndim == 2 and inv.shape != (nrm.channels, nrm.channels):
        raise IncompleteNormalizer(f"inverse has shape {inv.shape}, expected square C={nrm.channels}")
    return nrm.inverse_matrix()


_THETA_SOURCE = {
    Method.GLOBAL_STANDARDIZE: "I*sigma_g",
    Method.STANDARDIZE: "diag(sigma)",
    Method.PCA_WHITEN: "U L^1/2",
    Method.ZCA_WHITEN: "Sigma^1/2",
    Method.HCA_WHITEN: "U L^1/2 H^T",
    Method.PHI_S: "phi U H^T",
}


def fuse(layer: LinearLayer, nrm: Normalizer) -> FusedLinear:
    """Rewrite ``layer`` so it emits teacher-space outputs (always in float64)."""
    if layer.out_features != nrm.channels:
        raise ShapeError(f"layer emits {layer.out_features} features, normalizer expects {nrm.channels}")
    th = theta(nrm)
    w = np.asarray(layer.weight, dtype=np.float64)
    b = np.asarray(layer.bias, dtype=np.float64)
    return FusedLinear(
        weight=th @ w,
        bias=th @ b + nrm.offset,
        method=nrm.method,
        theta_source=_THETA_SOURCE[nrm.method],
    )


@dataclass(frozen=True)
class FusionCheck:
    max_relative_error: float
    max_abs_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_relative_error < self.tolerance


def verify_fusion(
    layer: LinearLayer,
    nrm: Normalizer,
    fused: LinearLayer,
    probe_count: int = 1000,
    seed: int = 0,
    probes=None,
    tolerance: float = 1e-6,
) -> FusionCheck:
    """Compare ``fused(h)`` with ``invert(nrm, layer(h))`` on random probes.

    The relative error of a probe is ``|a - b| / |b|`` (Euclidean norms over
    the output vector); the maximum over probes is reported.
    """
    if probes is None:
        probes = generator(seed).standard_normal((probe_count, layer.in_features))
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    direct = fused(probes)
    reference = invert(nrm, layer(probes))
    diff = np.linalg.norm(direct - reference, axis=1)
    scale = np.linalg.norm(reference, axis=1)
    rel = diff / np.where(scale > 0, scale, 1.0)
    return FusionCheck(float(rel.max()), float(np.abs(direct - reference).max()), tolerance)


# -- files -------------------------------------------------------------------


def serialize_layer(layer: LinearLayer) -> bytes:
    manifest = {"kind": "linear", "in_features": layer.in_features, "out_features": layer.out_features}
    if isinstance(layer, FusedLinear):
        manifest["fused_method"] = layer.method.value
        manifest["theta_source"] = layer.theta_source
    return encode_bundle(manifest, {"weight": np.asarray(layer.weight), "bias": np.asarray(layer.bias)})


def deserialize_layer(data: bytes) -> LinearLayer:
    manifest, t = decode_bundle(data)
    if manifest.get("kind") != "linear":
        raise ShapeError(f"bundle holds a {manifest.get('kind')!r}, not a linear layer")
    if "fused_method" in manifest:
        return FusedLinear(t["weight"], t["bias"], Method(manifest["fused_method"]), manifest["theta_source"])
    return LinearLayer(t["weight"], t["bias"])
