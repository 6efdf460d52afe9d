"""Model construction from architecture specs and the checkpoint file format.

A checkpoint is ``MAGIC | uint64 header length | JSON header | float64 array``,
all little-endian.  The header carries the architecture spec, so a model can
be rebuilt without the experiment config.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .alignment import AlignmentModel
from .density import DiagonalGaussian, FixedStandardNormal, FlowDensity, GaussianMixture
from .flows import (
    AffineCouplingLayer,
    AffineFlow,
    ElementwiseAffine,
    FlowSequence,
    IdentityFlow,
    Permutation,
    make_realnvp,
)
from .numeric import make_rng

MAGIC = b"AUBCKPT1"
FORMAT_VERSION = 1


def build_flow(spec: dict, dim: int, rng):
    kind = spec["type"]
    if kind == "identity":
        return IdentityFlow(dim)
    if kind == "affine":
        return AffineFlow(dim)
    if kind == "elementwise_affine":
        return ElementwiseAffine(dim)
    if kind == "permutation":
        return Permutation(spec["perm"])
    if kind == "realnvp":
        return make_realnvp(
            dim,
            spec["n_layers"],
            spec["hidden_dim"],
            spec.get("n_hidden", 1),
            rng,
            scale_clamp=spec.get("scale_clamp", 5.0),
            norm=spec.get("norm", True),
        )
    if kind == "coupling":
        return AffineCouplingLayer(dim, np.array(spec["mask"], dtype=bool), spec["hidden_dim"], spec["n_hidden"], rng, spec.get("scale_clamp", 5.0))
    if kind == "sequence":
        return FlowSequence([build_flow(s, dim, rng) for s in spec["layers"]])
    raise ValueError(f"unknown flow type {kind!r}")


def build_density(spec: dict, dim: int, rng):
    kind = spec["type"]
    if kind == "standard_normal":
        return FixedStandardNormal(dim)
    if kind == "diag_gaussian":
        return DiagonalGaussian(dim)
    if kind == "mog":
        return GaussianMixture(dim, spec["n_components"], rng)
    if kind == "flow":
        return FlowDensity(build_flow(spec["flow"], dim, rng))
    raise ValueError(f"unknown density type {kind!r}")


def build_model(spec: dict, dim: int, seed: int) -> AlignmentModel:
    """Instantiate flows (in order) then the density from one seeded stream."""
    rng = make_rng(seed)
    flows = [build_flow(fs, dim, rng) for fs in spec["flows"]]
    density = build_density(spec["density"], dim, rng)
    return AlignmentModel(flows, density, spec.get("weights"))


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def checkpoint_bytes(model: AlignmentModel, seed: int, extra: dict | None = None) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": model.spec(),
        "dim": model.dim,
        "k": model.k,
        "seed": seed,
        "n_params": len(model.store),
        "segments": [[name, off, n] for name, off, n in model.store.segments],
    }
    if extra:
        header.update(extra)
    hb = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(hb)) + hb + model.store.values.astype("<f8").tobytes()


def save_checkpoint(path, model: AlignmentModel, seed: int, extra: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(model, seed, extra))


def read_checkpoint(path):
    """Return ``(header, values)`` from a checkpoint file."""
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path} is not an AUB checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode())
    values = np.frombuffer(blob[16 + hlen:], dtype="<f8").astype(np.float64)
    if values.size != header["n_params"]:
        raise ValueError(f"{path}: header promises {header['n_params']} parameters, found {values.size}")
    return header, values


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, header)``."""
    header, values = read_checkpoint(path)
    model = build_model(header["architecture"], header["dim"], header["seed"])
    model.store.load_values(values)
    return model, header
