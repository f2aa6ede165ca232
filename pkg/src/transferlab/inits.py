"""Weight storage and initialization schemes.

A WeightStore is an ordered name -> float32 array mapping whose entries come
from the graph's canonical tensor enumeration. Donor-derived schemes
(mean/variance matching, per-layer sampling, per-layer shuffling) require the
donor to share the recipient's graph fingerprint; each consumes its own
labeled random stream so results do not depend on evaluation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import gabor as gabor_mod
from .models import ModelGraph, conv_layer_names, graph_fingerprint, tensor_specs
from .rng import rng_derive, rng_normal, rng_permutation, rng_truncated_normal, rng_uniform

WEIGHT_ROLES = ("kernel", "dense_weight", "dense_bias")
BN_ROLES = ("gamma", "beta", "moving_mean", "moving_var")

SCHEMES = ("random", "meanvar", "sample", "shuffle", "gabor-conv1")
BN_VARIANTS = ("bn-identity", "bn-meanvar", "bn-transfer")


@dataclass
class WeightStore:
    entries: dict[str, np.ndarray]
    roles: dict[str, str]
    fingerprint: str

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self.entries:
            raise KeyError(f"unknown tensor {name!r}")
        old = self.entries[name]
        value = np.asarray(value, dtype=old.dtype)
        if value.shape != old.shape:
            raise ValueError(f"{name}: shape {value.shape} != {old.shape}")
        self.entries[name] = value

    def names(self) -> list[str]:
        return list(self.entries)

    def copy(self) -> "WeightStore":
        return WeightStore(
            entries={k: v.copy() for k, v in self.entries.items()},
            roles=dict(self.roles),
            fingerprint=self.fingerprint,
        )

    def digest(self) -> str:
        """Content hash over names and bytes; identifies a checkpoint."""
        h = hashlib.sha256()
        for name, arr in self.entries.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:12]


def allocate(graph: ModelGraph) -> WeightStore:
    entries = {}
    roles = {}
    for name, shape, role in tensor_specs(graph):
        entries[name] = np.zeros(shape, dtype=np.float32)
        roles[name] = role
    return WeightStore(entries=entries, roles=roles, fingerprint=graph_fingerprint(graph))


def _fill_bn_identity(store: WeightStore) -> None:
    for name, role in store.roles.items():
        if role in ("gamma", "moving_var"):
            store.entries[name][...] = 1.0
        elif role in ("beta", "moving_mean"):
            store.entries[name][...] = 0.0


def random_init(graph: ModelGraph, seed: int) -> WeightStore:
    """He-style fan-in init: conv kernels truncated normal with
    std = sqrt(2 / fan_in), dense uniform +-1/sqrt(fan_in), identity BN."""
    store = allocate(graph)
    _fill_bn_identity(store)
    for name, shape, role in tensor_specs(graph):
        stream = rng_derive(seed, f"init/{name}")
        if role == "kernel":
            fan_in = shape[0] * shape[1] * shape[2]
            store.entries[name] = rng_truncated_normal(
                stream, 0.0, np.sqrt(2.0 / fan_in), shape
            )
        elif role == "dense_weight":
            bound = 1.0 / np.sqrt(shape[0])
            store.entries[name] = rng_uniform(stream, -bound, bound, shape)
        elif role == "dense_bias":
            store.entries[name] = np.zeros(shape, dtype=np.float32)
    return store


def _require_donor(donor: WeightStore | None, graph: ModelGraph, what: str) -> WeightStore:
    if donor is None:
        raise ValueError(f"{what} requires a donor weight store")
    if donor.fingerprint != graph_fingerprint(graph):
        raise ValueError(
            f"{what}: donor fingerprint {donor.fingerprint} does not match "
            f"graph {graph_fingerprint(graph)}"
        )
    return donor


def bn_variant_init(variant: str, graph: ModelGraph, store: WeightStore,
                    donor: WeightStore | None = None, seed: int = 0) -> None:
    """Fill BN tensors in place per variant.

    bn-identity: gamma=1, beta=0, moving stats (0, 1).
    bn-meanvar: each BN tensor redrawn iid from a normal matching the donor
    tensor's mean and population variance (moving_var clipped at 0).
    bn-transfer: donor BN tensors copied bitwise.
    """
    if variant not in BN_VARIANTS:
        raise ValueError(f"unknown BN variant {variant!r}; known: {BN_VARIANTS}")
    if variant == "bn-identity":
        _fill_bn_identity(store)
        return
    donor = _require_donor(donor, graph, variant)
    for name, role in store.roles.items():
        if role not in BN_ROLES:
            continue
        if variant == "bn-transfer":
            store.entries[name] = donor.entries[name].copy()
        else:
            src = donor.entries[name].astype(np.float64)
            stream = rng_derive(seed, f"bnmeanvar/{name}")
            drawn = rng_normal(stream, float(src.mean()), float(src.std()), src.shape)
            if role == "moving_var":
                drawn = np.maximum(drawn, 0.0)  # keep variances valid
            store.entries[name] = drawn.astype(np.float32)


def mean_var_init(donor: WeightStore, graph: ModelGraph, seed: int,
                  bn_variant: str = "bn-identity") -> WeightStore:
    """Per layer, redraw weights iid normal with the donor tensor's mean and
    population variance. A zero-variance donor tensor reproduces its mean
    exactly."""
    donor = _require_donor(donor, graph, "meanvar")
    store = allocate(graph)
    for name, shape, role in tensor_specs(graph):
        if role not in WEIGHT_ROLES:
            continue
        src = donor.entries[name].astype(np.float64)
        stream = rng_derive(seed, f"meanvar/{name}")
        store.entries[name] = rng_normal(stream, float(src.mean()), float(src.std()), shape)
    bn_variant_init(bn_variant, graph, store, donor=donor, seed=seed)
    return store


def sampling_init(donor: WeightStore, graph: ModelGraph, seed: int,
                  bn_variant: str = "bn-identity") -> WeightStore:
    """Each weight drawn independently, with replacement, from the donor
    layer's empirical value set."""
    donor = _require_donor(donor, graph, "sample")
    store = allocate(graph)
    for name, shape, role in tensor_specs(graph):
        if role not in WEIGHT_ROLES:
            continue
        flat = donor.entries[name].ravel()
        stream = rng_derive(seed, f"sample/{name}")
        idx = stream.gen.integers(0, flat.size, size=int(np.prod(shape, dtype=np.int64)))
        store.entries[name] = flat[idx].reshape(shape).copy()
    bn_variant_init(bn_variant, graph, store, donor=donor, seed=seed)
    return store


def shuffled_init(donor: WeightStore, graph: ModelGraph, seed: int,
                  bn_variant: str = "bn-identity") -> WeightStore:
    """Donor weights permuted within each layer: exact same multiset,
    destroyed structure."""
    donor = _require_donor(donor, graph, "shuffle")
    store = allocate(graph)
    for name, shape, role in tensor_specs(graph):
        if role not in WEIGHT_ROLES:
            continue
        flat = donor.entries[name].ravel()
        stream = rng_derive(seed, f"shuffle/{name}")
        perm = rng_permutation(stream, flat.size)
        store.entries[name] = flat[perm].reshape(shape).copy()
    bn_variant_init(bn_variant, graph, store, donor=donor, seed=seed)
    return store


def apply_conv1_gabor(store: WeightStore, graph: ModelGraph,
                      config: gabor_mod.GaborConfig | None = None,
                      reference: np.ndarray | None = None) -> WeightStore:
    """Return a copy of ``store`` whose first conv kernel is a Gabor bank.

    Filters are grayscale, repeated across input channels, one per output
    channel, and globally rescaled so the tensor's std matches ``reference``
    (default: the kernel being replaced).
    """
    conv1 = conv_layer_names(graph)[0]
    kernel_name = f"{conv1}/kernel"
    k, _, c_in, c_out = store.entries[kernel_name].shape
    if config is None:
        config = gabor_mod.GaborConfig(kernel_crop=k)
    if config.kernel_crop != k:
        raise ValueError(
            f"bank crop {config.kernel_crop} does not match conv1 kernel size {k}"
        )
    if config.n_filters < c_out:
        raise ValueError(
            f"bank holds {config.n_filters} filters but {conv1} needs {c_out}"
        )
    bank = gabor_mod.gabor_bank(config)[:c_out]
    if reference is None:
        reference = store.entries[kernel_name]
    tensor = np.repeat(bank.transpose(1, 2, 0)[:, :, None, :], c_in, axis=2)
    tensor = gabor_mod.scale_to_match(tensor, np.asarray(reference, dtype=np.float64))
    out = store.copy()
    out.entries[kernel_name] = tensor.astype(np.float32)
    return out


def init_store(graph: ModelGraph, scheme: str, seed: int,
               donor: WeightStore | None = None,
               bn_variant: str = "bn-identity",
               gabor_config: gabor_mod.GaborConfig | None = None) -> WeightStore:
    """Build initial weights for ``graph`` under a named scheme.

    "random" ignores the donor; "gabor-conv1" starts from random and overlays
    the synthetic bank on conv1, scale-matched to the donor's conv1 when one
    is given, else to its own random draw.
    """
    if scheme == "random":
        store = random_init(graph, seed)
        if bn_variant != "bn-identity":
            bn_variant_init(bn_variant, graph, store, donor=donor, seed=seed)
        return store
    if scheme == "meanvar":
        return mean_var_init(donor, graph, seed, bn_variant)
    if scheme == "sample":
        return sampling_init(donor, graph, seed, bn_variant)
    if scheme == "shuffle":
        return shuffled_init(donor, graph, seed, bn_variant)
    if scheme == "gabor-conv1":
        store = random_init(graph, seed)
        if bn_variant != "bn-identity":
            bn_variant_init(bn_variant, graph, store, donor=donor, seed=seed)
        reference = None
        if donor is not None:
            conv1 = conv_layer_names(graph)[0]
            reference = donor.entries[f"{conv1}/kernel"]
        return apply_conv1_gabor(store, graph, gabor_config, reference)
    raise ValueError(f"unknown init scheme {scheme!r}; known: {SCHEMES}")
