"""Weight transfusion and layer freezing.

Transfusion copies a contiguous prefix of donor layers (up to and including a
boundary conv layer) into a fresh store bitwise and fills the remainder with
a named init scheme. Freezing builds the same kind of store plus a
trainability mask; the three variants mirror the fixed-feature-extractor
comparisons: pretrained everywhere, pretrained prefix with random suffix, and
the random-features control.
"""

from __future__ import annotations

from .inits import WeightStore, init_store
from .models import ModelGraph, graph_fingerprint, tensor_specs

FREEZE_VARIANTS = ("full_pretrained", "prefix_pretrained_rest_random", "random_baseline")

# boundary spellings that mean "empty prefix"
NO_BOUNDARY = (None, "", "none")


def boundary_index(graph: ModelGraph, boundary) -> int:
    """Index of the prefix end; -1 for an empty prefix. The boundary may be
    any layer, including the head (= full transfer)."""
    if boundary in NO_BOUNDARY:
        return -1
    names = [l.name for l in graph.layers]
    if boundary not in names:
        raise ValueError(f"unknown boundary layer {boundary!r}; graph has {names}")
    return names.index(boundary)


def prefix_layer_names(graph: ModelGraph, boundary) -> list[str]:
    """Layers at or before the boundary (inclusive); [] for no boundary."""
    idx = boundary_index(graph, boundary)
    return [l.name for l in graph.layers[: idx + 1]]


def prefix_tensor_names(graph: ModelGraph, boundary) -> list[str]:
    layers = set(prefix_layer_names(graph, boundary))
    return [name for name, _, _ in tensor_specs(graph) if name.split("/")[0] in layers]


def transfuse(donor: WeightStore, donor_graph: ModelGraph, graph: ModelGraph,
              boundary, remainder_scheme: str = "random", seed: int = 0,
              bn_stats: str = "copy") -> WeightStore:
    """Donor prefix (inclusive of ``boundary``), remainder per scheme.

    Prefix tensors are copied bitwise, including BN moving statistics unless
    ``bn_stats="reset"`` restores them to (0, 1). The donor may have a
    different graph (slim hybrids) as long as every prefix tensor shape
    matches; donor-derived remainder schemes then become unavailable.
    """
    if bn_stats not in ("copy", "reset"):
        raise ValueError(f"bn_stats must be copy|reset, got {bn_stats!r}")
    if donor.fingerprint != graph_fingerprint(donor_graph):
        raise ValueError("donor store does not match donor graph")
    same_graph = graph_fingerprint(graph) == donor.fingerprint
    if remainder_scheme != "random" and not same_graph:
        raise ValueError(
            f"remainder scheme {remainder_scheme!r} needs a donor with the "
            "recipient's graph; only 'random' works across graphs"
        )
    store = init_store(
        graph, remainder_scheme, seed, donor=donor if same_graph else None
    )
    prefix_names = prefix_tensor_names(graph, boundary)
    donor_names = set(prefix_tensor_names(donor_graph, boundary))
    for name in prefix_names:
        if name not in donor_names:
            raise ValueError(f"donor lacks prefix tensor {name!r}")
        src = donor.entries[name]
        if src.shape != store.entries[name].shape:
            raise ValueError(
                f"prefix tensor {name!r} shape mismatch: donor {src.shape} "
                f"vs recipient {store.entries[name].shape}"
            )
        store.entries[name] = src.copy()
        if bn_stats == "reset":
            role = store.roles[name]
            if role == "moving_mean":
                store.entries[name] = src * 0.0
            elif role == "moving_var":
                store.entries[name] = src * 0.0 + 1.0
    return store


def freeze_mask_for(graph: ModelGraph, boundary) -> dict[str, bool]:
    """Trainability mask: False for every tensor at or before the boundary."""
    frozen = set(prefix_tensor_names(graph, boundary))
    return {name: name not in frozen for name, _, _ in tensor_specs(graph)}


def apply_freeze(variant: str, donor: WeightStore | None, donor_graph: ModelGraph | None,
                 graph: ModelGraph, boundary, seed: int = 0
                 ) -> tuple[WeightStore, dict[str, bool]]:
    """Build (weights, trainability mask) for one freeze variant.

    full_pretrained: donor weights everywhere, prefix frozen.
    prefix_pretrained_rest_random: donor prefix, random suffix, prefix frozen.
    random_baseline: random weights everywhere, prefix frozen anyway (the
    random-features control).
    """
    if variant not in FREEZE_VARIANTS:
        raise ValueError(f"unknown freeze variant {variant!r}; known: {FREEZE_VARIANTS}")
    mask = freeze_mask_for(graph, boundary)
    if variant == "random_baseline":
        return init_store(graph, "random", seed), mask
    if donor is None or donor_graph is None:
        raise ValueError(f"freeze variant {variant!r} requires a donor")
    if donor.fingerprint != graph_fingerprint(graph):
        raise ValueError("freeze variants with a donor need a donor matching the graph")
    if variant == "full_pretrained":
        return donor.copy(), mask
    # prefix_pretrained_rest_random: exactly a transfusion at the boundary
    store = transfuse(donor, donor_graph, graph, boundary, "random", seed)
    return store, mask
