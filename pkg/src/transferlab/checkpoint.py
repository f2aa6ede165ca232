"""Checkpoint files: a weight store plus enough metadata to rebuild it.

A checkpoint is a tensor container whose metadata carries the serialized
graph, the graph fingerprint, the global step, the optimizer kind and the
seed; loads verify the stored tensors against the graph's enumeration.
"""

from __future__ import annotations

from pathlib import Path

from .container import ContainerError, load_container, save_container
from .inits import WeightStore, allocate
from .models import ModelGraph, graph_from_json, graph_to_json


def save_checkpoint(path: str | Path, graph: ModelGraph, store: WeightStore,
                    step: int = 0, optimizer: str = "none", seed: int = 0,
                    extra: dict[str, str] | None = None) -> None:
    metadata = {
        "graph": graph_to_json(graph),
        "graph_fingerprint": store.fingerprint,
        "global_step": str(int(step)),
        "optimizer": optimizer,
        "seed": str(int(seed)),
    }
    for key, value in (extra or {}).items():
        metadata[key] = value
    save_container(path, store.entries, metadata)


def load_checkpoint(path: str | Path) -> tuple[ModelGraph, WeightStore, dict[str, str]]:
    tensors, metadata = load_container(path)
    try:
        graph = graph_from_json(metadata["graph"])
    except KeyError as exc:
        raise ContainerError(f"{path}: checkpoint metadata missing graph") from exc
    store = allocate(graph)
    missing = set(store.entries) - set(tensors)
    if missing:
        raise ContainerError(f"{path}: checkpoint missing tensors {sorted(missing)}")
    for name in store.entries:
        store[name] = tensors[name]
    if metadata.get("graph_fingerprint", store.fingerprint) != store.fingerprint:
        raise ContainerError(
            f"{path}: stored fingerprint {metadata.get('graph_fingerprint')} "
            f"disagrees with graph {store.fingerprint}"
        )
    return graph, store, metadata
