"""Adapter registry keyed by model-kind string.

Factories rather than instances are registered so that each experiment worker
builds its own adapter; a single adapter is not safe for concurrent calls.
"""

from __future__ import annotations

from typing import Any, Callable

from intentobf.detector.base import DetectorAdapter

AdapterFactory = Callable[..., DetectorAdapter]


class AdapterRegistry:
    def __init__(self) -> None:
        self._factories: dict[str, AdapterFactory] = {}

    def register(self, kind: str, factory: AdapterFactory) -> None:
        self._factories[kind.lower()] = factory

    def create(self, kind: str, **options: Any) -> DetectorAdapter:
        try:
            factory = self._factories[kind.lower()]
        except KeyError:
            raise KeyError(f"no adapter registered for model kind {kind!r}; known: {sorted(self._factories)}") from None
        return factory(**options)

    def __contains__(self, kind: str) -> bool:
        return kind.lower() in self._factories

    def kinds(self) -> list[str]:
        return sorted(self._factories)


def _load_toy(weights: str, dtype: str = "float64", **_ignored: Any) -> DetectorAdapter:
    import torch

    from intentobf.detector.toy import ToyDetector

    return ToyDetector.load(weights, dtype=getattr(torch, dtype))


def default_registry() -> AdapterRegistry:
    registry = AdapterRegistry()
    registry.register("toy", _load_toy)
    return registry
