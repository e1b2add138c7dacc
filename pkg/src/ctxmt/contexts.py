"""Per-sample context bundles.

A :class:`ContextSet` carries everything the context encoder sees for one
sample: an ordered run of document sentences (each tagged with its
distance to the current source sentence, 0 = the source itself) and an
unordered bag of metadata strings. Items can be raw strings, to be
vectorized downstream, or pre-vectorized arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_MAX_DISTANCE = 5


class DistanceOutOfRangeError(ValueError):
    pass


@dataclass(frozen=True)
class ContextSet:
    """Document contexts with distances plus unordered metadata contexts."""

    doc: tuple = ()
    meta: tuple = ()
    t: int = DEFAULT_MAX_DISTANCE

    def __post_init__(self):
        object.__setattr__(self, "doc", tuple(self.doc))
        object.__setattr__(self, "meta", tuple(self.meta))
        last = -1
        for item, dist in self.doc:
            if not isinstance(dist, int) or dist < 0 or dist > self.t:
                raise DistanceOutOfRangeError(f"distance {dist} outside [0, {self.t}]")
            if dist <= last:
                raise DistanceOutOfRangeError("doc distances must be strictly increasing")
            last = dist

    def __len__(self) -> int:
        return len(self.doc) + len(self.meta)

    @property
    def is_empty(self) -> bool:
        return len(self) == 0

    def items(self):
        """All context items in canonical order: doc by ascending distance, then meta."""
        for item, dist in self.doc:
            yield item, dist
        for item in self.meta:
            yield item, None

    def texts(self) -> list[str]:
        out = []
        for item, _ in self.items():
            if not isinstance(item, str):
                raise TypeError("context set holds vectors, not texts")
            out.append(item)
        return out

    def with_source(self, source: "str | np.ndarray") -> "ContextSet":
        """Prepend the current source sentence at distance 0."""
        if self.doc and self.doc[0][1] == 0:
            raise DistanceOutOfRangeError("distance 0 already occupied")
        return ContextSet(doc=((source, 0),) + self.doc, meta=self.meta, t=self.t)


EMPTY = ContextSet()
