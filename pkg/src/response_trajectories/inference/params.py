"""Flat parameter vectors with named blocks and constraining transforms."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from ..utils.exceptions import DomainError, StructuralError
from . import autodiff as ad


class Transform(str, Enum):
    """How a block maps between the unconstrained and constrained spaces."""

    IDENTITY = "identity"
    LOG = "log"

    @classmethod
    def parse(cls, value: str) -> Transform:
        if value == "none":
            return cls.IDENTITY
        return cls(value)


@dataclass(frozen=True)
class Block:
    """A named, contiguous slice of the flat parameter vector.

    :ivar name: The parameter name, e.g. ``beta_h[p01]``.
    :ivar offset: Index of the first coordinate.
    :ivar size: Number of coordinates.
    :ivar transform: The constraining transform of every coordinate in the block.
    :ivar labels: One label per coordinate, used to build column names.
    """

    name: str
    offset: int
    size: int
    transform: Transform = Transform.IDENTITY
    labels: tuple[str, ...] = ()

    @property
    def stop(self) -> int:
        return self.offset + self.size

    @property
    def index(self) -> slice:
        return slice(self.offset, self.stop)

    def column_names(self) -> list[str]:
        if self.size == 1 and not self.labels:
            return [self.name]
        labels = self.labels or tuple(str(i) for i in range(self.size))
        if "[" in self.name:
            head = self.name[:-1]
            return [f"{head},{label}]" for label in labels]
        return [f"{self.name}[{label}]" for label in labels]


@dataclass
class ParamLayout:
    """The ordered blocks partitioning a flat parameter vector."""

    blocks: list[Block] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_name = {block.name: block for block in self.blocks}

    def add(
        self,
        name: str,
        size: int,
        transform: Transform = Transform.IDENTITY,
        labels: tuple[str, ...] = (),
    ) -> Block | None:
        """
        Appends a block at the end of the layout.

        Empty blocks are skipped, so that patients without meals carry no latent coordinates.

        :param name: The unique block name.
        :param size: The number of coordinates.
        :param transform: The constraining transform.
        :param labels: Optional labels for the coordinates.
        :return: The new block, or None if ``size`` is zero.
        """
        if name in self._by_name:
            raise StructuralError(f"duplicate block <{name}>")
        if size == 0:
            return None
        if labels and len(labels) != size:
            raise StructuralError(f"block <{name}> has {size} coordinates but {len(labels)} labels")
        block = Block(name, self.dim, size, transform, tuple(labels))
        self.blocks.append(block)
        self._by_name[name] = block
        return block

    @property
    def dim(self) -> int:
        return self.blocks[-1].stop if self.blocks else 0

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> Block:
        try:
            return self._by_name[name]
        except KeyError:
            raise StructuralError(f"no block named <{name}>") from None

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    def names(self) -> list[str]:
        """Column names of every coordinate, in vector order."""
        return [name for block in self.blocks for name in block.column_names()]

    def log_mask(self) -> np.ndarray:
        mask = np.zeros(self.dim, dtype=bool)
        for block in self.blocks:
            if block.transform is Transform.LOG:
                mask[block.index] = True
        return mask

    def check(self, values: np.ndarray) -> None:
        if np.shape(values) != (self.dim,):
            raise StructuralError(
                f"expected a parameter vector of length {self.dim}, got shape {np.shape(values)}"
            )

    def to_dict(self) -> list[dict]:
        return [
            {
                "name": block.name,
                "offset": block.offset,
                "size": block.size,
                "transform": block.transform.value,
                "labels": list(block.labels),
            }
            for block in self.blocks
        ]

    @classmethod
    def from_dict(cls, items: list[dict]) -> ParamLayout:
        layout = cls()
        for item in items:
            block = layout.add(
                item["name"],
                int(item["size"]),
                Transform.parse(item.get("transform", "identity")),
                tuple(item.get("labels", ())),
            )
            if block is not None and block.offset != int(item["offset"]):
                raise StructuralError(f"block <{item['name']}> does not start at its offset")
        return layout


@dataclass
class ParamVector:
    """A flat unconstrained vector together with its layout."""

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        self.layout.check(self.values)

    def block(self, name: str) -> np.ndarray:
        return self.values[self.layout[name].index]

    def constrained(self) -> np.ndarray:
        return untransform(self.values, self.layout)


def untransform(values, layout: ParamLayout):
    """
    Maps an unconstrained vector to the constrained space.

    Works on plain arrays and recorded graph variables alike.

    :param values: The unconstrained vector.
    :param layout: Its layout.
    :return: The constrained vector.
    """
    mask = layout.log_mask()
    if not mask.any():
        return values
    if ad.is_recorded(values):
        weight = mask.astype(float)
        return values * (1.0 - weight) + ad.exp(values * weight) * weight
    out = np.array(values, dtype=float)
    out[..., mask] = np.exp(out[..., mask])
    return out


def transform(values: np.ndarray, layout: ParamLayout) -> np.ndarray:
    """
    Maps a constrained vector to the unconstrained space.

    :param values: The constrained vector.
    :param layout: Its layout.
    :return: The unconstrained vector.
    :raises DomainError: If a log-transformed coordinate is not strictly positive.
    """
    layout.check(values)
    out = np.array(values, dtype=float)
    for block in layout:
        if block.transform is not Transform.LOG:
            continue
        part = out[block.index]
        if not np.all(part > 0):
            raise DomainError(block.name, part.tolist(), "> 0")
        out[block.index] = np.log(part)
    return out


def log_jacobian(values, layout: ParamLayout):
    """
    The log absolute Jacobian determinant of :func:`untransform` at ``values``.

    For ``x = exp(u)`` each coordinate contributes ``u``.
    """
    mask = layout.log_mask()
    if not mask.any():
        return 0.0
    return ad.sum(values * mask.astype(float))
