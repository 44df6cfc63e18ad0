from __future__ import annotations

import os

from fsspec.utils import stringify_path

from emotion_geometry.expr import Blockwise, Expr, Restrict
from emotion_geometry.registry import load_rdm, load_vector_set

__all__ = ["IO", "BlockwiseIO", "ReadVectorSet", "ReadRDM"]


class IO(Expr):
    def __str__(self):
        return f"{type(self).__name__}({'/'.join(self.path.split(os.sep)[-3:])})"


class BlockwiseIO(Blockwise, IO):
    """Read one persisted artifact, optionally keeping a subset of labels"""

    _parameters = ["path", "labels"]
    _defaults = {"labels": None}
    reader = None

    def __init__(self, path, *args, **kwargs):
        super().__init__(stringify_path(path), *args, **kwargs)

    @staticmethod
    def _read(reader, path, labels):
        out = reader(path)
        if labels is not None:
            out = out.restrict(labels)
        return out

    def _task(self):
        return (self._read, self.reader, self.path, self.labels)

    def _simplify_up(self, parent):
        # read only the requested labels
        if isinstance(parent, Restrict) and (
            self.labels is None or set(parent.labels) <= set(self.labels)
        ):
            return type(self)(self.path, parent.labels)


class ReadVectorSet(BlockwiseIO):
    reader = staticmethod(load_vector_set)


class ReadRDM(BlockwiseIO):
    reader = staticmethod(load_rdm)
