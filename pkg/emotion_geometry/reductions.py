from __future__ import annotations

import itertools

import numpy as np
import toolz
from dask.utils import apply

from emotion_geometry import rsa
from emotion_geometry.expr import Expr


class PairwiseReduction(Expr):
    """Reduce every unordered pair of input expressions to one value

    This is the all-pairs analogue of apply-concat-apply.  It requires two
    methods:

    -   `chunk`: applied to each unordered pair of inputs
    -   `aggregate`: applied to the list of pair results, in
        ``itertools.combinations`` order, to finalize the computation

    Both can take keyword arguments from `chunk_kwargs` and
    `aggregate_kwargs`.  Inputs follow the declared parameters as extra
    operands.
    """

    _parameters = []
    chunk = None
    aggregate = None
    chunk_kwargs = {}
    aggregate_kwargs = {}

    @property
    def frames(self) -> list:
        return self.operands[len(self._parameters) :]

    def __dask_postcompute__(self):
        return toolz.first, ()

    def _layer(self):
        d = {}
        keys = []
        frames = self.frames
        for k, (i, j) in enumerate(itertools.combinations(range(len(frames)), 2)):
            args = [(frames[i]._name, 0), (frames[j]._name, 0)]
            if self.chunk_kwargs:
                d[self._name, 1, k] = (apply, self.chunk, args, self.chunk_kwargs)
            else:
                d[self._name, 1, k] = (self.chunk,) + tuple(args)
            keys.append((self._name, 1, k))

        d[self._name, 0] = (apply, self.aggregate, [keys], self.aggregate_kwargs)
        return d


def _assemble_symmetric(values, n):
    out = np.eye(n)
    i, j = np.triu_indices(n, k=1)
    out[i, j] = values
    out[j, i] = values
    return out


class SimilarityMatrix(PairwiseReduction):
    """Matrix of RDM similarities between every pair of inputs"""

    _parameters = ["method"]
    _defaults = {"method": "spearman"}
    chunk = staticmethod(rsa.rdm_similarity)
    aggregate = staticmethod(_assemble_symmetric)

    @property
    def chunk_kwargs(self):
        return {"method": self.method}

    @property
    def aggregate_kwargs(self):
        return {"n": len(self.frames)}
