from __future__ import annotations

import functools

from dask.base import DaskMethodsMixin, named_schedulers
from tlz import first

from emotion_geometry import expr
from emotion_geometry.reductions import SimilarityMatrix

__all__ = [
    "Analysis",
    "new_collection",
    "from_vectors",
    "from_rdm",
    "read_vector_set",
    "read_rdm",
    "similarity_matrix",
]


def _unwrap(obj):
    return obj.expr if isinstance(obj, Analysis) else obj


def _forward(method, *args, **kwargs):
    result = method(*map(_unwrap, args), **kwargs)
    return new_collection(result) if isinstance(result, expr.Expr) else result


class Analysis(DaskMethodsMixin):
    """A lazy analysis value backed by an expression

    Examples
    --------
    >>> a = read_rdm("runs/Qwen_Qwen2.5-1.5B/layers/15")  # doctest: +SKIP
    >>> b = read_rdm("runs/meta-llama_Llama-3.2-3B/layers/11")  # doctest: +SKIP
    >>> a.similarity(b).compute()  # doctest: +SKIP
    0.81...
    """

    __dask_scheduler__ = staticmethod(
        named_schedulers.get("threads", named_schedulers["sync"])
    )
    __dask_optimize__ = staticmethod(lambda dsk, keys, **kwargs: dsk)

    def __init__(self, expr):
        self._expr = expr

    @property
    def expr(self) -> expr.Expr:
        return self._expr

    def __reduce__(self):
        return new_collection, (self._expr,)

    def __repr__(self):
        return f"<emotion_geometry.Analysis: expr={self.expr}>"

    # the graph is always built from the simplified expression
    def __dask_graph__(self):
        return self.expr.simplify().__dask_graph__()

    def __dask_keys__(self):
        return self.expr.simplify().__dask_keys__()

    def __dask_postcompute__(self):
        return first, ()

    def __dask_tokenize__(self):
        return self.expr._name

    @property
    def dask(self):
        return self.__dask_graph__()

    def __getattr__(self, key):
        # anything else comes from the expression, re-wrapped
        if key.startswith("__") or key == "_expr":
            raise AttributeError(key)
        value = getattr(self._expr, key)
        if callable(value):
            return functools.partial(_forward, value)
        return value

    def simplify(self) -> Analysis:
        return new_collection(self.expr.simplify())

    def rdm(self) -> Analysis:
        """Cosine RDM of a vector set"""
        return new_collection(self.expr.rdm())

    def restrict(self, labels) -> Analysis:
        """Keep an ordered subset of emotion labels"""
        return new_collection(self.expr.restrict(labels))

    def normalize(self, anisotropy) -> Analysis:
        return new_collection(self.expr.normalize(anisotropy))

    def similarity(self, other, method="spearman") -> Analysis:
        """Rank (or linear) correlation with another RDM"""
        return new_collection(self.expr.similarity(_unwrap(other), method))


def new_collection(expr):
    """Create new collection from an expr"""
    return Analysis(expr)


def from_vectors(vectors) -> Analysis:
    """Wrap an in-memory vector set"""
    return new_collection(expr.Literal(vectors))


def from_rdm(rdm) -> Analysis:
    """Wrap an in-memory RDM"""
    return new_collection(expr.Literal(rdm))


def read_vector_set(path, labels=None) -> Analysis:
    from emotion_geometry.io.io import ReadVectorSet

    return new_collection(ReadVectorSet(path, labels))


def read_rdm(path, labels=None) -> Analysis:
    from emotion_geometry.io.io import ReadRDM

    return new_collection(ReadRDM(path, labels))


def similarity_matrix(items, method="spearman") -> Analysis:
    """All pairwise similarities between analysis values as a k x k matrix"""
    return new_collection(SimilarityMatrix(method, *map(_unwrap, items)))
