from __future__ import annotations

import functools
import os
from collections.abc import Iterator

import numpy as np
import toolz
from dask.base import tokenize
from dask.utils import funcname

from emotion_geometry import geometry, rsa
from emotion_geometry.registry import RDM


class Expr:
    """Primary class for all analysis expressions

    An expression is a lazy, hashable description of one analysis value: a
    vector set, an RDM, a similarity.  Every expression produces a single
    output key ``(expr._name, 0)``.

    Subclasses declare their operands in ``_parameters``, with fallbacks in
    ``_defaults``; operands past the declared ones are kept positionally.
    """

    _parameters = []
    _defaults = {}

    def __init__(self, *args, **kwargs):
        missing = type(self)._parameters[len(args) :]
        unknown = set(kwargs) - set(missing)
        if unknown:
            raise TypeError(f"{type(self).__name__} got unexpected operands {sorted(unknown)}")
        self.operands = [*args] + [
            kwargs[p] if p in kwargs else type(self)._defaults[p] for p in missing
        ]

    def __str__(self):
        params = [
            f"{p}={op}"
            for p, op in zip(self._parameters, self.operands)
            if not isinstance(op, Expr) and op != self._defaults.get(p)
        ]
        inner = [str(dep) for dep in self.dependencies()] + params
        return f"{type(self).__name__}({', '.join(inner)})"

    __repr__ = __str__

    def __getattr__(self, key):
        parameters = type(self)._parameters
        if key in parameters:
            return self.operands[parameters.index(key)]
        raise AttributeError(f"{type(self).__name__!r} object has no attribute {key!r}")

    def __hash__(self):
        return hash(self._name)

    def __eq__(self, other):
        return isinstance(other, Expr) and self._name == other._name

    def __reduce__(self):
        return type(self), tuple(self.operands)

    @functools.cached_property
    def _name(self):
        return funcname(type(self)).lower() + "-" + tokenize(*self.operands)

    def dependencies(self) -> list:
        return [op for op in self.operands if isinstance(op, Expr)]

    def _walk(self) -> Iterator[Expr]:
        """Every distinct node below and including ``self``, depth first"""
        stack, seen = [self], set()
        while stack:
            node = stack.pop()
            if node._name not in seen:
                seen.add(node._name)
                stack.extend(node.dependencies())
                yield node

    #
    # Display
    #

    @staticmethod
    def _describe(operand):
        if isinstance(operand, np.ndarray):
            return "<array>"
        if isinstance(operand, RDM):
            return "<rdm>"
        if hasattr(operand, "vectors"):
            return "<vectors>"
        if isinstance(operand, tuple) and len(operand) > 4:
            return f"<{len(operand)} labels>"
        return repr(operand)

    def _tree_repr_lines(self, indent=0) -> list:
        header = funcname(type(self)) + ":"
        children = []
        for i, op in enumerate(self.operands):
            if isinstance(op, Expr):
                children.extend(op._tree_repr_lines(indent + 2))
                continue
            param = self._parameters[i] if i < len(self._parameters) else ""
            if param in self._defaults and op == self._defaults[param]:
                continue
            text = self._describe(op)
            header += f" {param}={text}" if param else f" {text}"
        return [" " * indent + header] + children

    def tree_repr(self) -> str:
        return os.linesep.join(self._tree_repr_lines())

    #
    # Graph
    #

    def _task(self):
        """The task computing this expression's value"""
        raise NotImplementedError(f"{type(self).__name__} defines neither _layer nor _task")

    def _layer(self) -> dict:
        return {(self._name, 0): self._task()}

    def __dask_graph__(self):
        return toolz.merge(node._layer() for node in self._walk())

    def __dask_keys__(self):
        return [(self._name, 0)]

    #
    # Rewrites
    #

    def _simplify_down(self):
        """A cheaper replacement for this node, or None"""

    def _simplify_up(self, parent):
        """A cheaper replacement for ``parent``, or None"""

    def _simplify_once(self):
        out = self._simplify_down()
        if out is not None and out._name != self._name:
            return out
        for child in self.dependencies():
            out = child._simplify_up(self)
            if out is not None and out._name != self._name:
                return out
        operands = [
            op.simplify() if isinstance(op, Expr) else op for op in self.operands
        ]
        if any(
            isinstance(new, Expr) and new._name != old._name
            for new, old in zip(operands, self.operands)
        ):
            return type(self)(*operands)
        return None

    def simplify(self) -> Expr:
        """Apply rewrite rules until none applies

        A node rewrites itself through ``_simplify_down``; a child rewrites
        its parent through ``_simplify_up``; then the children are
        simplified in turn.
        """
        expr = self
        while (out := expr._simplify_once()) is not None:
            expr = out
        return expr

    def substitute(self, substitutions: dict) -> Expr:
        """Replace sub-expressions

        >>> Similarity(LinearNormalize(a, 0.9), b).substitute(
        ...     {LinearNormalize(a, 0.9): a}
        ... )  # doctest: +SKIP
        Similarity(a, b)
        """
        if self in substitutions:
            return substitutions[self]
        operands = [
            op.substitute(substitutions) if isinstance(op, Expr) else op
            for op in self.operands
        ]
        if all(new is old for new, old in zip(operands, self.operands)):
            return self
        return type(self)(*operands)

    def find_operations(self, operation: type) -> Iterator[Expr]:
        """Nodes of type ``operation``, depth first"""
        if not issubclass(operation, Expr):
            raise TypeError(f"Expected an Expr subclass, got {operation!r}")
        return (node for node in self._walk() if isinstance(node, operation))

    #
    # Analysis API
    #

    def rdm(self):
        return ComputeRDM(self)

    def restrict(self, labels):
        return Restrict(self, tuple(labels))

    def normalize(self, anisotropy):
        return LinearNormalize(self, anisotropy)

    def similarity(self, other, method="spearman"):
        return Similarity(self, other, method)


class Literal(Expr):
    """An in-memory vector set or RDM"""

    _parameters = ["value"]

    def __str__(self):
        value = self.value
        model = getattr(value, "model", None)
        if model is not None:
            return f"{model.model_id}@{value.layer}"
        source = getattr(value, "source", None) or {}
        if "model_id" in source:
            return f"{source['model_id']}@{source.get('layer')}"
        return f"Literal({self._name[-7:]})"

    def _task(self):
        return self.value


class Blockwise(Expr):
    """Apply ``operation`` to the operands

    Expression operands are replaced by their output keys.
    """

    operation = None

    def _task(self):
        args = [(op._name, 0) if isinstance(op, Expr) else op for op in self.operands]
        return (self.operation, *args)


def _restrict(obj, labels):
    return obj.restrict(labels)


class ComputeRDM(Blockwise):
    _parameters = ["frame"]
    operation = staticmethod(geometry.compute_rdm)


class Restrict(Blockwise):
    """Keep an ordered subset of emotion labels of a vector set or RDM"""

    _parameters = ["frame", "labels"]
    operation = staticmethod(_restrict)

    def _simplify_down(self):
        frame = self.frame
        if isinstance(frame, Restrict) and set(self.labels) <= set(frame.labels):
            return Restrict(frame.frame, self.labels)
        if isinstance(frame, ComputeRDM):
            # cosine entries depend only on the two rows involved
            return ComputeRDM(Restrict(frame.frame, self.labels))


class LinearNormalize(Blockwise):
    _parameters = ["frame", "anisotropy"]
    operation = staticmethod(rsa.linear_normalize_rdm)

    def _simplify_up(self, parent):
        # positive affine maps leave rank and Pearson correlations unchanged
        if isinstance(parent, (Similarity, SimilarityMatrix)):
            return parent.substitute({self: self.frame})


class Similarity(Blockwise):
    _parameters = ["left", "right", "method"]
    _defaults = {"method": "spearman"}
    operation = staticmethod(rsa.rdm_similarity)


from emotion_geometry.reductions import SimilarityMatrix  # noqa: E402
