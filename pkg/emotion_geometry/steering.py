from __future__ import annotations

import logging
import os
import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from fsspec.utils import stringify_path
from tqdm.auto import tqdm

from emotion_geometry import config
from emotion_geometry.errors import CapabilityError, ValidationError
from emotion_geometry.registry import (
    ModelRecord,
    check_layer,
    manifest_id_for,
    read_json,
    read_run_meta,
    run_dir_for,
    write_json,
)

logger = logging.getLogger(__name__)

STEERING_DIR = "steering"
N_LEVELS = 5

_WORD = re.compile(r"\w+")


@dataclass
class SteeringTrace:
    """Completions of one prompt along one emotion direction at rising strengths"""

    model_id: str
    layer: int
    emotion: str
    strengths: list
    completions: list
    repetition_scores: list
    empty_flags: list
    baseline: str | None = None
    prompt: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.strengths = [float(s) for s in self.strengths]
        n = len(self.strengths)
        for name in ["completions", "repetition_scores", "empty_flags"]:
            if len(getattr(self, name)) != n:
                raise ValidationError(
                    f"Trace has {n} strengths but {len(getattr(self, name))} {name}"
                )
        if any(b <= a for a, b in zip(self.strengths, self.strengths[1:])):
            raise ValidationError(f"Strengths must ascend strictly: {self.strengths}")

    @property
    def regime(self) -> str:
        return classify_regime(self)

    def to_dict(self) -> dict:
        return {**asdict(self), "regime": self.regime}

    @classmethod
    def from_dict(cls, d: dict) -> SteeringTrace:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def tokens(text: str) -> list:
    return _WORD.findall(text.lower())


def _repeat_coverage(toks: list, width: int) -> Counter:
    covered = Counter()
    i = 0
    while i + width <= len(toks):
        unit = tuple(toks[i : i + width])
        k = 1
        while tuple(toks[i + k * width : i + (k + 1) * width]) == unit:
            k += 1
        if k >= 2:
            covered[unit] += k * width
            i += k * width
        else:
            i += 1
    return covered


def repetition_score(text: str) -> float:
    """Largest share of the words taken up by back-to-back repeats of one word or bigram

    Empty text scores 1.0.

    >>> repetition_score("assault assault assault assault")
    1.0
    >>> repetition_score("the quick brown fox jumps")
    0.0
    >>> repetition_score("")
    1.0
    """
    toks = tokens(text)
    if not toks:
        return 1.0
    best = 0
    for width in [1, 2]:
        covered = _repeat_coverage(toks, width)
        if covered:
            best = max(best, max(covered.values()))
    return best / len(toks)


def is_empty(text: str) -> bool:
    return not tokens(text)


def classify_regime(trace=None, *, empty_flags=None, repetition_scores=None) -> str:
    """Steering regime from the scores at the five strengths

    Only the persisted flags and scores are read, never the texts.

    -   ``explosive``: either of the two lowest strengths is empty or
        scores above ``steering.explosive``
    -   ``surgical``: both lowest strengths are non-empty and score below
        ``steering.coherent``
    -   ``repetitive_collapse``: anything else
    """
    if trace is not None:
        empty_flags = trace.empty_flags
        repetition_scores = trace.repetition_scores
    if empty_flags is None or repetition_scores is None:
        raise ValueError("Need a trace or both empty_flags and repetition_scores")
    if len(empty_flags) != N_LEVELS or len(repetition_scores) != N_LEVELS:
        raise ValueError(
            f"Incomplete trace: expected {N_LEVELS} strengths, got "
            f"{len(empty_flags)} flags and {len(repetition_scores)} scores"
        )
    explosive = config.get("steering.explosive")
    coherent = config.get("steering.coherent")
    low = list(zip(empty_flags[:2], repetition_scores[:2]))
    if any(empty or score > explosive for empty, score in low):
        return "explosive"
    if all(not empty and score < coherent for empty, score in low):
        return "surgical"
    return "repetitive_collapse"


def apply_steering(
    handle,
    vector,
    layer: int,
    strength: float,
    prompt: str,
    max_new_tokens: int | None = None,
    apply_chat_template: bool = False,
) -> str:
    """Greedy completion with ``strength * vector`` added to the residual at ``layer``

    Strength 0 adds a zero vector through the same hook.
    """
    if handle.backend_kind != "named_hook":
        raise CapabilityError(
            f"Steering needs residual hooks; {handle.backend_kind} has none",
            handle.backend_kind,
        )
    check_layer(handle.record, layer)
    vector = np.asarray(vector, dtype=np.float64).reshape(-1)
    if not abs(np.linalg.norm(vector) - 1) < 1e-3:
        raise ValueError(f"Steering vector must be unit norm, got {np.linalg.norm(vector):.4f}")
    max_new_tokens = max_new_tokens or config.get("steering.max-new-tokens")
    ids = handle.encode(prompt, apply_chat_template)
    out = handle.generate_with_addition(ids, layer, strength * vector, max_new_tokens)
    return handle.decode(out)


def strength_ladder(handle, layer: int, corpus, multipliers=None) -> list:
    """Multipliers times the mean residual norm over the neutral sentences"""
    multipliers = list(multipliers or config.get("steering.multipliers"))
    if len(multipliers) != N_LEVELS:
        raise ValidationError(f"Need {N_LEVELS} strength multipliers, got {multipliers}")
    scale = handle.mean_residual_norm(corpus.neutral_sentences, layer)
    return [m * scale for m in multipliers]


def run_steering(
    handle,
    vectors,
    corpus,
    emotion: str | None = None,
    run_root=None,
    multipliers=None,
) -> SteeringTrace:
    """Steer along one emotion direction at five strengths and score the outputs

    Parameters
    ----------
    handle: ModelHandle
        A ``named_hook`` handle.
    vectors: EmotionVectorSet
        Vectors at the layer to steer, usually the best layer.
    corpus: CorpusBundle
        Supplies the steering prompt and the neutral sentences that scale
        the strength ladder.
    emotion:
        Defaults to ``steering.emotion``.
    run_root:
        If given, the trace is written to
        ``<run_root>/<slug>/steering/<emotion>.json``.
    """
    emotion = emotion or config.get("steering.emotion")
    if emotion not in vectors.emotion_order:
        raise ValidationError(f"No vector for {emotion!r}")
    if handle.backend_kind != "named_hook":
        raise CapabilityError(
            f"Steering is not available on {handle.backend_kind}", handle.backend_kind
        )
    layer = vectors.layer
    direction = vectors.as_float64()[vectors.emotion_order.index(emotion)]
    norm = np.linalg.norm(direction)
    if not norm > 0:
        raise ValueError(f"Zero vector for {emotion!r}")
    direction = direction / norm

    prompt = corpus.steering_prompt
    strengths = strength_ladder(handle, layer, corpus, multipliers)
    baseline = apply_steering(handle, direction, layer, 0, prompt)
    completions = [
        apply_steering(handle, direction, layer, s, prompt)
        for s in tqdm(strengths, desc="steering", disable=None, leave=False)
    ]
    trace = SteeringTrace(
        model_id=handle.record.model_id,
        layer=layer,
        emotion=emotion,
        strengths=strengths,
        completions=completions,
        repetition_scores=[repetition_score(c) for c in completions],
        empty_flags=[is_empty(c) for c in completions],
        baseline=baseline,
        prompt=prompt,
        extra={"multipliers": list(multipliers or config.get("steering.multipliers"))},
    )
    logger.info("%s: %s steering at layer %d is %s", trace.model_id, emotion, layer, trace.regime)
    if run_root is not None:
        persist_trace(trace, run_dir_for(run_root, trace.model_id), handle.record)
    return trace


def trace_path(run_dir, emotion: str) -> str:
    return os.path.join(stringify_path(run_dir), STEERING_DIR, f"{emotion}.json")


def persist_trace(
    trace: SteeringTrace, run_dir, record: ModelRecord | None = None, manifest=None
) -> str:
    """Write a trace under the run directory, tagged with the run's manifest

    Without ``record`` or ``manifest`` the run directory must already hold
    its ``meta.json``.
    """
    if record is not None:
        manifest_id = manifest_id_for(run_dir, record, manifest)
    elif manifest is not None:
        manifest_id = manifest.manifest_id
    else:
        manifest_id = read_run_meta(run_dir)[1].manifest_id
    return write_json(
        {**trace.to_dict(), "manifest_id": manifest_id}, trace_path(run_dir, trace.emotion)
    )


def load_trace(run_dir, emotion: str | None = None) -> SteeringTrace:
    emotion = emotion or config.get("steering.emotion")
    return SteeringTrace.from_dict(read_json(trace_path(run_dir, emotion)))
