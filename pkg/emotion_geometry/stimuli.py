from __future__ import annotations

import functools
import hashlib
import json
import logging
import os
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import pandas as pd
from fsspec.utils import stringify_path

from emotion_geometry.errors import ValidationError

logger = logging.getLogger(__name__)

EMOTIONS = (
    "afraid",
    "angry",
    "anxious",
    "blissful",
    "brooding",
    "calm",
    "desperate",
    "enthusiastic",
    "exasperated",
    "gloomy",
    "grateful",
    "guilty",
    "happy",
    "hopeful",
    "hostile",
    "loving",
    "nervous",
    "neutral",
    "proud",
    "reflective",
    "sad",
)

NEUTRAL = "neutral"
N_NEUTRAL_SENTENCES = 20
N_STORY_TEMPLATES = 5
N_NEUTRAL_STORIES = 10

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

DEFAULT_STEERING_PROMPT = "Tell me about your day."


def is_ordered_subset(labels: Sequence[str]) -> bool:
    """Whether ``labels`` is an order-preserving subset of the vocabulary"""
    position = {label: i for i, label in enumerate(EMOTIONS)}
    try:
        idx = [position[label] for label in labels]
    except KeyError:
        return False
    return all(a < b for a, b in zip(idx, idx[1:]))


@dataclass(frozen=True)
class EmotionVocabulary:
    labels: tuple = EMOTIONS

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) != len(EMOTIONS):
            raise ValidationError(
                f"Vocabulary must hold {len(EMOTIONS)} labels, got {len(labels)}"
            )
        if list(labels) != sorted(labels):
            raise ValidationError("Vocabulary labels must be sorted alphabetically")
        if labels != EMOTIONS:
            unknown = sorted(set(labels) - set(EMOTIONS))
            raise ValidationError(f"Unknown emotion labels: {unknown}")

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)


def generation_subset(vocab: EmotionVocabulary | Iterable[str] = None) -> list[str]:
    """The generation-protocol labels: the vocabulary with neutral removed

    Order is preserved.  Passing the result back in (with or without
    ``"neutral"`` re-inserted) returns the same 20 labels.
    """
    if vocab is None:
        vocab = EmotionVocabulary()
    labels = list(vocab.labels if isinstance(vocab, EmotionVocabulary) else vocab)
    if not is_ordered_subset(labels):
        raise ValidationError(f"Labels are not an ordered vocabulary subset: {labels}")
    out = [label for label in labels if label != NEUTRAL]
    if len(out) != len(EMOTIONS) - 1:
        missing = sorted(set(EMOTIONS) - {NEUTRAL} - set(out))
        raise ValidationError(f"Generation subset is missing labels: {missing}")
    return out


@dataclass(frozen=True)
class CorpusBundle:
    passages: Mapping[str, tuple]
    neutral_sentences: tuple
    story_templates: tuple
    neutral_stories: tuple
    steering_prompt: str = DEFAULT_STEERING_PROMPT
    stand_in: bool = False
    sources: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        passages = {k: tuple(v) for k, v in self.passages.items()}
        object.__setattr__(self, "passages", passages)
        for name in ["neutral_sentences", "story_templates", "neutral_stories"]:
            object.__setattr__(self, name, tuple(getattr(self, name)))

        unknown = sorted(set(passages) - set(EMOTIONS))
        if unknown:
            raise ValidationError(f"Unknown emotion labels in passages: {unknown}")
        missing = [e for e in EMOTIONS if not passages.get(e)]
        if missing:
            raise ValidationError(
                f"Passages missing for emotions: {', '.join(missing)}"
            )
        counts = {
            "neutral_sentences": N_NEUTRAL_SENTENCES,
            "story_templates": N_STORY_TEMPLATES,
            "neutral_stories": N_NEUTRAL_STORIES,
        }
        for name, expected in counts.items():
            actual = len(getattr(self, name))
            if actual != expected:
                raise ValidationError(f"Expected {expected} {name}, got {actual}")
        for template in self.story_templates:
            if "{emotion}" not in template:
                raise ValidationError(
                    f"Story template lacks an {{emotion}} placeholder: {template!r}"
                )

    @property
    def n_passages(self) -> int:
        return sum(len(v) for v in self.passages.values())

    @functools.cached_property
    def digest(self) -> str:
        """Content hash over everything a tokenizer sees"""
        payload = json.dumps(
            {
                "passages": {k: list(self.passages[k]) for k in EMOTIONS},
                "neutral_sentences": list(self.neutral_sentences),
                "story_templates": list(self.story_templates),
                "neutral_stories": list(self.neutral_stories),
                "steering_prompt": self.steering_prompt,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def passage_items(self):
        """``(emotion, text)`` pairs in vocabulary order"""
        for emotion in EMOTIONS:
            for text in self.passages[emotion]:
                yield emotion, text


def read_passages(path) -> dict[str, list[str]]:
    df = pd.read_csv(stringify_path(path), dtype=str, keep_default_na=False)
    if not {"emotion", "text"} <= set(df.columns):
        raise ValidationError(
            f"Passage file needs columns (emotion, text), got {list(df.columns)}"
        )
    passages = {}
    for row, (emotion, text) in enumerate(zip(df["emotion"], df["text"]), start=1):
        emotion = emotion.strip()
        if emotion not in EMOTIONS:
            raise ValidationError(f"Unknown emotion label {emotion!r} at row {row}")
        if not text:
            raise ValidationError(f"Empty passage at row {row}")
        # verbatim: the tokenizer sees the raw text
        passages.setdefault(emotion, []).append(text)
    return passages


def read_lines(path) -> list[str]:
    with open(stringify_path(path), encoding="utf-8") as f:
        return [line.rstrip("\r\n") for line in f if line.strip()]


def load_corpus(passages_path, neutral_path, templates_path) -> CorpusBundle:
    """Load and validate a stimulus corpus

    Parameters
    ----------
    passages_path:
        UTF-8 CSV with ``emotion,text`` columns, any number of passages
        (at least one) per emotion.
    neutral_path:
        Plain text, one neutral declarative sentence per line (twenty).
    templates_path:
        JSON with ``story_templates`` (five, each containing ``{emotion}``),
        ``neutral_stories`` (ten) and optionally ``steering_prompt`` and
        ``stand_in``.
    """
    passages = read_passages(passages_path)
    neutral = read_lines(neutral_path)
    with open(stringify_path(templates_path), encoding="utf-8") as f:
        templates = json.load(f)

    bundle = CorpusBundle(
        passages=passages,
        neutral_sentences=neutral,
        story_templates=templates.get("story_templates", []),
        neutral_stories=templates.get("neutral_stories", []),
        steering_prompt=templates.get("steering_prompt", DEFAULT_STEERING_PROMPT),
        stand_in=bool(templates.get("stand_in", False)),
        sources={
            "passages": stringify_path(passages_path),
            "neutral": stringify_path(neutral_path),
            "templates": stringify_path(templates_path),
        },
    )
    logger.info(
        "Loaded corpus with %d passages (digest %s)", bundle.n_passages, bundle.digest[:12]
    )
    if bundle.stand_in:
        logger.warning("Using stand-in story templates; they are not the original wording")
    return bundle


def load_default_corpus() -> CorpusBundle:
    """The bundled, openly written stand-in corpus"""
    return load_corpus(
        os.path.join(DATA_DIR, "passages.csv"),
        os.path.join(DATA_DIR, "neutral.txt"),
        os.path.join(DATA_DIR, "templates.json"),
    )
