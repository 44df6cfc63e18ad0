"""Generation-mode extraction

Emotion vectors are read from the model's own generated stories rather
than from passages it is shown.  Eight sub-parameters control the run;
`MATCHED` pins them to the reference generation pipeline and
`ALTERNATIVE` flips every one of them.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from fsspec.utils import stringify_path
from tqdm.auto import tqdm

from emotion_geometry import config
from emotion_geometry.capture import CaptureRequest, capture
from emotion_geometry.collection import from_vectors
from emotion_geometry.errors import ConsistencyError, ExtractionError, ValidationError
from emotion_geometry.registry import (
    RDM_FILE,
    GenerationVectorSet,
    ModelRecord,
    RunManifest,
    check_layer,
    condition_dir,
    persist_rdm,
    read_json,
    run_dir_for,
    write_json,
    write_vectors,
)
from emotion_geometry.stimuli import generation_subset

logger = logging.getLogger(__name__)

SAMPLES_FILE = "samples.json"
ACTIVATIONS_FILE = "activations.f32"

POSITIONS = ("mid_generation", "last_token")
LAYER_CHOICES = ("middle", "best")
CENTERINGS = ("neutral_baseline", "global_mean")
GENERATION_PRECISIONS = ("fp16", "int8")

# the eight sub-parameters that distinguish the presets
SUB_PARAMETERS = (
    "templates_per_emotion",
    "generations_per_template",
    "deterministic_decoding",
    "max_new_tokens",
    "extraction_position",
    "extraction_layer",
    "apply_chat_template",
    "centering",
)


@dataclass(frozen=True)
class GenerationProtocol:
    templates_per_emotion: int = 5
    generations_per_template: int = 10
    deterministic_decoding: bool = True
    max_new_tokens: int = 256
    extraction_position: str = "mid_generation"
    extraction_layer: str = "middle"
    apply_chat_template: bool = True
    centering: str = "neutral_baseline"
    precision: str = "fp16"

    def __post_init__(self):
        for name, allowed in [
            ("extraction_position", POSITIONS),
            ("extraction_layer", LAYER_CHOICES),
            ("centering", CENTERINGS),
            ("precision", GENERATION_PRECISIONS),
        ]:
            if getattr(self, name) not in allowed:
                raise ValidationError(
                    f"{name} must be one of {allowed}, got {getattr(self, name)!r}"
                )
        for name in ["templates_per_emotion", "generations_per_template", "max_new_tokens"]:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def samples_per_emotion(self) -> int:
        return self.templates_per_emotion * self.generations_per_template

    def replace(self, **overrides) -> GenerationProtocol:
        unknown = set(overrides) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ValidationError(f"Unknown protocol fields: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def resolve_layer(self, n_layers: int, best_layer: int | None = None) -> int:
        """Block index to read

        >>> MATCHED.resolve_layer(32)
        16
        """
        if self.extraction_layer == "middle":
            return n_layers // 2
        if best_layer is None:
            raise ValueError("Protocol reads the best layer; none was given")
        return best_layer

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GenerationProtocol:
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d})


MATCHED = GenerationProtocol()
ALTERNATIVE = GenerationProtocol(
    templates_per_emotion=1,
    generations_per_template=1,
    deterministic_decoding=False,
    max_new_tokens=100,
    extraction_position="last_token",
    extraction_layer="best",
    apply_chat_template=False,
    centering="global_mean",
)
PRESETS = {"matched": MATCHED, "alternative": ALTERNATIVE}

# generation conditions of the decomposition; A is comprehension
CONDITIONS = {
    "B": ("alternative", "fp16"),
    "C": ("matched", "fp16"),
    "D": ("matched", "int8"),
}


def preset(name: str, **overrides) -> GenerationProtocol:
    try:
        protocol = PRESETS[name]
    except KeyError:
        raise ValueError(f"{name} not supported; expected one of {sorted(PRESETS)}")
    return protocol.replace(**overrides) if overrides else protocol


def condition_protocol(condition: str, **overrides) -> GenerationProtocol:
    """Protocol for generation condition ``B``, ``C`` or ``D``"""
    try:
        name, precision = CONDITIONS[condition]
    except KeyError:
        raise ValueError(
            f"Condition {condition!r} not supported; expected one of {sorted(CONDITIONS)}"
        )
    return preset(name, precision=precision, **overrides)


class Sample(NamedTuple):
    text: str
    activation: np.ndarray


@dataclass
class GenerationRun:
    protocol: GenerationProtocol
    model: ModelRecord
    layer: int
    per_emotion_samples: dict
    neutral_samples: list = field(default_factory=list)
    degenerate: dict = field(default_factory=dict)

    @property
    def emotion_order(self) -> tuple:
        return tuple(self.per_emotion_samples)

    @property
    def n_degenerate(self) -> int:
        return sum(self.degenerate.values())

    def counts(self) -> dict:
        out = {k: len(v) for k, v in self.per_emotion_samples.items()}
        out["neutral"] = len(self.neutral_samples)
        return out


def _prompts(protocol: GenerationProtocol, corpus, emotion: str) -> list:
    templates = corpus.story_templates[: protocol.templates_per_emotion]
    if len(templates) < protocol.templates_per_emotion:
        raise ValidationError(
            f"Protocol needs {protocol.templates_per_emotion} templates, "
            f"corpus has {len(corpus.story_templates)}"
        )
    return [t.format(emotion=emotion) for t in templates]


class _Sampler:
    """Generate, capture and post-filter one prompt's continuations"""

    def __init__(self, handle, protocol: GenerationProtocol, layer: int):
        self.handle = handle
        self.protocol = protocol
        self.layer = layer
        self.seed = config.get("generation.seed")
        self.temperature = config.get("generation.temperature")
        self.top_p = config.get("generation.top-p")
        self.index = 0

    def _one(self, prompt_ids):
        p = self.protocol
        new = self.handle.generate(
            prompt_ids,
            p.max_new_tokens,
            do_sample=not p.deterministic_decoding,
            temperature=self.temperature,
            top_p=self.top_p,
            seed=None if p.deterministic_decoding else self.seed + self.index,
        )
        self.index += 1
        if not len(new):
            return None
        ids = np.concatenate([prompt_ids, new])
        text = self.handle.decode(new)
        if p.extraction_position == "mid_generation":
            request = CaptureRequest(
                text,
                {self.layer},
                "mid_generation",
                prompt_len=len(prompt_ids),
                token_ids=tuple(ids),
            )
        else:
            request = CaptureRequest(text, {self.layer}, token_ids=tuple(ids))
        acts = capture(self.handle, request)[self.layer]
        return Sample(text, acts.rows[0])

    def samples(self, prompt: str, n: int) -> tuple[list, int]:
        """``n`` continuations of ``prompt`` and the number found degenerate"""
        prompt_ids = self.handle.encode(prompt, self.protocol.apply_chat_template)
        if self.protocol.deterministic_decoding:
            # greedy repeats are identical; decode once
            sample = self._one(prompt_ids)
            self.index += n - 1
            return ([sample] * n, 0) if sample is not None else ([], n)
        out = [self._one(prompt_ids) for _ in range(n)]
        kept = [s for s in out if s is not None]
        return kept, n - len(kept)


def run_generation(handle, protocol: GenerationProtocol, corpus, best_layer=None):
    """Generate emotional stories and read activations from them

    Parameters
    ----------
    handle: ModelHandle
        Loaded at the protocol's precision.
    protocol:
        The sub-parameter bundle.
    corpus: CorpusBundle
        Supplies the story templates and the neutral baseline prompts.
    best_layer:
        Required when the protocol reads the best layer.

    Returns
    -------
    run: GenerationRun
        Empty generations are excluded and counted in ``run.degenerate``.
    """
    record = handle.record
    if record.precision != protocol.precision:
        raise ConsistencyError(
            f"Protocol runs at {protocol.precision}, model is loaded at {record.precision}"
        )
    layer = check_layer(record, protocol.resolve_layer(record.n_layers, best_layer))
    sampler = _Sampler(handle, protocol, layer)
    labels = generation_subset()

    per_emotion = {}
    degenerate = {}
    for emotion in tqdm(labels, desc="generation", disable=None, leave=False):
        samples = []
        n_bad = 0
        for prompt in _prompts(protocol, corpus, emotion):
            kept, bad = sampler.samples(prompt, protocol.generations_per_template)
            samples.extend(kept)
            n_bad += bad
        per_emotion[emotion] = samples
        if n_bad:
            degenerate[emotion] = n_bad

    neutral = []
    if protocol.centering == "neutral_baseline":
        for prompt in corpus.neutral_stories:
            kept, bad = sampler.samples(prompt, 1)
            neutral.extend(kept)
            if bad:
                degenerate["neutral"] = degenerate.get("neutral", 0) + bad

    run = GenerationRun(protocol, record, layer, per_emotion, neutral, degenerate)
    if run.n_degenerate:
        logger.warning(
            "%s: %d empty generations excluded %s",
            record.model_id,
            run.n_degenerate,
            degenerate,
        )
    logger.info("%s: generation run at layer %d, counts %s", record.model_id, layer, run.counts())
    return run


def _finite_mean(samples, label: str) -> np.ndarray:
    rows = np.array([s.activation for s in samples], dtype=np.float64)
    if len(rows):
        rows = rows[np.isfinite(rows).all(axis=1)]
    if not len(rows):
        raise ExtractionError(f"No usable generation samples for {label!r}")
    return rows.mean(axis=0)


def build_generation_vectors(run: GenerationRun) -> GenerationVectorSet:
    """Unit vectors from a generation run

    Each emotion's mean activation minus the centering baseline (the
    neutral-story mean, or the mean of the emotion means), scaled to unit
    norm.
    """
    labels = list(run.per_emotion_samples)
    means = np.stack([_finite_mean(run.per_emotion_samples[e], e) for e in labels])
    if run.protocol.centering == "neutral_baseline":
        baseline = _finite_mean(run.neutral_samples, "neutral")
    else:
        baseline = means.mean(axis=0)

    diffs = means - baseline
    norms = np.linalg.norm(diffs, axis=1)
    for emotion, norm in zip(labels, norms):
        if not norm > 0:
            raise ExtractionError(
                f"{emotion!r} does not differ from the baseline; cannot normalize"
            )
    return GenerationVectorSet(
        run.model, run.layer, diffs / norms[:, None], labels, run.protocol.to_dict()
    )


def persist_generation(
    run: GenerationRun, vectors: GenerationVectorSet, out_dir, manifest: RunManifest
) -> str:
    """Write vectors, RDM, sample texts and per-sample activations"""
    out_dir = stringify_path(out_dir)
    write_vectors(vectors, out_dir, manifest.manifest_id)
    rdm = from_vectors(vectors).rdm().compute()
    persist_rdm(rdm, os.path.join(out_dir, RDM_FILE), manifest.manifest_id)

    entries = []
    rows = []
    for label, samples in [*run.per_emotion_samples.items(), ("neutral", run.neutral_samples)]:
        for sample in samples:
            entries.append({"label": label, "text": sample.text, "row": len(rows)})
            rows.append(sample.activation)
    if rows:
        arr = np.ascontiguousarray(np.stack(rows), dtype="<f4")
        with open(os.path.join(out_dir, ACTIVATIONS_FILE), "wb") as f:
            f.write(arr.tobytes(order="C"))
    write_json(
        {
            "manifest_id": manifest.manifest_id,
            "manifest": manifest.to_dict(),
            "protocol": run.protocol.to_dict(),
            "layer": run.layer,
            "d_model": run.model.d_model,
            "counts": run.counts(),
            "degenerate": run.degenerate,
            "samples": entries,
        },
        os.path.join(out_dir, SAMPLES_FILE),
    )
    return out_dir


def load_samples(out_dir) -> dict:
    """Sample texts with their activation rows attached"""
    out_dir = stringify_path(out_dir)
    meta = read_json(os.path.join(out_dir, SAMPLES_FILE))
    path = os.path.join(out_dir, ACTIVATIONS_FILE)
    if meta["samples"]:
        arr = np.fromfile(path, dtype="<f4").reshape(-1, meta["d_model"])
        for entry in meta["samples"]:
            entry["activation"] = arr[entry["row"]]
    return meta


def extract_condition(
    handle,
    corpus,
    condition: str,
    run_root,
    protocol: GenerationProtocol | None = None,
    best_layer: int | None = None,
) -> str:
    """Run one generation condition and persist it under ``conditions/<name>``

    Parameters
    ----------
    condition:
        ``"B"``, ``"C"`` or ``"D"``.
    protocol:
        Overrides the condition's default protocol.
    best_layer:
        Defaults to the best layer in the model's comprehension ``sweep.json``.

    Returns
    -------
    out_dir: str
    """
    from emotion_geometry.comprehension import load_sweep

    protocol = protocol or condition_protocol(condition)
    record = handle.record
    run_dir = run_dir_for(run_root, record.model_id)
    if protocol.extraction_layer == "best" and best_layer is None:
        try:
            best_layer = load_sweep(run_dir).best_layer
        except FileNotFoundError:
            raise ValidationError(
                f"Condition {condition} reads the best layer; run comprehension "
                f"extraction for {record.model_id} first"
            )

    quantization = config.get("generation.quantization") if protocol.precision == "int8" else None
    manifest = RunManifest.collect(
        protocol.precision,
        corpus.digest,
        seeds={"generation": config.get("generation.seed")},
        quantization=quantization,
    )
    out_dir = condition_dir(run_dir, condition)
    os.makedirs(out_dir, exist_ok=True)

    run = run_generation(handle, protocol, corpus, best_layer)
    vectors = build_generation_vectors(run)
    persist_generation(run, vectors, out_dir, manifest.finish())
    logger.info("%s: condition %s written to %s", record.model_id, condition, out_dir)
    return out_dir
