"""Residual-stream capture over the two backend styles

``named_hook`` backends expose post-block residual points by name
(``blocks.{N}.hook_resid_post``).  ``hidden_state_sequence`` backends
return one hidden state per layer plus the input embedding at index 0, so
block ``N`` lives at index ``N + 1``.  Both report the post-block residual
before the final normalization.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from numbers import Integral

import numpy as np
from dask.utils import import_required
from tqdm.auto import tqdm

from emotion_geometry import config
from emotion_geometry.errors import CapabilityError, CaptureError
from emotion_geometry.registry import BACKENDS, ModelRecord, check_layer

logger = logging.getLogger(__name__)

POSITION_POLICIES = ("last_content_token", "explicit_index", "mid_generation")

_DTYPES = {"fp16": "float16", "bf16": "bfloat16", "fp32": "float32"}


def map_layer_locus(backend_kind: str, layer: int, n_layers: int):
    """Backend-specific capture locus for block ``layer``

    Examples
    --------
    >>> map_layer_locus("hidden_state_sequence", 11, 28)
    12
    >>> map_layer_locus("named_hook", 11, 28)
    'blocks.11.hook_resid_post'
    """
    if not isinstance(layer, Integral) or isinstance(layer, bool):
        raise TypeError(f"Layer index must be an integer, got {layer!r}")
    if not 0 <= layer < n_layers:
        raise IndexError(f"Layer {layer} out of range for {n_layers} layers")
    if backend_kind == "named_hook":
        return f"blocks.{layer}.hook_resid_post"
    elif backend_kind == "hidden_state_sequence":
        # index 0 holds the input embedding
        return layer + 1
    else:
        raise ValueError(f"{backend_kind} not supported")


def last_content_position(attention_mask) -> int:
    """Index of the last content token, for left or right padding

    >>> last_content_position([1, 1, 1, 0, 0])
    2
    >>> last_content_position([0, 1, 1])
    2
    """
    mask = np.asarray(attention_mask).reshape(-1)
    idx = np.flatnonzero(mask)
    if not len(idx):
        raise ValueError("Attention mask has no content tokens")
    return int(idx[-1])


def mid_generation_position(prompt_len: int, generated_len: int) -> int:
    """Token index halfway through a generated continuation

    >>> mid_generation_position(10, 7)
    13
    """
    if generated_len < 1:
        raise ValueError("Generation is empty; there is no mid-generation token")
    return prompt_len + generated_len // 2


@dataclass(frozen=True)
class CaptureRequest:
    """One text to run and where to read it

    ``token_ids`` bypasses tokenization (generated sequences are captured
    on exactly the ids that were generated).  ``prompt_len`` is required by
    the ``mid_generation`` policy and ``index`` by ``explicit_index``.
    """

    text: str
    layers: frozenset
    position_policy: str = "last_content_token"
    apply_chat_template: bool = False
    index: int | None = None
    prompt_len: int | None = None
    token_ids: tuple | None = None
    attention_mask: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", frozenset(self.layers))
        if self.position_policy not in POSITION_POLICIES:
            raise ValueError(f"Unknown position policy {self.position_policy!r}")
        if self.position_policy == "explicit_index" and self.index is None:
            raise ValueError("explicit_index policy requires an index")
        if self.position_policy == "mid_generation" and self.prompt_len is None:
            raise ValueError("mid_generation policy requires prompt_len")
        if not self.layers:
            raise ValueError("Capture request names no layers")

    def position(self, attention_mask) -> int:
        mask = np.asarray(attention_mask).reshape(-1)
        if self.position_policy == "last_content_token":
            return last_content_position(mask)
        if self.position_policy == "explicit_index":
            if not -len(mask) <= self.index < len(mask):
                raise IndexError(
                    f"Position {self.index} outside sequence of length {len(mask)}"
                )
            return self.index % len(mask)
        end = last_content_position(mask) + 1
        return mid_generation_position(self.prompt_len, end - self.prompt_len)


@dataclass
class ActivationMatrix:
    model: ModelRecord
    layer: int
    rows: np.ndarray
    texts: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise ValueError(f"Activation rows must be 2-D, got {self.rows.shape}")

    @property
    def nan_flags(self) -> np.ndarray:
        return ~np.isfinite(self.rows).all(axis=1)

    def __len__(self):
        return len(self.rows)

    def as_float64(self) -> np.ndarray:
        return self.rows.astype(np.float64)

    def finite_rows(self) -> np.ndarray:
        return self.rows[~self.nan_flags]


class ModelHandle:
    """A loaded model behind one of the two backend styles

    Subclasses implement `residuals` and `_generate`.  Tokenization goes
    through the Hugging Face tokenizer on both backends so both see the
    same ids.
    """

    backend_kind = None

    def __init__(self, record: ModelRecord, model, tokenizer):
        self.record = record
        self.model = model
        self.tokenizer = tokenizer

    def __repr__(self):
        return f"<{type(self).__name__}: {self.record.model_id} ({self.record.precision})>"

    @property
    def eos_token_id(self):
        return getattr(self.tokenizer, "eos_token_id", None)

    def encode(self, text: str, apply_chat_template: bool = False) -> np.ndarray:
        if apply_chat_template:
            if not getattr(self.tokenizer, "chat_template", None):
                raise CapabilityError(
                    f"{self.record.model_id} has no chat template", self.backend_kind
                )
            text = self.tokenizer.apply_chat_template(
                [{"role": "user", "content": text}],
                tokenize=False,
                add_generation_prompt=True,
            )
            ids = self.tokenizer(text, add_special_tokens=False)["input_ids"]
        else:
            ids = self.tokenizer(text)["input_ids"]
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        return self.tokenizer.decode(list(ids), skip_special_tokens=True)

    def residuals(self, ids, layers, attention_mask=None) -> dict:
        """Post-block residual states ``{layer: (seq, d_model) array}``"""
        raise NotImplementedError

    def generate(
        self,
        ids,
        max_new_tokens: int,
        do_sample: bool = False,
        temperature: float = 1.0,
        top_p: float = 1.0,
        seed: int | None = None,
    ) -> np.ndarray:
        """Newly generated token ids (prompt excluded)"""
        if do_sample and seed is not None:
            torch = import_required("torch", "Sampling requires torch")
            torch.manual_seed(seed)
        out = self._generate(
            np.asarray(ids, dtype=np.int64), max_new_tokens, do_sample, temperature, top_p
        )
        out = np.asarray(out, dtype=np.int64).reshape(-1)[len(ids) :]
        eos = self.eos_token_id
        if eos is not None and len(out):
            stop = np.flatnonzero(out == eos)
            if len(stop):
                out = out[: stop[0]]
        return out

    def _generate(self, ids, max_new_tokens, do_sample, temperature, top_p):
        raise NotImplementedError

    def generate_with_addition(self, ids, layer: int, addition, max_new_tokens: int):
        """Greedy continuation with ``addition`` added to the residual at ``layer``"""
        raise CapabilityError(
            f"Residual interventions are not available on {self.backend_kind}",
            self.backend_kind,
        )

    def mean_residual_norm(self, texts, layer: int) -> float:
        """Mean residual norm at ``layer`` over ``texts`` (last content token)"""
        acts = capture_texts(self, texts, [layer], desc="residual norm")[layer]
        rows = acts.finite_rows().astype(np.float64)
        if not len(rows):
            raise CaptureError("No finite residuals", self.record.model_id, layer)
        return float(np.linalg.norm(rows, axis=1).mean())


def _torch_inputs(ids, attention_mask, device):
    torch = import_required("torch", "Model execution requires torch")
    t = torch.as_tensor(np.asarray(ids, dtype=np.int64)).reshape(1, -1).to(device)
    if attention_mask is None:
        m = torch.ones_like(t)
    else:
        m = torch.as_tensor(np.asarray(attention_mask, dtype=np.int64))
        m = m.reshape(1, -1).to(device)
    return t, m


def _to_numpy(tensor) -> np.ndarray:
    return tensor.detach().float().cpu().numpy()


class NamedHookBackend(ModelHandle):
    backend_kind = "named_hook"

    @classmethod
    def load(cls, record: ModelRecord, device: str) -> NamedHookBackend:
        torch = import_required("torch", "Model execution requires torch")
        tl = import_required(
            "transformer_lens",
            "The named_hook backend requires transformer_lens.\n\n"
            "  python -m pip install transformer_lens",
        )
        if record.precision == "int8":
            raise CapabilityError(
                "8-bit loading is only supported on the hidden_state_sequence backend",
                cls.backend_kind,
            )
        try:
            # unprocessed weights keep the residual stream comparable across backends
            model = tl.HookedTransformer.from_pretrained_no_processing(
                record.model_id,
                dtype=getattr(torch, _DTYPES[record.precision]),
                device=device,
            )
        except (ValueError, KeyError) as e:
            raise CapabilityError(
                f"{record.model_id} is not supported by transformer_lens: {e}",
                cls.backend_kind,
            ) from e
        model.eval()
        return cls(record, model, model.tokenizer)

    def residuals(self, ids, layers, attention_mask=None) -> dict:
        torch = import_required("torch", "Model execution requires torch")
        layers = sorted(layers)
        names = {
            map_layer_locus(self.backend_kind, layer, self.record.n_layers): layer
            for layer in layers
        }
        t, m = _torch_inputs(ids, attention_mask, self.model.cfg.device)
        with torch.no_grad():
            _, cache = self.model.run_with_cache(
                t,
                attention_mask=m,
                names_filter=lambda name: name in names,
                stop_at_layer=layers[-1] + 1,
            )
        return {layer: _to_numpy(cache[name][0]) for name, layer in names.items()}

    def _generate(self, ids, max_new_tokens, do_sample, temperature, top_p):
        t, _ = _torch_inputs(ids, None, self.model.cfg.device)
        out = self.model.generate(
            t,
            max_new_tokens=max_new_tokens,
            do_sample=do_sample,
            temperature=temperature,
            top_p=top_p if do_sample else None,
            stop_at_eos=True,
            verbose=False,
            return_type="tokens",
        )
        return _to_numpy(out).astype(np.int64)

    def generate_with_addition(self, ids, layer: int, addition, max_new_tokens: int):
        torch = import_required("torch", "Model execution requires torch")
        name = map_layer_locus(self.backend_kind, layer, self.record.n_layers)
        delta = torch.as_tensor(np.asarray(addition, dtype=np.float32)).to(
            device=self.model.cfg.device, dtype=self.model.cfg.dtype
        )

        def _add(resid, hook):
            return resid + delta

        with self.model.hooks(fwd_hooks=[(name, _add)]):
            return self.generate(ids, max_new_tokens, do_sample=False)


def _decoder_layers(model):
    for path in ["model.layers", "transformer.h", "gpt_neox.layers", "model.decoder.layers"]:
        obj = model
        try:
            for attr in path.split("."):
                obj = getattr(obj, attr)
        except AttributeError:
            continue
        return obj
    raise CapabilityError(
        f"Cannot locate decoder blocks of {type(model).__name__}",
        "hidden_state_sequence",
    )


class HiddenStateBackend(ModelHandle):
    backend_kind = "hidden_state_sequence"

    @classmethod
    def load(cls, record: ModelRecord, device: str) -> HiddenStateBackend:
        torch = import_required("torch", "Model execution requires torch")
        transformers = import_required(
            "transformers", "The hidden_state_sequence backend requires transformers"
        )
        kwargs = _hub_kwargs()
        if record.precision == "int8":
            import_required(
                "bitsandbytes",
                "8-bit loading requires bitsandbytes.\n\n"
                "  python -m pip install 'emotion-geometry[int8]'",
            )
            kwargs["quantization_config"] = transformers.BitsAndBytesConfig(
                load_in_8bit=True
            )
            kwargs["device_map"] = "auto"
        else:
            kwargs["torch_dtype"] = getattr(torch, _DTYPES[record.precision])
        tokenizer = transformers.AutoTokenizer.from_pretrained(
            record.model_id, **_hub_kwargs()
        )
        try:
            model = transformers.AutoModelForCausalLM.from_pretrained(
                record.model_id, **kwargs
            )
        except ValueError as e:
            raise CapabilityError(
                f"{record.model_id} cannot be loaded as a causal LM: {e}",
                cls.backend_kind,
            ) from e
        if record.precision != "int8":
            model = model.to(device)
        model.eval()
        return cls(record, model, tokenizer)

    @property
    def device(self):
        return next(self.model.parameters()).device

    def residuals(self, ids, layers, attention_mask=None) -> dict:
        torch = import_required("torch", "Model execution requires torch")
        layers = sorted(layers)
        last = self.record.n_layers - 1
        captured = {}

        def _keep_last(module, args, output):
            captured["last"] = output[0] if isinstance(output, tuple) else output

        hook = None
        if last in layers:
            # hidden_states[-1] is normalized; read the last block directly
            hook = _decoder_layers(self.model)[last].register_forward_hook(_keep_last)
        t, m = _torch_inputs(ids, attention_mask, self.device)
        try:
            with torch.no_grad():
                out = self.model(input_ids=t, attention_mask=m, output_hidden_states=True)
        finally:
            if hook is not None:
                hook.remove()

        states = {}
        for layer in layers:
            if layer == last:
                states[layer] = _to_numpy(captured["last"][0])
            else:
                idx = map_layer_locus(self.backend_kind, layer, self.record.n_layers)
                states[layer] = _to_numpy(out.hidden_states[idx][0])
        return states

    def _generate(self, ids, max_new_tokens, do_sample, temperature, top_p):
        t, m = _torch_inputs(ids, None, self.device)
        kwargs = {"do_sample": do_sample}
        if do_sample:
            kwargs.update(temperature=temperature, top_p=top_p)
        pad = self.tokenizer.pad_token_id
        out = self.model.generate(
            input_ids=t,
            attention_mask=m,
            max_new_tokens=max_new_tokens,
            pad_token_id=pad if pad is not None else self.eos_token_id,
            **kwargs,
        )
        return _to_numpy(out[0]).astype(np.int64)


def _hub_kwargs() -> dict:
    kwargs = {}
    token = os.environ.get(config.get("hub.token-env"))
    if token:
        kwargs["token"] = token
    cache_dir = config.get("cache-dir")
    if cache_dir:
        kwargs["cache_dir"] = cache_dir
    return kwargs


def resolve_device(device: str | None = None) -> str:
    device = device or config.get("device")
    if device != "auto":
        return device
    torch = import_required("torch", "Model execution requires torch")
    return "cuda" if torch.cuda.is_available() else "cpu"


def load_model(record: ModelRecord, precision=None, backend=None, device=None):
    """Load a model handle for ``record``

    Parameters
    ----------
    record:
        Model identity and architecture.
    precision, backend:
        Override the record's precision or backend kind.
    device:
        ``"cpu"``, ``"cuda"``, ... or ``"auto"`` (the configured default).
    """
    overrides = {}
    if precision is not None:
        overrides["precision"] = precision
    if backend is not None:
        overrides["backend_kind"] = backend
    if overrides:
        record = record.replace(**overrides)
    device = resolve_device(device)
    logger.info(
        "Loading %s on %s at %s via %s",
        record.model_id,
        device,
        record.precision,
        record.backend_kind,
    )
    if record.backend_kind == "named_hook":
        return NamedHookBackend.load(record, device)
    elif record.backend_kind == "hidden_state_sequence":
        return HiddenStateBackend.load(record, device)
    else:
        raise ValueError(f"{record.backend_kind} not supported; expected one of {BACKENDS}")


def _runtime_errors():
    errors = (RuntimeError, MemoryError)
    try:
        import torch

        errors += (torch.cuda.OutOfMemoryError,)
    except (ImportError, AttributeError):
        pass
    return errors


def capture(handle: ModelHandle, request: CaptureRequest) -> dict:
    """Residual states of one text at the requested layers

    Returns
    -------
    out: dict
        ``{layer: ActivationMatrix}`` with one row each.  Non-finite rows
        are flagged, never raised.
    """
    record = handle.record
    layers = sorted(check_layer(record, layer) for layer in request.layers)
    if request.token_ids is not None:
        ids = np.asarray(request.token_ids, dtype=np.int64)
    else:
        ids = handle.encode(request.text, request.apply_chat_template)
    mask = (
        np.ones(len(ids), dtype=np.int64)
        if request.attention_mask is None
        else np.asarray(request.attention_mask, dtype=np.int64)
    )
    if len(mask) != len(ids):
        raise ValueError(f"Mask length {len(mask)} does not match {len(ids)} tokens")
    position = request.position(mask)

    try:
        states = handle.residuals(ids, layers, mask)
    except _runtime_errors() as e:
        raise CaptureError(
            f"Forward pass failed: {e}",
            model_id=record.model_id,
            layer=layers[0] if len(layers) == 1 else layers,
        ) from e

    return {
        layer: ActivationMatrix(record, layer, states[layer][position][None, :], [request.text])
        for layer in layers
    }


def capture_texts(
    handle: ModelHandle,
    texts,
    layers,
    apply_chat_template: bool = False,
    desc: str | None = None,
) -> dict:
    """Capture many texts one at a time at their last content token

    Returns
    -------
    out: dict
        ``{layer: ActivationMatrix}`` with one row per text, in order.
    """
    texts = list(texts)
    layers = sorted(layers)
    rows = {layer: [] for layer in layers}
    for text in tqdm(texts, desc=desc, disable=None, leave=False):
        request = CaptureRequest(
            text, frozenset(layers), apply_chat_template=apply_chat_template
        )
        for layer, acts in capture(handle, request).items():
            rows[layer].append(acts.rows[0])

    out = {}
    for layer in layers:
        acts = ActivationMatrix(handle.record, layer, np.stack(rows[layer]), texts)
        n_bad = int(acts.nan_flags.sum())
        if n_bad:
            logger.warning(
                "%s layer %d: %d of %d rows non-finite",
                handle.record.model_id,
                layer,
                n_bad,
                len(acts),
            )
        out[layer] = acts
    return out


def _estimate_size_b(cfg) -> float:
    # embeddings + attention + gated MLP; ignores grouped-query savings
    d = cfg.hidden_size
    ff = getattr(cfg, "intermediate_size", 4 * d)
    n = cfg.num_hidden_layers
    return (cfg.vocab_size * d + n * (4 * d * d + 3 * d * ff)) / 1e9


def record_from_hub(model_id: str, precision: str = "fp16", backend=None) -> ModelRecord:
    """A model record built from the hub configuration of ``model_id``

    ``size_b`` is an estimate from the configuration.  Prefer a model table
    row when one exists.
    """
    transformers = import_required(
        "transformers", "Resolving hub models requires transformers"
    )
    cfg = transformers.AutoConfig.from_pretrained(model_id, **_hub_kwargs())
    lowered = model_id.lower()
    instruct = any(tag in lowered for tag in ["instruct", "-it", "chat"])
    return ModelRecord(
        model_id=model_id,
        family=getattr(cfg, "model_type", "unknown"),
        variant="instruct" if instruct else "base",
        size_b=round(_estimate_size_b(cfg), 3),
        n_layers=cfg.num_hidden_layers,
        d_model=cfg.hidden_size,
        backend_kind=backend or "named_hook",
        precision=precision,
    )
