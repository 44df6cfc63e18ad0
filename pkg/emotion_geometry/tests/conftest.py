import re
import zlib

import numpy as np
import pytest

from emotion_geometry.capture import ModelHandle
from emotion_geometry.registry import EmotionVectorSet, ModelRecord
from emotion_geometry.stimuli import EMOTIONS, load_default_corpus

D_MODEL = 16
N_LAYERS = 4
VOCAB = 997
BOS = 1
EOS = 2
REPEAT = 7


class StubTokenizer:
    """Word-level tokenizer with stable ids"""

    chat_template = "stub"
    eos_token_id = EOS
    pad_token_id = None

    def __init__(self):
        self.words = {}

    def _id(self, word):
        i = zlib.crc32(word.encode()) % (VOCAB - 10) + 10
        self.words[i] = word
        return i

    def __call__(self, text, add_special_tokens=True):
        ids = [self._id(w) for w in re.findall(r"\w+", text.lower())]
        return {"input_ids": ([BOS] if add_special_tokens else []) + ids}

    def apply_chat_template(self, messages, tokenize=False, add_generation_prompt=True):
        return f"user {messages[-1]['content']} assistant"

    def decode(self, ids, skip_special_tokens=True):
        words = [self.words.get(i, f"w{i}") for i in ids if i not in (BOS, EOS)]
        return " ".join(words)


class StubHandle(ModelHandle):
    """A deterministic numpy model

    Residuals are a residual MLP over the running mean of token
    embeddings.  Generation is a fixed function of the prompt.
    """

    backend_kind = "named_hook"

    def __init__(self, record=None, nan_layers=(), degenerate_words=(), collapse_above=np.inf, empty_below=0.0):
        record = record or ModelRecord(
            "stub/tiny-instruct", "stub", "instruct", 0.01, N_LAYERS, D_MODEL, self.backend_kind
        )
        super().__init__(record, model=None, tokenizer=StubTokenizer())
        rng = np.random.default_rng(zlib.crc32(record.model_id.encode()))
        d = record.d_model
        self.weights = [rng.normal(scale=1 / np.sqrt(d), size=(d, d)) for _ in range(record.n_layers)]
        self.nan_layers = set(nan_layers)
        self.degenerate_words = set(degenerate_words)
        self.collapse_above = collapse_above
        self.empty_below = empty_below
        self.calls = []

    def _embed(self, ids):
        return np.stack(
            [np.random.default_rng(int(i)).normal(size=self.record.d_model) for i in ids]
        )

    def residuals(self, ids, layers, attention_mask=None):
        emb = self._embed(ids)
        h = np.cumsum(emb, axis=0) / np.arange(1, len(ids) + 1)[:, None]
        out = {}
        for layer in range(max(layers) + 1):
            h = h + np.tanh(h @ self.weights[layer])
            if layer in layers:
                out[layer] = np.full_like(h, np.nan) if layer in self.nan_layers else h.copy()
        return out

    def generate(self, ids, max_new_tokens, do_sample=False, temperature=1.0, top_p=1.0, seed=None):
        self.calls.append({"do_sample": do_sample, "seed": seed})
        words = set(self.decode(ids).split())
        if words & self.degenerate_words:
            return np.array([], dtype=np.int64)
        base = int(np.sum(ids))
        if do_sample:
            rng = np.random.default_rng(seed)
            new = rng.integers(10, VOCAB, size=max_new_tokens)
        else:
            new = (base * 31 + np.arange(max_new_tokens) * 17) % (VOCAB - 10) + 10
        return new.astype(np.int64)

    def generate_with_addition(self, ids, layer, addition, max_new_tokens):
        scale = float(np.linalg.norm(addition))
        self.calls.append({"layer": layer, "scale": scale})
        if scale == 0:
            return self.generate(ids, max_new_tokens)
        if scale < self.empty_below:
            return np.array([], dtype=np.int64)
        if scale > self.collapse_above:
            return np.full(max_new_tokens, REPEAT, dtype=np.int64)
        return self.generate(ids, max_new_tokens) + 1


class HiddenStateStub(StubHandle):
    backend_kind = "hidden_state_sequence"

    def generate_with_addition(self, ids, layer, addition, max_new_tokens):
        return ModelHandle.generate_with_addition(self, ids, layer, addition, max_new_tokens)


@pytest.fixture
def corpus():
    yield load_default_corpus()


@pytest.fixture
def handle():
    yield StubHandle()


@pytest.fixture
def record():
    yield ModelRecord("stub/tiny-instruct", "stub", "instruct", 0.01, N_LAYERS, D_MODEL, "named_hook")


def random_vectors(record, layer=0, seed=0):
    """A centered 21-row vector set"""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(len(EMOTIONS), record.d_model))
    return EmotionVectorSet(record, layer, x - x.mean(axis=0))


@pytest.fixture
def vectors(record):
    yield random_vectors(record)
