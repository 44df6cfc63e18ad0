from emotion_geometry import config
from emotion_geometry.collection import *
from emotion_geometry.errors import (
    AlignmentError,
    CapabilityError,
    CaptureError,
    ConsistencyError,
    ExtractionError,
    ValidationError,
)
from emotion_geometry.registry import (
    RDM,
    EmotionVectorSet,
    GenerationVectorSet,
    ModelRecord,
    RunManifest,
    load_model_table,
    load_rdm,
    load_vector_set,
)
from emotion_geometry.stimuli import EMOTIONS, load_corpus, load_default_corpus
