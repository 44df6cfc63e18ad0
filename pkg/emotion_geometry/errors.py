class ValidationError(ValueError):
    """An artifact, table, corpus or configuration violates its invariants"""


class AlignmentError(ValueError):
    """Two matrices are labelled with different emotion orders"""


class ConsistencyError(ValueError):
    """Inputs that must describe the same model and layer do not"""


class ExtractionError(RuntimeError):
    """No usable emotion vectors could be built"""


class CaptureError(RuntimeError):
    def __init__(self, msg, model_id=None, layer=None):
        super().__init__(msg)
        self.model_id = model_id
        self.layer = layer

    def __str__(self):
        base = super().__str__()
        if self.model_id is None:
            return base
        return f"{base} (model_id={self.model_id!r}, layer={self.layer})"


class CapabilityError(NotImplementedError):
    def __init__(self, msg, backend=None):
        super().__init__(msg)
        self.backend = backend
