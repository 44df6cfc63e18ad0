from emotion_geometry.tests.conftest import record  # noqa: F401
