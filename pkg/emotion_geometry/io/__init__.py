from emotion_geometry.io.io import *
