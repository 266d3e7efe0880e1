"""Multi-view foot mesh fitting from uncertain normals, keypoints and silhouettes."""

__version__ = "0.1.0"
