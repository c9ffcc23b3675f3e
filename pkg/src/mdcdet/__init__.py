"""Continual object detection with a task-chunked memory pool on toy streams."""

__version__ = "0.1.0"
