"""Managers package."""

from .graph_manager import GraphManager
from .run_manager import RunManager
