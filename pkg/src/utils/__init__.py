"""Utils package."""

from .settings import get_logger