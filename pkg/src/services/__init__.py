"""Services package."""

from .format_service import FormatService
from .diffusion_service import DiffusionService
