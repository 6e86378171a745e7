"""Survey pluggable respondents with fixed privacy, prosocial and data-sharing
questionnaires, fit a multi-group structural equation model to the answers and
score each group's value-action alignment."""

from .instruments import load_catalog
from .vaar import HUMAN_TEMPLATE, VaarResult, tier, vaar

__version__ = "0.1.0"

__all__ = ["load_catalog", "HUMAN_TEMPLATE", "VaarResult", "tier", "vaar", "__version__"]
