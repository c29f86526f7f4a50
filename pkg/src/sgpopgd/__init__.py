"""Shape-constrained GP discomfort learning with online projected gradient control."""

from .config import RunConfig, load_config
from .errors import SgpOpgdError
from .simulator import RunLog, run

__version__ = "0.1.0"

__all__ = ["RunConfig", "RunLog", "SgpOpgdError", "load_config", "run", "__version__"]
