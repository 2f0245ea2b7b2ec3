"""Electric-bus charging under time-varying prices: simulator, hierarchical learners, exact DP oracle."""
from importlib.resources import files

__version__ = "0.1.0"


def data_path(name: str) -> str:
    """Path of a file shipped in the package data directory."""
    return str(files(__name__) / "data" / name)
