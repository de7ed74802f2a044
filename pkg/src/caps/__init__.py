"""Feature selection by policy search in a learned, order-free subset embedding."""

from importlib import resources

__version__ = "0.1.0"


def bundled_dataset(name: str):
    """Path to a bundled CSV (``"smoke"`` or ``"medium"``); label column ``label``."""
    return resources.files(__package__) / "data" / f"{name}.csv"
