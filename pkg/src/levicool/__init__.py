"""levicool: closed-loop simulator of imaging-based feedback cooling of a
charged nanoparticle in a linear Paul trap."""

from importlib import resources

__version__ = "0.1.0"


def default_config_path():
    """Filesystem path of the shipped default experiment config."""
    return str(resources.files("levicool").joinpath("configs/default.ini"))
