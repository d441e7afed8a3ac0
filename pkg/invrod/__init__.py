from importlib.metadata import version

import jax

jax.config.update("jax_enable_x64", True)

__version__ = version("invrod")
