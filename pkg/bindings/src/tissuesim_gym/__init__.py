"""Gym-convention bindings over the native tissuesim environment batch.

Exposes the episodic five-tuple convention (observation, reward, terminated,
truncated, info) with seeded resets and declared spaces, consuming the
simulator only through its public environment API. Buffers are copied out on
every call, never aliased.
"""

from .env import BoundEnv, Box, make

__version__ = "0.1.0"

__all__ = ["BoundEnv", "Box", "make", "__version__"]
