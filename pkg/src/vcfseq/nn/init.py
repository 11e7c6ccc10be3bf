import numpy as np


def he_uniform(rng: np.random.Generator, shape, fan_in, dtype=np.float32):
    """Uniform He initialisation: U(-sqrt(6 / fan_in), +sqrt(6 / fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
