import json
import logging
import math
import platform

import numpy as np

from .errors import ConfigError
from .types import FrequencyConfig, FrequencyVector

logger = logging.getLogger('kam')


# Named frequency vectors, normalized so that omega[0] = 1 and |omega[j]| <= 1
frequency_presets = {
    "golden": [1.0, (math.sqrt(5.0) - 1.0) / 2.0],
    "sqrt2": [1.0, math.sqrt(2.0) - 1.0],
    "cubic-root": [1.0, 2.0 ** (1.0 / 3.0) - 1.0, 2.0 ** (2.0 / 3.0) - 1.0],
}


def parse_frequency(value) -> FrequencyVector:
    """Accept a preset name, a decimal string "1,0.618..." or a list of floats"""
    if isinstance(value, FrequencyConfig):
        if value.preset:
            value = value.preset
        elif value.omega is not None:
            value = value.omega
        else:
            raise ConfigError('frequency: give either a preset or omega')
    if isinstance(value, str):
        name = value.strip().lower()
        if name in frequency_presets:
            return FrequencyVector(omega=frequency_presets[name])
        try:
            values = [float(x) for x in name.replace(';', ',').split(',') if x.strip()]
        except ValueError:
            raise ConfigError(f'unknown frequency "{value}"; presets: {", ".join(frequency_presets)}')
        value = values
    try:
        return FrequencyVector(omega=[float(x) for x in value])
    except ValueError as e:
        raise ConfigError(f'invalid frequency vector {value}: {e}')


def wrap_angle(x):
    """Reduce angle differences to (-1/2, 1/2]"""
    return x - np.ceil(x - 0.5)


def _builtin(value):
    # numpy scalars and arrays
    if isinstance(value, (np.generic, np.ndarray)):
        return value.tolist()
    raise TypeError(f'Object of type {type(value).__name__} is not JSON serializable')


def dumps_json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_builtin)


def dump_json(data, path):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dumps_json(data) + '\n')


def load_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def package_versions():
    """Versions of the numerical stack, written next to run outputs"""
    import pandas
    import pydantic
    import scipy

    from . import __version__
    return {
        'kam': __version__,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'pandas': pandas.__version__,
        'pydantic': str(pydantic.VERSION),
    }
