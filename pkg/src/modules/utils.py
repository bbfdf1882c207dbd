from dotenv import load_dotenv
import hashlib
import json
import logging
import os
import re

import numpy as np

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
SEED_ENV = "FBPOSE_SEED"
VERSION = "0.1.0"


class FeedbackPoseError(Exception):
    """Base class of every error raised by the pose pipeline."""


class ShapeMismatchError(FeedbackPoseError, ValueError):
    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class GeometryError(FeedbackPoseError, ValueError):
    pass


class EmptyForegroundError(GeometryError):
    pass


class DegeneratePoseError(FeedbackPoseError, ValueError):
    pass


class PriorRankError(FeedbackPoseError, ValueError):
    def __init__(self, rank, k):
        super().__init__(f"pose set has rank {rank}, fewer than the {k} requested components")
        self.rank = rank
        self.k = k


class SceneRejectedError(FeedbackPoseError, RuntimeError):
    def __init__(self, index, tries, min_distance):
        super().__init__(
            f"sample {index}: no collision-free object placement after {tries} tries "
            f"(closest distance {min_distance:.2f} mm)"
        )
        self.index = index
        self.tries = tries
        self.min_distance = min_distance


class TrainingFault(FeedbackPoseError, RuntimeError):
    """Non-finite loss or gradient; carries where it happened."""

    def __init__(self, message, layer=None, epoch=None, stage=None):
        where = []
        if stage is not None:
            where.append(f"stage {stage}")
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if layer is not None:
            where.append(f"layer {layer}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch
        self.stage = stage


class FormatError(FeedbackPoseError, ValueError):
    pass


class ConfigError(FeedbackPoseError, ValueError):
    pass


class MissingArtifactError(FeedbackPoseError, FileNotFoundError):
    def __init__(self, stage, path):
        super().__init__(f"stage '{stage}' needs {path}, which does not exist")
        self.stage = stage
        self.path = str(path)


def is_number_string(s):
    """
    Determine if a string is a numeric string, including integers and decimals.

    Args:
    s: The string to be checked.

    Returns:
    True if the string is a numeric string, otherwise False.
    """
    pattern = r"^[-+]?\d+(\.\d+)?$"
    return re.match(pattern, s.strip()) is not None


def convert_to_number(s):
    """
    Convert a string to a number (integer or float).

    Args:
        s: The string to be converted.

    Returns:
        int or float: Returns int if the string represents an integer, float if it represents a decimal.
        Returns None if conversion fails.
    """
    try:
        s = s.strip()
        if s.isdigit() or (s[:1] in "+-" and s[1:].isdigit()):
            return int(s)
        return float(s)
    except (ValueError, TypeError, AttributeError):
        return None


def resolve_seed(seed):
    """
    Apply the environment seed override.

    Args:
        seed: Seed from the command line or a config file.

    Returns:
        int: ``FBPOSE_SEED`` when it is set, otherwise ``seed``.
    """
    override = os.getenv(SEED_ENV)
    if override is None or override == "":
        return int(seed)
    if not is_number_string(override) or not isinstance(convert_to_number(override), int):
        raise ConfigError(f"{SEED_ENV} must be an integer, got {override!r}")
    value = convert_to_number(override)
    if value < 0:
        raise ConfigError(f"{SEED_ENV} must be non-negative, got {value}")
    logger.info(f"Seed {seed} overridden by {SEED_ENV}={value}")
    return value


def derive_rng(seed, *stream):
    """Independent generator for a sub-stream such as a sample index."""
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def setup_logging(verbose=False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def sha256_of(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def write_json(path, obj):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
