"""Utility functions for imblab.

This module contains helpers for reading configuration files, writing
result tables and raw arrays, and hashing experiment outputs.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import yaml

logger = logging.getLogger(__name__)

# Raw array files are little-endian regardless of the host
FLOAT_DTYPE = np.dtype("<f8")
LABEL_DTYPE = np.dtype("<u4")

MANIFEST_FILENAME = "MANIFEST.json"


def load_yaml(path: str | Path) -> dict:
    """Read a yaml file into a dictionary.

    Parameters
    ----------
    path : str | Path
        path to the yaml file

    Returns
    -------
    dict
        parsed content; an empty file gives an empty dictionary

    """
    with open(path) as yf:
        content = yaml.safe_load(yf)
    return content if content is not None else {}


def write_json(path: str | Path, content: Any) -> None:
    """Write ``content`` as indented json with sorted keys."""
    with open(path, "w") as jf:
        json.dump(content, jf, indent=2, sort_keys=True)
        jf.write("\n")


def read_json(path: str | Path) -> Any:
    """Read a json file."""
    with open(path) as jf:
        return json.load(jf)


def write_table(df: pd.DataFrame, path: str | Path) -> None:
    """Write a dataframe as csv, with full float precision.

    Floats are written with 17 significant digits so that rerunning an
    experiment gives byte-identical files.

    Parameters
    ----------
    df : pd.DataFrame
        table to write; the index is dropped
    path : str | Path
        output csv path

    """
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def write_array(path: str | Path, array: np.ndarray, dtype: np.dtype) -> None:
    """Write an array as raw row-major bytes with the given dtype."""
    np.ascontiguousarray(array, dtype=dtype).tofile(path)


def read_array(
    path: str | Path, dtype: np.dtype, shape: tuple[int, ...]
) -> np.ndarray:
    """Read a raw row-major array written by :func:`write_array`.

    Parameters
    ----------
    path : str | Path
        path to the raw file
    dtype : np.dtype
        on-disk dtype (little-endian)
    shape : tuple[int, ...]
        expected shape

    Returns
    -------
    np.ndarray
        array in native byte order

    """
    array = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if array.size != expected:
        raise ValueError(
            f"{path} holds {array.size} values, expected {expected}"
        )
    return array.reshape(shape).astype(dtype.newbyteorder("="))


def file_sha256(path: str | Path) -> str:
    """Return the hex sha256 digest of a file's content."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(output_dir: str | Path) -> dict[str, str]:
    """Hash every file in an output directory into ``MANIFEST.json``.

    Parameters
    ----------
    output_dir : str | Path
        experiment output directory

    Returns
    -------
    dict[str, str]
        relative posix path -> sha256, sorted by path

    """
    output_dir = Path(output_dir)
    hashes = {
        f.relative_to(output_dir).as_posix(): file_sha256(f)
        for f in sorted(output_dir.rglob("*"))
        if f.is_file() and f.name != MANIFEST_FILENAME
    }
    write_json(output_dir / MANIFEST_FILENAME, {"files": hashes})
    logger.debug("Manifest lists %d files", len(hashes))
    return hashes


def max_worker_threads() -> int:
    """Worker thread cap from ``IMBLAB_THREADS`` (default: cpu count)."""
    default = os.cpu_count() or 1
    value = os.environ.get("IMBLAB_THREADS")
    if value is None:
        return default
    try:
        threads = int(value)
    except ValueError:
        logger.warning("Ignoring non-integer IMBLAB_THREADS=%r", value)
        return default
    return max(1, threads)
