"""Configuration management.

Environment loading, root-seed expansion, deterministic-mode switching, and
the atomic file writes every output of promptpert goes through.
"""

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any

import torch
from dotenv import load_dotenv

DETERMINISTIC_ENV = "CGNC_DETERMINISTIC"


def load_environment() -> None:
    """Load variables from a local ``.env`` file without overriding the shell."""
    load_dotenv(override=False)


def deterministic_requested() -> bool:
    """Return True when the environment asks for deterministic kernels."""
    return os.getenv(DETERMINISTIC_ENV, "0").strip() == "1"


def deterministic_mode(enabled: bool) -> None:
    """Force single-threaded deterministic torch kernels when ``enabled``."""
    if not enabled:
        return
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    torch.backends.cudnn.benchmark = False
    torch.backends.cudnn.deterministic = True


def derive_seed(root_seed: int, purpose: str) -> int:
    """Expand a root seed into an independent 31-bit seed for one purpose.

    Args:
        root_seed: The run's single root seed.
        purpose: Free-form purpose tag, e.g. ``"data"``, ``"mask"``, ``"init"``.

    Returns:
        A non-negative integer usable with ``torch.Generator.manual_seed`` and
        ``numpy.random.default_rng``.
    """
    digest = hashlib.sha256(f"{root_seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def write_atomic(path: str | Path, data: bytes) -> Path:
    """Write bytes to ``path`` via a temp file in the same directory + rename."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, target)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return target


def write_json_atomic(path: str | Path, payload: Any) -> Path:
    """Serialize ``payload`` as indented JSON and write it atomically."""
    text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    return write_atomic(path, (text + "\n").encode())
