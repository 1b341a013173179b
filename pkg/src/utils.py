import hashlib
import json
import logging
import os
import tempfile
from typing import Any, Iterable, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from fuzzywuzzy import process

load_dotenv()
logger = logging.getLogger(__name__)

# Resolve paths relative to the project root so they work regardless of CWD
_PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

FUZZY_SCORE_CUTOFF = 80


def project_path(*parts: str) -> str:
    return os.path.join(_PROJECT_ROOT, *parts)


def worker_count() -> int:
    """Worker-thread cap from ``COUPLEDCAST_THREADS`` (default 1)."""
    raw = os.getenv("COUPLEDCAST_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"⚠️ COUPLEDCAST_THREADS='{raw}' is not an integer, using 1 worker")
        return 1


def runs_root() -> str:
    return os.getenv("COUPLEDCAST_RUNS_DIR", project_path("runs"))


def suggest(word: str, choices: Iterable[str]) -> Optional[str]:
    """Closest known name for a misspelled stage, engine or config key."""
    choices = list(choices)
    if not choices:
        return None
    result = process.extractOne(word, choices)
    if result is None:
        return None
    best_match, score = result[0], result[1]
    return best_match if score > FUZZY_SCORE_CUTOFF else None


def did_you_mean(word: str, choices: Iterable[str]) -> str:
    match = suggest(word, choices)
    return f" (did you mean '{match}'?)" if match else ""


def dumps_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2)


def json_digest(data: Any) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()


def bytes_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write to a temporary file in the same directory, then rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_json(path: str, data: Any) -> None:
    atomic_write_bytes(path, (dumps_json(data) + "\n").encode("utf-8"))


def load_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def to_f32_bytes(arrays: Sequence[np.ndarray]) -> bytes:
    """Concatenate arrays as little-endian float32, in order."""
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def read_f32(path: str) -> np.ndarray:
    return np.fromfile(path, dtype="<f4")
