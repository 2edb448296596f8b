import hashlib
import os
import re
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Optional, Union
from uuid import uuid4

import torch
from loguru import logger

from depthdiff import VERSION
from depthdiff.errors import UsageError

# Every random draw in the package comes from one of these named streams, so
# an ablation can vary a single factor while the others stay fixed.
RNG_STREAMS = ("data", "init", "timesteps", "noise", "ensemble", "order")


def stream_seed(seed: int, stream: str, counter: int = 0) -> int:
    """Derive a 64-bit seed from (seed, stream, counter).

    Keyed hashing turns torch's generator into a counter-based source: the
    draw for training step 1234 does not depend on how many draws came before
    it, which is what makes checkpoint resume bit-exact."""
    if stream not in RNG_STREAMS:
        raise ValueError(f"unknown random stream {stream!r}, expected one of {RNG_STREAMS}")
    digest = hashlib.blake2b(
        f"{seed}:{stream}:{counter}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def generator_for(seed: int, stream: str, counter: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_seed(seed, stream, counter))
    return g


@contextmanager
def atomic_write(path: Union[str, Path], mode: str = "w", newline: Optional[str] = None):
    """Write to a temporary file next to `path` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, newline=newline) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def get_run_name(load_from: Optional[str]):
    """Generate a run name. If load_from is provided, reuse the name of the
    run that produced the checkpoint."""

    if load_from:
        # <run dir>/checkpoints/<checkpoint>
        return Path(load_from).resolve().parent.parent.name
    else:
        return f"run-v{VERSION}-{uuid4()}"


@contextmanager
def run_manager(out_dir: Union[str, Path], name: str, log_filename: str = "train.log"):
    """Route this run's logs to a file in its output directory and tag every
    record with the run name.

    Args:
        out_dir: directory that receives the log file
        name: run name bound into every log record
        log_filename: name of the log file inside out_dir
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sink_id = logger.add(out_dir / log_filename, level="INFO", enqueue=False)
    try:
        with logger.contextualize(run=name):
            logger.info("starting run {} (v{})", name, VERSION)
            yield name
    finally:
        logger.remove(sink_id)


def source_revision():
    """Describe the git checkout this code runs from, or None outside a repo."""
    try:
        import git
    except ImportError:
        # GitPython refuses to import without a git executable
        return None

    try:
        repo = git.Repo(search_parent_directories=True)
    except git.exc.InvalidGitRepositoryError:
        return None

    if not repo.head.is_valid():
        return None

    tags = [
        tag.name
        for tag in repo.tags
        if tag.commit.hexsha == repo.head.commit.hexsha
        and re.match(r"v\d+\.\d+\.\d+", tag.name)
    ]
    return {
        "commit": repo.head.commit.hexsha,
        "tag": tags[0] if tags else None,
        "dirty": bool(repo.index.diff(None)),
    }


def check_for_repo_versioned_without_uncommited_changes():
    """If the current commit has unstaged/uncommited changes or lacks a version
    tag, raise UsageError. Outside a git checkout there is nothing to check."""
    revision = source_revision()
    if revision is None:
        return False
    if revision["tag"] is None:
        raise UsageError("no version tag on the current commit (require_clean_repo=true)")
    if revision["dirty"]:
        raise UsageError("uncommitted changes (require_clean_repo=true)")
    return True
