"""
Small helpers shared across pipeline stages.
"""
import hashlib
import logging
import os
from typing import Optional


LOG = logging.getLogger(__name__)

#: Environment variable capping worker parallelism.
THREADS_ENV = "FUSENET_THREADS"


def worker_count(requested: Optional[int] = None) -> Optional[int]:
    """
    Resolve the number of parallel workers to use.

    An explicit positive request wins, otherwise ``FUSENET_THREADS`` is
    consulted. ``None`` means "let ``parallel_map`` decide" (all cores).

    :param requested: Explicitly requested worker count.

    :return: Worker count or None.
    """
    if requested is not None and requested > 0:
        return int(requested)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            LOG.warning("Ignoring non-integer %s value %r", THREADS_ENV, env)
            return None
        if n > 0:
            return n
        LOG.warning("Ignoring non-positive %s value %r", THREADS_ENV, env)
    return None


def stable_seed(text: str) -> int:
    """
    Stable 63-bit seed from a string, independent of ``PYTHONHASHSEED``.

    >>> stable_seed("scan-0001") == stable_seed("scan-0001")
    True
    """
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def blob_sha1(data: bytes) -> str:
    """
    Git-style content hash (``git hash-object``) of a byte string.

    >>> blob_sha1(b"")
    'e69de29bb2d1d6434b8b29ae775ad8c2e48c5391'
    """
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def file_sha1(path: str) -> str:
    with open(path, "rb") as f:
        return blob_sha1(f.read())
