"""Counter-based random streams.

Every consumer of randomness asks for a generator keyed by
``(seed, stream, block)``. Paths are partitioned into fixed-size blocks that
do not depend on the number of workers, so a run is bit-reproducible no matter
how the blocks are scheduled.
"""

import zlib

import numpy as np

BLOCK_PATHS = 4096


def stream_id(*parts):
    """Map a tuple of labels to a stable 32-bit stream identifier."""
    text = "/".join(str(p) for p in parts)
    return zlib.crc32(text.encode("utf-8"))


def block_generator(seed, stream, block=0):
    """Return a Philox generator for one block of one stream."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(seq))


def block_slices(n_paths, block_paths=BLOCK_PATHS):
    """Split ``range(n_paths)`` into consecutive fixed-size slices."""
    return [slice(lo, min(lo + block_paths, n_paths)) for lo in range(0, n_paths, block_paths)]
