"""Child-seed derivation.

Every consumer draws from ``SeedSequence([master, stream, *extra])`` so data
generation and training never share a stream.  The constants below are part
of the reproducibility contract; changing one changes every output.
"""
import numpy as np

STREAMS = {
    "suite": 101,
    "split": 102,
    "assign": 103,
    "init": 201,
    "shuffle": 202,
}


def child_seed(master: int, stream: str, *extra: int) -> int:
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, STREAMS[stream], *(int(e) for e in extra)])
    return int(ss.generate_state(1)[0])


def child_rng(master: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, stream, *extra))
