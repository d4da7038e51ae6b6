"""Replicate seeding and order-independent ensemble generation.

Replicate r of a run with master seed m draws from the 64-bit seed
``SeedSequence(m, spawn_key=(stream, r)).generate_state(1, uint64)[0]``.
That mixing is frozen: changing it changes every published artifact.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from bifbm.logging_utils import log_event
from bifbm.paths import Grid, Path

STREAM_PRIMARY = 0
STREAM_X = 1
STREAM_BIFBM = 2
STREAM_REFERENCE = 3
STREAM_HEAT = 4
STREAM_STEP_FUNCTIONS = 5

DEFAULT_BLOCK_SIZE = 64

BlockDraw = Callable[[Sequence[int]], NDArray[np.float64]]


def replicate_seed(master_seed: int, replicate: int, stream: int = STREAM_PRIMARY) -> int:
    if master_seed < 0 or replicate < 0 or stream < 0:
        raise ValueError("seeds, replicate indices and streams must be nonnegative")
    state = np.random.SeedSequence(int(master_seed), spawn_key=(int(stream), int(replicate)))
    return int(state.generate_state(1, dtype=np.uint64)[0])


def replicate_seeds(master_seed: int, n_rep: int, stream: int = STREAM_PRIMARY) -> list[int]:
    return [replicate_seed(master_seed, r, stream) for r in range(n_rep)]


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(slots=True, eq=False)
class Ensemble:
    grid: Grid
    values: NDArray[np.float64]
    seeds: list[int]
    master_seed: int
    stream: int = STREAM_PRIMARY
    process: str = ""
    provenance: list[str] = field(default_factory=list)
    # per-replicate seeds of each independent component a derived ensemble was built from
    component_seeds: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape != (len(self.seeds), len(self.grid)):
            raise ValueError(
                f"ensemble values have shape {self.values.shape}, expected {(len(self.seeds), len(self.grid))}"
            )
        for name, seeds in self.component_seeds.items():
            if len(seeds) != len(self.seeds):
                raise ValueError(f"component {name!r} has {len(seeds)} seeds for {len(self.seeds)} replicates")

    def __len__(self) -> int:
        return len(self.seeds)

    @property
    def n_rep(self) -> int:
        return len(self.seeds)

    def path(self, replicate: int) -> Path:
        return Path(self.grid, self.values[replicate], self.process, self.seeds[replicate], list(self.provenance))

    def column(self, t: float) -> NDArray[np.float64]:
        return self.values[:, self.grid.nearest_index(t)]

    def scaled(self, factor: float) -> "Ensemble":
        return Ensemble(
            self.grid,
            factor * self.values,
            list(self.seeds),
            self.master_seed,
            self.stream,
            self.process,
            [*self.provenance, f"scaled by {factor!r}"],
            {name: list(seeds) for name, seeds in self.component_seeds.items()},
        )


class EnsembleRunner:
    """Runs a block sampler over replicate seeds on a bounded pool of worker threads.

    Seeds are cut into blocks of ``block_size`` before any work is scheduled,
    so the arithmetic done per replicate never depends on ``workers``.
    """

    def __init__(self, workers: int = 1, block_size: int = DEFAULT_BLOCK_SIZE) -> None:
        self.workers = max(1, int(workers))
        self.block_size = max(1, int(block_size))

    def blocks(self, seeds: Sequence[int]) -> list[list[int]]:
        return [list(seeds[i : i + self.block_size]) for i in range(0, len(seeds), self.block_size)]

    def run(self, draw: BlockDraw, seeds: Sequence[int], label: str = "ensemble") -> NDArray[np.float64]:
        blocks = self.blocks(seeds)
        if not blocks:
            raise ValueError("ensemble needs at least one replicate")
        if self.workers == 1 or len(blocks) == 1:
            parts = [draw(block) for block in blocks]
        else:
            parts = asyncio.run(self._gather(draw, blocks, label))
        log_event(
            "ensemble",
            "run",
            check=label,
            result="ok",
            message=f"replicates={len(seeds)} blocks={len(blocks)} workers={self.workers}",
            level=logging.DEBUG,
        )
        return np.vstack(parts)

    async def _gather(self, draw: BlockDraw, blocks: list[list[int]], label: str) -> list[NDArray[np.float64]]:
        sem = asyncio.Semaphore(self.workers)

        async def one(index: int, block: list[int]) -> NDArray[np.float64]:
            async with sem:
                try:
                    return await asyncio.to_thread(draw, block)
                except Exception as exc:
                    log_event(
                        "ensemble",
                        "block",
                        check=label,
                        result="error",
                        message=f"block={index} {exc}",
                        level=logging.WARNING,
                    )
                    raise

        # gather keeps submission order, so replicate r always lands in row r
        return list(await asyncio.gather(*(one(i, block) for i, block in enumerate(blocks))))

    def ensemble(
        self,
        draw: BlockDraw,
        grid: Grid,
        master_seed: int,
        n_rep: int,
        stream: int = STREAM_PRIMARY,
        process: str = "",
    ) -> Ensemble:
        seeds = replicate_seeds(master_seed, n_rep, stream)
        values = self.run(draw, seeds, label=process or "ensemble")
        return Ensemble(grid, values, seeds, master_seed, stream, process)
