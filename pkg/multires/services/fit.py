import logging
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from multires import __version__
from multires.core.exceptions import NumericalException
from multires.core.parallel import WorkerPool
from multires.models.linkage import Dataset
from multires.schemas.chain import ChainConfig, RunManifest, SweepTiming
from multires.schemas.linkage import DatasetPaths
from multires.services.chain_store import (
    CHECKPOINT_FILE,
    MANIFEST_FILE,
    ChainWriter,
    load_checkpoint,
    save_checkpoint,
    write_bmean,
)
from multires.services.linkage import LinkageService, dataset_fingerprint
from multires.services.samplers import base_measure, gibbs_sweep, initial_state

logger = logging.getLogger(__name__)

STATE_DUMP_FILE = "state_dump.json"


class FitService:
    """Runs one chain and keeps its output directory consistent."""

    def __init__(
        self,
        dataset: Dataset,
        config: ChainConfig,
        out_dir: Union[str, Path],
        paths: Optional[DatasetPaths] = None,
        command: str = "fit",
    ):
        self.dataset = dataset
        self.config = config
        self.out_dir = Path(out_dir)
        self.paths = paths
        self.command = command
        self.linkage = LinkageService(dataset, period_mean=config.period_mean)
        self.county_ids: List[str] = list(dataset.graph.counties)

    def run(
        self, resume: Optional[Union[str, Path]] = None, max_sweeps: Optional[int] = None
    ) -> RunManifest:
        config = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        started = datetime.now(timezone.utc)
        clock = time.perf_counter()

        if resume is not None:
            state, rng, b_sum, n_kept = load_checkpoint(resume, config, self.county_ids)
            logger.info(f"🔁 Resuming at sweep {state.sweep} with {n_kept} retained draws")
            resume_path = Path(resume)
            writer = ChainWriter(
                self.out_dir,
                self.linkage,
                config.mode,
                resume_draws=n_kept,
                resume_dir=resume_path if resume_path.is_dir() else resume_path.parent,
            )
        else:
            rng = np.random.default_rng(config.seed)
            state = initial_state(self.linkage, config)
            b_sum = np.zeros_like(state.coeffs.B)
            n_kept = 0
            writer = ChainWriter(self.out_dir, self.linkage, config.mode)

        total = config.total_sweeps
        logger.info(
            f"🚀 Fitting {config.mode.value} model: N={self.dataset.N}, T={self.dataset.T}, "
            f"P={self.dataset.P}, {total} sweeps ({config.n_burn} burn-in, "
            f"{config.n_keep} kept, thin {config.thin})"
        )
        base = base_measure(self.dataset.P)
        durations = []
        done = 0
        with WorkerPool(config.workers) as pool, writer:
            while state.sweep < total and (max_sweeps is None or done < max_sweeps):
                tick = time.perf_counter()
                try:
                    gibbs_sweep(state, self.linkage, config, rng, pool=pool, base=base)
                except NumericalException as exc:
                    dump = save_checkpoint(
                        self.out_dir / STATE_DUMP_FILE, state, rng, config, b_sum, n_kept, self.county_ids
                    )
                    exc.details["state_dump"] = str(dump)
                    raise
                durations.append(time.perf_counter() - tick)
                done += 1

                if config.is_retained(state.sweep):
                    n_kept += 1
                    b_sum += state.coeffs.B
                    writer.write_draw(n_kept, state)
                if state.sweep % config.progress_every == 0:
                    writer.flush()
                    logger.info(
                        f"🔁 Sweep {state.sweep}/{total}: M={state.clusters.M}, "
                        f"alpha={state.clusters.alpha:.3f}"
                    )

        save_checkpoint(
            self.out_dir / CHECKPOINT_FILE, state, rng, config, b_sum, n_kept, self.county_ids
        )
        write_bmean(self.out_dir, b_sum, n_kept, self.linkage)
        vanished = state.diagnostics.get("vanished_weights", 0)
        if vanished:
            logger.warning(f"⚠️ All assignment weights vanished {vanished} times; labels kept")

        manifest = RunManifest(
            software="multires",
            version=__version__,
            command=self.command,
            config=config.model_dump(mode="json"),
            seed=config.seed,
            input_hashes=dataset_fingerprint(self.paths) if self.paths else {},
            started_at=started.isoformat(),
            wall_clock_seconds=time.perf_counter() - clock,
            timing=_timing(durations),
            completed_sweeps=state.sweep,
            retained_draws=n_kept,
            county_ids=self.county_ids,
            has_intercept=self.dataset.has_intercept,
            resumed_from=str(resume) if resume is not None else None,
        )
        (self.out_dir / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        if state.sweep < total:
            logger.info(f"⏸️ Stopped at sweep {state.sweep}/{total}; resume from {CHECKPOINT_FILE}")
        else:
            logger.info(f"✅ Fit complete: {n_kept} draws written to {self.out_dir}")
        return manifest


def _timing(durations: List[float]) -> SweepTiming:
    if not durations:
        return SweepTiming()
    values = np.asarray(durations)
    return SweepTiming(
        sweeps=len(values),
        mean_seconds=float(values.mean()),
        max_seconds=float(values.max()),
        total_seconds=float(values.sum()),
    )
