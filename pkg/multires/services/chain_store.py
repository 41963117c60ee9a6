import csv
import json
import logging
import shutil
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from multires.core.exceptions import ConflictException, NotFoundException, ValidationException
from multires.models.chain import ChainDraws
from multires.models.state import (
    ChainState,
    ClusterLocation,
    ClusterState,
    CoefficientState,
    ResidualCache,
    SamplerMode,
)
from multires.schemas.chain import ChainConfig
from multires.services.linkage import LinkageService
from multires.services.mixture import canonical_labels
from multires.services.samplers import log_likelihood_terms

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"
CHAIN_FILE = "chain.csv"
LOGLIK_FILE = "loglik.csv"
CLUSTERS_FILE = "clusters.csv"
COUNTIES_FILE = "counties.csv"
BMEAN_FILE = "bmean.csv"
CHECKPOINT_FILE = "checkpoint.json"
MANIFEST_FILE = "manifest.json"


def observation_ids(linkage: LinkageService) -> List[str]:
    return [f"{o.block}:{o.period}" for o in linkage.dataset.observations]


def _number(value: float) -> str:
    # repr round-trips float64 exactly
    return repr(float(value))


def _require(path: Path):
    if not path.exists():
        raise NotFoundException(
            f"🔍 chain file {path.name} missing from {path.parent}",
            resource_type="chain file",
            resource_id=str(path),
        )


def _truncate_rows(path: Path, keep: int):
    """Keep the header and the first `keep` data rows."""
    _require(path)
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    with open(path, "w", newline="", encoding="utf-8") as handle:
        csv.writer(handle).writerows(rows[: keep + 1])


def _truncate_by_draw(path: Path, keep: int):
    _require(path)
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    kept = rows[:1] + [row for row in rows[1:] if int(row[0]) <= keep]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        csv.writer(handle).writerows(kept)


def _carry_over(source: Path, target: Path):
    """Copy the draw files of an interrupted run into a new chain directory."""
    if source.resolve() == target.resolve():
        return
    for name in (CHAIN_FILE, LOGLIK_FILE, CLUSTERS_FILE, COUNTIES_FILE):
        _require(source / name)
        shutil.copyfile(source / name, target / name)
    logger.info(f"📦 Copied draws of {source} into {target}")


class ChainWriter:
    """Streams retained draws to the chain directory."""

    def __init__(
        self,
        out_dir: Union[str, Path],
        linkage: LinkageService,
        mode: SamplerMode,
        resume_draws: Optional[int] = None,
        resume_dir: Optional[Union[str, Path]] = None,
    ):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.linkage = linkage
        self.mode = SamplerMode(mode)
        dataset = linkage.dataset
        self.counties = list(dataset.graph.counties)
        self.years = list(dataset.grid.years)
        P = dataset.P

        chain_header = ["draw", "sweep", "M", "alpha"]
        chain_header += [f"s_{i + 1}" for i in range(dataset.N)]
        chain_header += [f"f_{i + 1}_{year}" for i in range(dataset.N) for year in self.years]
        cluster_header = ["draw", "cluster", "size", "kappa1", "kappa2", "kappa3"]
        cluster_header += [f"lambda_y_{a + 1}{b + 1}" for a in range(P) for b in range(P)]
        if self.mode == SamplerMode.PPMX:
            cluster_header += [f"lambda_x_{a + 1}{b + 1}" for a in range(P) for b in range(P)]
            cluster_header += ["tau_x", "rho_x"]

        if resume_draws is None:
            pd.DataFrame(
                {"index": range(1, dataset.N + 1), "county_id": self.counties}
            ).to_csv(self.out_dir / COUNTIES_FILE, index=False)
            self._open("w", chain_header, observation_ids(linkage), cluster_header)
        else:
            if resume_dir is not None:
                _carry_over(Path(resume_dir), self.out_dir)
            _truncate_rows(self.out_dir / CHAIN_FILE, resume_draws)
            _truncate_rows(self.out_dir / LOGLIK_FILE, resume_draws)
            _truncate_by_draw(self.out_dir / CLUSTERS_FILE, resume_draws)
            self._open("a", None, None, None)

    def _open(self, file_mode: str, chain_header, loglik_header, cluster_header):
        self._handles = []
        writers = []
        headers = (chain_header, ["draw", *loglik_header] if loglik_header else None, cluster_header)
        for name, header in zip((CHAIN_FILE, LOGLIK_FILE, CLUSTERS_FILE), headers):
            handle = open(self.out_dir / name, file_mode, newline="", encoding="utf-8")
            writer = csv.writer(handle)
            if header:
                writer.writerow(header)
            self._handles.append(handle)
            writers.append(writer)
        self.chain_writer, self.loglik_writer, self.cluster_writer = writers

    def write_draw(self, draw: int, state: ChainState):
        clusters = state.clusters
        labels = canonical_labels(clusters.labels)
        f = state.coeffs.functions(self.linkage.X)
        self.chain_writer.writerow(
            [draw, state.sweep, clusters.M, _number(clusters.alpha)]
            + [int(s) for s in labels]
            + [_number(v) for v in f.ravel()]
        )
        loglik = log_likelihood_terms(state.cache.fitted, self.linkage)
        self.loglik_writer.writerow([draw, *(_number(v) for v in loglik)])

        # canonical cluster k is the internal label of the k-th first occurrence
        order = []
        for s in clusters.labels:
            if int(s) not in order:
                order.append(int(s))
        counts = clusters.counts
        for k, m in enumerate(order, start=1):
            location = clusters.locations[m]
            row = [draw, k, int(counts[m]), *(_number(v) for v in location.kappa)]
            row += [_number(v) for v in np.ravel(location.lambda_y)]
            if self.mode == SamplerMode.PPMX:
                row += [_number(v) for v in np.ravel(location.lambda_x)]
                row += [_number(location.tau_x), _number(location.rho_x)]
            self.cluster_writer.writerow(row)

    def flush(self):
        for handle in self._handles:
            handle.flush()

    def close(self):
        for handle in self._handles:
            handle.close()
        self._handles = []

    def __enter__(self) -> "ChainWriter":
        return self

    def __exit__(self, *exc_info):
        self.close()


def write_bmean(out_dir: Union[str, Path], b_sum: np.ndarray, n_kept: int, linkage: LinkageService) -> Path:
    """Posterior mean coefficients as county_id, year, coefficient, value."""
    path = Path(out_dir) / BMEAN_FILE
    if n_kept == 0:
        return path
    mean = b_sum / n_kept
    dataset = linkage.dataset
    rows = [
        (county, year, p, _number(mean[i, p, j]))
        for i, county in enumerate(dataset.graph.counties)
        for p in range(dataset.P)
        for j, year in enumerate(dataset.grid.years)
    ]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["county_id", "year", "coefficient", "value"])
        writer.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _array(value) -> Optional[list]:
    return None if value is None else np.asarray(value, dtype=float).tolist()


def _location_to_dict(location: ClusterLocation) -> Dict[str, Any]:
    return {
        "lambda_y": _array(location.lambda_y),
        "kappa": _array(location.kappa),
        "lambda_x": _array(location.lambda_x),
        "tau_x": location.tau_x,
        "rho_x": location.rho_x,
    }


def _location_from_dict(data: Dict[str, Any]) -> ClusterLocation:
    return ClusterLocation(
        lambda_y=np.array(data["lambda_y"], dtype=float),
        kappa=np.array(data["kappa"], dtype=float),
        lambda_x=None if data["lambda_x"] is None else np.array(data["lambda_x"], dtype=float),
        tau_x=data["tau_x"],
        rho_x=data["rho_x"],
    )


def save_checkpoint(
    path: Union[str, Path],
    state: ChainState,
    rng: np.random.Generator,
    config: ChainConfig,
    b_sum: np.ndarray,
    n_kept: int,
    county_ids: List[str],
) -> Path:
    """Full chain state as JSON, written atomically."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config.reproducibility_key(),
        "county_ids": list(county_ids),
        "sweep": state.sweep,
        "n_kept": n_kept,
        "rng": rng.bit_generator.state,
        "b_sum": _array(b_sum),
        "diagnostics": state.diagnostics,
        "state": {
            "B": _array(state.coeffs.B),
            "delta": _array(state.coeffs.delta),
            "h_x": _array(state.coeffs.h_x),
            "labels": state.clusters.labels.tolist(),
            "alpha": state.clusters.alpha,
            "mode": state.clusters.mode.value,
            "locations": [_location_to_dict(loc) for loc in state.clusters.locations],
            "fitted": _array(state.cache.fitted),
        },
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload), encoding="utf-8")
    tmp.replace(path)
    return path


def load_checkpoint(
    path: Union[str, Path], config: ChainConfig, county_ids: List[str]
) -> Tuple[ChainState, np.random.Generator, np.ndarray, int]:
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    if not path.exists():
        raise NotFoundException(
            f"🔍 checkpoint not found: {path}", resource_type="checkpoint", resource_id=str(path)
        )
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationException(f"unreadable checkpoint {path.name}: {exc}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConflictException(
            f"checkpoint format {payload.get('version')} is not supported",
            conflicting_field="version",
        )
    expected = config.reproducibility_key()
    for name, value in expected.items():
        if payload["config"].get(name) != value:
            raise ConflictException(
                f"checkpoint was written with {name}={payload['config'].get(name)}, "
                f"this run uses {value}",
                conflicting_field=name,
            )
    if payload["county_ids"] != list(county_ids):
        raise ConflictException("checkpoint belongs to a different dataset", conflicting_field="county_ids")

    data = payload["state"]
    coeffs = CoefficientState(
        B=np.array(data["B"], dtype=float),
        delta=None if data["delta"] is None else np.array(data["delta"], dtype=float),
        h_x=None if data["h_x"] is None else np.array(data["h_x"], dtype=float),
    )
    clusters = ClusterState(
        labels=np.array(data["labels"], dtype=int),
        locations=[_location_from_dict(loc) for loc in data["locations"]],
        alpha=float(data["alpha"]),
        mode=SamplerMode(data["mode"]),
    )
    state = ChainState(
        coeffs=coeffs,
        clusters=clusters,
        cache=ResidualCache(fitted=np.array(data["fitted"], dtype=float)),
        sweep=int(payload["sweep"]),
        diagnostics=dict(payload.get("diagnostics", {})),
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng"]
    return state, rng, np.array(payload["b_sum"], dtype=float), int(payload["n_kept"])


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------


def read_chain(chain_dir: Union[str, Path]) -> ChainDraws:
    """Rebuild retained draws from the CSV files of one fit."""
    chain_dir = Path(chain_dir)
    for name in (CHAIN_FILE, LOGLIK_FILE, COUNTIES_FILE):
        if not (chain_dir / name).exists():
            raise NotFoundException(
                f"🔍 missing chain file: {chain_dir / name}",
                resource_type="chain",
                resource_id=str(chain_dir / name),
            )
    counties = pd.read_csv(chain_dir / COUNTIES_FILE, dtype={"county_id": str})
    county_ids = counties.sort_values("index")["county_id"].tolist()
    chain = pd.read_csv(chain_dir / CHAIN_FILE)
    loglik = pd.read_csv(chain_dir / LOGLIK_FILE)
    if chain.empty:
        raise ValidationException("chain holds no retained draws", field="draws")

    N = len(county_ids)
    f_columns = [c for c in chain.columns if c.startswith("f_")]
    years = sorted({int(c.rsplit("_", 1)[1]) for c in f_columns})
    T = len(years)
    f = chain[f_columns].to_numpy(dtype=float).reshape(len(chain), N, T)
    labels = chain[[f"s_{i + 1}" for i in range(N)]].to_numpy(dtype=int)

    bmean = None
    if (chain_dir / BMEAN_FILE).exists():
        frame = pd.read_csv(chain_dir / BMEAN_FILE, dtype={"county_id": str})
        P = int(frame["coefficient"].max()) + 1
        bmean = frame["value"].to_numpy(dtype=float).reshape(N, P, T)

    cluster_rows: List[dict] = []
    mode = SamplerMode.BASELINE.value
    if (chain_dir / CLUSTERS_FILE).exists():
        clusters = pd.read_csv(chain_dir / CLUSTERS_FILE)
        cluster_rows = clusters.to_dict(orient="records")
        if "tau_x" in clusters.columns:
            mode = SamplerMode.PPMX.value

    return ChainDraws(
        county_ids=county_ids,
        years=years,
        observation_ids=[c for c in loglik.columns if c != "draw"],
        sweeps=chain["sweep"].to_numpy(dtype=int),
        alpha=chain["alpha"].to_numpy(dtype=float),
        labels=labels,
        f=f,
        loglik=loglik.drop(columns="draw").to_numpy(dtype=float),
        bmean=bmean,
        mode=mode,
        cluster_rows=cluster_rows,
    )
