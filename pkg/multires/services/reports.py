import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Type, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from multires.core.exceptions import ConflictException, NotFoundException, ValidationException
from multires.models.chain import ChainDraws
from multires.models.linkage import Dataset
from multires.schemas.reports import (
    FunctionSummaryRow,
    HoldoutReport,
    HoldoutRow,
    PseudoStatistic,
    RollupRow,
    TruthCompareRow,
)
from multires.services.chain_store import MANIFEST_FILE, read_chain
from multires.services.estimands import (
    fit_report,
    function_summary_rows,
    pseudo_statistics,
    rollup,
    truth_compare,
)
from multires.services.linkage import LinkageService, load_dataset
from multires.services.synth import read_truth

logger = logging.getLogger(__name__)

ALL_COUNTIES = "all"


def write_rows(rows: Sequence[BaseModel], path: Union[str, Path], schema: Type[BaseModel]) -> Path:
    """CSV with one column per schema field, in declaration order."""
    path = Path(path)
    columns = list(schema.model_fields)
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=columns)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def read_grouping(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise NotFoundException(f"🔍 missing grouping file: {path}", resource_type="grouping", resource_id=str(path))
    frame = pd.read_csv(path, dtype=str)
    missing = [c for c in ("county_id", "group_id") if c not in frame.columns]
    if missing:
        raise ValidationException(
            f"schema violation in {path.name}: missing column(s) {', '.join(missing)}", field=missing[0]
        )
    if frame["county_id"].duplicated().any():
        county = frame.loc[frame["county_id"].duplicated(), "county_id"].iloc[0]
        raise ValidationException(f"county {county} appears in more than one group", field="county_id")
    return dict(zip(frame["county_id"], frame["group_id"]))


def chain_manifest(chain_dir: Union[str, Path]) -> Dict[str, object]:
    path = Path(chain_dir) / MANIFEST_FILE
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


class SummaryService:
    """Turns one chain directory into summaries, pseudo-statistics, roll-ups and fit statistics."""

    def __init__(self, chain_dir: Union[str, Path], dataset: Dataset):
        self.chain_dir = Path(chain_dir)
        self.dataset = dataset
        manifest = chain_manifest(self.chain_dir)
        period_mean = bool(manifest.get("config", {}).get("period_mean", False))
        self.linkage = LinkageService(dataset, period_mean=period_mean)
        self.chain: ChainDraws = read_chain(self.chain_dir)
        if self.chain.county_ids != list(dataset.graph.counties):
            raise ConflictException(
                "chain counties do not match the dataset", conflicting_field="county_id"
            )

    @classmethod
    def load(cls, chain_dir: Union[str, Path], data: Union[str, Path]) -> "SummaryService":
        """Read the bundle with the intercept choice the chain was fitted with."""
        manifest = chain_manifest(chain_dir)
        dataset = load_dataset(data, intercept=bool(manifest.get("has_intercept", True)))
        return cls(chain_dir, dataset)

    def summarize(
        self,
        out_dir: Union[str, Path],
        interval: str = "equal-tail",
        county: Optional[str] = None,
        pseudo: bool = True,
        grouping: Optional[Dict[str, str]] = None,
        min_draws: int = 30,
        clip_percentile: float = 99.5,
        seed: Optional[int] = None,
        truth_dir: Optional[Union[str, Path]] = None,
    ) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if county is not None and county not in self.chain.county_ids:
            raise NotFoundException(f"🔍 unknown county {county}", resource_type="county", resource_id=county)

        written = [
            write_rows(
                function_summary_rows(self.chain, min_draws, interval, county),
                out_dir / "summaries.csv",
                FunctionSummaryRow,
            )
        ]
        if pseudo:
            if self.chain.bmean is None:
                raise NotFoundException(
                    "🔍 bmean.csv is missing; pseudo-statistics need posterior mean coefficients",
                    resource_type="chain",
                    resource_id="bmean.csv",
                )
            rows = pseudo_statistics(self.chain.bmean, self.linkage, county)
            written.append(write_rows(rows, out_dir / "pseudo.csv", PseudoStatistic))

        if grouping is None:
            grouping = {c: ALL_COUNTIES for c in self.dataset.graph.counties}
        rows = rollup(self.chain.f, self.linkage, grouping, interval)
        written.append(write_rows(rows, out_dir / "rollup.csv", RollupRow))

        if truth_dir is not None:
            f_true, tiers = read_truth(truth_dir, self.dataset)
            rows = truth_compare(self.chain.f, self.linkage, f_true, tiers, interval)
            written.append(write_rows(rows, out_dir / "truth_compare.csv", TruthCompareRow))
            overall = rows[0]
            logger.info(
                f"🎯 Against truth: coverage {overall.coverage:.1%}, RMSE {overall.rmse:.4g} "
                f"over {overall.n_cells} county-years"
            )

        rng = np.random.default_rng(seed) if seed is not None else None
        report = fit_report(self.chain, clip_percentile, rng)
        fit_path = out_dir / "fit.json"
        fit_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
        written.append(fit_path)
        logger.info(
            f"✅ Summaries written: -LPML={report.neg_lpml:.3f}, DIC3={report.dic3:.3f}, "
            f"Dbar={report.mean_deviance:.3f}"
        )
        return written


def write_holdout(report: HoldoutReport, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    path = write_rows(report.rows, out_dir / "holdout.csv", HoldoutRow)
    (out_dir / "holdout.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path
