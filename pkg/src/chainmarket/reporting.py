"""Result bundles: config parsing, persistent files, and report tables.

A simulation run produces one bundle directory named by a digest of its
resolved configuration, holding the manifest, the block ledger, and the
transaction records. `analyze` and `report` derive tables from those files
alone, so re-running them is idempotent byte for byte. All files are
comma-separated text with a header row; numbers are written at full precision
with '.' as the decimal separator regardless of locale.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .chain import BackgroundModel, ChainConfig, DistSpec
from .stats import QuintileReport, build_report
from .workload import (
    PHASE_ENFORCEMENT,
    PHASE_PRELIMINARY,
    PHASES,
    BlockRow,
    ExperimentPlan,
    FeePolicy,
    RunManifest,
    SummaryRow,
    TxRecord,
    run_phase1,
    run_phase2,
    summarize_by_batch,
)

FEATURES = ("gas_price_gwei", "block_size_kb", "block_tx_count")

TX_RECORD_COLUMNS = (
    "phase",
    "function",
    "batch_size",
    "round",
    "tx_id",
    "submit_time_s",
    "confirm_time_s",
    "latency_s",
    "gas_used",
    "gas_price_gwei",
    "block_number",
    "block_size_kb",
    "block_tx_count",
)

BLOCK_COLUMNS = (
    "phase",
    "batch_size",
    "round",
    "number",
    "timestamp",
    "proposer",
    "gas_used",
    "byte_size",
    "base_fee",
    "tx_count",
)


class ConfigError(Exception):
    pass


class IncompleteBundle(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration files
# ---------------------------------------------------------------------------

def default_config() -> dict:
    """The shipped default configuration: the full two-phase sweep."""
    return {
        "seed": 2024,
        "chain": {
            "slot_duration_s": 12.0,
            "block_gas_limit": 30_000_000,
            "block_gas_target": 15_000_000,
            "base_fee_initial_gwei": 8.0,
            "base_fee_max_change_fraction": 0.125,
            "finality_depth": 1,
            "inclusion_cutoff_s": 6.0,
        },
        "background": {
            "arrival_rate": 130.0,
            "gas_dist": {"kind": "uniform", "a": 21_000.0, "b": 300_000.0},
            "tip_dist": {"kind": "lognormal", "a": math.log(2.0), "b": 1.0},
            "payload_dist": {"kind": "lognormal", "a": 7.2, "b": 0.55},
            # Ambient load is calibrated per phase; overrides merge over the
            # base keys above.
            "preliminary_agreement": {},
            "enforcement": {"arrival_rate": 172.0},
        },
        "workload": {
            "phase": "both",
            "batch_sizes": [2, 10, 18, 26, 34, 42, 50],
            "rounds": 10,
            "total_accounts": 100,
            "services_per_provider": 5,
            "warmup_slots": 4,
        },
        "fees": {
            "mode": "network_suggested",
            "suggested_tip_quantile": 0.03,
            "fixed_tip": 2.0,
        },
        "contracts": {"max_breach": 3, "fidelity_fee": 1, "reset_on_penalty": False},
    }


def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _parse_dist(raw: dict, where: str) -> DistSpec:
    _require_keys(raw, {"kind", "a", "b"}, where)
    try:
        return DistSpec(raw["kind"], float(raw["a"]), float(raw.get("b", 0.0)))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad distribution in {where}: {exc}") from exc


@dataclass(frozen=True)
class ResolvedConfig:
    """A fully resolved run configuration plus its canonical form."""

    seed: int
    phases: tuple[str, ...]
    plans: dict  # phase -> ExperimentPlan
    canonical: dict

    @property
    def digest(self) -> str:
        payload = json.dumps(self.canonical, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def resolve_config(
    raw: dict, seed_override: int | None = None, phase_filter: str | None = None
) -> ResolvedConfig:
    """Merge a raw config dict over the defaults and build per-phase plans."""
    merged = default_config()
    _require_keys(raw, set(merged), "config")
    for section, value in raw.items():
        if isinstance(merged[section], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section {section!r} must be an object")
            _require_keys(value, set(merged[section]), section)
            merged[section].update(value)
        else:
            merged[section] = value
    if seed_override is not None:
        merged["seed"] = int(seed_override)

    phase = merged["workload"]["phase"]
    if phase == "both":
        phases = PHASES
    elif phase in PHASES:
        phases = (phase,)
    else:
        raise ConfigError(f"workload.phase must be one of {PHASES + ('both',)}")
    if phase_filter is not None:
        if phase_filter not in PHASES:
            raise ConfigError(f"phase filter must be one of {PHASES}")
        phases = (phase_filter,)
        merged["workload"]["phase"] = phase_filter

    def _background_for(phase_name: str) -> BackgroundModel:
        base = {
            k: v
            for k, v in merged["background"].items()
            if k not in PHASES
        }
        override = merged["background"].get(phase_name, {})
        _require_keys(override, set(base), f"background.{phase_name}")
        section = {**base, **override}
        return BackgroundModel(
            arrival_rate=float(section["arrival_rate"]),
            gas_usage_dist=_parse_dist(section["gas_dist"], "gas_dist"),
            tip_dist=_parse_dist(section["tip_dist"], "tip_dist"),
            payload_bytes_dist=_parse_dist(section["payload_dist"], "payload_dist"),
        )

    def _chain_for(phase_name: str) -> ChainConfig:
        return ChainConfig(
            slot_duration_s=float(merged["chain"]["slot_duration_s"]),
            block_gas_limit=int(merged["chain"]["block_gas_limit"]),
            block_gas_target=int(merged["chain"]["block_gas_target"]),
            base_fee_initial_gwei=float(merged["chain"]["base_fee_initial_gwei"]),
            base_fee_max_change_fraction=float(
                merged["chain"]["base_fee_max_change_fraction"]
            ),
            finality_depth=int(merged["chain"]["finality_depth"]),
            inclusion_cutoff_s=float(merged["chain"]["inclusion_cutoff_s"]),
            background=_background_for(phase_name),
        )

    try:
        fees = FeePolicy(
            mode=merged["fees"]["mode"],
            suggested_tip_quantile=float(merged["fees"]["suggested_tip_quantile"]),
            fixed_tip=float(merged["fees"]["fixed_tip"]),
        )
        plans = {
            p: ExperimentPlan(
                phase=p,
                batch_sizes=tuple(int(b) for b in merged["workload"]["batch_sizes"]),
                rounds=int(merged["workload"]["rounds"]),
                total_accounts=int(merged["workload"]["total_accounts"]),
                services_per_provider=int(merged["workload"]["services_per_provider"]),
                chain=_chain_for(p),
                fees=fees,
                max_breach=int(merged["contracts"]["max_breach"]),
                fidelity_fee=int(merged["contracts"]["fidelity_fee"]),
                reset_on_penalty=bool(merged["contracts"]["reset_on_penalty"]),
                seed=int(merged["seed"]),
                warmup_slots=int(merged["workload"]["warmup_slots"]),
            )
            for p in phases
        }
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    return ResolvedConfig(
        seed=int(merged["seed"]), phases=phases, plans=plans, canonical=merged
    )


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


# ---------------------------------------------------------------------------
# Number formatting and CSV primitives
# ---------------------------------------------------------------------------

def fmt(value) -> str:
    """Full-precision, locale-independent text for one field."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(path: Path, columns: tuple[str, ...], rows: list[tuple]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    text = path.read_text().rstrip("\n")
    lines = text.split("\n")
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------

@dataclass
class ResultBundle:
    directory: Path
    manifest: RunManifest
    records: list[TxRecord]
    blocks: list[BlockRow]


def run_simulation(resolved: ResolvedConfig) -> tuple[list[TxRecord], list[BlockRow]]:
    """Execute every configured phase and return records plus the block ledger."""
    records: list[TxRecord] = []
    blocks: list[BlockRow] = []
    for phase in resolved.phases:
        plan = resolved.plans[phase]
        runner = run_phase1 if phase == PHASE_PRELIMINARY else run_phase2
        records.extend(runner(plan, block_sink=blocks))
    return records, blocks


def write_bundle(
    out_dir: str | Path, resolved: ResolvedConfig,
    records: list[TxRecord], blocks: list[BlockRow],
) -> ResultBundle:
    digest = resolved.digest
    directory = Path(out_dir) / f"run-{digest[:12]}"
    directory.mkdir(parents=True, exist_ok=True)

    sim_end = max((b.timestamp for b in blocks), default=0.0)
    manifest = RunManifest(
        seed=resolved.seed,
        config_digest=digest,
        code_version=__version__,
        sim_time_start=0.0,
        sim_time_end=sim_end,
        record_count=len(records),
        block_count=len(blocks),
    )
    (directory / "manifest.json").write_text(
        json.dumps(
            {
                "seed": manifest.seed,
                "config_digest": manifest.config_digest,
                "code_version": manifest.code_version,
                "sim_time_start": manifest.sim_time_start,
                "sim_time_end": manifest.sim_time_end,
                "record_count": manifest.record_count,
                "block_count": manifest.block_count,
                "config": resolved.canonical,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    write_table(
        directory / "tx_records.csv",
        TX_RECORD_COLUMNS,
        [tuple(getattr(r, c) for c in TX_RECORD_COLUMNS) for r in records],
    )
    write_table(
        directory / "blocks.csv",
        BLOCK_COLUMNS,
        [tuple(getattr(b, c) for c in BLOCK_COLUMNS) for b in blocks],
    )
    return ResultBundle(directory=directory, manifest=manifest, records=records, blocks=blocks)


def read_bundle(directory: str | Path) -> ResultBundle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    records_path = directory / "tx_records.csv"
    blocks_path = directory / "blocks.csv"
    missing = [p.name for p in (manifest_path, records_path, blocks_path) if not p.exists()]
    if missing:
        raise IncompleteBundle(f"{directory}: missing {missing}")

    raw = json.loads(manifest_path.read_text())
    manifest = RunManifest(
        seed=raw["seed"],
        config_digest=raw["config_digest"],
        code_version=raw["code_version"],
        sim_time_start=raw["sim_time_start"],
        sim_time_end=raw["sim_time_end"],
        record_count=raw["record_count"],
        block_count=raw["block_count"],
    )

    header, rows = read_table(records_path)
    if tuple(header) != TX_RECORD_COLUMNS:
        raise IncompleteBundle(f"{records_path}: unexpected columns {header}")
    records = [
        TxRecord(
            phase=r[0],
            function=r[1],
            batch_size=int(r[2]),
            round=int(r[3]),
            tx_id=int(r[4]),
            submit_time_s=float(r[5]),
            confirm_time_s=float(r[6]),
            latency_s=float(r[7]),
            gas_used=int(r[8]),
            gas_price_gwei=float(r[9]),
            block_number=int(r[10]),
            block_size_kb=float(r[11]),
            block_tx_count=int(r[12]),
        )
        for r in rows
    ]

    header, rows = read_table(blocks_path)
    if tuple(header) != BLOCK_COLUMNS:
        raise IncompleteBundle(f"{blocks_path}: unexpected columns {header}")
    blocks = [
        BlockRow(
            phase=r[0],
            batch_size=int(r[1]),
            round=int(r[2]),
            number=int(r[3]),
            timestamp=float(r[4]),
            proposer=r[5],
            gas_used=int(r[6]),
            byte_size=int(r[7]),
            base_fee=float(r[8]),
            tx_count=int(r[9]),
        )
        for r in rows
    ]
    if manifest.record_count != len(records) or manifest.block_count != len(blocks):
        raise IncompleteBundle(f"{directory}: manifest counts disagree with files")
    return ResultBundle(directory=directory, manifest=manifest, records=records, blocks=blocks)


# ---------------------------------------------------------------------------
# Analysis tables (batch summaries, Kruskal-Wallis, Dunn + Cliff)
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = (
    "function",
    "batch_size",
    "n",
    "tx_count_mean",
    "tx_count_std",
    "block_size_kb_mean",
    "block_size_kb_std",
    "gas_price_gwei_mean",
    "gas_price_gwei_std",
    "latency_s_mean",
    "latency_s_std",
)

KW_COLUMNS = ("feature", "h_statistic", "df", "p_value", "tie_correction", "interpretation")

DUNN_COLUMNS = (
    "comparison",
    "significant",
    "p_adjusted",
    "z",
    "p_raw",
    "cliffs_delta",
    "magnitude",
)

BOX_BATCH_COLUMNS = (
    "phase", "function", "batch_size", "n",
    "median", "q1", "q3", "whisker_lo", "whisker_hi", "outliers",
)

BOX_QUINTILE_COLUMNS = (
    "phase", "feature", "quintile", "n",
    "median", "q1", "q3", "whisker_lo", "whisker_hi", "outliers",
)


def _phase_records(records: list[TxRecord], phase: str) -> list[TxRecord]:
    return [r for r in records if r.phase == phase]


def _summary_rows(rows: list[SummaryRow]) -> list[tuple]:
    return [tuple(getattr(r, c) for c in SUMMARY_COLUMNS) for r in rows]


def quintile_reports(records: list[TxRecord], phase: str) -> dict[str, QuintileReport]:
    """One report per feature for a phase's records."""
    subset = _phase_records(records, phase)
    return {feature: build_report(subset, feature) for feature in FEATURES}


def analyze_bundle(bundle: ResultBundle) -> list[Path]:
    """Emit per-phase batch summaries, the KW table, and Dunn/Cliff tables."""
    out = bundle.directory / "analysis"
    out.mkdir(exist_ok=True)
    written: list[Path] = []
    for phase in PHASES:
        subset = _phase_records(bundle.records, phase)
        if not subset:
            continue
        path = out / f"summary_{phase}.csv"
        write_table(path, SUMMARY_COLUMNS, _summary_rows(summarize_by_batch(subset)))
        written.append(path)

        reports = quintile_reports(bundle.records, phase)
        kw_rows = []
        for feature in FEATURES:
            kw = reports[feature].kw
            interpretation = (
                "Significant differences"
                if kw.p_value < 0.05
                else "No significant differences"
            )
            kw_rows.append(
                (feature, kw.h_statistic, kw.df, kw.p_value, kw.tie_correction, interpretation)
            )
        path = out / f"kruskal_wallis_{phase}.csv"
        write_table(path, KW_COLUMNS, kw_rows)
        written.append(path)

        for feature in FEATURES:
            rows = []
            for dunn, cliff in reports[feature].comparisons:
                rows.append(
                    (
                        f"{dunn.pair[0]} vs {dunn.pair[1]}",
                        "Yes" if dunn.significant else "No",
                        dunn.p_adjusted,
                        dunn.z,
                        dunn.p_raw,
                        cliff.delta,
                        cliff.magnitude,
                    )
                )
            path = out / f"dunn_{feature}_{phase}.csv"
            write_table(path, DUNN_COLUMNS, rows)
            written.append(path)
    return written


def report_bundle(bundle: ResultBundle) -> list[Path]:
    """Emit box-plot data per batch and per quintile, plus mean overlays."""
    analysis = bundle.directory / "analysis"
    if not analysis.exists():
        raise IncompleteBundle(f"{bundle.directory}: run analyze before report")
    from .stats import box_summary  # local import keeps module load light

    out = bundle.directory / "report"
    out.mkdir(exist_ok=True)
    written: list[Path] = []
    for phase in PHASES:
        subset = _phase_records(bundle.records, phase)
        if not subset:
            continue

        # Latency boxes per (function, batch): the batch-size figures.
        groups: dict[tuple[str, int], list[float]] = {}
        for r in subset:
            groups.setdefault((r.function, r.batch_size), []).append(r.latency_s)
        keys = sorted(groups, key=lambda k: (k[1], k[0]))
        box_rows, mean_rows = [], []
        for function, batch in keys:
            box = box_summary(groups[(function, batch)])
            box_rows.append(
                (
                    phase, function, batch, box.n,
                    box.median, box.q1, box.q3, box.whisker_lo, box.whisker_hi,
                    ";".join(fmt(o) for o in box.outliers),
                )
            )
            mean_rows.append((phase, function, batch, box.mean))
        path = out / f"latency_by_batch_{phase}.csv"
        write_table(path, BOX_BATCH_COLUMNS, box_rows)
        written.append(path)
        path = out / f"latency_mean_by_batch_{phase}.csv"
        write_table(path, ("phase", "function", "batch_size", "mean_latency_s"), mean_rows)
        written.append(path)

        # Latency boxes per quintile for each feature: the quintile figures.
        reports = quintile_reports(bundle.records, phase)
        box_rows, mean_rows = [], []
        for feature in FEATURES:
            rep = reports[feature]
            for label, box in zip(("Q1", "Q2", "Q3", "Q4", "Q5"), rep.boxes):
                box_rows.append(
                    (
                        phase, feature, label, box.n,
                        box.median, box.q1, box.q3, box.whisker_lo, box.whisker_hi,
                        ";".join(fmt(o) for o in box.outliers),
                    )
                )
                mean_rows.append((phase, feature, label, box.mean))
        path = out / f"latency_by_quintile_{phase}.csv"
        write_table(path, BOX_QUINTILE_COLUMNS, box_rows)
        written.append(path)
        path = out / f"latency_mean_by_quintile_{phase}.csv"
        write_table(
            path, ("phase", "feature", "quintile", "mean_latency_s"), mean_rows
        )
        written.append(path)
    return written
