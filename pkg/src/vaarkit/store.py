"""Campaign manifests and the on-disk run / fit / report store."""

from __future__ import annotations

import json
import re
import threading
import zlib
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Iterator, Mapping

import yaml

from .protocol import MAIN_ORDER, ProtocolConfig, SessionRecord, order_label, order_variants, parse_order
from .respondents import BackendConfig


class StoreError(OSError):
    pass


class ManifestError(ValueError):
    pass


class CampaignStore:
    """``runs.jsonl`` (append-only), ``fits/`` and ``reports/`` under one directory."""

    def __init__(self, root: str | Path, create: bool = True):
        self.root = Path(root)
        if create:
            try:
                (self.root / "fits").mkdir(parents=True, exist_ok=True)
                (self.root / "reports").mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StoreError(f"cannot create store at {self.root}: {exc}") from None
        elif not self.root.is_dir():
            raise StoreError(f"store directory {self.root} does not exist")
        self._lock = threading.Lock()

    @property
    def runs_path(self) -> Path:
        return self.root / "runs.jsonl"

    def append(self, record: SessionRecord) -> None:
        line = json.dumps(record.to_dict(), sort_keys=True, ensure_ascii=False)
        with self._lock:
            with open(self.runs_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def records(self) -> Iterator[SessionRecord]:
        if not self.runs_path.exists():
            return
        try:
            fh = open(self.runs_path, encoding="utf-8")
        except OSError as exc:
            raise StoreError(f"cannot read {self.runs_path}: {exc}") from None
        with fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    yield SessionRecord.from_dict(json.loads(line))
                except (json.JSONDecodeError, TypeError, ValueError) as exc:
                    raise StoreError(f"{self.runs_path}:{lineno}: bad record ({exc})") from None

    def record_ids(self) -> set[str]:
        return {r.record_id for r in self.records()}

    def _write(self, sub: str, name: str, text: str) -> Path:
        path = self.root / sub / name
        path.write_text(text, encoding="utf-8")
        return path

    def write_fit(self, name: str, payload: Mapping) -> Path:
        return self._write("fits", name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def read_fit(self, name: str) -> dict:
        path = self.root / "fits" / name
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise StoreError(f"{path} not found; run the fit command first") from None

    def write_report(self, name: str, text: str) -> Path:
        return self._write("reports", name, text)

    def read_report(self, name: str) -> str:
        return (self.root / "reports" / name).read_text(encoding="utf-8")


def safe_name(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", label).strip("_") or "group"


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Cell:
    label: str
    backend: BackendConfig
    config: ProtocolConfig
    order_label: str


@dataclass
class CampaignManifest:
    campaign_id: str
    backends: list[BackendConfig]
    orders: list[tuple[str, ...]] = field(default_factory=lambda: [MAIN_ORDER])
    temperatures: list[float] = field(default_factory=lambda: [0.7])
    modes: list[str] = field(default_factory=lambda: ["contextual"])
    variants: list[str] = field(default_factory=lambda: ["baseline"])
    n_runs: int = 100
    stateless_runs: int = 50
    history_depth: int = 3
    retries: int = 2
    parallelism: int = 1
    seed: int = 0
    store: str | None = None
    base_dir: Path | None = None

    def __post_init__(self):
        names = [b.name for b in self.backends]
        if not names:
            raise ManifestError("manifest lists no backends")
        if len(set(names)) != len(names):
            raise ManifestError("backend names must be unique")
        labels = [c.label for c in self.cells()]
        if len(set(labels)) != len(labels):
            raise ManifestError("grid cells do not resolve to unique labels")

    def cells(self) -> list[Cell]:
        cells = []
        for b in self.backends:
            for mode in self.modes:
                orders = self.orders if mode == "contextual" else [MAIN_ORDER]
                for order, temp, variant in product(orders, self.temperatures, self.variants):
                    cfg = ProtocolConfig(
                        order=order,
                        temperature=float(temp),
                        n_runs=self.n_runs if mode == "contextual" else self.stateless_runs,
                        history_depth=self.history_depth,
                        mode=mode,
                        variant=variant,
                        retries=self.retries,
                        parallelism=self.parallelism,
                    )
                    label = cell_label(b.name, cfg)
                    cfg = ProtocolConfig(**{**cfg.to_dict(), "seed": cell_seed(self.seed, label)})
                    cells.append(Cell(label, b, cfg, order_label(order)))
        return cells


def cell_label(backend: str, cfg: ProtocolConfig) -> str:
    parts = [backend]
    parts.append("stateless" if cfg.mode == "stateless" else order_label(cfg.order))
    parts.append(f"t{cfg.temperature:g}")
    if cfg.variant != "baseline":
        parts.append(cfg.variant)
    return ":".join(parts)


def cell_seed(seed: int, label: str) -> int:
    """Stable per-cell base seed, independent of the grid's other cells."""
    return (int(seed) * 1_000_003 + zlib.crc32(label.encode("utf-8")) * 1000) % (2**31 - 1)


_MANIFEST_KEYS = {
    "campaign_id", "backends", "orders", "temperatures", "modes", "variants", "n_runs", "stateless_runs",
    "history_depth", "retries", "parallelism", "seed", "store",
}


def manifest_from_dict(d: Mapping[str, Any], base_dir: Path | None = None) -> CampaignManifest:
    extra = set(d) - _MANIFEST_KEYS
    if extra:
        raise ManifestError(f"unknown manifest key(s): {', '.join(sorted(extra))}")
    try:
        backends = [BackendConfig.from_dict(b) for b in d.get("backends") or []]
        orders = d.get("orders", [list(MAIN_ORDER)])
        if orders == "all":
            orders = order_variants()
        kw = {k: d[k] for k in ("temperatures", "modes", "variants", "n_runs", "stateless_runs",
                                 "history_depth", "retries", "parallelism", "seed", "store") if k in d}
        return CampaignManifest(
            campaign_id=str(d.get("campaign_id", "campaign")),
            backends=backends,
            orders=[parse_order(o) for o in orders],
            base_dir=base_dir,
            **kw,
        )
    except (TypeError, ValueError) as exc:
        raise ManifestError(str(exc)) from None


def load_manifest(path: str | Path) -> CampaignManifest:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ManifestError(f"manifest {path} is not valid YAML/JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ManifestError(f"manifest {path} must be a mapping")
    return manifest_from_dict(data, path.parent)
