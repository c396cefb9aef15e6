"""Strength sweeps, sequential method pipelines and Pareto reporting."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .cost import get_cost
from .data import Dataset, get_dataset
from .graph import Graph, build_graph, load_graph, save_graph
from .model import SearchModel
from .mps import MPS
from .pit import PIT
from .supernet import SuperNet
from .train import TrainConfig, evaluate, train_search
from . import checkpoint, zoo

log = logging.getLogger(__name__)

METHODS = ("supernet", "pit", "mps")
DEFAULT_COSTS = {"supernet": "params", "pit": "params", "mps": "params_bytes"}
CSV_COLUMNS = ("lambda", "chain", "accuracy", "params", "params_bytes", "macs", "dominated",
               "export_path", "seconds")


class ConfigError(ValueError):
    pass


def validate_chain(chain: Sequence[str]) -> List[str]:
    """Methods must appear in supernet, pit, mps order, each at most once."""
    chain = list(chain)
    if not chain:
        raise ConfigError("method chain is empty")
    for m in chain:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {list(METHODS)}")
    if len(set(chain)) != len(chain):
        raise ConfigError(f"method chain {chain} repeats a method")
    if "mps" in chain and chain.index("mps") != len(chain) - 1:
        raise ConfigError(f"method chain {chain}: a search stage cannot follow mps "
                          "(a fixed-precision graph cannot be searched again)")
    positions = [METHODS.index(m) for m in chain]
    if positions != sorted(positions):
        raise ConfigError(f"method chain {chain} must follow the order {list(METHODS)}")
    return chain


@dataclass
class ExperimentConfig:
    """Serialized description of a sweep or pipeline.

    ``seed_graph`` is either a name from :data:`forge.zoo.SEEDS`, a path to a
    graph JSON description, or a directory written by
    :func:`forge.graph.save_graph`.
    """
    task: str = "shapes16"
    seed_graph: str = "seed_cnn"
    chain: List[str] = field(default_factory=lambda: ["pit"])
    costs: List[str] = field(default_factory=lambda: ["params", "params_bytes", "macs"])
    regularizer: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_COSTS))
    lambdas: List[float] = field(default_factory=lambda: [1e-2, 1e-4, 1e-6, 1e-8])
    epochs: int = 20
    finetune_epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    arch_lr: float = 1e-2
    warmup: float = 0.1
    seed: int = 0
    dataset_sizes: List[int] = field(default_factory=lambda: [2000, 500, 500])
    export_dir: str = "runs"
    options: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        self.chain = validate_chain(self.chain)
        if not self.lambdas:
            raise ConfigError("lambdas must list at least one strength")
        for lam in self.lambdas:
            if not isinstance(lam, (int, float)) or lam < 0 or not math.isfinite(lam):
                raise ConfigError(f"invalid strength {lam!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.finetune_epochs < 0:
            raise ConfigError("epochs and batch_size must be positive")
        if len(self.dataset_sizes) != 3:
            raise ConfigError("dataset_sizes must give train, val and test sizes")
        for m in self.options:
            if m not in METHODS:
                raise ConfigError(f"options given for unknown method {m!r}")
        self.regularizer = {**DEFAULT_COSTS, **self.regularizer}

    @classmethod
    def from_dict(cls, desc: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(desc) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        try:
            return cls(**dict(desc))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            desc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from None
        cfg = cls.from_dict(desc)
        base = Path(path).parent
        if not Path(cfg.export_dir).is_absolute():
            cfg.export_dir = str(base / cfg.export_dir)
        if cfg.seed_graph not in zoo.SEEDS and not Path(cfg.seed_graph).is_absolute():
            cfg.seed_graph = str(base / cfg.seed_graph)
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def train_config(self, strength: float = 0.0, cost: Optional[str] = None,
                     epochs: Optional[int] = None, warmup: Optional[float] = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs if epochs is None else epochs,
                           batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                           arch_lr=self.arch_lr, strength=strength, cost=cost,
                           warmup=self.warmup if warmup is None else warmup, seed=self.seed)


@dataclass
class ParetoRecord:
    lam: float
    chain: str
    accuracy: float
    params: float
    params_bytes: float
    macs: float
    export_path: str = ""
    seconds: float = 0.0
    dominated: bool = False
    stages: List[Dict[str, Any]] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def csv_row(self) -> List[str]:
        if not self.ok:
            return [repr(self.lam), self.chain, "", "", "", "", "", self.export_path,
                    f"{self.seconds:.3f}"]
        return [repr(self.lam), self.chain, repr(self.accuracy), repr(self.params),
                repr(self.params_bytes), repr(self.macs), str(self.dominated).lower(),
                self.export_path, f"{self.seconds:.3f}"]

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ParetoRecord":
        return cls(**dict(d))


def flag_dominated(records: Sequence[ParetoRecord], cost: str = "params_bytes") -> None:
    """Mark records beaten on both accuracy and ``cost`` by another record."""
    good = [r for r in records if r.ok]
    for r in good:
        r.dominated = any(
            o is not r and o.accuracy >= r.accuracy and getattr(o, cost) <= getattr(r, cost)
            and (o.accuracy > r.accuracy or getattr(o, cost) < getattr(r, cost))
            for o in good)


def pareto_front(records: Sequence[ParetoRecord]) -> List[ParetoRecord]:
    return sorted((r for r in records if r.ok and not r.dominated), key=lambda r: r.params_bytes)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def load_seed_graph(spec: str, seed: int = 0, input_shape: Optional[Sequence[int]] = None,
                    num_classes: Optional[int] = None) -> Graph:
    if spec in zoo.SEEDS:
        kwargs: Dict[str, Any] = {}
        if input_shape is not None:
            kwargs["input_shape"] = tuple(input_shape)
        if num_classes is not None:
            kwargs["num_classes"] = num_classes
        return build_graph(zoo.SEEDS[spec](**kwargs), seed=seed)
    path = Path(spec)
    if path.is_dir():
        return load_graph(path)
    if path.exists():
        return build_graph(path.read_text(), seed=seed)
    raise ConfigError(f"seed graph {spec!r} is neither a zoo name nor an existing file")


def make_model(method: str, g: Graph, cfg: ExperimentConfig) -> SearchModel:
    opts = dict(cfg.options.get(method, {}))
    costs = list(dict.fromkeys(cfg.costs + [cfg.regularizer[method]]))
    if method == "supernet":
        return SuperNet(g, costs, seed=cfg.seed, **opts)
    if method == "pit":
        return PIT(g, costs, **opts)
    if method == "mps":
        return MPS(g, costs, **opts)
    raise ConfigError(f"unknown method {method!r}")


def measure(g: Graph) -> Dict[str, float]:
    return {name: float(get_cost(g, name).item()) for name in ("params", "params_bytes", "macs")}


def save_search(model: SearchModel, directory: Union[str, Path],
                options: Optional[Mapping[str, Any]] = None) -> Path:
    """Write the search-time graph, its weights and architecture state."""
    directory = Path(directory)
    save_graph(model.graph, directory, extra_state=model.arch_state())
    (directory / "search.json").write_text(json.dumps(
        {"method": model.method, "options": dict(options or {})}, indent=1))
    return directory


def load_search(directory: Union[str, Path]) -> SearchModel:
    """Rebuild a search model written by :func:`save_search`."""
    directory = Path(directory)
    meta = json.loads((directory / "search.json").read_text())
    g = load_graph(directory)
    cls = {"supernet": SuperNet, "pit": PIT, "mps": MPS}.get(meta["method"])
    if cls is None:
        return SearchModel(g)
    model = cls(g, **meta.get("options", {}))
    state = checkpoint.load(directory / "weights.dnft")
    model.load_arch_state({k: v for k, v in state.items() if k.startswith(meta["method"] + ".")})
    return model


def run_chain(cfg: ExperimentConfig, lam: float, ds: Optional[Dataset] = None,
              out_dir: Optional[Union[str, Path]] = None) -> Tuple[Graph, ParetoRecord]:
    """Search, export and fine-tune each method of the chain in turn."""
    ds = ds or get_dataset(cfg.task, cfg.seed, tuple(cfg.dataset_sizes))
    start = time.perf_counter()
    g = load_seed_graph(cfg.seed_graph, cfg.seed, ds.input_shape, ds.num_classes)
    stages = [{"stage": "seed", **measure(g)}]
    accuracy = float("nan")
    for method in cfg.chain:
        model = make_model(method, g, cfg)
        tcfg = cfg.train_config(lam, cfg.regularizer[method])
        result = train_search(model, ds.train, tcfg, ds.val)
        search_acc = evaluate(model, ds.test)
        g = model.export()
        export_acc = evaluate(g, ds.test)
        if cfg.finetune_epochs:
            ft = cfg.train_config(0.0, epochs=cfg.finetune_epochs, warmup=0.0)
            train_search(SearchModel(g), ds.train, ft, ds.val)
        accuracy = evaluate(g, ds.test)
        stage = {"stage": method, **measure(g), "search_accuracy": search_acc,
                 "export_accuracy": export_acc, "accuracy": accuracy,
                 "final_costs": result.history[-1]["costs"], "report": model.report()}
        stages.append(stage)
        if out_dir is not None:
            save_search(model, Path(out_dir) / f"search_{method}",
                        cfg.options.get(method, {}))
    export_path = ""
    if out_dir is not None:
        export_path = str(save_graph(g, Path(out_dir) / "export"))
    costs = measure(g)
    record = ParetoRecord(float(lam), ">".join(cfg.chain), accuracy, costs["params"],
                          costs["params_bytes"], costs["macs"], export_path,
                          time.perf_counter() - start, stages=stages)
    return g, record


def pipeline(cfg: ExperimentConfig, lam: Optional[float] = None,
             ds: Optional[Dataset] = None) -> Tuple[Graph, ParetoRecord]:
    """Run the chain once at strength ``lam`` (default: the first configured)."""
    lam = cfg.lambdas[0] if lam is None else lam
    out = Path(cfg.export_dir) / f"lambda_{lam:g}"
    return run_chain(cfg, lam, ds, out)


def sweep(cfg: ExperimentConfig, ds: Optional[Dataset] = None,
          workers: int = 1) -> List[ParetoRecord]:
    """One independent chain run per strength; failures are recorded, not raised."""
    ds = ds or get_dataset(cfg.task, cfg.seed, tuple(cfg.dataset_sizes))
    export_dir = Path(cfg.export_dir)
    export_dir.mkdir(parents=True, exist_ok=True)

    def one(lam: float) -> ParetoRecord:
        try:
            return pipeline(cfg, lam, ds)[1]
        except Exception as exc:  # recorded so the sweep carries on
            log.exception("run at lambda=%g failed", lam)
            return ParetoRecord(float(lam), ">".join(cfg.chain), float("nan"), float("nan"),
                                float("nan"), float("nan"), error=f"{type(exc).__name__}: {exc}")

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, cfg.lambdas))
    else:
        records = [one(lam) for lam in cfg.lambdas]
    flag_dominated(records)
    write_records(records, export_dir)
    return records


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def records_csv(records: Sequence[ParetoRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def write_records(records: Sequence[ParetoRecord], directory: Union[str, Path]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "records.json").write_text(json.dumps([r.to_dict() for r in records], indent=1,
                                                       default=_json_default))
    (directory / "pareto.csv").write_text(records_csv(records))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_records(directory: Union[str, Path]) -> List[ParetoRecord]:
    path = Path(directory) / "records.json"
    if not path.exists():
        raise ConfigError(f"{directory} holds no records.json")
    return [ParetoRecord.from_dict(d) for d in json.loads(path.read_text())]


def pareto_svg(records: Sequence[ParetoRecord], width: int = 480, height: int = 320) -> str:
    """Scatter of accuracy against model bytes with the non-dominated front as a polyline."""
    good = [r for r in records if r.ok]
    pad = 48
    if good:
        xs = [r.params_bytes for r in good]
        ys = [r.accuracy for r in good]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
    else:
        x0 = y0 = 0.0
        x1 = y1 = 1.0
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 0.01

    def px(r):
        x = pad + (r.params_bytes - x0) / (x1 - x0) * (width - 2 * pad)
        y = height - pad - (r.accuracy - y0) / (y1 - y0) * (height - 2 * pad)
        return x, y

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
             'stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">'
             f'model size [bytes] ({x0:g} to {x1:g})</text>',
             f'<text x="14" y="{height / 2}" font-size="12" text-anchor="middle" '
             f'transform="rotate(-90 14 {height / 2})">accuracy ({y0:.3f} to {y1:.3f})</text>']
    front = pareto_front(good)
    if len(front) > 1:
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in map(px, front))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="crimson" stroke-width="1.5"/>')
    for r in good:
        x, y = px(r)
        color = "gray" if r.dominated else "crimson"
        parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="4" fill="{color}">'
                     f'<title>lambda={r.lam:g} acc={r.accuracy:.3f} bytes={r.params_bytes:g}'
                     '</title></circle>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def baseline(cfg: ExperimentConfig, ds: Optional[Dataset] = None) -> Tuple[Graph, float]:
    """Train the seed graph without search for ``epochs + finetune_epochs`` epochs."""
    ds = ds or get_dataset(cfg.task, cfg.seed, tuple(cfg.dataset_sizes))
    g = load_seed_graph(cfg.seed_graph, cfg.seed, ds.input_shape, ds.num_classes)
    train_search(SearchModel(g), ds.train,
                 cfg.train_config(0.0, epochs=cfg.epochs + cfg.finetune_epochs), ds.val)
    return g, evaluate(g, ds.test)
