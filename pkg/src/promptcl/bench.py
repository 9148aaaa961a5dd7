"""Experiment runner: cached pretraining, single runs, and the seed-averaged ablation matrix."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import serialization
from .config import ExperimentConfig, load_config, write_config
from .data import TaskStream, generate_synthetic
from .evaluation import emit_report
from .trainer import run_stream, save_checkpoint
from .vit import Backbone, pretrain_backbone

logger = logging.getLogger(__name__)

CACHE_ENV = "PROMPTCL_CACHE"

# Train-section overrides per variant. The first six rows are the component grid;
# "ccl_pcl" doubles as the one-key row of the key-count comparison.
VARIANTS: Dict[str, dict] = {
    "backbone": dict(enable_ccl=False, enable_pcl=False, enable_mk=False),
    "ccl": dict(enable_ccl=True, enable_pcl=False, enable_mk=False),
    "pcl": dict(enable_ccl=False, enable_pcl=True, enable_mk=False),
    "mk": dict(enable_ccl=False, enable_pcl=False, enable_mk=True),
    "ccl_pcl": dict(enable_ccl=True, enable_pcl=True, enable_mk=False),
    "full": dict(enable_ccl=True, enable_pcl=True, enable_mk=True),
    "wo_pcl": dict(enable_ccl=True, enable_pcl=False, enable_mk=True),
    "wo_caux": dict(enable_aux_head=False),
    "wo_laux": dict(enable_aux_loss=False),
    "edl": dict(regularizer="edl"),
    "roh": dict(regularizer="roh"),
}
COMPONENT_GRID = ("backbone", "ccl", "pcl", "mk", "ccl_pcl", "full")
PROBES = ("wo_pcl", "wo_caux", "wo_laux", "edl", "roh")
# summary-only rows computed from other variants' runs (TIL comes from the full model)
DERIVED = ("til",)

# files whose bytes are a pure function of (config, seed); task_log.json and the
# checkpoint carry wall-clock timings and are left out of the result hash
HASHED_FILES = ("config.yaml", "summary.json", "matrix.csv", "matrix_til.csv", "matrix_task_acc.csv",
                "matrix_fixed.csv", "curve.csv", "metrics.csv")
PROBE_GATE = 5.0  # linear-probe accuracy must exceed this multiple of chance


def probe_threshold(num_classes: int) -> float:
    """5x chance, capped halfway between chance and 1 so tiny class counts stay satisfiable."""
    chance = 1.0 / num_classes
    return min(PROBE_GATE * chance, 0.5 * (1.0 + chance))


class CacheError(RuntimeError):
    pass


class ResultCollisionError(RuntimeError):
    pass


class SanityGateError(RuntimeError):
    pass


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "promptcl")


# -- backbone ------------------------------------------------------------------------

def get_backbone(cfg: ExperimentConfig, cache_dir=None, data=None) -> Tuple[Backbone, dict, bool]:
    """Load the pretrained backbone for ``cfg`` from the cache, or pretrain and store it.

    Returns ``(backbone, pretrain report, cache_hit)``.
    """
    ad.set_default_dtype(cfg.train.dtype)
    key = cfg.backbone_key()
    path = Path(cache_dir or default_cache_dir()) / f"backbone_{key[:24]}.ckpt"
    if path.exists():
        try:
            meta, arrays = serialization.load(path, kind="backbone")
        except serialization.CheckpointError as exc:
            raise CacheError(f"corrupt cached backbone {path}: {exc}") from exc
        if meta.get("cache_key") != key:
            raise CacheError(f"cached backbone {path} was built for a different config")
        backbone = Backbone.load(path)
        return backbone, meta["report"], True
    (pre_train, pre_test), stream = data if data is not None else generate_synthetic(cfg.synthetic)
    dtype = ad.get_default_dtype()
    p = cfg.pretrain
    backbone, report = pretrain_backbone(
        pre_train.images.astype(dtype), pre_train.labels, pre_test.images.astype(dtype), pre_test.labels,
        cfg.backbone, epochs=p.epochs, seed=cfg.seed, batch_size=p.batch_size, lr=p.lr,
        momentum=p.momentum, stream_classes=np.concatenate(stream.class_sets))
    path.parent.mkdir(parents=True, exist_ok=True)
    backbone.save(path, extra_meta={"cache_key": key, "report": report})
    return backbone, report, False


def linear_probe_accuracy(backbone: Backbone, stream: TaskStream, ridge: float = 1e-2) -> float:
    """Ridge-regression probe from frozen class-token features to all stream classes."""
    def features(sets):
        x = np.concatenate([backbone.queries(s.images.astype(ad.get_default_dtype())) for s in sets])
        y = np.concatenate([s.labels for s in sets])
        return np.hstack([x.astype(np.float64), np.ones((len(x), 1))]), y

    x_tr, y_tr = features([stream.train(t) for t in range(stream.num_tasks)])
    x_te, y_te = features([stream.test(t) for t in range(stream.num_tasks)])
    classes = np.unique(y_tr)
    onehot = (y_tr[:, None] == classes[None, :]).astype(np.float64)
    w = np.linalg.solve(x_tr.T @ x_tr + ridge * np.eye(x_tr.shape[1]), x_tr.T @ onehot)
    return float(np.mean(classes[np.argmax(x_te @ w, axis=1)] == y_te))


# -- single run ----------------------------------------------------------------------------

@dataclass
class RunResult:
    path: Path
    summary: dict
    result_hash: str
    cache_hit: bool = False
    reused: bool = False


def result_hash(run_dir) -> str:
    h = hashlib.sha256()
    for name in HASHED_FILES:
        f = Path(run_dir) / name
        if f.exists():
            h.update(name.encode() + b"\0" + f.read_bytes() + b"\0")
    return h.hexdigest()


def _load_result(run_dir: Path) -> RunResult:
    manifest = json.loads((run_dir / "manifest.json").read_text())
    summary = json.loads((run_dir / "summary.json").read_text())
    return RunResult(run_dir, summary, manifest["result_hash"], reused=True)


def run_experiment(config, out_root, cache_dir=None, seed: Optional[int] = None,
                   reuse: bool = False) -> RunResult:
    """Pretrain (or load the cached backbone), train the stream, and write the report.

    The run lands in ``out_root/<config hash>_seed<N>``. An existing directory with
    the same result hash is left alone; a differing one raises
    :class:`ResultCollisionError`. With ``reuse`` an existing finished run is
    returned without retraining.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config, seed=seed)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    out_root = Path(out_root)
    final = out_root / cfg.run_name()
    if reuse and (final / "manifest.json").exists():
        return _load_result(final)

    data = generate_synthetic(cfg.synthetic)
    backbone, report, hit = get_backbone(cfg, cache_dir, data)
    stream = data[1]
    probe = linear_probe_accuracy(backbone, stream)
    chance = 1.0 / cfg.synthetic.num_stream_classes
    gate = probe_threshold(cfg.synthetic.num_stream_classes)
    if probe <= gate:
        raise SanityGateError(f"linear probe accuracy {probe:.3f} does not exceed {gate:.3f} (chance {chance:.3f})")
    backbone_hash = backbone.content_hash()
    state = run_stream(stream, backbone, cfg.train)
    if backbone.content_hash() != backbone_hash:
        raise RuntimeError("backbone changed during continual training")

    out_root.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{cfg.run_name()}.", dir=out_root))
    try:
        write_config(cfg, tmp / "config.yaml")
        summary = emit_report(state.results, tmp, logs=state.logs, metrics=state.metrics)
        sanity = {"pretrain": report, "linear_probe_acc": probe, "chance": chance,
                  "probe_gate": gate, "backbone_hash": backbone_hash}
        (tmp / "sanity.json").write_text(json.dumps(sanity, indent=2, sort_keys=True) + "\n")
        save_checkpoint(state, cfg.train, tmp / "final.ckpt")
        digest = result_hash(tmp)
        manifest = {"run": cfg.run_name(), "config_hash": cfg.config_hash(), "seed": cfg.seed,
                    "result_hash": digest, "hashed_files": [n for n in HASHED_FILES if (tmp / n).exists()]}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if final.exists():
            existing = result_hash(final)
            if existing != digest:
                raise ResultCollisionError(
                    f"{final} holds a different result (hash {existing[:12]} vs new {digest[:12]}); not overwriting")
            logger.info("%s already holds an identical result", final)
        else:
            os.replace(tmp, final)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return RunResult(final, summary, digest, cache_hit=hit)


# -- ablation matrix -------------------------------------------------------------------------

ROW_FIELDS = ("variant", "seed", "last", "avg", "ff", "task_acc", "til_last", "til_task_acc",
              "fixed_prompt_last", "fixed_prompt_avg", "run")
METRICS = ("last", "avg", "ff", "task_acc", "til_last", "til_task_acc", "fixed_prompt_last", "fixed_prompt_avg")


def _job(args):
    cfg, variant, out_root, cache_dir, reuse = args
    res = run_experiment(cfg.with_train(**VARIANTS[variant]), out_root, cache_dir, reuse=reuse)
    row = {"variant": variant, "seed": cfg.seed, "run": res.path.name}
    row.update({m: res.summary.get(m) for m in METRICS})
    return row


def _pretrain_job(args):
    cfg, cache_dir = args
    get_backbone(cfg, cache_dir)
    return cfg.seed


@dataclass
class AblationResult:
    rows: List[dict]
    summary: List[dict]
    checks: List[dict]

    @property
    def all_passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


def run_ablation_matrix(base: ExperimentConfig, seeds: Sequence[int], variants: Optional[Sequence[str]] = None,
                        out_root="runs", cache_dir=None, jobs: int = 1, reuse: bool = True) -> AblationResult:
    """Run every (variant, seed) pair, then write per-run rows, seed means and directional checks."""
    variants = list(COMPONENT_GRID + PROBES + DERIVED if variants is None else variants)
    unknown = [v for v in variants if v not in VARIANTS and v not in DERIVED]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; choose from {list(VARIANTS) + list(DERIVED)}")
    with_til = "til" in variants
    if with_til and "full" not in variants:
        raise ValueError("the 'til' row is derived from 'full' runs; include 'full'")
    variants = [v for v in variants if v in VARIANTS]
    cache_dir = cache_dir or default_cache_dir()
    configs = [base.with_seed(s) for s in seeds]
    tasks = [(cfg, v, str(out_root), str(cache_dir), reuse) for cfg in configs for v in variants]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            # backbones first, so concurrent runs of one seed never race on the cache
            list(pool.map(_pretrain_job, [(cfg, str(cache_dir)) for cfg in configs]))
            rows = list(pool.map(_job, tasks))
    else:
        rows = [_job(t) for t in tasks]
    summary = summarize_rows(rows, til=with_til)
    checks = directional_checks(rows, summary)
    write_ablation(Path(out_root), rows, summary, checks)
    return AblationResult(rows, summary, checks)


def summarize_rows(rows: List[dict], til: bool = True) -> List[dict]:
    """Seed means per variant, in first-seen order, plus (with ``til``) a TIL row from the full model."""
    out = []
    for v in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == v]
        entry = {"variant": v, "n_seeds": len(sel)}
        for m in METRICS:
            vals = [r[m] for r in sel if r[m] is not None]
            entry[m] = float(np.mean(vals)) if vals else None
        out.append(entry)
    full = next((s for s in out if s["variant"] == "full"), None)
    if til and full is not None:
        # task identity is given under TIL, so prompt selection is correct by construction
        out.append({"variant": "til", "n_seeds": full["n_seeds"], "last": full["til_last"],
                    "avg": None, "ff": None, "task_acc": 1.0, "til_last": full["til_last"],
                    "til_task_acc": 1.0, "fixed_prompt_last": None, "fixed_prompt_avg": None})
    return out


def directional_checks(rows: List[dict], summary: List[dict]) -> List[dict]:
    """Every ordering that the available variants allow, as explicit pass/fail records."""
    mean = {s["variant"]: s for s in summary}
    checks: List[dict] = []

    def check(name, passed, detail):
        checks.append({"check": name, "passed": bool(passed), "detail": detail})

    def cmp(a, b, metric="last", strict=False, slack=0.0):
        if a in mean and b in mean:
            x, y = mean[a][metric], mean[b][metric]
            ok = x > y - slack if strict else x >= y - slack
            op = ">" if strict else ">="
            extra = f" - {slack:g}" if slack else ""
            check(f"{a} {op} {b}{extra} ({metric})", ok, f"{x:.4f} vs {y:.4f}")

    for single in ("ccl", "pcl", "mk"):
        cmp("full", single)
    for single in ("ccl", "pcl", "mk"):
        cmp(single, "backbone")
    if "full" in mean and "backbone" in mean:
        gap = mean["full"]["last"] - mean["backbone"]["last"]
        check("full - backbone >= 0.02 (last)", gap >= 0.02, f"gap {gap:.4f}")
    cmp("full", "ccl_pcl", metric="task_acc", strict=True)
    if rows:
        worst = min(r["til_last"] - r["last"] for r in rows)
        check("til_last >= last on every run", worst >= 0, f"smallest margin {worst:.4f}")
    if "til" in mean:
        check("til task_acc = 1", mean["til"]["task_acc"] == 1.0, f"{mean['til']['task_acc']}")
    cmp("full", "wo_pcl", metric="fixed_prompt_last", strict=True)
    cmp("full", "wo_caux")
    cmp("wo_caux", "wo_laux", slack=0.005)
    cmp("full", "wo_laux", strict=True)
    cmp("full", "edl", strict=True)
    cmp("full", "roh", strict=True)
    return checks


def _csv(rows: List[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                    for k in fields})
    return buf.getvalue()


def write_ablation(out_root: Path, rows, summary, checks) -> None:
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "ablation_runs.csv").write_text(_csv(rows, ROW_FIELDS))
    (out_root / "ablation_summary.csv").write_text(_csv(summary, ("variant", "n_seeds") + METRICS))
    (out_root / "ablation_checks.json").write_text(json.dumps(checks, indent=2) + "\n")


def read_rows(path) -> List[dict]:
    """Parse an ``ablation_runs.csv`` back into row dicts."""
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            row = {"variant": r["variant"], "seed": int(r["seed"]), "run": r["run"]}
            row.update({m: (float(r[m]) if r[m] != "" else None) for m in METRICS})
            out.append(row)
        return out
