"""Command-line pipeline: simulate -> detect -> sweep -> gradgeom -> knockout
-> mask -> train -> report.

Every stage reads its inputs from and writes its outputs into one run
directory, one subdirectory per stage, and finishes by writing a manifest
with SHA-256 digests of everything it read and wrote.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import __version__

log = logging.getLogger("rocktokens")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64
CONFIG_ENV = "ROCKTOKENS_CONFIG"
COMMANDS = ("simulate", "detect", "sweep", "gradgeom", "knockout", "mask", "train", "report")
REPORT_SECTIONS = (
    "detection",
    "density",
    "cutoff",
    "gradient_geometry",
    "persistence",
    "knockout_census",
    "predictors",
    "reweighting",
)


class ConfigError(ValueError):
    pass


class MissingStageError(OSError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"stage {stage!r} output missing: {path}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    from .detect import DetectionConfig
    from .simlab import SimConfig

    sim = SimConfig().to_dict()
    sim.pop("seed")
    return {
        "seed": 5,
        "simulate": {
            "sim": sim,
            "prompts": 100,
            "rollouts_per_prompt": 4,
            "mid_step": None,
            "dist_checkpoints": ["pre", "post"],
            "dist_trajectories": 64,
        },
        "detect": {
            "trace": None,
            "vocab": None,
            "pre": "pre",
            "post": "post",
            **DetectionConfig().to_dict(),
        },
        "sweep": {
            "sizes": [50, 100, 200, 400],
            "ks": [5, 10, 15, 20, 30, 40],
            "repeats": 8,
            "min_jaccard": 0.70,
            "min_coverage": 0.50,
            "use_ctx": False,
        },
        "gradgeom": {
            "checkpoint": "post",
            "early": "pre",
            "late": "post",
            "freq_pct": 50.0,
            "kl_pct": 70.0,
            "n_control": None,
            "min_group": 3,
        },
        "knockout": {
            "checkpoint": "post",
            "prompts": 200,
            "rollouts_per_prompt": 5,
            "epsilon": 0.01,
            "alpha": 0.05,
            "resamples": 10_000,
            "screen": None,
            "windows": True,
            "max_fingerprints": 200,
            "include_pillar": True,
            "bh_levels": [0.05, 0.10, 0.20],
            "null_candidates": 200,
            "null_rollouts": 1,
        },
        "mask": {"regime": "all", "lam": 0.0, "radius": 1, "checkpoint": "post"},
        "train": {
            "regimes": ["baseline", "rock_freeze", "freq_matched_random"],
            "steps": 200,
            "radius": 0,
            "lam": 0.0,
            "eval_prompts": 200,
            "eval_rollouts": 5,
        },
    }


def _merge(base: dict, override: Mapping, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        dotted = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, Mapping):
                raise ConfigError(f"config key {dotted!r} expects a section")
            out[key] = _merge(out[key], val, dotted + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_overrides(pairs: Sequence[str]) -> dict[str, Any]:
    """``a.b=value`` pairs -> {dotted key: value}.  Values are read as JSON
    when they parse, else kept as strings.  A key given twice is an error."""
    out: dict[str, Any] = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        if key in out:
            raise ConfigError(f"conflicting override for key {key!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def apply_overrides(config: dict, overrides: Mapping[str, Any]) -> dict:
    config = copy.deepcopy(config)
    for dotted, val in overrides.items():
        parts = dotted.split(".")
        node = config
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(node[parts[-1]], dict) and not isinstance(val, dict):
            raise ConfigError(f"config key {dotted!r} is a section")
        node[parts[-1]] = val
    return config


def load_config(path: str | None, overrides: Sequence[str] = ()) -> tuple[dict, str | None]:
    """Defaults, then the config file (``path`` or $ROCKTOKENS_CONFIG), then overrides."""
    cfg = default_config()
    path = path or os.environ.get(CONFIG_ENV) or None
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {p}: {exc.strerror or exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {p} must be a JSON object")
        cfg = _merge(cfg, data)
    cfg = apply_overrides(cfg, parse_overrides(overrides))
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    return cfg, path


# ---------------------------------------------------------------------------
# output helpers


def _plain(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to None."""
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def csv_text(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    cols = list(columns or (rows[0].keys() if rows else []))
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})
    return buf.getvalue()


class Stage:
    """Bookkeeping for one command: tracks inputs and outputs, writes the manifest."""

    def __init__(self, command: str, run_dir: Path, config: dict, config_path: str | None, threads: int):
        self.command = command
        self.run_dir = run_dir
        self.dir = run_dir / command
        self.config = config
        self.config_path = config_path
        self.threads = threads
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.seeds: dict[str, int] = {"top": config["seed"]}

    def rel(self, p: Path) -> str:
        try:
            return p.resolve().relative_to(self.run_dir.resolve()).as_posix()
        except ValueError:
            return str(p.resolve())

    def need(self, stage: str, name: str) -> Path:
        p = self.run_dir / stage / name
        if not p.is_file():
            raise MissingStageError(stage, p)
        self.inputs.append(p)
        return p

    def has(self, stage: str, name: str) -> bool:
        return (self.run_dir / stage / name).is_file()

    def external(self, path: str) -> Path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"input not found: {p}")
        self.inputs.append(p)
        return p

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.outputs.append(p)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8", newline="\n")
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, dumps(obj))

    def seed(self, name: str) -> int:
        from .rng import derive_seed

        s = derive_seed(self.config["seed"], name)
        self.seeds[name] = s
        return s

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "tool_version": __version__,
            "config": self.config,
            "config_path": self.config_path,
            "threads": self.threads,
            "seeds": self.seeds,
            "inputs": [{"path": self.rel(p), "sha256": sha256(p)} for p in sorted(set(self.inputs))],
            "outputs": [{"path": self.rel(p), "sha256": sha256(p)} for p in sorted(set(self.outputs))],
        }
        p = self.dir / "manifest.json"
        self.dir.mkdir(parents=True, exist_ok=True)
        p.write_text(dumps(manifest), encoding="utf-8", newline="\n")
        return p


# ---------------------------------------------------------------------------
# shared loaders


def _corpus(st: Stage):
    from .trace import load_corpus

    d = st.config["detect"]
    trace = st.external(d["trace"]) if d.get("trace") else st.need("simulate", "trace.jsonl")
    vocab = st.external(d["vocab"]) if d.get("vocab") else st.need("simulate", "vocab.json")
    return load_corpus(trace, vocab)


def _detection(st: Stage):
    from .detect import DetectionReport

    return DetectionReport.from_dict(json.loads(st.need("detect", "detection.json").read_text()))


def _world(st: Stage):
    from .simlab import load_world

    return load_world(st.need("simulate", "world.npz"))


def _detection_config(cfg: dict):
    from .detect import DetectionConfig

    keys = ("tau_pre", "tau_post", "w", "gamma", "eta", "selection", "max_occurrences", "seed")
    return DetectionConfig.from_dict({k: cfg["detect"][k] for k in keys})


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(st: Stage) -> None:
    from .simlab import SimConfig, build_world, rollout, save_world, train
    from .trace import write_corpus, write_vocabulary

    c = st.config["simulate"]
    sim = SimConfig.from_dict({**c["sim"], "seed": st.config["seed"]})
    world = build_world(sim)
    mid = sim.steps // 2 if c["mid_step"] is None else int(c["mid_step"])
    tlog = train(world, checkpoint_steps={"mid": mid})
    st.write_text("training_log.csv", csv_text(list(tlog.rows()), ["step", "mean_kl", "active_terms", "total_terms"]))
    save_world(world, st.path("world.npz"))
    corpus = rollout(
        world,
        c["prompts"],
        c["rollouts_per_prompt"],
        seed=st.seed("simulate.rollout"),
        score=("pre", "mid", "post"),
        sampler="post",
        with_dists=list(c["dist_checkpoints"]),
        dist_limit=c["dist_trajectories"],
    )
    write_corpus(corpus, st.path("trace.jsonl"))
    write_vocabulary(world.vocabulary, st.path("vocab.json"))
    st.write_json(
        "ground_truth.json",
        {
            "planted_rock_tokens": list(world.planted),
            "planted_pillar_token": world.pillar,
            "templates": [{"rocks": list(t.rocks), "tokens": list(t.tokens)} for t in world.templates],
        },
    )
    print(f"simulated {len(corpus)} trajectories; planted rocks {list(world.planted)}, pillar {world.pillar}")


def cmd_detect(st: Stage) -> None:
    from .detect import select_rock_tokens

    corpus = _corpus(st)
    d = st.config["detect"]
    report = select_rock_tokens(corpus, _detection_config(st.config), d["pre"], d["post"])
    st.write_json("detection.json", report.to_dict())
    st.write_text("tokens.csv", report.table_csv(corpus.vocabulary))
    dens = [{"trajectory_id": t, "density": float(x)} for t, x in zip(report.trajectory_ids, report.densities)]
    st.write_text("density.csv", csv_text(dens, ["trajectory_id", "density"]))
    names = [corpus.vocabulary[v] for v in report.rock_set]
    print(f"rock set ({len(names)}): {names}; median density {report.median_density:.4f}")


def cmd_sweep(st: Stage) -> None:
    from .cutoff import stability_sweep

    corpus = _corpus(st)
    c, d = st.config["sweep"], st.config["detect"]
    res = stability_sweep(
        corpus,
        _detection_config(st.config),
        sizes=c["sizes"],
        ks=c["ks"],
        repeats=c["repeats"],
        seed=st.seed("sweep"),
        pre=d["pre"],
        post=d["post"],
        use_ctx=c["use_ctx"],
        min_jaccard=c["min_jaccard"],
        min_coverage=c["min_coverage"],
    )
    st.write_json("sweep.json", res.to_dict())
    st.write_text("jaccard.csv", res.jaccard_csv())
    st.write_text("coverage.csv", res.coverage_csv())
    ch = res.chosen
    flag = " (fallback)" if ch.fallback else ""
    print(f"chosen K = {ch.k}{flag}: mean Jaccard {ch.mean_jaccard:.3f}, coverage {ch.coverage:.3f}")


def cmd_gradgeom(st: Stage) -> None:
    from .gradgeom import build_groups, compare_groups, persistence_analysis, summarize_gradients

    corpus = _corpus(st)
    report = _detection(st)
    c = st.config["gradgeom"]
    groups = build_groups(
        corpus, report.rock_set, c["checkpoint"], c["n_control"], st.seed("gradgeom.control"), c["freq_pct"], c["kl_pct"]
    )
    summ = summarize_gradients(corpus, c["checkpoint"], groups)
    rows = [t.row() | {"surface": corpus.vocabulary[t.token_id]} for t in summ.tokens]
    st.write_text("gradients.csv", csv_text(rows, ["token_id", "surface", "group", "n", "norm", "cos_balanced", "contribution"]))
    comparisons = {}
    for a, b in (("rock", "rare_high_kl"), ("rock", "random_control")):
        try:
            comparisons[f"{a}_vs_{b}"] = compare_groups(summ, a, b)._asdict()
        except ValueError as exc:
            comparisons[f"{a}_vs_{b}"] = {"error": str(exc)}
    pers = persistence_analysis(corpus, c["early"], c["late"], groups, c["min_group"])
    prow = [r._asdict() | {"surface": corpus.vocabulary[r.token_id]} for r in pers.records]
    st.write_text("persistence.csv", csv_text(prow, ["token_id", "surface", "group", "kl_early", "kl_late", "delta_kl"]))
    gsum = {}
    for g, gp in pers.groups.items():
        gsum[g] = {
            "n_tokens": gp.n_tokens,
            "median_kl_early": gp.median_kl_early,
            "median_kl_late": gp.median_kl_late,
            "median_delta": gp.median_delta,
            "median_relative_reduction": gp.median_relative_reduction,
            "wilcoxon_p": gp.wilcoxon.p_value if gp.wilcoxon else None,
            "wilcoxon_reduction_p": gp.wilcoxon_reduction.p_value if gp.wilcoxon_reduction else None,
            "note": gp.note,
        }
    st.write_json(
        "gradgeom.json",
        {
            "groups": {str(k): v for k, v in sorted(groups.items())},
            "excluded": list(summ.excluded),
            "total_contribution": summ.total_contribution(),
            "projected_total": summ.projected_total(),
            "comparisons": comparisons,
            "persistence": gsum,
            "warnings": list(pers.warnings),
        },
    )
    for g, v in gsum.items():
        print(f"{g}: median relative KL reduction {v['median_relative_reduction']}")


def _screen_pool(st: Stage, report) -> tuple[list[int], int]:
    c = st.config["knockout"]
    core_k = len(report.rock_set)
    if st.has("sweep", "sweep.json"):
        core_k = int(json.loads(st.need("sweep", "sweep.json").read_text())["chosen_k"])
    screen = c["screen"] if c["screen"] is not None else 2 * core_k
    ranked = [a.token_id for a in report.tokens if a.rock_score_ctx > 0]
    return ranked[: int(screen)], core_k


def cmd_knockout(st: Stage) -> None:
    from .detect import rock_occurrences
    from .knockout import census, evaluate_candidates, null_calibration, predictor_values, records_csv, window_companions
    from .simlab import SimEnvironment, token_entropies

    corpus = _corpus(st)
    report = _detection(st)
    world = _world(st)
    c = st.config["knockout"]
    pool, core_k = _screen_pool(st, report)
    core = set(report.ranking()[:core_k]) & set(pool)
    candidates = list(pool)
    if c["include_pillar"] and world.pillar not in candidates:
        candidates.append(world.pillar)
    companions = None
    if c["windows"]:
        occ = rock_occurrences(corpus, report.config, report.pre, report.post)
        companions = window_companions(occ, candidates, report.config.gamma, c["max_fingerprints"], st.seed("knockout.companions"))
    env = SimEnvironment.for_checkpoint(world, c["checkpoint"])
    seed = st.seed("knockout")
    records = evaluate_candidates(
        env, candidates, companions, c["prompts"], c["rollouts_per_prompt"], seed, c["resamples"], c["alpha"], c["epsilon"]
    )
    aggs = {a.token_id: a for a in report.tokens}
    ents = token_entropies(world, corpus, report.pre, report.post)
    scored = [r for r in records if r.candidate in aggs and r.candidate in ents]
    cen = census(records, core, alpha=c["alpha"], bh_levels=c["bh_levels"])
    cen_dict = cen.to_dict()
    if len(scored) >= 3:
        from .knockout import predictor_table

        cen_dict["correlations"] = predictor_table(scored, aggs, ents)
    else:
        cen_dict["correlations"] = {"error": f"only {len(scored)} candidates with predictor rows"}
    nul = null_calibration(
        env, env.phantom_tokens(), c["null_candidates"], c["prompts"], c["null_rollouts"], st.seed("knockout.null"),
        c["epsilon"], c["alpha"], c["resamples"],
    )
    cen_dict["null_calibration"] = {
        "pillar_rate": nul.pillar_rate,
        "stumbling_rate": nul.stumbling_rate,
        "n_candidates": nul.n_candidates,
    }
    cen_dict["core_set"] = sorted(core)
    cen_dict["screen_pool"] = pool
    cen_dict["pillar_token"] = world.pillar
    st.write_json("records.json", [r.to_dict() for r in records])
    st.write_text("records.csv", records_csv(records, corpus.vocabulary))
    st.write_json("census.json", cen_dict)
    scatter = []
    for r in scored:
        row = {"candidate": r.candidate, "surface": corpus.vocabulary[r.candidate], "delta_token": r.delta_token, "category": r.category}
        row.update(predictor_values(aggs[r.candidate], ents[r.candidate]))
        scatter.append(row)
    st.write_text("predictors.csv", csv_text(scatter))
    print(f"census: {cen.counts}; sign split {cen.negatives}-/{cen.positives}+; null pillar rate {nul.pillar_rate:.3f}")


def cmd_mask(st: Stage) -> None:
    from .reweight import (
        REGIMES,
        baseline_mask,
        build_mask,
        freq_matched_random_windows,
        rock_windows,
        weighted_loss,
        window_histograms,
        write_masks,
        plain_loss,
    )

    corpus = _corpus(st)
    report = _detection(st)
    c = st.config["mask"]
    regimes = REGIMES if c["regime"] == "all" else (c["regime"],)
    for r in regimes:
        if r not in REGIMES:
            raise ConfigError(f"mask.regime must be 'all' or one of {list(REGIMES)}")
    windows = rock_windows(corpus, report, c["radius"])
    masks = {}
    if "baseline" in regimes:
        masks["baseline"] = baseline_mask(corpus)
    if "rock_freeze" in regimes:
        masks["rock_freeze"] = build_mask(corpus, report.rock_set, windows, c["lam"], "rock_freeze")
    summary: dict[str, Any] = {
        "radius": c["radius"],
        "rock_windows": {"count": len(windows), "covered": windows.total_covered()},
        "plain_loss": plain_loss(corpus, c["checkpoint"]),
    }
    if "freq_matched_random" in regimes:
        ctrl = freq_matched_random_windows(corpus, windows, report.rock_set, st.seed("mask.control"))
        masks["freq_matched_random"] = build_mask(corpus, (), ctrl, c["lam"], "freq_matched_random")
        rl, rb = window_histograms(corpus, windows)
        cl, cb = window_histograms(corpus, ctrl)
        summary["control_windows"] = {
            "count": len(ctrl),
            "covered": ctrl.total_covered(),
            "length_histogram_equal": rl == cl,
            "bucket_histogram_equal": rb == cb,
        }
    total = sum(len(t) for t in corpus.trajectories)
    for name, ms in masks.items():
        write_masks(ms, st.path(f"{name}.jsonl"))
        wl = weighted_loss(corpus, ms, c["checkpoint"])
        masked = sum(m.masked_fraction * len(m.weights) for m in ms)
        summary[name] = {
            "lambda": ms[0].lam if ms else None,
            "weighted_loss": wl.total,
            "active_terms": wl.active_term_count,
            "total_positions": total,
            "masked_fraction": masked / total if total else 0.0,
        }
    st.write_json("mask_summary.json", summary)
    for name in masks:
        print(f"{name}: masked fraction {summary[name]['masked_fraction']:.4f}, active terms {summary[name]['active_terms']}")


def cmd_train(st: Stage) -> None:
    import numpy as np

    from .reweight import FreqMatchedSource, RockFreezeSource
    from .simlab import SimConfig, build_world, evaluate_accuracy, per_token_kl, train

    report = _detection(st)
    world0 = _world(st)
    c = st.config["train"]
    sim = SimConfig.from_dict({**st.config["simulate"]["sim"], "seed": st.config["seed"]})
    planted = np.array(world0.planted, dtype=np.int64)
    summary: dict[str, Any] = {"rock_set": list(report.rock_set), "steps": c["steps"], "regimes": {}}
    for regime in c["regimes"]:
        world = build_world(sim)
        if regime == "baseline":
            source = None
        elif regime == "rock_freeze":
            source = RockFreezeSource(report.rock_set, c["radius"], c["lam"])
        elif regime == "freq_matched_random":
            source = FreqMatchedSource(report.rock_set, c["radius"], c["lam"], st.seed(f"train.{regime}"))
        else:
            raise ConfigError(f"unknown training regime {regime!r}")
        before = per_token_kl(world)
        tlog = train(world, steps=c["steps"], mask_source=source)
        after = per_token_kl(world)
        st.write_text(f"log_{regime}.csv", csv_text(list(tlog.rows()), ["step", "mean_kl", "active_terms", "total_terms"]))
        acc = evaluate_accuracy(world, world.student_policy(), c["eval_prompts"], c["eval_rollouts"], st.seed("train.eval"))
        other = np.setdiff1d(np.flatnonzero(np.isfinite(before) & (before > 0)), planted)
        summary["regimes"][regime] = {
            "accuracy": float(acc.mean()),
            "active_terms": int(sum(tlog.active_terms)),
            "control_coverage": source.placed / source.requested if regime == "freq_matched_random" and source.requested else None,
            "total_terms": int(sum(tlog.total_terms)),
            "final_mean_kl": tlog.mean_kl[-1] if tlog.mean_kl else None,
            "planted_kl_before": float(np.mean(before[planted])) if planted.size else None,
            "planted_kl_after": float(np.mean(after[planted])) if planted.size else None,
            "other_median_kl_before": float(np.median(before[other])) if other.size else None,
            "other_median_kl_after": float(np.median(after[other])) if other.size else None,
        }
    st.write_json("train_summary.json", summary)
    for name, v in summary["regimes"].items():
        print(f"{name}: accuracy {v['accuracy']:.3f}, active terms {v['active_terms']}/{v['total_terms']}")


def cmd_report(st: Stage) -> None:
    det = json.loads(st.need("detect", "detection.json").read_text())
    vocab = None
    if st.has("simulate", "vocab.json") or st.config["detect"].get("vocab"):
        from .trace import load_vocabulary

        vp = st.external(st.config["detect"]["vocab"]) if st.config["detect"].get("vocab") else st.need("simulate", "vocab.json")
        vocab = load_vocabulary(vp)

    def surf(v):
        return vocab[v] if vocab is not None else str(v)

    def optional(stage: str, name: str):
        return json.loads(st.need(stage, name).read_text()) if st.has(stage, name) else None

    sweep = optional("sweep", "sweep.json")
    geom = optional("gradgeom", "gradgeom.json")
    cen = optional("knockout", "census.json")
    mask = optional("mask", "mask_summary.json")
    trn = optional("train", "train_summary.json")

    sections: dict[str, Any] = {}
    by_id = {a["token_id"]: a for a in det["tokens"]}
    sections["detection"] = {
        "rock_set": [{"token_id": v, "surface": surf(v), "category": by_id[v]["category"], "rock_score_ctx": by_id[v]["rock_score_ctx"]} for v in det["rock_set"]],
        "resolved_thresholds": det["resolved_thresholds"],
        "categories": _count(by_id[v]["category"] for v in det["rock_set"]),
    }
    dens = det["densities"]
    sections["density"] = {
        "median": det["median_density"],
        "mean": sum(dens) / len(dens) if dens else None,
        "n_trajectories": len(dens),
    }
    sections["cutoff"] = None if sweep is None else {"chosen": sweep["chosen"], "ks": sweep["ks"], "coverage": sweep["coverage_curve"]}
    sections["gradient_geometry"] = None if geom is None else {
        "comparisons": geom["comparisons"],
        "total_contribution": geom["total_contribution"],
        "projected_total": geom["projected_total"],
    }
    sections["persistence"] = None if geom is None else geom["persistence"]
    sections["knockout_census"] = None if cen is None else {
        k: cen[k] for k in ("counts", "fractions", "baseline_accuracy", "sign_split", "stable_core", "bonferroni", "benjamini_hochberg", "null_calibration")
    }
    sections["predictors"] = None if cen is None else cen["correlations"]
    sections["reweighting"] = None if mask is None and trn is None else {"masks": mask, "training": trn}

    st.write_json("report.json", {"sections": {k: sections[k] for k in REPORT_SECTIONS}, "absent": [k for k in REPORT_SECTIONS if sections[k] is None]})
    st.write_text("report.md", _markdown(sections))

    # plot-ready tables, one per figure-equivalent
    st.write_text("fig_density.csv", csv_text([{"trajectory_id": t, "density": d} for t, d in zip(det["trajectory_ids"], dens)]))
    st.write_text("fig_categories.csv", csv_text([{"category": k, "count": v} for k, v in sorted(sections["detection"]["categories"].items())], ["category", "count"]))
    if sweep is not None:
        st.write_text("fig_cutoff_jaccard.csv", st.need("sweep", "jaccard.csv").read_text())
        st.write_text("fig_cutoff_coverage.csv", st.need("sweep", "coverage.csv").read_text())
    if geom is not None:
        st.write_text("fig_gradient_norms.csv", st.need("gradgeom", "gradients.csv").read_text())
        st.write_text("fig_persistence.csv", st.need("gradgeom", "persistence.csv").read_text())
    if cen is not None:
        st.write_text("fig_knockout_deltas.csv", st.need("knockout", "records.csv").read_text())
        st.write_text("fig_predictor_scatter.csv", st.need("knockout", "predictors.csv").read_text())
    if trn is not None:
        for regime in trn["regimes"]:
            st.write_text(f"fig_training_{regime}.csv", st.need("train", f"log_{regime}.csv").read_text())
    absent = [k for k in REPORT_SECTIONS if sections[k] is None]
    print(f"report: {len(REPORT_SECTIONS) - len(absent)} of {len(REPORT_SECTIONS)} sections" + (f"; absent {absent}" if absent else ""))


def _count(items) -> dict[str, int]:
    out: dict[str, int] = {}
    for x in items:
        out[x] = out.get(x, 0) + 1
    return dict(sorted(out.items()))


def _markdown(sections: Mapping[str, Any]) -> str:
    lines = ["# Rock-token analysis report", ""]
    for name in REPORT_SECTIONS:
        lines.append(f"## {name.replace('_', ' ').capitalize()}")
        lines.append("")
        body = sections[name]
        if body is None:
            lines.append("_absent: stage output not found_")
        else:
            lines.append("```json")
            lines.append(dumps(body).rstrip("\n"))
            lines.append("```")
        lines.append("")
    return "\n".join(lines)


STAGES: dict[str, Callable[[Stage], None]] = {
    "simulate": cmd_simulate,
    "detect": cmd_detect,
    "sweep": cmd_sweep,
    "gradgeom": cmd_gradgeom,
    "knockout": cmd_knockout,
    "mask": cmd_mask,
    "train": cmd_train,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rocktokens", description="Rock-token detection, probing and mitigation pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS, help="pipeline stage to run")
    p.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted config overrides, e.g. detect.gamma=0.4")
    p.add_argument("-c", "--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("-r", "--run-dir", help="run directory (default: runs/<timestamp>-seed<seed>)")
    p.add_argument("--threads", type=int, default=1, help="worker cap for numerical libraries")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    _limit_threads(args.threads)
    from .trace import TraceError

    try:
        config, config_path = load_config(args.config, args.overrides)
        run_dir = Path(args.run_dir) if args.run_dir else Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-seed{config['seed']}"
        st = Stage(args.command, run_dir, config, config_path, args.threads)
        STAGES[args.command](st)
        manifest = st.finish()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError, KeyError, RuntimeError, TraceError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    if not args.quiet:
        print(f"manifest: {manifest}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
