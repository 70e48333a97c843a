"""Command-line entry point: ``python -m setle <command> --help``.

Every command accepts ``--config file.json`` whose keys are the command's long
option names (dashes as underscores); explicit flags override the file. The
resolved configuration and package version are written to ``<out>/config.json``.
Exit codes: 0 success, 2 configuration error, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .agent import (SUMMARY_FIELDS, AgentConfig, ConfigError, MemoryContext, Strategy, run_metrics, run_training,
                    write_episode_log)
from .builder import Label, SetBuilder, build_memory
from .encoder import (FLAT_METAPATHS, EncoderConfig, EncoderState, InsufficientDataError, config_from_dict,
                      encode_store, set_infos, train_encoder)
from .envsim import Task, random_rollout
from .evaluation import REPORT_FIELDS, ablate, cluster_report, report_row, write_csv, write_projection
from .experiments import COLLECTION_CAPS, collect_balanced, held_out_split
from .features import SymbolicFeatures
from .graph import GraphError, MemoryStore
from .retrieval import EnrichmentConfig, LtmIndex, RetrievalAttention
from .trace import TraceFormatError, read_traces, write_traces

EXIT_CONFIG = 2
EXIT_DATA = 3


class DataError(Exception):
    pass


# (flag, type, default, help); type "list:<t>" means nargs="+"
COMMON = [("out", str, None, "output directory (required)"), ("seed", int, 0, "global seed")]
ENCODER_KEYS = [f.name for f in fields(EncoderConfig) if f.name not in ("seed", "metapaths", "trainable_kinds")]

COMMANDS: dict[str, tuple[str, list]] = {
    "collect": ("Random-policy rollouts written as JSONL traces.", [
        ("task", "list:str", ["Empty-5"], "task names, e.g. Empty-5 DoorKey-6"),
        ("episodes", int, 100, "episodes per task (ignored with --balanced)"),
        ("step_cap", int, None, "step cap per episode (default: per-task collection cap)"),
        ("balanced", int, 0, "keep N successes and N failures per task instead of --episodes"),
        ("per_episode", bool, False, "one JSONL file per episode instead of one sharded file"),
    ]),
    "build-memory": ("Build SET subgraphs from traces into a memory file.", [
        ("traces", "list:str", None, "trace JSONL files or directories"),
        ("tau_sim", float, 0.95, "object/interaction dedup threshold"),
        ("d_in", int, 16, "feature dimension"),
    ]),
    "train-encoder": ("Train the dual-view SET encoder.", [
        ("memory", str, None, "memory file"),
        ("resume", str, None, "checkpoint to resume from"),
        ("split", int, 0, "train only on the first N SETs of each (task, label) group; 0 = all"),
        ("flat", bool, False, "use the flat meta-path set (for flattened memories)"),
    ] + [(k, None, None, f"encoder {k}") for k in ENCODER_KEYS]),
    "eval-embeddings": ("Cluster SET embeddings; one report row per checkpoint.", [
        ("memory", str, None, "memory file"),
        ("checkpoint", "list:str", None, "encoder checkpoints (e.g. one per margin)"),
        ("split", int, 0, "evaluate only SETs after the first N of each (task, label) group; 0 = all"),
    ]),
    "ablate": ("Complete-vs-ablated clustering report.", [
        ("memory", str, None, "memory file"),
        ("checkpoint", str, None, "encoder checkpoint trained on the complete memory"),
        ("modes", "list:str", ["remove", "shuffle", "flatten"], "ablations to run"),
        ("fraction", float, 0.4, "state-removal fraction"),
        ("split", int, 0, "as for eval-embeddings; flatten retrains on the first N per group"),
    ]),
    "train-agent": ("Train the Double-DQN agent for one strategy over several seeds.", [
        ("task", str, "Empty-5", "task name"),
        ("strategy", str, "Baseline", "one of " + ", ".join(s.value for s in Strategy)),
        ("seeds", "list:int", [0, 1, 2], "seeds"),
        ("episodes", int, 2000, "episodes per seed"),
        ("memory", str, None, "long-term memory file (enriched strategies)"),
        ("checkpoint", str, None, "encoder checkpoint (enriched strategies)"),
        ("parallel", int, 1, "worker processes"),
        ("step_log", bool, False, "also write a per-step enrichment JSONL"),
        ("agent", "json", None, "extra AgentConfig fields as a JSON object"),
        ("enrichment", "json", None, "EnrichmentConfig fields as a JSON object"),
    ]),
}


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes"):
        return True
    if s.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="setle", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (help_text, opts) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text,
                            argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="JSON file with option values")
        for key, typ, default, help_ in COMMON + opts:
            flag = "--" + key.replace("_", "-")
            h = f"{help_} (default: {default})"
            if typ == bool:
                sp.add_argument(flag, nargs="?", const=True, type=_bool, help=h)
            elif isinstance(typ, str) and typ.startswith("list:"):
                sp.add_argument(flag, nargs="+", type={"str": str, "int": int}[typ[5:]], help=h)
            elif typ == "json":
                sp.add_argument(flag, type=json.loads, help=h + "; JSON object")
            else:
                sp.add_argument(flag, type=typ or json.loads, help=h)
    return p


def resolve(command: str, ns: argparse.Namespace) -> dict:
    _, opts = COMMANDS[command]
    known = {k: d for k, _, d, _ in COMMON + opts}
    cfg = dict(known)
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    if getattr(ns, "config", None):
        try:
            file_cfg = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {ns.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        for k in ("version", "command", "resolved"):   # written by write_config
            file_cfg.pop(k, None)
        unknown = sorted(set(file_cfg) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(file_cfg)
    cfg.update(given)
    if not cfg.get("out"):
        raise ConfigError("--out is required")
    return cfg


def write_config(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, **cfg, "resolved": extra or {}}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) in (None, [], ""):
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _load_memory(path) -> MemoryStore:
    try:
        return MemoryStore.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"memory file not found: {path}") from exc


def _load_checkpoint(path) -> EncoderState:
    try:
        return EncoderState.load(path)[0]
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc


def _encoder_config(cfg: dict) -> EncoderConfig:
    overrides = {k: cfg[k] for k in ENCODER_KEYS if cfg.get(k) is not None}
    base = EncoderConfig(seed=cfg["seed"], **overrides)
    if cfg.get("flat"):
        base.metapaths = FLAT_METAPATHS
    return base


# -- commands -------------------------------------------------------------------------
def cmd_collect(cfg: dict, out: Path) -> dict:
    for t in cfg["task"]:
        try:
            Task.parse(t)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if cfg["balanced"] > 0:
        traces = collect_balanced(cfg["balanced"], cfg["balanced"], cfg["seed"], cfg["task"],
                                  {t: cfg["step_cap"] or COLLECTION_CAPS.get(t, Task.parse(t).max_steps)
                                   for t in cfg["task"]})
    else:
        traces = []
        for t in cfg["task"]:
            cap = cfg["step_cap"] or COLLECTION_CAPS.get(t, Task.parse(t).max_steps)
            traces += [random_rollout(t, cfg["seed"], cap, ep) for ep in range(cfg["episodes"])]
    if cfg["per_episode"]:
        d = out / "traces"
        d.mkdir(parents=True, exist_ok=True)
        for tr in traces:
            write_traces(d / f"{tr.task}_{tr.episode:06d}.jsonl", [tr])
    else:
        write_traces(out / "traces.jsonl", traces)
    for t in cfg["task"]:
        mine = [tr for tr in traces if tr.task == t]
        s = sum(tr.goal_reached for tr in mine)
        print(f"{t}: {len(mine)} episodes, {s} successes, {len(mine) - s} failures")
    return {}


def _trace_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(p.glob("*.jsonl"))
        elif p.exists():
            files.append(p)
        else:
            raise DataError(f"trace path not found: {p}")
    if not files:
        raise DataError("no trace files given")
    return files


def cmd_build_memory(cfg: dict, out: Path) -> dict:
    _require(cfg, "traces")
    traces = []
    for f in _trace_files(cfg["traces"]):
        traces += read_traces(f)
    store = build_memory(traces, SetBuilder(SymbolicFeatures(cfg["d_in"])), cfg["d_in"], cfg["tau_sim"],
                         step_caps=COLLECTION_CAPS)
    store.validate()
    store.persist(out / "memory.jsonl")
    kinds: dict[str, int] = {}
    for n in store.nodes.values():
        kinds[n.kind.value] = kinds.get(n.kind.value, 0) + 1
    n_edges = len(store.edges)
    labels = [i.label for i in set_infos(store)]
    print(f"{len(store.set_ids())} SETs ({labels.count('Success')} success), {len(store.nodes)} nodes, "
          f"{n_edges} edges; " + ", ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    return {}


def cmd_train_encoder(cfg: dict, out: Path) -> dict:
    _require(cfg, "memory")
    store = _load_memory(cfg["memory"])
    state = None
    if cfg.get("resume"):
        state = _load_checkpoint(cfg["resume"])
        enc_cfg = state.config
    else:
        enc_cfg = _encoder_config(cfg)
    ids = held_out_split(store, cfg["split"])[0] if cfg["split"] else None
    res = train_encoder(store, enc_cfg, log_path=out / "train_log.csv", checkpoint_path=out / "encoder.npz",
                        state=state, set_ids=ids)
    print(f"trained {len(res.log)} epochs, best epoch {res.best_epoch}, "
          f"val loss {res.log[res.best_epoch - 1]['val_loss']:.6f}")
    return {"encoder": enc_cfg.to_dict()}


def cmd_eval_embeddings(cfg: dict, out: Path) -> dict:
    _require(cfg, "memory", "checkpoint")
    store = _load_memory(cfg["memory"])
    ids = held_out_split(store, cfg["split"])[1] if cfg["split"] else store.set_ids()
    infos = {i.set_id: i for i in set_infos(store, ids)}
    rows = []
    for i, path in enumerate(cfg["checkpoint"]):
        state = _load_checkpoint(path)
        emb = encode_store(store, state, ids)
        z = np.stack([e.z for e in emb])
        tasks = [infos[e.set_id].task for e in emb]
        labels = [infos[e.set_id].label for e in emb]
        rep = cluster_report(z, tasks, labels, state.config.margin, cfg["seed"])
        rows.append(report_row(rep))
        write_projection(out / f"projection_{i}.csv", z, tasks, labels)
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rows[-1].items()))
    write_csv(out / "report.csv", rows, REPORT_FIELDS)
    return {}


ABLATION_FIELDS = ("metric", "outcome", "complete", "remove", "shuffle", "flatten")


def cmd_ablate(cfg: dict, out: Path) -> dict:
    _require(cfg, "memory", "checkpoint")
    bad = sorted(set(cfg["modes"]) - {"remove", "shuffle", "flatten"})
    if bad:
        raise ConfigError(f"unknown ablation modes: {', '.join(bad)}")
    store = _load_memory(cfg["memory"])
    state = _load_checkpoint(cfg["checkpoint"])
    train_ids, test_ids = held_out_split(store, cfg["split"]) if cfg["split"] else (None, store.set_ids())
    infos = {i.set_id: i for i in set_infos(store, test_ids)}

    def report(mem, enc):
        emb = encode_store(mem, enc, test_ids)
        return cluster_report(np.stack([e.z for e in emb]), [infos[e.set_id].task for e in emb],
                              [infos[e.set_id].label for e in emb], enc.config.margin, cfg["seed"])

    reports = {"complete": report(store, state)}
    for mode in cfg["modes"]:
        mod = ablate(store, mode, cfg["fraction"], cfg["seed"])
        enc = state
        if mode == "flatten":
            flat_cfg = config_from_dict({**state.config.to_dict(), "metapaths": [p.name for p in FLAT_METAPATHS],
                                         "seed": cfg["seed"]})
            enc = train_encoder(mod, flat_cfg, set_ids=train_ids).state
        reports[mode] = report(mod, enc)
    rows = []
    for metric in ("silhouette", "dbi", "dunn"):
        for lab in (Label.SUCCESS.value, Label.FAILURE.value):
            row = {"metric": metric, "outcome": lab}
            for k in ("complete", "remove", "shuffle", "flatten"):
                row[k] = getattr(reports[k], metric).get(lab, float("nan")) if k in reports else ""
            rows.append(row)
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    write_csv(out / "ablation.csv", rows, ABLATION_FIELDS)
    return {}


def _agent_job(args):
    task, cfg_dict, mem_path, ckpt_path, enr_dict, out, step_log = args
    cfg = AgentConfig(**cfg_dict)
    memory = None
    if cfg.strategy.enriched:
        store = MemoryStore.load(mem_path)
        state, _ = EncoderState.load(ckpt_path)
        index = LtmIndex.from_embeddings(store, encode_store(store, state), labels=[Label.SUCCESS.value])
        attention = RetrievalAttention(state.config.hidden_dim, np.random.default_rng([cfg.seed, 2]))
        memory = MemoryContext(store, index, state, attention, EnrichmentConfig(**enr_dict))
    tag = f"{cfg.strategy.value}_seed{cfg.seed}"
    log, _ = run_training(task, cfg, memory, step_log=Path(out) / f"{tag}_steps.jsonl" if step_log else None)
    write_episode_log(Path(out) / f"{tag}_episodes.csv", log)
    return run_metrics(log)


def cmd_train_agent(cfg: dict, out: Path) -> dict:
    try:
        strategy = Strategy(cfg["strategy"])
    except ValueError as exc:
        raise ConfigError(f"unknown strategy {cfg['strategy']!r}; expected one of "
                          + ", ".join(s.value for s in Strategy)) from exc
    try:
        Task.parse(cfg["task"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    extra = dict(cfg.get("agent") or {})
    for k in ("strategy", "seed", "episodes"):
        if k in extra:
            raise ConfigError(f"set {k} with its own option, not inside --agent")
    try:
        enr = EnrichmentConfig(**(cfg.get("enrichment") or {}))
    except TypeError as exc:
        raise ConfigError(f"bad enrichment option: {exc}") from exc
    if strategy.enriched:
        _require(cfg, "memory", "checkpoint")
        for key in ("memory", "checkpoint"):
            if not Path(cfg[key]).exists():
                raise DataError(f"{key} file not found: {cfg[key]}")
    jobs, resolved = [], []
    for seed in cfg["seeds"]:
        try:
            ac = AgentConfig(strategy=strategy, seed=seed, episodes=cfg["episodes"], **extra)
        except TypeError as exc:
            raise ConfigError(f"bad agent option: {exc}") from exc
        resolved.append(ac.to_dict())
        jobs.append((cfg["task"], ac.to_dict(), cfg.get("memory"), cfg.get("checkpoint"),
                     vars(enr), str(out), cfg["step_log"]))
    if cfg["parallel"] > 1:
        with ProcessPoolExecutor(cfg["parallel"]) as pool:
            rows = list(pool.map(_agent_job, jobs))
    else:
        rows = [_agent_job(j) for j in jobs]
    write_csv(out / "summary.csv", rows, SUMMARY_FIELDS)
    for r in rows:
        print(f"{r['strategy']} seed {r['seed']}: success(last) {r['success_rate_last']:.3f} "
              f"reward freq {r['reward_frequency']:.5f} q mean {r['q_mean']:.4f} var {r['q_var']:.6f}")
    return {"agent_configs": resolved, "enrichment_config": dict(vars(enr))}


HANDLERS = {"collect": cmd_collect, "build-memory": cmd_build_memory, "train-encoder": cmd_train_encoder,
            "eval-embeddings": cmd_eval_embeddings, "ablate": cmd_ablate, "train-agent": cmd_train_agent}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve(ns.command, ns)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        extra = HANDLERS[ns.command](cfg, out)
        write_config(out, ns.command, cfg, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TraceFormatError, GraphError, InsufficientDataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
