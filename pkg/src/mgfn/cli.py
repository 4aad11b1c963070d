"""Command-line front end: ``mgfn synth | build-graph | train | evaluate | ablate``.

Every subcommand accepts ``--config FILE`` (a JSON object); flags given on
the command line override values from the file, which override built-in
defaults. The effective configuration is echoed into each artifact: inside
the header of binary files, as ``# config:`` lines in text reports and as a
``.meta.json`` sidecar next to header-less TSV and CSV files.
"""

import argparse
import json
import logging
import os
import sys

from .errors import ConfigError, MGFNError

DEFAULT_SEED = 42

log = logging.getLogger("mgfn")


class UsageError(Exception):
    pass


# -- configuration -----------------------------------------------------------

DEFAULTS = {
    "synth": dict(items=2000, users=500, days=8, topics=20, exclusive_fraction=0.3,
                  out=None, catalog=None, seed=DEFAULT_SEED),
    "build-graph": dict(log=None, catalog=None, out=None, report=None, train_days=7, cutoff=None,
                        source="feeds", target="home", buckets=5000, workers=1, seed=DEFAULT_SEED),
    "train": dict(graph=None, out=None, variant="mgfn", steps=12000, batch_size=4000, lr=0.002,
                  negatives="cross_scenario", n_negatives=5, fanouts=[10, 10], dropout=0.0,
                  dtype="float64", weight_mode="log", seed=DEFAULT_SEED, deterministic=True),
    "evaluate": dict(embeddings=None, log=None, catalog=None, report=None, train_days=7, cutoff=None,
                     source="feeds", target="home", per_query_k=15, final_k=100, queue_len=20,
                     aggregate="max", pca=None, tags=3, sample=500, seed=DEFAULT_SEED),
    "ablate": dict(log=None, catalog=None, report=None, train_days=7, cutoff=None, source="feeds",
                   target="home", variant="mgfn", steps=2000, batch_size=1000, lr=0.002,
                   fanouts=[10, 10], dtype="float32", seed=DEFAULT_SEED),
}

REQUIRED = {
    "synth": ("out",),
    "build-graph": ("log", "catalog", "out"),
    "train": ("graph", "out"),
    "evaluate": ("embeddings", "log", "catalog"),
    "ablate": ("log", "catalog"),
}


def load_config_file(path):
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def resolve_config(command, args):
    """Defaults, then the config file (flat keys or a section named after
    the command), then explicit flags."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        data = load_config_file(args.config)
        section = data.get(command, data) if isinstance(data.get(command), dict) else data
        for key, value in section.items():
            key = key.replace("-", "_")
            if key in cfg:
                cfg[key] = value
            elif not isinstance(value, dict):
                raise UsageError(f"{args.config}: unknown key {key!r} for {command}")
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    missing = [k for k in REQUIRED[command] if not cfg.get(k)]
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def config_line(command, cfg):
    return "# config: " + json.dumps({"command": command, **cfg}, sort_keys=True) + "\n"


def write_sidecar(path, command, cfg, **extra):
    with open(path + ".meta.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump({"command": command, "config": cfg, **extra}, f, sort_keys=True, indent=2)
        f.write("\n")


def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# -- subcommands -------------------------------------------------------------


def cmd_synth(cfg, out=sys.stdout):
    from .graph_builder import write_log
    from .synthgen import generate_catalog, generate_interactions, standard_profiles, write_catalog

    if cfg["items"] < 1 or cfg["users"] < 1 or cfg["days"] < 1:
        raise UsageError("--items, --users and --days must be >= 1")
    if not 1 <= cfg["topics"] <= cfg["items"]:
        raise UsageError("--topics must lie in [1, items]")
    if not 0.0 <= cfg["exclusive_fraction"] <= 1.0:
        raise UsageError("--exclusive-fraction must lie in [0, 1]")
    catalog = generate_catalog(cfg["items"], cfg["topics"], cfg["seed"])
    profiles = standard_profiles(cfg["topics"], cfg["exclusive_fraction"])
    records = generate_interactions(catalog, profiles, cfg["users"], cfg["days"], cfg["seed"])
    cat_path = cfg["catalog"] or cfg["out"] + ".catalog.tsv"
    _ensure_parent(cfg["out"])
    _ensure_parent(cat_path)
    write_log(records, cfg["out"])
    write_catalog(catalog, cat_path)
    write_sidecar(cfg["out"], "synth", cfg, catalog=cat_path)
    write_sidecar(cat_path, "synth", cfg)
    per = {}
    for r in records:
        per[r.scenario_id] = per.get(r.scenario_id, 0) + 1
    out.write(f"seed {cfg['seed']}\n")
    out.write(f"items {len(catalog)}\nusers {cfg['users']}\nrecords {len(records)}\n")
    for s in sorted(per):
        out.write(f"records[{s}] {per[s]}\n")
    out.write(f"log {cfg['out']}\ncatalog {cat_path}\n")


def _load_inputs(cfg):
    from .graph_builder import read_log
    from .synthgen import read_catalog

    _require_file(cfg["log"], "interaction log")
    _require_file(cfg["catalog"], "catalog")
    return read_catalog(cfg["catalog"]), read_log(cfg["log"])


def cmd_build_graph(cfg, out=sys.stdout):
    from .experiments import prepare
    from .graph_builder import classify_edges, graph_stats_table
    from .multigraph import save_graph

    catalog, records = _load_inputs(cfg)
    ds = prepare(catalog, records, cfg["train_days"], cfg["buckets"], cfg["target"], cfg["source"],
                 cutoff=cfg["cutoff"], workers=cfg["workers"])
    g = ds.graph
    _ensure_parent(cfg["out"])
    save_graph(g, cfg["out"], metadata={"config": {"command": "build-graph", **cfg}})
    out.write(f"seed {cfg['seed']}\n")
    out.write(graph_stats_table(g))

    if len(g.scenarios) < 2:
        text = (f"edge classification skipped: log has a single scenario "
                f"({', '.join(g.scenarios)})\n")
        kv = "classification=skipped\n"
    else:
        missing = [s for s in (cfg["source"], cfg["target"]) if s not in g.scenarios]
        if missing:
            raise UsageError(f"scenario(s) not in log: {', '.join(missing)}; "
                             f"available: {', '.join(g.scenarios)}")
        rep = classify_edges(g, cfg["source"], cfg["target"])
        text, kv = rep.to_text(), rep.to_kv()
    out.write(text)
    prefix = cfg["report"] or cfg["out"]
    head = config_line("build-graph", cfg)
    with open(prefix + ".report.txt", "w", encoding="utf-8", newline="\n") as f:
        f.write(head + graph_stats_table(g) + "\n" + text)
    with open(prefix + ".report.kv", "w", encoding="utf-8", newline="\n") as f:
        f.write(head + f"nodes={g.n_nodes}\nedges={g.n_edges()}\n" + kv)


def _parse_fanouts(value):
    if isinstance(value, str):
        try:
            return [int(x) for x in value.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"--fanouts must be comma-separated integers, got {value!r}") from None
    return [int(x) for x in value]


def cmd_train(cfg, out=sys.stdout):
    from dataclasses import replace

    from .experiments import parse_variant
    from .multigraph import load_graph
    from .training import TrainConfig, save_checkpoint, train, write_loss_curve

    _require_file(cfg["graph"], "graph file")
    cfg["fanouts"] = _parse_fanouts(cfg["fanouts"])
    try:
        transform, mc = parse_variant(cfg["variant"])
        mc = replace(mc, dropout=cfg["dropout"], dtype=cfg["dtype"], weight_mode=cfg["weight_mode"],
                     n_layers=len(cfg["fanouts"]))
        tc = TrainConfig(batch_size=cfg["batch_size"], n_negatives=cfg["n_negatives"], lr=cfg["lr"],
                         stop_steps=cfg["steps"], negative_strategy=cfg["negatives"], seed=cfg["seed"],
                         fanouts=tuple(cfg["fanouts"]))
    except ConfigError as e:
        raise UsageError(str(e)) from None
    g = load_graph(cfg["graph"])
    if transform is not None:
        g = transform(g)
    ns = tc.negative_strategy
    if ns.startswith("degree:") and ns.split(":", 1)[1] not in g.scenarios:
        raise UsageError(f"negative strategy {ns!r} names a scenario absent from the "
                         f"{cfg['variant']} graph ({', '.join(g.scenarios)})")
    out.write(f"seed {cfg['seed']}\n")
    result = train(g, mc, tc, progress=lambda step, loss: out.write(f"step {step} loss {loss:.6f}\n"))
    prefix = cfg["out"]
    _ensure_parent(prefix)
    meta = {"config": {"command": "train", **cfg}, "variant": cfg["variant"]}
    save_checkpoint(prefix + ".ckpt", result.params, result.state, result.model_config, tc, metadata=meta)
    result.embeddings.write_tsv(prefix + ".emb.tsv")
    write_sidecar(prefix + ".emb.tsv", "train", cfg, checkpoint=prefix + ".ckpt")
    write_loss_curve(result.loss_curve, prefix + ".loss.csv")
    write_sidecar(prefix + ".loss.csv", "train", cfg)
    out.write(f"checkpoint {prefix}.ckpt\nembeddings {prefix}.emb.tsv\nloss {prefix}.loss.csv\n")


def cmd_evaluate(cfg, out=sys.stdout):
    from .experiments import evaluate, prepare
    from .retrieval import EmbeddingTable, pca_project, write_pca_csv

    _require_file(cfg["embeddings"], "embeddings file")
    if cfg["aggregate"] not in ("max", "sum"):
        raise UsageError("--aggregate must be max or sum")
    catalog, records = _load_inputs(cfg)
    table = EmbeddingTable.read_tsv(cfg["embeddings"])
    ds = prepare(catalog, records, cfg["train_days"], target=cfg["target"], source=cfg["source"],
                 cutoff=cfg["cutoff"], build_graph=False)
    report = evaluate(table, ds, cfg["per_query_k"], cfg["final_k"], cfg["aggregate"], cfg["queue_len"])
    out.write(f"seed {cfg['seed']}\n")
    out.write(report.to_text())
    prefix = cfg["report"] or cfg["embeddings"]
    head = config_line("evaluate", cfg)
    with open(prefix + ".eval.txt", "w", encoding="utf-8", newline="\n") as f:
        f.write(head + report.to_text())
    with open(prefix + ".eval.kv", "w", encoding="utf-8", newline="\n") as f:
        f.write(head + report.to_kv())
    if cfg["pca"]:
        tags = {m.item_id: m.tag for m in catalog}
        src = _source_labels(ds, cfg["source"], cfg["target"])
        rows = pca_project(table, tags, cfg["tags"], cfg["sample"], cfg["seed"], src)
        _ensure_parent(cfg["pca"])
        write_pca_csv(rows, cfg["pca"])
        write_sidecar(cfg["pca"], "evaluate", cfg)
        out.write(f"pca {cfg['pca']} ({len(rows)} rows)\n")


def _source_labels(ds, source, target):
    seen = {}
    for r in ds.train:
        seen.setdefault(r.item_id, set()).add(r.scenario_id)
    label = {}
    for item, scen in seen.items():
        if source in scen and target in scen:
            label[item] = "shared"
        elif source in scen:
            label[item] = source
        elif target in scen:
            label[item] = target
    return label


def cmd_ablate(cfg, out=sys.stdout):
    from .experiments import comparison_table, negative_strategy_ablation, prepare
    from .training import TrainConfig

    cfg["fanouts"] = _parse_fanouts(cfg["fanouts"])
    catalog, records = _load_inputs(cfg)
    try:
        tc = TrainConfig(batch_size=cfg["batch_size"], lr=cfg["lr"], stop_steps=cfg["steps"],
                         seed=cfg["seed"], fanouts=tuple(cfg["fanouts"]))
    except ConfigError as e:
        raise UsageError(str(e)) from None
    ds = prepare(catalog, records, cfg["train_days"], target=cfg["target"], source=cfg["source"],
                 cutoff=cfg["cutoff"])
    missing = [s for s in (cfg["source"], cfg["target"]) if s not in ds.graph.scenarios]
    if missing:
        raise UsageError(f"scenario(s) not in log: {', '.join(missing)}")
    rows = negative_strategy_ablation(ds, tc, cfg["variant"], dtype=cfg["dtype"],
                                      n_layers=len(cfg["fanouts"]))
    table = comparison_table(rows)
    out.write(f"seed {cfg['seed']}\n" + table)
    if cfg["report"]:
        _ensure_parent(cfg["report"])
        with open(cfg["report"], "w", encoding="utf-8", newline="\n") as f:
            f.write(config_line("ablate", cfg) + table)


COMMANDS = {
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


# -- argument parsing ----------------------------------------------------------


def _split_args(p):
    p.add_argument("--train-days", type=int, help="days of log used for training (default 7)")
    p.add_argument("--cutoff", type=int, help="explicit train/validation split timestamp")
    p.add_argument("--source", help="source scenario id (default feeds)")
    p.add_argument("--target", help="target scenario id (default home)")


def build_parser():
    parser = argparse.ArgumentParser(prog="mgfn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, help=f"random seed (default {DEFAULT_SEED})")
        return p

    p = command("synth", "generate a synthetic catalog and interaction log")
    p.add_argument("--items", type=int)
    p.add_argument("--users", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--topics", type=int)
    p.add_argument("--exclusive-fraction", dest="exclusive_fraction", type=float)
    p.add_argument("--out", help="interaction log TSV to write")
    p.add_argument("--catalog", help="catalog TSV to write (default <out>.catalog.tsv)")

    p = command("build-graph", "clean a log and build the multi-graph file")
    p.add_argument("--log")
    p.add_argument("--catalog")
    p.add_argument("--out", help="graph file to write")
    p.add_argument("--report", help="prefix for .report.txt/.report.kv (default <out>)")
    p.add_argument("--buckets", type=int)
    p.add_argument("--workers", type=int)
    _split_args(p)

    p = command("train", "train a model variant on a graph file")
    p.add_argument("--graph")
    p.add_argument("--out", help="artifact prefix: .ckpt, .emb.tsv, .loss.csv")
    p.add_argument("--variant", help="mgfn, mgfn-mean, mgfn-weighted, mgfn-gat, dataconcat "
                                     "or single-scenario:<s>")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--negatives", help="cross_scenario, random or degree:<scenario>")
    p.add_argument("--n-negatives", dest="n_negatives", type=int)
    p.add_argument("--fanouts", help="comma-separated, input-side hop first")
    p.add_argument("--dropout", type=float)
    p.add_argument("--dtype", choices=("float64", "float32"))
    p.add_argument("--weight-mode", dest="weight_mode", choices=("log", "raw"))
    p.add_argument("--deterministic", action="store_true", default=None)

    p = command("evaluate", "retrieval metrics for an embedding table")
    p.add_argument("--embeddings")
    p.add_argument("--log")
    p.add_argument("--catalog")
    p.add_argument("--report", help="prefix for .eval.txt/.eval.kv (default <embeddings>)")
    p.add_argument("--per-query-k", dest="per_query_k", type=int)
    p.add_argument("--final-k", dest="final_k", type=int)
    p.add_argument("--queue-len", dest="queue_len", type=int)
    p.add_argument("--aggregate", choices=("max", "sum"))
    p.add_argument("--pca", nargs="?", const="pca.csv", help="write a PCA CSV (default pca.csv)")
    p.add_argument("--tags", type=int)
    p.add_argument("--sample", type=int)
    _split_args(p)

    p = command("ablate", "compare negative-sampling strategies")
    p.add_argument("--log")
    p.add_argument("--catalog")
    p.add_argument("--report", help="comparison table file")
    p.add_argument("--variant")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--fanouts")
    p.add_argument("--dtype", choices=("float64", "float32"))
    _split_args(p)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg, out)
    except (UsageError, ConfigError) as e:
        sys.stderr.write(f"mgfn {args.command}: error: {e}\n")
        return 2
    except (MGFNError, ValueError, OSError) as e:
        sys.stderr.write(f"mgfn {args.command}: {type(e).__name__}: {e}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
