"""Command-line entry point: ``fedblock <command> ...``.

Every command takes the global ``--seed``, ``--config`` and ``--verbose``
flags, derives its own seed from ``--seed`` and the command name, and echoes
a run manifest (JSON, on stderr) with digests of its inputs and outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import baseline, embedding, fedsim, filterlists, mlp
from .enrichment import Enricher, JsonCache, MemoryCache
from .errors import EmptyCorpus, FedBlockError, NotFound
from .seeding import derive_seed, file_digest, sha256_hex

logger = logging.getLogger("fedblock")

CONFIG_SECTIONS = ("ingest", "embedding", "model", "forest", "federated", "proxy")


class CommandError(Exception):
    """A stage failure reported as ``error: ...`` with a nonzero exit."""


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int
    stage_seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def add_input(self, path) -> None:
        self.inputs[str(path)] = _digest(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = _digest(path)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _digest(path) -> str:
    path = Path(path)
    if path.is_dir():
        digests = [f"{p.relative_to(path)}:{file_digest(p)}"
                   for p in sorted(path.rglob("*")) if p.is_file()]
        return sha256_hex("\n".join(digests))
    return file_digest(path)


def verify_manifest(path) -> list[str]:
    """Paths whose current digest differs from the one recorded in a manifest."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    stale = []
    for p, digest in {**data["inputs"], **data["outputs"]}.items():
        if not Path(p).exists() or _digest(p) != digest:
            stale.append(p)
    return stale


# ---------------------------------------------------------------- config

def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise CommandError(f"unknown config sections: {sorted(unknown)}")
    return data


def _section(args, name) -> dict:
    return dict(args.config_data.get(name, {}))


def _pick(value, section, key, default):
    if value is not None:
        return value
    return section.get(key, default)


# ---------------------------------------------------------------- helpers

def _read_corpus(path) -> filterlists.Corpus:
    return filterlists.Corpus.from_jsonl(Path(path).read_text(encoding="utf-8"))


def _enricher(fixtures, cache_dir):
    return Enricher.from_fixtures(fixtures, JsonCache(cache_dir) if cache_dir else MemoryCache())


def _embedder(args, section):
    kind = _pick(args.embedder, section, "embedder", "hash")
    if kind == "hash":
        return embedding.HashEmbedder(int(_pick(args.dim, section, "dim", embedding.DEFAULT_DIM)))
    if kind == "file":
        vectors = _pick(args.vectors, section, "vectors", None)
        if not vectors:
            raise CommandError("--embedder file needs --vectors")
        return embedding.FileEmbedder(vectors)
    raise CommandError(f"unknown embedder {kind!r}")


def _bundles(corpus, enricher):
    bundles, labels, missing = [], [], []
    for domain, label, _ in corpus.entries:
        try:
            bundles.append(enricher.bundle(domain))
            labels.append(label)
        except NotFound:
            missing.append(domain)
    return bundles, labels, missing


def _load_xy(path):
    instances = embedding.read_instances(path)
    if not instances:
        raise CommandError(f"{path}: no instances")
    return embedding.instances_to_arrays(instances)


def _train_config(args, section, seed) -> mlp.TrainConfig:
    return mlp.TrainConfig(
        learning_rate=float(_pick(args.learning_rate, section, "learning_rate", 0.01)),
        epochs=int(_pick(args.epochs, section, "epochs", 150)),
        batch_size=int(_pick(args.batch_size, section, "batch_size", 32)),
        seed=seed,
    )


def _architecture(width, section):
    hidden = section.get("hidden", [[416, "relu"], [32, "selu"]])
    return [mlp.LayerSpec(width)] + [mlp.LayerSpec(int(w), a) for w, a in hidden] \
        + [mlp.LayerSpec(1, "sigmoid")]


def _split(y, fraction, seed):
    from sklearn.model_selection import train_test_split

    idx = np.arange(len(y))
    return train_test_split(idx, test_size=fraction, random_state=seed % (2**32), stratify=y)


# ---------------------------------------------------------------- commands

def cmd_ingest(args, manifest: RunManifest) -> int:
    section = _section(args, "ingest")
    manifest.add_input(args.manifest)
    try:
        loaded = filterlists.load_manifest(args.manifest)
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from None
    for _, path in loaded:
        manifest.add_input(path)
    blocks, allows, rejected = filterlists.select_lists([fl for fl, _ in loaded])
    for list_id, reason in rejected:
        print(f"skipped list {list_id}: {reason}")
    cap = int(_pick(args.cap, section, "cap", 289))
    try:
        corpus = filterlists.build_corpus(blocks, allows, cap=cap, seed=manifest.stage_seed)
    except EmptyCorpus as exc:
        raise CommandError(f"empty corpus: {exc}") from None
    Path(args.out).write_text(corpus.to_jsonl(), encoding="utf-8")
    manifest.add_output(args.out)
    counts = corpus.counts()
    print(f"label0={counts[0]} label1={counts[1]}")
    print(f"lists_used={len(blocks) + len(allows)} lists_skipped={len(rejected)} "
          f"conflicts={len(corpus.conflicts)}")
    return 0


def cmd_embed(args, manifest: RunManifest) -> int:
    section = _section(args, "embedding")
    manifest.add_input(args.corpus)
    corpus = _read_corpus(args.corpus)
    enricher = _enricher(args.fixtures, args.cache_dir)
    embedder = _embedder(args, section)
    bundles, labels, missing = _bundles(corpus, enricher)
    instances, rejections = embedding.make_instances(bundles, labels, embedder)
    if not instances:
        raise CommandError("every instance was rejected or missing; nothing written")
    embedding.write_instances(args.out, instances)
    manifest.add_output(args.out)
    n0 = sum(1 for inst in instances if inst.label == 0)
    print(f"instances={len(instances)} label0={n0} label1={len(instances) - n0}")
    print(f"rejected_blank={len(rejections['BlankWhois'])} "
          f"rejected_unknown={len(rejections['UnknownTokens'])} missing={len(missing)}")
    print("note: class balance depends on the lists used; reference-scale corpora "
          "are larger and are not reproduced here")
    return 0


def cmd_train(args, manifest: RunManifest) -> int:
    section = _section(args, "model")
    manifest.add_input(args.instances)
    X, y = _load_xy(args.instances)
    cfg = _train_config(args, section, derive_seed(manifest.stage_seed, "order"))
    params = mlp.init_params(_architecture(X.shape[1], section), derive_seed(manifest.stage_seed, "init"))
    params, losses = mlp.train(params, X, y, cfg)
    mlp.save_params(params, args.out)
    manifest.add_output(args.out)
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))
    with open(loss_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, repr(float(loss))])
    manifest.add_output(loss_csv)
    print(f"epochs={len(losses)} final_loss={losses[-1]:.6f}" if losses else "epochs=0")
    return 0


def cmd_eval(args, manifest: RunManifest) -> int:
    manifest.add_input(args.model)
    manifest.add_input(args.instances)
    params = mlp.load_params(args.model)
    X, y = _load_xy(args.instances)
    report = mlp.evaluate(params, X, y, args.threshold)
    text = json.dumps(report.to_dict(), sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        manifest.add_output(args.out)
    print(text)
    return 0


def cmd_baseline(args, manifest: RunManifest) -> int:
    model_section = _section(args, "model")
    forest_section = _section(args, "forest")
    manifest.add_input(args.corpus)
    corpus = _read_corpus(args.corpus)
    bundles, labels, missing = _bundles(corpus, _enricher(args.fixtures, args.cache_dir))
    instances, rejections = embedding.make_instances(bundles, labels, _embedder(args, _section(args, "embedding")))
    kept = {inst.domain for inst in instances}
    bundles = [b for b in bundles if b.domain in kept]
    X, y = embedding.instances_to_arrays(instances)
    if len(np.unique(y)) < 2:
        raise CommandError("baseline needs both classes after enrichment")
    if not (0 < args.test_fraction < 1 and 0 <= args.val_fraction and args.test_fraction + args.val_fraction < 1):
        raise CommandError("need 0 < --test-fraction, 0 <= --val-fraction, and their sum below 1")
    train_idx, test_idx = _split(y, args.test_fraction, derive_seed(manifest.stage_seed, "split"))
    val_idx = np.zeros(0, dtype=np.int64)
    if args.val_fraction > 0:
        share = args.val_fraction / (1.0 - args.test_fraction)
        rel_train, rel_val = _split(y[train_idx], share, derive_seed(manifest.stage_seed, "val-split"))
        train_idx, val_idx = train_idx[rel_train], train_idx[rel_val]

    cfg = _train_config(args, model_section, derive_seed(manifest.stage_seed, "mlp-order"))
    params = mlp.init_params(_architecture(X.shape[1], model_section),
                             derive_seed(manifest.stage_seed, "mlp-init"))
    params, _ = mlp.train(params, X[train_idx], y[train_idx], cfg)
    mlp_report = mlp.evaluate(params, X[test_idx], y[test_idx])
    val_report = mlp.evaluate(params, X[val_idx], y[val_idx]) if val_idx.size else None

    encoder = baseline.HandFeatureEncoder()
    F_train = encoder.fit_transform([bundles[i] for i in train_idx])
    F_test = encoder.transform([bundles[i] for i in test_idx])
    fcfg = baseline.ForestConfig(**{**forest_section, "seed": derive_seed(manifest.stage_seed, "forest")})
    forest = baseline.train_forest(F_train, y[train_idx], fcfg)
    forest_report = mlp.metrics_from_scores(forest.predict_proba(F_test), y[test_idx])
    cv = baseline.cross_validate_forest(F_train, y[train_idx], fcfg, k=args.folds)
    if args.features_csv:
        baseline.write_features_csv(args.features_csv, [str(b.domain) for b in bundles],
                                    encoder.transform(bundles), encoder.get_feature_names_out())
        manifest.add_output(args.features_csv)

    rows = [("Our Neural Network", mlp_report), ("RandomForest", forest_report)]
    print(f"{'Algorithm':<20}{'Accuracy':>10}{'ROC Value':>11}{'F1':>8}")
    for name, rep in rows:
        print(f"{name:<20}{rep.accuracy:>10.1%}{rep.roc_auc:>11.1%}{rep.f1:>8.3f}")
    print(f"forest {args.folds}-fold CV accuracy: mean={np.mean(cv):.4f} std={np.std(cv):.4f}")
    if val_report is not None:
        print(f"network validation accuracy: {val_report.accuracy:.4f}")
    result = {"mlp": mlp_report.to_dict(), "forest": forest_report.to_dict(),
              "mlp_validation": val_report.to_dict() if val_report else None,
              "forest_cv": [float(v) for v in cv], "n_train": int(len(train_idx)),
              "n_val": int(len(val_idx)), "n_test": int(len(test_idx)), "missing": len(missing),
              "rejected": {k: len(v) for k, v in rejections.items()}}
    if args.out:
        Path(args.out).write_text(json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")
        manifest.add_output(args.out)
    return 0


def _experiment_configs(args):
    if args.grid:
        return fedsim.load_configs(args.grid)
    section = _section(args, "federated")
    if not section:
        raise CommandError("experiment needs --grid or a 'federated' config section")
    if "grid" in section:
        base = section.get("base", {})
        return [fedsim.ExperimentConfig.from_dict({**base, **e}) for e in section["grid"]]
    return [fedsim.ExperimentConfig.from_dict(section)]


def cmd_experiment(args, manifest: RunManifest) -> int:
    manifest.add_input(args.instances)
    manifest.add_input(args.test)
    if args.grid:
        manifest.add_input(args.grid)
    X, y = _load_xy(args.instances)
    X_test, y_test = _load_xy(args.test)
    configs = _experiment_configs(args)
    reports = []
    for i, cfg in enumerate(configs):
        cfg.seed = derive_seed(manifest.stage_seed, "config", i, cfg.seed)
        logger.info("experiment %d %s", i, cfg.label)
        rep = fedsim.run_experiment(cfg, X, y, X_test, y_test, n_jobs=args.jobs)
        reports.append(rep)
        print(",".join(rep.table6_row(i)))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fedsim.write_table6(out / "table6.csv", reports)
    fedsim.write_table7(out / "table7.csv", reports)
    manifest.add_output(out / "table6.csv")
    manifest.add_output(out / "table7.csv")
    flags = [fedsim.compare_systems(r) for r in reports]
    for key in ("finetuned_vs_private_test", "finetuned_vs_central_test", "finetuned_vs_central_local"):
        wins = sum(f[key] == "finetuned" for f in flags)
        print(f"{key}: finetuned wins {wins}/{len(flags)}")
    return 0


def cmd_serve(args, manifest: RunManifest) -> int:
    from .proxy import ProxyConfig, serve

    if args.proxy_config:
        manifest.add_input(args.proxy_config)
        config = ProxyConfig.from_json(args.proxy_config)
    else:
        section = _section(args, "proxy")
        if not section:
            raise CommandError("serve needs a proxy config file or a 'proxy' config section")
        config = ProxyConfig.from_dict(section)
    stop = threading.Event()
    print(f"serving on {config.listen_host}:{config.listen_port}", flush=True)
    try:
        serve(config, stop)
    except KeyboardInterrupt:
        stop.set()
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedblock", description="Federated DNS blocklist classifier.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON config with sections " + ", ".join(CONFIG_SECTIONS))
    p.add_argument("--verbose", "-v", action="count", default=0)
    p.add_argument("--manifest-out", help="also write the run manifest to this file")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="filter lists -> labeled domain corpus")
    s.add_argument("manifest")
    s.add_argument("out")
    s.add_argument("--cap", type=int)
    s.set_defaults(func=cmd_ingest)

    def embed_flags(s):
        s.add_argument("--embedder", choices=("hash", "file"))
        s.add_argument("--dim", type=int)
        s.add_argument("--vectors", help="vector table for --embedder file")
        s.add_argument("--cache-dir")

    def train_flags(s):
        s.add_argument("--epochs", type=int)
        s.add_argument("--learning-rate", type=float)
        s.add_argument("--batch-size", type=int)

    s = sub.add_parser("embed", help="corpus + enrichment fixtures -> instances")
    s.add_argument("corpus")
    s.add_argument("fixtures")
    s.add_argument("out")
    embed_flags(s)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("train", help="train the classifier")
    s.add_argument("instances")
    s.add_argument("out")
    s.add_argument("--loss-csv")
    train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics of a model on instances")
    s.add_argument("model")
    s.add_argument("instances")
    s.add_argument("--out")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", help="random forest on hand features beside the MLP")
    s.add_argument("corpus")
    s.add_argument("fixtures")
    s.add_argument("--out")
    s.add_argument("--features-csv")
    s.add_argument("--test-fraction", type=float, default=0.1)
    s.add_argument("--val-fraction", type=float, default=0.1,
                   help="held out from training to monitor the network (0 disables)")
    s.add_argument("--folds", type=int, default=5)
    embed_flags(s)
    train_flags(s)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("experiment", help="federated simulation grid -> table CSVs")
    s.add_argument("instances")
    s.add_argument("--test", required=True, help="held-out instances")
    s.add_argument("--grid", help="experiment config JSON (overrides the config section)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("serve", help="run the DNS proxy")
    s.add_argument("proxy_config", nargs="?")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = time.perf_counter()
    try:
        args.config_data = load_config(args.config)
        config_digest = file_digest(args.config) if args.config else sha256_hex("")
        manifest = RunManifest(args.command, config_digest, args.seed, derive_seed(args.seed, args.command))
        code = args.func(args, manifest)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FedBlockError, OSError, ValueError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    manifest.wall_time = round(time.perf_counter() - started, 3)
    print("manifest: " + manifest.to_json(), file=sys.stderr)
    if args.manifest_out:
        manifest.write(args.manifest_out)
    return code


if __name__ == "__main__":
    sys.exit(main())
