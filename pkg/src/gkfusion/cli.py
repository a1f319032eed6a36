"""Subcommand pipeline: weights -> train-gk -> train-task -> eval, plus
gen-synthetic and embed-toy helpers.

Every command accepts ``--config file.json`` (flat keys mirroring the
flags; explicit flags win), derives all randomness from one ``--seed``,
writes outputs atomically, and emits a JSON run report with counters and
sha256 hashes of every artifact.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__
from .embeddings import (
    FileEmbeddingStore,
    StoreMetadata,
    ToyAdditiveEmbedder,
    store_load,
    store_to_bytes,
)
from .errors import GkfusionError, InvalidArgument, TrainingDivergedError
from .gkstore import GKTrainConfig, gk_load, gk_to_bytes, train_gk
from .numerics import derive_seed
from .relweights import (
    _read_jsonl,
    filter_correct,
    load_entities,
    load_relations,
    load_triples,
    load_weights_jsonl,
    normalize_weights,
    score_pairs,
    weights_jsonl_text,
)
from .synthgen import gen_synthetic, write_synth_task
from .taskfusion import (
    TaskTrainConfig,
    evaluate,
    load_task_docs,
    model_load,
    model_to_bytes,
    train_task,
)

USAGE_ERROR = 1
DATA_ERROR = 2
DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _merge_config(args: argparse.Namespace, argv: list[str]) -> dict:
    """Config file values fill in flags the user did not set explicitly."""
    merged = vars(args).copy()
    config_path = merged.pop("config", None)
    if not config_path:
        return merged
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgument(f"cannot read config file {config_path}: {exc}") from exc
    if not isinstance(file_cfg, dict):
        raise InvalidArgument("config file must hold a JSON object")
    valid = set(merged)
    unknown = [k for k in file_cfg if k.replace("-", "_") not in valid]
    if unknown:
        raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
    explicit = _explicit_flags(argv)
    for key, value in file_cfg.items():
        dest = key.replace("-", "_")
        if dest not in explicit:
            merged[dest] = value
    return merged


def _explicit_flags(argv: list[str]) -> set[str]:
    out = set()
    for token in argv:
        if token.startswith("--"):
            out.add(token[2:].split("=", 1)[0].replace("-", "_"))
    return out


def _provider(cfg: dict):
    if cfg.get("toy"):
        return ToyAdditiveEmbedder(dim=int(cfg.get("dim") or 32), seed=derive_seed(int(cfg["seed"]), "toy-embedder"))
    if cfg.get("embeddings"):
        return store_load(cfg["embeddings"])
    raise InvalidArgument("choose an embedding source: --toy or --embeddings FILE")


def _write_report(cfg: dict, command: str, counters: dict, artifacts: list[Path], started: float, extra: dict | None = None) -> None:
    report = {
        "command": command,
        "version": __version__,
        "config": {k: v for k, v in sorted(cfg.items()) if k not in ("func", "report")},
        "counters": counters,
        "artifacts": {str(p): sha256_file(p) for p in artifacts},
        "wall_time_s": time.monotonic() - started,
    }
    if extra:
        report.update(extra)
    report_path = cfg.get("report") or (str(artifacts[0]) + ".report.json" if artifacts else None)
    if report_path:
        write_atomic(report_path, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    print(json.dumps({"command": command, "counters": counters}, sort_keys=True))


# ---------------------------------------------------------------------------
# Commands


def cmd_weights(cfg: dict) -> int:
    started = time.monotonic()
    provider = _provider(cfg)
    entities = load_entities(cfg["entities"])
    schema = load_relations(cfg["relations"])
    triples = load_triples(cfg["triples"], entities, schema)
    run = score_pairs(provider, triples, entities, schema, cross_product=bool(cfg.get("cross_product")))
    out = Path(cfg["out"])
    write_atomic(out, weights_jsonl_text(run, emit_all=bool(cfg.get("emit_all"))).encode("utf-8"))
    kept, _stats = filter_correct(run.predictions)
    _groups, dropped_zero_mass = normalize_weights(kept)
    counters = {
        "pairs": run.pairs,
        "correct": run.correct,
        "ratio": run.ratio,
        "dropped_zero_norm": run.dropped_zero_norm,
        "dropped_zero_mass_groups": dropped_zero_mass,
    }
    _write_report(cfg, "weights", counters, [out], started)
    return 0


def cmd_train_gk(cfg: dict) -> int:
    started = time.monotonic()
    provider = _provider(cfg)
    entities = load_entities(cfg["entities"])
    schema = load_relations(cfg["relations"])
    weighted = load_weights_jsonl(cfg["weights"], correct_only=True)
    config = GKTrainConfig(
        hidden=int(cfg.get("hidden") or 128),
        out_dim=int(cfg.get("out_dim") or 64),
        lam=float(cfg["lam"]) if cfg.get("lam") is not None else 0.1,
        epochs=int(cfg.get("epochs") or 1000),
        lr=float(cfg.get("lr") or 0.01),
        seed=int(cfg["seed"]),
    )
    # provenance must not embed absolute paths: basename + content hash
    source = f"{Path(cfg['weights']).name}:{sha256_file(cfg['weights'])[:16]}"
    result = train_gk(weighted, provider, entities, schema, config, source=source)
    out = Path(cfg["out"])
    write_atomic(out, gk_to_bytes(result.store))
    artifacts = [out]
    loss_csv = cfg.get("loss_csv")
    if loss_csv:
        lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(result.losses)]
        write_atomic(loss_csv, ("\n".join(lines) + "\n").encode("utf-8"))
        artifacts.append(Path(loss_csv))
    counters = {
        "entities": len(result.store.nodes),
        "groups": result.store.provenance["groups"],
        "dropped_zero_mass_groups": result.dropped_zero_mass,
        "collapse_warning": result.collapse_warning,
        "loss_first": result.losses[0],
        "loss_final": result.losses[-1],
    }
    _write_report(cfg, "train-gk", counters, artifacts, started)
    return 0


def cmd_train_task(cfg: dict) -> int:
    started = time.monotonic()
    provider = _provider(cfg)
    train_docs = load_task_docs(cfg["train"])
    dev_docs = load_task_docs(cfg["dev"]) if cfg.get("dev") else None
    gk = gk_load(cfg["gk"]) if cfg.get("gk") else None
    gk_hash_before = sha256_file(cfg["gk"]) if cfg.get("gk") else None
    config = TaskTrainConfig(
        gcn_hidden=int(cfg.get("gcn_hidden") or 128),
        gcn_out=int(cfg.get("gcn_out") or 64),
        head_hidden=int(cfg.get("head_hidden") or 128),
        epochs=int(cfg.get("epochs") or 50),
        lr=float(cfg.get("lr") or 0.02),
        neg_ratio=int(cfg.get("neg_ratio") if cfg.get("neg_ratio") is not None else 3),
        link_k=int(cfg.get("link_k") or 0),
        link_tau=float(cfg.get("link_tau") if cfg.get("link_tau") is not None else 0.7),
        seed=int(cfg["seed"]),
    )
    result = train_task(train_docs, gk, provider, config, dev_docs=dev_docs)
    out = Path(cfg["out"])
    write_atomic(out, model_to_bytes(result.model))
    gk_hash_after = sha256_file(cfg["gk"]) if cfg.get("gk") else None
    if gk_hash_before is not None and gk_hash_before != gk_hash_after:
        raise GkfusionError("GK store file changed during task training")
    counters = dict(result.counters)
    counters.update(
        {
            "epochs": config.epochs,
            "best_epoch": result.best_epoch,
            "loss_first": result.losses[0] if result.losses else None,
            "loss_final": result.losses[-1] if result.losses else None,
        }
    )
    if result.dev_history:
        best = max(result.dev_history, key=lambda h: h["relation_f1"])
        counters["best_dev_relation_f1"] = best["relation_f1"]
        counters["best_dev_entity_f1"] = best["entity_f1"]
    extra = {"gk_sha256": gk_hash_before}
    _write_report(cfg, "train-task", counters, [out], started, extra=extra)
    return 0


def cmd_eval(cfg: dict) -> int:
    started = time.monotonic()
    model = model_load(cfg["model"])
    docs = load_task_docs(cfg["docs"])
    report = evaluate(model, docs)
    out = cfg.get("out")
    artifacts = []
    if out:
        write_atomic(out, (json.dumps(report, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        artifacts.append(Path(out))
    print(f"entity_f1={report['entity']['f1']:.4f} relation_f1={report['relation']['f1']:.4f}")
    counters = {
        "entity_f1": report["entity"]["f1"],
        "relation_f1": report["relation"]["f1"],
        "documents": report["counts"]["documents"],
    }
    _write_report(cfg, "eval", counters, artifacts, started)
    return 0


def cmd_gen_synthetic(cfg: dict) -> int:
    started = time.monotonic()
    task = gen_synthetic(
        num_entities=int(cfg["entities"]),
        num_relations=int(cfg["relations"]),
        num_docs=int(cfg["docs"]),
        noise=float(cfg["noise"]),
        seed=int(cfg["seed"]),
        dev_fraction=float(cfg.get("dev_fraction") if cfg.get("dev_fraction") is not None else 0.2),
        holdout_fraction=float(cfg.get("holdout_fraction") if cfg.get("holdout_fraction") is not None else 0.3),
        doc_seed=int(cfg["doc_seed"]) if cfg.get("doc_seed") is not None else None,
    )
    paths = write_synth_task(task, cfg["out_dir"])
    counters = {k: v for k, v in task.meta.items() if not isinstance(v, list)}
    _write_report(cfg, "gen-synthetic", counters, sorted(paths.values()), started)
    return 0


def cmd_embed_toy(cfg: dict) -> int:
    started = time.monotonic()
    provider = ToyAdditiveEmbedder(dim=int(cfg.get("dim") or 32), seed=derive_seed(int(cfg["seed"]), "toy-embedder"))
    rows = []
    for lineno, obj in _read_jsonl(cfg["vocab"]):
        if "id" not in obj:
            raise InvalidArgument(f"{cfg['vocab']}:{lineno}: vocab rows need an 'id'")
        text = obj.get("surface") or obj.get("text") or obj.get("verbalization")
        if not text:
            raise InvalidArgument(f"{cfg['vocab']}:{lineno}: vocab rows need surface/text/verbalization")
        rows.append((str(obj["id"]), str(text)))
    entries = {key: provider.embed(text) for key, text in rows}
    store = FileEmbeddingStore(
        dim=provider.dim,
        entries=entries,
        metadata=StoreMetadata(source="toy-additive", pooling="token-sum", extra={"seed": int(cfg["seed"])}),
    )
    out = Path(cfg["out"])
    write_atomic(out, store_to_bytes(store))
    _write_report(cfg, "embed-toy", {"records": len(entries), "dim": provider.dim}, [out], started)
    return 0


# ---------------------------------------------------------------------------
# Parser wiring


def _add_common(p: _Parser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed; all module seeds derive from it")
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("--report", help="run report path (default: <out>.report.json)")
    p.add_argument("--threads", type=int, default=1, help="worker cap; results are identical for any value")


def _add_provider_flags(p: _Parser) -> None:
    p.add_argument("--toy", action="store_true", help="deterministic additive toy embedder")
    p.add_argument("--dim", type=int, help="toy embedder dimension (default 32)")
    p.add_argument("--embeddings", help="KGXE embedding file")


def build_parser() -> _Parser:
    parser = _Parser(prog="gkfusion", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gkfusion {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("weights", help="score relation weights for subject-object pairs")
    p.add_argument("--triples", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--relations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-all", action="store_true", help="write every scored relation, not just the argmax")
    p.add_argument("--cross-product", action="store_true", help="score all ordered entity pairs")
    _add_provider_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("train-gk", help="train the relational encoder and save the GK store")
    p.add_argument("--weights", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--relations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, help="anchor regularizer weight (default 0.1)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--out-dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss-csv", help="write the loss curve as epoch,loss")
    _add_provider_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_gk)

    p = sub.add_parser("train-task", help="train fusion GCN and extraction heads")
    p.add_argument("--train", required=True)
    p.add_argument("--dev", help="dev documents; tracks the best epoch by relation F1")
    p.add_argument("--gk", help="frozen GK store; omit for the no-GK ablation")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gcn-hidden", type=int)
    p.add_argument("--gcn-out", type=int)
    p.add_argument("--head-hidden", type=int)
    p.add_argument("--neg-ratio", type=int)
    p.add_argument("--link-k", type=int, help="top-k cosine links from task nodes to store nodes")
    p.add_argument("--link-tau", type=float)
    _add_provider_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_task)

    p = sub.add_parser("eval", help="evaluate a trained model on documents")
    p.add_argument("--model", required=True)
    p.add_argument("--docs", required=True)
    p.add_argument("--out", help="metrics report JSON")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic task dataset")
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--relations", type=int, required=True)
    p.add_argument("--docs", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dev-fraction", type=float)
    p.add_argument("--holdout-fraction", type=float)
    p.add_argument("--doc-seed", type=int, help="vary the document split over a fixed knowledge structure")
    _add_common(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("embed-toy", help="materialize toy vectors for a vocabulary into KGXE")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    _add_provider_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_embed_toy)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args, argv)
        return cfg["func"](cfg)
    except TrainingDivergedError as exc:
        print(f"gkfusion: {exc}", file=sys.stderr)
        return DIVERGED
    except GkfusionError as exc:
        print(f"gkfusion: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
