"""Command-line entry point for the template-prediction pipeline.

Subcommands: ingest, split, synth, train, eval, predict, render, weights.
Options resolve as flags > SPATIAL_TEMPLATES_* environment variables >
--config file (JSON or key=value lines) > built-in defaults, and every
artifact embeds the fully resolved configuration for provenance.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus, embed, metrics, models, render

logger = logging.getLogger(__name__)

ENV_PREFIX = "SPATIAL_TEMPLATES_"

KNOWN_ERRORS = (corpus.CorpusError, embed.EmbeddingError, models.ModelError,
                metrics.MetricError, render.RenderError, ValueError,
                RuntimeError, OSError)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key=value): {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


@dataclass
class Resolver:
    """flags > environment > config file > defaults."""

    args: argparse.Namespace
    file_values: dict

    def get(self, key: str, default=None, cast=None):
        value = getattr(self.args, key, None)
        if value is None:
            env = os.environ.get(ENV_PREFIX + key.upper())
            if env is not None:
                value = env
            elif key in self.file_values:
                value = self.file_values[key]
        if value is None:
            return default
        if cast is not None and isinstance(value, str):
            return cast(value)
        return value

    def resolved(self, spec: dict) -> dict:
        return {key: self.get(key, default, cast)
                for key, (default, cast) in spec.items()}


def _parse_hidden(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _corpus_meta_path(corpus_path: str | Path) -> Path:
    return Path(str(corpus_path) + ".meta.json")


def _load_corpus_meta(corpus_path: str | Path) -> dict | None:
    meta_path = _corpus_meta_path(corpus_path)
    if meta_path.exists():
        return json.loads(meta_path.read_text())
    return None


# ---------------------------------------------------------------------------
# Embedding table construction
# ---------------------------------------------------------------------------

def build_tables(variant: str, vocabs, vectors_path: str | None,
                 dim: int, seed: int) -> list[embed.EmbeddingTable]:
    if variant == "1h":
        return [embed.make_one_hot(v) for v in vocabs]
    if variant in ("emb", "rnd"):
        if not vectors_path:
            raise embed.EmbeddingError(
                f"variant {variant!r} requires --vectors")
        pretrained = embed.load_pretrained_many(vectors_path, dim, list(vocabs))
        if variant == "emb":
            return pretrained
        return [embed.make_random_matched(ref, v, seed + offset)
                for offset, (ref, v) in enumerate(zip(pretrained, vocabs))]
    raise embed.EmbeddingError(f"unknown embedding variant {variant!r}")


def _resolve_split(instances, plan: corpus.SplitPlan | None, fold: int | None):
    """Return (train, test, fold_label) for the requested plan slice."""
    if plan is None:
        return list(instances), [], None
    if plan.kind == "cv":
        if fold is None:
            raise corpus.CorpusError("a cv plan needs --fold")
        train, test = corpus.cv_fold_split(instances, plan, fold)
        return train, test, fold
    train, test = corpus.generalized_split(instances, plan)
    return train, test, None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(resolver: Resolver) -> int:
    opts = resolver.resolved({
        "format": ("canonical_jsonl", str),
        "input": (None, str),
        "image_meta": (None, str),
        "stoplist": (None, str),
        "vectors": (None, str),
        "strict": (False, None),
        "out_dir": (None, str),
    })
    if not opts["input"] or not opts["out_dir"]:
        raise ValueError("ingest requires --input and --out-dir")
    out_dir = Path(opts["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    image_meta = None
    if opts["format"] == "vg_relationships":
        if not opts["image_meta"]:
            raise ValueError("vg_relationships requires --image-meta")
        image_meta = corpus.load_vg_image_meta(opts["image_meta"])

    stoplist = corpus.load_stoplist(opts["stoplist"])
    records, parse_stats = corpus.parse_scene_graph(
        opts["input"], opts["format"], strict=bool(opts["strict"]),
        image_meta=image_meta)

    dropped_no_vector = 0
    if opts["vectors"]:
        available = embed.available_tokens(opts["vectors"])
        records, dropped_no_vector = corpus.filter_embeddable(records, available)

    implicit, explicit = corpus.partition_explicit(records, stoplist)
    outputs = {}
    for name, part in (("implicit", implicit), ("explicit", explicit)):
        instances, prep_stats = corpus.preprocess_records(
            part, strict=bool(opts["strict"]))
        corpus.assert_preprocessed(instances)
        path = out_dir / f"{name}.jsonl"
        corpus.save_corpus_jsonl(instances, path)
        meta = {
            "partition": name,
            "stoplist_sha256": corpus.stoplist_sha256(stoplist),
            "mirrored": True,
            "n_instances": len(instances),
            "parse_stats": parse_stats.as_dict(),
            "preprocess_stats": prep_stats.as_dict(),
            "dropped_no_vector": dropped_no_vector,
            "config": {k: opts[k] for k in ("format", "input", "strict")},
        }
        _write_json(_corpus_meta_path(path), meta)
        outputs[name] = len(instances)

    print(json.dumps({"implicit": outputs["implicit"],
                      "explicit": outputs["explicit"],
                      "parse_stats": parse_stats.as_dict(),
                      "dropped_no_vector": dropped_no_vector},
                     sort_keys=True))
    return 0


def cmd_synth(resolver: Resolver) -> int:
    opts = resolver.resolved({
        "rules": ("default8", str),
        "n": (20000, int),
        "noise": (0.02, float),
        "seed": (7, int),
        "out_dir": (None, str),
    })
    if not opts["out_dir"]:
        raise ValueError("synth requires --out-dir")
    rules = _load_rules(opts["rules"])
    instances = corpus.generate_synthetic(rules, opts["n"], opts["noise"],
                                          opts["seed"])
    corpus.assert_preprocessed(instances)
    out_dir = Path(opts["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "synthetic.jsonl"
    corpus.save_corpus_jsonl(instances, path)
    meta = {
        "partition": "synthetic",
        "stoplist_sha256": None,
        "mirrored": True,
        "n_instances": len(instances),
        "rules": [rule.__dict__ for rule in rules],
        "config": {k: opts[k] for k in ("rules", "n", "noise", "seed")},
    }
    _write_json(_corpus_meta_path(path), meta)
    print(json.dumps({"written": str(path), "n": len(instances)}))
    return 0


def _load_rules(spec: str):
    if spec in corpus.RULE_SETS:
        return corpus.RULE_SETS[spec]
    data = json.loads(Path(spec).read_text())
    return [corpus.SyntheticRule(**entry) for entry in data]


def cmd_split(resolver: Resolver) -> int:
    opts = resolver.resolved({
        "corpus": (None, str),
        "mode": ("cv", str),
        "k": (10, int),
        "seed": (0, int),
        "n_pick": (100, int),
        "top_m": (1000, int),
        "words_file": (None, str),
        "out": (None, str),
    })
    if not opts["corpus"] or not opts["out"]:
        raise ValueError("split requires --corpus and --out")
    instances = corpus.load_corpus_jsonl(opts["corpus"])
    mode = opts["mode"]
    if mode == "cv":
        plan = corpus.make_cv_folds(instances, opts["k"], opts["seed"])
    elif mode == "gen-triplets":
        plan = corpus.make_generalized_triplet_split(
            instances, n_pick=opts["n_pick"], top_m=opts["top_m"],
            seed=opts["seed"])
    elif mode == "gen-words":
        words = corpus.load_generalized_words(opts["words_file"])
        plan = corpus.make_generalized_word_split(instances, words)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    plan.save(opts["out"])
    sizes = ([len(f) for f in plan.folds] if plan.folds is not None
             else {"train": len(plan.train_ids), "test": len(plan.test_ids)})
    print(json.dumps({"written": opts["out"], "kind": plan.kind,
                      "sizes": sizes}, sort_keys=True))
    return 0


def cmd_train(resolver: Resolver) -> int:
    opts = resolver.resolved({
        "corpus": (None, str),
        "head": ("reg", str),
        "emb": ("1h", str),
        "vectors": (None, str),
        "dim": (300, int),
        "split_plan": (None, str),
        "fold": (None, int),
        "seed": (0, int),
        "epochs": (10, int),
        "batch": (64, int),
        "lr": (1e-4, float),
        "hidden": ("100,100", None),
        "grid_size": (15, int),
        "no_subject_size": (False, None),
        "out": (None, str),
    })
    if not opts["corpus"] or not opts["out"]:
        raise ValueError("train requires --corpus and --out")
    instances = corpus.load_corpus_jsonl(opts["corpus"])
    meta = _load_corpus_meta(opts["corpus"]) or {}
    vocabs = corpus.build_vocabs(instances)
    tables = build_tables(opts["emb"], vocabs, opts["vectors"], opts["dim"],
                          opts["seed"])
    plan = (corpus.SplitPlan.load(opts["split_plan"])
            if opts["split_plan"] else None)
    train_set, _, fold = _resolve_split(instances, plan, opts["fold"])
    if not train_set:
        raise corpus.CorpusError("resolved training set is empty")

    config = models.TrainConfig(
        epochs=opts["epochs"], batch_size=opts["batch"],
        learning_rate=opts["lr"], hidden_sizes=_parse_hidden(opts["hidden"]),
        grid_size=opts["grid_size"],
        include_subject_size=not opts["no_subject_size"])
    provenance = {
        "stoplist_sha256": meta.get("stoplist_sha256"),
        "mirrored": meta.get("mirrored", True),
        "corpus": Path(opts["corpus"]).name,
        "fold": fold,
        "split_kind": plan.kind if plan else None,
        "emb": opts["emb"],
        "cli_config": {k: v for k, v in opts.items() if k != "out"},
    }
    model = models.train(train_set, opts["head"], tables, config=config,
                         seed=opts["seed"], provenance=provenance)
    models.save_model(model, opts["out"])
    print(json.dumps({"written": opts["out"], "head": opts["head"],
                      "final_loss": model.epoch_losses[-1]}, sort_keys=True))
    return 0


def cmd_eval(resolver: Resolver) -> int:
    opts = resolver.resolved({
        "corpus": (None, str),
        "split_plan": (None, str),
        "models": (None, None),
        "ctrl": (False, None),
        "head": (None, str),
        "fold": (None, int),
        "seed": (0, int),
        "grid_size": (15, int),
        "jobs": (1, int),
        "out": (None, str),
    })
    if not opts["corpus"]:
        raise ValueError("eval requires --corpus")
    instances = corpus.load_corpus_jsonl(opts["corpus"])
    meta = _load_corpus_meta(opts["corpus"])
    corpus_prov = None
    if meta is not None:
        corpus_prov = {"stoplist_sha256": meta.get("stoplist_sha256"),
                       "mirrored": meta.get("mirrored")}
    plan = (corpus.SplitPlan.load(opts["split_plan"])
            if opts["split_plan"] else None)

    if opts["ctrl"]:
        if not opts["head"]:
            raise ValueError("--ctrl requires --head")
        train_set, test_set, fold = _resolve_split(instances, plan, opts["fold"])
        if not test_set:
            raise metrics.MetricError("ctrl evaluation needs a test split")
        baseline = metrics.CtrlBaseline.fit(
            train_set, opts["head"], seed=opts["seed"],
            grid_size=opts["grid_size"])
        fold_result = metrics.evaluate(baseline, test_set, corpus_prov)
        fold_result["fold"] = fold
        report = metrics.EvalReport.from_folds(
            f"ctrl_{opts['head']}", plan.kind if plan else "full",
            [fold_result], config={k: v for k, v in opts.items()})
    else:
        model_paths = opts["models"]
        if not model_paths:
            raise ValueError("eval requires --models or --ctrl")

        def eval_one(path: str) -> dict:
            model = models.load_model(path)
            fold = model.provenance.get("fold")
            if fold is None and plan is not None and plan.kind == "cv":
                raise metrics.MetricError(
                    f"checkpoint {path} carries no fold; cannot align with a "
                    f"cv plan")
            _, test_set, fold = _resolve_split(instances, plan, fold)
            if not test_set:
                test_set = instances
            result = metrics.evaluate(model, test_set, corpus_prov)
            result["fold"] = fold
            result["model"] = Path(path).name
            return result

        if opts["jobs"] > 1:
            with ThreadPoolExecutor(max_workers=opts["jobs"]) as pool:
                per_fold = list(pool.map(eval_one, model_paths))
        else:
            per_fold = [eval_one(p) for p in model_paths]
        head = models.load_model(model_paths[0]).head
        report = metrics.EvalReport.from_folds(
            head, plan.kind if plan else "full", per_fold,
            config={k: v for k, v in opts.items()})

    print(report.to_table())
    if opts["out"]:
        _write_json(opts["out"], report.to_json_dict())
    return 0


def _parse_query(text: str) -> tuple[str, str, str]:
    parts = [corpus.normalize_token(p) for p in text.split(",")]
    if len(parts) != 3 or not all(parts):
        raise ValueError('query must be "subject,relation,object"')
    return parts[0], parts[1], parts[2]


def _parse_box(text: str) -> corpus.Box:
    values = [float(v) for v in text.split(",")]
    if len(values) != 4:
        raise ValueError('subject box must be "cx,cy,half_w,half_h"')
    return corpus.Box(*values)


def cmd_predict(resolver: Resolver) -> int:
    opts = resolver.resolved({
        "model": (None, str),
        "query": (None, str),
        "subject_box": ("0.5,0.5,0.1,0.2", str),
        "out": (None, str),
    })
    if not opts["model"] or not opts["query"]:
        raise ValueError("predict requires --model and --query")
    model = models.load_model(opts["model"])
    s, r, o = _parse_query(opts["query"])
    box = _parse_box(opts["subject_box"])
    query = models.Query(s, r, o, box)
    payload = {
        "query": {"s": s, "r": r, "o": o,
                  "s_box": [box.center_x, box.center_y, box.half_w, box.half_h]},
        "head": model.head,
    }
    if model.head == "reg":
        pred = models.predict_reg(model, query)
        payload["center"] = [float(v) for v in pred.center]
        payload["half"] = [float(v) for v in pred.half]
    else:
        grid = models.predict_pix(model, query)
        payload["grid_size"] = model.grid_size
        payload["grid"] = [float(v) for v in grid.reshape(-1)]
    line = json.dumps(payload, sort_keys=True)
    if opts["out"]:
        with open(opts["out"], "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    print(line)
    return 0


def cmd_render(resolver: Resolver) -> int:
    opts = resolver.resolved({
        "prediction_file": (None, str),
        "out_dir": (None, str),
        "canvas": (render.DEFAULT_CANVAS, int),
        "show_reflection": (False, None),
    })
    if not opts["prediction_file"] or not opts["out_dir"]:
        raise ValueError("render requires --prediction-file and --out-dir")
    out_dir = Path(opts["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with open(opts["prediction_file"], "r", encoding="utf-8") as fh:
        for idx, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            q = payload["query"]
            query = models.Query(q["s"], q["r"], q["o"],
                                 corpus.Box(*q["s_box"]))
            if payload["head"] == "reg":
                scene = render.Scene(
                    query=query, canvas=opts["canvas"],
                    reg=models.RegPrediction(
                        center=np.asarray(payload["center"]),
                        half=np.asarray(payload["half"])))
            else:
                m_side = int(payload["grid_size"])
                grid = np.asarray(payload["grid"]).reshape(m_side, m_side)
                scene = render.Scene(query=query, canvas=opts["canvas"],
                                     heatmap=grid)
            svg = render.render_scene(scene,
                                      show_reflection=bool(opts["show_reflection"]))
            path = out_dir / f"scene-{idx:04d}.svg"
            path.write_text(svg)
            written.append(str(path))
    print(json.dumps({"written": written}, sort_keys=True))
    return 0


def cmd_weights(resolver: Resolver) -> int:
    opts = resolver.resolved({
        "corpus": (None, str),
        "iterations": (20000, int),
        "top_k": (10, int),
        "dim_index": (1, int),
        "out_csv": (None, str),
    })
    if not opts["corpus"]:
        raise ValueError("weights requires --corpus")
    instances = corpus.load_corpus_jsonl(opts["corpus"])
    meta = _load_corpus_meta(opts["corpus"]) or {}
    vocabs = corpus.build_vocabs(instances)
    tables = [embed.make_one_hot(v) for v in vocabs]
    model = models.fit_linear_interpreter(
        instances, tables, iterations=opts["iterations"],
        provenance={"stoplist_sha256": meta.get("stoplist_sha256"),
                    "mirrored": meta.get("mirrored", True)})
    dim = opts["dim_index"]
    dim_name = models.OUTPUT_DIMS[dim]
    for role in ("relation", "object"):
        largest = models.rank_weights(model, dim, role, top_k=opts["top_k"])
        smallest = models.rank_weights(model, dim, role, top_k=opts["top_k"],
                                       smallest=True)
        print(f"# {role} weights on {dim_name} (largest |w|)")
        for token, weight in largest:
            print(f"{token}\t{weight:+.6f}")
        print(f"# {role} weights on {dim_name} (smallest |w|)")
        for token, weight in smallest:
            print(f"{token}\t{weight:+.6f}")
    if opts["out_csv"]:
        lines = ["role,token,center_x,center_y,half_w,half_h"]
        for role in ("subject", "relation", "object"):
            ranked = {t: [0.0] * 4 for t, _ in
                      models.rank_weights(model, 0, role)}
            for d in range(4):
                for token, weight in models.rank_weights(model, d, role):
                    ranked[token][d] = weight
            for token in sorted(ranked):
                values = ",".join(f"{v:+.8f}" for v in ranked[token])
                lines.append(f"{role},{token},{values}")
        Path(opts["out_csv"]).write_text("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatial-templates",
        description="Predict relative object location and size from "
                    "(subject, relation, object) text.")
    parser.add_argument("--config", help="JSON or key=value config file")
    parser.add_argument("--verbose", action="store_true", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and preprocess annotations")
    p.add_argument("--format", choices=["canonical_jsonl", "vg_relationships"])
    p.add_argument("--input")
    p.add_argument("--image-meta", dest="image_meta")
    p.add_argument("--stoplist")
    p.add_argument("--vectors", help="drop instances lacking word vectors")
    p.add_argument("--strict", action="store_true", default=None)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--rules", help="rule set name or JSON file")
    p.add_argument("--n", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="build an evaluation split plan")
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=["cv", "gen-triplets", "gen-words"])
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-pick", dest="n_pick", type=int)
    p.add_argument("--top-m", dest="top_m", type=int)
    p.add_argument("--words-file", dest="words_file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--corpus")
    p.add_argument("--head", choices=["reg", "pix"])
    p.add_argument("--emb", choices=["1h", "emb", "rnd"])
    p.add_argument("--vectors")
    p.add_argument("--dim", type=int)
    p.add_argument("--split-plan", dest="split_plan")
    p.add_argument("--fold", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden")
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--no-subject-size", dest="no_subject_size",
                   action="store_true", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate models or the control baseline")
    p.add_argument("--corpus")
    p.add_argument("--split-plan", dest="split_plan")
    p.add_argument("--models", nargs="+")
    p.add_argument("--ctrl", action="store_true", default=None)
    p.add_argument("--head", choices=["reg", "pix"])
    p.add_argument("--fold", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict for one query")
    p.add_argument("--model")
    p.add_argument("--query", help='"subject,relation,object"')
    p.add_argument("--subject-box", dest="subject_box",
                   help='"cx,cy,half_w,half_h"')
    p.add_argument("--out", help="append the JSONL line to this file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("render", help="render predictions to SVG")
    p.add_argument("--prediction-file", dest="prediction_file")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--canvas", type=int)
    p.add_argument("--show-reflection", dest="show_reflection",
                   action="store_true", default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("weights", help="fit and read the linear interpreter")
    p.add_argument("--corpus")
    p.add_argument("--iterations", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--dim-index", dest="dim_index", type=int,
                   help="output dimension: 0 cx, 1 cy, 2 half_w, 3 half_h")
    p.add_argument("--out-csv", dest="out_csv")
    p.set_defaults(func=cmd_weights)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    resolver = Resolver(args, _load_config_file(args.config))
    level = logging.INFO if resolver.get("verbose", False) else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(resolver)
    except KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
