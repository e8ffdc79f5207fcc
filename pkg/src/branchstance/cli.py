"""Command-line entry point: ingest, split, train, eval, sweep, attribute, serve.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
Every command writes a run manifest beside its primary output.
"""

from __future__ import annotations

import argparse
import json
import pickle
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

from . import __version__
from .errors import BranchStanceError, DataError, ThreadError
from .ingest import (
    Dataset,
    KeywordList,
    NormalizeOptions,
    SplitSpec,
    dataset_stats,
    dedupe_and_drop_null,
    filter_posts,
    load_dataset,
    normalize_text,
    save_dataset,
    split,
)
from .thread_model import Instance, build_thread

MODEL_NAMES = ("branch", "no_sr", "no_cfe", "svm", "textcnn", "tan", "encoder")


def _write_manifest(out_path: Path, command: str, config: dict, inputs: list[str],
                    started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "output": str(out_path),
        "toolkit_version": __version__,
        "wall_clock_s": time.time() - started,
        "written_at": time.time(),
    }
    path = out_path.parent / (out_path.name + ".manifest.json")
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    tmp.replace(path)


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _setting(flags: argparse.Namespace, cfg_file: dict, name: str, default):
    """Precedence: flags > config file > defaults."""
    v = getattr(flags, name, None)
    if v is not None:
        return v
    if name in cfg_file:
        return cfg_file[name]
    return default


# ---------------------------------------------------------------------------
# ingest

def _read_raw_records(path: Path) -> list[dict]:
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            records.append(json.loads(line))
    return records


def cmd_ingest(args: argparse.Namespace) -> int:
    started = time.time()
    kw = KeywordList.from_file(args.keywords) if args.keywords else KeywordList.bundled()
    opts = NormalizeOptions(strip_punctuation=not args.keep_punctuation)
    raw = _read_raw_records(Path(args.infile))

    by_thread: dict[str, list[dict]] = {}
    for r in raw:
        by_thread.setdefault(r["thread_id"], []).append(r)

    threads = []
    for tid, group in sorted(by_thread.items()):
        posts = [r for r in group if r.get("parent_id") is None]
        insts = [
            Instance(
                instance_id=str(r["instance_id"]),
                thread_id=str(r["thread_id"]),
                parent_id=r.get("parent_id"),
                text=normalize_text(r.get("raw_text") or r.get("text") or "", opts),
                raw_text=r.get("raw_text") or r.get("text") or "",
                label=r.get("label"),
                platform=r.get("platform") or "",
                created_at=r.get("created_at") or "",
            )
            for r in group
        ]
        post_insts = [i for i in insts if i.parent_id is None]
        if not post_insts or not filter_posts(post_insts, kw):
            continue  # thread's post does not mention any keyword
        if args.repair == "promote":
            known = {i.instance_id for i in insts}
            root_id = post_insts[0].instance_id
            insts = [
                i if i.parent_id is None or i.parent_id in known
                else replace(i, parent_id=root_id)
                for i in insts
            ]
        threads.append(build_thread(insts))

    ds = Dataset(threads=threads, provenance={
        "source": str(args.infile),
        "pipeline_version": __version__,
        "normalization": opts.as_dict(),
        "repair": args.repair,
    })
    ds = dedupe_and_drop_null(ds)
    out = Path(args.out)
    save_dataset(ds, out)
    _write_manifest(out, "ingest", {"repair": args.repair, **opts.as_dict()},
                    [str(args.infile)], started)
    print(json.dumps(dataset_stats(ds), ensure_ascii=False, indent=2))
    return 0


# ---------------------------------------------------------------------------
# split

def cmd_split(args: argparse.Namespace) -> int:
    started = time.time()
    ds = load_dataset(args.infile)
    spec = SplitSpec(train_fraction=args.ratio, seed=args.seed,
                     granularity=args.granularity)
    train_ds, test_ds = split(ds, spec)
    base = Path(args.infile)
    train_path = Path(args.out_train) if args.out_train else base.with_suffix(".train.jsonl")
    test_path = Path(args.out_test) if args.out_test else base.with_suffix(".test.jsonl")
    save_dataset(train_ds, train_path)
    save_dataset(test_ds, test_path)
    if spec.granularity == "instance":
        for path, d in ((train_path, train_ds), (test_path, test_ds)):
            sidecar = path.parent / (path.name + ".targets.json")
            sidecar.write_text(json.dumps(sorted(d.target_ids)), encoding="utf-8")
    _write_manifest(train_path, "split",
                    {"ratio": args.ratio, "seed": args.seed,
                     "granularity": args.granularity},
                    [str(args.infile)], started)
    print(f"train: {len(train_ds.threads)} threads -> {train_path}")
    print(f"test:  {len(test_ds.threads)} threads -> {test_path}")
    return 0


# ---------------------------------------------------------------------------
# train / eval / sweep

def _make_model(name: str, args: argparse.Namespace, cfg_file: dict, seed: int,
                context_k: Optional[int] = "unset"):
    from .baselines import (
        SvmNgramBaseline,
        TanBaseline,
        TextCnnBaseline,
        finetuned_encoder_baseline,
        hashed_embeddings,
        load_embeddings,
    )
    from .model import ModelConfig, StanceModel

    encoder_name = _setting(args, cfg_file, "encoder", "hashed-context")
    d = int(_setting(args, cfg_file, "padding", 64))
    if name in ("branch", "no_sr", "no_cfe"):
        variant = {"branch": "full", "no_sr": "no_SR", "no_cfe": "no_CFE"}[name]
        k = _setting(args, cfg_file, "context_k", None) if context_k == "unset" else context_k
        config = ModelConfig(variant=variant, d=d, context_k=k, encoder=encoder_name)
        return StanceModel(config, seed=seed,
                           lr_encoder=float(_setting(args, cfg_file, "lr_encoder", 1e-5)),
                           lr_head=float(_setting(args, cfg_file, "lr_head", 1e-4)))
    if name == "svm":
        return SvmNgramBaseline(seed=seed)
    emb_path = _setting(args, cfg_file, "embeddings", None)
    emb = load_embeddings(emb_path) if emb_path else hashed_embeddings(seed=0)
    if name == "textcnn":
        return TextCnnBaseline(emb, padding=d, seed=seed)
    if name == "tan":
        return TanBaseline(emb, padding=d, seed=seed)
    if name == "encoder":
        return finetuned_encoder_baseline(encoder_name=encoder_name, padding=d, seed=seed)
    raise ValueError(f"unknown model {name!r}")


def _train_config(args: argparse.Namespace, cfg_file: dict, seed: int):
    from .train_eval import TrainConfig

    return TrainConfig(
        lr_encoder=float(_setting(args, cfg_file, "lr_encoder", 1e-5)),
        lr_head=float(_setting(args, cfg_file, "lr_head", 1e-4)),
        batch_size=int(_setting(args, cfg_file, "batch_size", 16)),
        patience_batches=int(_setting(args, cfg_file, "patience_batches", 500)),
        eval_every_batches=int(_setting(args, cfg_file, "eval_every_batches", 50)),
        dev_fraction=float(_setting(args, cfg_file, "dev_fraction", 0.1)),
        repetitions=int(_setting(args, cfg_file, "repetitions", 10)),
        seed=seed,
        max_batches=_setting(args, cfg_file, "max_batches", None),
    )


def _save_model(model, name: str, path: Path) -> None:
    from .model import StanceModel, save_checkpoint

    if isinstance(model, StanceModel):
        save_checkpoint(model, path)
    else:
        tmp = path.with_suffix(path.suffix + ".tmp")
        with tmp.open("wb") as f:
            pickle.dump({"kind": name, "model": model}, f)
        tmp.replace(path)


def _load_model(path: Path):
    from .errors import CorruptCheckpoint
    from .model import load_checkpoint

    try:
        with Path(path).open("rb") as f:
            head = f.read(2)
        if head == b"\x80\x04" or head == b"\x80\x05":  # plain pickle (baselines)
            with Path(path).open("rb") as f:
                payload = pickle.load(f)
            return payload["model"]
    except OSError as e:
        raise CorruptCheckpoint(str(e)) from e
    return load_checkpoint(path)


def cmd_train(args: argparse.Namespace) -> int:
    from .train_eval import train

    started = time.time()
    cfg_file = _load_config_file(args.config)
    seed = int(_setting(args, cfg_file, "seed", 0))
    ds = load_dataset(args.train)
    model = _make_model(args.model, args, cfg_file, seed)

    if args.model == "svm":
        model.fit_dataset(ds)
        log = None
    else:
        tcfg = _train_config(args, cfg_file, seed)
        if tcfg.max_batches is not None:
            tcfg = replace(tcfg, max_batches=int(tcfg.max_batches))
        model, log = train(model, ds, tcfg)

    out = Path(args.out)
    _save_model(model, args.model, out)
    if log is not None and args.log:
        log.save(args.log)
    _write_manifest(out, "train", {"model": args.model, "seed": seed, **cfg_file},
                    [str(args.train)], started)
    print(f"saved {args.model} model -> {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .train_eval import evaluate

    started = time.time()
    model = _load_model(Path(args.ckpt))
    test_ds = load_dataset(args.test)
    report = evaluate(model, test_ds)
    out = Path(args.report)
    report.save(out)
    _write_manifest(out, "eval", {}, [str(args.ckpt), str(args.test)], started)
    print(json.dumps(report.to_dict()["macro_f1"], indent=2))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    from .train_eval import partial_context_sweep

    started = time.time()
    cfg_file = _load_config_file(args.config)
    seed = int(_setting(args, cfg_file, "seed", 0))
    ks = [None if k.strip() in ("inf", "none") else int(k)
          for k in args.ks.split(",")]
    train_ds = load_dataset(args.train)
    test_ds = load_dataset(args.test)
    tcfg = _train_config(args, cfg_file, seed)

    results = partial_context_sweep(
        lambda k, s: _make_model("branch", args, cfg_file, s, context_k=k),
        train_ds, test_ds, tcfg, ks=ks,
    )
    payload = {("inf" if k is None else str(k)): rep.to_dict()
               for k, rep in results.items()}
    out = Path(args.report)
    out.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    _write_manifest(out, "sweep", {"ks": args.ks, "seed": seed},
                    [str(args.train), str(args.test)], started)
    for k, rep in results.items():
        print(f"k={'inf' if k is None else k}: {rep.macro_f1_mean:.4f} "
              f"± {rep.macro_f1_std:.4f}")
    return 0


# ---------------------------------------------------------------------------
# attribute / serve

def cmd_attribute(args: argparse.Namespace) -> int:
    from .attribution import WhitespaceCharSegmenter, attribution_report, render_table, save_report
    from .thread_model import sub_branch

    started = time.time()
    model = _load_model(Path(args.ckpt))
    ds = load_dataset(args.dataset)
    thread = next((t for t in ds.threads if t.thread_id == args.thread), None)
    if thread is None:
        raise DataError(f"no thread {args.thread!r} in {args.dataset}")
    b = sub_branch(thread, args.target)
    report = attribution_report(b, model, WhitespaceCharSegmenter())
    out = Path(args.out)
    save_report(report, out)
    _write_manifest(out, "attribute", {"thread": args.thread, "target": args.target},
                    [str(args.ckpt), str(args.dataset)], started)
    print(render_table(report))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import AnnotationProject, create_app

    ds = load_dataset(args.dataset)
    project = AnnotationProject(ds, min_annotators=args.min_annotators,
                                log_path=args.labels)
    app = create_app(project, attribution_dir=args.attribution_dir,
                     bearer_token=args.token)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="branchstance",
                description="Conversational stance detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    pi = sub.add_parser("ingest", help="clean and assemble a dataset")
    pi.add_argument("--in", dest="infile", required=True)
    pi.add_argument("--keywords", default=None, help="term file; default: bundled list")
    pi.add_argument("--out", required=True)
    pi.add_argument("--repair", choices=("reject", "promote"), default="reject")
    pi.add_argument("--keep-punctuation", action="store_true")
    pi.set_defaults(func=cmd_ingest)

    ps = sub.add_parser("split", help="train/test split")
    ps.add_argument("--in", dest="infile", required=True)
    ps.add_argument("--ratio", type=float, default=0.8)
    ps.add_argument("--granularity", choices=("thread", "instance"), default="thread")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out-train", default=None)
    ps.add_argument("--out-test", default=None)
    ps.set_defaults(func=cmd_split)

    pt = sub.add_parser("train", help="train a model")
    pt.add_argument("--model", choices=MODEL_NAMES, required=True)
    pt.add_argument("--train", required=True)
    pt.add_argument("--config", default=None, help="JSON config file")
    pt.add_argument("--out", required=True)
    pt.add_argument("--log", default=None, help="training log path (JSONL)")
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--encoder", default=None)
    pt.add_argument("--max-batches", dest="max_batches", type=int, default=None)
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("eval", help="evaluate a checkpoint")
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--test", required=True)
    pe.add_argument("--report", required=True)
    pe.set_defaults(func=cmd_eval)

    pw = sub.add_parser("sweep", help="partial-context sweep")
    pw.add_argument("--ks", default="0,1,2,inf")
    pw.add_argument("--train", required=True)
    pw.add_argument("--test", required=True)
    pw.add_argument("--report", required=True)
    pw.add_argument("--config", default=None)
    pw.add_argument("--seed", type=int, default=None)
    pw.add_argument("--encoder", default=None)
    pw.add_argument("--max-batches", dest="max_batches", type=int, default=None)
    pw.set_defaults(func=cmd_sweep)

    pa = sub.add_parser("attribute", help="occlusion attribution for one instance")
    pa.add_argument("--ckpt", required=True)
    pa.add_argument("--dataset", required=True)
    pa.add_argument("--thread", required=True)
    pa.add_argument("--target", required=True)
    pa.add_argument("--out", required=True)
    pa.set_defaults(func=cmd_attribute)

    pv = sub.add_parser("serve", help="start the annotation service")
    pv.add_argument("--port", type=int, default=8000)
    pv.add_argument("--host", default="127.0.0.1")
    pv.add_argument("--dataset", required=True)
    pv.add_argument("--labels", required=True, help="append-only label log path")
    pv.add_argument("--min-annotators", type=int, default=3)
    pv.add_argument("--attribution-dir", default=None)
    pv.add_argument("--token", default=None, help="bearer token (auth stub)")
    pv.set_defaults(func=cmd_serve)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (DataError, ThreadError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except BranchStanceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - map unexpected failures to exit 3
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
