"""``dfcontrast`` command line: one entry point, one subcommand per pipeline stage.

Every subcommand takes ``--seed`` and ``--out``; the output directory
defaults to ``$DFCONTRAST_OUT/<subcommand>`` (``./dfcontrast_out`` when the
variable is unset) and always receives ``config.resolved.json``. Failures
print a one-line JSON error record to stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from functools import partial
from pathlib import Path

import numpy as np
import torch

from dfcontrast import classifiers as C
from dfcontrast import evaluate as E
from dfcontrast.backbone import ViT, analytic_param_count, count_params, load_checkpoint
from dfcontrast.manifest import SPLIT_TAGS, UNSEEN_TAGS, build_manifest, load_image, read_manifest, write_manifest
from dfcontrast.synth import DEFAULT_AMPLITUDE, DEFAULT_SIZE, ProceduralClient, synth_corpus
from dfcontrast.trainer import TrainConfig, preset, train

log = logging.getLogger("dfcontrast")
ENV_OUT = "DFCONTRAST_OUT"


def _out_dir(args) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(ENV_OUT, "dfcontrast_out")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, args, **resolved) -> None:
    # the snapshot sits inside --out, so the path itself is left out
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "out")}
    (out / "config.resolved.json").write_text(
        json.dumps({"flags": flags, **resolved}, indent=2, sort_keys=True, default=str))


def _loader(args):
    root = getattr(args, "image_root", None)
    return partial(load_image, root=root)


def _train_config(args) -> TrainConfig:
    """defaults <- preset or config file <- flags"""
    if args.config and Path(args.config).is_file():
        base = preset("desk").to_dict()
        base.update(json.loads(Path(args.config).read_text()))
        cfg = TrainConfig.from_dict(base).to_dict()
    else:
        cfg = preset(args.config or "desk").to_dict()
    overrides = {"max_epochs": args.epochs, "batch_size": args.batch_size, "peak_lr": args.lr,
                 "accum_steps": args.accum_steps, "steps_per_epoch": args.steps_per_epoch,
                 "loss_weights": args.loss_weights, "seed": args.seed}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(cfg)


def cmd_train(args) -> dict:
    out = _out_dir(args)
    cfg = _train_config(args)
    records = read_manifest(args.data)
    if args.val:
        val = read_manifest(args.val)
    else:
        order = np.random.default_rng([cfg.seed, 7]).permutation(len(records))
        n_val = max(2, len(records) // 20)
        val = [records[i] for i in order[:n_val]]
        records = [records[i] for i in sorted(order[n_val:])]
    _snapshot(out, args, train_config=cfg.to_dict(), n_train=len(records), n_val=len(val))
    res = train(records, cfg, out, val_records=val, loader=_loader(args))
    return {"best": str(res.best_path), "last": str(res.last_path), "log": str(res.log_path),
            "epochs": res.epochs_run, "best_val": res.best_val, "stopped_early": res.stopped_early}


def _model(path) -> ViT:
    model, _ = load_checkpoint(path)
    return model


def cmd_embed(args) -> dict:
    out = _out_dir(args)
    _snapshot(out, args)
    model = _model(args.checkpoint)
    records = read_manifest(args.data)
    seed = args.seed if args.transforms == "on" else None
    bank = E.build_bank(model, records, seed, _loader(args))
    path = E.export_embeddings(bank, out / args.name)
    return {"bank": str(path), "rows": len(bank), "dim": bank.dim}


def cmd_fit(args) -> dict:
    out = _out_dir(args)
    _snapshot(out, args)
    bank = C.EmbeddingBank.load(args.bank)
    clf = E.fit_classifier(args.kind, bank)
    path = C.save_classifier(clf, out / f"{args.kind}.npz")
    return {"classifier": str(path), "kind": args.kind}


def _test_bank(args, model) -> C.EmbeddingBank:
    if args.test_bank:
        return C.EmbeddingBank.load(args.test_bank)
    if not (args.test_data and model is not None):
        raise ValueError("eval needs --test-bank, or --test-data with --checkpoint")
    refs, labels, tags = E.record_rows(read_manifest(args.test_data))
    seed = args.seed + 1 if args.transforms == "on" else None
    return C.EmbeddingBank(E.embed_refs(model, refs, seed, _loader(args)), labels, tags)


def cmd_eval(args) -> dict:
    out = _out_dir(args)
    _snapshot(out, args)
    model = _model(args.checkpoint) if args.checkpoint else None
    if args.classifier_file:
        clf = C.load_classifier(args.classifier_file)
        kind = C.classifier_kind(clf)
    else:
        if args.bank:
            bank = C.EmbeddingBank.load(args.bank)
        elif args.train_data and model is not None:
            bank = E.build_bank(model, read_manifest(args.train_data), args.seed, _loader(args))
        else:
            raise ValueError("eval needs --bank, --classifier-file, or --train-data with --checkpoint")
        kind = args.classifier
        clf = E.fit_classifier(kind, bank)
    test = _test_bank(args, model)
    unseen = [t for t in (args.unseen_tags.split(",") if args.unseen_tags else []) if t]
    report = E.evaluate_bank(clf, test, unseen)
    report.meta.update(classifier=kind, transforms=args.transforms == "on", seed=args.seed, n_test=len(test))
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.summary() + "\n")
    result = {"report": str(out / "report.json"), "overall_acc": report.overall_acc}
    if args.plot:
        result["plot"] = str(E.plot_report(report, out / "accuracy.png"))
    return result


def _bench_model(args) -> ViT:
    if args.checkpoint:
        return _model(args.checkpoint)
    torch.manual_seed(args.seed)
    return ViT(preset(args.preset).backbone_config())


def cmd_bench(args) -> dict:
    out = _out_dir(args)
    _snapshot(out, args)
    torch.manual_seed(args.seed)
    rep = E.bench_throughput(_bench_model(args), iters=args.iters, max_batch=args.max_batch, seed=args.seed)
    (out / "bench.json").write_text(json.dumps(rep.to_dict(), indent=2))
    return rep.to_dict()


def cmd_gen_manifest(args) -> dict:
    out = _out_dir(args)
    _snapshot(out, args)
    lines = [ln.rstrip("\n") for ln in Path(args.prompts).read_text(encoding="utf-8").splitlines() if ln.strip()]
    prompts = [tuple(ln.split("\t", 1)) if "\t" in ln else ln for ln in lines]
    tags = args.generators.split(",") if args.generators else SPLIT_TAGS[args.split]
    clients = {t: ProceduralClient(t) for t in tags}
    image_dir = out / "images" if args.write_images else None
    res = build_manifest(prompts, clients, args.seed, args.split, image_dir)
    path = write_manifest(res.records, out / f"{args.split}.jsonl")
    if res.skipped:
        (out / "skipped.json").write_text(json.dumps(res.skipped, indent=2))
    return {"manifest": str(path), "records": len(res.records), "skipped": len(res.skipped)}


def cmd_synth(args) -> dict:
    out = _out_dir(args)
    _snapshot(out, args)
    tags = SPLIT_TAGS[args.split]
    recs = synth_corpus(args.n, args.seed, tags=tags, split=args.split, fingerprint_seed=args.fingerprint_seed,
                        amplitude=args.amplitude, size=args.size)
    path = write_manifest(recs, out / f"{args.split}.jsonl")
    return {"manifest": str(path), "records": len(recs), "images": len(recs) * (1 + len(tags))}


def cmd_count(args) -> dict:
    if args.checkpoint:
        model = _model(args.checkpoint)
    else:
        model = ViT(_train_config(args).backbone_config())
    out = _out_dir(args)
    _snapshot(out, args)
    return {"params": count_params(model), "analytic": analytic_param_count(model.cfg)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfcontrast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0, help="master seed")
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<command>)")
        return sp

    def train_flags(sp):
        sp.add_argument("--config", help="preset name (desk, paper) or JSON file layered over desk")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float, help="peak learning rate")
        sp.add_argument("--accum-steps", type=int)
        sp.add_argument("--steps-per-epoch", type=int)
        sp.add_argument("--loss-weights", type=float, nargs=2, metavar=("GLOBAL", "MULTISCALE"))

    sp = common(sub.add_parser("train", help="train the backbone"))
    train_flags(sp)
    sp.add_argument("--data", required=True, help="training manifest")
    sp.add_argument("--val", help="validation manifest (default: 5%% held out of --data)")
    sp.add_argument("--image-root")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("embed", help="embed a manifest into a bank file"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--transforms", choices=("on", "off"), default="on")
    sp.add_argument("--name", default="bank.dfeb")
    sp.add_argument("--image-root")
    sp.set_defaults(func=cmd_embed)

    sp = common(sub.add_parser("fit-classifier", help="fit linear, nn or svm on a bank"))
    sp.add_argument("kind", choices=("linear", "nn", "svm"))
    sp.add_argument("--bank", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = common(sub.add_parser("eval", help="score a test split"))
    sp.add_argument("--classifier", choices=("linear", "nn", "svm"), default="nn")
    sp.add_argument("--classifier-file")
    sp.add_argument("--bank")
    sp.add_argument("--train-data")
    sp.add_argument("--checkpoint")
    sp.add_argument("--test-data")
    sp.add_argument("--test-bank")
    sp.add_argument("--transforms", choices=("on", "off"), default="off")
    sp.add_argument("--unseen-tags", default="", help=f"comma list, e.g. {','.join(UNSEEN_TAGS[:2])}")
    sp.add_argument("--plot", action="store_true", help="also write accuracy.png")
    sp.add_argument("--image-root")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("bench", help="throughput benchmark"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--preset", default="desk")
    sp.add_argument("--iters", type=int, default=100)
    sp.add_argument("--max-batch", type=int, default=64)
    sp.set_defaults(func=cmd_bench)

    sp = common(sub.add_parser("gen-manifest", help="build a manifest with the procedural generator stubs"))
    sp.add_argument("--prompts", required=True, help="text file, one base prompt per line (optional TAB real ref)")
    sp.add_argument("--split", choices=tuple(SPLIT_TAGS), default="train")
    sp.add_argument("--generators", help="comma list of tags (default: the split's tags)")
    sp.add_argument("--write-images", action="store_true")
    sp.set_defaults(func=cmd_gen_manifest)

    sp = common(sub.add_parser("synth-corpus", help="procedural real/fake corpus manifest"))
    sp.add_argument("--n", type=int, required=True, help="number of records")
    sp.add_argument("--split", choices=tuple(SPLIT_TAGS), default="train")
    sp.add_argument("--amplitude", type=float, default=DEFAULT_AMPLITUDE)
    sp.add_argument("--size", type=int, default=DEFAULT_SIZE)
    sp.add_argument("--fingerprint-seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("count-params", help="parameter count of a preset, config or checkpoint"))
    train_flags(sp)
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_count)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable record
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
