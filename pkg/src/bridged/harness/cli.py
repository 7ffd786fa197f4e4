"""``bt`` command line: generate, dsi, train, leep, sweep, report.

Exit codes: 0 success, 1 usage or input error, 2 partial failure (some sweep
cells or some generated images failed; the rest were written).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _ints(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def resolve_dataset(name: str):
    """A registered dataset name, ``toy`` / ``toy:<n>``, or a manifest path."""
    from ..core import load_manifest, register_dataset
    from ..toy import toy_dataset

    if name == "toy" or name.startswith("toy:"):
        return toy_dataset(int(name.split(":", 1)[1]) if ":" in name else 6)
    p = Path(name)
    if p.suffix == ".jsonl" and p.exists():
        return load_manifest(p).dataset
    try:
        return register_dataset(name)
    except KeyError as e:
        raise UsageError(str(e.args[0]) if e.args else str(e)) from None


def _load(path):
    from ..core import load_manifest

    if path is None:
        return None
    if not Path(path).exists():
        raise UsageError(f"no such manifest: {path}")
    return load_manifest(path)


# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    from ..genesis import GenerationError, GuidanceConfig, generate_images, make_backend

    ds = resolve_dataset(args.dataset)
    token = None
    if args.prompt_mode == "dsi":
        if not args.token:
            raise UsageError("--prompt-mode dsi needs --token")
        from ..dsi import load_token
        token = load_token(args.token)
    backend = make_backend(args.backend, ds.class_names, seed=args.seed, retries=args.retries)
    guidance = GuidanceConfig(w=args.gs, steps=args.steps, resolution=args.resolution)
    try:
        m = generate_images(ds, args.per_class, backend, guidance, args.out, prompt_mode=args.prompt_mode,
                            token=token, seed=args.seed, workers=args.workers)
    except GenerationError as e:
        print(f"generation incomplete: {len(e.failed_keys)} images failed; manifest keeps the rest", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"{len(m)} images for {ds.n_classes} classes -> {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_dsi(args) -> int:
    import torch

    from ..diffusion import ToyDenoiser, fit_toy_denoiser
    from ..dsi import InversionConfig, load_class_images, save_token, train_style_token

    m = _load(args.manifest)
    if args.dataset and args.dataset != m.dataset.name:
        raise UsageError(f"manifest is for {m.dataset.name!r}, not {args.dataset!r}")
    denoiser = ToyDenoiser(seed=args.seed)
    imgs = load_class_images(m, size=args.size)
    if args.denoiser:
        denoiser.load_state_dict(torch.load(args.denoiser, map_location="cpu"))
    else:
        fit_toy_denoiser(denoiser, imgs, m.dataset.class_names, steps=args.denoiser_steps, seed=args.seed)
    cfg = InversionConfig(iterations=args.iterations, batch_size=args.batch_size, learning_rate=args.lr,
                          seed=args.seed)
    res = train_style_token(m, denoiser, cfg, images_by_class=imgs)
    save_token(res.token, args.out)
    k = max(1, len(res.losses) // 20)
    print(f"token {res.token.name} dim={res.token.dim} steps={res.optimizer_steps} "
          f"loss {np.mean(res.losses[:k]):.4f} -> {np.mean(res.losses[-k:]):.4f} -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from ..core import sample_few_shot
    from ..transfer import MixupConfig, StageConfig, make_pipeline, run_pipeline, select_lr, write_run_dir

    real = _load(args.real_manifest)
    if args.dataset:
        want = resolve_dataset(args.dataset)
        if want.n_classes != real.dataset.n_classes:
            raise UsageError(f"--dataset {args.dataset} has {want.n_classes} classes, manifest has {real.dataset.n_classes}")
    ev = _load(args.eval_manifest)
    syn = _load(args.synthetic_manifest)
    if args.pipeline != "vanilla" and syn is None:
        raise UsageError(f"--pipeline {args.pipeline} needs --synthetic-manifest")
    if args.pipeline == "vanilla" and syn is not None:
        raise UsageError("vanilla transfer takes no synthetic manifest")
    few = args.shots is not None
    over = {k: v for k, v in dict(epochs=args.epochs, batch_size=args.batch_size, augment=args.augment,
                                  weight_decay=args.weight_decay, fixed_feature=args.fixed_feature or None).items()
            if v is not None}
    if args.fc_reinit:
        over["fc_reinit_before"] = True
    stage = StageConfig.defaults(args.arch, few_shot=few, **over)
    stage1 = None
    if args.stage1_epochs is not None or args.stage1_mixup is not None:
        s1 = {**over, "fixed_feature": False, "fc_reinit_before": False}
        if args.stage1_epochs is not None:
            s1["epochs"] = args.stage1_epochs
        if args.stage1_mixup is not None:
            s1["mixup"] = MixupConfig(args.stage1_mixup)
        stage1 = StageConfig.defaults(args.arch, few_shot=few, **s1)
    if (args.fc_reinit or args.stage1_mixup is not None) and args.pipeline not in ("bridged", "bridged++"):
        raise UsageError("--fc-reinit and --stage1-mixup apply to bridged pipelines only")
    kw = dict(arch=args.arch, pretrained=not args.no_pretrained, image_size=args.image_size)
    if args.pipeline == "mixed":
        kw["synthetic_fraction"] = args.synthetic_fraction
    seeds = args.seeds or [0]
    out = Path(args.out)
    accs = []
    lr = args.lr_grid[0]
    for s in seeds:
        r = sample_few_shot(real, args.shots, s) if few else real
        cfg = make_pipeline(args.pipeline, r, ev, syn, stage, stage1=stage1, seed=s, **kw).with_seed(s)
        if len(args.lr_grid) > 1:
            if ev is None and args.lr_selection == "val":
                raise UsageError("an LR grid needs --eval-manifest (or --lr-selection holdout)")
            lr = select_lr(cfg, args.lr_grid, seeds=(s,), selection=args.lr_selection).learning_rate
        run = run_pipeline(cfg.with_learning_rate(lr))
        run_dir = out if len(seeds) == 1 else out / f"seed_{s}"
        write_run_dir(run, run_dir)
        acc = run.final_accuracy
        accs.append(acc)
        print(f"seed {s} lr {lr:g}: {run.metric} " + ("n/a" if acc is None else f"{100 * acc:.2f}") + f" -> {run_dir}")
    got = [a for a in accs if a is not None]
    if len(got) > 1:
        print(f"{args.pipeline}: {100 * np.mean(got):.1f}±{100 * np.std(got):.1f} over {len(got)} seeds")
    return EXIT_OK


def _leep_model(ref: str):
    from ..transfer import build_backbone, load_checkpoint

    if ref.startswith("arch:"):
        model = build_backbone(ref[5:], pretrained=True)
        return model, ref, None
    run = Path(ref)
    if not (run / "model.pt").exists():
        raise UsageError(f"{ref}: not a run directory (no model.pt)")
    size = None
    if (run / "config.json").exists():
        size = json.loads((run / "config.json").read_text()).get("image_size")
    return load_checkpoint(run / "model.pt"), ref, size


def _leep_manifest(dataset: str, split: str):
    p = Path(dataset)
    if p.is_dir():
        p = p / f"{split}.jsonl"
    if not p.exists():
        raise UsageError(f"no manifest at {p}")
    m = _load(p)
    if m.role.value != split:
        logging.getLogger(__name__).warning("manifest role is %s but --split %s was requested", m.role.value, split)
    return m


def cmd_leep(args) -> int:
    from ..metrics import PredictionSet, leep_score
    from ..transfer import predict_proba

    if len(args.model_run) > 2:
        raise UsageError("--model-run accepts one or two runs")
    m = _leep_manifest(args.dataset, args.split)
    rows = []
    for ref in args.model_run:
        model, label, size = _leep_model(ref)
        probs = predict_proba(model, m, args.image_size or size or 224)
        probs = probs / probs.sum(1, keepdims=True)
        score = leep_score(PredictionSet(probs, m.labels(), m.dataset.n_classes))
        rows.append((label, score))
        print(f"LEEP {label} on {m.dataset.name}/{args.split}: {score:.4f}")
    if len(rows) == 2:
        table = Path(args.table)
        table.parent.mkdir(parents=True, exist_ok=True)
        with open(table, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["model", m.dataset.name])
            for label, score in rows:
                w.writerow([label, f"{score:.2f}"])
            w.writerow([f"# LEEP, natural log, {args.split} split; less negative = more transferable"])
        print(f"comparison -> {table}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .sweep import SweepSpec, run_sweep

    spec = SweepSpec.from_file(args.config)
    if args.dry_run:
        print(f"{spec.name}: {len(spec.cells())} cells x {len(spec.seeds)} seeds = {len(spec)} runs")
        return EXIT_OK
    res = run_sweep(spec, args.store, workers=args.workers)
    print(f"{spec.name}: {len(res.records)}/{len(spec)} recorded, {res.executed} executed now, "
          f"{len(res.failures)} failed -> {Path(args.store) / 'summary.txt'}")
    return EXIT_PARTIAL if res.failures else EXIT_OK


def _parse_where(items) -> dict:
    import yaml

    out = {}
    for it in items or []:
        if "=" not in it:
            raise UsageError(f"--where expects key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = yaml.safe_load(v)
    return out


def cmd_report(args) -> int:
    from .report import _get, emit_report
    from .sweep import read_records

    manifests = None
    records = []
    if args.kind == "contact_sheet":
        if not args.manifest:
            raise UsageError("contact_sheet needs --manifest label=path (repeatable)")
        manifests = {}
        for it in args.manifest:
            label, _, path = it.partition("=")
            if not path:
                raise UsageError(f"--manifest expects label=path, got {it!r}")
            manifests[label] = _load(path)
    else:
        for store in args.store:
            p = Path(store)
            records += read_records(p / "records.jsonl" if p.is_dir() else p)
        where = _parse_where(args.where)
        records = [r for r in records if all(_get(r, k) == v for k, v in where.items())]
        if not records:
            raise UsageError("no records match")
    paths = emit_report(records, args.kind, args.out, axis=args.axis, rows=args.rows, cols=args.cols,
                        manifests=manifests)
    for p in paths:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bt", description="synthetic-data transfer learning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a synthetic image set")
    g.add_argument("--dataset", required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--gs", type=float, default=3.5, help="guidance scale")
    g.add_argument("--backend", default="stub", help="stub, toy, or an http(s) endpoint")
    g.add_argument("--prompt-mode", choices=("template", "dsi"), default="template")
    g.add_argument("--token", help="style token file for --prompt-mode dsi")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--resolution", type=int, default=512)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--retries", type=int, default=3)
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("dsi", help="learn a dataset style token")
    d.add_argument("--manifest", required=True, help="real training images")
    d.add_argument("--dataset")
    d.add_argument("--iterations", type=int, default=20000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--batch-size", type=int, default=4)
    d.add_argument("--lr", type=float, default=5e-3)
    d.add_argument("--size", type=int, default=32, help="image size fed to the toy denoiser")
    d.add_argument("--denoiser", help="state dict of a pre-fitted toy denoiser")
    d.add_argument("--denoiser-steps", type=int, default=1500)
    d.set_defaults(func=cmd_dsi)

    t = sub.add_parser("train", help="run one transfer pipeline")
    t.add_argument("--pipeline", choices=("vanilla", "mixed", "bridged", "bridged++"), required=True)
    t.add_argument("--dataset")
    t.add_argument("--real-manifest", required=True)
    t.add_argument("--eval-manifest")
    t.add_argument("--synthetic-manifest")
    t.add_argument("--shots", type=int)
    t.add_argument("--arch", default="resnet18")
    t.add_argument("--no-pretrained", action="store_true")
    t.add_argument("--lr-grid", type=_floats, default=[0.01])
    t.add_argument("--lr-selection", choices=("val", "holdout"), default="val",
                   help="score the LR grid on the eval manifest or on a held-out slice of train")
    t.add_argument("--stage1-mixup", type=float, metavar="ALPHA", help="mixup in the synthetic stage")
    t.add_argument("--fc-reinit", action="store_true", help="reinitialize the head before the real-data stage")
    t.add_argument("--seeds", type=_ints)
    t.add_argument("--epochs", type=int)
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--augment", choices=("imagenet", "none"))
    t.add_argument("--image-size", type=int, default=224)
    t.add_argument("--fixed-feature", action="store_true")
    t.add_argument("--synthetic-fraction", type=float)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    l = sub.add_parser("leep", help="LEEP transferability of one or two models")
    l.add_argument("--model-run", action="append", required=True,
                   help="run directory, or arch:<name> for a pre-trained backbone (repeat for two)")
    l.add_argument("--dataset", required=True, help="manifest, or a directory holding <split>.jsonl")
    l.add_argument("--split", choices=("train", "val"), default="train")
    l.add_argument("--image-size", type=int)
    l.add_argument("--table", default="leep_comparison.csv")
    l.set_defaults(func=cmd_leep)

    s = sub.add_parser("sweep", help="run or resume a sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="emit tables and figures from sweep records")
    r.add_argument("--kind", choices=("table", "line", "bar", "radar", "contact_sheet"), required=True)
    r.add_argument("--store", action="append", default=[], help="sweep store or records.jsonl (repeatable)")
    r.add_argument("--out", required=True)
    r.add_argument("--axis")
    r.add_argument("--rows", default="pipeline")
    r.add_argument("--cols", default="dataset")
    r.add_argument("--where", action="append", help="key=value record filter (repeatable)")
    r.add_argument("--manifest", action="append", help="label=path for contact sheets (repeatable)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from ..core import DatasetLookupError, ManifestParseError
    from ..transfer import ConfigError
    from .config import ConfigFileError
    from .report import ReportError

    try:
        return args.func(args)
    except (UsageError, DatasetLookupError, ManifestParseError, ConfigError, ConfigFileError, ReportError,
            FileNotFoundError) as e:
        print(f"bt {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
