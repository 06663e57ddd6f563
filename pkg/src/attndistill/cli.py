"""Command-line entry points.

Exit codes: 0 ok, 2 usage/config error, 3 environment/IO error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import render
from .attention import AttentionRequest, attention_for_layers
from .checkpoint import CheckpointError, read_manifest
from .config import ConfigError, RunConfig, load_config, reference_markdown
from .core import seed_all
from .data import ImageDataset, load_folder, render_synthetic, to_tensor_images, to_uint8, write_dataset
from .evaluation import FrozenClassifier, evaluate, target_labels, train_domain_classifier, translate
from .losses import write_loss_csv
from .models import DiscriminatorSpec
from .training import (
    DomainMapping,
    Teacher,
    TrainingAbort,
    load_discriminator,
    load_generator,
    load_state,
    save_state,
    train_student,
    train_student_pseudo,
    train_teacher,
    write_run_manifest,
)

log = logging.getLogger("attndistill")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class OutputError(Exception):
    pass


def prepare_output(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OutputError(f"output directory {out} is not writable: {e}") from None
    return out


def training_data(cfg: RunConfig) -> tuple[ImageDataset, ImageDataset]:
    d = cfg.data
    if d.source == "synthetic":
        ds = render_synthetic(cfg.synthetic_spec())
    else:
        if not d.path:
            raise ConfigError("data.path: required when data.source is 'folder'")
        ds = load_folder(d.path, d.labels_csv, d.image_size)
    if not 0 <= d.n_test < len(ds):
        raise ConfigError(f"data.n_test: must be in [0, {len(ds)})")
    return ds.split(d.n_test)


def image_folder(path, image_size: int) -> ImageDataset:
    """Images under ``path``; labels come from labels.csv when present, else all zeros."""
    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"image directory {root} does not exist")
    if (root / "labels.csv").exists():
        return load_folder(root, None, image_size)
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg") and ".mask." not in p.name)
    if not files:
        raise UsageError(f"no images found in {root}")
    arr = []
    for p in files:
        with Image.open(p) as im:
            arr.append(np.asarray(im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)))
    return ImageDataset(to_tensor_images(np.stack(arr)), torch.zeros(len(files), 0), (), [p.name for p in files])


def _labels_for(ds: ImageDataset, n_domains: int) -> torch.Tensor:
    if ds.labels.shape[1] == n_domains:
        return ds.labels
    return torch.zeros(len(ds), n_domains)


def _resolve_domain(value: str, names: list) -> int:
    if value.isdigit() and int(value) < max(len(names), 1):
        return int(value)
    if value in names:
        return names.index(value)
    raise UsageError(f"unknown domain {value!r}; available: {', '.join(names) or '(none)'}")


def _model_meta(path) -> dict:
    try:
        return read_manifest(path)
    except CheckpointError as e:
        raise UsageError(str(e)) from None


def cmd_generate_data(args) -> int:
    cfg = load_config(args.config)
    out = prepare_output(args.out or Path(cfg.output_dir) / "data")
    write_dataset(render_synthetic(cfg.synthetic_spec()), out)
    print(f"wrote {cfg.data.n_images} images to {out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    out = prepare_output(cfg.output_dir)
    seed_all(cfg.train.seed)
    train, _ = training_data(cfg)
    k = len(train.attributes)
    tc = cfg.train_config("none")
    state = train_teacher(tc, train, cfg.generator_spec(k), cfg.discriminator_spec(k), out_dir=out,
                          log_every=args.log_every)
    save_state(state, out / "checkpoint")
    write_loss_csv(out / "losses.csv", state.history)
    write_run_manifest(out, cfg.model_dump(), role="teacher", seeds={"train": tc.seed, "data": cfg.data.seed})
    print(f"teacher checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg = load_config(args.config)
    mode = args.mode or cfg.distill.mode
    mapping_names = None
    if args.mapping:
        try:
            mapping_names = json.loads(Path(args.mapping).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read mapping {args.mapping}: {e}") from None
    elif mode == "pseudo":
        mapping_names = cfg.distill.mapping
    if mode == "pseudo" and not mapping_names:
        raise UsageError("--mode pseudo requires --mapping <json>")
    _model_meta(args.teacher)
    teacher_state = load_state(args.teacher)
    out = prepare_output(cfg.output_dir)
    seed_all(cfg.train.seed)
    train, _ = training_data(cfg)
    k = len(train.attributes)
    td = teacher_state.d_spec
    d_spec = DiscriminatorSpec(td.base_channels, td.n_layers, k, td.image_size)
    g_spec = cfg.generator_spec(k)
    tc = cfg.train_config(mode)
    teacher = Teacher.from_state(teacher_state)
    if mode == "pseudo":
        try:
            mapping = DomainMapping.from_names(mapping_names, train.attributes, teacher.attributes)
        except (KeyError, ValueError) as e:
            raise UsageError(f"mapping: {e}") from None
        state = train_student_pseudo(tc, train, teacher, mapping, g_spec, d_spec, out_dir=out,
                                     log_every=args.log_every)
    else:
        if mode == "attention" and tuple(teacher.attributes) != tuple(train.attributes):
            raise UsageError(f"attention mode needs the teacher's domain set {list(teacher.attributes)}")
        state = train_student(tc, train, teacher, g_spec, d_spec, out_dir=out, log_every=args.log_every)
    save_state(state, out / "checkpoint")
    write_loss_csv(out / "losses.csv", state.history)
    write_run_manifest(out, cfg.model_dump(), role="student", mode=mode, teacher=str(args.teacher),
                       mapping=mapping_names, seeds={"train": tc.seed, "data": cfg.data.seed})
    print(f"student checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    cfg = load_config(args.config)
    out = prepare_output(args.out or Path(cfg.output_dir) / "classifier")
    train, test = training_data(cfg)
    clf = train_domain_classifier(train, test if len(test) else None, steps=cfg.eval.classifier_steps,
                                  seed=cfg.eval.classifier_seed)
    clf.save(out)
    print(json.dumps({"heldout_accuracy": clf.heldout_accuracy}, indent=2))
    return EXIT_OK


def cmd_extract_attention(args) -> int:
    _model_meta(args.model)
    g, _ = load_generator(args.model)
    d_path = args.discriminator or args.model
    _model_meta(d_path)
    d, d_meta = load_discriminator(d_path)
    names = list(d_meta.get("attributes", []))
    k = _resolve_domain(str(args.domain), names)
    if k >= d.spec.n_domains:
        raise UsageError(f"domain index {k} out of range for {d.spec.n_domains} domains")
    layers = list(g.layer_names) if args.layers == "all" else [s for s in args.layers.split(",") if s]
    for name in layers:
        try:
            g.resolve(name)
        except KeyError as e:
            raise UsageError(str(e.args[0])) from None
    ds = image_folder(args.images, g.spec.image_size)
    out = prepare_output(args.out)
    c = _labels_for(ds, g.spec.n_domains)
    if g.spec.n_domains == d.spec.n_domains:
        c = target_labels(c, k)
    g.eval()
    maps = attention_for_layers(AttentionRequest(g, d, ds.images, k, c=c), layers)
    images = to_uint8(ds.images)
    for amap in maps:
        data = amap.data.detach().numpy()
        for i, name in enumerate(ds.names):
            stem = Path(name).stem
            render.save_overlay(images[i], data[i], out / f"{stem}__{amap.layer_name}__overlay.png")
            render.save_raw_map(data[i], out / f"{stem}__{amap.layer_name}__raw.png")
    print(f"wrote {len(maps) * len(ds)} overlays to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not Path(args.classifier).is_dir():
        raise UsageError(f"classifier checkpoint {args.classifier} not found")
    _model_meta(args.classifier)
    _model_meta(args.model)
    g, meta = load_generator(args.model)
    clf = FrozenClassifier.load(args.classifier)
    if not Path(args.data).is_dir():
        raise UsageError(f"data directory {args.data} not found")
    try:
        ds = load_folder(args.data, None, g.spec.image_size)
    except (FileNotFoundError, ValueError) as e:
        raise UsageError(str(e)) from None
    teacher_d = load_discriminator(args.discriminator)[0] if args.discriminator else None
    out = prepare_output(args.out)
    report = evaluate(g, clf, ds, teacher_d=teacher_d)
    (out / "eval_report.json").write_text(report.to_json())
    table = report.table(Path(args.model).parent.name or "model")
    (out / "eval_table.txt").write_text(table)
    print(table)
    return EXIT_OK


def cmd_render_grid(args) -> int:
    paths = [p for p in args.models.split(",") if p]
    if not paths:
        raise UsageError("--models needs at least one checkpoint")
    gens = []
    for p in paths:
        _model_meta(p)
        gens.append(load_generator(p))
    size = gens[0][0].spec.image_size
    ds = image_folder(args.images, size)
    rows = [[im] for im in to_uint8(ds.images)]
    for g, meta in gens:
        names = list(meta.get("attributes", []))
        base = _labels_for(ds, g.spec.n_domains)
        for dom in [s for s in args.domains.split(",") if s]:
            k = _resolve_domain(dom, names)
            fake = to_uint8(translate(g, ds.images, target_labels(base, k)))
            for row, im in zip(rows, fake):
                row.append(im)
    out = Path(args.out)
    prepare_output(out.parent)
    render.save_grid(rows, out)
    print(f"wrote {len(rows)}x{len(rows[0])} grid to {out}")
    return EXIT_OK


def cmd_config_reference(args) -> int:
    out = Path(args.out)
    prepare_output(out.parent)
    out.write_text(reference_markdown())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attndistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate-data", help="render the synthetic dataset to disk")
    s.add_argument("config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_generate_data)

    s = sub.add_parser("train-teacher", help="pre-train a teacher")
    s.add_argument("config")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("train-student", help="train a student, optionally with attention distillation")
    s.add_argument("config")
    s.add_argument("--teacher", required=True)
    s.add_argument("--mode", choices=["none", "attention", "pseudo"])
    s.add_argument("--mapping", help="JSON object: student attribute -> teacher attribute")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train_student)

    s = sub.add_parser("train-classifier", help="train the evaluation domain classifier")
    s.add_argument("config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("extract-attention", help="render per-layer attention overlays")
    s.add_argument("--model", required=True)
    s.add_argument("--discriminator")
    s.add_argument("--images", required=True)
    s.add_argument("--domain", required=True)
    s.add_argument("--layers", default="last_resblock_conv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_attention)

    s = sub.add_parser("evaluate", help="translation accuracy and Fréchet distance")
    s.add_argument("--model", required=True)
    s.add_argument("--classifier", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--discriminator", help="also report attention mass inside region masks")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render-grid", help="input | translations comparison grid")
    s.add_argument("--models", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--domains", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render_grid)

    s = sub.add_parser("config-reference", help="write the config key/default reference")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_config_reference)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OutputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (TrainingAbort, FloatingPointError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
