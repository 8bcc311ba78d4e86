"""Command-line entry point.

Subcommands read an optional TOML run config; command-line flags override
file values. Unknown config keys are rejected. Exit codes: 0 success,
1 runtime failure, 2 usage or config error. Logging goes to stderr at the
level named by ``GANSEQ_LOG`` (error, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import bench, instafill, pipeline, pixsynth, semgan, semmap
from .common import TrainConfig, derive_seed, peek_archive
from .errors import ConfigError, GanseqError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("ganseq")

SECTIONS = ("palette", "toydata", "semgan", "instafill", "pixsynth", "pipeline", "bench")
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
STAGE_EXTRA = {"dataset_size", "checkpoint"}
# translator defaults follow common SPADE practice rather than the step-1 optimizer settings
PIXSYNTH_TRAIN_DEFAULTS = {"beta1": 0.0, "beta2": 0.9, "batch_size": 1, "epochs": 1, "max_steps": 20}


@dataclass
class RunConfig:
    seed: int = 0
    palette: dict = field(default_factory=lambda: {"name": "toy"})
    toydata: dict = field(default_factory=dict)
    semgan: dict = field(default_factory=dict)
    instafill: dict = field(default_factory=dict)
    pixsynth: dict = field(default_factory=dict)
    pipeline: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


def _allowed(section: str) -> set[str]:
    if section == "palette":
        return {"name", "path"}
    if section == "toydata":
        return {"count", "width", "height", "out"}
    if section == "semgan":
        return {f.name for f in fields(semgan.SemGanConfig)} | TRAIN_KEYS | STAGE_EXTRA
    if section == "instafill":
        return {f.name for f in fields(instafill.InsertionConfig)} | TRAIN_KEYS | STAGE_EXTRA
    if section == "pixsynth":
        return {f.name for f in fields(pixsynth.SynthConfig)} | TRAIN_KEYS | STAGE_EXTRA
    if section == "pipeline":
        return {f.name for f in fields(pipeline.PipelineConfig)} - {"seed"} | {"n", "out", "jobs"}
    if section == "bench":
        return {"dets", "gt", "threshold", "out"}
    raise ConfigError(f"unknown section [{section}]")


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig(base_dir=path.parent)
    for key, value in raw.items():
        if key == "seed":
            if not isinstance(value, int):
                raise ConfigError("seed must be an integer")
            cfg.seed = value
            continue
        if key not in SECTIONS:
            raise ConfigError(f"unknown top-level key {key!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"{key!r} must be a [section]")
        unknown = sorted(set(value) - _allowed(key))
        if unknown:
            raise ConfigError(f"[{key}] unknown key(s): {', '.join(unknown)}")
        setattr(cfg, key, dict(value))
    return cfg


def _palette(cfg: RunConfig) -> semmap.LabelPalette:
    sec = cfg.palette
    if "path" in sec:
        p = cfg.path(sec["path"])
        if not p.is_file():
            raise ConfigError(f"palette file {p} does not exist")
        return semmap.load_palette(p)
    name = sec.get("name", "toy")
    if name not in semmap.PALETTES:
        raise ConfigError(f"unknown palette {name!r}; choose from {sorted(semmap.PALETTES)}")
    return semmap.PALETTES[name]


def _split(section: dict, model_cls, defaults=None, train_defaults=None, seed=0):
    model_keys = {f.name for f in fields(model_cls)}
    model = dict(defaults or {})
    model.update({k: v for k, v in section.items() if k in model_keys})
    train = {"seed": seed, **(train_defaults or {})}
    train.update({k: v for k, v in section.items() if k in TRAIN_KEYS})
    model = {k: tuple(v) if isinstance(v, list) else v for k, v in model.items()}
    try:
        return model_cls(**model), TrainConfig(**train)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _with_k(cfg_section: dict, palette: semmap.LabelPalette, person: bool = False) -> dict:
    d = {"k": palette.num_classes}
    if person:
        if palette.person_id is None:
            raise ConfigError("palette has no entry flagged is_person")
        d["person_class_id"] = palette.person_id
    for key, val in d.items():
        if key in cfg_section and cfg_section[key] != val:
            raise ConfigError(f"{key}={cfg_section[key]} disagrees with the palette ({val})")
    return d


def _checkpoint_path(cfg: RunConfig, stage: str, override) -> Path:
    if override:
        return Path(override)
    return cfg.path(getattr(cfg, stage).get("checkpoint", f"checkpoints/{stage}.pt"))


def _writable(path: Path) -> Path:
    parent = path.parent
    parent.mkdir(parents=True, exist_ok=True)
    if not os.access(parent, os.W_OK):
        raise ConfigError(f"cannot write to {parent}")
    return path


def _apply_train_flags(section: dict, args) -> dict:
    section = dict(section)
    for key in ("epochs", "max_steps", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            section[key] = v
    if getattr(args, "dataset_size", None) is not None:
        section["dataset_size"] = args.dataset_size
    return section


# ---------------------------------------------------------------------------
# subcommands


def cmd_toydata(cfg: RunConfig, args) -> int:
    palette = _palette(cfg)
    sec = cfg.toydata
    count = args.count if args.count is not None else sec.get("count", 8)
    width = args.width or sec.get("width", 512)
    height = args.height or sec.get("height", 256)
    out = Path(args.out) if args.out else cfg.path(sec.get("out", "toydata"))
    (out / "maps").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        s = derive_seed(cfg.seed, i, "toydata")
        scene = semmap.toy_scene(s, width, height, palette)
        sid = f"toy_{i:04d}"
        semmap.save_map(scene.labels, out / "maps" / f"{sid}.png")
        pixsynth.save_image(pixsynth.toy_target(scene.labels, palette, s), out / "images" / f"{sid}.png")
        if palette.person_id is not None:
            records.extend((sid, palette.person_id, b) for b in scene.persons)
    semmap.write_box_records(out / "annotations.csv", records)
    semmap.save_palette(palette, out / "palette.json")
    log.info("wrote %d toy scenes to %s", count, out)
    return 0


def cmd_train_semgan(cfg: RunConfig, args) -> int:
    palette = _palette(cfg)
    sec = _apply_train_flags(cfg.semgan, args)
    model, tc = _split(sec, semgan.SemGanConfig, _with_k(sec, palette), {"batch_size": 8, "epochs": 2}, cfg.seed)
    out = _writable(_checkpoint_path(cfg, "semgan", args.out))
    n = sec.get("dataset_size", 64)
    data = [
        semmap.generate_toy_scene(derive_seed(cfg.seed, i, "semgan-data"), model.resolution, model.resolution, palette)
        for i in range(n)
    ]
    result = semgan.train(data, model, tc)
    result.checkpoint.save(out)
    result.metrics.write(out.with_suffix(".metrics.csv"))
    out.with_suffix(".histograms.json").write_text(
        json.dumps({"data": result.data_histogram, "generated": result.histograms}, indent=2) + "\n"
    )
    log.info("semgan checkpoint written to %s", out)
    return 0


def cmd_train_insert(cfg: RunConfig, args) -> int:
    palette = _palette(cfg)
    sec = _apply_train_flags(cfg.instafill, args)
    model, tc = _split(
        sec, instafill.InsertionConfig, _with_k(sec, palette, person=True), {"batch_size": 1, "epochs": 5}, cfg.seed
    )
    out = _writable(_checkpoint_path(cfg, "instafill", args.out))
    examples = instafill.toy_examples(sec.get("dataset_size", 32), model, palette, seed=derive_seed(cfg.seed, "insert-data") % (2**31))
    result = instafill.train_insertion(examples, model, tc)
    result.checkpoint.save(out)
    result.metrics.write(out.with_suffix(".metrics.csv"))
    log.info("insertion checkpoint written to %s", out)
    return 0


def cmd_train_translate(cfg: RunConfig, args) -> int:
    palette = _palette(cfg)
    sec = _apply_train_flags(cfg.pixsynth, args)
    defaults = {"base_channels": 8, "spade_hidden": 16, "disc_channels": 8, **_with_k(sec, palette)}
    model, tc = _split(sec, pixsynth.SynthConfig, defaults, PIXSYNTH_TRAIN_DEFAULTS, cfg.seed)
    out = _writable(_checkpoint_path(cfg, "pixsynth", args.out))
    pairs = pixsynth.toy_pairs(sec.get("dataset_size", 8), model, palette, seed=derive_seed(cfg.seed, "pix-data") % (2**31))
    result = pixsynth.train_translation(pairs, model, tc)
    result.checkpoint.save(out)
    result.metrics.write(out.with_suffix(".metrics.csv"))
    log.info("translation checkpoint written to %s", out)
    return 0


def _pipeline_config(cfg: RunConfig, args) -> pipeline.PipelineConfig:
    sec = dict(cfg.pipeline)
    for key in ("n", "out", "jobs"):
        sec.pop(key, None)
    for stage in ("semgan", "instafill", "pixsynth"):
        key = f"{stage}_checkpoint"
        sec[key] = str(cfg.path(sec[key])) if key in sec else str(_checkpoint_path(cfg, stage, None))
    if args.instances_per_map is not None:
        sec["instances_per_map"] = args.instances_per_map
    sec["seed"] = cfg.seed
    sec = {k: tuple(v) if isinstance(v, list) else v for k, v in sec.items()}
    pc = pipeline.PipelineConfig(**sec)
    for stage in ("semgan", "instafill", "pixsynth"):
        p = Path(getattr(pc, f"{stage}_checkpoint"))
        if not p.is_file():
            raise ConfigError(f"{stage} checkpoint {p} does not exist")
    return pc


def cmd_generate(cfg: RunConfig, args) -> int:
    pc = _pipeline_config(cfg, args)
    n = args.n if args.n is not None else cfg.pipeline.get("n", 8)
    jobs = args.jobs or cfg.pipeline.get("jobs", 1)
    out = Path(args.out) if args.out else cfg.path(cfg.pipeline.get("out", "dataset"))
    _writable(out / "manifest.json")
    manifest = pipeline.run_generation(pc, n, jobs=jobs)
    summary = pipeline.export_dataset(manifest, out)
    log.info("generation summary: %s", summary)
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    sec = cfg.bench
    dets = Path(args.dets) if args.dets else (cfg.path(sec["dets"]) if "dets" in sec else None)
    gt = Path(args.gt) if args.gt else (cfg.path(sec["gt"]) if "gt" in sec else None)
    if dets is None or gt is None:
        raise ConfigError("evaluate needs --dets and --gt (or [bench] dets/gt)")
    for p in (dets, gt):
        if not p.is_file():
            raise ConfigError(f"{p} does not exist")
    threshold = args.threshold if args.threshold is not None else sec.get("threshold", 0.5)
    report = bench.evaluate(dets, gt, threshold)
    print(report.to_json() if args.json else report.render())
    out = args.out or sec.get("out")
    if out:
        bench.write_report(report, cfg.path(out) if not args.out else Path(out))
    return 0


def cmd_inspect(cfg: RunConfig, args) -> int:
    if args.path:
        p = Path(args.path)
        if not p.is_file():
            raise ConfigError(f"{p} does not exist")
        if p.suffix == ".json":
            info = pipeline.load_manifest(p)
            info = {k: v for k, v in info.items() if k != "entries"} | {"entries": len(info["entries"])}
        else:
            data = peek_archive(p)
            info = {k: data[k] for k in ("magic", "format", "config", "train_config", "epoch") if k in data}
    else:
        info = {k: v for k, v in asdict(cfg).items() if k != "base_dir"}
    print(json.dumps(info, indent=2, sort_keys=True, default=str))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ganseq", description="Synthetic pedestrian dataset pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML run config")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.set_defaults(func=func)
        return p

    p = add("toydata", cmd_toydata, "Write toy scenes, their colorized images and person boxes.")
    p.add_argument("--count", type=int, help="number of scenes")
    p.add_argument("--width", type=int, help="scene width in pixels")
    p.add_argument("--height", type=int, help="scene height in pixels")
    p.add_argument("--out", help="output directory")

    for name, func, what in (
        ("train-semgan", cmd_train_semgan, "Train the semantic-map GAN on toy scenes."),
        ("train-insert", cmd_train_insert, "Train the person insertion GANs on toy scenes."),
        ("train-translate", cmd_train_translate, "Train the map-to-image translator on toy pairs."),
    ):
        p = add(name, func, what)
        p.add_argument("--out", help="checkpoint path to write")
        p.add_argument("--epochs", type=int, help="training epochs")
        p.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many steps (0: no cap)")
        p.add_argument("--batch-size", dest="batch_size", type=int, help="batch size")
        p.add_argument("--dataset-size", dest="dataset_size", type=int, help="number of toy training scenes")

    p = add("generate", cmd_generate, "Run the three-stage pipeline and export a dataset.")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--jobs", type=int, help="samples generated in parallel")
    p.add_argument("--instances-per-map", dest="instances_per_map", type=int, help="persons inserted per map")

    p = add("evaluate", cmd_evaluate, "Score detections against ground truth (IoU matching, near/far split).")
    p.add_argument("--dets", help="detections CSV")
    p.add_argument("--gt", help="ground-truth CSV")
    p.add_argument("--threshold", type=float, help="IoU threshold (default 0.5)")
    p.add_argument("--out", help="directory for report.txt and report.json")
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the table")

    p = add("inspect", cmd_inspect, "Print checkpoint, manifest or resolved config metadata.")
    p.add_argument("path", nargs="?", help="checkpoint (.pt) or manifest.json; omit to show the config")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("GANSEQ_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.INFO), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging()
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"ganseq {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (GanseqError, OSError) as exc:
        print(f"ganseq {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
