"""``baggagedet`` command line: synth, tip, split, train, detect, eval, sweep, render.

Settings come from a flat ``key=value`` file (``--config``), then ``--set``
overrides, then the dedicated flags. Exit status is 1 for a bad setting and 2
for any failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import synthtip
from .anchors import AnchorConfig, build_anchor_grid
from .augment import AugmentConfig
from .volcore import (
    CLASS_NAMES,
    ENERGIES,
    Box3D,
    ManifestEntry,
    ScaleConfig,
    load_volume,
    read_manifest,
    save_volume,
    scaled_dims,
    write_manifest,
)

log = logging.getLogger("baggagedet")

MANIFEST = "manifest.tsv"
# render colours per class id
CLASS_COLOURS = ((0, 0, 255), (255, 0, 0), (255, 0, 255), (255, 255, 0), (0, 0, 0))


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"config key {key!r}: {msg}")
        self.key = key


# ------------------------------------------------------------------- settings

def _floats(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace("-", ",").split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def _float_list(text: str) -> tuple[float, ...]:
    # no dash splitting: learning rates like 1e-3 contain one
    return tuple(float(p) for p in text.split(",") if p.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace("-", ",").split(",") if p.strip())


def _switch(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _choice(*opts):
    def parse(text: str) -> str:
        if text not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}, got {text!r}")
        return text
    return parse


# key -> (parser, default as text)
KEYS = {
    "seed": (int, "0"),
    "split": (int, "1"),
    "scale.s": (int, "3"),
    "anchors.sizes": (_floats, "8,16,32,64"),
    "anchors.multipliers": (_float_list, "1"),
    "match.iou": (float, "0.1"),
    "aug.p": (float, "0.2"),
    "aug.flips": (_switch, "on"),
    "aug.rotations": (_switch, "on"),
    "model.depth": (int, "10"),
    "model.widths": (_ints, "16,32,64,128"),
    "model.fpn_width": (int, "64"),
    "model.channels": (_choice(*ENERGIES), "low"),
    "train.lrs": (_float_list, "1e-3,1e-4,1e-5"),
    "train.epochs": (int, "20"),
    "train.batch": (int, "2"),
    "train.neg_ratio": (int, "3"),
    "train.focal_gamma": (float, "0"),
    "eval.tp_iou": (float, "0.1"),
    "eval.score": (float, "0.5"),
    "eval.nms_iou": (float, "0.1"),
    "eval.max_dets": (int, "100"),
    "eval.pr_mode": (_choice("threshold", "max-f1"), "threshold"),
    "data.dims": (_ints, "48"),
    "data.channels": (int, "2"),
    "data.tip_fraction": (float, "0.3"),
    "data.objects": (_ints, "1,3"),
}

FLAG_KEYS = {
    "seed": "seed",
    "split": "split",
    "scale": "scale.s",
    "anchors": "anchors.sizes",
    "aug_p": "aug.p",
    "depth": "model.depth",
    "channels": "model.channels",
}


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {n} of {path} is not key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_settings(raw: dict[str, str]) -> dict:
    vals = {}
    for key, text in raw.items():
        if key not in KEYS:
            raise ConfigError(key, "unknown key")
        try:
            vals[key] = KEYS[key][0](text)
        except ValueError as e:
            raise ConfigError(key, str(e)) from None
    for key, (parse, default) in KEYS.items():
        vals.setdefault(key, parse(default))
    return vals


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    manifest: Path | None = None
    out: Path | None = None

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def split(self) -> int:
        return self.values["split"]

    def to_text(self) -> str:
        return "".join(f"{k}={format_value(self.values[k])}\n" for k in KEYS)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, tuple):
        return ",".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
    return str(v)


@contextmanager
def _blame(key: str):
    try:
        yield
    except (ValueError, TypeError) as e:
        raise ConfigError(key, str(e)) from None


def build_configs(vals: dict) -> dict:
    """Validate every sub-config, blaming the first offending key."""
    from .evalkit import EvalConfig
    from .net3d.model import BackboneConfig, ModelConfig
    from .net3d.train import TrainConfig

    with _blame("split"):
        if vals["split"] not in (1, 2, 3):
            raise ValueError("split index must be 1, 2 or 3")
    with _blame("scale.s"):
        scale = ScaleConfig(vals["scale.s"])
    with _blame("anchors.sizes"):
        anchors = AnchorConfig(vals["anchors.sizes"], vals["anchors.multipliers"])
    with _blame("match.iou"):
        if not 0 < vals["match.iou"] < 1:
            raise ValueError("must lie in (0, 1)")
    with _blame("aug.p"):
        aug = AugmentConfig(vals["aug.p"], vals["aug.flips"], vals["aug.rotations"], seed=vals["seed"])
    with _blame("model.depth"):
        backbone = BackboneConfig(
            vals["model.depth"], vals["model.widths"], 2 if vals["model.channels"] == "dual" else 1
        )
    with _blame("model.fpn_width"):
        if vals["model.fpn_width"] < 1:
            raise ValueError("must be >= 1")
        model = ModelConfig(backbone, vals["model.fpn_width"], n_a=anchors.n_a)
    for key in ("train.epochs", "train.batch"):
        with _blame(key):
            if vals[key] < 1:
                raise ValueError("must be >= 1")
    with _blame("train.lrs"):
        train = TrainConfig(
            lrs=vals["train.lrs"],
            epochs_per_stage=vals["train.epochs"],
            batch_size=vals["train.batch"],
            neg_ratio=vals["train.neg_ratio"],
            focal_gamma=vals["train.focal_gamma"],
            match_iou=vals["match.iou"],
            seed=vals["seed"],
        )
    for key in ("eval.tp_iou", "eval.score", "eval.nms_iou"):
        with _blame(key):
            if not 0 < vals[key] < 1:
                raise ValueError("must lie in (0, 1)")
    with _blame("eval.max_dets"):
        ev = EvalConfig(
            vals["eval.tp_iou"], vals["eval.score"], vals["eval.nms_iou"], vals["eval.max_dets"], vals["eval.pr_mode"]
        )
    with _blame("data.dims"):
        dims = vals["data.dims"]
        dims = dims * 3 if len(dims) == 1 else dims
        bag = synthtip.BagSpec(dims=tuple(dims), channels=vals["data.channels"])
    with _blame("data.tip_fraction"):
        if not 0 <= vals["data.tip_fraction"] <= 1:
            raise ValueError("must lie in [0, 1]")
    with _blame("data.objects"):
        lo, hi = vals["data.objects"]
        if not 1 <= lo <= hi:
            raise ValueError("need 1 <= min <= max objects per bag")
        data = synthtip.DatasetSpec(bag=bag, objects_per_bag=(lo, hi), tip_fraction=vals["data.tip_fraction"])
    return dict(scale=scale, anchors=anchors, aug=aug, model=model, train=train, eval=ev, data=data)


def resolve(args) -> ExperimentConfig:
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(item, "--set expects key=value")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            raw[key] = str(v)
    vals = parse_settings(raw)
    build_configs(vals)
    manifest = getattr(args, "data", None)
    out = getattr(args, "out", None)
    return ExperimentConfig(vals, Path(manifest) if manifest else None, Path(out) if out else None)


# ------------------------------------------------------------------ plumbing

class RuntimeFailure(RuntimeError):
    pass


@contextmanager
def locked(out_dir: Path):
    """One process owns ``out_dir`` at a time."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeFailure(f"{out_dir} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def manifest_of(path: Path) -> Path:
    return path / MANIFEST if path.is_dir() else path


def split_volumes(manifest: Path, subset: str, index: int) -> list[tuple[str, Path]]:
    root = manifest.parent
    items = [(e.path, root / e.path) for e in read_manifest(manifest) if e.split == subset and e.split_index == index]
    if not items:
        raise RuntimeFailure(f"{manifest} has no {subset} volumes for split {index}")
    return items


def make_splits(names, ratio: float, seeds: int, seed: int) -> list[ManifestEntry]:
    n = len(names)
    n_train = int(round(ratio * n))
    entries = []
    for k in range(1, seeds + 1):
        perm = np.random.default_rng([seed, k]).permutation(n)
        train = set(perm[:n_train].tolist())
        entries += [ManifestEntry(nm, "train" if i in train else "test", k) for i, nm in enumerate(names)]
    return entries


# --------------------------------------------------------------- subcommands

def cmd_synth(args, cfg: ExperimentConfig) -> None:
    if args.count < 1:
        raise ConfigError("count", "must be >= 1")
    data = build_configs(cfg.values)["data"]
    with locked(cfg.out) as out:
        names = synthtip.synthesize_dataset(data, args.count, out, seed=cfg.seed)
        write_manifest(make_splits(names, 0.7, 3, cfg.seed), out / MANIFEST)
        (out / "config.txt").write_text(cfg.to_text())
    print(f"wrote {len(names)} volumes to {cfg.out}")


def cmd_split(args, cfg: ExperimentConfig) -> None:
    if not 0 < args.ratio < 1:
        raise ConfigError("ratio", "must lie in (0, 1)")
    if not 1 <= args.seeds <= 3:
        raise ConfigError("seeds", "must be 1, 2 or 3")
    data_dir = Path(args.data)
    listing = data_dir / "volumes.txt"
    if not listing.exists():
        raise RuntimeFailure(f"{listing} not found")
    names = listing.read_text().split()
    out = cfg.out or data_dir
    with locked(out):
        rel = [os.path.relpath(data_dir / n, out) for n in names]
        entries = make_splits(rel, args.ratio, args.seeds, cfg.seed)
        write_manifest(entries, out / MANIFEST)
    for k in range(1, args.seeds + 1):
        n_tr = sum(e.split == "train" and e.split_index == k for e in entries)
        print(f"split {k}: {n_tr} train / {len(names) - n_tr} test")


def cmd_tip(args, cfg: ExperimentConfig) -> None:
    if args.extract:
        if args.box is None:
            raise ConfigError("box", "--extract needs --box z0,y0,x0,z1,y1,x1")
        try:
            box = Box3D(*_float_list(args.box))
        except (TypeError, ValueError) as e:
            raise ConfigError("box", str(e)) from None
        v, _ = load_volume(args.extract)
        sig = synthtip.extract_signature(v, box, args.threshold, args.class_id)
        with locked(cfg.out) as out:
            synthtip.save_signature(sig, out)
        print(f"signature {sig.dims} ({CLASS_NAMES[sig.class_id]}) -> {cfg.out}")
        return
    if not args.target or not args.sig:
        raise ConfigError("target", "tip needs --target and --sig (or --extract)")
    v, anns = load_volume(args.target)
    rng = np.random.default_rng(cfg.seed)
    with locked(cfg.out) as out:
        for k, sig_dir in enumerate(args.sig):
            sig = synthtip.load_signature(sig_dir)
            v, ann = synthtip.project_signature(v, sig, rng, instance_id=len(anns) + k)
            anns = anns + [ann]
        dest = out / (Path(args.target).stem + "_tip.bvox")
        save_volume(v, dest, anns)
    print(f"wrote {dest}")


def _prepared(paths, cfg: ExperimentConfig, scale: ScaleConfig, channels: str):
    from .net3d.train import prepare_sample

    out = []
    for name, p in paths:
        v, anns = load_volume(p)
        out.append((name, v, anns, prepare_sample(v, anns, scale, channels)))
    return out


def run_train(cfg: ExperimentConfig, manifest: Path, split: int, out: Path) -> Path:
    from .net3d.train import build_model, train

    c = build_configs(cfg.values)
    items = _prepared(split_volumes(manifest, "train", split), cfg, c["scale"], cfg.values["model.channels"])
    model = build_model(c["model"], cfg.seed)
    meta = {"config": cfg.to_text(), "manifest": str(manifest), "split": split}
    train(model, [it[3] for it in items], c["train"], c["aug"], c["anchors"], out_dir=out, extra_meta=meta)
    (out / "config.txt").write_text(cfg.to_text())
    return out / "final.ckpt"


def run_detect(cfg: ExperimentConfig, ckpt: Path, manifest: Path, split: int, subset: str, out: Path) -> Path:
    from .evalkit import scale_detections, write_detections
    from .evalkit import detect as detect_one
    from .net3d.train import load_checkpoint

    model, state = load_checkpoint(ckpt)
    # geometry comes from the run that produced the checkpoint
    trained_vals = parse_settings(read_text_config(state["meta"].get("config", "")))
    trained = build_configs(trained_vals)
    ev = build_configs(cfg.values)["eval"]
    channels = trained_vals["model.channels"]
    scale = trained["scale"]
    grids = {}
    dets = []
    for name, v, _, (pv, _) in _prepared(split_volumes(manifest, subset, split), cfg, scale, channels):
        dims = pv.dims
        if dims not in grids:
            grids[dims] = build_anchor_grid(dims, trained["anchors"])
        found = detect_one(model, pv, grids[dims], ev, extent=scaled_dims(v.dims, scale.s), volume_id=name)
        dets += scale_detections(found, scale.s, v.dims)
    path = out / "detections.jsonl"
    write_detections(dets, path)
    return path


def read_text_config(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def run_eval(cfg: ExperimentConfig, dets_path: Path, manifest: Path, split: int, subset: str, out: Path):
    from .evalkit import ReportRow, evaluate, read_detections, report

    ev = build_configs(cfg.values)["eval"]
    gts = {name: load_volume(p)[1] for name, p in split_volumes(manifest, subset, split)}
    dets: dict[str, list] = {name: [] for name in gts}
    for d in read_detections(dets_path):
        dets.setdefault(d.volume_id, []).append(d)
    metrics = evaluate(dets, gts, ev)
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / "metrics.txt").write_text(report([ReportRow((f"split {split}",), [metrics])], "energy"))
    return metrics


def cmd_train(args, cfg: ExperimentConfig) -> None:
    manifest = _need_manifest(cfg)
    with locked(cfg.out) as out:
        ckpt = run_train(cfg, manifest, cfg.split, out)
    print(f"checkpoint {ckpt}")


def cmd_detect(args, cfg: ExperimentConfig) -> None:
    manifest = _need_manifest(cfg)
    with locked(cfg.out) as out:
        path = run_detect(cfg, Path(args.ckpt), manifest, cfg.split, args.subset, out)
    print(f"detections {path}")


def cmd_eval(args, cfg: ExperimentConfig) -> None:
    manifest = _need_manifest(cfg)
    with locked(cfg.out) as out:
        metrics = run_eval(cfg, Path(args.dets), manifest, cfg.split, args.subset, out)
    print((cfg.out / "metrics.txt").read_text(), end="")
    print(f"mAP {metrics.mAP:.4f}")


def _need_manifest(cfg: ExperimentConfig) -> Path:
    if cfg.manifest is None:
        raise ConfigError("data", "--data (manifest or dataset folder) is required")
    m = manifest_of(cfg.manifest)
    if not m.exists():
        raise RuntimeFailure(f"manifest {m} not found")
    return m


# sweep tables: name -> (report kind, label columns, rows of (label, overrides))
SWEEPS = {
    "backbone": ("pr", ("backbone",), [((f"ResNet{d}",), {"model.depth": str(d)}) for d in (10, 18, 34, 50, 101)]),
    "aug": (
        "ap",
        ("flip", "rotation"),
        [
            (("off", "off"), {"aug.p": "0"}),
            (("0.2", "off"), {"aug.p": "0.2", "aug.flips": "on", "aug.rotations": "off"}),
            (("off", "0.2"), {"aug.p": "0.2", "aug.flips": "off", "aug.rotations": "on"}),
            (("0.2", "0.2"), {"aug.p": "0.2", "aug.flips": "on", "aug.rotations": "on"}),
            (("0.5", "0.5"), {"aug.p": "0.5", "aug.flips": "on", "aug.rotations": "on"}),
        ],
    ),
    "scale": (
        "ap",
        ("scale", "anchors"),
        [
            ((str(s), a), {"scale.s": str(s), "anchors.sizes": a.replace("-", ",")})
            for s, a in [(2, "8-16-32-64"), (3, "4-8-16-32"), (3, "8-16-32-64"), (4, "4-8-16-32"), (4, "8-16-32-64")]
        ],
    ),
    "energy": ("energy", ("energy",), [((e,), {"model.channels": e}) for e in ("low", "high", "dual")]),
}


def cmd_sweep(args, cfg: ExperimentConfig) -> None:
    from .evalkit import ReportRow, report

    kind, label_names, grid = SWEEPS[args.table]
    manifest = _need_manifest(cfg)
    splits = sorted({e.split_index for e in read_manifest(manifest)})
    if args.splits:
        try:
            splits = list(_ints(args.splits))
        except ValueError as e:
            raise ConfigError("splits", str(e)) from None
    rows = []
    with locked(cfg.out) as out:
        for label, overrides in grid:
            raw = read_text_config(cfg.to_text())
            raw.update(overrides)
            vals = parse_settings(raw)
            build_configs(vals)
            row = ReportRow(label)
            for k in splits:
                vals_k = dict(vals, split=k)
                sub_cfg = replace(cfg, values=vals_k)
                d = out / "_".join(label).replace(".", "p") / f"split{k}"
                d.mkdir(parents=True, exist_ok=True)
                log.info("sweep %s row %s split %d", args.table, label, k)
                ckpt = run_train(sub_cfg, manifest, k, d)
                dets = run_detect(sub_cfg, ckpt, manifest, k, "test", d)
                row.splits.append(run_eval(sub_cfg, dets, manifest, k, "test", d))
            rows.append(row)
        text = report(rows, kind, "text", label_names)
        (out / f"table_{args.table}.txt").write_text(text)
        (out / f"table_{args.table}.csv").write_text(report(rows, kind, "csv", label_names))
        (out / f"table_{args.table}.json").write_text(report(rows, kind, "json", label_names))
    print(text, end="")


def _draw_rect(img, r0, c0, r1, c1, colour):
    h, w = img.shape[:2]
    r0, c0 = max(0, int(np.floor(r0))), max(0, int(np.floor(c0)))
    r1, c1 = min(h - 1, int(np.ceil(r1)) - 1), min(w - 1, int(np.ceil(c1)) - 1)
    if r1 < r0 or c1 < c0:
        return
    img[r0, c0:c1 + 1] = colour
    img[r1, c0:c1 + 1] = colour
    img[r0:r1 + 1, c0] = colour
    img[r0:r1 + 1, c1] = colour


def render_slices(v, boxes, upscale: int = 4):
    """Mid-slice RGB image per axis with every box projected onto the plane."""
    vox = v.voxels[0]
    hi = float(vox.max()) or 1.0
    images = {}
    for axis, name in enumerate("zyx"):
        plane = np.take(vox, vox.shape[axis] // 2, axis=axis) / hi
        grey = (np.clip(plane, 0, 1) * 255).astype(np.uint8)
        grey = np.kron(grey, np.ones((upscale, upscale), dtype=np.uint8))
        img = np.repeat(grey[..., None], 3, axis=2)
        keep = [i for i in range(3) if i != axis]
        for box, cid in boxes:
            c = np.asarray(box.coords) * upscale
            _draw_rect(img, c[keep[0]], c[keep[1]], c[keep[0] + 3], c[keep[1] + 3], CLASS_COLOURS[cid])
        images[name] = img
    return images


def cmd_render(args, cfg: ExperimentConfig) -> None:
    from PIL import Image

    from .evalkit import read_detections

    v, anns = load_volume(args.volume)
    boxes = [(a.box, a.class_id) for a in anns]
    if args.dets:
        vid = args.volume_id or Path(args.volume).name
        boxes = [
            (d.box, d.class_id)
            for d in read_detections(args.dets)
            if d.volume_id == vid and d.score >= build_configs(cfg.values)["eval"].score_threshold
        ]
    stem = Path(args.volume).stem
    with locked(cfg.out) as out:
        for name, img in render_slices(v, boxes, args.upscale).items():
            Image.fromarray(img).save(out / f"{stem}_{name}.png")
    print(f"rendered {stem} to {cfg.out}")


# ---------------------------------------------------------------------- main

COMMANDS = {
    "synth": cmd_synth,
    "tip": cmd_tip,
    "split": cmd_split,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    common.add_argument("--seed", type=int)
    common.add_argument("--split", type=int, help="split index 1..3")
    common.add_argument("--scale", type=int, help="down-scaling factor s")
    common.add_argument("--anchors", help="base anchor sizes, e.g. 8-16-32-64")
    common.add_argument("--aug-p", dest="aug_p", type=float)
    common.add_argument("--depth", type=int, help="backbone depth")
    common.add_argument("--channels", help="low | high | dual")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="baggagedet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--count", type=int, required=True)

    s = sub.add_parser("tip", parents=[common], help="project signatures into a volume, or extract one")
    s.add_argument("--target")
    s.add_argument("--sig", action="append", help="signature folder (repeatable)")
    s.add_argument("--extract", metavar="VOLUME")
    s.add_argument("--box")
    s.add_argument("--threshold", type=float, default=0.2)
    s.add_argument("--class-id", dest="class_id", type=int, default=0)

    s = sub.add_parser("split", parents=[common], help="train/test splits over a synthesized folder")
    s.add_argument("--data", required=True, help="folder holding volumes.txt")
    s.add_argument("--ratio", type=float, default=0.7)
    s.add_argument("--seeds", type=int, default=3)

    for name in ("train", "detect", "eval", "sweep"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--data", help="manifest.tsv or the folder holding it")
        if name == "detect":
            s.add_argument("--ckpt", required=True)
        if name == "eval":
            s.add_argument("--dets", required=True)
        if name in ("detect", "eval"):
            s.add_argument("--subset", choices=("train", "test"), default="test")
        if name == "sweep":
            s.add_argument("--table", choices=sorted(SWEEPS), required=True)
            s.add_argument("--splits", help="comma list of split indices (default: all in the manifest)")

    s = sub.add_parser("render", parents=[common], help="mid-slice PNGs with boxes")
    s.add_argument("--volume", required=True)
    s.add_argument("--dets", help="draw detections instead of the annotations")
    s.add_argument("--volume-id", dest="volume_id")
    s.add_argument("--upscale", type=int, default=4)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.channels is not None and args.channels not in ENERGIES:
            raise ConfigError("model.channels", f"expected one of {', '.join(ENERGIES)}")
        cfg = resolve(args)
        if cfg.out is None and args.command != "split":
            raise ConfigError("out", "--out is required")
        workers = synthtip.worker_count()
        if args.command in ("train", "detect", "sweep"):
            import torch

            torch.set_num_threads(max(1, min(torch.get_num_threads(), workers)))
        COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit 2
        if args.verbose:
            log.exception("run failed")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
