"""
Command-line pipeline driver.

Subcommands: synth | tile | train | evaluate | map | regress | corroborate.
A single JSON config file holds the run parameters; every key can be
overridden by a same-named CLI flag. Each stage writes only into the run
directory and snapshots its effective config there, so a run is reproducible
from one file plus the top-level seed.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from . import cnn, dataset, evaluation, maps, synth, tiling, training
from .imaging import CanvasImage, load_image, resample_to_density, save_png

log = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: str = ""
    out_dir: str = "run"
    density: float = 25.0
    tile_side: int = 350
    pos_overlap: float = 0.94
    neg_overlap: float = 0.92
    arch: str = "five_layer"
    input_side: int = 128
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.01
    seeds: List[int] = None
    threads: int = 1
    # synth stage
    synth_n_positive: int = 12
    synth_n_comparative: int = 37
    synth_n_positive_test: int = 2
    synth_n_comparative_test: int = 16
    synth_image_side: int = 1024
    synth_seed: int = 1
    synth_contrast: float = 1.0

    def __post_init__(self):
        if self.seeds is None:
            self.seeds = [0]


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    values = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                values = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def snapshot_config(cfg: RunConfig, stage_dir: Path) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    with open(stage_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(asdict(cfg), f, indent=2, sort_keys=True)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path} (run the producing "
                                f"stage first)")
    return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_synth(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir) / "corpus"
    config = synth.SynthConfig(
        n_positive=cfg.synth_n_positive, n_comparative=cfg.synth_n_comparative,
        n_positive_test=cfg.synth_n_positive_test,
        n_comparative_test=cfg.synth_n_comparative_test,
        image_side_px=cfg.synth_image_side, seed=cfg.synth_seed,
        contrast=cfg.synth_contrast,
        intended_tile_side=min(cfg.tile_side, cfg.synth_image_side // 2))
    manifest = synth.generate_corpus(config, out)
    snapshot_config(cfg, out)
    print(f"corpus written: {manifest}")
    return manifest


def _manifest_path(cfg: RunConfig) -> Path:
    if cfg.manifest:
        return _require(Path(cfg.manifest), "manifest")
    return _require(Path(cfg.out_dir) / "corpus" / "manifest.jsonl",
                    "manifest (none configured)")


def stage_tile(cfg: RunConfig) -> Path:
    manifest = _manifest_path(cfg)
    entries = dataset.load_manifest(manifest)
    result = dataset.build_tilesets(entries, cfg.tile_side, cfg.pos_overlap,
                                    cfg.neg_overlap, cfg.density,
                                    manifest_dir=manifest.parent)
    out = Path(cfg.out_dir) / "tiles"
    images = {}
    for e in entries:
        if e.role in ("train", "test") and e.quality_flag != "degraded":
            from .imaging import to_luminance
            images[e.id] = to_luminance(
                dataset.load_entry_image(e, cfg.density, manifest.parent))
    tiling.save_tileset(out / "train", result.train_tiles, images)
    tiling.save_tileset(out / "test", result.test_tiles, images)
    with open(out / "counts.json", "w", encoding="utf-8") as f:
        json.dump(result.counts, f, indent=2, sort_keys=True)
    snapshot_config(cfg, out)
    print(f"tiles written: {out} (train counts {result.counts['train']})")
    return out


def _load_tile_batch(tile_dir: Path, input_side: int):
    tiles = tiling.load_tileset(tile_dir)
    crops = []
    labels = []
    for t in tiles:
        png = _require(tile_dir / f"{t.source_id}_{t.x}_{t.y}.png", "tile crop")
        crops.append(np.asarray(Image.open(png).convert("L"), dtype=np.uint8))
        labels.append(1 if t.label == "positive" else 0)
    return cnn.preprocess_tiles(crops, input_side), np.asarray(labels)


def stage_train(cfg: RunConfig) -> Path:
    tile_dir = _require(Path(cfg.out_dir) / "tiles" / "train", "train tile set")
    inputs, labels = _load_tile_batch(tile_dir, cfg.input_side)
    spec = cnn.make_spec(cfg.arch, cfg.input_side)
    hyper = training.Hyperparams(epochs=cfg.epochs, batch_size=cfg.batch_size,
                                 learning_rate=cfg.learning_rate)
    provenance = {
        "density": cfg.density, "tile_side": cfg.tile_side,
        "pos_overlap": cfg.pos_overlap, "neg_overlap": cfg.neg_overlap,
        "tileset_fingerprint": _sha256(tile_dir / "index.jsonl"),
    }
    out = Path(cfg.out_dir) / "models"
    out.mkdir(parents=True, exist_ok=True)
    metrics = {}
    for model in training.train_ensemble(spec, inputs, labels, hyper, cfg.seeds,
                                         provenance):
        bundle = out / f"model_seed{model.seed}.bin"
        cnn.save_bundle(bundle, spec, model.params, {
            **provenance, "seed": model.seed,
            "hyper": asdict(model.hyper),
            "history": [asdict(h) for h in model.history],
        })
        metrics[f"seed_{model.seed}"] = [asdict(h) for h in model.history]
        print(f"trained seed {model.seed}: final loss "
              f"{model.history[-1].loss:.4f}, tile accuracy "
              f"{model.history[-1].accuracy:.3f} -> {bundle}")
    with open(out / "metrics.json", "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
    snapshot_config(cfg, out)
    return out


def _load_models(cfg: RunConfig) -> List[training.TrainedModel]:
    model_dir = _require(Path(cfg.out_dir) / "models", "model directory")
    bundles = sorted(model_dir.glob("model_seed*.bin"))
    if not bundles:
        raise FileNotFoundError(f"no model bundles in {model_dir}")
    models = []
    for b in bundles:
        spec, params, meta = cnn.load_bundle(b)
        hyper = training.Hyperparams(**meta["hyper"])
        history = [training.EpochStats(**h) for h in meta.get("history", [])]
        models.append(training.TrainedModel(
            spec=spec, params=params, hyper=hyper, history=history,
            provenance={k: meta[k] for k in
                        ("density", "tile_side", "pos_overlap", "neg_overlap",
                         "tileset_fingerprint") if k in meta}))
    return models


def stage_evaluate(cfg: RunConfig) -> Path:
    manifest = _manifest_path(cfg)
    entries = dataset.load_manifest(manifest)
    test_entries = [e for e in entries if e.role == "test"]
    spec = tiling.TileSpec(cfg.tile_side, cfg.neg_overlap)
    models = _load_models(cfg)
    out = Path(cfg.out_dir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for model in models:
        report = evaluation.evaluate(model, test_entries, spec, cfg.density,
                                     manifest_dir=manifest.parent)
        with open(out / f"report_seed{model.seed}.json", "w",
                  encoding="utf-8") as f:
            f.write(report.to_json())
        summary.append({"seed": model.seed, "accuracy": report.accuracy,
                        "false_positives": report.false_positives,
                        "false_negatives": report.false_negatives})
        print(f"seed {model.seed}: accuracy {report.accuracy:.3f}, "
              f"FP {report.false_positives}, FN {report.false_negatives}")
    ranked = training.select_successful(
        models, test_entries,
        lambda m, ents: evaluation.evaluate(m, ents, spec, cfg.density,
                                            manifest_dir=manifest.parent))
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump({"models": summary,
                   "successful_seeds": [m.seed for m, _ in ranked]},
                  f, indent=2, sort_keys=True)
    snapshot_config(cfg, out)
    return out


def stage_map(cfg: RunConfig, model_path: str, image: str,
              canvas_width_cm: Optional[float]) -> Path:
    spec_arch, params, meta = cnn.load_bundle(_require(Path(model_path), "model"))
    net = cnn.Network(spec_arch, params)
    tile_spec = tiling.TileSpec(cfg.tile_side, cfg.neg_overlap)

    manifest = Path(cfg.manifest) if cfg.manifest else None
    if manifest and manifest.exists():
        entries = {e.id: e for e in dataset.load_manifest(manifest)}
    else:
        entries = {}
    if image in entries:
        img = dataset.load_entry_image(entries[image], cfg.density,
                                       manifest.parent)
    else:
        img = load_image(_require(Path(image), "image"))
        if canvas_width_cm:
            img = CanvasImage(pixels=img.pixels,
                              density_px_per_cm=img.width_px / canvas_width_cm,
                              source_id=img.source_id)
            img = resample_to_density(img, cfg.density)
        else:
            img = CanvasImage(pixels=img.pixels, density_px_per_cm=cfg.density,
                              source_id=img.source_id)

    pmap = maps.probability_map(net, img, tile_spec)
    out = Path(cfg.out_dir) / "maps"
    out.mkdir(parents=True, exist_ok=True)
    stem = img.source_id
    Image.fromarray(maps.render_map(pmap)).save(out / f"{stem}_overlay.png")
    Image.fromarray(maps.composite_overlay(pmap, img)).save(
        out / f"{stem}_composite.png")
    maps.save_map(pmap, out / f"{stem}_map.bin", meta={
        "source_id": stem, "density": cfg.density,
        "tile_side": cfg.tile_side, "overlap": cfg.neg_overlap,
        "model": str(model_path)})
    overall = maps.image_probability(net, img, tile_spec)
    print(f"{stem}: overall probability {overall:.4f} "
          f"({maps.classify_image(overall)}) -> {out}")
    snapshot_config(cfg, out)
    return out


def stage_regress(cfg: RunConfig, data_path: str) -> Path:
    points = []
    with open(_require(Path(data_path), "regression data"), "r",
              encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            x, y = line.replace(",", " ").split()[:2]
            points.append((float(x), float(y)))
    fit = evaluation.linear_fit(points)
    out = Path(cfg.out_dir) / "regress"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fit.json", "w", encoding="utf-8") as f:
        json.dump(asdict(fit), f, indent=2, sort_keys=True)
    with open(out / "scatter.txt", "w", encoding="utf-8") as f:
        for x, y in points:
            f.write(f"{x} {y}\n")
    print(f"slope {fit.slope:.4f}, intercept {fit.intercept:.4f}, "
          f"R^2 {fit.r_squared:.4f} over {fit.n_points} points -> {out}")
    snapshot_config(cfg, out)
    return out


def stage_corroborate(cfg: RunConfig) -> Path:
    manifest = _manifest_path(cfg)
    entries = dataset.load_manifest(manifest)
    external = [e for e in entries if e.role == "external"]
    models = _load_models(cfg)
    spec = tiling.TileSpec(cfg.tile_side, cfg.neg_overlap)
    report = evaluation.corroborate(models, external, spec, cfg.density,
                                    manifest_dir=manifest.parent)
    out = Path(cfg.out_dir) / "corroborate"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w", encoding="utf-8") as f:
        json.dump({"probabilities": report.probabilities,
                   "concordant": report.concordant,
                   "discordant": report.discordant,
                   "ties": report.ties,
                   "violations": report.violations,
                   "degraded_ids": report.degraded_ids},
                  f, indent=2, sort_keys=True)
    print(f"concordant {report.concordant}, discordant {report.discordant}, "
          f"ties {report.ties} -> {out}")
    snapshot_config(cfg, out)
    return out


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tileattrib",
        description="entropy-gated tile classification pipeline")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--verbose", action="store_true")

    def add_common(p):
        p.add_argument("--manifest")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--density", type=float)
        p.add_argument("--tile-side", dest="tile_side", type=int)
        p.add_argument("--pos-overlap", dest="pos_overlap", type=float)
        p.add_argument("--neg-overlap", dest="neg_overlap", type=float)
        p.add_argument("--arch", choices=cnn.ARCH_VARIANTS)
        p.add_argument("--input-side", dest="input_side", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")])
        p.add_argument("--threads", type=int)

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", help="generate a synthetic corpus")
    add_common(p)
    p.add_argument("--synth-n-positive", dest="synth_n_positive", type=int)
    p.add_argument("--synth-n-comparative", dest="synth_n_comparative", type=int)
    p.add_argument("--synth-n-positive-test", dest="synth_n_positive_test", type=int)
    p.add_argument("--synth-n-comparative-test", dest="synth_n_comparative_test",
                   type=int)
    p.add_argument("--synth-image-side", dest="synth_image_side", type=int)
    p.add_argument("--synth-seed", dest="synth_seed", type=int)
    p.add_argument("--synth-contrast", dest="synth_contrast", type=float)
    for name in ("tile", "train", "evaluate", "corroborate"):
        add_common(sub.add_parser(name))
    p = sub.add_parser("map", help="probability map for one image")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True,
                   help="manifest id or path to an image file")
    p.add_argument("--canvas-width-cm", dest="canvas_width_cm", type=float)
    p = sub.add_parser("regress", help="least-squares fit of x/y pairs")
    add_common(p)
    p.add_argument("--data", required=True, help="text file of 'x y' lines")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    override_keys = {f.name for f in fields(RunConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in override_keys}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "synth":
            stage_synth(cfg)
        elif args.command == "tile":
            stage_tile(cfg)
        elif args.command == "train":
            stage_train(cfg)
        elif args.command == "evaluate":
            stage_evaluate(cfg)
        elif args.command == "map":
            stage_map(cfg, args.model, args.image, args.canvas_width_cm)
        elif args.command == "regress":
            stage_regress(cfg, args.data)
        elif args.command == "corroborate":
            stage_corroborate(cfg)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError, dataset.ManifestError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (training.TrainingError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
