"""On-disk dataset persistence.

Layout, one directory per split::

    split_dir/
      manifest.json            {"n_scenes": N}
      scene_00000/
        image.png              RGB, 8 bit
        parsing.png            single channel, label indices
        inst_00.png ...        per-instance label rasters
        meta.json              seed, boxes, part ids

Everything round-trips bit exactly: images are generated on the 8-bit grid
and labels are small integers, so PNG is lossless for both.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import Box
from .synthetic import GroundTruthInstance, Scene

MANIFEST = "manifest.json"


class DatasetError(RuntimeError):
    pass


def _scene_dir(root: Path, index: int) -> Path:
    return root / f"scene_{index:05d}"


def save_dataset(scenes: list[Scene], path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for index, scene in enumerate(scenes):
        sdir = _scene_dir(root, index)
        sdir.mkdir(exist_ok=True)
        rgb = np.round(scene.image * 255.0).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(sdir / "image.png")
        Image.fromarray(scene.global_parsing, mode="L").save(sdir / "parsing.png")
        meta = {
            "seed": scene.seed,
            "boxes": [list(inst.box.as_tuple()) for inst in scene.instances],
            "part_ids": [sorted(inst.part_ids) for inst in scene.instances],
        }
        for j, inst in enumerate(scene.instances):
            Image.fromarray(inst.parsing, mode="L").save(sdir / f"inst_{j:02d}.png")
        with open(sdir / "meta.json", "w") as fh:
            json.dump(meta, fh, indent=1)
    with open(root / MANIFEST, "w") as fh:
        json.dump({"n_scenes": len(scenes)}, fh)


def _load_raster(path: Path, scene_index: int) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"scene {scene_index}: missing file {path.name}")
    try:
        return np.asarray(Image.open(path))
    except Exception as exc:
        raise DatasetError(f"scene {scene_index}: corrupt file {path.name}: {exc}") from exc


def load_dataset(path: str | Path) -> list[Scene]:
    root = Path(path)
    manifest_path = root / MANIFEST
    if not manifest_path.exists():
        raise DatasetError(f"empty dataset: no {MANIFEST} under {root}")
    with open(manifest_path) as fh:
        n_scenes = json.load(fh)["n_scenes"]
    if n_scenes == 0:
        raise DatasetError(f"empty dataset: {root} holds no scenes")

    scenes: list[Scene] = []
    for index in range(n_scenes):
        sdir = _scene_dir(root, index)
        if not sdir.exists():
            raise DatasetError(f"scene {index}: missing directory {sdir.name}")
        rgb = _load_raster(sdir / "image.png", index)
        image = (rgb.astype(np.float32) / 255.0)
        parsing = _load_raster(sdir / "parsing.png", index).astype(np.uint8)
        meta_path = sdir / "meta.json"
        if not meta_path.exists():
            raise DatasetError(f"scene {index}: missing file meta.json")
        with open(meta_path) as fh:
            meta = json.load(fh)
        instances = []
        for j, (box, part_ids) in enumerate(zip(meta["boxes"], meta["part_ids"])):
            raster = _load_raster(sdir / f"inst_{j:02d}.png", index).astype(np.uint8)
            instances.append(GroundTruthInstance(
                box=Box(*box), parsing=raster, part_ids=frozenset(part_ids)))
        scenes.append(Scene(image=image, instances=instances,
                            global_parsing=parsing, seed=meta["seed"]))
    return scenes
