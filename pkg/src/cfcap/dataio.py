"""Dataset records, split builders and the line-oriented serialization.

One JSON record per line; field order is part of the format:

    scene_seed, grid, caption, spans, target_span, cf_grid, cf_caption

`grid`/`cf_grid` are row-major cell ids, `spans` is [[start, length, [cells]]
...], `cf_caption` is [] until a stage-1 model has produced it. A sidecar
manifest.json carries the format version, config hash, vocabulary table, grid
shape and split membership.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .scene import CaptionSample, CounterfactualSample, EntitySpan, SceneImage
from .vocab import Vocabulary
from .world import (
    BiasSpec,
    WorldConfig,
    build_counterfactual,
    generate_class_scene,
    generate_scene,
    span_index_of_object,
    target_span_for_scene,
)

FORMAT_VERSION = 1

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class SceneRecord:
    scene_seed: int
    image: SceneImage
    caption: CaptionSample
    target_span: int
    cf_image: SceneImage
    cf_caption: tuple[int, ...] = ()

    def factual_pair(self):
        return self.image, self.caption.tokens

    def counterfactual_sample(self) -> CounterfactualSample:
        """Requires cf_caption to have been generated (non-empty)."""
        return CounterfactualSample(
            factual_image=self.image,
            factual_caption=self.caption,
            target_span=self.target_span,
            cf_image=self.cf_image,
            cf_caption=self.cf_caption,
        )

    @property
    def masked_phrase(self) -> tuple[int, ...]:
        return self.caption.span_tokens(self.target_span)


@dataclass
class DatasetSplits:
    world: WorldConfig
    vocab: Vocabulary
    train: list
    val: list
    test: list

    def split(self, name: str) -> list:
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)


def config_hash(world: WorldConfig) -> str:
    payload = json.dumps(world.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _record_for_scene(config, vocab, scene_index, image=None, caption=None, target_span=None) -> SceneRecord:
    if image is None:
        image, caption = generate_scene(config, vocab, scene_index)
    if target_span is None:
        target_span = target_span_for_scene(config, caption, scene_index)
    cf_image = build_counterfactual(image, caption, target_span)
    return SceneRecord(
        scene_seed=scene_index,
        image=image,
        caption=caption,
        target_span=target_span,
        cf_image=cf_image,
        cf_caption=(),
    )


def build_dataset(config: WorldConfig) -> DatasetSplits:
    """Generate disjoint train/val/test splits of counterfactual records.

    cf_caption fields stay empty; they are filled from a stage-1 checkpoint
    (see trainer.fill_cf_captions).
    """
    vocab = config.vocabulary()
    n_train, n_val, n_test = config.split_sizes
    bounds = np.cumsum([0, n_train, n_val, n_test])
    splits = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        splits.append([_record_for_scene(config, vocab, int(i)) for i in range(lo, hi)])
    return DatasetSplits(world=config, vocab=vocab, train=splits[0], val=splits[1], test=splits[2])


def build_biased_split(config: WorldConfig, bias: BiasSpec) -> DatasetSplits:
    """Biased-world splits: train imbalanced A:B, val/test with the ratio
    reversed. Every record's masked span is its class object's region, so the
    counterfactual test probes what the model guesses behind the mask."""
    vocab = config.vocabulary()
    for cat in (bias.category_a, bias.category_b):
        vocab.object_by_name(cat)  # raises KeyError on unknown category

    def class_records(start, count_a, count_b):
        records, idx = [], start
        for cat, other, count in (
            (bias.category_a, bias.category_b, count_a),
            (bias.category_b, bias.category_a, count_b),
        ):
            for _ in range(count):
                image, caption = generate_class_scene(config, vocab, idx, forced=cat, excluded=other)
                span = span_index_of_object(vocab, caption, cat)
                records.append(_record_for_scene(config, vocab, idx, image, caption, span))
                idx += 1
        return records, idx

    train, idx = class_records(0, *bias.train_counts)
    val, idx = class_records(idx, *bias.eval_counts)
    test, _ = class_records(idx, *bias.eval_counts)
    return DatasetSplits(world=config, vocab=vocab, train=train, val=val, test=test)


# ---------------------------------------------------------------------------
# serialization

def record_to_dict(r: SceneRecord) -> dict:
    return {
        "scene_seed": r.scene_seed,
        "grid": r.image.flat().tolist(),
        "caption": list(r.caption.tokens),
        "spans": [[s.start, s.length, list(s.cells)] for s in r.caption.entity_spans],
        "target_span": r.target_span,
        "cf_grid": r.cf_image.flat().tolist(),
        "cf_caption": list(r.cf_caption),
    }


def record_from_dict(d: dict, grid_shape) -> SceneRecord:
    h, w = grid_shape
    caption = CaptionSample(
        tokens=tuple(d["caption"]),
        entity_spans=tuple(EntitySpan(start=p, length=n, cells=tuple(cells)) for p, n, cells in d["spans"]),
    )
    return SceneRecord(
        scene_seed=int(d["scene_seed"]),
        image=SceneImage(grid=np.asarray(d["grid"], dtype=np.int64).reshape(h, w)),
        caption=caption,
        target_span=int(d["target_span"]),
        cf_image=SceneImage(grid=np.asarray(d["cf_grid"], dtype=np.int64).reshape(h, w)),
        cf_caption=tuple(d["cf_caption"]),
    )


def _dump_line(d: dict) -> str:
    return json.dumps(d, separators=(",", ":"))


def save_dataset(splits: DatasetSplits, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(splits.world),
        "world_config": splits.world.to_dict(),
        "vocabulary": splits.vocab.to_dict(),
        "grid_shape": [splits.world.grid_h, splits.world.grid_w],
        "splits": {},
    }
    for name in SPLIT_NAMES:
        records = splits.split(name)
        path = out / f"{name}.jsonl"
        with open(path, "w") as fh:
            for r in records:
                fh.write(_dump_line(record_to_dict(r)) + "\n")
        manifest["splits"][name] = {
            "file": path.name,
            "count": len(records),
            "scene_seeds": [r.scene_seed for r in records],
        }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return out


def load_dataset(data_dir) -> DatasetSplits:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json in {data_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset format {manifest.get('format_version')}")
    world = WorldConfig.from_dict(manifest["world_config"])
    vocab = Vocabulary.from_dict(manifest["vocabulary"])
    shape = tuple(manifest["grid_shape"])
    out = {}
    for name in SPLIT_NAMES:
        path = data_dir / manifest["splits"][name]["file"]
        with open(path) as fh:
            out[name] = [record_from_dict(json.loads(line), shape) for line in fh if line.strip()]
    return DatasetSplits(world=world, vocab=vocab, train=out["train"], val=out["val"], test=out["test"])


def with_cf_captions(records: list, captions: list) -> list:
    """Records with their generated counterfactual captions attached."""
    if len(records) != len(captions):
        raise ValueError("caption list length mismatch")
    return [replace(r, cf_caption=tuple(c)) for r, c in zip(records, captions)]
