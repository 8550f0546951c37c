import os

import runez
from runez.conftest import cli, logged, temp_folder

from prealign.cli import main
from prealign.corpus import CorpusSettings, make_sample
from prealign.model import build_pipeline, PipelineSpec


cli.default_main = main
assert logged, temp_folder  # Just making fixtures available, with no complaints about unused imports

TINY_SIZES = dict(stage0=8, stage1=8, stage2=8, eval_general_vqa=4, eval_counting=4, eval_text=4)


def tiny_spec(variant="dpa", **overrides):
    """PipelineSpec: Smallest sensible pipeline, ViT and perceiver share their width so projectors line up"""
    data = dict(
        variant=variant,
        vit=dict(patch_dim=5, d_vit=8, layers=1, heads=2),
        perceiver_lm=dict(d_p=8, layers=1, heads=2),
        target_lm=dict(d_t=8, layers=2, heads=2),
        vocab_size=64,
        grid=2,
    )
    data.update(overrides)
    return PipelineSpec(**data)


def tiny_settings(seed=0):
    return CorpusSettings(seed=seed, grid=2, shapes=2, colors=3, sizes=dict(TINY_SIZES))


def tiny_sample(kind="vqa_color", i=0):
    settings = tiny_settings()
    return make_sample(kind, settings.sample_seed("eval_general_vqa", i), settings)


def tiny_model(variant="dpa", seed=0, **overrides):
    return build_pipeline(tiny_spec(variant, **overrides), seed)


def grab_sample(name):
    """Copy tests/samples/<name>/ to current folder"""
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "samples", name)
    for fname in os.listdir(path):
        runez.copy(os.path.join(path, fname), fname, logger=False)
