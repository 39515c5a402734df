from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from forge_evolve.dataset import CotFaceRecord
from forge_evolve.responses import DEFAULT_REGIONS, Verdict

TAGGED_FORGERY_ANSWER = (
    "<think>checking each region for artifacts</think>"
    "<answer>Overall image: inconsistent lighting. Face: waxy texture. "
    "The image is fake.</answer>"
)
TAGGED_REAL_ANSWER = (
    "<think>nothing suspicious anywhere</think>"
    "<answer>Overall image: coherent. Face: natural pores. "
    "This face looks authentic.</answer>"
)


def all_region_answer(verdict_sentence: str = "The image is fake.") -> str:
    body = " ".join(f"{key.name}: fine detail here." for key in DEFAULT_REGIONS)
    return f"<think>region by region</think><answer>{body} {verdict_sentence}</answer>"


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240817)


@pytest.fixture
def tiny_png(tmp_path: Path):
    """Factory writing a deterministic small RGB PNG and returning its path."""

    def make(name: str = "img.png", size: int = 8, seed: int = 0) -> Path:
        gen = np.random.default_rng(seed)
        pixels = gen.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        path = tmp_path / name
        Image.fromarray(pixels, mode="RGB").save(path)
        return path

    return make


@pytest.fixture
def sample_record(tiny_png) -> CotFaceRecord:
    image = tiny_png("sample.png", seed=3)
    return CotFaceRecord(
        id="sample-001",
        image_path=str(image),
        question="Does the image look fake?",
        answer=TAGGED_FORGERY_ANSWER,
        label=Verdict.FORGERY,
    )


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")
    return path
