"""Forgery visual clue extraction.

Restores an input image through a sequence of progressively finer
restorations R_1..R_N, subtracts the last K+1 of them from the original
(D_n = I - R_n, signed and unclamped), takes the 2-D Fourier magnitude of
every difference, and channel-concatenates the summed frequency maps with
the summed differences into one auxiliary tensor supplied to downstream
models alongside the original image.

The restoration step is a pluggable backend: a diffusion pipeline run
elsewhere can hand in precomputed restoration files, while the built-in
surrogate emulates coarse-to-fine restoration with Gaussian blurs of
decreasing radius. All arrays are float64 internally; heights, widths and
values follow image convention (H, W, C) with originals in [0, 1].

Aggregated tensors are persisted in a small binary container: a 16-byte
header (magic ``FVCE``, version, height, width, plane count as
little-endian u16, 4 reserved bytes) followed by the planes as
little-endian float32, plane-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

__all__ = [
    "BackendFailure",
    "ShapeMismatch",
    "IndexOutOfRange",
    "ContainerFormatError",
    "RestorationBackend",
    "IdentityRestorer",
    "GaussianRestorer",
    "PrecomputedRestorer",
    "ClueStack",
    "DEFAULT_STEPS",
    "DEFAULT_LAST",
    "FVCE_MAGIC",
    "FVCE_VERSION",
    "load_image",
    "restore_sequence",
    "difference_stack",
    "frequency_stack",
    "raw_frequency_spectra",
    "build_extra_info",
    "extract_clues",
    "write_extra_info",
    "read_extra_info",
    "write_plane_previews",
]

DEFAULT_STEPS = 5
DEFAULT_LAST = 2

FVCE_MAGIC = b"FVCE"
FVCE_VERSION = 1
_HEADER = struct.Struct("<4sHHHH4x")


class BackendFailure(Exception):
    """The restoration backend could not produce its sequence."""


class ShapeMismatch(ValueError):
    """Planes of inconsistent dimensions met."""


class IndexOutOfRange(ValueError):
    """Requested restoration indices fall outside the sequence."""


class ContainerFormatError(Exception):
    """A clue container file is truncated or not one of ours."""


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG/JPEG to float64 values in [0, 1], shape (H, W, C)."""
    with Image.open(path) as img:
        if img.mode == "L":
            array = np.asarray(img, dtype=np.float64)[:, :, np.newaxis]
        else:
            array = np.asarray(img.convert("RGB"), dtype=np.float64)
    return array / 255.0


class RestorationBackend(Protocol):
    def restore(self, image: np.ndarray, steps: int) -> list[np.ndarray]:
        """Produce ``steps`` restorations ordered coarse to fine."""
        ...


class IdentityRestorer:
    """Every restoration is the original; useful as a null baseline."""

    def restore(self, image: np.ndarray, steps: int) -> list[np.ndarray]:
        return [image.copy() for _ in range(steps)]


class GaussianRestorer:
    """Surrogate coarse-to-fine restorer: Gaussian blur with a linearly
    decreasing radius, reaching the unblurred image at the final step."""

    def __init__(self, max_sigma: float = 4.0):
        if max_sigma <= 0:
            raise ValueError("max_sigma must be positive")
        self.max_sigma = max_sigma

    def sigmas(self, steps: int) -> list[float]:
        if steps == 1:
            return [self.max_sigma]
        return [self.max_sigma * (steps - n) / (steps - 1) for n in range(1, steps + 1)]

    def restore(self, image: np.ndarray, steps: int) -> list[np.ndarray]:
        spatial_sigma = [(s, s, 0) if image.ndim == 3 else (s, s) for s in self.sigmas(steps)]
        return [gaussian_filter(image, sigma=s) for s in spatial_sigma]


class PrecomputedRestorer:
    """Pass-through backend over restoration files produced elsewhere.

    Files follow the ``<stem>.restore.<n>.png`` convention, n = 1..N; use
    :meth:`for_image` to collect them next to the source image.
    """

    def __init__(self, files: Sequence[Path]):
        self.files = [Path(f) for f in files]

    @classmethod
    def for_image(cls, image_path: str | Path, steps: int) -> "PrecomputedRestorer":
        image_path = Path(image_path)
        stem = image_path.name.rsplit(".", 1)[0]
        files = [
            image_path.parent / f"{stem}.restore.{n}.png"
            for n in range(1, steps + 1)
        ]
        return cls(files)

    def restore(self, image: np.ndarray, steps: int) -> list[np.ndarray]:
        if len(self.files) != steps:
            raise BackendFailure(
                f"need {steps} restoration files, have {len(self.files)}"
            )
        restorations = []
        for file in self.files:
            try:
                restored = load_image(file)
            except OSError as exc:
                raise BackendFailure(f"cannot decode {file}: {exc}") from exc
            restorations.append(restored)
        return restorations


def restore_sequence(
    image: np.ndarray, restorer: RestorationBackend, steps: int
) -> list[np.ndarray]:
    """Run the backend and enforce the shape contract on its output."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    try:
        restorations = restorer.restore(image, steps)
    except BackendFailure:
        raise
    except Exception as exc:
        raise BackendFailure(f"restoration backend failed: {exc}") from exc
    if len(restorations) != steps:
        raise BackendFailure(
            f"backend returned {len(restorations)} restorations for {steps} steps"
        )
    for n, restored in enumerate(restorations, start=1):
        if restored.shape != image.shape:
            raise ShapeMismatch(
                f"restoration {n} has shape {restored.shape}, "
                f"image has {image.shape}"
            )
    return restorations


def difference_stack(
    image: np.ndarray, restorations: Sequence[np.ndarray], last: int
) -> list[np.ndarray]:
    """Signed differences I - R_n for the last ``last``+1 restorations
    (n = N-last .. N inclusive), unclamped."""
    steps = len(restorations)
    if last < 0 or last + 1 > steps:
        raise IndexOutOfRange(
            f"last={last} selects {last + 1} planes from {steps} restorations"
        )
    return [image - restored for restored in restorations[steps - last - 1 :]]


def raw_frequency_spectra(differences: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Unshifted complex 2-D DFT of every difference plane, per channel."""
    return [np.fft.fft2(d, axes=(0, 1)) for d in differences]


def frequency_stack(differences: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Zero-frequency-centered magnitude spectra with log1p scaling."""
    return [
        np.log1p(np.abs(np.fft.fftshift(raw, axes=(0, 1))))
        for raw in raw_frequency_spectra(differences)
    ]


def build_extra_info(
    frequencies: Sequence[np.ndarray], differences: Sequence[np.ndarray]
) -> np.ndarray:
    """Channel-concatenate summed frequency maps and summed differences.

    Output shape is (H, W, 2C): all frequency-sum channels first, then all
    difference-sum channels. Sums are left unclamped, so the result lives
    in a floating-point container, never an 8-bit image.
    """
    if len(frequencies) != len(differences) or not frequencies:
        raise ShapeMismatch(
            f"{len(frequencies)} frequency planes vs "
            f"{len(differences)} difference planes"
        )
    shapes = {plane.shape for plane in (*frequencies, *differences)}
    if len(shapes) != 1:
        raise ShapeMismatch(f"inconsistent plane shapes: {sorted(shapes)}")
    freq_sum = np.sum(frequencies, axis=0)
    diff_sum = np.sum(differences, axis=0)
    if freq_sum.ndim == 2:
        freq_sum = freq_sum[:, :, np.newaxis]
        diff_sum = diff_sum[:, :, np.newaxis]
    return np.concatenate([freq_sum, diff_sum], axis=2)


@dataclass
class ClueStack:
    """All per-image artifacts of one extraction run."""

    restorations: list[np.ndarray]
    differences: list[np.ndarray]
    frequencies: list[np.ndarray]
    raw_spectra: list[np.ndarray]
    extra_info: np.ndarray


def extract_clues(
    image: np.ndarray,
    restorer: RestorationBackend,
    steps: int = DEFAULT_STEPS,
    last: int = DEFAULT_LAST,
) -> ClueStack:
    """Full pipeline for one image: restore, difference, transform, sum."""
    restorations = restore_sequence(image, restorer, steps)
    kept = restorations[len(restorations) - last - 1 :]
    differences = difference_stack(image, restorations, last)
    frequencies = frequency_stack(differences)
    raw = raw_frequency_spectra(differences)
    return ClueStack(
        restorations=kept,
        differences=differences,
        frequencies=frequencies,
        raw_spectra=raw,
        extra_info=build_extra_info(frequencies, differences),
    )


def write_extra_info(path: str | Path, extra_info: np.ndarray) -> None:
    """Serialize an (H, W, P) tensor to the binary clue container."""
    if extra_info.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, planes), got {extra_info.shape}")
    height, width, planes = extra_info.shape
    if max(height, width, planes) > 0xFFFF:
        raise ValueError("dimensions exceed the container's u16 header fields")
    header = _HEADER.pack(FVCE_MAGIC, FVCE_VERSION, height, width, planes)
    payload = np.ascontiguousarray(
        np.moveaxis(extra_info, 2, 0), dtype="<f4"
    ).tobytes()
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(payload)


def read_extra_info(path: str | Path) -> np.ndarray:
    """Read a clue container back to a float32 (H, W, P) tensor."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < _HEADER.size:
        raise ContainerFormatError(f"{path}: truncated header")
    magic, version, height, width, planes = _HEADER.unpack_from(blob)
    if magic != FVCE_MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {magic!r}")
    if version != FVCE_VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    expected = height * width * planes * 4
    payload = blob[_HEADER.size :]
    if len(payload) != expected:
        raise ContainerFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    planes_first = np.frombuffer(payload, dtype="<f4").reshape(
        planes, height, width
    )
    return np.moveaxis(planes_first, 0, 2).copy()


def write_plane_previews(stem: str | Path, extra_info: np.ndarray) -> list[Path]:
    """Write one min-max normalized grayscale PNG per plane, for eyeballing;
    flat planes render black."""
    written = []
    for p in range(extra_info.shape[2]):
        plane = extra_info[:, :, p].astype(np.float64)
        low, high = float(plane.min()), float(plane.max())
        if high > low:
            plane = (plane - low) / (high - low)
        else:
            plane = np.zeros_like(plane)
        path = Path(f"{stem}.plane{p}.png")
        Image.fromarray((plane * 255.0).round().astype(np.uint8), mode="L").save(path)
        written.append(path)
    return written
