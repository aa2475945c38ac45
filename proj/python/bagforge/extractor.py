"""Interface for turning whole-slide images into MILB bags.

Only the job description and its validation live here. The slide reader,
tissue masking and encoder inference are not part of this package; the
operations below raise NotImplementedError so callers fail loudly.
"""

from __future__ import annotations

import dataclasses
import pathlib
from typing import List, Optional, Sequence, Tuple


@dataclasses.dataclass
class ExtractionJob:
    wsi_paths: List[pathlib.Path]
    clinical_csv: pathlib.Path
    encoder: str
    reference: pathlib.Path
    out_dir: pathlib.Path
    k: int = 300
    patch_size: int = 224
    magnification: float = 20.0
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.patch_size <= 0:
            raise ValueError("patch_size must be > 0")
        if self.magnification <= 0:
            raise ValueError("magnification must be > 0")
        if not self.encoder:
            raise ValueError("encoder name is empty")


def tissue_mask(wsi) -> "numpy.ndarray":
    """Low-resolution boolean tissue mask of a slide."""
    raise NotImplementedError("tissue masking needs a slide-reading backend")


def sample_patches(wsi, mask, k: int, patch_size: int, seed: int) -> Tuple[list, List[Tuple[int, int]]]:
    """k seeded patches over mask-covered grid positions, with their coordinates."""
    raise NotImplementedError("patch sampling needs a slide-reading backend")


def extract_bags(job: ExtractionJob, slides: Optional[Sequence[str]] = None) -> pathlib.Path:
    """Write one MILB bag per slide plus a manifest; returns the manifest path."""
    job.validate()
    raise NotImplementedError("bag extraction needs a slide reader and an encoder")
