from pathlib import Path

import numpy as np
import pytest

from featbind.data import (
    ClassCatalog,
    DatasetManifest,
    ManifestEntry,
    write_image,
    write_label_png,
    write_manifest,
)
from featbind.toy import ToyConfig, generate_toy_dataset


def write_samples(root: Path, samples: dict[str, tuple[np.ndarray, np.ndarray]]) -> DatasetManifest:
    """Write (image, mask) pairs as PNGs plus a manifest; returns the manifest."""
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, (image, mask) in samples.items():
        write_image(root / f"{sid}.png", image)
        write_label_png(root / f"{sid}_m.png", mask)
        entries.append(ManifestEntry(sid, f"{sid}.png", f"{sid}_m.png"))
    manifest = DatasetManifest(tuple(entries), root)
    write_manifest(manifest, root / "manifest.jsonl")
    return manifest


def mask_with_classes(classes, size=8, rng=None) -> np.ndarray:
    """Mask with one stripe per class on background."""
    mask = np.zeros((size, size), dtype=np.int64)
    for i, c in enumerate(sorted(classes)):
        mask[i, :] = c
    return mask


@pytest.fixture
def catalog5():
    return ClassCatalog(("background", "a", "b", "c", "d"))


@pytest.fixture
def voc():
    return ClassCatalog.voc()


@pytest.fixture(scope="session")
def toy50(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy50")
    cfg = ToyConfig(n_images=50, seed=11, occlusion_rate=0.5, max_instances_per_image=4)
    return generate_toy_dataset(cfg, out), cfg.catalog()


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Collects one line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_VERDICTS, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
