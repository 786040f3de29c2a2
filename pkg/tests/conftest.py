import numpy as np
import pytest

from selfcollage.backbone import BackboneSpec, load_backbone
from selfcollage.clustering import fit_kmeans
from selfcollage.composer import Composer, ComposerConfig
from selfcollage.datasets import ShapeParams, noise_background_source, synthetic_shape_source


@pytest.fixture(scope="session")
def handcrafted():
    return load_backbone(BackboneSpec("handcrafted", patch_size=8))


@pytest.fixture(scope="session")
def small_composer(handcrafted):
    """64 px collages of fixed-size synthetic shapes, one cluster per type."""
    objects = synthetic_shape_source(ShapeParams(size_range=(24, 24)), 240, seed=0)
    backgrounds = noise_background_source(20, 64, seed=0)
    clusters = fit_kmeans(objects.embeddings(handcrafted), 12, seed=0)
    config = ComposerConfig(n_min=3, n_max=9, d_min=10, d_max=18, height=64, width=64,
                            exemplar_height=16, exemplar_width=16)
    return Composer(config, objects, backgrounds, clusters)


def blob_image(size=64, box=(20, 24, 16, 12), color=(250, 250, 250), bg=(10, 10, 10)):
    img = np.empty((size, size, 3), np.uint8)
    img[:] = bg
    x, y, w, h = box
    img[y:y + h, x:x + w] = color
    return img


_ACCEPTANCE = {}


def record_acceptance(number, name, ok, detail=""):
    _ACCEPTANCE[number] = (name, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        name, ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}")
