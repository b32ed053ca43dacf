import numpy as np
import pytest

from hsida.data import (HsiCube, SceneSpec, extract_patches, random_prototypes,
                        synth_domain_pair, zscore_normalize)


def small_scene_spec(num_classes=3, bands=8, size=16, gain=None, offset=None,
                     noise=0.1, sites=9):
    means, stds = random_prototypes(num_classes, bands, seed=0)
    if gain is None:
        gain = np.ones(bands)
    if offset is None:
        offset = np.zeros(bands)
    return SceneSpec(num_classes, bands, size, size, means, stds,
                     np.asarray(gain, dtype=np.float64),
                     np.asarray(offset, dtype=np.float64),
                     noise_level=noise, region_sites=sites)


@pytest.fixture
def tiny_cube():
    rng = np.random.default_rng(0)
    refl = rng.normal(size=(5, 5, 4)).astype(np.float32)
    labels = np.zeros((5, 5), dtype=np.int64)
    labels[0, 0] = 1
    labels[2, 3] = 2
    labels[4, 4] = 1
    return HsiCube(refl, labels, num_classes=2)


@pytest.fixture
def patch_pair():
    """Small normalized source/target patch sets for trainer-level tests."""
    spec = small_scene_spec()
    src_cube, tgt_cube = synth_domain_pair(spec, seed=3)
    src = extract_patches(zscore_normalize(src_cube), 11, "source")
    tgt = extract_patches(zscore_normalize(tgt_cube), 11, "target")
    return src, tgt
