import numpy as np
import pytest

from bmqa.synth import SynthConfig, synth_dataset, synth_generate

TINY_INI = """\
[pipeline]
pt_scenes = 10
[pt]
epochs = 1
[ss]
epochs = 1
[st]
epochs = 2
[cap]
epochs = 1
"""


@pytest.fixture(scope="session")
def tiny_synth():
    return SynthConfig(n_scenes=12, variants=2)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_synth):
    return synth_dataset(tiny_synth)


@pytest.fixture(scope="session")
def tiny_tree(tmp_path_factory, tiny_synth):
    root = tmp_path_factory.mktemp("tiny")
    manifest = synth_generate(tiny_synth, root / "data")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    return {"root": root, "manifest": str(manifest), "ini": str(ini)}
