import os
import sys

import pytest


sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from handcontact.lib import fixtures  # noqa: E402
from handcontact.lib.mllm_client import BackendConfig, MllmClient, OracleBackend, encode_image  # noqa: E402
from handcontact.lib.pipeline import PipelineContext  # noqa: E402
from handcontact.lib.prompt_engine import load_templates  # noqa: E402
from handcontact.lib.visual_prompt import ViewConfig, render_full_prompt, render_part_prompt  # noqa: E402


SMALL_VIEWS = ViewConfig(image_width=96, image_height=96, margin=4)


@pytest.fixture(scope="session")
def hand_mesh():
    return fixtures.synthetic_hand_mesh()


@pytest.fixture(scope="session")
def detailed_seg(hand_mesh):
    return fixtures.detailed_segmentation(hand_mesh)


@pytest.fixture(scope="session")
def coarse_seg(hand_mesh):
    return fixtures.coarse_segmentation(hand_mesh)


@pytest.fixture(scope="session")
def templates():
    return load_templates()


@pytest.fixture(scope="session")
def prompt_images(hand_mesh, detailed_seg):
    part = render_part_prompt(hand_mesh, detailed_seg, SMALL_VIEWS)
    full = render_full_prompt(hand_mesh, detailed_seg, SMALL_VIEWS)
    return encode_image(part.image), encode_image(full.image)


@pytest.fixture(scope="session")
def fixture_assets(tmp_path_factory):
    return fixtures.write_fixture_assets(tmp_path_factory.mktemp("assets"))


@pytest.fixture
def make_context(detailed_seg, templates, prompt_images):
    """Pipeline context over the detailed segmentation with an oracle backend."""

    def _make(ground_truth, *, corruption=None, seed=0, flags=None, seg=None):
        seg = seg or detailed_seg
        config = BackendConfig(kind="oracle")
        backend = OracleBackend(seg, ground_truth, corruption=corruption, seed=seed)
        kwargs = {} if flags is None else {"flags": flags}
        return PipelineContext(
            seg=seg,
            templates=templates,
            client=MllmClient(backend, config),
            part_prompt=prompt_images[0],
            full_prompt=prompt_images[1],
            **kwargs,
        )

    return _make
